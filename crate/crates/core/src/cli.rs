//! Command-line front end. Settings come from an optional TOML manifest,
//! then command-line flags, with flags taking precedence.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::cpu::{CoreConfig, SpdmKind};
use crate::defense::{DefenseConfig, DefenseId};
use crate::error::{Result, SimError};
use crate::harness::{self, ChannelRun, SecurityPropertyCase, Trace};
use crate::hierarchy::HierarchyConfig;
use crate::report::{self, Format};
use crate::system::SystemConfig;

pub const SCHEMA_VERSION: u32 = 1;
pub const OUT_DIR_ENV: &str = "COHSIM_OUT_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentKind {
    Attack,
    Covert,
    Property,
    Trace,
    Sweep,
}

impl ExperimentKind {
    fn name(self) -> &'static str {
        match self {
            ExperimentKind::Attack => "attack",
            ExperimentKind::Covert => "covert",
            ExperimentKind::Property => "property",
            ExperimentKind::Trace => "trace",
            ExperimentKind::Sweep => "sweep",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
    pub file: Option<PathBuf>,
    pub format: Option<Format>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CovertSection {
    pub bits: usize,
    pub epoch_length: u64,
    pub repetitions: usize,
    pub calibration_runs: usize,
}

impl Default for CovertSection {
    fn default() -> Self {
        let r = ChannelRun::new(Vec::new());
        Self {
            bits: 64,
            epoch_length: r.epoch_length,
            repetitions: r.repetitions,
            calibration_runs: r.calibration_runs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraceSection {
    pub file: Option<PathBuf>,
    pub shadow_len: usize,
}

impl Default for TraceSection {
    fn default() -> Self {
        Self {
            file: None,
            shadow_len: harness::trace::DEFAULT_SHADOW_LEN,
        }
    }
}

/// Everything needed to run one experiment. Every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunManifest {
    pub schema_version: u32,
    pub experiment: Option<ExperimentKind>,
    pub seed: u64,
    pub hierarchy: HierarchyConfig,
    pub core: CoreConfig,
    /// Empty means the experiment's default matrix.
    pub defenses: Vec<DefenseConfig>,
    pub runs: usize,
    pub jobs: Option<usize>,
    pub noise_jitter: u64,
    pub property_n: usize,
    pub output: OutputSection,
    pub covert: CovertSection,
    pub trace: TraceSection,
}

impl Default for RunManifest {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            experiment: None,
            seed: 0,
            hierarchy: HierarchyConfig::default(),
            core: CoreConfig::default(),
            defenses: Vec::new(),
            runs: 100,
            jobs: None,
            noise_jitter: 0,
            property_n: 4,
            output: OutputSection::default(),
            covert: CovertSection::default(),
            trace: TraceSection::default(),
        }
    }
}

impl RunManifest {
    pub fn from_toml(text: &str) -> Result<Self> {
        let m: RunManifest =
            toml::from_str(text).map_err(|e| SimError::config(format!("manifest: {e}")))?;
        if m.schema_version != SCHEMA_VERSION {
            return Err(SimError::config(format!(
                "manifest schema_version {} is not supported (expected {SCHEMA_VERSION})",
                m.schema_version
            )));
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            SimError::config(format!("cannot read manifest {}: {e}", path.display()))
        })?;
        Self::from_toml(&text)
    }

    pub fn system(&self, defense: DefenseConfig) -> SystemConfig {
        SystemConfig {
            hierarchy: self.hierarchy,
            core: self.core,
            defense,
            noise_jitter: self.noise_jitter,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "cohsim", version, about = "Cache coherence defense simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Option<Command>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// TOML run manifest; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub manifest: Option<PathBuf>,
    /// Defense configurations (comma separated).
    #[arg(
        long = "config",
        global = true,
        value_delimiter = ',',
        value_name = "c1..c5"
    )]
    pub configs: Vec<DefenseId>,
    /// Speculation protection models (comma separated).
    #[arg(long, global = true, value_delimiter = ',', value_name = "MODEL")]
    pub spdm: Vec<SpdmKind>,
    /// Give C4's initial protected access the full TORC delay.
    #[arg(long, global = true)]
    pub dsrm_unoptimized: bool,
    /// Measurement runs per attack cell.
    #[arg(long, global = true)]
    pub runs: Option<usize>,
    /// Worker threads for matrix experiments.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Write the report to this file (or into this directory).
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Default directory for reports.
    #[arg(long, global = true, env = OUT_DIR_ENV, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
    /// Uniform +/- jitter on memory latency, in cycles.
    #[arg(long, global = true, value_name = "CYCLES")]
    pub noise_jitter: Option<u64>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Secret 0/1 probe timings per defense configuration.
    Attack,
    /// Transmit a random payload through the probe.
    Covert {
        #[arg(long)]
        bits: Option<usize>,
    },
    /// Receiver-total constancy over all transmitter subsets.
    Property {
        #[arg(short = 'n', long = "size")]
        n: Option<usize>,
    },
    /// Defense statistics over a synthetic access trace.
    Trace {
        file: Option<PathBuf>,
        #[arg(long)]
        shadow_len: Option<usize>,
    },
    /// Every configuration, both models, both secrets.
    Sweep,
}

/// Result of one CLI invocation before it becomes an exit code.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outcome {
    pub output: String,
    pub pass: bool,
    pub written: Option<PathBuf>,
}

struct Resolved {
    manifest: RunManifest,
    kind: ExperimentKind,
    format: Format,
    jobs: usize,
}

fn resolve(cli: &Cli) -> Result<Resolved> {
    let c = &cli.common;
    let mut m = match &c.manifest {
        Some(p) => RunManifest::load(p)?,
        None => RunManifest::default(),
    };
    let kind = match &cli.command {
        Some(Command::Attack) => ExperimentKind::Attack,
        Some(Command::Covert { bits }) => {
            if let Some(b) = bits {
                m.covert.bits = *b;
            }
            ExperimentKind::Covert
        }
        Some(Command::Property { n }) => {
            if let Some(n) = n {
                m.property_n = *n;
            }
            ExperimentKind::Property
        }
        Some(Command::Trace { file, shadow_len }) => {
            if let Some(f) = file {
                m.trace.file = Some(f.clone());
            }
            if let Some(s) = shadow_len {
                m.trace.shadow_len = *s;
            }
            ExperimentKind::Trace
        }
        Some(Command::Sweep) => ExperimentKind::Sweep,
        None => m.experiment.ok_or_else(|| {
            SimError::config(
                "no experiment given (use a subcommand or set `experiment` in the manifest)",
            )
        })?,
    };
    m.experiment = Some(kind);
    if let Some(r) = c.runs {
        m.runs = r;
    }
    if let Some(j) = c.jobs {
        m.jobs = Some(j);
    }
    if let Some(n) = c.noise_jitter {
        m.noise_jitter = n;
    }
    if let Some(s) = c.seed {
        m.seed = s;
    }
    if !c.configs.is_empty() || !c.spdm.is_empty() || c.dsrm_unoptimized || m.defenses.is_empty() {
        let ids = if !c.configs.is_empty() {
            c.configs.clone()
        } else if !m.defenses.is_empty() {
            dedup(m.defenses.iter().map(|d| d.id).collect())
        } else {
            default_ids(kind)
        };
        let spdms = if !c.spdm.is_empty() {
            c.spdm.clone()
        } else if !m.defenses.is_empty() {
            dedup(m.defenses.iter().map(|d| d.spdm).collect())
        } else if kind == ExperimentKind::Sweep {
            SpdmKind::ALL.to_vec()
        } else {
            vec![SpdmKind::BranchShadow]
        };
        let optimized = !c.dsrm_unoptimized && m.defenses.iter().all(|d| d.dsrm_optimized);
        m.defenses = spdms
            .iter()
            .flat_map(|&s| {
                ids.iter()
                    .map(move |&id| DefenseConfig::new(id, s).with_dsrm_optimized(optimized))
            })
            .collect();
    }
    if c.out_dir.is_some() {
        m.output.dir = c.out_dir.clone();
    }
    if m.runs == 0 {
        return Err(SimError::config("--runs must be positive"));
    }
    let format = c.format.or(m.output.format).unwrap_or_default();
    let jobs = m
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    Ok(Resolved {
        manifest: m,
        kind,
        format,
        jobs,
    })
}

fn dedup<T: PartialEq>(v: Vec<T>) -> Vec<T> {
    let mut out = Vec::new();
    for x in v {
        if !out.contains(&x) {
            out.push(x);
        }
    }
    out
}

fn default_ids(kind: ExperimentKind) -> Vec<DefenseId> {
    match kind {
        ExperimentKind::Attack | ExperimentKind::Sweep | ExperimentKind::Trace => {
            DefenseId::ALL.to_vec()
        }
        ExperimentKind::Covert => vec![
            DefenseId::C3TorcDsrc,
            DefenseId::C4TorcDsrm,
            DefenseId::C5TorcDsrcSsMesi,
        ],
        ExperimentKind::Property => vec![DefenseId::C4TorcDsrm, DefenseId::C5TorcDsrcSsMesi],
    }
}

fn run_experiment(r: &Resolved) -> Result<(String, bool)> {
    let m = &r.manifest;
    let f = r.format;
    Ok(match r.kind {
        ExperimentKind::Attack | ExperimentKind::Sweep => {
            let cells: Vec<harness::MatrixCell> = m
                .defenses
                .iter()
                .flat_map(|&d| {
                    [false, true].map(|secret| harness::MatrixCell { defense: d, secret })
                })
                .collect();
            let results =
                harness::run_matrix(m.system(DefenseConfig::default()), &cells, m.runs, r.jobs)?;
            let checks = harness::check_pattern(&results);
            let title = format!("probe timing, median of {} runs", m.runs);
            let rep = report::attack_report(r.kind.name(), &title, &results, checks);
            (rep.render(f), rep.pass)
        }
        ExperimentKind::Property => {
            let reports = m
                .defenses
                .iter()
                .map(|&d| {
                    harness::check_security_property(&SecurityPropertyCase::new(
                        m.system(d),
                        m.property_n,
                    ))
                })
                .collect::<Result<Vec<_>>>()?;
            let rep = report::property_report(reports);
            (rep.render(f), rep.pass)
        }
        ExperimentKind::Covert => {
            let payload = ChannelRun::random_payload(m.covert.bits, m.seed);
            let rows = m
                .defenses
                .iter()
                .map(|&d| {
                    let mut run = ChannelRun::new(payload.clone());
                    run.epoch_length = m.covert.epoch_length;
                    run.repetitions = m.covert.repetitions;
                    run.calibration_runs = m.covert.calibration_runs;
                    Ok(report::CovertRow {
                        config: d.describe(),
                        run: harness::run_covert_channel(run, m.system(d))?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let rep = report::covert_report(rows);
            (rep.render(f), rep.pass)
        }
        ExperimentKind::Trace => {
            let path = m
                .trace
                .file
                .as_ref()
                .ok_or_else(|| SimError::config("trace experiment needs a trace file"))?;
            let text = std::fs::read_to_string(path).map_err(|e| {
                SimError::config(format!("cannot read trace {}: {e}", path.display()))
            })?;
            let trace = Trace::parse(&text)?;
            let stats = m
                .defenses
                .iter()
                .map(|&d| harness::run_trace_workload(&trace, m.system(d), m.trace.shadow_len))
                .collect::<Result<Vec<_>>>()?;
            let mut notes = Vec::new();
            let mut pass = true;
            for spdm in SpdmKind::ALL {
                let find = |id| {
                    m.defenses
                        .iter()
                        .position(|d| d.id == id && d.spdm == spdm)
                        .map(|i| &stats[i])
                };
                if let (Some(c3), Some(c4)) =
                    (find(DefenseId::C3TorcDsrc), find(DefenseId::C4TorcDsrm))
                {
                    let ok = c3
                        .redo_lines
                        .iter()
                        .all(|l| c4.redo_lines.binary_search(l).is_ok());
                    pass &= ok;
                    notes.push(format!(
                        "{} {spdm}: c4 redos ({}) include every c3 redo ({})",
                        if ok { "PASS" } else { "FAIL" },
                        c4.redos,
                        c3.redos
                    ));
                }
            }
            let rep = report::trace_report(stats, notes, pass);
            (rep.render(f), rep.pass)
        }
    })
}

fn output_path(r: &Resolved, out: Option<&Path>) -> Option<PathBuf> {
    let file_name = format!("{}.{}", r.kind.name(), r.format.extension());
    match out
        .map(Path::to_path_buf)
        .or_else(|| r.manifest.output.file.clone())
    {
        Some(p) if p.is_dir() => Some(p.join(file_name)),
        Some(p) => Some(p),
        None => r.manifest.output.dir.as_ref().map(|d| d.join(file_name)),
    }
}

/// Parse-free entry point used by the binary and by tests.
pub fn execute(cli: &Cli) -> Result<Outcome> {
    let r = resolve(cli)?;
    let (output, pass) = run_experiment(&r)?;
    let written = output_path(&r, cli.common.out.as_deref());
    if let Some(p) = &written {
        if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| {
                SimError::config(format!("cannot create {}: {e}", parent.display()))
            })?;
        }
        std::fs::write(p, &output)
            .map_err(|e| SimError::config(format!("cannot write {}: {e}", p.display())))?;
    }
    Ok(Outcome {
        output,
        pass,
        written,
    })
}

/// Run with the given argv; returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(o) => {
            print!("{}", o.output);
            if o.pass {
                0
            } else {
                1
            }
        }
        Err(e @ SimError::Deadlock { .. }) => {
            eprintln!("error: {e}");
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("cohsim").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn attack_defaults_to_ten_cells() {
        let r = resolve(&parse(&["attack"])).unwrap();
        assert_eq!(r.manifest.defenses.len(), 5);
        assert!(r
            .manifest
            .defenses
            .iter()
            .all(|d| d.spdm == SpdmKind::BranchShadow));
    }

    #[test]
    fn sweep_defaults_to_both_models() {
        let r = resolve(&parse(&["sweep"])).unwrap();
        assert_eq!(r.manifest.defenses.len(), 10);
    }

    #[test]
    fn flags_override_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.toml");
        std::fs::write(
            &p,
            "schema_version = 1\nexperiment = \"attack\"\nruns = 7\n[[defenses]]\nid = \"c2\"\nspdm = \"rob-head\"\n",
        )
        .unwrap();
        let r = resolve(&parse(&["--manifest", p.to_str().unwrap()])).unwrap();
        assert_eq!(r.kind, ExperimentKind::Attack);
        assert_eq!(r.manifest.runs, 7);
        assert_eq!(
            r.manifest.defenses,
            vec![DefenseConfig::new(DefenseId::C2Torc, SpdmKind::RobHead)]
        );
        let r = resolve(&parse(&[
            "attack",
            "--manifest",
            p.to_str().unwrap(),
            "--runs",
            "3",
            "--config",
            "c3",
        ]))
        .unwrap();
        assert_eq!(r.manifest.runs, 3);
        assert_eq!(
            r.manifest.defenses,
            vec![DefenseConfig::new(DefenseId::C3TorcDsrc, SpdmKind::RobHead)]
        );
    }

    #[test]
    fn manifest_schema_checked() {
        assert!(RunManifest::from_toml("schema_version = 2\n").is_err());
        assert!(RunManifest::from_toml("bogus = 1\n").is_err());
        let m =
            RunManifest::from_toml("experiment = \"property\"\n[hierarchy.timing]\nt_mem = 200\n")
                .unwrap();
        assert_eq!(m.hierarchy.timing.t_mem, 200);
        assert_eq!(m.hierarchy.timing.t_llc, 40);
    }

    #[test]
    fn missing_experiment_is_config_error() {
        assert!(matches!(resolve(&parse(&[])), Err(SimError::Config(_))));
    }

    #[test]
    fn unknown_flag_exits_2() {
        assert_eq!(main_with(["cohsim", "attack", "--frobnicate"]), 2);
        assert_eq!(main_with(["cohsim", "attack", "--config", "c9"]), 2);
    }
}
