//! A simulation instance: the shared hierarchy, one [`Core`] per hierarchy
//! core, and a global clock.

use serde::{Deserialize, Serialize};

use crate::cpu::{Core, CoreConfig, ExecutionTrace, Program, Reg};
use crate::defense::DefenseConfig;
use crate::error::{Result, SimError};
use crate::hierarchy::{AccessOutcome, Hierarchy, HierarchyConfig, StoreOutcome};
use crate::protocol::{CacheRequest, CoreId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SystemConfig {
    pub hierarchy: HierarchyConfig,
    pub core: CoreConfig,
    pub defense: DefenseConfig,
    /// Uniform jitter amplitude (cycles) applied to every memory access.
    pub noise_jitter: u64,
    pub seed: u64,
}

impl SystemConfig {
    pub fn new(defense: DefenseConfig) -> Self {
        Self {
            defense,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct System {
    config: SystemConfig,
    hier: Hierarchy,
    cores: Vec<Core>,
    clock: u64,
}

impl System {
    pub fn new(config: SystemConfig) -> Result<Self> {
        config.core.validate()?;
        let mut hier = Hierarchy::new(config.hierarchy, config.defense)?;
        if config.noise_jitter > 0 {
            hier = hier.with_memory_jitter(config.noise_jitter, config.seed);
        }
        let cores = (0..config.hierarchy.cores)
            .map(|id| Core::new(id, config.core, config.defense.spdm))
            .collect();
        Ok(Self {
            config,
            hier,
            cores,
            clock: 0,
        })
    }

    pub fn config(&self) -> &SystemConfig {
        &self.config
    }

    pub fn now(&self) -> u64 {
        self.clock
    }

    /// Move the clock forward to `cycle` (never backwards).
    pub fn advance_to(&mut self, cycle: u64) {
        self.clock = self.clock.max(cycle);
    }

    pub fn hierarchy(&self) -> &Hierarchy {
        &self.hier
    }

    pub fn hierarchy_mut(&mut self) -> &mut Hierarchy {
        &mut self.hier
    }

    pub fn core(&self, id: CoreId) -> Result<&Core> {
        self.cores.get(id).ok_or_else(|| {
            SimError::config(format!(
                "core {id} does not exist ({} cores)",
                self.cores.len()
            ))
        })
    }

    /// Run a program on one core starting now; the clock advances to its end.
    pub fn execute(
        &mut self,
        core: CoreId,
        program: &Program,
        inputs: &[(Reg, u64)],
    ) -> Result<ExecutionTrace> {
        let start = self.clock;
        let n = self.cores.len();
        let c = self
            .cores
            .get_mut(core)
            .ok_or_else(|| SimError::config(format!("core {core} does not exist ({n} cores)")))?;
        let res = c.execute(program, inputs, &mut self.hier, start);
        let trace = res?;
        self.clock = trace.end_cycle;
        Ok(trace)
    }

    /// A single non-speculative demand load outside any program.
    pub fn load(&mut self, core: CoreId, byte_addr: u64) -> Result<AccessOutcome> {
        self.core(core)?;
        let line = self.hier.line(byte_addr);
        let out = self
            .hier
            .access(&CacheRequest::gets(line, core, false), self.clock)?;
        self.clock += out.total_latency;
        Ok(out)
    }

    pub fn store(&mut self, core: CoreId, byte_addr: u64) -> Result<StoreOutcome> {
        self.core(core)?;
        let line = self.hier.line(byte_addr);
        let out = self.hier.store(core, line, self.clock)?;
        self.clock += out.total_latency;
        Ok(out)
    }

    pub fn flush(&mut self, core: CoreId, byte_addr: u64) -> Result<()> {
        self.core(core)?;
        let line = self.hier.line(byte_addr);
        self.hier.flush(line, core, self.clock)
    }
}
