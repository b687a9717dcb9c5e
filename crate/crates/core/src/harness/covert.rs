//! Covert channel over the LRBS probe. The transmitter sends 1 by loading
//! the target line and 0 by leaving it alone, one bit per epoch; the receiver
//! times the probe and thresholds the result.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::lrbs::lrbs_probe;
use super::median;
use crate::cpu::Reg;
use crate::error::{Result, SimError};
use crate::protocol::CoreId;
use crate::system::{System, SystemConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelRun {
    pub payload: Vec<bool>,
    pub epoch_length: u64,
    pub repetitions: usize,
    /// Probe runs per calibration class.
    pub calibration_runs: usize,
    pub target_address: u64,
    pub lbb_address: u64,
    pub transmitter_core: CoreId,
    pub receiver_core: CoreId,
    pub training_iterations: usize,
    pub decoded: Vec<bool>,
    pub calibration: Option<(u64, u64)>,
    pub threshold: Option<f64>,
    pub closed: bool,
    pub error_rate: f64,
}

impl ChannelRun {
    pub fn new(payload: Vec<bool>) -> Self {
        Self {
            payload,
            epoch_length: 1_000_000,
            repetitions: 16,
            calibration_runs: 16,
            target_address: 0x0010_0000,
            lbb_address: 0x0020_0040,
            transmitter_core: 1,
            receiver_core: 0,
            training_iterations: 4,
            decoded: Vec::new(),
            calibration: None,
            threshold: None,
            closed: false,
            error_rate: 0.0,
        }
    }

    /// `bits` payload bits drawn from a seeded generator.
    pub fn random_payload(bits: usize, seed: u64) -> Vec<bool> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..bits).map(|_| rng.gen()).collect()
    }

    pub fn mismatches(&self) -> usize {
        self.payload
            .iter()
            .zip(&self.decoded)
            .filter(|(a, b)| a != b)
            .count()
    }
}

struct Channel {
    sys: System,
    inputs: [(Reg, u64); 2],
    epoch: u64,
}

impl Channel {
    /// Run `count` transmit/receive rounds for `bit` inside the next epoch.
    fn epoch(&mut self, run: &ChannelRun, bit: bool, count: usize) -> Result<Vec<u64>> {
        let start = self.epoch * run.epoch_length;
        self.epoch += 1;
        self.sys.advance_to(start);
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            if bit {
                self.sys.load(run.transmitter_core, run.target_address)?;
            }
            let t = self
                .sys
                .execute(run.receiver_core, lrbs_probe(), &self.inputs)?;
            out.push(t.delta().expect("probe reads the timer twice"));
        }
        if self.sys.now() > start + run.epoch_length {
            return Err(SimError::config(format!(
                "epoch length {} too short for {count} probe rounds",
                run.epoch_length
            )));
        }
        Ok(out)
    }
}

pub fn run_covert_channel(mut run: ChannelRun, config: SystemConfig) -> Result<ChannelRun> {
    if run.transmitter_core == run.receiver_core {
        return Err(SimError::config(
            "transmitter and receiver must be different cores",
        ));
    }
    if run.repetitions == 0 || run.calibration_runs == 0 {
        return Err(SimError::config(
            "repetitions and calibration runs must be positive",
        ));
    }
    let sys = System::new(config)?;
    sys.core(run.transmitter_core)?;
    sys.core(run.receiver_core)?;
    let mut ch = Channel {
        sys,
        inputs: [
            (Reg::new(1)?, run.target_address),
            (Reg::new(2)?, run.lbb_address),
        ],
        epoch: 0,
    };
    for _ in 0..run.training_iterations {
        ch.sys
            .execute(run.receiver_core, lrbs_probe(), &ch.inputs)?;
    }
    let zero = median(&ch.epoch(&run, false, run.calibration_runs)?).expect("non-empty");
    let one = median(&ch.epoch(&run, true, run.calibration_runs)?).expect("non-empty");
    run.calibration = Some((zero, one));
    run.closed = zero == one;
    run.threshold = (!run.closed).then(|| (zero as f64 + one as f64) / 2.0);

    let mut guesser = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    let mut decoded = Vec::with_capacity(run.payload.len());
    for &bit in &run.payload.clone() {
        let m = median(&ch.epoch(&run, bit, run.repetitions)?).expect("non-empty") as f64;
        decoded.push(match run.threshold {
            Some(th) if one > zero => m > th,
            Some(th) => m < th,
            None => guesser.gen(),
        });
    }
    run.decoded = decoded;
    run.error_rate = if run.payload.is_empty() {
        0.0
    } else {
        run.mismatches() as f64 / run.payload.len() as f64
    };
    Ok(run)
}
