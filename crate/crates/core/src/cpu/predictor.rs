use std::collections::HashMap;

/// Per-PC two-bit saturating counters. Counters start weakly not-taken.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BranchPredictor {
    counters: HashMap<usize, u8>,
}

const WEAKLY_NOT_TAKEN: u8 = 1;

impl BranchPredictor {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn predict(&self, pc: usize) -> bool {
        self.counter(pc) >= 2
    }

    pub fn counter(&self, pc: usize) -> u8 {
        self.counters.get(&pc).copied().unwrap_or(WEAKLY_NOT_TAKEN)
    }

    pub fn update(&mut self, pc: usize, taken: bool) {
        let c = self.counters.entry(pc).or_insert(WEAKLY_NOT_TAKEN);
        *c = if taken {
            (*c + 1).min(3)
        } else {
            c.saturating_sub(1)
        };
    }
}
