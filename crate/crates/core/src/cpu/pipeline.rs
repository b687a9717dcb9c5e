use std::collections::VecDeque;

use super::program::{AluOp, Instruction, Program, Reg, NUM_REGS};
use super::{
    spdm_flag, BranchPredictor, CoreConfig, ExecutionTrace, RedoEvent, RobEntry, RobStatus,
    SpdmKind, TimerRead,
};
use crate::error::{Result, SimError};
use crate::hierarchy::Hierarchy;
use crate::protocol::{CacheRequest, CoreId, ResponseKind};

#[derive(Debug, Clone, Copy)]
enum Operand {
    Value(u64),
    Producer(usize),
}

/// Per-entry state that does not belong in the public record.
#[derive(Debug, Clone)]
struct Slot {
    sources: Vec<Operand>,
    ready_at: u64,
    redone: bool,
}

/// One core: its configuration and the branch predictor, which persists
/// across executions so that a probe can be trained.
#[derive(Debug, Clone)]
pub struct Core {
    id: CoreId,
    config: CoreConfig,
    spdm: SpdmKind,
    predictor: BranchPredictor,
}

struct Run<'a> {
    core: &'a mut Core,
    hier: &'a mut Hierarchy,
    program: &'a Program,
    entries: Vec<RobEntry>,
    slots: Vec<Slot>,
    rob: VecDeque<usize>,
    rename: [Option<usize>; NUM_REGS],
    regs: [u64; NUM_REGS],
    fetch_pc: usize,
    store_drain: u64,
    redos: Vec<RedoEvent>,
    timer_reads: Vec<TimerRead>,
    cycle: u64,
}

impl Core {
    pub fn new(id: CoreId, config: CoreConfig, spdm: SpdmKind) -> Self {
        Self {
            id,
            config,
            spdm,
            predictor: BranchPredictor::new(),
        }
    }

    pub fn id(&self) -> CoreId {
        self.id
    }

    pub fn config(&self) -> &CoreConfig {
        &self.config
    }

    pub fn spdm(&self) -> SpdmKind {
        self.spdm
    }

    pub fn predictor(&self) -> &BranchPredictor {
        &self.predictor
    }

    /// Run `program` to completion starting at cycle `start`. Registers not
    /// listed in `inputs` start at zero.
    pub fn execute(
        &mut self,
        program: &Program,
        inputs: &[(Reg, u64)],
        hier: &mut Hierarchy,
        start: u64,
    ) -> Result<ExecutionTrace> {
        self.config.validate()?;
        let mut regs = [0u64; NUM_REGS];
        for &(r, v) in inputs {
            regs[r.index()] = v;
        }
        let first_event = hier.events().len();
        let mut run = Run {
            core: self,
            hier,
            program,
            entries: Vec::new(),
            slots: Vec::new(),
            rob: VecDeque::new(),
            rename: [None; NUM_REGS],
            regs,
            fetch_pc: 0,
            store_drain: start,
            redos: Vec::new(),
            timer_reads: Vec::new(),
            cycle: start,
        };
        run.run(start)?;
        let end_cycle = run.cycle.max(run.store_drain);
        let Run {
            entries,
            redos,
            timer_reads,
            regs,
            hier,
            core,
            ..
        } = run;
        Ok(ExecutionTrace {
            core: core.id,
            start_cycle: start,
            end_cycle,
            records: entries,
            events: hier.events()[first_event..].to_vec(),
            redos,
            timer_reads,
            registers: regs,
        })
    }
}

impl Run<'_> {
    fn run(&mut self, start: u64) -> Result<()> {
        loop {
            if self.rob.is_empty() && self.fetch_pc >= self.program.len() {
                return Ok(());
            }
            if self.cycle - start > self.core.config.max_cycles {
                return Err(self.deadlock("cycle budget exhausted"));
            }
            let mut progress = self.complete();
            progress |= self.commit()?;
            progress |= self.issue()?;
            progress |= self.dispatch();
            if progress {
                self.cycle += 1;
                continue;
            }
            let next = self
                .rob
                .iter()
                .filter(|&&s| self.entries[s].status == RobStatus::Issued)
                .map(|&s| self.slots[s].ready_at)
                .chain((self.store_drain > self.cycle).then_some(self.store_drain))
                .filter(|&c| c > self.cycle)
                .min();
            match next {
                Some(c) => self.cycle = c,
                None => return Err(self.deadlock("no pending event can make progress")),
            }
        }
    }

    fn deadlock(&self, why: &str) -> SimError {
        let head = self.rob.front().map(|&s| {
            let e = &self.entries[s];
            format!(
                "head seq {} pc {} `{}` {:?}",
                e.seq,
                e.pc,
                e.instruction.mnemonic(),
                e.status
            )
        });
        SimError::Deadlock {
            core: self.core.id,
            cycle: self.cycle,
            diagnostic: format!(
                "{why}; {} in ROB, fetch pc {}; {}",
                self.rob.len(),
                self.fetch_pc,
                head.unwrap_or_else(|| "ROB empty".into())
            ),
        }
    }

    fn operand_value(&self, op: Operand) -> Option<u64> {
        match op {
            Operand::Value(v) => Some(v),
            Operand::Producer(p) => {
                let e = &self.entries[p];
                if e.status.is_complete() {
                    e.value
                } else {
                    None
                }
            }
        }
    }

    fn sources_ready(&self, seq: usize) -> Option<Vec<u64>> {
        self.slots[seq]
            .sources
            .iter()
            .map(|&op| self.operand_value(op))
            .collect()
    }

    /// Phase 1: responses arrive and branches resolve.
    fn complete(&mut self) -> bool {
        let mut progress = false;
        let mut i = 0;
        while i < self.rob.len() {
            let seq = self.rob[i];
            i += 1;
            if self.entries[seq].status != RobStatus::Issued
                || self.slots[seq].ready_at > self.cycle
            {
                continue;
            }
            progress = true;
            let ready_at = self.slots[seq].ready_at;
            let e = &mut self.entries[seq];
            if e.response == Some(ResponseKind::RemoteEm) && !self.slots[seq].redone {
                e.status = RobStatus::AwaitingRedo;
                continue;
            }
            e.status = RobStatus::Executed;
            e.complete_cycle = Some(ready_at);
            if let Instruction::Branch { when, target, .. } = e.instruction {
                let taken = when.taken(e.value.unwrap_or(0));
                let pc = e.pc;
                let predicted = e.predicted_taken.unwrap_or(false);
                self.core.predictor.update(pc, taken);
                if taken != predicted {
                    self.squash_after(i);
                    self.fetch_pc = if taken { target } else { pc + 1 };
                }
            }
        }
        progress
    }

    /// Drop every ROB entry from position `keep` onwards.
    fn squash_after(&mut self, keep: usize) {
        for seq in self.rob.drain(keep..) {
            self.entries[seq].status = RobStatus::Squashed;
        }
        self.rename = [None; NUM_REGS];
        for &seq in &self.rob {
            if let Some(d) = self.entries[seq].instruction.dest() {
                self.rename[d.index()] = Some(seq);
            }
        }
    }

    /// Phase 2: in-order commit. Stores and flushes reach the hierarchy here.
    fn commit(&mut self) -> Result<bool> {
        let mut n = 0;
        while n < self.core.config.width {
            let Some(&seq) = self.rob.front() else { break };
            if self.entries[seq].status != RobStatus::Executed {
                break;
            }
            let core = self.core.id;
            let now = self.cycle;
            match self.entries[seq].instruction {
                Instruction::Store { .. } => {
                    let line = self.entries[seq]
                        .address
                        .expect("store address computed at issue");
                    let out = self.hier.store(core, line, now)?;
                    self.store_drain = self.store_drain.max(now + out.total_latency);
                }
                Instruction::Flush { .. } => {
                    let line = self.entries[seq]
                        .address
                        .expect("flush address computed at issue");
                    self.hier.flush(line, core, now)?;
                }
                Instruction::ReadTimer { .. } => self.timer_reads.push(TimerRead {
                    pc: self.entries[seq].pc,
                    value: self.entries[seq].value.unwrap_or(0),
                }),
                _ => {}
            }
            let e = &mut self.entries[seq];
            if let Some(d) = e.instruction.dest() {
                self.regs[d.index()] = e.value.unwrap_or(0);
                if self.rename[d.index()] == Some(seq) {
                    self.rename[d.index()] = None;
                }
            }
            e.status = RobStatus::Committed;
            e.commit_cycle = Some(now);
            self.rob.pop_front();
            n += 1;
        }
        Ok(n > 0)
    }

    /// Phase 3: oldest-first issue. One load port per cycle, shared by redos.
    fn issue(&mut self) -> Result<bool> {
        let mut progress = false;
        let mut port_used = false;
        // Facts about the entries older than the one being considered.
        let mut load_fence_pending = false;
        let mut mem_fence_pending = false;
        let mut older_ordered_incomplete = false;
        let mut older_unresolved_branch = false;
        let now = self.cycle;
        let line_size = self.hier.config().line_size;

        for pos in 0..self.rob.len() {
            let seq = self.rob[pos];
            let status = self.entries[seq].status;
            let ins = self.entries[seq].instruction;

            if status == RobStatus::Dispatched && self.entries[seq].dispatch_cycle < now {
                if let Some(vals) = self.sources_ready(seq) {
                    let issued = match ins {
                        Instruction::Alu { op, .. } => {
                            let v = match op {
                                AluOp::Imm(v) => v,
                                AluOp::Mov(_) => vals[0],
                                AluOp::Add(..) => vals[0].wrapping_add(vals[1]),
                                AluOp::Sub(..) => vals[0].wrapping_sub(vals[1]),
                                AluOp::Xor(..) => vals[0] ^ vals[1],
                            };
                            Some((v, now + self.core.config.alu_latency))
                        }
                        Instruction::Load { .. } if !load_fence_pending && !port_used => {
                            port_used = true;
                            let older: Vec<&RobEntry> =
                                self.rob.range(..pos).map(|&s| &self.entries[s]).collect();
                            let flag = spdm_flag(&older, self.core.spdm);
                            let line = crate::protocol::LineAddr::containing(vals[0], line_size);
                            let out = self
                                .hier
                                .access(&CacheRequest::gets(line, self.core.id, flag), now)?;
                            let e = &mut self.entries[seq];
                            e.spec_flag = Some(flag);
                            e.address = Some(line);
                            e.response = Some(out.response.kind());
                            let v = out.response.token().map(|t| t.0).unwrap_or(0);
                            Some((v, now + out.total_latency))
                        }
                        Instruction::Store { .. } | Instruction::Flush { .. }
                            if !mem_fence_pending =>
                        {
                            self.entries[seq].address =
                                Some(crate::protocol::LineAddr::containing(vals[0], line_size));
                            Some((0, now + 1))
                        }
                        Instruction::Branch { .. } => {
                            Some((vals[0], now + self.core.config.branch_resolve_latency))
                        }
                        Instruction::FenceLoads
                            if !load_fence_pending && !older_ordered_incomplete =>
                        {
                            Some((0, now + 1))
                        }
                        Instruction::FenceMem if pos == 0 && self.store_drain <= now => {
                            Some((0, now + 1))
                        }
                        Instruction::ReadTimer { .. } if !load_fence_pending => {
                            Some((now, now + 1))
                        }
                        _ => None,
                    };
                    if let Some((value, ready_at)) = issued {
                        let e = &mut self.entries[seq];
                        e.status = RobStatus::Issued;
                        e.issue_cycle = Some(now);
                        e.value = Some(value);
                        self.slots[seq].ready_at = ready_at;
                        progress = true;
                    }
                }
            } else if status == RobStatus::AwaitingRedo && !port_used {
                let safe = match self.core.spdm {
                    SpdmKind::BranchShadow => !older_unresolved_branch,
                    SpdmKind::RobHead => pos == 0,
                };
                if safe {
                    port_used = true;
                    let line = self.entries[seq]
                        .address
                        .expect("load address recorded at issue");
                    let out = self
                        .hier
                        .access(&CacheRequest::redo(line, self.core.id), now)?;
                    let e = &mut self.entries[seq];
                    self.redos.push(RedoEvent {
                        seq,
                        pc: e.pc,
                        address: line,
                        first_issue: e.issue_cycle.unwrap_or(now),
                        remote_em_cycle: self.slots[seq].ready_at,
                        redo_cycle: now,
                        latency: out.total_latency,
                    });
                    e.status = RobStatus::Issued;
                    e.redo_issue_cycle = Some(now);
                    e.value = Some(out.response.token().map(|t| t.0).unwrap_or(0));
                    self.slots[seq].ready_at = now + out.total_latency;
                    self.slots[seq].redone = true;
                    progress = true;
                }
            }

            let e = &self.entries[seq];
            let done = e.status.is_complete();
            match e.instruction {
                Instruction::FenceLoads if !done => load_fence_pending = true,
                Instruction::FenceMem if !done => {
                    load_fence_pending = true;
                    mem_fence_pending = true;
                }
                Instruction::Branch { .. } if !done => older_unresolved_branch = true,
                _ => {}
            }
            if !done
                && matches!(
                    e.instruction,
                    Instruction::Load { .. }
                        | Instruction::ReadTimer { .. }
                        | Instruction::FenceLoads
                        | Instruction::FenceMem
                )
            {
                older_ordered_incomplete = true;
            }
        }
        Ok(progress)
    }

    /// Phase 4: fetch along the predicted path.
    fn dispatch(&mut self) -> bool {
        let cfg = self.core.config;
        let mut n = 0;
        while n < cfg.width && self.fetch_pc < self.program.len() && self.rob.len() < cfg.rob_size {
            let pc = self.fetch_pc;
            let ins = self.program.instructions()[pc];
            if ins.is_load() {
                let loads = self
                    .rob
                    .iter()
                    .filter(|&&s| self.entries[s].instruction.is_load())
                    .count();
                if loads >= cfg.lq_size {
                    break;
                }
            }
            let sources = ins
                .sources()
                .into_iter()
                .map(|r| match self.rename[r.index()] {
                    Some(p) => Operand::Producer(p),
                    None => Operand::Value(self.regs[r.index()]),
                })
                .collect();
            let seq = self.entries.len();
            let mut predicted_taken = None;
            self.fetch_pc = match ins {
                Instruction::Branch { target, .. } => {
                    let t = self.core.predictor.predict(pc);
                    predicted_taken = Some(t);
                    if t {
                        target
                    } else {
                        pc + 1
                    }
                }
                _ => pc + 1,
            };
            if let Some(d) = ins.dest() {
                self.rename[d.index()] = Some(seq);
            }
            self.entries.push(RobEntry {
                seq,
                pc,
                instruction: ins,
                status: RobStatus::Dispatched,
                dispatch_cycle: self.cycle,
                issue_cycle: None,
                complete_cycle: None,
                commit_cycle: None,
                spec_flag: None,
                address: None,
                response: None,
                redo_issue_cycle: None,
                predicted_taken,
                value: None,
            });
            self.slots.push(Slot {
                sources,
                ready_at: 0,
                redone: false,
            });
            self.rob.push_back(seq);
            n += 1;
        }
        n > 0
    }
}
