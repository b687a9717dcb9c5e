//! Probe programs: a small load/branch/fence/timer instruction set and its
//! line-oriented text form.
//!
//! ```text
//! # comment                 anything after '#' is ignored
//! .in r1, r2                registers initialised by the caller
//! name:                     label (may share a line with an instruction)
//! li    rd, imm             rd <- imm (decimal or 0x-hex)
//! mov   rd, rs
//! add   rd, ra, rb          also: sub, xor
//! load  rd, [rs]
//! store [rs], rv
//! beqz  rs, label           branch if rs == 0; also: bnez
//! lfence                    orders loads and timer reads
//! mfence                    full memory barrier
//! rdtsc rd                  rd <- current cycle
//! clflush [rs]
//! ```
//!
//! Mnemonics and register names are case-insensitive. Registers are `r0`..`r15`.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};

pub const NUM_REGS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Reg(u8);

impl Reg {
    pub fn new(index: usize) -> Result<Self> {
        if index < NUM_REGS {
            Ok(Reg(index as u8))
        } else {
            Err(SimError::config(format!(
                "register r{index} out of range (r0..r{})",
                NUM_REGS - 1
            )))
        }
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AluOp {
    Imm(u64),
    Mov(Reg),
    Add(Reg, Reg),
    Sub(Reg, Reg),
    Xor(Reg, Reg),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BranchCond {
    Zero,
    NonZero,
}

impl BranchCond {
    pub fn taken(self, value: u64) -> bool {
        match self {
            BranchCond::Zero => value == 0,
            BranchCond::NonZero => value != 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Instruction {
    Load {
        dest: Reg,
        addr: Reg,
    },
    Store {
        addr: Reg,
        src: Reg,
    },
    Branch {
        cond: Reg,
        when: BranchCond,
        target: usize,
    },
    FenceLoads,
    FenceMem,
    ReadTimer {
        dest: Reg,
    },
    Flush {
        addr: Reg,
    },
    Alu {
        dest: Reg,
        op: AluOp,
    },
}

impl Instruction {
    pub fn dest(&self) -> Option<Reg> {
        match *self {
            Instruction::Load { dest, .. }
            | Instruction::ReadTimer { dest }
            | Instruction::Alu { dest, .. } => Some(dest),
            _ => None,
        }
    }

    pub fn sources(&self) -> Vec<Reg> {
        match *self {
            Instruction::Load { addr, .. } | Instruction::Flush { addr } => vec![addr],
            Instruction::Store { addr, src } => vec![addr, src],
            Instruction::Branch { cond, .. } => vec![cond],
            Instruction::Alu { op, .. } => match op {
                AluOp::Imm(_) => vec![],
                AluOp::Mov(s) => vec![s],
                AluOp::Add(a, b) | AluOp::Sub(a, b) | AluOp::Xor(a, b) => vec![a, b],
            },
            Instruction::FenceLoads | Instruction::FenceMem | Instruction::ReadTimer { .. } => {
                vec![]
            }
        }
    }

    pub fn is_load(&self) -> bool {
        matches!(self, Instruction::Load { .. })
    }

    pub fn is_branch(&self) -> bool {
        matches!(self, Instruction::Branch { .. })
    }

    pub fn mnemonic(&self) -> &'static str {
        match self {
            Instruction::Load { .. } => "load",
            Instruction::Store { .. } => "store",
            Instruction::Branch {
                when: BranchCond::Zero,
                ..
            } => "beqz",
            Instruction::Branch {
                when: BranchCond::NonZero,
                ..
            } => "bnez",
            Instruction::FenceLoads => "lfence",
            Instruction::FenceMem => "mfence",
            Instruction::ReadTimer { .. } => "rdtsc",
            Instruction::Flush { .. } => "clflush",
            Instruction::Alu {
                op: AluOp::Imm(_), ..
            } => "li",
            Instruction::Alu {
                op: AluOp::Mov(_), ..
            } => "mov",
            Instruction::Alu {
                op: AluOp::Add(..), ..
            } => "add",
            Instruction::Alu {
                op: AluOp::Sub(..), ..
            } => "sub",
            Instruction::Alu {
                op: AluOp::Xor(..), ..
            } => "xor",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Program {
    instructions: Vec<Instruction>,
    inputs: Vec<Reg>,
}

impl Program {
    /// Build and validate a program. `inputs` are registers the caller sets.
    pub fn new(instructions: Vec<Instruction>, inputs: Vec<Reg>) -> Result<Self> {
        let p = Self {
            instructions,
            inputs,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn instructions(&self) -> &[Instruction] {
        &self.instructions
    }

    pub fn inputs(&self) -> &[Reg] {
        &self.inputs
    }

    pub fn len(&self) -> usize {
        self.instructions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instructions.is_empty()
    }

    fn validate(&self) -> Result<()> {
        let mut written = [false; NUM_REGS];
        for r in &self.inputs {
            written[r.index()] = true;
        }
        for (pc, ins) in self.instructions.iter().enumerate() {
            if let Instruction::Branch { cond, target, .. } = ins {
                if *target > self.instructions.len() {
                    return Err(SimError::config(format!(
                        "branch at {pc} targets {target}, past the end of a {}-instruction program",
                        self.instructions.len()
                    )));
                }
                if !written[cond.index()] {
                    return Err(SimError::config(format!(
                        "branch at {pc} tests {cond}, which no earlier instruction writes"
                    )));
                }
            }
            if let Some(d) = ins.dest() {
                written[d.index()] = true;
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        Parser::default().parse(text)
    }

    /// Render back to the text form; `Program::parse(&p.to_text()) == p`.
    pub fn to_text(&self) -> String {
        let mut targets: Vec<usize> = self
            .instructions
            .iter()
            .filter_map(|i| match i {
                Instruction::Branch { target, .. } => Some(*target),
                _ => None,
            })
            .collect();
        targets.sort_unstable();
        targets.dedup();
        let label = |t: usize| format!("L{t}");
        let mut out = String::new();
        if !self.inputs.is_empty() {
            let regs: Vec<String> = self.inputs.iter().map(Reg::to_string).collect();
            out.push_str(&format!(".in {}\n", regs.join(", ")));
        }
        for pc in 0..=self.instructions.len() {
            if targets.binary_search(&pc).is_ok() {
                out.push_str(&format!("{}:\n", label(pc)));
            }
            let Some(ins) = self.instructions.get(pc) else {
                break;
            };
            let m = ins.mnemonic();
            let line = match *ins {
                Instruction::Load { dest, addr } => format!("{m} {dest}, [{addr}]"),
                Instruction::Store { addr, src } => format!("{m} [{addr}], {src}"),
                Instruction::Branch { cond, target, .. } => {
                    format!("{m} {cond}, {}", label(target))
                }
                Instruction::FenceLoads | Instruction::FenceMem => m.to_string(),
                Instruction::ReadTimer { dest } => format!("{m} {dest}"),
                Instruction::Flush { addr } => format!("{m} [{addr}]"),
                Instruction::Alu { dest, op } => match op {
                    AluOp::Imm(v) => format!("{m} {dest}, {v:#x}"),
                    AluOp::Mov(s) => format!("{m} {dest}, {s}"),
                    AluOp::Add(a, b) | AluOp::Sub(a, b) | AluOp::Xor(a, b) => {
                        format!("{m} {dest}, {a}, {b}")
                    }
                },
            };
            out.push_str("    ");
            out.push_str(&line);
            out.push('\n');
        }
        out
    }
}

enum Pending {
    Ready(Instruction),
    Branch {
        cond: Reg,
        when: BranchCond,
        label: String,
        line: usize,
    },
}

#[derive(Default)]
struct Parser {
    pending: Vec<Pending>,
    labels: HashMap<String, usize>,
    inputs: Vec<Reg>,
}

fn parse_reg(tok: &str, line: usize) -> Result<Reg> {
    let t = tok.trim().to_ascii_lowercase();
    let idx = t
        .strip_prefix('r')
        .and_then(|n| n.parse::<usize>().ok())
        .ok_or_else(|| SimError::parse(line, format!("expected a register, found `{tok}`")))?;
    Reg::new(idx).map_err(|_| SimError::parse(line, format!("register `{tok}` out of range")))
}

fn parse_mem(tok: &str, line: usize) -> Result<Reg> {
    let t = tok.trim();
    let inner = t
        .strip_prefix('[')
        .and_then(|s| s.strip_suffix(']'))
        .ok_or_else(|| {
            SimError::parse(
                line,
                format!("expected a memory operand `[rN]`, found `{tok}`"),
            )
        })?;
    parse_reg(inner, line)
}

fn parse_imm(tok: &str, line: usize) -> Result<u64> {
    let t = tok.trim().replace('_', "");
    let parsed = match t.strip_prefix("0x").or_else(|| t.strip_prefix("0X")) {
        Some(hex) => u64::from_str_radix(hex, 16),
        None => t.parse::<u64>(),
    };
    parsed.map_err(|_| SimError::parse(line, format!("invalid immediate `{tok}`")))
}

fn is_label_name(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

impl Parser {
    fn parse(mut self, text: &str) -> Result<Program> {
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let mut rest = raw.split('#').next().unwrap_or("").trim();
            if rest.is_empty() {
                continue;
            }
            if let Some(colon) = rest.find(':') {
                let name = rest[..colon].trim();
                if is_label_name(name) {
                    if self
                        .labels
                        .insert(name.to_string(), self.pending.len())
                        .is_some()
                    {
                        return Err(SimError::parse(line, format!("duplicate label `{name}`")));
                    }
                    rest = rest[colon + 1..].trim();
                    if rest.is_empty() {
                        continue;
                    }
                }
            }
            self.instruction(rest, line)?;
        }
        let len = self.pending.len();
        let mut instructions = Vec::with_capacity(len);
        for p in self.pending {
            instructions.push(match p {
                Pending::Ready(i) => i,
                Pending::Branch {
                    cond,
                    when,
                    label,
                    line,
                } => {
                    let target = *self.labels.get(&label).ok_or_else(|| {
                        SimError::parse(line, format!("undefined label `{label}`"))
                    })?;
                    Instruction::Branch { cond, when, target }
                }
            });
        }
        Program::new(instructions, self.inputs).map_err(|e| match e {
            SimError::Config(m) => SimError::parse(0, m),
            other => other,
        })
    }

    fn instruction(&mut self, text: &str, line: usize) -> Result<()> {
        let (mnemonic, operands) = match text.find(char::is_whitespace) {
            Some(i) => (&text[..i], text[i..].trim()),
            None => (text, ""),
        };
        let ops: Vec<&str> = if operands.is_empty() {
            Vec::new()
        } else {
            operands.split(',').map(str::trim).collect()
        };
        let m = mnemonic.to_ascii_lowercase();
        let want = |n: usize| -> Result<()> {
            if ops.len() == n {
                Ok(())
            } else {
                Err(SimError::parse(
                    line,
                    format!("`{m}` takes {n} operand(s), found {}", ops.len()),
                ))
            }
        };
        let ins = match m.as_str() {
            ".in" => {
                for op in &ops {
                    self.inputs.push(parse_reg(op, line)?);
                }
                return Ok(());
            }
            "li" => {
                want(2)?;
                Instruction::Alu {
                    dest: parse_reg(ops[0], line)?,
                    op: AluOp::Imm(parse_imm(ops[1], line)?),
                }
            }
            "mov" => {
                want(2)?;
                Instruction::Alu {
                    dest: parse_reg(ops[0], line)?,
                    op: AluOp::Mov(parse_reg(ops[1], line)?),
                }
            }
            "add" | "sub" | "xor" => {
                want(3)?;
                let (a, b) = (parse_reg(ops[1], line)?, parse_reg(ops[2], line)?);
                let op = match m.as_str() {
                    "add" => AluOp::Add(a, b),
                    "sub" => AluOp::Sub(a, b),
                    _ => AluOp::Xor(a, b),
                };
                Instruction::Alu {
                    dest: parse_reg(ops[0], line)?,
                    op,
                }
            }
            "load" => {
                want(2)?;
                Instruction::Load {
                    dest: parse_reg(ops[0], line)?,
                    addr: parse_mem(ops[1], line)?,
                }
            }
            "store" => {
                want(2)?;
                Instruction::Store {
                    addr: parse_mem(ops[0], line)?,
                    src: parse_reg(ops[1], line)?,
                }
            }
            "beqz" | "bnez" => {
                want(2)?;
                let label = ops[1].to_string();
                if !is_label_name(&label) {
                    return Err(SimError::parse(line, format!("invalid label `{label}`")));
                }
                self.pending.push(Pending::Branch {
                    cond: parse_reg(ops[0], line)?,
                    when: if m == "beqz" {
                        BranchCond::Zero
                    } else {
                        BranchCond::NonZero
                    },
                    label,
                    line,
                });
                return Ok(());
            }
            "lfence" => {
                want(0)?;
                Instruction::FenceLoads
            }
            "mfence" => {
                want(0)?;
                Instruction::FenceMem
            }
            "rdtsc" => {
                want(1)?;
                Instruction::ReadTimer {
                    dest: parse_reg(ops[0], line)?,
                }
            }
            "clflush" => {
                want(1)?;
                Instruction::Flush {
                    addr: parse_mem(ops[0], line)?,
                }
            }
            other => return Err(SimError::parse(line, format!("unknown mnemonic `{other}`"))),
        };
        self.pending.push(Pending::Ready(ins));
        Ok(())
    }
}
