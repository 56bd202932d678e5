// SPDX-License-Identifier: Apache-2.0

//! Terminator classification and branch-edge refinement.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::ops::Bound;

use super::domain::{AbsValue, AbstractState, BlockAnalysis};
use crate::ir::{App, AssignId, AssignRhs, Block, Reg, RegState, TermStmt, Value};
use crate::mem::{MemSegmentOff, Memory};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CallTarget {
    Direct(MemSegmentOff),
    Indirect,
}

/// How control leaves a block. Every embedded address is executable.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Classification {
    Branch {
        taken: MemSegmentOff,
        fallthrough: MemSegmentOff,
    },
    DirectJump(MemSegmentOff),
    Call {
        target: CallTarget,
        return_to: MemSegmentOff,
    },
    TailCall(MemSegmentOff),
    Return,
    JumpTable(Vec<MemSegmentOff>),
    SysCall {
        return_to: MemSegmentOff,
    },
    Unknown(String),
}

impl Classification {
    pub fn kind(&self) -> &'static str {
        match self {
            Classification::Branch { .. } => "branch",
            Classification::DirectJump(_) => "jump",
            Classification::Call { .. } => "call",
            Classification::TailCall(_) => "tailcall",
            Classification::Return => "return",
            Classification::JumpTable(_) => "jumptable",
            Classification::SysCall { .. } => "syscall",
            Classification::Unknown(_) => "unknown",
        }
    }

    /// Successors inside the same function.
    pub fn local_successors(&self) -> Vec<MemSegmentOff> {
        match self {
            Classification::Branch { taken, fallthrough } => vec![*taken, *fallthrough],
            Classification::DirectJump(t) => vec![*t],
            Classification::JumpTable(ts) => ts.clone(),
            Classification::Call { return_to, .. } | Classification::SysCall { return_to } => vec![*return_to],
            Classification::TailCall(_) | Classification::Return | Classification::Unknown(_) => Vec::new(),
        }
    }
}

impl fmt::Display for CallTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CallTarget::Direct(t) => write!(f, "{t:?}"),
            CallTarget::Indirect => f.write_str("indirect"),
        }
    }
}

/// What the classifier knows about the enclosing function.
pub struct FunctionContext<'a> {
    pub mem: &'a Memory,
    pub entry: MemSegmentOff,
    /// Entries of other functions known so far.
    pub known_entries: &'a BTreeSet<MemSegmentOff>,
    pub const_set_cap: usize,
}

impl FunctionContext<'_> {
    /// A direct jump leaves the function when it reaches another function's
    /// entry, goes backwards past our entry, or skips over a known entry.
    fn is_tail_call(&self, target: MemSegmentOff) -> bool {
        if target == self.entry {
            return false;
        }
        if self.known_entries.contains(&target) || target < self.entry {
            return true;
        }
        self.known_entries
            .range((Bound::Excluded(self.entry), Bound::Included(target)))
            .next()
            .is_some()
    }
}

/// Executable addresses denoted by an abstract value, if it is concrete.
pub fn concrete_targets(v: &AbsValue, mem: &Memory) -> Option<Vec<MemSegmentOff>> {
    match v {
        AbsValue::CodePtr(p) => Some(vec![*p]),
        AbsValue::ConstSet(s) => s
            .iter()
            .map(|w| mem.resolve_absolute(w.value()).filter(|so| mem.is_executable(*so)))
            .collect(),
        _ => None,
    }
}

fn app_def<'b>(defs: &HashMap<AssignId, &'b AssignRhs>, v: &Value) -> Option<&'b App> {
    match defs.get(&v.as_assigned()?) {
        Some(AssignRhs::EvalApp(app)) => Some(app),
        _ => None,
    }
}

fn derives_from_read(defs: &HashMap<AssignId, &AssignRhs>, v: &Value, depth: u32) -> bool {
    if depth == 0 {
        return false;
    }
    match v.as_assigned().and_then(|id| defs.get(&id)) {
        Some(AssignRhs::ReadMem { .. }) => true,
        Some(AssignRhs::EvalApp(app)) => app
            .operands()
            .into_iter()
            .any(|o| derives_from_read(defs, o, depth - 1)),
        None => false,
    }
}

/// Decides how control leaves `block`, given its abstract interpretation.
pub fn classify(
    block: &Block,
    input: &AbstractState,
    analysis: &BlockAnalysis,
    ctx: &FunctionContext<'_>,
) -> Classification {
    let mem = ctx.mem;
    let pc_abs = analysis.out.get(Reg::Pc);
    let regs = match &block.term {
        TermStmt::TranslateError(_, msg) => return Classification::Unknown(msg.clone()),
        TermStmt::ArchTerm(_, _) => {
            return match concrete_targets(pc_abs, mem).as_deref() {
                Some([t]) => Classification::SysCall { return_to: *t },
                _ => Classification::Unknown("system call without an executable return point".into()),
            }
        }
        TermStmt::FetchAndExecute(regs) => regs,
    };
    let fall = mem
        .segoff_offset(block.address, block.byte_length.value() as i64)
        .filter(|so| mem.is_executable(*so));
    let links = fall.filter(|f| {
        !regs.is_passthrough(Reg::RA) && concrete_targets(analysis.out.get(Reg::RA), mem).as_deref() == Some(&[*f])
    });

    if *pc_abs == AbsValue::ReturnAddr {
        return Classification::Return;
    }
    let targets = concrete_targets(pc_abs, mem);
    if let (Some([t]), Some(ret)) = (targets.as_deref(), links) {
        return Classification::Call {
            target: CallTarget::Direct(*t),
            return_to: ret,
        };
    }
    let defs = block.definitions();
    let pc = regs.get(Reg::Pc);
    if let Some(App::Mux(_, _, x, y)) = app_def(&defs, pc) {
        let arm = |v: &Value| concrete_targets(&analysis.value(v, mem, input), mem);
        if let (Some([x]), Some([y])) = (arm(x).as_deref(), arm(y).as_deref()) {
            let (taken, fallthrough) = if Some(*x) == fall { (*y, *x) } else { (*x, *y) };
            return Classification::Branch { taken, fallthrough };
        }
    }
    match targets.as_deref() {
        Some([t]) if ctx.is_tail_call(*t) => return Classification::TailCall(*t),
        Some([t]) => return Classification::DirectJump(*t),
        Some(ts) if ts.len() > 1 && derives_from_read(&defs, pc, 8) => return Classification::JumpTable(ts.to_vec()),
        _ => {}
    }
    if let Some(ret) = links {
        return Classification::Call {
            target: CallTarget::Indirect,
            return_to: ret,
        };
    }
    if let AbsValue::ConstSet(s) = pc_abs {
        if s.len() == 1 {
            return Classification::Unknown(format!("jump to non-executable address {}", s.iter().next().unwrap()));
        }
    }
    Classification::Unknown(format!("unresolved jump target {pc_abs}"))
}

fn restrict(state: &mut AbstractState, regs: &RegState, v: &Value, allowed: Vec<u64>, mem: &Memory) {
    let allowed: BTreeSet<_> = allowed.into_iter().map(|x| mem.word(x)).collect();
    for (r, rv) in regs.iter() {
        if r == Reg::Pc || rv != v {
            continue;
        }
        let narrowed = match state.get(r) {
            AbsValue::ConstSet(s) => s.intersection(&allowed).copied().collect(),
            _ => allowed.clone(),
        };
        if !narrowed.is_empty() {
            state.set(r, AbsValue::ConstSet(narrowed));
        }
    }
}

/// Narrows `state` along the edge where `cond` evaluated to `polarity`.
/// Only unsigned bounds and equalities with a known constant are used.
pub fn refine_edge(
    state: &mut AbstractState,
    block: &Block,
    cond: &Value,
    polarity: bool,
    input: &AbstractState,
    analysis: &BlockAnalysis,
    ctx: &FunctionContext<'_>,
) {
    let mem = ctx.mem;
    let cap = ctx.const_set_cap as u64;
    let defs = block.definitions();
    let regs = block.term.regs();
    let konst = |v: &Value| analysis.value(v, mem, input).singleton().map(|w| w.value());
    match app_def(&defs, cond) {
        Some(App::BvUlt(a, b)) => {
            if polarity {
                if let Some(n) = konst(b).filter(|n| (1..=cap).contains(n)) {
                    restrict(state, regs, a, (0..n).collect(), mem);
                }
            } else if let Some(n) = konst(a).filter(|n| *n < cap) {
                restrict(state, regs, b, (0..=n).collect(), mem);
            }
        }
        Some(App::Eq(a, b)) if polarity => {
            if let Some(n) = konst(b) {
                restrict(state, regs, a, vec![n], mem);
            }
            if let Some(n) = konst(a) {
                restrict(state, regs, b, vec![n], mem);
            }
        }
        _ => {}
    }
}

/// The mux condition selecting the pc, if the block ends in a two-way branch.
pub fn branch_condition(block: &Block) -> Option<(Value, Value, Value)> {
    let defs = block.definitions();
    match app_def(&defs, block.term.regs().get(Reg::Pc)) {
        Some(App::Mux(_, c, x, y)) => Some((c.clone(), x.clone(), y.clone())),
        _ => None,
    }
}
