// SPDX-License-Identifier: Apache-2.0

//! Abstract register values and the per-block transfer function.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use crate::ir::{App, AssignId, AssignRhs, Block, MemRepr, Reg, Stmt, Value};
use crate::mem::{MemSegmentOff, MemWord, Memory};
use crate::rewrite::fold;

/// What an offset is relative to when its exact value is lost.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OffsetBase {
    Stack,
    ReturnAddr,
    Code,
}

/// Register abstraction. Ordered from most to least precise within each kind;
/// `Top` absorbs everything.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum AbsValue {
    Top,
    /// Non-empty, at most `K` elements.
    ConstSet(BTreeSet<MemWord>),
    CodePtr(MemSegmentOff),
    /// The caller's return address, as found in `ra` on entry.
    ReturnAddr,
    /// Entry stack pointer plus a byte offset.
    StackOffset(i64),
    SymbolicOffset(OffsetBase),
}

impl AbsValue {
    pub fn constant(w: MemWord) -> AbsValue {
        AbsValue::ConstSet(BTreeSet::from([w]))
    }

    pub fn singleton(&self) -> Option<MemWord> {
        match self {
            AbsValue::ConstSet(s) if s.len() == 1 => s.iter().next().copied(),
            _ => None,
        }
    }

    fn offset_base(&self) -> Option<OffsetBase> {
        match self {
            AbsValue::StackOffset(_) => Some(OffsetBase::Stack),
            AbsValue::ReturnAddr => Some(OffsetBase::ReturnAddr),
            AbsValue::CodePtr(_) => Some(OffsetBase::Code),
            AbsValue::SymbolicOffset(b) => Some(*b),
            _ => None,
        }
    }

    /// Least upper bound; sets larger than `cap` widen to `Top`.
    pub fn join(&self, other: &AbsValue, cap: usize) -> AbsValue {
        use AbsValue::*;
        if self == other {
            return self.clone();
        }
        match (self, other) {
            (ConstSet(a), ConstSet(b)) => {
                let u: BTreeSet<MemWord> = a.union(b).copied().collect();
                if u.len() > cap {
                    Top
                } else {
                    ConstSet(u)
                }
            }
            _ => match (self.offset_base(), other.offset_base()) {
                (Some(a), Some(b)) if a == b => SymbolicOffset(a),
                _ => Top,
            },
        }
    }
}

impl fmt::Display for AbsValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AbsValue::Top => f.write_str("top"),
            AbsValue::ConstSet(s) => {
                f.write_str("{")?;
                for (i, w) in s.iter().enumerate() {
                    write!(f, "{}{w}", if i == 0 { "" } else { ", " })?;
                }
                f.write_str("}")
            }
            AbsValue::CodePtr(p) => write!(f, "code({:?}+{})", p.segment, p.offset),
            AbsValue::ReturnAddr => f.write_str("return_addr"),
            AbsValue::StackOffset(o) => write!(f, "sp{o:+}"),
            AbsValue::SymbolicOffset(b) => write!(f, "{b:?}+?"),
        }
    }
}

/// A tracked stack slot: access size in bytes and the stored abstraction.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct StackSlot {
    pub size: u8,
    pub value: AbsValue,
}

/// Abstraction of every register plus known stack slots, keyed by offset
/// from the entry stack pointer.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct AbstractState {
    regs: Vec<AbsValue>,
    pub stack: BTreeMap<i64, StackSlot>,
}

impl AbstractState {
    /// Calling-convention state at a function entry.
    pub fn entry(mem: &Memory, entry: MemSegmentOff) -> AbstractState {
        let mut s = AbstractState::top();
        s.set(Reg::ZERO, AbsValue::constant(mem.word(0)));
        s.set(Reg::RA, AbsValue::ReturnAddr);
        s.set(Reg::SP, AbsValue::StackOffset(0));
        s.set(Reg::Pc, AbsValue::CodePtr(entry));
        s
    }

    pub fn top() -> AbstractState {
        AbstractState {
            regs: vec![AbsValue::Top; Reg::COUNT],
            stack: BTreeMap::new(),
        }
    }

    pub fn get(&self, r: Reg) -> &AbsValue {
        &self.regs[r.index()]
    }

    pub fn set(&mut self, r: Reg, v: AbsValue) {
        self.regs[r.index()] = v;
    }

    pub fn join(&self, other: &AbstractState, cap: usize) -> AbstractState {
        let regs = self.regs.iter().zip(&other.regs).map(|(a, b)| a.join(b, cap)).collect();
        let stack = self
            .stack
            .iter()
            .filter_map(|(off, a)| {
                let b = other.stack.get(off)?;
                (a.size == b.size).then(|| {
                    (
                        *off,
                        StackSlot {
                            size: a.size,
                            value: a.value.join(&b.value, cap),
                        },
                    )
                })
            })
            .collect();
        AbstractState { regs, stack }
    }

    /// Forgets registers a callee may overwrite.
    pub fn clobber_caller_saved(&mut self) {
        for n in [1u8, 5, 6, 7, 10, 11, 12, 13, 14, 15, 16, 17, 28, 29, 30, 31] {
            self.set(Reg::x(n), AbsValue::Top);
        }
    }
}

/// Result of interpreting one block.
#[derive(Clone, Debug)]
pub struct BlockAnalysis {
    /// Abstraction of every assignment in the block.
    pub values: HashMap<AssignId, AbsValue>,
    pub out: AbstractState,
}

impl BlockAnalysis {
    pub fn value(&self, v: &Value, mem: &Memory, input: &AbstractState) -> AbsValue {
        abstract_value(v, mem, input, &self.values)
    }
}

fn abstract_value(v: &Value, mem: &Memory, input: &AbstractState, env: &HashMap<AssignId, AbsValue>) -> AbsValue {
    match v {
        Value::Bv { value, .. } => AbsValue::constant(mem.word(*value)),
        Value::Relocatable { addr, .. } => match mem.resolve(*addr) {
            Some(so) if mem.is_executable(so) => AbsValue::CodePtr(so),
            _ => AbsValue::Top,
        },
        Value::Initial { reg, .. } => input.get(*reg).clone(),
        Value::Assigned { id, .. } => env.get(id).cloned().unwrap_or(AbsValue::Top),
    }
}

fn signed(w: MemWord) -> i64 {
    w.signed()
}

/// Applies `app` to every combination of constant operands.
fn pointwise(app: &App, ops: &[AbsValue], mem: &Memory, cap: usize) -> AbsValue {
    let mut sets: Vec<Vec<u64>> = Vec::new();
    let mut combos = 1usize;
    for o in ops {
        match o {
            AbsValue::ConstSet(s) => {
                combos = combos.saturating_mul(s.len());
                sets.push(s.iter().map(|w| w.value()).collect());
            }
            _ => return AbsValue::Top,
        }
    }
    if combos > cap * cap {
        return AbsValue::Top;
    }
    let widths: Vec<u32> = app.operands().iter().map(|v| v.width().unwrap_or(64)).collect();
    let mut out = BTreeSet::new();
    let mut idx = vec![0usize; sets.len()];
    loop {
        let mut k = 0;
        let concrete = app.map_operands(|_| {
            let v = Value::bv(widths[k], sets[k][idx[k]]);
            k += 1;
            v
        });
        match fold(&concrete) {
            Some(r) => {
                out.insert(mem.word(r));
            }
            None => return AbsValue::Top,
        }
        if out.len() > cap {
            return AbsValue::Top;
        }
        let mut i = 0;
        loop {
            if i == idx.len() {
                return AbsValue::ConstSet(out);
            }
            idx[i] += 1;
            if idx[i] < sets[i].len() {
                break;
            }
            idx[i] = 0;
            i += 1;
        }
    }
}

fn is_align_mask(v: &AbsValue, mem: &Memory) -> bool {
    v.singleton() == Some(mem.word(u64::MAX - 1))
}

fn transfer_app(app: &App, ops: &[AbsValue], mem: &Memory, cap: usize) -> AbsValue {
    use AbsValue::*;
    let xlen = mem.width().bits();
    match (app, ops) {
        (App::Mux(..), [_, t, f]) => {
            return match ops[0].singleton().map(|c| c.value()) {
                Some(0) => f.clone(),
                Some(_) => t.clone(),
                None => t.join(f, cap),
            }
        }
        (App::BvAdd(w, ..), [a, b]) if *w == xlen => {
            let k = a.singleton().or(b.singleton());
            let other = if a.singleton().is_some() { b } else { a };
            match (other, k) {
                (StackOffset(o), Some(k)) => return StackOffset(o.wrapping_add(signed(k))),
                (CodePtr(p), Some(k)) => {
                    return match mem.segoff_offset(*p, signed(k)) {
                        Some(q) if mem.is_executable(q) => CodePtr(q),
                        _ => SymbolicOffset(OffsetBase::Code),
                    }
                }
                (ReturnAddr | SymbolicOffset(_), Some(_)) => {
                    return SymbolicOffset(other.offset_base().expect("offset kind"))
                }
                _ => {}
            }
            if let (Some(base), None) | (None, Some(base)) = (a.offset_base(), b.offset_base()) {
                return SymbolicOffset(base);
            }
        }
        (App::BvSub(w, ..), [StackOffset(o), k]) if *w == xlen => {
            if let Some(k) = k.singleton() {
                return StackOffset(o.wrapping_sub(signed(k)));
            }
            return SymbolicOffset(OffsetBase::Stack);
        }
        (App::BvAnd(w, ..), [a, b]) if *w == xlen => {
            if matches!(a, ReturnAddr | CodePtr(_)) && is_align_mask(b, mem) {
                return a.clone();
            }
            if matches!(b, ReturnAddr | CodePtr(_)) && is_align_mask(a, mem) {
                return b.clone();
            }
        }
        _ => {}
    }
    pointwise(app, ops, mem, cap)
}

fn read_constant_memory(addrs: &BTreeSet<MemWord>, repr: MemRepr, mem: &Memory, cap: usize) -> AbsValue {
    let mut out = BTreeSet::new();
    for a in addrs {
        let Some(so) = mem.resolve_absolute(a.value()) else {
            return AbsValue::Top;
        };
        if mem.permissions(so).write {
            return AbsValue::Top;
        }
        match mem.read_le(so, u64::from(repr.bytes)) {
            Ok(v) => {
                out.insert(mem.word(v));
            }
            Err(_) => return AbsValue::Top,
        }
    }
    if out.is_empty() || out.len() > cap {
        AbsValue::Top
    } else {
        AbsValue::ConstSet(out)
    }
}

/// Interprets `block` over the abstract domain starting from `input`.
pub fn abstract_transfer(block: &Block, input: &AbstractState, mem: &Memory, cap: usize) -> BlockAnalysis {
    let mut env: HashMap<AssignId, AbsValue> = HashMap::new();
    let mut stack = input.stack.clone();
    for stmt in &block.stmts {
        match stmt {
            Stmt::Assign { id, rhs } => {
                let v = match rhs {
                    AssignRhs::EvalApp(app) => {
                        let ops: Vec<AbsValue> = app
                            .operands()
                            .into_iter()
                            .map(|o| abstract_value(o, mem, input, &env))
                            .collect();
                        transfer_app(app, &ops, mem, cap)
                    }
                    AssignRhs::ReadMem { addr, repr } => match abstract_value(addr, mem, input, &env) {
                        AbsValue::StackOffset(o) => match stack.get(&o) {
                            Some(slot) if slot.size == repr.bytes => slot.value.clone(),
                            _ => AbsValue::Top,
                        },
                        AbsValue::ConstSet(addrs) => read_constant_memory(&addrs, *repr, mem, cap),
                        _ => AbsValue::Top,
                    },
                };
                env.insert(*id, v);
            }
            Stmt::WriteMem { addr, repr, value } => match abstract_value(addr, mem, input, &env) {
                AbsValue::StackOffset(o) => {
                    let end = o.wrapping_add(i64::from(repr.bytes));
                    stack.retain(|k, s| k.wrapping_add(i64::from(s.size)) <= o || *k >= end);
                    stack.insert(
                        o,
                        StackSlot {
                            size: repr.bytes,
                            value: abstract_value(value, mem, input, &env),
                        },
                    );
                }
                AbsValue::SymbolicOffset(OffsetBase::Stack) => stack.clear(),
                _ => {}
            },
            Stmt::InstructionStart { .. } | Stmt::Comment(_) | Stmt::Arch(_) => {}
        }
    }
    let mut out = AbstractState::top();
    out.stack = stack;
    for (r, v) in block.term.regs().iter() {
        out.set(r, abstract_value(v, mem, input, &env));
    }
    BlockAnalysis { values: env, out }
}
