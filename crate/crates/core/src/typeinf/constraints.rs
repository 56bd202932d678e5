// SPDX-License-Identifier: Apache-2.0

//! Pointer/number constraint generation.

use std::collections::BTreeMap;
use std::fmt;

use super::demand::DemandSet;
use crate::discovery::{concrete_targets, CallTarget, Classification, DiscoveredFunction};
use crate::ir::{App, AssignId, AssignRhs, Reg, Stmt, Value};
use crate::mem::{MemSegmentOff, Memory};

/// A type variable: one per argument slot, return slot, assignment, or
/// register value on entry to a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TypeVar {
    Arg {
        func: MemSegmentOff,
        index: u8,
    },
    Ret {
        func: MemSegmentOff,
        index: u8,
    },
    Assign {
        func: MemSegmentOff,
        id: AssignId,
    },
    BlockReg {
        func: MemSegmentOff,
        block: MemSegmentOff,
        reg: Reg,
    },
}

impl TypeVar {
    pub fn func(&self) -> MemSegmentOff {
        match self {
            TypeVar::Arg { func, .. }
            | TypeVar::Ret { func, .. }
            | TypeVar::Assign { func, .. }
            | TypeVar::BlockReg { func, .. } => *func,
        }
    }

    pub fn describe(&self, mem: &Memory) -> String {
        match self {
            TypeVar::Arg { func, index } => format!("{} arg a{index}", mem.display_segoff(*func)),
            TypeVar::Ret { func, index } => format!("{} ret a{index}", mem.display_segoff(*func)),
            TypeVar::Assign { func, id } => format!("{} {id}", mem.display_segoff(*func)),
            TypeVar::BlockReg { func, block, reg } => {
                format!("{} {reg} at {}", mem.display_segoff(*func), mem.display_segoff(*block))
            }
        }
    }
}

impl fmt::Display for TypeVar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TypeConstraint {
    IsPtr(TypeVar),
    /// Width is one of 8, 16, 32, 64.
    IsNum(TypeVar, u32),
    EqTC(TypeVar, TypeVar),
    /// The first variable points at values of the second's type.
    PointsTo(TypeVar, TypeVar),
    IsCodePtr(TypeVar, MemSegmentOff),
}

fn num_width(w: u32) -> Option<u32> {
    matches!(w, 8 | 16 | 32 | 64).then_some(w)
}

/// Constants of the form `!(2^k - 1)`: masks that only clear low bits.
fn is_alignment_mask(v: &Value) -> bool {
    match (v.as_const(), v.width()) {
        (Some(c), Some(w)) => {
            let m = crate::ir::mask(w);
            let low = !c & m;
            c != 0 && low != 0 && (low & (low + 1)) == 0
        }
        _ => false,
    }
}

struct Gen<'a> {
    mem: &'a Memory,
    func: MemSegmentOff,
    block: MemSegmentOff,
    out: &'a mut Vec<TypeConstraint>,
}

impl Gen<'_> {
    fn var(&self, v: &Value) -> Option<TypeVar> {
        match v {
            Value::Assigned { id, .. } => Some(TypeVar::Assign {
                func: self.func,
                id: *id,
            }),
            Value::Initial { reg, .. } if *reg != Reg::ZERO && *reg != Reg::Pc => Some(TypeVar::BlockReg {
                func: self.func,
                block: self.block,
                reg: *reg,
            }),
            _ => None,
        }
    }

    fn num(&mut self, v: &Value) {
        if let (Some(t), Some(w)) = (self.var(v), v.width().and_then(num_width)) {
            self.out.push(TypeConstraint::IsNum(t, w));
        }
    }

    fn num_var(&mut self, t: TypeVar, w: u32) {
        if let Some(w) = num_width(w) {
            self.out.push(TypeConstraint::IsNum(t, w));
        }
    }

    fn eq(&mut self, a: Option<TypeVar>, b: Option<TypeVar>) {
        if let (Some(a), Some(b)) = (a, b) {
            if a != b {
                self.out.push(TypeConstraint::EqTC(a, b));
            }
        }
    }

    fn app(&mut self, result: TypeVar, app: &App) {
        use App::*;
        match app {
            // A mapped constant is the base itself (a table or global), so
            // the other operand is an index rather than a pointer.
            BvAdd(_, a, b) | BvSub(_, a, b) => {
                let offset = |v: &Value| v.as_const().is_some_and(|c| self.mem.resolve_absolute(c).is_none());
                if offset(b) {
                    self.eq(Some(result), self.var(a));
                } else if offset(a) && matches!(app, BvAdd(..)) {
                    self.eq(Some(result), self.var(b));
                }
            }
            BvAnd(_, a, b) if is_alignment_mask(b) || is_alignment_mask(a) => {
                let other = if is_alignment_mask(b) { a } else { b };
                self.eq(Some(result), self.var(other));
            }
            BvUDiv(w, a, b)
            | BvMul(w, a, b)
            | BvAnd(w, a, b)
            | BvOr(w, a, b)
            | BvXor(w, a, b)
            | BvShl(w, a, b)
            | BvLshr(w, a, b)
            | BvAshr(w, a, b) => {
                self.num(a);
                self.num(b);
                self.num_var(result, *w);
            }
            BvComplement(w, a) => {
                self.num(a);
                self.num_var(result, *w);
            }
            Mux(_, _, x, y) => {
                self.eq(Some(result), self.var(x));
                self.eq(Some(result), self.var(y));
            }
            Eq(..) | BvUlt(..) | BvSlt(..) => {}
            SExt(_, to, a) | UExt(_, to, a) | Trunc(_, to, a) => {
                self.num(a);
                self.num_var(result, *to);
            }
        }
    }
}

/// Registers preserved across calls by the integer calling convention.
fn callee_saved(r: Reg) -> bool {
    matches!(r, Reg::X(2..=4) | Reg::X(8) | Reg::X(9) | Reg::X(18..=27))
}

/// Constraints for one function. `demands` supplies callee argument counts
/// for linking call sites.
pub fn gen_constraints(
    f: &DiscoveredFunction,
    d: &DemandSet,
    demands: &BTreeMap<MemSegmentOff, DemandSet>,
    mem: &Memory,
) -> Vec<TypeConstraint> {
    let mut out = Vec::new();
    let func = f.entry;
    for (k, _) in d.arguments.iter().enumerate() {
        out.push(TypeConstraint::EqTC(
            TypeVar::BlockReg {
                func,
                block: f.entry,
                reg: Reg::arg(k as u8),
            },
            TypeVar::Arg { func, index: k as u8 },
        ));
    }
    for (addr, db) in &f.blocks {
        let mut g = Gen {
            mem,
            func,
            block: *addr,
            out: &mut out,
        };
        for s in &db.block.stmts {
            match s {
                Stmt::Assign { id, rhs } => {
                    let result = TypeVar::Assign { func, id: *id };
                    match rhs {
                        AssignRhs::EvalApp(app) => g.app(result, app),
                        AssignRhs::ReadMem { addr, repr } => {
                            if let Some(p) = g.var(addr) {
                                g.out.push(TypeConstraint::IsPtr(p));
                                g.out.push(TypeConstraint::PointsTo(p, result));
                            }
                            if u32::from(repr.bytes) * 8 < mem.width().bits() {
                                g.num_var(result, u32::from(repr.bytes) * 8);
                            }
                        }
                    }
                }
                Stmt::WriteMem { addr, value, .. } => {
                    if let Some(p) = g.var(addr) {
                        g.out.push(TypeConstraint::IsPtr(p));
                        if let Some(v) = g.var(value) {
                            g.out.push(TypeConstraint::PointsTo(p, v));
                        }
                    }
                }
                _ => {}
            }
        }
        let regs = db.block.term.regs();
        let link = |g: &mut Gen<'_>, succ: MemSegmentOff, keep: &dyn Fn(Reg) -> bool| {
            for (r, v) in regs.iter() {
                if r == Reg::ZERO || r == Reg::Pc || !keep(r) {
                    continue;
                }
                let to = TypeVar::BlockReg {
                    func,
                    block: succ,
                    reg: r,
                };
                g.eq(g.var(v), Some(to));
            }
        };
        match &db.classification {
            Classification::Return => {
                for (k, r) in d.returns.iter().enumerate() {
                    g.eq(g.var(regs.get(*r)), Some(TypeVar::Ret { func, index: k as u8 }));
                }
            }
            Classification::Call { target, return_to } => {
                if let CallTarget::Direct(callee) = target {
                    let nargs = demands.get(callee).map(|c| c.arguments.len()).unwrap_or(0);
                    for k in 0..nargs as u8 {
                        let r = Reg::arg(k);
                        let slot = TypeVar::Arg {
                            func: *callee,
                            index: k,
                        };
                        g.eq(g.var(regs.get(r)), Some(slot));
                        if let Some([t]) = concrete_targets(db.exit_state.get(r), mem).as_deref() {
                            g.out.push(TypeConstraint::IsCodePtr(slot, *t));
                        }
                    }
                    if let Some(cd) = demands.get(callee) {
                        for (k, r) in cd.returns.iter().enumerate() {
                            g.eq(
                                Some(TypeVar::Ret {
                                    func: *callee,
                                    index: k as u8,
                                }),
                                Some(TypeVar::BlockReg {
                                    func,
                                    block: *return_to,
                                    reg: *r,
                                }),
                            );
                        }
                    }
                }
                link(&mut g, *return_to, &|r| callee_saved(r));
            }
            Classification::SysCall { return_to } => link(&mut g, *return_to, &|r| r != Reg::A0),
            Classification::TailCall(callee) => {
                let nargs = demands.get(callee).map(|c| c.arguments.len()).unwrap_or(0);
                for k in 0..nargs as u8 {
                    g.eq(
                        g.var(regs.get(Reg::arg(k))),
                        Some(TypeVar::Arg {
                            func: *callee,
                            index: k,
                        }),
                    );
                }
            }
            c => {
                for succ in c.local_successors() {
                    link(&mut g, succ, &|_| true);
                }
            }
        }
    }
    out
}
