// SPDX-License-Identifier: Apache-2.0

//! Block simplification.
//!
//! Each application is folded when its operands are known and otherwise
//! brought into mux-hoisted normal form (MHNF): an addition of a constant or
//! relocatable address to a mux is pushed into both arms, so that
//! `Add (Mux c x y) k` becomes `Mux c (x+k) (y+k)` and the arms fold to
//! literal addresses. Jump targets computed from conditional offsets become
//! a mux over concrete addresses, which the classifier can read directly.

use std::collections::{HashMap, HashSet};

use crate::ir::{mask, App, AssignId, AssignRhs, Block, IdGen, Stmt, TypeRepr, Value};
use crate::mem::{AddrWidth, MemAddr};

/// Maximum nesting of mux hoisting per application.
pub const MHNF_DEPTH_LIMIT: u32 = 64;

/// Rewriting state for one block.
pub struct RewriteContext<'a> {
    ids: &'a mut IdGen,
    /// Input assignment id to its rewritten value.
    memo: HashMap<AssignId, Value>,
    /// Applications emitted so far, by output id.
    emitted: HashMap<AssignId, App>,
    stmts: Vec<Stmt>,
    last_id: Option<AssignId>,
}

impl<'a> RewriteContext<'a> {
    pub fn new(ids: &'a mut IdGen) -> RewriteContext<'a> {
        RewriteContext {
            ids,
            memo: HashMap::new(),
            emitted: HashMap::new(),
            stmts: Vec::new(),
            last_id: None,
        }
    }

    fn subst(&self, v: &Value) -> Value {
        match v {
            Value::Assigned { id, .. } => self.memo.get(id).cloned().unwrap_or_else(|| v.clone()),
            other => other.clone(),
        }
    }

    /// Keeps `preferred` when it still preserves increasing id order.
    fn next_id(&mut self, preferred: Option<AssignId>) -> AssignId {
        let id = match (preferred, self.last_id) {
            (Some(p), Some(last)) if p.scope == last.scope && p.index > last.index => p,
            (Some(p), None) => p,
            _ => self.ids.fresh(),
        };
        self.last_id = Some(id);
        id
    }

    fn emit_app(&mut self, app: App, preferred: Option<AssignId>) -> Value {
        let id = self.next_id(preferred);
        let ty = app.result_type();
        self.emitted.insert(id, app.clone());
        self.stmts.push(Stmt::Assign {
            id,
            rhs: AssignRhs::EvalApp(app),
        });
        Value::Assigned { id, ty }
    }

    fn mux_def(&self, v: &Value) -> Option<(TypeRepr, Value, Value, Value)> {
        match self.emitted.get(&v.as_assigned()?) {
            Some(App::Mux(t, c, x, y)) => Some((t.clone(), c.clone(), x.clone(), y.clone())),
            _ => None,
        }
    }
}

fn is_addend(v: &Value) -> bool {
    matches!(v, Value::Bv { .. } | Value::Relocatable { .. })
}

fn ones(w: u32) -> u64 {
    if w >= 64 {
        u64::MAX
    } else {
        (1u64 << w) - 1
    }
}

fn to_signed(v: u64, w: u32) -> i128 {
    let v = i128::from(v & ones(w));
    if w > 0 && v >> (w - 1) & 1 == 1 {
        v - (1i128 << w)
    } else {
        v
    }
}

/// Constant folding over literal operands. Independent of the evaluator.
pub fn fold(app: &App) -> Option<u64> {
    use App::*;
    let c = |v: &Value| v.as_const().map(u128::from);
    let r: u128 = match app {
        BvAdd(w, a, b) => (c(a)? + c(b)?) & u128::from(ones(*w)),
        BvSub(w, a, b) => (c(a)? + (1u128 << w) - c(b)?) & u128::from(ones(*w)),
        BvMul(w, a, b) => c(a)?.wrapping_mul(c(b)?) & u128::from(ones(*w)),
        BvUDiv(w, a, b) => match c(b)? {
            0 => u128::from(ones(*w)),
            d => c(a)? / d,
        },
        BvAnd(_, a, b) => c(a)? & c(b)?,
        BvOr(_, a, b) => c(a)? | c(b)?,
        BvXor(_, a, b) => c(a)? ^ c(b)?,
        BvShl(w, a, b) => match c(b)? {
            s if s >= u128::from(*w) => 0,
            s => (c(a)? << s) & u128::from(ones(*w)),
        },
        BvLshr(w, a, b) => match c(b)? {
            s if s >= u128::from(*w) => 0,
            s => c(a)? >> s,
        },
        BvAshr(w, a, b) => {
            let s = c(b)?.min(u128::from(*w - 1));
            ((to_signed(c(a)? as u64, *w) >> s) as u128) & u128::from(ones(*w))
        }
        BvComplement(w, a) => (c(a)? ^ u128::from(ones(*w))) & u128::from(ones(*w)),
        Mux(_, cond, t, f) => {
            if c(cond)? != 0 {
                c(t)?
            } else {
                c(f)?
            }
        }
        Eq(a, b) => u128::from(c(a)? == c(b)?),
        BvUlt(a, b) => u128::from(c(a)? < c(b)?),
        BvSlt(a, b) => {
            let w = a.width()?;
            u128::from(to_signed(c(a)? as u64, w) < to_signed(c(b)? as u64, w))
        }
        SExt(from, to, a) => (to_signed(c(a)? as u64, *from) as u128) & u128::from(ones(*to)),
        UExt(_, _, a) => c(a)?,
        Trunc(_, to, a) => c(a)? & u128::from(ones(*to)),
    };
    Some(r as u64)
}

fn shift_reloc(width: u32, addr: MemAddr, delta: u64) -> Option<Value> {
    let w = AddrWidth::from_bits(width)?;
    let offset = addr.offset.offset_by(delta as i64);
    (offset.width() == w).then_some(Value::Relocatable {
        width,
        addr: MemAddr {
            base: addr.base,
            offset,
        },
    })
}

/// Algebraic identities that yield an existing value without new statements.
fn simplify(app: &App) -> Option<Value> {
    use App::*;
    let is = |v: &Value, k: u64| v.as_const() == Some(k);
    match app {
        BvAdd(w, a, b) => {
            if is(b, 0) {
                return Some(a.clone());
            }
            if is(a, 0) {
                return Some(b.clone());
            }
            match (a, b) {
                (Value::Relocatable { addr, .. }, Value::Bv { value, .. })
                | (Value::Bv { value, .. }, Value::Relocatable { addr, .. }) => shift_reloc(*w, *addr, *value),
                _ => None,
            }
        }
        BvSub(w, a, b) => {
            if is(b, 0) {
                return Some(a.clone());
            }
            if a == b {
                return Some(Value::bv(*w, 0));
            }
            match (a, b) {
                (Value::Relocatable { addr, .. }, Value::Bv { value, .. }) => {
                    shift_reloc(*w, *addr, value.wrapping_neg() & mask(*w))
                }
                _ => None,
            }
        }
        BvMul(w, a, b) => {
            if is(a, 0) || is(b, 0) {
                Some(Value::bv(*w, 0))
            } else if is(b, 1) {
                Some(a.clone())
            } else if is(a, 1) {
                Some(b.clone())
            } else {
                None
            }
        }
        BvUDiv(_, a, b) => is(b, 1).then(|| a.clone()),
        BvAnd(w, a, b) => {
            if is(a, 0) || is(b, 0) {
                Some(Value::bv(*w, 0))
            } else if is(b, ones(*w)) || a == b {
                Some(a.clone())
            } else if is(a, ones(*w)) {
                Some(b.clone())
            } else {
                None
            }
        }
        BvOr(w, a, b) => {
            if is(a, ones(*w)) || is(b, ones(*w)) {
                Some(Value::bv(*w, ones(*w)))
            } else if is(b, 0) || a == b {
                Some(a.clone())
            } else if is(a, 0) {
                Some(b.clone())
            } else {
                None
            }
        }
        BvXor(w, a, b) => {
            if a == b {
                Some(Value::bv(*w, 0))
            } else if is(b, 0) {
                Some(a.clone())
            } else if is(a, 0) {
                Some(b.clone())
            } else {
                None
            }
        }
        BvShl(_, a, b) | BvLshr(_, a, b) | BvAshr(_, a, b) => is(b, 0).then(|| a.clone()),
        Mux(_, c, t, f) => {
            if t == f || is(c, 1) {
                Some(t.clone())
            } else if is(c, 0) {
                Some(f.clone())
            } else {
                None
            }
        }
        Eq(a, b) => (a == b).then(|| Value::bool(true)),
        BvUlt(a, b) => (a == b || is(b, 0)).then(|| Value::bool(false)),
        BvSlt(a, b) => (a == b).then(|| Value::bool(false)),
        _ => None,
    }
}

/// Folds and simplifies `app`, emitting statements into `ctx` as needed.
/// `preferred` is the input id to reuse if the application survives as is.
pub fn rewrite_app(ctx: &mut RewriteContext<'_>, app: App, preferred: Option<AssignId>) -> Value {
    rewrite_at_depth(ctx, app, preferred, 0)
}

fn rewrite_at_depth(ctx: &mut RewriteContext<'_>, app: App, preferred: Option<AssignId>, depth: u32) -> Value {
    if let Some(k) = fold(&app) {
        return Value::Bv {
            width: app.result_type().bv_width().unwrap_or(64),
            value: k,
        };
    }
    if let Some(v) = simplify(&app) {
        return v;
    }
    rewrite_mhnf(ctx, app, preferred, depth)
}

/// Hoists `Add (Mux c x y) k` (either operand order, `k` a constant or
/// relocatable address) into `Mux c (x+k) (y+k)`; otherwise emits `app`.
pub fn rewrite_mhnf(ctx: &mut RewriteContext<'_>, app: App, preferred: Option<AssignId>, depth: u32) -> Value {
    if depth < MHNF_DEPTH_LIMIT {
        if let App::BvAdd(w, a, b) = &app {
            let hoist = match (ctx.mux_def(a), ctx.mux_def(b)) {
                (Some(m), _) if is_addend(b) => Some((m, b.clone())),
                (_, Some(m)) if is_addend(a) => Some((m, a.clone())),
                _ => None,
            };
            if let Some(((ty, c, x, y), k)) = hoist {
                let x = rewrite_at_depth(ctx, App::BvAdd(*w, x, k.clone()), None, depth + 1);
                let y = rewrite_at_depth(ctx, App::BvAdd(*w, y, k), None, depth + 1);
                return rewrite_at_depth(ctx, App::Mux(ty, c, x, y), None, depth + 1);
            }
        }
    }
    ctx.emit_app(app, preferred)
}

/// Rewrites every statement of `block`, then removes assignments that no
/// longer contribute to writes, reads or the terminator. New ids come from
/// `ids`.
pub fn rewrite_block_with(block: &Block, ids: &mut IdGen) -> Block {
    let mut ctx = RewriteContext::new(ids);
    for stmt in &block.stmts {
        match stmt {
            Stmt::Assign { id, rhs } => match rhs {
                AssignRhs::EvalApp(app) => {
                    let app = app.map_operands(|v| ctx.subst(v));
                    let v = rewrite_app(&mut ctx, app, Some(*id));
                    ctx.memo.insert(*id, v);
                }
                AssignRhs::ReadMem { addr, repr } => {
                    let addr = ctx.subst(addr);
                    let out = ctx.next_id(Some(*id));
                    ctx.stmts.push(Stmt::Assign {
                        id: out,
                        rhs: AssignRhs::ReadMem { addr, repr: *repr },
                    });
                    ctx.memo.insert(
                        *id,
                        Value::Assigned {
                            id: out,
                            ty: repr.value_type(),
                        },
                    );
                }
            },
            Stmt::WriteMem { addr, repr, value } => {
                let s = Stmt::WriteMem {
                    addr: ctx.subst(addr),
                    repr: *repr,
                    value: ctx.subst(value),
                };
                ctx.stmts.push(s);
            }
            other => ctx.stmts.push(other.clone()),
        }
    }
    let term = block.term.map_regs(|v| ctx.subst(v));
    let stmts = eliminate_dead(ctx.stmts, &term);
    Block {
        address: block.address,
        byte_length: block.byte_length,
        stmts,
        term,
    }
}

/// [`rewrite_block_with`] drawing new ids after the block's own.
pub fn rewrite_block(block: &Block) -> Block {
    let mut ids = IdGen::after_block(block);
    rewrite_block_with(block, &mut ids)
}

/// Drops pure assignments with no remaining uses. Reads are kept because
/// they may fault.
fn eliminate_dead(stmts: Vec<Stmt>, term: &crate::ir::TermStmt) -> Vec<Stmt> {
    let mut live: HashSet<AssignId> = term.regs().iter().filter_map(|(_, v)| v.as_assigned()).collect();
    let mut keep = vec![true; stmts.len()];
    for (i, s) in stmts.iter().enumerate().rev() {
        if let Stmt::Assign {
            id,
            rhs: AssignRhs::EvalApp(_),
        } = s
        {
            if !live.contains(id) {
                keep[i] = false;
                continue;
            }
        }
        live.extend(s.operands().into_iter().filter_map(Value::as_assigned));
    }
    stmts
        .into_iter()
        .zip(keep)
        .filter_map(|(s, k)| k.then_some(s))
        .collect()
}

/// Indices of statements that still add a constant to a mux.
pub fn mhnf_violations(block: &Block) -> Vec<usize> {
    let mut muxes = HashSet::new();
    let mut out = Vec::new();
    for (i, s) in block.stmts.iter().enumerate() {
        if let Stmt::Assign {
            id,
            rhs: AssignRhs::EvalApp(app),
        } = s
        {
            let is_mux = |v: &Value| v.as_assigned().is_some_and(|x| muxes.contains(&x));
            if let App::BvAdd(_, a, b) = app {
                if (is_mux(a) && is_addend(b)) || (is_mux(b) && is_addend(a)) {
                    out.push(i);
                }
            }
            if matches!(app, App::Mux(..)) {
                muxes.insert(*id);
            }
        }
    }
    out
}
