// SPDX-License-Identifier: Apache-2.0

use std::collections::HashMap;
use std::fmt;

use super::{App, AssignId, AssignRhs, Block, Reg, Stmt, TypeRepr, Value};

/// A broken block invariant. `stmt` is `None` for the terminator.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    MissingInstructionStart,
    NonIncreasingId { stmt: usize, id: AssignId },
    UseBeforeDef { stmt: Option<usize>, id: AssignId },
    Typing { stmt: Option<usize>, message: String },
    NonZeroX0,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let loc = |s: &Option<usize>| match s {
            Some(i) => format!("stmt {i}"),
            None => "terminator".to_string(),
        };
        match self {
            Violation::MissingInstructionStart => {
                write!(f, "block does not begin with an instruction start at offset 0")
            }
            Violation::NonIncreasingId { stmt, id } => write!(f, "stmt {stmt}: id {id} does not increase"),
            Violation::UseBeforeDef { stmt, id } => write!(f, "{}: {id} used before definition", loc(stmt)),
            Violation::Typing { stmt, message } => write!(f, "{}: {message}", loc(stmt)),
            Violation::NonZeroX0 => write!(f, "terminator does not bind zero to 0"),
        }
    }
}

struct Checker {
    defs: HashMap<AssignId, TypeRepr>,
    out: Vec<Violation>,
}

impl Checker {
    fn typing(&mut self, stmt: Option<usize>, message: String) {
        self.out.push(Violation::Typing { stmt, message });
    }

    fn operand(&mut self, stmt: Option<usize>, v: &Value) {
        match v {
            Value::Assigned { id, ty } => match self.defs.get(id) {
                None => self.out.push(Violation::UseBeforeDef { stmt, id: *id }),
                Some(def) if def != ty => {
                    let message = format!("{id} used at {ty} but defined at {def}");
                    self.typing(stmt, message);
                }
                Some(_) => {}
            },
            Value::Bv { width, .. } | Value::Relocatable { width, .. } | Value::Initial { width, .. } => {
                if *width == 0 || *width > 64 {
                    self.typing(stmt, format!("unsupported literal width {width}"));
                }
            }
        }
    }

    fn expect(&mut self, stmt: Option<usize>, v: &Value, want: &TypeRepr) {
        let got = v.type_repr();
        if &got != want {
            self.typing(stmt, format!("operand has type {got}, expected {want}"));
        }
    }

    fn app(&mut self, stmt: usize, app: &App) {
        use App::*;
        let at = Some(stmt);
        for v in app.operands() {
            self.operand(at, v);
        }
        match app {
            BvAdd(w, a, b)
            | BvSub(w, a, b)
            | BvMul(w, a, b)
            | BvUDiv(w, a, b)
            | BvAnd(w, a, b)
            | BvOr(w, a, b)
            | BvXor(w, a, b)
            | BvShl(w, a, b)
            | BvLshr(w, a, b)
            | BvAshr(w, a, b) => {
                self.width(at, *w);
                self.expect(at, a, &TypeRepr::Bv(*w));
                self.expect(at, b, &TypeRepr::Bv(*w));
            }
            BvComplement(w, a) => {
                self.width(at, *w);
                self.expect(at, a, &TypeRepr::Bv(*w));
            }
            Mux(t, c, x, y) => {
                self.expect(at, c, &TypeRepr::Bv(1));
                self.expect(at, x, t);
                self.expect(at, y, t);
            }
            Eq(a, b) | BvUlt(a, b) | BvSlt(a, b) => {
                let ta = a.type_repr();
                if ta.bv_width().is_none() {
                    self.typing(at, format!("comparison over non-bitvector {ta}"));
                }
                self.expect(at, b, &ta);
            }
            SExt(from, to, a) | UExt(from, to, a) => {
                if to <= from {
                    self.typing(at, format!("extension from {from} to {to} does not widen"));
                }
                self.width(at, *to);
                self.expect(at, a, &TypeRepr::Bv(*from));
            }
            Trunc(from, to, a) => {
                if to >= from || *to == 0 {
                    self.typing(at, format!("truncation from {from} to {to} does not narrow"));
                }
                self.expect(at, a, &TypeRepr::Bv(*from));
            }
        }
    }

    fn width(&mut self, stmt: Option<usize>, w: u32) {
        if w == 0 || w > 64 {
            self.typing(stmt, format!("unsupported width {w}"));
        }
    }
}

/// Checks ordering, def-before-use and typing; an empty result means the
/// block is well formed.
pub fn validate_block(b: &Block) -> Vec<Violation> {
    let mut c = Checker {
        defs: HashMap::new(),
        out: Vec::new(),
    };
    match b.stmts.first() {
        Some(Stmt::InstructionStart { offset: 0, .. }) => {}
        _ => c.out.push(Violation::MissingInstructionStart),
    }
    let ptr = TypeRepr::Bv(b.xlen());
    let mut last: Option<AssignId> = None;
    for (i, stmt) in b.stmts.iter().enumerate() {
        match stmt {
            Stmt::Assign { id, rhs } => {
                match rhs {
                    AssignRhs::EvalApp(app) => c.app(i, app),
                    AssignRhs::ReadMem { addr, repr } => {
                        c.operand(Some(i), addr);
                        c.expect(Some(i), addr, &ptr);
                        if !matches!(repr.bytes, 1 | 2 | 4 | 8) {
                            c.typing(Some(i), format!("unsupported access size {}", repr.bytes));
                        }
                    }
                }
                if let Some(prev) = last {
                    if id.scope != prev.scope || id.index <= prev.index {
                        c.out.push(Violation::NonIncreasingId { stmt: i, id: *id });
                    }
                }
                last = Some(*id);
                c.defs.insert(*id, rhs.result_type());
            }
            Stmt::WriteMem { addr, repr, value } => {
                c.operand(Some(i), addr);
                c.operand(Some(i), value);
                c.expect(Some(i), addr, &ptr);
                c.expect(Some(i), value, &repr.value_type());
            }
            Stmt::InstructionStart { .. } | Stmt::Comment(_) | Stmt::Arch(_) => {}
        }
    }
    for (reg, v) in b.term.regs().iter() {
        c.operand(None, v);
        if v.type_repr() != ptr {
            c.typing(None, format!("{reg} bound to a value of type {}", v.type_repr()));
        }
    }
    if b.term.regs().get(Reg::ZERO).as_const() != Some(0) {
        c.out.push(Violation::NonZeroX0);
    }
    c.out
}
