// SPDX-License-Identifier: Apache-2.0

//! Listing-style rendering: `r2 := Mux r1 0x4 0x28`, `{ pc => r3 }`.

use std::fmt;

use super::{App, ArchStmt, ArchTermStmt, AssignRhs, Block, Endianness, MemRepr, RegState, Stmt, TermStmt, Value};

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Bv { value, .. } => write!(f, "{value:#x}"),
            Value::Relocatable { addr, .. } => write!(f, "{addr}"),
            Value::Assigned { id, .. } => write!(f, "{id}"),
            Value::Initial { reg, .. } => write!(f, "{reg}"),
        }
    }
}

impl fmt::Display for App {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())?;
        match self {
            App::SExt(_, to, a) | App::UExt(_, to, a) | App::Trunc(_, to, a) => write!(f, " {a} {to}"),
            _ => {
                for v in self.operands() {
                    write!(f, " {v}")?;
                }
                Ok(())
            }
        }
    }
}

impl fmt::Display for MemRepr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let e = match self.endian {
            Endianness::Little => "le",
            Endianness::Big => "be",
        };
        write!(f, "bv{} {e}", 8 * u32::from(self.bytes))
    }
}

impl fmt::Display for ArchStmt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ArchStmt::Fence { fm, pred, succ } => write!(f, "fence fm={fm:#x} pred={pred:#x} succ={succ:#x}"),
        }
    }
}

impl fmt::Display for ArchTermStmt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ArchTermStmt::Ecall => "ecall",
            ArchTermStmt::Ebreak => "ebreak",
        })
    }
}

impl fmt::Display for Stmt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stmt::Assign { id, rhs } => match rhs {
                AssignRhs::EvalApp(app) => write!(f, "{id} := {app}"),
                AssignRhs::ReadMem { addr, repr } => write!(f, "{id} := ReadMem {addr} ({repr})"),
            },
            Stmt::WriteMem { addr, repr, value } => write!(f, "WriteMem {addr} ({repr}) {value}"),
            Stmt::InstructionStart { offset, text } => write!(f, "# {offset:#x}: {text}"),
            Stmt::Comment(c) => write!(f, "# {c}"),
            Stmt::Arch(a) => write!(f, "{a}"),
        }
    }
}

impl fmt::Display for RegState {
    /// Only registers that changed are listed; `pc` is always shown.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        f.write_str("{")?;
        for (reg, v) in self.iter() {
            if reg != super::Reg::Pc && self.is_passthrough(reg) {
                continue;
            }
            write!(f, "{} {reg} => {v}", if first { "" } else { "," })?;
            first = false;
        }
        f.write_str(" }")
    }
}

impl fmt::Display for TermStmt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TermStmt::FetchAndExecute(r) => write!(f, "{r}"),
            TermStmt::TranslateError(r, msg) => write!(f, "translate_error {msg:?} {r}"),
            TermStmt::ArchTerm(a, r) => write!(f, "{a} {r}"),
        }
    }
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.stmts {
            writeln!(f, "{s}")?;
        }
        writeln!(f, "{}", self.term)
    }
}

#[cfg(test)]
mod tests {
    use crate::ir::{App, AssignId, AssignRhs, IdScope, Reg, RegState, Stmt, TermStmt, TypeRepr, Value};

    #[test]
    fn listing_style() {
        let r = |i| Value::Assigned {
            id: AssignId {
                scope: IdScope(0),
                index: i,
            },
            ty: TypeRepr::Bv(64),
        };
        let s = Stmt::Assign {
            id: AssignId {
                scope: IdScope(0),
                index: 2,
            },
            rhs: AssignRhs::EvalApp(App::Mux(TypeRepr::Bv(64), r(1), Value::bv(64, 4), Value::bv(64, 0x28))),
        };
        assert_eq!(s.to_string(), "r2 := Mux r1 0x4 0x28");
        let mut regs = RegState::identity(64);
        regs.set(Reg::Pc, r(3));
        assert_eq!(TermStmt::FetchAndExecute(regs).to_string(), "{ pc => r3 }");
    }
}
