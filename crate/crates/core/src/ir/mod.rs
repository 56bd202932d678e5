// SPDX-License-Identifier: Apache-2.0

//! Typed three-address-code basic blocks.
//!
//! A [`Block`] is a list of [`Stmt`]s closed by exactly one [`TermStmt`].
//! Assignments bind fresh [`AssignId`]s; everything else refers to values by
//! [`Value`]. Register effects of a block are only visible through the
//! terminator's [`RegState`], which maps every register to its value at the
//! end of the block.

mod eval;
mod pretty;
mod validate;

pub use eval::{eval_block, ByteStore, ConcreteState, EvalError, MemWrite};
pub use validate::{validate_block, Violation};

use std::collections::HashMap;
use std::fmt;

use crate::mem::{MemAddr, MemSegmentOff, MemWord};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FloatInfo {
    Single,
    Double,
}

/// Shape of a machine value.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum TypeRepr {
    Bv(u32),
    Float(FloatInfo),
    Vec(u32, Box<TypeRepr>),
}

impl TypeRepr {
    pub fn bv_width(&self) -> Option<u32> {
        match self {
            TypeRepr::Bv(w) => Some(*w),
            _ => None,
        }
    }

    pub fn is_well_formed(&self) -> bool {
        match self {
            TypeRepr::Bv(w) => *w > 0,
            TypeRepr::Float(_) => true,
            TypeRepr::Vec(n, t) => *n > 0 && t.is_well_formed(),
        }
    }
}

impl fmt::Display for TypeRepr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TypeRepr::Bv(w) => write!(f, "bv{w}"),
            TypeRepr::Float(FloatInfo::Single) => write!(f, "float"),
            TypeRepr::Float(FloatInfo::Double) => write!(f, "double"),
            TypeRepr::Vec(n, t) => write!(f, "vec<{n}, {t}>"),
        }
    }
}

/// All-ones mask for a bitvector of `width` bits (`width <= 64`).
pub fn mask(width: u32) -> u64 {
    if width >= 64 {
        u64::MAX
    } else {
        (1u64 << width) - 1
    }
}

/// Sign-extends the low `width` bits of `value` to 64 bits.
pub fn sign_extend(value: u64, width: u32) -> i64 {
    if width >= 64 {
        value as i64
    } else {
        let shift = 64 - width;
        ((value << shift) as i64) >> shift
    }
}

/// Token distinguishing the identifier space of one function.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct IdScope(pub u64);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AssignId {
    pub scope: IdScope,
    pub index: u32,
}

impl fmt::Display for AssignId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.index)
    }
}

/// Issues strictly increasing ids within one scope.
#[derive(Clone, Debug)]
pub struct IdGen {
    scope: IdScope,
    next: u32,
}

impl IdGen {
    pub fn new(scope: IdScope) -> IdGen {
        IdGen { scope, next: 1 }
    }

    /// A generator whose first id follows every id already used in `block`.
    pub fn after_block(block: &Block) -> IdGen {
        let mut scope = IdScope(0);
        let mut next = 1;
        for id in block.defined_ids() {
            scope = id.scope;
            next = next.max(id.index + 1);
        }
        IdGen { scope, next }
    }

    pub fn fresh(&mut self) -> AssignId {
        let id = AssignId {
            scope: self.scope,
            index: self.next,
        };
        self.next += 1;
        id
    }
}

/// RISC-V integer registers plus the program counter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Reg {
    X(u8),
    Pc,
}

const ABI_NAMES: [&str; 32] = [
    "zero", "ra", "sp", "gp", "tp", "t0", "t1", "t2", "s0", "s1", "a0", "a1", "a2", "a3", "a4", "a5", "a6", "a7", "s2",
    "s3", "s4", "s5", "s6", "s7", "s8", "s9", "s10", "s11", "t3", "t4", "t5", "t6",
];

impl Reg {
    pub const COUNT: usize = 33;
    pub const ZERO: Reg = Reg::X(0);
    pub const RA: Reg = Reg::X(1);
    pub const SP: Reg = Reg::X(2);
    pub const A0: Reg = Reg::X(10);
    pub const A1: Reg = Reg::X(11);

    pub fn x(n: u8) -> Reg {
        assert!(n < 32, "register index out of range: {n}");
        Reg::X(n)
    }

    /// Integer argument register `a<k>`.
    pub fn arg(k: u8) -> Reg {
        assert!(k < 8);
        Reg::X(10 + k)
    }

    pub fn index(self) -> usize {
        match self {
            Reg::X(n) => n as usize,
            Reg::Pc => 32,
        }
    }

    pub fn from_index(i: usize) -> Reg {
        if i == 32 {
            Reg::Pc
        } else {
            Reg::x(i as u8)
        }
    }

    pub fn all() -> impl Iterator<Item = Reg> {
        (0..Self::COUNT).map(Reg::from_index)
    }

    pub fn name(self) -> &'static str {
        match self {
            Reg::X(n) => ABI_NAMES[n as usize],
            Reg::Pc => "pc",
        }
    }

    pub fn from_name(name: &str) -> Option<Reg> {
        if name == "pc" {
            return Some(Reg::Pc);
        }
        if name == "fp" {
            return Some(Reg::X(8));
        }
        ABI_NAMES.iter().position(|n| *n == name).map(|i| Reg::X(i as u8))
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Value {
    /// Bitvector literal, normalized to `width` bits.
    Bv {
        width: u32,
        value: u64,
    },
    /// An address in a relocatable region.
    Relocatable {
        width: u32,
        addr: MemAddr,
    },
    Assigned {
        id: AssignId,
        ty: TypeRepr,
    },
    /// A register's value on entry to the block.
    Initial {
        reg: Reg,
        width: u32,
    },
}

impl Value {
    pub fn bv(width: u32, value: u64) -> Value {
        Value::Bv {
            width,
            value: value & mask(width),
        }
    }

    pub fn bool(b: bool) -> Value {
        Value::bv(1, u64::from(b))
    }

    pub fn initial(reg: Reg, width: u32) -> Value {
        Value::Initial { reg, width }
    }

    pub fn type_repr(&self) -> TypeRepr {
        match self {
            Value::Bv { width, .. } | Value::Relocatable { width, .. } | Value::Initial { width, .. } => {
                TypeRepr::Bv(*width)
            }
            Value::Assigned { ty, .. } => ty.clone(),
        }
    }

    pub fn as_const(&self) -> Option<u64> {
        match self {
            Value::Bv { value, .. } => Some(*value),
            _ => None,
        }
    }

    pub fn as_assigned(&self) -> Option<AssignId> {
        match self {
            Value::Assigned { id, .. } => Some(*id),
            _ => None,
        }
    }

    pub fn width(&self) -> Option<u32> {
        self.type_repr().bv_width()
    }
}

/// Total map from the result type of an expression.
pub fn type_of(v: &Value) -> TypeRepr {
    v.type_repr()
}

/// Pure bitvector operations.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum App {
    BvAdd(u32, Value, Value),
    BvSub(u32, Value, Value),
    BvMul(u32, Value, Value),
    /// Unsigned division; division by zero yields all ones.
    BvUDiv(u32, Value, Value),
    BvAnd(u32, Value, Value),
    BvOr(u32, Value, Value),
    BvXor(u32, Value, Value),
    BvShl(u32, Value, Value),
    BvLshr(u32, Value, Value),
    BvAshr(u32, Value, Value),
    BvComplement(u32, Value),
    Mux(TypeRepr, Value, Value, Value),
    Eq(Value, Value),
    BvUlt(Value, Value),
    BvSlt(Value, Value),
    SExt(u32, u32, Value),
    UExt(u32, u32, Value),
    Trunc(u32, u32, Value),
}

impl App {
    pub fn result_type(&self) -> TypeRepr {
        use App::*;
        match self {
            BvAdd(w, ..)
            | BvSub(w, ..)
            | BvMul(w, ..)
            | BvUDiv(w, ..)
            | BvAnd(w, ..)
            | BvOr(w, ..)
            | BvXor(w, ..)
            | BvShl(w, ..)
            | BvLshr(w, ..)
            | BvAshr(w, ..)
            | BvComplement(w, _) => TypeRepr::Bv(*w),
            Mux(t, ..) => t.clone(),
            Eq(..) | BvUlt(..) | BvSlt(..) => TypeRepr::Bv(1),
            SExt(_, to, _) | UExt(_, to, _) | Trunc(_, to, _) => TypeRepr::Bv(*to),
        }
    }

    pub fn operands(&self) -> Vec<&Value> {
        use App::*;
        match self {
            BvAdd(_, a, b)
            | BvSub(_, a, b)
            | BvMul(_, a, b)
            | BvUDiv(_, a, b)
            | BvAnd(_, a, b)
            | BvOr(_, a, b)
            | BvXor(_, a, b)
            | BvShl(_, a, b)
            | BvLshr(_, a, b)
            | BvAshr(_, a, b)
            | Eq(a, b)
            | BvUlt(a, b)
            | BvSlt(a, b) => vec![a, b],
            BvComplement(_, a) | SExt(_, _, a) | UExt(_, _, a) | Trunc(_, _, a) => vec![a],
            Mux(_, c, t, f) => vec![c, t, f],
        }
    }

    /// Rebuilds the application with every operand passed through `f`.
    pub fn map_operands(&self, mut f: impl FnMut(&Value) -> Value) -> App {
        use App::*;
        match self {
            BvAdd(w, a, b) => BvAdd(*w, f(a), f(b)),
            BvSub(w, a, b) => BvSub(*w, f(a), f(b)),
            BvMul(w, a, b) => BvMul(*w, f(a), f(b)),
            BvUDiv(w, a, b) => BvUDiv(*w, f(a), f(b)),
            BvAnd(w, a, b) => BvAnd(*w, f(a), f(b)),
            BvOr(w, a, b) => BvOr(*w, f(a), f(b)),
            BvXor(w, a, b) => BvXor(*w, f(a), f(b)),
            BvShl(w, a, b) => BvShl(*w, f(a), f(b)),
            BvLshr(w, a, b) => BvLshr(*w, f(a), f(b)),
            BvAshr(w, a, b) => BvAshr(*w, f(a), f(b)),
            BvComplement(w, a) => BvComplement(*w, f(a)),
            Mux(t, c, x, y) => {
                let c = f(c);
                let x = f(x);
                Mux(t.clone(), c, x, f(y))
            }
            Eq(a, b) => Eq(f(a), f(b)),
            BvUlt(a, b) => BvUlt(f(a), f(b)),
            BvSlt(a, b) => BvSlt(f(a), f(b)),
            SExt(from, to, a) => SExt(*from, *to, f(a)),
            UExt(from, to, a) => UExt(*from, *to, f(a)),
            Trunc(from, to, a) => Trunc(*from, *to, f(a)),
        }
    }

    pub fn name(&self) -> &'static str {
        use App::*;
        match self {
            BvAdd(..) => "Add",
            BvSub(..) => "Sub",
            BvMul(..) => "Mul",
            BvUDiv(..) => "UDiv",
            BvAnd(..) => "And",
            BvOr(..) => "Or",
            BvXor(..) => "Xor",
            BvShl(..) => "Shl",
            BvLshr(..) => "LShr",
            BvAshr(..) => "AShr",
            BvComplement(..) => "Complement",
            Mux(..) => "Mux",
            Eq(..) => "Eq",
            BvUlt(..) => "Ult",
            BvSlt(..) => "Slt",
            SExt(..) => "SExt",
            UExt(..) => "UExt",
            Trunc(..) => "Trunc",
        }
    }
}

/// Result type of an application.
pub fn app_type(a: &App) -> TypeRepr {
    a.result_type()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Endianness {
    Little,
    Big,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct MemRepr {
    pub bytes: u8,
    pub endian: Endianness,
}

impl MemRepr {
    pub fn le(bytes: u8) -> MemRepr {
        MemRepr {
            bytes,
            endian: Endianness::Little,
        }
    }

    pub fn value_type(&self) -> TypeRepr {
        TypeRepr::Bv(8 * u32::from(self.bytes))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum AssignRhs {
    EvalApp(App),
    ReadMem { addr: Value, repr: MemRepr },
}

impl AssignRhs {
    pub fn result_type(&self) -> TypeRepr {
        match self {
            AssignRhs::EvalApp(a) => a.result_type(),
            AssignRhs::ReadMem { repr, .. } => repr.value_type(),
        }
    }

    pub fn operands(&self) -> Vec<&Value> {
        match self {
            AssignRhs::EvalApp(a) => a.operands(),
            AssignRhs::ReadMem { addr, .. } => vec![addr],
        }
    }
}

/// RISC-V specific in-block effects.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ArchStmt {
    Fence { fm: u8, pred: u8, succ: u8 },
}

/// RISC-V specific block terminators.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ArchTermStmt {
    Ecall,
    Ebreak,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Stmt {
    Assign {
        id: AssignId,
        rhs: AssignRhs,
    },
    WriteMem {
        addr: Value,
        repr: MemRepr,
        value: Value,
    },
    /// Marks the start of an instruction at `offset` bytes into the block.
    InstructionStart {
        offset: u64,
        text: String,
    },
    Comment(String),
    Arch(ArchStmt),
}

impl Stmt {
    pub fn operands(&self) -> Vec<&Value> {
        match self {
            Stmt::Assign { rhs, .. } => rhs.operands(),
            Stmt::WriteMem { addr, value, .. } => vec![addr, value],
            _ => Vec::new(),
        }
    }
}

/// Total map from registers to values.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct RegState {
    values: Vec<Value>,
}

impl RegState {
    /// Every register maps to its own entry value; `zero` maps to 0.
    pub fn identity(xlen: u32) -> RegState {
        let values = Reg::all()
            .map(|r| {
                if r == Reg::ZERO {
                    Value::bv(xlen, 0)
                } else {
                    Value::initial(r, xlen)
                }
            })
            .collect();
        RegState { values }
    }

    pub fn get(&self, r: Reg) -> &Value {
        &self.values[r.index()]
    }

    pub fn set(&mut self, r: Reg, v: Value) {
        self.values[r.index()] = v;
    }

    pub fn iter(&self) -> impl Iterator<Item = (Reg, &Value)> {
        self.values.iter().enumerate().map(|(i, v)| (Reg::from_index(i), v))
    }

    pub fn map_values(&self, mut f: impl FnMut(&Value) -> Value) -> RegState {
        RegState {
            values: self.values.iter().map(&mut f).collect(),
        }
    }

    /// True when `r` still holds its entry value.
    pub fn is_passthrough(&self, r: Reg) -> bool {
        match self.get(r) {
            Value::Initial { reg, .. } => *reg == r,
            Value::Bv { value: 0, .. } => r == Reg::ZERO,
            _ => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum TermStmt {
    FetchAndExecute(RegState),
    TranslateError(RegState, String),
    ArchTerm(ArchTermStmt, RegState),
}

impl TermStmt {
    pub fn regs(&self) -> &RegState {
        match self {
            TermStmt::FetchAndExecute(r) | TermStmt::TranslateError(r, _) | TermStmt::ArchTerm(_, r) => r,
        }
    }

    pub fn map_regs(&self, f: impl FnMut(&Value) -> Value) -> TermStmt {
        match self {
            TermStmt::FetchAndExecute(r) => TermStmt::FetchAndExecute(r.map_values(f)),
            TermStmt::TranslateError(r, m) => TermStmt::TranslateError(r.map_values(f), m.clone()),
            TermStmt::ArchTerm(a, r) => TermStmt::ArchTerm(*a, r.map_values(f)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Block {
    pub address: MemSegmentOff,
    pub byte_length: MemWord,
    pub stmts: Vec<Stmt>,
    pub term: TermStmt,
}

impl Block {
    /// Register width, taken from the type of the program counter.
    pub fn xlen(&self) -> u32 {
        self.term.regs().get(Reg::Pc).width().unwrap_or(64)
    }

    pub fn defined_ids(&self) -> impl Iterator<Item = AssignId> + '_ {
        self.stmts.iter().filter_map(|s| match s {
            Stmt::Assign { id, .. } => Some(*id),
            _ => None,
        })
    }

    /// Map from assignment id to its right-hand side.
    pub fn definitions(&self) -> HashMap<AssignId, &AssignRhs> {
        self.stmts
            .iter()
            .filter_map(|s| match s {
                Stmt::Assign { id, rhs } => Some((*id, rhs)),
                _ => None,
            })
            .collect()
    }

    /// Byte offsets of every instruction in the block.
    pub fn instruction_offsets(&self) -> Vec<u64> {
        self.stmts
            .iter()
            .filter_map(|s| match s {
                Stmt::InstructionStart { offset, .. } => Some(*offset),
                _ => None,
            })
            .collect()
    }
}

/// Renumbers assignments in definition order starting at `r1`, in scope 0.
///
/// Two blocks that differ only in the choice of assignment ids canonicalize
/// to equal blocks.
pub fn canonicalize_ids(block: &Block) -> Block {
    let mut renames: HashMap<AssignId, AssignId> = HashMap::new();
    for (i, id) in block.defined_ids().enumerate() {
        renames.insert(
            id,
            AssignId {
                scope: IdScope(0),
                index: i as u32 + 1,
            },
        );
    }
    let rename = |v: &Value| match v {
        Value::Assigned { id, ty } => Value::Assigned {
            id: renames.get(id).copied().unwrap_or(*id),
            ty: ty.clone(),
        },
        other => other.clone(),
    };
    let stmts = block
        .stmts
        .iter()
        .map(|s| match s {
            Stmt::Assign { id, rhs } => Stmt::Assign {
                id: renames[id],
                rhs: match rhs {
                    AssignRhs::EvalApp(a) => AssignRhs::EvalApp(a.map_operands(rename)),
                    AssignRhs::ReadMem { addr, repr } => AssignRhs::ReadMem {
                        addr: rename(addr),
                        repr: *repr,
                    },
                },
            },
            Stmt::WriteMem { addr, repr, value } => Stmt::WriteMem {
                addr: rename(addr),
                repr: *repr,
                value: rename(value),
            },
            other => other.clone(),
        })
        .collect();
    Block {
        address: block.address,
        byte_length: block.byte_length,
        stmts,
        term: block.term.map_regs(rename),
    }
}
