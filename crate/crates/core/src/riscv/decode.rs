// SPDX-License-Identifier: Apache-2.0

//! RV32I/RV64I instruction decoding and encoding.
//!
//! Decoding walks a [`DecodeTable`]: a 128-entry array indexed by the major
//! opcode, whose entries dispatch further on `funct3` and then on one of the
//! high fields (`funct7`, `funct6` or the full 12-bit immediate) until a
//! single instruction pattern remains.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::OnceLock;

use thiserror::Error;

use crate::ir::Reg;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Format {
    R,
    I,
    S,
    B,
    U,
    J,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mnemonic {
    Lui,
    Auipc,
    Jal,
    Jalr,
    Beq,
    Bne,
    Blt,
    Bge,
    Bltu,
    Bgeu,
    Lb,
    Lh,
    Lw,
    Lbu,
    Lhu,
    Sb,
    Sh,
    Sw,
    Addi,
    Slti,
    Sltiu,
    Xori,
    Ori,
    Andi,
    Slli,
    Srli,
    Srai,
    Add,
    Sub,
    Sll,
    Slt,
    Sltu,
    Xor,
    Srl,
    Sra,
    Or,
    And,
    Fence,
    Ecall,
    Ebreak,
    // RV64I
    Lwu,
    Ld,
    Sd,
    Addiw,
    Slliw,
    Srliw,
    Sraiw,
    Addw,
    Subw,
    Sllw,
    Srlw,
    Sraw,
    // Division/multiplication subset expressible without wide products.
    Mul,
    Divu,
    Remu,
    Mulw,
    Divuw,
    Remuw,
}

/// Which register widths an encoding exists for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Xlen {
    Both,
    Rv32,
    Rv64,
}

/// Field consulted after `funct3`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum High {
    None,
    Funct7(u8),
    Funct6(u8),
    Imm12(u16),
}

#[derive(Debug)]
struct InsnSpec {
    mnemonic: Mnemonic,
    name: &'static str,
    format: Format,
    opcode: u8,
    funct3: Option<u8>,
    high: High,
    xlen: Xlen,
    /// Bits that must be zero for the pattern to match (besides dispatched fields).
    must_zero: u32,
}

const RD_BITS: u32 = 0x1f << 7;
const RS1_BITS: u32 = 0x1f << 15;

macro_rules! insn {
    ($m:ident, $name:literal, $fmt:ident, $op:literal, $f3:expr, $hi:expr, $x:ident) => {
        insn!($m, $name, $fmt, $op, $f3, $hi, $x, 0)
    };
    ($m:ident, $name:literal, $fmt:ident, $op:literal, $f3:expr, $hi:expr, $x:ident, $mz:expr) => {
        InsnSpec {
            mnemonic: Mnemonic::$m,
            name: $name,
            format: Format::$fmt,
            opcode: $op,
            funct3: $f3,
            high: $hi,
            xlen: Xlen::$x,
            must_zero: $mz,
        }
    };
}

use High::{Funct6 as F6, Funct7 as F7, Imm12, None as NoHigh};

static SPECS: &[InsnSpec] = &[
    insn!(Lui, "lui", U, 0x37, None, NoHigh, Both),
    insn!(Auipc, "auipc", U, 0x17, None, NoHigh, Both),
    insn!(Jal, "jal", J, 0x6f, None, NoHigh, Both),
    insn!(Jalr, "jalr", I, 0x67, Some(0), NoHigh, Both),
    insn!(Beq, "beq", B, 0x63, Some(0), NoHigh, Both),
    insn!(Bne, "bne", B, 0x63, Some(1), NoHigh, Both),
    insn!(Blt, "blt", B, 0x63, Some(4), NoHigh, Both),
    insn!(Bge, "bge", B, 0x63, Some(5), NoHigh, Both),
    insn!(Bltu, "bltu", B, 0x63, Some(6), NoHigh, Both),
    insn!(Bgeu, "bgeu", B, 0x63, Some(7), NoHigh, Both),
    insn!(Lb, "lb", I, 0x03, Some(0), NoHigh, Both),
    insn!(Lh, "lh", I, 0x03, Some(1), NoHigh, Both),
    insn!(Lw, "lw", I, 0x03, Some(2), NoHigh, Both),
    insn!(Ld, "ld", I, 0x03, Some(3), NoHigh, Rv64),
    insn!(Lbu, "lbu", I, 0x03, Some(4), NoHigh, Both),
    insn!(Lhu, "lhu", I, 0x03, Some(5), NoHigh, Both),
    insn!(Lwu, "lwu", I, 0x03, Some(6), NoHigh, Rv64),
    insn!(Sb, "sb", S, 0x23, Some(0), NoHigh, Both),
    insn!(Sh, "sh", S, 0x23, Some(1), NoHigh, Both),
    insn!(Sw, "sw", S, 0x23, Some(2), NoHigh, Both),
    insn!(Sd, "sd", S, 0x23, Some(3), NoHigh, Rv64),
    insn!(Addi, "addi", I, 0x13, Some(0), NoHigh, Both),
    insn!(Slli, "slli", I, 0x13, Some(1), F7(0x00), Rv32),
    insn!(Slli, "slli", I, 0x13, Some(1), F6(0x00), Rv64),
    insn!(Slti, "slti", I, 0x13, Some(2), NoHigh, Both),
    insn!(Sltiu, "sltiu", I, 0x13, Some(3), NoHigh, Both),
    insn!(Xori, "xori", I, 0x13, Some(4), NoHigh, Both),
    insn!(Srli, "srli", I, 0x13, Some(5), F7(0x00), Rv32),
    insn!(Srai, "srai", I, 0x13, Some(5), F7(0x20), Rv32),
    insn!(Srli, "srli", I, 0x13, Some(5), F6(0x00), Rv64),
    insn!(Srai, "srai", I, 0x13, Some(5), F6(0x10), Rv64),
    insn!(Ori, "ori", I, 0x13, Some(6), NoHigh, Both),
    insn!(Andi, "andi", I, 0x13, Some(7), NoHigh, Both),
    insn!(Add, "add", R, 0x33, Some(0), F7(0x00), Both),
    insn!(Sub, "sub", R, 0x33, Some(0), F7(0x20), Both),
    insn!(Mul, "mul", R, 0x33, Some(0), F7(0x01), Both),
    insn!(Sll, "sll", R, 0x33, Some(1), F7(0x00), Both),
    insn!(Slt, "slt", R, 0x33, Some(2), F7(0x00), Both),
    insn!(Sltu, "sltu", R, 0x33, Some(3), F7(0x00), Both),
    insn!(Xor, "xor", R, 0x33, Some(4), F7(0x00), Both),
    insn!(Srl, "srl", R, 0x33, Some(5), F7(0x00), Both),
    insn!(Sra, "sra", R, 0x33, Some(5), F7(0x20), Both),
    insn!(Divu, "divu", R, 0x33, Some(5), F7(0x01), Both),
    insn!(Or, "or", R, 0x33, Some(6), F7(0x00), Both),
    insn!(And, "and", R, 0x33, Some(7), F7(0x00), Both),
    insn!(Remu, "remu", R, 0x33, Some(7), F7(0x01), Both),
    insn!(Fence, "fence", I, 0x0f, Some(0), NoHigh, Both, RD_BITS | RS1_BITS),
    insn!(Ecall, "ecall", I, 0x73, Some(0), Imm12(0), Both, RD_BITS | RS1_BITS),
    insn!(Ebreak, "ebreak", I, 0x73, Some(0), Imm12(1), Both, RD_BITS | RS1_BITS),
    insn!(Addiw, "addiw", I, 0x1b, Some(0), NoHigh, Rv64),
    insn!(Slliw, "slliw", I, 0x1b, Some(1), F7(0x00), Rv64),
    insn!(Srliw, "srliw", I, 0x1b, Some(5), F7(0x00), Rv64),
    insn!(Sraiw, "sraiw", I, 0x1b, Some(5), F7(0x20), Rv64),
    insn!(Addw, "addw", R, 0x3b, Some(0), F7(0x00), Rv64),
    insn!(Subw, "subw", R, 0x3b, Some(0), F7(0x20), Rv64),
    insn!(Mulw, "mulw", R, 0x3b, Some(0), F7(0x01), Rv64),
    insn!(Sllw, "sllw", R, 0x3b, Some(1), F7(0x00), Rv64),
    insn!(Srlw, "srlw", R, 0x3b, Some(5), F7(0x00), Rv64),
    insn!(Sraw, "sraw", R, 0x3b, Some(5), F7(0x20), Rv64),
    insn!(Divuw, "divuw", R, 0x3b, Some(5), F7(0x01), Rv64),
    insn!(Remuw, "remuw", R, 0x3b, Some(7), F7(0x01), Rv64),
];

fn spec_for(m: Mnemonic) -> &'static InsnSpec {
    // RV64 shift layout is a superset of the RV32 one, so prefer it.
    SPECS
        .iter()
        .rev()
        .find(|s| s.mnemonic == m)
        .expect("every mnemonic has a table entry")
}

impl Mnemonic {
    pub fn name(self) -> &'static str {
        spec_for(self).name
    }

    pub fn format(self) -> Format {
        spec_for(self).format
    }

    /// Every supported mnemonic, including RV64-only ones.
    pub fn all() -> Vec<Mnemonic> {
        let mut v: Vec<Mnemonic> = SPECS.iter().map(|s| s.mnemonic).collect();
        v.sort();
        v.dedup();
        v
    }

    pub fn is_rv64_only(self) -> bool {
        !SPECS.iter().any(|s| s.mnemonic == self && s.xlen != Xlen::Rv64)
    }

    pub fn is_load(self) -> bool {
        matches!(
            self,
            Mnemonic::Lb | Mnemonic::Lh | Mnemonic::Lw | Mnemonic::Ld | Mnemonic::Lbu | Mnemonic::Lhu | Mnemonic::Lwu
        )
    }

    pub fn is_shift_imm(self) -> bool {
        matches!(
            self,
            Mnemonic::Slli | Mnemonic::Srli | Mnemonic::Srai | Mnemonic::Slliw | Mnemonic::Srliw | Mnemonic::Sraiw
        )
    }

    /// Bits of shift amount carried by a shift-immediate instruction.
    fn shamt_bits(self) -> u32 {
        match self {
            Mnemonic::Slli | Mnemonic::Srli | Mnemonic::Srai => 6,
            _ => 5,
        }
    }

    fn has_rd_rs1_imm_only(self) -> bool {
        matches!(self, Mnemonic::Fence | Mnemonic::Ecall | Mnemonic::Ebreak)
    }
}

impl fmt::Display for Mnemonic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A decoded instruction. Immediates are sign-extended per format; U-format
/// immediates keep their position (low 12 bits zero).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Instruction {
    pub mnemonic: Mnemonic,
    pub rd: Option<u8>,
    pub rs1: Option<u8>,
    pub rs2: Option<u8>,
    pub imm: i32,
}

impl Instruction {
    pub fn format(&self) -> Format {
        self.mnemonic.format()
    }

    /// Whether the operand fields present match what the format requires.
    pub fn fields_match_format(&self) -> bool {
        let (rd, rs1, rs2) = (self.rd.is_some(), self.rs1.is_some(), self.rs2.is_some());
        if self.mnemonic.has_rd_rs1_imm_only() {
            return !rd && !rs1 && !rs2;
        }
        match self.format() {
            Format::R => rd && rs1 && rs2 && self.imm == 0,
            Format::I => rd && rs1 && !rs2,
            Format::S | Format::B => !rd && rs1 && rs2,
            Format::U | Format::J => rd && !rs1 && !rs2,
        }
    }

    pub fn r(mnemonic: Mnemonic, rd: u8, rs1: u8, rs2: u8) -> Instruction {
        Instruction {
            mnemonic,
            rd: Some(rd),
            rs1: Some(rs1),
            rs2: Some(rs2),
            imm: 0,
        }
    }

    pub fn i(mnemonic: Mnemonic, rd: u8, rs1: u8, imm: i32) -> Instruction {
        Instruction {
            mnemonic,
            rd: Some(rd),
            rs1: Some(rs1),
            rs2: None,
            imm,
        }
    }

    /// S- and B-format: two sources and an immediate.
    pub fn s(mnemonic: Mnemonic, rs1: u8, rs2: u8, imm: i32) -> Instruction {
        Instruction {
            mnemonic,
            rd: None,
            rs1: Some(rs1),
            rs2: Some(rs2),
            imm,
        }
    }

    /// U- and J-format: a destination and an immediate.
    pub fn u(mnemonic: Mnemonic, rd: u8, imm: i32) -> Instruction {
        Instruction {
            mnemonic,
            rd: Some(rd),
            rs1: None,
            rs2: None,
            imm,
        }
    }

    pub fn bare(mnemonic: Mnemonic, imm: i32) -> Instruction {
        Instruction {
            mnemonic,
            rd: None,
            rs1: None,
            rs2: None,
            imm,
        }
    }
}

fn reg_name(r: Option<u8>) -> &'static str {
    r.map(|n| Reg::x(n).name()).unwrap_or("?")
}

fn fence_set(bits: i32) -> String {
    let s: String = [(8, 'i'), (4, 'o'), (2, 'r'), (1, 'w')]
        .iter()
        .filter(|(b, _)| bits & b != 0)
        .map(|(_, c)| *c)
        .collect();
    if s.is_empty() {
        "0".into()
    } else {
        s
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use Mnemonic::*;
        let m = self.mnemonic.name();
        let (rd, rs1, rs2) = (reg_name(self.rd), reg_name(self.rs1), reg_name(self.rs2));
        let imm = self.imm;
        match self.mnemonic {
            Ecall | Ebreak => f.write_str(m),
            Fence => {
                let fm = (imm >> 8) & 0xf;
                let (pred, succ) = ((imm >> 4) & 0xf, imm & 0xf);
                if fm == 8 && pred == 3 && succ == 3 {
                    f.write_str("fence.tso")
                } else if fm == 0 {
                    write!(f, "fence {}, {}", fence_set(pred), fence_set(succ))
                } else {
                    write!(f, "fence fm={fm} {}, {}", fence_set(pred), fence_set(succ))
                }
            }
            Lui | Auipc => write!(f, "{m} {rd}, {}", (imm as u32) >> 12),
            Jal => write!(f, "{m} {rd}, {imm}"),
            Jalr => write!(f, "{m} {rd}, {imm}({rs1})"),
            _ if self.mnemonic.is_load() => write!(f, "{m} {rd}, {imm}({rs1})"),
            Sb | Sh | Sw | Sd => write!(f, "{m} {rs2}, {imm}({rs1})"),
            Beq | Bne | Blt | Bge | Bltu | Bgeu => write!(f, "{m} {rs1}, {rs2}, {imm}"),
            _ => match self.format() {
                Format::R => write!(f, "{m} {rd}, {rs1}, {rs2}"),
                _ => write!(f, "{m} {rd}, {rs1}, {imm}"),
            },
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DecodeError {
    #[error("illegal instruction {0:#010x}")]
    Illegal(u32),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EncodeError {
    #[error("{mnemonic}: immediate {imm} out of range")]
    ImmediateRange { mnemonic: Mnemonic, imm: i32 },
    #[error("{mnemonic}: immediate {imm} must be even")]
    OddImmediate { mnemonic: Mnemonic, imm: i32 },
    #[error("{mnemonic}: register {reg} out of range")]
    Register { mnemonic: Mnemonic, reg: u8 },
    #[error("{0}: operand fields do not match the instruction format")]
    Fields(Mnemonic),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("decode patterns collide: {existing} and {new}")]
pub struct TableCollision {
    pub existing: &'static str,
    pub new: &'static str,
}

#[derive(Debug)]
enum Node {
    Empty,
    Leaf(&'static InsnSpec),
    Dispatch {
        lo: u32,
        bits: u32,
        children: BTreeMap<u32, Node>,
    },
}

impl Node {
    fn insert(&mut self, path: &[(u32, u32, u32)], spec: &'static InsnSpec) -> Result<(), TableCollision> {
        match (path.split_first(), &mut *self) {
            (None, Node::Empty) => {
                *self = Node::Leaf(spec);
                Ok(())
            }
            (None, Node::Leaf(prev)) | (Some(_), Node::Leaf(prev)) => Err(TableCollision {
                existing: prev.name,
                new: spec.name,
            }),
            (None, Node::Dispatch { children, .. }) => Err(TableCollision {
                existing: children.values().find_map(Node::any_name).unwrap_or("?"),
                new: spec.name,
            }),
            (Some((&(lo, bits, value), rest)), Node::Empty) => {
                let mut child = Node::Empty;
                child.insert(rest, spec)?;
                *self = Node::Dispatch {
                    lo,
                    bits,
                    children: BTreeMap::from([(value, child)]),
                };
                Ok(())
            }
            (
                Some((&(lo, bits, value), rest)),
                Node::Dispatch {
                    lo: l,
                    bits: b,
                    children,
                },
            ) => {
                if (lo, bits) != (*l, *b) {
                    return Err(TableCollision {
                        existing: children.values().find_map(Node::any_name).unwrap_or("?"),
                        new: spec.name,
                    });
                }
                children.entry(value).or_insert(Node::Empty).insert(rest, spec)
            }
        }
    }

    fn any_name(&self) -> Option<&'static str> {
        match self {
            Node::Empty => None,
            Node::Leaf(s) => Some(s.name),
            Node::Dispatch { children, .. } => children.values().find_map(Node::any_name),
        }
    }
}

/// Opcode-indexed dispatch table for one register width.
#[derive(Debug)]
pub struct DecodeTable {
    xlen: u32,
    primary: Vec<Node>,
}

fn field(word: u32, lo: u32, bits: u32) -> u32 {
    (word >> lo) & ((1 << bits) - 1)
}

impl DecodeTable {
    fn build(xlen: u32, specs: impl IntoIterator<Item = &'static InsnSpec>) -> Result<DecodeTable, TableCollision> {
        let mut primary: Vec<Node> = (0..128).map(|_| Node::Empty).collect();
        for spec in specs {
            let mut path = Vec::new();
            if let Some(f3) = spec.funct3 {
                path.push((12, 3, u32::from(f3)));
            }
            match spec.high {
                High::None => {}
                High::Funct7(v) => path.push((25, 7, u32::from(v))),
                High::Funct6(v) => path.push((26, 6, u32::from(v))),
                High::Imm12(v) => path.push((20, 12, u32::from(v))),
            }
            primary[spec.opcode as usize].insert(&path, spec)?;
        }
        Ok(DecodeTable { xlen, primary })
    }

    /// Builds the table for `xlen` (32 or 64).
    pub fn new(xlen: u32) -> Result<DecodeTable, TableCollision> {
        let wanted = if xlen == 32 { Xlen::Rv32 } else { Xlen::Rv64 };
        DecodeTable::build(xlen, SPECS.iter().filter(|s| s.xlen == Xlen::Both || s.xlen == wanted))
    }

    /// Shared table instance for `xlen`.
    pub fn for_xlen(xlen: u32) -> &'static DecodeTable {
        static RV32: OnceLock<DecodeTable> = OnceLock::new();
        static RV64: OnceLock<DecodeTable> = OnceLock::new();
        let cell = if xlen == 32 { &RV32 } else { &RV64 };
        cell.get_or_init(|| DecodeTable::new(xlen).expect("built-in decode patterns are disjoint"))
    }

    pub fn xlen(&self) -> u32 {
        self.xlen
    }

    pub fn decode(&self, word: u32) -> Result<Instruction, DecodeError> {
        let mut node = &self.primary[(word & 0x7f) as usize];
        let spec = loop {
            match node {
                Node::Empty => return Err(DecodeError::Illegal(word)),
                Node::Leaf(spec) => break *spec,
                Node::Dispatch { lo, bits, children } => {
                    node = children
                        .get(&field(word, *lo, *bits))
                        .ok_or(DecodeError::Illegal(word))?;
                }
            }
        };
        if word & spec.must_zero != 0 {
            return Err(DecodeError::Illegal(word));
        }
        Ok(extract(spec, word))
    }
}

fn extract(spec: &InsnSpec, word: u32) -> Instruction {
    let m = spec.mnemonic;
    let rd = field(word, 7, 5) as u8;
    let rs1 = field(word, 15, 5) as u8;
    let rs2 = field(word, 20, 5) as u8;
    let sw = word as i32;
    if m.has_rd_rs1_imm_only() {
        let imm = if m == Mnemonic::Fence { sw >> 20 } else { 0 };
        return Instruction::bare(m, imm);
    }
    match spec.format {
        Format::R => Instruction::r(m, rd, rs1, rs2),
        Format::I if m.is_shift_imm() => Instruction::i(m, rd, rs1, field(word, 20, m.shamt_bits()) as i32),
        Format::I => Instruction::i(m, rd, rs1, sw >> 20),
        Format::S => Instruction::s(m, rs1, rs2, ((sw >> 25) << 5) | field(word, 7, 5) as i32),
        Format::B => {
            let imm = ((sw >> 31) << 12)
                | (field(word, 7, 1) << 11) as i32
                | (field(word, 25, 6) << 5) as i32
                | (field(word, 8, 4) << 1) as i32;
            Instruction::s(m, rs1, rs2, imm)
        }
        Format::U => Instruction::u(m, rd, (word & 0xffff_f000) as i32),
        Format::J => {
            let imm = ((sw >> 31) << 20)
                | (word & 0x000f_f000) as i32
                | (field(word, 20, 1) << 11) as i32
                | (field(word, 21, 10) << 1) as i32;
            Instruction::u(m, rd, imm)
        }
    }
}

/// Decodes one 32-bit instruction word for the given register width.
pub fn decode(word: u32, xlen: u32) -> Result<Instruction, DecodeError> {
    DecodeTable::for_xlen(xlen).decode(word)
}

fn check_range(i: &Instruction, lo: i32, hi: i32) -> Result<(), EncodeError> {
    if i.imm < lo || i.imm > hi {
        return Err(EncodeError::ImmediateRange {
            mnemonic: i.mnemonic,
            imm: i.imm,
        });
    }
    Ok(())
}

fn check_even(i: &Instruction) -> Result<(), EncodeError> {
    if i.imm & 1 != 0 {
        return Err(EncodeError::OddImmediate {
            mnemonic: i.mnemonic,
            imm: i.imm,
        });
    }
    Ok(())
}

/// Encodes an instruction; the inverse of [`decode`].
pub fn encode(i: &Instruction) -> Result<u32, EncodeError> {
    let spec = spec_for(i.mnemonic);
    if !i.fields_match_format() {
        return Err(EncodeError::Fields(i.mnemonic));
    }
    for r in [i.rd, i.rs1, i.rs2].into_iter().flatten() {
        if r >= 32 {
            return Err(EncodeError::Register {
                mnemonic: i.mnemonic,
                reg: r,
            });
        }
    }
    let mut w = u32::from(spec.opcode);
    if let Some(f3) = spec.funct3 {
        w |= u32::from(f3) << 12;
    }
    match spec.high {
        High::None => {}
        High::Funct7(v) => w |= u32::from(v) << 25,
        High::Funct6(v) => w |= u32::from(v) << 26,
        High::Imm12(v) => w |= u32::from(v) << 20,
    }
    let rd = u32::from(i.rd.unwrap_or(0));
    let rs1 = u32::from(i.rs1.unwrap_or(0));
    let rs2 = u32::from(i.rs2.unwrap_or(0));
    let imm = i.imm as u32;
    let m = i.mnemonic;
    if m.has_rd_rs1_imm_only() {
        if m == Mnemonic::Fence {
            check_range(i, -2048, 2047)?;
            w |= (imm & 0xfff) << 20;
        } else if i.imm != 0 {
            return Err(EncodeError::ImmediateRange {
                mnemonic: m,
                imm: i.imm,
            });
        }
        return Ok(w);
    }
    match spec.format {
        Format::R => w |= (rd << 7) | (rs1 << 15) | (rs2 << 20),
        Format::I if m.is_shift_imm() => {
            check_range(i, 0, (1 << m.shamt_bits()) - 1)?;
            w |= (rd << 7) | (rs1 << 15) | (imm << 20);
        }
        Format::I => {
            check_range(i, -2048, 2047)?;
            w |= (rd << 7) | (rs1 << 15) | ((imm & 0xfff) << 20);
        }
        Format::S => {
            check_range(i, -2048, 2047)?;
            w |= ((imm & 0x1f) << 7) | (rs1 << 15) | (rs2 << 20) | (((imm >> 5) & 0x7f) << 25);
        }
        Format::B => {
            check_even(i)?;
            check_range(i, -4096, 4094)?;
            w |= (((imm >> 11) & 1) << 7)
                | (((imm >> 1) & 0xf) << 8)
                | (rs1 << 15)
                | (rs2 << 20)
                | (((imm >> 5) & 0x3f) << 25)
                | (((imm >> 12) & 1) << 31);
        }
        Format::U => {
            if imm & 0xfff != 0 {
                return Err(EncodeError::ImmediateRange {
                    mnemonic: m,
                    imm: i.imm,
                });
            }
            w |= (rd << 7) | imm;
        }
        Format::J => {
            check_even(i)?;
            check_range(i, -(1 << 20), (1 << 20) - 2)?;
            w |= (rd << 7)
                | (imm & 0x000f_f000)
                | (((imm >> 11) & 1) << 20)
                | (((imm >> 1) & 0x3ff) << 21)
                | (((imm >> 20) & 1) << 31);
        }
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    // Expected words computed by hand from the base-ISA field layouts:
    //   addi: imm[11:0] rs1 000 rd 0010011
    //   jalr: imm[11:0] rs1 000 rd 1100111, rs1 = x1 -> 1 << 15 = 0x8000
    #[test]
    fn canonical_words() {
        let nop = decode(0x0000_0013, 64).unwrap();
        assert_eq!(nop, Instruction::i(Mnemonic::Addi, 0, 0, 0));
        let ret = decode(0x0000_8067, 64).unwrap();
        assert_eq!(ret, Instruction::i(Mnemonic::Jalr, 0, 1, 0));
        assert_eq!(decode(0, 64), Err(DecodeError::Illegal(0)));
        assert_eq!(decode(0, 32), Err(DecodeError::Illegal(0)));
    }

    #[test]
    fn canonical_encodings() {
        assert_eq!(encode(&Instruction::i(Mnemonic::Addi, 0, 0, 0)), Ok(0x13));
        assert_eq!(encode(&Instruction::i(Mnemonic::Jalr, 0, 1, 0)), Ok(0x8067));
        assert!(matches!(
            encode(&Instruction::s(Mnemonic::Beq, 1, 2, 1)),
            Err(EncodeError::OddImmediate { .. })
        ));
        assert!(matches!(
            encode(&Instruction::u(Mnemonic::Jal, 1, 3)),
            Err(EncodeError::OddImmediate { .. })
        ));
        assert!(matches!(
            encode(&Instruction::i(Mnemonic::Addi, 1, 1, 4096)),
            Err(EncodeError::ImmediateRange { .. })
        ));
    }

    #[test]
    fn compressed_and_extension_words_are_illegal() {
        // c.addi4spn-style 16-bit encodings have low bits != 0b11.
        assert!(decode(0x0000_4501, 64).is_err());
        // fence.i, csrrw, div (signed), mulh
        for w in [0x0000_100f, 0x3400_1073, 0x0205_c533, 0x02b5_1533] {
            assert!(decode(w, 64).is_err(), "{w:#x}");
        }
    }

    #[test]
    fn rv64_only_forms_rejected_on_rv32() {
        let ld = encode(&Instruction::i(Mnemonic::Ld, 10, 2, -8)).unwrap();
        assert!(decode(ld, 64).is_ok());
        assert!(decode(ld, 32).is_err());
        let slli63 = encode(&Instruction::i(Mnemonic::Slli, 10, 11, 63)).unwrap();
        assert_eq!(decode(slli63, 64).unwrap().imm, 63);
        assert!(decode(slli63, 32).is_err());
        let slli3 = encode(&Instruction::i(Mnemonic::Slli, 10, 11, 3)).unwrap();
        assert_eq!(decode(slli3, 32).unwrap(), decode(slli3, 64).unwrap());
    }

    #[test]
    fn colliding_patterns_fail_loudly() {
        static DUP: [InsnSpec; 2] = [
            insn!(Add, "add", R, 0x33, Some(0), F7(0x00), Both),
            insn!(Sub, "sub", R, 0x33, Some(0), F7(0x00), Both),
        ];
        let err = DecodeTable::build(64, DUP.iter()).unwrap_err();
        assert_eq!(err.existing, "add");
        static MIXED: [InsnSpec; 2] = [
            insn!(Jalr, "jalr", I, 0x67, Some(0), NoHigh, Both),
            insn!(Jal, "jal", J, 0x67, None, NoHigh, Both),
        ];
        assert!(DecodeTable::build(64, MIXED.iter()).is_err());
    }

    #[test]
    fn builtin_tables_build() {
        assert!(DecodeTable::new(32).is_ok());
        assert!(DecodeTable::new(64).is_ok());
    }

    #[test]
    fn immediates_sign_extend() {
        // beq a0, zero, -4
        let i = decode(0xfe05_0ee3, 64).unwrap();
        assert_eq!(i, Instruction::s(Mnemonic::Beq, 10, 0, -4));
        // jal zero, 64
        assert_eq!(decode(0x0400_006f, 64).unwrap(), Instruction::u(Mnemonic::Jal, 0, 64));
        // lui a0, 0xfffff
        assert_eq!(decode(0xffff_f537, 64).unwrap().imm, -4096);
    }

    #[test]
    fn display_is_canonical() {
        assert_eq!(decode(0x0000_8067, 64).unwrap().to_string(), "jalr zero, 0(ra)");
        assert_eq!(decode(0xfe05_0ee3, 64).unwrap().to_string(), "beq a0, zero, -4");
        assert_eq!(decode(0x0ff0_000f, 64).unwrap().to_string(), "fence iorw, iorw");
        assert_eq!(decode(0x8330_000f, 64).unwrap().to_string(), "fence.tso");
    }
}
