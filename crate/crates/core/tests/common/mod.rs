// SPDX-License-Identifier: Apache-2.0

//! Helpers shared by the integration tests: fixture loading, synthetic code
//! images, a random well-formed block generator, an ISA reference model
//! written directly from the instruction semantics, and the reference
//! disassembly corpus.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;

use binlift::ir::{
    mask, App, AssignRhs, Block, IdGen, IdScope, MemRepr, Reg, RegState, Stmt, TermStmt, TypeRepr, Value,
};
use binlift::mem::{
    load_elf, AddrWidth, LoadOptions, MemAddr, MemChunk, MemSegment, MemSegmentOff, MemWord, Memory, Permissions,
};
use binlift::riscv::{encode, Instruction, Mnemonic};
use rand::seq::SliceRandom;
use rand::Rng;

pub fn fixture_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

pub fn fixture(name: &str) -> Memory {
    let bytes = std::fs::read(fixture_path(name)).expect("fixture exists");
    load_elf(&bytes, &LoadOptions::default()).expect("fixture loads")
}

pub fn at(mem: &Memory, addr: u64) -> MemSegmentOff {
    mem.resolve_absolute(addr)
        .unwrap_or_else(|| panic!("{addr:#x} is mapped"))
}

fn width_of(xlen: u32) -> AddrWidth {
    AddrWidth::from_bits(xlen).expect("32 or 64")
}

/// An executable segment at `base` holding `words`, entry at `base`.
pub fn code_image(xlen: u32, base: u64, words: &[u32]) -> Memory {
    let w = width_of(xlen);
    let bytes: Vec<u8> = words.iter().flat_map(|x| x.to_le_bytes()).collect();
    let seg = MemSegment::new(0, MemWord::new(w, base), Permissions::RX, vec![MemChunk::Bytes(bytes)]).unwrap();
    let mut mem = Memory::from_segments(w, vec![seg]).unwrap();
    mem.set_entry(mem.resolve_absolute(base));
    mem
}

pub fn encode_all(insns: &[Instruction]) -> Vec<u32> {
    insns.iter().map(|i| encode(i).expect("encodable")).collect()
}

// ---------------------------------------------------------------------------
// Random blocks

const WIDTHS: [u32; 5] = [1, 8, 16, 32, 64];

/// Window that random memory addresses favour, so reads see earlier writes.
pub const SCRATCH: u64 = 0x8000;

struct Gen<'r, R: Rng> {
    rng: &'r mut R,
    ids: IdGen,
    pool: BTreeMap<u32, Vec<Value>>,
    stmts: Vec<Stmt>,
}

impl<R: Rng> Gen<'_, R> {
    fn constant(&mut self, w: u32) -> Value {
        let m = mask(w);
        let v = match self.rng.gen_range(0..8) {
            0 => 0,
            1 => 1,
            2 => m,
            3 => m.wrapping_sub(1),
            4 => self.rng.gen_range(0..16),
            5 => !((1u64 << self.rng.gen_range(1..6)) - 1),
            6 => SCRATCH + self.rng.gen_range(0..0x40),
            _ => self.rng.gen(),
        };
        Value::bv(w, v)
    }

    fn value(&mut self, w: u32) -> Value {
        if w == 64 && self.rng.gen_ratio(1, 20) {
            let addr = MemAddr {
                base: self.rng.gen_range(1..3),
                offset: MemWord::new(AddrWidth::W64, self.rng.gen_range(0..0x100)),
            };
            return Value::Relocatable { width: 64, addr };
        }
        let pool = &self.pool[&w];
        if !pool.is_empty() && self.rng.gen_ratio(3, 5) {
            return pool.choose(self.rng).unwrap().clone();
        }
        self.constant(w)
    }

    fn address(&mut self) -> Value {
        if self.rng.gen_bool(0.5) {
            Value::bv(64, SCRATCH + self.rng.gen_range(0..0x40))
        } else {
            self.value(64)
        }
    }

    fn assign(&mut self, rhs: AssignRhs) -> Value {
        let id = self.ids.fresh();
        let ty = rhs.result_type();
        self.stmts.push(Stmt::Assign { id, rhs });
        let v = Value::Assigned { id, ty: ty.clone() };
        if let Some(w) = ty.bv_width() {
            self.pool.get_mut(&w).unwrap().push(v.clone());
        }
        v
    }

    fn app(&mut self) -> Value {
        let w = *WIDTHS[1..].choose(self.rng).unwrap();
        let app = match self.rng.gen_range(0..18) {
            0 => App::BvAdd(w, self.value(w), self.value(w)),
            1 => App::BvSub(w, self.value(w), self.value(w)),
            2 => App::BvMul(w, self.value(w), self.value(w)),
            3 => App::BvUDiv(w, self.value(w), self.value(w)),
            4 => App::BvAnd(w, self.value(w), self.value(w)),
            5 => App::BvOr(w, self.value(w), self.value(w)),
            6 => App::BvXor(w, self.value(w), self.value(w)),
            7 => App::BvShl(w, self.value(w), self.value(w)),
            8 => App::BvLshr(w, self.value(w), self.value(w)),
            9 => App::BvAshr(w, self.value(w), self.value(w)),
            10 => App::BvComplement(w, self.value(w)),
            11 | 12 => {
                let t = if self.rng.gen_ratio(1, 6) { 1 } else { w };
                App::Mux(TypeRepr::Bv(t), self.value(1), self.value(t), self.value(t))
            }
            13 => App::Eq(self.value(w), self.value(w)),
            14 => App::BvUlt(self.value(w), self.value(w)),
            15 => App::BvSlt(self.value(w), self.value(w)),
            16 => {
                let from = *WIDTHS[..4].choose(self.rng).unwrap();
                let to = *WIDTHS
                    .iter()
                    .filter(|t| **t > from)
                    .collect::<Vec<_>>()
                    .choose(self.rng)
                    .unwrap();
                if self.rng.gen_bool(0.5) {
                    App::SExt(from, *to, self.value(from))
                } else {
                    App::UExt(from, *to, self.value(from))
                }
            }
            _ => {
                let from = *WIDTHS[1..].choose(self.rng).unwrap();
                let to = *WIDTHS
                    .iter()
                    .filter(|t| **t < from)
                    .collect::<Vec<_>>()
                    .choose(self.rng)
                    .unwrap();
                App::Trunc(from, *to, self.value(from))
            }
        };
        self.assign(AssignRhs::EvalApp(app))
    }

    /// `Mux(c, k1, k2)` followed by arithmetic with a constant: the shape
    /// the hoisting rule targets.
    fn hoist_pattern(&mut self) -> Value {
        let c = self.value(1);
        let (k1, k2) = (self.constant(64), self.constant(64));
        let mut v = self.assign(AssignRhs::EvalApp(App::Mux(TypeRepr::Bv(64), c, k1, k2)));
        for _ in 0..self.rng.gen_range(1..4) {
            let k = self.constant(64);
            let app = match self.rng.gen_range(0..4) {
                0 => App::BvAdd(64, v, k),
                1 => App::BvAdd(64, k, v),
                2 => App::BvSub(64, v, k),
                _ => App::BvAnd(64, v, k),
            };
            v = self.assign(AssignRhs::EvalApp(app));
        }
        v
    }

    fn stmt(&mut self) {
        match self.rng.gen_range(0..10) {
            0 => {
                let bytes = *[1u8, 2, 4, 8].choose(self.rng).unwrap();
                let addr = self.address();
                self.assign(AssignRhs::ReadMem {
                    addr,
                    repr: MemRepr::le(bytes),
                });
            }
            1 => {
                let bytes = *[1u8, 2, 4, 8].choose(self.rng).unwrap();
                let addr = self.address();
                let value = self.value(8 * u32::from(bytes));
                self.stmts.push(Stmt::WriteMem {
                    addr,
                    repr: MemRepr::le(bytes),
                    value,
                });
            }
            2 => {
                self.hoist_pattern();
            }
            _ => {
                self.app();
            }
        }
    }
}

/// A random well-formed 64-bit block of about `n` statements at `at`.
pub fn random_block<R: Rng>(rng: &mut R, at: MemSegmentOff, scope: u64, n: usize) -> Block {
    let mut pool: BTreeMap<u32, Vec<Value>> = WIDTHS.iter().map(|w| (*w, Vec::new())).collect();
    pool.get_mut(&64)
        .unwrap()
        .extend((1..32).map(|i| Value::initial(Reg::x(i), 64)));
    let mut g = Gen {
        rng,
        ids: IdGen::new(IdScope(scope)),
        pool,
        stmts: vec![Stmt::InstructionStart {
            offset: 0,
            text: "generated".into(),
        }],
    };
    for _ in 0..n {
        g.stmt();
    }
    let mut regs = RegState::identity(64);
    for _ in 0..g.rng.gen_range(0..6) {
        let r = Reg::x(g.rng.gen_range(1..32));
        let v = g.value(64);
        regs.set(r, v);
    }
    let pc = if g.rng.gen_bool(0.5) {
        g.hoist_pattern()
    } else {
        g.value(64)
    };
    regs.set(Reg::Pc, pc);
    Block {
        address: at,
        byte_length: MemWord::new(AddrWidth::W64, 4),
        stmts: g.stmts,
        term: TermStmt::FetchAndExecute(regs),
    }
}

// ---------------------------------------------------------------------------
// ISA reference model

/// Architectural effect of one instruction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Effect {
    pub regs: [u64; 32],
    pub pc: u64,
    /// (address, bytes, value) per store.
    pub writes: Vec<(u64, u8, u64)>,
}

fn sext(v: u64, bits: u32) -> u64 {
    let s = 64 - bits;
    (((v << s) as i64) >> s) as u64
}

/// Effective address used by a load or store, if `insn` is one.
pub fn effective_address(insn: &Instruction, xlen: u32, regs: &[u64; 32]) -> Option<u64> {
    use Mnemonic::*;
    match insn.mnemonic {
        Lb | Lh | Lw | Ld | Lbu | Lhu | Lwu | Sb | Sh | Sw | Sd => {
            let base = regs[insn.rs1.unwrap() as usize];
            Some(base.wrapping_add(insn.imm as i64 as u64) & mask(xlen))
        }
        _ => None,
    }
}

/// Executes `insn` at `pc`. `load(addr, n)` returns `n` little-endian bytes.
pub fn reference_step(
    insn: &Instruction,
    xlen: u32,
    pc: u64,
    regs: &[u64; 32],
    load: impl Fn(u64, u32) -> u64,
) -> Effect {
    use Mnemonic::*;
    let m = mask(xlen);
    let x = |r: Option<u8>| regs[r.unwrap() as usize];
    let imm = insn.imm as i64 as u64 & m;
    let signed = |v: u64| sext(v, xlen) as i64;
    let shamt_mask = u64::from(xlen - 1);
    let w32 = |v: u64| sext(v & 0xffff_ffff, 32) & m;
    let next = pc.wrapping_add(4) & m;
    let mut out = Effect {
        regs: *regs,
        pc: next,
        writes: Vec::new(),
    };
    let (a, b) = (insn.rs1.map(|_| x(insn.rs1)), insn.rs2.map(|_| x(insn.rs2)));
    let a = a.unwrap_or(0);
    let b = b.unwrap_or(0);
    let mut rd_val: Option<u64> = None;
    let branch = |cond: bool| if cond { pc.wrapping_add(imm) & m } else { next };
    match insn.mnemonic {
        Lui => rd_val = Some(imm),
        Auipc => rd_val = Some(pc.wrapping_add(imm) & m),
        Jal => {
            rd_val = Some(next);
            out.pc = pc.wrapping_add(imm) & m;
        }
        Jalr => {
            rd_val = Some(next);
            out.pc = a.wrapping_add(imm) & m & !1;
        }
        Beq => out.pc = branch(a == b),
        Bne => out.pc = branch(a != b),
        Blt => out.pc = branch(signed(a) < signed(b)),
        Bge => out.pc = branch(signed(a) >= signed(b)),
        Bltu => out.pc = branch(a < b),
        Bgeu => out.pc = branch(a >= b),
        Lb | Lh | Lw | Ld | Lbu | Lhu | Lwu => {
            let addr = a.wrapping_add(imm) & m;
            let (n, signed_load) = match insn.mnemonic {
                Lb => (1, true),
                Lh => (2, true),
                Lw => (4, true),
                Ld => (8, true),
                Lbu => (1, false),
                Lhu => (2, false),
                _ => (4, false),
            };
            let raw = load(addr, n);
            rd_val = Some(if signed_load { sext(raw, 8 * n) & m } else { raw });
        }
        Sb | Sh | Sw | Sd => {
            let n: u8 = match insn.mnemonic {
                Sb => 1,
                Sh => 2,
                Sw => 4,
                _ => 8,
            };
            let addr = a.wrapping_add(imm) & m;
            out.writes.push((addr, n, b & mask(8 * u32::from(n))));
        }
        Addi => rd_val = Some(a.wrapping_add(imm) & m),
        Slti => rd_val = Some(u64::from(signed(a) < signed(imm))),
        Sltiu => rd_val = Some(u64::from(a < imm)),
        Xori => rd_val = Some(a ^ imm),
        Ori => rd_val = Some(a | imm),
        Andi => rd_val = Some(a & imm),
        Slli => rd_val = Some((a << (imm & shamt_mask)) & m),
        Srli => rd_val = Some(a >> (imm & shamt_mask)),
        Srai => rd_val = Some((signed(a) >> (imm & shamt_mask)) as u64 & m),
        Add => rd_val = Some(a.wrapping_add(b) & m),
        Sub => rd_val = Some(a.wrapping_sub(b) & m),
        Sll => rd_val = Some((a << (b & shamt_mask)) & m),
        Slt => rd_val = Some(u64::from(signed(a) < signed(b))),
        Sltu => rd_val = Some(u64::from(a < b)),
        Xor => rd_val = Some(a ^ b),
        Srl => rd_val = Some(a >> (b & shamt_mask)),
        Sra => rd_val = Some((signed(a) >> (b & shamt_mask)) as u64 & m),
        Or => rd_val = Some(a | b),
        And => rd_val = Some(a & b),
        Fence | Ecall | Ebreak => {}
        Addiw => rd_val = Some(w32(a.wrapping_add(imm))),
        Slliw => rd_val = Some(w32((a as u32).wrapping_shl(imm as u32 & 31) as u64)),
        Srliw => rd_val = Some(w32(((a as u32) >> (imm as u32 & 31)) as u64)),
        Sraiw => rd_val = Some(w32(((a as u32 as i32) >> (imm as u32 & 31)) as u32 as u64)),
        Addw => rd_val = Some(w32(a.wrapping_add(b))),
        Subw => rd_val = Some(w32(a.wrapping_sub(b))),
        Sllw => rd_val = Some(w32((a as u32).wrapping_shl(b as u32 & 31) as u64)),
        Srlw => rd_val = Some(w32(((a as u32) >> (b as u32 & 31)) as u64)),
        Sraw => rd_val = Some(w32(((a as u32 as i32) >> (b as u32 & 31)) as u32 as u64)),
        Mul => rd_val = Some(a.wrapping_mul(b) & m),
        Divu => rd_val = Some(a.checked_div(b).unwrap_or(m)),
        Remu => rd_val = Some(if b == 0 { a } else { a % b }),
        Mulw => rd_val = Some(w32((a as u32).wrapping_mul(b as u32) as u64)),
        Divuw => {
            let (p, q) = (a as u32, b as u32);
            rd_val = Some(w32(u64::from(p.checked_div(q).unwrap_or(u32::MAX))));
        }
        Remuw => {
            let (p, q) = (a as u32, b as u32);
            rd_val = Some(w32(if q == 0 { u64::from(p) } else { u64::from(p % q) }));
        }
    }
    if let (Some(v), Some(rd)) = (rd_val, insn.rd) {
        if rd != 0 {
            out.regs[rd as usize] = v;
        }
    }
    out
}

/// A random encodable instance of `m` for the given register width.
pub fn random_instruction<R: Rng>(rng: &mut R, m: Mnemonic, xlen: u32) -> Instruction {
    use binlift::riscv::Format;
    use Mnemonic::*;
    let r = |rng: &mut R| rng.gen_range(0..32u8);
    match m {
        Ecall | Ebreak => Instruction::bare(m, 0),
        Fence => {
            let pred = rng.gen_range(0..16);
            let succ = rng.gen_range(0..16);
            Instruction::bare(m, (pred << 4) | succ)
        }
        Slli | Srli | Srai => {
            let shamt = rng.gen_range(0..xlen as i32);
            Instruction::i(m, r(rng), r(rng), shamt)
        }
        Slliw | Srliw | Sraiw => Instruction::i(m, r(rng), r(rng), rng.gen_range(0..32)),
        _ => match m.format() {
            Format::R => Instruction::r(m, r(rng), r(rng), r(rng)),
            Format::I => Instruction::i(m, r(rng), r(rng), rng.gen_range(-2048..2048)),
            Format::S => Instruction::s(m, r(rng), r(rng), rng.gen_range(-2048..2048)),
            Format::B => Instruction::s(m, r(rng), r(rng), 2 * rng.gen_range(-2048..2048)),
            Format::U => Instruction::u(m, r(rng), (rng.gen::<u32>() & 0xffff_f000) as i32),
            Format::J => Instruction::u(m, r(rng), 2 * rng.gen_range(-(1 << 19)..(1 << 19))),
        },
    }
}

pub fn mnemonics_for(xlen: u32) -> Vec<Mnemonic> {
    Mnemonic::all()
        .into_iter()
        .filter(|m| xlen == 64 || !m.is_rv64_only())
        .collect()
}

// ---------------------------------------------------------------------------
// Reference disassembly corpus

pub fn reference_corpus() -> Vec<(u32, String)> {
    let text = include_str!("../data/reference_corpus.tsv");
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(|l| {
            let (w, d) = l.split_once('\t').expect("word<TAB>text");
            (u32::from_str_radix(w, 16).unwrap(), d.to_string())
        })
        .collect()
}

/// Operand tokens with numbers parsed and `imm(reg)` split into `reg, imm`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Tok {
    Reg(String),
    Num(i64),
    Word(String),
}

fn tok(s: &str) -> Vec<Tok> {
    let s = s.trim();
    if let Some((imm, rest)) = s.split_once('(') {
        let reg = rest.trim_end_matches(')');
        let mut v = tok(reg);
        v.extend(tok(imm));
        return v;
    }
    let (neg, body) = match s.strip_prefix('-') {
        Some(b) => (true, b),
        None => (false, s),
    };
    let n = match body.strip_prefix("0x") {
        Some(h) => i64::from_str_radix(h, 16).ok(),
        None => body.parse::<i64>().ok(),
    };
    vec![match n {
        Some(n) => Tok::Num(if neg { -n } else { n }),
        None if Reg::from_name(s).is_some() => Tok::Reg(s.to_string()),
        None => Tok::Word(s.to_string()),
    }]
}

/// `(mnemonic, operands)` with the reference's alias spellings expanded to
/// base instructions.
pub fn normalize(text: &str) -> (String, Vec<Tok>) {
    let (m, ops) = text.split_once(' ').unwrap_or((text, ""));
    let mut ops: Vec<Tok> = if ops.trim().is_empty() {
        Vec::new()
    } else {
        ops.split(", ").flat_map(tok).collect()
    };
    let reg = |s: &str| Tok::Reg(s.to_string());
    let zero = reg("zero");
    let mut m = m.to_string();
    match (m.as_str(), ops.len()) {
        ("nop", 0) => {
            m = "addi".into();
            ops = vec![zero.clone(), zero.clone(), Tok::Num(0)];
        }
        ("ret", 0) => {
            m = "jalr".into();
            ops = vec![zero.clone(), reg("ra"), Tok::Num(0)];
        }
        ("mv", 2) => {
            m = "addi".into();
            ops.push(Tok::Num(0));
        }
        ("not", 2) => {
            m = "xori".into();
            ops.push(Tok::Num(-1));
        }
        ("neg", 2) | ("negw", 2) => {
            m = if m == "neg" { "sub".into() } else { "subw".into() };
            ops.insert(1, zero.clone());
        }
        ("sext.w", 2) => {
            m = "addiw".into();
            ops.push(Tok::Num(0));
        }
        ("seqz", 2) => {
            m = "sltiu".into();
            ops.push(Tok::Num(1));
        }
        ("snez", 2) => {
            m = "sltu".into();
            ops.insert(1, zero.clone());
        }
        ("sltz", 2) => {
            m = "slt".into();
            ops.push(zero.clone());
        }
        ("sgtz", 2) => {
            m = "slt".into();
            ops.insert(1, zero.clone());
        }
        ("beqz" | "bnez" | "bgez" | "bltz", 2) => {
            m = m[..m.len() - 1].to_string();
            ops.insert(1, zero.clone());
        }
        ("blez", 2) => {
            m = "bge".into();
            ops.insert(0, zero.clone());
        }
        ("bgtz", 2) => {
            m = "blt".into();
            ops.insert(0, zero.clone());
        }
        ("bgt" | "ble" | "bgtu" | "bleu", 3) => {
            m = match m.as_str() {
                "bgt" => "blt",
                "ble" => "bge",
                "bgtu" => "bltu",
                _ => "bgeu",
            }
            .into();
            ops.swap(0, 1);
        }
        ("j", 1) => {
            m = "jal".into();
            ops.insert(0, zero.clone());
        }
        ("jal", 1) => ops.insert(0, reg("ra")),
        ("jr", 1) => {
            m = "jalr".into();
            ops = vec![zero.clone(), ops[0].clone(), Tok::Num(0)];
        }
        ("jalr", 1) => ops = vec![reg("ra"), ops[0].clone(), Tok::Num(0)],
        ("fence", 0) => ops = vec![Tok::Word("iorw".into()), Tok::Word("iorw".into())],
        _ => {}
    }
    (m, ops)
}
