// SPDX-License-Identifier: Apache-2.0

//! Instruction semantics as block IR.

use std::collections::BTreeMap;

use thiserror::Error;

use super::decode::{DecodeTable, Instruction, Mnemonic};
use crate::ir::{
    App, ArchStmt, ArchTermStmt, AssignRhs, Block, IdGen, IdScope, MemRepr, Reg, RegState, Stmt, TermStmt, TypeRepr,
    Value,
};
use crate::mem::{MemAddr, MemSegmentOff, Memory};

/// Default cap on the bytes lifted into one block.
pub const DEFAULT_MAX_BLOCK_BYTES: u64 = 4096;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LiftError {
    #[error("block start {0} is not executable")]
    NotExecutable(String),
}

/// Deterministic id scope for blocks lifted on behalf of the function at `at`.
pub fn scope_for(mem: &Memory, at: MemSegmentOff) -> IdScope {
    let addr = mem.segoff_to_addr(at);
    IdScope((u64::from(addr.base) << 56) ^ addr.offset.value())
}

/// Accumulates statements and pending register writes for one block.
pub struct BlockBuilder<'a> {
    mem: &'a Memory,
    xlen: u32,
    start: MemSegmentOff,
    start_addr: MemAddr,
    offset: u64,
    ids: &'a mut IdGen,
    stmts: Vec<Stmt>,
    regs: BTreeMap<Reg, Value>,
}

pub enum LiftOutcome {
    Continue,
    Terminated(TermStmt),
}

impl<'a> BlockBuilder<'a> {
    pub fn new(mem: &'a Memory, start: MemSegmentOff, ids: &'a mut IdGen) -> BlockBuilder<'a> {
        BlockBuilder {
            mem,
            xlen: mem.width().bits(),
            start,
            start_addr: mem.segoff_to_addr(start),
            offset: 0,
            ids,
            stmts: Vec::new(),
            regs: BTreeMap::new(),
        }
    }

    pub fn xlen(&self) -> u32 {
        self.xlen
    }

    /// Bytes consumed so far; also the offset of the next instruction.
    pub fn offset(&self) -> u64 {
        self.offset
    }

    /// The address `delta` bytes past the current instruction, as a value.
    fn code_addr(&self, delta: i64) -> Value {
        let offset = self.start_addr.offset.offset_by(self.offset as i64).offset_by(delta);
        if self.start_addr.is_absolute() {
            Value::bv(self.xlen, offset.value())
        } else {
            Value::Relocatable {
                width: self.xlen,
                addr: MemAddr {
                    base: self.start_addr.base,
                    offset,
                },
            }
        }
    }

    fn imm(&self, imm: i64) -> Value {
        Value::bv(self.xlen, imm as u64)
    }

    fn read(&self, r: Option<u8>) -> Value {
        match r.expect("operand present for format") {
            0 => Value::bv(self.xlen, 0),
            n => self
                .regs
                .get(&Reg::x(n))
                .cloned()
                .unwrap_or_else(|| Value::initial(Reg::x(n), self.xlen)),
        }
    }

    fn write(&mut self, r: Option<u8>, v: Value) {
        match r.expect("operand present for format") {
            0 => {}
            n => {
                self.regs.insert(Reg::x(n), v);
            }
        }
    }

    fn assign(&mut self, rhs: AssignRhs) -> Value {
        let id = self.ids.fresh();
        let ty = rhs.result_type();
        self.stmts.push(Stmt::Assign { id, rhs });
        Value::Assigned { id, ty }
    }

    fn app(&mut self, app: App) -> Value {
        self.assign(AssignRhs::EvalApp(app))
    }

    fn add_imm(&mut self, base: Value, imm: i32) -> Value {
        if imm == 0 {
            base
        } else {
            let i = self.imm(i64::from(imm));
            self.app(App::BvAdd(self.xlen, base, i))
        }
    }

    fn ext_bool(&mut self, b: Value) -> Value {
        self.app(App::UExt(1, self.xlen, b))
    }

    fn finish_regs(&self, pc: Value) -> RegState {
        let mut out = RegState::identity(self.xlen);
        for (r, v) in &self.regs {
            out.set(*r, v.clone());
        }
        out.set(Reg::Pc, pc);
        out
    }

    /// Closes the block with the pc pointing at the next unlifted byte.
    pub fn fall_through(self) -> Block {
        let pc = self.code_addr(0);
        let term = TermStmt::FetchAndExecute(self.finish_regs(pc));
        self.into_block(term)
    }

    fn translate_error(mut self, text: String, message: String) -> Block {
        if self.offset == 0 {
            self.stmts.push(Stmt::InstructionStart { offset: 0, text });
        }
        let pc = self.code_addr(0);
        let term = TermStmt::TranslateError(self.finish_regs(pc), message);
        self.into_block(term)
    }

    fn into_block(self, term: TermStmt) -> Block {
        Block {
            address: self.start,
            byte_length: self.mem.word(self.offset),
            stmts: self.stmts,
            term,
        }
    }

    /// Operation on the low 32 bits whose result is sign-extended (RV64 `*w` forms).
    fn word_op(&mut self, a: Value, b: Value, op: fn(u32, Value, Value) -> App) -> Value {
        let a = self.app(App::Trunc(64, 32, a));
        let b = match b.as_const() {
            Some(c) => Value::bv(32, c),
            None => self.app(App::Trunc(64, 32, b)),
        };
        let r = self.app(op(32, a, b));
        self.app(App::SExt(32, 64, r))
    }

    fn remu(&mut self, w: u32, a: Value, b: Value) -> Value {
        let q = self.app(App::BvUDiv(w, a.clone(), b.clone()));
        let p = self.app(App::BvMul(w, q, b));
        self.app(App::BvSub(w, a, p))
    }

    fn word_remu(&mut self, a: Value, b: Value) -> Value {
        let a = self.app(App::Trunc(64, 32, a));
        let b = self.app(App::Trunc(64, 32, b));
        let r = self.remu(32, a, b);
        self.app(App::SExt(32, 64, r))
    }

    fn shift_amount(&mut self, w: u32, amount: Value) -> Value {
        let m = Value::bv(w, u64::from(w - 1));
        self.app(App::BvAnd(w, amount, m))
    }
}

fn load_shape(m: Mnemonic) -> (u8, bool) {
    match m {
        Mnemonic::Lb => (1, true),
        Mnemonic::Lh => (2, true),
        Mnemonic::Lw => (4, true),
        Mnemonic::Ld => (8, true),
        Mnemonic::Lbu => (1, false),
        Mnemonic::Lhu => (2, false),
        Mnemonic::Lwu => (4, false),
        _ => unreachable!("not a load"),
    }
}

/// Appends the instruction's statements to `b`; returns the terminator when
/// the instruction ends the block.
pub fn lift_instruction(b: &mut BlockBuilder<'_>, insn: &Instruction) -> LiftOutcome {
    use Mnemonic::*;
    let x = b.xlen;
    b.stmts.push(Stmt::InstructionStart {
        offset: b.offset,
        text: insn.to_string(),
    });
    let imm = insn.imm;
    let mut outcome = LiftOutcome::Continue;
    match insn.mnemonic {
        Lui => {
            let v = b.imm(i64::from(imm));
            b.write(insn.rd, v);
        }
        Auipc => {
            let v = b.code_addr(i64::from(imm));
            b.write(insn.rd, v);
        }
        Jal => {
            let link = b.code_addr(4);
            let target = b.code_addr(i64::from(imm));
            b.write(insn.rd, link);
            outcome = LiftOutcome::Terminated(TermStmt::FetchAndExecute(b.finish_regs(target)));
        }
        Jalr => {
            let base = b.read(insn.rs1);
            let sum = b.add_imm(base, imm);
            let target = b.app(App::BvAnd(x, sum, b.imm(-2)));
            let link = b.code_addr(4);
            b.write(insn.rd, link);
            outcome = LiftOutcome::Terminated(TermStmt::FetchAndExecute(b.finish_regs(target)));
        }
        Beq | Bne | Blt | Bge | Bltu | Bgeu => {
            let (l, r) = (b.read(insn.rs1), b.read(insn.rs2));
            let cond = match insn.mnemonic {
                Beq | Bne => b.app(App::Eq(l, r)),
                Blt | Bge => b.app(App::BvSlt(l, r)),
                _ => b.app(App::BvUlt(l, r)),
            };
            let taken = b.code_addr(i64::from(imm));
            let next = b.code_addr(4);
            let (t, f) = match insn.mnemonic {
                Beq | Blt | Bltu => (taken, next),
                _ => (next, taken),
            };
            let pc = b.app(App::Mux(TypeRepr::Bv(x), cond, t, f));
            outcome = LiftOutcome::Terminated(TermStmt::FetchAndExecute(b.finish_regs(pc)));
        }
        m if m.is_load() => {
            let (bytes, signed) = load_shape(m);
            let base = b.read(insn.rs1);
            let addr = b.add_imm(base, imm);
            let v = b.assign(AssignRhs::ReadMem {
                addr,
                repr: MemRepr::le(bytes),
            });
            let bits = 8 * u32::from(bytes);
            let v = if bits == x {
                v
            } else if signed {
                b.app(App::SExt(bits, x, v))
            } else {
                b.app(App::UExt(bits, x, v))
            };
            b.write(insn.rd, v);
        }
        Sb | Sh | Sw | Sd => {
            let bytes: u8 = match insn.mnemonic {
                Sb => 1,
                Sh => 2,
                Sw => 4,
                _ => 8,
            };
            let base = b.read(insn.rs1);
            let addr = b.add_imm(base, imm);
            let v = b.read(insn.rs2);
            let bits = 8 * u32::from(bytes);
            let value = if bits == x {
                v
            } else {
                match v.as_const() {
                    Some(c) => Value::bv(bits, c),
                    None => b.app(App::Trunc(x, bits, v)),
                }
            };
            b.stmts.push(Stmt::WriteMem {
                addr,
                repr: MemRepr::le(bytes),
                value,
            });
        }
        Addi => {
            let a = b.read(insn.rs1);
            let v = b.app(App::BvAdd(x, a, b.imm(i64::from(imm))));
            b.write(insn.rd, v);
        }
        Slti | Sltiu => {
            let a = b.read(insn.rs1);
            let i = b.imm(i64::from(imm));
            let c = if insn.mnemonic == Slti {
                b.app(App::BvSlt(a, i))
            } else {
                b.app(App::BvUlt(a, i))
            };
            let v = b.ext_bool(c);
            b.write(insn.rd, v);
        }
        Xori | Ori | Andi | Slli | Srli | Srai => {
            let a = b.read(insn.rs1);
            let i = b.imm(i64::from(imm));
            let app = match insn.mnemonic {
                Xori => App::BvXor(x, a, i),
                Ori => App::BvOr(x, a, i),
                Andi => App::BvAnd(x, a, i),
                Slli => App::BvShl(x, a, i),
                Srli => App::BvLshr(x, a, i),
                _ => App::BvAshr(x, a, i),
            };
            let v = b.app(app);
            b.write(insn.rd, v);
        }
        Add | Sub | Slt | Sltu | Xor | Or | And | Mul | Divu => {
            let (l, r) = (b.read(insn.rs1), b.read(insn.rs2));
            let v = match insn.mnemonic {
                Add => b.app(App::BvAdd(x, l, r)),
                Sub => b.app(App::BvSub(x, l, r)),
                Xor => b.app(App::BvXor(x, l, r)),
                Or => b.app(App::BvOr(x, l, r)),
                And => b.app(App::BvAnd(x, l, r)),
                Mul => b.app(App::BvMul(x, l, r)),
                Divu => b.app(App::BvUDiv(x, l, r)),
                Slt => {
                    let c = b.app(App::BvSlt(l, r));
                    b.ext_bool(c)
                }
                _ => {
                    let c = b.app(App::BvUlt(l, r));
                    b.ext_bool(c)
                }
            };
            b.write(insn.rd, v);
        }
        Remu => {
            let (l, r) = (b.read(insn.rs1), b.read(insn.rs2));
            let v = b.remu(x, l, r);
            b.write(insn.rd, v);
        }
        Sll | Srl | Sra => {
            let (l, r) = (b.read(insn.rs1), b.read(insn.rs2));
            let s = b.shift_amount(x, r);
            let v = match insn.mnemonic {
                Sll => b.app(App::BvShl(x, l, s)),
                Srl => b.app(App::BvLshr(x, l, s)),
                _ => b.app(App::BvAshr(x, l, s)),
            };
            b.write(insn.rd, v);
        }
        Addiw | Slliw | Srliw | Sraiw => {
            let a = b.read(insn.rs1);
            let i = Value::bv(64, imm as i64 as u64);
            let op: fn(u32, Value, Value) -> App = match insn.mnemonic {
                Addiw => App::BvAdd,
                Slliw => App::BvShl,
                Srliw => App::BvLshr,
                _ => App::BvAshr,
            };
            let v = b.word_op(a, i, op);
            b.write(insn.rd, v);
        }
        Addw | Subw | Mulw | Divuw => {
            let (l, r) = (b.read(insn.rs1), b.read(insn.rs2));
            let op: fn(u32, Value, Value) -> App = match insn.mnemonic {
                Addw => App::BvAdd,
                Subw => App::BvSub,
                Mulw => App::BvMul,
                _ => App::BvUDiv,
            };
            let v = b.word_op(l, r, op);
            b.write(insn.rd, v);
        }
        Remuw => {
            let (l, r) = (b.read(insn.rs1), b.read(insn.rs2));
            let v = b.word_remu(l, r);
            b.write(insn.rd, v);
        }
        Sllw | Srlw | Sraw => {
            let (l, r) = (b.read(insn.rs1), b.read(insn.rs2));
            let l = b.app(App::Trunc(64, 32, l));
            let r = b.app(App::Trunc(64, 32, r));
            let s = b.shift_amount(32, r);
            let v = match insn.mnemonic {
                Sllw => b.app(App::BvShl(32, l, s)),
                Srlw => b.app(App::BvLshr(32, l, s)),
                _ => b.app(App::BvAshr(32, l, s)),
            };
            let v = b.app(App::SExt(32, 64, v));
            b.write(insn.rd, v);
        }
        Fence => {
            b.stmts.push(Stmt::Arch(ArchStmt::Fence {
                fm: ((imm >> 8) & 0xf) as u8,
                pred: ((imm >> 4) & 0xf) as u8,
                succ: (imm & 0xf) as u8,
            }));
        }
        Ecall | Ebreak => {
            let kind = if insn.mnemonic == Ecall {
                ArchTermStmt::Ecall
            } else {
                ArchTermStmt::Ebreak
            };
            let next = b.code_addr(4);
            outcome = LiftOutcome::Terminated(TermStmt::ArchTerm(kind, b.finish_regs(next)));
        }
        other => unreachable!("{other} has no lifting rule"),
    }
    b.offset += 4;
    outcome
}

/// Lifts straight-line code starting at `start` into one block, drawing ids
/// from `ids`.
///
/// Stops at the first control transfer, an undecodable word (which becomes a
/// `TranslateError` terminator), the end of executable memory, or once
/// another instruction would exceed `max_bytes`.
pub fn disassemble_block_with(
    mem: &Memory,
    start: MemSegmentOff,
    max_bytes: u64,
    ids: &mut IdGen,
) -> Result<Block, LiftError> {
    if !mem.is_executable(start) {
        return Err(LiftError::NotExecutable(mem.display_segoff(start)));
    }
    let max_bytes = max_bytes.max(4);
    let table = DecodeTable::for_xlen(mem.width().bits());
    let mut b = BlockBuilder::new(mem, start, ids);
    loop {
        if b.offset + 4 > max_bytes {
            return Ok(b.fall_through());
        }
        let here = match mem.segoff_offset(start, b.offset as i64) {
            Some(at) if mem.is_executable(at) => at,
            _ => return Ok(b.fall_through()),
        };
        let word = match mem.read_le(here, 4) {
            Ok(w) => w as u32,
            Err(e) if b.offset == 0 => {
                return Ok(b.translate_error("(unreadable)".into(), e.to_string()));
            }
            Err(_) => return Ok(b.fall_through()),
        };
        let insn = match table.decode(word) {
            Ok(i) => i,
            Err(e) => return Ok(b.translate_error(format!("(illegal {word:#010x})"), e.to_string())),
        };
        if let LiftOutcome::Terminated(term) = lift_instruction(&mut b, &insn) {
            return Ok(b.into_block(term));
        }
    }
}

/// [`disassemble_block_with`] using a fresh id generator scoped to `start`.
pub fn disassemble_block(mem: &Memory, start: MemSegmentOff, max_bytes: u64) -> Result<Block, LiftError> {
    let mut ids = IdGen::new(scope_for(mem, start));
    disassemble_block_with(mem, start, max_bytes, &mut ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{eval_block, validate_block, ByteStore, ConcreteState};
    use crate::mem::{AddrWidth, MemChunk, MemSegment, MemWord, Permissions};
    use crate::riscv::encode;

    fn image(base: u64, insns: &[Instruction]) -> Memory {
        let bytes: Vec<u8> = insns.iter().flat_map(|i| encode(i).unwrap().to_le_bytes()).collect();
        let seg = MemSegment::new(
            0,
            MemWord::new(AddrWidth::W64, base),
            Permissions::RX,
            vec![MemChunk::Bytes(bytes)],
        )
        .unwrap();
        Memory::from_segments(AddrWidth::W64, vec![seg]).unwrap()
    }

    fn lift(mem: &Memory, addr: u64) -> Block {
        let b = disassemble_block(mem, mem.resolve_absolute(addr).unwrap(), DEFAULT_MAX_BLOCK_BYTES).unwrap();
        assert_eq!(validate_block(&b), vec![], "{b}");
        b
    }

    fn run(b: &Block, mem: &Memory, regs: &[(Reg, u64)]) -> ConcreteState {
        let mut s = ConcreteState::zeroed();
        for (r, v) in regs {
            s.set(*r, *v);
        }
        eval_block(b, mem, &s, &mut ByteStore::zero_filled()).unwrap()
    }

    #[test]
    fn branch_sets_pc_with_mux() {
        let m = image(0x2000, &[Instruction::s(Mnemonic::Beq, 5, 6, 0x10)]);
        let b = lift(&m, 0x2000);
        assert_eq!(b.byte_length.value(), 4);
        let pc = b.term.regs().get(Reg::Pc).clone();
        let last = b.stmts.last().unwrap().to_string();
        assert_eq!(last, format!("{} := Mux {} 0x2010 0x2004", pc, "r1"));
        assert_eq!(run(&b, &m, &[(Reg::x(5), 3), (Reg::x(6), 3)]).get(Reg::Pc), 0x2010);
        assert_eq!(run(&b, &m, &[(Reg::x(5), 3), (Reg::x(6), 4)]).get(Reg::Pc), 0x2004);
    }

    #[test]
    fn x0_writes_are_dropped() {
        let m = image(
            0x1000,
            &[
                Instruction::i(Mnemonic::Addi, 0, 0, 5),
                Instruction::i(Mnemonic::Addi, 10, 0, 7),
                Instruction::i(Mnemonic::Jalr, 0, 1, 0),
            ],
        );
        let b = lift(&m, 0x1000);
        assert_eq!(b.term.regs().get(Reg::ZERO).as_const(), Some(0));
        let out = run(&b, &m, &[(Reg::RA, 0x4001)]);
        assert_eq!(out.get(Reg::A0), 7);
        assert_eq!(out.get(Reg::Pc), 0x4000);
    }

    #[test]
    fn jal_links_and_terminates() {
        let m = image(
            0x1000,
            &[
                Instruction::u(Mnemonic::Jal, 1, 0x100),
                Instruction::i(Mnemonic::Addi, 1, 1, 1),
            ],
        );
        let b = lift(&m, 0x1000);
        assert_eq!(b.byte_length.value(), 4);
        assert_eq!(b.term.regs().get(Reg::RA).as_const(), Some(0x1004));
        assert_eq!(b.term.regs().get(Reg::Pc).as_const(), Some(0x1100));
    }

    #[test]
    fn illegal_word_is_translate_error() {
        let seg = MemSegment::new(
            0,
            MemWord::new(AddrWidth::W64, 0x1000),
            Permissions::RX,
            vec![MemChunk::Bytes(vec![0; 8])],
        )
        .unwrap();
        let m = Memory::from_segments(AddrWidth::W64, vec![seg]).unwrap();
        let b = lift(&m, 0x1000);
        assert!(matches!(b.term, TermStmt::TranslateError(..)));
        assert_eq!(b.byte_length.value(), 0);
        assert_eq!(b.stmts.len(), 1);
    }

    #[test]
    fn cap_falls_through() {
        let nops = vec![Instruction::i(Mnemonic::Addi, 0, 0, 0); 8];
        let m = image(0x1000, &nops);
        let at = m.resolve_absolute(0x1000).unwrap();
        let b = disassemble_block(&m, at, 12).unwrap();
        assert_eq!(b.byte_length.value(), 12);
        assert_eq!(b.term.regs().get(Reg::Pc).as_const(), Some(0x100c));
        let all = disassemble_block(&m, at, 4096).unwrap();
        assert_eq!(all.byte_length.value(), 32);
        assert_eq!(all.term.regs().get(Reg::Pc).as_const(), Some(0x1020));
    }

    #[test]
    fn ecall_ends_block() {
        let m = image(
            0x1000,
            &[
                Instruction::bare(Mnemonic::Ecall, 0),
                Instruction::bare(Mnemonic::Ebreak, 0),
            ],
        );
        let b = lift(&m, 0x1000);
        assert!(matches!(b.term, TermStmt::ArchTerm(ArchTermStmt::Ecall, _)));
        assert_eq!(b.term.regs().get(Reg::Pc).as_const(), Some(0x1004));
    }

    #[test]
    fn non_executable_start_rejected() {
        let seg = MemSegment::new(
            0,
            MemWord::new(AddrWidth::W64, 0x1000),
            Permissions::RW,
            vec![MemChunk::Bss(8)],
        )
        .unwrap();
        let m = Memory::from_segments(AddrWidth::W64, vec![seg]).unwrap();
        assert!(disassemble_block(&m, m.resolve_absolute(0x1000).unwrap(), 4096).is_err());
    }
}
