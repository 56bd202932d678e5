// SPDX-License-Identifier: Apache-2.0

//! Concrete evaluation of blocks.

use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

use super::{mask, sign_extend, App, AssignId, AssignRhs, Block, Endianness, MemRepr, Reg, Stmt, TermStmt, Value};
use crate::mem::Memory;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EvalError {
    #[error("translation error: {0}")]
    TranslateError(String),
    #[error("read of unmapped address {0:#x}")]
    UnmappedRead(u64),
    #[error("read of relocated memory at {0:#x}")]
    RelocationRead(u64),
    #[error("use of undefined assignment {0}")]
    Undefined(AssignId),
    #[error("value of unsupported type in {0}")]
    UnsupportedType(&'static str),
}

/// Concrete contents of every register.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ConcreteState {
    regs: [u64; Reg::COUNT],
}

impl ConcreteState {
    pub fn zeroed() -> ConcreteState {
        ConcreteState { regs: [0; Reg::COUNT] }
    }

    pub fn get(&self, r: Reg) -> u64 {
        self.regs[r.index()]
    }

    pub fn set(&mut self, r: Reg, v: u64) {
        self.regs[r.index()] = v;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MemWrite {
    pub addr: u64,
    pub bytes: u8,
    pub value: u64,
}

/// Byte-addressed scratch memory layered over a loaded [`Memory`].
///
/// Reads consult written bytes first, then the loaded image. Addresses in
/// neither are an error unless the store was built with [`ByteStore::zero_filled`].
#[derive(Clone, Debug, Default)]
pub struct ByteStore {
    bytes: BTreeMap<u64, u8>,
    zero_fill: bool,
    writes: Vec<MemWrite>,
}

impl ByteStore {
    pub fn new() -> ByteStore {
        ByteStore::default()
    }

    pub fn zero_filled() -> ByteStore {
        ByteStore {
            zero_fill: true,
            ..ByteStore::default()
        }
    }

    pub fn poke(&mut self, addr: u64, byte: u8) {
        self.bytes.insert(addr, byte);
    }

    /// Every write performed through this store, in order.
    pub fn writes(&self) -> &[MemWrite] {
        &self.writes
    }

    fn read_byte(&self, mem: &Memory, addr: u64) -> Result<u8, EvalError> {
        if let Some(b) = self.bytes.get(&addr) {
            return Ok(*b);
        }
        match mem.resolve_absolute(addr) {
            Some(so) => match mem.read_bytes(so, 1) {
                Ok(b) => Ok(b[0]),
                Err(_) => Err(EvalError::RelocationRead(addr)),
            },
            None if self.zero_fill => Ok(0),
            None => Err(EvalError::UnmappedRead(addr)),
        }
    }

    fn read(&self, mem: &Memory, addr: u64, repr: MemRepr, addr_mask: u64) -> Result<u64, EvalError> {
        let mut bytes = Vec::with_capacity(repr.bytes as usize);
        for i in 0..u64::from(repr.bytes) {
            bytes.push(self.read_byte(mem, addr.wrapping_add(i) & addr_mask)?);
        }
        if repr.endian == Endianness::Big {
            bytes.reverse();
        }
        Ok(bytes.iter().rev().fold(0u64, |acc, b| (acc << 8) | u64::from(*b)))
    }

    fn write(&mut self, addr: u64, repr: MemRepr, value: u64, addr_mask: u64) {
        let n = u64::from(repr.bytes);
        for i in 0..n {
            let shift = match repr.endian {
                Endianness::Little => 8 * i,
                Endianness::Big => 8 * (n - 1 - i),
            };
            self.bytes
                .insert(addr.wrapping_add(i) & addr_mask, (value >> shift) as u8);
        }
        self.writes.push(MemWrite {
            addr,
            bytes: repr.bytes,
            value,
        });
    }
}

struct Frame<'a> {
    regs_in: &'a ConcreteState,
    env: HashMap<AssignId, u64>,
}

impl Frame<'_> {
    fn value(&self, v: &Value) -> Result<u64, EvalError> {
        match v {
            Value::Bv { value, .. } => Ok(*value),
            // Relocatable regions are evaluated as if placed at address zero.
            Value::Relocatable { width, addr } => Ok(addr.offset.value() & mask(*width)),
            Value::Assigned { id, .. } => self.env.get(id).copied().ok_or(EvalError::Undefined(*id)),
            Value::Initial { reg, width } => Ok(self.regs_in.get(*reg) & mask(*width)),
        }
    }

    fn width(v: &Value) -> Result<u32, EvalError> {
        v.width().ok_or(EvalError::UnsupportedType("operand"))
    }

    fn app(&self, app: &App) -> Result<u64, EvalError> {
        use App::*;
        let r = match app {
            BvAdd(w, a, b) => self.value(a)?.wrapping_add(self.value(b)?) & mask(*w),
            BvSub(w, a, b) => self.value(a)?.wrapping_sub(self.value(b)?) & mask(*w),
            BvMul(w, a, b) => self.value(a)?.wrapping_mul(self.value(b)?) & mask(*w),
            BvUDiv(w, a, b) => {
                let d = self.value(b)?;
                self.value(a)?.checked_div(d).unwrap_or(mask(*w))
            }
            BvAnd(_, a, b) => self.value(a)? & self.value(b)?,
            BvOr(_, a, b) => self.value(a)? | self.value(b)?,
            BvXor(_, a, b) => self.value(a)? ^ self.value(b)?,
            BvShl(w, a, b) => {
                let s = self.value(b)?;
                if s >= u64::from(*w) {
                    0
                } else {
                    (self.value(a)? << s) & mask(*w)
                }
            }
            BvLshr(w, a, b) => {
                let s = self.value(b)?;
                if s >= u64::from(*w) {
                    0
                } else {
                    self.value(a)? >> s
                }
            }
            BvAshr(w, a, b) => {
                let s = self.value(b)?.min(u64::from(*w) - 1);
                ((sign_extend(self.value(a)?, *w) >> s) as u64) & mask(*w)
            }
            BvComplement(w, a) => !self.value(a)? & mask(*w),
            Mux(_, c, t, f) => {
                if self.value(c)? != 0 {
                    self.value(t)?
                } else {
                    self.value(f)?
                }
            }
            Eq(a, b) => u64::from(self.value(a)? == self.value(b)?),
            BvUlt(a, b) => u64::from(self.value(a)? < self.value(b)?),
            BvSlt(a, b) => {
                let w = Self::width(a)?;
                u64::from(sign_extend(self.value(a)?, w) < sign_extend(self.value(b)?, w))
            }
            SExt(from, to, a) => (sign_extend(self.value(a)?, *from) as u64) & mask(*to),
            UExt(_, _, a) => self.value(a)?,
            Trunc(_, to, a) => self.value(a)? & mask(*to),
        };
        Ok(r)
    }
}

/// Runs `block` on concrete inputs and returns the registers named by its
/// terminator. Memory writes go to `store`.
pub fn eval_block(
    block: &Block,
    mem: &Memory,
    regs_in: &ConcreteState,
    store: &mut ByteStore,
) -> Result<ConcreteState, EvalError> {
    let addr_mask = mask(block.xlen());
    let mut frame = Frame {
        regs_in,
        env: HashMap::new(),
    };
    for stmt in &block.stmts {
        match stmt {
            Stmt::Assign { id, rhs } => {
                let v = match rhs {
                    AssignRhs::EvalApp(app) => frame.app(app)?,
                    AssignRhs::ReadMem { addr, repr } => {
                        let a = frame.value(addr)?;
                        store.read(mem, a, *repr, addr_mask)?
                    }
                };
                frame.env.insert(*id, v);
            }
            Stmt::WriteMem { addr, repr, value } => {
                let a = frame.value(addr)?;
                let v = frame.value(value)?;
                store.write(a, *repr, v, addr_mask);
            }
            Stmt::InstructionStart { .. } | Stmt::Comment(_) | Stmt::Arch(_) => {}
        }
    }
    if let TermStmt::TranslateError(_, msg) = &block.term {
        return Err(EvalError::TranslateError(msg.clone()));
    }
    let mut out = ConcreteState::zeroed();
    for (reg, v) in block.term.regs().iter() {
        out.set(reg, frame.value(v)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{IdScope, RegState, TypeRepr};
    use crate::mem::{AddrWidth, MemChunk, MemSegment, MemWord, Permissions};

    fn mem() -> Memory {
        let seg = MemSegment::new(
            0,
            MemWord::new(AddrWidth::W64, 0x1000),
            Permissions::RX,
            vec![MemChunk::Bytes(vec![0x11, 0x22, 0x33, 0x44])],
        )
        .unwrap();
        Memory::from_segments(AddrWidth::W64, vec![seg]).unwrap()
    }

    fn id(i: u32) -> AssignId {
        AssignId {
            scope: IdScope(0),
            index: i,
        }
    }

    fn assigned(i: u32, w: u32) -> Value {
        Value::Assigned {
            id: id(i),
            ty: TypeRepr::Bv(w),
        }
    }

    fn block(stmts: Vec<Stmt>, term: TermStmt) -> Block {
        let m = mem();
        Block {
            address: m.resolve_absolute(0x1000).unwrap(),
            byte_length: m.word(4),
            stmts,
            term,
        }
    }

    fn start() -> Stmt {
        Stmt::InstructionStart {
            offset: 0,
            text: String::new(),
        }
    }

    /// `r2 := Mux r1 0x4 0x28; r3 := Add r2 0x100a3e50; { pc => r3 }`
    fn mux_block() -> Block {
        let mut regs = RegState::identity(64);
        regs.set(Reg::Pc, assigned(3, 64));
        block(
            vec![
                start(),
                Stmt::Assign {
                    id: id(1),
                    rhs: AssignRhs::EvalApp(App::Trunc(64, 1, Value::initial(Reg::x(1), 64))),
                },
                Stmt::Assign {
                    id: id(2),
                    rhs: AssignRhs::EvalApp(App::Mux(
                        TypeRepr::Bv(64),
                        assigned(1, 1),
                        Value::bv(64, 4),
                        Value::bv(64, 0x28),
                    )),
                },
                Stmt::Assign {
                    id: id(3),
                    rhs: AssignRhs::EvalApp(App::BvAdd(64, assigned(2, 64), Value::bv(64, 0x100a3e50))),
                },
            ],
            TermStmt::FetchAndExecute(regs),
        )
    }

    #[test]
    fn mux_example_taken_and_not_taken() {
        let m = mem();
        let b = mux_block();
        let mut st = ConcreteState::zeroed();
        st.set(Reg::x(1), 1);
        let out = eval_block(&b, &m, &st, &mut ByteStore::new()).unwrap();
        assert_eq!(out.get(Reg::Pc), 0x100a3e54);
        st.set(Reg::x(1), 0);
        let out = eval_block(&b, &m, &st, &mut ByteStore::new()).unwrap();
        assert_eq!(out.get(Reg::Pc), 0x100a3e78);
    }

    #[test]
    fn identity_block_is_noop() {
        let m = mem();
        let b = block(vec![start()], TermStmt::FetchAndExecute(RegState::identity(64)));
        let mut st = ConcreteState::zeroed();
        for r in Reg::all().skip(1) {
            st.set(r, r.index() as u64 * 0x1111);
        }
        assert_eq!(eval_block(&b, &m, &st, &mut ByteStore::new()).unwrap(), st);
    }

    #[test]
    fn translate_error_surfaces() {
        let m = mem();
        let b = block(
            vec![start()],
            TermStmt::TranslateError(RegState::identity(64), "bad".into()),
        );
        assert_eq!(
            eval_block(&b, &m, &ConcreteState::zeroed(), &mut ByteStore::new()),
            Err(EvalError::TranslateError("bad".into()))
        );
    }

    #[test]
    fn reads_image_and_store() {
        let m = mem();
        let mut regs = RegState::identity(64);
        regs.set(Reg::A0, assigned(1, 32));
        let b = block(
            vec![
                start(),
                Stmt::Assign {
                    id: id(1),
                    rhs: AssignRhs::ReadMem {
                        addr: Value::bv(64, 0x1000),
                        repr: MemRepr::le(4),
                    },
                },
            ],
            TermStmt::FetchAndExecute(regs),
        );
        let out = eval_block(&b, &m, &ConcreteState::zeroed(), &mut ByteStore::new()).unwrap();
        assert_eq!(out.get(Reg::A0), 0x44332211);

        let mut store = ByteStore::new();
        store.poke(0x1000, 0xff);
        let out = eval_block(&b, &m, &ConcreteState::zeroed(), &mut store).unwrap();
        assert_eq!(out.get(Reg::A0), 0x443322ff);
    }

    #[test]
    fn unmapped_read_is_error() {
        let m = mem();
        let b = block(
            vec![
                start(),
                Stmt::Assign {
                    id: id(1),
                    rhs: AssignRhs::ReadMem {
                        addr: Value::bv(64, 0x9000),
                        repr: MemRepr::le(1),
                    },
                },
            ],
            TermStmt::FetchAndExecute(RegState::identity(64)),
        );
        assert_eq!(
            eval_block(&b, &m, &ConcreteState::zeroed(), &mut ByteStore::new()),
            Err(EvalError::UnmappedRead(0x9000))
        );
        assert!(eval_block(&b, &m, &ConcreteState::zeroed(), &mut ByteStore::zero_filled()).is_ok());
    }

    #[test]
    fn division_by_zero_is_all_ones() {
        let m = mem();
        let mut regs = RegState::identity(64);
        regs.set(Reg::A0, assigned(1, 32));
        let b = block(
            vec![
                start(),
                Stmt::Assign {
                    id: id(1),
                    rhs: AssignRhs::EvalApp(App::BvUDiv(32, Value::bv(32, 7), Value::bv(32, 0))),
                },
            ],
            TermStmt::FetchAndExecute(regs),
        );
        let out = eval_block(&b, &m, &ConcreteState::zeroed(), &mut ByteStore::new()).unwrap();
        assert_eq!(out.get(Reg::A0), 0xffff_ffff);
    }
}
