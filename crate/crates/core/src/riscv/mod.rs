// SPDX-License-Identifier: Apache-2.0

//! RISC-V front end: decoding, encoding and lifting to the block IR.

mod decode;
mod lift;

pub use decode::{
    decode, encode, DecodeError, DecodeTable, EncodeError, Format, Instruction, Mnemonic, TableCollision,
};
pub use lift::{
    disassemble_block, disassemble_block_with, lift_instruction, scope_for, BlockBuilder, LiftError, LiftOutcome,
    DEFAULT_MAX_BLOCK_BYTES,
};
