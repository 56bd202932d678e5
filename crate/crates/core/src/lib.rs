// SPDX-License-Identifier: Apache-2.0

//! Binary lifting and signature recovery for RISC-V ELF images.

pub mod discovery;
pub mod ir;
pub mod mem;
pub mod report;
pub mod rewrite;
pub mod riscv;
pub mod typeinf;
