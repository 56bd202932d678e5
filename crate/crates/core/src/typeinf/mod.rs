// SPDX-License-Identifier: Apache-2.0

//! Function signature recovery.
//!
//! Each explored function gets a demand set (argument and return registers),
//! a set of pointer/number constraints, and, after one whole-program solve,
//! a signature. Concrete executable addresses passed as call arguments feed
//! back into discovery as new entry points.

mod constraints;
mod demand;
mod solve;

use std::collections::{BTreeMap, BTreeSet};

pub use constraints::{gen_constraints, TypeConstraint, TypeVar};
pub use demand::{demand_all, demand_analysis, DemandSet, RegSet};
pub use solve::{solve, InferredType, Solution, POINTEE_DEPTH_LIMIT};

use crate::discovery::{discover, seed_entry_points, Classification, DiscoveryConfig, DiscoveryState};
use crate::mem::{MemSegmentOff, Memory};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Signature {
    pub entry: MemSegmentOff,
    pub name: Option<String>,
    /// One type per demanded argument register; conflicts already rendered
    /// as `num<xlen>`.
    pub args: Vec<InferredType>,
    pub rets: Vec<InferredType>,
    /// Descriptions of conflicting classes touching this function.
    pub conflicts: Vec<String>,
}

impl Signature {
    /// `name(arg, ...) -> ret` with `void` for no results.
    pub fn render(&self, mem: &Memory) -> String {
        let name = self
            .name
            .clone()
            .unwrap_or_else(|| format!("fn_{}", mem.display_segoff(self.entry)));
        let args: Vec<String> = self.args.iter().map(|t| t.to_string()).collect();
        let rets = match self.rets.as_slice() {
            [] => "void".to_string(),
            [t] => t.to_string(),
            ts => format!("({})", ts.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(", ")),
        };
        format!("{name}({}) -> {rets}", args.join(", "))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Inference {
    pub signatures: BTreeMap<MemSegmentOff, Signature>,
    pub demands: BTreeMap<MemSegmentOff, DemandSet>,
    /// Executable, unexplored addresses passed as call arguments.
    pub new_entry_points: Vec<MemSegmentOff>,
}

/// Runs demand analysis, constraint generation and one solve over every
/// explored function.
pub fn infer_signatures(mem: &Memory, st: &DiscoveryState) -> Inference {
    let xlen = mem.width().bits();
    let demands = demand_all(st);
    let mut cs = Vec::new();
    for (e, f) in &st.explored {
        if !f.blocks.values().any(|b| b.classification == Classification::Return) {
            log::info!("{} has no return block; assuming no results", mem.display_segoff(*e));
        }
        cs.extend(gen_constraints(f, &demands[e], &demands, mem));
    }
    let sol = solve(&cs, xlen);

    let mut new_entry_points = BTreeSet::new();
    for c in &cs {
        if let TypeConstraint::IsCodePtr(_, t) = c {
            if mem.is_executable(*t) && !st.explored.contains_key(t) {
                new_entry_points.insert(*t);
            }
        }
    }

    let mut signatures = BTreeMap::new();
    for (e, f) in &st.explored {
        let d = &demands[e];
        let slot = |v: TypeVar| sol.type_of(&v, xlen).resolve_conflicts(xlen);
        let args = (0..d.arguments.len() as u8)
            .map(|index| slot(TypeVar::Arg { func: *e, index }))
            .collect();
        let rets = (0..d.returns.len() as u8)
            .map(|index| slot(TypeVar::Ret { func: *e, index }))
            .collect();
        let reps: BTreeSet<TypeVar> = sol
            .representative
            .iter()
            .filter(|(v, r)| v.func() == *e && sol.conflicts.contains(r))
            .map(|(_, r)| *r)
            .collect();
        for r in &reps {
            log::info!("pointer/number conflict at {}", r.describe(mem));
        }
        signatures.insert(
            *e,
            Signature {
                entry: *e,
                name: f.name.clone(),
                args,
                rets,
                conflicts: reps.iter().map(|r| r.describe(mem)).collect(),
            },
        );
    }
    Inference {
        signatures,
        demands,
        new_entry_points: new_entry_points.into_iter().collect(),
    }
}

#[derive(Clone, Debug)]
pub struct Recovery {
    pub state: DiscoveryState,
    pub inference: Inference,
    /// Discovery rounds run; the first round counts as one.
    pub iterations: usize,
    /// Entries found through code-pointer evidence, in discovery order.
    pub feedback: Vec<MemSegmentOff>,
}

/// Alternates discovery and inference until inference proposes no entry
/// point that discovery has not already been offered.
pub fn recovery_loop(mem: &Memory, seeds: &[u64], cfg: &DiscoveryConfig) -> Recovery {
    let mut st = seed_entry_points(mem, seeds);
    let mut feedback = Vec::new();
    let mut iterations = 0;
    loop {
        st = discover(mem, st, cfg);
        iterations += 1;
        let inference = infer_signatures(mem, &st);
        let mut pushed = false;
        for e in &inference.new_entry_points {
            if st.push_frontier(*e) {
                feedback.push(*e);
                pushed = true;
            }
        }
        if !pushed {
            return Recovery {
                state: st,
                inference,
                iterations,
                feedback,
            };
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::Reg;
    use crate::mem::{AddrWidth, MemChunk, MemSegment, MemWord, Permissions};
    use crate::riscv::{encode, Instruction, Mnemonic::*};

    const BASE: u64 = 0x1000;

    /// Code laid out from `BASE`, entry at `BASE`, nops between listed slots.
    fn image(code: &[(u64, Instruction)]) -> Memory {
        let end = code.iter().map(|(a, _)| a + 4).max().unwrap();
        let nop = encode(&Instruction::i(Addi, 0, 0, 0)).unwrap();
        let mut bytes: Vec<u8> = (BASE..end).step_by(4).flat_map(|_| nop.to_le_bytes()).collect();
        for (a, insn) in code {
            let at = (a - BASE) as usize;
            bytes[at..at + 4].copy_from_slice(&encode(insn).unwrap().to_le_bytes());
        }
        let seg = MemSegment::new(
            0,
            MemWord::new(AddrWidth::W64, BASE),
            Permissions::RX,
            vec![MemChunk::Bytes(bytes)],
        )
        .unwrap();
        let mut mem = Memory::from_segments(AddrWidth::W64, vec![seg]).unwrap();
        mem.set_entry(mem.resolve_absolute(BASE));
        mem
    }

    fn seq(insns: &[Instruction]) -> Memory {
        image(
            &insns
                .iter()
                .enumerate()
                .map(|(i, x)| (BASE + 4 * i as u64, *x))
                .collect::<Vec<_>>(),
        )
    }

    fn ret() -> Instruction {
        Instruction::i(Jalr, 0, 1, 0)
    }

    fn entry_signature(mem: &Memory) -> (DemandSet, String) {
        let r = recovery_loop(mem, &[], &DiscoveryConfig::default());
        let e = mem.entry().unwrap();
        (r.inference.demands[&e].clone(), r.inference.signatures[&e].render(mem))
    }

    #[test]
    fn reads_before_write_are_arguments() {
        let (d, _) = entry_signature(&seq(&[Instruction::r(Add, 10, 10, 11), ret()]));
        assert_eq!(d.arguments, [Reg::A0, Reg::A1]);
        assert_eq!(d.returns, [Reg::A0]);
    }

    #[test]
    fn local_temporaries_are_not_demanded() {
        let (d, _) = entry_signature(&seq(&[Instruction::i(Addi, 15, 0, 1), ret()]));
        assert_eq!(d, DemandSet::default());
    }

    #[test]
    fn arguments_are_completed_downward() {
        let (d, _) = entry_signature(&seq(&[Instruction::r(Add, 10, 12, 0), ret()]));
        assert_eq!(d.arguments, [Reg::A0, Reg::A1, Reg::arg(2)]);
    }

    #[test]
    fn loaded_through_argument_is_pointer() {
        let (_, sig) = entry_signature(&seq(&[Instruction::i(Ld, 10, 10, 0), ret()]));
        assert_eq!(sig, "fn_0x1000(ptr(num64)) -> num64");
    }

    #[test]
    fn division_operands_are_numbers() {
        let (_, sig) = entry_signature(&seq(&[Instruction::r(Divu, 10, 10, 11), ret()]));
        assert_eq!(sig, "fn_0x1000(num64, num64) -> num64");
    }

    /// Entry passes `target` to a function that jumps through its first
    /// argument; `target` returns 7.
    fn callback(target: u64) -> Memory {
        image(&[
            (0x1000, Instruction::i(Addi, 2, 2, -16)),
            (0x1004, Instruction::s(Sd, 2, 1, 8)),
            (0x1008, Instruction::u(Lui, 10, (target & !0xfff) as i32)),
            (0x100c, Instruction::i(Addi, 10, 10, (target & 0xfff) as i32)),
            (0x1010, Instruction::u(Jal, 1, 0x10)),
            (0x1014, Instruction::i(Ld, 1, 2, 8)),
            (0x1018, Instruction::i(Addi, 2, 2, 16)),
            (0x101c, ret()),
            (0x1020, Instruction::i(Jalr, 0, 10, 0)),
            (0x1040, Instruction::i(Addi, 10, 0, 7)),
            (0x1044, ret()),
        ])
    }

    #[test]
    fn code_pointer_argument_feeds_discovery() {
        let mem = callback(0x1040);
        let r = recovery_loop(&mem, &[], &DiscoveryConfig::default());
        let target = mem.resolve_absolute(0x1040).unwrap();
        assert_eq!(r.iterations, 2);
        assert_eq!(r.feedback, [target]);
        assert!(r.state.explored.contains_key(&target));
        let taker = mem.resolve_absolute(0x1020).unwrap();
        assert_eq!(
            r.inference.signatures[&taker].args,
            [InferredType::CodePtr([target].into())]
        );
        assert!(r.inference.new_entry_points.is_empty());
    }

    #[test]
    fn self_reference_needs_no_extra_round() {
        let r = recovery_loop(&callback(0x1000), &[], &DiscoveryConfig::default());
        assert_eq!(r.iterations, 1);
        assert!(r.feedback.is_empty());
    }
}
