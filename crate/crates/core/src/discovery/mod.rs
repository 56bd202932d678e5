// SPDX-License-Identifier: Apache-2.0

//! Function and control-flow discovery.
//!
//! Functions are taken one at a time from a FIFO frontier. Each is explored
//! with a local worklist: blocks are lifted, rewritten, interpreted over the
//! abstract domain and classified; intra-procedural successors are joined
//! and re-queued until the in-states stop growing, while call and tail-call
//! targets go back to the global frontier.

mod classify;
mod domain;

use std::collections::btree_map::Entry;
use std::collections::{BTreeMap, BTreeSet, VecDeque};

pub use classify::{
    branch_condition, classify, concrete_targets, refine_edge, CallTarget, Classification, FunctionContext,
};
pub use domain::{abstract_transfer, AbsValue, AbstractState, BlockAnalysis, OffsetBase, StackSlot};

use crate::ir::{Block, IdGen, Reg};
use crate::mem::{MemAddr, MemSegmentOff, Memory};
use crate::rewrite::rewrite_block_with;
use crate::riscv::{disassemble_block_with, scope_for, DEFAULT_MAX_BLOCK_BYTES};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DiscoveryConfig {
    pub max_block_bytes: u64,
    /// Largest constant set before widening to top.
    pub const_set_cap: usize,
    pub max_functions: usize,
}

impl Default for DiscoveryConfig {
    fn default() -> DiscoveryConfig {
        DiscoveryConfig {
            max_block_bytes: DEFAULT_MAX_BLOCK_BYTES,
            const_set_cap: 16,
            max_functions: usize::MAX,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DiscoveredBlock {
    /// The rewritten block.
    pub block: Block,
    pub classification: Classification,
    /// Joined abstract state on entry and the state it produces.
    pub entry_state: AbstractState,
    pub exit_state: AbstractState,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DiscoveredFunction {
    pub entry: MemSegmentOff,
    pub name: Option<String>,
    pub blocks: BTreeMap<MemSegmentOff, DiscoveredBlock>,
    /// Direct call and tail-call targets.
    pub callees: BTreeSet<MemSegmentOff>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DiscoveryState {
    pub frontier: VecDeque<MemSegmentOff>,
    pub explored: BTreeMap<MemSegmentOff, DiscoveredFunction>,
    pub failures: BTreeMap<MemAddr, String>,
}

impl DiscoveryState {
    /// Queues `at` unless it is already explored or queued.
    pub fn push_frontier(&mut self, at: MemSegmentOff) -> bool {
        if self.explored.contains_key(&at) || self.frontier.contains(&at) {
            return false;
        }
        self.frontier.push_back(at);
        true
    }

    fn known_entries(&self, mem: &Memory) -> BTreeSet<MemSegmentOff> {
        let mut known: BTreeSet<MemSegmentOff> = self.explored.keys().copied().collect();
        known.extend(self.frontier.iter().copied());
        known.extend(mem.symbols().iter().filter(|(_, s)| s.is_function).map(|(a, _)| *a));
        known
    }
}

/// Builds the initial frontier: the image entry point, function symbols in
/// address order, then `user` addresses. Unmapped user addresses are
/// recorded as failures.
pub fn seed_entry_points(mem: &Memory, user: &[u64]) -> DiscoveryState {
    let mut st = DiscoveryState::default();
    if let Some(e) = mem.entry().filter(|e| mem.is_executable(*e)) {
        st.push_frontier(e);
    }
    let funcs: Vec<MemSegmentOff> = mem
        .symbols()
        .iter()
        .filter(|(at, s)| s.is_function && mem.is_executable(**at))
        .map(|(at, _)| *at)
        .collect();
    for f in funcs {
        st.push_frontier(f);
    }
    for &a in user {
        match mem.resolve_absolute(a) {
            Some(at) => {
                st.push_frontier(at);
            }
            None => {
                st.failures
                    .insert(MemAddr::absolute(mem.word(a)), "address is not mapped".to_string());
            }
        }
    }
    st
}

/// Explores the function at `entry`, appending discovered call targets to
/// the frontier of `st`.
pub fn explore_function(
    st: &mut DiscoveryState,
    mem: &Memory,
    entry: MemSegmentOff,
    cfg: &DiscoveryConfig,
) -> DiscoveredFunction {
    let cap = cfg.const_set_cap.max(1);
    let mut known = st.known_entries(mem);
    known.remove(&entry);
    let mut ids = IdGen::new(scope_for(mem, entry));
    let mut lifted: BTreeMap<MemSegmentOff, Block> = BTreeMap::new();
    let mut in_states: BTreeMap<MemSegmentOff, AbstractState> = BTreeMap::new();
    let mut blocks: BTreeMap<MemSegmentOff, DiscoveredBlock> = BTreeMap::new();
    let mut callees = BTreeSet::new();
    let mut work: VecDeque<MemSegmentOff> = VecDeque::new();
    in_states.insert(entry, AbstractState::entry(mem, entry));
    work.push_back(entry);

    while let Some(addr) = work.pop_front() {
        let input = in_states[&addr].clone();
        let block = match lifted.entry(addr) {
            Entry::Occupied(o) => o.into_mut(),
            Entry::Vacant(v) => match disassemble_block_with(mem, addr, cfg.max_block_bytes, &mut ids) {
                Ok(raw) => v.insert(rewrite_block_with(&raw, &mut ids)),
                Err(e) => {
                    st.failures.insert(mem.segoff_to_addr(addr), e.to_string());
                    continue;
                }
            },
        };
        let block = &*block;
        let analysis = abstract_transfer(block, &input, mem, cap);
        let ctx = FunctionContext {
            mem,
            entry,
            known_entries: &known,
            const_set_cap: cap,
        };
        let class = classify(block, &input, &analysis, &ctx);

        let mut edges: Vec<(MemSegmentOff, AbstractState)> = Vec::new();
        match &class {
            Classification::Branch { taken, fallthrough } => {
                let (cond, x, _) = branch_condition(block).expect("branch ends in a mux");
                let x_target = concrete_targets(&analysis.value(&x, mem, &input), mem);
                for succ in [*taken, *fallthrough] {
                    let polarity = x_target.as_deref() == Some(&[succ]);
                    let mut s = analysis.out.clone();
                    refine_edge(&mut s, block, &cond, polarity, &input, &analysis, &ctx);
                    s.set(Reg::Pc, AbsValue::CodePtr(succ));
                    edges.push((succ, s));
                }
            }
            Classification::DirectJump(t) => edges.push((*t, analysis.out.clone())),
            Classification::JumpTable(ts) => edges.extend(ts.iter().map(|t| (*t, analysis.out.clone()))),
            Classification::Call { target, return_to } => {
                if let CallTarget::Direct(t) = target {
                    callees.insert(*t);
                    known.insert(*t);
                    st.push_frontier(*t);
                }
                let mut s = analysis.out.clone();
                s.clobber_caller_saved();
                edges.push((*return_to, s));
            }
            Classification::SysCall { return_to } => {
                let mut s = analysis.out.clone();
                s.set(Reg::A0, AbsValue::Top);
                edges.push((*return_to, s));
            }
            Classification::TailCall(t) => {
                callees.insert(*t);
                known.insert(*t);
                st.push_frontier(*t);
            }
            Classification::Return | Classification::Unknown(_) => {}
        }
        for (succ, mut s) in edges {
            s.set(Reg::Pc, AbsValue::CodePtr(succ));
            let joined = match in_states.get(&succ) {
                Some(prev) => prev.join(&s, cap),
                None => s,
            };
            let grew = in_states.get(&succ) != Some(&joined);
            if grew {
                in_states.insert(succ, joined);
                if !work.contains(&succ) {
                    work.push_back(succ);
                }
            }
        }
        blocks.insert(
            addr,
            DiscoveredBlock {
                block: block.clone(),
                classification: class,
                entry_state: input,
                exit_state: analysis.out,
            },
        );
    }

    DiscoveredFunction {
        entry,
        name: mem.symbol_at(entry).map(|s| s.name.clone()),
        blocks,
        callees,
    }
}

/// Explores frontier entries in FIFO order until the frontier is empty or
/// `cfg.max_functions` functions are explored.
pub fn discover(mem: &Memory, mut st: DiscoveryState, cfg: &DiscoveryConfig) -> DiscoveryState {
    while st.explored.len() < cfg.max_functions {
        let Some(entry) = st.frontier.pop_front() else {
            break;
        };
        if st.explored.contains_key(&entry) {
            continue;
        }
        if !mem.is_executable(entry) {
            st.failures
                .insert(mem.segoff_to_addr(entry), "entry is not in executable memory".into());
            continue;
        }
        let f = explore_function(&mut st, mem, entry, cfg);
        st.explored.insert(entry, f);
        st.frontier.retain(|e| *e != entry);
    }
    st
}
