// SPDX-License-Identifier: Apache-2.0

//! Argument and return register demand.

use std::collections::{BTreeMap, HashMap};

use crate::discovery::{CallTarget, Classification, DiscoveredFunction, DiscoveryState};
use crate::ir::{AssignId, AssignRhs, Block, Reg, Stmt, Value};
use crate::mem::MemSegmentOff;

/// Bit set over the 33 registers, indexed by [`Reg::index`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct RegSet(u64);

impl RegSet {
    pub fn empty() -> RegSet {
        RegSet(0)
    }

    pub fn of(regs: impl IntoIterator<Item = Reg>) -> RegSet {
        let mut s = RegSet(0);
        for r in regs {
            s.insert(r);
        }
        s
    }

    pub fn insert(&mut self, r: Reg) {
        self.0 |= 1 << r.index();
    }

    pub fn contains(self, r: Reg) -> bool {
        self.0 & (1 << r.index()) != 0
    }

    pub fn union(self, o: RegSet) -> RegSet {
        RegSet(self.0 | o.0)
    }

    pub fn minus(self, o: RegSet) -> RegSet {
        RegSet(self.0 & !o.0)
    }

    pub fn iter(self) -> impl Iterator<Item = Reg> {
        Reg::all().filter(move |r| self.contains(*r))
    }
}

fn args_regs() -> RegSet {
    RegSet::of((0..8).map(Reg::arg))
}

/// Registers a function reads as arguments and writes as results.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct DemandSet {
    /// Contiguous prefix of `a0..a7`.
    pub arguments: Vec<Reg>,
    /// Subset of `a0, a1`, in order.
    pub returns: Vec<Reg>,
}

impl DemandSet {
    fn arg_set(&self) -> RegSet {
        RegSet::of(self.arguments.iter().copied())
    }

    fn ret_set(&self) -> RegSet {
        RegSet::of(self.returns.iter().copied())
    }
}

/// Entry registers each value depends on, memoized per block.
struct Deps<'b> {
    defs: HashMap<AssignId, &'b AssignRhs>,
    memo: HashMap<AssignId, RegSet>,
}

impl<'b> Deps<'b> {
    fn new(block: &'b Block) -> Deps<'b> {
        Deps {
            defs: block.definitions(),
            memo: HashMap::new(),
        }
    }

    fn of(&mut self, v: &Value) -> RegSet {
        match v {
            Value::Initial { reg, .. } => RegSet::of([*reg]),
            Value::Assigned { id, .. } => {
                if let Some(s) = self.memo.get(id) {
                    return *s;
                }
                let rhs = self.defs.get(id).copied();
                let s = rhs
                    .map(|r| {
                        r.operands()
                            .into_iter()
                            .fold(RegSet::empty(), |acc, o| acc.union(self.of(o)))
                    })
                    .unwrap_or_default();
                self.memo.insert(*id, s);
                s
            }
            Value::Bv { .. } | Value::Relocatable { .. } => RegSet::empty(),
        }
    }
}

/// Per-block summary used by the liveness fixpoint.
struct BlockSummary {
    /// Entry registers read by memory effects and control flow.
    effects: RegSet,
    /// For each register, the entry registers its exit value depends on.
    exit_deps: Vec<RegSet>,
    /// Registers whose exit value differs from their entry value.
    writes: RegSet,
}

fn summarize(block: &Block) -> BlockSummary {
    let mut d = Deps::new(block);
    let mut effects = RegSet::empty();
    for s in &block.stmts {
        match s {
            Stmt::WriteMem { addr, value, .. } => effects = effects.union(d.of(addr)).union(d.of(value)),
            Stmt::Assign {
                rhs: AssignRhs::ReadMem { addr, .. },
                ..
            } => effects = effects.union(d.of(addr)),
            _ => {}
        }
    }
    let regs = block.term.regs();
    effects = effects.union(d.of(regs.get(Reg::Pc)));
    let exit_deps = Reg::all().map(|r| d.of(regs.get(r))).collect();
    let writes = RegSet::of(Reg::all().filter(|r| *r != Reg::Pc && !regs.is_passthrough(*r)));
    BlockSummary {
        effects,
        exit_deps,
        writes,
    }
}

fn live_in(s: &BlockSummary, live_out: RegSet) -> RegSet {
    live_out
        .iter()
        .fold(s.effects, |acc, r| acc.union(s.exit_deps[r.index()]))
}

fn callee_demand(demands: &BTreeMap<MemSegmentOff, DemandSet>, t: &MemSegmentOff) -> (RegSet, RegSet) {
    demands
        .get(t)
        .map(|d| (d.arg_set(), d.ret_set()))
        .unwrap_or((RegSet::empty(), RegSet::empty()))
}

/// Demand of one function given the current demand of its callees.
pub fn demand_analysis(f: &DiscoveredFunction, callees: &BTreeMap<MemSegmentOff, DemandSet>) -> DemandSet {
    let summaries: BTreeMap<MemSegmentOff, BlockSummary> =
        f.blocks.iter().map(|(a, b)| (*a, summarize(&b.block))).collect();

    let returns_written = written_at_returns(f, &summaries, callees);
    let ret_set = RegSet::of([Reg::A0, Reg::A1].into_iter().filter(|r| returns_written.contains(*r)));

    let mut live: BTreeMap<MemSegmentOff, RegSet> = f.blocks.keys().map(|a| (*a, RegSet::empty())).collect();
    loop {
        let mut changed = false;
        for (addr, b) in f.blocks.iter().rev() {
            let succ_live = |t: &MemSegmentOff| live.get(t).copied().unwrap_or_default();
            let out = match &b.classification {
                Classification::Return => ret_set,
                Classification::Branch { taken, fallthrough } => succ_live(taken).union(succ_live(fallthrough)),
                Classification::DirectJump(t) => succ_live(t),
                Classification::JumpTable(ts) => ts.iter().fold(RegSet::empty(), |acc, t| acc.union(succ_live(t))),
                Classification::Call { target, return_to } => {
                    let (args, rets) = match target {
                        CallTarget::Direct(t) => callee_demand(callees, t),
                        CallTarget::Indirect => (RegSet::empty(), RegSet::empty()),
                    };
                    args.union(succ_live(return_to).minus(rets))
                }
                Classification::TailCall(t) => callee_demand(callees, t).0,
                Classification::SysCall { return_to } => {
                    args_regs().union(succ_live(return_to).minus(RegSet::of([Reg::A0])))
                }
                Classification::Unknown(_) => RegSet::empty(),
            };
            let inn = live_in(&summaries[addr], out);
            if inn != live[addr] {
                live.insert(*addr, inn);
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let entry_live = live.get(&f.entry).copied().unwrap_or_default();
    let highest = (0..8u8).rev().find(|k| entry_live.contains(Reg::arg(*k)));
    DemandSet {
        arguments: highest.map(|h| (0..=h).map(Reg::arg).collect()).unwrap_or_default(),
        returns: ret_set.iter().collect(),
    }
}

/// Registers written on some path from the entry to a `Return` block.
fn written_at_returns(
    f: &DiscoveredFunction,
    summaries: &BTreeMap<MemSegmentOff, BlockSummary>,
    callees: &BTreeMap<MemSegmentOff, DemandSet>,
) -> RegSet {
    let mut written_in: BTreeMap<MemSegmentOff, RegSet> = BTreeMap::new();
    written_in.insert(f.entry, RegSet::empty());
    loop {
        let mut changed = false;
        for (addr, b) in &f.blocks {
            let Some(inn) = written_in.get(addr).copied() else {
                continue;
            };
            let out = inn.union(summaries[addr].writes);
            let edges: Vec<(MemSegmentOff, RegSet)> = match &b.classification {
                Classification::Call { target, return_to } => {
                    let rets = match target {
                        CallTarget::Direct(t) => callee_demand(callees, t).1,
                        CallTarget::Indirect => RegSet::empty(),
                    };
                    vec![(*return_to, out.union(rets))]
                }
                Classification::SysCall { return_to } => vec![(*return_to, out.union(RegSet::of([Reg::A0])))],
                c => c.local_successors().into_iter().map(|s| (s, out)).collect(),
            };
            for (s, w) in edges {
                let cur = written_in.get(&s).copied().unwrap_or_default();
                let next = cur.union(w);
                if !written_in.contains_key(&s) || next != cur {
                    written_in.insert(s, next);
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    f.blocks
        .iter()
        .filter(|(_, b)| b.classification == Classification::Return)
        .fold(RegSet::empty(), |acc, (a, _)| {
            acc.union(
                written_in
                    .get(a)
                    .copied()
                    .unwrap_or_default()
                    .union(summaries[a].writes),
            )
        })
}

/// Demand sets for every explored function, iterated to a fixpoint across
/// call edges.
pub fn demand_all(st: &DiscoveryState) -> BTreeMap<MemSegmentOff, DemandSet> {
    let mut demands: BTreeMap<MemSegmentOff, DemandSet> =
        st.explored.keys().map(|e| (*e, DemandSet::default())).collect();
    for _ in 0..=st.explored.len() * 16 + 1 {
        let mut changed = false;
        for (e, f) in &st.explored {
            let d = demand_analysis(f, &demands);
            if demands[e] != d {
                demands.insert(*e, d);
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    demands
}
