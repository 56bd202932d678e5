// SPDX-License-Identifier: Apache-2.0

//! Unification-based constraint solving.
//!
//! Classes are built by union-find over `EqTC`. A class that points at
//! something carries a single pointee class, so merging two pointer classes
//! also merges their pointees. The resulting partition and the atoms each
//! class accumulates do not depend on constraint order, and resolution reads
//! only those atoms.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use super::constraints::{TypeConstraint, TypeVar};
use crate::mem::MemSegmentOff;

/// Nesting depth past which pointees render as opaque.
pub const POINTEE_DEPTH_LIMIT: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum InferredType {
    Num(u32),
    /// `None` is an opaque pointee.
    Ptr(Option<Box<InferredType>>),
    /// Executable addresses the value was seen to carry.
    CodePtr(BTreeSet<MemSegmentOff>),
    /// Both pointer and numeric evidence.
    Conflict,
}

impl InferredType {
    /// Replaces conflicts, at any depth, by `num<xlen>`.
    pub fn resolve_conflicts(&self, xlen: u32) -> InferredType {
        match self {
            InferredType::Conflict => InferredType::Num(xlen),
            InferredType::Ptr(Some(p)) => InferredType::Ptr(Some(Box::new(p.resolve_conflicts(xlen)))),
            t => t.clone(),
        }
    }

    pub fn has_conflict(&self) -> bool {
        match self {
            InferredType::Conflict => true,
            InferredType::Ptr(Some(p)) => p.has_conflict(),
            _ => false,
        }
    }
}

impl fmt::Display for InferredType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InferredType::Num(w) => write!(f, "num{w}"),
            InferredType::Ptr(None) => f.write_str("ptr(opaque)"),
            InferredType::Ptr(Some(p)) => write!(f, "ptr({p})"),
            InferredType::CodePtr(_) => f.write_str("codeptr"),
            InferredType::Conflict => f.write_str("conflict"),
        }
    }
}

#[derive(Clone, Debug, Default)]
struct Atoms {
    ptr: bool,
    num: Option<u32>,
    code: BTreeSet<MemSegmentOff>,
    pointee: Option<usize>,
}

struct UnionFind {
    parent: Vec<usize>,
    atoms: Vec<Atoms>,
}

impl UnionFind {
    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Unifies two classes and, transitively, their pointees.
    fn union(&mut self, a: usize, b: usize) {
        let mut pending = vec![(a, b)];
        while let Some((a, b)) = pending.pop() {
            let (ra, rb) = (self.find(a), self.find(b));
            if ra == rb {
                continue;
            }
            let (keep, gone) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[gone] = keep;
            let g = std::mem::take(&mut self.atoms[gone]);
            let k = &mut self.atoms[keep];
            k.ptr |= g.ptr;
            k.num = k.num.max(g.num);
            k.code.extend(g.code);
            match (k.pointee, g.pointee) {
                (Some(x), Some(y)) => pending.push((x, y)),
                (None, Some(y)) => k.pointee = Some(y),
                _ => {}
            }
        }
    }
}

/// Solved types for every variable mentioned by the constraints.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Solution {
    pub types: BTreeMap<TypeVar, InferredType>,
    /// Least variable of each variable's class.
    pub representative: BTreeMap<TypeVar, TypeVar>,
    /// Representatives of classes that mix pointer and numeric evidence.
    pub conflicts: BTreeSet<TypeVar>,
}

impl Solution {
    /// The type of `v`, `num<xlen>` when unconstrained.
    pub fn type_of(&self, v: &TypeVar, xlen: u32) -> InferredType {
        self.types.get(v).cloned().unwrap_or(InferredType::Num(xlen))
    }
}

pub fn solve(cs: &[TypeConstraint], xlen: u32) -> Solution {
    let mut index: BTreeMap<TypeVar, usize> = BTreeMap::new();
    for c in cs {
        match c {
            TypeConstraint::IsPtr(v) | TypeConstraint::IsNum(v, _) | TypeConstraint::IsCodePtr(v, _) => {
                let n = index.len();
                index.entry(*v).or_insert(n);
            }
            TypeConstraint::EqTC(a, b) | TypeConstraint::PointsTo(a, b) => {
                for v in [a, b] {
                    let n = index.len();
                    index.entry(*v).or_insert(n);
                }
            }
        }
    }
    // Renumber in variable order so class ids are independent of input order.
    for (i, slot) in index.values_mut().enumerate() {
        *slot = i;
    }
    let n = index.len();
    let mut uf = UnionFind {
        parent: (0..n).collect(),
        atoms: vec![Atoms::default(); n],
    };
    for c in cs {
        match c {
            TypeConstraint::IsPtr(v) => {
                let r = uf.find(index[v]);
                uf.atoms[r].ptr = true;
            }
            TypeConstraint::IsNum(v, w) => {
                let r = uf.find(index[v]);
                uf.atoms[r].num = uf.atoms[r].num.max(Some(*w));
            }
            TypeConstraint::IsCodePtr(v, t) => {
                let r = uf.find(index[v]);
                uf.atoms[r].code.insert(*t);
            }
            TypeConstraint::EqTC(a, b) => uf.union(index[a], index[b]),
            TypeConstraint::PointsTo(p, v) => {
                let r = uf.find(index[p]);
                uf.atoms[r].ptr = true;
                match uf.atoms[r].pointee {
                    Some(q) => uf.union(q, index[v]),
                    None => uf.atoms[r].pointee = Some(index[v]),
                }
            }
        }
    }

    let vars: Vec<TypeVar> = index.keys().copied().collect();
    let mut memo: BTreeMap<(usize, usize), InferredType> = BTreeMap::new();
    let mut sol = Solution::default();
    for (v, i) in &index {
        // Unions keep the smaller index, so the root is the least variable.
        let r = uf.find(*i);
        let t = resolve(&mut uf, r, 0, xlen, &mut memo);
        if t == InferredType::Conflict {
            sol.conflicts.insert(vars[r]);
        }
        sol.representative.insert(*v, vars[r]);
        sol.types.insert(*v, t);
    }
    sol
}

fn resolve(
    uf: &mut UnionFind,
    r: usize,
    depth: usize,
    xlen: u32,
    memo: &mut BTreeMap<(usize, usize), InferredType>,
) -> InferredType {
    if let Some(t) = memo.get(&(r, depth)) {
        return t.clone();
    }
    let a = uf.atoms[r].clone();
    let t = if !a.code.is_empty() {
        if a.num.is_some() {
            InferredType::Conflict
        } else {
            InferredType::CodePtr(a.code)
        }
    } else if a.ptr {
        if a.num.is_some() {
            InferredType::Conflict
        } else {
            let pointee = match a.pointee {
                Some(p) if depth + 1 < POINTEE_DEPTH_LIMIT => {
                    let pr = uf.find(p);
                    Some(Box::new(resolve(uf, pr, depth + 1, xlen, memo)))
                }
                _ => None,
            };
            InferredType::Ptr(pointee)
        }
    } else {
        InferredType::Num(a.num.unwrap_or(xlen))
    };
    memo.insert((r, depth), t.clone());
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{AssignId, IdScope};
    use crate::mem::{AddrWidth, MemWord, SegmentId};

    fn f() -> MemSegmentOff {
        MemSegmentOff {
            segment: SegmentId(0),
            offset: MemWord::new(AddrWidth::W64, 0x1000),
        }
    }

    fn v(i: u32) -> TypeVar {
        TypeVar::Assign {
            func: f(),
            id: AssignId {
                scope: IdScope(0),
                index: i,
            },
        }
    }

    #[test]
    fn equality_spreads_pointer_evidence() {
        let s = solve(&[TypeConstraint::EqTC(v(1), v(2)), TypeConstraint::IsPtr(v(1))], 64);
        assert_eq!(s.types[&v(1)], InferredType::Ptr(None));
        assert_eq!(s.types[&v(2)], InferredType::Ptr(None));
    }

    #[test]
    fn widest_numeric_width_wins() {
        let s = solve(&[TypeConstraint::IsNum(v(1), 64), TypeConstraint::IsNum(v(1), 32)], 64);
        assert_eq!(s.types[&v(1)], InferredType::Num(64));
    }

    #[test]
    fn pointer_and_number_conflict() {
        let s = solve(&[TypeConstraint::IsPtr(v(1)), TypeConstraint::IsNum(v(1), 64)], 64);
        assert_eq!(s.types[&v(1)], InferredType::Conflict);
        assert_eq!(s.conflicts.iter().collect::<Vec<_>>(), [&v(1)]);
        assert_eq!(s.types[&v(1)].resolve_conflicts(64).to_string(), "num64");
    }

    #[test]
    fn pointees_merge_with_their_pointers() {
        let s = solve(
            &[
                TypeConstraint::PointsTo(v(1), v(2)),
                TypeConstraint::PointsTo(v(3), v(4)),
                TypeConstraint::IsNum(v(4), 32),
                TypeConstraint::EqTC(v(1), v(3)),
            ],
            64,
        );
        assert_eq!(s.types[&v(1)].to_string(), "ptr(num32)");
        assert_eq!(s.types[&v(2)], InferredType::Num(32));
    }

    #[test]
    fn code_pointer_dominates_pointer() {
        let s = solve(&[TypeConstraint::IsPtr(v(1)), TypeConstraint::IsCodePtr(v(1), f())], 64);
        assert_eq!(s.types[&v(1)].to_string(), "codeptr");
    }

    #[test]
    fn deep_and_cyclic_pointees_are_capped() {
        let mut cs: Vec<_> = (0..8).map(|i| TypeConstraint::PointsTo(v(i), v(i + 1))).collect();
        cs.push(TypeConstraint::IsNum(v(8), 8));
        let s = solve(&cs, 64);
        assert_eq!(s.types[&v(0)].to_string(), "ptr(ptr(ptr(ptr(opaque))))");
        let cyc = solve(&[TypeConstraint::PointsTo(v(0), v(0))], 64);
        assert_eq!(cyc.types[&v(0)].to_string(), "ptr(ptr(ptr(ptr(opaque))))");
    }

    #[test]
    fn unconstrained_defaults_to_xlen() {
        let s = solve(&[TypeConstraint::EqTC(v(1), v(2))], 32);
        assert_eq!(s.types[&v(1)], InferredType::Num(32));
        assert_eq!(s.type_of(&v(9), 32), InferredType::Num(32));
    }
}
