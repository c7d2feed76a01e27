//! Program form of a cell: a bipartite graph of memory buffers and kernels,
//! plus the two feature vectors the distances are built on.

use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::searchspace::{ArchId, CellSpec, OpKind, EDGES, NUM_NODES, NUM_OPS};

/// Tensor buffer, one per DAG node. Node 0 is the cell input, node 3 the output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MemoryId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct KernelId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KernelNode {
    pub id: KernelId,
    pub op: OpKind,
}

/// `G = (M ∪ K, R ∪ W)` with `R ⊆ M × K` and `W ⊆ K × M`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompGraph {
    pub memory_nodes: Vec<MemoryId>,
    pub kernel_nodes: Vec<KernelNode>,
    pub reads: BTreeSet<(MemoryId, KernelId)>,
    pub writes: BTreeSet<(KernelId, MemoryId)>,
}

impl CompGraph {
    pub const INPUT: MemoryId = MemoryId(0);
    pub const OUTPUT: MemoryId = MemoryId(NUM_NODES - 1);

    pub fn kernel(&self, id: KernelId) -> &KernelNode {
        &self.kernel_nodes[id.0]
    }

    /// Kernels reading from `mem`.
    pub fn consumers(&self, mem: MemoryId) -> impl Iterator<Item = KernelId> + '_ {
        self.reads
            .range((mem, KernelId(0))..=(mem, KernelId(usize::MAX)))
            .map(|&(_, k)| k)
    }

    /// Buffers written by kernel `k`.
    pub fn targets(&self, k: KernelId) -> impl Iterator<Item = MemoryId> + '_ {
        self.writes
            .range((k, MemoryId(0))..=(k, MemoryId(usize::MAX)))
            .map(|&(_, m)| m)
    }
}

/// One memory node per DAG node, one kernel per non-NONE edge.
pub fn build_graph(cell: &CellSpec) -> CompGraph {
    let memory_nodes = (0..NUM_NODES).map(MemoryId).collect();
    let mut kernel_nodes = Vec::new();
    let mut reads = BTreeSet::new();
    let mut writes = BTreeSet::new();
    for (e, &(src, dst)) in EDGES.iter().enumerate() {
        let op = cell.ops[e];
        if op == OpKind::None {
            continue;
        }
        let id = KernelId(kernel_nodes.len());
        kernel_nodes.push(KernelNode { id, op });
        reads.insert((MemoryId(src), id));
        writes.insert((id, MemoryId(dst)));
    }
    CompGraph {
        memory_nodes,
        kernel_nodes,
        reads,
        writes,
    }
}

/// Per-op counts indexed by [`OpKind::code`].
pub type OpCounts = [u32; NUM_OPS];

/// How often each kernel type labels an edge of the cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FreqVector(pub OpCounts);

/// For each kernel type, the number of (live input→output path, edge)
/// incidences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PathVector(pub OpCounts);

impl FreqVector {
    pub fn counts(&self) -> &OpCounts {
        &self.0
    }
}

impl PathVector {
    pub fn counts(&self) -> &OpCounts {
        &self.0
    }
}

pub fn freq_vector(cell: &CellSpec) -> FreqVector {
    let mut counts = [0; NUM_OPS];
    for op in cell.ops {
        counts[op.code() as usize] += 1;
    }
    FreqVector(counts)
}

/// The four input→output node paths of the fixed DAG, as edge indices.
const CELL_PATHS: [&[usize]; 4] = [&[3], &[0, 4], &[1, 5], &[0, 2, 5]];

pub fn path_vector(cell: &CellSpec) -> PathVector {
    let mut counts = [0; NUM_OPS];
    for path in CELL_PATHS {
        if path.iter().any(|&e| cell.ops[e] == OpKind::None) {
            continue;
        }
        for &e in path {
            counts[cell.ops[e].code() as usize] += 1;
        }
    }
    PathVector(counts)
}

/// Same quantity as [`path_vector`], obtained by walking the program form.
pub fn path_vector_from_graph(graph: &CompGraph) -> PathVector {
    fn walk(g: &CompGraph, mem: MemoryId, stack: &mut Vec<OpKind>, counts: &mut OpCounts) {
        if mem == CompGraph::OUTPUT {
            for op in stack.iter() {
                counts[op.code() as usize] += 1;
            }
            return;
        }
        for k in g.consumers(mem) {
            stack.push(g.kernel(k).op);
            for next in g.targets(k) {
                walk(g, next, stack, counts);
            }
            stack.pop();
        }
    }
    let mut counts = [0; NUM_OPS];
    walk(graph, CompGraph::INPUT, &mut Vec::new(), &mut counts);
    PathVector(counts)
}

/// Both feature vectors of one architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CellFeatures {
    pub id: ArchId,
    pub freq: FreqVector,
    pub path: PathVector,
}

impl CellFeatures {
    pub fn of(cell: &CellSpec) -> Self {
        CellFeatures {
            id: cell.encode(),
            freq: freq_vector(cell),
            path: path_vector(cell),
        }
    }
}

pub const FEATURE_HEADER: &str = "arch_id,f_none,f_skip,f_c1,f_c3,f_ap,p_none,p_skip,p_c1,p_c3,p_ap";

pub fn write_features<W: Write>(mut out: W, features: &[CellFeatures]) -> Result<()> {
    writeln!(out, "{FEATURE_HEADER}")?;
    for f in features {
        write!(out, "{}", f.id)?;
        for c in f.freq.0.iter().chain(f.path.0.iter()) {
            write!(out, ",{c}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::searchspace::SPACE_SIZE;
    use proptest::prelude::*;

    use OpKind::{AvgPool3x3, Conv1x1, Conv3x3, Skip};

    fn cell(ops: [OpKind; 6]) -> CellSpec {
        CellSpec::new(ops)
    }

    #[test]
    fn graph_of_all_skip() {
        let g = build_graph(&CellSpec::uniform(Skip));
        assert_eq!(g.memory_nodes.len(), 4);
        assert_eq!(g.kernel_nodes.len(), 6);
        assert_eq!(g.reads.len(), 6);
        assert_eq!(g.writes.len(), 6);
    }

    #[test]
    fn graph_of_all_none() {
        let g = build_graph(&CellSpec::uniform(OpKind::None));
        assert_eq!(g.memory_nodes.len(), 4);
        assert!(g.kernel_nodes.is_empty());
        assert!(g.reads.is_empty() && g.writes.is_empty());
    }

    #[test]
    fn graph_single_edge() {
        let mut ops = [OpKind::None; 6];
        ops[3] = Conv3x3;
        let g = build_graph(&cell(ops));
        assert_eq!(g.kernel_nodes, vec![KernelNode { id: KernelId(0), op: Conv3x3 }]);
        assert_eq!(g.reads.iter().copied().collect::<Vec<_>>(), vec![(MemoryId(0), KernelId(0))]);
        assert_eq!(g.writes.iter().copied().collect::<Vec<_>>(), vec![(KernelId(0), MemoryId(3))]);
    }

    #[test]
    fn freq_examples() {
        assert_eq!(freq_vector(&CellSpec::uniform(Skip)).0, [0, 6, 0, 0, 0]);
        let c = cell([Conv3x3, Conv3x3, Skip, OpKind::None, AvgPool3x3, Conv1x1]);
        assert_eq!(freq_vector(&c).0, [1, 1, 1, 2, 1]);
        let mut permuted = c;
        permuted.ops.reverse();
        assert_eq!(freq_vector(&permuted), freq_vector(&c));
    }

    #[test]
    fn path_examples() {
        assert_eq!(path_vector(&CellSpec::uniform(Skip)).0, [0, 8, 0, 0, 0]);
        assert_eq!(path_vector(&CellSpec::uniform(OpKind::None)).0, [0; 5]);
        let c = cell([OpKind::None, OpKind::None, Conv3x3, OpKind::None, Conv3x3, Skip]);
        assert_eq!(path_vector(&c).0, [0; 5]);
    }

    #[test]
    fn feature_csv() {
        let f = CellFeatures::of(&CellSpec::uniform(Skip));
        let mut buf = Vec::new();
        write_features(&mut buf, &[f]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, format!("{FEATURE_HEADER}\n{},0,6,0,0,0,0,8,0,0,0\n", f.id));
    }

    fn arb_cell() -> impl Strategy<Value = CellSpec> {
        (0..SPACE_SIZE).prop_map(|i| CellSpec::decode(ArchId(i)))
    }

    proptest! {
        #[test]
        fn vector_invariants(c in arb_cell()) {
            prop_assert_eq!(freq_vector(&c).0.iter().sum::<u32>(), 6);
            let p = path_vector(&c);
            prop_assert_eq!(p.0[OpKind::None.code() as usize], 0);
            prop_assert_eq!(path_vector_from_graph(&build_graph(&c)), p);
        }

        #[test]
        fn none_to_skip_is_monotone(c in arb_cell(), edge in 0..6usize) {
            let mut up = c;
            if up.ops[edge] == OpKind::None {
                up.ops[edge] = Skip;
            }
            let (a, b) = (path_vector(&c), path_vector(&up));
            prop_assert!(a.0.iter().zip(b.0.iter()).all(|(x, y)| y >= x));
        }
    }

    #[test]
    fn path_vector_zero_iff_no_live_path() {
        for i in 0..SPACE_SIZE {
            let c = CellSpec::decode(ArchId(i));
            let zero = path_vector(&c).0.iter().all(|&x| x == 0);
            let output_live = c.live_nodes()[3];
            assert_eq!(zero, !output_live, "{c}");
        }
    }
}
