//! The NB201-style cell search space.
//!
//! A cell is a fixed 4-node DAG (node 0 is the input, node 3 the output)
//! whose six edges each carry one of five operations. Edges are stored in
//! the order `(0→1), (0→2), (1→2), (0→3), (1→3), (2→3)`, which is also the
//! order in which they appear in the canonical string form
//! `|op~0|+|op~0|op~1|+|op~0|op~1|op~2|`.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_EDGES: usize = 6;
pub const NUM_NODES: usize = 4;
pub const NUM_OPS: usize = 5;
/// Size of the unreduced space, `5^6`.
pub const SPACE_SIZE: u32 = 15_625;

/// `(source, destination)` node pair for every edge slot.
pub const EDGES: [(usize, usize); NUM_EDGES] = [(0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3)];

/// Kernel label of a cell edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum OpKind {
    None,
    Skip,
    Conv1x1,
    Conv3x3,
    AvgPool3x3,
}

impl OpKind {
    pub const ALL: [OpKind; NUM_OPS] = [
        OpKind::None,
        OpKind::Skip,
        OpKind::Conv1x1,
        OpKind::Conv3x3,
        OpKind::AvgPool3x3,
    ];

    /// Stable serialization code in `0..5`.
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<OpKind> {
        OpKind::ALL.get(code as usize).copied()
    }

    /// Name used in the canonical cell string.
    pub fn name(self) -> &'static str {
        match self {
            OpKind::None => "none",
            OpKind::Skip => "skip_connect",
            OpKind::Conv1x1 => "nor_conv_1x1",
            OpKind::Conv3x3 => "nor_conv_3x3",
            OpKind::AvgPool3x3 => "avg_pool_3x3",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.iter().copied().find(|op| op.name() == name)
    }

    pub fn is_conv(self) -> bool {
        matches!(self, OpKind::Conv1x1 | OpKind::Conv3x3)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        // Accept the short aliases used on the command line as well.
        let op = match s {
            "none" | "zero" => Some(OpKind::None),
            "skip" => Some(OpKind::Skip),
            "conv1x1" | "c1" => Some(OpKind::Conv1x1),
            "conv3x3" | "c3" => Some(OpKind::Conv3x3),
            "avgpool" | "avg_pool" | "ap" => Some(OpKind::AvgPool3x3),
            other => OpKind::from_name(other),
        };
        op.ok_or_else(|| Error::InvalidInput(format!("unknown operation `{s}`")))
    }
}

/// Index of an architecture: base-5 positional encoding of the six edge
/// codes, edge 0 being the most significant digit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ArchId(pub u32);

impl ArchId {
    pub fn new(index: u32) -> Result<ArchId> {
        if index < SPACE_SIZE {
            Ok(ArchId(index))
        } else {
            Err(Error::InvalidInput(format!(
                "architecture index {index} out of range [0, {SPACE_SIZE})"
            )))
        }
    }

    pub fn index(self) -> u32 {
        self.0
    }

    pub fn cell(self) -> CellSpec {
        CellSpec::decode(self)
    }
}

impl fmt::Display for ArchId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl FromStr for ArchId {
    type Err = Error;

    /// Parses either a plain integer index or a canonical cell string.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.starts_with('|') {
            return Ok(s.parse::<CellSpec>()?.encode());
        }
        let index = s
            .parse::<u32>()
            .map_err(|_| Error::InvalidInput(format!("bad architecture id `{s}`")))?;
        ArchId::new(index)
    }
}

/// One architecture of the space: the label of each of the six edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellSpec {
    pub ops: [OpKind; NUM_EDGES],
}

impl CellSpec {
    pub fn new(ops: [OpKind; NUM_EDGES]) -> Self {
        CellSpec { ops }
    }

    pub fn uniform(op: OpKind) -> Self {
        CellSpec {
            ops: [op; NUM_EDGES],
        }
    }

    pub fn encode(&self) -> ArchId {
        let index = self
            .ops
            .iter()
            .fold(0u32, |acc, op| acc * NUM_OPS as u32 + op.code() as u32);
        ArchId(index)
    }

    pub fn decode(id: ArchId) -> Self {
        let mut ops = [OpKind::None; NUM_EDGES];
        let mut rest = id.0;
        for slot in ops.iter_mut().rev() {
            *slot = OpKind::ALL[(rest % NUM_OPS as u32) as usize];
            rest /= NUM_OPS as u32;
        }
        CellSpec { ops }
    }

    pub fn op(&self, from: usize, to: usize) -> Option<OpKind> {
        edge_index(from, to).map(|e| self.ops[e])
    }

    /// Liveness of every node: node 0 is live, node `j > 0` is live iff some
    /// non-NONE edge enters it from a live node.
    pub fn live_nodes(&self) -> [bool; NUM_NODES] {
        let mut live = [false; NUM_NODES];
        live[0] = true;
        for (e, &(src, dst)) in EDGES.iter().enumerate() {
            // EDGES is sorted by destination, so every source is final here.
            if live[src] && self.ops[e] != OpKind::None {
                live[dst] = true;
            }
        }
        live
    }

    /// Rewrites every edge leaving a dead intermediate node to NONE.
    pub fn prune_dead_edges(&self) -> CellSpec {
        let live = self.live_nodes();
        let mut ops = self.ops;
        for (e, &(src, _)) in EDGES.iter().enumerate() {
            if !live[src] {
                ops[e] = OpKind::None;
            }
        }
        CellSpec { ops }
    }
}

impl fmt::Display for CellSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for dst in 1..NUM_NODES {
            if dst > 1 {
                f.write_str("+")?;
            }
            f.write_str("|")?;
            for src in 0..dst {
                let op = self.op(src, dst).expect("edge in fixed DAG");
                write!(f, "{}~{}|", op.name(), src)?;
            }
        }
        Ok(())
    }
}

impl FromStr for CellSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |why: &str| Error::InvalidInput(format!("bad cell string `{s}`: {why}"));
        let groups: Vec<&str> = s.trim().split('+').collect();
        if groups.len() != NUM_NODES - 1 {
            return Err(bad("expected 3 node groups"));
        }
        let mut ops = [OpKind::None; NUM_EDGES];
        for (g, group) in groups.iter().enumerate() {
            let dst = g + 1;
            let inner = group
                .strip_prefix('|')
                .and_then(|x| x.strip_suffix('|'))
                .ok_or_else(|| bad("node group must be enclosed in `|`"))?;
            let items: Vec<&str> = inner.split('|').collect();
            if items.len() != dst {
                return Err(bad("wrong number of inputs for node"));
            }
            for (src, item) in items.iter().enumerate() {
                let (name, from) = item
                    .split_once('~')
                    .ok_or_else(|| bad("missing `~` in edge"))?;
                if from.parse::<usize>().ok() != Some(src) {
                    return Err(bad("edge source out of order"));
                }
                let op = OpKind::from_name(name).ok_or_else(|| bad("unknown operation"))?;
                ops[edge_index(src, dst).expect("valid edge")] = op;
            }
        }
        Ok(CellSpec { ops })
    }
}

pub fn edge_index(from: usize, to: usize) -> Option<usize> {
    EDGES.iter().position(|&e| e == (from, to))
}

/// All `|opset|^6` cells built from `opset`, in ascending [`ArchId`] order.
pub fn enumerate_space(opset: &[OpKind]) -> Result<Vec<CellSpec>> {
    let mut allowed = [false; NUM_OPS];
    for op in opset {
        allowed[op.code() as usize] = true;
    }
    if !allowed.iter().any(|&a| a) {
        return Err(Error::InvalidInput("operation set is empty".into()));
    }
    Ok((0..SPACE_SIZE)
        .map(|i| CellSpec::decode(ArchId(i)))
        .filter(|c| c.ops.iter().all(|op| allowed[op.code() as usize]))
        .collect())
}

/// Merges cells that are identical once edges out of dead nodes are
/// rewritten to NONE, keeping the lowest `ArchId` of each group.
pub fn deduplicate(cells: &[CellSpec]) -> Vec<CellSpec> {
    let mut groups: BTreeMap<CellSpec, CellSpec> = BTreeMap::new();
    for cell in cells {
        let key = cell.prune_dead_edges();
        groups
            .entry(key)
            .and_modify(|rep| {
                if cell.encode() < rep.encode() {
                    *rep = *cell;
                }
            })
            .or_insert(*cell);
    }
    let mut out: Vec<CellSpec> = groups.into_values().collect();
    out.sort_by_key(CellSpec::encode);
    out
}

/// Fixed outer network into which the cell is replicated.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacroSkeleton {
    pub input_channels: usize,
    pub stem_channels: usize,
    pub cells_per_stage: usize,
    pub stage_channels: Vec<usize>,
    pub input_resolution: usize,
    pub num_classes: usize,
}

impl Default for MacroSkeleton {
    fn default() -> Self {
        MacroSkeleton {
            input_channels: 3,
            stem_channels: 16,
            cells_per_stage: 5,
            stage_channels: vec![16, 32, 64],
            input_resolution: 32,
            num_classes: 100,
        }
    }
}

impl MacroSkeleton {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(format!("macro skeleton: {m}")));
        if self.stage_channels.is_empty() {
            return bad("no stages");
        }
        if self.stage_channels.windows(2).any(|w| w[0] >= w[1]) {
            return bad("stage channels must be strictly increasing");
        }
        if self.stem_channels != self.stage_channels[0] {
            return bad("stem channels must match the first stage");
        }
        let halvings = self.stage_channels.len() - 1;
        if !self.input_resolution.is_multiple_of(1 << halvings) {
            return bad("resolution must halve evenly at every stage transition");
        }
        if self.input_channels == 0 || self.num_classes == 0 || self.cells_per_stage == 0 {
            return bad("counts must be positive");
        }
        Ok(())
    }

    /// Spatial resolution of stage `s`.
    pub fn stage_resolution(&self, stage: usize) -> usize {
        self.input_resolution >> stage
    }
}

/// Multiply-accumulates of a single square-kernel convolution producing an
/// `out_h × out_w` map.
pub fn conv_macs(kernel: u64, c_in: u64, c_out: u64, out_h: u64, out_w: u64) -> u64 {
    kernel * kernel * c_in * c_out * out_h * out_w
}

/// MACs of one cell edge at the given channel count and resolution.
/// Only convolutions multiply; pooling, skip, and zeroize are free.
pub fn edge_macs(op: OpKind, channels: usize, resolution: usize) -> u64 {
    let (c, r) = (channels as u64, resolution as u64);
    match op {
        OpKind::Conv1x1 => conv_macs(1, c, c, r, r),
        OpKind::Conv3x3 => conv_macs(3, c, c, r, r),
        OpKind::None | OpKind::Skip | OpKind::AvgPool3x3 => 0,
    }
}

pub fn cell_macs(cell: &CellSpec, channels: usize, resolution: usize) -> u64 {
    cell.ops
        .iter()
        .map(|&op| edge_macs(op, channels, resolution))
        .sum()
}

/// Basic residual block between stages: stride-2 3x3 conv, 3x3 conv, and a
/// pooled 1x1 shortcut, all evaluated at the halved resolution.
pub fn residual_block_macs(c_in: usize, c_out: usize, out_resolution: usize) -> u64 {
    let (ci, co, r) = (c_in as u64, c_out as u64, out_resolution as u64);
    conv_macs(3, ci, co, r, r) + conv_macs(3, co, co, r, r) + conv_macs(1, ci, co, r, r)
}

/// Total MACs of the full network built from `cell` on `skel`.
pub fn mac_count(cell: &CellSpec, skel: &MacroSkeleton) -> u64 {
    let res0 = skel.input_resolution as u64;
    let stem = conv_macs(
        3,
        skel.input_channels as u64,
        skel.stem_channels as u64,
        res0,
        res0,
    );
    let mut total = stem;
    for (stage, &channels) in skel.stage_channels.iter().enumerate() {
        let res = skel.stage_resolution(stage);
        if stage > 0 {
            total += residual_block_macs(skel.stage_channels[stage - 1], channels, res);
        }
        total += skel.cells_per_stage as u64 * cell_macs(cell, channels, res);
    }
    let last = *skel.stage_channels.last().expect("validated skeleton") as u64;
    total + last * skel.num_classes as u64
}

/// Writes one canonical cell string per line.
pub fn write_cell_list<W: Write>(mut out: W, cells: &[CellSpec]) -> Result<()> {
    for cell in cells {
        writeln!(out, "{cell}")?;
    }
    Ok(())
}

pub fn read_cell_list<R: BufRead>(input: R) -> Result<Vec<CellSpec>> {
    let mut cells = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let cell = line
            .parse::<CellSpec>()
            .map_err(|e| Error::parse(i as u64 + 1, e.to_string()))?;
        cells.push(cell);
    }
    Ok(cells)
}
