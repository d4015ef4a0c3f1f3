//! Cell genotypes: blocks of two `(input, op)` branches summed together.
//!
//! A cell serializes as a JSON array of blocks, each block as
//! `[left_in, left_op, right_in, right_op]`, e.g. `[[0,"conv3",1,"max3"]]`.
//! The serialization of the canonical form is the cell's identity key.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::LayerKind;

/// The five operations a block branch may apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BlockOp {
    #[serde(rename = "conv3")]
    Conv3x3,
    #[serde(rename = "fconv5")]
    FactorizedConv5x5,
    #[serde(rename = "id")]
    Identity,
    #[serde(rename = "avg3")]
    AvgPool3x3,
    #[serde(rename = "max3")]
    MaxPool3x3,
}

pub const ALL_OPS: [BlockOp; 5] = [
    BlockOp::Conv3x3,
    BlockOp::FactorizedConv5x5,
    BlockOp::Identity,
    BlockOp::AvgPool3x3,
    BlockOp::MaxPool3x3,
];

impl BlockOp {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        ALL_OPS.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            BlockOp::Conv3x3 => "conv3",
            BlockOp::FactorizedConv5x5 => "fconv5",
            BlockOp::Identity => "id",
            BlockOp::AvgPool3x3 => "avg3",
            BlockOp::MaxPool3x3 => "max3",
        }
    }

    pub fn layer_kind(self) -> LayerKind {
        match self {
            BlockOp::Conv3x3 => LayerKind::Conv3x3,
            BlockOp::FactorizedConv5x5 => LayerKind::FactorizedConv5x5,
            BlockOp::Identity => LayerKind::Identity,
            BlockOp::AvgPool3x3 => LayerKind::AvgPool3x3,
            BlockOp::MaxPool3x3 => LayerKind::MaxPool3x3,
        }
    }

    pub fn is_conv(self) -> bool {
        matches!(self, BlockOp::Conv3x3 | BlockOp::FactorizedConv5x5)
    }
}

/// Where a branch reads from: 0 is the previous cell's output, 1 the one
/// before that, and `2 + j` the output of block `j` of the same cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InputRef(pub usize);

impl InputRef {
    pub const PREV: InputRef = InputRef(0);
    pub const PREV_PREV: InputRef = InputRef(1);

    pub fn block(j: usize) -> Self {
        InputRef(2 + j)
    }

    /// The block this reference points at, if it is not a cell input.
    pub fn as_block(self) -> Option<usize> {
        self.0.checked_sub(2)
    }
}

/// One `(input, op)` half of a block. Orders by input first, then op.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Branch {
    pub input: InputRef,
    pub op: BlockOp,
}

impl Branch {
    pub fn new(input: usize, op: BlockOp) -> Self {
        Branch {
            input: InputRef(input),
            op,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "(InputRef, BlockOp, InputRef, BlockOp)")]
#[serde(into = "(InputRef, BlockOp, InputRef, BlockOp)")]
pub struct BlockSpec {
    pub left: Branch,
    pub right: Branch,
}

impl From<(InputRef, BlockOp, InputRef, BlockOp)> for BlockSpec {
    fn from((li, lo, ri, ro): (InputRef, BlockOp, InputRef, BlockOp)) -> Self {
        BlockSpec {
            left: Branch { input: li, op: lo },
            right: Branch { input: ri, op: ro },
        }
    }
}

impl From<BlockSpec> for (InputRef, BlockOp, InputRef, BlockOp) {
    fn from(b: BlockSpec) -> Self {
        (b.left.input, b.left.op, b.right.input, b.right.op)
    }
}

impl BlockSpec {
    pub fn new(left: Branch, right: Branch) -> Self {
        BlockSpec { left, right }
    }

    pub fn canonical(self) -> Self {
        if self.right < self.left {
            BlockSpec {
                left: self.right,
                right: self.left,
            }
        } else {
            self
        }
    }

    pub fn branches(&self) -> [Branch; 2] {
        [self.left, self.right]
    }
}

/// An ordered list of blocks. Construction validates that no block reads
/// from itself or a later block.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<BlockSpec>", into = "Vec<BlockSpec>")]
pub struct CellSpec {
    blocks: Vec<BlockSpec>,
}

impl TryFrom<Vec<BlockSpec>> for CellSpec {
    type Error = Error;

    fn try_from(blocks: Vec<BlockSpec>) -> Result<Self> {
        CellSpec::new(blocks)
    }
}

impl From<CellSpec> for Vec<BlockSpec> {
    fn from(c: CellSpec) -> Self {
        c.blocks
    }
}

impl CellSpec {
    pub fn new(blocks: Vec<BlockSpec>) -> Result<Self> {
        for (b, block) in blocks.iter().enumerate() {
            for branch in block.branches() {
                if branch.input.0 >= 2 + b {
                    return Err(Error::InvalidCell(format!(
                        "block {b} reads input {} (must be < {})",
                        branch.input.0,
                        2 + b
                    )));
                }
            }
        }
        Ok(CellSpec { blocks })
    }

    pub fn empty() -> Self {
        CellSpec { blocks: Vec::new() }
    }

    /// Syntax errors surface as [`Error::Json`], bad references as
    /// [`Error::InvalidCell`].
    pub fn from_json(s: &str) -> Result<Self> {
        let blocks: Vec<BlockSpec> = serde_json::from_str(s)?;
        CellSpec::try_from(blocks)
    }

    pub fn blocks(&self) -> &[BlockSpec] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Each block with its two branches sorted.
    pub fn canonicalize(&self) -> CellSpec {
        CellSpec {
            blocks: self.blocks.iter().map(|b| b.canonical()).collect(),
        }
    }

    pub fn is_canonical(&self) -> bool {
        self.blocks.iter().all(|b| b.left <= b.right)
    }

    /// JSON of the canonical form; equal for cells that differ only in the
    /// order of branches within blocks.
    pub fn key(&self) -> String {
        serde_json::to_string(&self.canonicalize()).expect("cell serialization cannot fail")
    }

    /// Appends a block, validating its references.
    pub fn with_block(&self, block: BlockSpec) -> Result<CellSpec> {
        let mut blocks = self.blocks.clone();
        blocks.push(block);
        CellSpec::new(blocks)
    }

    /// Blocks whose output no later block reads, in block order.
    pub fn output_blocks(&self) -> Vec<usize> {
        let consumed: BTreeSet<usize> = self
            .blocks
            .iter()
            .flat_map(|b| b.branches())
            .filter_map(|br| br.input.as_block())
            .collect();
        (0..self.blocks.len())
            .filter(|j| !consumed.contains(j))
            .collect()
    }

    pub fn count_ops(&self, pred: impl Fn(BlockOp) -> bool) -> usize {
        self.blocks
            .iter()
            .flat_map(|b| b.branches())
            .filter(|br| pred(br.op))
            .count()
    }
}

impl fmt::Display for CellSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&serde_json::to_string(self).map_err(|_| fmt::Error)?)
    }
}

pub fn canonicalize(cell: &CellSpec) -> CellSpec {
    cell.canonicalize()
}

/// All branches available to block `b`, in canonical order.
pub fn branches_for(b: usize) -> Vec<Branch> {
    (0..2 + b)
        .flat_map(|input| ALL_OPS.iter().map(move |&op| Branch::new(input, op)))
        .collect()
}

/// Every distinct canonical cell obtained by appending one block to `parent`.
///
/// With `M = 5·(2+b)` available branches there are `M(M+1)/2` of them.
pub fn enumerate_expansions(parent: &CellSpec, b: usize, max_blocks: usize) -> Result<Vec<CellSpec>> {
    if parent.len() >= max_blocks {
        return Err(Error::CellFull(max_blocks));
    }
    if parent.len() != b {
        return Err(Error::InvalidCell(format!(
            "expanding block {b} of a cell with {} blocks",
            parent.len()
        )));
    }
    let parent = parent.canonicalize();
    let branches = branches_for(b);
    let mut out = Vec::with_capacity(branches.len() * (branches.len() + 1) / 2);
    for (i, &left) in branches.iter().enumerate() {
        for &right in &branches[i..] {
            out.push(parent.with_block(BlockSpec::new(left, right))?);
        }
    }
    Ok(out)
}

/// Longest path, counted in blocks, from a cell input to the cell output.
pub fn cell_depth(cell: &CellSpec) -> usize {
    let mut depth = vec![0usize, 0];
    for block in cell.blocks() {
        let d = 1 + block
            .branches()
            .iter()
            .map(|br| depth[br.input.0])
            .max()
            .unwrap_or(0);
        depth.push(d);
    }
    cell.output_blocks()
        .into_iter()
        .map(|j| depth[2 + j])
        .max()
        .unwrap_or(0)
}

/// Histogram of cell depths; depths with no cells are absent.
pub fn depth_distribution(cells: &[CellSpec]) -> BTreeMap<usize, usize> {
    let mut hist = BTreeMap::new();
    for c in cells {
        *hist.entry(cell_depth(c)).or_insert(0) += 1;
    }
    hist
}

/// A uniformly random valid cell with `n_blocks` blocks, canonicalized.
pub fn random_cell<R: Rng + ?Sized>(n_blocks: usize, rng: &mut R) -> CellSpec {
    let mut blocks = Vec::with_capacity(n_blocks);
    for b in 0..n_blocks {
        let mut branch = || Branch::new(rng.gen_range(0..2 + b), ALL_OPS[rng.gen_range(0..5)]);
        let (l, r) = (branch(), branch());
        blocks.push(BlockSpec::new(l, r).canonical());
    }
    CellSpec::new(blocks).expect("references drawn in range")
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn block(li: usize, lo: BlockOp, ri: usize, ro: BlockOp) -> BlockSpec {
        BlockSpec::new(Branch::new(li, lo), Branch::new(ri, ro))
    }

    #[test]
    fn canonicalize_sorts_branches() {
        let c = CellSpec::new(vec![block(1, BlockOp::MaxPool3x3, 0, BlockOp::Conv3x3)]).unwrap();
        let canon = c.canonicalize();
        assert_eq!(
            canon.blocks()[0],
            block(0, BlockOp::Conv3x3, 1, BlockOp::MaxPool3x3)
        );
        assert_eq!(canon.canonicalize(), canon);
        assert_eq!(c.key(), r#"[[0,"conv3",1,"max3"]]"#);
    }

    #[test]
    fn forward_references_are_rejected() {
        assert!(CellSpec::new(vec![block(2, BlockOp::Identity, 0, BlockOp::Identity)]).is_err());
        assert!(CellSpec::from_json(r#"[[0,"id",1,"id"],[3,"id",0,"id"]]"#).is_err());
        assert!(CellSpec::from_json(r#"[[0,"id",1,"bogus"]]"#).is_err());
    }

    #[test]
    fn json_round_trip() {
        let s = r#"[[0,"conv3",1,"max3"],[0,"fconv5",2,"avg3"]]"#;
        let c = CellSpec::from_json(s).unwrap();
        assert_eq!(serde_json::to_string(&c).unwrap(), s);
    }

    #[test]
    fn expansion_counts_match_brute_force() {
        let mut parent = CellSpec::empty();
        for b in 0..4 {
            let got = enumerate_expansions(&parent, b, 5).unwrap();
            let m = 5 * (2 + b);
            assert_eq!(got.len(), m * (m + 1) / 2);

            let branches: Vec<Branch> = (0..2 + b)
                .flat_map(|i| ALL_OPS.map(|op| Branch::new(i, op)))
                .collect();
            let mut keys = HashSet::new();
            for &l in &branches {
                for &r in &branches {
                    keys.insert(parent.with_block(BlockSpec::new(l, r)).unwrap().key());
                }
            }
            let got_keys: HashSet<String> = got.iter().map(|c| c.key()).collect();
            assert_eq!(got_keys, keys);
            assert!(got.iter().all(|c| c.is_canonical()));
            parent = got[got.len() / 3].clone();
        }
    }

    #[test]
    fn full_parent_cannot_expand() {
        let mut c = CellSpec::empty();
        for b in 0..5 {
            c = c
                .with_block(block(b + 1, BlockOp::Identity, b + 1, BlockOp::Identity))
                .unwrap();
        }
        assert!(matches!(enumerate_expansions(&c, 5, 5), Err(Error::CellFull(5))));
    }

    #[test]
    fn depth_examples() {
        let one = CellSpec::new(vec![block(0, BlockOp::Conv3x3, 1, BlockOp::Conv3x3)]).unwrap();
        assert_eq!(cell_depth(&one), 1);
        let chain = CellSpec::new(vec![
            block(0, BlockOp::Conv3x3, 1, BlockOp::Identity),
            block(2, BlockOp::Conv3x3, 2, BlockOp::MaxPool3x3),
            block(3, BlockOp::AvgPool3x3, 3, BlockOp::Identity),
        ])
        .unwrap();
        assert_eq!(cell_depth(&chain), 3);
        let flat = CellSpec::new(vec![
            block(0, BlockOp::Conv3x3, 1, BlockOp::Identity),
            block(0, BlockOp::Conv3x3, 0, BlockOp::MaxPool3x3),
            block(1, BlockOp::AvgPool3x3, 1, BlockOp::Identity),
        ])
        .unwrap();
        assert_eq!(cell_depth(&flat), 1);
        let hist = depth_distribution(&[chain, flat]);
        assert_eq!(hist.into_iter().collect::<Vec<_>>(), vec![(1, 1), (3, 1)]);
    }

    #[test]
    fn first_stage_histogram() {
        let cells = enumerate_expansions(&CellSpec::empty(), 0, 3).unwrap();
        let hist = depth_distribution(&cells);
        assert_eq!(hist.len(), 1);
        assert_eq!(hist[&1], 55);
    }

    #[test]
    fn output_blocks_skip_consumed() {
        let c = CellSpec::from_json(r#"[[0,"id",1,"id"],[0,"id",1,"id"],[2,"id",0,"id"]]"#).unwrap();
        assert_eq!(c.output_blocks(), vec![1, 2]);
    }
}
