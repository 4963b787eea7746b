//! Block partitions and canonicalized dyad data.
//!
//! Dyads are stored once, oriented so that the `(i, j)` slot holds the arc
//! from the lower-indexed block to the higher one; inside a block the node
//! with the lexicographically smaller id comes first.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("expected header `{expected}`, found `{found}`")]
    Header { expected: &'static str, found: String },
    #[error("no nodes")]
    NoNodes,
    #[error("duplicate node row for `{0}`")]
    DuplicateNode(String),
    #[error("conflicting block assignment for `{node}`: `{first}` and `{second}`")]
    ConflictingBlock { node: String, first: String, second: String },
    #[error("block ordering does not list block `{0}`")]
    UnorderedBlock(String),
    #[error("block ordering lists `{0}` which has no nodes")]
    EmptyOrderedBlock(String),
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("negative count {count} on arc {src} -> {dst}")]
    NegativeCount { src: String, dst: String, count: i64 },
    #[error("invalid count `{value}` on arc {src} -> {dst}")]
    BadCount { src: String, dst: String, value: String },
    #[error("self-loop on node `{0}`")]
    SelfLoop(String),
    #[error("dyad {0} listed twice")]
    DuplicateDyad(String),
    #[error("count vector has length {got}, expected {expected}")]
    CountLength { got: usize, expected: usize },
}

/// Assignment of nodes to blocks `0..S`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockPartition {
    node_ids: Vec<String>,
    block_of: Vec<usize>,
    block_labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl BlockPartition {
    /// Builds a partition from `(node, block label)` rows. Blocks are numbered
    /// by first appearance unless `order` lists the labels explicitly.
    pub fn from_rows<I, N, B>(rows: I, order: Option<&[String]>) -> Result<Self, DataError>
    where
        I: IntoIterator<Item = (N, B)>,
        N: Into<String>,
        B: Into<String>,
    {
        let mut node_ids = Vec::new();
        let mut labels_of_nodes: Vec<String> = Vec::new();
        let mut index = HashMap::new();
        let mut first_seen: Vec<String> = Vec::new();
        for (node, block) in rows {
            let node = node.into();
            let block = block.into();
            if let Some(&k) = index.get(&node) {
                let first: &String = &labels_of_nodes[k];
                if *first == block {
                    return Err(DataError::DuplicateNode(node));
                }
                return Err(DataError::ConflictingBlock { node, first: first.clone(), second: block });
            }
            if !first_seen.contains(&block) {
                first_seen.push(block.clone());
            }
            index.insert(node.clone(), node_ids.len());
            node_ids.push(node);
            labels_of_nodes.push(block);
        }
        if node_ids.is_empty() {
            return Err(DataError::NoNodes);
        }
        let block_labels = match order {
            None => first_seen,
            Some(order) => {
                for label in &first_seen {
                    if !order.contains(label) {
                        return Err(DataError::UnorderedBlock(label.clone()));
                    }
                }
                for label in order {
                    if !first_seen.contains(label) {
                        return Err(DataError::EmptyOrderedBlock(label.clone()));
                    }
                }
                order.to_vec()
            }
        };
        let block_of =
            labels_of_nodes.iter().map(|l| block_labels.iter().position(|b| b == l).expect("label listed")).collect();
        Ok(Self { node_ids, block_of, block_labels, index })
    }

    pub fn from_reader<R: Read>(reader: R, order: Option<&[String]>) -> Result<Self, DataError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).comment(Some(b'#')).from_reader(reader);
        check_header(&mut rdr, &["node", "block"], "node,block")?;
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            rows.push((rec[0].to_string(), rec[1].to_string()));
        }
        Self::from_rows(rows, order)
    }

    pub fn num_blocks(&self) -> usize {
        self.block_labels.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.node_ids.len()
    }

    pub fn node_id(&self, node: usize) -> &str {
        &self.node_ids[node]
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Zero-based block of a node index.
    pub fn block_of(&self, node: usize) -> usize {
        self.block_of[node]
    }

    pub fn block_of_id(&self, id: &str) -> Option<usize> {
        self.node_index(id).map(|k| self.block_of[k])
    }

    pub fn block_labels(&self) -> &[String] {
        &self.block_labels
    }

    pub fn block_label(&self, block: usize) -> &str {
        &self.block_labels[block]
    }
}

fn check_header<R: Read>(rdr: &mut csv::Reader<R>, want: &[&str], expected: &'static str) -> Result<(), DataError> {
    let headers = rdr.headers()?;
    let found: Vec<&str> = headers.iter().collect();
    if found != want {
        return Err(DataError::Header { expected, found: found.join(",") });
    }
    Ok(())
}

fn open(path: &Path) -> Result<std::fs::File, DataError> {
    std::fs::File::open(path).map_err(|source| DataError::Io { path: path.display().to_string(), source })
}

/// Reads a two-column `node,block` CSV; lines starting with `#` are skipped.
pub fn load_blocks(path: impl AsRef<Path>) -> Result<BlockPartition, DataError> {
    BlockPartition::from_reader(open(path.as_ref())?, None)
}

/// Like [`load_blocks`], with block indices fixed by `order`.
pub fn load_blocks_with_order(path: impl AsRef<Path>, order: &[String]) -> Result<BlockPartition, DataError> {
    BlockPartition::from_reader(open(path.as_ref())?, Some(order))
}

/// Ordered pair of blocks `(r, s)` an arc runs between.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ArcBlock(pub usize, pub usize);

impl ArcBlock {
    pub fn reversed(self) -> Self {
        ArcBlock(self.1, self.0)
    }

    pub fn dyad_block(self) -> DyadBlock {
        DyadBlock::new(self.0, self.1)
    }
}

/// Unordered pair of blocks `r ∧ s`, stored with `r <= s`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DyadBlock(usize, usize);

impl DyadBlock {
    pub fn new(r: usize, s: usize) -> Self {
        if r <= s {
            DyadBlock(r, s)
        } else {
            DyadBlock(s, r)
        }
    }

    pub fn low(self) -> usize {
        self.0
    }

    pub fn high(self) -> usize {
        self.1
    }

    /// All dyad blocks for `S` blocks, in `(r, s)` lexicographic order.
    pub fn all(num_blocks: usize) -> impl Iterator<Item = DyadBlock> {
        (0..num_blocks).flat_map(move |r| (r..num_blocks).map(move |s| DyadBlock(r, s)))
    }
}

impl fmt::Display for DyadBlock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}^{}", self.0 + 1, self.1 + 1)
    }
}

/// One dyad in canonical orientation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dyad {
    pub i: usize,
    pub j: usize,
    pub r: usize,
    pub s: usize,
    pub x_ij: u64,
    pub x_ji: u64,
}

impl Dyad {
    pub fn total(&self) -> u64 {
        self.x_ij + self.x_ji
    }

    pub fn arc_block(&self) -> ArcBlock {
        ArcBlock(self.r, self.s)
    }

    pub fn dyad_block(&self) -> DyadBlock {
        DyadBlock::new(self.r, self.s)
    }
}

/// Canonicalized interaction counts over a fixed set of dyads.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionData {
    partition: Arc<BlockPartition>,
    dyads: Vec<Dyad>,
}

impl InteractionData {
    /// Aggregates `(src, dst, count)` arcs into dyads. Repeated arcs are
    /// summed; a dyad seen in one direction only gets 0 for the other.
    pub fn from_arcs<I, S>(partition: Arc<BlockPartition>, arcs: I) -> Result<Self, DataError>
    where
        I: IntoIterator<Item = (S, S, i64)>,
        S: AsRef<str>,
    {
        let mut counts: BTreeMap<(usize, usize), (u64, u64)> = BTreeMap::new();
        for (src, dst, count) in arcs {
            let (src, dst) = (src.as_ref(), dst.as_ref());
            let a = partition.node_index(src).ok_or_else(|| DataError::UnknownNode(src.into()))?;
            let b = partition.node_index(dst).ok_or_else(|| DataError::UnknownNode(dst.into()))?;
            if a == b {
                return Err(DataError::SelfLoop(src.into()));
            }
            if count < 0 {
                return Err(DataError::NegativeCount { src: src.into(), dst: dst.into(), count });
            }
            let (i, j) = orient(&partition, a, b);
            let slot = counts.entry((i, j)).or_insert((0, 0));
            if (i, j) == (a, b) {
                slot.0 += count as u64;
            } else {
                slot.1 += count as u64;
            }
        }
        let mut dyads: Vec<Dyad> = counts
            .into_iter()
            .map(|((i, j), (x_ij, x_ji))| Dyad { i, j, r: partition.block_of(i), s: partition.block_of(j), x_ij, x_ji })
            .collect();
        dyads.sort_by_key(|d| (d.r, d.s, d.i, d.j));
        Ok(Self { partition, dyads })
    }

    pub fn from_reader<R: Read>(reader: R, partition: Arc<BlockPartition>) -> Result<Self, DataError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).comment(Some(b'#')).from_reader(reader);
        check_header(&mut rdr, &["src", "dst", "count"], "src,dst,count")?;
        let mut arcs = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let count: i64 = rec[2].parse().map_err(|_| DataError::BadCount {
                src: rec[0].to_string(),
                dst: rec[1].to_string(),
                value: rec[2].to_string(),
            })?;
            arcs.push((rec[0].to_string(), rec[1].to_string(), count));
        }
        Self::from_arcs(partition, arcs)
    }

    pub fn partition(&self) -> &Arc<BlockPartition> {
        &self.partition
    }

    pub fn num_blocks(&self) -> usize {
        self.partition.num_blocks()
    }

    pub fn dyads(&self) -> &[Dyad] {
        &self.dyads
    }

    pub fn len(&self) -> usize {
        self.dyads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dyads.is_empty()
    }

    /// Number of stored dyads per unordered block pair.
    pub fn dyad_block_sizes(&self) -> BTreeMap<DyadBlock, usize> {
        let mut sizes = BTreeMap::new();
        for d in &self.dyads {
            *sizes.entry(d.dyad_block()).or_insert(0) += 1;
        }
        sizes
    }

    /// Same dyads with new `(x_ij, x_ji)` counts, in dyad order.
    pub fn with_counts(&self, counts: &[(u64, u64)]) -> Result<Self, DataError> {
        if counts.len() != self.dyads.len() {
            return Err(DataError::CountLength { got: counts.len(), expected: self.dyads.len() });
        }
        let dyads = self.dyads.iter().zip(counts).map(|(d, &(x_ij, x_ji))| Dyad { x_ij, x_ji, ..*d }).collect();
        Ok(Self { partition: Arc::clone(&self.partition), dyads })
    }

    /// Dyad label `i|j` with node ids.
    pub fn dyad_label(&self, d: &Dyad) -> String {
        format!("{}|{}", self.partition.node_id(d.i), self.partition.node_id(d.j))
    }

    /// Writes both arcs of every dyad (zero counts included) as
    /// `src,dst,count`, so the dyad set survives a reload.
    pub fn write_edges<W: Write>(&self, writer: W) -> Result<(), DataError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["src", "dst", "count"])?;
        for d in &self.dyads {
            let (a, b) = (self.partition.node_id(d.i), self.partition.node_id(d.j));
            w.write_record([a, b, &d.x_ij.to_string()])?;
            w.write_record([b, a, &d.x_ji.to_string()])?;
        }
        w.flush().map_err(|source| DataError::Io { path: "<writer>".into(), source })?;
        Ok(())
    }
}

fn orient(partition: &BlockPartition, a: usize, b: usize) -> (usize, usize) {
    let (ra, rb) = (partition.block_of(a), partition.block_of(b));
    if ra < rb || (ra == rb && partition.node_id(a) < partition.node_id(b)) {
        (a, b)
    } else {
        (b, a)
    }
}

/// Reads a three-column `src,dst,count` CSV against a partition; lines
/// starting with `#` are skipped.
pub fn load_edges(path: impl AsRef<Path>, blocks: Arc<BlockPartition>) -> Result<InteractionData, DataError> {
    InteractionData::from_reader(open(path.as_ref())?, blocks)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn partition(csv: &str) -> Arc<BlockPartition> {
        Arc::new(BlockPartition::from_reader(csv.as_bytes(), None).unwrap())
    }

    #[test]
    fn blocks_by_first_appearance() {
        let p = partition("node,block\nu1,F\nu2,M\nu3,F\n");
        assert_eq!(p.num_blocks(), 2);
        assert_eq!(p.block_of_id("u1"), Some(0));
        assert_eq!(p.block_of_id("u2"), Some(1));
        assert_eq!(p.block_of_id("u3"), Some(0));
        assert_eq!(p.block_labels(), ["F", "M"]);
    }

    #[test]
    fn explicit_block_order() {
        let order = vec!["M".to_string(), "F".to_string()];
        let p = BlockPartition::from_reader("node,block\nu1,F\nu2,M\n".as_bytes(), Some(&order)).unwrap();
        assert_eq!(p.block_of_id("u2"), Some(0));
        let bad = vec!["F".to_string()];
        assert!(matches!(
            BlockPartition::from_reader("node,block\nu1,F\nu2,M\n".as_bytes(), Some(&bad)),
            Err(DataError::UnorderedBlock(_))
        ));
    }

    #[test]
    fn block_errors() {
        let err = BlockPartition::from_reader("node,block\nu1,F\nu1,M\n".as_bytes(), None).unwrap_err();
        assert!(err.to_string().contains("conflicting block assignment"), "{err}");
        let err = BlockPartition::from_reader("node,block\nu1,F\nu1,F\n".as_bytes(), None).unwrap_err();
        assert!(matches!(err, DataError::DuplicateNode(_)));
        let err = BlockPartition::from_reader("node,block\n".as_bytes(), None).unwrap_err();
        assert_eq!(err.to_string(), "no nodes");
        let err = BlockPartition::from_reader("id,group\nu1,F\n".as_bytes(), None).unwrap_err();
        assert!(matches!(err, DataError::Header { .. }));
    }

    #[test]
    fn orientation_across_blocks() {
        let p = partition("node,block\nu1,F\nu2,M\n");
        let data = InteractionData::from_reader("src,dst,count\nu2,u1,5\nu1,u2,2\n".as_bytes(), p).unwrap();
        assert_eq!(data.len(), 1);
        let d = data.dyads()[0];
        assert_eq!((d.x_ij, d.x_ji), (2, 5));
        assert_eq!((d.r, d.s), (0, 1));
    }

    #[test]
    fn missing_direction_defaults_to_zero() {
        let p = partition("node,block\nu1,F\nu3,F\n");
        let data = InteractionData::from_reader("src,dst,count\nu3,u1,4\n".as_bytes(), p).unwrap();
        let d = data.dyads()[0];
        assert_eq!(data.partition().node_id(d.i), "u1");
        assert_eq!((d.x_ij, d.x_ji), (0, 4));
    }

    #[test]
    fn duplicate_rows_are_summed() {
        let p = partition("node,block\na,F\nb,F\n");
        let data = InteractionData::from_reader("src,dst,count\na,b,1\na,b,1\nb,a,3\na,b,1\n".as_bytes(), p).unwrap();
        assert_eq!((data.dyads()[0].x_ij, data.dyads()[0].x_ji), (3, 3));
    }

    #[test]
    fn edge_errors() {
        let p = partition("node,block\nu1,F\nu2,M\n");
        let err = InteractionData::from_reader("src,dst,count\nu1,u1,3\n".as_bytes(), p.clone()).unwrap_err();
        assert!(err.to_string().contains("self-loop"));
        let err = InteractionData::from_reader("src,dst,count\nu1,zz,3\n".as_bytes(), p.clone()).unwrap_err();
        assert!(matches!(err, DataError::UnknownNode(_)));
        let err = InteractionData::from_reader("src,dst,count\nu1,u2,-3\n".as_bytes(), p.clone()).unwrap_err();
        assert!(matches!(err, DataError::NegativeCount { .. }));
        let err = InteractionData::from_reader("src,dst,count\nu1,u2,2.5\n".as_bytes(), p).unwrap_err();
        assert!(matches!(err, DataError::BadCount { .. }));
    }

    #[test]
    fn dyad_block_sizes_count_stored_dyads() {
        let p = partition("node,block\nu1,F\nu2,M\nu3,F\n");
        let data = InteractionData::from_reader("src,dst,count\nu1,u2,1\n".as_bytes(), p.clone()).unwrap();
        let sizes = data.dyad_block_sizes();
        assert_eq!(sizes.len(), 1);
        assert_eq!(sizes[&DyadBlock::new(1, 0)], 1);
        let empty = InteractionData::from_arcs(p, Vec::<(String, String, i64)>::new()).unwrap();
        assert!(empty.dyad_block_sizes().is_empty());
    }

    #[test]
    fn kolkata_block_structure() {
        // 786 mixed, 33 female-female, 156 male-male dyads
        let mut rows = Vec::new();
        for k in 0..120 {
            rows.push((format!("f{k:03}"), "F".to_string()));
        }
        for k in 0..120 {
            rows.push((format!("m{k:03}"), "M".to_string()));
        }
        let p = Arc::new(BlockPartition::from_rows(rows, None).unwrap());
        let mut arcs = Vec::new();
        let mut add = |prefix_a: &str, prefix_b: &str, n: usize, same: bool| {
            let mut made = 0;
            'outer: for a in 0..120 {
                for b in 0..120 {
                    if same && b <= a {
                        continue;
                    }
                    if made == n {
                        break 'outer;
                    }
                    arcs.push((format!("{prefix_a}{a:03}"), format!("{prefix_b}{b:03}"), 1i64));
                    made += 1;
                }
            }
        };
        add("f", "m", 786, false);
        add("f", "f", 33, true);
        add("m", "m", 156, true);
        let data = InteractionData::from_arcs(p, arcs).unwrap();
        let sizes = data.dyad_block_sizes();
        assert_eq!(sizes[&DyadBlock::new(0, 1)], 786);
        assert_eq!(sizes[&DyadBlock::new(0, 0)], 33);
        assert_eq!(sizes[&DyadBlock::new(1, 1)], 156);
        assert_eq!(sizes.values().sum::<usize>(), data.len());
    }
}
