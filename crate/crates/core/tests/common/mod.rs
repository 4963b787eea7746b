#![allow(dead_code)]

use std::io::Write;
use std::path::{Path, PathBuf};

use lassb::data::InteractionData;
use lassb::params::{kolkata_estimates, ParamSet};
use lassb::sampler::{random_structure, sample_network, SimConfig};

/// Reference rates and share mean, ν = 0.5 and φ = (5, 2, 5). EM settles
/// in a few hundred steps here; at the reference ν and φ it drifts along a
/// flat ridge for thousands.
pub fn identified_truth() -> ParamSet {
    let mut p = kolkata_estimates();
    for (r, s, phi) in [(0, 0, 5.0), (0, 1, 2.0), (1, 1, 5.0)] {
        p.set_nu(r, s, 0.5).unwrap();
        p.set_phi(r, s, phi).unwrap();
    }
    p
}

/// S = 2 network, `dyads` per dyad block, drawn from `p`.
pub fn simulate(p: &ParamSet, nodes: usize, dyads: usize, seed: u64) -> InteractionData {
    let s = random_structure(&[nodes, nodes], dyads, seed).unwrap();
    sample_network(&s, p, SimConfig::new(seed, 0)).unwrap()
}

/// Writes `edges.csv` and `blocks.csv` under `dir`.
pub fn write_dataset(dir: &Path, data: &InteractionData) -> (PathBuf, PathBuf) {
    let edges = dir.join("edges.csv");
    data.write_edges(std::fs::File::create(&edges).unwrap()).unwrap();
    let blocks = dir.join("blocks.csv");
    let mut w = std::fs::File::create(&blocks).unwrap();
    writeln!(w, "node,block").unwrap();
    let part = data.partition();
    for k in 0..part.num_nodes() {
        writeln!(w, "{},{}", part.node_id(k), part.block_label(part.block_of(k))).unwrap();
    }
    (edges, blocks)
}
