//! Goodness-of-fit statistics and simulation envelopes.

use std::collections::HashMap;
use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::data::InteractionData;
use crate::params::ParamSet;
use crate::sampler::{sample_network, SimConfig};

use super::{quantile, InferenceError};

pub const DEFAULT_CUTOFF_MAX: u64 = 6;
/// Smallest number of simulated networks accepted.
pub const MIN_GOF_REPS: usize = 100;
/// Envelope streams start here so they never coincide with bootstrap
/// replicates drawn from the same seed.
pub const GOF_STREAM_BASE: u64 = 1 << 32;

/// Integer bins given by their lower edges; the last bin is open.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bins {
    lower: Vec<u64>,
}

impl Bins {
    /// `lower` must start at 0 and increase strictly.
    pub fn new(lower: Vec<u64>) -> Result<Self, InferenceError> {
        if lower.first() != Some(&0) || lower.windows(2).any(|w| w[0] >= w[1]) {
            return Err(InferenceError::InvalidConfig(format!("bad bin edges {lower:?}")));
        }
        Ok(Self { lower })
    }

    /// One bin per value 0..=max.
    pub fn unit(max: u64) -> Self {
        Self { lower: (0..=max + 1).collect() }
    }

    /// {0, 1, 2, 3, 4, 5–8, 9–16, 17+}.
    pub fn valued_degree() -> Self {
        Self { lower: vec![0, 1, 2, 3, 4, 5, 9, 17] }
    }

    /// {0, …, 8, 9+}.
    pub fn abs_difference() -> Self {
        Self { lower: (0..=9).collect() }
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    pub fn index(&self, v: u64) -> usize {
        self.lower.partition_point(|&e| e <= v) - 1
    }

    pub fn labels(&self) -> Vec<String> {
        let n = self.lower.len();
        (0..n)
            .map(|k| {
                let lo = self.lower[k];
                match self.lower.get(k + 1) {
                    None => format!("{lo}+"),
                    Some(&next) if next == lo + 1 => lo.to_string(),
                    Some(&next) => format!("{lo}-{}", next - 1),
                }
            })
            .collect()
    }

    fn histogram(&self, values: &[u64]) -> Vec<u64> {
        let mut h = vec![0; self.len()];
        for &v in values {
            h[self.index(v)] += 1;
        }
        h
    }
}

/// Raw statistics of one network. Node statistics cover the nodes that
/// belong to at least one dyad, in node-index order; degrees count only
/// arcs of the listed dyads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GofStats {
    pub binary_outdegree: Vec<u64>,
    pub binary_indegree: Vec<u64>,
    pub valued_outdegree: Vec<u64>,
    pub valued_indegree: Vec<u64>,
    /// |x_ij − x_ji| per dyad.
    pub abs_difference: Vec<u64>,
    /// Triangles at level c = 0..=cutoff_max: triples whose three dyads are
    /// all listed and all have x_{i∧j} > c.
    pub triangles: Vec<u64>,
    /// Triples whose three dyads are all listed.
    pub triads: u64,
}

/// Nodes touched by a dyad, and for each node its neighbours with the dyad
/// total, sorted by neighbour index.
fn dyad_graph(data: &InteractionData) -> (Vec<usize>, HashMap<usize, Vec<(usize, u64)>>) {
    let mut adj: HashMap<usize, Vec<(usize, u64)>> = HashMap::new();
    for d in data.dyads() {
        adj.entry(d.i).or_default().push((d.j, d.total()));
        adj.entry(d.j).or_default().push((d.i, d.total()));
    }
    for list in adj.values_mut() {
        list.sort_unstable();
    }
    let mut nodes: Vec<usize> = adj.keys().copied().collect();
    nodes.sort_unstable();
    (nodes, adj)
}

pub fn gof_stats(data: &InteractionData, cutoff_max: u64) -> GofStats {
    let (nodes, adj) = dyad_graph(data);
    let pos: HashMap<usize, usize> = nodes.iter().enumerate().map(|(k, &v)| (v, k)).collect();
    let n = nodes.len();
    let (mut bout, mut bin, mut vout, mut vin) = (vec![0; n], vec![0; n], vec![0; n], vec![0; n]);
    let mut abs_difference = Vec::with_capacity(data.len());
    for d in data.dyads() {
        let (i, j) = (pos[&d.i], pos[&d.j]);
        bout[i] += u64::from(d.x_ij > 0);
        bin[j] += u64::from(d.x_ij > 0);
        bout[j] += u64::from(d.x_ji > 0);
        bin[i] += u64::from(d.x_ji > 0);
        vout[i] += d.x_ij;
        vin[j] += d.x_ij;
        vout[j] += d.x_ji;
        vin[i] += d.x_ji;
        abs_difference.push(d.x_ij.abs_diff(d.x_ji));
    }

    // each triangle once, from its smallest node through increasing neighbours
    let levels = cutoff_max as usize + 1;
    let mut triangles = vec![0u64; levels];
    let mut triads = 0u64;
    for &a in &nodes {
        let na = &adj[&a];
        for (ib, &(b, xab)) in na.iter().enumerate() {
            if b <= a {
                continue;
            }
            let nb = &adj[&b];
            for &(c, xac) in &na[ib + 1..] {
                if let Ok(k) = nb.binary_search_by_key(&c, |&(v, _)| v) {
                    triads += 1;
                    let m = xab.min(xac).min(nb[k].1);
                    for count in triangles.iter_mut().take((m as usize).min(levels)) {
                        *count += 1;
                    }
                }
            }
        }
    }
    GofStats {
        binary_outdegree: bout,
        binary_indegree: bin,
        valued_outdegree: vout,
        valued_indegree: vin,
        abs_difference,
        triangles,
        triads,
    }
}

/// ln((k + 0.5) / (n − k + 0.5)), the log-odds of (k + 0.5)/(n + 1).
pub fn log_odds(k: u64, n: u64) -> f64 {
    let p = (k as f64 + 0.5) / (n as f64 + 1.0);
    (p / (1.0 - p)).ln()
}

/// Bin layout shared by the observed network and every simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct GofLayout {
    pub binary: Bins,
    pub valued: Bins,
    pub abs_difference: Bins,
    pub cutoff_max: u64,
}

impl GofLayout {
    /// Binary degree bins run to the largest number of dyads on one node.
    pub fn for_structure(data: &InteractionData, cutoff_max: u64) -> Self {
        let (_, adj) = dyad_graph(data);
        let max_deg = adj.values().map(|l| l.len() as u64).max().unwrap_or(0);
        Self {
            binary: Bins::unit(max_deg),
            valued: Bins::valued_degree(),
            abs_difference: Bins::abs_difference(),
            cutoff_max,
        }
    }

    /// (statistic, bin label, count, total) for every bin.
    fn counts(&self, s: &GofStats) -> Vec<(&'static str, String, u64, u64)> {
        let mut out = Vec::new();
        let nodes = s.binary_outdegree.len() as u64;
        let dyads = s.abs_difference.len() as u64;
        let mut add = |name: &'static str, bins: &Bins, values: &[u64], total: u64| {
            for (label, count) in bins.labels().into_iter().zip(bins.histogram(values)) {
                out.push((name, label, count, total));
            }
        };
        add("binary_outdegree", &self.binary, &s.binary_outdegree, nodes);
        add("binary_indegree", &self.binary, &s.binary_indegree, nodes);
        add("valued_outdegree", &self.valued, &s.valued_outdegree, nodes);
        add("valued_indegree", &self.valued, &s.valued_indegree, nodes);
        add("abs_difference", &self.abs_difference, &s.abs_difference, dyads);
        for (c, &t) in s.triangles.iter().enumerate() {
            out.push(("triangles", c.to_string(), t, s.triads));
        }
        out
    }
}

/// Observed value and simulated envelope for one bin. `observed` and the
/// quantiles are log-odds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GofRow {
    pub statistic: String,
    pub bin: String,
    pub observed_proportion: f64,
    pub observed: f64,
    pub q025: f64,
    pub q50: f64,
    pub q975: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GofReport {
    pub reps: usize,
    pub rows: Vec<GofRow>,
}

/// Simulates `reps` networks from `p` on the dyads of `data` and reports,
/// per bin, the observed log-odds and the 2.5/50/97.5% quantiles of the
/// simulated log-odds. Network `m` uses stream `(seed, GOF_STREAM_BASE + m)`.
pub fn gof_envelope(
    data: &InteractionData,
    p: &ParamSet,
    reps: usize,
    seed: u64,
    cutoff_max: u64,
) -> Result<GofReport, InferenceError> {
    if reps < MIN_GOF_REPS {
        return Err(InferenceError::InvalidConfig(format!(
            "at least {MIN_GOF_REPS} simulated networks needed, got {reps}"
        )));
    }
    let layout = GofLayout::for_structure(data, cutoff_max);
    let observed = layout.counts(&gof_stats(data, cutoff_max));
    let sims: Vec<Vec<f64>> = (0..reps as u64)
        .into_par_iter()
        .map(|m| {
            let net = sample_network(data, p, SimConfig::new(seed, GOF_STREAM_BASE + m))?;
            Ok(layout.counts(&gof_stats(&net, cutoff_max)).iter().map(|&(_, _, k, n)| log_odds(k, n)).collect())
        })
        .collect::<Result<_, InferenceError>>()?;
    let rows = observed
        .into_iter()
        .enumerate()
        .map(|(b, (statistic, bin, k, n))| {
            let mut col: Vec<f64> = sims.iter().map(|s| s[b]).collect();
            col.sort_by(f64::total_cmp);
            GofRow {
                statistic: statistic.to_string(),
                bin,
                observed_proportion: if n == 0 { 0.0 } else { k as f64 / n as f64 },
                observed: log_odds(k, n),
                q025: quantile(&col, 0.025),
                q50: quantile(&col, 0.5),
                q975: quantile(&col, 0.975),
            }
        })
        .collect();
    Ok(GofReport { reps, rows })
}

impl GofReport {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), InferenceError> {
        let mut w = csv::Writer::from_writer(writer);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush().map_err(InferenceError::Io)?;
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({ "reps": self.reps, "rows": self.rows })
    }

    /// Share of bins whose observed log-odds lie inside [q025, q975].
    pub fn coverage(&self) -> f64 {
        let inside = self.rows.iter().filter(|r| r.q025 <= r.observed && r.observed <= r.q975).count();
        inside as f64 / self.rows.len() as f64
    }
}
