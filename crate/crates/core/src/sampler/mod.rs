//! Simulation of count networks from a fitted parameter set.

pub mod variates;

use std::sync::Arc;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{BlockPartition, DataError, DyadBlock, InteractionData};
use crate::params::{ParamError, ParamSet};
use variates::{beta_variate, ln_gamma_variate};

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("empty dyad structure")]
    EmptyStructure,
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("Poisson rate {rate} is not representable")]
    Rate { rate: f64 },
    #[error("block {block} has {nodes} nodes, too few for {dyads} dyads in {pair}")]
    TooFewNodes { block: usize, nodes: usize, dyads: usize, pair: String },
}

/// Seed and stream key; the pair fixes the sampled network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimConfig {
    pub seed: u64,
    pub replicate_id: u64,
}

impl SimConfig {
    pub fn new(seed: u64, replicate_id: u64) -> Self {
        Self { seed, replicate_id }
    }

    pub fn rng(&self) -> ChaCha20Rng {
        let mut rng = ChaCha20Rng::seed_from_u64(self.seed);
        rng.set_stream(self.replicate_id);
        rng
    }
}

/// Latent draws for one dyad: relative dyad strength and arc share.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Latent {
    pub gamma: f64,
    pub rho: f64,
    pub rho_complement: f64,
}

fn draw_latent<R: rand::Rng>(nu: f64, pi: f64, phi: f64, rng: &mut R) -> Latent {
    let gamma = (ln_gamma_variate(nu, rng) - nu.ln()).exp();
    let (rho, rho_complement) = beta_variate(phi * pi, phi * (1.0 - pi), rng);
    Latent { gamma, rho, rho_complement }
}

fn poisson<R: rand::Rng>(rate: f64, rng: &mut R) -> Result<u64, SampleError> {
    if rate == 0.0 {
        return Ok(0);
    }
    let law = Poisson::new(rate).map_err(|_| SampleError::Rate { rate })?;
    let x: f64 = law.sample(rng);
    Ok(x as u64)
}

/// Draws latent variables for every dyad of `structure` (counts ignored).
pub fn sample_latents(structure: &InteractionData, p: &ParamSet, cfg: SimConfig) -> Result<Vec<Latent>, SampleError> {
    p.validate()?;
    let mut rng = cfg.rng();
    Ok(structure
        .dyads()
        .iter()
        .map(|d| draw_latent(p.nu(d.r, d.s), p.pi(d.r, d.s), p.phi(d.r, d.s), &mut rng))
        .collect())
}

/// Resamples the counts of every dyad in `structure` from `p`.
///
/// Per dyad, in dyad order: γ, then ρ, then `X_ij`, then `X_ji`, all from
/// one ChaCha20 stream keyed by `(seed, replicate_id)`.
pub fn sample_network(
    structure: &InteractionData,
    p: &ParamSet,
    cfg: SimConfig,
) -> Result<InteractionData, SampleError> {
    if structure.is_empty() {
        return Err(SampleError::EmptyStructure);
    }
    p.validate()?;
    if p.num_blocks() != structure.num_blocks() {
        return Err(ParamError::WrongLength { expected: structure.num_blocks(), got: p.num_blocks() }.into());
    }
    let mut rng = cfg.rng();
    let mut counts = Vec::with_capacity(structure.len());
    for d in structure.dyads() {
        let l = draw_latent(p.nu(d.r, d.s), p.pi(d.r, d.s), p.phi(d.r, d.s), &mut rng);
        let x_ij = poisson(p.tau(d.r, d.s) * l.rho * l.gamma, &mut rng)?;
        let x_ji = poisson(p.tau(d.s, d.r) * l.rho_complement * l.gamma, &mut rng)?;
        counts.push((x_ij, x_ji));
    }
    Ok(structure.with_counts(&counts)?)
}

/// A random dyad structure with `block_sizes[r]` nodes in block `r` and
/// `dyads_per_block` dyads in every dyad-block, all counts zero.
///
/// Nodes are named `n{k}` and blocks `B{r}` (1-based).
pub fn random_structure(
    block_sizes: &[usize],
    dyads_per_block: usize,
    seed: u64,
) -> Result<InteractionData, SampleError> {
    let mut rows = Vec::new();
    let mut members: Vec<Vec<String>> = Vec::new();
    for (r, &n) in block_sizes.iter().enumerate() {
        let ids: Vec<String> = (0..n).map(|k| format!("n{}", rows.len() + k + 1)).collect();
        rows.extend(ids.iter().map(|id| (id.clone(), format!("B{}", r + 1))));
        members.push(ids);
    }
    let partition = Arc::new(BlockPartition::from_rows(rows, None)?);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut arcs = Vec::new();
    for b in DyadBlock::all(block_sizes.len()) {
        let (r, s) = (b.low(), b.high());
        let (nr, ns) = (members[r].len(), members[s].len());
        let pairs = if r == s { nr * nr.saturating_sub(1) / 2 } else { nr * ns };
        if pairs < dyads_per_block {
            return Err(SampleError::TooFewNodes {
                block: if r == s || nr <= ns { r } else { s },
                nodes: nr.min(ns),
                dyads: dyads_per_block,
                pair: b.to_string(),
            });
        }
        let mut chosen = index::sample(&mut rng, pairs, dyads_per_block).into_vec();
        chosen.sort_unstable();
        for k in chosen {
            let (i, j) = if r == s { unrank_pair(k) } else { (k / ns, k % ns) };
            arcs.push((members[r][i].clone(), members[s][j].clone(), 0i64));
        }
    }
    Ok(InteractionData::from_arcs(partition, arcs)?)
}

/// k-th pair (i, j), i < j, in the order (0,1), (0,2), (1,2), (0,3), ...
fn unrank_pair(k: usize) -> (usize, usize) {
    let mut j = ((((8 * k + 1) as f64).sqrt() + 1.0) / 2.0).floor() as usize;
    while j * (j - 1) / 2 > k {
        j -= 1;
    }
    while (j + 1) * j / 2 <= k {
        j += 1;
    }
    (k - j * (j - 1) / 2, j)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_block(dyads: usize) -> InteractionData {
        random_structure(&[400, 400], dyads, 3).unwrap()
    }

    fn mean_var(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
        let n = xs.clone().count() as f64;
        let m = xs.clone().sum::<f64>() / n;
        (m, xs.map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
    }

    #[test]
    fn unrank_enumerates_pairs() {
        let mut k = 0;
        for j in 1..60 {
            for i in 0..j {
                assert_eq!(unrank_pair(k), (i, j));
                k += 1;
            }
        }
    }

    #[test]
    fn structure_has_requested_shape() {
        let d = random_structure(&[30, 20, 10], 40, 1).unwrap();
        assert_eq!(d.len(), 6 * 40);
        assert!(d.dyad_block_sizes().values().all(|&n| n == 40));
        assert!(random_structure(&[3, 5], 4, 1).is_err());
    }

    #[test]
    fn degenerate_latents_give_plain_poisson() {
        let s = two_block(100_000 / 3 + 1);
        let mut p = ParamSet::new(2).unwrap();
        for r in 0..2 {
            for q in r..2 {
                p.set_nu(r, q, 1e13).unwrap();
                p.set_phi(r, q, 1e13).unwrap();
            }
        }
        p.set_theta(2.0).unwrap();
        let net = sample_network(&s, &p, SimConfig::new(1, 0)).unwrap();
        let xs = net.dyads().iter().map(|d| d.x_ij as f64);
        let (m, _) = mean_var(xs);
        // τ = 2 everywhere with π = 0.5, so X_ij ~ Poisson(1)
        let se = (1.0 / net.len() as f64).sqrt();
        assert!((m - 1.0).abs() < 3.0 * se, "{m}");
    }

    #[test]
    fn latent_variances() {
        let s = random_structure(&[500], 100_000, 2).unwrap();
        let mut p = ParamSet::new(1).unwrap();
        p.set_nu(0, 0, 0.5).unwrap();
        p.set_phi(0, 0, 12.62).unwrap();
        let lat = sample_latents(&s, &p, SimConfig::new(4, 0)).unwrap();
        let (_, vg) = mean_var(lat.iter().map(|l| l.gamma));
        assert!((vg / 2.0 - 1.0).abs() < 0.05, "{vg}");
        // within-block share has mean 0.5; Var = 0.25 / 13.62
        let (_, vr) = mean_var(lat.iter().map(|l| l.rho));
        assert!((vr / (0.25 / 13.62) - 1.0).abs() < 0.05, "{vr}");
    }

    #[test]
    fn share_variance_off_diagonal() {
        let s = random_structure(&[460, 460], 100_000, 5).unwrap();
        let mut p = ParamSet::new(2).unwrap();
        p.set_pi(0, 1, 0.27).unwrap();
        p.set_phi(0, 1, 12.62).unwrap();
        let lat = sample_latents(&s, &p, SimConfig::new(4, 1)).unwrap();
        let between = s.dyads().iter().zip(&lat).filter(|(d, _)| d.r != d.s).map(|(_, l)| l.rho);
        let (m, v) = mean_var(between);
        assert!((m - 0.27).abs() < 0.005);
        let want = 0.27 * 0.73 / 13.62;
        assert!((v / want - 1.0).abs() < 0.05, "{v} {want}");
    }

    #[test]
    fn marginal_means_and_overdispersion() {
        let s = two_block(2000);
        let p = crate::params::kolkata_estimates();
        let mut p = p;
        p.set_phi(0, 0, 50.0).unwrap();
        let mut sum = [[0.0f64; 2]; 2];
        let mut sq = [[0.0f64; 2]; 2];
        let mut n = [[0.0f64; 2]; 2];
        for rep in 0..20 {
            let net = sample_network(&s, &p, SimConfig::new(8, rep)).unwrap();
            for d in net.dyads() {
                for (a, b, x) in [(d.r, d.s, d.x_ij), (d.s, d.r, d.x_ji)] {
                    sum[a][b] += x as f64;
                    sq[a][b] += (x * x) as f64;
                    n[a][b] += 1.0;
                }
            }
        }
        for r in 0..2 {
            for q in 0..2 {
                let mean = sum[r][q] / n[r][q];
                let var = sq[r][q] / n[r][q] - mean * mean;
                let m = p.mean_interaction(r, q);
                // X has variance m + m² (1/ν + ...) so a loose 5 σ band
                let se = (var / n[r][q]).sqrt();
                assert!((mean - m).abs() < 5.0 * se, "{r}{q} {mean} {m}");
                assert!(var > mean);
            }
        }
    }

    #[test]
    fn empty_structure_rejected() {
        let s = two_block(10);
        let partition = s.partition().clone();
        let empty = InteractionData::from_arcs(partition, Vec::<(String, String, i64)>::new()).unwrap();
        let p = ParamSet::new(2).unwrap();
        assert!(matches!(sample_network(&empty, &p, SimConfig::new(0, 0)), Err(SampleError::EmptyStructure)));
        assert!(sample_network(&s, &ParamSet::new(3).unwrap(), SimConfig::new(0, 0)).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn same_key_same_network(seed in any::<u64>(), rep in 0u64..1000) {
            let s = two_block(50);
            let p = crate::params::kolkata_estimates();
            let a = sample_network(&s, &p, SimConfig::new(seed, rep)).unwrap();
            let b = sample_network(&s, &p, SimConfig::new(seed, rep)).unwrap();
            prop_assert_eq!(a.dyads(), b.dyads());
            let c = sample_network(&s, &p, SimConfig::new(seed, rep + 1)).unwrap();
            prop_assert_ne!(a.dyads(), c.dyads());
        }
    }
}
