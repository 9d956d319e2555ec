//! Synthetic corpora with a planted cluster-level Markov transition structure.
//!
//! Clusters come in groups of `group_size` ("twins" when 2). Generation labels
//! depend only on the group, so telling twins apart needs either their small
//! feature offset or the transition context in which they occur.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::corpus::{Corpus, Item, Session};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum TransitionSpec {
    /// `p_main` mass on cluster `c + shift (mod L)`, the rest spread evenly.
    Planted { p_main: f64, shift: usize },
    Identity,
    /// Explicit row-stochastic matrix.
    Matrix(Vec<Vec<f64>>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub clusters: usize,
    pub items_per_cluster: usize,
    pub sessions: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub feature_dim: usize,
    /// Per-coordinate feature noise around the cluster centroid.
    pub sigma: f64,
    /// Clusters sharing one group centroid and one set of labels.
    pub group_size: usize,
    /// Per-coordinate scale of a cluster's offset from its group centroid.
    pub twin_offset: f64,
    pub cat_classes: usize,
    pub transition: TransitionSpec,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            clusters: 8,
            items_per_cluster: 40,
            sessions: 5000,
            min_len: 2,
            max_len: 6,
            feature_dim: 32,
            sigma: 0.5,
            group_size: 2,
            twin_offset: 0.1,
            cat_classes: 8,
            transition: TransitionSpec::Planted { p_main: 0.7, shift: 3 },
        }
    }
}

impl SynthConfig {
    pub fn vk_classes(&self) -> usize {
        self.clusters.div_ceil(self.group_size)
    }

    /// Row-stochastic cluster transition matrix.
    pub fn transition_matrix(&self) -> Result<Vec<Vec<f64>>> {
        let l = self.clusters;
        let m = match &self.transition {
            TransitionSpec::Identity => (0..l)
                .map(|i| (0..l).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
                .collect(),
            TransitionSpec::Planted { p_main, shift } => {
                if !(0.0..=1.0).contains(p_main) {
                    return Err(Error::Config(format!("p_main {p_main} not in [0, 1]")));
                }
                let rest = if l > 1 { (1.0 - p_main) / (l - 1) as f64 } else { 0.0 };
                (0..l)
                    .map(|i| {
                        let main = (i + shift) % l;
                        (0..l).map(|j| if j == main { *p_main } else { rest }).collect()
                    })
                    .collect()
            }
            TransitionSpec::Matrix(m) => m.clone(),
        };
        validate_stochastic(&m, l)?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        if self.clusters == 0 || self.items_per_cluster == 0 || self.feature_dim == 0 {
            return Err(Error::Config("synthetic sizes must be positive".into()));
        }
        if self.min_len < 2 || self.max_len < self.min_len {
            return Err(Error::Config(format!(
                "session length range [{}, {}] invalid (min >= 2)",
                self.min_len, self.max_len
            )));
        }
        if self.group_size == 0 || self.cat_classes < 2 {
            return Err(Error::Config("group_size >= 1 and cat_classes >= 2 required".into()));
        }
        if self.sigma < 0.0 || self.twin_offset < 0.0 {
            return Err(Error::Config("noise scales must be nonnegative".into()));
        }
        Ok(())
    }

    /// Two category labels that depend only on the cluster's group.
    pub fn categories(&self, cluster: usize) -> Vec<usize> {
        let g = cluster / self.group_size;
        let a = g % self.cat_classes;
        let mut b = (g + self.cat_classes / 2) % self.cat_classes;
        if b == a {
            b = (a + 1) % self.cat_classes;
        }
        let mut c = vec![a, b];
        c.sort_unstable();
        c
    }

    pub fn cluster_of(&self, item: u64) -> usize {
        item as usize / self.items_per_cluster
    }
}

fn validate_stochastic(m: &[Vec<f64>], l: usize) -> Result<()> {
    if m.len() != l || m.iter().any(|r| r.len() != l) {
        return Err(Error::Config(format!("transition matrix must be {l}x{l}")));
    }
    for (i, r) in m.iter().enumerate() {
        let s: f64 = r.iter().sum();
        if r.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (s - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("transition row {i} is not stochastic (sum {s})")));
        }
    }
    Ok(())
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect()
}

fn sample_row(rng: &mut ChaCha8Rng, row: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (j, p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return j;
        }
    }
    row.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Item `c * items_per_cluster + j` belongs to cluster `c`.
pub fn synth_generate(cfg: &SynthConfig, seed: u64) -> Result<Corpus> {
    cfg.validate()?;
    let tmat = cfg.transition_matrix()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups = cfg.vk_classes();
    let d = cfg.feature_dim;
    let group_txt: Vec<Vec<f64>> = (0..groups).map(|_| gaussian(&mut rng, d, 1.0)).collect();
    let group_img: Vec<Vec<f64>> = (0..groups).map(|_| gaussian(&mut rng, d, 1.0)).collect();
    let shift = |base: &[f64], off: Vec<f64>| -> Vec<f64> { base.iter().zip(off).map(|(b, o)| b + o).collect() };
    let mut cent_txt = Vec::with_capacity(cfg.clusters);
    let mut cent_img = Vec::with_capacity(cfg.clusters);
    for c in 0..cfg.clusters {
        let g = c / cfg.group_size;
        cent_txt.push(shift(&group_txt[g], gaussian(&mut rng, d, cfg.twin_offset)));
        cent_img.push(shift(&group_img[g], gaussian(&mut rng, d, cfg.twin_offset)));
    }
    let mut items = Vec::with_capacity(cfg.clusters * cfg.items_per_cluster);
    for c in 0..cfg.clusters {
        for j in 0..cfg.items_per_cluster {
            items.push(Item {
                id: (c * cfg.items_per_cluster + j) as u64,
                feat_txt: shift(&cent_txt[c], gaussian(&mut rng, d, cfg.sigma)),
                feat_img: shift(&cent_img[c], gaussian(&mut rng, d, cfg.sigma)),
                vk: c / cfg.group_size,
                cats: cfg.categories(c),
            });
        }
    }
    let mut sessions = Vec::with_capacity(cfg.sessions);
    for sid in 0..cfg.sessions {
        let len = rng.random_range(cfg.min_len..=cfg.max_len);
        let mut cluster = rng.random_range(0..cfg.clusters);
        let mut seq = Vec::with_capacity(len);
        for step in 0..len {
            if step > 0 {
                cluster = sample_row(&mut rng, &tmat[cluster]);
            }
            let j = rng.random_range(0..cfg.items_per_cluster);
            seq.push((cluster * cfg.items_per_cluster + j) as u64);
        }
        sessions.push(Session {
            sid: sid as u64,
            items: seq,
        });
    }
    Corpus::new(items, sessions)
}
