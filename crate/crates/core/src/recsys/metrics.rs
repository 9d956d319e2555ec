//! Ranking and label-generation metrics.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::towers::GenTarget;

/// 1-based rank of candidate `target` under `scores`.
///
/// Ties go to the lower index, which is the lower item id when candidates
/// are enumerated in ascending id order.
pub fn rank_of(scores: &[f64], target: usize) -> usize {
    let s = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > s || (v == s && j < target))
        .count()
}

pub fn hit_at(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg_at(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RankMetrics {
    pub hr5: f64,
    pub hr10: f64,
    pub ndcg5: f64,
    pub ndcg10: f64,
    pub count: usize,
}

impl RankMetrics {
    pub fn from_ranks(ranks: &[usize]) -> Self {
        let n = ranks.len();
        if n == 0 {
            return Self::default();
        }
        let mean = |f: &dyn Fn(usize) -> f64| ranks.iter().map(|&r| f(r)).sum::<f64>() / n as f64;
        Self {
            hr5: mean(&|r| hit_at(r, 5)),
            hr10: mean(&|r| hit_at(r, 10)),
            ndcg5: mean(&|r| ndcg_at(r, 5)),
            ndcg10: mean(&|r| ndcg_at(r, 10)),
            count: n,
        }
    }
}

/// Exact-match rates of visual-keyword and category-set predictions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GrMetric {
    pub vk: f64,
    pub cat: f64,
}

pub fn gr_metric(preds: &[GenTarget], truths: &[GenTarget]) -> Result<GrMetric> {
    if preds.len() != truths.len() {
        return Err(Error::shape("gr_metric", truths.len(), preds.len()));
    }
    if truths.is_empty() {
        return Ok(GrMetric::default());
    }
    let sorted = |v: &[usize]| {
        let mut v = v.to_vec();
        v.sort_unstable();
        v
    };
    let (mut vk, mut cat) = (0usize, 0usize);
    for (p, t) in preds.iter().zip(truths) {
        vk += usize::from(p.vk == t.vk);
        cat += usize::from(!p.cats.is_empty() && sorted(&p.cats) == sorted(&t.cats));
    }
    let n = truths.len() as f64;
    Ok(GrMetric {
        vk: vk as f64 / n,
        cat: cat as f64 / n,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedTTest {
    pub mean_diff: f64,
    pub t: f64,
    pub df: usize,
    /// Two-sided.
    pub p_value: f64,
}

/// Paired t-test of `a - b` over matched samples.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<PairedTTest> {
    if a.len() != b.len() {
        return Err(Error::shape("paired_t_test", a.len(), b.len()));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Degenerate("paired t-test needs at least two pairs".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let df = n - 1;
    let (t, p_value) = if var == 0.0 {
        if mean == 0.0 {
            (0.0, 1.0)
        } else {
            (mean.signum() * f64::INFINITY, 0.0)
        }
    } else {
        let t = mean / (var / n as f64).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df as f64).map_err(|e| Error::Degenerate(e.to_string()))?;
        (t, 2.0 * (1.0 - dist.cdf(t.abs())))
    };
    Ok(PairedTTest { mean_diff: mean, t, df, p_value })
}
