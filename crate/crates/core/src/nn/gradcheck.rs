use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Relative errors below this absolute scale are measured against it instead.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_coordinate: usize,
    pub checked: usize,
}

/// Compares the analytic gradient returned by `loss_fn` with central finite
/// differences on up to `max_coords` randomly chosen coordinates.
///
/// `loss_fn` maps a flat parameter vector to `(loss, gradient)`.
pub fn grad_check<F>(loss_fn: F, params: &[f64], eps: f64, max_coords: usize, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::GradCheck {
            coordinate: 0,
            reason: format!("eps {eps} outside [1e-7, 1e-3]"),
        });
    }
    let (loss, analytic) = loss_fn(params)?;
    if !loss.is_finite() {
        return Err(Error::GradCheck {
            coordinate: 0,
            reason: "non-finite loss at the base point".into(),
        });
    }
    if analytic.len() != params.len() {
        return Err(Error::shape("grad_check gradient", params.len(), analytic.len()));
    }
    let n = params.len();
    let coords: Vec<usize> = if n <= max_coords {
        (0..n).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c = sample(&mut rng, n, max_coords).into_vec();
        c.sort_unstable();
        c
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_coordinate: 0,
        checked: coords.len(),
    };
    let mut p = params.to_vec();
    for &i in &coords {
        let orig = p[i];
        p[i] = orig + eps;
        let (up, _) = loss_fn(&p)?;
        p[i] = orig - eps;
        let (down, _) = loss_fn(&p)?;
        p[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::GradCheck {
                coordinate: i,
                reason: "non-finite loss under perturbation".into(),
            });
        }
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_coordinate = i;
        }
    }
    Ok(report)
}
