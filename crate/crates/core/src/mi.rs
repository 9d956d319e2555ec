//! Neural mutual-information bounds.
//!
//! [`ClubEstimator`] is the contrastive log-ratio upper bound with a
//! diagonal-Gaussian variational conditional `q(w | z)`. [`MineEstimator`] is
//! the Donsker–Varadhan lower bound with a learned score network. Both own
//! their optimizer and are fitted on detached samples; their `estimate`
//! methods return gradients with respect to the inputs so the bound can enter
//! a main training loss.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::params::{join, Parameters};
use crate::nn::{log_sum_exp, Activation, Adam, Mlp, Tensor};

/// Log-variance outputs are squashed into `[-LOG_VAR_BOUND, LOG_VAR_BOUND]`.
pub const LOG_VAR_BOUND: f64 = 8.0;
pub const MINE_EMA_DECAY: f64 = 0.99;

/// A bound value with its gradients w.r.t. both input batches.
#[derive(Clone, Debug)]
pub struct MiValue {
    pub value: f64,
    pub d_a: Tensor,
    pub d_b: Tensor,
}

fn check_pair(a: &Tensor, b: &Tensor, da: usize, db: usize, ctx: &str) -> Result<()> {
    if a.cols() != da || b.cols() != db {
        return Err(Error::shape(ctx, format!("{da}/{db} columns"), format!("{}/{}", a.cols(), b.cols())));
    }
    if a.rows() != b.rows() {
        return Err(Error::shape(ctx, a.rows(), b.rows()));
    }
    if a.rows() < 2 {
        return Err(Error::Batch(format!("{ctx}: batch size {} < 2", a.rows())));
    }
    a.ensure_finite(ctx)?;
    b.ensure_finite(ctx)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClubEstimator {
    /// `z → [mean ‖ raw log-variance]`.
    pub q_net: Mlp,
    d_w: usize,
    optim: Adam,
}

struct QOut {
    mean: Tensor,
    log_var: Tensor,
    cache: crate::nn::MlpCache,
}

impl ClubEstimator {
    pub fn new<R: Rng + ?Sized>(d_z: usize, d_w: usize, hidden: usize, lr: f64, rng: &mut R) -> Self {
        Self {
            q_net: Mlp::new(&[d_z, hidden, 2 * d_w], Activation::Tanh, rng),
            d_w,
            optim: Adam::new(lr),
        }
    }

    pub fn fit_steps(&self) -> u64 {
        self.optim.steps()
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.optim.lr = lr;
    }

    fn predict(&self, z: &Tensor) -> Result<QOut> {
        let (out, cache) = self.q_net.forward_cached(z)?;
        let parts = out.hsplit(&[self.d_w, self.d_w]);
        let log_var = parts[1].map(|r| LOG_VAR_BOUND * (r / LOG_VAR_BOUND).tanh());
        Ok(QOut {
            mean: parts[0].clone(),
            log_var,
            cache,
        })
    }

    /// Mean and log-variance of `q(· | z)` per row.
    pub fn conditional(&self, z: &Tensor) -> Result<(Tensor, Tensor)> {
        let q = self.predict(z)?;
        Ok((q.mean, q.log_var))
    }

    /// Mean over rows of `log q(w_i | z_i)`.
    pub fn log_likelihood(&self, z: &Tensor, w: &Tensor) -> Result<f64> {
        check_pair(z, w, self.q_net.input_dim(), self.d_w, "club log-likelihood")?;
        let q = self.predict(z)?;
        Ok(gaussian_log_lik(&q, w).0)
    }

    /// One ascent step on the mean log-likelihood; returns the value before the step.
    pub fn fit_step(&mut self, z: &Tensor, w: &Tensor) -> Result<f64> {
        check_pair(z, w, self.q_net.input_dim(), self.d_w, "club fit")?;
        let q = self.predict(z)?;
        let (ll, d_mean, d_lv) = gaussian_log_lik(&q, w);
        if !ll.is_finite() {
            return Err(Error::Estimator(format!("non-finite club log-likelihood {ll}")));
        }
        let d_raw = squash_backward(&q.log_var, &d_lv);
        let (grads, _) = self.q_net.backward(&q.cache, &Tensor::hcat(&[&d_mean, &d_raw])?)?;
        self.optim.ascend(&mut self.q_net, &grads)?;
        Ok(ll)
    }

    /// `(1/N) Σ_i [log q(w_i|z_i) − (1/N) Σ_j log q(w_j|z_i)]` and its input gradients.
    ///
    /// The normalizer and log-variance terms cancel between the two sums, so
    /// the double sum reduces to per-dimension first and second moments of `w`.
    pub fn estimate(&self, z: &Tensor, w: &Tensor) -> Result<MiValue> {
        check_pair(z, w, self.q_net.input_dim(), self.d_w, "club estimate")?;
        let q = self.predict(z)?;
        let (n, d) = (w.rows(), self.d_w);
        let nf = n as f64;
        let mut m1 = vec![0.0; d];
        let mut m2 = vec![0.0; d];
        for i in 0..n {
            for (k, &x) in w.row(i).iter().enumerate() {
                m1[k] += x / nf;
                m2[k] += x * x / nf;
            }
        }
        let mut value = 0.0;
        let mut d_mean = Tensor::zeros(&[n, d]);
        let mut d_lv = Tensor::zeros(&[n, d]);
        let mut d_w = Tensor::zeros(&[n, d]);
        let mut prec_sum = vec![0.0; d];
        let mut prec_mean_sum = vec![0.0; d];
        for i in 0..n {
            for k in 0..d {
                let (wi, mu) = (w.get(i, k), q.mean.get(i, k));
                let half_prec = 0.5 * (-q.log_var.get(i, k)).exp();
                let bracket = m2[k] - wi * wi + 2.0 * mu * (wi - m1[k]);
                value += half_prec * bracket / nf;
                d_mean.set(i, k, 2.0 * half_prec * (wi - m1[k]) / nf);
                d_lv.set(i, k, -half_prec * bracket / nf);
                d_w.set(i, k, 2.0 * half_prec * (mu - wi) / nf);
                prec_sum[k] += half_prec;
                prec_mean_sum[k] += half_prec * mu;
            }
        }
        let n2 = nf * nf;
        for i in 0..n {
            for k in 0..d {
                let extra = 2.0 * (w.get(i, k) * prec_sum[k] - prec_mean_sum[k]) / n2;
                d_w.set(i, k, d_w.get(i, k) + extra);
            }
        }
        if !value.is_finite() {
            return Err(Error::Estimator(format!("non-finite club estimate {value}")));
        }
        let d_raw = squash_backward(&q.log_var, &d_lv);
        let (_, d_z) = self.q_net.backward(&q.cache, &Tensor::hcat(&[&d_mean, &d_raw])?)?;
        Ok(MiValue { value, d_a: d_z, d_b: d_w })
    }
}

impl Parameters for ClubEstimator {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.q_net.visit(&join(prefix, "q_net"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.q_net.visit_mut(&join(prefix, "q_net"), f);
    }
}

/// Mean Gaussian log-likelihood and its gradients w.r.t. mean and log-variance.
fn gaussian_log_lik(q: &QOut, w: &Tensor) -> (f64, Tensor, Tensor) {
    let (n, d) = (w.rows(), w.cols());
    let nf = n as f64;
    let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    let mut ll = 0.0;
    let mut d_mean = Tensor::zeros(&[n, d]);
    let mut d_lv = Tensor::zeros(&[n, d]);
    for i in 0..n {
        for k in 0..d {
            let lv = q.log_var.get(i, k);
            let diff = w.get(i, k) - q.mean.get(i, k);
            let prec = (-lv).exp();
            ll += -0.5 * lv - 0.5 * diff * diff * prec - half_log_2pi;
            d_mean.set(i, k, diff * prec / nf);
            d_lv.set(i, k, (-0.5 + 0.5 * diff * diff * prec) / nf);
        }
    }
    (ll / nf, d_mean, d_lv)
}

fn squash_backward(log_var: &Tensor, d_lv: &Tensor) -> Tensor {
    let mut out = d_lv.clone();
    for (g, &lv) in out.data_mut().iter_mut().zip(log_var.data()) {
        let t = lv / LOG_VAR_BOUND;
        *g *= 1.0 - t * t;
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MineEstimator {
    /// `[a ‖ b] → score`.
    pub f_net: Mlp,
    d_a: usize,
    optim: Adam,
    ema: f64,
    ema_updates: u64,
}

struct Scores {
    joint: Tensor,
    marginal: Tensor,
    joint_cache: crate::nn::MlpCache,
    marginal_cache: crate::nn::MlpCache,
}

impl MineEstimator {
    pub fn new<R: Rng + ?Sized>(d_a: usize, d_b: usize, hidden: usize, lr: f64, rng: &mut R) -> Self {
        Self {
            f_net: Mlp::new(&[d_a + d_b, hidden, 1], Activation::Tanh, rng),
            d_a,
            optim: Adam::new(lr),
            ema: 1.0,
            ema_updates: 0,
        }
    }

    fn d_b(&self) -> usize {
        self.f_net.input_dim() - self.d_a
    }

    pub fn fit_steps(&self) -> u64 {
        self.optim.steps()
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.optim.lr = lr;
    }

    /// Bias-corrected moving average of the marginal `mean exp(score)`.
    pub fn ema(&self) -> f64 {
        if self.ema_updates == 0 {
            1.0
        } else {
            self.ema / (1.0 - MINE_EMA_DECAY.powi(self.ema_updates as i32))
        }
    }

    fn scores(&self, a: &Tensor, b: &Tensor, perm: &[usize]) -> Result<Scores> {
        check_pair(a, b, self.d_a, self.d_b(), "mine")?;
        if perm.len() != a.rows() || perm.iter().any(|&p| p >= a.rows()) {
            return Err(Error::shape("mine marginal permutation", a.rows(), perm.len()));
        }
        let (joint, joint_cache) = self.f_net.forward_cached(&Tensor::hcat(&[a, b])?)?;
        let shuffled = b.select_rows(perm);
        let (marginal, marginal_cache) = self.f_net.forward_cached(&Tensor::hcat(&[a, &shuffled])?)?;
        Ok(Scores {
            joint,
            marginal,
            joint_cache,
            marginal_cache,
        })
    }

    /// `mean f(a_i, b_i) − log mean exp f(a_j, b_{perm[j]})`, with exact input gradients.
    pub fn estimate(&self, a: &Tensor, b: &Tensor, perm: &[usize]) -> Result<MiValue> {
        let s = self.scores(a, b, perm)?;
        let n = a.rows();
        let nf = n as f64;
        let lse = log_sum_exp(s.marginal.data());
        let value = s.joint.data().iter().sum::<f64>() / nf - (lse - nf.ln());
        if !value.is_finite() {
            return Err(Error::Estimator(format!("non-finite mine estimate {value}")));
        }
        let d_joint = Tensor::filled(&[n, 1], 1.0 / nf);
        let d_marg = s.marginal.map(|f| -(f - lse).exp());
        let (_, dj) = self.f_net.backward(&s.joint_cache, &d_joint)?;
        let (_, dm) = self.f_net.backward(&s.marginal_cache, &d_marg)?;
        let dj = dj.hsplit(&[self.d_a, self.d_b()]);
        let dm = dm.hsplit(&[self.d_a, self.d_b()]);
        let mut d_a = dj[0].clone();
        d_a.add_assign(&dm[0]);
        let mut d_b = dj[1].clone();
        for (j, &p) in perm.iter().enumerate() {
            for (x, y) in d_b.row_mut(p).iter_mut().zip(dm[1].row(j)) {
                *x += y;
            }
        }
        Ok(MiValue { value, d_a, d_b })
    }

    /// One ascent step on the bound with a derangement-shuffled marginal.
    ///
    /// The marginal term's gradient divides by the moving average of
    /// `mean exp(score)` instead of the batch value. Returns the bound before the step.
    pub fn fit_step<R: Rng + ?Sized>(&mut self, a: &Tensor, b: &Tensor, rng: &mut R) -> Result<f64> {
        let perm = derangement(a.rows(), rng);
        warn_if_degenerate(b);
        let s = self.scores(a, b, &perm)?;
        let nf = a.rows() as f64;
        let lse = log_sum_exp(s.marginal.data());
        let value = s.joint.data().iter().sum::<f64>() / nf - (lse - nf.ln());
        let batch_mean_exp = (lse - nf.ln()).exp();
        if !value.is_finite() || !batch_mean_exp.is_finite() {
            return Err(Error::Estimator(format!("non-finite mine bound {value}")));
        }
        self.ema = MINE_EMA_DECAY * self.ema_raw_or_zero() + (1.0 - MINE_EMA_DECAY) * batch_mean_exp;
        self.ema_updates += 1;
        let denom = self.ema();
        let d_joint = Tensor::filled(&[a.rows(), 1], 1.0 / nf);
        let d_marg = s.marginal.map(|f| -(f - lse).exp() * batch_mean_exp / denom);
        let (mut gj, _) = self.f_net.backward(&s.joint_cache, &d_joint)?;
        let (gm, _) = self.f_net.backward(&s.marginal_cache, &d_marg)?;
        crate::nn::params::accumulate(&mut gj, &gm, 1.0);
        self.optim.ascend(&mut self.f_net, &gj)?;
        Ok(value)
    }

    fn ema_raw_or_zero(&self) -> f64 {
        if self.ema_updates == 0 {
            0.0
        } else {
            self.ema
        }
    }
}

impl Parameters for MineEstimator {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.f_net.visit(&join(prefix, "f_net"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.f_net.visit_mut(&join(prefix, "f_net"), f);
    }
}

/// Uniform random cyclic permutation (Sattolo), so no index maps to itself.
pub fn derangement<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..i);
        p.swap(i, j);
    }
    p
}

fn warn_if_degenerate(b: &Tensor) {
    if (1..b.rows()).all(|i| b.row(i) == b.row(0)) {
        log::warn!("mine marginal batch has identical rows; shuffling cannot break the pairing");
    }
}

/// `−½ ln(1 − ρ²)` nats.
pub fn gaussian_mi(rho: f64) -> f64 {
    -0.5 * (1.0 - rho * rho).ln()
}

/// `n` draws of a standard bivariate Gaussian with correlation `rho`, as two `n x 1` columns.
pub fn correlated_gaussian<R: Rng + ?Sized>(n: usize, rho: f64, rng: &mut R) -> (Tensor, Tensor) {
    let mut a = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    let s = (1.0 - rho * rho).sqrt();
    for _ in 0..n {
        let x: f64 = StandardNormal.sample(rng);
        let e: f64 = StandardNormal.sample(rng);
        a.push(x);
        b.push(rho * x + s * e);
    }
    (Tensor::vector(a).reshape(vec![n, 1]).unwrap(), Tensor::vector(b).reshape(vec![n, 1]).unwrap())
}

/// Hyper-parameters for fitting an estimator on a fixed sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
}

fn minibatches(n: usize, cfg: &FitConfig) -> impl Iterator<Item = Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let batch = cfg.batch.clamp(2, n.max(2));
    let mut pos = n;
    (0..cfg.steps).map(move |_| {
        if pos + batch > n {
            order.shuffle(&mut rng);
            pos = 0;
        }
        let idx = order[pos..(pos + batch).min(n)].to_vec();
        pos += batch;
        idx
    })
}

/// Fits `q` on minibatches of `(z, w)`; returns the per-step log-likelihoods.
pub fn fit_club(est: &mut ClubEstimator, z: &Tensor, w: &Tensor, cfg: &FitConfig) -> Result<Vec<f64>> {
    minibatches(z.rows(), cfg)
        .map(|idx| est.fit_step(&z.select_rows(&idx), &w.select_rows(&idx)))
        .collect()
}

/// Fits the score network on minibatches of `(a, b)`; returns the per-step bounds.
pub fn fit_mine(est: &mut MineEstimator, a: &Tensor, b: &Tensor, cfg: &FitConfig) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5e_ed0f_3a11);
    minibatches(a.rows(), cfg)
        .map(|idx| est.fit_step(&a.select_rows(&idx), &b.select_rows(&idx), &mut rng))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::grad_check;
    use crate::nn::Linear;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random(rows: usize, cols: usize, r: &mut ChaCha8Rng) -> Tensor {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct double sum over the full diagonal-Gaussian log density.
    fn naive_club(est: &ClubEstimator, z: &Tensor, w: &Tensor) -> f64 {
        let (mean, lv) = est.conditional(z).unwrap();
        let n = z.rows();
        let logq = |i: usize, j: usize| -> f64 {
            (0..w.cols())
                .map(|k| {
                    let v = lv.get(i, k);
                    let d = w.get(j, k) - mean.get(i, k);
                    -0.5 * v - 0.5 * d * d * (-v).exp() - 0.5 * (2.0 * std::f64::consts::PI).ln()
                })
                .sum()
        };
        let mut total = 0.0;
        for i in 0..n {
            let neg: f64 = (0..n).map(|j| logq(i, j)).sum::<f64>() / n as f64;
            total += logq(i, i) - neg;
        }
        total / n as f64
    }

    #[test]
    fn club_two_sample_hand_value() {
        // q(w|z) with mean = z and unit variance (raw log-variance 0)
        let mut est = ClubEstimator::new(1, 1, 2, 0.0, &mut rng(0));
        est.q_net = Mlp::from_layers(
            vec![
                Linear {
                    weight: Tensor::matrix(2, 1, vec![1.0, 0.0]).unwrap(),
                    bias: Tensor::vector(vec![0.0, 0.0]),
                },
                Linear {
                    weight: Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap(),
                    bias: Tensor::vector(vec![0.0, 0.0]),
                },
            ],
            Activation::Identity,
        )
        .unwrap();
        let z = Tensor::matrix(2, 1, vec![0.0, 1.0]).unwrap();
        let w = Tensor::matrix(2, 1, vec![0.0, 2.0]).unwrap();
        // log q(w_j|z_i) + const = −½(w_j − z_i)²:
        // i=0: pos 0, neg −½(0 + 4)/2 = −1; i=1: pos −½, neg −½(1 + 1)/2 = −½
        // estimate = ½[(0 + 1) + (−½ + ½)] = 0.5
        let v = est.estimate(&z, &w).unwrap().value;
        assert!((v - 0.5).abs() < 1e-12, "{v}");
        assert!((v - naive_club(&est, &z, &w)).abs() < 1e-12);
    }

    #[test]
    fn club_closed_form_matches_double_sum() {
        let mut r = rng(1);
        let est = ClubEstimator::new(3, 2, 5, 0.01, &mut r);
        let z = random(7, 3, &mut r);
        let w = random(7, 2, &mut r);
        let v = est.estimate(&z, &w).unwrap().value;
        assert!((v - naive_club(&est, &z, &w)).abs() < 1e-12);
    }

    #[test]
    fn club_input_gradients_check() {
        let mut r = rng(2);
        let est = ClubEstimator::new(3, 2, 5, 0.01, &mut r);
        let z = random(4, 3, &mut r);
        let w = random(4, 2, &mut r);
        let flat: Vec<f64> = z.data().iter().chain(w.data()).copied().collect();
        let f = |p: &[f64]| {
            let z = Tensor::matrix(4, 3, p[..12].to_vec())?;
            let w = Tensor::matrix(4, 2, p[12..].to_vec())?;
            let v = est.estimate(&z, &w)?;
            Ok((v.value, v.d_a.data().iter().chain(v.d_b.data()).copied().collect()))
        };
        let rep = grad_check(f, &flat, 1e-5, 100, 0).unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }

    #[test]
    fn club_rejects_single_sample() {
        let est = ClubEstimator::new(1, 1, 2, 0.01, &mut rng(3));
        let one = Tensor::matrix(1, 1, vec![0.0]).unwrap();
        assert!(matches!(est.estimate(&one, &one), Err(Error::Batch(_))));
    }

    #[test]
    fn club_log_variance_stays_clamped() {
        let mut est = ClubEstimator::new(1, 1, 2, 0.0, &mut rng(4));
        est.q_net.layers[1].bias.data_mut()[1] = 1e6;
        let (_, lv) = est.conditional(&Tensor::matrix(1, 1, vec![0.3]).unwrap()).unwrap();
        assert!(lv.data()[0] <= LOG_VAR_BOUND && lv.data()[0] > 7.99);
    }

    #[test]
    fn club_fit_on_independent_noise_learns_the_marginal() {
        let mut r = rng(5);
        let z = random(2048, 2, &mut r);
        let w = Tensor::matrix(2048, 1, (0..2048).map(|_| StandardNormal.sample(&mut r)).collect()).unwrap();
        let mut est = ClubEstimator::new(2, 1, 16, 0.01, &mut r);
        let before = est.log_likelihood(&z, &w).unwrap();
        fit_club(&mut est, &z, &w, &FitConfig { steps: 1500, batch: 256, seed: 1 }).unwrap();
        let (mean, lv) = est.conditional(&z).unwrap();
        let mean_norm = (mean.data().iter().map(|m| m * m).sum::<f64>() / 2048.0).sqrt();
        assert!(mean_norm < 0.1, "{mean_norm}");
        let avg_lv = lv.data().iter().sum::<f64>() / 2048.0;
        assert!(avg_lv.abs() < 0.15, "{avg_lv}");
        assert!(est.log_likelihood(&z, &w).unwrap() >= before);
        assert!(est.estimate(&z, &w).unwrap().value.abs() < 0.05);
    }

    #[test]
    fn club_fit_on_a_copy_shrinks_the_variance() {
        let mut r = rng(6);
        let z = random(512, 1, &mut r);
        let mut est = ClubEstimator::new(1, 1, 8, 0.02, &mut r);
        let mut last = f64::INFINITY;
        for chunk in 0..6 {
            fit_club(&mut est, &z, &z, &FitConfig { steps: 100, batch: 128, seed: chunk }).unwrap();
            let (_, lv) = est.conditional(&z).unwrap();
            let avg = lv.data().iter().sum::<f64>() / 512.0;
            assert!(avg < last, "chunk {chunk}: {avg} !< {last}");
            last = avg;
        }
        assert!(last < -3.0, "{last}");
    }

    #[test]
    fn mine_constant_score_is_zero() {
        let mut r = rng(7);
        let mut est = MineEstimator::new(2, 2, 4, 0.01, &mut r);
        for l in &mut est.f_net.layers {
            l.weight.fill(0.0);
        }
        est.f_net.layers[1].bias.data_mut()[0] = 3.7;
        let a = random(6, 2, &mut r);
        let b = random(6, 2, &mut r);
        let v = est.estimate(&a, &b, &derangement(6, &mut r)).unwrap();
        assert!(v.value.abs() < 1e-12);
    }

    #[test]
    fn mine_invariant_to_output_bias_shift() {
        let mut r = rng(8);
        let est = MineEstimator::new(2, 3, 6, 0.01, &mut r);
        let a = random(9, 2, &mut r);
        let b = random(9, 3, &mut r);
        let perm = derangement(9, &mut r);
        let base = est.estimate(&a, &b, &perm).unwrap();
        for shift in [-50.0, -1.0, 0.5, 20.0] {
            let mut moved = est.clone();
            moved.f_net.layers[1].bias.data_mut()[0] += shift;
            let v = moved.estimate(&a, &b, &perm).unwrap();
            assert!((v.value - base.value).abs() < 1e-10, "shift {shift}");
        }
    }

    #[test]
    fn mine_two_sample_hand_value() {
        // f(a, b) = a + b; joint (1, 1), (2, −1); marginal pairs a with the other b
        let mut est = MineEstimator::new(1, 1, 1, 0.0, &mut rng(9));
        let mut layer = Linear::zeros(2, 1);
        layer.weight = Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap();
        est.f_net = Mlp::from_layers(vec![layer], Activation::Identity).unwrap();
        let a = Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap();
        let b = Tensor::matrix(2, 1, vec![1.0, -1.0]).unwrap();
        // joint scores 2, 1 → mean 1.5; marginal scores 0, 3
        let want = 1.5 - ((1.0 + 3f64.exp()) / 2.0).ln();
        let v = est.estimate(&a, &b, &[1, 0]).unwrap();
        assert!((v.value - want).abs() < 1e-12);
    }

    #[test]
    fn mine_input_gradients_check() {
        let mut r = rng(10);
        let est = MineEstimator::new(3, 2, 6, 0.01, &mut r);
        let a = random(4, 3, &mut r);
        let b = random(4, 2, &mut r);
        let perm = derangement(4, &mut r);
        let flat: Vec<f64> = a.data().iter().chain(b.data()).copied().collect();
        let f = |p: &[f64]| {
            let a = Tensor::matrix(4, 3, p[..12].to_vec())?;
            let b = Tensor::matrix(4, 2, p[12..].to_vec())?;
            let v = est.estimate(&a, &b, &perm)?;
            Ok((v.value, v.d_a.data().iter().chain(v.d_b.data()).copied().collect()))
        };
        let rep = grad_check(f, &flat, 1e-5, 100, 0).unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }

    #[test]
    fn derangement_has_no_fixed_points() {
        let mut r = rng(11);
        for n in 2..40 {
            let p = derangement(n, &mut r);
            assert!(p.iter().enumerate().all(|(i, &j)| i != j));
            let mut s = p.clone();
            s.sort_unstable();
            assert_eq!(s, (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn mine_zero_learning_rate_leaves_estimator() {
        let mut r = rng(12);
        let mut est = MineEstimator::new(1, 1, 4, 0.0, &mut r);
        let before = est.f_net.clone();
        let (a, b) = correlated_gaussian(64, 0.5, &mut r);
        est.fit_step(&a, &b, &mut r).unwrap();
        assert_eq!(est.f_net, before);
        assert!(est.ema() > 0.0);
    }

    #[test]
    fn mine_fit_recovers_strong_correlation() {
        let mut r = rng(13);
        let (a, b) = correlated_gaussian(4096, 0.9, &mut r);
        let mut est = MineEstimator::new(1, 1, 32, 0.005, &mut r);
        let trace = fit_mine(&mut est, &a, &b, &FitConfig { steps: 2000, batch: 256, seed: 3 }).unwrap();
        let (ta, tb) = correlated_gaussian(4096, 0.9, &mut r);
        let v = est.estimate(&ta, &tb, &derangement(4096, &mut r)).unwrap().value;
        assert!(v >= 0.70, "{v}");
        let avg = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        assert!(avg(&trace[1900..]) > avg(&trace[100..200]));
    }

    #[test]
    fn mine_on_independent_samples_stays_near_zero() {
        let mut r = rng(14);
        let (a, b) = correlated_gaussian(4096, 0.0, &mut r);
        let mut est = MineEstimator::new(1, 1, 32, 0.005, &mut r);
        fit_mine(&mut est, &a, &b, &FitConfig { steps: 1000, batch: 256, seed: 4 }).unwrap();
        let (ta, tb) = correlated_gaussian(4096, 0.0, &mut r);
        let v = est.estimate(&ta, &tb, &derangement(4096, &mut r)).unwrap().value;
        assert!(v <= 0.05, "{v}");
    }

    #[test]
    fn analytic_gaussian_values() {
        let want = [(0.0, 0.0), (0.5, 0.1438), (0.8, 0.5108), (0.9, 0.8304)];
        for (rho, mi) in want {
            assert!((gaussian_mi(rho) - mi).abs() < 5e-5, "{rho}");
        }
    }
}
