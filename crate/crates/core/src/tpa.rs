//! Transitional pattern alignment: latent projectors, pattern summaries of
//! meta queries, and the three estimator-driven alignment losses combined with
//! the generation loss into the distillation objective for the knowledge tower.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Corpus, ItemId, MetaPair};
use crate::error::{Error, Result};
use crate::mi::{ClubEstimator, MiValue, MineEstimator};
use crate::nn::params::{join, Parameters};
use crate::nn::{Activation, Mlp, MlpCache, Tensor};
use crate::towers::{gen_loss, GenTarget, KnowledgeTower, TowerCache, TowerGradIn, TowerInput, TowerOutput, TransferTower};

/// A pair of values, one per modality.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Modal<T> {
    pub visual: T,
    pub textual: T,
}

impl<T> Modal<T> {
    pub fn new(visual: T, textual: T) -> Self {
        Self { visual, textual }
    }

    pub fn from_fn(mut f: impl FnMut(Modality) -> T) -> Self {
        Self {
            visual: f(Modality::Visual),
            textual: f(Modality::Textual),
        }
    }

    pub fn get(&self, m: Modality) -> &T {
        match m {
            Modality::Visual => &self.visual,
            Modality::Textual => &self.textual,
        }
    }

    pub fn get_mut(&mut self, m: Modality) -> &mut T {
        match m {
            Modality::Visual => &mut self.visual,
            Modality::Textual => &mut self.textual,
        }
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> Modal<U> {
        Modal {
            visual: f(&self.visual),
            textual: f(&self.textual),
        }
    }

    pub fn try_map<U>(&self, mut f: impl FnMut(Modality, &T) -> Result<U>) -> Result<Modal<U>> {
        Ok(Modal {
            visual: f(Modality::Visual, &self.visual)?,
            textual: f(Modality::Textual, &self.textual)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    Visual,
    Textual,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Visual, Modality::Textual];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Visual => "visual",
            Modality::Textual => "textual",
        }
    }
}

impl<P: Parameters> Parameters for Modal<P> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.visual.visit(&join(prefix, "visual"), f);
        self.textual.visit(&join(prefix, "textual"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.visual.visit_mut(&join(prefix, "visual"), f);
        self.textual.visit_mut(&join(prefix, "textual"), f);
    }
}

/// Latent projectors for one modality. All map `d_sum → d_lat`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectorSet {
    /// Summary → transition-aware part.
    pub transition: Mlp,
    /// Summary → knowledge-reflected part.
    pub knowledge: Mlp,
    /// Pooled meta-query summary → pattern latent.
    pub pattern: Mlp,
    /// Frozen stage-one summary → anchor latent.
    pub anchor: Mlp,
}

impl ProjectorSet {
    pub fn new<R: Rng + ?Sized>(d_sum: usize, d_lat: usize, rng: &mut R) -> Self {
        let mut mk = || Mlp::new(&[d_sum, d_lat, d_lat], Activation::Tanh, rng);
        Self {
            transition: mk(),
            knowledge: mk(),
            pattern: mk(),
            anchor: mk(),
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.transition.output_dim()
    }
}

impl Parameters for ProjectorSet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.transition.visit(&join(prefix, "transition"), f);
        self.knowledge.visit(&join(prefix, "knowledge"), f);
        self.pattern.visit(&join(prefix, "pattern"), f);
        self.anchor.visit(&join(prefix, "anchor"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.transition.visit_mut(&join(prefix, "transition"), f);
        self.knowledge.visit_mut(&join(prefix, "knowledge"), f);
        self.pattern.visit_mut(&join(prefix, "pattern"), f);
        self.anchor.visit_mut(&join(prefix, "anchor"), f);
    }
}

pub type Projectors = Modal<ProjectorSet>;

pub fn new_projectors<R: Rng + ?Sized>(d_sum: usize, d_lat: usize, rng: &mut R) -> Projectors {
    let visual = ProjectorSet::new(d_sum, d_lat, rng);
    let textual = ProjectorSet::new(d_sum, d_lat, rng);
    Modal { visual, textual }
}

/// Splits summaries into (transition-aware, knowledge-reflected) latents.
pub fn decouple(set: &ProjectorSet, e: &Tensor) -> Result<(Tensor, Tensor)> {
    Ok((set.transition.forward(e)?, set.knowledge.forward(e)?))
}

/// Mean transfer-tower summary over all meta queries of one order sharing a target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatternSummary {
    pub target: ItemId,
    pub order: usize,
    pub pooled: Modal<Vec<f64>>,
    pub count: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PatternTable {
    entries: BTreeMap<(ItemId, usize), PatternSummary>,
}

impl PatternTable {
    pub fn get(&self, target: ItemId, order: usize) -> Option<&PatternSummary> {
        self.entries.get(&(target, order))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &PatternSummary> {
        self.entries.values()
    }

    /// Distinct targets, ascending.
    pub fn targets(&self) -> Vec<ItemId> {
        let mut t: Vec<ItemId> = self.entries.keys().map(|k| k.0).collect();
        t.dedup();
        t
    }

    /// Diagnostic export: one record per (target, order, modality).
    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Row<'a> {
            target: ItemId,
            order: usize,
            modality: &'a str,
            count: usize,
            pooled: &'a [f64],
        }
        let rows: Vec<Row> = self
            .entries
            .values()
            .flat_map(|s| {
                Modality::ALL.map(|m| Row {
                    target: s.target,
                    order: s.order,
                    modality: m.name(),
                    count: s.count,
                    pooled: s.pooled.get(m),
                })
            })
            .collect();
        Ok(serde_json::to_string_pretty(&rows)?)
    }
}

const SUMMARY_CHUNK: usize = 512;

/// Runs the frozen transfer tower over every pair and mean-pools per (target, order).
pub fn build_pattern_summaries(tower: &TransferTower, pairs: &[MetaPair], corpus: &Corpus) -> Result<PatternTable> {
    let d = tower.dims().d_sum;
    let mut sums: BTreeMap<(ItemId, usize), (Modal<Vec<f64>>, usize)> = BTreeMap::new();
    for order in 1..=crate::data::MAX_ORDER {
        let of_order: Vec<&MetaPair> = pairs.iter().filter(|p| p.order == order).collect();
        for chunk in of_order.chunks(SUMMARY_CHUNK) {
            let queries: Vec<&[ItemId]> = chunk.iter().map(|p| p.query.as_slice()).collect();
            let out = tower.encode_queries(corpus, &queries, order)?;
            for (r, p) in chunk.iter().enumerate() {
                corpus.item(p.target)?;
                let entry = sums
                    .entry((p.target, order))
                    .or_insert_with(|| (Modal::new(vec![0.0; d], vec![0.0; d]), 0));
                for (acc, v) in entry.0.visual.iter_mut().zip(out.e_v.row(r)) {
                    *acc += v;
                }
                for (acc, v) in entry.0.textual.iter_mut().zip(out.e_t.row(r)) {
                    *acc += v;
                }
                entry.1 += 1;
            }
        }
    }
    let entries = sums
        .into_iter()
        .map(|((target, order), (sum, count))| {
            let n = count as f64;
            let pooled = sum.map(|v| v.iter().map(|x| x / n).collect());
            ((target, order), PatternSummary { target, order, pooled, count })
        })
        .collect();
    Ok(PatternTable { entries })
}

fn sum_terms(parts: Modal<MiValue>) -> (f64, Modal<MiValue>) {
    (parts.visual.value + parts.textual.value, parts)
}

/// Sum over modalities of the CLUB estimate between transition-aware and
/// knowledge-reflected latents. Minimized by the main model.
pub fn disentangle_loss(clubs: &Modal<ClubEstimator>, z: &Modal<Tensor>, w: &Modal<Tensor>) -> Result<(f64, Modal<MiValue>)> {
    let parts = clubs.try_map(|m, club| {
        if club.fit_steps() == 0 {
            return Err(Error::State {
                stage: "train-k1".into(),
                detail: format!("{} CLUB estimator used before any fitting step", m.name()),
            });
        }
        club.estimate(z.get(m), w.get(m))
    })?;
    Ok(sum_terms(parts))
}

fn mine_sum(mines: &Modal<MineEstimator>, a: &Modal<Tensor>, b: &Modal<Tensor>, perms: &Modal<Vec<usize>>) -> Result<(f64, Modal<MiValue>)> {
    let parts = mines.try_map(|m, mine| mine.estimate(a.get(m), b.get(m), perms.get(m)))?;
    Ok(sum_terms(parts))
}

/// Sum over modalities of the MINE bound between transition-aware latents and
/// pattern latents. Maximized by the main model.
pub fn pattern_align_loss(
    mines: &Modal<MineEstimator>,
    z: &Modal<Tensor>,
    r: &Modal<Tensor>,
    perms: &Modal<Vec<usize>>,
) -> Result<(f64, Modal<MiValue>)> {
    mine_sum(mines, z, r, perms)
}

/// Sum over modalities of the MINE bound between knowledge-reflected latents
/// and anchor latents from the frozen stage-one tower. Maximized by the main model.
pub fn anchor_align_loss(
    mines: &Modal<MineEstimator>,
    w: &Modal<Tensor>,
    anchor: &Modal<Tensor>,
    perms: &Modal<Vec<usize>>,
) -> Result<(f64, Modal<MiValue>)> {
    mine_sum(mines, w, anchor, perms)
}

/// Trainable state of the distillation stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignModel {
    pub tower: KnowledgeTower,
    pub projectors: Projectors,
}

impl Parameters for AlignModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.tower.visit(&join(prefix, "tower"), f);
        self.projectors.visit(&join(prefix, "projectors"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.tower.visit_mut(&join(prefix, "tower"), f);
        self.projectors.visit_mut(&join(prefix, "projectors"), f);
    }
}

/// The six estimators: per modality one CLUB and two MINE instances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignEstimators {
    pub club: Modal<ClubEstimator>,
    pub mine_pattern: Modal<MineEstimator>,
    pub mine_anchor: Modal<MineEstimator>,
}

impl AlignEstimators {
    pub fn new<R: Rng + ?Sized>(d_lat: usize, hidden: usize, club_lr: f64, mine_lr: f64, rng: &mut R) -> Self {
        let club = Modal::from_fn(|_| ClubEstimator::new(d_lat, d_lat, hidden, club_lr, rng));
        let mine_pattern = Modal::from_fn(|_| MineEstimator::new(d_lat, d_lat, hidden, mine_lr, rng));
        let mine_anchor = Modal::from_fn(|_| MineEstimator::new(d_lat, d_lat, hidden, mine_lr, rng));
        Self {
            club,
            mine_pattern,
            mine_anchor,
        }
    }
}

impl Parameters for AlignEstimators {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.club.visit(&join(prefix, "club"), f);
        self.mine_pattern.visit(&join(prefix, "mine_pattern"), f);
        self.mine_anchor.visit(&join(prefix, "mine_anchor"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.club.visit_mut(&join(prefix, "club"), f);
        self.mine_pattern.visit_mut(&join(prefix, "mine_pattern"), f);
        self.mine_anchor.visit_mut(&join(prefix, "mine_anchor"), f);
    }
}

/// Loss weights of the distillation objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignWeights {
    pub gen: f64,
    pub disentangle: f64,
    pub pattern: f64,
    pub anchor: f64,
}

/// Batch rows that have a pooled summary of one order.
#[derive(Clone, Debug)]
pub struct OrderRows {
    pub order: usize,
    pub rows: Vec<usize>,
    /// `rows.len() x d_sum` pooled summaries per modality.
    pub pooled: Modal<Tensor>,
}

/// One distillation micro-batch of meta-target items.
#[derive(Clone, Debug)]
pub struct AlignBatch {
    pub input: TowerInput,
    pub targets: Vec<GenTarget>,
    pub orders: Vec<OrderRows>,
    /// Cached stage-one summaries per modality, one row per item.
    pub anchor: Modal<Tensor>,
}

impl AlignBatch {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Marginal permutations used by the MINE terms of one step.
#[derive(Clone, Debug)]
pub struct AlignPerms {
    /// Indexed like [`AlignBatch::orders`].
    pub pattern: Vec<Modal<Vec<usize>>>,
    pub anchor: Modal<Vec<usize>>,
}

impl AlignPerms {
    pub fn sample<R: Rng + ?Sized>(batch: &AlignBatch, rng: &mut R) -> Self {
        let mut draw = |n: usize| Modal::from_fn(|_| crate::mi::derangement(n, rng));
        let pattern = batch.orders.iter().map(|o| draw(o.rows.len())).collect();
        let anchor = draw(batch.len());
        Self { pattern, anchor }
    }
}

struct Projected {
    out: Tensor,
    cache: MlpCache,
}

fn project(net: &Mlp, x: &Tensor) -> Result<Projected> {
    let (out, cache) = net.forward_cached(x)?;
    Ok(Projected { out, cache })
}

/// Forward activations of one distillation step.
pub struct AlignForward {
    pub tower_out: TowerOutput,
    tower_cache: TowerCache,
    z: Modal<Projected>,
    w: Modal<Projected>,
    /// Indexed like [`AlignBatch::orders`].
    r: Vec<Modal<Projected>>,
    anchor: Modal<Projected>,
}

impl AlignForward {
    pub fn z(&self) -> Modal<Tensor> {
        self.z.map(|p| p.out.clone())
    }

    pub fn w(&self) -> Modal<Tensor> {
        self.w.map(|p| p.out.clone())
    }

    pub fn anchor(&self) -> Modal<Tensor> {
        self.anchor.map(|p| p.out.clone())
    }

    /// `(z rows, r)` for each order entry of the batch.
    pub fn pattern_pairs(&self, batch: &AlignBatch) -> Vec<(Modal<Tensor>, Modal<Tensor>)> {
        batch
            .orders
            .iter()
            .zip(&self.r)
            .map(|(o, r)| (self.z.map(|p| p.out.select_rows(&o.rows)), r.map(|p| p.out.clone())))
            .collect()
    }
}

pub fn align_forward(model: &AlignModel, batch: &AlignBatch) -> Result<AlignForward> {
    let (tower_out, tower_cache) = model.tower.forward_cached(&batch.input)?;
    let e = Modal::new(&tower_out.e_v, &tower_out.e_t);
    let z = model.projectors.try_map(|m, p| project(&p.transition, e.get(m)))?;
    let w = model.projectors.try_map(|m, p| project(&p.knowledge, e.get(m)))?;
    let r = batch
        .orders
        .iter()
        .map(|o| model.projectors.try_map(|m, p| project(&p.pattern, o.pooled.get(m))))
        .collect::<Result<Vec<_>>>()?;
    let anchor = model.projectors.try_map(|m, p| project(&p.anchor, batch.anchor.get(m)))?;
    Ok(AlignForward {
        tower_out,
        tower_cache,
        z,
        w,
        r,
        anchor,
    })
}

/// Loss components of one step (alignment terms as raw estimator values).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AlignLoss {
    pub total: f64,
    pub gen: f64,
    pub disentangle: f64,
    pub pattern: f64,
    pub anchor: f64,
}

/// `gen·Gen + disentangle·CLUB(z, w) − pattern·Σ_order MINE(z, r) − anchor·MINE(w, anchor)`
/// and its gradient w.r.t. every trainable tensor. Zero-weight terms are skipped.
pub fn align_backward(
    model: &AlignModel,
    fwd: &AlignForward,
    est: &AlignEstimators,
    batch: &AlignBatch,
    weights: &AlignWeights,
    perms: &AlignPerms,
) -> Result<(AlignLoss, AlignModel)> {
    let n = batch.len();
    let d_lat = model.projectors.visual.latent_dim();
    let mut loss = AlignLoss::default();
    let mut dz = Modal::from_fn(|_| Tensor::zeros(&[n, d_lat]));
    let mut dw = Modal::from_fn(|_| Tensor::zeros(&[n, d_lat]));
    let mut g_in = TowerGradIn::default();
    if weights.gen != 0.0 {
        let k_cat = model.tower.dims().k_cat;
        let (l, mut dv, mut dc) = gen_loss(&fwd.tower_out.vk_logits, &fwd.tower_out.cat_logits, &batch.targets, k_cat)?;
        loss.gen = l;
        loss.total += weights.gen * l;
        dv.scale(weights.gen);
        dc.scale(weights.gen);
        g_in.vk_logits = Some(dv);
        g_in.cat_logits = Some(dc);
    }
    if weights.disentangle != 0.0 {
        let (v, parts) = disentangle_loss(&est.club, &fwd.z(), &fwd.w())?;
        loss.disentangle = v;
        loss.total += weights.disentangle * v;
        for m in Modality::ALL {
            dz.get_mut(m).add_scaled(&parts.get(m).d_a, weights.disentangle);
            dw.get_mut(m).add_scaled(&parts.get(m).d_b, weights.disentangle);
        }
    }
    let mut dr: Vec<Modal<Tensor>> = fwd.r.iter().map(|r| r.map(|p| Tensor::zeros(&[p.out.rows(), d_lat]))).collect();
    if weights.pattern != 0.0 {
        for (k, (o, (zs, r))) in batch.orders.iter().zip(fwd.pattern_pairs(batch)).enumerate() {
            if o.rows.len() < 2 {
                continue;
            }
            let (v, parts) = pattern_align_loss(&est.mine_pattern, &zs, &r, &perms.pattern[k])?;
            loss.pattern += v;
            loss.total -= weights.pattern * v;
            for m in Modality::ALL {
                let g = parts.get(m);
                let target = dz.get_mut(m);
                for (j, &row) in o.rows.iter().enumerate() {
                    for (x, y) in target.row_mut(row).iter_mut().zip(g.d_a.row(j)) {
                        *x -= weights.pattern * y;
                    }
                }
                dr[k].get_mut(m).add_scaled(&g.d_b, -weights.pattern);
            }
        }
    }
    let mut d_anchor = Modal::from_fn(|_| Tensor::zeros(&[n, d_lat]));
    if weights.anchor != 0.0 {
        let (v, parts) = anchor_align_loss(&est.mine_anchor, &fwd.w(), &fwd.anchor(), &perms.anchor)?;
        loss.anchor = v;
        loss.total -= weights.anchor * v;
        for m in Modality::ALL {
            dw.get_mut(m).add_scaled(&parts.get(m).d_a, -weights.anchor);
            d_anchor.get_mut(m).add_scaled(&parts.get(m).d_b, -weights.anchor);
        }
    }
    let mut grads_proj = model.projectors.clone();
    let mut de = Modal::from_fn(|_| Tensor::zeros(&[n, model.tower.dims().d_sum]));
    for m in Modality::ALL {
        let set = model.projectors.get(m);
        let gset = grads_proj.get_mut(m);
        let (gt, de_z) = set.transition.backward(&fwd.z.get(m).cache, dz.get(m))?;
        let (gk, de_w) = set.knowledge.backward(&fwd.w.get(m).cache, dw.get(m))?;
        let (ga, _) = set.anchor.backward(&fwd.anchor.get(m).cache, d_anchor.get(m))?;
        let mut gp = crate::nn::params::zeros_like(&set.pattern);
        for (r, d) in fwd.r.iter().zip(&dr) {
            let (g, _) = set.pattern.backward(&r.get(m).cache, d.get(m))?;
            crate::nn::params::accumulate(&mut gp, &g, 1.0);
        }
        gset.transition = gt;
        gset.knowledge = gk;
        gset.anchor = ga;
        gset.pattern = gp;
        let e = de.get_mut(m);
        e.add_assign(&de_z);
        e.add_assign(&de_w);
    }
    g_in.e_v = Some(de.visual);
    g_in.e_t = Some(de.textual);
    let tower = model.tower.backward(&fwd.tower_cache, &g_in)?;
    if !loss.total.is_finite() {
        return Err(Error::Training(format!("non-finite distillation loss {loss:?}")));
    }
    Ok((
        loss,
        AlignModel {
            tower,
            projectors: grads_proj,
        },
    ))
}

/// One fitting step of every estimator whose loss weight is nonzero, on detached latents.
pub fn fit_estimators<R: Rng + ?Sized>(
    est: &mut AlignEstimators,
    fwd: &AlignForward,
    batch: &AlignBatch,
    weights: &AlignWeights,
    rng: &mut R,
) -> Result<()> {
    let (z, w) = (fwd.z(), fwd.w());
    for m in Modality::ALL {
        if weights.disentangle != 0.0 {
            est.club.get_mut(m).fit_step(z.get(m), w.get(m))?;
        }
        if weights.pattern != 0.0 {
            for (o, (zs, r)) in batch.orders.iter().zip(fwd.pattern_pairs(batch)) {
                if o.rows.len() >= 2 {
                    est.mine_pattern.get_mut(m).fit_step(zs.get(m), r.get(m), rng)?;
                }
            }
        }
        if weights.anchor != 0.0 {
            est.mine_anchor.get_mut(m).fit_step(w.get(m), fwd.anchor().get(m), rng)?;
        }
    }
    Ok(())
}
