//! Stage orchestration: stand-alone knowledge-tower training, transfer-tower
//! training on meta pairs, distillation into the knowledge tower, and export
//! of per-item summary embeddings.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Corpus, Item, ItemId, MetaPair, MAX_ORDER};
use crate::error::{Error, Result};
use crate::mi::{derangement, fit_club, fit_mine, ClubEstimator, FitConfig, MineEstimator};
use crate::nn::{Adam, LrSchedule, Tensor};
use crate::recsys::metrics::gr_metric;
use crate::tpa::{
    align_backward, align_forward, build_pattern_summaries, fit_estimators, new_projectors, AlignBatch, AlignEstimators,
    AlignLoss, AlignModel, AlignPerms, AlignWeights, Modal, Modality, OrderRows, PatternTable,
};
use crate::towers::{
    gen_loss, intra_cl_loss, predict_labels, GenTarget, KnowledgeTower, TowerDims, TowerGradIn, TowerInput,
    TransferTower,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub d_h: usize,
    pub d_sum: usize,
    pub d_lat: usize,
    pub k0_epochs: usize,
    pub k0_batch: usize,
    pub k0_lr: f64,
    pub t_epochs: usize,
    /// Targets per contrastive batch; each contributes two meta pairs.
    pub t_batch_targets: usize,
    pub t_lr: f64,
    pub k1_epochs: usize,
    pub k1_batch: usize,
    pub k1_lr: f64,
    /// Fraction of each stage's steps spent warming up.
    pub warmup_frac: f64,
    pub mu: f64,
    pub gen_weight: f64,
    pub gamma_disentangle: f64,
    pub gamma_pattern: f64,
    pub gamma_anchor: f64,
    pub tau: f64,
    pub est_hidden: usize,
    pub club_lr: f64,
    pub mine_lr: f64,
    /// Transfer → knowledge rounds.
    pub rounds: usize,
    /// Meta-target items withheld from distillation for estimator probes.
    pub probe_holdout: f64,
    pub probe_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            d_h: 128,
            d_sum: 64,
            d_lat: 32,
            k0_epochs: 15,
            k0_batch: 32,
            k0_lr: 0.003,
            t_epochs: 4,
            t_batch_targets: 16,
            t_lr: 0.002,
            k1_epochs: 60,
            k1_batch: 32,
            k1_lr: 0.001,
            warmup_frac: 0.05,
            mu: 0.005,
            gen_weight: 1.0,
            gamma_disentangle: 0.005,
            gamma_pattern: 1.0,
            gamma_anchor: 0.5,
            tau: 0.1,
            est_hidden: 64,
            club_lr: 0.003,
            mine_lr: 0.002,
            rounds: 1,
            probe_holdout: 0.2,
            probe_steps: 400,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            ("mu", self.mu),
            ("gen_weight", self.gen_weight),
            ("gamma_disentangle", self.gamma_disentangle),
            ("gamma_pattern", self.gamma_pattern),
            ("gamma_anchor", self.gamma_anchor),
        ];
        if let Some((k, v)) = weights.iter().find(|(_, v)| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::Config(format!("loss weight {k} = {v} must be finite and >= 0")));
        }
        if self.tau <= 0.0 {
            return Err(Error::Config(format!("tau = {} must be positive", self.tau)));
        }
        if [self.d_h, self.d_sum, self.d_lat, self.k0_batch, self.k1_batch, self.t_batch_targets, self.est_hidden]
            .contains(&0)
        {
            return Err(Error::Config("dimensions and batch sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.probe_holdout) || !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(Error::Config("probe_holdout must be in [0, 1) and warmup_frac in [0, 1]".into()));
        }
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be >= 1".into()));
        }
        Ok(())
    }

    pub fn align_weights(&self) -> AlignWeights {
        AlignWeights {
            gen: self.gen_weight,
            disentangle: self.gamma_disentangle,
            pattern: self.gamma_pattern,
            anchor: self.gamma_anchor,
        }
    }
}

/// Independent seeds for every randomized step, derived from one master seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSeeds {
    pub data: u64,
    pub split: u64,
    pub k0: u64,
    pub t: u64,
    pub k1: u64,
    pub estimators: u64,
    pub probe: u64,
    pub rec: u64,
    pub baseline: u64,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

impl StageSeeds {
    pub fn derive(master: u64) -> Self {
        let s = |k: u64| splitmix(master ^ splitmix(k));
        Self {
            data: s(1),
            split: s(2),
            k0: s(3),
            t: s(4),
            k1: s(5),
            estimators: s(6),
            probe: s(7),
            rec: s(8),
            baseline: s(9),
        }
    }
}

/// Per-epoch training record. Unused components are `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub stage: String,
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
    pub gen: Option<f64>,
    pub intra_cl: Option<f64>,
    pub disentangle: Option<f64>,
    pub pattern: Option<f64>,
    pub anchor: Option<f64>,
    pub gr_vk: Option<f64>,
    pub gr_cat: Option<f64>,
    pub probe_club: Option<f64>,
    pub probe_mine: Option<f64>,
}

pub const LOG_COLUMNS: &str =
    "stage,epoch,step,loss,gen,intra_cl,disentangle,pattern,anchor,gr_vk,gr_cat,probe_club,probe_mine";

impl LogRow {
    pub fn to_csv(&self) -> String {
        let o = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!(
            "{},{},{},{:.6},{},{},{},{},{},{},{},{},{}",
            self.stage,
            self.epoch,
            self.step,
            self.loss,
            o(self.gen),
            o(self.intra_cl),
            o(self.disentangle),
            o(self.pattern),
            o(self.anchor),
            o(self.gr_vk),
            o(self.gr_cat),
            o(self.probe_club),
            o(self.probe_mine)
        )
    }
}

fn schedule(cfg: &TrainConfig, max_lr: f64, total_steps: usize) -> LrSchedule {
    LrSchedule::new(max_lr, total_steps as u64, cfg.warmup_frac)
}

/// Exact-match rates of the tower's label predictions over `items`.
pub fn label_accuracy(tower: &KnowledgeTower, items: &[&Item]) -> Result<(f64, f64)> {
    let mut preds = Vec::with_capacity(items.len());
    for chunk in items.chunks(512) {
        let out = tower.encode_items(chunk)?;
        preds.extend(predict_labels(&out, tower.dims().k_cat));
    }
    let truths: Vec<GenTarget> = items.iter().map(|i| GenTarget::from(*i)).collect();
    let gr = gr_metric(&preds, &truths)?;
    Ok((gr.vk, gr.cat))
}

/// Generation-loss training of a knowledge tower on `items`.
///
/// Items are reshuffled each epoch from a stream seeded by `seed`.
pub fn train_gen(
    tower: &mut KnowledgeTower,
    items: &[&Item],
    epochs: usize,
    batch: usize,
    lr: LrSchedule,
    seed: u64,
    stage: &str,
) -> Result<Vec<LogRow>> {
    if items.is_empty() {
        return Err(Error::Training(format!("{stage}: no items to train on")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Adam::new(lr.rate(0));
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut log = Vec::with_capacity(epochs);
    let k_cat = tower.dims().k_cat;
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0;
        for idx in order.chunks(batch) {
            let chunk: Vec<&Item> = idx.iter().map(|&i| items[i]).collect();
            let input = TowerInput::from_items(&chunk)?;
            let targets: Vec<GenTarget> = chunk.iter().map(|i| GenTarget::from(*i)).collect();
            let (out, cache) = tower.forward_cached(&input)?;
            let (l, dv, dc) = gen_loss(&out.vk_logits, &out.cat_logits, &targets, k_cat)?;
            if !l.is_finite() {
                return Err(Error::Training(format!("{stage}: non-finite loss at epoch {epoch}")));
            }
            let g = tower.backward(
                &cache,
                &TowerGradIn {
                    vk_logits: Some(dv),
                    cat_logits: Some(dc),
                    ..Default::default()
                },
            )?;
            opt.lr = lr.rate(opt.steps());
            opt.step(tower, &g)?;
            total += l;
            count += 1;
        }
        let (gr_vk, gr_cat) = label_accuracy(tower, items)?;
        debug!("{stage} epoch {epoch}: loss {:.4} gr_vk {gr_vk:.3} gr_cat {gr_cat:.3}", total / count as f64);
        log.push(LogRow {
            stage: stage.into(),
            epoch,
            step: opt.steps(),
            loss: total / count as f64,
            gen: Some(total / count as f64),
            gr_vk: Some(gr_vk),
            gr_cat: Some(gr_cat),
            ..Default::default()
        });
    }
    Ok(log)
}

/// Trains the stage-one knowledge tower on every corpus item.
pub fn stage1_train(corpus: &Corpus, cfg: &TrainConfig, seed: u64) -> Result<(KnowledgeTower, Vec<LogRow>)> {
    cfg.validate()?;
    let dims = TowerDims::for_corpus(corpus, cfg.d_h, cfg.d_sum);
    let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tower = KnowledgeTower::new(dims, &mut init_rng);
    let items: Vec<&Item> = corpus.items().iter().collect();
    let steps = cfg.k0_epochs * items.len().div_ceil(cfg.k0_batch);
    let log = train_gen(
        &mut tower,
        &items,
        cfg.k0_epochs,
        cfg.k0_batch,
        schedule(cfg, cfg.k0_lr, steps),
        init_rng.random(),
        "k0",
    )?;
    Ok((tower, log))
}

/// Contrastive batches: `targets` pairs of meta pairs, all of one order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairBatch {
    pub order: usize,
    /// Consecutive rows `2k, 2k+1` share a target.
    pub pairs: Vec<MetaPair>,
}

/// Per-epoch batch plan for the transfer tower.
///
/// Each target with at least two pairs contributes two pairs per epoch, taken
/// round-robin from its (once-shuffled) pair list so later epochs see later
/// pairs. Orders alternate batch by batch.
pub struct PairSampler {
    groups: Vec<Vec<(ItemId, Vec<MetaPair>)>>,
    batch_targets: usize,
    rng: ChaCha8Rng,
}

impl PairSampler {
    pub fn new(pairs: &[MetaPair], batch_targets: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut groups = Vec::new();
        for order in 1..=MAX_ORDER {
            let mut by_target: BTreeMap<ItemId, Vec<MetaPair>> = BTreeMap::new();
            for p in pairs.iter().filter(|p| p.order == order) {
                by_target.entry(p.target).or_default().push(p.clone());
            }
            let mut eligible: Vec<(ItemId, Vec<MetaPair>)> = by_target.into_iter().filter(|(_, v)| v.len() >= 2).collect();
            if eligible.is_empty() {
                warn!("no order-{order} target has two meta pairs; contrastive term unused for that order");
            }
            for (_, v) in &mut eligible {
                v.shuffle(&mut rng);
            }
            groups.push(eligible);
        }
        if groups.iter().all(|g| g.is_empty()) {
            return Err(Error::Training("train-t: no meta target has two surviving pairs".into()));
        }
        Ok(Self {
            groups,
            batch_targets: batch_targets.max(1),
            rng,
        })
    }

    pub fn epoch(&mut self, epoch: usize) -> Vec<PairBatch> {
        let mut per_order: Vec<Vec<PairBatch>> = Vec::new();
        for (k, groups) in self.groups.iter().enumerate() {
            let mut idx: Vec<usize> = (0..groups.len()).collect();
            idx.shuffle(&mut self.rng);
            let batches = idx
                .chunks(self.batch_targets)
                .map(|chunk| {
                    let mut pairs = Vec::with_capacity(2 * chunk.len());
                    for &g in chunk {
                        let list = &groups[g].1;
                        let n = list.len();
                        pairs.push(list[(2 * epoch) % n].clone());
                        pairs.push(list[(2 * epoch + 1) % n].clone());
                    }
                    PairBatch { order: k + 1, pairs }
                })
                .collect();
            per_order.push(batches);
        }
        let mut out = Vec::new();
        let longest = per_order.iter().map(Vec::len).max().unwrap_or(0);
        for i in 0..longest {
            for batches in &per_order {
                if let Some(b) = batches.get(i) {
                    out.push(b.clone());
                }
            }
        }
        out
    }
}

/// Trains the transfer tower with `gen + mu·contrastive` on surviving meta pairs.
pub fn stage2_t_train(corpus: &Corpus, pairs: &[MetaPair], cfg: &TrainConfig, seed: u64) -> Result<(TransferTower, Vec<LogRow>)> {
    cfg.validate()?;
    let dims = TowerDims::for_corpus(corpus, cfg.d_h, cfg.d_sum);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tower = TransferTower::new(dims, &mut rng);
    let mut sampler = PairSampler::new(pairs, cfg.t_batch_targets, rng.random())?;
    let plan: Vec<Vec<PairBatch>> = (0..cfg.t_epochs).map(|e| sampler.epoch(e)).collect();
    let total_steps: usize = plan.iter().map(Vec::len).sum();
    let lr = schedule(cfg, cfg.t_lr, total_steps);
    let mut opt = Adam::new(lr.rate(0));
    let mut log = Vec::new();
    for (epoch, batches) in plan.iter().enumerate() {
        let (mut sum_gen, mut sum_cl) = (0.0, 0.0);
        for b in batches {
            let queries: Vec<&[ItemId]> = b.pairs.iter().map(|p| p.query.as_slice()).collect();
            let input = TowerInput::from_queries(corpus, &queries)?;
            let targets = b
                .pairs
                .iter()
                .map(|p| corpus.item(p.target).map(GenTarget::from))
                .collect::<Result<Vec<_>>>()?;
            let (out, cache) = tower.forward_cached(&input)?;
            let (lg, dv, dc) = gen_loss(&out.vk_logits, &out.cat_logits, &targets, dims.k_cat)?;
            let mut grad_in = TowerGradIn {
                vk_logits: Some(dv),
                cat_logits: Some(dc),
                ..Default::default()
            };
            let mut lc = 0.0;
            if cfg.mu != 0.0 {
                let ids: Vec<ItemId> = b.pairs.iter().map(|p| p.target).collect();
                let (lv, mut gv) = intra_cl_loss(&out.e_v, &ids, cfg.tau)?;
                let (lt, mut gt) = intra_cl_loss(&out.e_t, &ids, cfg.tau)?;
                gv.scale(cfg.mu);
                gt.scale(cfg.mu);
                grad_in.e_v = Some(gv);
                grad_in.e_t = Some(gt);
                lc = lv + lt;
            }
            let loss = lg + cfg.mu * lc;
            if !loss.is_finite() {
                return Err(Error::Training(format!("train-t: non-finite loss at epoch {epoch}")));
            }
            let g = tower.backward(&cache, &grad_in)?;
            opt.lr = lr.rate(opt.steps());
            opt.step(&mut tower, &g)?;
            sum_gen += lg;
            sum_cl += lc;
        }
        let n = batches.len().max(1) as f64;
        debug!("t epoch {epoch}: gen {:.4} intra_cl {:.4}", sum_gen / n, sum_cl / n);
        log.push(LogRow {
            stage: "t".into(),
            epoch,
            step: opt.steps(),
            loss: (sum_gen + cfg.mu * sum_cl) / n,
            gen: Some(sum_gen / n),
            intra_cl: Some(sum_cl / n),
            ..Default::default()
        });
    }
    Ok((tower, log))
}

/// Stage-one summaries of every corpus item, frozen for the anchor term.
#[derive(Clone, Debug)]
pub struct AnchorCache {
    rows: HashMap<ItemId, usize>,
    e: Modal<Tensor>,
}

impl AnchorCache {
    pub fn build(k0: &KnowledgeTower, corpus: &Corpus) -> Result<Self> {
        let table = export_embeddings(k0, corpus, "k0")?;
        let ids: Vec<ItemId> = table.rows.keys().copied().collect();
        let e = Modal::from_fn(|m| {
            let rows: Vec<&[f64]> = ids.iter().map(|id| table.rows[id].get(m).as_slice()).collect();
            Tensor::from_rows(&rows).expect("corpus has items")
        });
        Ok(Self {
            rows: ids.into_iter().enumerate().map(|(i, id)| (id, i)).collect(),
            e,
        })
    }

    fn select(&self, ids: &[ItemId]) -> Result<Modal<Tensor>> {
        let idx = ids
            .iter()
            .map(|id| self.rows.get(id).copied().ok_or(Error::Referential { item: *id, context: "anchor cache".into() }))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.e.map(|t| t.select_rows(&idx)))
    }
}

fn align_batch(corpus: &Corpus, ids: &[ItemId], table: &PatternTable, anchors: &AnchorCache) -> Result<AlignBatch> {
    let items = ids.iter().map(|&i| corpus.item(i)).collect::<Result<Vec<_>>>()?;
    let mut orders = Vec::new();
    for order in 1..=MAX_ORDER {
        let rows: Vec<usize> = (0..ids.len()).filter(|&k| table.get(ids[k], order).is_some()).collect();
        if rows.is_empty() {
            continue;
        }
        let pooled = Modal::from_fn(|m| {
            let v: Vec<&[f64]> = rows
                .iter()
                .map(|&k| table.get(ids[k], order).expect("row filtered above").pooled.get(m).as_slice())
                .collect();
            Tensor::from_rows(&v).expect("rows nonempty")
        });
        orders.push(OrderRows { order, rows, pooled });
    }
    Ok(AlignBatch {
        input: TowerInput::from_items(&items)?,
        targets: items.iter().map(|i| GenTarget::from(*i)).collect(),
        orders,
        anchor: anchors.select(ids)?,
    })
}

/// Held-out estimator readings: fresh probes fitted on training items, read on held-out items.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReading {
    /// CLUB reading of (transition-aware, knowledge-reflected) latents, summed over modalities.
    pub club: f64,
    /// MINE reading of (transition-aware, pattern) latents, summed over modalities.
    pub mine: f64,
}

struct Latents {
    z: Modal<Tensor>,
    w: Modal<Tensor>,
    /// Stacked over orders: transition-aware rows and their pattern latents.
    zr: Modal<(Tensor, Tensor)>,
}

fn latents(model: &AlignModel, corpus: &Corpus, ids: &[ItemId], table: &PatternTable, anchors: &AnchorCache) -> Result<Latents> {
    let batch = align_batch(corpus, ids, table, anchors)?;
    let fwd = align_forward(model, &batch)?;
    let pairs = fwd.pattern_pairs(&batch);
    let zr = Modal::from_fn(|m| {
        let zs: Vec<&Tensor> = pairs.iter().map(|(z, _)| z.get(m)).collect();
        let rs: Vec<&Tensor> = pairs.iter().map(|(_, r)| r.get(m)).collect();
        (vstack(&zs), vstack(&rs))
    });
    Ok(Latents {
        z: fwd.z(),
        w: fwd.w(),
        zr,
    })
}

fn vstack(parts: &[&Tensor]) -> Tensor {
    let cols = parts[0].cols();
    let data: Vec<f64> = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
    let rows = data.len() / cols;
    Tensor::matrix(rows, cols, data).expect("consistent columns")
}

const PROBE_PERMS: usize = 16;

pub fn probe_readings(
    model: &AlignModel,
    corpus: &Corpus,
    fit_ids: &[ItemId],
    eval_ids: &[ItemId],
    table: &PatternTable,
    anchors: &AnchorCache,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<ProbeReading> {
    let fit = latents(model, corpus, fit_ids, table, anchors)?;
    let eval = latents(model, corpus, eval_ids, table, anchors)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fit_cfg = FitConfig {
        steps: cfg.probe_steps,
        batch: 64,
        seed,
    };
    let mut reading = ProbeReading { club: 0.0, mine: 0.0 };
    for m in Modality::ALL {
        let mut club = ClubEstimator::new(cfg.d_lat, cfg.d_lat, cfg.est_hidden, cfg.club_lr, &mut rng);
        fit_club(&mut club, fit.z.get(m), fit.w.get(m), &fit_cfg)?;
        reading.club += club.estimate(eval.z.get(m), eval.w.get(m))?.value;
        let mut mine = MineEstimator::new(cfg.d_lat, cfg.d_lat, cfg.est_hidden, cfg.mine_lr, &mut rng);
        let (fz, fr) = fit.zr.get(m);
        fit_mine(&mut mine, fz, fr, &fit_cfg)?;
        let (ez, er) = eval.zr.get(m);
        let mut acc = 0.0;
        for _ in 0..PROBE_PERMS {
            acc += mine.estimate(ez, er, &derangement(ez.rows(), &mut rng))?.value;
        }
        reading.mine += acc / PROBE_PERMS as f64;
    }
    Ok(reading)
}

/// Everything produced by the distillation stage.
#[derive(Clone, Debug)]
pub struct DistillOutcome {
    pub model: AlignModel,
    pub estimators: AlignEstimators,
    pub log: Vec<LogRow>,
    pub probe_start: Option<ProbeReading>,
    pub probe_end: Option<ProbeReading>,
    pub train_items: Vec<ItemId>,
    pub holdout_items: Vec<ItemId>,
}

/// Splits meta-target items into (training, held-out) by a seeded shuffle.
pub fn holdout_split(targets: &[ItemId], frac: f64, seed: u64) -> (Vec<ItemId>, Vec<ItemId>) {
    let mut ids = targets.to_vec();
    ids.sort_unstable();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let k = (ids.len() as f64 * frac).round() as usize;
    let k = if k > 0 && ids.len() - k < 2 { 0 } else { k };
    let mut held = ids[..k].to_vec();
    let mut train = ids[k..].to_vec();
    held.sort_unstable();
    train.sort_unstable();
    (train, held)
}

/// Distills transfer patterns into a copy of the stage-one tower.
///
/// The knowledge tower and projectors have separate optimizers, and the
/// item order is drawn exactly as in [`train_gen`] with the same seed, so all
/// alignment weights at zero reproduce continued generation training.
pub fn stage2_k_train(
    corpus: &Corpus,
    k0: &KnowledgeTower,
    t: &TransferTower,
    pairs: &[MetaPair],
    cfg: &TrainConfig,
    seeds: &StageSeeds,
    with_probes: bool,
) -> Result<DistillOutcome> {
    cfg.validate()?;
    let table = build_pattern_summaries(t, pairs, corpus)?;
    if table.is_empty() {
        return Err(Error::Training("train-k1: no meta targets to distill on".into()));
    }
    let anchors = AnchorCache::build(k0, corpus)?;
    let (train_ids, held_ids) = holdout_split(&table.targets(), cfg.probe_holdout, seeds.probe);
    let mut init_rng = ChaCha8Rng::seed_from_u64(seeds.estimators);
    let mut model = AlignModel {
        tower: k0.clone(),
        projectors: new_projectors(cfg.d_sum, cfg.d_lat, &mut init_rng),
    };
    let mut est = AlignEstimators::new(cfg.d_lat, cfg.est_hidden, cfg.club_lr, cfg.mine_lr, &mut init_rng);
    let mut fit_rng = ChaCha8Rng::seed_from_u64(init_rng.random());
    let mut perm_rng = ChaCha8Rng::seed_from_u64(init_rng.random());
    let weights = cfg.align_weights();
    let probe = |model: &AlignModel| -> Result<Option<ProbeReading>> {
        if !with_probes || held_ids.len() < 2 {
            return Ok(None);
        }
        probe_readings(model, corpus, &train_ids, &held_ids, &table, &anchors, cfg, seeds.probe).map(Some)
    };
    let probe_start = probe(&model)?;
    let mut order_rng = ChaCha8Rng::seed_from_u64(seeds.k1);
    let mut order: Vec<usize> = (0..train_ids.len()).collect();
    let steps = cfg.k1_epochs * train_ids.len().div_ceil(cfg.k1_batch);
    let lr = schedule(cfg, cfg.k1_lr, steps);
    let mut tower_opt = Adam::new(lr.rate(0));
    let mut proj_opt = Adam::new(lr.rate(0));
    let mut log = Vec::new();
    for epoch in 0..cfg.k1_epochs {
        order.shuffle(&mut order_rng);
        let mut sums = AlignLoss::default();
        let mut count = 0.0;
        for idx in order.chunks(cfg.k1_batch) {
            let ids: Vec<ItemId> = idx.iter().map(|&i| train_ids[i]).collect();
            let batch = align_batch(corpus, &ids, &table, &anchors)?;
            let fwd = align_forward(&model, &batch)?;
            if batch.len() >= 2 {
                fit_estimators(&mut est, &fwd, &batch, &weights, &mut fit_rng)?;
            }
            let mut w = weights;
            if batch.len() < 2 {
                w.disentangle = 0.0;
                w.anchor = 0.0;
            }
            let perms = AlignPerms::sample(&batch, &mut perm_rng);
            let (loss, grads) = align_backward(&model, &fwd, &est, &batch, &w, &perms)?;
            let rate = lr.rate(tower_opt.steps());
            tower_opt.lr = rate;
            proj_opt.lr = rate;
            tower_opt.step(&mut model.tower, &grads.tower)?;
            proj_opt.step(&mut model.projectors, &grads.projectors)?;
            sums.total += loss.total;
            sums.gen += loss.gen;
            sums.disentangle += loss.disentangle;
            sums.pattern += loss.pattern;
            sums.anchor += loss.anchor;
            count += 1.0;
        }
        debug!(
            "k1 epoch {epoch}: total {:.4} gen {:.4} club {:.4} mine_pattern {:.4} mine_anchor {:.4}",
            sums.total / count,
            sums.gen / count,
            sums.disentangle / count,
            sums.pattern / count,
            sums.anchor / count
        );
        log.push(LogRow {
            stage: "k1".into(),
            epoch,
            step: tower_opt.steps(),
            loss: sums.total / count,
            gen: Some(sums.gen / count),
            disentangle: Some(sums.disentangle / count),
            pattern: Some(sums.pattern / count),
            anchor: Some(sums.anchor / count),
            ..Default::default()
        });
    }
    let probe_end = probe(&model)?;
    if let (Some(a), Some(b)) = (probe_start, probe_end) {
        info!("k1 probes: club {:.4} -> {:.4}, mine {:.4} -> {:.4}", a.club, b.club, a.mine, b.mine);
        if let Some(last) = log.last_mut() {
            last.probe_club = Some(b.club);
            last.probe_mine = Some(b.mine);
        }
        if let Some(first) = log.first_mut() {
            first.probe_club.get_or_insert(a.club);
            first.probe_mine.get_or_insert(a.mine);
        }
    }
    Ok(DistillOutcome {
        model,
        estimators: est,
        log,
        probe_start,
        probe_end,
        train_items: train_ids,
        holdout_items: held_ids,
    })
}

/// Items that distillation trains on given `pairs` and `cfg` (for the equivalence with [`train_gen`]).
pub fn distill_training_items(t: &TransferTower, pairs: &[MetaPair], corpus: &Corpus, cfg: &TrainConfig, seeds: &StageSeeds) -> Result<Vec<ItemId>> {
    let table = build_pattern_summaries(t, pairs, corpus)?;
    Ok(holdout_split(&table.targets(), cfg.probe_holdout, seeds.probe).0)
}

/// Per-item visual and textual summary embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub stage: String,
    pub dim: usize,
    pub rows: BTreeMap<ItemId, Modal<Vec<f64>>>,
}

#[derive(Serialize, Deserialize)]
struct TableHeader {
    stage: String,
    dim: usize,
    items: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_hash: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct TableRow {
    id: ItemId,
    ev: Vec<f64>,
    et: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum TableLine {
    Header { header: TableHeader },
    Row(TableRow),
}

impl EmbeddingTable {
    /// Standard-normal vectors per item, the uninformed baseline.
    pub fn random(corpus: &Corpus, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let draw = |rng: &mut ChaCha8Rng| (0..dim).map(|_| StandardNormal.sample(rng)).collect::<Vec<f64>>();
        let rows = corpus
            .items()
            .iter()
            .map(|i| (i.id, Modal::new(draw(&mut rng), draw(&mut rng))))
            .collect();
        Self {
            stage: "random".into(),
            dim,
            rows,
        }
    }

    pub fn get(&self, id: ItemId) -> Result<&Modal<Vec<f64>>> {
        self.rows.get(&id).ok_or(Error::Referential {
            item: id,
            context: format!("embedding table {}", self.stage),
        })
    }

    /// `ids.len() x dim` matrix of one modality.
    pub fn matrix(&self, ids: &[ItemId], m: Modality) -> Result<Tensor> {
        let rows = ids.iter().map(|&id| self.get(id).map(|r| r.get(m).as_slice())).collect::<Result<Vec<_>>>()?;
        Tensor::from_rows(&rows)
    }

    pub fn save(&self, path: &Path, config_hash: Option<&str>) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        let header = TableLine::Header {
            header: TableHeader {
                stage: self.stage.clone(),
                dim: self.dim,
                items: self.rows.len(),
                config_hash: config_hash.map(str::to_string),
            },
        };
        let mut write = |line: &TableLine| -> Result<()> {
            serde_json::to_writer(&mut w, line)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))
        };
        write(&header)?;
        for (id, r) in &self.rows {
            write(&TableLine::Row(TableRow {
                id: *id,
                ev: r.visual.clone(),
                et: r.textual.clone(),
            }))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut header: Option<TableHeader> = None;
        let mut rows = BTreeMap::new();
        for (n, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: TableLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: n + 1,
                msg: e.to_string(),
            })?;
            match parsed {
                TableLine::Header { header: h } => header = Some(h),
                TableLine::Row(r) => {
                    rows.insert(r.id, Modal::new(r.ev, r.et));
                }
            }
        }
        let h = header.ok_or_else(|| Error::Parse {
            path: path.display().to_string(),
            line: 1,
            msg: "missing header record".into(),
        })?;
        if rows.values().any(|r: &Modal<Vec<f64>>| r.visual.len() != h.dim || r.textual.len() != h.dim) {
            return Err(Error::shape("embedding table rows", h.dim, "mismatched row"));
        }
        Ok(Self {
            stage: h.stage,
            dim: h.dim,
            rows,
        })
    }
}

/// One forward pass per item through a knowledge tower.
pub fn export_embeddings(tower: &KnowledgeTower, corpus: &Corpus, stage: &str) -> Result<EmbeddingTable> {
    let mut rows = BTreeMap::new();
    for chunk in corpus.items().chunks(512) {
        let items: Vec<&Item> = chunk.iter().collect();
        let out = tower.encode_items(&items)?;
        for (r, it) in chunk.iter().enumerate() {
            rows.insert(it.id, Modal::new(out.e_v.row(r).to_vec(), out.e_t.row(r).to_vec()));
        }
    }
    Ok(EmbeddingTable {
        stage: stage.into(),
        dim: tower.dims().d_sum,
        rows,
    })
}
