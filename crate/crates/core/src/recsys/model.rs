//! Attention-pooling session recommender over fused ID and modal item vectors.

use log::debug;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::metrics::{rank_of, RankMetrics};
use crate::data::{Corpus, ItemId, Session};
use crate::error::{Error, Result};
use crate::nn::params::join;
use crate::nn::{softmax, softmax_cross_entropy, Adam, Linear, Parameters, Tensor};
use crate::pipeline::EmbeddingTable;
use crate::tpa::Modal;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecConfig {
    pub d_rec: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Most recent items kept from a prefix.
    pub max_len: usize,
    /// Per-batch probability of hiding an item's ID row during training, so
    /// the modal path learns to score items on its own. Ignored without
    /// modal features.
    pub id_dropout: f64,
}

impl Default for RecConfig {
    fn default() -> Self {
        Self {
            d_rec: 100,
            epochs: 10,
            batch: 50,
            lr: 0.001,
            max_len: 10,
            id_dropout: 0.99,
        }
    }
}

/// Two stacked affine maps from summary space into recommendation space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adapter {
    pub inner: Linear,
    pub outer: Linear,
}

impl Adapter {
    pub fn new<R: rand::Rng + ?Sized>(d_sum: usize, d_rec: usize, rng: &mut R) -> Self {
        Self {
            inner: Linear::new(d_sum, d_rec, rng),
            outer: Linear::new(d_rec, d_rec, rng),
        }
    }

    fn forward_cached(&self, e: &Tensor) -> Result<(Tensor, Tensor)> {
        let h = self.inner.forward(e)?;
        let y = self.outer.forward(&h)?;
        Ok((y, h))
    }

    pub fn forward(&self, e: &Tensor) -> Result<Tensor> {
        self.forward_cached(e).map(|(y, _)| y)
    }

    fn backward(&self, e: &Tensor, h: &Tensor, dy: &Tensor) -> Result<Adapter> {
        let (outer, dh) = self.outer.backward(h, dy)?;
        let inner = self.inner.backward_params(e, &dh)?;
        Ok(Adapter { inner, outer })
    }
}

impl Parameters for Adapter {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.inner.visit(&join(prefix, "inner"), f);
        self.outer.visit(&join(prefix, "outer"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.inner.visit_mut(&join(prefix, "inner"), f);
        self.outer.visit_mut(&join(prefix, "outer"), f);
    }
}

/// Applies per-modality adapters to summary embeddings.
pub fn adapt(adapters: &Modal<Adapter>, e: &Modal<Tensor>) -> Result<Modal<Tensor>> {
    adapters.try_map(|m, a| a.forward(e.get(m)))
}

/// Frozen modal inputs: summary vectors in ascending item-id order.
pub type ModalFeatures = Modal<Tensor>;

/// Session recommender. Trainable: ID table, adapters, fusion, attention query
/// and output map. `features` is fixed input, not a parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecModel {
    pub item_ids: Vec<ItemId>,
    pub id: Tensor,
    pub adapters: Option<Modal<Adapter>>,
    pub fuse: Linear,
    pub query: Linear,
    pub out: Linear,
    pub features: Option<ModalFeatures>,
}

impl Parameters for RecModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "id"), &self.id);
        if let Some(a) = &self.adapters {
            a.visit(&join(prefix, "adapters"), f);
        }
        self.fuse.visit(&join(prefix, "fuse"), f);
        self.query.visit(&join(prefix, "query"), f);
        self.out.visit(&join(prefix, "out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "id"), &mut self.id);
        if let Some(a) = &mut self.adapters {
            a.visit_mut(&join(prefix, "adapters"), f);
        }
        self.fuse.visit_mut(&join(prefix, "fuse"), f);
        self.query.visit_mut(&join(prefix, "query"), f);
        self.out.visit_mut(&join(prefix, "out"), f);
    }
}

struct ItemCache {
    adapted: Option<Modal<(Tensor, Tensor)>>,
    fused_in: Tensor,
}

/// Forward state of a batch of prefixes.
pub struct SessionCache {
    items: ItemCache,
    x: Tensor,
    prefixes: Vec<Vec<usize>>,
    last: Tensor,
    q: Tensor,
    alpha: Vec<Vec<f64>>,
    h: Tensor,
    s: Tensor,
}

impl RecModel {
    /// `features = None` builds the ID-only model.
    pub fn new(corpus: &Corpus, features: Option<&EmbeddingTable>, d_rec: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut item_ids: Vec<ItemId> = corpus.items().iter().map(|i| i.id).collect();
        item_ids.sort_unstable();
        let normal = Normal::new(0.0, 0.1).expect("valid sd");
        let id = Tensor::matrix(
            item_ids.len(),
            d_rec,
            (0..item_ids.len() * d_rec).map(|_| normal.sample(&mut rng)).collect(),
        )?;
        let (adapters, feats) = match features {
            Some(t) => {
                let feats = Modal::from_fn(|m| t.matrix(&item_ids, m));
                let feats = Modal::new(feats.visual?, feats.textual?);
                (Some(Modal::from_fn(|_| Adapter::new(t.dim, d_rec, &mut rng))), Some(feats))
            }
            None => (None, None),
        };
        let fuse_in = if feats.is_some() { 3 * d_rec } else { d_rec };
        Ok(Self {
            fuse: Linear::new(fuse_in, d_rec, &mut rng),
            query: Linear::new(d_rec, d_rec, &mut rng),
            out: Linear::new(2 * d_rec, d_rec, &mut rng),
            item_ids,
            id,
            adapters,
            features: feats,
        })
    }

    pub fn d_rec(&self) -> usize {
        self.id.cols()
    }

    pub fn num_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn index_of(&self, id: ItemId) -> Result<usize> {
        self.item_ids.binary_search(&id).map_err(|_| Error::Referential {
            item: id,
            context: "recommender item table".into(),
        })
    }

    /// Sets the ID rows of `ids` to zero, leaving only modal signal for them.
    pub fn zero_id_rows(&mut self, ids: &[ItemId]) -> Result<()> {
        for &i in ids {
            let r = self.index_of(i)?;
            self.id.row_mut(r).fill(0.0);
        }
        Ok(())
    }

    fn item_reprs(&self) -> Result<(Tensor, ItemCache)> {
        let adapted = match (&self.adapters, &self.features) {
            (Some(a), Some(f)) => Some(a.try_map(|m, ad| ad.forward_cached(f.get(m)))?),
            (None, None) => None,
            _ => return Err(Error::Config("adapters and modal features must be set together".into())),
        };
        let fused_in = match &adapted {
            Some(a) => Tensor::hcat(&[&self.id, &a.visual.0, &a.textual.0])?,
            None => self.id.clone(),
        };
        let x = self.fuse.forward(&fused_in)?;
        Ok((x, ItemCache { adapted, fused_in }))
    }

    /// Fused vectors of all items, ascending id order.
    pub fn item_vectors(&self) -> Result<Tensor> {
        self.item_reprs().map(|(x, _)| x)
    }

    fn indices(&self, prefixes: &[&[ItemId]]) -> Result<Vec<Vec<usize>>> {
        prefixes
            .iter()
            .map(|p| {
                if p.is_empty() {
                    return Err(Error::Batch("empty session prefix".into()));
                }
                p.iter().map(|&i| self.index_of(i)).collect()
            })
            .collect()
    }

    /// Scores of every item (ascending id order) for each prefix.
    pub fn forward(&self, prefixes: &[&[ItemId]]) -> Result<(Tensor, SessionCache)> {
        let idx = self.indices(prefixes)?;
        let (x, items) = self.item_reprs()?;
        let d = self.d_rec();
        let scale = 1.0 / (d as f64).sqrt();
        let last_rows: Vec<usize> = idx.iter().map(|p| *p.last().expect("nonempty")).collect();
        let last = x.select_rows(&last_rows);
        let q = self.query.forward(&last)?;
        let mut pooled = Tensor::zeros(&[idx.len(), d]);
        let mut alpha = Vec::with_capacity(idx.len());
        for (b, p) in idx.iter().enumerate() {
            let logits: Vec<f64> = p.iter().map(|&j| scale * crate::nn::tensor::dot(q.row(b), x.row(j))).collect();
            let a = softmax(&logits);
            let out = pooled.row_mut(b);
            for (&j, &w) in p.iter().zip(&a) {
                for (o, v) in out.iter_mut().zip(x.row(j)) {
                    *o += w * v;
                }
            }
            alpha.push(a);
        }
        let h = Tensor::hcat(&[&pooled, &last])?;
        let s = self.out.forward(&h)?;
        let scores = s.matmul_t(&x)?;
        Ok((
            scores,
            SessionCache {
                items,
                x,
                prefixes: idx,
                last,
                q,
                alpha,
                h,
                s,
            },
        ))
    }

    pub fn scores(&self, prefixes: &[&[ItemId]]) -> Result<Tensor> {
        self.forward(prefixes).map(|(s, _)| s)
    }

    /// Parameter gradients from the gradient of the score matrix.
    pub fn backward(&self, cache: &SessionCache, dscores: &Tensor) -> Result<RecModel> {
        let d = self.d_rec();
        let scale = 1.0 / (d as f64).sqrt();
        let x = &cache.x;
        let ds = dscores.matmul(x)?;
        let mut dx = dscores.t_matmul(&cache.s)?;
        let (g_out, dh) = self.out.backward(&cache.h, &ds)?;
        let parts = dh.hsplit(&[d, d]);
        let (dpooled, mut dlast) = (&parts[0], parts[1].clone());
        let mut dq = Tensor::zeros(&[cache.prefixes.len(), d]);
        for (b, p) in cache.prefixes.iter().enumerate() {
            let a = &cache.alpha[b];
            let dp = dpooled.row(b);
            let da: Vec<f64> = p.iter().map(|&j| crate::nn::tensor::dot(dp, x.row(j))).collect();
            let mean: f64 = a.iter().zip(&da).map(|(w, g)| w * g).sum();
            let q = cache.q.row(b).to_vec();
            for (k, &j) in p.iter().enumerate() {
                let dlogit = a[k] * (da[k] - mean);
                let xj = x.row(j).to_vec();
                for (g, v) in dq.row_mut(b).iter_mut().zip(&xj) {
                    *g += dlogit * scale * v;
                }
                for ((g, pv), qv) in dx.row_mut(j).iter_mut().zip(dp).zip(&q) {
                    *g += a[k] * pv + dlogit * scale * qv;
                }
            }
        }
        let (g_query, dlast_q) = self.query.backward(&cache.last, &dq)?;
        dlast.add_assign(&dlast_q);
        for (b, p) in cache.prefixes.iter().enumerate() {
            let j = *p.last().expect("nonempty");
            for (g, v) in dx.row_mut(j).iter_mut().zip(dlast.row(b)) {
                *g += v;
            }
        }
        let (g_fuse, din) = self.fuse.backward(&cache.items.fused_in, &dx)?;
        let (g_id, g_adapters) = match (&self.adapters, &cache.items.adapted, &self.features) {
            (Some(ad), Some(cached), Some(feats)) => {
                let parts = din.hsplit(&[d, d, d]);
                let g = Modal::new(
                    ad.visual.backward(&feats.visual, &cached.visual.1, &parts[1])?,
                    ad.textual.backward(&feats.textual, &cached.textual.1, &parts[2])?,
                );
                (parts[0].clone(), Some(g))
            }
            _ => (din, None),
        };
        Ok(RecModel {
            item_ids: Vec::new(),
            id: g_id,
            adapters: g_adapters,
            fuse: g_fuse,
            query: g_query,
            out: g_out,
            features: None,
        })
    }

    /// Mean next-item cross-entropy over all items, with parameter gradients.
    pub fn loss(&self, prefixes: &[&[ItemId]], targets: &[ItemId]) -> Result<(f64, RecModel)> {
        self.loss_over(prefixes, targets, None)
    }

    /// Cross-entropy with the softmax restricted to item rows where
    /// `candidates` is true (all rows when `None`).
    pub fn loss_over(&self, prefixes: &[&[ItemId]], targets: &[ItemId], candidates: Option<&[bool]>) -> Result<(f64, RecModel)> {
        if prefixes.len() != targets.len() || prefixes.is_empty() {
            return Err(Error::shape("recommender batch", prefixes.len(), targets.len()));
        }
        let rows: Vec<usize> = match candidates {
            Some(c) if c.len() != self.num_items() => return Err(Error::shape("candidate mask", c.len(), self.num_items())),
            Some(c) => (0..c.len()).filter(|&j| c[j]).collect(),
            None => (0..self.num_items()).collect(),
        };
        let (scores, cache) = self.forward(prefixes)?;
        let n = targets.len() as f64;
        let mut dscores = Tensor::zeros(&[targets.len(), self.num_items()]);
        let mut total = 0.0;
        for (b, &t) in targets.iter().enumerate() {
            let target = self.index_of(t)?;
            let label = rows.binary_search(&target).map_err(|_| Error::Batch(format!("target item {t} is not a candidate")))?;
            let logits: Vec<f64> = rows.iter().map(|&j| scores.get(b, j)).collect();
            let (l, g) = softmax_cross_entropy(&logits, label)?;
            total += l;
            let out = dscores.row_mut(b);
            for (&j, v) in rows.iter().zip(g) {
                out[j] = v / n;
            }
        }
        Ok((total / n, self.backward(&cache, &dscores)?))
    }
}

/// Prefix/target training examples from every position of every session.
pub fn window_examples<'a>(sessions: impl IntoIterator<Item = &'a Session>, max_len: usize) -> Vec<(Vec<ItemId>, ItemId)> {
    let mut out = Vec::new();
    for s in sessions {
        for t in 1..s.items.len() {
            out.push((s.items[t.saturating_sub(max_len)..t].to_vec(), s.items[t]));
        }
    }
    out
}

/// One example per session: its last item as target.
pub fn last_item_examples<'a>(sessions: impl IntoIterator<Item = &'a Session>, max_len: usize) -> Vec<(Vec<ItemId>, ItemId)> {
    sessions
        .into_iter()
        .filter(|s| s.items.len() >= 2)
        .map(|s| {
            let n = s.items.len();
            (s.items[(n - 1).saturating_sub(max_len)..n - 1].to_vec(), s.items[n - 1])
        })
        .collect()
}

/// Ranks of each example's target under all-item scoring.
pub fn target_ranks(model: &RecModel, examples: &[(Vec<ItemId>, ItemId)]) -> Result<Vec<usize>> {
    let mut ranks = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(256) {
        let prefixes: Vec<&[ItemId]> = chunk.iter().map(|(p, _)| p.as_slice()).collect();
        let scores = model.scores(&prefixes)?;
        for (b, (_, t)) in chunk.iter().enumerate() {
            ranks.push(rank_of(scores.row(b), model.index_of(*t)?));
        }
    }
    Ok(ranks)
}

pub fn eval_topk(model: &RecModel, examples: &[(Vec<ItemId>, ItemId)]) -> Result<RankMetrics> {
    Ok(RankMetrics::from_ranks(&target_ranks(model, examples)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub valid_hr10: f64,
}

/// Trains on sliding-window examples of `train`, keeping the epoch with the
/// best validation HR@10 (earliest on ties).
///
/// `unseen` items are absent from training: their ID rows stay zero and they
/// are left out of the training softmax, so only their modal features score
/// them at evaluation.
pub fn rec_train(
    corpus: &Corpus,
    train: &[&Session],
    valid: &[&Session],
    features: Option<&EmbeddingTable>,
    unseen: &[ItemId],
    cfg: &RecConfig,
    seed: u64,
) -> Result<(RecModel, Vec<RecEpoch>)> {
    let mut model = RecModel::new(corpus, features, cfg.d_rec, seed)?;
    model.zero_id_rows(unseen)?;
    let mut mask = vec![true; model.num_items()];
    for &i in unseen {
        mask[model.index_of(i)?] = false;
    }
    let candidates = if unseen.is_empty() { None } else { Some(mask.as_slice()) };
    let examples = window_examples(train.iter().copied(), cfg.max_len);
    if examples.is_empty() {
        return Err(Error::Training("train-rec: no training examples".into()));
    }
    let valid_ex = last_item_examples(valid.iter().copied(), cfg.max_len);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5E_ED0F_0DE5);
    let mut opt = Adam::new(cfg.lr);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut best: Option<(f64, RecModel)> = None;
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0.0;
        for idx in order.chunks(cfg.batch) {
            let prefixes: Vec<&[ItemId]> = idx.iter().map(|&i| examples[i].0.as_slice()).collect();
            let targets: Vec<ItemId> = idx.iter().map(|&i| examples[i].1).collect();
            let dropped: Vec<usize> = if cfg.id_dropout > 0.0 && model.features.is_some() {
                (0..model.num_items()).filter(|_| rng.random_bool(cfg.id_dropout)).collect()
            } else {
                Vec::new()
            };
            let saved: Vec<Vec<f64>> = dropped.iter().map(|&r| model.id.row(r).to_vec()).collect();
            for &r in &dropped {
                model.id.row_mut(r).fill(0.0);
            }
            let (l, mut g) = model.loss_over(&prefixes, &targets, candidates)?;
            for (&r, row) in dropped.iter().zip(&saved) {
                model.id.row_mut(r).copy_from_slice(row);
                g.id.row_mut(r).fill(0.0);
            }
            if !l.is_finite() {
                return Err(Error::Training(format!("train-rec: non-finite loss at epoch {epoch}")));
            }
            opt.step(&mut model, &g)?;
            total += l;
            batches += 1.0;
        }
        let valid_hr10 = if valid_ex.is_empty() { 0.0 } else { eval_topk(&model, &valid_ex)?.hr10 };
        debug!("rec epoch {epoch}: loss {:.4} valid hr@10 {valid_hr10:.4}", total / batches);
        log.push(RecEpoch {
            epoch,
            loss: total / batches,
            valid_hr10,
        });
        if best.as_ref().is_none_or(|(b, _)| valid_hr10 > *b) {
            best = Some((valid_hr10, model.clone()));
        }
    }
    let model = best.map(|(_, m)| m).unwrap_or(model);
    Ok((model, log))
}
