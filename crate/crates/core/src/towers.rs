//! Compact encoder towers for the knowledge and transfer roles, the
//! generation-proxy classification loss and the intra-order contrastive loss.
//!
//! Both towers share one layout. Each input slot carries an image and a text
//! feature vector, projected to `d_h` with tanh. The trunk sees every slot
//! projection (plus an order flag for the transfer tower). The visual summary
//! head reads `[trunk ‖ visual projections]` and the textual head
//! `[trunk ‖ text projections]`, so each summary mixes both modalities through
//! the trunk but gets its own modality branch last. Visual-keyword logits come
//! from the visual summary, category logits from the textual one.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Corpus, Item, ItemId};
use crate::error::{Error, Result};
use crate::nn::loss::{cosine_sim, softmax_cross_entropy, unit_backward};
use crate::nn::params::{join, Parameters};
use crate::nn::tensor::{norm, Tensor};
use crate::nn::{Activation, Linear, Mlp, MlpCache};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TowerDims {
    pub d_in: usize,
    pub d_h: usize,
    pub d_sum: usize,
    pub vk_classes: usize,
    pub cat_classes: usize,
    /// Category labels per item (one ranked head each).
    pub k_cat: usize,
}

impl TowerDims {
    pub fn for_corpus(corpus: &Corpus, d_h: usize, d_sum: usize) -> Self {
        Self {
            d_in: corpus.feature_dim(),
            d_h,
            d_sum,
            vk_classes: corpus.num_vk_classes(),
            cat_classes: corpus.num_cat_classes(),
            k_cat: corpus.num_categories_per_item(),
        }
    }
}

/// One input slot: features for a batch plus a presence mask.
#[derive(Clone, Debug)]
pub struct SlotInput {
    pub img: Tensor,
    pub txt: Tensor,
    pub mask: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct TowerInput {
    pub slots: Vec<SlotInput>,
    /// `N x 1` order flag, transfer tower only.
    pub flag: Option<Tensor>,
}

impl TowerInput {
    pub fn batch_size(&self) -> usize {
        self.slots[0].img.rows()
    }

    /// Knowledge-tower input for a list of items.
    pub fn from_items(items: &[&Item]) -> Result<Self> {
        let img = Tensor::from_rows(&items.iter().map(|i| i.feat_img.as_slice()).collect::<Vec<_>>())?;
        let txt = Tensor::from_rows(&items.iter().map(|i| i.feat_txt.as_slice()).collect::<Vec<_>>())?;
        Ok(Self {
            slots: vec![SlotInput {
                img,
                txt,
                mask: vec![1.0; items.len()],
            }],
            flag: None,
        })
    }

    /// Transfer-tower input. Slot 0 always holds the most recent query item;
    /// order-1 queries leave slot 1 zeroed and masked.
    pub fn from_queries(corpus: &Corpus, queries: &[&[ItemId]]) -> Result<Self> {
        let d = corpus.feature_dim();
        let n = queries.len();
        let mut slots: Vec<SlotInput> = (0..2)
            .map(|_| SlotInput {
                img: Tensor::zeros(&[n, d]),
                txt: Tensor::zeros(&[n, d]),
                mask: vec![0.0; n],
            })
            .collect();
        let mut flag = Tensor::zeros(&[n, 1]);
        for (r, q) in queries.iter().enumerate() {
            if q.is_empty() || q.len() > 2 {
                return Err(Error::Config(format!("query order {} not in {{1, 2}}", q.len())));
            }
            for (s, &id) in q.iter().rev().enumerate() {
                let it = corpus.item(id)?;
                slots[s].img.row_mut(r).copy_from_slice(&it.feat_img);
                slots[s].txt.row_mut(r).copy_from_slice(&it.feat_txt);
                slots[s].mask[r] = 1.0;
            }
            flag.set(r, 0, (q.len() - 1) as f64);
        }
        Ok(Self { slots, flag: Some(flag) })
    }
}

#[derive(Clone, Debug)]
pub struct TowerOutput {
    pub e_v: Tensor,
    pub e_t: Tensor,
    pub vk_logits: Tensor,
    pub cat_logits: Tensor,
}

/// Activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct TowerCache {
    a_img: Vec<Tensor>,
    a_txt: Vec<Tensor>,
    masks: Vec<Vec<f64>>,
    slot_inputs: Vec<(Tensor, Tensor)>,
    trunk_cache: MlpCache,
    h: Tensor,
    head_v_in: Tensor,
    head_t_in: Tensor,
    e_v: Tensor,
    e_t: Tensor,
}

/// Upstream gradients on the tower outputs; `None` means zero.
#[derive(Clone, Debug, Default)]
pub struct TowerGradIn {
    pub e_v: Option<Tensor>,
    pub e_t: Option<Tensor>,
    pub vk_logits: Option<Tensor>,
    pub cat_logits: Option<Tensor>,
}

/// Shared encoder body behind both towers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub dims: TowerDims,
    pub proj_img: Vec<Linear>,
    pub proj_txt: Vec<Linear>,
    pub trunk: Mlp,
    pub head_v: Linear,
    pub head_t: Linear,
    pub cls_vk: Linear,
    pub cls_cat: Linear,
    pub with_flag: bool,
}

impl Encoder {
    fn new<R: Rng + ?Sized>(dims: TowerDims, slots: usize, with_flag: bool, rng: &mut R) -> Self {
        let TowerDims { d_in, d_h, d_sum, .. } = dims;
        let proj_img = (0..slots).map(|_| Linear::new(d_in, d_h, rng)).collect();
        let proj_txt = (0..slots).map(|_| Linear::new(d_in, d_h, rng)).collect();
        let trunk_in = 2 * slots * d_h + usize::from(with_flag);
        Self {
            dims,
            proj_img,
            proj_txt,
            trunk: Mlp::new(&[trunk_in, d_h, d_h], Activation::Tanh, rng),
            head_v: Linear::new(d_h * (1 + slots), d_sum, rng),
            head_t: Linear::new(d_h * (1 + slots), d_sum, rng),
            cls_vk: Linear::new(d_sum, dims.vk_classes, rng),
            cls_cat: Linear::new(d_sum, dims.cat_classes * dims.k_cat, rng),
            with_flag,
        }
    }

    fn slots(&self) -> usize {
        self.proj_img.len()
    }

    pub fn zero_summary_heads(&mut self) {
        for l in [&mut self.head_v, &mut self.head_t] {
            l.weight.fill(0.0);
            l.bias.fill(0.0);
        }
    }

    fn forward_cached(&self, input: &TowerInput) -> Result<(TowerOutput, TowerCache)> {
        if input.slots.len() != self.slots() {
            return Err(Error::shape("tower slots", self.slots(), input.slots.len()));
        }
        if input.flag.is_some() != self.with_flag {
            return Err(Error::shape("tower order flag", self.with_flag, input.flag.is_some()));
        }
        let n = input.batch_size();
        let mut a_img = Vec::new();
        let mut a_txt = Vec::new();
        let mut masks = Vec::new();
        let mut slot_inputs = Vec::new();
        for (s, slot) in input.slots.iter().enumerate() {
            if slot.img.cols() != self.dims.d_in || slot.txt.cols() != self.dims.d_in {
                return Err(Error::shape("tower input features", self.dims.d_in, slot.img.cols()));
            }
            if slot.mask.len() != n || slot.img.rows() != n || slot.txt.rows() != n {
                return Err(Error::shape("tower slot batch", n, slot.img.rows()));
            }
            slot.img.ensure_finite("tower image features")?;
            slot.txt.ensure_finite("tower text features")?;
            let mut ai = Activation::Tanh.forward(&self.proj_img[s].forward(&slot.img)?);
            let mut at = Activation::Tanh.forward(&self.proj_txt[s].forward(&slot.txt)?);
            apply_mask(&mut ai, &slot.mask);
            apply_mask(&mut at, &slot.mask);
            a_img.push(ai);
            a_txt.push(at);
            masks.push(slot.mask.clone());
            slot_inputs.push((slot.img.clone(), slot.txt.clone()));
        }
        let mut parts: Vec<&Tensor> = Vec::new();
        for s in 0..self.slots() {
            parts.push(&a_img[s]);
            parts.push(&a_txt[s]);
        }
        if let Some(f) = &input.flag {
            parts.push(f);
        }
        let trunk_in = Tensor::hcat(&parts)?;
        let (pre, trunk_cache) = self.trunk.forward_cached(&trunk_in)?;
        let h = Activation::Tanh.forward(&pre);
        let mut vparts = vec![&h];
        vparts.extend(a_img.iter());
        let head_v_in = Tensor::hcat(&vparts)?;
        let mut tparts = vec![&h];
        tparts.extend(a_txt.iter());
        let head_t_in = Tensor::hcat(&tparts)?;
        let e_v = self.head_v.forward(&head_v_in)?;
        let e_t = self.head_t.forward(&head_t_in)?;
        let vk_logits = self.cls_vk.forward(&e_v)?;
        let cat_logits = self.cls_cat.forward(&e_t)?;
        e_v.ensure_finite("visual summary")?;
        e_t.ensure_finite("textual summary")?;
        let out = TowerOutput {
            e_v: e_v.clone(),
            e_t: e_t.clone(),
            vk_logits,
            cat_logits,
        };
        Ok((
            out,
            TowerCache {
                a_img,
                a_txt,
                masks,
                slot_inputs,
                trunk_cache,
                h,
                head_v_in,
                head_t_in,
                e_v,
                e_t,
            },
        ))
    }

    fn backward(&self, cache: &TowerCache, g: &TowerGradIn) -> Result<Encoder> {
        let n = cache.h.rows();
        let d_sum = self.dims.d_sum;
        let mut grads = self.clone();
        let mut de_v = g.e_v.clone().unwrap_or_else(|| Tensor::zeros(&[n, d_sum]));
        let mut de_t = g.e_t.clone().unwrap_or_else(|| Tensor::zeros(&[n, d_sum]));
        match &g.vk_logits {
            Some(d) => {
                let (gl, dx) = self.cls_vk.backward(&cache.e_v, d)?;
                grads.cls_vk = gl;
                de_v.add_assign(&dx);
            }
            None => grads.cls_vk = zero_linear(&self.cls_vk),
        }
        match &g.cat_logits {
            Some(d) => {
                let (gl, dx) = self.cls_cat.backward(&cache.e_t, d)?;
                grads.cls_cat = gl;
                de_t.add_assign(&dx);
            }
            None => grads.cls_cat = zero_linear(&self.cls_cat),
        }
        let (gv, dv_in) = self.head_v.backward(&cache.head_v_in, &de_v)?;
        let (gt, dt_in) = self.head_t.backward(&cache.head_t_in, &de_t)?;
        grads.head_v = gv;
        grads.head_t = gt;
        let d_h = self.dims.d_h;
        let widths = vec![d_h; 1 + self.slots()];
        let dv_parts = dv_in.hsplit(&widths);
        let dt_parts = dt_in.hsplit(&widths);
        let mut dh = dv_parts[0].clone();
        dh.add_assign(&dt_parts[0]);
        let dpre = Activation::Tanh.backward(&cache.h, &dh);
        let (gtrunk, dtrunk_in) = self.trunk.backward(&cache.trunk_cache, &dpre)?;
        grads.trunk = gtrunk;
        let mut twidths = vec![d_h; 2 * self.slots()];
        if self.with_flag {
            twidths.push(1);
        }
        let dtrunk = dtrunk_in.hsplit(&twidths);
        for s in 0..self.slots() {
            let mut dai = dtrunk[2 * s].clone();
            dai.add_assign(&dv_parts[1 + s]);
            let mut dat = dtrunk[2 * s + 1].clone();
            dat.add_assign(&dt_parts[1 + s]);
            apply_mask(&mut dai, &cache.masks[s]);
            apply_mask(&mut dat, &cache.masks[s]);
            let dpi = Activation::Tanh.backward(&cache.a_img[s], &dai);
            let dpt = Activation::Tanh.backward(&cache.a_txt[s], &dat);
            grads.proj_img[s] = self.proj_img[s].backward_params(&cache.slot_inputs[s].0, &dpi)?;
            grads.proj_txt[s] = self.proj_txt[s].backward_params(&cache.slot_inputs[s].1, &dpt)?;
        }
        Ok(grads)
    }
}

fn zero_linear(l: &Linear) -> Linear {
    Linear::zeros(l.input_dim(), l.output_dim())
}

fn apply_mask(t: &mut Tensor, mask: &[f64]) {
    for (r, &m) in mask.iter().enumerate() {
        if m != 1.0 {
            t.row_mut(r).iter_mut().for_each(|v| *v *= m);
        }
    }
}

impl Parameters for Encoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.proj_img.visit(&join(prefix, "proj_img"), f);
        self.proj_txt.visit(&join(prefix, "proj_txt"), f);
        self.trunk.visit(&join(prefix, "trunk"), f);
        self.head_v.visit(&join(prefix, "head_v"), f);
        self.head_t.visit(&join(prefix, "head_t"), f);
        self.cls_vk.visit(&join(prefix, "cls_vk"), f);
        self.cls_cat.visit(&join(prefix, "cls_cat"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.proj_img.visit_mut(&join(prefix, "proj_img"), f);
        self.proj_txt.visit_mut(&join(prefix, "proj_txt"), f);
        self.trunk.visit_mut(&join(prefix, "trunk"), f);
        self.head_v.visit_mut(&join(prefix, "head_v"), f);
        self.head_t.visit_mut(&join(prefix, "head_t"), f);
        self.cls_vk.visit_mut(&join(prefix, "cls_vk"), f);
        self.cls_cat.visit_mut(&join(prefix, "cls_cat"), f);
    }
}

macro_rules! tower_type {
    ($(#[$m:meta])* $name:ident) => {
        $(#[$m])*
        #[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
        pub struct $name(pub Encoder);

        impl $name {
            pub fn dims(&self) -> TowerDims {
                self.0.dims
            }

            pub fn forward(&self, input: &TowerInput) -> Result<TowerOutput> {
                Ok(self.0.forward_cached(input)?.0)
            }

            pub fn forward_cached(&self, input: &TowerInput) -> Result<(TowerOutput, TowerCache)> {
                self.0.forward_cached(input)
            }

            /// Parameter gradients for the given upstream gradients.
            pub fn backward(&self, cache: &TowerCache, g: &TowerGradIn) -> Result<Self> {
                Ok(Self(self.0.backward(cache, g)?))
            }

            pub fn zero_summary_heads(&mut self) {
                self.0.zero_summary_heads()
            }
        }

        impl Parameters for $name {
            fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
                self.0.visit(prefix, f)
            }

            fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
                self.0.visit_mut(prefix, f)
            }
        }
    };
}

tower_type!(
    /// Item features → visual/textual summaries and label logits.
    KnowledgeTower
);
tower_type!(
    /// Meta-pair query (one or two items) → summaries and logits for the target's labels.
    TransferTower
);

impl KnowledgeTower {
    pub fn new<R: Rng + ?Sized>(dims: TowerDims, rng: &mut R) -> Self {
        Self(Encoder::new(dims, 1, false, rng))
    }

    pub fn encode_items(&self, items: &[&Item]) -> Result<TowerOutput> {
        self.forward(&TowerInput::from_items(items)?)
    }
}

impl TransferTower {
    pub fn new<R: Rng + ?Sized>(dims: TowerDims, rng: &mut R) -> Self {
        Self(Encoder::new(dims, 2, true, rng))
    }

    /// Forward for a batch of same-order queries.
    pub fn encode_queries(&self, corpus: &Corpus, queries: &[&[ItemId]], order: usize) -> Result<TowerOutput> {
        if !(1..=2).contains(&order) {
            return Err(Error::Config(format!("order {order} not in {{1, 2}}")));
        }
        if let Some(q) = queries.iter().find(|q| q.len() != order) {
            return Err(Error::shape("query length", order, q.len()));
        }
        self.forward(&TowerInput::from_queries(corpus, queries)?)
    }
}

/// Labels the generation proxy predicts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GenTarget {
    pub vk: usize,
    pub cats: Vec<usize>,
}

impl From<&Item> for GenTarget {
    fn from(i: &Item) -> Self {
        Self {
            vk: i.vk,
            cats: i.cats.clone(),
        }
    }
}

/// Batch-mean of CE(visual keyword) + Σ_r CE(category head r, r-th smallest category).
///
/// Returns the loss and gradients w.r.t. both logit matrices.
pub fn gen_loss(vk_logits: &Tensor, cat_logits: &Tensor, targets: &[GenTarget], k_cat: usize) -> Result<(f64, Tensor, Tensor)> {
    let n = targets.len();
    if vk_logits.rows() != n || cat_logits.rows() != n {
        return Err(Error::shape("gen_loss batch", n, vk_logits.rows()));
    }
    if k_cat == 0 || !cat_logits.cols().is_multiple_of(k_cat) {
        return Err(Error::shape("gen_loss category heads", k_cat, cat_logits.cols()));
    }
    let c = cat_logits.cols() / k_cat;
    let mut d_vk = Tensor::zeros(&[n, vk_logits.cols()]);
    let mut d_cat = Tensor::zeros(&[n, cat_logits.cols()]);
    let mut total = 0.0;
    let inv = 1.0 / n as f64;
    for (r, t) in targets.iter().enumerate() {
        if t.cats.len() != k_cat {
            return Err(Error::shape("gen_loss category count", k_cat, t.cats.len()));
        }
        let (l, g) = softmax_cross_entropy(vk_logits.row(r), t.vk)?;
        total += l;
        for (d, gi) in d_vk.row_mut(r).iter_mut().zip(g) {
            *d = gi * inv;
        }
        let mut sorted = t.cats.clone();
        sorted.sort_unstable();
        for (h, &label) in sorted.iter().enumerate() {
            let logits = &cat_logits.row(r)[h * c..(h + 1) * c];
            let (l, g) = softmax_cross_entropy(logits, label)?;
            total += l;
            for (d, gi) in d_cat.row_mut(r)[h * c..(h + 1) * c].iter_mut().zip(g) {
                *d = gi * inv;
            }
        }
    }
    Ok((total * inv, d_vk, d_cat))
}

/// Predicted (visual keyword, category set) per row.
pub fn predict_labels(out: &TowerOutput, k_cat: usize) -> Vec<GenTarget> {
    let c = out.cat_logits.cols() / k_cat;
    (0..out.vk_logits.rows())
        .map(|r| {
            let vk = argmax(out.vk_logits.row(r));
            let mut cats: Vec<usize> = (0..k_cat)
                .map(|h| argmax(&out.cat_logits.row(r)[h * c..(h + 1) * c]))
                .collect();
            cats.sort_unstable();
            cats.dedup();
            GenTarget { vk, cats }
        })
        .collect()
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Intra-order contrastive loss for one modality.
///
/// `summaries` holds 2B rows; `targets[m]` is the meta target of row `m` and
/// every target must appear exactly twice (the positive pair). Returns the
/// loss and its gradient w.r.t. `summaries`.
pub fn intra_cl_loss(summaries: &Tensor, targets: &[ItemId], tau: f64) -> Result<(f64, Tensor)> {
    let n = summaries.rows();
    if targets.len() != n {
        return Err(Error::shape("intra_cl targets", n, targets.len()));
    }
    if tau <= 0.0 {
        return Err(Error::Config(format!("temperature {tau} must be positive")));
    }
    let mut partner = vec![usize::MAX; n];
    let mut first: HashMap<ItemId, usize> = HashMap::new();
    for (m, t) in targets.iter().enumerate() {
        match first.get(t) {
            None => {
                first.insert(*t, m);
            }
            Some(&o) if partner[o] == usize::MAX => {
                partner[o] = m;
                partner[m] = o;
            }
            Some(_) => return Err(Error::Batch(format!("target {t} appears more than twice in the contrastive batch"))),
        }
    }
    if let Some(m) = partner.iter().position(|&p| p == usize::MAX) {
        return Err(Error::Batch(format!("row {m} (target {}) has no positive partner", targets[m])));
    }
    let mut units = Vec::with_capacity(n);
    for m in 0..n {
        let r = summaries.row(m);
        let nr = norm(r);
        if nr == 0.0 {
            return Err(Error::Degenerate(format!("zero-norm summary at row {m}")));
        }
        units.push(r.iter().map(|v| v / nr).collect::<Vec<f64>>());
    }
    let d = summaries.cols();
    let mut sim = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let s: f64 = units[i].iter().zip(&units[j]).map(|(a, b)| a * b).sum();
            sim[i * n + j] = s;
            sim[j * n + i] = s;
        }
    }
    // dL/dsim accumulated, then pushed through the normalization
    let mut dsim = vec![0.0; n * n];
    let mut loss = 0.0;
    let inv = 1.0 / n as f64;
    for m in 0..n {
        let logits: Vec<f64> = (0..n).filter(|&k| k != m).map(|k| sim[m * n + k] / tau).collect();
        let lse = crate::nn::log_sum_exp(&logits);
        loss += lse - sim[m * n + partner[m]] / tau;
        for k in (0..n).filter(|&k| k != m) {
            let p = (sim[m * n + k] / tau - lse).exp();
            dsim[m * n + k] += inv * p / tau;
        }
        dsim[m * n + partner[m]] -= inv / tau;
    }
    let mut du = vec![vec![0.0; d]; n];
    for i in 0..n {
        for j in 0..n {
            let g = dsim[i * n + j] + dsim[j * n + i];
            if i == j || g == 0.0 {
                continue;
            }
            for (a, b) in du[i].iter_mut().zip(&units[j]) {
                *a += g * b;
            }
        }
    }
    let mut grad = Tensor::zeros(&[n, d]);
    for m in 0..n {
        grad.row_mut(m).copy_from_slice(&unit_backward(summaries.row(m), &du[m]));
    }
    Ok((loss * inv, grad))
}

/// Cosine similarity between rows, exposed for diagnostics.
pub fn row_cosine(t: &Tensor, i: usize, j: usize) -> Result<f64> {
    cosine_sim(t.row(i), t.row(j))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::grad_check;
    use crate::nn::params::{flatten, load_flat};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims() -> TowerDims {
        TowerDims {
            d_in: 4,
            d_h: 6,
            d_sum: 5,
            vk_classes: 4,
            cat_classes: 8,
            k_cat: 2,
        }
    }

    fn item(id: ItemId, rng: &mut ChaCha8Rng) -> Item {
        Item {
            id,
            feat_txt: (0..4).map(|_| rng.random_range(-1.0..1.0)).collect(),
            feat_img: (0..4).map(|_| rng.random_range(-1.0..1.0)).collect(),
            vk: (id % 4) as usize,
            cats: vec![(id % 3) as usize, 3 + (id % 5) as usize],
        }
    }

    fn tiny_corpus() -> Corpus {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let items = (0..6).map(|i| item(i, &mut rng)).collect();
        Corpus::new(items, vec![]).unwrap()
    }

    /// Straight-line evaluation of the knowledge tower for one item.
    fn oracle_k(t: &KnowledgeTower, it: &Item) -> (Vec<f64>, Vec<f64>) {
        let lin = |l: &Linear, x: &[f64]| -> Vec<f64> {
            (0..l.output_dim())
                .map(|r| l.bias.data()[r] + (0..x.len()).map(|c| l.weight.get(r, c) * x[c]).sum::<f64>())
                .collect()
        };
        let th = |v: Vec<f64>| v.into_iter().map(f64::tanh).collect::<Vec<_>>();
        let e = &t.0;
        let ai = th(lin(&e.proj_img[0], &it.feat_img));
        let at = th(lin(&e.proj_txt[0], &it.feat_txt));
        let x: Vec<f64> = ai.iter().chain(&at).copied().collect();
        let h1 = th(lin(&e.trunk.layers[0], &x));
        let h = th(lin(&e.trunk.layers[1], &h1));
        let hv: Vec<f64> = h.iter().chain(&ai).copied().collect();
        let ht: Vec<f64> = h.iter().chain(&at).copied().collect();
        (lin(&e.head_v, &hv), lin(&e.head_t, &ht))
    }

    #[test]
    fn knowledge_forward_matches_oracle() {
        let c = tiny_corpus();
        let tower = KnowledgeTower::new(dims(), &mut ChaCha8Rng::seed_from_u64(1));
        let items: Vec<&Item> = c.items().iter().collect();
        let out = tower.encode_items(&items).unwrap();
        for (r, it) in items.iter().enumerate() {
            let (ev, et) = oracle_k(&tower, it);
            for (a, b) in out.e_v.row(r).iter().zip(&ev) {
                assert!((a - b).abs() < 1e-12);
            }
            for (a, b) in out.e_t.row(r).iter().zip(&et) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_heads_zero_summaries() {
        let c = tiny_corpus();
        let mut k = KnowledgeTower::new(dims(), &mut ChaCha8Rng::seed_from_u64(1));
        k.zero_summary_heads();
        let out = k.encode_items(&c.items().iter().collect::<Vec<_>>()).unwrap();
        assert!(out.e_v.data().iter().chain(out.e_t.data()).all(|&v| v == 0.0));
        let mut t = TransferTower::new(dims(), &mut ChaCha8Rng::seed_from_u64(1));
        t.zero_summary_heads();
        let out = t.encode_queries(&c, &[&[1, 2], &[3, 4]], 2).unwrap();
        assert!(out.e_v.data().iter().chain(out.e_t.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn identical_features_identical_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = item(0, &mut rng);
        let mut b = a.clone();
        b.id = 1;
        let k = KnowledgeTower::new(dims(), &mut rng);
        let out = k.encode_items(&[&a, &b]).unwrap();
        assert_eq!(out.e_v.row(0), out.e_v.row(1));
        assert_eq!(out.cat_logits.row(0), out.cat_logits.row(1));
    }

    #[test]
    fn order_flag_separates_orders() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut items: Vec<Item> = (0..2).map(|i| item(i, &mut rng)).collect();
        items[0].feat_img = vec![0.0; 4];
        items[0].feat_txt = vec![0.0; 4];
        let c = Corpus::new(items, vec![]).unwrap();
        let t = TransferTower::new(dims(), &mut rng);
        // order 2 with an all-zero older item vs order 1 on the same last item
        let two = t.encode_queries(&c, &[&[0, 1]], 2).unwrap();
        let one = t.encode_queries(&c, &[&[1]], 1).unwrap();
        assert_ne!(two.e_v.data(), one.e_v.data());
        assert!(t.encode_queries(&c, &[&[1]], 3).is_err());
        assert!(t.encode_queries(&c, &[&[0, 1]], 1).is_err());
    }

    #[test]
    fn slot_order_matters() {
        let c = tiny_corpus();
        let t = TransferTower::new(dims(), &mut ChaCha8Rng::seed_from_u64(4));
        let ab = t.encode_queries(&c, &[&[1, 2]], 2).unwrap();
        let ba = t.encode_queries(&c, &[&[2, 1]], 2).unwrap();
        let diff: f64 = ab.e_t.data().iter().zip(ba.e_t.data()).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 1e-6);
    }

    #[test]
    fn gen_loss_uniform_logits() {
        let vk = Tensor::zeros(&[3, 4]);
        let cat = Tensor::zeros(&[3, 16]);
        let t = vec![GenTarget { vk: 1, cats: vec![0, 5] }; 3];
        let (l, _, _) = gen_loss(&vk, &cat, &t, 2).unwrap();
        assert!((l - (4f64.ln() + 2.0 * 8f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn gen_loss_saturated() {
        let mut vk = Tensor::zeros(&[1, 4]);
        vk.set(0, 2, 60.0);
        let mut cat = Tensor::zeros(&[1, 16]);
        cat.set(0, 1, 60.0);
        cat.set(0, 8 + 6, 60.0);
        let (l, _, _) = gen_loss(&vk, &cat, &[GenTarget { vk: 2, cats: vec![6, 1] }], 2).unwrap();
        assert!(l < 1e-8);
        assert!(gen_loss(&vk, &cat, &[GenTarget { vk: 4, cats: vec![6, 1] }], 2).is_err());
    }

    #[test]
    fn gen_loss_is_sum_of_component_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let vk = Tensor::matrix(2, 4, (0..8).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let cat = Tensor::matrix(2, 16, (0..32).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let t = vec![GenTarget { vk: 3, cats: vec![2, 7] }, GenTarget { vk: 0, cats: vec![1, 4] }];
        let ce = |xs: &[f64], y: usize| -> f64 {
            let s: f64 = xs.iter().map(|x| x.exp()).sum();
            s.ln() - xs[y]
        };
        let mut want = 0.0;
        for (r, tt) in t.iter().enumerate() {
            want += ce(vk.row(r), tt.vk);
            want += ce(&cat.row(r)[..8], tt.cats[0]);
            want += ce(&cat.row(r)[8..], tt.cats[1]);
        }
        let (l, _, _) = gen_loss(&vk, &cat, &t, 2).unwrap();
        assert!((l - want / 2.0).abs() < 1e-12);
    }

    #[test]
    fn gen_loss_through_tower_gradient_checks() {
        let c = tiny_corpus();
        let k = KnowledgeTower::new(dims(), &mut ChaCha8Rng::seed_from_u64(6));
        let items: Vec<&Item> = c.items()[..4].iter().collect();
        let input = TowerInput::from_items(&items).unwrap();
        let targets: Vec<GenTarget> = items.iter().map(|i| GenTarget::from(*i)).collect();
        let f = |p: &[f64]| {
            let mut tw = k.clone();
            load_flat(&mut tw, p)?;
            let (out, cache) = tw.forward_cached(&input)?;
            let (l, dv, dc) = gen_loss(&out.vk_logits, &out.cat_logits, &targets, 2)?;
            let g = tw.backward(
                &cache,
                &TowerGradIn {
                    vk_logits: Some(dv),
                    cat_logits: Some(dc),
                    ..Default::default()
                },
            )?;
            Ok((l, flatten(&g)))
        };
        let r = grad_check(f, &flatten(&k), 1e-5, 400, 1).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn transfer_summary_gradient_checks() {
        let c = tiny_corpus();
        let t = TransferTower::new(dims(), &mut ChaCha8Rng::seed_from_u64(7));
        let queries: Vec<&[ItemId]> = vec![&[1], &[2], &[3], &[0]];
        let input = TowerInput::from_queries(&c, &queries).unwrap();
        let f = |p: &[f64]| {
            let mut tw = t.clone();
            load_flat(&mut tw, p)?;
            let (out, cache) = tw.forward_cached(&input)?;
            let (lv, gv) = intra_cl_loss(&out.e_v, &[5, 5, 9, 9], 0.5)?;
            let (lt, gt) = intra_cl_loss(&out.e_t, &[5, 5, 9, 9], 0.5)?;
            let (lg, dv, dc) = gen_loss(&out.vk_logits, &out.cat_logits, &vec![GenTarget { vk: 1, cats: vec![0, 4] }; 4], 2)?;
            let g = tw.backward(
                &cache,
                &TowerGradIn {
                    e_v: Some(gv),
                    e_t: Some(gt),
                    vk_logits: Some(dv),
                    cat_logits: Some(dc),
                },
            )?;
            Ok((lv + lt + lg, flatten(&g)))
        };
        let r = grad_check(f, &flatten(&t), 1e-5, 400, 2).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn intra_cl_two_group_closed_form() {
        let s = Tensor::matrix(4, 2, vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
        let (l, _) = intra_cl_loss(&s, &[1, 1, 2, 2], 1.0).unwrap();
        let want = (1.0 + 2.0 / std::f64::consts::E).ln();
        assert!((l - want).abs() < 1e-9, "{l} vs {want}");
        assert!((l - 0.551_444_713_932_051).abs() < 1e-12);
    }

    #[test]
    fn intra_cl_vanishes_with_antipodal_negatives() {
        let s = Tensor::matrix(4, 1, vec![1.0, 1.0, -1.0, -1.0]).unwrap();
        let (l, _) = intra_cl_loss(&s, &[1, 1, 2, 2], 0.01).unwrap();
        assert!(l < 1e-12, "{l}");
    }

    /// O((2B)²) evaluation written directly from the loss definition.
    fn naive_intra_cl(s: &Tensor, targets: &[ItemId], tau: f64) -> f64 {
        let n = s.rows();
        let mut total = 0.0;
        for m in 0..n {
            let pos = (0..n).find(|&k| k != m && targets[k] == targets[m]).unwrap();
            let num = (cosine_sim(s.row(m), s.row(pos)).unwrap() / tau).exp();
            let den: f64 = (0..n)
                .filter(|&k| k != m)
                .map(|k| (cosine_sim(s.row(m), s.row(k)).unwrap() / tau).exp())
                .sum();
            total += -(num / den).ln();
        }
        total / n as f64
    }

    #[test]
    fn intra_cl_matches_double_loop_and_gradient_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let targets = [3, 7, 3, 9, 7, 9];
        let data: Vec<f64> = (0..18).map(|_| rng.random_range(-1.0..1.0)).collect();
        let s = Tensor::matrix(6, 3, data.clone()).unwrap();
        let (l, _) = intra_cl_loss(&s, &targets, 0.3).unwrap();
        assert!((l - naive_intra_cl(&s, &targets, 0.3)).abs() < 1e-12);
        let f = |p: &[f64]| {
            let t = Tensor::matrix(6, 3, p.to_vec())?;
            let (l, g) = intra_cl_loss(&t, &targets, 0.3)?;
            Ok((l, g.into_data()))
        };
        let r = grad_check(f, &data, 1e-6, 18, 0).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn intra_cl_batch_errors() {
        let s = Tensor::matrix(3, 2, vec![1.0, 0.0, 1.0, 1.0, 0.0, 1.0]).unwrap();
        assert!(matches!(intra_cl_loss(&s, &[1, 1, 2], 1.0), Err(Error::Batch(_))));
        let z = Tensor::matrix(2, 2, vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        assert!(matches!(intra_cl_loss(&z, &[1, 1], 1.0), Err(Error::Degenerate(_))));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn intra_cl_scale_invariant(data in prop::collection::vec(0.1..1.0f64, 12), scale in 0.01..50.0f64, row in 0usize..4) {
                let s = Tensor::matrix(4, 3, data.clone()).unwrap();
                let (a, _) = intra_cl_loss(&s, &[1, 1, 2, 2], 0.2).unwrap();
                let mut scaled = s.clone();
                scaled.row_mut(row).iter_mut().for_each(|v| *v *= scale);
                let (b, _) = intra_cl_loss(&scaled, &[1, 1, 2, 2], 0.2).unwrap();
                prop_assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn intra_cl_decreases_as_positive_aligns() {
        // rows 0/1 are the positive pair; rotating row 1 toward row 0 raises their cosine
        // while keeping its similarity to the negatives fixed (negatives live on the z axis).
        let mut last = f64::INFINITY;
        for step in 0..=10 {
            let theta = std::f64::consts::FRAC_PI_2 * (1.0 - step as f64 / 10.0);
            let s = Tensor::matrix(
                4,
                3,
                vec![1.0, 0.0, 0.0, theta.cos(), theta.sin(), 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0],
            )
            .unwrap();
            let (l, _) = intra_cl_loss(&s, &[1, 1, 2, 2], 0.5).unwrap();
            assert!(l < last);
            last = l;
        }
    }
}
