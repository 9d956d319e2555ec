//! End-to-end runs: data preparation, per-variant tower training, downstream
//! training and evaluation, and seed sweeps with paired comparisons.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use log::info;
use serde::{Deserialize, Serialize};

use crate::data::{
    cold_split, extract_meta_pairs, filter_corpus, filter_meta_pairs, split_sessions, synth_generate, Corpus, Item,
    ItemId, MetaPair, Session, Splits, SynthConfig, MAX_ORDER,
};
use crate::error::{Error, Result};
use crate::pipeline::{
    export_embeddings, label_accuracy, stage1_train, stage2_k_train, stage2_t_train, DistillOutcome, EmbeddingTable,
    LogRow, StageSeeds, TrainConfig,
};
use crate::recsys::{eval_topk, last_item_examples, paired_t_test, rec_train, PairedTTest, RecConfig, RecModel};
use crate::towers::KnowledgeTower;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrepConfig {
    pub min_item_count: usize,
    pub min_session_len: usize,
    pub split: (u32, u32, u32),
    pub cold_frac: f64,
}

impl Default for PrepConfig {
    fn default() -> Self {
        Self {
            min_item_count: 5,
            min_session_len: 2,
            split: (7, 2, 1),
            cold_frac: 0.3,
        }
    }
}

/// Everything that determines a run besides the master seed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub synth: SynthConfig,
    pub prep: PrepConfig,
    pub train: TrainConfig,
    pub rec: RecConfig,
}

/// Which embeddings feed the recommender.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    /// Full distillation.
    Full,
    /// Stage-one embeddings, no transition distillation.
    TpadNa,
    NoPatternAlign,
    NoDisentangle,
    NoGenK,
    NoIntraCl,
    Random,
    IdOnly,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Full,
        Variant::TpadNa,
        Variant::NoPatternAlign,
        Variant::NoDisentangle,
        Variant::NoGenK,
        Variant::NoIntraCl,
        Variant::Random,
        Variant::IdOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::TpadNa => "tpad-na",
            Variant::NoPatternAlign => "no-pattern-align",
            Variant::NoDisentangle => "no-disentangle",
            Variant::NoGenK => "no-gen-k",
            Variant::NoIntraCl => "no-intra-cl",
            Variant::Random => "random",
            Variant::IdOnly => "id-only",
        }
    }

    /// Training config with this variant's weights zeroed.
    pub fn apply(self, cfg: &TrainConfig) -> TrainConfig {
        let mut c = cfg.clone();
        match self {
            Variant::NoPatternAlign => c.gamma_pattern = 0.0,
            Variant::NoDisentangle => c.gamma_disentangle = 0.0,
            Variant::NoGenK => c.gen_weight = 0.0,
            Variant::NoIntraCl => c.mu = 0.0,
            _ => {}
        }
        c
    }

    pub fn needs_transfer(self) -> bool {
        !matches!(self, Variant::TpadNa | Variant::Random | Variant::IdOnly)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::Config(format!("unknown variant `{s}` (expected one of {})", names.join(", ")))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Warm,
    Cold,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::Warm => "warm",
            Regime::Cold => "cold",
        }
    }
}

/// Filtered corpus, session split and meta pairs drawn from training sessions.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub corpus: Corpus,
    pub splits: Splits,
    pub pairs: Vec<MetaPair>,
}

impl Prepared {
    pub fn sessions<'a>(&'a self, ids: &[u64]) -> Vec<&'a Session> {
        self.corpus.sessions_by_id(ids)
    }
}

/// Surviving meta pairs of every order from `sessions`.
pub fn meta_pairs(sessions: &[&Session]) -> Result<Vec<MetaPair>> {
    let mut all = Vec::new();
    for order in 1..=MAX_ORDER {
        all.extend(extract_meta_pairs(sessions.iter().copied(), order)?);
    }
    Ok(filter_meta_pairs(&all))
}

pub fn prepare(corpus: &Corpus, cfg: &PrepConfig, regime: Regime, split_seed: u64) -> Result<Prepared> {
    let corpus = filter_corpus(corpus, cfg.min_item_count, cfg.min_session_len)?;
    let splits = match regime {
        Regime::Warm => split_sessions(&corpus, cfg.split, split_seed)?,
        Regime::Cold => cold_split(&corpus, cfg.cold_frac, cfg.split, split_seed)?,
    };
    let pairs = meta_pairs(&corpus.sessions_by_id(&splits.train))?;
    if pairs.is_empty() {
        return Err(Error::Split("training sessions yield no surviving meta pairs".into()));
    }
    Ok(Prepared { corpus, splits, pairs })
}

/// Trained towers for one seed; the transfer side is absent for stage-skipping variants.
#[derive(Clone, Debug)]
pub struct TowerRun {
    pub k0: KnowledgeTower,
    pub k0_log: Vec<LogRow>,
    pub distill: Option<(Vec<LogRow>, DistillOutcome)>,
}

impl TowerRun {
    pub fn final_tower(&self) -> &KnowledgeTower {
        self.distill.as_ref().map(|(_, d)| &d.model.tower).unwrap_or(&self.k0)
    }

    pub fn logs(&self) -> Vec<LogRow> {
        let mut out = self.k0_log.clone();
        if let Some((t, d)) = &self.distill {
            out.extend(t.iter().cloned());
            out.extend(d.log.iter().cloned());
        }
        out
    }
}

/// Stage one, then (for distilling variants) transfer training and distillation.
pub fn train_towers(data: &Prepared, cfg: &TrainConfig, variant: Variant, seeds: &StageSeeds, probes: bool) -> Result<TowerRun> {
    let cfg = variant.apply(cfg);
    let (k0, k0_log) = stage1_train(&data.corpus, &cfg, seeds.k0)?;
    let distill = if variant.needs_transfer() {
        let (t, t_log) = stage2_t_train(&data.corpus, &data.pairs, &cfg, seeds.t)?;
        let mut out = stage2_k_train(&data.corpus, &k0, &t, &data.pairs, &cfg, seeds, probes)?;
        for round in 1..cfg.rounds {
            info!("distillation round {}", round + 1);
            out = stage2_k_train(&data.corpus, &out.model.tower, &t, &data.pairs, &cfg, seeds, probes)?;
        }
        Some((t_log, out))
    } else {
        None
    };
    Ok(TowerRun { k0, k0_log, distill })
}

/// Downstream metrics for one (variant, seed, regime).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub seed: u64,
    pub regime: Regime,
    pub hr5: f64,
    pub hr10: f64,
    pub ndcg5: f64,
    pub ndcg10: f64,
    pub count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gr_vk: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gr_cat: Option<f64>,
}

pub const REPORT_COLUMNS: &str = "variant,seed,regime,hr5,hr10,ndcg5,ndcg10,count,gr_vk,gr_cat";

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let o = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{},{},{}",
            self.variant,
            self.seed,
            self.regime.name(),
            self.hr5,
            self.hr10,
            self.ndcg5,
            self.ndcg10,
            self.count,
            o(self.gr_vk),
            o(self.gr_cat)
        )
    }
}

/// Embedding table feeding the recommender, or `None` for the ID-only model.
pub fn variant_table(data: &Prepared, variant: Variant, towers: Option<&TowerRun>, cfg: &TrainConfig, seeds: &StageSeeds) -> Result<Option<EmbeddingTable>> {
    match variant {
        Variant::IdOnly => Ok(None),
        Variant::Random => Ok(Some(EmbeddingTable::random(&data.corpus, cfg.d_sum, seeds.baseline))),
        v => {
            let run = towers.ok_or_else(|| Error::State {
                stage: "train-k1".into(),
                detail: format!("variant {v} needs trained towers"),
            })?;
            let stage = if v == Variant::TpadNa { "k0" } else { "k1" };
            let tower = if v == Variant::TpadNa { &run.k0 } else { run.final_tower() };
            export_embeddings(tower, &data.corpus, stage).map(Some)
        }
    }
}

/// Test examples for `regime`: all test sessions (warm) or those ending in a cold item.
pub fn test_examples(data: &Prepared, regime: Regime, max_len: usize) -> Vec<(Vec<ItemId>, ItemId)> {
    let ids = match regime {
        Regime::Warm => data.splits.test.clone(),
        Regime::Cold => data.splits.cold_test(&data.corpus),
    };
    last_item_examples(data.sessions(&ids), max_len)
}

pub fn train_recommender(data: &Prepared, table: Option<&EmbeddingTable>, cfg: &RecConfig, seed: u64) -> Result<RecModel> {
    let train = data.sessions(&data.splits.train);
    let valid = data.sessions(&data.splits.valid);
    let cold = data.splits.cold_items.as_deref().unwrap_or(&[]);
    rec_train(&data.corpus, &train, &valid, table, cold, cfg, seed).map(|(m, _)| m)
}

pub fn evaluate(data: &Prepared, model: &RecModel, variant: Variant, seed: u64, regime: Regime, tower: Option<&KnowledgeTower>, max_len: usize) -> Result<EvalReport> {
    let ex = test_examples(data, regime, max_len);
    if ex.is_empty() {
        return Err(Error::Split(format!("no {} test examples", regime.name())));
    }
    let m = eval_topk(model, &ex)?;
    let gr = match tower {
        Some(t) => {
            let items: Vec<&Item> = data.corpus.items().iter().collect();
            Some(label_accuracy(t, &items)?)
        }
        None => None,
    };
    Ok(EvalReport {
        variant: variant.name().into(),
        seed,
        regime,
        hr5: m.hr5,
        hr10: m.hr10,
        ndcg5: m.ndcg5,
        ndcg10: m.ndcg10,
        count: m.count,
        gr_vk: gr.map(|g| g.0),
        gr_cat: gr.map(|g| g.1),
    })
}

/// One seed of one regime: shared data and stage-one tower across `variants`.
#[derive(Clone, Debug)]
pub struct SeedRun {
    pub reports: Vec<EvalReport>,
    pub towers: Option<TowerRun>,
}

pub fn run_seed(cfg: &ExperimentConfig, master_seed: u64, regime: Regime, variants: &[Variant], probes: bool) -> Result<SeedRun> {
    let seeds = StageSeeds::derive(master_seed);
    let corpus = synth_generate(&cfg.synth, seeds.data)?;
    run_seed_on(&corpus, cfg, master_seed, regime, variants, probes)
}

pub fn run_seed_on(corpus: &Corpus, cfg: &ExperimentConfig, master_seed: u64, regime: Regime, variants: &[Variant], probes: bool) -> Result<SeedRun> {
    let seeds = StageSeeds::derive(master_seed);
    let data = prepare(corpus, &cfg.prep, regime, seeds.split)?;
    let mut reports = Vec::with_capacity(variants.len());
    let mut shared: Option<TowerRun> = None;
    for &v in variants {
        let own;
        let towers = match v {
            Variant::Random | Variant::IdOnly => None,
            Variant::Full | Variant::TpadNa => {
                if shared.is_none() {
                    shared = Some(train_towers(&data, &cfg.train, Variant::Full, &seeds, probes)?);
                }
                shared.as_ref()
            }
            _ => {
                own = train_towers(&data, &cfg.train, v, &seeds, false)?;
                Some(&own)
            }
        };
        let table = variant_table(&data, v, towers, &cfg.train, &seeds)?;
        let model = train_recommender(&data, table.as_ref(), &cfg.rec, seeds.rec)?;
        let tower = towers.map(|t| if v == Variant::TpadNa { &t.k0 } else { t.final_tower() });
        let r = evaluate(&data, &model, v, master_seed, regime, tower, cfg.rec.max_len)?;
        info!("seed {master_seed} {} {v}: hr@10 {:.4} ndcg@10 {:.4}", regime.name(), r.hr10, r.ndcg10);
        reports.push(r);
    }
    Ok(SeedRun { reports, towers: shared })
}

/// Per-variant mean over seeds plus paired tests of every variant against a reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub regime: Regime,
    pub reference: String,
    pub rows: Vec<SweepRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub variant: String,
    pub per_seed_hr10: Vec<f64>,
    pub mean_hr10: f64,
    pub mean_ndcg10: f64,
    /// Paired test of the reference minus this variant on HR@10.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vs_reference: Option<PairedTTest>,
    /// Seeds where the reference beats this variant on HR@10.
    pub reference_wins: usize,
}

pub fn summarize(reports: &[EvalReport], regime: Regime, reference: Variant) -> Result<SweepSummary> {
    let rows_of = |name: &str| -> Vec<&EvalReport> {
        let mut r: Vec<&EvalReport> = reports.iter().filter(|r| r.variant == name && r.regime == regime).collect();
        r.sort_by_key(|r| r.seed);
        r
    };
    let reference_rows = rows_of(reference.name());
    let names: BTreeSet<&str> = reports.iter().map(|r| r.variant.as_str()).collect();
    let mut rows = Vec::new();
    for v in Variant::ALL.iter().map(|v| v.name()).filter(|n| names.contains(n)) {
        let mine = rows_of(v);
        let hr: Vec<f64> = mine.iter().map(|r| r.hr10).collect();
        let n = hr.len().max(1) as f64;
        let paired = v != reference.name()
            && mine.len() == reference_rows.len()
            && mine.iter().zip(&reference_rows).all(|(a, b)| a.seed == b.seed);
        let ref_hr: Vec<f64> = reference_rows.iter().map(|r| r.hr10).collect();
        let (vs_reference, reference_wins) = if paired {
            let test = if hr.len() >= 2 { Some(paired_t_test(&ref_hr, &hr)?) } else { None };
            (test, ref_hr.iter().zip(&hr).filter(|(a, b)| a > b).count())
        } else {
            (None, 0)
        };
        rows.push(SweepRow {
            variant: v.into(),
            mean_hr10: hr.iter().sum::<f64>() / n,
            mean_ndcg10: mine.iter().map(|r| r.ndcg10).sum::<f64>() / n,
            per_seed_hr10: hr,
            vs_reference,
            reference_wins,
        });
    }
    Ok(SweepSummary {
        regime,
        reference: reference.name().into(),
        rows,
    })
}
