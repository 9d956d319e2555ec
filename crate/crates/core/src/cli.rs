//! Stage commands over a run directory.
//!
//! Each command reads its upstream artifacts from the run directory and fails
//! with a state error naming the command that produces a missing one.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{load_corpus, synth_generate, Corpus, MetaPair, Splits};
use crate::error::{Error, Result};
use crate::experiment::{
    evaluate, run_seed_on, summarize, train_recommender, EvalReport, Prepared, SweepSummary, Variant,
    REPORT_COLUMNS,
};
use crate::nn::Checkpoint;
use crate::pipeline::{
    export_embeddings, stage1_train, stage2_k_train, stage2_t_train, EmbeddingTable, LogRow, ProbeReading, StageSeeds,
    LOG_COLUMNS,
};
use crate::recsys::RecModel;
use crate::tpa::{new_projectors, AlignModel};
use crate::towers::{KnowledgeTower, TowerDims, TransferTower};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    GenData,
    Prepare,
    TrainK0,
    TrainT,
    TrainK1,
    Export,
    TrainRec,
    Evaluate,
    Ablate,
    RunAll,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Prepare => "prepare",
            Command::TrainK0 => "train-k0",
            Command::TrainT => "train-t",
            Command::TrainK1 => "train-k1",
            Command::Export => "export",
            Command::TrainRec => "train-rec",
            Command::Evaluate => "evaluate",
            Command::Ablate => "ablate",
            Command::RunAll => "run-all",
        }
    }
}

/// File names inside a run directory.
pub mod files {
    pub const CONFIG: &str = "config.conf";
    pub const ITEMS: &str = "items.jsonl";
    pub const SESSIONS: &str = "sessions.jsonl";
    pub const PREP_ITEMS: &str = "prepared_items.jsonl";
    pub const PREP_SESSIONS: &str = "prepared_sessions.jsonl";
    pub const SPLITS: &str = "splits.json";
    pub const META_PAIRS: &str = "meta_pairs.jsonl";
    pub const K0: &str = "k0.ckpt.json";
    pub const T: &str = "t.ckpt.json";
    pub const K1: &str = "k1.ckpt.json";
    pub const PROBES: &str = "probes.json";
    pub const EMBEDDINGS: &str = "embeddings.jsonl";
    pub const REC: &str = "rec_model.json";
    pub const METRICS: &str = "metrics.json";
    pub const METRICS_CSV: &str = "metrics.csv";
    pub const ABLATION: &str = "ablation.json";
    pub const ABLATION_CSV: &str = "ablation.csv";
    pub const LOG_K0: &str = "log_k0.csv";
    pub const LOG_T: &str = "log_t.csv";
    pub const LOG_K1: &str = "log_k1.csv";
}

#[derive(Serialize, Deserialize)]
struct Stamped<T> {
    config_hash: String,
    seed: u64,
    #[serde(flatten)]
    body: T,
}

#[derive(Serialize, Deserialize)]
struct MetricsBody {
    report: EvalReport,
}

#[derive(Serialize, Deserialize)]
struct ProbeBody {
    start: Option<ProbeReading>,
    end: Option<ProbeReading>,
}

#[derive(Serialize, Deserialize)]
struct AblationBody {
    seeds: Vec<u64>,
    reports: Vec<EvalReport>,
    summary: SweepSummary,
}

#[derive(Serialize, Deserialize)]
struct SplitsBody {
    splits: Splits,
}

pub struct Runner {
    cfg: RunConfig,
    dir: PathBuf,
    hash: String,
    seeds: StageSeeds,
}

impl Runner {
    /// Creates the run directory and records the full config in it.
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let dir = cfg.run_dir();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let hash = cfg.hash();
        let runner = Self {
            seeds: StageSeeds::derive(cfg.seed),
            cfg,
            dir,
            hash,
        };
        let text = format!("# config {} seed {}\n{}", runner.hash, runner.cfg.seed, runner.cfg.render());
        runner.write(files::CONFIG, text.as_bytes())?;
        Ok(runner)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write(&self, name: &str, bytes: &[u8]) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
    }

    fn require(&self, name: &str, stage: Command) -> Result<PathBuf> {
        let p = self.path(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::State {
                stage: stage.name().into(),
                detail: format!("{} not found; run `{}` first", p.display(), stage.name()),
            })
        }
    }

    fn write_json<T: Serialize>(&self, name: &str, body: T) -> Result<()> {
        let s = Stamped {
            config_hash: self.hash.clone(),
            seed: self.cfg.seed,
            body,
        };
        let mut text = serde_json::to_string_pretty(&s)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    fn read_json<T: for<'de> Deserialize<'de>>(&self, name: &str, stage: Command) -> Result<T> {
        let p = self.require(name, stage)?;
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let s: Stamped<T> = serde_json::from_str(&text)?;
        Ok(s.body)
    }

    fn write_csv(&self, name: &str, columns: &str, rows: impl IntoIterator<Item = String>) -> Result<()> {
        let mut out = format!("# config {} seed {}\n{columns}\n", self.hash, self.cfg.seed);
        for r in rows {
            out.push_str(&r);
            out.push('\n');
        }
        self.write(name, out.as_bytes())
    }

    fn write_log(&self, name: &str, rows: &[LogRow]) -> Result<()> {
        self.write_csv(name, LOG_COLUMNS, rows.iter().map(LogRow::to_csv))
    }

    fn save_checkpoint<P: crate::nn::Parameters>(&self, name: &str, tag: &str, params: &P) -> Result<()> {
        let mut c = Checkpoint::from_params(tag, params);
        c.config_hash = Some(self.hash.clone());
        c.save(&self.path(name))
    }

    pub fn run(&self, cmd: Command) -> Result<()> {
        info!("{} in {}", cmd.name(), self.dir.display());
        match cmd {
            Command::GenData => self.gen_data(),
            Command::Prepare => self.prepare(),
            Command::TrainK0 => self.train_k0(),
            Command::TrainT => self.train_t(),
            Command::TrainK1 => self.train_k1(),
            Command::Export => self.export(),
            Command::TrainRec => self.train_rec(),
            Command::Evaluate => self.evaluate(),
            Command::Ablate => self.ablate(),
            Command::RunAll => self.run_all(),
        }
    }

    fn source_corpus(&self, seed: u64) -> Result<Corpus> {
        if self.cfg.items_path.is_empty() {
            synth_generate(&self.cfg.experiment.synth, StageSeeds::derive(seed).data)
        } else {
            load_corpus(Path::new(&self.cfg.items_path), Path::new(&self.cfg.sessions_path))
        }
    }

    fn gen_data(&self) -> Result<()> {
        let c = self.source_corpus(self.cfg.seed)?;
        c.save(&self.path(files::ITEMS), &self.path(files::SESSIONS))?;
        info!("corpus: {} items, {} sessions", c.num_items(), c.num_sessions());
        Ok(())
    }

    fn prepare(&self) -> Result<()> {
        let items = self.require(files::ITEMS, Command::GenData)?;
        let corpus = load_corpus(&items, &self.path(files::SESSIONS))?;
        let data = crate::experiment::prepare(&corpus, &self.cfg.experiment.prep, self.cfg.regime, self.seeds.split)?;
        data.corpus.save(&self.path(files::PREP_ITEMS), &self.path(files::PREP_SESSIONS))?;
        self.write_json(files::SPLITS, SplitsBody { splits: data.splits.clone() })?;
        let mut lines = String::new();
        for p in &data.pairs {
            lines.push_str(&serde_json::to_string(p)?);
            lines.push('\n');
        }
        self.write(files::META_PAIRS, lines.as_bytes())?;
        info!(
            "prepared: {} items, {} train / {} valid / {} test sessions, {} meta pairs",
            data.corpus.num_items(),
            data.splits.train.len(),
            data.splits.valid.len(),
            data.splits.test.len(),
            data.pairs.len()
        );
        Ok(())
    }

    fn prepared(&self) -> Result<Prepared> {
        let items = self.require(files::PREP_ITEMS, Command::Prepare)?;
        let corpus = load_corpus(&items, &self.path(files::PREP_SESSIONS))?;
        let splits = self.read_json::<SplitsBody>(files::SPLITS, Command::Prepare)?.splits;
        let text = fs::read_to_string(self.require(files::META_PAIRS, Command::Prepare)?)
            .map_err(|e| Error::io(self.path(files::META_PAIRS), e))?;
        let pairs = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str::<MetaPair>)
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Prepared { corpus, splits, pairs })
    }

    fn train_cfg(&self) -> crate::pipeline::TrainConfig {
        self.cfg.variant.apply(&self.cfg.experiment.train)
    }

    fn dims(&self, corpus: &Corpus) -> TowerDims {
        let t = &self.cfg.experiment.train;
        TowerDims::for_corpus(corpus, t.d_h, t.d_sum)
    }

    fn load_k0(&self, corpus: &Corpus) -> Result<KnowledgeTower> {
        let ck = Checkpoint::load(&self.require(files::K0, Command::TrainK0)?)?;
        let mut k = KnowledgeTower::new(self.dims(corpus), &mut ChaCha8Rng::seed_from_u64(0));
        ck.load_into("", &mut k)?;
        Ok(k)
    }

    fn load_t(&self, corpus: &Corpus) -> Result<TransferTower> {
        let ck = Checkpoint::load(&self.require(files::T, Command::TrainT)?)?;
        let mut t = TransferTower::new(self.dims(corpus), &mut ChaCha8Rng::seed_from_u64(0));
        ck.load_into("", &mut t)?;
        Ok(t)
    }

    fn load_k1(&self, corpus: &Corpus) -> Result<AlignModel> {
        let ck = Checkpoint::load(&self.require(files::K1, Command::TrainK1)?)?;
        let t = &self.cfg.experiment.train;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = AlignModel {
            tower: KnowledgeTower::new(self.dims(corpus), &mut rng),
            projectors: new_projectors(t.d_sum, t.d_lat, &mut rng),
        };
        ck.load_into("", &mut m)?;
        Ok(m)
    }

    fn train_k0(&self) -> Result<()> {
        let data = self.prepared()?;
        let (k0, log) = stage1_train(&data.corpus, &self.train_cfg(), self.seeds.k0)?;
        self.save_checkpoint(files::K0, "train-k0", &k0)?;
        self.write_log(files::LOG_K0, &log)
    }

    fn train_t(&self) -> Result<()> {
        let data = self.prepared()?;
        let (t, log) = stage2_t_train(&data.corpus, &data.pairs, &self.train_cfg(), self.seeds.t)?;
        self.save_checkpoint(files::T, "train-t", &t)?;
        self.write_log(files::LOG_T, &log)
    }

    fn train_k1(&self) -> Result<()> {
        let data = self.prepared()?;
        let k0 = self.load_k0(&data.corpus)?;
        let t = self.load_t(&data.corpus)?;
        let cfg = self.train_cfg();
        let mut out = stage2_k_train(&data.corpus, &k0, &t, &data.pairs, &cfg, &self.seeds, true)?;
        for _ in 1..cfg.rounds {
            out = stage2_k_train(&data.corpus, &out.model.tower, &t, &data.pairs, &cfg, &self.seeds, true)?;
        }
        self.save_checkpoint(files::K1, "train-k1", &out.model)?;
        self.write_json(
            files::PROBES,
            ProbeBody {
                start: out.probe_start,
                end: out.probe_end,
            },
        )?;
        self.write_log(files::LOG_K1, &out.log)
    }

    /// Summary table for the configured variant; `None` for the ID-only model.
    fn variant_table(&self, data: &Prepared) -> Result<Option<EmbeddingTable>> {
        let d_sum = self.cfg.experiment.train.d_sum;
        match self.cfg.variant {
            Variant::IdOnly => Ok(None),
            Variant::Random => Ok(Some(EmbeddingTable::random(&data.corpus, d_sum, self.seeds.baseline))),
            Variant::TpadNa => export_embeddings(&self.load_k0(&data.corpus)?, &data.corpus, "k0").map(Some),
            _ => export_embeddings(&self.load_k1(&data.corpus)?.tower, &data.corpus, "k1").map(Some),
        }
    }

    fn export(&self) -> Result<()> {
        let data = self.prepared()?;
        match self.variant_table(&data)? {
            Some(table) => table.save(&self.path(files::EMBEDDINGS), Some(&self.hash)),
            None => {
                info!("variant {} uses no embedding table", self.cfg.variant);
                Ok(())
            }
        }
    }

    fn train_rec(&self) -> Result<()> {
        let data = self.prepared()?;
        let table = match self.cfg.variant {
            Variant::IdOnly => None,
            _ => Some(EmbeddingTable::load(&self.require(files::EMBEDDINGS, Command::Export)?)?),
        };
        let model = train_recommender(&data, table.as_ref(), &self.cfg.experiment.rec, self.seeds.rec)?;
        self.write_json(files::REC, model)
    }

    fn evaluate(&self) -> Result<()> {
        let data = self.prepared()?;
        let model: RecModel = self.read_json(files::REC, Command::TrainRec)?;
        let tower = match self.cfg.variant {
            Variant::IdOnly | Variant::Random => None,
            Variant::TpadNa => Some(self.load_k0(&data.corpus)?),
            _ => Some(self.load_k1(&data.corpus)?.tower),
        };
        let report = evaluate(
            &data,
            &model,
            self.cfg.variant,
            self.cfg.seed,
            self.cfg.regime,
            tower.as_ref(),
            self.cfg.experiment.rec.max_len,
        )?;
        info!("{}: hr@10 {:.4} ndcg@10 {:.4} over {} targets", report.variant, report.hr10, report.ndcg10, report.count);
        self.write_csv(files::METRICS_CSV, REPORT_COLUMNS, [report.to_csv()])?;
        self.write_json(files::METRICS, MetricsBody { report })
    }

    fn ablate(&self) -> Result<()> {
        let seeds: Vec<u64> = (0..self.cfg.ablate_seeds as u64).map(|i| self.cfg.seed + i).collect();
        let mut reports = Vec::new();
        for &s in &seeds {
            let corpus = self.source_corpus(s)?;
            let run = run_seed_on(&corpus, &self.cfg.experiment, s, self.cfg.regime, &self.cfg.ablate_variants, false)?;
            reports.extend(run.reports);
        }
        let reference = self.cfg.ablate_variants[0];
        let summary = summarize(&reports, self.cfg.regime, reference)?;
        for row in &summary.rows {
            let p = row.vs_reference.map(|t| format!(" p={:.4}", t.p_value)).unwrap_or_default();
            info!("{:<18} mean hr@10 {:.4}{p}", row.variant, row.mean_hr10);
        }
        self.write_csv(files::ABLATION_CSV, REPORT_COLUMNS, reports.iter().map(EvalReport::to_csv))?;
        self.write_json(files::ABLATION, AblationBody { seeds, reports, summary })
    }

    fn run_all(&self) -> Result<()> {
        let mut chain = vec![Command::GenData, Command::Prepare, Command::TrainK0];
        if self.cfg.variant.needs_transfer() {
            chain.extend([Command::TrainT, Command::TrainK1]);
        }
        chain.extend([Command::Export, Command::TrainRec, Command::Evaluate]);
        for c in chain {
            self.run(c)?;
        }
        Ok(())
    }
}
