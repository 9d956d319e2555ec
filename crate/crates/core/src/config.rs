//! Flat `key = value` run configuration with a fixed schema.
//!
//! A config file must list every schema key; `#` starts a comment. The
//! config hash covers every key except `seed` and `out`, so runs that differ
//! only in seed share a hash and are told apart by the seed suffix of the run
//! directory.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::TransitionSpec;
use crate::error::{Error, Result};
use crate::experiment::{ExperimentConfig, Regime, Variant};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub experiment: ExperimentConfig,
    pub seed: u64,
    pub variant: Variant,
    pub regime: Regime,
    /// Items file of an external corpus; empty means the synthetic generator.
    pub items_path: String,
    pub sessions_path: String,
    pub out: String,
    pub ablate_variants: Vec<Variant>,
    pub ablate_seeds: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            experiment: ExperimentConfig::default(),
            seed: 1,
            variant: Variant::Full,
            regime: Regime::Warm,
            items_path: String::new(),
            sessions_path: String::new(),
            out: "runs".into(),
            ablate_variants: vec![Variant::Full, Variant::TpadNa, Variant::Random, Variant::IdOnly],
            ablate_seeds: 5,
        }
    }
}

struct Key {
    name: &'static str,
    get: fn(&RunConfig) -> String,
    set: fn(&mut RunConfig, &str) -> Result<()>,
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.parse().map_err(|e| Error::Config(format!("key `{key}`: cannot parse `{v}`: {e}")))
}

macro_rules! keys {
    ($($name:literal => $($field:ident).+),* $(,)?) => {
        &[$(Key {
            name: $name,
            get: |c| c.$($field).+.to_string(),
            set: |c, v| {
                c.$($field).+ = parse($name, v)?;
                Ok(())
            },
        }),*]
    };
}

const FIELD_KEYS: &[Key] = keys! {
    "synth.clusters" => experiment.synth.clusters,
    "synth.items_per_cluster" => experiment.synth.items_per_cluster,
    "synth.sessions" => experiment.synth.sessions,
    "synth.min_len" => experiment.synth.min_len,
    "synth.max_len" => experiment.synth.max_len,
    "synth.feature_dim" => experiment.synth.feature_dim,
    "synth.sigma" => experiment.synth.sigma,
    "synth.group_size" => experiment.synth.group_size,
    "synth.twin_offset" => experiment.synth.twin_offset,
    "synth.cat_classes" => experiment.synth.cat_classes,
    "prep.min_item_count" => experiment.prep.min_item_count,
    "prep.min_session_len" => experiment.prep.min_session_len,
    "prep.cold_frac" => experiment.prep.cold_frac,
    "train.d_h" => experiment.train.d_h,
    "train.d_sum" => experiment.train.d_sum,
    "train.d_lat" => experiment.train.d_lat,
    "train.k0_epochs" => experiment.train.k0_epochs,
    "train.k0_batch" => experiment.train.k0_batch,
    "train.k0_lr" => experiment.train.k0_lr,
    "train.t_epochs" => experiment.train.t_epochs,
    "train.t_batch_targets" => experiment.train.t_batch_targets,
    "train.t_lr" => experiment.train.t_lr,
    "train.k1_epochs" => experiment.train.k1_epochs,
    "train.k1_batch" => experiment.train.k1_batch,
    "train.k1_lr" => experiment.train.k1_lr,
    "train.warmup_frac" => experiment.train.warmup_frac,
    "train.mu" => experiment.train.mu,
    "train.gen_weight" => experiment.train.gen_weight,
    "train.gamma_disentangle" => experiment.train.gamma_disentangle,
    "train.gamma_pattern" => experiment.train.gamma_pattern,
    "train.gamma_anchor" => experiment.train.gamma_anchor,
    "train.tau" => experiment.train.tau,
    "train.est_hidden" => experiment.train.est_hidden,
    "train.club_lr" => experiment.train.club_lr,
    "train.mine_lr" => experiment.train.mine_lr,
    "train.rounds" => experiment.train.rounds,
    "train.probe_holdout" => experiment.train.probe_holdout,
    "train.probe_steps" => experiment.train.probe_steps,
    "rec.d_rec" => experiment.rec.d_rec,
    "rec.epochs" => experiment.rec.epochs,
    "rec.batch" => experiment.rec.batch,
    "rec.lr" => experiment.rec.lr,
    "rec.max_len" => experiment.rec.max_len,
    "rec.id_dropout" => experiment.rec.id_dropout,
    "seed" => seed,
    "variant" => variant,
    "regime" => regime,
    "data.items" => items_path,
    "data.sessions" => sessions_path,
    "out" => out,
    "ablate.seeds" => ablate_seeds,
};

fn planted(c: &RunConfig) -> (f64, usize) {
    match &c.experiment.synth.transition {
        TransitionSpec::Planted { p_main, shift } => (*p_main, *shift),
        TransitionSpec::Identity => (1.0, 0),
        TransitionSpec::Matrix(_) => (f64::NAN, 0),
    }
}

const OTHER_KEYS: &[Key] = &[
    Key {
        name: "synth.p_main",
        get: |c| planted(c).0.to_string(),
        set: |c, v| {
            let shift = planted(c).1;
            c.experiment.synth.transition = TransitionSpec::Planted { p_main: parse("synth.p_main", v)?, shift };
            Ok(())
        },
    },
    Key {
        name: "synth.shift",
        get: |c| planted(c).1.to_string(),
        set: |c, v| {
            let p_main = planted(c).0;
            c.experiment.synth.transition = TransitionSpec::Planted { p_main, shift: parse("synth.shift", v)? };
            Ok(())
        },
    },
    Key {
        name: "prep.split",
        get: |c| {
            let (a, b, t) = c.experiment.prep.split;
            format!("{a}:{b}:{t}")
        },
        set: |c, v| {
            let parts: Vec<&str> = v.split(':').map(str::trim).collect();
            if parts.len() != 3 {
                return Err(Error::Config(format!("key `prep.split`: expected train:valid:test, got `{v}`")));
            }
            c.experiment.prep.split = (parse("prep.split", parts[0])?, parse("prep.split", parts[1])?, parse("prep.split", parts[2])?);
            Ok(())
        },
    },
    Key {
        name: "ablate.variants",
        get: |c| c.ablate_variants.iter().map(|v| v.name()).collect::<Vec<_>>().join(","),
        set: |c, v| {
            c.ablate_variants = v.split(',').map(|s| s.trim().parse()).collect::<Result<_>>()?;
            Ok(())
        },
    },
];

fn all_keys() -> impl Iterator<Item = &'static Key> {
    FIELD_KEYS.iter().chain(OTHER_KEYS)
}

/// Keys excluded from the config hash.
const UNHASHED: [&str; 2] = ["seed", "out"];

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "warm" => Ok(Regime::Warm),
            "cold" => Ok(Regime::Cold),
            _ => Err(Error::Config(format!("unknown regime `{s}` (expected warm or cold)"))),
        }
    }
}

impl Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl RunConfig {
    pub fn key_names() -> Vec<&'static str> {
        all_keys().map(|k| k.name).collect()
    }

    pub fn get(&self, key: &str) -> Result<String> {
        all_keys()
            .find(|k| k.name == key)
            .map(|k| (k.get)(self))
            .ok_or_else(|| Error::Config(format!("unknown key `{key}`")))
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let k = all_keys()
            .find(|k| k.name == key)
            .ok_or_else(|| Error::Config(format!("unknown key `{key}`")))?;
        (k.set)(self, value)
    }

    /// Parses a complete config; every schema key must appear exactly once.
    pub fn parse(text: &str) -> Result<Self> {
        let mut seen: BTreeMap<String, String> = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !all_keys().any(|key| key.name == k) {
                return Err(Error::Config(format!("line {}: unknown key `{k}`", n + 1)));
            }
            if seen.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", n + 1)));
            }
        }
        let missing: Vec<&str> = all_keys().map(|k| k.name).filter(|k| !seen.contains_key(*k)).collect();
        if !missing.is_empty() {
            return Err(Error::Config(format!("missing keys: {}", missing.join(", "))));
        }
        let mut cfg = RunConfig::default();
        // p_main and shift each keep the other's current value
        for key in all_keys() {
            cfg.set(key.name, &seen[key.name])?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.experiment.train.validate()?;
        self.experiment.synth.transition_matrix()?;
        if self.items_path.is_empty() != self.sessions_path.is_empty() {
            return Err(Error::Config("data.items and data.sessions must be set together".into()));
        }
        if self.ablate_variants.is_empty() || self.ablate_seeds == 0 {
            return Err(Error::Config("ablate.variants and ablate.seeds must be nonempty".into()));
        }
        let r = &self.experiment.rec;
        if r.d_rec == 0 || r.batch == 0 || r.max_len == 0 {
            return Err(Error::Config("rec dimensions and batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&r.id_dropout) {
            return Err(Error::Config(format!("rec.id_dropout = {} must be in [0, 1)", r.id_dropout)));
        }
        Ok(())
    }

    /// Canonical `key = value` text listing every key.
    pub fn render(&self) -> String {
        all_keys().map(|k| format!("{} = {}\n", k.name, (k.get)(self))).collect()
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for k in all_keys().filter(|k| !UNHASHED.contains(&k.name)) {
            h.update(format!("{}={}\n", k.name, (k.get)(self)));
        }
        h.finalize().iter().take(6).map(|b| format!("{b:02x}")).collect()
    }

    /// `<out>/<hash>-seed<seed>`.
    pub fn run_dir(&self) -> PathBuf {
        Path::new(&self.out).join(format!("{}-seed{}", self.hash(), self.seed))
    }
}
