//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tpad::cli::{files, Command, Runner};
use tpad::config::RunConfig;
use tpad::data::{extract_meta_pairs, filter_meta_pairs, synth_generate, Corpus, Item, ItemId, MetaPair, Session, SynthConfig};
use tpad::experiment::{prepare, run_seed, train_towers, ExperimentConfig, PrepConfig, Regime, Variant};
use tpad::mi::{correlated_gaussian, derangement, fit_club, fit_mine, gaussian_mi, ClubEstimator, FitConfig, MineEstimator};
use tpad::nn::params::{flatten, load_flat};
use tpad::nn::{grad_check, Tensor};
use tpad::pipeline::{stage1_train, EmbeddingTable, StageSeeds};
use tpad::recsys::metrics::{hit_at, ndcg_at};
use tpad::recsys::{paired_t_test, rec_train, target_ranks, RankMetrics, RecConfig, RecModel};
use tpad::towers::{gen_loss, intra_cl_loss, GenTarget, KnowledgeTower, TowerDims, TowerGradIn, TowerInput, TransferTower};
use tpad::tpa::{
    align_backward, align_forward, build_pattern_summaries, fit_estimators, new_projectors, AlignBatch, AlignEstimators,
    AlignModel, AlignPerms, AlignWeights, Modal, OrderRows,
};

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    println!("criterion {id} [{name}]: {} ({detail})", if pass { "PASS" } else { "FAIL" });
}

#[test]
fn c01_gaussian_mi_oracles() {
    let mut all = true;
    let mut details = Vec::new();
    for rho in [0.0, 0.5, 0.8, 0.9] {
        let start = Instant::now();
        let truth = gaussian_mi(rho);
        let (mut club_sum, mut mine_sum) = (0.0, 0.0);
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let (a, b) = correlated_gaussian(4096, rho, &mut rng);
            let mut club = ClubEstimator::new(1, 1, 16, 0.01, &mut rng);
            fit_club(&mut club, &a, &b, &FitConfig { steps: 600, batch: 256, seed }).unwrap();
            club_sum += club.estimate(&a, &b).unwrap().value;
            let mut mine = MineEstimator::new(1, 1, 32, 0.005, &mut rng);
            fit_mine(&mut mine, &a, &b, &FitConfig { steps: 2500, batch: 256, seed }).unwrap();
            let (ta, tb) = correlated_gaussian(4096, rho, &mut rng);
            mine_sum += mine.estimate(&ta, &tb, &derangement(4096, &mut rng)).unwrap().value;
        }
        let (club, mine) = (club_sum / 10.0, mine_sum / 10.0);
        let secs = start.elapsed().as_secs_f64();
        let ok = club >= truth - 0.05 && mine >= truth - 0.12 && mine <= truth + 0.05 && secs < 120.0;
        all &= ok;
        details.push(format!("rho={rho}: mi={truth:.4} club={club:.4} mine={mine:.4} {secs:.1}s"));
    }
    let detail = details.join("; ");
    report(1, "MI oracle suite", all, &detail);
    assert!(all, "{detail}");
}

fn rand_tensor(rows: usize, cols: usize, r: &mut ChaCha8Rng) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

fn micro_corpus(r: &mut ChaCha8Rng, d_in: usize) -> Corpus {
    let items = (0..6)
        .map(|id| Item {
            id,
            feat_txt: (0..d_in).map(|_| r.random_range(-1.0..1.0)).collect(),
            feat_img: (0..d_in).map(|_| r.random_range(-1.0..1.0)).collect(),
            vk: (id % 3) as usize,
            cats: vec![(id % 2) as usize, 2 + (id % 2) as usize],
        })
        .collect();
    let sessions = vec![
        Session { sid: 0, items: vec![0, 1, 2, 3] },
        Session { sid: 1, items: vec![5, 4, 1, 0, 2] },
    ];
    Corpus::new(items, sessions).unwrap()
}

/// Four-item distillation batch whose rows all carry an order-1 pattern summary.
fn align_micro_batch(r: &mut ChaCha8Rng, c: &Corpus, dims: TowerDims) -> (AlignBatch, AlignModel) {
    let t = TransferTower::new(dims, r);
    let pairs: Vec<MetaPair> = [(0, 2), (1, 2), (3, 4), (5, 4), (2, 0), (4, 0), (0, 1), (5, 1)]
        .into_iter()
        .map(|(q, target)| MetaPair { order: 1, query: vec![q], target })
        .collect();
    let table = build_pattern_summaries(&t, &pairs, c).unwrap();
    let ids = [2u64, 4, 0, 1];
    let items: Vec<&Item> = ids.iter().map(|&i| c.item(i).unwrap()).collect();
    let pooled = Modal::from_fn(|m| {
        let rows: Vec<&[f64]> = ids.iter().map(|&i| table.get(i, 1).unwrap().pooled.get(m).as_slice()).collect();
        Tensor::from_rows(&rows).unwrap()
    });
    let batch = AlignBatch {
        input: TowerInput::from_items(&items).unwrap(),
        targets: items.iter().map(|i| GenTarget::from(*i)).collect(),
        orders: vec![OrderRows { order: 1, rows: (0..4).collect(), pooled }],
        anchor: Modal::from_fn(|_| rand_tensor(4, dims.d_sum, r)),
    };
    let model = AlignModel {
        tower: KnowledgeTower::new(dims, r),
        projectors: new_projectors(dims.d_sum, 3, r),
    };
    (batch, model)
}

#[test]
fn c02_gradient_suite() {
    let start = Instant::now();
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let dims = TowerDims {
        d_in: 3,
        d_h: 5,
        d_sum: 4,
        vk_classes: 3,
        cat_classes: 4,
        k_cat: 2,
    };
    let c = micro_corpus(&mut r, dims.d_in);
    let mut errors: Vec<(&str, f64)> = Vec::new();

    // generation loss through the knowledge tower
    let k = KnowledgeTower::new(dims, &mut r);
    let items: Vec<&Item> = c.items()[..4].iter().collect();
    let input = TowerInput::from_items(&items).unwrap();
    let targets: Vec<GenTarget> = items.iter().map(|i| GenTarget::from(*i)).collect();
    let f = |p: &[f64]| {
        let mut tw = k.clone();
        load_flat(&mut tw, p)?;
        let (out, cache) = tw.forward_cached(&input)?;
        let (l, dv, dc) = gen_loss(&out.vk_logits, &out.cat_logits, &targets, 2)?;
        let g = tw.backward(&cache, &TowerGradIn { vk_logits: Some(dv), cat_logits: Some(dc), ..Default::default() })?;
        Ok((l, flatten(&g)))
    };
    errors.push(("gen_loss", grad_check(f, &flatten(&k), 1e-5, 400, 1).unwrap().max_rel_error));

    // contrastive loss through the transfer tower, two groups of two
    let t = TransferTower::new(dims, &mut r);
    let queries: Vec<&[ItemId]> = vec![&[1], &[2], &[3], &[0]];
    let tin = TowerInput::from_queries(&c, &queries).unwrap();
    let f = |p: &[f64]| {
        let mut tw = t.clone();
        load_flat(&mut tw, p)?;
        let (out, cache) = tw.forward_cached(&tin)?;
        let (lv, gv) = intra_cl_loss(&out.e_v, &[5, 5, 9, 9], 0.5)?;
        let (lt, gt) = intra_cl_loss(&out.e_t, &[5, 5, 9, 9], 0.5)?;
        let g = tw.backward(&cache, &TowerGradIn { e_v: Some(gv), e_t: Some(gt), ..Default::default() })?;
        Ok((lv + lt, flatten(&g)))
    };
    errors.push(("intra_cl_loss", grad_check(f, &flatten(&t), 1e-5, 400, 2).unwrap().max_rel_error));

    // each alignment term alone, then the composite objective
    let (batch, model) = align_micro_batch(&mut r, &c, dims);
    let mut est = AlignEstimators::new(3, 4, 0.01, 0.01, &mut r);
    let all_on = AlignWeights { gen: 1.0, disentangle: 1.0, pattern: 1.0, anchor: 1.0 };
    let fwd = align_forward(&model, &batch).unwrap();
    fit_estimators(&mut est, &fwd, &batch, &all_on, &mut r).unwrap();
    let perms = AlignPerms::sample(&batch, &mut r);
    let cases = [
        ("miu_loss", AlignWeights { gen: 0.0, disentangle: 1.0, pattern: 0.0, anchor: 0.0 }),
        ("mil_h_loss", AlignWeights { gen: 0.0, disentangle: 0.0, pattern: 1.0, anchor: 0.0 }),
        ("mil_s_loss", AlignWeights { gen: 0.0, disentangle: 0.0, pattern: 0.0, anchor: 1.0 }),
        ("composite", AlignWeights { gen: 1.0, disentangle: 0.005, pattern: 1.0, anchor: 0.5 }),
    ];
    for (name, w) in cases {
        let f = |p: &[f64]| {
            let mut m = model.clone();
            load_flat(&mut m, p)?;
            let fwd = align_forward(&m, &batch)?;
            let (l, g) = align_backward(&m, &fwd, &est, &batch, &w, &perms)?;
            Ok((l.total, flatten(&g)))
        };
        errors.push((name, grad_check(f, &flatten(&model), 1e-5, 600, 3).unwrap().max_rel_error));
    }

    // recommender cross-entropy with modality features
    let table = EmbeddingTable::random(&c, 3, 4);
    let rec = RecModel::new(&c, Some(&table), 4, 5).unwrap();
    let prefixes: Vec<&[ItemId]> = vec![&[1, 2, 3], &[4], &[5, 0], &[0, 1, 2, 4]];
    let rec_targets = [2, 3, 1, 0];
    let f = |p: &[f64]| {
        let mut m = rec.clone();
        load_flat(&mut m, p)?;
        let (l, g) = m.loss(&prefixes, &rec_targets)?;
        Ok((l, flatten(&g)))
    };
    errors.push(("recommender cross-entropy", grad_check(f, &flatten(&rec), 1e-5, 400, 6).unwrap().max_rel_error));

    let secs = start.elapsed().as_secs_f64();
    let worst = errors.iter().map(|e| e.1).fold(0.0, f64::max);
    let pass = worst < 1e-4 && secs < 60.0;
    let detail = format!(
        "{}; {secs:.1}s",
        errors.iter().map(|(n, e)| format!("{n} {e:.2e}")).collect::<Vec<_>>().join(", ")
    );
    report(2, "gradient suite", pass, &detail);
    assert!(pass, "{detail}");
}

/// All contiguous windows of length `order + 1`, found by scanning every
/// (start, end) position pair.
fn enumerate_windows(sessions: &[Session], order: usize) -> BTreeMap<(Vec<ItemId>, ItemId), usize> {
    let mut out = BTreeMap::new();
    for s in sessions {
        let n = s.items.len();
        for start in 0..n {
            for end in start..n {
                if end - start == order {
                    *out.entry((s.items[start..end].to_vec(), s.items[end])).or_default() += 1;
                }
            }
        }
    }
    out
}

fn multiset(pairs: &[MetaPair], order: usize) -> BTreeMap<(Vec<ItemId>, ItemId), usize> {
    let mut out = BTreeMap::new();
    for p in pairs {
        assert_eq!(p.order, order);
        *out.entry((p.query.clone(), p.target)).or_default() += 1;
    }
    out
}

#[test]
fn c03_meta_pair_oracle() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let sessions: Vec<Session> = (0..1000)
        .map(|sid| {
            let len = r.random_range(1..=9);
            Session { sid, items: (0..len).map(|_| r.random_range(0..2500)).collect() }
        })
        .collect();
    let mut pass = true;
    let mut details = Vec::new();
    for order in 1..=2 {
        let pairs = extract_meta_pairs(&sessions, order).unwrap();
        let extracted = multiset(&pairs, order);
        let oracle = enumerate_windows(&sessions, order);
        let same = extracted == oracle;

        // two passes: count targets, then keep pairs whose target occurs more than once
        let mut counts: BTreeMap<ItemId, usize> = BTreeMap::new();
        for p in &pairs {
            *counts.entry(p.target).or_default() += 1;
        }
        let kept: Vec<MetaPair> = pairs.iter().filter(|p| counts[&p.target] >= 2).cloned().collect();
        let filtered = filter_meta_pairs(&pairs);
        let filter_same = filtered == kept;
        pass &= same && filter_same;
        details.push(format!(
            "order {order}: {} pairs, {} after filter, enumeration {}, filter {}",
            pairs.len(),
            filtered.len(),
            if same { "equal" } else { "differs" },
            if filter_same { "equal" } else { "differs" }
        ));
    }
    let detail = details.join("; ");
    report(3, "meta-pair oracle", pass, &detail);
    assert!(pass, "{detail}");
}

#[test]
fn c04_intra_cl_closed_form() {
    // two groups of two unit vectors, orthogonal across groups, tau = 1
    let s = Tensor::matrix(4, 2, vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
    let want = (1.0 + 2.0 / std::f64::consts::E).ln();
    // the textual modality gets the same geometry rotated by a quarter turn
    let rotated = Tensor::matrix(4, 2, vec![0.0, 1.0, 0.0, 1.0, -1.0, 0.0, -1.0, 0.0]).unwrap();
    let (v, _) = intra_cl_loss(&s, &[1, 1, 2, 2], 1.0).unwrap();
    let (t, _) = intra_cl_loss(&rotated, &[1, 1, 2, 2], 1.0).unwrap();
    let pass = (v - want).abs() < 1e-9 && (t - want).abs() < 1e-9;
    let detail = format!("visual {v:.12}, textual {t:.12}, expected {want:.12}");
    report(4, "IntraCL closed form", pass, &detail);
    assert!(pass, "{detail}");
}

#[test]
fn c08_label_accuracy_within_fifteen_epochs() {
    let cfg = ExperimentConfig::default();
    let seeds = StageSeeds::derive(1);
    let corpus = synth_generate(&cfg.synth, seeds.data).unwrap();
    let data = prepare(&corpus, &cfg.prep, Regime::Warm, seeds.split).unwrap();
    let mut train = cfg.train.clone();
    train.k0_epochs = train.k0_epochs.min(15);
    let (_, log) = stage1_train(&data.corpus, &train, seeds.k0).unwrap();
    let hit = log
        .iter()
        .find(|row| row.gr_vk.unwrap_or(0.0) >= 0.95 && row.gr_cat.unwrap_or(0.0) >= 0.95)
        .map(|row| row.epoch + 1);
    let curve: Vec<String> = log
        .iter()
        .map(|row| format!("{:.2}/{:.2}", row.gr_vk.unwrap_or(f64::NAN), row.gr_cat.unwrap_or(f64::NAN)))
        .collect();
    let pass = hit.is_some_and(|e| e <= 15);
    let detail = format!("epochs to reach 0.95: {hit:?}; vk/cat per epoch {}", curve.join(" "));
    report(8, "label accuracy trajectory", pass, &detail);
    assert!(pass, "{detail}");
}

fn small_run_config(out: &std::path::Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.out = out.to_string_lossy().into_owned();
    cfg.experiment.synth.sessions = 1200;
    cfg.experiment.synth.items_per_cluster = 20;
    cfg.experiment.train.k0_epochs = 4;
    cfg.experiment.train.t_epochs = 2;
    cfg.experiment.train.k1_epochs = 4;
    cfg.experiment.train.probe_steps = 50;
    cfg.experiment.rec.epochs = 2;
    cfg
}

#[test]
fn c09_run_all_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for dir in [&a, &b] {
        let runner = Runner::new(small_run_config(dir.path())).unwrap();
        runner.run(Command::RunAll).unwrap();
        outputs.push(std::fs::read(runner.path(files::METRICS)).unwrap());
    }
    let pass = !outputs[0].is_empty() && outputs[0] == outputs[1];
    let detail = format!("metrics.json {} bytes vs {} bytes, identical: {}", outputs[0].len(), outputs[1].len(), outputs[0] == outputs[1]);
    report(9, "run-all determinism", pass, &detail);
    assert!(pass, "{detail}");
}

fn metric_algebra_holds(ranks: &[usize]) -> bool {
    let mut prev = (0.0, 0.0);
    for k in 1..=60 {
        let n = ranks.len() as f64;
        let hr = ranks.iter().map(|&r| hit_at(r, k)).sum::<f64>() / n;
        let ndcg = ranks.iter().map(|&r| ndcg_at(r, k)).sum::<f64>() / n;
        if ndcg > hr + 1e-15 || hr < prev.0 || ndcg < prev.1 {
            return false;
        }
        prev = (hr, ndcg);
    }
    let m = RankMetrics::from_ranks(ranks);
    m.ndcg5 <= m.hr5 && m.ndcg10 <= m.hr10 && m.hr5 <= m.hr10 && m.ndcg5 <= m.ndcg10
}

#[test]
fn c10_metric_algebra() {
    // ranks from a trained recommender on held-out sessions
    let synth = SynthConfig { sessions: 800, items_per_cluster: 10, ..SynthConfig::default() };
    let corpus = synth_generate(&synth, 10).unwrap();
    let data = prepare(&corpus, &PrepConfig::default(), Regime::Warm, 11).unwrap();
    let rec = RecConfig { epochs: 2, ..RecConfig::default() };
    let train = data.sessions(&data.splits.train);
    let valid = data.sessions(&data.splits.valid);
    let (model, _) = rec_train(&data.corpus, &train, &valid, None, &[], &rec, 12).unwrap();
    let examples = tpad::experiment::test_examples(&data, Regime::Warm, rec.max_len);
    let trained = target_ranks(&model, &examples).unwrap();

    let mut r = ChaCha8Rng::seed_from_u64(10);
    let mut evaluations = vec![trained];
    for _ in 0..200 {
        let n = r.random_range(1..50);
        evaluations.push((0..n).map(|_| r.random_range(1..80)).collect());
    }
    let algebra = evaluations.iter().all(|ranks| metric_algebra_holds(ranks));
    let exact = ndcg_at(3, 5) == 0.5;
    let pass = algebra && exact;
    let detail = format!(
        "{} evaluations ({} trained-model ranks), ndcg(rank 3, K 5) = {}",
        evaluations.len(),
        evaluations[0].len(),
        ndcg_at(3, 5)
    );
    report(10, "metric algebra", pass, &detail);
    assert!(pass, "{detail}");
}

#[test]
fn c05_disentangle_and_align_trajectories() {
    let start = Instant::now();
    let cfg = ExperimentConfig::default();
    let mut club_down = 0;
    let mut mine_up = 0;
    let mut rows = Vec::new();
    for seed in 1..=10u64 {
        let seeds = StageSeeds::derive(seed);
        let corpus = synth_generate(&cfg.synth, seeds.data).unwrap();
        let data = prepare(&corpus, &cfg.prep, Regime::Warm, seeds.split).unwrap();
        let run = train_towers(&data, &cfg.train, Variant::Full, &seeds, true).unwrap();
        let (_, out) = run.distill.as_ref().unwrap();
        let (a, b) = (out.probe_start.unwrap(), out.probe_end.unwrap());
        club_down += usize::from(b.club < a.club);
        mine_up += usize::from(b.mine > a.mine);
        rows.push(format!("s{seed} club {:.1}->{:.1} mine {:.3}->{:.3}", a.club, b.club, a.mine, b.mine));
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = club_down >= 8 && mine_up >= 8 && secs < 1200.0;
    let detail = format!("club fell in {club_down}/10, mine rose in {mine_up}/10, {secs:.0}s; {}", rows.join("; "));
    report(5, "disentanglement/alignment trajectories", pass, &detail);
    assert!(pass, "{detail}");
}

fn hr10_of(reports: &[tpad::experiment::EvalReport], v: Variant) -> f64 {
    reports.iter().find(|r| r.variant == v.name()).map(|r| r.hr10).unwrap()
}

#[test]
fn c06_end_to_end_ordering() {
    let start = Instant::now();
    let cfg = ExperimentConfig::default();
    let variants = [Variant::Full, Variant::TpadNa, Variant::Random];
    let (mut full, mut na, mut random) = (Vec::new(), Vec::new(), Vec::new());
    let mut algebra = true;
    for seed in 1..=5u64 {
        let run = run_seed(&cfg, seed, Regime::Warm, &variants, false).unwrap();
        algebra &= run.reports.iter().all(|r| r.ndcg10 <= r.hr10 && r.ndcg5 <= r.hr5 && r.hr5 <= r.hr10);
        full.push(hr10_of(&run.reports, Variant::Full));
        na.push(hr10_of(&run.reports, Variant::TpadNa));
        random.push(hr10_of(&run.reports, Variant::Random));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let test = paired_t_test(&full, &random).unwrap();
    let wins = full.iter().zip(&na).filter(|(a, b)| a > b).count();
    let secs = start.elapsed().as_secs_f64();
    let pass = algebra
        && mean(&full) > mean(&na)
        && mean(&na) > mean(&random)
        && test.mean_diff > 0.0
        && test.p_value < 0.05
        && wins >= 4
        && secs < 2700.0;
    let detail = format!(
        "hr@10 mean full {:.4} na {:.4} random {:.4}; full>na in {wins}/5; full vs random p={:.4}; {secs:.0}s; per seed full {:?} na {:?} random {:?}",
        mean(&full),
        mean(&na),
        mean(&random),
        test.p_value,
        full,
        na,
        random
    );
    report(6, "end-to-end ordering", pass, &detail);
    assert!(pass, "{detail}");
}

#[test]
fn c07_cold_start() {
    let start = Instant::now();
    let cfg = ExperimentConfig::default();
    let variants = [Variant::Full, Variant::Random, Variant::IdOnly];
    let mut wins = 0;
    let (mut warm_full, mut cold_full, mut warm_id, mut cold_id) = (0.0, 0.0, 0.0, 0.0);
    let mut rows = Vec::new();
    for seed in 1..=5u64 {
        let cold = run_seed(&cfg, seed, Regime::Cold, &variants, false).unwrap();
        let warm = run_seed(&cfg, seed, Regime::Warm, &[Variant::Full, Variant::IdOnly], false).unwrap();
        let (cf, cr, ci) = (
            hr10_of(&cold.reports, Variant::Full),
            hr10_of(&cold.reports, Variant::Random),
            hr10_of(&cold.reports, Variant::IdOnly),
        );
        let (wf, wi) = (hr10_of(&warm.reports, Variant::Full), hr10_of(&warm.reports, Variant::IdOnly));
        wins += usize::from(cf > cr);
        cold_full += cf;
        cold_id += ci;
        warm_full += wf;
        warm_id += wi;
        rows.push(format!("s{seed} cold full {cf:.3} random {cr:.3} id {ci:.3}, warm full {wf:.3} id {wi:.3}"));
    }
    let drop_full = (warm_full - cold_full) / warm_full;
    let drop_id = (warm_id - cold_id) / warm_id;
    let secs = start.elapsed().as_secs_f64();
    let pass = wins >= 4 && drop_full < drop_id;
    let detail = format!(
        "full beats random on cold items in {wins}/5; relative drop full {drop_full:.3} vs id-only {drop_id:.3}; {secs:.0}s; {}",
        rows.join("; ")
    );
    report(7, "cold-start", pass, &detail);
    assert!(pass, "{detail}");
}
