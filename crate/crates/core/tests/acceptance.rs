//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails.
//!
//! The ML-1M check reads `FLOWREC_ML1M` (path to `ratings.dat`), falling back
//! to `data/ml-1m/ratings.dat` at the workspace root.

use std::path::PathBuf;
use std::time::Instant;

use rand::Rng;

use flowrec::autograd::Graph;
use flowrec::config::{CfmReduction, DataConfig, ModelConfig, RunConfig, TrainConfig, STEPS_GRID};
use flowrec::dataset::synthetic::MarkovCorpus;
use flowrec::dataset::{Dataset, Example, InputFormat, SequenceBatch};
use flowrec::baseline::Popularity;
use flowrec::eval::{self, EvalOptions, EvalReport, GroupMetrics, Metrics, Recommender};
use flowrec::flow::{cfm_loss, interpolate, single_step_estimate, training_loss, StepNoise};
use flowrec::model::FlowRec;
use flowrec::rng::{stream, TrainRngs};
use flowrec::sampler::{euler_integrate, FlowSampler};
use flowrec::trainer::{train, TrainState};
use flowrec::{Matrix, Result};

struct Outcome {
    id: &'static str,
    pass: bool,
    detail: String,
    seconds: f64,
}

fn check(id: &'static str, budget_secs: f64, f: impl FnOnce() -> (bool, String)) -> Outcome {
    let start = Instant::now();
    let (pass, detail) = f();
    let seconds = start.elapsed().as_secs_f64();
    let in_budget = seconds < budget_secs;
    let detail = if in_budget {
        detail
    } else {
        format!("{detail}; over the {budget_secs:.0}s budget")
    };
    let o = Outcome {
        id,
        pass: pass && in_budget,
        detail,
        seconds,
    };
    println!("[{}] criterion {} ({:.1}s): {}", if o.pass { "PASS" } else { "FAIL" }, o.id, o.seconds, o.detail);
    o
}

// ---------------------------------------------------------------- 1

fn analytic_identities() -> (bool, String) {
    let mut rng = stream(11, "identities");
    let mut fails = Vec::new();
    let d = 16;
    let rand_m = |rng: &mut rand_chacha::ChaCha8Rng| Matrix::from_vec(1, d, (0..d).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect());

    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (x0, x1) = (rand_m(&mut rng), rand_m(&mut rng));
        let t: f64 = rng.random();
        if interpolate(&x0, &x1, &[0.0]).unwrap() != x0 || interpolate(&x0, &x1, &[1.0]).unwrap() != x1 {
            fails.push("interpolant boundary");
        }
        let xt = interpolate(&x0, &x1, &[t]).unwrap();
        let u = Matrix::from_vec(1, d, x1.data().iter().zip(x0.data()).map(|(b, a)| b - a).collect());
        let est = single_step_estimate(&xt, &u, &[t]);
        for (e, w) in est.data().iter().zip(x1.data()) {
            worst = worst.max((e - w).abs() / w.abs().max(1e-12));
        }
        if cfm_loss(&u, &x0, &x1) != 0.0 {
            fails.push("cfm zero case");
        }
        let off = Matrix::from_vec(1, d, u.data().iter().map(|v| v + 0.5).collect());
        if (cfm_loss(&off, &x0, &x1) - 0.25 * d as f64).abs() > 1e-12 {
            fails.push("cfm nonzero case");
        }
    }
    if worst > 1e-6 {
        fails.push("endpoint recovery");
    }

    let x0 = Matrix::from_rows(&[vec![0.5, -1.25], vec![3.0, 0.0]]);
    let k = 2100.0 / 1024.0;
    let c = Matrix::from_rows(&[vec![k, -3.0 * k], vec![7.0 * k, 0.0]]);
    let want = Matrix::from_rows(&[vec![0.5 + k, -1.25 - 3.0 * k], vec![3.0 + 7.0 * k, 0.0]]);
    let mut decay_err = 0.0f64;
    for t in STEPS_GRID {
        if euler_integrate(&x0, t, |_, _| Ok(c.clone())).unwrap() != want {
            fails.push("constant-field telescoping");
        }
        let y = euler_integrate(&Matrix::scalar(1.0), t, |x, _| Ok(x.map(|v| -v))).unwrap();
        decay_err = decay_err.max((y.item() - (1.0 - 1.0 / t as f64).powi(t as i32)).abs());
    }
    if decay_err > 1e-12 {
        fails.push("1-D Euler closed form");
    }
    fails.dedup();
    (
        fails.is_empty(),
        format!("endpoint rel err {worst:.1e}, decay err {decay_err:.1e}, failures {fails:?}"),
    )
}

// ---------------------------------------------------------------- 2

/// Relative error with a small absolute floor on the denominator, so that
/// gradients that are zero up to rounding do not produce spurious blowups.
const GRAD_FLOOR: f64 = 1e-4;

fn gradient_check() -> (bool, String) {
    let cfg = ModelConfig {
        dim: 8,
        layers: 1,
        heads: 2,
        max_len: 5,
        init_std: 0.3,
        ..Default::default()
    };
    let mut model = FlowRec::new(&cfg, 20, &mut stream(21, "init")).unwrap();
    let ex: Vec<Example> = (0..6u32)
        .map(|u| Example {
            user: u,
            context: (0..(u % 5 + 1)).map(|k| (u * 3 + k * 7) % 20 + 1).collect(),
            target: (u * 13 + 5) % 20 + 1,
        })
        .collect();
    let batch = SequenceBatch::from_examples(&ex, 5);
    let train = TrainConfig {
        alpha: 10.0,
        beta: 2.0,
        ..TrainConfig::default()
    };
    let noise = StepNoise::draw(&model, batch.size(), &mut TrainRngs::new(22));
    let loss_of = |m: &FlowRec| -> f64 {
        let mut g = Graph::new();
        let (l, _) = training_loss(&mut g, &mut m.bind(), &batch, &train, noise.clone(), None).unwrap();
        g.value(l).item()
    };
    let analytic = {
        let mut g = Graph::new();
        let (l, _) = training_loss(&mut g, &mut model.bind(), &batch, &train, noise.clone(), None).unwrap();
        g.backward(l).params()
    };
    let h = 1e-5;
    let mut worst = (0.0f64, String::new());
    let mut checked = 0usize;
    let ids: Vec<_> = model.params().iter().map(|(id, name, _)| (id, name.to_string())).collect();
    for (id, name) in ids {
        let grad = analytic.iter().find(|(p, _)| *p == id).map(|(_, g)| g.clone());
        let n = model.params().get(id).data().len();
        for e in 0..n {
            let orig = model.params().get(id).data()[e];
            model.params_mut().get_mut(id).data_mut()[e] = orig + h;
            let up = loss_of(&model);
            model.params_mut().get_mut(id).data_mut()[e] = orig - h;
            let down = loss_of(&model);
            model.params_mut().get_mut(id).data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = grad.as_ref().map_or(0.0, |g| g.data()[e]);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_FLOOR);
            if rel > worst.0 {
                worst = (rel, format!("{name}[{e}] analytic {a:.6e} numeric {numeric:.6e}"));
            }
            checked += 1;
        }
    }
    (
        worst.0 <= 1e-4,
        format!("{checked} parameters, max rel err {:.2e} at {}", worst.0, worst.1),
    )
}

// ---------------------------------------------------------------- 3

struct RandomScores {
    items: usize,
    max_len: usize,
}

impl Recommender for RandomScores {
    fn num_items(&self) -> usize {
        self.items
    }
    fn max_len(&self) -> usize {
        self.max_len
    }
    fn scores(&self, batch: &SequenceBatch) -> Result<Matrix> {
        let mut out = Matrix::zeros(batch.size(), self.items);
        for r in 0..batch.size() {
            let mut rng = stream(batch.users[r] as u64, "random-model");
            for v in out.row_mut(r) {
                *v = rng.random();
            }
        }
        Ok(out)
    }
}

struct Oracle {
    items: usize,
    max_len: usize,
}

impl Recommender for Oracle {
    fn num_items(&self) -> usize {
        self.items
    }
    fn max_len(&self) -> usize {
        self.max_len
    }
    fn scores(&self, batch: &SequenceBatch) -> Result<Matrix> {
        let mut out = Matrix::zeros(batch.size(), self.items);
        for (r, &t) in batch.targets.iter().enumerate() {
            out.set(r, t as usize - 1, 1.0);
        }
        Ok(out)
    }
}

fn metric_oracles() -> (bool, String) {
    let closed = eval::ndcg_at_k(3, 10) == 0.5
        && eval::hr_at_k(3, 5) == 1.0
        && eval::hr_at_k(11, 10) == 0.0
        && eval::ndcg_at_k(1, 5) == 1.0
        && eval::ndcg_at_k(6, 5) == 0.0;
    let data = DataConfig {
        synthetic: Some(MarkovCorpus {
            num_items: 500,
            ..MarkovCorpus::default()
        }),
        ..DataConfig::default()
    };
    let ds = Dataset::load(&data).unwrap();
    let opts = EvalOptions::default();
    let cases = &ds.split.test;
    let random = eval::evaluate(&RandomScores { items: ds.num_items(), max_len: 20 }, cases, &opts).unwrap();
    let n = cases.len() as f64;
    let p = 10.0 / ds.num_items() as f64;
    let sigma = (p * (1.0 - p) / n).sqrt();
    let random_ok = (random.hr10 - p).abs() <= 3.0 * sigma;
    let oracle = eval::evaluate(&Oracle { items: ds.num_items(), max_len: 20 }, cases, &opts).unwrap();
    let oracle_ok = [oracle.hr5, oracle.hr10, oracle.ndcg5, oracle.ndcg10].iter().all(|&v| v == 1.0);
    (
        closed && random_ok && oracle_ok,
        format!(
            "closed form {closed}; random HR@10 {:.4} vs {p:.4} +- {:.4} over {} items; oracle {oracle_ok}",
            random.hr10,
            3.0 * sigma,
            ds.num_items()
        ),
    )
}

// ---------------------------------------------------------------- 4, 5, 6, 8

/// Desk-scale configuration used for every synthetic training run.
fn desk_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = 7;
    cfg.data.synthetic = Some(MarkovCorpus::default());
    cfg.data.all_prefixes = true;
    cfg.model.dim = 32;
    cfg.model.layers = 2;
    cfg.model.heads = 2;
    cfg.model.max_len = 10;
    cfg.train.batch_size = 128;
    cfg.train.max_epochs = 30;
    cfg.train.lr = 0.005;
    cfg.train.alpha = 10.0;
    cfg.train.beta = 2.0;
    cfg.train.cfm_reduction = CfmReduction::Mean;
    cfg
}

struct Trained {
    model: FlowRec,
    test: Metrics,
    report: EvalReport,
}

fn train_and_test(cfg: &RunConfig, ds: &Dataset) -> Trained {
    let mut state = TrainState::new(cfg, ds.num_items()).unwrap();
    train(&mut state, ds, cfg, None, |_, _| Ok(())).unwrap();
    let model = state.best_model();
    let opts = EvalOptions {
        workers: 4,
        ..EvalOptions::default()
    };
    let rec = FlowSampler::new(&model, cfg.sampler.steps);
    let ranks = eval::ranks(&rec, &ds.split.test, &opts).unwrap();
    let test = Metrics::from_ranks(&ranks);
    let mut report = EvalReport::new("flowrec", "test", cfg.sampler.steps, test, cfg);
    report.groups = Some(GroupMetrics::from_ranks(&ds.split.test, &ranks, &ds.groups).unwrap());
    Trained { model, test, report }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-12)
}

// ---------------------------------------------------------------- 7

fn ml1m_path() -> PathBuf {
    std::env::var_os("FLOWREC_ML1M")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/ml-1m/ratings.dat"))
}

fn pipeline_fidelity() -> (bool, String) {
    let path = ml1m_path();
    if !path.is_file() {
        return (false, format!("ML-1M ratings not found at {} (set FLOWREC_ML1M)", path.display()));
    }
    let data = DataConfig {
        path: Some(path),
        format: InputFormat::MovielensDat,
        ..DataConfig::default()
    };
    let ds = match Dataset::load(&data) {
        Ok(ds) => ds,
        Err(e) => return (false, format!("load failed: {e}")),
    };
    let s = ds.stats();
    let ok = s.sequences == 6040
        && s.items == 3416
        && s.actions == 999_611
        && format!("{:.2}", s.avg_len) == "165.50"
        && format!("{:.2}", s.sparsity * 100.0) == "95.16";
    (ok, s.to_string())
}

// ---------------------------------------------------------------- 9

fn inference_trend(model: &FlowRec, cases: &[Example]) -> (bool, String) {
    const JITTER: f64 = 0.05;
    let opts = EvalOptions::default();
    let times: Vec<f64> = STEPS_GRID
        .iter()
        .map(|&t| eval::time_inference(&FlowSampler::new(model, t), cases, &opts, 3).unwrap())
        .collect();
    let monotone = times.windows(2).all(|w| w[1] >= w[0] * (1.0 - JITTER));
    let t10 = times[STEPS_GRID.iter().position(|&t| t == 10).unwrap()];
    let t35 = times[STEPS_GRID.iter().position(|&t| t == 35).unwrap()];
    let ratio = t10 / t35;
    let listed: Vec<String> = STEPS_GRID.iter().zip(&times).map(|(s, t)| format!("T={s}:{t:.3}s")).collect();
    (
        monotone && ratio < 0.25 + JITTER,
        format!("monotone {monotone}; t(10)/t(35) = {ratio:.3} (need < 0.25); {}", listed.join(" ")),
    )
}

#[test]
fn acceptance() {
    let mut out = Vec::new();
    out.push(check("1", 5.0, analytic_identities));
    out.push(check("2", 60.0, gradient_check));
    out.push(check("3", 30.0, metric_oracles));

    let cfg = desk_config();
    let ds = Dataset::load(&cfg.data).unwrap();
    let pop = eval::evaluate(&Popularity::new(&ds.train_popularity, cfg.model.max_len), &ds.split.test, &EvalOptions::default()).unwrap();

    let mut full: Option<Trained> = None;
    out.push(check("4", 900.0, || {
        let f = train_and_test(&cfg, &ds);
        let mut prior_cfg = cfg.clone();
        prior_cfg.train.alpha = 0.0;
        prior_cfg.train.beta = 0.0;
        let prior = train_and_test(&prior_cfg, &ds).test.ndcg10;
        let n = f.test.ndcg10;
        let ok = n >= 2.0 * pop.ndcg10 && n >= 1.2 * prior;
        let detail = format!(
            "NDCG@10 full {n:.4}, popularity {:.4} (x{:.2}, need 2), prior-only {prior:.4} (x{:.2}, need 1.2)",
            pop.ndcg10,
            n / pop.ndcg10,
            n / prior
        );
        full = Some(f);
        (ok, detail)
    }));
    let full = full.expect("criterion 4 ran");

    out.push(check("5", 300.0, || {
        let sweep = eval::steps_sweep(&STEPS_GRID, &ds.split.test, &EvalOptions::default(), |t| FlowSampler::new(&full.model, t)).unwrap();
        let at = |s: usize| sweep.iter().find(|e| e.steps == s).unwrap().metrics.ndcg10;
        let best = sweep.iter().map(|e| e.metrics.ndcg10).fold(f64::NEG_INFINITY, f64::max);
        let (t1, t10) = (at(1), at(10));
        let ok = rel(t1, t10) <= 0.10 && rel(t10, best) <= 0.05;
        let listed: Vec<String> = sweep.iter().map(|e| format!("{}:{:.4}", e.steps, e.metrics.ndcg10)).collect();
        (
            ok,
            format!(
                "T=1 vs T=10 {:.1}% (need <= 10%), T=10 vs best {:.1}% (need <= 5%); {}",
                100.0 * rel(t1, t10),
                100.0 * rel(t10, best),
                listed.join(" ")
            ),
        )
    }));

    out.push(check("6", 2700.0, || {
        let mut scores = Vec::new();
        for (name, edit) in [
            ("w/o prior", (|c: &mut RunConfig| c.train.use_prior_loss = false) as fn(&mut RunConfig)),
            ("w/o cfm", |c| c.train.use_cfm_loss = false),
            ("w/o align", |c| c.train.use_align_loss = false),
        ] {
            let mut c = cfg.clone();
            edit(&mut c);
            scores.push((name, train_and_test(&c, &ds).test.ndcg10));
        }
        let n = full.test.ndcg10;
        let beats_all = scores.iter().all(|&(_, s)| n >= s);
        let prior_worst = scores.iter().all(|&(_, s)| scores[0].1 <= s);
        let listed: Vec<String> = scores.iter().map(|(k, s)| format!("{k} {s:.4}")).collect();
        (
            beats_all && prior_worst,
            format!("full {n:.4}; {}; full best {beats_all}, w/o prior worst {prior_worst}", listed.join(", ")),
        )
    }));

    out.push(check("7", 120.0, pipeline_fidelity));

    out.push(check("8", 900.0, || {
        let again = train_and_test(&cfg, &ds);
        let same_report = again.report.to_pretty_json() == full.report.to_pretty_json();
        let same_params = again.model.params().iter().zip(full.model.params().iter()).all(|(a, b)| a.2 == b.2);
        let serial = EvalOptions {
            workers: 1,
            ..EvalOptions::default()
        };
        let sharded = EvalOptions {
            workers: 4,
            ..EvalOptions::default()
        };
        let rec = FlowSampler::new(&full.model, cfg.sampler.steps);
        let r1 = eval::ranks(&rec, &ds.split.test, &serial).unwrap();
        let r4 = eval::ranks(&rec, &ds.split.test, &sharded).unwrap();
        let m1 = Metrics::from_ranks(&r1);
        let m4 = Metrics::from_ranks(&r4);
        let same_shards = r1 == r4 && m1.ndcg10.to_bits() == m4.ndcg10.to_bits() && m1.hr10.to_bits() == m4.hr10.to_bits();
        (
            same_report && same_params && same_shards,
            format!("identical reports {same_report}, identical weights {same_params}, 1 vs 4 workers identical {same_shards}"),
        )
    }));

    out.push(check("9", 600.0, || inference_trend(&full.model, &ds.split.test)));

    let failed: Vec<&str> = out.iter().filter(|o| !o.pass).map(|o| o.id).collect();
    println!("acceptance: {} of {} criteria pass", out.len() - failed.len(), out.len());
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}
