//! End-to-end acceptance checks. Prints one `PASS`/`FAIL` line per
//! criterion and fails if any hard criterion fails.
//!
//! Run with `cargo test -p augwm-cli --test acceptance -- --nocapture`.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use augwm_core::adapter::{adapt_rollout, AdaptConfig, AdaptMode, ScaledModelEnv};
use augwm_core::augment::{apply, AugKind};
use augwm_core::env::{generate_offline_dataset, DynamicsParams, Env, EnvKind, PolicyMix};
use augwm_core::eval::{aggregate, grid_eval, switch_eval, GridSpec, SwitchSpec};
use augwm_core::nn::{gaussian_nll, gradcheck, Activation, Mlp};
use augwm_core::sac::Actor;
use augwm_core::stats::{mean, welch_ttest};
use augwm_core::trainer::{fit_model, train_with, TrainConfig};
use augwm_core::world_model::{train_ensemble, EnsembleConfig, EnsembleModel};
use augwm_core::{ContextVector, Dataset, Rng, Transition};
use ndarray::Array2;
use sha2::{Digest, Sha256};

const MSD: EnvKind = EnvKind::MassSpringDamper;
const MIX: PolicyMix = PolicyMix {
    random_frac: 0.5,
    mediocre_frac: 0.5,
};

struct Outcome {
    id: &'static str,
    pass: bool,
    /// Failing soft criteria are reported but do not fail the test.
    soft: bool,
    detail: String,
}

impl Outcome {
    fn hard(id: &'static str, pass: bool, detail: String) -> Self {
        Self {
            id,
            pass,
            soft: false,
            detail,
        }
    }

    fn line(&self) -> String {
        let status = match (self.pass, self.soft) {
            (true, _) => "PASS",
            (false, false) => "FAIL",
            (false, true) => "FAIL (flagged)",
        };
        format!("{status} criterion {}: {}", self.id, self.detail)
    }
}

fn dyadic(rng: &mut Rng, lo: i64, hi: i64, denom: f64) -> f64 {
    (lo + rng.index((hi - lo + 1) as usize) as i64) as f64 / denom
}

/// States are multiples of 1/16 in [-16, 16] and scales multiples of 1/8 in
/// [0.5, 1.5], so every operator result is exactly representable.
fn operator_laws() -> Outcome {
    const DIM: usize = 3;
    let mut rng = Rng::new(1, 0);
    let state = |rng: &mut Rng| (0..DIM).map(|_| dyadic(rng, -256, 256, 16.0)).collect::<Vec<_>>();
    let scale = |rng: &mut Rng| ContextVector::new((0..DIM).map(|_| dyadic(rng, 4, 12, 8.0)).collect()).unwrap();
    let kinds = [AugKind::None, AugKind::Rad, AugKind::Rans, AugKind::Das];
    let n = 1000;
    let mut violations = Vec::new();
    for i in 0..n {
        let t = Transition {
            state: state(&mut rng),
            action: vec![rng.uniform_in(-1.0, 1.0)],
            reward: rng.uniform_in(-10.0, 10.0),
            next_state: state(&mut rng),
            done: rng.bernoulli(0.5),
        };
        let (z1, z2) = (scale(&mut rng), scale(&mut rng));
        let z12 = ContextVector::new(z1.as_slice().iter().zip(z2.as_slice()).map(|(a, b)| a * b).collect()).unwrap();
        for kind in kinds {
            if apply(kind, &ContextVector::ones(DIM), &t).unwrap() != t {
                violations.push(format!("#{i} {kind:?} identity"));
            }
            let out = apply(kind, &z1, &t).unwrap();
            if out.action != t.action || out.reward != t.reward || out.done != t.done {
                violations.push(format!("#{i} {kind:?} touched action/reward/done"));
            }
            if kind != AugKind::None {
                let twice = apply(kind, &z2, &out).unwrap();
                if twice != apply(kind, &z12, &t).unwrap() {
                    violations.push(format!("#{i} {kind:?} composition"));
                }
            }
        }
        let das = apply(AugKind::Das, &z1, &t).unwrap();
        let scaled: Vec<f64> = t.delta().iter().zip(z1.as_slice()).map(|(d, z)| z * d).collect();
        if das.state != t.state || das.delta() != scaled {
            violations.push(format!("#{i} DAS delta scaling"));
        }
        let origin = Transition {
            state: vec![0.0; DIM],
            ..t.clone()
        };
        if apply(AugKind::Rans, &z1, &origin).unwrap() != apply(AugKind::Das, &z1, &origin).unwrap() {
            violations.push(format!("#{i} RANS vs DAS at origin"));
        }
    }
    Outcome::hard(
        "1",
        violations.is_empty(),
        format!("{n} random transitions, exact equality; violations {:?}", violations.iter().take(3).collect::<Vec<_>>()),
    )
}

fn gradients() -> Outcome {
    let mut rng = Rng::new(2024, 0);
    let mut worst: f64 = 0.0;
    let nets = 100;
    for _ in 0..nets {
        let layers = 1 + rng.index(3);
        let sizes: Vec<usize> = (0..=layers).map(|_| 1 + rng.index(32)).collect();
        let act = if rng.bernoulli(0.5) { Activation::Tanh } else { Activation::Relu };
        let mut net = Mlp::new(&sizes, act, &mut rng).unwrap();
        for p in net.params_mut() {
            *p += 0.1 * rng.normal();
        }
        let x = Array2::from_shape_fn((3, net.input_dim()), |_| rng.normal());
        let d = Array2::from_shape_fn((3, net.output_dim()), |_| rng.normal());
        worst = worst.max(gradcheck(&net, &x, &d, 1e-5, 1e-6).unwrap());
    }
    let nll = gaussian_nll(&[0.0], &[0.0], &[0.0]).unwrap().loss;
    Outcome::hard(
        "2",
        worst < 1e-4 && (nll - 0.918939).abs() < 1e-6,
        format!("{nets} networks, worst relative error {worst:.2e}; standard normal NLL {nll:.6}"),
    )
}

fn linear_context_recovery() -> Outcome {
    let a = vec![vec![0.0, 0.05], vec![-0.025, -0.005]];
    let b = vec![vec![0.0], vec![0.05]];
    let model = EnsembleModel::affine(&a, &b, &[0.0, 0.0]).unwrap();
    let actor = Actor::constant(2, 2, &[0.5]).unwrap();
    let cfg = AdaptConfig::default();
    let mut dists = Vec::new();
    for seed in 0..5u64 {
        let mut rng = Rng::new(seed, 4);
        let c: Vec<f64> = (0..2).map(|_| rng.uniform_in(0.93, 1.07)).collect();
        let env = ScaledModelEnv {
            model: model.clone(),
            scale: c.clone(),
            reset_lo: vec![-0.1, -0.1],
            reset_hi: vec![0.1, 0.1],
        };
        let r = adapt_rollout(&actor, &model, &env, 200, &cfg, AdaptMode::Learned, &mut rng).unwrap();
        dists.push(ContextVector::new(r.log[cfg.k + 50].context.clone()).unwrap().linf_distance(&c));
    }
    Outcome::hard(
        "4",
        dists.iter().all(|d| *d <= 0.05),
        format!("distance to true scale at step k+50 per seed {dists:.5?}"),
    )
}

/// Mean uncertainty at dataset pairs versus the same actions at states 5x
/// further from the centre of the dataset's state box.
fn box_uncertainty(d: &Dataset, model: &EnsembleModel, rng: &mut Rng) -> (f64, f64) {
    let dim = d.s_dim();
    let mut lo = vec![f64::INFINITY; dim];
    let mut hi = vec![f64::NEG_INFINITY; dim];
    for t in d.transitions() {
        for i in 0..dim {
            lo[i] = lo[i].min(t.state[i]);
            hi[i] = hi[i].max(t.state[i]);
        }
    }
    let n = 1000;
    let (mut ind, mut ood) = (0.0, 0.0);
    for _ in 0..n {
        let t = d.get(rng.index(d.len()));
        let far: Vec<f64> = (0..dim)
            .map(|i| {
                let c = 0.5 * (lo[i] + hi[i]);
                let dir = if t.state[i] >= c { 1.0 } else { -1.0 };
                c + dir * 2.5 * (hi[i] - lo[i])
            })
            .collect();
        ind += model.uncertainty(&t.state, &t.action).unwrap();
        ood += model.uncertainty(&far, &t.action).unwrap();
    }
    (ind / n as f64, ood / n as f64)
}

fn ood_ordering() -> Outcome {
    let mut pairs = Vec::new();
    for seed in 0..5u64 {
        let d = generate_offline_dataset(&Env::nominal(MSD), MIX, 5000, &mut Rng::new(seed, 0)).unwrap();
        let cfg = EnsembleConfig {
            epochs: 50,
            ..Default::default()
        };
        let (model, _) = train_ensemble(&d, &cfg, &Rng::new(seed, 1)).unwrap();
        pairs.push(box_uncertainty(&d, &model, &mut Rng::new(seed, 2)));
    }
    Outcome::hard(
        "5",
        pairs.iter().all(|(ind, ood)| ood > ind),
        format!("(in-distribution, 5x outside) mean uncertainty per seed {pairs:.5?}"),
    )
}

/// `(a, b, t, df, p)` from `scipy.stats.ttest_ind(a, b, equal_var=False)`.
const WELCH_FIXTURES: &[(&[f64], &[f64], f64, f64, f64)] = &[
    (&[1.0, 2.0, 3.0, 4.0, 5.0], &[2.0, 3.0, 4.0, 5.0, 6.0], -1.0, 8.0, 0.346593507087334),
    (&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[10.0, 11.5, 9.0], -6.32455532033676, 5.95459620394492, 0.000752247359454011),
    (
        &[2.3, 4.1, 3.3, 5.9, 4.4, 3.8, 4.0],
        &[6.1, 7.2, 5.5, 8.0],
        -3.92626955867392,
        6.25855946122864,
        0.00712311595374314,
    ),
    (&[0.1, 0.2], &[0.4, 0.9, 1.3, 0.2, 0.8], -2.85356919363403, 4.47269202674608, 0.040571644267864),
    (
        &[100.0, 104.0, 98.0, 101.0, 97.0],
        &[95.0, 96.0, 99.0, 94.0, 93.0, 97.0],
        2.87121967794601,
        7.5908783020998,
        0.0219646124447251,
    ),
];

fn welch_fixtures() -> Outcome {
    let (mut dt, mut dp) = (0.0f64, 0.0f64);
    for (a, b, t, df, p) in WELCH_FIXTURES {
        let r = welch_ttest(a, b).unwrap();
        dt = dt.max((r.t - t).abs()).max((r.df - df).abs());
        dp = dp.max((r.p - p).abs());
    }
    Outcome::hard(
        "6",
        dt < 1e-6 && dp < 1e-4,
        format!("{} fixtures, max |t or df error| {dt:.1e}, max |p error| {dp:.1e}", WELCH_FIXTURES.len()),
    )
}

/// Baseline and context-conditioned DAS policies trained on one seed's
/// 20k-transition dataset and sharing one fitted ensemble.
struct Trained {
    seed: u64,
    model: EnsembleModel,
    baseline: Actor,
    das: Actor,
}

fn train_seed(seed: u64) -> Trained {
    let d = generate_offline_dataset(&Env::nominal(MSD), MIX, 20_000, &mut Rng::new(seed, 0)).unwrap();
    let das_cfg = TrainConfig::default();
    let base_cfg = TrainConfig {
        aug: AugKind::None,
        use_context: false,
        ..Default::default()
    };
    let rng = Rng::new(seed, 1);
    let (model, _) = fit_model(&d, &das_cfg, &rng).unwrap();
    let baseline = train_with(&d, &base_cfg, &rng, Some(model.clone()), |_, _, _| Ok(())).unwrap();
    let das = train_with(&d, &das_cfg, &rng, Some(model.clone()), |_, _, _| Ok(())).unwrap();
    Trained {
        seed,
        model,
        baseline: baseline.actor,
        das: das.actor,
    }
}

fn end_to_end(runs: &[Trained]) -> (Outcome, Outcome) {
    let cfg = AdaptConfig::default();
    let (mut oracle, mut default, mut learned, mut baseline) = (vec![], vec![], vec![], vec![]);
    for r in runs {
        let heavy = GridSpec {
            masses: vec![1.5],
            dampings: vec![1.0],
            seeds: vec![r.seed],
            ..Default::default()
        };
        let grid = GridSpec {
            seeds: vec![r.seed],
            ..Default::default()
        };
        let cell = |actor: &Actor, spec: &GridSpec, mode| aggregate(&grid_eval(actor, &r.model, MSD, spec, mode, &cfg).unwrap()).mean;
        oracle.push(cell(&r.das, &heavy, AdaptMode::Oracle));
        default.push(cell(&r.das, &heavy, AdaptMode::Default));
        learned.push(cell(&r.das, &grid, AdaptMode::Learned));
        baseline.push(cell(&r.baseline, &grid, AdaptMode::Default));
    }
    let p = |a: &[f64], b: &[f64]| welch_ttest(a, b).map_or(f64::NAN, |w| w.p);
    let a = Outcome {
        id: "7a",
        pass: mean(&oracle) >= mean(&default),
        soft: true,
        detail: format!(
            "mass 1.5: oracle context {:.2} vs default context {:.2} (per seed {oracle:.2?} vs {default:.2?}, Welch p {:.2e})",
            mean(&oracle),
            mean(&default),
            p(&oracle, &default)
        ),
    };
    let b = Outcome::hard(
        "7b",
        mean(&learned) >= mean(&baseline),
        format!(
            "5x5 grid: learned context {:.2} vs baseline {:.2} (per seed {learned:.2?} vs {baseline:.2?}, Welch p {:.2e})",
            mean(&learned),
            mean(&baseline),
            p(&learned, &baseline)
        ),
    );
    (a, b)
}

fn linear_fit_speed(run: &Trained) -> Outcome {
    let cfg = AdaptConfig::default();
    let env = Env::nominal(MSD);
    let mut first = Vec::new();
    for seed in 0..20u64 {
        let r = adapt_rollout(&run.das, &run.model, &env, 200, &cfg, AdaptMode::Learned, &mut Rng::new(seed, 7)).unwrap();
        first.push(r.log.iter().position(|l| l.r2.is_some_and(|x| x > 0.9)));
    }
    let worst = first.iter().map(|f| f.unwrap_or(usize::MAX)).max().unwrap();
    Outcome::hard(
        "3",
        worst < 100,
        format!("20 rollouts, latest step at which R^2 first exceeds 0.9: {worst}"),
    )
}

fn switch_tracking(run: &Trained) -> Outcome {
    let cfg = AdaptConfig::default();
    let spec = SwitchSpec {
        t_switch: 100,
        before: DynamicsParams::nominal(MSD),
        after: DynamicsParams::with_mass_damping(MSD, 0.75, 0.5),
    };
    let mut pairs = Vec::new();
    for seed in 0..5u64 {
        let tr = switch_eval(&run.das, &run.model, MSD, &spec, 200, AdaptMode::Learned, &cfg, &mut Rng::new(seed, 9)).unwrap();
        let dist = |t: usize| ContextVector::new(tr.contexts[t].clone()).unwrap().linf_distance(&tr.oracle_ratios[t]);
        pairs.push((dist(105), dist(199)));
    }
    Outcome::hard(
        "8",
        pairs.iter().all(|(early, late)| late < early),
        format!("distance to new oracle ratio (t=105, t=199) per seed {pairs:.4?}"),
    )
}

fn run_cli(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_augwm")).args(args).output().unwrap();
    assert!(out.status.success(), "augwm {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn hash_tree(root: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, hex::encode(Sha256::digest(std::fs::read(&path).unwrap())));
            }
        }
    }
    out
}

/// Full pipeline on a small configuration into `dir`.
fn pipeline(dir: &Path, jobs: Option<&str>) {
    let p = |name: &str| dir.join(name).to_string_lossy().into_owned();
    let mut pre: Vec<&str> = Vec::new();
    if let Some(j) = jobs {
        pre.extend(["--jobs", j]);
    }
    let (data, run, eval) = (p("data.jsonl"), p("run"), p("eval"));
    let cmd = |tail: &[&str]| run_cli(&[&pre[..], tail].concat());
    cmd(&["gen-data", "--out", &data, "--n", "2000", "--seed", "3"]);
    cmd(&[
        "train", "--data", &data, "--out", &run, "--seed", "3", "--epochs", "4", "--set", "model.epochs=3", "--set", "model.n=3",
        "--set", "train.grad_steps=2", "--set", "train.rollout_batch=64",
    ]);
    cmd(&[
        "eval", "--ckpt", &run, "--out", &eval, "--seeds", "0,1", "--grid", "0.75,1.25", "--set", "eval.rollouts=2", "--switch",
        "t=100,after_mass=0.75,after_damping=0.5", "--plot",
    ]);
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let runs = [("a", None), ("b", None), ("c", Some("2"))];
    let mut hashes = Vec::new();
    for (name, jobs) in runs {
        let dir = tmp.path().join(name);
        std::fs::create_dir(&dir).unwrap();
        pipeline(&dir, jobs);
        hashes.push(hash_tree(&dir));
    }
    let csvs = hashes[0].keys().filter(|k| k.ends_with(".csv")).count();
    let same = hashes.windows(2).all(|w| w[0] == w[1]);
    let differing: Vec<&String> = hashes[0].keys().filter(|k| hashes.iter().any(|h| h.get(*k) != hashes[0].get(*k))).collect();
    Outcome::hard(
        "9",
        same && csvs > 0,
        format!(
            "3 runs (third with --jobs 2), {} output files including {csvs} CSVs; differing {differing:?}",
            hashes[0].len()
        ),
    )
}

#[test]
fn acceptance_criteria() {
    let mut outcomes = Vec::new();
    let mut timed = |f: &mut dyn FnMut() -> Vec<Outcome>| {
        let start = Instant::now();
        let got = f();
        for o in &got {
            println!("{} [{:.1?}]", o.line(), start.elapsed());
        }
        outcomes.extend(got);
    };
    timed(&mut || vec![operator_laws()]);
    timed(&mut || vec![gradients()]);
    timed(&mut || vec![linear_context_recovery()]);
    timed(&mut || vec![ood_ordering()]);
    timed(&mut || vec![welch_fixtures()]);
    let mut runs = Vec::new();
    timed(&mut || {
        runs = (0..3).map(train_seed).collect();
        let (a, b) = end_to_end(&runs);
        vec![a, b]
    });
    timed(&mut || vec![linear_fit_speed(&runs[0])]);
    timed(&mut || vec![switch_tracking(&runs[0])]);
    timed(&mut || vec![determinism()]);

    outcomes.sort_by(|a, b| a.id.cmp(b.id));
    println!("\nsummary");
    for o in &outcomes {
        println!("{}", o.line());
    }
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.pass && !o.soft).map(|o| o.id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
