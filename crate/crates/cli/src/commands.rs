use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use augwm_core::adapter::AdaptMode;
use augwm_core::env::{generate_offline_dataset, DynamicsParams, Env, EnvKind, PolicyMix, DEFAULT_HORIZON};
use augwm_core::eval::{aggregate, grid_eval, summary_row, switch_eval, welch_ttest, EvalGridResult, SUMMARY_HEADER};
use augwm_core::sac::{Actor, PolicyCheckpoint};
use augwm_core::trainer::{fit_model, train_with, METRICS_HEADER};
use augwm_core::world_model::EnsembleModel;
use augwm_core::{Dataset, Error as CoreError, Rng};
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Settings};
use crate::{plot, Invalid};

pub const MODEL_FILE: &str = "model.json";
pub const POLICY_FILE: &str = "policy.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "resolved_config.txt";
pub const REPORT_FILE: &str = "model_report.json";
pub const CKPT_DIR: &str = "checkpoints";

const DATA_STREAM: u64 = 0;
const TRAIN_STREAM: u64 = 1;
const SWITCH_STREAM: u64 = 9;

#[derive(Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub env: EnvKind,
    pub params: DynamicsParams,
    pub policy_mix: PolicyMix,
    pub seed: u64,
    pub n_transitions: usize,
    pub horizon: usize,
}

pub fn meta_path(data: &Path) -> PathBuf {
    let mut p = data.as_os_str().to_owned();
    p.push(".meta.json");
    PathBuf::from(p)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn require(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        return Err(Invalid::new(format!("{what} {} does not exist", path.display())));
    }
    Ok(())
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let s = cfg.resolve()?;
    let env = Env::nominal(s.env);
    let d = generate_offline_dataset(&env, s.mix, s.n_transitions, &mut Rng::new(s.seed, DATA_STREAM))?;
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    d.save(out)?;
    let meta = DatasetMeta {
        env: s.env,
        params: env.params().clone(),
        policy_mix: s.mix,
        seed: s.seed,
        n_transitions: d.len(),
        horizon: env.horizon(),
    };
    write_file(&meta_path(out), serde_json::to_string_pretty(&meta)? + "\n")?;
    eprintln!("wrote {} transitions to {}", d.len(), out.display());
    Ok(())
}

fn load_dataset(data: &Path, s: &Settings) -> Result<Dataset> {
    require(data, "dataset")?;
    let meta = meta_path(data);
    if meta.exists() {
        let m: DatasetMeta = read_json(&meta)?;
        if m.env != s.env {
            return Err(Invalid::new(format!("dataset was collected on {} but env.kind is {}", m.env, s.env)));
        }
    }
    let d = Dataset::load(data).with_context(|| format!("loading {}", data.display()))?;
    if d.s_dim() != s.env.s_dim() || d.a_dim() != s.env.a_dim() {
        return Err(Invalid::new(format!("dataset dimensions do not match env.kind {}", s.env)));
    }
    Ok(d)
}

fn epoch_ckpt(out: &Path, epoch: usize) -> PathBuf {
    out.join(CKPT_DIR).join(format!("epoch_{epoch:04}.json"))
}

pub fn train(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let s = cfg.resolve()?;
    let d = load_dataset(data, &s)?;
    create_dir(out)?;
    write_file(&out.join(CONFIG_FILE), cfg.snapshot())?;

    let rng = Rng::new(s.seed, TRAIN_STREAM);
    let (model, report) = fit_model(&d, &s.train, &rng)?;
    write_file(&out.join(MODEL_FILE), serde_json::to_string(&model)?)?;
    write_file(&out.join(REPORT_FILE), serde_json::to_string_pretty(&report)? + "\n")?;
    eprintln!(
        "model fitted: holdout delta RMSE {}",
        report.val_delta_rmse.map_or("n/a".into(), |r| format!("{r:.3e}"))
    );

    let metrics_path = out.join(METRICS_FILE);
    let mut metrics = fs::File::create(&metrics_path).with_context(|| format!("creating {}", metrics_path.display()))?;
    writeln!(metrics, "{METRICS_HEADER}")?;
    if s.ckpt_every > 0 {
        create_dir(&out.join(CKPT_DIR))?;
    }
    let mut last_good: Option<PathBuf> = None;
    let epochs = s.train.resolved_epochs();
    let result = train_with(&d, &s.train, &rng, Some(model), |m, actor, critics| {
        writeln!(metrics, "{}", m.csv_row()).map_err(|source| CoreError::Io {
            path: metrics_path.clone(),
            source,
        })?;
        let done = m.epoch + 1;
        if s.ckpt_every > 0 && (done % s.ckpt_every == 0 || done == epochs) {
            let path = epoch_ckpt(out, done);
            let json = serde_json::to_string(&PolicyCheckpoint::capture(actor, critics))?;
            fs::write(&path, json).map_err(|source| CoreError::Io {
                path: path.clone(),
                source,
            })?;
            last_good = Some(path);
        }
        Ok(())
    });
    metrics.flush()?;
    let output = match result {
        Ok(o) => o,
        Err(e @ CoreError::Diverged { .. }) => {
            let keep = last_good.map_or("none (no checkpoint was written)".into(), |p| p.display().to_string());
            bail!("{e}; last good checkpoint: {keep}");
        }
        Err(e) => return Err(e.into()),
    };
    let ckpt = PolicyCheckpoint::capture(&output.actor, &output.critics);
    write_file(&out.join(POLICY_FILE), serde_json::to_string(&ckpt)?)?;
    if let Some(last) = output.metrics.last() {
        eprintln!("trained {} epochs; final mean model return {:.4}", epochs, last.mean_model_return);
    } else {
        eprintln!("trained 0 epochs; policy is at its initialization");
    }
    Ok(())
}

/// Saved configuration of a training run directory.
pub fn checkpoint_config(ckpt: &Path) -> Result<Option<String>> {
    let p = ckpt.join(CONFIG_FILE);
    if !p.exists() {
        return Ok(None);
    }
    Ok(Some(fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?))
}

fn load_checkpoint(dir: &Path, lr: f64) -> Result<(Actor, EnsembleModel)> {
    require(dir, "checkpoint directory")?;
    let (policy, model) = (dir.join(POLICY_FILE), dir.join(MODEL_FILE));
    require(&policy, "policy checkpoint")?;
    require(&model, "model checkpoint")?;
    let ckpt: PolicyCheckpoint = read_json(&policy)?;
    let (actor, _) = ckpt.restore(lr)?;
    Ok((actor, read_json(&model)?))
}

fn grid_file(mode: &str) -> String {
    format!("grid_{mode}.csv")
}

pub struct EvalRequest<'a> {
    pub ckpt: &'a Path,
    pub out: &'a Path,
    /// Evaluated in default mode and used as the reference row.
    pub compare: Option<&'a Path>,
}

pub fn eval(cfg: &RunConfig, req: &EvalRequest<'_>) -> Result<()> {
    let s = cfg.resolve()?;
    let (actor, model) = load_checkpoint(req.ckpt, s.train.sac.lr)?;
    for &mode in &s.modes {
        if mode != AdaptMode::Default && actor.ctx_dim() == 0 {
            return Err(Invalid::new(format!("mode {mode} needs a policy trained with train.use_context = true")));
        }
    }
    let compare = req.compare.map(|dir| load_checkpoint(dir, s.train.sac.lr)).transpose()?;
    create_dir(req.out)?;

    let mut rows: Vec<(String, EvalGridResult)> = Vec::new();
    if let Some((a, m)) = &compare {
        let r = grid_eval(a, m, s.env, &s.grid, AdaptMode::Default, &s.adapt)?;
        rows.push(("compare_default".into(), r));
    }
    for &mode in &s.modes {
        let r = grid_eval(&actor, &model, s.env, &s.grid, mode, &s.adapt)?;
        rows.push((mode.to_string(), r));
    }

    let mut summary = format!("{SUMMARY_HEADER}\n");
    let reference = rows[0].1.seed_means();
    for (i, (name, r)) in rows.iter().enumerate() {
        write_file(&req.out.join(grid_file(name)), r.to_csv())?;
        let p = if i == 0 {
            None
        } else {
            welch_ttest(&r.seed_means(), &reference).ok().map(|w| w.p)
        };
        let agg = aggregate(r);
        summary.push_str(&summary_row(name, &agg, p));
        summary.push('\n');
        eprintln!("{name}: mean return {:.3} (std over seeds {:.3})", agg.mean, agg.std);
        if s.plot {
            plot::grid_heatmap(&req.out.join(format!("grid_{name}.svg")), name, r)?;
            plot::marginals(&req.out.join(format!("marginals_{name}.svg")), name, r, &agg)?;
        }
    }
    write_file(&req.out.join("summary.csv"), summary)?;

    if let Some(spec) = &s.switch {
        let seed = s.grid.seeds[0];
        let mut traces = Vec::new();
        let mut runs: Vec<(String, &Actor, &EnsembleModel, AdaptMode)> =
            s.modes.iter().map(|&m| (m.to_string(), &actor, &model, m)).collect();
        if let Some((a, m)) = &compare {
            runs.insert(0, ("compare_default".into(), a, m, AdaptMode::Default));
        }
        for (name, a, m, mode) in runs {
            let mut rng = Rng::new(seed, SWITCH_STREAM);
            let t = switch_eval(a, m, s.env, spec, DEFAULT_HORIZON, mode, &s.adapt, &mut rng)?;
            write_file(&req.out.join(format!("switch_{name}.csv")), t.to_csv())?;
            traces.push((name, t));
        }
        if s.plot {
            plot::switch_traces(&req.out.join("switch.svg"), spec.t_switch, &traces)?;
        }
    }
    Ok(())
}
