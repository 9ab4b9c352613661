//! The subcommands. Each writes only under its configured output directory.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ctxdiff::data::{make_context_batch, write_ppm};
use ctxdiff::eval::{eval_batch, evaluate, sample_all, EvalReport, EvalSpec, Metric, RESULTS_CSV_HEADER};
use ctxdiff::rng::{streams, Rng};
use ctxdiff::sandbox::{run_sandbox, GaussianSpec, SandboxReport};
use ctxdiff::schedule::{select_steps, Strategy};
use ctxdiff::train::{StepLog, Trainer, LOSS_CSV_HEADER};
use ctxdiff::model::DenoiserModel;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{CliError, Result};

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

/// Creates the output directory and records the resolved config in it.
fn prepare_out(cfg: &RunConfig) -> Result<()> {
    create_dir(&cfg.out)?;
    write_file(&cfg.out.join("config.txt"), &cfg.to_text())
}

/// Config for commands that start from a checkpoint: the stored config with
/// `pairs` applied on top. The model section may not change.
pub fn config_for_checkpoint(ckpt: &Checkpoint, pairs: &[(String, String)]) -> Result<RunConfig> {
    let mut cfg = ckpt.config()?;
    let stored = cfg.model.clone();
    cfg.apply(pairs)?;
    if cfg.model != stored {
        return Err(CliError::config("model settings cannot be overridden when loading a checkpoint"));
    }
    if (cfg.schedule_t, cfg.beta_start, cfg.beta_end) != (ckpt.schedule_t, ckpt.beta_start, ckpt.beta_end) {
        return Err(CliError::config("schedule settings cannot be overridden when loading a checkpoint"));
    }
    Ok(cfg)
}

pub struct TrainSummary {
    pub logs: Vec<StepLog>,
    pub model: DenoiserModel<f32>,
    pub checkpoint: PathBuf,
}

/// Trains for `train.steps` steps, writing `loss.csv`, periodic checkpoints
/// under `checkpoints/` and the final `checkpoint.usdf`.
pub fn train(cfg: &RunConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    prepare_out(cfg)?;
    let tc = cfg.train_config()?;
    let plan = tc.plan.clone();
    let mut trainer = Trainer::new(tc)?;
    let csv_path = cfg.out.join("loss.csv");
    let file = File::create(&csv_path).map_err(|e| CliError::io(&csv_path, e))?;
    let mut csv = BufWriter::new(file);
    let io = |e| CliError::io(&csv_path, e);
    writeln!(csv, "{LOSS_CSV_HEADER}").map_err(io)?;
    let mut logs = Vec::with_capacity(cfg.train_steps as usize);
    for _ in 0..cfg.train_steps {
        let log = trainer.step()?;
        writeln!(csv, "{}", log.csv_row()).map_err(io)?;
        let done = log.step + 1;
        if cfg.log_every > 0 && done % cfg.log_every == 0 {
            let fb = log.feedback_loss.map(|v| format!(" feedback={v:.5}")).unwrap_or_default();
            eprintln!("step {done}/{} {} train={:.5}{fb}", cfg.train_steps, log.task, log.train_loss);
        }
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.train_steps {
            csv.flush().map_err(io)?;
            let dir = cfg.out.join("checkpoints");
            create_dir(&dir)?;
            Checkpoint::new(cfg, &plan, done, &trainer.model).save(&dir.join(format!("step_{done:06}.usdf")))?;
        }
        logs.push(log);
    }
    csv.flush().map_err(io)?;
    let checkpoint = cfg.out.join("checkpoint.usdf");
    Checkpoint::new(cfg, &plan, trainer.step_count(), &trainer.model).save(&checkpoint)?;
    Ok(TrainSummary { logs, model: trainer.model, checkpoint })
}

pub struct SampleSummary {
    pub denoiser_calls_per_image: usize,
    pub dir: PathBuf,
}

/// Samples `sample.n` items of `sample.task` with the inference plan and
/// writes the query, sample and target of each as PPM plus a count report.
pub fn sample(cfg: &RunConfig, ckpt_path: &Path) -> Result<SampleSummary> {
    cfg.validate()?;
    let ckpt = Checkpoint::load(ckpt_path)?;
    let model = ckpt.model()?;
    prepare_out(cfg)?;
    let s = cfg.schedule()?;
    let plan = cfg.inference_plan()?;
    let batch = eval_batch::<f32>(cfg.sample_task, cfg.sample_n, cfg.seed, cfg.model.image_size)?;
    let mut rng = Rng::stream(cfg.seed, streams::SAMPLE);
    let out = sample_all(&model, &batch, cfg.eval_batch_size, &plan, &s, &mut rng, cfg.sampler())?;
    let dir = cfg.out.join("samples");
    create_dir(&dir)?;
    for i in 0..batch.len() {
        for (role, t) in [("query", &batch.query), ("sample", &out.x), ("target", &batch.target)] {
            write_ppm(&dir.join(format!("{i:03}_{role}.ppm")), &item(t, i)?)?;
        }
    }
    let report = format!(
        "checkpoint={}\ntask={}\nn={}\nplan.strategy={}\nplan.k={}\ndenoiser_calls_per_image={}\n",
        ckpt_path.display(),
        cfg.sample_task,
        cfg.sample_n,
        plan.strategy(),
        plan.k(),
        out.denoiser_calls
    );
    write_file(&cfg.out.join("sample_report.txt"), &report)?;
    Ok(SampleSummary { denoiser_calls_per_image: out.denoiser_calls, dir })
}

fn item(t: &ctxdiff::Tensor<f32>, i: usize) -> Result<ctxdiff::Tensor<f32>> {
    let img = t.slice_outer(i, 1)?;
    Ok(img.reshape(&img.shape()[1..])?)
}

fn checkpoint_id(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "checkpoint".into())
}

fn eval_spec(cfg: &RunConfig, task: ctxdiff::data::TaskKind) -> EvalSpec {
    EvalSpec {
        task,
        n: cfg.eval_n,
        seed: cfg.seed,
        batch_size: cfg.eval_batch_size,
        feature_seed: cfg.feature_seed,
        image_size: cfg.model.image_size,
        sampler: cfg.sampler(),
    }
}

/// Appends rows to `results.csv`, writing the header when the file is new.
fn append_results(path: &Path, reports: &[EvalReport]) -> Result<()> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| CliError::io(path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str(RESULTS_CSV_HEADER);
        text.push('\n');
    }
    for r in reports {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    f.write_all(text.as_bytes()).map_err(|e| CliError::io(path, e))
}

/// Evaluates every task in `eval.tasks` and appends to `results.csv`.
pub fn eval(cfg: &RunConfig, ckpt_path: &Path) -> Result<Vec<EvalReport>> {
    cfg.validate()?;
    let ckpt = Checkpoint::load(ckpt_path)?;
    let model = ckpt.model()?;
    prepare_out(cfg)?;
    let s = cfg.schedule()?;
    let plan = cfg.inference_plan()?;
    let id = checkpoint_id(ckpt_path);
    let reports = cfg
        .eval_tasks
        .iter()
        .map(|&task| evaluate(&model, &id, &eval_spec(cfg, task), &plan, &s).map_err(CliError::from))
        .collect::<Result<Vec<_>>>()?;
    append_results(&cfg.out.join("results.csv"), &reports)?;
    Ok(reports)
}

/// Runs the exact-score sampler over the strategy x K grid into
/// `sandbox.csv`.
pub fn sandbox(cfg: &RunConfig) -> Result<Vec<SandboxReport>> {
    cfg.validate()?;
    prepare_out(cfg)?;
    let s = cfg.schedule()?;
    let spec = GaussianSpec::new(cfg.sandbox_mu0, cfg.sandbox_sigma0, cfg.sandbox_dim)?;
    let mut reports = Vec::new();
    for &strategy in &cfg.sandbox_strategies {
        for &k in &cfg.sandbox_ks {
            let plan = select_steps(&s, k, strategy).map_err(|e| CliError::config(format!("sandbox plan: {e}")))?;
            reports.push(run_sandbox(&plan, &spec, &s, cfg.sandbox_n, cfg.seed, cfg.sandbox_eta)?);
        }
    }
    let mut text = format!("{}\n", SandboxReport::CSV_HEADER);
    for r in &reports {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    write_file(&cfg.out.join("sandbox.csv"), &text)?;
    Ok(reports)
}

pub const ABLATION_CSV_HEADER: &str = "kind,cell,sga,fal,ess,lambda,final_train_loss,rmse,fd";

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub kind: &'static str,
    pub cell: String,
    pub sga: bool,
    pub fal: bool,
    pub ess: bool,
    pub lambda: f64,
    pub final_train_loss: f64,
    pub rmse: f64,
    pub fd: f64,
}

impl AblationRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.kind,
            self.cell,
            self.sga as u8,
            self.fal as u8,
            self.ess as u8,
            self.lambda,
            self.final_train_loss,
            self.rmse,
            self.fd
        )
    }
}

/// Config of one ablation cell. ESS off trains on every step and samples
/// with 100 uniform steps.
pub fn ablation_cell(base: &RunConfig, sga: bool, fal: bool, ess: bool, lambda: f64, name: &str) -> RunConfig {
    let mut cfg = base.clone();
    cfg.out = base.out.join("cells").join(name);
    cfg.model.sga = sga;
    cfg.fal.enabled = fal;
    cfg.fal.lambda = lambda;
    cfg.train_ess = ess;
    if !ess {
        cfg.plan_strategy = Strategy::Uniform;
        cfg.plan_k = 100;
    }
    cfg
}

fn run_cell(cfg: &RunConfig, kind: &'static str, name: &str) -> Result<AblationRow> {
    let summary = train(cfg)?;
    let s = cfg.schedule()?;
    let plan = cfg.inference_plan()?;
    let tail = summary.logs.len().min(100);
    let final_train_loss = if tail == 0 {
        f64::NAN
    } else {
        summary.logs[summary.logs.len() - tail..].iter().map(|l| l.train_loss).sum::<f64>() / tail as f64
    };
    let rmse = evaluate(&summary.model, name, &eval_spec(cfg, cfg.ablate_rmse_task), &plan, &s)?;
    let fd = evaluate(&summary.model, name, &eval_spec(cfg, cfg.ablate_fd_task), &plan, &s)?;
    append_results(&cfg.out.join("results.csv"), &[rmse.clone(), fd.clone()])?;
    let (Metric::Rmse(rmse), Metric::Fd(fd)) = (rmse.metric, fd.metric) else {
        unreachable!("task directions are validated")
    };
    Ok(AblationRow {
        kind,
        cell: name.to_string(),
        sga: cfg.model.sga,
        fal: cfg.fal.enabled,
        ess: cfg.train_ess,
        lambda: cfg.fal.lambda,
        final_train_loss,
        rmse,
        fd,
    })
}

/// Trains and scores the SGA x FAL x ESS grid and the lambda sweep; each
/// cell lives under `cells/<name>/`, the summary in `ablation.csv`.
pub fn ablate(cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    prepare_out(cfg)?;
    let mut rows = Vec::new();
    for sga in [true, false] {
        for fal in [true, false] {
            for ess in [true, false] {
                let name = format!("sga{}_fal{}_ess{}", sga as u8, fal as u8, ess as u8);
                let cell = ablation_cell(cfg, sga, fal, ess, cfg.fal.lambda, &name);
                rows.push(run_cell(&cell, "grid", &name)?);
            }
        }
    }
    for &lambda in &cfg.ablate_lambdas {
        let name = format!("lambda_{lambda}");
        let cell = ablation_cell(cfg, true, true, true, lambda, &name);
        rows.push(run_cell(&cell, "lambda", &name)?);
    }
    let mut text = format!("{ABLATION_CSV_HEADER}\n");
    for r in &rows {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    write_file(&cfg.out.join("ablation.csv"), &text)?;
    Ok(rows)
}

/// Writes `data.n` context items of `data.task` as PPM files with an index.
pub fn gen_data(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate()?;
    prepare_out(cfg)?;
    let seed = Rng::stream(cfg.seed, streams::DATA).next_u64();
    let batch = make_context_batch::<f32>(cfg.data_task, cfg.data_n, seed, cfg.model.image_size)?;
    let dir = cfg.out.join("data");
    create_dir(&dir)?;
    let mut index = String::from("item,task,example_seed,scene_seed\n");
    for i in 0..batch.len() {
        let roles = [
            ("example_src", &batch.example_src),
            ("example_tgt", &batch.example_tgt),
            ("query", &batch.query),
            ("target", &batch.target),
        ];
        for (role, t) in roles {
            write_ppm(&dir.join(format!("{i:03}_{role}.ppm")), &item(t, i)?)?;
        }
        index.push_str(&format!("{i},{},{},{}\n", batch.task, batch.example_seeds[i], batch.scene_seeds[i]));
    }
    write_file(&dir.join("index.csv"), &index)?;
    Ok(dir)
}
