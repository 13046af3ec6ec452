use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use fluidctl_core::baselines::{make_baseline, BaselineKind, Controller};
use fluidctl_core::environment::{make_environment, EnvironmentConfig, EnvironmentId, Simulator};
use fluidctl_core::evaluation::{compare, named_cases, run_test, write_reports_csv, MetricsReport, TestCase, TrajectoryRecord};
use fluidctl_core::policy::{load_checkpoint, save_checkpoint, ObservationLayout, OutputKind, PolicyController, PolicyParams};
use fluidctl_core::training::{
    generate_supervised_dataset, read_dataset, train_diffphys, write_dataset, Dataset, DatasetConfig,
    SupervisedConfig, TrainConfig, SUPERVISED_LOG_HEADER, TRAIN_LOG_HEADER,
};
use fluidctl_core::training;
use fluidctl_core::verification::{run_suites, VerifyOptions};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{overlay, EvalSettings, FileConfig};
use crate::error::CliError;
use crate::{DatasetArgs, EvalArgs, RunArgs, SupervisedArgs, TrainArgs, VerifyArgs};

/// Everything a run resolved to, echoed into the output directory.
#[derive(Serialize)]
struct Resolved<'a> {
    command: &'a str,
    seed: u64,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    controllers: Vec<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    checkpoints: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    dataset_file: Option<String>,
    environment: &'a EnvironmentConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    training: Option<&'a TrainConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    dataset: Option<&'a DatasetConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    supervised: Option<&'a SupervisedConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    evaluation: Option<&'a EvalSettings>,
}

impl<'a> Resolved<'a> {
    fn new(command: &'a str, seed: u64, environment: &'a EnvironmentConfig) -> Self {
        Self {
            command,
            seed,
            controllers: Vec::new(),
            checkpoints: Vec::new(),
            dataset_file: None,
            environment,
            training: None,
            dataset: None,
            supervised: None,
            evaluation: None,
        }
    }

    fn write(&self, out: &Path) -> Result<(), CliError> {
        let text = toml::to_string(self).map_err(|e| CliError::Runtime(e.to_string()))?;
        fs::write(out.join("config.resolved"), text)?;
        Ok(())
    }
}

struct Setup {
    file: FileConfig,
    env: EnvironmentConfig,
    seed: Option<u64>,
    out: PathBuf,
}

fn setup(run: &RunArgs) -> Result<Setup, CliError> {
    let file = FileConfig::load(run.config.as_deref())?;
    let mut patch = file.environment.clone();
    if let Some(g) = run.grid {
        patch.insert("grid_cells".into(), toml::Value::Integer(g as i64));
    }
    let env = make_environment(run.env, Some(&patch))?;
    fs::create_dir_all(&run.out)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", run.out.display())))?;
    Ok(Setup {
        file,
        env,
        seed: run.seed,
        out: run.out.clone(),
    })
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", path.display())))
}

fn train_config(s: &Setup) -> Result<TrainConfig, CliError> {
    let mut cfg = overlay(&TrainConfig::for_environment(&s.env), &s.file.training, "training")?;
    cfg.weights = overlay(&cfg.weights, &s.file.weights, "weights")?;
    if let Some(seed) = s.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

pub fn train(a: TrainArgs) -> Result<(), CliError> {
    let s = setup(&a.run)?;
    let mut cfg = train_config(&s)?;
    if let Some(n) = a.iters {
        cfg.n_i = n;
    }
    if let Some(l) = a.horizon {
        cfg.weights.l = l;
    }
    if let Some(ab) = a.ablation {
        cfg.weights = cfg.weights.ablated(ab);
    }
    cfg.validate()?;
    let mut resolved = Resolved::new("train", cfg.seed, &s.env);
    resolved.training = Some(&cfg);
    resolved.write(&s.out)?;

    let sim = Simulator::new(s.env.clone())?;
    let mut log = create(&s.out.join("train_log.csv"))?;
    writeln!(log, "{TRAIN_LOG_HEADER}")?;
    let mut io_err = None;
    let outcome = train_diffphys(&sim, &cfg, &mut |row| {
        if row.iteration % 50 == 0 {
            log::info!("iteration {}: loss {:.4}", row.iteration, row.loss);
        }
        if let Err(e) = writeln!(log, "{}", row.csv()) {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    log.flush()?;

    let mut val = create(&s.out.join("validation.csv"))?;
    writeln!(val, "iteration,score")?;
    for (it, score) in &outcome.validation {
        writeln!(val, "{it},{score}")?;
    }
    val.flush()?;
    let ckpt = s.out.join("checkpoints");
    fs::create_dir_all(&ckpt)?;
    save_checkpoint(&ckpt.join("policy.pol"), &outcome.params)?;
    save_checkpoint(&ckpt.join("final.pol"), &outcome.final_params)?;
    println!(
        "trained {} iterations; best validation at iteration {}; checkpoint {}",
        outcome.log.len(),
        outcome.best_iteration,
        ckpt.join("policy.pol").display()
    );
    Ok(())
}

fn dataset_config(s: &Setup, sims: Option<usize>, steps: Option<usize>) -> Result<DatasetConfig, CliError> {
    let mut cfg = overlay(&DatasetConfig::default(), &s.file.dataset, "dataset")?;
    if let Some(n) = sims {
        cfg.n_sims = n;
    }
    if let Some(n) = steps {
        cfg.steps = n;
    }
    if let Some(seed) = s.seed {
        cfg.seed = seed;
    }
    if cfg.n_sims < 2 {
        return Err(CliError::validation(format!(
            "--sims must be at least 2 to leave a validation split, got {}",
            cfg.n_sims
        )));
    }
    Ok(cfg)
}

fn build_dataset(s: &Setup, cfg: &DatasetConfig) -> Result<PathBuf, CliError> {
    let sim = Simulator::new(s.env.clone())?;
    let data = generate_supervised_dataset(&sim, cfg, ObservationLayout::default_for(s.env.dof))?;
    let path = s.out.join("dataset.bin");
    let mut w = create(&path)?;
    write_dataset(&mut w, &data)?;
    w.flush()?;
    let (train, val) = data.split()?;
    println!(
        "{} samples from {} simulations ({} training / {} validation samples) written to {}",
        data.samples.len(),
        data.n_sims,
        train.len(),
        val.len(),
        path.display()
    );
    Ok(path)
}

pub fn dataset(a: DatasetArgs) -> Result<(), CliError> {
    let s = setup(&a.run)?;
    let cfg = dataset_config(&s, a.sims, a.steps)?;
    let mut resolved = Resolved::new("dataset", cfg.seed, &s.env);
    resolved.dataset = Some(&cfg);
    resolved.write(&s.out)?;
    build_dataset(&s, &cfg)?;
    Ok(())
}

fn load_dataset(path: &Path) -> Result<Dataset, CliError> {
    let f = File::open(path).map_err(|e| CliError::validation(format!("cannot open dataset {}: {e}", path.display())))?;
    Ok(read_dataset(&mut std::io::BufReader::new(f))?)
}

pub fn train_supervised(a: SupervisedArgs) -> Result<(), CliError> {
    let s = setup(&a.run)?;
    let mut cfg = overlay(&SupervisedConfig::default(), &s.file.supervised, "supervised")?;
    if let Some(n) = a.iters {
        cfg.n_i = n;
    }
    if let Some(seed) = s.seed {
        cfg.seed = seed;
    }
    let data_cfg;
    let mut resolved = Resolved::new("train-supervised", cfg.seed, &s.env);
    resolved.supervised = Some(&cfg);
    let path = match &a.dataset {
        Some(p) => {
            if a.sims.is_some() {
                return Err(CliError::validation("--sims only applies when the dataset is generated"));
            }
            resolved.dataset_file = Some(p.display().to_string());
            resolved.write(&s.out)?;
            p.clone()
        }
        None => {
            data_cfg = dataset_config(&s, a.sims, a.steps)?;
            resolved.dataset = Some(&data_cfg);
            resolved.write(&s.out)?;
            build_dataset(&s, &data_cfg)?
        }
    };
    let data = load_dataset(&path)?;
    let layout = ObservationLayout::from_input_dim(s.env.dof, data.z_dim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let template = PolicyParams::init(
        &fluidctl_core::policy::default_dims(s.env.dof),
        layout,
        OutputKind::Linear,
        s.env.f_max,
        s.env.t_max,
        &mut rng,
    )?;
    let (train, val) = data.split()?;
    let mut log = create(&s.out.join("train_log.csv"))?;
    writeln!(log, "{SUPERVISED_LOG_HEADER}")?;
    let mut io_err = None;
    let outcome = training::train_supervised(train, val, &template, &cfg, &mut |row| {
        if let Some(v) = row.val_loss {
            log::info!("iteration {}: training loss {:.5}, validation loss {v:.5}", row.iteration, row.loss);
        }
        if let Err(e) = writeln!(log, "{}", row.csv()) {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    log.flush()?;
    let ckpt = s.out.join("checkpoints");
    fs::create_dir_all(&ckpt)?;
    save_checkpoint(&ckpt.join("policy.pol"), &outcome.params)?;
    println!(
        "best validation loss {:.6} at iteration {}; checkpoint {}",
        outcome.best_val_loss,
        outcome.best_iteration,
        ckpt.join("policy.pol").display()
    );
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ControllerKind {
    Diff,
    Sup,
    Pid,
    Ls,
}

impl ControllerKind {
    fn parse(s: &str) -> Result<Self, CliError> {
        match s {
            "diff" => Ok(Self::Diff),
            "sup" => Ok(Self::Sup),
            "pid" => Ok(Self::Pid),
            "ls" => Ok(Self::Ls),
            _ => Err(CliError::validation(format!("unknown controller `{s}` (valid: diff, sup, pid, ls)"))),
        }
    }
}

/// A controller recipe; each rollout builds a fresh instance.
#[derive(Clone)]
enum Recipe {
    Policy(PolicyParams, &'static str),
    Baseline(BaselineKind),
}

impl Recipe {
    fn build(&self, env: &EnvironmentConfig) -> Result<Box<dyn Controller>, CliError> {
        Ok(match self {
            Recipe::Policy(p, name) => Box::new(PolicyController::named(p.clone(), *name)),
            Recipe::Baseline(kind) => Box::new(make_baseline(*kind, env)?),
        })
    }
}

fn recipes(a: &EvalArgs, env: &EnvironmentConfig) -> Result<Vec<Recipe>, CliError> {
    let kinds = a.controllers.iter().map(|c| ControllerKind::parse(c)).collect::<Result<Vec<_>, _>>()?;
    let learned = kinds.iter().filter(|k| matches!(k, ControllerKind::Diff | ControllerKind::Sup)).count();
    if a.checkpoints.len() != learned {
        return Err(CliError::validation(format!(
            "{learned} learned controller(s) need as many --checkpoint flags, got {}",
            a.checkpoints.len()
        )));
    }
    let mut ckpts = a.checkpoints.iter();
    let mut out = Vec::with_capacity(kinds.len());
    for kind in kinds {
        out.push(match kind {
            ControllerKind::Diff | ControllerKind::Sup => {
                let path = ckpts.next().expect("counted above");
                if !path.is_file() {
                    return Err(CliError::validation(format!("checkpoint {} does not exist", path.display())));
                }
                let (output, name) = if kind == ControllerKind::Diff {
                    (OutputKind::Bounded, "Diff")
                } else {
                    (OutputKind::Linear, "Sup")
                };
                let p = load_checkpoint(path, output)?;
                if p.layout.dof != env.dof {
                    return Err(CliError::validation(format!(
                        "checkpoint {} controls a {:?} body but {} is {:?}",
                        path.display(),
                        p.layout.dof,
                        env.id,
                        env.dof
                    )));
                }
                Recipe::Policy(p, name)
            }
            ControllerKind::Pid => Recipe::Baseline(BaselineKind::Pid),
            ControllerKind::Ls => {
                make_baseline(BaselineKind::LoopShaping, env)?;
                Recipe::Baseline(BaselineKind::LoopShaping)
            }
        });
    }
    Ok(out)
}

type Job<'a> = (&'a Recipe, &'a TestCase);

fn run_jobs(
    sim: &Simulator,
    jobs: &[Job<'_>],
    seed: u64,
    threads: usize,
) -> Result<Vec<(TrajectoryRecord, MetricsReport)>, CliError> {
    let one = |(recipe, case): &Job<'_>| -> Result<(TrajectoryRecord, MetricsReport), CliError> {
        let mut c = recipe.build(&sim.cfg)?;
        log::info!("running {} on {}", c.name(), case.name);
        Ok(run_test(sim, c.as_mut(), case, seed)?)
    };
    let threads = threads.clamp(1, jobs.len().max(1));
    if threads == 1 {
        return jobs.iter().map(one).collect();
    }
    let chunk = jobs.len().div_ceil(threads);
    std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(one).collect::<Result<Vec<_>, _>>()))
            .collect();
        let mut out = Vec::with_capacity(jobs.len());
        for h in handles {
            out.extend(h.join().map_err(|_| CliError::Runtime("rollout worker panicked".into()))??);
        }
        Ok(out)
    })
}

fn file_stem(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect()
}

pub fn eval(a: EvalArgs) -> Result<(), CliError> {
    let s = setup(&a.run)?;
    let mut settings = overlay(&EvalSettings::default(), &s.file.evaluation, "evaluation")?;
    if let Some(n) = a.sims {
        settings.sims = n;
    }
    if let Some(j) = a.jobs {
        settings.jobs = j;
    }
    if a.schedule.is_some() {
        settings.schedule = a.schedule.clone();
    }
    let schedule = settings.schedule.clone().unwrap_or_else(|| {
        if s.env.id == EnvironmentId::Hold { "hold" } else { "random" }.to_string()
    });
    if settings.sims == 0 || settings.targets == 0 {
        return Err(CliError::validation("evaluation needs at least one simulation and one target"));
    }
    let seed = s.seed.unwrap_or(0);
    let recipes = recipes(&a, &s.env)?;
    let cases = named_cases(&s.env, &schedule, seed, settings.sims, settings.targets)?;

    let mut resolved = Resolved::new("eval", seed, &s.env);
    resolved.controllers = a.controllers.clone();
    resolved.checkpoints = a.checkpoints.iter().map(|p| p.display().to_string()).collect();
    resolved.evaluation = Some(&settings);
    resolved.write(&s.out)?;

    let sim = Simulator::new(s.env.clone())?;
    let jobs: Vec<Job<'_>> = recipes.iter().flat_map(|r| cases.iter().map(move |c| (r, c))).collect();
    let results = run_jobs(&sim, &jobs, seed, settings.jobs)?;

    let traj_dir = s.out.join("trajectories");
    fs::create_dir_all(&traj_dir)?;
    for (traj, report) in &results {
        let name = format!("{}_{}.csv", file_stem(&report.controller), file_stem(&report.test));
        let mut w = create(&traj_dir.join(name))?;
        traj.write_csv(&mut w)?;
        w.flush()?;
    }
    let reports: Vec<MetricsReport> = results.into_iter().map(|(_, r)| r).collect();
    let mut w = create(&s.out.join("report.csv"))?;
    write_reports_csv(&mut w, &reports)?;
    w.flush()?;
    let table = compare(&reports);
    let mut w = create(&s.out.join("comparison.csv"))?;
    table.write_csv(&mut w)?;
    w.flush()?;
    print!("{}", table.to_text());
    Ok(())
}

pub fn verify(a: VerifyArgs) -> Result<(), CliError> {
    let mut opts = VerifyOptions {
        gradient_seeds: a.gradient_seeds,
        ..VerifyOptions::default()
    };
    if let Some(t) = a.projection_tol {
        if !(t > 0.0) {
            return Err(CliError::validation("--projection-tol must be positive"));
        }
        opts.projection_tol = t;
    }
    let results = run_suites(&opts);
    for r in &results {
        println!("{}", r.line());
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    if failed.is_empty() {
        println!("all {} suites passed", results.len());
        Ok(())
    } else {
        Err(CliError::Verification(failed.join(", ")))
    }
}
