use std::path::{Path, PathBuf};

use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use stg_core::analysis::{critic_histogram, embedding_continuity, project_embeddings, ContinuityReport};
use stg_core::checks::{loss_gradient_checks, GRADCHECK_TOLERANCE};
use stg_core::env::{generate_expert_dataset, load_dataset, save_dataset, EnvConfig};
use stg_core::models::ModelBundle;
use stg_core::numerics::{write_atomic, Checkpoint, GradCheckConfig};
use stg_core::pretrain::{pretrain, PretrainConfig};
use stg_core::rl::{
    evaluate, train_rl, EvalReport, ExpertPolicy, GreedyPolicy, Policy, PolicyNet, RandomPolicy, RewardMode, RlConfig,
};

use crate::args::*;
use crate::config::{require, resolve, Overrides};
use crate::error::{CliError, CliResult};
use crate::manifest::{prepare_output_dir, ManifestWriter};

pub const DATA_DIR_ENV: &str = "STG_DATA_DIR";

pub struct Context {
    pub threads: usize,
    pub config_file: Value,
}

fn out_dir(out: &Option<PathBuf>, subcommand: &str, seed: Option<u64>) -> CliResult<PathBuf> {
    if let Some(p) = out {
        return Ok(p.clone());
    }
    match std::env::var_os(DATA_DIR_ENV) {
        Some(root) => {
            let leaf = seed.map_or_else(|| "run".to_string(), |s| format!("seed-{s}"));
            Ok(PathBuf::from(root).join(subcommand).join(leaf))
        }
        None => Err(CliError::Usage(format!("--out is required when {DATA_DIR_ENV} is not set"))),
    }
}

fn require_exists(p: &Path) -> CliResult<()> {
    if p.exists() {
        Ok(())
    } else {
        Err(CliError::MissingInput(p.to_path_buf()))
    }
}

/// A file, or `dir/default_name` when given a directory.
fn artifact_file(p: &Path, default_name: &str) -> CliResult<PathBuf> {
    require_exists(p)?;
    let f = if p.is_dir() { p.join(default_name) } else { p.to_path_buf() };
    require_exists(&f)?;
    Ok(f)
}

/// Run `body` inside a fresh artifact directory bracketed by its manifest.
fn in_artifact_dir(
    ctx: &Context,
    dir: &Path,
    force: bool,
    subcommand: &str,
    config: &impl Serialize,
    seed: Option<u64>,
    inputs: Vec<PathBuf>,
    body: impl FnOnce(&Path) -> CliResult<()>,
) -> CliResult<()> {
    prepare_output_dir(dir, force, &inputs)?;
    let config = serde_json::to_value(config).expect("config serializes");
    let writer = ManifestWriter::start(dir, subcommand, config, seed, ctx.threads, inputs)?;
    let result = body(dir);
    writer.finish(&result)?;
    result
}

fn env_overrides(o: &mut Overrides, prefix: &[&str], env: &EnvArgs) {
    let key = |k: &'static str| prefix.iter().copied().chain([k]).collect::<Vec<_>>();
    o.set(&key("task"), env.task.map(TaskArg::name))
        .set(&key("grid"), env.grid)
        .set(&key("scale"), env.scale)
        .set(&key("horizon"), env.horizon)
        .set(&key("frame_stack"), env.frame_stack);
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenDataConfig {
    pub env: EnvConfig,
    pub trajectories: usize,
}

pub fn gen_data(ctx: &Context, a: GenDataArgs) -> CliResult<()> {
    let mut o = Overrides::new();
    env_overrides(&mut o, &["env"], &a.env);
    o.set(&["env", "seed"], a.seed).set(&["trajectories"], a.traj);
    let defaults = GenDataConfig {
        env: EnvConfig::default(),
        trajectories: 50,
    };
    let r = resolve(&defaults, ctx.config_file.clone(), o)?;
    require(&r.explicit, &["env", "seed"], "--seed")?;
    let cfg = r.config;
    if cfg.trajectories == 0 {
        return Err(CliError::Usage("--traj must be at least 1".into()));
    }
    cfg.env.validate()?;
    let dir = out_dir(&a.out.out, "gen-data", Some(cfg.env.seed))?;
    in_artifact_dir(ctx, &dir, a.out.force, "gen-data", &cfg, Some(cfg.env.seed), vec![], |dir| {
        let (ds, report) = generate_expert_dataset(&cfg.env, cfg.trajectories)?;
        save_dataset(&ds, dir)?;
        write_json(&dir.join("generation.json"), &report)?;
        println!(
            "wrote {} trajectories ({} states) to {}; expert success {:.3}",
            ds.len(),
            ds.total_states(),
            dir.display(),
            report.success_rate
        );
        Ok(())
    })
}

pub fn pretrain_cmd(ctx: &Context, a: PretrainArgs) -> CliResult<()> {
    let mut o = Overrides::new();
    o.set(&["datasets"], (!a.data.is_empty()).then_some(&a.data))
        .set(&["seed"], a.seed)
        .set(&["epochs"], a.epochs)
        .set(&["alpha"], a.alpha)
        .set(&["beta"], a.beta)
        .set(&["kappa"], a.kappa)
        .set(&["critic_lr"], a.critic_lr)
        .set(&["generator_lr"], a.generator_lr)
        .set(&["critic_steps"], a.critic_steps)
        .set(&["batch_size"], a.batch_size)
        .set(&["seq_len"], a.seq_len)
        .set(&["tdr_batch"], a.tdr_batch)
        .set(&["d"], a.d)
        .set(&["layers"], a.layers)
        .set(&["heads"], a.heads)
        .set(&["block_size"], a.block_size)
        .set(&["checkpoint_every"], a.checkpoint_every)
        .set(&["spectral_norm"], a.spectral_norm.then_some(true));
    let r = resolve(&PretrainConfig::default(), ctx.config_file.clone(), o)?;
    require(&r.explicit, &["seed"], "--seed")?;
    let cfg = r.config;
    if cfg.datasets.is_empty() {
        return Err(CliError::Usage("at least one --data directory is required".into()));
    }
    cfg.validate()?;
    for d in &cfg.datasets {
        require_exists(d)?;
    }
    let datasets = cfg.datasets.iter().map(|d| load_dataset(d)).collect::<Result<Vec<_>, _>>()?;
    let dir = out_dir(&a.out.out, "pretrain", Some(cfg.seed))?;
    let inputs = cfg.datasets.clone();
    in_artifact_dir(ctx, &dir, a.out.force, "pretrain", &cfg, Some(cfg.seed), inputs, |dir| {
        let outcome = pretrain(cfg.clone(), datasets, Some(dir))?;
        if let Some(last) = outcome.series.last() {
            println!(
                "pretrained {} epochs: L_dis {:.4} L_mse {:.4} L_tdr {:.4} gap {:.3e}",
                outcome.bundle.epoch, last.l_dis, last.l_mse, last.l_tdr, last.gap
            );
        }
        println!("bundle: {}", dir.join("bundle.stgc").display());
        Ok(())
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub bundle: Option<PathBuf>,
    pub rl: RlConfig,
}

pub fn train(ctx: &Context, a: TrainArgs) -> CliResult<()> {
    let mut o = Overrides::new();
    env_overrides(&mut o, &["rl", "env"], &a.env);
    o.set(&["bundle"], a.bundle.as_ref())
        .set(&["rl", "reward", "kind"], a.mode.map(ModeArg::kind))
        .set(&["rl", "reward", "eta"], a.eta)
        .set(&["rl", "reward", "nu"], a.nu)
        .set(&["rl", "seed"], a.seed)
        .set(&["rl", "total_steps"], a.steps)
        .set(&["rl", "eval_every"], a.eval_every)
        .set(&["rl", "eval_episodes"], a.eval_episodes)
        .set(&["rl", "target_success"], a.target_success)
        .set(&["rl", "ppo", "lr"], a.lr)
        .set(&["rl", "ppo", "rollout"], a.rollout)
        .set(&["rl", "ppo", "minibatch"], a.minibatch)
        .set(&["rl", "ppo", "epochs"], a.ppo_epochs)
        .set(&["rl", "ppo", "entropy_coef"], a.entropy_coef);
    let defaults = TrainConfig {
        bundle: None,
        rl: RlConfig::new(EnvConfig::default(), RewardMode::stg(1.0)),
    };
    let r = resolve(&defaults, ctx.config_file.clone(), o)?;
    require(&r.explicit, &["rl", "seed"], "--seed")?;
    let cfg = r.config;
    if cfg.rl.reward.kind == stg_core::rl::RewardKind::WithProgression {
        require(&r.explicit, &["rl", "reward", "nu"], "--nu (with --mode with-progression)")?;
    }
    cfg.rl.validate()?;
    let bundle_arg = cfg.bundle.clone().ok_or_else(|| CliError::Usage("--bundle is required".into()))?;
    let bundle_path = artifact_file(&bundle_arg, "bundle.stgc")?;
    let bundle = ModelBundle::load(&bundle_path)?;
    let fp = cfg.rl.env.fingerprint();
    if !bundle.env_fingerprints.contains(&fp) {
        return Err(stg_core::Error::GeometryMismatch(format!(
            "bundle was pretrained on environments {:?}, not {fp} ({} {}x{})",
            bundle.env_fingerprints, cfg.rl.env.task, cfg.rl.env.grid, cfg.rl.env.grid
        ))
        .into());
    }
    let dir = out_dir(&a.out.out, "train", Some(cfg.rl.seed))?;
    in_artifact_dir(ctx, &dir, a.out.force, "train", &cfg, Some(cfg.rl.seed), vec![bundle_path], |dir| {
        let outcome = train_rl(&cfg.rl, &bundle, Some(dir))?;
        let last_eval = outcome.curve.iter().rev().find(|p| p.eval_success.is_finite());
        match last_eval {
            Some(p) => println!(
                "trained {} env steps; last eval success {:.3} at update {}",
                outcome.env_steps, p.eval_success, p.update
            ),
            None => println!("trained {} env steps", outcome.env_steps),
        }
        Ok(())
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub policy: Option<PathBuf>,
    /// `random` or `expert`.
    pub baseline: Option<String>,
    pub env: EnvConfig,
    pub episodes: usize,
    pub seed: u64,
}

#[derive(Debug, Serialize)]
pub struct EvalSummary {
    pub episodes: usize,
    pub success_rate: f64,
    pub success_std: f64,
    pub mean_return: f64,
    pub return_std: f64,
    pub report: EvalReport,
}

pub fn eval(ctx: &Context, a: EvalArgs) -> CliResult<()> {
    let mut o = Overrides::new();
    env_overrides(&mut o, &["env"], &a.env);
    o.set(&["policy"], a.policy.as_ref())
        .set(
            &["baseline"],
            a.baseline.map(|b| match b {
                BaselineArg::Random => "random",
                BaselineArg::Expert => "expert",
            }),
        )
        .set(&["episodes"], a.episodes)
        .set(&["seed"], a.seed);
    let defaults = EvalConfig {
        policy: None,
        baseline: None,
        env: EnvConfig::default(),
        episodes: 100,
        seed: 0,
    };
    let r = resolve(&defaults, ctx.config_file.clone(), o)?;
    require(&r.explicit, &["seed"], "--seed")?;
    let cfg = r.config;
    cfg.env.validate()?;
    if cfg.episodes == 0 {
        return Err(CliError::Usage("--episodes must be at least 1".into()));
    }
    let mut inputs = Vec::new();
    let report = match (&cfg.policy, cfg.baseline.as_deref()) {
        (Some(p), None) => {
            let f = artifact_file(p, "policy.stgc")?;
            let net = PolicyNet::from_checkpoint(&Checkpoint::load(&f)?)?;
            if net.geometry != cfg.env.geometry() {
                return Err(stg_core::Error::GeometryMismatch(format!(
                    "policy expects {} frames but the environment renders {}",
                    net.geometry,
                    cfg.env.geometry()
                ))
                .into());
            }
            inputs.push(f);
            evaluate(&mut GreedyPolicy(&net), &cfg.env, cfg.episodes, cfg.seed)?
        }
        (None, Some(b)) => {
            let mut policy: Box<dyn Policy> = match b {
                "random" => Box::new(RandomPolicy(stg_core::Rng::seed_from_u64(cfg.seed))),
                "expert" => Box::new(ExpertPolicy),
                other => return Err(CliError::Usage(format!("unknown baseline `{other}`"))),
            };
            evaluate(policy.as_mut(), &cfg.env, cfg.episodes, cfg.seed)?
        }
        (Some(_), Some(_)) => return Err(CliError::Usage("--policy and --baseline are exclusive".into())),
        (None, None) => return Err(CliError::Usage("one of --policy or --baseline is required".into())),
    };
    let summary = EvalSummary {
        episodes: report.episodes(),
        success_rate: report.success_rate(),
        success_std: report.success_std(),
        mean_return: report.mean_return(),
        return_std: report.return_std(),
        report,
    };
    println!(
        "{}",
        json!({
            "episodes": summary.episodes,
            "success_rate": summary.success_rate,
            "success_std": summary.success_std,
            "mean_return": summary.mean_return,
            "return_std": summary.return_std,
        })
    );
    if let Some(dir) = &a.out {
        in_artifact_dir(ctx, dir, a.force, "eval", &cfg, Some(cfg.seed), inputs, |dir| {
            write_json(&dir.join("eval.json"), &summary)
        })?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeConfig {
    pub bundles: Vec<PathBuf>,
    pub data: Option<PathBuf>,
    pub continuity: bool,
    pub histogram: bool,
    pub projection: bool,
    pub random_pairs: usize,
    pub shuffles: usize,
    pub bins: usize,
    pub dims: usize,
    pub seed: u64,
}

#[derive(Debug, Serialize)]
struct ContinuityEntry<'a> {
    bundle: &'a Path,
    report: ContinuityReport,
}

pub fn analyze(ctx: &Context, a: AnalyzeArgs) -> CliResult<()> {
    let mut o = Overrides::new();
    o.set(&["bundles"], (!a.bundles.is_empty()).then_some(&a.bundles))
        .set(&["data"], a.data.as_ref())
        .set(&["continuity"], a.continuity.then_some(true))
        .set(&["histogram"], a.histogram.then_some(true))
        .set(&["projection"], a.projection.then_some(true))
        .set(&["random_pairs"], a.pairs)
        .set(&["shuffles"], a.shuffles)
        .set(&["bins"], a.bins)
        .set(&["dims"], a.dims)
        .set(&["seed"], a.seed);
    let defaults = AnalyzeConfig {
        bundles: Vec::new(),
        data: None,
        continuity: false,
        histogram: false,
        projection: false,
        random_pairs: 1000,
        shuffles: 1000,
        bins: 30,
        dims: 2,
        seed: 0,
    };
    let r = resolve(&defaults, ctx.config_file.clone(), o)?;
    require(&r.explicit, &["seed"], "--seed")?;
    let mut cfg = r.config;
    if !(cfg.continuity || cfg.histogram || cfg.projection) {
        cfg.continuity = true;
        cfg.histogram = true;
        cfg.projection = true;
    }
    if cfg.bundles.is_empty() {
        return Err(CliError::Usage("at least one --bundle is required".into()));
    }
    let data = cfg.data.clone().ok_or_else(|| CliError::Usage("--data is required".into()))?;
    require_exists(&data)?;
    let bundle_files = cfg
        .bundles
        .iter()
        .map(|b| artifact_file(b, "bundle.stgc"))
        .collect::<CliResult<Vec<_>>>()?;
    let ds = load_dataset(&data)?;
    let bundles = bundle_files.iter().map(|f| ModelBundle::load(f)).collect::<Result<Vec<_>, _>>()?;
    let mut inputs = vec![data];
    inputs.extend(bundle_files.iter().cloned());
    let dir = out_dir(&a.out.out, "analyze", Some(cfg.seed))?;
    in_artifact_dir(ctx, &dir, a.out.force, "analyze", &cfg, Some(cfg.seed), inputs, |dir| {
        let mut continuity = Vec::new();
        for (i, (bundle, file)) in bundles.iter().zip(&bundle_files).enumerate() {
            if cfg.continuity {
                let report = embedding_continuity(&ds, bundle, cfg.random_pairs, cfg.seed)?;
                println!(
                    "{}: continuity ratio {:.4} (adjacent {:.4e}, random {:.4e})",
                    file.display(),
                    report.ratio,
                    report.mean_adjacent,
                    report.mean_random
                );
                continuity.push(ContinuityEntry { bundle: file, report });
            }
            if cfg.histogram {
                let h = critic_histogram(&ds, bundle, cfg.shuffles, cfg.bins, cfg.seed)?;
                println!(
                    "{}: critic means expert {:.4e} predicted {:.4e} shuffled {:.4e}",
                    file.display(),
                    h.expert_mean(),
                    h.predicted_mean(),
                    h.shuffled_mean()
                );
                write_json(&dir.join(format!("histogram_{i}.json")), &h)?;
                let mut csv = String::from("bin_lo,bin_hi,expert,predicted,shuffled\n");
                for b in 0..cfg.bins {
                    csv.push_str(&format!(
                        "{},{},{},{},{}\n",
                        h.edges[b], h.edges[b + 1], h.expert_counts[b], h.predicted_counts[b], h.shuffled_counts[b]
                    ));
                }
                write_atomic(&dir.join(format!("histogram_{i}.csv")), csv.as_bytes())?;
            }
            if cfg.projection {
                let p = project_embeddings(&ds, bundle, cfg.dims, Some(&dir.join(format!("projection_{i}.csv"))))?;
                println!("{}: explained variance {:?}", file.display(), p.explained);
            }
        }
        if cfg.continuity {
            write_json(&dir.join("continuity.json"), &continuity)?;
        }
        Ok(())
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckRunConfig {
    pub f64: bool,
    pub max_elements: Option<usize>,
}

#[derive(Debug, Serialize)]
struct GradcheckLine {
    loss: &'static str,
    max_rel_error: f64,
    checked: usize,
    worst_parameter: Option<String>,
    worst_index: Option<usize>,
    passed: bool,
}

pub fn gradcheck(ctx: &Context, a: GradcheckArgs) -> CliResult<()> {
    let mut o = Overrides::new();
    o.set(&["f64"], a.f64.then_some(true)).set(&["max_elements"], a.max_elements);
    let defaults = GradcheckRunConfig {
        f64: false,
        max_elements: None,
    };
    let cfg = resolve(&defaults, ctx.config_file.clone(), o)?.config;
    if !cfg.f64 {
        return Err(CliError::Usage(
            "gradcheck needs --f64: finite differences are not meaningful at 32-bit".into(),
        ));
    }
    let gc = GradCheckConfig {
        max_elements_per_param: cfg.max_elements,
        ..GradCheckConfig::default()
    };
    let run = |dir: Option<&Path>| -> CliResult<()> {
        let checks = loss_gradient_checks(gc)?;
        let lines: Vec<GradcheckLine> = checks
            .iter()
            .map(|c| GradcheckLine {
                loss: c.loss,
                max_rel_error: c.report.max_rel_error,
                checked: c.report.checked,
                worst_parameter: c.report.worst.as_ref().map(|w| w.parameter.clone()),
                worst_index: c.report.worst.as_ref().map(|w| w.index),
                passed: c.passed(),
            })
            .collect();
        for l in &lines {
            println!(
                "{} {:<20} max rel error {:.3e} over {} entries; worst {}[{}]",
                if l.passed { "PASS" } else { "FAIL" },
                l.loss,
                l.max_rel_error,
                l.checked,
                l.worst_parameter.as_deref().unwrap_or("-"),
                l.worst_index.map_or("-".to_string(), |i| i.to_string())
            );
        }
        if let Some(dir) = dir {
            write_json(&dir.join("gradcheck.json"), &json!({ "tolerance": GRADCHECK_TOLERANCE, "losses": lines }))?;
        }
        let failed: Vec<&str> = lines.iter().filter(|l| !l.passed).map(|l| l.loss).collect();
        if failed.is_empty() {
            Ok(())
        } else {
            Err(CliError::GradcheckFailed(format!(
                "{} exceed relative error {GRADCHECK_TOLERANCE:e}",
                failed.join(", ")
            )))
        }
    };
    match &a.out {
        Some(dir) => in_artifact_dir(ctx, dir, a.force, "gradcheck", &cfg, None, vec![], |d| run(Some(d))),
        None => run(None),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlotConfig {
    pub curves: Vec<PathBuf>,
}

pub fn plot(ctx: &Context, a: PlotArgs) -> CliResult<()> {
    let mut o = Overrides::new();
    o.set(&["curves"], Some(&a.curves));
    let cfg = resolve(&PlotConfig { curves: Vec::new() }, ctx.config_file.clone(), o)?.config;
    for c in &cfg.curves {
        require_exists(c)?;
    }
    let inputs = cfg.curves.clone();
    in_artifact_dir(ctx, &a.out, a.force, "plot", &cfg, None, inputs, |dir| {
        for p in stg_core::analysis::plot_curves(&cfg.curves, dir)? {
            println!("{}", p.display());
        }
        Ok(())
    })
}
