//! The five subcommands. Each one resolves its configuration (defaults,
//! then file, then flags), echoes the effective configuration into the
//! output directory, runs the library, and writes its artifacts.
//!
//! Output files never contain wall-clock times, so every file is a pure
//! function of (configuration, seeds); timing goes to stdout only.

use std::fmt::Display;
use std::path::{Path, PathBuf};

use nqnet_core::drl::{self, DrlConfig, MdpSpec, RewardShape};
use nqnet_core::heads::{HeadKind, QuantileLevels};
use nqnet_core::losses::LossSpec;
use nqnet_core::rng::derive_seed;
use nqnet_core::simdata::{Dataset, SimModel};
use nqnet_core::trainer::{self, EvalReport, ReplicateOptions, RunRecord, TrainConfig};

use crate::config::{self, KvMap};
use crate::plot::{self, Csv, Series};
use crate::{CliError, DrlArgs, GenDataArgs, Globals, PlotArgs, ReplicateArgs, TrainArgs};

/// Salt for the held-out evaluation draw of `nqnet train`.
const SALT_CLI_EVAL: u64 = 41;
/// Salt for the Monte-Carlo policy rollouts of `nqnet drl`.
const SALT_CLI_ROLLOUT: u64 = 42;

fn kv(key: &str, value: impl Display) -> (String, String) {
    (key.to_string(), value.to_string())
}

fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

/// Serializes records as JSON lines with every `*wall_secs` field removed;
/// wall clocks are the one non-reproducible quantity the library reports.
fn det_jsonl<T: serde::Serialize>(items: &[T]) -> Result<String, CliError> {
    let mut out = String::new();
    for item in items {
        let mut value = serde_json::to_value(item)
            .map_err(|e| CliError::Runtime(format!("serializing record: {e}")))?;
        strip_wall(&mut value);
        out.push_str(&value.to_string());
        out.push('\n');
    }
    Ok(out)
}

fn strip_wall(value: &mut serde_json::Value) {
    match value {
        serde_json::Value::Object(map) => {
            map.retain(|key, _| !key.ends_with("wall_secs"));
            map.values_mut().for_each(strip_wall);
        }
        serde_json::Value::Array(items) => items.iter_mut().for_each(strip_wall),
        _ => {}
    }
}

fn resolve_seed(file: &KvMap, flag: Option<u64>) -> Result<u64, CliError> {
    let mut seed = 0u64;
    if let Some(raw) = file.get("seed") {
        seed = config::value("seed", raw)?;
    }
    if let Some(s) = flag {
        seed = s;
    }
    Ok(seed)
}

// ---------------------------------------------------------------- gen-data

pub fn gen_data(globals: &Globals, args: &GenDataArgs) -> Result<(), CliError> {
    let file = &globals.file;
    config::check_keys(file, &["model", "n", "seed", "out_dir"])?;

    let mut model = SimModel::Wave;
    if let Some(raw) = file.get("model") {
        model = SimModel::parse(raw)?;
    }
    if let Some(raw) = &args.model {
        model = SimModel::parse(raw)?;
    }
    let mut n = 512usize;
    if let Some(raw) = file.get("n") {
        n = config::value("n", raw)?;
    }
    if let Some(v) = args.n {
        n = v;
    }
    let seed = resolve_seed(file, globals.seed)?;
    let dir = config::resolve_out_dir(globals.out_dir.as_deref(), file, "gen-data");

    config::echo_config(
        &dir,
        "gen-data",
        &[kv("model", model), kv("n", n), kv("seed", seed), kv("out_dir", dir.display())],
    )?;

    let data = Dataset::sample(model, n, seed)?;
    let mut csv = Vec::new();
    data.to_csv(&mut csv)?;
    let csv_text = String::from_utf8(csv)
        .map_err(|e| CliError::Runtime(format!("dataset CSV is not UTF-8: {e}")))?;
    let path = config::write_output(&dir, "data.csv", &csv_text)?;
    let meta = format!(
        "model = {model}\nn = {n}\nseed = {seed}\ninput_dim = {}\n",
        model.input_dim()
    );
    config::write_output(&dir, "data.meta", &meta)?;
    println!("wrote {} ({n} rows) and data.meta", path.display());
    Ok(())
}

// ------------------------------------------------------------------- train

const TRAIN_KEYS: &[&str] = &[
    "model", "method", "n", "k", "levels", "hidden", "loss", "kappa", "batch_size",
    "max_epochs", "patience", "lr", "beta1", "beta2", "test_size", "grid", "seed", "out_dir",
];

struct FitSpec {
    n: usize,
    config: TrainConfig,
    test_size: usize,
}

/// Shared resolution for `train` and `replicate`: everything that shapes a
/// single fit. `model` here is only used to default the hidden layout.
#[allow(clippy::too_many_arguments)]
fn resolve_fit(
    file: &KvMap,
    seed: u64,
    model: SimModel,
    method: HeadKind,
    n_flag: Option<usize>,
    k_flag: Option<usize>,
    levels_flag: Option<&str>,
    hidden_flag: Option<&str>,
    loss_flag: Option<&str>,
    kappa_flag: Option<f64>,
    batch_flag: Option<usize>,
    epochs_flag: Option<usize>,
    patience_flag: Option<usize>,
    lr_flag: Option<f64>,
    test_flag: Option<usize>,
) -> Result<FitSpec, CliError> {
    let mut n = 512usize;
    if let Some(raw) = file.get("n") {
        n = config::value("n", raw)?;
    }
    if let Some(v) = n_flag {
        n = v;
    }

    let mut k: Option<usize> = None;
    if let Some(raw) = file.get("k") {
        k = Some(config::value("k", raw)?);
    }
    if let Some(v) = k_flag {
        k = Some(v);
    }
    let mut levels: Option<Vec<f64>> = None;
    if let Some(raw) = file.get("levels") {
        levels = Some(config::value_list("levels", raw)?);
    }
    if let Some(raw) = levels_flag {
        levels = Some(config::value_list("levels", raw)?);
    }
    if k.is_some() && levels.is_some() {
        return Err(CliError::Config("set `k` or `levels`, not both".into()));
    }

    let mut cfg = TrainConfig::new(method, k.unwrap_or(19))?;
    if let Some(taus) = levels {
        cfg.levels = QuantileLevels::new(taus)?;
    }

    let mut hidden: Vec<usize> = Vec::new();
    if let Some(raw) = file.get("hidden") {
        hidden = config::value_list("hidden", raw)?;
    }
    if let Some(raw) = hidden_flag {
        hidden = config::value_list("hidden", raw)?;
    }
    cfg.hidden = if hidden.is_empty() {
        TrainConfig::hidden_for(model.input_dim())
    } else {
        hidden
    };

    let mut loss_name = "check".to_string();
    if let Some(raw) = file.get("loss") {
        loss_name = raw.clone();
    }
    if let Some(raw) = loss_flag {
        loss_name = raw.to_string();
    }
    let mut kappa = 1.0f64;
    if let Some(raw) = file.get("kappa") {
        kappa = config::value("kappa", raw)?;
    }
    if let Some(v) = kappa_flag {
        kappa = v;
    }
    cfg.loss = LossSpec::parse(&loss_name, kappa)?;

    if let Some(raw) = file.get("batch_size") {
        cfg.batch_size = config::value("batch_size", raw)?;
    }
    if let Some(v) = batch_flag {
        cfg.batch_size = v;
    }
    if let Some(raw) = file.get("max_epochs") {
        cfg.max_epochs = config::value("max_epochs", raw)?;
    }
    if let Some(v) = epochs_flag {
        cfg.max_epochs = v;
    }
    if let Some(raw) = file.get("patience") {
        cfg.patience = config::value("patience", raw)?;
    }
    if let Some(v) = patience_flag {
        cfg.patience = v;
    }
    if let Some(raw) = file.get("lr") {
        cfg.lr = config::value("lr", raw)?;
    }
    if let Some(v) = lr_flag {
        cfg.lr = v;
    }
    if let Some(raw) = file.get("beta1") {
        cfg.beta1 = config::value("beta1", raw)?;
    }
    if let Some(raw) = file.get("beta2") {
        cfg.beta2 = config::value("beta2", raw)?;
    }
    cfg.seed = seed;

    let mut test_size = 100_000usize;
    if let Some(raw) = file.get("test_size") {
        test_size = config::value("test_size", raw)?;
    }
    if let Some(v) = test_flag {
        test_size = v;
    }

    Ok(FitSpec { n, config: cfg, test_size })
}

fn fit_echo(spec: &FitSpec, extra: Vec<(String, String)>) -> Vec<(String, String)> {
    let mut pairs = vec![
        kv("n", spec.n),
        kv("levels", join(spec.config.levels.as_slice())),
        kv("hidden", join(&spec.config.hidden)),
        kv("loss", spec.config.loss.kind),
        kv("kappa", spec.config.loss.kappa),
        kv("batch_size", spec.config.batch_size),
        kv("max_epochs", spec.config.max_epochs),
        kv("patience", spec.config.patience),
        kv("lr", spec.config.lr),
        kv("beta1", spec.config.beta1),
        kv("beta2", spec.config.beta2),
        kv("test_size", spec.test_size),
        kv("seed", spec.config.seed),
    ];
    pairs.extend(extra);
    pairs
}

pub fn train(globals: &Globals, args: &TrainArgs) -> Result<(), CliError> {
    let file = &globals.file;
    config::check_keys(file, TRAIN_KEYS)?;

    let mut model = SimModel::Wave;
    if let Some(raw) = file.get("model") {
        model = SimModel::parse(raw)?;
    }
    if let Some(raw) = &args.model {
        model = SimModel::parse(raw)?;
    }
    let mut method = HeadKind::NqElu;
    if let Some(raw) = file.get("method") {
        method = HeadKind::parse(raw)?;
    }
    if let Some(raw) = &args.method {
        method = HeadKind::parse(raw)?;
    }
    let seed = resolve_seed(file, globals.seed)?;
    let spec = resolve_fit(
        file,
        seed,
        model,
        method,
        args.n,
        args.k,
        args.levels.as_deref(),
        args.hidden.as_deref(),
        args.loss.as_deref(),
        args.kappa,
        args.batch_size,
        args.max_epochs,
        args.patience,
        args.lr,
        args.test_size,
    )?;
    let mut grid = 201usize;
    if let Some(raw) = file.get("grid") {
        grid = config::value("grid", raw)?;
    }
    if let Some(v) = args.grid {
        grid = v;
    }

    let dir = config::resolve_out_dir(globals.out_dir.as_deref(), file, "train");
    config::echo_config(
        &dir,
        "train",
        &fit_echo(
            &spec,
            vec![
                kv("model", model),
                kv("method", method),
                kv("grid", grid),
                kv("out_dir", dir.display()),
            ],
        ),
    )?;

    let (predictor, fit_report) = trainer::train(model, spec.n, &spec.config)?;
    let eval = trainer::evaluate(
        &predictor,
        model,
        spec.test_size,
        derive_seed(seed, SALT_CLI_EVAL, 0),
    )?;
    let report = EvalReport::merge(fit_report, eval);

    let mut curves = String::from("epoch,train_risk,val_risk\n");
    for (epoch, (tr, va)) in report.train_curve.iter().zip(&report.val_curve).enumerate() {
        curves.push_str(&format!("{epoch},{tr},{va}\n"));
    }
    config::write_output(&dir, "curves.csv", &curves)?;

    let mut eval_csv = String::from("tau,l1,l2sq\n");
    for ((tau, l1), l2) in spec
        .config
        .levels
        .as_slice()
        .iter()
        .zip(&report.per_level_l1)
        .zip(&report.per_level_l2sq)
    {
        eval_csv.push_str(&format!("{tau},{l1},{l2}\n"));
    }
    config::write_output(&dir, "eval.csv", &eval_csv)?;

    if model.input_dim() == 1 && grid >= 2 {
        let mut fan = String::from("x");
        for tau in spec.config.levels.as_slice() {
            fan.push_str(&format!(",q_{tau}"));
        }
        fan.push('\n');
        for i in 0..grid {
            let x = i as f64 / (grid - 1) as f64;
            let q = predictor.predict_one(&[x])?;
            fan.push_str(&x.to_string());
            for v in q.quantiles() {
                fan.push_str(&format!(",{v}"));
            }
            fan.push('\n');
        }
        config::write_output(&dir, "pred_curves.csv", &fan)?;
    }

    let record = RunRecord {
        model,
        method,
        n: spec.n,
        rep: 0,
        seed,
        config: spec.config.clone(),
        report: report.clone(),
    };
    config::write_output(&dir, "run.jsonl", &det_jsonl(&[record])?)?;

    let mid = report.per_level_l1.len() / 2;
    println!(
        "trained {model}/{method} on n={}: median-level L1 {:.4}, crossing fraction {:.4}, \
         best epoch {} of {} ({:.1}s fit, {:.1}s eval); outputs in {}",
        spec.n,
        report.per_level_l1[mid],
        report.crossing_fraction,
        report.best_epoch,
        report.epochs_run,
        report.train_wall_secs,
        report.eval_wall_secs,
        dir.display()
    );
    Ok(())
}

// --------------------------------------------------------------- replicate

const REPLICATE_KEYS: &[&str] = &[
    "models", "methods", "n", "reps", "k", "levels", "hidden", "loss", "kappa", "batch_size",
    "max_epochs", "patience", "lr", "beta1", "beta2", "test_size", "workers", "seed", "out_dir",
];

pub fn replicate(globals: &Globals, args: &ReplicateArgs) -> Result<(), CliError> {
    let file = &globals.file;
    config::check_keys(file, REPLICATE_KEYS)?;

    let mut models = vec![SimModel::Wave];
    if let Some(raw) = file.get("models") {
        models = raw.split(',').map(|m| SimModel::parse(m.trim())).collect::<Result<_, _>>()?;
    }
    if let Some(raw) = &args.models {
        models = raw.split(',').map(|m| SimModel::parse(m.trim())).collect::<Result<_, _>>()?;
    }
    let mut methods = vec![HeadKind::NqElu, HeadKind::DqrStar];
    if let Some(raw) = file.get("methods") {
        methods = raw.split(',').map(|m| HeadKind::parse(m.trim())).collect::<Result<_, _>>()?;
    }
    if let Some(raw) = &args.methods {
        methods = raw.split(',').map(|m| HeadKind::parse(m.trim())).collect::<Result<_, _>>()?;
    }
    if models.is_empty() || methods.is_empty() {
        return Err(CliError::Config("need at least one model and one method".into()));
    }
    let mut reps = 10usize;
    if let Some(raw) = file.get("reps") {
        reps = config::value("reps", raw)?;
    }
    if let Some(v) = args.reps {
        reps = v;
    }
    let mut workers: Option<usize> = None;
    if let Some(raw) = file.get("workers") {
        workers = Some(config::value("workers", raw)?);
    }
    if let Some(v) = globals.workers {
        workers = Some(v);
    }

    let seed = resolve_seed(file, globals.seed)?;
    // The hidden default must not depend on which model of a multi-model
    // sweep resolves it; leave it empty so each cell picks its own.
    let explicit_hidden = file.contains_key("hidden") || args.hidden.is_some();
    let spec = resolve_fit(
        file,
        seed,
        models[0],
        methods[0],
        args.n,
        args.k,
        args.levels.as_deref(),
        args.hidden.as_deref(),
        args.loss.as_deref(),
        args.kappa,
        args.batch_size,
        args.max_epochs,
        args.patience,
        args.lr,
        args.test_size,
    )?;
    let mut template = spec.config.clone();
    if !explicit_hidden {
        template.hidden = Vec::new();
    }

    let dir = config::resolve_out_dir(globals.out_dir.as_deref(), file, "replicate");
    let mut extra = vec![
        kv("models", join(&models)),
        kv("methods", join(&methods)),
        kv("reps", reps),
        kv("out_dir", dir.display()),
    ];
    if let Some(w) = workers {
        extra.push(kv("workers", w));
    }
    let mut pairs = fit_echo(&spec, extra);
    if !explicit_hidden {
        // fit_echo echoed models[0]'s default; the sweep resolves per cell.
        pairs.retain(|(key, _)| key != "hidden");
        pairs.push(kv("hidden", "auto"));
    }
    config::echo_config(&dir, "replicate", &pairs)?;

    let opts = ReplicateOptions { test_size: spec.test_size, workers };
    let summary = trainer::replicate(&models, &methods, spec.n, reps, seed, &template, &opts)?;

    config::write_output(&dir, "summary.csv", &summary.summary_csv())?;
    config::write_output(&dir, "runs.jsonl", &det_jsonl(&summary.runs)?)?;
    if !summary.failures.is_empty() {
        config::write_output(&dir, "failures.jsonl", &det_jsonl(&summary.failures)?)?;
    }
    println!(
        "replicated {} cells x {reps} reps: {} runs completed, {} failed; summary in {}",
        models.len() * methods.len(),
        summary.runs.len(),
        summary.failures.len(),
        dir.display()
    );
    if !summary.failures.is_empty() {
        return Err(CliError::Runtime(format!(
            "{} of {} runs failed; see failures.jsonl (completed-run summary was written)",
            summary.failures.len(),
            models.len() * methods.len() * reps
        )));
    }
    Ok(())
}

// --------------------------------------------------------------------- drl

const DRL_KEYS: &[&str] = &[
    "gamma", "reward_df", "reward_scale", "step", "drift_noise", "episode_len", "reward_shape",
    "iters", "n", "k", "hidden", "epsilon", "fit_epochs", "batch_size", "lr", "beta1", "beta2",
    "loss", "kappa", "warm_start", "oracle_grid", "policy_grid", "rollouts", "horizon", "seed",
    "out_dir",
];

fn parse_shape(raw: &str) -> Result<RewardShape, CliError> {
    match raw {
        "wiggle" => Ok(RewardShape::Wiggle),
        "symmetric" => Ok(RewardShape::Symmetric),
        other => Err(CliError::Config(format!(
            "unknown reward shape `{other}` (expected wiggle or symmetric)"
        ))),
    }
}

pub fn drl_run(globals: &Globals, args: &DrlArgs) -> Result<(), CliError> {
    let file = &globals.file;
    config::check_keys(file, DRL_KEYS)?;

    let mut mdp = MdpSpec::toy();
    if let Some(raw) = file.get("gamma") {
        mdp.gamma = config::value("gamma", raw)?;
    }
    if let Some(v) = args.gamma {
        mdp.gamma = v;
    }
    if let Some(raw) = file.get("reward_df") {
        mdp.reward_df = config::value("reward_df", raw)?;
    }
    if let Some(v) = args.reward_df {
        mdp.reward_df = v;
    }
    if let Some(raw) = file.get("reward_scale") {
        mdp.reward_scale = config::value("reward_scale", raw)?;
    }
    if let Some(raw) = file.get("step") {
        mdp.step = config::value("step", raw)?;
    }
    if let Some(raw) = file.get("drift_noise") {
        mdp.drift_noise = config::value("drift_noise", raw)?;
    }
    if let Some(raw) = file.get("episode_len") {
        mdp.episode_len = config::value("episode_len", raw)?;
    }
    if let Some(raw) = file.get("reward_shape") {
        mdp.reward_shape = parse_shape(raw)?;
    }

    let mut iters = 20usize;
    if let Some(raw) = file.get("iters") {
        iters = config::value("iters", raw)?;
    }
    if let Some(v) = args.iters {
        iters = v;
    }
    let mut n = 2000usize;
    if let Some(raw) = file.get("n") {
        n = config::value("n", raw)?;
    }
    if let Some(v) = args.n {
        n = v;
    }
    let mut k = 32usize;
    if let Some(raw) = file.get("k") {
        k = config::value("k", raw)?;
    }
    if let Some(v) = args.k {
        k = v;
    }

    let mut cfg = DrlConfig::default();
    if let Some(raw) = file.get("hidden") {
        cfg.hidden = config::value_list("hidden", raw)?;
    }
    if let Some(raw) = &args.hidden {
        cfg.hidden = config::value_list("hidden", raw)?;
    }
    if let Some(raw) = file.get("epsilon") {
        cfg.epsilon = config::value("epsilon", raw)?;
    }
    if let Some(v) = args.epsilon {
        cfg.epsilon = v;
    }
    if let Some(raw) = file.get("fit_epochs") {
        cfg.fit_epochs = config::value("fit_epochs", raw)?;
    }
    if let Some(v) = args.fit_epochs {
        cfg.fit_epochs = v;
    }
    if let Some(raw) = file.get("batch_size") {
        cfg.batch_size = config::value("batch_size", raw)?;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(raw) = file.get("lr") {
        cfg.lr = config::value("lr", raw)?;
    }
    if let Some(v) = args.lr {
        cfg.lr = v;
    }
    if let Some(raw) = file.get("beta1") {
        cfg.beta1 = config::value("beta1", raw)?;
    }
    if let Some(raw) = file.get("beta2") {
        cfg.beta2 = config::value("beta2", raw)?;
    }
    let mut loss_name = "check".to_string();
    if let Some(raw) = file.get("loss") {
        loss_name = raw.clone();
    }
    if let Some(raw) = &args.loss {
        loss_name = raw.clone();
    }
    let mut kappa = 1.0f64;
    if let Some(raw) = file.get("kappa") {
        kappa = config::value("kappa", raw)?;
    }
    cfg.loss = LossSpec::parse(&loss_name, kappa)?;
    if let Some(raw) = file.get("warm_start") {
        cfg.warm_start = config::value_bool("warm_start", raw)?;
    }
    if args.warm_start {
        cfg.warm_start = true;
    }
    if let Some(raw) = file.get("oracle_grid") {
        cfg.oracle_grid = config::value("oracle_grid", raw)?;
    }
    cfg.seed = resolve_seed(file, globals.seed)?;

    let mut policy_grid = 101usize;
    if let Some(raw) = file.get("policy_grid") {
        policy_grid = config::value("policy_grid", raw)?;
    }
    if let Some(v) = args.policy_grid {
        policy_grid = v;
    }
    let mut rollouts = 10_000usize;
    if let Some(raw) = file.get("rollouts") {
        rollouts = config::value("rollouts", raw)?;
    }
    if let Some(v) = args.rollouts {
        rollouts = v;
    }
    let mut horizon = 150usize;
    if let Some(raw) = file.get("horizon") {
        horizon = config::value("horizon", raw)?;
    }
    if let Some(v) = args.horizon {
        horizon = v;
    }

    let dir = config::resolve_out_dir(globals.out_dir.as_deref(), file, "drl");
    config::echo_config(
        &dir,
        "drl",
        &[
            kv("gamma", mdp.gamma),
            kv("reward_df", mdp.reward_df),
            kv("reward_scale", mdp.reward_scale),
            kv("step", mdp.step),
            kv("drift_noise", mdp.drift_noise),
            kv("episode_len", mdp.episode_len),
            kv(
                "reward_shape",
                match mdp.reward_shape {
                    RewardShape::Wiggle => "wiggle",
                    RewardShape::Symmetric => "symmetric",
                },
            ),
            kv("iters", iters),
            kv("n", n),
            kv("k", k),
            kv("hidden", join(&cfg.hidden)),
            kv("epsilon", cfg.epsilon),
            kv("fit_epochs", cfg.fit_epochs),
            kv("batch_size", cfg.batch_size),
            kv("lr", cfg.lr),
            kv("beta1", cfg.beta1),
            kv("beta2", cfg.beta2),
            kv("loss", cfg.loss.kind),
            kv("kappa", cfg.loss.kappa),
            kv("warm_start", cfg.warm_start),
            kv("oracle_grid", cfg.oracle_grid),
            kv("policy_grid", policy_grid),
            kv("rollouts", rollouts),
            kv("horizon", horizon),
            kv("seed", cfg.seed),
            kv("out_dir", dir.display()),
        ],
    )?;

    let (iterate, diags) = drl::run_algorithm1(&mdp, iters, n, k, &cfg)?;
    config::write_output(&dir, "diagnostics.jsonl", &det_jsonl(&diags)?)?;

    let table = drl::policy_table(&iterate, policy_grid)?;
    let n_actions = iterate.n_actions();
    let mut policy_csv = String::from("state,action");
    for a in 0..n_actions {
        policy_csv.push_str(&format!(",q_{a}"));
    }
    policy_csv.push('\n');
    for row in &table {
        policy_csv.push_str(&format!("{},{}", row.state, row.action));
        for q in &row.q {
            policy_csv.push_str(&format!(",{q}"));
        }
        policy_csv.push('\n');
    }
    config::write_output(&dir, "policy.csv", &policy_csv)?;

    let oracle = drl::dp_oracle(&mdp, cfg.oracle_grid)?;
    let agreement = drl::policy_agreement(&iterate, &oracle)?;
    let j_mc = drl::mc_policy_value(
        &iterate,
        &mdp,
        rollouts,
        horizon,
        derive_seed(cfg.seed, SALT_CLI_ROLLOUT, 0),
    )?;
    let wall: f64 = diags.iter().map(|d| d.wall_secs).sum();
    println!(
        "ran {iters} iterations (n={n}, k={k}) in {wall:.1}s: oracle agreement {agreement:.3}, \
         policy value {j_mc:.4} vs optimal {:.4} ({:+.2}%); outputs in {}",
        oracle.j_star,
        100.0 * (j_mc - oracle.j_star) / oracle.j_star.abs(),
        dir.display()
    );
    Ok(())
}

// -------------------------------------------------------------------- plot

const PLOT_KEYS: &[&str] = &["kind", "input", "data", "output", "out_dir"];

pub fn plot_cmd(globals: &Globals, args: &PlotArgs) -> Result<(), CliError> {
    let file = &globals.file;
    config::check_keys(file, PLOT_KEYS)?;

    let mut kind = "fan".to_string();
    if let Some(raw) = file.get("kind") {
        kind = raw.clone();
    }
    if let Some(raw) = &args.kind {
        kind = raw.clone();
    }
    let mut input: Option<PathBuf> = file.get("input").map(PathBuf::from);
    if let Some(p) = &args.input {
        input = Some(p.clone());
    }
    let Some(input) = input else {
        return Err(CliError::Config("plot needs an `input` CSV".into()));
    };
    let mut data: Option<PathBuf> = file.get("data").map(PathBuf::from);
    if let Some(p) = &args.data {
        data = Some(p.clone());
    }
    let mut output = "plot.svg".to_string();
    if let Some(raw) = file.get("output") {
        output = raw.clone();
    }
    if let Some(raw) = &args.output {
        output = raw.clone();
    }

    // Parse all inputs before creating anything, so a bad input leaves no
    // output file or directory behind.
    let (series, scatter, title, x_label, y_label) = match kind.as_str() {
        "fan" => fan_plot(&input, data.as_deref())?,
        "error" => error_plot(&input)?,
        other => {
            return Err(CliError::Config(format!(
                "unknown plot kind `{other}` (expected fan or error)"
            )))
        }
    };
    let svg = plot::line_chart(&title, &x_label, &y_label, &series, &scatter)?;

    let dir = config::resolve_out_dir(globals.out_dir.as_deref(), file, "plot");
    let mut pairs = vec![
        kv("kind", &kind),
        kv("input", input.display()),
        kv("output", &output),
        kv("out_dir", dir.display()),
    ];
    if let Some(d) = &data {
        pairs.push(kv("data", d.display()));
    }
    config::echo_config(&dir, "plot", &pairs)?;
    let path = config::write_output(&dir, &output, &svg)?;
    println!("wrote {} ({} series)", path.display(), series.len());
    Ok(())
}

type PlotData = (Vec<Series>, Vec<(f64, f64)>, String, String, String);

/// Quantile fan: first column is x, every further column one curve.
fn fan_plot(input: &Path, data: Option<&Path>) -> Result<PlotData, CliError> {
    let csv = Csv::read(input)?;
    if csv.header.len() < 2 || csv.header[0] != "x" {
        return Err(CliError::Config(format!(
            "{}: fan input must have columns x,<curve>,... (got: {})",
            input.display(),
            csv.header.join(", ")
        )));
    }
    let mut series: Vec<Series> = csv.header[1..]
        .iter()
        .map(|name| Series { label: name.clone(), points: Vec::new() })
        .collect();
    for row in 0..csv.rows.len() {
        let x = csv.float(row, 0)?;
        for (col, s) in series.iter_mut().enumerate() {
            s.points.push((x, csv.float(row, col + 1)?));
        }
    }
    let mut scatter = Vec::new();
    if let Some(path) = data {
        let d = Csv::read(path)?;
        if d.header != ["x_1", "y"] {
            return Err(CliError::Config(format!(
                "{}: scatter data must be a univariate dataset with columns x_1,y (got: {})",
                path.display(),
                d.header.join(", ")
            )));
        }
        for row in 0..d.rows.len() {
            scatter.push((d.float(row, 0)?, d.float(row, 1)?));
        }
    }
    let title = format!(
        "Conditional quantile curves ({})",
        input.file_stem().and_then(|s| s.to_str()).unwrap_or("input")
    );
    Ok((series, scatter, title, "x".into(), "quantile".into()))
}

/// Error-by-level curves from a replication summary: one line per
/// (model, method) pair.
fn error_plot(input: &Path) -> Result<PlotData, CliError> {
    let csv = Csv::read(input)?;
    let model_col = csv.column("model")?;
    let method_col = csv.column("method")?;
    let tau_col = csv.column("tau")?;
    let l1_col = csv.column("l1_mean")?;
    let mut series: Vec<Series> = Vec::new();
    for row in 0..csv.rows.len() {
        let label = format!("{}/{}", csv.rows[row][model_col], csv.rows[row][method_col]);
        let point = (csv.float(row, tau_col)?, csv.float(row, l1_col)?);
        match series.iter_mut().find(|s| s.label == label) {
            Some(s) => s.points.push(point),
            None => series.push(Series { label, points: vec![point] }),
        }
    }
    for s in &mut series {
        s.points.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    Ok((
        series,
        Vec::new(),
        "Mean absolute error by quantile level".into(),
        "tau".into(),
        "L1 error".into(),
    ))
}
