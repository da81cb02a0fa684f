//! Experiment commands behind the `mergelab` binary.

pub mod config;

use std::fs;
use std::path::{Path, PathBuf};

use mergelab::bounds::{self, BoundReport};
use mergelab::checkpoint::{self, Metric, ResultRow};
use mergelab::merge::{
    ens_features, evaluate_ensemble, greedy_ensemble, greedy_soup, uniform_soup, EnsembleLevel, FeatureHead,
};
use mergelab::model::{init_model, template_rows};
use mergelab::synth::{self, SyntheticData};
use mergelab::tensor::cosine_similarity;
use mergelab::train::{self, evaluate, evaluate_with, TrainLog};
use mergelab::{Activation, LabeledSet, MergeMethod, Model, ModelPool, RngStream};
use rayon::prelude::*;

pub use config::ExperimentConfig;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("{}", config_message(*line, msg))]
    Config { line: usize, msg: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] mergelab::Error),
}

fn config_message(line: usize, msg: &str) -> String {
    if line == 0 {
        format!("config: {msg}")
    } else {
        format!("config line {line}: {msg}")
    }
}

impl HarnessError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_owned(),
            source,
        }
    }

    /// 2 for configuration problems, 3 for file-system and checkpoint failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            HarnessError::Config { .. } => 2,
            HarnessError::Io { .. } => 3,
            HarnessError::Core(mergelab::Error::Io { .. } | mergelab::Error::Checkpoint(_)) => 3,
            HarnessError::Core(_) => 2,
        }
    }
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Train,
    Compare,
    Magnitude,
    Templates,
    Bounds,
    Crosstask,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Compare => "compare",
            Command::Magnitude => "magnitude",
            Command::Templates => "templates",
            Command::Bounds => "bounds",
            Command::Crosstask => "crosstask",
        }
    }

    /// CSV files the command writes into the output directory.
    pub fn csv_outputs(self) -> &'static [&'static str] {
        match self {
            Command::Train => &["train_log.csv"],
            Command::Compare => &["compare.csv"],
            Command::Magnitude => &["magnitude.csv", "magnitude_scatter.csv"],
            Command::Templates => &["template_cosine.csv"],
            Command::Bounds => &["bounds.csv"],
            Command::Crosstask => &["crosstask.csv"],
        }
    }
}

/// Result of a command. `violations` counts failed exact checks (or CSV
/// mismatches under `verify`); a nonzero count maps to exit code 1.
#[derive(Debug, Clone, Default)]
pub struct Outcome {
    pub violations: usize,
    pub summary: Vec<String>,
}

pub fn run(cmd: Command, cfg: &ExperimentConfig) -> Result<Outcome> {
    let out = &cfg.out_dir;
    fs::create_dir_all(out).map_err(|e| HarnessError::io(out, e))?;
    write_file(&out.join("resolved_config.txt"), cfg.to_resolved_text().as_bytes())?;
    for name in cmd.csv_outputs() {
        remove_if_exists(&out.join(name))?;
    }
    match cmd {
        Command::Train => cmd_train(cfg),
        Command::Compare => cmd_compare(cfg),
        Command::Magnitude => cmd_magnitude(cfg),
        Command::Templates => cmd_templates(cfg),
        Command::Bounds => cmd_bounds(cfg),
        Command::Crosstask => cmd_crosstask(cfg),
    }
}

/// Re-runs `cmd` into `<out_dir>/verify` and compares every CSV byte for byte
/// with the copy in `out_dir`, running the command there first if its CSVs
/// are missing.
pub fn verify(cmd: Command, cfg: &ExperimentConfig) -> Result<Outcome> {
    let primary = &cfg.out_dir;
    let have_all = cmd.csv_outputs().iter().all(|n| primary.join(n).is_file());
    let mut summary = Vec::new();
    if !have_all {
        summary.push(format!("no previous {} outputs in {}; running once", cmd.name(), primary.display()));
        run(cmd, cfg)?;
    }
    let rerun_cfg = ExperimentConfig {
        out_dir: primary.join("verify"),
        ..cfg.clone()
    };
    run(cmd, &rerun_cfg)?;
    let mut violations = 0;
    for name in cmd.csv_outputs() {
        let a = read_file(&primary.join(name))?;
        let b = read_file(&rerun_cfg.out_dir.join(name))?;
        if a == b {
            summary.push(format!("{name}: identical ({} bytes)", a.len()));
        } else {
            violations += 1;
            summary.push(format!("{name}: MISMATCH"));
        }
    }
    Ok(Outcome { violations, summary })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| HarnessError::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| HarnessError::io(path, e))
}

fn remove_if_exists(path: &Path) -> Result<()> {
    match fs::remove_file(path) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(HarnessError::io(path, e)),
        _ => Ok(()),
    }
}

// ---------------------------------------------------------------------------
// Pools

/// Trains pool member `i`: init from stream `(master_seed, i)` (or stream 0
/// with `shared_init`), shuffles from stream `i`, parameters rounded to f32.
pub fn train_member(cfg: &ExperimentConfig, i: usize, train_set: &LabeledSet, val: &LabeledSet) -> Result<(Model, TrainLog)> {
    let init_stream = if cfg.shared_init { 0 } else { i as u64 };
    let mut model = init_model(&cfg.widths(), cfg.activation, &mut RngStream::new(cfg.master_seed, init_stream))?;
    model.meta.stream = i as u64;
    let (trained, log) = train::train(&model, train_set, val, &cfg.train_config())?;
    Ok((trained.quantized_f32(), log))
}

pub fn train_pool(cfg: &ExperimentConfig, data: &SyntheticData) -> Result<(ModelPool, Vec<TrainLog>)> {
    let members = (0..cfg.pool_size)
        .into_par_iter()
        .map(|i| train_member(cfg, i, &data.train, &data.val))
        .collect::<Result<Vec<_>>>()?;
    let (models, logs): (Vec<_>, Vec<_>) = members.into_iter().unzip();
    Ok((ModelPool::new(models)?, logs))
}

/// Validation and test accuracy (fractions) of `method` over `pool`.
pub fn evaluate_method(pool: &ModelPool, method: MergeMethod, val: &LabeledSet, test: &LabeledSet) -> Result<(f64, f64)> {
    let models = pool.refs();
    let both_ens = |m: &[&Model], level| -> Result<(f64, f64)> {
        Ok((
            evaluate_ensemble(m, val, level)?.accuracy,
            evaluate_ensemble(m, test, level)?.accuracy,
        ))
    };
    Ok(match method {
        MergeMethod::UniformSoup => {
            let soup = uniform_soup(&models, None)?;
            (evaluate(&soup, val)?.accuracy, evaluate(&soup, test)?.accuracy)
        }
        MergeMethod::GreedySoup => {
            let (soup, sel) = greedy_soup(pool, val)?;
            (sel.val_accuracy, evaluate(&soup, test)?.accuracy)
        }
        MergeMethod::EnsLogits => both_ens(&models, EnsembleLevel::Logits)?,
        MergeMethod::EnsFeatures => both_ens(&models, EnsembleLevel::Features)?,
        MergeMethod::EnsFeaturesStar => {
            let f = |x: &_| ens_features(&models, x, FeatureHead::FirstModel);
            (evaluate_with(val, f)?.accuracy, evaluate_with(test, f)?.accuracy)
        }
        MergeMethod::GreedyEnsLogits | MergeMethod::GreedyEnsFeatures => {
            let level = if method == MergeMethod::GreedyEnsLogits {
                EnsembleLevel::Logits
            } else {
                EnsembleLevel::Features
            };
            let sel = greedy_ensemble(pool, val, level)?;
            let chosen = pool.select(&sel.selected);
            (sel.val_accuracy, evaluate_ensemble(&chosen, test, level)?.accuracy)
        }
    })
}

fn percent(x: f64) -> f64 {
    100.0 * x
}

fn row(cfg: &ExperimentConfig, experiment: &str, method: &str, n_models: usize, factor: f64, metric: Metric, value: f64) -> ResultRow {
    ResultRow {
        experiment: experiment.into(),
        method: method.into(),
        n_models,
        factor,
        seed: cfg.master_seed,
        metric,
        value,
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

// ---------------------------------------------------------------------------
// Commands

fn cmd_train(cfg: &ExperimentConfig) -> Result<Outcome> {
    let data = synth::generate(&cfg.dataset_spec())?;
    let (pool, logs) = train_pool(cfg, &data)?;
    let mut summary = Vec::new();
    for (i, m) in pool.models().iter().enumerate() {
        let name = format!("model_{i:03}.mrgl");
        checkpoint::write_checkpoint(m, &cfg.out_dir.join(&name))?;
        summary.push(format!("{name}: val accuracy {:.2}%", percent(evaluate(m, &data.val)?.accuracy)));
    }
    let indexed: Vec<_> = logs.iter().enumerate().collect();
    checkpoint::append_train_logs(&indexed, &cfg.out_dir.join("train_log.csv"))?;
    Ok(Outcome { violations: 0, summary })
}

fn cmd_compare(cfg: &ExperimentConfig) -> Result<Outcome> {
    let data = synth::generate(&cfg.dataset_spec())?;
    let (pool, _) = train_pool(cfg, &data)?;
    let rows = compare_rows(cfg, &pool, &data, 1.0, "compare")?;
    let summary = rows
        .iter()
        .filter(|r| r.experiment == "compare" && r.n_models == cfg.pool_size)
        .map(|r| format!("{:<20} {:>7.2}%", r.method, r.value))
        .collect();
    checkpoint::append_csv(&rows, &cfg.out_dir.join("compare.csv"))?;
    Ok(Outcome { violations: 0, summary })
}

/// Individual, per-average and per-method accuracy rows for one pool. Test
/// accuracy goes under `experiment`, validation under `{experiment}_val`.
fn compare_rows(cfg: &ExperimentConfig, pool: &ModelPool, data: &SyntheticData, factor: f64, experiment: &str) -> Result<Vec<ResultRow>> {
    let val_exp = format!("{experiment}_val");
    let individual = pool
        .models()
        .par_iter()
        .map(|m| Ok((evaluate(m, &data.val)?.accuracy, evaluate(m, &data.test)?.accuracy)))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for (i, (val, test)) in individual.iter().enumerate() {
        let name = format!("model_{i:03}");
        rows.push(row(cfg, experiment, &name, 1, factor, Metric::Accuracy, percent(*test)));
        rows.push(row(cfg, &val_exp, &name, 1, factor, Metric::Accuracy, percent(*val)));
    }
    let methods = cfg.methods();
    for &n in &cfg.n_models() {
        let sub = pool.prefix(n)?;
        let tests: Vec<f64> = individual[..n].iter().map(|r| r.1).collect();
        let vals: Vec<f64> = individual[..n].iter().map(|r| r.0).collect();
        rows.push(row(cfg, experiment, "perf_ave", n, factor, Metric::Accuracy, percent(mean(&tests))));
        rows.push(row(cfg, &val_exp, "perf_ave", n, factor, Metric::Accuracy, percent(mean(&vals))));
        let results = methods
            .par_iter()
            .map(|&m| evaluate_method(&sub, m, &data.val, &data.test))
            .collect::<Result<Vec<_>>>()?;
        for (m, (val, test)) in methods.iter().zip(results) {
            rows.push(row(cfg, experiment, m.tag(), n, factor, Metric::Accuracy, percent(test)));
            rows.push(row(cfg, &val_exp, m.tag(), n, factor, Metric::Accuracy, percent(val)));
        }
    }
    Ok(rows)
}

pub const SCATTER_HEADER: &str = "factor,n_models,batch,uniform_soup,ens_logits";

fn cmd_magnitude(cfg: &ExperimentConfig) -> Result<Outcome> {
    let data = synth::generate(&cfg.dataset_spec())?;
    let (pool, _) = train_pool(cfg, &data)?;
    let mut rows = Vec::new();
    let mut scatter = String::from(SCATTER_HEADER);
    scatter.push('\n');
    let mut summary = Vec::new();
    for &c in &cfg.factor_grid {
        let scaled = pool.scaled(c);
        rows.extend(compare_rows(cfg, &scaled, &data, c, "magnitude")?);
        for &n in &cfg.n_models() {
            let sub = scaled.prefix(n)?;
            let soup = evaluate_method(&sub, MergeMethod::UniformSoup, &data.val, &data.test)?.1;
            let ens = evaluate_method(&sub, MergeMethod::EnsLogits, &data.val, &data.test)?.1;
            let gap = percent(soup) - percent(ens);
            rows.push(row(cfg, "magnitude", MergeMethod::UniformSoup.tag(), n, c, Metric::Gap, gap));
            if n == cfg.pool_size {
                summary.push(format!("factor {c:>6}: uniform_soup - ens_logits = {gap:+.2} points"));
            }
        }
        // per-batch pairs at full pool size
        let models = scaled.refs();
        let soup = uniform_soup(&models, None)?;
        let batch = cfg.scatter_batch;
        for (b, start) in (0..data.test.len()).step_by(batch).enumerate() {
            let chunk = data.test.slice(start, (start + batch).min(data.test.len()))?;
            let s = evaluate(&soup, &chunk)?.accuracy;
            let e = evaluate_ensemble(&models, &chunk, EnsembleLevel::Logits)?.accuracy;
            scatter.push_str(&format!(
                "{},{},{b},{},{}\n",
                checkpoint::format_sig6(c),
                cfg.pool_size,
                checkpoint::format_sig6(percent(s)),
                checkpoint::format_sig6(percent(e))
            ));
        }
    }
    checkpoint::append_csv(&rows, &cfg.out_dir.join("magnitude.csv"))?;
    write_file(&cfg.out_dir.join("magnitude_scatter.csv"), scatter.as_bytes())?;
    Ok(Outcome { violations: 0, summary })
}

pub const COSINE_HEADER: &str = "class,template_vs_class_mean,template_vs_prototype";

/// Cosine of each trained template row with its class mean and prototype.
pub struct TemplateReport {
    pub classifier: Model,
    pub vs_class_mean: Vec<f64>,
    pub vs_prototype: Vec<f64>,
}

/// Trains the linear classifier used by `templates` (init stream 0).
pub fn train_template_classifier(cfg: &ExperimentConfig, data: &SyntheticData) -> Result<TemplateReport> {
    let spec = cfg.dataset_spec();
    let widths = [spec.dim(), spec.n_classes];
    let init = init_model(&widths, Activation::Identity, &mut RngStream::new(cfg.master_seed, 0))?;
    let (classifier, _) = train::train(&init, &data.train, &data.val, &cfg.train_config())?;
    let rows = template_rows(&classifier)?;
    let means = synth::class_means(&data.train)?;
    let mut vs_class_mean = Vec::new();
    let mut vs_prototype = Vec::new();
    for k in 0..spec.n_classes {
        vs_class_mean.push(cosine_similarity(rows.row(k), means.row(k)));
        vs_prototype.push(cosine_similarity(rows.row(k), data.prototypes.row(k)));
    }
    Ok(TemplateReport {
        classifier,
        vs_class_mean,
        vs_prototype,
    })
}

fn cmd_templates(cfg: &ExperimentConfig) -> Result<Outcome> {
    let spec = cfg.dataset_spec();
    let data = synth::generate(&spec)?;
    let report = train_template_classifier(cfg, &data)?;
    let k = spec.n_classes;
    let (h, w, ch) = (spec.height, spec.width, spec.channels);
    let ext = if ch == 1 { "pgm" } else { "ppm" };
    let cols = k.div_ceil(2);
    let write_grid = |t: &mergelab::Tensor, name: &str, cols: usize| -> Result<()> {
        let bytes = checkpoint::encode_image_grid(t, h, w, ch, cols)?;
        write_file(&cfg.out_dir.join(format!("{name}.{ext}")), &bytes)
    };
    write_grid(&synth::class_means(&data.train)?, "class_means", cols)?;
    let rows = template_rows(&report.classifier)?;
    write_grid(&rows, "templates", cols)?;
    let pairs: Vec<(usize, usize)> = if cfg.template_self_merge {
        (0..k).map(|i| (i, i)).collect()
    } else {
        (0..k / 2).map(|i| (i, i + k / 2)).collect()
    };
    let merged = pairs
        .iter()
        .map(|&(i, j)| mergelab::merge::merge_templates(&report.classifier, i, j).map(|t| t.into_data()))
        .collect::<mergelab::Result<Vec<_>>>()?;
    let merged = mergelab::Tensor::new(vec![pairs.len(), spec.dim()], merged.concat())?;
    let merged_cols = if cfg.template_self_merge { cols } else { pairs.len() };
    write_grid(&merged, "merged_templates", merged_cols)?;
    checkpoint::write_checkpoint(&report.classifier, &cfg.out_dir.join("classifier.mrgl"))?;

    let mut csv = String::from(COSINE_HEADER);
    csv.push('\n');
    for c in 0..k {
        csv.push_str(&format!(
            "{c},{},{}\n",
            checkpoint::format_sig6(report.vs_class_mean[c]),
            checkpoint::format_sig6(report.vs_prototype[c])
        ));
    }
    write_file(&cfg.out_dir.join("template_cosine.csv"), csv.as_bytes())?;
    let min = report.vs_prototype.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(Outcome {
        violations: 0,
        summary: vec![format!("min template/prototype cosine {min:.4}")],
    })
}

/// Every bounds check the `bounds` command runs, in output order.
pub fn bound_reports(cfg: &ExperimentConfig) -> Result<Vec<BoundReport>> {
    let b = &cfg.bounds;
    let seed = cfg.master_seed;
    let mut reports = vec![
        bounds::fuzz_avg_max_norm(b.fuzz_pairs, seed, cfg.inject_violation)?,
        bounds::fuzz_variance_inequality(b.fuzz_pairs, seed),
    ];
    for (s1, s2) in [(1.0, 1.0), (1.0, 4.0), (0.01, 2.0)] {
        let r = bounds::check_avg_variance(s1, s2, b.variance_entries, seed)?;
        reports.push(BoundReport {
            check: "avg_variance".into(),
            params: format!("s1sq={s1};s2sq={s2};entries={}", b.variance_entries),
            bound_value: r.formula,
            empirical: r.empirical,
            violation_rate: if r.matches_formula() { 0.0 } else { 1.0 },
            guaranteed_prob: 1.0,
            holds: r.matches_formula() && r.inequality_holds(),
            exact: false,
        });
    }
    for &tau in &b.taus {
        let sigma = 1.0 / (b.width as f64).sqrt();
        reports.push(bounds::lemma1_monte_carlo(b.width, sigma, tau, b.c_s, b.trials, seed)?);
    }
    for &tau in &b.taus {
        let bc = bounds::BoundConfig {
            tau,
            ..b.bound_config(seed)
        };
        reports.extend(bounds::check_property1(&bc)?.reports(&bc));
    }
    reports.push(bounds::fuzz_lipschitz_chain(b.chain_nets, 5, &[2, 8, 16, 32, 64], Activation::Relu, seed)?);
    for &depth in &b.theorem_depths {
        for &width in &b.theorem_widths {
            let bc = bounds::BoundConfig {
                depth,
                width,
                trials: b.theorem_trials,
                ..b.bound_config(seed)
            };
            reports.push(bounds::check_theorem1(&bc)?.report(&bc));
        }
    }
    Ok(reports)
}

fn cmd_bounds(cfg: &ExperimentConfig) -> Result<Outcome> {
    let reports = bound_reports(cfg)?;
    checkpoint::append_bound_csv(&reports, &cfg.out_dir.join("bounds.csv"))?;
    let text: Vec<String> = reports.iter().map(BoundReport::to_text).collect();
    write_file(&cfg.out_dir.join("bounds.txt"), (text.join("\n") + "\n").as_bytes())?;
    let violations = reports.iter().filter(|r| r.exact && !r.holds).count();
    Ok(Outcome { violations, summary: text })
}

fn cmd_crosstask(cfg: &ExperimentConfig) -> Result<Outcome> {
    let spec1 = cfg.dataset_spec();
    let spec2 = spec1.cross_task(cfg.task2_seed);
    let task1 = synth::generate(&spec1)?;
    let task2 = synth::generate(&spec2)?;
    let (a, b) = rayon::join(
        || train_member(cfg, 0, &task1.train, &task1.val),
        || train_member(cfg, 1, &task2.train, &task2.val),
    );
    let pool = ModelPool::new(vec![a?.0, b?.0])?;
    let test = &task1.test;
    let mut rows = Vec::new();
    for (name, m) in ["model1", "model2"].iter().zip(pool.models()) {
        rows.push(row(cfg, "crosstask", name, 1, 1.0, Metric::Accuracy, percent(evaluate(m, test)?.accuracy)));
    }
    let methods: Vec<MergeMethod> = [
        MergeMethod::UniformSoup,
        MergeMethod::EnsLogits,
        MergeMethod::EnsFeatures,
        MergeMethod::EnsFeaturesStar,
    ]
    .into_iter()
    .filter(|m| !cfg.hidden.is_empty() || !m.needs_features())
    .collect();
    for m in methods {
        let acc = evaluate_method(&pool, m, &task1.val, test)?.1;
        rows.push(row(cfg, "crosstask", m.tag(), 2, 1.0, Metric::Accuracy, percent(acc)));
    }
    let summary = rows.iter().map(|r| format!("{:<20} {:>7.2}%", r.method, r.value)).collect();
    checkpoint::append_csv(&rows, &cfg.out_dir.join("crosstask.csv"))?;
    Ok(Outcome { violations: 0, summary })
}
