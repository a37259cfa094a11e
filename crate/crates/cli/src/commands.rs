//! Subcommand arguments and handlers.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use subscale::alloc::{self, AllocBounds, Knob, StabilityOptions};
use subscale::density::{self, Clustering, EmbeddingSet, SelectionTarget};
use subscale::fit::{self, FitConfig, ResidualSpace};
use subscale::laws::{LawFamily, LawParams, PowerLawParams, SubOptimalParams};
use subscale::runs::{self, RunFormat, RunSeries, TrainingRun};
use subscale::synth::{self, BlobCluster, BlobSpec, CurveSpec, FixtureSpec, Noise, REFERENCE_MODEL_SIZES};

use crate::manifest::{absolute, Manifest, Outputs, MANIFEST_FILE};
use crate::svg::{Plot, Style};

/// `println!` that ignores a closed stdout (e.g. piped into `head`).
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

/// A failure of the analysis itself rather than of its inputs (exit code 2).
#[derive(Debug)]
pub struct AnalyticFailure(pub String);

impl fmt::Display for AnalyticFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for AnalyticFailure {}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum Command {
    /// Validate a run file, optionally smooth it, and write it back out.
    Ingest(IngestArgs),
    /// Fit one law (or compare several) on the first part of each run.
    Fit(FitArgs),
    /// Evaluate a fitted law on a run file.
    Predict(PredictArgs),
    /// Fit several laws and rank them by holdout MAPE.
    Compare(FitArgs),
    /// Compute-optimal model size and token count for a budget.
    Alloc(AllocArgs),
    /// Per-OTR-bin compute exponents, or a hyperparameter frontier with --knob.
    Sweep(SweepArgs),
    /// Cluster embeddings and report per-cluster and dataset density.
    Density(DensityArgs),
    /// Density-based pruning of an embedding set.
    Select(DensityArgs),
    /// Generate a seeded synthetic fixture.
    Synth(SynthArgs),
    /// Rerun a command from its manifest and compare the outputs byte for byte.
    Report(ReportArgs),
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct IngestArgs {
    /// Run file (.csv or .jsonl).
    #[arg(short, long)]
    pub input: PathBuf,
    /// Destination; the extension picks the format.
    #[arg(short, long)]
    pub output: PathBuf,
    /// Gaussian smoothing window, in checkpoints.
    #[arg(long)]
    pub smooth: Option<usize>,
    /// Kernel width; defaults to window / 4.
    #[arg(long, requires = "smooth")]
    pub sigma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct FitArgs {
    #[arg(short, long)]
    pub input: PathBuf,
    /// Law family; repeat to compare several.
    #[arg(short, long = "family")]
    pub families: Vec<LawFamily>,
    /// Flat JSON fit configuration; flags override its keys.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Fraction of each run used for fitting; the rest is the holdout.
    #[arg(long)]
    pub split: Option<f64>,
    /// Smooth losses with this window before splitting.
    #[arg(long)]
    pub smooth: Option<usize>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub tolerance: Option<f64>,
    /// Huber threshold on residuals.
    #[arg(long)]
    pub robust: Option<f64>,
    /// Fit raw loss residuals instead of log residuals.
    #[arg(long)]
    pub linear_residuals: bool,
    #[arg(long)]
    pub random_starts: Option<usize>,
    /// Fit all sub-optimal parameters at once instead of freezing k first.
    #[arg(long)]
    pub no_staged: bool,
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct PredictArgs {
    /// Law JSON, a fit_result.json, or an allocation.json.
    #[arg(short, long)]
    pub params: PathBuf,
    #[arg(short, long)]
    pub input: PathBuf,
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct AllocArgs {
    /// Law JSON, a fit_result.json, or an allocation.json.
    #[arg(short, long)]
    pub params: PathBuf,
    /// Training compute in FLOPs (C = 6ND).
    #[arg(short, long, allow_negative_numbers = true)]
    pub budget: f64,
    /// Also write the OTR sweep table and the loss-vs-size plot.
    #[arg(long, requires = "out")]
    pub sweep: bool,
    #[arg(long)]
    pub n_min: Option<f64>,
    #[arg(long)]
    pub n_max: Option<f64>,
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct SweepArgs {
    #[arg(short, long)]
    pub input: PathBuf,
    /// OTR bin edges, comma separated; consecutive edges form (lo, hi] bins.
    #[arg(long, value_delimiter = ',')]
    pub edges: Vec<f64>,
    #[arg(long)]
    pub otr_threshold: Option<f64>,
    #[arg(long)]
    pub significance: Option<f64>,
    /// Switch to frontier mode for this hyperparameter.
    #[arg(long)]
    pub knob: Option<Knob>,
    /// Target losses for frontier mode, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub targets: Vec<f64>,
    /// Smoothing window for frontier mode.
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct DensityArgs {
    /// Embeddings (EMB1 binary or CSV).
    #[arg(short, long)]
    pub input: PathBuf,
    #[arg(short, long)]
    pub k: usize,
    #[arg(long, default_value_t = 100)]
    pub max_iters: usize,
    /// Scale rows to unit length before clustering.
    #[arg(long)]
    pub normalize: bool,
    /// Keep this fraction of samples.
    #[arg(long, conflicts_with = "target_log_density")]
    pub fraction: Option<f64>,
    /// Prune until the dataset log-density is at most this value.
    #[arg(long, allow_negative_numbers = true)]
    pub target_log_density: Option<f64>,
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Reference sub-optimal law, 11 sizes x 30 checkpoints up to OTR 1700.
    SuboptimalGrid,
    /// Same grid under the Chinchilla law with the reference coefficients.
    ChinchillaGrid,
    /// Pure compute power law on the reference sizes up to OTR 100.
    PowerGrid,
    /// Two 8-d blobs of equal size and different spread.
    TwoBlobs,
    /// A 4-d blob ten times as populous as its neighbour.
    PopulousBlob,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct SynthArgs {
    #[arg(long, required_unless_present = "spec", conflicts_with = "spec")]
    pub preset: Option<Preset>,
    /// Fixture spec JSON (`"kind": "curves"` or `"blobs"`).
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Multiplicative lognormal noise for curve presets.
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ReportArgs {
    #[arg(short, long)]
    pub manifest: PathBuf,
    /// Directory for the rerun; must differ from the original.
    #[arg(short, long)]
    pub out: PathBuf,
}

fn abs_opt(p: &Option<PathBuf>) -> Result<Option<PathBuf>> {
    p.as_deref().map(absolute).transpose()
}

impl Command {
    /// Copy with every path made absolute, as recorded in manifests.
    pub fn absolutized(&self) -> Result<Command> {
        let mut cmd = self.clone();
        match &mut cmd {
            Command::Ingest(a) => {
                a.input = absolute(&a.input)?;
                a.output = absolute(&a.output)?;
            }
            Command::Fit(a) | Command::Compare(a) => {
                a.input = absolute(&a.input)?;
                a.config = abs_opt(&a.config)?;
                a.out = absolute(&a.out)?;
            }
            Command::Predict(a) => {
                a.params = absolute(&a.params)?;
                a.input = absolute(&a.input)?;
                a.out = absolute(&a.out)?;
            }
            Command::Alloc(a) => {
                a.params = absolute(&a.params)?;
                a.out = abs_opt(&a.out)?;
            }
            Command::Sweep(a) => {
                a.input = absolute(&a.input)?;
                a.out = absolute(&a.out)?;
            }
            Command::Density(a) | Command::Select(a) => {
                a.input = absolute(&a.input)?;
                a.out = absolute(&a.out)?;
            }
            Command::Synth(a) => {
                a.spec = abs_opt(&a.spec)?;
                a.out = absolute(&a.out)?;
            }
            Command::Report(a) => {
                a.manifest = absolute(&a.manifest)?;
                a.out = absolute(&a.out)?;
            }
        }
        Ok(cmd)
    }

    fn set_out(&mut self, dir: PathBuf) -> Result<()> {
        match self {
            Command::Fit(a) | Command::Compare(a) => a.out = dir,
            Command::Predict(a) => a.out = dir,
            Command::Alloc(a) => a.out = Some(dir),
            Command::Sweep(a) => a.out = dir,
            Command::Density(a) | Command::Select(a) => a.out = dir,
            Command::Synth(a) => a.out = dir,
            Command::Ingest(_) | Command::Report(_) => bail!("this command writes no manifest and cannot be replayed"),
        }
        Ok(())
    }
}

pub fn run(cmd: &Command, seed: Option<u64>) -> Result<()> {
    let cmd = cmd.absolutized()?;
    match &cmd {
        Command::Ingest(a) => cmd_ingest(a),
        Command::Fit(a) => cmd_fit(&cmd, a, seed, false),
        Command::Compare(a) => cmd_fit(&cmd, a, seed, true),
        Command::Predict(a) => cmd_predict(&cmd, a, seed),
        Command::Alloc(a) => cmd_alloc(&cmd, a, seed),
        Command::Sweep(a) => cmd_sweep(&cmd, a, seed),
        Command::Density(a) => cmd_density(&cmd, a, seed, false),
        Command::Select(a) => cmd_density(&cmd, a, seed, true),
        Command::Synth(a) => cmd_synth(&cmd, a, seed),
        Command::Report(a) => cmd_report(a),
    }
}

fn load_runs(path: &Path, smooth: Option<usize>, sigma: Option<f64>) -> Result<RunSeries> {
    let series = runs::ingest(path, RunFormat::from_path(path))?;
    match smooth {
        Some(w) => Ok(runs::gaussian_smooth(&series, w, sigma)?),
        None => Ok(series),
    }
}

/// Accepts bare law JSON, any output that embeds one under `params`/`law`,
/// or a comparison table, whose first fitted row wins.
fn load_law(path: &Path) -> Result<LawParams> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut value: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if let Some(rows) = value.as_array() {
        value = rows
            .iter()
            .find(|r| r.get("params").is_some_and(|p| !p.is_null()))
            .cloned()
            .with_context(|| format!("{} has no fitted row", path.display()))?;
    }
    let candidate = if value.get("family").and_then(|f| f.as_str()).is_some() && value.get("params").is_none() {
        value
    } else if let Some(inner) = value.get("params").or_else(|| value.get("law")) {
        inner.clone()
    } else {
        value
    };
    let law: LawParams =
        serde_json::from_value(candidate).with_context(|| format!("{} holds no law parameters", path.display()))?;
    law.validate()?;
    Ok(law)
}

fn fit_config(args: &FitArgs, seed: Option<u64>) -> Result<FitConfig> {
    let mut config = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?
        }
        None => FitConfig::default(),
    };
    if let Some(v) = args.max_iters {
        config.max_iters = v;
    }
    if let Some(v) = args.tolerance {
        config.tolerance = v;
    }
    if let Some(v) = args.robust {
        config.robust_delta = Some(v);
    }
    if args.linear_residuals {
        config.residual_space = ResidualSpace::Linear;
    }
    if let Some(v) = args.random_starts {
        config.random_starts = v;
    }
    if args.no_staged {
        config.staged = false;
    }
    if let Some(s) = seed {
        config.seed = s;
    }
    config.validate()?;
    Ok(config)
}

fn csv_line(cols: &[String]) -> String {
    let mut line = cols.join(",");
    line.push('\n');
    line
}

fn quote(field: &str) -> String {
    if field.contains([',', '"', '\n']) {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

fn prediction_row(r: &TrainingRun, predicted: f64, split: Option<&str>) -> String {
    let mut cols = vec![
        quote(&r.run_id),
        r.model_size.to_string(),
        r.tokens.to_string(),
        r.loss.to_string(),
        predicted.to_string(),
        ((predicted - r.loss) / r.loss).to_string(),
    ];
    cols.extend(split.map(str::to_string));
    csv_line(&cols)
}

/// Observed points plus one fitted curve per law and run, loss vs tokens.
fn curves_plot(title: &str, series: &RunSeries, laws: &[(String, LawParams)]) -> String {
    let mut plot = Plot::new(title, "tokens", "loss");
    let groups = series.run_groups();
    let observed = series.records().iter().map(|r| (r.tokens as f64, r.loss)).collect();
    plot.add("observed", observed, Style::Markers, 7);
    for (i, (label, law)) in laws.iter().enumerate() {
        let color = if i >= 7 { i + 1 } else { i };
        for (_, idx) in &groups {
            let points = idx
                .iter()
                .filter_map(|&j| {
                    let r = &series.records()[j];
                    law.eval_record(r).ok().map(|l| (r.tokens as f64, l))
                })
                .collect();
            plot.add(label.clone(), points, Style::Line, color);
        }
    }
    plot.render()
}

fn cmd_ingest(args: &IngestArgs) -> Result<()> {
    let series = load_runs(&args.input, args.smooth, args.sigma)?;
    runs::save(&series, &args.output, RunFormat::from_path(&args.output))?;
    say!(
        "{} records in {} runs -> {}",
        series.len(),
        series.run_groups().len(),
        args.output.display()
    );
    Ok(())
}

fn cmd_fit(cmd: &Command, args: &FitArgs, seed: Option<u64>, compare: bool) -> Result<()> {
    let config = fit_config(args, seed)?;
    let series = load_runs(&args.input, args.smooth, None)?;
    let families = match (&args.families[..], compare) {
        ([], true) => vec![LawFamily::Chinchilla, LawFamily::Suboptimal],
        ([], false) => bail!("give at least one --family"),
        (f, _) => f.to_vec(),
    };
    let mut out = Outputs::create(&args.out)?;

    if compare || families.len() > 1 {
        let split = args.split.unwrap_or(0.25);
        let rows = fit::compare_laws(&series, &families, &config, split)?;
        out.write("comparison.csv", fit::comparison_csv(&rows))?;
        out.write_json("comparison.json", &rows)?;
        let laws: Vec<(String, LawParams)> = rows
            .iter()
            .filter_map(|r| r.params.map(|p| (r.family.name().to_string(), p)))
            .collect();
        out.write("fit.svg", curves_plot("Law comparison", &series, &laws))?;
        for row in &rows {
            match (row.mape_pred, &row.error) {
                (Some(m), _) => say!("{:<16} mape_pred={m:.6} converged={}", row.family.name(), row.converged),
                (None, Some(e)) => say!("{:<16} failed: {e}", row.family.name()),
                _ => {}
            }
        }
        out.finish(cmd.clone(), config.seed)?;
        if !rows.iter().any(|r| r.converged) {
            return Err(AnalyticFailure("no law family converged".into()).into());
        }
        return Ok(());
    }

    let family = families[0];
    let (fit_split, holdout) = match args.split {
        Some(f) => {
            let (a, b) = runs::split_fit_holdout(&series, f)?;
            (a, Some(b))
        }
        None => (series.clone(), None),
    };
    let mut result = fit::fit_law(&fit_split, family, &config)?;
    let mut residuals = String::from("run_id,model_size,tokens,loss,predicted,rel_error,split\n");
    let (fit_pred, _) = fit::predict(&result.params, &fit_split)?;
    for (r, p) in fit_split.records().iter().zip(&fit_pred) {
        residuals.push_str(&prediction_row(r, *p, Some("fit")));
    }
    if let Some(holdout) = &holdout {
        let (pred, mape_pred) = fit::predict(&result.params, holdout)?;
        result.mape_pred = Some(mape_pred);
        for (r, p) in holdout.records().iter().zip(&pred) {
            residuals.push_str(&prediction_row(r, *p, Some("holdout")));
        }
    }
    out.write_json("fit_result.json", &result)?;
    out.write("residuals.csv", residuals)?;
    out.write("fit_summary.csv", fit::fit_result_csv(&result))?;
    let title = format!("{} fit", family.name());
    out.write(
        "fit.svg",
        curves_plot(&title, &series, &[(family.name().to_string(), result.params)]),
    )?;
    out.finish(cmd.clone(), config.seed)?;

    say!("{}", fit::fit_result_csv(&result).trim_end());
    if !result.converged {
        return Err(AnalyticFailure(format!(
            "{} fit did not converge within {} iterations",
            family.name(),
            config.max_iters
        ))
        .into());
    }
    Ok(())
}

#[derive(Serialize)]
struct PredictSummary {
    law: LawParams,
    n_records: usize,
    mape: f64,
}

fn cmd_predict(cmd: &Command, args: &PredictArgs, seed: Option<u64>) -> Result<()> {
    let law = load_law(&args.params)?;
    let series = load_runs(&args.input, None, None)?;
    let (pred, mape) = fit::predict(&law, &series)?;
    let mut out = Outputs::create(&args.out)?;
    let mut table = String::from("run_id,model_size,tokens,loss,predicted,rel_error\n");
    for (r, p) in series.records().iter().zip(&pred) {
        table.push_str(&prediction_row(r, *p, None));
    }
    out.write("predictions.csv", table)?;
    out.write_json(
        "predict.json",
        &PredictSummary {
            law,
            n_records: series.len(),
            mape,
        },
    )?;
    let label = law.family().name().to_string();
    out.write("predict.svg", curves_plot("Prediction", &series, &[(label, law)]))?;
    out.finish(cmd.clone(), seed.unwrap_or(0))?;
    say!("mape={mape}");
    Ok(())
}

fn alloc_bounds(args: &AllocArgs) -> AllocBounds {
    let mut bounds = AllocBounds::default();
    if let Some(v) = args.n_min {
        bounds.n_min = v;
    }
    if let Some(v) = args.n_max {
        bounds.n_max = v;
    }
    bounds
}

const SWEEP_OTR_RANGE: (f64, f64) = (1e-2, 1e4);
const SWEEP_OTR_POINTS: usize = 121;
const SIZE_CURVE_POINTS: usize = 200;

/// Loss against model size for budgets a decade apart around `budget`, with
/// the locus of per-budget minima.
fn size_plot(law: &LawParams, budget: f64, bounds: &AllocBounds) -> Result<String> {
    let mut plot = Plot::new("Loss vs model size at fixed compute", "model size N", "loss");
    let mut locus = Vec::new();
    for (i, decade) in (-2..=2).enumerate() {
        let c = budget * 10f64.powi(decade);
        let (lo, hi) = bounds.bracket(c)?;
        let points = alloc::log_spaced(lo, hi, SIZE_CURVE_POINTS)
            .into_iter()
            .filter_map(|n| alloc::loss_at(law, c, n).ok().map(|l| (n, l)))
            .collect();
        plot.add(format!("C={c:.1e}"), points, Style::Line, i);
        if let Ok(plan) = alloc::optimal_allocation_in(law, c, bounds) {
            locus.push((plan.n_star, plan.predicted_loss));
        }
    }
    plot.add("minima", locus.clone(), Style::Dashed, 7);
    plot.add("", locus, Style::Markers, 7);
    Ok(plot.render())
}

fn cmd_alloc(cmd: &Command, args: &AllocArgs, seed: Option<u64>) -> Result<()> {
    let law = load_law(&args.params)?;
    let bounds = alloc_bounds(args);
    let plan = alloc::optimal_allocation_in(&law, args.budget, &bounds)?;
    say!("{}", serde_json::to_string_pretty(&plan)?);
    let Some(dir) = &args.out else {
        return Ok(());
    };
    let mut out = Outputs::create(dir)?;
    out.write_json("allocation.json", &plan)?;
    if args.sweep {
        let otrs = alloc::log_spaced(SWEEP_OTR_RANGE.0, SWEEP_OTR_RANGE.1, SWEEP_OTR_POINTS);
        let sweep = alloc::otr_sweep(&law, args.budget, &otrs)?;
        out.write("sweep.csv", alloc::sweep_csv(&sweep))?;
        out.write("sweep.svg", size_plot(&law, args.budget, &bounds)?)?;
    }
    out.finish(cmd.clone(), seed.unwrap_or(0))?;
    Ok(())
}

fn cmd_sweep(cmd: &Command, args: &SweepArgs, seed: Option<u64>) -> Result<()> {
    let series = load_runs(&args.input, None, None)?;
    let mut out = Outputs::create(&args.out)?;

    if let Some(knob) = args.knob {
        if args.targets.is_empty() {
            bail!("frontier mode needs --targets");
        }
        let window = args.window.unwrap_or(alloc::DEFAULT_FRONTIER_WINDOW);
        let frontier = alloc::hyperparam_frontier(&series, knob, &args.targets, window)?;
        let mut table = String::from("target_loss,knob_value,min_tokens\n");
        for p in &frontier.points {
            table.push_str(&format!("{},{},{}\n", p.target_loss, p.knob_value, p.min_tokens));
        }
        out.write("frontier.csv", table)?;
        out.write_json("frontier.json", &frontier)?;
        let mut plot = Plot::new(
            format!("Optimal {knob} per target loss"),
            "tokens to target",
            knob.to_string(),
        );
        let pts = frontier
            .points
            .iter()
            .map(|p| (p.min_tokens as f64, p.knob_value))
            .collect::<Vec<_>>();
        plot.add("frontier", pts.clone(), Style::Line, 0);
        plot.add("", pts, Style::Markers, 0);
        out.write("frontier.svg", plot.render())?;
        for w in &frontier.warnings {
            eprintln!("warning: {knob}={} never reaches loss {}", w.knob_value, w.target_loss);
        }
    } else {
        if args.edges.len() < 2 {
            bail!("give at least two --edges");
        }
        let bins: Vec<(f64, f64)> = args.edges.windows(2).map(|w| (w[0], w[1])).collect();
        let mut options = StabilityOptions::default();
        if let Some(v) = args.otr_threshold {
            options.otr_threshold = v;
        }
        if let Some(v) = args.significance {
            options.significance = v;
        }
        let report = alloc::alpha_stability(&series, &bins, &options)?;
        let mut table = String::from("otr_lo,otr_hi,alpha,lambda,n_points\n");
        for b in &report.bins {
            table.push_str(&format!(
                "{},{},{},{},{}\n",
                b.otr_range.0, b.otr_range.1, b.alpha, b.lambda, b.n_points
            ));
        }
        out.write("bins.csv", table)?;
        out.write_json("stability.json", &report)?;
        let mut plot = Plot::new("Compute exponent per OTR bin", "OTR", "alpha_C");
        plot.log_y = false;
        let pts: Vec<(f64, f64)> = report
            .bins
            .iter()
            .map(|b| ((b.otr_range.0.max(1e-12) * b.otr_range.1).sqrt(), b.alpha))
            .collect();
        let (x0, x1) = (pts.first().map_or(1.0, |p| p.0), pts.last().map_or(1.0, |p| p.0));
        plot.add("per bin", pts, Style::Markers, 0);
        plot.add(
            "mean",
            vec![(x0, report.mean_alpha), (x1, report.mean_alpha)],
            Style::Dashed,
            1,
        );
        out.write("stability.svg", plot.render())?;
        say!(
            "mean_alpha={} std_alpha={} normality_p={} pass={}",
            report.mean_alpha,
            report.std_alpha,
            report.normality_p,
            report.normality_pass
        );
    }
    out.finish(cmd.clone(), seed.unwrap_or(0))?;
    Ok(())
}

fn cmd_density(cmd: &Command, args: &DensityArgs, seed: Option<u64>, select: bool) -> Result<()> {
    let seed = seed.unwrap_or(0);
    let target = match (args.fraction, args.target_log_density) {
        (Some(f), _) => Some(SelectionTarget::Fraction(f)),
        (None, Some(t)) => Some(SelectionTarget::LogDensity(t)),
        (None, None) if select => bail!("select needs --fraction or --target-log-density"),
        (None, None) => None,
    };
    let mut emb = density::load_embeddings(&args.input)?;
    if args.normalize {
        emb = emb.normalized();
    }
    let clustering = density::kmeans(&emb, args.k, seed, args.max_iters)?;
    let report = density::dataset_density(&emb, &clustering)?;

    let mut out = Outputs::create(&args.out)?;
    out.write_json("density.json", &report)?;
    out.write("clustering.csv", clustering_csv(&emb, &clustering))?;
    let mut plot = Plot::new("Per-cluster density", "mean radius", "ln density").linear();
    for c in &report.per_cluster {
        plot.add(
            format!("cluster {} (n={})", c.cluster_id, c.n_samples),
            vec![(c.radius, c.log_density)],
            Style::Markers,
            c.cluster_id,
        );
    }
    out.write("density.svg", plot.render())?;
    say!(
        "k={} log_density={} weighted_radius={}",
        report.k,
        report.log_density,
        report.weighted_radius
    );

    if let Some(target) = target {
        let selection = density::select_low_density(&emb, &clustering, target)?;
        let mut ids = selection.retained_ids.join("\n");
        if !ids.is_empty() {
            ids.push('\n');
        }
        out.write("retained_ids.txt", ids)?;
        out.write_json("selection.json", &selection)?;
        let mut plot = Plot::new("Dataset density during selection", "samples removed", "ln density").linear();
        let trace = std::iter::once(selection.log_density_before)
            .chain(selection.trace.iter().copied())
            .enumerate()
            .map(|(i, v)| (i as f64, v))
            .collect();
        plot.add("ln density", trace, Style::Line, 0);
        out.write("selection.svg", plot.render())?;
        say!(
            "retained {} of {}: log_density {} -> {}",
            selection.retained_ids.len(),
            emb.len(),
            selection.log_density_before,
            selection.log_density_after
        );
    }
    out.finish(cmd.clone(), seed)?;
    Ok(())
}

fn clustering_csv(emb: &EmbeddingSet, clustering: &Clustering) -> String {
    let mut s = String::from("row,id,cluster\n");
    for (row, (id, c)) in emb.ids().iter().zip(&clustering.assignment).enumerate() {
        s.push_str(&format!("{row},{},{c}\n", quote(id)));
    }
    s
}

fn preset_spec(preset: Preset, noise: Option<f64>, seed: u64) -> FixtureSpec {
    let noise = match noise {
        Some(sigma) if sigma > 0.0 => Noise::Lognormal { sigma },
        _ => Noise::None,
    };
    let reference = SubOptimalParams::reference();
    let curves = |law: LawParams, max_otr: f64| {
        FixtureSpec::Curves(CurveSpec::even_checkpoints(
            law,
            &REFERENCE_MODEL_SIZES,
            max_otr,
            30,
            noise,
            seed,
        ))
    };
    let blob = |n_samples: usize, centroid: Vec<f64>, spread: f64| BlobCluster {
        n_samples,
        centroid,
        spread,
    };
    match preset {
        Preset::SuboptimalGrid => curves(LawParams::Suboptimal(reference), 1700.0),
        Preset::ChinchillaGrid => curves(LawParams::Chinchilla(reference.as_chinchilla()), 1700.0),
        Preset::PowerGrid => curves(
            LawParams::Power(PowerLawParams {
                lambda: 30.0,
                alpha: 0.05,
            }),
            100.0,
        ),
        Preset::TwoBlobs => {
            let mut far = vec![0.0; 8];
            far[0] = 12.0;
            FixtureSpec::Blobs(BlobSpec {
                dim: 8,
                clusters: vec![blob(300, vec![0.0; 8], 0.5), blob(300, far, 1.5)],
                seed,
            })
        }
        Preset::PopulousBlob => FixtureSpec::Blobs(BlobSpec {
            dim: 4,
            clusters: vec![blob(1000, vec![0.0; 4], 1.0), blob(100, vec![10.0, 0.0, 0.0, 0.0], 1.0)],
            seed,
        }),
    }
}

fn cmd_synth(cmd: &Command, args: &SynthArgs, seed: Option<u64>) -> Result<()> {
    let mut spec = match (&args.spec, args.preset) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing fixture spec {}", path.display()))?
        }
        (None, Some(preset)) => preset_spec(preset, args.noise, 0),
        (None, None) => bail!("give --preset or --spec"),
    };
    let effective = match &mut spec {
        FixtureSpec::Curves(c) => {
            if let (Some(sigma), true) = (args.noise, args.spec.is_some()) {
                c.noise = Noise::Lognormal { sigma };
            }
            c.seed = seed.unwrap_or(c.seed);
            c.seed
        }
        FixtureSpec::Blobs(b) => {
            b.seed = seed.unwrap_or(b.seed);
            b.seed
        }
    };
    let mut out = Outputs::create(&args.out)?;
    match &spec {
        FixtureSpec::Curves(c) => {
            let series = synth::gen_curves(c)?;
            let mut buf = Vec::new();
            runs::write_csv(&series, &mut buf)?;
            out.write("runs.csv", buf)?;
            say!("{} records in {} runs", series.len(), series.run_groups().len());
        }
        FixtureSpec::Blobs(b) => {
            let (emb, labels) = synth::gen_blobs(b)?;
            let mut buf = Vec::new();
            density::write_emb1(&emb, &mut buf)?;
            out.write("embeddings.emb", buf)?;
            let mut table = String::from("row,id,label\n");
            for (row, (id, l)) in emb.ids().iter().zip(&labels).enumerate() {
                table.push_str(&format!("{row},{},{l}\n", quote(id)));
            }
            out.write("labels.csv", table)?;
            say!("{} embeddings of dimension {} in {} blobs", emb.len(), emb.dim(), b.k());
        }
    }
    out.write_json("spec.json", &spec)?;
    out.finish(cmd.clone(), effective)?;
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> Result<()> {
    let manifest = Manifest::load(&args.manifest)?;
    let original_dir = args
        .manifest
        .parent()
        .context("manifest path has no parent directory")?
        .to_path_buf();
    if absolute(&args.out)? == absolute(&original_dir)? {
        bail!("--out must differ from the directory holding the manifest");
    }
    let mut replay = manifest.command.clone();
    replay.set_out(args.out.clone())?;
    // Analytic failures are part of what gets reproduced.
    if let Err(e) = run(&replay, Some(manifest.seed)) {
        if crate::exit_code(&e) != 2 {
            return Err(e.context("replaying the recorded command"));
        }
    }

    let fresh = Manifest::load(&args.out.join(MANIFEST_FILE))?;
    let mut mismatched = Vec::new();
    for entry in &manifest.outputs {
        let a = fs::read(original_dir.join(&entry.name));
        let b = fs::read(args.out.join(&entry.name));
        let same = matches!((&a, &b), (Ok(x), Ok(y)) if x == y);
        say!("{} {}", if same { "identical" } else { "differs  " }, entry.name);
        if !same {
            mismatched.push(entry.name.clone());
        }
    }
    for entry in &fresh.outputs {
        if !manifest.outputs.iter().any(|e| e.name == entry.name) {
            say!("new       {}", entry.name);
            mismatched.push(entry.name.clone());
        }
    }
    if !mismatched.is_empty() {
        return Err(AnalyticFailure(format!("replay differs in {}", mismatched.join(", "))).into());
    }
    Ok(())
}
