//! Command-line harness: one JSON config in, `report.json` plus CSV, JSON
//! and SVG artifacts out.
//!
//! Configs are merged with the command-line flags, then deserialized into a
//! typed schema that rejects unknown fields. Relative `input` paths in a
//! config resolve against the config's directory; flag paths against the
//! working directory.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::id_estimator::{estimate_id, sample_synthetic_manifold, Aggregation, IdOptions, PointCloud, SamplerSpec};
use crate::report::{emit_plot, write_csv, write_json, Check, Labels, Report, Scale, Series};
use crate::runtime::TransformerNet;
use crate::scaling::{
    convert_exponents, fit_power_law, generalization_rate_curve, log_covering_number, predict_exponents,
    predicted_architecture, read_loss_csv, ArchMode, ArchParams, FitMode, Known, ScalingFit,
};
use crate::synthesis::{
    build_grid, choose_n, cube_error_bound, default_scan, make_atlas, manifold_oracle, pou_oracle, product_levels,
    synthesize_cube_approximator, synthesize_manifold_approximator, AtlasParams, Budget, HolderTarget, ManifoldOptions,
    Shape, TargetSpec,
};

/// Environment variable overriding the default output directory.
pub const OUT_ENV: &str = "TFAPPROX_OUT";

#[derive(Parser, Debug, Clone)]
#[command(name = "tfapprox", version, about = "Explicit transformer approximators, intrinsic dimension and scaling laws")]
pub struct Cli {
    #[command(flatten)]
    pub globals: Globals,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Globals {
    /// JSON config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (default: $TFAPPROX_OUT or ./out).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for evaluation maps.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug, Clone)]
pub enum Command {
    /// Synthesize a cube net and scan it against the target and the oracle.
    ApproxBuild,
    /// Sweep N or ε and fit the error-versus-width slope.
    ApproxSweep,
    /// Synthesize a manifold net and check it on manifold samples.
    ManifoldDemo,
    /// Estimate the intrinsic dimension of a CSV point cloud.
    EstimateId {
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Sample a synthetic manifold into a CSV cloud.
    SynthCloud,
    /// Fit a power law to a loss curve.
    FitScaling {
        #[arg(long)]
        input: Option<PathBuf>,
        /// Overlay the exponent predicted for this intrinsic dimension.
        #[arg(long)]
        overlay_d: Option<f64>,
    },
    /// Scaling exponents and rate curve for (d, β).
    Predict {
        #[arg(long)]
        d: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
    },
    /// Log covering number of a transformer class.
    CoveringBound,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::ApproxBuild => "approx-build",
            Command::ApproxSweep => "approx-sweep",
            Command::ManifoldDemo => "manifold-demo",
            Command::EstimateId { .. } => "estimate-id",
            Command::SynthCloud => "synth-cloud",
            Command::FitScaling { .. } => "fit-scaling",
            Command::Predict { .. } => "predict",
            Command::CoveringBound => "covering-bound",
        }
    }

    fn overrides(&self) -> Vec<(&'static str, Value)> {
        let path = |p: &PathBuf| Value::String(p.to_string_lossy().into_owned());
        let mut v = Vec::new();
        match self {
            Command::EstimateId { input } => v.extend(input.as_ref().map(|p| ("input", path(p)))),
            Command::FitScaling { input, overlay_d } => {
                v.extend(input.as_ref().map(|p| ("input", path(p))));
                v.extend(overlay_d.map(|d| ("overlay_d", Value::from(d))));
            }
            Command::Predict { d, beta } => {
                v.extend(d.map(|d| ("d", Value::from(d))));
                v.extend(beta.map(|b| ("beta", Value::from(b))));
            }
            _ => {}
        }
        v
    }
}

/// A named registry target or an explicit spec.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TargetChoice {
    Named(String),
    Spec(TargetSpec),
}

impl TargetChoice {
    pub fn resolve(&self, dim: usize) -> Result<HolderTarget> {
        match self {
            TargetChoice::Named(name) => HolderTarget::registry(name, dim),
            TargetChoice::Spec(spec) => HolderTarget::new(spec.clone(), dim),
        }
    }
}

/// `|value − expected| ≤ tolerance`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expected {
    pub value: f64,
    pub tolerance: f64,
}

/// `lo ≤ value ≤ hi`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

fn default_scan_points() -> usize {
    2000
}

fn default_slope_tolerance() -> f64 {
    0.15
}

fn default_manifold_samples() -> usize {
    10_000
}

fn default_projection_samples() -> usize {
    100
}

fn default_k() -> usize {
    20
}

fn default_batch() -> usize {
    4096
}

fn default_cloud_name() -> String {
    "cloud.csv".into()
}

fn default_one() -> f64 {
    1.0
}

fn default_n_values() -> Vec<f64> {
    (0..13).map(|i| 10f64.powf(3.0 + 0.5 * i as f64)).collect()
}

fn default_deltas() -> Vec<f64> {
    (0..7).map(|i| 10f64.powi(-i)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApproxBuildConfig {
    pub d: usize,
    pub target: TargetChoice,
    /// Grid points per axis; exclusive with `eps`.
    #[serde(default)]
    pub n: Option<usize>,
    /// Target accuracy; the grid follows from the cube bound.
    #[serde(default)]
    pub eps: Option<f64>,
    #[serde(default = "default_scan_points")]
    pub scan_points: usize,
    pub seed: u64,
    #[serde(default)]
    pub budget: Budget,
    #[serde(default)]
    pub expect_sup_error: Option<Expected>,
    /// Write `net.json`; defaults to nets of at most 10⁴ tokens.
    #[serde(default)]
    pub emit_net: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Sweep {
    N(Vec<usize>),
    Eps(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApproxSweepConfig {
    pub d: usize,
    pub target: TargetChoice,
    pub sweep: Sweep,
    #[serde(default = "default_scan_points")]
    pub scan_points: usize,
    pub seed: u64,
    #[serde(default)]
    pub budget: Budget,
    /// Allowed distance of the fitted slope from `−β/d`.
    #[serde(default = "default_slope_tolerance")]
    pub slope_tolerance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifoldDemoConfig {
    pub shape: Shape,
    pub charts: usize,
    #[serde(default)]
    pub atlas: AtlasParams,
    /// Target on the ambient space.
    pub target: TargetChoice,
    pub eps: f64,
    #[serde(default = "default_manifold_samples")]
    pub samples: usize,
    /// Samples on which the projection block is compared with the charts.
    #[serde(default = "default_projection_samples")]
    pub projection_samples: usize,
    pub seed: u64,
    #[serde(default)]
    pub options: ManifoldOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateIdConfig {
    pub input: PathBuf,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub aggregation: Aggregation,
    #[serde(default)]
    pub expect: Option<Range>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthCloudConfig {
    pub sampler: SamplerSpec,
    pub n: usize,
    pub ambient: usize,
    pub seed: u64,
    /// File name inside the output directory.
    #[serde(default = "default_cloud_name")]
    pub output: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitScalingConfig {
    pub input: PathBuf,
    #[serde(default)]
    pub mode: FitMode,
    /// Intrinsic dimension whose predicted `α_D` is overlaid.
    #[serde(default)]
    pub overlay_d: Option<f64>,
    #[serde(default = "default_one")]
    pub beta: f64,
    #[serde(default)]
    pub expect_exponent: Option<Expected>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictConfig {
    pub d: f64,
    pub beta: f64,
    /// Ambient dimension in the rate curve.
    #[serde(default = "default_one", rename = "D")]
    pub big_d: f64,
    #[serde(default = "default_n_values")]
    pub n_values: Vec<f64>,
    /// Also size a concrete cube architecture (integer `d` only).
    #[serde(default)]
    pub architecture: Option<ArchMode>,
    #[serde(default = "default_one")]
    pub sup_bound: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoveringBoundConfig {
    pub params: ArchParams,
    /// Scales for the log-linearity check.
    #[serde(default = "default_deltas")]
    pub deltas: Vec<f64>,
}

/// Output directory: flag, then environment, then `./out`.
pub fn output_dir(globals: &Globals) -> PathBuf {
    globals
        .out
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

/// Config document after flag merging, before typing.
pub fn merged_config(cli: &Cli) -> Result<Value> {
    let mut doc = Map::new();
    if let Some(path) = &cli.globals.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{} is not valid JSON: {e}", path.display())))?;
        doc = match value {
            Value::Object(m) => m,
            _ => return Err(Error::Config(format!("{} must hold a JSON object", path.display()))),
        };
        let base = path.parent().unwrap_or(Path::new(""));
        if let Some(Value::String(s)) = doc.get("input") {
            let p = Path::new(s);
            if p.is_relative() {
                let joined = base.join(p).to_string_lossy().into_owned();
                doc.insert("input".into(), Value::String(joined));
            }
        }
    }
    for (k, v) in cli.command.overrides() {
        doc.insert(k.into(), v);
    }
    if let Some(seed) = cli.globals.seed {
        doc.insert("seed".into(), Value::from(seed));
    }
    Ok(Value::Object(doc))
}

fn typed<T: DeserializeOwned>(command: &str, doc: Value) -> Result<T> {
    serde_json::from_value(doc).map_err(|e| Error::Config(format!("{command}: {e}")))
}

/// Runs the command, writes `report.json` and the artifacts, and returns
/// the report path. A failed check still writes everything, then returns
/// [`Error::Acceptance`] naming the failures.
pub fn run(cli: &Cli) -> Result<PathBuf> {
    if let Some(n) = cli.globals.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be positive".into()));
        }
        // A pool built earlier in the process keeps its size.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let name = cli.command.name();
    let doc = merged_config(cli)?;
    let dir = output_dir(&cli.globals);
    std::fs::create_dir_all(&dir)?;
    let mut out = Out { dir: &dir, report: None };
    match &cli.command {
        Command::ApproxBuild => approx_build(&typed(name, doc)?, &mut out)?,
        Command::ApproxSweep => approx_sweep(&typed(name, doc)?, &mut out)?,
        Command::ManifoldDemo => manifold_demo(&typed(name, doc)?, &mut out)?,
        Command::EstimateId { .. } => estimate_id_cmd(&typed(name, doc)?, &mut out)?,
        Command::SynthCloud => synth_cloud(&typed(name, doc)?, &mut out)?,
        Command::FitScaling { .. } => fit_scaling(&typed(name, doc)?, &mut out)?,
        Command::Predict { .. } => predict(&typed(name, doc)?, &mut out)?,
        Command::CoveringBound => covering_bound(&typed(name, doc)?, &mut out)?,
    }
    let report = out.report.take().ok_or_else(|| Error::Config(format!("{name} produced no report")))?;
    let path = dir.join("report.json");
    write_json(&path, &report)?;
    let failed: Vec<String> = report
        .failures()
        .iter()
        .map(|c| format!("{} (value {:e}, {})", c.name, c.value, describe(&c.criterion)))
        .collect();
    if !failed.is_empty() {
        return Err(Error::Acceptance(failed.join("; ")));
    }
    Ok(path)
}

fn describe(c: &crate::report::Criterion) -> String {
    use crate::report::Criterion::*;
    match c {
        AtMost { bound } => format!("bound {bound:e}"),
        Near { expected, tolerance } => format!("expected {expected:e} ± {tolerance:e}"),
        Within { lo, hi } => format!("range [{lo:e}, {hi:e}]"),
    }
}

/// Artifact sink that records every file in the report.
struct Out<'a> {
    dir: &'a Path,
    report: Option<Report>,
}

impl Out<'_> {
    fn start<T: Serialize>(&mut self, command: &str, inputs: &T) -> Result<&mut Report> {
        Ok(self.report.insert(Report::new(command, inputs)?))
    }

    fn report(&mut self) -> &mut Report {
        self.report.as_mut().expect("report started")
    }

    fn json<T: Serialize>(&mut self, name: &str, v: &T) -> Result<()> {
        write_json(&self.dir.join(name), v)?;
        self.report().output(name);
        Ok(())
    }

    fn csv(&mut self, name: &str, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
        write_csv(&self.dir.join(name), header, rows)?;
        self.report().output(name);
        Ok(())
    }

    fn svg(&mut self, name: &str, series: &[Series], scale: Scale, labels: Labels) -> Result<()> {
        emit_plot(series, scale, &labels, &self.dir.join(name))?;
        self.report().output(name);
        Ok(())
    }

    fn text(&mut self, name: &str, text: &str) -> Result<()> {
        std::fs::write(self.dir.join(name), text)?;
        self.report().output(name);
        Ok(())
    }
}

fn labels(title: &str, x: &str, y: &str) -> Labels {
    Labels { title: title.into(), x: x.into(), y: y.into() }
}

fn grid_resolution(d: usize, n: Option<usize>, eps: Option<f64>, target: &HolderTarget) -> Result<usize> {
    match (n, eps) {
        (Some(n), None) => Ok(n),
        (None, Some(eps)) => choose_n(eps, d, target.holder, target.beta),
        _ => Err(Error::Config("give exactly one of `n` and `eps`".into())),
    }
}

/// Largest `|a − b|` with its first maximizer.
fn sup_abs(a: &[f64], b: &[f64]) -> (f64, usize) {
    let mut best = (0.0, 0);
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        let e = (x - y).abs();
        if e > best.0 {
            best = (e, i);
        }
    }
    best
}

fn net_info(report: &mut Report, net: &TransformerNet) -> Result<()> {
    report.info("tokens", net.token_count)?;
    report.info("depth", net.depth())?;
    report.info("heads", net.head_count())?;
    report.info("max_heads_per_block", net.max_heads())?;
    report.info("max_ffn_depth", net.max_ffn_depth())?;
    report.info("max_ffn_width", net.max_ffn_width())?;
    report.info("weight_sup_norm", net.weight_sup_norm())?;
    report.info("cancellation_scale", net.cancellation_scale())?;
    report.info("model_size", net.model_size())?;
    report.info("layout", &net.layout_note)
}

fn approx_build(cfg: &ApproxBuildConfig, out: &mut Out) -> Result<()> {
    let target = cfg.target.resolve(cfg.d)?;
    let n = grid_resolution(cfg.d, cfg.n, cfg.eps, &target)?;
    let grid = build_grid(&target, cfg.d, n, &cfg.budget)?;
    let net = synthesize_cube_approximator(&grid, target.sup_bound, &cfg.budget)?;
    let pts = default_scan(cfg.d, n, cfg.scan_points, cfg.seed, &cfg.budget)?;
    let ys = net.forward_many(&pts)?;
    let fs: Vec<f64> = pts.iter().map(|x| target.eval(x)).collect();
    let os: Vec<f64> = pts.iter().map(|x| pou_oracle(&grid, x)).collect();
    let (sup, argmax) = sup_abs(&ys, &fs);
    let (gap, _) = sup_abs(&ys, &os);
    let bound = cube_error_bound(cfg.d, n, target.holder, target.beta);

    let report = out.start("approx-build", cfg)?;
    report.info("n", n)?;
    report.info("target", &target)?;
    report.info("scan_points", pts.len())?;
    report.info("argmax", &pts[argmax])?;
    net_info(report, &net)?;
    report.check(Check::at_most("sup error within cube bound", sup, bound));
    report.check(Check::at_most("net matches oracle", gap, net.tolerance()));
    if let Some(e) = cfg.expect_sup_error {
        report.check(Check::near("sup error as expected", sup, e.value, e.tolerance));
    }

    let mut header: Vec<String> = (1..=cfg.d).map(|i| format!("x{i}")).collect();
    header.extend(["net", "oracle", "target"].map(String::from));
    let rows: Vec<Vec<f64>> = pts
        .iter()
        .enumerate()
        .map(|(i, x)| x.iter().copied().chain([ys[i], os[i], fs[i]]).collect())
        .collect();
    out.csv("scan.csv", &header.iter().map(String::as_str).collect::<Vec<_>>(), &rows)?;
    if cfg.emit_net.unwrap_or(net.token_count <= 10_000) {
        out.text("net.json", &net.to_json()?)?;
    }
    Ok(())
}

fn approx_sweep(cfg: &ApproxSweepConfig, out: &mut Out) -> Result<()> {
    let target = cfg.target.resolve(cfg.d)?;
    let ns: Vec<usize> = match &cfg.sweep {
        Sweep::N(v) => v.clone(),
        Sweep::Eps(v) => v.iter().map(|e| choose_n(*e, cfg.d, target.holder, target.beta)).collect::<Result<_>>()?,
    };
    if ns.is_empty() {
        return Err(Error::Config("the sweep is empty".into()));
    }
    let mut rows = Vec::with_capacity(ns.len());
    let mut depths = Vec::with_capacity(ns.len());
    let mut bounds_ok = Vec::with_capacity(ns.len());
    for &n in &ns {
        let grid = build_grid(&target, cfg.d, n, &cfg.budget)?;
        let net = synthesize_cube_approximator(&grid, target.sup_bound, &cfg.budget)?;
        let pts = default_scan(cfg.d, n, cfg.scan_points, cfg.seed, &cfg.budget)?;
        let ys = net.forward_many(&pts)?;
        let fs: Vec<f64> = pts.iter().map(|x| target.eval(x)).collect();
        let (sup, _) = sup_abs(&ys, &fs);
        let bound = cube_error_bound(cfg.d, n, target.holder, target.beta);
        depths.push(net.depth());
        bounds_ok.push((n, sup, bound));
        rows.push(vec![n as f64, net.token_count as f64, net.depth() as f64, sup, bound]);
    }

    // Distinct widths, increasing, for the slope fit.
    let mut pts: Vec<(f64, f64)> = rows.iter().map(|r| (r[1], r[3])).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    pts.dedup_by(|a, b| a.0 == b.0);
    let fit = if pts.len() >= 3 { Some(fit_power_law(&pts, FitMode::Plain)?) } else { None };
    let expected_slope = -target.beta / cfg.d as f64;
    let expected_depth = product_levels(cfg.d) + 4;

    let report = out.start("approx-sweep", cfg)?;
    report.info("n_values", &ns)?;
    report.info("target", &target)?;
    report.info("fit", fit)?;
    for (n, sup, bound) in bounds_ok {
        report.check(Check::at_most(format!("N={n}: sup error within cube bound"), sup, bound));
    }
    let spread = depths.iter().max().unwrap() - depths.iter().min().unwrap();
    report.check(Check::near("depth constant across the sweep", spread as f64, 0.0, 0.0));
    report.check(Check::near("depth equals log2(d_pad)+4", depths[0] as f64, expected_depth as f64, 0.0));
    if let Some(f) = &fit {
        report.check(Check::near("error-width slope", -f.exponent, expected_slope, cfg.slope_tolerance));
    }

    out.csv("sweep.csv", &["n", "tokens", "depth", "sup_error", "bound"], &rows)?;
    let mut series = vec![Series::markers("sup error", pts.clone())];
    if let Some(f) = &fit {
        let (a, b) = (pts[0].0, pts[pts.len() - 1].0);
        series.push(Series::line(format!("fit slope {:.4}", -f.exponent), vec![(a, f.predict(a)), (b, f.predict(b))]));
    }
    out.svg("sweep.svg", &series, Scale::LogLog, labels("sup error vs width", "tokens l", "sup error"))
}

fn manifold_demo(cfg: &ManifoldDemoConfig, out: &mut Out) -> Result<()> {
    let atlas = make_atlas(cfg.shape, cfg.charts, &cfg.atlas)?;
    atlas.validate()?;
    let target = cfg.target.resolve(atlas.ambient_dim)?;
    let syn = synthesize_manifold_approximator(&atlas, &target, cfg.eps, &cfg.options)?;
    let xs = atlas.sample(cfg.samples, cfg.seed);
    let ys = syn.net.forward_many(&xs)?;
    let fs: Vec<f64> = xs.iter().map(|x| target.eval(x)).collect();
    let os: Vec<f64> = xs.iter().map(|x| manifold_oracle(&syn.model, x)).collect();
    let (sup, argmax) = sup_abs(&ys, &fs);
    let (gap, _) = sup_abs(&ys, &os);
    let mut proj = 0.0f64;
    for x in xs.iter().take(cfg.projection_samples) {
        proj = proj.max(syn.projection_gap(x)?);
    }

    let report = out.start("manifold-demo", cfg)?;
    report.info("target", &target)?;
    report.info("resolution", syn.model.resolution)?;
    report.info("chart_accuracy", syn.model.chart_accuracy)?;
    report.info("measured_chart_error", syn.model.measured_chart_error)?;
    report.info("ramp_width", syn.model.ramp_width)?;
    report.info("overlap", atlas.overlap())?;
    report.info("argmax", &xs[argmax])?;
    net_info(report, &syn.net)?;
    let tol = syn.net.tolerance();
    report.check(Check::at_most("sup error over manifold samples", sup, cfg.eps));
    report.check(Check::at_most("net matches oracle", gap, tol));
    report.check(Check::at_most("projection block equals charts", proj, tol));

    let mut header: Vec<String> = (1..=atlas.ambient_dim).map(|i| format!("x{i}")).collect();
    header.extend(["net", "oracle", "target"].map(String::from));
    let rows: Vec<Vec<f64>> = xs
        .iter()
        .enumerate()
        .map(|(i, x)| x.iter().copied().chain([ys[i], os[i], fs[i]]).collect())
        .collect();
    out.csv("samples.csv", &header.iter().map(String::as_str).collect::<Vec<_>>(), &rows)
}

fn open(path: &Path) -> Result<std::fs::File> {
    std::fs::File::open(path).map_err(|e| Error::Config(format!("cannot open {}: {e}", path.display())))
}

fn estimate_id_cmd(cfg: &EstimateIdConfig, out: &mut Out) -> Result<()> {
    let cloud = PointCloud::read_csv(open(&cfg.input)?, cfg.input.to_string_lossy())?;
    let opts = IdOptions { k: cfg.k, batch_size: cfg.batch_size, seed: cfg.seed, aggregation: cfg.aggregation };
    let est = estimate_id(&cloud, &opts)?;
    let report = out.start("estimate-id", cfg)?;
    report.info("points", cloud.len())?;
    report.info("ambient", cloud.dim())?;
    report.info("estimate", &est)?;
    if let Some(r) = cfg.expect {
        report.check(Check::within("intrinsic dimension in range", est.value, r.lo, r.hi));
    }
    out.json("id.json", &est)
}

fn synth_cloud(cfg: &SynthCloudConfig, out: &mut Out) -> Result<()> {
    if cfg.output.contains(['/', '\\']) {
        return Err(Error::Config("`output` is a file name inside the output directory".into()));
    }
    let cloud = sample_synthetic_manifold(&cfg.sampler, cfg.n, cfg.ambient, cfg.seed)?;
    let report = out.start("synth-cloud", cfg)?;
    report.info("intrinsic_dim", cfg.sampler.intrinsic_dim())?;
    report.info("points", cloud.len())?;
    cloud.write_csv(std::fs::File::create(out.dir.join(&cfg.output))?)?;
    out.report().output(&cfg.output);
    Ok(())
}

fn fit_scaling(cfg: &FitScalingConfig, out: &mut Out) -> Result<()> {
    let pts = read_loss_csv(open(&cfg.input)?)?;
    let fit: ScalingFit = fit_power_law(&pts, cfg.mode)?;
    let overlay = cfg.overlay_d.map(|d| predict_exponents(d, cfg.beta)).transpose()?;

    let report = out.start("fit-scaling", cfg)?;
    report.info("fit", fit)?;
    report.info("predicted", overlay)?;
    if let Some(e) = cfg.expect_exponent {
        report.check(Check::near("fitted exponent", fit.exponent, e.value, e.tolerance));
    }

    out.json("fit.json", &fit)?;
    let rows: Vec<Vec<f64>> = pts.iter().map(|&(n, l)| vec![n, l, fit.predict(n)]).collect();
    out.csv("fit.csv", &["n", "loss", "fitted"], &rows)?;
    let (a, b) = (pts[0].0, pts[pts.len() - 1].0);
    let mut series = vec![
        Series::markers("loss", pts.clone()),
        Series::line(format!("fit α = {:.4}", fit.exponent), vec![(a, fit.predict(a)), (b, fit.predict(b))]),
    ];
    if let Some(p) = overlay {
        // Anchored at the fit's geometric midpoint.
        let mid = (a * b).sqrt();
        let y = fit.predict(mid) - fit.offset.unwrap_or(0.0);
        let at = |n: f64| y * (n / mid).powf(-p.alpha_d);
        series.push(Series::line(format!("predicted α_D = {:.4} (d = {})", p.alpha_d, p.d), vec![(a, at(a)), (b, at(b))]));
    }
    out.svg("fit.svg", &series, Scale::LogLog, labels("loss scaling", "n", "loss"))
}

fn predict(cfg: &PredictConfig, out: &mut Out) -> Result<()> {
    let p = predict_exponents(cfg.d, cfg.beta)?;
    let curve = generalization_rate_curve(cfg.d, cfg.beta, cfg.big_d, &cfg.n_values)?;
    let arch = match cfg.architecture {
        Some(mode) => {
            if cfg.d.fract() != 0.0 {
                return Err(Error::Config("an architecture needs an integer d".into()));
            }
            let a = predicted_architecture(mode, cfg.d as usize, cfg.beta, cfg.sup_bound)?;
            Some((a, log_covering_number(&a.params)?))
        }
        None => None,
    };

    let report = out.start("predict", cfg)?;
    report.info("exponents", p)?;
    report.check(Check::near("alpha_N from alpha_D", convert_exponents(Known::AlphaD, p.alpha_d)?, p.alpha_n, 1e-12 * p.alpha_n));
    if curve.len() >= 3 {
        let slope = -fit_power_law(&curve, FitMode::Plain)?.exponent;
        report.check(Check::near("rate curve slope", slope, -p.alpha_d, 1e-9));
    }
    if let Some((a, log_n)) = arch {
        report.info("architecture", a)?;
        report.info("log_covering_number", log_n)?;
    }

    out.json("exponents.json", &p)?;
    let rows: Vec<Vec<f64>> = curve.iter().map(|&(n, r)| vec![n, r]).collect();
    out.csv("rate.csv", &["n", "rate"], &rows)?;
    out.svg(
        "rate.svg",
        &[Series::line(format!("α_D = {:.4}", p.alpha_d), curve)],
        Scale::LogLog,
        labels("generalization rate", "n", "D d² n^(−α_D)"),
    )
}

fn covering_bound(cfg: &CoveringBoundConfig, out: &mut Out) -> Result<()> {
    let log_n = log_covering_number(&cfg.params)?;
    let pf = cfg.params.covering_prefactor();
    let mut deltas = cfg.deltas.clone();
    deltas.sort_by(|a, b| b.total_cmp(a));
    deltas.dedup();
    let curve = deltas
        .iter()
        .map(|&delta| Ok((-delta.ln(), log_covering_number(&ArchParams { delta, ..cfg.params })?)))
        .collect::<Result<Vec<(f64, f64)>>>()?;
    let worst = curve
        .windows(2)
        .map(|w| ((w[1].1 - w[0].1) / (w[1].0 - w[0].0) - pf).abs() / pf)
        .fold(0.0, f64::max);

    let report = out.start("covering-bound", cfg)?;
    report.info("log_covering_number", log_n)?;
    report.info("prefactor", pf)?;
    if curve.len() >= 2 {
        report.check(Check::at_most("slope in -ln δ equals prefactor (relative)", worst, 1e-9));
    }

    let rows: Vec<Vec<f64>> = deltas.iter().zip(&curve).map(|(d, (x, y))| vec![*d, *x, *y]).collect();
    out.csv("covering.csv", &["delta", "neg_log_delta", "log_covering"], &rows)?;
    if curve.len() >= 2 {
        out.svg("covering.svg", &[Series::markers("ln N(δ)", curve)], Scale::Linear, labels("covering number", "−ln δ", "ln N(δ)"))?;
    }
    Ok(())
}
