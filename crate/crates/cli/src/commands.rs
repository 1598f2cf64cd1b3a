//! Data, analysis and diagnostic commands.

use std::path::{Path, PathBuf};

use anyhow::Context;
use canopy_core::data::container::{grid_container, read_grid, ArrayMeta, ContainerHeader, FORMAT_VERSION};
use canopy_core::data::footprint::{footprint_fraction, quadrature_fraction, solve_sigma_for_center_fraction, Region};
use canopy_core::data::synth::patch_seed;
use canopy_core::data::{synth_generate, Container, NormalizationSpec, PatchFile, SyntheticWorldConfig};
use canopy_core::evalmetrics::report::{
    metric_table, write_autocorrelation_csv, write_change_scatter_csv, write_growth_curves_csv,
    write_height_bins_csv, write_metric_csv,
};
use canopy_core::evalmetrics::{
    change_scatter, growth_curves, height_binned_errors, metric_report, spatial_autocorrelation, PairedSample,
};
use canopy_core::grid::Cube;
use canopy_core::growth::{
    disturbance_map, local_disturbance_index, pseudo_labels, read_series_csv, write_pseudo_label_csv, GrowthConfig,
};
use canopy_core::model::{describe as describe_model, linear_grad_check, model_grad_check, Model, ModelConfig};
use canopy_core::nn::{Checkpoint, GradCheckOptions};
use clap::{ArgGroup, Args, ValueEnum};
use serde::Serialize;

use crate::manifest::{create_dir, load_config, RunManifest};
use crate::train::{checkpoint_model, load_patches, Preset};
use crate::{NumericalFailure, Usage};

fn growth_config(path: Option<&Path>) -> anyhow::Result<GrowthConfig> {
    let cfg = match path {
        Some(p) => load_config(p)?,
        None => GrowthConfig::default(),
    };
    cfg.validate().map_err(|e| Usage(format!("growth config: {e}")))?;
    Ok(cfg)
}

fn model_config(preset: Option<&Preset>, config: Option<&Path>) -> anyhow::Result<ModelConfig> {
    let cfg = match (preset, config) {
        (_, Some(path)) => load_config(path)?,
        (Some(p), None) => p.config(),
        (None, None) => ModelConfig::tiny(),
    };
    cfg.validate().map_err(|e| Usage(format!("model config: {e}")))?;
    Ok(cfg)
}

// ---------------------------------------------------------------- synth

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// World config (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of patches.
    #[arg(long, default_value_t = 1)]
    patches: usize,
    /// Run seed; patch i is generated from a seed derived from this and i.
    #[arg(long)]
    seed: u64,
}

pub fn synth(a: SynthArgs, argv: &[String]) -> anyhow::Result<()> {
    let mut manifest = RunManifest::start("synth", argv).config(a.config.as_deref()).seed(a.seed);
    let base: SyntheticWorldConfig = match &a.config {
        Some(p) => load_config(p)?,
        None => SyntheticWorldConfig::default(),
    };
    base.validate().map_err(|e| Usage(format!("world config: {e}")))?;
    create_dir(&a.out)?;
    for i in 0..a.patches {
        let seed = patch_seed(a.seed, i as u64);
        let patch = synth_generate(&SyntheticWorldConfig { seed, ..base.clone() })?;
        let file = PatchFile {
            input: patch.input,
            labels: patch.labels,
            truth: patch.truth,
            normalization: NormalizationSpec::standard(),
            seed,
            pixel_size: base.pixel_size,
        };
        let path = a.out.join(format!("patch_{i:04}.cnpy"));
        file.write(&path).with_context(|| format!("writing {}", path.display()))?;
        manifest.outputs.push(path);
    }
    println!("wrote {} patches to {}", a.patches, a.out.display());
    manifest.finish(a.out.join("manifest.json"))
}

// ---------------------------------------------------------------- describe

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("model").args(["preset", "config"])))]
pub struct DescribeArgs {
    #[arg(long, value_enum)]
    preset: Option<PresetArg>,
    /// Model config (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PresetArg {
    Full,
    Desk,
    Tiny,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Full => Preset::Full,
            PresetArg::Desk => Preset::Desk,
            PresetArg::Tiny => Preset::Tiny,
        }
    }
}

pub fn describe(a: DescribeArgs) -> anyhow::Result<()> {
    let preset = a.preset.map(Preset::from).or(Some(Preset::Full));
    let cfg = model_config(preset.as_ref(), a.config.as_deref())?;
    print!("{}", describe_model(&cfg)?);
    Ok(())
}

// ---------------------------------------------------------------- predict

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Head {
    Prediction,
    Reference,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Checkpoint written by `pretrain` or `finetune`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory of patch files.
    #[arg(long)]
    data: PathBuf,
    /// Output directory; one height grid per patch, same file name.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "prediction")]
    head: Head,
}

pub fn predict(a: PredictArgs, argv: &[String]) -> anyhow::Result<()> {
    let mut manifest = RunManifest::start("predict", argv);
    let ck = Checkpoint::<f32>::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let cfg = checkpoint_model(&ck)?;
    let (model, mut store) = Model::new::<f32>(&cfg, 0)?;
    store.load_values_from(&ck.to_store(|n| !n.starts_with("optimizer/")))?;
    let patches = load_patches(&a.data, &cfg)?;
    create_dir(&a.out)?;
    for (path, p) in &patches {
        let out = model.predict(&store, &p.input)?;
        let t = match a.head {
            Head::Prediction => out.prediction,
            Head::Reference => out.reference,
        };
        let cube = Cube::new(cfg.years, cfg.height, cfg.width, t.data.iter().map(|v| *v as f64).collect())?;
        let dest = a.out.join(path.file_name().expect("patch files have names"));
        grid_container(&cube, p.pixel_size).write(&dest)?;
        manifest.inputs.push(path.clone());
        manifest.outputs.push(dest);
    }
    manifest.inputs.push(a.checkpoint);
    println!("wrote {} grids to {}", patches.len(), a.out.display());
    manifest.finish(a.out.join("manifest.json"))
}

// ---------------------------------------------------------------- pseudolabel

#[derive(Debug, Args)]
pub struct PseudolabelArgs {
    /// CSV with header `y1..yY`, one pixel per row.
    #[arg(long)]
    input: PathBuf,
    /// Growth config (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output CSV `y1..yY,split_year`; a manifest is written beside it.
    #[arg(long)]
    out: PathBuf,
}

pub fn pseudolabel(a: PseudolabelArgs, argv: &[String]) -> anyhow::Result<()> {
    let mut manifest = RunManifest::start("pseudolabel", argv).config(a.config.as_deref());
    let cfg = growth_config(a.config.as_deref())?;
    let series = read_series_csv(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    if series.is_empty() {
        std::fs::write(&a.out, "")?;
    } else {
        // Rows carry no spatial context, so split years come from the local index.
        let rows = series
            .iter()
            .map(|z| pseudo_labels(z, local_disturbance_index(z, &cfg), &cfg))
            .collect::<canopy_core::Result<Vec<_>>>()?;
        write_pseudo_label_csv(&a.out, &rows, series[0].years())?;
    }
    println!("{} series -> {}", series.len(), a.out.display());
    manifest.inputs.push(a.input);
    manifest.outputs.push(a.out.clone());
    let mut name = a.out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    manifest.finish(a.out.with_file_name(name))
}

// ---------------------------------------------------------------- disturbance

#[derive(Debug, Args)]
pub struct DisturbanceArgs {
    /// Height grid container (`heights`, or a patch's `truth`).
    #[arg(long)]
    grid: PathBuf,
    /// Growth config (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Serialize)]
struct DisturbanceSummary {
    rows: usize,
    cols: usize,
    years: usize,
    /// Pixels per split year; entry k is year k + 1, the last entry counts undisturbed pixels.
    counts_per_year: Vec<usize>,
    disturbed_pixels: usize,
}

pub fn disturbance(a: DisturbanceArgs, argv: &[String]) -> anyhow::Result<()> {
    let mut manifest = RunManifest::start("disturbance", argv).config(a.config.as_deref());
    let cfg = growth_config(a.config.as_deref())?;
    let (cube, pixel_size) = read_grid(&a.grid).with_context(|| format!("reading {}", a.grid.display()))?;
    let map = disturbance_map(&cube, &cfg)?;
    create_dir(&a.out)?;
    let container = Container {
        header: ContainerHeader {
            format_version: FORMAT_VERSION,
            arrays: vec![ArrayMeta {
                name: "disturbance".into(),
                shape: vec![map.rows, map.cols],
            }],
            channel_names: Vec::new(),
            normalization: None,
            seed: None,
            pixel_size,
        },
        data: vec![map.indices.iter().map(|v| *v as f32).collect()],
    };
    let map_path = a.out.join("disturbance.cnpy");
    container.write(&map_path)?;
    let counts = map.counts_per_year();
    let summary = DisturbanceSummary {
        rows: map.rows,
        cols: map.cols,
        years: map.years,
        disturbed_pixels: counts[..map.years - 1].iter().sum(),
        counts_per_year: counts,
    };
    let summary_path = a.out.join("summary.json");
    let text = serde_json::to_string_pretty(&summary)?;
    std::fs::write(&summary_path, text.clone() + "\n")?;
    println!("{text}");
    manifest.inputs.push(a.grid);
    manifest.outputs.extend([map_path, summary_path]);
    manifest.finish(a.out.join("manifest.json"))
}

// ---------------------------------------------------------------- evaluate

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Prediction grid; repeat together with --labels for several patches.
    #[arg(long, required = true)]
    pred: Vec<PathBuf>,
    /// Labeled patch matching the --pred at the same position.
    #[arg(long, required = true)]
    labels: Vec<PathBuf>,
    /// Labels below this height (m) are excluded from all metrics but R²_all.
    #[arg(long, default_value_t = 5.0)]
    floor: f64,
    /// Width (m) of the label-height bins.
    #[arg(long, default_value_t = 5.0)]
    bins: f64,
    /// First-to-last-year drop (m) marking a pixel as disturbed in the change scatter.
    #[arg(long, default_value_t = 5.0)]
    change_threshold: f64,
    /// Width (m) of the change-scatter and growth-curve bins.
    #[arg(long, default_value_t = 1.0)]
    change_bin: f64,
    /// Distance bin (m) of the spatial autocorrelation.
    #[arg(long, default_value_t = 50.0)]
    lag_bin: f64,
    /// Largest pair distance (m) of the spatial autocorrelation.
    #[arg(long, default_value_t = 1000.0)]
    max_lag: f64,
    /// Year (1-based) whose labels enter the autocorrelation; defaults to the last.
    #[arg(long)]
    autocorr_year: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

pub fn evaluate(a: EvaluateArgs, argv: &[String]) -> anyhow::Result<()> {
    if a.pred.len() != a.labels.len() {
        anyhow::bail!(Usage(format!("{} --pred but {} --labels", a.pred.len(), a.labels.len())));
    }
    let mut manifest = RunManifest::start("evaluate", argv);
    let mut samples = Vec::new();
    let (mut start, mut end) = (Vec::new(), Vec::new());
    let mut cubes = Vec::new();
    let mut points = Vec::new();
    let mut x_offset = 0.0;
    let mut pixel = None;
    for (pp, lp) in a.pred.iter().zip(&a.labels) {
        let (pred, px) = read_grid(pp).with_context(|| format!("reading {}", pp.display()))?;
        let patch = PatchFile::read(lp).with_context(|| format!("reading {}", lp.display()))?;
        let l = &patch.labels;
        if (pred.years, pred.rows, pred.cols) != (l.years, l.rows, l.cols) {
            anyhow::bail!(canopy_core::Error::Shape {
                stage: "evaluate".into(),
                detail: format!(
                    "{} is {}x{}x{}, {} is {}x{}x{}",
                    pp.display(),
                    pred.years,
                    pred.rows,
                    pred.cols,
                    lp.display(),
                    l.years,
                    l.rows,
                    l.cols
                ),
            });
        }
        if *pixel.get_or_insert(px) != px {
            anyhow::bail!(canopy_core::Error::Format("prediction grids differ in pixel size".into()));
        }
        let ac_year = a.autocorr_year.unwrap_or(l.years);
        if ac_year == 0 || ac_year > l.years {
            anyhow::bail!(Usage(format!("--autocorr-year {ac_year} outside 1..={}", l.years)));
        }
        for y in 0..l.years {
            for r in 0..l.rows {
                for c in 0..l.cols {
                    let i = l.index(y, r, c);
                    if !l.valid[i] {
                        continue;
                    }
                    let (x, yy) = (x_offset + (c as f64 + 0.5) * px, (r as f64 + 0.5) * px);
                    let label = l.heights[i] as f64;
                    samples.push(PairedSample {
                        predicted: pred.get(y, r, c),
                        label,
                        x,
                        y: yy,
                        year: y as i32 + 1,
                    });
                    if y + 1 == ac_year {
                        points.push((x, yy, label));
                    }
                }
            }
        }
        start.extend_from_slice(pred.year_slice(0));
        end.extend_from_slice(pred.year_slice(pred.years - 1));
        // Later patches sit beyond the largest lag, so no pair spans two patches.
        x_offset += pred.cols as f64 * px + a.max_lag + px;
        cubes.push(pred);
        manifest.inputs.extend([pp.clone(), lp.clone()]);
    }
    if samples.is_empty() {
        anyhow::bail!(canopy_core::Error::Format("no valid labels intersect the predictions".into()));
    }
    let years = cubes[0].years;
    if cubes.iter().any(|c| c.years != years) {
        anyhow::bail!(canopy_core::Error::Format("prediction grids differ in year count".into()));
    }
    // Growth curves are per pixel, so all patches are laid out as one row.
    let n: usize = cubes.iter().map(|c| c.rows * c.cols).sum();
    let mut data = Vec::with_capacity(years * n);
    for y in 0..years {
        for c in &cubes {
            data.extend_from_slice(c.year_slice(y));
        }
    }
    let series = Cube::new(years, 1, n, data)?;
    let px = pixel.unwrap_or(10.0);

    let report = metric_report(&samples, a.floor)?;
    let bins = height_binned_errors(&samples, a.bins)?;
    let change = change_scatter(&start, &end, a.change_threshold, a.change_bin)?;
    let growth = if years >= 2 { Some(growth_curves(&series, a.change_bin, px)?) } else { None };
    let lags = spatial_autocorrelation(&points, a.lag_bin, a.max_lag).ok();

    create_dir(&a.out)?;
    let table = metric_table(&report);
    print!("{table}");
    let out = |name: &str| a.out.join(name);
    std::fs::write(out("metrics.txt"), &table)?;
    write_metric_csv(out("metrics.csv"), &report)?;
    write_height_bins_csv(out("height_bins.csv"), &bins)?;
    write_change_scatter_csv(out("change_scatter.csv"), &change)?;
    let mut written = vec!["metrics.txt", "metrics.csv", "height_bins.csv", "change_scatter.csv"];
    if let Some(g) = &growth {
        write_growth_curves_csv(out("growth_curves.csv"), g)?;
        written.push("growth_curves.csv");
    }
    if let Some(l) = &lags {
        write_autocorrelation_csv(out("autocorrelation.csv"), l)?;
        written.push("autocorrelation.csv");
    }
    manifest.outputs = written.into_iter().map(out).collect();
    manifest.finish(out("manifest.json"))
}

// ---------------------------------------------------------------- footprint

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("mode").required(true).args(["sigma", "solve_center_fraction"])))]
#[command(group(ArgGroup::new("region").args(["square", "rect", "disc"])))]
pub struct FootprintArgs {
    /// Standard deviation (m) of the isotropic Gaussian footprint.
    #[arg(long)]
    sigma: Option<f64>,
    /// Solve sigma so that the centered square of side --side holds this fraction.
    #[arg(long)]
    solve_center_fraction: Option<f64>,
    /// Side (m) of the centered square used by the solver.
    #[arg(long, default_value_t = 10.0)]
    side: f64,
    /// Centered square of this side (m).
    #[arg(long)]
    square: Option<f64>,
    /// Rectangle `x0,y0,x1,y1` (m, footprint center at the origin).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    rect: Option<Vec<f64>>,
    /// Disc `cx,cy,r` (m).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    disc: Option<Vec<f64>>,
    /// Integrate numerically even where a closed form exists.
    #[arg(long)]
    quadrature: bool,
    /// Absolute tolerance of the numerical integration.
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
}

pub fn footprint(a: FootprintArgs) -> anyhow::Result<()> {
    if a.rect.as_ref().is_some_and(|r| r.len() != 4) {
        anyhow::bail!(Usage("--rect takes x0,y0,x1,y1".into()));
    }
    if a.disc.as_ref().is_some_and(|d| d.len() != 3) {
        anyhow::bail!(Usage("--disc takes cx,cy,r".into()));
    }
    let region = match (a.square, &a.rect, &a.disc) {
        (Some(s), _, _) => Some(Region::centered_square(s)),
        (_, Some(r), _) => Some(Region::Rect {
            x0: r[0],
            y0: r[1],
            x1: r[2],
            y1: r[3],
        }),
        (_, _, Some(d)) => Some(Region::Disc {
            cx: d[0],
            cy: d[1],
            r: d[2],
        }),
        _ => None,
    };
    let sigma = match (a.sigma, a.solve_center_fraction) {
        (Some(s), _) => {
            if !(s.is_finite() && s > 0.0) {
                anyhow::bail!(Usage(format!("--sigma must be positive, got {s}")));
            }
            s
        }
        (None, Some(f)) => {
            let s = solve_sigma_for_center_fraction(f, a.side)?;
            println!("sigma: {s:.9}");
            s
        }
        (None, None) => unreachable!("clap requires one mode"),
    };
    match region {
        Some(r) => {
            let f = if a.quadrature {
                quadrature_fraction(sigma, &r, a.tol)?
            } else {
                footprint_fraction(sigma, &r)?
            };
            println!("fraction: {f:.9} ({:.4}%)", 100.0 * f);
        }
        None if a.sigma.is_some() => anyhow::bail!(Usage("give a region: --square, --rect or --disc".into())),
        None => {}
    }
    Ok(())
}

// ---------------------------------------------------------------- gradcheck

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("model").args(["preset", "config", "linear"])))]
pub struct GradcheckArgs {
    #[arg(long, value_enum)]
    preset: Option<PresetArg>,
    /// Model config (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Check a single affine layer instead of a model.
    #[arg(long)]
    linear: bool,
    /// Seeds the weights, the input and the sampled coordinates.
    #[arg(long)]
    seed: u64,
    /// Largest acceptable relative error.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Sampled coordinates per parameter tensor.
    #[arg(long, default_value_t = 2)]
    coords: usize,
    /// Random whole-model directions.
    #[arg(long, default_value_t = 4)]
    projections: usize,
    /// Corrupt the analytic gradient; the check must then fail.
    #[arg(long)]
    inject_bug: bool,
}

pub fn gradcheck(a: GradcheckArgs) -> anyhow::Result<()> {
    let opts = GradCheckOptions {
        coords_per_param: a.coords,
        projections: a.projections,
        seed: a.seed,
        corrupt_gradient: a.inject_bug,
        ..GradCheckOptions::default()
    };
    let report = if a.linear {
        linear_grad_check(a.seed, &opts)?
    } else {
        let preset = a.preset.map(Preset::from);
        let cfg = model_config(preset.as_ref(), a.config.as_deref())?;
        model_grad_check(&cfg, a.seed, &opts)?
    };
    let pass = report.max_rel_error < a.tolerance;
    println!("checks: {}", report.checks);
    println!("max relative error: {:.3e} (worst: {})", report.max_rel_error, report.worst);
    println!("{} (tolerance {:.0e})", if pass { "PASS" } else { "FAIL" }, a.tolerance);
    if !pass {
        anyhow::bail!(NumericalFailure(format!(
            "max relative error {:.3e} exceeds {:.0e}",
            report.max_rel_error, a.tolerance
        )));
    }
    Ok(())
}
