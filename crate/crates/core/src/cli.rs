//! Command-line surface: quantize, dequantize, report, stats, search.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::alloc::{
    equivalent_bits_of, exhaustive_search, heuristic_search, plan_fusion, FusionSpec, MatrixProfile,
    OrSplit, Preset, SearchConfig, SearchMatrix,
};
use crate::error::{ClaqError, Result};
use crate::kmeans::{ClusterConfig, Solver, DEFAULT_MAX_ITER, DEFAULT_ORACLE_CAP, DEFAULT_TOL};
use crate::outlier::{model_outlier_stats, DEFAULT_SCALE, TOP_DECILE};
use crate::quantizer::{
    hessian_from_activations, quantize_model, CodebookSource, HessianState, QuantOptions,
    DEFAULT_DAMP_RATIO,
};
use crate::synthetic::{
    matrix_name, parse_synthetic, synthetic_calibration, synthetic_model, FixtureSpec,
    DEFAULT_CALIB_SAMPLES,
};
use crate::tensor_store::{
    dequantize_tensor, encode_packed, load_model, load_packed, measure_size, save_model, ModelWeights,
    PackedLayout, PackedModel, SizeReport,
};

pub const THREADS_ENV: &str = "CLAQ_THREADS";

#[derive(Parser, Debug, Clone, Serialize)]
#[command(name = "claq", version, about = "Column-level adaptive K-Means weight quantization")]
pub struct Cli {
    /// Worker threads; CLAQ_THREADS takes precedence when set.
    #[arg(long, global = true)]
    #[serde(skip)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Clone, Serialize)]
#[serde(tag = "subcommand", rename_all = "lowercase")]
pub enum Command {
    /// Quantize a manifest+blob model into a CLAQPK01 container.
    Quantize(QuantizeArgs),
    /// Expand a container back into a manifest+blob model.
    Dequantize(DequantizeArgs),
    /// Storage accounting of a container.
    Report(ReportArgs),
    /// Outlier statistics as CSV.
    Stats(StatsArgs),
    /// Search which matrices get a 2&4 or 2&3 column mix.
    Search(SearchArgs),
    /// Write a seeded synthetic model.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CodebookArg {
    Updated,
    Original,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct QuantizeArgs {
    /// Input model manifest.
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Plan JSON path (default: <out>.plan.json).
    #[arg(long)]
    pub plan: Option<PathBuf>,
    /// Report JSON path (default: <out>.report.json).
    #[arg(long)]
    pub report: Option<PathBuf>,

    /// Named budget; used when no custom budget flag is given.
    #[arg(long, value_parser = ["2.12", "2.24", "3.12", "3.23"],
          conflicts_with_all = ["base_bits", "ap_increment", "or_budget"])]
    pub preset: Option<String>,
    #[arg(long)]
    pub base_bits: Option<u8>,
    /// Extra index bits per parameter spent on wider columns.
    #[arg(long)]
    pub ap_increment: Option<f64>,
    /// Bit-width of the wider columns.
    #[arg(long, default_value_t = 4)]
    pub ap_high_bits: u8,
    /// Outlier reservation budget in bits per parameter.
    #[arg(long)]
    pub or_budget: Option<f64>,
    /// Outlier split setting (1: 19/81, 2: 28/72, 3: 37/63).
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u8).range(1..=3))]
    pub or_setting: u8,
    /// Custom share of the outlier budget for the top columns.
    #[arg(long)]
    pub or_top_share: Option<f64>,
    #[arg(long, default_value_t = TOP_DECILE)]
    pub top_fraction: f64,
    /// Outlier scale S.
    #[arg(long, default_value_t = DEFAULT_SCALE)]
    pub scale: f64,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_MAX_ITER)]
    pub max_iter: usize,
    #[arg(long, default_value_t = DEFAULT_TOL)]
    pub tol: f64,
    /// Use the exact 1-D clustering solver instead of Lloyd.
    #[arg(long)]
    pub exact: bool,

    /// Calibration source: a manifest path or synthetic:<seed>.
    #[arg(long, default_value = "synthetic:0")]
    pub calib: String,
    #[arg(long, default_value_t = DEFAULT_CALIB_SAMPLES)]
    pub calib_samples: usize,
    #[arg(long)]
    pub no_compensate: bool,
    #[arg(long, default_value_t = DEFAULT_DAMP_RATIO)]
    pub damp: f64,
    #[arg(long)]
    pub act_order: bool,
    #[arg(long, value_enum, default_value_t = CodebookArg::Updated)]
    pub codebook_source: CodebookArg,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct DequantizeArgs {
    pub input: PathBuf,
    /// Output manifest path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct ReportArgs {
    pub input: PathBuf,
    /// JSON output (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-matrix CSV table.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct StatsArgs {
    pub input: PathBuf,
    #[arg(long, default_value_t = DEFAULT_SCALE)]
    pub scale: f64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct SearchArgs {
    pub input: PathBuf,
    /// Average bits per parameter.
    #[arg(long)]
    pub target_bits: f64,
    #[arg(long, default_value_t = DEFAULT_SCALE)]
    pub scale: f64,
    /// Comma-separated high-precision fractions for 2&3 matrices.
    #[arg(long, value_delimiter = ',')]
    pub p3_grid: Option<Vec<f64>>,
    /// Comma-separated high-precision fractions for 2&4 matrices.
    #[arg(long, value_delimiter = ',')]
    pub p4_grid: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub m3_grid: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub m4_grid: Option<Vec<usize>>,
    #[arg(long, default_value_t = 3.0)]
    pub ps3: f64,
    #[arg(long, default_value_t = 4.0)]
    pub ps4: f64,
    /// Also run the direct enumeration and fail on any disagreement.
    #[arg(long)]
    pub verify_exhaustive: bool,
    /// JSON output (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthKind {
    /// Laplace body with a few extreme columns.
    Heavy,
    /// Two planted outliers in every column.
    Uniform,
    /// Activations for file-based calibration, one tensor per matrix.
    Calibration,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct SynthArgs {
    #[arg(long, value_enum, default_value_t = SynthKind::Heavy)]
    pub kind: SynthKind,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub matrices: usize,
    /// Rows per matrix (samples for calibration).
    #[arg(long, default_value_t = 512)]
    pub rows: usize,
    #[arg(long, default_value_t = 512)]
    pub cols: usize,
    /// Output manifest path.
    #[arg(long)]
    pub out: PathBuf,
}

/// Echo written into every artifact.
#[derive(Debug, Serialize)]
pub struct RunConfig<'a> {
    pub tool: &'static str,
    pub version: &'static str,
    #[serde(flatten)]
    pub command: &'a Command,
}

impl<'a> RunConfig<'a> {
    pub fn new(command: &'a Command) -> Self {
        Self {
            tool: "claq",
            version: env!("CARGO_PKG_VERSION"),
            command,
        }
    }
}

/// `CLAQ_THREADS` wins over the flag; `None` means rayon's default.
pub fn thread_count(flag: Option<usize>) -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| ClaqError::Invalid(format!("{THREADS_ENV}={v:?} is not a thread count"))),
        Err(_) => Ok(flag),
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let threads = thread_count(cli.threads)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| ClaqError::Invalid(format!("thread pool: {e}")))?;
    pool.install(|| match &cli.command {
        Command::Quantize(a) => cmd_quantize(&cli.command, a),
        Command::Dequantize(a) => cmd_dequantize(a),
        Command::Report(a) => cmd_report(&cli.command, a),
        Command::Stats(a) => cmd_stats(&cli.command, a),
        Command::Search(a) => cmd_search(&cli.command, a),
        Command::Synth(a) => cmd_synth(a),
    })
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| ClaqError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn write_json<T: Serialize>(path: Option<&Path>, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    match path {
        Some(p) => fs::write(p, text).map_err(|e| ClaqError::io(p, e)),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| ClaqError::io("<stdout>", e)),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| ClaqError::io(path, e))
}

/// `m.claq` -> `m.<suffix>`.
fn sidecar(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.{suffix}"))
}

impl QuantizeArgs {
    pub fn fusion_spec(&self) -> Result<FusionSpec> {
        let custom = self.base_bits.is_some() || self.ap_increment.is_some() || self.or_budget.is_some();
        let mut spec = if custom {
            FusionSpec::custom(
                self.base_bits.unwrap_or(2),
                self.ap_increment.unwrap_or(0.0),
                self.or_budget.unwrap_or(0.0),
            )
        } else {
            Preset::parse(self.preset.as_deref().unwrap_or("2.12"))?.spec()
        };
        if custom {
            spec.high_bits = self.ap_high_bits;
        }
        spec.split = match self.or_top_share {
            Some(top) => OrSplit::new(top, 1.0 - top)?,
            None => OrSplit::setting(self.or_setting)?,
        };
        spec.top_fraction = self.top_fraction;
        spec.scale = self.scale;
        spec.validate()?;
        Ok(spec)
    }

    pub fn quant_options(&self) -> QuantOptions {
        QuantOptions {
            cluster: ClusterConfig {
                seed: self.seed,
                max_iter: self.max_iter,
                tol: self.tol,
                solver: if self.exact { Solver::Exact } else { Solver::Lloyd },
                oracle_cap: DEFAULT_ORACLE_CAP,
                max_distinct: None,
            },
            damp_ratio: self.damp,
            act_order: self.act_order,
            codebook_source: match self.codebook_source {
                CodebookArg::Updated => CodebookSource::Updated,
                CodebookArg::Original => CodebookSource::Original,
            },
        }
    }
}

/// One Hessian per matrix from the calibration source.
pub fn load_hessians(
    model: &ModelWeights,
    source: &str,
    samples: usize,
    damp: f64,
) -> Result<Vec<HessianState>> {
    if let Some(seed) = parse_synthetic(source) {
        return model
            .matrices
            .par_iter()
            .enumerate()
            .map(|(i, m)| {
                let x = synthetic_calibration(seed, i as u64, samples, m.cols())?;
                hessian_from_activations(&x, damp)
            })
            .collect();
    }
    if source.starts_with("synthetic:") {
        return Err(ClaqError::Invalid(format!("bad synthetic calibration source {source:?}")));
    }
    let calib = load_model(source)?;
    model
        .matrices
        .par_iter()
        .map(|m| {
            let x = calib.get(m.name()).ok_or_else(|| {
                ClaqError::Invalid(format!("calibration has no activations for {:?}", m.name()))
            })?;
            if x.cols() != m.cols() {
                return Err(ClaqError::Shape(format!(
                    "calibration for {:?} has width {}, matrix has {} columns",
                    m.name(),
                    x.cols(),
                    m.cols()
                )));
            }
            hessian_from_activations(x, damp)
        })
        .collect()
}

#[derive(Serialize)]
struct PlanArtifact<'a> {
    run_config: RunConfig<'a>,
    input_sha256: &'a str,
    allocation: &'a crate::alloc::ModelAllocation,
}

#[derive(Serialize)]
struct QuantizeReport<'a> {
    run_config: RunConfig<'a>,
    input_sha256: &'a str,
    options: QuantOptions,
    fusion: FusionSpec,
    size: SizeReport,
    planned_size: SizeReport,
    layout: PackedLayout,
    quant: &'a crate::quantizer::QuantReport,
}

fn cmd_quantize(command: &Command, a: &QuantizeArgs) -> Result<()> {
    let spec = a.fusion_spec()?;
    let opts = a.quant_options();
    if a.calib_samples == 0 {
        return Err(ClaqError::Invalid("--calib-samples must be > 0".into()));
    }
    let input_sha = sha256_file(&a.input)?;
    let model = load_model(&a.input)?;
    let profiles = MatrixProfile::of_model(&model, spec.scale)?;
    let alloc = plan_fusion(&profiles, spec)?;
    let hessians = if a.no_compensate {
        None
    } else {
        Some(load_hessians(&model, &a.calib, a.calib_samples, a.damp)?)
    };
    let (tensors, quant) = quantize_model(&model, &alloc, hessians.as_deref(), &opts)?;

    let run_config = RunConfig::new(command);
    let mut metadata = model.metadata.clone();
    metadata.insert("claq.input_sha256".into(), input_sha.clone());
    metadata.insert("claq.run_config".into(), serde_json::to_string(&run_config)?);
    let packed = PackedModel { tensors, metadata };
    let bytes = encode_packed(&packed)?;
    fs::write(&a.out, &bytes).map_err(|e| ClaqError::io(&a.out, e))?;

    let size = measure_size(&packed.tensors);
    let planned_size = equivalent_bits_of(&alloc);
    if size != planned_size {
        log::warn!("packed size differs from the plan's accounting");
    }
    let plan_path = a.plan.clone().unwrap_or_else(|| sidecar(&a.out, "plan.json"));
    let report_path = a.report.clone().unwrap_or_else(|| sidecar(&a.out, "report.json"));
    write_json(
        Some(&plan_path),
        &PlanArtifact {
            run_config: RunConfig::new(command),
            input_sha256: &input_sha,
            allocation: &alloc,
        },
    )?;
    write_json(
        Some(&report_path),
        &QuantizeReport {
            run_config,
            input_sha256: &input_sha,
            options: opts,
            fusion: spec,
            size,
            planned_size,
            layout: PackedLayout::of(&bytes)?,
            quant: &quant,
        },
    )?;
    println!(
        "{}: {} matrices, {:.4} index bits/param, {:.4} with outliers, relative error {:.5}",
        a.out.display(),
        packed.tensors.len(),
        size.equivalent_bits_index_only,
        size.equivalent_bits_attributed,
        quant.relative
    );
    Ok(())
}

fn cmd_dequantize(a: &DequantizeArgs) -> Result<()> {
    let packed = load_packed(&a.input)?;
    let matrices = packed.tensors.par_iter().map(dequantize_tensor).collect();
    let model = ModelWeights::new(matrices, packed.metadata)?;
    save_model(&model, &a.out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatrixSizeRow {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub cols_2bit: usize,
    pub cols_3bit: usize,
    pub cols_4bit: usize,
    pub outliers: usize,
    pub index_bits: u64,
    pub codebook_bits: u64,
    pub outlier_bits: u64,
    pub precision_map_bits: u64,
    pub equivalent_bits_index_only: f64,
    pub equivalent_bits_total: f64,
}

pub fn size_rows(packed: &PackedModel) -> Vec<MatrixSizeRow> {
    packed
        .tensors
        .iter()
        .map(|t| {
            let s = measure_size(std::slice::from_ref(t));
            let count = |b: u8| t.precision_map().iter().filter(|&&x| x == b).count();
            MatrixSizeRow {
                name: t.name().to_string(),
                rows: t.rows(),
                cols: t.cols(),
                cols_2bit: count(2),
                cols_3bit: count(3),
                cols_4bit: count(4),
                outliers: t.outliers().len(),
                index_bits: s.index_bits,
                codebook_bits: s.codebook_bits,
                outlier_bits: s.outlier_bits,
                precision_map_bits: s.precision_map_bits,
                equivalent_bits_index_only: s.equivalent_bits_index_only,
                equivalent_bits_total: s.equivalent_bits_total,
            }
        })
        .collect()
}

#[derive(Serialize)]
struct ReportArtifact<'a> {
    run_config: RunConfig<'a>,
    input_sha256: String,
    size: SizeReport,
    layout: PackedLayout,
    matrices: Vec<MatrixSizeRow>,
}

fn cmd_report(command: &Command, a: &ReportArgs) -> Result<()> {
    let bytes = fs::read(&a.input).map_err(|e| ClaqError::io(&a.input, e))?;
    let packed = crate::tensor_store::decode_packed(&bytes)?;
    let matrices = size_rows(&packed);
    if let Some(p) = &a.csv {
        let mut w = csv::Writer::from_writer(create(p)?);
        for row in &matrices {
            w.serialize(row).map_err(crate::outlier::csv_err)?;
        }
        w.flush().map_err(|e| ClaqError::io(p, e))?;
    }
    write_json(
        a.out.as_deref(),
        &ReportArtifact {
            run_config: RunConfig::new(command),
            input_sha256: hex::encode(Sha256::digest(&bytes)),
            size: measure_size(&packed.tensors),
            layout: PackedLayout::of(&bytes)?,
            matrices,
        },
    )
}

#[derive(Serialize)]
struct StatsRun<'a> {
    run_config: RunConfig<'a>,
    input_sha256: String,
    files: [&'static str; 3],
}

pub const STATS_FILES: [&str; 3] = ["matrix_stats.csv", "layer_stats.csv", "sorted_ratios.csv"];

fn cmd_stats(command: &Command, a: &StatsArgs) -> Result<()> {
    let input_sha256 = sha256_file(&a.input)?;
    let model = load_model(&a.input)?;
    let stats = model_outlier_stats(&model, a.scale)?;
    fs::create_dir_all(&a.out_dir).map_err(|e| ClaqError::io(&a.out_dir, e))?;
    stats.write_matrix_csv(create(&a.out_dir.join(STATS_FILES[0]))?)?;
    stats.write_layer_csv(create(&a.out_dir.join(STATS_FILES[1]))?)?;
    stats.write_sorted_ratio_csv(create(&a.out_dir.join(STATS_FILES[2]))?)?;
    write_json(
        Some(&a.out_dir.join("run.json")),
        &StatsRun {
            run_config: RunConfig::new(command),
            input_sha256,
            files: STATS_FILES,
        },
    )
}

#[derive(Serialize)]
struct SearchArtifact<'a> {
    run_config: RunConfig<'a>,
    input_sha256: String,
    result: crate::alloc::SearchResult,
    exhaustive_agrees: Option<bool>,
}

fn cmd_search(command: &Command, a: &SearchArgs) -> Result<()> {
    let input_sha256 = sha256_file(&a.input)?;
    let model = load_model(&a.input)?;
    let profiles = MatrixProfile::of_model(&model, a.scale)?;
    let matrices: Vec<SearchMatrix> = profiles
        .iter()
        .map(|p| SearchMatrix {
            name: p.name.clone(),
            params: (p.rows * p.profile.cols()) as u64,
            outlier_ratio: p.profile.matrix_ratio(),
        })
        .collect();
    let mut config = SearchConfig::new(a.target_bits);
    config.ps3 = a.ps3;
    config.ps4 = a.ps4;
    if let Some(g) = &a.p3_grid {
        config.p3_grid = g.clone();
    }
    if let Some(g) = &a.p4_grid {
        config.p4_grid = g.clone();
    }
    config.m3_grid = a.m3_grid.clone();
    config.m4_grid = a.m4_grid.clone();
    let result = heuristic_search(&matrices, &config)?;
    let exhaustive_agrees = if a.verify_exhaustive {
        let check = exhaustive_search(&matrices, &config)?;
        if check != result {
            return Err(ClaqError::Numerical(
                "heuristic search disagrees with exhaustive enumeration".into(),
            ));
        }
        Some(true)
    } else {
        None
    };
    write_json(
        a.out.as_deref(),
        &SearchArtifact {
            run_config: RunConfig::new(command),
            input_sha256,
            result,
            exhaustive_agrees,
        },
    )
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let model = match a.kind {
        SynthKind::Heavy | SynthKind::Uniform => {
            let base = if a.kind == SynthKind::Heavy {
                FixtureSpec::heavy_tailed()
            } else {
                FixtureSpec::uniform_outliers()
            };
            synthetic_model(&base.with_shape(a.matrices, a.rows, a.cols), a.seed)?
        }
        SynthKind::Calibration => {
            let matrices = (0..a.matrices)
                .map(|i| {
                    let x = synthetic_calibration(a.seed, i as u64, a.rows, a.cols)?;
                    crate::tensor_store::WeightMatrix::new(matrix_name(i), x.rows(), x.cols(), x.data().to_vec())
                })
                .collect::<Result<Vec<_>>>()?;
            ModelWeights::new(matrices, Default::default())?
        }
    };
    save_model(&model, &a.out)
}
