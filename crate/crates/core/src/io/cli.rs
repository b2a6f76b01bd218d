//! Command-line entry points: gen, fit, eval, export, ablate.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use super::mesh::export_mesh;
use super::ply::{read_pointcloud, write_pointcloud, Encoding};
use super::shapes::{gen_shape, normalize, Shape, ShapeParams, ShapeSpec, Transform};
use super::store::{load_atlas, load_config, save_atlas, version_string, InputSource, RunManifest};
use crate::error::{Error, Result};
use crate::fit::{evaluate, FitConfig, FitOutcome, Trainer, Variant};
use crate::losses::LossBreakdown;
use crate::metrics::MetricsReport;
use crate::spatial::GroundTruthCloud;

#[derive(Debug, Parser)]
#[command(name = "patchfit", version, about = "Fit a patch atlas to a point cloud")]
pub struct Cli {
    /// Random seed; overrides the configuration file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for `ablate`.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Log per-iteration records.
    #[arg(long, short, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a synthetic shape into a PLY file.
    Gen(GenArgs),
    /// Fit an atlas to a point cloud.
    Fit(FitArgs),
    /// Compute metrics of a stored atlas.
    Eval(EvalArgs),
    /// Write per-patch meshes as OBJ.
    Export(ExportArgs),
    /// Fit several variants from one pretrained state.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub kind: String,
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long)]
    pub side: Option<f64>,
    #[arg(long)]
    pub radius: Option<f64>,
    #[arg(long)]
    pub major: Option<f64>,
    #[arg(long)]
    pub minor: Option<f64>,
    /// Box edge lengths as `a,b,c`.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    pub size: Option<Vec<f64>>,
    #[arg(long)]
    pub hole_radius: Option<f64>,
    #[arg(long)]
    pub gap: Option<f64>,
    /// Write ASCII instead of binary.
    #[arg(long)]
    pub ascii: bool,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Target point cloud (PLY).
    #[arg(long, required_unless_present = "manifest")]
    pub input: Option<PathBuf>,
    /// Repeat the run recorded in a manifest.
    #[arg(long, conflicts_with_all = ["input", "config", "variant"])]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub atlas: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    /// Defaults to the manifest stored next to the atlas.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Also write the report to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub atlas: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub resolution: usize,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "dsp,aprox,analyt,analyt+stitch")]
    pub variants: Vec<String>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Per-variant outputs go to `<out>/<variant>/`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let level = if cli.verbose { "debug" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Gen(a) => gen(cli, a),
        Command::Fit(a) => fit(cli, a),
        Command::Eval(a) => eval(a),
        Command::Export(a) => {
            let atlas = load_atlas(&a.atlas, None)?;
            export_mesh(&atlas, a.resolution, &a.out)
        }
        Command::Ablate(a) => ablate(cli, a),
    }
}

fn gen(cli: &Cli, a: &GenArgs) -> Result<()> {
    let params = ShapeParams {
        side: a.side,
        radius: a.radius,
        major: a.major,
        minor: a.minor,
        size: a.size.as_ref().map(|s| [s[0], s[1], s[2]]),
        hole_radius: a.hole_radius,
        gap: a.gap,
    };
    let spec = ShapeSpec {
        shape: Shape::from_kind(&a.kind, &params)?,
        n: a.n,
        noise: a.noise,
        seed: cli.seed.unwrap_or(0),
    };
    let cloud = gen_shape(&spec)?;
    let encoding = if a.ascii { Encoding::Ascii } else { Encoding::BinaryLittleEndian };
    write_pointcloud(&a.out, &cloud, encoding)
}

fn resolve_config(cli: &Cli, path: Option<&Path>, variant: Option<&str>) -> Result<FitConfig> {
    let mut cfg = match path {
        Some(p) => load_config(p)?,
        None => FitConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(v) = variant {
        cfg.variant = v.parse()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Loads the target and normalizes it.
fn load_target(source: &InputSource) -> Result<(GroundTruthCloud, Transform)> {
    let raw = match source {
        InputSource::File { path } => read_pointcloud(path)?,
        InputSource::Shape { spec } => gen_shape(spec)?,
    };
    normalize(&raw)
}

fn absolute(p: &Path) -> PathBuf {
    fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf())
}

pub fn history_tsv(history: &[crate::fit::IterRecord]) -> String {
    let mut s = format!("iter\t{}\n", LossBreakdown::FIELDS.join("\t"));
    for r in history {
        let values: Vec<String> = r.loss.values().iter().map(|v| format!("{v:e}")).collect();
        writeln!(s, "{}\t{}", r.iter, values.join("\t")).unwrap();
    }
    s
}

fn write_outputs(dir: &Path, outcome: &FitOutcome, manifest: &RunManifest) -> Result<()> {
    fs::create_dir_all(dir)?;
    save_atlas(&dir.join("atlas.bin"), &outcome.atlas)?;
    fs::write(dir.join("history.tsv"), history_tsv(&outcome.history))?;
    fs::write(dir.join("report.txt"), outcome.final_report().render())?;
    manifest.save(&dir.join("manifest.toml"))
}

fn output_names() -> Vec<PathBuf> {
    ["atlas.bin", "history.tsv", "report.txt", "manifest.toml"]
        .iter()
        .map(PathBuf::from)
        .collect()
}

fn fit(cli: &Cli, a: &FitArgs) -> Result<()> {
    let (source, cfg) = match &a.manifest {
        Some(m) => {
            let manifest = RunManifest::load(m)?;
            (manifest.input, manifest.config)
        }
        None => {
            let input = a.input.as_ref().expect("clap requires input");
            (
                InputSource::File { path: absolute(input) },
                resolve_config(cli, a.config.as_deref(), a.variant.as_deref())?,
            )
        }
    };
    let (gt, transform) = load_target(&source)?;
    let mut trainer = Trainer::new(&gt, &cfg)?;
    trainer.pretrain()?;
    let outcome = trainer.finetune(cfg.variant)?;
    let manifest = RunManifest {
        version: version_string(),
        input: source,
        normalization: transform,
        outputs: output_names(),
        config: cfg,
    };
    write_outputs(&a.out, &outcome, &manifest)?;
    print!("{}", outcome.final_report().render());
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let sibling = a.atlas.with_file_name("manifest.toml");
    let (cfg, transform) = match (&a.config, sibling.exists()) {
        (Some(p), _) => (load_config(p)?, None),
        (None, true) => {
            let m = RunManifest::load(&sibling)?;
            (m.config, Some(m.normalization))
        }
        (None, false) => (FitConfig::default(), None),
    };
    let raw = read_pointcloud(&a.input)?;
    let gt = match transform {
        Some(t) => GroundTruthCloud::new(
            raw.points().iter().map(|p| t.apply(*p)).collect(),
            raw.normals().to_vec(),
            raw.area() * t.scale * t.scale,
        )?,
        None => normalize(&raw)?.0,
    };
    let atlas = load_atlas(&a.atlas, Some(cfg.architecture()?))?;
    let report = evaluate(&atlas, &gt, &cfg)?;
    let text = report.render();
    if let Some(out) = &a.out {
        fs::write(out, &text)?;
    }
    print!("{text}");
    Ok(())
}

/// Runs every variant from one shared pretrained state; returns rows in the
/// order given.
pub fn run_ablation(
    gt: &GroundTruthCloud,
    cfg: &FitConfig,
    variants: &[Variant],
    threads: usize,
) -> Result<Vec<(Variant, FitOutcome)>> {
    let mut trainer = Trainer::new(gt, cfg)?;
    trainer.pretrain()?;
    let threads = threads.max(1);
    let mut out = Vec::with_capacity(variants.len());
    for chunk in variants.chunks(threads) {
        let results: Vec<Result<FitOutcome>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|v| {
                    let t = &trainer;
                    s.spawn(move || t.finetune(*v))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("variant worker panicked"))
                .collect()
        });
        for (v, r) in chunk.iter().zip(results) {
            out.push((*v, r?));
        }
    }
    Ok(out)
}

pub fn ablation_table(rows: &[(Variant, MetricsReport)]) -> String {
    let mut s = format!("variant\t{}\n", MetricsReport::tsv_header());
    for (v, r) in rows {
        writeln!(s, "{v}\t{}", r.tsv_row()).unwrap();
    }
    s
}

fn ablate(cli: &Cli, a: &AblateArgs) -> Result<()> {
    let variants = a
        .variants
        .iter()
        .map(|s| s.parse())
        .collect::<Result<Vec<Variant>>>()?;
    if variants.is_empty() {
        return Err(Error::Config("no variants given".into()));
    }
    let cfg = resolve_config(cli, a.config.as_deref(), Some(variants[0].name()))?;
    for v in &variants {
        FitConfig { variant: *v, ..cfg }.validate()?;
    }
    let source = InputSource::File { path: absolute(&a.input) };
    let (gt, transform) = load_target(&source)?;
    let results = run_ablation(&gt, &cfg, &variants, cli.threads)?;
    if let Some(dir) = &a.out {
        for (v, outcome) in &results {
            let manifest = RunManifest {
                version: version_string(),
                input: source.clone(),
                normalization: transform,
                outputs: output_names(),
                config: FitConfig { variant: *v, ..cfg },
            };
            write_outputs(&dir.join(v.name()), outcome, &manifest)?;
        }
    }
    let rows: Vec<(Variant, MetricsReport)> = results
        .into_iter()
        .map(|(v, o)| (v, o.final_report().clone()))
        .collect();
    let table = ablation_table(&rows);
    if let Some(dir) = &a.out {
        fs::write(dir.join("ablation.tsv"), &table)?;
    }
    print!("{table}");
    Ok(())
}
