use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use ctforensics::cohort::{
    convert_annotations, write_annotations, ClassCounts, CohortManifest, SourceFormat,
};
use ctforensics::evalkit::MetricsReport;
use ctforensics::phantom::{generate, PhantomSpec};
use ctforensics::pipeline::{self, ExperimentConfig, PipelineError, Study, CACHE_ENV};
use log::info;

#[derive(Parser)]
#[command(
    name = "ctforensics",
    version,
    about = "Tamper detection experiments on CT scans"
)]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load a cohort manifest and print a JSON summary.
    Ingest { manifest: PathBuf },
    /// Generate a synthetic phantom cohort on disk.
    Phantom {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated overrides, e.g. `seed=3,n_patients=8`.
        #[arg(long, value_parser = parse_phantom, default_value = "")]
        spec: PhantomSpec,
    },
    /// Convert a source annotation file to the native CSV.
    ConvertAnnotations {
        #[arg(long, value_parser = |s: &str| s.parse::<SourceFormat>())]
        format: SourceFormat,
        input: PathBuf,
        output: PathBuf,
    },
    /// Run one experiment end to end.
    Run(RunArgs),
    /// Validate a report and print its headline numbers.
    Report {
        report: PathBuf,
        /// Rewrite the ROC SVG files next to the report.
        #[arg(long)]
        svg: bool,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML experiment config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = |s: &str| s.parse::<Study>())]
    study: Option<Study>,
    /// Use a generated phantom, with `key=value` overrides.
    #[arg(long, value_parser = parse_phantom, conflicts_with = "manifest")]
    phantom: Option<PhantomSpec>,
    /// Use the cohort described by this manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, value_parser = ["tree", "forest", "svm"])]
    learner: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Augment tampered test samples too.
    #[arg(long)]
    augment_test: bool,
}

fn parse_phantom(text: &str) -> Result<PhantomSpec, String> {
    let mut pairs = Vec::new();
    let (mut depth, mut start) = (0i32, 0);
    for (i, ch) in text.char_indices() {
        match ch {
            '[' => depth += 1,
            ']' => depth -= 1,
            ',' if depth == 0 => {
                pairs.push(&text[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    pairs.push(&text[start..]);
    let mut table = toml::Table::new();
    for pair in pairs.into_iter().map(str::trim).filter(|p| !p.is_empty()) {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| format!("expected key=value, got {pair:?}"))?;
        let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {value}"))
            .map_err(|e| format!("{key}: {e}"))?
            .remove("v")
            .expect("key present");
        table.insert(key.trim().to_string(), value);
    }
    let spec: PhantomSpec = table
        .try_into()
        .map_err(|e: toml::de::Error| e.to_string())?;
    spec.validate().map_err(|e| e.to_string())?;
    Ok(spec)
}

/// Merge the config file with flag overrides; flags win.
fn resolve_config(args: &RunArgs) -> Result<ExperimentConfig, PipelineError> {
    let mut table = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|source| PipelineError::Io {
                path: path.clone(),
                source,
            })?;
            toml::from_str::<toml::Table>(&text)?
        }
        None => toml::Table::new(),
    };
    if let Some(study) = args.study {
        table.insert("study".into(), study.as_str().into());
    }
    if let Some(seed) = args.seed {
        let seed =
            i64::try_from(seed).map_err(|_| PipelineError::Config("seed exceeds i64".into()))?;
        table.insert("seed".into(), seed.into());
    }
    if let Some(dir) = &args.output_dir {
        table.insert("output_dir".into(), dir.to_string_lossy().as_ref().into());
    }
    if args.augment_test {
        table.insert("augment_test".into(), true.into());
    }
    if let Some(spec) = &args.phantom {
        let mut data = toml::Table::new();
        let value =
            toml::Value::try_from(spec).map_err(|e| PipelineError::Config(e.to_string()))?;
        data.insert("phantom".into(), value);
        table.insert("data".into(), data.into());
    }
    if let Some(path) = &args.manifest {
        let mut data = toml::Table::new();
        data.insert("manifest".into(), path.to_string_lossy().as_ref().into());
        table.insert("data".into(), data.into());
    }
    if let Some(kind) = &args.learner {
        let same = table
            .get("learner")
            .and_then(|l| l.get("kind"))
            .and_then(|k| k.as_str())
            == Some(kind.as_str());
        if !same {
            let mut learner = toml::Table::new();
            learner.insert("kind".into(), kind.as_str().into());
            table.insert("learner".into(), learner.into());
        }
    }
    if !table.contains_key("study") {
        return Err(PipelineError::Config(
            "no study given (--study or `study` in the config)".into(),
        ));
    }
    if !table.contains_key("data") {
        return Err(PipelineError::Config(
            "no data given (--phantom, --manifest or [data])".into(),
        ));
    }
    let config: ExperimentConfig = table.try_into()?;
    config.validate()?;
    Ok(config)
}

fn ingest(manifest: &Path) -> Result<()> {
    let cohort = CohortManifest::load(manifest)?;
    let slices: usize = cohort.volumes.iter().map(|v| v.len()).sum();
    let mut tags = std::collections::BTreeMap::<&str, usize>::new();
    for a in &cohort.annotations {
        *tags.entry(a.tag.as_str()).or_default() += 1;
    }
    let summary = serde_json::json!({
        "patients": cohort.patients.len(),
        "patient_labels": ClassCounts::of(cohort.patients.iter().map(|p| &p.label)),
        "slices": slices,
        "annotations": tags,
        "content_hash": cohort.content_hash,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn phantom(out: &Path, spec: &PhantomSpec) -> Result<()> {
    let ph = generate(spec)?;
    ph.write_to(out)?;
    println!("{}", out.join("manifest.json").display());
    Ok(())
}

fn convert(format: SourceFormat, input: &Path, output: &Path) -> Result<()> {
    let bytes = fs::read(input).with_context(|| format!("reading {}", input.display()))?;
    let converted = convert_annotations(format, &bytes)?;
    for (line, reason) in &converted.skipped {
        eprintln!("warning: {}:{line}: skipped: {reason}", input.display());
    }
    let file =
        fs::File::create(output).with_context(|| format!("creating {}", output.display()))?;
    write_annotations(std::io::BufWriter::new(file), &converted.annotations)?;
    info!(
        "{} annotations written, {} rows skipped",
        converted.annotations.len(),
        converted.skipped.len()
    );
    Ok(())
}

fn report(path: &Path, svg: bool) -> Result<()> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let report = MetricsReport::from_json(&text)?;
    let meta = &report.run_metadata;
    println!("study     {}", meta.study);
    println!("learner   {}", meta.learner);
    println!("seed      {}", meta.seed);
    println!("accuracy  {:.4}", report.accuracy);
    for (class, m) in &report.per_class {
        let auc = report
            .roc
            .get(class)
            .map_or("-".to_string(), |c| format!("{:.4}", c.auc));
        println!(
            "{class:<10} precision {:.4}  recall {:.4}  support {}  auc {auc}",
            m.precision, m.recall, m.support
        );
    }
    for w in &meta.warnings {
        println!("warning   {w}");
    }
    if svg {
        let dir = path.parent().unwrap_or(Path::new("."));
        for (class, curve) in &report.roc {
            let out = dir.join(format!("{}.svg", MetricsReport::roc_file_stem(class)));
            fs::write(
                &out,
                curve.to_svg(&format!("{} {class} vs rest", meta.study)),
            )
            .with_context(|| format!("writing {}", out.display()))?;
        }
    }
    Ok(())
}

fn usage_error(message: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {message}");
    ExitCode::from(2)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match &cli.command {
        Command::Ingest { manifest } => ingest(manifest),
        Command::Phantom { out, spec } => phantom(out, spec),
        Command::ConvertAnnotations {
            format,
            input,
            output,
        } => convert(*format, input, output),
        Command::Report { report: path, svg } => report(path, *svg),
        Command::Run(args) => {
            let config = match resolve_config(args) {
                Ok(c) => c,
                Err(e) => return usage_error(e),
            };
            let cache = std::env::var_os(CACHE_ENV).map(PathBuf::from);
            pipeline::run(&config, cache.as_deref())
                .map(|out| {
                    println!("{}", out.dir.join("report.json").display());
                    eprintln!("accuracy {:.4}", out.report.accuracy);
                })
                .map_err(anyhow::Error::from)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut message = e.to_string();
            for cause in e.chain().skip(1).map(|c| c.to_string()) {
                if !message.contains(&cause) {
                    message = format!("{message}: {cause}");
                }
            }
            eprintln!("error: {message}");
            if let Some(PipelineError::Config(_) | PipelineError::Toml(_)) =
                e.downcast_ref::<PipelineError>()
            {
                return ExitCode::from(2);
            }
            ExitCode::FAILURE
        }
    }
}
