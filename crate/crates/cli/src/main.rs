use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};

use terrainseg::coarsify::{coarsify_manifest, CoarsifyConfig};
use terrainseg::dataio::{self, layouts, Domain, Split};
use terrainseg::models::{
    extract_cls_embeddings, load_checkpoint, load_checkpoint_with_encoder, save_checkpoint, EncoderSpec,
};
use terrainseg::pipeline::{run_coarse_pipeline, PipelineConfig};
use terrainseg::pseudo::{generate_pseudo_labels, PseudoOptions};
use terrainseg::report::{write_report, ReportOptions};
use terrainseg::select::farthest_point_sample;
use terrainseg::synthset::{generate, SynthConfig};
use terrainseg::trainer::{self, TrainConfig};
use terrainseg::Error;

#[derive(Parser)]
#[command(
    name = "terrainseg",
    version,
    about = "Off-road segmentation from coarse labels and pseudo-labels"
)]
struct Cli {
    /// Overrides the seed of the command's configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Configuration file (TOML) for commands that take one.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory or file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    All,
}

impl SplitArg {
    fn split(self) -> Option<Split> {
        match self {
            SplitArg::Train => Some(Split::Train),
            SplitArg::Val => Some(Split::Val),
            SplitArg::All => None,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Layout {
    Rugd,
    Rellis3d,
}

#[derive(Clone, Copy, ValueEnum)]
enum DomainArg {
    Id,
    Ood,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic blob dataset from a TOML config.
    Synth,
    /// Convert a RUGD or Rellis-3D tree into a manifest with 9-class labels.
    Import {
        #[arg(long, value_enum)]
        layout: Layout,
        #[arg(long)]
        root: PathBuf,
        #[arg(long, value_enum, default_value = "id")]
        domain: DomainArg,
        /// RUGD sequences used for validation (comma separated).
        #[arg(long, value_delimiter = ',')]
        val_sequences: Vec<String>,
    },
    /// Sparsify dense labels into coarse labels.
    Coarsify {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        radius: Option<u32>,
        #[arg(long)]
        polygons: Option<usize>,
        #[arg(long)]
        area: Option<f64>,
        /// Classes that skip polygon masking (comma separated).
        #[arg(long, value_delimiter = ',')]
        exempt: Option<Vec<String>>,
    },
    /// Pick a diverse subset by farthest point sampling of CLS embeddings.
    Select {
        #[arg(long)]
        manifest: PathBuf,
        /// `toy`, `toy:SEED` or a safetensors weight file.
        #[arg(long, default_value = "toy")]
        encoder: String,
        #[arg(long)]
        k: usize,
    },
    /// Train one model from a TOML training config.
    Train,
    /// Fuse two models' predictions into pseudo-labels.
    Pseudolabel {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        model_a: PathBuf,
        #[arg(long)]
        model_b: PathBuf,
        /// Score the pseudo-labels against the manifest's labels.
        #[arg(long)]
        gt: bool,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
    },
    /// Evaluate a checkpoint on a manifest.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
    },
    /// Run every stage of the pipeline from a TOML config.
    Run,
    /// Summarize run directories into tables and overlays.
    Report {
        /// Run directories, or directories containing runs.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value_t = 4)]
        max_overlays: usize,
    },
}

fn required<'a>(v: &'a Option<PathBuf>, flag: &str) -> anyhow::Result<&'a PathBuf> {
    v.as_ref()
        .ok_or_else(|| anyhow!(Error::Config(format!("--{flag} is required"))))
}

/// The `--config` file, which must exist.
fn config_file(config: &Option<PathBuf>) -> anyhow::Result<&PathBuf> {
    let p = required(config, "config")?;
    if !p.is_file() {
        return Err(anyhow!(Error::Config(format!("config file {} not found", p.display()))));
    }
    Ok(p)
}

fn parent_of(p: &Path) -> PathBuf {
    p.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn parse_encoder(s: &str) -> anyhow::Result<EncoderSpec> {
    let toy = |seed| EncoderSpec::Toy { seed, patch_size: 7 };
    Ok(match s.split_once(':') {
        _ if s == "toy" => toy(0),
        Some(("toy", seed)) => toy(seed
            .parse()
            .map_err(|_| Error::Config(format!("bad encoder seed `{seed}`")))?),
        _ => EncoderSpec::Safetensors {
            path: s.into(),
            heads: None,
        },
    })
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth => {
            let cfg_path = config_file(&cli.config)?;
            let text = std::fs::read_to_string(cfg_path).with_context(|| format!("reading {}", cfg_path.display()))?;
            let mut cfg = SynthConfig::from_toml_str(&text)?;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let out = required(&cli.out, "out")?;
            let m = generate(&cfg, out)?;
            println!(
                "wrote {} samples to {}",
                m.samples.len(),
                out.join("manifest.json").display()
            );
        }
        Command::Import {
            layout,
            root,
            domain,
            val_sequences,
        } => {
            let out = required(&cli.out, "out")?;
            let domain = match domain {
                DomainArg::Id => Domain::InDistribution,
                DomainArg::Ood => Domain::OutOfDistribution,
            };
            let m = match layout {
                Layout::Rugd => layouts::import_rugd(&root, out, &val_sequences, domain)?,
                Layout::Rellis3d => layouts::import_rellis3d(&root, out, domain)?,
            };
            let path = out.join("manifest.json");
            dataio::write_manifest(&m, &path)?;
            println!("imported {} samples into {}", m.samples.len(), path.display());
        }
        Command::Coarsify {
            manifest,
            radius,
            polygons,
            area,
            exempt,
        } => {
            let mut cfg = match &cli.config {
                Some(_) => config_file(&cli.config)
                    .and_then(|p| Ok(std::fs::read_to_string(p)?))
                    .and_then(|t| toml::from_str(&t).map_err(|e| anyhow!(Error::Config(e.to_string()))))?,
                None => CoarsifyConfig::default(),
            };
            if let Some(r) = radius {
                cfg.boundary_radius_px = r;
            }
            if let Some(n) = polygons {
                cfg.polygon_count = n;
            }
            if let Some(a) = area {
                cfg.polygon_area_fraction = a;
            }
            if let Some(e) = exempt {
                cfg.exempt_classes = e;
            }
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let out = required(&cli.out, "out")?;
            let m = dataio::read_manifest(&manifest)?;
            let (coarse, report) = coarsify_manifest(&m, &cfg, out)?;
            dataio::write_manifest(&coarse, &out.join("manifest.json"))?;
            std::fs::write(out.join("density_report.json"), serde_json::to_string_pretty(&report)?)?;
            println!(
                "coarsified {} images, aggregate density {:.4}",
                report.images.len(),
                report.aggregate_density
            );
        }
        Command::Select { manifest, encoder, k } => {
            let out = required(&cli.out, "out")?;
            let m = dataio::read_manifest(&manifest)?;
            let base = parent_of(&manifest);
            let enc = Arc::new(parse_encoder(&encoder)?.build(&base)?);
            let emb = extract_cls_embeddings(&m, None, &enc)?;
            let picked = farthest_point_sample(&emb, k)?;
            let subset = m.subset(&picked, format!("{}-subset", m.name)).absolutized();
            dataio::write_manifest(&subset, out)?;
            let order = out.with_extension("order.json");
            std::fs::write(&order, serde_json::to_string_pretty(&picked)?)?;
            println!("selected {:?}", picked);
        }
        Command::Train => {
            let cfg_path = config_file(&cli.config)?;
            let mut cfg = TrainConfig::from_toml_file(cfg_path)?;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let out = required(&cli.out, "out")?;
            let base = parent_of(cfg_path);
            let (model, history) = trainer::train(&cfg, &base)?;
            save_checkpoint(&model, out, serde_json::json!({ "train_config": cfg }))?;
            let hist = out.with_extension("history.csv");
            std::fs::write(&hist, history.to_csv())?;
            println!("saved {} (history {})", out.display(), hist.display());
        }
        Command::Pseudolabel {
            manifest,
            model_a,
            model_b,
            gt,
            split,
        } => {
            let out = required(&cli.out, "out")?;
            let m = dataio::read_manifest(&manifest)?;
            let (a, _) = load_checkpoint(&model_a)?;
            let (b, _) =
                load_checkpoint_with_encoder(&model_b, a.encoder().clone()).or_else(|_| load_checkpoint(&model_b))?;
            let opts = PseudoOptions {
                use_ground_truth: gt,
                split: split.split(),
            };
            let (_, report) = generate_pseudo_labels(&m, &a, &b, out, &opts)?;
            print!("{}", report.to_text());
        }
        Command::Eval { model, manifest, split } => {
            let m = dataio::read_manifest(&manifest)?;
            let (model, _) = load_checkpoint(&model)?;
            let report = trainer::evaluate(&model, &m, split.split())?;
            print!("{}", report.to_text());
            if let Some(out) = &cli.out {
                std::fs::write(out, serde_json::to_string_pretty(&report)?)?;
            }
        }
        Command::Run => {
            let cfg_path = config_file(&cli.config)?;
            let mut cfg = PipelineConfig::from_toml_file(cfg_path)?;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let out = required(&cli.out, "out")?;
            let summary = run_coarse_pipeline(&cfg, &parent_of(cfg_path), out)?;
            println!("coarse density      {:.4}", summary.coarse_density);
            println!("subset              {:?}", summary.subset);
            print!("{}", summary.fusion.to_text());
            println!("model A val mIoU    {:.4}", summary.val_a.miou);
            println!("model B val mIoU    {:.4}", summary.val_b.miou);
            println!("retrained val mIoU  {:.4}", summary.val_retrained.miou);
        }
        Command::Report { runs, max_overlays } => {
            let out = required(&cli.out, "out")?;
            let opts = ReportOptions {
                max_overlays,
                ..ReportOptions::default()
            };
            let (report, _) = write_report(&runs, out, &opts)?;
            print!("{}", report.to_text());
        }
    }
    Ok(())
}

/// 2 for configuration errors, 3 for everything that fails while running.
fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Stage { source, .. }) if source.is_config() => 2,
        Some(e) if e.is_config() => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if cli.seed.is_some()
        && matches!(
            cli.command,
            Command::Eval { .. } | Command::Report { .. } | Command::Import { .. }
        )
    {
        log::warn!("--seed has no effect on this command");
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
