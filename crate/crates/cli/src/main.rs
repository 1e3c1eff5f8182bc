use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bnseg::evaluation::{scaling_benchmark, synth_image, SynthSpec};
use bnseg::inference::Algorithm;
use bnseg::pipeline::{
    self, parse_predicates, Baseline, ConfigPatch, Init, RunConfig, SegmentParams, Sigma,
    SuiteOptions,
};
use bnseg::raster::{self, Palette};
use bnseg::{Error, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

/// Superpixel Bayesian-network segmentation of grayscale images.
#[derive(Parser, Debug)]
#[command(name = "bnseg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Segment one image and write labels, report and metrics.
    Run {
        /// Input image (PNG or PGM); may come from --config instead.
        input: Option<PathBuf>,
        #[command(flatten)]
        flags: PipelineFlags,
        /// Print the resolved configuration and run directory, then exit.
        #[arg(long)]
        dry_run: bool,
    },
    /// Run many images or configs and aggregate a CSV.
    Suite {
        /// Config JSON files and/or directories of images.
        #[arg(required = true)]
        items: Vec<PathBuf>,
        #[command(flatten)]
        flags: PipelineFlags,
        /// Worker threads (0 = one per core).
        #[arg(long, default_value_t = 0)]
        workers: usize,
        /// Run every item once per listed algorithm, e.g. icm,decomp,combined.
        #[arg(long)]
        algorithms: Option<String>,
    },
    /// Write a piecewise-constant test image with Gaussian noise and its truth map.
    Synth {
        #[arg(long, default_value_t = 256)]
        width: usize,
        #[arg(long, default_value_t = 256)]
        height: usize,
        /// Region intensities, comma-separated.
        #[arg(long, default_value = "40,120,200")]
        intensities: String,
        /// `three` (left half, two right quarters; needs 3 intensities) or
        /// `blocks` (random rectangles, one per intensity).
        #[arg(long, default_value = "three")]
        layout: String,
        #[arg(long, default_value_t = 10.0)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output image (.png or .pgm).
        #[arg(long)]
        out: PathBuf,
        /// Output truth label map, gray levels ranked as labels.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Time clustering and inference over several superpixel counts.
    Bench {
        input: Option<PathBuf>,
        #[arg(long, default_value = "100,200,400,800")]
        counts: String,
        #[command(flatten)]
        flags: PipelineFlags,
    },
    /// Print the JSON Schema of report.json.
    Schema,
}

#[derive(Args, Debug, Default)]
struct PipelineFlags {
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output root; each run writes to <out>/<stem>-<hash>.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    superpixels: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    /// One value, or one per class separated by commas.
    #[arg(long)]
    sigma: Option<String>,
    #[arg(long)]
    t1: Option<f64>,
    #[arg(long)]
    t2: Option<f64>,
    /// Comma-separated subset of p1,p2, or `none`.
    #[arg(long)]
    predicates: Option<String>,
    /// icm, decomp or combined.
    #[arg(long)]
    inference: Option<String>,
    #[arg(long)]
    init: Option<String>,
    #[arg(long = "stop-frac")]
    stop_fraction: Option<f64>,
    #[arg(long)]
    max_sweeps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    ground_truth: Option<PathBuf>,
    /// otsu, niblack or sauvola.
    #[arg(long)]
    baseline: Option<String>,
    #[arg(long)]
    balance: Option<f64>,
    #[arg(long)]
    bandwidth: Option<f64>,
    /// Reuse the class model of a previous report.json.
    #[arg(long)]
    pin_model: Option<PathBuf>,
    /// JSON array of RGB triples.
    #[arg(long)]
    palette: Option<String>,
    /// Also write the superpixel boundary overlay.
    #[arg(long)]
    overlay: bool,
}

impl PipelineFlags {
    fn patch(&self, input: Option<&Path>) -> Result<ConfigPatch> {
        let palette = self
            .palette
            .as_deref()
            .map(|p| {
                serde_json::from_str::<Palette>(p)
                    .map_err(|e| Error::Configuration(format!("--palette: {e}")))
            })
            .transpose()?;
        Ok(ConfigPatch {
            input: input.map(Path::to_path_buf),
            out: self.out.clone(),
            superpixels: self.superpixels,
            classes: self.classes,
            sigma: self.sigma.as_deref().map(str::parse::<Sigma>).transpose()?,
            t1: self.t1,
            t2: self.t2,
            predicates: self
                .predicates
                .as_deref()
                .map(parse_predicates)
                .transpose()?,
            inference: self
                .inference
                .as_deref()
                .map(str::parse::<Algorithm>)
                .transpose()?,
            init: self.init.as_deref().map(str::parse::<Init>).transpose()?,
            stop_fraction: self.stop_fraction,
            max_sweeps: self.max_sweeps,
            seed: self.seed,
            ground_truth: self.ground_truth.clone(),
            baseline: self
                .baseline
                .as_deref()
                .map(str::parse::<Baseline>)
                .transpose()?,
            balance: self.balance,
            bandwidth: self.bandwidth,
            pin_model: self.pin_model.clone(),
            palette,
            overlay: self.overlay.then_some(true),
        })
    }

    fn resolve(&self, input: Option<&Path>) -> Result<RunConfig> {
        self.resolve_with(self.config.as_deref(), input)
    }

    fn resolve_with(&self, config: Option<&Path>, input: Option<&Path>) -> Result<RunConfig> {
        let file = config.map(ConfigPatch::load).transpose()?;
        RunConfig::resolve(file.as_ref(), &self.patch(input)?)
    }
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| Error::Configuration(format!("invalid {what} {t:?}")))
        })
        .collect()
}

fn print_json(value: &serde_json::Value) {
    println!(
        "{}",
        serde_json::to_string(value).expect("json value serializes")
    );
}

fn run_command(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            input,
            flags,
            dry_run,
        } => {
            let cfg = flags.resolve(input.as_deref())?;
            if dry_run {
                print_json(&json!({
                    "config": cfg,
                    "out": cfg.out,
                    "run_dir": cfg.run_dir(),
                }));
                return Ok(());
            }
            let report = pipeline::run(&cfg)?;
            print_json(&json!({
                "run_dir": report.run_dir,
                "superpixels": report.superpixels.produced,
                "centers": report.model.centers(),
                "sweeps": report.trace.sweeps(),
                "accuracy": report.accuracy(),
            }));
        }
        Command::Suite {
            items,
            flags,
            workers,
            algorithms,
        } => {
            let mut configs = Vec::new();
            for item in &items {
                if item.is_dir() {
                    // Flags (and --config) form the template for every image.
                    let template = flags.resolve(Some(Path::new("")))?;
                    configs.extend(pipeline::configs_from_dir(item, &template)?);
                } else {
                    configs.push(flags.resolve_with(Some(item), None)?);
                }
            }
            let algorithms = algorithms
                .as_deref()
                .map(|a| parse_list::<Algorithm>(a, "algorithm"))
                .transpose()?;
            let out = flags.out.clone().unwrap_or_else(|| PathBuf::from("out"));
            let report = pipeline::run_suite(
                &configs,
                &SuiteOptions {
                    workers,
                    algorithms,
                },
                Some(&out),
            )?;
            print_json(&json!({
                "csv": out.join(pipeline::SUITE_FILE),
                "runs": report.rows.len(),
                "failures": report.failures(),
                "means": report.means,
            }));
        }
        Command::Synth {
            width,
            height,
            intensities,
            layout,
            noise,
            seed,
            out,
            truth,
        } => {
            let levels: Vec<u8> = parse_list(&intensities, "intensity")?;
            let spec = match layout.as_str() {
                "three" => {
                    let levels: [u8; 3] = levels.as_slice().try_into().map_err(|_| {
                        Error::Configuration("layout `three` needs exactly 3 intensities".into())
                    })?;
                    SynthSpec::three_regions(width, height, levels)
                }
                "blocks" => SynthSpec::random_blocks(width, height, &levels, seed),
                other => {
                    return Err(Error::Configuration(format!(
                        "unknown layout {other:?} (expected three or blocks)"
                    )))
                }
            };
            let (img, labels) = synth_image(&spec, noise, seed)?;
            save_gray(&img, &out)?;
            if let Some(truth) = truth {
                let gray = labels.labels().iter().map(|&l| l as u8).collect();
                save_gray(&raster::GrayImage::new(width, height, gray)?, &truth)?;
            }
        }
        Command::Bench {
            input,
            counts,
            flags,
        } => {
            let cfg = flags.resolve(input.as_deref())?;
            let counts: Vec<usize> = parse_list(&counts, "superpixel count")?;
            let img = raster::load_gray(&cfg.input)?;
            let pinned = cfg
                .pin_model
                .as_ref()
                .map(pipeline::load_pinned_model)
                .transpose()?;
            let report =
                scaling_benchmark(&img, &counts, &SegmentParams::from_config(&cfg, pinned))?;
            print_json(&serde_json::to_value(&report).expect("report serializes"));
        }
        Command::Schema => print!("{}", pipeline::REPORT_SCHEMA),
    }
    Ok(())
}

fn save_gray(img: &raster::GrayImage, path: &Path) -> Result<()> {
    let pgm = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
    if pgm {
        raster::save_pgm(img, path)
    } else {
        raster::save_png_gray(img, path)
    }
}

fn fail(kind: &str, message: &str) -> ExitCode {
    eprintln!("{}", json!({ "error": kind, "message": message }));
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ");
            return fail("usage", first);
        }
    };
    match run_command(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), &e.to_string()),
    }
}
