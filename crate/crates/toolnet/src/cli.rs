//! `toolnet` command line. Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use serde::Serialize;
use toolnet_core::kernels::Exec;

use crate::bench::{bench_latency, DEFAULT_REPEATS, DEFAULT_WARMUP};
use crate::config::{write_run_config, TrainSettings};
use crate::data::{self, read_rgb_png, render_sample, split_dataset, write_gray_png, GrayImage, Manifest, Split};
use crate::eval::evaluate;
use crate::infer::{Precision, Predictor};
use crate::train::{lr_range_test, train, TrainingSet};
use crate::{io_error, Error, Result};

#[derive(Debug, Parser)]
#[command(name = "toolnet", version, about = "Multi-scale surgical tool segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic tool-on-tissue dataset.
    GenData {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Frame size HxW; both sides must be multiples of 32.
        #[arg(long, default_value = "64x64")]
        size: String,
        #[arg(long)]
        out: PathBuf,
        /// Train, validation and test fractions, comma-separated.
        #[arg(long, default_value = "1,0,0")]
        ratios: String,
    },
    /// Train a network; writes train.log, checkpoints and run_config.toml.
    Train {
        /// TOML file with any of the training options.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        settings: TrainSettings,
    },
    /// Segment one image and write a 0/255 PNG mask.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "f64")]
        precision: Precision,
    },
    /// Per-frame metrics on one split of a manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Report file; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "f64")]
        precision: Precision,
    },
    /// Single-frame latency of the full inference pipeline.
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input size HxW (default: the checkpoint's training size).
        #[arg(long)]
        size: Option<String>,
        /// Benchmark frame; a synthetic frame is rendered when omitted.
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_REPEATS)]
        repeats: usize,
        #[arg(long, default_value_t = DEFAULT_WARMUP)]
        warmup: usize,
        #[arg(long, default_value = "f32")]
        precision: Precision,
        /// Directory for bench.tsv, bench_times.tsv and run_config.toml.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Loss along the rising learning-rate half-cycle for several ranges.
    LrRangeTest {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Ranges as base:max pairs, comma-separated.
        #[arg(long, default_value = "1e-8:1e-6,1e-7:1e-5,1e-6:1e-4,1e-5:1e-3")]
        ranges: String,
        #[command(flatten)]
        settings: TrainSettings,
    },
}

/// Parses `argv` (including the program name) and runs the subcommand.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn parse_ratios(s: &str) -> Result<[f64; 3]> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("ratios `{s}` must be three comma-separated numbers")))?;
    <[f64; 3]>::try_from(v).map_err(|_| Error::Config(format!("ratios `{s}` must be three comma-separated numbers")))
}

fn parse_ranges(s: &str) -> Result<Vec<(f64, f64)>> {
    s.split(',')
        .map(|pair| {
            let bad = || Error::Config(format!("range `{pair}` is not base:max"));
            let (a, b) = pair.split_once(':').ok_or_else(bad)?;
            Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
        })
        .collect()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_error(dir))?;
    }
    fs::write(path, text).map_err(io_error(path))
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

#[derive(Serialize)]
struct GenDataRecord<'a> {
    subcommand: &'a str,
    n: usize,
    seed: u64,
    height: usize,
    width: usize,
    ratios: [f64; 3],
    out: &'a Path,
}

#[derive(Serialize)]
struct InferRecord<'a> {
    subcommand: &'a str,
    checkpoint: &'a Path,
    image: &'a Path,
    out: &'a Path,
    precision: Precision,
}

#[derive(Serialize)]
struct EvalRecord<'a> {
    subcommand: &'a str,
    checkpoint: &'a Path,
    manifest: &'a Path,
    split: String,
    precision: Precision,
}

#[derive(Serialize)]
struct BenchRecord<'a> {
    subcommand: &'a str,
    checkpoint: &'a Path,
    architecture: String,
    height: usize,
    width: usize,
    image: Option<&'a Path>,
    repeats: usize,
    warmup: usize,
    precision: Precision,
}

fn load_training(settings: &TrainSettings, config: Option<&Path>) -> Result<(crate::config::ResolvedTrain, TrainingSet)> {
    let settings = settings.clone().layered(config)?;
    let manifest_path = settings
        .manifest
        .clone()
        .ok_or_else(|| Error::Config("--manifest is required".into()))?;
    let manifest = Manifest::load(&manifest_path)?;
    let data = TrainingSet::load(&manifest, Split::Train)?;
    let resolved = settings.resolve(data.frames.len(), data.size())?;
    Ok((resolved, data))
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData {
            n,
            seed,
            size,
            out,
            ratios,
        } => {
            let (h, w) = data::parse_size(&size)?;
            let ratios = parse_ratios(&ratios)?;
            let manifest = data::generate_synthetic(n, seed, (h, w), &out)?;
            let mut manifest = split_dataset(&manifest, ratios, seed)?;
            manifest.recompute_means()?;
            manifest.save(&out.join("manifest.txt"))?;
            write_run_config(
                &out,
                &GenDataRecord {
                    subcommand: "gen-data",
                    n,
                    seed,
                    height: h,
                    width: w,
                    ratios,
                    out: &out,
                },
            )?;
            eprintln!("wrote {n} frames and {}", out.join("manifest.txt").display());
        }
        Command::Train { config, settings } => {
            let (resolved, data) = load_training(&settings, config.as_deref())?;
            let cfg = resolved.train_config()?;
            write_run_config(&cfg.out_dir, &resolved)?;
            let summary = train(&cfg, &data)?;
            eprintln!(
                "{} iterations, final loss {:.6}, checkpoint {}",
                summary.iterations,
                summary.final_loss,
                summary.final_checkpoint.display()
            );
        }
        Command::Infer {
            checkpoint,
            image,
            out,
            precision,
        } => {
            let predictor = Predictor::from_checkpoint(&checkpoint, precision, Exec::Parallel)?;
            let img = read_rgb_png(&image)?;
            let mask = predictor.predict_mask(&img).map_err(|e| match e {
                Error::Core(core) => Error::Invalid(format!("{}: {core}", image.display())),
                other => other,
            })?;
            write_gray_png(&out, &GrayImage::from_mask(&mask))?;
            write_run_config(
                &parent_dir(&out),
                &InferRecord {
                    subcommand: "infer",
                    checkpoint: &checkpoint,
                    image: &image,
                    out: &out,
                    precision,
                },
            )?;
        }
        Command::Eval {
            checkpoint,
            manifest,
            split,
            out,
            precision,
        } => {
            let predictor = Predictor::from_checkpoint(&checkpoint, precision, Exec::Sequential)?;
            let m = Manifest::load(&manifest)?;
            let report = evaluate(&predictor, &m, split)?;
            for (id, why) in &report.skipped {
                eprintln!("warning: skipped frame {id}: {why}");
            }
            eprintln!("{} frames evaluated, {} skipped", report.frames.len(), report.skipped.len());
            let table = report.to_table();
            match &out {
                Some(path) => {
                    write_text(path, &table)?;
                    write_run_config(
                        &parent_dir(path),
                        &EvalRecord {
                            subcommand: "eval",
                            checkpoint: &checkpoint,
                            manifest: &manifest,
                            split: split.to_string(),
                            precision,
                        },
                    )?;
                }
                None => print!("{table}"),
            }
        }
        Command::Bench {
            checkpoint,
            size,
            image,
            repeats,
            warmup,
            precision,
            out,
        } => {
            let predictor = Predictor::from_checkpoint(&checkpoint, precision, Exec::Sequential)?;
            let frame = match &image {
                Some(p) => read_rgb_png(p)?,
                None => {
                    let (h, w) = match &size {
                        Some(s) => data::parse_size(s)?,
                        None => (predictor.net.cfg.input_height, predictor.net.cfg.input_width),
                    };
                    render_sample(0, 0, h, w)?.image
                }
            };
            let report = bench_latency(&predictor, &frame, repeats, warmup)?;
            print!("{}", report.summary());
            if let Some(dir) = &out {
                write_text(&dir.join("bench.tsv"), &report.summary())?;
                write_text(&dir.join("bench_times.tsv"), &report.times_table())?;
                write_run_config(
                    dir,
                    &BenchRecord {
                        subcommand: "bench",
                        checkpoint: &checkpoint,
                        architecture: predictor.net.arch.to_string(),
                        height: frame.height,
                        width: frame.width,
                        image: image.as_deref(),
                        repeats,
                        warmup,
                        precision,
                    },
                )?;
            }
        }
        Command::LrRangeTest {
            config,
            ranges,
            settings,
        } => {
            let ranges = parse_ranges(&ranges)?;
            let (resolved, data) = load_training(&settings, config.as_deref())?;
            let cfg = resolved.train_config()?;
            let rows = lr_range_test(&cfg, &data, &ranges)?;
            let mut text = String::from("range,base_lr,max_lr,iteration,lr,loss\n");
            for (i, t, lr, loss) in rows {
                let (b, m) = ranges[i];
                text.push_str(&format!("{i},{b},{m},{t},{lr},{loss}\n"));
            }
            write_text(&cfg.out_dir.join("lr_range.csv"), &text)?;
            let mut record = resolved;
            record.subcommand = "lr-range-test".into();
            write_run_config(&cfg.out_dir, &record)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run(["toolnet", "--bogus"]), 2);
        assert_eq!(run(["toolnet", "train", "--no-such-flag"]), 2);
        assert_eq!(run(["toolnet", "gen-data", "--n", "x", "--out", "o"]), 2);
        assert_eq!(run(["toolnet", "--help"]), 0);
        assert_eq!(run(["toolnet", "--version"]), 0);
    }

    #[test]
    fn list_parsers() {
        assert_eq!(parse_ratios("0.8,0.1,0.1").unwrap(), [0.8, 0.1, 0.1]);
        assert!(parse_ratios("1,0").is_err());
        assert_eq!(parse_ranges("1e-7:1e-5").unwrap(), vec![(1e-7, 1e-5)]);
        assert!(parse_ranges("1e-7").is_err());
    }
}
