//! Training loop, TrainLog and the learning-rate range test.
//!
//! One run is exactly `6 * stepsize` iterations of batch-size-1 momentum SGD
//! under the triangular cyclical learning rate. Frames are drawn uniformly from
//! the training split by a seeded stream, and dropout masks are keyed by
//! `(seed, node, iteration)`, so a run is a pure function of its config.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use toolnet_core::arch::{ArchConfig, Architecture, Network};
use toolnet_core::graph::ForwardCtx;
use toolnet_core::optim::{ClrPolicy, SgdState};
use toolnet_core::rng;
use toolnet_core::Tensor;

use crate::checkpoint::Checkpoint;
use crate::data::{normalize, one_hot, Manifest, Split};
use crate::{io_error, Error, Result};

pub const TRAIN_LOG: &str = "train.log";
pub const TIMING_LOG: &str = "train_timing.log";
pub const LAST_GOOD: &str = "last_good.tnck";
pub const FINAL: &str = "final.tnck";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub arch: Architecture,
    /// Input size is taken from the training frames.
    pub cfg: ArchConfig,
    pub base_lr: f64,
    pub max_lr: f64,
    pub stepsize: u64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Periodic checkpoint interval in iterations; 0 disables periodic files.
    pub checkpoint_every: u64,
    pub out_dir: PathBuf,
    /// Put wall-clock milliseconds into the TrainLog instead of a sidecar file.
    pub log_timing: bool,
}

/// Preprocessed `(id, image, one-hot target)` triples.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub frames: Vec<(String, Tensor, Tensor)>,
    pub means: [f64; 3],
}

impl TrainingSet {
    pub fn load(manifest: &Manifest, split: Split) -> Result<Self> {
        let frames = manifest
            .split(split)
            .map(|e| {
                let s = manifest.load_sample(e)?;
                Ok((s.id, normalize(&s.image, &manifest.means), one_hot(&s.mask)?))
            })
            .collect::<Result<Vec<_>>>()?;
        if frames.is_empty() {
            return Err(Error::Invalid(format!("the {split} split of the manifest is empty")));
        }
        let first = frames[0].1.shape();
        if let Some((id, t, _)) = frames.iter().find(|f| f.1.shape() != first) {
            return Err(Error::Invalid(format!(
                "frame `{id}` is {}x{} but the first training frame is {}x{}",
                t.shape().h,
                t.shape().w,
                first.h,
                first.w
            )));
        }
        Ok(TrainingSet {
            frames,
            means: manifest.means,
        })
    }

    pub fn size(&self) -> (usize, usize) {
        let s = self.frames[0].1.shape();
        (s.h, s.w)
    }
}

/// One TrainLog record.
#[derive(Debug, Clone, PartialEq)]
pub struct LogEntry {
    pub iteration: u64,
    pub lr: f64,
    pub loss: f64,
    pub terms: Vec<f64>,
    pub wall_ms: Option<f64>,
}

/// Parsed TrainLog.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub columns: Vec<String>,
    pub entries: Vec<LogEntry>,
}

impl TrainLog {
    pub fn header(term_names: &[String], timing: bool) -> String {
        let mut h = String::from("iteration,lr,loss");
        for t in term_names {
            h.push(',');
            h.push_str(t);
        }
        if timing {
            h.push_str(",wall_ms");
        }
        h
    }

    pub fn format_entry(e: &LogEntry) -> String {
        let mut s = format!("{},{},{}", e.iteration, e.lr, e.loss);
        for t in &e.terms {
            s.push_str(&format!(",{t}"));
        }
        if let Some(ms) = e.wall_ms {
            s.push_str(&format!(",{ms:.3}"));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let columns: Vec<String> = lines
            .next()
            .ok_or_else(|| Error::Invalid("empty TrainLog".into()))?
            .split(',')
            .map(str::to_string)
            .collect();
        let timing = columns.last().is_some_and(|c| c == "wall_ms");
        let n_terms = columns.len() - 3 - usize::from(timing);
        let mut entries = Vec::new();
        for (i, line) in lines.enumerate() {
            let bad = || Error::Invalid(format!("TrainLog line {}: `{line}`", i + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != columns.len() {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            entries.push(LogEntry {
                iteration: f[0].parse().map_err(|_| bad())?,
                lr: num(f[1])?,
                loss: num(f[2])?,
                terms: f[3..3 + n_terms].iter().map(|s| num(s)).collect::<Result<_>>()?,
                wall_ms: if timing { Some(num(f[f.len() - 1])?) } else { None },
            });
        }
        Ok(TrainLog { columns, entries })
    }

    pub fn read(path: &Path) -> Result<Self> {
        TrainLog::parse(&fs::read_to_string(path).map_err(io_error(path))?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub iterations: u64,
    pub final_loss: f64,
    pub final_checkpoint: PathBuf,
    pub log: PathBuf,
}

struct LogWriter {
    log: BufWriter<File>,
    timing: Option<BufWriter<File>>,
    inline: bool,
    log_path: PathBuf,
    timing_path: PathBuf,
}

impl LogWriter {
    fn create(dir: &Path, term_names: &[String], inline: bool) -> Result<Self> {
        let log_path = dir.join(TRAIN_LOG);
        let timing_path = dir.join(TIMING_LOG);
        let mut log = BufWriter::new(File::create(&log_path).map_err(io_error(&log_path))?);
        writeln!(log, "{}", TrainLog::header(term_names, inline)).map_err(io_error(&log_path))?;
        let timing = if inline {
            None
        } else {
            let mut f = BufWriter::new(File::create(&timing_path).map_err(io_error(&timing_path))?);
            writeln!(f, "iteration,wall_ms").map_err(io_error(&timing_path))?;
            Some(f)
        };
        Ok(LogWriter {
            log,
            timing,
            inline,
            log_path,
            timing_path,
        })
    }

    fn write(&mut self, mut e: LogEntry, ms: f64) -> Result<()> {
        if self.inline {
            e.wall_ms = Some(ms);
        }
        writeln!(self.log, "{}", TrainLog::format_entry(&e)).map_err(io_error(&self.log_path))?;
        if let Some(t) = &mut self.timing {
            writeln!(t, "{},{ms:.3}", e.iteration).map_err(io_error(&self.timing_path))?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        self.log.flush().map_err(io_error(&self.log_path))?;
        if let Some(t) = &mut self.timing {
            t.flush().map_err(io_error(&self.timing_path))?;
        }
        Ok(())
    }
}

/// Builds the network for `cfg` at the training frame size.
pub fn build_network(cfg: &TrainConfig, size: (usize, usize)) -> Result<Network> {
    let arch_cfg = ArchConfig {
        input_height: size.0,
        input_width: size.1,
        ..cfg.cfg.clone()
    };
    Ok(Network::build(cfg.arch, &arch_cfg, cfg.seed)?)
}

/// Trains from scratch and writes `train.log`, checkpoints and `final.tnck`
/// into `cfg.out_dir`.
pub fn train(cfg: &TrainConfig, data: &TrainingSet) -> Result<TrainSummary> {
    let policy = ClrPolicy::new(cfg.base_lr, cfg.max_lr, cfg.stepsize)?;
    let mut net = build_network(cfg, data.size())?;
    fs::create_dir_all(&cfg.out_dir).map_err(io_error(&cfg.out_dir))?;
    let last_good = cfg.out_dir.join(LAST_GOOD);
    Checkpoint::from_network(&net, data.means).save(&last_good)?;

    // Single-tap networks log only the total.
    let term_names = if net.loss_terms.len() > 1 { net.loss_term_names() } else { Vec::new() };
    let mut log = LogWriter::create(&cfg.out_dir, &term_names, cfg.log_timing)?;
    let mut sgd = SgdState::new(cfg.momentum, cfg.weight_decay);
    let mut frames = rng::stream(cfg.seed, "frames", 0);
    let total = policy.total_iters();
    let mut final_loss = f64::NAN;
    for t in 0..total {
        let start = Instant::now();
        let (_, image, target) = &data.frames[rng::below(&mut frames, data.frames.len())];
        let lr = policy.lr(t);
        let diverged = |detail: String| Error::Diverged {
            iteration: t,
            detail,
            last_good: last_good.clone(),
        };
        let loss = net.forward_loss(image, target, &ForwardCtx::train(cfg.seed, t))?;
        if !loss.total.is_finite() {
            log.flush()?;
            return Err(diverged(format!("loss is {}", loss.total)));
        }
        net.backward()?;
        if let Err(e) = sgd.step(net.graph.params_mut(), lr) {
            log.flush()?;
            return Err(diverged(e.to_string()));
        }
        if !checkpointable(&net) {
            log.flush()?;
            return Err(diverged("parameters left the finite f32 range".into()));
        }
        final_loss = loss.total;
        let entry = LogEntry {
            iteration: t,
            lr,
            loss: loss.total,
            terms: if net.loss_terms.len() > 1 { loss.terms } else { Vec::new() },
            wall_ms: None,
        };
        log.write(entry, start.elapsed().as_secs_f64() * 1e3)?;
        let done = t + 1;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < total {
            log.flush()?;
            let ck = Checkpoint::from_network(&net, data.means);
            ck.save(&cfg.out_dir.join(format!("iter_{done}.tnck")))?;
            ck.save(&last_good)?;
        }
    }
    log.flush()?;
    let final_checkpoint = cfg.out_dir.join(FINAL);
    let ck = Checkpoint::from_network(&net, data.means);
    ck.save(&final_checkpoint)?;
    ck.save(&last_good)?;
    Ok(TrainSummary {
        iterations: total,
        final_loss,
        final_checkpoint,
        log: cfg.out_dir.join(TRAIN_LOG),
    })
}

/// Whether every parameter survives the `f32` checkpoint encoding as a finite value.
fn checkpointable(net: &Network) -> bool {
    net.graph
        .params()
        .iter()
        .all(|p| p.value.data().iter().all(|v| (*v as f32).is_finite()))
}

/// Loss taps averaged over every frame of `data`, in eval mode.
pub fn mean_loss_terms(net: &mut Network, data: &TrainingSet) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; net.loss_terms.len()];
    for (_, image, target) in &data.frames {
        let l = net.forward_loss(image, target, &ForwardCtx::eval())?;
        for (a, t) in acc.iter_mut().zip(l.terms) {
            *a += t;
        }
    }
    let n = data.frames.len() as f64;
    Ok(acc.into_iter().map(|a| a / n).collect())
}

/// Learning-rate range test: for each `(base, max)` pair, trains a fresh
/// network for `stepsize` iterations along the rising half of the wave and
/// records the loss. Returns `(range index, iteration, lr, loss)` rows.
pub fn lr_range_test(cfg: &TrainConfig, data: &TrainingSet, ranges: &[(f64, f64)]) -> Result<Vec<(usize, u64, f64, f64)>> {
    let mut rows = Vec::new();
    for (i, (base, max)) in ranges.iter().enumerate() {
        let policy = ClrPolicy::new(*base, *max, cfg.stepsize)?;
        let mut net = build_network(cfg, data.size())?;
        let mut sgd = SgdState::new(cfg.momentum, cfg.weight_decay);
        let mut frames = rng::stream(cfg.seed, "frames", 0);
        for t in 0..cfg.stepsize {
            let (_, image, target) = &data.frames[rng::below(&mut frames, data.frames.len())];
            let lr = policy.lr(t);
            let loss = net.forward_loss(image, target, &ForwardCtx::train(cfg.seed, t))?.total;
            rows.push((i, t, lr, loss));
            if !loss.is_finite() {
                break;
            }
            net.backward()?;
            if sgd.step(net.graph.params_mut(), lr).is_err() {
                break;
            }
        }
    }
    Ok(rows)
}
