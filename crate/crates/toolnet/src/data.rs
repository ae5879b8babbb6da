//! Synthetic tool-on-tissue frames, PNG codecs, manifests and splits.
//!
//! Masks are stored as 8-bit grayscale with 0 for tissue and 255 for the
//! instrument. Images are 8-bit RGB. A manifest is a text file of the form
//!
//! ```text
//! mean_r = 0.51
//! mean_g = 0.22
//! mean_b = 0.19
//! frame_000<TAB>images/frame_000.png<TAB>masks/frame_000.png<TAB>train
//! ```
//!
//! Paths are relative to the manifest's directory.

use std::collections::BTreeSet;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use toolnet_core::metrics::Mask;
use toolnet_core::rng::{self, StreamRng};
use toolnet_core::{Shape, Tensor};

/// Generated masks keep their foreground fraction within these bounds.
pub const MIN_FOREGROUND: f64 = 0.02;
pub const MAX_FOREGROUND: f64 = 0.40;
/// Frame sizes must be multiples of this.
pub const SIZE_DIVISOR: usize = 32;
const MAX_ATTEMPTS: u64 = 256;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: cannot decode PNG: {detail}")]
    Decode { path: PathBuf, detail: String },
    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("image is {image_w}x{image_h} but mask is {mask_w}x{mask_h} ({id})")]
    DimensionMismatch {
        id: String,
        image_w: usize,
        image_h: usize,
        mask_w: usize,
        mask_h: usize,
    },
    #[error("mask is not binary: found values {0:?} (expected only 0 and 255)")]
    NonBinaryMask(Vec<u8>),
    #[error("frame size {h}x{w} is not a multiple of {SIZE_DIVISOR}")]
    BadSize { h: usize, w: usize },
    #[error("invalid split request: {0}")]
    Split(String),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major.
    pub data: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl GrayImage {
    /// Converts a 0/1 mask to the 0/255 file convention.
    pub fn from_mask(mask: &Mask) -> Self {
        GrayImage {
            width: mask.width,
            height: mask.height,
            data: mask.data.iter().map(|v| v * 255).collect(),
        }
    }

    /// Converts a 0/255 mask to 0/1.
    pub fn to_mask(&self) -> Result<Mask> {
        check_binary(&self.data)?;
        Mask::new(self.height, self.width, self.data.iter().map(|v| u8::from(*v == 255)).collect())
            .map_err(|e| DataError::Invalid(e.to_string()))
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.data.iter().filter(|v| **v == 255).count() as f64 / self.data.len().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub id: String,
    pub image: RgbImage,
    pub mask: GrayImage,
}

fn check_binary(data: &[u8]) -> Result<()> {
    let bad: BTreeSet<u8> = data.iter().copied().filter(|v| *v != 0 && *v != 255).collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(DataError::NonBinaryMask(bad.into_iter().collect()))
    }
}

pub fn write_rgb_png(path: &Path, img: &RgbImage) -> Result<()> {
    write_png(path, img.width, img.height, png::ColorType::Rgb, &img.data)
}

pub fn write_gray_png(path: &Path, img: &GrayImage) -> Result<()> {
    write_png(path, img.width, img.height, png::ColorType::Grayscale, &img.data)
}

fn write_png(path: &Path, width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let file = File::create(path).map_err(io_err(path))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let encode_err = |e: png::EncodingError| DataError::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    };
    let mut writer = enc.write_header().map_err(encode_err)?;
    writer.write_image_data(data).map_err(encode_err)?;
    writer.finish().map_err(encode_err)
}

struct Decoded {
    width: usize,
    height: usize,
    color: png::ColorType,
    data: Vec<u8>,
}

fn read_png(path: &Path) -> Result<Decoded> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut dec = png::Decoder::new(std::io::BufReader::new(file));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let decode_err = |e: png::DecodingError| DataError::Decode {
        path: path.to_path_buf(),
        detail: e.to_string(),
    };
    let mut reader = dec.read_info().map_err(decode_err)?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(decode_err)?;
    buf.truncate(info.buffer_size());
    Ok(Decoded {
        width: info.width as usize,
        height: info.height as usize,
        color: info.color_type,
        data: buf,
    })
}

/// Reads an RGB image; gray and alpha variants are converted.
pub fn read_rgb_png(path: &Path) -> Result<RgbImage> {
    let d = read_png(path)?;
    let data = match d.color {
        png::ColorType::Rgb => d.data,
        png::ColorType::Rgba => d.data.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => d.data.iter().flat_map(|v| [*v; 3]).collect(),
        png::ColorType::GrayscaleAlpha => d.data.chunks_exact(2).flat_map(|p| [p[0]; 3]).collect(),
        other => {
            return Err(DataError::Format {
                path: path.to_path_buf(),
                detail: format!("unsupported color type {other:?}"),
            })
        }
    };
    Ok(RgbImage {
        width: d.width,
        height: d.height,
        data,
    })
}

/// Reads a single-channel 8-bit image.
pub fn read_gray_png(path: &Path) -> Result<GrayImage> {
    let d = read_png(path)?;
    let data = match d.color {
        png::ColorType::Grayscale => d.data,
        png::ColorType::GrayscaleAlpha => d.data.chunks_exact(2).map(|p| p[0]).collect(),
        other => {
            return Err(DataError::Format {
                path: path.to_path_buf(),
                detail: format!("mask must be grayscale, found {other:?}"),
            })
        }
    };
    Ok(GrayImage {
        width: d.width,
        height: d.height,
        data,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            _ => Err(DataError::Invalid(format!("unknown split `{s}` (expected train, validation or test)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative to the manifest directory unless absolute.
    pub image: PathBuf,
    pub mask: PathBuf,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    /// Per-channel means of `[0, 1]`-scaled pixels, RGB order.
    pub means: [f64; 3],
    pub entries: Vec<ManifestEntry>,
    /// Directory that relative paths resolve against.
    pub root: PathBuf,
}

impl Manifest {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (name, m) in ["mean_r", "mean_g", "mean_b"].iter().zip(self.means) {
            out.push_str(&format!("{name} = {m}\n"));
        }
        for e in &self.entries {
            out.push_str(&format!("{}\t{}\t{}\t{}\n", e.id, e.image.display(), e.mask.display(), e.split));
        }
        out
    }

    pub fn parse(text: &str, root: &Path) -> Result<Self> {
        let bad = |line: usize, detail: String| DataError::Format {
            path: root.join(format!("<manifest line {line}>")),
            detail,
        };
        let mut means = [None; 3];
        let mut entries = Vec::new();
        let mut ids = BTreeSet::new();
        for (i, line) in text.lines().enumerate() {
            let n = i + 1;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some((key, value)) = line.split_once('=') {
                if !line.contains('\t') {
                    let slot = match key.trim() {
                        "mean_r" => 0,
                        "mean_g" => 1,
                        "mean_b" => 2,
                        other => return Err(bad(n, format!("unknown header key `{other}`"))),
                    };
                    let v: f64 = value
                        .trim()
                        .parse()
                        .map_err(|_| bad(n, format!("bad number `{}`", value.trim())))?;
                    means[slot] = Some(v);
                    continue;
                }
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(bad(n, format!("expected 4 tab-separated fields, found {}", fields.len())));
            }
            let split = fields[3].parse().map_err(|e: DataError| bad(n, e.to_string()))?;
            if !ids.insert(fields[0].to_string()) {
                return Err(bad(n, format!("duplicate id `{}`", fields[0])));
            }
            entries.push(ManifestEntry {
                id: fields[0].to_string(),
                image: PathBuf::from(fields[1]),
                mask: PathBuf::from(fields[2]),
                split,
            });
        }
        let means = match means {
            [Some(r), Some(g), Some(b)] => [r, g, b],
            _ => return Err(bad(0, "header must define mean_r, mean_g and mean_b".into())),
        };
        Ok(Manifest {
            means,
            entries,
            root: root.to_path_buf(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Manifest::parse(&text, &root).map_err(|e| match e {
            DataError::Format { detail, .. } => DataError::Format {
                path: path.to_path_buf(),
                detail,
            },
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        fs::write(path, self.to_text()).map_err(io_err(path))
    }

    pub fn load_sample(&self, entry: &ManifestEntry) -> Result<Sample> {
        load_sample(&entry.id, &self.resolve(&entry.image), &self.resolve(&entry.mask))
    }

    /// Recomputes the channel means over the training split (all entries when
    /// the training split is empty).
    pub fn recompute_means(&mut self) -> Result<()> {
        let chosen: Vec<&ManifestEntry> = if self.count(Split::Train) > 0 {
            self.split(Split::Train).collect()
        } else {
            self.entries.iter().collect()
        };
        let images: Vec<RgbImage> = chosen
            .iter()
            .map(|e| read_rgb_png(&self.resolve(&e.image)))
            .collect::<Result<_>>()?;
        self.means = channel_means(&images);
        Ok(())
    }
}

pub fn channel_means(images: &[RgbImage]) -> [f64; 3] {
    let mut sums = [0u64; 3];
    let mut count = 0u64;
    for img in images {
        for px in img.data.chunks_exact(3) {
            for c in 0..3 {
                sums[c] += u64::from(px[c]);
            }
        }
        count += (img.width * img.height) as u64;
    }
    if count == 0 {
        return [0.0; 3];
    }
    sums.map(|s| s as f64 / (255.0 * count as f64))
}

pub fn load_sample(id: &str, image_path: &Path, mask_path: &Path) -> Result<Sample> {
    let image = read_rgb_png(image_path)?;
    let mask = read_gray_png(mask_path)?;
    if image.width != mask.width || image.height != mask.height {
        return Err(DataError::DimensionMismatch {
            id: id.to_string(),
            image_w: image.width,
            image_h: image.height,
            mask_w: mask.width,
            mask_h: mask.height,
        });
    }
    check_binary(&mask.data).map_err(|e| DataError::Format {
        path: mask_path.to_path_buf(),
        detail: e.to_string(),
    })?;
    Ok(Sample {
        id: id.to_string(),
        image,
        mask,
    })
}

/// `1 x 3 x H x W` tensor of `pixel / 255 - mean_c`.
pub fn normalize(img: &RgbImage, means: &[f64; 3]) -> Tensor {
    let plane = img.width * img.height;
    let mut data = vec![0.0; 3 * plane];
    for (p, px) in img.data.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + p] = f64::from(px[c]) / 255.0 - means[c];
        }
    }
    Tensor::from_vec(Shape::new(1, 3, img.height, img.width), data)
}

/// Inverse of [`normalize`], rounding to the nearest 8-bit level.
pub fn denormalize(t: &Tensor, means: &[f64; 3]) -> Result<RgbImage> {
    let s = t.shape();
    if s.n != 1 || s.c != 3 {
        return Err(DataError::Invalid(format!("expected a 1x3xHxW tensor, got {s}")));
    }
    let plane = s.plane();
    let mut data = vec![0u8; 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            let v = ((t.data()[c * plane + p] + means[c]) * 255.0).round().clamp(0.0, 255.0);
            data[3 * p + c] = v as u8;
        }
    }
    Ok(RgbImage {
        width: s.w,
        height: s.h,
        data,
    })
}

/// Two-channel one-hot target: channel 0 is tissue, channel 1 the instrument.
pub fn one_hot(mask: &GrayImage) -> Result<Tensor> {
    check_binary(&mask.data)?;
    let plane = mask.width * mask.height;
    let mut data = vec![0.0; 2 * plane];
    for (p, v) in mask.data.iter().enumerate() {
        data[usize::from(*v == 255) * plane + p] = 1.0;
    }
    Ok(Tensor::from_vec(Shape::new(1, 2, mask.height, mask.width), data))
}

/// Seeded shuffle, then contiguous train/validation/test blocks with sizes
/// from the largest-remainder rounding of `ratios * n`.
pub fn split_dataset(manifest: &Manifest, ratios: [f64; 3], seed: u64) -> Result<Manifest> {
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DataError::Split(format!("ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let n = manifest.entries.len();
    let sizes = largest_remainder(n, ratios);
    for ((size, ratio), split) in sizes.iter().zip(ratios).zip(Split::ALL) {
        if ratio > 0.0 && *size == 0 {
            return Err(DataError::Split(format!(
                "{n} entries leave the {split} split empty at ratio {ratio}"
            )));
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut r = rng::stream(seed, "split", 0);
    for i in (1..n).rev() {
        order.swap(i, rng::below(&mut r, i + 1));
    }
    let mut entries = manifest.entries.clone();
    let mut pos = 0;
    for (size, split) in sizes.iter().zip(Split::ALL) {
        for idx in &order[pos..pos + size] {
            entries[*idx].split = split;
        }
        pos += size;
    }
    Ok(Manifest {
        entries,
        ..manifest.clone()
    })
}

fn largest_remainder(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let exact = ratios.map(|r| r * n as f64);
    let mut sizes = exact.map(|e| e.floor() as usize);
    let mut left = n - sizes.iter().sum::<usize>();
    let mut order = [0usize, 1, 2];
    // Largest fractional part first; ties go to the earlier split.
    order.sort_by(|a, b| {
        let fa = exact[*a] - exact[*a].floor();
        let fb = exact[*b] - exact[*b].floor();
        fb.partial_cmp(&fa).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(b))
    });
    for i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[*i] += 1;
        left -= 1;
    }
    sizes
}

/// Parses `HxW`.
pub fn parse_size(s: &str) -> Result<(usize, usize)> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| DataError::Invalid(format!("size `{s}` is not of the form HxW")))?;
    let parse = |v: &str| {
        v.trim()
            .parse::<usize>()
            .map_err(|_| DataError::Invalid(format!("size `{s}` is not of the form HxW")))
    };
    Ok((parse(h)?, parse(w)?))
}

// Renderer.

struct ValueNoise {
    grid: Vec<f64>,
    gw: usize,
    cell: f64,
}

impl ValueNoise {
    fn new(r: &mut StreamRng, h: usize, w: usize, cell: f64) -> Self {
        let gw = (w as f64 / cell).ceil() as usize + 2;
        let gh = (h as f64 / cell).ceil() as usize + 2;
        ValueNoise {
            grid: (0..gw * gh).map(|_| rng::uniform(r)).collect(),
            gw,
            cell,
        }
    }

    fn at(&self, y: f64, x: f64) -> f64 {
        let (fy, fx) = (y / self.cell, x / self.cell);
        let (iy, ix) = (fy.floor() as usize, fx.floor() as usize);
        let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
        let (ty, tx) = (smooth(fy - iy as f64), smooth(fx - ix as f64));
        let g = |a: usize, b: usize| self.grid[a * self.gw + b];
        let top = g(iy, ix) * (1.0 - tx) + g(iy, ix + 1) * tx;
        let bottom = g(iy + 1, ix) * (1.0 - tx) + g(iy + 1, ix + 1) * tx;
        top * (1.0 - ty) + bottom * ty
    }
}

#[derive(Debug, Clone, Copy)]
struct Pt {
    x: f64,
    y: f64,
}

/// One instrument: a rounded shaft from `start` to `tip` plus a jaw polygon.
struct Tool {
    start: Pt,
    tip: Pt,
    radius: f64,
    jaw: Vec<Pt>,
    shade: f64,
}

impl Tool {
    fn random(r: &mut StreamRng, h: f64, w: f64) -> Tool {
        let u = |r: &mut StreamRng| rng::uniform(r);
        let side = rng::below(r, 4);
        let t = 0.15 + 0.7 * u(r);
        // Entry point just outside the chosen border and inward normal angle.
        let (start, normal) = match side {
            0 => (Pt { x: t * w, y: -2.0 }, std::f64::consts::FRAC_PI_2),
            1 => (Pt { x: w + 2.0, y: t * h }, std::f64::consts::PI),
            2 => (Pt { x: t * w, y: h + 2.0 }, -std::f64::consts::FRAC_PI_2),
            _ => (Pt { x: -2.0, y: t * h }, 0.0),
        };
        let angle = normal + (u(r) - 0.5) * 1.2;
        let span = h.min(w);
        let length = span * (0.35 + 0.45 * u(r));
        let radius = span * (0.035 + 0.035 * u(r));
        let (dx, dy) = (angle.cos(), angle.sin());
        let tip = Pt {
            x: start.x + dx * length,
            y: start.y + dy * length,
        };
        // Jaw: an opened wedge beyond the tip.
        let jaw_len = radius * (2.0 + 2.0 * u(r));
        let open = 0.25 + 0.5 * u(r);
        let (nx, ny) = (-dy, dx);
        let base_l = Pt {
            x: tip.x + nx * radius,
            y: tip.y + ny * radius,
        };
        let base_r = Pt {
            x: tip.x - nx * radius,
            y: tip.y - ny * radius,
        };
        let a1 = angle + open;
        let a2 = angle - open;
        let far_l = Pt {
            x: tip.x + a1.cos() * jaw_len + nx * radius * 0.4,
            y: tip.y + a1.sin() * jaw_len + ny * radius * 0.4,
        };
        let far_r = Pt {
            x: tip.x + a2.cos() * jaw_len - nx * radius * 0.4,
            y: tip.y + a2.sin() * jaw_len - ny * radius * 0.4,
        };
        let mid = Pt {
            x: tip.x + dx * jaw_len * 0.45,
            y: tip.y + dy * jaw_len * 0.45,
        };
        Tool {
            start,
            tip,
            radius,
            jaw: vec![base_l, far_l, mid, far_r, base_r],
            shade: 0.55 + 0.2 * u(r),
        }
    }

    /// Signed offset across the shaft in `[-1, 1]` when inside, for shading.
    fn shaft_offset(&self, p: Pt) -> Option<f64> {
        let (vx, vy) = (self.tip.x - self.start.x, self.tip.y - self.start.y);
        let len2 = vx * vx + vy * vy;
        let t = (((p.x - self.start.x) * vx + (p.y - self.start.y) * vy) / len2).clamp(0.0, 1.0);
        let (cx, cy) = (self.start.x + t * vx, self.start.y + t * vy);
        let d = ((p.x - cx).powi(2) + (p.y - cy).powi(2)).sqrt();
        if d <= self.radius {
            let side = (p.x - cx) * -vy + (p.y - cy) * vx;
            Some(side.signum() * d / self.radius)
        } else {
            None
        }
    }

    fn in_jaw(&self, p: Pt) -> bool {
        let mut inside = false;
        let n = self.jaw.len();
        for i in 0..n {
            let (a, b) = (self.jaw[i], self.jaw[(i + n - 1) % n]);
            if (a.y > p.y) != (b.y > p.y) && p.x < (b.x - a.x) * (p.y - a.y) / (b.y - a.y) + a.x {
                inside = !inside;
            }
        }
        inside
    }
}

fn render(seed: u64, index: usize, attempt: u64, h: usize, w: usize) -> (RgbImage, GrayImage) {
    let mut r = rng::stream(seed, &format!("frame{index}"), attempt);
    let coarse = ValueNoise::new(&mut r, h, w, (h.min(w) as f64 / 3.0).max(4.0));
    let fine = ValueNoise::new(&mut r, h, w, (h.min(w) as f64 / 10.0).max(2.0));
    let tint = [0.75 + 0.2 * rng::uniform(&mut r), 0.2 + 0.1 * rng::uniform(&mut r), 0.18 + 0.1 * rng::uniform(&mut r)];
    let n_tools = 1 + rng::below(&mut r, 2);
    let tools: Vec<Tool> = (0..n_tools).map(|_| Tool::random(&mut r, h as f64, w as f64)).collect();
    let n_spec = 2 + rng::below(&mut r, 5);
    let speculars: Vec<(Pt, f64, f64)> = (0..n_spec)
        .map(|_| {
            let p = Pt {
                x: rng::uniform(&mut r) * w as f64,
                y: rng::uniform(&mut r) * h as f64,
            };
            (p, 0.6 + 2.0 * rng::uniform(&mut r), 0.4 + 0.5 * rng::uniform(&mut r))
        })
        .collect();
    let blur = rng::uniform(&mut r) < 0.5;

    let mut rgb = vec![0.0f64; 3 * h * w];
    let mut mask = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let p = Pt {
                x: x as f64 + 0.5,
                y: y as f64 + 0.5,
            };
            let n = 0.7 * coarse.at(p.y, p.x) + 0.3 * fine.at(p.y, p.x);
            let mut px = [tint[0] * (0.55 + 0.45 * n), tint[1] * (0.5 + 0.8 * n), tint[2] * (0.5 + 0.8 * n)];
            for tool in &tools {
                let shaft = tool.shaft_offset(p);
                if shaft.is_some() || tool.in_jaw(p) {
                    // Cylindrical shading across the shaft.
                    let off = shaft.unwrap_or(0.3);
                    let g = tool.shade * (0.65 + 0.35 * (1.0 - off * off).sqrt()) + 0.05 * (n - 0.5);
                    px = [g, g * 1.01, g * 1.04];
                    mask[y * w + x] = 255;
                }
            }
            for (c, s, a) in &speculars {
                let d2 = (p.x - c.x).powi(2) + (p.y - c.y).powi(2);
                let v = a * (-d2 / (2.0 * s * s)).exp();
                for ch in &mut px {
                    *ch += v;
                }
            }
            for c in 0..3 {
                rgb[3 * (y * w + x) + c] = px[c];
            }
        }
    }
    if blur {
        rgb = box_blur(&rgb, h, w);
    }
    let data = rgb.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    (
        RgbImage { width: w, height: h, data },
        GrayImage {
            width: w,
            height: h,
            data: mask,
        },
    )
}

fn box_blur(rgb: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; rgb.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                let mut n = 0.0;
                for yy in y.saturating_sub(1)..(y + 2).min(h) {
                    for xx in x.saturating_sub(1)..(x + 2).min(w) {
                        acc += rgb[3 * (yy * w + xx) + c];
                        n += 1.0;
                    }
                }
                out[3 * (y * w + x) + c] = acc / n;
            }
        }
    }
    out
}

/// Renders one frame, redrawing the instruments until the foreground fraction
/// lies in `[MIN_FOREGROUND, MAX_FOREGROUND]`.
pub fn render_sample(seed: u64, index: usize, h: usize, w: usize) -> Result<Sample> {
    if h == 0 || w == 0 || !h.is_multiple_of(SIZE_DIVISOR) || !w.is_multiple_of(SIZE_DIVISOR) {
        return Err(DataError::BadSize { h, w });
    }
    for attempt in 0..MAX_ATTEMPTS {
        let (image, mask) = render(seed, index, attempt, h, w);
        let f = mask.foreground_fraction();
        if (MIN_FOREGROUND..=MAX_FOREGROUND).contains(&f) {
            return Ok(Sample {
                id: format!("frame_{index:04}"),
                image,
                mask,
            });
        }
    }
    Err(DataError::Invalid(format!(
        "frame {index}: no instrument layout within the foreground bounds after {MAX_ATTEMPTS} attempts"
    )))
}

/// Writes `n` frames under `out` (`images/`, `masks/`, `manifest.txt`). Every
/// entry starts in the training split; the means cover all frames.
pub fn generate_synthetic(n: usize, seed: u64, size: (usize, usize), out: &Path) -> Result<Manifest> {
    if n == 0 {
        return Err(DataError::Invalid("need at least one frame".into()));
    }
    let (h, w) = size;
    let samples: Vec<Sample> = (0..n)
        .into_par_iter()
        .map(|i| render_sample(seed, i, h, w))
        .collect::<Result<_>>()?;
    let mut entries = Vec::with_capacity(n);
    for s in &samples {
        let image = PathBuf::from("images").join(format!("{}.png", s.id));
        let mask = PathBuf::from("masks").join(format!("{}.png", s.id));
        write_rgb_png(&out.join(&image), &s.image)?;
        write_gray_png(&out.join(&mask), &s.mask)?;
        entries.push(ManifestEntry {
            id: s.id.clone(),
            image,
            mask,
            split: Split::Train,
        });
    }
    let images: Vec<RgbImage> = samples.into_iter().map(|s| s.image).collect();
    Ok(Manifest {
        means: channel_means(&images),
        entries,
        root: out.to_path_buf(),
    })
}

/// Writes a manifest to `path` and flushes it.
pub fn write_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    let mut f = BufWriter::new(File::create(path).map_err(io_err(path))?);
    f.write_all(manifest.to_text().as_bytes()).map_err(io_err(path))?;
    f.flush().map_err(io_err(path))
}
