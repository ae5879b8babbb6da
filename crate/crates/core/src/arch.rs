//! ToolNetMS, ToolNetH and the FCN-8s style baseline.
//!
//! All three share one encoder: `M` stages of two 3x3 conv + PReLU layers,
//! 2x2/2 max pooling between stages and dropout after the last stage. Stage
//! `j` (1-based) runs at `1 / 2^(j-1)` of the input resolution and has
//! `base_width * growth^(j-1)` channels (capped, then scaled by the width
//! multiplier). A 1x1 score convolution with `K` outputs reads the last
//! activation of each stage that feeds a prediction.
//!
//! - ToolNetMS sums scores from the coarsest to the finest stage, upsampling
//!   the running sum by 2 between stages, and softmaxes the full-resolution sum.
//! - ToolNetH upsamples every stage's score straight to full resolution,
//!   softmaxes it, and fuses the `M` probability maps with one learned weight
//!   per scale (initialized to `1/M`). Training uses the multi-scale Dice loss.
//! - The baseline fuses only the three coarsest stages and finishes with one
//!   large upsampling of a map `2^(M-3)` times smaller than the input.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{arg_err, shape_err, Error, Result};
use crate::graph::{ForwardCtx, Graph, NodeId, Op, ParamKind};
use crate::layers::{bilinear_kernel, he_init, upsample_padding, PRELU_INIT_SLOPE};
use crate::rng;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Architecture {
    ToolNetMs,
    ToolNetH,
    Baseline,
}

impl Architecture {
    pub const ALL: [Architecture; 3] = [Architecture::ToolNetMs, Architecture::ToolNetH, Architecture::Baseline];

    pub fn tag(self) -> &'static str {
        match self {
            Architecture::ToolNetMs => "toolnet-ms",
            Architecture::ToolNetH => "toolnet-h",
            Architecture::Baseline => "baseline",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.tag() == s)
            .ok_or_else(|| arg_err("architecture", format!("unknown architecture `{s}` (expected toolnet-ms, toolnet-h or baseline)")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Number of encoder stages, i.e. prediction scales `M`.
    pub scales: usize,
    pub base_width: usize,
    pub width_growth: usize,
    pub width_cap: usize,
    pub width_multiplier: f64,
    pub input_height: usize,
    pub input_width: usize,
    pub dropout: f64,
    /// Softmax the fused ToolNetH map before its loss term and the mask.
    pub renormalize_fused: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig::full_scale()
    }
}

/// Width multiplier that turns the ToolNet encoder into the full-scale baseline.
pub const BASELINE_WIDTH_RATIO: f64 = 4.25;

impl ArchConfig {
    /// Full-size ToolNet configuration (about 7.4M parameters).
    pub fn full_scale() -> Self {
        ArchConfig {
            in_channels: 3,
            num_classes: 2,
            scales: 6,
            base_width: 26,
            width_growth: 2,
            width_cap: 512,
            width_multiplier: 1.0,
            input_height: 576,
            input_width: 736,
            dropout: 0.5,
            renormalize_fused: true,
        }
    }

    /// Desk-scale ToolNet on 64x64 inputs (under 200k parameters).
    pub fn desk_scale() -> Self {
        ArchConfig {
            width_multiplier: 0.15,
            input_height: 64,
            input_width: 64,
            ..ArchConfig::full_scale()
        }
    }

    /// Same encoder family, widened by [`BASELINE_WIDTH_RATIO`].
    pub fn widened_for_baseline(&self) -> Self {
        ArchConfig {
            width_multiplier: self.width_multiplier * BASELINE_WIDTH_RATIO,
            ..self.clone()
        }
    }

    /// Required divisor of the input height and width.
    pub fn divisor(&self) -> usize {
        1 << (self.scales.saturating_sub(1))
    }

    pub fn stage_widths(&self) -> Vec<usize> {
        (0..self.scales)
            .map(|j| {
                let raw = self
                    .base_width
                    .saturating_mul(self.width_growth.saturating_pow(j as u32))
                    .min(self.width_cap);
                (num_traits::Float::round(raw as f64 * self.width_multiplier) as usize).max(1)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales < 2 {
            return Err(arg_err("arch", "need at least 2 scales"));
        }
        if self.scales > 16 {
            return Err(arg_err("arch", "at most 16 scales are supported"));
        }
        if self.base_width == 0 || self.width_growth == 0 || self.width_cap == 0 {
            return Err(arg_err("arch", "widths must be positive"));
        }
        if !(self.width_multiplier > 0.0 && self.width_multiplier.is_finite()) {
            return Err(arg_err("arch", "width multiplier must be positive"));
        }
        if self.in_channels == 0 || self.num_classes < 2 {
            return Err(arg_err("arch", "need at least one input channel and two classes"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(arg_err("arch", format!("dropout {} must lie in [0, 1)", self.dropout)));
        }
        check_divisible(self.input_height, self.input_width, self.divisor())
    }
}

fn check_divisible(h: usize, w: usize, divisor: usize) -> Result<()> {
    if h == 0 || w == 0 || !h.is_multiple_of(divisor) || !w.is_multiple_of(divisor) {
        return Err(Error::Divisibility { h, w, divisor });
    }
    Ok(())
}

/// Output nodes of the shared encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    /// Last activation of each stage (after dropout for the last stage).
    pub stage_outputs: Vec<NodeId>,
    pub widths: Vec<usize>,
}

fn init_stream(seed: u64, name: &str) -> rng::StreamRng {
    rng::stream(seed, name, 0)
}

fn conv_layer(g: &mut Graph, name: &str, input: NodeId, in_c: usize, out_c: usize, seed: u64) -> Result<NodeId> {
    let ks = Shape::new(out_c, in_c, 3, 3);
    let wname = format!("{name}.weight");
    let kernel = he_init(ks, &mut init_stream(seed, &wname));
    let k = g.add_param(wname, ParamKind::Kernel, kernel)?;
    let b = g.add_param(format!("{name}.bias"), ParamKind::Bias, Tensor::zeros(Shape::new(1, out_c, 1, 1)))?;
    g.push(
        name.to_string(),
        Op::Conv2d {
            input,
            kernel: k,
            bias: Some(b),
            stride: 1,
            pad: 1,
        },
    )
}

fn prelu_layer(g: &mut Graph, name: &str, input: NodeId, channels: usize) -> Result<NodeId> {
    let slopes = g.add_param(
        format!("{name}.slope"),
        ParamKind::Slope,
        Tensor::full(Shape::new(1, channels, 1, 1), PRELU_INIT_SLOPE),
    )?;
    g.push(name.to_string(), Op::PRelu { input, slopes })
}

/// Appends the encoder to `g`, reading from `image`.
pub fn build_encoder(g: &mut Graph, cfg: &ArchConfig, image: NodeId, seed: u64) -> Result<Encoder> {
    cfg.validate()?;
    let widths = cfg.stage_widths();
    let mut x = image;
    let mut in_c = cfg.in_channels;
    let mut stage_outputs = Vec::with_capacity(cfg.scales);
    for (j, w) in widths.iter().enumerate() {
        let s = j + 1;
        if j > 0 {
            x = g.push(format!("enc{s}.pool"), Op::MaxPool2d { input: x, k: 2, stride: 2 })?;
        }
        for l in 1..=2 {
            x = conv_layer(g, &format!("enc{s}.conv{l}"), x, in_c, *w, seed)?;
            x = prelu_layer(g, &format!("enc{s}.prelu{l}"), x, *w)?;
            in_c = *w;
        }
        if s == cfg.scales && cfg.dropout > 0.0 {
            x = g.push(format!("enc{s}.dropout"), Op::Dropout { input: x, p: cfg.dropout })?;
        }
        stage_outputs.push(x);
    }
    Ok(Encoder { stage_outputs, widths })
}

fn score_layer(g: &mut Graph, s: usize, input: NodeId, in_c: usize, classes: usize) -> Result<NodeId> {
    let k = g.add_param(format!("score{s}.weight"), ParamKind::Kernel, Tensor::zeros(Shape::new(classes, in_c, 1, 1)))?;
    let b = g.add_param(format!("score{s}.bias"), ParamKind::Bias, Tensor::zeros(Shape::new(1, classes, 1, 1)))?;
    g.push(
        format!("score{s}"),
        Op::Conv2d {
            input,
            kernel: k,
            bias: Some(b),
            stride: 1,
            pad: 0,
        },
    )
}

fn upsample_layer(g: &mut Graph, name: &str, input: NodeId, classes: usize, factor: usize) -> Result<NodeId> {
    let k = g.add_param(format!("{name}.weight"), ParamKind::Upsample, bilinear_kernel(factor, classes)?)?;
    g.push(
        name.to_string(),
        Op::ConvTranspose2d {
            input,
            kernel: k,
            bias: None,
            stride: factor,
            pad: upsample_padding(factor),
        },
    )
}

/// A built network: the graph plus the nodes that matter to callers.
#[derive(Debug, Clone)]
pub struct Network {
    pub arch: Architecture,
    pub cfg: ArchConfig,
    pub graph: Graph,
    pub image: NodeId,
    pub target: NodeId,
    /// ToolNetH per-scale probability maps, finest first. Empty otherwise.
    pub per_scale: Vec<NodeId>,
    /// ToolNetH fused map.
    pub fused: Option<NodeId>,
    /// Map the inference mask is taken from.
    pub final_pred: NodeId,
    /// Baseline score map just before the final upsampling.
    pub pre_upsample: Option<NodeId>,
    /// Loss taps: ToolNetH has `M` per-scale terms followed by the fused term;
    /// the other architectures have exactly one.
    pub loss_terms: Vec<NodeId>,
    pub loss: NodeId,
}

/// Probability maps produced by one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalePredictions {
    pub per_scale: Vec<Tensor>,
    pub fused: Option<Tensor>,
    pub final_map: Tensor,
}

/// Loss value and its individual taps after a training forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub terms: Vec<f64>,
}

pub fn build_toolnet_ms(cfg: &ArchConfig, seed: u64) -> Result<Network> {
    let mut g = Graph::new();
    let image = g.input("image");
    let target = g.input("target");
    let enc = build_encoder(&mut g, cfg, image, seed)?;
    let k = cfg.num_classes;
    let m = cfg.scales;
    let mut running = score_layer(&mut g, m, enc.stage_outputs[m - 1], enc.widths[m - 1], k)?;
    for s in (1..m).rev() {
        let up = upsample_layer(&mut g, &format!("up{}", s + 1), running, k, 2)?;
        let score = score_layer(&mut g, s, enc.stage_outputs[s - 1], enc.widths[s - 1], k)?;
        running = g.push(format!("sum{s}"), Op::Add(up, score))?;
    }
    let final_pred = g.push("prob", Op::Softmax(running))?;
    let loss = g.push("loss", Op::DiceLoss { pred: final_pred, target })?;
    Ok(Network {
        arch: Architecture::ToolNetMs,
        cfg: cfg.clone(),
        graph: g,
        image,
        target,
        per_scale: Vec::new(),
        fused: None,
        final_pred,
        pre_upsample: None,
        loss_terms: vec![loss],
        loss,
    })
}

pub fn build_toolnet_h(cfg: &ArchConfig, seed: u64) -> Result<Network> {
    let mut g = Graph::new();
    let image = g.input("image");
    let target = g.input("target");
    let enc = build_encoder(&mut g, cfg, image, seed)?;
    let k = cfg.num_classes;
    let m = cfg.scales;
    let mut per_scale = Vec::with_capacity(m);
    for s in 1..=m {
        let mut x = score_layer(&mut g, s, enc.stage_outputs[s - 1], enc.widths[s - 1], k)?;
        if s > 1 {
            x = upsample_layer(&mut g, &format!("up{s}"), x, k, 1 << (s - 1))?;
        }
        per_scale.push(g.push(format!("prob{s}"), Op::Softmax(x))?);
    }
    let weights = g.add_param(
        "fuse.weight",
        ParamKind::Fusion,
        Tensor::full(Shape::new(1, m, 1, 1), 1.0 / m as f64),
    )?;
    let raw = g.push(
        "fuse",
        Op::Fuse {
            inputs: per_scale.clone(),
            weights,
        },
    )?;
    let fused = if cfg.renormalize_fused {
        g.push("prob_fused", Op::Softmax(raw))?
    } else {
        raw
    };
    let mut loss_terms = Vec::with_capacity(m + 1);
    for (s, p) in per_scale.iter().enumerate() {
        loss_terms.push(g.push(format!("loss{}", s + 1), Op::DiceLoss { pred: *p, target })?);
    }
    loss_terms.push(g.push("loss_fused", Op::DiceLoss { pred: fused, target })?);
    let loss = g.push(
        "loss",
        Op::WeightedSum {
            inputs: loss_terms.clone(),
            coeffs: vec![1.0; m + 1],
        },
    )?;
    Ok(Network {
        arch: Architecture::ToolNetH,
        cfg: cfg.clone(),
        graph: g,
        image,
        target,
        per_scale,
        fused: Some(fused),
        final_pred: fused,
        pre_upsample: None,
        loss_terms,
        loss,
    })
}

pub fn build_baseline_fcn8s(cfg: &ArchConfig, seed: u64) -> Result<Network> {
    if cfg.scales < 3 {
        return Err(arg_err("baseline", "the skip pattern needs at least 3 scales"));
    }
    let mut g = Graph::new();
    let image = g.input("image");
    let target = g.input("target");
    let enc = build_encoder(&mut g, cfg, image, seed)?;
    let k = cfg.num_classes;
    let m = cfg.scales;
    let mut running = score_layer(&mut g, m, enc.stage_outputs[m - 1], enc.widths[m - 1], k)?;
    for s in [m - 1, m - 2] {
        let up = upsample_layer(&mut g, &format!("up{}", s + 1), running, k, 2)?;
        let score = score_layer(&mut g, s, enc.stage_outputs[s - 1], enc.widths[s - 1], k)?;
        running = g.push(format!("sum{s}"), Op::Add(up, score))?;
    }
    let pre_upsample = running;
    let factor = 1 << (m - 3);
    let up = if factor > 1 {
        upsample_layer(&mut g, "up_final", running, k, factor)?
    } else {
        running
    };
    let final_pred = g.push("prob", Op::Softmax(up))?;
    let loss = g.push("loss", Op::DiceLoss { pred: final_pred, target })?;
    Ok(Network {
        arch: Architecture::Baseline,
        cfg: cfg.clone(),
        graph: g,
        image,
        target,
        per_scale: Vec::new(),
        fused: None,
        final_pred,
        pre_upsample: Some(pre_upsample),
        loss_terms: vec![loss],
        loss,
    })
}

pub fn count_parameters(graph: &Graph) -> usize {
    graph.count_parameters()
}

impl Network {
    pub fn build(arch: Architecture, cfg: &ArchConfig, seed: u64) -> Result<Self> {
        match arch {
            Architecture::ToolNetMs => build_toolnet_ms(cfg, seed),
            Architecture::ToolNetH => build_toolnet_h(cfg, seed),
            Architecture::Baseline => build_baseline_fcn8s(cfg, seed),
        }
    }

    pub fn count_parameters(&self) -> usize {
        self.graph.count_parameters()
    }

    /// Names of the loss taps, in `loss_terms` order.
    pub fn loss_term_names(&self) -> Vec<String> {
        self.loss_terms
            .iter()
            .map(|id| self.graph.nodes()[*id].name.clone())
            .collect()
    }

    pub fn check_image(&self, shape: Shape) -> Result<()> {
        if shape.c != self.cfg.in_channels {
            return Err(shape_err(
                "forward",
                format!("image has {} channels, network expects {}", shape.c, self.cfg.in_channels),
            ));
        }
        check_divisible(shape.h, shape.w, self.cfg.divisor())
    }

    fn prediction_nodes(&self) -> Vec<NodeId> {
        let mut out = self.per_scale.clone();
        out.extend(self.fused);
        out.push(self.final_pred);
        out
    }

    /// Runs the prediction part of the graph on `image`.
    pub fn forward(&mut self, image: &Tensor, ctx: &ForwardCtx) -> Result<ScalePredictions> {
        self.check_image(image.shape())?;
        self.graph.set_input(self.image, image.clone())?;
        let outputs = self.prediction_nodes();
        self.graph.forward(&outputs, ctx)?;
        let get = |id: NodeId| self.graph.value(id).cloned().expect("forward evaluated the prediction nodes");
        Ok(ScalePredictions {
            per_scale: self.per_scale.iter().map(|id| get(*id)).collect(),
            fused: self.fused.map(get),
            final_map: get(self.final_pred),
        })
    }

    /// Forward pass through the loss; call [`Network::backward`] afterwards.
    pub fn forward_loss(&mut self, image: &Tensor, target: &Tensor, ctx: &ForwardCtx) -> Result<LossBreakdown> {
        self.check_image(image.shape())?;
        let expect = Shape::new(image.shape().n, self.cfg.num_classes, image.shape().h, image.shape().w);
        if target.shape() != expect {
            return Err(shape_err("forward_loss", format!("target {} does not match {}", target.shape(), expect)));
        }
        self.graph.set_input(self.image, image.clone())?;
        self.graph.set_input(self.target, target.clone())?;
        let mut outputs = self.loss_terms.clone();
        outputs.push(self.loss);
        self.graph.forward(&outputs, ctx)?;
        let val = |id: NodeId| self.graph.value(id).expect("loss evaluated").item();
        Ok(LossBreakdown {
            total: val(self.loss),
            terms: self.loss_terms.iter().map(|id| val(*id)).collect(),
        })
    }

    pub fn backward(&mut self) -> Result<()> {
        self.graph.backward(self.loss)
    }

    /// Whether every value of every parameter is finite.
    pub fn parameters_finite(&self) -> bool {
        self.graph.params().iter().all(|p| p.value.data().iter().all(|v| v.is_finite()))
    }
}

/// Upper bound helper for tests and reports: parameters of a bias-carrying 3x3 conv.
pub fn conv3x3_params(in_c: usize, out_c: usize) -> usize {
    out_c * in_c * 9 + out_c
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> ArchConfig {
        ArchConfig {
            scales: 2,
            base_width: 4,
            width_growth: 2,
            width_cap: 64,
            width_multiplier: 1.0,
            input_height: 8,
            input_width: 8,
            ..ArchConfig::full_scale()
        }
    }

    #[test]
    fn encoder_widths_and_pools() {
        let cfg = toy();
        assert_eq!(cfg.stage_widths(), vec![4, 8]);
        let net = build_toolnet_ms(&cfg, 0).unwrap();
        let pools = net.graph.nodes().iter().filter(|n| matches!(n.op, Op::MaxPool2d { .. })).count();
        assert_eq!(pools, 1);
        let six = ArchConfig::desk_scale();
        let net = build_toolnet_h(&six, 0).unwrap();
        let pools = net.graph.nodes().iter().filter(|n| matches!(n.op, Op::MaxPool2d { .. })).count();
        assert_eq!(pools, 5);
        assert_eq!(six.divisor(), 32);
    }

    #[test]
    fn rejects_indivisible_input() {
        let cfg = ArchConfig {
            input_height: 60,
            ..ArchConfig::desk_scale()
        };
        assert!(matches!(build_toolnet_h(&cfg, 0), Err(Error::Divisibility { divisor: 32, .. })));
        let mut net = build_toolnet_ms(&ArchConfig::desk_scale(), 0).unwrap();
        let err = net.forward(&Tensor::zeros(Shape::new(1, 3, 48, 40)), &ForwardCtx::eval());
        assert!(matches!(err, Err(Error::Divisibility { .. })));
    }

    #[test]
    fn architecture_tags_round_trip() {
        for a in Architecture::ALL {
            assert_eq!(a.tag().parse::<Architecture>().unwrap(), a);
        }
        assert!("fcn".parse::<Architecture>().is_err());
    }

    #[test]
    fn count_hand_example() {
        let mut g = Graph::new();
        let i = g.input("x");
        let c = conv_layer(&mut g, "c", i, 2, 4, 0).unwrap();
        assert_eq!(g.count_parameters(), 76);
        assert_eq!(conv3x3_params(2, 4), 76);
        prelu_layer(&mut g, "p", c, 4).unwrap();
        assert_eq!(count_parameters(&g), 80);
    }
}
