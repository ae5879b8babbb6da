//! Class-balanced Dice loss, scale fusion and the multi-scale Dice loss.
//!
//! For a prediction `p` and one-hot target `y` with `K` channels,
//!
//! ```text
//! alpha_k = 1 / (K * (sum_i p_ik^2 + sum_i y_ik^2 + EPS))
//! L       = sum_k alpha_k * sum_i (p_ik - y_ik)^2
//! ```
//!
//! The gradient differentiates through `alpha_k` as well:
//! `dL/dp_ik = 2 alpha_k (p_ik - y_ik) - 2 K alpha_k^2 S_k p_ik`, where `S_k` is the
//! squared residual of class `k`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{arg_err, shape_err, Result};
use crate::kernels;
use crate::tensor::{Shape, Tensor};

/// Guard added to the `alpha` denominator so absent classes stay finite.
pub const DICE_EPS: f64 = 1e-7;

/// Per-class sums that determine the loss and its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct DiceStats {
    /// `sum_i p_ik^2 + sum_i y_ik^2` per class.
    pub energy: Vec<f64>,
    /// `sum_i (p_ik - y_ik)^2` per class.
    pub residual: Vec<f64>,
}

impl DiceStats {
    pub fn alpha(&self, k: usize) -> f64 {
        let classes = self.energy.len() as f64;
        1.0 / (classes * (self.energy[k] + DICE_EPS))
    }

    pub fn loss(&self) -> f64 {
        (0..self.energy.len())
            .map(|k| self.alpha(k) * self.residual[k])
            .sum()
    }
}

fn check_pair(pred: Shape, gt: Shape) -> Result<()> {
    if pred != gt {
        return Err(shape_err("dice_loss", format!("prediction {pred} vs ground truth {gt}")));
    }
    if pred.c == 0 {
        return Err(arg_err("dice_loss", "needs at least one class channel"));
    }
    Ok(())
}

pub fn dice_stats(pred: &[f64], gt: &[f64], shape: Shape) -> DiceStats {
    let plane = shape.plane();
    let mut energy = vec![0.0; shape.c];
    let mut residual = vec![0.0; shape.c];
    for n in 0..shape.n {
        for k in 0..shape.c {
            let start = shape.index(n, k, 0, 0);
            let p = &pred[start..start + plane];
            let y = &gt[start..start + plane];
            for (a, b) in p.iter().zip(y) {
                energy[k] += a * a + b * b;
                residual[k] += (a - b) * (a - b);
            }
        }
    }
    DiceStats { energy, residual }
}

/// Gradient of the Dice loss with respect to the prediction, scaled by `upstream`.
pub fn dice_grad(pred: &[f64], gt: &[f64], shape: Shape, stats: &DiceStats, upstream: f64) -> Vec<f64> {
    let plane = shape.plane();
    let classes = shape.c as f64;
    let mut grad = vec![0.0; pred.len()];
    for n in 0..shape.n {
        for k in 0..shape.c {
            let alpha = stats.alpha(k);
            let through_alpha = 2.0 * classes * alpha * alpha * stats.residual[k];
            let start = shape.index(n, k, 0, 0);
            for i in start..start + plane {
                grad[i] = upstream * (2.0 * alpha * (pred[i] - gt[i]) - through_alpha * pred[i]);
            }
        }
    }
    grad
}

/// Class weight `alpha(pred, gt, k)`.
pub fn alpha_weight(pred: &Tensor, gt: &Tensor, k: usize) -> Result<f64> {
    check_pair(pred.shape(), gt.shape())?;
    if k >= pred.shape().c {
        return Err(arg_err("alpha_weight", format!("class {k} out of range for {} channels", pred.shape().c)));
    }
    Ok(dice_stats(pred.data(), gt.data(), pred.shape()).alpha(k))
}

/// Loss value plus gradient with respect to the prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct DiceOutput {
    pub loss: f64,
    pub grad: Tensor,
}

pub fn dice_loss(pred: &Tensor, gt: &Tensor) -> Result<DiceOutput> {
    check_pair(pred.shape(), gt.shape())?;
    let stats = dice_stats(pred.data(), gt.data(), pred.shape());
    let grad = dice_grad(pred.data(), gt.data(), pred.shape(), &stats, 1.0);
    Ok(DiceOutput {
        loss: stats.loss(),
        grad: Tensor::from_vec(pred.shape(), grad),
    })
}

/// Pre-softmax fused prediction `sum_j w_j * pred_j`.
pub fn fuse_scales(preds: &[Tensor], weights: &[f64]) -> Result<Tensor> {
    let parts: Vec<(&[f64], Shape)> = preds.iter().map(|p| (p.data(), p.shape())).collect();
    let (data, shape) = kernels::fuse(&parts, weights)?;
    Ok(Tensor::from_vec(shape, data))
}

/// Weights of the multi-scale Dice loss and the fusion layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MsdlConfig {
    pub scales: usize,
    /// One fusion weight per scale.
    pub fusion_weights: Vec<f64>,
    /// Weight of the fused-prediction term.
    pub lambda_fused: f64,
    /// Weight of each per-scale term.
    pub lambdas: Vec<f64>,
    /// Channel-softmax the fused map before its Dice term.
    pub renormalize_fused: bool,
}

impl MsdlConfig {
    /// Fusion weights `1/M`, all loss weights 1, fused map renormalized.
    pub fn new(scales: usize) -> Result<Self> {
        if scales == 0 {
            return Err(arg_err("msdl", "needs at least one scale"));
        }
        Ok(MsdlConfig {
            scales,
            fusion_weights: vec![1.0 / scales as f64; scales],
            lambda_fused: 1.0,
            lambdas: vec![1.0; scales],
            renormalize_fused: true,
        })
    }

    fn validate(&self, n_preds: usize) -> Result<()> {
        if self.scales != n_preds || self.lambdas.len() != self.scales || self.fusion_weights.len() != self.scales {
            return Err(arg_err(
                "msdl",
                format!(
                    "config has M = {} ({} lambdas, {} fusion weights) but {} predictions were given",
                    self.scales,
                    self.lambdas.len(),
                    self.fusion_weights.len(),
                    n_preds
                ),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MsdlOutput {
    pub loss: f64,
    /// Unweighted Dice term of every scale, in scale order.
    pub scale_terms: Vec<f64>,
    /// Unweighted Dice term of the fused map.
    pub fused_term: f64,
    pub grad_preds: Vec<Tensor>,
    pub grad_fused: Tensor,
}

/// `lambda_fused * L(fused, gt) + sum_j lambda_j * L(pred_j, gt)` for an
/// already-fused map.
pub fn msdl(preds: &[Tensor], fused: &Tensor, gt: &Tensor, cfg: &MsdlConfig) -> Result<MsdlOutput> {
    cfg.validate(preds.len())?;
    let fused_out = dice_loss(fused, gt)?;
    let mut loss = cfg.lambda_fused * fused_out.loss;
    let mut scale_terms = Vec::with_capacity(preds.len());
    let mut grad_preds = Vec::with_capacity(preds.len());
    for (pred, lambda) in preds.iter().zip(&cfg.lambdas) {
        let out = dice_loss(pred, gt)?;
        loss += lambda * out.loss;
        scale_terms.push(out.loss);
        let g = out.grad.data().iter().map(|v| v * lambda).collect();
        grad_preds.push(Tensor::from_vec(pred.shape(), g));
    }
    let grad_fused = Tensor::from_vec(
        fused.shape(),
        fused_out.grad.data().iter().map(|v| v * cfg.lambda_fused).collect(),
    );
    Ok(MsdlOutput {
        loss,
        scale_terms,
        fused_term: fused_out.loss,
        grad_preds,
        grad_fused,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedMsdlOutput {
    pub loss: f64,
    pub scale_terms: Vec<f64>,
    pub fused_term: f64,
    /// Total gradient reaching each per-scale prediction (own term plus fusion path).
    pub grad_preds: Vec<Tensor>,
    pub grad_weights: Vec<f64>,
}

/// Fuses `preds` with `cfg.fusion_weights` (optionally renormalized) and
/// evaluates the multi-scale loss, back-propagating through the fusion.
pub fn msdl_with_fusion(preds: &[Tensor], gt: &Tensor, cfg: &MsdlConfig) -> Result<FusedMsdlOutput> {
    cfg.validate(preds.len())?;
    let raw = fuse_scales(preds, &cfg.fusion_weights)?;
    let fused = if cfg.renormalize_fused {
        Tensor::from_vec(raw.shape(), kernels::softmax_channels(raw.data(), raw.shape())?)
    } else {
        raw.clone()
    };
    let out = msdl(preds, &fused, gt, cfg)?;
    let g_raw = if cfg.renormalize_fused {
        kernels::softmax_channels_backward(fused.data(), out.grad_fused.data(), fused.shape())
    } else {
        out.grad_fused.data().to_vec()
    };
    let mut grad_preds = out.grad_preds;
    let mut grad_weights = Vec::with_capacity(preds.len());
    for ((pred, w), gp) in preds.iter().zip(&cfg.fusion_weights).zip(grad_preds.iter_mut()) {
        grad_weights.push(pred.data().iter().zip(&g_raw).map(|(p, g)| p * g).sum());
        for (a, g) in gp.data_mut().iter_mut().zip(&g_raw) {
            *a += w * g;
        }
    }
    Ok(FusedMsdlOutput {
        loss: out.loss,
        scale_terms: out.scale_terms,
        fused_term: out.fused_term,
        grad_preds,
        grad_weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(pairs: &[(f64, f64)]) -> Tensor {
        // Pixels laid out along the width axis, class channels along C.
        let s = Shape::new(1, 2, 1, pairs.len());
        let mut t = Tensor::zeros(s);
        for (i, (a, b)) in pairs.iter().enumerate() {
            t.set(0, 0, 0, i, *a);
            t.set(0, 1, 0, i, *b);
        }
        t
    }

    fn hand_pred() -> Tensor {
        map(&[(0.8, 0.2), (0.4, 0.6)])
    }

    fn hand_gt() -> Tensor {
        map(&[(1.0, 0.0), (0.0, 1.0)])
    }

    #[test]
    fn alpha_hand_values() {
        let gt = map(&[(1.0, 0.0), (1.0, 0.0), (0.0, 1.0)]);
        let a0 = alpha_weight(&gt, &gt, 0).unwrap();
        assert!((a0 - 1.0 / (2.0 * (4.0 + DICE_EPS))).abs() < 1e-15);

        let p = 6;
        let uniform = map(&[(0.5, 0.5); 6]);
        let all_k = map(&[(1.0, 0.0); 6]);
        let a = alpha_weight(&uniform, &all_k, 0).unwrap();
        assert!((a - 1.0 / (2.5 * p as f64 + 2.0 * DICE_EPS)).abs() < 1e-15);

        let absent = map(&[(1.0, 0.0); 3]);
        let a1 = alpha_weight(&absent, &absent, 1).unwrap();
        assert!(a1.is_finite());
        assert!((a1 - 1.0 / (2.0 * DICE_EPS)).abs() / a1 < 1e-12);
        assert!(alpha_weight(&absent, &absent, 2).is_err());
    }

    #[test]
    fn dice_hand_example() {
        let out = dice_loss(&hand_pred(), &hand_gt()).unwrap();
        let expect = 0.2 * 0.5 / (1.8 + DICE_EPS) + 0.2 * 0.5 / (1.4 + DICE_EPS);
        assert!((out.loss - expect).abs() < 1e-15);
        assert!((out.loss - 0.126_984_126_984).abs() < 1e-7);
    }

    #[test]
    fn dice_perfect_and_complement() {
        let gt = map(&[(1.0, 0.0), (0.0, 1.0), (0.0, 1.0), (1.0, 0.0)]);
        assert_eq!(dice_loss(&gt, &gt).unwrap().loss, 0.0);
        let comp = map(&[(0.0, 1.0), (1.0, 0.0), (1.0, 0.0), (0.0, 1.0)]);
        let l = dice_loss(&comp, &gt).unwrap().loss;
        assert!((l - 1.0).abs() < 1e-6);
    }

    #[test]
    fn dice_shape_mismatch() {
        let a = map(&[(1.0, 0.0)]);
        let b = map(&[(1.0, 0.0), (0.0, 1.0)]);
        assert!(dice_loss(&a, &b).is_err());
    }

    #[test]
    fn fuse_identities() {
        let a = hand_pred();
        let f = fuse_scales(core::slice::from_ref(&a), &[1.0]).unwrap();
        assert_eq!(f, a);
        let f = fuse_scales(&[a.clone(), a.clone()], &[0.5, 0.5]).unwrap();
        assert_eq!(f, a);
        let b = hand_gt();
        let f = fuse_scales(&[a.clone(), b.clone()], &[0.25, 0.75]).unwrap();
        for i in 0..a.len() {
            assert!((f.data()[i] - (0.25 * a.data()[i] + 0.75 * b.data()[i])).abs() < 1e-15);
        }
        assert!(fuse_scales(&[a, map(&[(1.0, 0.0)])], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn msdl_compositions() {
        let pred = hand_pred();
        let gt = hand_gt();
        let single = dice_loss(&pred, &gt).unwrap().loss;

        let cfg = MsdlConfig::new(1).unwrap();
        let fused = fuse_scales(core::slice::from_ref(&pred), &cfg.fusion_weights).unwrap();
        let out = msdl(core::slice::from_ref(&pred), &fused, &gt, &cfg).unwrap();
        assert_eq!(out.loss, 2.0 * single);

        let cfg2 = MsdlConfig::new(2).unwrap();
        let out = msdl(&[pred.clone(), pred.clone()], &pred, &gt, &cfg2).unwrap();
        assert!((out.loss - 0.380_952_380_952).abs() < 1e-6);
        assert!((out.loss - 3.0 * single).abs() < 1e-15);

        let out = msdl(&[gt.clone(), gt.clone()], &gt, &gt, &cfg2).unwrap();
        assert_eq!(out.loss, 0.0);

        assert!(msdl(std::slice::from_ref(&pred), &pred, &gt, &cfg2).is_err());
    }
}
