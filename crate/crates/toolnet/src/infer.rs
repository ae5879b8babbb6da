//! Frozen-weight inference: image in, binary mask out.

use std::path::Path;

use toolnet_core::arch::Network;
use toolnet_core::graph::InferenceSession;
use toolnet_core::kernels::Exec;
use toolnet_core::metrics::{argmax_mask, Mask};
use toolnet_core::Tensor;

use crate::checkpoint::Checkpoint;
use crate::data::{normalize, RgbImage};
use crate::Result;

/// Arithmetic used for inference. Training always runs in `f64`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl std::str::FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(format!("unknown precision `{s}` (expected f32 or f64)")),
        }
    }
}

#[derive(Debug, Clone)]
enum Session {
    F32(InferenceSession<f32>),
    F64(InferenceSession<f64>),
}

/// Network plus normalization means, ready to segment frames.
#[derive(Debug, Clone)]
pub struct Predictor {
    pub net: Network,
    pub means: [f64; 3],
    session: Session,
}

impl Predictor {
    pub fn new(net: Network, means: [f64; 3], precision: Precision, exec: Exec) -> Self {
        let session = match precision {
            Precision::F32 => Session::F32(InferenceSession::new(&net.graph).with_exec(exec)),
            Precision::F64 => Session::F64(InferenceSession::new(&net.graph).with_exec(exec)),
        };
        Predictor { net, means, session }
    }

    pub fn from_checkpoint(path: &Path, precision: Precision, exec: Exec) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let net = ck.to_network(&path.display().to_string())?;
        Ok(Predictor::new(net, ck.means, precision, exec))
    }

    /// Foreground probability map of the final prediction, `1 x K x H x W`.
    pub fn probabilities(&self, image: &RgbImage) -> Result<Tensor> {
        let x = normalize(image, &self.means);
        self.net.check_image(x.shape())?;
        let out = self.net.final_pred;
        Ok(match &self.session {
            Session::F32(s) => s.run(&self.net.graph, &[(self.net.image, x.cast())], &[out])?.remove(0).cast(),
            Session::F64(s) => s.run(&self.net.graph, &[(self.net.image, x)], &[out])?.remove(0),
        })
    }

    /// Full per-frame pipeline: normalize, forward, argmax (ties go to background).
    pub fn predict_mask(&self, image: &RgbImage) -> Result<Mask> {
        let x = normalize(image, &self.means);
        self.net.check_image(x.shape())?;
        let out = self.net.final_pred;
        Ok(match &self.session {
            Session::F32(s) => argmax_mask(&s.run(&self.net.graph, &[(self.net.image, x.cast())], &[out])?[0])?,
            Session::F64(s) => argmax_mask(&s.run(&self.net.graph, &[(self.net.image, x)], &[out])?[0])?,
        })
    }
}
