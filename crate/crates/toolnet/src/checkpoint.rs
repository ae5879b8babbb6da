//! Binary checkpoint format.
//!
//! Little-endian throughout:
//!
//! ```text
//! "TNCK" | u32 version
//! u32 len | architecture tag (UTF-8)
//! u32 in_channels, num_classes, scales, base_width, width_growth, width_cap,
//!     input_height, input_width
//! f64 width_multiplier, dropout | u8 renormalize_fused
//! f64 mean_r, mean_g, mean_b
//! u32 record count
//! per record: u32 len | name | u32 rank (4) | u32 dims[rank] | f32 data
//! ```
//!
//! Parameters are stored as `f32`; loading widens them back to `f64`, so a
//! save of a loaded checkpoint reproduces the file exactly.

use std::fs;
use std::path::Path;

use toolnet_core::arch::{ArchConfig, Architecture, Network};
use toolnet_core::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"TNCK";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: not a checkpoint (bad magic bytes)")]
    BadMagic { path: String },
    #[error("{path}: unsupported checkpoint version {version} (expected {VERSION})")]
    Version { path: String, version: u32 },
    #[error("{path}: truncated or corrupt checkpoint: {detail}")]
    Corrupt { path: String, detail: String },
    #[error("{path}: {detail}")]
    Mismatch { path: String, detail: String },
    #[error(transparent)]
    Core(#[from] toolnet_core::Error),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

/// Everything needed to rebuild a network and its input normalization.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub arch: Architecture,
    pub cfg: ArchConfig,
    pub means: [f64; 3],
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_network(net: &Network, means: [f64; 3]) -> Self {
        Checkpoint {
            arch: net.arch,
            cfg: net.cfg.clone(),
            means,
            params: net
                .graph
                .params()
                .iter()
                .map(|p| (p.name.clone(), Tensor::from_vec(p.value.shape(), p.value.data().to_vec())))
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        put_u32(&mut b, VERSION);
        put_str(&mut b, self.arch.tag());
        let c = &self.cfg;
        for v in [
            c.in_channels,
            c.num_classes,
            c.scales,
            c.base_width,
            c.width_growth,
            c.width_cap,
            c.input_height,
            c.input_width,
        ] {
            put_u32(&mut b, v as u32);
        }
        b.extend_from_slice(&c.width_multiplier.to_le_bytes());
        b.extend_from_slice(&c.dropout.to_le_bytes());
        b.push(u8::from(c.renormalize_fused));
        for m in self.means {
            b.extend_from_slice(&m.to_le_bytes());
        }
        put_u32(&mut b, self.params.len() as u32);
        for (name, t) in &self.params {
            put_str(&mut b, name);
            let dims = t.shape().dims();
            put_u32(&mut b, dims.len() as u32);
            for d in dims {
                put_u32(&mut b, d as u32);
            }
            for v in t.data() {
                b.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8], path: &str) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(CheckpointError::BadMagic { path: path.into() });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version {
                path: path.into(),
                version,
            });
        }
        let tag = r.string()?;
        let arch: Architecture = tag.parse().map_err(|_| r.corrupt(format!("unknown architecture tag `{tag}`")))?;
        let mut u = [0usize; 8];
        for v in &mut u {
            *v = r.u32()? as usize;
        }
        let width_multiplier = r.f64()?;
        let dropout = r.f64()?;
        let renormalize_fused = match r.take(1)?[0] {
            0 => false,
            1 => true,
            other => return Err(r.corrupt(format!("bad flag byte {other}"))),
        };
        let cfg = ArchConfig {
            in_channels: u[0],
            num_classes: u[1],
            scales: u[2],
            base_width: u[3],
            width_growth: u[4],
            width_cap: u[5],
            input_height: u[6],
            input_width: u[7],
            width_multiplier,
            dropout,
            renormalize_fused,
        };
        let means = [r.f64()?, r.f64()?, r.f64()?];
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()?;
            if rank != 4 {
                return Err(r.corrupt(format!("tensor `{name}` has rank {rank}, expected 4")));
            }
            let mut d = [0usize; 4];
            for v in &mut d {
                *v = r.u32()? as usize;
            }
            let shape = Shape::new(d[0], d[1], d[2], d[3]);
            let raw = r.take(shape.numel() * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                .collect();
            params.push((name, Tensor::from_vec(shape, data)));
        }
        if r.pos != bytes.len() {
            return Err(r.corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            arch,
            cfg,
            means,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|source| CheckpointError::Io {
                path: dir.display().to_string(),
                source,
            })?;
        }
        // Write then rename so a crash never leaves a half-written file behind.
        let tmp = path.with_extension("tnck.tmp");
        let io = |source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        };
        fs::write(&tmp, self.to_bytes()).map_err(io)?;
        fs::rename(&tmp, path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Checkpoint::from_bytes(&bytes, &path.display().to_string())
    }

    /// Rebuilds the network and copies every stored tensor into the parameter
    /// of the same name. Names and shapes must match exactly.
    pub fn to_network(&self, path: &str) -> Result<Network> {
        let mut net = Network::build(self.arch, &self.cfg, 0)?;
        let mismatch = |detail: String| CheckpointError::Mismatch {
            path: path.into(),
            detail,
        };
        if net.graph.params().len() != self.params.len() {
            return Err(mismatch(format!(
                "{} stores {} tensors but the {} network has {}",
                path,
                self.params.len(),
                self.arch,
                net.graph.params().len()
            )));
        }
        for (name, t) in &self.params {
            let id = net
                .graph
                .param_id(name)
                .map_err(|_| mismatch(format!("unknown parameter `{name}` for {}", self.arch)))?;
            let p = net.graph.param_mut(id);
            if p.value.shape() != t.shape() {
                return Err(mismatch(format!("parameter `{name}` is {} but the network expects {}", t.shape(), p.value.shape())));
            }
            p.value.data_mut().copy_from_slice(t.data());
        }
        Ok(net)
    }
}

fn put_u32(b: &mut Vec<u8>, v: u32) {
    b.extend_from_slice(&v.to_le_bytes());
}

fn put_str(b: &mut Vec<u8>, s: &str) {
    put_u32(b, s.len() as u32);
    b.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, detail: String) -> CheckpointError {
        CheckpointError::Corrupt {
            path: self.path.into(),
            detail,
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.corrupt(format!("needed {n} bytes at offset {}", self.pos))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        let s = self.take(4)?;
        Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
    }

    fn f64(&mut self) -> Result<f64> {
        let s = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(s);
        Ok(f64::from_le_bytes(a))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let s = self.take(n)?;
        String::from_utf8(s.to_vec()).map_err(|_| self.corrupt("name is not UTF-8".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ArchConfig {
        ArchConfig {
            scales: 3,
            base_width: 4,
            width_growth: 2,
            width_cap: 16,
            input_height: 16,
            input_width: 16,
            ..ArchConfig::full_scale()
        }
    }

    #[test]
    fn bytes_round_trip() {
        for arch in Architecture::ALL {
            let net = Network::build(arch, &tiny(), 3).unwrap();
            let ck = Checkpoint::from_network(&net, [0.5, 0.25, 0.125]);
            let bytes = ck.to_bytes();
            let back = Checkpoint::from_bytes(&bytes, "mem").unwrap();
            assert_eq!(back.arch, arch);
            assert_eq!(back.cfg, tiny());
            assert_eq!(back.means, [0.5, 0.25, 0.125]);
            let rebuilt = back.to_network("mem").unwrap();
            let again = Checkpoint::from_network(&rebuilt, back.means).to_bytes();
            assert_eq!(bytes, again);
        }
    }

    #[test]
    fn rejects_damage() {
        let net = Network::build(Architecture::ToolNetMs, &tiny(), 3).unwrap();
        let bytes = Checkpoint::from_network(&net, [0.0; 3]).to_bytes();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1], "x"), Err(CheckpointError::Corrupt { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad, "x"), Err(CheckpointError::BadMagic { .. })));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(Checkpoint::from_bytes(&v2, "x"), Err(CheckpointError::Version { version: 2, .. })));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let net = Network::build(Architecture::ToolNetMs, &tiny(), 3).unwrap();
        let mut ck = Checkpoint::from_network(&net, [0.0; 3]);
        ck.params[0].1 = Tensor::zeros(Shape::new(1, 1, 1, 1));
        let err = ck.to_network("ck.tnck").unwrap_err().to_string();
        assert!(err.contains("ck.tnck") && err.contains(&ck.params[0].0), "{err}");
    }
}
