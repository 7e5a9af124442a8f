//! Network archives: a magic tag, a JSON header and little-endian `f32` data.
//!
//! ```text
//! b"MDFRNET1" | u64 header length | header JSON | tensor data in header order
//! ```

use std::fs;
use std::path::Path;

use mdfr_autograd::{Scalar, Tensor};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::critics::{Critic, CriticConfig, Embedder, EmbedderConfig};
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig};
use crate::nn::{NetRole, ParamSet};

const MAGIC: &[u8; 8] = b"MDFRNET1";

#[derive(Serialize, Deserialize)]
struct Header {
    role: NetRole,
    config: serde_json::Value,
    tensors: Vec<(String, Vec<usize>)>,
}

fn ckpt_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint { path: path.to_path_buf(), reason: reason.into() }
}

/// Serializes a network to bytes.
pub fn encode<T: Scalar, C: Serialize>(role: NetRole, config: &C, params: &ParamSet<T>) -> Result<Vec<u8>> {
    let header = Header {
        role,
        config: serde_json::to_value(config)?,
        tensors: params.names().iter().cloned().zip(params.tensors().iter().map(|t| t.shape().to_vec())).collect(),
    };
    let head = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + head.len() + 4 * params.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(head.len() as u64).to_le_bytes());
    out.extend_from_slice(&head);
    for t in params.tensors() {
        for v in t.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save<T: Scalar, C: Serialize>(
    path: impl AsRef<Path>,
    role: NetRole,
    config: &C,
    params: &ParamSet<T>,
) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, encode(role, config, params)?)?;
    Ok(())
}

/// Parsed archive contents before they are matched to an architecture.
pub struct Archive<C> {
    pub role: NetRole,
    pub config: C,
    pub params: ParamSet<f32>,
}

pub fn decode<C: DeserializeOwned>(path: &Path, bytes: &[u8]) -> Result<Archive<C>> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(ckpt_err(path, "not a network archive"));
    }
    let head_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let head_end = 16usize.checked_add(head_len).filter(|&e| e <= bytes.len()).ok_or_else(|| ckpt_err(path, "truncated header"))?;
    let header: Header =
        serde_json::from_slice(&bytes[16..head_end]).map_err(|e| ckpt_err(path, format!("bad header: {e}")))?;
    let config: C =
        serde_json::from_value(header.config).map_err(|e| ckpt_err(path, format!("bad config block: {e}")))?;
    let mut params = ParamSet::new();
    let mut at = head_end;
    for (name, shape) in header.tensors {
        let n: usize = shape.iter().product();
        let end = at.checked_add(4 * n).filter(|&e| e <= bytes.len()).ok_or_else(|| ckpt_err(path, "truncated data"))?;
        let data = bytes[at..end].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        params.push(name, Tensor::new(&shape, data));
        at = end;
    }
    if at != bytes.len() {
        return Err(ckpt_err(path, "trailing bytes after tensor data"));
    }
    Ok(Archive { role: header.role, config, params })
}

pub fn read<C: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Archive<C>> {
    let path = path.as_ref();
    decode(path, &fs::read(path)?)
}

fn check_role(path: &Path, found: NetRole, allowed: &[NetRole]) -> Result<()> {
    if !allowed.contains(&found) {
        return Err(ckpt_err(path, format!("archive holds a {} network", found.name())));
    }
    Ok(())
}

fn fill<T: Scalar>(path: &Path, target: &mut ParamSet<T>, stored: &ParamSet<f32>) -> Result<()> {
    if !target.congruent(stored) {
        return Err(ckpt_err(path, "tensor names or shapes do not match the architecture"));
    }
    target.assign(&stored.cast()).map_err(|e| ckpt_err(path, e.to_string()))
}

impl<T: Scalar> Generator<T> {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save(path, self.role(), self.config(), self.params())
    }

    /// Loads a generator; `role` of `None` accepts either generator role.
    pub fn load(path: impl AsRef<Path>, role: Option<NetRole>) -> Result<Self> {
        let path = path.as_ref();
        let a: Archive<GeneratorConfig> = read(path)?;
        check_role(path, a.role, role.as_ref().map_or(&[NetRole::Frn, NetRole::Ffn][..], std::slice::from_ref))?;
        let mut net = Generator::new(a.role, a.config, 0)?;
        fill(path, net.params_mut(), &a.params)?;
        Ok(net)
    }
}

impl<T: Scalar> Critic<T> {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save(path, self.role(), self.config(), self.params())
    }

    pub fn load(path: impl AsRef<Path>, role: NetRole) -> Result<Self> {
        let path = path.as_ref();
        let a: Archive<CriticConfig> = read(path)?;
        check_role(path, a.role, &[role])?;
        let mut net = Critic::new(a.role, a.config, 0)?;
        fill(path, net.params_mut(), &a.params)?;
        Ok(net)
    }
}

impl<T: Scalar> Embedder<T> {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save(path, NetRole::Embedder, self.config(), self.params())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let a: Archive<EmbedderConfig> = read(path)?;
        check_role(path, a.role, &[NetRole::Embedder])?;
        let mut net = Embedder::new(a.config, 0)?;
        fill(path, net.params_mut(), &a.params)?;
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_gen(role: NetRole, seed: u64) -> Generator<f32> {
        Generator::new(role, GeneratorConfig::pyramid(32, &[4, 8, 8], &[8, 4, 4]), seed).unwrap()
    }

    #[test]
    fn generator_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let net = small_gen(NetRole::Ffn, 3);
        let path = dir.path().join("ffn.bin");
        net.save(&path).unwrap();
        let back = Generator::<f32>::load(&path, Some(NetRole::Ffn)).unwrap();
        assert_eq!(back.params().hash(), net.params().hash());
        assert_eq!(back.config(), net.config());
        assert!(Generator::<f32>::load(&path, Some(NetRole::Frn)).is_err());
        assert!(Embedder::<f32>::load(&path).is_err());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let net = small_gen(NetRole::Frn, 1);
        let mut bytes = encode(net.role(), net.config(), net.params()).unwrap();
        // rewrite the config block to a wider decoder so shapes disagree
        let text = String::from_utf8_lossy(&bytes).into_owned();
        let from = "\"decoder\":[8,4,4]";
        assert!(text.contains(from));
        let pos = bytes.windows(from.len()).position(|w| w == from.as_bytes()).unwrap();
        bytes.splice(pos..pos + from.len(), "\"decoder\":[8,4,5]".bytes());
        let path = dir.path().join("bad.bin");
        fs::write(&path, &bytes).unwrap();
        let err = Generator::<f32>::load(&path, None).unwrap_err();
        assert!(matches!(err, Error::Checkpoint { .. }), "{err}");
    }

    #[test]
    fn corrupt_archives_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        fs::write(&path, b"hello").unwrap();
        assert!(matches!(Generator::<f32>::load(&path, None), Err(Error::Checkpoint { .. })));
        let net = small_gen(NetRole::Frn, 1);
        let bytes = encode(net.role(), net.config(), net.params()).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(Generator::<f32>::load(&path, None), Err(Error::Checkpoint { .. })));
    }

    #[test]
    fn critic_and_embedder_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = Critic::<f32>::new(NetRole::Icd, CriticConfig::vgg11(32, 6, &[4, 4, 4, 4, 4]), 2).unwrap();
        c.save(dir.path().join("icd.bin")).unwrap();
        let back = Critic::<f32>::load(dir.path().join("icd.bin"), NetRole::Icd).unwrap();
        assert_eq!(back.params().hash(), c.params().hash());
        assert!(Critic::<f32>::load(dir.path().join("icd.bin"), NetRole::Pcd).is_err());
        let e = Embedder::<f32>::new(EmbedderConfig::new(32, 4), 2).unwrap();
        e.save(dir.path().join("emb.bin")).unwrap();
        assert_eq!(Embedder::<f32>::load(dir.path().join("emb.bin")).unwrap().params().hash(), e.params().hash());
    }
}
