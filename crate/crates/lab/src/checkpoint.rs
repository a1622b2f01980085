//! Binary model checkpoints: "DLAB" magic, format version, a JSON
//! header, then named tensors as little-endian f32. Adapter checkpoints
//! carry only the A/B tensors plus the content hash of the base weights
//! they belong to.

use anyhow::{bail, Context, Result};
use dlab_core::model::{ModelConfig, ProjTarget, Transformer};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"DLAB";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize, PartialEq, Eq)]
struct ConfigSer {
    layers: usize,
    heads: usize,
    model_dim: usize,
    ffn_dim: usize,
    vocab_size: usize,
    max_seq_len: usize,
    seed: u64,
}

impl From<ModelConfig> for ConfigSer {
    fn from(c: ModelConfig) -> Self {
        ConfigSer {
            layers: c.layers,
            heads: c.heads,
            model_dim: c.model_dim,
            ffn_dim: c.ffn_dim,
            vocab_size: c.vocab_size,
            max_seq_len: c.max_seq_len,
            seed: c.seed,
        }
    }
}

impl From<ConfigSer> for ModelConfig {
    fn from(c: ConfigSer) -> Self {
        ModelConfig {
            layers: c.layers,
            heads: c.heads,
            model_dim: c.model_dim,
            ffn_dim: c.ffn_dim,
            vocab_size: c.vocab_size,
            max_seq_len: c.max_seq_len,
            seed: c.seed,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct HeaderSer {
    kind: String, // "full" | "adapter"
    config: ConfigSer,
    #[serde(skip_serializing_if = "Option::is_none")]
    base_hash: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    lora: Option<LoraSer>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LoraSer {
    rank: usize,
    lora_alpha: f64,
    targets: Vec<String>,
}

fn write_tensors(out: &mut Vec<u8>, tensors: &[(String, dlab_core::Tensor)]) {
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let name_bytes = name.as_bytes();
        out.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(name_bytes);
        let shape = t.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in &shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.to_vec() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
}

fn read_exact(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).context("truncated checkpoint")?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact(r, 4)?.try_into().unwrap()))
}

type NamedTensors = Vec<(String, Vec<usize>, Vec<f64>)>;

fn read_tensors(r: &mut impl Read) -> Result<NamedTensors> {
    let count = read_u32(r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(r)? as usize;
        let name = String::from_utf8(read_exact(r, name_len)?).context("non-UTF8 tensor name")?;
        let ndim = read_u32(r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u32(r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let bytes = read_exact(r, numel * 4)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        out.push((name, shape, data));
    }
    Ok(out)
}

fn write_checkpoint(path: &Path, header: &HeaderSer, tensors: &[(String, dlab_core::Tensor)]) -> Result<()> {
    let header_json = serde_json::to_vec(header)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    write_tensors(&mut out, tensors);
    let mut f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    f.write_all(&out)?;
    Ok(())
}

fn read_checkpoint(path: &Path) -> Result<(HeaderSer, NamedTensors)> {
    let mut f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let magic = read_exact(&mut f, 4)?;
    if magic != MAGIC {
        bail!("{} is not a model checkpoint (bad magic)", path.display());
    }
    let version = read_u32(&mut f)?;
    if version != VERSION {
        bail!("unsupported checkpoint version {version}");
    }
    let header_len = read_u32(&mut f)? as usize;
    let header: HeaderSer =
        serde_json::from_slice(&read_exact(&mut f, header_len)?).context("malformed header")?;
    let tensors = read_tensors(&mut f)?;
    Ok((header, tensors))
}

/// Save the full model (base weights only; adapters are saved separately).
pub fn save_model(path: &Path, model: &Transformer) -> Result<()> {
    let header = HeaderSer {
        kind: "full".into(),
        config: model.config.into(),
        base_hash: None,
        lora: None,
    };
    write_checkpoint(path, &header, &model.named_tensors())
}

pub fn load_model(path: &Path) -> Result<Transformer> {
    let (header, tensors) = read_checkpoint(path)?;
    if header.kind != "full" {
        bail!("{} is an adapter checkpoint; load it onto a base model", path.display());
    }
    let model = Transformer::new(header.config.into())
        .map_err(|e| anyhow::anyhow!("invalid checkpoint config: {e:?}"))?;
    apply_tensors(model.named_tensors(), &tensors)?;
    Ok(model)
}

/// Save only the adapter tensors, tagged with the base weights' hash.
pub fn save_adapters(path: &Path, model: &Transformer) -> Result<()> {
    let Some((rank, lora_alpha, targets)) = model.lora_spec() else {
        bail!("model has no adapters attached");
    };
    let header = HeaderSer {
        kind: "adapter".into(),
        config: model.config.into(),
        base_hash: Some(base_weight_hash(model)),
        lora: Some(LoraSer {
            rank,
            lora_alpha,
            targets: targets.iter().map(|t| t.as_str().to_string()).collect(),
        }),
    };
    write_checkpoint(path, &header, &model.named_lora_tensors())
}

/// Attach adapters described by the checkpoint and load their values.
/// Refuses to load onto a base whose weights differ from the recorded hash.
pub fn load_adapters_into(path: &Path, model: &mut Transformer) -> Result<()> {
    let (header, tensors) = read_checkpoint(path)?;
    if header.kind != "adapter" {
        bail!("{} is not an adapter checkpoint", path.display());
    }
    let recorded = header.base_hash.context("adapter checkpoint missing base hash")?;
    let actual = base_weight_hash(model);
    if recorded != actual {
        bail!("adapter checkpoint was trained on a different base (hash {recorded} != {actual})");
    }
    let lora = header.lora.context("adapter checkpoint missing adapter spec")?;
    let targets: Vec<ProjTarget> = lora
        .targets
        .iter()
        .map(|s| ProjTarget::parse(s).context("unknown projection target"))
        .collect::<Result<_>>()?;
    model
        .attach_lora(lora.rank, lora.lora_alpha, &targets, model.config.seed)
        .map_err(|e| anyhow::anyhow!("attaching adapters: {e:?}"))?;
    apply_tensors(model.named_lora_tensors(), &tensors)?;
    Ok(())
}

fn apply_tensors(
    dst: Vec<(String, dlab_core::Tensor)>,
    src: &[(String, Vec<usize>, Vec<f64>)],
) -> Result<()> {
    if dst.len() != src.len() {
        bail!("checkpoint has {} tensors, model expects {}", src.len(), dst.len());
    }
    for ((dname, t), (sname, shape, data)) in dst.iter().zip(src) {
        if dname != sname {
            bail!("tensor name mismatch: checkpoint {sname}, model {dname}");
        }
        if t.shape() != *shape {
            bail!("tensor {sname}: shape {:?} != model {:?}", shape, t.shape());
        }
        t.with_data_mut(|d| d.copy_from_slice(data));
    }
    Ok(())
}

/// SHA-256 over the base weights' exact f64 little-endian bytes.
pub fn base_weight_hash(model: &Transformer) -> String {
    let mut hasher = Sha256::new();
    for (name, t) in model.named_tensors() {
        hasher.update(name.as_bytes());
        for v in t.to_vec() {
            hasher.update(v.to_le_bytes());
        }
    }
    hex(&hasher.finalize())
}

/// SHA-256 of a file's bytes, hex-encoded.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use dlab_core::model::ModelConfig;

    fn tiny() -> Transformer {
        Transformer::new(ModelConfig {
            layers: 2,
            heads: 2,
            model_dim: 8,
            ffn_dim: 16,
            vocab_size: 64,
            max_seq_len: 32,
            seed: 5,
        })
        .unwrap()
    }

    #[test]
    fn model_roundtrip_preserves_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = tiny();
        save_model(&path, &m).unwrap();
        let loaded = load_model(&path).unwrap();
        for ((_, a), (_, b)) in m.named_tensors().iter().zip(loaded.named_tensors()) {
            for (x, y) in a.to_vec().iter().zip(b.to_vec()) {
                assert_eq!(*x as f32, y as f32);
            }
        }
        assert_eq!(m.config, loaded.config);
    }

    #[test]
    fn save_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
        save_model(&p1, &tiny()).unwrap();
        save_model(&p2, &tiny()).unwrap();
        assert_eq!(fs::read(p1).unwrap(), fs::read(p2).unwrap());
    }

    #[test]
    fn adapter_roundtrip_and_base_hash_guard() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let mut m = tiny();
        m.attach_lora(2, 4.0, &ProjTarget::ALL, 9).unwrap();
        for (_, t) in m.named_lora_tensors() {
            t.with_data_mut(|d| d.iter_mut().for_each(|v| *v += 0.125));
        }
        save_adapters(&path, &m).unwrap();

        let mut fresh = tiny();
        load_adapters_into(&path, &mut fresh).unwrap();
        for ((_, a), (_, b)) in m.named_lora_tensors().iter().zip(fresh.named_lora_tensors()) {
            for (x, y) in a.to_vec().iter().zip(b.to_vec()) {
                assert_eq!(*x as f32, y as f32);
            }
        }

        let mut other = Transformer::new(ModelConfig { seed: 6, ..m.config }).unwrap();
        let err = load_adapters_into(&path, &mut other).unwrap_err();
        assert!(err.to_string().contains("different base"));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk");
        fs::write(&path, b"NOPE....").unwrap();
        assert!(load_model(&path).is_err());
    }
}
