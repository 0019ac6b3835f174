//! Checkpoint directory layout:
//!
//! ```text
//! manifest.json   dims, seed, tensor table, blob checksums
//! weights.bin     little-endian f32, tensors back to back
//! masks.bin       bit-packed keep masks (LSB first, row-major, 1 = keep),
//!                 each mask starting on a byte boundary
//! ```
//!
//! Serialization is deterministic: the same model always produces the same
//! bytes, so `save → load → save` is byte-identical.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{KeepMask, LinearLayer, ModelConfig, ProjKind, ToyModel};
use crate::tensor::Matrix;

const MANIFEST: &str = "manifest.json";
const WEIGHTS: &str = "weights.bin";
const MASKS: &str = "masks.bin";
const FORMAT: &str = "mmprune-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    config: ModelConfig,
    norms: Vec<NormEntry>,
    layers: Vec<LayerEntry>,
    blobs: Vec<BlobEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct NormEntry {
    block: usize,
    name: String,
    len: usize,
    blob: String,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerEntry {
    block: usize,
    kind: ProjKind,
    shape: [usize; 2],
    blob: String,
    offset: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mask: Option<MaskEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct MaskEntry {
    blob: String,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct BlobEntry {
    file: String,
    bytes: usize,
    sha256: String,
}

fn push_f32s(buf: &mut Vec<u8>, xs: &[f32]) -> usize {
    let offset = buf.len();
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    offset
}

fn push_bits(buf: &mut Vec<u8>, bits: &[bool]) -> usize {
    let offset = buf.len();
    for chunk in bits.chunks(8) {
        let mut byte = 0u8;
        for (i, &b) in chunk.iter().enumerate() {
            if b {
                byte |= 1 << i;
            }
        }
        buf.push(byte);
    }
    offset
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// SHA-256 over the little-endian bytes of every projection weight, in
/// block-major storage order. Norm scales and masks are not included.
pub fn weights_checksum(model: &ToyModel) -> String {
    let mut hasher = Sha256::new();
    for block in model.blocks() {
        for layer in block.layers() {
            for x in layer.weight().as_slice() {
                hasher.update(x.to_le_bytes());
            }
        }
    }
    hex::encode(hasher.finalize())
}

pub fn save_checkpoint(model: &ToyModel, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut weights = Vec::new();
    let mut masks = Vec::new();
    let mut norms = Vec::new();
    let mut layers = Vec::new();
    for (bi, block) in model.blocks().iter().enumerate() {
        for (name, scale) in [("attn_norm", &block.attn_norm), ("ffn_norm", &block.ffn_norm)] {
            norms.push(NormEntry {
                block: bi,
                name: name.to_string(),
                len: scale.len(),
                blob: WEIGHTS.into(),
                offset: push_f32s(&mut weights, scale),
            });
        }
        for layer in block.layers() {
            let (r, c) = layer.weight().shape();
            let offset = push_f32s(&mut weights, layer.weight().as_slice());
            let mask = layer.mask().map(|m| MaskEntry {
                blob: MASKS.into(),
                offset: push_bits(&mut masks, m.as_slice()),
            });
            layers.push(LayerEntry {
                block: bi,
                kind: layer.kind,
                shape: [r, c],
                blob: WEIGHTS.into(),
                offset,
                mask,
            });
        }
    }

    let mut blobs = vec![BlobEntry {
        file: WEIGHTS.into(),
        bytes: weights.len(),
        sha256: sha256_hex(&weights),
    }];
    let has_masks = layers.iter().any(|l| l.mask.is_some());
    if has_masks {
        blobs.push(BlobEntry {
            file: MASKS.into(),
            bytes: masks.len(),
            sha256: sha256_hex(&masks),
        });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        config: *model.config(),
        norms,
        layers,
        blobs,
    };

    let write = |name: &str, bytes: &[u8]| -> Result<()> {
        let p = dir.join(name);
        fs::write(&p, bytes).map_err(|e| Error::io(p, e))
    };
    write(WEIGHTS, &weights)?;
    if has_masks {
        write(MASKS, &masks)?;
    } else if dir.join(MASKS).exists() {
        let p = dir.join(MASKS);
        fs::remove_file(&p).map_err(|e| Error::io(p, e))?;
    }
    let mut json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    json.push('\n');
    write(MANIFEST, json.as_bytes())
}

struct Blobs<'a> {
    dir: &'a Path,
    loaded: Vec<(String, Vec<u8>)>,
}

impl<'a> Blobs<'a> {
    fn load(dir: &'a Path, entries: &[BlobEntry]) -> Result<Self> {
        let mut loaded = Vec::new();
        for e in entries {
            if e.file.contains('/') || e.file.contains('\\') || e.file == ".." {
                return Err(Error::format(dir.join(MANIFEST), format!("illegal blob name `{}`", e.file)));
            }
            let path = dir.join(&e.file);
            let bytes = fs::read(&path).map_err(|err| Error::format(&path, format!("unreadable blob: {err}")))?;
            if bytes.len() != e.bytes {
                return Err(Error::format(
                    &path,
                    format!("expected {} bytes, found {}", e.bytes, bytes.len()),
                ));
            }
            if sha256_hex(&bytes) != e.sha256 {
                return Err(Error::format(&path, "checksum mismatch"));
            }
            loaded.push((e.file.clone(), bytes));
        }
        Ok(Self { dir, loaded })
    }

    fn slice(&self, blob: &str, offset: usize, len: usize) -> Result<&[u8]> {
        let path = self.dir.join(blob);
        let bytes = self
            .loaded
            .iter()
            .find(|(n, _)| n == blob)
            .map(|(_, b)| b)
            .ok_or_else(|| Error::format(&path, "blob not declared in manifest"))?;
        offset
            .checked_add(len)
            .filter(|&end| end <= bytes.len())
            .map(|end| &bytes[offset..end])
            .ok_or_else(|| {
                Error::format(
                    &path,
                    format!("range {offset}+{len} exceeds blob size {}", bytes.len()),
                )
            })
    }

    fn f32s(&self, blob: &str, offset: usize, count: usize) -> Result<Vec<f32>> {
        let raw = self.slice(blob, offset, count * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn bits(&self, blob: &str, offset: usize, count: usize) -> Result<Vec<bool>> {
        let raw = self.slice(blob, offset, count.div_ceil(8))?;
        Ok((0..count).map(|i| raw[i / 8] >> (i % 8) & 1 == 1).collect())
    }
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<ToyModel> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST);
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::format(&manifest_path, format!("unreadable manifest: {e}")))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::format(&manifest_path, format!("corrupt manifest: {e}")))?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(Error::format(
            &manifest_path,
            format!("unsupported format {} v{}", manifest.format, manifest.version),
        ));
    }
    let cfg = manifest.config;
    cfg.validate()
        .map_err(|e| Error::format(&manifest_path, e.to_string()))?;
    let blobs = Blobs::load(dir, &manifest.blobs)?;

    let mut blocks = Vec::with_capacity(cfg.n_blocks);
    for bi in 0..cfg.n_blocks {
        let norm = |name: &str| -> Result<Vec<f32>> {
            let e = manifest
                .norms
                .iter()
                .find(|n| n.block == bi && n.name == name)
                .ok_or_else(|| Error::format(&manifest_path, format!("block {bi} lacks {name}")))?;
            if e.len != cfg.d_model {
                return Err(Error::format(&manifest_path, format!("block {bi} {name} has length {}", e.len)));
            }
            blobs.f32s(&e.blob, e.offset, e.len)
        };
        let attn_norm = norm("attn_norm")?;
        let ffn_norm = norm("ffn_norm")?;
        let mut layers = Vec::with_capacity(ProjKind::ALL.len());
        for kind in ProjKind::ALL {
            let e = manifest
                .layers
                .iter()
                .find(|l| l.block == bi && l.kind == kind)
                .ok_or_else(|| Error::format(&manifest_path, format!("block {bi} lacks {kind}")))?;
            let (r, c) = kind.shape(cfg.d_model, cfg.d_ff);
            if e.shape != [r, c] {
                return Err(Error::format(
                    &manifest_path,
                    format!("b{bi}.{kind}: shape {:?}, expected [{r}, {c}]", e.shape),
                ));
            }
            let weight = Matrix::from_vec(r, c, blobs.f32s(&e.blob, e.offset, r * c)?)?;
            let mask = match &e.mask {
                Some(m) => Some(KeepMask::from_vec(r, c, blobs.bits(&m.blob, m.offset, r * c)?)?),
                None => None,
            };
            layers.push(LinearLayer::from_parts(kind, bi, weight, mask));
        }
        blocks.push(ToyModel::block_from_layers(attn_norm, ffn_norm, layers));
    }
    ToyModel::from_parts(cfg, blocks).map_err(|e| Error::format(&manifest_path, e.to_string()))
}
