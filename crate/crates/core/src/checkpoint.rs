//! Binary checkpoint container and the model/adapter/dataset file formats
//! built on it.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! magic  b"DMAD"            4 bytes
//! version u32               currently 1
//! meta_len u64              length of the meta JSON
//! meta JSON                 arbitrary metadata (configs, hashes, mode)
//! manifest_len u64          length of the manifest JSON
//! manifest JSON             [{name, shape, frozen, offset, len}]
//! data blob                 f64 little-endian values, densely packed
//! ```
//!
//! `offset`/`len` are in f64 elements relative to the blob start. Entry
//! order in the manifest is the write order and is preserved on load.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::lora::{LoraAdapter, LoraConfig};
use crate::model::{Detector, DetectorMode, Head};
use crate::vit::{AdapterSet, EncoderWeights, LayerAdapters, LayerWeights, ViTConfig};

const MAGIC: &[u8; 4] = b"DMAD";
const VERSION: u32 = 1;

/// One named array going into or out of a container.
#[derive(Debug, Clone)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub frozen: bool,
    pub data: Vec<f64>,
}

impl ArrayEntry {
    pub fn from_tensor(name: impl Into<String>, t: &Tensor, frozen: bool) -> Self {
        ArrayEntry {
            name: name.into(),
            shape: t.shape().to_vec(),
            frozen,
            data: t.data().to_vec(),
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(self.shape.clone(), self.data.clone())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    name: String,
    shape: Vec<usize>,
    frozen: bool,
    offset: u64,
    len: u64,
}

pub fn write_container(path: &Path, meta: &serde_json::Value, entries: &[ArrayEntry]) -> Result<()> {
    let mut manifest = Vec::with_capacity(entries.len());
    let mut offset = 0u64;
    for e in entries {
        let len = e.data.len() as u64;
        manifest.push(ManifestRow {
            name: e.name.clone(),
            shape: e.shape.clone(),
            frozen: e.frozen,
            offset,
            len,
        });
        offset += len;
    }
    let meta_bytes = serde_json::to_vec(meta).map_err(json_err)?;
    let manifest_bytes = serde_json::to_vec(&manifest).map_err(json_err)?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(meta_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&meta_bytes)?;
    w.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&manifest_bytes)?;
    for e in entries {
        for v in &e.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<(serde_json::Value, Vec<ArrayEntry>)> {
    let display = path.display().to_string();
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Parse {
            path: display,
            detail: format!("bad magic {magic:?}"),
        });
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Incompatible(format!(
            "{display}: container version {version}, supported {VERSION}"
        )));
    }
    let meta_len = read_u64(&mut r)? as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    r.read_exact(&mut meta_bytes)?;
    let meta: serde_json::Value = serde_json::from_slice(&meta_bytes).map_err(|e| Error::Parse {
        path: display.clone(),
        detail: format!("meta JSON: {e}"),
    })?;
    let manifest_len = read_u64(&mut r)? as usize;
    let mut manifest_bytes = vec![0u8; manifest_len];
    r.read_exact(&mut manifest_bytes)?;
    let manifest: Vec<ManifestRow> =
        serde_json::from_slice(&manifest_bytes).map_err(|e| Error::Parse {
            path: display.clone(),
            detail: format!("manifest JSON: {e}"),
        })?;

    let mut blob = Vec::new();
    r.read_to_end(&mut blob)?;
    let total: u64 = manifest.iter().map(|m| m.len).sum();
    if blob.len() != (total as usize) * 8 {
        return Err(Error::Parse {
            path: display,
            detail: format!("blob holds {} bytes, manifest expects {}", blob.len(), total * 8),
        });
    }
    let mut entries = Vec::with_capacity(manifest.len());
    for row in manifest {
        let start = (row.offset as usize) * 8;
        let end = start + (row.len as usize) * 8;
        let data: Vec<f64> = blob[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let numel: usize = row.shape.iter().product();
        if numel != data.len() {
            return Err(Error::Parse {
                path: path.display().to_string(),
                detail: format!("entry {} shape {:?} vs {} values", row.name, row.shape, data.len()),
            });
        }
        entries.push(ArrayEntry {
            name: row.name,
            shape: row.shape,
            frozen: row.frozen,
            data,
        });
    }
    Ok((meta, entries))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn json_err(e: serde_json::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

// ── model checkpoints ────────────────────────────────────────────────

/// Hash pinning the model architecture; evaluation refuses mismatched
/// checkpoints and datasets.
pub fn config_hash(vit: &ViTConfig, lora: &LoraConfig, mode: DetectorMode) -> String {
    #[derive(Serialize)]
    struct Key<'a> {
        vit: &'a ViTConfig,
        lora: &'a LoraConfig,
        mode: DetectorMode,
    }
    let bytes = serde_json::to_vec(&Key { vit, lora, mode }).expect("configs serialize");
    let mut h = Sha256::new();
    h.update(&bytes);
    hex(&h.finalize())
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelMeta {
    kind: String,
    vit: ViTConfig,
    lora: LoraConfig,
    mode: DetectorMode,
    flip_difference: bool,
    config_hash: String,
}

fn backbone_entries(w: &EncoderWeights, out: &mut Vec<ArrayEntry>) {
    let push = |out: &mut Vec<ArrayEntry>, name: String, t: &Tensor| {
        out.push(ArrayEntry::from_tensor(name, t, true))
    };
    push(out, "backbone.patch_w".into(), &w.patch_w);
    push(out, "backbone.patch_b".into(), &w.patch_b);
    push(out, "backbone.pos_emb".into(), &w.pos_emb);
    push(out, "backbone.cls_token".into(), &w.cls_token);
    for (i, l) in w.layers.iter().enumerate() {
        push(out, format!("backbone.layer{i}.q_w"), &l.q_w);
        push(out, format!("backbone.layer{i}.q_b"), &l.q_b);
        push(out, format!("backbone.layer{i}.k_w"), &l.k_w);
        push(out, format!("backbone.layer{i}.k_b"), &l.k_b);
        push(out, format!("backbone.layer{i}.v_w"), &l.v_w);
        push(out, format!("backbone.layer{i}.v_b"), &l.v_b);
        push(out, format!("backbone.layer{i}.o_w"), &l.o_w);
        push(out, format!("backbone.layer{i}.o_b"), &l.o_b);
        push(out, format!("backbone.layer{i}.fc1_w"), &l.fc1_w);
        push(out, format!("backbone.layer{i}.fc1_b"), &l.fc1_b);
        push(out, format!("backbone.layer{i}.fc2_w"), &l.fc2_w);
        push(out, format!("backbone.layer{i}.fc2_b"), &l.fc2_b);
        push(out, format!("backbone.layer{i}.ln1_gain"), &l.ln1_gain);
        push(out, format!("backbone.layer{i}.ln1_bias"), &l.ln1_bias);
        push(out, format!("backbone.layer{i}.ln2_gain"), &l.ln2_gain);
        push(out, format!("backbone.layer{i}.ln2_bias"), &l.ln2_bias);
    }
    push(out, "backbone.final_gain".into(), &w.final_gain);
    push(out, "backbone.final_bias".into(), &w.final_bias);
}

fn adapter_entries(prefix: &str, set: &AdapterSet, out: &mut Vec<ArrayEntry>) {
    for (i, l) in set.layers.iter().enumerate() {
        for (site, ad) in [("q", &l.q), ("v", &l.v)] {
            if let Some(ad) = ad {
                out.push(ArrayEntry::from_tensor(
                    format!("{prefix}.layer{i}.{site}.a"),
                    &ad.a,
                    false,
                ));
                out.push(ArrayEntry::from_tensor(
                    format!("{prefix}.layer{i}.{site}.b"),
                    &ad.b,
                    false,
                ));
            }
        }
    }
}

/// Writes the bundled model checkpoint: backbone + both adapter sets +
/// head + mode, with the config hash in the meta block.
pub fn save_model(path: &Path, model: &Detector) -> Result<()> {
    let meta = ModelMeta {
        kind: "model".into(),
        vit: model.backbone.config.clone(),
        lora: model.lora_config.clone(),
        mode: model.mode,
        flip_difference: model.flip_difference,
        config_hash: config_hash(&model.backbone.config, &model.lora_config, model.mode),
    };
    let mut entries = Vec::new();
    backbone_entries(&model.backbone, &mut entries);
    adapter_entries("branch_m", &model.branch_m, &mut entries);
    adapter_entries("branch_l", &model.branch_l, &mut entries);
    entries.push(ArrayEntry::from_tensor("head.w", &model.head.w, false));
    entries.push(ArrayEntry::from_tensor("head.b", &model.head.b, false));
    write_container(path, &serde_json::to_value(&meta).map_err(json_err)?, &entries)
}

struct EntryMap {
    entries: Vec<ArrayEntry>,
}

impl EntryMap {
    fn take(&mut self, name: &str) -> Result<Tensor> {
        let idx = self
            .entries
            .iter()
            .position(|e| e.name == name)
            .ok_or_else(|| Error::Incompatible(format!("checkpoint missing entry {name}")))?;
        self.entries.swap_remove(idx).to_tensor()
    }
}

pub fn load_model(path: &Path) -> Result<Detector> {
    let (meta_json, entries) = read_container(path)?;
    let meta: ModelMeta = serde_json::from_value(meta_json).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        detail: format!("model meta: {e}"),
    })?;
    if meta.kind != "model" {
        return Err(Error::Incompatible(format!(
            "expected a model checkpoint, found kind {:?}",
            meta.kind
        )));
    }
    let mut map = EntryMap { entries };
    let backbone = Arc::new(backbone_from_map(&mut map, meta.vit.clone())?);
    let branch_m = load_adapter_set(&mut map, "branch_m", &backbone, &meta.lora)?;
    let branch_l = load_adapter_set(&mut map, "branch_l", &backbone, &meta.lora)?;
    let head = Head {
        w: map.take("head.w")?.with_grad(),
        b: map.take("head.b")?.with_grad(),
    };
    Ok(Detector {
        backbone,
        branch_m,
        branch_l,
        head,
        mode: meta.mode,
        flip_difference: meta.flip_difference,
        lora_config: meta.lora,
    })
}

fn load_adapter_set(
    map: &mut EntryMap,
    prefix: &str,
    backbone: &EncoderWeights,
    lora: &LoraConfig,
) -> Result<AdapterSet> {
    let layers = backbone
        .layers
        .iter()
        .enumerate()
        .map(|(i, lw)| {
            let q = if lora.targets.q {
                Some(LoraAdapter::from_parts(
                    lw.q_w.clone(),
                    map.take(&format!("{prefix}.layer{i}.q.a"))?,
                    map.take(&format!("{prefix}.layer{i}.q.b"))?,
                    lora.clone(),
                )?)
            } else {
                None
            };
            let v = if lora.targets.v {
                Some(LoraAdapter::from_parts(
                    lw.v_w.clone(),
                    map.take(&format!("{prefix}.layer{i}.v.a"))?,
                    map.take(&format!("{prefix}.layer{i}.v.b"))?,
                    lora.clone(),
                )?)
            } else {
                None
            };
            Ok(LayerAdapters { q, v })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AdapterSet { layers })
}

/// Model hash stored in a checkpoint without loading the weights.
pub fn peek_config_hash(path: &Path) -> Result<String> {
    let (meta, _) = read_container(path)?;
    meta.get("config_hash")
        .and_then(|v| v.as_str())
        .map(String::from)
        .ok_or_else(|| Error::Incompatible("checkpoint has no config_hash".into()))
}

// ── standalone backbone checkpoints ──────────────────────────────────

/// Backbone-only checkpoint: the import hook for swapping in externally
/// trained encoder weights.
pub fn save_backbone(path: &Path, weights: &EncoderWeights) -> Result<()> {
    let meta = serde_json::json!({ "kind": "backbone", "vit": weights.config });
    let mut entries = Vec::new();
    backbone_entries(weights, &mut entries);
    write_container(path, &meta, &entries)
}

pub fn load_backbone(path: &Path) -> Result<EncoderWeights> {
    let (meta, entries) = read_container(path)?;
    if meta.get("kind").and_then(|v| v.as_str()) != Some("backbone") {
        return Err(Error::Incompatible("not a backbone checkpoint".into()));
    }
    let cfg: ViTConfig = serde_json::from_value(
        meta.get("vit")
            .cloned()
            .ok_or_else(|| Error::Incompatible("backbone checkpoint missing config".into()))?,
    )
    .map_err(|e| Error::Parse {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    let mut map = EntryMap { entries };
    backbone_from_map(&mut map, cfg)
}

fn backbone_from_map(map: &mut EntryMap, cfg: ViTConfig) -> Result<EncoderWeights> {
    cfg.validate()?;
    let layers = (0..cfg.num_layers)
        .map(|i| {
            Ok(LayerWeights {
                q_w: Arc::new(map.take(&format!("backbone.layer{i}.q_w"))?),
                q_b: map.take(&format!("backbone.layer{i}.q_b"))?,
                k_w: map.take(&format!("backbone.layer{i}.k_w"))?,
                k_b: map.take(&format!("backbone.layer{i}.k_b"))?,
                v_w: Arc::new(map.take(&format!("backbone.layer{i}.v_w"))?),
                v_b: map.take(&format!("backbone.layer{i}.v_b"))?,
                o_w: map.take(&format!("backbone.layer{i}.o_w"))?,
                o_b: map.take(&format!("backbone.layer{i}.o_b"))?,
                fc1_w: map.take(&format!("backbone.layer{i}.fc1_w"))?,
                fc1_b: map.take(&format!("backbone.layer{i}.fc1_b"))?,
                fc2_w: map.take(&format!("backbone.layer{i}.fc2_w"))?,
                fc2_b: map.take(&format!("backbone.layer{i}.fc2_b"))?,
                ln1_gain: map.take(&format!("backbone.layer{i}.ln1_gain"))?,
                ln1_bias: map.take(&format!("backbone.layer{i}.ln1_bias"))?,
                ln2_gain: map.take(&format!("backbone.layer{i}.ln2_gain"))?,
                ln2_bias: map.take(&format!("backbone.layer{i}.ln2_bias"))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EncoderWeights {
        patch_w: map.take("backbone.patch_w")?,
        patch_b: map.take("backbone.patch_b")?,
        pos_emb: map.take("backbone.pos_emb")?,
        cls_token: map.take("backbone.cls_token")?,
        layers,
        final_gain: map.take("backbone.final_gain")?,
        final_bias: map.take("backbone.final_bias")?,
        config: cfg,
    })
}

// ── standalone adapter checkpoints ───────────────────────────────────

/// Adapter-only checkpoint, loadable independently of the backbone.
pub fn save_adapters(path: &Path, set: &AdapterSet, lora: &LoraConfig) -> Result<()> {
    let meta = serde_json::json!({ "kind": "adapters", "lora": lora });
    let mut entries = Vec::new();
    adapter_entries("adapters", set, &mut entries);
    write_container(path, &meta, &entries)
}

/// Re-attaches saved adapter factors to a backbone's frozen bases.
pub fn load_adapters(path: &Path, backbone: &EncoderWeights) -> Result<(AdapterSet, LoraConfig)> {
    let (meta, entries) = read_container(path)?;
    if meta.get("kind").and_then(|v| v.as_str()) != Some("adapters") {
        return Err(Error::Incompatible("not an adapter checkpoint".into()));
    }
    let lora: LoraConfig = serde_json::from_value(
        meta.get("lora")
            .cloned()
            .ok_or_else(|| Error::Incompatible("adapter checkpoint missing lora config".into()))?,
    )
    .map_err(|e| Error::Parse {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    let mut map = EntryMap { entries };
    let set = load_adapter_set(&mut map, "adapters", backbone, &lora)?;
    Ok((set, lora))
}
