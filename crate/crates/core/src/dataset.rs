//! On-disk dataset format: a manifest CSV plus per-pair image files.
//!
//! Manifest: `pair_id,suspected_path,live_path,label,tool_tag,split`
//! (paths relative to the dataset directory). Images are stored either as
//! raw f64 arrays (`.bin`, lossless, the default) or 8-bit PNG-like PGM
//! (`.pgm`, portable but quantized). A `dataset.txt` key-value file pins
//! the generator config and its hash.
//!
//! `.bin` layout: magic `DMIM`, u32 version (1), u32 channels, u32 height,
//! u32 width, then f64 little-endian pixels, all little-endian.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::metrics::Label;
use crate::model::PairSample;
use crate::synth::{ProtocolSplit, SplitSpec, SynthConfig};

const IMG_MAGIC: &[u8; 4] = b"DMIM";
const IMG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageFormat {
    /// Raw f64, bit-exact roundtrip.
    Bin,
    /// 8-bit grayscale PGM; lossy quantization, widely viewable.
    Pgm,
}

impl ImageFormat {
    fn extension(&self) -> &'static str {
        match self {
            ImageFormat::Bin => "bin",
            ImageFormat::Pgm => "pgm",
        }
    }
}

pub fn write_image(path: &Path, image: &Tensor, format: ImageFormat) -> Result<()> {
    let shape = image.shape();
    if shape.len() != 3 {
        return Err(Error::Contract(format!("image must be [C,H,W], got {shape:?}")));
    }
    match format {
        ImageFormat::Bin => {
            let mut w = BufWriter::new(File::create(path)?);
            w.write_all(IMG_MAGIC)?;
            w.write_all(&IMG_VERSION.to_le_bytes())?;
            for d in shape {
                w.write_all(&(*d as u32).to_le_bytes())?;
            }
            for v in image.data() {
                w.write_all(&v.to_le_bytes())?;
            }
            w.flush()?;
        }
        ImageFormat::Pgm => {
            if shape[0] != 1 {
                return Err(Error::Contract(
                    "pgm export supports single-channel images".into(),
                ));
            }
            let mut w = BufWriter::new(File::create(path)?);
            write!(w, "P5\n{} {}\n255\n", shape[2], shape[1])?;
            let bytes: Vec<u8> = image
                .data()
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect();
            w.write_all(&bytes)?;
            w.flush()?;
        }
    }
    Ok(())
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    let display = path.display().to_string();
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    match ext {
        "bin" => {
            let mut r = BufReader::new(File::open(path)?);
            let mut magic = [0u8; 4];
            r.read_exact(&mut magic)?;
            if &magic != IMG_MAGIC {
                return Err(Error::Parse {
                    path: display,
                    detail: "bad image magic".into(),
                });
            }
            let mut b4 = [0u8; 4];
            r.read_exact(&mut b4)?;
            let version = u32::from_le_bytes(b4);
            if version != IMG_VERSION {
                return Err(Error::Incompatible(format!(
                    "{display}: image version {version}"
                )));
            }
            let mut dims = [0usize; 3];
            for d in dims.iter_mut() {
                r.read_exact(&mut b4)?;
                *d = u32::from_le_bytes(b4) as usize;
            }
            let numel = dims.iter().product::<usize>();
            let mut raw = vec![0u8; numel * 8];
            r.read_exact(&mut raw)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            Tensor::new(dims.to_vec(), data)
        }
        "pgm" => {
            let mut bytes = Vec::new();
            BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
            parse_pgm(&bytes).ok_or_else(|| Error::Parse {
                path: display,
                detail: "malformed pgm".into(),
            })
        }
        other => Err(Error::Parse {
            path: display,
            detail: format!("unknown image extension {other:?}"),
        }),
    }
}

fn parse_pgm(bytes: &[u8]) -> Option<Tensor> {
    let text_end = bytes.iter().enumerate().filter(|(_, b)| **b == b'\n').nth(2)?.0;
    let header = std::str::from_utf8(&bytes[..text_end]).ok()?;
    let mut lines = header.lines();
    if lines.next()? != "P5" {
        return None;
    }
    let mut dims = lines.next()?.split_whitespace();
    let w: usize = dims.next()?.parse().ok()?;
    let h: usize = dims.next()?.parse().ok()?;
    let maxval: f64 = lines.next()?.trim().parse().ok()?;
    let pixels = &bytes[text_end + 1..];
    if pixels.len() != w * h {
        return None;
    }
    let data = pixels.iter().map(|b| *b as f64 / maxval).collect();
    Tensor::new(vec![1, h, w], data).ok()
}

// ── dataset directories ──────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Train,
    Test,
}

impl SplitKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::Test => "test",
        }
    }
}

/// Hash of the generator config + split spec, stored in `dataset.txt` and
/// checked before evaluation.
pub fn data_hash(cfg: &SynthConfig, split: &SplitSpec) -> String {
    #[derive(Serialize)]
    struct Key<'a> {
        cfg: &'a SynthConfig,
        split: &'a SplitSpec,
    }
    let bytes = serde_json::to_vec(&Key { cfg, split }).expect("configs serialize");
    let mut h = Sha256::new();
    h.update(&bytes);
    crate::checkpoint::hex(&h.finalize())
}

/// Materializes a generated protocol split into `dir`.
pub fn write_dataset(
    dir: &Path,
    split_data: &ProtocolSplit,
    cfg: &SynthConfig,
    split: &SplitSpec,
    format: ImageFormat,
) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    let mut manifest = csv::Writer::from_path(dir.join("manifest.csv"))?;
    manifest
        .write_record(["pair_id", "suspected_path", "live_path", "label", "tool_tag", "split"])
        .map_err(csv_io)?;
    for (kind, samples) in [
        (SplitKind::Train, &split_data.train),
        (SplitKind::Test, &split_data.test),
    ] {
        for s in samples {
            let base = format!("{}_{}", kind.as_str(), s.pair_id);
            let s_rel = format!("images/{base}_s.{}", format.extension());
            let l_rel = format!("images/{base}_l.{}", format.extension());
            write_image(&dir.join(&s_rel), s.suspected(), format)?;
            write_image(&dir.join(&l_rel), s.live(), format)?;
            manifest
                .write_record([
                    s.pair_id.as_str(),
                    &s_rel,
                    &l_rel,
                    s.label.as_str(),
                    s.tool_tag.as_str(),
                    kind.as_str(),
                ])
                .map_err(csv_io)?;
        }
    }
    manifest.flush()?;

    let mut info = String::new();
    info.push_str(&format!("image_size={}\n", cfg.image_size));
    info.push_str("channels=1\n");
    info.push_str(&format!("num_identities={}\n", cfg.num_identities));
    info.push_str(&format!("seed={}\n", cfg.seed));
    info.push_str(&format!("data_hash={}\n", data_hash(cfg, split)));
    fs::write(dir.join("dataset.txt"), info)?;
    Ok(())
}

/// Loads one split of a materialized dataset.
pub fn load_dataset(dir: &Path, kind: SplitKind) -> Result<Vec<PairSample>> {
    let manifest_path = dir.join("manifest.csv");
    let display = manifest_path.display().to_string();
    let mut rdr = csv::Reader::from_path(&manifest_path).map_err(|e| Error::Parse {
        path: display.clone(),
        detail: e.to_string(),
    })?;
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| Error::Parse {
            path: display.clone(),
            detail: e.to_string(),
        })?;
        if &row[5] != kind.as_str() {
            continue;
        }
        let label = Label::parse(&row[3])?;
        let suspected = read_image(&dir.join(&row[1]))?;
        let live = read_image(&dir.join(&row[2]))?;
        out.push(PairSample::new(&row[0], suspected, live, label, &row[4]));
    }
    if out.is_empty() {
        return Err(Error::Protocol(format!(
            "dataset {} has no {} rows",
            dir.display(),
            kind.as_str()
        )));
    }
    Ok(out)
}

/// Reads `dataset.txt` into key-value pairs.
pub fn read_dataset_info(dir: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(dir.join("dataset.txt"))?;
    Ok(text
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect())
}

pub fn dataset_image_size(dir: &Path) -> Result<usize> {
    for (k, v) in read_dataset_info(dir)? {
        if k == "image_size" {
            return v.parse().map_err(|e| Error::Parse {
                path: dir.join("dataset.txt").display().to_string(),
                detail: format!("image_size: {e}"),
            });
        }
    }
    Err(Error::Incompatible("dataset.txt lacks image_size".into()))
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}
