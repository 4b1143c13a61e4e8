//! Checkpoints, PGM images and CSV formatting.

use std::fs;
use std::io::{Cursor, Write as _};
use std::path::Path;

use image::codecs::pnm::{PnmDecoder, PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ColorType, ExtendedColorType, ImageDecoder, ImageEncoder};
use indexmap::IndexMap;
use thiserror::Error;

use crate::diff::{AdamState, Tensor};
use crate::encoders::{DualEncoder, ParamStore, TextConfig, TextEncoder, VisualConfig, VisualEncoder};
use crate::image::{Image, Mask};
use crate::prompts::PromptBank;

pub const MAGIC: &[u8] = b"APTCKPT1\n";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Fs {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("truncated checkpoint in entry {index} ({name})")]
    Truncated { index: usize, name: String },
    #[error("checkpoint entry {index}: {reason}")]
    Corrupt { index: usize, reason: String },
    #[error("checkpoint is missing `{0}`")]
    Missing(String),
    #[error("{0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] crate::Error),
}

fn fs_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Fs {
        path: path.display().to_string(),
        source,
    }
}

pub fn read_file(path: &Path) -> Result<Vec<u8>, IoError> {
    fs::read(path).map_err(fs_err(path))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(fs_err(dir))?;
    }
    let mut f = fs::File::create(path).map_err(fs_err(path))?;
    f.write_all(bytes).map_err(fs_err(path))
}

/// Named tensors in file order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: IndexMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, IoError> {
        self.entries.get(name).ok_or_else(|| IoError::Missing(name.into()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, IoError> {
        if !bytes.starts_with(MAGIC) {
            return Err(IoError::BadMagic);
        }
        let mut pos = MAGIC.len();
        let mut entries = IndexMap::new();
        let mut index = 0;
        while pos < bytes.len() {
            let mut name = String::from("<name>");
            let truncated = |name: &str| IoError::Truncated {
                index,
                name: name.to_string(),
            };
            let take = |pos: &mut usize, n: usize, name: &str| -> Result<&[u8], IoError> {
                let end = pos.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(|| truncated(name))?;
                let s = &bytes[*pos..end];
                *pos = end;
                Ok(s)
            };
            let u32_at = |pos: &mut usize, name: &str| -> Result<usize, IoError> {
                let b = take(pos, 4, name)?;
                Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
            };
            let len = u32_at(&mut pos, &name)?;
            let raw = take(&mut pos, len, &name)?;
            name = String::from_utf8(raw.to_vec()).map_err(|_| IoError::Corrupt {
                index,
                reason: "entry name is not UTF-8".into(),
            })?;
            let rank = u32_at(&mut pos, &name)?;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32_at(&mut pos, &name)?);
            }
            let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| {
                IoError::Corrupt {
                    index,
                    reason: format!("shape {shape:?} overflows"),
                }
            })?;
            let payload = take(&mut pos, count.saturating_mul(4), &name)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| IoError::Corrupt {
                index,
                reason: e.to_string(),
            })?;
            if entries.insert(name.clone(), t).is_some() {
                return Err(IoError::Corrupt {
                    index,
                    reason: format!("duplicate entry `{name}`"),
                });
            }
            index += 1;
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<(), IoError> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, IoError> {
        Self::from_bytes(&read_file(path)?)
    }
}

pub fn encoder_checkpoint(enc: &DualEncoder) -> Checkpoint {
    let mut c = Checkpoint::new();
    for (name, t) in enc.visual.params().iter().chain(enc.text.params().iter()) {
        c.insert(name, t.clone());
    }
    c.insert("tau", Tensor::new(vec![1], vec![enc.tau]).expect("scalar"));
    c
}

fn store_with_prefix(ckpt: &Checkpoint, prefix: &str) -> ParamStore {
    let mut s = ParamStore::new();
    for (name, t) in &ckpt.entries {
        if name.starts_with(prefix) {
            s.insert(name.clone(), t.clone());
        }
    }
    s
}

pub fn encoder_from_checkpoint(
    ckpt: &Checkpoint,
    visual: VisualConfig,
    text: TextConfig,
) -> Result<DualEncoder, IoError> {
    let tau = ckpt.get("tau")?.data()[0];
    Ok(DualEncoder {
        visual: VisualEncoder::from_params(visual, store_with_prefix(ckpt, "visual."))?,
        text: TextEncoder::from_params(text, store_with_prefix(ckpt, "text."))?,
        tau,
    })
}

pub fn add_prompts(ckpt: &mut Checkpoint, bank: &PromptBank) {
    ckpt.insert("prompts.lnp", bank.lnp.clone());
    ckpt.insert("prompts.lap", bank.lap.clone());
    ckpt.insert("prompts.mnp", bank.mnp.clone());
    ckpt.insert("prompts.map", bank.map.clone());
}

pub fn prompts_from_checkpoint(ckpt: &Checkpoint) -> Result<PromptBank, IoError> {
    Ok(PromptBank {
        lnp: ckpt.get("prompts.lnp")?.clone(),
        lap: ckpt.get("prompts.lap")?.clone(),
        mnp: ckpt.get("prompts.mnp")?.clone(),
        map: ckpt.get("prompts.map")?.clone(),
    })
}

pub fn add_adam(ckpt: &mut Checkpoint, adam: &AdamState) {
    let scalars = vec![adam.step_count as f32, adam.horizon as f32, adam.lr as f32];
    ckpt.insert("adam.state", Tensor::new(vec![3], scalars).expect("three scalars"));
    for (i, (m, v)) in adam.first_moment.iter().zip(&adam.second_moment).enumerate() {
        ckpt.insert(format!("adam.m.{i}"), m.clone());
        ckpt.insert(format!("adam.v.{i}"), v.clone());
    }
}

pub fn adam_from_checkpoint(ckpt: &Checkpoint) -> Result<AdamState, IoError> {
    let s = ckpt.get("adam.state")?.data();
    if s.len() != 3 {
        return Err(IoError::Format("adam.state must hold 3 values".into()));
    }
    let mut adam = AdamState::new(s[2] as f64, s[1] as usize);
    adam.step_count = s[0] as usize;
    let mut i = 0;
    while let (Some(m), Some(v)) = (ckpt.entries.get(&format!("adam.m.{i}")), ckpt.entries.get(&format!("adam.v.{i}"))) {
        adam.first_moment.push(m.clone());
        adam.second_moment.push(v.clone());
        i += 1;
    }
    Ok(adam)
}

/// Binary greyscale PGM (P5, maxval 255).
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>, IoError> {
    let mut out = Vec::new();
    PnmEncoder::new(&mut out)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(pixels, width as u32, height as u32, ExtendedColorType::L8)
        .map_err(|e| IoError::Format(format!("pgm: {e}")))?;
    Ok(out)
}

pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>), IoError> {
    let bad = |e: image::ImageError| IoError::Format(format!("pgm: {e}"));
    let dec = PnmDecoder::new(Cursor::new(bytes)).map_err(bad)?;
    if dec.subtype() != PnmSubtype::Graymap(SampleEncoding::Binary) || dec.color_type() != ColorType::L8 {
        return Err(IoError::Format("pgm: expected 8-bit P5".into()));
    }
    let (w, h) = dec.dimensions();
    let mut px = vec![0u8; dec.total_bytes() as usize];
    dec.read_image(&mut px).map_err(bad)?;
    Ok((w as usize, h as usize, px))
}

pub fn quantize(v: f32) -> u8 {
    (255.0 * v.clamp(0.0, 1.0)).round() as u8
}

pub fn image_to_pgm(img: &Image) -> Result<Vec<u8>, IoError> {
    let px: Vec<u8> = img.pixels.iter().map(|&v| quantize(v)).collect();
    encode_pgm(img.width, img.height, &px)
}

pub fn mask_to_pgm(mask: &Mask) -> Result<Vec<u8>, IoError> {
    let px: Vec<u8> = mask.bits.iter().map(|&b| if b != 0 { 255 } else { 0 }).collect();
    encode_pgm(mask.width, mask.height, &px)
}

pub fn pgm_to_image(bytes: &[u8]) -> Result<Image, IoError> {
    let (w, h, px) = decode_pgm(bytes)?;
    Ok(Image::new(h, w, px.iter().map(|&b| b as f32 / 255.0).collect()))
}

pub fn pgm_to_mask(bytes: &[u8]) -> Result<Mask, IoError> {
    let (w, h, px) = decode_pgm(bytes)?;
    Ok(Mask {
        height: h,
        width: w,
        bits: px.iter().map(|&b| (b >= 128) as u8).collect(),
    })
}

/// Plain decimal with nine significant digits.
pub fn fmt_real(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.8e}");
    let exp: i32 = sci.split('e').nth(1).and_then(|e| e.parse().ok()).unwrap_or(0);
    let prec = (8 - exp).max(0) as usize;
    format!("{x:.prec$}")
}

#[derive(Clone, Debug)]
pub enum Cell {
    Int(i64),
    Real(f64),
    Text(String),
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Real(v)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Int(i) => i.to_string(),
            Cell::Real(r) => fmt_real(*r),
            Cell::Text(t) => t.clone(),
        }
    }
}

/// Rows under a fixed header.
#[derive(Clone, Debug)]
pub struct Csv {
    columns: Vec<&'static str>,
    rows: Vec<Vec<String>>,
}

impl Csv {
    pub fn new(columns: &[&'static str]) -> Self {
        Self {
            columns: columns.to_vec(),
            rows: Vec::new(),
        }
    }

    pub fn columns(&self) -> &[&'static str] {
        &self.columns
    }

    pub fn push(&mut self, row: Vec<Cell>) -> Result<(), IoError> {
        if row.len() != self.columns.len() {
            return Err(IoError::Format(format!(
                "csv row has {} cells, header has {}",
                row.len(),
                self.columns.len()
            )));
        }
        self.rows.push(row.iter().map(Cell::render).collect());
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, IoError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| IoError::Format(format!("csv: {e}"));
        w.write_record(&self.columns).map_err(err)?;
        for r in &self.rows {
            w.write_record(r).map_err(err)?;
        }
        w.into_inner().map_err(|e| IoError::Format(format!("csv: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<(), IoError> {
        write_file(path, &self.to_bytes()?)
    }
}
