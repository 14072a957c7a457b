//! File formats: the VOL1 volume container, CSV tables, strict JSON run
//! configuration, and model checkpoints.
//!
//! VOL1 layout: magic "VOL1", dtype code u8 (1 = f32 LE, 2 = u8 labels,
//! 3 = f64 LE), ndim u8, then ndim extents as u64 LE and the row-major
//! payload, last index fastest.

use std::fs;
use std::io::{Read as _, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::{AugmentConfig, SimConfig, TrainConfig};
use crate::losses::LossKind;
use crate::segnet::{build_network, Model, NetworkConfig};
use crate::tensor::Tensor;

const VOL1_MAGIC: &[u8; 4] = b"VOL1";

/// Payload of a VOL1 file.
#[derive(Debug, Clone, PartialEq)]
pub enum Volume {
    F32(Tensor<f32>),
    Labels { shape: Vec<usize>, data: Vec<u8> },
    F64(Tensor<f64>),
}

impl Volume {
    pub fn shape(&self) -> &[usize] {
        match self {
            Volume::F32(t) => t.shape(),
            Volume::Labels { shape, .. } => shape,
            Volume::F64(t) => t.shape(),
        }
    }

    fn dtype_code(&self) -> u8 {
        match self {
            Volume::F32(_) => 1,
            Volume::Labels { .. } => 2,
            Volume::F64(_) => 3,
        }
    }

    pub fn as_f64(&self) -> Result<Tensor<f64>> {
        match self {
            Volume::F64(t) => Ok(t.clone()),
            Volume::F32(t) => Ok(t.cast()),
            Volume::Labels { .. } => Err(Error::Format(
                "expected a real-valued volume, found labels".into(),
            )),
        }
    }

    pub fn as_labels(&self) -> Result<(&[usize], &[u8])> {
        match self {
            Volume::Labels { shape, data } => Ok((shape, data)),
            _ => Err(Error::Format(
                "expected a label volume, found real values".into(),
            )),
        }
    }
}

fn encode_vol1(vol: &Volume) -> Vec<u8> {
    let shape = vol.shape();
    let mut out = Vec::new();
    out.extend_from_slice(VOL1_MAGIC);
    out.push(vol.dtype_code());
    out.push(shape.len() as u8);
    for &e in shape {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    match vol {
        Volume::F32(t) => {
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Volume::Labels { data, .. } => out.extend_from_slice(data),
        Volume::F64(t) => {
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

/// Write a volume in the VOL1 container.
pub fn write_vol1(path: &Path, vol: &Volume) -> Result<()> {
    fs::write(path, encode_vol1(vol))?;
    Ok(())
}

fn decode_vol1(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < 6 || &bytes[..4] != VOL1_MAGIC {
        return Err(Error::Format("not a VOL1 file".into()));
    }
    let dtype = bytes[4];
    let ndim = bytes[5] as usize;
    let header = 6 + 8 * ndim;
    if bytes.len() < header {
        return Err(Error::Format("payload length mismatch".into()));
    }
    let mut shape = Vec::with_capacity(ndim);
    for i in 0..ndim {
        let mut b = [0u8; 8];
        b.copy_from_slice(&bytes[6 + 8 * i..14 + 8 * i]);
        shape.push(u64::from_le_bytes(b) as usize);
    }
    let count: usize = shape.iter().product();
    let width = match dtype {
        1 => 4,
        2 => 1,
        3 => 8,
        other => {
            return Err(Error::Format(format!("unknown VOL1 dtype code {}", other)));
        }
    };
    let payload = &bytes[header..];
    if payload.len() != count * width {
        return Err(Error::Format("payload length mismatch".into()));
    }
    Ok(match dtype {
        1 => {
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Volume::F32(Tensor::from_vec(&shape, data)?)
        }
        2 => Volume::Labels {
            shape,
            data: payload.to_vec(),
        },
        _ => {
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Volume::F64(Tensor::from_vec(&shape, data)?)
        }
    })
}

/// Read a VOL1 file.
pub fn read_vol1(path: &Path) -> Result<Volume> {
    decode_vol1(&fs::read(path)?)
}

/// Format a real with 9 significant digits; plain decimal notation for
/// magnitudes in [1e-3, 1e6), scientific otherwise.
pub fn format_real(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{}", x);
    }
    let ax = x.abs();
    if (1e-3..1e6).contains(&ax) {
        let digits_before = ax.log10().floor() as i32 + 1;
        let decimals = (9 - digits_before).max(0) as usize;
        let s = format!("{:.*}", decimals, x);
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        let s = format!("{:.8e}", x);
        // normalize "1.00000000e-5" mantissa trailing zeros
        match s.split_once('e') {
            Some((m, e)) => {
                let m = m.trim_end_matches('0').trim_end_matches('.');
                format!("{}e{}", m, e)
            }
            None => s,
        }
    }
}

/// One CSV cell.
#[derive(Debug, Clone, PartialEq)]
pub enum Field {
    Int(i64),
    Real(f64),
    Text(String),
}

impl std::fmt::Display for Field {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Field::Int(v) => write!(f, "{}", v),
            Field::Real(v) => write!(f, "{}", format_real(*v)),
            Field::Text(v) => write!(f, "{}", v),
        }
    }
}

/// Render a CSV document: header line then rows, "\n" newlines.
pub fn csv_string(header: &[&str], rows: &[Vec<Field>]) -> Result<String> {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        if row.len() != header.len() {
            return Err(Error::Format(format!(
                "row arity {} does not match schema arity {}",
                row.len(),
                header.len()
            )));
        }
        let cells: Vec<String> = row.iter().map(|f| f.to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    Ok(out)
}

/// Write a CSV file.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<Field>]) -> Result<()> {
    let doc = csv_string(header, rows)?;
    fs::write(path, doc.as_bytes())?;
    Ok(())
}

/// Complete run description: every module's settings plus explicit seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub loss: LossKind,
    pub train: TrainConfig,
    #[serde(default)]
    pub sim: Option<SimConfig>,
    #[serde(default)]
    pub augment: Option<AugmentConfig>,
    /// Seed for parameter initialization.
    pub init_seed: u64,
    /// Seed for synthetic data generation.
    pub data_seed: u64,
}

impl RunConfig {
    pub fn from_json(json: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(json)?;
        cfg.network.validate()?;
        if let Some(s) = &cfg.sim {
            s.validate()?;
        }
        if let Some(a) = &cfg.augment {
            a.validate()?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

const CKPT_MAGIC: &[u8; 4] = b"GSK1";

/// Save a model checkpoint: magic, JSON header length (u64 LE), JSON
/// network config, then every parameter tensor as f64 LE in build order.
pub fn save_checkpoint(path: &Path, model: &Model<f64>) -> Result<()> {
    let header = serde_json::to_vec(model.config())?;
    let mut file = fs::File::create(path)?;
    file.write_all(CKPT_MAGIC)?;
    file.write_all(&(header.len() as u64).to_le_bytes())?;
    file.write_all(&header)?;
    for p in &model.params {
        for &v in p.tensor.data() {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Load a checkpoint, rebuilding the model structure from its stored
/// configuration and overwriting the parameters.
pub fn load_checkpoint(path: &Path) -> Result<Model<f64>> {
    let mut file = fs::File::open(path)?;
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)
        .map_err(|_| Error::Format("not a checkpoint file".into()))?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let mut len = [0u8; 8];
    file.read_exact(&mut len)
        .map_err(|_| Error::Format("truncated checkpoint header".into()))?;
    let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
    file.read_exact(&mut header)
        .map_err(|_| Error::Format("truncated checkpoint header".into()))?;
    let cfg: NetworkConfig = serde_json::from_slice(&header)?;
    let mut model = build_network::<f64>(&cfg, 0)?;
    let mut rest = Vec::new();
    file.read_to_end(&mut rest)?;
    let want: usize = model.params.iter().map(|p| p.tensor.len()).sum();
    if rest.len() != want * 8 {
        return Err(Error::Format(format!(
            "checkpoint payload holds {} bytes, expected {}",
            rest.len(),
            want * 8
        )));
    }
    let mut off = 0;
    for p in &mut model.params {
        for v in p.tensor.data_mut() {
            *v = f64::from_le_bytes(rest[off..off + 8].try_into().unwrap());
            off += 8;
        }
    }
    Ok(model)
}
