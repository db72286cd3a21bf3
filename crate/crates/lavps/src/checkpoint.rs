//! Binary checkpoint format for learned models.
//!
//! Layout:
//!
//! ```text
//! magic   4 bytes    "LVPS"
//! version u32 LE     1
//! hlen    u32 LE     header byte length
//! header  UTF-8      JSON: model kind, metadata, tensor names and shapes
//! data    f64 LE     row-major values per tensor, in header order
//! ```
//!
//! Tensors are named `layers.{i}.weight` (shape [out, in]) and
//! `layers.{i}.bias` (shape [out]).

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::amortizer::{ConditioningMode, InferenceModel};
use crate::denoiser::DenoiserModel;
use crate::error::{Error, Result};
use crate::nn::Mlp;

const MAGIC: &[u8; 4] = b"LVPS";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    model: String,
    meta: Meta,
    tensors: Vec<TensorInfo>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    dim: usize,
    #[serde(default)]
    t_max: usize,
    #[serde(default)]
    t_subset_max: usize,
    #[serde(default)]
    mode: Option<ConditioningMode>,
}

fn mlp_tensors(net: &Mlp) -> (Vec<TensorInfo>, Vec<f64>) {
    let mut infos = Vec::new();
    let mut data = Vec::new();
    for (i, l) in net.layers.iter().enumerate() {
        infos.push(TensorInfo {
            name: format!("layers.{i}.weight"),
            shape: vec![l.out_dim(), l.in_dim()],
        });
        // Row-major on disk; nalgebra stores column-major.
        for r in 0..l.out_dim() {
            for c in 0..l.in_dim() {
                data.push(l.w[(r, c)]);
            }
        }
        infos.push(TensorInfo {
            name: format!("layers.{i}.bias"),
            shape: vec![l.out_dim()],
        });
        data.extend_from_slice(l.b.as_slice());
    }
    (infos, data)
}

fn write_file(path: &Path, header: &Header, data: &[f64]) -> Result<()> {
    let header_json = serde_json::to_vec(header)
        .map_err(|e| Error::Checkpoint(format!("header serialization failed: {e}")))?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_all(&VERSION.to_le_bytes())?;
    f.write_all(&(header_json.len() as u32).to_le_bytes())?;
    f.write_all(&header_json)?;
    for v in data {
        f.write_all(&v.to_le_bytes())?;
    }
    f.flush()?;
    Ok(())
}

fn read_file(path: &Path) -> Result<(Header, Vec<f64>)> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic bytes in {}",
            path.display()
        )));
    }
    let mut word = [0u8; 4];
    f.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    f.read_exact(&mut word)?;
    let hlen = u32::from_le_bytes(word) as usize;
    let mut hbytes = vec![0u8; hlen];
    f.read_exact(&mut hbytes)?;
    let header: Header = serde_json::from_slice(&hbytes)
        .map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))?;
    let total: usize = header
        .tensors
        .iter()
        .map(|t| t.shape.iter().product::<usize>())
        .sum();
    let mut data = vec![0.0f64; total];
    let mut buf = [0u8; 8];
    for v in data.iter_mut() {
        f.read_exact(&mut buf)?;
        *v = f64::from_le_bytes(buf);
    }
    if f.read(&mut buf)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after tensor data".into()));
    }
    Ok((header, data))
}

fn mlp_from_tensors(tensors: &[TensorInfo], data: &[f64]) -> Result<Mlp> {
    if tensors.len() % 2 != 0 || tensors.is_empty() {
        return Err(Error::Checkpoint(
            "tensor list must be weight/bias pairs".into(),
        ));
    }
    let mut layers = Vec::new();
    let mut off = 0;
    for pair in tensors.chunks(2) {
        let w_info = &pair[0];
        let b_info = &pair[1];
        if w_info.shape.len() != 2
            || b_info.shape.len() != 1
            || w_info.shape[0] != b_info.shape[0]
        {
            return Err(Error::Checkpoint(format!(
                "inconsistent shapes for {} / {}",
                w_info.name, b_info.name
            )));
        }
        let (rows, cols) = (w_info.shape[0], w_info.shape[1]);
        let mut w = DMatrix::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                w[(r, c)] = data[off + r * cols + c];
            }
        }
        off += rows * cols;
        let b = DVector::from_column_slice(&data[off..off + rows]);
        off += rows;
        layers.push(crate::nn::Layer { w, b });
    }
    Ok(Mlp { layers })
}

/// Save a learned denoiser. The analytic kind has no parameters to persist
/// and is rejected.
pub fn save_denoiser(path: &Path, model: &DenoiserModel) -> Result<()> {
    let DenoiserModel::Learned { net, dim } = model else {
        return Err(Error::Checkpoint(
            "analytic denoisers are defined by the prior and have no checkpoint".into(),
        ));
    };
    let (tensors, data) = mlp_tensors(net);
    let header = Header {
        model: "denoiser".into(),
        meta: Meta {
            dim: *dim,
            t_max: 0,
            t_subset_max: 0,
            mode: None,
        },
        tensors,
    };
    write_file(path, &header, &data)
}

pub fn load_denoiser(path: &Path) -> Result<DenoiserModel> {
    let (header, data) = read_file(path)?;
    if header.model != "denoiser" {
        return Err(Error::Checkpoint(format!(
            "expected a denoiser checkpoint, found `{}`",
            header.model
        )));
    }
    let net = mlp_from_tensors(&header.tensors, &data)?;
    DenoiserModel::from_net(net, header.meta.dim)
}

pub fn save_amortizer(path: &Path, model: &InferenceModel) -> Result<()> {
    let (tensors, data) = mlp_tensors(&model.net);
    let header = Header {
        model: "amortizer".into(),
        meta: Meta {
            dim: model.dim(),
            t_max: model.t_max(),
            t_subset_max: model.t_subset_max(),
            mode: Some(model.mode()),
        },
        tensors,
    };
    write_file(path, &header, &data)
}

pub fn load_amortizer(path: &Path) -> Result<InferenceModel> {
    let (header, data) = read_file(path)?;
    if header.model != "amortizer" {
        return Err(Error::Checkpoint(format!(
            "expected an amortizer checkpoint, found `{}`",
            header.model
        )));
    }
    let net = mlp_from_tensors(&header.tensors, &data)?;
    InferenceModel::from_parts(
        net,
        header.meta.dim,
        header
            .meta
            .mode
            .unwrap_or(ConditioningMode::ObservationConcat),
        header.meta.t_max,
        header.meta.t_subset_max,
    )
}
