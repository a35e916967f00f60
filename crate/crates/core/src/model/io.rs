//! Parameters on disk: one bank file per matrix or bias vector (rows of the
//! matrix become bank rows, a bias is a single row) plus a JSON manifest.
//! Values are stored as `f32`.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::atomic::write_atomic;
use crate::bank::{load_bank, save_bank, DescriptorBank};
use crate::error::{Error, Result};
use crate::model::{Affine, DiscriminatorParams, HeadParams, HeadShape, TrainConfig};

pub const HEAD_MANIFEST: &str = "head.json";
pub const DISCRIMINATOR_MANIFEST: &str = "discriminator.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadManifest {
    pub shape: HeadShape,
    /// Tensor name → file name, relative to the manifest.
    pub files: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
}

#[derive(Serialize, Deserialize)]
struct DiscriminatorManifest {
    context_dim: usize,
    files: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    train: Option<TrainConfig>,
}

fn matrix_bank(m: &Array2<f64>) -> Result<DescriptorBank> {
    let data = m.iter().map(|&v| v as f32).collect();
    DescriptorBank::new(m.ncols(), data, (0..m.nrows()).map(|i| format!("row{i}")).collect())
}

fn vector_bank(v: &Array1<f64>) -> Result<DescriptorBank> {
    DescriptorBank::new(v.len(), v.iter().map(|&x| x as f32).collect(), vec!["bias".into()])
}

fn read_matrix(path: &Path, rows: usize, cols: usize) -> Result<Array2<f64>> {
    let bank = load_bank(path)?;
    if bank.len() != rows || bank.dim() != cols {
        return Err(Error::ShapeMismatch(format!(
            "{}: expected {rows}x{cols}, found {}x{}",
            path.display(),
            bank.len(),
            bank.dim()
        )));
    }
    Ok(Array2::from_shape_vec((rows, cols), bank.data().iter().map(|&v| f64::from(v)).collect())
        .expect("length checked"))
}

fn read_vector(path: &Path, len: usize) -> Result<Array1<f64>> {
    Ok(read_matrix(path, 1, len)?.row(0).to_owned())
}

fn save_affine(layer: &Affine, dir: &Path, name: &str, files: &mut BTreeMap<String, String>) -> Result<()> {
    let w = format!("{name}_weight.nedb");
    let b = format!("{name}_bias.nedb");
    save_bank(&matrix_bank(&layer.weight)?, dir.join(&w))?;
    save_bank(&vector_bank(&layer.bias)?, dir.join(&b))?;
    files.insert(format!("{name}.weight"), w);
    files.insert(format!("{name}.bias"), b);
    Ok(())
}

fn load_affine(dir: &Path, files: &BTreeMap<String, String>, name: &str, out_dim: usize, in_dim: usize) -> Result<Affine> {
    let get = |key: String| {
        files
            .get(&key)
            .ok_or_else(|| Error::Format(format!("manifest lacks tensor {key}")))
    };
    Ok(Affine {
        weight: read_matrix(&dir.join(get(format!("{name}.weight"))?), out_dim, in_dim)?,
        bias: read_vector(&dir.join(get(format!("{name}.bias"))?), out_dim)?,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&raw).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn save_head(params: &HeadParams, dir: impl AsRef<Path>, train: Option<&TrainConfig>) -> Result<()> {
    let dir = dir.as_ref();
    let mut files = BTreeMap::new();
    if let Some(h) = &params.hidden {
        save_affine(h, dir, "hidden", &mut files)?;
    }
    save_affine(&params.output, dir, "output", &mut files)?;
    if let Some(c) = &params.context {
        save_affine(c, dir, "context", &mut files)?;
    }
    let manifest = HeadManifest {
        shape: params.shape(),
        files,
        train: train.copied(),
    };
    write_json(&dir.join(HEAD_MANIFEST), &manifest)
}

pub fn load_head(dir: impl AsRef<Path>) -> Result<(HeadParams, HeadManifest)> {
    let dir = dir.as_ref();
    let manifest: HeadManifest = read_json(&dir.join(HEAD_MANIFEST))?;
    let mut params = HeadParams::zeros(manifest.shape)?;
    let s = manifest.shape;
    if let Some(h) = params.hidden.as_mut() {
        *h = load_affine(dir, &manifest.files, "hidden", s.hidden_dim, s.context_dim)?;
    }
    let out_in = params.output.in_dim();
    params.output = load_affine(dir, &manifest.files, "output", s.descriptor_dim, out_in)?;
    if let Some(c) = params.context.as_mut() {
        *c = load_affine(dir, &manifest.files, "context", s.descriptor_dim * (1 + s.eta_prime), s.context_dim)?;
    }
    Ok((params, manifest))
}

pub fn save_discriminator(params: &DiscriminatorParams, dir: impl AsRef<Path>, train: Option<&TrainConfig>) -> Result<()> {
    let dir = dir.as_ref();
    let mut files = BTreeMap::new();
    save_affine(&params.layer, dir, "discriminator", &mut files)?;
    write_json(
        &dir.join(DISCRIMINATOR_MANIFEST),
        &DiscriminatorManifest {
            context_dim: params.context_dim(),
            files,
            train: train.copied(),
        },
    )
}

pub fn load_discriminator(dir: impl AsRef<Path>) -> Result<DiscriminatorParams> {
    let dir = dir.as_ref();
    let m: DiscriminatorManifest = read_json(&dir.join(DISCRIMINATOR_MANIFEST))?;
    Ok(DiscriminatorParams {
        layer: load_affine(dir, &m.files, "discriminator", 3, m.context_dim)?,
    })
}
