//! On-disk model dump: a directory holding `manifest.json` and one raw tensor
//! file per manifest entry.
//!
//! Tensor files are little-endian, row-major and headerless: `float32` for
//! every role except `labels`, which is `int32`. Shape, dtype and the CRC32C of
//! each file live in the manifest's `tensors` table. Per-layer roles
//! (`features`, `grad_feature_norms`, `jac_diff_norms`, `gn_jacobian_norms`)
//! use the layer id as the entry `name`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use kvmargin_core::ingest::{FORMAT_VERSION, GradientReference};
use kvmargin_core::{FeatureLayer, Matrix, ModelDump};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Labels,
    Scores,
    Features,
    GradFeatureNorms,
    JacDiffNorms,
    GnJacobianNorms,
}

impl Role {
    fn per_layer(self) -> bool {
        !matches!(self, Role::Labels | Role::Scores)
    }

    fn dtype(self) -> Dtype {
        if self == Role::Labels {
            Dtype::Int32
        } else {
            Dtype::Float32
        }
    }

    fn file_stem(self) -> &'static str {
        match self {
            Role::Labels => "labels",
            Role::Scores => "scores",
            Role::Features => "features",
            Role::GradFeatureNorms => "grad_feature_norms",
            Role::JacDiffNorms => "jac_diff_norms",
            Role::GnJacobianNorms => "gn_jacobian_norms",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dtype {
    Float32,
    Int32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub role: Role,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    pub file: String,
    pub crc32c: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub model_id: String,
    pub num_classes: usize,
    pub sample_count: usize,
    pub gradient_reference: String,
    #[serde(default)]
    pub hyperparams: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mixup_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gen_gap: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_spectral_norms: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dropped_samples: Option<u64>,
    pub tensors: Vec<TensorEntry>,
}

fn encode_f32(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|&x| (x as f32).to_le_bytes()).collect()
}

/// Writes `dump` into `dir` (created if needed). Values are stored as
/// `float32`, so loading returns them rounded to single precision.
pub fn write_dump(dump: &ModelDump, dir: &Path) -> Result<()> {
    dump.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let m = dump.sample_count();
    let mut tensors = Vec::new();
    let mut put = |role: Role, name: &str, index: Option<usize>, shape: Vec<usize>, bytes: Vec<u8>| -> Result<()> {
        let ext = match role.dtype() {
            Dtype::Float32 => "f32",
            Dtype::Int32 => "i32",
        };
        let file = match index {
            Some(i) => format!("{}-{i}.{ext}", role.file_stem()),
            None => format!("{}.{ext}", role.file_stem()),
        };
        let path = dir.join(&file);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        tensors.push(TensorEntry {
            name: name.to_string(),
            role,
            shape,
            dtype: role.dtype(),
            file,
            crc32c: crc32c::crc32c(&bytes),
        });
        Ok(())
    };

    let labels: Vec<u8> = dump
        .labels
        .iter()
        .flat_map(|&y| {
            i32::try_from(y).expect("validated label fits in i32").to_le_bytes()
        })
        .collect();
    put(Role::Labels, "labels", None, vec![m], labels)?;
    put(
        Role::Scores,
        "scores",
        None,
        vec![m, dump.num_classes],
        encode_f32(dump.scores.as_slice()),
    )?;
    for (i, layer) in dump.layers.iter().enumerate() {
        let id = layer.layer_id.as_str();
        put(Role::Features, id, Some(i), vec![m, layer.dim()], encode_f32(layer.features.as_slice()))?;
        for (role, map) in [
            (Role::GradFeatureNorms, &dump.grad_feature_norms),
            (Role::JacDiffNorms, &dump.jac_diff_norms),
            (Role::GnJacobianNorms, &dump.gn_jacobian_norms),
        ] {
            if let Some(v) = map.get(id) {
                put(role, id, Some(i), vec![m], encode_f32(v))?;
            }
        }
    }

    let manifest = Manifest {
        format_version: dump.format_version,
        model_id: dump.model_id.clone(),
        num_classes: dump.num_classes,
        sample_count: m,
        gradient_reference: dump.gradient_reference.as_str().to_string(),
        hyperparams: dump.hyperparams.clone(),
        mixup_accuracy: dump.mixup_accuracy,
        gen_gap: dump.gen_gap,
        weight_spectral_norms: dump.weight_spectral_norms.clone(),
        dropped_samples: dump.dropped_samples,
        tensors,
    };
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    let path = dir.join(MANIFEST);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::schema("manifest", e.to_string()))
}

/// Reads one tensor file, checking its length against the declared shape and
/// its CRC32C against the manifest.
fn read_tensor(dir: &Path, entry: &TensorEntry) -> Result<Vec<u8>> {
    if entry.file.contains(['/', '\\']) || entry.file == ".." {
        return Err(Error::schema(
            format!("tensors[{}].file", entry.name),
            "must be a plain file name inside the dump directory",
        ));
    }
    if entry.dtype != entry.role.dtype() {
        return Err(Error::schema(
            format!("tensors[{}].dtype", entry.name),
            format!("{:?} tensors must be {:?}", entry.role, entry.role.dtype()),
        ));
    }
    let path: PathBuf = dir.join(&entry.file);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let expected = entry.shape.iter().product::<usize>() * 4;
    if bytes.len() != expected {
        return Err(Error::corruption(
            &path,
            format!("{} bytes, shape {:?} needs {expected}", bytes.len(), entry.shape),
        ));
    }
    let crc = crc32c::crc32c(&bytes);
    if crc != entry.crc32c {
        return Err(Error::corruption(
            &path,
            format!("CRC32C {crc:#010x} does not match manifest {:#010x}", entry.crc32c),
        ));
    }
    Ok(bytes)
}

fn decode_f32(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect()
}

fn expect_shape(entry: &TensorEntry, shape: &[usize]) -> Result<()> {
    if entry.shape != shape {
        return Err(Error::schema(
            format!("{}[{}]", entry.role.file_stem(), entry.name),
            format!("shape {:?}, expected {shape:?}", entry.shape),
        ));
    }
    Ok(())
}

/// Loads and fully validates the dump in `dir`.
pub fn load_dump(dir: &Path) -> Result<ModelDump> {
    let manifest = read_manifest(dir)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::schema(
            "format_version",
            format!("expected {FORMAT_VERSION}, found {}", manifest.format_version),
        ));
    }
    let m = manifest.sample_count;
    let k = manifest.num_classes;
    let gradient_reference = GradientReference::parse(&manifest.gradient_reference)?;

    // Corruption checks run over every entry before any content is trusted.
    let mut payloads = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        payloads.push(read_tensor(dir, entry)?);
    }

    let mut labels = None;
    let mut scores = None;
    let mut layers: Vec<FeatureLayer> = Vec::new();
    let mut maps: BTreeMap<&'static str, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    for (entry, bytes) in manifest.tensors.iter().zip(payloads) {
        let duplicate = || Error::schema(format!("tensors[{}]", entry.name), format!("duplicate {:?} entry", entry.role));
        match entry.role {
            Role::Labels => {
                expect_shape(entry, &[m])?;
                let mut out = Vec::with_capacity(m);
                for c in bytes.chunks_exact(4) {
                    let y = i32::from_le_bytes([c[0], c[1], c[2], c[3]]);
                    if y < 0 || y as usize >= k {
                        return Err(Error::schema("labels", format!("label {y} outside [0, {k})")));
                    }
                    out.push(y as usize);
                }
                if labels.replace(out).is_some() {
                    return Err(duplicate());
                }
            }
            Role::Scores => {
                expect_shape(entry, &[m, k])?;
                let matrix = Matrix::new(m, k, decode_f32(&bytes))?;
                if scores.replace(matrix).is_some() {
                    return Err(duplicate());
                }
            }
            Role::Features => {
                if entry.shape.len() != 2 || entry.shape[0] != m || entry.shape[1] == 0 {
                    return Err(Error::schema(
                        format!("features[{}]", entry.name),
                        format!("shape {:?}, expected [{m}, d] with d >= 1", entry.shape),
                    ));
                }
                if layers.iter().any(|l| l.layer_id == entry.name) {
                    return Err(duplicate());
                }
                layers.push(FeatureLayer {
                    layer_id: entry.name.clone(),
                    features: Matrix::new(m, entry.shape[1], decode_f32(&bytes))?,
                });
            }
            role => {
                debug_assert!(role.per_layer());
                expect_shape(entry, &[m])?;
                let map = maps.entry(role.file_stem()).or_default();
                if map.insert(entry.name.clone(), decode_f32(&bytes)).is_some() {
                    return Err(duplicate());
                }
            }
        }
    }

    let mut take = |stem: &str| maps.remove(stem).unwrap_or_default();
    let dump = ModelDump {
        model_id: manifest.model_id,
        num_classes: k,
        labels: labels.ok_or_else(|| Error::schema("labels", "no labels tensor in manifest"))?,
        scores: scores.ok_or_else(|| Error::schema("scores", "no scores tensor in manifest"))?,
        layers,
        grad_feature_norms: take("grad_feature_norms"),
        jac_diff_norms: take("jac_diff_norms"),
        gn_jacobian_norms: take("gn_jacobian_norms"),
        gradient_reference,
        weight_spectral_norms: manifest.weight_spectral_norms,
        mixup_accuracy: manifest.mixup_accuracy,
        gen_gap: manifest.gen_gap,
        hyperparams: manifest.hyperparams,
        dropped_samples: manifest.dropped_samples,
        format_version: manifest.format_version,
    };
    dump.validate()?;
    Ok(dump)
}

/// Rounds every stored tensor to `float32`, matching what a write/load cycle
/// returns.
pub fn round_to_storage(dump: &ModelDump) -> ModelDump {
    let r = |x: f64| x as f32 as f64;
    let mut out = dump.clone();
    out.scores = dump.scores.map(r);
    for layer in &mut out.layers {
        layer.features = layer.features.map(r);
    }
    for map in [&mut out.grad_feature_norms, &mut out.jac_diff_norms, &mut out.gn_jacobian_norms] {
        for v in map.values_mut() {
            v.iter_mut().for_each(|x| *x = r(*x));
        }
    }
    out
}

/// Dump directories directly under `dir` (those holding a manifest), sorted
/// by name.
pub fn collection_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.join(MANIFEST).is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}
