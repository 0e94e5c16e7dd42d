//! On-disk checkpoints: a UTF-8 manifest plus one blob of concatenated
//! `TNSR v1` records.
//!
//! ```text
//! @format fsml-checkpoint-v1
//! @blob pretrained.tnsr
//! @<key> <value>            (free-form metadata, e.g. kind, arch)
//! block0.weight 64x32 0     (name, shape, byte offset of the record in the blob)
//! ```

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use super::{Architecture, ChannelRectifier, EmbeddingModel, NetworkError, ParamId, RectifiedModel};
use crate::tensor::{serial, Tensor};

pub const FORMAT: &str = "fsml-checkpoint-v1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

pub fn format_shape(shape: &[usize]) -> String {
    if shape.is_empty() {
        return "scalar".into();
    }
    shape
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("x")
}

pub fn parse_shape(text: &str) -> Option<Vec<usize>> {
    if text == "scalar" {
        return Some(Vec::new());
    }
    text.split('x').map(|d| d.parse().ok()).collect()
}

fn manifest_err(name: &str, detail: impl Into<String>) -> NetworkError {
    NetworkError::Checkpoint {
        name: name.to_string(),
        detail: detail.into(),
    }
}

impl Checkpoint {
    /// Writes `<stem>.manifest` and `<stem>.tnsr` into `dir`; returns the manifest path.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<PathBuf, NetworkError> {
        fs::create_dir_all(dir)?;
        let blob_name = format!("{stem}.tnsr");
        let manifest_path = dir.join(format!("{stem}.manifest"));
        let mut blob = BufWriter::new(File::create(dir.join(&blob_name))?);
        let mut manifest = String::new();
        manifest.push_str(&format!("@format {FORMAT}\n@blob {blob_name}\n"));
        for (k, v) in &self.meta {
            if k.contains(char::is_whitespace) || v.contains('\n') {
                return Err(manifest_err(k, "metadata keys must be single tokens"));
            }
            manifest.push_str(&format!("@{k} {v}\n"));
        }
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            manifest.push_str(&format!("{name} {} {offset}\n", format_shape(t.shape())));
            offset += serial::write_tensor(&mut blob, t)?;
        }
        blob.flush()?;
        fs::write(&manifest_path, manifest)?;
        Ok(manifest_path)
    }

    pub fn load(manifest_path: &Path) -> Result<Self, NetworkError> {
        let text = fs::read_to_string(manifest_path)?;
        let mut meta = BTreeMap::new();
        let mut entries = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            if let Some(rest) = line.strip_prefix('@') {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                meta.insert(k.to_string(), v.to_string());
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [name, shape, offset] = fields[..] else {
                return Err(manifest_err(line, "expected `name shape offset`"));
            };
            let shape = parse_shape(shape).ok_or_else(|| manifest_err(name, "bad shape"))?;
            let offset: u64 = offset.parse().map_err(|_| manifest_err(name, "bad offset"))?;
            entries.push((name.to_string(), shape, offset));
        }
        if meta.get("format").map(String::as_str) != Some(FORMAT) {
            return Err(manifest_err("@format", format!("expected {FORMAT}")));
        }
        let blob_name = meta
            .remove("blob")
            .ok_or_else(|| manifest_err("@blob", "missing blob reference"))?;
        meta.remove("format");
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let mut blob = BufReader::new(File::open(dir.join(blob_name))?);
        let mut tensors = Vec::with_capacity(entries.len());
        for (name, shape, offset) in entries {
            blob.seek(SeekFrom::Start(offset))?;
            let t = serial::read_tensor(&mut blob).map_err(|e| manifest_err(&name, e.to_string()))?;
            if t.shape() != shape.as_slice() {
                return Err(manifest_err(&name, "blob shape disagrees with manifest"));
            }
            tensors.push((name, t));
        }
        Ok(Self { meta, tensors })
    }

    pub fn from_model(net: &RectifiedModel<f32>) -> Self {
        let mut meta = BTreeMap::new();
        meta.insert(
            "arch".to_string(),
            serde_json::to_string(net.model.architecture()).expect("architecture serializes"),
        );
        let tensors = net
            .all_ids()
            .into_iter()
            .map(|id| (id.name(), net.param(id).expect("own id").clone()))
            .collect();
        Self { meta, tensors }
    }

    /// Rebuilds a model of architecture `arch`. The tensor list must match the
    /// architecture's parameters exactly, in order.
    pub fn into_model(self, arch: &Architecture) -> Result<RectifiedModel<f32>, NetworkError> {
        let model = EmbeddingModel::<f32>::zeroed(arch.clone())?;
        let has_rectifier = self.tensors.iter().any(|(n, _)| n.starts_with("rectifier"));
        let mut net = if has_rectifier {
            RectifiedModel::with_identity_rectifier(model)
        } else {
            RectifiedModel::plain(model)
        };
        let ids = net.all_ids();
        for (i, id) in ids.iter().enumerate() {
            let expected = id.name();
            let Some((name, t)) = self.tensors.get(i) else {
                return Err(manifest_err(&expected, "missing from checkpoint"));
            };
            if *name != expected {
                return Err(manifest_err(name, format!("expected `{expected}` at position {i}")));
            }
            let slot = net.param_mut(*id).expect("own id");
            if slot.shape() != t.shape() {
                return Err(manifest_err(
                    name,
                    format!(
                        "shape {} does not match architecture shape {}",
                        format_shape(t.shape()),
                        format_shape(slot.shape())
                    ),
                ));
            }
            *slot = t.clone();
        }
        if let Some((extra, _)) = self.tensors.get(ids.len()) {
            return Err(manifest_err(extra, "not part of the architecture"));
        }
        Ok(net)
    }

    /// Architecture recorded in the manifest metadata.
    pub fn architecture(&self) -> Result<Architecture, NetworkError> {
        let raw = self
            .meta
            .get("arch")
            .ok_or_else(|| manifest_err("@arch", "missing architecture"))?;
        serde_json::from_str(raw).map_err(|e| manifest_err("@arch", e.to_string()))
    }
}

impl ChannelRectifier<f32> {
    pub fn tensors(&self) -> Vec<(String, Tensor<f32>)> {
        self.pairs
            .iter()
            .enumerate()
            .flat_map(|(l, p)| {
                [
                    (ParamId::Gamma(l).name(), p.gamma.clone()),
                    (ParamId::Beta(l).name(), p.beta.clone()),
                ]
            })
            .collect()
    }
}
