//! Dataset files: `<split>.manifest` plus `<split>.tnsr`.
//!
//! ```text
//! @format fsml-dataset-v1
//! @blob train.tnsr
//! @split train
//! @joint_dim 2
//! @generator {"kind":"gaussian",...}
//! 17 3 0 32            (id, class, byte offset, item shape)
//! 18 v:0.1,0.5 140 32  (pose labels are comma-separated coordinates)
//! ```

use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use super::{DatasetSplit, Label};
use crate::network::checkpoint::{format_shape, parse_shape};
use crate::tensor::{serial, Tensor};

pub const FORMAT: &str = "fsml-dataset-v1";

fn invalid(line: usize, msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, format!("manifest line {line}: {}", msg.into()))
}

fn format_label(label: &Label) -> String {
    match label {
        Label::Class(c) => c.to_string(),
        Label::Pose(v) => format!(
            "v:{}",
            v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
        ),
    }
}

fn parse_label(text: &str) -> Option<Label> {
    match text.strip_prefix("v:") {
        Some(v) => v.split(',').map(|x| x.parse().ok()).collect::<Option<_>>().map(Label::Pose),
        None => text.parse().ok().map(Label::Class),
    }
}

/// Writes the split into `dir`; `generator` is recorded in the header.
pub fn write_split(dir: &Path, split: &DatasetSplit, generator: &str) -> io::Result<PathBuf> {
    if generator.contains('\n') {
        return Err(io::Error::new(io::ErrorKind::InvalidInput, "generator spec must be one line"));
    }
    fs::create_dir_all(dir)?;
    let blob_name = format!("{}.tnsr", split.name);
    let mut blob = BufWriter::new(File::create(dir.join(&blob_name))?);
    let mut manifest = format!(
        "@format {FORMAT}\n@blob {blob_name}\n@split {}\n@joint_dim {}\n@generator {generator}\n",
        split.name, split.joint_dim
    );
    let shape = format_shape(&split.item_shape);
    let mut offset = 0;
    for i in 0..split.len() {
        let item = Tensor::new(split.item_shape.clone(), split.item(i).to_vec())
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e.to_string()))?;
        manifest.push_str(&format!(
            "{} {} {offset} {shape}\n",
            split.ids[i],
            format_label(&split.labels[i])
        ));
        offset += serial::write_tensor(&mut blob, &item)?;
    }
    blob.flush()?;
    let path = dir.join(format!("{}.manifest", split.name));
    fs::write(&path, manifest)?;
    Ok(path)
}

/// Reads a split and its recorded generator spec.
pub fn read_split(manifest_path: &Path) -> io::Result<(DatasetSplit, String)> {
    let text = fs::read_to_string(manifest_path)?;
    let mut header = std::collections::BTreeMap::new();
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        if let Some(rest) = line.strip_prefix('@') {
            let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
            header.insert(k.to_string(), v.to_string());
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [id, label, offset, shape] = fields[..] else {
            return Err(invalid(n + 1, "expected `id label offset shape`"));
        };
        let id: u64 = id.parse().map_err(|_| invalid(n + 1, "bad id"))?;
        let label = parse_label(label).ok_or_else(|| invalid(n + 1, "bad label"))?;
        let offset: u64 = offset.parse().map_err(|_| invalid(n + 1, "bad offset"))?;
        let shape = parse_shape(shape).ok_or_else(|| invalid(n + 1, "bad shape"))?;
        rows.push((id, label, offset, shape));
    }
    if header.get("format").map(String::as_str) != Some(FORMAT) {
        return Err(invalid(1, format!("expected @format {FORMAT}")));
    }
    let get = |k: &str| header.get(k).ok_or_else(|| invalid(0, format!("missing @{k}")));
    let blob_path = manifest_path.parent().unwrap_or(Path::new(".")).join(get("blob")?);
    let name = get("split")?.clone();
    let joint_dim: usize = get("joint_dim")?.parse().map_err(|_| invalid(0, "bad @joint_dim"))?;
    let generator = header.get("generator").cloned().unwrap_or_default();

    let mut blob = BufReader::new(File::open(blob_path)?);
    let item_shape = rows.first().map(|r| r.3.clone()).unwrap_or_default();
    let mut split = DatasetSplit {
        name,
        item_shape: item_shape.clone(),
        ids: Vec::with_capacity(rows.len()),
        labels: Vec::with_capacity(rows.len()),
        payload: Vec::new(),
        joint_dim,
    };
    for (row, (id, label, offset, shape)) in rows.into_iter().enumerate() {
        if shape != item_shape {
            return Err(invalid(row + 1, "items must share one shape"));
        }
        blob.seek(SeekFrom::Start(offset))?;
        let t = serial::read_tensor(&mut blob)?;
        if t.shape() != shape.as_slice() {
            return Err(invalid(row + 1, "blob record disagrees with manifest shape"));
        }
        split.ids.push(id);
        split.labels.push(label);
        split.payload.extend_from_slice(t.data());
    }
    Ok((split, generator))
}
