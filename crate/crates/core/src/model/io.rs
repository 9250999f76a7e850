//! Model files.
//!
//! ```text
//! cmpnet-model 1
//! <name> <d0,d1,...> <offset>      one line per tensor
//! <blank line>
//! <CMPT blob><CMPT blob>...        offsets count from the first blob byte
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec};
use crate::tensor::{Rng, Tensor};

const HEADER: &str = "cmpnet-model 1";

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut index = String::new();
    index.push_str(HEADER);
    index.push('\n');
    let mut blobs = Vec::new();
    for (name, tensor) in model.state.named_tensors() {
        let shape: Vec<String> = tensor.shape().iter().map(ToString::to_string).collect();
        index.push_str(&format!("{name} {} {}\n", shape.join(","), blobs.len()));
        blobs.extend_from_slice(&tensor.to_bytes());
    }
    index.push('\n');
    let mut bytes = index.into_bytes();
    bytes.extend_from_slice(&blobs);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Entry {
    shape: Vec<usize>,
    offset: usize,
}

fn parse_index(path: &Path, bytes: &[u8]) -> Result<(Vec<(String, Entry)>, usize)> {
    let bad = |reason: String| Error::format(path, reason);
    let split = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| bad("missing blank line after tensor index".into()))?;
    let text = std::str::from_utf8(&bytes[..split]).map_err(|_| bad("index is not UTF-8".into()))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(HEADER) => {}
        Some(other) => return Err(bad(format!("unsupported header {other:?}, expected {HEADER:?}"))),
        None => return Err(bad("empty file".into())),
    }
    let mut entries = Vec::new();
    for (n, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(' ').collect();
        let [name, shape, offset] = fields[..] else {
            return Err(bad(format!("index line {}: expected `name shape offset`", n + 2)));
        };
        let shape = shape
            .split(',')
            .map(str::parse)
            .collect::<std::result::Result<Vec<usize>, _>>()
            .map_err(|_| bad(format!("tensor {name}: bad shape {shape:?}")))?;
        let offset = offset
            .parse()
            .map_err(|_| bad(format!("tensor {name}: bad offset {offset:?}")))?;
        entries.push((name.to_string(), Entry { shape, offset }));
    }
    Ok((entries, split + 2))
}

/// Loads a model file saved from a network with the same `spec`.
pub fn load_model(path: impl AsRef<Path>, spec: &ModelSpec) -> Result<Model> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (entries, blob_start) = parse_index(path, &bytes)?;
    let blobs = &bytes[blob_start..];

    let mut model = Model::build(spec, &mut Rng::new(0))?;
    let mut by_name: HashMap<&str, &Entry> = HashMap::new();
    for (name, entry) in &entries {
        if by_name.insert(name, entry).is_some() {
            return Err(Error::format(path, format!("duplicate tensor {name}")));
        }
    }
    let mut expected = 0;
    for (name, slot) in model.state.named_tensors_mut() {
        expected += 1;
        let entry = by_name
            .get(name.as_str())
            .ok_or_else(|| Error::format(path, format!("tensor {name} missing from file")))?;
        if entry.shape != slot.shape() {
            return Err(Error::format(
                path,
                format!(
                    "tensor {name}: file has shape {:?}, model expects {:?}",
                    entry.shape,
                    slot.shape()
                ),
            ));
        }
        let blob = blobs
            .get(entry.offset..)
            .ok_or_else(|| Error::format(path, format!("tensor {name}: offset past end of file")))?;
        let (tensor, _) =
            Tensor::from_bytes(blob).map_err(|e| Error::format(path, format!("tensor {name}: {e}")))?;
        if tensor.shape() != slot.shape() {
            return Err(Error::format(path, format!("tensor {name}: blob shape disagrees with index")));
        }
        *slot = tensor;
    }
    if entries.len() != expected {
        let known: Vec<String> = model.state.named_tensors().into_iter().map(|(n, _)| n).collect();
        let extra = entries
            .iter()
            .find(|(n, _)| !known.contains(n))
            .map_or("?", |(n, _)| n.as_str());
        return Err(Error::format(path, format!("unexpected tensor {extra} in file")));
    }
    Ok(model)
}
