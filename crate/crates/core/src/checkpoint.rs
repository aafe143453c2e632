//! Single-file model checkpoints.
//!
//! Layout (version 1): a UTF-8 text manifest followed by raw data.
//!
//! ```text
//! MAMBACAPS-CHECKPOINT 1
//! [config]
//! seq_len=187
//! ...                                 one line per ModelConfig field
//! [vocabulary]
//! N,S,V,F,Q
//! [tensors]
//! encoder.up_w f64 1x32 0            name, dtype, shape, element offset
//! ...
//! [end]
//! <little-endian f64 buffers, concatenated in manifest order>
//! ```
//!
//! Offsets count `f64` elements from the first byte after the `[end]` line.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::config::ModelConfig;
use crate::data::LabelVocabulary;
use crate::error::{Error, Result};
use crate::model::MambaCapsule;

const MAGIC: &str = "MAMBACAPS-CHECKPOINT";
const VERSION: u32 = 1;

pub fn to_bytes(model: &MambaCapsule) -> Vec<u8> {
    let mut header = format!("{MAGIC} {VERSION}\n[config]\n");
    for (k, v) in model.config.to_pairs() {
        header.push_str(&format!("{k}={v}\n"));
    }
    header.push_str("[vocabulary]\n");
    header.push_str(&model.vocabulary.names().join(","));
    header.push_str("\n[tensors]\n");
    let mut offset = 0;
    for (name, t) in model.store.iter() {
        let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        header.push_str(&format!("{name} f64 {} {offset}\n", shape.join("x")));
        offset += t.len();
    }
    header.push_str("[end]\n");
    let mut bytes = header.into_bytes();
    bytes.reserve(offset * 8);
    for (_, t) in model.store.iter() {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    bytes
}

pub fn save(model: &MambaCapsule, path: impl AsRef<Path>) -> Result<()> {
    let mut f = fs::File::create(path.as_ref())?;
    f.write_all(&to_bytes(model))?;
    Ok(())
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn from_bytes(bytes: &[u8]) -> Result<MambaCapsule> {
    const END: &[u8] = b"[end]\n";
    let end = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| bad("missing [end] marker"))?;
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| bad("manifest is not UTF-8"))?;
    let payload = &bytes[end + END.len()..];
    let mut lines = header.lines();
    match lines.next().and_then(|l| l.split_once(' ')) {
        Some((MAGIC, v)) if v == VERSION.to_string() => {}
        Some((MAGIC, v)) => return Err(bad(format!("unsupported checkpoint version {v}"))),
        _ => return Err(bad("not a MambaCapsule checkpoint")),
    }

    let mut config = ModelConfig::default();
    let mut vocabulary = None;
    let mut tensors = Vec::new();
    let mut section = "";
    for line in lines {
        if line.starts_with('[') {
            section = line;
            continue;
        }
        match section {
            "[config]" => {
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| bad(format!("bad config line {line:?}")))?;
                config.set(k, v)?;
            }
            "[vocabulary]" => vocabulary = Some(LabelVocabulary::new(line.split(','))?),
            "[tensors]" => {
                let f: Vec<&str> = line.split(' ').collect();
                if f.len() != 4 || f[1] != "f64" {
                    return Err(bad(format!("bad tensor line {line:?}")));
                }
                let shape = f[2]
                    .split('x')
                    .map(|d| d.parse::<usize>().map_err(|_| bad(format!("bad shape in {line:?}"))))
                    .collect::<Result<Vec<_>>>()?;
                let offset: usize = f[3].parse().map_err(|_| bad(format!("bad offset in {line:?}")))?;
                tensors.push((f[0].to_string(), shape, offset));
            }
            _ => return Err(bad(format!("unexpected line {line:?}"))),
        }
    }
    let vocabulary = vocabulary.ok_or_else(|| bad("missing [vocabulary] section"))?;
    let mut model = MambaCapsule::new(config, vocabulary, 0)?;
    if tensors.len() != model.store.len() {
        return Err(bad(format!(
            "checkpoint holds {} tensors, model expects {}",
            tensors.len(),
            model.store.len()
        )));
    }
    for (name, shape, offset) in tensors {
        let id = model
            .store
            .find(&name)
            .ok_or_else(|| bad(format!("unexpected tensor {name}")))?;
        let target = model.store.get_mut(id);
        if target.shape() != shape.as_slice() {
            return Err(bad(format!(
                "tensor {name} has shape {shape:?}, model expects {:?}",
                target.shape()
            )));
        }
        let n = target.len();
        let raw = payload
            .get(offset * 8..(offset + n) * 8)
            .ok_or_else(|| bad(format!("tensor {name} runs past end of file")))?;
        for (dst, chunk) in target.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
    }
    Ok(model)
}

pub fn load(path: impl AsRef<Path>) -> Result<MambaCapsule> {
    from_bytes(&fs::read(path.as_ref())?)
}
