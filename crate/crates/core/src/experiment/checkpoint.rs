//! Binary checkpoint: a text manifest of named arrays, a `---` line, then the
//! arrays as little-endian `f64`.

use std::collections::BTreeMap;
use std::path::Path;

use crate::autodiff::{DenseArray, ParamStore};
use crate::baselines::{IsolationMask, Method, RunState};
use crate::engine::ModelSpec;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &str = "#usercl-checkpoint v1";

/// Header fields of a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointInfo {
    pub method: Method,
    pub completed: usize,
    pub fingerprint: String,
}

fn fnv_hex(text: &str) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}

/// Short digest of a configuration fingerprint.
pub fn config_digest(fingerprint: &str) -> String {
    fnv_hex(fingerprint)
}

struct Writer {
    manifest: String,
    blob: Vec<u8>,
    offset: usize,
}

impl Writer {
    fn array(&mut self, kind: &str, owner: usize, name: &str, shape: &[usize], data: impl Iterator<Item = f64>) {
        let start = self.offset;
        for v in data {
            self.blob.extend_from_slice(&v.to_le_bytes());
            self.offset += 1;
        }
        let shape: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
        self.manifest
            .push_str(&format!("{kind} {owner} {name} {} {start} {}\n", shape.join("x"), self.offset - start));
    }
}

pub fn encode_params(store: &ParamStore) -> Vec<u8> {
    let state = RunState { method: Method::Teracon, spec: dummy_spec(), models: vec![store.clone()], isolation: vec![], completed: 0 };
    encode_checkpoint(&state, "")
}

pub fn decode_params(bytes: &[u8]) -> Result<ParamStore> {
    let (_, mut models, _) = decode_arrays(bytes)?;
    models.remove(&0).ok_or_else(|| Error::InvalidArgument("no parameters stored".into()))
}

fn dummy_spec() -> ModelSpec {
    ModelSpec { backbone: Default::default(), classes: Vec::new(), mask: None }
}

pub fn encode_checkpoint(state: &RunState, fingerprint: &str) -> Vec<u8> {
    let mut w = Writer { manifest: String::new(), blob: Vec::new(), offset: 0 };
    for (k, model) in state.models.iter().enumerate() {
        for (name, arr) in model.iter() {
            w.array("param", k, name, arr.shape(), arr.data().iter().copied());
        }
    }
    for m in &state.isolation {
        for (name, bits) in &m.masks {
            w.array("claim", m.task, name, &[bits.len()], bits.iter().map(|&b| if b { 1.0 } else { 0.0 }));
        }
    }
    let mut out = format!(
        "{CHECKPOINT_MAGIC}\nmethod {}\ncompleted {}\nmodels {}\nconfig {}\n",
        state.method.name(),
        state.completed,
        state.models.len(),
        config_digest(fingerprint)
    )
    .into_bytes();
    out.extend_from_slice(w.manifest.as_bytes());
    out.extend_from_slice(b"---\n");
    out.extend_from_slice(&w.blob);
    out
}

type Arrays = (BTreeMap<String, String>, BTreeMap<usize, ParamStore>, Vec<IsolationMask>);

fn bad(reason: impl Into<String>) -> Error {
    Error::Parse { path: "checkpoint".into(), line: 0, reason: reason.into() }
}

fn decode_arrays(bytes: &[u8]) -> Result<Arrays> {
    let sep = bytes
        .windows(5)
        .position(|w| w == b"\n---\n")
        .ok_or_else(|| bad("missing `---` separator"))?;
    let head = std::str::from_utf8(&bytes[..sep]).map_err(|_| bad("manifest is not UTF-8"))?;
    let blob = &bytes[sep + 5..];
    if blob.len() % 8 != 0 {
        return Err(bad("data section is not a whole number of f64 values"));
    }
    let values: Vec<f64> = blob.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    let mut lines = head.lines();
    match lines.next() {
        Some(CHECKPOINT_MAGIC) => {}
        Some(other) if other.starts_with("#usercl-checkpoint") => {
            return Err(Error::Version { found: other.to_string(), expected: CHECKPOINT_MAGIC.to_string() })
        }
        _ => return Err(bad("not a checkpoint")),
    }
    let mut header = BTreeMap::new();
    let mut models: BTreeMap<usize, ParamStore> = BTreeMap::new();
    let mut claims: BTreeMap<usize, IsolationMask> = BTreeMap::new();
    for line in lines {
        let parts: Vec<&str> = line.split(' ').collect();
        match parts.as_slice() {
            [kind @ ("param" | "claim"), owner, name, shape, start, len] => {
                let parse = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad number in `{line}`")));
                let (owner, start, len) = (parse(owner)?, parse(start)?, parse(len)?);
                let shape: Vec<usize> = if shape.is_empty() {
                    Vec::new()
                } else {
                    shape.split('x').map(parse).collect::<Result<_>>()?
                };
                let data = values.get(start..start + len).ok_or_else(|| bad(format!("`{name}` runs past the data")))?;
                if *kind == "param" {
                    let arr = DenseArray::new(shape, data.to_vec())?;
                    models.entry(owner).or_default().insert(name.to_string(), arr);
                } else {
                    let mask = claims.entry(owner).or_insert_with(|| IsolationMask { task: owner, masks: BTreeMap::new() });
                    mask.masks.insert(name.to_string(), data.iter().map(|&v| v != 0.0).collect());
                }
            }
            [key, value] => {
                header.insert(key.to_string(), value.to_string());
            }
            _ => return Err(bad(format!("unreadable manifest line `{line}`"))),
        }
    }
    Ok((header, models, claims.into_values().collect()))
}

pub fn decode_checkpoint(bytes: &[u8], spec: ModelSpec) -> Result<(RunState, CheckpointInfo)> {
    let (header, mut models, isolation) = decode_arrays(bytes)?;
    let field = |k: &str| header.get(k).cloned().ok_or_else(|| bad(format!("missing `{k}`")));
    let method = Method::parse(&field("method")?)?;
    let completed: usize = field("completed")?.parse().map_err(|_| bad("bad `completed`"))?;
    let count: usize = field("models")?.parse().map_err(|_| bad("bad `models`"))?;
    let models: Vec<ParamStore> = (0..count).map(|k| models.remove(&k).unwrap_or_default()).collect();
    let info = CheckpointInfo { method, completed, fingerprint: field("config")? };
    Ok((RunState { method, spec, models, isolation, completed }, info))
}

pub fn save_checkpoint(path: &Path, state: &RunState, fingerprint: &str) -> Result<()> {
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, encode_checkpoint(state, fingerprint))?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, spec: ModelSpec) -> Result<(RunState, CheckpointInfo)> {
    let bytes = std::fs::read(path)?;
    decode_checkpoint(&bytes, spec).map_err(|e| match e {
        Error::Parse { line, reason, .. } => Error::Parse { path: path.to_path_buf(), line, reason },
        other => other,
    })
}
