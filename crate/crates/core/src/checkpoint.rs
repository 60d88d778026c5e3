//! Search checkpoints: a little-endian `f32` blob plus a JSON index.
//!
//! The blob holds, in order: network parameters and batch-norm statistics,
//! architecture parameters, SGD momentum buffers, Adam first and second
//! moments.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_to_string, sha256_hex, write_atomic, write_json};
use crate::search::{SearchSetup, SearchState};

pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Section {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub step: u64,
    pub config_hash: String,
    pub seed: u64,
    pub adam_t: u64,
    pub blob: String,
    pub blob_sha256: String,
    pub sections: Vec<Section>,
}

fn sections(state: &SearchState) -> Vec<(String, Vec<f32>)> {
    let cat = |vs: &[Vec<f32>]| vs.concat();
    vec![
        ("weights".into(), state.model.store.to_flat()),
        ("alpha".into(), state.arch.matrices().flat_map(|m| m.values.iter().copied()).collect()),
        ("sgd_momentum".into(), cat(&state.w_opt.buffers)),
        ("adam_m".into(), cat(&state.a_opt.m)),
        ("adam_v".into(), cat(&state.a_opt.v)),
    ]
}

fn stem(step: u64) -> String {
    format!("step_{step:08}")
}

/// Writes `step_<n>.bin` and `step_<n>.json` into `dir`; returns the JSON path.
pub fn save_checkpoint(dir: &Path, state: &SearchState, config_hash: &str, seed: u64) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut bytes = Vec::new();
    let mut index = Vec::new();
    let mut offset = 0;
    for (name, vals) in sections(state) {
        index.push(Section {
            name,
            offset,
            len: vals.len(),
        });
        offset += vals.len();
        bytes.extend(vals.iter().flat_map(|v| v.to_le_bytes()));
    }
    let blob = format!("{}.bin", stem(state.step));
    write_atomic(&dir.join(&blob), &bytes)?;
    let meta = CheckpointMeta {
        format_version: CHECKPOINT_FORMAT,
        step: state.step,
        config_hash: config_hash.to_string(),
        seed,
        adam_t: state.a_opt.t,
        blob_sha256: sha256_hex(&bytes),
        blob,
        sections: index,
    };
    let path = dir.join(format!("{}.json", stem(state.step)));
    write_json(&path, &meta)?;
    Ok(path)
}

/// The checkpoint with the highest step in `dir`, if any.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    if !dir.exists() {
        return Ok(None);
    }
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        let Some(step) = name
            .strip_prefix("step_")
            .and_then(|s| s.strip_suffix(".json"))
            .and_then(|s| s.parse::<u64>().ok())
        else {
            continue;
        };
        if best.as_ref().is_none_or(|(b, _)| step > *b) {
            best = Some((step, path));
        }
    }
    Ok(best.map(|(_, p)| p))
}

fn corrupt(path: &Path, detail: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

/// Rebuilds the search state saved at `path` for `setup`. Fails when the
/// format version, configuration hash or blob checksum disagree.
pub fn load_checkpoint(path: &Path, setup: &SearchSetup, config_hash: &str) -> Result<SearchState> {
    let meta: CheckpointMeta =
        serde_json::from_str(&read_to_string(path)?).map_err(|e| corrupt(path, format!("unreadable index: {e}")))?;
    if meta.format_version != CHECKPOINT_FORMAT {
        return Err(corrupt(
            path,
            format!("format version {} is not the supported {CHECKPOINT_FORMAT}", meta.format_version),
        ));
    }
    if meta.config_hash != config_hash {
        return Err(corrupt(
            path,
            format!("written for configuration {} but resuming with {config_hash}", meta.config_hash),
        ));
    }
    let blob_path = path.with_file_name(&meta.blob);
    let bytes = std::fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    if sha256_hex(&bytes) != meta.blob_sha256 {
        return Err(corrupt(&blob_path, "checksum mismatch"));
    }
    if bytes.len() % 4 != 0 {
        return Err(corrupt(&blob_path, "length is not a multiple of 4"));
    }
    let flat: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();

    let mut state = SearchState::new(setup)?;
    let expected = sections(&state);
    if expected.len() != meta.sections.len() {
        return Err(corrupt(path, "unexpected section list"));
    }
    for ((name, vals), sec) in expected.iter().zip(&meta.sections) {
        if *name != sec.name || vals.len() != sec.len || sec.offset + sec.len > flat.len() {
            return Err(corrupt(
                path,
                format!("section {} ({} values) does not fit the network ({} values)", sec.name, sec.len, vals.len()),
            ));
        }
    }
    let part = |i: usize| &flat[meta.sections[i].offset..meta.sections[i].offset + meta.sections[i].len];
    state.model.store.load_flat(part(0))?;
    let mut alpha = part(1);
    for m in state.arch.matrices_mut() {
        let (head, rest) = alpha.split_at(m.values.len());
        m.values.copy_from_slice(head);
        alpha = rest;
    }
    let fill = |bufs: &mut Vec<Vec<f32>>, mut src: &[f32]| {
        for b in bufs.iter_mut() {
            let (head, rest) = src.split_at(b.len());
            b.copy_from_slice(head);
            src = rest;
        }
    };
    fill(&mut state.w_opt.buffers, part(2));
    fill(&mut state.a_opt.m, part(3));
    fill(&mut state.a_opt.v, part(4));
    state.a_opt.t = meta.adam_t;
    state.step = meta.step;
    Ok(state)
}
