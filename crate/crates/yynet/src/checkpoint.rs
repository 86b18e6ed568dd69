//! Checkpoint container: a text header (configs + training progress as
//! TOML), a tensor manifest (name, dtype, shape, byte offset), then raw
//! little-endian arrays. Contains everything needed to resume: parameters,
//! BN running stats, optimizer moments and the EMA shadow.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use yynet_core::model::YYNet;
use yynet_core::optim::{AdamW, Ema};
use yynet_core::Tensor;

use crate::config::FileConfig;
use crate::error::{AppError, AppResult};

const MAGIC: &str = "YYNET1";
const MANIFEST_MARK: &str = "TENSORS";
const DATA_MARK: &str = "DATA";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Progress {
    /// Fully completed epochs.
    pub completed_epochs: usize,
    /// Optimizer steps taken so far (also the schedule position).
    pub global_step: u64,
    /// Weight decay in force for the next epoch.
    pub current_wd: f64,
    pub ema_update_count: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    config: FileConfig,
    progress: Progress,
    ema_active: bool,
}

/// Everything the trainer owns between steps.
pub struct TrainState {
    pub config: FileConfig,
    pub model: YYNet<f32>,
    pub opt: AdamW<f32>,
    pub ema: Ema<f32>,
    pub progress: Progress,
}

impl TrainState {
    /// Fresh state from a config (parameters seeded from `train.seed`).
    pub fn new(config: FileConfig) -> AppResult<TrainState> {
        config.model.validate().map_err(AppError::from)?;
        config.train.validate().map_err(AppError::from)?;
        let model = YYNet::<f32>::build(&config.model, config.train.seed)?;
        let params: Vec<Tensor<f32>> = model.named_params().into_iter().map(|(_, t)| t).collect();
        let opt = AdamW::new(params, config.train.beta1, config.train.beta2, config.train.eps);
        let ema = Ema::new(config.train.ema_avg_coeff, config.train.ema_cur_coeff);
        Ok(TrainState {
            config,
            model,
            opt,
            ema,
            progress: Progress::default(),
        })
    }
}

fn named_state_tensors(state: &TrainState) -> Vec<(String, Vec<f32>)> {
    let mut out: Vec<(String, Vec<f32>)> = Vec::new();
    let named = state.model.named_params();
    for (name, t) in &named {
        out.push((format!("param.{name}"), t.to_vec()));
    }
    for (name, t) in state.model.named_buffers() {
        out.push((format!("buffer.{name}"), t.to_vec()));
    }
    for (i, (name, _)) in named.iter().enumerate() {
        out.push((format!("optim.m.{name}"), state.opt.m[i].clone()));
        out.push((format!("optim.v.{name}"), state.opt.v[i].clone()));
    }
    if let Some(shadow) = &state.ema.shadow {
        for ((name, _), s) in named.iter().zip(shadow) {
            out.push((format!("ema.{name}"), s.clone()));
        }
    }
    out
}

pub fn save(path: &Path, state: &TrainState) -> AppResult<()> {
    let header = Header {
        config: state.config.clone(),
        progress: Progress {
            ema_update_count: state.ema.update_count,
            ..state.progress.clone()
        },
        ema_active: state.ema.active(),
    };
    let header_toml = toml::to_string(&header)
        .map_err(|e| AppError::Config(format!("cannot serialize checkpoint header: {e}")))?;
    let tensors = named_state_tensors(state);
    let mut manifest = String::new();
    let mut offset = 0usize;
    for (name, data) in &tensors {
        manifest.push_str(&format!("{name} f32 {} {offset}\n", data.len()));
        offset += data.len() * 4;
    }
    let mut out = Vec::with_capacity(offset + header_toml.len() + manifest.len() + 64);
    writeln!(out, "{MAGIC}").unwrap();
    writeln!(out, "{}", header_toml.len()).unwrap();
    out.extend_from_slice(header_toml.as_bytes());
    writeln!(out, "{MANIFEST_MARK} {}", tensors.len()).unwrap();
    out.extend_from_slice(manifest.as_bytes());
    writeln!(out, "{DATA_MARK}").unwrap();
    for (_, data) in &tensors {
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &out)
        .map_err(|e| AppError::Io(format!("cannot write {}: {e}", tmp.display())))?;
    std::fs::rename(&tmp, path)
        .map_err(|e| AppError::Io(format!("cannot rename into {}: {e}", path.display())))
}

fn format_err(path: &Path, what: &str) -> AppError {
    AppError::Format(format!("{}: {what}", path.display()))
}

pub fn load(path: &Path) -> AppResult<TrainState> {
    let bytes = std::fs::read(path)
        .map_err(|e| AppError::Io(format!("cannot read {}: {e}", path.display())))?;
    let mut pos = 0usize;
    let read_line = |pos: &mut usize| -> AppResult<String> {
        let rest = &bytes[*pos..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| format_err(path, "unexpected end of file"))?;
        let line = String::from_utf8(rest[..nl].to_vec())
            .map_err(|_| format_err(path, "non-utf8 header"))?;
        *pos += nl + 1;
        Ok(line)
    };
    if read_line(&mut pos)? != MAGIC {
        return Err(format_err(path, "bad magic (not a checkpoint)"));
    }
    let header_len: usize = read_line(&mut pos)?
        .parse()
        .map_err(|_| format_err(path, "bad header length"))?;
    if pos + header_len > bytes.len() {
        return Err(format_err(path, "truncated header"));
    }
    let header_text = std::str::from_utf8(&bytes[pos..pos + header_len])
        .map_err(|_| format_err(path, "non-utf8 header"))?;
    let header: Header =
        toml::from_str(header_text).map_err(|e| format_err(path, &format!("bad header: {e}")))?;
    pos += header_len;

    let tensors_line = read_line(&mut pos)?;
    let count: usize = tensors_line
        .strip_prefix(MANIFEST_MARK)
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| format_err(path, "bad tensor manifest marker"))?;
    let mut manifest: Vec<(String, usize, usize)> = Vec::with_capacity(count);
    for _ in 0..count {
        let line = read_line(&mut pos)?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [name, dtype, len, offset] = parts.as_slice() else {
            return Err(format_err(path, &format!("bad manifest line: {line}")));
        };
        if *dtype != "f32" {
            return Err(format_err(path, &format!("unsupported dtype {dtype}")));
        }
        let len: usize = len.parse().map_err(|_| format_err(path, "bad manifest length"))?;
        let offset: usize = offset.parse().map_err(|_| format_err(path, "bad manifest offset"))?;
        manifest.push(((*name).to_string(), len, offset));
    }
    if read_line(&mut pos)? != DATA_MARK {
        return Err(format_err(path, "missing data marker"));
    }
    let blob = &bytes[pos..];

    let read_tensor = |len: usize, offset: usize| -> AppResult<Vec<f32>> {
        let end = offset + len * 4;
        if end > blob.len() {
            return Err(format_err(path, "tensor data out of bounds"));
        }
        Ok(blob[offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    };

    let mut state = TrainState::new(header.config)?;
    state.progress = header.progress.clone();
    state.opt.step_count = header.progress.global_step;
    state.ema.update_count = header.progress.ema_update_count;

    let named = state.model.named_params();
    let buffers = state.model.named_buffers();
    let lookup: std::collections::HashMap<String, (usize, usize)> = manifest
        .iter()
        .map(|(n, l, o)| (n.clone(), (*l, *o)))
        .collect();
    let fetch = |key: String| -> AppResult<Vec<f32>> {
        let (len, offset) = lookup
            .get(&key)
            .ok_or_else(|| format_err(path, &format!("missing tensor {key}")))?;
        read_tensor(*len, *offset)
    };
    for (name, t) in &named {
        let data = fetch(format!("param.{name}"))?;
        if data.len() != t.len() {
            return Err(format_err(path, &format!("size mismatch for {name}")));
        }
        t.set_data(&data);
    }
    for (name, t) in &buffers {
        t.set_data(&fetch(format!("buffer.{name}"))?);
    }
    for (i, (name, _)) in named.iter().enumerate() {
        state.opt.m[i] = fetch(format!("optim.m.{name}"))?;
        state.opt.v[i] = fetch(format!("optim.v.{name}"))?;
    }
    if header.ema_active {
        let mut shadow = Vec::with_capacity(named.len());
        for (name, _) in &named {
            shadow.push(fetch(format!("ema.{name}"))?);
        }
        state.ema.shadow = Some(shadow);
    }
    Ok(state)
}
