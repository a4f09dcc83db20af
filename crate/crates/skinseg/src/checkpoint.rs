//! Checkpoint container: a plain-text index header followed by every tensor as
//! row-major little-endian `f32`, trainable parameters first, then buffers.
//!
//! ```text
//! skinseg-checkpoint 1
//! model {"input_size":64,...}
//! meta {"epoch":9,"phase":"finetune",...}
//! param encoder.level0.conv1.weight 16x3x3x3
//! buffer encoder.level0.conv1.bn.running_mean 16
//! data 123456 789
//! <binary>
//! ```

use std::fs;
use std::io::{BufRead, Read};
use std::path::Path;

use skinseg_core::network::{ModelConfig, ModelParams};
use skinseg_core::training::CheckpointMeta;

use crate::error::{Error, Result};

const MAGIC: &str = "skinseg-checkpoint 1";

fn shape_str(shape: &[usize]) -> String {
    shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

pub fn save_checkpoint(path: &Path, params: &ModelParams, meta: &CheckpointMeta) -> Result<()> {
    let mut out = String::new();
    out.push_str(MAGIC);
    out.push('\n');
    out.push_str(&format!("model {}\n", serde_json::to_string(params.config())?));
    out.push_str(&format!("meta {}\n", serde_json::to_string(meta)?));
    for s in params.param_specs() {
        out.push_str(&format!("param {} {}\n", s.name, shape_str(&s.shape)));
    }
    for s in params.buffer_specs() {
        out.push_str(&format!("buffer {} {}\n", s.name, shape_str(&s.shape)));
    }
    out.push_str(&format!("data {} {}\n", params.values.len(), params.buffers.len()));
    let mut bytes = out.into_bytes();
    bytes.reserve(4 * (params.values.len() + params.buffers.len()));
    for v in params.values.iter().chain(&params.buffers) {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn bad(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Input(format!("{}: {msg}", path.display()))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, CheckpointMeta)> {
    if !path.is_file() {
        return Err(Error::Input(format!("checkpoint {} does not exist", path.display())));
    }
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = std::io::BufReader::new(file);
    let mut line = String::new();
    let mut next_line = |reader: &mut std::io::BufReader<fs::File>| -> Result<String> {
        line.clear();
        let n = reader.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            return Err(bad(path, "truncated header"));
        }
        Ok(line.trim_end_matches('\n').to_string())
    };
    if next_line(&mut reader)? != MAGIC {
        return Err(bad(path, "not a skinseg checkpoint"));
    }
    let mut model: Option<ModelConfig> = None;
    let mut meta: Option<CheckpointMeta> = None;
    let mut params_index = Vec::new();
    let mut buffers_index = Vec::new();
    let counts = loop {
        let l = next_line(&mut reader)?;
        let (key, rest) = l.split_once(' ').ok_or_else(|| bad(path, format!("malformed header line '{l}'")))?;
        match key {
            "model" => model = Some(serde_json::from_str(rest)?),
            "meta" => meta = Some(serde_json::from_str(rest)?),
            "param" => params_index.push(rest.to_string()),
            "buffer" => buffers_index.push(rest.to_string()),
            "data" => {
                let mut it = rest.split(' ').map(str::parse::<usize>);
                match (it.next(), it.next()) {
                    (Some(Ok(a)), Some(Ok(b))) => break (a, b),
                    _ => return Err(bad(path, "malformed data line")),
                }
            }
            other => return Err(bad(path, format!("unknown header key '{other}'"))),
        }
    };
    let model = model.ok_or_else(|| bad(path, "missing model line"))?;
    let meta = meta.ok_or_else(|| bad(path, "missing meta line"))?;
    let mut raw = Vec::new();
    reader.read_to_end(&mut raw).map_err(|e| Error::io(path, e))?;
    if raw.len() != 4 * (counts.0 + counts.1) {
        return Err(bad(path, format!("expected {} data bytes, found {}", 4 * (counts.0 + counts.1), raw.len())));
    }
    let floats: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    let (values, buffers) = floats.split_at(counts.0);
    let params = ModelParams::from_parts(model, values.to_vec(), buffers.to_vec())?;
    let expect: Vec<String> = params.param_specs().iter().map(|s| format!("{} {}", s.name, shape_str(&s.shape))).collect();
    let expect_buf: Vec<String> = params.buffer_specs().iter().map(|s| format!("{} {}", s.name, shape_str(&s.shape))).collect();
    if expect != params_index || expect_buf != buffers_index {
        return Err(bad(path, "tensor index does not match the model configuration"));
    }
    Ok((params, meta))
}
