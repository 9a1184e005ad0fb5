//! Model checkpoints: a JSON text header describing the architecture,
//! followed by named tensors in the `SMLT` binary format.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{encoder_channels, EncoderMode, ModelConfig, ModelParams};
use crate::tensor::Tensor;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    levels: usize,
    slope: f64,
    scale: f64,
    mode: EncoderMode,
    channels: Vec<usize>,
}

const FORMAT: &str = "mipalign-checkpoint";
const VERSION: u32 = 1;

pub fn save_checkpoint(path: impl AsRef<Path>, params: &ModelParams<f32>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        levels: params.config.levels,
        slope: params.config.slope,
        scale: params.config.scale,
        mode: params.config.mode,
        channels: (0..=params.config.levels).map(encoder_channels).collect(),
    };
    let mut line = serde_json::to_string(&header).expect("header serializes");
    line.push('\n');
    let io = |e| Error::io(path, e);
    w.write_all(line.as_bytes()).map_err(io)?;
    let entries = params.params();
    w.write_all(&(entries.len() as u32).to_le_bytes()).map_err(io)?;
    for (id, tensor) in entries {
        let name = id.name();
        w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(name.as_bytes()).map_err(io)?;
        tensor.write_smlt(&mut w).map_err(io)?;
    }
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams<f32>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);

    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        r.read_exact(&mut byte).map_err(|e| Error::io(path, e))?;
        if byte[0] == b'\n' {
            break;
        }
        line.push(byte[0]);
        if line.len() > 1 << 16 {
            return Err(Error::format(path, "unterminated header"));
        }
    }
    let header: Header = serde_json::from_slice(&line)
        .map_err(|e| Error::format(path, format!("bad header: {e}")))?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(Error::format(
            path,
            format!("unsupported checkpoint {}/{}", header.format, header.version),
        ));
    }
    let expected: Vec<usize> = (0..=header.levels).map(encoder_channels).collect();
    if header.channels != expected {
        return Err(Error::format(
            path,
            format!("channel schedule {:?} does not match levels {}", header.channels, header.levels),
        ));
    }

    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4).map_err(|e| Error::io(path, e))?;
    let count = u32::from_le_bytes(buf4) as usize;
    let mut tensors: HashMap<String, Tensor<f32>> = HashMap::new();
    for _ in 0..count {
        r.read_exact(&mut buf4).map_err(|e| Error::io(path, e))?;
        let name_len = u32::from_le_bytes(buf4) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(|e| Error::io(path, e))?;
        let name = String::from_utf8(name).map_err(|_| Error::format(path, "non-utf8 name"))?;
        let tensor = Tensor::<f32>::read_smlt(&mut r)?;
        tensors.insert(name, tensor);
    }

    let config = ModelConfig {
        levels: header.levels,
        slope: header.slope,
        scale: header.scale,
        mode: header.mode,
    };
    let mut params = ModelParams::<f32>::zeros(config);
    for (id, slot) in params.params_mut() {
        let name = id.name();
        let tensor = tensors
            .remove(&name)
            .ok_or_else(|| Error::format(path, format!("missing tensor {name}")))?;
        if tensor.shape() != slot.shape() {
            return Err(Error::format(
                path,
                format!("tensor {name}: shape {:?}, expected {:?}", tensor.shape(), slot.shape()),
            ));
        }
        *slot = tensor;
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::format(path, format!("unexpected tensor {extra}")));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let params = ModelParams::<f32>::init(ModelConfig { levels: 2, ..Default::default() }, 5);
        save_checkpoint(&path, &params).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.config.levels, 2);
        for ((ia, ta), (ib, tb)) in params.params().iter().zip(back.params().iter()) {
            assert_eq!(ia, ib);
            assert_eq!(ta, tb);
        }
    }

    #[test]
    fn checkpoint_round_trip_pyramid_mode() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        let cfg = ModelConfig { levels: 1, mode: EncoderMode::ImagePyramid, ..Default::default() };
        let params = ModelParams::<f32>::init(cfg, 5);
        save_checkpoint(&path, &params).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.config.mode, EncoderMode::ImagePyramid);
        assert!(back.encoder.is_empty());
    }

    #[test]
    fn truncated_checkpoint_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let params = ModelParams::<f32>::init(ModelConfig { levels: 0, ..Default::default() }, 5);
        save_checkpoint(&path, &params).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
