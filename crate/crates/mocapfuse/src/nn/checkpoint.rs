//! Network checkpoints: one binary file per network, a JSON header with the
//! architecture and training metadata followed by little-endian `f32`
//! parameters.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::{Activation, InitializerNet, RecurrentNet};
use crate::{Error, Result};

const MAGIC: [u8; 4] = *b"MCN1";

/// Architecture description stored in the header.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case")]
pub enum NetKind {
    Recurrent {
        input_size: usize,
        hidden_size: usize,
        layer_count: usize,
        output_size: usize,
        activation: Activation,
    },
    Initializer {
        input_size: usize,
        hidden_size: usize,
        output_size: usize,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: NetKind,
    pub seed: u64,
    pub param_count: usize,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingCheckpoint(path.to_path_buf())
        } else {
            Error::Io(e)
        }
    })
}

fn write_file(path: &Path, header: &CheckpointHeader, params: &[f64]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    let json = serde_json::to_vec(header)?;
    w.write_u64::<LittleEndian>(json.len() as u64)?;
    w.write_all(&json)?;
    for &p in params {
        w.write_f32::<LittleEndian>(p as f32)?;
    }
    w.flush()?;
    Ok(())
}

fn read_file(path: &Path) -> Result<(CheckpointHeader, Vec<f64>)> {
    let mut r = BufReader::new(open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "{} is not a network checkpoint",
            path.display()
        )));
    }
    let len = r.read_u64::<LittleEndian>()? as usize;
    if len > 1 << 20 {
        return Err(Error::Format("checkpoint header too large".into()));
    }
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let header: CheckpointHeader = serde_json::from_slice(&json)?;
    let mut params = Vec::with_capacity(header.param_count);
    for _ in 0..header.param_count {
        params.push(r.read_f32::<LittleEndian>()? as f64);
    }
    Ok((header, params))
}

pub fn save_recurrent(
    path: &Path,
    net: &RecurrentNet,
    metadata: serde_json::Value,
) -> Result<()> {
    let header = CheckpointHeader {
        kind: NetKind::Recurrent {
            input_size: net.input_size,
            hidden_size: net.hidden_size,
            layer_count: net.layer_count,
            output_size: net.output_size,
            activation: net.activation,
        },
        seed: net.seed,
        param_count: net.params.len(),
        metadata,
    };
    write_file(path, &header, &net.params)
}

pub fn load_recurrent(path: &Path) -> Result<(RecurrentNet, CheckpointHeader)> {
    let (header, params) = read_file(path)?;
    let NetKind::Recurrent {
        input_size,
        hidden_size,
        layer_count,
        output_size,
        activation,
    } = header.kind
    else {
        return Err(Error::Format(format!(
            "{} holds an initializer, not a recurrent network",
            path.display()
        )));
    };
    let mut net = RecurrentNet::new(
        input_size,
        hidden_size,
        layer_count,
        output_size,
        activation,
        header.seed,
    );
    if params.len() != net.params.len() {
        return Err(Error::DimensionMismatch {
            expected: net.params.len(),
            got: params.len(),
            context: "checkpoint parameters",
        });
    }
    net.params = params;
    Ok((net, header))
}

pub fn save_initializer(
    path: &Path,
    net: &InitializerNet,
    metadata: serde_json::Value,
) -> Result<()> {
    let header = CheckpointHeader {
        kind: NetKind::Initializer {
            input_size: net.input_size,
            hidden_size: net.hidden_size,
            output_size: net.output_size,
        },
        seed: net.seed,
        param_count: net.params.len(),
        metadata,
    };
    write_file(path, &header, &net.params)
}

pub fn load_initializer(path: &Path) -> Result<(InitializerNet, CheckpointHeader)> {
    let (header, params) = read_file(path)?;
    let NetKind::Initializer {
        input_size,
        hidden_size,
        output_size,
    } = header.kind
    else {
        return Err(Error::Format(format!(
            "{} holds a recurrent network, not an initializer",
            path.display()
        )));
    };
    let mut net = InitializerNet::new(input_size, hidden_size, output_size, header.seed);
    if params.len() != net.params.len() {
        return Err(Error::DimensionMismatch {
            expected: net.params.len(),
            got: params.len(),
            context: "checkpoint parameters",
        });
    }
    net.params = params;
    Ok((net, header))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn recurrent_round_trip_preserves_params_to_f32() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("net.bin");
        let net = RecurrentNet::new(6, 8, 2, 3, Activation::Sigmoid, 77);
        let meta = serde_json::json!({"epochs": 30, "final_loss": 0.125});
        save_recurrent(&path, &net, meta).unwrap();
        let (back, header) = load_recurrent(&path).unwrap();
        assert_eq!(back.input_size, 6);
        assert_eq!(back.activation, Activation::Sigmoid);
        assert_eq!(header.metadata["epochs"], 30);
        for (a, b) in net.params.iter().zip(&back.params) {
            assert!((a - b).abs() <= (a.abs() + 1.0) * 1e-7);
        }
    }

    #[test]
    fn initializer_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("init.bin");
        let net = InitializerNet::new(10, 12, 16, 5);
        save_initializer(&path, &net, serde_json::Value::Null).unwrap();
        let (back, _) = load_initializer(&path).unwrap();
        assert_eq!(back.output_size, 16);
        for (a, b) in net.params.iter().zip(&back.params) {
            assert!((a - b).abs() <= 1e-7);
        }
    }

    #[test]
    fn missing_file_reports_missing_checkpoint() {
        let err = load_recurrent(Path::new("/nonexistent/net.bin")).unwrap_err();
        assert!(matches!(err, Error::MissingCheckpoint(_)));
    }

    #[test]
    fn kind_mismatch_and_garbage_are_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("x.bin");
        let net = InitializerNet::new(4, 4, 8, 1);
        save_initializer(&path, &net, serde_json::Value::Null).unwrap();
        assert!(matches!(
            load_recurrent(&path).unwrap_err(),
            Error::Format(_)
        ));
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(load_initializer(&path).is_err());
    }
}
