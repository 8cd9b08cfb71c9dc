//! Versioned binary checkpoints.
//!
//! Layout: `b"BDLM"` magic, a little-endian `u32` format version, a `u64`
//! header length, a JSON header (schema tag, dtype, model/optimizer config,
//! step, rng position, tensor table), then raw little-endian tensor data:
//! all parameter tensors in table order, then the first moments, then the
//! second moments. Round-trips are bit-exact.

use super::{ModelConfig, ModelParams, OptimConfig, Scalar, TrainState};
use crate::error::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"BDLM";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct RngPos {
    /// 32-byte ChaCha seed, hex.
    seed: String,
    stream: u64,
    /// 128-bit word position, hex.
    word_pos: String,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema: String,
    dtype: String,
    config: ModelConfig,
    optim: OptimConfig,
    step: usize,
    rng: RngPos,
    tensors: Vec<TensorEntry>,
}

fn hex_encode(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn hex_decode(s: &str) -> Result<Vec<u8>> {
    if s.len() % 2 != 0 {
        return Err(Error::Checkpoint("odd-length hex string".into()));
    }
    (0..s.len() / 2)
        .map(|i| {
            u8::from_str_radix(&s[2 * i..2 * i + 2], 16)
                .map_err(|e| Error::Checkpoint(format!("bad hex: {e}")))
        })
        .collect()
}

fn write_tensors<F: Scalar>(params: &ModelParams<F>, out: &mut Vec<u8>) {
    for (_, mat) in params.tensors() {
        for &x in &mat.data {
            x.write_le(out);
        }
    }
}

pub fn save_checkpoint<F: Scalar>(state: &TrainState<F>, path: &Path) -> Result<()> {
    let header = Header {
        schema: "trainstate".into(),
        dtype: F::DTYPE.into(),
        config: state.params.config,
        optim: state.optim,
        step: state.step,
        rng: RngPos {
            seed: hex_encode(&state.rng.get_seed()),
            stream: state.rng.get_stream(),
            word_pos: format!("{:032x}", state.rng.get_word_pos()),
        },
        tensors: state
            .params
            .tensors()
            .into_iter()
            .map(|(name, m)| TensorEntry {
                name,
                rows: m.rows,
                cols: m.cols,
            })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut file = BufWriter::new(File::create(path)?);
    file.write_all(MAGIC)?;
    file.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    file.write_all(&(header_json.len() as u64).to_le_bytes())?;
    file.write_all(&header_json)?;
    let mut data = Vec::new();
    write_tensors(&state.params, &mut data);
    write_tensors(&state.m, &mut data);
    write_tensors(&state.v, &mut data);
    file.write_all(&data)?;
    file.flush()?;
    Ok(())
}

fn read_tensors<F: Scalar>(params: &mut ModelParams<F>, data: &[u8], offset: &mut usize) -> Result<()> {
    for (name, mat) in params.tensors_mut() {
        let bytes = mat.data.len() * F::BYTES;
        let end = *offset + bytes;
        if end > data.len() {
            return Err(Error::Checkpoint(format!(
                "file truncated inside tensor {name}"
            )));
        }
        for (i, x) in mat.data.iter_mut().enumerate() {
            *x = F::read_le(&data[*offset + i * F::BYTES..*offset + (i + 1) * F::BYTES]);
        }
        *offset = end;
    }
    Ok(())
}

pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<TrainState<F>> {
    let mut file = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("file too short for magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let mut word = [0u8; 4];
    file.read_exact(&mut word)
        .map_err(|_| Error::Checkpoint("file too short for version".into()))?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "version {version} unsupported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let mut len8 = [0u8; 8];
    file.read_exact(&mut len8)
        .map_err(|_| Error::Checkpoint("file too short for header length".into()))?;
    let header_len = u64::from_le_bytes(len8) as usize;
    let mut header_json = vec![0u8; header_len];
    file.read_exact(&mut header_json)
        .map_err(|_| Error::Checkpoint("file truncated inside header".into()))?;
    let header: Header = serde_json::from_slice(&header_json)?;
    if header.schema != "trainstate" {
        return Err(Error::Checkpoint(format!(
            "unknown schema {:?}",
            header.schema
        )));
    }
    if header.dtype != F::DTYPE {
        return Err(Error::Checkpoint(format!(
            "dtype {} file loaded as {}",
            header.dtype,
            F::DTYPE
        )));
    }
    header.config.validate()?;

    // The tensor table must match the architecture exactly.
    let mut params = ModelParams::<F>::zeros(&header.config)?;
    let expected = params.tensors();
    if expected.len() != header.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "tensor table has {} entries, architecture needs {}",
            header.tensors.len(),
            expected.len()
        )));
    }
    for ((name, mat), entry) in expected.iter().zip(&header.tensors) {
        if *name != entry.name || mat.rows != entry.rows || mat.cols != entry.cols {
            return Err(Error::Checkpoint(format!(
                "tensor {} ({}x{}) does not match architecture tensor {name} ({}x{})",
                entry.name, entry.rows, entry.cols, mat.rows, mat.cols
            )));
        }
    }

    let mut data = Vec::new();
    file.read_to_end(&mut data)?;
    let mut offset = 0usize;
    read_tensors(&mut params, &data, &mut offset)?;
    let mut m = ModelParams::<F>::zeros(&header.config)?;
    read_tensors(&mut m, &data, &mut offset)?;
    let mut v = ModelParams::<F>::zeros(&header.config)?;
    read_tensors(&mut v, &data, &mut offset)?;
    if offset != data.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after tensor data",
            data.len() - offset
        )));
    }

    let seed_bytes = hex_decode(&header.rng.seed)?;
    let seed: [u8; 32] = seed_bytes
        .try_into()
        .map_err(|_| Error::Checkpoint("rng seed is not 32 bytes".into()))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(header.rng.stream);
    let word_pos = u128::from_str_radix(&header.rng.word_pos, 16)
        .map_err(|e| Error::Checkpoint(format!("bad rng word position: {e}")))?;
    rng.set_word_pos(word_pos);

    Ok(TrainState {
        params,
        m,
        v,
        step: header.step,
        optim: header.optim,
        rng,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{TokenSequence, Vocabulary};
    use crate::model::{train_step, Mat, ModelConfig, Objective};
    use rand::Rng;

    /// Round-trips a single matrix through bytes.
    fn roundtrip_mat<F: Scalar>(mat: &Mat<F>) -> Mat<F> {
        let mut bytes = Vec::new();
        for &x in &mat.data {
            x.write_le(&mut bytes);
        }
        let mut out = Mat::zeros(mat.rows, mat.cols);
        for (i, x) in out.data.iter_mut().enumerate() {
            *x = F::read_le(&bytes[i * F::BYTES..(i + 1) * F::BYTES]);
        }
        out
    }

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            vocab: Vocabulary::new().size,
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            d_ffn: 16,
            max_positions: 32,
            token_shift: false,
        }
    }

    /// A state with nonzero moments, step, and rng offset.
    fn trained_state() -> TrainState<f32> {
        let vocab = Vocabulary::new();
        let mut state = TrainState::new(&tiny_config(), OptimConfig::default(), 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let batch: Vec<TokenSequence> = (0..2)
            .map(|_| {
                let tokens: Vec<u32> = (0..8)
                    .map(|_| rng.gen_range(vocab.byte_offset..vocab.size as u32))
                    .collect();
                TokenSequence::new(tokens, 4, 0, &vocab).unwrap()
            })
            .collect();
        for _ in 0..3 {
            train_step(&mut state, &batch, &Objective::Ar, &vocab).unwrap();
        }
        // Leave the rng mid-block so word_pos restoration is exercised.
        let _: u32 = state.rng.gen();
        state
    }

    #[test]
    fn float_bytes_round_trip() {
        let m = Mat::from_fn(3, 2, |r, c| (r as f32 - 0.5) * (c as f32 + 3.25));
        assert_eq!(roundtrip_mat(&m), m);
        let d = Mat::from_fn(2, 2, |r, c| (r + c) as f64 * 1e-17 + 0.1);
        assert_eq!(roundtrip_mat(&d), d);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.ckpt");
        let state = trained_state();
        save_checkpoint(&state, &path).unwrap();
        let loaded: TrainState<f32> = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.params, state.params);
        assert_eq!(loaded.m, state.m);
        assert_eq!(loaded.v, state.v);
        assert_eq!(loaded.step, state.step);
        assert_eq!(loaded.optim, state.optim);
        assert_eq!(loaded.rng.get_seed(), state.rng.get_seed());
        assert_eq!(loaded.rng.get_stream(), state.rng.get_stream());
        assert_eq!(loaded.rng.get_word_pos(), state.rng.get_word_pos());
        // And the restored rng continues identically.
        let mut a = state.rng.clone();
        let mut b = loaded.rng.clone();
        let xs: Vec<u64> = (0..4).map(|_| rand::Rng::gen::<u64>(&mut a)).collect();
        let ys: Vec<u64> = (0..4).map(|_| rand::Rng::gen::<u64>(&mut b)).collect();
        assert_eq!(xs, ys);
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.ckpt");
        save_checkpoint(&trained_state(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 99; // version low byte
        let bad = dir.path().join("bad_version.ckpt");
        std::fs::write(&bad, &bytes).unwrap();
        match load_checkpoint::<f32>(&bad) {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("version")),
            other => panic!("expected version error, got {other:?}"),
        }
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&bad, &bytes).unwrap();
        assert!(load_checkpoint::<f32>(&bad).is_err());
    }

    #[test]
    fn rejects_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.ckpt");
        save_checkpoint(&trained_state(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            let t = dir.path().join("cut.ckpt");
            std::fs::write(&t, &bytes[..cut]).unwrap();
            assert!(load_checkpoint::<f32>(&t).is_err(), "cut at {cut} loaded");
        }
    }

    #[test]
    fn rejects_dtype_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.ckpt");
        save_checkpoint(&trained_state(), &path).unwrap();
        match load_checkpoint::<f64>(&path) {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("dtype")),
            other => panic!("expected dtype error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_tampered_tensor_table() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.ckpt");
        save_checkpoint(&trained_state(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // Corrupt the embed entry's name inside the JSON header, same
        // length so every offset stays valid.
        let needle = b"\"name\":\"embed\"";
        let at = bytes
            .windows(needle.len())
            .position(|w| w == needle)
            .expect("tensor table entry present");
        bytes[at + 12] = b'x'; // embed -> embex
        let bad = dir.path().join("tampered.ckpt");
        std::fs::write(&bad, &bytes).unwrap();
        match load_checkpoint::<f32>(&bad) {
            Err(Error::Checkpoint(msg)) => {
                assert!(msg.contains("does not match"), "msg: {msg}")
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }
}
