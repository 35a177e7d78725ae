//! Checkpoint serialization.
//!
//! Binary layout (all integers little-endian):
//!
//! ```text
//! offset 0   magic "TUN1" (4 bytes)
//! offset 4   u32 tensor count
//! per tensor u16 name length, UTF-8 name bytes,
//!            u8 rank, rank x u32 extents,
//!            numel x f32 payload
//! trailer    u32 CRC-32 over every payload byte in file order
//! ```
//!
//! A sidecar JSON file at `<path>.json` records the architecture
//! configuration and training provenance so a checkpoint is
//! self-describing.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ModelConfig, TunetParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"TUN1";
const MAX_RANK: usize = 8;

/// Architecture and provenance stored next to the tensor data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    /// Seed that drove initialization and training streams.
    pub seed: u64,
    /// Loss blend weight used during training.
    pub alpha: f32,
    /// Contrastive temperature used during training.
    pub tau: f32,
    /// Number of views the model was trained with.
    pub train_views: u8,
    /// Total epochs trained.
    pub epochs: usize,
    /// Epoch whose weights were selected (best validation loss).
    pub selected_epoch: usize,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_os_string();
    os.push(".json");
    PathBuf::from(os)
}

fn ck_err(path: &Path, what: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("{}: {what}", path.display()))
}

/// Serialize parameters plus sidecar metadata.
pub fn save_checkpoint(path: &Path, model: &TunetParams, meta: &CheckpointMeta) -> Result<()> {
    if meta.config != model.config {
        return Err(Error::Contract(
            "checkpoint metadata describes a different architecture than the parameters".into(),
        ));
    }
    model.validate_finite()?;

    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    let mut crc = crc32fast::Hasher::new();

    w.write_all(MAGIC)?;
    w.write_all(&u32::try_from(model.params.len()).expect("tensor count fits u32").to_le_bytes())?;
    for (name, tensor) in model.params.iter() {
        let name_bytes = name.as_bytes();
        let name_len = u16::try_from(name_bytes.len())
            .map_err(|_| ck_err(path, format!("tensor name too long: {name}")))?;
        w.write_all(&name_len.to_le_bytes())?;
        w.write_all(name_bytes)?;
        let rank = u8::try_from(tensor.shape().len()).expect("rank fits u8");
        w.write_all(&[rank])?;
        for extent in tensor.shape() {
            w.write_all(&u32::try_from(*extent).expect("extent fits u32").to_le_bytes())?;
        }
        let mut payload = Vec::with_capacity(tensor.numel() * 4);
        for v in tensor.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        crc.update(&payload);
        w.write_all(&payload)?;
    }
    w.write_all(&crc.finalize().to_le_bytes())?;
    w.flush()?;

    let json = serde_json::to_string_pretty(meta)?;
    std::fs::write(sidecar_path(path), json)?;
    Ok(())
}

/// Low-level reader: the named tensors exactly as stored, after magic
/// and checksum validation but before any architecture checks.
pub fn read_checkpoint_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);

    let mut read_exact = |buf: &mut [u8], what: &str| -> Result<()> {
        r.read_exact(buf).map_err(|_| ck_err(path, format!("truncated while reading {what}")))
    };

    let mut magic = [0u8; 4];
    read_exact(&mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(ck_err(path, format!("bad magic {magic:?}")));
    }
    let mut count_buf = [0u8; 4];
    read_exact(&mut count_buf, "tensor count")?;
    let count = u32::from_le_bytes(count_buf) as usize;

    let mut crc = crc32fast::Hasher::new();
    let mut tensors = Vec::with_capacity(count);
    for idx in 0..count {
        let mut len_buf = [0u8; 2];
        read_exact(&mut len_buf, "name length")?;
        let mut name_buf = vec![0u8; u16::from_le_bytes(len_buf) as usize];
        read_exact(&mut name_buf, "name")?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| ck_err(path, format!("tensor {idx} name is not UTF-8")))?;

        let mut rank_buf = [0u8; 1];
        read_exact(&mut rank_buf, "rank")?;
        let rank = rank_buf[0] as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(ck_err(path, format!("tensor {name}: implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel = 1usize;
        for _ in 0..rank {
            let mut ext_buf = [0u8; 4];
            read_exact(&mut ext_buf, "extent")?;
            let extent = u32::from_le_bytes(ext_buf) as usize;
            numel = numel
                .checked_mul(extent)
                .filter(|n| *n <= u32::MAX as usize)
                .ok_or_else(|| ck_err(path, format!("tensor {name}: extent overflow")))?;
            shape.push(extent);
        }
        let mut payload = vec![0u8; numel * 4];
        read_exact(&mut payload, "payload")?;
        crc.update(&payload);
        let data: Vec<f32> =
            payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }

    let mut crc_buf = [0u8; 4];
    read_exact(&mut crc_buf, "checksum")?;
    if u32::from_le_bytes(crc_buf) != crc.finalize() {
        return Err(ck_err(path, "checksum mismatch"));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(ck_err(path, "trailing bytes after checksum"));
    }
    Ok(tensors)
}

/// Load a checkpoint and validate it against its sidecar metadata.
pub fn load_checkpoint(path: &Path) -> Result<(TunetParams, CheckpointMeta)> {
    let sidecar = sidecar_path(path);
    let json = std::fs::read_to_string(&sidecar)
        .map_err(|e| ck_err(&sidecar, format!("cannot read sidecar: {e}")))?;
    let meta: CheckpointMeta = serde_json::from_str(&json)?;

    let stored = read_checkpoint_tensors(path)?;
    let mut model = TunetParams::template(meta.config.clone())?;

    if stored.len() != model.params.len() {
        return Err(ck_err(
            path,
            format!("expected {} tensors, found {}", model.params.len(), stored.len()),
        ));
    }
    let expected: Vec<String> = model.params.names().iter().map(|s| s.to_string()).collect();
    for (name, tensor) in stored {
        let idx = expected
            .iter()
            .position(|n| *n == name)
            .ok_or_else(|| ck_err(path, format!("unknown tensor name {name}")))?;
        let slot = model.params.tensor_at_mut(idx);
        if slot.shape() != tensor.shape() {
            return Err(ck_err(
                path,
                format!(
                    "tensor {name}: shape mismatch (expected {:?}, found {:?})",
                    slot.shape(),
                    tensor.shape()
                ),
            ));
        }
        *slot = tensor;
    }
    model
        .validate_finite()
        .map_err(|e| ck_err(path, format!("non-finite tensor data: {e}")))?;
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::View;
    use crate::rng::stream;
    use crate::tensor::graph::Graph;
    use crate::tensor::Tensor;
    use crate::model::TunetGraph;

    fn meta_for(model: &TunetParams) -> CheckpointMeta {
        CheckpointMeta {
            config: model.config.clone(),
            seed: 17,
            alpha: 0.25,
            tau: 0.07,
            train_views: 3,
            epochs: 15,
            selected_epoch: 9,
        }
    }

    fn small_model(seed: u64) -> TunetParams {
        TunetParams::init(ModelConfig { base_channels: 2, ..Default::default() }, seed).unwrap()
    }

    #[test]
    fn round_trip_preserves_every_bit_and_the_forward_pass() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.tun");
        let model = small_model(17);
        save_checkpoint(&path, &model, &meta_for(&model)).unwrap();
        let (loaded, meta) = load_checkpoint(&path).unwrap();

        assert_eq!(meta, meta_for(&model));
        for ((an, at), (bn, bt)) in model.params.iter().zip(loaded.params.iter()) {
            assert_eq!(an, bn);
            assert_eq!(at.shape(), bt.shape());
            assert_eq!(at.data(), bt.data(), "{an} must round-trip bit-exactly");
        }

        let forward = |m: &TunetParams| -> Vec<f32> {
            let mut g = Graph::new();
            let net = TunetGraph::bind(&mut g, m).unwrap();
            let mut rng = stream(3, 0x55);
            let x = Tensor::rand_uniform(vec![1, 1, 64, 64], 0.0, 1.0, &mut rng).unwrap();
            let x = g.leaf(x).unwrap();
            let mut dr = stream(0, 0);
            let enc = net.encode(&mut g, x, View::Axial, false, &mut dr).unwrap();
            let fused = net.fuse(&mut g, &[enc.latent]).unwrap();
            let prob = net.decode(&mut g, fused, &enc.skips).unwrap();
            g.value(prob).data().to_vec()
        };
        assert_eq!(forward(&model), forward(&loaded));
    }

    #[test]
    fn empty_file_is_a_checkpoint_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.tun");
        std::fs::write(&path, b"").unwrap();
        assert!(matches!(read_checkpoint_tensors(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn hand_authored_single_tensor_fixture_loads_exact_values() {
        // magic, count=1, name "w", rank 2, extents 2x2,
        // payload [1.5, -2.0, 0.25, 8.0], CRC-32 frozen from an
        // independent implementation (zlib).
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"TUN1");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(b"w");
        bytes.push(2);
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        for v in [1.5f32, -2.0, 0.25, 8.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.extend_from_slice(&0xb7c50b2du32.to_le_bytes());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fixture.tun");
        std::fs::write(&path, &bytes).unwrap();
        let tensors = read_checkpoint_tensors(&path).unwrap();
        assert_eq!(tensors.len(), 1);
        assert_eq!(tensors[0].0, "w");
        assert_eq!(tensors[0].1.shape(), &[2, 2]);
        assert_eq!(tensors[0].1.data(), &[1.5, -2.0, 0.25, 8.0]);
    }

    #[test]
    fn corrupted_payload_fails_the_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.tun");
        let model = small_model(5);
        save_checkpoint(&path, &model, &meta_for(&model)).unwrap();

        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(ref m) if m.contains("checksum")), "{err}");
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.tun");
        std::fs::write(&path, b"NOPE\x00\x00\x00\x00").unwrap();
        let err = read_checkpoint_tensors(&path).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(ref m) if m.contains("magic")), "{err}");
    }

    #[test]
    fn unknown_tensor_name_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.tun");
        let mut model = small_model(6);
        save_checkpoint(&path, &model, &meta_for(&model)).unwrap();

        // Re-save with one renamed tensor by rewriting the name bytes
        // in place: "enc.b1.c0.w" -> "enc.bX.c0.w" (same length).
        let mut bytes = std::fs::read(&path).unwrap();
        let needle = b"enc.b1.c0.w";
        let pos = bytes.windows(needle.len()).position(|w| w == needle).unwrap();
        bytes[pos + 5] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(ref m) if m.contains("unknown tensor")), "{err}");

        // Shape mismatch: metadata promises a different base width.
        let path2 = dir.path().join("model2.tun");
        save_checkpoint(&path2, &model, &meta_for(&model)).unwrap();
        model.config.base_channels = 4;
        let wrong_meta = CheckpointMeta { config: model.config.clone(), ..meta_for(&model) };
        std::fs::write(
            sidecar_path(&path2),
            serde_json::to_string_pretty(&wrong_meta).unwrap(),
        )
        .unwrap();
        let err = load_checkpoint(&path2).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(ref m) if m.contains("shape mismatch")), "{err}");
    }

    #[test]
    fn missing_sidecar_is_a_checkpoint_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.tun");
        let model = small_model(7);
        save_checkpoint(&path, &model, &meta_for(&model)).unwrap();
        std::fs::remove_file(sidecar_path(&path)).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn metadata_must_match_the_parameters_on_save() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.tun");
        let model = small_model(8);
        let mut meta = meta_for(&model);
        meta.config.base_channels = 16;
        assert!(matches!(
            save_checkpoint(&path, &model, &meta),
            Err(Error::Contract(_))
        ));
    }
}
