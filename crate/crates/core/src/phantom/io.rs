//! On-disk dataset format.
//!
//! A dataset is a directory with a `meta.json` manifest and one
//! subdirectory per patient containing `.vol` volumes. The `.vol`
//! layout is:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "MVV1"
//! 4       1     dtype code: 0 = f32, 1 = u8
//! 5       12    extents, three little-endian u32 (nx, ny, nz)
//! 17      24    spacings, three little-endian f64 (mm)
//! 41      23    zero padding (header is 64 bytes total)
//! 64      n     payload, row-major (x slowest, z fastest)
//! 64+n    4     CRC32 of the payload, little-endian u32
//! ```
//!
//! f32 payloads are little-endian; u8 payloads hold binary masks and
//! may contain only 0 or 1. Round-trips are bit-exact.

use super::{PatientViews, PhantomSpec, Volume3D};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"MVV1";
const HEADER_LEN: usize = 64;
pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Payload element type of a stored volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VolDtype {
    F32,
    U8,
}

impl VolDtype {
    fn code(self) -> u8 {
        match self {
            VolDtype::F32 => 0,
            VolDtype::U8 => 1,
        }
    }

    fn from_code(code: u8, path: &Path) -> Result<Self> {
        match code {
            0 => Ok(VolDtype::F32),
            1 => Ok(VolDtype::U8),
            other => Err(Error::Format(format!(
                "{}: unknown dtype code {other}",
                path.display()
            ))),
        }
    }
}

/// Dataset manifest stored as `meta.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub global_seed: u64,
    pub spec: PhantomSpec,
    pub patient_ids: Vec<String>,
}

/// Write one volume. `dtype` U8 requires binary data.
pub fn save_volume(path: &Path, v: &Volume3D, dtype: VolDtype) -> Result<()> {
    let mut header = [0u8; HEADER_LEN];
    header[0..4].copy_from_slice(MAGIC);
    header[4] = dtype.code();
    let ext = v.extents();
    for (i, e) in ext.iter().enumerate() {
        let e32 = u32::try_from(*e)
            .map_err(|_| Error::Format(format!("{}: extent {e} exceeds u32", path.display())))?;
        header[5 + i * 4..9 + i * 4].copy_from_slice(&e32.to_le_bytes());
    }
    for (i, s) in v.spacing().iter().enumerate() {
        header[17 + i * 8..25 + i * 8].copy_from_slice(&s.to_le_bytes());
    }

    let payload: Vec<u8> = match dtype {
        VolDtype::F32 => v.data().iter().flat_map(|x| x.to_le_bytes()).collect(),
        VolDtype::U8 => {
            if !v.is_binary() {
                return Err(Error::Format(format!(
                    "{}: u8 volumes must be binary masks",
                    path.display()
                )));
            }
            v.data().iter().map(|x| *x as u8).collect()
        }
    };
    let crc = crc32fast::hash(&payload);

    let mut file = fs::File::create(path)?;
    file.write_all(&header)?;
    file.write_all(&payload)?;
    file.write_all(&crc.to_le_bytes())?;
    Ok(())
}

/// Read one volume, verifying magic, extents and checksum.
pub fn load_volume(path: &Path) -> Result<(Volume3D, VolDtype)> {
    let mut file = fs::File::open(path)
        .map_err(|e| Error::Format(format!("{}: cannot open: {e}", path.display())))?;
    let mut header = [0u8; HEADER_LEN];
    file.read_exact(&mut header)
        .map_err(|e| Error::Format(format!("{}: truncated header: {e}", path.display())))?;
    if &header[0..4] != MAGIC {
        return Err(Error::Format(format!("{}: bad magic", path.display())));
    }
    let dtype = VolDtype::from_code(header[4], path)?;
    let mut extents = [0usize; 3];
    for (i, e) in extents.iter_mut().enumerate() {
        let mut b = [0u8; 4];
        b.copy_from_slice(&header[5 + i * 4..9 + i * 4]);
        *e = u32::from_le_bytes(b) as usize;
    }
    let mut spacing = [0f64; 3];
    for (i, s) in spacing.iter_mut().enumerate() {
        let mut b = [0u8; 8];
        b.copy_from_slice(&header[17 + i * 8..25 + i * 8]);
        *s = f64::from_le_bytes(b);
    }
    let n = extents[0]
        .checked_mul(extents[1])
        .and_then(|p| p.checked_mul(extents[2]))
        .ok_or_else(|| Error::Format(format!("{}: extent overflow", path.display())))?;

    let elem = match dtype {
        VolDtype::F32 => 4,
        VolDtype::U8 => 1,
    };
    let mut payload = vec![0u8; n * elem];
    file.read_exact(&mut payload)
        .map_err(|e| Error::Format(format!("{}: truncated payload: {e}", path.display())))?;
    let mut crc_bytes = [0u8; 4];
    file.read_exact(&mut crc_bytes)
        .map_err(|e| Error::Format(format!("{}: missing checksum: {e}", path.display())))?;
    let stored = u32::from_le_bytes(crc_bytes);
    let computed = crc32fast::hash(&payload);
    if stored != computed {
        return Err(Error::Format(format!(
            "{}: checksum mismatch (stored {stored:#010x}, computed {computed:#010x})",
            path.display()
        )));
    }

    let data: Vec<f32> = match dtype {
        VolDtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        VolDtype::U8 => {
            if let Some(bad) = payload.iter().find(|b| **b > 1) {
                return Err(Error::Format(format!(
                    "{}: mask byte {bad} is not binary",
                    path.display()
                )));
            }
            payload.iter().map(|b| *b as f32).collect()
        }
    };
    let volume = Volume3D::new(extents, spacing, data)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok((volume, dtype))
}

fn patient_dir(root: &Path, id: &str) -> std::path::PathBuf {
    root.join(id)
}

/// Write a full dataset: manifest plus one directory of volumes per
/// patient. Existing files are overwritten.
pub fn save_dataset(
    root: &Path,
    spec: &PhantomSpec,
    global_seed: u64,
    patients: &[PatientViews],
) -> Result<()> {
    fs::create_dir_all(root)?;
    let meta = DatasetMeta {
        format_version: DATASET_FORMAT_VERSION,
        global_seed,
        spec: spec.clone(),
        patient_ids: patients.iter().map(|p| p.patient_id.clone()).collect(),
    };
    let meta_json = serde_json::to_string_pretty(&meta)?;
    fs::write(root.join("meta.json"), meta_json)?;
    for p in patients {
        p.validate()?;
        let dir = patient_dir(root, &p.patient_id);
        fs::create_dir_all(&dir)?;
        save_volume(&dir.join("axial.vol"), &p.axial, VolDtype::F32)?;
        if let Some(v) = &p.sagittal {
            save_volume(&dir.join("sagittal.vol"), v, VolDtype::F32)?;
        }
        if let Some(v) = &p.coronal {
            save_volume(&dir.join("coronal.vol"), v, VolDtype::F32)?;
        }
        save_volume(&dir.join("axial_mask.vol"), &p.axial_mask, VolDtype::U8)?;
        if let Some(oracle) = &p.oracle_mask {
            save_volume(&dir.join("oracle_mask.vol"), oracle, VolDtype::U8)?;
        }
    }
    Ok(())
}

/// Load a dataset directory written by [`save_dataset`].
pub fn load_dataset(root: &Path) -> Result<(DatasetMeta, Vec<PatientViews>)> {
    let meta_path = root.join("meta.json");
    let meta_text = fs::read_to_string(&meta_path)
        .map_err(|e| Error::Format(format!("{}: cannot read: {e}", meta_path.display())))?;
    let meta: DatasetMeta = serde_json::from_str(&meta_text)
        .map_err(|e| Error::Format(format!("{}: invalid manifest: {e}", meta_path.display())))?;
    if meta.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported format version {} (expected {DATASET_FORMAT_VERSION})",
            meta_path.display(),
            meta.format_version
        )));
    }
    let mut patients = Vec::with_capacity(meta.patient_ids.len());
    for id in &meta.patient_ids {
        let dir = patient_dir(root, id);
        let load_optional = |name: &str| -> Result<Option<Volume3D>> {
            let path = dir.join(name);
            if path.exists() {
                Ok(Some(load_volume(&path)?.0))
            } else {
                Ok(None)
            }
        };
        let (axial, _) = load_volume(&dir.join("axial.vol"))?;
        let sagittal = load_optional("sagittal.vol")?;
        let coronal = load_optional("coronal.vol")?;
        let (axial_mask, mask_dtype) = load_volume(&dir.join("axial_mask.vol"))?;
        if mask_dtype != VolDtype::U8 {
            return Err(Error::Format(format!(
                "{}: mask must be stored as u8",
                dir.join("axial_mask.vol").display()
            )));
        }
        let oracle_path = dir.join("oracle_mask.vol");
        let oracle_mask = if oracle_path.exists() {
            Some(load_volume(&oracle_path)?.0)
        } else {
            None
        };
        let p = PatientViews {
            patient_id: id.clone(),
            axial,
            sagittal,
            coronal,
            axial_mask,
            oracle_mask,
        };
        p.validate()?;
        patients.push(p);
    }
    Ok((meta, patients))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::generate_phantom;
    use tempfile::tempdir;

    fn tiny_volume() -> Volume3D {
        Volume3D::new(
            [2, 2, 2],
            [0.5, 1.0, 3.0],
            vec![0.0, 1.5, -2.25, 3.5, 4.0, 5.5, 6.125, -7.0],
        )
        .unwrap()
    }

    #[test]
    fn f32_volume_round_trips_bit_exactly() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("v.vol");
        let v = tiny_volume();
        save_volume(&path, &v, VolDtype::F32).unwrap();
        let (loaded, dtype) = load_volume(&path).unwrap();
        assert_eq!(dtype, VolDtype::F32);
        assert_eq!(loaded.extents(), v.extents());
        assert_eq!(loaded.spacing(), v.spacing());
        for (a, b) in loaded.data().iter().zip(v.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn u8_mask_round_trips_and_rejects_non_binary() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.vol");
        let m = Volume3D::new([2, 2, 2], [1.0; 3], vec![0., 1., 1., 0., 1., 0., 0., 1.]).unwrap();
        save_volume(&path, &m, VolDtype::U8).unwrap();
        let (loaded, dtype) = load_volume(&path).unwrap();
        assert_eq!(dtype, VolDtype::U8);
        assert_eq!(loaded.data(), m.data());
        let bad = tiny_volume();
        assert!(save_volume(&dir.path().join("bad.vol"), &bad, VolDtype::U8).is_err());
    }

    #[test]
    fn hand_written_file_loads_with_expected_values() {
        // Author the bytes directly from the format description.
        let dir = tempdir().unwrap();
        let path = dir.path().join("hand.vol");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"MVV1");
        bytes.push(0u8); // f32
        for e in [2u32, 2, 2] {
            bytes.extend_from_slice(&e.to_le_bytes());
        }
        for s in [1.0f64, 1.0, 1.0] {
            bytes.extend_from_slice(&s.to_le_bytes());
        }
        bytes.resize(64, 0);
        let values: Vec<f32> = (1..=8).map(|i| i as f32).collect();
        let payload: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        bytes.extend_from_slice(&payload);
        bytes.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();

        let (v, _) = load_volume(&path).unwrap();
        assert_eq!(v.extents(), [2, 2, 2]);
        assert_eq!(v.data(), &[1., 2., 3., 4., 5., 6., 7., 8.]);
    }

    #[test]
    fn truncated_file_is_a_format_error_naming_the_file() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.vol");
        save_volume(&path, &tiny_volume(), VolDtype::F32).unwrap();
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&path, &full[..full.len() - 6]).unwrap();
        let err = load_volume(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("t.vol"), "{msg}");
        assert!(matches!(err, Error::Format(_)));
    }

    #[test]
    fn corrupted_payload_fails_checksum() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.vol");
        save_volume(&path, &tiny_volume(), VolDtype::F32).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[70] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        let err = load_volume(&path).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.vol");
        save_volume(&path, &tiny_volume(), VolDtype::F32).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_volume(&path).unwrap_err().to_string().contains("magic"));
    }

    #[test]
    fn dataset_round_trip_is_bit_exact() {
        let spec = PhantomSpec {
            fine_extent: 36,
            semi_axes_mm: (7.0, 9.0),
            perturb_amp_mm: 1.0,
            center_jitter_mm: 1.0,
            ..Default::default()
        };
        let patients: Vec<PatientViews> = (0..2)
            .map(|i| generate_phantom(&spec, &format!("p{i:02}"), 1000 + i).unwrap())
            .collect();
        let dir = tempdir().unwrap();
        save_dataset(dir.path(), &spec, 77, &patients).unwrap();
        let (meta, loaded) = load_dataset(dir.path()).unwrap();
        assert_eq!(meta.global_seed, 77);
        assert_eq!(meta.patient_ids, vec!["p00", "p01"]);
        for (a, b) in loaded.iter().zip(&patients) {
            assert_eq!(a.patient_id, b.patient_id);
            for (x, y) in a.axial.data().iter().zip(b.axial.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
            assert_eq!(a.axial_mask.data(), b.axial_mask.data());
            assert_eq!(
                a.oracle_mask.as_ref().unwrap().data(),
                b.oracle_mask.as_ref().unwrap().data()
            );
        }
    }

    #[test]
    fn missing_meta_is_a_format_error() {
        let dir = tempdir().unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Format(_))));
    }
}
