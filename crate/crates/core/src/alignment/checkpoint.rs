//! Versioned binary checkpoint for the alignment model.
//!
//! Little-endian layout:
//!
//! | offset | size | field                          |
//! |--------|------|--------------------------------|
//! | 0      | 4    | magic `XTRA`                   |
//! | 4      | 4    | u32 version (1)                |
//! | 8      | 4    | u32 z_enc                      |
//! | 12     | 8    | f64 tau                        |
//! | 20     | 4    | u32 parameter count            |
//! | 24     | ...  | parameter blobs                |
//! | ...    | ...  | u32 meta length + meta JSON    |
//!
//! Each parameter blob is `u32 name_len, name bytes, u32 rows,
//! u32 cols, rows*cols f32`. The trailing meta JSON carries
//! provenance (tool version, config hash, seed).

use std::fs;
use std::path::Path;

use crate::alignment::{AlignmentModel, TrainingLog};
use crate::binio::{fill_params, write_param, Reader};
use crate::data::Provenance;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"XTRA";
const VERSION: u32 = 1;

pub fn save_checkpoint(
    model: &AlignmentModel,
    path: &Path,
    provenance: &Provenance,
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(model.z_enc as u32).to_le_bytes());
    buf.extend_from_slice(&model.tau.to_le_bytes());
    let params = model.params();
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        write_param(&mut buf, p);
    }
    let meta = serde_json::to_vec(provenance).map_err(|e| Error::format(0, e.to_string()))?;
    buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    buf.extend_from_slice(&meta);
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(AlignmentModel, Provenance)> {
    let buf = fs::read(path)?;
    let mut r = Reader::new(&buf);
    if r.bytes(4)? != MAGIC {
        return Err(Error::format(0, "bad magic, expected XTRA"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let z_enc = r.u32()? as usize;
    let tau = r.f64()?;
    let n_params = r.u32()? as usize;

    let mut model = AlignmentModel::new(z_enc, tau, 0.5, 0)?;
    fill_params(&mut r, n_params, &mut model.params_mut())?;

    let meta_at = r.offset;
    let meta_len = r.u32()? as usize;
    let provenance: Provenance = serde_json::from_slice(r.bytes(meta_len)?)
        .map_err(|e| Error::format(meta_at as u64, format!("bad meta json: {e}")))?;
    Ok((model, provenance))
}

/// Training-log sidecar: JSON with embedded provenance.
pub fn save_training_log(log: &TrainingLog, provenance: &Provenance, path: &Path) -> Result<()> {
    #[derive(serde::Serialize)]
    struct Sidecar<'a> {
        provenance: &'a Provenance,
        log: &'a TrainingLog,
    }
    let text = serde_json::to_string_pretty(&Sidecar { provenance, log })
        .map_err(|e| Error::format(0, e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::DEFAULT_TAU;

    fn prov() -> Provenance {
        Provenance {
            tool_version: crate::TOOL_VERSION.to_string(),
            config_hash: "deadbeef".to_string(),
            seed: 7,
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.xtra");
        let model = AlignmentModel::new(16, DEFAULT_TAU, 0.5, 42).unwrap();
        save_checkpoint(&model, &path, &prov()).unwrap();
        let (loaded, p) = load_checkpoint(&path).unwrap();
        assert_eq!(p, prov());
        assert_eq!(loaded.param_checksum(), model.param_checksum());
        assert_eq!(loaded.z_enc, 16);
        assert_eq!(loaded.tau, DEFAULT_TAU);

        // Saving again produces identical bytes.
        let path2 = dir.path().join("model2.xtra");
        save_checkpoint(&loaded, &path2, &prov()).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn corrupted_magic_names_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.xtra");
        let model = AlignmentModel::new(8, DEFAULT_TAU, 0.5, 0).unwrap();
        save_checkpoint(&model, &path, &prov()).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[1] = b'!';
        fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("offset 0"), "{err}");
    }

    #[test]
    fn truncation_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.xtra");
        let model = AlignmentModel::new(8, DEFAULT_TAU, 0.5, 0).unwrap();
        save_checkpoint(&model, &path, &prov()).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
    }
}
