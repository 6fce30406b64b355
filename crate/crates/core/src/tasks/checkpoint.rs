//! Task-model checkpoint (XTSK): fusion blocks, head or query map, and
//! the checksums of the frozen artifacts the model depends on.
//!
//! Little-endian layout:
//!
//! | offset | size | field                            |
//! |--------|------|----------------------------------|
//! | 0      | 4    | magic `XTSK`                     |
//! | 4      | 4    | u32 version (1)                  |
//! | 8      | 1    | u8 kind (0 classify, 1 report)   |
//! | 9      | 3    | zero padding                     |
//! | 12     | 4    | u32 z_enc                        |
//! | 16     | ...  | u32 config length + config JSON  |
//! | ...    | 4    | u32 parameter count              |
//! | ...    | ...  | parameter blobs                  |
//! | ...    | ...  | u32 meta length + meta JSON      |

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{FusionBlocks, FusionConfig};
use crate::binio::{fill_params, write_param, Reader};
use crate::data::Provenance;
use crate::error::{Error, Result};
use crate::numerics::layers::Linear;
use crate::tasks::{ClassifierHead, NeighborMode, ReportRetrievalModel, TaskModel};

const MAGIC: &[u8; 4] = b"XTSK";
const VERSION: u32 = 1;

/// Which downstream model a checkpoint holds.
#[derive(Debug, Clone)]
pub enum TaskKind {
    Classify(TaskModel),
    Report(ReportRetrievalModel),
}

#[derive(Serialize, Deserialize)]
struct ClassifyConfig {
    fusion: Option<FusionConfig>,
    neighbor_mode: NeighborMode,
    random_seed: u64,
    alignment_checksum: u64,
    index_x_checksum: Option<u64>,
    index_r_checksum: Option<u64>,
}

#[derive(Serialize, Deserialize)]
struct ReportConfig {
    fusion: FusionConfig,
    tau: f64,
    alignment_checksum: u64,
    index_x_checksum: Option<u64>,
    index_r_checksum: Option<u64>,
}

pub fn save_task_model(kind: &TaskKind, path: &Path, provenance: &Provenance) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let (tag, z_enc, config_json, params) = match kind {
        TaskKind::Classify(m) => {
            let cfg = ClassifyConfig {
                fusion: m.fusion,
                neighbor_mode: m.neighbor_mode,
                random_seed: m.random_seed,
                alignment_checksum: m.alignment_checksum,
                index_x_checksum: m.index_x_checksum,
                index_r_checksum: m.index_r_checksum,
            };
            (
                0u8,
                m.z_enc,
                serde_json::to_vec(&cfg).map_err(|e| Error::format(0, e.to_string()))?,
                m.params(),
            )
        }
        TaskKind::Report(m) => {
            let cfg = ReportConfig {
                fusion: m.fusion,
                tau: m.tau,
                alignment_checksum: m.alignment_checksum,
                index_x_checksum: m.index_x_checksum,
                index_r_checksum: m.index_r_checksum,
            };
            (
                1u8,
                m.z_enc,
                serde_json::to_vec(&cfg).map_err(|e| Error::format(0, e.to_string()))?,
                m.params(),
            )
        }
    };
    buf.push(tag);
    buf.extend_from_slice(&[0u8; 3]);
    buf.extend_from_slice(&(z_enc as u32).to_le_bytes());
    buf.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&config_json);
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

pub fn load_task_model(path: &Path) -> Result<(TaskKind, Provenance)> {
    let buf = fs::read(path)?;
    let mut r = Reader::new(&buf);
    if r.bytes(4)? != MAGIC {
        return Err(Error::format(0, "bad magic, expected XTSK"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let tag = r.u8()?;
    r.bytes(3)?;
    let z_enc = r.u32()? as usize;
    let cfg_at = r.offset;
    let cfg_len = r.u32()? as usize;
    let cfg_bytes = r.bytes(cfg_len)?;

    let kind = match tag {
        0 => {
            let cfg: ClassifyConfig = serde_json::from_slice(cfg_bytes)
                .map_err(|e| Error::format(cfg_at as u64, format!("bad config json: {e}")))?;
            let blocks = match &cfg.fusion {
                Some(f) => FusionBlocks::new(f, z_enc, 0)?,
                None => FusionBlocks {
                    intra: None,
                    inter: None,
                },
            };
            let input_dim = cfg.fusion.map(|f| f.output_dim(z_enc)).unwrap_or(z_enc);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut model = TaskModel {
                z_enc,
                fusion: cfg.fusion,
                blocks,
                head: ClassifierHead::new(input_dim, &mut rng),
                neighbor_mode: cfg.neighbor_mode,
                random_seed: cfg.random_seed,
                alignment_checksum: cfg.alignment_checksum,
                index_x_checksum: cfg.index_x_checksum,
                index_r_checksum: cfg.index_r_checksum,
            };
            let n_params = r.u32()? as usize;
            fill_params(&mut r, n_params, &mut model.params_mut())?;
            TaskKind::Classify(model)
        }
        1 => {
            let cfg: ReportConfig = serde_json::from_slice(cfg_bytes)
                .map_err(|e| Error::format(cfg_at as u64, format!("bad config json: {e}")))?;
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut model = ReportRetrievalModel {
                z_enc,
                fusion: cfg.fusion,
                blocks: FusionBlocks::new(&cfg.fusion, z_enc, 0)?,
                query_map: Linear::new("query_map", cfg.fusion.output_dim(z_enc), z_enc, &mut rng),
                tau: cfg.tau,
                alignment_checksum: cfg.alignment_checksum,
                index_x_checksum: cfg.index_x_checksum,
                index_r_checksum: cfg.index_r_checksum,
            };
            let n_params = r.u32()? as usize;
            fill_params(&mut r, n_params, &mut model.params_mut())?;
            TaskKind::Report(model)
        }
        other => return Err(Error::format(8, format!("unknown task kind {other}"))),
    };

    let meta_at = r.offset;
    let meta_len = r.u32()? as usize;
    let provenance: Provenance = serde_json::from_slice(r.bytes(meta_len)?)
        .map_err(|e| Error::format(meta_at as u64, format!("bad meta json: {e}")))?;
    Ok((kind, provenance))
}
