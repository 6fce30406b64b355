//! Binary index file (XIDX), little-endian throughout.
//!
//! | offset | size  | field                                  |
//! |--------|-------|----------------------------------------|
//! | 0      | 4     | magic `XIDX`                           |
//! | 4      | 4     | u32 version (1)                        |
//! | 8      | 4     | u32 dim                                |
//! | 12     | 8     | u64 entry count                        |
//! | 20     | 1     | u8 target (0=x, 1=r, 2=xr)             |
//! | 21     | 1     | u8 flags (bit 0: ivf params in meta)   |
//! | 22     | 2     | u16 source count                       |
//! | 24     | ...   | sources: per source u32 len + bytes    |
//! | ...    | ...   | entry records (fixed width, below)     |
//! | ...    | ...   | string table: u64 len + bytes          |
//! | ...    | ...   | meta: u32 len + JSON                   |
//!
//! Entry record, fixed width `dim*4 + 28`:
//!
//! | rel. offset | size  | field                               |
//! |-------------|-------|-------------------------------------|
//! | 0           | dim*4 | f32 vector                          |
//! | dim*4       | 2     | u16 label bitmask                   |
//! | dim*4 + 2   | 1     | u8 modality (0=image, 1=report)     |
//! | dim*4 + 3   | 1     | u8 source tag                       |
//! | dim*4 + 4   | 8     | u32 id offset, u32 id length        |
//! | dim*4 + 12  | 8     | u32 pair offset, u32 pair length    |
//! | dim*4 + 20  | 8     | u32 text offset, u32 text length    |
//!
//! Offsets point into the string table; a text length of `u32::MAX`
//! means no text.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::Reader;
use crate::data::{Labels, Modality, Provenance};
use crate::error::{Error, Result};
use crate::index::{IndexEntry, IndexTarget, IvfParams, RetrievalIndex};

const MAGIC: &[u8; 4] = b"XIDX";
const VERSION: u32 = 1;
const NO_TEXT: u32 = u32::MAX;

/// Trailing metadata: provenance plus the optional accelerator
/// configuration (rebuilt deterministically on load).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct IndexMeta {
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ivf: Option<IvfParams>,
}

pub fn save_index(index: &RetrievalIndex, path: &Path, provenance: &Provenance) -> Result<()> {
    index.validate()?;
    let dim = index.dim;
    let mut strings: Vec<u8> = Vec::new();
    let intern = |s: &str, strings: &mut Vec<u8>| -> (u32, u32) {
        let off = strings.len() as u32;
        strings.extend_from_slice(s.as_bytes());
        (off, s.len() as u32)
    };

    let mut body: Vec<u8> = Vec::with_capacity(index.entries.len() * (dim * 4 + 28));
    for e in &index.entries {
        for v in &e.vector {
            body.extend_from_slice(&v.to_le_bytes());
        }
        body.extend_from_slice(&e.labels.to_mask().to_le_bytes());
        body.push(match e.modality {
            Modality::Image => 0,
            Modality::Report => 1,
        });
        body.push(e.source);
        let (id_off, id_len) = intern(&e.id, &mut strings);
        body.extend_from_slice(&id_off.to_le_bytes());
        body.extend_from_slice(&id_len.to_le_bytes());
        let (p_off, p_len) = intern(&e.pair_id, &mut strings);
        body.extend_from_slice(&p_off.to_le_bytes());
        body.extend_from_slice(&p_len.to_le_bytes());
        match &e.text {
            Some(t) => {
                let (t_off, t_len) = intern(t, &mut strings);
                body.extend_from_slice(&t_off.to_le_bytes());
                body.extend_from_slice(&t_len.to_le_bytes());
            }
            None => {
                body.extend_from_slice(&0u32.to_le_bytes());
                body.extend_from_slice(&NO_TEXT.to_le_bytes());
            }
        }
    }

    let meta = IndexMeta {
        provenance: provenance.clone(),
        ivf: index.ivf_params(),
    };
    let meta_json = serde_json::to_vec(&meta).map_err(|e| Error::format(0, e.to_string()))?;

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    buf.extend_from_slice(&(index.entries.len() as u64).to_le_bytes());
    buf.push(index.target.tag());
    buf.push(if meta.ivf.is_some() { 1 } else { 0 });
    buf.extend_from_slice(&(index.sources.len() as u16).to_le_bytes());
    for s in &index.sources {
        buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
        buf.extend_from_slice(s.as_bytes());
    }
    buf.extend_from_slice(&body);
    buf.extend_from_slice(&(strings.len() as u64).to_le_bytes());
    buf.extend_from_slice(&strings);
    buf.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&meta_json);
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_index(path: &Path) -> Result<(RetrievalIndex, IndexMeta)> {
    let buf = fs::read(path)?;
    let mut r = Reader::new(&buf);
    if r.bytes(4)? != MAGIC {
        return Err(Error::format(0, "bad magic, expected XIDX"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let dim = r.u32()? as usize;
    let count = r.u64()? as usize;
    let target = IndexTarget::from_tag(r.u8()?)?;
    let flags = r.u8()?;
    let n_sources = r.u16()? as usize;
    let mut sources = Vec::with_capacity(n_sources);
    for _ in 0..n_sources {
        let at = r.offset;
        let len = r.u32()? as usize;
        let s = String::from_utf8(r.bytes(len)?.to_vec())
            .map_err(|_| Error::format(at as u64, "source name is not utf-8"))?;
        sources.push(s);
    }

    struct RawEntry {
        vector: Vec<f32>,
        mask: u16,
        modality: Modality,
        source: u8,
        id: (u32, u32),
        pair: (u32, u32),
        text: (u32, u32),
    }
    let mut raw = Vec::with_capacity(count);
    for _ in 0..count {
        let mut vector = Vec::with_capacity(dim);
        for _ in 0..dim {
            vector.push(r.f32()?);
        }
        let mask = r.u16()?;
        let at = r.offset;
        let modality = match r.u8()? {
            0 => Modality::Image,
            1 => Modality::Report,
            other => {
                return Err(Error::format(at as u64, format!("bad modality tag {other}")))
            }
        };
        let source = r.u8()?;
        raw.push(RawEntry {
            vector,
            mask,
            modality,
            source,
            id: (r.u32()?, r.u32()?),
            pair: (r.u32()?, r.u32()?),
            text: (r.u32()?, r.u32()?),
        });
    }
    let strings_at = r.offset;
    let strings_len = r.u64()? as usize;
    let strings = r.bytes(strings_len)?;
    let fetch = |(off, len): (u32, u32)| -> Result<String> {
        let (off, len) = (off as usize, len as usize);
        if off + len > strings.len() {
            return Err(Error::format(
                strings_at as u64,
                format!("string reference {off}+{len} beyond table of {}", strings.len()),
            ));
        }
        String::from_utf8(strings[off..off + len].to_vec())
            .map_err(|_| Error::format(strings_at as u64, "string table entry is not utf-8"))
    };

    let mut entries = Vec::with_capacity(count);
    for e in raw {
        entries.push(IndexEntry {
            id: fetch(e.id)?,
            pair_id: fetch(e.pair)?,
            vector: e.vector,
            labels: Labels::from_mask(e.mask),
            text: if e.text.1 == NO_TEXT {
                None
            } else {
                Some(fetch(e.text)?)
            },
            modality: e.modality,
            source: e.source,
        });
    }

    let meta_at = r.offset;
    let meta_len = r.u32()? as usize;
    let meta: IndexMeta = serde_json::from_slice(r.bytes(meta_len)?)
        .map_err(|e| Error::format(meta_at as u64, format!("bad meta json: {e}")))?;

    let mut index = RetrievalIndex {
        target,
        dim,
        entries,
        sources,
        ivf: None,
    };
    index.validate()?;
    if flags & 1 == 1 {
        if let Some(params) = meta.ivf {
            index.enable_ivf(params)?;
        }
    }
    Ok((index, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::Embedder;
    use crate::data::{generate_synthetic, SyntheticConfig};
    use crate::index::build_index;

    fn prov() -> Provenance {
        Provenance {
            tool_version: crate::TOOL_VERSION.to_string(),
            config_hash: "cafe".into(),
            seed: 3,
        }
    }

    fn sample_index() -> RetrievalIndex {
        let ds = generate_synthetic(&SyntheticConfig {
            n_pairs: 40,
            z_enc: 16,
            ..Default::default()
        })
        .unwrap();
        build_index(Embedder::Identity, &ds, IndexTarget::XR).unwrap()
    }

    #[test]
    fn roundtrip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ix.xidx");
        let ix = sample_index();
        save_index(&ix, &path, &prov()).unwrap();
        let (loaded, meta) = load_index(&path).unwrap();
        assert_eq!(loaded.entries, ix.entries);
        assert_eq!(loaded.sources, ix.sources);
        assert_eq!(loaded.target, ix.target);
        assert_eq!(meta.provenance, prov());

        // Save twice -> identical bytes.
        let path2 = dir.path().join("ix2.xidx");
        save_index(&loaded, &path2, &prov()).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn queries_survive_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ix.xidx");
        let ix = sample_index();
        let q = ix.entries[9].vector.clone();
        let before = ix.query(&q, 5, None).unwrap();
        save_index(&ix, &path, &prov()).unwrap();
        let (loaded, _) = load_index(&path).unwrap();
        let after = loaded.query(&q, 5, None).unwrap();
        let ids = |s: &crate::index::NeighborSet| {
            s.neighbors.iter().map(|n| n.id.clone()).collect::<Vec<_>>()
        };
        assert_eq!(ids(&before), ids(&after));
        for (a, b) in before.neighbors.iter().zip(after.neighbors.iter()) {
            assert_eq!(a.similarity, b.similarity);
        }
    }

    #[test]
    fn corrupted_header_names_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ix.xidx");
        save_index(&sample_index(), &path, &prov()).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'?';
        fs::write(&path, &bytes).unwrap();
        let err = load_index(&path).unwrap_err().to_string();
        assert!(err.contains("offset 0"), "{err}");

        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X'; // restore magic, corrupt version
        bytes[4] = 9;
        fs::write(&path, &bytes).unwrap();
        let err = load_index(&path).unwrap_err().to_string();
        assert!(err.contains("offset 4"), "{err}");
    }

    #[test]
    fn truncation_names_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ix.xidx");
        save_index(&sample_index(), &path, &prov()).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..40]).unwrap();
        let err = load_index(&path).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
    }

    #[test]
    fn ivf_flag_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ix.xidx");
        let mut ix = sample_index();
        ix.enable_ivf(IvfParams {
            n_lists: 6,
            n_probe: 3,
        })
        .unwrap();
        save_index(&ix, &path, &prov()).unwrap();
        let (loaded, meta) = load_index(&path).unwrap();
        assert_eq!(
            meta.ivf,
            Some(IvfParams {
                n_lists: 6,
                n_probe: 3
            })
        );
        assert_eq!(loaded.ivf_params(), ix.ivf_params());
    }
}
