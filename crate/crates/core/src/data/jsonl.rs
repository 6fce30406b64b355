//! JSONL record file plus TOML manifest, with canonical (byte-stable)
//! serialization.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, EmbeddingRecord, Modality, PairedSample};
use crate::error::{Error, Result};

/// Run provenance embedded in every artifact.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
pub struct Provenance {
    pub tool_version: String,
    pub config_hash: String,
    pub seed: u64,
}

/// TOML manifest naming the record file and the label space.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub name: String,
    pub records: String,
    pub z_enc: usize,
    pub class_names: Vec<String>,
    #[serde(default)]
    pub provenance: Option<Provenance>,
}

/// Load a dataset from its TOML manifest; validates every invariant.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let raw = fs::read_to_string(manifest_path)?;
    let manifest: Manifest = toml::from_str(&raw).map_err(|e| Error::Parse {
        line: 0,
        message: format!("manifest {}: {e}", manifest_path.display()),
    })?;
    let records_path = resolve_sibling(manifest_path, &manifest.records);
    let records = load_jsonl(&records_path)?;
    let dataset = assemble(
        manifest.name.clone(),
        manifest.z_enc,
        manifest.class_names.clone(),
        records,
    )?;
    dataset.validate()?;
    Ok(dataset)
}

fn resolve_sibling(manifest_path: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest_path.parent().unwrap_or(Path::new(".")).join(p)
    }
}

/// Wire form of a record: labels arrive as a plain array so a wrong
/// length can be reported against the record id instead of as an
/// opaque parse failure.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    id: String,
    pair_id: String,
    modality: Modality,
    vector: Vec<f32>,
    labels: Vec<u8>,
    text: Option<String>,
    split: crate::data::Split,
}

impl RawRecord {
    fn into_record(self) -> Result<EmbeddingRecord> {
        if self.labels.len() != crate::NUM_CLASSES {
            return Err(Error::validation(
                &self.id,
                format!("labels length {} != {}", self.labels.len(), crate::NUM_CLASSES),
            ));
        }
        let labels = crate::data::Labels::from_slice(&self.labels)?;
        Ok(EmbeddingRecord {
            id: self.id,
            pair_id: self.pair_id,
            modality: self.modality,
            vector: self.vector,
            labels,
            text: self.text,
            split: self.split,
        })
    }
}

/// Parse one record per line; errors carry the 1-based line number.
pub fn load_jsonl(path: &Path) -> Result<Vec<EmbeddingRecord>> {
    let file = fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push(raw.into_record()?);
    }
    if records.is_empty() {
        return Err(Error::Empty {
            what: format!("{}: no records", path.display()),
        });
    }
    Ok(records)
}

/// Group flat records into pairs and wrap them in a Dataset.
pub fn assemble(
    name: String,
    z_enc: usize,
    class_names: Vec<String>,
    records: Vec<EmbeddingRecord>,
) -> Result<Dataset> {
    let mut by_pair: BTreeMap<String, Vec<EmbeddingRecord>> = BTreeMap::new();
    for rec in records {
        by_pair.entry(rec.pair_id.clone()).or_default().push(rec);
    }
    let mut pairs = Vec::with_capacity(by_pair.len());
    for (pair_id, mut members) in by_pair {
        if members.len() != 2 {
            return Err(Error::validation(
                &pair_id,
                format!("expected 2 records per pair, found {}", members.len()),
            ));
        }
        members.sort_by_key(|r| r.modality == Modality::Report);
        let report = members.pop().expect("two members");
        let image = members.pop().expect("two members");
        if image.modality != Modality::Image || report.modality != Modality::Report {
            return Err(Error::validation(
                &pair_id,
                "pair must contain one image and one report record",
            ));
        }
        let labels = image.labels;
        pairs.push(PairedSample {
            pair_id,
            image,
            report,
            labels,
        });
    }
    Ok(Dataset {
        name,
        pairs,
        class_names,
        z_enc,
    })
}

/// Write the dataset as canonical JSONL plus a TOML manifest.
///
/// Canonical form: pairs sorted by pair_id, image line before report
/// line, fixed JSON field order. Re-saving a loaded dataset reproduces
/// the bytes exactly.
pub fn save_dataset(
    dataset: &Dataset,
    manifest_path: &Path,
    records_name: &str,
    provenance: Option<Provenance>,
) -> Result<()> {
    let records_path = resolve_sibling(manifest_path, records_name);
    let mut sorted: Vec<&PairedSample> = dataset.pairs.iter().collect();
    sorted.sort_by(|a, b| a.pair_id.cmp(&b.pair_id));

    let mut out = Vec::new();
    for pair in sorted {
        serde_json::to_writer(&mut out, &pair.image).map_err(io_of_json)?;
        out.push(b'\n');
        serde_json::to_writer(&mut out, &pair.report).map_err(io_of_json)?;
        out.push(b'\n');
    }
    fs::File::create(&records_path)?.write_all(&out)?;

    let manifest = Manifest {
        name: dataset.name.clone(),
        records: records_name.to_string(),
        z_enc: dataset.z_enc,
        class_names: dataset.class_names.clone(),
        provenance,
    };
    let toml_text = toml::to_string_pretty(&manifest).map_err(|e| Error::Parse {
        line: 0,
        message: format!("manifest serialization: {e}"),
    })?;
    fs::write(manifest_path, toml_text)?;
    Ok(())
}

fn io_of_json(e: serde_json::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}
