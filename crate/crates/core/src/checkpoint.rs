//! Versioned checkpoint files and streamlined warmstart.
//!
//! File layout:
//!
//! ```text
//! bytes 0..8    magic "CVRCKPT1"
//! bytes 8..12   u32 LE header length H
//! bytes 12..12+H  UTF-8 JSON header
//! padding       zero bytes to the next multiple of 8
//! payload       tensor values, f64 little-endian, back-to-back;
//!               each tensor starts at the 8-byte-aligned offset listed
//!               in the header directory (relative to payload start)
//! ```
//!
//! The header carries the schema fingerprint (and text), the model
//! config, normalization stats, training metadata, and the tensor
//! directory, so compatibility is decided before any value is read.
//!
//! Warmstart: when the source checkpoint's schema fingerprint matches,
//! every entry is copied bit-exactly. When schemas differ, everything
//! behind the input projection is copied and only the projection (any
//! `input_proj` component, per ensemble sub-backbone) is freshly
//! initialized; embedding tables and normalization stats carry over for
//! surviving features. A backbone/head shape mismatch refuses the
//! warmstart outright.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{EmbeddingTables, FeatureSchema, NormStats};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CVRCKPT1";
pub const FORMAT_VERSION: u32 = 1;

/// Prefix under which embedding tables are stored in the directory.
const TABLE_PREFIX: &str = "features/";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset relative to payload start; multiple of 8.
    offset: u64,
    /// Number of f64 values.
    len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    version: u32,
    schema_fingerprint: u64,
    schema_text: String,
    config_digest: u64,
    model_config: ModelConfig,
    norm_stats: NormStats,
    meta: Meta,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Meta {
    pub steps: u64,
    pub seed: u64,
}

/// A parsed checkpoint: header fields plus the ordered tensor map.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub schema_fingerprint: u64,
    pub schema_text: String,
    pub config_digest: u64,
    pub model_config: ModelConfig,
    pub norm_stats: NormStats,
    pub meta: Meta,
    names: Vec<String>,
    tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn schema(&self) -> Result<FeatureSchema> {
        let schema = FeatureSchema::from_text(&self.schema_text)?;
        if schema.fingerprint() != self.schema_fingerprint {
            return Err(Error::format("checkpoint schema text does not match its fingerprint"));
        }
        Ok(schema)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Rebuild the full model recorded in this checkpoint.
    pub fn into_model(self) -> Result<Model> {
        let schema = self.schema()?;
        let mut params = ParamStore::new();
        let mut tables = BTreeMap::new();
        for name in &self.names {
            let t = self.tensors[name].clone();
            if let Some(feat) = table_feature_name(name) {
                tables.insert(feat.to_string(), t);
            } else {
                params.insert(name.clone(), t);
            }
        }
        Ok(Model {
            schema,
            config: self.model_config,
            params,
            tables: EmbeddingTables::from_map(tables),
            stats: self.norm_stats,
        })
    }
}

fn table_feature_name(entry: &str) -> Option<&str> {
    entry
        .strip_prefix(TABLE_PREFIX)
        .and_then(|rest| rest.strip_suffix("/table"))
}

fn is_input_projection(name: &str) -> bool {
    name.split('/').any(|seg| seg == "input_proj")
}

/// Serialize a model (+ run metadata) to `path`.
pub fn save(path: &Path, model: &Model, config_digest: u64, meta: Meta) -> Result<()> {
    // directory order: embedding tables in schema order, then weights in
    // parameter-store order
    let mut entries: Vec<(String, &Tensor)> = Vec::new();
    for spec in model.schema.specs() {
        if let Ok(t) = model.tables.get(&spec.name) {
            entries.push((format!("{TABLE_PREFIX}{}/table", spec.name), t));
        }
    }
    for (name, t) in model.params.iter() {
        entries.push((name.to_string(), t));
    }

    let mut dir = Vec::with_capacity(entries.len());
    let mut offset = 0u64;
    for (name, t) in &entries {
        dir.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            len: t.numel() as u64,
        });
        offset += t.numel() as u64 * 8;
    }

    let header = Header {
        version: FORMAT_VERSION,
        schema_fingerprint: model.schema.fingerprint(),
        schema_text: model.schema.to_text(),
        config_digest,
        model_config: model.config.clone(),
        norm_stats: model.stats.clone(),
        meta,
        tensors: dir,
    };
    let header_json = serde_json::to_vec(&header).expect("serializable header");

    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_all(&(header_json.len() as u32).to_le_bytes())?;
    f.write_all(&header_json)?;
    let pos = MAGIC.len() + 4 + header_json.len();
    let pad = (8 - pos % 8) % 8;
    f.write_all(&vec![0u8; pad])?;
    for (_, t) in &entries {
        for v in t.data() {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

/// Read and parse a checkpoint file.
pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::format(format!("bad checkpoint magic {magic:02x?}")));
    }
    let mut len_bytes = [0u8; 4];
    f.read_exact(&mut len_bytes)?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_json = vec![0u8; header_len];
    f.read_exact(&mut header_json)?;
    let header: Header = serde_json::from_slice(&header_json)
        .map_err(|e| Error::format(format!("bad checkpoint header: {e}")))?;
    if header.version != FORMAT_VERSION {
        return Err(Error::format(format!(
            "unsupported checkpoint version {}",
            header.version
        )));
    }
    let pos = MAGIC.len() + 4 + header_len;
    let pad = (8 - pos % 8) % 8;
    let mut skip = vec![0u8; pad];
    f.read_exact(&mut skip)?;

    let mut payload = Vec::new();
    f.read_to_end(&mut payload)?;

    let mut names = Vec::with_capacity(header.tensors.len());
    let mut tensors = BTreeMap::new();
    for e in &header.tensors {
        let start = e.offset as usize;
        let end = start + e.len as usize * 8;
        if end > payload.len() {
            return Err(Error::format(format!(
                "tensor {} extends past payload ({} > {})",
                e.name,
                end,
                payload.len()
            )));
        }
        let mut data = Vec::with_capacity(e.len as usize);
        for chunk in payload[start..end].chunks_exact(8) {
            data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        names.push(e.name.clone());
        tensors.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
    }
    Ok(Checkpoint {
        schema_fingerprint: header.schema_fingerprint,
        schema_text: header.schema_text,
        config_digest: header.config_digest,
        model_config: header.model_config,
        norm_stats: header.norm_stats,
        meta: header.meta,
        names,
        tensors,
    })
}

/// Initialize a model for (`new_schema`, `new_config`, `seed`) from a
/// source checkpoint.
pub fn warmstart_load(
    source: &Checkpoint,
    new_schema: FeatureSchema,
    new_config: ModelConfig,
    seed: u64,
) -> Result<Model> {
    let mut fresh = Model::init(new_schema, new_config, seed)?;
    let same_schema = source.schema_fingerprint == fresh.schema.fingerprint();

    // weights behind the projection must match shape-for-shape; anything
    // else is an architecture change warmstart refuses to paper over
    for name in fresh.params.names().to_vec() {
        if !same_schema && is_input_projection(&name) {
            continue; // re-initialize only the initial projection
        }
        match source.tensor(&name) {
            Some(src) if src.shape() == fresh.params.get(&name)?.shape() => {
                *fresh.params.get_mut(&name)? = src.clone();
            }
            Some(src) => {
                return Err(Error::IncompatibleCheckpoint(format!(
                    "parameter {name}: source shape {:?} vs new shape {:?}",
                    src.shape(),
                    fresh.params.get(&name)?.shape()
                )));
            }
            None => {
                return Err(Error::IncompatibleCheckpoint(format!(
                    "parameter {name} missing from source checkpoint"
                )));
            }
        }
    }

    // embedding tables: carry over surviving features (same name+shape);
    // new or resized features keep their fresh tables
    let mut tables = BTreeMap::new();
    for spec in fresh.schema.specs() {
        if let Ok(fresh_t) = fresh.tables.get(&spec.name) {
            let entry = format!("{TABLE_PREFIX}{}/table", spec.name);
            let t = match source.tensor(&entry) {
                Some(src) if src.shape() == fresh_t.shape() => src.clone(),
                _ => fresh_t.clone(),
            };
            tables.insert(spec.name.clone(), t);
        }
    }
    fresh.tables = EmbeddingTables::from_map(tables);

    // normalization stats for surviving features carry over; new features
    // get fresh stats at the next training run
    let mut stats = NormStats::default();
    for spec in fresh.schema.specs() {
        if let Some(ms) = source.norm_stats.stats.get(&spec.name) {
            stats.stats.insert(spec.name.clone(), *ms);
        }
    }
    fresh.stats = stats;
    Ok(fresh)
}
