//! Feature extraction: raw heterogeneous inputs to the dense vector x0.
//!
//! Four feature kinds are supported:
//! - numerical: standardized value plus log1p, two floats;
//! - categorical: hashed embedding lookup (hashing trick, modulus =
//!   vocabulary size);
//! - text: character n-grams, hashed, mean-pooled over gram embeddings;
//! - sequential: most-recent-first key list, hashed, mean-pooled.
//!
//! Missing values never produce NaN: numericals encode to zeros, a
//! categorical looks up a dedicated `unseen` row stored at index
//! `vocab_size` (tables carry `vocab_size + 1` rows), and empty text or
//! key lists pool to the zero vector.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::hash::{fnv1a, hash_index, Fnv1a};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Kind and kind-specific parameters of one feature.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FeatureKind {
    Numerical,
    Categorical { vocab_size: u64, embed_dim: usize },
    Text { ngram_n: usize, vocab_size: u64, embed_dim: usize },
    Sequential { max_len: usize, embed_dim: usize },
}

impl FeatureKind {
    /// Width this feature contributes to x0.
    pub fn width(&self) -> usize {
        match self {
            FeatureKind::Numerical => 2,
            FeatureKind::Categorical { embed_dim, .. }
            | FeatureKind::Text { embed_dim, .. }
            | FeatureKind::Sequential { embed_dim, .. } => *embed_dim,
        }
    }

    fn validate(&self, name: &str) -> Result<()> {
        let ok = match self {
            FeatureKind::Numerical => true,
            FeatureKind::Categorical { vocab_size, embed_dim } => *vocab_size >= 1 && *embed_dim >= 1,
            FeatureKind::Text { ngram_n, vocab_size, embed_dim } => {
                *ngram_n >= 1 && *vocab_size >= 1 && *embed_dim >= 1
            }
            FeatureKind::Sequential { max_len, embed_dim } => *max_len >= 1 && *embed_dim >= 1,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::schema(format!("feature {name}: invalid parameters {self:?}")))
        }
    }
}

/// One named feature in a schema.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FeatureKind,
}

/// Ordered feature declaration. Order defines the layout of x0 and of
/// serialized records. Serializes as its canonical text form.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct FeatureSchema {
    specs: Vec<FeatureSpec>,
}

impl From<FeatureSchema> for String {
    fn from(s: FeatureSchema) -> String {
        s.to_text()
    }
}

impl TryFrom<String> for FeatureSchema {
    type Error = Error;
    fn try_from(text: String) -> Result<FeatureSchema> {
        FeatureSchema::from_text(&text)
    }
}

impl FeatureSchema {
    pub fn new(specs: Vec<FeatureSpec>) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for s in &specs {
            s.kind.validate(&s.name)?;
            if s.name.is_empty() || s.name.contains(char::is_whitespace) || s.name.contains(',') {
                return Err(Error::schema(format!("invalid feature name {:?}", s.name)));
            }
            if !seen.insert(s.name.clone()) {
                return Err(Error::schema(format!("duplicate feature name {}", s.name)));
            }
        }
        Ok(FeatureSchema { specs })
    }

    pub fn specs(&self) -> &[FeatureSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.specs
            .iter()
            .position(|s| s.name == name)
            .ok_or_else(|| Error::schema(format!("unknown feature name {name}")))
    }

    /// Total x0 width; a pure function of the schema.
    pub fn total_width(&self) -> usize {
        self.specs.iter().map(|s| s.kind.width()).sum()
    }

    /// Column range of `name` inside x0.
    pub fn slice_of(&self, name: &str) -> Result<std::ops::Range<usize>> {
        let mut off = 0;
        for s in &self.specs {
            let w = s.kind.width();
            if s.name == name {
                return Ok(off..off + w);
            }
            off += w;
        }
        Err(Error::schema(format!("unknown feature name {name}")))
    }

    /// Canonical text form: one `name kind param=value ...` line per
    /// feature, `\n`-separated, trailing newline.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for s in &self.specs {
            match &s.kind {
                FeatureKind::Numerical => {
                    let _ = writeln!(out, "{} numerical", s.name);
                }
                FeatureKind::Categorical { vocab_size, embed_dim } => {
                    let _ = writeln!(
                        out,
                        "{} categorical vocab_size={vocab_size} embed_dim={embed_dim}",
                        s.name
                    );
                }
                FeatureKind::Text { ngram_n, vocab_size, embed_dim } => {
                    let _ = writeln!(
                        out,
                        "{} text ngram_n={ngram_n} vocab_size={vocab_size} embed_dim={embed_dim}",
                        s.name
                    );
                }
                FeatureKind::Sequential { max_len, embed_dim } => {
                    let _ = writeln!(
                        out,
                        "{} sequential max_len={max_len} embed_dim={embed_dim}",
                        s.name
                    );
                }
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut specs = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let name = parts
                .next()
                .ok_or_else(|| Error::schema(format!("line {}: missing name", lineno + 1)))?
                .to_string();
            let kind_word = parts
                .next()
                .ok_or_else(|| Error::schema(format!("line {}: missing kind", lineno + 1)))?;
            let mut params: BTreeMap<&str, u64> = BTreeMap::new();
            for p in parts {
                let (k, v) = p
                    .split_once('=')
                    .ok_or_else(|| Error::schema(format!("line {}: bad param {p}", lineno + 1)))?;
                let v: u64 = v
                    .parse()
                    .map_err(|_| Error::schema(format!("line {}: bad value {p}", lineno + 1)))?;
                params.insert(k, v);
            }
            let get = |key: &str| -> Result<u64> {
                params
                    .get(key)
                    .copied()
                    .ok_or_else(|| Error::schema(format!("line {}: missing {key}", lineno + 1)))
            };
            let kind = match kind_word {
                "numerical" => FeatureKind::Numerical,
                "categorical" => FeatureKind::Categorical {
                    vocab_size: get("vocab_size")?,
                    embed_dim: get("embed_dim")? as usize,
                },
                "text" => FeatureKind::Text {
                    ngram_n: get("ngram_n")? as usize,
                    vocab_size: get("vocab_size")?,
                    embed_dim: get("embed_dim")? as usize,
                },
                "sequential" => FeatureKind::Sequential {
                    max_len: get("max_len")? as usize,
                    embed_dim: get("embed_dim")? as usize,
                },
                other => {
                    return Err(Error::schema(format!("line {}: unknown kind {other}", lineno + 1)))
                }
            };
            specs.push(FeatureSpec { name, kind });
        }
        FeatureSchema::new(specs)
    }

    /// FNV-1a digest of the canonical serialization. Changes iff any spec
    /// (name, kind, parameter, or order) changes.
    pub fn fingerprint(&self) -> u64 {
        fnv1a(self.to_text().as_bytes())
    }

    /// Keep only the named subset, in this schema's order.
    pub fn project(&self, names: &[&str]) -> Result<FeatureSchema> {
        for n in names {
            self.index_of(n)?;
        }
        let specs = self
            .specs
            .iter()
            .filter(|s| names.contains(&s.name.as_str()))
            .cloned()
            .collect();
        FeatureSchema::new(specs)
    }
}

/// One raw feature value. `Missing` is legal for every kind.
#[derive(Debug, Clone, PartialEq)]
pub enum FeatureValue {
    Missing,
    Numerical(f64),
    Categorical(u64),
    Text(String),
    Sequential(Vec<u64>),
}

/// Raw features of one query-item example, ordered per its schema.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub values: Vec<FeatureValue>,
}

impl FeatureRecord {
    pub fn validate(&self, schema: &FeatureSchema) -> Result<()> {
        if self.values.len() != schema.len() {
            return Err(Error::schema(format!(
                "record has {} values, schema has {} features",
                self.values.len(),
                schema.len()
            )));
        }
        for (v, s) in self.values.iter().zip(schema.specs()) {
            let ok = matches!(
                (v, &s.kind),
                (FeatureValue::Missing, _)
                    | (FeatureValue::Numerical(_), FeatureKind::Numerical)
                    | (FeatureValue::Categorical(_), FeatureKind::Categorical { .. })
                    | (FeatureValue::Text(_), FeatureKind::Text { .. })
                    | (FeatureValue::Sequential(_), FeatureKind::Sequential { .. })
            );
            if !ok {
                return Err(Error::schema(format!(
                    "feature {}: value kind {:?} does not match schema",
                    s.name, v
                )));
            }
        }
        Ok(())
    }

    /// Re-order / subset values from `from` schema onto `to` schema.
    pub fn project(&self, from: &FeatureSchema, to: &FeatureSchema) -> Result<FeatureRecord> {
        let mut values = Vec::with_capacity(to.len());
        for spec in to.specs() {
            let i = from.index_of(&spec.name)?;
            values.push(self.values[i].clone());
        }
        Ok(FeatureRecord { values })
    }
}

/// Per-numerical-feature mean and (floored) standard deviation, estimated
/// on the training split and frozen into the checkpoint.
#[derive(Debug, Clone, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct NormStats {
    pub stats: BTreeMap<String, (f64, f64)>,
}

pub const STD_FLOOR: f64 = 1e-8;

impl NormStats {
    /// Estimate over every non-missing numerical value in `records`.
    pub fn estimate<'a>(
        schema: &FeatureSchema,
        records: impl Iterator<Item = &'a FeatureRecord>,
    ) -> NormStats {
        let mut acc: BTreeMap<String, (f64, f64, u64)> = BTreeMap::new();
        for spec in schema.specs() {
            if matches!(spec.kind, FeatureKind::Numerical) {
                acc.insert(spec.name.clone(), (0.0, 0.0, 0));
            }
        }
        for r in records {
            for (v, spec) in r.values.iter().zip(schema.specs()) {
                if let (FeatureValue::Numerical(x), FeatureKind::Numerical) = (v, &spec.kind) {
                    let e = acc.get_mut(&spec.name).unwrap();
                    e.0 += x;
                    e.1 += x * x;
                    e.2 += 1;
                }
            }
        }
        let stats = acc
            .into_iter()
            .map(|(name, (s, s2, n))| {
                if n == 0 {
                    (name, (0.0, STD_FLOOR.max(1.0)))
                } else {
                    let mean = s / n as f64;
                    let var = (s2 / n as f64 - mean * mean).max(0.0);
                    (name, (mean, var.sqrt().max(STD_FLOOR)))
                }
            })
            .collect();
        NormStats { stats }
    }

    pub fn get(&self, name: &str) -> Result<(f64, f64)> {
        self.stats
            .get(name)
            .copied()
            .ok_or_else(|| Error::schema(format!("no normalization stats for feature {name}")))
    }
}

/// Hash a text n-gram to a row index.
fn gram_index(gram: &str, vocab_size: u64) -> u64 {
    fnv1a(gram.as_bytes()) % vocab_size
}

/// Embedding tables for every embedded feature of a schema. Each table has
/// `vocab_size + 1` rows; the extra last row is the `unseen` placeholder a
/// missing categorical resolves to.
#[derive(Debug, Clone)]
pub struct EmbeddingTables {
    tables: BTreeMap<String, Tensor>,
}

impl EmbeddingTables {
    /// Deterministically derive all tables from `(seed, feature name)`, so
    /// resizing one feature never perturbs another.
    pub fn init(schema: &FeatureSchema, seed: u64) -> EmbeddingTables {
        let mut tables = BTreeMap::new();
        for spec in schema.specs() {
            let (vocab, dim) = match spec.kind {
                FeatureKind::Numerical => continue,
                FeatureKind::Categorical { vocab_size, embed_dim } => (vocab_size, embed_dim),
                FeatureKind::Text { vocab_size, embed_dim, .. } => (vocab_size, embed_dim),
                FeatureKind::Sequential { embed_dim, .. } => {
                    // keys share the hashing trick; vocabulary comes from
                    // the hash modulus below
                    (SEQUENTIAL_VOCAB, embed_dim)
                }
            };
            let mut rng = Rng::stream(seed, &format!("table/{}", spec.name));
            let rows = (vocab + 1) as usize;
            let std = 1.0 / (dim as f64).sqrt();
            tables.insert(spec.name.clone(), Tensor::randn(vec![rows, dim], std, &mut rng));
        }
        EmbeddingTables { tables }
    }

    pub fn from_map(tables: BTreeMap<String, Tensor>) -> EmbeddingTables {
        EmbeddingTables { tables }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tables
            .get(name)
            .ok_or_else(|| Error::schema(format!("no embedding table for feature {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tables.iter()
    }
}

/// Hash modulus for sequential action keys.
pub const SEQUENTIAL_VOCAB: u64 = 1 << 16;

/// Standardize + log1p encode one numerical value: `[(x - mean) / std,
/// log1p(max(x, 0))]`; missing encodes to `[0, 0]`.
pub fn encode_numerical(x: Option<f64>, mean: f64, std: f64) -> [f64; 2] {
    match x {
        None => [0.0, 0.0],
        Some(x) => [(x - mean) / std, x.max(0.0).ln_1p()],
    }
}

/// Mean-pooled character n-gram embedding of `s`. Strings shorter than
/// `n` (but non-empty) contribute a single whole-string gram; the empty
/// string pools to zero.
pub fn encode_text(s: &str, ngram_n: usize, vocab_size: u64, table: &Tensor, out: &mut [f64]) {
    out.fill(0.0);
    let chars: Vec<char> = s.chars().collect();
    if chars.is_empty() {
        return;
    }
    let dim = table.shape()[1];
    debug_assert_eq!(out.len(), dim);
    let mut count = 0.0;
    let mut add_gram = |gram: &str, out: &mut [f64]| {
        let row = gram_index(gram, vocab_size) as usize;
        let src = &table.data()[row * dim..(row + 1) * dim];
        for (o, &v) in out.iter_mut().zip(src) {
            *o += v;
        }
        count += 1.0;
    };
    if chars.len() < ngram_n {
        add_gram(s, out);
    } else {
        let mut buf = String::new();
        for w in chars.windows(ngram_n) {
            buf.clear();
            buf.extend(w.iter());
            add_gram(&buf, out);
        }
    }
    for o in out.iter_mut() {
        *o /= count;
    }
}

/// Mean-pooled embedding of the most recent `max_len` keys; empty pools
/// to zero (the `unseen` convention for sparse histories).
pub fn encode_sequential(keys: &[u64], max_len: usize, table: &Tensor, out: &mut [f64]) {
    out.fill(0.0);
    if keys.is_empty() {
        return;
    }
    let dim = table.shape()[1];
    debug_assert_eq!(out.len(), dim);
    let start = keys.len().saturating_sub(max_len);
    let recent = &keys[start..];
    for &k in recent {
        let row = hash_index(k, SEQUENTIAL_VOCAB) as usize;
        let src = &table.data()[row * dim..(row + 1) * dim];
        for (o, &v) in out.iter_mut().zip(src) {
            *o += v;
        }
    }
    let inv = 1.0 / recent.len() as f64;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

/// Assemble the concatenated dense input for one record: `[1 x D]`.
pub fn assemble_x0(
    record: &FeatureRecord,
    schema: &FeatureSchema,
    tables: &EmbeddingTables,
    stats: &NormStats,
) -> Result<Tensor> {
    let mut out = vec![0.0; schema.total_width()];
    fill_x0(record, schema, tables, stats, &mut out)?;
    Tensor::new(vec![1, schema.total_width()], out)
}

/// Assemble a batch of records into `[n x D]` (row per record).
pub fn assemble_matrix(
    records: &[FeatureRecord],
    schema: &FeatureSchema,
    tables: &EmbeddingTables,
    stats: &NormStats,
) -> Result<Tensor> {
    let d = schema.total_width();
    let mut out = vec![0.0; records.len() * d];
    for (r, rec) in records.iter().enumerate() {
        fill_x0(rec, schema, tables, stats, &mut out[r * d..(r + 1) * d])?;
    }
    Tensor::new(vec![records.len(), d], out)
}

fn fill_x0(
    record: &FeatureRecord,
    schema: &FeatureSchema,
    tables: &EmbeddingTables,
    stats: &NormStats,
    out: &mut [f64],
) -> Result<()> {
    record.validate(schema)?;
    let mut off = 0;
    for (value, spec) in record.values.iter().zip(schema.specs()) {
        match &spec.kind {
            FeatureKind::Numerical => {
                let (mean, std) = stats.get(&spec.name)?;
                let x = match value {
                    FeatureValue::Numerical(x) => Some(*x),
                    FeatureValue::Missing => None,
                    _ => unreachable!("validated"),
                };
                let enc = encode_numerical(x, mean, std);
                out[off] = enc[0];
                out[off + 1] = enc[1];
                off += 2;
            }
            FeatureKind::Categorical { vocab_size, embed_dim } => {
                let table = tables.get(&spec.name)?;
                let row = match value {
                    FeatureValue::Categorical(key) => hash_index(*key, *vocab_size) as usize,
                    FeatureValue::Missing => *vocab_size as usize, // unseen row
                    _ => unreachable!("validated"),
                };
                out[off..off + embed_dim]
                    .copy_from_slice(&table.data()[row * embed_dim..(row + 1) * embed_dim]);
                off += embed_dim;
            }
            FeatureKind::Text { ngram_n, vocab_size, embed_dim } => {
                let table = tables.get(&spec.name)?;
                let s = match value {
                    FeatureValue::Text(s) => s.as_str(),
                    FeatureValue::Missing => "",
                    _ => unreachable!("validated"),
                };
                encode_text(s, *ngram_n, *vocab_size, table, &mut out[off..off + embed_dim]);
                off += embed_dim;
            }
            FeatureKind::Sequential { max_len, embed_dim } => {
                let table = tables.get(&spec.name)?;
                let empty: Vec<u64> = Vec::new();
                let keys = match value {
                    FeatureValue::Sequential(keys) => keys,
                    FeatureValue::Missing => &empty,
                    _ => unreachable!("validated"),
                };
                encode_sequential(keys, *max_len, table, &mut out[off..off + embed_dim]);
                off += embed_dim;
            }
        }
    }
    debug_assert_eq!(off, out.len());
    Ok(())
}

/// Digest of an embedding-table set (used in reproducibility checks).
pub fn tables_digest(tables: &EmbeddingTables) -> u64 {
    let mut h = Fnv1a::new();
    for (name, t) in tables.iter() {
        h.write(name.as_bytes());
        for d in t.shape() {
            h.write(&(*d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.write(&v.to_le_bytes());
        }
    }
    h.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn demo_schema() -> FeatureSchema {
        FeatureSchema::new(vec![
            FeatureSpec {
                name: "price".into(),
                kind: FeatureKind::Numerical,
            },
            FeatureSpec {
                name: "category".into(),
                kind: FeatureKind::Categorical { vocab_size: 50, embed_dim: 8 },
            },
            FeatureSpec {
                name: "title".into(),
                kind: FeatureKind::Text { ngram_n: 3, vocab_size: 200, embed_dim: 8 },
            },
            FeatureSpec {
                name: "recent".into(),
                kind: FeatureKind::Sequential { max_len: 4, embed_dim: 8 },
            },
        ])
        .unwrap()
    }

    #[test]
    fn schema_text_roundtrip_and_fingerprint() {
        let s = demo_schema();
        let text = s.to_text();
        let back = FeatureSchema::from_text(&text).unwrap();
        assert_eq!(s, back);
        assert_eq!(s.fingerprint(), back.fingerprint());

        // any spec change changes the fingerprint
        let mut specs = s.specs().to_vec();
        specs[1].kind = FeatureKind::Categorical { vocab_size: 51, embed_dim: 8 };
        let changed = FeatureSchema::new(specs).unwrap();
        assert_ne!(s.fingerprint(), changed.fingerprint());
    }

    #[test]
    fn schema_rejects_duplicates() {
        let r = FeatureSchema::new(vec![
            FeatureSpec { name: "a".into(), kind: FeatureKind::Numerical },
            FeatureSpec { name: "a".into(), kind: FeatureKind::Numerical },
        ]);
        assert!(r.is_err());
    }

    #[test]
    fn width_rules() {
        let one_num = FeatureSchema::new(vec![FeatureSpec {
            name: "x".into(),
            kind: FeatureKind::Numerical,
        }])
        .unwrap();
        assert_eq!(one_num.total_width(), 2);

        let num_cat = FeatureSchema::new(vec![
            FeatureSpec { name: "x".into(), kind: FeatureKind::Numerical },
            FeatureSpec {
                name: "c".into(),
                kind: FeatureKind::Categorical { vocab_size: 10, embed_dim: 8 },
            },
        ])
        .unwrap();
        assert_eq!(num_cat.total_width(), 10);
    }

    #[test]
    fn encode_numerical_cases() {
        assert_eq!(encode_numerical(Some(1.0), 1.0, 2.0)[0], 0.0); // x = mean
        assert_eq!(encode_numerical(Some(0.0), 1.0, 2.0)[1], 0.0); // log1p(0)
        let enc = encode_numerical(Some(3.0), 1.0, 2.0);
        assert_eq!(enc[0], 1.0);
        assert!((enc[1] - 4.0f64.ln()).abs() < 1e-12);
        assert_eq!(encode_numerical(None, 1.0, 2.0), [0.0, 0.0]);
    }

    #[test]
    fn encode_text_cases() {
        let mut rng = Rng::new(1);
        let table = Tensor::randn(vec![201, 4], 1.0, &mut rng);
        let mut out = vec![0.0; 4];

        // "ab" with n=2: single gram, output equals that row
        encode_text("ab", 2, 200, &table, &mut out);
        let row = gram_index("ab", 200) as usize;
        assert_eq!(out, table.data()[row * 4..(row + 1) * 4]);

        // empty string pools to zero
        encode_text("", 2, 200, &table, &mut out);
        assert_eq!(out, vec![0.0; 4]);

        // "abc" with n=2: mean of the two gram rows
        encode_text("abc", 2, 200, &table, &mut out);
        let r1 = gram_index("ab", 200) as usize;
        let r2 = gram_index("bc", 200) as usize;
        for j in 0..4 {
            let want = 0.5 * (table.data()[r1 * 4 + j] + table.data()[r2 * 4 + j]);
            assert!((out[j] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn encode_sequential_cases() {
        let mut rng = Rng::new(2);
        let table = Tensor::randn(vec![(SEQUENTIAL_VOCAB + 1) as usize, 4], 1.0, &mut rng);
        let mut out = vec![0.0; 4];

        encode_sequential(&[], 4, &table, &mut out);
        assert_eq!(out, vec![0.0; 4]);

        // all keys identical: that key's row
        encode_sequential(&[9, 9, 9], 4, &table, &mut out);
        let row = hash_index(9, SEQUENTIAL_VOCAB) as usize;
        for j in 0..4 {
            assert!((out[j] - table.data()[row * 4 + j]).abs() < 1e-15);
        }

        // two distinct keys: hand average
        encode_sequential(&[1, 2], 4, &table, &mut out);
        let (r1, r2) = (
            hash_index(1, SEQUENTIAL_VOCAB) as usize,
            hash_index(2, SEQUENTIAL_VOCAB) as usize,
        );
        for j in 0..4 {
            let want = 0.5 * (table.data()[r1 * 4 + j] + table.data()[r2 * 4 + j]);
            assert!((out[j] - want).abs() < 1e-15);
        }

        // truncation keeps the most recent max_len keys
        let mut out2 = vec![0.0; 4];
        encode_sequential(&[7, 1, 2], 2, &table, &mut out2);
        assert_eq!(out, out2);
    }

    #[test]
    fn assemble_is_deterministic_and_missing_is_finite() {
        let schema = demo_schema();
        let tables = EmbeddingTables::init(&schema, 7);
        let mut stats = NormStats::default();
        stats.stats.insert("price".into(), (1.0, 2.0));

        let rec = FeatureRecord {
            values: vec![
                FeatureValue::Numerical(3.0),
                FeatureValue::Categorical(12),
                FeatureValue::Text("red shoes".into()),
                FeatureValue::Sequential(vec![4, 5]),
            ],
        };
        let a = assemble_x0(&rec, &schema, &tables, &stats).unwrap();
        let b = assemble_x0(&rec, &schema, &tables, &stats).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[1, schema.total_width()]);

        let all_missing = FeatureRecord {
            values: vec![
                FeatureValue::Missing,
                FeatureValue::Missing,
                FeatureValue::Missing,
                FeatureValue::Missing,
            ],
        };
        let m = assemble_x0(&all_missing, &schema, &tables, &stats).unwrap();
        assert!(m.is_finite());
        // numerical part is exactly zero
        assert_eq!(&m.data()[0..2], &[0.0, 0.0]);
        // categorical part is the unseen row, not zero
        let table = tables.get("category").unwrap();
        assert_eq!(&m.data()[2..10], &table.data()[50 * 8..51 * 8]);
    }

    #[test]
    fn assemble_rejects_wrong_record() {
        let schema = demo_schema();
        let tables = EmbeddingTables::init(&schema, 7);
        let stats = NormStats::estimate(&schema, std::iter::empty());
        let rec = FeatureRecord { values: vec![FeatureValue::Numerical(1.0)] };
        assert!(matches!(
            assemble_x0(&rec, &schema, &tables, &stats),
            Err(Error::Schema(_))
        ));
    }

    // Doubling one categorical embed_dim widens D by exactly +dim and
    // leaves every other feature slice bit-identical.
    #[test]
    fn embed_dim_scaling_preserves_other_slices() {
        let schema8 = demo_schema();
        let mut specs = schema8.specs().to_vec();
        specs[1].kind = FeatureKind::Categorical { vocab_size: 50, embed_dim: 16 };
        let schema16 = FeatureSchema::new(specs).unwrap();
        assert_eq!(schema16.total_width(), schema8.total_width() + 8);

        let t8 = EmbeddingTables::init(&schema8, 7);
        let t16 = EmbeddingTables::init(&schema16, 7);
        let stats = {
            let mut s = NormStats::default();
            s.stats.insert("price".into(), (0.0, 1.0));
            s
        };
        let rec = FeatureRecord {
            values: vec![
                FeatureValue::Numerical(0.5),
                FeatureValue::Categorical(3),
                FeatureValue::Text("abc".into()),
                FeatureValue::Sequential(vec![1]),
            ],
        };
        let a = assemble_x0(&rec, &schema8, &t8, &stats).unwrap();
        let b = assemble_x0(&rec, &schema16, &t16, &stats).unwrap();
        for name in ["price", "title", "recent"] {
            let ra = schema8.slice_of(name).unwrap();
            let rb = schema16.slice_of(name).unwrap();
            assert_eq!(&a.data()[ra], &b.data()[rb], "slice {name} changed");
        }
    }

    // Collision rate never increases when the vocabulary grows by an
    // integer factor (measured over a fixed key set).
    #[test]
    fn vocab_scaling_collisions_non_increasing() {
        let keys: Vec<u64> = (0..2000).map(|i| i * 2654435761 % 100_000).collect();
        let rate = |vocab: u64| {
            let mut seen = std::collections::HashSet::new();
            let mut coll = 0;
            for &k in &keys {
                if !seen.insert(hash_index(k, vocab)) {
                    coll += 1;
                }
            }
            coll as f64 / keys.len() as f64
        };
        let r1 = rate(128);
        let r2 = rate(128 * 8);
        let r3 = rate(128 * 64);
        assert!(r2 <= r1, "{r2} > {r1}");
        assert!(r3 <= r2, "{r3} > {r2}");
    }

    #[test]
    fn record_projection() {
        let schema = demo_schema();
        let sub = schema.project(&["price", "title"]).unwrap();
        let rec = FeatureRecord {
            values: vec![
                FeatureValue::Numerical(3.0),
                FeatureValue::Categorical(12),
                FeatureValue::Text("x".into()),
                FeatureValue::Sequential(vec![]),
            ],
        };
        let p = rec.project(&schema, &sub).unwrap();
        assert_eq!(p.values.len(), 2);
        assert_eq!(p.values[0], FeatureValue::Numerical(3.0));
        assert_eq!(p.values[1], FeatureValue::Text("x".into()));
    }

    #[test]
    fn norm_stats_floor_and_estimate() {
        let schema = FeatureSchema::new(vec![FeatureSpec {
            name: "x".into(),
            kind: FeatureKind::Numerical,
        }])
        .unwrap();
        let recs: Vec<FeatureRecord> = (0..5)
            .map(|_| FeatureRecord { values: vec![FeatureValue::Numerical(2.0)] })
            .collect();
        let stats = NormStats::estimate(&schema, recs.iter());
        let (mean, std) = stats.get("x").unwrap();
        assert_eq!(mean, 2.0);
        assert_eq!(std, STD_FLOOR); // constant feature floors the std
    }
}
