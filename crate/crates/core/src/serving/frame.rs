//! Wire protocol for the scoring server.
//!
//! Every message is a frame: a 4-byte big-endian payload length followed
//! by the payload (maximum 16 MiB). All multi-byte integers are
//! big-endian; floats are IEEE-754 bit patterns.
//!
//! Request payload:
//!
//! ```text
//! request id   u64
//! item count   u16            (0xFFFF is reserved, see responses)
//! items        n records, each serialized in schema order:
//!   numerical    f32          (NaN encodes a missing value)
//!   categorical  u64 key      (0xFFFF_FFFF_FFFF_FFFF encodes missing)
//!   text         u16 byte length, then UTF-8 bytes
//!   sequential   u16 key count, then u64 keys
//! ```
//!
//! Response payload:
//!
//! ```text
//! request id   u64
//! item count   u16            (0xFFFF = overload rejection, no scores)
//! scores       n f32 values, one per item, in request order
//! ```
//!
//! Worked example: schema `price numerical` only, request id 7 scoring
//! two items with price 1.5 and a missing price:
//!
//! ```text
//! 00 00 00 12                frame length (18 bytes follow)
//! 00 00 00 00 00 00 00 07    request id 7
//! 00 02                      2 items
//! 3f c0 00 00                1.5f32
//! 7f c0 00 00                NaN (missing)
//! ```

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::features::{FeatureKind, FeatureRecord, FeatureSchema, FeatureValue};

pub const MAX_PAYLOAD: usize = 16 * 1024 * 1024;
/// Item count reserved for the overload rejection response.
pub const OVERLOAD_MARKER: u16 = u16::MAX;
/// Largest encodable item count per request.
pub const MAX_ITEMS: usize = (OVERLOAD_MARKER - 1) as usize;
const MISSING_KEY: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRequest {
    pub id: u64,
    pub records: Vec<FeatureRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScoreResponse {
    Scores { id: u64, scores: Vec<f32> },
    Overloaded { id: u64 },
}

impl ScoreResponse {
    pub fn id(&self) -> u64 {
        match self {
            ScoreResponse::Scores { id, .. } | ScoreResponse::Overloaded { id } => *id,
        }
    }
}

/// Write one length-prefixed frame.
pub fn write_frame(w: &mut impl Write, payload: &[u8]) -> Result<()> {
    if payload.len() > MAX_PAYLOAD {
        return Err(Error::format(format!("payload {} exceeds 16 MiB", payload.len())));
    }
    w.write_all(&(payload.len() as u32).to_be_bytes())?;
    w.write_all(payload)?;
    Ok(())
}

/// Read one frame; `Ok(None)` on clean EOF at a frame boundary.
pub fn read_frame(r: &mut impl Read) -> Result<Option<Vec<u8>>> {
    let mut len_bytes = [0u8; 4];
    match r.read_exact(&mut len_bytes) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_be_bytes(len_bytes) as usize;
    if len > MAX_PAYLOAD {
        return Err(Error::format(format!("frame length {len} exceeds 16 MiB")));
    }
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload)?;
    Ok(Some(payload))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format("truncated payload"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn encode_request(req: &ScoreRequest, schema: &FeatureSchema) -> Result<Vec<u8>> {
    if req.records.len() > MAX_ITEMS {
        return Err(Error::format(format!(
            "{} items exceeds the per-request maximum {MAX_ITEMS}",
            req.records.len()
        )));
    }
    let mut out = Vec::new();
    out.extend_from_slice(&req.id.to_be_bytes());
    out.extend_from_slice(&(req.records.len() as u16).to_be_bytes());
    for rec in &req.records {
        rec.validate(schema)?;
        for (v, fs) in rec.values.iter().zip(schema.specs()) {
            match (&fs.kind, v) {
                (FeatureKind::Numerical, FeatureValue::Numerical(x)) => {
                    out.extend_from_slice(&(*x as f32).to_be_bytes());
                }
                (FeatureKind::Numerical, FeatureValue::Missing) => {
                    out.extend_from_slice(&f32::NAN.to_be_bytes());
                }
                (FeatureKind::Categorical { .. }, FeatureValue::Categorical(k)) => {
                    if *k == MISSING_KEY {
                        return Err(Error::format("categorical key u64::MAX is reserved for missing"));
                    }
                    out.extend_from_slice(&k.to_be_bytes());
                }
                (FeatureKind::Categorical { .. }, FeatureValue::Missing) => {
                    out.extend_from_slice(&MISSING_KEY.to_be_bytes());
                }
                (FeatureKind::Text { .. }, FeatureValue::Text(s)) => {
                    let bytes = s.as_bytes();
                    if bytes.len() > u16::MAX as usize {
                        return Err(Error::format("text value exceeds 64 KiB"));
                    }
                    out.extend_from_slice(&(bytes.len() as u16).to_be_bytes());
                    out.extend_from_slice(bytes);
                }
                (FeatureKind::Text { .. }, FeatureValue::Missing) => {
                    out.extend_from_slice(&0u16.to_be_bytes());
                }
                (FeatureKind::Sequential { .. }, FeatureValue::Sequential(keys)) => {
                    if keys.len() > u16::MAX as usize {
                        return Err(Error::format("key list exceeds 65535 entries"));
                    }
                    out.extend_from_slice(&(keys.len() as u16).to_be_bytes());
                    for k in keys {
                        out.extend_from_slice(&k.to_be_bytes());
                    }
                }
                (FeatureKind::Sequential { .. }, FeatureValue::Missing) => {
                    out.extend_from_slice(&0u16.to_be_bytes());
                }
                _ => return Err(Error::format("record value does not match schema kind")),
            }
        }
    }
    Ok(out)
}

pub fn decode_request(payload: &[u8], schema: &FeatureSchema) -> Result<ScoreRequest> {
    let mut c = Cursor { buf: payload, pos: 0 };
    let id = c.u64()?;
    let n = c.u16()?;
    if n == OVERLOAD_MARKER {
        return Err(Error::format("item count 0xFFFF is reserved"));
    }
    let mut records = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let mut values = Vec::with_capacity(schema.len());
        for fs in schema.specs() {
            let v = match &fs.kind {
                FeatureKind::Numerical => {
                    let x = c.f32()?;
                    if x.is_nan() {
                        FeatureValue::Missing
                    } else {
                        FeatureValue::Numerical(x as f64)
                    }
                }
                FeatureKind::Categorical { .. } => {
                    let k = c.u64()?;
                    if k == MISSING_KEY {
                        FeatureValue::Missing
                    } else {
                        FeatureValue::Categorical(k)
                    }
                }
                FeatureKind::Text { .. } => {
                    let len = c.u16()? as usize;
                    let bytes = c.take(len)?;
                    FeatureValue::Text(
                        std::str::from_utf8(bytes)
                            .map_err(|_| Error::format("invalid UTF-8 in text feature"))?
                            .to_string(),
                    )
                }
                FeatureKind::Sequential { .. } => {
                    let len = c.u16()? as usize;
                    let mut keys = Vec::with_capacity(len);
                    for _ in 0..len {
                        keys.push(c.u64()?);
                    }
                    FeatureValue::Sequential(keys)
                }
            };
            values.push(v);
        }
        records.push(FeatureRecord { values });
    }
    if !c.done() {
        return Err(Error::format("trailing bytes after request payload"));
    }
    Ok(ScoreRequest { id, records })
}

pub fn encode_response(resp: &ScoreResponse) -> Vec<u8> {
    let mut out = Vec::new();
    match resp {
        ScoreResponse::Scores { id, scores } => {
            out.extend_from_slice(&id.to_be_bytes());
            out.extend_from_slice(&(scores.len() as u16).to_be_bytes());
            for s in scores {
                out.extend_from_slice(&s.to_be_bytes());
            }
        }
        ScoreResponse::Overloaded { id } => {
            out.extend_from_slice(&id.to_be_bytes());
            out.extend_from_slice(&OVERLOAD_MARKER.to_be_bytes());
        }
    }
    out
}

pub fn decode_response(payload: &[u8]) -> Result<ScoreResponse> {
    let mut c = Cursor { buf: payload, pos: 0 };
    let id = c.u64()?;
    let n = c.u16()?;
    if n == OVERLOAD_MARKER {
        if !c.done() {
            return Err(Error::format("trailing bytes after overload response"));
        }
        return Ok(ScoreResponse::Overloaded { id });
    }
    let mut scores = Vec::with_capacity(n as usize);
    for _ in 0..n {
        scores.push(c.f32()?);
    }
    if !c.done() {
        return Err(Error::format("trailing bytes after response payload"));
    }
    Ok(ScoreResponse::Scores { id, scores })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureSpec;
    use proptest::prelude::*;

    fn schema() -> FeatureSchema {
        FeatureSchema::new(vec![
            FeatureSpec { name: "price".into(), kind: FeatureKind::Numerical },
            FeatureSpec {
                name: "cat".into(),
                kind: FeatureKind::Categorical { vocab_size: 50, embed_dim: 4 },
            },
            FeatureSpec {
                name: "title".into(),
                kind: FeatureKind::Text { ngram_n: 3, vocab_size: 100, embed_dim: 4 },
            },
            FeatureSpec {
                name: "seq".into(),
                kind: FeatureKind::Sequential { max_len: 4, embed_dim: 4 },
            },
        ])
        .unwrap()
    }

    // The module-doc hex example, bit for bit.
    #[test]
    fn documented_hex_example() {
        let s = FeatureSchema::new(vec![FeatureSpec {
            name: "price".into(),
            kind: FeatureKind::Numerical,
        }])
        .unwrap();
        let req = ScoreRequest {
            id: 7,
            records: vec![
                FeatureRecord { values: vec![FeatureValue::Numerical(1.5)] },
                FeatureRecord { values: vec![FeatureValue::Missing] },
            ],
        };
        let payload = encode_request(&req, &s).unwrap();
        let mut framed = Vec::new();
        write_frame(&mut framed, &payload).unwrap();
        assert_eq!(
            framed,
            vec![
                0x00, 0x00, 0x00, 0x12, // length 18
                0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x07, // id
                0x00, 0x02, // 2 items
                0x3f, 0xc0, 0x00, 0x00, // 1.5f32
                0x7f, 0xc0, 0x00, 0x00, // NaN
            ]
        );
    }

    #[test]
    fn frame_roundtrip_and_eof() {
        let mut buf = Vec::new();
        write_frame(&mut buf, b"hello").unwrap();
        write_frame(&mut buf, b"").unwrap();
        let mut r = &buf[..];
        assert_eq!(read_frame(&mut r).unwrap().unwrap(), b"hello");
        assert_eq!(read_frame(&mut r).unwrap().unwrap(), b"");
        assert!(read_frame(&mut r).unwrap().is_none());
    }

    #[test]
    fn oversize_frame_rejected() {
        let mut buf = Vec::new();
        buf.extend_from_slice(&(MAX_PAYLOAD as u32 + 1).to_be_bytes());
        assert!(read_frame(&mut &buf[..]).is_err());
    }

    #[test]
    fn response_roundtrip_including_overload() {
        let ok = ScoreResponse::Scores { id: 42, scores: vec![1.0, -0.5] };
        assert_eq!(decode_response(&encode_response(&ok)).unwrap(), ok);
        let over = ScoreResponse::Overloaded { id: 9 };
        assert_eq!(decode_response(&encode_response(&over)).unwrap(), over);
    }

    proptest! {
        // request encode/decode is the identity (floats pass through the
        // f32 wire type, so inputs are f32-representable by construction)
        #[test]
        fn request_roundtrip(
            id in any::<u64>(),
            items in proptest::collection::vec(
                (any::<f32>(), 0u64..1000, ".{0,12}", proptest::collection::vec(any::<u64>(), 0..5), any::<u8>()),
                1..6,
            )
        ) {
            let schema = schema();
            let records: Vec<FeatureRecord> = items.iter().map(|(x, k, t, seq, miss)| {
                FeatureRecord { values: vec![
                    if miss % 4 == 0 || x.is_nan() { FeatureValue::Missing } else { FeatureValue::Numerical(*x as f64) },
                    if miss % 4 == 1 { FeatureValue::Missing } else { FeatureValue::Categorical(*k) },
                    FeatureValue::Text(t.clone()),
                    FeatureValue::Sequential(seq.clone()),
                ]}
            }).collect();
            let req = ScoreRequest { id, records };
            let decoded = decode_request(&encode_request(&req, &schema).unwrap(), &schema).unwrap();
            prop_assert_eq!(req, decoded);
        }
    }
}
