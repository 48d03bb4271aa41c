//! Blocking scoring client, client-side batching, and the open-loop load
//! generator for a live server.

use std::collections::HashMap;
use std::net::TcpStream;
use std::ops::Range;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::features::{FeatureRecord, FeatureSchema};
use crate::rng::Rng;

use super::frame::{
    decode_response, encode_request, read_frame, write_frame, ScoreRequest, ScoreResponse,
};
use super::percentile::LatencyReport;

/// FIFO chunking of `n` items into ceil(n / max) pieces.
pub fn client_chunks(n: usize, max_per_request: usize) -> Result<Vec<Range<usize>>> {
    if max_per_request == 0 {
        return Err(Error::contract("max_per_request must be >= 1"));
    }
    Ok((0..n.div_ceil(max_per_request))
        .map(|i| i * max_per_request..((i + 1) * max_per_request).min(n))
        .collect())
}

/// One connection to a scoring server.
pub struct ScoringClient {
    stream: TcpStream,
    schema: FeatureSchema,
    next_id: u64,
}

impl ScoringClient {
    pub fn connect(addr: &str, schema: FeatureSchema) -> Result<ScoringClient> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(ScoringClient { stream, schema, next_id: 1 })
    }

    fn send_request(&mut self, records: &[FeatureRecord]) -> Result<u64> {
        let id = self.next_id;
        self.next_id += 1;
        let payload = encode_request(&ScoreRequest { id, records: records.to_vec() }, &self.schema)?;
        write_frame(&mut self.stream, &payload)?;
        Ok(id)
    }

    fn read_response(&mut self) -> Result<ScoreResponse> {
        match read_frame(&mut self.stream)? {
            Some(payload) => decode_response(&payload),
            None => Err(Error::format("connection closed mid-request")),
        }
    }

    /// Score one request's worth of items.
    pub fn score(&mut self, records: &[FeatureRecord]) -> Result<Vec<f32>> {
        let id = self.send_request(records)?;
        match self.read_response()? {
            ScoreResponse::Scores { id: rid, scores } => {
                if rid != id {
                    return Err(Error::format(format!("response id {rid} for request {id}")));
                }
                if scores.len() != records.len() {
                    return Err(Error::format(format!(
                        "{} scores for {} items",
                        scores.len(),
                        records.len()
                    )));
                }
                Ok(scores)
            }
            ScoreResponse::Overloaded { .. } => {
                Err(Error::contract("server overloaded".to_string()))
            }
        }
    }

    /// Client-side batching: chunk one query's candidates into
    /// ceil(n / max) requests and reassemble scores in item order.
    pub fn score_query(
        &mut self,
        records: &[FeatureRecord],
        max_per_request: usize,
    ) -> Result<Vec<f32>> {
        let chunks = client_chunks(records.len(), max_per_request)?;
        // pipeline all requests, then collect responses by id
        let mut ids = Vec::with_capacity(chunks.len());
        for c in &chunks {
            ids.push(self.send_request(&records[c.clone()])?);
        }
        let mut by_id: HashMap<u64, Vec<f32>> = HashMap::new();
        for _ in 0..ids.len() {
            match self.read_response()? {
                ScoreResponse::Scores { id, scores } => {
                    by_id.insert(id, scores);
                }
                ScoreResponse::Overloaded { .. } => {
                    return Err(Error::contract("server overloaded".to_string()))
                }
            }
        }
        let mut out = Vec::with_capacity(records.len());
        for (c, id) in chunks.iter().zip(&ids) {
            let scores = by_id
                .remove(id)
                .ok_or_else(|| Error::format(format!("missing response for request {id}")))?;
            if scores.len() != c.len() {
                return Err(Error::format("chunk score count mismatch"));
            }
            out.extend(scores);
        }
        Ok(out)
    }
}

/// Open-loop load generation against a live server: Poisson arrivals at
/// `qps`, every request `items_per_request` copies drawn from `pool`.
/// Send times never wait for responses (a reader thread collects them).
pub fn loadgen_live(
    addr: &str,
    schema: &FeatureSchema,
    pool: &[FeatureRecord],
    qps: f64,
    duration_s: f64,
    items_per_request: usize,
    seed: u64,
) -> Result<LatencyReport> {
    if qps <= 0.0 || pool.is_empty() {
        return Ok(LatencyReport::invalid(qps));
    }
    let arrivals = super::sim::poisson_arrivals(qps, duration_s, items_per_request, seed);
    if arrivals.is_empty() {
        return Ok(LatencyReport::invalid(qps));
    }

    let stream = match TcpStream::connect(addr) {
        Ok(s) => s,
        Err(_) => return Ok(LatencyReport::invalid(qps)),
    };
    stream.set_nodelay(true)?;
    let read_stream = stream.try_clone()?;
    let n_requests = arrivals.len();

    // reader: records completion times by request id; overload responses
    // count as rejections, not completions
    let reader = std::thread::spawn(move || -> Vec<(u64, bool, Instant)> {
        let mut r = std::io::BufReader::new(read_stream);
        let mut done = Vec::with_capacity(n_requests);
        while done.len() < n_requests {
            match read_frame(&mut r) {
                Ok(Some(payload)) => match decode_response(&payload) {
                    Ok(resp) => {
                        let overloaded = matches!(resp, ScoreResponse::Overloaded { .. });
                        done.push((resp.id(), overloaded, Instant::now()));
                    }
                    Err(_) => break,
                },
                _ => break,
            }
        }
        done
    });

    let mut rng = Rng::stream(seed, "loadgen/pool");
    let mut w = std::io::BufWriter::new(stream);
    let start = Instant::now();
    let mut sent_at: HashMap<u64, Instant> = HashMap::with_capacity(n_requests);
    let mut io_failed = false;
    for a in &arrivals {
        let due = Duration::from_nanos(a.at_ns);
        if let Some(wait) = due.checked_sub(start.elapsed()) {
            std::thread::sleep(wait);
        }
        let records: Vec<FeatureRecord> = (0..items_per_request)
            .map(|_| pool[rng.next_below(pool.len() as u64) as usize].clone())
            .collect();
        let payload = encode_request(&ScoreRequest { id: a.id, records }, schema)?;
        sent_at.insert(a.id, Instant::now());
        if write_frame(&mut w, &payload).is_err() || std::io::Write::flush(&mut w).is_err() {
            io_failed = true;
            break;
        }
    }
    drop(w); // half-close is not needed; reader stops at n_requests

    let completions = reader.join().unwrap_or_default();
    let mut latencies: Vec<u64> = Vec::with_capacity(completions.len());
    let mut overloaded = 0usize;
    for (id, over, at) in &completions {
        if *over {
            overloaded += 1;
        } else if let Some(t0) = sent_at.get(id) {
            latencies.push(at.duration_since(*t0).as_nanos() as u64);
        }
    }
    let missing = sent_at.len().saturating_sub(completions.len());
    let mut report = LatencyReport::from_samples(qps, latencies, overloaded + missing, duration_s);
    if io_failed || missing > 0 {
        report.valid = false; // partial measurement
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunking_counts() {
        assert_eq!(client_chunks(5, 8).unwrap(), vec![0..5]); // n <= max
        assert_eq!(client_chunks(5, 2).unwrap(), vec![0..2, 2..4, 4..5]);
        assert_eq!(client_chunks(0, 4).unwrap(), Vec::<Range<usize>>::new());
        assert!(client_chunks(3, 0).is_err());
    }
}
