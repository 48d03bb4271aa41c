//! Threaded scoring server.
//!
//! Topology (one owner per shared structure, bounded handoffs):
//!
//! ```text
//! conn readers ──mpsc──> batcher ──sync(2)──> stage A ──sync(2)──> stage B
//!      ^                  (owns the queue)    (preprocess)         (score)
//!      |                                                              |
//! conn writers <────────────── per-connection response channels ─────┘
//! ```
//!
//! The batcher owns all dispatch decisions; stage A assembles features
//! (plus its synthetic delay), stage B runs the model forward (plus its
//! delay) and routes scores back by request id. Responses for one
//! connection always leave in request order because every hop is FIFO
//! and single-owner. Overload rejections are emitted immediately by the
//! batcher and are the one exception to per-connection ordering.

use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::features::assemble_matrix;
use crate::model::{Model, PRIMARY_TASK};
use crate::tensor::Tensor;

use super::batcher::{Batch, Batcher, BatcherConfig, Pending};
use super::frame::{
    decode_request, encode_response, read_frame, write_frame, ScoreResponse,
};
use super::sim::StageCost;

pub struct ServerConfig {
    pub model: Arc<Model>,
    pub batcher: BatcherConfig,
    pub stage_a: StageCost,
    pub stage_b: StageCost,
}

struct ReqPayload {
    records: Vec<crate::features::FeatureRecord>,
    reply: mpsc::Sender<ScoreResponse>,
}

pub struct ServerHandle {
    pub addr: SocketAddr,
    shutdown: Arc<AtomicBool>,
    req_tx: Option<mpsc::Sender<Pending<ReqPayload>>>,
    acceptor: Option<thread::JoinHandle<()>>,
}

impl ServerHandle {
    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        // unblock accept()
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
        self.req_tx.take();
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Bind and start serving. Port 0 picks an ephemeral port; the bound
/// address is on the handle.
pub fn start(config: ServerConfig, port: u16) -> Result<ServerHandle> {
    config.batcher.validate()?;
    // the model must be servable: every numerical feature needs stats
    for spec in config.model.schema.specs() {
        if matches!(spec.kind, crate::features::FeatureKind::Numerical) {
            config.model.stats.get(&spec.name)?;
        }
    }
    let listener = TcpListener::bind(("127.0.0.1", port))?;
    let addr = listener.local_addr()?;
    let shutdown = Arc::new(AtomicBool::new(false));
    let epoch = Instant::now();

    let (req_tx, req_rx) = mpsc::channel::<Pending<ReqPayload>>();
    let (a_tx, a_rx) = mpsc::sync_channel::<Batch<ReqPayload>>(2);
    let (b_tx, b_rx) = mpsc::sync_channel::<(Batch<ReqPayload>, Tensor)>(2);

    // batcher: owns the queue and all dispatch decisions
    let batcher_cfg = config.batcher.clone();
    thread::Builder::new()
        .name("batcher".into())
        .spawn(move || batcher_loop(batcher_cfg, req_rx, a_tx, epoch))
        .expect("spawn batcher");

    // stage A: synthetic preprocess delay + feature assembly
    let model_a = Arc::clone(&config.model);
    let stage_a = config.stage_a;
    thread::Builder::new()
        .name("stage-a".into())
        .spawn(move || {
            while let Ok(batch) = a_rx.recv() {
                let n = batch.n_items();
                sleep_cost(stage_a, n);
                let records: Vec<_> = batch
                    .requests
                    .iter()
                    .flat_map(|r| r.payload.records.iter().cloned())
                    .collect();
                match assemble_matrix(&records, &model_a.schema, &model_a.tables, &model_a.stats) {
                    Ok(x0) => {
                        if b_tx.send((batch, x0)).is_err() {
                            break;
                        }
                    }
                    Err(_) => {
                        for r in &batch.requests {
                            let _ = r.payload.reply.send(ScoreResponse::Overloaded { id: r.id });
                        }
                    }
                }
            }
        })
        .expect("spawn stage A");

    // stage B: synthetic backbone delay + forward pass + response routing
    let model_b = Arc::clone(&config.model);
    let stage_b = config.stage_b;
    thread::Builder::new()
        .name("stage-b".into())
        .spawn(move || {
            let task = model_b
                .config
                .mmoe
                .task_index(PRIMARY_TASK)
                .expect("primary task present");
            let n_tasks = model_b.config.mmoe.tasks.len();
            while let Ok((batch, x0)) = b_rx.recv() {
                sleep_cost(stage_b, batch.n_items());
                match model_b.score_matrix(&x0) {
                    Ok(logits) => {
                        let scores: Vec<f32> = logits
                            .data()
                            .chunks(n_tasks)
                            .map(|row| row[task] as f32)
                            .collect();
                        let mut off = 0;
                        for r in &batch.requests {
                            let s = scores[off..off + r.n_items].to_vec();
                            off += r.n_items;
                            let _ = r.payload.reply.send(ScoreResponse::Scores { id: r.id, scores: s });
                        }
                    }
                    Err(_) => {
                        for r in &batch.requests {
                            let _ = r.payload.reply.send(ScoreResponse::Overloaded { id: r.id });
                        }
                    }
                }
            }
        })
        .expect("spawn stage B");

    // acceptor + per-connection reader/writer pairs
    let accept_shutdown = Arc::clone(&shutdown);
    let accept_model = Arc::clone(&config.model);
    let accept_req_tx = req_tx.clone();
    let acceptor = thread::Builder::new()
        .name("acceptor".into())
        .spawn(move || {
            for stream in listener.incoming() {
                if accept_shutdown.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                spawn_connection(stream, Arc::clone(&accept_model), accept_req_tx.clone(), epoch);
            }
        })
        .expect("spawn acceptor");

    Ok(ServerHandle {
        addr,
        shutdown,
        req_tx: Some(req_tx),
        acceptor: Some(acceptor),
    })
}

fn sleep_cost(cost: StageCost, n_items: usize) {
    let ns = cost.ns(n_items);
    if ns > 0 {
        thread::sleep(Duration::from_nanos(ns));
    }
}

fn batcher_loop(
    cfg: BatcherConfig,
    req_rx: mpsc::Receiver<Pending<ReqPayload>>,
    a_tx: mpsc::SyncSender<Batch<ReqPayload>>,
    epoch: Instant,
) {
    let mut batcher: Batcher<ReqPayload> = Batcher::new(cfg).expect("validated config");
    let mut open = true;
    while open || batcher.queued_requests() > 0 {
        let now = epoch.elapsed().as_nanos() as u64;
        let wait = match batcher.deadline_ns() {
            Some(d) => Duration::from_nanos(d.saturating_sub(now)),
            None => Duration::from_millis(100),
        };
        match req_rx.recv_timeout(wait) {
            Ok(req) => {
                if let Err(rejected) = batcher.push(req) {
                    let _ = rejected
                        .payload
                        .reply
                        .send(ScoreResponse::Overloaded { id: rejected.id });
                }
                // drain whatever else is already waiting
                while let Ok(req) = req_rx.try_recv() {
                    if let Err(rejected) = batcher.push(req) {
                        let _ = rejected
                            .payload
                            .reply
                            .send(ScoreResponse::Overloaded { id: rejected.id });
                    }
                }
            }
            Err(mpsc::RecvTimeoutError::Timeout) => {}
            Err(mpsc::RecvTimeoutError::Disconnected) => open = false,
        }
        let now = epoch.elapsed().as_nanos() as u64;
        let now = if open { now } else { u64::MAX }; // drain everything on shutdown
        while let Some(batch) = batcher.try_dispatch(now) {
            if a_tx.send(batch).is_err() {
                return;
            }
        }
    }
}

fn spawn_connection(
    stream: TcpStream,
    model: Arc<Model>,
    req_tx: mpsc::Sender<Pending<ReqPayload>>,
    epoch: Instant,
) {
    let (resp_tx, resp_rx) = mpsc::channel::<ScoreResponse>();
    let write_stream = match stream.try_clone() {
        Ok(s) => s,
        Err(_) => return,
    };
    thread::spawn(move || {
        let mut w = std::io::BufWriter::new(write_stream);
        while let Ok(resp) = resp_rx.recv() {
            if write_frame(&mut w, &encode_response(&resp)).is_err() {
                break;
            }
            if std::io::Write::flush(&mut w).is_err() {
                break;
            }
        }
    });
    thread::spawn(move || {
        let mut r = std::io::BufReader::new(stream);
        loop {
            let payload = match read_frame(&mut r) {
                Ok(Some(p)) => p,
                Ok(None) | Err(_) => break,
            };
            let req = match decode_request(&payload, &model.schema) {
                Ok(req) => req,
                Err(_) => break, // protocol error: drop the connection
            };
            let pending = Pending {
                id: req.id,
                n_items: req.records.len(),
                arrived_ns: epoch.elapsed().as_nanos() as u64,
                payload: ReqPayload { records: req.records, reply: resp_tx.clone() },
            };
            if req_tx.send(pending).is_err() {
                break;
            }
        }
    });
}

/// Verify a checkpoint/schema pair before serving: the schema fingerprint
/// recorded in the checkpoint must match the schema file.
pub fn verify_servable(model: &Model, schema_fingerprint: u64) -> Result<()> {
    if model.schema.fingerprint() != schema_fingerprint {
        return Err(Error::IncompatibleCheckpoint(format!(
            "schema fingerprint {:016x} does not match checkpoint {:016x}",
            model.schema.fingerprint(),
            schema_fingerprint
        )));
    }
    Ok(())
}
