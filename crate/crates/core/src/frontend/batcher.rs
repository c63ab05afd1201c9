use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::Serialize;
use tokio::sync::{mpsc, oneshot};
use tokio::time::Instant;

use crate::runtime::{PlanId, Prediction, Record, Runtime, RuntimeError};

type Reply = oneshot::Sender<Vec<Result<Prediction, RuntimeError>>>;

struct Job {
    plan: PlanId,
    records: Vec<Record>,
    enqueued: Instant,
    reply: Reply,
}

#[derive(Default)]
struct Buffer {
    jobs: Vec<Job>,
    records: usize,
    deadline: Option<Instant>,
}

#[derive(Debug, Default)]
struct Counters {
    batches: AtomicU64,
    records: AtomicU64,
    multi_request_batches: AtomicU64,
    max_batch: AtomicU64,
    max_delay_us: AtomicU64,
    size_flushes: AtomicU64,
    timer_flushes: AtomicU64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct BatcherStats {
    pub window_us: u64,
    pub max_batch_size: usize,
    pub batches: u64,
    pub records: u64,
    /// Batches combining more than one request.
    pub multi_request_batches: u64,
    pub largest_batch: u64,
    /// Longest time a request waited in a buffer before dispatch.
    pub max_delay_us: u64,
    pub size_flushes: u64,
    pub timer_flushes: u64,
}

/// Buffers requests per plan for up to `window`, then submits them to the batch
/// engine as one batch. A buffer is flushed when it reaches `max_batch` records or its
/// oldest request has waited `window`, whichever comes first.
#[derive(Debug)]
pub struct DelayedBatcher {
    tx: mpsc::UnboundedSender<Job>,
    counters: Arc<Counters>,
    window: Duration,
    max_batch: usize,
}

impl DelayedBatcher {
    /// Spawns the buffering task; must be called inside a tokio runtime.
    pub fn spawn(runtime: Arc<Runtime>, window: Duration, max_batch: usize) -> Self {
        let (tx, rx) = mpsc::unbounded_channel();
        let counters = Arc::new(Counters::default());
        tokio::spawn(run(rx, runtime, counters.clone(), window, max_batch.max(1)));
        DelayedBatcher {
            tx,
            counters,
            window,
            max_batch: max_batch.max(1),
        }
    }

    /// Predictions for `records`, in order.
    pub async fn submit(&self, plan: PlanId, records: Vec<Record>) -> Vec<Result<Prediction, RuntimeError>> {
        let n = records.len();
        let (reply, rx) = oneshot::channel();
        let job = Job {
            plan,
            records,
            enqueued: Instant::now(),
            reply,
        };
        if self.tx.send(job).is_err() {
            return vec![Err(RuntimeError::Shutdown); n];
        }
        rx.await.unwrap_or_else(|_| vec![Err(RuntimeError::Shutdown); n])
    }

    pub fn stats(&self) -> BatcherStats {
        let c = &self.counters;
        BatcherStats {
            window_us: self.window.as_micros() as u64,
            max_batch_size: self.max_batch,
            batches: c.batches.load(Ordering::Relaxed),
            records: c.records.load(Ordering::Relaxed),
            multi_request_batches: c.multi_request_batches.load(Ordering::Relaxed),
            largest_batch: c.max_batch.load(Ordering::Relaxed),
            max_delay_us: c.max_delay_us.load(Ordering::Relaxed),
            size_flushes: c.size_flushes.load(Ordering::Relaxed),
            timer_flushes: c.timer_flushes.load(Ordering::Relaxed),
        }
    }
}

async fn run(
    mut rx: mpsc::UnboundedReceiver<Job>,
    runtime: Arc<Runtime>,
    counters: Arc<Counters>,
    window: Duration,
    max_batch: usize,
) {
    let mut buffers: HashMap<PlanId, Buffer> = HashMap::new();
    loop {
        let next = buffers.values().filter_map(|b| b.deadline).min();
        let job = match next {
            Some(deadline) => tokio::select! {
                j = rx.recv() => j,
                _ = tokio::time::sleep_until(deadline) => {
                    let now = Instant::now();
                    let due: Vec<PlanId> = buffers
                        .iter()
                        .filter(|(_, b)| b.deadline.is_some_and(|d| d <= now))
                        .map(|(p, _)| *p)
                        .collect();
                    for p in due {
                        let b = buffers.remove(&p).expect("due buffer");
                        counters.timer_flushes.fetch_add(1, Ordering::Relaxed);
                        dispatch(&runtime, &counters, p, b);
                    }
                    continue;
                }
            },
            None => rx.recv().await,
        };
        let Some(job) = job else { break };
        let plan = job.plan;
        let b = buffers.entry(plan).or_default();
        b.deadline.get_or_insert(job.enqueued + window);
        b.records += job.records.len();
        b.jobs.push(job);
        if b.records >= max_batch {
            let b = buffers.remove(&plan).expect("present");
            counters.size_flushes.fetch_add(1, Ordering::Relaxed);
            dispatch(&runtime, &counters, plan, b);
        }
    }
    for (p, b) in buffers.drain() {
        dispatch(&runtime, &counters, p, b);
    }
}

fn dispatch(runtime: &Arc<Runtime>, counters: &Counters, plan: PlanId, buf: Buffer) {
    let now = Instant::now();
    let delay = buf.jobs.iter().map(|j| now - j.enqueued).max().unwrap_or_default();
    counters
        .max_delay_us
        .fetch_max(delay.as_micros() as u64, Ordering::Relaxed);
    counters.batches.fetch_add(1, Ordering::Relaxed);
    counters.records.fetch_add(buf.records as u64, Ordering::Relaxed);
    counters.max_batch.fetch_max(buf.records as u64, Ordering::Relaxed);
    if buf.jobs.len() > 1 {
        counters.multi_request_batches.fetch_add(1, Ordering::Relaxed);
    }
    let runtime = runtime.clone();
    tokio::task::spawn_blocking(move || {
        let mut replies = Vec::with_capacity(buf.jobs.len());
        let mut records = Vec::with_capacity(buf.records);
        for j in buf.jobs {
            replies.push((j.records.len(), j.reply));
            records.extend(j.records);
        }
        let results = match runtime.submit_batch(plan, records) {
            Ok(h) => h.wait(),
            Err(e) => vec![Err(e); buf.records],
        };
        let mut results = results.into_iter();
        for (n, reply) in replies {
            let _ = reply.send(results.by_ref().take(n).collect());
        }
    });
}
