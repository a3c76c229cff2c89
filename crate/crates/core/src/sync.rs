//! Gradient synchronization through the parameter store.
//!
//! The hierarchical scheme runs in three store-mediated phases per iteration:
//!
//! 1. every worker splits its gradient into `m` equal shards (zero-padding the
//!    tail) and uploads them;
//! 2. every worker downloads all `n` contributions of the shards it owns,
//!    averages them and uploads the aggregated shard;
//! 3. every worker downloads the `m` aggregated shards and reassembles the
//!    averaged gradient.
//!
//! [`centralized_sync`] is the baseline where each worker uploads its full
//! gradient and downloads everybody else's.

use std::ops::Range;

use bytes::{Buf, BufMut, Bytes, BytesMut};
use log::warn;
use thiserror::Error;

use crate::storage::{Client, StorageError, Store};

pub const SHARD_MAGIC: &[u8; 8] = b"SMLTSHRD";
pub const SHARD_HEADER_LEN: usize = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SyncError {
    #[error("invalid shard plan: {0}")]
    InvalidPlan(String),
    #[error("gradient has length {actual}, plan expects {expected}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("missing contribution {0}")]
    MissingShard(String),
    #[error("missing aggregated shard {0}")]
    MissingAggregate(String),
    #[error("corrupt shard blob: {0}")]
    Corrupt(String),
    #[error("non-finite gradient entry at index {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Storage(#[from] StorageError),
}

/// Dense vector of gradients or parameters. All entries are finite.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradientVector(Vec<f64>);

impl GradientVector {
    pub fn new(values: Vec<f64>) -> Result<Self, SyncError> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(SyncError::NonFinite(i));
        }
        Ok(Self(values))
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl AsRef<[f64]> for GradientVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Elementwise arithmetic mean, summing in slice order.
pub fn elementwise_mean<V: AsRef<[f64]>>(vectors: &[V]) -> Vec<f64> {
    let Some(first) = vectors.first() else {
        return Vec::new();
    };
    let mut acc = first.as_ref().to_vec();
    for v in &vectors[1..] {
        for (a, x) in acc.iter_mut().zip(v.as_ref()) {
            *a += x;
        }
    }
    let n = vectors.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardPlan {
    pub n_workers: usize,
    pub m_shards: usize,
    pub grad_length: usize,
    pub shard_size: usize,
    pub pad_length: usize,
    pub boundaries: Vec<Range<usize>>,
    /// `assignment[j]` is the worker aggregating shard `j`.
    pub assignment: Vec<usize>,
}

/// Splits a gradient of `grad_length` entries into `m_shards` equal shards
/// assigned round-robin to `n_workers` aggregators.
pub fn plan_shards(
    grad_length: usize,
    n_workers: usize,
    m_shards: usize,
) -> Result<ShardPlan, SyncError> {
    if n_workers == 0 || m_shards == 0 || grad_length == 0 {
        return Err(SyncError::InvalidPlan(format!(
            "need at least one worker, shard and entry (n={n_workers}, m={m_shards}, len={grad_length})"
        )));
    }
    let shard_size = grad_length.div_ceil(m_shards);
    let pad_length = shard_size * m_shards - grad_length;
    let boundaries = (0..m_shards)
        .map(|j| j * shard_size..(j + 1) * shard_size)
        .collect();
    let assignment = (0..m_shards).map(|j| j % n_workers).collect();
    let plan = ShardPlan {
        n_workers,
        m_shards,
        grad_length,
        shard_size,
        pad_length,
        boundaries,
        assignment,
    };
    if plan.idle_aggregators() > 0 {
        warn!(
            "{} of {n_workers} workers have no shard to aggregate (m={m_shards} < n)",
            plan.idle_aggregators()
        );
    }
    Ok(plan)
}

impl ShardPlan {
    pub fn padded_length(&self) -> usize {
        self.shard_size * self.m_shards
    }

    pub fn assigned_to(&self, worker: usize) -> Vec<usize> {
        (worker..self.m_shards).step_by(self.n_workers).collect()
    }

    pub fn idle_aggregators(&self) -> usize {
        self.n_workers.saturating_sub(self.m_shards)
    }
}

/// Identifies one synchronization round in store keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SyncRound {
    pub epoch: u64,
    pub iteration: u64,
}

impl SyncRound {
    pub fn new(epoch: u64, iteration: u64) -> Self {
        Self { epoch, iteration }
    }

    pub fn prefix(&self) -> String {
        format!("{}/{}/", self.epoch, self.iteration)
    }

    pub fn shard_key(&self, shard: usize, worker: usize) -> String {
        format!(
            "{}/{}/shard/{shard}/from/{worker}",
            self.epoch, self.iteration
        )
    }

    pub fn aggregate_key(&self, shard: usize) -> String {
        format!("{}/{}/aggr/{shard}", self.epoch, self.iteration)
    }

    pub fn gradient_key(&self, worker: usize) -> String {
        format!("{}/{}/grad/from/{worker}", self.epoch, self.iteration)
    }
}

/// Per-worker communication time of one round, split by step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SyncTiming {
    pub ul_shard: f64,
    pub dl_shard: f64,
    pub ul_aggr: f64,
    /// Centralized mode only: upload of the full gradient.
    pub ul_grad: f64,
    pub dl_grad: f64,
}

impl SyncTiming {
    pub fn total(&self) -> f64 {
        self.ul_shard + self.dl_shard + self.ul_aggr + self.ul_grad + self.dl_grad
    }

    pub fn merge(&self, other: &SyncTiming) -> SyncTiming {
        SyncTiming {
            ul_shard: self.ul_shard + other.ul_shard,
            dl_shard: self.dl_shard + other.dl_shard,
            ul_aggr: self.ul_aggr + other.ul_aggr,
            ul_grad: self.ul_grad + other.ul_grad,
            dl_grad: self.dl_grad + other.dl_grad,
        }
    }

    /// Stepwise maximum; the per-step wall time under a barrier.
    pub fn max(&self, other: &SyncTiming) -> SyncTiming {
        SyncTiming {
            ul_shard: self.ul_shard.max(other.ul_shard),
            dl_shard: self.dl_shard.max(other.dl_shard),
            ul_aggr: self.ul_aggr.max(other.ul_aggr),
            ul_grad: self.ul_grad.max(other.ul_grad),
            dl_grad: self.dl_grad.max(other.dl_grad),
        }
    }
}

/// Encodes a shard blob: magic, u32 shard index, u32 count, then the values,
/// all little-endian.
pub fn encode_shard(index: u32, values: &[f64]) -> Bytes {
    let mut buf = BytesMut::with_capacity(SHARD_HEADER_LEN + 8 * values.len());
    buf.put_slice(SHARD_MAGIC);
    buf.put_u32_le(index);
    buf.put_u32_le(values.len() as u32);
    for v in values {
        buf.put_f64_le(*v);
    }
    buf.freeze()
}

pub fn decode_shard(bytes: &[u8]) -> Result<(u32, Vec<f64>), SyncError> {
    if bytes.len() < SHARD_HEADER_LEN || &bytes[..8] != SHARD_MAGIC {
        return Err(SyncError::Corrupt("bad header".into()));
    }
    let mut buf = &bytes[8..];
    let index = buf.get_u32_le();
    let count = buf.get_u32_le() as usize;
    if buf.remaining() != 8 * count {
        return Err(SyncError::Corrupt(format!(
            "payload has {} bytes, header announces {count} values",
            buf.remaining()
        )));
    }
    let values = (0..count).map(|_| buf.get_f64_le()).collect();
    Ok((index, values))
}

fn check_length(grad: &GradientVector, plan: &ShardPlan) -> Result<(), SyncError> {
    if grad.len() != plan.grad_length {
        return Err(SyncError::LengthMismatch {
            expected: plan.grad_length,
            actual: grad.len(),
        });
    }
    Ok(())
}

/// Shard values of `grad`, zero-padded to the plan's padded length.
pub fn split_shards(grad: &[f64], plan: &ShardPlan) -> Vec<Vec<f64>> {
    plan.boundaries
        .iter()
        .map(|r| {
            let mut shard = vec![0.0; plan.shard_size];
            let end = r.end.min(grad.len());
            if r.start < end {
                shard[..end - r.start].copy_from_slice(&grad[r.start..end]);
            }
            shard
        })
        .collect()
}

/// Phase 1: shard the worker's gradient and upload every shard in one request.
pub fn generate_and_upload_shards(
    worker: usize,
    grad: &GradientVector,
    plan: &ShardPlan,
    round: SyncRound,
    store: &mut Store,
) -> Result<SyncTiming, SyncError> {
    check_length(grad, plan)?;
    let items = split_shards(grad.as_slice(), plan)
        .iter()
        .enumerate()
        .map(|(j, shard)| (round.shard_key(j, worker), encode_shard(j as u32, shard)))
        .collect();
    let ul_shard = store.put_many(Client::Worker(worker), items)?;
    Ok(SyncTiming {
        ul_shard,
        ..SyncTiming::default()
    })
}

/// Phase 2: average the contributions of every shard this worker owns and
/// publish the aggregated shards.
pub fn aggregate_assigned(
    worker: usize,
    plan: &ShardPlan,
    round: SyncRound,
    store: &mut Store,
) -> Result<SyncTiming, SyncError> {
    let owned = plan.assigned_to(worker);
    if owned.is_empty() {
        return Ok(SyncTiming::default());
    }
    let keys: Vec<String> = owned
        .iter()
        .flat_map(|&j| (0..plan.n_workers).map(move |w| round.shard_key(j, w)))
        .collect();
    if let Some(missing) = keys.iter().find(|k| !store.contains(k)) {
        return Err(SyncError::MissingShard(missing.clone()));
    }
    let (blobs, dl_shard) = store.get_many(Client::Worker(worker), &keys)?;
    let mut items = Vec::with_capacity(owned.len());
    for (&j, contributions) in owned.iter().zip(blobs.chunks(plan.n_workers)) {
        let shards = contributions
            .iter()
            .map(|b| decode_shard(&b.bytes).map(|(_, v)| v))
            .collect::<Result<Vec<_>, _>>()?;
        if shards.iter().any(|s| s.len() != plan.shard_size) {
            return Err(SyncError::Corrupt(format!("shard {j} has the wrong size")));
        }
        let mean = elementwise_mean(&shards);
        items.push((round.aggregate_key(j), encode_shard(j as u32, &mean)));
    }
    let ul_aggr = store.put_many(Client::Worker(worker), items)?;
    Ok(SyncTiming {
        dl_shard,
        ul_aggr,
        ..SyncTiming::default()
    })
}

/// Phase 3: download every aggregated shard and reassemble the mean gradient.
pub fn reconstruct(
    worker: usize,
    plan: &ShardPlan,
    round: SyncRound,
    store: &mut Store,
) -> Result<(GradientVector, SyncTiming), SyncError> {
    let keys: Vec<String> = (0..plan.m_shards).map(|j| round.aggregate_key(j)).collect();
    if let Some(missing) = keys.iter().find(|k| !store.contains(k)) {
        return Err(SyncError::MissingAggregate(missing.clone()));
    }
    let (blobs, dl_grad) = store.get_many(Client::Worker(worker), &keys)?;
    let mut values = Vec::with_capacity(plan.padded_length());
    for (j, blob) in blobs.iter().enumerate() {
        let (index, shard) = decode_shard(&blob.bytes)?;
        if index as usize != j || shard.len() != plan.shard_size {
            return Err(SyncError::Corrupt(format!(
                "aggregated shard {j} is malformed"
            )));
        }
        values.extend_from_slice(&shard);
    }
    values.truncate(plan.grad_length);
    Ok((
        GradientVector::new(values)?,
        SyncTiming {
            dl_grad,
            ..SyncTiming::default()
        },
    ))
}

/// Runs all three phases for every worker in order. Returns each worker's
/// reconstructed gradient and its timing.
pub fn hierarchical_sync(
    grads: &[GradientVector],
    plan: &ShardPlan,
    round: SyncRound,
    store: &mut Store,
) -> Result<(Vec<GradientVector>, Vec<SyncTiming>), SyncError> {
    if grads.len() != plan.n_workers {
        return Err(SyncError::InvalidPlan(format!(
            "{} gradients for a plan with {} workers",
            grads.len(),
            plan.n_workers
        )));
    }
    let mut timings = Vec::with_capacity(grads.len());
    for (w, g) in grads.iter().enumerate() {
        timings.push(generate_and_upload_shards(w, g, plan, round, store)?);
    }
    for (w, t) in timings.iter_mut().enumerate() {
        *t = t.merge(&aggregate_assigned(w, plan, round, store)?);
    }
    let mut out = Vec::with_capacity(grads.len());
    for (w, t) in timings.iter_mut().enumerate() {
        let (g, dl) = reconstruct(w, plan, round, store)?;
        *t = t.merge(&dl);
        out.push(g);
    }
    Ok((out, timings))
}

/// Baseline: each worker uploads its full gradient, then downloads all `n`
/// gradients and averages them locally.
pub fn centralized_sync(
    worker_grads: &[GradientVector],
    round: SyncRound,
    store: &mut Store,
) -> Result<(GradientVector, Vec<SyncTiming>), SyncError> {
    let Some(first) = worker_grads.first() else {
        return Err(SyncError::InvalidPlan(
            "centralized sync needs at least one worker".into(),
        ));
    };
    let len = first.len();
    let mut timings = vec![SyncTiming::default(); worker_grads.len()];
    for (w, g) in worker_grads.iter().enumerate() {
        if g.len() != len {
            return Err(SyncError::LengthMismatch {
                expected: len,
                actual: g.len(),
            });
        }
        timings[w].ul_grad = store.put_by(
            Client::Worker(w),
            &round.gradient_key(w),
            encode_shard(w as u32, g.as_slice()),
        )?;
    }
    let keys: Vec<String> = (0..worker_grads.len())
        .map(|w| round.gradient_key(w))
        .collect();
    let mut mean = None;
    for (w, timing) in timings.iter_mut().enumerate() {
        let (blobs, dl_grad) = store.get_many(Client::Worker(w), &keys)?;
        timing.dl_grad = dl_grad;
        // every worker averages the same downloads; decode once
        if mean.is_none() {
            let grads = blobs
                .iter()
                .map(|b| decode_shard(&b.bytes).map(|(_, v)| v))
                .collect::<Result<Vec<_>, _>>()?;
            mean = Some(elementwise_mean(&grads));
        }
    }
    Ok((GradientVector::new(mean.unwrap_or_default())?, timings))
}
