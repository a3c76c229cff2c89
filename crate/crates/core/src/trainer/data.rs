//! Synthetic datasets, their chunked object-store layout, and the per-worker
//! data iterator / minibatch buffer.

use std::collections::BTreeSet;

use bytes::{Buf, BufMut, Bytes, BytesMut};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::TrainerError;
use crate::storage::{Client, Store};

/// Largest chunk the artifact manager writes: 250 MiB.
pub const DEFAULT_MAX_CHUNK_BYTES: u64 = 250 * 1024 * 1024;
pub const MANIFEST_KEY: &str = "dataset/manifest.json";

/// Row-major samples with one regression label each.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub n_features: usize,
    pub features: Vec<f64>,
    pub labels: Vec<f64>,
}

impl Dataset {
    pub fn new(
        n_features: usize,
        features: Vec<f64>,
        labels: Vec<f64>,
    ) -> Result<Self, TrainerError> {
        if features.len() != n_features * labels.len() {
            return Err(TrainerError::InvalidData(format!(
                "{} feature values for {} samples of width {n_features}",
                features.len(),
                labels.len()
            )));
        }
        Ok(Self {
            n_features,
            features,
            labels,
        })
    }

    pub fn empty(n_features: usize) -> Self {
        Self {
            n_features,
            features: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut out = Dataset::empty(self.n_features);
        for &i in indices {
            out.features.extend_from_slice(self.row(i));
            out.labels.push(self.labels[i]);
        }
        out
    }

    pub fn slice(&self, range: std::ops::Range<usize>) -> Dataset {
        Dataset {
            n_features: self.n_features,
            features: self.features[range.start * self.n_features..range.end * self.n_features]
                .to_vec(),
            labels: self.labels[range].to_vec(),
        }
    }

    pub fn sample_bytes(&self) -> usize {
        8 * (self.n_features + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_samples: usize,
    /// Standard deviation of Gaussian label noise.
    pub noise: f64,
    pub max_chunk_bytes: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_samples: 1024,
            noise: 0.0,
            max_chunk_bytes: DEFAULT_MAX_CHUNK_BYTES,
        }
    }
}

/// Gaussian features with labels from a planted linear teacher.
pub fn synthesize(config: &DatasetConfig, n_features: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (n_features.max(1) as f64).sqrt();
    let teacher: Vec<f64> = (0..n_features)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            scale * z
        })
        .collect();
    let bias: f64 = StandardNormal.sample(&mut rng);
    let mut features = Vec::with_capacity(config.n_samples * n_features);
    let mut labels = Vec::with_capacity(config.n_samples);
    for _ in 0..config.n_samples {
        let x: Vec<f64> = (0..n_features)
            .map(|_| -> f64 { StandardNormal.sample(&mut rng) })
            .collect();
        let noise: f64 = StandardNormal.sample(&mut rng);
        labels.push(
            teacher.iter().zip(&x).map(|(w, v)| w * v).sum::<f64>() + bias + config.noise * noise,
        );
        features.extend(x);
    }
    Dataset {
        n_features,
        features,
        labels,
    }
}

/// Sample ranges `(first, count)` of each chunk; chunks never split a sample
/// and never exceed `max_chunk_bytes` (unless one sample alone does).
pub fn plan_chunks(n_samples: u64, sample_bytes: u64, max_chunk_bytes: u64) -> Vec<(u64, u64)> {
    let per_chunk = (max_chunk_bytes / sample_bytes.max(1)).max(1);
    (0..n_samples.div_ceil(per_chunk))
        .map(|c| {
            let first = c * per_chunk;
            (first, per_chunk.min(n_samples - first))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkInfo {
    pub key: String,
    pub first_sample: u64,
    pub n_samples: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub n_samples: u64,
    pub n_features: usize,
    pub total_bytes: u64,
    pub chunks: Vec<ChunkInfo>,
}

impl Manifest {
    pub fn chunk_of(&self, sample: u64) -> usize {
        self.chunks
            .partition_point(|c| c.first_sample + c.n_samples <= sample)
    }
}

pub fn chunk_key(index: usize) -> String {
    format!("dataset/chunk/{index:05}")
}

pub fn encode_samples(data: &Dataset, range: std::ops::Range<usize>) -> Bytes {
    let mut buf = BytesMut::with_capacity(range.len() * data.sample_bytes());
    for i in range {
        for v in data.row(i) {
            buf.put_f64_le(*v);
        }
        buf.put_f64_le(data.labels[i]);
    }
    buf.freeze()
}

pub fn decode_samples(mut bytes: &[u8], n_features: usize) -> Result<Dataset, TrainerError> {
    let width = 8 * (n_features + 1);
    if !bytes.len().is_multiple_of(width) {
        return Err(TrainerError::InvalidData(format!(
            "chunk of {} bytes is not a whole number of samples",
            bytes.len()
        )));
    }
    let n = bytes.len() / width;
    let mut out = Dataset::empty(n_features);
    for _ in 0..n {
        for _ in 0..n_features {
            out.features.push(bytes.get_f64_le());
        }
        out.labels.push(bytes.get_f64_le());
    }
    Ok(out)
}

/// Sample order of `epoch`, shared by every worker.
pub fn epoch_permutation(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Number of positions `p` in `[lo, hi)` with `(p - base) % n == worker`.
fn owned_before(base: usize, worker: usize, n: usize, pos: usize) -> usize {
    // count of k >= 0 with base + worker + k*n < pos
    (pos.saturating_sub(base + worker)).div_ceil(n)
}

/// Local share of one epoch: positions `base + worker + k·n` of the epoch's
/// sample order, for every `k` that stays inside the epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub worker: usize,
    pub n_workers: usize,
    pub epoch: u64,
    /// Epoch position where this partitioning starts.
    pub base: usize,
    pub epoch_len: usize,
    pub samples: Dataset,
}

impl Partition {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Number of local samples whose epoch position lies in `[lo, hi)`.
    pub fn owned_in(&self, lo: usize, hi: usize) -> usize {
        owned_before(self.base, self.worker, self.n_workers, hi)
            - owned_before(self.base, self.worker, self.n_workers, lo)
    }
}

/// Data iterator: downloads the worker's share of `epoch` from the object
/// store. Returns the partition and the simulated transfer time.
pub fn fetch_partition(
    worker: usize,
    n_workers: usize,
    epoch: u64,
    base: usize,
    data_seed: u64,
    store: &mut Store,
) -> Result<(Partition, f64), TrainerError> {
    if n_workers == 0 || worker >= n_workers {
        return Err(TrainerError::InvalidData(format!(
            "worker {worker} of {n_workers}"
        )));
    }
    let client = Client::Worker(worker);
    let (blob, mut time) = store.get_by(client, MANIFEST_KEY)?;
    let manifest: Manifest = serde_json::from_slice(&blob.bytes)
        .map_err(|e| TrainerError::InvalidData(format!("manifest: {e}")))?;
    let epoch_len = manifest.n_samples as usize;
    if epoch_len == 0 {
        return Err(TrainerError::InvalidData("dataset has no samples".into()));
    }
    let order = epoch_permutation(data_seed, epoch, epoch_len);
    let ids: Vec<usize> = (base + worker..epoch_len)
        .step_by(n_workers)
        .map(|p| order[p])
        .collect();
    let needed: BTreeSet<usize> = ids.iter().map(|&i| manifest.chunk_of(i as u64)).collect();
    let keys: Vec<&str> = needed
        .iter()
        .map(|&c| manifest.chunks[c].key.as_str())
        .collect();
    let mut samples = Dataset::empty(manifest.n_features);
    if !keys.is_empty() {
        let (blobs, t) = store.get_many(client, &keys)?;
        time += t;
        let mut chunks = std::collections::BTreeMap::new();
        for (&c, blob) in needed.iter().zip(&blobs) {
            chunks.insert(c, decode_samples(&blob.bytes, manifest.n_features)?);
        }
        for &id in &ids {
            let c = manifest.chunk_of(id as u64);
            let chunk = &chunks[&c];
            let local = id - manifest.chunks[c].first_sample as usize;
            samples.features.extend_from_slice(chunk.row(local));
            samples.labels.push(chunk.labels[local]);
        }
    }
    Ok((
        Partition {
            worker,
            n_workers,
            epoch,
            base,
            epoch_len,
            samples,
        },
        time,
    ))
}

/// Minibatch buffer over a partition. The cursor is a position in the
/// epoch's global sample order.
#[derive(Debug, Clone, PartialEq)]
pub struct MinibatchBuffer {
    pub partition: Partition,
    pub cursor: usize,
}

impl MinibatchBuffer {
    pub fn new(partition: Partition, cursor: usize) -> Self {
        debug_assert!(cursor >= partition.base);
        Self { partition, cursor }
    }

    pub fn epoch_complete(&self) -> bool {
        self.cursor >= self.partition.epoch_len
    }

    /// Local samples of the next global minibatch `[cursor, cursor + b)`;
    /// `None` once the epoch is exhausted. Worker `i` of `n` receives the
    /// positions congruent to `i`, so local sizes differ by at most one.
    pub fn next_minibatch(&mut self, global_batch: usize) -> Option<Dataset> {
        if self.epoch_complete() || global_batch == 0 {
            return None;
        }
        let p = &self.partition;
        let hi = (self.cursor + global_batch).min(p.epoch_len);
        let start = owned_before(p.base, p.worker, p.n_workers, self.cursor);
        let end = owned_before(p.base, p.worker, p.n_workers, hi);
        self.cursor = hi;
        Some(p.samples.slice(start..end))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::storage::StoreParams;

    fn upload(data: &Dataset, max_chunk: u64) -> Store {
        let mut store = Store::new(StoreParams::object_store());
        let plan = plan_chunks(data.len() as u64, data.sample_bytes() as u64, max_chunk);
        let mut chunks = Vec::new();
        for (i, (first, count)) in plan.into_iter().enumerate() {
            let bytes = encode_samples(data, first as usize..(first + count) as usize);
            chunks.push(ChunkInfo {
                key: chunk_key(i),
                first_sample: first,
                n_samples: count,
                bytes: bytes.len() as u64,
            });
            store.put(&chunk_key(i), bytes).unwrap();
        }
        let manifest = Manifest {
            n_samples: data.len() as u64,
            n_features: data.n_features,
            total_bytes: (data.len() * data.sample_bytes()) as u64,
            chunks,
        };
        store
            .put(MANIFEST_KEY, serde_json::to_vec(&manifest).unwrap())
            .unwrap();
        store
    }

    fn data(n: usize) -> Dataset {
        synthesize(
            &DatasetConfig {
                n_samples: n,
                ..DatasetConfig::default()
            },
            3,
            5,
        )
    }

    #[test]
    fn chunking_examples() {
        const MB: u64 = 1024 * 1024;
        let chunks = plan_chunks(600 * MB / 8, 8, DEFAULT_MAX_CHUNK_BYTES);
        assert_eq!(chunks.len(), 3);
        assert_eq!(chunks.iter().map(|c| c.1 * 8).sum::<u64>(), 600 * MB);
        assert!(chunks.iter().all(|c| c.1 * 8 <= DEFAULT_MAX_CHUNK_BYTES));
        assert!(plan_chunks(0, 32, DEFAULT_MAX_CHUNK_BYTES).is_empty());
        assert_eq!(
            plan_chunks(10, 32, 100),
            vec![(0, 3), (3, 3), (6, 3), (9, 1)]
        );
    }

    #[test]
    fn sample_codec_round_trip() {
        let d = data(7);
        assert_eq!(decode_samples(&encode_samples(&d, 0..7), 3).unwrap(), d);
        assert!(decode_samples(&[0u8; 5], 3).is_err());
    }

    #[test]
    fn modular_split_sizes_and_disjoint_union() {
        let d = data(100);
        let mut store = upload(&d, 640);
        let mut seen = Vec::new();
        for w in 0..4 {
            let (p, t) = fetch_partition(w, 4, 2, 0, 99, &mut store).unwrap();
            assert_eq!(p.len(), 25);
            assert!(t > 0.0);
            for i in 0..p.len() {
                seen.push(p.samples.labels[i].to_bits());
            }
        }
        let mut all: Vec<u64> = d.labels.iter().map(|v| v.to_bits()).collect();
        seen.sort_unstable();
        all.sort_unstable();
        assert_eq!(seen, all);

        let (p, _) = fetch_partition(0, 1, 2, 0, 99, &mut store).unwrap();
        assert_eq!(p.len(), 100);
    }

    #[test]
    fn missing_chunk_is_a_fault() {
        let d = data(20);
        let mut store = upload(&d, 64);
        store.delete_prefix("dataset/chunk/");
        let r = fetch_partition(0, 2, 0, 0, 1, &mut store);
        assert!(matches!(r, Err(TrainerError::Storage(_))), "{r:?}");
    }

    #[test]
    fn minibatch_split_with_remainder() {
        let d = data(40);
        let mut store = upload(&d, DEFAULT_MAX_CHUNK_BYTES);
        let sizes: Vec<usize> = (0..4)
            .map(|w| {
                let (p, _) = fetch_partition(w, 4, 0, 0, 3, &mut store).unwrap();
                MinibatchBuffer::new(p, 0).next_minibatch(10).unwrap().len()
            })
            .collect();
        assert_eq!(sizes, vec![3, 3, 2, 2]);
        assert_eq!(sizes.iter().sum::<usize>(), 10);

        let (p, _) = fetch_partition(0, 8, 0, 0, 3, &mut store).unwrap();
        let mut buf = MinibatchBuffer::new(p, 0);
        assert_eq!(buf.next_minibatch(64).unwrap().len(), 5);
        assert!(buf.next_minibatch(64).is_none());
    }

    #[test]
    fn workers_together_cover_the_global_minibatch() {
        let d = data(64);
        let mut store = upload(&d, DEFAULT_MAX_CHUNK_BYTES);
        let order = epoch_permutation(3, 1, 64);
        for n in [1, 2, 4, 8] {
            let mut got = Vec::new();
            for w in 0..n {
                let (p, _) = fetch_partition(w, n, 1, 0, 3, &mut store).unwrap();
                let mut buf = MinibatchBuffer::new(p, 0);
                buf.next_minibatch(16).unwrap();
                let mb = buf.next_minibatch(16).unwrap();
                got.extend(mb.labels.iter().map(|v| v.to_bits()));
            }
            let mut want: Vec<u64> = order[16..32]
                .iter()
                .map(|&i| d.labels[i].to_bits())
                .collect();
            got.sort_unstable();
            want.sort_unstable();
            assert_eq!(got, want, "n={n}");
        }
    }

    #[test]
    fn repartition_mid_epoch_loses_nothing() {
        let d = data(30);
        let mut store = upload(&d, DEFAULT_MAX_CHUNK_BYTES);
        let order = epoch_permutation(8, 0, 30);
        let mut got = Vec::new();
        for w in 0..3 {
            let (p, _) = fetch_partition(w, 3, 0, 12, 8, &mut store).unwrap();
            assert_eq!(p.owned_in(12, 30), p.len());
            got.extend(p.samples.labels.iter().map(|v| v.to_bits()));
        }
        let mut want: Vec<u64> = order[12..].iter().map(|&i| d.labels[i].to_bits()).collect();
        got.sort_unstable();
        want.sort_unstable();
        assert_eq!(got, want);
    }

    #[test]
    fn permutation_is_seeded() {
        assert_eq!(epoch_permutation(1, 2, 50), epoch_permutation(1, 2, 50));
        assert_ne!(epoch_permutation(1, 2, 50), epoch_permutation(1, 3, 50));
    }
}
