//! Hybrid storage tiers.
//!
//! Both tiers share one implementation: an ordered in-memory key-value map
//! whose operations return the simulated transfer time they cost the caller.
//! The object store holds bulk artifacts (datasets, checkpoints, code) and the
//! parameter store holds per-iteration gradient traffic. Batched operations
//! (`put_many`/`get_many`) pay the base latency once, like a pipelined
//! multi-key request.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use bytes::Bytes;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StorageError {
    #[error("key not found: {0}")]
    NotFound(String),
    #[error("empty key")]
    EmptyKey,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoreParams {
    /// Seconds per request.
    pub base_latency: f64,
    /// Bytes per second.
    pub bandwidth: f64,
    /// Dollars per second while a synchronization phase is active.
    #[serde(default)]
    pub standing_cost_per_second: f64,
    /// Total bytes per second the store serves across all clients. When set,
    /// a phase in which every worker transfers concurrently takes at least
    /// its total bytes divided by this rate.
    #[serde(default)]
    pub aggregate_bandwidth: Option<f64>,
}

impl StoreParams {
    pub fn object_store() -> Self {
        Self {
            base_latency: 0.020,
            bandwidth: 100e6,
            standing_cost_per_second: 0.0,
            aggregate_bandwidth: None,
        }
    }

    pub fn parameter_store() -> Self {
        Self {
            base_latency: 0.001,
            bandwidth: 1e9,
            standing_cost_per_second: 0.0,
            aggregate_bandwidth: None,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.base_latency >= 0.0) {
            return Err("base_latency must be >= 0".into());
        }
        if !(self.bandwidth > 0.0) {
            return Err("bandwidth must be > 0".into());
        }
        if !(self.standing_cost_per_second >= 0.0) {
            return Err("standing_cost_per_second must be >= 0".into());
        }
        if self.aggregate_bandwidth.is_some_and(|b| !(b > 0.0)) {
            return Err("aggregate_bandwidth must be > 0".into());
        }
        Ok(())
    }

    /// Time for one request moving `size` bytes.
    pub fn transfer_time(&self, size: usize) -> f64 {
        self.base_latency + size as f64 / self.bandwidth
    }

    /// Lower bound on a phase moving `total_bytes` across all clients.
    pub fn contention_floor(&self, total_bytes: u64) -> f64 {
        self.aggregate_bandwidth
            .map_or(0.0, |b| total_bytes as f64 / b)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Blob {
    pub key: String,
    pub bytes: Bytes,
}

impl Blob {
    pub fn size(&self) -> usize {
        self.bytes.len()
    }
}

/// Who issued a request; used only for traffic accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Client {
    Anonymous,
    Worker(usize),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Traffic {
    pub requests: u64,
    pub bytes_up: u64,
    pub bytes_down: u64,
}

#[derive(Debug, Clone)]
pub struct Store {
    params: StoreParams,
    objects: BTreeMap<String, Bytes>,
    traffic: BTreeMap<Client, Traffic>,
}

impl Store {
    pub fn new(params: StoreParams) -> Self {
        Self {
            params,
            objects: BTreeMap::new(),
            traffic: BTreeMap::new(),
        }
    }

    pub fn params(&self) -> &StoreParams {
        &self.params
    }

    pub fn put(&mut self, key: &str, bytes: impl Into<Bytes>) -> Result<f64, StorageError> {
        self.put_by(Client::Anonymous, key, bytes)
    }

    pub fn put_by(
        &mut self,
        client: Client,
        key: &str,
        bytes: impl Into<Bytes>,
    ) -> Result<f64, StorageError> {
        if key.is_empty() {
            return Err(StorageError::EmptyKey);
        }
        let bytes = bytes.into();
        let size = bytes.len();
        self.objects.insert(key.to_string(), bytes);
        let t = self.traffic.entry(client).or_default();
        t.requests += 1;
        t.bytes_up += size as u64;
        Ok(self.params.transfer_time(size))
    }

    /// Uploads several objects in one request.
    pub fn put_many(
        &mut self,
        client: Client,
        items: Vec<(String, Bytes)>,
    ) -> Result<f64, StorageError> {
        if items.iter().any(|(k, _)| k.is_empty()) {
            return Err(StorageError::EmptyKey);
        }
        let mut size = 0;
        for (key, bytes) in items {
            size += bytes.len();
            self.objects.insert(key, bytes);
        }
        let t = self.traffic.entry(client).or_default();
        t.requests += 1;
        t.bytes_up += size as u64;
        Ok(self.params.transfer_time(size))
    }

    pub fn get(&mut self, key: &str) -> Result<(Blob, f64), StorageError> {
        self.get_by(Client::Anonymous, key)
    }

    pub fn get_by(&mut self, client: Client, key: &str) -> Result<(Blob, f64), StorageError> {
        let bytes = self
            .objects
            .get(key)
            .cloned()
            .ok_or_else(|| StorageError::NotFound(key.to_string()))?;
        let size = bytes.len();
        let t = self.traffic.entry(client).or_default();
        t.requests += 1;
        t.bytes_down += size as u64;
        Ok((
            Blob {
                key: key.to_string(),
                bytes,
            },
            self.params.transfer_time(size),
        ))
    }

    /// Downloads several objects in one request. Fails without charging
    /// anything if any key is missing.
    pub fn get_many<S: AsRef<str>>(
        &mut self,
        client: Client,
        keys: &[S],
    ) -> Result<(Vec<Blob>, f64), StorageError> {
        let mut blobs = Vec::with_capacity(keys.len());
        for key in keys {
            let key = key.as_ref();
            let bytes = self
                .objects
                .get(key)
                .cloned()
                .ok_or_else(|| StorageError::NotFound(key.to_string()))?;
            blobs.push(Blob {
                key: key.to_string(),
                bytes,
            });
        }
        let size: usize = blobs.iter().map(Blob::size).sum();
        let t = self.traffic.entry(client).or_default();
        t.requests += 1;
        t.bytes_down += size as u64;
        Ok((blobs, self.params.transfer_time(size)))
    }

    pub fn contains(&self, key: &str) -> bool {
        self.objects.contains_key(key)
    }

    /// Keys starting with `prefix`, in lexicographic order.
    pub fn list_keys(&self, prefix: &str) -> Vec<String> {
        self.objects
            .range(prefix.to_string()..)
            .take_while(|(k, _)| k.starts_with(prefix))
            .map(|(k, _)| k.clone())
            .collect()
    }

    /// Removes every key under `prefix`. Housekeeping; not charged.
    pub fn delete_prefix(&mut self, prefix: &str) -> usize {
        let keys = self.list_keys(prefix);
        for k in &keys {
            self.objects.remove(k);
        }
        keys.len()
    }

    pub fn delete(&mut self, key: &str) -> bool {
        self.objects.remove(key).is_some()
    }

    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    pub fn traffic(&self, client: Client) -> Traffic {
        self.traffic.get(&client).copied().unwrap_or_default()
    }

    pub fn reset_traffic(&mut self) {
        self.traffic.clear();
    }

    /// Writes one file per key into `dir`. '/' in keys is escaped as "%2F".
    pub fn dump_to_dir(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        for (key, bytes) in &self.objects {
            let name = key.replace('%', "%25").replace('/', "%2F");
            fs::write(dir.join(name), bytes)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn put_time_examples() {
        let mut s = Store::new(StoreParams {
            base_latency: 0.005,
            bandwidth: 100e6,
            standing_cost_per_second: 0.0,
            aggregate_bandwidth: None,
        });
        let t = s.put("data", vec![0u8; 100_000_000]).unwrap();
        assert!((t - 1.005).abs() < 1e-12);
        assert_eq!(s.put("empty", Vec::new()).unwrap(), 0.005);
    }

    #[test]
    fn get_shard_time() {
        let mut s = Store::new(StoreParams::parameter_store());
        s.put("shard", vec![1u8; 4_000_000]).unwrap();
        let (blob, t) = s.get("shard").unwrap();
        assert_eq!(blob.size(), 4_000_000);
        assert!((t - (0.001 + 4e6 / 1e9)).abs() < 1e-12);
    }

    #[test]
    fn missing_key() {
        let mut s = Store::new(StoreParams::object_store());
        assert_eq!(s.get("nope"), Err(StorageError::NotFound("nope".into())));
        s.put("a", vec![1u8]).unwrap();
        assert!(s.get_many(Client::Worker(0), &["a", "b"]).is_err());
        assert_eq!(s.traffic(Client::Worker(0)), Traffic::default());
        assert_eq!(s.put("", vec![1u8]), Err(StorageError::EmptyKey));
    }

    #[test]
    fn listing_is_sorted_and_prefix_scoped() {
        let mut s = Store::new(StoreParams::object_store());
        assert!(s.list_keys("").is_empty());
        for k in ["b/1", "a/2", "a/1"] {
            s.put(k, vec![0u8]).unwrap();
        }
        assert_eq!(s.list_keys("a/"), vec!["a/1", "a/2"]);
        assert_eq!(s.list_keys(""), vec!["a/1", "a/2", "b/1"]);
        assert_eq!(s.delete_prefix("a/"), 2);
        assert_eq!(s.list_keys(""), vec!["b/1"]);
    }

    #[test]
    fn batched_ops_pay_latency_once() {
        let params = StoreParams::parameter_store();
        let mut s = Store::new(params.clone());
        let items = (0..4)
            .map(|i| (format!("k{i}"), Bytes::from(vec![0u8; 1000])))
            .collect();
        let up = s.put_many(Client::Worker(1), items).unwrap();
        assert_eq!(up, params.transfer_time(4000));
        let (blobs, down) = s.get_many(Client::Worker(2), &["k0", "k3"]).unwrap();
        assert_eq!(blobs.len(), 2);
        assert_eq!(down, params.transfer_time(2000));
        assert_eq!(s.traffic(Client::Worker(1)).bytes_up, 4000);
        assert_eq!(s.traffic(Client::Worker(2)).bytes_down, 2000);
    }

    #[test]
    fn default_tiers_are_ordered() {
        assert!(
            StoreParams::parameter_store().base_latency < StoreParams::object_store().base_latency
        );
    }

    #[test]
    fn dump_writes_one_file_per_key() {
        let dir = std::env::temp_dir().join(format!("faastrain-dump-{}", std::process::id()));
        let mut s = Store::new(StoreParams::object_store());
        s.put("ckpt/0/1", vec![1u8, 2]).unwrap();
        s.put("manifest", vec![3u8]).unwrap();
        s.dump_to_dir(&dir).unwrap();
        assert_eq!(std::fs::read(dir.join("ckpt%2F0%2F1")).unwrap(), vec![1, 2]);
        assert_eq!(std::fs::read(dir.join("manifest")).unwrap(), vec![3]);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    proptest! {
        #[test]
        fn round_trip_and_affine_time(payload in proptest::collection::vec(any::<u8>(), 0..2048), latency in 0.0f64..0.1, bw in 1.0f64..1e9) {
            let params = StoreParams { base_latency: latency, bandwidth: bw, standing_cost_per_second: 0.0, aggregate_bandwidth: None };
            let mut s = Store::new(params);
            let up = s.put("x/y", payload.clone()).unwrap();
            let (blob, down) = s.get("x/y").unwrap();
            prop_assert_eq!(&blob.bytes[..], &payload[..]);
            prop_assert_eq!(up, down);
            prop_assert!((up - (latency + payload.len() as f64 / bw)).abs() <= 1e-12 * (1.0 + up));
        }
    }
}
