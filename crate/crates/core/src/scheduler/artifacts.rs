//! Artifact manager: puts the training data and model description in the
//! object store before any worker runs.

use crate::storage::{StorageError, Store};
use crate::trainer::data::{
    chunk_key, encode_samples, plan_chunks, ChunkInfo, Manifest, MANIFEST_KEY,
};
use crate::trainer::{Dataset, ModelConfig};

pub const MODEL_CONFIG_KEY: &str = "model/config.json";

/// Writes `data` as chunks of at most `max_chunk_bytes` plus a manifest and
/// the model configuration. Uploading the same inputs again rewrites the same
/// keys with the same bytes. Returns the manifest and the transfer time.
pub fn upload_artifacts(
    data: &Dataset,
    model: &ModelConfig,
    max_chunk_bytes: u64,
    store: &mut Store,
) -> Result<(Manifest, f64), StorageError> {
    let sample_bytes = data.sample_bytes() as u64;
    let mut time = 0.0;
    let mut chunks = Vec::new();
    for (i, (first, count)) in plan_chunks(data.len() as u64, sample_bytes, max_chunk_bytes)
        .into_iter()
        .enumerate()
    {
        let bytes = encode_samples(data, first as usize..(first + count) as usize);
        let key = chunk_key(i);
        chunks.push(ChunkInfo {
            key: key.clone(),
            first_sample: first,
            n_samples: count,
            bytes: bytes.len() as u64,
        });
        time += store.put(&key, bytes)?;
    }
    let manifest = Manifest {
        n_samples: data.len() as u64,
        n_features: data.n_features,
        total_bytes: data.len() as u64 * sample_bytes,
        chunks,
    };
    time += store.put(
        MANIFEST_KEY,
        serde_json::to_vec(&manifest).expect("manifest serializes"),
    )?;
    time += store.put(
        MODEL_CONFIG_KEY,
        serde_json::to_vec(model).expect("config serializes"),
    )?;
    Ok((manifest, time))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::storage::StoreParams;
    use crate::trainer::{fetch_partition, synthesize, DatasetConfig, ModelKind};

    fn model() -> ModelConfig {
        ModelConfig {
            kind: ModelKind::LinearRegression,
            n_features: 3,
            hidden: 0,
        }
    }

    #[test]
    fn chunk_count_and_byte_sum() {
        let data = synthesize(
            &DatasetConfig {
                n_samples: 1000,
                ..DatasetConfig::default()
            },
            3,
            1,
        );
        let mut store = Store::new(StoreParams::object_store());
        // 32-byte samples, 3200-byte chunk cap -> 100 samples per chunk
        let (m, t) = upload_artifacts(&data, &model(), 3200, &mut store).unwrap();
        assert_eq!(m.chunks.len(), 10);
        assert_eq!(m.chunks.iter().map(|c| c.bytes).sum::<u64>(), 32_000);
        assert!(m.chunks.iter().all(|c| c.bytes <= 3200));
        assert!(t > 0.0);
        assert!(store.contains(MODEL_CONFIG_KEY));
    }

    #[test]
    fn reupload_is_idempotent() {
        let data = synthesize(
            &DatasetConfig {
                n_samples: 77,
                ..DatasetConfig::default()
            },
            3,
            1,
        );
        let mut a = Store::new(StoreParams::object_store());
        let (m1, _) = upload_artifacts(&data, &model(), 1000, &mut a).unwrap();
        let keys = a.list_keys("");
        let blobs: Vec<_> = keys.iter().map(|k| a.get(k).unwrap().0).collect();
        let (m2, _) = upload_artifacts(&data, &model(), 1000, &mut a).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(a.list_keys(""), keys);
        assert_eq!(
            keys.iter().map(|k| a.get(k).unwrap().0).collect::<Vec<_>>(),
            blobs
        );
    }

    #[test]
    fn empty_dataset_fails_at_fetch() {
        let data = Dataset::empty(3);
        let mut store = Store::new(StoreParams::object_store());
        let (m, _) = upload_artifacts(&data, &model(), 1000, &mut store).unwrap();
        assert!(m.chunks.is_empty());
        assert!(fetch_partition(0, 1, 0, 0, 0, &mut store).is_err());
    }
}
