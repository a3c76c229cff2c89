//! Binary checkpoint format.
//!
//! Layout (little-endian): magic `SMLTCKPT`, u32 version, u64 epoch,
//! u64 iteration, u64 data cursor, u64 parameter count followed by that many
//! f64 values, u64 batch size, u8 success flag, u32 rng-state length followed
//! by the rng-state bytes.

use bytes::{Buf, BufMut, Bytes, BytesMut};
use thiserror::Error;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SMLTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("bad checkpoint magic")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("{0} trailing bytes after checkpoint")]
    TrailingBytes(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub epoch: u64,
    /// Iteration within the epoch that the next step will run.
    pub iteration: u64,
    /// Position in the epoch's sample order of the next minibatch.
    pub data_cursor: u64,
    pub parameters: Vec<f64>,
    pub batch_size: u64,
    pub success_flag: bool,
    pub rng_state: Vec<u8>,
}

pub fn checkpoint_key(worker: usize, epoch: u64, iteration: u64) -> String {
    format!("ckpt/{worker}/{epoch}/{iteration}")
}

impl Checkpoint {
    pub fn encode(&self) -> Bytes {
        let mut buf =
            BytesMut::with_capacity(64 + 8 * self.parameters.len() + self.rng_state.len());
        buf.put_slice(CHECKPOINT_MAGIC);
        buf.put_u32_le(CHECKPOINT_VERSION);
        buf.put_u64_le(self.epoch);
        buf.put_u64_le(self.iteration);
        buf.put_u64_le(self.data_cursor);
        buf.put_u64_le(self.parameters.len() as u64);
        for p in &self.parameters {
            buf.put_f64_le(*p);
        }
        buf.put_u64_le(self.batch_size);
        buf.put_u8(self.success_flag as u8);
        buf.put_u32_le(self.rng_state.len() as u32);
        buf.put_slice(&self.rng_state);
        buf.freeze()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 12 {
            return Err(if bytes.len() >= 8 && &bytes[..8] != CHECKPOINT_MAGIC {
                CheckpointError::BadMagic
            } else {
                CheckpointError::Truncated
            });
        }
        if &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut buf = &bytes[8..];
        let version = buf.get_u32_le();
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let need = |buf: &&[u8], n: usize| {
            if buf.remaining() < n {
                Err(CheckpointError::Truncated)
            } else {
                Ok(())
            }
        };
        need(&buf, 32)?;
        let epoch = buf.get_u64_le();
        let iteration = buf.get_u64_le();
        let data_cursor = buf.get_u64_le();
        let count = buf.get_u64_le() as usize;
        need(
            &buf,
            count.checked_mul(8).ok_or(CheckpointError::Truncated)?,
        )?;
        let parameters = (0..count).map(|_| buf.get_f64_le()).collect();
        need(&buf, 13)?;
        let batch_size = buf.get_u64_le();
        let success_flag = buf.get_u8() != 0;
        let rng_len = buf.get_u32_le() as usize;
        need(&buf, rng_len)?;
        let rng_state = buf[..rng_len].to_vec();
        buf.advance(rng_len);
        if buf.has_remaining() {
            return Err(CheckpointError::TrailingBytes(buf.remaining()));
        }
        Ok(Self {
            epoch,
            iteration,
            data_cursor,
            parameters,
            batch_size,
            success_flag,
            rng_state,
        })
    }
}
