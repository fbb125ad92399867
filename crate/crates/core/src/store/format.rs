//! Byte layout of the embedding store.
//!
//! A store is a directory holding `manifest.tbe` and one record file per
//! scenario, `scenario_<id>.tbr`. All integers and floats are little-endian.
//!
//! Manifest:
//!
//! ```text
//! magic "TBE1", version u32
//! channels u32, height u32, width u32, grid_cells u32
//! record_count u64
//! base_digest [u8; 64]   (hex SHA-256 of the base model parameters)
//! n_scenarios u32
//! per scenario: scenario_id u64, ego_id u32, n_frames u32
//! ```
//!
//! Record file: a 16-byte header (`"TBE1"`, version u32, stride u32,
//! n_records u32) followed by `n_records` records of exactly `stride` bytes,
//! ordered by frame index:
//!
//! ```text
//! scenario_id u64, frame_index i64, ego_id u32, n_cavs_available u32
//! fused    f32 x C*H*W   (row-major, channel then row then column)
//! ego_only f32 x C*H*W
//! gt       ceil(grid_cells^2 / 8) bytes, cell k at bit k % 8 of byte k / 8
//! ```

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

pub const STORE_MAGIC: &[u8; 4] = b"TBE1";
pub const STORE_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.tbe";
pub const RECORD_HEADER: usize = 16;
const RECORD_META: usize = 24;

pub fn record_file_name(scenario_id: u64) -> String {
    format!("scenario_{scenario_id:06}.tbr")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub grid_cells: usize,
}

impl Geometry {
    pub fn embedding_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn gt_bytes(&self) -> usize {
        (self.grid_cells * self.grid_cells).div_ceil(8)
    }

    pub fn stride(&self) -> usize {
        RECORD_META + 8 * self.embedding_len() + self.gt_bytes()
    }
}

pub fn pack_bits(gt: &Array2<bool>, out: &mut Vec<u8>) {
    let start = out.len();
    out.resize(start + gt.len().div_ceil(8), 0);
    for (k, &v) in gt.iter().enumerate() {
        if v {
            out[start + k / 8] |= 1 << (k % 8);
        }
    }
}

pub fn unpack_bits(bytes: &[u8], n: usize) -> Array2<bool> {
    Array2::from_shape_fn((n, n), |(i, j)| {
        let k = i * n + j;
        bytes[k / 8] >> (k % 8) & 1 == 1
    })
}

pub fn put_f32s(a: &Array3<f32>, out: &mut Vec<u8>) {
    for v in a.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn get_f32s(bytes: &[u8], dim: (usize, usize, usize)) -> Array3<f32> {
    let v: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Array3::from_shape_vec(dim, v).expect("embedding length")
}

pub(crate) fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().expect("4 bytes"))
}

pub(crate) fn u64_at(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().expect("8 bytes"))
}

pub(crate) fn check_header(b: &[u8], what: &str) -> Result<()> {
    if b.len() < 8 || &b[..4] != STORE_MAGIC {
        return Err(Error::Data(format!("{what}: bad magic")));
    }
    let v = u32_at(b, 4);
    if v != STORE_VERSION {
        return Err(Error::Data(format!("{what}: unsupported version {v}")));
    }
    Ok(())
}
