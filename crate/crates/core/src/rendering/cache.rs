//! Binary render-tensor cache.
//!
//! Little-endian layout:
//!
//! | field            | type                      |
//! |------------------|---------------------------|
//! | magic            | `b"RTEN"`                 |
//! | version          | u32 = 1                   |
//! | h_y, w_y, h_t, w_t | u32 × 4                 |
//! | entry count      | u64                       |
//! | entries          | (u32 pixel, u32 texel, f32 weight) × count, sorted |
//! | coverage         | ⌈h_y·w_y / 8⌉ bytes, row-major, bit `i % 8` (LSB first) of byte `i / 8` |

use std::path::Path;

use super::{RenderEntry, RenderTensor};
use crate::error::{Error, Result};
use crate::grid::Mask;

pub const RTEN_MAGIC: &[u8; 4] = b"RTEN";
pub const RTEN_VERSION: u32 = 1;

const HEADER_LEN: usize = 4 + 4 + 16 + 8;
const ENTRY_LEN: usize = 12;

pub(crate) fn encode(rt: &RenderTensor) -> Vec<u8> {
    let (hy, wy) = rt.image_dims();
    let (ht, wt) = rt.texture_dims();
    let n_pix = hy * wy;
    let mut out = Vec::with_capacity(HEADER_LEN + rt.entries().len() * ENTRY_LEN + n_pix.div_ceil(8));
    out.extend_from_slice(RTEN_MAGIC);
    out.extend_from_slice(&RTEN_VERSION.to_le_bytes());
    for d in [hy, wy, ht, wt] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&(rt.entries().len() as u64).to_le_bytes());
    for e in rt.entries() {
        out.extend_from_slice(&e.pixel.to_le_bytes());
        out.extend_from_slice(&e.texel.to_le_bytes());
        out.extend_from_slice(&e.weight.to_le_bytes());
    }
    let mut packed = vec![0u8; n_pix.div_ceil(8)];
    for (i, &bit) in rt.coverage().bits().iter().enumerate() {
        if bit {
            packed[i / 8] |= 1 << (i % 8);
        }
    }
    out.extend_from_slice(&packed);
    out
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

pub(crate) fn decode(bytes: &[u8]) -> Result<RenderTensor> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(
            "header",
            format!("file is {} bytes, shorter than the header", bytes.len()),
        ));
    }
    if &bytes[0..4] != RTEN_MAGIC {
        return Err(Error::format("magic", "not a render-tensor file"));
    }
    let version = u32_at(bytes, 4);
    if version != RTEN_VERSION {
        return Err(Error::format("version", format!("unsupported version {}", version)));
    }
    let dims: Vec<usize> = (0..4).map(|k| u32_at(bytes, 8 + 4 * k) as usize).collect();
    let count = u64::from_le_bytes(bytes[24..32].try_into().unwrap());
    let n_pix = dims[0]
        .checked_mul(dims[1])
        .ok_or_else(|| Error::format("header", "image dims overflow"))?;
    let expected = usize::try_from(count)
        .ok()
        .and_then(|c| c.checked_mul(ENTRY_LEN))
        .and_then(|b| b.checked_add(HEADER_LEN))
        .and_then(|b| b.checked_add(n_pix.div_ceil(8)))
        .ok_or_else(|| Error::format("header", "entry count overflows"))?;
    if bytes.len() != expected {
        return Err(Error::format(
            "length",
            format!("file is {} bytes, header implies {}", bytes.len(), expected),
        ));
    }
    let mut entries = Vec::with_capacity(count as usize);
    let mut at = HEADER_LEN;
    for _ in 0..count {
        entries.push(RenderEntry {
            pixel: u32_at(bytes, at),
            texel: u32_at(bytes, at + 4),
            weight: f32::from_le_bytes(bytes[at + 8..at + 12].try_into().unwrap()),
        });
        at += ENTRY_LEN;
    }
    let packed = &bytes[at..];
    let bits = (0..n_pix).map(|i| packed[i / 8] & (1 << (i % 8)) != 0).collect();
    let coverage = Mask::new(dims[0], dims[1], bits)?;
    RenderTensor::from_parts((dims[0], dims[1]), (dims[2], dims[3]), entries, coverage)
}

pub fn save_render_tensor(rt: &RenderTensor, path: &Path) -> Result<()> {
    crate::io_util::write_atomic(path, &encode(rt))
}

/// Loads and validates a cache file.
pub fn load_render_tensor(path: &Path) -> Result<RenderTensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
