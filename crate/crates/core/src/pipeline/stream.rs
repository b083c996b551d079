//! TokenStream: the serialized quantized augmented sequence.
//!
//! Little-endian layout:
//!
//! ```text
//! "TTS1"
//! u32 height, width, channels, patch_size
//! f64 overlap_rate
//! u32 num_global (k), num_patch (N), codebook_size (K), model_checksum
//! u16 × k                 global code indices
//! (u16 position, u16 index) × N, positions strictly increasing
//! f64 epsilon, threshold, h_total
//! u8 flags                bit 0: infeasible, bit 1: capped at decoder capacity
//! ```

use crate::error::{Error, Result};
use crate::imagegrid;
use crate::nanonet::checkpoint::Reader;

pub const STREAM_MAGIC: &[u8; 4] = b"TTS1";
const HEADER_LEN: usize = 4 + 4 * 4 + 8 + 4 * 4;
const SUMMARY_LEN: usize = 3 * 8 + 1;
const FLAG_INFEASIBLE: u8 = 1;
const FLAG_CAPPED: u8 = 2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StreamHeader {
    pub height: u32,
    pub width: u32,
    pub channels: u32,
    pub patch_size: u32,
    pub overlap_rate: f64,
    pub codebook_size: u32,
    pub model_checksum: u32,
}

impl StreamHeader {
    /// Grid size `N₀` implied by the header.
    pub fn patch_count(&self) -> Result<usize> {
        let (rows, cols) = imagegrid::patch_count(
            self.height as usize,
            self.width as usize,
            self.patch_size as usize,
            self.overlap_rate,
        )?;
        rows.checked_mul(cols)
            .ok_or_else(|| Error::Parse(format!("{rows}x{cols} patch grid overflows")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchEntry {
    pub position: u16,
    pub index: u16,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DtfSummary {
    pub epsilon: f64,
    pub threshold: f64,
    pub h_total: f64,
    pub infeasible: bool,
    /// Selection was cut to fit the decoder's `N₀` slots.
    pub capped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenStream {
    pub header: StreamHeader,
    pub global_indices: Vec<u16>,
    pub patch_entries: Vec<PatchEntry>,
    pub summary: DtfSummary,
}

impl TokenStream {
    pub fn num_global(&self) -> usize {
        self.global_indices.len()
    }

    pub fn num_patch(&self) -> usize {
        self.patch_entries.len()
    }

    pub fn validate(&self) -> Result<()> {
        let h = &self.header;
        if h.height == 0 || h.width == 0 || h.channels == 0 || h.patch_size == 0 {
            return Err(Error::Parse(format!(
                "zero dimension in header {}x{}x{} s={}",
                h.height, h.width, h.channels, h.patch_size
            )));
        }
        if !(0.0..1.0).contains(&h.overlap_rate) {
            return Err(Error::Parse(format!("overlap rate {} outside [0, 1)", h.overlap_rate)));
        }
        if h.codebook_size < 2 || h.codebook_size > 1 << 16 {
            return Err(Error::Parse(format!("codebook size {} outside [2, 65536]", h.codebook_size)));
        }
        let n0 = h.patch_count().map_err(|e| Error::Parse(format!("bad layout: {e}")))?;
        if n0 > 1 << 16 {
            return Err(Error::Parse(format!("{n0} grid positions exceed the 16-bit position field")));
        }
        if self.num_global() > u32::MAX as usize || self.num_patch() > n0 {
            return Err(Error::Parse(format!("{} patch entries for {n0} patches", self.num_patch())));
        }
        if let Some(&bad) = self.global_indices.iter().find(|&&i| i as u32 >= h.codebook_size) {
            return Err(Error::Parse(format!("global index {bad} >= K={}", h.codebook_size)));
        }
        let mut prev: Option<u16> = None;
        for e in &self.patch_entries {
            if e.index as u32 >= h.codebook_size {
                return Err(Error::Parse(format!("patch index {} >= K={}", e.index, h.codebook_size)));
            }
            if e.position as usize >= n0 {
                return Err(Error::Parse(format!("grid position {} >= N0={n0}", e.position)));
            }
            if prev.is_some_and(|p| p >= e.position) {
                return Err(Error::Parse("grid positions not strictly increasing".into()));
            }
            prev = Some(e.position);
        }
        let s = &self.summary;
        if !(0.0..1.0).contains(&s.epsilon) {
            return Err(Error::Parse(format!("epsilon {} outside [0, 1)", s.epsilon)));
        }
        if !(s.threshold >= 0.0 && s.threshold.is_finite() && s.h_total >= 0.0 && s.h_total.is_finite()) {
            return Err(Error::Parse(format!(
                "threshold {} and H_total {} must be finite and nonnegative",
                s.threshold, s.h_total
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let h = &self.header;
        let mut out = Vec::with_capacity(HEADER_LEN + 2 * self.num_global() + 4 * self.num_patch() + SUMMARY_LEN);
        out.extend_from_slice(STREAM_MAGIC);
        for v in [h.height, h.width, h.channels, h.patch_size] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&h.overlap_rate.to_le_bytes());
        for v in [self.num_global() as u32, self.num_patch() as u32, h.codebook_size, h.model_checksum] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for i in &self.global_indices {
            out.extend_from_slice(&i.to_le_bytes());
        }
        for e in &self.patch_entries {
            out.extend_from_slice(&e.position.to_le_bytes());
            out.extend_from_slice(&e.index.to_le_bytes());
        }
        let s = &self.summary;
        for v in [s.epsilon, s.threshold, s.h_total] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.push(u8::from(s.infeasible) * FLAG_INFEASIBLE | u8::from(s.capped) * FLAG_CAPPED);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != STREAM_MAGIC {
            return Err(Error::Parse("not a token stream (bad magic)".into()));
        }
        let (height, width, channels, patch_size) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?);
        let overlap_rate = r.f64()?;
        let (k, n) = (r.u32()? as u64, r.u32()? as u64);
        let (codebook_size, model_checksum) = (r.u32()?, r.u32()?);
        let body = 2 * k + 4 * n + SUMMARY_LEN as u64;
        if body != r.remaining() as u64 {
            return Err(Error::Parse(format!(
                "stream declares k={k}, N={n} ({body} body bytes) but has {} left",
                r.remaining()
            )));
        }
        let global_indices = (0..k).map(|_| r.u16()).collect::<Result<_>>()?;
        let patch_entries = (0..n)
            .map(|_| {
                Ok(PatchEntry {
                    position: r.u16()?,
                    index: r.u16()?,
                })
            })
            .collect::<Result<_>>()?;
        let (epsilon, threshold, h_total) = (r.f64()?, r.f64()?, r.f64()?);
        let flags = r.u8()?;
        if flags & !(FLAG_INFEASIBLE | FLAG_CAPPED) != 0 {
            return Err(Error::Parse(format!("unknown flag bits {flags:#04x}")));
        }
        let stream = Self {
            header: StreamHeader {
                height,
                width,
                channels,
                patch_size,
                overlap_rate,
                codebook_size,
                model_checksum,
            },
            global_indices,
            patch_entries,
            summary: DtfSummary {
                epsilon,
                threshold,
                h_total,
                infeasible: flags & FLAG_INFEASIBLE != 0,
                capped: flags & FLAG_CAPPED != 0,
            },
        };
        stream.validate()?;
        Ok(stream)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_stream(rng: &mut ChaCha8Rng) -> TokenStream {
        let patch_size = rng.gen_range(1..=8u32);
        let height = patch_size * rng.gen_range(1..=12u32) + rng.gen_range(0..patch_size);
        let width = patch_size * rng.gen_range(1..=12u32) + rng.gen_range(0..patch_size);
        let overlap_rate = [0.0, 0.25, 0.5, rng.gen_range(0.1..0.9)][rng.gen_range(0..4)];
        let codebook_size = rng.gen_range(2..=65536u32);
        let header = StreamHeader {
            height,
            width,
            channels: rng.gen_range(1..=4),
            patch_size,
            overlap_rate,
            codebook_size,
            model_checksum: rng.gen(),
        };
        let n0 = header.patch_count().unwrap();
        if n0 > 1 << 16 {
            return random_stream(rng);
        }
        let k = rng.gen_range(0..=32);
        let global_indices = (0..k).map(|_| rng.gen_range(0..codebook_size) as u16).collect();
        let mut patch_entries = Vec::new();
        for p in 0..n0 {
            if rng.gen_bool(0.6) {
                patch_entries.push(PatchEntry {
                    position: p as u16,
                    index: rng.gen_range(0..codebook_size) as u16,
                });
            }
        }
        TokenStream {
            header,
            global_indices,
            patch_entries,
            summary: DtfSummary {
                epsilon: rng.gen_range(0.0..1.0),
                threshold: rng.gen_range(0.0..1e3),
                h_total: rng.gen_range(0.0..1e3),
                infeasible: rng.gen(),
                capped: rng.gen(),
            },
        }
    }

    #[test]
    fn layout_of_a_small_stream() {
        let s = TokenStream {
            header: StreamHeader {
                height: 4,
                width: 4,
                channels: 1,
                patch_size: 2,
                overlap_rate: 0.0,
                codebook_size: 16,
                model_checksum: 0xdead_beef,
            },
            global_indices: vec![3],
            patch_entries: vec![PatchEntry { position: 1, index: 15 }, PatchEntry { position: 3, index: 0 }],
            summary: DtfSummary {
                epsilon: 0.05,
                threshold: 1.5,
                h_total: 2.0,
                infeasible: false,
                capped: true,
            },
        };
        let bytes = s.to_bytes().unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + 2 + 8 + SUMMARY_LEN);
        assert_eq!(&bytes[..4], b"TTS1");
        assert_eq!(&bytes[28..32], &1u32.to_le_bytes());
        assert_eq!(&bytes[40..44], &0xdead_beefu32.to_le_bytes());
        assert_eq!(&bytes[44..46], &3u16.to_le_bytes());
        assert_eq!(*bytes.last().unwrap(), 2);
        assert_eq!(TokenStream::from_bytes(&bytes).unwrap(), s);
    }

    #[test]
    fn rejects_malformed() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = random_stream(&mut rng);
        while s.patch_entries.len() < 2 {
            s = random_stream(&mut rng);
        }
        let bytes = s.to_bytes().unwrap();
        assert!(TokenStream::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(TokenStream::from_bytes(&extra).is_err());

        let mut swapped = s.clone();
        swapped.patch_entries.swap(0, 1);
        assert!(swapped.to_bytes().is_err());
        let mut dup = s.clone();
        dup.patch_entries[1].position = dup.patch_entries[0].position;
        assert!(dup.to_bytes().is_err());
        let mut big = s.clone();
        big.header.codebook_size = 2;
        big.patch_entries[0].index = 2;
        assert!(big.to_bytes().is_err());

        let mut flags = bytes.clone();
        *flags.last_mut().unwrap() |= 0x80;
        assert!(TokenStream::from_bytes(&flags).is_err());
        let mut huge = bytes;
        huge[24..28].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(TokenStream::from_bytes(&huge), Err(Error::Parse(_))));
    }

    #[test]
    fn random_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let s = random_stream(&mut rng);
            let bytes = s.to_bytes().unwrap();
            let back = TokenStream::from_bytes(&bytes).unwrap();
            assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }

    #[test]
    fn oversized_grid_is_a_parse_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = random_stream(&mut rng);
        s.patch_entries.clear();
        let mut bytes = s.to_bytes().unwrap();
        bytes[4..8].copy_from_slice(&u32::MAX.to_le_bytes());
        bytes[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
        bytes[16..20].copy_from_slice(&1u32.to_le_bytes());
        bytes[20..28].copy_from_slice(&0.5f64.to_le_bytes());
        assert!(matches!(TokenStream::from_bytes(&bytes), Err(Error::Parse(_))));
    }

    proptest! {
        #[test]
        fn arbitrary_bytes_parse_or_fail_cleanly(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
            if let Ok(s) = TokenStream::from_bytes(&bytes) {
                prop_assert_eq!(s.to_bytes().unwrap(), bytes);
            }
        }

        #[test]
        fn corrupted_streams_parse_or_fail_cleanly(seed in any::<u64>(), at in any::<prop::sample::Index>(), byte in any::<u8>()) {
            let mut bytes = random_stream(&mut ChaCha8Rng::seed_from_u64(seed)).to_bytes().unwrap();
            let i = at.index(bytes.len());
            bytes[i] = byte;
            if let Ok(s) = TokenStream::from_bytes(&bytes) {
                prop_assert!(s.validate().is_ok());
            }
        }
    }
}
