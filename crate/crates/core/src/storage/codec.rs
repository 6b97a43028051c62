//! Binary formats: per-frame `.hcom` deltas and `.hckpt` checkpoints.
//!
//! Both are little-endian, start with a 4-byte magic and a `u16` version,
//! and end with a CRC-32 of every preceding byte. All floats are `f32`.
//!
//! Delta layout:
//!
//! ```text
//! "HCOM" | version u16 | frame_index u32 | reference_frame u32 | levels u8
//! per level:  edge f32 | entries u32 | entries × (3 × i32 key, 3 × f32 Δμ, 4 × f32 Δq)
//! added u32   | added × 26 × f32 rows
//! pruned u32  | pruned × u32 indices into the merged ordering
//! crc32 u32
//! ```
//!
//! A Gaussian row is position (3), log-scale (3), rotation (4), opacity
//! logit (1), SH (12) and three reserved floats written as zero.

use std::collections::BTreeMap;

use crate::error::FormatError;
use crate::gaussian::GaussianCloud;
use crate::math::{Quat, Vec3, SH_LEN};
use crate::motion::{MotionField, MotionParam, RegionGrid, RegionKey};

pub const DELTA_MAGIC: [u8; 4] = *b"HCOM";
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"HCKP";
pub const DELTA_VERSION: u16 = 1;
pub const CHECKPOINT_VERSION: u16 = 1;

pub const ROW_FLOATS: usize = 26;
pub const ROW_BYTES: usize = ROW_FLOATS * 4;
pub const ENTRY_BYTES: usize = 3 * 4 + 7 * 4;
pub const CHECKPOINT_HEADER_BYTES: usize = 4 + 2 + 4;
const DELTA_HEADER_BYTES: usize = 4 + 2 + 4 + 4 + 1;
const CRC_BYTES: usize = 4;

/// Everything needed to turn a reference frame's committed cloud into this
/// frame's clouds.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameDelta {
    pub frame_index: u32,
    /// Frame whose committed cloud this delta applies to.
    pub reference_frame: u32,
    /// Fine to coarse.
    pub levels: Vec<RegionGrid>,
    pub added: GaussianCloud,
    /// Ascending indices into base-then-additions order.
    pub pruned: Vec<u32>,
}

impl FrameDelta {
    /// Delta with the field's entries; values are written as `f32`.
    pub fn new(
        frame_index: u32,
        reference_frame: u32,
        field: &MotionField,
        added: GaussianCloud,
        pruned: Vec<u32>,
    ) -> Self {
        Self {
            frame_index,
            reference_frame,
            levels: field.grids.clone(),
            added,
            pruned,
        }
    }

    pub fn entry_count(&self) -> usize {
        self.levels.iter().map(|g| g.entries.len()).sum()
    }

    /// Exact encoded size in bytes.
    pub fn encoded_len(&self) -> usize {
        delta_size(
            self.levels.len(),
            self.entry_count(),
            self.added.len(),
            self.pruned.len(),
        )
    }
}

/// Encoded delta size for `levels` levels with `entries` region entries in
/// total. With three levels this is `51 + 40·entries + 104·added + 4·pruned`.
pub fn delta_size(levels: usize, entries: usize, added: usize, pruned: usize) -> usize {
    DELTA_HEADER_BYTES
        + levels * 8
        + entries * ENTRY_BYTES
        + 4
        + added * ROW_BYTES
        + 4
        + pruned * 4
        + CRC_BYTES
}

pub fn checkpoint_size(n: usize) -> usize {
    CHECKPOINT_HEADER_BYTES + n * ROW_BYTES + CRC_BYTES
}

fn put_f32(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&(v as f32).to_le_bytes());
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_rows(out: &mut Vec<u8>, cloud: &GaussianCloud) {
    for i in 0..cloud.len() {
        cloud.positions[i].iter().for_each(|v| put_f32(out, *v));
        cloud.log_scales[i].iter().for_each(|v| put_f32(out, *v));
        cloud.rotations[i].iter().for_each(|v| put_f32(out, *v));
        put_f32(out, cloud.opacity_logits[i]);
        cloud.sh[i].iter().for_each(|v| put_f32(out, *v));
        for _ in 0..3 {
            put_f32(out, 0.0);
        }
    }
}

fn finish(mut out: Vec<u8>) -> Vec<u8> {
    let crc = crc32fast::hash(&out);
    put_u32(&mut out, crc);
    out
}

pub fn encode_delta(d: &FrameDelta) -> Vec<u8> {
    let mut out = Vec::with_capacity(d.encoded_len());
    out.extend_from_slice(&DELTA_MAGIC);
    out.extend_from_slice(&DELTA_VERSION.to_le_bytes());
    put_u32(&mut out, d.frame_index);
    put_u32(&mut out, d.reference_frame);
    out.push(d.levels.len() as u8);
    for grid in &d.levels {
        put_f32(&mut out, grid.edge);
        put_u32(&mut out, grid.entries.len() as u32);
        for (key, p) in &grid.entries {
            key.iter().for_each(|k| out.extend_from_slice(&k.to_le_bytes()));
            p.d_mu.iter().for_each(|v| put_f32(&mut out, *v));
            p.d_q.iter().for_each(|v| put_f32(&mut out, *v));
        }
    }
    put_u32(&mut out, d.added.len() as u32);
    put_rows(&mut out, &d.added);
    put_u32(&mut out, d.pruned.len() as u32);
    d.pruned.iter().for_each(|i| put_u32(&mut out, *i));
    finish(out)
}

pub fn encode_checkpoint(cloud: &GaussianCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(checkpoint_size(cloud.len()));
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_u32(&mut out, cloud.len() as u32);
    put_rows(&mut out, cloud);
    finish(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(FormatError::Truncated {
                needed: self.pos.saturating_add(n),
                available: self.buf.len(),
            }),
        }
    }

    /// Fails early if `count` items of `size` bytes cannot possibly fit.
    fn reserve(&self, count: usize, size: usize) -> Result<(), FormatError> {
        let needed = count.saturating_mul(size).saturating_add(self.pos);
        if needed > self.buf.len() {
            return Err(FormatError::Truncated {
                needed,
                available: self.buf.len(),
            });
        }
        Ok(())
    }

    fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn i32(&mut self) -> Result<i32, FormatError> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f64, FormatError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()) as f64)
    }

    fn rows(&mut self, n: usize) -> Result<GaussianCloud, FormatError> {
        self.reserve(n, ROW_BYTES)?;
        let mut cloud = GaussianCloud::zeros(n);
        for i in 0..n {
            cloud.positions[i] = Vec3::new(self.f32()?, self.f32()?, self.f32()?);
            cloud.log_scales[i] = Vec3::new(self.f32()?, self.f32()?, self.f32()?);
            cloud.rotations[i] = Quat::new(self.f32()?, self.f32()?, self.f32()?, self.f32()?);
            cloud.opacity_logits[i] = self.f32()?;
            for k in 0..SH_LEN {
                cloud.sh[i][k] = self.f32()?;
            }
            self.take(12)?;
        }
        Ok(cloud)
    }
}

/// Magic and version; checked before anything else is parsed.
fn header(r: &mut Reader, magic: [u8; 4], supported: u16) -> Result<(), FormatError> {
    if r.buf.len() < 6 {
        return Err(FormatError::Truncated {
            needed: 6,
            available: r.buf.len(),
        });
    }
    let found: [u8; 4] = r.take(4)?.try_into().unwrap();
    if found != magic {
        return Err(FormatError::BadMagic {
            expected: magic,
            found,
        });
    }
    let version = r.u16()?;
    if version == 0 || version > supported {
        return Err(FormatError::UnsupportedVersion {
            found: version,
            supported,
        });
    }
    Ok(())
}

/// Trailing CRC: present, last, and matching.
fn trailer(r: &mut Reader) -> Result<(), FormatError> {
    let body_end = r.pos;
    let stored = r.u32()?;
    if r.pos != r.buf.len() {
        return Err(FormatError::TrailingBytes(r.buf.len() - r.pos));
    }
    let computed = crc32fast::hash(&r.buf[..body_end]);
    if stored != computed {
        return Err(FormatError::Checksum { stored, computed });
    }
    Ok(())
}

fn check_finite(cloud: &GaussianCloud, what: &str) -> Result<(), FormatError> {
    let ok = crate::gaussian::Attribute::ALL
        .iter()
        .all(|&a| cloud.flat(a).iter().all(|v| v.is_finite()));
    if ok {
        Ok(())
    } else {
        Err(FormatError::Malformed(format!("non-finite value in {what}")))
    }
}

/// Decodes a delta. Errors are reported in order: truncation or bad magic,
/// unsupported version, structural truncation, trailing bytes, checksum, and
/// finally semantic problems (`Malformed`).
pub fn decode_delta(bytes: &[u8]) -> Result<FrameDelta, FormatError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    header(&mut r, DELTA_MAGIC, DELTA_VERSION)?;
    let frame_index = r.u32()?;
    let reference_frame = r.u32()?;
    let n_levels = r.u8()? as usize;
    let mut raw_levels = Vec::with_capacity(n_levels);
    for _ in 0..n_levels {
        let edge = r.f32()?;
        let n = r.u32()? as usize;
        r.reserve(n, ENTRY_BYTES)?;
        let mut entries = Vec::with_capacity(n);
        for _ in 0..n {
            let key: RegionKey = [r.i32()?, r.i32()?, r.i32()?];
            let d_mu = Vec3::new(r.f32()?, r.f32()?, r.f32()?);
            let d_q = Quat::new(r.f32()?, r.f32()?, r.f32()?, r.f32()?);
            entries.push((key, MotionParam { d_mu, d_q }));
        }
        raw_levels.push((edge, entries));
    }
    let n_added = r.u32()? as usize;
    let added = r.rows(n_added)?;
    let n_pruned = r.u32()? as usize;
    r.reserve(n_pruned, 4)?;
    let pruned = (0..n_pruned).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
    trailer(&mut r)?;

    let mut levels = Vec::with_capacity(n_levels);
    for (l, (edge, entries)) in raw_levels.into_iter().enumerate() {
        if !(edge > 0.0 && edge.is_finite()) {
            return Err(FormatError::Malformed(format!("level {} edge {edge}", l + 1)));
        }
        if !entries.windows(2).all(|w| w[0].0 < w[1].0) {
            return Err(FormatError::Malformed(format!(
                "level {} region keys not strictly ascending",
                l + 1
            )));
        }
        if entries
            .iter()
            .any(|(_, p)| !p.d_mu.iter().chain(p.d_q.iter()).all(|v| v.is_finite()))
        {
            return Err(FormatError::Malformed(format!("non-finite motion at level {}", l + 1)));
        }
        levels.push(RegionGrid {
            level: l + 1,
            edge,
            entries: entries.into_iter().collect::<BTreeMap<_, _>>(),
        });
    }
    check_finite(&added, "added rows")?;
    if !pruned.windows(2).all(|w| w[0] < w[1]) {
        return Err(FormatError::Malformed("pruned indices not strictly ascending".into()));
    }
    Ok(FrameDelta {
        frame_index,
        reference_frame,
        levels,
        added,
        pruned,
    })
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<GaussianCloud, FormatError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    header(&mut r, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    let n = r.u32()? as usize;
    let cloud = r.rows(n)?;
    trailer(&mut r)?;
    check_finite(&cloud, "checkpoint rows")?;
    Ok(cloud)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::Gaussian;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn f32v(rng: &mut ChaCha8Rng) -> f64 {
        rng.random_range(-2.0f32..2.0) as f64
    }

    fn random_delta(rng: &mut ChaCha8Rng, levels: usize, max_entries: usize, added: usize, pruned: usize) -> FrameDelta {
        let mut grids = Vec::new();
        for l in 0..levels {
            let mut entries = BTreeMap::new();
            for _ in 0..rng.random_range(0..=max_entries) {
                let key = [rng.random_range(-50..50), rng.random_range(-50..50), rng.random_range(-50..50)];
                entries.insert(
                    key,
                    MotionParam {
                        d_mu: Vec3::new(f32v(rng), f32v(rng), f32v(rng)),
                        d_q: Quat::new(f32v(rng), f32v(rng), f32v(rng), f32v(rng)),
                    },
                );
            }
            grids.push(RegionGrid {
                level: l + 1,
                edge: 0.125 * (1 << l) as f64,
                entries,
            });
        }
        let cloud = GaussianCloud::from_gaussians((0..added).map(|_| {
            let mut sh = [0.0; SH_LEN];
            sh.iter_mut().for_each(|v| *v = f32v(rng));
            Gaussian {
                position: Vec3::new(f32v(rng), f32v(rng), f32v(rng)),
                log_scale: Vec3::new(f32v(rng), f32v(rng), f32v(rng)),
                rotation: Quat::new(f32v(rng), f32v(rng), f32v(rng), f32v(rng)),
                opacity_logit: f32v(rng),
                sh,
            }
        }));
        let mut pr: Vec<u32> = (0..pruned).map(|_| rng.random_range(0..10_000)).collect();
        pr.sort_unstable();
        pr.dedup();
        FrameDelta {
            frame_index: rng.random_range(1..1000),
            reference_frame: rng.random_range(0..1000),
            levels: grids,
            added: cloud,
            pruned: pr,
        }
    }

    fn empty_delta(levels: usize) -> FrameDelta {
        FrameDelta {
            frame_index: 1,
            reference_frame: 0,
            levels: (0..levels)
                .map(|l| RegionGrid {
                    level: l + 1,
                    edge: 0.5,
                    entries: BTreeMap::new(),
                })
                .collect(),
            added: GaussianCloud::new(),
            pruned: Vec::new(),
        }
    }

    #[test]
    fn empty_three_level_delta_is_51_bytes() {
        let d = empty_delta(3);
        let bytes = encode_delta(&d);
        assert_eq!(bytes.len(), 51);
        assert_eq!(d.encoded_len(), 51);
        assert_eq!(decode_delta(&bytes).unwrap(), d);
    }

    #[test]
    fn one_entry_costs_40_bytes() {
        let mut d = empty_delta(3);
        let base = encode_delta(&d).len();
        d.levels[0].entries.insert([1, -2, 3], MotionParam::identity());
        assert_eq!(encode_delta(&d).len() - base, 40);
    }

    #[test]
    fn size_formula_on_random_deltas() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let (a, p) = (rng.random_range(0..5), rng.random_range(0..5));
            let d = random_delta(&mut rng, 3, 30, a, p);
            let expect = 51 + 40 * d.entry_count() + 104 * d.added.len() + 4 * d.pruned.len();
            assert_eq!(encode_delta(&d).len(), expect);
        }
    }

    #[test]
    fn checkpoint_round_trip_and_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = random_delta(&mut rng, 1, 0, 7, 0);
        let bytes = encode_checkpoint(&d.added);
        assert_eq!(bytes.len(), CHECKPOINT_HEADER_BYTES + 104 * 7 + 4);
        assert!(decode_checkpoint(&bytes).unwrap().bit_eq(&d.added));
        let empty = encode_checkpoint(&GaussianCloud::new());
        assert_eq!(empty.len(), 14);
        assert!(decode_checkpoint(&empty).unwrap().is_empty());
    }

    #[test]
    fn distinct_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = random_delta(&mut rng, 3, 10, 2, 3);
        let bytes = encode_delta(&d);

        let mut bad_crc = bytes.clone();
        *bad_crc.last_mut().unwrap() ^= 0x55;
        assert!(matches!(decode_delta(&bad_crc), Err(FormatError::Checksum { .. })));

        let mut flipped = bytes.clone();
        flipped[30] ^= 0x01;
        assert!(matches!(decode_delta(&flipped), Err(FormatError::Checksum { .. })));

        for cut in [0, 3, 5, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                matches!(decode_delta(&bytes[..cut]), Err(FormatError::Truncated { .. })),
                "cut {cut}"
            );
        }

        let mut skew = bytes.clone();
        skew[4..6].copy_from_slice(&(DELTA_VERSION + 1).to_le_bytes());
        assert!(matches!(
            decode_delta(&skew),
            Err(FormatError::UnsupportedVersion { found: 2, .. })
        ));

        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(decode_delta(&magic), Err(FormatError::BadMagic { .. })));

        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode_delta(&long), Err(FormatError::TrailingBytes(1))));

        let ckpt = encode_checkpoint(&d.added);
        assert!(matches!(decode_checkpoint(&bytes), Err(FormatError::BadMagic { .. })));
        assert!(matches!(
            decode_checkpoint(&ckpt[..ckpt.len() - 2]),
            Err(FormatError::Truncated { .. })
        ));
    }

    #[test]
    fn huge_counts_do_not_allocate() {
        let mut bytes = encode_delta(&empty_delta(0));
        // added count sits right after the 15-byte header
        bytes[15..19].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(decode_delta(&bytes), Err(FormatError::Truncated { .. })));
    }

    proptest! {
        #[test]
        fn encode_decode_encode_is_idempotent(seed in any::<u64>(), added in 0usize..4, pruned in 0usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = random_delta(&mut rng, 3, 12, added, pruned);
            let bytes = encode_delta(&d);
            let back = decode_delta(&bytes).unwrap();
            prop_assert_eq!(&back, &d);
            prop_assert_eq!(encode_delta(&back), bytes);
        }

        #[test]
        fn mutated_bytes_never_panic(seed in any::<u64>(), pos in any::<usize>(), val in any::<u8>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = random_delta(&mut rng, 2, 4, 1, 2);
            let mut bytes = encode_delta(&d);
            let p = pos % bytes.len();
            let changed = bytes[p] != val;
            bytes[p] = val;
            let res = decode_delta(&bytes);
            if changed {
                prop_assert!(res.is_err());
            }
        }
    }
}
