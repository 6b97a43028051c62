//! Encodes a per-frame delta and a checkpoint, checks the byte-size formula
//! and shows the error each kind of corruption produces.
//!
//! ```text
//! cargo run --release --example delta_codec
//! ```

use std::collections::BTreeMap;

use splatstream::math::{Quat, Vec3};
use splatstream::motion::{MotionParam, RegionGrid};
use splatstream::storage::codec::{
    checkpoint_size, decode_checkpoint, decode_delta, delta_size, encode_checkpoint, encode_delta, FrameDelta,
};
use splatstream::{Gaussian, GaussianCloud};

fn main() -> splatstream::Result<()> {
    let levels: Vec<RegionGrid> = (0..3)
        .map(|l| RegionGrid {
            level: l + 1,
            edge: 0.2 * f64::powi(2.0, l as i32),
            entries: (0..(12 >> l))
                .map(|i| {
                    (
                        [i, -i, 2 * i],
                        MotionParam {
                            d_mu: Vec3::new(0.01 * i as f64, 0.0, -0.005),
                            d_q: Quat::new(1.0, 0.0, 0.001 * i as f64, 0.0),
                        },
                    )
                })
                .collect::<BTreeMap<_, _>>(),
        })
        .collect();
    let added = GaussianCloud::from_gaussians((0..2).map(|i| Gaussian {
        position: Vec3::new(i as f64, 0.5, -0.25),
        ..Default::default()
    }));
    let delta = FrameDelta {
        frame_index: 7,
        reference_frame: 6,
        levels,
        added,
        pruned: vec![3, 40],
    };
    let bytes = encode_delta(&delta);
    let entries = delta.entry_count();
    println!(
        "delta: {} entries, 2 added, 2 pruned -> {} bytes (formula {} = 51 + 40*{entries} + 104*2 + 4*2)",
        entries,
        bytes.len(),
        delta_size(3, entries, 2, 2)
    );
    assert_eq!(decode_delta(&bytes)?, delta);

    let ckpt = encode_checkpoint(&delta.added);
    println!("checkpoint of 2 Gaussians: {} bytes (formula {})", ckpt.len(), checkpoint_size(2));
    assert!(decode_checkpoint(&ckpt)?.bit_eq(&delta.added));

    let mut crc = bytes.clone();
    *crc.last_mut().unwrap() ^= 1;
    println!("flipped CRC byte:  {}", decode_delta(&crc).unwrap_err());
    println!("cut to 30 bytes:   {}", decode_delta(&bytes[..30]).unwrap_err());
    let mut skew = bytes.clone();
    skew[4] = 9;
    println!("version 9:         {}", decode_delta(&skew).unwrap_err());
    let mut magic = bytes.clone();
    magic[..4].copy_from_slice(b"NOPE");
    println!("wrong magic:       {}", decode_delta(&magic).unwrap_err());
    Ok(())
}
