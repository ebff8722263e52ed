//! Run channel and spatial attention over a toy multichannel field and
//! show what the maps look like: channel weights reweight whole planes,
//! the spatial map reweights individual grid cells, and every weight is
//! a sigmoid output strictly inside (0, 1).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use romcast::attention::{
    channel_attention, channel_gate, spatial_gate, ChannelAttentionParams, SpatialAttentionParams,
};
use romcast::tensor::Tensor;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (c, h, w) = (8usize, 6usize, 9usize);

    // One batch entry, with channel 2 carrying far more energy than the rest.
    let mut x = Tensor::uniform(&[1, c, h, w], 0.3, &mut rng);
    for v in &mut x.data_mut()[2 * h * w..3 * h * w] {
        *v += 2.0;
    }

    let channel = ChannelAttentionParams::new(c, 2, &mut rng).unwrap();
    let weights = channel_gate(&channel, &x).unwrap();
    println!("channel weights (one per channel):");
    for (i, wv) in weights.data().iter().enumerate() {
        println!("  channel {}: {:.4}", i, wv);
    }
    assert!(weights.data().iter().all(|&v| 0.0 < v && v < 1.0));

    let refined = channel_attention(&channel, &x).unwrap();
    let spatial = SpatialAttentionParams::new(&mut rng);
    let map = spatial_gate(&spatial, &refined).unwrap();
    let lo = map.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = map.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    println!("spatial map over {} x {} cells: min {:.4}, max {:.4}", h, w, lo, hi);
    assert!(0.0 < lo && hi < 1.0);

    println!(
        "both maps are strictly inside (0, 1); the refined field keeps shape {:?}",
        refined.shape()
    );
}
