//! Fit the orthogonal-mode baseline: mean-center the snapshots, take the
//! SVD, keep the most energetic directions. Shows the energy spectrum
//! and how reconstruction error falls as modes are added.

use romcast::data::{
    compute_stats, latitude_weights, normalize, stack_snapshots, synth_generate, SynthConfig,
};
use romcast::pod::{fit_pod, pod_sweep, reconstruction_lw_rmse};

fn main() {
    let (descriptor, snapshots) = synth_generate(&SynthConfig::new(12, 16, 120, 9)).unwrap();
    let stats = compute_stats(&snapshots, descriptor.channels()).unwrap();
    let normalized = normalize(&snapshots, &stats).unwrap();
    let fields = stack_snapshots(&descriptor, &normalized).unwrap();
    let weights = latitude_weights(descriptor.lat()).unwrap();

    let basis = fit_pod(&fields, 24).unwrap();
    println!(
        "kept {} of {} possible directions, compression {:.1}:1",
        basis.k(),
        basis.field_dim(),
        basis.compression_ratio()
    );

    let total: f64 = basis.singular_values().iter().map(|s| s * s).sum();
    let mut cumulative = 0.0;
    println!("energy spectrum (squared singular values):");
    for (i, s) in basis.singular_values().iter().take(8).enumerate() {
        cumulative += s * s;
        println!(
            "  mode {:>2}: sigma {:>10.4}, cumulative energy {:.2}% of retained",
            i,
            s,
            100.0 * cumulative / total
        );
    }

    let err = reconstruction_lw_rmse(&basis, &fields, &weights).unwrap();
    println!("rank-{} reconstruction lw_rmse: {:.6}", basis.k(), err);

    println!("mode-count sweep (one decomposition, nested truncations):");
    for point in pod_sweep(&fields, &[1, 2, 4, 8, 16, 24], &weights).unwrap() {
        println!("  k = {:>2}: lw_rmse {:.6}", point.k, point.lw_rmse);
    }
}
