//! Recover a known linear delay operator from data it generated, then
//! check that rolling the recovered operator forward reproduces the
//! generator's continuation. This is the mechanism behind in-window
//! forecasting: when the dynamics really are linear in the delayed
//! state, the least-squares fit finds them almost exactly.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use romcast::rom::{fit_delay_rom, rollout, DelayRom, LatentSequence};

fn main() {
    let (n, d, steps) = (4usize, 2usize, 300usize);
    let mut rng = ChaCha8Rng::seed_from_u64(21);

    // A stable random operator: n rows, n*d columns, scaled down so
    // trajectories neither blow up nor die.
    let entries: Vec<f64> =
        (0..n * n * d).map(|_| rng.gen_range(-1.0..1.0) * 0.35 / d as f64).collect();
    let truth = DelayRom::from_rows(n, d, entries).unwrap();

    // Generate a trajectory: window holds the last d states, newest last.
    let mut window: Vec<Vec<f64>> =
        (0..d).map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let mut states = window.clone();
    let generated = rollout(&truth, &window, steps - d).unwrap();
    states.extend(generated.iter().cloned());

    // Fit from the first 250 states only.
    let train = LatentSequence::new(states[..250].to_vec(), 6.0).unwrap();
    let fitted = fit_delay_rom(&train, d, 0.0).unwrap();

    let worst = truth
        .matrix()
        .iter()
        .zip(fitted.matrix())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    println!("largest entry error between true and fitted operator: {:.3e}", worst);
    assert!(worst < 1e-8);

    // Continue both operators from the last training window and compare.
    window = states[248..250].to_vec();
    let a = rollout(&truth, &window, 50).unwrap();
    let b = rollout(&fitted, &window, 50).unwrap();
    let drift = a
        .iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0f64, f64::max);
    println!("largest divergence over a 50-step rollout: {:.3e}", drift);
    assert!(drift < 1e-6);
    println!("operator recovered from its own trajectory");
}
