//! Train a small convolutional autoencoder on synthetic fields for a
//! few epochs and watch the latitude-weighted reconstruction loss fall.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use romcast::cae::{train, CaeArch, CaeModel, TrainConfig};
use romcast::data::{
    compute_stats, latitude_weights, normalize, stack_snapshots, synth_generate, SynthConfig,
};

fn main() {
    // A miniature setup: 4 variables on 8 x 16, two stages, latent 4 x 2 x 4.
    let (descriptor, snapshots) = synth_generate(&SynthConfig::new(8, 16, 96, 5)).unwrap();
    let stats = compute_stats(&snapshots[..80], descriptor.channels()).unwrap();
    let normalized = normalize(&snapshots, &stats).unwrap();
    let fields = stack_snapshots(&descriptor, &normalized).unwrap();
    let weights = latitude_weights(descriptor.lat()).unwrap();

    let plane: usize = fields.shape()[1..].iter().product();
    let split = 80 * plane;
    let train_set =
        romcast::tensor::Tensor::new(&[80, 4, 8, 16], fields.data()[..split].to_vec()).unwrap();
    let val_set =
        romcast::tensor::Tensor::new(&[16, 4, 8, 16], fields.data()[split..].to_vec()).unwrap();

    let arch = CaeArch::new([4, 8, 16], 8, vec![16, 32], 4, true, 4).unwrap();
    println!(
        "latent {:?} = {} numbers per field, compression {:.2}:1",
        arch.latent_shape(),
        arch.latent_dim(),
        arch.compression_ratio()
    );
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = CaeModel::init(arch, &mut rng).unwrap();
    println!("{} trainable parameters", model.param_count());

    let cfg = TrainConfig {
        learning_rate: 3e-3,
        batch_size: 16,
        epochs: 8,
        ..TrainConfig::default()
    };
    let trace = train(&mut model, &train_set, &val_set, &weights, &cfg).unwrap();
    for row in &trace.rows {
        println!(
            "epoch {:>2}: train {:.5}, val {:.5}, lr {:.1e}",
            row.epoch, row.train_loss, row.val_loss, row.lr
        );
    }

    let first = trace.rows.first().unwrap().val_loss;
    let last = trace.rows.last().unwrap().val_loss;
    println!("validation loss {:.5} -> {:.5}", first, last);
    assert!(last < first, "training failed to reduce the loss");
}
