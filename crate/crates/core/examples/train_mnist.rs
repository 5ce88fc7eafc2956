//! Trains the 784-128-10 sigmoid MLP on MNIST and saves it.
//!
//! Usage: `cargo run --release --example train_mnist [mnist_dir] [epochs] [out]`

use std::env;

use potaccel::data::MnistPaths;
use potaccel::mlp::DEFAULT_LAYER_SIZES;
use potaccel::train::{train, TrainConfig};

fn main() -> potaccel::Result<()> {
    let args: Vec<String> = env::args().collect();
    let dir = args.get(1).map_or("data/mnist", String::as_str);
    let epochs = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(20);
    let out = args.get(3).map_or("model.txt", String::as_str);

    let paths = MnistPaths::in_dir(dir);
    let train_set = paths.load_train()?;
    let test_set = paths.load_test()?;
    println!("{} training and {} test images", train_set.len(), test_set.len());

    let config = TrainConfig {
        epochs,
        ..TrainConfig::default()
    };
    let outcome = train(&DEFAULT_LAYER_SIZES, &train_set, Some(&test_set), &config, |e| {
        println!("{e}")
    })?;
    outcome.model.save(out)?;
    println!("saved {out}");
    Ok(())
}
