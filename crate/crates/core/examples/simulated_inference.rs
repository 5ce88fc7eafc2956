//! Classifies MNIST test digits with the float model and with the quantized
//! model on the simulated accelerator, side by side.
//!
//! Usage: `cargo run --release --example simulated_inference [model] [mnist_dir] [samples]`
//! Without a model file a small one is trained first.

use std::env;
use std::path::Path;
use std::sync::Arc;

use potaccel::cli::{auto_alpha, evaluate};
use potaccel::data::MnistPaths;
use potaccel::mlp::{MlpModel, DEFAULT_LAYER_SIZES};
use potaccel::pipeline_sim::PipelineConfig;
use potaccel::quant::QuantScheme;
use potaccel::shift_arith::ArithMode;
use potaccel::train::{train, TrainConfig};

fn main() -> potaccel::Result<()> {
    let args: Vec<String> = env::args().collect();
    let model_path = args.get(1).map_or("model.txt", String::as_str);
    let paths = MnistPaths::in_dir(args.get(2).map_or("data/mnist", String::as_str));
    let samples = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1000);

    let model = if Path::new(model_path).exists() {
        MlpModel::load(model_path)?
    } else {
        println!("{model_path} not found, training 3 epochs on 10k images");
        let config = TrainConfig { epochs: 3, ..TrainConfig::default() };
        train(&DEFAULT_LAYER_SIZES, &paths.load_train()?.take(10_000), None, &config, |e| println!("{e}"))?.model
    };
    let test = paths.load_test()?.take(samples);

    for branches in [&[3u32, 3][..], &[2, 1], &[1]] {
        let alpha = auto_alpha(&QuantScheme::spx(branches, 1.0)?, model.max_abs_weight())?;
        let cb = Arc::new(QuantScheme::spx(branches, alpha)?.build()?);
        let eval = evaluate(&model, &cb, &PipelineConfig::default(), ArithMode::Exact, &test)?;
        println!(
            "spx {branches:?} ({} levels, alpha {alpha}): float {:.4} simulated {:.4}, {:.0} cycles and {:.1} us per sample",
            cb.len(),
            eval.float_accuracy(),
            eval.simulated_accuracy(),
            eval.per_sample(eval.total.compute_cycles),
            eval.total.wall_time_ns / eval.samples as f64 / 1000.0
        );
    }
    Ok(())
}
