//! Sweeps PoT bit widths and SPx branch sets on a trained model and prints a
//! tab-separated table, the same rows `potaccel sweep` emits.
//!
//! Usage: `cargo run --release --example quantizer_sweep [model] [mnist_dir] [samples]`

use std::env;
use std::io;

use potaccel::cli::run;

fn main() {
    let args: Vec<String> = env::args().collect();
    let model = args.get(1).map_or("model.txt", String::as_str);
    let dir = args.get(2).map_or("data/mnist", String::as_str);
    let limit = args.get(3).map_or("500", String::as_str);
    let images = format!("{dir}/t10k-images-idx3-ubyte");
    let labels = format!("{dir}/t10k-labels-idx1-ubyte");
    let argv = [
        "potaccel", "sweep", "--model", model, "--images", &images, "--labels", &labels,
        "--pot-bits", "2,3,4,5,6", "--spx-branches", "1;2,1;2,2;3,3", "--bandwidths", "64,1568",
        "--limit", limit,
    ];
    if let Err(e) = run(argv, &mut io::stdout().lock()) {
        eprintln!("error: {e}");
        std::process::exit(2);
    }
}
