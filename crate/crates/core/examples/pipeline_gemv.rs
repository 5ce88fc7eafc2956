//! Runs one GEMV through the dual-clock pipeline model under a few
//! configurations: numbers stay identical while cycles and stalls move.

use std::sync::Arc;

use potaccel::pipeline_sim::{preprocess, schedule_gemv, simulate_gemv, PipelineConfig};
use potaccel::quant::{quantize_tensor, QuantScheme};
use potaccel::shift_arith::FixedPointValue;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> potaccel::Result<()> {
    let (rows, cols) = (32, 64);
    let cb = Arc::new(QuantScheme::spx(&[3, 3], 0.25)?.build()?);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-0.3..0.3)).collect();
    let weights = quantize_tensor(&w, &[rows, cols], &cb)?;
    let data: Vec<FixedPointValue> = (0..cols)
        .map(|_| FixedPointValue::activation(rng.random_range(0.0..1.0)))
        .collect::<potaccel::Result<_>>()?;
    let work = preprocess(&weights, &data)?;

    println!("bandwidth\tpus\tcompute\tload\tstalls\twall_ns\ty[0]");
    for (bandwidth, pus) in [(2 * cols, 32), (16, 32), (1, 32), (2 * cols, 4)] {
        let config = PipelineConfig {
            load_bandwidth_words: bandwidth,
            pu_count: pus,
            ..PipelineConfig::default()
        };
        let (y, r) = simulate_gemv(&work, &config, &cb)?;
        println!(
            "{bandwidth}\t{pus}\t{}\t{}\t{}\t{:.0}\t{}",
            r.compute_cycles,
            r.load_cycles,
            r.stall_cycles,
            r.wall_time_ns,
            y[0].to_f64()
        );
    }

    println!("\nfirst cycles with a 16-word link:");
    let config = PipelineConfig {
        load_bandwidth_words: 16,
        ..PipelineConfig::default()
    };
    for entry in schedule_gemv(4, 8, &config, true)?.trace.iter().take(12) {
        println!("{entry}");
    }
    Ok(())
}
