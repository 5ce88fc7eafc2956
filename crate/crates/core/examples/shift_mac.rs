//! Multiplies fixed-point activations by codebook levels using only shifts,
//! sign flips and adds, and shows the operation counts.

use potaccel::quant::QuantScheme;
use potaccel::shift_arith::{
    alpha_fixed, level_mul, mac, Accumulator, ArithMode, FixedPointValue, OpCounts, ShiftMultiplier,
};

fn main() -> potaccel::Result<()> {
    let cb = QuantScheme::spx(&[2, 1], 0.75)?.build()?;
    let alpha = alpha_fixed(&cb)?;
    let x = FixedPointValue::activation(0.8125)?;

    for mode in [ArithMode::Exact, ArithMode::Truncate] {
        let mut ops = OpCounts::default();
        let i = cb.quantize(0.28);
        let y = level_mul(x, cb.decomposition(i), alpha, mode, &mut ops)?;
        println!(
            "{mode:?}: {} * {} = {} (raw {} / 2^{}) ops {ops:?}",
            x.to_f64(),
            cb.level(i),
            y.to_f64(),
            y.raw(),
            y.frac_bits()
        );
    }

    // a short dot product, term by term and through the row engine
    let weights = [0.75, -0.1875, 0.5, 0.09375];
    let data: Vec<FixedPointValue> = [0.5, 0.25, -1.0, 0.875]
        .iter()
        .map(|&v| FixedPointValue::activation(v))
        .collect::<potaccel::Result<_>>()?;
    let codes: Vec<u32> = weights.iter().map(|&w| cb.quantize(w) as u32).collect();

    let mut ops = OpCounts::default();
    let mut acc = Accumulator::new(40);
    for (&c, d) in codes.iter().zip(&data) {
        acc = mac(acc, *d, cb.decomposition(c as usize), alpha, ArithMode::Exact, &mut ops)?;
    }
    println!("term by term: {} with {ops:?}", acc.to_f64());

    let engine = ShiftMultiplier::new(&cb, ArithMode::Exact)?;
    let mut ops = OpCounts::default();
    let dot = engine.dot(&codes, &data, &mut ops)?;
    println!("row engine:   {} with {ops:?}", dot.to_f64());
    Ok(())
}
