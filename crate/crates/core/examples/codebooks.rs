//! Builds PoT and SPx codebooks, prints their levels with shift
//! decompositions, and compares how densely each covers the tails.

use potaccel::quant::QuantScheme;

fn main() -> potaccel::Result<()> {
    let pot = QuantScheme::pot(4, 1.0)?.build()?;
    let spx = QuantScheme::spx(&[2, 1], 1.0)?.build()?;

    print!("{pot}");
    println!();
    print!("{spx}");

    for cb in [&pot, &spx] {
        println!(
            "\n{}: {} levels, largest gap in [0.5, 1]: {}, max shift {}",
            cb.scheme().kind(),
            cb.len(),
            cb.max_gap_within(0.5, 1.0),
            cb.max_shift()
        );
    }

    let x = 0.7;
    for cb in [&pot, &spx] {
        let i = cb.quantize(x);
        let terms: Vec<String> = cb.decomposition(i).iter().map(|t| t.to_string()).collect();
        println!("{x} -> {} = {}", cb.level(i), terms.join(" "));
    }
    Ok(())
}
