//! Factored teachers with separable weights keep activations disentangled
//! through the forward pass; entangling the weights breaks it.

use laddersim::disentangle::{backward_residual_demo, forward_residual, forward_variants, FactoredInstance};

fn main() -> laddersim::Result<()> {
    let inst = FactoredInstance::random(&[2, 1], 5);
    println!("alpha has {} neurons, beta has {}", inst.n_alpha(), inst.n_beta());
    for (variant, rep) in forward_variants(&inst)? {
        println!("  {variant:<10} residual {:.2e}", rep.max_residual);
    }

    let mut tangled = inst.clone();
    tangled.w[(0, 1)] += 0.5;
    println!("entangled weights: residual {:.2e}", forward_residual(&tangled, false, false)?.max_residual);

    let stats = backward_residual_demo(0..50, 1e-6)?;
    println!(
        "backward: {} of 50 random instances leave the disentangled set (fraction {:.2})",
        stats.above_threshold, stats.fraction_above
    );
    Ok(())
}
