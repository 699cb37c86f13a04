//! Batch Norm backward as a projection: the input gradient is orthogonal to
//! both the constant direction and the standardized input.

use laddersim::batchnorm::{bn_backward, bn_forward, complement_projection, jacobian, weighted_dot, BnParams};

fn main() -> laddersim::Result<()> {
    let f = [0.3, 1.7, -0.4, 2.2, 0.9];
    let g = [1.0, -0.5, 0.25, 0.8, -1.2];
    let w = [0.1, 0.3, 0.2, 0.25, 0.15];
    let params = BnParams::weighted(1.5, 0.2, w.to_vec());

    let rec = bn_forward(&f, &params)?;
    let grad = bn_backward(&g, &rec, &params)?;
    println!("mu {:.4}, sigma {:.4}", rec.mu, rec.sigma);
    println!("output          {:?}", rec.output);
    println!("input gradient  {:?}", grad.g_f);
    println!("<g_f, 1>_w      {:.2e}", weighted_dot(&grad.g_f, &[1.0; 5], &w));
    println!("<g_f, s>_w      {:.2e}", weighted_dot(&grad.g_f, &rec.standardized, &w));
    println!("[d c1, d c0]    {:?}", grad.g_c);

    // the same vector from an explicit projection and from the Jacobian
    let ones = [1.0; 5];
    let projected: Vec<f64> = complement_projection(&g, &[&ones, &rec.standardized], &w)
        .iter()
        .map(|x| x * params.c1 / rec.sigma)
        .collect();
    let jac = jacobian(&rec, params.c1);
    let via_jacobian: Vec<f64> = (0..5)
        .map(|k| (0..5).map(|i| w[i] * g[i] * jac[(i, k)]).sum::<f64>() / w[k])
        .collect();
    let gap = |v: &[f64]| v.iter().zip(&grad.g_f).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("projection gap  {:.2e}", gap(&projected));
    println!("jacobian gap    {:.2e}", gap(&via_jacobian));
    Ok(())
}
