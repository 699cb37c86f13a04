//! Batch Norm as three sublayers (centre, scale, affine) and its backward pass
//! as a projection.
//!
//! Moments are taken under a probability weighting: uniform `1/N` over a batch,
//! or the event prior when the vector is indexed by events. The inner product
//! `<x, y>_w = sum_i w_i x_i y_i` is used throughout, so the standardized vector
//! and the all-ones vector are orthonormal and the backward pass is
//! `g_f = (c1 / sigma) * (g - <g, f~> f~ - <g, 1> 1)`.
//!
//! Gradients passed to [`bn_backward`] are per-sample (per-event) gradients of an
//! expected loss; multiply by the weights to recover sum-convention gradients.

use std::io::Write;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::dynamics::{train, TrainConfig, Trajectory, WeightSet};
use crate::error::{Error, Result};
use crate::teacher::{Edge, TableSet};

#[derive(Clone, Debug, PartialEq)]
pub struct BnParams {
    pub c1: f64,
    pub c0: f64,
    /// Probability weights over coordinates; uniform when `None`.
    pub weights: Option<Vec<f64>>,
}

impl Default for BnParams {
    fn default() -> Self {
        BnParams {
            c1: 1.0,
            c0: 0.0,
            weights: None,
        }
    }
}

impl BnParams {
    pub fn new(c1: f64, c0: f64) -> Self {
        BnParams {
            c1,
            c0,
            weights: None,
        }
    }

    pub fn weighted(c1: f64, c0: f64, weights: Vec<f64>) -> Self {
        BnParams {
            c1,
            c0,
            weights: Some(weights),
        }
    }
}

/// Every intermediate of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BnRecord {
    pub input: Vec<f64>,
    pub centered: Vec<f64>,
    pub standardized: Vec<f64>,
    pub output: Vec<f64>,
    pub mu: f64,
    pub sigma: f64,
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BnGrad {
    pub g_f: Vec<f64>,
    /// Gradients of `[c1, c0]`.
    pub g_c: [f64; 2],
}

fn resolve_weights(len: usize, weights: Option<&Vec<f64>>) -> Result<Vec<f64>> {
    match weights {
        None => Ok(vec![1.0 / len as f64; len]),
        Some(w) => {
            if w.len() != len {
                return Err(Error::Shape(format!(
                    "{} weights for a vector of length {len}",
                    w.len()
                )));
            }
            if w.iter().any(|&x| !(x >= 0.0)) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::Precondition(
                    "batch norm weights must be a probability vector".into(),
                ));
            }
            Ok(w.clone())
        }
    }
}

pub fn weighted_dot(x: &[f64], y: &[f64], w: &[f64]) -> f64 {
    x.iter().zip(y).zip(w).map(|((a, b), c)| a * b * c).sum()
}

pub fn bn_forward(f: &[f64], params: &BnParams) -> Result<BnRecord> {
    if f.len() < 2 {
        return Err(Error::Shape("batch norm needs at least two coordinates".into()));
    }
    let weights = resolve_weights(f.len(), params.weights.as_ref())?;
    let mu: f64 = f.iter().zip(&weights).map(|(x, w)| x * w).sum();
    let centered: Vec<f64> = f.iter().map(|x| x - mu).collect();
    let sigma = weighted_dot(&centered, &centered, &weights).sqrt();
    let scale = f.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    // Relative floor: centring a constant vector leaves only rounding noise.
    if !(sigma > 1e-13 * scale) || !sigma.is_finite() {
        return Err(Error::ZeroVariance);
    }
    let standardized: Vec<f64> = centered.iter().map(|x| x / sigma).collect();
    let output = standardized
        .iter()
        .map(|s| params.c1 * s + params.c0)
        .collect();
    Ok(BnRecord {
        input: f.to_vec(),
        centered,
        standardized,
        output,
        mu,
        sigma,
        weights,
    })
}

pub fn bn_backward(g: &[f64], record: &BnRecord, params: &BnParams) -> Result<BnGrad> {
    if g.len() != record.input.len() {
        return Err(Error::Shape(format!(
            "gradient of length {} for a record of length {}",
            g.len(),
            record.input.len()
        )));
    }
    let w = &record.weights;
    let s = &record.standardized;
    let along_s = weighted_dot(g, s, w);
    let along_1: f64 = g.iter().zip(w).map(|(a, b)| a * b).sum();
    let k = params.c1 / record.sigma;
    let g_f = g
        .iter()
        .zip(s)
        .map(|(gi, si)| k * (gi - along_s * si - along_1))
        .collect();
    Ok(BnGrad {
        g_f,
        g_c: [along_s, along_1],
    })
}

/// Textbook batch backward for a uniform batch, written elementwise:
/// `dx_i = c1 / (N sigma) * (N dy_i - sum dy - xhat_i sum(dy xhat))`.
/// Returns `(dx, [d c1, d c0])` with `d c1 = sum dy xhat`, `d c0 = sum dy`.
pub fn elementwise_backward(x: &[f64], dy: &[f64], c1: f64) -> Result<(Vec<f64>, [f64; 2])> {
    let n = x.len();
    if dy.len() != n || n < 2 {
        return Err(Error::Shape("elementwise backward needs equal lengths >= 2".into()));
    }
    let nf = n as f64;
    let mean = x.iter().sum::<f64>() / nf;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf;
    let sigma = var.sqrt();
    if !(sigma > 0.0) {
        return Err(Error::ZeroVariance);
    }
    let xhat: Vec<f64> = x.iter().map(|v| (v - mean) / sigma).collect();
    let sum_dy: f64 = dy.iter().sum();
    let sum_dy_xhat: f64 = dy.iter().zip(&xhat).map(|(a, b)| a * b).sum();
    let dx = (0..n)
        .map(|i| c1 / (nf * sigma) * (nf * dy[i] - sum_dy - xhat[i] * sum_dy_xhat))
        .collect();
    Ok((dx, [sum_dy_xhat, sum_dy]))
}

/// Jacobian `d output / d input` of the forward map.
pub fn jacobian(record: &BnRecord, c1: f64) -> DMatrix<f64> {
    let n = record.input.len();
    let s = &record.standardized;
    let w = &record.weights;
    DMatrix::from_fn(n, n, |i, k| {
        let delta = if i == k { 1.0 } else { 0.0 };
        c1 / record.sigma * (delta - w[k] - s[i] * s[k] * w[k])
    })
}

/// Projects `g` onto the `w`-orthogonal complement of `span(basis)` by
/// Gram–Schmidt. Basis vectors that are numerically dependent are skipped.
pub fn complement_projection(g: &[f64], basis: &[&[f64]], w: &[f64]) -> Vec<f64> {
    let mut ortho: Vec<Vec<f64>> = Vec::new();
    for b in basis {
        let mut v = b.to_vec();
        for q in &ortho {
            let c = weighted_dot(&v, q, w);
            v.iter_mut().zip(q).for_each(|(x, y)| *x -= c * y);
        }
        let norm = weighted_dot(&v, &v, w).sqrt();
        if norm > 1e-12 {
            v.iter_mut().for_each(|x| *x /= norm);
            ortho.push(v);
        }
    }
    let mut out = g.to_vec();
    for q in &ortho {
        let c = weighted_dot(&out, q, w);
        out.iter_mut().zip(q).for_each(|(x, y)| *x -= c * y);
    }
    out
}

// --------------------------------------------------------------------------
// Energy tracking

/// One row of an energy trace: node `node` of region `region` at `step`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EnergyRow {
    pub step: usize,
    pub region: usize,
    pub node: usize,
    /// `0.5 * ||w_j||^2` over every incoming weight of the node.
    pub energy: f64,
    /// `<w_j, dw_j>` for the applied update.
    pub inner: f64,
    /// `|E(t+1) - E(t) - lr^2/2 ||dw_j||^2|`.
    pub residual: f64,
    pub update_norm_sq: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EnergyTrace {
    pub rows: Vec<EnergyRow>,
}

impl EnergyTrace {
    pub fn max_abs_inner(&self) -> f64 {
        self.rows.iter().map(|r| r.inner.abs()).fold(0.0, f64::max)
    }

    pub fn max_residual(&self) -> f64 {
        self.rows.iter().map(|r| r.residual).fold(0.0, f64::max)
    }

    pub fn write_csv<W: Write>(&self, out: W, tables: &TableSet) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "region", "node", "E", "w_dot_dw", "residual"])?;
        for r in &self.rows {
            w.write_record([
                r.step.to_string(),
                tables.regions[r.region].id.clone(),
                r.node.to_string(),
                r.energy.to_string(),
                r.inner.to_string(),
                r.residual.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Energy of every node of `region`: half the squared norm of its incoming weights.
pub fn node_energies(tables: &TableSet, weights: &WeightSet, region: usize) -> Vec<f64> {
    let n = tables.regions[region].n;
    let mut e = vec![0.0; n];
    for &c in &tables.regions[region].children {
        let w = &weights.w[&Edge::new(region, c)];
        for (j, ej) in e.iter_mut().enumerate() {
            *ej += 0.5 * w.column(j).norm_squared();
        }
    }
    e
}

/// Runs a training job with energy tracking switched on for `regions`.
pub fn energy_trace(
    tables: &TableSet,
    init: &WeightSet,
    config: &TrainConfig,
    regions: &[usize],
) -> Result<(EnergyTrace, Trajectory)> {
    let mut cfg = config.clone();
    cfg.energy_regions = regions.to_vec();
    let traj = train(tables, init, &cfg)?;
    Ok((traj.energy.clone(), traj))
}
