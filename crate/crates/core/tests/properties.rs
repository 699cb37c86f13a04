mod common;

use laddersim::batchnorm::{bn_backward, bn_forward, complement_projection, elementwise_backward, weighted_dot, BnParams};
use laddersim::hull::vertex_set;
use laddersim::lp::{LinearProgram, LpStatus};
use laddersim::scenario::perturb_tables;
use laddersim::teacher::{TableSet, DEFAULT_CAP};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn probability(raw: &[f64]) -> Vec<f64> {
    let s: f64 = raw.iter().sum();
    raw.iter().map(|x| x / s).collect()
}

fn spread(v: &[f64]) -> bool {
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    hi - lo > 1e-3
}

/// Vector, gradient and positive weights of a common length.
fn bn_case() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
    (2usize..9).prop_flat_map(|n| {
        (
            prop::collection::vec(-5.0f64..5.0, n),
            prop::collection::vec(-5.0f64..5.0, n),
            prop::collection::vec(0.05f64..1.0, n),
        )
    })
}

/// Row-stochastic matrix with small integer weights, so exact ties and
/// duplicated rows occur.
fn stochastic_matrix() -> impl Strategy<Value = DMatrix<f64>> {
    (2usize..6, 2usize..5).prop_flat_map(|(rows, cols)| {
        prop::collection::vec(1u32..12, rows * cols).prop_map(move |v| {
            let mut p = DMatrix::from_fn(rows, cols, |i, j| v[i * cols + j] as f64);
            for i in 0..rows {
                let s = p.row(i).sum();
                p.row_mut(i).iter_mut().for_each(|x| *x /= s);
            }
            p
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn bn_gradient_is_orthogonal_to_mean_and_direction((f, g, raw) in bn_case(), c1 in 0.1f64..3.0) {
        prop_assume!(spread(&f));
        let params = BnParams::weighted(c1, 0.3, probability(&raw));
        let rec = bn_forward(&f, &params).unwrap();
        let grad = bn_backward(&g, &rec, &params).unwrap();
        let w = &rec.weights;
        let scale = g.iter().fold(1.0f64, |a, x| a.max(x.abs())) * c1 / rec.sigma;
        prop_assert!(weighted_dot(&grad.g_f, &rec.standardized, w).abs() < 1e-11 * scale);
        prop_assert!(weighted_dot(&grad.g_f, &vec![1.0; f.len()], w).abs() < 1e-11 * scale);
    }

    #[test]
    fn bn_output_is_standardized((f, _g, raw) in bn_case()) {
        prop_assume!(spread(&f));
        let rec = bn_forward(&f, &BnParams::weighted(1.0, 0.0, probability(&raw))).unwrap();
        let ones = vec![1.0; f.len()];
        prop_assert!(weighted_dot(&rec.output, &ones, &rec.weights).abs() < 1e-12);
        prop_assert!((weighted_dot(&rec.output, &rec.output, &rec.weights) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bn_backward_matches_elementwise_form((f, g, _w) in bn_case(), c1 in 0.1f64..3.0) {
        prop_assume!(spread(&f));
        let n = f.len() as f64;
        let params = BnParams::new(c1, 0.0);
        let rec = bn_forward(&f, &params).unwrap();
        let grad = bn_backward(&g, &rec, &params).unwrap();
        let dy: Vec<f64> = g.iter().map(|x| x / n).collect();
        let (dx, _) = elementwise_backward(&f, &dy, c1).unwrap();
        let textbook = common::textbook_bn_backward(&f, &dy, c1);
        let scale = g.iter().fold(1.0f64, |a, x| a.max(x.abs())) * c1 / rec.sigma;
        for i in 0..f.len() {
            prop_assert!((grad.g_f[i] / n - dx[i]).abs() < 1e-12 * scale);
            prop_assert!((dx[i] - textbook[i]).abs() < 1e-11 * scale);
        }
    }

    #[test]
    fn complement_projection_is_idempotent((f, g, raw) in bn_case()) {
        prop_assume!(spread(&f));
        let w = probability(&raw);
        let ones = vec![1.0; f.len()];
        let basis: [&[f64]; 2] = [&f, &ones];
        let once = complement_projection(&g, &basis, &w);
        let twice = complement_projection(&once, &basis, &w);
        for (a, b) in once.iter().zip(&twice) {
            prop_assert!((a - b).abs() < 1e-11);
        }
        prop_assert!(weighted_dot(&once, &f, &w).abs() < 1e-10);
    }

    #[test]
    fn vertex_set_agrees_with_subset_enumeration(p in stochastic_matrix()) {
        let rep = vertex_set(&p);
        for i in 0..p.nrows() {
            prop_assert_eq!(rep.vertex_flags[i], common::brute_force_is_vertex(&p, i, 1e-9), "row {}", i);
            if rep.vertex_flags[i] {
                let cert = rep.certificates[i].as_ref().unwrap();
                prop_assert!(cert.verify(&p, i, 0.0));
            }
        }
        prop_assert_eq!(rep.vert_count, rep.vertex_flags.iter().filter(|&&v| v).count());
    }

    #[test]
    fn mixed_row_is_never_a_vertex(p in stochastic_matrix(), t in 0.1f64..0.9) {
        let mut p = p.insert_row(0, 0.0);
        let mix = p.row(1) * t + p.row(2) * (1.0 - t);
        p.row_mut(0).copy_from(&mix);
        prop_assert!(!vertex_set(&p).vertex_flags[0]);
    }

    #[test]
    fn feasible_programs_are_solved(
        a in prop::collection::vec(-3.0f64..3.0, 12),
        x0 in prop::collection::vec(0.0f64..2.0, 4),
        c in prop::collection::vec(0.1f64..2.0, 4),
    ) {
        let rows: Vec<Vec<f64>> = a.chunks(4).map(|r| r.to_vec()).collect();
        let mut lp = LinearProgram::new(4).minimize(c.clone());
        for r in &rows[..2] {
            lp = lp.eq(r.clone(), r.iter().zip(&x0).map(|(u, v)| u * v).sum());
        }
        lp = lp.le(rows[2].clone(), rows[2].iter().zip(&x0).map(|(u, v)| u * v).sum::<f64>() + 0.5);
        let sol = lp.solve();
        prop_assert_eq!(sol.status, LpStatus::Optimal);
        prop_assert!(sol.infeasibility < 1e-9);
        let dot = |r: &[f64]| r.iter().zip(&sol.x).map(|(u, v)| u * v).sum::<f64>();
        for r in &rows[..2] {
            let target: f64 = r.iter().zip(&x0).map(|(u, v)| u * v).sum();
            prop_assert!((dot(r) - target).abs() < 1e-8);
        }
        prop_assert!(sol.x.iter().all(|&v| v >= -1e-9));
        // positive costs and a feasible x0: the optimum can be no worse
        let base: f64 = c.iter().zip(&x0).map(|(u, v)| u * v).sum();
        prop_assert!(sol.objective <= base + 1e-8);
    }

    #[test]
    fn negative_total_mass_is_infeasible(n in 1usize..6, total in 0.1f64..5.0) {
        let sol = LinearProgram::new(n).eq(vec![1.0; n], -total).solve();
        prop_assert_eq!(sol.status, LpStatus::Infeasible);
        prop_assert!((sol.infeasibility - total).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn perturbed_tables_stay_stochastic(seed in any::<u64>(), sigma in 0.0f64..1.0, k in 0usize..common::ALL_TEACHERS.len()) {
        let g = common::teacher(common::ALL_TEACHERS[k]);
        let tables = TableSet::from_teacher(&g, DEFAULT_CAP).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = perturb_tables(&tables, sigma, &mut rng);
        for (e, t) in &out.tables {
            let orig = &tables.tables[e];
            for i in 0..t.p.nrows() {
                prop_assert!((t.p.row(i).sum() - 1.0).abs() < 1e-12);
                for j in 0..t.p.ncols() {
                    prop_assert!(t.p[(i, j)] >= 0.0);
                    // support is preserved
                    prop_assert_eq!(t.p[(i, j)] == 0.0, orig.p[(i, j)] == 0.0);
                }
            }
            for j in 0..t.pb.ncols() {
                if t.prior_child[j] > 0.0 {
                    prop_assert!((t.pb.column(j).sum() - 1.0).abs() < 1e-12);
                }
            }
        }
    }
}
