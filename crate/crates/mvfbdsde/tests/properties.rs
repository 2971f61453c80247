use std::sync::Arc;

use mvfbdsde::measure::{check_mean_w2_bounds, wasserstein2, wasserstein2_exact, EmpiricalLaw, W2Method};
use mvfbdsde::model::{build_homotopy_case1, build_homotopy_case2, builtin_example_meanfield, CoefficientSet, Dims, HomotopyInputs};
use mvfbdsde::paths::{backward_ito_integral, forward_ito_integral, sample_driver_pair, TimeGrid};
use proptest::prelude::*;

const SLACK: f64 = 1e-9;

fn cloud(n: usize, d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, n * d)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn w2_is_a_metric_in_one_dimension(a in cloud(9, 1), b in cloud(7, 1), c in cloud(5, 1)) {
        let (a, b, c) = (EmpiricalLaw::uniform(a, 1).unwrap(), EmpiricalLaw::uniform(b, 1).unwrap(), EmpiricalLaw::uniform(c, 1).unwrap());
        let ab = wasserstein2_exact(&a, &b).unwrap();
        let ba = wasserstein2_exact(&b, &a).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= SLACK);
        prop_assert!(wasserstein2_exact(&a, &a).unwrap() <= SLACK);
        let ac = wasserstein2_exact(&a, &c).unwrap();
        let cb = wasserstein2_exact(&c, &b).unwrap();
        prop_assert!(ab <= ac + cb + SLACK);
    }

    #[test]
    fn w2_is_a_metric_in_two_dimensions(a in cloud(6, 2), b in cloud(6, 2), c in cloud(6, 2)) {
        let law = |v: Vec<f64>| EmpiricalLaw::uniform(v, 2).unwrap();
        let (a, b, c) = (law(a), law(b), law(c));
        let w = |x: &EmpiricalLaw, y: &EmpiricalLaw| wasserstein2(x, y, W2Method::Assignment).unwrap();
        prop_assert!((w(&a, &b) - w(&b, &a)).abs() <= SLACK);
        prop_assert!(w(&a, &a) <= SLACK);
        prop_assert!(w(&a, &b) <= w(&a, &c) + w(&c, &b) + SLACK);
    }

    #[test]
    fn mean_gap_and_coupling_sandwich_w2(a in cloud(8, 2), b in cloud(8, 2), shift in 0usize..8) {
        let la = EmpiricalLaw::uniform(a.clone(), 2).unwrap();
        let lb = EmpiricalLaw::uniform(b.clone(), 2).unwrap();
        let coupling: Vec<(Vec<f64>, Vec<f64>)> = (0..8).map(|i| (a[2 * i..2 * i + 2].to_vec(), b[2 * ((i + shift) % 8)..2 * ((i + shift) % 8) + 2].to_vec())).collect();
        let r = check_mean_w2_bounds(&la, &lb, &coupling).unwrap();
        prop_assert!(r.holds, "{r:?}");
    }

    #[test]
    fn assignment_agrees_with_quantiles(a in cloud(10, 1), b in cloud(10, 1)) {
        let (a, b) = (EmpiricalLaw::uniform(a, 1).unwrap(), EmpiricalLaw::uniform(b, 1).unwrap());
        let x = wasserstein2(&a, &b, W2Method::Assignment).unwrap();
        let y = wasserstein2(&a, &b, W2Method::Exact1d).unwrap();
        prop_assert!((x - y).abs() <= SLACK);
    }

    #[test]
    fn dirac_distance_is_euclidean(x in cloud(1, 3), y in cloud(1, 3)) {
        let w = wasserstein2_exact(&EmpiricalLaw::dirac(&x), &EmpiricalLaw::dirac(&y)).unwrap();
        let e = x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        prop_assert!((w - e).abs() <= SLACK * (1.0 + e));
    }

    #[test]
    fn stochastic_integrals_are_linear(seed in 0u64..1000, s in -3.0f64..3.0, t in -3.0f64..3.0) {
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let drivers = sample_driver_pair(grid, 2, 1, 5, seed).unwrap();
        let len = 5 * 9 * 2;
        let h1: Vec<f64> = (0..len).map(|i| (i as f64 * 0.7).sin()).collect();
        let h2: Vec<f64> = (0..len).map(|i| (i as f64 * 0.3).cos()).collect();
        let mix: Vec<f64> = h1.iter().zip(&h2).map(|(a, b)| s * a + t * b).collect();
        let i1 = forward_ito_integral(&h1, 1, &drivers).unwrap();
        let i2 = forward_ito_integral(&h2, 1, &drivers).unwrap();
        let im = forward_ito_integral(&mix, 1, &drivers).unwrap();
        for p in 0..5 {
            prop_assert!((im[p] - s * i1[p] - t * i2[p]).abs() <= 1e-12 * (1.0 + im[p].abs()));
        }
        let b1 = backward_ito_integral(&h1[..45], 1, &drivers).unwrap();
        let b2 = backward_ito_integral(&h2[..45], 1, &drivers).unwrap();
        let bm = backward_ito_integral(&mix[..45], 1, &drivers).unwrap();
        for p in 0..5 {
            prop_assert!((bm[p] - s * b1[p] - t * b2[p]).abs() <= 1e-12 * (1.0 + bm[p].abs()));
        }
    }

    #[test]
    fn homotopy_coefficients_are_affine_in_alpha(alpha in 0.0f64..1.0, v in cloud(3, 4), theta in 0.05f64..2.0, second in any::<bool>()) {
        let base: Arc<dyn CoefficientSet> = Arc::new(builtin_example_meanfield(Dims::scalar()));
        let inputs = HomotopyInputs { x: vec![1.0], ..Default::default() };
        let build = |a: f64| if second {
            build_homotopy_case2(base.clone(), a, theta, inputs.clone()).unwrap()
        } else {
            build_homotopy_case1(base.clone(), a, theta, inputs.clone()).unwrap()
        };
        let law = EmpiricalLaw::uniform(v.clone(), 4).unwrap();
        let eval = |a: f64| {
            let mut out = vec![0.0; 12];
            build(a).eval_node(0.3, 1, &v, &law, &mut out);
            out
        };
        let (e0, e1, ea) = (eval(0.0), eval(1.0), eval(alpha));
        for i in 0..12 {
            prop_assert!((ea[i] - ((1.0 - alpha) * e0[i] + alpha * e1[i])).abs() <= 1e-12 * (1.0 + ea[i].abs()));
        }
    }
}
