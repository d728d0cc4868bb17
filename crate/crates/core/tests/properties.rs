use eoslab::datagen::{generate, DataSet, SpikeSpec};
use eoslab::dynamics::{
    central_flow_reduced, detect_phases, gd_train, interval_kta_stats, FlowConfig, GdConfig, Mode, ModelState,
    PhaseInterval,
};
use eoslab::metrics::{individual_alignment, kta};
use eoslab::models::{
    linear_grads, linear_loss, ntk_linear, reduced_grads, reduced_step, relu_grads, relu_loss, LinearNet, ReducedState,
    ReluNet,
};
use eoslab::spectral::{solve_rank_one, sym_eigh, RankOneProblem};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn small_data(n: usize, d: usize, seed: u64) -> DataSet {
    generate(&SpikeSpec::new(n, d, seed)).unwrap()
}

fn vec_strategy(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0..2.0f64, len)
}

fn psd(n: usize) -> impl Strategy<Value = DMatrix<f64>> {
    vec_strategy(n * n).prop_map(move |v| {
        let a = DMatrix::from_vec(n, n, v);
        a.tr_mul(&a) + DMatrix::identity(n, n) * 1e-3
    })
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

/// Distinct, sorted non-increasing diagonal with a random direction.
fn rank_one_problem() -> impl Strategy<Value = RankOneProblem> {
    (2usize..25).prop_flat_map(|n| {
        (prop::collection::vec(0.1..100.0f64, n), prop::collection::vec(-1.0..1.0f64, n), 1e-3..300.0f64)
            .prop_filter_map("degenerate", |(mut l, b, alpha)| {
                l.sort_by(|a, b| b.total_cmp(a));
                if l.windows(2).any(|w| w[0] - w[1] < 1e-3) || b.iter().any(|x| x.abs() < 1e-3) {
                    return None;
                }
                RankOneProblem::new(l, b, alpha).ok()
            })
    })
}

proptest! {
    #[test]
    fn kta_invariant_to_scale_and_sign(k in psd(6), y in vec_strategy(6), s in 0.01..100.0f64, t in 0.01..100.0f64) {
        let y = DVector::from_vec(y);
        prop_assume!(y.norm() > 1e-3);
        let base = kta(&k, &y).unwrap();
        prop_assert!(rel(kta(&(&k * s), &y).unwrap(), base) < 1e-12);
        prop_assert!(rel(kta(&k, &(&y * t)).unwrap(), base) < 1e-12);
        prop_assert!(rel(kta(&k, &(-&y)).unwrap(), base) < 1e-12);
        prop_assert!(base > -1e-12 && base <= 1.0 + 1e-12);
    }

    #[test]
    fn secular_solution_matches_dense(p in rank_one_problem()) {
        let sol = solve_rank_one(&p).unwrap();
        prop_assert!(sol.interlacing_violations().is_empty());
        let dense = sym_eigh(&p.dense()).unwrap();
        let scale = dense.values[0].abs();
        for (a, b) in sol.tilde_lambdas.iter().zip(dense.values.iter()) {
            prop_assert!((a - b).abs() <= 1e-10 * scale, "{} vs {}", a, b);
        }
        let al = sol.alignments().unwrap();
        prop_assert!((al.iter().map(|a| a * a).sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn individual_alignment_sums_to_one(k in psd(7), y in vec_strategy(7)) {
        let y = DVector::from_vec(y);
        prop_assume!(y.norm() > 1e-3);
        let al = individual_alignment(&sym_eigh(&k).unwrap(), &y).unwrap();
        prop_assert!((al.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(al.iter().all(|&a| a >= 0.0));
    }

    #[test]
    fn rank_one_ntk_is_c2_kx_plus_vvt(seed in 0u64..1000, hidden in 2usize..6, c in -2.0..2.0f64, ua in vec_strategy(14)) {
        let ds = small_data(5, 9, seed);
        let u = DVector::from_column_slice(&ua[..hidden]);
        prop_assume!(u.norm() > 1e-3);
        let a = DVector::from_column_slice(&ua[5..14]);
        let net = LinearNet::rank_one(&u, &a, c);
        let v = ds.x.tr_mul(&a);
        let expected = &ds.kernel * (c * c) + &v * v.transpose();
        let k = ntk_linear(&net, &ds).unwrap();
        prop_assert!((&k - &expected).norm() <= 1e-10 * expected.norm().max(1.0));
    }

    #[test]
    fn reduced_step_equals_full_step_on_rank_one(seed in 0u64..1000, c in 0.1..2.0f64, ua in vec_strategy(12), eta in 1e-4..0.05f64) {
        let ds = small_data(6, 8, seed);
        let u = DVector::from_column_slice(&ua[..4]);
        prop_assume!(u.norm() > 1e-3);
        let a = DVector::from_column_slice(&ua[4..12]) * 0.3;
        let net = LinearNet::rank_one(&u, &a, c);
        let g = linear_grads(&net, &ds).unwrap();
        let next = LinearNet { w1: &net.w1 - &g.w1 * eta, w2: &net.w2 - &g.w2 * eta };
        let un = &u / u.norm();
        let (c_full, v_full) = (next.w2.dot(&un), next.features(&ds).tr_mul(&un));
        let s = reduced_step(&ReducedState::new(c, ds.x.tr_mul(&a)), &ds, eta);
        prop_assert!(rel(s.c, c_full) < 1e-10);
        prop_assert!((&s.v - &v_full).norm() <= 1e-10 * v_full.norm().max(1e-12));
    }

    #[test]
    fn sign_law_on_random_states(seed in 0u64..1000, c in -3.0..3.0f64, v in vec_strategy(6), eta in 1e-4..1.0f64) {
        let ds = small_data(6, 10, seed);
        let s = ReducedState::new(c, DVector::from_vec(v));
        let n = ds.n() as f64;
        let e = s.residual(&ds);
        let ef = e.dot(&s.outputs());
        let ev = e.dot(&s.v);
        let next = reduced_step(&s, &ds, eta);
        let dc2 = next.c2() - s.c2();
        // exact identity: c'^2 - c^2 = -(2 eta/n) <E,F> + (eta/n)^2 <E,v>^2
        let rhs = -2.0 * eta / n * ef + (eta / n).powi(2) * ev * ev;
        prop_assert!((dc2 - rhs).abs() <= 1e-10 * (dc2.abs() + rhs.abs()).max(1e-12));
        if eta * ev.abs() < 2.0 * n * c.abs() && ef.abs() > 1e-12 {
            prop_assert_eq!(dc2.signum(), -ef.signum());
        }
    }

    #[test]
    fn linear_gradients_match_finite_differences(seed in 0u64..1000, i in 0usize..3, j in 0usize..7, h in 0usize..3) {
        let ds = small_data(5, 7, seed);
        let net = LinearNet::init(7, 3, 0.5, seed + 1);
        let g = linear_grads(&net, &ds).unwrap();
        let step = 1e-6;
        let fd = |bump: &dyn Fn(&mut LinearNet, f64)| {
            let (mut p, mut m) = (net.clone(), net.clone());
            bump(&mut p, step);
            bump(&mut m, -step);
            (linear_loss(&p, &ds).unwrap() - linear_loss(&m, &ds).unwrap()) / (2.0 * step)
        };
        let d1 = fd(&|x, dx| x.w1[(i, j)] += dx);
        let d2 = fd(&|x, dx| x.w2[h] += dx);
        let tol = |a: f64, b: f64| (a - b).abs() <= 1e-5 * a.abs().max(b.abs()).max(1e-3);
        prop_assert!(tol(d1, g.w1[(i, j)]), "{} vs {}", d1, g.w1[(i, j)]);
        prop_assert!(tol(d2, g.w2[h]), "{} vs {}", d2, g.w2[h]);
    }

    #[test]
    fn reduced_gradients_match_finite_differences(seed in 0u64..1000, c in -2.0..2.0f64, v in vec_strategy(5)) {
        let ds = small_data(5, 7, seed);
        let s = ReducedState::new(c, DVector::from_vec(v));
        let (gc, gv) = reduced_grads(&s, &ds);
        let step = 1e-6;
        let loss = |c: f64, v: &DVector<f64>| ReducedState::new(c, v.clone()).loss(&ds);
        let dc = (loss(c + step, &s.v) - loss(c - step, &s.v)) / (2.0 * step);
        prop_assert!((dc - gc).abs() <= 1e-5 * dc.abs().max(gc.abs()).max(1e-3));
        // G_v is the feature-space velocity K_x dL/dv.
        let dv = DVector::from_fn(5, |k, _| {
            let (mut p, mut m) = (s.v.clone(), s.v.clone());
            p[k] += step;
            m[k] -= step;
            (loss(c, &p) - loss(c, &m)) / (2.0 * step)
        });
        let expect = &ds.kernel * dv;
        prop_assert!((&expect - &gv).norm() <= 1e-5 * expect.norm().max(gv.norm()).max(1e-3));
    }

    #[test]
    fn relu_gradients_match_finite_differences(seed in 0u64..1000, i in 0usize..4, j in 0usize..6, h in 0usize..4) {
        let ds = small_data(5, 6, seed);
        let net = ReluNet::init(6, 4, 1.0, seed + 7);
        let step = 1e-6;
        let pre = net.preactivations(&ds);
        prop_assume!(pre.iter().all(|p| p.abs() > 1e-3));
        let g = relu_grads(&net, &ds).unwrap();
        let loss_w1 = |delta: f64| {
            let mut x = net.clone();
            x.w1[(i, j)] += delta;
            relu_loss(&x, &ds).unwrap()
        };
        let loss_w2 = |delta: f64| {
            let mut x = net.clone();
            x.w2[h] += delta;
            relu_loss(&x, &ds).unwrap()
        };
        let d1 = (loss_w1(step) - loss_w1(-step)) / (2.0 * step);
        let d2 = (loss_w2(step) - loss_w2(-step)) / (2.0 * step);
        prop_assert!((d1 - g.w1[(i, j)]).abs() <= 1e-5 * d1.abs().max(1e-3));
        prop_assert!((d2 - g.w2[h]).abs() <= 1e-5 * d2.abs().max(1e-3));
    }

    #[test]
    fn target_projection_factorizes(seed in 0u64..1000, n in 4usize..10, d in 3usize..12) {
        let ds = small_data(n, d, seed);
        let svd = ds.x.clone().svd(true, true);
        let (pu, sv) = (svd.u.unwrap(), svd.singular_values);
        let yq = ds.kernel_spectrum.project(&ds.y);
        for i in 0..n.min(d) {
            let lhs = yq[i].abs();
            let rhs = sv[i] * ds.beta.dot(&pu.column(i)).abs();
            // ordering only pins eigenvectors with simple eigenvalues
            let simple = (i == 0 || ds.lambdas()[i - 1] - ds.lambdas()[i] > 1e-6 * ds.lambda1())
                && (i + 1 >= n || ds.lambdas()[i] - ds.lambdas()[i + 1] > 1e-6 * ds.lambda1());
            if simple {
                prop_assert!((lhs - rhs).abs() <= 1e-8 * ds.y.norm(), "{}: {} vs {}", i, lhs, rhs);
            }
        }
    }

    #[test]
    fn interval_totals_telescope(series in prop::collection::vec(0.0..4.0f64, 10..80), kta_vals in prop::collection::vec(-1.0..1.0f64, 80), w in 1usize..5) {
        let ivs = detect_phases(&series, 2.0, w).unwrap();
        let steps: Vec<usize> = (0..series.len()).collect();
        let k = &kta_vals[..series.len()];
        let rows = interval_kta_stats(&steps, k, &ivs).unwrap();
        let total: f64 = rows.iter().map(|r| r.total).sum();
        prop_assert!((total - (k[k.len() - 1] - k[0])).abs() < 1e-12);
        prop_assert_eq!(ivs.first().unwrap().start, 0);
        prop_assert_eq!(ivs.last().unwrap().end, series.len() - 1);
    }

    #[test]
    fn phase_labels_stable_under_window_growth(period in 30usize..80, amp in 0.2..1.0f64, w in 1usize..4, phase in 0.0..std::f64::consts::TAU) {
        let len = 4 * period;
        let s: Vec<f64> = (0..len).map(|t| 2.0 + amp * (2.0 * std::f64::consts::PI * t as f64 / period as f64 + phase).sin()).collect();
        let (a, b) = (detect_phases(&s, 2.0, w).unwrap(), detect_phases(&s, 2.0, w + 1).unwrap());
        let per_step = |ivs: &[PhaseInterval]| {
            let mut out = vec![ivs[0].label; len];
            for iv in ivs {
                out[iv.start..].fill(iv.label);
            }
            out
        };
        let (la, lb) = (per_step(&a), per_step(&b));
        let near = |t: usize| a.iter().chain(&b).any(|iv| iv.start.abs_diff(t) <= w + 1);
        for t in 0..len {
            prop_assert!(la[t] == lb[t] || near(t), "step {}: {:?} vs {:?}", t, la[t], lb[t]);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn central_flow_respects_constraint(seed in 0u64..500, ratio in 0.6..1.6f64, v in vec_strategy(6)) {
        let ds = small_data(6, 10, seed);
        let n = ds.n() as f64;
        let c: f64 = 1.0;
        // choose eta so the initial sharpness is `ratio` times 2/eta
        let eta = 2.0 * ratio * n / (ds.lambda1() * c * c);
        let s0 = ReducedState::new(c, DVector::from_vec(v) * 0.3);
        let mut cfg = FlowConfig::new(eta, 20.0, 0.1);
        cfg.record_every = 1;
        let res = central_flow_reduced(&s0, &ds, &cfg);
        if ratio > 1.0 {
            prop_assert!(matches!(res, Err(eoslab::Error::Validation(_))));
            return Ok(());
        }
        // c may cross zero while constrained, which the flow reports as degenerate
        let Ok(run) = res else {
            return Ok(());
        };
        let limit = 2.0 / eta;
        for r in &run.trajectory.records {
            prop_assert!(r.sigma >= 0.0);
            prop_assert!(r.sharpness_approx <= limit + 1e-6, "{} > {}", r.sharpness_approx, limit);
        }
    }

    #[test]
    fn gd_is_deterministic(seed in 0u64..1000, eta in 0.001..0.05f64) {
        let ds = small_data(5, 8, seed);
        let run = || {
            let init = ModelState::Full(LinearNet::init(8, 6, 0.3, seed));
            let mut cfg = GdConfig::new(eta, Mode::Hybrid { switch_residual: 0.05 }, 40);
            cfg.seed = seed;
            gd_train(init, &ds, &cfg).map(|r| r.trajectory)
        };
        match (run(), run()) {
            (Ok(a), Ok(b)) => {
                prop_assert_eq!(a.records, b.records);
                prop_assert_eq!(a.provenance, b.provenance);
            }
            (a, b) => prop_assert_eq!(format!("{:?}", a.err()), format!("{:?}", b.err())),
        }
        prop_assert_eq!(generate(&SpikeSpec::new(5, 8, seed)).unwrap().x, ds.x);
    }
}
