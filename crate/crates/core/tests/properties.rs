use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tgrbf::control::{adapt_gains, control_law, sig_alpha, ControlSign, GainBounds, GainState};
use tgrbf::gradcheck::{random_network, rel_error, trace_near_kink};
use tgrbf::net::{count_parameters, Dims, TgrbfState};
use tgrbf::offline::Sample;
use tgrbf::online::{
    explicit_step_size, step_size_safeguard, ExperienceBuffer, OnlineOptimizer, TriggerConfig,
};
use tgrbf::plant::{disturbance_at, DisturbanceSpec};

fn net_and_input(seed: u64) -> (TgrbfState, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = Dims {
        n_in: rng.random_range(1..=4),
        m: rng.random_range(1..=8),
        p: rng.random_range(1..=8),
    };
    let net = random_network(dims, &mut rng).unwrap();
    let x = (0..dims.n_in).map(|_| rng.random_range(-2.0..2.0)).collect();
    (net, x)
}

fn sample(rng: &mut ChaCha8Rng) -> Sample {
    let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
    Sample {
        target: x[2] + rng.random_range(-0.2..0.2),
        x,
        err_priority: 0.0,
    }
}

proptest! {
    #[test]
    fn fusion_is_convex_and_gates_are_clamped(seed in any::<u64>()) {
        let (net, x) = net_and_input(seed);
        let t = net.forward(&x).unwrap();
        prop_assert!(t.g > 0.0 && t.g < 1.0);
        let (lo, hi) = (t.y_rbf.min(t.y_gru), t.y_rbf.max(t.y_gru));
        prop_assert!(t.y >= lo - 1e-12 && t.y <= hi + 1e-12);
        prop_assert!(t.z.iter().chain(&t.r).all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(t.phi.iter().all(|p| *p > 0.0 && *p <= 1.0));
    }

    #[test]
    fn parameter_jacobian_matches_central_differences(seed in any::<u64>()) {
        let (net, x) = net_and_input(seed);
        let t = net.forward(&x).unwrap();
        prop_assume!(!trace_near_kink(&t));
        let analytic = net.jacobian_params(&t);
        let base = net.flatten().values;
        let mut probe = net.clone();
        let h = 1e-5;
        for (i, a) in analytic.iter().enumerate() {
            let mut v = base.clone();
            v[i] = base[i] + h;
            probe.unflatten(&v).unwrap();
            let plus = probe.forward(&x).unwrap().y;
            v[i] = base[i] - h;
            probe.unflatten(&v).unwrap();
            let minus = probe.forward(&x).unwrap().y;
            let numeric = (plus - minus) / (2.0 * h);
            prop_assert!((a - numeric).abs() < 1e-6 * (1.0 + a.abs()), "index {i}: {a} vs {numeric}");
        }
    }

    #[test]
    fn input_jacobian_matches_central_differences(seed in any::<u64>()) {
        let (net, x) = net_and_input(seed);
        let t = net.forward(&x).unwrap();
        prop_assume!(!trace_near_kink(&t));
        let analytic = net.jacobian_input(&t);
        for (j, a) in analytic.iter().enumerate() {
            let h = 1e-5;
            let mut xp = x.clone();
            xp[j] += h;
            let plus = net.forward(&xp).unwrap().y;
            xp[j] -= 2.0 * h;
            let minus = net.forward(&xp).unwrap().y;
            let numeric = (plus - minus) / (2.0 * h);
            prop_assert!(rel_error(*a, numeric) < 1e-4 || (a - numeric).abs() < 1e-8);
        }
    }

    #[test]
    fn flatten_round_trips(seed in any::<u64>()) {
        let (net, _) = net_and_input(seed);
        let flat = net.flatten();
        prop_assert_eq!(flat.values.len(), count_parameters(net.dims()));
        let mut other = TgrbfState::zeros(net.dims()).unwrap();
        other.unflatten(&flat.values).unwrap();
        prop_assert_eq!(&other.flatten().values, &flat.values);
        let mut shifted = flat.clone();
        let masked: Vec<f64> = shifted.masked().iter().map(|v| v + 1.0).collect();
        shifted.set_masked(&masked);
        for (i, online) in flat.online_mask().iter().enumerate() {
            prop_assert_eq!(shifted.values[i] != flat.values[i], *online);
        }
    }

    #[test]
    fn buffer_never_exceeds_capacity_and_evicts_from_oldest_quarter(
        cap in 1usize..40,
        priorities in proptest::collection::vec(0u8..5, 0..200),
    ) {
        let mut buf = ExperienceBuffer::new(cap);
        for (i, p) in priorities.iter().enumerate() {
            let before: Vec<u64> = buf.entries().map(|e| e.index).collect();
            let evicted = buf.push(Sample { x: vec![], target: 0.0, err_priority: f64::from(*p) });
            prop_assert!(buf.len() <= cap);
            if let Some(e) = evicted {
                let pos = before.iter().position(|&ix| ix == e.index).unwrap();
                prop_assert!(pos < cap.div_ceil(4));
            } else {
                prop_assert!(before.len() < cap);
            }
            prop_assert_eq!(buf.entries().last().unwrap().index, i as u64);
        }
    }

    #[test]
    fn explicit_step_zeroes_a_single_affine_residual(
        a in proptest::collection::vec(-3.0f64..3.0, 1..8),
        f0 in -5.0f64..5.0,
    ) {
        prop_assume!(a.iter().map(|v| v * v).sum::<f64>() > 1e-3);
        let f = DVector::from_element(1, f0);
        let jac = DMatrix::from_row_slice(1, a.len(), &a);
        let eta = explicit_step_size(&f, &jac, 1.0).eta;
        // residual after w -= eta Jᵀ F on the affine model F(w) = F0 + J (w − w0)
        let g = jac.transpose() * &f;
        let after = f0 - eta * (&jac * &g)[0];
        prop_assert!(after.abs() < 1e-10 * (1.0 + f0.abs()));
    }

    #[test]
    fn scaled_explicit_step_never_increases_the_linearised_loss(
        seed in any::<u64>(),
        rows in 1usize..8,
        cols in 1usize..12,
        s in 1usize..64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = DVector::from_fn(rows, |_, _| rng.random_range(-1.0..1.0));
        let jac = DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0));
        let eta = explicit_step_size(&f, &jac, 1.0).eta;
        let step = jac.transpose() * &f * (eta / s as f64);
        let after = &f - &jac * step;
        prop_assert!(after.norm_squared() <= f.norm_squared() * (1.0 + 1e-12));
    }

    #[test]
    fn safeguarded_step_is_bounded(
        seed in any::<u64>(),
        eta in 0.0f64..100.0,
        alpha in 0.0f64..0.99,
        eta_max in 1e-3f64..10.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (r, c) = (rng.random_range(1..10), rng.random_range(1..10));
        let jac = DMatrix::from_fn(r, c, |_, _| rng.random_range(-2.0..2.0));
        let g = step_size_safeguard(eta, &jac, alpha, eta_max);
        prop_assert!(g.eta.is_finite() && g.eta >= 0.0 && g.eta <= eta_max && g.eta <= eta);
        if let Some(cap) = g.cap {
            prop_assert!(g.eta <= cap);
        }
    }

    #[test]
    fn online_update_touches_only_masked_parameters(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = Dims { n_in: 3, m: rng.random_range(1..=6), p: rng.random_range(1..=6) };
        let mut net = random_network(dims, &mut rng).unwrap();
        let mut opt = OnlineOptimizer::new(&net, TriggerConfig { batch_s: 8, ..TriggerConfig::default() }, seed).unwrap();
        for _ in 0..20 {
            opt.buffer.push(sample(&mut rng));
        }
        let before = net.flatten();
        let event = opt.online_update(&mut net, 1.0, 0).unwrap();
        prop_assert!(event.is_some());
        let after = net.flatten();
        for (i, online) in before.online_mask().iter().enumerate() {
            if !online {
                prop_assert_eq!(before.values[i].to_bits(), after.values[i].to_bits());
            }
        }
    }

    #[test]
    fn quiet_errors_never_mutate(seed in any::<u64>(), errs in proptest::collection::vec(-0.01f64..=0.01, 1..50)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = random_network(Dims { n_in: 3, m: 4, p: 4 }, &mut rng).unwrap();
        let before = net.clone();
        let mut opt = OnlineOptimizer::new(&net, TriggerConfig::default(), seed).unwrap();
        for (k, e) in errs.iter().enumerate() {
            opt.buffer.push(sample(&mut rng));
            prop_assert!(opt.online_update(&mut net, *e, k as u64).unwrap().is_none());
        }
        prop_assert_eq!(net, before);
        prop_assert!(opt.events.is_empty());
    }

    #[test]
    fn disturbance_is_a_pure_function_of_seed_and_step(seed in any::<u64>(), k in 0u64..1_000_000) {
        let spec = DisturbanceSpec { seed, ..DisturbanceSpec::default() };
        let a = disturbance_at(&spec, k, 1e-3);
        let _ = disturbance_at(&spec, k + 1, 1e-3);
        prop_assert_eq!(a.to_bits(), disturbance_at(&spec, k, 1e-3).to_bits());
    }

    #[test]
    fn gains_stay_in_bounds_and_control_saturates(
        e in -10.0f64..10.0,
        dym in -5.0f64..5.0,
        k1 in 1.5f64..50.0,
        k2 in 0.01f64..50.0,
        u_max in 0.1f64..30.0,
    ) {
        let b = GainBounds::default();
        let g = GainState::new(k1, k2, 0.7, 20.0, 4.0, b).unwrap();
        let (next, _) = adapt_gains(&g, e, dym);
        prop_assert!((b.k1_min..=b.k1_max).contains(&next.k1));
        prop_assert!((b.k2_min..=b.k2_max).contains(&next.k2));
        let u = control_law(e, &next, ControlSign::Positive, u_max);
        prop_assert!(u.abs() <= u_max);
        prop_assert_eq!(sig_alpha(-e, 0.7), -sig_alpha(e, 0.7));
    }
}
