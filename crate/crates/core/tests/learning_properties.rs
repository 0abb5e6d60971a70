use astra_core::cvae::{kl_divergence, GaussianParams};
use astra_core::data::{build_windows, synth_generate, SynthKind, SynthParams, WindowConfig};
use astra_core::encoder::{attention_weights, encoder_forward, EncoderConfig, EncoderParams};
use astra_core::gradcheck::{toy_model_config, toy_window};
use astra_core::losses::{best_of_k_loss, penalty_weight, weighted_loss, BaseLoss, PenaltyKind, PenaltySchedule};
use astra_core::metrics::{ade, agent_metrics, min_ade_k, AgentForecast, ArbVariant};
use astra_core::model::{Mode, Model};
use astra_core::params::ParamStore;
use astra_core::tensor::{Tape, Tensor};
use astra_core::train::cosine_lr;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const KINDS: [PenaltyKind; 4] = [
    PenaltyKind::Uniform,
    PenaltyKind::Linear,
    PenaltyKind::Quadratic,
    PenaltyKind::Parabolic,
];

fn traj(t: usize, c: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, t * c)
}

fn permutation(n: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..n).collect::<Vec<_>>()).prop_shuffle()
}

fn schedule() -> impl Strategy<Value = PenaltySchedule> {
    (0usize..4, 0.1f64..3.0, 0.1f64..3.0, 1usize..=12).prop_map(|(k, a, b, t)| {
        let kind = KINDS[k];
        let (a, b) = if kind == PenaltyKind::Parabolic { (a.max(b), a.min(b)) } else { (a, b) };
        PenaltySchedule::new(kind, a, b, t).unwrap()
    })
}

fn rigid(v: &[f64], theta: f64, shift: [f64; 2]) -> Vec<f64> {
    let (s, c) = theta.sin_cos();
    v.chunks(2)
        .flat_map(|p| [c * p[0] - s * p[1] + shift[0], s * p[0] + c * p[1] + shift[1]])
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn penalty_weights_are_positive(s in schedule()) {
        for t in 1..=s.t_pred() {
            prop_assert!(penalty_weight(&s, t) > 0.0);
        }
    }

    #[test]
    fn equal_endpoints_collapse_to_constant(a in 0.1f64..3.0, t in 1usize..=12, p in traj(12, 2), g in traj(12, 2)) {
        let pred = Tensor::new(&[t, 2], p[..2 * t].to_vec()).unwrap();
        let gt = Tensor::new(&[t, 2], g[..2 * t].to_vec()).unwrap();
        let plain = weighted_loss(&pred, &gt, &PenaltySchedule::uniform(t), BaseLoss::SmoothL1).unwrap();
        for kind in [PenaltyKind::Linear, PenaltyKind::Quadratic, PenaltyKind::Parabolic] {
            let s = PenaltySchedule::new(kind, a, a, t).unwrap();
            let c = if kind == PenaltyKind::Quadratic { a * a } else { a };
            let l = weighted_loss(&pred, &gt, &s, BaseLoss::SmoothL1).unwrap();
            prop_assert!((l - c * plain).abs() <= 1e-12 * (1.0 + l.abs()));
        }
    }

    #[test]
    fn weighted_loss_is_monotone_per_step(s in schedule(), p in traj(12, 2), g in traj(12, 2), step in 0usize..12, bump in 0.0f64..3.0) {
        let t = s.t_pred();
        let step = step % t;
        let gt = Tensor::new(&[t, 2], g[..2 * t].to_vec()).unwrap();
        let pred = Tensor::new(&[t, 2], p[..2 * t].to_vec()).unwrap();
        let mut worse = pred.clone();
        let diff = worse.data()[2 * step] - gt.data()[2 * step];
        worse.data_mut()[2 * step] += bump * if diff >= 0.0 { 1.0 } else { -1.0 };
        for kind in [BaseLoss::Mse, BaseLoss::SmoothL1] {
            prop_assert!(weighted_loss(&worse, &gt, &s, kind).unwrap() >= weighted_loss(&pred, &gt, &s, kind).unwrap());
        }
    }

    #[test]
    fn more_samples_never_raise_best_of_k(s in schedule(), pool in prop::collection::vec(traj(12, 2), 2..6), g in traj(12, 2)) {
        let t = s.t_pred();
        let mk = |v: &Vec<f64>| Tensor::new(&[t, 2], v[..2 * t].to_vec()).unwrap();
        let samples: Vec<Tensor> = pool.iter().map(mk).collect();
        let gt = mk(&g);
        let mut prev = f64::INFINITY;
        for k in 1..=samples.len() {
            let l = best_of_k_loss(&samples[..k], &gt, &s, BaseLoss::SmoothL1).unwrap();
            prop_assert!(l <= prev);
            prev = l;
        }
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_equal(
        q in prop::collection::vec((-3.0f64..3.0, -4.0f64..4.0), 1..8),
        p in prop::collection::vec((-3.0f64..3.0, -4.0f64..4.0), 8),
    ) {
        let d = q.len();
        let gq = GaussianParams::new(q.iter().map(|v| v.0).collect(), q.iter().map(|v| v.1).collect());
        let gp = GaussianParams::new(p[..d].iter().map(|v| v.0).collect(), p[..d].iter().map(|v| v.1).collect());
        prop_assert!(kl_divergence(&gq, &gp) >= 0.0);
        prop_assert!(kl_divergence(&gq, &gq).abs() < 1e-12);
    }

    #[test]
    fn ade_is_symmetric_and_min_ade_shrinks_with_samples(
        gt in traj(8, 2),
        pool in prop::collection::vec(traj(8, 2), 1..6),
        extra in traj(8, 2),
    ) {
        prop_assert_eq!(ade(&pool[0], &gt).unwrap(), ade(&gt, &pool[0]).unwrap());
        let base = min_ade_k(pool.iter().map(Vec::as_slice), &gt).unwrap().0;
        let more = min_ade_k(pool.iter().chain([&extra]).map(Vec::as_slice), &gt).unwrap().0;
        prop_assert!(more <= base);
    }

    #[test]
    fn metrics_ignore_rigid_motion(
        c in prop::sample::select(vec![2usize, 4]),
        gt in traj(6, 4),
        pool in prop::collection::vec(traj(6, 4), 1..4),
        theta in 0.0f64..6.3,
        shift in (-20.0f64..20.0, -20.0f64..20.0),
    ) {
        let n = 6 * c;
        let gt = gt[..n].to_vec();
        let pool: Vec<Vec<f64>> = pool.iter().map(|p| p[..n].to_vec()).collect();
        let m = |gt: &[f64], pool: &[Vec<f64>]| {
            let f = AgentForecast {
                scene: "s",
                point: &pool[0],
                samples: pool.iter().map(Vec::as_slice).collect(),
                gt,
                coord_dim: c,
            };
            agent_metrics(&f, ArbVariant::MeanOfRmse).unwrap()
        };
        let base = m(&gt, &pool);
        let sh = [shift.0, shift.1];
        let moved_pool: Vec<Vec<f64>> = pool.iter().map(|p| rigid(p, theta, sh)).collect();
        let moved = m(&rigid(&gt, theta, sh), &moved_pool);
        for ((_, a), (_, b)) in base.iter().zip(moved.iter()) {
            prop_assert!((a - b).abs() < 1e-9 * (1.0 + a.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn cosine_schedule_never_increases(total in 1usize..500, hi in 1e-5f64..1e-1, frac in 0.0f64..1.0) {
        let lo = hi * frac;
        let mut prev = f64::INFINITY;
        for t in 0..=total {
            let lr = cosine_lr(t, total, hi, lo);
            prop_assert!(lr <= prev && lr >= lo - 1e-18);
            prev = lr;
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn encoder_is_token_equivariant(
        (tokens, perm) in (2usize..7).prop_flat_map(|n| (prop::collection::vec(-10.0f64..10.0, n * 8), permutation(n))),
        seed in any::<u64>(),
    ) {
        let n = perm.len();
        let mut store = ParamStore::new();
        let enc = EncoderParams::new(&mut store, "e", EncoderConfig::new(8, 2, 12).unwrap(), &mut ChaCha8Rng::seed_from_u64(seed));
        let x = Tensor::new(&[n, 8], tokens.clone()).unwrap();
        let px = Tensor::new(&[n, 8], perm.iter().flat_map(|&p| tokens[p * 8..(p + 1) * 8].to_vec()).collect()).unwrap();
        let run = |x: &Tensor| {
            let mut tape = Tape::new();
            let b = store.bind(&mut tape);
            let v = tape.constant(x.clone());
            let y = encoder_forward(&mut tape, &b, &enc, v, None).unwrap();
            let w = attention_weights(&mut tape, &b, &enc, v, None).unwrap();
            (tape.value(y).clone(), w)
        };
        let (y, weights) = run(&x);
        let (py, _) = run(&px);
        prop_assert!(y.is_finite());
        for (i, &p) in perm.iter().enumerate() {
            for j in 0..8 {
                prop_assert!((py.get2(i, j) - y.get2(p, j)).abs() < 1e-10);
            }
        }
        for w in &weights {
            for r in 0..n {
                prop_assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn model_predictions_follow_agent_order(perm in permutation(3), data_seed in 0u64..50, seed in any::<u64>()) {
        let p = SynthParams { t_obs: 4, t_pred: 6, agents: 3, ..SynthParams::default() };
        let recs = synth_generate(SynthKind::Circular, 1, &p, data_seed);
        let w = build_windows("s", &recs, WindowConfig { t_obs: 4, t_pred: 6, ..WindowConfig::default() })
            .unwrap()
            .remove(0);
        let pw = w.permuted(&perm);
        for mode in [Mode::Deterministic, Mode::Stochastic] {
            let m = Model::new(toy_model_config(mode), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let k = if mode == Mode::Stochastic { 3 } else { 1 };
            let a = m.predict(&w, k, seed).unwrap();
            let b = m.predict(&pw, k, seed).unwrap();
            for s in 0..k {
                for (i, &p) in perm.iter().enumerate() {
                    prop_assert_eq!(b.trajectory(s, i), a.trajectory(s, p));
                }
            }
        }
    }
}

#[test]
fn toy_window_has_two_agents() {
    let w = toy_window();
    assert_eq!((w.n_agents(), w.t_obs(), w.t_pred()), (2, 4, 6));
}
