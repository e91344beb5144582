use dmcanc::compensation::CompensationSet;
use dmcanc::control::global_filter;
use dmcanc::dsp::{convolve, FirFilter};
use dmcanc::network::{CoefficientBus, CommPolicy, Schedule};
use dmcanc::plant::Plant;
use proptest::prelude::*;

fn taps(max: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, 1..max)
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

fn small_plant(seed: Vec<f64>) -> Plant {
    let f = |i: usize, len: usize| {
        FirFilter::new((0..len).map(|j| seed[(i * 7 + j) % seed.len()] * 0.5f64.powi(j as i32)).collect()).unwrap()
    };
    let primary = vec![f(0, 6), f(1, 6)];
    let secondary = vec![vec![f(2, 5), f(3, 5)], vec![f(4, 5), f(5, 5)]];
    Plant::new(primary, secondary, 8000.0).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fir_is_linear(h in taps(24), x in taps(80), y in taps(80), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let n = x.len().min(y.len());
        let (x, y) = (&x[..n], &y[..n]);
        let mix: Vec<f64> = x.iter().zip(y).map(|(p, q)| a * p + b * q).collect();
        let f = FirFilter::new(h).unwrap();
        let fx = f.clone().process(x);
        let fy = f.clone().process(y);
        let fm = f.clone().process(&mix);
        let want: Vec<f64> = fx.iter().zip(&fy).map(|(p, q)| a * p + b * q).collect();
        prop_assert!(close(&fm, &want, 1e-10));
    }

    #[test]
    fn chunked_streaming_is_identical(h in taps(24), x in taps(120), cut in 0usize..120) {
        let cut = cut.min(x.len());
        let mut whole = FirFilter::new(h.clone()).unwrap();
        let mut parts = FirFilter::new(h).unwrap();
        let a = whole.process(&x);
        let mut b = parts.process(&x[..cut]);
        b.extend(parts.process(&x[cut..]));
        prop_assert_eq!(a, b);
    }

    #[test]
    fn streaming_matches_batch_convolution(h in taps(24), x in taps(120)) {
        let y = FirFilter::new(h.clone()).unwrap().process(&x);
        let full = convolve(&h, &x).unwrap();
        prop_assert!(close(&y, &full[..x.len()], 1e-10));
    }

    #[test]
    fn convolution_commutes_and_associates(a in taps(16), b in taps(16), c in taps(16)) {
        prop_assert!(close(&convolve(&a, &b).unwrap(), &convolve(&b, &a).unwrap(), 1e-12));
        let left = convolve(&convolve(&a, &b).unwrap(), &c).unwrap();
        let right = convolve(&a, &convolve(&b, &c).unwrap()).unwrap();
        prop_assert!(close(&left, &right, 1e-10));
    }

    #[test]
    fn plant_superposes(seed in prop::collection::vec(-1.0f64..1.0, 8..16), x in taps(60), y1 in taps(60), y2 in taps(60)) {
        let n = x.len().min(y1.len()).min(y2.len());
        let run = |ys: &dyn Fn(usize) -> [f64; 2], xs: &dyn Fn(usize) -> f64| {
            let mut p = small_plant(seed.clone());
            (0..n).map(|i| p.step(xs(i), &ys(i)).unwrap().e).collect::<Vec<_>>()
        };
        let both = run(&|i| [y1[i], y2[i]], &|i| x[i]);
        let only_x = run(&|_| [0.0, 0.0], &|i| x[i]);
        let only_y = run(&|i| [y1[i], y2[i]], &|_| 0.0);
        for i in 0..n {
            for k in 0..2 {
                prop_assert!((both[i][k] - (only_x[i][k] + only_y[i][k])).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn global_filter_is_linear_in_local_filters(
        psi in prop::collection::vec(-1.0f64..1.0, 8),
        peer in prop::collection::vec(-1.0f64..1.0, 8),
        c in prop::collection::vec(-1.0f64..1.0, 4),
        a in -2.0f64..2.0,
    ) {
        let mut set = CompensationSet::new(0, 4);
        set.insert(1, FirFilter::new(c).unwrap(), 0.0).unwrap();
        let w = global_filter(&psi, &[(1, &peer)], &set).unwrap();
        let psi_a: Vec<f64> = psi.iter().map(|v| a * v).collect();
        let peer_a: Vec<f64> = peer.iter().map(|v| a * v).collect();
        let wa = global_filter(&psi_a, &[(1, &peer_a)], &set).unwrap();
        let want: Vec<f64> = w.iter().map(|v| a * v).collect();
        prop_assert!(close(&wa, &want, 1e-12));
        prop_assert_eq!(w.len(), 8 + 4 - 1);
    }

    #[test]
    fn delay_stamps_have_no_jitter(p in 0usize..40, samples in 1u64..150) {
        let mut bus = CoefficientBus::new(3, 2, CommPolicy::Delay(p), 8000.0, 64).unwrap();
        for n in 0..samples {
            for k in 0..3 {
                bus.publish(k, &[n as f64, 0.0], n).unwrap();
            }
            for r in 0..3 {
                for u in bus.snapshot(r, n) {
                    prop_assert_eq!(u.stamp, n.saturating_sub(p as u64));
                }
            }
        }
    }

    #[test]
    fn intermittent_copies_hold_between_events(rate in 10.0f64..4000.0, seed in 0u64..1000) {
        let policy = CommPolicy::Intermittent { rate, seed, schedule: Schedule::Bernoulli };
        let mut bus = CoefficientBus::for_policy(2, 1, policy, 8000.0).unwrap();
        let mut held = 0u64;
        let mut events = 0;
        for n in 0..400u64 {
            bus.publish(0, &[n as f64], n).unwrap();
            bus.publish(1, &[n as f64], n).unwrap();
            let before = bus.events(1);
            let u = bus.snapshot(1, n)[0];
            let (stamp, fresh) = (u.stamp, u.coeffs.is_some());
            if bus.events(1) == before {
                prop_assert_eq!(stamp, held);
                prop_assert!(!fresh);
            } else {
                events += 1;
                prop_assert_eq!(stamp, n);
                held = n;
            }
        }
        prop_assert_eq!(events, bus.events(1));
    }

    #[test]
    fn snapshots_are_deterministic(rate in 10.0f64..4000.0, seed in 0u64..1000) {
        let policy = CommPolicy::Intermittent { rate, seed, schedule: Schedule::Bernoulli };
        let stamps = || {
            let mut bus = CoefficientBus::for_policy(3, 1, policy, 8000.0).unwrap();
            let mut out = Vec::new();
            for n in 0..300u64 {
                for k in 0..3 {
                    bus.publish(k, &[0.0], n).unwrap();
                }
                for r in 0..3 {
                    out.extend(bus.snapshot(r, n).iter().map(|u| u.stamp));
                }
            }
            out
        };
        prop_assert_eq!(stamps(), stamps());
    }
}
