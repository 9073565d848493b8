use ndarray::{Array2, Array3};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use m2d::audio::{mix_noisy, standardize, unstandardize, DatasetStats, MelConfig, Spectrogram};
use m2d::networks::{
    ema_update, encode, encode_patches, predict, standardize_target, EncoderConfig, OnlineState, PredictorConfig,
    TargetState,
};
use m2d::patching::{make_positional_encoding, patchify, sample_mask, unpatchify, PatchGrid, TokenSequence};
use m2d::training::m2d_loss;
use m2d::transfer::{interpolate_pe, inverse_timeframe, reshape_timeframe};

fn spec_of(data: Array2<f64>) -> Spectrogram {
    let cfg = MelConfig {
        n_mels: data.nrows(),
        ..Default::default()
    };
    Spectrogram::new(data, cfg).unwrap()
}

fn matrix(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(lo..hi, rows * cols).prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

fn tiny_online(seed: u64) -> OnlineState {
    let enc = EncoderConfig {
        depth: 1,
        dim: 8,
        heads: 2,
        mlp_ratio: 2.0,
        patch_f: 2,
        patch_t: 2,
    };
    let pred = PredictorConfig {
        depth: 1,
        dim: Some(4),
        heads: 2,
        mlp_ratio: 2.0,
    };
    OnlineState::init(enc, pred, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mix_stays_between_inputs(a in matrix(4, 6, -20.0, 5.0), b in matrix(4, 6, -20.0, 5.0), eta in 0.0f64..=1.0) {
        let out = mix_noisy(&spec_of(a.clone()), &spec_of(b.clone()), eta).unwrap();
        for ((o, x), y) in out.data.iter().zip(a.iter()).zip(b.iter()) {
            prop_assert!(*o >= x.min(*y) - 1e-9 && *o <= x.max(*y) + 1e-9);
        }
    }

    #[test]
    fn mix_monotone_when_background_louder(a in matrix(3, 5, -10.0, 0.0), gap in matrix(3, 5, 0.0, 8.0), e1 in 0.0f64..1.0, e2 in 0.0f64..1.0) {
        let b = &a + &gap;
        let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
        let m1 = mix_noisy(&spec_of(a.clone()), &spec_of(b.clone()), lo).unwrap();
        let m2 = mix_noisy(&spec_of(a), &spec_of(b), hi).unwrap();
        for (x, y) in m1.data.iter().zip(m2.data.iter()) {
            prop_assert!(y >= &(x - 1e-12));
        }
    }

    #[test]
    fn standardize_round_trip(a in matrix(3, 4, -50.0, 50.0), mean in -10.0f64..10.0, std in 0.1f64..10.0) {
        let stats = DatasetStats::new(mean, std).unwrap();
        let s = spec_of(a.clone());
        let back = unstandardize(&standardize(&s, &stats), &stats);
        for (x, y) in back.data.iter().zip(a.iter()) {
            prop_assert!((x - y).abs() <= 1e-6 * y.abs().max(1.0));
        }
    }

    #[test]
    fn mask_is_a_partition(n in 2usize..400, ratio in 0.05f64..0.95, seed in any::<u64>()) {
        let r = sample_mask(n, ratio, &mut ChaCha8Rng::seed_from_u64(seed));
        // a ratio that leaves one side empty is a config error, not a bad plan
        if let Ok(p) = r {
            prop_assert!(p.check(n).is_ok());
            prop_assert_eq!(p.visible.len(), (n as f64 * (1.0 - ratio) + 1e-9).floor() as usize);
            let mut all: Vec<usize> = p.visible.iter().chain(&p.masked).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn patchify_inverts(nf in 1usize..4, nt in 1usize..5, pf in 1usize..4, pt in 1usize..4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Array2::from_shape_fn((nf * pf, nt * pt), |_| rand::Rng::random::<f64>(&mut rng));
        let (grid, patches) = patchify(&spec_of(data.clone()), pf, pt).unwrap();
        prop_assert_eq!(unpatchify(&patches, &grid).unwrap(), data);
    }

    #[test]
    fn ema_contracts(tau in 0.0f64..1.0, k in 1i32..30, s1 in any::<u64>(), s2 in any::<u64>()) {
        let online = tiny_online(s1);
        let mut target = TargetState::from_online(&tiny_online(s2));
        let theta = online.encoder_params();
        let dist = |x: &TargetState| x.params.iter().map(|(n, m)| (m - theta.expect(n)).mapv(|v| v * v).sum()).sum::<f64>().sqrt();
        let d0 = dist(&target);
        for _ in 0..k {
            ema_update(&mut target, &online, tau).unwrap();
        }
        let expect = d0 * tau.powi(k);
        prop_assert!((dist(&target) - expect).abs() <= 1e-6 * d0);
    }

    #[test]
    fn standardize_target_idempotent(a in matrix(5, 8, -100.0, 100.0)) {
        let z = TokenSequence::new(a, (0..5).collect()).unwrap();
        let once = standardize_target(&z);
        let twice = standardize_target(&once);
        for (x, y) in once.tokens.iter().zip(twice.tokens.iter()) {
            prop_assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn loss_is_bounded(a in matrix(4, 6, -5.0, 5.0), b in matrix(4, 6, -5.0, 5.0)) {
        let l = m2d_loss(&TokenSequence::new(a, (0..4).collect()).unwrap(), &TokenSequence::new(b, (0..4).collect()).unwrap()).unwrap();
        prop_assert!((0.0..=4.0).contains(&l));
    }

    #[test]
    fn reshape_is_an_energy_preserving_bijection(nf in 1usize..6, nt in 1usize..12, d in 1usize..9, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = PatchGrid::for_shape(nf, nt, 1, 1).unwrap();
        let z = Array3::from_shape_fn((2, nf * nt, d), |_| rand::Rng::random_range(&mut rng, -1.0..1.0));
        let f = reshape_timeframe(&z, &grid, 1.0).unwrap();
        let energy = |x: &Array3<f64>| x.iter().map(|v| v * v).sum::<f64>();
        prop_assert!((energy(&f.data) - energy(&z)).abs() <= 1e-12 * energy(&z).max(1.0));
        prop_assert_eq!(inverse_timeframe(&f, &grid).unwrap(), z);
    }

    #[test]
    fn pe_interpolation_is_convex(nf in 1usize..4, nt in 2usize..20, new_nt in 1usize..40) {
        let grid = PatchGrid::for_shape(nf, nt, 1, 1).unwrap();
        let pe = make_positional_encoding(&grid, 8).unwrap();
        let out = interpolate_pe(&pe, &grid, new_nt).unwrap();
        prop_assert_eq!(out.nrows(), nf * new_nt);
        for j in 0..8 {
            let col = pe.column(j);
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(out.column(j).iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn encode_is_permutation_equivariant(seed in any::<u64>(), perm_seed in any::<u64>()) {
        let online = tiny_online(seed);
        let grid = PatchGrid::for_shape(4, 10, 2, 2).unwrap();
        let pe = make_positional_encoding(&grid, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let positions = vec![0, 3, 4, 7, 9];
        let tokens = Array2::from_shape_fn((5, 8), |_| rand::Rng::random_range(&mut rng, -1.0..1.0));
        let base = encode(&online, &TokenSequence::new(tokens.clone(), positions.clone()).unwrap(), &pe).unwrap();
        let mut order: Vec<usize> = (0..5).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut ChaCha8Rng::seed_from_u64(perm_seed));
        let permuted = TokenSequence::new(tokens.select(ndarray::Axis(0), &order), order.iter().map(|&i| positions[i]).collect()).unwrap();
        let out = encode(&online, &permuted, &pe).unwrap();
        for (r, &src) in order.iter().enumerate() {
            for (x, y) in out.tokens.row(r).iter().zip(base.tokens.row(src).iter()) {
                prop_assert!((x - y).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn prediction_ignores_masked_content(seed in any::<u64>(), noise in matrix(10, 4, -5.0, 5.0)) {
        let online = tiny_online(seed);
        let grid = PatchGrid::for_shape(4, 10, 2, 2).unwrap();
        let pe = make_positional_encoding(&grid, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let patches = Array2::from_shape_fn((10, 4), |_| rand::Rng::random_range(&mut rng, -1.0..1.0));
        let plan = sample_mask(10, 0.6, &mut rng).unwrap();
        let run = |p: &Array2<f64>| {
            let z_v = encode_patches(&online, p, &plan.visible, &pe, usize::MAX).unwrap();
            predict(&online, &z_v, &plan, &pe).unwrap()
        };
        let mut edited = patches.clone();
        for &m in &plan.masked {
            edited.row_mut(m).assign(&noise.row(m));
        }
        prop_assert_eq!(run(&patches), run(&edited));
    }
}

#[test]
fn mask_draws_are_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut hits = [0usize; 10];
    let draws = 10_000;
    for _ in 0..draws {
        for &m in &sample_mask(10, 0.5, &mut rng).unwrap().masked {
            hits[m] += 1;
        }
    }
    for h in hits {
        let f = h as f64 / draws as f64;
        assert!((f - 0.5).abs() < 0.02, "frequency {f}");
    }
}

#[test]
fn logmel_is_deterministic() {
    let w: Vec<f64> = (0..16000).map(|i| ((i * 7919) % 1000) as f64 / 1000.0 - 0.5).collect();
    let a = m2d::audio::compute_logmel(&w, &MelConfig::default()).unwrap();
    let b = m2d::audio::compute_logmel(&w, &MelConfig::default()).unwrap();
    assert!(a.data.iter().zip(b.data.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
}
