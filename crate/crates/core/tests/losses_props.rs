use locon::losses::*;
use locon::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_problem(seed: u64, n: usize, d: usize, h: usize, w: usize, c: u8) -> (Tensor<f64>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = Tensor::from_vec((0..n * d * h * w).map(|_| rng.random_range(-1.0..1.0)).collect(), n, d, h, w);
    let labels = (0..n * h * w).map(|_| rng.random_range(0..=c)).collect();
    (z, labels)
}

fn batch_value(z: &Tensor<f64>, labels: &[u8], c: usize, cfg: &ContrastiveConfig, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    contrastive_batch_loss(z, labels, c, cfg, &mut rng, false).unwrap().value
}

#[test]
fn batch_gradient_matches_finite_differences_in_every_mode() {
    for mode in [MatchMode::Intra, MatchMode::Inter, MatchMode::Pooled] {
        let (z, labels) = random_problem(11, 3, 4, 5, 5, 3);
        let cfg = ContrastiveConfig {
            mode,
            samples_per_class: 2,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = contrastive_batch_loss(&z, &labels, 3, &cfg, &mut rng, true).unwrap().grad.unwrap();
        let h = 1e-5;
        for k in 0..z.data.len() {
            let mut zp = z.clone();
            zp.data[k] += h;
            let mut zm = z.clone();
            zm.data[k] -= h;
            let fd = (batch_value(&zp, &labels, 3, &cfg, 5) - batch_value(&zm, &labels, 3, &cfg, 5)) / (2.0 * h);
            let err = (fd - g.data[k]).abs() / fd.abs().max(g.data[k].abs()).max(1e-6);
            assert!(err < 1e-4, "{mode:?} entry {k}: fd {fd} analytic {}", g.data[k]);
        }
    }
}

#[test]
fn intra_mode_never_couples_images() {
    let (z, labels) = random_problem(2, 4, 4, 6, 6, 2);
    let cfg = ContrastiveConfig {
        samples_per_class: 3,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let g = contrastive_batch_loss(&z, &labels, 2, &cfg, &mut rng, true).unwrap().grad.unwrap();
    let mut z2 = z.clone();
    z2.item_mut(2).iter_mut().for_each(|v| *v *= 3.0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let g2 = contrastive_batch_loss(&z2, &labels, 2, &cfg, &mut rng, true).unwrap().grad.unwrap();
    for i in [0, 1, 3] {
        assert_eq!(g.item(i), g2.item(i));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pixel_term_is_nonnegative(seed in 0u64..10_000, d in 2usize..6, c in 1u8..4) {
        let (z, labels) = random_problem(seed, 1, d, 6, 6, c);
        let zm = FeatureMap::from_tensor(&z, 0);
        let means = class_means(&zm, &labels, c as usize).unwrap();
        for p in 0..36 {
            let l = labels[p] as usize;
            if l == 0 { continue; }
            let v = contrastive_pixel_term(&zm.pixel(p), &means, l, 0.1).unwrap();
            prop_assert!(v >= 0.0);
        }
    }

    #[test]
    fn positive_scaling_leaves_batch_loss_unchanged(seed in 0u64..10_000, a in 0.01f64..100.0) {
        let (z, labels) = random_problem(seed, 3, 4, 6, 6, 3);
        let mut scaled = z.clone();
        scaled.data.iter_mut().for_each(|v| *v *= a);
        for mode in [MatchMode::Intra, MatchMode::Inter] {
            let cfg = ContrastiveConfig { mode, ..Default::default() };
            let x = batch_value(&z, &labels, 3, &cfg, seed);
            let y = batch_value(&scaled, &labels, 3, &cfg, seed);
            prop_assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn anchor_order_does_not_matter(seed in 0u64..10_000) {
        let (z, labels) = random_problem(seed, 1, 4, 8, 8, 2);
        let zm = FeatureMap::from_tensor(&z, 0);
        let means = class_means(&zm, &labels, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let anchors = sample_anchor_set(&labels, 8, 2, 5, &mut rng);
        let mut rev = anchors.clone();
        rev.per_class.iter_mut().for_each(|v| v.reverse());
        let a = contrastive_pair_loss(&zm, &anchors, &means, 0.1).unwrap();
        let b = contrastive_pair_loss(&zm, &rev, &means, 0.1).unwrap();
        prop_assert_eq!(a.value, b.value);
    }

    #[test]
    fn dice_loss_in_unit_interval(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p: Vec<f64> = (0..3 * 16).map(|_| rng.random_range(0.0..1.0)).collect();
        for px in 0..16 {
            let s: f64 = (0..3).map(|c| p[c * 16 + px]).sum();
            (0..3).for_each(|c| p[c * 16 + px] /= s);
        }
        let labels: Vec<u8> = (0..16).map(|_| rng.random_range(0..3)).collect();
        let l = dice_loss(&Tensor::from_vec(p, 1, 3, 4, 4), &labels).unwrap();
        prop_assert!((0.0..=1.0).contains(&l));
    }
}
