use approx::assert_abs_diff_eq;
use proptest::prelude::*;

use vaem::autodiff::kernels::softmax_in_place;
use vaem::autodiff::{AdamState, Init, ParamSet, Tensor};
use vaem::baselines::solve_balance_weights;
use vaem::data::{drop_half, ColumnSpec, MissingnessSampler};
use vaem::dependency::{mixture_log_prob, DependencyConfig, DependencyVae, Element, HGaussian};
use vaem::eval::{average_ranks, tied_ranks};
use vaem::gaussian::{kl_diag, log_normal_diag};
use vaem::likelihood::{ordinal_masses, LikelihoodHead};
use vaem::rng;
use vaem::saia::auic_values;

fn finite(lo: f64, hi: f64) -> impl Strategy<Value = f64> {
    lo..hi
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn softmax_rows_normalize(row in prop::collection::vec(finite(-40.0, 40.0), 1..12)) {
        let mut r = row.clone();
        softmax_in_place(&mut r);
        prop_assert!(r.iter().all(|&p| p >= 0.0));
        prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn categorical_mass_sums_to_one(logits in prop::collection::vec(finite(-20.0, 20.0), 2..9)) {
        let head = LikelihoodHead::Categorical { classes: logits.len() };
        let total: f64 = (0..logits.len()).map(|k| head.log_prob(&logits, k as f64).unwrap().exp()).sum();
        prop_assert!((total - 1.0).abs() < 1e-10);
    }

    #[test]
    fn ordinal_masses_are_a_distribution(out in prop::collection::vec(finite(-15.0, 15.0), 2..8)) {
        let masses = ordinal_masses(&out, out.len());
        prop_assert_eq!(masses.len(), out.len());
        prop_assert!(masses.iter().all(|&m| m >= 0.0));
        prop_assert!((masses.iter().sum::<f64>() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn gaussian_log_prob_peaks_at_mean(mean in finite(-2.0, 2.0), eps in 1e-4f64..0.1) {
        let head = LikelihoodHead::Gaussian { variance: 4e-4 };
        let at = head.log_prob(&[mean], mean).unwrap();
        prop_assert!(at > head.log_prob(&[mean], mean + eps).unwrap());
        prop_assert!(at > head.log_prob(&[mean], mean - eps).unwrap());
    }

    #[test]
    fn continuous_normalization_round_trips(min in -1e3f64..1e3, span in 1e-3f64..1e4, t in 0.0f64..=1.0) {
        let spec = ColumnSpec::continuous("c", min, min + span);
        let raw = spec.denormalize(t);
        let back = spec.normalize(raw).unwrap();
        prop_assert!((back - t).abs() <= 4.0 * f64::EPSILON * (1.0 + min.abs() / span));
        let again = spec.denormalize(back);
        prop_assert!((again - raw).abs() <= 4.0 * f64::EPSILON * (min.abs() + span));
    }

    #[test]
    fn emitted_masks_are_subsets(base in prop::collection::vec(any::<bool>(), 0..200), seed in any::<u64>(), epoch in 0u64..50) {
        let half = drop_half(&base, seed);
        let epoch_mask = MissingnessSampler::new(seed).sample_epoch_mask(&base, epoch);
        for i in 0..base.len() {
            prop_assert!(!half[i] || base[i]);
            prop_assert!(!epoch_mask[i] || base[i]);
        }
        let kept = half.iter().filter(|&&b| b).count();
        let observed = base.iter().filter(|&&b| b).count();
        prop_assert_eq!(kept, observed - observed / 2);
    }

    #[test]
    fn kl_of_a_gaussian_with_itself_is_zero(m in prop::collection::vec(finite(-5.0, 5.0), 1..6), lv in finite(-3.0, 3.0)) {
        let lvs = vec![lv; m.len()];
        prop_assert_eq!(kl_diag(&m, &lvs, &m, &lvs), 0.0);
    }

    #[test]
    fn kl_is_non_negative(m1 in finite(-3.0, 3.0), m2 in finite(-3.0, 3.0), l1 in finite(-3.0, 3.0), l2 in finite(-3.0, 3.0)) {
        prop_assert!(kl_diag(&[m1], &[l1], &[m2], &[l2]) >= -1e-15);
    }

    #[test]
    fn auic_strictly_decreases_when_a_point_decreases(
        values in prop::collection::vec(finite(0.0, 10.0), 2..12),
        idx in any::<prop::sample::Index>(),
        delta in 1e-6f64..1.0,
    ) {
        let i = idx.index(values.len());
        let mut lower = values.clone();
        lower[i] -= delta;
        prop_assert!(auic_values(&lower).unwrap() < auic_values(&values).unwrap());
    }

    #[test]
    fn tied_ranks_sum_to_the_triangle_number(values in prop::collection::vec(0u8..5, 1..15)) {
        let v: Vec<f64> = values.iter().map(|&x| x as f64).collect();
        let n = v.len() as f64;
        prop_assert!((tied_ranks(&v).iter().sum::<f64>() - n * (n + 1.0) / 2.0).abs() < 1e-9);
    }

    #[test]
    fn balance_weights_make_weighted_losses_equal(sums in prop::collection::vec(-500.0f64..-0.1, 1..5)) {
        let w = solve_balance_weights(&sums, None);
        prop_assert!(!w.fallback);
        prop_assert!((w.betas.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let first = w.betas[0] * sums[0];
        for (b, s) in w.betas.iter().zip(&sums) {
            prop_assert!((b * s - first).abs() < 1e-9 * first.abs());
        }
    }

    #[test]
    fn vampprior_density_lies_between_component_extremes(h in prop::collection::vec(finite(-3.0, 3.0), 3), seed in any::<u64>()) {
        let mut r = rng::seeded(seed);
        let k = 5;
        let means = Tensor::matrix(k, 3, vaem::gaussian::std_normals(&mut r, k * 3)).unwrap();
        let logvars = Tensor::matrix(k, 3, vaem::gaussian::std_normals(&mut r, k * 3)).unwrap();
        let comps = HGaussian { means, logvars };
        let logs: Vec<f64> = (0..k).map(|j| log_normal_diag(&h, comps.mean(j), comps.logvar(j))).collect();
        let lp = mixture_log_prob(&h, &comps);
        let lo = logs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(lp >= lo - 1e-9 && lp <= hi + 1e-9);
        prop_assert!(lp >= hi - (k as f64).ln() - 1e-9);
    }
}

fn small_dependency(seed: u64) -> DependencyVae {
    let config = DependencyConfig {
        latent: 4,
        embed: 4,
        features: 12,
        head_hidden: vec![16],
        decoder_hidden: vec![8],
        k_prior: 4,
        ..DependencyConfig::default()
    };
    DependencyVae::new(&[1, 3, 1, 2], config, Init::Glorot, &mut rng::seeded(seed))
}

fn element_strategy() -> impl Strategy<Value = Element> {
    prop_oneof![
        (0.0f64..1.0).prop_map(|v| Element::X { feature: 0, value: v }),
        (0usize..3).prop_map(|k| Element::X { feature: 1, value: k as f64 }),
        (0.0f64..1.0).prop_map(|v| Element::X { feature: 2, value: v }),
        (0usize..2).prop_map(|k| Element::X { feature: 3, value: k as f64 }),
        (0usize..4, -3.0f64..3.0).prop_map(|(f, v)| Element::Z { feature: f, value: v }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn partial_encoding_ignores_element_order(
        elements in prop::collection::vec(element_strategy(), 0..10),
        perm_seed in any::<u64>(),
        seed in 0u64..4,
    ) {
        use rand::seq::SliceRandom;
        let dep = small_dependency(seed);
        let (m1, v1) = dep.partial_encode(&elements).unwrap();
        let mut shuffled = elements.clone();
        shuffled.shuffle(&mut rng::seeded(perm_seed));
        let (m2, v2) = dep.partial_encode(&shuffled).unwrap();
        for i in 0..m1.len() {
            prop_assert!((m1[i] - m2[i]).abs() <= 1e-9);
            prop_assert!((v1[i] - v2[i]).abs() <= 1e-9);
        }
    }

    #[test]
    fn adam_is_permutation_equivariant(
        a in prop::collection::vec(finite(-2.0, 2.0), 4),
        b in prop::collection::vec(finite(-2.0, 2.0), 3),
        ga in prop::collection::vec(finite(-1.0, 1.0), 4),
        gb in prop::collection::vec(finite(-1.0, 1.0), 3),
    ) {
        let run = |swap: bool| {
            let mut p = ParamSet::new();
            let (ia, ib) = if swap {
                let ib = p.add("b", Tensor::row(b.clone()));
                (p.add("a", Tensor::row(a.clone())), ib)
            } else {
                let ia = p.add("a", Tensor::row(a.clone()));
                (ia, p.add("b", Tensor::row(b.clone())))
            };
            let mut adam = AdamState::with_lr(&p, 0.01);
            for _ in 0..3 {
                p.accumulate(ia, &ga);
                p.accumulate(ib, &gb);
                adam.step(&mut p).unwrap();
            }
            (p.value(ia).clone(), p.value(ib).clone())
        };
        prop_assert_eq!(run(false), run(true));
    }
}

#[test]
fn kl_closed_form_fixture() {
    assert_abs_diff_eq!(kl_diag(&[1.0], &[0.0], &[0.0], &[0.0]), 0.5, epsilon = 1e-15);
    assert_abs_diff_eq!(kl_diag(&[1.0; 3], &[0.0; 3], &[0.0; 3], &[0.0; 3]), 1.5, epsilon = 1e-15);
}

#[test]
fn balance_weights_fall_back_on_mixed_signs() {
    let previous = [0.3, 0.7];
    let w = solve_balance_weights(&[-3.0, 2.0], Some(&previous));
    assert!(w.fallback);
    assert_eq!(w.betas, previous);
    let w = solve_balance_weights(&[-3.0, 2.0], None);
    assert_eq!(w.betas, vec![0.5, 0.5]);
}

#[test]
fn average_rank_reproduces_the_published_row() {
    // VAEM, VAE, VAE-balanced, VAE-extended, VAE-HI on Bank, Boston, Avocado, Energy, MIMIC.
    let table = vec![
        vec![-1.15, 2.09, 0.72, 2.06, -0.72],
        vec![-2.16, -1.69, 0.38, -1.61, 2.11],
        vec![-0.16, 0.04, 1.32, 0.04, 0.04],
        vec![-1.28, -1.47, 0.69, -1.46, 0.16],
        vec![-1.01, 0.08, 0.69, 0.08, 0.08],
    ];
    let ranks = average_ranks(&table).unwrap();
    assert_abs_diff_eq!(ranks[0].mean, 1.40, epsilon = 1e-12);
    assert_abs_diff_eq!(ranks[0].stderr.unwrap(), 0.4, epsilon = 1e-12);
    assert_eq!(tied_ranks(&[0.04, 0.04, 1.32, 0.04]), vec![2.0, 2.0, 4.0, 2.0]);
}

#[test]
fn auic_trapezoid_fixture() {
    assert_abs_diff_eq!(auic_values(&[1.0, 0.5, 0.0]).unwrap(), 1.0, epsilon = 1e-15);
    assert_abs_diff_eq!(auic_values(&[2.0, 2.0]).unwrap(), 2.0, epsilon = 1e-15);
    assert!(auic_values(&[1.0]).is_err());
}
