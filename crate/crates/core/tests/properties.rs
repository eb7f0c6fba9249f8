//! Property tests against naive oracles for the pure numeric operations.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use slip_core::diagnostics::{alignment, uniformity};
use slip_core::evaluation::{nearest_prototype, recall_at_k, wilcoxon_signed_rank};
use slip_core::objectives::contrastive_loss;
use slip_core::rope::rope2d_rotate;
use slip_core::tensor::Matrix;

fn unit_rows(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Matrix::randn(rows, cols, 1.0, &mut rng);
    for r in 0..rows {
        let n = m.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        m.row_mut(r).iter_mut().for_each(|v| *v /= n);
    }
    m
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Two directional mean NLLs written out with explicit sums of exponentials.
fn contrastive_oracle(x: &Matrix, y: &Matrix, sigma: f64) -> f64 {
    let n = x.rows();
    let mut s2t = 0.0;
    let mut t2s = 0.0;
    for i in 0..n {
        let zi: f64 = (0..n).map(|j| (dot(x.row(i), y.row(j)) / sigma).exp()).sum();
        s2t -= ((dot(x.row(i), y.row(i)) / sigma).exp() / zi).ln();
        let zt: f64 = (0..n).map(|j| (dot(x.row(j), y.row(i)) / sigma).exp()).sum();
        t2s -= ((dot(x.row(i), y.row(i)) / sigma).exp() / zt).ln();
    }
    s2t / n as f64 + t2s / n as f64
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn uniformity_oracle(z: &Matrix, t: f64) -> f64 {
    let n = z.rows();
    let mut total = 0.0;
    let mut count = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i < j {
                total += (-t * sq(z.row(i), z.row(j))).exp();
                count += 1.0;
            }
        }
    }
    (total / count).ln()
}

fn alignment_oracle(x: &Matrix, y: &Matrix, alpha: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..x.rows() {
        total += sq(x.row(i), y.row(i)).sqrt().powf(alpha);
    }
    total / x.rows() as f64
}

/// Mid-rank of every |d| by counting, then all 2^n sign patterns.
fn wilcoxon_oracle(d: &[f64]) -> f64 {
    let n = d.len();
    let rank2: Vec<u64> = d
        .iter()
        .map(|a| {
            let less = d.iter().filter(|b| b.abs() < a.abs()).count() as u64;
            let equal = d.iter().filter(|b| b.abs() == a.abs()).count() as u64;
            2 * less + equal + 1
        })
        .collect();
    let observed: u64 = d.iter().zip(&rank2).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let (mut lo, mut hi) = (0u64, 0u64);
    for mask in 0u64..(1 << n) {
        let w: u64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| rank2[i]).sum();
        if w <= observed {
            lo += 1;
        }
        if w >= observed {
            hi += 1;
        }
    }
    (2.0 * lo.min(hi) as f64 / (1u64 << n) as f64).min(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn contrastive_matches_oracle_and_is_permutation_invariant(
        n in 1usize..12, d in 2usize..9, seed in any::<u64>(), sigma in 0.05f64..2.0, rot in 0usize..12,
    ) {
        let x = unit_rows(n, d, seed);
        let y = unit_rows(n, d, seed ^ 0xABCD);
        let l = contrastive_loss(&x, &y, sigma).unwrap();
        prop_assert!(l >= 0.0);
        prop_assert!((l - contrastive_oracle(&x, &y, sigma)).abs() <= 1e-9 * l.max(1.0));
        let perm: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
        let lp = contrastive_loss(&x.select_rows(&perm), &y.select_rows(&perm), sigma).unwrap();
        prop_assert!((l - lp).abs() <= 1e-9 * l.max(1.0));
    }

    #[test]
    fn geometry_matches_double_loop(n in 2usize..65, d in 2usize..17, seed in any::<u64>(), t in 0.1f64..4.0, alpha in 0.5f64..3.0) {
        let x = unit_rows(n, d, seed);
        let y = unit_rows(n, d, seed.wrapping_add(1));
        let u = uniformity(&x, t).unwrap();
        prop_assert!((u - uniformity_oracle(&x, t)).abs() <= 1e-8);
        prop_assert!(u <= 0.0);
        prop_assert!((alignment(&x, &y, alpha).unwrap() - alignment_oracle(&x, &y, alpha)).abs() <= 1e-8);
        prop_assert_eq!(alignment(&x, &x, alpha).unwrap(), 0.0);
        let rev: Vec<usize> = (0..n).rev().collect();
        prop_assert!((uniformity(&x.select_rows(&rev), t).unwrap() - u).abs() <= 1e-12);
    }

    #[test]
    fn rope_scores_depend_only_on_offsets(
        tokens in 2usize..10, heads in 1usize..4, quarter in 1usize..4, seed in any::<u64>(),
        dt in -50i64..50, dc in -20i64..20,
    ) {
        let dim = heads * quarter * 4;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = Matrix::randn(tokens, dim, 1.0, &mut rng);
        let k = Matrix::randn(tokens, dim, 1.0, &mut rng);
        let coords: Vec<(i64, i64)> = (0..tokens as i64).map(|i| (i % 3, i / 3 + 2 * i)).collect();
        let shifted: Vec<(i64, i64)> = coords.iter().map(|&(c, t)| (c + dc, t + dt)).collect();
        let scores = |co: &[(i64, i64)]| {
            let qr = rope2d_rotate(&q, co, heads, 10_000.0).unwrap();
            let kr = rope2d_rotate(&k, co, heads, 10_000.0).unwrap();
            let hd = dim / heads;
            let mut s = Vec::new();
            for h in 0..heads {
                for i in 0..tokens {
                    for j in 0..tokens {
                        s.push(dot(&qr.row(i)[h * hd..(h + 1) * hd], &kr.row(j)[h * hd..(h + 1) * hd]));
                    }
                }
            }
            s
        };
        for (a, b) in scores(&coords).iter().zip(scores(&shifted)) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn wilcoxon_exact_matches_enumeration(raw in prop::collection::vec(-6i32..7, 1..13)) {
        let a: Vec<f64> = raw.iter().map(|&v| v as f64 * 0.5).collect();
        let b = vec![0.0; a.len()];
        let d: Vec<f64> = a.iter().copied().filter(|v| *v != 0.0).collect();
        prop_assume!(!d.is_empty());
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        prop_assert!(r.exact);
        prop_assert_eq!(r.p_value.to_bits(), wilcoxon_oracle(&d).to_bits());
        let swapped = wilcoxon_signed_rank(&b, &a).unwrap();
        prop_assert_eq!(swapped.p_value, r.p_value);
    }

    #[test]
    fn recall_is_monotone_in_k(n in 2usize..30, seed in any::<u64>()) {
        let s = unit_rows(n, 6, seed);
        let t = unit_rows(n, 6, seed ^ 7);
        let mut prev = 0.0;
        for k in 1..=n {
            let r = recall_at_k(&s, &t, k).unwrap();
            prop_assert!(r.sensor_to_text >= prev);
            prev = r.sensor_to_text;
        }
        prop_assert_eq!(prev, 1.0);
    }

    #[test]
    fn prototype_choice_ignores_positive_scaling(n in 1usize..20, k in 2usize..6, seed in any::<u64>(), scale in 1e-3f64..1e3) {
        let f = unit_rows(n, 5, seed);
        let p = unit_rows(k, 5, seed ^ 99);
        let mut scaled = f.clone();
        scaled.scale_assign(scale);
        prop_assert_eq!(nearest_prototype(&f, &p).unwrap(), nearest_prototype(&scaled, &p).unwrap());
    }
}

#[test]
fn random_features_recall_near_one_over_n() {
    let s = unit_rows(100, 16, 1);
    let t = unit_rows(100, 16, 2);
    let r = recall_at_k(&s, &t, 1).unwrap();
    assert!(r.sensor_to_text <= 0.05, "{r:?}");
    let same = recall_at_k(&s, &s, 1).unwrap();
    assert_eq!(same.sensor_to_text, 1.0);
}

#[test]
fn wilcoxon_normal_path_tracks_exact_at_n20() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let a = Matrix::randn(1, 20, 1.0, &mut rng);
        let b = Matrix::randn(1, 20, 1.0, &mut rng);
        let shift: Vec<f64> = a.data().iter().map(|v| v + 0.3).collect();
        let exact = wilcoxon_signed_rank(&shift, b.data()).unwrap();
        let approx = slip_core::evaluation::wilcoxon_normal_p(&shift, b.data()).unwrap();
        worst = worst.max((exact.p_value - approx).abs());
    }
    assert!(worst <= 0.02, "max |exact - normal| = {worst}");
}
