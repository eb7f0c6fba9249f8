//! Evaluation protocols on features with known structure.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slip_core::evaluation::{
    caption_overlap_metrics, linear_probe, macro_f1, nearest_prototype, recall_at_k, wilcoxon_signed_rank, ProbeConfig,
};
use slip_core::tensor::Matrix;

fn blobs(per_class: usize, classes: usize, dim: usize, spread: f64, seed: u64) -> (Matrix, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Matrix::randn(per_class * classes, dim, spread, &mut rng);
    let mut x = noise.clone();
    let mut y = Vec::new();
    for r in 0..x.rows() {
        let c = r % classes;
        x.row_mut(r)[c % dim] += 5.0;
        y.push(c);
    }
    (x, y)
}

fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|i| f(i / cols, i % cols)).collect())
}

#[test]
fn probe_separates_well_separated_clusters() {
    let (tx, ty) = blobs(40, 4, 8, 0.3, 1);
    let (vx, vy) = blobs(20, 4, 8, 0.3, 2);
    let r = linear_probe(&tx, &ty, &vx, &vy, &ProbeConfig::default()).unwrap();
    assert_eq!(r.top1_accuracy, 1.0);
    assert_eq!(r.macro_f1, 1.0);
    assert_eq!(r.epochs_run, 50);
    assert_eq!(r.steps_run, 50 * 160usize.div_ceil(32));
}

#[test]
fn probe_on_noise_stays_near_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let tx = Matrix::randn(400, 16, 1.0, &mut rng);
    let ty: Vec<usize> = (0..400).map(|_| rng.random_range(0..4)).collect();
    let vx = Matrix::randn(400, 16, 1.0, &mut rng);
    let vy: Vec<usize> = (0..400).map(|_| rng.random_range(0..4)).collect();
    let r = linear_probe(&tx, &ty, &vx, &vy, &ProbeConfig::default()).unwrap();
    assert!((0.17..=0.33).contains(&r.top1_accuracy), "{r:?}");
}

#[test]
fn probe_is_reproducible() {
    let (tx, ty) = blobs(10, 3, 5, 2.0, 4);
    let (vx, vy) = blobs(10, 3, 5, 2.0, 5);
    let a = linear_probe(&tx, &ty, &vx, &vy, &ProbeConfig::default()).unwrap();
    let b = linear_probe(&tx, &ty, &vx, &vy, &ProbeConfig::default()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn probe_rejects_single_class() {
    let (tx, _) = blobs(5, 1, 4, 1.0, 6);
    assert!(linear_probe(&tx, &[0; 5], &tx, &[0; 5], &ProbeConfig::default()).is_err());
}

#[test]
fn orthogonal_prototypes_pick_their_own_axis() {
    let protos = from_fn(4, 4, |r, c| if r == c { 1.0 } else { 0.0 });
    let feats = from_fn(8, 4, |r, c| if c == r % 4 { 2.0 } else { 0.1 * (c as f64) });
    assert_eq!(
        nearest_prototype(&feats, &protos).unwrap(),
        vec![0, 1, 2, 3, 0, 1, 2, 3]
    );
}

#[test]
fn recall_counts_ties_in_favour_of_the_partner() {
    let s = Matrix::from_vec(3, 2, vec![1.0, 0.0, 1.0, 1.0, 0.0, 1.0]);
    let t = from_fn(3, 2, |_, _| 1.0);
    // All texts tie for each sensor; sensors are separated for each text.
    let r = recall_at_k(&s, &t, 1).unwrap();
    assert_eq!(r.sensor_to_text, 1.0);
    assert_eq!(r.text_to_sensor, 1.0 / 3.0);
    assert!(recall_at_k(&s, &t, 4).is_err());
}

#[test]
fn caption_metrics_identical_and_disjoint() {
    let refs = vec!["rising trend with one spike".to_string(), "flat and noisy".to_string()];
    let same = caption_overlap_metrics(&refs, &refs).unwrap();
    assert!((same.bleu4 - 1.0).abs() < 1e-12 && (same.rouge_l - 1.0).abs() < 1e-12);
    let other = vec!["zzz qqq".to_string(), "xx".to_string()];
    let none = caption_overlap_metrics(&other, &refs).unwrap();
    assert_eq!((none.bleu4, none.rouge_l), (0.0, 0.0));
}

#[test]
fn macro_f1_ignores_absent_classes() {
    assert_eq!(macro_f1(&[0, 0, 1, 1], &[0, 0, 1, 1]), 1.0);
    let f = macro_f1(&[0, 0, 0, 0], &[0, 0, 1, 1]);
    assert!((f - (2.0 / 3.0) / 2.0).abs() < 1e-12, "{f}");
}

#[test]
fn wilcoxon_reports_exact_at_small_n_and_normal_beyond() {
    let a: Vec<f64> = (1..=10).map(|v| v as f64).collect();
    let b = vec![0.0; 10];
    let small = wilcoxon_signed_rank(&a, &b).unwrap();
    assert!(small.exact);
    assert!((small.p_value - 2.0 / 1024.0).abs() < 1e-15);
    let a: Vec<f64> = (1..=30)
        .map(|v| v as f64 * if v % 4 == 0 { -1.0 } else { 1.0 })
        .collect();
    let big = wilcoxon_signed_rank(&a, &[0.0; 30]).unwrap();
    assert!(!big.exact && big.p_value > 0.0 && big.p_value < 1.0);
    assert_eq!(big.w_plus + big.w_minus, 465.0);
}
