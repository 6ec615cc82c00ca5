use cxnn::{Tape, Tensor};
use proptest::prelude::*;

fn scalar(t: &Tape<f64>, v: cxnn::Var) -> f64 {
    t.value(v).data()[0]
}

fn cross_entropy(scores: Vec<f64>, k: usize, labels: &[usize]) -> f64 {
    let mut tape = Tape::new();
    let s = tape.constant(Tensor::from_vec([labels.len(), k], scores).unwrap());
    let l = tape.cross_entropy(s, labels).unwrap();
    scalar(&tape, l)
}

fn dice(scores: Vec<f64>, mask: Vec<f64>) -> f64 {
    let n = scores.len();
    let mut tape = Tape::new();
    let s = tape.constant(Tensor::from_vec([1, 1, 1, n], scores).unwrap());
    let l = tape.dice_loss(s, &Tensor::from_vec([1, 1, 1, n], mask).unwrap()).unwrap();
    scalar(&tape, l)
}

#[test]
fn cross_entropy_examples() {
    assert!((cross_entropy(vec![0.0; 3], 3, &[1]) - 3f64.ln()).abs() < 1e-15);
    assert!((cross_entropy(vec![1.0, 2.0, 3.0], 3, &[2]) - 0.4076).abs() < 5e-5);
    assert!(cross_entropy(vec![0.0, 0.0, 1e3], 3, &[2]) < 1e-12);
    let mut tape = Tape::<f64>::new();
    let s = tape.constant(Tensor::zeros([1, 3]).unwrap());
    assert!(matches!(tape.cross_entropy(s, &[3]), Err(cxnn::Error::Contract(_))));
}

#[test]
fn dice_examples() {
    assert!((dice(vec![0.0; 4], vec![1.0, 1.0, 0.0, 0.0]) - 0.4).abs() < 1e-15);
    let g = vec![1.0, 0.0, 1.0, 0.0];
    let perfect: Vec<f64> = g.iter().map(|&v| if v > 0.5 { 60.0 } else { -60.0 }).collect();
    assert!(dice(perfect, g) < 1e-12);
    assert!(dice(vec![-60.0; 4], vec![0.0; 4]) < 1e-12);
}

proptest! {
    #[test]
    fn cross_entropy_is_nonnegative_and_ln_k_at_uniform(
        k in 2usize..6,
        rows in proptest::collection::vec((proptest::collection::vec(-20.0f64..20.0, 6), 0usize..6, -5.0f64..5.0), 1..5),
    ) {
        let labels: Vec<usize> = rows.iter().map(|r| r.1 % k).collect();
        let scores: Vec<f64> = rows.iter().flat_map(|r| r.0[..k].to_vec()).collect();
        prop_assert!(cross_entropy(scores, k, &labels) >= 0.0);
        let uniform: Vec<f64> = rows.iter().flat_map(|r| vec![r.2; k]).collect();
        let ln_k = (k as f64).ln();
        prop_assert!((cross_entropy(uniform, k, &labels) - ln_k).abs() <= 4.0 * f64::EPSILON * ln_k);
    }

    #[test]
    fn dice_loss_is_bounded_and_monotone(
        pixels in proptest::collection::vec((-6.0f64..6.0, any::<bool>()), 1..24),
        step in 0.01f64..2.0,
    ) {
        let scores: Vec<f64> = pixels.iter().map(|p| p.0).collect();
        let mask: Vec<f64> = pixels.iter().map(|p| p.1 as u8 as f64).collect();
        let before = dice(scores.clone(), mask.clone());
        prop_assert!((0.0..1.0).contains(&before));
        let closer: Vec<f64> = scores.iter().zip(&mask).map(|(&s, &g)| if g > 0.5 { s + step } else { s - step }).collect();
        prop_assert!(dice(closer, mask) <= before);
    }
}
