use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tpunet::align::{contrastive_loss, loss_i2t, loss_t2i, similarity_matrix, AlignmentBatch};
use tpunet::tensor::{Tape, Tensor};

fn rows(n: usize, d: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-2.0f64..2.0, n * d).prop_map(move |v| Tensor::new([n, d], v).unwrap())
}

fn loss_at(a: &Tensor, b: &Tensor, tau: f64, lambda: f64) -> f64 {
    let tape = Tape::new();
    let batch = AlignmentBatch::new(
        tape.constant(a.clone()),
        tape.constant(b.clone()),
        tau,
        lambda,
    )
    .unwrap();
    contrastive_loss(&batch).unwrap().item().unwrap()
}

proptest! {
    #[test]
    fn contrastive_loss_is_non_negative(a in rows(5, 4), b in rows(5, 4), lambda in 0.0f64..=1.0) {
        prop_assert!(loss_at(&a, &b, 0.1, lambda) >= 0.0);
    }

    #[test]
    fn symmetric_inputs_give_equal_directions(a in rows(4, 3)) {
        let tape = Tape::new();
        let v = tape.constant(a);
        let batch = AlignmentBatch::new(v, v, 0.1, 0.5).unwrap();
        let i2t = loss_i2t(&batch).unwrap().item().unwrap();
        let t2i = loss_t2i(&batch).unwrap().item().unwrap();
        let both = contrastive_loss(&batch).unwrap().item().unwrap();
        prop_assert!((i2t - t2i).abs() < 1e-12);
        prop_assert!((both - i2t).abs() < 1e-12);
    }

    #[test]
    fn lower_temperature_never_hurts_a_dominant_diagonal(
        noise in rows(4, 4),
        (t1, t2) in (0.05f64..1.0, 0.05f64..1.0),
    ) {
        // text rows are noisy copies of orthogonal image rows
        let image = Tensor::from_fn([4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
        let text = Tensor::from_fn([4, 4], |i| image.data()[i] + 0.1 * noise.data()[i]);
        let tape = Tape::new();
        let sim = similarity_matrix(tape.constant(image.clone()), tape.constant(text.clone())).unwrap().to_vec();
        let dominant = (0..4).all(|i| (0..4).all(|j| sim[i * 4 + i] >= sim[i * 4 + j] && sim[i * 4 + i] >= sim[j * 4 + i]));
        prop_assume!(dominant);
        let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        prop_assert!(loss_at(&image, &text, lo, 0.5) <= loss_at(&image, &text, hi, 0.5) + 1e-12);
    }
}

#[test]
fn perfect_separation_drives_loss_to_zero() {
    // matched cosine 1, mismatched cosine -1
    let a = Tensor::new([2, 2], vec![1.0, 0.0, -1.0, 0.0]).unwrap();
    assert!(loss_at(&a, &a, 0.1, 0.5) <= 1e-6);
}

#[test]
fn optimizing_alignment_separates_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (n, d) = (8, 6);
    let mut image: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut text: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let gap = |image: &[f64], text: &[f64]| {
        let tape = Tape::new();
        let a = tape.constant(Tensor::new([n, d], image.to_vec()).unwrap());
        let b = tape.constant(Tensor::new([n, d], text.to_vec()).unwrap());
        let s = similarity_matrix(a, b).unwrap().to_vec();
        let matched: f64 = (0..n).map(|i| s[i * n + i]).sum::<f64>() / n as f64;
        let off: f64 = (s.iter().sum::<f64>() - matched * n as f64) / (n * n - n) as f64;
        matched - off
    };
    for _ in 0..200 {
        let tape = Tape::new();
        let a = tape.leaf(&Tensor::new([n, d], image.clone()).unwrap().requiring_grad());
        let b = tape.leaf(&Tensor::new([n, d], text.clone()).unwrap().requiring_grad());
        let loss = contrastive_loss(&AlignmentBatch::new(a, b, 0.1, 0.5).unwrap()).unwrap();
        let g = tape.backward(loss).unwrap();
        for (p, gp) in image.iter_mut().zip(g.get(a).unwrap()) {
            *p -= 0.05 * gp;
        }
        for (p, gp) in text.iter_mut().zip(g.get(b).unwrap()) {
            *p -= 0.05 * gp;
        }
    }
    let after = gap(&image, &text);
    assert!(after >= 0.2, "matched minus mismatched cosine only {after}");
}
