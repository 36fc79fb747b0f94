use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tpunet::fusion::{flatten, to_spatial, unflatten, FusionParams};
use tpunet::params::ParamStore;
use tpunet::tensor::{Tape, Tensor};

fn setup(seed: u64) -> (ParamStore, FusionParams) {
    let mut store = ParamStore::new();
    let f = FusionParams::new(&mut store, &mut ChaCha8Rng::seed_from_u64(seed), 6, 5, 4);
    (store, f)
}

fn data(shape: &[usize], seed: u64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |i| {
        ((i as u64 + 1).wrapping_mul(seed | 1).wrapping_mul(2654435761) % 1000) as f64 / 250.0 - 2.0
    })
}

proptest! {
    #[test]
    fn permuting_text_tokens_keeps_image_outputs(seed in 0u64..500, perm in Just(vec![2usize, 0, 1]).prop_shuffle()) {
        let (store, f) = setup(seed);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let image = tape.constant(data(&[1, 4, 4], seed));
        let text = data(&[1, 3, 4], seed + 1);
        let permuted = Tensor::from_fn([1, 3, 4], |i| text.data()[perm[i / 4] * 4 + i % 4]);
        let a = f.cross_attention(&p, image, tape.constant(text), None).unwrap().output;
        let b = f.cross_attention(&p, image, tape.constant(permuted), None).unwrap().output;
        let (a, b) = (a.narrow(1, 0, 4).unwrap().to_vec(), b.narrow(1, 0, 4).unwrap().to_vec());
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_are_distributions(seed in 0u64..500) {
        let (store, f) = setup(seed);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let (im, tx) = f
            .project(&p, tape.constant(data(&[2, 6, 2, 3], seed)), tape.constant(data(&[2, 4, 5], seed + 7)))
            .unwrap();
        let w = f.cross_attention(&p, im, tx, None).unwrap().weights.to_vec();
        for row in w.chunks(10) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn flatten_round_trips(seed in any::<u64>(), (h, w) in (1usize..5, 1usize..5)) {
        let tape = Tape::new();
        let x = tape.constant(data(&[2, 3, h, w], seed));
        let tokens = flatten(x).unwrap();
        prop_assert_eq!(unflatten(tokens, h, w).unwrap().to_vec(), x.to_vec());
        prop_assert_eq!(to_spatial(tokens, h, w).unwrap().to_vec(), x.to_vec());
    }
}

#[test]
fn text_participates_in_image_outputs() {
    let (store, f) = setup(3);
    let tape = Tape::new();
    let p = store.bind(&tape);
    let image = tape.constant(data(&[1, 4, 4], 11));
    let text = tape.constant(data(&[1, 3, 4], 12));
    let silent = tape.constant(Tensor::zeros([1, 3, 4]));
    let with = f
        .cross_attention(&p, image, text, None)
        .unwrap()
        .output
        .narrow(1, 0, 4)
        .unwrap()
        .to_vec();
    let without = f
        .cross_attention(&p, image, silent, None)
        .unwrap()
        .output
        .narrow(1, 0, 4)
        .unwrap()
        .to_vec();
    assert!(with.iter().zip(&without).any(|(a, b)| (a - b).abs() > 1e-6));
}
