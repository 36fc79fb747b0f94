//! Finite-difference checks for every differentiable building block.
//!
//! Non-scalar outputs are reduced through a fixed random weighting, so each
//! case exercises the whole Jacobian rather than its column sums.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::align::{contrastive_loss, loss_i2t, loss_t2i, AlignmentBatch};
use crate::fusion::{to_spatial, FusionParams};
use crate::harness::{step_loss, Model, ModelConfig, RunConfig, Variant};
use crate::objectives::{bce, seg_loss, soft_dice_loss, tversky};
use crate::params::{Bound, ParamStore};
use crate::prompt::TokenSequence;
use crate::tensor::{GradCheck, GradCheckReport, Padding, Result, Tape, Tensor, Var};
use crate::text_encoder::{pool_text, TextEncoderConfig, TextEncoderParams};

pub const OP_TOL: f64 = 1e-4;
pub const END_TO_END_TOL: f64 = 1e-3;
pub const EPS: f64 = 1e-3;

pub const MODULES: [&str; 6] = [
    "tensor",
    "text_encoder",
    "fusion",
    "align",
    "objectives",
    "end_to_end",
];

#[derive(Debug, Clone, Serialize)]
pub struct SuiteCase {
    pub module: &'static str,
    pub case: String,
    pub report: GradCheckReport,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// `Σ out ⊙ R` for a fixed random `R`.
fn project<'t>(out: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let r = uniform(&mut rng, &out.shape(), -1.0, 1.0);
    out.mul(out.tape().constant(r))?.sum()
}

struct Suite {
    cases: Vec<SuiteCase>,
    rng: ChaCha8Rng,
    seed: u64,
}

impl Suite {
    fn check<F>(
        &mut self,
        module: &'static str,
        case: &str,
        inputs: Vec<Tensor>,
        tol: f64,
        max_coords: Option<usize>,
        f: F,
    ) where
        F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
    {
        self.seed += 1;
        let named: Vec<(String, Tensor)> = inputs
            .into_iter()
            .enumerate()
            .map(|(i, t)| (format!("x{i}"), t))
            .collect();
        let seed = self.seed;
        let report = GradCheck {
            eps: EPS,
            tol,
            max_coords,
            seed,
        }
        .run(&named, |tape, v| project(f(tape, v)?, seed));
        self.cases.push(SuiteCase {
            module,
            case: case.to_string(),
            report,
        });
    }

    fn u(&mut self, shape: &[usize]) -> Tensor {
        uniform(&mut self.rng, shape, -2.0, 2.0)
    }

    fn pos(&mut self, shape: &[usize]) -> Tensor {
        uniform(&mut self.rng, shape, 0.5, 2.0)
    }

    fn prob(&mut self, shape: &[usize]) -> Tensor {
        uniform(&mut self.rng, shape, 0.05, 0.95)
    }

    fn binary(&mut self, shape: &[usize]) -> Tensor {
        let rng = &mut self.rng;
        Tensor::from_fn(
            shape.to_vec(),
            |_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 },
        )
    }
}

fn tensor_cases(s: &mut Suite) {
    const M: &str = "tensor";
    let (a, b) = (s.u(&[3, 4]), s.u(&[4, 2]));
    s.check(M, "matmul", vec![a, b], OP_TOL, None, |_, v| {
        v[0].matmul(v[1])
    });
    let (a, b) = (s.u(&[2, 3, 4]), s.u(&[4, 5]));
    s.check(M, "matmul_broadcast", vec![a, b], OP_TOL, None, |_, v| {
        v[0].matmul(v[1])
    });
    let (x, k, bias) = (s.u(&[2, 2, 5, 5]), s.u(&[3, 2, 3, 3]), s.u(&[3]));
    s.check(M, "conv2d_same", vec![x, k, bias], OP_TOL, None, |_, v| {
        v[0].conv2d(v[1], Some(v[2]), Padding::Same)
    });
    let (x, k) = (s.u(&[1, 2, 5, 4]), s.u(&[2, 2, 3, 3]));
    s.check(M, "conv2d_valid", vec![x, k], OP_TOL, None, |_, v| {
        v[0].conv2d(v[1], None, Padding::Valid)
    });
    let (x, k, bias) = (s.u(&[2, 3, 3, 3]), s.u(&[4, 3, 1, 1]), s.u(&[4]));
    s.check(
        M,
        "conv2d_pointwise",
        vec![x, k, bias],
        OP_TOL,
        None,
        |_, v| v[0].conv2d(v[1], Some(v[2]), Padding::Same),
    );
    let x = s.u(&[3, 5]);
    s.check(M, "softmax", vec![x.clone()], OP_TOL, None, |_, v| {
        v[0].softmax(1)
    });
    s.check(M, "softmax_axis0", vec![x.clone()], OP_TOL, None, |_, v| {
        v[0].softmax(0)
    });
    s.check(M, "log_softmax", vec![x], OP_TOL, None, |_, v| {
        v[0].log_softmax(1)
    });

    let x = s.u(&[2, 6]);
    s.check(M, "relu", vec![x.clone()], OP_TOL, None, |_, v| v[0].relu());
    s.check(M, "sigmoid", vec![x.clone()], OP_TOL, None, |_, v| {
        v[0].sigmoid()
    });
    s.check(M, "exp", vec![x.clone()], OP_TOL, None, |_, v| v[0].exp());
    s.check(M, "neg", vec![x.clone()], OP_TOL, None, |_, v| v[0].neg());
    s.check(M, "square", vec![x.clone()], OP_TOL, None, |_, v| {
        v[0].square()
    });
    s.check(M, "scale", vec![x.clone()], OP_TOL, None, |_, v| {
        v[0].scale(-1.7)
    });
    s.check(M, "add_scalar", vec![x.clone()], OP_TOL, None, |_, v| {
        v[0].add_scalar(0.3)
    });
    s.check(M, "clamp", vec![x], OP_TOL, None, |_, v| {
        v[0].clamp(-1.0, 1.0)
    });
    let x = s.pos(&[2, 6]);
    s.check(M, "log", vec![x.clone()], OP_TOL, None, |_, v| v[0].log());
    s.check(M, "sqrt", vec![x], OP_TOL, None, |_, v| v[0].sqrt());

    let (a, b) = (s.u(&[2, 3, 4]), s.u(&[3, 1]));
    s.check(
        M,
        "add_broadcast",
        vec![a.clone(), b.clone()],
        OP_TOL,
        None,
        |_, v| v[0].add(v[1]),
    );
    s.check(
        M,
        "sub_broadcast",
        vec![a.clone(), b.clone()],
        OP_TOL,
        None,
        |_, v| v[0].sub(v[1]),
    );
    s.check(
        M,
        "mul_broadcast",
        vec![a.clone(), b],
        OP_TOL,
        None,
        |_, v| v[0].mul(v[1]),
    );
    let d = s.pos(&[4]);
    s.check(M, "div_broadcast", vec![a, d], OP_TOL, None, |_, v| {
        v[0].div(v[1])
    });

    let (a, b) = (s.u(&[2, 3, 2]), s.u(&[2, 1, 2]));
    s.check(M, "concat", vec![a, b], OP_TOL, None, |_, v| {
        Var::concat(&[v[0], v[1]], 1)
    });
    let x = s.u(&[2, 5, 3]);
    s.check(M, "narrow", vec![x.clone()], OP_TOL, None, |_, v| {
        v[0].narrow(1, 1, 3)
    });
    s.check(M, "reshape", vec![x.clone()], OP_TOL, None, |_, v| {
        v[0].reshape([5, 6])
    });
    s.check(M, "permute", vec![x.clone()], OP_TOL, None, |_, v| {
        v[0].permute(&[2, 0, 1])
    });
    s.check(M, "transpose", vec![x.clone()], OP_TOL, None, |_, v| {
        v[0].transpose()
    });
    s.check(M, "sum", vec![x.clone()], OP_TOL, None, |_, v| {
        v[0].square()?.sum()
    });
    s.check(M, "mean_axis", vec![x.clone()], OP_TOL, None, |_, v| {
        v[0].mean_axis(1)
    });
    s.check(M, "sum_axis", vec![x], OP_TOL, None, |_, v| {
        v[0].sum_axis(2)
    });
    let x = s.u(&[1, 2, 2, 3]);
    s.check(M, "upsample2", vec![x], OP_TOL, None, |_, v| {
        v[0].upsample2()
    });
    let x = s.u(&[1, 2, 4, 4]);
    s.check(M, "maxpool2", vec![x], OP_TOL, None, |_, v| v[0].maxpool2());
    let table = s.u(&[5, 3]);
    s.check(M, "embed", vec![table], OP_TOL, None, |_, v| {
        v[0].embed(&[4, 0, 4, 2], &[2, 2])
    });
}

fn text_encoder_cases(s: &mut Suite) {
    let cfg = TextEncoderConfig {
        vocab_size: 7,
        dim: 4,
        max_len: 5,
    };
    let mut store = ParamStore::new();
    let enc = TextEncoderParams::new(&mut store, &mut ChaCha8Rng::seed_from_u64(s.seed), cfg);
    let batch = vec![
        TokenSequence {
            ids: vec![2, 3, 4, 0, 0],
        },
        TokenSequence {
            ids: vec![5, 6, 2, 3, 4],
        },
    ];
    let inputs = store.tensors().to_vec();
    s.check(
        "text_encoder",
        "encode_and_pool",
        inputs,
        OP_TOL,
        None,
        move |_, v| {
            let p = Bound::from_vars(v.to_vec());
            let out = enc.encode(&p, &batch)?;
            pool_text(out.features, &out.pad_mask)
        },
    );
}

fn fusion_cases(s: &mut Suite) {
    let mut store = ParamStore::new();
    let fusion = FusionParams::new(&mut store, &mut ChaCha8Rng::seed_from_u64(s.seed), 3, 4, 5);
    let mut inputs = store.tensors().to_vec();
    inputs.push(s.u(&[2, 3, 2, 2]));
    inputs.push(s.u(&[2, 3, 4]));
    let n = store.len();
    s.check(
        "fusion",
        "project_attend_to_spatial",
        inputs.clone(),
        OP_TOL,
        None,
        move |_, v| {
            let p = Bound::from_vars(v[..n].to_vec());
            let (im, tx) = fusion.project(&p, v[n], v[n + 1])?;
            let att = fusion.cross_attention(
                &p,
                im,
                tx,
                Some(&[false, false, true, false, false, false]),
            )?;
            to_spatial(att.output, 2, 2)
        },
    );
    s.check(
        "fusion",
        "self_attention",
        inputs,
        OP_TOL,
        None,
        move |_, v| {
            let p = Bound::from_vars(v[..n].to_vec());
            let im = fusion.project_image(&p, v[n])?;
            Ok(fusion.attend(&p, im, None)?.output)
        },
    );
}

fn align_cases(s: &mut Suite) {
    let (a, b) = (s.u(&[4, 3]), s.u(&[4, 3]));
    fn batch<'t>(v: &[Var<'t>]) -> Result<AlignmentBatch<'t>> {
        AlignmentBatch::new(v[0], v[1], 0.5, 0.3)
    }
    s.check(
        "align",
        "loss_i2t",
        vec![a.clone(), b.clone()],
        OP_TOL,
        None,
        |_, v| loss_i2t(&batch(v)?),
    );
    s.check(
        "align",
        "loss_t2i",
        vec![a.clone(), b.clone()],
        OP_TOL,
        None,
        |_, v| loss_t2i(&batch(v)?),
    );
    s.check(
        "align",
        "contrastive_loss",
        vec![a, b],
        OP_TOL,
        None,
        |_, v| contrastive_loss(&batch(v)?),
    );
}

fn objective_cases(s: &mut Suite) {
    let p = s.prob(&[2, 2, 3, 3]);
    let y = s.binary(&[2, 2, 3, 3]);
    let t = y.clone();
    s.check(
        "objectives",
        "bce",
        vec![p.clone()],
        OP_TOL,
        None,
        move |tape, v| bce(v[0], tape.constant(t.clone())),
    );
    let t = y.clone();
    s.check(
        "objectives",
        "tversky",
        vec![p.clone()],
        OP_TOL,
        None,
        move |tape, v| tversky(v[0], tape.constant(t.clone()), 0.3, 0.7),
    );
    let t = y.clone();
    s.check(
        "objectives",
        "soft_dice_loss",
        vec![p.clone()],
        OP_TOL,
        None,
        move |tape, v| soft_dice_loss(v[0], tape.constant(t.clone()), 1.0),
    );
    s.check(
        "objectives",
        "seg_loss",
        vec![p],
        OP_TOL,
        None,
        move |tape, v| seg_loss(v[0], tape.constant(y.clone()), 0.5, 0.5),
    );
}

/// Full training loss of a small model on `batch` random 8×8 slices.
fn end_to_end_case(s: &mut Suite, variant: Variant, batch: usize) {
    let run = RunConfig {
        variant,
        base_channels: 4,
        text_dim: 8,
        fusion_dim: 8,
        max_len: 6,
        ..RunConfig::default()
    };
    let config = ModelConfig::from_run(&run, 12);
    let mut store = ParamStore::new();
    let model = Model::new(&mut store, &mut ChaCha8Rng::seed_from_u64(s.seed), config);
    let images = uniform(&mut s.rng, &[batch, 1, 8, 8], 0.0, 1.0);
    let masks = s.binary(&[batch, run.num_classes, 8, 8]);
    let tokens: Vec<TokenSequence> = (0..batch)
        .map(|b| TokenSequence {
            ids: vec![2, 3 + b, 5, 11, 0, 0],
        })
        .collect();
    let inputs = store.tensors().to_vec();
    let case = format!("{variant}_batch{batch}");
    s.check(
        "end_to_end",
        &case,
        inputs,
        END_TO_END_TOL,
        Some(12),
        move |tape, v| {
            let p = Bound::from_vars(v.to_vec());
            let out = model.forward(&p, tape.constant(images.clone()), &tokens)?;
            Ok(step_loss(&out, tape.constant(masks.clone()), &run, true)?.total)
        },
    );
}

/// Runs every case, or only those of `module`.
pub fn run_suite(module: Option<&str>, seed: u64) -> Vec<SuiteCase> {
    let mut s = Suite {
        cases: Vec::new(),
        rng: ChaCha8Rng::seed_from_u64(seed),
        seed,
    };
    let want = |m: &str| module.is_none_or(|x| x == m);
    if want("tensor") {
        tensor_cases(&mut s);
    }
    if want("text_encoder") {
        text_encoder_cases(&mut s);
    }
    if want("fusion") {
        fusion_cases(&mut s);
    }
    if want("align") {
        align_cases(&mut s);
    }
    if want("objectives") {
        objective_cases(&mut s);
    }
    if want("end_to_end") {
        end_to_end_case(&mut s, Variant::Full, 1);
        end_to_end_case(&mut s, Variant::Full, 2);
        end_to_end_case(&mut s, Variant::NoTemporalPrompt, 1);
        end_to_end_case(&mut s, Variant::NoModalityFusion, 2);
    }
    s.cases
}
