use numcore::nn::{self, AttentionVars};
use numcore::{grad_check, GradCheckOptions, Objective, Precision, Real, Result, SeededRng, Tape, Tensor, Var};
use proptest::prelude::*;

fn random(shape: &[usize], rng: &mut SeededRng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.uniform() * 2.0 - 1.0)
}

/// Every differentiable primitive, contracted against a fixed random
/// projection so each output element contributes to the loss.
#[derive(Clone, Copy, Debug)]
enum Prim {
    Add,
    Sub,
    Mul,
    MulBroadcast,
    MatMul,
    Bmm,
    BmmT,
    Softmax,
    LogSoftmax,
    LayerNorm,
    Gelu,
    Permute,
    Expand,
    Concat,
    Slice,
    Mean,
}

struct PrimObjective {
    prim: Prim,
    proj: Tensor<f64>,
}

impl Objective for PrimObjective {
    fn eval<S: Real>(&self, t: &mut Tape<S>, p: &[Var]) -> Result<Var> {
        let (a, b) = (p[0], p[1]);
        let y = match self.prim {
            Prim::Add => t.add(a, b)?,
            Prim::Sub => t.sub(a, b)?,
            Prim::Mul => t.mul(a, b)?,
            Prim::MulBroadcast => {
                let row = t.slice(b, 0, 0, 1)?;
                let row = t.reshape(row, &[4])?;
                t.mul(a, row)?
            }
            Prim::MatMul => {
                let bt = t.reshape(b, &[4, 3])?;
                t.matmul(a, bt)?
            }
            Prim::Bmm => {
                let a3 = t.reshape(a, &[1, 3, 4])?;
                let b3 = t.reshape(b, &[1, 4, 3])?;
                t.bmm(a3, b3, false)?
            }
            Prim::BmmT => {
                let a3 = t.reshape(a, &[1, 3, 4])?;
                let b3 = t.reshape(b, &[1, 3, 4])?;
                t.bmm(a3, b3, true)?
            }
            Prim::Softmax => t.softmax(a)?,
            Prim::LogSoftmax => t.log_softmax(a)?,
            Prim::LayerNorm => t.layer_norm(a, S::from_f64_lossy(1e-5))?,
            Prim::Gelu => t.gelu(a)?,
            Prim::Permute => {
                let a3 = t.reshape(a, &[3, 2, 2])?;
                t.permute(a3, &[2, 0, 1])?
            }
            Prim::Expand => {
                let col = t.slice(b, 1, 0, 1)?;
                t.expand(col, &[2, 3, 4])?
            }
            Prim::Concat => t.concat(&[a, b], 1)?,
            Prim::Slice => t.slice(a, 1, 1, 3)?,
            Prim::Mean => {
                let m = t.mean(a)?;
                return t.scale(m, S::from_f64_lossy(3.0));
            }
        };
        let n = t.value(y).len();
        let proj = t.constant(Tensor::new(t.value(y).shape().to_vec(), self.proj.data()[..n].iter().map(|&v| S::from_f64_lossy(v)).collect())?);
        let z = t.mul(y, proj)?;
        t.sum(z)
    }
}

const PRIMS: [Prim; 16] = [
    Prim::Add,
    Prim::Sub,
    Prim::Mul,
    Prim::MulBroadcast,
    Prim::MatMul,
    Prim::Bmm,
    Prim::BmmT,
    Prim::Softmax,
    Prim::LogSoftmax,
    Prim::LayerNorm,
    Prim::Gelu,
    Prim::Permute,
    Prim::Expand,
    Prim::Concat,
    Prim::Slice,
    Prim::Mean,
];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn primitives_match_central_differences(seed in 0u64..10_000) {
        let mut rng = SeededRng::new(seed);
        for prim in PRIMS {
            let a = random(&[3, 4], &mut rng);
            let b = random(&[3, 4], &mut rng);
            let proj = random(&[48], &mut rng);
            let obj = PrimObjective { prim, proj };
            let opts = GradCheckOptions { eps: 1e-3, coordinates: 24, precision: Precision::F32, seed };
            let r = grad_check(&obj, &[a, b], &opts).unwrap();
            // 32-bit autodiff against the 64-bit oracle; tiny true gradients
            // are dominated by the 1e-8 guard, so compare absolute error there.
            for c in &r.checks {
                let ok = c.rel_error <= 1e-3 || (c.autodiff - c.numeric).abs() <= 1e-6;
                prop_assert!(ok, "{prim:?}: {c:?}");
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(data in proptest::collection::vec(-30.0f32..30.0, 12)) {
        let mut t = Tape::<f32>::new();
        let x = t.constant(Tensor::new([3, 4], data).unwrap());
        let y = t.softmax(x).unwrap();
        for row in t.value(y).data().chunks(4) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f32>() - 1.0).abs() <= 1e-6);
        }
    }
}

struct AttentionBlock;

impl Objective for AttentionBlock {
    fn eval<S: Real>(&self, t: &mut Tape<S>, p: &[Var]) -> Result<Var> {
        let w = AttentionVars {
            wq: p[1],
            bq: p[2],
            wk: p[3],
            bk: p[4],
            wv: p[5],
            bv: p[6],
            wo: p[7],
            bo: p[8],
        };
        let x = t.layer_norm(p[0], S::from_f64_lossy(1e-5))?;
        let a = nn::multi_head_attention(t, x, x, &w, 2)?;
        let h = t.add(a, p[0])?;
        let h = nn::mlp2(t, h, p[9], p[10], p[11], p[12])?;
        let proj = t.constant(Tensor::from_fn(t.value(h).shape().to_vec(), |i| {
            S::from_f64_lossy(((i * 7 % 11) as f64 - 5.0) / 5.0)
        }));
        let z = t.mul(h, proj)?;
        t.sum(z)
    }
}

#[test]
fn attention_block_gradients_at_32_bit() {
    let mut rng = SeededRng::new(42);
    let d = 8;
    let mut params = vec![random(&[2, 5, d], &mut rng)];
    for _ in 0..4 {
        params.push(random(&[d, d], &mut rng).cast::<f64>());
        params.push(random(&[d], &mut rng));
    }
    params.push(random(&[d, 2 * d], &mut rng));
    params.push(random(&[2 * d], &mut rng));
    params.push(random(&[2 * d, d], &mut rng));
    params.push(random(&[d], &mut rng));
    let opts = GradCheckOptions {
        eps: 1e-3,
        coordinates: 20,
        precision: Precision::F32,
        seed: 5,
    };
    let r = grad_check(&AttentionBlock, &params, &opts).unwrap();
    assert!(r.max_rel_error <= 1e-3, "{:#?}", r.checks);
}
