//! Finite-difference verification of backward rules.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::engine::{Reduction, Tape, Tensor, UpsampleMode, Var};
use crate::error::{Error, Result};
use crate::maps::{ChangeMask, LabelMap};

/// Compare analytic gradients of a scalar graph against central
/// differences. Returns the maximum over all input elements of
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(graph: F, inputs: &[Tensor<f64>], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::invalid("grad_check", "step must be positive"));
    }
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.variable(t.clone())).collect();
        let out = graph(&mut tape, &vars)?;
        let v = tape.value(out);
        if !v.is_scalar() {
            return Err(Error::NonScalarLoss { shape: v.shape().to_vec() });
        }
        Ok(v.item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = graph(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        for (i, &a) in analytic.iter().enumerate() {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + h;
            let up = eval(&work)?;
            work[k].data_mut()[i] = orig - h;
            let down = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

pub const GRADCHECK_STEP: f64 = 1e-4;
pub const GRADCHECK_TOLERANCE: f64 = 1e-3;

pub type GraphFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

/// One operation under test: a scalar graph and its inputs.
pub struct GradCase {
    pub op: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub graph: GraphFn,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpCheck {
    pub op: &'static str,
    pub max_rel_error: f64,
    pub runs: usize,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRADCHECK_TOLERANCE
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Distinct values spaced far beyond the finite-difference step, randomly
/// permuted, so max-pool windows and relu inputs stay away from kinks.
fn separated(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0 + 0.5) * 0.05).collect();
    v.shuffle(rng);
    Tensor::new(shape.to_vec(), v).expect("sized")
}

/// `sum(out * r)` for a fixed random `r`, making every output element
/// contribute a distinct weight.
fn weighted(tape: &mut Tape<f64>, out: Var, r: &Tensor<f64>) -> Result<Var> {
    let r = tape.constant(r.clone());
    let m = tape.mul(out, r)?;
    Ok(tape.sum(m))
}

fn case(op: &'static str, inputs: Vec<Tensor<f64>>, graph: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static) -> GradCase {
    GradCase {
        op,
        inputs,
        graph: Box::new(graph),
    }
}

/// Seeded random instances of every differentiable operation and both
/// losses.
pub fn gradcheck_cases(seed: u64) -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=2);
    let c = rng.random_range(1..=3);
    let (h, w) = (2 * rng.random_range(2..=3), 2 * rng.random_range(2..=3));
    let cout = rng.random_range(1..=3);
    let x = [n, c, h, w];
    let mut cases = Vec::new();

    let (inp, wt, b) = (uniform(&mut rng, &x), uniform(&mut rng, &[cout, c, 3, 3]), uniform(&mut rng, &[cout]));
    let r = uniform(&mut rng, &[n, cout, h, w]);
    cases.push(case("conv2d", vec![inp, wt, b], move |t, v| {
        let y = t.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
        weighted(t, y, &r)
    }));

    let (inp, wt) = (uniform(&mut rng, &x), uniform(&mut rng, &[cout, c, 1, 1]));
    let r = uniform(&mut rng, &[n, cout, h, w]);
    cases.push(case("conv2d_1x1", vec![inp, wt], move |t, v| {
        let y = t.conv2d(v[0], v[1], None, 1, 0)?;
        weighted(t, y, &r)
    }));

    let inp = separated(&mut rng, &x);
    let r = uniform(&mut rng, &x);
    cases.push(case("relu", vec![inp], move |t, v| {
        let y = t.relu(v[0]);
        weighted(t, y, &r)
    }));

    let inp = separated(&mut rng, &x);
    let r = uniform(&mut rng, &[n, c, h / 2, w / 2]);
    cases.push(case("max_pool2d", vec![inp], move |t, v| {
        let y = t.max_pool2d(v[0], 2, 2)?;
        weighted(t, y, &r)
    }));

    for (op, mode) in [("upsample2x_bilinear", UpsampleMode::Bilinear), ("upsample2x_nearest", UpsampleMode::Nearest)] {
        let inp = uniform(&mut rng, &x);
        let r = uniform(&mut rng, &[n, c, 2 * h, 2 * w]);
        cases.push(case(op, vec![inp], move |t, v| {
            let y = t.upsample2x(v[0], mode)?;
            weighted(t, y, &r)
        }));
    }

    let c2 = rng.random_range(1..=3);
    let (a, bb) = (uniform(&mut rng, &x), uniform(&mut rng, &[n, c2, h, w]));
    let r = uniform(&mut rng, &[n, c + c2, h, w]);
    cases.push(case("channel_concat", vec![a, bb], move |t, v| {
        let y = t.concat(v[0], v[1])?;
        weighted(t, y, &r)
    }));

    let inp = uniform(&mut rng, &[n, c + 1, h, w]);
    let r = uniform(&mut rng, &[n, 1, h, w]);
    cases.push(case("slice_channels", vec![inp], move |t, v| {
        let y = t.slice_channels(v[0], 1, 1)?;
        weighted(t, y, &r)
    }));

    let inp = uniform(&mut rng, &[n, c + 1, h, w]);
    let r = uniform(&mut rng, &[n, c + 1, h, w]);
    cases.push(case("channel_softmax", vec![inp], move |t, v| {
        let y = t.softmax_channels(v[0])?;
        weighted(t, y, &r)
    }));

    let d = rng.random_range(1..=2);
    let (a, bb) = (uniform(&mut rng, &x), uniform(&mut rng, &x));
    let r = uniform(&mut rng, &[n, (2 * d + 1) * (2 * d + 1), h, w]);
    cases.push(case("correlation2d", vec![a, bb], move |t, v| {
        let y = t.correlation(v[0], v[1], d)?;
        weighted(t, y, &r)
    }));

    let (a, bb) = (uniform(&mut rng, &x), uniform(&mut rng, &x));
    let r = uniform(&mut rng, &x);
    cases.push(case("add_mul_scale", vec![a, bb], move |t, v| {
        let s = t.add(v[0], v[1])?;
        let p = t.mul(s, v[1])?;
        let y = t.scale(p, 0.7);
        weighted(t, y, &r)
    }));

    let (inp, g, be) = (uniform(&mut rng, &[2, c, h, w]), uniform(&mut rng, &[c]), uniform(&mut rng, &[c]));
    let r = uniform(&mut rng, &[2, c, h, w]);
    cases.push(case("batch_norm", vec![inp, g, be], move |t, v| {
        let (y, _) = t.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
        weighted(t, y, &r)
    }));

    let logits = uniform(&mut rng, &[n, 2, h, w]);
    let masks: Vec<ChangeMask> = (0..n).map(|_| ChangeMask::from_fn(w, h, |_, _| rng.random_bool(0.5))).collect();
    cases.push(case("bce_change_loss", vec![logits], move |t, v| t.bce_change_loss(v[0], &masks, Reduction::Sum)));

    let k = rng.random_range(2..=4);
    let logits = uniform(&mut rng, &[n, 2 * k, h, w]);
    let mut labels = || -> Vec<LabelMap> {
        (0..n)
            .map(|_| LabelMap::new(w, h, (0..h * w).map(|_| rng.random_range(0..k) as u8).collect()).expect("sized"))
            .collect()
    };
    let (l1, l2) = (labels(), labels());
    cases.push(case("split_semantic_loss", vec![logits], move |t, v| {
        t.split_semantic_loss(v[0], &l1, &l2, Reduction::Mean)
    }));
    cases
}

/// Run every case for each seed and keep the worst error per operation.
pub fn gradcheck_suite(seeds: &[u64]) -> Result<Vec<OpCheck>> {
    let mut out: Vec<OpCheck> = Vec::new();
    for &seed in seeds {
        for c in gradcheck_cases(seed) {
            let err = grad_check(&c.graph, &c.inputs, GRADCHECK_STEP)?;
            match out.iter_mut().find(|o| o.op == c.op) {
                Some(o) => {
                    o.max_rel_error = o.max_rel_error.max(err);
                    o.runs += 1;
                }
                None => out.push(OpCheck {
                    op: c.op,
                    max_rel_error: err,
                    runs: 1,
                }),
            }
        }
    }
    Ok(out)
}
