//! Central finite differences against the tape's reverse sweep.
//!
//! Every op is checked on 100 random instances: the scalar probe
//! `Σ op(inputs) ⊙ R` with a fixed random `R` is differentiated analytically
//! and numerically with respect to every input element.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use rvit::model::{HeadConfig, ModelConfig, Network, NetworkConfig};
use rvit::numkernel::{Tape, Tensor, Var};
use rvit::patching::{gather_patches, partition, ImageSample, Labels};

const INSTANCES: usize = 100;
const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-5;
/// Gradient magnitude, per unit of `max(1, |f|)`, below which errors are
/// measured on an absolute scale. Central differences at this step carry
/// rounding noise of about `ulp(f) / STEP`, roughly `1e-10 · |f|`, so
/// structurally zero gradients (key biases under the softmax shift
/// invariance, for instance) would otherwise fail on noise alone.
const GRAD_FLOOR: f64 = 1e-3;

fn randn(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

/// Relative error with a floor so entries that are zero analytically
/// compare on an absolute scale of `TOLERANCE · floor`.
fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Largest relative error over all input elements, or over `sample` random
/// elements per input when given.
fn check(
    rng: &mut ChaCha8Rng,
    inputs: &[Tensor],
    sample: Option<usize>,
    f: &dyn Fn(&mut Tape, &[Var]) -> Var,
) -> f64 {
    let probe_of = |tape: &mut Tape, out: Var, r: &Tensor| -> Var {
        let rv = tape.constant(r.clone());
        let prod = tape.mul(out, rv).unwrap();
        tape.sum(prod)
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars);
    let r = randn(tape.shape(out).to_vec(), rng);
    let loss = probe_of(&mut tape, out, &r);
    let floor = GRAD_FLOOR * tape.value(loss).item().abs().max(1.0);
    tape.backward(loss).unwrap();
    let grads: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(v).numel()]))
        .collect();

    let eval = |perturbed: &[Tensor]| -> f64 {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|x| t.leaf(x.clone())).collect();
        let o = f(&mut t, &vs);
        let l = probe_of(&mut t, o, &r);
        t.value(l).item()
    };
    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for (i, x) in inputs.iter().enumerate() {
        let elems: Vec<usize> = match sample {
            Some(s) => (0..s).map(|_| rng.gen_range(0..x.numel())).collect(),
            None => (0..x.numel()).collect(),
        };
        for j in elems {
            let orig = x.data()[j];
            work[i].data_mut()[j] = orig + STEP;
            let up = eval(&work);
            work[i].data_mut()[j] = orig - STEP;
            let down = eval(&work);
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max(rel_err(grads[i][j], numeric, floor));
        }
    }
    worst
}

/// Worst relative error of one op over its random instances.
fn run(name: &'static str, seed: u64, mut instance: impl FnMut(&mut ChaCha8Rng) -> f64) -> (&'static str, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let worst = (0..INSTANCES).map(|_| instance(&mut rng)).fold(0.0, f64::max);
    (name, worst)
}

fn dims(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.gen_range(lo..=hi)
}

pub fn add_mul_scale() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    out.push(run("add", 1, |rng| {
        let s = vec![dims(rng, 1, 4), dims(rng, 1, 5)];
        let ins = [randn(s.clone(), rng), randn(s, rng)];
        check(rng, &ins, None, &|t, v| t.add(v[0], v[1]).unwrap())
    }));
    out.push(run("mul", 2, |rng| {
        let s = vec![dims(rng, 1, 4), dims(rng, 1, 5)];
        let ins = [randn(s.clone(), rng), randn(s, rng)];
        check(rng, &ins, None, &|t, v| t.mul(v[0], v[1]).unwrap())
    }));
    out.push(run("scale", 3, |rng| {
        let c: f64 = StandardNormal.sample(rng);
        let ins = [randn(vec![dims(rng, 1, 6)], rng)];
        check(rng, &ins, None, &move |t, v| t.scale(v[0], c))
    }));
    out
}

pub fn bias_and_matmul() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    out.push(run("add_bias", 4, |rng| {
        let n = dims(rng, 1, 5);
        let ins = [randn(vec![dims(rng, 1, 3), dims(rng, 1, 3), n], rng), randn(vec![n], rng)];
        check(rng, &ins, None, &|t, v| t.add_bias(v[0], v[1]).unwrap())
    }));
    out.push(run("matmul", 5, |rng| {
        let (b, m, k, n) = (dims(rng, 1, 3), dims(rng, 1, 4), dims(rng, 1, 5), dims(rng, 1, 4));
        let ins = [randn(vec![b, m, k], rng), randn(vec![k, n], rng)];
        check(rng, &ins, None, &|t, v| t.matmul(v[0], v[1]).unwrap())
    }));
    out.push(run("bmm", 6, |rng| {
        let (g, m, k, n) = (dims(rng, 1, 3), dims(rng, 1, 4), dims(rng, 1, 4), dims(rng, 1, 4));
        let ins = [randn(vec![g, m, k], rng), randn(vec![g, k, n], rng)];
        check(rng, &ins, None, &|t, v| t.bmm(v[0], v[1], false).unwrap())
    }));
    out.push(run("bmm_trans", 7, |rng| {
        let (g, m, k, n) = (dims(rng, 1, 3), dims(rng, 1, 4), dims(rng, 1, 4), dims(rng, 1, 4));
        let ins = [randn(vec![g, m, k], rng), randn(vec![g, n, k], rng)];
        check(rng, &ins, None, &|t, v| t.bmm(v[0], v[1], true).unwrap())
    }));
    out
}

pub fn layernorm_and_gelu() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    out.push(run("layernorm", 8, |rng| {
        let d = dims(rng, 2, 6);
        let ins = [
            randn(vec![dims(rng, 1, 4), d], rng),
            randn(vec![d], rng),
            randn(vec![d], rng),
        ];
        check(rng, &ins, None, &|t, v| t.layernorm(v[0], v[1], v[2]).unwrap())
    }));
    out.push(run("gelu", 9, |rng| {
        let ins = [randn(vec![dims(rng, 1, 4), dims(rng, 1, 4)], rng)];
        check(rng, &ins, None, &|t, v| t.gelu(v[0]))
    }));
    out
}

pub fn masked_softmax() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    out.push(run("masked_softmax", 10, |rng| {
        let (groups, rows_per, n) = (dims(rng, 1, 3), dims(rng, 1, 3), dims(rng, 1, 5));
        let mut live = Vec::with_capacity(groups * n);
        for _ in 0..groups {
            let keep = rng.gen_range(0..n);
            live.extend((0..n).map(|j| j == keep || rng.gen_bool(0.6)));
        }
        let ins = [randn(vec![groups * rows_per, n], rng)];
        check(rng, &ins, None, &move |t, v| t.masked_softmax(v[0], &live).unwrap())
    }));
    out
}

pub fn token_layout_ops() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    out.push(run("split_heads", 11, |rng| {
        let (b, tk, h, e) = (dims(rng, 1, 2), dims(rng, 1, 3), dims(rng, 1, 3), dims(rng, 1, 3));
        let ins = [randn(vec![b, tk, h * e], rng)];
        check(rng, &ins, None, &move |t, v| t.split_heads(v[0], h).unwrap())
    }));
    out.push(run("merge_heads", 12, |rng| {
        let (b, tk, h, e) = (dims(rng, 1, 2), dims(rng, 1, 3), dims(rng, 1, 3), dims(rng, 1, 3));
        let ins = [randn(vec![b * h, tk, e], rng)];
        check(rng, &ins, None, &move |t, v| t.merge_heads(v[0], h).unwrap())
    }));
    out.push(run("prepend_token", 13, |rng| {
        let d = dims(rng, 1, 4);
        let ins = [randn(vec![d], rng), randn(vec![dims(rng, 1, 3), dims(rng, 1, 3), d], rng)];
        check(rng, &ins, None, &|t, v| t.prepend_token(v[0], v[1]).unwrap())
    }));
    out.push(run("select_token", 14, |rng| {
        let tk = dims(rng, 1, 4);
        let idx = rng.gen_range(0..tk);
        let ins = [randn(vec![dims(rng, 1, 3), tk, dims(rng, 1, 3)], rng)];
        check(rng, &ins, None, &move |t, v| t.select_token(v[0], idx).unwrap())
    }));
    out.push(run("scatter_rows", 15, |rng| {
        let (b, n, d) = (dims(rng, 1, 3), dims(rng, 2, 6), dims(rng, 1, 3));
        let k = rng.gen_range(1..=n);
        let positions: Vec<Vec<usize>> = (0..b)
            .map(|_| {
                let mut p: Vec<usize> = (0..n).collect();
                for i in (1..n).rev() {
                    p.swap(i, rng.gen_range(0..=i));
                }
                p.truncate(rng.gen_range(1..=k));
                p
            })
            .collect();
        let ins = [randn(vec![b, 1 + k, d], rng)];
        check(rng, &ins, None, &move |t, v| t.scatter_rows(v[0], 1, &positions, n).unwrap())
    }));
    out.push(run("reshape", 16, |rng| {
        let (a, b) = (dims(rng, 1, 4), dims(rng, 1, 4));
        let ins = [randn(vec![a, b], rng)];
        check(rng, &ins, None, &move |t, v| t.reshape(v[0], vec![b, a]).unwrap())
    }));
    out.push(run("upsample_nearest", 17, |rng| {
        let f = dims(rng, 1, 3);
        let ins = [randn(vec![dims(rng, 1, 2), dims(rng, 1, 3), dims(rng, 1, 3), dims(rng, 1, 3)], rng)];
        check(rng, &ins, None, &move |t, v| t.upsample_nearest(v[0], f).unwrap())
    }));
    out
}

pub fn reductions_and_losses() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    out.push(run("sum", 18, |rng| {
        let ins = [randn(vec![dims(rng, 1, 4), dims(rng, 1, 4)], rng)];
        check(rng, &ins, None, &|t, v| t.sum(v[0]))
    }));
    out.push(run("mean", 19, |rng| {
        let ins = [randn(vec![dims(rng, 1, 4), dims(rng, 1, 4)], rng)];
        check(rng, &ins, None, &|t, v| t.mean(v[0]))
    }));
    out.push(run("bce_with_logits", 20, |rng| {
        let s = vec![dims(rng, 1, 4), dims(rng, 1, 4)];
        let n: usize = s.iter().product();
        let targets: Vec<f64> = (0..n).map(|_| f64::from(u8::from(rng.gen_bool(0.5)))).collect();
        let ins = [randn(s, rng)];
        check(rng, &ins, None, &move |t, v| t.bce_with_logits(v[0], &targets).unwrap())
    }));
    out.push(run("ce_pixelwise", 21, |rng| {
        let (rows, k) = (dims(rng, 1, 6), dims(rng, 2, 4));
        let labels: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..k)).collect();
        let ins = [randn(vec![rows, k], rng)];
        check(rng, &ins, None, &move |t, v| t.ce_pixelwise(v[0], &labels).unwrap())
    }));
    out
}

fn tiny_network(head: HeadConfig, seed: u64) -> Network {
    let encoder = ModelConfig::new(8, 4, 2, 2, 2, 2, 4, 4);
    Network::new(NetworkConfig { encoder, head }, seed).unwrap()
}

fn random_batch(rng: &mut ChaCha8Rng, net: &Network) -> rvit::patching::PatchBatch {
    let cfg = &net.config.encoder;
    let grids: Vec<_> = (0..2)
        .map(|i| {
            let px = (0..cfg.image_height * cfg.image_width * cfg.channels)
                .map(|_| StandardNormal.sample(rng))
                .collect::<Vec<f64>>()
                .into_iter()
                .map(|v| v as f32)
                .collect();
            let s = ImageSample::new(format!("g{i}"), cfg.image_height, cfg.image_width, cfg.channels, px, Labels::default())
                .unwrap();
            partition(&s, cfg.patch).unwrap()
        })
        .collect();
    let n = grids[0].len();
    // Different retained counts exercise key padding.
    let plans: Vec<Vec<usize>> = vec![(0..n).filter(|_| rng.gen_bool(0.6)).chain([n - 1]).collect(), vec![0, 2]];
    let plans: Vec<Vec<usize>> = plans
        .into_iter()
        .map(|mut p| {
            p.dedup();
            p
        })
        .collect();
    gather_patches(&grids.iter().collect::<Vec<_>>(), &plans).unwrap()
}

/// Checks every parameter tensor of a network through its task logits.
fn network_path(head: HeadConfig, seed: u64) -> (&'static str, f64) {
    let name = match head {
        HeadConfig::Classification { .. } => "classify_path",
        HeadConfig::Segmentation { .. } => "decode_path",
    };
    run(name, seed, |rng| {
        let net = tiny_network(head, rng.gen());
        let batch = random_batch(rng, &net);
        let mut params = Vec::new();
        net.encoder.visit(&mut |_, t| params.push(t.clone()));
        net.head.visit(&mut |_, t| params.push(t.clone()));
        let n_enc = {
            let mut c = 0;
            net.encoder.visit(&mut |_, _| c += 1);
            c
        };
        let f = |t: &mut Tape, v: &[Var]| -> Var {
            let mut i = 0;
            let encoder = net.encoder.map(|_, _| {
                i += 1;
                v[i - 1]
            });
            let mut j = n_enc;
            let head = net.head.map(|_, _| {
                j += 1;
                v[j - 1]
            });
            let vars = rvit::model::NetworkVars { encoder, head };
            net.logits_on_tape(t, &vars, &batch).unwrap()
        };
        check(rng, &params, Some(2), &f)
    })
}

pub fn classify_path() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    out.push(network_path(HeadConfig::Classification { labels: 3 }, 22));
    out
}

pub fn decode_path() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    out.push(network_path(HeadConfig::Segmentation { classes: 3, width: 4 }, 23));
    out
}

/// Every op check followed by the two full network paths.
pub fn all() -> Vec<(&'static str, f64)> {
    [
        add_mul_scale(),
        bias_and_matmul(),
        layernorm_and_gelu(),
        masked_softmax(),
        token_layout_ops(),
        reductions_and_losses(),
        classify_path(),
        decode_path(),
    ]
    .concat()
}
