//! A plain, mask-free transformer written out with nested loops over the
//! raw image.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rvit::masking::permutation;
use rvit::model::{HeadConfig, ModelConfig, Network, NetworkConfig};
use rvit::numkernel::{gelu_scalar, LAYERNORM_EPS};
use rvit::patching::{gather_patches, partition, ImageSample, Labels};

type Mat = Vec<Vec<f64>>;

fn matmul(x: &Mat, w: &[f64], cols: usize, bias: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            (0..cols)
                .map(|j| bias[j] + row.iter().enumerate().map(|(i, v)| v * w[i * cols + j]).sum::<f64>())
                .collect()
        })
        .collect()
}

fn layernorm(x: &Mat, gain: &[f64], bias: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            let d = row.len() as f64;
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            let s = (var + LAYERNORM_EPS).sqrt();
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / s * gain[j] + bias[j])
                .collect()
        })
        .collect()
}

/// Token rows of every block output plus the final normalized class token.
fn reference(net: &Network, image: &ImageSample) -> (Vec<Mat>, Vec<f64>) {
    let cfg = &net.config.encoder;
    let (p, c, d) = (cfg.patch, cfg.channels, cfg.dim);
    let (gh, gw) = cfg.grid();
    let enc = &net.encoder;
    let pos = net.positional();

    // Patch vectors straight from the pixel buffer.
    let mut patches: Mat = Vec::new();
    for gy in 0..gh {
        for gx in 0..gw {
            let mut v = Vec::with_capacity(p * p * c);
            for py in 0..p {
                for px in 0..p {
                    for ch in 0..c {
                        v.push(image.pixel(gy * p + py, gx * p + px, ch) as f64);
                    }
                }
            }
            patches.push(v);
        }
    }
    let emb = matmul(&patches, enc.projection.data(), d, enc.projection_bias.data());
    let mut x: Mat = vec![enc.class_token.data().iter().zip(pos.row(0)).map(|(a, b)| a + b).collect()];
    for (i, row) in emb.into_iter().enumerate() {
        x.push(row.iter().zip(pos.row(i + 1)).map(|(a, b)| a + b).collect());
    }

    let heads = cfg.heads;
    let hd = d / heads;
    let t = x.len();
    let mut outputs = Vec::new();
    for b in &enc.blocks {
        let h = layernorm(&x, b.ln1_gain.data(), b.ln1_bias.data());
        let q = matmul(&h, b.wq.data(), d, b.bq.data());
        let k = matmul(&h, b.wk.data(), d, b.bk.data());
        let v = matmul(&h, b.wv.data(), d, b.bv.data());
        let mut ctx = vec![vec![0.0; d]; t];
        for head in 0..heads {
            let off = head * hd;
            for i in 0..t {
                let logits: Vec<f64> = (0..t)
                    .map(|j| (0..hd).map(|e| q[i][off + e] * k[j][off + e]).sum::<f64>() / (hd as f64).sqrt())
                    .collect();
                let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let ex: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
                let z: f64 = ex.iter().sum();
                for e in 0..hd {
                    ctx[i][off + e] = (0..t).map(|j| ex[j] / z * v[j][off + e]).sum();
                }
            }
        }
        let o = matmul(&ctx, b.wo.data(), d, b.bo.data());
        for (xr, or) in x.iter_mut().zip(&o) {
            xr.iter_mut().zip(or).for_each(|(a, b)| *a += b);
        }
        let h = layernorm(&x, b.ln2_gain.data(), b.ln2_bias.data());
        let hidden = b.b1.numel();
        let m: Mat = matmul(&h, b.w1.data(), hidden, b.b1.data())
            .into_iter()
            .map(|r| r.into_iter().map(gelu_scalar).collect())
            .collect();
        let m = matmul(&m, b.w2.data(), d, b.b2.data());
        for (xr, mr) in x.iter_mut().zip(&m) {
            xr.iter_mut().zip(mr).for_each(|(a, b)| *a += b);
        }
        outputs.push(x.clone());
    }
    let cls = layernorm(&x[..1].to_vec(), enc.norm_gain.data(), enc.norm_bias.data()).remove(0);
    (outputs, cls)
}

fn rel_err(a: f64, b: f64, scale: f64) -> f64 {
    (a - b).abs() / scale.max(1e-300)
}

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> ImageSample {
    let pixels = (0..h * w * c).map(|_| rng.gen_range(-2.0f32..2.0)).collect();
    ImageSample::new("ref", h, w, c, pixels, Labels::default()).unwrap()
}

/// Largest relative deviation between full-retention encoding (identity and
/// shuffled patch order) and the reference, over class token and every
/// tapped stage of three encoder shapes.
pub fn full_retention_deviation() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for (case, (dim, depth, heads, patch, c, h, w)) in
        [(16, 4, 2, 4, 3, 16, 16), (8, 4, 4, 2, 1, 6, 8), (12, 8, 3, 3, 2, 9, 12)]
            .into_iter()
            .enumerate()
    {
        let encoder = ModelConfig::new(dim, depth, heads, 2, patch, c, h, w);
        let taps = encoder.taps;
        let net = Network::new(
            NetworkConfig {
                encoder,
                head: HeadConfig::Classification { labels: 3 },
            },
            case as u64,
        )
        .unwrap();
        let image = random_image(&mut rng, h, w, c);
        let grid = partition(&image, patch).unwrap();
        let n = grid.len();
        let (blocks, cls_ref) = reference(&net, &image);
        let scale = cls_ref.iter().map(|v| v.abs()).fold(0.0, f64::max);

        for order in [(0..n).collect::<Vec<_>>(), permutation(case as u64 + 11, n)] {
            let batch = gather_patches(&[&grid], &[order]).unwrap();
            let enc = net.encode(&batch).unwrap();
            for (j, v) in enc.class_embedding.data().iter().enumerate() {
                worst = worst.max(rel_err(*v, cls_ref[j], scale));
            }
            for (s, &tap) in taps.iter().enumerate() {
                let want = &blocks[tap - 1];
                let got = &enc.stages[0][s].dense;
                let scale = want.iter().flatten().map(|v| v.abs()).fold(0.0, f64::max);
                // Dense maps are `D × gh × gw`; token `1 + i` is cell `i`.
                for i in 0..n {
                    for e in 0..dim {
                        worst = worst.max(rel_err(got.data()[e * n + i], want[1 + i][e], scale));
                    }
                }
            }
        }
    }
    worst
}
