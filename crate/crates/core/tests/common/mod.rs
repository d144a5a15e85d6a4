//! Shared helpers for the integration tests: seeded data, brute-force DFT and
//! a loop-level color encoder block.
#![allow(dead_code)]

pub mod grad;

use std::f64::consts::PI;

use fdce::imageio::{load_image, Image};
use fdce::nn::ParamStore;
use fdce::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(r: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| r.gen_range(lo..hi))
}

pub fn rand_image(r: &mut impl Rng, h: usize, w: usize) -> Image {
    Image::from_fn(h, w, |_, _, _| r.gen_range(0.0..1.0))
}

/// Smooth image with some structure, for ordering checks.
pub fn textured_image(seed: u64, h: usize, w: usize) -> Image {
    let mut r = rng(seed);
    let f: Vec<f64> = (0..6).map(|_| r.gen_range(0.05..0.6)).collect();
    let base = [r.gen_range(0.0..0.3), r.gen_range(0.3..0.6), r.gen_range(0.4..0.8)];
    Image::from_fn(h, w, |y, x, c| {
        let (y, x) = (y as f64, x as f64);
        let v = base[c] + 0.2 * (f[c] * y + f[c + 3] * x).sin() + 0.15 * ((x * 0.9).sin() * (y * 0.7).cos());
        v.clamp(0.0, 1.0)
    })
}

/// Four synthetic degraded/clean pairs at 64×64.
pub fn toy_pairs() -> Vec<(Image, Image)> {
    (0..4)
        .map(|k| {
            let y = Image::from_fn(64, 64, |r, c, ch| {
                0.5 + 0.4 * ((r as f64 * 0.1 + k as f64).sin() * (c as f64 * 0.07 + ch as f64).cos())
            });
            let x = Image::from_fn(64, 64, |r, c, ch| y.get(r, c, ch) * 0.6 + [0.05, 0.3, 0.35][ch] * 0.4);
            (x, y)
        })
        .collect()
}

/// Direct 2D DFT of one `h × w` plane, `sign = −1` forward, `+1` inverse
/// (unnormalized).
pub fn dft2(re: &[f64], im: &[f64], h: usize, w: usize, sign: f64) -> (Vec<f64>, Vec<f64>) {
    let mut out_re = vec![0.0; h * w];
    let mut out_im = vec![0.0; h * w];
    for u in 0..h {
        for v in 0..w {
            let (mut sr, mut si) = (0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let a = sign * 2.0 * PI * ((u * y) as f64 / h as f64 + (v * x) as f64 / w as f64);
                    let (c, s) = (a.cos(), a.sin());
                    let (pr, pi) = (re[y * w + x], im[y * w + x]);
                    sr += pr * c - pi * s;
                    si += pr * s + pi * c;
                }
            }
            out_re[u * w + v] = sr;
            out_im[u * w + v] = si;
        }
    }
    (out_re, out_im)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

type Mat = Vec<Vec<f64>>;

fn param(store: &ParamStore<f64>, name: &str) -> Tensor<f64> {
    store.by_name(name).unwrap_or_else(|| panic!("missing parameter {name}")).clone()
}

fn linear(x: &Mat, store: &ParamStore<f64>, prefix: &str) -> Mat {
    let w = param(store, &format!("{prefix}.weight"));
    let b = param(store, &format!("{prefix}.bias"));
    let (cin, cout) = (w.shape()[0], w.shape()[1]);
    x.iter()
        .map(|row| {
            assert_eq!(row.len(), cin);
            (0..cout)
                .map(|o| b.data()[o] + (0..cin).map(|i| row[i] * w.data()[i * cout + o]).sum::<f64>())
                .collect()
        })
        .collect()
}

fn softmax_row(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// `softmax(q kᵀ · scale) v`, row by row.
fn attention(q: &Mat, k: &Mat, v: &Mat, scale: f64) -> (Mat, Mat) {
    let weights: Mat = q
        .iter()
        .map(|qi| {
            let logits: Vec<f64> = k.iter().map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale).collect();
            softmax_row(&logits)
        })
        .collect();
    let out = weights
        .iter()
        .map(|wr| (0..v[0].len()).map(|c| wr.iter().zip(v).map(|(a, vj)| a * vj[c]).sum()).collect())
        .collect();
    (out, weights)
}

fn layer_norm(x: &Mat, store: &ParamStore<f64>, prefix: &str) -> Mat {
    let g = param(store, &format!("{prefix}.gamma"));
    let b = param(store, &format!("{prefix}.beta"));
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mu = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            let rs = 1.0 / (var + 1e-5).sqrt();
            row.iter().enumerate().map(|(i, v)| g.data()[i] * (v - mu) * rs + b.data()[i]).collect()
        })
        .collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect()).collect()
}

pub fn gelu_tanh(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// One color encoder block written out as its three update equations.
/// Returns the output rows and the cross-attention weights.
pub fn ceb_oracle(
    store: &ParamStore<f64>,
    prefix: &str,
    e_prev: &Mat,
    features: &Tensor<f64>,
    heads: usize,
    scaled: bool,
) -> (Mat, Mat) {
    let (cf, h, w) = (features.shape()[0], features.shape()[1], features.shape()[2]);
    let tokens: Mat = (0..h * w).map(|t| (0..cf).map(|c| features.data()[c * h * w + t]).collect()).collect();
    let width = e_prev[0].len();

    // first update: cross-attention against the feature tokens plus the previous queries
    let q = linear(e_prev, store, &format!("{prefix}.q"));
    let k = linear(&tokens, store, &format!("{prefix}.k"));
    let v = linear(&tokens, store, &format!("{prefix}.v"));
    let scale = if scaled { 1.0 / (width as f64).sqrt() } else { 1.0 };
    let (ctx, cross) = attention(&q, &k, &v, scale);
    let e1 = add(&ctx, e_prev);

    // second update: multi-head self-attention on the normalized queries
    let n1 = layer_norm(&e1, store, &format!("{prefix}.ln1"));
    let sq = linear(&n1, store, &format!("{prefix}.mhsa.q"));
    let sk = linear(&n1, store, &format!("{prefix}.mhsa.k"));
    let sv = linear(&n1, store, &format!("{prefix}.mhsa.v"));
    let d = width / heads;
    let mut ctx = vec![vec![0.0; width]; e1.len()];
    for hd in 0..heads {
        let cut = |m: &Mat| -> Mat { m.iter().map(|r| r[hd * d..(hd + 1) * d].to_vec()).collect() };
        let (o, _) = attention(&cut(&sq), &cut(&sk), &cut(&sv), 1.0 / (d as f64).sqrt());
        for (row, orow) in ctx.iter_mut().zip(&o) {
            row[hd * d..(hd + 1) * d].copy_from_slice(orow);
        }
    }
    let sa = linear(&ctx, store, &format!("{prefix}.mhsa.o"));
    let e2 = add(&sa, &e1);

    // third update: feed-forward on the normalized queries, residual, normalization
    let n2 = layer_norm(&e2, store, &format!("{prefix}.ln2"));
    let hdn = linear(&n2, store, &format!("{prefix}.ffn1"));
    let hdn: Mat = hdn.iter().map(|r| r.iter().map(|&x| gelu_tanh(x)).collect()).collect();
    let f = linear(&hdn, store, &format!("{prefix}.ffn2"));
    let out = layer_norm(&add(&f, &e2), store, &format!("{prefix}.ln3"));
    (out, cross)
}

pub fn rows(t: &Tensor<f64>) -> Mat {
    let c = *t.shape().last().unwrap();
    t.data().chunks(c).map(|r| r.to_vec()).collect()
}

/// Overwrites every parameter whose name ends in `.bias` or `.beta` with
/// random values so symmetry checks are not trivially satisfied.
pub fn randomize_offsets(store: &mut ParamStore<f64>, seed: u64) {
    let mut r = rng(seed);
    let names: Vec<String> = store
        .iter()
        .filter(|(n, _)| n.ends_with(".bias") || n.ends_with(".beta"))
        .map(|(n, _)| n.to_string())
        .collect();
    for n in names {
        let shape = store.by_name(&n).unwrap().shape().to_vec();
        store.set(&n, rand_tensor(&mut r, &shape, -0.3, 0.3)).unwrap();
    }
}

/// Image with a natural `1/f` amplitude spectrum: random-phase cosines whose
/// amplitude falls off with spatial frequency, partly shared across channels.
pub fn natural_image(seed: u64, h: usize, w: usize) -> Image {
    let mut r = rng(seed);
    let mut waves = Vec::new();
    for fy in -12i32..=12 {
        for fx in 0i32..=12 {
            if fx == 0 && fy <= 0 {
                continue;
            }
            let f = ((fy * fy + fx * fx) as f64).sqrt();
            let shared: f64 = r.gen_range(0.0..2.0 * PI);
            let phases: Vec<f64> = (0..3).map(|_| shared + r.gen_range(-0.6..0.6)).collect();
            waves.push((fy as f64 / h as f64, fx as f64 / w as f64, 1.0 / f, phases));
        }
    }
    let mut planes = vec![vec![0.0; h * w]; 3];
    for (c, plane) in planes.iter_mut().enumerate() {
        for y in 0..h {
            for x in 0..w {
                plane[y * w + x] = waves
                    .iter()
                    .map(|(fy, fx, a, ph)| a * (2.0 * PI * (fy * y as f64 + fx * x as f64) + ph[c]).cos())
                    .sum();
            }
        }
    }
    let scale = [0.5, 0.8, 0.9];
    let offset = [0.05, 0.1, 0.1];
    let spans: Vec<(f64, f64)> = planes
        .iter()
        .map(|p| (p.iter().copied().fold(f64::INFINITY, f64::min), p.iter().copied().fold(f64::NEG_INFINITY, f64::max)))
        .collect();
    Image::from_fn(h, w, |y, x, c| {
        let (lo, hi) = spans[c];
        offset[c] + scale[c] * (planes[c][y * w + x] - lo) / (hi - lo)
    })
}

/// Scores from the array-based second implementation in
/// `fixtures/metrics_oracle.py`, which also wrote the fixture files:
/// `(name, uiqm, uciqe)`.
pub const METRIC_FIXTURES: [(&str, f64, f64); 5] = [
    ("ramp", 1.498074131848, 0.621541015410),
    ("noise", 3.236217123975, 0.653485644273),
    ("waves", 2.772575027339, 0.388547999444),
    ("underwater", 2.244418902134, 0.340868489805),
    ("checker", 1.418728616019, 0.715528288218),
];

pub fn metric_fixture(name: &str) -> Image {
    let p: std::path::PathBuf = [env!("CARGO_MANIFEST_DIR"), "tests", "fixtures", &format!("{name}.ppm")].iter().collect();
    load_image(p).unwrap()
}
