//! Seeded finite-difference cases. Each case draws a random small shape from
//! its seed and returns the worst relative error of the recorded adjoints.

use fdce::dce::Ceb;
use fdce::fsnet::Fsrb;
use fdce::fusion::fuse;
use fdce::losses::{hist_loss, perceptual_loss, rec_loss, ssim_loss, PerceptualExtractor, SsimParams};
use fdce::nn::{init_rng, Bound, Builder, ParamStore};
use fdce::tensor::gradcheck::{check_gradients, Coverage};
use fdce::tensor::{Graph, Result, Tensor, Var};
use rand::Rng;

use super::{rand_tensor, rng};

/// Central-difference step.
pub const H: f64 = 1e-6;

pub struct Case {
    pub name: &'static str,
    pub run: fn(u64) -> f64,
}

fn check(inputs: &[Tensor<f64>], f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>) -> f64 {
    check_gradients(f, inputs, H, Coverage::All).expect("gradient check runs")
}

/// `Σ y ⊙ r` with a fixed random `r`, so every output coordinate matters.
fn probe(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let r = g.constant(rand_tensor(&mut rng(seed ^ 0x5eed), &shape, -1.0, 1.0))?;
    let m = g.mul(y, r)?;
    g.sum(m)
}

/// Uniform in `±[lo, hi]`, keeping values away from zero.
fn away_from_zero(r: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v = r.gen_range(lo..hi);
        if r.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

fn dim(r: &mut impl Rng, lo: usize, hi: usize) -> usize {
    r.gen_range(lo..=hi)
}

fn conv2d(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (b, cin, cout) = (dim(&mut r, 1, 2), dim(&mut r, 1, 3), dim(&mut r, 1, 4));
    let k = [1, 3][r.gen_range(0..2)];
    let (stride, pad) = (dim(&mut r, 1, 2), r.gen_range(0..=k / 2));
    let (h, w) = (dim(&mut r, k.max(3), 8), dim(&mut r, k.max(3), 8));
    let inputs = [
        rand_tensor(&mut r, &[b, cin, h, w], -1.0, 1.0),
        rand_tensor(&mut r, &[cout, cin, k, k], -1.0, 1.0),
        rand_tensor(&mut r, &[cout], -1.0, 1.0),
    ];
    check(&inputs, |g, v| {
        let y = g.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
        probe(g, y, seed)
    })
}

fn matmul(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (bt, m, k, n) = (dim(&mut r, 1, 3), dim(&mut r, 1, 5), dim(&mut r, 1, 5), dim(&mut r, 1, 5));
    let shared = r.gen_bool(0.5);
    let inputs = [
        rand_tensor(&mut r, &[bt, m, k], -1.0, 1.0),
        if shared {
            rand_tensor(&mut r, &[k, n], -1.0, 1.0)
        } else {
            rand_tensor(&mut r, &[bt, k, n], -1.0, 1.0)
        },
    ];
    check(&inputs, |g, v| {
        let y = g.matmul(v[0], v[1])?;
        probe(g, y, seed)
    })
}

fn linear(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (rows, cin, cout) = (dim(&mut r, 1, 6), dim(&mut r, 1, 6), dim(&mut r, 1, 6));
    let inputs = [
        rand_tensor(&mut r, &[2, rows, cin], -1.0, 1.0),
        rand_tensor(&mut r, &[cin, cout], -1.0, 1.0),
        rand_tensor(&mut r, &[cout], -1.0, 1.0),
    ];
    check(&inputs, |g, v| {
        let y = g.linear(v[0], v[1], Some(v[2]))?;
        probe(g, y, seed)
    })
}

fn softmax(seed: u64) -> f64 {
    let mut r = rng(seed);
    let shape = [dim(&mut r, 1, 4), dim(&mut r, 2, 6), dim(&mut r, 1, 5)];
    let axis = r.gen_range(0..3);
    let inputs = [rand_tensor(&mut r, &shape, -3.0, 3.0)];
    check(&inputs, |g, v| {
        let y = g.softmax(v[0], axis)?;
        probe(g, y, seed)
    })
}

fn layer_norm(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (rows, c) = (dim(&mut r, 1, 6), dim(&mut r, 2, 8));
    let inputs = [
        rand_tensor(&mut r, &[rows, c], -2.0, 2.0),
        rand_tensor(&mut r, &[c], 0.5, 1.5),
        rand_tensor(&mut r, &[c], -0.5, 0.5),
    ];
    check(&inputs, |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
        probe(g, y, seed)
    })
}

fn activations(seed: u64) -> f64 {
    let mut r = rng(seed);
    let shape = [dim(&mut r, 1, 8), dim(&mut r, 1, 8)];
    let inputs = [away_from_zero(&mut r, &shape, 0.01, 4.0)];
    check(&inputs, |g, v| {
        let a = g.leaky_relu(v[0], 0.2)?;
        let b = g.gelu(v[0])?;
        let c = g.sigmoid(v[0])?;
        let d = g.abs(v[0])?;
        let s = g.add(a, b)?;
        let s = g.add(s, c)?;
        let d = g.scale(d, 0.5)?;
        let s = g.add(s, d)?;
        probe(g, s, seed)
    })
}

fn trig_and_arith(seed: u64) -> f64 {
    let mut r = rng(seed);
    let shape = [dim(&mut r, 1, 6), dim(&mut r, 1, 6)];
    let inputs = [
        rand_tensor(&mut r, &shape, -2.0, 2.0),
        away_from_zero(&mut r, &shape, 0.5, 2.0),
    ];
    check(&inputs, |g, v| {
        let c = g.cos(v[0])?;
        let s = g.sin(v[1])?;
        let q = g.div(c, v[1])?;
        let m = g.mul(q, s)?;
        let d = g.sub(m, v[0])?;
        let d = g.add_scalar(d, 0.3)?;
        probe(g, d, seed)
    })
}

fn polar(seed: u64) -> f64 {
    let mut r = rng(seed);
    let shape = [dim(&mut r, 1, 6), dim(&mut r, 1, 6)];
    let inputs = [
        away_from_zero(&mut r, &shape, 0.1, 2.0),
        away_from_zero(&mut r, &shape, 0.1, 2.0),
    ];
    check(&inputs, |g, v| {
        let a = g.magnitude(v[0], v[1], 1e-8)?;
        let p = g.atan2(v[1], v[0], 1e-8)?;
        let s = g.add(a, p)?;
        probe(g, s, seed)
    })
}

fn spectral(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (h, w) = ([2, 4, 8, 3, 5][r.gen_range(0..5)], [2, 4, 8, 6][r.gen_range(0..4)]);
    let c = dim(&mut r, 1, 2);
    let inputs = [
        rand_tensor(&mut r, &[1, c, h, w], -1.0, 1.0),
        rand_tensor(&mut r, &[1, c, h, w], -1.0, 1.0),
    ];
    check(&inputs, |g, v| {
        let (re, im) = g.fft2(v[0])?;
        let re = g.add(re, v[1])?;
        let back = g.ifft2(re, im)?;
        let a = probe(g, back, seed)?;
        let b = probe(g, im, seed + 1)?;
        g.add(a, b)
    })
}

fn reductions(seed: u64) -> f64 {
    let mut r = rng(seed);
    let shape = [dim(&mut r, 1, 2), dim(&mut r, 1, 3), dim(&mut r, 1, 4), dim(&mut r, 1, 4)];
    let inputs = [rand_tensor(&mut r, &shape, -1.0, 1.0)];
    check(&inputs, |g, v| {
        let ms = g.mean_spatial(v[0])?;
        let a = probe(g, ms, seed)?;
        let sq = g.mul(v[0], v[0])?;
        let m = g.mean(sq)?;
        let s = g.sum(v[0])?;
        let t = g.add(a, m)?;
        g.add(t, s)
    })
}

fn layout(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (b, c, h, w) = (dim(&mut r, 1, 2), dim(&mut r, 2, 4), dim(&mut r, 1, 4), dim(&mut r, 1, 4));
    let inputs = [
        rand_tensor(&mut r, &[b, c, h, w], -1.0, 1.0),
        rand_tensor(&mut r, &[b, 1, h, w], -1.0, 1.0),
    ];
    check(&inputs, |g, v| {
        let cat = g.concat(&[v[0], v[1]], 1)?;
        let n = g.narrow(cat, 1, 1, c)?;
        let p = g.permute(n, &[0, 2, 3, 1])?;
        let rs = g.reshape(p, &[b * h, w, c])?;
        let t = g.transpose(rs)?;
        let rep = g.repeat(t, 2)?;
        probe(g, rep, seed)
    })
}

fn resampling(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (b, c) = (dim(&mut r, 1, 2), dim(&mut r, 1, 3));
    let (h, w) = (2 * dim(&mut r, 1, 4), 2 * dim(&mut r, 1, 4));
    let inputs = [rand_tensor(&mut r, &[b, c, h, w], -1.0, 1.0)];
    check(&inputs, |g, v| {
        let d = g.avg_pool2(v[0])?;
        let u = g.upsample2(d)?;
        let y = g.mul(u, v[0])?;
        probe(g, y, seed)
    })
}

/// Every parameter replaced by `U(−0.5, 0.5)` so no branch is inert.
fn randomized<T>(store: &mut ParamStore<f64>, seed: u64, build: impl FnOnce(&mut Builder<'_, f64>) -> T) -> T {
    let mut irng = init_rng(seed);
    let out = build(&mut Builder::new(store, &mut irng));
    let mut r = rng(seed ^ 0xabcd);
    let names: Vec<(String, Vec<usize>)> = store.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect();
    for (n, shape) in names {
        store.set(&n, rand_tensor(&mut r, &shape, -0.5, 0.5)).unwrap();
    }
    out
}

fn with_params(store: &ParamStore<f64>, lead: Vec<Tensor<f64>>) -> Vec<Tensor<f64>> {
    lead.into_iter().chain(store.iter().map(|(_, t)| t.clone())).collect()
}

fn split_bound(v: &[Var], lead: usize) -> Bound {
    Bound::from_vars(v[lead..].to_vec())
}

fn fsrb(seed: u64) -> f64 {
    let mut r = rng(seed);
    let c = dim(&mut r, 2, 4);
    let mut store = ParamStore::new();
    let blk = randomized(&mut store, seed, |b| Fsrb::build(b, "fsrb", c).unwrap());
    let x = rand_tensor(&mut r, &[1, c, 8, 8], -1.0, 1.0);
    let inputs = with_params(&store, vec![x]);
    check(&inputs, |g, v| {
        let p = split_bound(v, 1);
        let y = blk.forward(g, &p, v[0])?;
        probe(g, y, seed)
    })
}

fn ceb(seed: u64) -> f64 {
    let mut r = rng(seed);
    let heads = dim(&mut r, 1, 2);
    let width = 4 * heads;
    // one query makes the self-attention softmax constant, so q and k get no gradient
    let (m, cf, h, w) = (dim(&mut r, 2, 4), dim(&mut r, 1, 4), dim(&mut r, 1, 3), dim(&mut r, 1, 3));
    let scaled = r.gen_bool(0.5);
    let mut store = ParamStore::new();
    let blk = randomized(&mut store, seed, |b| Ceb::build(b, "ceb", width, cf, heads, scaled).unwrap());
    let e = rand_tensor(&mut r, &[1, m, width], -1.0, 1.0);
    let f = rand_tensor(&mut r, &[1, cf, h, w], -1.0, 1.0);
    let inputs = with_params(&store, vec![e, f]);
    check(&inputs, |g, v| {
        let p = split_bound(v, 2);
        let y = blk.forward(g, &p, v[0], v[1])?;
        probe(g, y, seed)
    })
}

fn fuse_case(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (b, c, m) = (dim(&mut r, 1, 2), dim(&mut r, 1, 4), dim(&mut r, 1, 5));
    let (h, w) = (dim(&mut r, 1, 4), dim(&mut r, 1, 4));
    let shared = r.gen_bool(0.5);
    let e_shape = if shared { vec![m, c] } else { vec![b, m, c] };
    let inputs = [
        rand_tensor(&mut r, &[b, c, h, w], -1.0, 1.0),
        rand_tensor(&mut r, &e_shape, -1.0, 1.0),
    ];
    check(&inputs, |g, v| {
        let y = fuse(g, v[0], v[1])?;
        probe(g, y, seed)
    })
}

fn image_pair(r: &mut impl Rng) -> [Tensor<f64>; 2] {
    let (b, h, w) = (dim(r, 1, 2), dim(r, 4, 8), dim(r, 4, 8));
    [
        rand_tensor(r, &[b, 3, h, w], 0.0, 1.0),
        rand_tensor(r, &[b, 3, h, w], 0.0, 1.0),
    ]
}

fn ssim(seed: u64) -> f64 {
    let inputs = image_pair(&mut rng(seed));
    check(&inputs, |g, v| ssim_loss(g, v[0], v[1], &SsimParams::default()))
}

fn rec(seed: u64) -> f64 {
    let inputs = image_pair(&mut rng(seed));
    check(&inputs, |g, v| rec_loss(g, v[0], v[1]))
}

fn hist(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (b, bins) = (dim(&mut r, 1, 3), dim(&mut r, 2, 16));
    let inputs = [
        rand_tensor(&mut r, &[b, 3, bins], 0.0, 1.0),
        rand_tensor(&mut r, &[b, 3, bins], 0.0, 1.0),
    ];
    check(&inputs, |g, v| hist_loss(g, v[0], v[1]))
}

fn perceptual(seed: u64) -> f64 {
    let mut r = rng(seed);
    let b = dim(&mut r, 1, 2);
    let inputs = [
        rand_tensor(&mut r, &[b, 3, 8, 8], 0.0, 1.0),
        rand_tensor(&mut r, &[b, 3, 8, 8], 0.0, 1.0),
    ];
    let ext = PerceptualExtractor::random(seed);
    check(&inputs, |g, v| perceptual_loss(g, v[0], v[1], &ext))
}

/// Primitive operations.
pub fn op_cases() -> Vec<Case> {
    vec![
        Case { name: "conv2d", run: conv2d },
        Case { name: "matmul", run: matmul },
        Case { name: "linear", run: linear },
        Case { name: "softmax", run: softmax },
        Case { name: "layer_norm", run: layer_norm },
        Case { name: "activations", run: activations },
        Case { name: "trig_and_arith", run: trig_and_arith },
        Case { name: "polar", run: polar },
        Case { name: "fft2_ifft2", run: spectral },
        Case { name: "reductions", run: reductions },
        Case { name: "layout", run: layout },
        Case { name: "resampling", run: resampling },
    ]
}

/// Network blocks and losses.
pub fn block_cases() -> Vec<Case> {
    vec![
        Case { name: "fsrb", run: fsrb },
        Case { name: "ceb", run: ceb },
        Case { name: "fuse", run: fuse_case },
        Case { name: "ssim_loss", run: ssim },
        Case { name: "rec_loss", run: rec },
        Case { name: "hist_loss", run: hist },
        Case { name: "perceptual_loss", run: perceptual },
    ]
}
