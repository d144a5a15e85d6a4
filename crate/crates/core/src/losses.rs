//! Training objectives: windowed SSIM, L1 reconstruction, histogram L1,
//! frozen-feature perceptual distance, and their weighted sum.

use std::path::Path;

use crate::checkpoint::{self, Checkpoint, CheckpointError};
use crate::nn::{init_rng, Builder, Conv, Init, ParamStore};
use crate::tensor::{Graph, Real, Result, Tensor, TensorError, Var};

/// Windowed SSIM settings. Exponents on the luminance and contrast-structure
/// terms are both 1.
#[derive(Clone, Debug, PartialEq)]
pub struct SsimParams {
    /// Odd side of the Gaussian window.
    pub window: usize,
    pub sigma: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            window: 11,
            sigma: 1.5,
            c1: 0.01 * 0.01,
            c2: 0.03 * 0.03,
        }
    }
}

impl SsimParams {
    /// Window side used for an `h × w` image: the configured side, shrunk to
    /// the largest odd size that fits.
    pub fn window_for(&self, h: usize, w: usize) -> usize {
        let fit = h.min(w);
        let fit = if fit % 2 == 0 { fit - 1 } else { fit };
        self.window.min(fit).max(1)
    }
}

/// Normalized `size × size` Gaussian, row-major.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g1: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g1.iter().sum();
    let g1: Vec<f64> = g1.iter().map(|v| v / s).collect();
    let mut out = Vec::with_capacity(size * size);
    for a in &g1 {
        for b in &g1 {
            out.push(a * b);
        }
    }
    out
}

fn check_pair<T: Real>(g: &Graph<T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(TensorError::mismatch(op, g.shape(a), g.shape(b)));
    }
    Ok(())
}

/// Subtracts each plane's mean, held constant.
fn center_planes<T: Real>(g: &mut Graph<T>, v: Var) -> Result<Var> {
    let t = g.value(v);
    let n = t.shape()[2] * t.shape()[3];
    let mut shift = t.clone();
    for plane in shift.data_mut().chunks_mut(n) {
        let m = plane.iter().fold(T::zero(), |acc, &p| acc + p) / T::of(n as f64);
        plane.fill(m);
    }
    let shift = g.constant(shift)?;
    g.sub(v, shift)
}

/// Per-window SSIM index map, `[B·C, 1, H−k+1, W−k+1]`.
pub fn ssim_map<T: Real>(g: &mut Graph<T>, a: Var, b: Var, p: &SsimParams) -> Result<Var> {
    check_pair(g, "ssim", a, b)?;
    let s = g.shape(a).to_vec();
    if s.len() != 4 {
        return Err(TensorError::invalid("ssim", format!("expected [B, C, H, W], got {s:?}")));
    }
    let planes = [s[0] * s[1], 1, s[2], s[3]];
    let k = p.window_for(s[2], s[3]);
    let win = Tensor::new(&[1, 1, k, k], gaussian_window(k, p.sigma).into_iter().map(T::of).collect())?;
    let win = g.constant(win)?;
    let x = g.reshape(a, &planes)?;
    let y = g.reshape(b, &planes)?;

    let blur = |g: &mut Graph<T>, v: Var| g.conv2d(v, win, None, 1, 0);
    let mx = blur(g, x)?;
    let my = blur(g, y)?;
    let mx2 = g.mul(mx, mx)?;
    let my2 = g.mul(my, my)?;
    let mxy = g.mul(mx, my)?;

    // second moments of plane-centered copies; (co)variance is shift invariant
    let xc = center_planes(g, x)?;
    let yc = center_planes(g, y)?;
    let (bx, by) = (blur(g, xc)?, blur(g, yc)?);
    let xx = g.mul(xc, xc)?;
    let yy = g.mul(yc, yc)?;
    let xy = g.mul(xc, yc)?;
    let exx = blur(g, xx)?;
    let eyy = blur(g, yy)?;
    let exy = blur(g, xy)?;
    let bx2 = g.mul(bx, bx)?;
    let by2 = g.mul(by, by)?;
    let bxy = g.mul(bx, by)?;
    let vx = g.sub(exx, bx2)?;
    let vy = g.sub(eyy, by2)?;
    let cxy = g.sub(exy, bxy)?;

    let l_num = g.scale(mxy, T::of(2.0))?;
    let l_num = g.add_scalar(l_num, T::of(p.c1))?;
    let l_den = g.add(mx2, my2)?;
    let l_den = g.add_scalar(l_den, T::of(p.c1))?;
    let c_num = g.scale(cxy, T::of(2.0))?;
    let c_num = g.add_scalar(c_num, T::of(p.c2))?;
    let c_den = g.add(vx, vy)?;
    let c_den = g.add_scalar(c_den, T::of(p.c2))?;
    let num = g.mul(l_num, c_num)?;
    let den = g.mul(l_den, c_den)?;
    g.div(num, den)
}

/// `1 − mean SSIM`.
pub fn ssim_loss<T: Real>(g: &mut Graph<T>, a: Var, b: Var, p: &SsimParams) -> Result<Var> {
    let map = ssim_map(g, a, b, p)?;
    let m = g.mean(map)?;
    let neg = g.scale(m, T::of(-1.0))?;
    g.add_scalar(neg, T::one())
}

/// Mean absolute difference.
pub fn rec_loss<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    check_pair(g, "rec_loss", a, b)?;
    let d = g.sub(a, b)?;
    let d = g.abs(d)?;
    g.mean(d)
}

/// `(1 / (3 · bins)) Σ |H_pred − H_ref|`, averaged over the batch.
pub fn hist_loss<T: Real>(g: &mut Graph<T>, predicted: Var, reference: Var) -> Result<Var> {
    check_pair(g, "hist_loss", predicted, reference)?;
    rec_loss(g, predicted, reference)
}

/// Number of feature stages in [`PerceptualExtractor`].
pub const PERCEPTUAL_STAGES: usize = 3;
pub const PERCEPTUAL_WIDTHS: [usize; PERCEPTUAL_STAGES] = [8, 16, 32];
const PERCEPTUAL_SLOPE: f64 = 0.2;

/// Frozen feature extractor: three `3×3 conv → LeakyReLU → 2× average pool`
/// stages. Weights are seeded random by default and can be replaced from a
/// named-tensor file.
#[derive(Clone, Debug)]
pub struct PerceptualExtractor {
    store: ParamStore<f64>,
    stages: Vec<Conv>,
}

impl PerceptualExtractor {
    pub fn random(seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut rng = init_rng(seed);
        let mut b = Builder::new(&mut store, &mut rng);
        let mut stages = Vec::with_capacity(PERCEPTUAL_STAGES);
        let mut cin = 3;
        for (j, &c) in PERCEPTUAL_WIDTHS.iter().enumerate() {
            stages.push(
                b.conv(&format!("stage{j}"), cin, c, 3, 1, Init::FanIn)
                    .expect("fresh store has unique names"),
            );
            cin = c;
        }
        PerceptualExtractor { store, stages }
    }

    /// Replaces the weights with a same-layout table.
    pub fn with_table(mut self, table: &[checkpoint::NamedTensor]) -> Result<Self, CheckpointError> {
        checkpoint::load_into_store(&mut self.store, table)?;
        Ok(self)
    }

    /// Loads weights from a checkpoint-format file (its parameter table).
    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let ck = Checkpoint::load(path)?;
        Self::random(0).with_table(&ck.params)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        Checkpoint {
            params: checkpoint::table_from_store(&self.store),
            ..Default::default()
        }
        .save(path)
    }

    pub fn params(&self) -> &ParamStore<f64> {
        &self.store
    }

    /// Feature maps `Φ_1..Φ_3` of `x`.
    pub fn features<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Vec<Var>> {
        let p = self.store.cast::<T>().bind_frozen(g)?;
        let mut f = x;
        let mut out = Vec::with_capacity(self.stages.len());
        for conv in &self.stages {
            f = conv.forward(g, &p, f)?;
            f = g.leaky_relu(f, T::of(PERCEPTUAL_SLOPE))?;
            f = g.avg_pool2(f)?;
            out.push(f);
        }
        Ok(out)
    }
}

/// `Σ_j mean((Φ_j(a) − Φ_j(b))²)`.
pub fn perceptual_loss<T: Real>(g: &mut Graph<T>, a: Var, b: Var, ext: &PerceptualExtractor) -> Result<Var> {
    check_pair(g, "perceptual_loss", a, b)?;
    let fa = ext.features(g, a)?;
    let fb = ext.features(g, b)?;
    let mut total: Option<Var> = None;
    for (x, y) in fa.into_iter().zip(fb) {
        let d = g.sub(x, y)?;
        let d2 = g.mul(d, d)?;
        let m = g.mean(d2)?;
        total = Some(match total {
            None => m,
            Some(t) => g.add(t, m)?,
        });
    }
    Ok(total.expect("extractor has stages"))
}

/// Weights of the histogram and perceptual terms in the total loss.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 0.5, beta: 0.05 }
    }
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct LossTerms<V> {
    pub ssim: V,
    pub rec: V,
    pub hist: V,
    pub per: V,
}

impl LossTerms<f64> {
    /// `ssim + rec + α·hist + β·per`.
    pub fn total(&self, w: &LossWeights) -> f64 {
        self.ssim + self.rec + w.alpha * self.hist + w.beta * self.per
    }
}

impl LossTerms<Var> {
    pub fn values<T: Real>(&self, g: &Graph<T>) -> LossTerms<f64> {
        let v = |x: Var| g.value(x).data()[0].as_f64();
        LossTerms {
            ssim: v(self.ssim),
            rec: v(self.rec),
            hist: v(self.hist),
            per: v(self.per),
        }
    }
}

/// Differentiable `ssim + rec + α·hist + β·per`.
pub fn total_loss<T: Real>(g: &mut Graph<T>, terms: &LossTerms<Var>, w: &LossWeights) -> Result<Var> {
    let s = g.add(terms.ssim, terms.rec)?;
    let h = g.scale(terms.hist, T::of(w.alpha))?;
    let s = g.add(s, h)?;
    let p = g.scale(terms.per, T::of(w.beta))?;
    g.add(s, p)
}

/// All four terms for a prediction against its reference image and
/// reference histogram.
pub fn loss_terms<T: Real>(
    g: &mut Graph<T>,
    prediction: Var,
    reference: Var,
    predicted_hist: Var,
    reference_hist: Var,
    ssim: &SsimParams,
    ext: &PerceptualExtractor,
) -> Result<LossTerms<Var>> {
    Ok(LossTerms {
        ssim: ssim_loss(g, prediction, reference, ssim)?,
        rec: rec_loss(g, prediction, reference)?,
        hist: hist_loss(g, predicted_hist, reference_hist)?,
        per: perceptual_loss(g, prediction, reference, ext)?,
    })
}
