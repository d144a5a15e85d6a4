//! Full-reference (PSNR, SSIM, MSE) and no-reference (UIQM, UCIQE) image
//! quality measures.
//!
//! UIQM and UCIQE have several published variants. The constants below pin
//! the ones used here; scores are comparable only with this implementation.

use std::fmt::Write as _;

use crate::imageio::Image;
use crate::losses::{ssim_loss, SsimParams};
use crate::par;
use crate::tensor::{Graph, Result, TensorError};

pub const PSNR_CAP: f64 = 100.0;
const PSNR_MSE_FLOOR: f64 = 1e-10;

/// UIQM coefficients for colorfulness, sharpness and contrast.
pub const UIQM_C: [f64; 3] = [0.0282, 0.2953, 3.5753];
/// Fraction trimmed from each end of the sorted opponent-channel values.
pub const UICM_TRIM: f64 = 0.1;
/// Block side for the EME and logAMEE measures.
pub const UIQM_BLOCK: usize = 8;
/// Luma weights combining per-channel sharpness.
pub const UISM_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// UCIQE coefficients for chroma spread, luminance contrast and saturation.
pub const UCIQE_C: [f64; 3] = [0.4680, 0.2745, 0.2576];
/// Luminance percentiles bounding the contrast term.
pub const UCIQE_PERCENTILES: (f64, f64) = (0.01, 0.99);
/// Linear sRGB to XYZ.
pub const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.412453, 0.357580, 0.180423],
    [0.212671, 0.715160, 0.072169],
    [0.019334, 0.119193, 0.950227],
];

fn check_dims(a: &Image, b: &Image) -> Result<()> {
    if a.dims() != b.dims() {
        let (ha, wa) = a.dims();
        let (hb, wb) = b.dims();
        return Err(TensorError::mismatch("metric", &[ha, wa, 3], &[hb, wb, 3]));
    }
    Ok(())
}

/// Mean squared error, accumulated with Neumaier compensation.
pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_dims(a, b)?;
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for (&p, &q) in a.data().iter().zip(b.data()) {
        let d = (p - q) * (p - q);
        let t = sum + d;
        comp += if sum.abs() >= d.abs() { (sum - t) + d } else { (d - t) + sum };
        sum = t;
    }
    Ok((sum + comp) / a.data().len() as f64)
}

/// `10·log10(1 / mse)` for unit range, capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn psnr_from_mse(m: f64) -> f64 {
    if m < PSNR_MSE_FLOOR {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / m).log10()).min(PSNR_CAP)
    }
}

/// Mean windowed SSIM, `1 − ssim_loss`.
pub fn ssim_index(a: &Image, b: &Image) -> Result<f64> {
    check_dims(a, b)?;
    let mut g = Graph::<f64>::new();
    let x = g.constant(a.to_chw::<f64>().reshape(&[1, 3, a.height(), a.width()])?)?;
    let y = g.constant(b.to_chw::<f64>().reshape(&[1, 3, b.height(), b.width()])?)?;
    let l = ssim_loss(&mut g, x, y, &SsimParams::default())?;
    Ok(1.0 - g.value(l).data()[0])
}

/// Channel planes on a 0–255 scale.
fn planes255(img: &Image) -> [Vec<f64>; 3] {
    let mut out: [Vec<f64>; 3] = Default::default();
    for px in img.data().chunks(3) {
        for c in 0..3 {
            out[c].push(px[c] * 255.0);
        }
    }
    out
}

/// Mean of the sorted values after dropping `ceil(α_L·K)` from the bottom
/// and `floor(α_R·K)` from the top.
pub fn trimmed_mean(values: &[f64], alpha_low: f64, alpha_high: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let k = v.len();
    let lo = (alpha_low * k as f64).ceil() as usize;
    let hi = (alpha_high * k as f64).floor() as usize;
    if lo + hi >= k {
        return 0.0;
    }
    let kept = &v[lo..k - hi];
    kept.iter().sum::<f64>() / kept.len() as f64
}

/// Colorfulness from opponent channels `RG = R − G`, `YB = (R + G)/2 − B`.
pub fn uicm(img: &Image) -> f64 {
    let [r, g, b] = planes255(img);
    let rg: Vec<f64> = r.iter().zip(&g).map(|(r, g)| r - g).collect();
    let yb: Vec<f64> = r.iter().zip(&g).zip(&b).map(|((r, g), b)| (r + g) / 2.0 - b).collect();
    let stats = |v: &[f64]| {
        let mu = trimmed_mean(v, UICM_TRIM, UICM_TRIM);
        let var = v.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / v.len() as f64;
        (mu, var)
    };
    let (mrg, vrg) = stats(&rg);
    let (myb, vyb) = stats(&yb);
    -0.0268 * (mrg * mrg + myb * myb).sqrt() + 0.1586 * (vrg + vyb).sqrt()
}

/// Symmetric (edge-repeating) reflection of an out-of-range index.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Sobel gradient magnitude, rescaled so its maximum is 255.
pub fn sobel_magnitude(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let at = |y: isize, x: isize| plane[reflect(y, h) * w + reflect(x, w)];
    let mut mag = Vec::with_capacity(h * w);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            mag.push(gx.hypot(gy));
        }
    }
    let max = mag.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        mag.iter_mut().for_each(|m| *m *= 255.0 / max);
    }
    mag
}

/// Visits the full `block × block` tiles; returns how many there were.
fn for_blocks(h: usize, w: usize, block: usize, mut f: impl FnMut(usize, usize)) -> usize {
    let (by, bx) = (h / block, w / block);
    for i in 0..by {
        for j in 0..bx {
            f(i * block, j * block);
        }
    }
    by * bx
}

/// `(2 / K) Σ ln(max / min)` over blocks with non-zero extrema.
pub fn eme(plane: &[f64], h: usize, w: usize, block: usize) -> f64 {
    let mut acc = 0.0;
    let k = for_blocks(h, w, block, |y0, x0| {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for y in y0..y0 + block {
            for &v in &plane[y * w + x0..y * w + x0 + block] {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        if lo > 0.0 && hi > 0.0 {
            acc += (hi / lo).ln();
        }
    });
    if k == 0 {
        0.0
    } else {
        2.0 / k as f64 * acc
    }
}

/// Sharpness: luma-weighted EME of each channel times its edge map.
pub fn uism(img: &Image) -> f64 {
    let (h, w) = img.dims();
    planes255(img)
        .iter()
        .zip(UISM_WEIGHTS)
        .map(|(p, lambda)| {
            let edges: Vec<f64> = sobel_magnitude(p, h, w).iter().zip(p).map(|(m, v)| m * v).collect();
            lambda * eme(&edges, h, w, UIQM_BLOCK)
        })
        .sum()
}

/// Contrast: `−(1/K) Σ r·ln r` with `r = (max − min)/(max + min)` over
/// blocks spanning all three channels; degenerate blocks contribute 0.
pub fn uiconm(img: &Image) -> f64 {
    let (h, w) = img.dims();
    let planes = planes255(img);
    let mut acc = 0.0;
    let k = for_blocks(h, w, UIQM_BLOCK, |y0, x0| {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for p in &planes {
            for y in y0..y0 + UIQM_BLOCK {
                for &v in &p[y * w + x0..y * w + x0 + UIQM_BLOCK] {
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
        }
        let (top, bot) = (hi - lo, hi + lo);
        if top > 0.0 && bot > 0.0 {
            let r = top / bot;
            acc += r * r.ln();
        }
    });
    if k == 0 {
        0.0
    } else {
        -acc / k as f64
    }
}

pub fn uiqm(img: &Image) -> f64 {
    UIQM_C[0] * uicm(img) + UIQM_C[1] * uism(img) + UIQM_C[2] * uiconm(img)
}

fn srgb_to_linear(v: f64) -> f64 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

fn lab_f(t: f64) -> f64 {
    const D: f64 = 6.0 / 29.0;
    if t > D * D * D {
        t.cbrt()
    } else {
        t / (3.0 * D * D) + 4.0 / 29.0
    }
}

/// CIE Lab of an sRGB pixel, with the white point taken as the XYZ of
/// RGB white so that grays have exactly zero chroma.
pub fn srgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(srgb_to_linear);
    let mut xyz = [0.0; 3];
    for (row, out) in RGB_TO_XYZ.iter().zip(&mut xyz) {
        let white: f64 = row.iter().sum();
        *out = row.iter().zip(&lin).map(|(m, v)| m * v).sum::<f64>() / white;
    }
    let [fx, fy, fz] = xyz.map(lab_f);
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// Value at sorted position `floor(q·(n − 1))`.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    sorted[((q * (sorted.len() - 1) as f64).floor() as usize).min(sorted.len() - 1)]
}

/// `c1·σ_chroma + c2·(L_p99 − L_p1) + c3·mean(chroma / L)` with `L`, `a`, `b`
/// divided by 100. Saturation is 0 where `L = 0`.
pub fn uciqe(img: &Image) -> f64 {
    let n = img.data().len() / 3;
    let mut l = Vec::with_capacity(n);
    let mut chroma = Vec::with_capacity(n);
    let mut sat_sum = 0.0;
    for px in img.data().chunks(3) {
        let [ll, a, b] = srgb_to_lab([px[0], px[1], px[2]]);
        let (ll, a, b) = (ll / 100.0, a / 100.0, b / 100.0);
        let c = (a * a + b * b).sqrt();
        if ll > 0.0 {
            sat_sum += c / ll;
        }
        l.push(ll);
        chroma.push(c);
    }
    let mean_c = chroma.iter().sum::<f64>() / n as f64;
    let std_c = (chroma.iter().map(|c| (c - mean_c) * (c - mean_c)).sum::<f64>() / n as f64).sqrt();
    l.sort_by(f64::total_cmp);
    let contrast = percentile(&l, UCIQE_PERCENTILES.1) - percentile(&l, UCIQE_PERCENTILES.0);
    UCIQE_C[0] * std_c + UCIQE_C[1] * contrast + UCIQE_C[2] * sat_sum / n as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub mse: f64,
    pub uiqm: f64,
    pub uciqe: f64,
}

impl MetricRow {
    /// Full-reference scores of `prediction` against `reference`, and
    /// no-reference scores of `prediction`.
    pub fn compute(id: impl Into<String>, prediction: &Image, reference: &Image) -> Result<Self> {
        let m = mse(prediction, reference)?;
        Ok(MetricRow {
            id: id.into(),
            psnr: psnr_from_mse(m),
            ssim: ssim_index(prediction, reference)?,
            mse: m,
            uiqm: uiqm(prediction),
            uciqe: uciqe(prediction),
        })
    }
}

/// Per-image scores and their dataset means.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

pub const CSV_HEADER: &str = "id,psnr,ssim,mse,uiqm,uciqe";

impl MetricReport {
    /// Scores `(id, prediction, reference)` triples in parallel, keeping input order.
    pub fn evaluate(items: &[(String, Image, Image)]) -> Result<Self> {
        let rows = par::map_collect(items.len(), |i| {
            let (id, p, r) = &items[i];
            MetricRow::compute(id.clone(), p, r)
        });
        Ok(MetricReport {
            rows: rows.into_iter().collect::<Result<_>>()?,
        })
    }

    pub fn mean(&self) -> Option<MetricRow> {
        if self.rows.is_empty() {
            return None;
        }
        let n = self.rows.len() as f64;
        let avg = |f: fn(&MetricRow) -> f64| self.rows.iter().map(f).sum::<f64>() / n;
        Some(MetricRow {
            id: "mean".into(),
            psnr: avg(|r| r.psnr),
            ssim: avg(|r| r.ssim),
            mse: avg(|r| r.mse),
            uiqm: avg(|r| r.uiqm),
            uciqe: avg(|r| r.uciqe),
        })
    }

    /// Header, one line per image, then the `mean` line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in self.rows.iter().chain(self.mean().as_ref()) {
            writeln!(
                s,
                "{},{:.6},{:.6},{:.9},{:.6},{:.6}",
                r.id, r.psnr, r.ssim, r.mse, r.uiqm, r.uciqe
            )
            .expect("writing to a String");
        }
        s
    }

    /// Aligned table of the means, with MSE also shown ×10³.
    pub fn summary(&self) -> String {
        match self.mean() {
            None => "no images evaluated".into(),
            Some(m) => format!(
                "images {}\npsnr   {:.4} dB\nssim   {:.4}\nmse    {:.6} (x1e3 {:.4})\nuiqm   {:.4}\nuciqe  {:.4}",
                self.rows.len(),
                m.psnr,
                m.ssim,
                m.mse,
                m.mse * 1e3,
                m.uiqm,
                m.uciqe
            ),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_cap_and_uniform_offset() {
        let a = Image::constant(8, 8, 0.5);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        assert_eq!(psnr_from_mse(0.01), 20.0);
    }

    #[test]
    fn reflect_repeats_edges() {
        assert_eq!(reflect(-1, 4), 0);
        assert_eq!(reflect(-2, 4), 1);
        assert_eq!(reflect(4, 4), 3);
        assert_eq!(reflect(5, 4), 2);
    }

    #[test]
    fn trimmed_mean_drops_outliers() {
        let v: Vec<f64> = (0..10).map(|i| if i == 9 { 1000.0 } else { i as f64 }).collect();
        assert_eq!(trimmed_mean(&v, 0.1, 0.1), (1..9).sum::<i32>() as f64 / 8.0);
    }

    #[test]
    fn gray_is_achromatic() {
        for v in [0.0, 0.2, 0.5, 1.0] {
            let [l, a, b] = srgb_to_lab([v; 3]);
            assert!(a.abs() < 1e-9 && b.abs() < 1e-9, "{v}: {a} {b}");
            assert!((0.0..=100.0 + 1e-9).contains(&l));
        }
    }

    #[test]
    fn csv_has_fixed_columns_and_mean_row() {
        let a = Image::constant(8, 8, 0.25);
        let b = Image::constant(8, 8, 0.35);
        let rep = MetricReport::evaluate(&[("a".into(), a.clone(), a), ("b".into(), b.clone(), b)]).unwrap();
        let csv = rep.to_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines.len(), 4);
        assert!(lines[3].starts_with("mean,100.000000,1.000000,0.000000000"));
    }
}
