//! 2D Fourier transforms and amplitude/phase decomposition.
//!
//! Convention: the forward transform is unnormalized, so the DC coefficient
//! equals the plane's pixel sum; the inverse carries the `1/(H·W)` factor.
//! Power-of-two extents use an iterative radix-2 kernel, any other size falls
//! back to a direct DFT.

pub(crate) mod fft;

use crate::imageio::{Image, ImageError};
use crate::tensor::{Real, Tensor, TensorError};

/// Guard added inside the magnitude so phase adjoints stay defined at zero amplitude.
pub const PHASE_EPS: f64 = 1e-8;

#[derive(Debug, thiserror::Error)]
pub enum FourierError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
}

pub type Result<T, E = FourierError> = std::result::Result<T, E>;

/// Complex spectrum of a `[C, H, W]` stack of planes.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum<T> {
    pub re: Tensor<T>,
    pub im: Tensor<T>,
}

/// Polar form: amplitude `≥ 0` and phase in `(−π, π]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PolarSpectrum<T> {
    pub amplitude: Tensor<T>,
    pub phase: Tensor<T>,
}

fn plane_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(TensorError::invalid("fft2", format!("need at least two axes, got {shape:?}")).into());
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let planes = shape[..shape.len() - 2].iter().product();
    Ok((planes, h, w))
}

/// Forward transform over the last two axes.
pub fn fft2<T: Real>(img: &Tensor<T>) -> Result<Spectrum<T>> {
    let (planes, h, w) = plane_dims(img.shape())?;
    let (re, im) = fft::fft2_planes(img.data(), None, planes, h, w, false);
    Ok(Spectrum {
        re: Tensor::new(img.shape(), re)?,
        im: Tensor::new(img.shape(), im)?,
    })
}

/// Inverse transform; returns the real part and the largest discarded
/// imaginary magnitude.
pub fn ifft2_with_residue<T: Real>(s: &Spectrum<T>) -> Result<(Tensor<T>, f64)> {
    if s.re.shape() != s.im.shape() {
        return Err(FourierError::ShapeMismatch(s.re.shape().to_vec(), s.im.shape().to_vec()));
    }
    let (planes, h, w) = plane_dims(s.re.shape())?;
    let (re, im) = fft::fft2_planes(s.re.data(), Some(s.im.data()), planes, h, w, true);
    let norm = 1.0 / (h * w) as f64;
    let residue = im.iter().map(|v| v.abs().as_f64() * norm).fold(0.0, f64::max);
    let out = re.into_iter().map(|v| v * T::of(norm)).collect();
    Ok((Tensor::new(s.re.shape(), out)?, residue))
}

pub fn ifft2<T: Real>(s: &Spectrum<T>) -> Result<Tensor<T>> {
    Ok(ifft2_with_residue(s)?.0)
}

pub fn decompose<T: Real>(s: &Spectrum<T>, eps: f64) -> Result<PolarSpectrum<T>> {
    if s.re.shape() != s.im.shape() {
        return Err(FourierError::ShapeMismatch(s.re.shape().to_vec(), s.im.shape().to_vec()));
    }
    if eps <= 0.0 {
        return Err(TensorError::invalid("decompose", "eps must be positive").into());
    }
    let e2 = T::of(eps * eps);
    let amp = s
        .re
        .data()
        .iter()
        .zip(s.im.data())
        .map(|(&r, &i)| (r * r + i * i + e2).sqrt())
        .collect();
    let pha = s
        .re
        .data()
        .iter()
        .zip(s.im.data())
        .map(|(&r, &i)| i.atan2(r))
        .collect();
    Ok(PolarSpectrum {
        amplitude: Tensor::new(s.re.shape(), amp)?,
        phase: Tensor::new(s.re.shape(), pha)?,
    })
}

pub fn recompose<T: Real>(p: &PolarSpectrum<T>) -> Result<Spectrum<T>> {
    if p.amplitude.shape() != p.phase.shape() {
        return Err(FourierError::ShapeMismatch(
            p.amplitude.shape().to_vec(),
            p.phase.shape().to_vec(),
        ));
    }
    let (re, im): (Vec<T>, Vec<T>) = p
        .amplitude
        .data()
        .iter()
        .zip(p.phase.data())
        .map(|(&a, &f)| (a * f.cos(), a * f.sin()))
        .unzip();
    Ok(Spectrum {
        re: Tensor::new(p.amplitude.shape(), re)?,
        im: Tensor::new(p.amplitude.shape(), im)?,
    })
}

/// Reconstructions of `(amplitude a, phase b)` and `(amplitude b, phase a)`
/// before clipping, as `[3, H, W]` tensors.
pub fn swap_unclipped(a: &Image, b: &Image) -> Result<(Tensor<f64>, Tensor<f64>)> {
    if a.dims() != b.dims() {
        return Err(ImageError::ShapeMismatch(a.dims(), b.dims()).into());
    }
    let pa = decompose(&fft2(&a.to_chw::<f64>())?, PHASE_EPS)?;
    let pb = decompose(&fft2(&b.to_chw::<f64>())?, PHASE_EPS)?;
    let first = ifft2(&recompose(&PolarSpectrum {
        amplitude: pa.amplitude.clone(),
        phase: pb.phase.clone(),
    })?)?;
    let second = ifft2(&recompose(&PolarSpectrum {
        amplitude: pb.amplitude,
        phase: pa.phase,
    })?)?;
    Ok((first, second))
}

/// Amplitude/phase interchange between two images, clipped to `[0, 1]`.
pub fn swap_experiment(a: &Image, b: &Image) -> Result<(Image, Image)> {
    let (first, second) = swap_unclipped(a, b)?;
    Ok((Image::from_chw(&first)?, Image::from_chw(&second)?))
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Component {
    Amplitude,
    Phase,
}

impl std::str::FromStr for Component {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "amplitude" => Ok(Component::Amplitude),
            "phase" => Ok(Component::Phase),
            other => Err(format!("unknown component {other:?} (expected amplitude or phase)")),
        }
    }
}

/// Reconstruction from one component only, min-max normalized for display.
///
/// `Phase` keeps the phase with a constant amplitude plane (the image's mean
/// spectral amplitude); `Amplitude` keeps the amplitude with zero phase.
pub fn component_only(img: &Image, keep: Component) -> Result<Image> {
    let polar = decompose(&fft2(&img.to_chw::<f64>())?, PHASE_EPS)?;
    let shape = polar.amplitude.shape().to_vec();
    let replaced = match keep {
        Component::Phase => PolarSpectrum {
            amplitude: Tensor::full(&shape, polar.amplitude.mean()),
            phase: polar.phase,
        },
        Component::Amplitude => PolarSpectrum {
            amplitude: polar.amplitude,
            phase: Tensor::zeros(&shape),
        },
    };
    let recon = ifft2(&recompose(&replaced)?)?;
    Ok(Image::from_chw(&min_max_normalize(&recon))?)
}

/// Rescales all values jointly to `[0, 1]`. An input flat to within `1e-6`
/// of its scale maps to its clamped self, so guard-level residue from the
/// amplitude `eps` is not blown up.
pub fn min_max_normalize(t: &Tensor<f64>) -> Tensor<f64> {
    let lo = t.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = t.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if span <= 1e-6 * hi.abs().max(lo.abs()).max(1.0) {
        return t.map(|v| v.clamp(0.0, 1.0));
    }
    t.map(|v| (v - lo) / span)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_plane_has_only_dc() {
        let c = 0.3;
        let t = Tensor::<f64>::full(&[1, 8, 4], c);
        let s = fft2(&t).unwrap();
        let scale = c * 32.0;
        assert!((s.re.data()[0] - scale).abs() < 1e-12);
        for k in 1..32 {
            assert!(s.re.data()[k].abs() < 1e-6 * scale);
            assert!(s.im.data()[k].abs() < 1e-6 * scale);
        }
    }

    #[test]
    fn impulse_has_flat_spectrum() {
        let mut t = Tensor::<f64>::zeros(&[1, 4, 8]);
        t.data_mut()[0] = 1.0;
        let s = fft2(&t).unwrap();
        assert!(s.re.data().iter().all(|v| (v - 1.0).abs() < 1e-12));
        assert!(s.im.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn zero_spectrum_inverts_to_zero() {
        let z = Spectrum {
            re: Tensor::<f64>::zeros(&[2, 4, 4]),
            im: Tensor::zeros(&[2, 4, 4]),
        };
        assert!(ifft2(&z).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn odd_sizes_use_direct_path() {
        let t = Tensor::<f64>::from_fn(&[1, 3, 5], |i| (i as f64 * 0.37).sin());
        let s = fft2(&t).unwrap();
        let (back, residue) = ifft2_with_residue(&s).unwrap();
        assert!(back.max_abs_diff(&t) < 1e-12);
        assert!(residue < 1e-12);
    }

    #[test]
    fn zero_amplitude_recomposes_to_zero() {
        let p = PolarSpectrum {
            amplitude: Tensor::<f64>::zeros(&[1, 2, 2]),
            phase: Tensor::from_fn(&[1, 2, 2], |i| i as f64),
        };
        let s = recompose(&p).unwrap();
        assert!(s.re.data().iter().chain(s.im.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn component_parsing() {
        assert_eq!("phase".parse::<Component>().unwrap(), Component::Phase);
        assert!("both".parse::<Component>().is_err());
    }
}
