//! Frequency Spatial Residual Block and the U-shaped network built from it.
//!
//! An FSRB splits its channels in two contiguous halves. The first half goes
//! through the frequency path: FFT, amplitude and phase each refined by
//! `1×1 conv → LeakyReLU → 1×1 conv`, recombined, inverse FFT (real part),
//! plus the half itself. The second half goes through
//! `3×3 conv → GELU → 3×3 conv` plus itself. The halves are concatenated.

use crate::fourier::PHASE_EPS;
use crate::nn::{Bound, Builder, Conv, Init};
use crate::tensor::{Graph, Real, Result, TensorError, Var};

/// Default negative slope of the frequency-path LeakyReLU.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Debug)]
pub struct Fsrb {
    pub channels: usize,
    /// Channels routed through the frequency path, `⌊C/2⌋`.
    pub freq_channels: usize,
    pub amp1: Conv,
    pub amp2: Conv,
    pub pha1: Conv,
    pub pha2: Conv,
    pub spa1: Conv,
    pub spa2: Conv,
    pub slope: f64,
}

impl Fsrb {
    /// The last convolution of each residual branch starts at zero, so a fresh
    /// block is the identity map.
    pub fn build<T: Real>(b: &mut Builder<'_, T>, name: &str, channels: usize) -> Result<Self> {
        if channels < 2 {
            return Err(TensorError::invalid("fsrb", format!("needs at least 2 channels, got {channels}")));
        }
        let cf = channels / 2;
        let cs = channels - cf;
        b.scope(name, |b| {
            Ok(Fsrb {
                channels,
                freq_channels: cf,
                amp1: b.conv("amp1", cf, cf, 1, 1, Init::FanIn)?,
                amp2: b.conv("amp2", cf, cf, 1, 1, Init::Zero)?,
                pha1: b.conv("pha1", cf, cf, 1, 1, Init::FanIn)?,
                pha2: b.conv("pha2", cf, cf, 1, 1, Init::Zero)?,
                spa1: b.conv("spa1", cs, cs, 3, 1, Init::FanIn)?,
                spa2: b.conv("spa2", cs, cs, 3, 1, Init::Zero)?,
                slope: LEAKY_SLOPE,
            })
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.channels {
            return Err(TensorError::invalid(
                "fsrb",
                format!("expected [B, {}, H, W], got {s:?}", self.channels),
            ));
        }
        let cf = self.freq_channels;
        let xf = g.narrow(x, 1, 0, cf)?;
        let xs = g.narrow(x, 1, cf, self.channels - cf)?;
        let slope = T::of(self.slope);

        let (re, im) = g.fft2(xf)?;
        let amp = g.magnitude(re, im, T::of(PHASE_EPS))?;
        let pha = g.atan2(im, re, T::of(PHASE_EPS))?;
        let a = self.amp1.forward(g, p, amp)?;
        let a = g.leaky_relu(a, slope)?;
        let a = self.amp2.forward(g, p, a)?;
        let f = self.pha1.forward(g, p, pha)?;
        let f = g.leaky_relu(f, slope)?;
        let f = self.pha2.forward(g, p, f)?;
        let (cos, sin) = (g.cos(f)?, g.sin(f)?);
        let re2 = g.mul(a, cos)?;
        let im2 = g.mul(a, sin)?;
        let back = g.ifft2(re2, im2)?;
        let yf = g.add(back, xf)?;

        let t = self.spa1.forward(g, p, xs)?;
        let t = g.gelu(t)?;
        let t = self.spa2.forward(g, p, t)?;
        let ys = g.add(t, xs)?;

        g.concat(&[yf, ys], 1)
    }
}

#[derive(Clone, Debug)]
struct DecoderStage {
    up: Conv,
    merge: Conv,
    block: Fsrb,
}

/// Encoder–decoder with three 2× downsamplings, an FSRB bottleneck, three
/// 2× upsamplings with skip concatenation, and a sigmoid image head.
#[derive(Clone, Debug)]
pub struct UNet {
    pub base_width: usize,
    stem: Conv,
    enc: Vec<(Fsrb, Conv)>,
    bottleneck: Fsrb,
    dec: Vec<DecoderStage>,
    head: Conv,
}

/// Encoder outputs kept for the decoder.
pub struct Encoded {
    pub bottleneck: Var,
    /// Skips ordered from full resolution to 1/4.
    pub skips: Vec<Var>,
}

pub const STAGES: usize = 3;

impl UNet {
    pub fn build<T: Real>(b: &mut Builder<'_, T>, name: &str, base_width: usize) -> Result<Self> {
        if base_width < 2 {
            return Err(TensorError::invalid("unet", "base width must be at least 2"));
        }
        b.scope(name, |b| {
            let stem = b.conv("stem", 3, base_width, 3, 1, Init::FanIn)?;
            let mut enc = Vec::with_capacity(STAGES);
            for s in 0..STAGES {
                let c = base_width << s;
                let block = Fsrb::build(b, &format!("enc{s}.block"), c)?;
                let down = b.conv(&format!("enc{s}.down"), c, 2 * c, 3, 2, Init::FanIn)?;
                enc.push((block, down));
            }
            let bottleneck = Fsrb::build(b, "bottleneck", base_width << STAGES)?;
            let mut dec = Vec::with_capacity(STAGES);
            for s in (0..STAGES).rev() {
                let c = base_width << s;
                dec.push(DecoderStage {
                    up: b.conv(&format!("dec{s}.up"), 2 * c, c, 3, 1, Init::FanIn)?,
                    merge: b.conv(&format!("dec{s}.merge"), 2 * c, c, 1, 1, Init::FanIn)?,
                    block: Fsrb::build(b, &format!("dec{s}.block"), c)?,
                });
            }
            let head = b.conv("head", base_width, 3, 3, 1, Init::FanIn)?;
            Ok(UNet {
                base_width,
                stem,
                enc,
                bottleneck,
                dec,
                head,
            })
        })
    }

    pub fn bottleneck_width(&self) -> usize {
        self.base_width << STAGES
    }

    pub fn encode<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Encoded> {
        check_extent(g.shape(x))?;
        let mut f = self.stem.forward(g, p, x)?;
        let mut skips = Vec::with_capacity(STAGES);
        for (block, down) in &self.enc {
            f = block.forward(g, p, f)?;
            skips.push(f);
            f = down.forward(g, p, f)?;
        }
        let bottleneck = self.bottleneck.forward(g, p, f)?;
        Ok(Encoded { bottleneck, skips })
    }

    /// Decodes from bottleneck-width features using the encoder skips.
    pub fn decode<T: Real>(&self, g: &mut Graph<T>, p: &Bound, features: Var, skips: &[Var]) -> Result<Var> {
        if skips.len() != STAGES {
            return Err(TensorError::invalid("unet", format!("expected {STAGES} skips, got {}", skips.len())));
        }
        let mut f = features;
        for (stage, skip) in self.dec.iter().zip(skips.iter().rev()) {
            let up = g.upsample2(f)?;
            let up = stage.up.forward(g, p, up)?;
            let cat = g.concat(&[up, *skip], 1)?;
            let merged = stage.merge.forward(g, p, cat)?;
            f = stage.block.forward(g, p, merged)?;
        }
        let out = self.head.forward(g, p, f)?;
        g.sigmoid(out)
    }

    /// Coarse enhancement `ŷ` of a `[B, 3, H, W]` batch.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let enc = self.encode(g, p, x)?;
        self.decode(g, p, enc.bottleneck, &enc.skips)
    }

    /// Every FSRB in encoder, bottleneck, decoder order.
    pub fn blocks(&self) -> Vec<&Fsrb> {
        self.enc
            .iter()
            .map(|(b, _)| b)
            .chain(std::iter::once(&self.bottleneck))
            .chain(self.dec.iter().map(|d| &d.block))
            .collect()
    }

    /// Convolutions that halve the spatial extent.
    pub fn downsamplers(&self) -> Vec<&Conv> {
        self.enc.iter().map(|(_, d)| d).collect()
    }

    /// Convolutions that follow each 2× upsampling.
    pub fn upsamplers(&self) -> Vec<&Conv> {
        self.dec.iter().map(|d| &d.up).collect()
    }
}

/// Spatial extents must be powers of two and divisible by 8.
pub fn check_extent(shape: &[usize]) -> Result<()> {
    if shape.len() != 4 || shape[1] != 3 {
        return Err(TensorError::invalid("unet", format!("expected [B, 3, H, W], got {shape:?}")));
    }
    let (h, w) = (shape[2], shape[3]);
    let ok = |d: usize| d >= 8 && d % 8 == 0 && d.is_power_of_two();
    if !ok(h) || !ok(w) {
        return Err(TensorError::invalid(
            "unet",
            format!("spatial extent {h}x{w} must be a power of two divisible by 8"),
        ));
    }
    Ok(())
}
