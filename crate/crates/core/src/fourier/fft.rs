//! Line and plane transforms: iterative radix-2 for power-of-two lengths,
//! direct DFT otherwise. Both directions are unnormalized here.

use std::f64::consts::PI;

use crate::par;
use crate::tensor::Real;

enum Kernel {
    Radix2 { rev: Vec<usize> },
    Direct,
    Trivial,
}

/// Precomputed twiddles for one transform length and direction.
pub(crate) struct LinePlan<T> {
    n: usize,
    // exp(sign * 2πi k / n) for k in 0..n
    cos: Vec<T>,
    sin: Vec<T>,
    kernel: Kernel,
}

impl<T: Real> LinePlan<T> {
    pub(crate) fn new(n: usize, inverse: bool) -> Self {
        let sign = if inverse { 1.0 } else { -1.0 };
        let (cos, sin): (Vec<T>, Vec<T>) = (0..n)
            .map(|k| {
                let a = sign * 2.0 * PI * k as f64 / n as f64;
                (T::of(a.cos()), T::of(a.sin()))
            })
            .unzip();
        let kernel = if n == 1 {
            Kernel::Trivial
        } else if n.is_power_of_two() {
            let bits = n.trailing_zeros();
            let rev = (0..n).map(|i| i.reverse_bits() >> (usize::BITS - bits)).collect();
            Kernel::Radix2 { rev }
        } else {
            Kernel::Direct
        };
        LinePlan { n, cos, sin, kernel }
    }

    /// Transforms one line in place; `scratch` must hold `n` entries.
    pub(crate) fn run(&self, buf: &mut [[T; 2]], scratch: &mut [[T; 2]]) {
        debug_assert_eq!(buf.len(), self.n);
        match &self.kernel {
            Kernel::Trivial => {}
            Kernel::Radix2 { rev } => {
                for i in 0..self.n {
                    let j = rev[i];
                    if j > i {
                        buf.swap(i, j);
                    }
                }
                let mut len = 2;
                while len <= self.n {
                    let half = len / 2;
                    let step = self.n / len;
                    for start in (0..self.n).step_by(len) {
                        for j in 0..half {
                            let (wr, wi) = (self.cos[j * step], self.sin[j * step]);
                            let [ur, ui] = buf[start + j];
                            let [xr, xi] = buf[start + j + half];
                            let vr = xr * wr - xi * wi;
                            let vi = xr * wi + xi * wr;
                            buf[start + j] = [ur + vr, ui + vi];
                            buf[start + j + half] = [ur - vr, ui - vi];
                        }
                    }
                    len *= 2;
                }
            }
            Kernel::Direct => {
                for (k, s) in scratch.iter_mut().enumerate().take(self.n) {
                    let mut acc = [T::zero(), T::zero()];
                    for (j, &[xr, xi]) in buf.iter().enumerate() {
                        let t = (j * k) % self.n;
                        let (wr, wi) = (self.cos[t], self.sin[t]);
                        acc[0] += xr * wr - xi * wi;
                        acc[1] += xr * wi + xi * wr;
                    }
                    *s = acc;
                }
                buf.copy_from_slice(&scratch[..self.n]);
            }
        }
    }
}

/// 2D transform over the last two axes of `[planes, h, w]` data.
/// `im = None` treats the input as real.
pub(crate) fn fft2_planes<T: Real>(
    re: &[T],
    im: Option<&[T]>,
    planes: usize,
    h: usize,
    w: usize,
    inverse: bool,
) -> (Vec<T>, Vec<T>) {
    let plane = h * w;
    let mut buf: Vec<[T; 2]> = match im {
        Some(im) => re.iter().zip(im).map(|(&r, &i)| [r, i]).collect(),
        None => re.iter().map(|&r| [r, T::zero()]).collect(),
    };
    debug_assert_eq!(buf.len(), planes * plane);
    let row_plan = LinePlan::<T>::new(w, inverse);
    let col_plan = LinePlan::<T>::new(h, inverse);
    par::for_each_chunk(&mut buf, plane, |_, p| {
        let mut scratch = vec![[T::zero(); 2]; h.max(w)];
        for row in p.chunks_mut(w) {
            row_plan.run(row, &mut scratch);
        }
        let mut col = vec![[T::zero(); 2]; h];
        for x in 0..w {
            for y in 0..h {
                col[y] = p[y * w + x];
            }
            col_plan.run(&mut col, &mut scratch);
            for y in 0..h {
                p[y * w + x] = col[y];
            }
        }
    });
    buf.into_iter().map(|[r, i]| (r, i)).unzip()
}
