//! Central finite-difference checks of recorded adjoints.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Real, Result, Tensor, TensorError, Var};

/// Which coordinates of each input to probe.
#[derive(Copy, Clone, Debug)]
pub enum Coverage {
    All,
    /// Fraction in (0, 1] of every input's coordinates, at least one each.
    Sample { fraction: f64, seed: u64 },
}

/// Maximum over inputs of the norm-wise relative error
/// `‖analytic − central‖ / (‖analytic‖ + ‖central‖ + 1e-12)` on the probed
/// coordinates. Coordinates with a vanishing true gradient would otherwise be
/// scored on roundoff alone; likewise an input whose gradient vanishes
/// entirely is measured against `1e-4` of the gradient norm over all inputs.
pub fn check_gradients<T, F>(f: F, inputs: &[Tensor<T>], h: f64, coverage: Coverage) -> Result<f64>
where
    T: Real,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(TensorError::invalid("finite_diff_check", "h must be positive"));
    }
    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| g.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let eval = |probe: &[Tensor<T>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars = probe
            .iter()
            .map(|t| g.constant(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data()[0].as_f64())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(match coverage {
        Coverage::All => 0,
        Coverage::Sample { seed, .. } => seed,
    });
    let mut parts = Vec::with_capacity(vars.len());
    let mut probe: Vec<Tensor<T>> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let n = inputs[i].len();
        let coords: Vec<usize> = match coverage {
            Coverage::All => (0..n).collect(),
            Coverage::Sample { fraction, .. } => {
                let k = ((n as f64 * fraction).ceil() as usize).clamp(1, n);
                sample(&mut rng, n, k).into_vec()
            }
        };
        let zeros;
        let analytic = match grads.get(*var) {
            Some(t) => t.data(),
            None => {
                zeros = vec![T::zero(); n];
                &zeros
            }
        };
        let (mut diff, mut na, mut nc) = (0.0f64, 0.0f64, 0.0f64);
        for c in coords {
            let orig = inputs[i].data()[c];
            probe[i].data_mut()[c] = orig + T::of(h);
            let up = eval(&probe)?;
            probe[i].data_mut()[c] = orig - T::of(h);
            let down = eval(&probe)?;
            probe[i].data_mut()[c] = orig;
            let central = (up - down) / (2.0 * h);
            let a = analytic[c].as_f64();
            diff += (a - central).powi(2);
            na += a * a;
            nc += central * central;
        }
        parts.push((diff.sqrt(), na.sqrt() + nc.sqrt()));
    }
    let total = parts.iter().map(|p| p.1 * p.1).sum::<f64>().sqrt();
    let floor = 1e-4 * total + 1e-12;
    Ok(parts.iter().map(|&(d, n)| d / n.max(floor)).fold(0.0, f64::max))
}

/// Single-input form of [`check_gradients`] over every coordinate.
pub fn finite_diff_check<T, F>(f: F, x: &Tensor<T>, h: f64) -> Result<f64>
where
    T: Real,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    check_gradients(|g, v| f(g, v[0]), std::slice::from_ref(x), h, Coverage::All)
}
