//! Central finite-difference gradient checking.

use rand::Rng;

use crate::tensor::{Result, Tape, Tensor, Var};

/// Step used for central differences.
pub const STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradEntry {
    pub input: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradEntry {
    pub fn abs_error(&self) -> f64 {
        (self.analytic - self.numeric).abs()
    }

    pub fn rel_error(&self) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs());
        if scale == 0.0 {
            0.0
        } else {
            self.abs_error() / scale
        }
    }

    /// Passes when the relative error is under `rel`, or the absolute error
    /// is under `abs` (for entries whose true gradient is near zero).
    pub fn passes(&self, rel: f64, abs: f64) -> bool {
        self.rel_error() < rel || self.abs_error() < abs
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradReport {
    pub entries: Vec<GradEntry>,
}

impl GradReport {
    pub fn passed(&self, rel: f64, abs: f64) -> bool {
        self.entries.iter().all(|e| e.passes(rel, abs))
    }

    pub fn failures(&self, rel: f64, abs: f64) -> Vec<&GradEntry> {
        self.entries.iter().filter(|e| !e.passes(rel, abs)).collect()
    }

    /// Entry with the largest relative error among those above the absolute floor.
    pub fn worst(&self, abs: f64) -> Option<&GradEntry> {
        self.entries
            .iter()
            .filter(|e| e.abs_error() >= abs)
            .max_by(|a, b| a.rel_error().total_cmp(&b.rel_error()))
    }
}

/// Numeric gradient of `f` at `x` by central differences with step [`STEP`].
pub fn numeric_gradient(x: &[f64], mut f: impl FnMut(&[f64]) -> Result<f64>) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + STEP;
        let plus = f(&probe)?;
        probe[i] = orig - STEP;
        let minus = f(&probe)?;
        probe[i] = orig;
        out.push((plus - minus) / (2.0 * STEP));
    }
    Ok(out)
}

/// Compares tape gradients of a scalar function of `inputs` against central
/// differences, for every element of every input.
pub fn check_gradients<F>(inputs: &[Tensor], f: F) -> Result<GradReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    tape.backward(loss)?;

    let mut report = GradReport::default();
    for (which, input) in inputs.iter().enumerate() {
        let analytic = vars[which]
            .grad()
            .map(Tensor::into_data)
            .unwrap_or_else(|| vec![0.0; input.len()]);
        let numeric = numeric_gradient(input.data(), |probe| {
            let tape = Tape::new();
            let vars: Vec<Var<'_>> = inputs
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    if i == which {
                        tape.constant(Tensor::new(t.shape().to_vec(), probe.to_vec()).unwrap())
                    } else {
                        tape.constant(t.clone())
                    }
                })
                .collect();
            f(&tape, &vars)?.value().item()
        })?;
        for (index, (a, n)) in analytic.into_iter().zip(numeric).enumerate() {
            report.entries.push(GradEntry {
                input: format!("input{which}"),
                index,
                analytic: a,
                numeric: n,
            });
        }
    }
    Ok(report)
}

/// Tensor with entries uniform in `[-magnitude, magnitude]`.
pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], magnitude: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-magnitude..=magnitude)).collect();
    Tensor::new(shape.to_vec(), data).expect("finite random data")
}
