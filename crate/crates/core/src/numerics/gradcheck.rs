//! Central finite-difference checks of tape gradients.
//!
//! The numeric side only ever evaluates the forward closure, so it stays
//! independent of every backward rule it is used to verify.

use super::{NumericsError, Rng, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub rel_tol: f64,
    pub abs_floor: f64,
    /// Checked entries per input tensor; entries are sampled when a tensor is larger.
    pub max_entries: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { step: 1e-5, rel_tol: 1e-4, abs_floor: 1e-8, max_entries: 64, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    pub input: usize,
    pub entry: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub failures: Vec<Mismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

fn entries_to_check(n: usize, opts: &GradCheckOptions, rng: &mut Rng) -> Vec<usize> {
    if n <= opts.max_entries {
        (0..n).collect()
    } else {
        let mut idx = rng.sample_distinct(n, opts.max_entries);
        idx.sort_unstable();
        idx
    }
}

/// Compares `d f / d inputs` from the tape against central differences.
///
/// `f` receives a fresh tape and the inputs bound as trainable leaves and
/// must return a scalar.
pub fn check<F>(inputs: &[Tensor<f64>], opts: GradCheckOptions, f: F) -> Result<GradCheckReport, NumericsError>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>, NumericsError>,
{
    let analytic: Vec<Tensor<f64>> = {
        let tape = Tape::new();
        let vars = inputs.iter().map(|t| tape.param(t.clone())).collect::<Result<Vec<_>, _>>()?;
        let loss = f(&tape, &vars)?;
        let grads = tape.backward(loss)?;
        vars.iter().map(|&v| grads.wrt(v)).collect()
    };
    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64, NumericsError> {
        let tape = Tape::new();
        let vars = perturbed.iter().map(|t| tape.constant(t.clone())).collect::<Result<Vec<_>, _>>()?;
        Ok(f(&tape, &vars)?.value().item())
    };

    let mut rng = Rng::new(opts.seed);
    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for e in entries_to_check(input.numel(), &opts, &mut rng) {
            let orig = input.data()[e];
            work[i].data_mut()[e] = orig + opts.step;
            let plus = eval(&work)?;
            work[i].data_mut()[e] = orig - opts.step;
            let minus = eval(&work)?;
            work[i].data_mut()[e] = orig;

            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[i].data()[e];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(f64::MIN_POSITIVE);
            report.checked += 1;
            report.max_abs_err = report.max_abs_err.max(abs);
            if abs > opts.abs_floor {
                report.max_rel_err = report.max_rel_err.max(rel);
                if rel > opts.rel_tol {
                    report.failures.push(Mismatch { input: i, entry: e, analytic: a, numeric });
                }
            }
        }
    }
    Ok(report)
}
