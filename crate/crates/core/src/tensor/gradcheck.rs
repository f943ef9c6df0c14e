use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Pass threshold on the maximum relative error.
    pub tol: f64,
    /// Lower bound on the relative-error denominator, so coordinates whose
    /// true gradient is ~0 are judged on absolute error at this scale.
    pub scale_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            tol: 1e-4,
            scale_floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of |analytic − numeric| / max(|analytic|, |numeric|, floor)
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// (input index, flat coordinate) of the worst relative error.
    pub worst: (usize, usize),
    pub coordinates: usize,
    pub passed: bool,
}

/// Compare reverse-mode gradients of a scalar function against central
/// finite differences, coordinate by coordinate.
pub fn gradient_check<F>(
    f: F,
    inputs: &[Tensor<f64>],
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let leaves: Vec<Var<'_, f64>> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&tape, &leaves)?;
    if out.value().len() != 1 {
        return Err(Error::shape(
            "gradient_check needs a scalar-valued function",
        ));
    }
    out.backward()?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .zip(inputs)
        .map(|(l, t)| {
            l.grad()
                .map(|g| g.into_data())
                .unwrap_or_else(|| vec![0.0; t.len()])
        })
        .collect();

    let eval = |args: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_, f64>> = args.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &vars)?.value().item())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: (0, 0),
        coordinates: 0,
        passed: true,
    };
    let mut args: Vec<Tensor<f64>> = inputs.to_vec();
    for (ii, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let x0 = input.data()[j];
            let mut central = |h: f64| -> Result<f64> {
                args[ii].data_mut()[j] = x0 + h;
                let fp = eval(&args)?;
                args[ii].data_mut()[j] = x0 - h;
                let fm = eval(&args)?;
                args[ii].data_mut()[j] = x0;
                Ok((fp - fm) / (2.0 * h))
            };
            // Richardson step: removes the O(eps) bias a central difference
            // picks up when a piecewise-smooth op has its kink at x0.
            let numeric = 2.0 * central(opts.eps / 2.0)? - central(opts.eps)?;
            let a = analytic[ii][j];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(opts.scale_floor);
            report.coordinates += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = rel;
                report.worst = (ii, j);
            }
        }
    }
    report.passed = report.max_rel_error <= opts.tol;
    Ok(report)
}
