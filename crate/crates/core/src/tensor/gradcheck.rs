use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Central-difference step.
pub const FD_STEP: f32 = 1e-3;
/// Relative tolerance used by callers to judge a report.
pub const GRAD_REL_TOL: f64 = 1e-3;
/// Absolute floor: differences below this are never counted as failures.
pub const GRAD_ABS_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    /// Max over elements of `|analytic - numeric| / max(|analytic|, |numeric|, floor/tol)`,
    /// one entry per input.
    pub max_rel_error: Vec<f64>,
    pub max_abs_error: Vec<f64>,
}

impl GradcheckReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_error.iter().copied().fold(0.0, f64::max)
    }

    pub fn passes(&self) -> bool {
        self.worst() < GRAD_REL_TOL
    }
}

/// Compare analytic gradients of a scalar function against central finite
/// differences with step [`FD_STEP`].
///
/// `f` receives a fresh tape and one leaf per input and must return a scalar.
pub fn gradcheck<F>(mut f: F, inputs: &[Tensor]) -> Result<GradcheckReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.shape(out).is_scalar() {
        return Err(Error::shape(format!(
            "gradcheck function must return a scalar, got {}",
            tape.shape(out)
        )));
    }
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();

    let mut eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.scalar(out)
    };

    let denom_floor = GRAD_ABS_FLOOR / GRAD_REL_TOL;
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut max_rel = Vec::with_capacity(inputs.len());
    let mut max_abs = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let (mut rel, mut abs) = (0.0f64, 0.0f64);
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            // Divide by the step actually representable in f32.
            let (hi, lo) = (orig + FD_STEP, orig - FD_STEP);
            work[i].data_mut()[j] = hi;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = lo;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (f64::from(hi) - f64::from(lo));
            let a = f64::from(analytic[i].data()[j]);
            let diff = (a - numeric).abs();
            abs = abs.max(diff);
            rel = rel.max(diff / a.abs().max(numeric.abs()).max(denom_floor));
        }
        max_rel.push(rel);
        max_abs.push(abs);
    }
    Ok(GradcheckReport {
        max_rel_error: max_rel,
        max_abs_error: max_abs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_zero_error() {
        let x = Tensor::new([1, 1, 2, 3], vec![0.1, -0.4, 0.9, 1.5, -2.0, 0.25]).unwrap();
        let report = gradcheck(|t, v| Ok(t.sum_all(v[0])), &[x]).unwrap();
        assert!(report.worst() < 1e-6, "{report:?}");
    }

    #[test]
    fn rejects_non_scalar_function() {
        let x = Tensor::zeros([1, 1, 2, 2]);
        assert!(gradcheck(|_, v| Ok(v[0]), &[x]).is_err());
    }
}
