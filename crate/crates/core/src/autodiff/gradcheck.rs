use super::{Tape, Var};
use crate::error::TensorError;
use crate::tensor::Tensor;

/// Worst coordinate found by [`grad_check_report`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Denominator floor of the relative error. Central differences in `f64`
/// cannot resolve gradients much below this, so smaller components are in
/// effect compared in absolute terms.
pub const GRAD_FLOOR: f64 = 1e-6;

/// Compares tape gradients of a scalar function against central finite
/// differences and returns the worst relative error
/// `|analytic - numeric| / max(|analytic|, |numeric|, GRAD_FLOOR)` over all
/// coordinates of all inputs.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>,
{
    Ok(grad_check_report(f, inputs, &[eps])?.max_rel_error)
}

/// Worst coordinate over all inputs. With several step sizes each
/// coordinate keeps its best agreement, so a difference that straddles a
/// ReLU or max-pool switch at the larger steps is judged at the smaller
/// ones. A wrong gradient disagrees at every step.
pub fn grad_check_report<F>(f: F, inputs: &[Tensor<f64>], steps: &[f64]) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let eval = |values: &[Tensor<f64>], track: bool| -> Result<(Tape<f64>, Var, Vec<Var>), TensorError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone(), track)).collect();
        let out = f(&mut tape, &vars)?;
        if tape.value(out).len() != 1 {
            return Err(TensorError::NonScalarLoss(tape.shape(out).to_vec()));
        }
        Ok((tape, out, vars))
    };

    let (tape, out, vars) = eval(inputs, true)?;
    let grads = tape.backward(out)?;

    let mut worst = GradCheckReport::default();
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).map(|g| g.data().to_vec());
        for i in 0..inputs[k].len() {
            let x0 = inputs[k].data()[i];
            let a = analytic.as_ref().map_or(0.0, |g| g[i]);
            let (mut rel, mut numeric) = (f64::INFINITY, f64::NAN);
            for &eps in steps {
                probe[k].data_mut()[i] = x0 + eps;
                let (t, o, _) = eval(&probe, false)?;
                let plus = t.value(o).data()[0];
                probe[k].data_mut()[i] = x0 - eps;
                let (t, o, _) = eval(&probe, false)?;
                let minus = t.value(o).data()[0];
                probe[k].data_mut()[i] = x0;

                let n = (plus - minus) / (2.0 * eps);
                let r = (a - n).abs() / a.abs().max(n.abs()).max(GRAD_FLOOR);
                if r < rel {
                    (rel, numeric) = (r, n);
                }
            }
            if rel > worst.max_rel_error {
                worst = GradCheckReport {
                    max_rel_error: rel,
                    input: k,
                    index: i,
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(worst)
}
