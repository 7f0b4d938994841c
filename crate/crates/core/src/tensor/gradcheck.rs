use super::{Result, Tape, Tensor, TensorError, Var};

/// Outcome of comparing tape gradients against central finite differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest elementwise relative error over all inputs.
    pub max_rel_error: f64,
    /// (input index, flat element index) of the worst element.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Denominator floor for the relative error, so that gradients which are
/// exactly zero analytically compare on an absolute scale.
const REL_FLOOR: f64 = 1e-6;

/// Compares analytic gradients of a scalar-valued program against central
/// differences with step `h`.
///
/// `program` receives a fresh tape and one leaf per input and must return a
/// scalar node.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, program: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = program(&mut tape, &vars)?;
        tape.value(out)
            .item()
            .ok_or_else(|| TensorError::NotScalar(tape.shape(out).to_vec()))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = program(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| tape.grad(v).expect("leaf requires grad"))
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut probe = inputs.to_vec();
    for (ii, grad) in analytic.iter().enumerate() {
        for e in 0..grad.len() {
            let orig = probe[ii].data()[e];
            probe[ii].data_mut()[e] = orig + h;
            let up = eval(&probe)?;
            probe[ii].data_mut()[e] = orig - h;
            let down = eval(&probe)?;
            probe[ii].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = grad.data()[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            if rel > report.max_rel_error || !rel.is_finite() {
                report.max_rel_error = rel;
                report.worst = (ii, e);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
