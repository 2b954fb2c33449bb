use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Outcome of comparing tape gradients against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// Largest `|a - n| / max(|a|, |n|, 1e-8)` over all checked elements.
    pub max_rel_error: f64,
    /// `(param, element)` where the largest error occurred.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// `f` at the unperturbed parameters.
    pub value: f64,
    /// Every checked element, in parameter order.
    pub elements: Vec<ElementCheck>,
}

/// One parameter element's analytic and central-difference derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElementCheck {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error.is_finite() && self.max_rel_error < tol
    }
}

/// Checks the tape gradient of a scalar function against
/// `(f(p + h) - f(p - h)) / 2h`, element by element.
///
/// `f` receives a fresh tape and the leaves for `params` (in order) and must
/// return a scalar. It is evaluated `1 + 2 * total_elements` times, so keep the
/// parameter count small. A NaN in either gradient reports an infinite error.
pub fn finite_diff_check<F>(mut f: F, params: &[Tensor], h: f64) -> Result<GradCheck>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let leaves: Vec<Var> = params
        .iter()
        .map(|p| tape.leaf(&p.clone().with_requires_grad(true)))
        .collect();
    let loss = f(&mut tape, &leaves)?;
    let value = tape.value(loss).data()[0];
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .zip(params)
        .map(|(v, p)| {
            tape.grad(*v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; p.len()])
        })
        .collect();

    let mut eval = |probe: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = probe.iter().map(|p| tape.leaf(p)).collect();
        let out = f(&mut tape, &leaves)?;
        Ok(tape.value(out).data()[0])
    };

    let mut probe: Vec<Tensor> = params.to_vec();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        value,
        elements: Vec::new(),
    };
    for p in 0..params.len() {
        for i in 0..params[p].len() {
            let orig = params[p].data()[i];
            probe[p].data_mut()[i] = orig + h;
            let plus = eval(&probe)?;
            probe[p].data_mut()[i] = orig - h;
            let minus = eval(&probe)?;
            probe[p].data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[p][i];
            let err = if a.is_nan() || numeric.is_nan() {
                f64::INFINITY
            } else {
                (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8)
            };
            report.checked += 1;
            report.elements.push(ElementCheck {
                param: p,
                index: i,
                analytic: a,
                numeric,
                rel_error: err,
            });
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((p, i));
            }
        }
    }
    Ok(report)
}
