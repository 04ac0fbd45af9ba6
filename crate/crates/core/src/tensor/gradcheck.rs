use super::{Graph, Primitive, Tensor, Var};
use crate::error::Result;

/// Outcome of a central-difference gradient comparison.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` of the worst entry, if any entry differed.
    pub worst: Option<(usize, usize)>,
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
    /// [`Graph::kink_margin`] of the analytic pass; results are only
    /// meaningful when this is well above `h`.
    pub kink_margin: f64,
}

/// Compares the tape gradient of a scalar function of `x` with central
/// differences of step `h`, returning the maximum relative error
/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let report = finite_diff_check_many(|g, vars| f(g, vars[0]), std::slice::from_ref(x), h)?;
    Ok(report.max_rel_error)
}

/// Multi-input form of [`finite_diff_check`]: every tensor in `xs` is a leaf.
pub fn finite_diff_check_many<F>(f: F, xs: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    check_on(None, f, xs, h)
}

/// [`finite_diff_check_many`] with the analytic pass recorded on a graph whose
/// `fault` primitive has a corrupted backward rule.
#[doc(hidden)]
pub fn finite_diff_check_with_fault<F>(
    fault: Option<Primitive>,
    f: F,
    xs: &[Tensor],
    h: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    check_on(fault, f, xs, h)
}

fn check_on<F>(fault: Option<Primitive>, f: F, xs: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::with_fault(fault);
    let vars: Vec<Var> = xs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let mut inputs = xs.to_vec();
    let mut numeric = Vec::with_capacity(xs.len());
    let mut max_rel_error = 0.0;
    let mut worst = None;
    for t in 0..xs.len() {
        let mut num = Tensor::zeros(xs[t].shape());
        for i in 0..xs[t].len() {
            let orig = xs[t].data()[i];
            inputs[t].data_mut()[i] = orig + h;
            let plus = eval(&inputs)?;
            inputs[t].data_mut()[i] = orig - h;
            let minus = eval(&inputs)?;
            inputs[t].data_mut()[i] = orig;
            let n = (plus - minus) / (2.0 * h);
            num.data_mut()[i] = n;
            let a = analytic[t].data()[i];
            let rel = (a - n).abs() / (a.abs() + n.abs()).max(1e-8);
            if rel > max_rel_error {
                max_rel_error = rel;
                worst = Some((t, i));
            }
        }
        numeric.push(num);
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst,
        analytic,
        numeric,
        kink_margin: g.kink_margin(),
    })
}
