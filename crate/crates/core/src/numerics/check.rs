use std::collections::BTreeMap;

use super::error::{NumericsError, Result};
use super::params::ParamGroup;
use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// Name-to-node map produced by binding a [`ParamGroup`] onto a tape.
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    /// Binds every entry: trainable entries as differentiable leaves, the
    /// rest as constants.
    pub fn bind(tape: &mut Tape, group: &ParamGroup) -> Self {
        Self::bind_with(tape, group, true)
    }

    /// Binds every entry as a constant.
    pub fn bind_frozen(tape: &mut Tape, group: &ParamGroup) -> Self {
        Self::bind_with(tape, group, false)
    }

    fn bind_with(tape: &mut Tape, group: &ParamGroup, allow_grad: bool) -> Self {
        let vars = group
            .iter()
            .map(|(name, entry)| {
                let var = if allow_grad && entry.trainable {
                    tape.leaf(entry.tensor.clone())
                } else {
                    tape.constant(entry.tensor.clone())
                };
                (name.to_string(), var)
            })
            .collect();
        Self { vars }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| NumericsError::UnknownName(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Entries named `prefix.rest`, renamed to `rest`.
    pub fn scoped(&self, prefix: &str) -> Self {
        let head = format!("{prefix}.");
        let vars = self
            .vars
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&head).map(|rest| (rest.to_string(), *v)))
            .collect();
        Self { vars }
    }
}

/// Builds the expression described by `expr` over `inputs` and returns its value.
pub fn evaluate<F>(expr: F, inputs: &ParamGroup) -> Result<Tensor>
where
    F: Fn(&mut Tape, &Bindings) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bindings = Bindings::bind(&mut tape, inputs);
    let root = expr(&mut tape, &bindings)?;
    Ok(tape.value(root).clone())
}

/// Gradient of the scalar expression with respect to the named inputs.
/// Names that do not influence the root get a zero tensor.
pub fn gradient<F>(expr: F, inputs: &ParamGroup, wrt: &[&str]) -> Result<ParamGroup>
where
    F: Fn(&mut Tape, &Bindings) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bindings = Bindings::bind(&mut tape, inputs);
    let root = expr(&mut tape, &bindings)?;
    let grads = tape.backward(root)?;
    let mut out = ParamGroup::new();
    for &name in wrt {
        let var = bindings.var(name)?;
        out.insert(name, grads.get_or_zeros(var), true)?;
    }
    Ok(out)
}

/// Largest `|analytic − central difference| / max(1, |analytic|)` over every
/// coordinate of every trainable input.
pub fn finite_difference_check<F>(expr: F, inputs: &ParamGroup, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &Bindings) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(NumericsError::Invalid {
            op: "finite_difference_check",
            msg: format!("eps must be positive, got {eps}"),
        });
    }
    let names: Vec<String> = inputs
        .iter()
        .filter(|(_, e)| e.trainable)
        .map(|(n, _)| n.to_string())
        .collect();
    let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let analytic = gradient(&expr, inputs, &name_refs)?;

    let scalar = |group: &ParamGroup| -> Result<f64> {
        let v = evaluate(&expr, group)?;
        v.item().ok_or(NumericsError::NonScalarRoot(v.shape().to_vec()))
    };

    let mut worst: f64 = 0.0;
    let mut probe = inputs.clone();
    for name in &names {
        let n = inputs.get(name)?.numel();
        for i in 0..n {
            let original = inputs.get(name)?.data()[i];
            probe.get_mut(name)?.data_mut()[i] = original + eps;
            let plus = scalar(&probe)?;
            probe.get_mut(name)?.data_mut()[i] = original - eps;
            let minus = scalar(&probe)?;
            probe.get_mut(name)?.data_mut()[i] = original;
            let numeric = (plus - minus) / (2.0 * eps);
            let exact = analytic.get(name)?.data()[i];
            let err = (exact - numeric).abs() / exact.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_group(x: f64) -> ParamGroup {
        let mut g = ParamGroup::new();
        g.insert("x", Tensor::scalar(x), true).unwrap();
        g
    }

    #[test]
    fn square_value_and_gradient() {
        let sq = |t: &mut Tape, b: &Bindings| {
            let x = b.var("x")?;
            t.mul(x, x)
        };
        assert_eq!(evaluate(sq, &scalar_group(3.0)).unwrap().item(), Some(9.0));
        let g = gradient(sq, &scalar_group(3.0), &["x"]).unwrap();
        assert_eq!(g.get("x").unwrap().item(), Some(6.0));
        assert_eq!(g.len(), 1);
    }

    #[test]
    fn non_positive_eps_is_rejected() {
        let id = |_: &mut Tape, b: &Bindings| b.var("x");
        assert!(finite_difference_check(id, &scalar_group(1.0), 0.0).is_err());
    }

    #[test]
    fn linear_expression_has_tiny_fd_error() {
        let lin = |t: &mut Tape, b: &Bindings| {
            let x = b.var("x")?;
            let y = t.scale(x, 3.5)?;
            t.shift(y, 2.0)
        };
        let err = finite_difference_check(lin, &scalar_group(0.7), 1e-6).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn guarded_exp_reports_finite_error() {
        let guarded = |t: &mut Tape, b: &Bindings| {
            let x = b.var("x")?;
            let c = t.clamp(x, -30.0, 30.0)?;
            t.exp(c)
        };
        let err = finite_difference_check(guarded, &scalar_group(800.0), 1e-6).unwrap();
        assert!(err.is_finite());
    }

    #[test]
    fn unknown_gradient_name_fails() {
        let id = |_: &mut Tape, b: &Bindings| b.var("x");
        assert!(matches!(
            gradient(id, &scalar_group(1.0), &["y"]),
            Err(NumericsError::UnknownName(_))
        ));
    }
}
