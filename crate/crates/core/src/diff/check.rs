use alloc::string::ToString;
use alloc::vec::Vec;

use super::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};

/// Compares reverse-mode gradients of a scalar function against central
/// differences with step `step`.
///
/// `f` receives a fresh tape and one leaf per input tensor and must return a
/// scalar node. The result is the largest
/// `|analytic - numeric| / max(1, |numeric|)` over every input coordinate.
pub fn grad_check<F>(f: F, inputs: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::invalid("grad_check step must be positive"));
    }

    let mut tape = Tape::new();
    let leaves = inputs
        .iter()
        .map(|t| tape.variable(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &leaves)?;
    if !tape.value(out).is_finite() {
        return Err(Error::NonFinite("grad_check function".to_string()));
    }
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = leaves
        .iter()
        .zip(inputs)
        .map(|(&leaf, t)| {
            grads
                .of(leaf)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let leaves = perturbed
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &leaves)?;
        let value = tape.value(out);
        if !value.is_scalar() {
            return Err(Error::NonScalarLoss(value.shape().to_vec()));
        }
        let v = value.item();
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check function".to_string()));
        }
        Ok(v)
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let original = input.values()[j];
            work[i].values_mut()[j] = original + step;
            let plus = eval(&work)?;
            work[i].values_mut()[j] = original - step;
            let minus = eval(&work)?;
            work[i].values_mut()[j] = original;
            let numeric = (plus - minus) / (2.0 * step);
            let err = (analytic[i].values()[j] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::vector(alloc::vec![0.3, -1.2]).unwrap();
        let err = grad_check(|tape, _| tape.constant(Tensor::scalar(4.0)), &[x], 1e-4).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn rejects_non_positive_step() {
        let x = Tensor::scalar(1.0);
        assert!(grad_check(|t, l| t.sum_all(l[0]), &[x], 0.0).is_err());
    }

    #[test]
    fn rejects_non_finite_function() {
        let x = Tensor::scalar(1e-5);
        // log(x - step) is non-finite for x close to zero
        let res = grad_check(
            |t, l| {
                let y = t.log(l[0])?;
                t.sum_all(y)
            },
            &[x],
            1e-3,
        );
        assert!(res.is_err());
    }
}
