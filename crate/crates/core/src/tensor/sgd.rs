use super::{ParamSet, Result, Scalar, Tensor, TensorError};

/// Classical (heavy-ball) momentum: `v <- mu v + g`, `p <- p - lr v`.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState<T> {
    pub learning_rate: T,
    pub momentum: T,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> SgdState<T> {
    pub fn new<P: Scalar>(params: &ParamSet<P>, learning_rate: T, momentum: T) -> Self {
        Self {
            learning_rate,
            momentum,
            velocity: params.tensors().iter().map(|t| vec![T::zero(); t.len()]).collect(),
        }
    }

    pub fn velocity(&self, i: usize) -> &[T] {
        &self.velocity[i]
    }
}

/// Applies one momentum step. `grads` is aligned with `params`; `None`
/// entries are left untouched (frozen parameters).
///
/// A non-finite gradient anywhere aborts the whole step before any update.
pub fn sgd_step<T: Scalar>(
    params: &mut ParamSet<T>,
    grads: &[Option<Tensor<T>>],
    state: &mut SgdState<T>,
) -> Result<()> {
    if grads.len() != params.len() || state.velocity.len() != params.len() {
        return Err(TensorError::ShapeMismatch {
            op: "sgd_step",
            lhs: vec![params.len()],
            rhs: vec![grads.len(), state.velocity.len()],
        });
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if let Some(g) = g {
            if g.shape() != p.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "sgd_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.all_finite() {
                return Err(TensorError::NonFinite(name.to_string()));
            }
        }
    }
    let (lr, mu) = (state.learning_rate, state.momentum);
    for ((p, g), v) in params.tensors_mut().iter_mut().zip(grads).zip(&mut state.velocity) {
        let Some(g) = g else { continue };
        for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
            *vv = mu * *vv + *gv;
            *pv = *pv - lr * *vv;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::new(&[1], vec![value]).unwrap());
        p
    }

    fn grad(value: f64) -> Vec<Option<Tensor<f64>>> {
        vec![Some(Tensor::new(&[1], vec![value]).unwrap())]
    }

    #[test]
    fn plain_sgd() {
        let mut p = single(1.0);
        let mut s = SgdState::new(&p, 0.1, 0.0);
        sgd_step(&mut p, &grad(2.0), &mut s).unwrap();
        assert!((p.get("w").unwrap().item() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn momentum_recurrence() {
        let mut p = single(0.0);
        let mut s = SgdState::new(&p, 1.0, 0.9);
        sgd_step(&mut p, &grad(1.0), &mut s).unwrap();
        assert_eq!(s.velocity(0), &[1.0]);
        assert_eq!(p.get("w").unwrap().item(), -1.0);
        sgd_step(&mut p, &grad(1.0), &mut s).unwrap();
        assert!((s.velocity(0)[0] - 1.9).abs() < 1e-15);
        assert!((p.get("w").unwrap().item() + 2.9).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_skips_step() {
        let mut p = single(1.0);
        let mut s = SgdState::new(&p, 0.1, 0.9);
        let err = sgd_step(&mut p, &grad(f64::NAN), &mut s).unwrap_err();
        assert_eq!(err, TensorError::NonFinite("w".into()));
        assert_eq!(p.get("w").unwrap().item(), 1.0);
        assert_eq!(s.velocity(0), &[0.0]);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = single(1.0);
        let mut s = SgdState::new(&p, 0.1, 0.9);
        let g = vec![Some(Tensor::new(&[2], vec![1.0, 1.0]).unwrap())];
        assert!(matches!(sgd_step(&mut p, &g, &mut s), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn frozen_parameter_untouched() {
        let mut p = single(1.0);
        let mut s = SgdState::new(&p, 0.1, 0.9);
        sgd_step(&mut p, &[None], &mut s).unwrap();
        assert_eq!(p.get("w").unwrap().item(), 1.0);
    }
}
