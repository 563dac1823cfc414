//! Mini-batch gradients: one tape per example, ordered mean reduction.

use crate::error::Result;
use crate::exec::Exec;
use crate::tensor::{BoundParams, ParamSet, Scalar, Tape, Tensor, Var};

pub struct BatchGradients<T> {
    /// Mean per-example loss.
    pub loss: f64,
    /// Mean gradient per parameter; `None` for frozen parameters.
    pub grads: Vec<Option<Tensor<T>>>,
}

/// Evaluates `loss_fn` on every item, each on its own tape, and averages the
/// losses and gradients in item order.
pub fn batch_gradients<T, I, F>(
    params: &ParamSet<T>,
    trainable: &[bool],
    items: &[I],
    exec: Exec,
    loss_fn: F,
) -> Result<BatchGradients<T>>
where
    T: Scalar,
    I: Sync,
    F: Fn(&I, &mut Tape<T>, &BoundParams<T>) -> Result<Var> + Sync + Send,
{
    let per_item = exec.map(items, |item| -> Result<(f64, Vec<Option<Tensor<T>>>)> {
        let mut tape = Tape::new();
        let bound = params.bind_masked(&mut tape, trainable);
        let loss = loss_fn(item, &mut tape, &bound)?;
        let value = tape.value(loss).item().f64();
        let mut grads = tape.backward(loss)?;
        Ok((value, bound.collect(&mut grads)))
    });

    let mut total = 0.0;
    let mut sum: Vec<Option<Tensor<T>>> = params
        .tensors()
        .iter()
        .zip(trainable)
        .map(|(t, &train)| train.then(|| Tensor::zeros(t.shape())))
        .collect();
    for result in per_item {
        let (loss, grads) = result?;
        total += loss;
        for (acc, g) in sum.iter_mut().zip(grads) {
            if let (Some(acc), Some(g)) = (acc.as_mut(), g) {
                for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a = *a + *v;
                }
            }
        }
    }
    let n = items.len().max(1);
    let inv = T::one() / T::of(n as f64);
    for t in sum.iter_mut().flatten() {
        t.data_mut().iter_mut().for_each(|v| *v = *v * inv);
    }
    Ok(BatchGradients {
        loss: total / n as f64,
        grads: sum,
    })
}

/// Mean of `loss_fn` over items without gradients.
pub fn mean_loss<T, I, F>(params: &ParamSet<T>, items: &[I], exec: Exec, loss_fn: F) -> Result<f64>
where
    T: Scalar,
    I: Sync,
    F: Fn(&I, &mut Tape<T>, &BoundParams<T>) -> Result<Var> + Sync + Send,
{
    let values = exec.map(items, |item| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, |_| false);
        let loss = loss_fn(item, &mut tape, &bound)?;
        Ok(tape.value(loss).item().f64())
    });
    let mut total = 0.0;
    for v in values {
        total += v?;
    }
    Ok(total / items.len().max(1) as f64)
}
