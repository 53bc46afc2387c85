use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::array::Array;

/// Named collection of arrays, iterated in name order.
pub type ParamSet = BTreeMap<String, Array>;

/// Adam moment estimates and hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub first_moment: ParamSet,
    pub second_moment: ParamSet,
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptimState {
    pub fn new(learning_rate: f64) -> Self {
        OptimState {
            first_moment: ParamSet::new(),
            second_moment: ParamSet::new(),
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One bias-corrected Adam update.
///
/// Only parameters that have an entry in `grads` move; the others (and their
/// moments) are returned untouched. The step counter advances by exactly one.
pub fn adam_step(
    params: &ParamSet,
    grads: &ParamSet,
    state: &OptimState,
) -> Result<(ParamSet, OptimState)> {
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| Error::Input(format!("gradient for unknown parameter {name}")))?;
        if p.shape() != g.shape() {
            return Err(Error::dim("adam_step", p.shape(), g.shape()));
        }
    }

    let mut next = state.clone();
    next.step += 1;
    let t = next.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);

    let mut out = params.clone();
    for (name, g) in grads {
        let m = next
            .first_moment
            .entry(name.clone())
            .or_insert_with(|| Array::zeros(g.shape()));
        m.data_mut()
            .iter_mut()
            .zip(g.data())
            .for_each(|(m, g)| *m = state.beta1 * *m + (1.0 - state.beta1) * g);
        let v = next
            .second_moment
            .entry(name.clone())
            .or_insert_with(|| Array::zeros(g.shape()));
        v.data_mut()
            .iter_mut()
            .zip(g.data())
            .for_each(|(v, g)| *v = state.beta2 * *v + (1.0 - state.beta2) * g * g);

        let (m, v) = (&next.first_moment[name], &next.second_moment[name]);
        let p = out.get_mut(name).expect("checked above");
        for ((p, m), v) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
            let m_hat = m / bc1;
            let v_hat = v / bc2;
            *p -= state.learning_rate * m_hat / (v_hat.sqrt() + state.epsilon);
        }
    }
    Ok((out, next))
}
