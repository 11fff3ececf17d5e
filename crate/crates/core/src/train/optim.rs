use super::{Result, TrainError};
use crate::model::{ParamGroup, Params};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam moments shaped like the parameters, plus step counters.
///
/// `t` counts optimizer steps. Bias correction uses a per-group count of the
/// steps in which that group was actually updated, so a group thawed late
/// starts with properly corrected moments.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    m: Params,
    v: Params,
    group_steps: Vec<u64>,
    t: u64,
}

impl OptimizerState {
    pub fn new(params: &Params, n_groups: usize) -> Self {
        OptimizerState { m: params.zeros_like(), v: params.zeros_like(), group_steps: vec![0; n_groups], t: 0 }
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn group_steps(&self) -> &[u64] {
        &self.group_steps
    }

    pub fn first_moment(&self) -> &Params {
        &self.m
    }

    pub fn second_moment(&self) -> &Params {
        &self.v
    }
}

fn shapes_match(a: &Params, b: &Params) -> bool {
    let (ta, tb) = (a.tensors(), b.tensors());
    ta.len() == tb.len() && ta.iter().zip(&tb).all(|(x, y)| x.shape() == y.shape())
}

/// One AdamW update. `lr_per_group[g]` is `None` for a frozen group, whose
/// parameters and moments are left bit-identical.
///
/// Per element: `p ← p·(1 − lr·wd) − lr·m̂/(√v̂ + eps)`, the decoupled form
/// of `p − lr·(m̂/(√v̂ + eps) + wd·p)`.
pub fn adamw_step(
    params: &mut Params,
    grads: &Params,
    state: &mut OptimizerState,
    groups: &[ParamGroup],
    lr_per_group: &[Option<f64>],
    weight_decay: f64,
    adam: &AdamConfig,
) -> Result<()> {
    if !shapes_match(params, grads) || !shapes_match(params, &state.m) {
        return Err(TrainError::ShapeMismatch("parameters, gradients and optimizer state differ".into()));
    }
    if groups.len() != lr_per_group.len() || groups.len() != state.group_steps.len() {
        return Err(TrainError::ShapeMismatch(format!(
            "{} groups, {} learning rates, {} optimizer group counters",
            groups.len(),
            lr_per_group.len(),
            state.group_steps.len()
        )));
    }
    state.t += 1;
    let grads = grads.tensors();
    let mut params = params.tensors_mut();
    let mut ms = state.m.tensors_mut();
    let mut vs = state.v.tensors_mut();
    for ((group, lr), steps) in groups.iter().zip(lr_per_group).zip(state.group_steps.iter_mut()) {
        let Some(lr) = *lr else { continue };
        *steps += 1;
        let s = *steps as i32;
        let bc1 = 1.0 - adam.beta1.powi(s);
        let bc2 = 1.0 - adam.beta2.powi(s);
        let decay = 1.0 - lr * weight_decay;
        for &i in &group.tensor_indices {
            let p = params[i].data_mut();
            let m = ms[i].data_mut();
            let v = vs[i].data_mut();
            for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(grads[i].data()) {
                *m = adam.beta1 * *m + (1.0 - adam.beta1) * g;
                *v = adam.beta2 * *v + (1.0 - adam.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p = *p * decay - lr * m_hat / (v_hat.sqrt() + adam.eps);
            }
        }
    }
    Ok(())
}
