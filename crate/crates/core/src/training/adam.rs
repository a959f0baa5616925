use crate::model::ModelParams;

/// Adam moments for every parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            m: ModelParams::zeros_like(params),
            v: ModelParams::zeros_like(params),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut ModelParams, grads: &ModelParams, state: &mut AdamState, lr: f64) {
    state.t += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let bc1 = 1.0 - b1.powi(state.t as i32);
    let bc2 = 1.0 - b2.powi(state.t as i32);

    let g_flat = grads.flatten();
    let mut m_flat = state.m.flatten();
    let mut v_flat = state.v.flatten();
    let mut p_flat = params.flatten();
    assert_eq!(g_flat.len(), p_flat.len(), "gradient and parameter layouts differ");
    for k in 0..p_flat.len() {
        let g = g_flat[k];
        m_flat[k] = b1 * m_flat[k] + (1.0 - b1) * g;
        v_flat[k] = b2 * v_flat[k] + (1.0 - b2) * g * g;
        let m_hat = m_flat[k] / bc1;
        let v_hat = v_flat[k] / bc2;
        p_flat[k] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    // Layouts are identical by construction, so these cannot fail.
    params.assign_flat(&p_flat).unwrap();
    state.m.assign_flat(&m_flat).unwrap();
    state.v.assign_flat(&v_flat).unwrap();
}
