use super::TensorError;

/// First and second moment buffers of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Adam optimizer state: per-parameter moments plus the shared step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub moments: Vec<Moments>,
    pub t: u64,
}

impl AdamState {
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            moments: sizes
                .iter()
                .map(|&n| Moments {
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                })
                .collect(),
            t: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub betas: (f64, f64),
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            betas: (0.9, 0.999),
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update applied in place. `lrs[i]` is the learning
/// rate of `params[i]`, which lets parameter groups share one step counter.
pub fn adam_step(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    lrs: &[f64],
    state: &mut AdamState,
    hyper: AdamHyper,
) -> Result<(), TensorError> {
    if params.len() != grads.len() || params.len() != lrs.len() || params.len() != state.moments.len() {
        return Err(TensorError::Invalid(format!(
            "adam: {} params, {} grads, {} learning rates, {} moment buffers",
            params.len(),
            grads.len(),
            lrs.len(),
            state.moments.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        let mo = &state.moments[i];
        if p.len() != g.len() || p.len() != mo.m.len() || p.len() != mo.v.len() {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step",
                lhs: vec![p.len()],
                rhs: vec![g.len()],
            });
        }
        if lrs[i] <= 0.0 {
            return Err(TensorError::Invalid(format!("adam: non-positive learning rate {}", lrs[i])));
        }
    }
    state.t += 1;
    let (b1, b2) = hyper.betas;
    let t = state.t as i32;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for ((p, g), (mo, &lr)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.moments.iter_mut().zip(lrs))
    {
        for j in 0..p.len() {
            let gj = g[j];
            mo.m[j] = b1 * mo.m[j] + (1.0 - b1) * gj;
            mo.v[j] = b2 * mo.v[j] + (1.0 - b2) * gj * gj;
            if mo.m[j] == 0.0 {
                continue;
            }
            let m_hat = mo.m[j] / c1;
            let v_hat = mo.v[j] / c2;
            p[j] -= lr * m_hat / (v_hat.sqrt() + hyper.eps);
        }
    }
    Ok(())
}
