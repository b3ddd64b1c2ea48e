//! AdamW with decoupled weight decay and the cosine-to-zero schedule.

use crate::params::{ParamId, ParamStore};
use crate::{Error, Result};

pub const ADAM_EPS: f32 = 1e-8;

/// `lr_init * 0.5 * (1 + cos(pi t / T))`: starts at `lr_init`, ends at
/// exactly 0 at `t == T`.
pub fn cosine_lr(t: usize, total: usize, lr_init: f32) -> Result<f32> {
    if total == 0 {
        return Err(Error::Invalid("cosine schedule over zero steps".into()));
    }
    if t > total {
        return Err(Error::Invalid(format!("step {t} past schedule end {total}")));
    }
    if t == total {
        return Ok(0.0); // avoid cos(pi) = -1 + rounding leaving a remnant
    }
    let frac = t as f32 / total as f32;
    Ok(lr_init * 0.5 * (1.0 + (std::f32::consts::PI * frac).cos()))
}

/// One decoupled-weight-decay Adam update on a single parameter buffer.
/// `t` is the 1-based step count used for bias correction.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update(
    param: &mut [f32],
    grad: &[f32],
    m: &mut [f32],
    v: &mut [f32],
    t: u64,
    lr: f32,
    beta1: f32,
    beta2: f32,
    weight_decay: f32,
) {
    debug_assert!(t >= 1);
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    for i in 0..param.len() {
        m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        param[i] -= lr * (mhat / (vhat.sqrt() + ADAM_EPS) + weight_decay * param[i]);
    }
}

/// Optimizer state for every trainable parameter in a store.
pub struct AdamW {
    pub beta1: f32,
    pub beta2: f32,
    pub weight_decay: f32,
    moments: Vec<Option<(Vec<f32>, Vec<f32>)>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, beta1: f32, beta2: f32, weight_decay: f32) -> Self {
        let moments = store
            .iter()
            .map(|(_, e)| e.trainable.then(|| (vec![0.0; e.tensor.numel()], vec![0.0; e.tensor.numel()])))
            .collect();
        AdamW {
            beta1,
            beta2,
            weight_decay,
            moments,
        }
    }

    /// Apply one step to the listed parameters. `t` is the 1-based global
    /// step. Parameters absent from `grads` are untouched.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[(ParamId, Vec<f32>)],
        t: u64,
        lr: f32,
    ) -> Result<()> {
        for (id, grad) in grads {
            let idx = store
                .ids()
                .position(|i| i == *id)
                .expect("grad for a known parameter");
            let slot = self.moments[idx]
                .as_mut()
                .ok_or_else(|| Error::Invalid(format!(
                    "gradient supplied for non-trainable parameter {}",
                    store.name(*id)
                )))?;
            let tensor = store.get_mut(*id);
            if grad.len() != tensor.numel() {
                return Err(Error::Shape(format!(
                    "gradient length {} vs parameter {}",
                    grad.len(),
                    tensor.numel()
                )));
            }
            adamw_update(
                tensor.data_mut(),
                grad,
                &mut slot.0,
                &mut slot.1,
                t,
                lr,
                self.beta1,
                self.beta2,
                self.weight_decay,
            );
        }
        Ok(())
    }

    /// Moment buffers for checkpointing: `(m, v)` per trainable parameter.
    pub fn moments(&self) -> &[Option<(Vec<f32>, Vec<f32>)>] {
        &self.moments
    }

    pub fn moments_mut(&mut self) -> &mut [Option<(Vec<f32>, Vec<f32>)>] {
        &mut self.moments
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn cosine_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 100, 0.4).unwrap(), 0.4);
        assert_eq!(cosine_lr(100, 100, 0.4).unwrap(), 0.0);
        assert!((cosine_lr(50, 100, 0.4).unwrap() - 0.2).abs() < 1e-7);
        assert!(cosine_lr(0, 0, 0.4).is_err());
    }

    #[test]
    fn zero_grad_zero_decay_leaves_params() {
        let mut p = vec![1.0f32, -2.0];
        let g = vec![0.0f32, 0.0];
        let mut m = vec![0.0f32; 2];
        let mut v = vec![0.0f32; 2];
        adamw_update(&mut p, &g, &mut m, &mut v, 1, 0.1, 0.9, 0.999, 0.0);
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn first_step_is_minus_lr_up_to_eps() {
        let mut p = vec![0.0f32];
        let g = vec![1.0f32];
        let mut m = vec![0.0f32];
        let mut v = vec![0.0f32];
        let lr = 0.01;
        adamw_update(&mut p, &g, &mut m, &mut v, 1, lr, 0.9, 0.999, 0.0);
        // mhat = 1, vhat = 1: update = -lr / (1 + eps).
        let want = -lr / (1.0 + ADAM_EPS);
        assert!((p[0] - want).abs() < 1e-9, "{} vs {want}", p[0]);
    }

    /// Scalar reference implementation used as the trajectory oracle.
    struct ScalarAdamRef {
        m: f64,
        v: f64,
    }

    impl ScalarAdamRef {
        fn step(&mut self, p: f64, g: f64, t: u64, lr: f64, b1: f64, b2: f64, wd: f64) -> f64 {
            self.m = b1 * self.m + (1.0 - b1) * g;
            self.v = b2 * self.v + (1.0 - b2) * g * g;
            let mhat = self.m / (1.0 - b1.powi(t as i32));
            let vhat = self.v / (1.0 - b2.powi(t as i32));
            p - lr * (mhat / (vhat.sqrt() + ADAM_EPS as f64) + wd * p)
        }
    }

    #[test]
    fn ten_step_trajectory_matches_scalar_reference_on_quadratic() {
        // f(x) = x^2, grad = 2x, from x = 3.
        let (b1, b2, wd, lr) = (0.9f32, 0.999f32, 0.01f32, 0.1f32);
        let mut p = vec![3.0f32];
        let mut m = vec![0.0f32];
        let mut v = vec![0.0f32];
        let mut reference = ScalarAdamRef { m: 0.0, v: 0.0 };
        let mut p_ref = 3.0f64;
        for t in 1..=10u64 {
            let g = 2.0 * p[0];
            let g_ref = 2.0 * p_ref;
            adamw_update(&mut p, &[g], &mut m, &mut v, t, lr, b1, b2, wd);
            p_ref = reference.step(p_ref, g_ref, t, lr as f64, b1 as f64, b2 as f64, wd as f64);
            assert!(
                (p[0] as f64 - p_ref).abs() < 1e-5,
                "step {t}: {} vs {p_ref}",
                p[0]
            );
        }
        assert!(p[0].abs() < 3.0, "moved toward the minimum");
    }

    #[test]
    fn zero_weight_decay_equals_plain_adam_trajectory() {
        let (b1, b2, lr) = (0.9f32, 0.999f32, 0.05f32);
        let mut with_wd = (vec![2.0f32], vec![0.0f32], vec![0.0f32]);
        let mut plain = (vec![2.0f32], vec![0.0f32], vec![0.0f32]);
        for t in 1..=20u64 {
            let g0 = with_wd.0[0] * 0.5 + 0.1;
            adamw_update(&mut with_wd.0, &[g0], &mut with_wd.1, &mut with_wd.2, t, lr, b1, b2, 0.0);
            let g1 = plain.0[0] * 0.5 + 0.1;
            // plain Adam: identical formula with wd = 0
            adamw_update(&mut plain.0, &[g1], &mut plain.1, &mut plain.2, t, lr, b1, b2, 0.0);
        }
        assert_eq!(with_wd.0, plain.0);
    }

    #[test]
    fn optimizer_skips_and_rejects_correctly() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::full(&[2], 1.0), true);
        let frozen = store.add("frozen", Tensor::full(&[2], 1.0), false);
        let mut opt = AdamW::new(&store, 0.9, 0.999, 0.0);
        opt.step(&mut store, &[(a, vec![1.0, 1.0])], 1, 0.1).unwrap();
        assert!(store.get(a).data()[0] < 1.0);
        assert_eq!(store.get(frozen).data(), &[1.0, 1.0]);
        assert!(opt
            .step(&mut store, &[(frozen, vec![1.0, 1.0])], 2, 0.1)
            .is_err());
    }
}
