//! Adam update rule and global-norm gradient clipping.

use super::{ParamId, ParamStore, Real};
use crate::error::{Error, Result};

/// First/second moment accumulators for one [`ParamStore`].
pub struct AdamState {
    m: Vec<Vec<Real>>,
    v: Vec<Vec<Real>>,
    step: u64,
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
}

impl AdamState {
    /// Fresh state with the optimizer's standard defaults
    /// (beta1 = 0.9, beta2 = 0.999, eps = 1e-8).
    pub fn new(store: &ParamStore) -> Self {
        let m = store
            .ids()
            .map(|id| vec![0.0; store.value(id).numel()])
            .collect::<Vec<_>>();
        let v = m.clone();
        AdamState {
            m,
            v,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// Global L2 norm across all provided gradient buffers.
pub fn global_norm(grads: &[Option<Vec<Real>>]) -> Real {
    let mut sq = 0.0;
    for g in grads.iter().flatten() {
        for &v in g {
            sq += v * v;
        }
    }
    sq.sqrt()
}

/// If the global L2 norm exceeds `max_norm`, scale every gradient by
/// `max_norm / norm`; otherwise leave them unchanged. Returns the
/// pre-clip norm.
pub fn clip_global_norm(grads: &mut [Option<Vec<Real>>], max_norm: Real) -> Result<Real> {
    if max_norm <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "clip_global_norm: max_norm must be positive, got {max_norm}"
        )));
    }
    let norm = global_norm(grads);
    if !norm.is_finite() {
        return Err(Error::NonFinite("gradient global norm".into()));
    }
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    Ok(norm)
}

/// One bias-corrected Adam update over every trainable parameter.
/// `grads` is aligned with the store's parameter order; `None` entries
/// (non-trainable buffers) are skipped.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &[Option<Vec<Real>>],
    state: &mut AdamState,
    lr: Real,
) -> Result<()> {
    if lr <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "adam_step: learning rate must be positive, got {lr}"
        )));
    }
    if grads.len() != store.len() {
        return Err(Error::InvalidArgument(format!(
            "adam_step: {} gradient buffers for {} parameters",
            grads.len(),
            store.len()
        )));
    }
    state.step += 1;
    let t = state.step;
    let bc1 = 1.0 - state.beta1.powi(t as i32);
    let bc2 = 1.0 - state.beta2.powi(t as i32);
    for (idx, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        let id = ParamId(idx);
        if !store.is_trainable(id) {
            continue;
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of parameter `{}`",
                store.name(id)
            )));
        }
        let value = store.value_mut(id);
        if g.len() != value.numel() {
            return Err(Error::InvalidArgument(format!(
                "adam_step: gradient length {} does not match parameter `{}`",
                g.len(),
                idx
            )));
        }
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
        for (((p, &gv), mv), vv) in value.data_mut().iter_mut().zip(g).zip(m).zip(v) {
            *mv = b1 * *mv + (1.0 - b1) * gv;
            *vv = b2 * *vv + (1.0 - b2) * gv * gv;
            let mhat = *mv / bc1;
            let vhat = *vv / bc2;
            *p -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store_with(values: Vec<Real>) -> (ParamStore, ParamId) {
        let mut store = ParamStore::new();
        let n = values.len();
        let id = store.register("p", Tensor::new(vec![n], values).unwrap());
        (store, id)
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let (mut store, id) = store_with(vec![1.0, -2.0, 3.0]);
        let mut state = AdamState::new(&store);
        let grads = vec![Some(vec![0.0; 3])];
        adam_step(&mut store, &grads, &mut state, 0.1).unwrap();
        assert_eq!(store.value(id).data(), &[1.0, -2.0, 3.0]);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn constant_gradient_moves_against_its_sign() {
        let (mut store, id) = store_with(vec![0.0, 0.0]);
        let mut state = AdamState::new(&store);
        let grads = vec![Some(vec![2.0, -0.5])];
        for _ in 0..20 {
            adam_step(&mut store, &grads, &mut state, 0.01).unwrap();
        }
        let p = store.value(id).data();
        assert!(p[0] < 0.0, "positive gradient must decrease the parameter");
        assert!(p[1] > 0.0, "negative gradient must increase the parameter");
    }

    #[test]
    fn single_step_on_square_decreases_x() {
        // f(x) = x^2 from x = 1 with lr = 0.1: first Adam step is
        // x - lr * g / (|g| + eps) ~= 1 - 0.1.
        let (mut store, id) = store_with(vec![1.0]);
        let mut state = AdamState::new(&store);
        let grads = vec![Some(vec![2.0])]; // f'(1) = 2
        adam_step(&mut store, &grads, &mut state, 0.1).unwrap();
        let x = store.value(id).data()[0];
        assert!(x < 1.0);
        assert!((x - 0.9).abs() < 1e-6, "first step magnitude is ~lr, got {x}");
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let (mut store, _) = store_with(vec![1.0]);
        let mut state = AdamState::new(&store);
        let grads = vec![Some(vec![Real::NAN])];
        let err = adam_step(&mut store, &grads, &mut state, 0.1).unwrap_err();
        assert!(err.to_string().contains("p"), "error should name the parameter: {err}");
    }

    #[test]
    fn clip_leaves_small_gradients_unchanged() {
        let mut grads = vec![Some(vec![3.0, 4.0])]; // norm 5
        let pre = clip_global_norm(&mut grads, 100.0).unwrap();
        assert_eq!(pre, 5.0);
        assert_eq!(grads[0].as_ref().unwrap().as_slice(), &[3.0, 4.0]);
    }

    #[test]
    fn clip_halves_when_norm_is_double() {
        let mut grads = vec![Some(vec![120.0]), Some(vec![160.0])]; // norm 200
        let pre = clip_global_norm(&mut grads, 100.0).unwrap();
        assert_eq!(pre, 200.0);
        assert_eq!(grads[0].as_ref().unwrap().as_slice(), &[60.0]);
        assert_eq!(grads[1].as_ref().unwrap().as_slice(), &[80.0]);
    }

    #[test]
    fn post_clip_norm_is_min_of_norm_and_threshold() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        for scale in [0.1, 30.0] {
            let mut grads: Vec<Option<Vec<Real>>> = (0..4)
                .map(|_| Some((0..25).map(|_| rng.gen_range(-scale..scale)).collect()))
                .collect();
            let pre = clip_global_norm(&mut grads, 100.0).unwrap();
            let post = global_norm(&grads);
            assert!((post - pre.min(100.0)).abs() < 1e-10, "pre {pre}, post {post}");
        }
    }
}
