use super::{Elem, TensorError};
use ndarray::ArrayD;
use std::collections::HashMap;

/// One named parameter with its gradient and Adam state.
#[derive(Debug, Clone)]
pub struct Param<E: Elem> {
    pub value: ArrayD<E>,
    pub grad: ArrayD<E>,
    pub m: ArrayD<E>,
    pub v: ArrayD<E>,
    pub step: u64,
}

impl<E: Elem> Param<E> {
    fn new(value: ArrayD<E>) -> Self {
        let zeros = ArrayD::zeros(value.raw_dim());
        Param {
            grad: zeros.clone(),
            m: zeros.clone(),
            v: zeros,
            step: 0,
            value,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Named parameters with deterministic (insertion) iteration order.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<E: Elem> {
    names: Vec<String>,
    params: Vec<Param<E>>,
    index: HashMap<String, usize>,
    grads_live: bool,
}

impl<E: Elem> ParamSet<E> {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            params: Vec::new(),
            index: HashMap::new(),
            grads_live: false,
        }
    }

    pub fn add(&mut self, name: &str, value: ArrayD<E>) -> Result<(), TensorError> {
        if self.index.contains_key(name) {
            return Err(TensorError::DuplicateParam(name.to_string()));
        }
        self.index.insert(name.to_string(), self.params.len());
        self.names.push(name.to_string());
        self.params.push(Param::new(value));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Result<&Param<E>, TensorError> {
        self.index_of(name)
            .map(|i| &self.params[i])
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<E>, TensorError> {
        let i = self
            .index_of(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        Ok(&mut self.params[i])
    }

    pub fn value_at(&self, idx: usize) -> &ArrayD<E> {
        &self.params[idx].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<E>)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.params.iter())
    }

    pub(crate) fn accumulate_grad(&mut self, idx: usize, g: &ArrayD<E>) -> Result<(), TensorError> {
        let p = &mut self.params[idx];
        if p.grad.shape() != g.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "accumulate_grad",
                lhs: p.grad.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        p.grad += g;
        Ok(())
    }

    pub(crate) fn set_grads_live(&mut self) {
        self.grads_live = true;
    }

    pub fn grads_live(&self) -> bool {
        self.grads_live
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(E::zero());
        }
        self.grads_live = false;
    }

    /// Global l2 norm of all gradients.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.iter())
            .map(|g| g.as_f64() * g.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    /// Scale all gradients so the global norm is at most `max_norm`.
    /// Returns the pre-clip norm. `max_norm` of infinity disables clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if max_norm.is_finite() && norm > max_norm && norm > 0.0 {
            let scale = E::from_f64(max_norm / norm);
            for p in &mut self.params {
                p.grad.mapv_inplace(|g| g * scale);
            }
        }
        norm
    }

    /// Standard Adam step with bias correction, then zeroes the gradients.
    /// Errors if no backward pass has populated gradients since the last
    /// step.
    pub fn adam_step(&mut self, lr: f64, cfg: &AdamConfig) -> Result<(), TensorError> {
        if !self.grads_live {
            return Err(TensorError::MissingGradient);
        }
        let b1 = E::from_f64(cfg.beta1);
        let b2 = E::from_f64(cfg.beta2);
        let one = E::one();
        let eps = E::from_f64(cfg.eps);
        let lr_e = E::from_f64(lr);
        for p in &mut self.params {
            p.step += 1;
            let bc1 = one - E::from_f64(cfg.beta1.powi(p.step as i32));
            let bc2 = one - E::from_f64(cfg.beta2.powi(p.step as i32));
            ndarray::Zip::from(&mut p.m)
                .and(&p.grad)
                .for_each(|m, &g| *m = b1 * *m + (one - b1) * g);
            ndarray::Zip::from(&mut p.v)
                .and(&p.grad)
                .for_each(|v, &g| *v = b2 * *v + (one - b2) * g * g);
            ndarray::Zip::from(&mut p.value)
                .and(&p.m)
                .and(&p.v)
                .for_each(|val, &m, &v| {
                    let m_hat = m / bc1;
                    let v_hat = v / bc2;
                    *val = *val - lr_e * m_hat / (v_hat.sqrt() + eps);
                });
        }
        self.zero_grads();
        Ok(())
    }

    /// `self <- momentum * self + (1 - momentum) * source`, elementwise.
    pub fn ema_from(&mut self, source: &ParamSet<E>, momentum: f64) -> Result<(), TensorError> {
        self.check_structure(source)?;
        let m = E::from_f64(momentum);
        let one = E::one();
        for (p, q) in self.params.iter_mut().zip(source.params.iter()) {
            ndarray::Zip::from(&mut p.value)
                .and(&q.value)
                .for_each(|t, &s| *t = m * *t + (one - m) * s);
        }
        Ok(())
    }

    fn check_structure(&self, other: &ParamSet<E>) -> Result<(), TensorError> {
        if self.names != other.names {
            return Err(TensorError::StructureMismatch(format!(
                "names differ: {:?} vs {:?}",
                self.names, other.names
            )));
        }
        for ((n, p), (_, q)) in self.iter().zip(other.iter()) {
            if p.value.shape() != q.value.shape() {
                return Err(TensorError::StructureMismatch(format!(
                    "shape of '{n}' differs: {:?} vs {:?}",
                    p.value.shape(),
                    q.value.shape()
                )));
            }
        }
        Ok(())
    }

    /// Clone the parameters whose names start with `prefix` into a fresh set
    /// (values only; grads/optimizer state reset). Used for EMA targets.
    pub fn subset(&self, prefix: &str) -> ParamSet<E> {
        let mut out = ParamSet::new();
        for (name, p) in self.iter() {
            if name.starts_with(prefix) {
                out.add(name, p.value.clone()).expect("unique names");
            }
        }
        out
    }

    /// FNV-1a hash over names and value bit patterns; used to assert that a
    /// frozen set really did not move.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |byte: u8| {
            h ^= byte as u64;
            h = h.wrapping_mul(0x1000_0000_01b3);
        };
        for (name, p) in self.iter() {
            for b in name.as_bytes() {
                eat(*b);
            }
            for v in p.value.iter() {
                for b in v.to_bits_u64().to_le_bytes() {
                    eat(b);
                }
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    fn scalar_set(v: f64) -> ParamSet<f64> {
        let mut ps = ParamSet::new();
        ps.add("w", arr1(&[v]).into_dyn()).unwrap();
        ps
    }

    #[test]
    fn adam_first_step_matches_hand_computation() {
        let mut ps = scalar_set(1.0);
        ps.get_mut("w").unwrap().grad.fill(1.0);
        ps.set_grads_live();
        ps.adam_step(1e-3, &AdamConfig::default()).unwrap();
        // Hand-computed step 1 with bias correction:
        // m_hat = 1, v_hat = 1 -> delta = lr / (1 + eps)
        let expect = 1.0 - 1e-3 / (1.0 + 1e-8);
        let got = ps.get("w").unwrap().value[[0]];
        assert!((got - expect).abs() < 1e-15, "{got} vs {expect}");
    }

    #[test]
    fn adam_zero_grad_keeps_param() {
        let mut ps = scalar_set(0.7);
        ps.set_grads_live();
        ps.adam_step(1e-2, &AdamConfig::default()).unwrap();
        assert_eq!(ps.get("w").unwrap().value[[0]], 0.7);
    }

    #[test]
    fn adam_zero_lr_updates_moments_only() {
        let mut ps = scalar_set(0.5);
        ps.get_mut("w").unwrap().grad.fill(2.0);
        ps.set_grads_live();
        ps.adam_step(0.0, &AdamConfig::default()).unwrap();
        let p = ps.get("w").unwrap();
        assert_eq!(p.value[[0]], 0.5);
        assert!(p.m[[0]] != 0.0 && p.v[[0]] != 0.0);
        assert_eq!(p.step, 1);
    }

    #[test]
    fn adam_without_backward_errors() {
        let mut ps = scalar_set(0.0);
        assert!(matches!(
            ps.adam_step(1e-3, &AdamConfig::default()),
            Err(TensorError::MissingGradient)
        ));
    }

    #[test]
    fn ema_basic_and_identity() {
        let mut target = scalar_set(0.0);
        let source = scalar_set(1.0);
        target.ema_from(&source, 0.99).unwrap();
        assert!((target.get("w").unwrap().value[[0]] - 0.01).abs() < 1e-15);
        let mut frozen = scalar_set(0.3);
        frozen.ema_from(&source, 1.0).unwrap();
        assert_eq!(frozen.get("w").unwrap().value[[0]], 0.3);
    }

    #[test]
    fn ema_converges_geometrically() {
        let mut target = scalar_set(0.0);
        let source = scalar_set(1.0);
        let m: f64 = 0.9;
        for k in 1..=20 {
            target.ema_from(&source, m).unwrap();
            // Closed form: 1 - m^k.
            let expect = 1.0 - m.powi(k);
            let got = target.get("w").unwrap().value[[0]];
            assert!((got - expect).abs() < 1e-12, "step {k}: {got} vs {expect}");
        }
    }

    #[test]
    fn ema_structure_mismatch_errors() {
        let mut a = scalar_set(0.0);
        let mut b = ParamSet::<f64>::new();
        b.add("other", arr1(&[1.0]).into_dyn()).unwrap();
        assert!(matches!(
            a.ema_from(&b, 0.5),
            Err(TensorError::StructureMismatch(_))
        ));
    }

    #[test]
    fn clip_grad_norm_scales() {
        let mut ps = ParamSet::<f64>::new();
        ps.add("a", arr1(&[3.0, 4.0]).into_dyn()).unwrap();
        ps.get_mut("a").unwrap().grad.assign(&arr1(&[3.0, 4.0]).into_dyn());
        let norm = ps.clip_grad_norm(1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        assert!((ps.grad_norm() - 1.0).abs() < 1e-12);
        // Infinity disables clipping.
        ps.get_mut("a").unwrap().grad.assign(&arr1(&[3.0, 4.0]).into_dyn());
        ps.clip_grad_norm(f64::INFINITY);
        assert!((ps.grad_norm() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn duplicate_param_rejected() {
        let mut ps = scalar_set(0.0);
        assert!(matches!(
            ps.add("w", arr1(&[1.0]).into_dyn()),
            Err(TensorError::DuplicateParam(_))
        ));
    }
}
