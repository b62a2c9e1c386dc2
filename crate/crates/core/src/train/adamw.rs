use dbat_tensor::{Gradients, ParamStore, Precision, Tensor};

use crate::error::{DbatError, Result};

/// Parameters exempt from weight decay: every 1-d tensor (biases and
/// normalization scales/offsets) and relative position tables.
pub fn decay_exempt(name: &str, value: &Tensor) -> bool {
    value.ndim() == 1 || name.ends_with("relative_position_bias_table")
}

/// AdamW with decoupled weight decay. Moments are kept per parameter in
/// store order and rounded like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub precision: Precision,
    /// Number of steps taken.
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect();
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            precision: Precision::Single,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update. Parameters that received no gradient are left untouched
    /// (their moments too).
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(DbatError::Argument(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let prec = self.precision;
        for (i, p) in store.iter_mut().enumerate() {
            let Some(g) = grads.param(&p.name) else { continue };
            if !p.requires_grad {
                continue;
            }
            let decay = if decay_exempt(&p.name, &p.value) { 0.0 } else { self.weight_decay };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                let gj = g.data()[j];
                let mut x = *w * (1.0 - lr * decay);
                m[j] = prec.round(self.beta1 * m[j] + (1.0 - self.beta1) * gj);
                v[j] = prec.round(self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj);
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                x -= lr * mhat / (vhat.sqrt() + self.eps);
                *w = prec.round(x);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use dbat_tensor::Graph;

    #[test]
    fn exemptions() {
        assert!(decay_exempt("a.bias", &Tensor::zeros([3])));
        assert!(decay_exempt("x.attn.relative_position_bias_table", &Tensor::zeros([9, 2])));
        assert!(!decay_exempt("a.weight", &Tensor::zeros([3, 3])));
    }

    #[test]
    fn decoupled_decay_without_gradient_signal() {
        // zero gradient: the Adam term vanishes and only the decay acts
        let mut store = ParamStore::new();
        store.insert("w", Tensor::full([2, 2], 1.0)).unwrap();
        store.insert("b", Tensor::full([2], 1.0)).unwrap();
        let mut opt = AdamW::new(&store, 0.9, 0.999, 1e-8, 0.5);
        opt.precision = Precision::Double;
        let g = Graph::new(Precision::Double);
        let w = g.param(&store, "w").unwrap();
        let b = g.param(&store, "b").unwrap();
        let loss = w.scale(0.0).sum_all().add(&b.scale(0.0).sum_all()).unwrap();
        let grads = g.backward(loss).unwrap();
        opt.step(&mut store, &grads, 0.1).unwrap();
        assert!(store.value("w").unwrap().data().iter().all(|&x| (x - 0.95).abs() < 1e-15));
        assert!(store.value("b").unwrap().data().iter().all(|&x| x == 1.0));
    }
}
