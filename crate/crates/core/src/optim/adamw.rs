use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay.
///
/// Moments are kept per parameter; entries that are frozen, never receive a
/// gradient, or sit in a pinned row are left untouched.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(params: &ParamStore<T>, config: AdamWConfig) -> Self {
        let m = params.iter().map(|(_, e)| Tensor::zeros(e.value.shape())).collect();
        let v = params.iter().map(|(_, e)| Tensor::zeros(e.value.shape())).collect();
        AdamW {
            config,
            step: 0,
            m,
            v,
        }
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Apply one update at learning rate `lr`. Fails before touching any
    /// weight if a gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)], lr: f64) -> Result<()> {
        for (id, g) in grads {
            let entry = params.get(*id);
            if g.shape() != entry.value.shape() {
                return Err(Error::shape(
                    "adamw_step",
                    format!("`{}`: gradient {:?} vs value {:?}", entry.name, g.shape(), entry.value.shape()),
                ));
            }
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient(entry.name.clone()));
            }
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let bc1 = T::of(1.0 - c.beta1.powi(t));
        let bc2 = T::of(1.0 - c.beta2.powi(t));
        let lr_t = T::of(lr);
        let eps = T::of(c.eps);

        for (id, g) in grads {
            let entry = params.get_mut(*id);
            if !entry.trainable {
                continue;
            }
            let decay = if entry.decay {
                T::of(lr * c.weight_decay)
            } else {
                T::zero()
            };
            let row_len = entry.value.shape().get(1..).map(|s| s.iter().product()).unwrap_or(1);
            let skip = entry
                .pinned_row
                .map(|r| r * row_len..(r + 1) * row_len)
                .unwrap_or(0..0);
            let m = self.m[id.index()].data_mut();
            let v = self.v[id.index()].data_mut();
            let w = entry.value.data_mut();
            for (i, &gi) in g.data().iter().enumerate() {
                if skip.contains(&i) {
                    continue;
                }
                m[i] = b1 * m[i] + one_b1 * gi;
                v[i] = b2 * v[i] + one_b2 * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                w[i] = w[i] - lr_t * m_hat / (v_hat.sqrt() + eps) - decay * w[i];
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParamEntry;

    fn scalar_store(w: f64) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::from_vec(vec![w])).unwrap();
        (s, id)
    }

    fn step_once(wd: f64) -> f64 {
        let (mut s, id) = scalar_store(1.0);
        let mut opt = AdamW::new(
            &s,
            AdamWConfig {
                weight_decay: wd,
                ..AdamWConfig::default()
            },
        );
        opt.step(&mut s, &[(id, Tensor::from_vec(vec![0.5]))], 0.1).unwrap();
        assert_eq!(opt.steps(), 1);
        s.value(id).data()[0]
    }

    #[test]
    fn first_step_hand_oracle() {
        // m̂ = 0.5, v̂ = 0.25 → Δ = 0.1·0.5/(0.5+1e-8)
        assert!((step_once(0.0) - 0.9).abs() < 1e-6);
        assert!((step_once(0.01) - 0.899).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_leaves_weights() {
        let (mut s, id) = scalar_store(0.7);
        let mut opt = AdamW::new(&s, AdamWConfig { weight_decay: 0.0, ..Default::default() });
        for _ in 0..3 {
            opt.step(&mut s, &[(id, Tensor::from_vec(vec![0.0]))], 0.1).unwrap();
        }
        assert_eq!(s.value(id).data()[0], 0.7);
    }

    #[test]
    fn zero_decay_matches_scalar_adam() {
        let grads = [0.3, -1.2, 0.05, 2.0, -0.7];
        let (mut s, id) = scalar_store(0.4);
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut opt = AdamW::new(&s, cfg);
        let (mut w, mut m, mut v) = (0.4f64, 0.0f64, 0.0f64);
        for (t, &g) in grads.iter().enumerate() {
            let t = t as i32 + 1;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            w -= 0.01 * mh / (vh.sqrt() + 1e-8);
            opt.step(&mut s, &[(id, Tensor::from_vec(vec![g]))], 0.01).unwrap();
            assert!((s.value(id).data()[0] - w).abs() < 1e-15);
        }
    }

    #[test]
    fn first_step_is_sign_like() {
        for g in [1e-3, 0.5, -3.0, 1e4] {
            let (mut s, id) = scalar_store(0.0);
            let mut opt = AdamW::new(&s, AdamWConfig { weight_decay: 0.0, ..Default::default() });
            opt.step(&mut s, &[(id, Tensor::from_vec(vec![g]))], 0.1).unwrap();
            let delta = s.value(id).data()[0].abs();
            assert!((0.999 * 0.1..=0.1).contains(&delta), "{g}: {delta}");
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let (mut s, id) = scalar_store(1.0);
        let mut opt = AdamW::new(&s, AdamWConfig::default());
        let err = opt
            .step(&mut s, &[(id, Tensor::from_vec(vec![f64::NAN]))], 0.1)
            .unwrap_err();
        assert_eq!(err.to_string(), "non-finite gradient in parameter `w`");
        assert_eq!(s.value(id).data()[0], 1.0);
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn pinned_row_and_no_decay_entries() {
        let mut s = ParamStore::<f64>::new();
        let id = s
            .insert(ParamEntry {
                name: "table".into(),
                value: Tensor::new(&[2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap(),
                trainable: true,
                decay: false,
                pinned_row: Some(0),
            })
            .unwrap();
        let mut opt = AdamW::new(&s, AdamWConfig::default());
        let g = Tensor::new(&[2, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        opt.step(&mut s, &[(id, g)], 0.1).unwrap();
        // pinned row untouched despite gradient, other row untouched since g=0 and no decay
        assert_eq!(s.value(id).data(), &[0.0, 0.0, 1.0, 1.0]);
    }
}
