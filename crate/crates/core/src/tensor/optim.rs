use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Learning rate and decoupled weight decay shared by a set of parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub lr: f64,
    pub weight_decay: f64,
}

#[derive(Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Debug, Default)]
pub struct AdamW {
    config: AdamWConfig,
    step: u64,
    moments: HashMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One optimizer step over `(name, param, grad, group)` entries.
    pub fn step<'a, I>(&mut self, entries: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a mut Tensor, &'a Tensor, ParamGroup)>,
    {
        let entries: Vec<_> = entries.into_iter().collect();
        for (name, p, g, _) in &entries {
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    "adamw",
                    format!("`{name}` has shape {:?}, gradient {:?}", p.shape(), g.shape()),
                ));
            }
        }
        self.step += 1;
        let AdamWConfig { beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (name, p, g, group) in entries {
            let st = self.moments.entry(name.to_string()).or_insert_with(|| Moments {
                m: vec![0.0; p.len()],
                v: vec![0.0; p.len()],
            });
            if st.m.len() != p.len() {
                return Err(Error::shape("adamw", format!("moment size changed for `{name}`")));
            }
            let decay = 1.0 - group.lr * group.weight_decay;
            for (((x, &gi), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(st.m.iter_mut())
                .zip(st.v.iter_mut())
            {
                *x *= decay;
                *m = beta1 * *m + (1.0 - beta1) * gi;
                *v = beta2 * *v + (1.0 - beta2) * gi * gi;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *x -= group.lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decay_only_step() {
        let mut opt = AdamW::new(AdamWConfig::default());
        let mut p = Tensor::from_vec(vec![1.0, -3.0]);
        let g = Tensor::zeros(&[2]);
        let grp = ParamGroup { lr: 1e-4, weight_decay: 1e-4 };
        opt.step([("w", &mut p, &g, grp)]).unwrap();
        let f = 1.0 - 1e-8;
        assert!((p.data()[0] - f).abs() <= f64::EPSILON);
        assert!((p.data()[1] + 3.0 * f).abs() <= 4.0 * f64::EPSILON);
    }

    #[test]
    fn first_step_matches_formula() {
        let mut opt = AdamW::new(AdamWConfig::default());
        let mut p = Tensor::from_vec(vec![0.5]);
        let g = Tensor::from_vec(vec![1.0]);
        let grp = ParamGroup { lr: 0.1, weight_decay: 0.0 };
        opt.step([("w", &mut p, &g, grp)]).unwrap();
        // m = 0.1, v = 0.001; bias corrected both become 1.
        let expected = 0.5 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((p.item() - expected).abs() < 1e-15);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn groups_scale_updates() {
        let mut opt = AdamW::new(AdamWConfig::default());
        let mut a = Tensor::from_vec(vec![0.0]);
        let mut b = Tensor::from_vec(vec![0.0]);
        let g = Tensor::from_vec(vec![0.3]);
        let base = ParamGroup { lr: 1e-4, weight_decay: 0.0 };
        let proxy = ParamGroup { lr: 1.0, weight_decay: 0.0 };
        opt.step([("a", &mut a, &g, base), ("b", &mut b, &g, proxy)]).unwrap();
        assert!((b.item() / a.item() - 1e4).abs() < 1e-6);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut opt = AdamW::new(AdamWConfig::default());
        let mut p = Tensor::zeros(&[2]);
        let g = Tensor::zeros(&[3]);
        let grp = ParamGroup { lr: 1.0, weight_decay: 0.0 };
        assert!(opt.step([("w", &mut p, &g, grp)]).is_err());
        assert_eq!(opt.steps(), 0);
    }
}
