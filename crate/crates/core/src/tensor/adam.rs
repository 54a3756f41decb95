use super::{ParamStore, Scalar};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 coefficient added to the gradient as `weight_decay * theta`.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Adam with classic L2 weight decay folded into the gradient before the
/// moment updates.
#[derive(Clone, Debug)]
pub struct Adam<S> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(config: AdamConfig, params: &ParamStore<S>) -> Result<Self> {
        if config.lr < 0.0
            || !(0.0..1.0).contains(&config.beta1)
            || !(0.0..1.0).contains(&config.beta2)
            || config.eps <= 0.0
            || config.weight_decay < 0.0
        {
            return Err(Error::Config(format!("invalid Adam hyperparameters {config:?}")));
        }
        let zeros: Vec<Vec<S>> = params
            .iter()
            .map(|(_, _, t)| vec![S::zero(); t.shape().numel()])
            .collect();
        Ok(Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        })
    }

    /// Restores moments saved with [`Adam::moments`].
    pub fn from_state(
        config: AdamConfig,
        params: &ParamStore<S>,
        step: u64,
        m: Vec<Vec<S>>,
        v: Vec<Vec<S>>,
    ) -> Result<Self> {
        let mut adam = Self::new(config, params)?;
        if m.len() != adam.m.len() || v.len() != adam.v.len() {
            return Err(Error::dim("adam", "moment count does not match parameters"));
        }
        for (i, (mi, vi)) in m.iter().zip(&v).enumerate() {
            if mi.len() != adam.m[i].len() || vi.len() != adam.v[i].len() {
                return Err(Error::dim("adam", format!("moment {i} has the wrong size")));
            }
        }
        adam.step = step;
        adam.m = m;
        adam.v = v;
        Ok(adam)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<S>], &[Vec<S>]) {
        (&self.m, &self.v)
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// One update of every parameter from its stored gradient. Parameters
    /// without a gradient are left alone.
    pub fn step(&mut self, params: &mut ParamStore<S>) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::dim("adam", "parameter count changed since construction"));
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (S::lit(c.beta1), S::lit(c.beta2));
        let bc1 = S::lit(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = S::lit(1.0 - c.beta2.powi(self.step as i32));
        let lr = S::lit(c.lr);
        let eps = S::lit(c.eps);
        let wd = S::lit(c.weight_decay);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let t = params.get_mut(id);
            let Some(grad) = t.grad().map(<[S]>::to_vec) else {
                continue;
            };
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            for (((theta, g), m), v) in t.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = *g + wd * *theta;
                *m = b1 * *m + (S::one() - b1) * g;
                *v = b2 * *v + (S::one() - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *theta -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            t.ensure_finite("adam_step")?;
        }
        Ok(())
    }
}
