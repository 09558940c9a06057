use serde::{Deserialize, Serialize};

use super::kcn::{Kcn, KcnGrads};
use super::layers::{Grads, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for one flat parameter vector.
#[derive(Debug, Clone, Default, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Moments {
    fn update(&mut self, cfg: &AdamConfig, t: u64, param: &mut [f64], grad: &[f64]) {
        if self.m.len() != param.len() {
            self.m = vec![0.0; param.len()];
            self.v = vec![0.0; param.len()];
        }
        let bc1 = 1.0 - cfg.beta1.powi(t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(t as i32);
        for i in 0..param.len() {
            let g = grad[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            param[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
}

/// Adam over the backbone parameters and the KCN jointly.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    backbone: Vec<Moments>,
    kcn: Vec<(Moments, Moments)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            backbone: Vec::new(),
            kcn: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &Grads,
        kcn: &mut Kcn,
        kcn_grads: &KcnGrads,
    ) {
        self.step += 1;
        let t = self.step;
        self.backbone
            .resize_with(params.tensors.len(), Moments::default);
        let mut scratch = Vec::new();
        for ((tensor, g), moments) in params
            .tensors
            .iter_mut()
            .zip(&grads.0)
            .zip(&mut self.backbone)
        {
            scratch.clear();
            scratch.extend(tensor.data.iter().map(|&v| v as f64));
            let g64: Vec<f64> = g.iter().map(|&v| v as f64).collect();
            moments.update(&self.config, t, &mut scratch, &g64);
            for (dst, &src) in tensor.data.iter_mut().zip(&scratch) {
                *dst = src as f32;
            }
        }
        self.kcn.resize_with(kcn.layers.len(), Default::default);
        for ((layer, g), (mw, mb)) in kcn
            .layers
            .iter_mut()
            .zip(&kcn_grads.layers)
            .zip(&mut self.kcn)
        {
            let w = layer.weight.as_slice_mut().expect("standard layout");
            mw.update(
                &self.config,
                t,
                w,
                g.weight.as_slice().expect("standard layout"),
            );
            let b = layer.bias.as_slice_mut().expect("standard layout");
            mb.update(
                &self.config,
                t,
                b,
                g.bias.as_slice().expect("standard layout"),
            );
        }
    }
}
