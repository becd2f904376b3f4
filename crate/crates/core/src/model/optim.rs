use super::params::ParamSet;
use crate::tensor::Array;

/// Gradient descent with optional heavy-ball momentum.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    velocity: Vec<Option<Array<f32>>>,
}

impl Sgd {
    pub fn new(lr: f32, momentum: f32) -> Self {
        Self {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    /// Steps every parameter with a `Some` gradient.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<Array<f32>>]) {
        if self.momentum == 0.0 {
            params.apply(-self.lr, grads);
            return;
        }
        self.velocity.resize(grads.len(), None);
        let mut delta = vec![None; grads.len()];
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let v = self.velocity[i].get_or_insert_with(|| Array::zeros(g.shape().to_vec()));
            for (vv, &gv) in v.data_mut().iter_mut().zip(g.data()) {
                *vv = self.momentum * *vv + gv;
            }
            delta[i] = Some(v.clone());
        }
        params.apply(-self.lr, &delta);
    }

    /// Velocity buffers, `None` where no step has happened yet.
    pub fn velocity(&self) -> &[Option<Array<f32>>] {
        &self.velocity
    }

    pub fn set_velocity(&mut self, velocity: Vec<Option<Array<f32>>>) {
        self.velocity = velocity;
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    t: i32,
    m: Vec<Option<Array<f32>>>,
    v: Vec<Option<Array<f32>>>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<Array<f32>>]) {
        let delta = self.directions(grads);
        params.apply(-self.lr, &delta);
    }

    /// Bias-corrected update directions for `grads`, advancing the moment
    /// estimates. The caller applies `-lr ·` direction.
    pub fn directions(&mut self, grads: &[Option<Array<f32>>]) -> Vec<Option<Array<f32>>> {
        self.t += 1;
        self.m.resize(grads.len(), None);
        self.v.resize(grads.len(), None);
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let mut delta = vec![None; grads.len()];
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let m = self.m[i].get_or_insert_with(|| Array::zeros(g.shape().to_vec()));
            let v = self.v[i].get_or_insert_with(|| Array::zeros(g.shape().to_vec()));
            let mut d = Array::zeros(g.shape().to_vec());
            for (k, &gv) in g.data().iter().enumerate() {
                let mk = &mut m.data_mut()[k];
                *mk = self.beta1 * *mk + (1.0 - self.beta1) * gv;
                let mhat = *mk / c1;
                let vk = &mut v.data_mut()[k];
                *vk = self.beta2 * *vk + (1.0 - self.beta2) * gv * gv;
                let vhat = *vk / c2;
                d.data_mut()[k] = mhat / (vhat.sqrt() + self.eps);
            }
            delta[i] = Some(d);
        }
        delta
    }
}
