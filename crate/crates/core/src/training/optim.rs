use crate::model::layers::Parameters;

/// Adam with bias correction, moments kept as flat vectors in parameter
/// traversal order.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

pub(crate) fn flatten(p: &impl Parameters) -> Vec<f64> {
    let mut out = Vec::new();
    p.visit("", &mut |_, a| out.extend(a.iter().copied()));
    out
}

impl Adam {
    pub fn new(learning_rate: f64, num_parameters: usize) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; num_parameters],
            v: vec![0.0; num_parameters],
        }
    }

    pub fn step(&mut self, params: &mut impl Parameters, grad: &impl Parameters) {
        let g = flatten(grad);
        assert_eq!(g.len(), self.m.len(), "gradient size");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let mut k = 0;
        params.visit_mut("", &mut |_, mut a| {
            for x in a.iter_mut() {
                let gi = g[k];
                self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * gi;
                self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * gi * gi;
                let m_hat = self.m[k] / bc1;
                let v_hat = self.v[k] / bc2;
                *x -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
                k += 1;
            }
        });
    }
}
