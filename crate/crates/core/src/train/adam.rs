//! Adam with per-element learning rates and resizable moment buffers
//! (splats are added and removed during training).

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Number of steps taken (shared by all elements for bias correction).
    pub steps: u64,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
            m: vec![0.0; len],
            v: vec![0.0; len],
            steps: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One update `p ← p − lr·m̂/(√v̂ + ε)`; `lr(i)` gives element `i`'s rate.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: impl Fn(usize) -> f64) {
        assert_eq!(params.len(), self.m.len(), "parameter/moment size mismatch");
        assert_eq!(grads.len(), self.m.len(), "gradient/moment size mismatch");
        self.steps += 1;
        let bc1 = 1.0 - self.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - self.beta2.powi(self.steps as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= lr(i) * mh / (vh.sqrt() + self.eps);
        }
    }

    /// Updates only the elements in `range` (sparse rows such as one
    /// embedding), without advancing other elements' moments.
    pub fn step_range(&mut self, params: &mut [f64], grads: &[f64], start: usize, lr: f64, steps: u64) {
        let bc1 = 1.0 - self.beta1.powi(steps as i32);
        let bc2 = 1.0 - self.beta2.powi(steps as i32);
        for (k, g) in grads.iter().enumerate() {
            let i = start + k;
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            params[i] -= lr * (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + self.eps);
        }
    }

    /// Rebuilds the moments for a new row layout: `sources[r]` is the old
    /// row feeding new row `r` (`None` → zero moments).
    pub fn remap_rows(&mut self, stride: usize, sources: &[Option<usize>]) {
        let mut m = vec![0.0; sources.len() * stride];
        let mut v = vec![0.0; sources.len() * stride];
        for (r, src) in sources.iter().enumerate() {
            if let Some(s) = src {
                m[r * stride..(r + 1) * stride].copy_from_slice(&self.m[s * stride..(s + 1) * stride]);
                v[r * stride..(r + 1) * stride].copy_from_slice(&self.v[s * stride..(s + 1) * stride]);
            }
        }
        self.m = m;
        self.v = v;
    }

    /// Zeroes the moments of one column of a row-major layout.
    pub fn reset_column(&mut self, stride: usize, column: usize) {
        for r in 0..self.m.len() / stride {
            self.m[r * stride + column] = 0.0;
            self.v[r * stride + column] = 0.0;
        }
    }
}
