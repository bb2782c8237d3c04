//! Small fully connected network in f64 with hand-written backprop.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Linear,
    Sigmoid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `outputs × inputs`.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Layer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            w: vec![0.0; inputs * outputs],
            b: vec![0.0; outputs],
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.outputs)
            .map(|o| {
                let row = &self.w[o * self.inputs..(o + 1) * self.inputs];
                self.b[o] + row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>()
            })
            .collect()
    }
}

/// Hidden layers use ReLU; the output layer uses `output`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Layer>,
    pub output: Activation,
}

/// Pre- and post-activation values of one forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    pub input: Vec<f64>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.post.last().expect("at least one layer")
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Mlp {
    /// Uniform `±1/sqrt(fan_in)` initialisation, with the last layer
    /// scaled down to `±3e-3` so initial outputs sit near the activation's
    /// centre.
    pub fn new(dims: &[usize], output: Activation, rng: &mut impl Rng) -> Self {
        assert!(dims.len() >= 2, "need input and output widths");
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(k, d)| {
                let bound = if k == last { 3e-3 } else { 1.0 / (d[0] as f64).sqrt() };
                let mut layer = Layer::zeros(d[0], d[1]);
                for v in layer.w.iter_mut().chain(layer.b.iter_mut()) {
                    *v = rng.gen_range(-bound..=bound);
                }
                layer
            })
            .collect();
        Self { layers, output }
    }

    pub fn zeros(dims: &[usize], output: Activation) -> Self {
        Self {
            layers: dims.windows(2).map(|d| Layer::zeros(d[0], d[1])).collect(),
            output,
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.layers[0].inputs];
        d.extend(self.layers.iter().map(|l| l.outputs));
        d
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.outputs).unwrap_or(0)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.trace(x).post.pop().expect("at least one layer")
    }

    pub fn trace(&self, x: &[f64]) -> Trace {
        assert_eq!(x.len(), self.input_dim(), "input width");
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let z = layer.apply(post.last().map(Vec::as_slice).unwrap_or(x));
            let a = if k < last {
                z.iter().map(|v| v.max(0.0)).collect()
            } else {
                match self.output {
                    Activation::Linear => z.clone(),
                    Activation::Sigmoid => z.iter().map(|v| sigmoid(*v)).collect(),
                }
            };
            pre.push(z);
            post.push(a);
        }
        Trace {
            input: x.to_vec(),
            pre,
            post,
        }
    }

    /// Backpropagates `grad_out` (∂L/∂output) through one traced pass.
    /// Adds parameter gradients into `acc` and returns ∂L/∂input.
    pub fn backward(&self, trace: &Trace, grad_out: &[f64], acc: &mut Mlp) -> Vec<f64> {
        let last = self.layers.len() - 1;
        let mut delta: Vec<f64> = match self.output {
            Activation::Linear => grad_out.to_vec(),
            Activation::Sigmoid => grad_out
                .iter()
                .zip(&trace.post[last])
                .map(|(g, s)| g * s * (1.0 - s))
                .collect(),
        };
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let input = if k == 0 { &trace.input } else { &trace.post[k - 1] };
            let g = &mut acc.layers[k];
            for o in 0..layer.outputs {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                g.b[o] += d;
                let row = &mut g.w[o * layer.inputs..(o + 1) * layer.inputs];
                for (gw, x) in row.iter_mut().zip(input) {
                    *gw += d * x;
                }
            }
            let mut prev = vec![0.0; layer.inputs];
            for o in 0..layer.outputs {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let row = &layer.w[o * layer.inputs..(o + 1) * layer.inputs];
                for (p, w) in prev.iter_mut().zip(row) {
                    *p += d * w;
                }
            }
            if k > 0 {
                for (p, z) in prev.iter_mut().zip(&trace.pre[k - 1]) {
                    if *z <= 0.0 {
                        *p = 0.0;
                    }
                }
            }
            delta = prev;
        }
        delta
    }

    /// Zero-valued parameter accumulator of the same shape.
    pub fn zeros_like(&self) -> Mlp {
        Self::zeros(&self.dims(), self.output)
    }

    pub fn params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.w.iter().chain(&l.b).copied())
            .collect()
    }

    pub fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.num_params());
        let mut it = p.iter();
        for l in &mut self.layers {
            for v in l.w.iter_mut().chain(l.b.iter_mut()) {
                *v = *it.next().expect("length checked");
            }
        }
    }

    /// `self += scale · other`, elementwise over parameters.
    pub fn add_scaled(&mut self, other: &Mlp, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.w.iter_mut().zip(&b.w) {
                *x += scale * y;
            }
            for (x, y) in a.b.iter_mut().zip(&b.b) {
                *x += scale * y;
            }
        }
    }

    pub fn same_shape(&self, other: &Mlp) -> bool {
        self.dims() == other.dims() && self.output == other.output
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.iter().chain(&l.b).all(|v| v.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_network_outputs_sigmoid_of_bias() {
        let net = Mlp::zeros(&[4, 8, 8, 2], Activation::Sigmoid);
        assert_eq!(net.forward(&[1.0, -2.0, 3.0, 0.5]), vec![0.5, 0.5]);
    }

    #[test]
    fn param_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Mlp::new(&[3, 5, 2], Activation::Linear, &mut rng);
        let mut other = net.zeros_like();
        other.set_params(&net.params());
        assert_eq!(other, net);
        assert_eq!(net.num_params(), 3 * 5 + 5 + 5 * 2 + 2);
    }

    #[test]
    fn input_gradient_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for output in [Activation::Linear, Activation::Sigmoid] {
            let net = Mlp::new(&[4, 16, 16, 1], output, &mut rng);
            let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut acc = net.zeros_like();
            let gx = net.backward(&net.trace(&x), &[1.0], &mut acc);
            for d in 0..4 {
                let h = 1e-5;
                let mut xp = x.clone();
                xp[d] += h;
                let mut xm = x.clone();
                xm[d] -= h;
                let fd = (net.forward(&xp)[0] - net.forward(&xm)[0]) / (2.0 * h);
                assert!((fd - gx[d]).abs() <= 1e-6 * fd.abs().max(1e-3), "{fd} vs {}", gx[d]);
            }
        }
    }
}
