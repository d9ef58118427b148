use rand::Rng;

use super::{log_sigmoid, sigmoid, ModelError, Result};
use crate::feature_store::PreferenceTuple;

/// Dense tanh MLP with a scalar linear output.
///
/// Parameters live in one flat vector, layer by layer: the weight matrix
/// (row-major, `out × in`) followed by the bias.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterNet {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Flat gradient with the same layout as [`AdapterNet::params`].
pub type Gradient = Vec<f64>;

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl AdapterNet {
    fn with_sizes(input_dim: usize, hidden: &[usize]) -> Vec<usize> {
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(input_dim);
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        sizes
    }

    /// Uniform initialization in `±1/sqrt(fan_in)` for weights and biases.
    pub fn random<R: Rng>(input_dim: usize, hidden: &[usize], rng: &mut R) -> Self {
        let sizes = Self::with_sizes(input_dim, hidden);
        let mut params = Vec::with_capacity(param_count(&sizes));
        for w in sizes.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            for _ in 0..(w[0] * w[1] + w[1]) {
                params.push(rng.random_range(-bound..bound));
            }
        }
        Self { sizes, params }
    }

    pub fn zeros(input_dim: usize, hidden: &[usize]) -> Self {
        let sizes = Self::with_sizes(input_dim, hidden);
        let params = vec![0.0; param_count(&sizes)];
        Self { sizes, params }
    }

    /// Build from explicit `(weights, bias)` pairs, weights row-major
    /// `out × in`. The last layer must have a single output.
    pub fn from_layers(layers: Vec<(Vec<f64>, Vec<f64>)>, input_dim: usize) -> Result<Self> {
        let mut sizes = vec![input_dim];
        let mut params = Vec::new();
        for (w, b) in layers {
            let fan_in = *sizes.last().unwrap();
            if b.is_empty() || w.len() != fan_in * b.len() {
                return Err(ModelError::InvalidConfig(format!(
                    "layer weights have {} entries, expected {} × {}",
                    w.len(),
                    b.len(),
                    fan_in
                )));
            }
            sizes.push(b.len());
            params.extend(w);
            params.extend(b);
        }
        if sizes.len() < 2 || *sizes.last().unwrap() != 1 {
            return Err(ModelError::InvalidConfig("output layer must have one unit".into()));
        }
        Self::from_parts(sizes, params)
    }

    /// Rebuild from a layer-size list `[in, hidden.., 1]` and flat params.
    pub fn from_parts(sizes: Vec<usize>, params: Vec<f64>) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) || *sizes.last().unwrap() != 1 {
            return Err(ModelError::InvalidConfig(format!("invalid layer sizes {sizes:?}")));
        }
        if params.len() != param_count(&sizes) {
            return Err(ModelError::InvalidConfig(format!(
                "{} parameters for sizes {sizes:?}",
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(ModelError::InvalidConfig("non-finite parameter".into()));
        }
        Ok(Self { sizes, params })
    }

    /// Layer sizes including input and the scalar output.
    pub fn shape(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub(crate) fn check_input(&self, len: usize) -> Result<()> {
        if len != self.sizes[0] {
            return Err(ModelError::DimensionMismatch {
                expected: self.sizes[0],
                found: len,
            });
        }
        Ok(())
    }

    /// Latent reward of one prompt-completion feature vector.
    pub fn reward(&self, x: &[f32]) -> f64 {
        let mut a: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        let mut off = 0;
        let last = self.sizes.len() - 2;
        for (l, w) in self.sizes.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let weights = &self.params[off..off + n_in * n_out];
            let bias = &self.params[off + n_in * n_out..off + n_in * n_out + n_out];
            let next: Vec<f64> = (0..n_out)
                .map(|o| {
                    let z = dot(&weights[o * n_in..(o + 1) * n_in], &a) + bias[o];
                    if l < last {
                        z.tanh()
                    } else {
                        z
                    }
                })
                .collect();
            a = next;
            off += n_in * n_out + n_out;
        }
        a[0]
    }

    /// Mean negative Bradley-Terry log-likelihood over labeled tuples and its
    /// gradient with respect to [`params`](Self::params).
    pub fn loss_and_gradient(&self, tuples: &[&PreferenceTuple]) -> Result<(f64, Gradient)> {
        let mut scratch = Scratch::new(&self.sizes);
        let mut grad = vec![0.0; self.params.len()];
        let mut loss = 0.0;
        for t in tuples {
            let y = t.label.ok_or_else(|| ModelError::Unlabeled(t.tuple_id.clone()))?;
            self.check_input(t.pair1_vec.len())?;
            self.check_input(t.pair2_vec.len())?;
            loss += self.accumulate(t, y, &mut scratch, &mut grad);
        }
        let n = tuples.len().max(1) as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        Ok((loss / n, grad))
    }

    /// Adds this tuple's loss gradient into `grad` and returns its loss.
    /// Inputs must already be dimension-checked.
    pub(crate) fn accumulate(
        &self,
        t: &PreferenceTuple,
        label: bool,
        scratch: &mut Scratch,
        grad: &mut [f64],
    ) -> f64 {
        let r1 = self.forward(&t.pair1_vec, &mut scratch.acts1);
        let r2 = self.forward(&t.pair2_vec, &mut scratch.acts2);
        let margin = r1 - r2;
        let y = if label { 1.0 } else { 0.0 };
        let loss = if label {
            -log_sigmoid(margin)
        } else {
            -log_sigmoid(-margin)
        };
        let dmargin = sigmoid(margin) - y;
        self.backward(&scratch.acts1, dmargin, grad, &mut scratch.delta);
        self.backward(&scratch.acts2, -dmargin, grad, &mut scratch.delta);
        loss
    }

    /// Forward pass keeping every layer's activation (input included).
    fn forward(&self, x: &[f32], acts: &mut [Vec<f64>]) -> f64 {
        for (dst, &src) in acts[0].iter_mut().zip(x) {
            *dst = src as f64;
        }
        let mut off = 0;
        let last = self.sizes.len() - 2;
        for l in 0..self.sizes.len() - 1 {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let weights = &self.params[off..off + n_in * n_out];
            let bias = &self.params[off + n_in * n_out..off + n_in * n_out + n_out];
            let (head, tail) = acts.split_at_mut(l + 1);
            let (input, output) = (&head[l], &mut tail[0]);
            for o in 0..n_out {
                let z = dot(&weights[o * n_in..(o + 1) * n_in], input) + bias[o];
                output[o] = if l < last { z.tanh() } else { z };
            }
            off += n_in * n_out + n_out;
        }
        acts[self.sizes.len() - 1][0]
    }

    fn backward(&self, acts: &[Vec<f64>], dout: f64, grad: &mut [f64], delta: &mut [Vec<f64>]) {
        let n_layers = self.sizes.len() - 1;
        let offsets = self.offsets();
        delta[n_layers][0] = dout;
        for l in (0..n_layers).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let off = offsets[l];
            let (lower, upper) = delta.split_at_mut(l + 1);
            let d_out = &upper[0];
            let input = &acts[l];
            {
                let (gw, gb) = grad[off..off + n_in * n_out + n_out].split_at_mut(n_in * n_out);
                for o in 0..n_out {
                    let d = d_out[o];
                    if d == 0.0 {
                        continue;
                    }
                    gb[o] += d;
                    for (g, &a) in gw[o * n_in..(o + 1) * n_in].iter_mut().zip(input) {
                        *g += d * a;
                    }
                }
            }
            if l > 0 {
                let weights = &self.params[off..off + n_in * n_out];
                let d_in = &mut lower[l];
                d_in.iter_mut().for_each(|v| *v = 0.0);
                for o in 0..n_out {
                    let d = d_out[o];
                    for (di, &w) in d_in.iter_mut().zip(&weights[o * n_in..(o + 1) * n_in]) {
                        *di += d * w;
                    }
                }
                // input to layer l is a tanh output
                for (di, &a) in d_in.iter_mut().zip(input) {
                    *di *= 1.0 - a * a;
                }
            }
        }
    }

    fn offsets(&self) -> Vec<usize> {
        let mut offs = Vec::with_capacity(self.sizes.len() - 1);
        let mut off = 0;
        for w in self.sizes.windows(2) {
            offs.push(off);
            off += w[0] * w[1] + w[1];
        }
        offs
    }
}

/// Per-thread buffers for forward/backward passes.
pub(crate) struct Scratch {
    acts1: Vec<Vec<f64>>,
    acts2: Vec<Vec<f64>>,
    delta: Vec<Vec<f64>>,
}

impl Scratch {
    pub(crate) fn new(sizes: &[usize]) -> Self {
        let bufs = || sizes.iter().map(|&n| vec![0.0; n]).collect::<Vec<_>>();
        Self {
            acts1: bufs(),
            acts2: bufs(),
            delta: bufs(),
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_store::testutil::tuple;
    use crate::seeding;

    #[test]
    fn hand_computed_forward_pass() {
        // 2 inputs -> 2 tanh units -> 1 output
        let net = AdapterNet::from_layers(
            vec![
                (vec![0.5, -1.0, 2.0, 0.25], vec![0.1, -0.2]),
                (vec![1.5, -0.5], vec![0.3]),
            ],
            2,
        )
        .unwrap();
        let x = [0.4f32, -0.8];
        let h1 = (0.5 * 0.4 + (-1.0) * -0.8 + 0.1f64).tanh();
        let h2 = (2.0 * 0.4 + 0.25 * -0.8 - 0.2f64).tanh();
        let r = 1.5 * h1 - 0.5 * h2 + 0.3;
        assert!((net.reward(&x) - r).abs() < 1e-7);

        let t = tuple("a", "p", &[0.0], &x, &[0.0, 0.0]);
        let r0 = 1.5 * 0.1f64.tanh() - 0.5 * (-0.2f64).tanh() + 0.3;
        let p = 1.0 / (1.0 + (-(r - r0)).exp());
        assert!((super::super::member_predict(&net, &t).unwrap() - p).abs() < 1e-7);
    }

    #[test]
    fn from_layers_validates_shapes() {
        assert!(AdapterNet::from_layers(vec![(vec![1.0, 2.0], vec![0.0, 0.0])], 1).is_err());
        assert!(AdapterNet::from_layers(vec![(vec![1.0; 3], vec![0.0])], 2).is_err());
        assert!(AdapterNet::from_parts(vec![2, 0, 1], vec![]).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = seeding::rng(5, "gradcheck", 0);
        let net = AdapterNet::random(3, &[4, 2], &mut rng);
        let mut ts = Vec::new();
        for i in 0..6 {
            let mut t = tuple(
                &i.to_string(),
                "p",
                &[0.0],
                &[rng.random(), rng.random(), rng.random()],
                &[rng.random(), rng.random(), rng.random()],
            );
            t.label = Some(i % 2 == 0);
            ts.push(t);
        }
        let refs: Vec<_> = ts.iter().collect();
        let (_, g) = net.loss_and_gradient(&refs).unwrap();
        let h = 1e-6;
        for (i, &gi) in g.iter().enumerate() {
            let mut plus = net.clone();
            plus.params_mut()[i] += h;
            let mut minus = net.clone();
            minus.params_mut()[i] -= h;
            let fd = (plus.loss_and_gradient(&refs).unwrap().0
                - minus.loss_and_gradient(&refs).unwrap().0)
                / (2.0 * h);
            assert!((fd - gi).abs() <= 1e-6 * (1.0 + fd.abs()), "param {i}: {fd} vs {gi}");
        }
    }
}
