//! Parameter stores, MLP building blocks, and the Adam optimizer.

use rand::Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::tape::{Graph, NodeId, Tensor};

/// Named, flat collection of trainable tensors with matching gradient
/// buffers. One store per network; the training loop owns the stores and
/// is their single writer.
#[derive(Clone, Debug)]
pub struct ParamStore {
    pub name: String,
    pub names: Vec<String>,
    pub values: Vec<Tensor>,
    pub grads: Vec<Tensor>,
}

impl ParamStore {
    pub fn new(name: &str) -> Self {
        ParamStore {
            name: name.to_string(),
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn add(&mut self, name: &str, t: Tensor) -> usize {
        self.names.push(name.to_string());
        self.grads.push(Tensor::zeros(t.rows, t.cols));
        self.values.push(t);
        self.values.len() - 1
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.data.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|t| t.len()).sum()
    }

    /// Insert every parameter as a leaf in `g`; the returned binding maps
    /// store indices to node ids for gradient accumulation.
    pub fn bind(&self, g: &mut Graph) -> Binding {
        let ids = self.values.iter().map(|t| g.leaf(t.clone())).collect();
        Binding { ids }
    }

    pub fn accumulate(&mut self, grads: &[Tensor], binding: &Binding) {
        for (idx, id) in binding.ids.iter().enumerate() {
            for (gs, gn) in self.grads[idx].data.iter_mut().zip(&grads[*id].data) {
                *gs += gn;
            }
        }
    }

    /// Content hash over parameter bytes; used for freeze contracts.
    pub fn content_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for t in &self.values {
            for v in &t.data {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

#[derive(Clone, Debug)]
pub struct Binding {
    pub ids: Vec<NodeId>,
}

/// Fully connected layers with tanh hidden activations. The final layer
/// is linear; callers apply their own output squashing.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub weights: Vec<usize>,
    pub biases: Vec<usize>,
    pub dims: Vec<usize>,
}

impl Mlp {
    /// `final_zero` initializes the last layer to zero so the network
    /// starts at the midpoint of any downstream squashing.
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        dims: &[usize],
        rng: &mut R,
        final_zero: bool,
    ) -> Self {
        assert!(dims.len() >= 2);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let last = l == dims.len() - 2;
            let std = if last && final_zero {
                0.0
            } else {
                1.0 / (fan_in as f64).sqrt()
            };
            let data: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| {
                    let n: f64 = rng.sample(StandardNormal);
                    n * std
                })
                .collect();
            weights.push(store.add(
                &format!("{prefix}.w{l}"),
                Tensor::from_vec(data, fan_in, fan_out),
            ));
            biases.push(store.add(&format!("{prefix}.b{l}"), Tensor::zeros(1, fan_out)));
        }
        Mlp { weights, biases, dims: dims.to_vec() }
    }

    /// Forward pass; input is [r x dims[0]], output [r x dims.last()].
    pub fn forward(&self, g: &mut Graph, b: &Binding, input: NodeId) -> NodeId {
        let acts = self.forward_trace(g, b, input);
        *acts.last().unwrap()
    }

    /// Forward pass returning every post-activation (and the final linear
    /// output). Needed by the analytic input-gradient chain.
    pub fn forward_trace(&self, g: &mut Graph, b: &Binding, input: NodeId) -> Vec<NodeId> {
        let mut acts = vec![input];
        let mut x = input;
        for l in 0..self.weights.len() {
            let w = b.ids[self.weights[l]];
            let bias = b.ids[self.biases[l]];
            let lin = g.matmul(x, w);
            let lin = g.add_row(lin, bias);
            x = if l + 1 < self.weights.len() { g.tanh(lin) } else { lin };
            acts.push(x);
        }
        acts
    }

    /// Build, as tape operations, the gradient of `seed * output` with
    /// respect to the MLP input, given the activations from
    /// `forward_trace`. `seed` is [r x dims.last()]. Returns [r x dims[0]].
    ///
    /// Because the chain itself consists of tape ops, ordinary backward
    /// through the result yields second-order terms (R1 penalty).
    pub fn input_gradient(
        &self,
        g: &mut Graph,
        b: &Binding,
        acts: &[NodeId],
        seed: NodeId,
    ) -> NodeId {
        let mut grad = seed;
        for l in (0..self.weights.len()).rev() {
            let w = b.ids[self.weights[l]];
            if l + 1 < self.weights.len() {
                // grad through tanh: g * (1 - h^2)
                let h = acts[l + 1];
                let h2 = g.mul(h, h);
                let neg = g.neg(h2);
                let one_minus = g.add_scalar(neg, 1.0);
                grad = g.mul(grad, one_minus);
            }
            grad = g.matmul_nt(grad, w);
        }
        grad
    }
}

/// Adam with the StyleGAN-family betas (0.0, 0.99) by default.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step_count: 0,
            m: store.values.iter().map(|t| Tensor::zeros(t.rows, t.cols)).collect(),
            v: store.values.iter().map(|t| Tensor::zeros(t.rows, t.cols)).collect(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore) {
        self.step_count += 1;
        let t = self.step_count as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for i in 0..store.values.len() {
            let grad = &store.grads[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..grad.data.len() {
                let gj = grad.data[j];
                m.data[j] = self.beta1 * m.data[j] + (1.0 - self.beta1) * gj;
                v.data[j] = self.beta2 * v.data[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m.data[j] / bc1;
                let vh = v.data[j] / bc2;
                store.values[i].data[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{fd_gradient, max_rel_err};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mlp_parameter_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new("test");
        let mlp = Mlp::init(&mut store, "m", &[3, 5, 2], &mut rng, false);
        let input = Tensor::row(vec![0.3, -0.7, 1.1]);
        let run = |store: &ParamStore| {
            let mut g = Graph::new();
            let b = store.bind(&mut g);
            let x = g.leaf(input.clone());
            let y = mlp.forward(&mut g, &b, x);
            let t = g.tanh(y);
            let s = g.sum_all(t);
            (g, b, s)
        };
        let (g, b, s) = run(&store);
        let grads = g.backward(s);
        store.zero_grads();
        store.accumulate(&grads, &b);
        // flatten all params and FD-check
        for pi in 0..store.values.len() {
            let base = store.values[pi].data.clone();
            let fd = fd_gradient(&base, 1e-6, |x| {
                let mut s2 = store.clone();
                s2.values[pi].data = x.to_vec();
                let (g, _, sid) = run(&s2);
                g.scalar_value(sid)
            });
            assert!(max_rel_err(&store.grads[pi].data, &fd, 1e-6) < 1e-5);
        }
    }

    #[test]
    fn analytic_input_gradient_matches_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new("t");
        let mlp = Mlp::init(&mut store, "m", &[4, 6, 1], &mut rng, false);
        let x0 = vec![0.2, -0.4, 0.9, 0.1];
        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let x = g.leaf(Tensor::row(x0.clone()));
        let acts = mlp.forward_trace(&mut g, &b, x);
        let out = *acts.last().unwrap();
        let seed = g.leaf(Tensor::row(vec![1.0]));
        let gin = mlp.input_gradient(&mut g, &b, &acts, seed);
        // compare against reverse mode
        let grads = g.backward(out);
        for (a, r) in g.value(gin).data.iter().zip(&grads[x].data) {
            assert!((a - r).abs() < 1e-12, "{a} vs {r}");
        }
    }

    #[test]
    fn adam_descends_quadratic() {
        let mut store = ParamStore::new("q");
        store.add("x", Tensor::row(vec![5.0]));
        let mut opt = Adam::new(&store, 0.1, 0.0, 0.99);
        for _ in 0..500 {
            store.zero_grads();
            store.grads[0].data[0] = 2.0 * store.values[0].data[0];
            opt.step(&mut store);
        }
        assert!(store.values[0].data[0].abs() < 1e-2);
    }
}
