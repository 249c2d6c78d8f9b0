//! Parameter storage, initialization, optimizer, and the layers the model is
//! assembled from. Layers hold parameter *names*; values live in a
//! `ParamStore` and are injected into a fresh tape each forward pass.

use indexmap::IndexMap;
use ndarray::{Array1, Array2, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};

/// Named parameter arrays in insertion order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: IndexMap<String, ArrayD<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<f64>) {
        assert!(
            self.params.insert(name.to_string(), value).is_none(),
            "duplicate parameter name {name}"
        );
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ArrayD<f64>)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|v| v.len()).sum()
    }
}

/// Parameters materialized as leaves on one tape.
pub struct TapeParams<'t> {
    vars: IndexMap<String, Var<'t>>,
}

impl<'t> TapeParams<'t> {
    pub fn from_store(tape: &'t Tape, store: &ParamStore) -> Self {
        let mut vars = IndexMap::new();
        for (name, value) in store.iter() {
            vars.insert(name.clone(), tape.leaf(value.clone()));
        }
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Var<'t> {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not on tape"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var<'t>)> {
        self.vars.iter()
    }
}

/// Uniform He-style fan-in initialization.
fn init_weight(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    let bound = (1.0 / fan_in as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-bound..bound))
}

/// Fully connected layer.
#[derive(Debug, Clone)]
pub struct Dense {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    pub fn new(name: &str, in_dim: usize, out_dim: usize) -> Self {
        Self {
            name: name.to_string(),
            in_dim,
            out_dim,
        }
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        store.insert(
            &format!("{}.weight", self.name),
            init_weight(&[self.in_dim, self.out_dim], self.in_dim, rng),
        );
        store.insert(
            &format!("{}.bias", self.name),
            ArrayD::zeros(IxDyn(&[self.out_dim])),
        );
    }

    /// x: rows x in_dim -> rows x out_dim.
    pub fn forward<'t>(&self, p: &TapeParams<'t>, x: Var<'t>) -> Var<'t> {
        let w = p.get(&format!("{}.weight", self.name));
        let b = p.get(&format!("{}.bias", self.name));
        x.matmul(w).add_row_vec(b)
    }
}

/// 2-D convolution layer.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(name: &str, in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Self {
        Self {
            name: name.to_string(),
            in_ch,
            out_ch,
            kernel,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let fan_in = self.in_ch * self.kernel * self.kernel;
        store.insert(
            &format!("{}.weight", self.name),
            init_weight(
                &[self.out_ch, self.in_ch, self.kernel, self.kernel],
                fan_in,
                rng,
            ),
        );
        store.insert(
            &format!("{}.bias", self.name),
            ArrayD::zeros(IxDyn(&[self.out_ch])),
        );
    }

    pub fn forward<'t>(&self, p: &TapeParams<'t>, x: Var<'t>) -> Var<'t> {
        let w = p.get(&format!("{}.weight", self.name));
        let b = p.get(&format!("{}.bias", self.name));
        x.conv2d(w, b, self.stride, self.pad)
    }
}

/// Learned per-feature gain and bias around row-wise normalization.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(name: &str, dim: usize) -> Self {
        Self {
            name: name.to_string(),
            dim,
        }
    }

    pub fn register(&self, store: &mut ParamStore, _rng: &mut ChaCha8Rng) {
        store.insert(
            &format!("{}.gain", self.name),
            ArrayD::from_elem(IxDyn(&[self.dim]), 1.0),
        );
        store.insert(
            &format!("{}.bias", self.name),
            ArrayD::zeros(IxDyn(&[self.dim])),
        );
    }

    pub fn forward<'t>(&self, p: &TapeParams<'t>, x: Var<'t>) -> Var<'t> {
        let gain = p.get(&format!("{}.gain", self.name));
        let bias = p.get(&format!("{}.bias", self.name));
        x.layer_norm_rows(gain, bias, 1e-5)
    }
}

/// Multi-head scaled dot-product attention with learned projections.
///
/// Queries come from `x`; keys and values from `context` (pass `x` again for
/// self-attention). Output projection initializes to zero so a fresh block is
/// an identity path around the residual.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub name: String,
    pub dim: usize,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(name: &str, dim: usize, heads: usize) -> Self {
        assert!(dim % heads == 0, "attention dim must divide heads");
        Self {
            name: name.to_string(),
            dim,
            heads,
        }
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        for proj in ["q", "k", "v"] {
            store.insert(
                &format!("{}.{proj}.weight", self.name),
                init_weight(&[self.dim, self.dim], self.dim, rng),
            );
            // Softmax ignores a row-constant score shift, so a key bias
            // would never receive gradient; only q and v carry one.
            if proj != "k" {
                store.insert(
                    &format!("{}.{proj}.bias", self.name),
                    ArrayD::zeros(IxDyn(&[self.dim])),
                );
            }
        }
        store.insert(
            &format!("{}.out.weight", self.name),
            ArrayD::zeros(IxDyn(&[self.dim, self.dim])),
        );
        store.insert(
            &format!("{}.out.bias", self.name),
            ArrayD::zeros(IxDyn(&[self.dim])),
        );
    }

    pub fn forward<'t>(&self, p: &TapeParams<'t>, x: Var<'t>, context: Var<'t>) -> Var<'t> {
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let q_all = x
            .matmul(p.get(&format!("{}.q.weight", self.name)))
            .add_row_vec(p.get(&format!("{}.q.bias", self.name)));
        let k_all = context.matmul(p.get(&format!("{}.k.weight", self.name)));
        let v_all = context
            .matmul(p.get(&format!("{}.v.weight", self.name)))
            .add_row_vec(p.get(&format!("{}.v.bias", self.name)));

        let mut head_outputs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q = q_all.narrow(1, h * dh, dh);
            let k = k_all.narrow(1, h * dh, dh);
            let v = v_all.narrow(1, h * dh, dh);
            let scores = q.matmul(k.transpose()).mul_scalar(scale);
            let attn = scores.softmax_rows();
            head_outputs.push(attn.matmul(v));
        }
        let merged = Var::concat(1, &head_outputs);
        merged
            .matmul(p.get(&format!("{}.out.weight", self.name)))
            .add_row_vec(p.get(&format!("{}.out.bias", self.name)))
    }
}

/// Post-norm transformer block: self-attention and feed-forward sublayers,
/// each wrapped in residual + layer normalization.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub attn: MultiHeadAttention,
    pub ln_attn: LayerNorm,
    pub ffn_in: Dense,
    pub ffn_out: Dense,
    pub ln_ffn: LayerNorm,
}

impl TransformerBlock {
    pub fn new(name: &str, dim: usize, heads: usize, ffn_dim: usize) -> Self {
        Self {
            attn: MultiHeadAttention::new(&format!("{name}.attn"), dim, heads),
            ln_attn: LayerNorm::new(&format!("{name}.ln_attn"), dim),
            ffn_in: Dense::new(&format!("{name}.ffn_in"), dim, ffn_dim),
            ffn_out: Dense::new(&format!("{name}.ffn_out"), ffn_dim, dim),
            ln_ffn: LayerNorm::new(&format!("{name}.ln_ffn"), dim),
        }
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.attn.register(store, rng);
        self.ln_attn.register(store, rng);
        self.ffn_in.register(store, rng);
        self.ffn_out.register(store, rng);
        self.ln_ffn.register(store, rng);
    }

    pub fn forward<'t>(&self, p: &TapeParams<'t>, x: Var<'t>) -> Var<'t> {
        let attended = self.attn.forward(p, x, x);
        let x = self.ln_attn.forward(p, x.add(attended));
        let ffn = self.ffn_out.forward(p, self.ffn_in.forward(p, x).relu());
        self.ln_ffn.forward(p, x.add(ffn))
    }
}

/// Post-norm transformer decoder layer: self-attention over the query rows,
/// optional cross-attention to context rows, then feed-forward.
#[derive(Debug, Clone)]
pub struct TransformerDecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub ln_self: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln_cross: LayerNorm,
    pub ffn_in: Dense,
    pub ffn_out: Dense,
    pub ln_ffn: LayerNorm,
    pub use_cross_attention: bool,
}

impl TransformerDecoderLayer {
    pub fn new(name: &str, dim: usize, heads: usize, ffn_dim: usize, use_cross: bool) -> Self {
        Self {
            self_attn: MultiHeadAttention::new(&format!("{name}.self_attn"), dim, heads),
            ln_self: LayerNorm::new(&format!("{name}.ln_self"), dim),
            cross_attn: MultiHeadAttention::new(&format!("{name}.cross_attn"), dim, heads),
            ln_cross: LayerNorm::new(&format!("{name}.ln_cross"), dim),
            ffn_in: Dense::new(&format!("{name}.ffn_in"), dim, ffn_dim),
            ffn_out: Dense::new(&format!("{name}.ffn_out"), ffn_dim, dim),
            ln_ffn: LayerNorm::new(&format!("{name}.ln_ffn"), dim),
            use_cross_attention: use_cross,
        }
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.self_attn.register(store, rng);
        self.ln_self.register(store, rng);
        self.cross_attn.register(store, rng);
        self.ln_cross.register(store, rng);
        self.ffn_in.register(store, rng);
        self.ffn_out.register(store, rng);
        self.ln_ffn.register(store, rng);
    }

    /// queries: N x dim; context: T x dim.
    pub fn forward<'t>(&self, p: &TapeParams<'t>, queries: Var<'t>, context: Var<'t>) -> Var<'t> {
        let attended = self.self_attn.forward(p, queries, queries);
        let x = self.ln_self.forward(p, queries.add(attended));
        let x = if self.use_cross_attention {
            let crossed = self.cross_attn.forward(p, x, context);
            self.ln_cross.forward(p, x.add(crossed))
        } else {
            x
        };
        let ffn = self.ffn_out.forward(p, self.ffn_in.forward(p, x).relu());
        self.ln_ffn.forward(p, x.add(ffn))
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first_moment: IndexMap<String, ArrayD<f64>>,
    second_moment: IndexMap<String, ArrayD<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first_moment: IndexMap::new(),
            second_moment: IndexMap::new(),
        }
    }

    /// Apply one update from `grads` (same names as the store).
    pub fn step(&mut self, store: &mut ParamStore, grads: &IndexMap<String, ArrayD<f64>>) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, value) in store.iter_mut() {
            let Some(grad) = grads.get(name) else {
                continue;
            };
            let m = self
                .first_moment
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(value.raw_dim()));
            let v = self
                .second_moment
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(value.raw_dim()));
            ndarray::Zip::from(value)
                .and(m)
                .and(v)
                .and(grad)
                .for_each(|p, mi, vi, &gi| {
                    *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                    *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                    let m_hat = *mi / bc1;
                    let v_hat = *vi / bc2;
                    *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
                });
        }
    }
}

/// Replace all-zero parameter tensors with small noise.
///
/// Zero-initialized projections make whole paths of the graph inert, which
/// turns finite-difference probes into noise comparisons; randomizing them
/// first gives every parameter a live gradient.
pub fn randomize_zero_params(store: &mut ParamStore, rng: &mut ChaCha8Rng, scale: f64) {
    for (_name, value) in store.iter_mut() {
        if value.iter().all(|v| *v == 0.0) {
            value.mapv_inplace(|_| rng.gen_range(-scale..scale));
        }
    }
}

/// Convenience constructors used in tests.
pub fn array1(v: &[f64]) -> Array1<f64> {
    Array1::from_vec(v.to_vec())
}

pub fn array2(rows: usize, cols: usize, v: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((rows, cols), v.to_vec()).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::central_diff_check;
    use ndarray::IxDyn;
    use rand::SeedableRng;

    fn store_with<F>(build: F) -> (ParamStore, ChaCha8Rng)
    where
        F: Fn(&mut ParamStore, &mut ChaCha8Rng),
    {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        build(&mut store, &mut rng);
        (store, rng)
    }

    /// FD-check a layer by treating all its parameters plus one input leaf as
    /// differentiable coordinates.
    fn fd_layer<F>(store: &ParamStore, input: ArrayD<f64>, forward: F) -> f64
    where
        F: for<'t> Fn(&'t Tape, &TapeParams<'t>, Var<'t>) -> Var<'t>,
    {
        let names: Vec<String> = store.names().cloned().collect();
        let mut leaves: Vec<ArrayD<f64>> = names.iter().map(|n| store.get(n).clone()).collect();
        leaves.push(input);
        let probe = |ls: &[ArrayD<f64>], wants_grad: bool| {
            let tape = Tape::new();
            let mut tmp = ParamStore::new();
            for (name, value) in names.iter().zip(ls.iter()) {
                tmp.insert(name, value.clone());
            }
            let params = TapeParams::from_store(&tape, &tmp);
            let x = tape.leaf(ls[names.len()].clone());
            let out = forward(&tape, &params, x);
            let root = out.square().sum_all();
            let loss = root.scalar_value();
            let grads = if wants_grad {
                let g = tape.backward(root);
                let mut all: Vec<ArrayD<f64>> =
                    names.iter().map(|n| g.wrt(params.get(n))).collect();
                all.push(g.wrt(x));
                all
            } else {
                vec![]
            };
            (loss, grads)
        };
        central_diff_check(&leaves, &probe, 1e-5, 200).max_rel_err
    }

    #[test]
    fn dense_matches_fd() {
        let layer = Dense::new("fc", 4, 3);
        let (mut store, mut rng) = store_with(|s, r| Dense::new("fc", 4, 3).register(s, r));
        randomize_zero_params(&mut store, &mut rng, 0.3);
        let input = ArrayD::from_shape_fn(IxDyn(&[2, 4]), |_| rng.gen_range(-1.0..1.0));
        let rel = fd_layer(&store, input, |_, p, x| layer.forward(p, x));
        assert!(rel < 1e-6, "rel err {rel}");
    }

    #[test]
    fn conv_layer_matches_fd() {
        let layer = Conv2d::new("conv", 2, 3, 3, 2);
        let (mut store, mut rng) = store_with(|s, r| Conv2d::new("conv", 2, 3, 3, 2).register(s, r));
        randomize_zero_params(&mut store, &mut rng, 0.3);
        let input = ArrayD::from_shape_fn(IxDyn(&[2, 6, 6]), |_| rng.gen_range(-1.0..1.0));
        let rel = fd_layer(&store, input, |_, p, x| layer.forward(p, x));
        assert!(rel < 1e-6, "rel err {rel}");
    }

    #[test]
    fn transformer_block_matches_fd() {
        let block = TransformerBlock::new("blk", 6, 2, 8);
        let (mut store, mut rng) =
            store_with(|s, r| TransformerBlock::new("blk", 6, 2, 8).register(s, r));
        randomize_zero_params(&mut store, &mut rng, 0.3);
        let input = ArrayD::from_shape_fn(IxDyn(&[5, 6]), |_| rng.gen_range(-1.0..1.0));
        let rel = fd_layer(&store, input, |_, p, x| block.forward(p, x));
        assert!(rel < 1e-4, "rel err {rel}");
    }

    #[test]
    fn decoder_layer_matches_fd() {
        let layer = TransformerDecoderLayer::new("dec", 6, 2, 8, true);
        let (mut store, mut rng) =
            store_with(|s, r| TransformerDecoderLayer::new("dec", 6, 2, 8, true).register(s, r));
        randomize_zero_params(&mut store, &mut rng, 0.3);
        let context = ArrayD::from_shape_fn(IxDyn(&[7, 6]), |_| rng.gen_range(-1.0..1.0));
        let input = ArrayD::from_shape_fn(IxDyn(&[3, 6]), |_| rng.gen_range(-1.0..1.0));
        let ctx2 = context.clone();
        let rel = fd_layer(&store, input, move |tape, p, x| {
            let ctx = tape.leaf(ctx2.clone());
            layer.forward(p, x, ctx)
        });
        assert!(rel < 1e-4, "rel err {rel}");
    }

    #[test]
    fn fresh_decoder_is_identity_around_layer_norm() {
        // Zero-initialized output projections make each sublayer a no-op, so
        // the layer reduces to layer normalization of the input rows.
        let layer = TransformerDecoderLayer::new("dec", 4, 2, 8, true);
        let (store, mut rng) =
            store_with(|s, r| TransformerDecoderLayer::new("dec", 4, 2, 8, true).register(s, r));
        let tape = Tape::new();
        let params = TapeParams::from_store(&tape, &store);
        let input = ArrayD::from_shape_fn(IxDyn(&[1, 4]), |_| rng.gen_range(-1.0..1.0));
        let x = tape.leaf(input.clone());
        let ctx = tape.leaf(ArrayD::from_shape_fn(IxDyn(&[5, 4]), |_| {
            rng.gen_range(-1.0..1.0)
        }));
        let out = layer.forward(&params, x, ctx);

        // FFN weights are random He-init but ffn_out then adds the residual;
        // only the out-projections of attention are zero. Re-create with the
        // FFN zeroed too to check the pure pass-through path.
        let mut zeroed = store.clone();
        *zeroed.get_mut("dec.ffn_out.weight") = ArrayD::zeros(IxDyn(&[8, 4]));
        let tape2 = Tape::new();
        let params2 = TapeParams::from_store(&tape2, &zeroed);
        let x2 = tape2.leaf(input.clone());
        let ctx2 = tape2.leaf(ArrayD::zeros(IxDyn(&[5, 4])));
        let out2 = layer.forward(&params2, x2, ctx2);

        // With all sublayer outputs zero, out2 = LN(LN(LN(x))) = LN(x) since
        // gain=1, bias=0 and LN is idempotent.
        let ln = LayerNorm::new("ln", 4);
        let mut ln_store = ParamStore::new();
        let mut r2 = ChaCha8Rng::seed_from_u64(0);
        ln.register(&mut ln_store, &mut r2);
        let tape3 = Tape::new();
        let p3 = TapeParams::from_store(&tape3, &ln_store);
        let x3 = tape3.leaf(input);
        let expect = ln.forward(&p3, x3);
        // Layer norm is idempotent only up to its epsilon, so the nested
        // applications agree at the 1e-5 level, not exactly.
        for (a, b) in out2.value().iter().zip(expect.value().iter()) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
        // The un-zeroed layer differs (FFN path active).
        assert_eq!(out.shape(), vec![1, 4]);
    }

    #[test]
    fn attention_is_permutation_equivariant() {
        let block = TransformerBlock::new("blk", 4, 2, 8);
        let (store, mut rng) =
            store_with(|s, r| TransformerBlock::new("blk", 4, 2, 8).register(s, r));
        let input = ArrayD::from_shape_fn(IxDyn(&[6, 4]), |_| rng.gen_range(-1.0..1.0));
        let perm = [3usize, 0, 5, 1, 4, 2];

        let tape = Tape::new();
        let params = TapeParams::from_store(&tape, &store);
        let out = block.forward(&params, tape.leaf(input.clone()));
        let out_v = out.value();

        let mut permuted = input.clone();
        for (dst, &src) in perm.iter().enumerate() {
            for c in 0..4 {
                permuted[[dst, c]] = input[[src, c]];
            }
        }
        let tape2 = Tape::new();
        let params2 = TapeParams::from_store(&tape2, &store);
        let out_p = block.forward(&params2, tape2.leaf(permuted));
        let out_pv = out_p.value();
        for (dst, &src) in perm.iter().enumerate() {
            for c in 0..4 {
                assert!((out_pv[[dst, c]] - out_v[[src, c]]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn adam_reduces_a_quadratic() {
        let mut store = ParamStore::new();
        store.insert("x", ArrayD::from_elem(IxDyn(&[2]), 5.0));
        let mut adam = Adam::new(0.1);
        for _ in 0..200 {
            let grads: IndexMap<String, ArrayD<f64>> = [(
                "x".to_string(),
                store.get("x").mapv(|v| 2.0 * v),
            )]
            .into_iter()
            .collect();
            adam.step(&mut store, &grads);
        }
        assert!(store.get("x").iter().all(|v| v.abs() < 1e-2));
    }
// temp probe

}
