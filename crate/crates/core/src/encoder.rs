//! Frozen bidirectional transformer with low-rank adapters on the attention
//! projections, and the segment/ratio output heads.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Tape, Unary, Var};
use crate::error::{Error, Result};
use crate::params::{gaussian, Mat, ParamGroup, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub lora_rank: usize,
    /// Also train the attention projections themselves, not only the adapters.
    #[serde(default)]
    pub unfreeze_attention: bool,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self { layers: 4, hidden: 512, heads: 8, ffn_dim: 2048, lora_rank: 8, unfreeze_attention: false }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let f = self.hidden;
        if f == 0 || self.heads == 0 || !f.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("hidden width {f} is not divisible by {} heads", self.heads)));
        }
        if self.lora_rank == 0 || self.lora_rank > f {
            return Err(Error::Config(format!("adapter rank {} must be in 1..={f}", self.lora_rank)));
        }
        if self.ffn_dim == 0 || self.layers == 0 {
            return Err(Error::Config("transformer needs at least one layer and a positive feed-forward width".into()));
        }
        Ok(())
    }

    /// Adapter entries per layer: three projections, each `F×r + r×F`.
    pub fn lora_count_per_layer(&self) -> usize {
        3 * 2 * self.hidden * self.lora_rank
    }
}

/// Low-rank update `B·C` of one projection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoraPair {
    /// `[F × r]`, Gaussian at start.
    pub b: ParamId,
    /// `[r × F]`, zero at start.
    pub c: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub w: ParamId,
    pub bias: ParamId,
    pub lora: Option<LoraPair>,
}

impl Projection {
    fn forward(&self, tape: &mut Tape, x: Var, adapters: bool) -> Var {
        let y = tape.linear(x, self.w, Some(self.bias));
        match self.lora {
            Some(l) if adapters => {
                let b = tape.param(l.b);
                let c = tape.param(l.c);
                let xb = tape.matmul(x, b);
                let delta = tape.matmul(xb, c);
                tape.add(y, delta)
            }
            _ => y,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerParams {
    pub query: Projection,
    pub key: Projection,
    pub value: Projection,
    pub output: Projection,
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub ff1_w: ParamId,
    pub ff1_b: ParamId,
    pub ff2_w: ParamId,
    pub ff2_b: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transformer {
    pub config: TransformerConfig,
    pub layers: Vec<LayerParams>,
}

impl Transformer {
    /// Registers seeded random base weights (frozen) and adapters (trainable).
    pub fn register(store: &mut ParamStore, config: TransformerConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (f, r) = (config.hidden, config.lora_rank);
        let std = (1.0 / f as f64).sqrt();
        let attn_trainable = config.unfreeze_attention;
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let proj = |store: &mut ParamStore, name: &str, rng: &mut dyn rand::RngCore, adapted: bool| {
                let w = store.add(format!("layer{l}.{name}.w"), ParamGroup::Base, gaussian(f, f, std, rng), attn_trainable);
                let bias = store.add(format!("layer{l}.{name}.b"), ParamGroup::Base, Mat::zeros((1, f)), attn_trainable);
                let lora = adapted.then(|| LoraPair {
                    b: store.add(format!("layer{l}.{name}.lora_b"), ParamGroup::Lora, gaussian(f, r, std, rng), true),
                    c: store.add(format!("layer{l}.{name}.lora_c"), ParamGroup::Lora, Mat::zeros((r, f)), true),
                });
                Projection { w, bias, lora }
            };
            let query = proj(store, "query", rng, true);
            let key = proj(store, "key", rng, true);
            let value = proj(store, "value", rng, true);
            let output = proj(store, "output", rng, false);
            let base = |store: &mut ParamStore, name: &str, m: Mat| store.add(format!("layer{l}.{name}"), ParamGroup::Base, m, false);
            let ffn = config.ffn_dim;
            layers.push(LayerParams {
                query,
                key,
                value,
                output,
                ln1_gain: base(store, "ln1.gain", Mat::ones((1, f))),
                ln1_bias: base(store, "ln1.bias", Mat::zeros((1, f))),
                ff1_w: base(store, "ff1.w", gaussian(f, ffn, std, rng)),
                ff1_b: base(store, "ff1.b", Mat::zeros((1, ffn))),
                ff2_w: base(store, "ff2.w", gaussian(ffn, f, (1.0 / ffn as f64).sqrt(), rng)),
                ff2_b: base(store, "ff2.b", Mat::zeros((1, f))),
                ln2_gain: base(store, "ln2.gain", Mat::ones((1, f))),
                ln2_bias: base(store, "ln2.bias", Mat::zeros((1, f))),
            });
        }
        Ok(Self { config, layers })
    }

    /// Runs every layer over `z` (`[N × F]`); `adapters = false` evaluates the base model alone.
    pub fn encode(&self, tape: &mut Tape, z: Var, adapters: bool) -> Result<Var> {
        let (_, f) = tape.shape(z);
        if f != self.config.hidden {
            return Err(Error::Config(format!("input width {f} does not match hidden width {}", self.config.hidden)));
        }
        let heads = self.config.heads;
        let d = f / heads;
        let scale = 1.0 / (d as f64).sqrt();
        let mut x = z;
        for layer in &self.layers {
            let q = layer.query.forward(tape, x, adapters);
            let k = layer.key.forward(tape, x, adapters);
            let v = layer.value.forward(tape, x, adapters);
            let outs: Vec<Var> = (0..heads)
                .map(|h| {
                    let qh = tape.slice_cols(q, h * d, d);
                    let kh = tape.slice_cols(k, h * d, d);
                    let vh = tape.slice_cols(v, h * d, d);
                    let s = tape.matmul_t(qh, kh);
                    let s = tape.scale(s, scale);
                    let a = tape.softmax_rows(s);
                    tape.matmul(a, vh)
                })
                .collect();
            let attn = tape.concat_cols(&outs);
            let attn = layer.output.forward(tape, attn, false);
            let x1 = tape.add(x, attn);
            let x1 = affine_norm(tape, x1, layer.ln1_gain, layer.ln1_bias);
            let h = tape.linear(x1, layer.ff1_w, Some(layer.ff1_b));
            let h = tape.unary(h, Unary::Gelu);
            let h = tape.linear(h, layer.ff2_w, Some(layer.ff2_b));
            let x2 = tape.add(x1, h);
            x = affine_norm(tape, x2, layer.ln2_gain, layer.ln2_bias);
        }
        Ok(x)
    }

    /// Adapter matrices in layer order.
    pub fn lora_params(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .flat_map(|l| [l.query, l.key, l.value])
            .filter_map(|p| p.lora)
            .flat_map(|l| [l.b, l.c])
            .collect()
    }
}

fn affine_norm(tape: &mut Tape, x: Var, gain: ParamId, bias: ParamId) -> Var {
    let n = tape.layer_norm(x);
    let g = tape.param(gain);
    let b = tape.param(bias);
    let y = tape.mul_row(n, g);
    tape.add_row(y, b)
}

/// Segment classifier and ratio regressor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutputHeads {
    pub segment_w: ParamId,
    pub segment_b: ParamId,
    pub ratio_w1: ParamId,
    pub ratio_b1: ParamId,
    pub ratio_w2: ParamId,
    pub ratio_b2: ParamId,
}

/// Smallest and largest ratio ever reported.
const RATIO_FLOOR: f64 = 1e-9;

impl OutputHeads {
    pub fn register(store: &mut ParamStore, hidden: usize, segments: usize, rng: &mut impl Rng) -> Self {
        let g = ParamGroup::Heads;
        let std = (1.0 / hidden as f64).sqrt();
        Self {
            segment_w: store.add("head.segment.w", g, gaussian(hidden, segments, std, rng), true),
            segment_b: store.add("head.segment.b", g, Mat::zeros((1, segments)), true),
            ratio_w1: store.add("head.ratio.w1", g, gaussian(hidden, hidden, std, rng), true),
            ratio_b1: store.add("head.ratio.b1", g, Mat::zeros((1, hidden)), true),
            ratio_w2: store.add("head.ratio.w2", g, gaussian(hidden, 1, std, rng), true),
            ratio_b2: store.add("head.ratio.b2", g, Mat::zeros((1, 1)), true),
        }
    }

    pub fn logits(&self, tape: &mut Tape, h: Var) -> Var {
        tape.linear(h, self.segment_w, Some(self.segment_b))
    }

    /// Ratio pre-activation; the sigmoid is applied by the caller or [`Self::ratios`].
    pub fn ratio_logits(&self, tape: &mut Tape, h: Var) -> Var {
        let x = tape.linear(h, self.ratio_w1, Some(self.ratio_b1));
        let x = tape.relu(x);
        tape.linear(x, self.ratio_w2, Some(self.ratio_b2))
    }

    pub fn ratios(&self, tape: &mut Tape, h: Var) -> Var {
        let x = self.ratio_logits(tape, h);
        tape.unary(x, Unary::Sigmoid)
    }
}

/// First index of the largest entry.
pub fn argmax(row: ndarray::ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Ratio strictly inside `(0, 1)` from its pre-activation.
pub fn bounded_ratio(logit: f64) -> f64 {
    sigmoid(logit).clamp(RATIO_FLOOR, 1.0 - RATIO_FLOOR)
}

/// Per-slot `(segment index, ratio)` after discarding the prompt rows of `z_l`.
pub fn predict(tape: &mut Tape, z_l: Var, prompt_len: usize, heads: &OutputHeads) -> Result<Vec<(usize, f64)>> {
    let n = tape.shape(z_l).0;
    if prompt_len >= n {
        return Err(Error::Contract(format!("prompt length {prompt_len} leaves no slots among {n} rows")));
    }
    let slots = tape.slice_rows(z_l, prompt_len, n - prompt_len);
    let logits = heads.logits(tape, slots);
    let ratio = heads.ratio_logits(tape, slots);
    let (logits, ratio) = (tape.value(logits), tape.value(ratio));
    Ok(logits.rows().into_iter().zip(ratio.column(0)).map(|(row, r)| (argmax(row), bounded_ratio(*r))).collect())
}

/// Segment probabilities per row.
pub fn segment_probabilities(logits: &Mat) -> Mat {
    crate::autodiff::softmax_rows(logits)
}

/// Trainable parameters grouped by role; frozen base weights never appear.
pub fn trainable_parameters(store: &ParamStore) -> Vec<(ParamGroup, Vec<ParamId>)> {
    ParamGroup::ALL
        .iter()
        .map(|&g| (g, store.iter().filter(|(_, p)| p.trainable && p.group == g).map(|(id, _)| id).collect::<Vec<_>>()))
        .filter(|(_, ids)| !ids.is_empty())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Gradients, Optimizer, Sgd};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(f: usize, r: usize, layers: usize) -> (ParamStore, Transformer) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let cfg = TransformerConfig { layers, hidden: f, heads: 2, ffn_dim: 2 * f, lora_rank: r, unfreeze_attention: false };
        let t = Transformer::register(&mut store, cfg, &mut rng).unwrap();
        (store, t)
    }

    fn run(store: &ParamStore, t: &Transformer, z: &Mat, adapters: bool) -> Mat {
        let mut tape = Tape::new(store);
        let z = tape.constant(z.clone());
        let out = t.encode(&mut tape, z, adapters).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn lora_count_matches_shapes() {
        let (store, t) = build(16, 4, 3);
        assert_eq!(store.trainable_count(Some(ParamGroup::Lora)), 3 * t.config.lora_count_per_layer());
        assert_eq!(store.trainable_count(Some(ParamGroup::Base)), 0);
        let (store8, _) = build(16, 8, 3);
        assert_eq!(store8.trainable_count(Some(ParamGroup::Lora)), 2 * store.trainable_count(Some(ParamGroup::Lora)));
    }

    #[test]
    fn zero_adapters_match_base_model() {
        let (store, t) = build(8, 2, 2);
        let z = gaussian(5, 8, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(run(&store, &t, &z, true), run(&store, &t, &z, false));
    }

    #[test]
    fn full_rank_adapter_equals_updated_projection() {
        let (mut store, t) = build(6, 6, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let delta = gaussian(6, 6, 0.3, &mut rng);
        let lora = t.layers[0].value.lora.unwrap();
        *store.value_mut(lora.b) = Mat::eye(6);
        *store.value_mut(lora.c) = delta.clone();
        let z = gaussian(4, 6, 1.0, &mut rng);
        let adapted = run(&store, &t, &z, true);
        *store.value_mut(lora.c) = Mat::zeros((6, 6));
        let w = t.layers[0].value.w;
        *store.value_mut(w) = store.value(w) + &delta;
        let direct = run(&store, &t, &z, true);
        for (a, b) in adapted.iter().zip(direct.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn permuting_rows_permutes_output() {
        let (store, t) = build(8, 2, 2);
        let z = gaussian(5, 8, 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        let perm = [3, 0, 4, 1, 2];
        let zp = ndarray::Array2::from_shape_fn((5, 8), |(i, j)| z[[perm[i], j]]);
        let (out, outp) = (run(&store, &t, &z, true), run(&store, &t, &zp, true));
        for i in 0..5 {
            for j in 0..8 {
                assert!((outp[[i, j]] - out[[perm[i], j]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn width_mismatch_is_config_error() {
        let (store, t) = build(8, 2, 1);
        let mut tape = Tape::new(&store);
        let z = tape.constant(Mat::zeros((3, 6)));
        assert!(matches!(t.encode(&mut tape, z, true), Err(Error::Config(_))));
    }

    #[test]
    fn base_weights_get_no_update() {
        let (mut store, t) = build(8, 2, 1);
        let z = gaussian(4, 8, 1.0, &mut ChaCha8Rng::seed_from_u64(4));
        let before = store.checksum(|p| p.group == ParamGroup::Base);
        let grads: Gradients = {
            let mut tape = Tape::new(&store);
            let zv = tape.constant(z);
            let out = t.encode(&mut tape, zv, true).unwrap();
            let y = tape.unary(out, Unary::Tanh);
            let s = tape.sum(y);
            tape.backward(s).params
        };
        assert!(grads.iter().all(|(id, _)| store.get(id).group != ParamGroup::Base));
        Sgd { lr: 0.1 }.step(&mut store, &grads);
        assert_eq!(before, store.checksum(|p| p.group == ParamGroup::Base));
    }

    #[test]
    fn unfreezing_attention_trains_projections() {
        let mut store = ParamStore::new();
        let cfg = TransformerConfig { layers: 1, hidden: 8, heads: 2, ffn_dim: 8, lora_rank: 2, unfreeze_attention: true };
        let t = Transformer::register(&mut store, cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert!(store.is_trainable(t.layers[0].query.w));
        assert!(!store.is_trainable(t.layers[0].ff1_w));
    }

    #[test]
    fn predict_breaks_ties_and_drops_prompt() {
        let mut store = ParamStore::new();
        let heads = OutputHeads::register(&mut store, 4, 3, &mut ChaCha8Rng::seed_from_u64(6));
        store.value_mut(heads.segment_w).fill(0.0);
        let mut tape = Tape::new(&store);
        let z = tape.constant(Mat::ones((5, 4)));
        let out = predict(&mut tape, z, 2, &heads).unwrap();
        assert_eq!(out.len(), 3);
        assert!(out.iter().all(|(s, r)| *s == 0 && *r > 0.0 && *r < 1.0));
        assert_eq!(argmax(ndarray::array![0.1, 2.0, -1.0].view()), 1);
        assert!(predict(&mut tape, z, 5, &heads).is_err());
    }

    #[test]
    fn saturated_ratio_stays_inside_unit_interval() {
        assert!(bounded_ratio(800.0) < 1.0);
        assert!(bounded_ratio(-800.0) > 0.0);
    }
}
