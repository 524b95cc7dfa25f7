//! The four trainable networks: temporal encoder T, semantic extractor S,
//! neighbourhood-consistency scorer G and linear classifier C.
//!
//! Parameters live in a flat [`ParamStore`]; each network holds [`ParamId`]s into it.
//! A forward pass first binds the store onto a [`Graph`] (trainable networks become
//! differentiable leaves, frozen ones constants) and then runs on the bound variables.

use ndarray::Axis;
use rand::Rng as _;

use crate::autodiff::{Graph, Mat, Var};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Network {
    Temporal,
    Semantic,
    Scorer,
    Classifier,
}

impl Network {
    pub const ALL: [Network; 4] = [
        Network::Temporal,
        Network::Semantic,
        Network::Scorer,
        Network::Classifier,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    networks: Vec<Network>,
    values: Vec<Mat>,
}

impl ParamStore {
    fn register(&mut self, name: String, network: Network, value: Mat) -> ParamId {
        self.names.push(name);
        self.networks.push(network);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn network(&self, id: ParamId) -> Network {
        self.networks[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn num_scalars(&self, network: Network) -> usize {
        self.ids()
            .filter(|&id| self.network(id) == network)
            .map(|id| self.get(id).len())
            .sum()
    }

    /// Places every parameter on `g`; networks for which `trainable` is false become constants.
    pub fn bind(&self, g: &mut Graph, trainable: impl Fn(Network) -> bool) -> Bound {
        let vars = self
            .values
            .iter()
            .zip(&self.networks)
            .map(|(v, &net)| {
                if trainable(net) {
                    g.param(v.clone())
                } else {
                    g.constant(v.clone())
                }
            })
            .collect();
        Bound { vars }
    }
}

/// Graph variables for every parameter of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

fn uniform_init(rng: &mut Rng, rows: usize, cols: usize, fan_in: usize) -> Mat {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Mat::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        network: Network,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let w = store.register(
            format!("{name}.weight"),
            network,
            uniform_init(rng, in_dim, out_dim, in_dim),
        );
        let b = store.register(
            format!("{name}.bias"),
            network,
            uniform_init(rng, 1, out_dim, in_dim),
        );
        Self { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let y = g.matmul(x, p.var(self.w));
        g.add_row(y, p.var(self.b))
    }
}

/// A stack of ReLU hidden layers followed by a linear output layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        network: Network,
        dims: &[usize],
    ) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, rng, &format!("{name}.{i}"), network, w[0], w[1]))
            .collect();
        Self { layers }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, p, h);
            if i < last {
                h = g.relu(h);
            }
        }
        h
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }
}

/// 1-D convolution over time with "same" output length and replicate padding,
/// realised as an unfold (gathered shifted copies) followed by one matmul.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl Conv1d {
    fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        network: Network,
        kernel: usize,
        in_ch: usize,
        out_ch: usize,
    ) -> Self {
        let fan_in = kernel * in_ch;
        let w = store.register(
            format!("{name}.weight"),
            network,
            uniform_init(rng, fan_in, out_ch, fan_in),
        );
        let b = store.register(
            format!("{name}.bias"),
            network,
            uniform_init(rng, 1, out_ch, fan_in),
        );
        Self {
            w,
            b,
            kernel,
            in_ch,
            out_ch,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let (len, _) = g.shape(x);
        let half = (self.kernel / 2) as isize;
        let taps: Vec<Var> = (-half..=half)
            .map(|off| {
                let idx = (0..len as isize)
                    .map(|t| (t + off).clamp(0, len as isize - 1) as usize)
                    .collect();
                g.gather_rows(x, idx)
            })
            .collect();
        let unfolded = if taps.len() == 1 { taps[0] } else { g.concat_cols(taps) };
        let y = g.matmul(unfolded, p.var(self.w));
        g.add_row(y, p.var(self.b))
    }
}

/// Nearest-neighbour resampling indices from `from` rows to `to` rows.
fn nearest_indices(from: usize, to: usize) -> Vec<usize> {
    (0..to).map(|i| i * from / to).collect()
}

/// Encoder–decoder temporal network standing in for a coarse-to-fine TCN.
///
/// Encoder stage: conv → ReLU → halve by average pooling. Decoder stage: double by
/// repetition, add the encoder feature of matching resolution, conv → ReLU. Every
/// decoder output is resampled to full length, concatenated, and projected to D.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemporalEncoder {
    pub encoder: Vec<Conv1d>,
    pub decoder: Vec<Conv1d>,
    pub projection: Linear,
    pub depth: usize,
    pub feature_dim: usize,
}

impl TemporalEncoder {
    pub fn forward(&self, g: &mut Graph, p: &Bound, v: Var) -> Var {
        let (t, _) = g.shape(v);
        let block = 1usize << self.depth;
        let padded_len = t.div_ceil(block) * block;
        let mut h = if padded_len == t {
            v
        } else {
            let idx = (0..padded_len).map(|i| i.min(t - 1)).collect();
            g.gather_rows(v, idx)
        };

        let mut skips = Vec::with_capacity(self.depth);
        for conv in &self.encoder {
            let e = conv.forward(g, p, h);
            let e = g.relu(e);
            skips.push(e);
            h = g.avg_pool2(e);
        }

        let mut outputs = Vec::with_capacity(self.depth);
        for (conv, skip) in self.decoder.iter().zip(skips.iter().rev()) {
            let len = g.shape(h).0;
            let up = g.gather_rows(h, nearest_indices(len, len * 2));
            let merged = g.add(up, *skip);
            let d = conv.forward(g, p, merged);
            h = g.relu(d);
            outputs.push(h);
        }

        let crop: Vec<usize> = (0..t).collect();
        let resampled: Vec<Var> = outputs
            .into_iter()
            .map(|o| {
                let len = g.shape(o).0;
                let idx: Vec<usize> = nearest_indices(len, padded_len)
                    .into_iter()
                    .take(t)
                    .collect();
                g.gather_rows(o, idx)
            })
            .collect();
        let fused = g.concat_cols(resampled);
        let fused = if g.shape(fused).0 == t { fused } else { g.gather_rows(fused, crop) };
        self.projection.forward(g, p, fused)
    }

    /// Frames on either side of an input frame that can influence a given output frame
    /// (a conservative bound).
    pub fn receptive_radius(&self) -> usize {
        let half = self.encoder[0].kernel / 2;
        let mut r = 0;
        for l in 0..self.depth {
            let scale = 1usize << l;
            // encoder conv, pooling/upsampling alignment, decoder conv
            r += half * scale + 2 * scale + half * scale;
        }
        r + (1 << self.depth)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Networks {
    pub temporal: TemporalEncoder,
    pub semantic: Mlp,
    pub scorer: Mlp,
    pub classifier: Linear,
    pub embedding_dim: usize,
    pub num_classes: usize,
}

impl Networks {
    /// Builds all four networks and initializes their parameters from `rng`.
    pub fn new(cfg: &ExperimentConfig, num_classes: usize, rng: &mut Rng) -> (Self, ParamStore) {
        let mut store = ParamStore::default();
        let c = cfg.hidden_channels;
        let k = cfg.kernel_size;
        let d = cfg.embedding_dim;

        let mut encoder = Vec::with_capacity(cfg.encoder_depth);
        for l in 0..cfg.encoder_depth {
            let in_ch = if l == 0 { cfg.feature_dim } else { c };
            encoder.push(Conv1d::new(
                &mut store,
                rng,
                &format!("temporal.enc{l}"),
                Network::Temporal,
                k,
                in_ch,
                c,
            ));
        }
        let decoder = (0..cfg.encoder_depth)
            .map(|l| {
                Conv1d::new(
                    &mut store,
                    rng,
                    &format!("temporal.dec{l}"),
                    Network::Temporal,
                    k,
                    c,
                    c,
                )
            })
            .collect();
        let projection = Linear::new(
            &mut store,
            rng,
            "temporal.proj",
            Network::Temporal,
            c * cfg.encoder_depth,
            d,
        );
        let temporal = TemporalEncoder {
            encoder,
            decoder,
            projection,
            depth: cfg.encoder_depth,
            feature_dim: cfg.feature_dim,
        };

        let mut sem_dims = vec![cfg.feature_dim];
        sem_dims.extend(std::iter::repeat_n(cfg.semantic_hidden, cfg.semantic_layers));
        sem_dims.push(d);
        let semantic = Mlp::new(&mut store, rng, "semantic", Network::Semantic, &sem_dims);

        let scorer = Mlp::new(
            &mut store,
            rng,
            "scorer",
            Network::Scorer,
            &[2 * d, cfg.scorer_hidden, 1],
        );
        let classifier = Linear::new(&mut store, rng, "classifier", Network::Classifier, d, num_classes);

        (
            Self {
                temporal,
                semantic,
                scorer,
                classifier,
                embedding_dim: d,
                num_classes,
            },
            store,
        )
    }

    fn check_features(&self, op: &'static str, g: &Graph, v: Var) -> Result<()> {
        let (t, f) = g.shape(v);
        if f != self.temporal.feature_dim || t == 0 {
            return Err(Error::shape(
                op,
                format!("T x {}", self.temporal.feature_dim),
                format!("{t} x {f}"),
            ));
        }
        Ok(())
    }

    /// X = T(V) for one video, `[T × F] → [T × D]`.
    pub fn temporal_forward(&self, g: &mut Graph, p: &Bound, v: Var) -> Result<Var> {
        self.check_features("temporal_forward", g, v)?;
        Ok(self.temporal.forward(g, p, v))
    }

    /// H = S(V), applied to every frame independently, `[T × F] → [T × D]`.
    pub fn semantic_forward(&self, g: &mut Graph, p: &Bound, v: Var) -> Result<Var> {
        self.check_features("semantic_forward", g, v)?;
        Ok(self.semantic.forward(g, p, v))
    }

    /// Per-frame logits `[T × D] → [T × A]`.
    pub fn classifier_forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let (_, d) = g.shape(x);
        if d != self.embedding_dim {
            return Err(Error::shape("classifier_forward", self.embedding_dim, d));
        }
        Ok(self.classifier.forward(g, p, x))
    }

    /// Pre-sigmoid scorer output for pooled pairs `[n × 2D] → [n × 1]`.
    pub fn scorer_logit(&self, g: &mut Graph, p: &Bound, pooled_pairs: Var) -> Result<Var> {
        let (_, w) = g.shape(pooled_pairs);
        if w != self.scorer.in_dim() {
            return Err(Error::shape("nca_scorer_forward", self.scorer.in_dim(), w));
        }
        Ok(self.scorer.forward(g, p, pooled_pairs))
    }
}

/// Scorer probability for one concatenated pooled pair, strictly inside (0, 1) for finite logits.
pub fn nca_scorer_forward(
    nets: &Networks,
    store: &ParamStore,
    pooled_pair: &[f64],
) -> Result<f64> {
    let mut g = Graph::new();
    let p = store.bind(&mut g, |_| false);
    let x = g.constant(Mat::from_shape_vec((1, pooled_pair.len()), pooled_pair.to_vec()).expect("row"));
    let z = nets.scorer_logit(&mut g, &p, x)?;
    Ok(crate::autodiff::sigmoid(g.scalar(z)))
}

/// Runs T on one video without recording gradients.
pub fn embed_temporal(nets: &Networks, store: &ParamStore, features: &Mat) -> Result<Mat> {
    let mut g = Graph::new();
    let p = store.bind(&mut g, |_| false);
    let v = g.constant(features.clone());
    let x = nets.temporal_forward(&mut g, &p, v)?;
    Ok(g.value(x).clone())
}

pub fn embed_semantic(nets: &Networks, store: &ParamStore, features: &Mat) -> Result<Mat> {
    let mut g = Graph::new();
    let p = store.bind(&mut g, |_| false);
    let v = g.constant(features.clone());
    let h = nets.semantic_forward(&mut g, &p, v)?;
    Ok(g.value(h).clone())
}

/// Plain affine map `x · W + b` with the classifier's current parameters.
pub fn classifier_logits(nets: &Networks, store: &ParamStore, embeddings: &Mat) -> Mat {
    let w = store.get(nets.classifier.w);
    let b = store.get(nets.classifier.b);
    embeddings.dot(w) + b
}

/// Softmax along each row.
pub fn softmax_rows(logits: &Mat) -> Mat {
    let mut out = logits.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        row.mapv_inplace(|x| (x - max).exp());
        let s = row.sum();
        row /= s;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{max_relative_error, numerical_gradient};
    use crate::rng::seeded_rng;

    fn small_cfg() -> ExperimentConfig {
        ExperimentConfig {
            feature_dim: 8,
            embedding_dim: 16,
            hidden_channels: 6,
            semantic_hidden: 7,
            scorer_hidden: 5,
            encoder_depth: 3,
            ..Default::default()
        }
    }

    fn random_input(t: usize, f: usize, seed: u64) -> Mat {
        let mut rng = seeded_rng(seed);
        Mat::from_shape_fn((t, f), |_| rng.random_range(-1.0..1.0))
    }

    fn build() -> (Networks, ParamStore) {
        Networks::new(&small_cfg(), 4, &mut seeded_rng(5))
    }

    #[test]
    fn temporal_shape_contract() {
        let (nets, store) = build();
        for video in 0..2 {
            let x = embed_temporal(&nets, &store, &random_input(64, 8, video)).unwrap();
            assert_eq!(x.dim(), (64, 16));
        }
        // non-multiple of 2^depth is padded then cropped
        let x = embed_temporal(&nets, &store, &random_input(61, 8, 9)).unwrap();
        assert_eq!(x.dim(), (61, 16));
        assert!(x.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn temporal_rejects_wrong_feature_dim() {
        let (nets, store) = build();
        let err = embed_temporal(&nets, &store, &random_input(16, 5, 0)).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn temporal_constant_in_constant_out() {
        let (nets, store) = build();
        let row = random_input(1, 8, 3);
        let v = Mat::from_shape_fn((40, 8), |(_, j)| row[[0, j]]);
        let x = embed_temporal(&nets, &store, &v).unwrap();
        for t in 1..40 {
            for d in 0..16 {
                assert!((x[[t, d]] - x[[0, d]]).abs() < 1e-12, "frame {t} dim {d}");
            }
        }
    }

    #[test]
    fn temporal_locality() {
        let (nets, store) = build();
        let radius = nets.temporal.receptive_radius();
        let t = 128;
        let base = random_input(t, 8, 4);
        let x0 = embed_temporal(&nets, &store, &base).unwrap();
        let probe = 64;
        let mut perturbed = base.clone();
        perturbed[[probe, 0]] += 1e-3;
        let x1 = embed_temporal(&nets, &store, &perturbed).unwrap();
        let changed: Vec<usize> = (0..t)
            .filter(|&i| (0..16).any(|d| x0[[i, d]] != x1[[i, d]]))
            .collect();
        assert!(changed.contains(&probe));
        assert!(changed.len() > 1, "receptive field should exceed one frame");
        for i in changed {
            assert!(i.abs_diff(probe) <= radius, "frame {i} outside radius {radius}");
        }
    }

    #[test]
    fn semantic_is_framewise() {
        let (nets, store) = build();
        let v = random_input(10, 8, 6);
        let h = embed_semantic(&nets, &store, &v).unwrap();
        let perm: Vec<usize> = vec![3, 1, 4, 0, 9, 2, 6, 5, 8, 7];
        let vp = Mat::from_shape_fn((10, 8), |(i, j)| v[[perm[i], j]]);
        let hp = embed_semantic(&nets, &store, &vp).unwrap();
        for i in 0..10 {
            for d in 0..16 {
                assert!((hp[[i, d]] - h[[perm[i], d]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn semantic_zero_weights_gives_bias() {
        let (nets, mut store) = build();
        for layer in &nets.semantic.layers {
            store.get_mut(layer.w).fill(0.0);
        }
        let last = nets.semantic.layers.last().unwrap();
        let bias = store.get(last.b).clone();
        let h = embed_semantic(&nets, &store, &random_input(5, 8, 1)).unwrap();
        for row in h.rows() {
            assert_eq!(row, bias.row(0));
        }
    }

    #[test]
    fn semantic_cross_frame_jacobian_is_zero() {
        let (nets, store) = build();
        let v = random_input(6, 8, 2);
        // derivative of sum(H[t]) w.r.t. V via the tape
        for t in 0..6 {
            let mut g = Graph::new();
            let p = store.bind(&mut g, |_| false);
            let vv = g.param(v.clone());
            let h = nets.semantic_forward(&mut g, &p, vv).unwrap();
            let row = g.gather_rows(h, vec![t]);
            let s = g.sum(row);
            let grads = g.backward(s);
            let jac = grads.get(vv).unwrap();
            for other in (0..6).filter(|&o| o != t) {
                assert!(jac.row(other).iter().all(|&x| x == 0.0));
            }
            assert!(jac.row(t).iter().any(|&x| x != 0.0));
        }
    }

    #[test]
    fn classifier_zero_weights_uniform() {
        let (nets, mut store) = build();
        store.get_mut(nets.classifier.w).fill(0.0);
        store.get_mut(nets.classifier.b).fill(0.0);
        let logits = classifier_logits(&nets, &store, &random_input(7, 16, 3));
        assert_eq!(logits.dim(), (7, 4));
        let p = softmax_rows(&logits);
        assert!(p.iter().all(|&x| (x - 0.25).abs() < 1e-15));
    }

    #[test]
    fn scorer_range_and_zero_output_layer() {
        let (nets, mut store) = build();
        for seed in 0..20 {
            let x = random_input(1, 32, seed);
            let s = nca_scorer_forward(&nets, &store, x.as_slice().unwrap()).unwrap();
            assert!(s > 0.0 && s < 1.0);
        }
        let out = nets.scorer.layers.last().unwrap();
        store.get_mut(out.w).fill(0.0);
        store.get_mut(out.b).fill(0.0);
        let s = nca_scorer_forward(&nets, &store, random_input(1, 32, 1).as_slice().unwrap()).unwrap();
        assert_eq!(s, 0.5);
        assert!(nca_scorer_forward(&nets, &store, &[0.0; 5]).is_err());
    }

    #[test]
    fn scorer_input_gradient_matches_finite_differences() {
        let (nets, store) = build();
        let x = random_input(1, 32, 8);
        let f = |x: &Mat| {
            let mut g = Graph::new();
            let p = store.bind(&mut g, |_| false);
            let v = g.param(x.clone());
            let z = nets.scorer_logit(&mut g, &p, v).unwrap();
            (g, v, z)
        };
        let (g, v, z) = f(&x);
        // readout: the probability itself
        let prob = crate::autodiff::sigmoid(g.scalar(z));
        let dz = g.backward(z).get(v).unwrap() * (prob * (1.0 - prob));
        let numeric = numerical_gradient(&x, 1e-6, |p| {
            let (g, _, z) = f(p);
            crate::autodiff::sigmoid(g.scalar(z))
        });
        let err = max_relative_error(&dz, &numeric, 1e-8);
        assert!(err < 1e-5, "rel err {err}");
    }

    /// Analytic parameter gradients of a scalar readout of each network vs central differences.
    #[test]
    fn parameter_gradients_match_finite_differences() {
        let cfg = ExperimentConfig {
            feature_dim: 3,
            embedding_dim: 4,
            hidden_channels: 3,
            semantic_hidden: 3,
            scorer_hidden: 3,
            encoder_depth: 2,
            ..Default::default()
        };
        let (nets, store) = Networks::new(&cfg, 3, &mut seeded_rng(1));
        let v = random_input(12, 3, 2);
        let readout = |store: &ParamStore| -> (Graph, Bound, Var) {
            let mut g = Graph::new();
            let p = store.bind(&mut g, |_| true);
            let vv = g.constant(v.clone());
            let x = nets.temporal_forward(&mut g, &p, vv).unwrap();
            let h = nets.semantic_forward(&mut g, &p, vv).unwrap();
            let logits = nets.classifier_forward(&mut g, &p, x).unwrap();
            let pooled = g.col_max(x);
            let pooled_h = g.col_max(h);
            let pair = g.concat_cols(vec![pooled, pooled_h]);
            let score = nets.scorer_logit(&mut g, &p, pair).unwrap();
            let hx = g.row_dot(h, x);
            let a = g.softplus(hx);
            let a = g.sum(a);
            let ce = g.softmax_cross_entropy(logits, (0..12).map(|i| i % 3).collect());
            let sc = g.softplus(score);
            let sc = g.sum(sc);
            let t = g.add(a, ce);
            let total = g.add(t, sc);
            (g, p, total)
        };
        let (g, p, total) = readout(&store);
        let grads = g.backward(total);
        for id in store.ids() {
            let analytic = grads.get_or_zeros(p.var(id), store.get(id).dim());
            let numeric = numerical_gradient(store.get(id), 1e-6, |m| {
                let mut s = store.clone();
                *s.get_mut(id) = m.clone();
                let (g, _, t) = readout(&s);
                g.scalar(t)
            });
            let err = max_relative_error(&analytic, &numeric, 1e-6);
            assert!(err < 1e-4, "{}: rel err {err}", store.name(id));
        }
    }
}
