//! Neighbourhood consistency: windows of temporal embeddings centred at frames with the
//! same label should look alike to the scorer G, windows around differently labelled
//! frames should not.
//!
//! A window centred at `t` covers frames `[t - W/2, t + W/2)`; valid centres satisfy
//! `W/2 <= t <= T - W/2`.

use rand::Rng as _;

use crate::autodiff::{Graph, Mat, Var};
use crate::error::{Error, Result};
use crate::models::{Bound, Networks, ParamStore};
use crate::rng::Rng;

const MAX_ANCHOR_ATTEMPTS: usize = 10;

/// Centre indices for one anchor and its partners.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnchorDraw {
    pub anchor: usize,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeighbourhoodSample {
    pub anchors: Vec<Mat>,
    pub positives: Vec<Vec<Mat>>,
    pub negatives: Vec<Vec<Mat>>,
    pub centers: Vec<AnchorDraw>,
}

impl NeighbourhoodSample {
    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

pub fn window_rows(center: usize, w: usize) -> std::ops::Range<usize> {
    center - w / 2..center + w / 2
}

/// Draws `K` anchors and `M` same-/different-label partner centres per anchor.
/// Returns an empty list when some anchor finds no different-label partner within
/// ten draws, so the sequence contributes nothing this step.
pub fn sample_centers(labels: &[usize], w: usize, k: usize, m: usize, rng: &mut Rng) -> Result<Vec<AnchorDraw>> {
    let known: Vec<Option<usize>> = labels.iter().copied().map(Some).collect();
    sample_centers_partial(&known, w, k, m, rng)
}

/// As [`sample_centers`], for sequences where some frames carry no label. Unlabelled
/// frames are never used as anchors or partners.
pub fn sample_centers_partial(
    labels: &[Option<usize>],
    w: usize,
    k: usize,
    m: usize,
    rng: &mut Rng,
) -> Result<Vec<AnchorDraw>> {
    let t = labels.len();
    if w < 2 || w % 2 != 0 {
        return Err(Error::InvalidArgument(format!("window length must be even and >= 2, got {w}")));
    }
    if t < w {
        return Err(Error::InvalidArgument(format!("sequence of {t} frames is shorter than window {w}")));
    }
    let (lo, hi) = (w / 2, t - w / 2);
    let pick = |pool: &[usize], rng: &mut Rng| -> Vec<usize> {
        (0..m).map(|_| pool[rng.random_range(0..pool.len())]).collect()
    };
    let mut draws = Vec::with_capacity(k);
    for _ in 0..k {
        let mut found = None;
        for _ in 0..MAX_ANCHOR_ATTEMPTS {
            let anchor = rng.random_range(lo..=hi);
            let Some(label) = labels[anchor] else { continue };
            let mut same = Vec::new();
            let mut diff = Vec::new();
            for c in lo..=hi {
                match labels[c] {
                    Some(l) if l == label => same.push(c),
                    Some(_) => diff.push(c),
                    None => {}
                }
            }
            if !diff.is_empty() {
                found = Some((anchor, same, diff));
                break;
            }
        }
        let Some((anchor, same, diff)) = found else {
            return Ok(Vec::new());
        };
        draws.push(AnchorDraw {
            anchor,
            positives: pick(&same, rng),
            negatives: pick(&diff, rng),
        });
    }
    Ok(draws)
}

pub fn sample_neighbourhoods(
    x: &Mat,
    labels: &[usize],
    w: usize,
    k: usize,
    m: usize,
    rng: &mut Rng,
) -> Result<NeighbourhoodSample> {
    if labels.len() != x.nrows() {
        return Err(Error::shape("sample_neighbourhoods", x.nrows(), labels.len()));
    }
    let centers = sample_centers(labels, w, k, m, rng)?;
    let window = |c: usize| x.slice(ndarray::s![window_rows(c, w), ..]).to_owned();
    Ok(NeighbourhoodSample {
        anchors: centers.iter().map(|d| window(d.anchor)).collect(),
        positives: centers.iter().map(|d| d.positives.iter().map(|&c| window(c)).collect()).collect(),
        negatives: centers.iter().map(|d| d.negatives.iter().map(|&c| window(c)).collect()).collect(),
        centers,
    })
}

/// Pooled-window pairs for the scorer; `anchor` indexes into the anchor list.
struct PooledPairs {
    anchors: Vec<Var>,
    positives: Vec<(usize, Var)>,
    negatives: Vec<(usize, Var)>,
}

fn pair_logits(g: &mut Graph, nets: &Networks, p: &Bound, anchors: &[Var], pairs: &[(usize, Var)]) -> Result<Var> {
    let left = g.concat_rows(pairs.iter().map(|&(i, _)| anchors[i]).collect());
    let right = g.concat_rows(pairs.iter().map(|&(_, v)| v).collect());
    let input = g.concat_cols(vec![left, right]);
    nets.scorer_logit(g, p, input)
}

/// `(1/P) Σ [softplus(-z_pos) + softplus(z_neg)]` with `P` the number of anchor/partner pairs.
fn loss_from_pooled(g: &mut Graph, nets: &Networks, p: &Bound, pooled: &PooledPairs) -> Result<Var> {
    let n_pairs = pooled.positives.len();
    if n_pairs == 0 {
        return Ok(g.constant(Mat::zeros((1, 1))));
    }
    let z_pos = pair_logits(g, nets, p, &pooled.anchors, &pooled.positives)?;
    let z_neg = pair_logits(g, nets, p, &pooled.anchors, &pooled.negatives)?;
    let neg_z_pos = g.scale(z_pos, -1.0);
    let sp_pos = g.softplus(neg_z_pos);
    let sp_neg = g.softplus(z_neg);
    let s_pos = g.sum(sp_pos);
    let s_neg = g.sum(sp_neg);
    let total = g.add(s_pos, s_neg);
    Ok(g.scale(total, 1.0 / n_pairs as f64))
}

fn check_window(op: &'static str, win: &Mat, w: usize, d: usize) -> Result<()> {
    if win.dim() != (w, d) {
        return Err(Error::shape(op, format!("{w} x {d}"), format!("{:?}", win.dim())));
    }
    Ok(())
}

/// Scorer probability that two windows share a label.
pub fn consistency_score(nets: &Networks, store: &ParamStore, n1: &Mat, n2: &Mat) -> Result<f64> {
    check_window("consistency_score", n2, n1.nrows(), nets.embedding_dim)?;
    check_window("consistency_score", n1, n1.nrows(), nets.embedding_dim)?;
    if n1.nrows() == 0 {
        return Err(Error::shape("consistency_score", "W >= 1", 0));
    }
    let mut g = Graph::new();
    let p = store.bind(&mut g, |_| false);
    let a = g.constant(n1.clone());
    let b = g.constant(n2.clone());
    let pa = g.col_max(a);
    let pb = g.col_max(b);
    let z = pair_logits(&mut g, nets, &p, &[pa], &[(0, pb)])?;
    Ok(crate::autodiff::sigmoid(g.scalar(z)))
}

/// NCA loss on explicit windows placed on `g` as variables supplied by `window`.
pub fn nca_loss_windows(
    g: &mut Graph,
    nets: &Networks,
    p: &Bound,
    sample: &NeighbourhoodSample,
    mut window: impl FnMut(&mut Graph, &Mat) -> Var,
) -> Result<Var> {
    let w = sample.anchors.first().map_or(0, |a| a.nrows());
    let mut pooled = PooledPairs {
        anchors: Vec::new(),
        positives: Vec::new(),
        negatives: Vec::new(),
    };
    for (i, anchor) in sample.anchors.iter().enumerate() {
        check_window("nca_loss", anchor, w, nets.embedding_dim)?;
        let v = window(g, anchor);
        pooled.anchors.push(g.col_max(v));
        for (list, out) in [
            (&sample.positives[i], &mut pooled.positives),
            (&sample.negatives[i], &mut pooled.negatives),
        ] {
            for win in list {
                check_window("nca_loss", win, w, nets.embedding_dim)?;
                let v = window(g, win);
                out.push((i, g.col_max(v)));
            }
        }
    }
    if pooled.positives.len() != pooled.negatives.len() {
        return Err(Error::InvalidArgument("nca sample needs as many negatives as positives".into()));
    }
    loss_from_pooled(g, nets, p, &pooled)
}

/// NCA loss with the scorer's current parameters; zero for an empty sample.
pub fn nca_loss(nets: &Networks, store: &ParamStore, sample: &NeighbourhoodSample) -> Result<f64> {
    let mut g = Graph::new();
    let p = store.bind(&mut g, |_| false);
    let l = nca_loss_windows(&mut g, nets, &p, sample, |g, m| g.constant(m.clone()))?;
    Ok(g.scalar(l))
}

/// NCA loss over several sequences whose embeddings already live on `g`.
/// Each entry pairs a `[T × D]` embedding with its centre draws; pairs from all
/// sequences share one normalization.
pub fn nca_loss_graph(
    g: &mut Graph,
    nets: &Networks,
    p: &Bound,
    sequences: &[(Var, Vec<AnchorDraw>)],
    w: usize,
) -> Result<Var> {
    let mut pooled = PooledPairs {
        anchors: Vec::new(),
        positives: Vec::new(),
        negatives: Vec::new(),
    };
    for (x, draws) in sequences {
        let pool = |g: &mut Graph, c: usize| {
            let rows = g.gather_rows(*x, window_rows(c, w).collect());
            g.col_max(rows)
        };
        for d in draws {
            let a = pool(g, d.anchor);
            pooled.anchors.push(a);
            let idx = pooled.anchors.len() - 1;
            for &c in &d.positives {
                let v = pool(g, c);
                pooled.positives.push((idx, v));
            }
            for &c in &d.negatives {
                let v = pool(g, c);
                pooled.negatives.push((idx, v));
            }
        }
    }
    loss_from_pooled(g, nets, p, &pooled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{max_relative_error, numerical_gradient};
    use crate::config::ExperimentConfig;
    use crate::models::Network;
    use crate::rng::seeded_rng;

    fn nets(d: usize) -> (Networks, ParamStore) {
        let cfg = ExperimentConfig {
            feature_dim: 3,
            embedding_dim: d,
            hidden_channels: 4,
            semantic_hidden: 4,
            scorer_hidden: 6,
            encoder_depth: 1,
            ..Default::default()
        };
        Networks::new(&cfg, 2, &mut seeded_rng(1))
    }

    fn random_mat(rng: &mut Rng, r: usize, c: usize) -> Mat {
        Mat::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    fn random_sample(rng: &mut Rng, k: usize, m: usize, w: usize, d: usize) -> NeighbourhoodSample {
        NeighbourhoodSample {
            anchors: (0..k).map(|_| random_mat(rng, w, d)).collect(),
            positives: (0..k).map(|_| (0..m).map(|_| random_mat(rng, w, d)).collect()).collect(),
            negatives: (0..k).map(|_| (0..m).map(|_| random_mat(rng, w, d)).collect()).collect(),
            centers: Vec::new(),
        }
    }

    /// Loop-based reference: explicit max-pool, scorer probability and log terms.
    fn oracle_loss(nets: &Networks, store: &ParamStore, s: &NeighbourhoodSample) -> f64 {
        let pool = |m: &Mat| -> Vec<f64> {
            (0..m.ncols()).map(|j| (0..m.nrows()).map(|i| m[[i, j]]).fold(f64::NEG_INFINITY, f64::max)).collect()
        };
        let score = |a: &Mat, b: &Mat| {
            let mut v = pool(a);
            v.extend(pool(b));
            crate::models::nca_scorer_forward(nets, store, &v).unwrap()
        };
        let mut total = 0.0;
        let mut count = 0.0;
        for i in 0..s.anchors.len() {
            for j in 0..s.positives[i].len() {
                total += score(&s.anchors[i], &s.positives[i][j]).ln();
                total += (1.0 - score(&s.anchors[i], &s.negatives[i][j])).ln();
                count += 1.0;
            }
        }
        -total / count
    }

    #[test]
    fn single_class_gives_empty_sample() {
        let x = Mat::zeros((40, 3));
        let s = sample_neighbourhoods(&x, &[2; 40], 8, 1, 10, &mut seeded_rng(0)).unwrap();
        assert!(s.is_empty());
        let (n, store) = nets(3);
        assert_eq!(nca_loss(&n, &store, &s).unwrap(), 0.0);
    }

    #[test]
    fn centres_respect_range_and_labels() {
        let t = 64;
        let labels: Vec<usize> = (0..t).map(|i| (i / 16) % 2).collect();
        let x = Mat::from_shape_fn((t, 2), |(i, j)| (i * 2 + j) as f64);
        let mut rng = seeded_rng(3);
        for _ in 0..50 {
            let s = sample_neighbourhoods(&x, &labels, 8, 1, 10, &mut rng).unwrap();
            assert_eq!(s.centers.len(), 1);
            let d = &s.centers[0];
            let all = std::iter::once(&d.anchor).chain(&d.positives).chain(&d.negatives);
            assert!(all.clone().all(|&c| (4..=t - 4).contains(&c)));
            assert!(d.positives.iter().all(|&c| labels[c] == labels[d.anchor]));
            assert!(d.negatives.iter().all(|&c| labels[c] != labels[d.anchor]));
            assert_eq!(d.positives.len(), 10);
            assert_eq!(s.anchors[0].nrows(), 8);
            assert_eq!(s.anchors[0][[0, 0]], ((d.anchor - 4) * 2) as f64);
        }
        assert!(sample_neighbourhoods(&Mat::zeros((6, 2)), &[0; 6], 8, 1, 10, &mut rng).is_err());
    }

    #[test]
    fn unlabelled_frames_never_drawn() {
        let labels: Vec<Option<usize>> = (0..48)
            .map(|i| if (16..24).contains(&i) { None } else { Some(usize::from(i >= 24)) })
            .collect();
        let mut rng = seeded_rng(8);
        for _ in 0..30 {
            for d in sample_centers_partial(&labels, 8, 2, 5, &mut rng).unwrap() {
                let all = std::iter::once(&d.anchor).chain(&d.positives).chain(&d.negatives);
                assert!(all.clone().all(|&c| labels[c].is_some()));
            }
        }
    }

    #[test]
    fn score_properties() {
        let (n, store) = nets(4);
        let mut rng = seeded_rng(5);
        let a = random_mat(&mut rng, 8, 4);
        let b = random_mat(&mut rng, 8, 4);
        let s = consistency_score(&n, &store, &a, &b).unwrap();
        assert!(s > 0.0 && s < 1.0);
        assert_eq!(s, consistency_score(&n, &store, &a, &b).unwrap());
        // lowering non-maximal entries keeps the pooled vector and the score
        let mut b2 = b.clone();
        for j in 0..4 {
            let arg = (0..8).max_by(|&x, &y| b[[x, j]].total_cmp(&b[[y, j]])).unwrap();
            for i in 0..8 {
                if i != arg {
                    b2[[i, j]] -= 3.0;
                }
            }
        }
        assert_eq!(s, consistency_score(&n, &store, &a, &b2).unwrap());
        assert!(consistency_score(&n, &store, &a, &random_mat(&mut rng, 7, 4)).is_err());
    }

    #[test]
    fn constant_half_scorer() {
        let (n, mut store) = nets(3);
        let last = n.scorer.layers.last().unwrap();
        store.get_mut(last.w).fill(0.0);
        store.get_mut(last.b).fill(0.0);
        let s = random_sample(&mut seeded_rng(2), 1, 1, 4, 3);
        let l = nca_loss(&n, &store, &s).unwrap();
        assert!((l - 1.3862943611198906).abs() < 1e-12);
    }

    #[test]
    fn perfect_discrimination_limit() {
        // One-dimensional embeddings: positive windows peak at +1, negatives at -1,
        // and the scorer output is a large multiple of the partner's pooled value.
        let (n, mut store) = nets(1);
        let first = &n.scorer.layers[0];
        let last = n.scorer.layers.last().unwrap();
        let mut w0 = Mat::zeros(store.get(first.w).dim());
        w0[[1, 0]] = 1.0;
        w0[[1, 1]] = -1.0;
        *store.get_mut(first.w) = w0;
        store.get_mut(first.b).fill(0.0);
        let mut w1 = Mat::zeros(store.get(last.w).dim());
        w1[[0, 0]] = 50.0;
        w1[[1, 0]] = -50.0;
        *store.get_mut(last.w) = w1;
        store.get_mut(last.b).fill(0.0);
        let s = NeighbourhoodSample {
            anchors: vec![Mat::zeros((4, 1))],
            positives: vec![vec![Mat::ones((4, 1)); 3]],
            negatives: vec![vec![-Mat::ones((4, 1)); 3]],
            centers: Vec::new(),
        };
        let l = nca_loss(&n, &store, &s).unwrap();
        assert!(l >= 0.0 && l < 1e-20, "{l}");
    }

    #[test]
    fn matches_loop_oracle_and_gradients() {
        let (n, store) = nets(5);
        let mut rng = seeded_rng(9);
        for _ in 0..5 {
            let s = random_sample(&mut rng, 2, 3, 4, 5);
            let l = nca_loss(&n, &store, &s).unwrap();
            assert!((l - oracle_loss(&n, &store, &s)).abs() < 1e-10);
        }
        let s = random_sample(&mut rng, 2, 3, 4, 5);

        // gradient with respect to one anchor window
        let mut g = Graph::new();
        let p = store.bind(&mut g, |_| false);
        let mut first = None;
        let l = nca_loss_windows(&mut g, &n, &p, &s, |g, m| {
            let v = if first.is_none() { g.param(m.clone()) } else { g.constant(m.clone()) };
            first.get_or_insert(v);
            v
        })
        .unwrap();
        let grads = g.backward(l);
        let numeric = numerical_gradient(&s.anchors[0], 1e-6, |a| {
            let mut s2 = s.clone();
            s2.anchors[0] = a.clone();
            nca_loss(&n, &store, &s2).unwrap()
        });
        assert!(max_relative_error(grads.get(first.unwrap()).unwrap(), &numeric, 1e-8) < 1e-4);

        // gradient with respect to the scorer parameters
        let mut g = Graph::new();
        let p = store.bind(&mut g, |net| net == Network::Scorer);
        let l = nca_loss_windows(&mut g, &n, &p, &s, |g, m| g.constant(m.clone())).unwrap();
        let grads = g.backward(l);
        for layer in &n.scorer.layers {
            for id in [layer.w, layer.b] {
                let numeric = numerical_gradient(store.get(id), 1e-6, |v| {
                    let mut st = store.clone();
                    *st.get_mut(id) = v.clone();
                    nca_loss(&n, &st, &s).unwrap()
                });
                assert!(max_relative_error(grads.get(p.var(id)).unwrap(), &numeric, 1e-8) < 1e-4);
            }
        }
    }

    #[test]
    fn graph_version_matches_window_version() {
        let (n, store) = nets(3);
        let mut rng = seeded_rng(4);
        let x = random_mat(&mut rng, 40, 3);
        let labels: Vec<usize> = (0..40).map(|i| (i / 10) % 3).collect();
        let s = sample_neighbourhoods(&x, &labels, 8, 2, 4, &mut seeded_rng(6)).unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g, |_| false);
        let xv = g.constant(x.clone());
        let l = nca_loss_graph(&mut g, &n, &p, &[(xv, s.centers.clone())], 8).unwrap();
        assert!((g.scalar(l) - nca_loss(&n, &store, &s).unwrap()).abs() < 1e-12);
    }

    proptest::proptest! {
        #[test]
        fn permutation_invariant_and_nonnegative(seed in proptest::prelude::any::<u64>()) {
            let (n, store) = nets(3);
            let mut rng = seeded_rng(seed);
            let s = random_sample(&mut rng, 2, 4, 4, 3);
            let l = nca_loss(&n, &store, &s).unwrap();
            proptest::prop_assert!(l > 0.0 && l.is_finite());
            let mut s2 = s.clone();
            s2.positives[0].reverse();
            s2.negatives[1].rotate_left(1);
            proptest::prop_assert!((l - nca_loss(&n, &store, &s2).unwrap()).abs() < 1e-12);
        }
    }
}
