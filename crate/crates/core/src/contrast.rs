//! Semantic-guided multi-level contrast: frame sampling, cluster-driven negative masks,
//! the positive/negative pair losses and their weighted combination.
//!
//! The semantic view `h` and temporal view `x` of the same frame form the only positive
//! pair. Negatives are frame pairs selected by a [`PairMask`], either from clustering
//! (no labels) or from label disagreement (ground truth or pseudo-labels). Every
//! `-log σ(z)` is evaluated as `softplus(-z)`.

use rand::seq::index::sample;
use rand::Rng as _;

use crate::autodiff::{softplus, Graph, Mat, Var};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::rng::{seeded_rng, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct SampledBatch {
    pub v_s: Mat,
    pub x_s: Mat,
    pub h_s: Mat,
    /// `(video_index, frame_index)` for every row.
    pub provenance: Vec<(usize, usize)>,
    pub labels: Option<Vec<usize>>,
}

impl SampledBatch {
    pub fn rows(&self) -> usize {
        self.provenance.len()
    }
}

/// Binary pair mask stored as 0/1 reals so it can multiply a Gram matrix directly.
#[derive(Debug, Clone, PartialEq)]
pub struct PairMask {
    pub m: Mat,
}

impl PairMask {
    pub fn len(&self) -> usize {
        self.m.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.m.nrows() == 0
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.m[[i, j]] != 0.0
    }

    /// Number of selected pairs, `N_ap`.
    pub fn count(&self) -> usize {
        self.m.iter().filter(|&&v| v != 0.0).count()
    }

    pub fn zeros(n: usize) -> Self {
        Self { m: Mat::zeros((n, n)) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    pub centroids: Mat,
    pub inertia: f64,
}

/// Per-video sorted frame indices, `T_s` drawn uniformly without replacement from each.
pub fn sample_indices(lengths: &[usize], t_s: usize, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
    lengths
        .iter()
        .map(|&t| {
            if t_s > t || t_s == 0 {
                return Err(Error::InvalidArgument(format!(
                    "cannot sample {t_s} frames from a sequence of {t}"
                )));
            }
            let mut idx = sample(rng, t, t_s).into_vec();
            idx.sort_unstable();
            Ok(idx)
        })
        .collect()
}

/// Samples `T_s` frames per video and slices the three views at the same indices.
/// `views` holds `(V, X, H)` for each video.
pub fn sample_frames(
    views: &[(&Mat, &Mat, &Mat)],
    labels: Option<&[&[usize]]>,
    t_s: usize,
    rng: &mut Rng,
) -> Result<SampledBatch> {
    for (vi, (v, x, h)) in views.iter().enumerate() {
        if v.nrows() != x.nrows() || x.dim() != h.dim() {
            return Err(Error::shape(
                "sample_frames",
                format!("aligned views for video {vi}"),
                format!("{:?} {:?} {:?}", v.dim(), x.dim(), h.dim()),
            ));
        }
    }
    let lengths: Vec<usize> = views.iter().map(|(v, _, _)| v.nrows()).collect();
    let picks = sample_indices(&lengths, t_s, rng)?;
    let provenance: Vec<(usize, usize)> = picks
        .iter()
        .enumerate()
        .flat_map(|(vi, idx)| idx.iter().map(move |&t| (vi, t)))
        .collect();
    let take = |view: usize| -> Mat {
        let pick = |w: &(&'_ Mat, &'_ Mat, &'_ Mat)| -> Mat {
            match view {
                0 => w.0.clone(),
                1 => w.1.clone(),
                _ => w.2.clone(),
            }
        };
        let rows: Vec<Mat> = views.iter().map(pick).collect();
        Mat::from_shape_fn((provenance.len(), rows[0].ncols()), |(r, c)| {
            let (vi, t) = provenance[r];
            rows[vi][[t, c]]
        })
    };
    let v_s = take(0);
    let x_s = take(1);
    let h_s = take(2);
    let labels = labels.map(|ls| provenance.iter().map(|&(vi, t)| ls[vi][t]).collect());
    Ok(SampledBatch {
        v_s,
        x_s,
        h_s,
        provenance,
        labels,
    })
}

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: ndarray::ArrayView1<f64>, centroids: &Mat) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, row) in centroids.outer_iter().enumerate() {
        let d = sq_dist(point, row);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Lloyd's algorithm with k-means++ seeding.
pub fn kmeans(points: &Mat, k: usize, rng: &mut Rng) -> Result<ClusterAssignment> {
    let (n, d) = points.dim();
    if k == 0 || n < k {
        return Err(Error::InvalidArgument(format!("kmeans needs n >= k >= 1, got n={n}, k={k}")));
    }

    let mut centroids = Mat::zeros((k, d));
    centroids.row_mut(0).assign(&points.row(rng.random_range(0..n)));
    let mut d2: Vec<f64> = points.outer_iter().map(|p| sq_dist(p, centroids.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let chosen = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if r < w {
                    pick = i;
                    break;
                }
                r -= w;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).assign(&points.row(chosen));
        for (i, p) in points.outer_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, centroids.row(c)));
        }
    }

    let mut labels = vec![0usize; n];
    for _ in 0..100 {
        let mut dist = vec![0.0; n];
        for (i, p) in points.outer_iter().enumerate() {
            (labels[i], dist[i]) = nearest(p, &centroids);
        }
        let mut sums = Mat::zeros((k, d));
        let mut counts = vec![0usize; k];
        for (i, p) in points.outer_iter().enumerate() {
            let mut row = sums.row_mut(labels[i]);
            row += &p;
            counts[labels[i]] += 1;
        }
        let mut updated = centroids.clone();
        for c in 0..k {
            if counts[c] > 0 {
                updated.row_mut(c).assign(&(&sums.row(c) / counts[c] as f64));
            } else {
                let far = (0..n)
                    .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)))
                    .expect("n >= 1");
                updated.row_mut(c).assign(&points.row(far));
                dist[far] = 0.0;
            }
        }
        let shift = centroids
            .outer_iter()
            .zip(updated.outer_iter())
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = updated;
        if shift < 1e-6 {
            break;
        }
    }

    let mut inertia = 0.0;
    for (i, p) in points.outer_iter().enumerate() {
        let (c, dd) = nearest(p, &centroids);
        labels[i] = c;
        inertia += dd;
    }
    Ok(ClusterAssignment {
        labels,
        centroids,
        inertia,
    })
}

/// `out[i][j] = 1` iff `labels[i] == labels[j]`.
pub fn label_mask(labels: &[usize]) -> Mat {
    let n = labels.len();
    Mat::from_shape_fn((n, n), |(i, j)| f64::from(u8::from(labels[i] == labels[j])))
}

/// Negatives are pairs with different labels.
pub fn supervised_mask(labels: &[usize]) -> PairMask {
    PairMask {
        m: label_mask(labels).mapv(|v| 1.0 - v),
    }
}

/// Intersection of the three per-view "different cluster" masks.
pub fn mask_from_views(l_in: &[usize], l_te: &[usize], l_se: &[usize]) -> PairMask {
    let n = l_in.len();
    assert!(l_te.len() == n && l_se.len() == n, "mask_from_views: view lengths differ");
    PairMask {
        m: Mat::from_shape_fn((n, n), |(i, j)| {
            f64::from(u8::from(l_in[i] != l_in[j] && l_te[i] != l_te[j] && l_se[i] != l_se[j]))
        }),
    }
}

/// Cluster ids of the input, temporal and semantic views of a batch.
pub fn cluster_views(batch: &SampledBatch, k: usize, rng: &mut Rng) -> Result<[Vec<usize>; 3]> {
    // One seed per view so each clustering is reproducible on its own.
    let seeds: [u64; 3] = [rng.random(), rng.random(), rng.random()];
    let views = [&batch.v_s, &batch.x_s, &batch.h_s];
    let mut out: [Vec<usize>; 3] = Default::default();
    for ((slot, view), seed) in out.iter_mut().zip(views).zip(seeds) {
        *slot = kmeans(view, k, &mut seeded_rng(seed))?.labels;
    }
    Ok(out)
}

/// Clusters `v_s`, `x_s` and `h_s` separately; a pair is negative only when all three
/// clusterings separate it.
pub fn dynamic_mask(batch: &SampledBatch, k: usize, rng: &mut Rng) -> Result<PairMask> {
    let [l_in, l_te, l_se] = cluster_views(batch, k, rng)?;
    Ok(mask_from_views(&l_in, &l_te, &l_se))
}

/// Negatives from input-feature clusters only; the clustering-ablation baseline.
pub fn input_cluster_mask(batch: &SampledBatch, k: usize, rng: &mut Rng) -> Result<PairMask> {
    let seed: u64 = rng.random();
    let l_in = kmeans(&batch.v_s, k, &mut seeded_rng(seed))?.labels;
    Ok(supervised_mask(&l_in))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub ap_pos: f64,
    pub ap_neg: f64,
    pub aa_neg: f64,
    pub pp_neg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            ap_pos: 1.0,
            ap_neg: 1.0,
            aa_neg: 1.0,
            pp_neg: 1.0,
        }
    }
}

impl LossWeights {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        Self {
            ap_pos: cfg.weight_ap_pos,
            ap_neg: cfg.weight_ap_neg,
            aa_neg: cfg.weight_aa_neg,
            pp_neg: cfg.weight_pp_neg,
        }
    }
}

/// Loss values of one SMC evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SmcComponents {
    pub total: f64,
    pub ap_pos: f64,
    pub ap_neg: f64,
    pub aa_neg: f64,
    pub pp_neg: f64,
}

/// Graph handles of one SMC evaluation.
#[derive(Debug, Clone, Copy)]
pub struct SmcTerms {
    pub total: Var,
    pub ap_pos: Var,
    pub ap_neg: Var,
    pub aa_neg: Var,
    pub pp_neg: Var,
}

impl SmcTerms {
    pub fn values(&self, g: &Graph) -> SmcComponents {
        SmcComponents {
            total: g.scalar(self.total),
            ap_pos: g.scalar(self.ap_pos),
            ap_neg: g.scalar(self.ap_neg),
            aa_neg: g.scalar(self.aa_neg),
            pp_neg: g.scalar(self.pp_neg),
        }
    }
}

fn check_pair(op: &'static str, g: &Graph, a: Var, b: Var) -> Result<()> {
    if g.shape(a).1 != g.shape(b).1 {
        return Err(Error::shape(op, g.shape(a).1, g.shape(b).1));
    }
    Ok(())
}

/// `mean_i softplus(-<h_i, x_i> / ξ)`.
pub fn positive_loss_graph(g: &mut Graph, h: Var, x: Var, xi: f64) -> Result<Var> {
    check_pair("positive_loss", g, h, x)?;
    if g.shape(h) != g.shape(x) {
        return Err(Error::shape("positive_loss", format!("{:?}", g.shape(h)), format!("{:?}", g.shape(x))));
    }
    let dots = g.row_dot(h, x);
    let z = g.scale(dots, -1.0 / xi);
    let sp = g.softplus(z);
    Ok(g.mean(sp))
}

/// `(1/N_ap) Σ_ij M_ij softplus(<a_i, b_j> / ξ)`, zero when the mask is empty.
pub fn negative_loss_graph(g: &mut Graph, a: Var, b: Var, mask: &PairMask, xi: f64) -> Result<Var> {
    check_pair("negative_loss", g, a, b)?;
    let (na, nb) = (g.shape(a).0, g.shape(b).0);
    if mask.m.dim() != (na, nb) {
        return Err(Error::shape(
            "negative_loss",
            format!("{na} x {nb} mask"),
            format!("{:?}", mask.m.dim()),
        ));
    }
    let n_ap = mask.count();
    if n_ap == 0 {
        return Ok(g.constant(Mat::zeros((1, 1))));
    }
    let gram = g.matmul_t(a, b);
    let z = g.scale(gram, 1.0 / xi);
    let sp = g.softplus(z);
    let masked = g.mul_const(sp, mask.m.clone());
    let s = g.sum(masked);
    Ok(g.scale(s, 1.0 / n_ap as f64))
}

/// Weighted four-term loss on graph variables `h_s`, `x_s`.
pub fn smc_loss_graph(
    g: &mut Graph,
    h: Var,
    x: Var,
    mask: &PairMask,
    xi: f64,
    w: &LossWeights,
) -> Result<SmcTerms> {
    let ap_pos = positive_loss_graph(g, h, x, xi)?;
    let ap_neg = negative_loss_graph(g, h, x, mask, xi)?;
    let aa_neg = negative_loss_graph(g, h, h, mask, xi)?;
    let pp_neg = negative_loss_graph(g, x, x, mask, xi)?;
    let parts = [
        g.scale(ap_pos, w.ap_pos),
        g.scale(ap_neg, w.ap_neg),
        g.scale(aa_neg, w.aa_neg),
        g.scale(pp_neg, w.pp_neg),
    ];
    let mut total = parts[0];
    for &p in &parts[1..] {
        total = g.add(total, p);
    }
    Ok(SmcTerms {
        total,
        ap_pos,
        ap_neg,
        aa_neg,
        pp_neg,
    })
}

/// L_ap^P on plain matrices.
pub fn positive_loss(h: &Mat, x: &Mat, xi: f64) -> Result<f64> {
    let mut g = Graph::new();
    let (hv, xv) = (g.constant(h.clone()), g.constant(x.clone()));
    let l = positive_loss_graph(&mut g, hv, xv, xi)?;
    Ok(g.scalar(l))
}

pub fn negative_loss(a: &Mat, b: &Mat, mask: &PairMask, xi: f64) -> Result<f64> {
    let mut g = Graph::new();
    let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
    let l = negative_loss_graph(&mut g, av, bv, mask, xi)?;
    Ok(g.scalar(l))
}

pub fn smc_loss(batch: &SampledBatch, mask: &PairMask, xi: f64, w: &LossWeights) -> Result<SmcComponents> {
    let mut g = Graph::new();
    let (h, x) = (g.constant(batch.h_s.clone()), g.constant(batch.x_s.clone()));
    Ok(smc_loss_graph(&mut g, h, x, mask, xi, w)?.values(&g))
}

fn cosine(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        a.dot(&b) / (na * nb)
    }
}

/// InfoNCE with cosine similarity, averaged over the positives of one anchor.
pub fn info_nce(x: &Mat, anchor: usize, positives: &[usize], negatives: &[usize], tau: f64) -> Result<f64> {
    if positives.is_empty() {
        return Err(Error::InvalidArgument("info_nce needs at least one positive".into()));
    }
    let n = x.nrows();
    let all = positives.iter().chain(negatives);
    if anchor >= n || all.clone().any(|&j| j >= n || j == anchor) || positives.iter().any(|p| negatives.contains(p)) {
        return Err(Error::InvalidArgument(
            "info_nce index sets must be in range, disjoint and exclude the anchor".into(),
        ));
    }
    let sim = |j: usize| cosine(x.row(anchor), x.row(j)) / tau;
    let neg: Vec<f64> = negatives.iter().map(|&k| sim(k)).collect();
    let mut total = 0.0;
    for &p in positives {
        let sp = sim(p);
        // -log(e^sp / (e^sp + Σ e^sn)) via log-sum-exp
        let m = neg.iter().copied().fold(sp, f64::max);
        let lse = m + ((sp - m).exp() + neg.iter().map(|s| (s - m).exp()).sum::<f64>()).ln();
        total += lse - sp;
    }
    Ok(total / positives.len() as f64)
}

/// `-log σ(<a,p>) - log σ(-<a,n>)`.
pub fn triplet_loss(a: &[f64], p: &[f64], n: &[f64]) -> Result<f64> {
    if a.len() != p.len() || a.len() != n.len() {
        return Err(Error::shape("triplet_loss", a.len(), format!("{} and {}", p.len(), n.len())));
    }
    let dot = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(x, y)| x * y).sum::<f64>();
    Ok(softplus(-dot(a, p)) + softplus(dot(a, n)))
}

pub const CONTRAST_CSV_HEADER: &str = "step,loss_total,l_ap_p,l_ap_n,l_aa_n,l_pp_n";

pub fn contrast_csv_row(step: usize, c: &SmcComponents) -> String {
    format!(
        "{step},{},{},{},{},{}",
        c.total, c.ap_pos, c.ap_neg, c.aa_neg, c.pp_neg
    )
}
