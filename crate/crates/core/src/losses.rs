//! Weighted focal segmentation loss and pixel-wise metric learning
//! (pools, triplet selection, triplet loss).

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::episodes::LabelMask;
use crate::error::{config_err, Error, Result};
use crate::tensor::Tensor;

pub const PROB_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FocalConfig {
    pub gamma: f64,
    pub class_weighting: bool,
    pub include_background: bool,
}

impl Default for FocalConfig {
    fn default() -> Self {
        FocalConfig {
            gamma: 2.0,
            class_weighting: true,
            include_background: true,
        }
    }
}

impl FocalConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.gamma.is_finite() || self.gamma < 0.0 {
            return Err(config_err!("focal gamma must be finite and >= 0"));
        }
        Ok(())
    }
}

/// `ω = 1 / ln(1.1 + M_n / M)`.
pub fn class_weight(m_n: usize, m: usize) -> f64 {
    1.0 / (1.1 + m_n as f64 / m as f64).ln()
}

/// Loss value and its gradient with respect to `probs` (`[H, W, N+1]`).
pub fn focal_seg_loss_grad(probs: &Tensor, gt: &LabelMask, cfg: &FocalConfig) -> Result<(f64, Tensor)> {
    let (h, w, k) = probs.dims3();
    if (gt.height, gt.width) != (h, w) {
        return Err(Error::Input(format!(
            "ground truth is {}x{}, probabilities are {h}x{w}",
            gt.height, gt.width
        )));
    }
    let m = h * w;
    let mut counts = vec![0usize; k];
    for &l in &gt.labels {
        let l = l as usize;
        if l >= k {
            return Err(Error::Data(format!("label {l} outside [0, {}]", k - 1)));
        }
        counts[l] += 1;
    }
    let first = usize::from(!cfg.include_background);
    let n_hat = k - first;
    if n_hat == 0 {
        return Ok((0.0, Tensor::zeros(probs.shape())));
    }
    let omega: Vec<f64> = counts
        .iter()
        .map(|&c| if cfg.class_weighting { class_weight(c, m) } else { 1.0 })
        .collect();
    let norm = 1.0 / (m as f64 * n_hat as f64);
    let g = cfg.gamma;
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(probs.shape());
    let pd = probs.data();
    let gd = grad.data_mut();
    for (i, &l) in gt.labels.iter().enumerate() {
        let l = l as usize;
        if l < first {
            continue;
        }
        let idx = i * k + l;
        let raw = pd[idx];
        let p = raw.clamp(PROB_EPS, 1.0);
        let q = 1.0 - p;
        let lp = p.ln();
        loss -= norm * omega[l] * q.powf(g) * lp;
        if (PROB_EPS..=1.0).contains(&raw) {
            // d/dp [(1-p)^γ ln p] = (1-p)^γ / p − γ (1-p)^(γ-1) ln p
            let mut d = q.powf(g) / p;
            if g != 0.0 && lp != 0.0 {
                d -= g * q.powf(g - 1.0) * lp;
            }
            gd[idx] = -norm * omega[l] * d;
        }
    }
    Ok((loss, grad))
}

pub fn focal_seg_loss(probs: &Tensor, gt: &LabelMask, cfg: &FocalConfig) -> Result<f64> {
    focal_seg_loss_grad(probs, gt, cfg).map(|(l, _)| l)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PixelRef {
    pub x: usize,
    pub y: usize,
    /// Row in the `[h·w, C]` embedding.
    pub index: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ClassPools {
    pub anchors: Vec<PixelRef>,
    pub hard_positives: Vec<PixelRef>,
    pub hard_negatives: Vec<PixelRef>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TripletPools {
    pub height: usize,
    pub width: usize,
    /// `per_class[n - 1]` for episode-local label `n`.
    pub per_class: Vec<ClassPools>,
}

/// Pools for every foreground episode label `1..=n_way`.
pub fn build_pools(pred: &LabelMask, gt: &LabelMask, n_way: usize) -> Result<TripletPools> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::Input("prediction and ground truth differ in shape".into()));
    }
    let mut per_class = vec![ClassPools::default(); n_way];
    for (i, (&p, &t)) in pred.labels.iter().zip(&gt.labels).enumerate() {
        let r = PixelRef {
            x: i % gt.width,
            y: i / gt.width,
            index: i,
        };
        let (p, t) = (p as usize, t as usize);
        if p == t {
            if (1..=n_way).contains(&t) {
                per_class[t - 1].anchors.push(r);
            }
            continue;
        }
        if (1..=n_way).contains(&t) {
            per_class[t - 1].hard_positives.push(r);
        }
        if (1..=n_way).contains(&p) {
            per_class[p - 1].hard_negatives.push(r);
        }
    }
    Ok(TripletPools {
        height: gt.height,
        width: gt.width,
        per_class,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TripletStrategy {
    #[default]
    Spat,
    Rnd,
    Fea,
}

impl std::str::FromStr for TripletStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spat" => Ok(TripletStrategy::Spat),
            "rnd" => Ok(TripletStrategy::Rnd),
            "fea" => Ok(TripletStrategy::Fea),
            _ => Err(config_err!("unknown triplet strategy {s:?}")),
        }
    }
}

/// Distance-to-weight kernel for `spat` hard-positive selection.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpatialKernel {
    /// `exp(−d/τ)`
    #[default]
    Exponential,
    /// `exp(−d²/(2τ²))`
    Gaussian,
}

impl SpatialKernel {
    /// Log-weight for distance `d`.
    pub fn log_weight(self, d: f64, tau: f64) -> f64 {
        match self {
            SpatialKernel::Exponential => -d / tau,
            SpatialKernel::Gaussian => -d * d / (2.0 * tau * tau),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub num_triplets: usize,
    pub strategy: TripletStrategy,
    pub kernel: SpatialKernel,
    /// τ as a fraction of the feature-map diagonal.
    pub tau_fraction: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            num_triplets: 20,
            strategy: TripletStrategy::Spat,
            kernel: SpatialKernel::Exponential,
            tau_fraction: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Triplet {
    /// Episode-local label `n`.
    pub class: usize,
    pub anchor: PixelRef,
    pub hard_positive: PixelRef,
    pub hard_negative: PixelRef,
}

fn pixel_dist(a: PixelRef, b: PixelRef) -> f64 {
    let dx = a.x as f64 - b.x as f64;
    let dy = a.y as f64 - b.y as f64;
    (dx * dx + dy * dy).sqrt()
}

fn feat_dist2(emb: &Tensor, a: usize, b: usize) -> f64 {
    let c = emb.last_dim();
    let d = emb.data();
    d[a * c..(a + 1) * c]
        .iter()
        .zip(&d[b * c..(b + 1) * c])
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}

/// Selection probabilities of `candidates` for anchor `a` under `kernel`.
pub fn spat_probabilities(a: PixelRef, candidates: &[PixelRef], kernel: SpatialKernel, tau: f64) -> Vec<f64> {
    let logs: Vec<f64> = candidates
        .iter()
        .map(|&c| kernel.log_weight(pixel_dist(a, c), tau))
        .collect();
    let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

/// Draws up to `num_triplets` anchors from the union of anchor pools and
/// completes each within its class. `emb` (`[h, w, C]`) is only read by `fea`.
pub fn select_triplets<R: Rng + ?Sized>(
    pools: &TripletPools,
    cfg: &SelectionConfig,
    emb: Option<&Tensor>,
    rng: &mut R,
) -> Vec<Triplet> {
    let joint: Vec<(usize, PixelRef)> = pools
        .per_class
        .iter()
        .enumerate()
        .flat_map(|(n, p)| p.anchors.iter().map(move |&a| (n, a)))
        .collect();
    let take = cfg.num_triplets.min(joint.len());
    if take == 0 {
        return Vec::new();
    }
    let mut picks = index::sample(rng, joint.len(), take).into_vec();
    picks.sort_unstable();
    let diag = ((pools.height * pools.height + pools.width * pools.width) as f64).sqrt();
    let tau = (cfg.tau_fraction * diag).max(f64::MIN_POSITIVE);
    let mut out = Vec::with_capacity(take);
    for i in picks {
        let (n, anchor) = joint[i];
        let p = &pools.per_class[n];
        if p.hard_positives.is_empty() || p.hard_negatives.is_empty() {
            continue;
        }
        let (hp, hn) = match cfg.strategy {
            TripletStrategy::Spat => {
                let probs = spat_probabilities(anchor, &p.hard_positives, cfg.kernel, tau);
                let hp = if probs.len() == 1 {
                    0
                } else {
                    WeightedIndex::new(&probs).expect("kernel weights are positive").sample(rng)
                };
                (hp, rng.random_range(0..p.hard_negatives.len()))
            }
            TripletStrategy::Rnd => (
                rng.random_range(0..p.hard_positives.len()),
                rng.random_range(0..p.hard_negatives.len()),
            ),
            TripletStrategy::Fea => {
                let emb = emb.expect("feature-distance selection needs embeddings");
                let d_hp = |j: &usize| feat_dist2(emb, anchor.index, p.hard_positives[*j].index);
                let d_hn = |j: &usize| feat_dist2(emb, anchor.index, p.hard_negatives[*j].index);
                let hp = (0..p.hard_positives.len())
                    .max_by(|a, b| d_hp(a).total_cmp(&d_hp(b)))
                    .unwrap_or(0);
                let hn = (0..p.hard_negatives.len())
                    .min_by(|a, b| d_hn(a).total_cmp(&d_hn(b)))
                    .unwrap_or(0);
                (hp, hn)
            }
        };
        out.push(Triplet {
            class: n + 1,
            anchor,
            hard_positive: p.hard_positives[hp],
            hard_negative: p.hard_negatives[hn],
        });
    }
    out
}

/// Σ max(‖f_a − f_hp‖² − ‖f_a − f_hn‖² + α, 0) and its gradient with respect to `emb`.
pub fn triplet_loss_grad(triplets: &[Triplet], emb: &Tensor, alpha: f64) -> (f64, Tensor) {
    let c = emb.last_dim();
    let mut grad = Tensor::zeros(emb.shape());
    let mut loss = 0.0;
    let d = emb.data();
    for t in triplets {
        let (a, p, n) = (t.anchor.index, t.hard_positive.index, t.hard_negative.index);
        let margin = feat_dist2(emb, a, p) - feat_dist2(emb, a, n) + alpha;
        if margin <= 0.0 {
            continue;
        }
        loss += margin;
        let gd = grad.data_mut();
        for j in 0..c {
            let (fa, fp, fn_) = (d[a * c + j], d[p * c + j], d[n * c + j]);
            gd[a * c + j] += 2.0 * (fn_ - fp);
            gd[p * c + j] -= 2.0 * (fa - fp);
            gd[n * c + j] += 2.0 * (fa - fn_);
        }
    }
    (loss, grad)
}

pub fn triplet_loss(triplets: &[Triplet], emb: &Tensor, alpha: f64) -> f64 {
    triplet_loss_grad(triplets, emb, alpha).0
}

/// Coefficient on the metric-learning term for the given epoch.
pub fn pml_weight(lambda: f64, epoch: usize, pml_start_epoch: usize) -> f64 {
    if epoch >= pml_start_epoch {
        lambda
    } else {
        0.0
    }
}

pub fn total_loss(l_seg: f64, l_pml: f64, lambda: f64, epoch: usize, pml_start_epoch: usize) -> f64 {
    let w = pml_weight(lambda, epoch, pml_start_epoch);
    if w == 0.0 {
        l_seg
    } else {
        l_seg + w * l_pml
    }
}
