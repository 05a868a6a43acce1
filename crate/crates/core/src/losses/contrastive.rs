//! Label-conditioned pixel-wise contrastive loss.
//!
//! Anchor pixels of class `c`, subsampled from one image, are pulled toward the mean
//! representation of class `c` in a partner image and pushed away from the partner's
//! means of the other foreground classes, with temperature-scaled cosine similarity.
//! Background pixels take part in no term.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// A `(row, col)` pixel coordinate.
pub type Coord = (usize, usize);

/// How anchor images are paired with the images supplying class means.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    /// Means from the anchor image itself.
    Intra,
    /// Means from one partner drawn uniformly (with replacement, self allowed) from the batch.
    Inter,
    /// Means pooled over every image of the batch.
    Pooled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    /// Anchors sampled per class and image.
    pub samples_per_class: usize,
    pub mode: MatchMode,
    pub lambda_cont: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            samples_per_class: 3,
            mode: MatchMode::Intra,
            lambda_cont: 0.1,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be > 0".into()));
        }
        if self.samples_per_class == 0 {
            return Err(Error::Config("samples_per_class must be >= 1".into()));
        }
        if !(self.lambda_cont >= 0.0) {
            return Err(Error::Config("lambda_cont must be >= 0".into()));
        }
        Ok(())
    }
}

/// Borrowed D×H×W representation map of one image (channel-major, like a tensor item).
#[derive(Debug, Clone, Copy)]
pub struct FeatureMap<'a, T> {
    pub data: &'a [T],
    pub dim: usize,
    pub h: usize,
    pub w: usize,
}

impl<'a, T: Real> FeatureMap<'a, T> {
    pub fn new(data: &'a [T], dim: usize, h: usize, w: usize) -> Self {
        assert_eq!(data.len(), dim * h * w, "feature map size");
        Self { data, dim, h, w }
    }

    pub fn from_tensor(t: &'a Tensor<T>, item: usize) -> Self {
        Self::new(t.item(item), t.c, t.h, t.w)
    }

    /// The D-dimensional vector at pixel `p = row·w + col`.
    pub fn pixel(&self, p: usize) -> Vec<T> {
        let hw = self.h * self.w;
        (0..self.dim).map(|d| self.data[d * hw + p]).collect()
    }
}

/// Sampled anchor coordinates per foreground class; index 0 (background) stays empty.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PixelCoordSet {
    pub per_class: Vec<Vec<Coord>>,
}

impl PixelCoordSet {
    pub fn empty(num_classes: usize) -> Self {
        Self {
            per_class: vec![Vec::new(); num_classes + 1],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.per_class.len().saturating_sub(1)
    }

    pub fn class(&self, c: usize) -> &[Coord] {
        self.per_class.get(c).map_or(&[], |v| v.as_slice())
    }
}

/// Per-class mean representations of one image (or a pool of images).
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMeanSet<T> {
    /// Indexed by class id; `None` where the class has no pixel. Index 0 is always `None`.
    pub means: Vec<Option<Vec<T>>>,
    pub counts: Vec<usize>,
}

impl<T: Real> ClassMeanSet<T> {
    pub fn num_classes(&self) -> usize {
        self.means.len().saturating_sub(1)
    }

    pub fn is_present(&self, c: usize) -> bool {
        self.means.get(c).is_some_and(|m| m.is_some())
    }

    pub fn get(&self, c: usize) -> Option<&[T]> {
        self.means.get(c).and_then(|m| m.as_deref())
    }

    pub fn present(&self) -> impl Iterator<Item = usize> + '_ {
        (1..self.means.len()).filter(|&c| self.is_present(c))
    }
}

fn check_labels(labels: &[u8], h: usize, w: usize) -> Result<()> {
    if labels.len() != h * w {
        return Err(Error::DimMismatch(format!(
            "{} labels for a {h}x{w} map",
            labels.len()
        )));
    }
    Ok(())
}

/// Cosine similarity `aᵀb / (‖a‖‖b‖)`.
pub fn cosine_sim<T: Real>(a: &[T], b: &[T]) -> Result<T> {
    let (na, nb) = (norm(a), norm(b));
    if na == T::zero() || nb == T::zero() {
        return Err(Error::ZeroNorm);
    }
    Ok(dot(a, b) / (na * nb))
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(x, y)| *x * *y).sum()
}

fn norm<T: Real>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// Class means over all pixels of each foreground class (not a subsample).
pub fn class_means<T: Real>(z: &FeatureMap<'_, T>, labels: &[u8], num_classes: usize) -> Result<ClassMeanSet<T>> {
    pooled_class_means(std::slice::from_ref(z), &[labels], num_classes)
}

/// Class means pooled over several images.
pub fn pooled_class_means<T: Real>(
    maps: &[FeatureMap<'_, T>],
    labels: &[&[u8]],
    num_classes: usize,
) -> Result<ClassMeanSet<T>> {
    let dim = maps.first().map_or(0, |m| m.dim);
    let mut sums = vec![vec![T::zero(); dim]; num_classes + 1];
    let mut counts = vec![0usize; num_classes + 1];
    for (z, lab) in maps.iter().zip(labels) {
        check_labels(lab, z.h, z.w)?;
        let hw = z.h * z.w;
        for (p, &l) in lab.iter().enumerate() {
            let l = l as usize;
            if l == 0 || l > num_classes {
                continue;
            }
            counts[l] += 1;
            for d in 0..dim {
                sums[l][d] += z.data[d * hw + p];
            }
        }
    }
    let means = sums
        .into_iter()
        .zip(&counts)
        .enumerate()
        .map(|(c, (s, &n))| {
            (c > 0 && n > 0).then(|| {
                let inv = T::one() / T::from_usize(n).expect("count");
                s.into_iter().map(|v| v * inv).collect()
            })
        })
        .collect();
    Ok(ClassMeanSet { means, counts })
}

/// Draws `min(n, |S_c|)` coordinates of class `c` uniformly without replacement.
/// Coordinates are returned in the order drawn.
pub fn sample_coords<R: Rng + ?Sized>(labels: &[u8], w: usize, c: u8, n: usize, rng: &mut R) -> Vec<Coord> {
    let pool: Vec<usize> = labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l == c)
        .map(|(p, _)| p)
        .collect();
    let k = n.min(pool.len());
    if k == 0 {
        return Vec::new();
    }
    sample(rng, pool.len(), k)
        .into_iter()
        .map(|i| (pool[i] / w, pool[i] % w))
        .collect()
}

/// Anchor sets `S̃_c` for every foreground class of one label map, classes in ascending order.
pub fn sample_anchor_set<R: Rng + ?Sized>(
    labels: &[u8],
    w: usize,
    num_classes: usize,
    n: usize,
    rng: &mut R,
) -> PixelCoordSet {
    let mut set = PixelCoordSet::empty(num_classes);
    for c in 1..=num_classes {
        set.per_class[c] = sample_coords(labels, w, c as u8, n, rng);
    }
    set
}

/// Per-pixel term
/// `−log( e^{s_c/τ} / (e^{s_c/τ} + Σ_{k≠c} e^{s_k/τ}) )` with `s_k = sim(z_i, z̄_k)` and `k`
/// ranging over the other foreground classes present in `means`.
pub fn contrastive_pixel_term<T: Real>(z_i: &[T], means: &ClassMeanSet<T>, c: usize, tau: f64) -> Result<T> {
    let pos = means.get(c).ok_or(Error::AbsentClass(c))?;
    let tau = T::from_f64_lossy(tau);
    let s_pos = cosine_sim(z_i, pos)? / tau;
    let mut logits = vec![s_pos];
    for k in means.present().filter(|&k| k != c) {
        logits.push(cosine_sim(z_i, means.get(k).expect("present"))? / tau);
    }
    Ok(log_sum_exp(&logits) - s_pos)
}

fn log_sum_exp<T: Real>(v: &[T]) -> T {
    let m = v.iter().copied().fold(T::neg_infinity(), T::max);
    m + v.iter().map(|x| (*x - m).exp()).sum::<T>().ln()
}

/// Anchors in row-major order, so sums do not depend on the order coordinates were drawn in.
fn canonical(coords: &[Coord]) -> Vec<Coord> {
    let mut v = coords.to_vec();
    v.sort_unstable();
    v
}

/// Result of one anchor-image / mean-image pairing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairLoss<T> {
    pub value: T,
    /// Number of classes with anchors in `x` and a mean in `x′` (C_eff).
    pub shared_classes: usize,
}

impl<T: Real> PairLoss<T> {
    pub fn has_shared_classes(&self) -> bool {
        self.shared_classes > 0
    }
}

/// `(1/C_eff) Σ_c (1/|S̃_c(x)|) Σ_{i∈S̃_c(x)} L_{i,c}(z(x)_i, z̄_c(x′))` over the classes
/// shared by the anchors and the partner means. Zero, with `shared_classes == 0`, when
/// no class is shared.
pub fn contrastive_pair_loss<T: Real>(
    z_x: &FeatureMap<'_, T>,
    anchors: &PixelCoordSet,
    means_xprime: &ClassMeanSet<T>,
    tau: f64,
) -> Result<PairLoss<T>> {
    let mut total = T::zero();
    let mut shared = 0;
    for c in 1..anchors.per_class.len() {
        let coords = anchors.class(c);
        if coords.is_empty() || !means_xprime.is_present(c) {
            continue;
        }
        shared += 1;
        let mut s = T::zero();
        for (r, col) in canonical(coords) {
            let zi = z_x.pixel(r * z_x.w + col);
            s += contrastive_pixel_term(&zi, means_xprime, c, tau)?;
        }
        total += s / T::from_usize(coords.len()).expect("len");
    }
    let value = if shared == 0 {
        T::zero()
    } else {
        total / T::from_usize(shared).expect("count")
    };
    Ok(PairLoss {
        value,
        shared_classes: shared,
    })
}

/// Gradient of a pair loss: per-anchor vectors and per-class mean vectors.
#[derive(Debug, Clone)]
pub struct PairGrad<T> {
    pub loss: PairLoss<T>,
    pub anchors: Vec<(Coord, Vec<T>)>,
    pub means: Vec<Option<Vec<T>>>,
}

/// Norm used inside the similarity; `eps > 0` guards zero vectors.
fn guarded_norm<T: Real>(a: &[T], eps: T) -> Result<(T, T)> {
    let n = norm(a);
    if n == T::zero() && eps == T::zero() {
        return Err(Error::ZeroNorm);
    }
    Ok((n, n + eps))
}

/// `∂ sim(a, b) / ∂a` for `sim = aᵀb / (n_a n_b)` with guarded norms.
fn sim_grad_wrt<T: Real>(a: &[T], b: &[T], raw_na: T, na: T, nb: T, sim: T, out: &mut [T], scale: T) {
    let inv = T::one() / (na * nb);
    let radial = if raw_na > T::zero() { sim / (na * raw_na) } else { T::zero() };
    for ((o, av), bv) in out.iter_mut().zip(a).zip(b) {
        *o += scale * (*bv * inv - radial * *av);
    }
}

/// [`contrastive_pair_loss`] with its gradient, scaled by `weight`.
pub fn contrastive_pair_loss_grad<T: Real>(
    z_x: &FeatureMap<'_, T>,
    anchors: &PixelCoordSet,
    means_xprime: &ClassMeanSet<T>,
    tau: f64,
    weight: T,
    eps: T,
) -> Result<PairGrad<T>> {
    let dim = z_x.dim;
    let shared: Vec<usize> = (1..anchors.per_class.len())
        .filter(|&c| !anchors.class(c).is_empty() && means_xprime.is_present(c))
        .collect();
    let mut mean_grads: Vec<Option<Vec<T>>> = vec![None; means_xprime.means.len()];
    let mut anchor_grads = Vec::new();
    if shared.is_empty() {
        return Ok(PairGrad {
            loss: PairLoss {
                value: T::zero(),
                shared_classes: 0,
            },
            anchors: anchor_grads,
            means: mean_grads,
        });
    }
    let present: Vec<usize> = means_xprime.present().collect();
    let mean_norms: Vec<(T, T)> = present
        .iter()
        .map(|&k| guarded_norm(means_xprime.get(k).expect("present"), eps))
        .collect::<Result<_>>()?;
    for &k in &present {
        mean_grads[k] = Some(vec![T::zero(); dim]);
    }
    let inv_tau = T::from_f64_lossy(1.0 / tau);
    let c_eff = T::from_usize(shared.len()).expect("count");
    let mut total = T::zero();
    for &c in &shared {
        let coords = anchors.class(c);
        let per_anchor = weight / (c_eff * T::from_usize(coords.len()).expect("len"));
        let mut class_sum = T::zero();
        for (r, col) in canonical(coords) {
            let zi = z_x.pixel(r * z_x.w + col);
            let (raw_nz, nz) = guarded_norm(&zi, eps)?;
            let sims: Vec<T> = present
                .iter()
                .zip(&mean_norms)
                .map(|(&k, &(_, nm))| dot(&zi, means_xprime.get(k).expect("present")) / (nz * nm))
                .collect();
            let logits: Vec<T> = sims.iter().map(|s| *s * inv_tau).collect();
            let lse = log_sum_exp(&logits);
            let pos = present.iter().position(|&k| k == c).expect("shared class present");
            class_sum += lse - logits[pos];
            let mut gz = vec![T::zero(); dim];
            for (j, &k) in present.iter().enumerate() {
                let softmax = (logits[j] - lse).exp();
                let indicator = if k == c { T::one() } else { T::zero() };
                // ∂L/∂s_k
                let ds = (softmax - indicator) * inv_tau * per_anchor;
                let mk = means_xprime.get(k).expect("present");
                let (raw_nm, nm) = mean_norms[j];
                sim_grad_wrt(&zi, mk, raw_nz, nz, nm, sims[j], &mut gz, ds);
                let gm = mean_grads[k].as_mut().expect("allocated");
                sim_grad_wrt(mk, &zi, raw_nm, nm, nz, sims[j], gm, ds);
            }
            anchor_grads.push(((r, col), gz));
        }
        total += class_sum / T::from_usize(coords.len()).expect("len");
    }
    Ok(PairGrad {
        loss: PairLoss {
            value: total / c_eff,
            shared_classes: shared.len(),
        },
        anchors: anchor_grads,
        means: mean_grads,
    })
}

/// Spreads mean gradients uniformly over the pixels each mean was averaged from, adding
/// into `grad` (D×H×W, one image).
pub fn class_means_backward<T: Real>(
    mean_grads: &[Option<Vec<T>>],
    counts: &[usize],
    labels: &[u8],
    grad: &mut [T],
    dim: usize,
) {
    let hw = labels.len();
    for (p, &l) in labels.iter().enumerate() {
        let l = l as usize;
        if l == 0 || l >= mean_grads.len() {
            continue;
        }
        if let Some(g) = &mean_grads[l] {
            let inv = T::one() / T::from_usize(counts[l]).expect("count");
            for d in 0..dim {
                grad[d * hw + p] += g[d] * inv;
            }
        }
    }
}

/// Batch contrastive loss and (optionally) its gradient with respect to the representations.
#[derive(Debug, Clone)]
pub struct BatchContrastive<T> {
    pub value: T,
    /// Anchor images that shared at least one class with their partner.
    pub contributing: usize,
    /// Partner index chosen for every anchor image (`None` in pooled mode).
    pub partners: Vec<Option<usize>>,
    pub grad: Option<Tensor<T>>,
}

/// Mean pair loss over the anchor images of a batch.
///
/// `z` is N×D×H×W; `labels` holds the N label (or pseudo-label) maps back to back. The
/// RNG is consumed per anchor image in batch order: in inter mode the partner index is
/// drawn first, then the anchors of classes 1..=C in ascending order.
pub fn contrastive_batch_loss<T: Real, R: Rng + ?Sized>(
    z: &Tensor<T>,
    labels: &[u8],
    num_classes: usize,
    cfg: &ContrastiveConfig,
    rng: &mut R,
    with_grad: bool,
) -> Result<BatchContrastive<T>> {
    contrastive_batch_loss_eps(z, labels, num_classes, cfg, rng, with_grad, T::zero())
}

/// As [`contrastive_batch_loss`], with `eps` added to every norm inside the similarity.
pub fn contrastive_batch_loss_eps<T: Real, R: Rng + ?Sized>(
    z: &Tensor<T>,
    labels: &[u8],
    num_classes: usize,
    cfg: &ContrastiveConfig,
    rng: &mut R,
    with_grad: bool,
    eps: T,
) -> Result<BatchContrastive<T>> {
    let n = z.n;
    let hw = z.plane();
    if n == 0 {
        return Err(Error::invalid("z", "empty batch"));
    }
    if labels.len() != n * hw {
        return Err(Error::DimMismatch(format!(
            "{} labels for representations of shape {:?}",
            labels.len(),
            z.shape()
        )));
    }
    let maps: Vec<FeatureMap<'_, T>> = (0..n).map(|i| FeatureMap::from_tensor(z, i)).collect();
    let lab: Vec<&[u8]> = labels.chunks_exact(hw).collect();
    let per_image: Vec<ClassMeanSet<T>> = match cfg.mode {
        MatchMode::Pooled => Vec::new(),
        _ => maps
            .iter()
            .zip(&lab)
            .map(|(m, l)| class_means(m, l, num_classes))
            .collect::<Result<_>>()?,
    };
    let pooled = match cfg.mode {
        MatchMode::Pooled => Some(pooled_class_means(&maps, &lab, num_classes)?),
        _ => None,
    };

    // First pass: pairings and anchors, in the documented RNG order.
    let mut plan = Vec::with_capacity(n);
    for i in 0..n {
        let partner = match cfg.mode {
            MatchMode::Intra => Some(i),
            MatchMode::Inter => Some(rng.random_range(0..n)),
            MatchMode::Pooled => None,
        };
        let anchors = sample_anchor_set(lab[i], z.w, num_classes, cfg.samples_per_class, rng);
        plan.push((partner, anchors));
    }

    let mut losses = Vec::with_capacity(n);
    for (i, (partner, anchors)) in plan.iter().enumerate() {
        let means = match partner {
            Some(j) => &per_image[*j],
            None => pooled.as_ref().expect("pooled means"),
        };
        let loss = if eps == T::zero() {
            contrastive_pair_loss(&maps[i], anchors, means, cfg.temperature)?
        } else {
            contrastive_pair_loss_grad(&maps[i], anchors, means, cfg.temperature, T::one(), eps)?.loss
        };
        losses.push(loss);
    }
    let contributing = losses.iter().filter(|l| l.has_shared_classes()).count();
    let value = if contributing == 0 {
        T::zero()
    } else {
        losses
            .iter()
            .filter(|l| l.has_shared_classes())
            .map(|l| l.value)
            .sum::<T>()
            / T::from_usize(contributing).expect("count")
    };
    let partners = plan.iter().map(|(p, _)| *p).collect();

    let grad = if with_grad {
        let mut g = Tensor::zeros(z.n, z.c, z.h, z.w);
        if contributing > 0 {
            let weight = T::one() / T::from_usize(contributing).expect("count");
            let mut pooled_mean_grads: Vec<Option<Vec<T>>> = vec![None; num_classes + 1];
            for (i, (partner, anchors)) in plan.iter().enumerate() {
                if !losses[i].has_shared_classes() {
                    continue;
                }
                let means = match partner {
                    Some(j) => &per_image[*j],
                    None => pooled.as_ref().expect("pooled means"),
                };
                let pg = contrastive_pair_loss_grad(&maps[i], anchors, means, cfg.temperature, weight, eps)?;
                let item = g.item_mut(i);
                for ((r, col), gz) in &pg.anchors {
                    let p = r * z.w + col;
                    for d in 0..z.c {
                        item[d * hw + p] += gz[d];
                    }
                }
                match partner {
                    Some(j) => class_means_backward(&pg.means, &means.counts, lab[*j], g.item_mut(*j), z.c),
                    None => {
                        for (acc, m) in pooled_mean_grads.iter_mut().zip(pg.means) {
                            if let Some(m) = m {
                                let a = acc.get_or_insert_with(|| vec![T::zero(); z.c]);
                                for (x, y) in a.iter_mut().zip(&m) {
                                    *x += *y;
                                }
                            }
                        }
                    }
                }
            }
            if let Some(p) = &pooled {
                for i in 0..n {
                    class_means_backward(&pooled_mean_grads, &p.counts, lab[i], g.item_mut(i), z.c);
                }
            }
        }
        Some(g)
    } else {
        None
    };
    Ok(BatchContrastive {
        value,
        contributing,
        partners,
        grad,
    })
}
