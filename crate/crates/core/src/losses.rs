//! Dice, focal and binary cross-entropy losses over region probabilities.
//!
//! The scalar kernels work on `f64` slices and come with analytic
//! gradients; [`total_loss`] wires them into a [`Graph`].

use segcls_tensor::{Graph, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub epsilon: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { epsilon: 1e-5, focal_gamma: 2.0, focal_alpha: 0.25 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::config("loss.epsilon", "must be positive"));
        }
        if !(self.focal_gamma >= 0.0) {
            return Err(Error::config("loss.focal_gamma", "must be non-negative"));
        }
        if !(self.focal_alpha > 0.0 && self.focal_alpha <= 1.0) {
            return Err(Error::config("loss.focal_alpha", "must lie in (0, 1]"));
        }
        Ok(())
    }
}

fn same_len(p: &[f64], g: &[f64]) -> Result<()> {
    if p.len() != g.len() {
        return Err(Error::shape(format!("prediction has {} values, target {}", p.len(), g.len())));
    }
    Ok(())
}

fn clamp(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// `1 - 2Σpg / (Σp² + Σg² + ε)`.
pub fn dice_loss(p: &[f64], g: &[f64], eps: f64) -> Result<f64> {
    same_len(p, g)?;
    let (s, q) = dice_sums(p, g, eps);
    Ok(1.0 - 2.0 * s / q)
}

fn dice_sums(p: &[f64], g: &[f64], eps: f64) -> (f64, f64) {
    let s: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
    let q: f64 = p.iter().map(|a| a * a).sum::<f64>() + g.iter().map(|b| b * b).sum::<f64>() + eps;
    (s, q)
}

/// Gradient of [`dice_loss`] with respect to `p`.
pub fn dice_loss_grad(p: &[f64], g: &[f64], eps: f64) -> Result<Vec<f64>> {
    same_len(p, g)?;
    let (s, q) = dice_sums(p, g, eps);
    Ok(p.iter().zip(g).map(|(&pi, &gi)| (4.0 * s * pi - 2.0 * gi * q) / (q * q)).collect())
}

fn focal_term(p: f64, y: f64, gamma: f64, alpha: f64) -> (f64, f64) {
    let pc = clamp(p);
    let inside = pc == p;
    let (pt, dpt, at) = if y >= 0.5 { (pc, 1.0, alpha) } else { (1.0 - pc, -1.0, 1.0 - alpha) };
    let m = 1.0 - pt;
    let mod_g = if gamma == 0.0 { 1.0 } else { m.powf(gamma) };
    let loss = -at * mod_g * pt.ln();
    let dmod = if gamma == 0.0 { 0.0 } else { -gamma * m.powf(gamma - 1.0) };
    let dl_dpt = -at * (dmod * pt.ln() + mod_g / pt);
    (loss, if inside { dl_dpt * dpt } else { 0.0 })
}

/// Mean of `-α_t (1 - p_t)^γ log p_t`, with probabilities clamped to
/// `[1e-7, 1 - 1e-7]`.
pub fn focal_loss(p: &[f64], y: &[f64], gamma: f64, alpha: f64) -> Result<f64> {
    same_len(p, y)?;
    let n = p.len().max(1) as f64;
    Ok(p.iter().zip(y).map(|(&a, &b)| focal_term(a, b, gamma, alpha).0).sum::<f64>() / n)
}

pub fn focal_loss_grad(p: &[f64], y: &[f64], gamma: f64, alpha: f64) -> Result<Vec<f64>> {
    same_len(p, y)?;
    let n = p.len().max(1) as f64;
    Ok(p.iter().zip(y).map(|(&a, &b)| focal_term(a, b, gamma, alpha).1 / n).collect())
}

fn bce_term(p: f64, y: f64) -> (f64, f64) {
    let pc = clamp(p);
    let loss = -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln());
    let grad = if pc == p { -y / pc + (1.0 - y) / (1.0 - pc) } else { 0.0 };
    (loss, grad)
}

/// Mean binary cross-entropy with the same clamping as [`focal_loss`].
pub fn bce_loss(p: &[f64], y: &[f64]) -> Result<f64> {
    same_len(p, y)?;
    let n = p.len().max(1) as f64;
    Ok(p.iter().zip(y).map(|(&a, &b)| bce_term(a, b).0).sum::<f64>() / n)
}

pub fn bce_loss_grad(p: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    same_len(p, y)?;
    let n = p.len().max(1) as f64;
    Ok(p.iter().zip(y).map(|(&a, &b)| bce_term(a, b).1 / n).collect())
}

/// Split a `[n, regions, ...]` buffer into per-region value lists.
fn per_region(values: &[f64], shape: &[usize]) -> Vec<Vec<f64>> {
    let (n, r) = (shape[0], shape[1]);
    let inner: usize = shape[2..].iter().product();
    (0..r)
        .map(|ch| (0..n).flat_map(|s| values[(s * r + ch) * inner..(s * r + ch + 1) * inner].iter().copied()).collect())
        .collect()
}

fn scatter_region(grad: &mut [f64], shape: &[usize], ch: usize, g: &[f64]) {
    let (n, r) = (shape[0], shape[1]);
    let inner: usize = shape[2..].iter().product();
    for s in 0..n {
        grad[(s * r + ch) * inner..(s * r + ch + 1) * inner].copy_from_slice(&g[s * inner..(s + 1) * inner]);
    }
}

/// Dice averaged over region channels of `p [n, regions, ...]`; each region
/// pools all samples of the batch.
pub fn region_dice_loss(p: &[f64], g: &[f64], shape: &[usize], eps: f64) -> Result<(f64, Vec<f64>)> {
    same_len(p, g)?;
    if shape.len() < 2 || shape.iter().product::<usize>() != p.len() {
        return Err(Error::shape(format!("shape {shape:?} does not match {} values", p.len())));
    }
    let (pr, gr) = (per_region(p, shape), per_region(g, shape));
    let r = shape[1] as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; p.len()];
    for ch in 0..shape[1] {
        loss += dice_loss(&pr[ch], &gr[ch], eps)? / r;
        let gch: Vec<f64> = dice_loss_grad(&pr[ch], &gr[ch], eps)?.into_iter().map(|v| v / r).collect();
        scatter_region(&mut grad, shape, ch, &gch);
    }
    Ok((loss, grad))
}

/// Record a scalar loss of `p` with a precomputed gradient.
fn emit_loss<T: Scalar>(graph: &Graph<T>, p: Var, loss: f64, grad: Vec<f64>) -> Var {
    let shape = graph.shape(p);
    graph.emit(Tensor::scalar(T::of(loss)), &[p], move |_| {
        move |g: &Tensor<T>| {
            let s = g.item();
            vec![Some(Tensor::new(&shape, grad.iter().map(|&v| T::of(v) * s).collect()))]
        }
    })
}

fn values<T: Scalar>(graph: &Graph<T>, v: Var) -> Vec<f64> {
    graph.value(v).data().iter().map(|x| x.f64()).collect()
}

pub fn dice_var<T: Scalar>(graph: &Graph<T>, p: Var, target: &[f64], eps: f64) -> Result<Var> {
    let (loss, grad) = region_dice_loss(&values(graph, p), target, &graph.shape(p), eps)?;
    Ok(emit_loss(graph, p, loss, grad))
}

pub fn focal_var<T: Scalar>(graph: &Graph<T>, p: Var, target: &[f64], cfg: &LossConfig) -> Result<Var> {
    let pv = values(graph, p);
    let loss = focal_loss(&pv, target, cfg.focal_gamma, cfg.focal_alpha)?;
    let grad = focal_loss_grad(&pv, target, cfg.focal_gamma, cfg.focal_alpha)?;
    Ok(emit_loss(graph, p, loss, grad))
}

pub fn bce_var<T: Scalar>(graph: &Graph<T>, p: Var, target: &[f64]) -> Result<Var> {
    let pv = values(graph, p);
    let (loss, grad) = (bce_loss(&pv, target)?, bce_loss_grad(&pv, target)?);
    Ok(emit_loss(graph, p, loss, grad))
}

/// Per-component values of the total loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub focal_seg: f64,
    pub dice: f64,
    pub focal_cls: f64,
    pub bce: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn from_components(focal_seg: f64, dice: f64, focal_cls: f64, bce: f64) -> Self {
        Self { focal_seg, dice, focal_cls, bce, total: focal_seg + dice + focal_cls + bce }
    }
}

/// Slice targets `[n, regions, z]` from region targets `[n, regions, x, y, z]`:
/// 1 where any voxel of the region lies on the axial slice.
pub fn slice_targets(region_gt: &[f64], shape: &[usize]) -> Result<Vec<f64>> {
    if shape.len() != 5 || shape.iter().product::<usize>() != region_gt.len() {
        return Err(Error::shape(format!("region targets must be [n, r, x, y, z], got {shape:?}")));
    }
    let (nr, plane, z) = (shape[0] * shape[1], shape[2] * shape[3], shape[4]);
    let mut out = vec![0.0; nr * z];
    for c in 0..nr {
        for v in 0..plane {
            for k in 0..z {
                if region_gt[(c * plane + v) * z + k] > 0.5 {
                    out[c * z + k] = 1.0;
                }
            }
        }
    }
    Ok(out)
}

/// `focal(seg) + dice(seg) + focal(cls) + bce(cls)` on logits.
pub fn total_loss<T: Scalar>(
    graph: &Graph<T>,
    seg_logits: Var,
    slice_logits: Var,
    region_gt: &[f64],
    slice_gt: &[f64],
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    let seg_p = graph.sigmoid(seg_logits);
    let cls_p = graph.sigmoid(slice_logits);
    let focal_seg = focal_var(graph, seg_p, region_gt, cfg)?;
    let dice = dice_var(graph, seg_p, region_gt, cfg.epsilon)?;
    let focal_cls = focal_var(graph, cls_p, slice_gt, cfg)?;
    let bce = bce_var(graph, cls_p, slice_gt)?;
    let item = |v: Var| graph.value(v).item().f64();
    let breakdown = LossBreakdown::from_components(item(focal_seg), item(dice), item(focal_cls), item(bce));
    let total = graph.add_all(&[focal_seg, dice, focal_cls, bce]);
    Ok((total, breakdown))
}
