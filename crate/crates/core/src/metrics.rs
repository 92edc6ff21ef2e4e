//! Overlap and surface-distance metrics per tumor region.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::data_model::{labels_to_regions, Grid3, LabelVolume, REGION_NAMES};
use crate::error::{Error, Result};
use crate::nifti;

/// HD95 reported when exactly one of the two masks is empty.
pub const HD95_EMPTY_SENTINEL: f64 = 373.13;

fn check_shapes(a: &Grid3<u8>, b: &Grid3<u8>) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("mask shapes differ: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// `2|P∩G| / (|P| + |G|)`, 1 when both are empty.
pub fn dice_score(pred: &Grid3<u8>, gt: &Grid3<u8>) -> Result<f64> {
    check_shapes(pred, gt)?;
    let (mut inter, mut np, mut ng) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (p, g) = (p != 0, g != 0);
        inter += usize::from(p && g);
        np += usize::from(p);
        ng += usize::from(g);
    }
    if np + ng == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (np + ng) as f64)
}

/// (TP/(TP+FN), TN/(TN+FP)). An empty ground truth gives sensitivity 1 when
/// the prediction is also empty and 0 otherwise; a ground truth without
/// negatives gives specificity 1.
pub fn sensitivity_specificity(pred: &Grid3<u8>, gt: &Grid3<u8>) -> Result<(f64, f64)> {
    check_shapes(pred, gt)?;
    let (mut tp, mut fp, mut tn, mut fneg) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p != 0, g != 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fneg += 1,
        }
    }
    let sens = if tp + fneg == 0 {
        if tp + fp == 0 { 1.0 } else { 0.0 }
    } else {
        tp as f64 / (tp + fneg) as f64
    };
    let spec = if tn + fp == 0 { 1.0 } else { tn as f64 / (tn + fp) as f64 };
    Ok((sens, spec))
}

/// Foreground voxels with at least one 6-neighbour outside the mask; the
/// volume border counts as outside.
pub fn surface_voxels(mask: &Grid3<u8>) -> Vec<[usize; 3]> {
    let d = mask.dims();
    let mut out = Vec::new();
    for i in 0..d[0] {
        for j in 0..d[1] {
            for k in 0..d[2] {
                let idx = [i, j, k];
                if mask.get(idx) == 0 {
                    continue;
                }
                let boundary = (0..3).any(|a| {
                    let mut lo = idx;
                    let mut hi = idx;
                    let lo_out = idx[a] == 0 || {
                        lo[a] -= 1;
                        mask.get(lo) == 0
                    };
                    let hi_out = idx[a] + 1 == d[a] || {
                        hi[a] += 1;
                        mask.get(hi) == 0
                    };
                    lo_out || hi_out
                });
                if boundary {
                    out.push(idx);
                }
            }
        }
    }
    out
}

/// Exact 1-D lower envelope pass: `out[q] = min_p (w·(q − p))² + f[p]`.
fn edt_pass(f: &[f64], w: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    let sq = |x: f64| x * x;
    let finite: Vec<usize> = (0..n).filter(|&p| f[p].is_finite()).collect();
    if finite.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    // Intersection abscissa of parabolas rooted at p and q (p < q).
    let meet = |p: usize, q: usize| {
        let (pp, qq) = (p as f64 * w, q as f64 * w);
        ((f[q] + qq * qq) - (f[p] + pp * pp)) / (2.0 * (qq - pp))
    };
    for &q in &finite {
        while let Some(&last) = v.last() {
            if v.len() > 1 && meet(last, q) <= z[z.len() - 1] {
                v.pop();
                z.pop();
            } else {
                break;
            }
        }
        if let Some(&last) = v.last() {
            z.push(meet(last, q));
        }
        v.push(q);
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let x = q as f64 * w;
        while k < z.len() && z[k] < x {
            k += 1;
        }
        // Guard against rounding in the envelope breakpoints.
        let lo = k.saturating_sub(1);
        let hi = (k + 1).min(v.len() - 1);
        *o = (lo..=hi).map(|c| sq((q as f64 - v[c] as f64) * w) + f[v[c]]).fold(f64::INFINITY, f64::min);
    }
}

/// Squared Euclidean distance (mm²) from every voxel of `dims` to the
/// nearest seed. Per voxel the value is `dx² + (dy² + dz²)` of the nearest
/// seed, bit-identical to a direct evaluation in that order.
pub fn squared_edt(dims: [usize; 3], seeds: &[[usize; 3]], spacing: [f64; 3]) -> Vec<f64> {
    let n: usize = dims.iter().product();
    let mut g = vec![f64::INFINITY; n];
    let off = |i: usize, j: usize, k: usize| (i * dims[1] + j) * dims[2] + k;
    for s in seeds {
        g[off(s[0], s[1], s[2])] = 0.0;
    }
    let (mut v, mut z) = (Vec::new(), Vec::new());
    let mut line = Vec::new();
    let mut out = Vec::new();
    // passes along z, then y, then x
    for axis in [2usize, 1, 0] {
        let len = dims[axis];
        line.resize(len, 0.0);
        out.resize(len, 0.0);
        let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
        for a in 0..dims[others[0]] {
            for b in 0..dims[others[1]] {
                let index = |t: usize| {
                    let mut idx = [0; 3];
                    idx[axis] = t;
                    idx[others[0]] = a;
                    idx[others[1]] = b;
                    off(idx[0], idx[1], idx[2])
                };
                for t in 0..len {
                    line[t] = g[index(t)];
                }
                edt_pass(&line, spacing[axis], &mut out, &mut v, &mut z);
                for t in 0..len {
                    g[index(t)] = out[t];
                }
            }
        }
    }
    g
}

/// Percentile with linear interpolation between closest ranks (numpy's
/// default method, bit for bit).
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of nothing");
    values.sort_by(f64::total_cmp);
    let h = q / 100.0 * (values.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(values.len() - 1);
    let (a, b, t) = (values[lo], values[hi], h - lo as f64);
    // same rounding as numpy's lerp
    if t >= 0.5 {
        b - (b - a) * (1.0 - t)
    } else {
        a + (b - a) * t
    }
}

/// 95th percentile of the pooled directed distances between the surface
/// voxels of `pred` and `gt`, in millimetres.
pub fn hd95(pred: &Grid3<u8>, gt: &Grid3<u8>, spacing: [f64; 3]) -> Result<f64> {
    check_shapes(pred, gt)?;
    let (sp, sg) = (surface_voxels(pred), surface_voxels(gt));
    match (sp.is_empty(), sg.is_empty()) {
        (true, true) => return Ok(0.0),
        (true, false) | (false, true) => return Ok(HD95_EMPTY_SENTINEL),
        _ => {}
    }
    // Both point sets lie in their joint bounding box, so distances can be
    // computed inside it.
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    for p in sp.iter().chain(&sg) {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let dims: [usize; 3] = std::array::from_fn(|a| hi[a] - lo[a] + 1);
    let local = |pts: &[[usize; 3]]| -> Vec<[usize; 3]> { pts.iter().map(|p| std::array::from_fn(|a| p[a] - lo[a])).collect() };
    let (lp, lg) = (local(&sp), local(&sg));
    let off = |p: &[usize; 3]| (p[0] * dims[1] + p[1]) * dims[2] + p[2];
    let to_gt = squared_edt(dims, &lg, spacing);
    let to_pred = squared_edt(dims, &lp, spacing);
    let mut d: Vec<f64> = lp.iter().map(|p| to_gt[off(p)].sqrt()).chain(lg.iter().map(|p| to_pred[off(p)].sqrt())).collect();
    Ok(percentile(&mut d, 95.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CaseMetrics {
    /// Indexed (WT, TC, ET).
    pub dice: [f64; 3],
    pub hd95: [f64; 3],
    pub sensitivity: [f64; 3],
    pub specificity: [f64; 3],
}

pub fn evaluate_case(pred: &LabelVolume, gt: &LabelVolume, spacing: [f64; 3]) -> Result<CaseMetrics> {
    if pred.dims() != gt.dims() {
        return Err(Error::shape(format!("prediction {:?} vs ground truth {:?}", pred.dims(), gt.dims())));
    }
    let (p, g) = (labels_to_regions(pred), labels_to_regions(gt));
    let mut m = CaseMetrics { dice: [0.0; 3], hd95: [0.0; 3], sensitivity: [0.0; 3], specificity: [0.0; 3] };
    for r in 0..3 {
        m.dice[r] = dice_score(p.channel(r), g.channel(r))?;
        m.hd95[r] = hd95(p.channel(r), g.channel(r), spacing)?;
        (m.sensitivity[r], m.specificity[r]) = sensitivity_specificity(p.channel(r), g.channel(r))?;
    }
    Ok(m)
}

#[derive(Clone, Debug)]
pub struct DatasetEvaluation {
    pub cases: Vec<(String, CaseMetrics)>,
    /// Case ids without a matching prediction or ground truth.
    pub skipped: Vec<String>,
}

impl DatasetEvaluation {
    pub fn mean(&self) -> Option<CaseMetrics> {
        if self.cases.is_empty() {
            return None;
        }
        let n = self.cases.len() as f64;
        let avg = |f: &dyn Fn(&CaseMetrics) -> [f64; 3]| -> [f64; 3] {
            std::array::from_fn(|r| self.cases.iter().map(|(_, m)| f(m)[r]).sum::<f64>() / n)
        };
        Some(CaseMetrics {
            dice: avg(&|m| m.dice),
            hd95: avg(&|m| m.hd95),
            sensitivity: avg(&|m| m.sensitivity),
            specificity: avg(&|m| m.specificity),
        })
    }

    pub fn is_complete(&self) -> bool {
        self.skipped.is_empty()
    }

    /// Summary table: `Method,Dice ET,Dice WT,Dice TC,HD95 ET,HD95 WT,HD95 TC`
    /// with one row per case and a final `Mean` row.
    pub fn write_summary_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        let order = [2usize, 0, 1];
        let mut header = vec!["Method".to_string()];
        header.extend(order.iter().map(|&r| format!("Dice {}", REGION_NAMES[r])));
        header.extend(order.iter().map(|&r| format!("HD95 {}", REGION_NAMES[r])));
        w.write_record(&header).map_err(|e| csv_error(path, e))?;
        let mean = self.mean();
        let rows = self.cases.iter().map(|(id, m)| (id.as_str(), m)).chain(mean.as_ref().map(|m| ("Mean", m)));
        for (name, m) in rows {
            let mut rec = vec![name.to_string()];
            rec.extend(order.iter().map(|&r| format!("{:.5}", m.dice[r])));
            rec.extend(order.iter().map(|&r| format!("{:.5}", m.hd95[r])));
            w.write_record(&rec).map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(Error::io(path))
    }

    /// All metrics, one row per case and region.
    pub fn write_full_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        w.write_record(["case", "region", "dice", "hd95", "sensitivity", "specificity"]).map_err(|e| csv_error(path, e))?;
        for (id, m) in &self.cases {
            for r in 0..3 {
                w.write_record([
                    id.clone(),
                    REGION_NAMES[r].to_string(),
                    format!("{:.6}", m.dice[r]),
                    format!("{:.6}", m.hd95[r]),
                    format!("{:.6}", m.sensitivity[r]),
                    format!("{:.6}", m.specificity[r]),
                ])
                .map_err(|e| csv_error(path, e))?;
            }
        }
        w.flush().map_err(Error::io(path))
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::InvalidData(format!("{}: {e}", path.display()))
}

fn first_existing(candidates: &[PathBuf]) -> Option<PathBuf> {
    candidates.iter().find_map(|c| nifti::resolve(c))
}

/// Ground-truth label file for `id` below `gt_dir`, accepting
/// `{id}/{id}_seg.nii.gz`, `{id}_seg.nii.gz` and `{id}.nii.gz`.
pub fn find_ground_truth(gt_dir: &Path, id: &str) -> Option<PathBuf> {
    first_existing(&[
        gt_dir.join(id).join(format!("{id}_seg.nii.gz")),
        gt_dir.join(format!("{id}_seg.nii.gz")),
        gt_dir.join(format!("{id}.nii.gz")),
    ])
}

fn case_id(path: &Path) -> Option<String> {
    let name = path.file_name()?.to_str()?;
    let stem = name.strip_suffix(".nii.gz").or_else(|| name.strip_suffix(".nii"))?;
    Some(stem.strip_suffix("_seg").unwrap_or(stem).to_string())
}

fn list_ids(dir: &Path, nested: bool) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(Error::io(dir))? {
        let path = entry.map_err(Error::io(dir))?.path();
        if path.is_dir() {
            if nested {
                if let Some(id) = path.file_name().and_then(|n| n.to_str()) {
                    ids.push(id.to_string());
                }
            }
        } else if let Some(id) = case_id(&path) {
            ids.push(id);
        }
    }
    ids.sort();
    ids.dedup();
    Ok(ids)
}

/// Compare `{id}.nii.gz` label maps in `pred_dir` with the ground truth.
pub fn evaluate_dataset(pred_dir: impl AsRef<Path>, gt_dir: impl AsRef<Path>) -> Result<DatasetEvaluation> {
    let (pred_dir, gt_dir) = (pred_dir.as_ref(), gt_dir.as_ref());
    for d in [pred_dir, gt_dir] {
        if !d.is_dir() {
            return Err(Error::config(d.display().to_string(), "directory does not exist"));
        }
    }
    let mut ids = list_ids(gt_dir, true)?;
    ids.extend(list_ids(pred_dir, false)?);
    ids.sort();
    ids.dedup();
    let mut cases = Vec::new();
    let mut skipped = Vec::new();
    for id in ids {
        let pred_path = first_existing(&[pred_dir.join(format!("{id}.nii.gz"))]);
        let (Some(pred_path), Some(gt_path)) = (pred_path, find_ground_truth(gt_dir, &id)) else {
            skipped.push(id);
            continue;
        };
        let gt_img = nifti::read(&gt_path)?;
        let pred_img = nifti::read(&pred_path)?;
        let dims = gt_img.dims3().ok_or_else(|| Error::GeometryMismatch(format!("{id}: ground truth is not 3-D")))?;
        let pdims = pred_img.dims3().ok_or_else(|| Error::GeometryMismatch(format!("{id}: prediction is not 3-D")))?;
        let gt = LabelVolume::from_values(dims, &gt_img.data)?;
        let pred = LabelVolume::from_values(pdims, &pred_img.data)?;
        cases.push((id, evaluate_case(&pred, &gt, gt_img.header.spacing())?));
    }
    Ok(DatasetEvaluation { cases, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(dims: [usize; 3], on: &[[usize; 3]]) -> Grid3<u8> {
        let mut g = Grid3::filled(dims, 0);
        for &p in on {
            g.set(p, 1);
        }
        g
    }

    #[test]
    fn dice_examples() {
        let a = mask([1, 1, 6], &[[0, 0, 0], [0, 0, 1], [0, 0, 2], [0, 0, 3]]);
        let b = mask([1, 1, 6], &[[0, 0, 2], [0, 0, 3], [0, 0, 4], [0, 0, 5]]);
        assert_eq!(dice_score(&a, &b).unwrap(), 0.5);
        assert_eq!(dice_score(&a, &a).unwrap(), 1.0);
        let e = mask([1, 1, 6], &[]);
        assert_eq!(dice_score(&e, &e).unwrap(), 1.0);
    }

    #[test]
    fn sensitivity_specificity_example() {
        // TP=3, FN=1, FP=2, TN=10
        let mut p = Grid3::filled([1, 1, 16], 0u8);
        let mut g = Grid3::filled([1, 1, 16], 0u8);
        for k in 0..3 {
            p.set([0, 0, k], 1);
            g.set([0, 0, k], 1);
        }
        g.set([0, 0, 3], 1);
        p.set([0, 0, 4], 1);
        p.set([0, 0, 5], 1);
        let (s, sp) = sensitivity_specificity(&p, &g).unwrap();
        assert_eq!(s, 0.75);
        assert!((sp - 10.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn hd95_single_voxels_and_sentinels() {
        let a = mask([8, 8, 8], &[[1, 2, 3]]);
        let b = mask([8, 8, 8], &[[4, 2, 3]]);
        assert_eq!(hd95(&a, &b, [1.0; 3]).unwrap(), 3.0);
        assert_eq!(hd95(&a, &b, [2.0, 1.0, 1.0]).unwrap(), 6.0);
        let e = mask([8, 8, 8], &[]);
        assert_eq!(hd95(&e, &b, [1.0; 3]).unwrap(), HD95_EMPTY_SENTINEL);
        assert_eq!(hd95(&e, &e, [1.0; 3]).unwrap(), 0.0);
        assert_eq!(hd95(&a, &a, [1.0; 3]).unwrap(), 0.0);
    }

    #[test]
    fn percentile_matches_linear_interpolation() {
        let mut v: Vec<f64> = (1..=10).map(f64::from).collect();
        assert!((percentile(&mut v, 95.0) - 9.55).abs() < 1e-12);
    }

    #[test]
    fn hd95_is_symmetric_and_scales_with_spacing() {
        let a = Grid3::from_fn([10, 9, 8], |[i, j, k]| u8::from((i + 2 * j + k) % 7 < 2 && i > 1));
        let b = Grid3::from_fn([10, 9, 8], |[i, j, k]| u8::from(i * j % 5 == 1 || k == 3));
        let sp = [1.0, 0.7, 2.5];
        let base = hd95(&a, &b, sp).unwrap();
        assert_eq!(base, hd95(&b, &a, sp).unwrap());
        let scaled = hd95(&a, &b, sp.map(|x| 3.0 * x)).unwrap();
        assert!((scaled - 3.0 * base).abs() < 1e-12 * scaled, "{scaled} vs {base}");
        assert_eq!(dice_score(&a, &b).unwrap(), dice_score(&b, &a).unwrap());
    }
}
