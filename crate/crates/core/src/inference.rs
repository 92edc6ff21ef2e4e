//! Full-volume prediction with flip TTA, model ensembling, thresholding and
//! slice-classification gating.

use std::collections::VecDeque;
use std::path::PathBuf;

use segcls_tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::data_model::{regions_to_labels, Grid3, LabelVolume, MultimodalVolume, RegionMask};
use crate::error::{Error, Result};
use crate::networks::Network;
use crate::preprocess::{pad_to_multiple, PreparedCase};

/// Anything that maps `[1, 4, x, y, z]` to segmentation logits
/// `[1, 3, x, y, z]` and slice logits `[1, 3, z]`.
pub trait Predictor {
    fn predict(&self, x: &Tensor<f32>) -> Result<(Tensor<f64>, Tensor<f64>)>;

    /// Spatial extents must be multiples of this.
    fn required_multiple(&self) -> usize {
        1
    }
}

impl<T: Scalar> Predictor for Network<T> {
    fn predict(&self, x: &Tensor<f32>) -> Result<(Tensor<f64>, Tensor<f64>)> {
        let (seg, slice) = self.infer(x.cast())?;
        Ok((seg.cast(), slice.cast()))
    }

    fn required_multiple(&self) -> usize {
        self.config().required_multiple()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AverageSpace {
    /// Average raw outputs, then apply the sigmoid.
    #[default]
    Logits,
    /// Average probabilities.
    Probs,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", deny_unknown_fields)]
pub enum Tiling {
    /// Whole cropped volume padded to the required multiple.
    #[default]
    Full,
    /// Windows with 50% overlap, uniformly averaged.
    SlidingWindow { window: [usize; 3] },
}

/// All 8 subsets of the three spatial axes, identity first.
pub fn all_flips() -> Vec<[bool; 3]> {
    (0..8u8).map(|m| [m & 1 != 0, m & 2 != 0, m & 4 != 0]).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    /// Axis subsets (x, y, z) to flip; must contain the identity.
    pub tta_flips: Vec<[bool; 3]>,
    pub threshold: f64,
    pub gate_enabled: bool,
    pub average: AverageSpace,
    pub tiling: Tiling,
    /// Ensemble members.
    pub checkpoints: Vec<PathBuf>,
    pub write_probabilities: bool,
    /// Optional baseline: drop connected components smaller than this many
    /// voxels per region, after gating.
    pub min_component_voxels: Option<usize>,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            tta_flips: all_flips(),
            threshold: 0.5,
            gate_enabled: true,
            average: AverageSpace::Logits,
            tiling: Tiling::Full,
            checkpoints: Vec::new(),
            write_probabilities: false,
            min_component_voxels: None,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::config("inference.threshold", format!("{} is outside (0, 1)", self.threshold)));
        }
        if !self.tta_flips.contains(&[false; 3]) {
            return Err(Error::config("inference.tta_flips", "the identity [false, false, false] must be included"));
        }
        if let Tiling::SlidingWindow { window } = self.tiling {
            if window.contains(&0) {
                return Err(Error::config("inference.tiling.window", "components must be positive"));
            }
        }
        Ok(())
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn flip_axes(flip: [bool; 3], offset: usize) -> Vec<usize> {
    (0..3).filter(|&a| flip[a]).map(|a| a + offset).collect()
}

/// Averaged segmentation logits `[3, x, y, z]` and slice logits `[3, z]`
/// over every (model, flip) pair of `x [1, 4, x, y, z]`. With
/// [`AverageSpace::Probs`] the mean probability is returned as a logit.
pub fn tta_ensemble_logits(
    models: &[&dyn Predictor],
    x: &Tensor<f32>,
    flips: &[[bool; 3]],
    space: AverageSpace,
) -> Result<(Tensor<f64>, Tensor<f64>)> {
    if models.is_empty() {
        return Err(Error::config("inference.checkpoints", "at least one model is required"));
    }
    if flips.is_empty() {
        return Err(Error::config("inference.tta_flips", "at least one flip combination is required"));
    }
    let shape = x.shape();
    if shape.len() != 5 || shape[0] != 1 {
        return Err(Error::shape(format!("expected input [1, c, x, y, z], got {shape:?}")));
    }
    let mut seg_acc: Option<Tensor<f64>> = None;
    let mut slice_acc: Option<Tensor<f64>> = None;
    let to_space = |t: Tensor<f64>| match space {
        AverageSpace::Logits => t,
        AverageSpace::Probs => t.map(sigmoid),
    };
    for model in models {
        for &flip in flips {
            let xf = x.flip(&flip_axes(flip, 2));
            let (seg, slice) = model.predict(&xf)?;
            let seg = to_space(seg.flip(&flip_axes(flip, 2)));
            let slice = to_space(if flip[2] { slice.flip(&[2]) } else { slice });
            match (&mut seg_acc, &mut slice_acc) {
                (Some(a), Some(b)) => {
                    a.add_assign(&seg);
                    b.add_assign(&slice);
                }
                _ => {
                    seg_acc = Some(seg);
                    slice_acc = Some(slice);
                }
            }
        }
    }
    let n = (models.len() * flips.len()) as f64;
    let finish = |t: Tensor<f64>| {
        let mean = t.map(|v| v / n);
        let mean = match space {
            AverageSpace::Logits => mean,
            AverageSpace::Probs => mean.map(logit),
        };
        let s = mean.shape()[1..].to_vec();
        mean.reshape(&s)
    };
    Ok((finish(seg_acc.expect("nonempty")), finish(slice_acc.expect("nonempty"))))
}

/// Per region, the axial slices the classifier calls positive.
pub fn slice_decisions(slice_logits: &Tensor<f64>, threshold: f64) -> Result<[Vec<bool>; 3]> {
    let s = slice_logits.shape();
    if s.len() != 2 || s[0] != 3 {
        return Err(Error::shape(format!("slice logits must be [3, z], got {s:?}")));
    }
    let z = s[1];
    Ok(std::array::from_fn(|r| slice_logits.data()[r * z..(r + 1) * z].iter().map(|&l| sigmoid(l) >= threshold).collect()))
}

/// Sigmoid, binarize at `threshold`, and when `gate` is set clear every
/// region voxel on slices the classifier calls negative. The axial axis is
/// the last one.
pub fn threshold_and_gate(seg_logits: &Tensor<f64>, slice_logits: &Tensor<f64>, threshold: f64, gate: bool) -> Result<RegionMask> {
    let s = seg_logits.shape();
    if s.len() != 4 || s[0] != 3 {
        return Err(Error::shape(format!("segmentation logits must be [3, x, y, z], got {s:?}")));
    }
    let dims = [s[1], s[2], s[3]];
    let keep = slice_decisions(slice_logits, threshold)?;
    if keep[0].len() != dims[2] {
        return Err(Error::shape(format!("{} slice logits for {} axial slices", keep[0].len(), dims[2])));
    }
    let n: usize = dims.iter().product();
    let channels = std::array::from_fn(|r| {
        let data = &seg_logits.data()[r * n..(r + 1) * n];
        Grid3::from_fn(dims, |[i, j, k]| {
            let on = sigmoid(data[(i * dims[1] + j) * dims[2] + k]) >= threshold;
            u8::from(on && (!gate || keep[r][k]))
        })
    });
    RegionMask::new(channels)
}

/// Zero every 6-connected component with fewer than `min_voxels` voxels.
pub fn remove_small_components(mask: &Grid3<u8>, min_voxels: usize) -> Grid3<u8> {
    let d = mask.dims();
    let mut out = mask.clone();
    let mut seen = vec![false; mask.len()];
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if seen[start] || mask.data()[start] == 0 {
            continue;
        }
        let mut component = vec![start];
        seen[start] = true;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            let idx = [p / (d[1] * d[2]), (p / d[2]) % d[1], p % d[2]];
            for a in 0..3 {
                for up in [false, true] {
                    let mut q = idx;
                    if up {
                        if q[a] + 1 == d[a] {
                            continue;
                        }
                        q[a] += 1;
                    } else {
                        if q[a] == 0 {
                            continue;
                        }
                        q[a] -= 1;
                    }
                    let o = mask.offset(q);
                    if !seen[o] && mask.data()[o] != 0 {
                        seen[o] = true;
                        component.push(o);
                        queue.push_back(o);
                    }
                }
            }
        }
        if component.len() < min_voxels {
            for o in component {
                out.data_mut()[o] = 0;
            }
        }
    }
    out
}

fn window_starts(extent: usize, window: usize) -> Vec<usize> {
    if window >= extent {
        return vec![0];
    }
    let step = (window / 2).max(1);
    let mut starts: Vec<usize> = (0..=extent - window).step_by(step).collect();
    if *starts.last().expect("nonempty") != extent - window {
        starts.push(extent - window);
    }
    starts
}

fn slice_window(x: &Tensor<f32>, lo: [usize; 3], size: [usize; 3]) -> Tensor<f32> {
    let s = x.shape();
    let c = s[1];
    Tensor::from_fn(&[1, c, size[0], size[1], size[2]], |flat| {
        let k = flat % size[2];
        let j = (flat / size[2]) % size[1];
        let i = (flat / (size[1] * size[2])) % size[0];
        let ch = flat / (size[0] * size[1] * size[2]);
        x.data()[(((ch * s[2]) + lo[0] + i) * s[3] + lo[1] + j) * s[4] + lo[2] + k]
    })
}

/// Sliding-window variant of [`tta_ensemble_logits`]: overlapping windows
/// are averaged uniformly, slice logits over the windows covering a slice.
pub fn sliding_window_logits(
    models: &[&dyn Predictor],
    x: &Tensor<f32>,
    flips: &[[bool; 3]],
    space: AverageSpace,
    window: [usize; 3],
) -> Result<(Tensor<f64>, Tensor<f64>)> {
    let s = x.shape().to_vec();
    let dims = [s[2], s[3], s[4]];
    let size: [usize; 3] = std::array::from_fn(|a| window[a].min(dims[a]));
    let mut seg = vec![0.0; 3 * dims.iter().product::<usize>()];
    let mut seg_n = vec![0u32; dims.iter().product()];
    let mut slice = vec![0.0; 3 * dims[2]];
    let mut slice_n = vec![0u32; dims[2]];
    for &i0 in &window_starts(dims[0], size[0]) {
        for &j0 in &window_starts(dims[1], size[1]) {
            for &k0 in &window_starts(dims[2], size[2]) {
                let (ws, wl) = tta_ensemble_logits(models, &slice_window(x, [i0, j0, k0], size), flips, space)?;
                let plane = size[0] * size[1] * size[2];
                let vol: usize = dims.iter().product();
                for i in 0..size[0] {
                    for j in 0..size[1] {
                        for k in 0..size[2] {
                            let local = (i * size[1] + j) * size[2] + k;
                            let global = ((i0 + i) * dims[1] + j0 + j) * dims[2] + k0 + k;
                            seg_n[global] += 1;
                            for r in 0..3 {
                                seg[r * vol + global] += ws.data()[r * plane + local];
                            }
                        }
                    }
                }
                for k in 0..size[2] {
                    slice_n[k0 + k] += 1;
                    for r in 0..3 {
                        slice[r * dims[2] + k0 + k] += wl.data()[r * size[2] + k];
                    }
                }
            }
        }
    }
    let vol: usize = dims.iter().product();
    for (o, v) in seg.iter_mut().enumerate() {
        *v /= f64::from(seg_n[o % vol]);
    }
    for (o, v) in slice.iter_mut().enumerate() {
        *v /= f64::from(slice_n[o % dims[2]]);
    }
    Ok((Tensor::new(&[3, dims[0], dims[1], dims[2]], seg), Tensor::new(&[3, dims[2]], slice)))
}

/// Result of [`predict_case`], in the geometry of the input case.
#[derive(Clone, Debug)]
pub struct CasePrediction {
    pub labels: LabelVolume,
    pub regions: RegionMask,
    /// Region probabilities (WT, TC, ET) when requested.
    pub probabilities: Option<[Grid3<f32>; 3]>,
    /// Classifier decision per region and axial slice of the original
    /// volume; slices outside the foreground crop are reported negative.
    pub slice_positive: [Vec<bool>; 3],
    pub ungated_voxels: usize,
}

/// Crop, normalize, pad, ensemble, threshold, gate and map back.
pub fn predict_case(volume: &MultimodalVolume, models: &[&dyn Predictor], cfg: &InferenceConfig) -> Result<CasePrediction> {
    cfg.validate()?;
    let prep = PreparedCase::new(volume)?;
    let multiple = models.iter().map(|m| m.required_multiple()).max().unwrap_or(1);
    let padded = prep.volume.modalities().each_ref().map(|m| pad_to_multiple(m, multiple, 0.0));
    let pdims = padded[0].dims();
    let data: Vec<f32> = padded.iter().flat_map(|g| g.data().iter().copied()).collect();
    let x = Tensor::new(&[1, 4, pdims[0], pdims[1], pdims[2]], data);
    let (seg, slice) = match cfg.tiling {
        Tiling::Full => tta_ensemble_logits(models, &x, &cfg.tta_flips, cfg.average)?,
        Tiling::SlidingWindow { window } => {
            let window = window.map(|w| (w / multiple).max(1) * multiple);
            sliding_window_logits(models, &x, &cfg.tta_flips, cfg.average, window)?
        }
    };
    let ungated = threshold_and_gate(&seg, &slice, cfg.threshold, false)?;
    let gated = if cfg.gate_enabled { threshold_and_gate(&seg, &slice, cfg.threshold, true)? } else { ungated.clone() };
    let ungated_voxels = (0..3).map(|r| ungated.count(r)).sum();
    let mut regions = gated.map_channels(|g| prep.restore_grid(g, 0));
    if let Some(min) = cfg.min_component_voxels {
        regions = regions.map_channels(|g| remove_small_components(g, min));
    }
    let probabilities = cfg.write_probabilities.then(|| {
        let n = pdims.iter().product::<usize>();
        std::array::from_fn(|r| {
            let g = Grid3::new(pdims, seg.data()[r * n..(r + 1) * n].iter().map(|&l| sigmoid(l) as f32).collect())
                .expect("sized from the padded grid");
            prep.restore_grid(&g, 0.0)
        })
    });
    let decisions = slice_decisions(&slice, cfg.threshold)?;
    let axial = volume.axial_axis();
    let (lo, extent) = (prep.crop.lo[axial], prep.volume.dims()[2]);
    let slice_positive = decisions.map(|d| {
        let mut full = vec![false; volume.dims()[axial]];
        full[lo..lo + extent].copy_from_slice(&d[..extent]);
        full
    });
    Ok(CasePrediction { labels: regions_to_labels(&regions), regions, probabilities, slice_positive, ungated_voxels })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Outputs fixed logits regardless of input.
    struct Constant(f64);

    impl Predictor for Constant {
        fn predict(&self, x: &Tensor<f32>) -> Result<(Tensor<f64>, Tensor<f64>)> {
            let s = x.shape();
            Ok((Tensor::full(&[1, 3, s[2], s[3], s[4]], self.0), Tensor::full(&[1, 3, s[4]], self.0)))
        }
    }

    #[test]
    fn constant_models_average() {
        let x = Tensor::zeros(&[1, 4, 2, 2, 2]);
        let (a, b) = (Constant(1.0), Constant(3.0));
        let (seg, slice) = tta_ensemble_logits(&[&a, &b], &x, &all_flips(), AverageSpace::Logits).unwrap();
        assert!(seg.data().iter().chain(slice.data()).all(|&v| (v - 2.0).abs() < 1e-12));
        assert_eq!(seg.shape(), &[3, 2, 2, 2]);
        assert!(tta_ensemble_logits(&[], &x, &all_flips(), AverageSpace::Logits).is_err());
    }

    #[test]
    fn gate_clears_negative_slices() {
        // ET voxels on slices 0 and 1; ET slice probabilities 0.6 and 0.3
        let mut seg = Tensor::full(&[3, 1, 1, 2], -5.0);
        seg.data_mut()[4] = 5.0;
        seg.data_mut()[5] = 5.0;
        let mut slice = Tensor::full(&[3, 2], 5.0);
        slice.data_mut()[4] = logit(0.6);
        slice.data_mut()[5] = logit(0.3);
        let gated = threshold_and_gate(&seg, &slice, 0.5, true).unwrap();
        assert_eq!(gated.channel(2).data(), &[1, 0]);
        let plain = threshold_and_gate(&seg, &slice, 0.5, false).unwrap();
        assert_eq!(plain.channel(2).data(), &[1, 1]);
        assert!(gated.is_subset_of(&plain));
    }

    #[test]
    fn small_components_are_removed() {
        let mut g = Grid3::filled([5, 5, 5], 0u8);
        g.set([0, 0, 0], 1);
        for k in 0..4 {
            g.set([3, 3, k], 1);
        }
        let out = remove_small_components(&g, 2);
        assert_eq!(out.get([0, 0, 0]), 0);
        assert_eq!(out.data().iter().filter(|&&v| v == 1).count(), 4);
    }

    #[test]
    fn windows_cover_the_extent() {
        assert_eq!(window_starts(10, 4), vec![0, 2, 4, 6]);
        assert_eq!(window_starts(9, 4), vec![0, 2, 4, 5]);
        assert_eq!(window_starts(3, 4), vec![0]);
    }

    #[test]
    fn sliding_window_of_constant_model_is_constant() {
        let x = Tensor::zeros(&[1, 4, 6, 4, 8]);
        let (seg, slice) = sliding_window_logits(&[&Constant(0.7)], &x, &[[false; 3]], AverageSpace::Logits, [4, 4, 4]).unwrap();
        assert!(seg.data().iter().chain(slice.data()).all(|&v| (v - 0.7).abs() < 1e-12));
    }
}
