//! Foreground cropping, intensity normalization and training augmentation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data_model::{CropBox, Grid3, MultimodalVolume, RegionMask, MODALITY_NAMES};
use crate::error::{Error, Result};

/// Tightest box containing every voxel where any modality is nonzero.
pub fn compute_foreground_crop(v: &MultimodalVolume) -> Result<CropBox> {
    let dims = v.dims();
    let mut lo = dims;
    let mut hi = [0usize; 3];
    let mut any = false;
    for i in 0..dims[0] {
        for j in 0..dims[1] {
            for k in 0..dims[2] {
                let idx = [i, j, k];
                let o = v.t1().offset(idx);
                if v.modalities().iter().any(|m| m.data()[o] != 0.0) {
                    any = true;
                    for a in 0..3 {
                        lo[a] = lo[a].min(idx[a]);
                        hi[a] = hi[a].max(idx[a]);
                    }
                }
            }
        }
    }
    if !any {
        return Err(Error::EmptyVolume);
    }
    CropBox::new(lo, hi, dims)
}

pub fn crop(v: &MultimodalVolume, b: &CropBox) -> Result<MultimodalVolume> {
    v.map_modalities(|m| m.crop(b))
}

/// Per modality z-score over nonzero voxels; zero voxels stay zero.
pub fn normalize(v: &MultimodalVolume) -> Result<MultimodalVolume> {
    let mut out = Vec::with_capacity(4);
    for (m, name) in v.modalities().iter().zip(MODALITY_NAMES) {
        let (mut n, mut sum) = (0usize, 0.0f64);
        for &x in m.data().iter().filter(|&&x| x != 0.0) {
            n += 1;
            sum += x as f64;
        }
        if n == 0 {
            return Err(Error::DegenerateIntensity(name));
        }
        let mean = sum / n as f64;
        let var = m.data().iter().filter(|&&x| x != 0.0).map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        if !(std > 1e-12 * mean.abs().max(1.0)) {
            return Err(Error::DegenerateIntensity(name));
        }
        out.push(m.map(|x| if x == 0.0 { 0.0 } else { ((x as f64 - mean) / std) as f32 }));
    }
    v.replace_modalities(out.try_into().expect("four modalities"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub scale_range: [f64; 2],
    pub shift_range: [f64; 2],
    /// Applied independently to the scale and to the shift augmentation.
    pub intensity_aug_prob: f64,
    pub crop_size: [usize; 3],
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            scale_range: [0.9, 1.1],
            shift_range: [-0.1, 0.1],
            intensity_aug_prob: 0.8,
            crop_size: [128, 128, 96],
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, p) in [("augment.flip_prob", self.flip_prob), ("augment.intensity_aug_prob", self.intensity_aug_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(field, format!("probability {p} outside [0, 1]")));
            }
        }
        let [lo, hi] = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::config("augment.scale_range", format!("[{lo}, {hi}] must be a positive interval")));
        }
        let [lo, hi] = self.shift_range;
        if !(lo <= hi && lo.is_finite() && hi.is_finite()) {
            return Err(Error::config("augment.shift_range", format!("[{lo}, {hi}] is not an interval")));
        }
        if self.crop_size.contains(&0) {
            return Err(Error::config("augment.crop_size", "components must be positive"));
        }
        Ok(())
    }
}

/// Zero-pad symmetrically (extra voxel at the end) so that every axis is at
/// least `min_dims`. Returns the grid and the origin of the source in it.
pub fn pad_symmetric<T: Copy>(g: &Grid3<T>, min_dims: [usize; 3], fill: T) -> (Grid3<T>, [usize; 3]) {
    let d = g.dims();
    let dims: [usize; 3] = std::array::from_fn(|a| d[a].max(min_dims[a]));
    let origin: [usize; 3] = std::array::from_fn(|a| (dims[a] - d[a]) / 2);
    if dims == d {
        return (g.clone(), origin);
    }
    (g.embed(dims, origin, fill), origin)
}

/// End-pad every axis up to the next multiple of `multiple`.
pub fn pad_to_multiple<T: Copy>(g: &Grid3<T>, multiple: usize, fill: T) -> Grid3<T> {
    let d = g.dims();
    let dims = d.map(|x| x.div_ceil(multiple) * multiple);
    if dims == d {
        return g.clone();
    }
    g.embed(dims, [0; 3], fill)
}

/// Axis order that moves `axial` last, keeping the other two in order.
pub fn axial_last_perm(axial: usize) -> [usize; 3] {
    match axial {
        0 => [1, 2, 0],
        1 => [0, 2, 1],
        _ => [0, 1, 2],
    }
}

pub fn invert_perm(perm: [usize; 3]) -> [usize; 3] {
    let mut inv = [0; 3];
    for (a, &p) in perm.iter().enumerate() {
        inv[p] = a;
    }
    inv
}

/// A case in network space: foreground-cropped, normalized and with the
/// axial axis last. Keeps what is needed to map results back.
#[derive(Clone, Debug)]
pub struct PreparedCase {
    pub volume: MultimodalVolume,
    pub crop: CropBox,
    pub perm: [usize; 3],
    pub original_dims: [usize; 3],
}

impl PreparedCase {
    pub fn new(v: &MultimodalVolume) -> Result<Self> {
        let crop_box = compute_foreground_crop(v)?;
        let perm = axial_last_perm(v.axial_axis());
        let cropped = normalize(&crop(v, &crop_box)?)?;
        let spacing = perm.map(|p| v.spacing()[p]);
        let modalities = cropped.modalities().each_ref().map(|m| m.permute(perm));
        let mut volume = MultimodalVolume::new(modalities, spacing, 2)?;
        if let Some(h) = v.header() {
            volume = volume.with_header(h.clone());
        }
        Ok(Self { volume, crop: crop_box, perm, original_dims: v.dims() })
    }

    /// Map an original-space grid (labels, masks) into network space.
    pub fn forward_grid<T: Copy>(&self, g: &Grid3<T>) -> Grid3<T> {
        g.crop(&self.crop).permute(self.perm)
    }

    /// Inverse of [`PreparedCase::forward_grid`]; anything beyond the
    /// network-space extent (padding) is dropped and voxels outside the crop
    /// are `fill`.
    pub fn restore_grid<T: Copy>(&self, g: &Grid3<T>, fill: T) -> Grid3<T> {
        let size = self.volume.dims();
        let unpadded = g.crop(&CropBox { lo: [0; 3], hi: size.map(|d| d - 1) });
        unpadded.permute(invert_perm(self.perm)).embed(self.original_dims, self.crop.lo, fill)
    }
}

fn draw_range(rng: &mut impl Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// The random choices of one augmentation call.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentDraw {
    pub flips: [bool; 3],
    pub scale: Option<f64>,
    pub shift: Option<f64>,
    pub crop_origin: [usize; 3],
}

impl AugmentDraw {
    pub fn sample(cfg: &AugmentConfig, padded_dims: [usize; 3], rng: &mut impl Rng) -> Self {
        let flips = std::array::from_fn(|_| rng.random::<f64>() < cfg.flip_prob);
        let scale = (rng.random::<f64>() < cfg.intensity_aug_prob).then(|| draw_range(rng, cfg.scale_range));
        let shift = (rng.random::<f64>() < cfg.intensity_aug_prob).then(|| draw_range(rng, cfg.shift_range));
        let crop_origin = std::array::from_fn(|a| rng.random_range(0..=padded_dims[a] - cfg.crop_size[a]));
        Self { flips, scale, shift, crop_origin }
    }
}

/// Flip, scale, shift and crop, in that order. The mask only follows the
/// geometric steps.
pub fn augment(
    v: &MultimodalVolume,
    m: &RegionMask,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<(MultimodalVolume, RegionMask)> {
    if v.dims() != m.dims() {
        return Err(Error::shape(format!("volume {:?} and mask {:?} differ", v.dims(), m.dims())));
    }
    let padded: [usize; 3] = std::array::from_fn(|a| v.dims()[a].max(cfg.crop_size[a]));
    let draw = AugmentDraw::sample(cfg, padded, rng);
    apply_augment(v, m, cfg.crop_size, &draw)
}

pub fn apply_augment(
    v: &MultimodalVolume,
    m: &RegionMask,
    crop_size: [usize; 3],
    draw: &AugmentDraw,
) -> Result<(MultimodalVolume, RegionMask)> {
    let scale = draw.scale.unwrap_or(1.0) as f32;
    let shift = draw.shift.unwrap_or(0.0) as f32;
    let image = v.map_modalities(|g| spatial(&g.map(|x| x * scale + shift), crop_size, draw, 0.0))?;
    let mask = m.map_channels(|g| spatial(g, crop_size, draw, 0));
    Ok((image, mask))
}

fn flip_all<T: Copy>(g: &Grid3<T>, flips: [bool; 3]) -> Grid3<T> {
    let mut out = g.clone();
    for (axis, &f) in flips.iter().enumerate() {
        if f {
            out = out.flip(axis);
        }
    }
    out
}

fn crop_at<T: Copy>(g: &Grid3<T>, origin: [usize; 3], size: [usize; 3]) -> Grid3<T> {
    let b = CropBox { lo: origin, hi: std::array::from_fn(|a| origin[a] + size[a] - 1) };
    g.crop(&b)
}

fn spatial<T: Copy>(g: &Grid3<T>, crop_size: [usize; 3], draw: &AugmentDraw, fill: T) -> Grid3<T> {
    let flipped = flip_all(g, draw.flips);
    crop_at(&pad_symmetric(&flipped, crop_size, fill).0, draw.crop_origin, crop_size)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn volume(dims: [usize; 3], f: impl Fn([usize; 3]) -> f32) -> MultimodalVolume {
        let g = Grid3::from_fn(dims, f);
        MultimodalVolume::new([g.clone(), g.clone(), g.clone(), g], [1.0; 3], 2).unwrap()
    }

    #[test]
    fn foreground_box_is_tight() {
        let v = volume([32, 32, 40], |[i, j, k]| {
            if (10..=20).contains(&i) && (5..=25).contains(&j) && k <= 30 {
                1.0
            } else {
                0.0
            }
        });
        let b = compute_foreground_crop(&v).unwrap();
        assert_eq!((b.lo, b.hi), ([10, 5, 0], [20, 25, 30]));
        let zero = volume([4, 4, 4], |_| 0.0);
        assert!(matches!(compute_foreground_crop(&zero), Err(Error::EmptyVolume)));
    }

    #[test]
    fn zscore_on_foreground() {
        let v = volume([1, 1, 3], |[_, _, k]| [0.0, 2.0, 4.0][k]);
        let n = normalize(&v).unwrap();
        assert_eq!(n.t1().data(), &[0.0, -1.0, 1.0]);
        let c = volume([1, 1, 3], |[_, _, k]| [0.0, 3.0, 3.0][k]);
        assert!(matches!(normalize(&c), Err(Error::DegenerateIntensity("t1"))));
    }

    #[test]
    fn forced_flip_and_scale() {
        let v = volume([4, 3, 2], |[i, j, k]| (i * 6 + j * 2 + k) as f32 + 1.0);
        let mut m = RegionMask::empty([4, 3, 2]);
        m.channel_mut(0).set([0, 1, 1], 1);
        let draw = AugmentDraw { flips: [true, false, false], scale: Some(0.9), shift: None, crop_origin: [0; 3] };
        let (a, am) = apply_augment(&v, &m, [4, 3, 2], &draw).unwrap();
        assert_eq!(a.t1().get([3, 1, 1]), v.t1().get([0, 1, 1]) * 0.9);
        assert_eq!(am.channel(0).get([3, 1, 1]), 1);
        assert_eq!(am.count(0), 1);
    }

    #[test]
    fn identity_when_nothing_fires() {
        let v = volume([4, 4, 4], |[i, j, k]| (i + j + k) as f32);
        let m = RegionMask::empty([4, 4, 4]);
        let cfg = AugmentConfig { flip_prob: 0.0, intensity_aug_prob: 0.0, crop_size: [4, 4, 4], ..Default::default() };
        let (a, _) = augment(&v, &m, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a.t1(), v.t1());
    }

    #[test]
    fn small_volumes_are_padded_and_output_matches_crop() {
        let v = volume([6, 10, 3], |_| 1.0);
        let m = RegionMask::empty([6, 10, 3]);
        let cfg = AugmentConfig { crop_size: [8, 8, 8], ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (a, am) = augment(&v, &m, &cfg, &mut rng).unwrap();
        assert_eq!(a.dims(), [8, 8, 8]);
        assert_eq!(am.dims(), [8, 8, 8]);
        let again = augment(&v, &m, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(again.0.t2(), a.t2());
    }
}
