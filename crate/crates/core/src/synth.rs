//! Synthetic multimodal cases with nested ellipsoidal tumors.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data_model::{CaseLayout, DatasetManifest, Grid3, LabelVolume, MultimodalVolume};
use crate::error::{Error, Result};
use crate::nifti::{self, DataType, NiftiHeader};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_cases: usize,
    pub seed: u64,
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    /// Allowed whole-tumor share of the volume.
    pub wt_fraction: [f64; 2],
    /// Bright T1Gd single-voxel speckles per case, placed on tumor-free
    /// axial slices.
    pub speckles: usize,
    /// Noise standard deviation relative to the tissue level.
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { n_cases: 4, seed: 0, shape: [64, 64, 64], spacing: [1.0; 3], wt_fraction: [0.01, 0.10], speckles: 0, noise: 0.05 }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shape.iter().any(|&d| d < 16) {
            return Err(Error::config("synth.shape", "every extent must be at least 16"));
        }
        let [lo, hi] = self.wt_fraction;
        if !(0.0 < lo && lo < hi && hi < 0.3) {
            return Err(Error::config("synth.wt_fraction", "need 0 < lo < hi < 0.3"));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::config("synth.spacing", "must be positive"));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::config("synth.noise", "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SynthCase {
    pub id: String,
    pub volume: MultimodalVolume,
    pub labels: LabelVolume,
    /// Voxels carrying an injected speckle.
    pub speckles: Vec<[usize; 3]>,
}

// Tissue levels (t1, t1gd, t2, flair) for brain, edema, necrotic core and
// enhancing tumor.
const BRAIN: [f64; 4] = [0.8, 0.7, 0.5, 0.5];
const EDEMA: [f64; 4] = [0.6, 0.6, 1.2, 1.5];
const CORE: [f64; 4] = [0.4, 0.5, 1.3, 0.9];
const ENHANCING: [f64; 4] = [0.7, 1.8, 1.0, 1.2];

fn ellipsoid_radius(idx: [usize; 3], center: [f64; 3], radii: [f64; 3]) -> f64 {
    (0..3).map(|a| ((idx[a] as f64 - center[a]) / radii[a]).powi(2)).sum::<f64>().sqrt()
}

pub fn case_id(index: usize) -> String {
    format!("synth_{index:03}")
}

/// Case `index` of the corpus described by `cfg`; independent of the
/// other cases.
pub fn generate_case(cfg: &SynthConfig, index: usize) -> Result<SynthCase> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index as u64);
    let d = cfg.shape;
    let total: usize = d.iter().product();
    let brain_c = d.map(|x| (x as f64 - 1.0) / 2.0);
    let brain_r = d.map(|x| 0.45 * x as f64);

    let target = rng.random_range(cfg.wt_fraction[0] * 1.3..cfg.wt_fraction[1] * 0.85);
    let aspect: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.8..1.25));
    let unit = 4.0 / 3.0 * std::f64::consts::PI * aspect.iter().product::<f64>();
    let mut scale = (target * total as f64 / unit).cbrt();
    let offset_dir: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
    let margin = rng.random_range(0.0..0.5);
    let core_ratio = rng.random_range(0.5..0.7);
    let shell = rng.random_range(0.5..0.7);

    let mut labels = Grid3::filled(d, 0u8);
    for _ in 0..40 {
        let radii = aspect.map(|a| a * scale);
        // keep the tumor inside the brain ellipsoid
        let center: [f64; 3] = std::array::from_fn(|a| brain_c[a] + offset_dir[a] * margin * (brain_r[a] - radii[a]).max(0.0) * 0.5);
        labels = Grid3::from_fn(d, |idx| {
            let rw = ellipsoid_radius(idx, center, radii);
            if rw > 1.0 || ellipsoid_radius(idx, brain_c, brain_r) > 1.0 {
                return 0;
            }
            let rc = rw / core_ratio;
            if rc > 1.0 {
                2
            } else if rc >= shell {
                4
            } else {
                1
            }
        });
        let frac = labels.data().iter().filter(|&&l| l != 0).count() as f64 / total as f64;
        if frac < cfg.wt_fraction[0] {
            scale *= 1.05;
        } else if frac > cfg.wt_fraction[1] {
            scale *= 0.95;
        } else {
            break;
        }
    }
    let frac = labels.data().iter().filter(|&&l| l != 0).count() as f64 / total as f64;
    if !(cfg.wt_fraction[0]..=cfg.wt_fraction[1]).contains(&frac) {
        return Err(Error::InvalidData(format!("could not place a tumor covering {:?} of {d:?}", cfg.wt_fraction)));
    }

    let gains: [f64; 4] = std::array::from_fn(|_| 400.0 * rng.random_range(0.8..1.2));
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::InvalidData(e.to_string()))?;
    let in_brain = |idx: [usize; 3]| ellipsoid_radius(idx, brain_c, brain_r) <= 1.0;
    let mut mods: [Grid3<f32>; 4] = std::array::from_fn(|_| Grid3::filled(d, 0.0));
    for i in 0..d[0] {
        for j in 0..d[1] {
            for k in 0..d[2] {
                let idx = [i, j, k];
                if !in_brain(idx) {
                    continue;
                }
                let level = match labels.get(idx) {
                    2 => EDEMA,
                    1 => CORE,
                    4 => ENHANCING,
                    _ => BRAIN,
                };
                for m in 0..4 {
                    let v = gains[m] * (level[m] + noise.sample(&mut rng)).max(0.05);
                    mods[m].set(idx, v as f32);
                }
            }
        }
    }

    let mut speckles = Vec::new();
    if cfg.speckles > 0 {
        let tumor_slices: Vec<bool> = (0..d[2]).map(|k| (0..d[0]).any(|i| (0..d[1]).any(|j| labels.get([i, j, k]) != 0))).collect();
        let free: Vec<usize> = (2..d[2] - 2).filter(|&k| !tumor_slices[k] && in_brain([d[0] / 2, d[1] / 2, k])).collect();
        if free.is_empty() {
            return Err(Error::InvalidData(format!("{}: no tumor-free slice for speckles", case_id(index))));
        }
        let mut attempts = 0;
        while speckles.len() < cfg.speckles && attempts < 100 * cfg.speckles {
            attempts += 1;
            let k = free[rng.random_range(0..free.len())];
            let idx = [rng.random_range(0..d[0]), rng.random_range(0..d[1]), k];
            let isolated = speckles.iter().all(|s: &[usize; 3]| (0..3).map(|a| s[a].abs_diff(idx[a])).max().unwrap_or(0) > 2);
            if in_brain(idx) && isolated {
                mods[1].set(idx, (gains[1] * ENHANCING[1] * 1.2) as f32);
                speckles.push(idx);
            }
        }
    }

    let volume = MultimodalVolume::new(mods, cfg.spacing, 2)?.with_header(NiftiHeader::for_volume(d, cfg.spacing));
    Ok(SynthCase { id: case_id(index), volume, labels: LabelVolume::new(labels)?, speckles })
}

/// Write one case directory per case (default file layout) and a
/// `dataset.toml` manifest under `out`.
pub fn write_dataset(cfg: &SynthConfig, out: impl AsRef<Path>) -> Result<DatasetManifest> {
    cfg.validate()?;
    let out = out.as_ref();
    std::fs::create_dir_all(out).map_err(Error::io(out))?;
    let layout = CaseLayout::default();
    let mut manifest = DatasetManifest { cases: Vec::new() };
    for index in 0..cfg.n_cases {
        let case = generate_case(cfg, index)?;
        let dir = out.join(&case.id);
        std::fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
        let files = layout.files(&dir);
        let header = NiftiHeader::for_volume(cfg.shape, cfg.spacing);
        let dims = cfg.shape.to_vec();
        for (path, m) in [&files.t1, &files.t1gd, &files.t2, &files.flair].into_iter().zip(case.volume.modalities()) {
            let data: Vec<f64> = m.data().iter().map(|&v| f64::from(v)).collect();
            nifti::write(path, &header, &dims, &data, DataType::Float32)?;
        }
        let seg = files.seg.as_ref().expect("layout always names a label file");
        let labels: Vec<f64> = case.labels.grid().data().iter().map(|&v| f64::from(v)).collect();
        nifti::write(seg, &header, &dims, &labels, DataType::Uint8)?;
        manifest.cases.push(files);
    }
    manifest.save(out.join("dataset.toml"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::labels_to_regions;

    #[test]
    fn tumors_are_nested_and_sized() {
        let cfg = SynthConfig { shape: [32, 32, 32], speckles: 3, ..Default::default() };
        for i in 0..6 {
            let case = generate_case(&cfg, i).unwrap();
            let regions = labels_to_regions(&case.labels);
            assert!(regions.is_nested());
            let frac = regions.count(0) as f64 / 32f64.powi(3);
            assert!((0.01..=0.10).contains(&frac), "{frac}");
            assert!(regions.count(2) > 0 && regions.count(1) > regions.count(2));
            assert_eq!(case.speckles.len(), 3);
            let presence = regions.slice_presence(2);
            assert!(case.speckles.iter().all(|s| !presence[0][s[2]]));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig { shape: [24, 24, 24], ..Default::default() };
        let (a, b) = (generate_case(&cfg, 2).unwrap(), generate_case(&cfg, 2).unwrap());
        assert_eq!(a.volume.to_channels(), b.volume.to_channels());
        assert_eq!(a.labels, b.labels);
    }
}
