//! Cases, label maps, region masks and the geometry shared by every stage.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nifti::{self, NiftiHeader};

/// Dense 3-D grid in C order (last axis fastest).
#[derive(Clone, Debug, PartialEq)]
pub struct Grid3<T> {
    dims: [usize; 3],
    data: Vec<T>,
}

impl<T: Copy> Grid3<T> {
    pub fn new(dims: [usize; 3], data: Vec<T>) -> Result<Self> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::shape(format!("{} values for grid {dims:?}", data.len())));
        }
        Ok(Self { dims, data })
    }

    pub fn filled(dims: [usize; 3], value: T) -> Self {
        Self { dims, data: vec![value; dims.iter().product()] }
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut([usize; 3]) -> T) -> Self {
        let mut data = Vec::with_capacity(dims.iter().product());
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for k in 0..dims[2] {
                    data.push(f([i, j, k]));
                }
            }
        }
        Self { dims, data }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn offset(&self, [i, j, k]: [usize; 3]) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    pub fn get(&self, idx: [usize; 3]) -> T {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: [usize; 3], value: T) {
        let o = self.offset(idx);
        self.data[o] = value;
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Grid3<U> {
        Grid3 { dims: self.dims, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Mirror along `axis`.
    pub fn flip(&self, axis: usize) -> Self {
        let d = self.dims;
        Self::from_fn(d, |mut idx| {
            idx[axis] = d[axis] - 1 - idx[axis];
            self.get(idx)
        })
    }

    /// Sub-grid covered by `b`.
    pub fn crop(&self, b: &CropBox) -> Self {
        Self::from_fn(b.size(), |[i, j, k]| self.get([b.lo[0] + i, b.lo[1] + j, b.lo[2] + k]))
    }

    /// Grid of `dims` filled with `fill`, with `self` placed at `origin`.
    pub fn embed(&self, dims: [usize; 3], origin: [usize; 3], fill: T) -> Self {
        assert!((0..3).all(|a| origin[a] + self.dims[a] <= dims[a]), "embedded grid exceeds target");
        let mut out = Self::filled(dims, fill);
        for i in 0..self.dims[0] {
            for j in 0..self.dims[1] {
                let src = self.offset([i, j, 0]);
                let dst = out.offset([origin[0] + i, origin[1] + j, origin[2]]);
                out.data[dst..dst + self.dims[2]].copy_from_slice(&self.data[src..src + self.dims[2]]);
            }
        }
        out
    }

    /// Reorder axes: output axis `a` is input axis `perm[a]`.
    pub fn permute(&self, perm: [usize; 3]) -> Self {
        let dims = perm.map(|p| self.dims[p]);
        Self::from_fn(dims, |idx| {
            let mut src = [0; 3];
            for a in 0..3 {
                src[perm[a]] = idx[a];
            }
            self.get(src)
        })
    }
}

pub const MODALITY_NAMES: [&str; 4] = ["t1", "t1gd", "t2", "flair"];

/// Four co-registered modalities (T1, T1Gd, T2, FLAIR) with geometry.
#[derive(Clone, Debug)]
pub struct MultimodalVolume {
    modalities: [Grid3<f32>; 4],
    spacing: [f64; 3],
    axial_axis: usize,
    header: Option<NiftiHeader>,
}

impl MultimodalVolume {
    pub fn new(modalities: [Grid3<f32>; 4], spacing: [f64; 3], axial_axis: usize) -> Result<Self> {
        let dims = modalities[0].dims();
        for (m, name) in modalities.iter().zip(MODALITY_NAMES) {
            if m.dims() != dims {
                return Err(Error::GeometryMismatch(format!("{name} has shape {:?}, expected {dims:?}", m.dims())));
            }
            if let Some(pos) = m.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::InvalidData(format!("{name} has a non-finite value at flat index {pos}")));
            }
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::GeometryMismatch(format!("spacing {spacing:?} must be strictly positive")));
        }
        if axial_axis > 2 {
            return Err(Error::GeometryMismatch(format!("axial axis {axial_axis} out of range")));
        }
        Ok(Self { modalities, spacing, axial_axis, header: None })
    }

    pub fn with_header(mut self, header: NiftiHeader) -> Self {
        self.header = Some(header);
        self
    }

    pub fn dims(&self) -> [usize; 3] {
        self.modalities[0].dims()
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn axial_axis(&self) -> usize {
        self.axial_axis
    }

    /// Reference header of the source files, used when writing outputs.
    pub fn header(&self) -> Option<&NiftiHeader> {
        self.header.as_ref()
    }

    pub fn modalities(&self) -> &[Grid3<f32>; 4] {
        &self.modalities
    }

    pub fn modality(&self, index: usize) -> &Grid3<f32> {
        &self.modalities[index]
    }

    pub fn t1(&self) -> &Grid3<f32> {
        &self.modalities[0]
    }

    pub fn t1gd(&self) -> &Grid3<f32> {
        &self.modalities[1]
    }

    pub fn t2(&self) -> &Grid3<f32> {
        &self.modalities[2]
    }

    pub fn flair(&self) -> &Grid3<f32> {
        &self.modalities[3]
    }

    /// Same geometry, new voxel data.
    pub fn map_modalities(&self, f: impl FnMut(&Grid3<f32>) -> Grid3<f32>) -> Result<Self> {
        self.replace_modalities(self.modalities.each_ref().map(f))
    }

    pub fn replace_modalities(&self, modalities: [Grid3<f32>; 4]) -> Result<Self> {
        let mut v = Self::new(modalities, self.spacing, self.axial_axis)?;
        v.header = self.header.clone();
        Ok(v)
    }

    /// Channel-major `[4, x, y, z]` buffer.
    pub fn to_channels(&self) -> Vec<f32> {
        self.modalities.iter().flat_map(|m| m.data().iter().copied()).collect()
    }
}

/// Label codes: 0 background, 1 necrotic / non-enhancing core, 2 edema,
/// 4 enhancing tumor.
pub const VALID_LABELS: [u8; 4] = [0, 1, 2, 4];

#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    labels: Grid3<u8>,
}

impl LabelVolume {
    pub fn new(labels: Grid3<u8>) -> Result<Self> {
        if let Some(pos) = labels.data().iter().position(|v| !VALID_LABELS.contains(v)) {
            return Err(Error::InvalidLabel { value: labels.data()[pos] as i64, index: unravel(labels.dims(), pos) });
        }
        Ok(Self { labels })
    }

    /// Validate raw values read from disk.
    pub fn from_values(dims: [usize; 3], values: &[f64]) -> Result<Self> {
        let mut out = Vec::with_capacity(values.len());
        for (pos, &v) in values.iter().enumerate() {
            let code = v.round();
            if code != v || !VALID_LABELS.iter().any(|&l| l as f64 == code) {
                let value = if v.is_finite() { v.round() as i64 } else { i64::MIN };
                return Err(Error::InvalidLabel { value, index: unravel(dims, pos) });
            }
            out.push(code as u8);
        }
        Ok(Self { labels: Grid3::new(dims, out)? })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.labels.dims()
    }

    pub fn grid(&self) -> &Grid3<u8> {
        &self.labels
    }
}

fn unravel(dims: [usize; 3], pos: usize) -> [usize; 3] {
    [pos / (dims[1] * dims[2]), (pos / dims[2]) % dims[1], pos % dims[2]]
}

pub const REGION_NAMES: [&str; 3] = ["WT", "TC", "ET"];

/// Binary masks for the overlapping regions, ordered (WT, TC, ET).
#[derive(Clone, Debug, PartialEq)]
pub struct RegionMask {
    channels: [Grid3<u8>; 3],
}

impl RegionMask {
    pub fn new(channels: [Grid3<u8>; 3]) -> Result<Self> {
        let dims = channels[0].dims();
        if channels.iter().any(|c| c.dims() != dims) {
            return Err(Error::shape("region channels differ in shape"));
        }
        if channels.iter().any(|c| c.data().iter().any(|&v| v > 1)) {
            return Err(Error::InvalidData("region mask values must be 0 or 1".into()));
        }
        Ok(Self { channels })
    }

    pub fn empty(dims: [usize; 3]) -> Self {
        Self { channels: std::array::from_fn(|_| Grid3::filled(dims, 0)) }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.channels[0].dims()
    }

    pub fn channel(&self, region: usize) -> &Grid3<u8> {
        &self.channels[region]
    }

    pub fn channel_mut(&mut self, region: usize) -> &mut Grid3<u8> {
        &mut self.channels[region]
    }

    pub fn channels(&self) -> &[Grid3<u8>; 3] {
        &self.channels
    }

    pub fn map_channels(&self, f: impl FnMut(&Grid3<u8>) -> Grid3<u8>) -> Self {
        Self { channels: self.channels.each_ref().map(f) }
    }

    pub fn count(&self, region: usize) -> usize {
        self.channels[region].data().iter().filter(|&&v| v == 1).count()
    }

    /// ET ⊆ TC ⊆ WT voxelwise.
    pub fn is_nested(&self) -> bool {
        let [wt, tc, et] = &self.channels;
        (0..wt.len()).all(|i| et.data()[i] <= tc.data()[i] && tc.data()[i] <= wt.data()[i])
    }

    /// Voxelwise subset of `other` in every channel.
    pub fn is_subset_of(&self, other: &RegionMask) -> bool {
        self.channels.iter().zip(&other.channels).all(|(a, b)| a.data().iter().zip(b.data()).all(|(&x, &y)| x <= y))
    }

    /// `[3, x, y, z]` buffer of 0.0 / 1.0.
    pub fn to_channels(&self) -> Vec<f32> {
        self.channels.iter().flat_map(|c| c.data().iter().map(|&v| v as f32)).collect()
    }

    /// Per-region presence on each slice along `axis`: `[3][extent]`.
    pub fn slice_presence(&self, axis: usize) -> [Vec<bool>; 3] {
        let dims = self.dims();
        self.channels.each_ref().map(|c| {
            let mut present = vec![false; dims[axis]];
            for (pos, &v) in c.data().iter().enumerate() {
                if v == 1 {
                    present[unravel(dims, pos)[axis]] = true;
                }
            }
            present
        })
    }
}

pub fn labels_to_regions(lv: &LabelVolume) -> RegionMask {
    let g = lv.grid();
    RegionMask {
        channels: [
            g.map(|l| u8::from(matches!(l, 1 | 2 | 4))),
            g.map(|l| u8::from(matches!(l, 1 | 4))),
            g.map(|l| u8::from(l == 4)),
        ],
    }
}

/// Priority ET > TC > WT, so non-nested masks still map to one label.
pub fn regions_to_labels(rm: &RegionMask) -> LabelVolume {
    let [wt, tc, et] = rm.channels();
    let data = (0..wt.len())
        .map(|i| {
            if et.data()[i] == 1 {
                4
            } else if tc.data()[i] == 1 {
                1
            } else if wt.data()[i] == 1 {
                2
            } else {
                0
            }
        })
        .collect();
    LabelVolume { labels: Grid3 { dims: rm.dims(), data } }
}

/// Inclusive voxel bounds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropBox {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl CropBox {
    pub fn new(lo: [usize; 3], hi: [usize; 3], dims: [usize; 3]) -> Result<Self> {
        if (0..3).any(|a| lo[a] > hi[a] || hi[a] >= dims[a]) {
            return Err(Error::shape(format!("crop box {lo:?}..={hi:?} invalid for volume {dims:?}")));
        }
        Ok(Self { lo, hi })
    }

    pub fn full(dims: [usize; 3]) -> Self {
        Self { lo: [0; 3], hi: dims.map(|d| d - 1) }
    }

    pub fn size(&self) -> [usize; 3] {
        std::array::from_fn(|a| self.hi[a] - self.lo[a] + 1)
    }

    pub fn contains(&self, idx: [usize; 3]) -> bool {
        (0..3).all(|a| self.lo[a] <= idx[a] && idx[a] <= self.hi[a])
    }
}

/// File naming inside a case directory; `{id}` is replaced by the case id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CaseLayout {
    pub t1: String,
    pub t1gd: String,
    pub t2: String,
    pub flair: String,
    pub seg: String,
}

impl Default for CaseLayout {
    fn default() -> Self {
        Self {
            t1: "{id}_t1.nii.gz".into(),
            t1gd: "{id}_t1ce.nii.gz".into(),
            t2: "{id}_t2.nii.gz".into(),
            flair: "{id}_flair.nii.gz".into(),
            seg: "{id}_seg.nii.gz".into(),
        }
    }
}

impl CaseLayout {
    pub fn files(&self, dir: &Path) -> CaseFiles {
        let id = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let p = |pattern: &str| dir.join(pattern.replace("{id}", &id));
        CaseFiles {
            id: id.clone(),
            t1: p(&self.t1),
            t1gd: p(&self.t1gd),
            t2: p(&self.t2),
            flair: p(&self.flair),
            seg: Some(p(&self.seg)),
        }
    }
}

/// Paths of one case. A missing `seg` file means the case is unlabeled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseFiles {
    pub id: String,
    pub t1: PathBuf,
    pub t1gd: PathBuf,
    pub t2: PathBuf,
    pub flair: PathBuf,
    #[serde(default)]
    pub seg: Option<PathBuf>,
}

impl CaseFiles {
    fn modality_paths(&self) -> [&Path; 4] {
        [&self.t1, &self.t1gd, &self.t2, &self.flair]
    }

    fn resolved_against(mut self, base: &Path) -> Self {
        for p in [&mut self.t1, &mut self.t1gd, &mut self.t2, &mut self.flair] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(s) = &mut self.seg {
            if s.is_relative() {
                *s = base.join(&*s);
            }
        }
        self
    }
}

/// Case id → file paths, stored as TOML:
///
/// ```toml
/// [[case]]
/// id = "case_000"
/// t1 = "case_000/case_000_t1.nii.gz"
/// t1gd = "case_000/case_000_t1ce.nii.gz"
/// t2 = "case_000/case_000_t2.nii.gz"
/// flair = "case_000/case_000_flair.nii.gz"
/// seg = "case_000/case_000_seg.nii.gz"
/// ```
///
/// Relative paths are resolved against the manifest's directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    #[serde(default, rename = "case")]
    pub cases: Vec<CaseFiles>,
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        let de = toml::Deserializer::parse(&text).map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
        let manifest: DatasetManifest = serde_path_to_error::deserialize(de)
            .map_err(|e| Error::config(e.path().to_string(), e.inner().to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut seen = BTreeMap::new();
        let mut cases = Vec::with_capacity(manifest.cases.len());
        for c in manifest.cases {
            if seen.insert(c.id.clone(), ()).is_some() {
                return Err(Error::config("case.id", format!("duplicate case id {}", c.id)));
            }
            cases.push(c.resolved_against(base));
        }
        Ok(Self { cases })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = toml::to_string(self).map_err(|e| Error::InvalidData(e.to_string()))?;
        std::fs::write(path, text).map_err(Error::io(path))
    }

    /// One case per subdirectory of `root` (sorted by name), named by `layout`.
    pub fn scan(root: impl AsRef<Path>, layout: &CaseLayout) -> Result<Self> {
        let root = root.as_ref();
        let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
            .map_err(Error::io(root))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        dirs.sort();
        Ok(Self { cases: dirs.iter().map(|d| layout.files(d)).collect() })
    }

    pub fn ids(&self) -> Vec<String> {
        self.cases.iter().map(|c| c.id.clone()).collect()
    }

    pub fn get(&self, id: &str) -> Option<&CaseFiles> {
        self.cases.iter().find(|c| c.id == id)
    }
}

/// Load the case stored in `case_directory` using the default layout.
pub fn load_case(case_directory: impl AsRef<Path>) -> Result<(MultimodalVolume, Option<LabelVolume>)> {
    load_case_files(&CaseLayout::default().files(case_directory.as_ref()))
}

pub fn load_case_files(files: &CaseFiles) -> Result<(MultimodalVolume, Option<LabelVolume>)> {
    let mut grids = Vec::with_capacity(4);
    let mut reference: Option<(NiftiHeader, [usize; 3])> = None;
    for (path, name) in files.modality_paths().into_iter().zip(MODALITY_NAMES) {
        let resolved = nifti::resolve(path).ok_or_else(|| Error::MissingModality {
            case: files.id.clone(),
            modality: name,
            path: path.to_path_buf(),
        })?;
        let img = nifti::read(&resolved)?;
        let dims = img
            .dims3()
            .ok_or_else(|| Error::GeometryMismatch(format!("{name} is not a 3-D volume: {:?}", img.dims)))?;
        match &reference {
            None => reference = Some((img.header.clone(), dims)),
            Some((h, d)) => check_geometry(h, *d, &img.header, dims, name)?,
        }
        grids.push(Grid3::new(dims, img.data.iter().map(|&v| v as f32).collect())?);
    }
    let (header, dims) = reference.expect("four modalities were read");
    let modalities: [Grid3<f32>; 4] = grids.try_into().expect("four modalities");
    let volume = MultimodalVolume::new(modalities, header.spacing(), header.axial_axis())?.with_header(header.clone());

    let labels = match files.seg.as_deref().and_then(nifti::resolve) {
        None => None,
        Some(path) => {
            let img = nifti::read(&path)?;
            let ldims = img.dims3().ok_or_else(|| Error::GeometryMismatch("label map is not 3-D".into()))?;
            check_geometry(&header, dims, &img.header, ldims, "seg")?;
            Some(LabelVolume::from_values(ldims, &img.data)?)
        }
    };
    Ok((volume, labels))
}

fn check_geometry(reference: &NiftiHeader, dims: [usize; 3], other: &NiftiHeader, odims: [usize; 3], name: &str) -> Result<()> {
    if dims != odims {
        return Err(Error::GeometryMismatch(format!("{name} has shape {odims:?}, expected {dims:?}")));
    }
    let (a, b) = (reference.spacing(), other.spacing());
    if (0..3).any(|i| (a[i] - b[i]).abs() > 1e-4 * a[i].max(1.0)) {
        return Err(Error::GeometryMismatch(format!("{name} has spacing {b:?}, expected {a:?}")));
    }
    Ok(())
}
