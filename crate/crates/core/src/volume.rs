//! Volumetric grids with physical spacing, bit-exact file I/O, resampling,
//! cropping, and patient-level stratified splitting.
//!
//! On disk a volume is a two-file pair: `<stem>.volhdr.json` (dims, spacing,
//! dtype, ordering) and `<stem>.volraw` (little-endian f32, x varying
//! fastest, then y, then z).

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::substream;

/// A 3D scalar grid with physical voxel spacing in mm. Voxels are stored
/// x-fastest, then y, then z.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3 {
    dims: [usize; 3],
    spacing: [f64; 3],
    voxels: Vec<f32>,
}

impl Volume3 {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], voxels: Vec<f32>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid("Volume3::new", format!("dims {dims:?} must be positive")));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::invalid(
                "Volume3::new",
                format!("spacing {spacing:?} must be strictly positive and finite"),
            ));
        }
        let n = dims[0] * dims[1] * dims[2];
        if voxels.len() != n {
            return Err(Error::shape(
                "Volume3::new",
                format!("dims {dims:?} imply {n} voxels, got {}", voxels.len()),
            ));
        }
        Ok(Volume3 { dims, spacing, voxels })
    }

    pub fn zeros(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        let n = dims[0] * dims[1] * dims[2];
        Self::new(dims, spacing, vec![0.0; n])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn voxels_mut(&mut self) -> &mut [f32] {
        &mut self.voxels
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    /// Volume of one voxel in mm^3.
    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing[0] * self.spacing[1] * self.spacing[2]
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[0] + x
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [index % nx, (index / nx) % ny, index / (nx * ny)]
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.voxels[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f32) {
        let i = self.index(x, y, z);
        self.voxels[i] = v;
    }

    /// The z-slice as a contiguous row-major (y, x) view.
    pub fn slice(&self, z: usize) -> &[f32] {
        let n = self.dims[0] * self.dims[1];
        &self.voxels[z * n..(z + 1) * n]
    }

    pub fn same_grid(&self, other: &Volume3) -> bool {
        self.dims == other.dims && self.spacing == other.spacing
    }
}

const VOL_HEADER_SUFFIX: &str = ".volhdr.json";
const VOL_RAW_SUFFIX: &str = ".volraw";

#[derive(Debug, Serialize, Deserialize)]
struct VolumeHeader {
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    dtype: String,
    order: String,
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Write `vol` as the `<stem>.volhdr.json` / `<stem>.volraw` pair.
/// Identical volumes produce byte-identical files.
pub fn write_volume(vol: &Volume3, stem: &Path) -> Result<()> {
    let header = VolumeHeader {
        dims: vol.dims,
        spacing_mm: vol.spacing,
        dtype: "f32le".to_owned(),
        order: "x-fastest".to_owned(),
    };
    let hdr_path = with_suffix(stem, VOL_HEADER_SUFFIX);
    let raw_path = with_suffix(stem, VOL_RAW_SUFFIX);
    let hdr_bytes = serde_json::to_vec_pretty(&header)
        .map_err(|e| Error::Json { path: hdr_path.clone(), source: e })?;
    fs::write(&hdr_path, hdr_bytes).map_err(|e| Error::io(&hdr_path, e))?;
    let mut raw = Vec::with_capacity(vol.voxels.len() * 4);
    for v in &vol.voxels {
        raw.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&raw_path, raw).map_err(|e| Error::io(&raw_path, e))?;
    Ok(())
}

/// Read the two-file pair written by [`write_volume`]. Round-trips bit-exactly.
pub fn read_volume(stem: &Path) -> Result<Volume3> {
    let hdr_path = with_suffix(stem, VOL_HEADER_SUFFIX);
    let raw_path = with_suffix(stem, VOL_RAW_SUFFIX);
    let hdr_bytes = fs::read(&hdr_path).map_err(|e| Error::io(&hdr_path, e))?;
    let header: VolumeHeader = serde_json::from_slice(&hdr_bytes)
        .map_err(|e| Error::Json { path: hdr_path.clone(), source: e })?;

    if header.dtype != "f32le" {
        return Err(Error::VolumeHeader {
            path: hdr_path,
            reason: format!("field 'dtype': unsupported value '{}'", header.dtype),
        });
    }
    if header.order != "x-fastest" {
        return Err(Error::VolumeHeader {
            path: hdr_path,
            reason: format!("field 'order': unsupported value '{}'", header.order),
        });
    }
    if header.dims.iter().any(|&d| d == 0) {
        return Err(Error::VolumeHeader {
            path: hdr_path,
            reason: format!("field 'dims': {:?} must be positive", header.dims),
        });
    }
    if header.spacing_mm.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
        return Err(Error::VolumeHeader {
            path: hdr_path,
            reason: format!(
                "field 'spacing_mm': {:?} must be strictly positive and finite",
                header.spacing_mm
            ),
        });
    }

    let raw = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    let expected = header.dims[0] * header.dims[1] * header.dims[2];
    if raw.len() != expected * 4 {
        return Err(Error::VolumePayloadSize {
            path: raw_path,
            expected,
            expected_bytes: expected * 4,
            actual_bytes: raw.len(),
        });
    }
    let voxels: Vec<f32> = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Volume3::new(header.dims, header.spacing_mm, voxels)
}

/// Trilinear resampling onto `target_spacing`, voxel-center aligned, with
/// clamp-to-edge outside the source extent. Output dims are
/// `round(dims_in * spacing_in / spacing_out)` per axis (at least 1).
pub fn resample(vol: &Volume3, target_spacing: [f64; 3]) -> Result<Volume3> {
    if target_spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
        return Err(Error::invalid(
            "resample",
            format!("target spacing {target_spacing:?} must be strictly positive"),
        ));
    }
    let src = vol.dims;
    let mut dims = [0usize; 3];
    // ratio[a] maps output voxel-center index to source index space; when the
    // spacings are equal the ratio is exactly 1.0, making the map the identity.
    let mut ratio = [0f64; 3];
    for a in 0..3 {
        ratio[a] = target_spacing[a] / vol.spacing[a];
        dims[a] = ((src[a] as f64 * vol.spacing[a] / target_spacing[a]).round() as usize).max(1);
    }
    let mut out = Volume3::zeros(dims, target_spacing)?;

    let (nx, ny, nz) = (src[0], src[1], src[2]);
    let clampf = |u: f64, n: usize| u.max(0.0).min((n - 1) as f64);
    for z in 0..dims[2] {
        let uz = clampf((z as f64 + 0.5) * ratio[2] - 0.5, nz);
        let z0 = uz.floor() as usize;
        let z1 = (z0 + 1).min(nz - 1);
        let fz = uz - z0 as f64;
        for y in 0..dims[1] {
            let uy = clampf((y as f64 + 0.5) * ratio[1] - 0.5, ny);
            let y0 = uy.floor() as usize;
            let y1 = (y0 + 1).min(ny - 1);
            let fy = uy - y0 as f64;
            for x in 0..dims[0] {
                let ux = clampf((x as f64 + 0.5) * ratio[0] - 0.5, nx);
                let x0 = ux.floor() as usize;
                let x1 = (x0 + 1).min(nx - 1);
                let fx = ux - x0 as f64;

                let c = [
                    vol.at(x0, y0, z0) as f64,
                    vol.at(x1, y0, z0) as f64,
                    vol.at(x0, y1, z0) as f64,
                    vol.at(x1, y1, z0) as f64,
                    vol.at(x0, y0, z1) as f64,
                    vol.at(x1, y0, z1) as f64,
                    vol.at(x0, y1, z1) as f64,
                    vol.at(x1, y1, z1) as f64,
                ];
                let w = [
                    (1.0 - fx) * (1.0 - fy) * (1.0 - fz),
                    fx * (1.0 - fy) * (1.0 - fz),
                    (1.0 - fx) * fy * (1.0 - fz),
                    fx * fy * (1.0 - fz),
                    (1.0 - fx) * (1.0 - fy) * fz,
                    fx * (1.0 - fy) * fz,
                    (1.0 - fx) * fy * fz,
                    fx * fy * fz,
                ];
                let mut v: f64 = 0.0;
                let mut lo = c[0];
                let mut hi = c[0];
                for k in 0..8 {
                    v += w[k] * c[k];
                    lo = lo.min(c[k]);
                    hi = hi.max(c[k]);
                }
                // Convex combination; clamp shields against rounding overshoot.
                out.set(x, y, z, v.clamp(lo, hi) as f32);
            }
        }
    }
    Ok(out)
}

/// In-plane center crop (or zero-pad) to a physical extent in mm; z is
/// unchanged. Output in-plane dims are `round(extent_mm / spacing)`.
/// The window is centered on the grid center, ties toward the lower index.
pub fn center_crop(vol: &Volume3, extent_mm: [f64; 2]) -> Result<Volume3> {
    if extent_mm.iter().any(|&e| !(e.is_finite() && e > 0.0)) {
        return Err(Error::invalid(
            "center_crop",
            format!("extent {extent_mm:?} must be positive"),
        ));
    }
    let [nx, ny, nz] = vol.dims;
    let ox = (extent_mm[0] / vol.spacing[0]).round() as usize;
    let oy = (extent_mm[1] / vol.spacing[1]).round() as usize;
    let ox = ox.max(1);
    let oy = oy.max(1);
    let mut out = Volume3::zeros([ox, oy, nz], vol.spacing)?;

    // Source index of output index 0 along one axis; floor biases exact
    // half-voxel ties toward the lower source index.
    let start = |n_in: usize, n_out: usize| -> i64 { (n_in as i64 - n_out as i64).div_euclid(2) };
    let sx = start(nx, ox);
    let sy = start(ny, oy);

    for z in 0..nz {
        for y in 0..oy {
            let yy = sy + y as i64;
            if yy < 0 || yy >= ny as i64 {
                continue;
            }
            for x in 0..ox {
                let xx = sx + x as i64;
                if xx < 0 || xx >= nx as i64 {
                    continue;
                }
                let v = vol.at(xx as usize, yy as usize, z);
                out.set(x, y, z, v);
            }
        }
    }
    Ok(out)
}

/// One synthetic patient: three image channels (T2W-, ADC-, and high-b-DWI-
/// like), a labeled lesion mask, and optional zonal ground truth.
#[derive(Debug, Clone)]
pub struct PatientCase {
    pub id: String,
    /// Channel order: [T2W, ADC, DWI].
    pub channels: [Volume3; 3],
    /// 0 = background, 1..=K = lesion labels.
    pub lesion_mask: Volume3,
    /// 0 = background, 1 = TZ, 2 = PZ.
    pub zonal_gt: Option<Volume3>,
    pub has_cspca: bool,
}

pub const CHANNEL_T2W: usize = 0;
pub const CHANNEL_ADC: usize = 1;
pub const CHANNEL_DWI: usize = 2;
pub const CHANNEL_NAMES: [&str; 3] = ["t2w", "adc", "dwi"];

impl PatientCase {
    pub fn validate(&self) -> Result<()> {
        for (i, ch) in self.channels.iter().enumerate() {
            if !ch.same_grid(&self.channels[0]) {
                return Err(Error::shape(
                    "PatientCase",
                    format!("channel {i} grid differs from channel 0 in case {}", self.id),
                ));
            }
        }
        if !self.lesion_mask.same_grid(&self.channels[0]) {
            return Err(Error::shape(
                "PatientCase",
                format!("lesion mask grid differs from channels in case {}", self.id),
            ));
        }
        if let Some(z) = &self.zonal_gt {
            if !z.same_grid(&self.channels[0]) {
                return Err(Error::shape(
                    "PatientCase",
                    format!("zonal grid differs from channels in case {}", self.id),
                ));
            }
        }
        let nonzero = self.lesion_mask.voxels().iter().any(|&v| v != 0.0);
        if nonzero != self.has_cspca {
            return Err(Error::invalid(
                "PatientCase",
                format!(
                    "case {}: has_cspca={} inconsistent with lesion mask (nonzero={})",
                    self.id, self.has_cspca, nonzero
                ),
            ));
        }
        Ok(())
    }

    pub fn dims(&self) -> [usize; 3] {
        self.channels[0].dims()
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.channels[0].spacing()
    }
}

/// Per-case file manifest. Stems are relative to the manifest's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseManifest {
    pub id: String,
    pub channels: [String; 3],
    pub lesion_mask: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub zonal_gt: Option<String>,
    pub has_cspca: bool,
}

/// Write every volume of a case plus its manifest into `dir`.
pub fn write_case(case: &PatientCase, dir: &Path) -> Result<CaseManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut channels: [String; 3] = Default::default();
    for (i, name) in CHANNEL_NAMES.iter().enumerate() {
        let stem = format!("{}.{}", case.id, name);
        write_volume(&case.channels[i], &dir.join(&stem))?;
        channels[i] = stem;
    }
    let mask_stem = format!("{}.mask", case.id);
    write_volume(&case.lesion_mask, &dir.join(&mask_stem))?;
    let zonal_gt = match &case.zonal_gt {
        Some(z) => {
            let stem = format!("{}.zones", case.id);
            write_volume(z, &dir.join(&stem))?;
            Some(stem)
        }
        None => None,
    };
    let manifest = CaseManifest {
        id: case.id.clone(),
        channels,
        lesion_mask: mask_stem,
        zonal_gt,
        has_cspca: case.has_cspca,
    };
    let path = dir.join(format!("{}.case.json", case.id));
    let bytes = serde_json::to_vec_pretty(&manifest)
        .map_err(|e| Error::Json { path: path.clone(), source: e })?;
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_case(dir: &Path, id: &str) -> Result<PatientCase> {
    let path = dir.join(format!("{id}.case.json"));
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CaseManifest =
        serde_json::from_slice(&bytes).map_err(|e| Error::Json { path, source: e })?;
    let channels = [
        read_volume(&dir.join(&manifest.channels[0]))?,
        read_volume(&dir.join(&manifest.channels[1]))?,
        read_volume(&dir.join(&manifest.channels[2]))?,
    ];
    let lesion_mask = read_volume(&dir.join(&manifest.lesion_mask))?;
    let zonal_gt = match &manifest.zonal_gt {
        Some(stem) => Some(read_volume(&dir.join(stem))?),
        None => None,
    };
    let case = PatientCase {
        id: manifest.id,
        channels,
        lesion_mask,
        zonal_gt,
        has_cspca: manifest.has_cspca,
    };
    case.validate()?;
    Ok(case)
}

/// Train/val/test ratio shares.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct SplitRatios {
    pub train: u32,
    pub val: u32,
    pub test: u32,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios { train: 3, val: 1, test: 1 }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        if self.train == 0 || self.val == 0 || self.test == 0 {
            return Err(Error::invalid("SplitRatios", "all ratio shares must be positive"));
        }
        Ok(())
    }
}

/// Largest-remainder apportionment of `total` items over the three ratio
/// shares. Residual units go to the largest fractional parts; equal
/// fractional parts are served in declaration order (train, val, test).
pub fn apportion(total: usize, ratios: &SplitRatios) -> [usize; 3] {
    let shares = [ratios.train as f64, ratios.val as f64, ratios.test as f64];
    let sum: f64 = shares.iter().sum();
    let exact: Vec<f64> = shares.iter().map(|s| total as f64 * s / sum).collect();
    let mut counts = [0usize; 3];
    let mut fracs = [0f64; 3];
    let mut assigned = 0usize;
    for i in 0..3 {
        counts[i] = exact[i].floor() as usize;
        fracs[i] = exact[i] - counts[i] as f64;
        assigned += counts[i];
    }
    let mut order = [0usize, 1, 2];
    // Stable sort keeps declaration order among equal fractional parts.
    order.sort_by(|&a, &b| fracs[b].partial_cmp(&fracs[a]).unwrap());
    let mut residual = total - assigned;
    for &i in &order {
        if residual == 0 {
            break;
        }
        counts[i] += 1;
        residual -= 1;
    }
    counts
}

const SPLIT_STREAM_TAG: u64 = 0x53504c49;

/// Split case indices into train/val/test with positives and negatives
/// apportioned independently (stratified sampling). Deterministic in the seed.
pub fn split_indices(positive: &[bool], ratios: &SplitRatios, seed: u64) -> Result<[Vec<usize>; 3]> {
    if positive.is_empty() {
        return Err(Error::invalid("stratified_split", "case list is empty"));
    }
    ratios.validate()?;
    let mut pos: Vec<usize> = (0..positive.len()).filter(|&i| positive[i]).collect();
    let mut neg: Vec<usize> = (0..positive.len()).filter(|&i| !positive[i]).collect();

    let mut rng = substream(seed, &[SPLIT_STREAM_TAG]);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);

    let mut sets: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for stratum in [pos, neg] {
        let counts = apportion(stratum.len(), ratios);
        let mut offset = 0;
        for (set, &count) in sets.iter_mut().zip(counts.iter()) {
            set.extend_from_slice(&stratum[offset..offset + count]);
            offset += count;
        }
    }
    for set in sets.iter_mut() {
        set.sort_unstable();
    }
    Ok(sets)
}

/// Stratified 3:1:1-style split of patients; positives and negatives are
/// apportioned independently by largest remainder and shuffled by the seed.
pub fn stratified_split<'a>(
    cases: &'a [PatientCase],
    ratios: &SplitRatios,
    seed: u64,
) -> Result<[Vec<&'a PatientCase>; 3]> {
    let flags: Vec<bool> = cases.iter().map(|c| c.has_cspca).collect();
    let idx = split_indices(&flags, ratios, seed)?;
    Ok(idx.map(|set| set.into_iter().map(|i| &cases[i]).collect()))
}
