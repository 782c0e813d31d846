//! Candidate extraction: stack per-slice heatmaps into a volume, label
//! connected components, and apply the two-threshold (hysteresis) method to
//! produce scored lesion candidates.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume3;

/// Neighborhood used for component labeling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    Six,
    Eighteen,
    TwentySix,
}

impl TryFrom<u8> for Connectivity {
    type Error = String;
    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            6 => Ok(Connectivity::Six),
            18 => Ok(Connectivity::Eighteen),
            26 => Ok(Connectivity::TwentySix),
            other => Err(format!("connectivity must be 6, 18 or 26, got {other}")),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Six => 6,
            Connectivity::Eighteen => 18,
            Connectivity::TwentySix => 26,
        }
    }
}

impl Connectivity {
    fn offsets(self) -> Vec<[i32; 3]> {
        let mut out = Vec::new();
        for dz in -1i32..=1 {
            for dy in -1i32..=1 {
                for dx in -1i32..=1 {
                    if dx == 0 && dy == 0 && dz == 0 {
                        continue;
                    }
                    let order = dx.abs() + dy.abs() + dz.abs();
                    let keep = match self {
                        Connectivity::Six => order == 1,
                        Connectivity::Eighteen => order <= 2,
                        Connectivity::TwentySix => true,
                    };
                    if keep {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorParams {
    pub t_low: f64,
    pub t_high: f64,
    pub min_voxels: usize,
    pub connectivity: Connectivity,
}

impl Default for DetectorParams {
    fn default() -> Self {
        DetectorParams {
            t_low: 0.15,
            t_high: 0.35,
            min_voxels: 4,
            connectivity: Connectivity::TwentySix,
        }
    }
}

impl DetectorParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.t_low)
            || !(0.0..=1.0).contains(&self.t_high)
            || self.t_low > self.t_high
        {
            return Err(Error::invalid(
                "DetectorParams",
                format!("need 0 <= t_low <= t_high <= 1, got ({}, {})", self.t_low, self.t_high),
            ));
        }
        if self.min_voxels == 0 {
            return Err(Error::invalid("DetectorParams", "min_voxels must be at least 1"));
        }
        Ok(())
    }
}

/// A connected heatmap component with its probability score.
#[derive(Debug, Clone)]
pub struct CandidateLesion {
    /// Linear voxel indices into the heatmap grid, ascending.
    pub voxels: Vec<usize>,
    /// Maximum heatmap value over the component.
    pub score: f64,
    /// Voxel attaining the maximum (smallest linear index on ties).
    pub peak_index: usize,
    pub volume_mm3: f64,
}

/// Stack z-ordered 2D maps into a volume; slice `i` lands at z-index `i`.
pub fn stack_heatmaps(
    slices: &[Vec<f32>],
    in_plane_dims: [usize; 2],
    spacing: [f64; 3],
) -> Result<Volume3> {
    if slices.is_empty() {
        return Err(Error::invalid("stack_heatmaps", "no slices given"));
    }
    let [nx, ny] = in_plane_dims;
    let plane = nx * ny;
    let mut voxels = Vec::with_capacity(plane * slices.len());
    for (i, s) in slices.iter().enumerate() {
        if s.len() != plane {
            return Err(Error::shape(
                "stack_heatmaps",
                format!("slice {i} holds {} values, expected {nx}x{ny}={plane}", s.len()),
            ));
        }
        voxels.extend_from_slice(s);
    }
    Volume3::new([nx, ny, slices.len()], spacing, voxels)
}

/// Label maximal connected regions of ones. Labels are assigned in ascending
/// order of each component's smallest linear index; zeros stay zero.
pub fn connected_components(
    binary: &Volume3,
    connectivity: Connectivity,
) -> Result<(Volume3, usize)> {
    for (i, &v) in binary.voxels().iter().enumerate() {
        if v != 0.0 && v != 1.0 {
            return Err(Error::invalid(
                "connected_components",
                format!("voxel {i} holds {v}, input must be binary"),
            ));
        }
    }
    let mask: Vec<bool> = binary.voxels().iter().map(|&v| v != 0.0).collect();
    let (labels, count) = label_mask(&mask, binary.dims(), connectivity);
    let vol = Volume3::new(
        binary.dims(),
        binary.spacing(),
        labels.iter().map(|&l| l as f32).collect(),
    )?;
    Ok((vol, count))
}

fn label_mask(mask: &[bool], dims: [usize; 3], connectivity: Connectivity) -> (Vec<u32>, usize) {
    let [nx, ny, nz] = dims;
    let offsets = connectivity.offsets();
    let mut labels = vec![0u32; mask.len()];
    let mut count = 0u32;
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        count += 1;
        labels[start] = count;
        stack.push(start);
        while let Some(idx) = stack.pop() {
            let x = (idx % nx) as i64;
            let y = ((idx / nx) % ny) as i64;
            let z = (idx / (nx * ny)) as i64;
            for off in &offsets {
                let (qx, qy, qz) = (x + off[0] as i64, y + off[1] as i64, z + off[2] as i64);
                if qx < 0 || qy < 0 || qz < 0 || qx >= nx as i64 || qy >= ny as i64 || qz >= nz as i64
                {
                    continue;
                }
                let q = ((qz as usize * ny) + qy as usize) * nx + qx as usize;
                if mask[q] && labels[q] == 0 {
                    labels[q] = count;
                    stack.push(q);
                }
            }
        }
    }
    (labels, count as usize)
}

/// Hysteresis candidate extraction: connected components of
/// `{v >= t_low}` that contain at least one voxel with `v >= t_high` and at
/// least `min_voxels` voxels. Score is the component maximum. Output is
/// sorted by descending score, ties by smallest peak linear index.
pub fn two_threshold_detect(
    heatmap: &Volume3,
    params: &DetectorParams,
) -> Result<Vec<CandidateLesion>> {
    params.validate()?;
    if let Some((i, &v)) = heatmap
        .voxels()
        .iter()
        .enumerate()
        .find(|(_, &v)| !(0.0..=1.0).contains(&v))
    {
        return Err(Error::invalid(
            "two_threshold_detect",
            format!("heatmap voxel {i} holds {v}, expected a probability in [0, 1]"),
        ));
    }
    let mask: Vec<bool> = heatmap.voxels().iter().map(|&v| (v as f64) >= params.t_low).collect();
    let (labels, count) = label_mask(&mask, heatmap.dims(), params.connectivity);

    let mut voxels_per: Vec<Vec<usize>> = vec![Vec::new(); count];
    for (i, &l) in labels.iter().enumerate() {
        if l > 0 {
            voxels_per[(l - 1) as usize].push(i);
        }
    }
    let voxel_mm3 = heatmap.voxel_volume_mm3();
    let mut cands: Vec<CandidateLesion> = Vec::new();
    for voxels in voxels_per {
        if voxels.len() < params.min_voxels {
            continue;
        }
        let mut peak = voxels[0];
        let mut best = heatmap.voxels()[peak];
        for &v in &voxels[1..] {
            let val = heatmap.voxels()[v];
            if val > best {
                best = val;
                peak = v;
            }
        }
        if (best as f64) < params.t_high {
            continue;
        }
        cands.push(CandidateLesion {
            volume_mm3: voxels.len() as f64 * voxel_mm3,
            voxels,
            score: best as f64,
            peak_index: peak,
        });
    }
    cands.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(a.peak_index.cmp(&b.peak_index))
    });
    Ok(cands)
}

/// Candidate dump: one CSV row per candidate, ranked by score.
pub fn write_candidates_csv(
    path: &Path,
    patient_id: &str,
    candidates: &[CandidateLesion],
    grid: &Volume3,
) -> Result<()> {
    let mut out = String::from(
        "patient_id,candidate_rank,score,peak_x,peak_y,peak_z,voxel_count,volume_mm3\n",
    );
    for (rank, c) in candidates.iter().enumerate() {
        let [x, y, z] = grid.coords(c.peak_index);
        out.push_str(&format!(
            "{patient_id},{},{},{x},{y},{z},{},{}\n",
            rank + 1,
            c.score,
            c.voxels.len(),
            c.volume_mm3
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
