//! Zonal inference products: probabilistic and deterministic TZ/PZ maps from
//! the 3D network, Dice evaluation, and the on-disk map cache shared by all
//! fusion experiments.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::nets::{crop_from_period, pad_to_period, NetConfig, Network};
use crate::volume::{read_volume, write_volume, Volume3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZonalMode {
    Probabilistic,
    Deterministic,
}

/// Per-voxel class information over {background, TZ, PZ}, stored as the TZ
/// and PZ channels (background is implied). Probabilistic maps carry softmax
/// probabilities; deterministic maps are one-hot.
#[derive(Debug, Clone)]
pub struct ZonalMap {
    pub mode: ZonalMode,
    pub tz: Volume3,
    pub pz: Volume3,
}

impl ZonalMap {
    pub fn validate(&self) -> Result<()> {
        if !self.tz.same_grid(&self.pz) {
            return Err(Error::shape("ZonalMap", "TZ and PZ channels on different grids"));
        }
        for i in 0..self.tz.len() {
            let (t, p) = (self.tz.voxels()[i], self.pz.voxels()[i]);
            match self.mode {
                ZonalMode::Probabilistic => {
                    if t < 0.0 || p < 0.0 || t + p > 1.0 + 1e-5 {
                        return Err(Error::invalid(
                            "ZonalMap",
                            format!("voxel {i}: (TZ={t}, PZ={p}) is not a sub-probability pair"),
                        ));
                    }
                }
                ZonalMode::Deterministic => {
                    let ok = (t == 0.0 && p == 0.0) || (t == 1.0 && p == 0.0) || (t == 0.0 && p == 1.0);
                    if !ok {
                        return Err(Error::invalid(
                            "ZonalMap",
                            format!("voxel {i}: (TZ={t}, PZ={p}) is not one-hot"),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> [usize; 3] {
        self.tz.dims()
    }
}

/// Run the 3D zonal net on a T2W-like volume. Input dims are padded to the
/// network's pooling period and cropped back, so the output matches the
/// input grid exactly.
pub fn predict_zones(net3d: &Network, t2w: &Volume3) -> Result<ZonalMap> {
    let NetConfig::Zonal3d(cfg) = &net3d.config else {
        return Err(Error::invalid("predict_zones", "not a zonal 3D network"));
    };
    if cfg.out_classes != 3 {
        return Err(Error::invalid("predict_zones", "zonal net must have 3 classes"));
    }
    let [nx, ny, nz] = t2w.dims();
    let values: Vec<f64> = t2w.voxels().iter().map(|&v| v as f64).collect();
    let input = Tensor::activation(1, [nx, ny, nz], values)?;
    let (padded, orig) = pad_to_period(&input, net3d.pooling_period())?;

    let mut g = Graph::new();
    let pass = net3d.forward(&mut g, padded, None, false)?;
    let shape = g.shape(pass.probs).to_vec();
    let spatial = shape[1] * shape[2] * shape[3];
    let probs = g.values(pass.probs);

    let channel = |class: usize| -> Result<Volume3> {
        let t = Tensor::new(
            vec![1, shape[1], shape[2], shape[3]],
            probs[class * spatial..(class + 1) * spatial].to_vec(),
        )?;
        let cropped = crop_from_period(&t, orig)?;
        Volume3::new([nx, ny, nz], t2w.spacing(), cropped.values().iter().map(|&v| v as f32).collect())
    };
    // Class order: background, TZ, PZ.
    let tz = channel(1)?;
    let pz = channel(2)?;
    Ok(ZonalMap { mode: ZonalMode::Probabilistic, tz, pz })
}

/// Per-voxel argmax over {background = 1 - TZ - PZ, TZ, PZ}; ties resolve to
/// the lowest class index.
pub fn to_deterministic(zm: &ZonalMap) -> Result<ZonalMap> {
    if zm.mode != ZonalMode::Probabilistic {
        return Err(Error::invalid("to_deterministic", "input must be probabilistic"));
    }
    let mut tz = Volume3::zeros(zm.tz.dims(), zm.tz.spacing())?;
    let mut pz = Volume3::zeros(zm.pz.dims(), zm.pz.spacing())?;
    for i in 0..zm.tz.len() {
        let t = zm.tz.voxels()[i] as f64;
        let p = zm.pz.voxels()[i] as f64;
        let bg = 1.0 - t - p;
        let mut best = bg;
        let mut class = 0;
        if t > best {
            best = t;
            class = 1;
        }
        if p > best {
            class = 2;
        }
        match class {
            1 => tz.voxels_mut()[i] = 1.0,
            2 => pz.voxels_mut()[i] = 1.0,
            _ => {}
        }
    }
    Ok(ZonalMap { mode: ZonalMode::Deterministic, tz, pz })
}

/// Dice coefficient 2|A∩B| / (|A| + |B|); 1.0 when both masks are empty.
/// Voxels are members when nonzero.
pub fn dice(pred: &Volume3, gt: &Volume3) -> Result<f64> {
    if pred.dims() != gt.dims() {
        return Err(Error::shape(
            "dice",
            format!("dims {:?} vs {:?}", pred.dims(), gt.dims()),
        ));
    }
    let mut a = 0usize;
    let mut b = 0usize;
    let mut inter = 0usize;
    for (x, y) in pred.voxels().iter().zip(gt.voxels()) {
        let xa = *x != 0.0;
        let yb = *y != 0.0;
        a += usize::from(xa);
        b += usize::from(yb);
        inter += usize::from(xa && yb);
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

/// Cache layout: two volumes per case, stems `<id>.tz` and `<id>.pz`.
pub fn save_zonal_map(map: &ZonalMap, dir: &Path, id: &str) -> Result<()> {
    write_volume(&map.tz, &dir.join(format!("{id}.tz")))?;
    write_volume(&map.pz, &dir.join(format!("{id}.pz")))?;
    Ok(())
}

pub fn load_zonal_map(dir: &Path, id: &str, mode: ZonalMode) -> Result<ZonalMap> {
    let tz = read_volume(&dir.join(format!("{id}.tz")))?;
    let pz = read_volume(&dir.join(format!("{id}.pz")))?;
    let map = ZonalMap { mode, tz, pz };
    map.validate()?;
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{build_unet3d_aniso, UNet3DConfig};
    use crate::rng::substream;
    use rand::Rng;

    fn random_t2w(dims: [usize; 3], seed: u64) -> Volume3 {
        let mut rng = substream(seed, &[0]);
        let n = dims[0] * dims[1] * dims[2];
        Volume3::new(dims, [0.5, 0.5, 3.6], (0..n).map(|_| rng.gen_range(0.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn untrained_net_yields_valid_probabilities() {
        let net = build_unet3d_aniso(&UNet3DConfig { base_filters: 2, ..Default::default() }, 9)
            .unwrap();
        // 10x14x3 is not divisible by the pooling period 4: exercises padding.
        let t2w = random_t2w([10, 14, 3], 1);
        let zm = predict_zones(&net, &t2w).unwrap();
        assert_eq!(zm.dims(), [10, 14, 3]);
        zm.validate().unwrap();
        for i in 0..zm.tz.len() {
            let s = zm.tz.voxels()[i] + zm.pz.voxels()[i];
            assert!(s <= 1.0 + 1e-6);
        }
    }

    #[test]
    fn argmax_and_tie_rules() {
        let grid = |t: f32, p: f32| {
            let tz = Volume3::new([1, 1, 1], [1.0; 3], vec![t]).unwrap();
            let pz = Volume3::new([1, 1, 1], [1.0; 3], vec![p]).unwrap();
            ZonalMap { mode: ZonalMode::Probabilistic, tz, pz }
        };
        let d = to_deterministic(&grid(0.6, 0.3)).unwrap();
        assert_eq!((d.tz.voxels()[0], d.pz.voxels()[0]), (1.0, 0.0));

        // Exact tie between background (0.5) and TZ (0.5): lowest class wins.
        let d = to_deterministic(&grid(0.5, 0.0)).unwrap();
        assert_eq!((d.tz.voxels()[0], d.pz.voxels()[0]), (0.0, 0.0));

        // Exact tie between TZ and PZ (background 0): TZ wins.
        let d = to_deterministic(&grid(0.5, 0.5)).unwrap();
        assert_eq!((d.tz.voxels()[0], d.pz.voxels()[0]), (1.0, 0.0));

        let d = to_deterministic(&grid(0.1, 0.7)).unwrap();
        assert_eq!((d.tz.voxels()[0], d.pz.voxels()[0]), (0.0, 1.0));
    }

    #[test]
    fn to_deterministic_is_idempotent_in_effect() {
        let mut rng = substream(13, &[7]);
        let n = 64;
        let dims = [4, 4, 4];
        let mut tzv = vec![0.0f32; n];
        let mut pzv = vec![0.0f32; n];
        for i in 0..n {
            let t: f64 = rng.gen_range(0.0..1.0);
            let p: f64 = rng.gen_range(0.0..(1.0 - t));
            tzv[i] = t as f32;
            pzv[i] = p as f32;
        }
        let zm = ZonalMap {
            mode: ZonalMode::Probabilistic,
            tz: Volume3::new(dims, [1.0; 3], tzv).unwrap(),
            pz: Volume3::new(dims, [1.0; 3], pzv).unwrap(),
        };
        let once = to_deterministic(&zm).unwrap();
        once.validate().unwrap();
        // Lift the one-hot map back to probabilistic and convert again.
        let lifted = ZonalMap {
            mode: ZonalMode::Probabilistic,
            tz: once.tz.clone(),
            pz: once.pz.clone(),
        };
        let twice = to_deterministic(&lifted).unwrap();
        assert_eq!(once.tz, twice.tz);
        assert_eq!(once.pz, twice.pz);
        // TZ and PZ one-hot masks are disjoint by construction.
        for i in 0..n {
            assert!(once.tz.voxels()[i] * once.pz.voxels()[i] == 0.0);
        }
    }

    #[test]
    fn dice_cases() {
        let ones = Volume3::new([2, 2, 1], [1.0; 3], vec![1.0; 4]).unwrap();
        let zeros = Volume3::zeros([2, 2, 1], [1.0; 3]).unwrap();
        assert_eq!(dice(&ones, &ones).unwrap(), 1.0);
        assert_eq!(dice(&zeros, &zeros).unwrap(), 1.0, "both empty counts as agreement");

        let a = Volume3::new([4, 1, 1], [1.0; 3], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let b = Volume3::new([4, 1, 1], [1.0; 3], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        assert_eq!(dice(&a, &b).unwrap(), 0.0);

        // |A| = |B| = 4, overlap 2 -> 2*2 / 8 = 0.5.
        let a = Volume3::new([8, 1, 1], [1.0; 3], vec![1., 1., 1., 1., 0., 0., 0., 0.]).unwrap();
        let b = Volume3::new([8, 1, 1], [1.0; 3], vec![0., 0., 1., 1., 1., 1., 0., 0.]).unwrap();
        assert_eq!(dice(&a, &b).unwrap(), 0.5);
        assert_eq!(dice(&b, &a).unwrap(), 0.5, "dice is symmetric");
    }

    #[test]
    fn zonal_cache_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let net = build_unet3d_aniso(&UNet3DConfig { base_filters: 2, ..Default::default() }, 3)
            .unwrap();
        let t2w = random_t2w([8, 8, 2], 2);
        let zm = predict_zones(&net, &t2w).unwrap();
        save_zonal_map(&zm, dir.path(), "case_0001").unwrap();
        let back = load_zonal_map(dir.path(), "case_0001", ZonalMode::Probabilistic).unwrap();
        assert_eq!(back.tz, zm.tz);
        assert_eq!(back.pz, zm.pz);
    }
}
