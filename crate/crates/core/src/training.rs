//! Optimization: Adam with bias correction, slice augmentation, the
//! detector and zonal training loops, and FROC-based model selection.
//!
//! Training is bitwise reproducible: slice order, augmentation draws and
//! initialization all derive from the master seed through tagged substreams,
//! and every parallel reduction accumulates in a fixed order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::detector::{two_threshold_detect, DetectorParams};
use crate::error::{Error, Result};
use crate::froc::{average_sensitivity, froc_curve, match_candidates, FrocCurve, MatchResult};
use crate::nets::{
    build_unet2d, build_unet3d_aniso, forward_detector, Network, Param, UNet2DConfig, UNet3DConfig,
};
use crate::rng::{substream, NormalSource};
use crate::volume::{PatientCase, Volume3, CHANNEL_T2W};
use crate::zonal::ZonalMap;

const TAG_NET_INIT: u64 = 0x696e6974;
const TAG_EPOCH_SHUFFLE: u64 = 0x73687566;
const TAG_AUGMENT: u64 = 0x617567;

// --- Adam --------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 1e-5, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Per-parameter first and second moment estimates plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &[Param]) -> Self {
        AdamState {
            m: params.iter().map(|p| vec![0.0; p.values.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.values.len()]).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One Adam update with bias correction:
/// `m <- b1 m + (1-b1) g; v <- b2 v + (1-b2) g^2;`
/// `theta <- theta - lr * m_hat / (sqrt(v_hat) + eps)`.
pub fn adam_step(
    params: &mut [Param],
    grads: &[Vec<f64>],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} params, {} grads, {} states", params.len(), grads.len(), state.m.len()),
        ));
    }
    for (p, g) in params.iter().zip(grads.iter()) {
        if p.values.len() != g.len() {
            return Err(Error::shape(
                "adam_step",
                format!("param {} has {} values, grad has {}", p.name, p.values.len(), g.len()),
            ));
        }
        if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "adam_step".into(),
                details: format!("gradient of {} contains {bad}", p.name),
            });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads.iter())
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for i in 0..g.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p.values[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

// --- augmentation --------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub mirror: bool,
    pub translate: bool,
    /// Maximum in-plane translation, voxels per axis.
    pub max_translate: i64,
    pub intensity: bool,
    pub scale_range: (f64, f64),
    pub noise: bool,
    pub noise_sigma: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            mirror: true,
            translate: true,
            max_translate: 8,
            intensity: true,
            scale_range: (0.9, 1.1),
            noise: true,
            noise_sigma: 0.02,
        }
    }
}

impl AugmentConfig {
    /// Identity augmentation (all switches off).
    pub fn off() -> Self {
        AugmentConfig {
            mirror: false,
            translate: false,
            intensity: false,
            noise: false,
            ..Default::default()
        }
    }
}

/// One 2D training sample: image channels, optional zonal channels, and the
/// binary lesion label plane, all row-major `[y][x]` per channel.
#[derive(Debug, Clone)]
pub struct SliceSample {
    pub nx: usize,
    pub ny: usize,
    pub image_channels: usize,
    pub image: Vec<f64>,
    /// Two channels (TZ, PZ) when fusion is active, empty otherwise.
    pub zonal: Vec<f64>,
    pub labels: Vec<f64>,
}

impl SliceSample {
    fn plane(&self) -> usize {
        self.nx * self.ny
    }
}

fn mirror_x(plane: &mut [f64], nx: usize, ny: usize) {
    for y in 0..ny {
        plane[y * nx..(y + 1) * nx].reverse();
    }
}

fn translate_plane(plane: &[f64], nx: usize, ny: usize, dx: i64, dy: i64) -> Vec<f64> {
    let mut out = vec![0.0; plane.len()];
    for y in 0..ny as i64 {
        let sy = y - dy;
        if sy < 0 || sy >= ny as i64 {
            continue;
        }
        for x in 0..nx as i64 {
            let sx = x - dx;
            if sx < 0 || sx >= nx as i64 {
                continue;
            }
            out[(y * nx as i64 + x) as usize] = plane[(sy * nx as i64 + sx) as usize];
        }
    }
    out
}

/// Randomized augmentation. Geometric transforms (mirror, integer
/// translation) apply identically to image channels, zonal channels and the
/// label mask; intensity scaling and Gaussian noise touch image channels
/// only, so masks stay binary and zonal probabilities stay in [0, 1].
pub fn augment(sample: &mut SliceSample, cfg: &AugmentConfig, rng: &mut ChaCha12Rng) {
    let (nx, ny) = (sample.nx, sample.ny);
    let plane = sample.plane();
    if cfg.mirror && rng.gen_bool(0.5) {
        for ch in sample.image.chunks_mut(plane) {
            mirror_x(ch, nx, ny);
        }
        for ch in sample.zonal.chunks_mut(plane) {
            mirror_x(ch, nx, ny);
        }
        mirror_x(&mut sample.labels, nx, ny);
    }
    if cfg.translate {
        let dx = rng.gen_range(-cfg.max_translate..=cfg.max_translate);
        let dy = rng.gen_range(-cfg.max_translate..=cfg.max_translate);
        if dx != 0 || dy != 0 {
            for ch in sample.image.chunks_mut(plane) {
                let moved = translate_plane(ch, nx, ny, dx, dy);
                ch.copy_from_slice(&moved);
            }
            for ch in sample.zonal.chunks_mut(plane) {
                let moved = translate_plane(ch, nx, ny, dx, dy);
                ch.copy_from_slice(&moved);
            }
            let moved = translate_plane(&sample.labels, nx, ny, dx, dy);
            sample.labels.copy_from_slice(&moved);
        }
    }
    if cfg.intensity {
        for ch in sample.image.chunks_mut(plane) {
            let scale = rng.gen_range(cfg.scale_range.0..cfg.scale_range.1);
            for v in ch.iter_mut() {
                *v *= scale;
            }
        }
    }
    if cfg.noise {
        let mut normal = NormalSource::new();
        for v in sample.image.iter_mut() {
            *v += cfg.noise_sigma * normal.sample(rng);
        }
    }
}

// --- training configuration ----------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// (background, lesion) loss weights.
    pub class_weights: Vec<f64>,
    /// Slices per optimization step.
    pub batch: usize,
    /// Epochs between validation FROC evaluations.
    pub eval_every: usize,
    /// FP/patient operating points used for model selection.
    pub selection_points: Vec<f64>,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            learning_rate: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            class_weights: vec![1.0, 25.0],
            batch: 4,
            eval_every: 5,
            selection_points: vec![0.5, 1.0, 2.0],
            augment: AugmentConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::invalid("TrainConfig", "learning_rate must be positive"));
        }
        if self.batch == 0 || self.eval_every == 0 {
            return Err(Error::invalid("TrainConfig", "batch and eval_every must be positive"));
        }
        if self.selection_points.is_empty()
            || self
                .selection_points
                .windows(2)
                .any(|w| w[1] <= w[0])
            || self.selection_points[0] <= 0.0
        {
            return Err(Error::invalid(
                "TrainConfig",
                "selection_points must be strictly increasing and positive",
            ));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

/// Snapshot of the model taken at a validation point.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub epoch: usize,
    pub params: Vec<Vec<f64>>,
    pub val_avg_sensitivity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_avg_sensitivity: Option<f64>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// The network loaded with the best checkpoint's weights.
    pub network: Network,
    pub checkpoints: Vec<Checkpoint>,
    /// Index of the selected checkpoint (max validation average, earliest on ties).
    pub best: usize,
    pub log: Vec<TrainLogRow>,
}

/// `training_log.csv` rows: epoch, mean_loss, val_avg_sensitivity (empty
/// when the epoch was not evaluated).
pub fn write_training_log(rows: &[TrainLogRow], path: &Path) -> Result<()> {
    let mut out = String::from("epoch,mean_loss,val_avg_sensitivity\n");
    for r in rows {
        let val = r.val_avg_sensitivity.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{}\n", r.epoch, r.mean_loss, val));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

// --- slice assembly and inference ------------------------------------------

/// Zonal channel planes for one case slice, ordered (TZ, PZ).
fn zonal_slice_values(map: &ZonalMap, z: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * map.tz.dims()[0] * map.tz.dims()[1]);
    out.extend(map.tz.slice(z).iter().map(|&v| v as f64));
    out.extend(map.pz.slice(z).iter().map(|&v| v as f64));
    out
}

/// Assemble the training sample for one case slice.
pub fn slice_sample(case: &PatientCase, z: usize, zonal: Option<&ZonalMap>) -> SliceSample {
    let [nx, ny, _] = case.dims();
    let mut image = Vec::with_capacity(3 * nx * ny);
    for ch in &case.channels {
        image.extend(ch.slice(z).iter().map(|&v| v as f64));
    }
    let labels: Vec<f64> =
        case.lesion_mask.slice(z).iter().map(|&v| if v != 0.0 { 1.0 } else { 0.0 }).collect();
    SliceSample {
        nx,
        ny,
        image_channels: 3,
        image,
        zonal: zonal.map(|m| zonal_slice_values(m, z)).unwrap_or_default(),
        labels,
    }
}

fn sample_tensors(sample: &SliceSample) -> Result<(Tensor, Option<Tensor>, Tensor)> {
    let dims = [sample.nx, sample.ny, 1];
    let image = Tensor::activation(sample.image_channels, dims, sample.image.clone())?;
    let zonal = if sample.zonal.is_empty() {
        None
    } else {
        Some(Tensor::activation(2, dims, sample.zonal.clone())?)
    };
    let labels = Tensor::activation(1, dims, sample.labels.clone())?;
    Ok((image, zonal, labels))
}

/// Per-slice inference over a whole case, stacked into a heatmap volume.
pub fn infer_case_heatmap(
    net: &Network,
    case: &PatientCase,
    zonal: Option<&ZonalMap>,
) -> Result<Volume3> {
    let [nx, ny, nz] = case.dims();
    let slices: Vec<Result<Vec<f32>>> = (0..nz)
        .map(|z| {
            let sample = slice_sample(case, z, zonal);
            let (image, zonal_t, _) = sample_tensors(&sample)?;
            let heat = forward_detector(net, &image, zonal_t.as_ref())?;
            Ok(heat.values().iter().map(|&v| v as f32).collect())
        })
        .collect();
    let slices: Vec<Vec<f32>> = slices.into_iter().collect::<Result<_>>()?;
    crate::detector::stack_heatmaps(&slices, [nx, ny], case.spacing())
}

/// Full detection pipeline over a case set: heatmaps, hysteresis candidates,
/// peak matching, FROC. Cases run in parallel; outputs are order-stable.
pub fn evaluate_detection(
    net: &Network,
    cases: &[&PatientCase],
    zonal_maps: Option<&BTreeMap<String, ZonalMap>>,
    det_params: &DetectorParams,
) -> Result<FrocCurve> {
    let results: Vec<Result<MatchResult>> = cases
        .par_iter()
        .map(|case| {
            let zonal = match zonal_maps {
                Some(maps) => Some(maps.get(&case.id).ok_or_else(|| {
                    Error::invalid("evaluate_detection", format!("no zonal map for {}", case.id))
                })?),
                None => None,
            };
            let heat = infer_case_heatmap(net, case, zonal)?;
            let cands = two_threshold_detect(&heat, det_params)?;
            match_candidates(&cands, &case.lesion_mask)
        })
        .collect();
    let results: Vec<MatchResult> = results.into_iter().collect::<Result<_>>()?;
    froc_curve(&results)
}

// --- detector training ------------------------------------------------------

/// Train the 2D slice detector. Every epoch visits every slice of every
/// training case in a seeded shuffled order; every `eval_every` epochs the
/// full detection+FROC pipeline runs on the validation set and a checkpoint
/// is recorded. Returns all checkpoints plus the one maximizing average
/// validation sensitivity at the selection points (earliest epoch on ties).
pub fn train_detector(
    cfg: &TrainConfig,
    net_cfg: &UNet2DConfig,
    train_cases: &[&PatientCase],
    val_cases: &[&PatientCase],
    zonal_maps: Option<&BTreeMap<String, ZonalMap>>,
    det_params: &DetectorParams,
    mut progress: impl FnMut(&TrainLogRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    net_cfg.validate()?;
    if train_cases.is_empty() {
        return Err(Error::invalid("train_detector", "empty training set"));
    }
    let fusion = net_cfg.fusion_mode != crate::nets::FusionMode::None;
    if fusion && zonal_maps.is_none() {
        return Err(Error::invalid("train_detector", "fusion mode requires zonal maps"));
    }
    if !fusion && zonal_maps.is_some() {
        return Err(Error::invalid("train_detector", "baseline must not receive zonal maps"));
    }

    let mut net = build_unet2d(net_cfg, substream(cfg.seed, &[TAG_NET_INIT]).gen())?;
    let mut adam = AdamState::new(&net.params);
    let adam_cfg = cfg.adam();

    let mut slice_ids: Vec<(usize, usize)> = Vec::new();
    for (ci, case) in train_cases.iter().enumerate() {
        for z in 0..case.dims()[2] {
            slice_ids.push((ci, z));
        }
    }

    let mut checkpoints: Vec<Checkpoint> = Vec::new();
    let mut log: Vec<TrainLogRow> = Vec::new();

    let snapshot = |net: &Network, epoch: usize, val: Option<f64>| Checkpoint {
        epoch,
        params: net.params.iter().map(|p| p.values.clone()).collect(),
        val_avg_sensitivity: val,
    };

    let run_validation = |net: &Network| -> Result<Option<f64>> {
        if val_cases.is_empty() {
            return Ok(None);
        }
        let curve = evaluate_detection(net, val_cases, zonal_maps, det_params)?;
        Ok(Some(average_sensitivity(&curve, &cfg.selection_points)?))
    };

    if cfg.epochs == 0 {
        let val = run_validation(&net)?;
        checkpoints.push(snapshot(&net, 0, val));
        return Ok(TrainOutcome { network: net, checkpoints, best: 0, log });
    }

    for epoch in 1..=cfg.epochs {
        let mut order = slice_ids.clone();
        order.shuffle(&mut substream(cfg.seed, &[TAG_EPOCH_SHUFFLE, epoch as u64]));

        let mut loss_sum = 0.0;
        for (step, batch) in order.chunks(cfg.batch).enumerate() {
            // Forward/backward per slice in parallel; gradients are summed
            // in batch order afterwards, so the reduction is deterministic.
            let per_slice: Vec<Result<(f64, Vec<Vec<f64>>)>> = batch
                .par_iter()
                .map(|&(ci, z)| {
                    let case = train_cases[ci];
                    let zonal = match zonal_maps {
                        Some(maps) => Some(maps.get(&case.id).ok_or_else(|| {
                            Error::invalid(
                                "train_detector",
                                format!("no zonal map for {}", case.id),
                            )
                        })?),
                        None => None,
                    };
                    let mut sample = slice_sample(case, z, zonal);
                    let mut rng =
                        substream(cfg.seed, &[TAG_AUGMENT, epoch as u64, ci as u64, z as u64]);
                    augment(&mut sample, &cfg.augment, &mut rng);
                    let (image, zonal_t, labels) = sample_tensors(&sample)?;
                    let mut g = Graph::new();
                    let pass = net.forward(&mut g, image, zonal_t, true)?;
                    let lab = g.leaf(labels, false);
                    let loss = g.weighted_cross_entropy(pass.probs, lab, &cfg.class_weights)?;
                    let loss_value = g.values(loss)[0];
                    g.backward(loss)?;
                    let grads: Vec<Vec<f64>> = pass
                        .param_nodes
                        .iter()
                        .map(|&id| g.grad(id).map(<[f64]>::to_vec).unwrap_or_default())
                        .collect();
                    Ok((loss_value, grads))
                })
                .collect();

            let mut grads: Vec<Vec<f64>> =
                net.params.iter().map(|p| vec![0.0; p.values.len()]).collect();
            let scale = 1.0 / batch.len() as f64;
            for item in per_slice {
                let (loss_value, slice_grads) = item.map_err(|e| {
                    Error::stage(format!("train epoch {epoch} step {step}"), None, e)
                })?;
                if !loss_value.is_finite() {
                    return Err(Error::NonFinite {
                        context: format!("train epoch {epoch} step {step}"),
                        details: format!("loss {loss_value}"),
                    });
                }
                loss_sum += loss_value;
                for (acc, g) in grads.iter_mut().zip(slice_grads) {
                    for (a, b) in acc.iter_mut().zip(g) {
                        *a += scale * b;
                    }
                }
            }
            adam_step(&mut net.params, &grads, &mut adam, &adam_cfg)?;
        }

        let mean_loss = loss_sum / order.len() as f64;
        let evaluate = epoch % cfg.eval_every == 0 || epoch == cfg.epochs;
        let val = if evaluate { run_validation(&net)? } else { None };
        if evaluate {
            checkpoints.push(snapshot(&net, epoch, val));
        }
        let row = TrainLogRow { epoch, mean_loss, val_avg_sensitivity: val };
        progress(&row);
        log.push(row);
    }

    let best = best_checkpoint_index(&checkpoints);
    for (p, values) in net.params.iter_mut().zip(checkpoints[best].params.iter()) {
        p.values = values.clone();
    }
    Ok(TrainOutcome { network: net, checkpoints, best, log })
}

fn best_checkpoint_index(checkpoints: &[Checkpoint]) -> usize {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (i, c) in checkpoints.iter().enumerate() {
        let v = c.val_avg_sensitivity.unwrap_or(f64::NEG_INFINITY);
        if v > best_val {
            best_val = v;
            best = i;
        }
    }
    best
}

/// Pick the checkpoint with the highest average sensitivity over the
/// selection points; ties go to the earliest epoch.
pub fn select_model(
    checkpoints: &[(usize, FrocCurve)],
    selection_points: &[f64],
) -> Result<usize> {
    if checkpoints.is_empty() {
        return Err(Error::invalid("select_model", "no checkpoints"));
    }
    let mut best = 0;
    let mut best_avg = f64::NEG_INFINITY;
    for (i, (_, curve)) in checkpoints.iter().enumerate() {
        let avg = average_sensitivity(curve, selection_points)?;
        if avg > best_avg {
            best_avg = avg;
            best = i;
        }
    }
    Ok(best)
}

// --- zonal segmenter training -----------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ZonalTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// (background, TZ, PZ) loss weights.
    pub class_weights: Vec<f64>,
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for ZonalTrainConfig {
    fn default() -> Self {
        ZonalTrainConfig {
            epochs: 24,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            class_weights: vec![1.0, 4.0, 4.0],
            eval_every: 4,
            seed: 0,
        }
    }
}

fn zonal_case_tensors(case: &PatientCase) -> Result<(Tensor, Tensor)> {
    let dims = case.dims();
    let t2w: Vec<f64> = case.channels[CHANNEL_T2W].voxels().iter().map(|&v| v as f64).collect();
    let gt = case.zonal_gt.as_ref().ok_or_else(|| {
        Error::invalid("train_zonal", format!("case {} has no zonal ground truth", case.id))
    })?;
    let labels: Vec<f64> = gt.voxels().iter().map(|&v| v as f64).collect();
    Ok((
        Tensor::activation(1, dims, t2w)?,
        Tensor::activation(1, dims, labels)?,
    ))
}

/// Train the anisotropic 3D zonal segmenter on whole volumes (one case per
/// step). Checkpoint selection is by best (lowest) validation loss.
pub fn train_zonal(
    cfg: &ZonalTrainConfig,
    net_cfg: &UNet3DConfig,
    train_cases: &[&PatientCase],
    val_cases: &[&PatientCase],
    mut progress: impl FnMut(&TrainLogRow),
) -> Result<TrainOutcome> {
    if train_cases.is_empty() {
        return Err(Error::invalid("train_zonal", "empty training set"));
    }
    let mut net = build_unet3d_aniso(net_cfg, substream(cfg.seed, &[TAG_NET_INIT, 3]).gen())?;
    let mut adam = AdamState::new(&net.params);
    let adam_cfg = AdamConfig {
        learning_rate: cfg.learning_rate,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        epsilon: cfg.epsilon,
    };

    let case_loss = |net: &Network, case: &PatientCase| -> Result<f64> {
        let (t2w, labels) = zonal_case_tensors(case)?;
        let (padded, _) = crate::nets::pad_to_period(&t2w, net.pooling_period())?;
        let (padded_labels, _) = crate::nets::pad_to_period(&labels, net.pooling_period())?;
        let mut g = Graph::new();
        let pass = net.forward(&mut g, padded, None, false)?;
        let lab = g.leaf(padded_labels, false);
        let loss = g.weighted_cross_entropy(pass.probs, lab, &cfg.class_weights)?;
        Ok(g.values(loss)[0])
    };
    let validation_loss = |net: &Network| -> Result<Option<f64>> {
        if val_cases.is_empty() {
            return Ok(None);
        }
        let losses: Vec<Result<f64>> =
            val_cases.par_iter().map(|case| case_loss(net, case)).collect();
        let losses: Vec<f64> = losses.into_iter().collect::<Result<_>>()?;
        Ok(Some(losses.iter().sum::<f64>() / losses.len() as f64))
    };

    let snapshot = |net: &Network, epoch: usize, val: Option<f64>| Checkpoint {
        epoch,
        params: net.params.iter().map(|p| p.values.clone()).collect(),
        // Stored negated so "largest wins" selection picks the lowest loss.
        val_avg_sensitivity: val.map(|l| -l),
    };

    let mut checkpoints = Vec::new();
    let mut log = Vec::new();
    if cfg.epochs == 0 {
        let val = validation_loss(&net)?;
        checkpoints.push(snapshot(&net, 0, val));
        return Ok(TrainOutcome { network: net, checkpoints, best: 0, log });
    }

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_cases.len()).collect();
        order.shuffle(&mut substream(cfg.seed, &[TAG_EPOCH_SHUFFLE, 3, epoch as u64]));
        let mut loss_sum = 0.0;
        for (step, &ci) in order.iter().enumerate() {
            let case = train_cases[ci];
            let (t2w, labels) = zonal_case_tensors(case)?;
            let (padded, _) = crate::nets::pad_to_period(&t2w, net.pooling_period())?;
            let (padded_labels, _) = crate::nets::pad_to_period(&labels, net.pooling_period())?;
            let mut g = Graph::new();
            let pass = net.forward(&mut g, padded, None, true)?;
            let lab = g.leaf(padded_labels, false);
            let loss = g.weighted_cross_entropy(pass.probs, lab, &cfg.class_weights)?;
            let loss_value = g.values(loss)[0];
            if !loss_value.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("train_zonal epoch {epoch} step {step}"),
                    details: format!("loss {loss_value} on case {}", case.id),
                });
            }
            loss_sum += loss_value;
            g.backward(loss)?;
            let grads: Vec<Vec<f64>> = pass
                .param_nodes
                .iter()
                .map(|&id| g.grad(id).map(<[f64]>::to_vec).unwrap_or_default())
                .collect();
            adam_step(&mut net.params, &grads, &mut adam, &adam_cfg)?;
        }
        let mean_loss = loss_sum / order.len() as f64;
        let evaluate = epoch % cfg.eval_every == 0 || epoch == cfg.epochs;
        let val = if evaluate { validation_loss(&net)? } else { None };
        if evaluate {
            checkpoints.push(snapshot(&net, epoch, val));
        }
        let row = TrainLogRow { epoch, mean_loss, val_avg_sensitivity: val.map(|l| -l) };
        progress(&row);
        log.push(row);
    }

    let best = best_checkpoint_index(&checkpoints);
    for (p, values) in net.params.iter_mut().zip(checkpoints[best].params.iter()) {
        p.values = values.clone();
    }
    Ok(TrainOutcome { network: net, checkpoints, best, log })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(name: &str, values: Vec<f64>) -> Param {
        Param { name: name.into(), shape: vec![values.len()], values }
    }

    #[test]
    fn adam_first_step_closed_form() {
        // Fresh state, g = 1: m_hat = v_hat = 1, so the step is
        // -lr / (1 + eps).
        let mut params = vec![param("w", vec![0.5])];
        let mut state = AdamState::new(&params);
        let cfg = AdamConfig::default();
        adam_step(&mut params, &[vec![1.0]], &mut state, &cfg).unwrap();
        let delta = params[0].values[0] - 0.5;
        let expected = -1e-5 / (1.0 + 1e-8);
        assert!((delta - expected).abs() < 1e-18, "delta {delta} vs {expected}");
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut params = vec![param("w", vec![0.25, -0.75])];
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &[vec![0.0, 0.0]], &mut state, &AdamConfig::default()).unwrap();
        assert_eq!(params[0].values, vec![0.25, -0.75]);
    }

    #[test]
    fn adam_first_step_is_scale_invariant() {
        // m_hat / sqrt(v_hat) = sign(g) on the first step, so g = 10 moves
        // the same distance as g = 1 (up to epsilon).
        let run = |g: f64| {
            let mut params = vec![param("w", vec![0.0])];
            let mut state = AdamState::new(&params);
            adam_step(&mut params, &[vec![g]], &mut state, &AdamConfig::default()).unwrap();
            params[0].values[0]
        };
        let d1 = run(1.0);
        let d10 = run(10.0);
        assert!((d1 - d10).abs() < 1e-13, "{d1} vs {d10}");
    }

    #[test]
    fn adam_zero_lr_is_identity() {
        let mut params = vec![param("w", vec![1.0, 2.0, 3.0])];
        let mut state = AdamState::new(&params);
        let cfg = AdamConfig { learning_rate: 0.0, ..Default::default() };
        adam_step(&mut params, &[vec![5.0, -1.0, 0.3]], &mut state, &cfg).unwrap();
        assert_eq!(params[0].values, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn adam_rejects_non_finite_gradient_naming_param() {
        let mut params = vec![param("enc0.conv1.weight", vec![0.0])];
        let mut state = AdamState::new(&params);
        match adam_step(&mut params, &[vec![f64::NAN]], &mut state, &AdamConfig::default()) {
            Err(Error::NonFinite { details, .. }) => assert!(details.contains("enc0.conv1.weight")),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    fn test_sample() -> SliceSample {
        let (nx, ny) = (12, 10);
        let mut labels = vec![0.0; nx * ny];
        labels[5 * nx + 6] = 1.0;
        labels[5 * nx + 7] = 1.0;
        SliceSample {
            nx,
            ny,
            image_channels: 2,
            image: (0..2 * nx * ny).map(|i| (i % 17) as f64 / 17.0).collect(),
            zonal: (0..2 * nx * ny).map(|i| ((i % 5) as f64) / 10.0).collect(),
            labels,
        }
    }

    #[test]
    fn augment_all_off_is_identity() {
        let mut sample = test_sample();
        let original = sample.clone();
        let mut rng = substream(1, &[1]);
        augment(&mut sample, &AugmentConfig::off(), &mut rng);
        assert_eq!(sample.image, original.image);
        assert_eq!(sample.zonal, original.zonal);
        assert_eq!(sample.labels, original.labels);
    }

    #[test]
    fn mirror_twice_is_identity_and_preserves_label_mass() {
        let mut sample = test_sample();
        let original = sample.clone();
        let plane = sample.plane();
        for ch in sample.image.chunks_mut(plane) {
            mirror_x(ch, 12, 10);
        }
        mirror_x(&mut sample.labels, 12, 10);
        let mass: f64 = sample.labels.iter().sum();
        assert_eq!(mass, original.labels.iter().sum::<f64>());
        for ch in sample.image.chunks_mut(plane) {
            mirror_x(ch, 12, 10);
        }
        mirror_x(&mut sample.labels, 12, 10);
        assert_eq!(sample.image, original.image);
        assert_eq!(sample.labels, original.labels);
    }

    #[test]
    fn augment_keeps_masks_binary_and_zonal_in_range() {
        for seed in 0..20 {
            let mut sample = test_sample();
            let mut rng = substream(seed, &[2]);
            augment(&mut sample, &AugmentConfig::default(), &mut rng);
            assert!(sample.labels.iter().all(|&v| v == 0.0 || v == 1.0));
            assert!(sample.zonal.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn augment_is_reproducible_per_stream() {
        let mut a = test_sample();
        let mut b = test_sample();
        augment(&mut a, &AugmentConfig::default(), &mut substream(9, &[5]));
        augment(&mut b, &AugmentConfig::default(), &mut substream(9, &[5]));
        assert_eq!(a.image, b.image);
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn select_model_prefers_highest_average_then_earliest() {
        let curve = |s: f64| FrocCurve { points: vec![(0.0, s)], n_patients: 1, n_lesions: 1 };
        let cks = vec![(10, curve(0.50)), (20, curve(0.70)), (30, curve(0.60))];
        assert_eq!(select_model(&cks, &[0.5, 1.0, 2.0]).unwrap(), 1);

        let cks = vec![(10, curve(0.803)), (20, curve(0.856))];
        assert_eq!(select_model(&cks, &[1.0]).unwrap(), 1);

        let cks = vec![(10, curve(0.7)), (20, curve(0.7))];
        assert_eq!(select_model(&cks, &[1.0]).unwrap(), 0, "ties go to the earlier epoch");

        let single = vec![(5, curve(0.2))];
        assert_eq!(select_model(&single, &[1.0]).unwrap(), 0);
        assert!(select_model(&[], &[1.0]).is_err());
    }
}
