//! Candidate-to-lesion matching, FROC curve construction, and the
//! sensitivity-at-FP-rate operating-point metrics.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::CandidateLesion;
use crate::error::{Error, Result};
use crate::volume::Volume3;

/// Per-patient matching outcome: which ground-truth lesions were detected at
/// which candidate score, and the scores of unmatched (false positive)
/// candidates.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MatchResult {
    /// (ground-truth lesion label, score of the crediting candidate).
    pub detections: Vec<(u32, f64)>,
    pub false_positives: Vec<f64>,
    pub n_lesions: usize,
}

/// Match candidates against a labeled lesion mask. Hit criterion: the
/// candidate's peak voxel lies inside a lesion. Candidates are processed in
/// descending score; a lesion is credited to its highest-scoring hit, and
/// further hits on a credited lesion are discarded (neither TP nor FP).
pub fn match_candidates(
    candidates: &[CandidateLesion],
    gt_lesions: &Volume3,
) -> Result<MatchResult> {
    let n = gt_lesions.len();
    let mut labels = std::collections::BTreeSet::new();
    for &v in gt_lesions.voxels() {
        if v < 0.0 || v.fract() != 0.0 {
            return Err(Error::invalid(
                "match_candidates",
                format!("lesion mask value {v} is not a nonnegative integer label"),
            ));
        }
        if v > 0.0 {
            labels.insert(v as u32);
        }
    }
    let mut order: Vec<&CandidateLesion> = candidates.iter().collect();
    order.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(a.peak_index.cmp(&b.peak_index))
    });

    let mut credited = std::collections::BTreeSet::new();
    let mut result = MatchResult { n_lesions: labels.len(), ..Default::default() };
    for cand in order {
        if cand.peak_index >= n {
            return Err(Error::shape(
                "match_candidates",
                format!("candidate peak {} outside grid of {n} voxels", cand.peak_index),
            ));
        }
        let label = gt_lesions.voxels()[cand.peak_index] as u32;
        if label == 0 {
            result.false_positives.push(cand.score);
        } else if credited.insert(label) {
            result.detections.push((label, cand.score));
        }
        // else: redundant hit on an already-credited lesion, discarded.
    }
    Ok(result)
}

/// Free-response ROC curve: operating points of (false positives per
/// patient, sensitivity), swept over candidate scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrocCurve {
    /// Sorted by strictly increasing fp_per_patient; sensitivity nondecreasing.
    pub points: Vec<(f64, f64)>,
    pub n_patients: usize,
    pub n_lesions: usize,
}

impl FrocCurve {
    pub fn validate(&self) -> Result<()> {
        for w in self.points.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::invalid(
                    "FrocCurve",
                    format!("fp_per_patient not strictly increasing: {} then {}", w[0].0, w[1].0),
                ));
            }
            if w[1].1 < w[0].1 {
                return Err(Error::invalid(
                    "FrocCurve",
                    format!("sensitivity decreasing: {} then {}", w[0].1, w[1].1),
                ));
            }
        }
        for &(fp, s) in &self.points {
            if fp < 0.0 || !(0.0..=1.0).contains(&s) {
                return Err(Error::invalid("FrocCurve", format!("point ({fp}, {s}) out of range")));
            }
        }
        Ok(())
    }
}

/// Build the FROC curve from per-patient match results. One point per
/// distinct candidate score plus the zero-threshold extreme; identical
/// fp values are deduplicated keeping the maximum sensitivity.
pub fn froc_curve(results: &[MatchResult]) -> Result<FrocCurve> {
    if results.is_empty() {
        return Err(Error::invalid("froc_curve", "no patients"));
    }
    let n_patients = results.len();
    let n_lesions: usize = results.iter().map(|r| r.n_lesions).sum();
    if n_lesions == 0 {
        return Err(Error::invalid("froc_curve", "ground truth contains no lesions"));
    }
    let mut det_scores: Vec<f64> = results
        .iter()
        .flat_map(|r| r.detections.iter().map(|&(_, s)| s))
        .collect();
    let mut fp_scores: Vec<f64> =
        results.iter().flat_map(|r| r.false_positives.iter().copied()).collect();
    det_scores.sort_by(|a, b| b.partial_cmp(a).unwrap());
    fp_scores.sort_by(|a, b| b.partial_cmp(a).unwrap());

    let mut thresholds: Vec<f64> = det_scores.iter().chain(fp_scores.iter()).copied().collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();

    let count_ge = |sorted_desc: &[f64], tau: f64| -> usize {
        sorted_desc.partition_point(|&s| s >= tau)
    };

    let mut raw: Vec<(f64, f64)> = Vec::with_capacity(thresholds.len() + 1);
    for &tau in &thresholds {
        let sens = count_ge(&det_scores, tau) as f64 / n_lesions as f64;
        let fp = count_ge(&fp_scores, tau) as f64 / n_patients as f64;
        raw.push((fp, sens));
    }
    // Zero-threshold extreme: every candidate counted.
    raw.push((
        fp_scores.len() as f64 / n_patients as f64,
        det_scores.len() as f64 / n_lesions as f64,
    ));

    let mut points: Vec<(f64, f64)> = Vec::with_capacity(raw.len());
    for (fp, sens) in raw {
        match points.last_mut() {
            Some(last) if last.0 == fp => last.1 = last.1.max(sens),
            _ => points.push((fp, sens)),
        }
    }
    let curve = FrocCurve { points, n_patients, n_lesions };
    curve.validate()?;
    Ok(curve)
}

/// Sensitivity at a false-positive rate: linear interpolation between
/// bracketing points, clamped to the first/last sensitivity outside the
/// curve's range.
pub fn sensitivity_at(curve: &FrocCurve, fp_rate: f64) -> f64 {
    let pts = &curve.points;
    if pts.is_empty() {
        return 0.0;
    }
    if fp_rate <= pts[0].0 {
        return pts[0].1;
    }
    if fp_rate >= pts[pts.len() - 1].0 {
        return pts[pts.len() - 1].1;
    }
    let hi = pts.partition_point(|&(fp, _)| fp < fp_rate);
    let (fp0, s0) = pts[hi - 1];
    let (fp1, s1) = pts[hi];
    if fp1 == fp0 {
        return s1;
    }
    s0 + (s1 - s0) * (fp_rate - fp0) / (fp1 - fp0)
}

/// Arithmetic mean of [`sensitivity_at`] over the operating points.
pub fn average_sensitivity(curve: &FrocCurve, points: &[f64]) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::invalid("average_sensitivity", "no operating points"));
    }
    Ok(points.iter().map(|&fp| sensitivity_at(curve, fp)).sum::<f64>() / points.len() as f64)
}

/// `froc.csv`: one `fp_per_patient,sensitivity` row per curve point.
pub fn write_froc_csv(curve: &FrocCurve, path: &Path) -> Result<()> {
    let mut out = String::from("fp_per_patient,sensitivity\n");
    for &(fp, s) in &curve.points {
        out.push_str(&format!("{fp},{s}\n"));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Format an operating point the way `metrics.json` keys it ("0.5", "1", "2").
pub fn format_fp_point(fp: f64) -> String {
    if fp.fract() == 0.0 {
        format!("{}", fp as i64)
    } else {
        format!("{fp}")
    }
}

/// Operating-point metrics document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Metrics {
    pub sens_at: std::collections::BTreeMap<String, f64>,
    pub average: f64,
    pub n_patients: usize,
    pub n_lesions: usize,
}

pub fn metrics_from_curve(curve: &FrocCurve, points: &[f64]) -> Result<Metrics> {
    let mut sens_at = std::collections::BTreeMap::new();
    for &fp in points {
        sens_at.insert(format_fp_point(fp), sensitivity_at(curve, fp));
    }
    Ok(Metrics {
        sens_at,
        average: average_sensitivity(curve, points)?,
        n_patients: curve.n_patients,
        n_lesions: curve.n_lesions,
    })
}

pub fn write_metrics_json(metrics: &Metrics, path: &Path) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(metrics)
        .map_err(|e| Error::Json { path: path.to_path_buf(), source: e })?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use rand::Rng;

    fn cand(peak_index: usize, score: f64) -> CandidateLesion {
        CandidateLesion { voxels: vec![peak_index], score, peak_index, volume_mm3: 1.0 }
    }

    fn mask(dims: [usize; 3], labeled: &[(usize, u32)]) -> Volume3 {
        let mut v = Volume3::zeros(dims, [1.0, 1.0, 1.0]).unwrap();
        for &(i, l) in labeled {
            v.voxels_mut()[i] = l as f32;
        }
        v
    }

    #[test]
    fn no_candidates_no_detections() {
        let gt = mask([4, 1, 1], &[(1, 1)]);
        let r = match_candidates(&[], &gt).unwrap();
        assert!(r.detections.is_empty());
        assert!(r.false_positives.is_empty());
        assert_eq!(r.n_lesions, 1);
    }

    #[test]
    fn single_hit_counts_once() {
        let gt = mask([4, 1, 1], &[(1, 1)]);
        let r = match_candidates(&[cand(1, 0.8)], &gt).unwrap();
        assert_eq!(r.detections, vec![(1, 0.8)]);
        assert!(r.false_positives.is_empty());
    }

    #[test]
    fn redundant_hits_are_discarded_not_fp() {
        // Two candidates peaked in the same lesion plus one outside:
        // lesion credited at 0.9, one FP at 0.8, the 0.6 discarded.
        let gt = mask([8, 1, 1], &[(1, 1), (2, 1)]);
        let cands = [cand(1, 0.9), cand(5, 0.8), cand(2, 0.6)];
        let r = match_candidates(&cands, &gt).unwrap();
        assert_eq!(r.detections, vec![(1, 0.9)]);
        assert_eq!(r.false_positives, vec![0.8]);
    }

    #[test]
    fn lesion_credited_to_highest_scoring_hit() {
        let gt = mask([8, 1, 1], &[(3, 1)]);
        // Lower-score candidate listed first; matching must sort by score.
        let cands = [cand(3, 0.4), cand(3, 0.9)];
        let r = match_candidates(&cands, &gt).unwrap();
        assert_eq!(r.detections, vec![(1, 0.9)]);
        assert!(r.false_positives.is_empty());
    }

    #[test]
    fn worked_two_patient_curve() {
        // Patient A: 2 lesions, lesion 1 credited at 0.9, FP at 0.6.
        // Patient B: no lesions, FP at 0.8.
        let a = MatchResult {
            detections: vec![(1, 0.9)],
            false_positives: vec![0.6],
            n_lesions: 2,
        };
        let b = MatchResult { detections: vec![], false_positives: vec![0.8], n_lesions: 0 };
        let curve = froc_curve(&[a, b]).unwrap();
        assert_eq!(curve.points, vec![(0.0, 0.5), (0.5, 0.5), (1.0, 0.5)]);
        assert_eq!(curve.n_patients, 2);
        assert_eq!(curve.n_lesions, 2);
    }

    #[test]
    fn perfect_detection_is_a_single_point() {
        let a = MatchResult {
            detections: vec![(1, 1.0), (2, 1.0)],
            false_positives: vec![],
            n_lesions: 2,
        };
        let curve = froc_curve(&[a]).unwrap();
        assert_eq!(curve.points, vec![(0.0, 1.0)]);
    }

    #[test]
    fn zero_lesion_ground_truth_is_rejected() {
        let a = MatchResult { detections: vec![], false_positives: vec![0.5], n_lesions: 0 };
        assert!(froc_curve(&[a]).is_err());
    }

    /// Exhaustive sweep over a fine threshold grid, independent of the
    /// partition-point implementation.
    fn oracle_curve(results: &[MatchResult]) -> Vec<(f64, f64)> {
        let n_patients = results.len() as f64;
        let n_lesions: usize = results.iter().map(|r| r.n_lesions).sum();
        let mut taus: Vec<f64> = results
            .iter()
            .flat_map(|r| {
                r.detections
                    .iter()
                    .map(|&(_, s)| s)
                    .chain(r.false_positives.iter().copied())
            })
            .collect();
        taus.push(0.0);
        taus.sort_by(|a, b| b.partial_cmp(a).unwrap());
        taus.dedup();
        let mut pts: Vec<(f64, f64)> = Vec::new();
        for tau in taus {
            let dets = results
                .iter()
                .flat_map(|r| r.detections.iter())
                .filter(|&&(_, s)| s >= tau)
                .count();
            let fps = results
                .iter()
                .flat_map(|r| r.false_positives.iter())
                .filter(|&&s| s >= tau)
                .count();
            let point = (fps as f64 / n_patients, dets as f64 / n_lesions as f64);
            match pts.iter_mut().find(|p| p.0 == point.0) {
                Some(p) => p.1 = p.1.max(point.1),
                None => pts.push(point),
            }
        }
        pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        pts
    }

    #[test]
    fn randomized_curves_match_exhaustive_sweep() {
        let mut rng = substream(101, &[0]);
        for trial in 0..200 {
            let n_patients = rng.gen_range(1..=6);
            let mut results = Vec::new();
            let mut total_lesions = 0;
            for _ in 0..n_patients {
                let n_lesions = rng.gen_range(0..=3);
                total_lesions += n_lesions;
                let mut detections = Vec::new();
                for l in 0..n_lesions {
                    if rng.gen_bool(0.6) {
                        // Quantized scores force threshold collisions.
                        let s = rng.gen_range(1..=10) as f64 / 10.0;
                        detections.push((l as u32 + 1, s));
                    }
                }
                let n_fp = rng.gen_range(0..=5usize.saturating_sub(detections.len()));
                let false_positives: Vec<f64> =
                    (0..n_fp).map(|_| rng.gen_range(1..=10) as f64 / 10.0).collect();
                results.push(MatchResult { detections, false_positives, n_lesions });
            }
            if total_lesions == 0 {
                continue;
            }
            let curve = froc_curve(&results).unwrap();
            curve.validate().unwrap();
            assert_eq!(curve.points, oracle_curve(&results), "trial {trial}");
        }
    }

    #[test]
    fn monotone_score_rescaling_leaves_curve_unchanged() {
        let results = vec![
            MatchResult { detections: vec![(1, 0.9), (2, 0.3)], false_positives: vec![0.5], n_lesions: 3 },
            MatchResult { detections: vec![(1, 0.7)], false_positives: vec![0.2, 0.8], n_lesions: 1 },
        ];
        let rescaled: Vec<MatchResult> = results
            .iter()
            .map(|r| MatchResult {
                detections: r.detections.iter().map(|&(l, s)| (l, (3.0 * s).tanh())).collect(),
                false_positives: r.false_positives.iter().map(|&s| (3.0 * s).tanh()).collect(),
                n_lesions: r.n_lesions,
            })
            .collect();
        let a = froc_curve(&results).unwrap();
        let b = froc_curve(&rescaled).unwrap();
        assert_eq!(a.points, b.points);
    }

    #[test]
    fn removing_a_false_positive_never_hurts() {
        let mut rng = substream(103, &[1]);
        for _ in 0..50 {
            let mut results = vec![MatchResult {
                detections: vec![(1, rng.gen_range(0.1..1.0))],
                false_positives: (0..rng.gen_range(1..5))
                    .map(|_| rng.gen_range(0.1..1.0))
                    .collect(),
                n_lesions: 2,
            }];
            let full = froc_curve(&results).unwrap();
            results[0].false_positives.pop();
            let reduced = froc_curve(&results).unwrap();
            for fp in [0.5, 1.0, 2.0] {
                assert!(sensitivity_at(&reduced, fp) >= sensitivity_at(&full, fp) - 1e-12);
            }
        }
    }

    #[test]
    fn interpolation_and_clamping() {
        let curve = FrocCurve {
            points: vec![(0.0, 0.5), (1.0, 0.75), (2.0, 0.75)],
            n_patients: 4,
            n_lesions: 8,
        };
        assert_eq!(sensitivity_at(&curve, 0.5), 0.625);
        assert_eq!(sensitivity_at(&curve, 2.0), 0.75);
        assert_eq!(sensitivity_at(&curve, 5.0), 0.75);
        let avg = average_sensitivity(&curve, &[0.5, 1.0, 2.0]).unwrap();
        assert!((avg - (0.625 + 0.75 + 0.75) / 3.0).abs() < 1e-12);
        assert!((avg - 0.7083).abs() < 1e-4);
    }

    #[test]
    fn constant_curve_averages_to_the_constant() {
        let curve = FrocCurve { points: vec![(0.0, 0.8), (2.5, 0.8)], n_patients: 1, n_lesions: 1 };
        let avg = average_sensitivity(&curve, &[0.1, 0.9, 1.7, 4.0]).unwrap();
        assert_eq!(avg, 0.8);
    }

    /// The five rows of operating-point sensitivities reported for the
    /// baseline and four fusion variants, with their published averages.
    const REPORTED_ROWS: [([f64; 3], f64); 5] = [
        ([0.760, 0.825, 0.825], 0.803),
        ([0.795, 0.887, 0.887], 0.856),
        ([0.774, 0.873, 0.873], 0.840),
        ([0.774, 0.802, 0.802], 0.793),
        ([0.774, 0.816, 0.816], 0.802),
    ];

    #[test]
    fn reported_averages_are_the_mean_of_three_operating_points() {
        for (sens, avg) in REPORTED_ROWS {
            // Encode the row as an exact step curve through the three points.
            let curve = FrocCurve {
                points: vec![(0.5, sens[0]), (1.0, sens[1]), (2.0, sens[2])],
                n_patients: 1,
                n_lesions: 1,
            };
            let got = average_sensitivity(&curve, &[0.5, 1.0, 2.0]).unwrap();
            assert!(
                (got - avg).abs() < 5e-4,
                "row {sens:?}: computed {got}, reported {avg}"
            );
        }
    }

    #[test]
    fn metrics_json_shape() {
        let curve = FrocCurve {
            points: vec![(0.0, 0.5), (1.0, 0.75), (2.0, 0.75)],
            n_patients: 4,
            n_lesions: 8,
        };
        let m = metrics_from_curve(&curve, &[0.5, 1.0, 2.0]).unwrap();
        let json = serde_json::to_value(&m).unwrap();
        assert_eq!(json["sens_at"]["0.5"], 0.625);
        assert_eq!(json["sens_at"]["1"], 0.75);
        assert_eq!(json["sens_at"]["2"], 0.75);
        assert!(json["average"].is_number());
        assert_eq!(json["n_patients"], 4);
        assert_eq!(json["n_lesions"], 8);
    }
}
