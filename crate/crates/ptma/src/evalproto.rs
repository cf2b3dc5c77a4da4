//! Per-frame average precision, calibrated AP, protocol evaluation, and the
//! report artifacts.
//!
//! Frames are pooled across all test videos per class; background (label 0)
//! is excluded from the mean. Ranking ties are resolved stably by ascending
//! frame index — AP is tie-sensitive, so the rule is fixed and recorded in
//! the report. Calibrated precision weighs true positives by
//! `w = negatives / positives` of the pooled test set, which makes the
//! metric comparable across classes with very different base rates.

use crate::dataio::{DatasetCatalog, FeatureSequence, Split, SplitEntry};
use crate::error::{PtmaError, Result};
use crate::model::{encode_mu_value, ModelConfig, ModelParams};
use crate::numerics::tensor::Tensor;
use crate::stream::batch_infer;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

pub const TIE_BREAK_RULE: &str = "stable sort: score descending, frame index ascending";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    /// Plain per-frame mean average precision.
    #[serde(rename = "mAP")]
    MAp,
    /// Mean calibrated average precision.
    #[serde(rename = "mcAP")]
    McAp,
}

impl Metric {
    pub fn parse(s: &str) -> Result<Metric> {
        Ok(match s {
            "map" | "mAP" => Metric::MAp,
            "mcap" | "mcAP" => Metric::McAp,
            other => {
                return Err(PtmaError::Usage(format!(
                    "unknown metric '{other}' (expected map|mcap)"
                )))
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Metric::MAp => "mAP",
            Metric::McAp => "mcAP",
        }
    }

    pub fn calibrated(&self) -> bool {
        matches!(self, Metric::McAp)
    }
}

/// Per-frame class scores for one test video.
#[derive(Debug, Clone)]
pub struct VideoRun {
    pub video_id: String,
    pub view_id: u32,
    /// K x (C+1) probabilities, rows on the simplex.
    pub scores: Tensor<f32>,
    pub labels: Vec<u16>,
}

/// Collected scores for a whole test set.
#[derive(Debug, Clone)]
pub struct DetectionRun {
    pub protocol: String,
    pub class_count: usize,
    pub videos: Vec<VideoRun>,
}

impl DetectionRun {
    pub fn validate(&self) -> Result<()> {
        for v in &self.videos {
            if v.scores.rows() != v.labels.len() {
                return Err(PtmaError::data(format!(
                    "video {}: {} score rows vs {} labels",
                    v.video_id,
                    v.scores.rows(),
                    v.labels.len()
                )));
            }
            if v.scores.cols() != self.class_count + 1 {
                return Err(PtmaError::data(format!(
                    "video {}: {} score columns for {} classes",
                    v.video_id,
                    v.scores.cols(),
                    self.class_count + 1
                )));
            }
            for i in 0..v.scores.rows() {
                let sum: f32 = v.scores.row(i).iter().sum();
                if (sum - 1.0).abs() > 1e-5 {
                    return Err(PtmaError::data(format!(
                        "video {} frame {i}: score row sums to {sum}, not 1",
                        v.video_id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        self.videos.iter().map(|v| v.labels.len()).sum()
    }
}

// ---------------------------------------------------------------------------
// Average precision
// ---------------------------------------------------------------------------

/// AP of one class over pooled frames; `w = negatives / positives` is used
/// in place of 1 when `calibrated`. Returns `(ap, w)`, or `None` when the
/// class has no positive frame (skipped classes are reported as absent).
pub fn average_precision(scores: &[f64], positives: &[bool], calibrated: bool) -> Option<(f64, f64)> {
    assert_eq!(scores.len(), positives.len());
    let n = scores.len();
    let p = positives.iter().filter(|&&x| x).count();
    if p == 0 {
        return None;
    }
    let negatives = n - p;
    let w = negatives as f64 / p as f64;

    let mut order: Vec<usize> = (0..n).collect();
    // stable by descending score keeps equal-score frames in ascending
    // index order
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));

    let mut tp = 0.0_f64;
    let mut fp = 0.0_f64;
    let mut sum = 0.0_f64;
    for &idx in &order {
        if positives[idx] {
            tp += 1.0;
            let prec = if fp == 0.0 {
                1.0
            } else if calibrated {
                w * tp / (w * tp + fp)
            } else {
                tp / (tp + fp)
            };
            sum += prec;
        } else {
            fp += 1.0;
        }
    }
    Some((sum / p as f64, w))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_id: u16,
    pub ap: f64,
    pub w: f64,
    pub positives: usize,
    pub negatives: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ViewCell {
    pub test_view: u32,
    pub mean_ap: f64,
    pub accuracy: f64,
    pub frames: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub protocol: String,
    /// Mean AP over action classes with at least one positive frame.
    pub mean_ap: f64,
    /// Frame-level argmax accuracy, background included.
    pub accuracy: f64,
    pub frames: usize,
    pub classes: Vec<ClassAp>,
    pub absent_classes: Vec<u16>,
    /// Per-test-view breakdown when the run spans several views, plus their
    /// unweighted average.
    pub view_cells: Vec<ViewCell>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub view_avg: Option<f64>,
    pub tie_break: String,
    #[serde(default)]
    pub config_digest: String,
    #[serde(default)]
    pub checkpoint_digest: String,
}

fn pooled_stats(videos: &[&VideoRun], class_count: usize, calibrated: bool) -> (Vec<ClassAp>, Vec<u16>, f64, usize) {
    let mut classes = Vec::new();
    let mut absent = Vec::new();
    for class in 1..=class_count as u16 {
        let mut scores = Vec::new();
        let mut positives = Vec::new();
        for v in videos {
            for (i, &label) in v.labels.iter().enumerate() {
                scores.push(v.scores.at(i, class as usize) as f64);
                positives.push(label == class);
            }
        }
        match average_precision(&scores, &positives, calibrated) {
            Some((ap, w)) => {
                let p = positives.iter().filter(|&&x| x).count();
                classes.push(ClassAp {
                    class_id: class,
                    ap,
                    w,
                    positives: p,
                    negatives: positives.len() - p,
                });
            }
            None => absent.push(class),
        }
    }

    let mut correct = 0usize;
    let mut frames = 0usize;
    for v in videos {
        for (i, &label) in v.labels.iter().enumerate() {
            let row = v.scores.row(i);
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite scores"))
                .map(|(j, _)| j)
                .unwrap_or(0);
            correct += usize::from(argmax == label as usize);
            frames += 1;
        }
    }
    let accuracy = if frames > 0 {
        correct as f64 / frames as f64
    } else {
        0.0
    };
    (classes, absent, accuracy, frames)
}

fn mean_ap(classes: &[ClassAp]) -> f64 {
    if classes.is_empty() {
        return 0.0;
    }
    classes.iter().map(|c| c.ap).sum::<f64>() / classes.len() as f64
}

/// Evaluates a pooled run: per-class (calibrated) AP over frames from all
/// test videos, their mean over present action classes, frame accuracy, and
/// per-view cells when the run spans several views.
pub fn evaluate_run(run: &DetectionRun, metric: Metric) -> Result<MetricReport> {
    run.validate()?;
    let all: Vec<&VideoRun> = run.videos.iter().collect();
    let (classes, absent, accuracy, frames) = pooled_stats(&all, run.class_count, metric.calibrated());

    let mut views: Vec<u32> = run.videos.iter().map(|v| v.view_id).collect();
    views.sort_unstable();
    views.dedup();
    let mut view_cells = Vec::new();
    if views.len() > 1 {
        for &view in &views {
            let subset: Vec<&VideoRun> = run.videos.iter().filter(|v| v.view_id == view).collect();
            let (vc, _, vacc, vframes) = pooled_stats(&subset, run.class_count, metric.calibrated());
            view_cells.push(ViewCell {
                test_view: view,
                mean_ap: mean_ap(&vc),
                accuracy: vacc,
                frames: vframes,
            });
        }
    }
    let view_avg = (!view_cells.is_empty())
        .then(|| view_cells.iter().map(|c| c.mean_ap).sum::<f64>() / view_cells.len() as f64);

    Ok(MetricReport {
        metric: metric.name().to_string(),
        protocol: run.protocol.clone(),
        mean_ap: mean_ap(&classes),
        accuracy,
        frames,
        classes,
        absent_classes: absent,
        view_cells,
        view_avg,
        tie_break: TIE_BREAK_RULE.to_string(),
        config_digest: String::new(),
        checkpoint_digest: String::new(),
    })
}

// ---------------------------------------------------------------------------
// Protocol runner
// ---------------------------------------------------------------------------

fn resolve<'c>(catalog: &'c DatasetCatalog, e: &SplitEntry) -> Result<&'c FeatureSequence> {
    catalog.find(&e.video_id, e.view_id).ok_or_else(|| {
        PtmaError::data(format!(
            "split references ({}, view {}) which is not in the catalog",
            e.video_id, e.view_id
        ))
    })
}

/// Streams every entry through batch inference and collects a
/// [`DetectionRun`]. Videos evaluate independently, so this maps in
/// parallel on the current rayon pool and reduces in entry order.
pub fn assemble_run(
    catalog: &DatasetCatalog,
    entries: &[SplitEntry],
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
    protocol: &str,
) -> Result<DetectionRun> {
    let videos: Result<Vec<VideoRun>> = entries
        .par_iter()
        .map(|e| {
            let seq = resolve(catalog, e)?;
            let scores = batch_infer(params, cfg, &seq.features)?;
            Ok(VideoRun {
                video_id: seq.video_id.clone(),
                view_id: seq.view_id,
                scores,
                labels: seq.labels.clone(),
            })
        })
        .collect();
    Ok(DetectionRun {
        protocol: protocol.to_string(),
        class_count: catalog.class_count,
        videos: videos?,
    })
}

/// Full protocol evaluation: infer the split's test list, score it, and
/// return both the report and the raw run (for the CSV artifact).
pub fn run_protocol(
    catalog: &DatasetCatalog,
    split: &Split,
    entries: &[SplitEntry],
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
    metric: Metric,
) -> Result<(MetricReport, DetectionRun)> {
    let run = assemble_run(catalog, entries, params, cfg, split.protocol.name())?;
    let report = evaluate_run(&run, metric)?;
    Ok((report, run))
}

/// Per-frame CSV artifact: one row per frame across all test videos.
pub fn write_frames_csv(run: &DetectionRun, path: &Path) -> Result<()> {
    let to_io = |e: std::io::Error| PtmaError::io(path.display().to_string(), e);
    let mut f = std::fs::File::create(path).map_err(to_io)?;
    let cols: Vec<String> = (0..=run.class_count).map(|c| format!("score_{c}")).collect();
    writeln!(f, "video,view,frame,label,argmax,{}", cols.join(",")).map_err(to_io)?;
    for v in &run.videos {
        for (i, &label) in v.labels.iter().enumerate() {
            let row = v.scores.row(i);
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite scores"))
                .map(|(j, _)| j)
                .unwrap_or(0);
            let scores: Vec<String> = row.iter().map(|s| format!("{s}")).collect();
            writeln!(
                f,
                "{},{},{},{},{},{}",
                v.video_id,
                v.view_id,
                i,
                label,
                argmax,
                scores.join(",")
            )
            .map_err(to_io)?;
        }
    }
    Ok(())
}

/// Dumps per-frame encoder means as a feature file with `D = latent_dim`
/// (labels, view and subject copied over), ready for external embedding
/// tools.
pub fn dump_latents(
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
    seq: &FeatureSequence,
    path: &Path,
) -> Result<()> {
    if seq.feature_dim() != cfg.input_dim {
        return Err(PtmaError::data(format!(
            "{}: feature dim {} but the encoder expects {}",
            seq.video_id,
            seq.feature_dim(),
            cfg.input_dim
        )));
    }
    let mu = encode_mu_value(params, &seq.features)?;
    let latent_seq = FeatureSequence {
        features: mu,
        labels: seq.labels.clone(),
        class_count: seq.class_count,
        view_id: seq.view_id,
        subject_id: seq.subject_id,
        video_id: seq.video_id.clone(),
        fps: seq.fps,
    };
    crate::dataio::write_feature_file(&latent_seq, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    /// O(N^2) re-derivation of (calibrated) AP straight from the ranking
    /// definition, kept deliberately independent of the sweep in
    /// `average_precision`.
    fn ap_bruteforce(scores: &[f64], positives: &[bool], calibrated: bool) -> Option<(f64, f64)> {
        let n = scores.len();
        let p = positives.iter().filter(|&&x| x).count();
        if p == 0 {
            return None;
        }
        let w = (n - p) as f64 / p as f64;
        let mut sum = 0.0;
        for k in 0..n {
            if !positives[k] {
                continue;
            }
            // rank of frame k under (score desc, index asc)
            let before_or_self = |j: usize| {
                scores[j] > scores[k] || (scores[j] == scores[k] && j <= k)
            };
            let mut tp = 0usize;
            let mut rank = 0usize;
            for j in 0..n {
                if before_or_self(j) {
                    rank += 1;
                    if positives[j] {
                        tp += 1;
                    }
                }
            }
            let fp = (rank - tp) as f64;
            let tp = tp as f64;
            let prec = if fp == 0.0 {
                1.0
            } else if calibrated {
                w * tp / (w * tp + fp)
            } else {
                tp / (tp + fp)
            };
            sum += prec;
        }
        Some((sum / p as f64, w))
    }

    #[test]
    fn hand_ranked_case() {
        // ranks: .9 pos (prec 1), .8 neg, .7 pos (prec 2/3), .1 neg
        let scores = [0.9, 0.8, 0.7, 0.1];
        let positives = [true, false, true, false];
        let (ap, w) = average_precision(&scores, &positives, true).unwrap();
        assert!((w - 1.0).abs() < 1e-12);
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-9, "{ap}");
        // plain coincides exactly when w = 1
        let (plain, _) = average_precision(&scores, &positives, false).unwrap();
        assert_eq!(ap, plain);
    }

    #[test]
    fn perfect_ranking_is_one_for_any_w() {
        for negs in [1usize, 3, 10] {
            let mut scores = vec![0.9, 0.8];
            let mut positives = vec![true, true];
            for i in 0..negs {
                scores.push(0.1 - i as f64 * 0.01);
                positives.push(false);
            }
            let (plain, _) = average_precision(&scores, &positives, false).unwrap();
            let (calib, w) = average_precision(&scores, &positives, true).unwrap();
            assert_eq!(plain, 1.0);
            assert_eq!(calib, 1.0);
            assert!((w - negs as f64 / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn w_is_negative_positive_ratio() {
        let scores = [0.4, 0.3, 0.2, 0.1];
        let positives = [true, false, false, false];
        let (_, w) = average_precision(&scores, &positives, true).unwrap();
        assert_eq!(w, 3.0);
    }

    #[test]
    fn zero_positives_skips_class() {
        assert!(average_precision(&[0.5, 0.2], &[false, false], true).is_none());
    }

    #[test]
    fn matches_bruteforce_on_random_instances() {
        let mut rng = Rng::from_seed(404);
        for trial in 0..200 {
            let n = rng.int_range(1, 500);
            let mut scores: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
            // quantize some trials to force ties
            if trial % 3 == 0 {
                for s in scores.iter_mut() {
                    *s = (*s * 8.0).floor() / 8.0;
                }
            }
            let positives: Vec<bool> = (0..n).map(|_| rng.uniform() < 0.3).collect();
            for calibrated in [false, true] {
                let fast = average_precision(&scores, &positives, calibrated);
                let slow = ap_bruteforce(&scores, &positives, calibrated);
                match (fast, slow) {
                    (None, None) => {}
                    (Some((fa, fw)), Some((sa, sw))) => {
                        assert!((fa - sa).abs() < 1e-12, "trial {trial}: {fa} vs {sa}");
                        assert_eq!(fw, sw);
                    }
                    other => panic!("trial {trial}: disagreement {other:?}"),
                }
            }
        }
    }

    #[test]
    fn random_scores_on_balanced_class_approach_half() {
        let mut rng = Rng::from_seed(777);
        let n = 10_000;
        let scores: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
        let positives: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        let (cap, w) = average_precision(&scores, &positives, true).unwrap();
        assert!((w - 1.0).abs() < 1e-12);
        assert!((cap - 0.5).abs() < 0.05, "{cap}");
    }

    #[test]
    fn ap_invariant_under_exact_monotone_transform() {
        let mut rng = Rng::from_seed(88);
        for _ in 0..50 {
            let n = rng.int_range(2, 60);
            let scores: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
            let positives: Vec<bool> = (0..n).map(|_| rng.uniform() < 0.4).collect();
            // doubling is exact in binary floating point, so the order and
            // every tie survive the transform unchanged
            let doubled: Vec<f64> = scores.iter().map(|s| s * 2.0).collect();
            let a = average_precision(&scores, &positives, true);
            let b = average_precision(&doubled, &positives, true);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn ap_stays_in_unit_interval() {
        let mut rng = Rng::from_seed(99);
        for _ in 0..100 {
            let n = rng.int_range(1, 80);
            let scores: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
            let positives: Vec<bool> = (0..n).map(|_| rng.uniform() < 0.5).collect();
            if let Some((ap, _)) = average_precision(&scores, &positives, false) {
                assert!((0.0..=1.0).contains(&ap));
            }
        }
    }

    fn run_from_rows(rows: Vec<(Vec<f32>, u16)>, class_count: usize, view: u32) -> DetectionRun {
        let scores = Tensor::from_rows(&rows.iter().map(|(r, _)| r.clone()).collect::<Vec<_>>())
            .unwrap();
        let labels = rows.iter().map(|&(_, l)| l).collect();
        DetectionRun {
            protocol: "cv".into(),
            class_count,
            videos: vec![VideoRun {
                video_id: "v".into(),
                view_id: view,
                scores,
                labels,
            }],
        }
    }

    #[test]
    fn mean_over_present_classes() {
        // class 1 ranked perfectly (AP 1); class 2 ranked with one inversion
        // reproducing the hand case's 0.8333; class 3 absent
        let rows = vec![
            (vec![0.05, 0.90, 0.02, 0.03], 1u16),
            (vec![0.05, 0.85, 0.05, 0.05], 1),
            (vec![0.30, 0.10, 0.55, 0.05], 2),
            (vec![0.40, 0.05, 0.50, 0.05], 0),
            (vec![0.40, 0.05, 0.45, 0.10], 2),
            (vec![0.80, 0.05, 0.05, 0.10], 0),
        ];
        let run = run_from_rows(rows, 3, 1);
        let report = evaluate_run(&run, Metric::MAp).unwrap();
        assert_eq!(report.absent_classes, vec![3]);
        assert_eq!(report.classes.len(), 2);
        let ap1 = report.classes[0].ap;
        let ap2 = report.classes[1].ap;
        assert_eq!(ap1, 1.0);
        assert!((ap2 - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-9);
        assert!((report.mean_ap - (ap1 + ap2) / 2.0).abs() < 1e-12);
        assert!(report.view_cells.is_empty());
        // two classes with APs 0.8 and 0.6 average to 0.7
        assert!((0.5 * (0.8 + 0.6) - 0.7_f64).abs() < 1e-12);
    }

    #[test]
    fn accuracy_counts_background_frames() {
        let rows = vec![
            (vec![0.70, 0.20, 0.10], 0u16),
            (vec![0.10, 0.80, 0.10], 1),
            (vec![0.10, 0.80, 0.10], 2), // wrong
            (vec![0.60, 0.20, 0.20], 0),
        ];
        let run = run_from_rows(rows, 2, 1);
        let report = evaluate_run(&run, Metric::MAp).unwrap();
        assert!((report.accuracy - 0.75).abs() < 1e-12);
        assert_eq!(report.frames, 4);
    }

    #[test]
    fn multi_view_runs_get_cells_and_average() {
        let mk = |view: u32, label: u16| VideoRun {
            video_id: format!("v{view}"),
            view_id: view,
            scores: Tensor::from_rows(&[
                vec![0.1_f32, 0.8, 0.1],
                vec![0.7, 0.2, 0.1],
            ])
            .unwrap(),
            labels: vec![label, 0],
        };
        let run = DetectionRun {
            protocol: "cv".into(),
            class_count: 2,
            videos: vec![mk(2, 1), mk(3, 1)],
        };
        let report = evaluate_run(&run, Metric::McAp).unwrap();
        assert_eq!(report.view_cells.len(), 2);
        let avg = report.view_avg.unwrap();
        let mean_of_cells =
            (report.view_cells[0].mean_ap + report.view_cells[1].mean_ap) / 2.0;
        assert!((avg - mean_of_cells).abs() < 1e-12);
    }

    #[test]
    fn broken_simplex_rejected() {
        let run = run_from_rows(vec![(vec![0.9_f32, 0.9, 0.9], 1)], 2, 1);
        assert!(evaluate_run(&run, Metric::MAp).is_err());
    }
}
