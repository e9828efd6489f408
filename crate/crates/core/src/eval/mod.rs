//! One-pass tracking, metric reports and report files.

pub mod metrics;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bbox::XywhBox;
use crate::data::crop::{crop_search, crop_template, CropConfig, SearchWindow};
use crate::data::synth::{Sequence, KNOWN_ATTRIBUTES};
use crate::error::{Error, Result};
use crate::model::Tracker;

pub use metrics::{MetricsReport, TrackRun};

pub const UNTAGGED: &str = "untagged";

/// Smallest predicted width or height, in pixels, accepted as a valid box.
pub const MIN_BOX_PX: f64 = 1.0;

/// One-pass evaluation: the template is cut once from the first frame's
/// groundtruth; every later frame is searched around the previous prediction.
pub fn run_tracker(tracker: &Tracker, seq: &Sequence) -> Result<TrackRun> {
    let first = *seq.groundtruth.first().ok_or_else(|| Error::Eval {
        sequence: seq.name.clone(),
        message: "sequence has no frames".into(),
    })?;
    let cfg = &tracker.config;
    let crop = CropConfig::new(cfg.template_size, cfg.search_size).without_jitter();
    let template = crop_template(&seq.frames[0].to_image(), &first, &crop).map_err(|e| Error::Eval {
        sequence: seq.name.clone(),
        message: e.to_string(),
    })?;
    let mut preds = Vec::with_capacity(seq.len());
    preds.push(first);
    let mut prev = first;
    let mut degenerate = 0;
    for frame in &seq.frames[1..] {
        let (cx, cy) = prev.center();
        let window = SearchWindow {
            cx,
            cy,
            side: crop.search_context * prev.w.max(prev.h),
        };
        let search = crop_search(&frame.to_image(), &window, &crop);
        let raw = tracker.predict(&template, &search)?;
        let px = window.denormalize(&raw);
        let next = XywhBox::from_corners(&px);
        if next.w >= MIN_BOX_PX && next.h >= MIN_BOX_PX && next.is_valid() {
            prev = next;
        } else {
            degenerate += 1;
        }
        preds.push(prev);
    }
    let mut run = TrackRun::from_boxes(&seq.name, preds, seq.groundtruth.clone())?;
    run.degenerate_frames = degenerate;
    Ok(run)
}

/// Tracks every sequence with up to `workers` threads. Results come back in
/// input order regardless of scheduling.
pub fn run_all(tracker: &Tracker, seqs: &[Sequence], workers: usize) -> Result<Vec<TrackRun>> {
    let workers = workers.clamp(1, seqs.len().max(1));
    if workers == 1 {
        return seqs.iter().map(|s| run_tracker(tracker, s)).collect();
    }
    let mut slots: Vec<Option<Result<TrackRun>>> = (0..seqs.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                scope.spawn(move || {
                    (w..seqs.len())
                        .step_by(workers)
                        .map(|i| (i, run_tracker(tracker, &seqs[i])))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("tracking worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|s| s.expect("every index assigned")).collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttributeReport {
    pub per_attribute: BTreeMap<String, MetricsReport>,
    pub notes: Vec<String>,
}

/// Metrics restricted to the sequences carrying each known tag. Sequences
/// without a known tag are grouped under [`UNTAGGED`]; tags carried by no
/// sequence are omitted with a note.
pub fn attribute_report(runs: &[TrackRun], attributes: &[Vec<String>]) -> AttributeReport {
    let mut groups: BTreeMap<String, Vec<&TrackRun>> = BTreeMap::new();
    let mut notes = Vec::new();
    for (run, tags) in runs.iter().zip(attributes) {
        let mut known = false;
        for tag in tags {
            if KNOWN_ATTRIBUTES.contains(&tag.as_str()) {
                groups.entry(tag.clone()).or_default().push(run);
                known = true;
            } else {
                notes.push(format!("sequence `{}`: unknown tag `{tag}` counted as {UNTAGGED}", run.sequence));
            }
        }
        if !known {
            groups.entry(UNTAGGED.to_string()).or_default().push(run);
        }
    }
    for tag in KNOWN_ATTRIBUTES {
        if !groups.contains_key(tag) {
            notes.push(format!("no sequence carries `{tag}`; omitted"));
        }
    }
    AttributeReport {
        per_attribute: groups
            .into_iter()
            .map(|(k, v)| (k, MetricsReport::from_runs(v)))
            .collect(),
        notes,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceSummary {
    pub name: String,
    pub frames: usize,
    pub mean_iou: f64,
    pub success_score: f64,
    pub precision_score: f64,
    pub norm_precision_score: f64,
    pub degenerate_frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: MetricsReport,
    pub sequences: Vec<SequenceSummary>,
    pub attributes: AttributeReport,
}

impl EvalReport {
    pub fn new(runs: &[TrackRun], attributes: &[Vec<String>]) -> Self {
        let sequences = runs
            .iter()
            .map(|r| {
                let m = MetricsReport::from_runs([r]);
                SequenceSummary {
                    name: r.sequence.clone(),
                    frames: r.len(),
                    mean_iou: m.mean_iou,
                    success_score: m.success_score,
                    precision_score: m.precision_score,
                    norm_precision_score: m.norm_precision_score,
                    degenerate_frames: r.degenerate_frames,
                }
            })
            .collect();
        Self {
            overall: MetricsReport::from_runs(runs),
            sequences,
            attributes: attribute_report(runs, attributes),
        }
    }
}

fn curve_csv(header: &str, thresholds: &[f64], rates: &[f64]) -> String {
    let mut s = format!("{header},rate\n");
    for (t, r) in thresholds.iter().zip(rates) {
        s.push_str(&format!("{t},{r}\n"));
    }
    s
}

/// Companion CSV paths for a report at `json`: `<stem>_success.csv` and so on.
pub fn curve_paths(json: &Path) -> [PathBuf; 3] {
    let stem = json.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    let dir = json.parent().unwrap_or(Path::new(""));
    ["success", "precision", "norm_precision"].map(|k| dir.join(format!("{stem}_{k}.csv")))
}

/// Writes the JSON report and one CSV per overall curve.
pub fn write_report(report: &EvalReport, json: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(report)?;
    std::fs::write(json, text).map_err(|e| Error::io(json, e))?;
    let o = &report.overall;
    let [s, p, n] = curve_paths(json);
    let files = [
        (s, curve_csv("iou_threshold", &metrics::success_thresholds(), &o.success_curve)),
        (p, curve_csv("cle_threshold_px", &metrics::precision_thresholds(), &o.precision_curve)),
        (n, curve_csv("norm_threshold", &metrics::norm_thresholds(), &o.norm_precision_curve)),
    ];
    for (path, body) in files {
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(name: &str, ious: &[f64]) -> TrackRun {
        let b = XywhBox::new(0.0, 0.0, 10.0, 10.0);
        let n = ious.len() + 1;
        let mut r = TrackRun::from_boxes(name, vec![b; n], vec![b; n]).unwrap();
        r.iou[1..].copy_from_slice(ious);
        r
    }

    fn tags(t: &[&str]) -> Vec<String> {
        t.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn shared_tag_equals_overall() {
        let runs = vec![run("a", &[0.2, 0.9]), run("b", &[0.5, 0.51, 0.7])];
        let attrs = vec![tags(&["scale-variation"]), tags(&["scale-variation"])];
        let rep = EvalReport::new(&runs, &attrs);
        assert_eq!(rep.attributes.per_attribute["scale-variation"], rep.overall);
    }

    #[test]
    fn disjoint_tags_recombine_to_overall_counts() {
        let runs = vec![run("a", &[0.2, 0.9]), run("b", &[0.5, 0.51, 0.7]), run("c", &[0.0])];
        let attrs = vec![tags(&["fast-motion"]), tags(&["scale-variation"]), tags(&[])];
        let rep = EvalReport::new(&runs, &attrs);
        let per = &rep.attributes.per_attribute;
        let frames: usize = per.values().map(|m| m.frames).sum();
        assert_eq!(frames, rep.overall.frames);
        for k in 0..21 {
            let weighted: f64 = per.values().map(|m| m.success_curve[k] * m.frames as f64).sum();
            assert!((weighted - rep.overall.success_curve[k] * rep.overall.frames as f64).abs() < 1e-9);
        }
        assert!(per.contains_key(UNTAGGED));
    }

    #[test]
    fn unknown_and_missing_tags() {
        let runs = vec![run("a", &[0.3])];
        let rep = attribute_report(&runs, &[tags(&["glare"])]);
        assert!(rep.per_attribute.contains_key(UNTAGGED));
        assert!(!rep.per_attribute.contains_key("glare"));
        assert!(rep.notes.iter().any(|n| n.contains("glare")));
        assert!(rep.notes.iter().any(|n| n.contains("low-ambient-intensity")));
    }

    #[test]
    fn report_files_have_expected_curve_lengths() {
        let dir = tempfile::tempdir().unwrap();
        let json = dir.path().join("out.json");
        let rep = EvalReport::new(&[run("a", &[0.3, 0.8])], &[tags(&[])]);
        write_report(&rep, &json).unwrap();
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
        assert_eq!(v["overall"]["success_curve"].as_array().unwrap().len(), 21);
        assert_eq!(v["overall"]["precision_curve"].as_array().unwrap().len(), 51);
        assert_eq!(v["overall"]["norm_precision_curve"].as_array().unwrap().len(), 51);
        let [s, _, _] = curve_paths(&json);
        assert_eq!(std::fs::read_to_string(s).unwrap().lines().count(), 22);
    }
}
