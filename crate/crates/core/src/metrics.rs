//! Segment-level and event-level F-scores for audio, visual and
//! audio-visual events, their Type and Event aggregates, and per-segment
//! accuracy for single-label data.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::BinaryGrid;
use crate::error::{Error, Result};
use crate::han::SegmentPredictions;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Audio,
    Visual,
}

/// A maximal run of positive segments: `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventInterval {
    pub class: usize,
    pub start: usize,
    pub end: usize,
    pub modality: Modality,
}

impl EventInterval {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

/// Maximal runs of ones in a binary timeline, ordered by start.
pub fn extract_events(timeline: &[u8]) -> Result<Vec<(usize, usize)>> {
    if let Some(v) = timeline.iter().find(|&&v| v > 1) {
        return Err(Error::Domain(format!("timeline value {v} is not binary")));
    }
    let mut out = Vec::new();
    let mut start = None;
    for (t, &v) in timeline.iter().enumerate() {
        match (v, start) {
            (1, None) => start = Some(t),
            (0, Some(s)) => {
                out.push((s, t));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, timeline.len()));
    }
    Ok(out)
}

/// Events of every class of a `T x C` grid.
pub fn grid_events(grid: &BinaryGrid, modality: Modality) -> Result<Vec<EventInterval>> {
    let classes = grid.first().map_or(0, Vec::len);
    let mut out = Vec::new();
    for class in 0..classes {
        let timeline: Vec<u8> = grid.iter().map(|row| row[class]).collect();
        for (start, end) in extract_events(&timeline)? {
            out.push(EventInterval {
                class,
                start,
                end,
                modality,
            });
        }
    }
    Ok(out)
}

/// Inverse of [`extract_events`].
pub fn rasterize(events: &[(usize, usize)], len: usize) -> Vec<u8> {
    let mut out = vec![0u8; len];
    for &(s, e) in events {
        out[s..e].iter_mut().for_each(|v| *v = 1);
    }
    out
}

pub fn temporal_iou(a: (usize, usize), b: (usize, usize)) -> f64 {
    let inter = a.1.min(b.1).saturating_sub(a.0.max(b.0));
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl std::ops::Add for Counts {
    type Output = Counts;

    fn add(self, o: Counts) -> Counts {
        Counts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

impl Counts {

    pub fn swapped(self) -> Counts {
        Counts {
            tp: self.tp,
            fp: self.fn_,
            fn_: self.fp,
        }
    }
}

/// `2TP / (2TP + FP + FN)`; nothing to find and nothing predicted scores 1.
pub fn f_score(c: Counts) -> f64 {
    let denom = 2 * c.tp + c.fp + c.fn_;
    if denom == 0 {
        1.0
    } else {
        (2 * c.tp) as f64 / denom as f64
    }
}

/// Greedy one-to-one matching in descending IoU order (ties: earlier ground
/// truth start, then earlier prediction start); pairs below `threshold`
/// never match.
pub fn match_events(pred: &[(usize, usize)], gt: &[(usize, usize)], threshold: f64) -> Counts {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (gi, &g) in gt.iter().enumerate() {
        for (pi, &p) in pred.iter().enumerate() {
            let iou = temporal_iou(p, g);
            if iou >= threshold {
                pairs.push((iou, gi, pi));
            }
        }
    }
    pairs.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then(gt[a.1].0.cmp(&gt[b.1].0))
            .then(pred[a.2].0.cmp(&pred[b.2].0))
    });
    let mut used_g = vec![false; gt.len()];
    let mut used_p = vec![false; pred.len()];
    let mut tp = 0;
    for (_, gi, pi) in pairs {
        if !used_g[gi] && !used_p[pi] {
            used_g[gi] = true;
            used_p[pi] = true;
            tp += 1;
        }
    }
    Counts {
        tp,
        fp: pred.len() - tp,
        fn_: gt.len() - tp,
    }
}

/// Predicted and ground-truth grids of one video.
#[derive(Debug, Clone, Copy)]
pub struct VideoGrids<'a> {
    pub pred_visual: &'a BinaryGrid,
    pub pred_audio: &'a BinaryGrid,
    pub gt_visual: &'a BinaryGrid,
    pub gt_audio: &'a BinaryGrid,
}

fn conjunction(a: &BinaryGrid, b: &BinaryGrid) -> BinaryGrid {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p & q).collect())
        .collect()
}

impl VideoGrids<'_> {
    fn check(&self) -> Result<(usize, usize)> {
        let t = self.gt_visual.len();
        let c = self.gt_visual.first().map_or(0, Vec::len);
        for g in [self.pred_visual, self.pred_audio, self.gt_audio] {
            if g.len() != t || g.iter().any(|r| r.len() != c) {
                return Err(Error::shape(format!("prediction and ground-truth grids are not all {t} x {c}")));
            }
        }
        if self.gt_visual.iter().any(|r| r.len() != c) {
            return Err(Error::shape("ragged ground-truth grid"));
        }
        Ok((t, c))
    }
}

/// Counts per event type for one video.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypeCounts {
    pub audio: Counts,
    pub visual: Counts,
    pub av: Counts,
}

impl TypeCounts {
    fn swapped(self) -> Self {
        Self {
            audio: self.audio.swapped(),
            visual: self.visual.swapped(),
            av: self.av.swapped(),
        }
    }
}

/// F-scores per event type and their two aggregates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TypeScores {
    pub audio: f64,
    pub visual: f64,
    pub av: f64,
    /// Mean of the audio, visual and audio-visual scores.
    #[serde(rename = "type")]
    pub type_av: f64,
    /// Score of audio and visual events pooled regardless of modality.
    #[serde(rename = "event")]
    pub event_av: f64,
}

impl TypeScores {
    fn from_counts(c: &TypeCounts) -> Self {
        let (audio, visual, av) = (f_score(c.audio), f_score(c.visual), f_score(c.av));
        Self {
            audio,
            visual,
            av,
            type_av: (audio + visual + av) / 3.0,
            event_av: f_score(c.audio + c.visual),
        }
    }

    /// Macro average over videos; the Type aggregate is recomputed from the
    /// three averaged scores.
    fn mean(scores: &[TypeScores]) -> Self {
        let n = scores.len().max(1) as f64;
        let avg = |f: fn(&TypeScores) -> f64| scores.iter().map(f).sum::<f64>() / n;
        let (audio, visual, av) = (avg(|s| s.audio), avg(|s| s.visual), avg(|s| s.av));
        Self {
            audio,
            visual,
            av,
            type_av: (audio + visual + av) / 3.0,
            event_av: avg(|s| s.event_av),
        }
    }
}

fn cell_counts(pred: &BinaryGrid, gt: &BinaryGrid) -> Counts {
    let mut c = Counts::default();
    for (pr, gr) in pred.iter().zip(gt) {
        for (&p, &g) in pr.iter().zip(gr) {
            match (p, g) {
                (1, 1) => c.tp += 1,
                (1, _) => c.fp += 1,
                (_, 1) => c.fn_ += 1,
                _ => {}
            }
        }
    }
    c
}

pub fn segment_counts(v: &VideoGrids<'_>) -> Result<TypeCounts> {
    v.check()?;
    Ok(TypeCounts {
        audio: cell_counts(v.pred_audio, v.gt_audio),
        visual: cell_counts(v.pred_visual, v.gt_visual),
        av: cell_counts(
            &conjunction(v.pred_visual, v.pred_audio),
            &conjunction(v.gt_visual, v.gt_audio),
        ),
    })
}

fn event_counts_grid(pred: &BinaryGrid, gt: &BinaryGrid, threshold: f64) -> Result<Counts> {
    let classes = gt.first().map_or(0, Vec::len);
    let mut total = Counts::default();
    for c in 0..classes {
        let column = |g: &BinaryGrid| g.iter().map(|r| r[c]).collect::<Vec<u8>>();
        let p = extract_events(&column(pred))?;
        let g = extract_events(&column(gt))?;
        total = total + match_events(&p, &g, threshold);
    }
    Ok(total)
}

fn check_threshold(threshold: f64) -> Result<()> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::Config(format!("IoU threshold {threshold} outside (0, 1]")));
    }
    Ok(())
}

pub fn event_counts(v: &VideoGrids<'_>, threshold: f64) -> Result<TypeCounts> {
    check_threshold(threshold)?;
    v.check()?;
    Ok(TypeCounts {
        audio: event_counts_grid(v.pred_audio, v.gt_audio, threshold)?,
        visual: event_counts_grid(v.pred_visual, v.gt_visual, threshold)?,
        av: event_counts_grid(
            &conjunction(v.pred_visual, v.pred_audio),
            &conjunction(v.gt_visual, v.gt_audio),
            threshold,
        )?,
    })
}

/// Dataset score plus the per-video scores it averages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelReport {
    pub dataset: TypeScores,
    pub videos: Vec<TypeScores>,
}

pub fn segment_f1_report(videos: &[VideoGrids<'_>]) -> Result<LevelReport> {
    let per: Vec<TypeScores> = videos
        .iter()
        .map(|v| segment_counts(v).map(|c| TypeScores::from_counts(&c)))
        .collect::<Result<_>>()?;
    Ok(LevelReport {
        dataset: TypeScores::mean(&per),
        videos: per,
    })
}

pub fn event_f1_report(videos: &[VideoGrids<'_>], iou_threshold: f64) -> Result<LevelReport> {
    check_threshold(iou_threshold)?;
    let per: Vec<TypeScores> = videos
        .iter()
        .map(|v| event_counts(v, iou_threshold).map(|c| TypeScores::from_counts(&c)))
        .collect::<Result<_>>()?;
    Ok(LevelReport {
        dataset: TypeScores::mean(&per),
        videos: per,
    })
}

/// Swaps the roles of prediction and ground truth in a count table.
pub fn swap_roles(c: TypeCounts) -> TypeCounts {
    c.swapped()
}

/// Converts a `T x C` grid to one label per segment; rows with more than one
/// positive class are rejected.
pub fn single_labels(grid: &BinaryGrid) -> Result<Vec<Option<usize>>> {
    grid.iter()
        .enumerate()
        .map(|(t, row)| {
            let mut hits = row.iter().enumerate().filter(|(_, &v)| v == 1).map(|(c, _)| c);
            let first = hits.next();
            if hits.next().is_some() {
                return Err(Error::Mode(format!("segment {t} carries more than one label")));
            }
            Ok(first)
        })
        .collect()
}

/// Per segment, the class maximizing `p_v * p_a` if that product reaches
/// `tau^2`, otherwise background; accuracy over all segments.
pub fn ave_accuracy(preds: &[SegmentPredictions], gt: &[Vec<Option<usize>>], tau: f64) -> Result<f64> {
    if preds.len() != gt.len() {
        return Err(Error::shape("prediction and ground-truth video counts differ"));
    }
    let (mut hit, mut total) = (0usize, 0usize);
    for (p, g) in preds.iter().zip(gt) {
        if g.len() != p.segments {
            return Err(Error::shape("ground truth does not cover every segment"));
        }
        for (t, truth) in g.iter().enumerate() {
            let mut best: Option<(usize, f64)> = None;
            for c in 0..p.classes {
                let s = p.visual_at(t, c) * p.audio_at(t, c);
                if best.is_none_or(|(_, b)| s > b) {
                    best = Some((c, s));
                }
            }
            let label = best.filter(|&(_, s)| s >= tau * tau).map(|(c, _)| c);
            hit += usize::from(label == *truth);
            total += 1;
        }
    }
    Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
}

/// Column names of the printed table, in order.
pub const TABLE_COLUMNS: [&str; 10] = [
    "Seg-A", "Seg-V", "Seg-AV", "Seg-Type", "Seg-Event", "Evt-A", "Evt-V", "Evt-AV", "Evt-Type", "Evt-Event",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoScores {
    pub video_id: String,
    pub segment: TypeScores,
    pub event: TypeScores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub segment: TypeScores,
    pub event: TypeScores,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ave_accuracy: Option<f64>,
    pub videos: Vec<VideoScores>,
}

impl MetricReport {
    /// Scores every video; `ids` name the videos in `grids` order.
    pub fn build(ids: &[String], grids: &[VideoGrids<'_>], iou_threshold: f64) -> Result<Self> {
        let seg = segment_f1_report(grids)?;
        let evt = event_f1_report(grids, iou_threshold)?;
        let videos = ids
            .iter()
            .zip(seg.videos.iter().zip(&evt.videos))
            .map(|(id, (s, e))| VideoScores {
                video_id: id.clone(),
                segment: *s,
                event: *e,
            })
            .collect();
        Ok(Self {
            segment: seg.dataset,
            event: evt.dataset,
            ave_accuracy: None,
            videos,
        })
    }

    pub fn row(&self) -> [f64; 10] {
        let (s, e) = (&self.segment, &self.event);
        [
            s.audio, s.visual, s.av, s.type_av, s.event_av, e.audio, e.visual, e.av, e.type_av, e.event_av,
        ]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// Header plus one row, scores times 100 with one decimal.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let header: Vec<String> = TABLE_COLUMNS.iter().map(|c| format!("{c:>9}")).collect();
        let _ = writeln!(out, "{}", header.join(" "));
        let row: Vec<String> = self.row().iter().map(|v| format!("{:>9.1}", v * 100.0)).collect();
        let _ = writeln!(out, "{}", row.join(" "));
        if let Some(acc) = self.ave_accuracy {
            let _ = writeln!(out, "accuracy {:.1}", acc * 100.0);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn column(values: &[u8]) -> BinaryGrid {
        values.iter().map(|&v| vec![v]).collect()
    }

    #[test]
    fn extraction_cases() {
        assert_eq!(extract_events(&[0, 1, 1, 0, 0, 1, 1, 0, 0, 0]).unwrap(), vec![(1, 3), (5, 7)]);
        assert!(extract_events(&[0; 10]).unwrap().is_empty());
        assert_eq!(extract_events(&[1; 10]).unwrap(), vec![(0, 10)]);
        assert!(matches!(extract_events(&[0, 2]), Err(Error::Domain(_))));
    }

    #[test]
    fn five_versus_ten_segments() {
        let gt = column(&[1, 1, 1, 1, 1, 0, 0, 0, 0, 0]);
        let pred = column(&[1; 10]);
        let empty = column(&[0; 10]);
        let v = VideoGrids {
            pred_visual: &empty,
            pred_audio: &pred,
            gt_visual: &empty,
            gt_audio: &gt,
        };
        let c = segment_counts(&v).unwrap();
        assert_eq!(c.audio, Counts { tp: 5, fp: 5, fn_: 0 });
        assert!((f_score(c.audio) - 2.0 / 3.0).abs() < 1e-9);
        assert_eq!(f_score(c.visual), 1.0);
    }

    #[test]
    fn low_overlap_does_not_match() {
        let c = match_events(&[(0, 4)], &[(2, 6)], 0.5);
        assert_eq!(c, Counts { tp: 0, fp: 1, fn_: 1 });
        assert_eq!(f_score(c), 0.0);
        assert!((temporal_iou((0, 4), (2, 6)) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn threshold_must_be_in_range() {
        let g = column(&[1, 0]);
        let v = VideoGrids {
            pred_visual: &g,
            pred_audio: &g,
            gt_visual: &g,
            gt_audio: &g,
        };
        assert!(matches!(event_counts(&v, 0.0), Err(Error::Config(_))));
        assert!(matches!(event_counts(&v, 1.5), Err(Error::Config(_))));
        assert!(event_counts(&v, 1.0).is_ok());
    }

    #[test]
    fn perfect_predictions_score_one() {
        let a: BinaryGrid = vec![vec![1, 0], vec![1, 1], vec![0, 1]];
        let b: BinaryGrid = vec![vec![0, 0], vec![1, 1], vec![1, 1]];
        let v = VideoGrids {
            pred_visual: &a,
            pred_audio: &b,
            gt_visual: &a,
            gt_audio: &b,
        };
        let r = MetricReport::build(&["x".into()], &[v], 0.5).unwrap();
        assert!(r.row().iter().all(|&s| s == 1.0));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let a: BinaryGrid = vec![vec![1, 0]];
        let b: BinaryGrid = vec![vec![1, 0, 0]];
        let v = VideoGrids {
            pred_visual: &a,
            pred_audio: &b,
            gt_visual: &a,
            gt_audio: &a,
        };
        assert!(matches!(segment_counts(&v), Err(Error::Shape(_))));
    }

    #[test]
    fn table_has_ten_columns() {
        let r = MetricReport {
            segment: TypeScores::default(),
            event: TypeScores::default(),
            ave_accuracy: None,
            videos: vec![],
        };
        let t = r.table();
        let header: Vec<&str> = t.lines().next().unwrap().split_whitespace().collect();
        assert_eq!(header, TABLE_COLUMNS);
        assert_eq!(t.lines().nth(1).unwrap().split_whitespace().count(), 10);
    }

    #[test]
    fn single_label_accuracy() {
        let preds = SegmentPredictions {
            segments: 2,
            classes: 2,
            visual_probs: vec![0.99, 0.01, 0.1, 0.1],
            audio_probs: vec![0.99, 0.01, 0.1, 0.2],
            visual_logits: vec![0.0; 4],
            audio_logits: vec![0.0; 4],
            video_probs: vec![0.0; 2],
            w_modal: vec![],
            w_time: vec![],
        };
        assert_eq!(ave_accuracy(std::slice::from_ref(&preds), &[vec![Some(0), None]], 0.5).unwrap(), 1.0);
        assert_eq!(ave_accuracy(&[preds], &[vec![Some(1), None]], 0.5).unwrap(), 0.5);
        assert!(matches!(single_labels(&vec![vec![1, 1]]), Err(Error::Mode(_))));
        assert_eq!(single_labels(&vec![vec![0, 1], vec![0, 0]]).unwrap(), vec![Some(1), None]);
    }
}
