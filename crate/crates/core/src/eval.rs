//! Average precision at a fixed IoU, all-point interpolated.

use serde::{Deserialize, Serialize};

use crate::geometry::BBox;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    pub iou_threshold: f64,
    /// `None` for classes without ground truth; they are left out of the mean.
    pub per_class: Vec<Option<f64>>,
    pub map: f64,
}

/// Area under the monotone precision envelope. `hits` are the match flags of
/// detections sorted by descending score.
pub fn all_point_ap(hits: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(hits.len());
    let mut precision = Vec::with_capacity(hits.len());
    for (k, &h) in hits.iter().enumerate() {
        tp += h as usize;
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev) * p;
        prev = *r;
    }
    ap
}

/// Greedy matching of class `class_id` detections (highest score first) to
/// unmatched ground truth of the same image.
pub fn class_ap(preds: &[Vec<BBox>], gts: &[Vec<BBox>], class_id: usize, iou: f64) -> Option<f64> {
    let num_gt: usize = gts.iter().map(|g| g.iter().filter(|b| b.class_id == class_id).count()).sum();
    if num_gt == 0 {
        return None;
    }
    let mut dets: Vec<(f64, usize, BBox)> = preds
        .iter()
        .enumerate()
        .flat_map(|(img, p)| p.iter().filter(|b| b.class_id == class_id).map(move |b| (b.score, img, *b)))
        .collect();
    dets.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let hits: Vec<bool> = dets
        .iter()
        .map(|(_, img, d)| {
            let mut best = (iou, None);
            for (k, g) in gts[*img].iter().enumerate() {
                if g.class_id != class_id || used[*img][k] {
                    continue;
                }
                let o = d.iou(g);
                if o >= best.0 {
                    best = (o, Some(k));
                }
            }
            match best.1 {
                Some(k) => {
                    used[*img][k] = true;
                    true
                }
                None => false,
            }
        })
        .collect();
    Some(all_point_ap(&hits, num_gt))
}

pub fn evaluate(preds: &[Vec<BBox>], gts: &[Vec<BBox>], num_classes: usize, iou: f64) -> ApReport {
    assert_eq!(preds.len(), gts.len(), "one prediction list per image");
    let per_class: Vec<Option<f64>> = (0..num_classes).map(|c| class_ap(preds, gts, c, iou)).collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let map = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    ApReport {
        iou_threshold: iou,
        per_class,
        map,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions_score_one() {
        let gts = vec![
            vec![BBox::new(0.0, 0.0, 10.0, 10.0, 0), BBox::new(20.0, 20.0, 30.0, 30.0, 1)],
            vec![BBox::new(5.0, 5.0, 15.0, 25.0, 0)],
        ];
        let preds: Vec<Vec<BBox>> = gts.iter().map(|g| g.iter().map(|b| b.with_score(0.9)).collect()).collect();
        let r = evaluate(&preds, &gts, 3, 0.5);
        assert_eq!(r.map, 1.0);
        assert_eq!(r.per_class, vec![Some(1.0), Some(1.0), None]);
    }

    #[test]
    fn no_predictions_score_zero() {
        let gts = vec![vec![BBox::new(0.0, 0.0, 10.0, 10.0, 0)]];
        assert_eq!(evaluate(&[vec![]], &gts, 1, 0.5).map, 0.0);
    }

    #[test]
    fn duplicate_detections_count_as_false_positives() {
        let g = BBox::new(0.0, 0.0, 10.0, 10.0, 0);
        let preds = vec![vec![g.with_score(0.9), g.with_score(0.8)]];
        // precision 1 at recall 1, the duplicate arrives after full recall
        assert_eq!(class_ap(&preds, &[vec![g]], 0, 0.5), Some(1.0));
        let preds = vec![vec![BBox::new(40.0, 40.0, 50.0, 50.0, 0).with_score(0.95), g.with_score(0.5)]];
        assert_eq!(class_ap(&preds, &[vec![g]], 0, 0.5), Some(0.5));
    }
}
