//! Confusion counts and mIoU / precision / recall.

use std::ops::AddAssign;

use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::par;

/// Per-class TP/FP/FN for classes `0..=classes` (index 0 is background).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
}

impl ConfusionCounts {
    pub fn new(classes: usize) -> Self {
        ConfusionCounts {
            tp: vec![0; classes + 1],
            fp: vec![0; classes + 1],
            fn_: vec![0; classes + 1],
        }
    }

    /// Number of foreground classes.
    pub fn classes(&self) -> usize {
        self.tp.len() - 1
    }

    /// Class appears in prediction or ground truth.
    pub fn present(&self, c: usize) -> bool {
        self.tp[c] + self.fp[c] + self.fn_[c] > 0
    }

    pub fn iou(&self, c: usize) -> Option<f64> {
        let d = self.tp[c] + self.fp[c] + self.fn_[c];
        (d > 0).then(|| self.tp[c] as f64 / d as f64)
    }

    /// `None` if the class is absent from both maps; 0 for a zero denominator otherwise.
    pub fn precision(&self, c: usize) -> Option<f64> {
        self.present(c).then(|| ratio(self.tp[c], self.tp[c] + self.fp[c]))
    }

    pub fn recall(&self, c: usize) -> Option<f64> {
        self.present(c).then(|| ratio(self.tp[c], self.tp[c] + self.fn_[c]))
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

impl AddAssign<&ConfusionCounts> for ConfusionCounts {
    fn add_assign(&mut self, o: &ConfusionCounts) {
        for (a, b) in self.tp.iter_mut().zip(&o.tp) {
            *a += b;
        }
        for (a, b) in self.fp.iter_mut().zip(&o.fp) {
            *a += b;
        }
        for (a, b) in self.fn_.iter_mut().zip(&o.fn_) {
            *a += b;
        }
    }
}

/// Counts over all pixels whose ground truth is not `ignore`.
pub fn confusion(pred: &LabelMap, gt: &LabelMap, classes: usize, ignore: Option<u8>) -> Result<ConfusionCounts> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::shape(
            "confusion",
            &[pred.height, pred.width],
            &[gt.height, gt.width],
        ));
    }
    let mut out = ConfusionCounts::new(classes);
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        if Some(g) == ignore {
            continue;
        }
        let (p, g) = (p as usize, g as usize);
        if p > classes || g > classes {
            return Err(Error::invalid(
                "confusion",
                format!("label {} exceeds {classes} classes", p.max(g)),
            ));
        }
        if p == g {
            out.tp[p] += 1;
        } else {
            out.fp[p] += 1;
            out.fn_[g] += 1;
        }
    }
    Ok(out)
}

/// Per-image counts and their sum, reduced in input order.
pub fn confusion_all(
    pairs: &[(&LabelMap, &LabelMap)],
    classes: usize,
    ignore: Option<u8>,
) -> Result<(ConfusionCounts, Vec<ConfusionCounts>)> {
    let each: Vec<ConfusionCounts> = par::map_slice(pairs, |(p, g)| confusion(p, g, classes, ignore))
        .into_iter()
        .collect::<Result<_>>()?;
    let mut total = ConfusionCounts::new(classes);
    for c in &each {
        total += c;
    }
    Ok((total, each))
}

fn mean_over(counts: &ConfusionCounts, include_background: bool, f: impl Fn(usize) -> Option<f64>) -> f64 {
    let start = if include_background { 0 } else { 1 };
    let vals: Vec<f64> = (start..=counts.classes()).filter_map(f).collect();
    if vals.is_empty() {
        0.0
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

pub fn miou(counts: &ConfusionCounts, include_background: bool) -> f64 {
    mean_over(counts, include_background, |c| counts.iou(c))
}

pub fn precision(counts: &ConfusionCounts, include_background: bool) -> f64 {
    mean_over(counts, include_background, |c| counts.precision(c))
}

pub fn recall(counts: &ConfusionCounts, include_background: bool) -> f64 {
    mean_over(counts, include_background, |c| counts.recall(c))
}

/// `{ "<class>": {tp, fp, fn, iou, precision, recall}, mean_iou, mean_precision, mean_recall,
/// include_background }`; classes absent from both maps report null ratios.
pub fn report(counts: &ConfusionCounts, include_background: bool) -> Value {
    let mut obj = Map::new();
    let start = if include_background { 0 } else { 1 };
    for c in start..=counts.classes() {
        obj.insert(
            c.to_string(),
            json!({
                "tp": counts.tp[c],
                "fp": counts.fp[c],
                "fn": counts.fn_[c],
                "iou": counts.iou(c),
                "precision": counts.precision(c),
                "recall": counts.recall(c),
            }),
        );
    }
    obj.insert("mean_iou".into(), json!(miou(counts, include_background)));
    obj.insert("mean_precision".into(), json!(precision(counts, include_background)));
    obj.insert("mean_recall".into(), json!(recall(counts, include_background)));
    obj.insert("include_background".into(), json!(include_background));
    Value::Object(obj)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction() {
        let g = LabelMap::new(2, 2, vec![0, 1, 2, 2]).unwrap();
        let c = confusion(&g, &g, 3, None).unwrap();
        assert!(c.fp.iter().chain(&c.fn_).all(|&v| v == 0));
        assert_eq!(
            (miou(&c, false), precision(&c, false), recall(&c, false)),
            (1.0, 1.0, 1.0)
        );
        assert_eq!(c.iou(3), None);
    }

    #[test]
    fn worked_two_by_two() {
        let p = LabelMap::new(2, 2, vec![1, 1, 1, 1]).unwrap();
        let g = LabelMap::new(2, 2, vec![1, 1, 0, 0]).unwrap();
        let c = confusion(&p, &g, 1, None).unwrap();
        assert_eq!((c.tp[1], c.fp[1], c.fn_[1]), (2, 2, 0));
        assert_eq!(miou(&c, false), 0.5);
        assert_eq!(precision(&c, false), 0.5);
        assert_eq!(recall(&c, false), 1.0);
        // background is only missed
        assert_eq!(miou(&c, true), 0.25);
    }

    #[test]
    fn ignore_and_range() {
        let p = LabelMap::new(1, 3, vec![1, 2, 0]).unwrap();
        let g = LabelMap::new(1, 3, vec![255, 2, 1]).unwrap();
        let c = confusion(&p, &g, 2, Some(255)).unwrap();
        assert_eq!((c.tp[2], c.fn_[1], c.fp[0], c.tp[1]), (1, 1, 1, 0));
        assert!(confusion(&p, &g, 2, None).is_err());
        assert!(confusion(&p, &LabelMap::background(3, 1), 2, None).is_err());
    }

    #[test]
    fn predicted_only_class_counts_as_zero() {
        let p = LabelMap::new(1, 2, vec![1, 2]).unwrap();
        let g = LabelMap::new(1, 2, vec![1, 1]).unwrap();
        let c = confusion(&p, &g, 3, None).unwrap();
        assert_eq!(c.recall(2), Some(0.0));
        assert_eq!(c.precision(2), Some(0.0));
        assert_eq!(recall(&c, false), 0.25);
    }

    #[test]
    fn report_fields() {
        let p = LabelMap::new(2, 2, vec![1, 1, 1, 1]).unwrap();
        let g = LabelMap::new(2, 2, vec![1, 1, 0, 0]).unwrap();
        let r = report(&confusion(&p, &g, 2, None).unwrap(), false);
        assert_eq!(r["1"]["tp"], 2);
        assert_eq!(r["1"]["iou"], 0.5);
        assert!(r["2"]["iou"].is_null());
        assert_eq!(r["mean_recall"], 1.0);
        assert_eq!(r["include_background"], false);
    }
}
