//! Part-segmentation scores: per-shape mIoU over the category's part types,
//! point accuracy, and per-category aggregation.
//!
//! A part absent from both prediction and ground truth scores IoU 1.

use std::collections::BTreeMap;
use std::fmt::Write as _;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("prediction has {pred} labels, ground truth {gt}")]
    Length { pred: usize, gt: usize },
    #[error("nothing to aggregate")]
    Empty,
}

/// Placeholder prediction for an output slot that maps to no part.
pub const NO_PART: usize = usize::MAX;

pub fn shape_miou(pred: &[usize], gt: &[usize], parts: &[usize]) -> Result<f64, MetricError> {
    if pred.len() != gt.len() {
        return Err(MetricError::Length {
            pred: pred.len(),
            gt: gt.len(),
        });
    }
    if parts.is_empty() {
        return Ok(1.0);
    }
    let mut total = 0.0;
    for &part in parts {
        let mut inter = 0usize;
        let mut union = 0usize;
        for (&p, &g) in pred.iter().zip(gt) {
            let (a, b) = (p == part, g == part);
            inter += usize::from(a && b);
            union += usize::from(a || b);
        }
        total += if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        };
    }
    Ok(total / parts.len() as f64)
}

pub fn accuracy(pred: &[usize], gt: &[usize]) -> Result<f64, MetricError> {
    if pred.len() != gt.len() {
        return Err(MetricError::Length {
            pred: pred.len(),
            gt: gt.len(),
        });
    }
    if gt.is_empty() {
        return Ok(1.0);
    }
    let hits = pred.iter().zip(gt).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / gt.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeScore {
    pub category: String,
    pub miou: f64,
    pub accuracy: f64,
}

impl ShapeScore {
    pub fn evaluate(
        category: &str,
        pred: &[usize],
        gt: &[usize],
        parts: &[usize],
    ) -> Result<Self, MetricError> {
        Ok(Self {
            category: category.to_string(),
            miou: shape_miou(pred, gt, parts)?,
            accuracy: accuracy(pred, gt)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategoryScore {
    pub miou: f64,
    pub accuracy: f64,
    pub shapes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegReport {
    pub shapes: Vec<ShapeScore>,
    pub categories: BTreeMap<String, CategoryScore>,
    /// Mean over categories of the category mIoU.
    pub mean_miou: f64,
    pub mean_accuracy: f64,
}

pub fn aggregate(shapes: Vec<ShapeScore>) -> Result<SegReport, MetricError> {
    if shapes.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut sums: BTreeMap<String, (f64, f64, usize)> = BTreeMap::new();
    for s in &shapes {
        let e = sums.entry(s.category.clone()).or_insert((0.0, 0.0, 0));
        e.0 += s.miou;
        e.1 += s.accuracy;
        e.2 += 1;
    }
    let categories: BTreeMap<String, CategoryScore> = sums
        .into_iter()
        .map(|(k, (m, a, n))| {
            (
                k,
                CategoryScore {
                    miou: m / n as f64,
                    accuracy: a / n as f64,
                    shapes: n,
                },
            )
        })
        .collect();
    let n = categories.len() as f64;
    let mean_miou = categories.values().map(|c| c.miou).sum::<f64>() / n;
    let mean_accuracy = categories.values().map(|c| c.accuracy).sum::<f64>() / n;
    Ok(SegReport {
        shapes,
        categories,
        mean_miou,
        mean_accuracy,
    })
}

impl SegReport {
    /// `scope,category,shape,miou,accuracy` with one row per shape, one per
    /// category and a final `mean` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scope,category,shape,miou,accuracy\n");
        let mut index: BTreeMap<&str, usize> = BTreeMap::new();
        for s in &self.shapes {
            let i = index.entry(&s.category).or_insert(0);
            let _ = writeln!(
                out,
                "shape,{},{},{:.6},{:.6}",
                s.category, i, s.miou, s.accuracy
            );
            *i += 1;
        }
        for (name, c) in &self.categories {
            let _ = writeln!(out, "category,{},,{:.6},{:.6}", name, c.miou, c.accuracy);
        }
        let _ = writeln!(
            out,
            "mean,,,{:.6},{:.6}",
            self.mean_miou, self.mean_accuracy
        );
        out
    }

    pub fn summary(&self) -> String {
        let mut out = String::from("category         shapes   mIoU     acc\n");
        for (name, c) in &self.categories {
            let _ = writeln!(
                out,
                "{:<16} {:>6}   {:>5.1}%   {:>5.1}%",
                name,
                c.shapes,
                100.0 * c.miou,
                100.0 * c.accuracy
            );
        }
        let _ = writeln!(
            out,
            "{:<16} {:>6}   {:>5.1}%   {:>5.1}%",
            "mean",
            self.shapes.len(),
            100.0 * self.mean_miou,
            100.0 * self.mean_accuracy
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction() {
        assert_eq!(
            shape_miou(&[0, 1, 1, 2], &[0, 1, 1, 2], &[0, 1, 2]).unwrap(),
            1.0
        );
        assert_eq!(accuracy(&[3, 4], &[3, 4]).unwrap(), 1.0);
    }

    #[test]
    fn hand_case() {
        let (gt, pred) = ([0, 0, 1, 1], [0, 1, 1, 1]);
        let m = shape_miou(&pred, &gt, &[0, 1]).unwrap();
        assert!((m - 7.0 / 12.0).abs() < 1e-12);
        assert_eq!(accuracy(&pred, &gt).unwrap(), 0.75);
    }

    #[test]
    fn absent_part_scores_one() {
        // part 2 appears nowhere
        let m = shape_miou(&[0, 0, 1], &[0, 0, 1], &[0, 1, 2]).unwrap();
        assert_eq!(m, 1.0);
        let m = shape_miou(&[0, 1], &[0, 0], &[0, 1, 2]).unwrap();
        assert!((m - (0.5 + 0.0 + 1.0) / 3.0).abs() < 1e-15);
    }

    #[test]
    fn disjoint_accuracy_and_length_errors() {
        assert_eq!(accuracy(&[1, 1], &[0, 0]).unwrap(), 0.0);
        assert!(accuracy(&[1], &[0, 0]).is_err());
        assert!(shape_miou(&[1], &[0, 0], &[0]).is_err());
    }

    #[test]
    fn aggregation() {
        let one = aggregate(vec![ShapeScore {
            category: "a".into(),
            miou: 0.4,
            accuracy: 0.5,
        }])
        .unwrap();
        assert_eq!(one.categories["a"].miou, 0.4);

        let mk = |c: &str, m| ShapeScore {
            category: c.into(),
            miou: m,
            accuracy: m,
        };
        let r = aggregate(vec![mk("a", 0.5), mk("a", 0.7), mk("b", 0.8)]).unwrap();
        assert!((r.categories["a"].miou - 0.6).abs() < 1e-15);
        assert!((r.mean_miou - 0.7).abs() < 1e-15);
        assert!(aggregate(vec![]).is_err());

        let eight: Vec<ShapeScore> = (0..8)
            .map(|i| mk(&format!("c{i}"), 0.1 * i as f64 + 0.05))
            .collect();
        let r = aggregate(eight).unwrap();
        let expected = (0..8).map(|i| 0.1 * i as f64 + 0.05).sum::<f64>() / 8.0;
        assert!((r.mean_miou - expected).abs() < 1e-15);
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 1 + 8 + 8 + 1);
        assert!(csv.lines().last().unwrap().starts_with("mean,"));
    }
}
