//! Classification metrics: top-k accuracy and mean average precision.

use crate::error::{Error, Result};

/// Fraction of rows whose true label is among the k highest scores. Ties
/// break toward the lower class index.
pub fn topk_accuracy(scores: &[f64], labels: &[usize], classes: usize, k: usize) -> Result<f64> {
    if k == 0 || k > classes {
        return Err(Error::Config(format!("top-k: k={k} out of 1..={classes}")));
    }
    if scores.len() != labels.len() * classes {
        return Err(Error::Shape {
            op: "topk_accuracy",
            lhs: vec![scores.len()],
            rhs: vec![labels.len(), classes],
        });
    }
    let mut hits = 0usize;
    for (row, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::Numeric(format!(
                "top-k: label {label} out of range for {classes} classes"
            )));
        }
        let s = &scores[row * classes..(row + 1) * classes];
        let mut order: Vec<usize> = (0..classes).collect();
        order.sort_by(|&a, &b| {
            s[b].partial_cmp(&s[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        if order[..k].contains(&label) {
            hits += 1;
        }
    }
    Ok(hits as f64 / labels.len() as f64)
}

#[derive(Debug, Clone)]
pub struct MapReport {
    pub map: f64,
    /// AP per class; None when the class had no positives and was excluded.
    pub per_class: Vec<Option<f64>>,
    pub excluded: Vec<usize>,
}

/// Average precision per class (precision at each positive's rank, no
/// interpolation), averaged over classes with at least one positive.
pub fn mean_average_precision(
    scores: &[f64],
    positives: &[bool],
    samples: usize,
    classes: usize,
) -> Result<MapReport> {
    if scores.len() != samples * classes || positives.len() != samples * classes {
        return Err(Error::Shape {
            op: "mean_average_precision",
            lhs: vec![scores.len(), positives.len()],
            rhs: vec![samples, classes],
        });
    }
    if !positives.iter().any(|&p| p) {
        return Err(Error::Numeric(
            "mean_average_precision: label matrix has no positives".into(),
        ));
    }
    let mut per_class = Vec::with_capacity(classes);
    let mut excluded = Vec::new();
    let mut total = 0.0f64;
    let mut counted = 0usize;
    for c in 0..classes {
        let mut order: Vec<usize> = (0..samples).collect();
        order.sort_by(|&a, &b| {
            scores[b * classes + c]
                .partial_cmp(&scores[a * classes + c])
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let n_pos = order.iter().filter(|&&s| positives[s * classes + c]).count();
        if n_pos == 0 {
            per_class.push(None);
            excluded.push(c);
            continue;
        }
        let mut seen_pos = 0usize;
        let mut ap = 0.0f64;
        for (rank, &sample) in order.iter().enumerate() {
            if positives[sample * classes + c] {
                seen_pos += 1;
                ap += seen_pos as f64 / (rank + 1) as f64;
            }
        }
        let ap = ap / n_pos as f64;
        per_class.push(Some(ap));
        total += ap;
        counted += 1;
    }
    Ok(MapReport {
        map: total / counted as f64,
        per_class,
        excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn one_hot_scores_are_perfect_at_k1() {
        let labels = [2usize, 0, 1];
        let mut scores = vec![0.0; 9];
        for (r, &l) in labels.iter().enumerate() {
            scores[r * 3 + l] = 1.0;
        }
        assert_eq!(topk_accuracy(&scores, &labels, 3, 1).unwrap(), 1.0);
    }

    #[test]
    fn k_equal_to_class_count_is_always_one() {
        let mut rng = Rng::seed(1);
        let scores: Vec<f64> = (0..40).map(|_| rng.normal()).collect();
        let labels = [0usize, 7, 3, 5, 1];
        assert_eq!(topk_accuracy(&scores, &labels, 8, 8).unwrap(), 1.0);
        assert!(topk_accuracy(&scores, &labels, 8, 9).is_err());
    }

    #[test]
    fn topk_matches_sort_oracle() {
        let mut rng = Rng::seed(2);
        let (samples, classes) = (50, 8);
        let scores: Vec<f64> = (0..samples * classes).map(|_| rng.normal()).collect();
        let labels: Vec<usize> = (0..samples).map(|_| rng.below(classes)).collect();
        for k in [1, 3, 5] {
            let got = topk_accuracy(&scores, &labels, classes, k).unwrap();
            // oracle: full sort of (score, class) per row
            let mut hits = 0;
            for (r, &l) in labels.iter().enumerate() {
                let mut row: Vec<(f64, usize)> = scores[r * classes..(r + 1) * classes]
                    .iter()
                    .cloned()
                    .zip(0..classes)
                    .collect();
                row.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
                if row[..k].iter().any(|&(_, c)| c == l) {
                    hits += 1;
                }
            }
            assert_eq!(got, hits as f64 / samples as f64);
        }
    }

    #[test]
    fn ties_break_to_lower_class_index() {
        // class 1 and 2 tie; top-1 must pick class 1
        let scores = [0.1, 0.4, 0.4];
        assert_eq!(topk_accuracy(&scores, &[1], 3, 1).unwrap(), 1.0);
        assert_eq!(topk_accuracy(&scores, &[2], 3, 1).unwrap(), 0.0);
    }

    #[test]
    fn label_out_of_range_rejected() {
        assert!(topk_accuracy(&[0.5, 0.5], &[2], 2, 1).is_err());
    }

    #[test]
    fn perfect_ranking_has_map_one() {
        // 4 samples, 2 classes, scores equal to the one-hot labels
        let positives = [true, false, false, true, true, false, false, true];
        let scores: Vec<f64> = positives.iter().map(|&p| if p { 1.0 } else { 0.0 }).collect();
        let report = mean_average_precision(&scores, &positives, 4, 2).unwrap();
        assert_eq!(report.map, 1.0);
    }

    #[test]
    fn single_positive_ranked_second_gives_half() {
        // one class, 4 samples; the positive has the second-highest score
        let scores = [0.9, 0.8, 0.3, 0.1];
        let positives = [false, true, false, false];
        let report = mean_average_precision(&scores, &positives, 4, 1).unwrap();
        assert_eq!(report.map, 0.5);
        assert_eq!(report.per_class[0], Some(0.5));
    }

    #[test]
    fn map_is_invariant_to_sample_order() {
        let mut rng = Rng::seed(5);
        let (samples, classes) = (20, 4);
        // distinct scores so ranking is unambiguous
        let scores: Vec<f64> = (0..samples * classes)
            .map(|i| rng.normal() + i as f64 * 1e-9)
            .collect();
        let positives: Vec<bool> = (0..samples * classes)
            .map(|_| rng.uniform() < 0.3)
            .collect();
        if !positives.iter().any(|&p| p) {
            return;
        }
        let base = mean_average_precision(&scores, &positives, samples, classes).unwrap();
        let perm = rng.permutation(samples);
        let mut s2 = vec![0.0; scores.len()];
        let mut p2 = vec![false; positives.len()];
        for (new, &old) in perm.iter().enumerate() {
            for c in 0..classes {
                s2[new * classes + c] = scores[old * classes + c];
                p2[new * classes + c] = positives[old * classes + c];
            }
        }
        let shuffled = mean_average_precision(&s2, &p2, samples, classes).unwrap();
        assert!((base.map - shuffled.map).abs() < 1e-12);
    }

    #[test]
    fn zero_positive_classes_are_excluded_and_reported() {
        // class 1 has no positives
        let scores = [0.9, 0.5, 0.2, 0.6, 0.1, 0.3];
        let positives = [true, false, false, false, true, false];
        let report = mean_average_precision(&scores, &positives, 3, 2).unwrap();
        assert_eq!(report.excluded, vec![1]);
        assert_eq!(report.per_class[1], None);
    }

    #[test]
    fn all_zero_labels_rejected() {
        let scores = [0.5, 0.5];
        let positives = [false, false];
        assert!(mean_average_precision(&scores, &positives, 1, 2).is_err());
    }
}
