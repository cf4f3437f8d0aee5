//! Test error, F1 scores and sparsity measures of a trained model.

use std::fmt;

use rayon::prelude::*;

use crate::dataset::SparseDataset;
use crate::error::{Error, Result};
use crate::model::WeightMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassScores {
    pub name: String,
    pub support: usize,
    pub predicted: usize,
    pub true_positives: usize,
    pub precision_pct: f64,
    pub recall_pct: f64,
    pub f1_pct: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub samples: usize,
    pub errors: usize,
    /// Test samples whose label is not among the model's classes.
    pub unknown_labels: usize,
    pub error_pct: f64,
    pub micro_f1_pct: f64,
    pub macro_f1_pct: f64,
    pub model_density_pct: f64,
    pub alpha_density_pct: Option<f64>,
    pub per_class: Vec<ClassScores>,
}

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        100.0 * 2.0 * tp as f64 / denom as f64
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

/// Evaluates `model` on `test`. Test labels are matched to the model's
/// classes by name; samples with an unseen label always count as errors.
pub fn evaluate(model: &WeightMatrix, test: &SparseDataset, alpha_density: Option<f64>) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let k = model.num_classes();
    let truth: Vec<Option<usize>> = test
        .label_names()
        .iter()
        .map(|name| model.label_names().iter().position(|m| m == name))
        .collect();
    let predictions: Vec<usize> = (0..test.len())
        .into_par_iter()
        .map(|i| model.predict(test.sample(i)))
        .collect();
    predictions_report(model, &predictions, test.labels().iter().map(|&y| truth[y]), k, alpha_density)
}

fn predictions_report(
    model: &WeightMatrix,
    predictions: &[usize],
    truth: impl Iterator<Item = Option<usize>>,
    k: usize,
    alpha_density: Option<f64>,
) -> Result<EvalReport> {
    let mut support = vec![0usize; k];
    let mut predicted = vec![0usize; k];
    let mut tp = vec![0usize; k];
    let mut unknown = 0;
    for (&p, y) in predictions.iter().zip(truth) {
        predicted[p] += 1;
        match y {
            Some(y) => {
                support[y] += 1;
                if y == p {
                    tp[y] += 1;
                }
            }
            None => unknown += 1,
        }
    }
    let n = predictions.len();
    let correct: usize = tp.iter().sum();
    let errors = n - correct;
    // pooled counts: every error is one false positive (for the predicted
    // class) and one false negative (for the true class, possibly unknown)
    let micro = f1(correct, errors, errors);
    let per_class: Vec<ClassScores> = (0..k)
        .map(|c| ClassScores {
            name: model.label_names()[c].clone(),
            support: support[c],
            predicted: predicted[c],
            true_positives: tp[c],
            precision_pct: ratio(tp[c], predicted[c]),
            recall_pct: ratio(tp[c], support[c]),
            f1_pct: f1(tp[c], predicted[c] - tp[c], support[c] - tp[c]),
        })
        .collect();
    let macro_f1 = per_class.iter().map(|s| s.f1_pct).sum::<f64>() / k as f64;
    Ok(EvalReport {
        samples: n,
        errors,
        unknown_labels: unknown,
        error_pct: ratio(errors, n),
        micro_f1_pct: micro,
        macro_f1_pct: macro_f1,
        model_density_pct: model.density(0.0),
        alpha_density_pct: alpha_density,
        per_class,
    })
}

impl EvalReport {
    pub const CSV_HEADER: &'static str =
        "samples,errors,unknown_labels,error_pct,micro_f1_pct,macro_f1_pct,model_density_pct,alpha_density_pct";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.4},{:.4},{:.4},{:.4},{}",
            self.samples,
            self.errors,
            self.unknown_labels,
            self.error_pct,
            self.micro_f1_pct,
            self.macro_f1_pct,
            self.model_density_pct,
            self.alpha_density_pct.map(|a| format!("{a:.4}")).unwrap_or_default()
        )
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "samples        {}", self.samples)?;
        writeln!(f, "errors         {}", self.errors)?;
        if self.unknown_labels > 0 {
            writeln!(f, "unknown labels {}", self.unknown_labels)?;
        }
        writeln!(f, "error          {:.2}%", self.error_pct)?;
        writeln!(f, "micro-F1       {:.2}%", self.micro_f1_pct)?;
        writeln!(f, "macro-F1       {:.2}%", self.macro_f1_pct)?;
        writeln!(f, "model density  {:.2}%", self.model_density_pct)?;
        if let Some(a) = self.alpha_density_pct {
            writeln!(f, "alpha density  {a:.2}%")?;
        }
        writeln!(f)?;
        writeln!(
            f,
            "{:<16} {:>8} {:>9} {:>9} {:>9} {:>9}",
            "class", "support", "predicted", "precision", "recall", "f1"
        )?;
        for s in &self.per_class {
            writeln!(
                f,
                "{:<16} {:>8} {:>9} {:>9.2} {:>9.2} {:>9.2}",
                s.name, s.support, s.predicted, s.precision_pct, s.recall_pct, s.f1_pct
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::parse_libsvm_str;

    fn model(weights: Vec<Vec<f64>>, names: &[&str]) -> WeightMatrix {
        WeightMatrix::from_vectors(weights, names.iter().map(|s| s.to_string()).collect()).unwrap()
    }

    #[test]
    fn perfect_predictions() {
        let w = model(vec![vec![1.0, 0.0], vec![0.0, 1.0]], &["a", "b"]);
        let ds = parse_libsvm_str("a 1:1\nb 2:1\na 1:2").unwrap();
        let r = evaluate(&w, &ds, None).unwrap();
        assert_eq!((r.error_pct, r.micro_f1_pct, r.macro_f1_pct), (0.0, 100.0, 100.0));
    }

    #[test]
    fn constant_prediction_on_balanced_pair() {
        let w = model(vec![vec![0.0, 0.0], vec![0.0, 0.0]], &["a", "b"]);
        let ds = parse_libsvm_str("a 1:1\nb 2:1\na 1:2\nb 2:3").unwrap();
        let r = evaluate(&w, &ds, None).unwrap();
        assert_eq!(r.error_pct, 50.0);
        // class a: tp 2, fp 2, fn 0 -> 2/3; class b never predicted -> 0
        assert!((r.macro_f1_pct - 100.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.micro_f1_pct, 50.0);
    }

    #[test]
    fn unknown_labels_are_errors() {
        let w = model(vec![vec![1.0, 0.0], vec![0.0, 1.0]], &["a", "b"]);
        let ds = parse_libsvm_str("a 1:1\nzz 2:1").unwrap();
        let r = evaluate(&w, &ds, None).unwrap();
        assert_eq!((r.errors, r.unknown_labels), (1, 1));
        assert_eq!(r.micro_f1_pct, 100.0 - r.error_pct);
    }

    #[test]
    fn test_label_order_need_not_match_model() {
        let w = model(vec![vec![1.0, 0.0], vec![0.0, 1.0]], &["a", "b"]);
        let ds = parse_libsvm_str("b 2:1\na 1:1").unwrap();
        assert_eq!(evaluate(&w, &ds, None).unwrap().errors, 0);
    }

    #[test]
    fn csv_row_has_header_arity() {
        let w = model(vec![vec![1.0], vec![0.0]], &["a", "b"]);
        let ds = parse_libsvm_str("a 1:1").unwrap();
        let r = evaluate(&w, &ds, Some(12.5)).unwrap();
        assert_eq!(
            r.csv_row().split(',').count(),
            EvalReport::CSV_HEADER.split(',').count()
        );
        assert!(r.to_string().contains("alpha density  12.50%"));
    }
}
