//! Evaluation on unperturbed samples and the text report.

use std::fmt::Write as _;

use serde::Serialize;

use crate::data::{CLASS_NAMES, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::nn::Graph;
use crate::pipeline::checkpoint::Checkpoint;
use crate::pipeline::config::TrainConfig;
use crate::pipeline::model::{embed, FeatureBuilder, Model, Prepared};
use crate::signal::base_label;

const EVAL_BATCH: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub samples: usize,
    /// Recall per class; `None` when the class has no test samples.
    pub per_class: Vec<Option<f64>>,
    /// Mean recall over classes present in the test set.
    pub macro_accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl Report {
    pub fn from_predictions(truth: &[usize], predicted: &[usize], classes: usize) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::InvalidArgument("prediction count differs from label count".into()));
        }
        let mut confusion = vec![vec![0usize; classes]; classes];
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= classes || p >= classes {
                return Err(Error::InvalidArgument(format!("class {} out of range", t.max(p))));
            }
            confusion[t][p] += 1;
        }
        let per_class: Vec<Option<f64>> = confusion
            .iter()
            .enumerate()
            .map(|(c, row)| {
                let n: usize = row.iter().sum();
                (n > 0).then(|| row[c] as f64 / n as f64)
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let macro_accuracy = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        Ok(Self {
            samples: truth.len(),
            per_class,
            macro_accuracy,
            confusion,
        })
    }

    /// `key=value` lines followed by the confusion matrix, one row per true class.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "samples={}", self.samples).unwrap();
        writeln!(s, "macro_accuracy={:.6}", self.macro_accuracy).unwrap();
        for (c, r) in self.per_class.iter().enumerate() {
            let name = CLASS_NAMES.get(c).copied().unwrap_or("class");
            match r {
                Some(v) => writeln!(s, "recall.{c}.{name}={v:.6}").unwrap(),
                None => writeln!(s, "recall.{c}.{name}=n/a").unwrap(),
            }
        }
        writeln!(s, "[confusion]").unwrap();
        for row in &self.confusion {
            let cells: Vec<String> = row.iter().map(usize::to_string).collect();
            writeln!(s, "{}", cells.join(" ")).unwrap();
        }
        s
    }
}

/// Base-class predictions: arg-max cosine over virtual classes, collapsed by speed count.
pub fn predict(model: &Model, data: &[Prepared]) -> Result<Vec<usize>> {
    let fb = FeatureBuilder::new(&model.spec)?;
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(EVAL_BATCH) {
        let items: Vec<(&Prepared, f64)> = chunk.iter().map(|p| (p, 1.0)).collect();
        let batch = fb.batch(&items)?;
        let mut g = Graph::eval(&model.store);
        let emb = embed(&mut g, &model.spec, &batch)?;
        let (_, logits) = model.arcface.logits(&mut g, emb, None)?;
        let classes = g.value(logits).shape()[1];
        for row in g.value(logits).data().chunks(classes) {
            let v = row
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
                .0;
            out.push(base_label(v, model.speeds));
        }
    }
    Ok(out)
}

pub fn evaluate_model(model: &Model, data: &[Prepared]) -> Result<Report> {
    let predicted = predict(model, data)?;
    let truth: Vec<usize> = data.iter().map(|p| p.label).collect();
    Report::from_predictions(&truth, &predicted, NUM_CLASSES.max(model.base_classes))
}

/// Evaluates `ckpt` after checking that `cfg` produced it.
pub fn evaluate(ckpt: &Checkpoint, cfg: &TrainConfig, data: &[Prepared]) -> Result<Report> {
    ckpt.verify_config(cfg)?;
    evaluate_model(&ckpt.model()?, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_and_constant() {
        let truth: Vec<usize> = (0..50).map(|i| i % 5).collect();
        assert_eq!(Report::from_predictions(&truth, &truth, 5).unwrap().macro_accuracy, 1.0);
        let r = Report::from_predictions(&truth, &[2; 50], 5).unwrap();
        assert!((r.macro_accuracy - 0.2).abs() < 1e-15);
        assert!(r.to_text().contains("macro_accuracy=0.200000"));
    }

    proptest! {
        #[test]
        fn macro_matches_counting(pairs in proptest::collection::vec((0usize..5, 0usize..5), 1..200)) {
            let truth: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let pred: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            let r = Report::from_predictions(&truth, &pred, 5).unwrap();
            let mut recalls = Vec::new();
            for c in 0..5 {
                let total = truth.iter().filter(|&&t| t == c).count();
                if total > 0 {
                    let hit = truth.iter().zip(&pred).filter(|(&t, &p)| t == c && p == c).count();
                    recalls.push(hit as f64 / total as f64);
                }
            }
            let expect = recalls.iter().sum::<f64>() / recalls.len() as f64;
            prop_assert!((r.macro_accuracy - expect).abs() < 1e-12);
        }
    }
}
