// Top-1 evaluation, softmax score matrices and late fusion of score sets.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Batch, Hgct};
use crate::skeleton::{DatasetSplit, SkeletonSequence};
use crate::tensor::{Scalar, Tensor};

/// Row-per-sample class scores with the labels needed to score them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    pub sample_ids: Vec<usize>,
    pub labels: Vec<usize>,
    pub classes: usize,
    /// Row-major `[n, classes]`.
    pub scores: Vec<f64>,
}

impl ScoreMatrix {
    pub fn new(sample_ids: Vec<usize>, labels: Vec<usize>, classes: usize, scores: Vec<f64>) -> Result<Self> {
        let n = labels.len();
        if sample_ids.len() != n || scores.len() != n * classes || classes == 0 {
            return Err(Error::dim(format!(
                "{} ids, {n} labels and {} scores do not form an [{n}, {classes}] matrix",
                sample_ids.len(),
                scores.len()
            )));
        }
        Ok(ScoreMatrix { sample_ids, labels, classes, scores })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.scores[i * self.classes..(i + 1) * self.classes]
    }

    pub fn predictions(&self) -> Vec<usize> {
        (0..self.len()).map(|i| argmax(self.row(i))).collect()
    }

    pub fn accuracy(&self) -> f64 {
        accuracy_of(&self.predictions(), &self.labels)
    }
}

/// First index of the maximum; NaN entries never win.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] || row[best].is_nan() {
            best = i;
        }
    }
    best
}

pub fn accuracy_of(predictions: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

pub(crate) fn count_hits<F: Scalar>(logits: &Tensor<F>, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    let rows = logits.to_f64_vec();
    labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| argmax(&rows[i * k..(i + 1) * k]) == l)
        .count()
}

fn softmax_rows(logits: &[f64], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(k) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|&x| (x - m).exp()).collect();
        let z: f64 = e.iter().sum();
        out.extend(e.into_iter().map(|x| x / z));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    /// `None` for classes absent from the split.
    pub per_class: Vec<Option<f64>>,
    pub scores: ScoreMatrix,
}

/// Eval-mode top-1 accuracy on a split that is already preprocessed and
/// resampled to the model's frame count.
pub fn evaluate<F: Scalar>(model: &Hgct<F>, split: &DatasetSplit, batch_size: usize) -> Result<EvalReport> {
    let k = model.config.num_classes;
    let mut scores = Vec::with_capacity(split.len() * k);
    for chunk in split.samples().chunks(batch_size.max(1)) {
        let refs: Vec<&SkeletonSequence> = chunk.iter().collect();
        let logits = model.predict(&Batch::<F>::from_sequences(&refs)?)?;
        scores.extend(softmax_rows(&logits.to_f64_vec(), k));
    }
    let labels = split.labels();
    let matrix = ScoreMatrix::new((0..split.len()).collect(), labels.clone(), k, scores)?;
    let preds = matrix.predictions();
    let mut hits = vec![0usize; k];
    let mut totals = vec![0usize; k];
    for (&p, &l) in preds.iter().zip(&labels) {
        totals[l] += 1;
        hits[l] += usize::from(p == l);
    }
    Ok(EvalReport {
        accuracy: accuracy_of(&preds, &labels),
        per_class: hits
            .iter()
            .zip(&totals)
            .map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64))
            .collect(),
        scores: matrix,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionReport {
    pub accuracy: f64,
    pub fused: ScoreMatrix,
}

/// `Σ w_i·S_i / Σ w_i`, unweighted by default. All sets must share sample
/// order, labels and class count.
pub fn fuse_scores(sets: &[ScoreMatrix], weights: Option<&[f64]>) -> Result<FusionReport> {
    let first = sets.first().ok_or_else(|| Error::Usage("no score sets to fuse".into()))?;
    for (i, s) in sets.iter().enumerate().skip(1) {
        if s.classes != first.classes || s.sample_ids != first.sample_ids || s.labels != first.labels {
            return Err(Error::dim(format!(
                "score set {i} does not align with set 0 (samples, labels or class count differ)"
            )));
        }
    }
    let uniform = vec![1.0; sets.len()];
    let w = weights.unwrap_or(&uniform);
    if w.len() != sets.len() {
        return Err(Error::Usage(format!("{} weights for {} score sets", w.len(), sets.len())));
    }
    let total: f64 = w.iter().sum();
    if w.iter().any(|&x| !(x >= 0.0)) || !(total > 0.0) {
        return Err(Error::Usage(format!("fusion weights {w:?} must be non-negative with a positive sum")));
    }
    let mut fused = vec![0.0; first.scores.len()];
    for (s, &wi) in sets.iter().zip(w) {
        for (f, &x) in fused.iter_mut().zip(&s.scores) {
            *f += wi * x;
        }
    }
    fused.iter_mut().for_each(|x| *x /= total);
    let fused = ScoreMatrix::new(first.sample_ids.clone(), first.labels.clone(), first.classes, fused)?;
    Ok(FusionReport {
        accuracy: fused.accuracy(),
        fused,
    })
}

/// CSV with columns `sample_id, label, s0 .. s{K-1}`.
pub fn write_scores_csv(m: &ScoreMatrix, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["sample_id".to_string(), "label".to_string()];
    header.extend((0..m.classes).map(|k| format!("s{k}")));
    w.write_record(&header)?;
    for i in 0..m.len() {
        let mut rec = vec![m.sample_ids[i].to_string(), m.labels[i].to_string()];
        // `{:?}` keeps the shortest exact representation
        rec.extend(m.row(i).iter().map(|x| format!("{x:?}")));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_scores_csv(path: &Path) -> Result<ScoreMatrix> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let classes = header.len().saturating_sub(2);
    if header.get(0) != Some("sample_id") || header.get(1) != Some("label") || classes == 0 {
        return Err(Error::Schema(format!(
            "{}: expected header `sample_id,label,s0,..`",
            path.display()
        )));
    }
    let (mut ids, mut labels, mut scores) = (Vec::new(), Vec::new(), Vec::new());
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| {
            Error::Parse {
                path: path.to_path_buf(),
                line: line + 2,
                message: format!("invalid {what}"),
            }
        };
        ids.push(rec[0].trim().parse().map_err(|_| bad("sample id"))?);
        labels.push(rec[1].trim().parse().map_err(|_| bad("label"))?);
        for field in rec.iter().skip(2) {
            scores.push(field.trim().parse::<f64>().map_err(|_| bad("score"))?);
        }
    }
    ScoreMatrix::new(ids, labels, classes, scores)
}
