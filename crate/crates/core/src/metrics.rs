//! Confusion counts, scores and split evaluation.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::data::{load_sample, DatasetManifest, Label, Origin, Split};
use crate::error::{Error, Result};
use crate::models::Model;
use crate::tensor::Tensor;

/// Scores with COVID as the positive class. A ratio whose denominator is
/// zero is reported as 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

impl Metrics {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        Metrics {
            tp,
            fp,
            fn_,
            tn,
            accuracy: ratio(tp + tn, tp + fp + fn_ + tn),
            precision,
            recall,
            f1: f1(precision, recall),
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Precision, recall and F1 averaged over both classes.
    pub fn macro_average(&self) -> (f64, f64, f64) {
        let neg = Metrics::from_counts(self.tn, self.fn_, self.fp, self.tp);
        (
            (self.precision + neg.precision) / 2.0,
            (self.recall + neg.recall) / 2.0,
            (self.f1 + neg.f1) / 2.0,
        )
    }
}

impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (mp, mr, mf) = self.macro_average();
        writeln!(f, "samples    {}", self.total())?;
        writeln!(
            f,
            "tp {}  fp {}  fn {}  tn {}",
            self.tp, self.fp, self.fn_, self.tn
        )?;
        writeln!(f, "accuracy   {:.6}", self.accuracy)?;
        writeln!(f, "precision  {:.6}", self.precision)?;
        writeln!(f, "recall     {:.6}", self.recall)?;
        writeln!(f, "f1         {:.6}", self.f1)?;
        write!(
            f,
            "macro      precision {mp:.6}  recall {mr:.6}  f1 {mf:.6}"
        )
    }
}

pub fn confusion_and_scores(predictions: &[Label], truths: &[Label]) -> Result<Metrics> {
    if predictions.len() != truths.len() {
        return Err(Error::Data(format!(
            "{} predictions for {} labels",
            predictions.len(),
            truths.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Data("no predictions to score".into()));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&p, &t) in predictions.iter().zip(truths) {
        match (p, t) {
            (Label::Covid, Label::Covid) => tp += 1,
            (Label::Covid, Label::Normal) => fp += 1,
            (Label::Normal, Label::Covid) => fn_ += 1,
            (Label::Normal, Label::Normal) => tn += 1,
        }
    }
    Ok(Metrics::from_counts(tp, fp, fn_, tn))
}

/// Argmax of a probability pair; a tie goes to class index 0.
pub fn predicted_label(probs: &[f64]) -> Label {
    let best = probs
        .iter()
        .enumerate()
        .fold(0, |best, (i, &p)| if p > probs[best] { i } else { best });
    Label::from_index(best)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub path: PathBuf,
    pub truth: Label,
    pub predicted: Label,
    pub p_covid: f64,
}

/// Stacks `h x w x 1` images into one `n x h x w x 1` batch.
pub fn stack(images: &[&Tensor]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Data("empty batch".into()))?;
    let mut data = Vec::with_capacity(images.len() * first.len());
    for img in images {
        if img.shape() != first.shape() {
            return Err(Error::dim(format!(
                "batch mixes shapes {:?} and {:?}",
                first.shape(),
                img.shape()
            )));
        }
        data.extend_from_slice(img.data());
    }
    let mut shape = vec![images.len()];
    shape.extend_from_slice(first.shape());
    Tensor::from_vec(&shape, data)
}

/// Inference-mode probabilities for a list of images, in batches.
pub fn infer_batched(model: &Model, images: &[&Tensor], batch: usize) -> Result<Vec<[f64; 2]>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch.max(1)) {
        let probs = model.infer(&stack(chunk)?)?;
        out.extend(probs.data().chunks_exact(2).map(|p| [p[0], p[1]]));
    }
    Ok(out)
}

pub const EVAL_BATCH: usize = 256;

/// Scores the original records of `split` with inference-mode forwards.
pub fn evaluate(
    model: &Model,
    manifest: &DatasetManifest,
    split: Split,
) -> Result<(Metrics, Vec<Prediction>)> {
    let records: Vec<_> = manifest
        .records
        .iter()
        .filter(|r| r.split == split && r.origin == Origin::Original)
        .collect();
    if records.is_empty() {
        return Err(Error::Data(format!("split {split} has no records")));
    }
    let images: Vec<Tensor> = records
        .par_iter()
        .map(|r| load_sample(&r.path))
        .collect::<Result<_>>()?;
    let refs: Vec<&Tensor> = images.iter().collect();
    let probs = infer_batched(model, &refs, EVAL_BATCH)?;
    let preds: Vec<Prediction> = records
        .iter()
        .zip(&probs)
        .map(|(r, p)| Prediction {
            path: r.path.clone(),
            truth: r.label,
            predicted: predicted_label(p),
            p_covid: p[Label::Covid.index()],
        })
        .collect();
    let metrics = confusion_and_scores(
        &preds.iter().map(|p| p.predicted).collect::<Vec<_>>(),
        &preds.iter().map(|p| p.truth).collect::<Vec<_>>(),
    )?;
    Ok((metrics, preds))
}

/// Writes `path,true,predicted,p_covid` rows followed by `#` footer lines
/// with the positive-class and macro-averaged scores.
pub fn write_listing(preds: &[Prediction], metrics: &Metrics, path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let enc = |e: csv::Error| Error::Data(format!("listing encoding failed: {e}"));
    w.write_record(["path", "true", "predicted", "p_covid"])
        .map_err(enc)?;
    for p in preds {
        w.write_record([
            p.path.to_string_lossy().as_ref(),
            p.truth.as_str(),
            p.predicted.as_str(),
            &format!("{:.6}", p.p_covid),
        ])
        .map_err(enc)?;
    }
    let mut bytes = w
        .into_inner()
        .map_err(|e| Error::Data(format!("listing encoding failed: {e}")))?;
    let (mp, mr, mf) = metrics.macro_average();
    bytes.extend_from_slice(
        format!(
            "# covid accuracy={:.6} precision={:.6} recall={:.6} f1={:.6}\n\
             # macro precision={mp:.6} recall={mr:.6} f1={mf:.6}\n",
            metrics.accuracy, metrics.precision, metrics.recall, metrics.f1
        )
        .as_bytes(),
    );
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
