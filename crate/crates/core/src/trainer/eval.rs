use std::path::Path;

use super::checkpoint::Checkpoint;
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::models::Model;
use crate::tensor::Tensor;

/// Accuracy and confusion counts, `confusion[true][predicted]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub confusion: Vec<Vec<usize>>,
    pub correct: usize,
    pub total: usize,
}

/// Index of the largest entry; ties go to the lower index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

fn predict(model: &Model, dataset: &Dataset, idx: &[usize]) -> Result<Vec<usize>> {
    let p = dataset.input_dim();
    let mut data = Vec::with_capacity(idx.len() * p);
    for &i in idx {
        data.extend_from_slice(dataset.samples[i].views[0].pixels());
    }
    let x = Tensor::from_parts(vec![idx.len(), p], data);
    let z = model.encoder.0.forward(&x)?;
    let logits = model.decoder.0.forward(&z)?;
    let c = logits.cols();
    Ok(logits.data().chunks(c).map(argmax).collect())
}

/// Classifies view C of every sample in `split`. Rows are independent, so
/// splitting the work over `threads` does not change any prediction.
pub fn evaluate(
    model: &Model,
    dataset: &Dataset,
    split: Split,
    threads: usize,
) -> Result<Evaluation> {
    if model.input_dim() != dataset.input_dim() {
        return Err(Error::shape(
            "evaluate",
            &[model.input_dim()],
            &[dataset.input_dim()],
        ));
    }
    let idx = dataset.split_indices(split);
    if idx.is_empty() {
        return Err(Error::EmptySplit(split.name().into()));
    }
    let threads = threads.clamp(1, idx.len());
    let chunk = idx.len().div_ceil(threads);
    let preds: Vec<usize> = if threads == 1 {
        predict(model, dataset, &idx)?
    } else {
        let parts = std::thread::scope(|s| {
            let handles: Vec<_> = idx
                .chunks(chunk)
                .map(|c| s.spawn(move || predict(model, dataset, c)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("evaluation worker panicked"))
                .collect::<Vec<_>>()
        });
        let mut all = Vec::with_capacity(idx.len());
        for p in parts {
            all.extend(p?);
        }
        all
    };
    let k = model.classes().max(dataset.n_classes());
    let mut confusion = vec![vec![0usize; k]; k];
    let mut correct = 0;
    for (&i, &pred) in idx.iter().zip(&preds) {
        let label = dataset.samples[i].label;
        confusion[label][pred] += 1;
        correct += usize::from(label == pred);
    }
    Ok(Evaluation {
        accuracy: correct as f64 / idx.len() as f64,
        confusion,
        correct,
        total: idx.len(),
    })
}

pub fn evaluate_checkpoint(
    path: &Path,
    dataset: &Dataset,
    split: Split,
    threads: usize,
) -> Result<Evaluation> {
    let model = Checkpoint::load(path)?.model()?;
    evaluate(&model, dataset, split, threads)
}
