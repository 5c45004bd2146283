use ndarray::Array2;

use crate::error::{Error, Result};

/// Percentage of samples whose prediction equals the label.
pub fn top1_accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::invalid("accuracy of an empty set"));
    }
    if predictions.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(100.0 * hits as f64 / labels.len() as f64)
}

/// Percentage of samples that at least one model classifies correctly.
pub fn ens_accuracy(predictions: &[Vec<usize>], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::invalid("ensemble accuracy needs at least one model"));
    }
    if labels.is_empty() {
        return Err(Error::invalid("accuracy of an empty set"));
    }
    if predictions.iter().any(|p| p.len() != labels.len()) {
        return Err(Error::invalid("every model needs one prediction per label"));
    }
    let hits = (0..labels.len())
        .filter(|&i| predictions.iter().any(|p| p[i] == labels[i]))
        .count();
    Ok(100.0 * hits as f64 / labels.len() as f64)
}

fn cosine_rows(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let mut total = 0.0;
    for (ra, rb) in a.rows().into_iter().zip(b.rows()) {
        let dot = ra.dot(&rb);
        let na = ra.dot(&ra).sqrt();
        let nb = rb.dot(&rb).sqrt();
        total += if na == 0.0 || nb == 0.0 { 0.0 } else { dot / (na * nb) };
    }
    total / a.nrows() as f64
}

/// Mean per-sample cosine similarity between models' flattened
/// representations (one row per sample). With more than two models every
/// unordered pair is averaged.
pub fn student_cosine(representations: &[Array2<f64>]) -> Result<f64> {
    if representations.len() < 2 {
        return Err(Error::invalid("cosine similarity needs at least two models"));
    }
    let dim = representations[0].dim();
    if dim.0 == 0 || representations.iter().any(|r| r.dim() != dim) {
        return Err(Error::invalid("representations must share a non-empty shape"));
    }
    if representations.len() > 2 {
        log::debug!("averaging cosine similarity over all pairs of {} models", representations.len());
    }
    let mut total = 0.0;
    let mut pairs = 0;
    for i in 0..representations.len() {
        for j in i + 1..representations.len() {
            total += cosine_rows(&representations[i], &representations[j]);
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seven_of_ten() {
        let labels = vec![0; 10];
        let preds = vec![0, 0, 0, 0, 0, 0, 0, 1, 1, 1];
        assert_eq!(top1_accuracy(&preds, &labels).unwrap(), 70.0);
        assert!(top1_accuracy(&[], &[]).is_err());
    }

    #[test]
    fn disjoint_halves_give_full_ensemble() {
        let labels = vec![1, 1, 1, 1];
        let a = vec![1, 1, 0, 0];
        let b = vec![0, 0, 1, 1];
        assert_eq!(ens_accuracy(&[a.clone(), b], &labels).unwrap(), 100.0);
        assert_eq!(ens_accuracy(&[a.clone()], &labels).unwrap(), top1_accuracy(&a, &labels).unwrap());
    }

    #[test]
    fn cosine_identical_and_orthogonal() {
        let a = Array2::from_shape_vec((2, 2), vec![1.0, 0.0, 0.0, 2.0]).unwrap();
        let b = Array2::from_shape_vec((2, 2), vec![0.0, 3.0, 5.0, 0.0]).unwrap();
        assert!((student_cosine(&[a.clone(), a.clone()]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(student_cosine(&[a, b]).unwrap(), 0.0);
    }
}
