use super::{ImageEncoderProvider, PriorBundle};
use crate::error::{Error, Result};
use crate::image::TensorImage;

/// Cosine similarity; 0 when either vector has zero norm.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "cosine_similarity length mismatch");
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// `K×K` cosine similarities: row `i` is the reference of bundle `i`,
/// column `j` is ground-truth image `j`.
pub fn reference_similarity_report(
    bundles: &[PriorBundle],
    ground_truth: &[TensorImage],
    encoder: &dyn ImageEncoderProvider,
) -> Result<Vec<Vec<f64>>> {
    let refs: Vec<&TensorImage> = bundles.iter().map(|b| &b.reference).collect();
    similarity_matrix(&refs, &ground_truth.iter().collect::<Vec<_>>(), encoder)
}

pub(crate) fn similarity_matrix(
    rows: &[&TensorImage],
    cols: &[&TensorImage],
    encoder: &dyn ImageEncoderProvider,
) -> Result<Vec<Vec<f64>>> {
    if rows.len() != cols.len() {
        return Err(Error::InvalidArgument(format!(
            "{} references but {} ground-truth images",
            rows.len(),
            cols.len()
        )));
    }
    let embed = |imgs: &[&TensorImage]| imgs.iter().map(|i| encoder.embed(i)).collect::<Result<Vec<_>>>();
    let (r, c) = (embed(rows)?, embed(cols)?);
    Ok(r.iter().map(|a| c.iter().map(|b| cosine_similarity(a, b)).collect()).collect())
}
