//! Raw embedding export for external projection (t-SNE and the like).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::Restorer;
use crate::error::{Error, Result};
use crate::image::TensorImage;
use crate::network::Network;
use crate::priors::PriorBundle;

pub const EMBEDDINGS_FILE: &str = "embeddings.f32";
pub const EMBEDDINGS_MANIFEST: &str = "embeddings.json";

pub struct EmbeddingInput<'a> {
    pub class_label: String,
    pub image: &'a TensorImage,
    pub bundle: &'a PriorBundle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRow {
    pub image_id: String,
    pub class_label: String,
    /// Token mean of the degradation text embedding.
    pub e_d: Vec<f32>,
    pub i_d: Vec<f32>,
    pub z_d_pooled: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Silhouette {
    pub z_d_pooled: f64,
    pub e_d: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub model_id: String,
    pub rows: Vec<EmbeddingRow>,
    /// Present when there are at least two classes.
    pub silhouette: Option<Silhouette>,
}

fn f32s(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

pub fn export_embeddings(model: &Network, items: &[EmbeddingInput<'_>]) -> Result<EmbeddingTable> {
    let rows = items
        .iter()
        .map(|item| {
            let (i_d, z_d) = model.prompt_features(item.image, &item.bundle.e_d)?;
            Ok(EmbeddingRow {
                image_id: item.bundle.image_id.clone(),
                class_label: item.class_label.clone(),
                e_d: f32s(&item.bundle.e_d.pooled()),
                i_d: f32s(&i_d.0),
                z_d_pooled: f32s(&z_d.pooled()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<&str> = rows.iter().map(|r| r.class_label.as_str()).collect();
    let vecs = |f: fn(&EmbeddingRow) -> &Vec<f32>| {
        rows.iter().map(|r| f(r).iter().map(|&v| v as f64).collect()).collect::<Vec<Vec<f64>>>()
    };
    let silhouette = match (silhouette_score(&vecs(|r| &r.z_d_pooled), &labels), silhouette_score(&vecs(|r| &r.e_d), &labels))
    {
        (Some(z), Some(e)) => Some(Silhouette { z_d_pooled: z, e_d: e }),
        _ => None,
    };
    Ok(EmbeddingTable { model_id: model.model_id(), rows, silhouette })
}

/// Mean silhouette coefficient under Euclidean distance. Points alone in
/// their class score 0. `None` with fewer than two classes.
pub fn silhouette_score(points: &[Vec<f64>], labels: &[&str]) -> Option<f64> {
    assert_eq!(points.len(), labels.len());
    let mut classes: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        classes.entry(l).or_default().push(i);
    }
    if classes.len() < 2 {
        return None;
    }
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let mean_dist = |i: usize, members: &[usize]| {
        let others: Vec<usize> = members.iter().copied().filter(|&j| j != i).collect();
        others.iter().map(|&j| dist(&points[i], &points[j])).sum::<f64>() / others.len() as f64
    };
    let total: f64 = (0..points.len())
        .map(|i| {
            let own = &classes[labels[i]];
            if own.len() == 1 {
                return 0.0;
            }
            let a = mean_dist(i, own);
            let b = classes
                .iter()
                .filter(|(l, _)| **l != labels[i])
                .map(|(_, m)| mean_dist(i, m))
                .fold(f64::INFINITY, f64::min);
            let d = a.max(b);
            if d == 0.0 {
                0.0
            } else {
                (b - a) / d
            }
        })
        .sum();
    Some(total / points.len() as f64)
}

impl EmbeddingTable {
    /// Writes `embeddings.f32` (per row: `e_d`, `i_d`, `z_d_pooled` as
    /// little-endian f32) and an `embeddings.json` manifest.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
        let mut blob = Vec::new();
        let mut entries = Vec::with_capacity(self.rows.len());
        for r in &self.rows {
            entries.push(json!({"image_id": r.image_id, "class_label": r.class_label, "offset": blob.len()}));
            for v in r.e_d.iter().chain(&r.i_d).chain(&r.z_d_pooled) {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let dims = self.rows.first().map(|r| (r.e_d.len(), r.i_d.len(), r.z_d_pooled.len())).unwrap_or_default();
        let manifest = json!({
            "schema_version": 1,
            "model_id": self.model_id,
            "file": EMBEDDINGS_FILE,
            "dtype": "f32le",
            "fields": [["e_d", dims.0], ["i_d", dims.1], ["z_d_pooled", dims.2]],
            "rows": entries,
            "silhouette": self.silhouette,
        });
        let bin = dir.join(EMBEDDINGS_FILE);
        std::fs::write(&bin, blob).map_err(Error::io(&bin))?;
        let man = dir.join(EMBEDDINGS_MANIFEST);
        std::fs::write(&man, serde_json::to_vec_pretty(&manifest)?).map_err(Error::io(&man))
    }
}
