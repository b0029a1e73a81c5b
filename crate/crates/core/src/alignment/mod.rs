//! Image/text alignment measures: average cosine similarity of matched pairs and the
//! silhouette score of the modality clustering.

mod io;

pub use io::{read_embeddings, write_embeddings, EmbeddingSidecar, EMB_MAGIC};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Tower;
use crate::tensor::Tensor;

/// Tolerance on row norms for a set to count as normalized.
pub const UNIT_NORM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
}

impl Modality {
    pub fn code(self) -> u8 {
        match self {
            Modality::Image => 0,
            Modality::Text => 1,
        }
    }

    pub fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Modality::Image),
            1 => Ok(Modality::Text),
            other => Err(Error::Format(format!("unknown modality code {other}"))),
        }
    }
}

impl From<Tower> for Modality {
    fn from(t: Tower) -> Self {
        match t {
            Tower::Image => Modality::Image,
            Tower::Text => Modality::Text,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    vectors: Tensor,
    modality: Modality,
    class_ids: Vec<u32>,
    source: Option<String>,
    normalized: bool,
}

impl EmbeddingSet {
    /// `vectors` is `[n, d]`; `class_ids` has one entry per row.
    pub fn new(vectors: Tensor, modality: Modality, class_ids: Vec<u32>) -> Result<Self> {
        if vectors.rank() != 2 {
            return Err(Error::Input(format!("embedding matrix must be rank 2, got {:?}", vectors.shape())));
        }
        if class_ids.len() != vectors.rows() {
            return Err(Error::Input(format!(
                "{} class ids for {} vectors",
                class_ids.len(),
                vectors.rows()
            )));
        }
        let normalized = (0..vectors.rows()).all(|r| (norm(vectors.row(r)) - 1.0).abs() <= UNIT_NORM_TOL);
        Ok(Self {
            vectors,
            modality,
            class_ids,
            source: None,
            normalized,
        })
    }

    pub fn with_source(mut self, source: impl Into<String>) -> Self {
        self.source = Some(source.into());
        self
    }

    pub fn vectors(&self) -> &Tensor {
        &self.vectors
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn class_ids(&self) -> &[u32] {
        &self.class_ids
    }

    pub fn source(&self) -> Option<&str> {
        self.source.as_deref()
    }

    /// Whether every row had unit norm (within [`UNIT_NORM_TOL`]) when the set was built.
    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean cosine between each image and the text row `label_map[i]`.
pub fn average_cosine_similarity(images: &EmbeddingSet, texts: &EmbeddingSet, label_map: &[usize]) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::Input("average cosine similarity over an empty image set".into()));
    }
    if images.dim() != texts.dim() {
        return Err(Error::Input(format!("image dim {} differs from text dim {}", images.dim(), texts.dim())));
    }
    if label_map.len() != images.len() {
        return Err(Error::Input(format!("label map has {} entries for {} images", label_map.len(), images.len())));
    }
    let mut total = 0.0;
    for (i, &j) in label_map.iter().enumerate() {
        if j >= texts.len() {
            return Err(Error::Input(format!("image {i} maps to text {j}, but only {} texts exist", texts.len())));
        }
        let (a, b) = (images.vectors.row(i), texts.vectors.row(j));
        let (na, nb) = (norm(a), norm(b));
        if na == 0.0 || nb == 0.0 {
            let which = if na == 0.0 { format!("image {i}") } else { format!("text {j}") };
            return Err(Error::Degenerate(format!("{which} has zero norm")));
        }
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        total += dot / (na * nb);
    }
    Ok(total / images.len() as f64)
}

/// Maps each image to the text row with the same class id.
pub fn label_map_by_class(images: &EmbeddingSet, texts: &EmbeddingSet) -> Result<Vec<usize>> {
    images
        .class_ids()
        .iter()
        .enumerate()
        .map(|(i, c)| {
            texts
                .class_ids()
                .iter()
                .position(|t| t == c)
                .ok_or_else(|| Error::Input(format!("image {i} has class {c}, which no text embedding carries")))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    k: usize,
    cluster_ids: Vec<usize>,
    points: Tensor,
}

impl ClusterAssignment {
    /// Requires `k ≥ 2`, ids in `[0, k)` and no empty cluster.
    pub fn new(k: usize, cluster_ids: Vec<usize>, points: Tensor) -> Result<Self> {
        if k < 2 {
            return Err(Error::Input(format!("silhouette needs at least 2 clusters, got {k}")));
        }
        if points.rank() != 2 || points.rows() != cluster_ids.len() {
            return Err(Error::Input(format!(
                "{} cluster ids for points of shape {:?}",
                cluster_ids.len(),
                points.shape()
            )));
        }
        let mut sizes = vec![0usize; k];
        for (i, &c) in cluster_ids.iter().enumerate() {
            if c >= k {
                return Err(Error::Input(format!("point {i} has cluster id {c}, expected < {k}")));
            }
            sizes[c] += 1;
        }
        if let Some(empty) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::Input(format!("cluster {empty} is empty")));
        }
        Ok(Self { k, cluster_ids, points })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn cluster_ids(&self) -> &[usize] {
        &self.cluster_ids
    }

    pub fn points(&self) -> &Tensor {
        &self.points
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &c in &self.cluster_ids {
            sizes[c] += 1;
        }
        sizes
    }
}

/// Per-point silhouette `s(i) = (b − a) / max(a, b)` under the L2 metric. Points in
/// singleton clusters, and points with `a = b = 0`, score 0.
pub fn silhouette_values(assignment: &ClusterAssignment) -> Vec<f64> {
    let sizes = assignment.sizes();
    let pts = &assignment.points;
    let ids = &assignment.cluster_ids;
    (0..ids.len())
        .into_par_iter()
        .map(|i| {
            let own = ids[i];
            if sizes[own] == 1 {
                return 0.0;
            }
            let mut sums = vec![0.0; assignment.k];
            let xi = pts.row(i);
            for (j, &cj) in ids.iter().enumerate() {
                if j != i {
                    sums[cj] += l2_distance(xi, pts.row(j));
                }
            }
            let a = sums[own] / (sizes[own] - 1) as f64;
            let b = (0..assignment.k)
                .filter(|&c| c != own)
                .map(|c| sums[c] / sizes[c] as f64)
                .fold(f64::INFINITY, f64::min);
            let m = a.max(b);
            if m == 0.0 {
                0.0
            } else {
                (b - a) / m
            }
        })
        .collect()
}

/// Mean silhouette over all points. Per-point values may be computed in parallel; the
/// sum runs in point order, so results do not depend on the thread count.
pub fn silhouette_score(assignment: &ClusterAssignment) -> f64 {
    let values = silhouette_values(assignment);
    values.iter().sum::<f64>() / values.len() as f64
}

/// Two clusters: every image in cluster 0, every text in cluster 1.
pub fn modality_clusters(images: &EmbeddingSet, texts: &EmbeddingSet) -> Result<ClusterAssignment> {
    if images.is_empty() || texts.is_empty() {
        return Err(Error::Input(format!(
            "modality clustering needs both sets non-empty ({} images, {} texts)",
            images.len(),
            texts.len()
        )));
    }
    if images.dim() != texts.dim() {
        return Err(Error::Input(format!("image dim {} differs from text dim {}", images.dim(), texts.dim())));
    }
    let mut data = images.vectors.data().to_vec();
    data.extend_from_slice(texts.vectors.data());
    let points = Tensor::new(vec![images.len() + texts.len(), images.dim()], data)?;
    let mut ids = vec![0; images.len()];
    ids.extend(std::iter::repeat_n(1, texts.len()));
    ClusterAssignment::new(2, ids, points)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub acs: f64,
    pub ss: f64,
    pub n_images: usize,
    pub n_texts: usize,
    pub config_hash: String,
}

/// ACS over the class-matched pairs and silhouette of the modality clustering.
pub fn measure(images: &EmbeddingSet, texts: &EmbeddingSet, config_hash: &str) -> Result<AlignmentReport> {
    let label_map = label_map_by_class(images, texts)?;
    let acs = average_cosine_similarity(images, texts, &label_map)?;
    let ss = silhouette_score(&modality_clusters(images, texts)?);
    if !acs.is_finite() || !ss.is_finite() {
        return Err(Error::Degenerate(format!("non-finite alignment measures (acs {acs}, ss {ss})")));
    }
    Ok(AlignmentReport {
        acs,
        ss,
        n_images: images.len(),
        n_texts: texts.len(),
        config_hash: config_hash.to_string(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentDelta {
    /// `ss_ZS − ss_FT`; positive when the modalities moved closer.
    pub delta_ss: f64,
    /// `acs_FT − acs_ZS`; positive when matched pairs moved closer.
    pub delta_cos: f64,
}

pub fn alignment_delta(zs: &AlignmentReport, ft: &AlignmentReport) -> Result<AlignmentDelta> {
    if zs.config_hash != ft.config_hash {
        return Err(Error::Usage(format!(
            "alignment reports come from different evaluations ({} vs {})",
            zs.config_hash, ft.config_hash
        )));
    }
    Ok(AlignmentDelta {
        delta_ss: zs.ss - ft.ss,
        delta_cos: ft.acs - zs.acs,
    })
}

#[cfg(test)]
mod tests;
