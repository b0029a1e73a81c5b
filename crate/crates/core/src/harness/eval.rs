use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::alignment::{self, AlignmentReport, EmbeddingSet, Modality};
use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::model::{self, DualEncoderParams, TokenMatrix};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Schema {
    #[serde(rename = "ID")]
    Id,
    #[serde(rename = "DG")]
    Dg,
    #[serde(rename = "CF")]
    Cf,
}

impl Schema {
    pub const ALL: [Schema; 3] = [Schema::Id, Schema::Dg, Schema::Cf];

    pub fn as_str(self) -> &'static str {
        match self {
            Schema::Id => "ID",
            Schema::Dg => "DG",
            Schema::Cf => "CF",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "ID" => Ok(Schema::Id),
            "DG" => Ok(Schema::Dg),
            "CF" => Ok(Schema::Cf),
            _ => Err(Error::Config(format!("unknown schema `{s}` (expected ID, DG or CF)"))),
        }
    }
}

impl std::fmt::Display for Schema {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Test images of one evaluation set with the prompts of its classes.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub name: String,
    pub schema: Schema,
    pub images: TokenMatrix,
    pub labels: Vec<usize>,
    pub prompts: TokenMatrix,
    pub class_ids: Vec<u32>,
    /// Provenance hash of the source dataset; shared by ZS and FT reports.
    pub hash: String,
}

impl EvalSet {
    pub fn from_test_split(name: &str, schema: Schema, ds: &Dataset) -> Self {
        Self {
            name: name.to_string(),
            schema,
            images: ds.test.images.clone(),
            labels: ds.test.labels.clone(),
            prompts: ds.class_prompts(),
            class_ids: ds.class_ids(),
            hash: ds.provenance_hash(),
        }
    }
}

/// The training dataset and every evaluation set named by `config`, ID first.
pub fn build_eval_sets(config: &ExperimentConfig) -> Result<(Dataset, Vec<EvalSet>)> {
    let train = config.train.build()?;
    let mut sets = vec![EvalSet::from_test_split(&config.train.name, Schema::Id, &train)];
    for dg in &config.dg_eval {
        let shifted = data::domain_shift(&train, dg.sigma, dg.seed)?;
        sets.push(EvalSet::from_test_split(&dg.name, Schema::Dg, &shifted));
    }
    for cf in &config.cf_eval {
        let ds = cf.build()?;
        sets.push(EvalSet::from_test_split(&cf.name, Schema::Cf, &ds));
    }
    Ok((train, sets))
}

/// Accuracy and embeddings of one model on one evaluation set.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub accuracy: f64,
    pub image_embeddings: Tensor,
    pub text_embeddings: Tensor,
    pub report: AlignmentReport,
}

pub fn evaluate(params: &DualEncoderParams, set: &EvalSet) -> Result<Evaluation> {
    let image_embeddings = model::encode_image(params, &set.images)?;
    let text_embeddings = model::encode_text(params, &set.prompts)?;
    let scale = params.logit_scale().exp();
    let (n, c, d) = (image_embeddings.rows(), text_embeddings.rows(), image_embeddings.cols());
    let mut logits = vec![0.0; n * c];
    crate::autodiff::kernels::gemm_nt(image_embeddings.data(), text_embeddings.data(), &mut logits, n, d, c);
    logits.iter_mut().for_each(|v| *v *= scale);
    let preds = model::argmax_rows(&Tensor::new(vec![n, c], logits)?);
    let hits = preds.iter().zip(&set.labels).filter(|(p, l)| p == l).count();
    let accuracy = hits as f64 / n.max(1) as f64;
    let images = EmbeddingSet::new(
        image_embeddings.clone(),
        Modality::Image,
        set.labels.iter().map(|&l| set.class_ids[l]).collect(),
    )?;
    let texts = EmbeddingSet::new(text_embeddings.clone(), Modality::Text, set.class_ids.clone())?;
    let report = alignment::measure(&images, &texts, &set.hash)?;
    Ok(Evaluation {
        accuracy,
        image_embeddings,
        text_embeddings,
        report,
    })
}

/// Mean L2 distance between corresponding rows of the ZS and FT embeddings, images
/// and prompts together.
pub fn displacement(zs: &Evaluation, ft: &Evaluation) -> f64 {
    let pairs = [
        (&zs.image_embeddings, &ft.image_embeddings),
        (&zs.text_embeddings, &ft.text_embeddings),
    ];
    let mut total = 0.0;
    let mut rows = 0;
    for (a, b) in pairs {
        for r in 0..a.rows() {
            total += a.row(r).iter().zip(b.row(r)).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            rows += 1;
        }
    }
    total / rows as f64
}
