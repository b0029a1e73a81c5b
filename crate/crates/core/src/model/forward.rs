//! Forward pass of both towers on a [`Graph`], and the losses built on it.

use std::collections::BTreeMap;

use super::batch::{Batch, TokenMatrix};
use super::params::{path, DualEncoderParams, Tower, IN_PROJ_BIAS, IN_PROJ_WEIGHT, LOGIT_SCALE, OUT_PROJ_BIAS, OUT_PROJ_WEIGHT};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::peft::bottleneck_path;
use crate::tensor::Tensor;

/// Rows per forward pass when encoding without gradients.
pub const ENCODE_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Symmetric image/caption InfoNCE over the batch.
    Contrastive,
    /// Cross-entropy of image embeddings against one prompt embedding per class.
    Classification,
}

/// Parameters placed on a graph as leaves, keyed by path.
pub struct Bound<'p> {
    params: &'p DualEncoderParams,
    vars: BTreeMap<String, Var>,
}

impl<'p> Bound<'p> {
    /// Binds every parameter; only paths accepted by `trainable` receive gradients.
    pub fn new(g: &mut Graph, params: &'p DualEncoderParams, trainable: &dyn Fn(&str) -> bool) -> Self {
        let vars = params
            .iter()
            .map(|(name, t)| (name.clone(), g.leaf(name, t, trainable(name))))
            .collect();
        Self { params, vars }
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} is not bound"))
    }

    /// Gradients of every bound path that requested one; untouched paths get zeros.
    pub fn grads(&self, g: &Graph, trainable: &dyn Fn(&str) -> bool) -> BTreeMap<String, Vec<f64>> {
        self.vars
            .iter()
            .filter(|(name, _)| trainable(name))
            .map(|(name, &v)| {
                let grad = g
                    .grad(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; g.value(v).len()]);
                (name.clone(), grad)
            })
            .collect()
    }

    /// The weight at `name`, with its LoRA update `B·A` added when one is attached.
    fn weight(&self, g: &mut Graph, name: &str) -> Result<Var> {
        let w = self.var(name);
        match self.params.adapters().and_then(|a| a.lora_for(name)) {
            Some((a, b)) => {
                let ba = g.matmul(self.var(&b), self.var(&a))?;
                g.add(w, ba)
            }
            None => Ok(w),
        }
    }

    /// `x · Wᵀ + b` for a `[out, in]` weight.
    fn linear(&self, g: &mut Graph, x: Var, weight: &str, bias: &str) -> Result<Var> {
        let w = self.weight(g, weight)?;
        let y = g.matmul_t(x, w)?;
        g.add(y, self.var(bias))
    }

    fn attention(&self, g: &mut Graph, t: Tower, block: usize, x: Var) -> Result<Var> {
        let c = self.params.config();
        let (d, heads, hd) = (c.embed_dim, c.heads, c.head_dim());
        let qkv = self.linear(g, x, &path::attn(t, block, IN_PROJ_WEIGHT), &path::attn(t, block, IN_PROJ_BIAS))?;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let q = g.slice(qkv, 2, h * hd, hd)?;
            let k = g.slice(qkv, 2, d + h * hd, hd)?;
            let v = g.slice(qkv, 2, 2 * d + h * hd, hd)?;
            let scores = g.matmul_t(q, k)?;
            let scores = g.scale(scores, scale);
            let att = g.softmax(scores);
            outs.push(g.matmul(att, v)?);
        }
        let merged = if heads == 1 { outs[0] } else { g.concat(&outs, 2)? };
        self.linear(g, merged, &path::attn(t, block, OUT_PROJ_WEIGHT), &path::attn(t, block, OUT_PROJ_BIAS))
    }

    fn block(&self, g: &mut Graph, t: Tower, i: usize, x: Var) -> Result<Var> {
        let h = g.layer_norm(x, self.var(&path::block(t, i, "ln1", "gain")), self.var(&path::block(t, i, "ln1", "bias")))?;
        let a = self.attention(g, t, i, h)?;
        let x = g.add(x, a)?;
        let h = g.layer_norm(x, self.var(&path::block(t, i, "ln2", "gain")), self.var(&path::block(t, i, "ln2", "bias")))?;
        let h = self.linear(g, h, &path::block(t, i, "mlp", "fc1_weight"), &path::block(t, i, "mlp", "fc1_bias"))?;
        let h = g.gelu(h);
        let h = self.linear(g, h, &path::block(t, i, "mlp", "fc2_weight"), &path::block(t, i, "mlp", "fc2_bias"))?;
        g.add(x, h)
    }

    /// Unit-norm `[n, d]` embeddings of one tower.
    pub fn encode(&self, g: &mut Graph, t: Tower, tokens: &TokenMatrix) -> Result<Var> {
        let c = self.params.config();
        let seq = t.seq_len(c);
        if tokens.cols() + 1 != seq {
            return Err(Error::Input(format!(
                "{t} tokens have {} columns, the model expects {}",
                tokens.cols(),
                seq - 1
            )));
        }
        let n = tokens.rows();
        if n == 0 {
            return Err(Error::Input(format!("no {t} rows to encode")));
        }
        let tok = g.embedding(self.var(&path::token(t)), tokens.ids(), &[n, seq - 1])?;
        let cls = g.embedding(self.var(&path::class_token(t)), &vec![0; n], &[n, 1])?;
        let x = g.concat(&[cls, tok], 1)?;
        let mut x = g.add(x, self.var(&path::position(t)))?;
        for i in 0..c.blocks_per_tower {
            x = self.block(g, t, i, x)?;
        }
        let pooled = g.slice(x, 1, 0, 1)?;
        let pooled = g.reshape(pooled, &[n, c.embed_dim])?;
        let projected = g.matmul(pooled, self.var(&path::proj(t)))?;
        match self.params.adapters().and_then(|a| a.bottleneck_for(t)) {
            Some(blend) => {
                let down = self.linear(g, projected, &bottleneck_path(t, "down_weight"), &bottleneck_path(t, "down_bias"))?;
                let down = g.relu(down);
                let up = self.linear(g, down, &bottleneck_path(t, "up_weight"), &bottleneck_path(t, "up_bias"))?;
                let up = g.scale(up, blend);
                let keep = g.scale(projected, 1.0 - blend);
                let mixed = g.add(keep, up)?;
                Ok(g.l2_normalize(mixed))
            }
            None => Ok(g.l2_normalize(projected)),
        }
    }

    /// `exp(logit_scale) · (a · bᵀ)`.
    pub fn logits(&self, g: &mut Graph, a: Var, b: Var) -> Result<Var> {
        let sims = g.matmul_t(a, b)?;
        let s = g.exp(self.var(LOGIT_SCALE));
        g.mul(sims, s)
    }

    pub fn contrastive(&self, g: &mut Graph, batch: &Batch) -> Result<Var> {
        if batch.len() < 2 {
            return Err(Error::Degenerate(format!(
                "contrastive loss needs at least 2 pairs, got {}",
                batch.len()
            )));
        }
        let i = self.encode(g, Tower::Image, &batch.image_tokens)?;
        let t = self.encode(g, Tower::Text, &batch.text_tokens)?;
        let it = self.logits(g, i, t)?;
        let ti = g.transpose(it)?;
        let targets: Vec<usize> = (0..batch.len()).collect();
        let a = g.cross_entropy(it, &targets)?;
        let b = g.cross_entropy(ti, &targets)?;
        let sum = g.add(a, b)?;
        Ok(g.scale(sum, 0.5))
    }

    pub fn classification(&self, g: &mut Graph, batch: &Batch, class_text: &TokenMatrix) -> Result<Var> {
        let n_classes = class_text.rows();
        if let Some(&bad) = batch.class_labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::Input(format!("label {bad} is out of range for {n_classes} classes")));
        }
        let i = self.encode(g, Tower::Image, &batch.image_tokens)?;
        let t = self.encode(g, Tower::Text, class_text)?;
        let logits = self.logits(g, i, t)?;
        g.cross_entropy(logits, &batch.class_labels)
    }
}

fn frozen(_: &str) -> bool {
    false
}

/// Embeddings of one tower, encoded in chunks of [`ENCODE_CHUNK`] rows.
pub fn encode(params: &DualEncoderParams, t: Tower, tokens: &TokenMatrix) -> Result<Tensor> {
    let d = params.config().embed_dim;
    let mut data = Vec::with_capacity(tokens.rows() * d);
    let mut start = 0;
    while start < tokens.rows() {
        let len = ENCODE_CHUNK.min(tokens.rows() - start);
        let mut g = Graph::new();
        let bound = Bound::new(&mut g, params, &frozen);
        let e = bound.encode(&mut g, t, &tokens.range(start, len))?;
        data.extend_from_slice(g.value(e));
        start += len;
    }
    if tokens.rows() == 0 {
        return Err(Error::Input(format!("no {t} rows to encode")));
    }
    Tensor::new(vec![tokens.rows(), d], data)
}

pub fn encode_image(params: &DualEncoderParams, tokens: &TokenMatrix) -> Result<Tensor> {
    encode(params, Tower::Image, tokens)
}

pub fn encode_text(params: &DualEncoderParams, tokens: &TokenMatrix) -> Result<Tensor> {
    encode(params, Tower::Text, tokens)
}

pub fn contrastive_loss(params: &DualEncoderParams, batch: &Batch) -> Result<f64> {
    let mut g = Graph::new();
    let bound = Bound::new(&mut g, params, &frozen);
    let loss = bound.contrastive(&mut g, batch)?;
    Ok(g.value(loss)[0])
}

pub fn classification_loss(params: &DualEncoderParams, batch: &Batch, class_text: &TokenMatrix) -> Result<f64> {
    let mut g = Graph::new();
    let bound = Bound::new(&mut g, params, &frozen);
    let loss = bound.classification(&mut g, batch, class_text)?;
    Ok(g.value(loss)[0])
}

/// Loss and gradients for every path accepted by `trainable`.
pub fn loss_and_grads(
    params: &DualEncoderParams,
    objective: Objective,
    batch: &Batch,
    class_text: Option<&TokenMatrix>,
    trainable: &dyn Fn(&str) -> bool,
) -> Result<(f64, BTreeMap<String, Vec<f64>>)> {
    let mut g = Graph::new();
    let bound = Bound::new(&mut g, params, trainable);
    let loss = match objective {
        Objective::Contrastive => bound.contrastive(&mut g, batch)?,
        Objective::Classification => {
            let ct = class_text
                .ok_or_else(|| Error::Usage("classification loss needs class prompt tokens".into()))?;
            bound.classification(&mut g, batch, ct)?
        }
    };
    let value = g.value(loss)[0];
    if !value.is_finite() {
        return Err(Error::Degenerate(format!("loss is not finite ({value})")));
    }
    g.backward(loss, &[1.0])?;
    Ok((value, bound.grads(&g, trainable)))
}

/// Row `i`, column `c`: scaled similarity of image `i` to class prompt `c`.
pub fn class_logits(params: &DualEncoderParams, image_tokens: &TokenMatrix, class_text: &TokenMatrix) -> Result<Tensor> {
    let images = encode_image(params, image_tokens)?;
    let classes = encode_text(params, class_text)?;
    let scale = params.logit_scale().exp();
    let (n, c, d) = (images.rows(), classes.rows(), images.cols());
    let mut out = vec![0.0; n * c];
    crate::autodiff::kernels::gemm_nt(images.data(), classes.data(), &mut out, n, d, c);
    out.iter_mut().for_each(|v| *v *= scale);
    Tensor::new(vec![n, c], out)
}

/// Index of the largest entry per row; ties go to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn predict(params: &DualEncoderParams, image_tokens: &TokenMatrix, class_text: &TokenMatrix) -> Result<Vec<usize>> {
    if class_text.rows() == 0 {
        return Err(Error::Input("predict needs at least one class prompt".into()));
    }
    Ok(argmax_rows(&class_logits(params, image_tokens, class_text)?))
}

/// Fraction of images whose prediction equals the label.
pub fn accuracy(params: &DualEncoderParams, image_tokens: &TokenMatrix, labels: &[usize], class_text: &TokenMatrix) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Input("accuracy over an empty set".into()));
    }
    let preds = predict(params, image_tokens, class_text)?;
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}
