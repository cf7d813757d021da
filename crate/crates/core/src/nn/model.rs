//! Generator and discriminator towers over a shared embedding table.

use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::graph::{bce_with_logit, BatchLayout, Graph, NodeId};
use super::params::{Grads, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::text::{CorruptedExample, MaskedExample, TokenId, PAD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TowerConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub emb_dim: usize,
    pub generator: TowerConfig,
    pub discriminator: TowerConfig,
    pub ffn_mult: usize,
    pub init_std: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.vocab_size < 5 {
            errs.push(format!("vocab size {} below 5", self.vocab_size));
        }
        if self.max_seq_len < 2 {
            errs.push("max_seq_len must be at least 2".into());
        }
        if self.emb_dim == 0 || self.ffn_mult == 0 {
            errs.push("emb_dim and ffn_mult must be positive".into());
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            errs.push(format!("init_std must be positive, got {}", self.init_std));
        }
        for (name, t) in [("gen", &self.generator), ("disc", &self.discriminator)] {
            if t.hidden == 0 || t.heads == 0 || t.hidden % t.heads != 0 {
                errs.push(format!("{name}_hidden {} must be a positive multiple of {name}_heads {}", t.hidden, t.heads));
            }
        }
        if self.generator.hidden > self.discriminator.hidden {
            errs.push(format!(
                "gen_hidden {} exceeds disc_hidden {}",
                self.generator.hidden, self.discriminator.hidden
            ));
        }
        errs
    }
}

#[derive(Debug, Clone)]
struct LayerIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    ff1_w: ParamId,
    ff1_b: ParamId,
    ff2_w: ParamId,
    ff2_b: ParamId,
}

#[derive(Debug, Clone)]
struct TowerIds {
    prefix: &'static str,
    heads: usize,
    in_proj: ParamId,
    pos: ParamId,
    layers: Vec<LayerIds>,
    lnf_g: ParamId,
    lnf_b: ParamId,
}

/// All trainable state: shared embedding, both towers and both heads.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    embedding: ParamId,
    gen: TowerIds,
    disc: TowerIds,
    gen_out: ParamId,
    disc_head: ParamId,
}

/// Padded token ids for a batch of sequences.
#[derive(Debug, Clone)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub layout: Rc<BatchLayout>,
}

impl TokenBatch {
    pub fn new(seqs: &[&[TokenId]]) -> Self {
        let layout = BatchLayout::new(seqs.iter().map(|s| s.len()).collect());
        let mut ids = vec![PAD as usize; layout.rows()];
        for (b, s) in seqs.iter().enumerate() {
            for (t, &id) in s.iter().enumerate() {
                ids[layout.row(b, t)] = id as usize;
            }
        }
        Self {
            ids,
            layout: Rc::new(layout),
        }
    }
}

pub struct GeneratorOutput {
    pub hidden: NodeId,
    /// `[masked, vocab]` logits, rows ordered by example then position.
    pub logits: NodeId,
    pub loss: NodeId,
    pub targets: Vec<usize>,
    /// Number of masked rows contributed by each example.
    pub rows_per_example: Vec<usize>,
}

pub struct DiscriminatorOutput {
    pub hidden: NodeId,
    /// `[batch*seq, 1]` pre-activations.
    pub logits: NodeId,
    pub loss: NodeId,
    pub layout: Rc<BatchLayout>,
    pub targets: Vec<f64>,
    pub per_example_loss: Vec<f64>,
}

impl DiscriminatorOutput {
    /// Pre-activations of example `b`, unpadded.
    pub fn example_logits<'g>(&self, g: &'g Graph, b: usize) -> &'g [f64] {
        let start = self.layout.row(b, 0);
        &g.value(self.logits).data()[start..start + self.layout.lengths[b]]
    }

    pub fn example_targets(&self, b: usize) -> &[f64] {
        let start = self.layout.row(b, 0);
        &self.targets[start..start + self.layout.lengths[b]]
    }
}

fn normal_tensor<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}

impl Model {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        let errs = config.validate();
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let mut params = ParamStore::new();
        let std = config.init_std;
        let embedding = params.insert("emb", normal_tensor(&[config.vocab_size, config.emb_dim], std, rng))?;
        let gen = Self::build_tower(&mut params, "gen", &config, config.generator, rng)?;
        let gen_out = params.insert("gen.out_proj", Tensor::zeros(&[config.generator.hidden, config.emb_dim]))?;
        let disc = Self::build_tower(&mut params, "disc", &config, config.discriminator, rng)?;
        let disc_head = params.insert("disc.head_w", normal_tensor(&[config.discriminator.hidden, 1], std, rng))?;
        Ok(Self {
            config,
            params,
            embedding,
            gen,
            disc,
            gen_out,
            disc_head,
        })
    }

    fn build_tower<R: Rng + ?Sized>(
        params: &mut ParamStore,
        prefix: &'static str,
        config: &ModelConfig,
        tower: TowerConfig,
        rng: &mut R,
    ) -> Result<TowerIds> {
        let h = tower.hidden;
        let f = h * config.ffn_mult;
        let std = config.init_std;
        let in_proj = params.insert(&format!("{prefix}.in_proj"), normal_tensor(&[config.emb_dim, h], std, rng))?;
        let pos = params.insert(&format!("{prefix}.pos"), normal_tensor(&[config.max_seq_len, h], std, rng))?;
        let mut layers = Vec::with_capacity(tower.layers);
        for l in 0..tower.layers {
            let mut w = |name: &str, shape: &[usize]| params.insert(&format!("{prefix}.l{l}.{name}"), normal_tensor(shape, std, rng));
            let wq = w("wq", &[h, h])?;
            let wk = w("wk", &[h, h])?;
            let wv = w("wv", &[h, h])?;
            let wo = w("wo", &[h, h])?;
            let ff1_w = w("ff1_w", &[h, f])?;
            let ff2_w = w("ff2_w", &[f, h])?;
            let mut c = |name: &str, n: usize, v: f64| params.insert(&format!("{prefix}.l{l}.{name}"), Tensor::filled(&[n], v));
            layers.push(LayerIds {
                ln1_g: c("ln1_g", h, 1.0)?,
                ln1_b: c("ln1_b", h, 0.0)?,
                wq,
                bq: c("bq", h, 0.0)?,
                wk,
                bk: c("bk", h, 0.0)?,
                wv,
                bv: c("bv", h, 0.0)?,
                wo,
                bo: c("bo", h, 0.0)?,
                ln2_g: c("ln2_g", h, 1.0)?,
                ln2_b: c("ln2_b", h, 0.0)?,
                ff1_w,
                ff1_b: c("ff1_b", f, 0.0)?,
                ff2_w,
                ff2_b: c("ff2_b", h, 0.0)?,
            });
        }
        let lnf_g = params.insert(&format!("{prefix}.lnf_g"), Tensor::filled(&[h], 1.0))?;
        let lnf_b = params.insert(&format!("{prefix}.lnf_b"), Tensor::zeros(&[h]))?;
        Ok(TowerIds {
            prefix,
            heads: tower.heads,
            in_proj,
            pos,
            layers,
            lnf_g,
            lnf_b,
        })
    }

    /// Rebuild a model from a configuration and a full set of named tensors.
    pub fn from_named(config: ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let mut model = Self::new(config, &mut crate::rng::seeded(0))?;
        model.load_tensors(tensors, |_| true)?;
        Ok(model)
    }

    /// Overwrite parameters from named tensors. Parameters for which
    /// `required` is false may be absent and keep their current values.
    pub fn load_tensors(&mut self, mut tensors: Vec<(String, Tensor)>, required: impl Fn(&str) -> bool) -> Result<()> {
        for id in self.params.ids().collect::<Vec<_>>() {
            let name = self.params.name(id).to_string();
            let Some(pos) = tensors.iter().position(|(n, _)| *n == name) else {
                if required(&name) {
                    return Err(Error::Shape(format!("missing tensor {name}")));
                }
                continue;
            };
            let (_, t) = tensors.swap_remove(pos);
            if t.shape() != self.params.get(id).shape() {
                return Err(Error::Shape(format!(
                    "{name}: expected {:?}, found {:?}",
                    self.params.get(id).shape(),
                    t.shape()
                )));
            }
            *self.params.get_mut(id) = t;
        }
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn embedding_id(&self) -> ParamId {
        self.embedding
    }

    pub fn disc_head_id(&self) -> ParamId {
        self.disc_head
    }

    pub fn gen_out_id(&self) -> ParamId {
        self.gen_out
    }

    /// Parameters belonging to the generator tower and its output projection.
    pub fn generator_ids(&self) -> Vec<ParamId> {
        self.params.iter().filter(|(_, n, _)| n.starts_with("gen.")).map(|(id, _, _)| id).collect()
    }

    /// Discriminator tower, head, and the shared embedding.
    pub fn discriminator_ids(&self) -> Vec<ParamId> {
        self.params
            .iter()
            .filter(|(_, n, _)| n.starts_with("disc.") || *n == "emb")
            .map(|(id, _, _)| id)
            .collect()
    }

    fn tower(&self, g: &mut Graph, t: &TowerIds, batch: &TokenBatch) -> Result<NodeId> {
        let p = &self.params;
        let layout = &batch.layout;
        if layout.seq > self.config.max_seq_len {
            return Err(Error::Shape(format!(
                "sequence length {} exceeds max_seq_len {}",
                layout.seq, self.config.max_seq_len
            )));
        }
        let emb = g.param(p, self.embedding);
        let e = g.gather(emb, batch.ids.clone())?;
        let in_proj = g.param(p, t.in_proj);
        let x0 = g.matmul(e, in_proj)?;
        let pos = g.param(p, t.pos);
        let pos_rows = (0..layout.rows()).map(|r| r % layout.seq).collect();
        let pe = g.gather(pos, pos_rows)?;
        let mut x = g.add(x0, pe)?;
        g.check_finite(x, &format!("{}.input", t.prefix))?;

        for (l, ids) in t.layers.iter().enumerate() {
            let ln1_g = g.param(p, ids.ln1_g);
            let ln1_b = g.param(p, ids.ln1_b);
            let a = g.layer_norm(x, ln1_g, ln1_b)?;
            let q = self.linear(g, a, ids.wq, ids.bq)?;
            let k = self.linear(g, a, ids.wk, ids.bk)?;
            let v = self.linear(g, a, ids.wv, ids.bv)?;
            let att = g.attention(q, k, v, layout.clone(), t.heads)?;
            let o = self.linear(g, att, ids.wo, ids.bo)?;
            x = g.add(x, o)?;
            g.check_finite(x, &format!("{}.l{l}.attention", t.prefix))?;

            let ln2_g = g.param(p, ids.ln2_g);
            let ln2_b = g.param(p, ids.ln2_b);
            let b = g.layer_norm(x, ln2_g, ln2_b)?;
            let f1 = self.linear(g, b, ids.ff1_w, ids.ff1_b)?;
            let f1 = g.gelu(f1);
            let f2 = self.linear(g, f1, ids.ff2_w, ids.ff2_b)?;
            x = g.add(x, f2)?;
            g.check_finite(x, &format!("{}.l{l}.ffn", t.prefix))?;
        }
        let lnf_g = g.param(p, t.lnf_g);
        let lnf_b = g.param(p, t.lnf_b);
        let h = g.layer_norm(x, lnf_g, lnf_b)?;
        g.check_finite(h, &format!("{}.final_norm", t.prefix))?;
        Ok(h)
    }

    fn linear(&self, g: &mut Graph, x: NodeId, w: ParamId, b: ParamId) -> Result<NodeId> {
        let w = g.param(&self.params, w);
        let b = g.param(&self.params, b);
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }

    /// Final discriminator hidden states `[batch*seq, hidden]` for raw token sequences.
    pub fn discriminator_hidden(&self, g: &mut Graph, seqs: &[&[TokenId]]) -> Result<(NodeId, Rc<BatchLayout>)> {
        let tb = TokenBatch::new(seqs);
        let layout = tb.layout.clone();
        Ok((self.tower(g, &self.disc, &tb)?, layout))
    }

    /// Generator forward over masked inputs. The loss node is the mean of
    /// `-log p(original)` over every masked position in the batch.
    pub fn generator_forward(&self, g: &mut Graph, batch: &[&MaskedExample]) -> Result<GeneratorOutput> {
        if batch.is_empty() {
            return Err(Error::Shape("empty generator batch".into()));
        }
        let seqs: Vec<&[TokenId]> = batch.iter().map(|m| m.input.as_slice()).collect();
        let tb = TokenBatch::new(&seqs);
        let hidden = self.tower(g, &self.gen, &tb)?;
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        let mut rows_per_example = Vec::with_capacity(batch.len());
        for (b, m) in batch.iter().enumerate() {
            if m.mask_positions.is_empty() {
                return Err(Error::Validation("masked example without masked positions".into()));
            }
            rows.extend(m.mask_positions.iter().map(|&p| tb.layout.row(b, p)));
            targets.extend(m.originals.iter().map(|&t| t as usize));
            rows_per_example.push(m.mask_positions.len());
        }
        let hm = g.gather(hidden, rows)?;
        let out = g.param(&self.params, self.gen_out);
        let proj = g.matmul(hm, out)?;
        let emb = g.param(&self.params, self.embedding);
        let logits = g.matmul_bt(proj, emb)?;
        g.check_finite(logits, "gen.logits")?;
        let loss = g.softmax_xent(logits, targets.clone())?;
        Ok(GeneratorOutput {
            hidden,
            logits,
            loss,
            targets,
            rows_per_example,
        })
    }

    /// Discriminator forward. The loss node is the mean over examples of each
    /// example's token-mean binary cross-entropy; padding is excluded.
    pub fn discriminator_forward(&self, g: &mut Graph, batch: &[&CorruptedExample]) -> Result<DiscriminatorOutput> {
        if batch.is_empty() {
            return Err(Error::Shape("empty discriminator batch".into()));
        }
        let seqs: Vec<&[TokenId]> = batch.iter().map(|c| c.tokens.as_slice()).collect();
        let tb = TokenBatch::new(&seqs);
        let layout = tb.layout.clone();
        let hidden = self.tower(g, &self.disc, &tb)?;
        let head = g.param(&self.params, self.disc_head);
        let logits = g.matmul(hidden, head)?;
        g.check_finite(logits, "disc.logits")?;

        let rows = layout.rows();
        let mut targets = vec![0.0; rows];
        let mut coef = vec![0.0; rows];
        let nb = batch.len() as f64;
        for (b, c) in batch.iter().enumerate() {
            let n = c.tokens.len() as f64;
            for (t, label) in c.labels.iter().enumerate() {
                let r = layout.row(b, t);
                targets[r] = label.target();
                coef[r] = 1.0 / (nb * n);
            }
        }
        let z = g.value(logits).data();
        let per_example_loss = (0..batch.len())
            .map(|b| {
                let len = layout.lengths[b];
                let s = layout.row(b, 0);
                (s..s + len).map(|r| bce_with_logit(z[r], targets[r])).sum::<f64>() / len as f64
            })
            .collect();
        let loss = g.bce_logits(logits, targets.clone(), coef)?;
        Ok(DiscriminatorOutput {
            hidden,
            logits,
            loss,
            layout,
            targets,
            per_example_loss,
        })
    }
}

/// `L_G + lambda * L_D` with either term optional.
pub fn combine_losses(g: &mut Graph, gen: Option<NodeId>, disc: Option<NodeId>, lambda: f64) -> Result<NodeId> {
    match (gen, disc) {
        (Some(a), Some(b)) => {
            let d = g.scale(b, lambda);
            g.add(a, d)
        }
        (Some(a), None) => Ok(a),
        (None, Some(b)) => Ok(g.scale(b, lambda)),
        (None, None) => Err(Error::Validation("objective has no terms".into())),
    }
}

impl Model {
    /// Gradient of each example's own discriminator loss, one backward per example.
    pub fn per_example_disc_grads(&self, batch: &[&CorruptedExample]) -> Result<Vec<Grads>> {
        batch
            .iter()
            .map(|ex| {
                let mut g = Graph::new();
                let out = self.discriminator_forward(&mut g, &[*ex])?;
                g.backward(out.loss, &self.params)
            })
            .collect()
    }

    /// Per-example gradient norms over the discriminator parameters.
    pub fn per_example_grad_norms(&self, batch: &[&CorruptedExample]) -> Result<Vec<f64>> {
        let ids = self.discriminator_ids();
        Ok(self.per_example_disc_grads(batch)?.iter().map(|gr| gr.norm_over(&ids)).collect())
    }
}
