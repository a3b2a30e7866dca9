//! Encoder/decoder forward passes.
//!
//! [`ModelSession`] owns an autograd [`Graph`] with every model parameter
//! registered as a leaf; its methods append the forward computation to that
//! graph and return node handles, so training can backpropagate one combined
//! objective through any composition of embeds, encodes, and decodes. The
//! plain methods on [`CsmaeModel`] wrap a throwaway session for callers that
//! only need values (feature extraction, tests).

use ndarray::{Array1, Array2, Array3};

use super::{CsmaeModel, Modality, Pooling};
use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::masking::{complement, patchify, PatchGrid};

/// Layer-norm epsilon used by every norm in the model.
const LN_EPS: f64 = 1e-6;

/// Sinusoidal position table: row n holds
/// `sin(n / 10000^(2i/dim))` at column 2i and `cos(n / 10000^(2i/dim))` at
/// column 2i+1. Parameter-free, identical for both modalities.
pub fn positional_encoding(n: usize, dim: usize) -> Result<Array2<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::config(format!(
            "sinusoidal positions need a positive even dim, got {dim}"
        )));
    }
    let mut table = Array2::zeros((n, dim));
    for pos in 0..n {
        for i in 0..dim / 2 {
            let rate = (pos as f64) / 10000f64.powf(2.0 * i as f64 / dim as f64);
            table[[pos, 2 * i]] = rate.sin();
            table[[pos, 2 * i + 1]] = rate.cos();
        }
    }
    Ok(table)
}

/// Encoder output inside a session graph.
pub struct EncodeOutput {
    /// U×d latents of the visible patches, in their input order.
    pub patch_latents: NodeId,
    /// 1×d class-token latent; present exactly when the model pools with CLS.
    pub cls_latent: Option<NodeId>,
}

/// Encoder output as plain arrays (see [`CsmaeModel::encode`]).
#[derive(Debug, Clone)]
pub struct EncodeArrays {
    pub patch_latents: Array2<f64>,
    pub cls_latent: Option<Array2<f64>>,
}

/// One forward-pass session: a graph whose leaves are the model parameters.
pub struct ModelSession<'m> {
    model: &'m CsmaeModel,
    graph: Graph,
    param_nodes: Vec<NodeId>,
}

impl<'m> ModelSession<'m> {
    pub fn new(model: &'m CsmaeModel) -> Self {
        let mut graph = Graph::with_capacity(model.params().len() + 256);
        let param_nodes =
            model.params().iter().map(|t| graph.leaf(t.value.clone())).collect();
        ModelSession { model, graph, param_nodes }
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn graph_mut(&mut self) -> &mut Graph {
        &mut self.graph
    }

    /// Leaf node of each parameter, in the model's canonical tensor order.
    pub fn param_nodes(&self) -> &[NodeId] {
        &self.param_nodes
    }

    pub fn model(&self) -> &CsmaeModel {
        self.model
    }

    fn p(&self, name: &str) -> NodeId {
        self.param_nodes[self.model.param_position(name)]
    }

    /// Affine patch embedding plus positional encoding for all N patches of
    /// one modality: N×P → N×d.
    pub fn embed(&mut self, patches: &Array2<f64>, m: Modality) -> Result<NodeId> {
        let cfg = self.model.config();
        let expect = (cfg.n_patches(), cfg.patch_len(m));
        if patches.dim() != expect {
            return Err(Error::shape(format!(
                "patches for {m} have shape {:?}, model expects {:?}",
                patches.dim(),
                expect
            )));
        }
        let key = m.key();
        let x = self.graph.leaf(patches.clone());
        let w = self.p(&format!("patch_embed.{key}.weight"));
        let b = self.p(&format!("patch_embed.{key}.bias"));
        let t = self.graph.matmul(x, w);
        let t = self.graph.add_row(t, b);
        let pe = positional_encoding(cfg.n_patches(), cfg.vit.dim)?;
        let pe = self.graph.leaf(pe);
        Ok(self.graph.add(t, pe))
    }

    /// Run the encoder over the visible subset of `tokens` (an N×d node from
    /// [`ModelSession::embed`]): gather `unmasked` rows, prepend the class
    /// token when configured, then sensor path → cross path → final norm.
    pub fn encode(
        &mut self,
        tokens: NodeId,
        unmasked: &[usize],
        m: Modality,
    ) -> Result<EncodeOutput> {
        let n = self.graph.value(tokens).nrows();
        validate_index_set("unmasked", unmasked, n)?;
        if unmasked.is_empty() {
            return Err(Error::config("encoder needs at least one visible token"));
        }
        let visible = self.graph.gather_rows(tokens, unmasked.to_vec());
        self.encode_visible(visible, m)
    }

    /// Encoder over already-filtered visible tokens (U×d node).
    fn encode_visible(&mut self, visible: NodeId, m: Modality) -> Result<EncodeOutput> {
        let cfg = self.model.config();
        let u = self.graph.value(visible).nrows();
        let key = m.key();

        let (mut x, has_cls) = match cfg.pooling {
            Pooling::Cls => {
                let cls_name = if cfg.variant.shared_encoder() {
                    "cls.shared".to_string()
                } else {
                    format!("cls.{key}")
                };
                let cls = self.p(&cls_name);
                (self.graph.concat_rows(&[cls, visible]), true)
            }
            Pooling::Gap => (visible, false),
        };

        let sensor_stack = if cfg.variant.shared_encoder() {
            "sensor.shared".to_string()
        } else {
            format!("sensor.{key}")
        };
        for l in 0..cfg.sensor_depth() {
            x = self.transformer_layer(x, &format!("{sensor_stack}.layer{l:02}"), cfg.vit.heads);
        }
        for l in 0..cfg.cross_depth {
            x = self.transformer_layer(x, &format!("cross.layer{l:02}"), cfg.vit.heads);
        }
        let gain = self.p("encoder_norm.gain");
        let bias = self.p("encoder_norm.bias");
        x = self.graph.layer_norm(x, gain, bias, LN_EPS);

        if has_cls {
            let cls_latent = self.graph.gather_rows(x, vec![0]);
            let patch_latents = self.graph.gather_rows(x, (1..=u).collect());
            Ok(EncodeOutput { patch_latents, cls_latent: Some(cls_latent) })
        } else {
            Ok(EncodeOutput { patch_latents: x, cls_latent: None })
        }
    }

    /// Decode `latents` (the U×d visible-patch latents of `source`) into
    /// pixel predictions for all N patches of `target`.
    ///
    /// The latents are projected to decoder width by the projection tied to
    /// the decoder stack in use (the target's stack when decoders are
    /// per-modality), the mask token fills the source's hidden positions, a
    /// decoder-width position table is added, and the target's pixel head
    /// maps every position back to patch pixels. The target image itself
    /// never enters: predictions depend only on source latents and positions.
    pub fn decode(
        &mut self,
        latents: NodeId,
        source_mask: &[usize],
        source: Modality,
        target: Modality,
    ) -> Result<NodeId> {
        let cfg = self.model.config();
        let n = cfg.n_patches();
        validate_index_set("source_mask", source_mask, n)?;
        let u = self.graph.value(latents).nrows();
        if u + source_mask.len() != n {
            return Err(Error::shape(format!(
                "decode got {u} latents and {} masked positions for {n} patches",
                source_mask.len()
            )));
        }
        if self.graph.value(latents).ncols() != cfg.vit.dim {
            return Err(Error::shape(format!(
                "decode latents have width {}, model dim is {}",
                self.graph.value(latents).ncols(),
                cfg.vit.dim
            )));
        }

        let stack = if cfg.variant.shared_decoder() {
            "decoder.shared".to_string()
        } else {
            format!("decoder.{}", target.key())
        };
        let w = self.p(&format!("{stack}.embed.weight"));
        let b = self.p(&format!("{stack}.embed.bias"));
        let proj = self.graph.matmul(latents, w);
        let proj = self.graph.add_row(proj, b);

        let token_name = if cfg.per_modality_mask_token {
            format!("mask_token.{}", source.key())
        } else {
            "mask_token.shared".to_string()
        };
        let token = self.p(&token_name);
        let keep = complement(source_mask, n);
        let mut x = self.graph.compose_rows(proj, token, keep, source_mask.to_vec());

        let pe = positional_encoding(n, cfg.decoder.dim)?;
        let pe = self.graph.leaf(pe);
        x = self.graph.add(x, pe);

        for l in 0..cfg.decoder.blocks {
            x = self.transformer_layer(x, &format!("{stack}.layer{l:02}"), cfg.decoder.heads);
        }
        let gain = self.p(&format!("{stack}.norm.gain"));
        let bias = self.p(&format!("{stack}.norm.bias"));
        x = self.graph.layer_norm(x, gain, bias, LN_EPS);

        let hw = self.p(&format!("head.{}.weight", target.key()));
        let hb = self.p(&format!("head.{}.bias", target.key()));
        let out = self.graph.matmul(x, hw);
        Ok(self.graph.add_row(out, hb))
    }

    /// Whole-image feature per the configured pooling: 1×d node.
    pub fn pooled_feature(&mut self, enc: &EncodeOutput) -> NodeId {
        match self.model.config().pooling {
            Pooling::Gap => self.graph.mean_rows(enc.patch_latents),
            Pooling::Cls => enc
                .cls_latent
                .expect("internal: CLS pooling always produces a class latent"),
        }
    }

    /// One pre-norm transformer layer (attention + MLP, both residual).
    fn transformer_layer(&mut self, x: NodeId, prefix: &str, heads: usize) -> NodeId {
        let d = self.graph.value(x).ncols();
        debug_assert_eq!(d % heads, 0);
        let dh = d / heads;

        let n1g = self.p(&format!("{prefix}.norm1.gain"));
        let n1b = self.p(&format!("{prefix}.norm1.bias"));
        let h = self.graph.layer_norm(x, n1g, n1b, LN_EPS);

        let qkv_w = self.p(&format!("{prefix}.attn.qkv.weight"));
        let qkv_b = self.p(&format!("{prefix}.attn.qkv.bias"));
        let qkv = self.graph.matmul(h, qkv_w);
        let qkv = self.graph.add_row(qkv, qkv_b);
        let q = self.graph.slice_cols(qkv, 0, d);
        let k = self.graph.slice_cols(qkv, d, 2 * d);
        let v = self.graph.slice_cols(qkv, 2 * d, 3 * d);

        let mut head_outputs = Vec::with_capacity(heads);
        for hd in 0..heads {
            let (lo, hi) = (hd * dh, (hd + 1) * dh);
            let qh = self.graph.slice_cols(q, lo, hi);
            let kh = self.graph.slice_cols(k, lo, hi);
            let vh = self.graph.slice_cols(v, lo, hi);
            let scores = self.graph.matmul_t(qh, kh, false, true);
            let scaled = self.graph.scale(scores, 1.0 / (dh as f64).sqrt());
            let attn = self.graph.softmax_rows(scaled);
            head_outputs.push(self.graph.matmul(attn, vh));
        }
        let merged = self.graph.concat_cols(&head_outputs);

        let proj_w = self.p(&format!("{prefix}.attn.proj.weight"));
        let proj_b = self.p(&format!("{prefix}.attn.proj.bias"));
        let attn_out = self.graph.matmul(merged, proj_w);
        let attn_out = self.graph.add_row(attn_out, proj_b);
        let x = self.graph.add(x, attn_out);

        let n2g = self.p(&format!("{prefix}.norm2.gain"));
        let n2b = self.p(&format!("{prefix}.norm2.bias"));
        let h2 = self.graph.layer_norm(x, n2g, n2b, LN_EPS);
        let fc1_w = self.p(&format!("{prefix}.mlp.fc1.weight"));
        let fc1_b = self.p(&format!("{prefix}.mlp.fc1.bias"));
        let fc2_w = self.p(&format!("{prefix}.mlp.fc2.weight"));
        let fc2_b = self.p(&format!("{prefix}.mlp.fc2.bias"));
        let mid = self.graph.matmul(h2, fc1_w);
        let mid = self.graph.add_row(mid, fc1_b);
        let mid = self.graph.gelu(mid);
        let out = self.graph.matmul(mid, fc2_w);
        let out = self.graph.add_row(out, fc2_b);
        self.graph.add(x, out)
    }
}

fn validate_index_set(name: &str, indices: &[usize], n: usize) -> Result<()> {
    if !indices.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::config(format!("{name} indices must be strictly ascending")));
    }
    if indices.last().is_some_and(|&i| i >= n) {
        return Err(Error::config(format!("{name} index out of range (n = {n})")));
    }
    Ok(())
}

impl CsmaeModel {
    /// Embed all N patches of one modality (array-in, array-out form of
    /// [`ModelSession::embed`]).
    pub fn embed_patches(&self, grid: &PatchGrid, m: Modality) -> Result<Array2<f64>> {
        let mut s = ModelSession::new(self);
        let node = s.embed(grid.patches(), m)?;
        Ok(s.graph.value(node).clone())
    }

    /// Encode already-filtered visible tokens (U×d, U ≥ 1).
    pub fn encode(&self, visible_tokens: &Array2<f64>, m: Modality) -> Result<EncodeArrays> {
        if visible_tokens.nrows() == 0 {
            return Err(Error::config("encoder needs at least one visible token"));
        }
        if visible_tokens.ncols() != self.config().vit.dim {
            return Err(Error::shape(format!(
                "tokens have width {}, model dim is {}",
                visible_tokens.ncols(),
                self.config().vit.dim
            )));
        }
        let mut s = ModelSession::new(self);
        let leaf = s.graph.leaf(visible_tokens.clone());
        let out = s.encode_visible(leaf, m)?;
        Ok(EncodeArrays {
            patch_latents: s.graph.value(out.patch_latents).clone(),
            cls_latent: out.cls_latent.map(|id| s.graph.value(id).clone()),
        })
    }

    /// Decode source latents into all-N pixel predictions for `target`.
    pub fn decode(
        &self,
        latents: &Array2<f64>,
        source_mask: &[usize],
        source: Modality,
        target: Modality,
    ) -> Result<Array2<f64>> {
        let mut s = ModelSession::new(self);
        let leaf = s.graph.leaf(latents.clone());
        let node = s.decode(leaf, source_mask, source, target)?;
        Ok(s.graph.value(node).clone())
    }

    /// Full-image retrieval feature: patchify, embed, encode every patch,
    /// pool per the configured pooling. Deterministic: repeated calls on the
    /// same inputs agree bitwise.
    pub fn extract_feature(&self, image: &Array3<f64>, m: Modality) -> Result<Array1<f64>> {
        let cfg = self.config();
        let (h, w, c) = image.dim();
        if h != cfg.image_side || w != cfg.image_side || c != *cfg.channels.get(m) {
            return Err(Error::geometry(format!(
                "image for {m} is {h}x{w}x{c}, model expects {side}x{side}x{ch}",
                side = cfg.image_side,
                ch = cfg.channels.get(m)
            )));
        }
        let grid = patchify(image, cfg.patch_size)?;
        let mut s = ModelSession::new(self);
        let tokens = s.embed(grid.patches(), m)?;
        let all: Vec<usize> = (0..cfg.n_patches()).collect();
        let enc = s.encode(tokens, &all, m)?;
        let pooled = s.pooled_feature(&enc);
        Ok(s.graph.value(pooled).row(0).to_owned())
    }

    /// Width of extracted features.
    pub fn feature_dim(&self) -> usize {
        self.config().vit.dim
    }
}
