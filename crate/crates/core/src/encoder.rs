//! Query/key ViT encoders over patch tokens, the contrastive projection
//! head, the masked-entropy decoder, and the momentum update.
//!
//! The query path drops masked patches before the transformer blocks, so the
//! encoder never sees masked content. The key path encodes every patch and
//! never receives gradients; it only moves through [`momentum_update`].

use ndarray::{concatenate, Array2, Array3, ArrayView2, Axis, Zip};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{trunc_normal, ParamSet};
use crate::patchify::{MaskPlan, ShiftedView};

/// Parameter group ids used on the autodiff tape.
pub const QUERY_GROUP: usize = 0;
pub const DECODER_GROUP: usize = 1;
pub const KEY_GROUP: usize = 2;

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Patch side `s` in pixels.
    pub patch_size: usize,
    /// Patches per grid side `P`; images are `(s * P) × (s * P)`.
    pub grid_side: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub proj_dim: usize,
    /// When off, projected features are the L2-normalized encoder tokens.
    pub projection_head: bool,
    pub decoder_dim: usize,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            patch_size: 16,
            grid_side: 4,
            channels: 3,
            embed_dim: 128,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            proj_dim: 64,
            projection_head: true,
            decoder_dim: 64,
            decoder_depth: 2,
            decoder_heads: 4,
        }
    }
}

impl EncoderConfig {
    pub fn grid_len(&self) -> usize {
        self.grid_side * self.grid_side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn image_size(&self) -> usize {
        self.patch_size * self.grid_side
    }

    /// Width of the projected features.
    pub fn feature_dim(&self) -> usize {
        if self.projection_head {
            self.proj_dim
        } else {
            self.embed_dim
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("patch_size", self.patch_size),
            ("grid_side", self.grid_side),
            ("channels", self.channels),
            ("embed_dim", self.embed_dim),
            ("depth", self.depth),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("proj_dim", self.proj_dim),
            ("decoder_dim", self.decoder_dim),
            ("decoder_depth", self.decoder_depth),
            ("decoder_heads", self.decoder_heads),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("encoder.{name} must be positive")));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::Config("embed_dim must be divisible by heads".into()));
        }
        if self.decoder_dim % self.decoder_heads != 0 {
            return Err(Error::Config("decoder_dim must be divisible by decoder_heads".into()));
        }
        if self.decoder_dim >= self.embed_dim || self.decoder_depth > self.depth {
            return Err(Error::Config("decoder must be smaller than the encoder".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LinearIds {
    pub w: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct NormIds {
    pub gamma: usize,
    pub beta: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct BlockIds {
    pub ln1: NormIds,
    pub qkv: LinearIds,
    pub attn_out: LinearIds,
    pub ln2: NormIds,
    pub fc1: LinearIds,
    pub fc2: LinearIds,
}

/// Where each tensor of an encoder branch (encoder + projection head) lives.
#[derive(Debug, Clone)]
pub struct BranchLayout {
    pub patch_embed: LinearIds,
    pub pos: usize,
    pub blocks: Vec<BlockIds>,
    pub norm: NormIds,
    pub proj: Option<(LinearIds, LinearIds)>,
}

#[derive(Debug, Clone)]
pub struct DecoderLayout {
    pub embed: LinearIds,
    pub mask_token: usize,
    pub pos: usize,
    pub blocks: Vec<BlockIds>,
    pub norm: NormIds,
    pub head: LinearIds,
    pub out_dim: usize,
}

#[derive(Clone, Copy)]
enum Init {
    Weight,
    Zero,
    One,
}

struct Builder<'a> {
    set: ParamSet,
    /// `None` builds a zero-filled template carrying only names and shapes.
    rng: Option<&'a mut rand_chacha::ChaCha8Rng>,
}

impl Builder<'_> {
    fn tensor(&mut self, name: String, rows: usize, cols: usize, init: Init) -> usize {
        let t = match (init, self.rng.as_deref_mut()) {
            (_, None) => Array2::zeros((rows, cols)),
            (Init::Weight, Some(rng)) => trunc_normal(rng, rows, cols, INIT_STD),
            (Init::Zero, _) => Array2::zeros((rows, cols)),
            (Init::One, _) => Array2::ones((rows, cols)),
        };
        self.set.push(name, t)
    }

    fn linear(&mut self, prefix: &str, input: usize, output: usize) -> LinearIds {
        LinearIds {
            w: self.tensor(format!("{prefix}.w"), input, output, Init::Weight),
            b: self.tensor(format!("{prefix}.b"), 1, output, Init::Zero),
        }
    }

    fn norm(&mut self, prefix: &str, dim: usize) -> NormIds {
        NormIds {
            gamma: self.tensor(format!("{prefix}.gamma"), 1, dim, Init::One),
            beta: self.tensor(format!("{prefix}.beta"), 1, dim, Init::Zero),
        }
    }

    fn block(&mut self, prefix: &str, dim: usize, mlp_ratio: usize) -> BlockIds {
        BlockIds {
            ln1: self.norm(&format!("{prefix}.ln1"), dim),
            qkv: self.linear(&format!("{prefix}.attn.qkv"), dim, 3 * dim),
            attn_out: self.linear(&format!("{prefix}.attn.out"), dim, dim),
            ln2: self.norm(&format!("{prefix}.ln2"), dim),
            fc1: self.linear(&format!("{prefix}.mlp.fc1"), dim, mlp_ratio * dim),
            fc2: self.linear(&format!("{prefix}.mlp.fc2"), mlp_ratio * dim, dim),
        }
    }
}

/// Builds a freshly initialized encoder branch.
pub fn init_branch(cfg: &EncoderConfig, seed: u64) -> (ParamSet, BranchLayout) {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    build_branch(cfg, Some(&mut rng))
}

/// Zero-filled branch with the names and shapes `cfg` implies.
pub fn branch_template(cfg: &EncoderConfig) -> (ParamSet, BranchLayout) {
    build_branch(cfg, None)
}

fn build_branch(cfg: &EncoderConfig, rng: Option<&mut rand_chacha::ChaCha8Rng>) -> (ParamSet, BranchLayout) {
    let mut b = Builder { set: ParamSet::new(), rng };
    let d = cfg.embed_dim;
    let patch_embed = b.linear("enc.patch_embed", cfg.patch_dim(), d);
    let pos = b.tensor("enc.pos".into(), cfg.grid_len(), d, Init::Weight);
    let blocks = (0..cfg.depth).map(|i| b.block(&format!("enc.block{i}"), d, cfg.mlp_ratio)).collect();
    let norm = b.norm("enc.norm", d);
    let proj = cfg
        .projection_head
        .then(|| (b.linear("proj.fc1", d, d), b.linear("proj.fc2", d, cfg.proj_dim)));
    let layout = BranchLayout { patch_embed, pos, blocks, norm, proj };
    (b.set, layout)
}

/// Builds a freshly initialized decoder whose head emits `out_dim` values
/// per masked patch (1 for entropy targets).
pub fn init_decoder(cfg: &EncoderConfig, out_dim: usize, seed: u64) -> (ParamSet, DecoderLayout) {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    build_decoder(cfg, out_dim, Some(&mut rng))
}

pub fn decoder_template(cfg: &EncoderConfig, out_dim: usize) -> (ParamSet, DecoderLayout) {
    build_decoder(cfg, out_dim, None)
}

fn build_decoder(cfg: &EncoderConfig, out_dim: usize, rng: Option<&mut rand_chacha::ChaCha8Rng>) -> (ParamSet, DecoderLayout) {
    let mut b = Builder { set: ParamSet::new(), rng };
    let dd = cfg.decoder_dim;
    let embed = b.linear("dec.embed", cfg.embed_dim, dd);
    let mask_token = b.tensor("dec.mask_token".into(), 1, dd, Init::Weight);
    let pos = b.tensor("dec.pos".into(), cfg.grid_len(), dd, Init::Weight);
    let blocks = (0..cfg.decoder_depth).map(|i| b.block(&format!("dec.block{i}"), dd, cfg.mlp_ratio)).collect();
    let norm = b.norm("dec.norm", dd);
    let head = b.linear("dec.head", dd, out_dim);
    let layout = DecoderLayout { embed, mask_token, pos, blocks, norm, head, out_dim };
    (b.set, layout)
}

/// Checks stored tensors against the layout a config implies, naming the
/// first tensor that disagrees.
pub fn check_shapes(stored: &ParamSet, expected: &ParamSet) -> Result<()> {
    for (i, (name, t)) in expected.iter().enumerate() {
        if i >= stored.len() {
            return Err(Error::Shape(format!("tensor `{name}` missing")));
        }
        if stored.name(i) != name {
            return Err(Error::Shape(format!("tensor `{}` found where `{name}` expected", stored.name(i))));
        }
        if stored.get(i).dim() != t.dim() {
            return Err(Error::Shape(format!(
                "tensor `{name}` has shape {:?}, config implies {:?}",
                stored.get(i).dim(),
                t.dim()
            )));
        }
    }
    if stored.len() != expected.len() {
        return Err(Error::Shape(format!("unexpected tensor `{}`", stored.name(expected.len()))));
    }
    Ok(())
}

/// Encoder output tokens and the grid index each belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchFeatures {
    pub tokens: Array2<f64>,
    pub index_map: Vec<usize>,
}

/// Unit-norm contrastive features, one row per token.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedFeatures {
    pub vectors: Array2<f64>,
    pub index_map: Vec<usize>,
}

/// One image's tokens going into a batched forward pass.
#[derive(Debug, Clone, Copy)]
pub struct TokenInput<'a> {
    /// `n × patch_dim` flattened patches.
    pub patches: ArrayView2<'a, f64>,
    /// Grid index of each row.
    pub index_map: &'a [usize],
}

/// Flattens the selected patches (`y, x, c` order) into rows.
pub fn flatten_patches(patches: &[Array3<f64>], indices: &[usize]) -> Array2<f64> {
    let dim = patches.first().map_or(0, |p| p.len());
    let mut out = Array2::zeros((indices.len(), dim));
    for (r, &j) in indices.iter().enumerate() {
        for (dst, src) in out.row_mut(r).iter_mut().zip(patches[j].iter()) {
            *dst = *src;
        }
    }
    out
}

struct Tape<'a> {
    group: usize,
    set: &'a ParamSet,
}

impl Tape<'_> {
    fn p(&self, g: &mut Graph, id: usize) -> Var {
        g.param((self.group, id), self.set.get(id))
    }

    fn linear(&self, g: &mut Graph, x: Var, ids: LinearIds) -> Var {
        let w = self.p(g, ids.w);
        let b = self.p(g, ids.b);
        g.linear(x, w, b)
    }

    fn norm(&self, g: &mut Graph, x: Var, ids: NormIds) -> Var {
        let gamma = self.p(g, ids.gamma);
        let beta = self.p(g, ids.beta);
        g.layer_norm(x, gamma, beta)
    }

    fn block(&self, g: &mut Graph, x: Var, ids: &BlockIds, heads: usize, segments: &[(usize, usize)]) -> Var {
        let h = self.norm(g, x, ids.ln1);
        let qkv = self.linear(g, h, ids.qkv);
        let a = g.attention(qkv, heads, segments);
        let a = self.linear(g, a, ids.attn_out);
        let x = g.add(x, a);
        let h = self.norm(g, x, ids.ln2);
        let h = self.linear(g, h, ids.fc1);
        let h = g.gelu(h);
        let h = self.linear(g, h, ids.fc2);
        g.add(x, h)
    }
}

fn segments_of(lengths: impl Iterator<Item = usize>) -> Vec<(usize, usize)> {
    let mut start = 0;
    lengths
        .map(|len| {
            let seg = (start, len);
            start += len;
            seg
        })
        .collect()
}

/// Records a batched encoder forward pass. Returns the final-layer token
/// matrix and the row segment of each image.
pub fn encode_on_tape(
    g: &mut Graph,
    group: usize,
    set: &ParamSet,
    layout: &BranchLayout,
    cfg: &EncoderConfig,
    inputs: &[TokenInput<'_>],
) -> Result<(Var, Vec<(usize, usize)>)> {
    for input in inputs {
        if input.patches.ncols() != cfg.patch_dim() || input.patches.nrows() != input.index_map.len() {
            return Err(Error::Shape(format!(
                "token input {}x{} with {} indices, config expects {} columns",
                input.patches.nrows(),
                input.patches.ncols(),
                input.index_map.len(),
                cfg.patch_dim()
            )));
        }
        if let Some(j) = input.index_map.iter().find(|&&j| j >= cfg.grid_len()) {
            return Err(Error::Shape(format!("patch index {j} outside grid of {}", cfg.grid_len())));
        }
    }
    let tape = Tape { group, set };
    let views: Vec<ArrayView2<f64>> = inputs.iter().map(|i| i.patches).collect();
    let stacked = concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
    let segments = segments_of(inputs.iter().map(|i| i.index_map.len()));
    let x = g.input(stacked);
    let x = tape.linear(g, x, layout.patch_embed);
    let pos = tape.p(g, layout.pos);
    let pos_rows: Vec<(Var, usize)> = inputs.iter().flat_map(|i| i.index_map.iter().map(move |&j| (pos, j))).collect();
    let pos = g.gather(pos_rows);
    let mut x = g.add(x, pos);
    for block in &layout.blocks {
        x = tape.block(g, x, block, cfg.heads, &segments);
    }
    Ok((tape.norm(g, x, layout.norm), segments))
}

/// Projection head followed by exact L2 normalization.
pub fn project_on_tape(g: &mut Graph, group: usize, set: &ParamSet, layout: &BranchLayout, tokens: Var) -> Var {
    let tape = Tape { group, set };
    let x = match layout.proj {
        Some((fc1, fc2)) => {
            let h = tape.linear(g, tokens, fc1);
            let h = g.gelu(h);
            tape.linear(g, h, fc2)
        }
        None => tokens,
    };
    g.l2_normalize(x)
}

/// Records the masked-entropy decoder. `visible` and `masks` describe each
/// image's token rows inside `tokens`; returns one row per masked patch, in
/// image order then ascending patch index.
pub fn decode_on_tape(
    g: &mut Graph,
    set: &ParamSet,
    layout: &DecoderLayout,
    cfg: &EncoderConfig,
    tokens: Var,
    segments: &[(usize, usize)],
    masks: &[&MaskPlan],
) -> Var {
    let tape = Tape { group: DECODER_GROUP, set };
    let grid = cfg.grid_len();
    let emb = tape.linear(g, tokens, layout.embed);
    let mask_token = tape.p(g, layout.mask_token);
    let mut rows = Vec::with_capacity(masks.len() * grid);
    for (&(start, _), mask) in segments.iter().zip(masks) {
        let mut next = start;
        for j in 0..grid {
            if mask.is_masked(j) {
                rows.push((mask_token, 0));
            } else {
                rows.push((emb, next));
                next += 1;
            }
        }
    }
    let x = g.gather(rows);
    let pos = tape.p(g, layout.pos);
    let pos = g.gather((0..masks.len()).flat_map(|_| (0..grid).map(move |j| (pos, j))).collect());
    let mut x = g.add(x, pos);
    let dec_segments: Vec<(usize, usize)> = (0..masks.len()).map(|i| (i * grid, grid)).collect();
    for block in &layout.blocks {
        x = tape.block(g, x, block, cfg.decoder_heads, &dec_segments);
    }
    let x = tape.norm(g, x, layout.norm);
    let picked: Vec<usize> = masks
        .iter()
        .enumerate()
        .flat_map(|(i, m)| m.masked_indices.iter().map(move |&j| i * grid + j))
        .collect();
    if picked.is_empty() {
        return g.input(Array2::zeros((0, layout.out_dim)));
    }
    let x = g.gather_rows(x, &picked);
    tape.linear(g, x, layout.head)
}

/// Encodes explicit patch rows placed at the given grid indices.
pub fn encode_patches(
    patches: ArrayView2<'_, f64>,
    index_map: &[usize],
    weights: &ParamSet,
    cfg: &EncoderConfig,
) -> Result<PatchFeatures> {
    let (expected, layout) = branch_template(cfg);
    check_shapes(weights, &expected)?;
    let mut g = Graph::new();
    let (tokens, _) = encode_on_tape(&mut g, QUERY_GROUP, weights, &layout, cfg, &[TokenInput { patches, index_map }])?;
    Ok(PatchFeatures { tokens: g.value(tokens).clone(), index_map: index_map.to_vec() })
}

/// Encodes a view. With a mask, masked patches are dropped before the
/// transformer and only the `G - M` visible tokens come back.
pub fn encode(view: &ShiftedView, mask: Option<&MaskPlan>, weights: &ParamSet, cfg: &EncoderConfig) -> Result<PatchFeatures> {
    if view.len() != cfg.grid_len() {
        return Err(Error::Shape(format!("view has {} patches, config expects {}", view.len(), cfg.grid_len())));
    }
    let index_map = match mask {
        Some(m) => m.visible_indices(),
        None => (0..view.len()).collect(),
    };
    let rows = flatten_patches(&view.patches, &index_map);
    encode_patches(rows.view(), &index_map, weights, cfg)
}

pub fn project(features: &PatchFeatures, weights: &ParamSet, cfg: &EncoderConfig) -> Result<ProjectedFeatures> {
    let (expected, layout) = branch_template(cfg);
    check_shapes(weights, &expected)?;
    let mut g = Graph::new();
    let x = g.input(features.tokens.clone());
    let y = project_on_tape(&mut g, QUERY_GROUP, weights, &layout, x);
    Ok(ProjectedFeatures { vectors: g.value(y).clone(), index_map: features.index_map.clone() })
}

/// Decoder predictions for every masked patch (`M × out_dim`), rows in
/// ascending masked-index order.
pub fn decode(features: &PatchFeatures, mask: &MaskPlan, decoder: &ParamSet, cfg: &EncoderConfig) -> Result<Array2<f64>> {
    let out_dim = decoder.get(decoder.len() - 1).ncols();
    let (expected, layout) = decoder_template(cfg, out_dim);
    check_shapes(decoder, &expected)?;
    if features.index_map != mask.visible_indices() {
        return Err(Error::Shape("features do not come from the masked query path".into()));
    }
    let mut g = Graph::new();
    let tokens = g.input(features.tokens.clone());
    let out = decode_on_tape(&mut g, decoder, &layout, cfg, tokens, &[(0, features.tokens.nrows())], &[mask]);
    Ok(g.value(out).clone())
}

/// Predicted normalized entropy per masked patch, aligned with
/// `mask.masked_indices`.
pub fn decode_entropy(features: &PatchFeatures, mask: &MaskPlan, decoder: &ParamSet, cfg: &EncoderConfig) -> Result<Vec<f64>> {
    Ok(decode(features, mask, decoder, cfg)?.column(0).to_vec())
}

/// Query and key branches, the decoder, and the momentum coefficient.
#[derive(Debug, Clone, PartialEq)]
pub struct DualEncoderState {
    pub config: EncoderConfig,
    pub query: ParamSet,
    pub key: ParamSet,
    pub decoder: ParamSet,
    pub momentum: f64,
}

impl DualEncoderState {
    /// Fresh state; the key branch starts as an exact copy of the query.
    pub fn init(config: &EncoderConfig, recon_dim: usize, momentum: f64, seed: u64) -> Result<Self> {
        config.validate()?;
        if !(momentum >= 0.0 && momentum <= 1.0) {
            return Err(Error::Config(format!("momentum {momentum} outside [0, 1]")));
        }
        let (query, _) = init_branch(config, crate::rng::derive_seed(&[seed, 1]));
        let (decoder, _) = init_decoder(config, recon_dim, crate::rng::derive_seed(&[seed, 2]));
        Ok(Self { config: config.clone(), key: query.clone(), query, decoder, momentum })
    }

    pub fn branch_layout(&self) -> BranchLayout {
        branch_template(&self.config).1
    }

    pub fn decoder_layout(&self) -> DecoderLayout {
        decoder_template(&self.config, self.recon_dim()).1
    }

    pub fn recon_dim(&self) -> usize {
        self.decoder.get(self.decoder.len() - 1).ncols()
    }

    /// Verifies every tensor matches the shapes the config implies.
    pub fn validate_shapes(&self) -> Result<()> {
        let (branch, _) = branch_template(&self.config);
        check_shapes(&self.query, &branch)?;
        check_shapes(&self.key, &branch)?;
        let (decoder, _) = decoder_template(&self.config, self.recon_dim());
        check_shapes(&self.decoder, &decoder)
    }
}

/// `key ← m·key + (1 − m)·query` over encoder and projection tensors.
/// The decoder is left alone.
pub fn momentum_update(state: &mut DualEncoderState) -> Result<()> {
    if state.query.len() != state.key.len() {
        return Err(Error::State(format!(
            "query has {} tensors, key has {}",
            state.query.len(),
            state.key.len()
        )));
    }
    for (i, (q, k)) in state.query.tensors().iter().zip(state.key.tensors()).enumerate() {
        if q.dim() != k.dim() {
            return Err(Error::State(format!("tensor `{}` differs in shape between query and key", state.query.name(i))));
        }
    }
    let m = state.momentum;
    let query = &state.query;
    for (k, q) in state.key.tensors_mut().iter_mut().zip(query.tensors()) {
        Zip::from(k).and(q).for_each(|k, &q| *k = m * *k + (1.0 - m) * q);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::LN_EPS;
    use crate::patchify::sample_mask;
    use rand::Rng;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            patch_size: 4,
            grid_side: 4,
            channels: 3,
            embed_dim: 16,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            proj_dim: 8,
            projection_head: true,
            decoder_dim: 8,
            decoder_depth: 1,
            decoder_heads: 2,
        }
    }

    fn random_view(cfg: &EncoderConfig, seed: u64) -> ShiftedView {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let s = cfg.patch_size;
        let patches: Vec<_> = (0..cfg.grid_len())
            .map(|_| Array3::from_shape_fn((s, s, cfg.channels), |_| rng.random::<f64>()))
            .collect();
        let grid = crate::image::PatchGrid::from_patches(patches, s, cfg.grid_side, cfg.grid_side).unwrap();
        ShiftedView::unshifted(&grid)
    }

    #[test]
    fn masked_encode_returns_visible_tokens() {
        let cfg = tiny();
        let (w, _) = init_branch(&cfg, 1);
        let view = random_view(&cfg, 2);
        let mask = sample_mask(&mut rand_chacha::ChaCha8Rng::seed_from_u64(3), 16, 0.5).unwrap();
        let f = encode(&view, Some(&mask), &w, &cfg).unwrap();
        assert_eq!(f.tokens.nrows(), 8);
        assert_eq!(f.index_map, mask.visible_indices());
        let full = encode(&view, None, &w, &cfg).unwrap();
        assert_eq!(full.tokens.nrows(), 16);
        assert!(full.tokens.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zeroed_residual_branches_pass_embeddings_through() {
        let cfg = tiny();
        let (mut w, layout) = init_branch(&cfg, 4);
        for b in &layout.blocks {
            for id in [b.attn_out.w, b.attn_out.b, b.fc2.w, b.fc2.b] {
                w.get_mut(id).fill(0.0);
            }
        }
        let view = random_view(&cfg, 5);
        let idx: Vec<usize> = (0..16).collect();
        let x = flatten_patches(&view.patches, &idx);
        let f = encode(&view, None, &w, &cfg).unwrap();
        let emb = x.dot(w.get(layout.patch_embed.w)) + w.get(layout.patch_embed.b) + w.get(layout.pos);
        for (r, row) in emb.rows().into_iter().enumerate() {
            let mean = row.mean().unwrap();
            let var = row.mapv(|v| (v - mean).powi(2)).mean().unwrap();
            for (c, v) in row.iter().enumerate() {
                let expected = (v - mean) / (var + LN_EPS).sqrt();
                assert!((f.tokens[[r, c]] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn position_comes_from_index_not_order() {
        let cfg = tiny();
        let (w, _) = init_branch(&cfg, 6);
        let view = random_view(&cfg, 7);
        let idx: Vec<usize> = vec![3, 0, 9, 12, 5];
        let perm: Vec<usize> = vec![12, 5, 3, 9, 0];
        let a = encode_patches(flatten_patches(&view.patches, &idx).view(), &idx, &w, &cfg).unwrap();
        let b = encode_patches(flatten_patches(&view.patches, &perm).view(), &perm, &w, &cfg).unwrap();
        for (ra, ja) in idx.iter().enumerate() {
            let rb = perm.iter().position(|j| j == ja).unwrap();
            for c in 0..cfg.embed_dim {
                assert!((a.tokens[[ra, c]] - b.tokens[[rb, c]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn encode_rejects_wrong_grid() {
        let cfg = tiny();
        let (w, _) = init_branch(&cfg, 1);
        let other = EncoderConfig { grid_side: 2, ..tiny() };
        let view = random_view(&other, 1);
        assert!(matches!(encode(&view, None, &w, &cfg), Err(Error::Shape(_))));
    }

    #[test]
    fn projections_are_unit_norm_and_deterministic() {
        let cfg = tiny();
        let (w, _) = init_branch(&cfg, 8);
        let f = encode(&random_view(&cfg, 9), None, &w, &cfg).unwrap();
        let p = project(&f, &w, &cfg).unwrap();
        for row in p.vectors.rows() {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-6);
        }
        let (w2, _) = init_branch(&cfg, 8);
        assert_eq!(p, project(&f, &w2, &cfg).unwrap());
    }

    #[test]
    fn normalization_without_head_is_scale_invariant() {
        let cfg = EncoderConfig { projection_head: false, ..tiny() };
        let (w, _) = init_branch(&cfg, 10);
        let f = encode(&random_view(&cfg, 11), None, &w, &cfg).unwrap();
        let scaled = PatchFeatures { tokens: &f.tokens * 10.0, index_map: f.index_map.clone() };
        let a = project(&f, &w, &cfg).unwrap();
        let b = project(&scaled, &w, &cfg).unwrap();
        for (x, y) in a.vectors.iter().zip(b.vectors.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn decoder_emits_one_value_per_masked_patch() {
        let cfg = tiny();
        let (w, _) = init_branch(&cfg, 12);
        let (dec, _) = init_decoder(&cfg, 1, 13);
        let view = random_view(&cfg, 14);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(15);
        for ratio in [0.0, 0.25, 0.6] {
            let mask = sample_mask(&mut rng, 16, ratio).unwrap();
            let f = encode(&view, Some(&mask), &w, &cfg).unwrap();
            let pred = decode_entropy(&f, &mask, &dec, &cfg).unwrap();
            assert_eq!(pred.len(), mask.masked_count());
        }
    }

    #[test]
    fn identical_branches_give_maximal_positive_similarity() {
        let cfg = tiny();
        let state = DualEncoderState::init(&cfg, 1, 0.999, 3).unwrap();
        let view = random_view(&cfg, 16);
        let q = project(&encode(&view, None, &state.query, &cfg).unwrap(), &state.query, &cfg).unwrap();
        let k = project(&encode(&view, None, &state.key, &cfg).unwrap(), &state.key, &cfg).unwrap();
        for (qr, kr) in q.vectors.rows().into_iter().zip(k.vectors.rows()) {
            assert!((qr.dot(&kr) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn momentum_endpoints_and_arithmetic() {
        let cfg = tiny();
        let mut state = DualEncoderState::init(&cfg, 1, 1.0, 0).unwrap();
        for t in state.query.tensors_mut() {
            t.fill(1.0);
        }
        for t in state.key.tensors_mut() {
            t.fill(0.0);
        }
        let dec_before = state.decoder.clone();
        momentum_update(&mut state).unwrap();
        assert!(state.key.tensors().iter().all(|t| t.iter().all(|v| *v == 0.0)));

        state.momentum = 0.999;
        momentum_update(&mut state).unwrap();
        assert!(state.key.tensors().iter().all(|t| t.iter().all(|v| (v - 0.001).abs() < 1e-15)));

        state.momentum = 0.0;
        momentum_update(&mut state).unwrap();
        assert_eq!(state.key, state.query);
        assert_eq!(state.decoder, dec_before);
    }

    #[test]
    fn momentum_rejects_mismatched_shapes() {
        let cfg = tiny();
        let mut state = DualEncoderState::init(&cfg, 1, 0.9, 0).unwrap();
        *state.key.get_mut(0) = Array2::zeros((1, 1));
        assert!(matches!(momentum_update(&mut state), Err(Error::State(_))));
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig::default().validate().is_ok());
        assert!(EncoderConfig { heads: 3, ..EncoderConfig::default() }.validate().is_err());
        assert!(EncoderConfig { decoder_dim: 128, ..EncoderConfig::default() }.validate().is_err());
        assert!(EncoderConfig { depth: 0, ..EncoderConfig::default() }.validate().is_err());
    }
}
