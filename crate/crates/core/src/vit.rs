//! Small seeded pre-norm ViT encoder with a token-merging hook between the
//! attention and MLP halves of every block.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dtome::{
    apply_merge, bipartite_scores, merged_sizes, select_edges_threshold, select_edges_topr,
    similarity_keys, size_weighted_attention, split_alternating, EdgeSet,
};
use crate::error::{shape_err, Error, Result};
use crate::matrix::TokenMatrix;
use crate::merge_map::{MergeMap, SizeVector};
use crate::nn::{AttentionWeights, Init, LayerNorm, Mlp};

/// Single-channel image with real-valued pixels, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub h: usize,
    pub w: usize,
    pub pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(h: usize, w: usize, pixels: Vec<f64>) -> Result<Self> {
        if h == 0 || w == 0 || pixels.len() != h * w {
            return Err(shape_err!("{h}x{w} image with {} pixels", pixels.len()));
        }
        Ok(Self { h, w, pixels })
    }

    /// 8-bit grayscale mapped to `[-1, 1]`.
    pub fn from_bytes(h: usize, w: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(
            h,
            w,
            bytes.iter().map(|&b| b as f64 / 127.5 - 1.0).collect(),
        )
    }
}

/// How tokens are merged inside the encoder.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum MergeMode {
    #[default]
    Off,
    /// Merge exactly `r[i]` tokens at layer `i` (clamped to the available edges).
    FixedTopR(Vec<usize>),
    /// Merge every edge whose score reaches `taus[i]`.
    Dynamic(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
/// Missing JSON fields take their default values.
#[serde(default, deny_unknown_fields)]
pub struct ViTConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub patch: usize,
    pub cls: bool,
    pub weight_seed: u64,
    #[serde(skip)]
    pub merge: MergeMode,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            layers: 6,
            dim: 32,
            heads: 4,
            mlp_hidden: 64,
            image_h: 32,
            image_w: 32,
            patch: 4,
            cls: true,
            weight_seed: 7,
            merge: MergeMode::Off,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0
            || self.dim == 0
            || self.heads == 0
            || self.mlp_hidden == 0
            || self.patch == 0
        {
            return Err(Error::Config(
                "layers, dim, heads, mlp_hidden and patch must be positive".into(),
            ));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "dim {} is not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.image_h == 0
            || self.image_w == 0
            || !self.image_h.is_multiple_of(self.patch)
            || !self.image_w.is_multiple_of(self.patch)
        {
            return Err(Error::Config(format!(
                "image {}x{} is not divisible into {}-pixel patches",
                self.image_h, self.image_w, self.patch
            )));
        }
        match &self.merge {
            MergeMode::FixedTopR(r) if r.len() != self.layers => Err(Error::Config(format!(
                "top-r schedule has {} entries for {} layers",
                r.len(),
                self.layers
            ))),
            MergeMode::Dynamic(t) if t.len() != self.layers => Err(Error::Config(format!(
                "threshold profile has {} layers, encoder has {}",
                t.len(),
                self.layers
            ))),
            MergeMode::Dynamic(t) if t.iter().any(|v| v.is_nan()) => {
                Err(Error::Config("threshold profile contains NaN".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image_h / self.patch, self.image_w / self.patch)
    }

    /// Token count `N` entering the first block.
    pub fn num_tokens(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw + usize::from(self.cls)
    }

    pub fn with_merge(mut self, merge: MergeMode) -> Self {
        self.merge = merge;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln_attn: LayerNorm,
    pub attn: AttentionWeights,
    pub ln_mlp: LayerNorm,
    pub mlp: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViTWeights {
    pub seed: u64,
    pub patch_proj: TokenMatrix,
    pub patch_bias: Vec<f64>,
    pub cls_token: Vec<f64>,
    /// One row per token position (CLS first when present).
    pub pos_embed: TokenMatrix,
    pub blocks: Vec<Block>,
}

const POS_EMBED_STD: f64 = 0.1;

impl ViTWeights {
    pub fn seeded(cfg: &ViTConfig) -> Result<Self> {
        cfg.validate()?;
        let mut init = Init::new(cfg.weight_seed);
        let pp = cfg.patch * cfg.patch;
        let patch_proj = init.fan_in(pp, cfg.dim)?;
        let patch_bias = init.vector(cfg.dim, 0.02);
        let cls_token = init.vector(cfg.dim, 1.0);
        let pos_embed = init.matrix(cfg.num_tokens(), cfg.dim, POS_EMBED_STD)?;
        let blocks = (0..cfg.layers)
            .map(|_| {
                Ok(Block {
                    ln_attn: init.layer_norm(cfg.dim),
                    attn: AttentionWeights::seeded(cfg.heads, cfg.head_dim(), &mut init)?,
                    ln_mlp: init.layer_norm(cfg.dim),
                    mlp: init.mlp(cfg.dim, cfg.mlp_hidden)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            seed: cfg.weight_seed,
            patch_proj,
            patch_bias,
            cls_token,
            pos_embed,
            blocks,
        })
    }

    fn check(&self, cfg: &ViTConfig) -> Result<()> {
        let pp = cfg.patch * cfg.patch;
        if self.blocks.len() != cfg.layers
            || self.patch_proj.rows() != pp
            || self.patch_proj.cols() != cfg.dim
            || self.pos_embed.rows() != cfg.num_tokens()
            || self
                .blocks
                .iter()
                .any(|b| b.attn.heads != cfg.heads || b.mlp.w1.cols() != cfg.mlp_hidden)
        {
            return Err(Error::Config(
                "weights do not match the encoder config".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct WeightsHeader {
    format: String,
    version: u32,
    layers: usize,
    dim: usize,
    heads: usize,
    mlp_hidden: usize,
    patch: usize,
    tokens: usize,
    seed: u64,
    values: usize,
}

const WEIGHTS_FORMAT: &str = "tokmerge-vit-weights";

fn push_matrix(out: &mut Vec<f64>, m: &TokenMatrix) {
    out.extend_from_slice(m.data());
}

impl ViTWeights {
    /// Parameters in file order: patch projection, patch bias, CLS token,
    /// position embeddings, then per block `ln_attn (γ, β)`, `Wq Wk Wv Wo`,
    /// `ln_mlp (γ, β)`, `W1 b1 W2 b2`.
    fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::new();
        push_matrix(&mut v, &self.patch_proj);
        v.extend_from_slice(&self.patch_bias);
        v.extend_from_slice(&self.cls_token);
        push_matrix(&mut v, &self.pos_embed);
        for b in &self.blocks {
            v.extend_from_slice(&b.ln_attn.gamma);
            v.extend_from_slice(&b.ln_attn.beta);
            for w in [&b.attn.wq, &b.attn.wk, &b.attn.wv, &b.attn.wo] {
                push_matrix(&mut v, w);
            }
            v.extend_from_slice(&b.ln_mlp.gamma);
            v.extend_from_slice(&b.ln_mlp.beta);
            push_matrix(&mut v, &b.mlp.w1);
            v.extend_from_slice(&b.mlp.b1);
            push_matrix(&mut v, &b.mlp.w2);
            v.extend_from_slice(&b.mlp.b2);
        }
        v
    }

    /// Writes `u64` LE header length, the JSON header, then every parameter
    /// as an `f64` LE.
    pub fn save(&self, cfg: &ViTConfig, path: &Path) -> Result<()> {
        self.check(cfg)?;
        let values = self.flatten();
        let header = WeightsHeader {
            format: WEIGHTS_FORMAT.into(),
            version: 1,
            layers: cfg.layers,
            dim: cfg.dim,
            heads: cfg.heads,
            mlp_hidden: cfg.mlp_hidden,
            patch: cfg.patch,
            tokens: cfg.num_tokens(),
            seed: self.seed,
            values: values.len(),
        };
        let header =
            serde_json::to_vec(&header).map_err(|e| Error::SchemaViolation(e.to_string()))?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(&(header.len() as u64).to_le_bytes())?;
        f.write_all(&header)?;
        for v in values {
            f.write_all(&v.to_le_bytes())?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(cfg: &ViTConfig, path: &Path) -> Result<Self> {
        cfg.validate()?;
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut len = [0u8; 8];
        f.read_exact(&mut len)?;
        let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
        f.read_exact(&mut header)?;
        let header: WeightsHeader =
            serde_json::from_slice(&header).map_err(|e| Error::SchemaViolation(e.to_string()))?;
        if header.format != WEIGHTS_FORMAT || header.version != 1 {
            return Err(Error::SchemaViolation(format!(
                "unsupported weights file {} v{}",
                header.format, header.version
            )));
        }
        if (
            header.layers,
            header.dim,
            header.heads,
            header.mlp_hidden,
            header.patch,
            header.tokens,
        ) != (
            cfg.layers,
            cfg.dim,
            cfg.heads,
            cfg.mlp_hidden,
            cfg.patch,
            cfg.num_tokens(),
        ) {
            return Err(Error::Config(
                "weights header does not match the encoder config".into(),
            ));
        }
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes)?;
        if bytes.len() != header.values * 8 {
            return Err(Error::SchemaViolation(format!(
                "expected {} values, found {} bytes",
                header.values,
                bytes.len()
            )));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let mut r = Reader {
            values: &values,
            at: 0,
        };
        let (d, pp, hidden) = (cfg.dim, cfg.patch * cfg.patch, cfg.mlp_hidden);
        let patch_proj = r.matrix(pp, d)?;
        let patch_bias = r.vec(d)?;
        let cls_token = r.vec(d)?;
        let pos_embed = r.matrix(cfg.num_tokens(), d)?;
        let mut blocks = Vec::with_capacity(cfg.layers);
        for _ in 0..cfg.layers {
            let ln_attn = LayerNorm {
                gamma: r.vec(d)?,
                beta: r.vec(d)?,
            };
            let attn = AttentionWeights {
                heads: cfg.heads,
                head_dim: cfg.head_dim(),
                wq: r.matrix(d, d)?,
                wk: r.matrix(d, d)?,
                wv: r.matrix(d, d)?,
                wo: r.matrix(d, d)?,
            };
            let ln_mlp = LayerNorm {
                gamma: r.vec(d)?,
                beta: r.vec(d)?,
            };
            let mlp = Mlp {
                w1: r.matrix(d, hidden)?,
                b1: r.vec(hidden)?,
                w2: r.matrix(hidden, d)?,
                b2: r.vec(d)?,
            };
            blocks.push(Block {
                ln_attn,
                attn,
                ln_mlp,
                mlp,
            });
        }
        if r.at != values.len() {
            return Err(Error::SchemaViolation(
                "trailing values in weights file".into(),
            ));
        }
        Ok(Self {
            seed: header.seed,
            patch_proj,
            patch_bias,
            cls_token,
            pos_embed,
            blocks,
        })
    }
}

struct Reader<'a> {
    values: &'a [f64],
    at: usize,
}

impl Reader<'_> {
    fn vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let end = self.at + n;
        let out = self
            .values
            .get(self.at..end)
            .ok_or_else(|| Error::SchemaViolation("weights file is truncated".into()))?
            .to_vec();
        self.at = end;
        Ok(out)
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<TokenMatrix> {
        TokenMatrix::new(rows, cols, self.vec(rows * cols)?)
    }
}

/// Flattened non-overlapping patches, one row per patch in raster order.
fn patch_pixels(image: &GrayImage, cfg: &ViTConfig) -> Result<TokenMatrix> {
    let p = cfg.patch;
    if !image.h.is_multiple_of(p) || !image.w.is_multiple_of(p) {
        return Err(shape_err!(
            "{}x{} image is not divisible by patch {p}",
            image.h,
            image.w
        ));
    }
    if (image.h, image.w) != (cfg.image_h, cfg.image_w) {
        return Err(shape_err!(
            "{}x{} image for an encoder configured for {}x{}",
            image.h,
            image.w,
            cfg.image_h,
            cfg.image_w
        ));
    }
    let (gh, gw) = (image.h / p, image.w / p);
    TokenMatrix::from_fn(gh * gw, p * p, |t, i| {
        let (pr, pc) = (t / gw, t % gw);
        let (dy, dx) = (i / p, i % p);
        image.pixels[(pr * p + dy) * image.w + pc * p + dx]
    })
}

/// Linear patch embeddings, without CLS or position terms.
pub fn patch_embeddings(
    image: &GrayImage,
    cfg: &ViTConfig,
    weights: &ViTWeights,
) -> Result<TokenMatrix> {
    patch_pixels(image, cfg)?
        .matmul(&weights.patch_proj)?
        .add_row_vector(&weights.patch_bias)
}

/// Patch embeddings with the CLS token prepended (if configured) and
/// position embeddings added.
pub fn patchify(image: &GrayImage, cfg: &ViTConfig, weights: &ViTWeights) -> Result<TokenMatrix> {
    let patches = patch_embeddings(image, cfg, weights)?;
    let mut rows: Vec<&[f64]> = Vec::with_capacity(cfg.num_tokens());
    if cfg.cls {
        rows.push(&weights.cls_token);
    }
    rows.extend((0..patches.rows()).map(|r| patches.row(r)));
    TokenMatrix::from_rows(&rows)?.add(&weights.pos_embed)
}

/// Running state of one image between encoder blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerState {
    pub x: TokenMatrix,
    pub sizes: SizeVector,
    /// Cumulative map from original token positions to current rows.
    pub map: MergeMap,
    pub layer_counts: Vec<usize>,
}

/// Attention half of a block: the residual stream after attention and the
/// bipartite edges proposed from this block's keys.
#[derive(Debug, Clone)]
pub struct AttentionStep {
    pub x: TokenMatrix,
    pub edges: EdgeSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoding {
    pub tokens: TokenMatrix,
    pub map: MergeMap,
    /// Token count after each block.
    pub layer_counts: Vec<usize>,
}

impl Encoding {
    pub fn token_count(&self) -> usize {
        self.tokens.rows()
    }

    /// One row per token, comma separated, 6 significant digits.
    pub fn tokens_csv(&self) -> String {
        let mut s = String::new();
        for r in 0..self.tokens.rows() {
            let row: Vec<String> = self.tokens.row(r).iter().map(|v| format_sig6(*v)).collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }
}

/// `%.6g`-style formatting with a '.' decimal separator.
pub fn format_sig6(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let exp = v.abs().log10().floor() as i32;
    if !(-5..6).contains(&exp) {
        let s = format!("{v:.5e}");
        let (mantissa, e) = s.split_once('e').expect("exponent form");
        let mantissa = trim_zeros(mantissa);
        return format!("{mantissa}e{e}");
    }
    let decimals = (5 - exp).max(0) as usize;
    trim_zeros(&format!("{v:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Seeded encoder: config plus weights.
#[derive(Debug, Clone)]
pub struct ToyVit {
    pub cfg: ViTConfig,
    pub weights: ViTWeights,
}

impl ToyVit {
    pub fn seeded(cfg: ViTConfig) -> Result<Self> {
        let weights = ViTWeights::seeded(&cfg)?;
        Ok(Self { cfg, weights })
    }

    pub fn new(cfg: ViTConfig, weights: ViTWeights) -> Result<Self> {
        cfg.validate()?;
        weights.check(&cfg)?;
        Ok(Self { cfg, weights })
    }

    pub fn initial_state(&self, image: &GrayImage) -> Result<LayerState> {
        let x = patchify(image, &self.cfg, &self.weights)?;
        let n = x.rows();
        Ok(LayerState {
            x,
            sizes: SizeVector::ones(n)?,
            map: MergeMap::identity(n)?,
            layer_counts: Vec::with_capacity(self.cfg.layers),
        })
    }

    /// `x + SWA(LN(x))` for block `layer`, plus the proposed merge edges
    /// when `want_edges` is set and at least two tokens remain.
    pub fn attention_step(
        &self,
        layer: usize,
        state: &LayerState,
        want_edges: bool,
    ) -> Result<AttentionStep> {
        let block = &self.weights.blocks[layer];
        let normed = block.ln_attn.apply(&state.x)?;
        let qs = block.attn.project_heads(&normed, &block.attn.wq)?;
        let ks = block.attn.project_heads(&normed, &block.attn.wk)?;
        let vs = block.attn.project_heads(&normed, &block.attn.wv)?;
        let scale = 1.0 / (block.attn.head_dim as f64).sqrt();
        let heads = qs
            .iter()
            .zip(&ks)
            .zip(&vs)
            .map(|((q, k), v)| size_weighted_attention(q, k, v, &state.sizes, scale))
            .collect::<Result<Vec<_>>>()?;
        let attn = TokenMatrix::hcat(&heads)?.matmul(&block.attn.wo)?;
        let x = state.x.add(&attn)?;
        let edges = if want_edges && x.rows() >= 2 {
            let keys = similarity_keys(&ks)?;
            bipartite_scores(&keys, &split_alternating(x.rows(), self.cfg.cls)?)?
        } else {
            EdgeSet::default()
        };
        Ok(AttentionStep { x, edges })
    }

    /// Merges `selected` edges, then applies the MLP half of block `layer`.
    pub fn finish_step(
        &self,
        layer: usize,
        state: LayerState,
        step: AttentionStep,
        selected: &EdgeSet,
    ) -> Result<LayerState> {
        let block = &self.weights.blocks[layer];
        let (x, sizes, map) = if selected.is_empty() {
            (step.x, state.sizes, state.map)
        } else {
            let (x, layer_map) = apply_merge(&step.x, &state.sizes, selected)?;
            let sizes = merged_sizes(&state.sizes, &layer_map)?;
            let map = MergeMap::compose(&layer_map, &state.map)?;
            (x, sizes, map)
        };
        let x = x.add(&block.mlp.apply(&block.ln_mlp.apply(&x)?)?)?;
        let mut layer_counts = state.layer_counts;
        layer_counts.push(x.rows());
        Ok(LayerState {
            x,
            sizes,
            map,
            layer_counts,
        })
    }

    pub fn encode(&self, image: &GrayImage) -> Result<Encoding> {
        self.cfg.validate()?;
        let mut state = self.initial_state(image)?;
        for layer in 0..self.cfg.layers {
            let merging = !matches!(self.cfg.merge, MergeMode::Off);
            let step = self.attention_step(layer, &state, merging)?;
            let selected = match &self.cfg.merge {
                MergeMode::Off => EdgeSet::default(),
                MergeMode::FixedTopR(r) => select_edges_topr(&step.edges, r[layer]),
                MergeMode::Dynamic(taus) => select_edges_threshold(&step.edges, taus[layer]),
            };
            state = self.finish_step(layer, state, step, &selected)?;
        }
        Ok(Encoding {
            tokens: state.x,
            map: state.map,
            layer_counts: state.layer_counts,
        })
    }
}

/// Convenience wrapper matching the encoder operation signature.
pub fn encode(image: &GrayImage, cfg: &ViTConfig, weights: &ViTWeights) -> Result<Encoding> {
    ToyVit::new(cfg.clone(), weights.clone())?.encode(image)
}
