//! Hierarchical shifted-window transformer slice encoder.
//!
//! Patch embedding (4x4 stride-4 convolution + LayerNorm), stages of
//! windowed self-attention blocks that alternate regular and shifted
//! windows, 2x2 patch merging between stages, a final LayerNorm and a global
//! average pool. Parameter names follow the widely used reference naming
//! (`layers.{i}.blocks.{j}.attn.qkv.weight`, ...), so published weights map
//! onto this module by name.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    gelu, gelu_grad, join, truncated_normal, Conv2d, FeatureMap, LayerNorm, LayerNormCache, Linear, Parameters,
};

/// Added to attention logits between tokens of different shifted regions.
const MASK_VALUE: f64 = -100.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwinConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depths: Vec<usize>,
    pub num_heads: Vec<usize>,
    pub window_size: usize,
    pub mlp_ratio: usize,
}

impl Default for SwinConfig {
    fn default() -> Self {
        Self::tiny()
    }
}

impl SwinConfig {
    /// The smallest standard variant (Swin-T).
    pub fn tiny() -> Self {
        Self {
            patch_size: 4,
            embed_dim: 96,
            depths: vec![2, 2, 6, 2],
            num_heads: vec![3, 6, 12, 24],
            window_size: 7,
            mlp_ratio: 4,
        }
    }

    pub fn small() -> Self {
        Self {
            depths: vec![2, 2, 18, 2],
            ..Self::tiny()
        }
    }

    pub fn base() -> Self {
        Self {
            embed_dim: 128,
            depths: vec![2, 2, 18, 2],
            num_heads: vec![4, 8, 16, 32],
            ..Self::tiny()
        }
    }

    pub fn output_dim(&self) -> usize {
        self.embed_dim << self.depths.len().saturating_sub(1)
    }

    /// Token grid side length of each stage for a square input.
    pub fn stage_resolutions(&self, input: usize) -> Vec<usize> {
        let first = input / self.patch_size.max(1);
        (0..self.depths.len()).map(|i| first >> i).collect()
    }

    pub fn validate(&self, input: usize) -> Result<(), String> {
        if self.patch_size == 0 || self.embed_dim == 0 || self.window_size == 0 || self.mlp_ratio == 0 {
            return Err("patch_size, embed_dim, window_size and mlp_ratio must be positive".into());
        }
        if self.depths.is_empty() || self.depths.len() != self.num_heads.len() {
            return Err("depths and num_heads must be non-empty and of equal length".into());
        }
        if !input.is_multiple_of(self.patch_size) {
            return Err(format!(
                "input {input} is not a multiple of patch_size {}",
                self.patch_size
            ));
        }
        let res = self.stage_resolutions(input);
        for (i, (&r, (&depth, &heads))) in res.iter().zip(self.depths.iter().zip(&self.num_heads)).enumerate() {
            let dim = self.embed_dim << i;
            if depth == 0 || heads == 0 || !dim.is_multiple_of(heads) {
                return Err(format!(
                    "stage {i}: depth and heads must be positive, heads must divide {dim}"
                ));
            }
            if r == 0 || (i + 1 < res.len() && r % 2 != 0) {
                return Err(format!("stage {i}: token grid {r} cannot be merged"));
            }
            let win = self.window_size.min(r);
            if r % win != 0 {
                return Err(format!("stage {i}: token grid {r} is not a multiple of window {win}"));
            }
        }
        Ok(())
    }
}

fn gather_rows(x: &Array2<f64>, index: &[usize]) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((index.len(), x.ncols()));
    for (mut row, &i) in out.rows_mut().into_iter().zip(index) {
        row.assign(&x.row(i));
    }
    out
}

/// Inverse of [`gather_rows`] for a permutation.
fn scatter_rows(y: &Array2<f64>, index: &[usize]) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros(y.raw_dim());
    for (row, &i) in y.rows().into_iter().zip(index) {
        out.row_mut(i).assign(&row);
    }
    out
}

/// Row permutation from `(image, y, x)` order into window order
/// `(image, window_y, window_x, iy, ix)` after a cyclic shift by `-shift`.
fn window_permutation(n: usize, res: usize, win: usize, shift: usize) -> Vec<usize> {
    let per = res * res;
    let mut perm = Vec::with_capacity(n * per);
    for img in 0..n {
        for wy in 0..res / win {
            for wx in 0..res / win {
                for iy in 0..win {
                    for ix in 0..win {
                        let y = (wy * win + iy + shift) % res;
                        let x = (wx * win + ix + shift) % res;
                        perm.push(img * per + y * res + x);
                    }
                }
            }
        }
    }
    perm
}

/// Index into the relative position bias table for each token pair of a window.
fn relative_position_index(win: usize) -> Vec<usize> {
    let n = win * win;
    let span = 2 * win - 1;
    let mut index = Vec::with_capacity(n * n);
    for a in 0..n {
        for b in 0..n {
            let dy = a / win + win - 1 - b / win;
            let dx = a % win + win - 1 - b % win;
            index.push(dy * span + dx);
        }
    }
    index
}

/// Additive attention mask for shifted windows, `(windows, N, N)`.
fn shifted_window_mask(res: usize, win: usize, shift: usize) -> Array3<f64> {
    let region = |c: usize| {
        if c < res - win {
            0
        } else if c < res - shift {
            1
        } else {
            2
        }
    };
    let per_side = res / win;
    let n = win * win;
    let mut mask = Array3::<f64>::zeros((per_side * per_side, n, n));
    for wy in 0..per_side {
        for wx in 0..per_side {
            let ids: Vec<usize> = (0..n)
                .map(|t| 3 * region(wy * win + t / win) + region(wx * win + t % win))
                .collect();
            let mut m = mask.index_axis_mut(Axis(0), wy * per_side + wx);
            for a in 0..n {
                for b in 0..n {
                    if ids[a] != ids[b] {
                        m[[a, b]] = MASK_VALUE;
                    }
                }
            }
        }
    }
    mask
}

fn softmax_rows(x: &mut Array2<f64>) {
    for mut row in x.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowAttention {
    pub qkv: Linear,
    pub proj: Linear,
    /// `((2w-1)^2, heads)`.
    pub relative_position_bias_table: Array2<f64>,
    heads: usize,
    index: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwinBlock {
    pub norm1: LayerNorm,
    pub attn: WindowAttention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    res: usize,
    window: usize,
    shift: usize,
    mask: Option<Array3<f64>>,
}

struct BlockCache {
    perm: Vec<usize>,
    ln1: LayerNormCache,
    xw: Array2<f64>,
    qkv: Array2<f64>,
    /// Attention probabilities per (window, head).
    probs: Vec<Array2<f64>>,
    attn_out: Array2<f64>,
    ln2: LayerNormCache,
    xn2: Array2<f64>,
    hidden: Array2<f64>,
    act: Array2<f64>,
}

impl SwinBlock {
    fn new(dim: usize, heads: usize, res: usize, cfg: &SwinConfig, shifted: bool, rng: &mut impl Rng) -> Self {
        let window = cfg.window_size.min(res);
        // A window covering the whole grid has nothing to shift across.
        let shift = if shifted && res > window { window / 2 } else { 0 };
        let span = 2 * window - 1;
        Self {
            norm1: LayerNorm::new(dim),
            attn: WindowAttention {
                qkv: Linear::new(dim, 3 * dim, rng),
                proj: Linear::new(dim, dim, rng),
                relative_position_bias_table: truncated_normal(rng, 0.02, (span * span, heads)),
                heads,
                index: relative_position_index(window),
            },
            norm2: LayerNorm::new(dim),
            fc1: Linear::new(dim, cfg.mlp_ratio * dim, rng),
            fc2: Linear::new(cfg.mlp_ratio * dim, dim, rng),
            res,
            window,
            shift,
            mask: (shift > 0).then(|| shifted_window_mask(res, window, shift)),
        }
    }

    fn attention_forward(&self, qkv: &Array2<f64>) -> (Array2<f64>, Vec<Array2<f64>>) {
        let dim = qkv.ncols() / 3;
        let heads = self.attn.heads;
        let hd = dim / heads;
        let scale = (hd as f64).powf(-0.5);
        let n = self.window * self.window;
        let windows_per_image = (self.res / self.window).pow(2);
        let mut out = Array2::<f64>::zeros((qkv.nrows(), dim));
        let mut probs = Vec::with_capacity(qkv.nrows() / n * heads);
        for b in 0..qkv.nrows() / n {
            let rows = b * n..(b + 1) * n;
            for h in 0..heads {
                let q = qkv.slice(s![rows.clone(), h * hd..(h + 1) * hd]);
                let k = qkv.slice(s![rows.clone(), dim + h * hd..dim + (h + 1) * hd]);
                let v = qkv.slice(s![rows.clone(), 2 * dim + h * hd..2 * dim + (h + 1) * hd]);
                let mut logits = q.dot(&k.t()) * scale;
                for (l, &idx) in logits.iter_mut().zip(&self.attn.index) {
                    *l += self.attn.relative_position_bias_table[[idx, h]];
                }
                if let Some(mask) = &self.mask {
                    logits += &mask.index_axis(Axis(0), b % windows_per_image);
                }
                softmax_rows(&mut logits);
                out.slice_mut(s![rows.clone(), h * hd..(h + 1) * hd])
                    .assign(&logits.dot(&v));
                probs.push(logits);
            }
        }
        (out, probs)
    }

    fn attention_backward(
        &self,
        qkv: &Array2<f64>,
        probs: &[Array2<f64>],
        d_out: &Array2<f64>,
        grad: &mut WindowAttention,
    ) -> Array2<f64> {
        let dim = qkv.ncols() / 3;
        let heads = self.attn.heads;
        let hd = dim / heads;
        let scale = (hd as f64).powf(-0.5);
        let n = self.window * self.window;
        let mut d_qkv = Array2::<f64>::zeros(qkv.raw_dim());
        for b in 0..qkv.nrows() / n {
            let rows = b * n..(b + 1) * n;
            for h in 0..heads {
                let p = &probs[b * heads + h];
                let q = qkv.slice(s![rows.clone(), h * hd..(h + 1) * hd]);
                let k = qkv.slice(s![rows.clone(), dim + h * hd..dim + (h + 1) * hd]);
                let v = qkv.slice(s![rows.clone(), 2 * dim + h * hd..2 * dim + (h + 1) * hd]);
                let d_o = d_out.slice(s![rows.clone(), h * hd..(h + 1) * hd]);
                let d_p = d_o.dot(&v.t());
                let d_v = p.t().dot(&d_o);
                let mut d_s = p * &d_p;
                for (mut row, prow) in d_s.rows_mut().into_iter().zip(p.rows()) {
                    let total = row.sum();
                    row.zip_mut_with(&prow, |d, &pi| *d -= pi * total);
                }
                for (&g, &idx) in d_s.iter().zip(&self.attn.index) {
                    grad.relative_position_bias_table[[idx, h]] += g;
                }
                let d_q = d_s.dot(&k) * scale;
                let d_k = d_s.t().dot(&q) * scale;
                d_qkv.slice_mut(s![rows.clone(), h * hd..(h + 1) * hd]).assign(&d_q);
                d_qkv
                    .slice_mut(s![rows.clone(), dim + h * hd..dim + (h + 1) * hd])
                    .assign(&d_k);
                d_qkv
                    .slice_mut(s![rows.clone(), 2 * dim + h * hd..2 * dim + (h + 1) * hd])
                    .assign(&d_v);
            }
        }
        d_qkv
    }

    fn forward(&self, x: &Array2<f64>, images: usize) -> (Array2<f64>, BlockCache) {
        let perm = window_permutation(images, self.res, self.window, self.shift);
        let (xn, ln1) = self.norm1.forward(&x.view());
        let xw = gather_rows(&xn, &perm);
        let qkv = self.attn.qkv.forward(&xw.view());
        let (attn_out, probs) = self.attention_forward(&qkv);
        let y = self.attn.proj.forward(&attn_out.view());
        let x1 = x + &scatter_rows(&y, &perm);
        let (xn2, ln2) = self.norm2.forward(&x1.view());
        let hidden = self.fc1.forward(&xn2.view());
        let act = hidden.mapv(gelu);
        let out = &x1 + &self.fc2.forward(&act.view());
        (
            out,
            BlockCache {
                perm,
                ln1,
                xw,
                qkv,
                probs,
                attn_out,
                ln2,
                xn2,
                hidden,
                act,
            },
        )
    }

    fn backward(&self, c: &BlockCache, d_out: &Array2<f64>, grad: &mut SwinBlock) -> Array2<f64> {
        let mut d_x1 = d_out.clone();
        let mut d_hidden = self.fc2.backward(&c.act.view(), d_out, &mut grad.fc2);
        d_hidden.zip_mut_with(&c.hidden, |d, &h| *d *= gelu_grad(h));
        let d_xn2 = self.fc1.backward(&c.xn2.view(), &d_hidden, &mut grad.fc1);
        d_x1 += &self.norm2.backward(&c.ln2, &d_xn2, &mut grad.norm2);

        let d_y = gather_rows(&d_x1, &c.perm);
        let d_attn = self.attn.proj.backward(&c.attn_out.view(), &d_y, &mut grad.attn.proj);
        let d_qkv = self.attention_backward(&c.qkv, &c.probs, &d_attn, &mut grad.attn);
        let d_xw = self.attn.qkv.backward(&c.xw.view(), &d_qkv, &mut grad.attn.qkv);
        let d_xn = scatter_rows(&d_xw, &c.perm);
        d_x1 + self.norm1.backward(&c.ln1, &d_xn, &mut grad.norm1)
    }
}

impl Parameters for SwinBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.attn.qkv.visit(&join(prefix, "attn.qkv"), f);
        self.attn.proj.visit(&join(prefix, "attn.proj"), f);
        f(
            &join(prefix, "attn.relative_position_bias_table"),
            self.attn.relative_position_bias_table.view().into_dyn(),
        );
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.fc1.visit(&join(prefix, "mlp.fc1"), f);
        self.fc2.visit(&join(prefix, "mlp.fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.attn.qkv.visit_mut(&join(prefix, "attn.qkv"), f);
        self.attn.proj.visit_mut(&join(prefix, "attn.proj"), f);
        f(
            &join(prefix, "attn.relative_position_bias_table"),
            self.attn.relative_position_bias_table.view_mut().into_dyn(),
        );
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
        self.fc1.visit_mut(&join(prefix, "mlp.fc1"), f);
        self.fc2.visit_mut(&join(prefix, "mlp.fc2"), f);
    }
}

/// 2x2 neighbourhood concatenation, LayerNorm and a bias-free projection
/// from 4C to 2C channels.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchMerging {
    pub norm: LayerNorm,
    pub reduction: Linear,
    res: usize,
}

// Concatenation order of the 2x2 neighbours as (row, column) offsets.
const MERGE_ORDER: [(usize, usize); 4] = [(0, 0), (1, 0), (0, 1), (1, 1)];

impl PatchMerging {
    fn source_rows(&self, images: usize) -> Vec<[usize; 4]> {
        let (r, half) = (self.res, self.res / 2);
        let mut rows = Vec::with_capacity(images * half * half);
        for img in 0..images {
            for y in 0..half {
                for x in 0..half {
                    rows.push(MERGE_ORDER.map(|(dy, dx)| img * r * r + (2 * y + dy) * r + 2 * x + dx));
                }
            }
        }
        rows
    }

    fn forward(&self, x: &Array2<f64>, images: usize) -> (Array2<f64>, (Array2<f64>, LayerNormCache)) {
        let c = x.ncols();
        let src = self.source_rows(images);
        let mut cat = Array2::<f64>::zeros((src.len(), 4 * c));
        for (mut row, group) in cat.rows_mut().into_iter().zip(&src) {
            for (j, &i) in group.iter().enumerate() {
                row.slice_mut(s![j * c..(j + 1) * c]).assign(&x.row(i));
            }
        }
        let (normed, cache) = self.norm.forward(&cat.view());
        let out = self.reduction.forward(&normed.view());
        (out, (normed, cache))
    }

    fn backward(
        &self,
        cache: &(Array2<f64>, LayerNormCache),
        d_out: &Array2<f64>,
        images: usize,
        grad: &mut PatchMerging,
    ) -> Array2<f64> {
        let d_normed = self.reduction.backward(&cache.0.view(), d_out, &mut grad.reduction);
        let d_cat = self.norm.backward(&cache.1, &d_normed, &mut grad.norm);
        let c = d_cat.ncols() / 4;
        let mut dx = Array2::<f64>::zeros((images * self.res * self.res, c));
        for (row, group) in d_cat.rows().into_iter().zip(self.source_rows(images)) {
            for (j, &i) in group.iter().enumerate() {
                dx.row_mut(i).assign(&row.slice(s![j * c..(j + 1) * c]));
            }
        }
        dx
    }
}

impl Parameters for PatchMerging {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        self.norm.visit(&join(prefix, "norm"), f);
        self.reduction.visit(&join(prefix, "reduction"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        self.norm.visit_mut(&join(prefix, "norm"), f);
        self.reduction.visit_mut(&join(prefix, "reduction"), f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwinStage {
    pub blocks: Vec<SwinBlock>,
    pub downsample: Option<PatchMerging>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwinEncoder {
    pub config: SwinConfig,
    pub patch_embed: Conv2d,
    pub patch_norm: LayerNorm,
    pub stages: Vec<SwinStage>,
    pub norm: LayerNorm,
}

/// Block caches of one stage and, when the stage downsamples, the merge input
/// and its norm cache.
type StageCache = (Vec<BlockCache>, Option<(Array2<f64>, LayerNormCache)>);

pub struct SwinCache {
    images: usize,
    patch_cols: Array2<f64>,
    patch_ln: LayerNormCache,
    stages: Vec<StageCache>,
    final_ln: LayerNormCache,
    tokens_per_image: usize,
}

impl SwinEncoder {
    /// `config` must already be validated for `input` pixels per side.
    pub fn new(config: &SwinConfig, in_channels: usize, input: usize, rng: &mut impl Rng) -> Self {
        let p = config.patch_size;
        let resolutions = config.stage_resolutions(input);
        let last = config.depths.len() - 1;
        let stages = resolutions
            .iter()
            .enumerate()
            .map(|(i, &res)| {
                let dim = config.embed_dim << i;
                let blocks = (0..config.depths[i])
                    .map(|j| SwinBlock::new(dim, config.num_heads[i], res, config, j % 2 == 1, rng))
                    .collect();
                let downsample = (i < last).then(|| PatchMerging {
                    norm: LayerNorm::new(4 * dim),
                    reduction: Linear::no_bias(4 * dim, 2 * dim, rng),
                    res,
                });
                SwinStage { blocks, downsample }
            })
            .collect();
        let mut patch_embed = Conv2d::new(in_channels, config.embed_dim, p, p, 0, rng);
        patch_embed.weight = truncated_normal(rng, 0.02, patch_embed.weight.dim());
        Self {
            config: config.clone(),
            patch_embed,
            patch_norm: LayerNorm::new(config.embed_dim),
            stages,
            norm: LayerNorm::new(config.output_dim()),
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.output_dim()
    }

    pub fn forward(&self, input: &FeatureMap) -> (Array2<f64>, SwinCache) {
        let images = input.n;
        let (patches, patch_cols) = self.patch_embed.forward(input);
        let (mut x, patch_ln) = self.patch_norm.forward(&patches.data.view());
        let mut stage_caches = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let mut block_caches = Vec::with_capacity(stage.blocks.len());
            for block in &stage.blocks {
                let (y, c) = block.forward(&x, images);
                x = y;
                block_caches.push(c);
            }
            let merge = stage.downsample.as_ref().map(|m| {
                let (y, c) = m.forward(&x, images);
                x = y;
                c
            });
            stage_caches.push((block_caches, merge));
        }
        let (normed, final_ln) = self.norm.forward(&x.view());
        let tokens_per_image = normed.nrows() / images;
        let pooled = pool_tokens(&normed.view(), images);
        (
            pooled,
            SwinCache {
                images,
                patch_cols,
                patch_ln,
                stages: stage_caches,
                final_ln,
                tokens_per_image,
            },
        )
    }

    pub fn backward(&self, cache: &SwinCache, d_embed: &Array2<f64>, grad: &mut Self) {
        let images = cache.images;
        let per = cache.tokens_per_image;
        let mut d_norm = Array2::<f64>::zeros((images * per, d_embed.ncols()));
        for img in 0..images {
            let g = d_embed.row(img).mapv(|v| v / per as f64);
            d_norm
                .slice_mut(s![img * per..(img + 1) * per, ..])
                .assign(&g.broadcast((per, g.len())).unwrap());
        }
        let mut dx = self.norm.backward(&cache.final_ln, &d_norm, &mut grad.norm);
        for ((stage, gstage), (blocks, merge)) in
            self.stages.iter().zip(grad.stages.iter_mut()).zip(&cache.stages).rev()
        {
            if let (Some(m), Some(mc)) = (&stage.downsample, merge) {
                dx = m.backward(mc, &dx, images, gstage.downsample.as_mut().expect("same shape"));
            }
            for ((block, gblock), bc) in stage.blocks.iter().zip(gstage.blocks.iter_mut()).zip(blocks).rev() {
                dx = block.backward(bc, &dx, gblock);
            }
        }
        let d_patches = self.patch_norm.backward(&cache.patch_ln, &dx, &mut grad.patch_norm);
        self.patch_embed
            .backward(&cache.patch_cols, &d_patches, &mut grad.patch_embed, None);
    }
}

fn pool_tokens(x: &ArrayView2<f64>, images: usize) -> Array2<f64> {
    let per = x.nrows() / images;
    let mut out = Array2::<f64>::zeros((images, x.ncols()));
    for (img, mut row) in out.rows_mut().into_iter().enumerate() {
        let mean: Array1<f64> = x.slice(s![img * per..(img + 1) * per, ..]).sum_axis(Axis(0)) / per as f64;
        row.assign(&mean);
    }
    out
}

impl Parameters for SwinEncoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        self.patch_embed.visit(&join(prefix, "patch_embed.proj"), f);
        self.patch_norm.visit(&join(prefix, "patch_embed.norm"), f);
        for (i, stage) in self.stages.iter().enumerate() {
            for (j, block) in stage.blocks.iter().enumerate() {
                block.visit(&join(prefix, &format!("layers.{i}.blocks.{j}")), f);
            }
            if let Some(m) = &stage.downsample {
                m.visit(&join(prefix, &format!("layers.{i}.downsample")), f);
            }
        }
        self.norm.visit(&join(prefix, "norm"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        self.patch_embed.visit_mut(&join(prefix, "patch_embed.proj"), f);
        self.patch_norm.visit_mut(&join(prefix, "patch_embed.norm"), f);
        for (i, stage) in self.stages.iter_mut().enumerate() {
            for (j, block) in stage.blocks.iter_mut().enumerate() {
                block.visit_mut(&join(prefix, &format!("layers.{i}.blocks.{j}")), f);
            }
            if let Some(m) = &mut stage.downsample {
                m.visit_mut(&join(prefix, &format!("layers.{i}.downsample")), f);
            }
        }
        self.norm.visit_mut(&join(prefix, "norm"), f);
    }
}
