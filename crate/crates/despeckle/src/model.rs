//! Dual-branch shared-weight denoiser: patch embedding, cross-shaped-window
//! transformer encoder, CNN decoder, and the pooled instance-embedding head.
//! Both branches read one parameter set; weight sharing is by construction.
//!
//! The encoder runs four stages with patch-merge downsampling between them
//! (side halves, channels double), so a 224/4 = 56 token grid ends at 7x7
//! with 8x the base embedding dim. Ablation variants swap in a pure-CNN
//! encoder and/or a transformer decoder.

use crate::error::{Error, Result};
use crate::tape::{Arr, Tape, Var};
use ndarray::{Array2, IxDyn};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::rc::Rc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Transformer,
    Cnn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub stage_depths: [usize; 4],
    pub heads_per_stage: [usize; 4],
    pub stripe_widths: [usize; 4],
    pub decoder_channels: Vec<usize>,
    pub mlp_ratio: usize,
    pub instance_dim: usize,
    pub instance_hidden: usize,
    pub encoder_kind: BlockKind,
    pub decoder_kind: BlockKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        // full-resolution configuration; heavy on CPU, intended for real runs
        ModelConfig {
            image_size: 224,
            patch_size: 4,
            embed_dim: 64,
            stage_depths: [2, 4, 32, 2],
            heads_per_stage: [2, 4, 8, 16],
            stripe_widths: [1, 2, 7, 7],
            decoder_channels: vec![256, 128, 64, 32, 16],
            mlp_ratio: 4,
            instance_dim: 128,
            instance_hidden: 256,
            encoder_kind: BlockKind::Transformer,
            decoder_kind: BlockKind::Cnn,
        }
    }
}

impl ModelConfig {
    /// Small configuration used by gradient checks and desk-scale training.
    pub fn toy() -> Self {
        ModelConfig {
            image_size: 32,
            patch_size: 2,
            embed_dim: 16,
            stage_depths: [1, 1, 1, 1],
            heads_per_stage: [2, 2, 2, 2],
            stripe_widths: [2, 2, 2, 1],
            decoder_channels: vec![64, 32, 16, 8],
            mlp_ratio: 2,
            instance_dim: 32,
            instance_hidden: 64,
            encoder_kind: BlockKind::Transformer,
            decoder_kind: BlockKind::Cnn,
        }
    }

    /// Even smaller variant (1x1 bottleneck) for arithmetic/shape checks.
    pub fn toy_patch4() -> Self {
        ModelConfig {
            image_size: 32,
            patch_size: 4,
            stripe_widths: [2, 2, 1, 1],
            decoder_channels: vec![64, 32, 16, 8, 8],
            ..Self::toy()
        }
    }

    pub fn grid_side(&self, stage: usize) -> usize {
        (self.image_size / self.patch_size) >> stage
    }

    pub fn stage_dim(&self, stage: usize) -> usize {
        self.embed_dim << stage
    }

    /// Token-grid side after the last stage.
    pub fn final_side(&self) -> usize {
        self.grid_side(3)
    }

    pub fn final_dim(&self) -> usize {
        self.stage_dim(3)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.image_size == 0 || self.patch_size == 0 {
            return err("image_size and patch_size must be positive".into());
        }
        if self.image_size % self.patch_size != 0 {
            return err(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        let grid0 = self.image_size / self.patch_size;
        if grid0 % 8 != 0 && grid0 >> 3 == 0 {
            return err(format!("token grid {grid0} cannot be halved three times"));
        }
        for s in 0..4 {
            if self.stage_depths[s] == 0 {
                return err(format!("stage_depths[{s}] must be >= 1"));
            }
            let side = self.grid_side(s);
            if side == 0 || (s < 3 && side % 2 != 0) {
                return err(format!("stage {s} grid side {side} is not mergeable"));
            }
            if self.encoder_kind == BlockKind::Transformer {
                if self.stripe_widths[s] == 0 || side % self.stripe_widths[s] != 0 {
                    return err(format!(
                        "stripe width {} does not divide stage {s} grid side {side}",
                        self.stripe_widths[s]
                    ));
                }
                let dim = self.stage_dim(s);
                if dim % self.heads_per_stage[s] != 0 {
                    return err(format!(
                        "stage {s} dim {dim} not divisible by {} heads",
                        self.heads_per_stage[s]
                    ));
                }
            }
        }
        if self.decoder_kind == BlockKind::Cnn {
            let fs = self.final_side();
            let restored = fs << self.decoder_channels.len();
            if self.decoder_channels.is_empty() || restored != self.image_size {
                return err(format!(
                    "decoder_channels ({} stages of 2x) restore {restored}, expected {}",
                    self.decoder_channels.len(),
                    self.image_size
                ));
            }
        }
        Ok(())
    }
}

/// Named parameter arrays; one copy shared by both branches.
#[derive(Debug, Clone, Default)]
pub struct Params {
    map: BTreeMap<String, Arr>,
}

impl Params {
    pub fn get(&self, name: &str) -> &Arr {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Arr {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Arr) {
        self.map.insert(name.into(), value);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Arr)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Arr)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.map.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn total_scalars(&self) -> usize {
        self.map.values().map(|a| a.len()).sum()
    }
}

fn normal_arr(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Arr {
    let dist = Normal::new(0.0, std).unwrap();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    Arr::from_shape_vec(IxDyn(shape), data).unwrap()
}

fn xavier(shape_in: usize, shape_out: usize, rng: &mut ChaCha8Rng) -> Arr {
    let std = (2.0 / (shape_in + shape_out) as f64).sqrt();
    normal_arr(&[shape_in, shape_out], std, rng)
}

/// Initialize every parameter required by the configured encoder/decoder
/// kinds, deterministically under the seed.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<Params> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = Params::default();
    let d = cfg.embed_dim;

    match cfg.encoder_kind {
        BlockKind::Transformer => {
            let pp = cfg.patch_size * cfg.patch_size;
            let n0 = cfg.grid_side(0) * cfg.grid_side(0);
            p.insert("embed.w", xavier(pp, d, &mut rng));
            p.insert("embed.pos", normal_arr(&[n0, d], 0.02, &mut rng));
            for s in 0..4 {
                let dim = cfg.stage_dim(s);
                for b in 0..cfg.stage_depths[s] {
                    let pre = format!("enc.s{s}.b{b}");
                    p.insert(format!("{pre}.ln1.g"), Arr::ones(IxDyn(&[dim])));
                    p.insert(format!("{pre}.ln1.b"), Arr::zeros(IxDyn(&[dim])));
                    p.insert(format!("{pre}.ln2.g"), Arr::ones(IxDyn(&[dim])));
                    p.insert(format!("{pre}.ln2.b"), Arr::zeros(IxDyn(&[dim])));
                    p.insert(format!("{pre}.attn.wq"), xavier(dim, dim, &mut rng));
                    p.insert(format!("{pre}.attn.wk"), xavier(dim, dim, &mut rng));
                    p.insert(format!("{pre}.attn.wv"), xavier(dim, dim, &mut rng));
                    p.insert(format!("{pre}.attn.wo"), xavier(dim, dim, &mut rng));
                    let hidden = dim * cfg.mlp_ratio;
                    p.insert(format!("{pre}.mlp.w1"), xavier(dim, hidden, &mut rng));
                    p.insert(format!("{pre}.mlp.b1"), Arr::zeros(IxDyn(&[hidden])));
                    p.insert(format!("{pre}.mlp.w2"), xavier(hidden, dim, &mut rng));
                    p.insert(format!("{pre}.mlp.b2"), Arr::zeros(IxDyn(&[dim])));
                }
                if s < 3 {
                    p.insert(format!("merge.s{s}.w"), xavier(4 * dim, 2 * dim, &mut rng));
                }
            }
        }
        BlockKind::Cnn => {
            let plan = cnn_encoder_plan(cfg);
            let mut cin = 1usize;
            for (i, &(cout, _pool)) in plan.iter().enumerate() {
                let std = (2.0 / (cin * 9) as f64).sqrt();
                p.insert(format!("cenc.{i}.k"), normal_arr(&[cout, cin, 3, 3], std, &mut rng));
                p.insert(format!("cenc.{i}.b"), Arr::zeros(IxDyn(&[cout])));
                cin = cout;
            }
        }
    }

    let fdim = cfg.final_dim();
    match cfg.decoder_kind {
        BlockKind::Cnn => {
            let mut cin = fdim;
            for (i, &cout) in cfg.decoder_channels.iter().enumerate() {
                let std = (2.0 / (cin * 9) as f64).sqrt();
                p.insert(format!("dec.{i}.k"), normal_arr(&[cout, cin, 3, 3], std, &mut rng));
                p.insert(format!("dec.{i}.b"), Arr::zeros(IxDyn(&[cout])));
                cin = cout;
            }
            let std = (2.0 / cin as f64).sqrt();
            p.insert("dec.out.k", normal_arr(&[1, cin, 1, 1], std, &mut rng));
            p.insert("dec.out.b", Arr::zeros(IxDyn(&[1])));
        }
        BlockKind::Transformer => {
            for b in 0..2 {
                let pre = format!("tdec.b{b}");
                p.insert(format!("{pre}.ln1.g"), Arr::ones(IxDyn(&[fdim])));
                p.insert(format!("{pre}.ln1.b"), Arr::zeros(IxDyn(&[fdim])));
                p.insert(format!("{pre}.ln2.g"), Arr::ones(IxDyn(&[fdim])));
                p.insert(format!("{pre}.ln2.b"), Arr::zeros(IxDyn(&[fdim])));
                p.insert(format!("{pre}.attn.wq"), xavier(fdim, fdim, &mut rng));
                p.insert(format!("{pre}.attn.wk"), xavier(fdim, fdim, &mut rng));
                p.insert(format!("{pre}.attn.wv"), xavier(fdim, fdim, &mut rng));
                p.insert(format!("{pre}.attn.wo"), xavier(fdim, fdim, &mut rng));
                let hidden = fdim * cfg.mlp_ratio;
                p.insert(format!("{pre}.mlp.w1"), xavier(fdim, hidden, &mut rng));
                p.insert(format!("{pre}.mlp.b1"), Arr::zeros(IxDyn(&[hidden])));
                p.insert(format!("{pre}.mlp.w2"), xavier(hidden, fdim, &mut rng));
                p.insert(format!("{pre}.mlp.b2"), Arr::zeros(IxDyn(&[fdim])));
            }
            let ps = cfg.image_size / cfg.final_side();
            p.insert("tdec.out.w", xavier(fdim, ps * ps, &mut rng));
            p.insert("tdec.out.b", Arr::zeros(IxDyn(&[ps * ps])));
        }
    }

    p.insert("head.w1", xavier(fdim, cfg.instance_hidden, &mut rng));
    p.insert("head.b1", Arr::zeros(IxDyn(&[cfg.instance_hidden])));
    p.insert("head.w2", xavier(cfg.instance_hidden, cfg.instance_dim, &mut rng));
    p.insert("head.b2", Arr::zeros(IxDyn(&[cfg.instance_dim])));
    Ok(p)
}

/// (out_channels, pool_after) plan for the CNN encoder: convolutions with 2x
/// average pooling until the token grid side is reached, channels doubling
/// up to the final token dim.
fn cnn_encoder_plan(cfg: &ModelConfig) -> Vec<(usize, bool)> {
    let fdim = cfg.final_dim();
    let n_down = (cfg.image_size / cfg.final_side()).trailing_zeros() as usize;
    let mut plan = vec![(cfg.embed_dim.min(fdim), false)];
    for i in 1..=n_down {
        plan.push(((cfg.embed_dim << i).min(fdim), true));
    }
    let last = plan.last_mut().unwrap();
    last.0 = fdim;
    plan
}

/// Parameter leaves recorded on a tape for one forward/backward step.
pub struct TapeParams {
    pub vars: BTreeMap<String, Var>,
}

impl TapeParams {
    pub fn load(tape: &mut Tape, params: &Params) -> Self {
        let vars = params
            .iter()
            .map(|(name, value)| (name.clone(), tape.leaf(value.clone())))
            .collect();
        TapeParams { vars }
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter var {name}"))
    }
}

fn patch_indices(image_size: usize, patch: usize) -> Vec<usize> {
    let grid = image_size / patch;
    let mut idx = Vec::with_capacity(image_size * image_size);
    for r in 0..grid {
        for c in 0..grid {
            for dr in 0..patch {
                for dc in 0..patch {
                    idx.push((r * patch + dr) * image_size + (c * patch + dc));
                }
            }
        }
    }
    idx
}

/// Non-overlapping patch projection plus learned absolute positions.
pub fn patch_embed(tape: &mut Tape, image: Var, tp: &TapeParams, cfg: &ModelConfig) -> Result<Var> {
    let shape = tape.value(image).shape().to_vec();
    if shape != [cfg.image_size, cfg.image_size] {
        return Err(Error::Shape(format!(
            "patch_embed expects {0}x{0}, got {shape:?}",
            cfg.image_size
        )));
    }
    let p = cfg.patch_size;
    let grid = cfg.image_size / p;
    let n = grid * grid;
    let idx = Rc::new(patch_indices(cfg.image_size, p));
    let patches = tape.gather(image, idx, &[n, p * p]);
    let proj = tape.matmul(patches, tp.var("embed.w"));
    Ok(tape.add(proj, tp.var("embed.pos")))
}

/// Token index lists per stripe for one orientation over a g x g grid.
fn stripe_index_lists(side: usize, stripe: usize, horizontal: bool) -> Vec<Rc<Vec<usize>>> {
    let mut out = Vec::new();
    for s in 0..side / stripe {
        let mut idx = Vec::with_capacity(stripe * side);
        if horizontal {
            for r in s * stripe..(s + 1) * stripe {
                for c in 0..side {
                    idx.push(r * side + c);
                }
            }
        } else {
            for c in s * stripe..(s + 1) * stripe {
                for r in 0..side {
                    idx.push(r * side + c);
                }
            }
        }
        out.push(Rc::new(idx));
    }
    out
}

fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

struct BlockGeometry {
    side: usize,
    heads: usize,
    stripe: usize,
    dim: usize,
}

/// One transformer block in the literal parallel-residual form:
/// x + CS-MSA(LN1(x)) + MLP(LN2(x)). Heads split into horizontal and
/// vertical stripe groups.
fn cswin_block_inner(
    tape: &mut Tape,
    x: Var,
    tp: &TapeParams,
    prefix: &str,
    geo: &BlockGeometry,
) -> Var {
    let BlockGeometry {
        side,
        heads,
        stripe,
        dim,
    } = *geo;
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let h_horizontal = heads.div_ceil(2);

    let ln1 = {
        let g = tp.var(&format!("{prefix}.ln1.g"));
        let b = tp.var(&format!("{prefix}.ln1.b"));
        tape.layer_norm(x, g, b, 1e-5)
    };
    let q = tape.matmul(ln1, tp.var(&format!("{prefix}.attn.wq")));
    let k = tape.matmul(ln1, tp.var(&format!("{prefix}.attn.wk")));
    let v = tape.matmul(ln1, tp.var(&format!("{prefix}.attn.wv")));

    let stripes_h = stripe_index_lists(side, stripe, true);
    let stripes_v = stripe_index_lists(side, stripe, false);

    let mut head_outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let stripes = if h < h_horizontal { &stripes_h } else { &stripes_v };
        let qh = tape.slice_cols(q, h * dh, dh);
        let kh = tape.slice_cols(k, h * dh, dh);
        let vh = tape.slice_cols(v, h * dh, dh);
        let mut parts = Vec::with_capacity(stripes.len());
        let mut perm: Vec<usize> = Vec::with_capacity(side * side);
        for idx in stripes {
            perm.extend(idx.iter().copied());
            let qs = tape.gather_rows(qh, idx.clone());
            let ks = tape.gather_rows(kh, idx.clone());
            let vs = tape.gather_rows(vh, idx.clone());
            let kt = tape.transpose2(ks);
            let logits = tape.matmul(qs, kt);
            let logits = tape.scale(logits, scale);
            let attn = tape.softmax_rows(logits);
            parts.push(tape.matmul(attn, vs));
        }
        let stacked = if parts.len() == 1 {
            parts[0]
        } else {
            tape.concat_rows(&parts)
        };
        let inv = Rc::new(inverse_permutation(&perm));
        head_outputs.push(tape.gather_rows(stacked, inv));
    }
    let merged = if head_outputs.len() == 1 {
        head_outputs[0]
    } else {
        tape.concat_cols(&head_outputs)
    };
    let attn_out = tape.matmul(merged, tp.var(&format!("{prefix}.attn.wo")));

    let ln2 = {
        let g = tp.var(&format!("{prefix}.ln2.g"));
        let b = tp.var(&format!("{prefix}.ln2.b"));
        tape.layer_norm(x, g, b, 1e-5)
    };
    let h1 = tape.matmul(ln2, tp.var(&format!("{prefix}.mlp.w1")));
    let h1 = tape.add_bias(h1, tp.var(&format!("{prefix}.mlp.b1")));
    let h1 = tape.gelu(h1);
    let h2 = tape.matmul(h1, tp.var(&format!("{prefix}.mlp.w2")));
    let mlp_out = tape.add_bias(h2, tp.var(&format!("{prefix}.mlp.b2")));

    let xa = tape.add(x, attn_out);
    tape.add(xa, mlp_out)
}

/// Public single-block entry used by tests; `stage` selects the geometry.
pub fn cswin_block(
    tape: &mut Tape,
    x: Var,
    tp: &TapeParams,
    cfg: &ModelConfig,
    stage: usize,
    block: usize,
) -> Result<Var> {
    let side = cfg.grid_side(stage);
    let n = tape.value(x).shape()[0];
    if n != side * side {
        return Err(Error::Shape(format!(
            "stage {stage} expects {} tokens, got {n}",
            side * side
        )));
    }
    Ok(cswin_block_inner(
        tape,
        x,
        tp,
        &format!("enc.s{stage}.b{block}"),
        &BlockGeometry {
            side,
            heads: cfg.heads_per_stage[stage],
            stripe: cfg.stripe_widths[stage],
            dim: cfg.stage_dim(stage),
        },
    ))
}

fn merge_indices(side: usize) -> Vec<usize> {
    let half = side / 2;
    let mut idx = Vec::with_capacity(side * side);
    for r in 0..half {
        for c in 0..half {
            idx.push((2 * r) * side + 2 * c);
            idx.push((2 * r) * side + 2 * c + 1);
            idx.push((2 * r + 1) * side + 2 * c);
            idx.push((2 * r + 1) * side + 2 * c + 1);
        }
    }
    idx
}

/// Full encoder: tokens through all four stages with patch merging.
pub fn encode(tape: &mut Tape, image: Var, tp: &TapeParams, cfg: &ModelConfig) -> Result<Var> {
    match cfg.encoder_kind {
        BlockKind::Transformer => {
            let mut x = patch_embed(tape, image, tp, cfg)?;
            for s in 0..4 {
                for b in 0..cfg.stage_depths[s] {
                    x = cswin_block(tape, x, tp, cfg, s, b)?;
                }
                if s < 3 {
                    let side = cfg.grid_side(s);
                    let dim = cfg.stage_dim(s);
                    let idx = Rc::new(merge_indices(side));
                    let gathered = tape.gather_rows(x, idx);
                    let regrouped =
                        tape.reshape(gathered, &[side * side / 4, 4 * dim]);
                    x = tape.matmul(regrouped, tp.var(&format!("merge.s{s}.w")));
                }
            }
            Ok(x)
        }
        BlockKind::Cnn => {
            let img3 = tape.reshape(image, &[1, cfg.image_size, cfg.image_size]);
            let mut x = img3;
            for (i, &(_cout, pool)) in cnn_encoder_plan(cfg).iter().enumerate() {
                let kv = tp.var(&format!("cenc.{i}.k"));
                let bv = tp.var(&format!("cenc.{i}.b"));
                x = tape.conv2d(x, kv, bv);
                x = tape.gelu(x);
                if pool {
                    x = tape.avgpool2x(x);
                }
            }
            let fs = cfg.final_side();
            let flat = tape.reshape(x, &[cfg.final_dim(), fs * fs]);
            Ok(tape.transpose2(flat))
        }
    }
}

/// Decoder output: the restored image plus the last feature map feeding the
/// pixel-level contrast.
pub struct Decoded {
    pub prediction: Var,
    pub features: Var,
}

/// Tokens back to a 1 x H x W image in [0, 1].
pub fn decode(tape: &mut Tape, z: Var, tp: &TapeParams, cfg: &ModelConfig) -> Result<Decoded> {
    let fs = cfg.final_side();
    let fdim = cfg.final_dim();
    let shape = tape.value(z).shape().to_vec();
    if shape != [fs * fs, fdim] {
        return Err(Error::Shape(format!(
            "decode expects [{}, {fdim}] tokens, got {shape:?}",
            fs * fs
        )));
    }
    match cfg.decoder_kind {
        BlockKind::Cnn => {
            let zt = tape.transpose2(z);
            let mut x = tape.reshape(zt, &[fdim, fs, fs]);
            for i in 0..cfg.decoder_channels.len() {
                x = tape.upsample2x(x);
                let kv = tp.var(&format!("dec.{i}.k"));
                let bv = tp.var(&format!("dec.{i}.b"));
                x = tape.conv2d(x, kv, bv);
                x = tape.gelu(x);
            }
            let features = x;
            let ov = tp.var("dec.out.k");
            let ob = tp.var("dec.out.b");
            let logits = tape.conv2d(features, ov, ob);
            let prediction = tape.sigmoid(logits);
            Ok(Decoded {
                prediction,
                features,
            })
        }
        BlockKind::Transformer => {
            let mut x = z;
            for b in 0..2 {
                x = cswin_block_inner(
                    tape,
                    x,
                    tp,
                    &format!("tdec.b{b}"),
                    &BlockGeometry {
                        side: fs,
                        heads: 1,
                        stripe: fs,
                        dim: fdim,
                    },
                );
            }
            let ps = cfg.image_size / fs;
            let pix = tape.matmul(x, tp.var("tdec.out.w"));
            let pix = tape.add_bias(pix, tp.var("tdec.out.b"));
            // patch layout back to raster order
            let flat = tape.reshape(pix, &[fs * fs * ps * ps]);
            let mut idx = Vec::with_capacity(cfg.image_size * cfg.image_size);
            for y in 0..cfg.image_size {
                for x_ in 0..cfg.image_size {
                    let (pr, pc) = (y / ps, x_ / ps);
                    let off = (y % ps) * ps + (x_ % ps);
                    idx.push((pr * fs + pc) * ps * ps + off);
                }
            }
            let img = tape.gather(flat, Rc::new(idx), &[1, cfg.image_size, cfg.image_size]);
            let prediction = tape.sigmoid(img);
            Ok(Decoded {
                prediction,
                features: img,
            })
        }
    }
}

/// Everything one branch produces in a single pass.
pub struct ForwardOut {
    /// 1 x H x W restored image in [0, 1].
    pub prediction: Var,
    /// Final encoder tokens.
    pub tokens: Var,
    /// Last decoder feature map (pixel-contrast carrier).
    pub features: Var,
    /// Unit-norm instance embedding.
    pub instance: Var,
}

/// Pooled projection head over the final tokens, unit-normalized.
pub fn instance_embed(tape: &mut Tape, tokens: Var, tp: &TapeParams) -> Var {
    let pooled = tape.mean_rows(tokens);
    let dim = tape.value(pooled).len();
    let row = tape.reshape(pooled, &[1, dim]);
    let h = tape.matmul(row, tp.var("head.w1"));
    let h = tape.add_bias(h, tp.var("head.b1"));
    let h = tape.gelu(h);
    let o = tape.matmul(h, tp.var("head.w2"));
    let o = tape.add_bias(o, tp.var("head.b2"));
    let olen = tape.value(o).len();
    let flat = tape.reshape(o, &[olen]);
    tape.l2_normalize(flat)
}

/// Encode + decode + instance head for one image on one shared tape.
pub fn forward_denoise(
    tape: &mut Tape,
    image: Var,
    tp: &TapeParams,
    cfg: &ModelConfig,
) -> Result<ForwardOut> {
    let tokens = encode(tape, image, tp, cfg)?;
    let decoded = decode(tape, tokens, tp, cfg)?;
    let instance = instance_embed(tape, tokens, tp);
    Ok(ForwardOut {
        prediction: decoded.prediction,
        tokens,
        features: decoded.features,
        instance,
    })
}

/// Inference-only denoising of a [0, 1] image with frozen parameters.
pub fn denoise_image(
    params: &Params,
    cfg: &ModelConfig,
    pixels: &Array2<f64>,
) -> Result<Array2<f64>> {
    let mut tape = Tape::new();
    let tp = TapeParams::load(&mut tape, params);
    let img = tape.constant(pixels.clone().into_dyn());
    let out = forward_denoise(&mut tape, img, &tp, cfg)?;
    let pred = tape.value(out.prediction);
    let (h, w) = (pixels.dim().0, pixels.dim().1);
    Ok(Array2::from_shape_vec((h, w), pred.iter().copied().collect()).unwrap())
}
