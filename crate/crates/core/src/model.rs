//! Miniature video transformer with per-view classifier heads.
//!
//! Pre-norm blocks, GELU MLP at 4x width, learned positional embeddings,
//! truncated-normal init. Every forward pass also yields, per layer, the
//! head-averaged CLS-to-patch attention renormalized over the patch tokens:
//! a probability map over the (T/K) x (H/P) x (W/P) token grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::scene::{VideoClip, View};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;
const INIT_SIGMA: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch_k: usize,
    pub patch_p: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub classes_exo: usize,
    pub classes_ego: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            frames: 8,
            height: 32,
            width: 32,
            channels: 3,
            patch_k: 2,
            patch_p: 8,
            dim: 64,
            layers: 4,
            heads: 4,
            classes_exo: 8,
            classes_ego: 8,
            dropout: 0.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames % self.patch_k != 0
            || self.height % self.patch_p != 0
            || self.width % self.patch_p != 0
        {
            return Err(Error::Config(format!(
                "clip {}x{}x{} not divisible by patch {}x{}x{}",
                self.frames, self.height, self.width, self.patch_k, self.patch_p, self.patch_p
            )));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.layers == 0 || self.classes_exo == 0 || self.classes_ego == 0 {
            return Err(Error::Config("layers and class counts must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} out of [0,1)", self.dropout)));
        }
        Ok(())
    }

    /// Patch tokens: N = (T/K)(H/P)(W/P).
    pub fn token_count(&self) -> usize {
        (self.frames / self.patch_k) * (self.height / self.patch_p) * (self.width / self.patch_p)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_k * self.patch_p * self.patch_p * self.channels
    }

    pub fn grid(&self) -> (usize, usize, usize) {
        (
            self.frames / self.patch_k,
            self.height / self.patch_p,
            self.width / self.patch_p,
        )
    }

    pub fn classes(&self, view: View) -> usize {
        match view {
            View::Exo => self.classes_exo,
            View::Ego => self.classes_ego,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<E> {
    pub ln1_g: Tensor<E>,
    pub ln1_b: Tensor<E>,
    pub wq: Tensor<E>,
    pub bq: Tensor<E>,
    pub wk: Tensor<E>,
    pub bk: Tensor<E>,
    pub wv: Tensor<E>,
    pub bv: Tensor<E>,
    pub wo: Tensor<E>,
    pub bo: Tensor<E>,
    pub ln2_g: Tensor<E>,
    pub ln2_b: Tensor<E>,
    pub w1: Tensor<E>,
    pub b1: Tensor<E>,
    pub w2: Tensor<E>,
    pub b2: Tensor<E>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<E> {
    pub patch_w: Tensor<E>,
    pub patch_b: Tensor<E>,
    pub cls: Tensor<E>,
    pub pos: Tensor<E>,
    pub layers: Vec<LayerParams<E>>,
    pub lnf_g: Tensor<E>,
    pub lnf_b: Tensor<E>,
    pub head_exo_w: Tensor<E>,
    pub head_exo_b: Tensor<E>,
    pub head_ego_w: Tensor<E>,
    pub head_ego_b: Tensor<E>,
}

impl<E: Scalar> ModelParams<E> {
    /// Seeded init: truncated normal (sigma 0.02, cut at 2 sigma) for
    /// projections and embeddings, zeros for biases, ones for norm gains.
    pub fn init(cfg: &ModelConfig) -> Result<ModelParams<E>> {
        cfg.validate()?;
        let mut rng = Rng::stream(cfg.seed, 0x1417);
        let mut tn = |shape: Vec<usize>| {
            Tensor::from_fn(shape, |_| E::from_f64(rng.trunc_normal(INIT_SIGMA, 2.0)))
        };
        let (d, n, pd) = (cfg.dim, cfg.token_count(), cfg.patch_dim());
        let patch_w = tn(vec![pd, d]);
        let cls = tn(vec![1, d]);
        let pos = tn(vec![n + 1, d]);
        let layers = (0..cfg.layers)
            .map(|_| LayerParams {
                ln1_g: Tensor::full(vec![d], E::one()),
                ln1_b: Tensor::zeros(vec![d]),
                wq: tn(vec![d, d]),
                bq: Tensor::zeros(vec![d]),
                wk: tn(vec![d, d]),
                bk: Tensor::zeros(vec![d]),
                wv: tn(vec![d, d]),
                bv: Tensor::zeros(vec![d]),
                wo: tn(vec![d, d]),
                bo: Tensor::zeros(vec![d]),
                ln2_g: Tensor::full(vec![d], E::one()),
                ln2_b: Tensor::zeros(vec![d]),
                w1: tn(vec![d, 4 * d]),
                b1: Tensor::zeros(vec![4 * d]),
                w2: tn(vec![4 * d, d]),
                b2: Tensor::zeros(vec![d]),
            })
            .collect();
        Ok(ModelParams {
            patch_w,
            patch_b: Tensor::zeros(vec![d]),
            cls,
            pos,
            layers,
            lnf_g: Tensor::full(vec![d], E::one()),
            lnf_b: Tensor::zeros(vec![d]),
            head_exo_w: tn(vec![d, cfg.classes_exo]),
            head_exo_b: Tensor::zeros(vec![cfg.classes_exo]),
            head_ego_w: tn(vec![d, cfg.classes_ego]),
            head_ego_b: Tensor::zeros(vec![cfg.classes_ego]),
        })
    }

    /// Parameters in a fixed order with stable names.
    pub fn named(&self) -> Vec<(String, &Tensor<E>)> {
        let mut out: Vec<(String, &Tensor<E>)> = vec![
            ("patch_w".into(), &self.patch_w),
            ("patch_b".into(), &self.patch_b),
            ("cls".into(), &self.cls),
            ("pos".into(), &self.pos),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (suffix, t) in [
                ("ln1_g", &l.ln1_g),
                ("ln1_b", &l.ln1_b),
                ("wq", &l.wq),
                ("bq", &l.bq),
                ("wk", &l.wk),
                ("bk", &l.bk),
                ("wv", &l.wv),
                ("bv", &l.bv),
                ("wo", &l.wo),
                ("bo", &l.bo),
                ("ln2_g", &l.ln2_g),
                ("ln2_b", &l.ln2_b),
                ("w1", &l.w1),
                ("b1", &l.b1),
                ("w2", &l.w2),
                ("b2", &l.b2),
            ] {
                out.push((format!("layer{i}.{suffix}"), t));
            }
        }
        out.push(("lnf_g".into(), &self.lnf_g));
        out.push(("lnf_b".into(), &self.lnf_b));
        out.push(("head_exo_w".into(), &self.head_exo_w));
        out.push(("head_exo_b".into(), &self.head_exo_b));
        out.push(("head_ego_w".into(), &self.head_ego_w));
        out.push(("head_ego_b".into(), &self.head_ego_b));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<E>)> {
        let mut out: Vec<(String, &mut Tensor<E>)> = vec![
            ("patch_w".into(), &mut self.patch_w),
            ("patch_b".into(), &mut self.patch_b),
            ("cls".into(), &mut self.cls),
            ("pos".into(), &mut self.pos),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            for (suffix, t) in [
                ("ln1_g", &mut l.ln1_g),
                ("ln1_b", &mut l.ln1_b),
                ("wq", &mut l.wq),
                ("bq", &mut l.bq),
                ("wk", &mut l.wk),
                ("bk", &mut l.bk),
                ("wv", &mut l.wv),
                ("bv", &mut l.bv),
                ("wo", &mut l.wo),
                ("bo", &mut l.bo),
                ("ln2_g", &mut l.ln2_g),
                ("ln2_b", &mut l.ln2_b),
                ("w1", &mut l.w1),
                ("b1", &mut l.b1),
                ("w2", &mut l.w2),
                ("b2", &mut l.b2),
            ] {
                out.push((format!("layer{i}.{suffix}"), t));
            }
        }
        out.push(("lnf_g".into(), &mut self.lnf_g));
        out.push(("lnf_b".into(), &mut self.lnf_b));
        out.push(("head_exo_w".into(), &mut self.head_exo_w));
        out.push(("head_exo_b".into(), &mut self.head_exo_b));
        out.push(("head_ego_w".into(), &mut self.head_ego_w));
        out.push(("head_ego_b".into(), &mut self.head_ego_b));
        out
    }

    pub fn from_named(cfg: &ModelConfig, mut pairs: Vec<(String, Tensor<E>)>) -> Result<Self> {
        let mut template = ModelParams::<E>::init(cfg)?;
        let mut take = |name: &str| -> Result<Tensor<E>> {
            let idx = pairs
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| Error::Format(format!("missing parameter block {name:?}")))?;
            Ok(pairs.swap_remove(idx).1)
        };
        for (name, slot) in template.named_mut() {
            let t = take(&name)?;
            if t.shape() != slot.shape() {
                return Err(Error::Format(format!(
                    "parameter {name}: shape {:?} does not match config ({:?})",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(template)
    }

    pub fn cast<F: Scalar>(&self, cfg: &ModelConfig) -> Result<ModelParams<F>> {
        let pairs = self
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.cast::<F>()))
            .collect();
        ModelParams::from_named(cfg, pairs)
    }

    pub fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }
}

/// Tape handles for registered parameters, in `named()` order.
pub struct ParamVars {
    vars: Vec<Var>,
    names: Vec<String>,
}

impl ParamVars {
    pub fn register<E: Scalar>(
        tape: &mut Tape<E>,
        params: &ModelParams<E>,
        trainable: bool,
    ) -> ParamVars {
        Self::register_with(tape, params, |_, t, tape| {
            let tensor = if trainable {
                t.clone().with_grad()
            } else {
                t.clone()
            };
            tape.leaf(tensor)
        })
    }

    /// Register with a custom var per parameter; lets callers splice an
    /// existing tape var into one slot (used by the gradient checker).
    pub fn register_with<E: Scalar>(
        tape: &mut Tape<E>,
        params: &ModelParams<E>,
        mut make: impl FnMut(&str, &Tensor<E>, &mut Tape<E>) -> Var,
    ) -> ParamVars {
        let mut vars = Vec::new();
        let mut names = Vec::new();
        for (name, t) in params.named() {
            vars.push(make(&name, t, tape));
            names.push(name);
        }
        ParamVars { vars, names }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn get(&self, name: &str) -> Var {
        let idx = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.vars[idx]
    }

    fn layer(&self, i: usize, suffix: &str) -> Var {
        self.get(&format!("layer{i}.{suffix}"))
    }
}

/// CLS-token attention over the patch-token grid: nonnegative, sums to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap<E> {
    pub tgrid: usize,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<E>,
    /// How the map was produced from raw attention weights.
    pub normalization: &'static str,
}

pub const ATTN_NORMALIZATION: &str = "head-mean/cls-dropped/renormalized";

impl<E: Scalar> AttentionMap<E> {
    pub fn new(cfg: &ModelConfig, values: Vec<E>) -> Result<AttentionMap<E>> {
        let (tg, r, c) = cfg.grid();
        if values.len() != tg * r * c {
            return Err(Error::Shape {
                op: "attention_map",
                lhs: vec![values.len()],
                rhs: vec![tg, r, c],
            });
        }
        if values.iter().any(|&v| v < E::zero()) {
            return Err(Error::Numeric("attention map has negative entries".into()));
        }
        Ok(AttentionMap {
            tgrid: tg,
            rows: r,
            cols: c,
            values,
            normalization: ATTN_NORMALIZATION,
        })
    }

    pub fn at(&self, t: usize, r: usize, c: usize) -> E {
        self.values[(t * self.rows + r) * self.cols + c]
    }

    pub fn sum(&self) -> E {
        self.values.iter().copied().sum()
    }
}

/// Flatten a clip into the `[N, K*P*P*C]` patch matrix, row-major over the
/// (slab, row, col) token grid; within a patch: frame, row, col, channel.
pub fn tokenize_patches<E: Scalar>(clip: &VideoClip, cfg: &ModelConfig) -> Result<Tensor<E>> {
    if clip.t != cfg.frames || clip.h != cfg.height || clip.w != cfg.width || clip.c != cfg.channels
    {
        return Err(Error::Shape {
            op: "tokenize",
            lhs: vec![clip.t, clip.h, clip.w, clip.c],
            rhs: vec![cfg.frames, cfg.height, cfg.width, cfg.channels],
        });
    }
    let (tg, gr, gc) = cfg.grid();
    let (k, p, ch) = (cfg.patch_k, cfg.patch_p, cfg.channels);
    let pd = cfg.patch_dim();
    let mut data = Vec::with_capacity(cfg.token_count() * pd);
    for t in 0..tg {
        for i in 0..gr {
            for j in 0..gc {
                for f in t * k..(t + 1) * k {
                    for r in i * p..(i + 1) * p {
                        for c in j * p..(j + 1) * p {
                            let base = ((f * clip.h + r) * clip.w + c) * ch;
                            for cc in 0..ch {
                                data.push(E::from_f64(clip.frames[base + cc] as f64));
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![cfg.token_count(), pd], data)
}

/// One forward pass: logits for the selected head, the final CLS
/// representation, and per-layer attention maps (tape vars plus the raw
/// per-head CLS rows for auditing).
pub struct ForwardOut<E> {
    pub logits: Var,
    pub cls_rep: Var,
    /// Per layer: `[N]` attention map over patch tokens (sums to 1).
    pub attn: Vec<Var>,
    /// Per layer: concrete `[heads, N+1]` raw CLS attention rows.
    pub head_rows: Vec<Tensor<E>>,
}

fn maybe_dropout<E: Scalar>(
    tape: &mut Tape<E>,
    x: Var,
    rate: f64,
    rng: &mut Option<&mut Rng>,
) -> Result<Var> {
    match rng {
        Some(rng) if rate > 0.0 => {
            let keep = 1.0 - rate;
            let shape = tape.value(x).shape().to_vec();
            let mask = Tensor::from_fn(shape, |_| {
                if rng.uniform() < keep {
                    E::from_f64(1.0 / keep)
                } else {
                    E::zero()
                }
            });
            let m = tape.constant(mask);
            tape.mul(x, m)
        }
        _ => Ok(x),
    }
}

/// Forward from a pre-tokenized patch matrix var (`[N, patch_dim]`).
pub fn forward_patches<E: Scalar>(
    tape: &mut Tape<E>,
    pv: &ParamVars,
    patches: Var,
    cfg: &ModelConfig,
    view: View,
    mut dropout_rng: Option<&mut Rng>,
) -> Result<ForwardOut<E>> {
    let n = cfg.token_count();
    let d = cfg.dim;
    let heads = cfg.heads;
    let hd = d / heads;
    let eps = E::from_f64(LN_EPS);

    // embed patches, prepend CLS, add positions
    let proj = tape.matmul(patches, pv.get("patch_w"))?;
    let embedded = tape.add_row(proj, pv.get("patch_b"))?;
    let tokens = tape.concat_rows(&[pv.get("cls"), embedded])?;
    let mut x = tape.add(tokens, pv.get("pos"))?;

    let mut attn = Vec::with_capacity(cfg.layers);
    let mut head_rows = Vec::with_capacity(cfg.layers);
    let scale = E::from_f64(1.0 / (hd as f64).sqrt());

    for li in 0..cfg.layers {
        let h1 = tape.layer_norm(x, pv.layer(li, "ln1_g"), pv.layer(li, "ln1_b"), eps)?;
        let q = tape.matmul(h1, pv.layer(li, "wq"))?;
        let q = tape.add_row(q, pv.layer(li, "bq"))?;
        let k = tape.matmul(h1, pv.layer(li, "wk"))?;
        let k = tape.add_row(k, pv.layer(li, "bk"))?;
        let v = tape.matmul(h1, pv.layer(li, "wv"))?;
        let v = tape.add_row(v, pv.layer(li, "bv"))?;

        let mut outs = Vec::with_capacity(heads);
        let mut cls_rows = Vec::with_capacity(heads);
        let mut rows_data = Vec::with_capacity(heads * (n + 1));
        for h in 0..heads {
            let qh = tape.slice_cols(q, h * hd, hd)?;
            let kh = tape.slice_cols(k, h * hd, hd)?;
            let vh = tape.slice_cols(v, h * hd, hd)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale);
            let ah = tape.softmax(scores, 1)?;
            let cls_row = tape.slice_rows(ah, 0, 1)?;
            rows_data.extend_from_slice(tape.value(cls_row).data());
            cls_rows.push(cls_row);
            let oh = tape.matmul(ah, vh)?;
            outs.push(oh);
        }
        head_rows.push(Tensor::new(vec![heads, n + 1], rows_data)?);

        // head-mean CLS row -> drop the CLS column -> renormalize
        let mut mean_row = cls_rows[0];
        for &row in &cls_rows[1..] {
            mean_row = tape.add(mean_row, row)?;
        }
        let mean_row = tape.scale(mean_row, E::from_f64(1.0 / heads as f64));
        let patch_part = tape.slice_cols(mean_row, 1, n)?;
        let total = tape.sum(patch_part);
        let inv = tape.recip(total)?;
        let normalized = tape.mul_scalar_var(patch_part, inv)?;
        let map = tape.reshape(normalized, vec![n])?;
        attn.push(map);

        let concat = tape.concat_cols(&outs)?;
        let proj = tape.matmul(concat, pv.layer(li, "wo"))?;
        let proj = tape.add_row(proj, pv.layer(li, "bo"))?;
        let proj = maybe_dropout(tape, proj, cfg.dropout, &mut dropout_rng)?;
        x = tape.add(x, proj)?;

        let h2 = tape.layer_norm(x, pv.layer(li, "ln2_g"), pv.layer(li, "ln2_b"), eps)?;
        let m = tape.matmul(h2, pv.layer(li, "w1"))?;
        let m = tape.add_row(m, pv.layer(li, "b1"))?;
        let m = tape.gelu(m);
        let m = maybe_dropout(tape, m, cfg.dropout, &mut dropout_rng)?;
        let m = tape.matmul(m, pv.layer(li, "w2"))?;
        let m = tape.add_row(m, pv.layer(li, "b2"))?;
        x = tape.add(x, m)?;
    }

    let xf = tape.layer_norm(x, pv.get("lnf_g"), pv.get("lnf_b"), eps)?;
    let cls_rep = tape.slice_rows(xf, 0, 1)?;
    let (hw, hb) = match view {
        View::Exo => (pv.get("head_exo_w"), pv.get("head_exo_b")),
        View::Ego => (pv.get("head_ego_w"), pv.get("head_ego_b")),
    };
    let logits = tape.matmul(cls_rep, hw)?;
    let logits = tape.add_row(logits, hb)?;

    Ok(ForwardOut {
        logits,
        cls_rep,
        attn,
        head_rows,
    })
}

/// Forward from a raw clip.
pub fn forward<E: Scalar>(
    tape: &mut Tape<E>,
    pv: &ParamVars,
    clip: &VideoClip,
    cfg: &ModelConfig,
    view: View,
    dropout_rng: Option<&mut Rng>,
) -> Result<ForwardOut<E>> {
    let patches = tape.constant(tokenize_patches::<E>(clip, cfg)?);
    forward_patches(tape, pv, patches, cfg, view, dropout_rng)
}

/// Concrete attention maps for the requested 1-based layer subset, ascending.
pub fn extract_attention<E: Scalar>(
    tape: &Tape<E>,
    out: &ForwardOut<E>,
    cfg: &ModelConfig,
    layer_subset: &[usize],
) -> Result<Vec<AttentionMap<E>>> {
    if layer_subset.is_empty() {
        return Err(Error::Config("extract_attention: empty layer subset".into()));
    }
    let mut subset = layer_subset.to_vec();
    subset.sort_unstable();
    subset.dedup();
    if subset[0] == 0 || *subset.last().unwrap() > cfg.layers {
        return Err(Error::Config(format!(
            "layer subset {subset:?} out of range 1..={}",
            cfg.layers
        )));
    }
    subset
        .iter()
        .map(|&l| AttentionMap::new(cfg, tape.value(out.attn[l - 1]).data().to_vec()))
        .collect()
}

/// Run a forward pass on a scratch tape and return concrete outputs:
/// softmax scores and attention maps. Used by evaluation paths.
pub fn forward_eval<E: Scalar>(
    params: &ModelParams<E>,
    clip: &VideoClip,
    cfg: &ModelConfig,
    view: View,
) -> Result<(Vec<E>, Vec<AttentionMap<E>>)> {
    let mut tape = Tape::new();
    let pv = ParamVars::register(&mut tape, params, false);
    let out = forward(&mut tape, &pv, clip, cfg, view, None)?;
    let scores = tape.softmax(out.logits, 1)?;
    let probs = tape.value(scores).data().to_vec();
    let all_layers: Vec<usize> = (1..=cfg.layers).collect();
    let maps = extract_attention(&tape, &out, cfg, &all_layers)?;
    Ok((probs, maps))
}

/// The frozen CLS representation of a clip under the given parameters.
pub fn embed_clip<E: Scalar>(
    params: &ModelParams<E>,
    clip: &VideoClip,
    cfg: &ModelConfig,
) -> Result<Vec<E>> {
    let mut tape = Tape::new();
    let pv = ParamVars::register(&mut tape, params, false);
    let out = forward(&mut tape, &pv, clip, cfg, View::Exo, None)?;
    Ok(tape.value(out.cls_rep).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{render, SceneSpec};

    fn desk_cfg() -> ModelConfig {
        ModelConfig {
            seed: 3,
            ..ModelConfig::default()
        }
    }

    fn test_clip(seed: u64) -> VideoClip {
        let scene = SceneSpec::generate(seed, 2, 8).unwrap();
        let rigs = scene.rigs(View::Exo, 32, 32);
        render(&scene, &rigs, 32, 32, View::Exo).unwrap().0
    }

    #[test]
    fn token_count_formula() {
        let full = ModelConfig {
            frames: 16,
            height: 224,
            width: 224,
            patch_k: 2,
            patch_p: 16,
            ..ModelConfig::default()
        };
        assert_eq!(full.token_count(), 8 * 14 * 14);
        assert_eq!(desk_cfg().token_count(), 4 * 4 * 4);
    }

    #[test]
    fn zero_clip_embeds_to_bias() {
        let cfg = desk_cfg();
        let mut params = ModelParams::<f64>::init(&cfg).unwrap();
        params.patch_b = Tensor::from_fn(vec![cfg.dim], |i| i as f64 * 0.01);
        let clip = VideoClip {
            frames: vec![0.0; 8 * 32 * 32 * 3],
            depth: vec![0.0; 8 * 32 * 32],
            t: 8,
            h: 32,
            w: 32,
            c: 3,
            view: View::Exo,
            label: 0,
            scene_seed: 0,
            rigs: vec![],
        };
        let patches = tokenize_patches::<f64>(&clip, &cfg).unwrap();
        let mut tape = Tape::new();
        let pw = tape.constant(params.patch_w.clone());
        let pb = tape.constant(params.patch_b.clone());
        let pvar = tape.constant(patches);
        let proj = tape.matmul(pvar, pw).unwrap();
        let emb = tape.add_row(proj, pb).unwrap();
        let data = tape.value(emb).data();
        for r in 0..cfg.token_count() {
            for c in 0..cfg.dim {
                assert_eq!(data[r * cfg.dim + c], c as f64 * 0.01);
            }
        }
    }

    #[test]
    fn tokenize_rejects_wrong_shape() {
        let cfg = desk_cfg();
        let mut clip = test_clip(1);
        clip.h = 16;
        assert!(tokenize_patches::<f32>(&clip, &cfg).is_err());
    }

    #[test]
    fn attention_maps_sum_to_one() {
        let cfg = desk_cfg();
        let params = ModelParams::<f64>::init(&cfg).unwrap();
        let clip = test_clip(5);
        let (_, maps) = forward_eval(&params, &clip, &cfg, View::Exo).unwrap();
        assert_eq!(maps.len(), cfg.layers);
        for map in &maps {
            assert!((map.sum() - 1.0).abs() < 1e-6, "sum {}", map.sum());
            assert!(map.values.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn attention_permutes_with_tokens_when_positions_are_zero() {
        let cfg = desk_cfg();
        let mut params = ModelParams::<f64>::init(&cfg).unwrap();
        params.pos = Tensor::zeros(vec![cfg.token_count() + 1, cfg.dim]);
        let clip = test_clip(9);
        let patches = tokenize_patches::<f64>(&clip, &cfg).unwrap();

        let run = |pt: &Tensor<f64>| {
            let mut tape = Tape::new();
            let pv = ParamVars::register(&mut tape, &params, false);
            let pvar = tape.constant(pt.clone());
            let out = forward_patches(&mut tape, &pv, pvar, &cfg, View::Exo, None).unwrap();
            tape.value(out.attn[cfg.layers - 1]).data().to_vec()
        };

        let base = run(&patches);
        // swap the contents of tokens 3 and 17
        let pd = cfg.patch_dim();
        let mut swapped = patches.data().to_vec();
        for i in 0..pd {
            swapped.swap(3 * pd + i, 17 * pd + i);
        }
        let swapped =
            Tensor::new(vec![cfg.token_count(), pd], swapped).unwrap();
        let perm = run(&swapped);
        for i in 0..cfg.token_count() {
            let j = if i == 3 { 17 } else if i == 17 { 3 } else { i };
            assert!(
                (base[i] - perm[j]).abs() < 1e-9,
                "token {i}: {} vs {}",
                base[i],
                perm[j]
            );
        }
    }

    /// Independent straight-line reimplementation of the forward pass.
    fn straight_line_logits(
        params: &ModelParams<f64>,
        patches: &Tensor<f64>,
        cfg: &ModelConfig,
    ) -> Vec<f64> {
        let n = cfg.token_count();
        let d = cfg.dim;
        let rows = n + 1;
        let matmul = |a: &[f64], b: &[f64], m: usize, k: usize, nn: usize| -> Vec<f64> {
            let mut out = vec![0.0; m * nn];
            for i in 0..m {
                for j in 0..nn {
                    let mut acc = 0.0;
                    for p in 0..k {
                        acc += a[i * k + p] * b[p * nn + j];
                    }
                    out[i * nn + j] = acc;
                }
            }
            out
        };
        let layer_norm = |x: &[f64], g: &[f64], b: &[f64], cols: usize| -> Vec<f64> {
            let mut out = vec![0.0; x.len()];
            for r in 0..x.len() / cols {
                let row = &x[r * cols..(r + 1) * cols];
                let mean = row.iter().sum::<f64>() / cols as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                let inv = 1.0 / (var + LN_EPS).sqrt();
                for c in 0..cols {
                    out[r * cols + c] = (row[c] - mean) * inv * g[c] + b[c];
                }
            }
            out
        };
        let gelu = |x: f64| -> f64 {
            0.5 * x
                * (1.0
                    + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
        };

        // embed + cls + pos
        let emb = matmul(patches.data(), params.patch_w.data(), n, cfg.patch_dim(), d);
        let mut x = vec![0.0; rows * d];
        x[..d].copy_from_slice(params.cls.data());
        for r in 0..n {
            for c in 0..d {
                x[(r + 1) * d + c] = emb[r * d + c] + params.patch_b.data()[c];
            }
        }
        for (xi, pi) in x.iter_mut().zip(params.pos.data()) {
            *xi += pi;
        }

        let heads = cfg.heads;
        let hd = d / heads;
        for l in &params.layers {
            let h1 = layer_norm(&x, l.ln1_g.data(), l.ln1_b.data(), d);
            let addb = |m: Vec<f64>, b: &[f64]| -> Vec<f64> {
                m.iter()
                    .enumerate()
                    .map(|(i, v)| v + b[i % b.len()])
                    .collect()
            };
            let q = addb(matmul(&h1, l.wq.data(), rows, d, d), l.bq.data());
            let k = addb(matmul(&h1, l.wk.data(), rows, d, d), l.bk.data());
            let v = addb(matmul(&h1, l.wv.data(), rows, d, d), l.bv.data());
            let mut concat = vec![0.0; rows * d];
            for h in 0..heads {
                for i in 0..rows {
                    // scores for row i against all rows
                    let mut scores = vec![0.0; rows];
                    for j in 0..rows {
                        let mut acc = 0.0;
                        for c in 0..hd {
                            acc += q[i * d + h * hd + c] * k[j * d + h * hd + c];
                        }
                        scores[j] = acc / (hd as f64).sqrt();
                    }
                    let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
                    for c in 0..hd {
                        let mut acc = 0.0;
                        for j in 0..rows {
                            acc += (scores[j] - mx).exp() / denom * v[j * d + h * hd + c];
                        }
                        concat[i * d + h * hd + c] = acc;
                    }
                }
            }
            let proj = addb(matmul(&concat, l.wo.data(), rows, d, d), l.bo.data());
            for (xi, pi) in x.iter_mut().zip(&proj) {
                *xi += pi;
            }
            let h2 = layer_norm(&x, l.ln2_g.data(), l.ln2_b.data(), d);
            let m1 = addb(matmul(&h2, l.w1.data(), rows, d, 4 * d), l.b1.data());
            let m1: Vec<f64> = m1.iter().map(|&v| gelu(v)).collect();
            let m2 = addb(matmul(&m1, l.w2.data(), rows, 4 * d, d), l.b2.data());
            for (xi, mi) in x.iter_mut().zip(&m2) {
                *xi += mi;
            }
        }
        let xf = layer_norm(&x, params.lnf_g.data(), params.lnf_b.data(), d);
        let rep = &xf[..d];
        let mut logits = matmul(rep, params.head_exo_w.data(), 1, d, cfg.classes_exo);
        for (lv, bv) in logits.iter_mut().zip(params.head_exo_b.data()) {
            *lv += bv;
        }
        logits
    }

    #[test]
    fn forward_matches_straight_line_reimplementation() {
        let cfg = desk_cfg();
        let params = ModelParams::<f64>::init(&cfg).unwrap();
        let clip = test_clip(11);
        let patches = tokenize_patches::<f64>(&clip, &cfg).unwrap();

        let mut tape = Tape::new();
        let pv = ParamVars::register(&mut tape, &params, false);
        let pvar = tape.constant(patches.clone());
        let out = forward_patches(&mut tape, &pv, pvar, &cfg, View::Exo, None).unwrap();
        let got = tape.value(out.logits).data().to_vec();
        let want = straight_line_logits(&params, &patches, &cfg);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-5, "{g} vs {w}");
        }
    }

    #[test]
    fn extract_attention_subsets() {
        let cfg = desk_cfg();
        let params = ModelParams::<f64>::init(&cfg).unwrap();
        let clip = test_clip(13);
        let mut tape = Tape::new();
        let pv = ParamVars::register(&mut tape, &params, false);
        let out = forward(&mut tape, &pv, &clip, &cfg, View::Exo, None).unwrap();

        let all: Vec<usize> = (1..=cfg.layers).collect();
        let full = extract_attention(&tape, &out, &cfg, &all).unwrap();
        assert_eq!(full.len(), cfg.layers);
        let last = extract_attention(&tape, &out, &cfg, &[cfg.layers]).unwrap();
        assert_eq!(last.len(), 1);
        assert_eq!(last[0], full[cfg.layers - 1]);

        assert!(extract_attention(&tape, &out, &cfg, &[]).is_err());
        assert!(extract_attention(&tape, &out, &cfg, &[cfg.layers + 1]).is_err());
    }

    #[test]
    fn attention_matches_manual_recomputation_from_head_rows() {
        let cfg = desk_cfg();
        let params = ModelParams::<f64>::init(&cfg).unwrap();
        let clip = test_clip(17);
        let mut tape = Tape::new();
        let pv = ParamVars::register(&mut tape, &params, false);
        let out = forward(&mut tape, &pv, &clip, &cfg, View::Exo, None).unwrap();
        let n = cfg.token_count();
        for li in 0..cfg.layers {
            let rows = &out.head_rows[li];
            let mut mean = vec![0.0f64; n + 1];
            for h in 0..cfg.heads {
                for j in 0..n + 1 {
                    mean[j] += rows.data()[h * (n + 1) + j] / cfg.heads as f64;
                }
            }
            let total: f64 = mean[1..].iter().sum();
            let map = tape.value(out.attn[li]).data();
            for j in 0..n {
                assert!((map[j] - mean[j + 1] / total).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn exo_loss_leaves_ego_head_untouched() {
        let cfg = desk_cfg();
        let params = ModelParams::<f64>::init(&cfg).unwrap();
        let clip = test_clip(19);
        let mut tape = Tape::new();
        let pv = ParamVars::register(&mut tape, &params, true);
        let out = forward(&mut tape, &pv, &clip, &cfg, View::Exo, None).unwrap();
        let loss = tape.cross_entropy(out.logits, &[clip.label]).unwrap();
        let ego_w = pv.get("head_ego_w");
        let ego_b = pv.get("head_ego_b");
        let exo_w = pv.get("head_exo_w");
        let grads = tape.backward(loss).unwrap();
        // no gradient path into the unused head
        assert!(grads.get(ego_w).is_none());
        assert!(grads.get(ego_b).is_none());
        assert!(grads.get(exo_w).is_some());
    }

    #[test]
    fn seeded_init_and_forward_are_deterministic() {
        let cfg = desk_cfg();
        let a = ModelParams::<f32>::init(&cfg).unwrap();
        let b = ModelParams::<f32>::init(&cfg).unwrap();
        assert_eq!(a, b);
        let clip = test_clip(23);
        let (pa, _) = forward_eval(&a, &clip, &cfg, View::Ego).unwrap();
        let (pb, _) = forward_eval(&b, &clip, &cfg, View::Ego).unwrap();
        assert_eq!(pa, pb);
    }

    #[test]
    fn dropout_masks_are_seeded() {
        let cfg = ModelConfig {
            dropout: 0.3,
            ..desk_cfg()
        };
        let params = ModelParams::<f32>::init(&cfg).unwrap();
        let clip = test_clip(29);
        let run = |seed: u64| {
            let mut rng = Rng::seed(seed);
            let mut tape = Tape::new();
            let pv = ParamVars::register(&mut tape, &params, false);
            let out = forward(&mut tape, &pv, &clip, &cfg, View::Exo, Some(&mut rng)).unwrap();
            tape.value(out.logits).data().to_vec()
        };
        assert_eq!(run(1), run(1));
        assert_ne!(run(1), run(2));
    }

    #[test]
    fn params_named_round_trip() {
        let cfg = desk_cfg();
        let params = ModelParams::<f32>::init(&cfg).unwrap();
        let pairs: Vec<(String, Tensor<f32>)> = params
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        let rebuilt = ModelParams::from_named(&cfg, pairs).unwrap();
        assert_eq!(params, rebuilt);
    }
}
