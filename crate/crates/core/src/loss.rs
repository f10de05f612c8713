//! Cross-view correlation metrics and the unpaired self-attention loss.
//!
//! Video distance `d_x` is computed under a frozen encoder (or raw pixels)
//! and enters the loss as a constant target; attention distance `d_a` is
//! built on the tape so gradients shape the attention maps. Both metrics are
//! clamped at `beta`. The loss averages `lambda (d_x - alpha d_a)^2` over
//! the pair set and the selected layers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    embed_clip, forward, AttentionMap, ModelConfig, ModelParams, ParamVars,
};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::scene::{VideoClip, View};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DxKind {
    /// Mean squared pixel difference, scaled by 1/(T H W C).
    Pixel,
    /// Squared distance between frozen-encoder embeddings.
    Embed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DaKind {
    /// Squared Euclidean distance over grid values.
    L2,
    /// Symmetrized KL: (KL(p||q) + KL(q||p)) / 2 on smoothed maps.
    SymKl,
    /// Jensen-Shannon with mixture midpoint, behind a config switch.
    JsMixture,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pairing {
    /// Pair i with i; batches must have equal length.
    Matched,
    /// Full cross product of the two batches.
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub dx: DxKind,
    pub da: DaKind,
    /// 1-based transformer layers whose attention maps carry the loss.
    pub layers: Vec<usize>,
    pub pairing: Pairing,
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.75,
            beta: 200.0,
            lambda: 5e-3,
            dx: DxKind::Embed,
            da: DaKind::SymKl,
            layers: vec![1, 2, 3, 4],
            pairing: Pairing::All,
            epsilon: 1e-8,
        }
    }
}

impl LossConfig {
    pub fn validate(&self, model_layers: usize) -> Result<()> {
        if self.alpha < 0.0 || self.lambda < 0.0 {
            return Err(Error::Config("alpha and lambda must be nonnegative".into()));
        }
        if self.beta <= 0.0 || self.epsilon <= 0.0 {
            return Err(Error::Config("beta and epsilon must be positive".into()));
        }
        if self.layers.is_empty() {
            return Err(Error::Config("layer subset is empty".into()));
        }
        if self.layers.iter().any(|&l| l == 0 || l > model_layers) {
            return Err(Error::Config(format!(
                "layer subset {:?} out of range 1..={model_layers}",
                self.layers
            )));
        }
        Ok(())
    }
}

/// Frozen encoder G: a reduced copy of the transformer whose CLS
/// representation embeds a clip.
#[derive(Debug, Clone)]
pub struct EmbedNet<E> {
    pub cfg: ModelConfig,
    pub params: ModelParams<E>,
}

impl<E: Scalar> EmbedNet<E> {
    /// Untrained frozen encoder (the zero-pretrain configuration).
    pub fn random(base: &ModelConfig, seed: u64) -> Result<EmbedNet<E>> {
        let cfg = reduced_config(base, seed);
        let params = ModelParams::init(&cfg)?;
        Ok(EmbedNet { cfg, params })
    }

    pub fn embed(&self, clip: &VideoClip) -> Result<Vec<E>> {
        embed_clip(&self.params, clip, &self.cfg)
    }

    pub fn cast<F: Scalar>(&self) -> Result<EmbedNet<F>> {
        Ok(EmbedNet {
            cfg: self.cfg,
            params: self.params.cast::<F>(&self.cfg)?,
        })
    }
}

/// The encoder configuration used for G: two layers, same token geometry.
pub fn reduced_config(base: &ModelConfig, seed: u64) -> ModelConfig {
    ModelConfig {
        layers: 2,
        dropout: 0.0,
        seed,
        ..*base
    }
}

pub fn clamp_metric(raw: f64, beta: f64) -> f64 {
    raw.min(beta)
}

/// Video correlation metric, clamped at beta. Constant with respect to the
/// model being trained: the encoder is frozen.
pub fn d_x<E: Scalar>(
    a: &VideoClip,
    b: &VideoClip,
    cfg: &LossConfig,
    embed: Option<&EmbedNet<E>>,
) -> Result<f64> {
    if a.t != b.t || a.h != b.h || a.w != b.w || a.c != b.c {
        return Err(Error::Shape {
            op: "d_x",
            lhs: vec![a.t, a.h, a.w, a.c],
            rhs: vec![b.t, b.h, b.w, b.c],
        });
    }
    let raw = match cfg.dx {
        DxKind::Pixel => {
            let mut acc = 0.0f64;
            for (&x, &y) in a.frames.iter().zip(&b.frames) {
                let d = x as f64 - y as f64;
                acc += d * d;
            }
            acc / a.numel() as f64
        }
        DxKind::Embed => {
            let net = embed.ok_or_else(|| {
                Error::Config("d_x: embed metric requires a frozen encoder".into())
            })?;
            let ea = net.embed(a)?;
            let eb = net.embed(b)?;
            let mut acc = 0.0f64;
            for (x, y) in ea.iter().zip(&eb) {
                let d = x.as_f64() - y.as_f64();
                acc += d * d;
            }
            acc
        }
    };
    Ok(clamp_metric(raw, cfg.beta))
}

/// Attention correlation metric on the tape, clamped at beta. Both maps are
/// probability vectors of the same length.
pub fn d_a_tape<E: Scalar>(tape: &mut Tape<E>, p: Var, q: Var, cfg: &LossConfig) -> Result<Var> {
    let np = tape.value(p).numel();
    if np != tape.value(q).numel() {
        return Err(Error::Shape {
            op: "d_a",
            lhs: tape.value(p).shape().to_vec(),
            rhs: tape.value(q).shape().to_vec(),
        });
    }
    for v in [p, q] {
        if tape.value(v).data().iter().any(|&x| x < E::zero()) {
            return Err(Error::Numeric("d_a: negative map entries".into()));
        }
    }
    let beta = E::from_f64(cfg.beta);
    let raw = match cfg.da {
        DaKind::L2 => {
            let diff = tape.sub(p, q)?;
            let sq = tape.mul(diff, diff)?;
            tape.sum(sq)
        }
        DaKind::SymKl => {
            let (ps, lp) = smooth_and_log(tape, p, np, cfg.epsilon)?;
            let (qs, lq) = smooth_and_log(tape, q, np, cfg.epsilon)?;
            // (p'-q') (log p' - log q') summed, halved
            let diff = tape.sub(ps, qs)?;
            let ldiff = tape.sub(lp, lq)?;
            let prod = tape.mul(diff, ldiff)?;
            let total = tape.sum(prod);
            tape.scale(total, E::from_f64(0.5))
        }
        DaKind::JsMixture => {
            let (ps, lp) = smooth_and_log(tape, p, np, cfg.epsilon)?;
            let (qs, lq) = smooth_and_log(tape, q, np, cfg.epsilon)?;
            let sum = tape.add(ps, qs)?;
            let m = tape.scale(sum, E::from_f64(0.5));
            let mc = tape.clamp_min(m, E::from_f64(1e-300));
            let lm = tape.log(mc)?;
            let dp = tape.sub(lp, lm)?;
            let tp = tape.mul(ps, dp)?;
            let sp = tape.sum(tp);
            let dq = tape.sub(lq, lm)?;
            let tq = tape.mul(qs, dq)?;
            let sq = tape.sum(tq);
            let total = tape.add(sp, sq)?;
            tape.scale(total, E::from_f64(0.5))
        }
    };
    Ok(tape.clamp_max(raw, beta))
}

/// Mix in epsilon uniform mass, renormalize, and take the log.
fn smooth_and_log<E: Scalar>(
    tape: &mut Tape<E>,
    p: Var,
    n: usize,
    epsilon: f64,
) -> Result<(Var, Var)> {
    let shifted = tape.add_scalar(p, E::from_f64(epsilon / n as f64));
    let smoothed = tape.scale(shifted, E::from_f64(1.0 / (1.0 + epsilon)));
    let log = tape.log(smoothed)?;
    Ok((smoothed, log))
}

/// Concrete d_a between two attention maps.
pub fn d_a_value<E: Scalar>(
    p: &AttentionMap<E>,
    q: &AttentionMap<E>,
    cfg: &LossConfig,
) -> Result<f64> {
    let mut tape = Tape::new();
    let pv = tape.constant(Tensor::new(vec![p.values.len()], p.values.clone())?);
    let qv = tape.constant(Tensor::new(vec![q.values.len()], q.values.clone())?);
    let d = d_a_tape(&mut tape, pv, qv, cfg)?;
    Ok(tape.value(d).item().as_f64())
}

/// Aggregation core of the loss: mean over (d_x, d_a) parts of
/// `(d_x - alpha d_a)^2`, scaled once by lambda.
pub fn l_self_from_parts<E: Scalar>(
    tape: &mut Tape<E>,
    parts: &[(f64, Var)],
    alpha: f64,
    lambda: f64,
) -> Result<Var> {
    if parts.is_empty() {
        return Err(Error::Numeric("l_self: empty pair set".into()));
    }
    let mut acc: Option<Var> = None;
    for &(dx, da) in parts {
        let scaled = tape.scale(da, E::from_f64(-alpha));
        let resid = tape.add_scalar(scaled, E::from_f64(dx));
        let sq = tape.mul(resid, resid)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, sq)?,
            None => sq,
        });
    }
    let total = acc.unwrap();
    Ok(tape.scale(total, E::from_f64(lambda / parts.len() as f64)))
}

/// Frozen-encoder embeddings for a batch, one per clip.
pub fn embed_many<E: Scalar>(embed: &EmbedNet<E>, clips: &[&VideoClip]) -> Result<Vec<Vec<E>>> {
    clips.iter().map(|c| embed.embed(c)).collect()
}

/// Squared embedding distance, clamped at beta.
pub fn d_x_from_embeds<E: Scalar>(a: &[E], b: &[E], beta: f64) -> f64 {
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        let d = x.as_f64() - y.as_f64();
        acc += d * d;
    }
    clamp_metric(acc, beta)
}

/// Row-major `B_exo x B_ego` matrix of d_x values. Under the embed metric
/// each clip is encoded once, not once per pair.
pub fn d_x_matrix<E: Scalar>(
    exo: &[&VideoClip],
    ego: &[&VideoClip],
    cfg: &LossConfig,
    embed: Option<&EmbedNet<E>>,
) -> Result<Vec<f64>> {
    match cfg.dx {
        DxKind::Pixel => {
            let mut out = Vec::with_capacity(exo.len() * ego.len());
            for a in exo {
                for b in ego {
                    out.push(d_x(a, b, cfg, embed)?);
                }
            }
            Ok(out)
        }
        DxKind::Embed => {
            let net = embed.ok_or_else(|| {
                Error::Config("d_x: embed metric requires a frozen encoder".into())
            })?;
            let ea = embed_many(net, exo)?;
            let eb = embed_many(net, ego)?;
            let mut out = Vec::with_capacity(exo.len() * ego.len());
            for a in &ea {
                for b in &eb {
                    out.push(d_x_from_embeds(a, b, cfg.beta));
                }
            }
            Ok(out)
        }
    }
}

/// The unpaired cross-view self-attention loss over two batches.
///
/// `exo_maps[i]` / `ego_maps[j]` hold the selected layers' attention vars
/// for clip i / j; `dx` is the `B_exo x B_ego` video-distance matrix. The
/// pair set follows the pairing mode; each pair contributes one part per
/// selected layer.
pub fn l_self_with_dx<E: Scalar>(
    tape: &mut Tape<E>,
    dx: &[f64],
    exo_maps: &[Vec<Var>],
    ego_maps: &[Vec<Var>],
    cfg: &LossConfig,
) -> Result<Var> {
    let (ne, ng) = (exo_maps.len(), ego_maps.len());
    if ne == 0 || ng == 0 {
        return Err(Error::Numeric("l_self: empty batch".into()));
    }
    if dx.len() != ne * ng {
        return Err(Error::Shape {
            op: "l_self",
            lhs: vec![dx.len()],
            rhs: vec![ne, ng],
        });
    }
    let pairs: Vec<(usize, usize)> = match cfg.pairing {
        Pairing::Matched => {
            if ne != ng {
                return Err(Error::Shape {
                    op: "l_self",
                    lhs: vec![ne],
                    rhs: vec![ng],
                });
            }
            (0..ne).map(|i| (i, i)).collect()
        }
        Pairing::All => (0..ne)
            .flat_map(|i| (0..ng).map(move |j| (i, j)))
            .collect(),
    };
    let mut parts = Vec::with_capacity(pairs.len() * cfg.layers.len());
    for (i, j) in pairs {
        for (mi, mj) in exo_maps[i].iter().zip(&ego_maps[j]) {
            let da = d_a_tape(tape, *mi, *mj, cfg)?;
            parts.push((dx[i * ng + j], da));
        }
    }
    l_self_from_parts(tape, &parts, cfg.alpha, cfg.lambda)
}

/// [`l_self_with_dx`] with the distance matrix computed on the spot.
pub fn l_self<E: Scalar>(
    tape: &mut Tape<E>,
    exo_clips: &[&VideoClip],
    exo_maps: &[Vec<Var>],
    ego_clips: &[&VideoClip],
    ego_maps: &[Vec<Var>],
    cfg: &LossConfig,
    embed: Option<&EmbedNet<E>>,
) -> Result<Var> {
    if exo_clips.is_empty() || ego_clips.is_empty() {
        return Err(Error::Numeric("l_self: empty batch".into()));
    }
    let dx = d_x_matrix(exo_clips, ego_clips, cfg, embed)?;
    l_self_with_dx(tape, &dx, exo_maps, ego_maps, cfg)
}

/// All tape outputs of one optimization step.
pub struct ObjectiveOut {
    pub total: Var,
    pub ce_exo: Var,
    pub ce_ego: Var,
    pub l_self: Var,
}

/// Both supervised terms plus the cross-view regularizer. When lambda is 0
/// the regularizer is skipped entirely and the total reduces bitwise to the
/// two cross-entropy terms.
pub fn total_objective<E: Scalar>(
    tape: &mut Tape<E>,
    pv: &ParamVars,
    exo_batch: &[&VideoClip],
    ego_batch: &[&VideoClip],
    mcfg: &ModelConfig,
    lcfg: &LossConfig,
    embed: Option<&EmbedNet<E>>,
    dropout_rng: Option<&mut Rng>,
) -> Result<ObjectiveOut> {
    total_objective_with_dx(
        tape, pv, exo_batch, ego_batch, mcfg, lcfg, embed, None, dropout_rng,
    )
}

/// [`total_objective`] with an optional precomputed d_x matrix (row-major
/// `B_exo x B_ego`); the trainer passes one to reuse frozen embeddings
/// across epochs.
#[allow(clippy::too_many_arguments)]
pub fn total_objective_with_dx<E: Scalar>(
    tape: &mut Tape<E>,
    pv: &ParamVars,
    exo_batch: &[&VideoClip],
    ego_batch: &[&VideoClip],
    mcfg: &ModelConfig,
    lcfg: &LossConfig,
    embed: Option<&EmbedNet<E>>,
    dx_override: Option<&[f64]>,
    mut dropout_rng: Option<&mut Rng>,
) -> Result<ObjectiveOut> {
    lcfg.validate(mcfg.layers)?;
    if exo_batch.is_empty() || ego_batch.is_empty() {
        return Err(Error::Numeric("total_objective: empty batch".into()));
    }

    let run_view = |tape: &mut Tape<E>,
                        batch: &[&VideoClip],
                        view: View,
                        rng: &mut Option<&mut Rng>|
     -> Result<(Var, Vec<Vec<Var>>)> {
        let mut logit_rows = Vec::with_capacity(batch.len());
        let mut maps = Vec::with_capacity(batch.len());
        for clip in batch {
            let out = forward(tape, pv, clip, mcfg, view, rng.as_deref_mut())?;
            logit_rows.push(out.logits);
            maps.push(
                lcfg.layers
                    .iter()
                    .map(|&l| out.attn[l - 1])
                    .collect::<Vec<_>>(),
            );
        }
        let logits = tape.concat_rows(&logit_rows)?;
        let labels: Vec<usize> = batch.iter().map(|c| c.label).collect();
        let ce = tape.cross_entropy(logits, &labels)?;
        Ok((ce, maps))
    };

    let (ce_exo, exo_maps) = run_view(tape, exo_batch, View::Exo, &mut dropout_rng)?;
    let (ce_ego, ego_maps) = run_view(tape, ego_batch, View::Ego, &mut dropout_rng)?;
    let supervised = tape.add(ce_exo, ce_ego)?;

    if lcfg.lambda == 0.0 {
        let zero = tape.scalar(E::zero());
        return Ok(ObjectiveOut {
            total: supervised,
            ce_exo,
            ce_ego,
            l_self: zero,
        });
    }

    let reg = match dx_override {
        Some(dx) => l_self_with_dx(tape, dx, &exo_maps, &ego_maps, lcfg)?,
        None => l_self(
            tape, exo_batch, &exo_maps, ego_batch, &ego_maps, lcfg, embed,
        )?,
    };
    let total = tape.add(supervised, reg)?;
    Ok(ObjectiveOut {
        total,
        ce_exo,
        ce_ego,
        l_self: reg,
    })
}

// ---- bound verification -----------------------------------------------

/// Root-scaled-l2 video metric, clamped: a true metric bounded by beta.
pub fn root_l2_clip(a: &VideoClip, b: &VideoClip, beta: f64) -> f64 {
    let mut acc = 0.0f64;
    for (&x, &y) in a.frames.iter().zip(&b.frames) {
        let d = x as f64 - y as f64;
        acc += d * d;
    }
    clamp_metric((acc / a.numel() as f64).sqrt(), beta)
}

/// Root-l2 attention metric, clamped: a true metric bounded by beta.
pub fn root_l2_map<E: Scalar>(p: &AttentionMap<E>, q: &AttentionMap<E>, beta: f64) -> f64 {
    let mut acc = 0.0f64;
    for (x, y) in p.values.iter().zip(&q.values) {
        let d = x.as_f64() - y.as_f64();
        acc += d * d;
    }
    clamp_metric(acc.sqrt(), beta)
}

/// One (x_exo, paired ego, unpaired ego) sample with attention maps.
pub struct BoundTriple<'a, E> {
    pub x_exo: &'a VideoClip,
    pub x_ego_paired: &'a VideoClip,
    pub x_ego: &'a VideoClip,
    pub a_exo: &'a AttentionMap<E>,
    pub a_ego_paired: &'a AttentionMap<E>,
    pub a_ego: &'a AttentionMap<E>,
}

#[derive(Debug, Clone)]
pub struct BoundReport {
    pub triples: usize,
    pub violations: usize,
    pub min_slack: f64,
    pub max_slack: f64,
    /// Ten-bucket histogram of slack over [0, max_slack].
    pub slack_hist: Vec<usize>,
}

/// Check the paired-sample bound on every triple under root-l2 clamped
/// metrics: lhs(paired) <= rhs(unpaired) + (1 + alpha) beta.
pub fn verify_bound<E: Scalar>(triples: &[BoundTriple<E>], alpha: f64, beta: f64) -> BoundReport {
    let mut slacks = Vec::with_capacity(triples.len());
    for t in triples {
        let lhs = root_l2_clip(t.x_exo, t.x_ego_paired, beta)
            - alpha * root_l2_map(t.a_exo, t.a_ego_paired, beta);
        let rhs = root_l2_clip(t.x_exo, t.x_ego, beta)
            - alpha * root_l2_map(t.a_exo, t.a_ego, beta)
            + (1.0 + alpha) * beta;
        slacks.push(rhs - lhs);
    }
    let violations = slacks.iter().filter(|&&s| s < -1e-9).count();
    let min_slack = slacks.iter().cloned().fold(f64::INFINITY, f64::min);
    let max_slack = slacks.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut slack_hist = vec![0usize; 10];
    if max_slack > 0.0 {
        for &s in &slacks {
            let b = ((s / max_slack) * 10.0).floor().clamp(0.0, 9.0) as usize;
            slack_hist[b] += 1;
        }
    }
    BoundReport {
        triples: triples.len(),
        violations,
        min_slack,
        max_slack,
        slack_hist,
    }
}

// ---- gradient check of the full objective ------------------------------

/// Finite-difference check of the total objective with respect to every
/// parameter tensor. Per tensor, the `max_coords` coordinates with the
/// largest analytic gradient are probed (the rest sit at the central
/// difference noise floor). Returns the max relative error and the
/// per-tensor breakdown.
pub fn objective_grad_check(
    mcfg: &ModelConfig,
    lcfg: &LossConfig,
    params: &ModelParams<f64>,
    exo_batch: &[&VideoClip],
    ego_batch: &[&VideoClip],
    embed: Option<&EmbedNet<f64>>,
    max_coords: usize,
    h: f64,
) -> Result<(f64, Vec<(String, f64)>)> {
    let names: Vec<String> = params.named().iter().map(|(n, _)| n.clone()).collect();
    let mut per_tensor = Vec::with_capacity(names.len());
    let mut worst = 0.0f64;
    for name in names {
        let x = params
            .named()
            .into_iter()
            .find(|(n, _)| *n == name)
            .unwrap()
            .1
            .clone();
        let mut f = |tape: &mut Tape<f64>, xv: Var| -> Result<Var> {
            let pv = ParamVars::register_with(tape, params, |n, t, tape| {
                if n == name {
                    xv
                } else {
                    tape.constant(t.clone())
                }
            });
            let out = total_objective(tape, &pv, exo_batch, ego_batch, mcfg, lcfg, embed, None)?;
            Ok(out.total)
        };
        let err = crate::gradcheck::finite_diff_check_top(&mut f, &x, h, max_coords)?;
        if err > worst {
            worst = err;
        }
        per_tensor.push((name, err));
    }
    Ok((worst, per_tensor))
}
