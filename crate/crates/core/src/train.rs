//! Training harness: dual-view unpaired batching, SGD with momentum under a
//! cosine schedule, a frozen-encoder pretraining phase, and bitwise
//! checkpoint/resume.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Block, Header};
use crate::dataset::{Dataset, TRAIN_SPLIT};
use crate::error::{Error, Result};
use crate::loss::{reduced_config, total_objective, EmbedNet, LossConfig};
use crate::model::{forward, ModelConfig, ModelParams, ParamVars};
use crate::rng::{Rng, RngState};
use crate::scene::{VideoClip, View};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub momentum: f64,
    /// Clips per view per step.
    pub batch_size: usize,
    pub seed: u64,
    pub g_pretrain_epochs: usize,
    /// Save a checkpoint every this many epochs; 0 = final only.
    pub checkpoint_every: usize,
    /// Horizontal flip + temporal jitter on training clips.
    pub augment: bool,
    pub model: ModelConfig,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            base_lr: 0.00125,
            momentum: 0.9,
            batch_size: 4,
            seed: 0,
            g_pretrain_epochs: 10,
            checkpoint_every: 0,
            augment: false,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if self.base_lr <= 0.0 {
            return Err(Error::Config("base learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} out of [0,1)", self.momentum)));
        }
        self.model.validate()?;
        self.loss.validate(self.model.layers)
    }
}

/// Cosine learning policy: `base_lr * (1 + cos(pi step / total)) / 2`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> Result<f64> {
    if step > total_steps || total_steps == 0 {
        return Err(Error::Config(format!(
            "cosine_lr: step {step} out of range 0..={total_steps}"
        )));
    }
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub ce_exo: f32,
    pub ce_ego: f32,
    pub l_self: f32,
    pub total: f32,
}

pub const METRICS_HEADER: &str = "step,epoch,lr,ce_exo,ce_ego,l_self,total";

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.epoch, self.lr, self.ce_exo, self.ce_ego, self.l_self, self.total
        )
    }
}

#[derive(Debug)]
pub struct TrainState {
    pub params: ModelParams<f32>,
    /// Momentum buffers aligned with `params.named()` order.
    pub velocity: Vec<Tensor<f32>>,
    pub step: usize,
    pub epoch: usize,
    pub rng: Rng,
    pub history: Vec<StepMetrics>,
}

/// Train a reduced two-layer copy on the exocentric split with plain
/// cross-entropy, then freeze it as the embedding encoder G. Zero epochs
/// yields the frozen random encoder.
pub fn pretrain_embed(
    exo_clips: &[VideoClip],
    base: &ModelConfig,
    epochs: usize,
    batch_size: usize,
    base_lr: f64,
    momentum: f64,
    seed: u64,
) -> Result<EmbedNet<f32>> {
    let cfg = reduced_config(base, crate::rng::mix_seed(&[seed, 0x6e]));
    let mut params = ModelParams::<f32>::init(&cfg)?;
    if epochs == 0 || exo_clips.is_empty() {
        return Ok(EmbedNet { cfg, params });
    }
    let mut rng = Rng::stream(seed, 0x6e7);
    let steps_per_epoch = (exo_clips.len() / batch_size).max(1);
    let total_steps = epochs * steps_per_epoch;
    let mut velocity: Vec<Tensor<f32>> = params
        .named()
        .iter()
        .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
        .collect();
    let mut step = 0usize;
    for _ in 0..epochs {
        let mut order: Vec<usize> = (0..exo_clips.len()).collect();
        rng.shuffle(&mut order);
        for chunk in order.chunks_exact(batch_size.min(exo_clips.len())) {
            let lr = cosine_lr(step, total_steps, base_lr)? as f32;
            let mut tape = Tape::new();
            let pv = ParamVars::register(&mut tape, &params, true);
            let mut rows = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let out = forward(&mut tape, &pv, &exo_clips[i], &cfg, View::Exo, None)?;
                rows.push(out.logits);
                labels.push(exo_clips[i].label);
            }
            let logits = tape.concat_rows(&rows)?;
            let loss = tape.cross_entropy(logits, &labels)?;
            let vars = pv.vars().to_vec();
            let grads = tape.backward(loss)?;
            apply_sgd(&mut params, &mut velocity, &vars, grads, lr, momentum as f32);
            step += 1;
        }
    }
    Ok(EmbedNet { cfg, params })
}

fn apply_sgd(
    params: &mut ModelParams<f32>,
    velocity: &mut [Tensor<f32>],
    vars: &[crate::tape::Var],
    mut grads: crate::tape::Gradients<f32>,
    lr: f32,
    momentum: f32,
) {
    for (slot, (v, var)) in params
        .named_mut()
        .into_iter()
        .zip(velocity.iter_mut().zip(vars))
    {
        let (_, tensor) = slot;
        let Some(g) = grads.take(*var) else { continue };
        let mut vel = v.data().to_vec();
        let mut data = tensor.data().to_vec();
        for ((vi, gi), di) in vel.iter_mut().zip(g.data()).zip(data.iter_mut()) {
            *vi = momentum * *vi + gi;
            *di -= lr * *vi;
        }
        *v = Tensor::new(v.shape().to_vec(), vel).expect("velocity shape");
        *tensor = Tensor::new(tensor.shape().to_vec(), data).expect("param shape");
    }
}

fn flip_clip(clip: &VideoClip) -> VideoClip {
    let mut out = clip.clone();
    for t in 0..clip.t {
        for r in 0..clip.h {
            for c in 0..clip.w {
                let src = ((t * clip.h + r) * clip.w + (clip.w - 1 - c)) * clip.c;
                let dst = ((t * clip.h + r) * clip.w + c) * clip.c;
                for ch in 0..clip.c {
                    out.frames[dst + ch] = clip.frames[src + ch];
                }
            }
        }
    }
    out
}

fn jitter_clip(clip: &VideoClip, shift: isize) -> VideoClip {
    let mut out = clip.clone();
    let frame = clip.h * clip.w * clip.c;
    for t in 0..clip.t {
        let src = (t as isize + shift).clamp(0, clip.t as isize - 1) as usize;
        out.frames[t * frame..(t + 1) * frame]
            .copy_from_slice(&clip.frames[src * frame..(src + 1) * frame]);
    }
    out
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub paired_data: bool,
    pub exo: Vec<VideoClip>,
    pub ego: Vec<VideoClip>,
    pub embed: EmbedNet<f32>,
    pub state: TrainState,
    /// Frozen-encoder embeddings of the train clips, precomputed once when
    /// clips are static (no augmentation) and the embed metric is active.
    dx_cache: Option<(Vec<Vec<f32>>, Vec<Vec<f32>>)>,
}

impl Trainer {
    /// Fresh trainer: loads the train split, pretrains the frozen encoder,
    /// initializes parameters from the config seed.
    pub fn new(cfg: TrainConfig, dataset: &Dataset) -> Result<Trainer> {
        cfg.validate()?;
        let exo = load_view(dataset, View::Exo)?;
        let ego = load_view(dataset, View::Ego)?;
        if exo.len() < cfg.batch_size || ego.len() < cfg.batch_size {
            return Err(Error::Config(format!(
                "batch size {} exceeds split sizes ({} exo, {} ego)",
                cfg.batch_size,
                exo.len(),
                ego.len()
            )));
        }
        let embed = pretrain_embed(
            &exo,
            &cfg.model,
            cfg.g_pretrain_epochs,
            cfg.batch_size,
            cfg.base_lr,
            cfg.momentum,
            cfg.seed,
        )?;
        let params = ModelParams::<f32>::init(&ModelConfig {
            seed: crate::rng::mix_seed(&[cfg.seed, 0x30de1]),
            ..cfg.model
        })?;
        let velocity = params
            .named()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
            .collect();
        let dx_cache = build_dx_cache(&cfg, &embed, &exo, &ego)?;
        Ok(Trainer {
            paired_data: dataset.manifest.paired,
            exo,
            ego,
            embed,
            state: TrainState {
                params,
                velocity,
                step: 0,
                epoch: 0,
                rng: Rng::stream(cfg.seed, 0x7a1),
                history: Vec::new(),
            },
            cfg,
            dx_cache,
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        (self.exo.len() / self.cfg.batch_size).min(self.ego.len() / self.cfg.batch_size)
    }

    pub fn total_steps(&self) -> usize {
        self.cfg.epochs * self.steps_per_epoch()
    }

    /// One pass over both view streams, shuffled independently. Returns the
    /// step metrics of the epoch.
    pub fn epoch(&mut self) -> Result<Vec<StepMetrics>> {
        let spe = self.steps_per_epoch();
        if spe == 0 {
            return Err(Error::Config("batch size exceeds split size".into()));
        }
        let bs = self.cfg.batch_size;
        let mut exo_order: Vec<usize> = (0..self.exo.len()).collect();
        self.state.rng.shuffle(&mut exo_order);
        let mut ego_order: Vec<usize> = (0..self.ego.len()).collect();
        self.state.rng.shuffle(&mut ego_order);

        let mut metrics = Vec::with_capacity(spe);
        for s in 0..spe {
            let exo_idx = &exo_order[s * bs..(s + 1) * bs];
            let ego_idx = &ego_order[s * bs..(s + 1) * bs];

            let exo_batch: Vec<VideoClip> = exo_idx
                .iter()
                .map(|&i| self.augmented(self.exo[i].clone()))
                .collect::<Result<_>>()?;
            let ego_batch: Vec<VideoClip> = ego_idx
                .iter()
                .map(|&i| self.augmented(self.ego[i].clone()))
                .collect::<Result<_>>()?;

            if !self.paired_data {
                // unpaired contract: the two batches never share a scene
                for e in &exo_batch {
                    assert!(
                        ego_batch.iter().all(|g| g.scene_seed != e.scene_seed),
                        "unpaired batches share scene {}",
                        e.scene_seed
                    );
                }
            }

            let lr = cosine_lr(self.state.step, self.total_steps(), self.cfg.base_lr)?;
            let exo_refs: Vec<&VideoClip> = exo_batch.iter().collect();
            let ego_refs: Vec<&VideoClip> = ego_batch.iter().collect();

            // d_x from the frozen-embedding cache when clips are static
            let dx = self.dx_cache.as_ref().map(|(ce, cg)| {
                let mut m = Vec::with_capacity(exo_idx.len() * ego_idx.len());
                for &i in exo_idx {
                    for &j in ego_idx {
                        m.push(crate::loss::d_x_from_embeds(
                            &ce[i],
                            &cg[j],
                            self.cfg.loss.beta,
                        ));
                    }
                }
                m
            });

            let mut tape = Tape::new();
            let pv = ParamVars::register(&mut tape, &self.state.params, true);
            let dropout_rng = if self.cfg.model.dropout > 0.0 {
                Some(&mut self.state.rng)
            } else {
                None
            };
            let out = crate::loss::total_objective_with_dx(
                &mut tape,
                &pv,
                &exo_refs,
                &ego_refs,
                &self.cfg.model,
                &self.cfg.loss,
                Some(&self.embed),
                dx.as_deref(),
                dropout_rng,
            )?;
            let m = StepMetrics {
                step: self.state.step,
                epoch: self.state.epoch,
                lr,
                ce_exo: tape.value(out.ce_exo).item(),
                ce_ego: tape.value(out.ce_ego).item(),
                l_self: tape.value(out.l_self).item(),
                total: tape.value(out.total).item(),
            };
            if !m.total.is_finite() {
                let exo_seeds: Vec<u64> = exo_batch.iter().map(|c| c.scene_seed).collect();
                let ego_seeds: Vec<u64> = ego_batch.iter().map(|c| c.scene_seed).collect();
                return Err(Error::Numeric(format!(
                    "non-finite loss at step {}: exo scenes {exo_seeds:?}, ego scenes {ego_seeds:?}",
                    self.state.step
                )));
            }
            debug_assert!(
                (m.total - (m.ce_exo + m.ce_ego + m.l_self)).abs() < 1e-6,
                "loss decomposition broke"
            );

            let vars = pv.vars().to_vec();
            let grads = tape.backward(out.total)?;
            apply_sgd(
                &mut self.state.params,
                &mut self.state.velocity,
                &vars,
                grads,
                lr as f32,
                self.cfg.momentum as f32,
            );
            self.state.step += 1;
            self.state.history.push(m);
            metrics.push(m);
        }
        self.state.epoch += 1;
        Ok(metrics)
    }

    fn augmented(&mut self, clip: VideoClip) -> Result<VideoClip> {
        if !self.cfg.augment {
            return Ok(clip);
        }
        let flip = self.state.rng.uniform() < 0.5;
        let shift = self.state.rng.below(3) as isize - 1;
        let mut out = if flip { flip_clip(&clip) } else { clip };
        if shift != 0 {
            out = jitter_clip(&out, shift);
        }
        Ok(out)
    }

    /// Full run: epochs, metric log, periodic checkpoints. Appends to
    /// `metrics.csv` so a resumed run continues the same file.
    pub fn run(&mut self, out_dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let csv_path = out_dir.join("metrics.csv");
        let fresh = !csv_path.exists();
        let mut csv = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&csv_path)
            .map_err(|e| Error::io(&csv_path, e))?;
        if fresh {
            writeln!(csv, "{METRICS_HEADER}").map_err(|e| Error::io(&csv_path, e))?;
        }
        while self.state.epoch < self.cfg.epochs {
            let metrics = self.epoch()?;
            for m in &metrics {
                writeln!(csv, "{}", m.csv_row()).map_err(|e| Error::io(&csv_path, e))?;
            }
            csv.flush().map_err(|e| Error::io(&csv_path, e))?;
            if self.cfg.checkpoint_every > 0 && self.state.epoch % self.cfg.checkpoint_every == 0 {
                self.save(&out_dir.join(format!("epoch{:04}.ckpt", self.state.epoch)))?;
            }
        }
        let final_path = out_dir.join("final.ckpt");
        self.save(&final_path)?;
        Ok(final_path)
    }

    /// Persist the full training state (parameters, optimizer, RNG, frozen
    /// encoder, progress).
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            kind: "train".into(),
            model: self.cfg.model,
            embed: Some(self.embed.cfg),
        };
        let mut blocks = checkpoint::params_to_blocks("model.", &self.state.params);
        for ((name, _), v) in self
            .state
            .params
            .named()
            .iter()
            .zip(&self.state.velocity)
        {
            blocks.push((
                format!("opt.{name}"),
                Block::TensorF32 {
                    shape: v.shape().to_vec(),
                    data: v.data().to_vec(),
                },
            ));
        }
        blocks.extend(checkpoint::params_to_blocks("embed.", &self.embed.params));
        let rng = self.state.rng.state();
        let mut rng_bytes = Vec::with_capacity(56);
        rng_bytes.extend_from_slice(&rng.seed);
        rng_bytes.extend_from_slice(&rng.stream.to_le_bytes());
        rng_bytes.extend_from_slice(&rng.word_pos.to_le_bytes());
        blocks.push(("rng.state".into(), Block::Bytes(rng_bytes)));
        blocks.push(("progress.step".into(), Block::U64(self.state.step as u64)));
        blocks.push(("progress.epoch".into(), Block::U64(self.state.epoch as u64)));
        checkpoint::write(path, &header, &blocks)
    }

    /// Restore a trainer from a training checkpoint; continues the exact
    /// trajectory of an uninterrupted run.
    pub fn resume(cfg: TrainConfig, dataset: &Dataset, path: &Path) -> Result<Trainer> {
        cfg.validate()?;
        let (header, blocks) = checkpoint::read(path)?;
        if header.kind != "train" {
            return Err(Error::Format(format!(
                "checkpoint kind {:?} is not resumable",
                header.kind
            )));
        }
        if header.model != cfg.model {
            return Err(Error::Config(
                "checkpoint model config differs from the requested one".into(),
            ));
        }
        let params = checkpoint::params_from_blocks("model.", &header.model, &blocks)?;
        let embed_cfg = header
            .embed
            .ok_or_else(|| Error::Format("training checkpoint lacks encoder config".into()))?;
        let embed_params = checkpoint::params_from_blocks("embed.", &embed_cfg, &blocks)?;
        let velocity_params = checkpoint::params_from_blocks("opt.", &header.model, &blocks)?;
        let velocity: Vec<Tensor<f32>> = velocity_params
            .named()
            .into_iter()
            .map(|(_, t)| t.clone())
            .collect();

        let find = |name: &str| -> Result<&Block> {
            blocks
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, b)| b)
                .ok_or_else(|| Error::Format(format!("checkpoint missing block {name:?}")))
        };
        let rng = match find("rng.state")? {
            Block::Bytes(b) if b.len() == 56 => {
                let mut seed = [0u8; 32];
                seed.copy_from_slice(&b[..32]);
                let stream = u64::from_le_bytes(b[32..40].try_into().unwrap());
                let word_pos = u128::from_le_bytes(b[40..56].try_into().unwrap());
                Rng::restore(&RngState {
                    seed,
                    stream,
                    word_pos,
                })
            }
            _ => return Err(Error::Format("malformed rng state block".into())),
        };
        let step = match find("progress.step")? {
            Block::U64(v) => *v as usize,
            _ => return Err(Error::Format("malformed progress block".into())),
        };
        let epoch = match find("progress.epoch")? {
            Block::U64(v) => *v as usize,
            _ => return Err(Error::Format("malformed progress block".into())),
        };

        let exo = load_view(dataset, View::Exo)?;
        let ego = load_view(dataset, View::Ego)?;
        let embed = EmbedNet {
            cfg: embed_cfg,
            params: embed_params,
        };
        let dx_cache = build_dx_cache(&cfg, &embed, &exo, &ego)?;
        Ok(Trainer {
            paired_data: dataset.manifest.paired,
            exo,
            ego,
            embed,
            state: TrainState {
                params,
                velocity,
                step,
                epoch,
                rng,
                history: Vec::new(),
            },
            cfg,
            dx_cache,
        })
    }
}

fn load_view(dataset: &Dataset, view: View) -> Result<Vec<VideoClip>> {
    dataset
        .clips(TRAIN_SPLIT, Some(view))?
        .into_iter()
        .map(|e| dataset.load_clip(e))
        .collect()
}

/// Precompute frozen embeddings when d_x will be queried on fixed clips.
fn build_dx_cache(
    cfg: &TrainConfig,
    embed: &EmbedNet<f32>,
    exo: &[VideoClip],
    ego: &[VideoClip],
) -> Result<Option<(Vec<Vec<f32>>, Vec<Vec<f32>>)>> {
    use crate::loss::DxKind;
    if cfg.augment || cfg.loss.lambda == 0.0 || cfg.loss.dx != DxKind::Embed {
        return Ok(None);
    }
    let enc = |clips: &[VideoClip]| -> Result<Vec<Vec<f32>>> {
        clips.iter().map(|c| embed.embed(c)).collect()
    };
    Ok(Some((enc(exo)?, enc(ego)?)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::DatasetConfig;

    fn tiny_train_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 2,
            g_pretrain_epochs: 1,
            seed: 3,
            model: ModelConfig {
                frames: 4,
                height: 16,
                width: 16,
                patch_k: 2,
                patch_p: 8,
                dim: 32,
                layers: 2,
                heads: 4,
                ..ModelConfig::default()
            },
            loss: LossConfig {
                layers: vec![1, 2],
                ..LossConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    fn tiny_dataset(dir: &Path) -> Dataset {
        let cfg = DatasetConfig {
            classes: 4,
            clips_per_class: 2,
            val_clips_per_class: 1,
            frames: 4,
            height: 16,
            width: 16,
            paired: false,
            seed: 9,
        };
        Dataset::generate(&cfg, dir, false).unwrap()
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0, 100, 0.00125).unwrap(), 0.00125);
        assert!(cosine_lr(100, 100, 0.00125).unwrap().abs() < 1e-18);
        assert!((cosine_lr(50, 100, 0.00125).unwrap() - 0.000625).abs() < 1e-12);
        assert!(cosine_lr(101, 100, 0.00125).is_err());
    }

    #[test]
    fn seeded_runs_produce_identical_metrics() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(&dir.path().join("ds"));
        let mut a = Trainer::new(tiny_train_cfg(), &ds).unwrap();
        let mut b = Trainer::new(tiny_train_cfg(), &ds).unwrap();
        let ma = a.epoch().unwrap();
        let mb = b.epoch().unwrap();
        assert_eq!(ma, mb);
    }

    #[test]
    fn lambda_zero_ignores_alpha_and_logs_zero_regularizer() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(&dir.path().join("ds"));
        let mut cfg_a = tiny_train_cfg();
        cfg_a.loss.lambda = 0.0;
        cfg_a.loss.alpha = 0.75;
        let mut cfg_b = tiny_train_cfg();
        cfg_b.loss.lambda = 0.0;
        cfg_b.loss.alpha = 2.0;
        let mut a = Trainer::new(cfg_a, &ds).unwrap();
        let mut b = Trainer::new(cfg_b, &ds).unwrap();
        let ma = a.epoch().unwrap();
        let mb = b.epoch().unwrap();
        assert_eq!(ma, mb);
        assert!(ma.iter().all(|m| m.l_self == 0.0));
        assert!(ma.iter().all(|m| m.total == m.ce_exo + m.ce_ego));
    }

    #[test]
    fn loss_decomposition_holds_every_step() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(&dir.path().join("ds"));
        let mut t = Trainer::new(tiny_train_cfg(), &ds).unwrap();
        for m in t.epoch().unwrap() {
            assert!((m.total - (m.ce_exo + m.ce_ego + m.l_self)).abs() < 1e-6);
        }
    }

    #[test]
    fn save_load_save_is_identical() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(&dir.path().join("ds"));
        let mut t = Trainer::new(tiny_train_cfg(), &ds).unwrap();
        t.epoch().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        t.save(&p1).unwrap();
        let r = Trainer::resume(tiny_train_cfg(), &ds, &p1).unwrap();
        r.save(&p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn resume_reproduces_uninterrupted_trajectory() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(&dir.path().join("ds"));
        let mut cfg = tiny_train_cfg();
        cfg.epochs = 4;

        // uninterrupted
        let mut full = Trainer::new(cfg.clone(), &ds).unwrap();
        let mut full_metrics = Vec::new();
        for _ in 0..4 {
            full_metrics.extend(full.epoch().unwrap());
        }

        // interrupted after two epochs
        let mut first = Trainer::new(cfg.clone(), &ds).unwrap();
        first.epoch().unwrap();
        first.epoch().unwrap();
        let ckpt = dir.path().join("mid.ckpt");
        first.save(&ckpt).unwrap();
        let mut second = Trainer::resume(cfg, &ds, &ckpt).unwrap();
        let mut tail = Vec::new();
        tail.extend(second.epoch().unwrap());
        tail.extend(second.epoch().unwrap());

        assert_eq!(&full_metrics[full_metrics.len() - tail.len()..], &tail[..]);
        // parameters end up bitwise identical
        assert_eq!(full.state.params, second.state.params);
    }

    #[test]
    fn pretrained_encoder_is_frozen_and_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(&dir.path().join("ds"));
        let t = Trainer::new(tiny_train_cfg(), &ds).unwrap();
        let clip = &t.exo[0];
        let a = t.embed.embed(clip).unwrap();
        let b = t.embed.embed(clip).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_pretrain_epochs_gives_random_frozen_encoder() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(&dir.path().join("ds"));
        let mut cfg = tiny_train_cfg();
        cfg.g_pretrain_epochs = 0;
        let t = Trainer::new(cfg, &ds).unwrap();
        // still usable
        let e = t.embed.embed(&t.ego[0]).unwrap();
        assert_eq!(e.len(), t.embed.cfg.dim);
    }

    #[test]
    fn embed_separates_classes_after_pretraining() {
        let dir = tempfile::tempdir().unwrap();
        let dcfg = DatasetConfig {
            classes: 4,
            clips_per_class: 6,
            val_clips_per_class: 3,
            frames: 4,
            height: 16,
            width: 16,
            paired: false,
            seed: 21,
        };
        let ds = Dataset::generate(&dcfg, &dir.path().join("ds"), false).unwrap();
        let exo: Vec<VideoClip> = ds
            .clips(TRAIN_SPLIT, Some(View::Exo))
            .unwrap()
            .into_iter()
            .map(|e| ds.load_clip(e).unwrap())
            .collect();
        let mcfg = tiny_train_cfg().model;
        let embed = pretrain_embed(&exo, &mcfg, 12, 4, 0.05, 0.9, 5).unwrap();

        let val: Vec<VideoClip> = ds
            .clips(crate::dataset::VAL_SPLIT, Some(View::Exo))
            .unwrap()
            .into_iter()
            .map(|e| ds.load_clip(e).unwrap())
            .collect();
        let vecs: Vec<(usize, Vec<f32>)> = val
            .iter()
            .map(|c| (c.label, embed.embed(c).unwrap()))
            .collect();
        let dist = |a: &[f32], b: &[f32]| -> f64 {
            a.iter()
                .zip(b)
                .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
                .sum::<f64>()
        };
        let mut intra = (0.0, 0usize);
        let mut inter = (0.0, 0usize);
        for i in 0..vecs.len() {
            for j in i + 1..vecs.len() {
                let d = dist(&vecs[i].1, &vecs[j].1);
                if vecs[i].0 == vecs[j].0 {
                    intra = (intra.0 + d, intra.1 + 1);
                } else {
                    inter = (inter.0 + d, inter.1 + 1);
                }
            }
        }
        let intra_mean = intra.0 / intra.1 as f64;
        let inter_mean = inter.0 / inter.1 as f64;
        assert!(
            intra_mean < inter_mean,
            "intra {intra_mean:.4} vs inter {inter_mean:.4}"
        );
    }

    #[test]
    fn augmentation_is_deterministic_and_off_by_default() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(&dir.path().join("ds"));
        let mut cfg = tiny_train_cfg();
        cfg.augment = true;
        let mut a = Trainer::new(cfg.clone(), &ds).unwrap();
        let mut b = Trainer::new(cfg, &ds).unwrap();
        assert_eq!(a.epoch().unwrap(), b.epoch().unwrap());

        let flipped = flip_clip(&a.exo[0]);
        let double = flip_clip(&flipped);
        assert_eq!(double.frames, a.exo[0].frames);
        let jittered = jitter_clip(&a.exo[0], 0);
        assert_eq!(jittered.frames, a.exo[0].frames);
    }
}
