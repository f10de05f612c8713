//! Evaluation: split metrics with spatial crops, the attention-transfer
//! oracle over the ground-truth warp, the video/attention proportionality
//! report, and the ablation runner.

use std::path::Path;
use std::sync::Mutex;

use rayon::prelude::*;

use crate::dataset::{sha256_hex, write_f32, CsvWriter, Dataset, VAL_SPLIT};
use crate::error::{Error, Result};
use crate::loss::{d_a_value, d_x, DaKind, DxKind, EmbedNet, LossConfig, Pairing};
use crate::metrics::{mean_average_precision, topk_accuracy, MapReport};
use crate::model::{forward_eval, AttentionMap, ModelConfig, ModelParams, ATTN_NORMALIZATION};
use crate::rng::Rng;
use crate::scene::{ground_truth_warp, CellMap, VideoClip, View};
use crate::train::{TrainConfig, Trainer};

#[derive(Debug, Clone)]
pub struct ViewMetrics {
    pub top1: f64,
    pub top5: f64,
    pub map: f64,
    pub per_class_ap: Vec<Option<f64>>,
    pub samples: usize,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub exo: ViewMetrics,
    pub ego: ViewMetrics,
    pub fingerprint: String,
}

impl EvalReport {
    pub fn csv_row(&self, label: &str) -> String {
        format!(
            "{label},{},{},{},{},{},{},{}",
            self.exo.top1,
            self.exo.top5,
            self.exo.map,
            self.ego.top1,
            self.ego.top5,
            self.ego.map,
            self.fingerprint
        )
    }
}

pub const EVAL_CSV_HEADER: &str =
    "cell,top1_exo,top5_exo,map_exo,top1_ego,top5_ego,map_ego,fingerprint";

fn crop_clip(clip: &VideoClip, r0: usize, c0: usize, h: usize, w: usize) -> VideoClip {
    let mut frames = Vec::with_capacity(clip.t * h * w * clip.c);
    let mut depth = Vec::with_capacity(clip.t * h * w);
    for t in 0..clip.t {
        for r in r0..r0 + h {
            for c in c0..c0 + w {
                let px = ((t * clip.h + r) * clip.w + c) * clip.c;
                frames.extend_from_slice(&clip.frames[px..px + clip.c]);
                depth.push(clip.depth[(t * clip.h + r) * clip.w + c]);
            }
        }
    }
    VideoClip {
        frames,
        depth,
        t: clip.t,
        h,
        w,
        c: clip.c,
        view: clip.view,
        label: clip.label,
        scene_seed: clip.scene_seed,
        rigs: clip.rigs.clone(),
    }
}

/// Crop offsets for the crop-averaged protocol: center only, or top-left,
/// center and bottom-right.
fn crop_offsets(clip_h: usize, clip_w: usize, h: usize, w: usize, crops: usize) -> Result<Vec<(usize, usize)>> {
    if clip_h < h || clip_w < w {
        return Err(Error::Config(format!(
            "eval: clip {clip_h}x{clip_w} smaller than model input {h}x{w}"
        )));
    }
    let center = ((clip_h - h) / 2, (clip_w - w) / 2);
    match crops {
        1 => Ok(vec![center]),
        3 => Ok(vec![(0, 0), center, (clip_h - h, clip_w - w)]),
        other => Err(Error::Config(format!("eval: crops must be 1 or 3, got {other}"))),
    }
}

/// Crop-averaged class scores for one clip.
pub fn clip_scores(
    params: &ModelParams<f32>,
    clip: &VideoClip,
    cfg: &ModelConfig,
    crops: usize,
) -> Result<Vec<f64>> {
    let offsets = crop_offsets(clip.h, clip.w, cfg.height, cfg.width, crops)?;
    let classes = cfg.classes(clip.view);
    let mut acc = vec![0.0f64; classes];
    for (r0, c0) in &offsets {
        let cropped = if clip.h == cfg.height && clip.w == cfg.width {
            clip.clone()
        } else {
            crop_clip(clip, *r0, *c0, cfg.height, cfg.width)
        };
        let (probs, _) = forward_eval(params, &cropped, cfg, clip.view)?;
        for (a, p) in acc.iter_mut().zip(&probs) {
            *a += *p as f64;
        }
    }
    for a in acc.iter_mut() {
        *a /= offsets.len() as f64;
    }
    Ok(acc)
}

fn view_metrics(
    params: &ModelParams<f32>,
    clips: &[VideoClip],
    cfg: &ModelConfig,
    crops: usize,
    view: View,
) -> Result<ViewMetrics> {
    let classes = cfg.classes(view);
    let mut scores = Vec::with_capacity(clips.len() * classes);
    let mut labels = Vec::with_capacity(clips.len());
    let mut positives = vec![false; clips.len() * classes];
    for (i, clip) in clips.iter().enumerate() {
        let s = clip_scores(params, clip, cfg, crops)?;
        scores.extend_from_slice(&s);
        labels.push(clip.label);
        positives[i * classes + clip.label] = true;
    }
    let top1 = topk_accuracy(&scores, &labels, classes, 1)?;
    let top5 = topk_accuracy(&scores, &labels, classes, 5.min(classes))?;
    let MapReport { map, per_class, .. } =
        mean_average_precision(&scores, &positives, clips.len(), classes)?;
    Ok(ViewMetrics {
        top1,
        top5,
        map,
        per_class_ap: per_class,
        samples: clips.len(),
    })
}

/// Evaluate both views of a split with the crop-averaged protocol.
pub fn eval_split(
    params: &ModelParams<f32>,
    dataset: &Dataset,
    split: &str,
    cfg: &ModelConfig,
    crops: usize,
) -> Result<EvalReport> {
    let by_view = |view: View| -> Result<ViewMetrics> {
        let clips: Vec<VideoClip> = dataset
            .clips(split, Some(view))?
            .into_iter()
            .map(|e| dataset.load_clip(e))
            .collect::<Result<_>>()?;
        if clips.is_empty() {
            return Err(Error::Data(format!("split {split:?} has no {view:?} clips")));
        }
        view_metrics(params, &clips, cfg, crops, view)
    };
    let exo = by_view(View::Exo)?;
    let ego = by_view(View::Ego)?;
    let fingerprint = sha256_hex(
        format!(
            "{}|{split}|{crops}",
            serde_json::to_string(cfg).map_err(|e| Error::Format(e.to_string()))?
        )
        .as_bytes(),
    );
    Ok(EvalReport {
        exo,
        ego,
        fingerprint,
    })
}

// ---- attention-transfer oracle ------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WarpMass {
    /// Drop attention mass on cells without a correspondence (default).
    Discard,
    /// Spread unmapped mass uniformly over the mapped cells first.
    Redistribute,
}

#[derive(Debug, Clone)]
pub struct WarpReport {
    pub oracle_mean: f64,
    pub null_mean: f64,
    pub null_std: f64,
    pub clips_used: usize,
    pub clips_skipped: usize,
}

/// Transport an attention map through a correspondence field: each target
/// cell receives the mean attention of its source cells; comparison is then
/// restricted to the hit targets. Returns (warped, true-restricted), both
/// renormalized over the hit subset, or None when nothing maps.
fn warp_restrict(
    field_targets: &[Option<usize>],
    exo_map: &[f32],
    ego_map: &[f32],
    mass: WarpMass,
) -> Option<(Vec<f32>, Vec<f32>)> {
    let n = exo_map.len();
    let mapped_sources: Vec<usize> = (0..n).filter(|&i| field_targets[i].is_some()).collect();
    if mapped_sources.is_empty() {
        return None;
    }
    let mut source_mass: Vec<f64> = exo_map.iter().map(|&v| v as f64).collect();
    if mass == WarpMass::Redistribute {
        let unmapped: f64 = (0..n)
            .filter(|i| field_targets[*i].is_none())
            .map(|i| source_mass[i])
            .sum();
        let bump = unmapped / mapped_sources.len() as f64;
        for &i in &mapped_sources {
            source_mass[i] += bump;
        }
    }
    let mut warped_acc = vec![0.0f64; n];
    let mut counts = vec![0usize; n];
    for &i in &mapped_sources {
        let j = field_targets[i].unwrap();
        warped_acc[j] += source_mass[i];
        counts[j] += 1;
    }
    let hit: Vec<usize> = (0..n).filter(|&j| counts[j] > 0).collect();
    let mut warped: Vec<f32> = hit
        .iter()
        .map(|&j| (warped_acc[j] / counts[j] as f64) as f32)
        .collect();
    let mut truth: Vec<f32> = hit.iter().map(|&j| ego_map[j]).collect();
    let ws: f32 = warped.iter().sum();
    let ts: f32 = truth.iter().sum();
    if ws <= 0.0 || ts <= 0.0 {
        return None;
    }
    for v in warped.iter_mut() {
        *v /= ws;
    }
    for v in truth.iter_mut() {
        *v /= ts;
    }
    Some((warped, truth))
}

fn flat_targets(field: &crate::scene::CorrespondenceField) -> Vec<Option<usize>> {
    let mut out = Vec::with_capacity(field.cells.len());
    for t in 0..field.tgrid {
        for r in 0..field.rows {
            for c in 0..field.cols {
                out.push(match field.at(t, r, c) {
                    CellMap::Mapped { row, col } => {
                        Some((t * field.rows + row) * field.cols + col)
                    }
                    _ => None,
                });
            }
        }
    }
    out
}

fn sym_kl(warped: &[f32], truth: &[f32], lcfg: &LossConfig) -> Result<f64> {
    let mk = |v: &[f32]| AttentionMap::<f32> {
        tgrid: 1,
        rows: 1,
        cols: v.len(),
        values: v.to_vec(),
        normalization: ATTN_NORMALIZATION,
    };
    let cfg = LossConfig {
        da: DaKind::SymKl,
        ..lcfg.clone()
    };
    d_a_value(&mk(warped), &mk(truth), &cfg)
}

/// Warp the exocentric attention through the ground-truth correspondence of
/// each paired clip and measure its agreement with the true egocentric
/// attention, against a permutation null.
pub fn remark2_oracle(
    params: &ModelParams<f32>,
    dataset: &Dataset,
    split: &str,
    mcfg: &ModelConfig,
    lcfg: &LossConfig,
    mass: WarpMass,
    max_clips: usize,
    seed: u64,
) -> Result<WarpReport> {
    let pairs = dataset.paired_entries(split)?;
    let mut oracle_vals = Vec::new();
    let mut null_vals = Vec::new();
    let mut skipped = 0usize;
    let mut rng = Rng::stream(seed, 0x9a11);
    for (exo_entry, ego_entry) in pairs.into_iter().take(max_clips) {
        let exo = dataset.load_clip(exo_entry)?;
        let ego = dataset.load_clip(ego_entry)?;
        let field = ground_truth_warp(&exo, &ego, mcfg.patch_k, mcfg.patch_p)?;
        let targets = flat_targets(&field);
        let mapped: Vec<usize> = (0..targets.len())
            .filter(|&i| targets[i].is_some())
            .collect();
        if mapped.is_empty() {
            skipped += 1;
            continue;
        }
        let (_, exo_maps) = forward_eval(params, &exo, mcfg, View::Exo)?;
        let (_, ego_maps) = forward_eval(params, &ego, mcfg, View::Ego)?;

        // permutation null: shuffle the targets among the mapped sources
        let mut null_targets = targets.clone();
        let perm = rng.permutation(mapped.len());
        for (slot, &src) in mapped.iter().enumerate() {
            null_targets[src] = targets[mapped[perm[slot]]];
        }

        let mut clip_oracle = Vec::new();
        let mut clip_null = Vec::new();
        for &layer in &lcfg.layers {
            let exo_map = &exo_maps[layer - 1].values;
            let ego_map = &ego_maps[layer - 1].values;
            if let Some((w, t)) = warp_restrict(&targets, exo_map, ego_map, mass) {
                clip_oracle.push(sym_kl(&w, &t, lcfg)?);
            }
            if let Some((w, t)) = warp_restrict(&null_targets, exo_map, ego_map, mass) {
                clip_null.push(sym_kl(&w, &t, lcfg)?);
            }
        }
        if clip_oracle.is_empty() || clip_null.is_empty() {
            skipped += 1;
            continue;
        }
        oracle_vals.push(clip_oracle.iter().sum::<f64>() / clip_oracle.len() as f64);
        null_vals.push(clip_null.iter().sum::<f64>() / clip_null.len() as f64);
    }
    if oracle_vals.is_empty() {
        return Err(Error::Data("attention oracle: no usable paired clips".into()));
    }
    let n = oracle_vals.len() as f64;
    let oracle_mean = oracle_vals.iter().sum::<f64>() / n;
    let null_mean = null_vals.iter().sum::<f64>() / n;
    let null_var = null_vals
        .iter()
        .map(|v| (v - null_mean) * (v - null_mean))
        .sum::<f64>()
        / n;
    Ok(WarpReport {
        oracle_mean,
        null_mean,
        null_std: null_var.sqrt(),
        clips_used: oracle_vals.len(),
        clips_skipped: skipped,
    })
}

// ---- proportionality ------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ProportionalityReport {
    pub pearson: Option<f64>,
    /// Least-squares slope of d_a against d_x, through the origin.
    pub slope: Option<f64>,
    /// Empirical linear scale: 1 / slope.
    pub alpha_hat: Option<f64>,
    pub pairs: usize,
}

/// Correlation and through-origin slope between paired (d_x, d_a) samples.
pub fn fit_proportionality(dx: &[f64], da: &[f64]) -> ProportionalityReport {
    let n = dx.len() as f64;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n;
    let (mx, ma) = (mean(dx), mean(da));
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut va = 0.0;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (&x, &a) in dx.iter().zip(da) {
        cov += (x - mx) * (a - ma);
        vx += (x - mx) * (x - mx);
        va += (a - ma) * (a - ma);
        sxy += x * a;
        sxx += x * x;
    }
    let pearson = if vx > 0.0 && va > 0.0 {
        Some(cov / (vx.sqrt() * va.sqrt()))
    } else {
        None
    };
    let slope = if sxx > 0.0 { Some(sxy / sxx) } else { None };
    let alpha_hat = slope.and_then(|s| if s != 0.0 { Some(1.0 / s) } else { None });
    ProportionalityReport {
        pearson,
        slope,
        alpha_hat,
        pairs: dx.len(),
    }
}

/// Sample unpaired cross-view pairs from a split and correlate the video
/// metric with the attention metric (mean over the selected layers).
pub fn proportionality_report(
    params: &ModelParams<f32>,
    embed: Option<&EmbedNet<f32>>,
    dataset: &Dataset,
    split: &str,
    mcfg: &ModelConfig,
    lcfg: &LossConfig,
    n_pairs: usize,
    seed: u64,
) -> Result<ProportionalityReport> {
    if n_pairs < 100 {
        return Err(Error::Config(format!(
            "proportionality needs at least 100 pairs, got {n_pairs}"
        )));
    }
    let exo: Vec<VideoClip> = dataset
        .clips(split, Some(View::Exo))?
        .into_iter()
        .map(|e| dataset.load_clip(e))
        .collect::<Result<_>>()?;
    let ego: Vec<VideoClip> = dataset
        .clips(split, Some(View::Ego))?
        .into_iter()
        .map(|e| dataset.load_clip(e))
        .collect::<Result<_>>()?;
    if exo.is_empty() || ego.is_empty() {
        return Err(Error::Data("proportionality: empty split".into()));
    }
    // cache attention maps per clip
    let exo_maps: Vec<Vec<AttentionMap<f32>>> = exo
        .iter()
        .map(|c| forward_eval(params, c, mcfg, View::Exo).map(|r| r.1))
        .collect::<Result<_>>()?;
    let ego_maps: Vec<Vec<AttentionMap<f32>>> = ego
        .iter()
        .map(|c| forward_eval(params, c, mcfg, View::Ego).map(|r| r.1))
        .collect::<Result<_>>()?;

    let mut rng = Rng::stream(seed, 0x9409);
    let mut dx_vals = Vec::with_capacity(n_pairs);
    let mut da_vals = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let i = rng.below(exo.len());
        let j = rng.below(ego.len());
        dx_vals.push(d_x(&exo[i], &ego[j], lcfg, embed)?);
        let mut acc = 0.0;
        for &layer in &lcfg.layers {
            acc += d_a_value(&exo_maps[i][layer - 1], &ego_maps[j][layer - 1], lcfg)?;
        }
        da_vals.push(acc / lcfg.layers.len() as f64);
    }
    Ok(fit_proportionality(&dx_vals, &da_vals))
}

// ---- ablation runner -------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationKind {
    Alpha,
    Metric,
    Layers,
    Lambda,
    Pairing,
}

impl std::str::FromStr for AblationKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpha" => Ok(AblationKind::Alpha),
            "metric" => Ok(AblationKind::Metric),
            "layers" => Ok(AblationKind::Layers),
            "lambda" => Ok(AblationKind::Lambda),
            "pairing" => Ok(AblationKind::Pairing),
            other => Err(Error::Config(format!("unknown ablation kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AblationCell {
    pub label: String,
    pub cfg: TrainConfig,
}

/// Build the cell list for a sweep. Every cell shares the base config and
/// seed; exactly one parameter differs.
pub fn ablation_cells(
    kind: AblationKind,
    grid: Option<&str>,
    base: &TrainConfig,
) -> Result<Vec<AblationCell>> {
    let floats = |spec: &str| -> Result<Vec<f64>> {
        spec.split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Config(format!("bad grid value {s:?}: {e}")))
            })
            .collect()
    };
    let mut cells = Vec::new();
    match kind {
        AblationKind::Alpha => {
            let grid = grid.unwrap_or("0,0.25,0.5,0.75,1.0,1.5,2.0");
            for v in floats(grid)? {
                let mut cfg = base.clone();
                cfg.loss.alpha = v;
                cells.push(AblationCell {
                    label: format!("alpha={v}"),
                    cfg,
                });
            }
        }
        AblationKind::Lambda => {
            let grid = grid.ok_or_else(|| Error::Config("lambda sweep needs a grid".into()))?;
            for v in floats(grid)? {
                let mut cfg = base.clone();
                cfg.loss.lambda = v;
                cells.push(AblationCell {
                    label: format!("lambda={v}"),
                    cfg,
                });
            }
        }
        AblationKind::Metric => {
            for (dx, dxl) in [(DxKind::Pixel, "pixel"), (DxKind::Embed, "embed")] {
                for (da, dal) in [(DaKind::L2, "l2"), (DaKind::SymKl, "symkl")] {
                    let mut cfg = base.clone();
                    cfg.loss.dx = dx;
                    cfg.loss.da = da;
                    cells.push(AblationCell {
                        label: format!("dx={dxl},da={dal}"),
                        cfg,
                    });
                }
            }
        }
        AblationKind::Layers => {
            let total = base.model.layers;
            let mut seen = Vec::new();
            for k in 1..=4usize {
                let hi = ((k * total) as f64 / 4.0).ceil() as usize;
                let hi = hi.clamp(1, total);
                if seen.contains(&hi) {
                    continue;
                }
                seen.push(hi);
                let mut cfg = base.clone();
                cfg.loss.layers = (1..=hi).collect();
                cells.push(AblationCell {
                    label: format!("layers=1-{hi}"),
                    cfg,
                });
            }
        }
        AblationKind::Pairing => {
            for (p, label) in [(Pairing::Matched, "matched"), (Pairing::All, "all")] {
                let mut cfg = base.clone();
                cfg.loss.pairing = p;
                cells.push(AblationCell {
                    label: format!("pairing={label}"),
                    cfg,
                });
            }
        }
    }
    if cells.is_empty() {
        return Err(Error::Config("empty ablation grid".into()));
    }
    Ok(cells)
}

/// Every cell must equal the base once the swept field is reset: the sweep
/// touches exactly one knob.
pub fn verify_cells_single_knob(
    kind: AblationKind,
    cells: &[AblationCell],
    base: &TrainConfig,
) -> Result<()> {
    for cell in cells {
        let mut normalized = cell.cfg.clone();
        match kind {
            AblationKind::Alpha => normalized.loss.alpha = base.loss.alpha,
            AblationKind::Lambda => normalized.loss.lambda = base.loss.lambda,
            AblationKind::Metric => {
                normalized.loss.dx = base.loss.dx;
                normalized.loss.da = base.loss.da;
            }
            AblationKind::Layers => normalized.loss.layers = base.loss.layers.clone(),
            AblationKind::Pairing => normalized.loss.pairing = base.loss.pairing,
        }
        if normalized != *base {
            return Err(Error::Config(format!(
                "ablation cell {:?} differs from base outside the swept knob",
                cell.label
            )));
        }
    }
    Ok(())
}

pub fn config_fingerprint(cfg: &TrainConfig) -> String {
    sha256_hex(
        serde_json::to_string(cfg)
            .expect("train config serializes")
            .as_bytes(),
    )
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub label: String,
    pub report: EvalReport,
}

/// Train and evaluate every cell (in parallel), appending finished rows to
/// the CSV in grid order so an interrupted sweep leaves a valid prefix.
pub fn run_ablation(
    cells: &[AblationCell],
    dataset: &Dataset,
    crops: usize,
    csv_path: Option<&Path>,
    eval_split_name: &str,
) -> Result<Vec<AblationRow>> {
    let writer = match csv_path {
        Some(p) => Some(Mutex::new((
            CsvWriter::create(p, EVAL_CSV_HEADER)?,
            0usize, // next row to flush
        ))),
        None => None,
    };
    let slots: Mutex<Vec<Option<AblationRow>>> = Mutex::new(vec![None; cells.len()]);

    let results: Result<Vec<()>> = cells
        .par_iter()
        .enumerate()
        .map(|(i, cell)| {
            let mut trainer = Trainer::new(cell.cfg.clone(), dataset)?;
            while trainer.state.epoch < cell.cfg.epochs {
                trainer.epoch()?;
            }
            let mut report = eval_split(
                &trainer.state.params,
                dataset,
                eval_split_name,
                &cell.cfg.model,
                crops,
            )?;
            report.fingerprint = config_fingerprint(&cell.cfg);
            let row = AblationRow {
                label: cell.label.clone(),
                report,
            };
            let mut slots = slots.lock().unwrap();
            slots[i] = Some(row);
            if let Some(writer) = &writer {
                let mut w = writer.lock().unwrap();
                while w.1 < slots.len() {
                    let Some(row) = &slots[w.1] else { break };
                    let line = row.report.csv_row(&row.label);
                    w.0.row(&line)?;
                    w.0.flush()?;
                    w.1 += 1;
                }
            }
            Ok(())
        })
        .collect();
    results?;

    let rows: Vec<AblationRow> = slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("all cells finished"))
        .collect();
    Ok(rows)
}

/// Write per-layer attention maps of every clip in a split as raw f32 grids
/// next to the dataset's own float format. Returns the file count.
pub fn dump_attention(
    params: &ModelParams<f32>,
    dataset: &Dataset,
    split: &str,
    mcfg: &ModelConfig,
    layers: &[usize],
    out_dir: &Path,
) -> Result<usize> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut count = 0usize;
    for entry in dataset.split(split)? {
        let clip = dataset.load_clip(entry)?;
        let (_, maps) = forward_eval(params, &clip, mcfg, clip.view)?;
        for &layer in layers {
            if layer == 0 || layer > maps.len() {
                return Err(Error::Config(format!(
                    "dump-attention: layer {layer} out of range 1..={}",
                    maps.len()
                )));
            }
            let map = &maps[layer - 1];
            let path = out_dir.join(format!(
                "{}_{}.layer{layer}.attn.f32",
                entry.scene_seed,
                entry.view.tag()
            ));
            write_f32(&path, &map.values)?;
            count += 1;
        }
    }
    Ok(count)
}

pub const DEFAULT_EVAL_SPLIT: &str = VAL_SPLIT;
