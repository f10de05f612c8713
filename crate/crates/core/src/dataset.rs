//! On-disk clip datasets.
//!
//! Layout: one directory per split; clips as raw little-endian f32 in
//! t*h*w*c order (`<scene_seed>_<view>.f32`), depth maps alongside
//! (`<scene_seed>_<view>.depth.f32`), and a `manifest.json` with format tag
//! "cvar-ds/1". Camera rigs are not stored: they are recomputed exactly from
//! the scene seed.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::mix_seed;
use crate::scene::{render, SceneSpec, VideoClip, View, NUM_CLASSES};

pub const FORMAT_TAG: &str = "cvar-ds/1";
pub const TRAIN_SPLIT: &str = "train";
pub const VAL_SPLIT: &str = "val";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetConfig {
    pub classes: usize,
    pub clips_per_class: usize,
    pub val_clips_per_class: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub paired: bool,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            classes: NUM_CLASSES,
            clips_per_class: 25,
            val_clips_per_class: 25,
            frames: 8,
            height: 32,
            width: 32,
            paired: false,
            seed: 1,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.classes > NUM_CLASSES {
            return Err(Error::Config(format!(
                "classes must be in 1..={NUM_CLASSES}, got {}",
                self.classes
            )));
        }
        if self.clips_per_class == 0 || self.frames == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config("dataset dimensions must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ClipEntry {
    pub file: String,
    pub depth_file: String,
    pub scene_seed: u64,
    pub view: View,
    pub label: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub classes: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub paired: bool,
    pub master_seed: u64,
    /// Clips re-drawn because the actor left the frustum too long.
    pub regenerated: usize,
    pub splits: BTreeMap<String, Vec<ClipEntry>>,
}

#[derive(Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

pub fn write_f32(path: &Path, data: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_f32(path: &Path, expected: usize) -> Result<Vec<f32>> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected * 4 {
        return Err(Error::Data(format!(
            "{}: expected {} f32 values, file holds {} bytes",
            path.display(),
            expected,
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Plan entry: one clip to produce.
#[derive(Debug, Clone, Copy)]
struct PlannedClip {
    split: usize, // 0 train, 1 val
    class: usize,
    index: usize,
    view: View,
}

/// Scene seed for a planned clip. Unpaired views draw from disjoint seed
/// streams; paired clips share one stream so both views see the same scene.
fn scene_seed(cfg: &DatasetConfig, p: &PlannedClip, attempt: u64) -> u64 {
    let stream = if cfg.paired {
        2
    } else {
        match p.view {
            View::Exo => 0,
            View::Ego => 1,
        }
    };
    mix_seed(&[
        cfg.seed,
        p.split as u64,
        stream,
        p.class as u64,
        p.index as u64,
        attempt,
    ])
}

struct RenderedClip {
    plan: PlannedClip,
    seed: u64,
    clip: VideoClip,
    attempts: u64,
}

fn produce_clip(cfg: &DatasetConfig, plan: PlannedClip) -> Result<RenderedClip> {
    // degenerate-clip policy: retry with a fresh seed, keep the count
    for attempt in 0..64u64 {
        let seed = scene_seed(cfg, &plan, attempt);
        let scene = SceneSpec::generate(seed, plan.class, cfg.frames)?;
        if cfg.paired {
            // a paired scene must be non-degenerate in both views
            let mut ok = true;
            for view in [View::Exo, View::Ego] {
                let rigs = scene.rigs(view, cfg.height, cfg.width);
                let (_, stats) = render(&scene, &rigs, cfg.height, cfg.width, view)?;
                if stats.degenerate() {
                    ok = false;
                    break;
                }
            }
            if !ok {
                continue;
            }
        }
        let rigs = scene.rigs(plan.view, cfg.height, cfg.width);
        let (clip, stats) = render(&scene, &rigs, cfg.height, cfg.width, plan.view)?;
        if stats.degenerate() {
            continue;
        }
        return Ok(RenderedClip {
            plan,
            seed,
            clip,
            attempts: attempt,
        });
    }
    Err(Error::Data(format!(
        "could not produce a non-degenerate clip for class {} after 64 attempts",
        plan.class
    )))
}

impl Dataset {
    /// Generate a dataset on disk. Fully deterministic: same config, same
    /// bytes. Clips render in parallel; files and manifest are written in a
    /// fixed order.
    pub fn generate(cfg: &DatasetConfig, out: &Path, force: bool) -> Result<Dataset> {
        cfg.validate()?;
        if out.exists() {
            if !force {
                return Err(Error::Config(format!(
                    "output path {} already exists (use force to overwrite)",
                    out.display()
                )));
            }
            fs::remove_dir_all(out).map_err(|e| Error::io(out, e))?;
        }
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

        let mut plan = Vec::new();
        for (split, per_class) in [(0, cfg.clips_per_class), (1, cfg.val_clips_per_class)] {
            for class in 0..cfg.classes {
                for index in 0..per_class {
                    if cfg.paired {
                        plan.push(PlannedClip {
                            split,
                            class,
                            index,
                            view: View::Exo,
                        });
                        plan.push(PlannedClip {
                            split,
                            class,
                            index,
                            view: View::Ego,
                        });
                    } else {
                        for view in [View::Exo, View::Ego] {
                            plan.push(PlannedClip {
                                split,
                                class,
                                index,
                                view,
                            });
                        }
                    }
                }
            }
        }

        let rendered: Result<Vec<RenderedClip>> = plan
            .par_iter()
            .map(|p| produce_clip(cfg, *p))
            .collect();
        let rendered = rendered?;

        let mut splits: BTreeMap<String, Vec<ClipEntry>> = BTreeMap::new();
        splits.insert(TRAIN_SPLIT.to_string(), Vec::new());
        splits.insert(VAL_SPLIT.to_string(), Vec::new());
        let mut regenerated = 0usize;

        for split_name in [TRAIN_SPLIT, VAL_SPLIT] {
            let dir = out.join(split_name);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        for rc in &rendered {
            let split_name = if rc.plan.split == 0 { TRAIN_SPLIT } else { VAL_SPLIT };
            let dir = out.join(split_name);
            let stem = format!("{}_{}", rc.seed, rc.plan.view.tag());
            let file = format!("{split_name}/{stem}.f32");
            let depth_file = format!("{split_name}/{stem}.depth.f32");
            write_f32(&dir.join(format!("{stem}.f32")), &rc.clip.frames)?;
            write_f32(&dir.join(format!("{stem}.depth.f32")), &rc.clip.depth)?;
            regenerated += rc.attempts as usize;
            splits.get_mut(split_name).unwrap().push(ClipEntry {
                file,
                depth_file,
                scene_seed: rc.seed,
                view: rc.plan.view,
                label: rc.plan.class,
            });
        }
        // paired scenes count shared regenerations once per view; halve them
        if cfg.paired {
            regenerated /= 2;
        }

        let manifest = Manifest {
            format: FORMAT_TAG.to_string(),
            classes: cfg.classes,
            frames: cfg.frames,
            height: cfg.height,
            width: cfg.width,
            channels: 3,
            paired: cfg.paired,
            master_seed: cfg.seed,
            regenerated,
            splits,
        };
        let path = out.join("manifest.json");
        let mut bytes = serde_json::to_vec_pretty(&manifest)
            .map_err(|e| Error::Format(format!("manifest encode: {e}")))?;
        bytes.push(b'\n');
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;

        Ok(Dataset {
            root: out.to_path_buf(),
            manifest,
        })
    }

    pub fn open(dir: &Path) -> Result<Dataset> {
        let path = dir.join("manifest.json");
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Format(format!("manifest decode: {e}")))?;
        if manifest.format != FORMAT_TAG {
            return Err(Error::Format(format!(
                "dataset format {:?} unsupported, expected {FORMAT_TAG:?}",
                manifest.format
            )));
        }
        Ok(Dataset {
            root: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn split(&self, name: &str) -> Result<&[ClipEntry]> {
        self.manifest
            .splits
            .get(name)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::Data(format!("dataset has no split {name:?}")))
    }

    pub fn clips(&self, split: &str, view: Option<View>) -> Result<Vec<&ClipEntry>> {
        Ok(self
            .split(split)?
            .iter()
            .filter(|e| view.map_or(true, |v| e.view == v))
            .collect())
    }

    /// Load a clip with its depth maps; camera rigs are rebuilt from the
    /// scene seed, which is exact by construction.
    pub fn load_clip(&self, entry: &ClipEntry) -> Result<VideoClip> {
        let m = &self.manifest;
        let frames = read_f32(
            &self.root.join(&entry.file),
            m.frames * m.height * m.width * m.channels,
        )?;
        let depth = read_f32(
            &self.root.join(&entry.depth_file),
            m.frames * m.height * m.width,
        )?;
        let scene = SceneSpec::generate(entry.scene_seed, entry.label, m.frames)?;
        let rigs = scene.rigs(entry.view, m.height, m.width);
        Ok(VideoClip {
            frames,
            depth,
            t: m.frames,
            h: m.height,
            w: m.width,
            c: m.channels,
            view: entry.view,
            label: entry.label,
            scene_seed: entry.scene_seed,
            rigs,
        })
    }

    /// Paired (exo, ego) entries of the same scene, in scene-seed order.
    pub fn paired_entries(&self, split: &str) -> Result<Vec<(&ClipEntry, &ClipEntry)>> {
        if !self.manifest.paired {
            return Err(Error::Data("dataset is not paired".into()));
        }
        let entries = self.split(split)?;
        let mut by_seed: BTreeMap<u64, (Option<&ClipEntry>, Option<&ClipEntry>)> = BTreeMap::new();
        for e in entries {
            let slot = by_seed.entry(e.scene_seed).or_default();
            match e.view {
                View::Exo => slot.0 = Some(e),
                View::Ego => slot.1 = Some(e),
            }
        }
        by_seed
            .values()
            .map(|(a, b)| match (a, b) {
                (Some(a), Some(b)) => Ok((*a, *b)),
                _ => Err(Error::Data("paired dataset has an unmatched scene".into())),
            })
            .collect()
    }

    pub fn manifest_bytes(&self) -> Result<Vec<u8>> {
        let path = self.root.join("manifest.json");
        fs::read(&path).map_err(|e| Error::io(&path, e))
    }
}

/// Hex sha256 of a byte string; used to fingerprint manifests and reports.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(bytes);
    let out = h.finalize();
    let mut s = String::with_capacity(64);
    for b in out {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Append-only file writer used for metrics and ablation tables.
pub struct CsvWriter {
    file: fs::File,
    path: PathBuf,
}

impl CsvWriter {
    pub fn create(path: &Path, header: &str) -> Result<CsvWriter> {
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(file, "{header}").map_err(|e| Error::io(path, e))?;
        Ok(CsvWriter {
            file,
            path: path.to_path_buf(),
        })
    }

    pub fn row(&mut self, row: &str) -> Result<()> {
        writeln!(self.file, "{row}").map_err(|e| Error::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.file.flush().map_err(|e| Error::io(&self.path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> DatasetConfig {
        DatasetConfig {
            classes: 4,
            clips_per_class: 2,
            val_clips_per_class: 1,
            frames: 8,
            height: 32,
            width: 32,
            paired: false,
            seed: 7,
        }
    }

    #[test]
    fn generate_produces_expected_counts() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("ds");
        let ds = Dataset::generate(&tiny_cfg(), &out, false).unwrap();
        let train = ds.split(TRAIN_SPLIT).unwrap();
        assert_eq!(train.len(), 4 * 2 * 2); // classes * clips * views
        let exo = ds.clips(TRAIN_SPLIT, Some(View::Exo)).unwrap();
        let ego = ds.clips(TRAIN_SPLIT, Some(View::Ego)).unwrap();
        assert_eq!(exo.len(), 8);
        assert_eq!(ego.len(), 8);
        // label balance: exact per class
        for class in 0..4 {
            assert_eq!(exo.iter().filter(|e| e.label == class).count(), 2);
        }
        // unpaired: exo and ego scene seeds are disjoint
        for e in &exo {
            assert!(ego.iter().all(|g| g.scene_seed != e.scene_seed));
        }
    }

    #[test]
    fn regenerating_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg();
        let a = Dataset::generate(&cfg, &dir.path().join("a"), false).unwrap();
        let b = Dataset::generate(&cfg, &dir.path().join("b"), false).unwrap();
        assert_eq!(
            sha256_hex(&a.manifest_bytes().unwrap()),
            sha256_hex(&b.manifest_bytes().unwrap())
        );
        for (ea, eb) in a
            .split(TRAIN_SPLIT)
            .unwrap()
            .iter()
            .zip(b.split(TRAIN_SPLIT).unwrap())
        {
            let fa = fs::read(a.root.join(&ea.file)).unwrap();
            let fb = fs::read(b.root.join(&eb.file)).unwrap();
            assert_eq!(fa, fb);
        }
    }

    #[test]
    fn existing_path_needs_force() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("ds");
        Dataset::generate(&tiny_cfg(), &out, false).unwrap();
        assert!(Dataset::generate(&tiny_cfg(), &out, false).is_err());
        Dataset::generate(&tiny_cfg(), &out, true).unwrap();
    }

    #[test]
    fn paired_mode_matches_scenes_one_to_one() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg();
        cfg.paired = true;
        let ds = Dataset::generate(&cfg, &dir.path().join("ds"), false).unwrap();
        let pairs = ds.paired_entries(TRAIN_SPLIT).unwrap();
        assert_eq!(pairs.len(), 8);
        for (exo, ego) in pairs {
            assert_eq!(exo.scene_seed, ego.scene_seed);
            assert_eq!(exo.label, ego.label);
            assert_eq!(exo.view, View::Exo);
            assert_eq!(ego.view, View::Ego);
        }
    }

    #[test]
    fn load_round_trips_clip_values() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::generate(&tiny_cfg(), &dir.path().join("ds"), false).unwrap();
        let entry = ds.clips(TRAIN_SPLIT, Some(View::Ego)).unwrap()[0].clone();
        let clip = ds.load_clip(&entry).unwrap();
        assert_eq!(clip.numel(), 8 * 32 * 32 * 3);
        assert!(clip.frames.iter().all(|&v| (0.0..=1.0).contains(&v)));
        // rigs rebuilt from the seed match a fresh scene build
        let scene = SceneSpec::generate(entry.scene_seed, entry.label, 8).unwrap();
        let rigs = scene.rigs(View::Ego, 32, 32);
        assert_eq!(clip.rigs.len(), rigs.len());
        assert_eq!(clip.rigs[3], rigs[3]);
    }

    #[test]
    fn open_rejects_other_format_versions() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("ds");
        Dataset::generate(&tiny_cfg(), &out, false).unwrap();
        let path = out.join("manifest.json");
        let txt = fs::read_to_string(&path)
            .unwrap()
            .replace("cvar-ds/1", "cvar-ds/0");
        fs::write(&path, txt).unwrap();
        let err = Dataset::open(&out).unwrap_err();
        assert!(err.to_string().contains("cvar-ds/0"));
    }
}
