//! Procedural two-camera scenes.
//!
//! A scene is an articulated point actor (5-9 colored body points) moving on
//! a textured ground plane among static landmarks. One elevated camera
//! observes from outside; a second camera rides on the actor's head. Frames
//! are produced by point-splat rendering with a z-buffer, so every pixel has
//! closed-form geometry and the view-to-view correspondence can be computed
//! exactly from depth maps and rigs.

use crate::camera::{vadd, vscale, CameraRig, Mat3, Vec3};
use crate::error::{Error, Result};
use crate::rng::{mix_seed, Rng};

pub const NEAR_PLANE: f64 = 0.15;
/// Relative depth tolerance for the occlusion test in the warp.
pub const DEPTH_TOLERANCE: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Exo,
    Ego,
}

impl View {
    pub fn tag(self) -> &'static str {
        match self {
            View::Exo => "exo",
            View::Ego => "ego",
        }
    }
}

impl std::str::FromStr for View {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exo" => Ok(View::Exo),
            "ego" => Ok(View::Ego),
            other => Err(Error::Config(format!("unknown view tag {other:?}"))),
        }
    }
}

/// Number of articulation patterns (action classes).
pub const NUM_CLASSES: usize = 8;

#[derive(Debug, Clone, Copy)]
pub struct Landmark {
    pub pos: Vec3,
    pub color: [f32; 3],
    pub radius: f64,
}

/// One renderable point.
#[derive(Debug, Clone, Copy)]
struct SplatPoint {
    pos: Vec3,
    color: [f32; 3],
    radius: f64,
}

/// Everything needed to reproduce a clip: actor path and articulation
/// pattern, landmark layout, both camera placements, and the seed that drew
/// them.
#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub seed: u64,
    pub class: usize,
    pub frames: usize,
    // actor
    pub start: Vec3,
    pub heading: f64,
    pub speed: f64,
    pub phase: f64,
    pub freq: f64,
    pub scale: f64,
    pub joint_colors: [[f32; 3]; 8],
    // scene content
    pub landmarks: Vec<Landmark>,
    pub ground_half_extent: f64,
    pub ground_spacing: f64,
    // cameras
    pub exo_eye: Vec3,
    pub exo_focal: f64,
    pub ego_offset: Vec3,
    pub ego_look_ahead: f64,
    pub ego_focal: f64,
    pub ego_shake: f64,
}

/// A rendered clip plus its per-frame geometry.
#[derive(Debug, Clone)]
pub struct VideoClip {
    pub frames: Vec<f32>, // t*h*w*c, values in [0,1]
    pub depth: Vec<f32>,  // t*h*w, 0.0 = no surface
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub view: View,
    pub label: usize,
    pub scene_seed: u64,
    pub rigs: Vec<CameraRig>,
}

impl VideoClip {
    pub fn numel(&self) -> usize {
        self.t * self.h * self.w * self.c
    }

    pub fn pixel(&self, t: usize, r: usize, c: usize) -> [f32; 3] {
        let base = ((t * self.h + r) * self.w + c) * self.c;
        [
            self.frames[base],
            self.frames[base + 1],
            self.frames[base + 2],
        ]
    }

    pub fn depth_at(&self, t: usize, r: usize, c: usize) -> Option<f64> {
        let d = self.depth[(t * self.h + r) * self.w + c];
        if d > 0.0 {
            Some(d as f64)
        } else {
            None
        }
    }

    /// Depth at continuous image coordinates, bilinear over the four
    /// surrounding pixel centers. Falls back to the nearest pixel when any
    /// neighbor is empty (surface borders).
    pub fn depth_bilinear(&self, t: usize, u: f64, v: f64) -> Option<f64> {
        let x = u - 0.5;
        let y = v - 0.5;
        let c0 = x.floor();
        let r0 = y.floor();
        let fx = x - c0;
        let fy = y - r0;
        let (r0, c0) = (r0 as isize, c0 as isize);
        let mut corners = [0.0f64; 4];
        let mut ok = true;
        for (i, (dr, dc)) in [(0, 0), (0, 1), (1, 0), (1, 1)].iter().enumerate() {
            let r = r0 + dr;
            let c = c0 + dc;
            if r < 0 || c < 0 || r as usize >= self.h || c as usize >= self.w {
                ok = false;
                break;
            }
            match self.depth_at(t, r as usize, c as usize) {
                Some(d) => corners[i] = d,
                None => {
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            let top = corners[0] * (1.0 - fx) + corners[1] * fx;
            let bot = corners[2] * (1.0 - fx) + corners[3] * fx;
            Some(top * (1.0 - fy) + bot * fy)
        } else {
            let r = (v.floor() as usize).min(self.h - 1);
            let c = (u.floor() as usize).min(self.w - 1);
            self.depth_at(t, r, c)
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RenderStats {
    /// Frames in which at least one actor point was inside the frustum.
    pub actor_visible_frames: usize,
    pub frames: usize,
}

impl RenderStats {
    /// Degenerate when the actor is out of view for more than half the clip.
    pub fn degenerate(&self) -> bool {
        self.actor_visible_frames * 2 < self.frames
    }
}

impl SceneSpec {
    /// Draw a scene from a seed. The articulation class is part of the spec,
    /// not the draw, so class balance is exact.
    pub fn generate(seed: u64, class: usize, frames: usize) -> Result<SceneSpec> {
        if class >= NUM_CLASSES {
            return Err(Error::Config(format!(
                "class id {class} out of range (0..{NUM_CLASSES})"
            )));
        }
        let mut rng = Rng::stream(seed, 0x5ce,);
        let heading = rng.range(0.0, std::f64::consts::TAU);
        let start_r = rng.range(0.0, 0.7);
        let start_a = rng.range(0.0, std::f64::consts::TAU);
        let start = [start_r * start_a.cos(), 0.0, start_r * start_a.sin()];
        let speed = rng.range(0.2, 0.8);
        let phase = rng.range(0.0, std::f64::consts::TAU);
        let freq = rng.range(1.0, 2.0);
        let scale = rng.range(0.9, 1.1);

        // fixed joint palette with mild per-scene jitter; bright parts track well
        let base: [[f32; 3]; 8] = [
            [0.95, 0.25, 0.20], // head
            [0.95, 0.80, 0.15], // l shoulder
            [0.90, 0.55, 0.10], // r shoulder
            [0.20, 0.95, 0.30], // l hand
            [0.15, 0.65, 0.95], // r hand
            [0.85, 0.20, 0.85], // pelvis
            [0.60, 0.95, 0.90], // l foot
            [0.95, 0.90, 0.70], // r foot
        ];
        let mut joint_colors = base;
        for c in joint_colors.iter_mut() {
            for ch in c.iter_mut() {
                *ch = (*ch + rng.range(-0.05, 0.05) as f32).clamp(0.05, 1.0);
            }
        }

        let n_landmarks = 5 + rng.below(5);
        let landmarks = (0..n_landmarks)
            .map(|_| Landmark {
                pos: [rng.range(-2.6, 2.6), rng.range(0.05, 1.3), rng.range(-2.6, 2.6)],
                color: [
                    rng.range(0.3, 1.0) as f32,
                    rng.range(0.3, 1.0) as f32,
                    rng.range(0.3, 1.0) as f32,
                ],
                radius: rng.range(0.05, 0.12),
            })
            .collect();

        // exo: elevated follow-cam behind the actor, 30-60 degree pitch,
        // aimed past the actor so both views share the forward ground
        let elevation = rng.range(30f64.to_radians(), 60f64.to_radians());
        let azimuth = heading + std::f64::consts::PI + rng.range(-0.35, 0.35);
        let dist = rng.range(3.6, 5.0);
        let exo_eye = [
            start[0] + dist * elevation.cos() * azimuth.cos(),
            dist * elevation.sin(),
            start[2] + dist * elevation.cos() * azimuth.sin(),
        ];

        Ok(SceneSpec {
            seed,
            class,
            frames,
            start,
            heading,
            speed,
            phase,
            freq,
            scale,
            joint_colors,
            landmarks,
            ground_half_extent: 4.0,
            ground_spacing: 0.34,
            exo_eye,
            exo_focal: rng.range(40.0, 48.0),
            ego_offset: [0.0, 0.10, 0.04],
            ego_look_ahead: rng.range(0.9, 1.3),
            ego_focal: rng.range(11.5, 13.0),
            ego_shake: rng.range(0.01, 0.035),
        })
    }

    /// Actor ground position at clip time tau in [0,1).
    fn actor_pos(&self, tau: f64) -> Vec3 {
        let dir = [self.heading.cos(), 0.0, self.heading.sin()];
        let sway = 0.08 * (std::f64::consts::TAU * (tau + self.phase)).sin();
        let side = [-dir[2], 0.0, dir[0]];
        vadd(
            vadd(self.start, vscale(dir, self.speed * tau)),
            vscale(side, sway),
        )
    }

    /// Body points for frame time tau: local articulated joints moved to the
    /// actor's world pose. Order: head, shoulders, hands, pelvis, feet.
    fn joints(&self, tau: f64) -> Vec<SplatPoint> {
        let s = self.scale;
        let w = std::f64::consts::TAU * (self.freq * tau) + self.phase;
        let osc = w.sin();
        let lift = 0.5 * (1.0 + osc); // in [0,1]

        // local frame: +z forward, +y up, x sideways
        let mut head = [0.0, 1.05, 0.0];
        let mut l_sh = [-0.26, 0.85, 0.0];
        let mut r_sh = [0.26, 0.85, 0.0];
        let mut l_hand = [-0.34, 0.55, 0.28];
        let mut r_hand = [0.34, 0.55, 0.28];
        let mut pelvis = [0.0, 0.55, 0.0];
        let mut l_foot = [-0.15, 0.06, 0.25];
        let mut r_foot = [0.15, 0.06, 0.25];

        match self.class {
            0 => l_hand[1] += 0.45 * lift,                // wave left
            1 => r_hand[1] += 0.45 * lift,                // wave right
            2 => {
                l_hand[1] += 0.45 * lift;                 // raise both
                r_hand[1] += 0.45 * lift;
            }
            3 => {
                l_hand[0] += 0.30 * lift;                 // clap
                r_hand[0] -= 0.30 * lift;
                l_hand[1] += 0.1;
                r_hand[1] += 0.1;
            }
            4 => {
                let drop = 0.30 * lift;                   // squat
                head[1] -= drop;
                l_sh[1] -= drop;
                r_sh[1] -= drop;
                pelvis[1] -= drop;
                l_hand[1] -= drop;
                r_hand[1] -= drop;
            }
            5 => {
                head[2] += 0.38 * lift;                   // bow
                head[1] -= 0.30 * lift;
                l_sh[2] += 0.20 * lift;
                r_sh[2] += 0.20 * lift;
            }
            6 => {
                l_foot[2] += 0.40 * lift;                 // kick left
                l_foot[1] += 0.28 * lift;
            }
            7 => {
                let a = 0.5 * (1.0 + w.sin());            // march
                let b = 0.5 * (1.0 + (w + std::f64::consts::PI).sin());
                l_foot[1] += 0.22 * a;
                l_foot[2] += 0.15 * a;
                r_foot[1] += 0.22 * b;
                r_foot[2] += 0.15 * b;
            }
            _ => unreachable!("class validated in generate"),
        }

        let pos = self.actor_pos(tau);
        let rot = rot_y(self.heading);
        let locals = [head, l_sh, r_sh, l_hand, r_hand, pelvis, l_foot, r_foot];
        locals
            .iter()
            .enumerate()
            .map(|(i, &p)| SplatPoint {
                pos: vadd(pos, rot.mul_vec(vscale(p, s))),
                color: self.joint_colors[i],
                radius: 0.085 * s,
            })
            .collect()
    }

    fn head_world(&self, tau: f64) -> Vec3 {
        self.joints(tau)[0].pos
    }

    /// Per-frame camera rigs for a view. The outside camera is static; the
    /// head camera follows the actor with a small deterministic shake.
    pub fn rigs(&self, view: View, h: usize, w: usize) -> Vec<CameraRig> {
        match view {
            View::Exo => {
                let k = CameraRig::intrinsics(
                    self.exo_focal,
                    self.exo_focal,
                    w as f64 / 2.0,
                    h as f64 / 2.0,
                );
                // static frame aimed just past the actor's path midpoint
                let dir = [self.heading.cos(), 0.0, self.heading.sin()];
                let target = vadd(
                    vadd(self.start, vscale(dir, 0.5 * self.speed + 1.2)),
                    [0.0, 0.3, 0.0],
                );
                let (r, t) = CameraRig::look_at(self.exo_eye, target, [0.0, 1.0, 0.0]);
                vec![CameraRig::new(k, r, t); self.frames]
            }
            View::Ego => {
                let k = CameraRig::intrinsics(
                    self.ego_focal,
                    self.ego_focal,
                    w as f64 / 2.0,
                    h as f64 / 2.0,
                );
                let rot = rot_y(self.heading);
                let dir = [self.heading.cos(), 0.0, self.heading.sin()];
                (0..self.frames)
                    .map(|f| {
                        let tau = f as f64 / self.frames as f64;
                        let head = self.head_world(tau);
                        let eye = vadd(head, rot.mul_vec(self.ego_offset));
                        let sh = std::f64::consts::TAU * (3.3 * tau) + self.phase;
                        let shake = [
                            self.ego_shake * sh.sin(),
                            self.ego_shake * (1.7 * sh).cos(),
                            self.ego_shake * (2.3 * sh).sin(),
                        ];
                        let eye = vadd(eye, shake);
                        let target = vadd(
                            vadd(self.actor_pos(tau), vscale(dir, self.ego_look_ahead)),
                            [0.0, 0.18, 0.0],
                        );
                        let (r, t) = CameraRig::look_at(eye, target, [0.0, 1.0, 0.0]);
                        CameraRig::new(k, r, t)
                    })
                    .collect()
            }
        }
    }

    /// All splat points for one frame, in fixed draw order.
    fn frame_points(&self, tau: f64) -> Vec<SplatPoint> {
        let mut pts = Vec::new();
        for lm in &self.landmarks {
            pts.push(SplatPoint {
                pos: lm.pos,
                color: lm.color,
                radius: lm.radius,
            });
        }
        pts.extend(self.joints(tau));
        pts
    }

    /// World-anchored checker texture of the ground plane at (x, z).
    fn ground_color(&self, x: f64, z: f64) -> [f32; 3] {
        let ix = (x / self.ground_spacing).floor() as i64;
        let iz = (z / self.ground_spacing).floor() as i64;
        let checker = (ix + iz).rem_euclid(2) as f32;
        let tint =
            (mix_seed(&[self.seed, ix as u64 ^ 0x67, iz as u64 ^ 0x1b]) % 97) as f32 / 97.0;
        let base = 0.16 + 0.24 * checker + 0.10 * tint;
        [base, base * 0.95, base * 0.85]
    }
}

fn rot_y(theta: f64) -> Mat3 {
    let (s, c) = theta.sin_cos();
    Mat3([c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c])
}

/// Point-splat render with z-buffering. Deterministic: fixed point order,
/// strict depth test. Returns the clip (frames + depth maps) and visibility
/// stats for the degenerate-clip policy.
pub fn render(
    scene: &SceneSpec,
    rigs: &[CameraRig],
    h: usize,
    w: usize,
    view: View,
) -> Result<(VideoClip, RenderStats)> {
    if rigs.len() != scene.frames {
        return Err(Error::Config(format!(
            "render: {} rigs for {} frames",
            rigs.len(),
            scene.frames
        )));
    }
    let t = scene.frames;
    let mut frames = vec![0.0f32; t * h * w * 3];
    let mut depth = vec![f32::INFINITY; t * h * w];
    let mut visible_frames = 0usize;

    for f in 0..t {
        let tau = f as f64 / t as f64;
        let rig = &rigs[f];
        let frame = &mut frames[f * h * w * 3..(f + 1) * h * w * 3];
        let zbuf = &mut depth[f * h * w..(f + 1) * h * w];

        // background: faint vertical gradient
        for r in 0..h {
            let g = 0.02 + 0.05 * (r as f32 / h as f32);
            for c in 0..w {
                let px = (r * w + c) * 3;
                frame[px] = g;
                frame[px + 1] = g;
                frame[px + 2] = g * 1.15;
            }
        }

        // ground plane y = 0 by ray intersection: a continuous textured
        // surface with exact view-consistent depth
        if scene.ground_half_extent > 0.0 {
            let kinv = rig.k.inverse()?;
            let center = rig.center();
            let rt = rig.r.transpose();
            for r in 0..h {
                for c in 0..w {
                    // camera ray with unit z in camera space, so the plane
                    // parameter equals the camera-space depth
                    let d_cam = kinv.mul_vec([c as f64 + 0.5, r as f64 + 0.5, 1.0]);
                    let d_world = rt.mul_vec(d_cam);
                    if d_world[1].abs() < 1e-12 {
                        continue;
                    }
                    let s = -center[1] / d_world[1];
                    if s <= NEAR_PLANE {
                        continue;
                    }
                    let hit = vadd(center, vscale(d_world, s));
                    if hit[0].abs() > scene.ground_half_extent
                        || hit[2].abs() > scene.ground_half_extent
                    {
                        continue;
                    }
                    let zi = r * w + c;
                    zbuf[zi] = s as f32;
                    let color = scene.ground_color(hit[0], hit[2]);
                    let px = zi * 3;
                    frame[px] = color[0];
                    frame[px + 1] = color[1];
                    frame[px + 2] = color[2];
                }
            }
        }

        let pts = scene.frame_points(tau);
        let n_actor = 8;
        let actor_range = pts.len() - n_actor..pts.len();
        let mut actor_seen = false;

        for (i, pt) in pts.iter().enumerate() {
            let (u, v, z) = rig.project(pt.pos);
            if z <= NEAR_PLANE {
                continue;
            }
            let r_px = (rig.k.0[0] * pt.radius / z).clamp(0.6, 5.0);
            if u + r_px < 0.0 || u - r_px >= w as f64 || v + r_px < 0.0 || v - r_px >= h as f64 {
                continue;
            }
            if actor_range.contains(&i) {
                actor_seen = true;
            }
            let r0 = (v - r_px).floor().max(0.0) as usize;
            let r1 = ((v + r_px).ceil() as usize).min(h - 1);
            let c0 = (u - r_px).floor().max(0.0) as usize;
            let c1 = ((u + r_px).ceil() as usize).min(w - 1);
            for rr in r0..=r1 {
                for cc in c0..=c1 {
                    let du = cc as f64 + 0.5 - u;
                    let dv = rr as f64 + 0.5 - v;
                    if du * du + dv * dv > r_px * r_px {
                        continue;
                    }
                    let zi = rr * w + cc;
                    if (z as f32) < zbuf[zi] {
                        zbuf[zi] = z as f32;
                        let px = zi * 3;
                        frame[px] = pt.color[0];
                        frame[px + 1] = pt.color[1];
                        frame[px + 2] = pt.color[2];
                    }
                }
            }
        }
        if actor_seen {
            visible_frames += 1;
        }
    }

    // empty pixels carry depth 0.0 in the stored map
    for d in depth.iter_mut() {
        if !d.is_finite() {
            *d = 0.0;
        }
    }

    let clip = VideoClip {
        frames,
        depth,
        t,
        h,
        w,
        c: 3,
        view,
        label: scene.class,
        scene_seed: scene.seed,
        rigs: rigs.to_vec(),
    };
    Ok((
        clip,
        RenderStats {
            actor_visible_frames: visible_frames,
            frames: t,
        },
    ))
}

/// Where one token cell lands in the other view.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellMap {
    /// Target cell (same temporal slab).
    Mapped { row: usize, col: usize },
    /// Reprojected point is behind something in the target view.
    Occluded,
    /// Reprojected point falls outside the target image.
    OutOfView,
    /// No source geometry under the cell center.
    Unmapped,
}

/// Token-grid correspondence from the source view into the target view,
/// one entry per (temporal slab, row, col) cell.
#[derive(Debug, Clone)]
pub struct CorrespondenceField {
    pub tgrid: usize,
    pub rows: usize,
    pub cols: usize,
    pub cells: Vec<CellMap>,
}

impl CorrespondenceField {
    pub fn at(&self, t: usize, r: usize, c: usize) -> CellMap {
        self.cells[(t * self.rows + r) * self.cols + c]
    }

    pub fn mapped_fraction_of_sourced(&self) -> f64 {
        let sourced = self
            .cells
            .iter()
            .filter(|c| !matches!(c, CellMap::Unmapped))
            .count();
        if sourced == 0 {
            return 0.0;
        }
        let mapped = self
            .cells
            .iter()
            .filter(|c| matches!(c, CellMap::Mapped { .. }))
            .count();
        mapped as f64 / sourced as f64
    }
}

/// Exact cell-to-cell warp between two rendered views of the same scene.
///
/// For each source token cell: unproject the cell-center pixel through the
/// source depth map, reproject into the target view (same representative
/// frame: first frame of the temporal slab), and keep the mapping when the
/// target depth agrees within `DEPTH_TOLERANCE` relative depth.
pub fn ground_truth_warp(
    src: &VideoClip,
    dst: &VideoClip,
    patch_k: usize,
    patch_p: usize,
) -> Result<CorrespondenceField> {
    if src.t != dst.t || src.h != dst.h || src.w != dst.w {
        return Err(Error::Data("warp: clip shapes differ".into()));
    }
    if src.t % patch_k != 0 || src.h % patch_p != 0 || src.w % patch_p != 0 {
        return Err(Error::Config(format!(
            "warp: clip {}x{}x{} not divisible by patch {}x{}",
            src.t, src.h, src.w, patch_k, patch_p
        )));
    }
    let tgrid = src.t / patch_k;
    let rows = src.h / patch_p;
    let cols = src.w / patch_p;
    let mut cells = Vec::with_capacity(tgrid * rows * cols);

    for tg in 0..tgrid {
        let f = tg * patch_k; // representative frame of the slab
        for i in 0..rows {
            for j in 0..cols {
                let pr = i * patch_p + patch_p / 2;
                let pc = j * patch_p + patch_p / 2;
                let Some(z) = src.depth_at(f, pr, pc) else {
                    cells.push(CellMap::Unmapped);
                    continue;
                };
                let world = src.rigs[f].unproject(pc as f64 + 0.5, pr as f64 + 0.5, z)?;
                let (u, v, zt) = dst.rigs[f].project(world);
                if zt <= NEAR_PLANE || u < 0.0 || v < 0.0 || u >= src.w as f64 || v >= src.h as f64
                {
                    cells.push(CellMap::OutOfView);
                    continue;
                }
                let (tr, tc) = (v.floor() as usize, u.floor() as usize);
                match dst.depth_bilinear(f, u, v) {
                    Some(dz) if (dz - zt).abs() <= DEPTH_TOLERANCE * zt => {
                        cells.push(CellMap::Mapped {
                            row: tr / patch_p,
                            col: tc / patch_p,
                        });
                    }
                    _ => cells.push(CellMap::Occluded),
                }
            }
        }
    }
    Ok(CorrespondenceField {
        tgrid,
        rows,
        cols,
        cells,
    })
}

/// Mean color of a token cell's pixel block, averaged over its K frames.
pub fn cell_mean_color(clip: &VideoClip, patch_k: usize, patch_p: usize, t: usize, r: usize, c: usize) -> [f32; 3] {
    let mut acc = [0.0f32; 3];
    let mut n = 0usize;
    for f in t * patch_k..(t + 1) * patch_k {
        for rr in r * patch_p..(r + 1) * patch_p {
            for cc in c * patch_p..(c + 1) * patch_p {
                let px = clip.pixel(f, rr, cc);
                acc[0] += px[0];
                acc[1] += px[1];
                acc[2] += px[2];
                n += 1;
            }
        }
    }
    [acc[0] / n as f32, acc[1] / n as f32, acc[2] / n as f32]
}

/// Mean absolute color error between mapped source cells and their target
/// cells; the paired-render consistency statistic.
pub fn warp_consistency_mae(
    src: &VideoClip,
    dst: &VideoClip,
    field: &CorrespondenceField,
    patch_k: usize,
    patch_p: usize,
) -> Option<f64> {
    let mut total = 0.0f64;
    let mut n = 0usize;
    for t in 0..field.tgrid {
        for r in 0..field.rows {
            for c in 0..field.cols {
                if let CellMap::Mapped { row, col } = field.at(t, r, c) {
                    let a = cell_mean_color(src, patch_k, patch_p, t, r, c);
                    let b = cell_mean_color(dst, patch_k, patch_p, t, row, col);
                    for ch in 0..3 {
                        total += (a[ch] - b[ch]).abs() as f64;
                    }
                    n += 3;
                }
            }
        }
    }
    if n == 0 {
        None
    } else {
        Some(total / n as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::Mat3;

    fn small_scene(seed: u64, class: usize) -> SceneSpec {
        SceneSpec::generate(seed, class, 8).unwrap()
    }

    #[test]
    fn axis_point_splats_at_principal_point() {
        // camera at origin looking +z, point on the optical axis at depth 5
        let k = CameraRig::intrinsics(20.0, 20.0, 16.0, 16.0);
        let rig = CameraRig::new(k, Mat3::IDENTITY, [0.0, 0.0, 0.0]);
        let (u, v, z) = rig.project([0.0, 0.0, 5.0]);
        assert_eq!((u, v, z), (16.0, 16.0, 5.0));
    }

    #[test]
    fn render_is_deterministic() {
        let scene = small_scene(99, 3);
        let rigs = scene.rigs(View::Exo, 32, 32);
        let (a, _) = render(&scene, &rigs, 32, 32, View::Exo).unwrap();
        let (b, _) = render(&scene, &rigs, 32, 32, View::Exo).unwrap();
        assert_eq!(a.frames, b.frames);
        assert_eq!(a.depth, b.depth);
    }

    #[test]
    fn translating_scene_and_camera_together_is_invariant() {
        let mut scene = small_scene(7, 0);
        let rigs = scene.rigs(View::Exo, 32, 32);
        let (base, _) = render(&scene, &rigs, 32, 32, View::Exo).unwrap();

        // shift everything by the same world vector
        let shift = [1.3, 0.0, -0.6];
        scene.start = vadd(scene.start, shift);
        for lm in scene.landmarks.iter_mut() {
            lm.pos = vadd(lm.pos, shift);
        }
        scene.exo_eye = vadd(scene.exo_eye, shift);
        // ground texture is anchored to the world grid, so drop it for this
        // check by rendering with zero extent and comparing actor/landmarks
        scene.ground_half_extent = 0.0;
        let mut unshifted = small_scene(7, 0);
        unshifted.ground_half_extent = 0.0;

        let k = CameraRig::intrinsics(scene.exo_focal, scene.exo_focal, 16.0, 16.0);
        let (r0, t0) = CameraRig::look_at(unshifted.exo_eye, [0.0, 0.5, 0.0], [0.0, 1.0, 0.0]);
        let rigs0 = vec![CameraRig::new(k, r0, t0); 8];
        let (a, _) = render(&unshifted, &rigs0, 32, 32, View::Exo).unwrap();

        let (r1, t1) = CameraRig::look_at(
            scene.exo_eye,
            vadd([0.0, 0.5, 0.0], shift),
            [0.0, 1.0, 0.0],
        );
        let rigs1 = vec![CameraRig::new(k, r1, t1); 8];
        let (b, _) = render(&scene, &rigs1, 32, 32, View::Exo).unwrap();
        assert_eq!(a.frames, b.frames);
        let _ = base;
    }

    #[test]
    fn rendered_splat_centers_match_projection_oracle() {
        // every landmark that renders must sit within 0.5 px of K[R|t]X
        let scene = small_scene(21, 2);
        let rigs = scene.rigs(View::Exo, 64, 64);
        let (clip, _) = render(&scene, &rigs, 64, 64, View::Exo).unwrap();
        let mut checked = 0;
        for lm in &scene.landmarks {
            let (u, v, z) = rigs[0].project(lm.pos);
            if z <= NEAR_PLANE || u < 2.0 || v < 2.0 || u >= 62.0 || v >= 62.0 {
                continue;
            }
            // center pixel should carry approximately the landmark color,
            // unless something closer covers it
            let (r, c) = (v.floor() as usize, u.floor() as usize);
            if let Some(d) = clip.depth_at(0, r, c) {
                if (d - z).abs() / z < 0.01 {
                    let px = clip.pixel(0, r, c);
                    for ch in 0..3 {
                        assert!(
                            (px[ch] - lm.color[ch]).abs() < 1e-6,
                            "landmark color mismatch at ({r},{c})"
                        );
                    }
                    checked += 1;
                }
            }
        }
        assert!(checked > 0, "no landmark was checkable");
    }

    #[test]
    fn identical_rigs_give_identity_mapping() {
        let scene = small_scene(5, 1);
        let rigs = scene.rigs(View::Exo, 32, 32);
        let (clip, _) = render(&scene, &rigs, 32, 32, View::Exo).unwrap();
        let field = ground_truth_warp(&clip, &clip, 2, 8).unwrap();
        let mut mapped = 0;
        for t in 0..field.tgrid {
            for r in 0..field.rows {
                for c in 0..field.cols {
                    match field.at(t, r, c) {
                        CellMap::Mapped { row, col } => {
                            assert_eq!((row, col), (r, c));
                            mapped += 1;
                        }
                        CellMap::Unmapped => {}
                        other => panic!("unexpected cell state {other:?}"),
                    }
                }
            }
        }
        assert!(mapped > 8, "too few mapped cells: {mapped}");
    }

    #[test]
    fn principal_point_shift_moves_mapping_one_cell() {
        let scene = small_scene(13, 6);
        let rigs = scene.rigs(View::Exo, 32, 32);
        let (src, _) = render(&scene, &rigs, 32, 32, View::Exo).unwrap();
        // same camera, principal point shifted by exactly one cell width
        let mut shifted_rigs = rigs.clone();
        for rig in shifted_rigs.iter_mut() {
            rig.k.0[2] += 8.0;
        }
        let (dst, _) = render(&scene, &shifted_rigs, 32, 32, View::Exo).unwrap();
        let field = ground_truth_warp(&src, &dst, 2, 8).unwrap();
        for t in 0..field.tgrid {
            for r in 0..field.rows {
                for c in 0..field.cols {
                    if let CellMap::Mapped { row, col } = field.at(t, r, c) {
                        assert_eq!(row, r);
                        assert_eq!(col, c + 1, "col shift wrong at ({t},{r},{c})");
                    }
                }
            }
        }
    }

    #[test]
    fn mapped_cells_land_in_target_footprint() {
        // invariant: the reprojected center pixel lies inside the claimed cell
        let scene = small_scene(31, 4);
        let exo_rigs = scene.rigs(View::Exo, 32, 32);
        let ego_rigs = scene.rigs(View::Ego, 32, 32);
        let (exo, _) = render(&scene, &exo_rigs, 32, 32, View::Exo).unwrap();
        let (ego, _) = render(&scene, &ego_rigs, 32, 32, View::Ego).unwrap();
        let field = ground_truth_warp(&exo, &ego, 2, 8).unwrap();
        for tg in 0..field.tgrid {
            let f = tg * 2;
            for i in 0..field.rows {
                for j in 0..field.cols {
                    if let CellMap::Mapped { row, col } = field.at(tg, i, j) {
                        let pr = i * 8 + 4;
                        let pc = j * 8 + 4;
                        let z = exo.depth_at(f, pr, pc).unwrap();
                        let world = exo.rigs[f]
                            .unproject(pc as f64 + 0.5, pr as f64 + 0.5, z)
                            .unwrap();
                        let (u, v, _) = ego.rigs[f].project(world);
                        assert_eq!(v.floor() as usize / 8, row);
                        assert_eq!(u.floor() as usize / 8, col);
                    }
                }
            }
        }
    }

    #[test]
    fn paired_views_have_enough_consistent_mappings() {
        // measured over 100 generated scenes: mapped fraction of sourced
        // cells stays above 0.4
        let mut total_mapped = 0usize;
        let mut total_sourced = 0usize;
        for seed in 0..100u64 {
            let scene = small_scene(1000 + seed, (seed % 8) as usize);
            let exo_rigs = scene.rigs(View::Exo, 32, 32);
            let ego_rigs = scene.rigs(View::Ego, 32, 32);
            let (exo, _) = render(&scene, &exo_rigs, 32, 32, View::Exo).unwrap();
            let (ego, _) = render(&scene, &ego_rigs, 32, 32, View::Ego).unwrap();
            let field = ground_truth_warp(&exo, &ego, 2, 8).unwrap();
            total_mapped += field
                .cells
                .iter()
                .filter(|c| matches!(c, CellMap::Mapped { .. }))
                .count();
            total_sourced += field
                .cells
                .iter()
                .filter(|c| !matches!(c, CellMap::Unmapped))
                .count();
        }
        let fraction = total_mapped as f64 / total_sourced as f64;
        assert!(fraction >= 0.4, "mapped fraction {fraction:.3}");
    }

    #[test]
    fn paired_warp_color_consistency() {
        let mut maes = Vec::new();
        for seed in 0..20u64 {
            let scene = small_scene(500 + seed, (seed % 8) as usize);
            let exo_rigs = scene.rigs(View::Exo, 32, 32);
            let ego_rigs = scene.rigs(View::Ego, 32, 32);
            let (exo, _) = render(&scene, &exo_rigs, 32, 32, View::Exo).unwrap();
            let (ego, _) = render(&scene, &ego_rigs, 32, 32, View::Ego).unwrap();
            let field = ground_truth_warp(&exo, &ego, 2, 8).unwrap();
            if let Some(mae) = warp_consistency_mae(&exo, &ego, &field, 2, 8) {
                maes.push(mae);
            }
        }
        assert!(!maes.is_empty());
        let mean = maes.iter().sum::<f64>() / maes.len() as f64;
        assert!(mean < 0.15, "warp MAE {mean:.4}");
    }

    #[test]
    fn generate_rejects_bad_class() {
        assert!(SceneSpec::generate(1, NUM_CLASSES, 8).is_err());
    }

    #[test]
    fn exo_rig_satisfies_invariants() {
        for seed in 0..20 {
            let scene = small_scene(seed, 0);
            for rig in scene
                .rigs(View::Exo, 32, 32)
                .iter()
                .chain(scene.rigs(View::Ego, 32, 32).iter())
            {
                rig.validate().unwrap();
            }
        }
    }

    #[test]
    fn actor_stays_visible_in_both_views() {
        for seed in 0..30 {
            let scene = small_scene(2000 + seed, (seed % 8) as usize);
            for view in [View::Exo, View::Ego] {
                let rigs = scene.rigs(view, 32, 32);
                let (_, stats) = render(&scene, &rigs, 32, 32, view).unwrap();
                assert!(
                    !stats.degenerate(),
                    "seed {seed} degenerate in {view:?}: {}/{}",
                    stats.actor_visible_frames,
                    stats.frames
                );
            }
        }
    }
}
