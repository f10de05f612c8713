//! Pinhole camera rigs and the linear transforms linking two views.
//!
//! All math is 3x3 / 4x4 with hand-rolled kernels so results are identical on
//! every platform. A rig projects world points as `pixel = K (R X + t) / z`.

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

/// Row-major 3x3 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat3(pub [f64; 9]);

/// Row-major 4x4 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat4(pub [f64; 16]);

impl Mat3 {
    pub const IDENTITY: Mat3 = Mat3([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);

    pub fn mul(&self, o: &Mat3) -> Mat3 {
        let mut out = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                let mut acc = 0.0;
                for k in 0..3 {
                    acc += self.0[r * 3 + k] * o.0[k * 3 + c];
                }
                out[r * 3 + c] = acc;
            }
        }
        Mat3(out)
    }

    pub fn mul_vec(&self, v: Vec3) -> Vec3 {
        let m = &self.0;
        [
            m[0] * v[0] + m[1] * v[1] + m[2] * v[2],
            m[3] * v[0] + m[4] * v[1] + m[5] * v[2],
            m[6] * v[0] + m[7] * v[1] + m[8] * v[2],
        ]
    }

    pub fn transpose(&self) -> Mat3 {
        let m = &self.0;
        Mat3([m[0], m[3], m[6], m[1], m[4], m[7], m[2], m[5], m[8]])
    }

    pub fn det(&self) -> f64 {
        let m = &self.0;
        m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
            + m[2] * (m[3] * m[7] - m[4] * m[6])
    }

    /// Inverse via the adjugate; errors when the determinant is near zero.
    pub fn inverse(&self) -> Result<Mat3> {
        let d = self.det();
        if d.abs() < 1e-12 {
            return Err(Error::Numeric("mat3 inverse: singular matrix".into()));
        }
        let m = &self.0;
        let inv_d = 1.0 / d;
        Ok(Mat3([
            (m[4] * m[8] - m[5] * m[7]) * inv_d,
            (m[2] * m[7] - m[1] * m[8]) * inv_d,
            (m[1] * m[5] - m[2] * m[4]) * inv_d,
            (m[5] * m[6] - m[3] * m[8]) * inv_d,
            (m[0] * m[8] - m[2] * m[6]) * inv_d,
            (m[2] * m[3] - m[0] * m[5]) * inv_d,
            (m[3] * m[7] - m[4] * m[6]) * inv_d,
            (m[1] * m[6] - m[0] * m[7]) * inv_d,
            (m[0] * m[4] - m[1] * m[3]) * inv_d,
        ]))
    }
}

impl Mat4 {
    pub const IDENTITY: Mat4 = Mat4([
        1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0,
    ]);

    pub fn mul(&self, o: &Mat4) -> Mat4 {
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += self.0[r * 4 + k] * o.0[k * 4 + c];
                }
                out[r * 4 + c] = acc;
            }
        }
        Mat4(out)
    }

    /// Inverse of a rigid transform `[[R, t], [0, 1]]`.
    pub fn rigid_inverse(&self) -> Mat4 {
        let (r, t) = self.split_rigid();
        let rt = r.transpose();
        let nt = rt.mul_vec(t);
        Mat4::from_rigid(&rt, [-nt[0], -nt[1], -nt[2]])
    }

    pub fn from_rigid(r: &Mat3, t: Vec3) -> Mat4 {
        let m = &r.0;
        Mat4([
            m[0], m[1], m[2], t[0], m[3], m[4], m[5], t[1], m[6], m[7], m[8], t[2], 0.0, 0.0, 0.0,
            1.0,
        ])
    }

    pub fn split_rigid(&self) -> (Mat3, Vec3) {
        let m = &self.0;
        (
            Mat3([m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]]),
            [m[3], m[7], m[11]],
        )
    }
}

pub fn vsub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn vadd(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn vscale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(a: Vec3) -> Vec3 {
    let n = norm(a);
    debug_assert!(n > 0.0);
    vscale(a, 1.0 / n)
}

/// One camera: intrinsics `K` and extrinsics `[R | t]` (world -> camera).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraRig {
    pub k: Mat3,
    pub r: Mat3,
    pub t: Vec3,
}

/// The linear transforms mapping one rig's parameters onto another's:
/// `K_b = T_K K_a` and `[R_b | t_b] = T_Rt [R_a | t_a]` (homogeneous).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraLink {
    pub t_k: Mat3,
    pub t_rt: Mat4,
}

impl CameraRig {
    pub fn new(k: Mat3, r: Mat3, t: Vec3) -> Self {
        CameraRig { k, r, t }
    }

    /// Intrinsics from focal lengths and principal point, zero skew.
    pub fn intrinsics(fx: f64, fy: f64, cx: f64, cy: f64) -> Mat3 {
        Mat3([fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0])
    }

    /// Extrinsics for a camera at `eye` looking toward `target`, roll-free
    /// with respect to the up hint. Camera frame: +x image-right, +y
    /// image-down, +z forward, so world-up content renders upright.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> (Mat3, Vec3) {
        let fwd = normalize(vsub(target, eye));
        // image-down = -up projected onto the plane orthogonal to fwd
        let down = normalize(vadd(vscale(up, -1.0), vscale(fwd, dot(up, fwd))));
        let right = cross(down, fwd);
        let r = Mat3([
            right[0], right[1], right[2], down[0], down[1], down[2], fwd[0], fwd[1], fwd[2],
        ]);
        let t = vscale(r.mul_vec(eye), -1.0);
        (r, t)
    }

    /// Project a world point; returns (u, v, depth). Depth <= 0 means the
    /// point is behind the camera.
    pub fn project(&self, x: Vec3) -> (f64, f64, f64) {
        let cam = vadd(self.r.mul_vec(x), self.t);
        let z = cam[2];
        let p = self.k.mul_vec([cam[0] / z, cam[1] / z, 1.0]);
        (p[0], p[1], z)
    }

    /// Camera-space point for pixel (u, v) at the given depth.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Result<Vec3> {
        let kinv = self.k.inverse()?;
        let ray = kinv.mul_vec([u, v, 1.0]);
        let cam = vscale(ray, depth);
        // world = R^T (cam - t)
        Ok(self.r.transpose().mul_vec(vsub(cam, self.t)))
    }

    /// World-space camera center.
    pub fn center(&self) -> Vec3 {
        vscale(self.r.transpose().mul_vec(self.t), -1.0)
    }

    /// Rotation orthonormal with determinant +1, intrinsics upper-triangular
    /// with positive focal entries.
    pub fn validate(&self) -> Result<()> {
        let rt_r = self.r.transpose().mul(&self.r);
        for (i, (&got, &want)) in rt_r.0.iter().zip(Mat3::IDENTITY.0.iter()).enumerate() {
            if (got - want).abs() > 1e-6 {
                return Err(Error::Numeric(format!(
                    "camera rotation not orthonormal at entry {i}: {got}"
                )));
            }
        }
        if (self.r.det() - 1.0).abs() > 1e-6 {
            return Err(Error::Numeric(format!(
                "camera rotation determinant {} != +1",
                self.r.det()
            )));
        }
        let k = &self.k.0;
        if k[3].abs() > 1e-9 || k[6].abs() > 1e-9 || k[7].abs() > 1e-9 {
            return Err(Error::Numeric("intrinsics not upper-triangular".into()));
        }
        if k[0] <= 0.0 || k[4] <= 0.0 {
            return Err(Error::Numeric("intrinsics need positive focals".into()));
        }
        Ok(())
    }
}

impl CameraLink {
    /// The link carrying rig `a` onto rig `b`.
    pub fn between(a: &CameraRig, b: &CameraRig) -> Result<CameraLink> {
        let t_k = b.k.mul(&a.k.inverse()?);
        let ea = Mat4::from_rigid(&a.r, a.t);
        let eb = Mat4::from_rigid(&b.r, b.t);
        let t_rt = eb.mul(&ea.rigid_inverse());
        Ok(CameraLink { t_k, t_rt })
    }

    pub fn inverse(&self) -> Result<CameraLink> {
        Ok(CameraLink {
            t_k: self.t_k.inverse()?,
            t_rt: self.t_rt.rigid_inverse(),
        })
    }

    /// Composition: `self` applied after `first`.
    pub fn compose(&self, first: &CameraLink) -> CameraLink {
        CameraLink {
            t_k: self.t_k.mul(&first.t_k),
            t_rt: self.t_rt.mul(&first.t_rt),
        }
    }
}

/// Apply a link to a rig: `K' = T_K K`, `[R'|t']` from `T_Rt [R|t]`.
pub fn derive_ego_camera(exo: &CameraRig, link: &CameraLink) -> Result<CameraRig> {
    if link.t_k.det().abs() < 1e-12 {
        return Err(Error::Numeric(
            "derive_ego_camera: non-invertible intrinsic transform".into(),
        ));
    }
    let k = link.t_k.mul(&exo.k);
    let e = link.t_rt.mul(&Mat4::from_rigid(&exo.r, exo.t));
    let (r, t) = e.split_rigid();
    Ok(CameraRig { k, r, t })
}
