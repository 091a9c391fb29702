//! Camera rig, projections between image, world and BEV grid coordinates, and
//! temporal alignment between frames.
//!
//! Conventions: the world frame is right-handed and Z-up, camera frames are
//! X-right, Y-down, Z-forward, and a view's extrinsics map world to camera.
//! "World" is the ego frame of the current frame (index 0); ego pose `t`
//! maps the ego frame at frame `t` into that world frame.

mod boxes;

pub use boxes::{bev_corners, bev_rotated_iou, normalize_yaw, nms_3d, Box3D};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point3 = [f64; 3];

/// Depth below which a point does not count as visible in a view.
pub const MIN_VISIBLE_DEPTH: f64 = 0.1;

/// Horizontal distance of surround cameras from the ego origin.
pub const SURROUND_MOUNT_RADIUS: f64 = 0.3;

/// Rigid transform `p -> R p + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rigid3 {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl Default for Rigid3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rigid3 {
    pub fn identity() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    pub fn translation(t: [f64; 3]) -> Self {
        Self {
            translation: t,
            ..Self::identity()
        }
    }

    /// Rotation by `yaw` about +Z followed by translation `t`.
    pub fn from_yaw(yaw: f64, t: [f64; 3]) -> Self {
        let (s, c) = yaw.sin_cos();
        Self {
            rotation: [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
            translation: t,
        }
    }

    pub fn apply(&self, p: Point3) -> Point3 {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + t[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + t[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + t[2],
        ]
    }

    pub fn rotate(&self, p: Point3) -> Point3 {
        let r = &self.rotation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2],
        ]
    }

    pub fn inverse(&self) -> Self {
        let r = &self.rotation;
        let rt = [
            [r[0][0], r[1][0], r[2][0]],
            [r[0][1], r[1][1], r[2][1]],
            [r[0][2], r[1][2], r[2][2]],
        ];
        let t = self.translation;
        let mut inv_t = [0.0; 3];
        for i in 0..3 {
            inv_t[i] = -(rt[i][0] * t[0] + rt[i][1] * t[1] + rt[i][2] * t[2]);
        }
        Self {
            rotation: rt,
            translation: inv_t,
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Rigid3) -> Self {
        let mut rot = [[0.0; 3]; 3];
        for (i, row) in rot.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3)
                    .map(|k| self.rotation[i][k] * other.rotation[k][j])
                    .sum();
            }
        }
        Self {
            rotation: rot,
            translation: self.apply(other.translation),
        }
    }

    /// Checks `RᵀR = I` within `tol` and `det R = +1`.
    pub fn is_rigid(&self, tol: f64) -> bool {
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                if (dot - expect).abs() > tol {
                    return false;
                }
            }
        }
        (det3(r) - 1.0).abs() <= tol
    }
}

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// One pinhole camera.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraView {
    /// Upper-triangular intrinsic matrix.
    pub intrinsics: [[f64; 3]; 3],
    /// World (ego) to camera.
    pub extrinsics: Rigid3,
    /// `(width, height)` in pixels.
    pub image_size: (usize, usize),
}

impl CameraView {
    pub fn new(intrinsics: [[f64; 3]; 3], extrinsics: Rigid3, image_size: (usize, usize)) -> Result<Self> {
        let view = Self {
            intrinsics,
            extrinsics,
            image_size,
        };
        view.validate()?;
        Ok(view)
    }

    pub fn pinhole(fx: f64, fy: f64, px: f64, py: f64) -> [[f64; 3]; 3] {
        [[fx, 0.0, px], [0.0, fy, py], [0.0, 0.0, 1.0]]
    }

    /// Camera mounted at `position` (ego frame) looking along ego yaw `heading`,
    /// horizontal image axis pointing right and vertical axis pointing down.
    pub fn looking_along(
        heading: f64,
        position: Point3,
        hfov_deg: f64,
        image_size: (usize, usize),
    ) -> Result<Self> {
        let (w, h) = (image_size.0 as f64, image_size.1 as f64);
        let f = (w / 2.0) / (hfov_deg.to_radians() / 2.0).tan();
        let (s, c) = heading.sin_cos();
        let forward = [c, s, 0.0];
        let right = [s, -c, 0.0];
        let down = [0.0, 0.0, -1.0];
        let rotation = [right, down, forward];
        let mut rig = Rigid3 {
            rotation,
            translation: [0.0; 3],
        };
        let rp = rig.rotate(position);
        rig.translation = [-rp[0], -rp[1], -rp[2]];
        Self::new(Self::pinhole(f, f, w / 2.0, h / 2.0), rig, image_size)
    }

    pub fn validate(&self) -> Result<()> {
        let k = &self.intrinsics;
        if !(k[0][0] > 0.0 && k[1][1] > 0.0) {
            return Err(Error::invalid("camera focal lengths must be positive"));
        }
        if k[1][0] != 0.0 || k[2][0] != 0.0 || k[2][1] != 0.0 || k[2][2] != 1.0 {
            return Err(Error::invalid("intrinsics must be upper triangular with K[2][2] = 1"));
        }
        if !self.extrinsics.is_rigid(1e-9) {
            return Err(Error::invalid("extrinsic rotation is not a proper rotation"));
        }
        Ok(())
    }

    pub fn focal(&self) -> (f64, f64) {
        (self.intrinsics[0][0], self.intrinsics[1][1])
    }

    /// Camera position in world coordinates.
    pub fn center(&self) -> Point3 {
        self.extrinsics.inverse().translation
    }
}

/// Views plus per-frame ego poses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    pub views: Vec<CameraView>,
    /// Ego pose of frame `t` (frame 0 is current); maps ego(t) into world.
    pub ego_poses: Vec<Rigid3>,
}

impl CameraRig {
    pub fn new(views: Vec<CameraView>, ego_poses: Vec<Rigid3>) -> Result<Self> {
        if views.is_empty() {
            return Err(Error::invalid("camera rig needs at least one view"));
        }
        if ego_poses.is_empty() {
            return Err(Error::invalid("camera rig needs at least one ego pose"));
        }
        for v in &views {
            v.validate()?;
        }
        if ego_poses.iter().any(|p| !p.is_rigid(1e-9)) {
            return Err(Error::invalid("ego poses must be rigid"));
        }
        Ok(Self { views, ego_poses })
    }

    /// `V` views spaced evenly in yaw starting at the front (+X), mounted on
    /// a ring of radius [`SURROUND_MOUNT_RADIUS`] around the ego origin.
    pub fn surround(
        num_views: usize,
        hfov_deg: f64,
        image_size: (usize, usize),
        mount_height: f64,
        ego_poses: Vec<Rigid3>,
    ) -> Result<Self> {
        let views = (0..num_views)
            .map(|v| {
                let heading = 2.0 * std::f64::consts::PI * v as f64 / num_views as f64;
                let (s, c) = heading.sin_cos();
                let r = SURROUND_MOUNT_RADIUS;
                CameraView::looking_along(heading, [r * c, r * s, mount_height], hfov_deg, image_size)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(views, ego_poses)
    }

    pub fn num_views(&self) -> usize {
        self.views.len()
    }

    pub fn num_frames(&self) -> usize {
        self.ego_poses.len()
    }

    /// Transform taking current-frame world points into the ego frame of `t`.
    pub fn alignment(&self, t: usize) -> Rigid3 {
        self.ego_poses[t].inverse().compose(&self.ego_poses[0])
    }
}

/// BEV/Z detection extent in meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRange {
    pub x: (f64, f64),
    pub y: (f64, f64),
    pub z: (f64, f64),
}

impl Default for DetectionRange {
    fn default() -> Self {
        Self {
            x: (-54.0, 54.0),
            y: (-54.0, 54.0),
            z: (-5.0, 3.0),
        }
    }
}

impl DetectionRange {
    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [("x", self.x), ("y", self.y), ("z", self.z)] {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::invalid(format!("degenerate {} range [{}, {}]", name, lo, hi)));
            }
        }
        Ok(())
    }

    pub fn extent(&self) -> [f64; 3] {
        [self.x.1 - self.x.0, self.y.1 - self.y.0, self.z.1 - self.z.0]
    }

    pub fn contains(&self, p: Point3) -> bool {
        p[0] >= self.x.0
            && p[0] <= self.x.1
            && p[1] >= self.y.0
            && p[1] <= self.y.1
            && p[2] >= self.z.0
            && p[2] <= self.z.1
    }

    pub fn clamp(&self, p: Point3) -> Point3 {
        [
            p[0].clamp(self.x.0, self.x.1),
            p[1].clamp(self.y.0, self.y.1),
            p[2].clamp(self.z.0, self.z.1),
        ]
    }
}

/// Lifts an image point with metric depth into world coordinates.
pub fn unproject_center(cx: f64, cy: f64, depth: f64, view: &CameraView) -> Result<Point3> {
    let k = &view.intrinsics;
    let det = k[0][0] * k[1][1] * k[2][2];
    if det.abs() < 1e-12 || !det.is_finite() {
        return Err(Error::Singular("camera intrinsics"));
    }
    // Back-substitution through the upper-triangular K.
    let rhs = [cx * depth, cy * depth, depth];
    let z = rhs[2] / k[2][2];
    let y = (rhs[1] - k[1][2] * z) / k[1][1];
    let x = (rhs[0] - k[0][1] * y - k[0][2] * z) / k[0][0];
    Ok(view.extrinsics.inverse().apply([x, y, z]))
}

/// Projects a world point to `(u, v, depth)` or `None` when it is closer than
/// [`MIN_VISIBLE_DEPTH`] or lands outside the image.
pub fn project_to_view(p: Point3, view: &CameraView) -> Option<(f64, f64, f64)> {
    let c = view.extrinsics.apply(p);
    let depth = c[2];
    if depth.is_nan() || depth <= MIN_VISIBLE_DEPTH {
        return None;
    }
    let k = &view.intrinsics;
    let u = (k[0][0] * c[0] + k[0][1] * c[1] + k[0][2] * c[2]) / depth;
    let v = (k[1][1] * c[1] + k[1][2] * c[2]) / depth;
    let (w, h) = (view.image_size.0 as f64, view.image_size.1 as f64);
    (u >= 0.0 && u < w && v >= 0.0 && v < h).then_some((u, v, depth))
}

/// Maps a current-frame world point into world coordinates as seen from
/// frame `t`'s ego pose.
pub fn align_temporal(p: Point3, rig: &CameraRig, t: usize) -> Point3 {
    rig.alignment(t).apply(p)
}

/// Views in which `p` (current-frame world) is visible at frame `t`.
pub fn hit_views(p: Point3, rig: &CameraRig, t: usize) -> Vec<usize> {
    let q = align_temporal(p, rig, t);
    rig.views
        .iter()
        .enumerate()
        .filter_map(|(i, v)| project_to_view(q, v).map(|_| i))
        .collect()
}

/// Continuous BEV grid coordinates of `p` for a `(cols, rows)` grid spanning
/// `range`.
pub fn project_to_bev(p: Point3, range: &DetectionRange, grid: (usize, usize)) -> Result<(f64, f64)> {
    range.validate()?;
    let u = (p[0] - range.x.0) / (range.x.1 - range.x.0) * grid.0 as f64;
    let v = (p[1] - range.y.0) / (range.y.1 - range.y.0) * grid.1 as f64;
    Ok((u, v))
}
