use std::cmp::Ordering;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::Point3;

/// Yaw-only 3D box in the world frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: Point3,
    /// `(length, width, height)`; length runs along the yaw direction.
    pub size: [f64; 3],
    pub yaw: f64,
    pub velocity: [f64; 2],
    pub class_id: usize,
    pub score: f64,
}

impl Box3D {
    pub fn new(center: Point3, size: [f64; 3], yaw: f64) -> Self {
        Self {
            center,
            size,
            yaw: normalize_yaw(yaw),
            velocity: [0.0; 2],
            class_id: 0,
            score: 1.0,
        }
    }

    pub fn with_class(mut self, class_id: usize) -> Self {
        self.class_id = class_id;
        self
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = score;
        self
    }

    pub fn with_velocity(mut self, velocity: [f64; 2]) -> Self {
        self.velocity = velocity;
        self
    }

    pub fn bev_distance(&self, other: &Box3D) -> f64 {
        let dx = self.center[0] - other.center[0];
        let dy = self.center[1] - other.center[1];
        (dx * dx + dy * dy).sqrt()
    }

    /// BEV distance of the center from the ego origin.
    pub fn ego_distance(&self) -> f64 {
        self.center[0].hypot(self.center[1])
    }
}

/// Wraps an angle into `(-π, π]`.
pub fn normalize_yaw(yaw: f64) -> f64 {
    let mut a = yaw.rem_euclid(2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    }
    a
}

/// Counter-clockwise BEV corners.
pub fn bev_corners(b: &Box3D) -> [[f64; 2]; 4] {
    let (s, c) = b.yaw.sin_cos();
    let (hl, hw) = (b.size[0] / 2.0, b.size[1] / 2.0);
    let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
    local.map(|[x, y]| [b.center[0] + c * x - s * y, b.center[1] + s * x + c * y])
}

fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut a = 0.0;
    for i in 0..n {
        let (p, q) = (poly[i], poly[(i + 1) % n]);
        a += p[0] * q[1] - q[0] * p[1];
    }
    a / 2.0
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Sutherland–Hodgman clip of `subject` by the convex CCW polygon `clip`.
fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut out = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let p = input[j];
            let q = input[(j + 1) % input.len()];
            let (dp, dq) = (cross(a, b, p), cross(a, b, q));
            if dp >= 0.0 {
                out.push(p);
            }
            if (dp >= 0.0) != (dq >= 0.0) {
                let t = dp / (dp - dq);
                out.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
            }
        }
    }
    out
}

/// Intersection over union of the yaw-rotated BEV rectangles.
pub fn bev_rotated_iou(a: &Box3D, b: &Box3D) -> f64 {
    let reach = |x: &Box3D| x.size[0].hypot(x.size[1]) / 2.0;
    if a.bev_distance(b) > reach(a) + reach(b) {
        return 0.0;
    }
    let (ca, cb) = (bev_corners(a), bev_corners(b));
    let inter = polygon_area(&clip_convex(&ca, &cb)).max(0.0);
    let union = a.size[0] * a.size[1] + b.size[0] * b.size[1] - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Greedy non-maximum suppression on rotated BEV IoU. Returns kept indices in
/// score-descending order (ties broken by lower index first).
pub fn nms_3d(boxes: &[Box3D], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| {
        boxes[j]
            .score
            .partial_cmp(&boxes[i].score)
            .unwrap_or(Ordering::Equal)
            .then(i.cmp(&j))
    });
    let mut suppressed = vec![false; boxes.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if !suppressed[j] && bev_rotated_iou(&boxes[i], &boxes[j]) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    keep
}
