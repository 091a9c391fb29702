//! RoI-aware sampling: per-query offsets and weights, LiDAR BEV and
//! multi-view camera feature sampling, and channel/spatial adaptive mixing.
//!
//! Everything here runs batched over `N` queries on a [`Tape`], so the same
//! code serves training, inference and gradient checks.

use std::f64::consts::PI;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{project_to_view, Box3D, CameraRig, DetectionRange, Rigid3};
use crate::params::{Bound, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// Shape parameters of one sampling block.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RiasConfig {
    pub channels: usize,
    /// Sampling points per group (K).
    pub points: usize,
    pub lidar_scales: usize,
    pub camera_scales: usize,
    pub frames: usize,
    /// Offsets are bounded by this factor times the box half-extents.
    pub offset_factor: f64,
}

impl RiasConfig {
    /// Rows of the camera RoI feature (`T * K`).
    pub fn camera_rows(&self) -> usize {
        self.frames * self.points
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.points == 0 || self.lidar_scales == 0 || self.camera_scales == 0 || self.frames == 0 {
            return Err(Error::invalid("sampling dimensions must be positive"));
        }
        if !(self.offset_factor > 0.5) {
            return Err(Error::invalid("offset factor must exceed 0.5"));
        }
        Ok(())
    }
}

/// Offsets (meters, world frame) and normalized weights for a batch.
///
/// LiDAR: `offsets [N, R, K, 2]`, `weights [N, R*K]`.
/// Camera: `offsets [N, T, K, 3]`, `weights [N, T, M*K]` (index `m*K + k`).
#[derive(Clone, Copy, Debug)]
pub struct SamplingPattern {
    pub offsets: Var,
    pub weights: Var,
}

/// Maps unbounded raw offsets `[N, G, D]` into the rotated, box-scaled world
/// offsets `factor * half_extent * (2 sigmoid(raw) - 1)`.
fn bound_offsets<T: Real>(tape: &mut Tape<T>, raw: Var, boxes: &[Box3D], dims: usize, factor: f64) -> Result<Var> {
    let n = boxes.len();
    let s = tape.sigmoid(raw);
    let s = tape.scale(s, T::lit(2.0))?;
    let unit = tape.add_scalar(s, -T::one())?;
    let half = Tensor::from_fn(&[n, 1, dims], |i| {
        let (q, d) = (i / dims, i % dims);
        T::lit(factor * 0.5 * boxes[q].size[d])
    });
    let half = tape.constant(half);
    let local = tape.mul(unit, half)?;
    // Row vectors times R^T rotate by yaw about +Z.
    let rot = Tensor::from_fn(&[n, dims, dims], |i| {
        let q = i / (dims * dims);
        let (r, c) = ((i / dims) % dims, i % dims);
        let (sn, cs) = boxes[q].yaw.sin_cos();
        let v = match (r, c) {
            (0, 0) | (1, 1) => cs,
            (0, 1) => sn,
            (1, 0) => -sn,
            (2, 2) => 1.0,
            _ => 0.0,
        };
        T::lit(v)
    });
    let rot = tape.constant(rot);
    tape.matmul(local, rot)
}

fn check_queries<T: Real>(tape: &Tape<T>, q: Var, n: usize, c: usize) -> Result<()> {
    if tape.shape(q) != [n, c] {
        return Err(Error::shape(format!(
            "queries {:?} for {} boxes of width {}",
            tape.shape(q),
            n,
            c
        )));
    }
    Ok(())
}

/// LiDAR pattern from query features `q [N, C]` and their current boxes.
pub fn predict_lidar_pattern<T: Real>(
    tape: &mut Tape<T>,
    params: &Bound,
    prefix: &str,
    q: Var,
    boxes: &[Box3D],
    cfg: &RiasConfig,
) -> Result<SamplingPattern> {
    let (n, r, k) = (boxes.len(), cfg.lidar_scales, cfg.points);
    check_queries(tape, q, n, cfg.channels)?;
    let raw = params.linear(tape, &format!("{}.offset", prefix), q)?;
    let raw = tape.reshape(raw, &[n, r * k, 2])?;
    let off = bound_offsets(tape, raw, boxes, 2, cfg.offset_factor)?;
    let offsets = tape.reshape(off, &[n, r, k, 2])?;
    let w = params.linear(tape, &format!("{}.weight", prefix), q)?;
    let weights = tape.softmax(w)?;
    Ok(SamplingPattern { offsets, weights })
}

/// Camera pattern from query features `q [N, C]` and their current boxes.
pub fn predict_camera_pattern<T: Real>(
    tape: &mut Tape<T>,
    params: &Bound,
    prefix: &str,
    q: Var,
    boxes: &[Box3D],
    cfg: &RiasConfig,
) -> Result<SamplingPattern> {
    let (n, t, k, m) = (boxes.len(), cfg.frames, cfg.points, cfg.camera_scales);
    check_queries(tape, q, n, cfg.channels)?;
    let raw = params.linear(tape, &format!("{}.offset", prefix), q)?;
    let raw = tape.reshape(raw, &[n, t * k, 3])?;
    let off = bound_offsets(tape, raw, boxes, 3, cfg.offset_factor)?;
    let offsets = tape.reshape(off, &[n, t, k, 3])?;
    let w = params.linear(tape, &format!("{}.weight", prefix), q)?;
    let w = tape.reshape(w, &[n, t, m * k])?;
    let weights = tape.softmax(w)?;
    Ok(SamplingPattern { offsets, weights })
}

/// LiDAR RoI features `[N, K, C]`: for each point `k`, the weighted sum over
/// scales of bilinear BEV samples at `center + offset`. `centers` is `[N, 2]`
/// (world x, y); `maps[r]` is `[G_r, G_r, C]`.
pub fn sample_lidar<T: Real>(
    tape: &mut Tape<T>,
    centers: Var,
    pattern: &SamplingPattern,
    maps: &[Var],
    range: &DetectionRange,
    cfg: &RiasConfig,
) -> Result<Var> {
    let os = tape.shape(pattern.offsets).to_vec();
    let (n, r, k) = (os[0], cfg.lidar_scales, cfg.points);
    if os != [n, r, k, 2] || tape.shape(pattern.weights) != [n, r * k] || tape.shape(centers) != [n, 2] {
        return Err(Error::shape("LiDAR pattern does not match the configuration"));
    }
    if maps.len() != r {
        return Err(Error::shape(format!("{} LiDAR maps for {} scales", maps.len(), r)));
    }
    range.validate()?;
    let c4 = tape.reshape(centers, &[n, 1, 1, 2])?;
    let pts = tape.add(pattern.offsets, c4)?;
    let mut acc: Option<Var> = None;
    for (ri, &map) in maps.iter().enumerate() {
        let ms = tape.shape(map).to_vec();
        if ms.len() != 3 || ms[2] != cfg.channels {
            return Err(Error::shape(format!("LiDAR map {:?}", ms)));
        }
        let (rows, cols) = (ms[0], ms[1]);
        let p = tape.slice(pts, 1, ri, 1)?;
        let p = tape.reshape(p, &[n * k, 2])?;
        let sx = cols as f64 / (range.x.1 - range.x.0);
        let sy = rows as f64 / (range.y.1 - range.y.0);
        let scale = tape.constant(Tensor::vector(vec![T::lit(sx), T::lit(sy)]));
        let shift = tape.constant(Tensor::vector(vec![T::lit(-range.x.0 * sx), T::lit(-range.y.0 * sy)]));
        let coords = tape.mul(p, scale)?;
        let coords = tape.add(coords, shift)?;
        let s = tape.bilinear_sample(map, coords)?;
        let s = tape.reshape(s, &[n, k, cfg.channels])?;
        let w = tape.slice(pattern.weights, 1, ri * k, k)?;
        let w = tape.reshape(w, &[n, k, 1])?;
        let term = tape.mul(s, w)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    acc.ok_or(Error::Empty("LiDAR scales"))
}

/// `x R^T + t` for row points `x [P, 3]`.
fn rigid_rows<T: Real>(tape: &mut Tape<T>, x: Var, tf: &Rigid3) -> Result<Var> {
    let rt = Tensor::from_fn(&[3, 3], |i| T::lit(tf.rotation[i % 3][i / 3]));
    let rt = tape.constant(rt);
    let y = tape.matmul(x, rt)?;
    let t = tape.constant(Tensor::vector(tf.translation.iter().map(|&v| T::lit(v)).collect()));
    tape.add(y, t)
}

/// Camera RoI features `[N, T*K, C]`. For every `(t, k)` the sampling point
/// `center + offset` is aligned to frame `t`; its row is the mean over hit
/// views of the scale-weighted bilinear samples, or zero without hits.
/// `centers` is `[N, 3]`; `maps` follows [`crate::featuremaps::CameraFeatureSet`]
/// ordering (`(v*M + m)*T + t`).
pub fn sample_camera<T: Real>(
    tape: &mut Tape<T>,
    centers: Var,
    pattern: &SamplingPattern,
    maps: &[Var],
    rig: &CameraRig,
    strides: &[f64],
    cfg: &RiasConfig,
) -> Result<Var> {
    let os = tape.shape(pattern.offsets).to_vec();
    let (n, t_n, k, m_n, c) = (os[0], cfg.frames, cfg.points, cfg.camera_scales, cfg.channels);
    if os != [n, t_n, k, 3] || tape.shape(pattern.weights) != [n, t_n, m_n * k] || tape.shape(centers) != [n, 3] {
        return Err(Error::shape("camera pattern does not match the configuration"));
    }
    let v_n = rig.num_views();
    if maps.len() != v_n * m_n * t_n || strides.len() != m_n || rig.num_frames() < t_n {
        return Err(Error::shape("camera maps do not match the rig and configuration"));
    }
    let c4 = tape.reshape(centers, &[n, 1, 1, 3])?;
    let pts = tape.add(pattern.offsets, c4)?;
    let mut rows_per_frame = Vec::with_capacity(t_n);
    for t in 0..t_n {
        let p = tape.slice(pts, 1, t, 1)?;
        let p = tape.reshape(p, &[n * k, 3])?;
        let aligned = rigid_rows(tape, p, &rig.alignment(t))?;
        let w = tape.slice(pattern.weights, 1, t, 1)?;
        let w = tape.reshape(w, &[n, m_n, k])?;
        let w = tape.transpose(w)?;
        let w = tape.reshape(w, &[n * k, m_n])?;

        let hits: Vec<Vec<usize>> = {
            let av = tape.value(aligned).data();
            (0..v_n)
                .map(|v| {
                    (0..n * k)
                        .filter(|&i| {
                            let p = [0, 1, 2].map(|d| av[3 * i + d].to_f64_lossy());
                            project_to_view(p, &rig.views[v]).is_some()
                        })
                        .collect()
                })
                .collect()
        };
        let mut count = vec![0usize; n * k];
        for rows in &hits {
            for &i in rows {
                count[i] += 1;
            }
        }
        let mut acc: Option<Var> = None;
        for (v, rows) in hits.iter().enumerate() {
            if rows.is_empty() {
                continue;
            }
            let view = &rig.views[v];
            let pv = tape.gather(aligned, rows)?;
            let cam = rigid_rows(tape, pv, &view.extrinsics)?;
            let kt = Tensor::from_fn(&[3, 3], |i| T::lit(view.intrinsics[i % 3][i / 3]));
            let kt = tape.constant(kt);
            let kc = tape.matmul(cam, kt)?;
            let depth = tape.slice(cam, 1, 2, 1)?;
            let inv = tape.recip(depth);
            let uv = tape.slice(kc, 1, 0, 2)?;
            let uv = tape.mul(uv, inv)?;
            let wv = tape.gather(w, rows)?;
            let mut sum: Option<Var> = None;
            for (m, &stride) in strides.iter().enumerate() {
                let map = maps[(v * m_n + m) * t_n + t];
                if tape.shape(map).len() != 3 || tape.shape(map)[2] != c {
                    return Err(Error::shape(format!("camera map {:?}", tape.shape(map))));
                }
                let coords = tape.scale(uv, T::lit(1.0 / stride))?;
                let s = tape.bilinear_sample(map, coords)?;
                let wm = tape.slice(wv, 1, m, 1)?;
                let term = tape.mul(s, wm)?;
                sum = Some(match sum {
                    Some(a) => tape.add(a, term)?,
                    None => term,
                });
            }
            let sum = sum.ok_or(Error::Empty("camera scales"))?;
            let norm = Tensor::from_fn(&[rows.len(), 1], |i| T::lit(1.0 / count[rows[i]] as f64));
            let norm = tape.constant(norm);
            let sum = tape.mul(sum, norm)?;
            let scattered = tape.scatter_add(sum, rows, n * k)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, scattered)?,
                None => scattered,
            });
        }
        let frame = match acc {
            Some(a) => a,
            None => tape.constant(Tensor::zeros(&[n * k, c])),
        };
        rows_per_frame.push(tape.reshape(frame, &[n, k, c])?);
    }
    tape.concat(&rows_per_frame, 1)
}

/// Channel then spatial mixing with query-generated matrices, aggregation to
/// `C`, and a residual layer norm. `q` is `[N, C]`, `f` is `[N, S, C]`.
pub fn adaptive_mix<T: Real>(tape: &mut Tape<T>, params: &Bound, prefix: &str, q: Var, f: Var) -> Result<Var> {
    let fs = tape.shape(f).to_vec();
    let qs = tape.shape(q).to_vec();
    if fs.len() != 3 || qs.len() != 2 || fs[0] != qs[0] || fs[2] != qs[1] {
        return Err(Error::shape(format!("adaptive_mix query {:?} feature {:?}", qs, fs)));
    }
    let (n, s, c) = (fs[0], fs[1], fs[2]);
    let spat_w = params.get(&format!("{}.spat.w", prefix))?;
    if tape.shape(spat_w).get(1) != Some(&(s * s)) {
        return Err(Error::shape(format!("spatial generator {:?} for S = {}", tape.shape(spat_w), s)));
    }
    let wc = params.linear(tape, &format!("{}.chan", prefix), q)?;
    let wc = tape.reshape(wc, &[n, c, c])?;
    let mc = tape.matmul(f, wc)?;
    let mc = params.layer_norm(tape, &format!("{}.chan_ln", prefix), mc)?;
    let mc = tape.relu(mc);
    let ws = params.linear(tape, &format!("{}.spat", prefix), q)?;
    let ws = tape.reshape(ws, &[n, s, s])?;
    let mct = tape.transpose(mc)?;
    let ms = tape.matmul(mct, ws)?;
    let ms = params.layer_norm(tape, &format!("{}.spat_ln", prefix), ms)?;
    let ms = tape.relu(ms);
    let flat = tape.reshape(ms, &[n, c * s])?;
    let out = params.linear(tape, &format!("{}.out", prefix), flat)?;
    let res = tape.add(q, out)?;
    params.layer_norm(tape, &format!("{}.ln", prefix), res)
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Raw offset bias placing group point `k` of `points` on a ring at half the
/// box half-extent (xy plane).
fn ring_bias(k: usize, points: usize, group: usize, dims: usize, factor: f64) -> Vec<f64> {
    let phi = 2.0 * PI * k as f64 / points as f64 + PI * group as f64 / points as f64;
    let target = [0.5 * phi.cos(), 0.5 * phi.sin(), 0.0];
    (0..dims).map(|d| logit((target[d] / factor + 1.0) / 2.0)).collect()
}

/// Mixer parameters for feature rows `S` and width `C`: generator weights are
/// small, generator biases produce identity matrices.
pub fn init_mix<T: Real>(store: &mut ParamStore<T>, prefix: &str, s: usize, c: usize, rng: &mut ChaCha8Rng) {
    let eye = |d: usize| Tensor::from_fn(&[d * d], |i| if i / d == i % d { T::one() } else { T::zero() });
    store.init_linear(&format!("{}.chan", prefix), c, c * c, 0.05, rng);
    store.insert(format!("{}.chan.b", prefix), eye(c));
    store.init_layer_norm(&format!("{}.chan_ln", prefix), c);
    store.init_linear(&format!("{}.spat", prefix), c, s * s, 0.05, rng);
    store.insert(format!("{}.spat.b", prefix), eye(s));
    store.init_layer_norm(&format!("{}.spat_ln", prefix), s);
    store.init_linear(&format!("{}.out", prefix), s * c, c, 1.0, rng);
    store.init_layer_norm(&format!("{}.ln", prefix), c);
}

/// Pattern predictors and mixers for both branches under `prefix`
/// (`{prefix}.lid.*`, `{prefix}.cam.*`).
pub fn init_rias<T: Real>(store: &mut ParamStore<T>, prefix: &str, cfg: &RiasConfig, rng: &mut ChaCha8Rng) {
    let (c, k, r, m, t) = (cfg.channels, cfg.points, cfg.lidar_scales, cfg.camera_scales, cfg.frames);
    store.init_zero_linear(&format!("{}.lid.offset", prefix), c, r * k * 2);
    let bias: Vec<T> = (0..r)
        .flat_map(|ri| (0..k).flat_map(move |ki| ring_bias(ki, k, ri, 2, cfg.offset_factor)))
        .map(T::lit)
        .collect();
    store.insert(format!("{}.lid.offset.b", prefix), Tensor::vector(bias));
    store.init_zero_linear(&format!("{}.lid.weight", prefix), c, r * k);

    store.init_zero_linear(&format!("{}.cam.offset", prefix), c, t * k * 3);
    let bias: Vec<T> = (0..t)
        .flat_map(|ti| (0..k).flat_map(move |ki| ring_bias(ki, k, ti, 3, cfg.offset_factor)))
        .map(T::lit)
        .collect();
    store.insert(format!("{}.cam.offset.b", prefix), Tensor::vector(bias));
    store.init_zero_linear(&format!("{}.cam.weight", prefix), c, t * m * k);

    init_mix(store, &format!("{}.lid.mix", prefix), k, c, rng);
    init_mix(store, &format!("{}.cam.mix", prefix), cfg.camera_rows(), c, rng);
}
