//! Forward-only kernels with preallocated workspaces, and the timing
//! harness that reports their latency percentiles.
//!
//! The kernels compute the same values as the tape ops in [`crate::rias`],
//! [`crate::uaf`] and [`crate::decoder`] but write into caller-owned
//! buffers, so a timed repetition performs no heap allocation.

use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{box_encoding_row, box_to_params, Decoder, ModelConfig, BOX_ENCODING, BOX_PARAMS};
use crate::error::{Error, Result};
use crate::featuremaps::{bilinear_sample_into, CameraFeatureSet, FeatureMap, LidarFeaturePyramid};
use crate::geometry::{project_to_view, Box3D, CameraRig, DetectionRange};
use crate::params::ParamStore;
use crate::rias::RiasConfig;
use crate::scenesim::{generate_dataset, SensorLayout, SimConfig, NUM_CLASSES};
use crate::tape::{sigmoid, softplus};
use crate::tensor::{normalize_row, softmax_row, Real};
use crate::uaf::FusionMode;

pub const KERNELS: [&str; 4] = ["sample_lidar", "sample_camera", "adaptive_mix", "full_layer"];

/// Minimum number of timed repetitions.
pub const MIN_REPETITIONS: usize = 30;
pub const WARMUP: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kernel {
    SampleLidar,
    SampleCamera,
    AdaptiveMix,
    FullLayer,
}

impl FromStr for Kernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sample_lidar" => Ok(Self::SampleLidar),
            "sample_camera" => Ok(Self::SampleCamera),
            "adaptive_mix" => Ok(Self::AdaptiveMix),
            "full_layer" => Ok(Self::FullLayer),
            other => Err(Error::invalid(format!("unknown kernel `{}`", other))),
        }
    }
}

impl Kernel {
    pub fn name(self) -> &'static str {
        match self {
            Self::SampleLidar => KERNELS[0],
            Self::SampleCamera => KERNELS[1],
            Self::AdaptiveMix => KERNELS[2],
            Self::FullLayer => KERNELS[3],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchShape {
    pub num_queries: usize,
    pub points: usize,
    pub camera_scales: usize,
    pub lidar_scales: usize,
    pub frames: usize,
    pub channels: usize,
    pub views: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub mean_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub kernel: String,
    pub shape: BenchShape,
    pub warmup: usize,
    pub repetitions: usize,
    pub threads: usize,
    pub p50_ms: f64,
    pub p90_ms: f64,
    pub p99_ms: f64,
    pub mean_ms: f64,
    /// Queries per second at the median latency.
    pub queries_per_second: f64,
    /// Per-stage means; only the full layer has stages.
    pub stages: Vec<StageTiming>,
}

/// Nearest-rank percentile of sorted samples.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// `x W + b` with row-major `W [in, out]`.
#[derive(Clone, Debug)]
struct Linear<T> {
    w: Vec<T>,
    b: Vec<T>,
    n_out: usize,
}

impl<T: Real> Linear<T> {
    fn load(store: &ParamStore<T>, prefix: &str) -> Result<Self> {
        let w = store.get(&format!("{}.w", prefix))?;
        let b = store.get(&format!("{}.b", prefix))?;
        Ok(Self {
            w: w.data().to_vec(),
            b: b.data().to_vec(),
            n_out: w.shape()[1],
        })
    }

    fn apply(&self, x: &[T], out: &mut [T]) {
        out.copy_from_slice(&self.b);
        for (&xi, row) in x.iter().zip(self.w.chunks_exact(self.n_out)) {
            for (o, &w) in out.iter_mut().zip(row) {
                *o += xi * w;
            }
        }
    }
}

#[derive(Clone, Debug)]
struct Mlp2<T> {
    l0: Linear<T>,
    l1: Linear<T>,
}

impl<T: Real> Mlp2<T> {
    fn load(store: &ParamStore<T>, prefix: &str) -> Result<Self> {
        Ok(Self {
            l0: Linear::load(store, &format!("{}.0", prefix))?,
            l1: Linear::load(store, &format!("{}.1", prefix))?,
        })
    }

    fn hidden(&self) -> usize {
        self.l0.n_out
    }

    fn apply(&self, x: &[T], hidden: &mut [T], out: &mut [T]) {
        self.l0.apply(x, hidden);
        for h in hidden.iter_mut() {
            *h = h.max(T::zero());
        }
        self.l1.apply(hidden, out);
    }
}

#[derive(Clone, Debug)]
struct LayerNorm<T> {
    gain: Vec<T>,
    shift: Vec<T>,
}

impl<T: Real> LayerNorm<T> {
    fn load(store: &ParamStore<T>, prefix: &str) -> Result<Self> {
        Ok(Self {
            gain: store.get(&format!("{}.gain", prefix))?.data().to_vec(),
            shift: store.get(&format!("{}.shift", prefix))?.data().to_vec(),
        })
    }

    /// Normalizes every row of `x` in place; `tmp` holds one row.
    fn apply_rows(&self, x: &mut [T], tmp: &mut [T]) {
        let c = self.gain.len();
        for row in x.chunks_exact_mut(c) {
            normalize_row(row, tmp);
            for (((o, &h), &g), &s) in row.iter_mut().zip(tmp.iter()).zip(&self.gain).zip(&self.shift) {
                *o = h * g + s;
            }
        }
    }
}

/// Channel and spatial mixing for feature rows `[S, C]`.
#[derive(Clone, Debug)]
pub struct Mixer<T> {
    s: usize,
    c: usize,
    chan: Linear<T>,
    chan_ln: LayerNorm<T>,
    spat: Linear<T>,
    spat_ln: LayerNorm<T>,
    out: Linear<T>,
    ln: LayerNorm<T>,
}

/// Scratch buffers of one [`Mixer`] call.
#[derive(Clone, Debug)]
pub struct MixScratch<T> {
    wc: Vec<T>,
    mc: Vec<T>,
    ws: Vec<T>,
    ms: Vec<T>,
    row: Vec<T>,
}

impl<T: Real> Mixer<T> {
    pub fn load(store: &ParamStore<T>, prefix: &str, s: usize, c: usize) -> Result<Self> {
        let m = Self {
            s,
            c,
            chan: Linear::load(store, &format!("{}.chan", prefix))?,
            chan_ln: LayerNorm::load(store, &format!("{}.chan_ln", prefix))?,
            spat: Linear::load(store, &format!("{}.spat", prefix))?,
            spat_ln: LayerNorm::load(store, &format!("{}.spat_ln", prefix))?,
            out: Linear::load(store, &format!("{}.out", prefix))?,
            ln: LayerNorm::load(store, &format!("{}.ln", prefix))?,
        };
        if m.chan.n_out != c * c || m.spat.n_out != s * s || m.out.n_out != c {
            return Err(Error::shape(format!("mixer `{}` does not fit S = {}, C = {}", prefix, s, c)));
        }
        Ok(m)
    }

    pub fn scratch(&self) -> MixScratch<T> {
        let (s, c) = (self.s, self.c);
        MixScratch {
            wc: vec![T::zero(); c * c],
            mc: vec![T::zero(); s * c],
            ws: vec![T::zero(); s * s],
            ms: vec![T::zero(); c * s],
            row: vec![T::zero(); s.max(c)],
        }
    }

    /// Mixes `f [S, C]` under query `q [C]` into `out [C]`.
    pub fn apply(&self, q: &[T], f: &[T], out: &mut [T], w: &mut MixScratch<T>) {
        let (s, c) = (self.s, self.c);
        self.chan.apply(q, &mut w.wc);
        for si in 0..s {
            let dst = &mut w.mc[si * c..(si + 1) * c];
            dst.fill(T::zero());
            for (i, &x) in f[si * c..(si + 1) * c].iter().enumerate() {
                for (o, &m) in dst.iter_mut().zip(&w.wc[i * c..(i + 1) * c]) {
                    *o += x * m;
                }
            }
        }
        self.chan_ln.apply_rows(&mut w.mc, &mut w.row[..c]);
        for v in w.mc.iter_mut() {
            *v = v.max(T::zero());
        }
        self.spat.apply(q, &mut w.ws);
        for ci in 0..c {
            let dst = &mut w.ms[ci * s..(ci + 1) * s];
            dst.fill(T::zero());
            for si in 0..s {
                let x = w.mc[si * c + ci];
                for (o, &m) in dst.iter_mut().zip(&w.ws[si * s..(si + 1) * s]) {
                    *o += x * m;
                }
            }
        }
        self.spat_ln.apply_rows(&mut w.ms, &mut w.row[..s]);
        for v in w.ms.iter_mut() {
            *v = v.max(T::zero());
        }
        self.out.apply(&w.ms, out);
        for (o, &qi) in out.iter_mut().zip(q) {
            *o += qi;
        }
        self.ln.apply_rows(out, &mut w.row[..c]);
    }
}

/// Offset and weight predictor of one branch.
#[derive(Clone, Debug)]
pub struct PatternHead<T> {
    offset: Linear<T>,
    weight: Linear<T>,
    dims: usize,
    /// Softmax groups per query and their width.
    groups: usize,
    factor: f64,
}

impl<T: Real> PatternHead<T> {
    pub fn lidar(store: &ParamStore<T>, prefix: &str, cfg: &RiasConfig) -> Result<Self> {
        Ok(Self {
            offset: Linear::load(store, &format!("{}.offset", prefix))?,
            weight: Linear::load(store, &format!("{}.weight", prefix))?,
            dims: 2,
            groups: 1,
            factor: cfg.offset_factor,
        })
    }

    pub fn camera(store: &ParamStore<T>, prefix: &str, cfg: &RiasConfig) -> Result<Self> {
        Ok(Self {
            offset: Linear::load(store, &format!("{}.offset", prefix))?,
            weight: Linear::load(store, &format!("{}.weight", prefix))?,
            dims: 3,
            groups: cfg.frames,
            factor: cfg.offset_factor,
        })
    }

    pub fn offsets_len(&self) -> usize {
        self.offset.n_out
    }

    pub fn weights_len(&self) -> usize {
        self.weight.n_out
    }

    /// Rotated, box-scaled offsets and softmax weights for one query.
    /// `tmp` must hold `weights_len()` values.
    pub fn apply(&self, q: &[T], b: &Box3D, offsets: &mut [T], weights: &mut [T], tmp: &mut [T]) {
        let d = self.dims;
        self.offset.apply(q, offsets);
        let (sn, cs) = b.yaw.sin_cos();
        let (sn, cs) = (T::lit(sn), T::lit(cs));
        let half: [T; 3] = std::array::from_fn(|i| T::lit(self.factor * 0.5 * b.size[i]));
        for p in offsets.chunks_exact_mut(d) {
            let mut l = [T::zero(); 3];
            for i in 0..d {
                let unit = sigmoid(p[i]) * T::lit(2.0) - T::one();
                l[i] = unit * half[i];
            }
            p[0] = l[0] * cs - l[1] * sn;
            p[1] = l[0] * sn + l[1] * cs;
            if d == 3 {
                p[2] = l[2];
            }
        }
        self.weight.apply(q, tmp);
        let g = tmp.len() / self.groups;
        for (src, dst) in tmp.chunks_exact(g).zip(weights.chunks_exact_mut(g)) {
            softmax_row(src, dst);
        }
    }
}

/// LiDAR RoI features `out [N, K, C]` from `offsets [N, R, K, 2]` and
/// `weights [N, R*K]` around the box centers.
pub fn sample_lidar_into<T: Real>(
    boxes: &[Box3D],
    offsets: &[T],
    weights: &[T],
    maps: &[FeatureMap<T>],
    range: &DetectionRange,
    cfg: &RiasConfig,
    out: &mut [T],
) {
    let (r_n, k_n, c) = (cfg.lidar_scales, cfg.points, cfg.channels);
    out.fill(T::zero());
    for (n, b) in boxes.iter().enumerate() {
        let (cx, cy) = (T::lit(b.center[0]), T::lit(b.center[1]));
        for (r, map) in maps.iter().enumerate().take(r_n) {
            let sx = map.width as f64 / (range.x.1 - range.x.0);
            let sy = map.height as f64 / (range.y.1 - range.y.0);
            let (tx, ty) = (T::lit(-range.x.0 * sx), T::lit(-range.y.0 * sy));
            let (sx, sy) = (T::lit(sx), T::lit(sy));
            for k in 0..k_n {
                let o = ((n * r_n + r) * k_n + k) * 2;
                let x = (offsets[o] + cx) * sx + tx;
                let y = (offsets[o + 1] + cy) * sy + ty;
                let w = weights[n * r_n * k_n + r * k_n + k];
                let dst = &mut out[(n * k_n + k) * c..(n * k_n + k + 1) * c];
                bilinear_sample_into(map, x, y, w, dst);
            }
        }
    }
}

/// Camera RoI features `out [N, T*K, C]` from `offsets [N, T, K, 3]` and
/// `weights [N, T, M*K]`: per point, the mean over hit views of the
/// scale-weighted samples.
pub fn sample_camera_into<T: Real>(
    boxes: &[Box3D],
    offsets: &[T],
    weights: &[T],
    set: &CameraFeatureSet<T>,
    rig: &CameraRig,
    cfg: &RiasConfig,
    out: &mut [T],
) {
    let (t_n, k_n, m_n, c) = (cfg.frames, cfg.points, cfg.camera_scales, cfg.channels);
    out.fill(T::zero());
    for t in 0..t_n {
        let tf = rig.alignment(t);
        for (n, b) in boxes.iter().enumerate() {
            let center: [T; 3] = std::array::from_fn(|d| T::lit(b.center[d]));
            for k in 0..k_n {
                let o = ((n * t_n + t) * k_n + k) * 3;
                let p: [T; 3] = std::array::from_fn(|d| offsets[o + d] + center[d]);
                let aligned: [f64; 3] = std::array::from_fn(|j| {
                    let mut v = T::lit(tf.translation[j]);
                    for (i, &pi) in p.iter().enumerate() {
                        v += pi * T::lit(tf.rotation[j][i]);
                    }
                    v.to_f64_lossy()
                });
                let hits = rig.views.iter().filter(|v| project_to_view(aligned, v).is_some()).count();
                if hits == 0 {
                    continue;
                }
                let inv = 1.0 / hits as f64;
                let row = n * t_n * k_n + t * k_n + k;
                let dst = &mut out[row * c..(row + 1) * c];
                for (v, view) in rig.views.iter().enumerate() {
                    let Some((u, w, _)) = project_to_view(aligned, view) else {
                        continue;
                    };
                    for (m, &stride) in set.strides.iter().enumerate() {
                        let wt = weights[(n * t_n + t) * m_n * k_n + m * k_n + k] * T::lit(inv);
                        bilinear_sample_into(set.get(v, m, t), T::lit(u / stride), T::lit(w / stride), wt, dst);
                    }
                }
            }
        }
    }
}

/// Every weight of one decoder layer in kernel form.
#[derive(Clone, Debug)]
pub struct LayerKernel<T> {
    pub cfg: RiasConfig,
    pos: Mlp2<T>,
    pub lid_pattern: PatternHead<T>,
    pub cam_pattern: PatternHead<T>,
    pub lid_mix: Mixer<T>,
    pub cam_mix: Mixer<T>,
    dist_cam: Mlp2<T>,
    dist_lid: Mlp2<T>,
    fuse: Mlp2<T>,
    query_ln: LayerNorm<T>,
    box_head: Mlp2<T>,
    cls_head: Mlp2<T>,
    fusion: FusionMode,
    center_scale: f64,
    velocity_scale: f64,
}

/// Outputs of [`LayerKernel::forward`], all row-major over queries.
#[derive(Clone, Debug)]
pub struct LayerBuffers<T> {
    pub n: usize,
    pub q: Vec<T>,
    pub lid_offsets: Vec<T>,
    pub lid_weights: Vec<T>,
    pub cam_offsets: Vec<T>,
    pub cam_weights: Vec<T>,
    pub f_lid: Vec<T>,
    pub f_cam: Vec<T>,
    pub m_lid: Vec<T>,
    pub m_cam: Vec<T>,
    pub dist_cam: Vec<T>,
    pub dist_lid: Vec<T>,
    pub q_next: Vec<T>,
    pub box_params: Vec<T>,
    pub logits: Vec<T>,
    enc: [T; BOX_ENCODING],
    hidden: Vec<T>,
    tmp: Vec<T>,
    pooled: Vec<T>,
    cat: Vec<T>,
    fused: Vec<T>,
    mix_lid: MixScratch<T>,
    mix_cam: MixScratch<T>,
}

/// Stage names of the full layer, in execution order.
pub const STAGES: [&str; 5] = ["pattern", "sample_lidar", "sample_camera", "adaptive_mix", "fuse_and_heads"];

impl<T: Real> LayerKernel<T> {
    pub fn from_decoder(decoder: &Decoder<T>, layer: usize) -> Result<Self> {
        if layer >= decoder.model.layers {
            return Err(Error::invalid(format!("layer {} of {}", layer, decoder.model.layers)));
        }
        let p = format!("layer{}", layer);
        let s = &decoder.params;
        let cfg = decoder.rias_config();
        let c = cfg.channels;
        Ok(Self {
            pos: Mlp2::load(s, &format!("{}.pos", p))?,
            lid_pattern: PatternHead::lidar(s, &format!("{}.lid", p), &cfg)?,
            cam_pattern: PatternHead::camera(s, &format!("{}.cam", p), &cfg)?,
            lid_mix: Mixer::load(s, &format!("{}.lid.mix", p), cfg.points, c)?,
            cam_mix: Mixer::load(s, &format!("{}.cam.mix", p), cfg.camera_rows(), c)?,
            dist_cam: Mlp2::load(s, &format!("{}.uaf.dist_cam", p))?,
            dist_lid: Mlp2::load(s, &format!("{}.uaf.dist_lid", p))?,
            fuse: Mlp2::load(s, &format!("{}.uaf.fuse", p))?,
            query_ln: LayerNorm::load(s, &format!("{}.query_ln", p))?,
            box_head: Mlp2::load(s, &format!("{}.box", p))?,
            cls_head: Mlp2::load(s, &format!("{}.cls", p))?,
            fusion: decoder.model.fusion,
            center_scale: decoder.model.center_scale,
            velocity_scale: decoder.model.velocity_scale,
            cfg,
        })
    }

    /// Buffers for `n` queries.
    pub fn buffers(&self, n: usize) -> LayerBuffers<T> {
        let cfg = &self.cfg;
        let c = cfg.channels;
        let z = |len: usize| vec![T::zero(); len];
        let hidden = [&self.pos, &self.dist_cam, &self.dist_lid, &self.fuse, &self.box_head, &self.cls_head]
            .iter()
            .map(|m| m.hidden())
            .max()
            .unwrap_or(0);
        let tmp = self.lid_pattern.weights_len().max(self.cam_pattern.weights_len());
        LayerBuffers {
            n,
            q: z(n * c),
            lid_offsets: z(n * self.lid_pattern.offsets_len()),
            lid_weights: z(n * self.lid_pattern.weights_len()),
            cam_offsets: z(n * self.cam_pattern.offsets_len()),
            cam_weights: z(n * self.cam_pattern.weights_len()),
            f_lid: z(n * cfg.points * c),
            f_cam: z(n * cfg.camera_rows() * c),
            m_lid: z(n * c),
            m_cam: z(n * c),
            dist_cam: z(n),
            dist_lid: z(n),
            q_next: z(n * c),
            box_params: z(n * BOX_PARAMS),
            logits: z(n * NUM_CLASSES),
            enc: [T::zero(); BOX_ENCODING],
            hidden: z(hidden),
            tmp: z(tmp.max(c)),
            pooled: z(c),
            cat: z(2 * c),
            fused: z(c),
            mix_lid: self.lid_mix.scratch(),
            mix_cam: self.cam_mix.scratch(),
        }
    }

    /// One decoder layer with predicted uncertainties. `q` holds the input
    /// queries `[N, C]`; `stage_ns` accumulates per-stage wall time.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        q: &[T],
        boxes: &[Box3D],
        lidar: &LidarFeaturePyramid<T>,
        camera: &CameraFeatureSet<T>,
        rig: &CameraRig,
        b: &mut LayerBuffers<T>,
        stage_ns: &mut [u64; 5],
    ) {
        let cfg = &self.cfg;
        let c = cfg.channels;
        let n = b.n;
        let hp = self.pos.hidden();

        let t0 = Instant::now();
        b.q.copy_from_slice(q);
        let (lo, lw) = (self.lid_pattern.offsets_len(), self.lid_pattern.weights_len());
        let (co, cw) = (self.cam_pattern.offsets_len(), self.cam_pattern.weights_len());
        for (i, bx) in boxes.iter().enumerate() {
            for (e, v) in b.enc.iter_mut().zip(box_encoding_row(bx, &lidar.range)) {
                *e = T::lit(v);
            }
            self.pos.apply(&b.enc, &mut b.hidden[..hp], &mut b.fused);
            let qi = &mut b.q[i * c..(i + 1) * c];
            for (o, &p) in qi.iter_mut().zip(&b.fused) {
                *o += p;
            }
            let qi = &b.q[i * c..(i + 1) * c];
            self.lid_pattern.apply(
                qi,
                bx,
                &mut b.lid_offsets[i * lo..(i + 1) * lo],
                &mut b.lid_weights[i * lw..(i + 1) * lw],
                &mut b.tmp[..lw],
            );
            self.cam_pattern.apply(
                qi,
                bx,
                &mut b.cam_offsets[i * co..(i + 1) * co],
                &mut b.cam_weights[i * cw..(i + 1) * cw],
                &mut b.tmp[..cw],
            );
        }
        let t1 = Instant::now();
        sample_lidar_into(boxes, &b.lid_offsets, &b.lid_weights, &lidar.maps, &lidar.range, cfg, &mut b.f_lid);
        let t2 = Instant::now();
        sample_camera_into(boxes, &b.cam_offsets, &b.cam_weights, camera, rig, cfg, &mut b.f_cam);
        let t3 = Instant::now();
        let (sl, sc) = (cfg.points * c, cfg.camera_rows() * c);
        for i in 0..n {
            let qi = &b.q[i * c..(i + 1) * c];
            self.lid_mix
                .apply(qi, &b.f_lid[i * sl..(i + 1) * sl], &mut b.m_lid[i * c..(i + 1) * c], &mut b.mix_lid);
            self.cam_mix
                .apply(qi, &b.f_cam[i * sc..(i + 1) * sc], &mut b.m_cam[i * c..(i + 1) * c], &mut b.mix_cam);
        }
        let t4 = Instant::now();
        for (i, bx) in boxes.iter().enumerate() {
            let mut u = [T::zero(); 2];
            for (j, (f, rows, head, dist)) in [
                (&b.f_cam, cfg.camera_rows(), &self.dist_cam, &mut b.dist_cam),
                (&b.f_lid, cfg.points, &self.dist_lid, &mut b.dist_lid),
            ]
            .into_iter()
            .enumerate()
            {
                b.pooled.fill(T::zero());
                for row in f[i * rows * c..(i + 1) * rows * c].chunks_exact(c) {
                    for (p, &v) in b.pooled.iter_mut().zip(row) {
                        *p += v;
                    }
                }
                let inv = T::lit(1.0 / rows as f64);
                for p in b.pooled.iter_mut() {
                    *p *= inv;
                }
                let mut d = [T::zero()];
                head.apply(&b.pooled, &mut b.hidden[..head.hidden()], &mut d);
                dist[i] = softplus(d[0]);
                if self.fusion == FusionMode::Uaf {
                    u[j] = -(-dist[i]).exp_m1();
                }
            }
            for (dst, (src, uj)) in b.cat.chunks_exact_mut(c).zip([(&b.m_cam, u[0]), (&b.m_lid, u[1])]) {
                for (o, &v) in dst.iter_mut().zip(&src[i * c..(i + 1) * c]) {
                    *o = v * (T::one() - uj);
                }
            }
            self.fuse.apply(&b.cat, &mut b.hidden[..self.fuse.hidden()], &mut b.fused);
            let qn = &mut b.q_next[i * c..(i + 1) * c];
            for ((o, &qv), &f) in qn.iter_mut().zip(&b.q[i * c..(i + 1) * c]).zip(&b.fused) {
                *o = qv + f;
            }
            self.query_ln.apply_rows(qn, &mut b.tmp[..c]);
            let qn = &b.q_next[i * c..(i + 1) * c];
            let bp = &mut b.box_params[i * BOX_PARAMS..(i + 1) * BOX_PARAMS];
            self.box_head.apply(qn, &mut b.hidden[..self.box_head.hidden()], bp);
            for (o, base) in bp.iter_mut().zip(box_to_params(bx, self.center_scale, self.velocity_scale)) {
                *o += T::lit(base);
            }
            self.cls_head.apply(
                qn,
                &mut b.hidden[..self.cls_head.hidden()],
                &mut b.logits[i * NUM_CLASSES..(i + 1) * NUM_CLASSES],
            );
        }
        let t5 = Instant::now();
        for (acc, (a, z)) in stage_ns.iter_mut().zip([(t0, t1), (t1, t2), (t2, t3), (t3, t4), (t4, t5)]) {
            *acc += (z - a).as_nanos() as u64;
        }
    }
}

/// Deterministic inputs of one kernel benchmark.
pub struct BenchCase {
    pub kernel: Kernel,
    pub shape: BenchShape,
    layer: LayerKernel<f32>,
    boxes: Vec<Box3D>,
    queries: Vec<f32>,
    lidar: LidarFeaturePyramid<f32>,
    camera: CameraFeatureSet<f32>,
    rig: CameraRig,
    buffers: LayerBuffers<f32>,
    pub stage_ns: [u64; 5],
}

impl BenchCase {
    /// One simulated scene, layer 0 of freshly initialized heads, and
    /// `N_q` random boxes inside the detection range.
    pub fn new(kernel: Kernel, model: &ModelConfig, layout: &SensorLayout, seed: u64) -> Result<Self> {
        let decoder = Decoder::<f32>::new(model.clone(), layout.clone(), seed)?;
        let sim = SimConfig {
            num_scenes: 1,
            ..SimConfig::default()
        };
        let scene = generate_dataset(layout, &sim, seed, 1)?
            .pop()
            .ok_or(Error::Empty("benchmark scene"))?;
        let n = model.queries.num_queries;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xbe4c);
        let range = layout.range;
        let boxes: Vec<Box3D> = (0..n)
            .map(|_| {
                let mut b = Box3D::new(
                    [
                        rng.random_range(range.x.0 * 0.6..range.x.1 * 0.6),
                        rng.random_range(range.y.0 * 0.6..range.y.1 * 0.6),
                        rng.random_range(-1.0..1.0),
                    ],
                    [rng.random_range(0.5..5.0), rng.random_range(0.5..2.5), rng.random_range(1.0..2.5)],
                    rng.random_range(-3.0..3.0),
                );
                b.velocity = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
                b
            })
            .collect();
        let c = layout.channels;
        let queries: Vec<f32> = (0..n * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let layer = LayerKernel::from_decoder(&decoder, 0)?;
        let cfg = layer.cfg;
        let shape = BenchShape {
            num_queries: n,
            points: cfg.points,
            camera_scales: cfg.camera_scales,
            lidar_scales: cfg.lidar_scales,
            frames: cfg.frames,
            channels: c,
            views: layout.num_views,
        };
        let mut case = Self {
            kernel,
            shape,
            buffers: layer.buffers(n),
            layer,
            boxes,
            queries,
            lidar: scene.lidar,
            camera: scene.camera,
            rig: scene.rig,
            stage_ns: [0; 5],
        };
        // Patterns and sampled features feed the partial kernels.
        case.forward();
        case.stage_ns = [0; 5];
        Ok(case)
    }

    fn forward(&mut self) {
        self.layer.forward(
            &self.queries,
            &self.boxes,
            &self.lidar,
            &self.camera,
            &self.rig,
            &mut self.buffers,
            &mut self.stage_ns,
        );
    }

    /// One untimed execution of the kernel.
    pub fn run(&mut self) {
        let b = &mut self.buffers;
        let cfg = &self.layer.cfg;
        let c = cfg.channels;
        match self.kernel {
            Kernel::SampleLidar => sample_lidar_into(
                &self.boxes,
                &b.lid_offsets,
                &b.lid_weights,
                &self.lidar.maps,
                &self.lidar.range,
                cfg,
                &mut b.f_lid,
            ),
            Kernel::SampleCamera => sample_camera_into(
                &self.boxes,
                &b.cam_offsets,
                &b.cam_weights,
                &self.camera,
                &self.rig,
                cfg,
                &mut b.f_cam,
            ),
            Kernel::AdaptiveMix => {
                let (sl, sc) = (cfg.points * c, cfg.camera_rows() * c);
                for i in 0..b.n {
                    let qi = &b.q[i * c..(i + 1) * c];
                    self.layer
                        .lid_mix
                        .apply(qi, &b.f_lid[i * sl..(i + 1) * sl], &mut b.m_lid[i * c..(i + 1) * c], &mut b.mix_lid);
                    self.layer
                        .cam_mix
                        .apply(qi, &b.f_cam[i * sc..(i + 1) * sc], &mut b.m_cam[i * c..(i + 1) * c], &mut b.mix_cam);
                }
            }
            Kernel::FullLayer => self.forward(),
        }
    }

    /// Final-layer outputs of the last run (query features `[N, C]`).
    pub fn output(&self) -> &[f32] {
        match self.kernel {
            Kernel::SampleLidar => &self.buffers.f_lid,
            Kernel::SampleCamera => &self.buffers.f_cam,
            Kernel::AdaptiveMix => &self.buffers.m_cam,
            Kernel::FullLayer => &self.buffers.q_next,
        }
    }
}

/// Times `repetitions` warm runs of `kernel` on a single thread.
pub fn bench_kernel(
    kernel: &str,
    model: &ModelConfig,
    layout: &SensorLayout,
    repetitions: usize,
    seed: u64,
) -> Result<BenchReport> {
    let kernel: Kernel = kernel.parse()?;
    if repetitions < MIN_REPETITIONS {
        return Err(Error::invalid(format!(
            "at least {} repetitions are required, got {}",
            MIN_REPETITIONS, repetitions
        )));
    }
    let mut case = BenchCase::new(kernel, model, layout, seed)?;
    for _ in 0..WARMUP {
        case.run();
    }
    case.stage_ns = [0; 5];
    let mut samples = vec![0.0f64; repetitions];
    for s in samples.iter_mut() {
        let t = Instant::now();
        case.run();
        *s = t.elapsed().as_secs_f64() * 1e3;
    }
    let mean_ms = samples.iter().sum::<f64>() / repetitions as f64;
    samples.sort_by(f64::total_cmp);
    let p50 = percentile(&samples, 50.0);
    let stages = if kernel == Kernel::FullLayer {
        STAGES
            .iter()
            .zip(case.stage_ns)
            .map(|(s, ns)| StageTiming {
                stage: s.to_string(),
                mean_ms: ns as f64 / 1e6 / repetitions as f64,
            })
            .collect()
    } else {
        Vec::new()
    };
    Ok(BenchReport {
        kernel: kernel.name().to_string(),
        shape: case.shape,
        warmup: WARMUP,
        repetitions,
        threads: 1,
        p50_ms: p50,
        p90_ms: percentile(&samples, 90.0),
        p99_ms: percentile(&samples, 99.0),
        mean_ms,
        queries_per_second: case.shape.num_queries as f64 / (p50 / 1e3),
        stages,
    })
}
