//! Dense feature grids for both modalities and plain (non-taped) bilinear
//! sampling.

use crate::error::{Error, Result};
use crate::geometry::{align_temporal, project_to_view, CameraRig, DetectionRange, Point3};
use crate::tape::bilinear_taps;
use crate::tensor::{Real, Tensor};

/// One `[H, W, C]` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub scale_id: usize,
    pub data: Tensor<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn zeros(width: usize, height: usize, channels: usize, scale_id: usize) -> Self {
        Self {
            width,
            height,
            channels,
            scale_id,
            data: Tensor::zeros(&[height, width, channels]),
        }
    }

    pub fn from_tensor(data: Tensor<T>, scale_id: usize) -> Result<Self> {
        match *data.shape() {
            [height, width, channels] => Ok(Self {
                width,
                height,
                channels,
                scale_id,
                data,
            }),
            _ => Err(Error::shape(format!("feature map must be [H, W, C], got {:?}", data.shape()))),
        }
    }

    pub fn texel(&self, x: usize, y: usize) -> &[T] {
        let c = self.channels;
        let i = (y * self.width + x) * c;
        &self.data.data()[i..i + c]
    }

    pub fn texel_mut(&mut self, x: usize, y: usize) -> &mut [T] {
        let c = self.channels;
        let i = (y * self.width + x) * c;
        &mut self.data.data_mut()[i..i + c]
    }

    pub fn is_zero(&self) -> bool {
        self.data.data().iter().all(|v| *v == T::zero())
    }

    pub fn cast<U: Real>(&self) -> FeatureMap<U> {
        FeatureMap {
            width: self.width,
            height: self.height,
            channels: self.channels,
            scale_id: self.scale_id,
            data: self.data.cast(),
        }
    }
}

/// Camera features for every (view, scale, frame).
#[derive(Clone, Debug, PartialEq)]
pub struct CameraFeatureSet<T> {
    pub num_views: usize,
    pub num_scales: usize,
    pub num_frames: usize,
    /// Pixels per texel for each scale.
    pub strides: Vec<f64>,
    maps: Vec<FeatureMap<T>>,
}

impl<T: Real> CameraFeatureSet<T> {
    /// `maps` are ordered view-major, then scale, then frame.
    pub fn new(
        num_views: usize,
        num_scales: usize,
        num_frames: usize,
        strides: Vec<f64>,
        maps: Vec<FeatureMap<T>>,
    ) -> Result<Self> {
        if maps.len() != num_views * num_scales * num_frames {
            return Err(Error::shape(format!(
                "camera feature set needs {}x{}x{} maps, got {}",
                num_views,
                num_scales,
                num_frames,
                maps.len()
            )));
        }
        if strides.len() != num_scales || strides.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::invalid("one positive stride per scale required"));
        }
        let c = maps.first().map(|m| m.channels).unwrap_or(0);
        if maps.iter().any(|m| m.channels != c) {
            return Err(Error::shape("camera maps disagree on channel count"));
        }
        Ok(Self {
            num_views,
            num_scales,
            num_frames,
            strides,
            maps,
        })
    }

    pub fn index(&self, view: usize, scale: usize, frame: usize) -> usize {
        (view * self.num_scales + scale) * self.num_frames + frame
    }

    pub fn get(&self, view: usize, scale: usize, frame: usize) -> &FeatureMap<T> {
        &self.maps[self.index(view, scale, frame)]
    }

    pub fn get_mut(&mut self, view: usize, scale: usize, frame: usize) -> &mut FeatureMap<T> {
        let i = self.index(view, scale, frame);
        &mut self.maps[i]
    }

    pub fn maps(&self) -> &[FeatureMap<T>] {
        &self.maps
    }

    pub fn channels(&self) -> usize {
        self.maps.first().map(|m| m.channels).unwrap_or(0)
    }

    pub fn cast<U: Real>(&self) -> CameraFeatureSet<U> {
        CameraFeatureSet {
            num_views: self.num_views,
            num_scales: self.num_scales,
            num_frames: self.num_frames,
            strides: self.strides.clone(),
            maps: self.maps.iter().map(FeatureMap::cast).collect(),
        }
    }
}

/// Multi-scale BEV grids covering one detection range.
#[derive(Clone, Debug, PartialEq)]
pub struct LidarFeaturePyramid<T> {
    pub range: DetectionRange,
    pub maps: Vec<FeatureMap<T>>,
}

impl<T: Real> LidarFeaturePyramid<T> {
    pub fn new(range: DetectionRange, maps: Vec<FeatureMap<T>>) -> Result<Self> {
        range.validate()?;
        if maps.is_empty() {
            return Err(Error::Empty("lidar pyramid"));
        }
        let c = maps[0].channels;
        if maps.iter().any(|m| m.channels != c) {
            return Err(Error::shape("lidar maps disagree on channel count"));
        }
        Ok(Self { range, maps })
    }

    pub fn num_scales(&self) -> usize {
        self.maps.len()
    }

    pub fn channels(&self) -> usize {
        self.maps[0].channels
    }

    pub fn cast<U: Real>(&self) -> LidarFeaturePyramid<U> {
        LidarFeaturePyramid {
            range: self.range,
            maps: self.maps.iter().map(FeatureMap::cast).collect(),
        }
    }
}

/// Bilinear read at continuous texel coordinates `(x, y)`; texel centers sit
/// at `i + 0.5` and reads outside the map contribute zero.
pub fn bilinear_sample<T: Real>(map: &FeatureMap<T>, x: T, y: T) -> Vec<T> {
    let mut out = vec![T::zero(); map.channels];
    bilinear_sample_into(map, x, y, T::one(), &mut out);
    out
}

/// Accumulates `scale * bilinear_sample(map, x, y)` into `out`.
pub fn bilinear_sample_into<T: Real>(map: &FeatureMap<T>, x: T, y: T, scale: T, out: &mut [T]) {
    let c = map.channels;
    let data = map.data.data();
    for (idx, w, _, _) in bilinear_taps(x, y, map.width, map.height) {
        if let Some(i) = idx {
            let w = w * scale;
            if w == T::zero() {
                continue;
            }
            for (o, &v) in out.iter_mut().zip(&data[i * c..(i + 1) * c]) {
                *o += w * v;
            }
        }
    }
}

/// Mean over `hit` views of the sum over scales of bilinear samples at the
/// projection of `p` (current-frame world) into frame `t`.
pub fn sample_view_scale_mean<T: Real>(
    set: &CameraFeatureSet<T>,
    p: Point3,
    rig: &CameraRig,
    t: usize,
    hit: &[usize],
) -> Result<Vec<T>> {
    if hit.is_empty() {
        return Err(Error::Empty("hit view set"));
    }
    let q = align_temporal(p, rig, t);
    let mut out = vec![T::zero(); set.channels()];
    let inv = T::lit(1.0 / hit.len() as f64);
    for &v in hit {
        let view = rig.views.get(v).ok_or(Error::MissingView(v))?;
        let (u, w, _) = project_to_view(q, view)
            .ok_or_else(|| Error::invalid(format!("point is not visible in view {}", v)))?;
        for (m, &stride) in set.strides.iter().enumerate() {
            let map = set.get(v, m, t);
            bilinear_sample_into(map, T::lit(u / stride), T::lit(w / stride), inv, &mut out);
        }
    }
    Ok(out)
}
