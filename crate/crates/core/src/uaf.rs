//! Uncertainty-aware fusion: per-modality distance predictors, the
//! distance-to-uncertainty map and uncertainty-weighted feature fusion.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// How modality features are weighted before fusion.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Weight each modality by `1 - u`.
    #[default]
    Uaf,
    /// Weight both modalities by one.
    Equal,
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uaf" => Ok(Self::Uaf),
            "equal" => Ok(Self::Equal),
            other => Err(Error::invalid(format!("unknown fusion mode `{}`", other))),
        }
    }
}

/// Per-query uncertainties of the two modalities, each in `[0, 1)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyPair {
    pub u_cam: f64,
    pub u_lid: f64,
}

/// `1 - exp(-d)` for a BEV distance `d >= 0`.
pub fn uncertainty_from_distance(d: f64) -> Result<f64> {
    if d.is_nan() || d < 0.0 {
        return Err(Error::invalid(format!("distance must be nonnegative, got {}", d)));
    }
    Ok(-(-d).exp_m1())
}

/// BEV distance between a regressed center and a ground-truth center.
pub fn oracle_distance(pred_xy: [f64; 2], gt_xy: [f64; 2]) -> f64 {
    (pred_xy[0] - gt_xy[0]).hypot(pred_xy[1] - gt_xy[1])
}

/// Row mean of RoI features: `[N, S, C] -> [N, C]`.
pub fn pool_roi<T: Real>(tape: &mut Tape<T>, f: Var) -> Result<Var> {
    if tape.shape(f).len() != 3 {
        return Err(Error::shape(format!("RoI feature {:?}", tape.shape(f))));
    }
    tape.mean(f, 1)
}

/// Nonnegative distance estimate `[N, 1]` from pooled features `[N, C]`.
pub fn predict_distance<T: Real>(tape: &mut Tape<T>, params: &Bound, prefix: &str, pooled: Var) -> Result<Var> {
    let raw = params.mlp2(tape, prefix, pooled)?;
    Ok(tape.softplus(raw))
}

/// `1 - exp(-d)` on the tape.
pub fn distance_to_uncertainty<T: Real>(tape: &mut Tape<T>, d: Var) -> Result<Var> {
    let neg = tape.scale(d, -T::one())?;
    let e = tape.exp(neg);
    let ne = tape.scale(e, -T::one())?;
    tape.add_scalar(ne, T::one())
}

/// Predicted distance and uncertainty (`[N, 1]` each) for RoI features
/// `[N, S, C]`.
pub fn predict_uncertainty<T: Real>(tape: &mut Tape<T>, params: &Bound, prefix: &str, f: Var) -> Result<(Var, Var)> {
    let pooled = pool_roi(tape, f)?;
    let d = predict_distance(tape, params, prefix, pooled)?;
    let u = distance_to_uncertainty(tape, d)?;
    Ok((d, u))
}

/// BEV center residual `[N, 2]` (meters) from pooled features.
pub fn regress_xy<T: Real>(tape: &mut Tape<T>, params: &Bound, prefix: &str, pooled: Var) -> Result<Var> {
    params.mlp2(tape, prefix, pooled)
}

/// `FFN(Cat(f_cam (1 - u_cam), f_lid (1 - u_lid)))` with features `[N, C]`
/// and uncertainties `[N, 1]`.
pub fn fuse<T: Real>(
    tape: &mut Tape<T>,
    params: &Bound,
    prefix: &str,
    f_cam: Var,
    u_cam: Var,
    f_lid: Var,
    u_lid: Var,
) -> Result<Var> {
    let mut weighted = Vec::with_capacity(2);
    for (f, u) in [(f_cam, u_cam), (f_lid, u_lid)] {
        let nu = tape.scale(u, -T::one())?;
        let w = tape.add_scalar(nu, T::one())?;
        weighted.push(tape.mul(f, w)?);
    }
    let cat = tape.concat(&weighted, 1)?;
    params.mlp2(tape, prefix, cat)
}

/// Distance predictors, center regressors and the fusion FFN under
/// `prefix`: `{prefix}.dist_cam`, `.dist_lid`, `.reg_cam`, `.reg_lid`,
/// `.fuse`.
pub fn init_uaf<T: Real>(store: &mut ParamStore<T>, prefix: &str, channels: usize, rng: &mut ChaCha8Rng) {
    let c = channels;
    for m in ["cam", "lid"] {
        store.init_linear(&format!("{}.dist_{}.0", prefix, m), c, c, 1.0, rng);
        store.init_linear(&format!("{}.dist_{}.1", prefix, m), c, 1, 0.1, rng);
        store.init_linear(&format!("{}.reg_{}.0", prefix, m), c, c, 1.0, rng);
        store.init_zero_linear(&format!("{}.reg_{}.1", prefix, m), c, 2);
    }
    store.init_linear(&format!("{}.fuse.0", prefix), 2 * c, 2 * c, 2f64.sqrt(), rng);
    store.init_linear(&format!("{}.fuse.1", prefix), 2 * c, c, 1.0, rng);
}

/// Constant `[N, 1]` column of uncertainties.
pub fn uncertainty_column<T: Real>(tape: &mut Tape<T>, values: &[f64]) -> Var {
    tape.constant(Tensor::from_fn(&[values.len(), 1], |i| T::lit(values[i])))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn uncertainty_examples() {
        assert_eq!(uncertainty_from_distance(0.0).unwrap(), 0.0);
        assert!((uncertainty_from_distance(2f64.ln()).unwrap() - 0.5).abs() < 1e-15);
        assert!((uncertainty_from_distance(10.0).unwrap() - (1.0 - (-10f64).exp())).abs() < 1e-15);
        assert!(uncertainty_from_distance(-1e-9).is_err());
    }

    #[test]
    fn zero_uncertainty_is_the_plain_concatenation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        init_uaf(&mut store, "u", 3, &mut rng);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let fc = tape.constant(Tensor::from_fn(&[2, 3], |i| i as f64 * 0.3 - 0.5));
        let fl = tape.constant(Tensor::from_fn(&[2, 3], |i| (i as f64).cos()));
        let zero = uncertainty_column(&mut tape, &[0.0, 0.0]);
        let a = fuse(&mut tape, &p, "u.fuse", fc, zero, fl, zero).unwrap();
        let cat = tape.concat(&[fc, fl], 1).unwrap();
        let b = p.mlp2(&mut tape, "u.fuse", cat).unwrap();
        assert_eq!(tape.value(a), tape.value(b));
    }
}
