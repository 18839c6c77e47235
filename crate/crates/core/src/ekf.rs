//! Constant-velocity Kalman filter over pixel box centers.
//!
//! State is `[x, y, vx, vy]` in pixels and pixels/frame; the measurement is
//! the box center. The filter is written in EKF form (transition and
//! measurement Jacobians) even though both models are linear here, so a
//! nonlinear model can replace them without touching predict/update.

use nalgebra::{Matrix2, Matrix2x4, Matrix4, Matrix4x2, Vector2, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BoundingBox, Detection};

/// χ² quantile for 2 degrees of freedom. The CDF is `1 - exp(-x/2)`, so the
/// inverse has a closed form.
pub fn chi2_2dof_quantile(p: f64) -> f64 {
    -2.0 * (1.0 - p).ln()
}

/// Default gate: the 0.99 quantile of χ²₂.
pub const DEFAULT_GATE: f64 = 9.210_340_371_976_184;

/// Initial velocity variance is the process velocity variance scaled by this.
pub const VELOCITY_VARIANCE_INFLATION: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub process_std_pos: f64,
    pub process_std_vel: f64,
    pub measurement_std: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            process_std_pos: 1.0,
            process_std_vel: 0.5,
            measurement_std: 2.0,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.process_std_pos, self.process_std_vel, self.measurement_std]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("noise parameters must be positive: {self:?}")))
        }
    }

    fn measurement_cov(&self) -> Matrix2<f64> {
        Matrix2::from_diagonal_element(self.measurement_std.powi(2))
    }

    /// Per-component random-walk process noise, linear in the frame gap.
    pub fn process_cov(&self, dt: f64) -> Matrix4<f64> {
        let p = self.process_std_pos.powi(2) * dt;
        let v = self.process_std_vel.powi(2) * dt;
        Matrix4::from_diagonal(&Vector4::new(p, p, v, v))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KinematicState {
    pub mean: Vector4<f64>,
    pub covariance: Matrix4<f64>,
    pub frame_index: u64,
}

impl KinematicState {
    pub fn position(&self) -> Vector2<f64> {
        Vector2::new(self.mean[0], self.mean[1])
    }

    /// Symmetric within 1e-9 and Cholesky-decomposable.
    pub fn is_valid(&self) -> bool {
        let p = &self.covariance;
        let sym = (p - p.transpose()).abs().max() <= 1e-9 * p.abs().max().max(1.0);
        sym && p.cholesky().is_some()
    }
}

/// Result of a measurement update.
#[derive(Clone, Debug)]
pub struct Update {
    pub state: KinematicState,
    pub innovation: Vector2<f64>,
    pub innovation_cov: Matrix2<f64>,
}

pub fn transition_jacobian(dt: f64) -> Matrix4<f64> {
    let mut f = Matrix4::identity();
    f[(0, 2)] = dt;
    f[(1, 3)] = dt;
    f
}

pub fn measurement_jacobian() -> Matrix2x4<f64> {
    Matrix2x4::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0)
}

pub fn kf_init(detection: &Detection, cfg: &NoiseConfig) -> KinematicState {
    let (cx, cy) = detection.bbox.center();
    let pos = cfg.measurement_std.powi(2);
    let vel = VELOCITY_VARIANCE_INFLATION * cfg.process_std_vel.powi(2);
    KinematicState {
        mean: Vector4::new(cx, cy, 0.0, 0.0),
        covariance: Matrix4::from_diagonal(&Vector4::new(pos, pos, vel, vel)),
        frame_index: detection.frame_index,
    }
}

/// Propagates the state `dt` frames ahead.
pub fn kf_predict(state: &KinematicState, dt: u64, cfg: &NoiseConfig) -> KinematicState {
    debug_assert!(dt >= 1, "prediction gap must be at least one frame");
    let dtf = dt as f64;
    let f = transition_jacobian(dtf);
    let cov = f * state.covariance * f.transpose() + cfg.process_cov(dtf);
    KinematicState {
        mean: f * state.mean,
        covariance: symmetrize(cov),
        frame_index: state.frame_index + dt,
    }
}

/// Predicts to `frame` unless the state is already there.
pub fn kf_predict_to(state: &KinematicState, frame: u64, cfg: &NoiseConfig) -> KinematicState {
    if frame > state.frame_index {
        kf_predict(state, frame - state.frame_index, cfg)
    } else {
        state.clone()
    }
}

/// Innovation and its covariance for a measurement, without updating.
pub fn kf_innovation(
    state: &KinematicState,
    measurement: &BoundingBox,
    cfg: &NoiseConfig,
) -> (Vector2<f64>, Matrix2<f64>) {
    let h = measurement_jacobian();
    let (cx, cy) = measurement.center();
    let nu = Vector2::new(cx, cy) - h * state.mean;
    let s = h * state.covariance * h.transpose() + cfg.measurement_cov();
    (nu, symmetrize2(s))
}

/// Standard Kalman update with the posterior covariance in Joseph form.
pub fn kf_update(
    state: &KinematicState,
    measurement: &BoundingBox,
    cfg: &NoiseConfig,
) -> Result<Update> {
    let h = measurement_jacobian();
    let (nu, s) = kf_innovation(state, measurement, cfg);
    let s_inv = s.try_inverse().ok_or(Error::SingularInnovation)?;
    let gain: Matrix4x2<f64> = state.covariance * h.transpose() * s_inv;
    let i_kh = Matrix4::identity() - gain * h;
    let cov = i_kh * state.covariance * i_kh.transpose()
        + gain * cfg.measurement_cov() * gain.transpose();
    Ok(Update {
        state: KinematicState {
            mean: state.mean + gain * nu,
            covariance: symmetrize(cov),
            frame_index: state.frame_index,
        },
        innovation: nu,
        innovation_cov: s,
    })
}

/// Squared Mahalanobis distance `νᵀ S⁻¹ ν`.
pub fn mahalanobis_sq(innovation: &Vector2<f64>, s: &Matrix2<f64>) -> Result<f64> {
    let s_inv = s.try_inverse().ok_or(Error::SingularInnovation)?;
    Ok((innovation.transpose() * s_inv * innovation)[(0, 0)])
}

/// Bivariate normal density of the innovation.
pub fn kf_likelihood(innovation: &Vector2<f64>, s: &Matrix2<f64>) -> Result<f64> {
    let det = s.determinant();
    if !(det > 0.0) {
        return Err(Error::SingularInnovation);
    }
    let d2 = mahalanobis_sq(innovation, s)?;
    Ok((-0.5 * d2).exp() / (2.0 * std::f64::consts::PI * det.sqrt()))
}

/// Density on the gate boundary, i.e. at squared Mahalanobis distance
/// `threshold`. Used as the likelihood-ratio normalization scale.
pub fn gate_boundary_likelihood(s: &Matrix2<f64>, threshold: f64) -> Result<f64> {
    let det = s.determinant();
    if !(det > 0.0) {
        return Err(Error::SingularInnovation);
    }
    Ok((-0.5 * threshold).exp() / (2.0 * std::f64::consts::PI * det.sqrt()))
}

/// True when the innovation lies inside the gate (boundary inclusive).
pub fn kf_gate(innovation: &Vector2<f64>, s: &Matrix2<f64>, threshold: f64) -> bool {
    match mahalanobis_sq(innovation, s) {
        Ok(d2) => d2 <= threshold,
        Err(_) => false,
    }
}

fn symmetrize(m: Matrix4<f64>) -> Matrix4<f64> {
    (m + m.transpose()) * 0.5
}

fn symmetrize2(m: Matrix2<f64>) -> Matrix2<f64> {
    (m + m.transpose()) * 0.5
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Chip;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn det_at(cx: f64, cy: f64, frame: u64) -> Detection {
        Detection {
            detection_id: 0,
            frame_index: frame,
            bbox: BoundingBox::from_center(cx, cy, 10.0, 20.0).unwrap(),
            label: "person".into(),
            confidence: 1.0,
            chip: Chip::filled(1, 1, 1, 0.0).unwrap(),
            platform: None,
        }
    }

    fn state(mean: [f64; 4], cov: Matrix4<f64>) -> KinematicState {
        KinematicState {
            mean: Vector4::from(mean),
            covariance: cov,
            frame_index: 0,
        }
    }

    #[test]
    fn init_is_centered_and_deterministic() {
        let cfg = NoiseConfig::default();
        let s = kf_init(&det_at(50.0, 50.0, 3), &cfg);
        assert_eq!(s.mean, Vector4::new(50.0, 50.0, 0.0, 0.0));
        assert_eq!(s.covariance[(0, 0)], 4.0);
        assert_eq!(s.covariance[(1, 1)], 4.0);
        assert_eq!(s.covariance[(2, 2)], 10.0 * 0.25);
        assert_eq!(s.covariance[(3, 3)], 10.0 * 0.25);
        assert_eq!(s, kf_init(&det_at(50.0, 50.0, 3), &cfg));
        assert_eq!(s.frame_index, 3);
    }

    #[test]
    fn predict_constant_velocity() {
        let cfg = NoiseConfig::default();
        let s = state([0.0, 0.0, 1.0, 1.0], Matrix4::identity());
        let p = kf_predict(&s, 1, &cfg);
        assert_eq!(p.mean, Vector4::new(1.0, 1.0, 1.0, 1.0));
        assert_eq!(p.frame_index, 1);

        let three = kf_predict(&s, 3, &cfg);
        let stepped = (0..3).fold(s.clone(), |acc, _| kf_predict(&acc, 1, &cfg));
        assert_eq!(three.mean, stepped.mean);
    }

    fn matmul4(a: &[[f64; 4]; 4], b: &[[f64; 4]; 4]) -> [[f64; 4]; 4] {
        let mut out = [[0.0; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                for k in 0..4 {
                    out[i][j] += a[i][k] * b[k][j];
                }
            }
        }
        out
    }

    #[test]
    fn predicted_covariance_matches_scalar_product() {
        // Q -> 0 by shrinking the process noise far below the tolerance.
        let cfg = NoiseConfig {
            process_std_pos: 1e-12,
            process_std_vel: 1e-12,
            measurement_std: 1.0,
        };
        let s = state([0.0; 4], Matrix4::identity());
        let p = kf_predict(&s, 2, &cfg);
        let f = [
            [1.0, 0.0, 2.0, 0.0],
            [0.0, 1.0, 0.0, 2.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ];
        let mut ft = [[0.0; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                ft[i][j] = f[j][i];
            }
        }
        let eye = [
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ];
        let expected = matmul4(&matmul4(&f, &eye), &ft);
        for i in 0..4 {
            for j in 0..4 {
                assert!((p.covariance[(i, j)] - expected[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn update_at_prediction_leaves_position() {
        let cfg = NoiseConfig::default();
        let s = state([20.0, 30.0, 1.0, -1.0], Matrix4::identity() * 5.0);
        let m = BoundingBox::from_center(20.0, 30.0, 4.0, 4.0).unwrap();
        let u = kf_update(&s, &m, &cfg).unwrap();
        assert_eq!(u.innovation, Vector2::zeros());
        assert!((u.state.mean[0] - 20.0).abs() < 1e-12);
        assert!((u.state.mean[1] - 30.0).abs() < 1e-12);
    }

    #[test]
    fn uninformative_measurement_keeps_prior() {
        let cfg = NoiseConfig {
            measurement_std: 1e6,
            ..NoiseConfig::default()
        };
        let s = state([20.0, 30.0, 1.0, -1.0], Matrix4::identity() * 5.0);
        let m = BoundingBox::from_center(80.0, -40.0, 4.0, 4.0).unwrap();
        let u = kf_update(&s, &m, &cfg).unwrap();
        for i in 0..4 {
            let rel = (u.state.mean[i] - s.mean[i]).abs() / s.mean[i].abs().max(1.0);
            assert!(rel < 1e-3);
            let relc = (u.state.covariance[(i, i)] - 5.0).abs() / 5.0;
            assert!(relc < 1e-3);
        }
    }

    #[test]
    fn diagonal_update_matches_scalar_gain() {
        let cfg = NoiseConfig {
            measurement_std: 1.5,
            ..NoiseConfig::default()
        };
        let p = Matrix4::from_diagonal(&Vector4::new(3.0, 7.0, 2.0, 2.0));
        let s = state([10.0, 10.0, 0.0, 0.0], p);
        let m = BoundingBox::from_center(14.0, 6.0, 2.0, 2.0).unwrap();
        let u = kf_update(&s, &m, &cfg).unwrap();
        let r = 1.5f64 * 1.5;
        for (axis, (prior_var, z)) in [(3.0, 14.0), (7.0, 6.0)].into_iter().enumerate() {
            let k = prior_var / (prior_var + r);
            let mean = 10.0 + k * (z - 10.0);
            let var = (1.0 - k) * prior_var;
            assert!((u.state.mean[axis] - mean).abs() < 1e-12);
            assert!((u.state.covariance[(axis, axis)] - var).abs() < 1e-12);
        }
    }

    #[test]
    fn likelihood_closed_forms() {
        let z = Vector2::zeros();
        let l1 = kf_likelihood(&z, &Matrix2::identity()).unwrap();
        assert!((l1 - 1.0 / (2.0 * std::f64::consts::PI)).abs() < 1e-15);
        let l4 = kf_likelihood(&z, &(Matrix2::identity() * 4.0)).unwrap();
        assert!((l4 - 1.0 / (8.0 * std::f64::consts::PI)).abs() < 1e-15);
        assert!(matches!(
            kf_likelihood(&z, &Matrix2::zeros()),
            Err(Error::SingularInnovation)
        ));
    }

    #[test]
    fn likelihood_integrates_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let a: f64 = rng.random_range(0.5..3.0);
            let b: f64 = rng.random_range(0.5..3.0);
            let c: f64 = rng.random_range(-0.4..0.4) * (a * b).sqrt();
            let s = Matrix2::new(a, c, c, b);
            let half = 9.0 * a.max(b).sqrt();
            let n = 600;
            let step = 2.0 * half / n as f64;
            let mut total = 0.0;
            for i in 0..n {
                for j in 0..n {
                    let x = -half + (i as f64 + 0.5) * step;
                    let y = -half + (j as f64 + 0.5) * step;
                    total += kf_likelihood(&Vector2::new(x, y), &s).unwrap() * step * step;
                }
            }
            assert!((total - 1.0).abs() < 1e-4, "integral {total}");
        }
    }

    #[test]
    fn likelihood_decreases_with_residual() {
        let s = Matrix2::new(2.0, 0.3, 0.3, 1.0);
        let dir = Vector2::new(0.6, -0.8);
        let mut prev = f64::INFINITY;
        for k in 0..50 {
            let l = kf_likelihood(&(dir * (k as f64 * 0.2)), &s).unwrap();
            assert!(l < prev);
            prev = l;
        }
    }

    #[test]
    fn gate_examples() {
        let eye = Matrix2::identity();
        assert!(kf_gate(&Vector2::zeros(), &eye, 1e-9));
        assert!(kf_gate(&Vector2::new(3.0, 0.0), &eye, 9.0));
        assert!(!kf_gate(&Vector2::new(3.0, 0.1), &eye, 9.0));
    }

    #[test]
    fn default_gate_inverts_chi2_cdf() {
        // bisection on the CDF as an independent route to the quantile
        let cdf = |x: f64| 1.0 - (-x / 2.0).exp();
        let (mut lo, mut hi) = (0.0, 100.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if cdf(mid) < 0.99 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        assert!((lo - DEFAULT_GATE).abs() < 1e-9);
        assert!((chi2_2dof_quantile(0.99) - DEFAULT_GATE).abs() < 1e-12);
        assert!((DEFAULT_GATE - 9.2103).abs() < 1e-4);
    }

    #[test]
    fn gate_monotone_in_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let nu = Vector2::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
            let s = Matrix2::new(2.0, 0.5, 0.5, 1.5);
            let t: f64 = rng.random_range(0.1..20.0);
            if kf_gate(&nu, &s, t) {
                assert!(kf_gate(&nu, &s, t * 1.01 + 0.1));
            }
        }
    }

    #[test]
    fn random_runs_stay_positive_definite_and_joseph_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..10_000 {
            let cfg = NoiseConfig {
                process_std_pos: rng.random_range(0.05..3.0),
                process_std_vel: rng.random_range(0.05..2.0),
                measurement_std: rng.random_range(0.1..5.0),
            };
            let mut s = kf_init(&det_at(100.0, 100.0, 0), &cfg);
            for _ in 0..rng.random_range(1..6) {
                s = kf_predict(&s, rng.random_range(1..4), &cfg);
                assert!(s.is_valid());
                let m = BoundingBox::from_center(
                    rng.random_range(80.0..120.0),
                    rng.random_range(80.0..120.0),
                    5.0,
                    5.0,
                )
                .unwrap();
                let u = kf_update(&s, &m, &cfg).unwrap();
                // the textbook (I - KH) P form agrees with Joseph form
                let h = measurement_jacobian();
                let k = s.covariance * h.transpose() * u.innovation_cov.try_inverse().unwrap();
                let simple = (Matrix4::identity() - k * h) * s.covariance;
                let scale = s.covariance.abs().max();
                assert!((simple - u.state.covariance).abs().max() <= 1e-8 * scale.max(1.0));
                s = u.state;
                assert!(s.is_valid());
            }
        }
    }
}
