//! Linear Kalman filter over an 18-dimensional constant-acceleration state:
//! position, velocity and acceleration for three translation axes and three
//! Euler angles. Measurements are gated at four standard deviations per
//! component before they are allowed to update the state.

use nalgebra::{SMatrix, SVector};

use crate::geometry::Pose;

pub const STATE_DIM: usize = 18;
/// Index of the first angle state (roll); angle blocks mirror the
/// translation blocks at this offset.
pub const ANGLE_OFFSET: usize = 9;

const MEAS_DIM: usize = 6;
/// State indices measured by a pose: x, y, z, roll, pitch, yaw.
const MEASURED: [usize; MEAS_DIM] = [0, 1, 2, 9, 10, 11];

type StateVector = SVector<f64, STATE_DIM>;
type StateMatrix = SMatrix<f64, STATE_DIM, STATE_DIM>;
type MeasVector = SVector<f64, MEAS_DIM>;

/// Wraps an angle to (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut w = a % two_pi;
    if w > std::f64::consts::PI {
        w -= two_pi;
    } else if w <= -std::f64::consts::PI {
        w += two_pi;
    }
    w
}

/// A 6-DOF pose observation produced by the RANSAC estimator.
///
/// Position is the camera center in the model frame; angles are the Euler
/// angles of the world-to-camera rotation, wrapped to (-pi, pi].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseMeasurement {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
    pub frame_id: u32,
    pub inlier_count: usize,
    pub mean_inlier_reprojection_error: f64,
}

impl PoseMeasurement {
    pub fn from_pose(pose: &Pose, frame_id: u32, inlier_count: usize, mean_error: f64) -> Self {
        let center = pose.center();
        let (roll, pitch, yaw) = pose.euler_angles();
        Self {
            x: center.x,
            y: center.y,
            z: center.z,
            roll: wrap_angle(roll),
            pitch: wrap_angle(pitch),
            yaw: wrap_angle(yaw),
            frame_id,
            inlier_count,
            mean_inlier_reprojection_error: mean_error,
        }
    }

    fn vector(&self) -> MeasVector {
        MeasVector::from_row_slice(&[self.x, self.y, self.z, self.roll, self.pitch, self.yaw])
    }
}

/// Filter state: 18-vector plus its covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct KalmanState {
    /// [x, y, z, vx, vy, vz, ax, ay, az, roll, pitch, yaw, and the angular
    /// first/second derivatives in the same order]
    pub state: StateVector,
    pub covariance: StateMatrix,
    pub last_timestamp: f64,
}

impl KalmanState {
    /// Bootstrap from the first accepted measurement: pose components are
    /// taken directly, derivatives start at zero with large variance.
    pub fn bootstrap(z: &PoseMeasurement, timestamp: f64, config: &KalmanConfig) -> Self {
        let mut state = StateVector::zeros();
        state[0] = z.x;
        state[1] = z.y;
        state[2] = z.z;
        state[9] = z.roll;
        state[10] = z.pitch;
        state[11] = z.yaw;
        let mut covariance = StateMatrix::zeros();
        for axis in 0..3 {
            covariance[(axis, axis)] = config.bootstrap_pos_sigma.powi(2);
            covariance[(axis + 3, axis + 3)] = config.bootstrap_vel_sigma.powi(2);
            covariance[(axis + 6, axis + 6)] = config.bootstrap_acc_sigma.powi(2);
            let a = ANGLE_OFFSET + axis;
            covariance[(a, a)] = config.bootstrap_ang_sigma.powi(2);
            covariance[(a + 3, a + 3)] = config.bootstrap_ang_rate_sigma.powi(2);
            covariance[(a + 6, a + 6)] = config.bootstrap_ang_acc_sigma.powi(2);
        }
        Self {
            state,
            covariance,
            last_timestamp: timestamp,
        }
    }

    /// Camera position estimate.
    pub fn position(&self) -> (f64, f64, f64) {
        (self.state[0], self.state[1], self.state[2])
    }

    /// (roll, pitch, yaw) estimate, wrapped to (-pi, pi].
    pub fn angles(&self) -> (f64, f64, f64) {
        (
            wrap_angle(self.state[9]),
            wrap_angle(self.state[10]),
            wrap_angle(self.state[11]),
        )
    }

    /// World-to-camera pose reconstructed from the filtered state.
    pub fn pose(&self) -> Pose {
        let (x, y, z) = self.position();
        let rot = nalgebra::UnitQuaternion::from_euler_angles(
            self.state[9],
            self.state[10],
            self.state[11],
        );
        Pose::from_center_rotation(nalgebra::Point3::new(x, y, z), rot)
    }
}

/// Process/measurement noise parameters and the gate width.
#[derive(Debug, Clone, Copy)]
pub struct KalmanConfig {
    /// White-jerk process noise density for the translation blocks.
    pub q_pos: f64,
    /// White-jerk process noise density for the angle blocks.
    pub q_ang: f64,
    /// Base position measurement sigma, meters, scaled by reprojection error.
    pub r_pos: f64,
    /// Base angle measurement sigma, radians, scaled by reprojection error.
    pub r_ang: f64,
    /// Gate width in standard deviations.
    pub gate_sigma: f64,
    pub bootstrap_pos_sigma: f64,
    pub bootstrap_ang_sigma: f64,
    pub bootstrap_vel_sigma: f64,
    pub bootstrap_acc_sigma: f64,
    pub bootstrap_ang_rate_sigma: f64,
    pub bootstrap_ang_acc_sigma: f64,
}

impl Default for KalmanConfig {
    fn default() -> Self {
        Self {
            q_pos: 1.0,
            q_ang: 0.5,
            r_pos: 0.03,
            r_ang: 0.01,
            gate_sigma: 4.0,
            bootstrap_pos_sigma: 5.0,
            bootstrap_ang_sigma: 0.5,
            bootstrap_vel_sigma: 5.0,
            bootstrap_acc_sigma: 5.0,
            bootstrap_ang_rate_sigma: 2.0,
            bootstrap_ang_acc_sigma: 2.0,
        }
    }
}

impl KalmanConfig {
    /// Diagonal measurement covariance scaled by the measurement's mean
    /// inlier reprojection error.
    pub fn measurement_noise(&self, z: &PoseMeasurement) -> MeasVector {
        let scale = z.mean_inlier_reprojection_error.max(0.5);
        let rp = (self.r_pos * scale).powi(2);
        let ra = (self.r_ang * scale).powi(2);
        MeasVector::from_row_slice(&[rp, rp, rp, ra, ra, ra])
    }
}

/// Constant-acceleration prediction over `dt` seconds.
///
/// Per axis and per angle: p' = p + v dt + a dt^2/2, v' = v + a dt, a' = a;
/// the covariance becomes F P F^T + Q with a piecewise-constant-acceleration
/// Q scaled by `q_pos` (translation blocks) and `q_ang` (angle blocks).
pub fn kalman_predict(state: &KalmanState, dt: f64, q_pos: f64, q_ang: f64) -> KalmanState {
    debug_assert!(dt > 0.0);
    let mut f = StateMatrix::identity();
    let half_dt2 = 0.5 * dt * dt;
    for axis in 0..3 {
        for base in [0, ANGLE_OFFSET] {
            let p = base + axis;
            f[(p, p + 3)] = dt;
            f[(p, p + 6)] = half_dt2;
            f[(p + 3, p + 6)] = dt;
        }
    }

    let mut q = StateMatrix::zeros();
    let g = [half_dt2, dt, 1.0];
    for axis in 0..3 {
        for (base, density) in [(0, q_pos), (ANGLE_OFFSET, q_ang)] {
            for i in 0..3 {
                for j in 0..3 {
                    q[(base + axis + 3 * i, base + axis + 3 * j)] += density * g[i] * g[j];
                }
            }
        }
    }

    let state_pred = f * state.state;
    let mut cov = f * state.covariance * f.transpose() + q;
    symmetrize(&mut cov);
    KalmanState {
        state: state_pred,
        covariance: cov,
        last_timestamp: state.last_timestamp + dt,
    }
}

/// Gated measurement update.
///
/// The residual is computed first (angles wrapped to (-pi, pi]); if any of
/// the six components exceeds `gate_sigma` innovation standard deviations
/// the measurement is discarded and the state comes back bit-identical with
/// `accepted = false`. Otherwise a standard linear update runs with H
/// selecting the six pose components.
pub fn kalman_update(
    state: &KalmanState,
    z: &PoseMeasurement,
    measurement_noise: &MeasVector,
    gate_sigma: f64,
) -> (KalmanState, bool) {
    let mut h = SMatrix::<f64, MEAS_DIM, STATE_DIM>::zeros();
    for (row, &col) in MEASURED.iter().enumerate() {
        h[(row, col)] = 1.0;
    }

    let predicted = h * state.state;
    let mut residual = z.vector() - predicted;
    for i in 3..6 {
        residual[i] = wrap_angle(residual[i]);
    }

    let r = SMatrix::<f64, MEAS_DIM, MEAS_DIM>::from_diagonal(measurement_noise);
    let s = h * state.covariance * h.transpose() + r;

    for i in 0..MEAS_DIM {
        if residual[i].abs() > gate_sigma * s[(i, i)].sqrt() {
            return (state.clone(), false);
        }
    }

    let Some(s_inv) = s.try_inverse() else {
        return (state.clone(), false);
    };
    let gain = state.covariance * h.transpose() * s_inv;
    let new_state = state.state + gain * residual;
    // Joseph form keeps the covariance symmetric positive-definite
    let ikh = StateMatrix::identity() - gain * h;
    let mut cov = ikh * state.covariance * ikh.transpose() + gain * r * gain.transpose();
    symmetrize(&mut cov);

    (
        KalmanState {
            state: new_state,
            covariance: cov,
            last_timestamp: state.last_timestamp,
        },
        true,
    )
}

fn symmetrize(m: &mut StateMatrix) {
    let t = m.transpose();
    *m = (*m + t) * 0.5;
}

/// Convenience wrapper owning the state and its bootstrap.
#[derive(Debug, Clone)]
pub struct KalmanFilter {
    pub config: KalmanConfig,
    pub state: Option<KalmanState>,
}

impl KalmanFilter {
    pub fn new(config: KalmanConfig) -> Self {
        Self {
            config,
            state: None,
        }
    }

    /// Advances the state to `timestamp` and returns the predicted pose for
    /// correspondence gating, if the filter is initialized.
    pub fn predict(&mut self, timestamp: f64) -> Option<Pose> {
        let state = self.state.as_ref()?;
        let dt = timestamp - state.last_timestamp;
        if dt > 0.0 {
            self.state = Some(kalman_predict(state, dt, self.config.q_pos, self.config.q_ang));
        }
        self.state.as_ref().map(|s| s.pose())
    }

    /// Applies a measurement; the first one initializes the filter.
    pub fn update(&mut self, z: &PoseMeasurement, timestamp: f64) -> bool {
        match &self.state {
            None => {
                self.state = Some(KalmanState::bootstrap(z, timestamp, &self.config));
                true
            }
            Some(state) => {
                let noise = self.config.measurement_noise(z);
                let (next, accepted) = kalman_update(state, z, &noise, self.config.gate_sigma);
                self.state = Some(next);
                accepted
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn config() -> KalmanConfig {
        KalmanConfig::default()
    }

    fn measurement(x: f64, y: f64, z: f64, yaw: f64) -> PoseMeasurement {
        PoseMeasurement {
            x,
            y,
            z,
            roll: 0.0,
            pitch: 0.0,
            yaw,
            frame_id: 0,
            inlier_count: 50,
            mean_inlier_reprojection_error: 0.5,
        }
    }

    fn spd_min_eigenvalue(m: &StateMatrix) -> f64 {
        m.symmetric_eigenvalues().min()
    }

    #[test]
    fn stationary_prediction_grows_covariance() {
        let z = measurement(1.0, 2.0, 3.0, 0.1);
        let state = KalmanState::bootstrap(&z, 0.0, &config());
        let pred = kalman_predict(&state, 0.1, 1.0, 0.5);
        assert_eq!(pred.state[0], 1.0);
        assert_eq!(pred.state[9], 0.1);
        assert!(pred.covariance[(0, 0)] > state.covariance[(0, 0)]);
    }

    #[test]
    fn velocity_advances_position() {
        let z = measurement(0.0, 0.0, 0.0, 0.0);
        let mut state = KalmanState::bootstrap(&z, 0.0, &config());
        state.state[3] = 1.0; // vx = 1 m/s
        let pred = kalman_predict(&state, 0.1, 1.0, 0.5);
        assert!((pred.state[0] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn exact_measurement_is_accepted_and_shrinks_covariance() {
        let z = measurement(1.0, 2.0, 3.0, 0.5);
        let state = KalmanState::bootstrap(&z, 0.0, &config());
        let state = kalman_predict(&state, 0.1, 1.0, 0.5);
        let noise = config().measurement_noise(&z);
        let (updated, accepted) = kalman_update(&state, &z, &noise, 4.0);
        assert!(accepted);
        assert!(updated.covariance[(0, 0)] < state.covariance[(0, 0)]);
    }

    #[test]
    fn gross_outlier_rejected_with_bit_identical_state() {
        let z = measurement(1.0, 2.0, 3.0, 0.0);
        let mut filter = KalmanFilter::new(config());
        filter.update(&z, 0.0);
        // settle the filter
        for step in 1..20 {
            let t = step as f64 * 0.1;
            filter.predict(t);
            filter.update(&measurement(1.0, 2.0, 3.0, 0.0), t);
        }
        let before = filter.state.clone().unwrap();
        let sigma = (before.covariance[(0, 0)] + config().measurement_noise(&z)[0]).sqrt();
        let outlier = measurement(1.0 + 10.0 * sigma, 2.0, 3.0, 0.0);
        let noise = config().measurement_noise(&outlier);
        let (after, accepted) = kalman_update(&before, &outlier, &noise, 4.0);
        assert!(!accepted);
        // bit-identical, not merely close
        for i in 0..STATE_DIM {
            assert_eq!(after.state[i].to_bits(), before.state[i].to_bits());
            for j in 0..STATE_DIM {
                assert_eq!(
                    after.covariance[(i, j)].to_bits(),
                    before.covariance[(i, j)].to_bits()
                );
            }
        }
    }

    #[test]
    fn yaw_residual_wraps_across_pi() {
        let z0 = measurement(0.0, 0.0, 0.0, 3.1);
        let state = KalmanState::bootstrap(&z0, 0.0, &config());
        let state = kalman_predict(&state, 0.1, 1.0, 0.5);
        // measurement at -3.1 rad is only ~0.083 rad away once wrapped
        let z = measurement(0.0, 0.0, 0.0, -3.1);
        let noise = config().measurement_noise(&z);
        let (updated, accepted) = kalman_update(&state, &z, &noise, 4.0);
        assert!(accepted);
        // estimate moved towards the wrap, not backwards through zero
        assert!(updated.state[11] > 3.1);
    }

    #[test]
    fn covariance_stays_spd_over_many_cycles() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let z = measurement(0.0, 0.0, 0.0, 0.0);
        let cfg = config();
        let mut state = KalmanState::bootstrap(&z, 0.0, &cfg);
        for step in 0..10_000 {
            let dt = rng.gen_range(0.01..0.2);
            state = kalman_predict(&state, dt, cfg.q_pos, cfg.q_ang);
            let zk = measurement(
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-3.0..3.0),
            );
            let noise = cfg.measurement_noise(&zk);
            let (next, _) = kalman_update(&state, &zk, &noise, cfg.gate_sigma);
            state = next;
            if step % 500 == 0 {
                let min_eig = spd_min_eigenvalue(&state.covariance);
                assert!(min_eig > 0.0, "covariance lost positive definiteness: {min_eig}");
                let asym = (state.covariance - state.covariance.transpose()).norm();
                assert!(asym < 1e-9);
            }
        }
        let min_eig = spd_min_eigenvalue(&state.covariance);
        assert!(min_eig > 0.0);
    }

    /// Straightforward reference filter on plain nested arrays, written
    /// independently of the nalgebra path it cross-checks.
    mod reference {
        pub struct Ref {
            pub x: Vec<f64>,
            pub p: Vec<Vec<f64>>,
        }

        fn mat_mul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
            let n = a.len();
            let m = b[0].len();
            let k = b.len();
            let mut out = vec![vec![0.0; m]; n];
            for i in 0..n {
                for j in 0..m {
                    let mut acc = 0.0;
                    for l in 0..k {
                        acc += a[i][l] * b[l][j];
                    }
                    out[i][j] = acc;
                }
            }
            out
        }

        fn transpose(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
            let n = a.len();
            let m = a[0].len();
            let mut out = vec![vec![0.0; n]; m];
            for i in 0..n {
                for j in 0..m {
                    out[j][i] = a[i][j];
                }
            }
            out
        }

        fn gauss_jordan_inverse(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
            let n = a.len();
            let mut aug: Vec<Vec<f64>> = a
                .iter()
                .enumerate()
                .map(|(i, row)| {
                    let mut r = row.clone();
                    r.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
                    r
                })
                .collect();
            for col in 0..n {
                let pivot = (col..n)
                    .max_by(|&i, &j| aug[i][col].abs().total_cmp(&aug[j][col].abs()))
                    .unwrap();
                aug.swap(col, pivot);
                let p = aug[col][col];
                for v in aug[col].iter_mut() {
                    *v /= p;
                }
                for row in 0..n {
                    if row != col {
                        let f = aug[row][col];
                        for j in 0..2 * n {
                            aug[row][j] -= f * aug[col][j];
                        }
                    }
                }
            }
            aug.into_iter().map(|r| r[n..].to_vec()).collect()
        }

        impl Ref {
            pub fn predict(&mut self, dt: f64, q_pos: f64, q_ang: f64) {
                let n = 18;
                let mut f = vec![vec![0.0; n]; n];
                for i in 0..n {
                    f[i][i] = 1.0;
                }
                for axis in 0..3 {
                    for base in [0usize, 9] {
                        f[base + axis][base + axis + 3] = dt;
                        f[base + axis][base + axis + 6] = 0.5 * dt * dt;
                        f[base + axis + 3][base + axis + 6] = dt;
                    }
                }
                let mut q = vec![vec![0.0; n]; n];
                let g = [0.5 * dt * dt, dt, 1.0];
                for axis in 0..3 {
                    for (base, density) in [(0usize, q_pos), (9usize, q_ang)] {
                        for i in 0..3 {
                            for j in 0..3 {
                                q[base + axis + 3 * i][base + axis + 3 * j] +=
                                    density * g[i] * g[j];
                            }
                        }
                    }
                }
                let mut new_x = vec![0.0; n];
                for i in 0..n {
                    for j in 0..n {
                        new_x[i] += f[i][j] * self.x[j];
                    }
                }
                self.x = new_x;
                let fp = mat_mul(&f, &self.p);
                let fpft = mat_mul(&fp, &transpose(&f));
                for i in 0..n {
                    for j in 0..n {
                        self.p[i][j] = fpft[i][j] + q[i][j];
                    }
                }
                // same symmetrization as the implementation under test
                for i in 0..n {
                    for j in 0..n {
                        let s = 0.5 * (self.p[i][j] + self.p[j][i]);
                        self.p[i][j] = s;
                        self.p[j][i] = s;
                    }
                }
            }

            pub fn update(&mut self, z: &[f64; 6], r_diag: &[f64; 6]) {
                let n = 18;
                let measured = [0usize, 1, 2, 9, 10, 11];
                let mut h = vec![vec![0.0; n]; 6];
                for (row, &col) in measured.iter().enumerate() {
                    h[row][col] = 1.0;
                }
                let mut residual = [0.0; 6];
                for (row, &col) in measured.iter().enumerate() {
                    residual[row] = z[row] - self.x[col];
                }
                let hp = mat_mul(&h, &self.p);
                let mut s = mat_mul(&hp, &transpose(&h));
                for i in 0..6 {
                    s[i][i] += r_diag[i];
                }
                let s_inv = gauss_jordan_inverse(&s);
                let pht = mat_mul(&self.p, &transpose(&h));
                let k = mat_mul(&pht, &s_inv);
                for i in 0..n {
                    for j in 0..6 {
                        self.x[i] += k[i][j] * residual[j];
                    }
                }
                let mut ikh = vec![vec![0.0; n]; n];
                for i in 0..n {
                    ikh[i][i] = 1.0;
                }
                for i in 0..n {
                    for j in 0..n {
                        for l in 0..6 {
                            ikh[i][j] -= k[i][l] * h[l][j];
                        }
                    }
                }
                let left = mat_mul(&mat_mul(&ikh, &self.p), &transpose(&ikh));
                let mut r = vec![vec![0.0; 6]; 6];
                for i in 0..6 {
                    r[i][i] = r_diag[i];
                }
                let krk = mat_mul(&mat_mul(&k, &r), &transpose(&k));
                for i in 0..n {
                    for j in 0..n {
                        self.p[i][j] = left[i][j] + krk[i][j];
                    }
                }
                for i in 0..n {
                    for j in 0..n {
                        let s2 = 0.5 * (self.p[i][j] + self.p[j][i]);
                        self.p[i][j] = s2;
                        self.p[j][i] = s2;
                    }
                }
            }
        }
    }

    #[test]
    fn matches_reference_filter_without_gating() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let cfg = config();
        let z0 = measurement(0.5, -0.5, 1.0, 0.2);
        let mut state = KalmanState::bootstrap(&z0, 0.0, &cfg);
        let mut reference = reference::Ref {
            x: state.state.iter().copied().collect(),
            p: (0..STATE_DIM)
                .map(|i| (0..STATE_DIM).map(|j| state.covariance[(i, j)]).collect())
                .collect(),
        };

        for _ in 0..50 {
            let dt = rng.gen_range(0.02..0.1);
            state = kalman_predict(&state, dt, cfg.q_pos, cfg.q_ang);
            reference.predict(dt, cfg.q_pos, cfg.q_ang);

            // small gaussian residuals: gate never fires, plain linear filter
            let z = measurement(
                state.state[0] + rng.sample::<f64, _>(rand_distr::StandardNormal) * 0.01,
                state.state[1] + rng.sample::<f64, _>(rand_distr::StandardNormal) * 0.01,
                state.state[2] + rng.sample::<f64, _>(rand_distr::StandardNormal) * 0.01,
                state.state[11] + rng.sample::<f64, _>(rand_distr::StandardNormal) * 0.005,
            );
            let noise = cfg.measurement_noise(&z);
            let (next, accepted) = kalman_update(&state, &z, &noise, f64::INFINITY);
            assert!(accepted);
            state = next;
            let z_arr = [z.x, z.y, z.z, z.roll, z.pitch, z.yaw];
            let r_arr = [noise[0], noise[1], noise[2], noise[3], noise[4], noise[5]];
            reference.update(&z_arr, &r_arr);

            for i in 0..STATE_DIM {
                assert!(
                    (state.state[i] - reference.x[i]).abs() < 1e-9,
                    "state component {i} diverged"
                );
                for j in 0..STATE_DIM {
                    assert!((state.covariance[(i, j)] - reference.p[i][j]).abs() < 1e-9);
                }
            }
        }
    }
}
