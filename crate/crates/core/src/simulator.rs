//! Deterministic synthetic world, trajectory and sensor generator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imu_observation::ImuSample;
use crate::lidar_observation::TimedPoint;
use crate::lie_math::{exp_so3, Rot3, Vec3};
use crate::voxel_map::Extrinsics;

/// `s(t)·(A sin(2πf t + φ) + B sin(2πg t + ψ)) + c·t`: a main sinusoid plus
/// an optional fast vibration, both under a smooth start envelope.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Channel {
    pub amplitude: f64,
    pub freq_hz: f64,
    pub phase: f64,
    /// Constant rate added outside the envelope.
    pub linear: f64,
    pub vibration_amplitude: f64,
    pub vibration_hz: f64,
    pub vibration_phase: f64,
}

/// `a sin(2πf t + φ)` and its first two derivatives.
fn sinusoid(a: f64, freq_hz: f64, phase: f64, t: f64) -> (f64, f64, f64) {
    let w = std::f64::consts::TAU * freq_hz;
    let (sn, cs) = (w * t + phase).sin_cos();
    (a * sn, a * w * cs, -a * w * w * sn)
}

impl Channel {
    pub fn sine(amplitude: f64, freq_hz: f64, phase: f64) -> Self {
        Self { amplitude, freq_hz, phase, ..Default::default() }
    }

    pub fn linear(rate: f64) -> Self {
        Self { linear: rate, ..Default::default() }
    }

    pub fn with_vibration(mut self, amplitude: f64, freq_hz: f64, phase: f64) -> Self {
        self.vibration_amplitude = amplitude;
        self.vibration_hz = freq_hz;
        self.vibration_phase = phase;
        self
    }

    /// Value and first two derivatives given the envelope `(s, ṡ, s̈)`.
    fn eval(&self, t: f64, env: (f64, f64, f64)) -> (f64, f64, f64) {
        let main = sinusoid(self.amplitude, self.freq_hz, self.phase, t);
        let vib = sinusoid(self.vibration_amplitude, self.vibration_hz, self.vibration_phase, t);
        let (f, df, ddf) = (main.0 + vib.0, main.1 + vib.1, main.2 + vib.2);
        let (s, ds, dds) = env;
        (s * f + self.linear * t, ds * f + s * df + self.linear, dds * f + 2.0 * ds * df + s * ddf)
    }
}

/// Smooth parametric path. Orientation is `Rz(yaw) Ry(pitch) Rx(roll)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ParametricTrajectory {
    pub x: Channel,
    pub y: Channel,
    pub z: Channel,
    pub roll: Channel,
    pub pitch: Channel,
    pub yaw: Channel,
    /// Initial time during which the sinusoids are held at zero.
    pub static_duration: f64,
    /// Length of the quintic ramp that switches them on.
    pub ramp_duration: f64,
}

impl Default for ParametricTrajectory {
    fn default() -> Self {
        Self {
            x: Channel::default(),
            y: Channel::default(),
            z: Channel::default(),
            roll: Channel::default(),
            pitch: Channel::default(),
            yaw: Channel::default(),
            static_duration: 1.0,
            ramp_duration: 2.0,
        }
    }
}

/// Ground-truth kinematics at one instant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TruthSample {
    pub t: f64,
    pub rot: Rot3,
    pub pos: Vec3,
    pub vel: Vec3,
    pub acc: Vec3,
    /// Body-frame angular velocity.
    pub omega: Vec3,
}

impl ParametricTrajectory {
    fn envelope(&self, t: f64) -> (f64, f64, f64) {
        if self.ramp_duration <= 0.0 {
            return if t >= self.static_duration { (1.0, 0.0, 0.0) } else { (0.0, 0.0, 0.0) };
        }
        let d = self.ramp_duration;
        let x = (t - self.static_duration) / d;
        if x <= 0.0 {
            (0.0, 0.0, 0.0)
        } else if x >= 1.0 {
            (1.0, 0.0, 0.0)
        } else {
            let s = x * x * x * (10.0 - 15.0 * x + 6.0 * x * x);
            let ds = 30.0 * x * x * (1.0 - x) * (1.0 - x) / d;
            let dds = 60.0 * x * (1.0 - x) * (1.0 - 2.0 * x) / (d * d);
            (s, ds, dds)
        }
    }

    pub fn sample(&self, t: f64) -> TruthSample {
        let env = self.envelope(t);
        let (px, vx, ax) = self.x.eval(t, env);
        let (py, vy, ay) = self.y.eval(t, env);
        let (pz, vz, az) = self.z.eval(t, env);
        let (phi, dphi, _) = self.roll.eval(t, env);
        let (theta, dtheta, _) = self.pitch.eval(t, env);
        let (psi, dpsi, _) = self.yaw.eval(t, env);
        let rot = Rot3::from_axis_angle(&Vec3::z_axis(), psi)
            * Rot3::from_axis_angle(&Vec3::y_axis(), theta)
            * Rot3::from_axis_angle(&Vec3::x_axis(), phi);
        let (sf, cf) = phi.sin_cos();
        let (st, ct) = theta.sin_cos();
        let omega = Vec3::new(dphi - dpsi * st, dtheta * cf + dpsi * ct * sf, -dtheta * sf + dpsi * ct * cf);
        TruthSample { t, rot, pos: Vec3::new(px, py, pz), vel: Vec3::new(vx, vy, vz), acc: Vec3::new(ax, ay, az), omega }
    }
}

/// Solid axis-aligned box seen from outside.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    /// Entry distance of a ray hitting the box from outside.
    fn hit_outside(&self, o: &Vec3, d: &Vec3) -> Option<f64> {
        let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
        for i in 0..3 {
            if d[i].abs() < 1e-15 {
                if o[i] < self.min[i] || o[i] > self.max[i] {
                    return None;
                }
                continue;
            }
            let a = (self.min[i] - o[i]) / d[i];
            let b = (self.max[i] - o[i]) / d[i];
            t0 = t0.max(a.min(b));
            t1 = t1.min(a.max(b));
        }
        (t0 <= t1 && t0 > 0.0).then_some(t0)
    }

    /// Exit distance of a ray starting inside the box.
    fn hit_inside(&self, o: &Vec3, d: &Vec3) -> Option<f64> {
        let mut best = f64::INFINITY;
        for i in 0..3 {
            let bound = if d[i] > 0.0 { self.max[i] } else if d[i] < 0.0 { self.min[i] } else { continue };
            let t = (bound - o[i]) / d[i];
            if t > 0.0 {
                best = best.min(t);
            }
        }
        best.is_finite().then_some(best)
    }
}

/// The inside of a box-shaped room plus solid obstacles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct World {
    pub room: Aabb,
    pub obstacles: Vec<Aabb>,
}

impl Default for World {
    fn default() -> Self {
        Self { room: Aabb { min: [-6.07, -5.06, -1.43], max: [7.04, 5.53, 2.56] }, obstacles: Vec::new() }
    }
}

impl World {
    /// Nearest surface along a unit ray.
    pub fn raycast(&self, o: &Vec3, d: &Vec3) -> Option<f64> {
        let mut best = self.room.hit_inside(o, d);
        for ob in &self.obstacles {
            if let Some(t) = ob.hit_outside(o, d) {
                best = Some(best.map_or(t, |b: f64| b.min(t)));
            }
        }
        best
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImuSpec {
    pub rate_hz: f64,
    pub gyro_noise: f64,
    pub acc_noise: f64,
    pub gyro_bias: [f64; 3],
    pub acc_bias: [f64; 3],
    pub gravity: f64,
}

impl Default for ImuSpec {
    fn default() -> Self {
        Self {
            rate_hz: 200.0,
            gyro_noise: 0.005,
            acc_noise: 0.05,
            gyro_bias: [0.002, -0.003, 0.001],
            acc_bias: [0.03, -0.02, 0.04],
            gravity: 9.81,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LidarSpec {
    pub rings: usize,
    pub elevation_min_deg: f64,
    pub elevation_max_deg: f64,
    pub azimuth_steps: usize,
    pub scan_period: f64,
    pub min_range: f64,
    pub max_range: f64,
    pub range_std: f64,
    pub bearing_std_deg: f64,
    /// Fraction of returns displaced along the beam by a gross error.
    pub outlier_fraction: f64,
    /// Bounds on the gross displacement, m.
    pub outlier_offset: [f64; 2],
    /// Sensor pose in the body frame: roll/pitch/yaw in degrees.
    pub extrinsic_rpy_deg: [f64; 3],
    pub extrinsic_trans: [f64; 3],
}

impl Default for LidarSpec {
    fn default() -> Self {
        Self {
            rings: 16,
            elevation_min_deg: -22.5,
            elevation_max_deg: 22.5,
            azimuth_steps: 180,
            scan_period: 0.1,
            min_range: 0.3,
            max_range: 60.0,
            range_std: 0.02,
            bearing_std_deg: 0.05,
            outlier_fraction: 0.0,
            outlier_offset: [0.5, 1.0],
            extrinsic_rpy_deg: [0.0, 0.0, 0.0],
            extrinsic_trans: [0.1, 0.0, 0.05],
        }
    }
}

impl LidarSpec {
    pub fn extrinsics(&self) -> Extrinsics {
        Extrinsics::from_rpy_deg(self.extrinsic_rpy_deg, self.extrinsic_trans)
    }

    pub fn points_per_scan(&self) -> usize {
        self.rings * self.azimuth_steps
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioSpec {
    pub duration: f64,
    pub seed: u64,
    pub world: World,
    pub trajectory: ParametricTrajectory,
    pub imu: ImuSpec,
    pub lidar: LidarSpec,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self::benign(0)
    }
}

impl ScenarioSpec {
    /// Slow wandering with gentle attitude changes.
    pub fn benign(seed: u64) -> Self {
        Self {
            duration: 60.0,
            seed,
            world: World::default(),
            trajectory: ParametricTrajectory {
                x: Channel::sine(2.0, 0.03, 0.0),
                y: Channel::sine(1.5, 0.05, 0.5),
                z: Channel::sine(0.3, 0.1, 0.0),
                roll: Channel::sine(0.05, 0.2, 0.3),
                pitch: Channel::sine(0.05, 0.15, 0.0),
                yaw: Channel::sine(0.8, 0.04, 0.0),
                ..Default::default()
            },
            imu: ImuSpec::default(),
            lidar: LidarSpec::default(),
        }
    }

    /// ±30° pitch at 1 Hz with brisk translation and yaw, plus an 18 Hz
    /// rough-terrain vibration of about 2° that a spline cannot follow.
    pub fn aggressive(seed: u64) -> Self {
        let vib = 2f64.to_radians();
        Self {
            duration: 20.0,
            seed,
            world: World::default(),
            trajectory: ParametricTrajectory {
                x: Channel::sine(1.5, 0.2, 0.0).with_vibration(0.0005, 16.7, 0.2),
                y: Channel::sine(1.0, 0.25, 1.0),
                z: Channel::sine(0.3, 1.0, 0.0).with_vibration(0.001, 19.3, 0.7),
                roll: Channel::sine(10f64.to_radians(), 0.7, 0.4).with_vibration(vib, 18.0, 0.3),
                pitch: Channel::sine(30f64.to_radians(), 1.0, 0.0).with_vibration(vib, 20.3, 1.1),
                yaw: Channel::sine(0.8, 0.2, 0.0).with_vibration(0.5 * vib, 15.7, 2.0),
                ..Default::default()
            },
            imu: ImuSpec::default(),
            lidar: LidarSpec::default(),
        }
    }

    /// Removes every noise source and bias.
    pub fn noise_free(mut self) -> Self {
        self.imu.gyro_noise = 0.0;
        self.imu.acc_noise = 0.0;
        self.imu.gyro_bias = [0.0; 3];
        self.imu.acc_bias = [0.0; 3];
        self.lidar.range_std = 0.0;
        self.lidar.bearing_std_deg = 0.0;
        self.lidar.outlier_fraction = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.duration > 0.0
            && self.imu.rate_hz > 0.0
            && self.lidar.scan_period > 0.0
            && self.lidar.rings > 0
            && self.lidar.azimuth_steps > 0
            && self.lidar.max_range > self.lidar.min_range
            && (0.0..=1.0).contains(&self.lidar.outlier_fraction);
        if ok {
            Ok(())
        } else {
            Err(Error::Config("scenario: rates, duration and ranges must be positive".into()))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scan {
    pub t_start: f64,
    pub t_end: f64,
    /// Sensor-frame points sorted by time.
    pub points: Vec<TimedPoint>,
    /// Whether each point carries an injected gross error.
    pub outlier: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimData {
    /// Truth at every IMU timestamp.
    pub truth: Vec<TruthSample>,
    pub imu: Vec<ImuSample>,
    pub scans: Vec<Scan>,
}

fn gauss3(rng: &mut ChaCha8Rng) -> Vec3 {
    Vec3::from_fn(|_, _| StandardNormal.sample(rng))
}

pub fn generate(spec: &ScenarioSpec) -> Result<SimData> {
    spec.validate()?;
    let traj = &spec.trajectory;
    let g = Vec3::new(0.0, 0.0, spec.imu.gravity);
    let mut imu_rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(2).wrapping_add(1));
    let mut lidar_rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(2).wrapping_add(2));

    let dt = 1.0 / spec.imu.rate_hz;
    let n_imu = (spec.duration * spec.imu.rate_hz).round() as usize;
    let bg = Vec3::from(spec.imu.gyro_bias);
    let ba = Vec3::from(spec.imu.acc_bias);
    let mut truth = Vec::with_capacity(n_imu + 1);
    let mut imu = Vec::with_capacity(n_imu + 1);
    for i in 0..=n_imu {
        let t = i as f64 * dt;
        let s = traj.sample(t);
        let gyro = s.omega + bg + gauss3(&mut imu_rng) * spec.imu.gyro_noise;
        let acc = s.rot.inverse() * (s.acc + g) + ba + gauss3(&mut imu_rng) * spec.imu.acc_noise;
        truth.push(s);
        imu.push(ImuSample { t, gyro, acc });
    }

    let l = &spec.lidar;
    let ext = l.extrinsics();
    let n_scans = (spec.duration / l.scan_period).floor() as usize;
    let bearing = l.bearing_std_deg.to_radians();
    let dirs: Vec<Vec<Vec3>> = (0..l.azimuth_steps)
        .map(|j| {
            let az = std::f64::consts::TAU * j as f64 / l.azimuth_steps as f64;
            (0..l.rings)
                .map(|r| {
                    let el = if l.rings == 1 {
                        0.0
                    } else {
                        (l.elevation_min_deg + (l.elevation_max_deg - l.elevation_min_deg) * r as f64 / (l.rings - 1) as f64)
                            .to_radians()
                    };
                    Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin())
                })
                .collect()
        })
        .collect();

    let mut scans = Vec::with_capacity(n_scans);
    for k in 0..n_scans {
        let t_start = k as f64 * l.scan_period;
        let t_end = t_start + l.scan_period;
        let mut points = Vec::with_capacity(l.points_per_scan());
        let mut outlier = Vec::with_capacity(l.points_per_scan());
        for (j, column) in dirs.iter().enumerate() {
            let t = t_start + l.scan_period * (j + 1) as f64 / l.azimuth_steps as f64;
            let s = traj.sample(t);
            let origin = s.rot * ext.trans + s.pos;
            let r_wl = s.rot * ext.rot;
            for b in column {
                let Some(range) = spec.world.raycast(&origin, &(r_wl * b)) else { continue };
                if range < l.min_range || range > l.max_range {
                    continue;
                }
                let n = gauss3(&mut lidar_rng);
                let mut r_meas = range + l.range_std * n.x;
                let tangent = {
                    let a = b.cross(&Vec3::z());
                    let a = if a.norm() < 1e-6 { b.cross(&Vec3::x()) } else { a };
                    let a = a.normalize();
                    a * n.y + b.cross(&a) * n.z
                };
                let b_meas = exp_so3(&(tangent * bearing)) * b;
                let is_outlier = l.outlier_fraction > 0.0 && lidar_rng.random::<f64>() < l.outlier_fraction;
                if is_outlier {
                    let off = lidar_rng.random_range(l.outlier_offset[0]..=l.outlier_offset[1]);
                    let sign = if lidar_rng.random::<bool>() { 1.0 } else { -1.0 };
                    r_meas = (r_meas + sign * off).max(l.min_range);
                }
                points.push(TimedPoint { t, p: b_meas * r_meas });
                outlier.push(is_outlier);
            }
        }
        scans.push(Scan { t_start, t_end, points, outlier });
    }
    Ok(SimData { truth, imu, scans })
}
