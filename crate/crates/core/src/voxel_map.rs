//! Probabilistic adaptive voxel map with plane and voxel features.
//!
//! Root cells live on a cubic lattice and subdivide into octants. A node whose
//! points fail the planarity test is split until a plane is found or the
//! maximum depth is reached; non-planar leaves at that depth become voxel
//! features.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use nalgebra::{SMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lie_math::{skew, Mat3, Rot3, Vec3};

/// Covariance of `(λ₁, λ₂, λ₃, u₁, u₂, u₃)`.
pub type FeatureCov = SMatrix<f64, 12, 12>;
type FeatureJac = SMatrix<f64, 12, 3>;

/// LiDAR-to-IMU extrinsics `ᴵT_L`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Extrinsics {
    pub rot: Rot3,
    pub trans: Vec3,
}

impl Default for Extrinsics {
    fn default() -> Self {
        Self { rot: Rot3::identity(), trans: Vec3::zeros() }
    }
}

impl Extrinsics {
    /// From roll/pitch/yaw in degrees (`Rz Ry Rx`) and a translation.
    pub fn from_rpy_deg(rpy_deg: [f64; 3], trans: [f64; 3]) -> Self {
        let [r, p, y] = rpy_deg.map(f64::to_radians);
        Self { rot: Rot3::from_euler_angles(r, p, y), trans: Vec3::from(trans) }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rot * p + self.trans
    }
}

/// World-frame point with its covariance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimedPointWorld {
    pub t: f64,
    pub p: Vec3,
    pub cov: Mat3,
}

/// Pose of the body at a point's timestamp with the uncertainty of its
/// rotation (right perturbation) and position.
#[derive(Clone, Copy, Debug)]
pub struct UncertainPose {
    pub rot: Rot3,
    pub pos: Vec3,
    pub cov_rot: Mat3,
    pub cov_pos: Mat3,
}

/// `Σ_w = R R_IL Σ_L (R R_IL)ᵀ + Σ_t + R ⌊s⌋ Σ_R ⌊s⌋ᵀ Rᵀ` with
/// `s = R_IL p + t_IL`.
pub fn project_point_uncertainty(
    t: f64,
    p_lidar: &Vec3,
    cov_lidar: &Mat3,
    pose: &UncertainPose,
    ext: &Extrinsics,
) -> TimedPointWorld {
    let s = ext.apply(p_lidar);
    let r = pose.rot.matrix();
    let rl = r * ext.rot.matrix();
    let rs = r * skew(&s);
    let mut cov = rl * cov_lidar * rl.transpose() + pose.cov_pos + rs * pose.cov_rot * rs.transpose();
    cov = (cov + cov.transpose()) * 0.5;
    TimedPointWorld { t, p: pose.rot * s + pose.pos, cov }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct MapConfig {
    /// Edge length of root cells, m.
    pub root_size: f64,
    pub max_depth: u32,
    pub min_points: usize,
    /// Plane when `λ₁/λ₃` is below this.
    pub planarity_ratio: f64,
    /// A classified node stops accepting points once it holds this many.
    pub max_points_per_node: usize,
    /// Maximum number of root cells; least recently touched are pruned.
    pub capacity: usize,
    /// Relative eigenvalue gap below which eigenvector uncertainty saturates.
    pub eigen_gap_tol: f64,
    /// Variance assigned to a saturated eigenvector component.
    pub saturated_variance: f64,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            root_size: 1.0,
            max_depth: 3,
            min_points: 20,
            planarity_ratio: 0.01,
            max_points_per_node: 100,
            capacity: 100_000,
            eigen_gap_tol: 1e-6,
            saturated_variance: 1.0,
        }
    }
}

impl MapConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.root_size > 0.0) || self.min_points < 4 || self.max_points_per_node < self.min_points {
            return Err(Error::Config("map: root_size > 0, min_points >= 4, max_points_per_node >= min_points".into()));
        }
        if !(self.planarity_ratio > 0.0) || self.capacity == 0 {
            return Err(Error::Config("map: planarity_ratio > 0 and capacity > 0 required".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FeatureClass {
    Immature,
    Plane,
    Voxel,
    /// Split into octants; carries no feature of its own.
    Subdivided,
}

impl FeatureClass {
    pub fn as_str(&self) -> &'static str {
        match self {
            FeatureClass::Immature => "immature",
            FeatureClass::Plane => "plane",
            FeatureClass::Voxel => "voxel",
            FeatureClass::Subdivided => "subdivided",
        }
    }
}

/// Eigen-structure of a point set and its first-order uncertainty.
#[derive(Clone, Debug)]
pub struct Feature {
    pub mean: Vec3,
    /// Ascending.
    pub eigenvalues: Vec3,
    /// Columns `u₁, u₂, u₃` matching `eigenvalues`.
    pub eigenvectors: Mat3,
    pub cov: FeatureCov,
}

impl Feature {
    pub fn normal(&self) -> Vec3 {
        self.eigenvectors.column(0).into_owned()
    }

    pub fn u(&self, k: usize) -> Vec3 {
        self.eigenvectors.column(k).into_owned()
    }

    pub fn cov_u(&self, k: usize) -> Mat3 {
        self.cov.fixed_view::<3, 3>(3 + 3 * k, 3 + 3 * k).into_owned()
    }

    pub fn var_lambda(&self, k: usize) -> f64 {
        self.cov[(k, k)]
    }
}

/// Mean and `(1/N) Σ (p−q)(p−q)ᵀ`.
fn mean_scatter(points: &[TimedPointWorld]) -> (Vec3, Mat3) {
    let n = points.len() as f64;
    let q = points.iter().map(|p| p.p).sum::<Vec3>() / n;
    let s = points.iter().fold(Mat3::zeros(), |acc, p| {
        let d = p.p - q;
        acc + d * d.transpose()
    }) / n;
    (q, s)
}

/// Symmetric eigendecomposition sorted ascending.
pub fn sorted_eigen(m: &Mat3) -> (Vec3, Mat3) {
    let eig = SymmetricEigen::new((m + m.transpose()) * 0.5);
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let vals = Vec3::new(eig.eigenvalues[idx[0]], eig.eigenvalues[idx[1]], eig.eigenvalues[idx[2]]);
    let mut vecs = Mat3::zeros();
    for (c, &i) in idx.iter().enumerate() {
        vecs.set_column(c, &eig.eigenvectors.column(i));
    }
    (vals, vecs)
}

/// `∂(λ, u)/∂p_i` for every point. Pairs whose eigenvalue gap is below the
/// tolerance are skipped and reported in the returned mask.
fn eigen_jacobians(
    points: &[TimedPointWorld],
    q: &Vec3,
    vals: &Vec3,
    vecs: &Mat3,
    gap_tol: f64,
) -> (Vec<FeatureJac>, [bool; 3]) {
    let n = points.len() as f64;
    let scale = vals[2].abs().max(f64::MIN_POSITIVE);
    let mut saturated = [false; 3];
    for k in 0..3 {
        for l in 0..3 {
            if k != l && (vals[k] - vals[l]).abs() < gap_tol * scale {
                saturated[k] = true;
            }
        }
    }
    let u: [Vec3; 3] = std::array::from_fn(|k| vecs.column(k).into_owned());
    let jacs = points
        .iter()
        .map(|pt| {
            let a = pt.p - q;
            let mut j = FeatureJac::zeros();
            for k in 0..3 {
                let row = u[k].transpose() * (2.0 / n * u[k].dot(&a));
                j.fixed_view_mut::<1, 3>(k, 0).copy_from(&row);
                if saturated[k] {
                    continue;
                }
                let mut du = Mat3::zeros();
                for l in 0..3 {
                    if l == k {
                        continue;
                    }
                    let sym = u[k] * u[l].transpose() + u[l] * u[k].transpose();
                    du += u[l] * (a.transpose() * sym) / (n * (vals[k] - vals[l]));
                }
                j.fixed_view_mut::<3, 3>(3 + 3 * k, 0).copy_from(&du);
            }
            j
        })
        .collect();
    (jacs, saturated)
}

/// First-order covariance of `(λ, u)` from the per-point covariances; the
/// mean's uncertainty is left out.
pub fn feature_uncertainty(points: &[TimedPointWorld], cfg: &MapConfig) -> Option<Feature> {
    if points.len() < 2 {
        return None;
    }
    let (q, scatter) = mean_scatter(points);
    let (vals, vecs) = sorted_eigen(&scatter);
    let (jacs, saturated) = eigen_jacobians(points, &q, &vals, &vecs, cfg.eigen_gap_tol);
    let mut cov = FeatureCov::zeros();
    for (j, pt) in jacs.iter().zip(points) {
        cov += j * pt.cov * j.transpose();
    }
    for k in 0..3 {
        if saturated[k] {
            let b = 3 + 3 * k;
            for i in 0..12 {
                cov[(b, i)] = 0.0;
                cov[(b + 1, i)] = 0.0;
                cov[(b + 2, i)] = 0.0;
                cov[(i, b)] = 0.0;
                cov[(i, b + 1)] = 0.0;
                cov[(i, b + 2)] = 0.0;
            }
            for r in 0..3 {
                cov[(b + r, b + r)] = cfg.saturated_variance;
            }
        }
    }
    cov = (cov + cov.transpose()) * 0.5;
    Some(Feature { mean: q, eigenvalues: vals.map(|v| v.max(0.0)), eigenvectors: vecs, cov })
}

#[derive(Clone, Debug)]
pub struct VoxelNode {
    pub level: u32,
    /// Lattice index at this node's level.
    pub key: [i64; 3],
    center: Vec3,
    half: f64,
    count: usize,
    /// Moments of `p − center`.
    sum: Vec3,
    sum_outer: Mat3,
    points: Vec<TimedPointWorld>,
    children: Vec<VoxelNode>,
    class: FeatureClass,
    feature: Option<Feature>,
    dirty: bool,
}

impl VoxelNode {
    fn new(level: u32, key: [i64; 3], center: Vec3, half: f64) -> Self {
        Self {
            level,
            key,
            center,
            half,
            count: 0,
            sum: Vec3::zeros(),
            sum_outer: Mat3::zeros(),
            points: Vec::new(),
            children: Vec::new(),
            class: FeatureClass::Immature,
            feature: None,
            dirty: false,
        }
    }

    pub fn class(&self) -> FeatureClass {
        self.class
    }

    pub fn feature(&self) -> Option<&Feature> {
        self.feature.as_ref()
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn center(&self) -> Vec3 {
        self.center
    }

    pub fn half_size(&self) -> f64 {
        self.half
    }

    pub fn children(&self) -> &[VoxelNode] {
        &self.children
    }

    pub fn retained_points(&self) -> &[TimedPointWorld] {
        &self.points
    }

    /// Mean and scatter from the running moments.
    pub fn moments(&self) -> Option<(Vec3, Mat3)> {
        if self.count == 0 {
            return None;
        }
        let n = self.count as f64;
        let m = self.sum / n;
        Some((self.center + m, self.sum_outer / n - m * m.transpose()))
    }

    fn frozen(&self, cfg: &MapConfig) -> bool {
        matches!(self.class, FeatureClass::Plane | FeatureClass::Voxel) && self.points.len() >= cfg.max_points_per_node
    }

    fn octant(&self, p: &Vec3) -> usize {
        // Ties go to the lower half.
        (p.x > self.center.x) as usize | ((p.y > self.center.y) as usize) << 1 | ((p.z > self.center.z) as usize) << 2
    }

    fn insert(&mut self, pt: TimedPointWorld, cfg: &MapConfig) {
        if self.class == FeatureClass::Subdivided {
            let o = self.octant(&pt.p);
            self.count += 1;
            let d = pt.p - self.center;
            self.sum += d;
            self.sum_outer += d * d.transpose();
            self.dirty = true;
            self.children[o].insert(pt, cfg);
            return;
        }
        if self.frozen(cfg) {
            return;
        }
        let d = pt.p - self.center;
        self.count += 1;
        self.sum += d;
        self.sum_outer += d * d.transpose();
        self.points.push(pt);
        self.dirty = true;
    }

    fn subdivide(&mut self) {
        let h = self.half * 0.5;
        self.children = (0..8)
            .map(|o| {
                let bit = |b: usize| ((o >> b) & 1) as i64;
                let key = [2 * self.key[0] + bit(0), 2 * self.key[1] + bit(1), 2 * self.key[2] + bit(2)];
                let off = Vec3::new(bit(0) as f64 - 0.5, bit(1) as f64 - 0.5, bit(2) as f64 - 0.5) * self.half;
                VoxelNode::new(self.level + 1, key, self.center + off, h)
            })
            .collect();
        self.class = FeatureClass::Subdivided;
        self.feature = None;
        let points = std::mem::take(&mut self.points);
        for pt in points {
            let o = self.octant(&pt.p);
            let child = &mut self.children[o];
            let d = pt.p - child.center;
            child.count += 1;
            child.sum += d;
            child.sum_outer += d * d.transpose();
            child.points.push(pt);
            child.dirty = true;
        }
    }

    fn refresh(&mut self, cfg: &MapConfig) {
        if !self.dirty {
            return;
        }
        self.dirty = false;
        if self.class == FeatureClass::Subdivided {
            for c in &mut self.children {
                c.refresh(cfg);
            }
            return;
        }
        if self.points.len() < cfg.min_points {
            self.class = FeatureClass::Immature;
            self.feature = None;
            return;
        }
        let Some(feature) = feature_uncertainty(&self.points, cfg) else { return };
        let l = feature.eigenvalues;
        if l[0] < cfg.planarity_ratio * l[2] {
            self.class = FeatureClass::Plane;
            self.feature = Some(feature);
        } else if self.level < cfg.max_depth {
            self.subdivide();
            for c in &mut self.children {
                c.refresh(cfg);
            }
        } else {
            self.class = FeatureClass::Voxel;
            self.feature = Some(feature);
        }
    }

    fn deepest_feature(&self, p: &Vec3) -> Option<&VoxelNode> {
        match self.class {
            FeatureClass::Plane | FeatureClass::Voxel => Some(self),
            FeatureClass::Subdivided => self.children[self.octant(p)].deepest_feature(p),
            FeatureClass::Immature => None,
        }
    }

    fn visit<'a>(&'a self, f: &mut impl FnMut(&'a VoxelNode)) {
        f(self);
        for c in &self.children {
            c.visit(f);
        }
    }
}

struct Root {
    node: VoxelNode,
    last_touched: u64,
}

pub struct VoxelMap {
    cfg: MapConfig,
    roots: HashMap<[i64; 3], Root>,
    clock: u64,
}

impl VoxelMap {
    pub fn new(cfg: MapConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, roots: HashMap::new(), clock: 0 })
    }

    pub fn config(&self) -> &MapConfig {
        &self.cfg
    }

    pub fn is_empty(&self) -> bool {
        self.roots.is_empty()
    }

    pub fn num_roots(&self) -> usize {
        self.roots.len()
    }

    /// Lattice cell `(k·s, (k+1)·s]` containing the coordinate, so points on
    /// a face belong to the lower cell.
    pub fn root_key(&self, p: &Vec3) -> [i64; 3] {
        let s = self.cfg.root_size;
        [(p.x / s).ceil() as i64 - 1, (p.y / s).ceil() as i64 - 1, (p.z / s).ceil() as i64 - 1]
    }

    pub fn insert_points(&mut self, batch: &[TimedPointWorld]) {
        self.clock += 1;
        let s = self.cfg.root_size;
        for pt in batch {
            if !pt.p.iter().all(|v| v.is_finite()) {
                continue;
            }
            let key = self.root_key(&pt.p);
            let clock = self.clock;
            let root = self.roots.entry(key).or_insert_with(|| {
                let center = Vec3::new(key[0] as f64 + 0.5, key[1] as f64 + 0.5, key[2] as f64 + 0.5) * s;
                Root { node: VoxelNode::new(0, key, center, 0.5 * s), last_touched: clock }
            });
            root.last_touched = clock;
            root.node.insert(*pt, &self.cfg);
        }
        for root in self.roots.values_mut() {
            root.node.refresh(&self.cfg);
        }
        self.prune();
    }

    fn prune(&mut self) {
        let excess = self.roots.len().saturating_sub(self.cfg.capacity);
        if excess == 0 {
            return;
        }
        let mut order: Vec<([i64; 3], u64)> = self.roots.iter().map(|(k, r)| (*k, r.last_touched)).collect();
        order.sort_by_key(|&(k, t)| (t, k));
        for (k, _) in order.into_iter().take(excess) {
            self.roots.remove(&k);
        }
    }

    /// Deepest plane or voxel-feature node containing `p`.
    pub fn query(&self, p: &Vec3) -> Option<&VoxelNode> {
        self.roots.get(&self.root_key(p))?.node.deepest_feature(p)
    }

    pub fn root(&self, key: &[i64; 3]) -> Option<&VoxelNode> {
        self.roots.get(key).map(|r| &r.node)
    }

    /// Every node in deterministic key order.
    pub fn nodes(&self) -> Vec<&VoxelNode> {
        let mut keys: Vec<&[i64; 3]> = self.roots.keys().collect();
        keys.sort();
        let mut out = Vec::new();
        for k in keys {
            self.roots[k].node.visit(&mut |n| out.push(n));
        }
        out
    }

    pub fn count_by_class(&self) -> HashMap<FeatureClass, usize> {
        let mut m = HashMap::new();
        for n in self.nodes() {
            *m.entry(n.class).or_insert(0) += 1;
        }
        m
    }

    /// One line per classified node:
    /// `level,kx,ky,kz,qx,qy,qz,l1,l2,l3,nx,ny,nz,class,count`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        let header = ["level", "kx", "ky", "kz", "qx", "qy", "qz", "l1", "l2", "l3", "nx", "ny", "nz", "class", "count"];
        w.write_record(header).map_err(|e| Error::io(path, e.into()))?;
        for n in self.nodes() {
            let Some(f) = &n.feature else { continue };
            let nrm = f.normal();
            let rec = [
                n.level.to_string(),
                n.key[0].to_string(),
                n.key[1].to_string(),
                n.key[2].to_string(),
                format!("{:.9}", f.mean.x),
                format!("{:.9}", f.mean.y),
                format!("{:.9}", f.mean.z),
                format!("{:.9e}", f.eigenvalues[0]),
                format!("{:.9e}", f.eigenvalues[1]),
                format!("{:.9e}", f.eigenvalues[2]),
                format!("{:.9}", nrm.x),
                format!("{:.9}", nrm.y),
                format!("{:.9}", nrm.z),
                n.class.as_str().to_string(),
                n.count.to_string(),
            ];
            w.write_record(&rec).map_err(|e| Error::io(path, e.into()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// ASCII PLY of every retained point.
    pub fn write_ply(&self, path: &Path) -> Result<()> {
        let pts: Vec<Vec3> = self.nodes().iter().flat_map(|n| n.points.iter().map(|p| p.p)).collect();
        let mut s = String::new();
        s.push_str("ply\nformat ascii 1.0\n");
        s.push_str(&format!("element vertex {}\n", pts.len()));
        s.push_str("property double x\nproperty double y\nproperty double z\nend_header\n");
        for p in &pts {
            s.push_str(&format!("{:.6} {:.6} {:.6}\n", p.x, p.y, p.z));
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
    }
}
