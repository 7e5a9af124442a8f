//! Pose normalization: morphable-model shape assembly, scaled orthographic
//! projection, frontal normalization, keypoint sampling and heatmap encoding.
//!
//! Coordinates follow the image convention throughout: x to the right, y down,
//! and in model space z points toward the viewer. Projection rotates in 3D
//! first and then drops z, i.e. `V = f · Π · (R · S) + t`.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix2xX, Matrix3, Matrix3xX, Rotation3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const NUM_KEYPOINTS: usize = 18;
pub const SHAPE_COEFFS: usize = 40;
pub const EXPR_COEFFS: usize = 10;

/// Rows and columns of the latitude/longitude grid of the toy head mesh.
pub const MESH_ROWS: usize = 16;
pub const MESH_COLS: usize = 32;
pub const TOY_VERTICES: usize = MESH_ROWS * MESH_COLS;

/// `(row, col)` grid positions of the 18 keypoints on the toy mesh:
/// forehead, brows, eyes, nose bridge and tip, mouth, jaw.
pub const TOY_KEYPOINT_GRID: [(usize, usize); NUM_KEYPOINTS] = [
    (2, 0),
    (4, 29),
    (4, 30),
    (4, 2),
    (4, 3),
    (6, 29),
    (6, 30),
    (6, 2),
    (6, 3),
    (7, 0),
    (9, 0),
    (11, 30),
    (11, 0),
    (11, 2),
    (12, 0),
    (13, 28),
    (14, 0),
    (13, 4),
];

/// Vertex indices of [`TOY_KEYPOINT_GRID`].
pub fn toy_keypoint_indices() -> Vec<usize> {
    TOY_KEYPOINT_GRID.iter().map(|&(r, c)| r * MESH_COLS + c).collect()
}

/// Latitude (radians, negative is up) of a mesh row.
pub fn mesh_latitude(row: usize) -> f64 {
    (-75.0 + 150.0 * row as f64 / (MESH_ROWS - 1) as f64).to_radians()
}

/// Longitude (radians, 0 faces the viewer) of a mesh column, wrapped to `(-π, π]`.
pub fn mesh_longitude(col: usize) -> f64 {
    let t = std::f64::consts::TAU * col as f64 / MESH_COLS as f64;
    if t > std::f64::consts::PI {
        t - std::f64::consts::TAU
    } else {
        t
    }
}

/// The linear part of a morphable model: mean shape plus shape and expression bases.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeModel {
    mean: Matrix3xX<f64>,
    shape_basis: Vec<Matrix3xX<f64>>,
    expr_basis: Vec<Matrix3xX<f64>>,
}

impl ShapeModel {
    pub fn new(mean: Matrix3xX<f64>, shape_basis: Vec<Matrix3xX<f64>>, expr_basis: Vec<Matrix3xX<f64>>) -> Result<Self> {
        let n = mean.ncols();
        if n == 0 {
            return Err(Error::InvalidBasis("mean shape has no vertices".into()));
        }
        if shape_basis.len() != SHAPE_COEFFS || expr_basis.len() != EXPR_COEFFS {
            return Err(Error::InvalidBasis(format!(
                "expected {SHAPE_COEFFS} shape and {EXPR_COEFFS} expression bases, got {} and {}",
                shape_basis.len(),
                expr_basis.len()
            )));
        }
        for (i, b) in shape_basis.iter().chain(&expr_basis).enumerate() {
            if b.ncols() != n {
                return Err(Error::InvalidBasis(format!("basis {i} has {} vertices, mean has {n}", b.ncols())));
            }
            if b.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidBasis(format!("basis {i} is not finite")));
            }
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidBasis("mean shape is not finite".into()));
        }
        Ok(Self { mean, shape_basis, expr_basis })
    }

    pub fn num_vertices(&self) -> usize {
        self.mean.ncols()
    }

    pub fn mean(&self) -> &Matrix3xX<f64> {
        &self.mean
    }

    pub fn shape_basis(&self) -> &[Matrix3xX<f64>] {
        &self.shape_basis
    }

    pub fn expr_basis(&self) -> &[Matrix3xX<f64>] {
        &self.expr_basis
    }

    /// `S = S̄ + Σ A_s[i]·α_s[i] + Σ A_exp[j]·α_exp[j]`.
    pub fn assemble(&self, coeffs: &ShapeCoefficients) -> Shape3D {
        let mut s = self.mean.clone();
        for (b, &a) in self.shape_basis.iter().zip(&coeffs.alpha_s) {
            s += b * a;
        }
        for (b, &a) in self.expr_basis.iter().zip(&coeffs.alpha_exp) {
            s += b * a;
        }
        Shape3D { vertices: s }
    }
}

/// Morphable model with the keypoint vertex list used for landmarks.
#[derive(Clone, Debug, PartialEq)]
pub struct MorphableBasis {
    model: ShapeModel,
    keypoint_indices: Vec<usize>,
    seed: Option<u64>,
}

impl MorphableBasis {
    pub fn new(model: ShapeModel, keypoint_indices: Vec<usize>, seed: Option<u64>) -> Result<Self> {
        let n = model.num_vertices();
        if n < NUM_KEYPOINTS {
            return Err(Error::InvalidBasis(format!("{n} vertices, need at least {NUM_KEYPOINTS}")));
        }
        if keypoint_indices.len() != NUM_KEYPOINTS {
            return Err(Error::InvalidBasis(format!("{} keypoint indices, need {NUM_KEYPOINTS}", keypoint_indices.len())));
        }
        for (i, &k) in keypoint_indices.iter().enumerate() {
            if k >= n {
                return Err(Error::InvalidBasis(format!("keypoint index {k} out of range for {n} vertices")));
            }
            if keypoint_indices[..i].contains(&k) {
                return Err(Error::InvalidBasis(format!("keypoint index {k} repeated")));
            }
        }
        Ok(Self { model, keypoint_indices, seed })
    }

    /// Deterministic head-like basis: an ellipsoid with a nose, low-frequency
    /// radial deformations as shape bases and localized bumps as expression bases.
    pub fn toy(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (rx, ry, rz) = (0.78, 1.0, 0.85);
        let mut mean = Matrix3xX::zeros(TOY_VERTICES);
        let mut normals = Vec::with_capacity(TOY_VERTICES);
        let mut angles = Vec::with_capacity(TOY_VERTICES);
        for r in 0..MESH_ROWS {
            for c in 0..MESH_COLS {
                let (phi, theta) = (mesh_latitude(r), mesh_longitude(c));
                let dir = Vector3::new(phi.cos() * theta.sin(), phi.sin(), phi.cos() * theta.cos());
                let nose = 0.16 * (-(theta / 0.22).powi(2) / 2.0 - ((phi - 0.2) / 0.2).powi(2) / 2.0).exp();
                let v = Vector3::new(rx * dir.x, ry * dir.y, rz * dir.z + nose);
                mean.set_column(r * MESH_COLS + c, &v);
                normals.push(dir);
                angles.push((phi, theta));
            }
        }
        let mut shape_basis = Vec::with_capacity(SHAPE_COEFFS);
        for i in 0..SHAPE_COEFFS {
            let amp = 0.05 / (1.0 + i as f64 / 4.0).sqrt();
            let terms: Vec<(f64, f64, f64, f64)> = (0..2)
                .map(|_| {
                    (
                        rng.random_range(1..=3) as f64,
                        rng.random_range(0.0..std::f64::consts::TAU),
                        rng.random_range(1..=3) as f64,
                        rng.random_range(0.0..std::f64::consts::TAU),
                    )
                })
                .collect();
            let mut b = Matrix3xX::zeros(TOY_VERTICES);
            for (v, (&(phi, theta), n)) in angles.iter().zip(&normals).enumerate() {
                let d: f64 = terms.iter().map(|&(kt, pt, kp, pp)| (kt * theta + pt).cos() * (kp * phi + pp).cos()).sum();
                b.set_column(v, &(n * (amp * d)));
            }
            shape_basis.push(b);
        }
        let mut expr_basis = Vec::with_capacity(EXPR_COEFFS);
        for _ in 0..EXPR_COEFFS {
            let theta0 = rng.random_range(-0.6..0.6);
            let phi0 = rng.random_range(-0.3..0.8);
            let lift = rng.random_range(-1.0..1.0);
            let mut b = Matrix3xX::zeros(TOY_VERTICES);
            for (v, (&(phi, theta), n)) in angles.iter().zip(&normals).enumerate() {
                let w = 0.04 * (-((theta - theta0).powi(2) + (phi - phi0).powi(2)) / (2.0 * 0.3f64.powi(2))).exp();
                b.set_column(v, &((n + Vector3::new(0.0, lift, 0.0)) * w));
            }
            expr_basis.push(b);
        }
        let model = ShapeModel::new(mean, shape_basis, expr_basis).expect("toy basis is well formed");
        Self::new(model, toy_keypoint_indices(), Some(seed)).expect("toy keypoints are valid")
    }

    pub fn model(&self) -> &ShapeModel {
        &self.model
    }

    pub fn num_vertices(&self) -> usize {
        self.model.num_vertices()
    }

    pub fn keypoint_indices(&self) -> &[usize] {
        &self.keypoint_indices
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let flat = |m: &Matrix3xX<f64>| m.as_slice().to_vec();
        let file = BasisFile {
            seed: self.seed,
            num_vertices: self.num_vertices(),
            mean_shape: flat(&self.model.mean),
            shape_basis: self.model.shape_basis.iter().map(flat).collect(),
            expr_basis: self.model.expr_basis.iter().map(flat).collect(),
            keypoint_indices: self.keypoint_indices.clone(),
        };
        std::fs::write(path, serde_json::to_vec(&file)?)?;
        Ok(())
    }

    /// Reads a basis archive and validates every invariant.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file: BasisFile = serde_json::from_slice(&std::fs::read(path)?)?;
        let n = file.num_vertices;
        let mat = |v: Vec<f64>| -> Result<Matrix3xX<f64>> {
            if v.len() != 3 * n {
                return Err(Error::InvalidBasis(format!("matrix with {} values, expected {}", v.len(), 3 * n)));
            }
            Ok(Matrix3xX::from_vec(v))
        };
        let model = ShapeModel::new(
            mat(file.mean_shape)?,
            file.shape_basis.into_iter().map(mat).collect::<Result<_>>()?,
            file.expr_basis.into_iter().map(mat).collect::<Result<_>>()?,
        )?;
        Self::new(model, file.keypoint_indices, file.seed)
    }
}

#[derive(Serialize, Deserialize)]
struct BasisFile {
    seed: Option<u64>,
    num_vertices: usize,
    /// Column-major 3×N: x, y, z of vertex 0, then vertex 1, ...
    mean_shape: Vec<f64>,
    shape_basis: Vec<Vec<f64>>,
    expr_basis: Vec<Vec<f64>>,
    keypoint_indices: Vec<usize>,
}

/// Shape and expression coefficients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeCoefficients {
    alpha_s: Vec<f64>,
    alpha_exp: Vec<f64>,
}

impl ShapeCoefficients {
    pub fn new(alpha_s: Vec<f64>, alpha_exp: Vec<f64>) -> Result<Self> {
        if alpha_s.len() != SHAPE_COEFFS || alpha_exp.len() != EXPR_COEFFS {
            return Err(invalid(format!(
                "coefficient lengths {} and {}, expected {SHAPE_COEFFS} and {EXPR_COEFFS}",
                alpha_s.len(),
                alpha_exp.len()
            )));
        }
        if alpha_s.iter().chain(&alpha_exp).any(|v| !v.is_finite()) {
            return Err(invalid("non-finite shape coefficient"));
        }
        Ok(Self { alpha_s, alpha_exp })
    }

    pub fn zeros() -> Self {
        Self { alpha_s: vec![0.0; SHAPE_COEFFS], alpha_exp: vec![0.0; EXPR_COEFFS] }
    }

    pub fn alpha_s(&self) -> &[f64] {
        &self.alpha_s
    }

    pub fn alpha_exp(&self) -> &[f64] {
        &self.alpha_exp
    }
}

/// Scale, rotation and 2D translation of a scaled orthographic camera.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RigidRepr", into = "RigidRepr")]
pub struct RigidParams {
    scale: f64,
    rotation: Matrix3<f64>,
    translation: Vector2<f64>,
}

#[derive(Serialize, Deserialize)]
struct RigidRepr {
    scale: f64,
    /// Row-major 3×3.
    rotation: [f64; 9],
    translation: [f64; 2],
}

impl TryFrom<RigidRepr> for RigidParams {
    type Error = Error;
    fn try_from(r: RigidRepr) -> Result<Self> {
        Self::new(r.scale, Matrix3::from_row_slice(&r.rotation), Vector2::new(r.translation[0], r.translation[1]))
    }
}

impl From<RigidParams> for RigidRepr {
    fn from(p: RigidParams) -> Self {
        let m = p.rotation;
        Self {
            scale: p.scale,
            rotation: [m[(0, 0)], m[(0, 1)], m[(0, 2)], m[(1, 0)], m[(1, 1)], m[(1, 2)], m[(2, 0)], m[(2, 1)], m[(2, 2)]],
            translation: [p.translation.x, p.translation.y],
        }
    }
}

impl RigidParams {
    pub fn new(scale: f64, rotation: Matrix3<f64>, translation: Vector2<f64>) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(invalid(format!("scale must be positive, got {scale}")));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(invalid("translation is not finite"));
        }
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det = rotation.determinant();
        if !(ortho < 1e-9) || !((det - 1.0).abs() < 1e-9) {
            return Err(Error::InvalidRotation(format!("|RᵀR − I| = {ortho:e}, det = {det}")));
        }
        Ok(Self { scale, rotation, translation })
    }

    /// Rotation `R = R_z(roll) · R_x(pitch) · R_y(yaw)`, angles in degrees.
    pub fn from_angles(scale: f64, yaw_deg: f64, pitch_deg: f64, roll_deg: f64, translation: [f64; 2]) -> Result<Self> {
        let r = Rotation3::from_axis_angle(&Vector3::z_axis(), roll_deg.to_radians())
            * Rotation3::from_axis_angle(&Vector3::x_axis(), pitch_deg.to_radians())
            * Rotation3::from_axis_angle(&Vector3::y_axis(), yaw_deg.to_radians());
        Self::new(scale, r.into_inner(), Vector2::new(translation[0], translation[1]))
    }

    pub fn identity() -> Self {
        Self { scale: 1.0, rotation: Matrix3::identity(), translation: Vector2::zeros() }
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector2<f64> {
        &self.translation
    }

    pub fn with_translation(&self, t: [f64; 2]) -> Self {
        Self { translation: Vector2::new(t[0], t[1]), ..self.clone() }
    }
}

/// 3D vertex positions in model units.
#[derive(Clone, Debug, PartialEq)]
pub struct Shape3D {
    pub vertices: Matrix3xX<f64>,
}

impl Shape3D {
    pub fn num_vertices(&self) -> usize {
        self.vertices.ncols()
    }
}

/// 18 keypoints in pixel coordinates (origin top-left, x right, y down).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    points: Vec<[f64; 2]>,
}

impl LandmarkSet {
    pub fn new(points: Vec<[f64; 2]>) -> Result<Self> {
        if points.len() != NUM_KEYPOINTS {
            return Err(invalid(format!("{} landmarks, expected {NUM_KEYPOINTS}", points.len())));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(invalid("non-finite landmark"));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self { points: self.points.iter().map(|p| [p[0] + dx, p[1] + dy]).collect() }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.points
            .iter()
            .zip(&other.points)
            .flat_map(|(a, b)| [(a[0] - b[0]).abs(), (a[1] - b[1]).abs()])
            .fold(0.0, f64::max)
    }

    /// Plain-text table, one `index x y` row per keypoint.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (i, p) in self.points.iter().enumerate() {
            let _ = writeln!(s, "{i} {:?} {:?}", p[0], p[1]);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut points = vec![None; NUM_KEYPOINTS];
        for (line_no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let bad = || invalid(format!("landmark line {}: expected `index x y`", line_no + 1));
            if fields.len() != 3 {
                return Err(bad());
            }
            let idx: usize = fields[0].parse().map_err(|_| bad())?;
            let x: f64 = fields[1].parse().map_err(|_| bad())?;
            let y: f64 = fields[2].parse().map_err(|_| bad())?;
            let slot = points.get_mut(idx).ok_or_else(|| invalid(format!("landmark index {idx} out of range")))?;
            if slot.replace([x, y]).is_some() {
                return Err(invalid(format!("landmark index {idx} repeated")));
            }
        }
        let points = points
            .into_iter()
            .enumerate()
            .map(|(i, p)| p.ok_or_else(|| invalid(format!("landmark {i} missing"))))
            .collect::<Result<_>>()?;
        Self::new(points)
    }
}

/// Per-keypoint Gaussian maps, `18 × H × W`, stored channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapStack {
    maps: Vec<f32>,
    height: usize,
    width: usize,
    sigma: f64,
}

impl HeatmapStack {
    pub fn maps(&self) -> &[f32] {
        &self.maps
    }

    pub fn channel(&self, k: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.maps[k * n..(k + 1) * n]
    }

    pub fn get(&self, k: usize, y: usize, x: usize) -> f32 {
        self.maps[(k * self.height + y) * self.width + x]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn zeros(height: usize, width: usize, sigma: f64) -> Self {
        Self { maps: vec![0.0; NUM_KEYPOINTS * height * width], height, width, sigma }
    }
}

/// Assembles the 3D shape of a coefficient vector.
pub fn assemble_shape(basis: &MorphableBasis, coeffs: &ShapeCoefficients) -> Shape3D {
    basis.model.assemble(coeffs)
}

/// `V_p = f · Π · (R · S) + t`, one column per vertex.
pub fn project(shape: &Shape3D, rigid: &RigidParams) -> Matrix2xX<f64> {
    let rotated = rigid.rotation * &shape.vertices;
    let mut v = rotated.fixed_rows::<2>(0) * rigid.scale;
    for mut col in v.column_iter_mut() {
        col += rigid.translation;
    }
    v
}

/// `V_f = f · Π · S`: the projection with rotation and translation removed.
pub fn normalize_frontal(shape: &Shape3D, rigid: &RigidParams) -> Matrix2xX<f64> {
    shape.vertices.fixed_rows::<2>(0) * rigid.scale
}

/// Gathers the keypoint columns of a dense `2 × N` coordinate matrix.
pub fn sample_keypoints(dense: &Matrix2xX<f64>, basis: &MorphableBasis) -> Result<LandmarkSet> {
    let n = dense.ncols();
    let mut points = Vec::with_capacity(NUM_KEYPOINTS);
    for &k in &basis.keypoint_indices {
        if k >= n {
            return Err(Error::InvalidBasis(format!("keypoint index {k} out of range for {n} columns")));
        }
        points.push([dense[(0, k)], dense[(1, k)]]);
    }
    LandmarkSet::new(points)
}

/// Encodes each landmark as `exp(-d² / 2σ²)` evaluated at integer pixel positions.
///
/// Landmarks outside `[0, W) × [0, H)` produce an all-zero channel.
pub fn encode_heatmaps(landmarks: &LandmarkSet, height: usize, width: usize, sigma: f64) -> Result<HeatmapStack> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(invalid(format!("heatmap sigma must be positive, got {sigma}")));
    }
    if height == 0 || width == 0 {
        return Err(invalid("heatmap size must be positive"));
    }
    let mut stack = HeatmapStack::zeros(height, width, sigma);
    let inv = 1.0 / (2.0 * sigma * sigma);
    // Beyond 15σ the value underflows f32 to zero.
    let reach = (sigma * 15.0).ceil() as i64 + 1;
    for (k, p) in landmarks.points.iter().enumerate() {
        let [px, py] = *p;
        if !(px >= 0.0 && px < width as f64 && py >= 0.0 && py < height as f64) {
            continue;
        }
        let (cx, cy) = (px.floor() as i64, py.floor() as i64);
        let y0 = (cy - reach).max(0) as usize;
        let y1 = ((cy + reach + 1).min(height as i64)) as usize;
        let x0 = (cx - reach).max(0) as usize;
        let x1 = ((cx + reach + 1).min(width as i64)) as usize;
        let base = k * height * width;
        for y in y0..y1 {
            let dy = y as f64 - py;
            for x in x0..x1 {
                let dx = x as f64 - px;
                stack.maps[base + y * width + x] = (-(dx * dx + dy * dy) * inv).exp() as f32;
            }
        }
    }
    Ok(stack)
}
