//! Procedural identities and a painter's-algorithm rasterizer for the toy head mesh.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    assemble_shape, mesh_latitude, mesh_longitude, project, sample_keypoints, LandmarkSet, MorphableBasis,
    RigidParams, ShapeCoefficients, EXPR_COEFFS, MESH_COLS, MESH_ROWS, SHAPE_COEFFS, TOY_VERTICES,
};
use crate::image::FaceImage;

/// Background intensity behind the head.
pub const BACKGROUND: [f32; 3] = [0.18, 0.2, 0.22];

/// Appearance parameters of one identity, expanded from its seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextureParams {
    pub skin: [f64; 3],
    pub hair: [f64; 3],
    pub eyes: [f64; 3],
    pub lips: [f64; 3],
    /// Latitude (radians) of the front hairline.
    pub hairline: f64,
    pub brow_strength: f64,
    pub beard: f64,
    /// Low-frequency skin variation: `(k_lon, k_lat, phase, rgb amplitude)`.
    pub waves: Vec<(f64, f64, f64, [f64; 3])>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyIdentity {
    pub identity_seed: u64,
    pub coeffs: ShapeCoefficients,
    pub texture: TextureParams,
}

impl ToyIdentity {
    /// Deterministic expansion of a seed into shape and appearance.
    pub fn from_seed(identity_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(identity_seed ^ 0x1d_7e_57);
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        let alpha_s = (0..SHAPE_COEFFS).map(|_| unit.sample(&mut rng)).collect();
        let alpha_exp = (0..EXPR_COEFFS).map(|_| 0.5 * unit.sample(&mut rng)).collect();
        let coeffs = ShapeCoefficients::new(alpha_s, alpha_exp).expect("finite coefficients");

        let tone = rng.random_range(0.35..0.85);
        let skin = [
            tone + rng.random_range(0.05..0.15),
            tone * rng.random_range(0.75..0.9),
            tone * rng.random_range(0.55..0.8),
        ];
        let hair_level = rng.random_range(0.05..0.75);
        let hair = [
            hair_level * rng.random_range(0.8..1.3),
            hair_level * rng.random_range(0.6..1.0),
            hair_level * rng.random_range(0.3..0.8),
        ];
        let eyes = [rng.random_range(0.05..0.5), rng.random_range(0.05..0.45), rng.random_range(0.05..0.6)];
        let lips = [rng.random_range(0.55..0.9), rng.random_range(0.15..0.45), rng.random_range(0.2..0.45)];
        let waves = (0..4)
            .map(|_| {
                (
                    rng.random_range(1..=3) as f64,
                    rng.random_range(1..=3) as f64,
                    rng.random_range(0.0..std::f64::consts::TAU),
                    [rng.random_range(-0.06..0.06), rng.random_range(-0.06..0.06), rng.random_range(-0.06..0.06)],
                )
            })
            .collect();
        let texture = TextureParams {
            skin: skin.map(|v: f64| v.clamp(0.0, 1.0)),
            hair: hair.map(|v: f64| v.clamp(0.0, 1.0)),
            eyes,
            lips,
            hairline: rng.random_range(-0.85..-0.45),
            brow_strength: rng.random_range(0.3..0.9),
            beard: if rng.random_bool(0.3) { rng.random_range(0.3..0.8) } else { 0.0 },
            waves,
        };
        Self { identity_seed, coeffs, texture }
    }

    /// Color of the surface at latitude `phi` and longitude `theta`.
    pub fn surface_color(&self, phi: f64, theta: f64) -> [f64; 3] {
        let t = &self.texture;
        let mut c = t.skin;
        for &(kl, kp, ph, amp) in &t.waves {
            let s = (kl * theta + ph).sin() * (kp * phi + 0.5 * ph).cos();
            for ch in 0..3 {
                c[ch] += amp[ch] * s;
            }
        }
        let mix = |c: &mut [f64; 3], target: [f64; 3], w: f64| {
            let w = w.clamp(0.0, 1.0);
            for ch in 0..3 {
                c[ch] = c[ch] * (1.0 - w) + target[ch] * w;
            }
        };
        let bump = |dt: f64, dp: f64, st: f64, sp: f64| (-(dt / st).powi(2) / 2.0 - (dp / sp).powi(2) / 2.0).exp();
        let at = theta.abs();
        // eyes with a light sclera ring
        let eye = bump(at - 0.36, phi + 0.26, 0.1, 0.07);
        mix(&mut c, [0.92, 0.92, 0.9], 1.4 * bump(at - 0.36, phi + 0.26, 0.17, 0.09));
        mix(&mut c, t.eyes, 1.8 * eye);
        // brows
        let brow = bump(at - 0.38, phi + 0.58, 0.2, 0.05);
        mix(&mut c, t.hair.map(|v| v * 0.6), t.brow_strength * 1.5 * brow);
        // mouth
        mix(&mut c, t.lips, 1.6 * bump(theta, phi - 0.6, 0.22, 0.07));
        // beard on the lower face
        if t.beard > 0.0 {
            let w = t.beard * smoothstep(0.55, 0.75, phi) * (1.0 - 0.6 * bump(theta, phi - 0.6, 0.25, 0.08));
            mix(&mut c, t.hair.map(|v| v * 0.8), w);
        }
        // hair: above the hairline in front, everywhere behind the ears
        let back = smoothstep(1.6, 2.1, at);
        let front = 1.0 - smoothstep(t.hairline - 0.08, t.hairline + 0.08, phi);
        let sides = smoothstep(1.2, 1.5, at) * (1.0 - smoothstep(0.25, 0.45, phi));
        mix(&mut c, t.hair, back.max(front).max(sides));
        c.map(|v| v.clamp(0.0, 1.0))
    }

    /// Per-vertex colors of the toy mesh.
    pub fn vertex_colors(&self) -> Vec<[f64; 3]> {
        let mut out = Vec::with_capacity(TOY_VERTICES);
        for r in 0..MESH_ROWS {
            for c in 0..MESH_COLS {
                out.push(self.surface_color(mesh_latitude(r), mesh_longitude(c)));
            }
        }
        out
    }
}

fn mean_of(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Index of the derived top pole vertex; the bottom pole follows it.
pub const POLE_TOP: usize = TOY_VERTICES;
pub const POLE_BOTTOM: usize = TOY_VERTICES + 1;

/// Vertex index triples of the toy mesh surface, closed at both poles.
pub fn mesh_triangles() -> Vec<[usize; 3]> {
    let mut tris = Vec::with_capacity(2 * MESH_ROWS * MESH_COLS);
    for r in 0..MESH_ROWS - 1 {
        for c in 0..MESH_COLS {
            let c1 = (c + 1) % MESH_COLS;
            let (a, b, d, e) = (r * MESH_COLS + c, r * MESH_COLS + c1, (r + 1) * MESH_COLS + c, (r + 1) * MESH_COLS + c1);
            tris.push([a, b, d]);
            tris.push([b, e, d]);
        }
    }
    let last = (MESH_ROWS - 1) * MESH_COLS;
    for c in 0..MESH_COLS {
        let c1 = (c + 1) % MESH_COLS;
        tris.push([POLE_TOP, c1, c]);
        tris.push([POLE_BOTTOM, last + c, last + c1]);
    }
    tris
}

/// Appends the pole vertices as centroids of the first and last rings.
fn with_poles<V: Copy>(values: &mut Vec<V>, mean: impl Fn(&[V]) -> V) {
    let top = mean(&values[..MESH_COLS]);
    let bottom = mean(&values[(MESH_ROWS - 1) * MESH_COLS..TOY_VERTICES]);
    values.push(top);
    values.push(bottom);
}

/// Side length of the supersampling grid per pixel.
const SUPERSAMPLE: usize = 2;

/// Fills triangles far-to-near with barycentric per-vertex color.
fn rasterize(points: &[(f64, f64)], depth: &[f64], colors: &[[f64; 3]], size: usize) -> Vec<[f64; 3]> {
    let ss = SUPERSAMPLE;
    let n = size * ss;
    let mut buf = vec![BACKGROUND.map(f64::from); n * n];
    let mut tris = mesh_triangles();
    tris.sort_by(|a, b| {
        let za: f64 = a.iter().map(|&i| depth[i]).sum();
        let zb: f64 = b.iter().map(|&i| depth[i]).sum();
        za.total_cmp(&zb)
    });
    // sample (sx, sy) of the supersampled grid sits at pixel coordinate
    // ((sx + 0.5) / ss - 0.5, (sy + 0.5) / ss - 0.5), so pixel centres are integers
    let to_sub = |v: f64| (v + 0.5) * ss as f64 - 0.5;
    for tri in &tris {
        let p: Vec<(f64, f64)> = tri.iter().map(|&i| (to_sub(points[i].0), to_sub(points[i].1))).collect();
        let area = (p[1].0 - p[0].0) * (p[2].1 - p[0].1) - (p[2].0 - p[0].0) * (p[1].1 - p[0].1);
        if area.abs() < 1e-12 {
            continue;
        }
        let x0 = p.iter().map(|q| q.0).fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
        let x1 = (p.iter().map(|q| q.0).fold(f64::NEG_INFINITY, f64::max).ceil() as isize).min(n as isize - 1);
        let y0 = p.iter().map(|q| q.1).fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
        let y1 = (p.iter().map(|q| q.1).fold(f64::NEG_INFINITY, f64::max).ceil() as isize).min(n as isize - 1);
        if x1 < 0 || y1 < 0 {
            continue;
        }
        for sy in y0..=y1 as usize {
            for sx in x0..=x1 as usize {
                let (x, y) = (sx as f64, sy as f64);
                let w0 = ((p[1].0 - x) * (p[2].1 - y) - (p[2].0 - x) * (p[1].1 - y)) / area;
                let w1 = ((p[2].0 - x) * (p[0].1 - y) - (p[0].0 - x) * (p[2].1 - y)) / area;
                let w2 = 1.0 - w0 - w1;
                const EPS: f64 = -1e-9;
                if w0 < EPS || w1 < EPS || w2 < EPS {
                    continue;
                }
                let (ca, cb, cc) = (colors[tri[0]], colors[tri[1]], colors[tri[2]]);
                buf[sy * n + sx] = [0, 1, 2].map(|ch| w0 * ca[ch] + w1 * cb[ch] + w2 * cc[ch]);
            }
        }
    }
    let mut out = vec![[0.0; 3]; size * size];
    let inv = 1.0 / (ss * ss) as f64;
    for y in 0..size {
        for x in 0..size {
            let mut acc = [0.0; 3];
            for dy in 0..ss {
                for dx in 0..ss {
                    let v = buf[(y * ss + dy) * n + x * ss + dx];
                    for ch in 0..3 {
                        acc[ch] += v[ch];
                    }
                }
            }
            out[y * size + x] = acc.map(|v| v * inv);
        }
    }
    out
}

/// Renders an identity under a camera; returns the image and its projected keypoints.
pub fn render_face(
    basis: &MorphableBasis,
    identity: &ToyIdentity,
    rigid: &RigidParams,
    illum: f64,
    size: usize,
) -> Result<(FaceImage, LandmarkSet)> {
    if basis.num_vertices() != TOY_VERTICES {
        return Err(Error::Render(format!("renderer needs the {TOY_VERTICES}-vertex toy mesh")));
    }
    if !(illum > 0.0 && illum.is_finite()) {
        return Err(Error::Render(format!("illumination must be positive, got {illum}")));
    }
    let shape = assemble_shape(basis, &identity.coeffs);
    let points = project(&shape, rigid);
    let limit = size as f64 - 1.0;
    if points.iter().any(|v| !(0.0..=limit).contains(v)) {
        return Err(Error::Render("face extends outside the frame".into()));
    }
    let rotated = rigid.rotation() * &shape.vertices;
    let mut depth: Vec<f64> = rotated.row(2).iter().copied().collect();
    with_poles(&mut depth, mean_of);
    let mut xy: Vec<(f64, f64)> = points.column_iter().map(|c| (c[0], c[1])).collect();
    with_poles(&mut xy, |v| (mean_of(&v.iter().map(|p| p.0).collect::<Vec<_>>()), mean_of(&v.iter().map(|p| p.1).collect::<Vec<_>>())));
    let mut colors: Vec<[f64; 3]> = identity.vertex_colors().into_iter().map(|c| c.map(|v| v * illum)).collect();
    with_poles(&mut colors, |v| [0, 1, 2].map(|ch| mean_of(&v.iter().map(|c| c[ch]).collect::<Vec<_>>())));
    let rgb = rasterize(&xy, &depth, &colors, size);
    let img = FaceImage::from_fn(size, size, |y, x, c| rgb[y * size + x][c] as f32);
    let landmarks = sample_keypoints(&points, basis)?;
    Ok((img, landmarks))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (MorphableBasis, ToyIdentity) {
        (MorphableBasis::toy(7), ToyIdentity::from_seed(3))
    }

    #[test]
    fn render_is_deterministic_and_in_frame() {
        let (basis, id) = setup();
        let rigid = RigidParams::from_angles(38.0, 30.0, 3.0, -2.0, [64.0, 64.0]).unwrap();
        let (a, la) = render_face(&basis, &id, &rigid, 1.0, 128).unwrap();
        let (b, lb) = render_face(&basis, &id, &rigid, 1.0, 128).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        let oracle = sample_keypoints(&project(&assemble_shape(&basis, &id.coeffs), &rigid), &basis).unwrap();
        assert!(la.max_abs_diff(&oracle) < 1e-6);
        // the head covers a good part of the frame
        let bg = BACKGROUND[0];
        let covered = a.plane(0).iter().filter(|&&v| (v - bg).abs() > 1e-6).count();
        assert!(covered > 2000, "{covered}");
    }

    #[test]
    fn translation_shifts_content_and_landmarks() {
        let (basis, id) = setup();
        let r0 = RigidParams::from_angles(38.0, 0.0, 0.0, 0.0, [60.0, 62.0]).unwrap();
        let r1 = r0.with_translation([64.0, 65.0]);
        let (a, la) = render_face(&basis, &id, &r0, 1.0, 128).unwrap();
        let (b, lb) = render_face(&basis, &id, &r1, 1.0, 128).unwrap();
        assert!(la.translated(4.0, 3.0).max_abs_diff(&lb) < 1e-9);
        let mut max_err = 0.0f32;
        for y in 10..110 {
            for x in 10..110 {
                for c in 0..3 {
                    max_err = max_err.max((a.get(y, x, c) - b.get(y + 3, x + 4, c)).abs());
                }
            }
        }
        assert!(max_err < 1e-4, "{max_err}");
    }

    #[test]
    fn out_of_frame_face_is_rejected() {
        let (basis, id) = setup();
        let rigid = RigidParams::from_angles(38.0, 0.0, 0.0, 0.0, [5.0, 64.0]).unwrap();
        assert!(matches!(render_face(&basis, &id, &rigid, 1.0, 128), Err(Error::Render(_))));
        let ok = RigidParams::from_angles(38.0, 0.0, 0.0, 0.0, [64.0, 64.0]).unwrap();
        assert!(render_face(&basis, &id, &ok, 0.0, 128).is_err());
    }

    #[test]
    fn identities_look_different() {
        let basis = MorphableBasis::toy(7);
        let rigid = RigidParams::from_angles(38.0, 0.0, 0.0, 0.0, [64.0, 64.0]).unwrap();
        let (a, _) = render_face(&basis, &ToyIdentity::from_seed(1), &rigid, 1.0, 128).unwrap();
        let (b, _) = render_face(&basis, &ToyIdentity::from_seed(2), &rigid, 1.0, 128).unwrap();
        let mse: f64 = a.pixels().iter().zip(b.pixels()).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>()
            / a.pixels().len() as f64;
        assert!(mse > 1e-3, "{mse}");
    }

    #[test]
    fn triangle_list_covers_the_grid() {
        let tris = mesh_triangles();
        assert_eq!(tris.len(), 2 * 16 * 32);
        assert!(tris.iter().flatten().all(|&i| i <= POLE_BOTTOM));
        // every grid edge between neighbouring rings is shared by exactly two triangles
        let mut edges = std::collections::HashMap::new();
        for t in &tris {
            for k in 0..3 {
                let (a, b) = (t[k].min(t[(k + 1) % 3]), t[k].max(t[(k + 1) % 3]));
                *edges.entry((a, b)).or_insert(0) += 1;
            }
        }
        assert!(edges.values().all(|&n| n == 2), "mesh is not closed");
    }
}
