//! Synthetic low-quality image generation: color warp, blur, gamma,
//! bicubic down/up-sampling and additive Gaussian noise.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image::FaceImage;

pub const COLOR_RANGE: (f64, f64) = (0.1, 0.2);
pub const GAUSSIAN_BLUR_RANGE: (f64, f64) = (0.1, 0.2);
pub const GAMMA_LOW_RANGE: (f64, f64) = (0.1, 0.3);
pub const GAMMA_HIGH_RANGE: (f64, f64) = (1.0, 3.0);
pub const NOISE_RANGE: (f64, f64) = (0.1, 0.5);
pub const BLUR_SIZES: [usize; 3] = [3, 5, 7];
pub const DOWNSAMPLE_FACTORS: [usize; 2] = [2, 4];

// Independent random streams for the two stochastic families.
const COLOR_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlurKind {
    Gaussian,
    /// Flat disk kernel.
    Uniform,
    /// Flat square (box) kernel.
    Average,
}

impl fmt::Display for BlurKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BlurKind::Gaussian => "gaussian",
            BlurKind::Uniform => "uniform",
            BlurKind::Average => "average",
        })
    }
}

impl FromStr for BlurKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(BlurKind::Gaussian),
            "uniform" => Ok(BlurKind::Uniform),
            "average" => Ok(BlurKind::Average),
            other => Err(invalid(format!("unknown blur kind `{other}`"))),
        }
    }
}

/// Which corruption families a spec applies.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActiveFlags {
    pub color: bool,
    pub blur: bool,
    pub gamma: bool,
    pub resample: bool,
    pub noise: bool,
}

impl ActiveFlags {
    pub fn all() -> Self {
        Self { color: true, blur: true, gamma: true, resample: true, noise: true }
    }

    pub fn any(&self) -> bool {
        self.color || self.blur || self.gamma || self.resample || self.noise
    }

    fn names(&self) -> Vec<&'static str> {
        [
            (self.color, "color"),
            (self.blur, "blur"),
            (self.gamma, "gamma"),
            (self.resample, "resample"),
            (self.noise, "noise"),
        ]
        .into_iter()
        .filter_map(|(on, n)| on.then_some(n))
        .collect()
    }
}

/// One sampled corruption configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub color_mean: f64,
    pub color_std: f64,
    pub blur_kind: BlurKind,
    /// Odd kernel side length.
    pub blur_size: usize,
    pub gaussian_blur_mean: f64,
    /// Gaussian kernel σ in pixels.
    pub gaussian_blur_std: f64,
    /// Replaces `gaussian_blur_std` as the kernel σ when set.
    pub blur_sigma_override: Option<f64>,
    pub gamma_low: f64,
    pub gamma_high: f64,
    /// Exponent actually applied, drawn from `[gamma_low, gamma_high]`.
    pub gamma: f64,
    pub downsample_factor: usize,
    pub noise_mean: f64,
    pub noise_std: f64,
    pub active: ActiveFlags,
    pub seed: u64,
}

/// Settings that alter how specs are sampled.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradationOverrides {
    /// Gaussian kernel σ (pixels) used instead of the sampled value.
    pub blur_sigma: Option<f64>,
}

fn in_range(v: f64, (lo, hi): (f64, f64)) -> bool {
    v >= lo && v <= hi
}

impl DegradationSpec {
    /// A spec that leaves every image unchanged even with all families active.
    pub fn identity() -> Self {
        Self {
            color_mean: 0.0,
            color_std: 0.0,
            blur_kind: BlurKind::Average,
            blur_size: 1,
            gaussian_blur_mean: 0.0,
            gaussian_blur_std: 0.0,
            blur_sigma_override: None,
            gamma_low: 1.0,
            gamma_high: 1.0,
            gamma: 1.0,
            downsample_factor: 1,
            noise_mean: 0.0,
            noise_std: 0.0,
            active: ActiveFlags::all(),
            seed: 0,
        }
    }

    /// Kernel σ used for Gaussian blur.
    pub fn blur_sigma(&self) -> f64 {
        self.blur_sigma_override.unwrap_or(self.gaussian_blur_std)
    }

    /// Checks that the spec can be applied: finite values, non-negative
    /// deviations, positive gamma, odd kernel size, factor ≥ 1.
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.color_mean,
            self.color_std,
            self.gaussian_blur_mean,
            self.gaussian_blur_std,
            self.gamma_low,
            self.gamma_high,
            self.gamma,
            self.noise_mean,
            self.noise_std,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(invalid("degradation spec has a non-finite field"));
        }
        if self.color_std < 0.0 || self.noise_std < 0.0 {
            return Err(invalid("negative standard deviation"));
        }
        if self.gamma <= 0.0 {
            return Err(invalid(format!("gamma must be positive, got {}", self.gamma)));
        }
        if self.blur_size.is_multiple_of(2) {
            return Err(invalid(format!("blur kernel size must be odd, got {}", self.blur_size)));
        }
        if self.blur_kind == BlurKind::Gaussian && self.blur_size > 1 && !(self.blur_sigma() > 0.0) {
            return Err(invalid("gaussian blur needs a positive sigma"));
        }
        if self.downsample_factor == 0 {
            return Err(invalid("downsample factor must be at least 1"));
        }
        Ok(())
    }

    /// True when every sampled field lies inside its published range.
    pub fn in_sampling_ranges(&self) -> bool {
        in_range(self.color_mean, COLOR_RANGE)
            && in_range(self.color_std, COLOR_RANGE)
            && in_range(self.gaussian_blur_mean, GAUSSIAN_BLUR_RANGE)
            && in_range(self.gaussian_blur_std, GAUSSIAN_BLUR_RANGE)
            && in_range(self.gamma_low, GAMMA_LOW_RANGE)
            && in_range(self.gamma_high, GAMMA_HIGH_RANGE)
            && self.gamma >= self.gamma_low
            && self.gamma <= self.gamma_high
            && in_range(self.noise_mean, NOISE_RANGE)
            && in_range(self.noise_std, NOISE_RANGE)
            && BLUR_SIZES.contains(&self.blur_size)
            && DOWNSAMPLE_FACTORS.contains(&self.downsample_factor)
            && self.active.any()
    }

    /// Flat `key=value` block, one field per line.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        put("color_mean", format!("{:?}", self.color_mean));
        put("color_std", format!("{:?}", self.color_std));
        put("blur_kind", self.blur_kind.to_string());
        put("blur_size", self.blur_size.to_string());
        put("gaussian_blur_mean", format!("{:?}", self.gaussian_blur_mean));
        put("gaussian_blur_std", format!("{:?}", self.gaussian_blur_std));
        put(
            "blur_sigma_override",
            self.blur_sigma_override.map_or_else(|| "none".to_string(), |v| format!("{v:?}")),
        );
        put("gamma_low", format!("{:?}", self.gamma_low));
        put("gamma_high", format!("{:?}", self.gamma_high));
        put("gamma", format!("{:?}", self.gamma));
        put("downsample_factor", self.downsample_factor.to_string());
        put("noise_mean", format!("{:?}", self.noise_mean));
        put("noise_std", format!("{:?}", self.noise_std));
        put("active", self.active.names().join(","));
        put("seed", self.seed.to_string());
        s
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut spec = Self::identity();
        let mut seen = std::collections::HashSet::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| invalid(format!("expected key=value, got `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            let num = |v: &str| v.parse::<f64>().map_err(|_| invalid(format!("{k}: bad number `{v}`")));
            let int = |v: &str| v.parse::<u64>().map_err(|_| invalid(format!("{k}: bad integer `{v}`")));
            match k {
                "color_mean" => spec.color_mean = num(v)?,
                "color_std" => spec.color_std = num(v)?,
                "blur_kind" => spec.blur_kind = v.parse()?,
                "blur_size" => spec.blur_size = int(v)? as usize,
                "gaussian_blur_mean" => spec.gaussian_blur_mean = num(v)?,
                "gaussian_blur_std" => spec.gaussian_blur_std = num(v)?,
                "blur_sigma_override" => spec.blur_sigma_override = if v == "none" { None } else { Some(num(v)?) },
                "gamma_low" => spec.gamma_low = num(v)?,
                "gamma_high" => spec.gamma_high = num(v)?,
                "gamma" => spec.gamma = num(v)?,
                "downsample_factor" => spec.downsample_factor = int(v)? as usize,
                "noise_mean" => spec.noise_mean = num(v)?,
                "noise_std" => spec.noise_std = num(v)?,
                "active" => {
                    let mut a = ActiveFlags::default();
                    for name in v.split(',').map(str::trim).filter(|n| !n.is_empty()) {
                        match name {
                            "color" => a.color = true,
                            "blur" => a.blur = true,
                            "gamma" => a.gamma = true,
                            "resample" => a.resample = true,
                            "noise" => a.noise = true,
                            other => return Err(invalid(format!("unknown corruption family `{other}`"))),
                        }
                    }
                    spec.active = a;
                }
                "seed" => spec.seed = int(v)?,
                other => return Err(invalid(format!("unknown degradation key `{other}`"))),
            }
            if !seen.insert(k.to_string()) {
                return Err(invalid(format!("degradation key `{k}` repeated")));
            }
        }
        if seen.len() != 15 {
            return Err(invalid(format!("degradation block has {} of 15 keys", seen.len())));
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// Samples a spec with every field in its published range.
pub fn sample_spec(rng_seed: u64) -> DegradationSpec {
    sample_spec_with(rng_seed, &DegradationOverrides::default())
}

pub fn sample_spec_with(rng_seed: u64, overrides: &DegradationOverrides) -> DegradationSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut uni = |(lo, hi): (f64, f64)| rng.random_range(lo..=hi);
    let color_mean = uni(COLOR_RANGE);
    let color_std = uni(COLOR_RANGE);
    let gaussian_blur_mean = uni(GAUSSIAN_BLUR_RANGE);
    let gaussian_blur_std = uni(GAUSSIAN_BLUR_RANGE);
    let gamma_low = uni(GAMMA_LOW_RANGE);
    let gamma_high = uni(GAMMA_HIGH_RANGE);
    let gamma = uni((gamma_low, gamma_high));
    let noise_mean = uni(NOISE_RANGE);
    let noise_std = uni(NOISE_RANGE);
    let blur_kind = [BlurKind::Gaussian, BlurKind::Uniform, BlurKind::Average][rng.random_range(0..3)];
    let blur_size = BLUR_SIZES[rng.random_range(0..BLUR_SIZES.len())];
    let downsample_factor = DOWNSAMPLE_FACTORS[rng.random_range(0..DOWNSAMPLE_FACTORS.len())];
    let active = loop {
        let a = ActiveFlags {
            color: rng.random_bool(0.5),
            blur: rng.random_bool(0.5),
            gamma: rng.random_bool(0.5),
            resample: rng.random_bool(0.5),
            noise: rng.random_bool(0.5),
        };
        if a.any() {
            break a;
        }
    };
    DegradationSpec {
        color_mean,
        color_std,
        blur_kind,
        blur_size,
        gaussian_blur_mean,
        gaussian_blur_std,
        blur_sigma_override: overrides.blur_sigma,
        gamma_low,
        gamma_high,
        gamma,
        downsample_factor,
        noise_mean,
        noise_std,
        active,
        seed: rng_seed,
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn normal(mean: f64, std: f64) -> Result<Normal<f64>> {
    Normal::new(mean, std).map_err(|e| invalid(format!("normal({mean}, {std}): {e}")))
}

/// Per-channel shifts used by [`color_warp`], before clipping.
pub fn color_shifts(mean: f64, std: f64, seed: u64) -> Result<[f64; 3]> {
    let dist = normal(mean, std)?;
    let mut rng = stream_rng(seed, COLOR_STREAM);
    Ok([dist.sample(&mut rng), dist.sample(&mut rng), dist.sample(&mut rng)])
}

/// Adds one random shift per channel and clips to `[0, 1]`.
pub fn color_warp(img: &FaceImage, mean: f64, std: f64, seed: u64) -> Result<FaceImage> {
    let shifts = color_shifts(mean, std, seed)?;
    let (h, w) = img.dims();
    let n = h * w;
    let px: Vec<f32> = img
        .pixels()
        .iter()
        .enumerate()
        .map(|(i, &v)| (v as f64 + shifts[i / n]).clamp(0.0, 1.0) as f32)
        .collect();
    FaceImage::from_planar(h, w, px)
}

/// Per-pixel noise values used by [`add_gaussian_noise`], before clipping.
pub fn noise_field(len: usize, mean: f64, std: f64, seed: u64) -> Result<Vec<f64>> {
    let dist = normal(mean, std)?;
    let mut rng = stream_rng(seed, NOISE_STREAM);
    Ok((0..len).map(|_| dist.sample(&mut rng)).collect())
}

pub fn add_gaussian_noise(img: &FaceImage, mean: f64, std: f64, seed: u64) -> Result<FaceImage> {
    if !(std >= 0.0) {
        return Err(invalid(format!("noise std must be non-negative, got {std}")));
    }
    let noise = noise_field(img.pixels().len(), mean, std, seed)?;
    let px = img.pixels().iter().zip(&noise).map(|(&v, &n)| (v as f64 + n).clamp(0.0, 1.0) as f32).collect();
    FaceImage::from_planar(img.height(), img.width(), px)
}

pub fn gamma_adjust(img: &FaceImage, gamma: f64) -> Result<FaceImage> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(invalid(format!("gamma must be positive, got {gamma}")));
    }
    if gamma == 1.0 {
        return Ok(img.clone());
    }
    Ok(img.map(|v| (v as f64).powf(gamma) as f32))
}

/// Normalized `size × size` kernel, row-major.
pub fn blur_kernel(kind: BlurKind, size: usize, sigma: f64) -> Result<Vec<f64>> {
    if size.is_multiple_of(2) {
        return Err(invalid(format!("blur kernel size must be odd, got {size}")));
    }
    let r = (size / 2) as f64;
    let mut k = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            let (dy, dx) = (i as f64 - r, j as f64 - r);
            k.push(match kind {
                BlurKind::Average => 1.0,
                BlurKind::Uniform => {
                    if dx * dx + dy * dy <= r * r {
                        1.0
                    } else {
                        0.0
                    }
                }
                BlurKind::Gaussian => {
                    if size == 1 {
                        1.0
                    } else if !(sigma > 0.0 && sigma.is_finite()) {
                        return Err(invalid(format!("gaussian sigma must be positive, got {sigma}")));
                    } else {
                        (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
                    }
                }
            });
        }
    }
    let total: f64 = k.iter().sum();
    Ok(k.into_iter().map(|v| v / total).collect())
}

/// Mirror index without repeating the edge sample (`-1 → 1`).
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m >= n as isize { period - m } else { m }) as usize
}

/// Convolves one plane with a square kernel under reflect padding.
pub fn convolve_plane(plane: &[f64], height: usize, width: usize, kernel: &[f64], size: usize) -> Vec<f64> {
    let r = (size / 2) as isize;
    let mut out = vec![0.0; height * width];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for i in 0..size {
                let sy = reflect(y as isize + i as isize - r, height);
                for j in 0..size {
                    let sx = reflect(x as isize + j as isize - r, width);
                    acc += kernel[i * size + j] * plane[sy * width + sx];
                }
            }
            out[y * width + x] = acc;
        }
    }
    out
}

pub fn blur(img: &FaceImage, kind: BlurKind, size: usize, sigma: f64) -> Result<FaceImage> {
    let kernel = blur_kernel(kind, size, sigma)?;
    if size == 1 {
        return Ok(img.clone());
    }
    let (h, w) = img.dims();
    let mut px = Vec::with_capacity(img.pixels().len());
    for c in 0..FaceImage::CHANNELS {
        let plane: Vec<f64> = img.plane(c).iter().map(|&v| v as f64).collect();
        px.extend(convolve_plane(&plane, h, w, &kernel, size).into_iter().map(|v| v.clamp(0.0, 1.0) as f32));
    }
    FaceImage::from_planar(h, w, px)
}

/// Catmull-Rom cubic convolution weight (`a = -0.5`).
pub fn cubic_weight(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// For each output sample, four `(source index, weight)` taps with
/// half-pixel-centre alignment and clamped edges.
fn resample_taps(n_in: usize, n_out: usize) -> Vec<[(usize, f64); 4]> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let base = src.floor();
            let frac = src - base;
            let mut taps = [(0usize, 0.0); 4];
            for (k, tap) in taps.iter_mut().enumerate() {
                let idx = (base as isize + k as isize - 1).clamp(0, n_in as isize - 1) as usize;
                *tap = (idx, cubic_weight(frac - (k as f64 - 1.0)));
            }
            taps
        })
        .collect()
}

/// Separable bicubic resampling of one plane.
pub fn resample_plane(plane: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let cols = resample_taps(w, out_w);
    let rows = resample_taps(h, out_h);
    let mut tmp = vec![0.0; h * out_w];
    for y in 0..h {
        for (x, taps) in cols.iter().enumerate() {
            tmp[y * out_w + x] = taps.iter().map(|&(i, wt)| wt * plane[y * w + i]).sum();
        }
    }
    let mut out = vec![0.0; out_h * out_w];
    for (y, taps) in rows.iter().enumerate() {
        for x in 0..out_w {
            out[y * out_w + x] = taps.iter().map(|&(i, wt)| wt * tmp[i * out_w + x]).sum();
        }
    }
    out
}

fn resample(img: &FaceImage, out_h: usize, out_w: usize) -> Result<FaceImage> {
    if out_h == 0 || out_w == 0 {
        return Err(invalid("resample target must be non-empty"));
    }
    let (h, w) = img.dims();
    if (h, w) == (out_h, out_w) {
        return Ok(img.clone());
    }
    let mut px = Vec::with_capacity(3 * out_h * out_w);
    for c in 0..FaceImage::CHANNELS {
        let plane: Vec<f64> = img.plane(c).iter().map(|&v| v as f64).collect();
        px.extend(resample_plane(&plane, h, w, out_h, out_w).into_iter().map(|v| v.clamp(0.0, 1.0) as f32));
    }
    FaceImage::from_planar(out_h, out_w, px)
}

pub fn downsample_bicubic(img: &FaceImage, factor: usize) -> Result<FaceImage> {
    let (h, w) = img.dims();
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(invalid(format!("downsample factor {factor} does not divide {h}×{w}")));
    }
    resample(img, h / factor, w / factor)
}

pub fn upsample_bicubic(img: &FaceImage, height: usize, width: usize) -> Result<FaceImage> {
    resample(img, height, width)
}

/// Applies the active families in the order color, blur, gamma,
/// down/up-sampling, noise. A pure function of `(img, spec)`.
pub fn degrade(img: &FaceImage, spec: &DegradationSpec) -> Result<FaceImage> {
    spec.validate()?;
    let (h, w) = img.dims();
    let mut out = img.clone();
    if spec.active.color {
        out = color_warp(&out, spec.color_mean, spec.color_std, spec.seed)?;
    }
    if spec.active.blur {
        out = blur(&out, spec.blur_kind, spec.blur_size, spec.blur_sigma())?;
    }
    if spec.active.gamma {
        out = gamma_adjust(&out, spec.gamma)?;
    }
    if spec.active.resample && spec.downsample_factor > 1 {
        out = upsample_bicubic(&downsample_bicubic(&out, spec.downsample_factor)?, h, w)?;
    }
    if spec.active.noise {
        out = add_gaussian_noise(&out, spec.noise_mean, spec.noise_std, spec.seed)?;
    }
    Ok(out)
}
