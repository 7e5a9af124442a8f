//! Conditioned real/fake critics and the frozen identity embedder.
//!
//! Critics see the channel concatenation `[condition, image]` at input
//! resolution: pose critics take the 18 target heatmaps, identity critics take
//! the embedder's last convolutional map resized to the image size.

use mdfr_autograd::{Graph, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::degradation::resample_plane;
use crate::error::{invalid, shape_err, Result};
use crate::generator::{heatmap_tensor, FeatureTensor};
use crate::geometry::{HeatmapStack, NUM_KEYPOINTS};
use crate::image::FaceImage;
use crate::nn::{check_nchw, Bound, Conv, Dense, Init, NetRole, ParamSet, LEAKY_SLOPE};

/// Critic logits are clipped to this magnitude before the logistic head.
pub const LOGIT_CLIP: f64 = 20.0;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CriticConfig {
    pub image_size: usize,
    pub cond_channels: usize,
    /// Width of each stage; the first conv of every stage halves the resolution.
    pub widths: Vec<usize>,
    pub convs_per_stage: Vec<usize>,
}

impl CriticConfig {
    /// VGG-11 layout: five stages with 1, 1, 2, 2, 2 convolutions.
    pub fn vgg11(image_size: usize, cond_channels: usize, widths: &[usize]) -> Self {
        Self { image_size, cond_channels, widths: widths.to_vec(), convs_per_stage: vec![1, 1, 2, 2, 2] }
    }

    pub fn pose(image_size: usize) -> Self {
        Self::vgg11(image_size, NUM_KEYPOINTS, &[64, 128, 256, 512, 512])
    }

    pub fn identity(image_size: usize, map_channels: usize) -> Self {
        Self::vgg11(image_size, map_channels, &[64, 128, 256, 512, 512])
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.len() != self.convs_per_stage.len() {
            return Err(invalid("critic needs one conv count per stage"));
        }
        if self.widths.contains(&0) || self.convs_per_stage.contains(&0) || self.cond_channels == 0 {
            return Err(invalid("critic widths, conv counts and condition channels must be positive"));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(1 << self.widths.len()) {
            return Err(invalid(format!(
                "image size {} is not divisible by 2^{}",
                self.image_size,
                self.widths.len()
            )));
        }
        Ok(())
    }

    pub fn output_size(&self) -> usize {
        self.image_size >> self.widths.len()
    }
}

#[derive(Clone, Debug)]
pub struct Critic<T: Scalar> {
    role: NetRole,
    config: CriticConfig,
    params: ParamSet<T>,
    convs: Vec<Conv>,
    head: Dense,
}

impl<T: Scalar> Critic<T> {
    pub fn new(role: NetRole, config: CriticConfig, seed: u64) -> Result<Self> {
        if !matches!(role, NetRole::Pcd | NetRole::Icd) {
            return Err(invalid(format!("{} is not a critic role", role.name())));
        }
        config.validate()?;
        let mut params = ParamSet::new();
        let mut init = Init::new(seed);
        let mut convs = Vec::new();
        let mut c_prev = config.cond_channels + 3;
        for (s, (&w, &n)) in config.widths.iter().zip(&config.convs_per_stage).enumerate() {
            for i in 0..n {
                let stride = if i == 0 { 2 } else { 1 };
                convs.push(Conv::new(&mut params, &mut init, &format!("stage{s}.conv{i}"), c_prev, w, 3, stride));
                c_prev = w;
            }
        }
        let s = config.output_size();
        let head = Dense::new(&mut params, &mut init, "head", c_prev * s * s, 1);
        Ok(Self { role, config, params, convs, head })
    }

    pub fn role(&self) -> NetRole {
        self.role
    }

    pub fn config(&self) -> &CriticConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn cast<U: Scalar>(&self) -> Critic<U> {
        Critic {
            role: self.role,
            config: self.config.clone(),
            params: self.params.cast(),
            convs: self.convs.clone(),
            head: self.head,
        }
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        self.params.bind(g, trainable)
    }

    /// Clipped logits `[N, 1]` for images `[N, 3, S, S]` under conditions `[N, C, S, S]`.
    pub fn logits_graph(&self, g: &mut Graph<T>, p: &Bound, img: Var, cond: Var) -> Var {
        let mut h = g.concat(&[cond, img]);
        for conv in &self.convs {
            h = conv.forward(g, p, h);
            h = g.leaky_relu(h, LEAKY_SLOPE);
        }
        let n = g.shape(h)[0];
        let flat = g.reshape(h, &[n, self.head.d_in]);
        let z = self.head.forward(g, p, flat);
        g.clamp(z, -LOGIT_CLIP, LOGIT_CLIP)
    }

    /// Checks batch tensors against this critic's input contract.
    pub fn check_inputs(&self, img: &[usize], cond: &[usize]) -> Result<()> {
        let s = self.config.image_size;
        check_nchw(img, 3, s, s, "critic image")?;
        check_nchw(cond, self.config.cond_channels, s, s, "critic condition")?;
        if img[0] != cond[0] {
            return Err(shape_err("critic image and condition batch sizes differ"));
        }
        Ok(())
    }

    /// Probabilities in (0, 1) for a batch.
    pub fn scores(&self, img: &Tensor<T>, cond: &Tensor<T>) -> Result<Vec<f64>> {
        self.check_inputs(img.shape(), cond.shape())?;
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let x = g.input(img.clone());
        let c = g.input(cond.clone());
        let z = self.logits_graph(&mut g, &p, x, c);
        let s = g.sigmoid(z);
        Ok(g.value(s).data().iter().map(|v| v.as_f64()).collect())
    }

    /// Pose critic score for one image and its target heatmaps.
    pub fn pcd_score(&self, img: &FaceImage, lt: &HeatmapStack) -> Result<f64> {
        if self.role != NetRole::Pcd {
            return Err(invalid("pose score requested from a non-pose critic"));
        }
        Ok(self.scores(&FaceImage::batch(&[img])?, &heatmap_tensor(&[lt])?)?[0])
    }

    /// Identity critic score for one image and its target identity map.
    pub fn icd_score(&self, img: &FaceImage, pt: &FeatureTensor<T>) -> Result<f64> {
        if self.role != NetRole::Icd {
            return Err(invalid("identity score requested from a non-identity critic"));
        }
        let (c, h, w) = match pt.values.shape() {
            &[c, h, w] => (c, h, w),
            other => return Err(shape_err(format!("identity map must be [C, H, W], got {other:?}"))),
        };
        let cond = pt.values.clone().reshape(&[1, c, h, w]);
        Ok(self.scores(&FaceImage::batch(&[img])?, &cond)?[0])
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedderConfig {
    pub image_size: usize,
    /// Width of each stride-2 block.
    pub widths: Vec<usize>,
    pub dim: usize,
    pub n_classes: usize,
}

impl EmbedderConfig {
    pub fn new(image_size: usize, n_classes: usize) -> Self {
        Self { image_size, widths: vec![8, 16, 32, 64], dim: 128, n_classes }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) || self.dim == 0 || self.n_classes == 0 {
            return Err(invalid("embedder widths, dimension and class count must be positive"));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(1 << self.widths.len()) {
            return Err(invalid(format!("image size {} is not divisible by 2^{}", self.image_size, self.widths.len())));
        }
        Ok(())
    }

    /// Channels of the identity map.
    pub fn map_channels(&self) -> usize {
        *self.widths.last().unwrap_or(&0)
    }

    pub fn map_size(&self) -> usize {
        self.image_size >> self.widths.len()
    }
}

/// Scale applied to unit embeddings before the classifier.
const CLASSIFIER_SCALE: f64 = 16.0;

#[derive(Clone, Debug)]
pub struct Embedder<T: Scalar> {
    config: EmbedderConfig,
    params: ParamSet<T>,
    convs: Vec<Conv>,
    embed: Dense,
    classifier: Dense,
}

impl<T: Scalar> Embedder<T> {
    pub fn new(config: EmbedderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut init = Init::new(seed);
        let mut convs = Vec::new();
        let mut c_prev = 3;
        for (i, &w) in config.widths.iter().enumerate() {
            convs.push(Conv::new(&mut params, &mut init, &format!("block{i}.conv"), c_prev, w, 3, 2));
            c_prev = w;
        }
        let embed = Dense::new(&mut params, &mut init, "embed", c_prev, config.dim);
        let classifier = Dense::new(&mut params, &mut init, "classifier", config.dim, config.n_classes);
        Ok(Self { config, params, convs, embed, classifier })
    }

    pub fn role(&self) -> NetRole {
        NetRole::Embedder
    }

    pub fn config(&self) -> &EmbedderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn cast<U: Scalar>(&self) -> Embedder<U> {
        Embedder {
            config: self.config.clone(),
            params: self.params.cast(),
            convs: self.convs.clone(),
            embed: self.embed,
            classifier: self.classifier,
        }
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        self.params.bind(g, trainable)
    }

    /// Last convolutional map `[N, C, s, s]`.
    pub fn map_graph(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        let mut h = x;
        for conv in &self.convs {
            h = conv.forward(g, p, h);
            h = g.leaky_relu(h, LEAKY_SLOPE);
        }
        h
    }

    /// Raw embeddings `[N, dim]`.
    pub fn embed_graph(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        let m = self.map_graph(g, p, x);
        let pooled = g.global_avg_pool(m);
        self.embed.forward(g, p, pooled)
    }

    /// Class logits `[N, n_classes]` from unit embeddings.
    pub fn logits_graph(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        let e = self.embed_graph(g, p, x);
        let u = g.l2_normalize_rows(e);
        let u = g.scale(u, CLASSIFIER_SCALE);
        self.classifier.forward(g, p, u)
    }

    fn check_batch(&self, shape: &[usize]) -> Result<()> {
        let s = self.config.image_size;
        check_nchw(shape, 3, s, s, "embedder input")
    }

    /// Raw embeddings of a batch `[N, 3, S, S]`, one row per image.
    pub fn embed_batch(&self, imgs: &Tensor<T>) -> Result<Vec<Vec<f64>>> {
        self.check_batch(imgs.shape())?;
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let x = g.input(imgs.clone());
        let e = self.embed_graph(&mut g, &p, x);
        let d = self.config.dim;
        Ok(g.value(e).data().chunks(d).map(|r| r.iter().map(|v| v.as_f64()).collect()).collect())
    }

    /// Embeddings of many images, evaluated in chunks.
    pub fn embed_images(&self, imgs: &[&FaceImage]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(imgs.len());
        for chunk in imgs.chunks(16) {
            out.extend(self.embed_batch(&FaceImage::batch(chunk)?)?);
        }
        Ok(out)
    }

    pub fn identity_embed(&self, img: &FaceImage) -> Result<Vec<f64>> {
        Ok(self.embed_images(&[img])?.remove(0))
    }

    /// Predicted class per image.
    pub fn classify(&self, imgs: &Tensor<T>) -> Result<Vec<usize>> {
        self.check_batch(imgs.shape())?;
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let x = g.input(imgs.clone());
        let z = self.logits_graph(&mut g, &p, x);
        let k = self.config.n_classes;
        Ok(g.value(z)
            .data()
            .chunks(k)
            .map(|r| (0..k).max_by(|&a, &b| r[a].as_f64().total_cmp(&r[b].as_f64())).unwrap_or(0))
            .collect())
    }

    /// Unresized last-stage maps `[N, C, s, s]`.
    pub fn raw_maps(&self, imgs: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_batch(imgs.shape())?;
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let x = g.input(imgs.clone());
        let m = self.map_graph(&mut g, &p, x);
        Ok(g.value(m).clone())
    }

    /// Identity maps resized to the image size, `[N, C, S, S]`.
    pub fn identity_maps(&self, imgs: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(resize_maps(&self.raw_maps(imgs)?, self.config.image_size))
    }

    /// Identity feature map of one image at image resolution.
    pub fn identity_map(&self, img: &FaceImage) -> Result<FeatureTensor<T>> {
        let maps = self.identity_maps(&FaceImage::batch(&[img])?)?;
        Ok(FeatureTensor { values: maps.index_first(0), role: NetRole::Embedder, block: "map".into() })
    }
}

/// Bicubic resize of every plane of `[N, C, h, w]` to `size × size`.
pub fn resize_maps<T: Scalar>(maps: &Tensor<T>, size: usize) -> Tensor<T> {
    let (n, c, h, w) = maps.dims4();
    let mut out = Vec::with_capacity(n * c * size * size);
    for plane in maps.data().chunks(h * w) {
        let src: Vec<f64> = plane.iter().map(|v| v.as_f64()).collect();
        out.extend(resample_plane(&src, h, w, size, size).into_iter().map(T::from_f64));
    }
    Tensor::new(&[n, c, size, size], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degradation::cubic_weight;
    use crate::geometry::{encode_heatmaps, LandmarkSet};

    fn small_critic(role: NetRole, cond: usize) -> Critic<f64> {
        Critic::new(role, CriticConfig::vgg11(32, cond, &[4, 4, 8, 8, 8]), 5).unwrap()
    }

    fn ramp_image(size: usize, k: f32) -> FaceImage {
        FaceImage::from_fn(size, size, |y, x, c| ((x + 2 * y + c) as f32 * k).sin() * 0.5 + 0.5)
    }

    fn landmarks(shift: f64) -> LandmarkSet {
        LandmarkSet::new((0..NUM_KEYPOINTS).map(|i| [8.0 + i as f64 + shift, 10.0 + 0.5 * i as f64]).collect())
            .unwrap()
    }

    #[test]
    fn critic_scores_are_open_unit_interval_and_deterministic() {
        let critic = small_critic(NetRole::Pcd, NUM_KEYPOINTS);
        let hm = encode_heatmaps(&landmarks(0.0), 32, 32, 2.0).unwrap();
        let img = ramp_image(32, 0.3);
        let a = critic.pcd_score(&img, &hm).unwrap();
        let b = critic.pcd_score(&img, &hm).unwrap();
        assert_eq!(a, b);
        assert!(a > 0.0 && a < 1.0);
    }

    #[test]
    fn huge_logits_are_clipped() {
        let mut critic = small_critic(NetRole::Pcd, NUM_KEYPOINTS);
        let head_b = critic.params().index_of("head.bias").unwrap();
        critic.params_mut().tensors_mut()[head_b].data_mut()[0] = 1e6;
        let hm = encode_heatmaps(&landmarks(0.0), 32, 32, 2.0).unwrap();
        let s = critic.pcd_score(&ramp_image(32, 0.3), &hm).unwrap();
        assert!(s < 1.0);
        assert!((s - 1.0 / (1.0 + (-LOGIT_CLIP).exp())).abs() < 1e-15);
    }

    #[test]
    fn pose_condition_receives_gradient() {
        let critic = small_critic(NetRole::Pcd, NUM_KEYPOINTS);
        let hm = heatmap_tensor::<f64>(&[&encode_heatmaps(&landmarks(0.0), 32, 32, 2.0).unwrap()]).unwrap();
        let mut g = Graph::new();
        let p = critic.bind(&mut g, false);
        let x = g.input(FaceImage::batch(&[&ramp_image(32, 0.3)]).unwrap());
        let c = g.param(hm);
        let z = critic.logits_graph(&mut g, &p, x, c);
        let s = g.sigmoid(z);
        let s = g.sum(s);
        let grads = g.backward(s);
        let gc = grads.get(c).unwrap();
        assert!(gc.data().iter().any(|v| v.abs() > 0.0));
        let other = encode_heatmaps(&landmarks(3.0), 32, 32, 2.0).unwrap();
        let a = critic.pcd_score(&ramp_image(32, 0.3), &encode_heatmaps(&landmarks(0.0), 32, 32, 2.0).unwrap());
        let b = critic.pcd_score(&ramp_image(32, 0.3), &other);
        assert_ne!(a.unwrap(), b.unwrap());
    }

    #[test]
    fn role_mismatch_is_rejected() {
        assert!(Critic::<f32>::new(NetRole::Frn, CriticConfig::pose(32), 0).is_err());
        let icd = small_critic(NetRole::Icd, 4);
        let hm = encode_heatmaps(&landmarks(0.0), 32, 32, 2.0).unwrap();
        assert!(icd.pcd_score(&ramp_image(32, 0.1), &hm).is_err());
        let bad = CriticConfig::vgg11(48, 3, &[4, 4, 4, 4, 4]);
        assert!(bad.validate().is_err());
    }

    fn tiny_embedder() -> Embedder<f64> {
        Embedder::new(EmbedderConfig { image_size: 32, widths: vec![4, 6, 8], dim: 16, n_classes: 3 }, 9).unwrap()
    }

    #[test]
    fn embedder_is_deterministic_and_finite_on_zero_input() {
        let e = tiny_embedder();
        let img = ramp_image(32, 0.2);
        assert_eq!(e.identity_embed(&img).unwrap(), e.identity_embed(&img).unwrap());
        let z = e.identity_embed(&FaceImage::zeros(32, 32)).unwrap();
        assert_eq!(z.len(), 16);
        assert!(z.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn identity_map_matches_reference_bicubic() {
        let e = tiny_embedder();
        let img = ramp_image(32, 0.25);
        let raw = e.raw_maps(&FaceImage::batch(&[&img]).unwrap()).unwrap();
        let map = e.identity_map(&img).unwrap();
        assert_eq!(map.values.shape(), &[8, 32, 32]);
        let (h, w) = (4usize, 4usize);
        // direct 2D Catmull-Rom with half-pixel centres and edge clamping
        let oracle = |plane: &[f64], oy: usize, ox: usize| {
            let sy = (oy as f64 + 0.5) * h as f64 / 32.0 - 0.5;
            let sx = (ox as f64 + 0.5) * w as f64 / 32.0 - 0.5;
            let (fy, fx) = (sy.floor(), sx.floor());
            let mut acc = 0.0;
            for dy in -1..=2 {
                for dx in -1..=2 {
                    let yy = (fy as i64 + dy).clamp(0, h as i64 - 1) as usize;
                    let xx = (fx as i64 + dx).clamp(0, w as i64 - 1) as usize;
                    acc += cubic_weight(sy - (fy + dy as f64)) * cubic_weight(sx - (fx + dx as f64)) * plane[yy * w + xx];
                }
            }
            acc
        };
        for c in 0..8 {
            let plane = &raw.data()[c * 16..(c + 1) * 16];
            for (oy, ox) in [(0, 0), (5, 17), (31, 31), (16, 3)] {
                let got = map.values.data()[c * 1024 + oy * 32 + ox];
                assert!((got - oracle(plane, oy, ox)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn icd_accepts_identity_maps() {
        let e = tiny_embedder();
        let icd = small_critic(NetRole::Icd, 8);
        let img = ramp_image(32, 0.2);
        let s = icd.icd_score(&img, &e.identity_map(&img).unwrap()).unwrap();
        assert!(s > 0.0 && s < 1.0);
    }
}
