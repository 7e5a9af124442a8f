//! Parameter storage and the layer building blocks shared by every network.

use mdfr_autograd::{Graph, Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{shape_err, Result};

/// Negative slope of every leaky ReLU in the model.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Which network a parameter set belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NetRole {
    Frn,
    Ffn,
    Pcd,
    Icd,
    Embedder,
}

impl NetRole {
    pub fn name(self) -> &'static str {
        match self {
            NetRole::Frn => "frn",
            NetRole::Ffn => "ffn",
            NetRole::Pcd => "pcd",
            NetRole::Icd => "icd",
            NetRole::Embedder => "embedder",
        }
    }
}

/// Named tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self { names: Vec::new(), tensors: Vec::new() }
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, i: usize) -> &Tensor<T> {
        &self.tensors[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet { names: self.names.clone(), tensors: self.tensors.iter().map(Tensor::cast).collect() }
    }

    /// Replaces every tensor, checking names and shapes match.
    pub fn assign(&mut self, other: &ParamSet<T>) -> Result<()> {
        if self.names != other.names {
            return Err(shape_err("parameter names differ"));
        }
        for (name, (a, b)) in self.names.iter().zip(self.tensors.iter().zip(&other.tensors)) {
            if a.shape() != b.shape() {
                return Err(shape_err(format!("{name}: shape {:?} vs {:?}", a.shape(), b.shape())));
            }
        }
        self.tensors.clone_from(&other.tensors);
        Ok(())
    }

    /// True when both sets have the same names and shapes.
    pub fn congruent<U: Scalar>(&self, other: &ParamSet<U>) -> bool {
        self.names == other.names && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.shape() == b.shape())
    }

    /// SHA-256 over names, shapes and the little-endian bytes of every value.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.names.iter().zip(&self.tensors) {
            h.update(name.as_bytes());
            h.update([0u8]);
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Adds every tensor to `g`, differentiable when `trainable`.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.input(t.clone()) })
            .collect();
        Bound { vars }
    }
}

/// Graph handles of a bound [`ParamSet`], indexed like the set.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, i: usize) -> Var {
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Seeded weight initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// He-normal weights for a leaky-ReLU layer with the given fan-in.
    pub fn he<T: Scalar>(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        let std = (2.0 / ((1.0 + LEAKY_SLOPE * LEAKY_SLOPE) * fan_in as f64)).sqrt();
        self.normal(shape, std)
    }

    pub fn normal<T: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let dist = Normal::new(0.0, std).expect("finite std");
        Tensor::from_fn(shape, |_| T::from_f64(dist.sample(&mut self.rng)))
    }
}

/// Square-kernel convolution layer: indices into a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv {
    pub w: usize,
    pub b: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv {
    pub fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        init: &mut Init,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let w = params.push(format!("{name}.weight"), init.he(&[c_out, c_in, kernel, kernel], c_in * kernel * kernel));
        let b = params.push(format!("{name}.bias"), Tensor::zeros(&[c_out]));
        Self { w, b, c_in, c_out, kernel, stride }
    }

    pub fn pad(&self) -> usize {
        self.kernel / 2
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        g.conv2d(x, p.var(self.w), Some(p.var(self.b)), self.stride, self.pad())
    }

    /// Output side length for an input side length.
    pub fn out_size(&self, n: usize) -> usize {
        (n + 2 * self.pad() - self.kernel) / self.stride + 1
    }
}

/// Fully connected layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dense {
    pub w: usize,
    pub b: usize,
    pub d_in: usize,
    pub d_out: usize,
}

impl Dense {
    pub fn new<T: Scalar>(params: &mut ParamSet<T>, init: &mut Init, name: &str, d_in: usize, d_out: usize) -> Self {
        let w = params.push(format!("{name}.weight"), init.normal(&[d_out, d_in], (1.0 / d_in as f64).sqrt()));
        let b = params.push(format!("{name}.bias"), Tensor::zeros(&[d_out]));
        Self { w, b, d_in, d_out }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        g.linear(x, p.var(self.w), Some(p.var(self.b)))
    }
}

/// Checks a `[N, C, H, W]` tensor shape against expectations.
pub fn check_nchw(shape: &[usize], c: usize, h: usize, w: usize, what: &str) -> Result<()> {
    if shape.len() != 4 || shape[1] != c || shape[2] != h || shape[3] != w {
        return Err(shape_err(format!("{what}: expected [N, {c}, {h}, {w}], got {shape:?}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_tracks_values_names_and_shapes() {
        let mut a = ParamSet::<f32>::new();
        a.push("w", Tensor::new(&[2], vec![1.0, 2.0]));
        let base = a.hash();
        assert_eq!(base, a.clone().hash());
        let mut b = a.clone();
        b.tensors_mut()[0].data_mut()[1] = 2.000001;
        assert_ne!(b.hash(), base);
        let mut c = ParamSet::<f32>::new();
        c.push("v", Tensor::new(&[2], vec![1.0, 2.0]));
        assert_ne!(c.hash(), base);
        let mut d = ParamSet::<f32>::new();
        d.push("w", Tensor::new(&[1, 2], vec![1.0, 2.0]));
        assert_ne!(d.hash(), base);
    }

    #[test]
    fn assign_rejects_shape_changes() {
        let mut a = ParamSet::<f64>::new();
        a.push("w", Tensor::zeros(&[2, 2]));
        let mut b = ParamSet::<f64>::new();
        b.push("w", Tensor::zeros(&[4]));
        assert!(a.assign(&b).is_err());
        let mut c = a.clone();
        c.tensors_mut()[0].data_mut()[0] = 3.0;
        a.assign(&c).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn he_init_is_seeded() {
        let t1: Tensor<f32> = Init::new(3).he(&[8, 4, 3, 3], 36);
        let t2: Tensor<f32> = Init::new(3).he(&[8, 4, 3, 3], 36);
        let t3: Tensor<f32> = Init::new(4).he(&[8, 4, 3, 3], 36);
        assert_eq!(t1, t2);
        assert_ne!(t1, t3);
    }

    #[test]
    fn conv_output_size() {
        let mut p = ParamSet::<f32>::new();
        let c = Conv::new(&mut p, &mut Init::new(0), "c", 3, 4, 3, 2);
        assert_eq!(c.out_size(128), 64);
        let c1 = Conv::new(&mut p, &mut Init::new(0), "d", 3, 4, 1, 1);
        assert_eq!(c1.out_size(2), 2);
    }
}
