//! Training objectives.
//!
//! Squared norms over images and feature maps are means over elements. The
//! identity loss is the squared distance of unit embeddings, `2 - 2 cos`,
//! averaged over the batch. Adversarial terms are written with critic logits
//! `z`, using `ln D = log_sigmoid(z)` and `ln(1 - D) = log_sigmoid(-z)`.
//!
//! Every loss exists twice: a graph builder used in training and a plain
//! `f64` function used for reporting and as a reference.

use mdfr_autograd::{Graph, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Identity term of restoration.
    pub lambda1: f64,
    /// Identity term of frontalization.
    pub lambda2: f64,
    /// Adversarial terms of frontalization.
    pub lambda3: f64,
    /// Identity term of task-integrated training.
    pub lambda4: f64,
    /// Feature alignment term of task-integrated training.
    pub lambda5: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 1e4, lambda2: 1e4, lambda3: 1e4, lambda4: 0.1, lambda5: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lambda4", self.lambda4),
            ("lambda5", self.lambda5),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(invalid(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Generator side of the adversarial game.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvForm {
    /// Minimize `ln(1 - D(fake))`.
    #[default]
    MinMax,
    /// Minimize `-ln D(fake)`.
    NonSaturating,
}

fn check_same(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a != b {
        return Err(shape_err(format!("{what}: {a:?} vs {b:?}")));
    }
    Ok(())
}

// ---- reference implementations ----

/// Mean squared difference over all entries.
pub fn loss_pixel(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    check_same(a.shape(), b.shape(), "pixel loss")?;
    if a.numel() == 0 {
        return Err(invalid("pixel loss of empty tensors"));
    }
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.numel() as f64)
}

fn unit(v: &[f64]) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 0.0 && n.is_finite()) {
        return Err(Error::Degenerate("embedding has zero or non-finite norm".into()));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Squared distance between unit-normalized embeddings.
pub fn loss_id(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(shape_err(format!("embedding lengths {} vs {}", x.len(), y.len())));
    }
    let (ux, uy) = (unit(x)?, unit(y)?);
    Ok(ux.iter().zip(&uy).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// Batch mean of [`loss_id`] over rows.
pub fn loss_id_batch(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<f64> {
    if x.len() != y.len() || x.is_empty() {
        return Err(shape_err("embedding batches must be non-empty and of equal length"));
    }
    let mut total = 0.0;
    for (a, b) in x.iter().zip(y) {
        total += loss_id(a, b)?;
    }
    Ok(total / x.len() as f64)
}

/// Discriminator objective `ln D(real) + ln(1 - D(fake))`, to be maximized.
pub fn adv_objective(score_real: f64, score_fake: f64) -> f64 {
    score_real.ln() + (1.0 - score_fake).ln()
}

/// Discriminator loss for minimization: the negated objective.
pub fn loss_adv_d(score_real: f64, score_fake: f64) -> f64 {
    -adv_objective(score_real, score_fake)
}

/// Generator adversarial term.
pub fn loss_adv_g(score_fake: f64, form: AdvForm) -> f64 {
    match form {
        AdvForm::MinMax => (1.0 - score_fake).ln(),
        AdvForm::NonSaturating => -score_fake.ln(),
    }
}

/// Restoration objective `L_r + λ₁ L_id`.
pub fn loss_frn(pixel: f64, id: f64, w: &LossWeights) -> f64 {
    pixel + w.lambda1 * id
}

/// Frontalization objective `L_f + λ₂ L_id + λ₃ (L_pcd + L_icd)`.
pub fn loss_ffn(pixel: f64, id: f64, adv_pcd: f64, adv_icd: f64, w: &LossWeights) -> f64 {
    pixel + w.lambda2 * id + w.lambda3 * (adv_pcd + adv_icd)
}

/// Feature alignment: mean over maps of the per-map mean squared difference.
///
/// With equal map sizes this is the mean over all elements.
pub fn loss_fa(teacher: &Tensor<f64>, student: &Tensor<f64>) -> Result<f64> {
    check_same(teacher.shape(), student.shape(), "feature alignment")?;
    let shape = teacher.shape();
    if shape.len() < 2 || teacher.numel() == 0 {
        return Err(shape_err(format!("feature maps need a [.., C, h, w] layout, got {shape:?}")));
    }
    let per_map = shape[shape.len() - 2..].iter().product::<usize>().max(1);
    let maps = teacher.numel() / per_map;
    let mut total = 0.0;
    for (a, b) in teacher.data().chunks(per_map).zip(student.data().chunks(per_map)) {
        total += a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / per_map as f64;
    }
    Ok(total / maps as f64)
}

/// Task-integrated objective `L_r + λ₄ L_id + λ₅ L_FA`.
pub fn loss_ti(pixel: f64, id: f64, fa: f64, w: &LossWeights) -> f64 {
    pixel + w.lambda4 * id + w.lambda5 * fa
}

// ---- graph builders ----

/// Mean squared difference of two same-shaped nodes.
pub fn pixel_graph<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Var {
    let d = g.sub(a, b);
    let sq = g.square(d);
    g.mean(sq)
}

/// Batch mean of the unit-embedding squared distance for `[N, d]` rows.
pub fn id_graph<T: Scalar>(g: &mut Graph<T>, x: Var, y: Var) -> Var {
    let n = g.shape(x)[0];
    let ux = g.l2_normalize_rows(x);
    let uy = g.l2_normalize_rows(y);
    let d = g.sub(ux, uy);
    let sq = g.square(d);
    let s = g.sum(sq);
    g.scale(s, 1.0 / n as f64)
}

/// Feature alignment on equal-shaped maps: the global element mean.
pub fn fa_graph<T: Scalar>(g: &mut Graph<T>, teacher: Var, student: Var) -> Var {
    pixel_graph(g, teacher, student)
}

/// Batch-mean discriminator loss `-[ln D(real) + ln(1 - D(fake))]` from logits.
pub fn adv_d_graph<T: Scalar>(g: &mut Graph<T>, logit_real: Var, logit_fake: Var) -> Var {
    let lr = g.log_sigmoid(logit_real);
    let neg_fake = g.neg(logit_fake);
    let lf = g.log_sigmoid(neg_fake);
    let a = g.mean(lr);
    let b = g.mean(lf);
    let s = g.add(a, b);
    g.neg(s)
}

/// Batch-mean generator adversarial term from fake logits.
pub fn adv_g_graph<T: Scalar>(g: &mut Graph<T>, logit_fake: Var, form: AdvForm) -> Var {
    match form {
        AdvForm::MinMax => {
            let neg = g.neg(logit_fake);
            let l = g.log_sigmoid(neg);
            g.mean(l)
        }
        AdvForm::NonSaturating => {
            let l = g.log_sigmoid(logit_fake);
            let m = g.mean(l);
            g.neg(m)
        }
    }
}

/// `a + λ b` with the term skipped when `λ = 0`.
pub fn weighted_sum<T: Scalar>(g: &mut Graph<T>, base: Var, terms: &[(f64, Var)]) -> Var {
    let mut acc = base;
    for &(lambda, v) in terms {
        if lambda != 0.0 {
            let t = g.scale(v, lambda);
            acc = g.add(acc, t);
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn pixel_identities() {
        let z = Tensor::<f64>::zeros(&[2, 2, 1]);
        let mut one = z.clone();
        one.data_mut()[0] = 1.0;
        assert_eq!(loss_pixel(&z, &z).unwrap(), 0.0);
        assert_eq!(loss_pixel(&z, &one).unwrap(), 0.25);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&mut rng, &[3, 4, 5]);
        let b = rand_tensor(&mut rng, &[3, 4, 5]);
        assert_eq!(loss_pixel(&a, &b).unwrap(), loss_pixel(&b, &a).unwrap());
        let c = 3.0;
        let lhs = loss_pixel(&a.map(|v| c * v), &Tensor::zeros(&[3, 4, 5])).unwrap();
        let rhs = c * c * loss_pixel(&a, &Tensor::zeros(&[3, 4, 5])).unwrap();
        assert!((lhs - rhs).abs() <= 1e-15 * rhs);
        assert!(loss_pixel(&a, &Tensor::zeros(&[3, 4])).is_err());
    }

    #[test]
    fn id_identities() {
        let x = vec![0.3, -1.2, 2.0];
        assert_eq!(loss_id(&x, &x).unwrap(), 0.0);
        let neg: Vec<f64> = x.iter().map(|v| -2.5 * v).collect();
        assert!((loss_id(&x, &neg).unwrap() - 4.0).abs() < 1e-12);
        let y = vec![1.0, 0.5, -0.25];
        let scaled: Vec<f64> = y.iter().map(|v| 7.0 * v).collect();
        assert!((loss_id(&x, &y).unwrap() - loss_id(&x, &scaled).unwrap()).abs() < 1e-14);
        assert!((loss_id(&x, &y).unwrap() - loss_id(&y, &x).unwrap()).abs() < 1e-15);
        assert!(matches!(loss_id(&x, &[0.0, 0.0, 0.0]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn adversarial_closed_forms() {
        assert!((adv_objective(0.5, 0.5) - 2.0 * 0.5f64.ln()).abs() < 1e-12);
        let near = adv_objective(1.0 - 1e-12, 1e-12);
        assert!(near < 0.0 && near > -1e-10);
        assert_eq!(loss_adv_d(0.7, 0.2), -(0.7f64.ln() + 0.8f64.ln()));
        assert_eq!(loss_adv_g(0.3, AdvForm::MinMax), 0.7f64.ln());
        assert_eq!(loss_adv_g(0.3, AdvForm::NonSaturating), -0.3f64.ln());
    }

    #[test]
    fn fa_identities() {
        let f = Tensor::new(&[1, 1, 1], vec![3.0]);
        let h = Tensor::new(&[1, 1, 1], vec![1.0]);
        assert_eq!(loss_fa(&f, &h).unwrap(), 4.0);
        assert_eq!(loss_fa(&f, &f).unwrap(), 0.0);
    }

    #[test]
    fn weighted_sums() {
        let w = LossWeights::default();
        assert_eq!(loss_frn(0.0, 0.0, &w), 0.0);
        assert_eq!(loss_frn(0.2, 0.5, &LossWeights { lambda1: 0.0, ..w }), 0.2);
        assert_eq!(loss_ffn(0.1, 0.0, 0.0, 0.0, &w), 0.1);
        assert_eq!(loss_ti(0.3, 0.2, 0.1, &LossWeights { lambda4: 0.0, lambda5: 0.0, ..w }), 0.3);
        assert!(LossWeights { lambda3: -1.0, ..w }.validate().is_err());
        assert!(LossWeights { lambda5: f64::NAN, ..w }.validate().is_err());
        w.validate().unwrap();
    }

    #[test]
    fn graph_losses_match_reference_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = rand_tensor(&mut rng, &[2, 3, 4, 4]);
        let b = rand_tensor(&mut rng, &[2, 3, 4, 4]);
        let ex = rand_tensor(&mut rng, &[2, 5]);
        let ey = rand_tensor(&mut rng, &[2, 5]);
        let mut g = Graph::<f64>::new();
        let (va, vb, vx, vy) = (g.input(a.clone()), g.input(b.clone()), g.input(ex.clone()), g.input(ey.clone()));
        let p = pixel_graph(&mut g, va, vb);
        let i = id_graph(&mut g, vx, vy);
        let rows = |t: &Tensor<f64>| t.data().chunks(5).map(<[f64]>::to_vec).collect::<Vec<_>>();
        assert!((g.scalar_value(p) - loss_pixel(&a, &b).unwrap()).abs() < 1e-14);
        assert!((g.scalar_value(i) - loss_id_batch(&rows(&ex), &rows(&ey)).unwrap()).abs() < 1e-14);
        let zr = Tensor::new(&[3, 1], vec![0.4, -1.0, 2.0]);
        let zf = Tensor::new(&[3, 1], vec![-0.3, 0.8, 0.0]);
        let (r, f) = (g.input(zr.clone()), g.input(zf.clone()));
        let d = adv_d_graph(&mut g, r, f);
        let gm = adv_g_graph(&mut g, f, AdvForm::MinMax);
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let want_d = (0..3).map(|k| loss_adv_d(sig(zr.data()[k]), sig(zf.data()[k]))).sum::<f64>() / 3.0;
        let want_g = (0..3).map(|k| loss_adv_g(sig(zf.data()[k]), AdvForm::MinMax)).sum::<f64>() / 3.0;
        assert!((g.scalar_value(d) - want_d).abs() < 1e-12);
        assert!((g.scalar_value(gm) - want_g).abs() < 1e-12);
    }
}
