//! Graph gradients of every objective against central differences of the
//! plain `f64` reference implementations.

use mdfr_autograd::{Graph, Tensor, Var};
use mdfr_core::losses::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;
const TOL: f64 = 1e-4;
const COORDS: usize = 10;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    let (n, d) = t.dims2();
    (0..n).map(|i| t.data()[i * d..(i + 1) * d].to_vec()).collect()
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

/// Compares graph gradients of `build` with central differences of the
/// reference terms at `COORDS` random coordinates of each input. Terms are
/// differenced separately and then passed through the linear `combine`, so
/// large loss weights do not swamp the small terms.
fn check_terms(
    name: &str,
    inputs: Vec<Tensor<f64>>,
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
    terms: impl Fn(&[Tensor<f64>]) -> Vec<f64>,
    combine: impl Fn(&[f64]) -> f64,
) {
    let reference = |x: &[Tensor<f64>]| combine(&terms(x));
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars);
    let value = g.scalar_value(out);
    assert!((value - reference(&inputs)).abs() <= 1e-10 * value.abs().max(1.0), "{name}: forward mismatch");
    let grads = g.backward(out);
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64);
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).expect("gradient");
        for _ in 0..COORDS {
            let i = rng.random_range(0..inputs[k].numel());
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= H;
            let diff: Vec<f64> = terms(&plus).iter().zip(terms(&minus)).map(|(p, m)| p - m).collect();
            let numeric = combine(&diff) / (2.0 * H);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(rel < TOL, "{name}: input {k} coord {i}: analytic {a} numeric {numeric} rel {rel}");
        }
    }
}

fn check(
    name: &str,
    inputs: Vec<Tensor<f64>>,
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
    reference: impl Fn(&[Tensor<f64>]) -> f64,
) {
    check_terms(name, inputs, build, |x| vec![reference(x)], |p| p[0]);
}

fn weights() -> LossWeights {
    LossWeights::default()
}

#[test]
fn pixel_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, &[2, 3, 6, 6], 0.0, 1.0);
    let b = rand_tensor(&mut rng, &[2, 3, 6, 6], 0.0, 1.0);
    check("pixel", vec![a, b], |g, v| pixel_graph(g, v[0], v[1]), |t| loss_pixel(&t[0], &t[1]).unwrap());
}

#[test]
fn identity_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&mut rng, &[4, 16], -1.0, 1.0);
    let y = rand_tensor(&mut rng, &[4, 16], -1.0, 1.0);
    check("id", vec![x, y], |g, v| id_graph(g, v[0], v[1]), |t| loss_id_batch(&rows(&t[0]), &rows(&t[1])).unwrap());
}

#[test]
fn feature_alignment_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = rand_tensor(&mut rng, &[2, 4, 5, 5], -2.0, 2.0);
    let b = rand_tensor(&mut rng, &[2, 4, 5, 5], -2.0, 2.0);
    check("fa", vec![a, b], |g, v| fa_graph(g, v[0], v[1]), |t| loss_fa(&t[0], &t[1]).unwrap());
}

#[test]
fn critic_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let zr = rand_tensor(&mut rng, &[6, 1], -3.0, 3.0);
    let zf = rand_tensor(&mut rng, &[6, 1], -3.0, 3.0);
    check("adv_d", vec![zr, zf], |g, v| adv_d_graph(g, v[0], v[1]), |t| {
        mean(t[0].data().iter().zip(t[1].data()).map(|(&r, &f)| loss_adv_d(sigmoid(r), sigmoid(f))))
    });
}

#[test]
fn generator_adversarial_terms() {
    for form in [AdvForm::MinMax, AdvForm::NonSaturating] {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let zf = rand_tensor(&mut rng, &[6, 1], -3.0, 3.0);
        check(
            &format!("adv_g_{form:?}"),
            vec![zf],
            move |g, v| adv_g_graph(g, v[0], form),
            move |t| mean(t[0].data().iter().map(|&f| loss_adv_g(sigmoid(f), form))),
        );
    }
}

#[test]
fn restoration_objective() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let out = rand_tensor(&mut rng, &[2, 3, 4, 4], 0.0, 1.0);
    let tgt = rand_tensor(&mut rng, &[2, 3, 4, 4], 0.0, 1.0);
    let e_out = rand_tensor(&mut rng, &[2, 8], -1.0, 1.0);
    let e_tgt = rand_tensor(&mut rng, &[2, 8], -1.0, 1.0);
    let w = weights();
    check_terms(
        "frn",
        vec![out, tgt, e_out, e_tgt],
        |g, v| {
            let p = pixel_graph(g, v[0], v[1]);
            let id = id_graph(g, v[2], v[3]);
            weighted_sum(g, p, &[(w.lambda1, id)])
        },
        |t| vec![loss_pixel(&t[0], &t[1]).unwrap(), loss_id_batch(&rows(&t[2]), &rows(&t[3])).unwrap()],
        |p| loss_frn(p[0], p[1], &w),
    );
}

#[test]
fn frontalization_objective() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let out = rand_tensor(&mut rng, &[2, 3, 4, 4], 0.0, 1.0);
    let tgt = rand_tensor(&mut rng, &[2, 3, 4, 4], 0.0, 1.0);
    let e_out = rand_tensor(&mut rng, &[2, 8], -1.0, 1.0);
    let e_tgt = rand_tensor(&mut rng, &[2, 8], -1.0, 1.0);
    let zp = rand_tensor(&mut rng, &[2, 1], -2.0, 2.0);
    let zi = rand_tensor(&mut rng, &[2, 1], -2.0, 2.0);
    let w = weights();
    check_terms(
        "ffn",
        vec![out, tgt, e_out, e_tgt, zp, zi],
        |g, v| {
            let p = pixel_graph(g, v[0], v[1]);
            let id = id_graph(g, v[2], v[3]);
            let ap = adv_g_graph(g, v[4], AdvForm::MinMax);
            let ai = adv_g_graph(g, v[5], AdvForm::MinMax);
            let adv = g.add(ap, ai);
            weighted_sum(g, p, &[(w.lambda2, id), (w.lambda3, adv)])
        },
        |t| {
            let ap = mean(t[4].data().iter().map(|&z| loss_adv_g(sigmoid(z), AdvForm::MinMax)));
            let ai = mean(t[5].data().iter().map(|&z| loss_adv_g(sigmoid(z), AdvForm::MinMax)));
            vec![loss_pixel(&t[0], &t[1]).unwrap(), loss_id_batch(&rows(&t[2]), &rows(&t[3])).unwrap(), ap, ai]
        },
        |p| loss_ffn(p[0], p[1], p[2], p[3], &w),
    );
}

#[test]
fn task_integrated_objective() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let teacher = rand_tensor(&mut rng, &[2, 3, 4, 4], 0.0, 1.0);
    let student = rand_tensor(&mut rng, &[2, 3, 4, 4], 0.0, 1.0);
    let e_t = rand_tensor(&mut rng, &[2, 8], -1.0, 1.0);
    let e_s = rand_tensor(&mut rng, &[2, 8], -1.0, 1.0);
    let f_t = rand_tensor(&mut rng, &[2, 5, 4, 4], -1.0, 1.0);
    let f_s = rand_tensor(&mut rng, &[2, 5, 4, 4], -1.0, 1.0);
    let w = weights();
    check_terms(
        "ti",
        vec![teacher, student, e_t, e_s, f_t, f_s],
        |g, v| {
            let p = pixel_graph(g, v[0], v[1]);
            let id = id_graph(g, v[2], v[3]);
            let fa = fa_graph(g, v[4], v[5]);
            weighted_sum(g, p, &[(w.lambda4, id), (w.lambda5, fa)])
        },
        |t| {
            vec![
                loss_pixel(&t[0], &t[1]).unwrap(),
                loss_id_batch(&rows(&t[2]), &rows(&t[3])).unwrap(),
                loss_fa(&t[4], &t[5]).unwrap(),
            ]
        },
        |p| loss_ti(p[0], p[1], p[2], &w),
    );
}
