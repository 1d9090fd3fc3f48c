//! Five-point central finite-difference check of analytic gradients.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Result, SparseMatrix, Tensor};

pub const FD_STEP: f64 = 1e-4;

/// Relative error as `|analytic - fd| / max(|fd|, 1e-8)`.
pub fn rel_error(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / fd.abs().max(1e-8)
}

/// Values with magnitude in `[0.1, 1]`, keeping inputs clear of the kinks in
/// `relu` and `abs`.
pub fn random_values(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let mag = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect()
}

/// Largest relative error between the analytic gradient of
/// `sum(f(inputs) ⊙ w)` and its five-point central difference, over every input
/// element. `w` is a fixed pseudo-random weighting of the output.
pub fn max_rel_error<F>(inputs: &[(Vec<usize>, Vec<f64>)], f: F) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let weighted = |ts: &[Tensor]| -> Result<Tensor> {
        let out = f(ts)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        let w: Vec<f64> = (0..out.len()).map(|_| rng.gen_range(0.5..1.5)).collect();
        out.mul(&Tensor::new(out.shape(), w)?).map(|t| t.sum_all())
    };
    let leaves = inputs
        .iter()
        .map(|(s, d)| Tensor::param(s, d.clone()))
        .collect::<Result<Vec<_>>>()?;
    weighted(&leaves)?.backward()?;
    let mut worst: f64 = 0.0;
    for (i, leaf) in leaves.iter().enumerate() {
        let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.len()]);
        for k in 0..leaf.len() {
            let eval = |delta: f64| -> Result<f64> {
                let ts = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, (s, d))| {
                        let mut d = d.clone();
                        if j == i {
                            d[k] += delta;
                        }
                        Tensor::new(s, d)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(weighted(&ts)?.item())
            };
            let h = FD_STEP;
            let fd = (8.0 * (eval(h)? - eval(-h)?) - (eval(2.0 * h)? - eval(-2.0 * h)?)) / (12.0 * h);
            worst = worst.max(rel_error(analytic[k], fd));
        }
    }
    Ok(worst)
}

/// Runs the check over every differentiable operator on random shapes up to
/// 7×5 and returns `(operator, worst relative error)`.
pub fn op_suite(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.gen_range(2..=7);
    let n = rng.gen_range(2..=5);
    let k = rng.gen_range(1..=5);
    let mut mat = |r: usize, c: usize| (vec![r, c], random_values(&mut rng, r * c));
    let a = mat(m, n);
    let b = mat(m, n);
    let rhs = mat(n, k);
    let col = mat(m, 1);
    let row = mat(1, n);
    let extra = mat(m, k);
    let tall = mat(k, n);
    let gain = mat(1, n);
    let bias = mat(1, n);
    let mut out = Vec::new();
    let mut run = |name: &'static str, ins: Vec<(Vec<usize>, Vec<f64>)>, f: &dyn Fn(&[Tensor]) -> Result<Tensor>| -> Result<()> {
        out.push((name, max_rel_error(&ins, f)?));
        Ok(())
    };
    run("matmul", vec![a.clone(), rhs.clone()], &|t| t[0].matmul(&t[1]))?;
    let bias_k = mat(1, k);
    run("affine", vec![a.clone(), rhs.clone(), bias_k], &|t| t[0].affine(&t[1], &t[2]))?;
    run("transpose", vec![a.clone()], &|t| t[0].transpose())?;
    run("add", vec![a.clone(), b.clone()], &|t| t[0].add(&t[1]))?;
    run("sub", vec![a.clone(), b.clone()], &|t| t[0].sub(&t[1]))?;
    run("mul", vec![a.clone(), b.clone()], &|t| t[0].mul(&t[1]))?;
    run("scale", vec![a.clone()], &|t| Ok(t[0].scale(-2.5)))?;
    run("add_row", vec![a.clone(), row.clone()], &|t| t[0].add_row(&t[1]))?;
    run("mul_col", vec![a.clone(), col.clone()], &|t| t[0].mul_col(&t[1]))?;
    run("concat_rows", vec![a.clone(), tall.clone()], &|t| Tensor::concat(&t[..2], 0))?;
    run("concat_cols", vec![a.clone(), extra.clone()], &|t| Tensor::concat(&t[..2], 1))?;
    run("slice_rows", vec![a.clone()], &|t| t[0].slice(0, 1, m - 1))?;
    run("slice_cols", vec![a.clone()], &|t| t[0].slice(1, 1, n - 1))?;
    run("sum_all", vec![a.clone()], &|t| Ok(t[0].sum_all()))?;
    run("mean_all", vec![a.clone()], &|t| Ok(t[0].mean_all()))?;
    run("sum_axis0", vec![a.clone()], &|t| t[0].sum_axis(0))?;
    run("sum_axis1", vec![a.clone()], &|t| t[0].sum_axis(1))?;
    run("mean_axis0", vec![a.clone()], &|t| t[0].mean_axis(0))?;
    run("mean_axis1", vec![a.clone()], &|t| t[0].mean_axis(1))?;
    run("max_axis0", vec![a.clone()], &|t| t[0].max_axis(0))?;
    run("max_axis1", vec![a.clone()], &|t| t[0].max_axis(1))?;
    run("softmax_axis0", vec![a.clone()], &|t| t[0].softmax(0))?;
    run("softmax_axis1", vec![a.clone()], &|t| t[0].softmax(1))?;
    run("sigmoid", vec![a.clone()], &|t| Ok(t[0].sigmoid()))?;
    run("relu", vec![a.clone()], &|t| Ok(t[0].relu()))?;
    run("abs", vec![a.clone()], &|t| Ok(t[0].abs()))?;
    run("sin", vec![a.clone()], &|t| Ok(t[0].sin()))?;
    run("cos", vec![a.clone()], &|t| Ok(t[0].cos()))?;
    run("layer_norm", vec![a.clone(), gain, bias], &|t| t[0].layer_norm(&t[1], &t[2], 1e-5))?;
    run("l1_loss", vec![a.clone(), b.clone()], &|t| t[0].l1_loss(&t[1]))?;
    let picks: Vec<usize> = (0..m + 2).map(|i| (i * 3) % m).collect();
    run("gather_rows", vec![a.clone()], &|t| t[0].gather_rows(&picks))?;
    let targets: Vec<usize> = (0..m).map(|i| (i * 2) % 3).collect();
    run("scatter_add_rows", vec![a.clone()], &|t| t[0].scatter_add_rows(&targets, 3))?;
    let segs: Vec<usize> = (0..m).map(|i| i % 2).collect();
    run("segment_mean", vec![a.clone()], &|t| t[0].segment_mean(&segs, 2))?;
    run("segment_max", vec![a.clone()], &|t| t[0].segment_max(&segs, 2))?;
    run("segment_softmax", vec![col], &|t| t[0].segment_softmax(&segs, 2))?;
    let triplets = (0..m + 3).map(|i| ((i * 5) % (m + 1), (i * 2) % m, 0.25 + 0.1 * i as f64)).collect();
    let sp = Rc::new(SparseMatrix::from_triplets(m + 1, m, triplets)?);
    run("spmm", vec![a.clone()], &|t| t[0].spmm(&sp))?;
    Ok(out)
}
