//! Independent oracles shared by the integration tests. Nothing here calls
//! the library routine it is used to check.
#![allow(dead_code)]

use msrg::nn::{Binder, LayerNode};
use msrg::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const FD_STEP: f64 = 1e-5;
/// Coordinates probed per tensor; small tensors are probed exhaustively.
pub const FD_SAMPLES: usize = 24;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Replaces every parameter with N(0, std²) draws so that no gradient is
/// trivially zero (biases, attention gate).
pub fn randomize_params(node: &mut LayerNode, rng: &mut ChaCha8Rng, std: f64) {
    for p in &mut node.params {
        let n = p.tensor.numel();
        p.tensor.data_mut().copy_from_slice(&normal(rng, n, std));
    }
}

fn sample_coords(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if n <= FD_SAMPLES {
        (0..n).collect()
    } else {
        (0..FD_SAMPLES).map(|_| rng.random_range(0..n)).collect()
    }
}

/// Denominator floor for [`rel_err`]. Some gradients are exactly zero (the
/// key bias of attention cancels in the softmax) and the central difference
/// then returns pure rounding noise.
pub const REL_FLOOR: f64 = 1e-3;

/// Norm-wise relative error between analytic and numeric gradient samples.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn).max(REL_FLOOR)
}

/// Central-difference check of a scalar function of several tensors.
/// `f` must build the same computation from whatever vars it is handed.
/// Returns the worst relative error over all inputs.
pub fn fd_check(inputs: &[Tensor], rng: &mut ChaCha8Rng, f: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_requires_grad(true))).collect();
    let out = f(&mut tape, &vars);
    tape.backward(out).expect("scalar output");
    let eval = |ins: &[Tensor]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = ins.iter().map(|x| t.constant(x.clone())).collect();
        let o = f(&mut t, &vs);
        t.value(o).data()[0]
    };
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let grad = tape.grad(vars[i]).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; input.numel()]);
        let coords = sample_coords(input.numel(), rng);
        let mut a = Vec::new();
        let mut n = Vec::new();
        for &k in &coords {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[k] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[k] -= FD_STEP;
            n.push((eval(&plus) - eval(&minus)) / (2.0 * FD_STEP));
            a.push(grad[k]);
        }
        worst = worst.max(rel_err(&a, &n));
    }
    worst
}

/// Checks input and parameter gradients of one layer under the objective
/// `Σ r ⊙ layer(x)` with a fixed random `r`.
pub fn fd_layer(node: &LayerNode, x: &Tensor, rng: &mut ChaCha8Rng) -> f64 {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone().with_requires_grad(true));
    let mut binder = Binder::new(true);
    let y = node.forward(&mut tape, xv, &mut binder, 0).expect("forward");
    let r = Tensor::new(tape.shape(y), normal(rng, tape.value(y).numel(), 1.0)).unwrap();
    let objective = |tape: &mut Tape, y: Var| {
        let rv = tape.constant(r.clone());
        let p = tape.mul(y, rv).unwrap();
        tape.sum(p)
    };
    let out = objective(&mut tape, y);
    tape.backward(out).unwrap();
    let value = |node: &LayerNode, x: &Tensor| {
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let y = node.forward(&mut t, xv, &mut Binder::new(false), 0).unwrap();
        let o = objective(&mut t, y);
        t.value(o).data()[0]
    };
    let mut worst: f64 = 0.0;

    let gx = tape.grad(xv).unwrap().to_vec();
    let (mut a, mut n) = (Vec::new(), Vec::new());
    for k in sample_coords(x.numel(), rng) {
        let (mut xp, mut xm) = (x.clone(), x.clone());
        xp.data_mut()[k] += FD_STEP;
        xm.data_mut()[k] -= FD_STEP;
        n.push((value(node, &xp) - value(node, &xm)) / (2.0 * FD_STEP));
        a.push(gx[k]);
    }
    worst = worst.max(rel_err(&a, &n));

    for &(_, pi, v) in binder.bound() {
        let g = tape.grad(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; node.params[pi].tensor.numel()]);
        let (mut a, mut n) = (Vec::new(), Vec::new());
        for k in sample_coords(g.len(), rng) {
            let (mut np, mut nm) = (node.clone(), node.clone());
            np.params[pi].tensor.data_mut()[k] += FD_STEP;
            nm.params[pi].tensor.data_mut()[k] -= FD_STEP;
            n.push((value(&np, x) - value(&nm, x)) / (2.0 * FD_STEP));
            a.push(g[k]);
        }
        worst = worst.max(rel_err(&a, &n));
    }
    worst
}

/// Largest singular value by one-sided Jacobi (Hestenes) orthogonalization
/// of the rows (or columns) of `w`.
pub fn svd_top(w: &[f64], rows: usize, cols: usize) -> f64 {
    // Vectors to orthogonalize: the shorter side's count, each of the longer length.
    let (count, len) = if rows <= cols { (rows, cols) } else { (cols, rows) };
    let mut vecs: Vec<Vec<f64>> = (0..count)
        .map(|i| {
            (0..len)
                .map(|k| if rows <= cols { w[i * cols + k] } else { w[k * cols + i] })
                .collect()
        })
        .collect();
    for _ in 0..60 {
        let mut rotated = false;
        for p in 0..count {
            for q in p + 1..count {
                let (alpha, beta, gamma) = vecs[p].iter().zip(&vecs[q]).fold((0.0, 0.0, 0.0), |(a, b, g), (x, y)| {
                    (a + x * x, b + y * y, g + x * y)
                });
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (vp, vq) = {
                    let (lo, hi) = vecs.split_at_mut(q);
                    (&mut lo[p], &mut hi[0])
                };
                for (x, y) in vp.iter_mut().zip(vq.iter_mut()) {
                    let (a, b) = (*x, *y);
                    *x = c * a - s * b;
                    *y = s * a + c * b;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    vecs.iter()
        .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

/// `10·log10(max² / mse)` evaluated directly.
pub fn psnr_direct(x: &[f64], y: &[f64], max: f64) -> f64 {
    let mse = x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / x.len() as f64;
    10.0 * (max * max / mse).log10()
}

/// Global SSIM from raw moment sums.
pub fn ssim_direct(x: &[f64], y: &[f64], range: f64) -> f64 {
    let n = x.len() as f64;
    let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sx += a;
        sy += b;
        sxx += a * a;
        syy += b * b;
        sxy += a * b;
    }
    let (mx, my) = (sx / n, sy / n);
    let vx = sxx / n - mx * mx;
    let vy = syy / n - my * my;
    let cxy = sxy / n - mx * my;
    let c1 = (0.01 * range).powi(2);
    let c2 = (0.03 * range).powi(2);
    ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
}

/// Direct nested-loop convolution, `x: (N, C, H, W)`, `w: (O, C, k, k)`.
pub fn conv2d_direct(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (n, c, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (o, k) = (w.dim(0), w.dim(2));
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for a in 0..k {
                            for bb in 0..k {
                                let y = (i * stride + a) as isize - pad as isize;
                                let xx = (j * stride + bb) as isize - pad as isize;
                                if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
                                    continue;
                                }
                                acc += x.data()[((b * c + ic) * h + y as usize) * wd + xx as usize]
                                    * w.data()[((oc * c + ic) * k + a) * k + bb];
                            }
                        }
                    }
                    out[((b * o + oc) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, o, oh, ow], out).unwrap()
}
