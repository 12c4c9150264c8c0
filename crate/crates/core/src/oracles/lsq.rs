use crate::error::{Error, Result};
use crate::netgraph::Op;
use crate::recon::ReconstructionTask;
use crate::tensor::Tensor;

use super::linalg::lu_solve;

/// Design matrix `(rows, d)`, target matrix `(rows, out)` and the flat
/// weight index of every `(input, output)` pair.
struct Regression {
    x: Vec<f64>,
    y: Vec<f64>,
    rows: usize,
    d: usize,
    out: usize,
    index: Box<dyn Fn(usize, usize) -> usize>,
}

fn dense_regression(x: &Tensor<f64>, y: &Tensor<f64>, w_shape: &[usize], bias: Option<&Tensor<f64>>) -> Regression {
    let (d, out) = (w_shape[0], w_shape[1]);
    let rows = x.numel() / d;
    let mut yv = y.data().to_vec();
    if let Some(b) = bias {
        for (i, v) in yv.iter_mut().enumerate() {
            *v -= b.data()[i % out];
        }
    }
    Regression {
        x: x.data().to_vec(),
        y: yv,
        rows,
        d,
        out,
        index: Box::new(move |i, j| i * out + j),
    }
}

fn conv_regression(
    x: &Tensor<f64>,
    y: &Tensor<f64>,
    w_shape: &[usize],
    bias: Option<&Tensor<f64>>,
    stride: usize,
    pad: usize,
) -> Regression {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, kh, kw) = (w_shape[0], w_shape[2], w_shape[3]);
    let (oh, ow) = (y.shape()[2], y.shape()[3]);
    let d = c * kh * kw;
    let rows = n * oh * ow;
    let mut xm = vec![0.0; rows * d];
    let mut ym = vec![0.0; rows * o];
    for b in 0..n {
        for i in 0..oh {
            for j in 0..ow {
                let r = (b * oh + i) * ow + j;
                for ch in 0..c {
                    for p in 0..kh {
                        for q in 0..kw {
                            let yy = (i * stride + p) as isize - pad as isize;
                            let xx = (j * stride + q) as isize - pad as isize;
                            if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                                xm[r * d + (ch * kh + p) * kw + q] =
                                    x.data()[((b * c + ch) * h + yy as usize) * w + xx as usize];
                            }
                        }
                    }
                }
                for oc in 0..o {
                    let bias = bias.map_or(0.0, |t| t.data()[oc]);
                    ym[r * o + oc] = y.data()[((b * o + oc) * oh + i) * ow + j] - bias;
                }
            }
        }
    }
    Regression {
        x: xm,
        y: ym,
        rows,
        d,
        out: o,
        index: Box::new(move |i, oc| oc * d + i),
    }
}

/// Exact minimizer of the `K = 0` objective on the mask's support, solved
/// per output unit from the normal equations
/// `(2XᵀX + λI) w = 2XᵀY + λ w_init`. With `λ > 0` this is where one damped
/// Newton step from `w_init` lands.
pub fn closed_form_k0(task: &ReconstructionTask<f64>, lambda: f64, w_init: Option<&Tensor<f64>>) -> Result<Tensor<f64>> {
    let sub = task.sub();
    if sub.horizon() != 0 {
        return Err(Error::Config(format!("closed form needs K = 0, task has K = {}", sub.horizon())));
    }
    if task.active().names().len() != 1 {
        return Err(Error::Config("closed form handles a single pruned weight".into()));
    }
    let name = &task.active().names()[0];
    let mask = &task.active().masks()[0];
    let x = &task.inputs().x;
    let y = &task.targets()[0];
    let reg = match &sub.ops()[0].op {
        Op::Dense { weight, bias } | Op::AttentionOut { weight, bias } if weight == name => {
            let b = bias.as_deref().map(|b| sub.weight(b)).transpose()?;
            dense_regression(x, y, mask.shape(), b)
        }
        Op::Conv2d {
            weight,
            bias,
            stride,
            padding,
        } if weight == name => {
            let b = bias.as_deref().map(|b| sub.weight(b)).transpose()?;
            conv_regression(x, y, mask.shape(), b, *stride, *padding)
        }
        op => {
            return Err(Error::Config(format!(
                "closed form needs a dense or conv layer, got {}",
                op.kind()
            )))
        }
    };
    let mut w = Tensor::zeros(mask.shape());
    for j in 0..reg.out {
        let support: Vec<usize> = (0..reg.d).filter(|&i| mask.pattern()[(reg.index)(i, j)]).collect();
        let s = support.len();
        if s == 0 {
            continue;
        }
        let mut a = vec![0.0; s * s];
        let mut rhs = vec![0.0; s];
        for r in 0..reg.rows {
            let row = &reg.x[r * reg.d..(r + 1) * reg.d];
            let t = reg.y[r * reg.out + j];
            for (p, &ip) in support.iter().enumerate() {
                rhs[p] += 2.0 * row[ip] * t;
                for (q, &iq) in support.iter().enumerate() {
                    a[p * s + q] += 2.0 * row[ip] * row[iq];
                }
            }
        }
        for (p, &ip) in support.iter().enumerate() {
            a[p * s + p] += lambda;
            if let Some(w0) = w_init {
                rhs[p] += lambda * w0.data()[(reg.index)(ip, j)];
            }
        }
        let sol = lu_solve(&Tensor::new([s, s], a)?, &rhs).map_err(|e| {
            Error::Numerical(format!("normal equations for output {j} are singular ({e}); add a ridge"))
        })?;
        for (p, &ip) in support.iter().enumerate() {
            w.data_mut()[(reg.index)(ip, j)] = sol[p];
        }
    }
    Ok(w)
}
