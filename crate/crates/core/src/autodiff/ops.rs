//! Differentiable operations recorded on a [`Tape`].
//!
//! Activation layout is `[N, C, T, J]` (batch, channels, frames, joints)
//! unless noted otherwise.

use rand::Rng;

use super::kernels::{gemm, Mat};
use super::tape::{BackwardOp, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::SeededRng;

fn dims4(t: &Tensor, what: &str) -> Result<[usize; 4]> {
    match *t.shape() {
        [a, b, c, d] => Ok([a, b, c, d]),
        ref s => Err(Error::Shape(format!("{what} must be 4-D, got {s:?}"))),
    }
}

fn expect_shape(t: &Tensor, expected: &[usize], what: &str) -> Result<()> {
    if t.shape() != expected {
        return Err(Error::Shape(format!(
            "{what}: expected {expected:?}, got {:?}",
            t.shape()
        )));
    }
    Ok(())
}

struct AddOp;

impl BackwardOp for AddOp {
    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(grad.clone()), Some(grad.clone())])
    }
}

struct MulOp;

impl BackwardOp for MulOp {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let prod = |other: &Tensor| {
            let data = grad.data().iter().zip(other.data()).map(|(g, v)| g * v).collect();
            Tensor::new(grad.shape().to_vec(), data)
        };
        Ok(vec![
            needs[0].then(|| prod(inputs[1])).transpose()?,
            needs[1].then(|| prod(inputs[0])).transpose()?,
        ])
    }
}

struct ReluOp;

impl BackwardOp for ReluOp {
    fn backward(&self, _: &[&Tensor], output: &Tensor, grad: &Tensor, _: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let data = grad
            .data()
            .iter()
            .zip(output.data())
            .map(|(g, y)| if *y > 0.0 { *g } else { 0.0 })
            .collect();
        Ok(vec![Some(Tensor::new(grad.shape().to_vec(), data)?)])
    }
}

struct SumOp {
    squared: bool,
}

impl BackwardOp for SumOp {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let g = grad.item()?;
        let x = inputs[0];
        Ok(vec![Some(if self.squared {
            x.map(|v| 2.0 * v * g)
        } else {
            Tensor::full(x.shape(), g)
        })])
    }
}

struct GraphConvOp {
    n: usize,
    c: usize,
    tj: usize,
    j: usize,
    s: usize,
    o: usize,
    /// `[S, N*C*T, J]` neighbour aggregates `x * A_k^T`
    agg: Vec<f64>,
}

impl BackwardOp for GraphConvOp {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let &Self { n, c, tj, j, s, o, .. } = self;
        let rows = n * c * tj / j;
        let (x, adj, w) = (inputs[0].data(), inputs[1].data(), inputs[2].data());
        let g = grad.data();
        let has_bias = inputs.len() > 3;

        let mut gw = None;
        if needs[2] {
            let mut d = vec![0.0; s * c * o];
            for k in 0..s {
                for nn in 0..n {
                    let agg_kn = &self.agg[k * rows * j + nn * c * tj..][..c * tj];
                    let g_n = &g[nn * o * tj..][..o * tj];
                    gemm(
                        Mat::dense(agg_kn, c, tj),
                        Mat::dense(g_n, o, tj).t(),
                        &mut d[k * c * o..],
                        if nn == 0 { 0.0 } else { 1.0 },
                    );
                }
            }
            gw = Some(Tensor::new(vec![s, c, o], d)?);
        }

        // column sums of the output gradient over batch and time: [O, J]
        let gsum = has_bias.then(|| {
            let mut acc = vec![0.0; o * j];
            for nn in 0..n {
                for oo in 0..o {
                    let row = &g[(nn * o + oo) * tj..][..tj];
                    for (idx, v) in row.iter().enumerate() {
                        acc[oo * j + idx % j] += v;
                    }
                }
            }
            acc
        });

        let mut gb = None;
        if has_bias && needs[3] {
            let gsum = gsum.as_ref().expect("bias present");
            let mut d = vec![0.0; s * o];
            for k in 0..s {
                for i in 0..j {
                    let rowsum: f64 = adj[(k * j + i) * j..][..j].iter().sum();
                    for oo in 0..o {
                        d[k * o + oo] += rowsum * gsum[oo * j + i];
                    }
                }
            }
            gb = Some(Tensor::new(vec![s, o], d)?);
        }

        let (mut gx, mut gadj) = (None, None);
        if needs[0] || needs[1] {
            let mut dagg = vec![0.0; s * rows * j];
            for k in 0..s {
                let w_k = &w[k * c * o..][..c * o];
                for nn in 0..n {
                    gemm(
                        Mat::dense(w_k, c, o),
                        Mat::dense(&g[nn * o * tj..][..o * tj], o, tj),
                        &mut dagg[k * rows * j + nn * c * tj..],
                        0.0,
                    );
                }
            }
            if needs[0] {
                let mut d = vec![0.0; rows * j];
                for k in 0..s {
                    gemm(
                        Mat::dense(&dagg[k * rows * j..][..rows * j], rows, j),
                        Mat::dense(&adj[k * j * j..][..j * j], j, j),
                        &mut d,
                        if k == 0 { 0.0 } else { 1.0 },
                    );
                }
                gx = Some(Tensor::new(inputs[0].shape().to_vec(), d)?);
            }
            if needs[1] {
                let mut d = vec![0.0; s * j * j];
                for k in 0..s {
                    gemm(
                        Mat::dense(&dagg[k * rows * j..][..rows * j], rows, j).t(),
                        Mat::dense(x, rows, j),
                        &mut d[k * j * j..],
                        0.0,
                    );
                }
                if let Some(gsum) = &gsum {
                    let b = inputs[3].data();
                    for k in 0..s {
                        for i in 0..j {
                            let extra: f64 = (0..o).map(|oo| gsum[oo * j + i] * b[k * o + oo]).sum();
                            d[(k * j + i) * j..][..j].iter_mut().for_each(|v| *v += extra);
                        }
                    }
                }
                gadj = Some(Tensor::new(vec![s, j, j], d)?);
            }
        }

        let mut out = vec![gx, gadj, gw];
        if has_bias {
            out.push(gb);
        }
        Ok(out)
    }
}

fn im2col(x_n: &[f64], c: usize, t: usize, j: usize, kernel: usize, stride: usize, t_out: usize, col: &mut [f64]) {
    let pad = kernel / 2;
    for ci in 0..c {
        for k in 0..kernel {
            let row = &mut col[(ci * kernel + k) * t_out * j..][..t_out * j];
            for to in 0..t_out {
                let dst = &mut row[to * j..][..j];
                let src_t = (to * stride + k) as isize - pad as isize;
                if (0..t as isize).contains(&src_t) {
                    dst.copy_from_slice(&x_n[(ci * t + src_t as usize) * j..][..j]);
                } else {
                    dst.fill(0.0);
                }
            }
        }
    }
}

fn col2im(col: &[f64], c: usize, t: usize, j: usize, kernel: usize, stride: usize, t_out: usize, dx_n: &mut [f64]) {
    let pad = kernel / 2;
    for ci in 0..c {
        for k in 0..kernel {
            let row = &col[(ci * kernel + k) * t_out * j..][..t_out * j];
            for to in 0..t_out {
                let src_t = (to * stride + k) as isize - pad as isize;
                if (0..t as isize).contains(&src_t) {
                    let dst = &mut dx_n[(ci * t + src_t as usize) * j..][..j];
                    for (d, v) in dst.iter_mut().zip(&row[to * j..][..j]) {
                        *d += v;
                    }
                }
            }
        }
    }
}

struct TemporalConvOp {
    dims: [usize; 4],
    o: usize,
    kernel: usize,
    stride: usize,
    t_out: usize,
}

impl BackwardOp for TemporalConvOp {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let [n, c, t, j] = self.dims;
        let &Self { o, kernel, stride, t_out, .. } = self;
        let (x, w, g) = (inputs[0].data(), inputs[1].data(), grad.data());
        let ck = c * kernel;
        let plane = t_out * j;
        let mut col = vec![0.0; ck * plane];

        let mut gw = needs[1].then(|| vec![0.0; o * ck]);
        let mut gx = needs[0].then(|| vec![0.0; n * c * t * j]);
        for nn in 0..n {
            let g_n = &g[nn * o * plane..][..o * plane];
            if let Some(gw) = gw.as_mut() {
                im2col(&x[nn * c * t * j..], c, t, j, kernel, stride, t_out, &mut col);
                gemm(Mat::dense(g_n, o, plane), Mat::dense(&col, ck, plane).t(), gw, 1.0);
            }
            if let Some(gx) = gx.as_mut() {
                gemm(Mat::dense(w, o, ck).t(), Mat::dense(g_n, o, plane), &mut col, 0.0);
                col2im(&col, c, t, j, kernel, stride, t_out, &mut gx[nn * c * t * j..]);
            }
        }
        let mut out = vec![
            gx.map(|d| Tensor::new(inputs[0].shape().to_vec(), d)).transpose()?,
            gw.map(|d| Tensor::new(inputs[1].shape().to_vec(), d)).transpose()?,
        ];
        if inputs.len() > 2 {
            out.push(if needs[2] {
                let mut gb = vec![0.0; o];
                for nn in 0..n {
                    for (oo, b) in gb.iter_mut().enumerate() {
                        *b += g[(nn * o + oo) * plane..][..plane].iter().sum::<f64>();
                    }
                }
                Some(Tensor::new(vec![o], gb)?)
            } else {
                None
            });
        }
        Ok(out)
    }
}

/// Running per-channel statistics of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

pub struct BatchNormOutput {
    pub output: Var,
    /// Updated running statistics (train mode only).
    pub updated: Option<RunningStats>,
}

struct BatchNormOp {
    n: usize,
    c: usize,
    l: usize,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    train: bool,
}

impl BackwardOp for BatchNormOp {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let &Self { n, c, l, train, .. } = self;
        let gamma = inputs[1].data();
        let g = grad.data();
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for nn in 0..n {
            for ch in 0..c {
                let base = (nn * c + ch) * l;
                for idx in base..base + l {
                    dgamma[ch] += g[idx] * self.xhat[idx];
                    dbeta[ch] += g[idx];
                }
            }
        }
        let dx = needs[0].then(|| {
            let m = (n * l) as f64;
            let mut dx = vec![0.0; n * c * l];
            for ch in 0..c {
                let scale = gamma[ch] * self.inv_std[ch];
                for nn in 0..n {
                    let base = (nn * c + ch) * l;
                    for idx in base..base + l {
                        dx[idx] = if train {
                            // dgamma/gamma and dbeta/gamma are the sums of dxhat and dxhat*xhat
                            scale * (g[idx] - dbeta[ch] / m - self.xhat[idx] * dgamma[ch] / m)
                        } else {
                            scale * g[idx]
                        };
                    }
                }
            }
            dx
        });
        Ok(vec![
            dx.map(|d| Tensor::new(inputs[0].shape().to_vec(), d)).transpose()?,
            needs[1].then(|| Tensor::new(vec![c], dgamma)).transpose()?,
            needs[2].then(|| Tensor::new(vec![c], dbeta)).transpose()?,
        ])
    }
}

struct SwapLastOp;

fn swap_last_two(t: &Tensor) -> Result<Tensor> {
    let [a, b, c, d] = dims4(t, "swap_last_two input")?;
    let src = t.data();
    let mut out = vec![0.0; src.len()];
    for outer in 0..a * b {
        let (s, o) = (&src[outer * c * d..][..c * d], &mut out[outer * c * d..][..c * d]);
        for ci in 0..c {
            for di in 0..d {
                o[di * c + ci] = s[ci * d + di];
            }
        }
    }
    Tensor::new(vec![a, b, d, c], out)
}

impl BackwardOp for SwapLastOp {
    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(swap_last_two(grad)?)])
    }
}

struct ReshapeOp;

impl BackwardOp for ReshapeOp {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(grad.clone().reshape(inputs[0].shape().to_vec())?)])
    }
}

struct ScaleMaskOp {
    mask: Vec<f64>,
}

impl BackwardOp for ScaleMaskOp {
    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let data = grad.data().iter().zip(&self.mask).map(|(g, m)| g * m).collect();
        Ok(vec![Some(Tensor::new(grad.shape().to_vec(), data)?)])
    }
}

struct PoolOp {
    l: usize,
}

impl BackwardOp for PoolOp {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let l = self.l;
        let data = grad
            .data()
            .iter()
            .flat_map(|g| std::iter::repeat_n(g / l as f64, l))
            .collect();
        Ok(vec![Some(Tensor::new(inputs[0].shape().to_vec(), data)?)])
    }
}

struct LinearOp;

impl BackwardOp for LinearOp {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (n, c, o) = (x.shape()[0], x.shape()[1], w.shape()[1]);
        let g = grad.data();
        let gx = needs[0]
            .then(|| {
                let mut d = vec![0.0; n * c];
                gemm(Mat::dense(g, n, o), Mat::dense(w.data(), c, o).t(), &mut d, 0.0);
                Tensor::new(vec![n, c], d)
            })
            .transpose()?;
        let gw = needs[1]
            .then(|| {
                let mut d = vec![0.0; c * o];
                gemm(Mat::dense(x.data(), n, c).t(), Mat::dense(g, n, o), &mut d, 0.0);
                Tensor::new(vec![c, o], d)
            })
            .transpose()?;
        let gb = needs[2]
            .then(|| {
                let mut d = vec![0.0; o];
                for row in g.chunks(o) {
                    for (acc, v) in d.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                Tensor::new(vec![o], d)
            })
            .transpose()?;
        Ok(vec![gx, gw, gb])
    }
}

struct CrossEntropyOp {
    probs: Vec<f64>,
    labels: Vec<usize>,
    classes: usize,
}

impl BackwardOp for CrossEntropyOp {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let g = grad.item()?;
        let n = self.labels.len() as f64;
        let mut d: Vec<f64> = self.probs.iter().map(|p| p * g / n).collect();
        for (row, &y) in self.labels.iter().enumerate() {
            d[row * self.classes + y] -= g / n;
        }
        Ok(vec![Some(Tensor::new(inputs[0].shape().to_vec(), d)?)])
    }
}

struct MseOp {
    targets: Vec<f64>,
}

impl BackwardOp for MseOp {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let g = grad.item()?;
        let n = self.targets.len() as f64;
        let d = inputs[0]
            .data()
            .iter()
            .zip(&self.targets)
            .map(|(p, t)| 2.0 * (p - t) * g / n)
            .collect();
        Ok(vec![Some(Tensor::new(inputs[0].shape().to_vec(), d)?)])
    }
}

impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        expect_shape(vb, va.shape(), "add")?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.record("add", value, &[a, b], Box::new(AddOp))
    }

    /// Elementwise product of two same-shaped values.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        expect_shape(vb, va.shape(), "mul")?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.record("mul", value, &[a, b], Box::new(MulOp))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.max(0.0));
        self.record("relu", value, &[x], Box::new(ReluOp))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        self.record("sum", value, &[x], Box::new(SumOp { squared: false }))
    }

    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).data().iter().map(|v| v * v).sum());
        self.record("sum_squares", value, &[x], Box::new(SumOp { squared: true }))
    }

    /// Partitioned graph convolution.
    ///
    /// `x: [N, C, T, J]`, `adj: [S, J, J]`, `w: [S, C, O]`, `bias: [S, O]`.
    /// `out[n, o, t, i] = sum_k sum_c w[k, c, o] * sum_j adj[k, i, j] * x[n, c, t, j]
    ///                    + sum_k bias[k, o] * sum_j adj[k, i, j]`.
    pub fn graph_conv(&mut self, x: Var, adj: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let [n, c, t, j] = dims4(self.value(x), "graph_conv input")?;
        let (av, wv) = (self.value(adj), self.value(w));
        let s = match *av.shape() {
            [s, a, b] if a == j && b == j => s,
            ref other => {
                return Err(Error::Shape(format!(
                    "graph_conv adjacency: expected [S, {j}, {j}], got {other:?}"
                )))
            }
        };
        let o = match *wv.shape() {
            [ws, wc, o] if ws == s && wc == c => o,
            ref other => {
                return Err(Error::Shape(format!(
                    "graph_conv weight: expected [{s}, {c}, O], got {other:?}"
                )))
            }
        };
        if let Some(b) = bias {
            expect_shape(self.value(b), &[s, o], "graph_conv bias")?;
        }
        let rows = n * c * t;
        let tj = t * j;
        let xd = self.value(x).data();
        let ad = av.data();
        let mut agg = vec![0.0; s * rows * j];
        for k in 0..s {
            gemm(
                Mat::dense(xd, rows, j),
                Mat::dense(&ad[k * j * j..][..j * j], j, j).t(),
                &mut agg[k * rows * j..],
                0.0,
            );
        }
        let wd = wv.data();
        let mut out = vec![0.0; n * o * tj];
        for nn in 0..n {
            for k in 0..s {
                gemm(
                    Mat::dense(&wd[k * c * o..][..c * o], c, o).t(),
                    Mat::dense(&agg[k * rows * j + nn * c * tj..][..c * tj], c, tj),
                    &mut out[nn * o * tj..],
                    if k == 0 { 0.0 } else { 1.0 },
                );
            }
        }
        if let Some(b) = bias {
            let bd = self.value(b).data();
            let mut bias_map = vec![0.0; o * j];
            for k in 0..s {
                for i in 0..j {
                    let rowsum: f64 = ad[(k * j + i) * j..][..j].iter().sum();
                    for oo in 0..o {
                        bias_map[oo * j + i] += bd[k * o + oo] * rowsum;
                    }
                }
            }
            for nn in 0..n {
                for oo in 0..o {
                    let plane = &mut out[(nn * o + oo) * tj..][..tj];
                    for (idx, v) in plane.iter_mut().enumerate() {
                        *v += bias_map[oo * j + idx % j];
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, o, t, j], out)?;
        let mut parents = vec![x, adj, w];
        parents.extend(bias);
        let op = GraphConvOp { n, c, tj, j, s, o, agg };
        self.record("graph_conv", value, &parents, Box::new(op))
    }

    /// Per-joint 1-D convolution along time with symmetric zero padding of
    /// `kernel / 2`; output length is `ceil(T / stride)`.
    ///
    /// `x: [N, C, T, J]`, `w: [O, C, K]` with odd `K`, `bias: [O]`.
    pub fn temporal_conv(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize) -> Result<Var> {
        let [n, c, t, j] = dims4(self.value(x), "temporal_conv input")?;
        let wv = self.value(w);
        let (o, kernel) = match *wv.shape() {
            [o, wc, k] if wc == c && k % 2 == 1 => (o, k),
            ref other => {
                return Err(Error::Shape(format!(
                    "temporal_conv weight: expected [O, {c}, odd K], got {other:?}"
                )))
            }
        };
        if stride == 0 {
            return Err(Error::Parameter("temporal stride must be >= 1".into()));
        }
        if let Some(b) = bias {
            expect_shape(self.value(b), &[o], "temporal_conv bias")?;
        }
        let t_out = t.div_ceil(stride);
        let plane = t_out * j;
        let ck = c * kernel;
        let xd = self.value(x).data();
        let wd = wv.data();
        let mut col = vec![0.0; ck * plane];
        let mut out = vec![0.0; n * o * plane];
        for nn in 0..n {
            im2col(&xd[nn * c * t * j..], c, t, j, kernel, stride, t_out, &mut col);
            gemm(
                Mat::dense(wd, o, ck),
                Mat::dense(&col, ck, plane),
                &mut out[nn * o * plane..],
                0.0,
            );
        }
        if let Some(b) = bias {
            let bd = self.value(b).data();
            for nn in 0..n {
                for (oo, bv) in bd.iter().enumerate() {
                    out[(nn * o + oo) * plane..][..plane].iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        let value = Tensor::new(vec![n, o, t_out, j], out)?;
        let mut parents = vec![x, w];
        parents.extend(bias);
        let op = TemporalConvOp { dims: [n, c, t, j], o, kernel, stride, t_out };
        self.record("temporal_conv", value, &parents, Box::new(op))
    }

    /// Batch normalization over axis 1 of `x: [N, C, ...]`.
    ///
    /// In train mode the batch statistics normalize the input and the
    /// returned running statistics blend in the batch mean and unbiased
    /// variance with weight `momentum`. In eval mode `stats` is used as is.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &RunningStats,
        train: bool,
        momentum: f64,
        eps: f64,
    ) -> Result<BatchNormOutput> {
        let xv = self.value(x);
        let (n, c) = match *xv.shape() {
            [n, c, ..] => (n, c),
            ref s => return Err(Error::Shape(format!("batch_norm input too small: {s:?}"))),
        };
        let l: usize = xv.shape()[2..].iter().product();
        expect_shape(self.value(gamma), &[c], "batch_norm gamma")?;
        expect_shape(self.value(beta), &[c], "batch_norm beta")?;
        if stats.channels() != c {
            return Err(Error::Shape(format!(
                "batch_norm running stats have {} channels, input has {c}",
                stats.channels()
            )));
        }
        let m = n * l;
        if train && m < 2 {
            return Err(Error::Parameter(format!(
                "batch_norm in train mode needs at least 2 values per channel, got {m}"
            )));
        }
        let xd = xv.data();
        let (mean, var) = if train {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for nn in 0..n {
                for ch in 0..c {
                    mean[ch] += xd[(nn * c + ch) * l..][..l].iter().sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|v| *v /= m as f64);
            for nn in 0..n {
                for ch in 0..c {
                    var[ch] += xd[(nn * c + ch) * l..][..l]
                        .iter()
                        .map(|v| (v - mean[ch]).powi(2))
                        .sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= m as f64);
            (mean, var)
        } else {
            (stats.mean.clone(), stats.var.clone())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for nn in 0..n {
            for ch in 0..c {
                let base = (nn * c + ch) * l;
                for idx in base..base + l {
                    xhat[idx] = (xd[idx] - mean[ch]) * inv_std[ch];
                    out[idx] = gd[ch] * xhat[idx] + bd[ch];
                }
            }
        }
        let updated = train.then(|| {
            let unbias = m as f64 / (m as f64 - 1.0);
            RunningStats {
                mean: stats
                    .mean
                    .iter()
                    .zip(&mean)
                    .map(|(r, b)| (1.0 - momentum) * r + momentum * b)
                    .collect(),
                var: stats
                    .var
                    .iter()
                    .zip(&var)
                    .map(|(r, b)| (1.0 - momentum) * r + momentum * b * unbias)
                    .collect(),
            }
        });
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let op = BatchNormOp { n, c, l, xhat, inv_std, train };
        let output = self.record("batch_norm", value, &[x, gamma, beta], Box::new(op))?;
        Ok(BatchNormOutput { output, updated })
    }

    /// `[A, B, C, D] -> [A, B, D, C]`.
    pub fn swap_last_two(&mut self, x: Var) -> Result<Var> {
        let value = swap_last_two(self.value(x))?;
        self.record("swap_last_two", value, &[x], Box::new(SwapLastOp))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        self.record("reshape", value, &[x], Box::new(ReshapeOp))
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 - p)` in train
    /// mode; eval mode (`rng == None`) and `p == 0` pass `x` through.
    pub fn dropout(&mut self, x: Var, p: f64, rng: Option<&mut SeededRng>) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Parameter(format!("dropout probability {p} outside [0, 1)")));
        }
        let Some(rng) = rng else { return Ok(x) };
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let xv = self.value(x);
        let mask: Vec<f64> = (0..xv.numel())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.record("dropout", value, &[x], Box::new(ScaleMaskOp { mask }))
    }

    /// Mean over every axis after the first two: `[N, C, ...] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (n, c) = match *xv.shape() {
            [n, c, _, ..] => (n, c),
            ref s => return Err(Error::Shape(format!("global_avg_pool input too small: {s:?}"))),
        };
        let l: usize = xv.shape()[2..].iter().product();
        let data = xv.data().chunks(l).map(|ch| ch.iter().sum::<f64>() / l as f64).collect();
        let value = Tensor::new(vec![n, c], data)?;
        self.record("global_avg_pool", value, &[x], Box::new(PoolOp { l }))
    }

    /// `x: [N, C]`, `w: [C, O]`, `b: [O]` to `x w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (n, c, o) = match (xv.shape(), wv.shape()) {
            (&[n, c], &[wc, o]) if wc == c => (n, c, o),
            (a, b) => return Err(Error::Shape(format!("linear: input {a:?} with weight {b:?}"))),
        };
        expect_shape(self.value(b), &[o], "linear bias")?;
        let mut out = vec![0.0; n * o];
        gemm(Mat::dense(xv.data(), n, c), Mat::dense(wv.data(), c, o), &mut out, 0.0);
        for row in out.chunks_mut(o) {
            for (v, bv) in row.iter_mut().zip(self.value(b).data()) {
                *v += bv;
            }
        }
        let value = Tensor::new(vec![n, o], out)?;
        self.record("linear", value, &[x, w, b], Box::new(LinearOp))
    }

    /// Mean softmax cross-entropy of `logits: [N, K]` against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (n, k) = match *lv.shape() {
            [n, k] => (n, k),
            ref s => return Err(Error::Shape(format!("logits must be [N, K], got {s:?}"))),
        };
        if labels.len() != n || n == 0 {
            return Err(Error::Shape(format!("{} labels for {n} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::Parameter(format!("label {bad} out of range for {k} classes")));
        }
        let probs = softmax_rows(lv.data(), k);
        let loss = lv
            .data()
            .chunks(k)
            .zip(labels)
            .map(|(row, &y)| {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
                lse - row[y]
            })
            .sum::<f64>()
            / n as f64;
        let op = CrossEntropyOp { probs, labels: labels.to_vec(), classes: k };
        self.record("softmax_cross_entropy", Tensor::scalar(loss), &[logits], Box::new(op))
    }

    /// Mean squared error of `pred: [N, 1]` (or `[N]`) against targets.
    pub fn mse_loss(&mut self, pred: Var, targets: &[f64]) -> Result<Var> {
        let pv = self.value(pred);
        if pv.numel() != targets.len() || targets.is_empty() {
            return Err(Error::Shape(format!(
                "{} targets for prediction of shape {:?}",
                targets.len(),
                pv.shape()
            )));
        }
        let loss = pv
            .data()
            .iter()
            .zip(targets)
            .map(|(p, t)| (p - t).powi(2))
            .sum::<f64>()
            / targets.len() as f64;
        let op = MseOp { targets: targets.to_vec() };
        self.record("mse_loss", Tensor::scalar(loss), &[pred], Box::new(op))
    }
}

/// Row-wise numerically stabilized softmax of a row-major `[N, K]` buffer.
pub fn softmax_rows(data: &[f64], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(k) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|z| (z - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        out.extend(exps.into_iter().map(|e| e / total));
    }
    out
}
