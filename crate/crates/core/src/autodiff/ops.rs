//! Forward kernels and backward rules for the tape ops.
//!
//! Every backward takes the upstream gradient (flat, in output layout) and
//! returns one gradient buffer per node input, in input order. Iteration
//! order inside each kernel is fixed, so repeated backward passes over the
//! same graph are bit-identical.

use std::fmt;
use std::rc::Rc;

use super::{CustomOp, Storage};

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major stride of dimension `d` in `shape`.
fn stride(shape: &[usize], d: usize) -> usize {
    shape[d + 1..].iter().product()
}

pub(crate) enum NodeOp {
    Leaf,
    Add { a_len: usize, b_len: usize },
    Sub { a_len: usize, b_len: usize },
    Mul { a: Rc<Storage>, b: Rc<Storage> },
    Div { a: Rc<Storage>, b: Rc<Storage> },
    Matmul { a: Rc<Storage>, b: Rc<Storage> },
    Tanh { y: Rc<Storage> },
    Relu { x: Rc<Storage> },
    Sigmoid { y: Rc<Storage> },
    Exp { y: Rc<Storage> },
    Log { x: Rc<Storage> },
    /// sum/mean over one axis, or over everything when `axis` is None.
    Reduce { x_shape: Vec<usize>, axis: Option<usize>, mean: bool },
    L2Norm { x: Rc<Storage>, y: Rc<Storage>, rows: bool },
    L1Norm { x: Rc<Storage>, rows: bool },
    Softmax { y: Rc<Storage> },
    Concat { widths: Vec<usize>, lead: usize },
    IndexRows { x_rows: usize, inner: usize, idx: Rc<Vec<usize>> },
    BilinearGather { grid: Rc<Storage>, coords: Rc<Storage> },
    Broadcast { in_shape: Vec<usize>, out_shape: Vec<usize> },
    Reshape,
    AvgPool2 { x_shape: Vec<usize> },
    Custom(Box<dyn CustomOp>),
}

impl NodeOp {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            NodeOp::Leaf => "leaf",
            NodeOp::Add { .. } => "add",
            NodeOp::Sub { .. } => "sub",
            NodeOp::Mul { .. } => "mul",
            NodeOp::Div { .. } => "div",
            NodeOp::Matmul { .. } => "matmul",
            NodeOp::Tanh { .. } => "tanh",
            NodeOp::Relu { .. } => "relu",
            NodeOp::Sigmoid { .. } => "sigmoid",
            NodeOp::Exp { .. } => "exp",
            NodeOp::Log { .. } => "log",
            NodeOp::Reduce { mean: false, .. } => "sum",
            NodeOp::Reduce { mean: true, .. } => "mean",
            NodeOp::L2Norm { .. } => "l2norm",
            NodeOp::L1Norm { .. } => "l1norm",
            NodeOp::Softmax { .. } => "softmax",
            NodeOp::Concat { .. } => "concat",
            NodeOp::IndexRows { .. } => "index",
            NodeOp::BilinearGather { .. } => "bilinear_gather",
            NodeOp::Broadcast { .. } => "broadcast",
            NodeOp::Reshape => "reshape",
            NodeOp::AvgPool2 { .. } => "avg_pool2",
            NodeOp::Custom(op) => op.name(),
        }
    }
}

impl fmt::Debug for NodeOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl NodeOp {
    /// One gradient buffer per node input, in input order.
    pub(crate) fn backward(&self, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        match self {
            NodeOp::Leaf => vec![],
            NodeOp::Add { a_len, b_len } => vec![
                Some(reduce_if_scalar(g, *a_len, |gj| gj)),
                Some(reduce_if_scalar(g, *b_len, |gj| gj)),
            ],
            NodeOp::Sub { a_len, b_len } => vec![
                Some(reduce_if_scalar(g, *a_len, |gj| gj)),
                Some(reduce_if_scalar2(g, *b_len, |gj| -gj)),
            ],
            NodeOp::Mul { a, b } => vec![
                Some(bin_back(g, a.data.len(), |j| g[j] * pick(&b.data, j))),
                Some(bin_back(g, b.data.len(), |j| g[j] * pick(&a.data, j))),
            ],
            NodeOp::Div { a, b } => vec![
                Some(bin_back(g, a.data.len(), |j| g[j] / pick(&b.data, j))),
                Some(bin_back(g, b.data.len(), |j| {
                    let bj = pick(&b.data, j);
                    -g[j] * pick(&a.data, j) / (bj * bj)
                })),
            ],
            NodeOp::Matmul { a, b } => backward_matmul(a, b, g),
            NodeOp::Tanh { y } => vec![Some(
                y.data.iter().zip(g).map(|(y, g)| g * (1.0 - y * y)).collect(),
            )],
            NodeOp::Relu { x } => vec![Some(
                x.data
                    .iter()
                    .zip(g)
                    .map(|(x, g)| if *x > 0.0 { *g } else { 0.0 })
                    .collect(),
            )],
            NodeOp::Sigmoid { y } => vec![Some(
                y.data.iter().zip(g).map(|(y, g)| g * y * (1.0 - y)).collect(),
            )],
            NodeOp::Exp { y } => {
                vec![Some(y.data.iter().zip(g).map(|(y, g)| g * y).collect())]
            }
            NodeOp::Log { x } => {
                vec![Some(x.data.iter().zip(g).map(|(x, g)| g / x).collect())]
            }
            NodeOp::Reduce { x_shape, axis, mean } => {
                vec![Some(backward_reduce(x_shape, *axis, *mean, g))]
            }
            NodeOp::L2Norm { x, y, rows } => vec![Some(backward_l2(x, y, *rows, g))],
            NodeOp::L1Norm { x, rows } => vec![Some(backward_l1(x, *rows, g))],
            NodeOp::Softmax { y } => vec![Some(backward_softmax(y, g))],
            NodeOp::Concat { widths, lead } => backward_concat(widths, *lead, g),
            NodeOp::IndexRows { x_rows, inner, idx } => {
                let mut dx = vec![0.0; x_rows * inner];
                for (r, &i) in idx.iter().enumerate() {
                    for k in 0..*inner {
                        dx[i * inner + k] += g[r * inner + k];
                    }
                }
                vec![Some(dx)]
            }
            NodeOp::BilinearGather { grid, coords } => backward_bilinear(grid, coords, g),
            NodeOp::Broadcast { in_shape, out_shape } => {
                let strides = broadcast_strides(in_shape, out_shape);
                let mut dx = vec![0.0; numel(in_shape)];
                for_each_broadcast(out_shape, &strides, |out_i, in_i| dx[in_i] += g[out_i]);
                vec![Some(dx)]
            }
            NodeOp::Reshape => vec![Some(g.to_vec())],
            NodeOp::AvgPool2 { x_shape } => vec![Some(backward_avg_pool2(x_shape, g))],
            NodeOp::Custom(op) => op.backward(g),
        }
    }
}

fn pick(v: &[f64], j: usize) -> f64 {
    if v.len() == 1 { v[0] } else { v[j] }
}

/// Gradient for one side of a broadcasting binary op: if that side is a
/// scalar the elementwise contributions collapse into a single sum.
fn bin_back(g: &[f64], side_len: usize, f: impl Fn(usize) -> f64) -> Vec<f64> {
    if side_len == 1 && g.len() > 1 {
        vec![(0..g.len()).map(f).sum()]
    } else {
        (0..g.len()).map(f).collect()
    }
}

fn reduce_if_scalar(g: &[f64], side_len: usize, f: impl Fn(f64) -> f64) -> Vec<f64> {
    if side_len == 1 && g.len() > 1 {
        vec![g.iter().map(|&v| f(v)).sum()]
    } else {
        g.iter().map(|&v| f(v)).collect()
    }
}

// Same as reduce_if_scalar; separate name keeps the call sites monomorphic.
fn reduce_if_scalar2(g: &[f64], side_len: usize, f: impl Fn(f64) -> f64) -> Vec<f64> {
    reduce_if_scalar(g, side_len, f)
}

fn backward_matmul(a: &Storage, b: &Storage, g: &[f64]) -> Vec<Option<Vec<f64>>> {
    let (m, k) = (a.shape[0], a.shape[1]);
    let n = b.shape[1];
    let mut da = vec![0.0; m * k];
    for i in 0..m {
        for p in 0..k {
            let mut acc = 0.0;
            for j in 0..n {
                acc += g[i * n + j] * b.data[p * n + j];
            }
            da[i * k + p] = acc;
        }
    }
    let mut db = vec![0.0; k * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a.data[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for j in 0..n {
                db[p * n + j] += aip * g[i * n + j];
            }
        }
    }
    vec![Some(da), Some(db)]
}

/// (outer, axis extent, inner) decomposition of a single-axis reduction.
fn reduce_dims(x_shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = x_shape[..axis].iter().product();
    let mid = x_shape[axis];
    let inner: usize = x_shape[axis + 1..].iter().product();
    (outer, mid, inner)
}

pub(crate) fn forward_reduce(
    x: &[f64],
    x_shape: &[usize],
    axis: Option<usize>,
    mean: bool,
) -> (Vec<f64>, Vec<usize>) {
    match axis {
        None => {
            let mut acc = 0.0;
            for &v in x {
                acc += v;
            }
            if mean {
                acc /= x.len().max(1) as f64;
            }
            (vec![acc], vec![])
        }
        Some(ax) => {
            let (outer, mid, inner) = reduce_dims(x_shape, ax);
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for m in 0..mid {
                    let base = (o * mid + m) * inner;
                    for i in 0..inner {
                        out[o * inner + i] += x[base + i];
                    }
                }
            }
            if mean {
                let s = 1.0 / mid as f64;
                for v in &mut out {
                    *v *= s;
                }
            }
            let mut shape = x_shape.to_vec();
            shape.remove(ax);
            (out, shape)
        }
    }
}

fn backward_reduce(x_shape: &[usize], axis: Option<usize>, mean: bool, g: &[f64]) -> Vec<f64> {
    let len = numel(x_shape);
    match axis {
        None => {
            let v = if mean { g[0] / len.max(1) as f64 } else { g[0] };
            vec![v; len]
        }
        Some(ax) => {
            let (outer, mid, inner) = reduce_dims(x_shape, ax);
            let s = if mean { 1.0 / mid as f64 } else { 1.0 };
            let mut dx = vec![0.0; len];
            for o in 0..outer {
                for m in 0..mid {
                    let base = (o * mid + m) * inner;
                    for i in 0..inner {
                        dx[base + i] = g[o * inner + i] * s;
                    }
                }
            }
            dx
        }
    }
}

pub(crate) fn forward_l2(x: &[f64], x_shape: &[usize], rows: bool) -> (Vec<f64>, Vec<usize>) {
    if rows {
        let w = *x_shape.last().unwrap();
        let n = x.len() / w;
        let mut out = vec![0.0; n];
        for r in 0..n {
            let mut acc = 0.0;
            for &v in &x[r * w..(r + 1) * w] {
                acc += v * v;
            }
            out[r] = acc.sqrt();
        }
        (out, x_shape[..x_shape.len() - 1].to_vec())
    } else {
        let mut acc = 0.0;
        for &v in x {
            acc += v * v;
        }
        (vec![acc.sqrt()], vec![])
    }
}

fn backward_l2(x: &Storage, y: &Storage, rows: bool, g: &[f64]) -> Vec<f64> {
    let mut dx = vec![0.0; x.data.len()];
    if rows {
        let w = *x.shape.last().unwrap();
        for r in 0..y.data.len() {
            let scale = g[r] / y.data[r].max(1e-12);
            for c in 0..w {
                dx[r * w + c] = x.data[r * w + c] * scale;
            }
        }
    } else {
        let scale = g[0] / y.data[0].max(1e-12);
        for (d, &v) in dx.iter_mut().zip(&x.data) {
            *d = v * scale;
        }
    }
    dx
}

pub(crate) fn forward_l1(x: &[f64], x_shape: &[usize], rows: bool) -> (Vec<f64>, Vec<usize>) {
    if rows {
        let w = *x_shape.last().unwrap();
        let n = x.len() / w;
        let mut out = vec![0.0; n];
        for r in 0..n {
            out[r] = x[r * w..(r + 1) * w].iter().map(|v| v.abs()).sum();
        }
        (out, x_shape[..x_shape.len() - 1].to_vec())
    } else {
        (vec![x.iter().map(|v| v.abs()).sum()], vec![])
    }
}

fn backward_l1(x: &Storage, rows: bool, g: &[f64]) -> Vec<f64> {
    // signum with sign(0) = 0, the usual subgradient choice.
    let sgn = |v: f64| {
        if v > 0.0 {
            1.0
        } else if v < 0.0 {
            -1.0
        } else {
            0.0
        }
    };
    if rows {
        let w = *x.shape.last().unwrap();
        x.data
            .iter()
            .enumerate()
            .map(|(i, &v)| g[i / w] * sgn(v))
            .collect()
    } else {
        x.data.iter().map(|&v| g[0] * sgn(v)).collect()
    }
}

pub(crate) fn forward_softmax(x: &[f64], x_shape: &[usize]) -> Vec<f64> {
    let w = *x_shape.last().unwrap();
    let n = x.len() / w;
    let mut out = vec![0.0; x.len()];
    for r in 0..n {
        let row = &x[r * w..(r + 1) * w];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (c, &v) in row.iter().enumerate() {
            let e = (v - m).exp();
            out[r * w + c] = e;
            z += e;
        }
        for c in 0..w {
            out[r * w + c] /= z;
        }
    }
    out
}

fn backward_softmax(y: &Storage, g: &[f64]) -> Vec<f64> {
    let w = *y.shape.last().unwrap();
    let n = y.data.len() / w;
    let mut dx = vec![0.0; y.data.len()];
    for r in 0..n {
        let base = r * w;
        let mut dot = 0.0;
        for c in 0..w {
            dot += g[base + c] * y.data[base + c];
        }
        for c in 0..w {
            dx[base + c] = y.data[base + c] * (g[base + c] - dot);
        }
    }
    dx
}

fn backward_concat(widths: &[usize], lead: usize, g: &[f64]) -> Vec<Option<Vec<f64>>> {
    let total: usize = widths.iter().sum();
    let mut out: Vec<Option<Vec<f64>>> =
        widths.iter().map(|w| Some(vec![0.0; lead * w])).collect();
    for r in 0..lead {
        let mut off = 0;
        for (p, &w) in widths.iter().enumerate() {
            let dst = out[p].as_mut().unwrap();
            dst[r * w..(r + 1) * w].copy_from_slice(&g[r * total + off..r * total + off + w]);
            off += w;
        }
    }
    out
}

/// Bilinear corner weights for one query point, pixel-center convention:
/// sample (row i, col j) of the grid lives at continuous point (j+0.5, i+0.5).
/// Returns (x0, y0, fx, fy, dfx, dfy) where dfx/dfy are 0 when the query was
/// clamped to the border along that axis.
pub(crate) fn bilinear_cell(
    x: f64,
    y: f64,
    h: usize,
    w: usize,
) -> (usize, usize, f64, f64, f64, f64) {
    let gx_raw = x - 0.5;
    let gy_raw = y - 0.5;
    let max_x = (w - 1) as f64;
    let max_y = (h - 1) as f64;
    let gx = gx_raw.clamp(0.0, max_x);
    let gy = gy_raw.clamp(0.0, max_y);
    let x0 = (gx.floor() as usize).min(w - 2);
    let y0 = (gy.floor() as usize).min(h - 2);
    let fx = gx - x0 as f64;
    let fy = gy - y0 as f64;
    let dfx = if (0.0..=max_x).contains(&gx_raw) { 1.0 } else { 0.0 };
    let dfy = if (0.0..=max_y).contains(&gy_raw) { 1.0 } else { 0.0 };
    (x0, y0, fx, fy, dfx, dfy)
}

pub(crate) fn forward_bilinear(grid: &Storage, coords: &Storage) -> (Vec<f64>, Vec<usize>) {
    let (h, w) = (grid.shape[0], grid.shape[1]);
    let c = if grid.shape.len() == 3 { grid.shape[2] } else { 1 };
    let n = coords.shape[0];
    let mut out = vec![0.0; n * c];
    for i in 0..n {
        let (x0, y0, fx, fy, _, _) = bilinear_cell(coords.data[2 * i], coords.data[2 * i + 1], h, w);
        for ch in 0..c {
            let at = |r: usize, col: usize| grid.data[(r * w + col) * c + ch];
            out[i * c + ch] = (1.0 - fx) * (1.0 - fy) * at(y0, x0)
                + fx * (1.0 - fy) * at(y0, x0 + 1)
                + (1.0 - fx) * fy * at(y0 + 1, x0)
                + fx * fy * at(y0 + 1, x0 + 1);
        }
    }
    let shape = if grid.shape.len() == 3 { vec![n, c] } else { vec![n] };
    (out, shape)
}

fn backward_bilinear(grid: &Storage, coords: &Storage, g: &[f64]) -> Vec<Option<Vec<f64>>> {
    let (h, w) = (grid.shape[0], grid.shape[1]);
    let c = if grid.shape.len() == 3 { grid.shape[2] } else { 1 };
    let n = coords.shape[0];
    let mut dgrid = vec![0.0; grid.data.len()];
    let mut dcoords = vec![0.0; 2 * n];
    for i in 0..n {
        let (x0, y0, fx, fy, dfx, dfy) =
            bilinear_cell(coords.data[2 * i], coords.data[2 * i + 1], h, w);
        for ch in 0..c {
            let gv = g[i * c + ch];
            if gv == 0.0 {
                continue;
            }
            let at = |r: usize, col: usize| grid.data[(r * w + col) * c + ch];
            let idx = |r: usize, col: usize| (r * w + col) * c + ch;
            dgrid[idx(y0, x0)] += gv * (1.0 - fx) * (1.0 - fy);
            dgrid[idx(y0, x0 + 1)] += gv * fx * (1.0 - fy);
            dgrid[idx(y0 + 1, x0)] += gv * (1.0 - fx) * fy;
            dgrid[idx(y0 + 1, x0 + 1)] += gv * fx * fy;
            let dv_dfx = (1.0 - fy) * (at(y0, x0 + 1) - at(y0, x0))
                + fy * (at(y0 + 1, x0 + 1) - at(y0 + 1, x0));
            let dv_dfy = (1.0 - fx) * (at(y0 + 1, x0) - at(y0, x0))
                + fx * (at(y0 + 1, x0 + 1) - at(y0, x0 + 1));
            dcoords[2 * i] += gv * dv_dfx * dfx;
            dcoords[2 * i + 1] += gv * dv_dfy * dfy;
        }
    }
    vec![Some(dgrid), Some(dcoords)]
}

/// Per-output-dimension stride into the (right-aligned) input of a broadcast.
pub(crate) fn broadcast_strides(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let off = out_shape.len() - in_shape.len();
    (0..out_shape.len())
        .map(|k| {
            if k < off || in_shape[k - off] == 1 {
                0
            } else {
                stride(in_shape, k - off)
            }
        })
        .collect()
}

pub(crate) fn for_each_broadcast(
    out_shape: &[usize],
    strides: &[usize],
    mut f: impl FnMut(usize, usize),
) {
    let total = numel(out_shape);
    let r = out_shape.len();
    if r == 0 {
        f(0, 0);
        return;
    }
    let mut idx = vec![0usize; r];
    let mut in_flat = 0usize;
    for out_flat in 0..total {
        f(out_flat, in_flat);
        for d in (0..r).rev() {
            idx[d] += 1;
            in_flat += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            in_flat -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

pub(crate) fn forward_avg_pool2(x: &[f64], x_shape: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let (h, w, c) = (x_shape[0], x_shape[1], x_shape[2]);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; oh * ow * c];
    for r in 0..oh {
        for col in 0..ow {
            for ch in 0..c {
                let at = |i: usize, j: usize| x[(i * w + j) * c + ch];
                out[(r * ow + col) * c + ch] = 0.25
                    * (at(2 * r, 2 * col)
                        + at(2 * r, 2 * col + 1)
                        + at(2 * r + 1, 2 * col)
                        + at(2 * r + 1, 2 * col + 1));
            }
        }
    }
    (out, vec![oh, ow, c])
}

fn backward_avg_pool2(x_shape: &[usize], g: &[f64]) -> Vec<f64> {
    let (h, w, c) = (x_shape[0], x_shape[1], x_shape[2]);
    let (oh, ow) = (h / 2, w / 2);
    let mut dx = vec![0.0; h * w * c];
    for r in 0..oh {
        for col in 0..ow {
            for ch in 0..c {
                let gv = 0.25 * g[(r * ow + col) * c + ch];
                dx[((2 * r) * w + 2 * col) * c + ch] += gv;
                dx[((2 * r) * w + 2 * col + 1) * c + ch] += gv;
                dx[((2 * r + 1) * w + 2 * col) * c + ch] += gv;
                dx[((2 * r + 1) * w + 2 * col + 1) * c + ch] += gv;
            }
        }
    }
    dx
}
