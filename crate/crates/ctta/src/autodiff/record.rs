//! Tape internals: operation records and the reverse sweep.

use crate::error::Result;

use super::{column_stats, DiffTensor, LOG_FLOOR, STANDARDIZE_EPSILON};

/// Snapshot of one op input: its tape identity (if any) plus the values the
/// operation saw. Backward rules read values from here, so later mutation of
/// parameter stores cannot corrupt gradients.
#[derive(Debug)]
pub(crate) struct Src {
    pub node: Option<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul { a: Src, b: Src, m: usize, k: usize, n: usize },
    Add { a: Src, b: Src },
    Sub { a: Src, b: Src },
    Mul { a: Src, b: Src },
    Div { a: Src, b: Src },
    AddRow { x: Src, v: Src, rows: usize, cols: usize },
    Relu { x: Src },
    Abs { x: Src },
    SoftmaxRows { x: Src, rows: usize, cols: usize },
    LnClamped { x: Src },
    MeanAxis { x: Src, rows: usize, cols: usize, axis: usize },
    SumAll { x: Src },
    L2Norm { x: Src },
    RowL2Norms { x: Src, rows: usize, cols: usize },
    Dot { a: Src, b: Src },
    Scale { x: Src, c: f64 },
    Standardize { x: Src, rows: usize, cols: usize },
}

#[derive(Debug)]
pub(crate) struct Node {
    pub op: Op,
    /// Output values, saved for rules that reuse them (softmax, norms).
    pub out: Vec<f64>,
}

/// Gradient buffers keyed by tape node, produced by [`super::Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `t`, or `None` when `t` is a
    /// constant or no gradient reached it.
    pub fn get<'a>(&'a self, t: &DiffTensor) -> Option<&'a [f64]> {
        t.node.and_then(|n| self.grads.get(n)).and_then(|g| g.as_deref())
    }

    /// Like [`Gradients::get`] but materializing zeros for missing entries.
    pub fn get_or_zeros(&self, t: &DiffTensor) -> Vec<f64> {
        match self.get(t) {
            Some(g) => g.to_vec(),
            None => vec![0.0; t.numel()],
        }
    }
}

struct Accum {
    grads: Vec<Option<Vec<f64>>>,
    sizes: Vec<usize>,
}

impl Accum {
    fn add(&mut self, src: &Src, contribution: impl Iterator<Item = f64>) {
        let Some(node) = src.node else { return };
        let slot = &mut self.grads[node];
        match slot {
            Some(buf) => {
                for (b, c) in buf.iter_mut().zip(contribution) {
                    *b += c;
                }
            }
            None => {
                let mut buf = vec![0.0; self.sizes[node]];
                for (b, c) in buf.iter_mut().zip(contribution) {
                    *b = c;
                }
                *slot = Some(buf);
            }
        }
    }
}

pub(crate) fn backward(nodes: &[Node], loss: usize) -> Result<Gradients> {
    let mut acc = Accum {
        grads: nodes.iter().map(|_| None).collect(),
        sizes: nodes.iter().map(|n| n.out.len()).collect(),
    };
    acc.grads[loss] = Some(vec![1.0]);

    for idx in (0..=loss).rev() {
        let Some(grad) = acc.grads[idx].take() else { continue };
        propagate(&nodes[idx], &grad, &mut acc);
        acc.grads[idx] = Some(grad);
    }
    Ok(Gradients { grads: acc.grads })
}

fn propagate(node: &Node, dy: &[f64], acc: &mut Accum) {
    match &node.op {
        Op::Leaf => {}

        Op::MatMul { a, b, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            if a.node.is_some() {
                // dA = dY * B^T
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for j in 0..n {
                        let d = dy[i * n + j];
                        if d == 0.0 {
                            continue;
                        }
                        for p in 0..k {
                            da[i * k + p] += d * b.values[p * n + j];
                        }
                    }
                }
                acc.add(a, da.into_iter());
            }
            if b.node.is_some() {
                // dB = A^T * dY
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let av = a.values[i * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            db[p * n + j] += av * dy[i * n + j];
                        }
                    }
                }
                acc.add(b, db.into_iter());
            }
        }

        Op::Add { a, b } => {
            acc.add(a, dy.iter().copied());
            acc.add(b, dy.iter().copied());
        }

        Op::Sub { a, b } => {
            acc.add(a, dy.iter().copied());
            acc.add(b, dy.iter().map(|d| -d));
        }

        Op::Mul { a, b } => {
            acc.add(a, dy.iter().zip(&b.values).map(|(d, v)| d * v));
            acc.add(b, dy.iter().zip(&a.values).map(|(d, v)| d * v));
        }

        Op::Div { a, b } => {
            acc.add(a, dy.iter().zip(&b.values).map(|(d, v)| d / v));
            acc.add(
                b,
                dy.iter()
                    .zip(a.values.iter().zip(&b.values))
                    .map(|(d, (x, v))| -d * x / (v * v)),
            );
        }

        Op::AddRow { x, v, rows, cols } => {
            acc.add(x, dy.iter().copied());
            if v.node.is_some() {
                let mut dv = vec![0.0; *cols];
                for i in 0..*rows {
                    for j in 0..*cols {
                        dv[j] += dy[i * cols + j];
                    }
                }
                acc.add(v, dv.into_iter());
            }
        }

        Op::Relu { x } => {
            acc.add(
                x,
                dy.iter().zip(&x.values).map(|(d, v)| if *v > 0.0 { *d } else { 0.0 }),
            );
        }

        Op::Abs { x } => {
            acc.add(
                x,
                dy.iter().zip(&x.values).map(|(d, v)| match v.partial_cmp(&0.0) {
                    Some(std::cmp::Ordering::Greater) => *d,
                    Some(std::cmp::Ordering::Less) => -*d,
                    _ => 0.0,
                }),
            );
        }

        Op::SoftmaxRows { x, rows, cols } => {
            if x.node.is_some() {
                let y = &node.out;
                let mut dx = vec![0.0; rows * cols];
                for r in 0..*rows {
                    let base = r * cols;
                    let mut inner = 0.0;
                    for j in 0..*cols {
                        inner += dy[base + j] * y[base + j];
                    }
                    for j in 0..*cols {
                        dx[base + j] = y[base + j] * (dy[base + j] - inner);
                    }
                }
                acc.add(x, dx.into_iter());
            }
        }

        Op::LnClamped { x } => {
            acc.add(
                x,
                dy.iter()
                    .zip(&x.values)
                    .map(|(d, v)| if *v >= LOG_FLOOR { d / v } else { 0.0 }),
            );
        }

        Op::MeanAxis { x, rows, cols, axis } => {
            if x.node.is_some() {
                let (rows, cols) = (*rows, *cols);
                let mut dx = vec![0.0; rows * cols];
                if *axis == 0 {
                    for i in 0..rows {
                        for j in 0..cols {
                            dx[i * cols + j] = dy[j] / rows as f64;
                        }
                    }
                } else {
                    for i in 0..rows {
                        for j in 0..cols {
                            dx[i * cols + j] = dy[i] / cols as f64;
                        }
                    }
                }
                acc.add(x, dx.into_iter());
            }
        }

        Op::SumAll { x } => {
            let d = dy[0];
            acc.add(x, x.values.iter().map(|_| d));
        }

        Op::L2Norm { x } => {
            let norm = node.out[0];
            let d = dy[0];
            if norm > 0.0 {
                acc.add(x, x.values.iter().map(|v| d * v / norm));
            } else {
                acc.add(x, x.values.iter().map(|_| 0.0));
            }
        }

        Op::RowL2Norms { x, rows, cols } => {
            if x.node.is_some() {
                let mut dx = vec![0.0; rows * cols];
                for r in 0..*rows {
                    let norm = node.out[r];
                    if norm > 0.0 {
                        for j in 0..*cols {
                            dx[r * cols + j] = dy[r] * x.values[r * cols + j] / norm;
                        }
                    }
                }
                acc.add(x, dx.into_iter());
            }
        }

        Op::Dot { a, b } => {
            let d = dy[0];
            acc.add(a, b.values.iter().map(|v| d * v));
            acc.add(b, a.values.iter().map(|v| d * v));
        }

        Op::Scale { x, c } => {
            acc.add(x, dy.iter().map(|d| d * c));
        }

        Op::Standardize { x, rows, cols } => {
            if x.node.is_some() {
                let (r, c) = (*rows, *cols);
                let stats = column_stats(&x.values, r, c);
                let mut dx = vec![0.0; r * c];
                for j in 0..c {
                    let sigma = stats.std[j];
                    let denom = sigma + STANDARDIZE_EPSILON;
                    let mut dy_mean = 0.0;
                    let mut dy_dot_centered = 0.0;
                    for i in 0..r {
                        dy_mean += dy[i * c + j];
                        dy_dot_centered += dy[i * c + j] * (x.values[i * c + j] - stats.mean[j]);
                    }
                    dy_mean /= r as f64;
                    for i in 0..r {
                        let centered = x.values[i * c + j] - stats.mean[j];
                        let mut g = (dy[i * c + j] - dy_mean) / denom;
                        if sigma > 0.0 {
                            g -= centered * dy_dot_centered / (denom * denom * sigma * r as f64);
                        }
                        dx[i * c + j] = g;
                    }
                }
                acc.add(x, dx.into_iter());
            }
        }
    }
}
