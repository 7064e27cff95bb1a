//! Independent oracles for the integration suites. Everything here is
//! deliberately separate from the library's linear-algebra paths: plain
//! nested-Vec arithmetic, Gauss-Jordan inversion, a hand-rolled AdamW, and
//! central finite differences.

#![allow(dead_code)]

use gora::adapter::AdapterSet;
use gora::net::{Batch, Network};
use gora::numerics::Matrix;

pub type Grid = Vec<Vec<f64>>;

pub fn to_grid(m: &Matrix) -> Grid {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

pub fn from_grid(g: &Grid) -> Matrix {
    let rows: Vec<&[f64]> = g.iter().map(|r| r.as_slice()).collect();
    Matrix::from_rows(&rows)
}

pub fn gmul(a: &Grid, b: &Grid) -> Grid {
    let (m, k, n) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; n]; m];
    for i in 0..m {
        for t in 0..k {
            for j in 0..n {
                out[i][j] += a[i][t] * b[t][j];
            }
        }
    }
    out
}

pub fn gtranspose(a: &Grid) -> Grid {
    let (m, n) = (a.len(), a[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..m {
        for j in 0..n {
            out[j][i] = a[i][j];
        }
    }
    out
}

/// Gauss-Jordan inverse with partial pivoting.
pub fn ginverse(a: &Grid) -> Grid {
    let n = a.len();
    let mut aug: Grid = a
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut r = row.clone();
            r.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            r
        })
        .collect();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| aug[i][col].abs().partial_cmp(&aug[j][col].abs()).unwrap())
            .unwrap();
        assert!(aug[pivot][col].abs() > 1e-300, "singular matrix in oracle");
        aug.swap(col, pivot);
        let p = aug[col][col];
        for v in &mut aug[col] {
            *v /= p;
        }
        for row in 0..n {
            if row != col {
                let factor = aug[row][col];
                for j in 0..2 * n {
                    aug[row][j] -= factor * aug[col][j];
                }
            }
        }
    }
    aug.into_iter().map(|row| row[n..].to_vec()).collect()
}

/// Projector onto col(A) computed entirely through the oracle path:
/// P = A (A^T A)^-1 A^T with a Gauss-Jordan inverse.
pub fn projector_oracle(a: &Matrix) -> Matrix {
    let ag = to_grid(a);
    let at = gtranspose(&ag);
    let gram = gmul(&at, &ag);
    let inv = ginverse(&gram);
    from_grid(&gmul(&gmul(&ag, &inv), &at))
}

/// Solve the dense system M x = b by Gaussian elimination (partial pivot).
pub fn gsolve(m: &Grid, b: &Grid) -> Grid {
    let inv = ginverse(m);
    gmul(&inv, b)
}

pub fn frob(m: &Matrix) -> f64 {
    m.frobenius()
}

pub fn rel_diff(a: &Matrix, b: &Matrix) -> f64 {
    a.sub(b).unwrap().frobenius() / b.frobenius().max(1e-300)
}

/// Central finite differences of the batch loss w.r.t. every base-weight
/// entry of one layer.
pub fn fd_weight_grad(net: &Network, adapters: &AdapterSet, batch: &Batch, layer: usize) -> Matrix {
    let eps = 1e-5;
    let mut net = net.clone();
    let (rows, cols) = net.layers[layer].weight.shape();
    let mut grad = Matrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            let orig = net.layers[layer].weight[(i, j)];
            net.layers[layer].weight[(i, j)] = orig + eps;
            let up = net.forward_loss(adapters, batch).unwrap();
            net.layers[layer].weight[(i, j)] = orig - eps;
            let down = net.forward_loss(adapters, batch).unwrap();
            net.layers[layer].weight[(i, j)] = orig;
            grad[(i, j)] = (up - down) / (2.0 * eps);
        }
    }
    grad
}

/// Central finite differences w.r.t. the adapter factors of one layer.
/// Returns (dL/dA, dL/dB).
pub fn fd_adapter_grads(
    net: &Network,
    adapters: &AdapterSet,
    batch: &Batch,
    layer: usize,
) -> (Matrix, Matrix) {
    let eps = 1e-5;
    let mut adapters = adapters.clone();
    let (ar, ac) = adapters[&layer].a.shape();
    let (br, bc) = adapters[&layer].b.shape();
    let mut ga = Matrix::zeros(ar, ac);
    for i in 0..ar {
        for j in 0..ac {
            let orig = adapters[&layer].a[(i, j)];
            adapters.get_mut(&layer).unwrap().a[(i, j)] = orig + eps;
            let up = net.forward_loss(&adapters, batch).unwrap();
            adapters.get_mut(&layer).unwrap().a[(i, j)] = orig - eps;
            let down = net.forward_loss(&adapters, batch).unwrap();
            adapters.get_mut(&layer).unwrap().a[(i, j)] = orig;
            ga[(i, j)] = (up - down) / (2.0 * eps);
        }
    }
    let mut gb = Matrix::zeros(br, bc);
    for i in 0..br {
        for j in 0..bc {
            let orig = adapters[&layer].b[(i, j)];
            adapters.get_mut(&layer).unwrap().b[(i, j)] = orig + eps;
            let up = net.forward_loss(&adapters, batch).unwrap();
            adapters.get_mut(&layer).unwrap().b[(i, j)] = orig - eps;
            let down = net.forward_loss(&adapters, batch).unwrap();
            adapters.get_mut(&layer).unwrap().b[(i, j)] = orig;
            gb[(i, j)] = (up - down) / (2.0 * eps);
        }
    }
    (ga, gb)
}

/// Reference AdamW over a flat parameter vector, written independently of
/// the library's optimizer.
pub struct ReferenceAdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl ReferenceAdamW {
    pub fn new(dim: usize, lr: f64, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        ReferenceAdamW { lr, beta1, beta2, eps, weight_decay, m: vec![0.0; dim], v: vec![0.0; dim], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * params[i]);
        }
    }
}

/// Plain logistic-regression fit by gradient descent; returns training
/// accuracy. Independent of the library's network machinery.
pub fn logistic_regression_accuracy(
    inputs: &[Vec<f64>],
    labels: &[usize],
    classes: usize,
    iterations: usize,
    lr: f64,
) -> f64 {
    let dims = inputs[0].len();
    let n = inputs.len() as f64;
    let mut w = vec![vec![0.0; classes]; dims];
    let mut bias = vec![0.0; classes];
    for _ in 0..iterations {
        let mut gw = vec![vec![0.0; classes]; dims];
        let mut gb = vec![0.0; classes];
        for (x, &y) in inputs.iter().zip(labels) {
            let mut logits = bias.clone();
            for d in 0..dims {
                for c in 0..classes {
                    logits[c] += x[d] * w[d][c];
                }
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            for c in 0..classes {
                let p = (logits[c] - max).exp() / z;
                let delta = (p - if c == y { 1.0 } else { 0.0 }) / n;
                for d in 0..dims {
                    gw[d][c] += x[d] * delta;
                }
                gb[c] += delta;
            }
        }
        for d in 0..dims {
            for c in 0..classes {
                w[d][c] -= lr * gw[d][c];
            }
        }
        for c in 0..classes {
            bias[c] -= lr * gb[c];
        }
    }
    let mut correct = 0usize;
    for (x, &y) in inputs.iter().zip(labels) {
        let mut logits = bias.clone();
        for d in 0..dims {
            for c in 0..classes {
                logits[c] += x[d] * w[d][c];
            }
        }
        let best = (0..classes).max_by(|&a, &b| logits[a].partial_cmp(&logits[b]).unwrap()).unwrap();
        if best == y {
            correct += 1;
        }
    }
    correct as f64 / inputs.len() as f64
}

/// Read one of the bundled configs from the workspace configs/ directory.
pub fn bundled_config(name: &str) -> String {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name);
    std::fs::read_to_string(&path)
        .unwrap_or_else(|e| panic!("cannot read bundled config {}: {e}", path.display()))
}

/// Replace (or append) a `key = value` line in a config text.
pub fn with_field(config: &str, key: &str, value: &str) -> String {
    let mut out = String::new();
    let mut replaced = false;
    for line in config.lines() {
        let is_key = line
            .split('#')
            .next()
            .and_then(|l| l.split_once('='))
            .map(|(k, _)| k.trim() == key)
            .unwrap_or(false);
        if is_key {
            out.push_str(&format!("{key} = {value}\n"));
            replaced = true;
        } else {
            out.push_str(line);
            out.push('\n');
        }
    }
    if !replaced {
        out.push_str(&format!("{key} = {value}\n"));
    }
    out
}
