//! Synthetic task generators: a low-rank teacher regression task and a
//! Gaussian-cluster classification task. Both are fully determined by a seed
//! and emit batches that can be replayed through the GMAT container.

use std::io::{Read, Write};

use crate::error::{GoraError, Result};
use crate::net::{Batch, Targets};
use crate::numerics::{Matrix, Rng};

/// Teacher regression task: targets y = x (W0 + dW*) + noise where dW* has
/// exactly rank `r_true`. The base W0 goes into the network frozen; dW* is
/// returned for diagnostics only.
pub struct TeacherTask {
    pub w0: Matrix,
    pub delta_true: Matrix,
    pub train: Vec<Batch>,
    pub eval: Batch,
}

pub fn make_lowrank_teacher_task(
    rng: &mut Rng,
    m: usize,
    n: usize,
    r_true: usize,
    n_samples: usize,
    noise_std: f64,
    batch_size: usize,
) -> Result<TeacherTask> {
    if r_true > m.min(n) {
        return Err(GoraError::Config(format!(
            "r_true {} exceeds min(m, n) = {}",
            r_true,
            m.min(n)
        )));
    }
    if batch_size == 0 || n_samples < batch_size {
        return Err(GoraError::Config("need at least one full batch".into()));
    }

    // W0 and dW* entries both have std 1/sqrt(m) so unit-variance inputs
    // produce unit-scale outputs and the adaptation signal is material.
    let sigma = 1.0 / (m as f64).sqrt();
    let w0 = rng.sample_gaussian(m, n).scale(sigma);
    let delta_true = if r_true == 0 {
        Matrix::zeros(m, n)
    } else {
        let u = rng.sample_gaussian(m, r_true);
        let v = rng.sample_gaussian(r_true, n);
        u.matmul(&v)?.scale(sigma / (r_true as f64).sqrt())
    };
    let w_teacher = w0.add(&delta_true)?;

    let make_batch = |rng: &mut Rng, size: usize| -> Result<Batch> {
        let x = rng.sample_gaussian(size, m);
        let mut y = x.matmul(&w_teacher)?;
        if noise_std > 0.0 {
            y.axpy(noise_std, &rng.sample_gaussian(size, n))?;
        }
        Ok(Batch { inputs: x, targets: Targets::Regression(y) })
    };

    let n_batches = n_samples / batch_size;
    let mut train = Vec::with_capacity(n_batches);
    for _ in 0..n_batches {
        train.push(make_batch(rng, batch_size)?);
    }
    let eval = make_batch(rng, (4 * batch_size).max(256))?;

    Ok(TeacherTask { w0, delta_true, train, eval })
}

/// Gaussian clusters with separable means and balanced labels.
pub struct ClusterTask {
    pub means: Matrix,
    pub train: Vec<Batch>,
    pub eval: Batch,
}

pub fn make_cluster_classification_task(
    rng: &mut Rng,
    dims: usize,
    classes: usize,
    n_samples: usize,
    separation: f64,
    batch_size: usize,
) -> Result<ClusterTask> {
    if classes < 2 {
        return Err(GoraError::Degenerate(format!(
            "classification needs at least 2 classes, got {classes}"
        )));
    }
    if batch_size == 0 || n_samples < batch_size {
        return Err(GoraError::Config("need at least one full batch".into()));
    }

    // Class means: random directions scaled to `separation` (unit noise std).
    let mut means = rng.sample_gaussian(classes, dims);
    for c in 0..classes {
        let norm: f64 = means.row(c).iter().map(|v| v * v).sum::<f64>().sqrt();
        for j in 0..dims {
            means[(c, j)] *= separation / norm;
        }
    }

    let draw = |rng: &mut Rng, count: usize| -> Result<Batch> {
        // Balanced labels, order shuffled.
        let mut labels: Vec<usize> = (0..count).map(|i| i % classes).collect();
        let perm = rng.permutation(count);
        labels = perm.iter().map(|&i| labels[i]).collect();
        let mut x = Matrix::zeros(count, dims);
        for (i, &label) in labels.iter().enumerate() {
            for j in 0..dims {
                x[(i, j)] = means[(label, j)] + rng.standard_normal();
            }
        }
        Ok(Batch { inputs: x, targets: Targets::Labels(labels) })
    };

    let n_batches = n_samples / batch_size;
    let mut train = Vec::with_capacity(n_batches);
    for _ in 0..n_batches {
        train.push(draw(rng, batch_size)?);
    }
    let eval = draw(rng, (4 * batch_size).max(256))?;

    Ok(ClusterTask { means, train, eval })
}

/// Batch serialization for replay: a tag byte, the inputs as a GMAT block,
/// then either a GMAT target block or a label block.
pub fn write_batch<W: Write>(w: &mut W, batch: &Batch) -> Result<()> {
    match &batch.targets {
        Targets::Regression(y) => {
            w.write_all(&[0u8])?;
            batch.inputs.write_gmat(w)?;
            y.write_gmat(w)?;
        }
        Targets::Labels(labels) => {
            w.write_all(&[1u8])?;
            batch.inputs.write_gmat(w)?;
            w.write_all(&(labels.len() as u32).to_le_bytes())?;
            for &l in labels {
                w.write_all(&(l as u32).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_batch<R: Read>(r: &mut R) -> Result<Batch> {
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag)?;
    let inputs = Matrix::read_gmat(r)?;
    let targets = match tag[0] {
        0 => Targets::Regression(Matrix::read_gmat(r)?),
        1 => {
            let mut b4 = [0u8; 4];
            r.read_exact(&mut b4)?;
            let count = u32::from_le_bytes(b4) as usize;
            let mut labels = Vec::with_capacity(count);
            for _ in 0..count {
                r.read_exact(&mut b4)?;
                labels.push(u32::from_le_bytes(b4) as usize);
            }
            Targets::Labels(labels)
        }
        other => return Err(GoraError::Format(format!("unknown batch tag {other}"))),
    };
    Ok(Batch { inputs, targets })
}
