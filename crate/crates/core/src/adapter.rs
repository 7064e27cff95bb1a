//! Low-rank adapter state: scaling variants, exact adapter gradients,
//! merging, and the frozen-A mode.
//!
//! An adapter holds a pair (A: m x r, B: r x n) attached to a frozen base
//! weight W0 (m x n). The effective weight is W0 + s * A * B where the scale
//! s is recomputed from (alpha, mode, r) on every use.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{GoraError, Result};
use crate::numerics::Matrix;

/// Forward scaling variant: s = alpha/r (classic) or alpha/sqrt(r)
/// (rank-stabilized).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingMode {
    Lora,
    RsLora,
}

impl ScalingMode {
    pub fn scale(&self, alpha: f64, r: usize) -> f64 {
        match self {
            ScalingMode::Lora => alpha / r as f64,
            ScalingMode::RsLora => alpha / (r as f64).sqrt(),
        }
    }

    pub fn tag(&self) -> u8 {
        match self {
            ScalingMode::Lora => 0,
            ScalingMode::RsLora => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(ScalingMode::Lora),
            1 => Ok(ScalingMode::RsLora),
            other => Err(GoraError::Format(format!("unknown scaling mode tag {other}"))),
        }
    }
}

/// Per-layer adapter state.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterState {
    pub a: Matrix,
    pub b: Matrix,
    pub alpha: f64,
    pub mode: ScalingMode,
    pub freeze_a: bool,
}

/// Adapters attach per layer, keyed by layer index. Layers without an entry
/// train nothing.
pub type AdapterSet = BTreeMap<usize, AdapterState>;

impl AdapterState {
    pub fn new(a: Matrix, b: Matrix, alpha: f64, mode: ScalingMode) -> Result<Self> {
        if a.cols() != b.rows() {
            return Err(GoraError::ShapeMismatch {
                op: "adapter",
                left: a.shape(),
                right: b.shape(),
            });
        }
        if alpha <= 0.0 {
            return Err(GoraError::Config("alpha must be positive".into()));
        }
        Ok(AdapterState { a, b, alpha, mode, freeze_a: false })
    }

    /// Fresh adapter with zero B, the configuration every training run
    /// starts from.
    pub fn zero_b(a: Matrix, n: usize, alpha: f64, mode: ScalingMode) -> Result<Self> {
        let r = a.cols();
        Self::new(a, Matrix::zeros(r, n), alpha, mode)
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    /// Scale recomputed from (alpha, mode, rank); never stored.
    pub fn scale(&self) -> f64 {
        self.mode.scale(self.alpha, self.rank())
    }

    /// s * A * B.
    pub fn delta(&self) -> Matrix {
        self.a.matmul(&self.b).unwrap().scale(self.scale())
    }

    /// W0 + s * A * B.
    pub fn merge(&self, w0: &Matrix) -> Result<Matrix> {
        let mut out = w0.clone();
        out.axpy(1.0, &self.delta())?;
        Ok(out)
    }

    /// Adapter output contribution for a batch of inputs: s * ((x A) B),
    /// never materializing the merged m x n matrix.
    pub fn forward_delta(&self, x: &Matrix) -> Result<Matrix> {
        let xa = x.matmul(&self.a)?;
        Ok(xa.matmul(&self.b)?.scale(self.scale()))
    }

    /// Exact gradients of the loss w.r.t. A and B, given the gradient g of
    /// the loss w.r.t. the effective weight: gA = s * g * B^T, gB = s * A^T * g.
    /// A frozen A reports a zero gradient.
    pub fn grads(&self, weight_grad: &Matrix) -> Result<(Matrix, Matrix)> {
        if weight_grad.shape() != (self.a.rows(), self.b.cols()) {
            return Err(GoraError::ShapeMismatch {
                op: "adapter_grads",
                left: weight_grad.shape(),
                right: (self.a.rows(), self.b.cols()),
            });
        }
        let s = self.scale();
        let ga = if self.freeze_a {
            Matrix::zeros(self.a.rows(), self.a.cols())
        } else {
            weight_grad.matmul(&self.b.transpose())?.scale(s)
        };
        let gb = self.a.transpose().matmul(weight_grad)?.scale(s);
        Ok((ga, gb))
    }
}

/// Full-batch forward through one adapted layer: x * W0 + s * ((x A) B).
pub fn adapter_forward(x: &Matrix, w0: &Matrix, ad: &AdapterState) -> Result<Matrix> {
    let mut out = x.matmul(w0)?;
    out.axpy(1.0, &ad.forward_delta(x)?)?;
    Ok(out)
}

const GADP_MAGIC: &[u8; 4] = b"GADP";

/// Write an adapter set as a sequence of GADP records:
/// magic, u32 layer index, u32 r, f64 alpha, u8 mode tag, then A and B as
/// GMAT blocks. Base weights are never written; checkpoints stay small.
pub fn write_checkpoint<W: Write>(w: &mut W, adapters: &AdapterSet) -> Result<()> {
    for (&layer, ad) in adapters {
        w.write_all(GADP_MAGIC)?;
        w.write_all(&(layer as u32).to_le_bytes())?;
        w.write_all(&(ad.rank() as u32).to_le_bytes())?;
        w.write_all(&ad.alpha.to_le_bytes())?;
        w.write_all(&[ad.mode.tag()])?;
        ad.a.write_gmat(w)?;
        ad.b.write_gmat(w)?;
    }
    Ok(())
}

/// Read GADP records until end of stream.
pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<AdapterSet> {
    let mut out = AdapterSet::new();
    loop {
        let mut magic = [0u8; 4];
        match r.read_exact(&mut magic) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        if &magic != GADP_MAGIC {
            return Err(GoraError::Format(format!("bad GADP magic: {magic:02x?}")));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let layer = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b4)?;
        let rank = u32::from_le_bytes(b4) as usize;
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let alpha = f64::from_le_bytes(b8);
        let mut b1 = [0u8; 1];
        r.read_exact(&mut b1)?;
        let mode = ScalingMode::from_tag(b1[0])?;
        let a = Matrix::read_gmat(r)?;
        let b = Matrix::read_gmat(r)?;
        if a.cols() != rank || b.rows() != rank {
            return Err(GoraError::Format(format!(
                "GADP record rank {rank} does not match blocks {}x{} / {}x{}",
                a.rows(),
                a.cols(),
                b.rows(),
                b.cols()
            )));
        }
        out.insert(layer, AdapterState::new(a, b, alpha, mode)?);
    }
    Ok(out)
}

/// Serialize to bytes; used for checkpoint files and bit-equality checks.
pub fn checkpoint_bytes(adapters: &AdapterSet) -> Vec<u8> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, adapters).expect("write to Vec cannot fail");
    buf
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn random_adapter(rng: &mut Rng, m: usize, r: usize, n: usize, mode: ScalingMode) -> AdapterState {
        let a = rng.sample_gaussian(m, r);
        let b = rng.sample_gaussian(r, n);
        AdapterState::new(a, b, 16.0, mode).unwrap()
    }

    #[test]
    fn zero_b_matches_base_forward() {
        let mut rng = Rng::new(1);
        let w0 = rng.sample_gaussian(6, 5);
        let a = rng.sample_gaussian(6, 2);
        let ad = AdapterState::zero_b(a, 5, 16.0, ScalingMode::Lora).unwrap();
        let x = rng.sample_gaussian(3, 6);
        let base = x.matmul(&w0).unwrap();
        let adapted = adapter_forward(&x, &w0, &ad).unwrap();
        assert_eq!(base, adapted);
        assert_eq!(ad.delta(), Matrix::zeros(6, 5));
    }

    #[test]
    fn full_rank_adapter_represents_any_update() {
        let mut rng = Rng::new(2);
        let (m, n) = (4, 4);
        let w0 = rng.sample_gaussian(m, n);
        let delta = rng.sample_gaussian(m, n);
        let ad = AdapterState::new(
            Matrix::identity(m),
            delta.scale(1.0 / ScalingMode::Lora.scale(16.0, m)),
            16.0,
            ScalingMode::Lora,
        )
        .unwrap();
        let x = rng.sample_gaussian(5, m);
        let expect = x.matmul(&w0.add(&delta).unwrap()).unwrap();
        let got = adapter_forward(&x, &w0, &ad).unwrap();
        assert!(got.sub(&expect).unwrap().frobenius() < 1e-12 * expect.frobenius());
    }

    #[test]
    fn factored_path_matches_merged_path() {
        let mut rng = Rng::new(3);
        for mode in [ScalingMode::Lora, ScalingMode::RsLora] {
            let w0 = rng.sample_gaussian(9, 7);
            let ad = random_adapter(&mut rng, 9, 3, 7, mode);
            let x = rng.sample_gaussian(4, 9);
            let factored = adapter_forward(&x, &w0, &ad).unwrap();
            let merged = x.matmul(&ad.merge(&w0).unwrap()).unwrap();
            assert!(
                factored.sub(&merged).unwrap().frobenius() <= 1e-12 * merged.frobenius().max(1.0)
            );
        }
    }

    #[test]
    fn zero_b_has_zero_a_gradient() {
        let mut rng = Rng::new(4);
        let a = rng.sample_gaussian(6, 2);
        let ad = AdapterState::zero_b(a, 5, 16.0, ScalingMode::Lora).unwrap();
        let g = rng.sample_gaussian(6, 5);
        let (ga, gb) = ad.grads(&g).unwrap();
        assert_eq!(ga, Matrix::zeros(6, 2));
        assert!(gb.frobenius() > 0.0);
    }

    #[test]
    fn freeze_a_zeroes_gradient() {
        let mut rng = Rng::new(5);
        let mut ad = random_adapter(&mut rng, 6, 2, 5, ScalingMode::Lora);
        ad.freeze_a = true;
        let g = rng.sample_gaussian(6, 5);
        let (ga, _) = ad.grads(&g).unwrap();
        assert_eq!(ga, Matrix::zeros(6, 2));
    }

    #[test]
    fn mode_switch_scales_delta_by_sqrt_r() {
        let mut rng = Rng::new(6);
        let ad_lora = random_adapter(&mut rng, 8, 4, 8, ScalingMode::Lora);
        let mut ad_rs = ad_lora.clone();
        ad_rs.mode = ScalingMode::RsLora;
        let d1 = ad_lora.delta();
        let d2 = ad_rs.delta();
        let factor = (ad_lora.rank() as f64).sqrt();
        for (x, y) in d1.as_slice().iter().zip(d2.as_slice()) {
            assert!((y - factor * x).abs() <= 1e-14 * y.abs().max(1e-300));
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut rng = Rng::new(7);
        let mut set = AdapterSet::new();
        set.insert(0, random_adapter(&mut rng, 6, 2, 5, ScalingMode::Lora));
        set.insert(2, random_adapter(&mut rng, 5, 3, 4, ScalingMode::RsLora));
        let bytes = checkpoint_bytes(&set);
        let back = read_checkpoint(&mut bytes.as_slice()).unwrap();
        assert_eq!(checkpoint_bytes(&back), bytes);
        assert_eq!(back.len(), 2);
        assert_eq!(back[&2].mode, ScalingMode::RsLora);
    }
}
