//! A frozen linear map augmented with a top-K gated mixture of low-rank
//! adapter experts.
//!
//! This is the consumer of the expert counts the planner produces: a layer
//! granted `s` experts holds `s` (A, B) adapter pairs next to its frozen
//! base matrix, and a router picks K of them per input. Only the forward
//! map lives here; adapter and router training are out of scope.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::numerics::{softmax_topk, Matrix, NumericsError};

/// Errors from adapter-mixture construction and forward passes.
#[derive(Debug, Error)]
pub enum LoraError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// One low-rank expert: the adapter product `a * b` has the base's shape.
#[derive(Debug, Clone)]
pub struct LoraExpert {
    /// m x r up-projection.
    pub a: Matrix,
    /// r x n down-projection.
    pub b: Matrix,
}

/// A frozen m x n base map plus gated low-rank experts.
///
/// The router holds one n-dimensional row per expert, so expert logits are
/// a single matrix-vector product against the input.
#[derive(Debug, Clone)]
pub struct LoraMoeLayer {
    pub base: Matrix,
    pub experts: Vec<LoraExpert>,
    pub router: Matrix,
    pub top_k: usize,
}

impl LoraMoeLayer {
    /// Builds a layer with `num_experts` rank-`rank` experts: A and the
    /// router Gaussian, B zero, so the initial layer computes exactly the
    /// base map.
    pub fn init(
        base: Matrix,
        num_experts: usize,
        rank: usize,
        top_k: usize,
        seed: u64,
    ) -> Result<Self, LoraError> {
        if num_experts == 0 || rank == 0 {
            return Err(LoraError::DimensionMismatch(
                "need at least one expert of rank at least 1".into(),
            ));
        }
        if top_k == 0 || top_k > num_experts {
            return Err(LoraError::DimensionMismatch(format!(
                "top_k {top_k} outside 1..={num_experts}"
            )));
        }
        let (m, n) = (base.rows(), base.cols());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, 1.0 / (n as f64).sqrt()).expect("positive std");
        let mut gauss = |rows: usize, cols: usize| -> Matrix {
            Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| dist.sample(&mut rng)).collect())
        };
        let experts = (0..num_experts)
            .map(|_| LoraExpert { a: gauss(m, rank), b: Matrix::zeros(rank, n) })
            .collect();
        let router = gauss(num_experts, n);
        Ok(LoraMoeLayer { base, experts, router, top_k })
    }

    fn check_dims(&self, x_len: usize) -> Result<(), LoraError> {
        let (m, n) = (self.base.rows(), self.base.cols());
        if x_len != n {
            return Err(LoraError::DimensionMismatch(format!(
                "input has {x_len} entries, base expects {n}"
            )));
        }
        if self.router.rows() != self.experts.len() || self.router.cols() != n {
            return Err(LoraError::DimensionMismatch(format!(
                "router is {}x{}, expected {}x{n}",
                self.router.rows(),
                self.router.cols(),
                self.experts.len()
            )));
        }
        if self.top_k == 0 || self.top_k > self.experts.len() {
            return Err(LoraError::DimensionMismatch(format!(
                "top_k {} outside 1..={}",
                self.top_k,
                self.experts.len()
            )));
        }
        for (j, e) in self.experts.iter().enumerate() {
            if e.a.rows() != m || e.a.cols() != e.b.rows() || e.b.cols() != n {
                return Err(LoraError::DimensionMismatch(format!(
                    "expert {j} is ({}x{})*({}x{}), expected {m}x r * r x{n}",
                    e.a.rows(),
                    e.a.cols(),
                    e.b.rows(),
                    e.b.cols()
                )));
            }
        }
        Ok(())
    }
}

/// Applies the layer: base output plus the top-K experts' adapter outputs,
/// weighted by their renormalized router softmax weights.
pub fn lora_moe_forward(layer: &LoraMoeLayer, x: &[f64]) -> Result<Vec<f64>, LoraError> {
    layer.check_dims(x.len())?;
    let mut y = layer.base.matvec(x);
    let logits = layer.router.matvec(x);
    let weights = softmax_topk(&logits, layer.top_k)?;
    for (expert, &w) in layer.experts.iter().zip(&weights) {
        if w == 0.0 {
            continue;
        }
        let bx = expert.b.matvec(x);
        let abx = expert.a.matvec(&bx);
        for (yi, ai) in y.iter_mut().zip(&abx) {
            *yi += w * ai;
        }
    }
    Ok(y)
}
