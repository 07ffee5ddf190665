//! Minimal row-major 2D tensor and the parameter store the models hang off.
//!
//! Parameters live in one flat store addressed by [`ParamId`]; weight tying is
//! expressed by two modules holding the same id, so gradients and optimizer
//! updates hit the shared storage exactly once.

use rand::Rng;
use rayon::prelude::*;

use crate::scalar::Scalar;
use crate::seed::rng_from_seed;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar> {
    pub data: Vec<S>,
    pub rows: usize,
    pub cols: usize,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            data: vec![S::zero(); rows * cols],
            rows,
            cols,
        }
    }

    pub fn from_vec(data: Vec<S>, rows: usize, cols: usize) -> Self {
        assert_eq!(data.len(), rows * cols);
        Tensor { data, rows, cols }
    }

    pub fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn fill(&mut self, v: S) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Dot product with eight fixed partial accumulators. The grouping is part of
/// the numeric contract (deterministic across runs) and lets the compiler use
/// wide registers despite strict float semantics.
#[inline]
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [S::zero(); 8];
    let mut ai = a.chunks_exact(8);
    let mut bi = b.chunks_exact(8);
    for (ca, cb) in (&mut ai).zip(&mut bi) {
        for k in 0..8 {
            acc[k] += ca[k] * cb[k];
        }
    }
    let mut tail = S::zero();
    for (x, y) in ai.remainder().iter().zip(bi.remainder()) {
        tail += *x * *y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

#[inline]
pub fn axpy<S: Scalar>(alpha: S, x: &[S], y: &mut [S]) {
    debug_assert_eq!(x.len(), y.len());
    for (xi, yi) in x.iter().zip(y.iter_mut()) {
        *yi += alpha * *xi;
    }
}

const PAR_ROW_THRESHOLD: usize = 16;

/// y = x * w^T (+ bias). `w` is (out x in); each output element is one dot of
/// two contiguous rows. Rows are independent, so the parallel path is
/// bit-identical to the sequential one.
pub fn matmul_nt<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, bias: Option<&Tensor<S>>) -> Tensor<S> {
    assert_eq!(x.cols, w.cols, "matmul_nt: inner dims differ");
    let mut out = Tensor::zeros(x.rows, w.rows);
    let cols = w.rows;
    let run_row = |r: usize, out_row: &mut [S]| {
        let xr = x.row(r);
        for (o, slot) in out_row.iter_mut().enumerate().take(cols) {
            *slot = dot(xr, w.row(o));
        }
        if let Some(b) = bias {
            for (slot, &bv) in out_row.iter_mut().zip(b.row(0)) {
                *slot += bv;
            }
        }
    };
    if x.rows >= PAR_ROW_THRESHOLD {
        out.data
            .par_chunks_mut(cols)
            .enumerate()
            .for_each(|(r, row)| run_row(r, row));
    } else {
        for r in 0..x.rows {
            run_row(r, &mut out.data[r * cols..(r + 1) * cols]);
        }
    }
    out
}

/// dx = dy * w, for w (out x in) and dy (n x out).
pub fn matmul_nn<S: Scalar>(dy: &Tensor<S>, w: &Tensor<S>) -> Tensor<S> {
    assert_eq!(dy.cols, w.rows);
    let mut out = Tensor::zeros(dy.rows, w.cols);
    let cols = w.cols;
    let run_row = |r: usize, out_row: &mut [S]| {
        let dyr = dy.row(r);
        for (o, &g) in dyr.iter().enumerate() {
            if g != S::zero() {
                axpy(g, w.row(o), out_row);
            }
        }
    };
    if dy.rows >= PAR_ROW_THRESHOLD {
        out.data
            .par_chunks_mut(cols)
            .enumerate()
            .for_each(|(r, row)| run_row(r, row));
    } else {
        for r in 0..dy.rows {
            run_row(r, &mut out.data[r * cols..(r + 1) * cols]);
        }
    }
    out
}

/// dw += dy^T * x, for dy (n x out), x (n x in), dw (out x in).
pub fn accumulate_nt<S: Scalar>(dw: &mut Tensor<S>, dy: &Tensor<S>, x: &Tensor<S>) {
    assert_eq!(dy.rows, x.rows);
    assert_eq!(dw.rows, dy.cols);
    assert_eq!(dw.cols, x.cols);
    let cols = dw.cols;
    if dw.rows >= PAR_ROW_THRESHOLD {
        dw.data
            .par_chunks_mut(cols)
            .enumerate()
            .for_each(|(o, dwo)| {
                for r in 0..dy.rows {
                    let g = dy.row(r)[o];
                    if g != S::zero() {
                        axpy(g, x.row(r), dwo);
                    }
                }
            });
    } else {
        for o in 0..dw.rows {
            let dwo = &mut dw.data[o * cols..(o + 1) * cols];
            for r in 0..dy.rows {
                let g = dy.row(r)[o];
                if g != S::zero() {
                    axpy(g, x.row(r), dwo);
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct ParamStore<S: Scalar> {
    names: Vec<String>,
    values: Vec<Tensor<S>>,
    grads: Vec<Tensor<S>>,
}

pub enum Init {
    Zeros,
    Ones,
    /// Gaussian with the given standard deviation.
    Normal(f64),
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn add(&mut self, name: &str, rows: usize, cols: usize, init: Init, seed: u64) -> ParamId {
        let mut t = Tensor::zeros(rows, cols);
        match init {
            Init::Zeros => {}
            Init::Ones => t.fill(S::one()),
            Init::Normal(std) => {
                let mut rng = rng_from_seed(seed);
                for v in t.data.iter_mut() {
                    let n: f64 = rng.sample(rand_distr::StandardNormal);
                    *v = S::from_f64(n * std);
                }
            }
        }
        let id = ParamId(self.values.len());
        self.names.push(name.to_string());
        self.grads.push(Tensor::zeros(rows, cols));
        self.values.push(t);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<S> {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.grads[id.0]
    }

    pub fn zero_grads(&mut self) {
        for g in self.grads.iter_mut() {
            g.fill(S::zero());
        }
    }

    pub fn param_count(&self) -> usize {
        self.values.iter().map(|t| t.data.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|t| t.is_finite())
    }

    /// Mutable (value, grad) pairs for the optimizer.
    pub fn values_and_grads(&mut self) -> (&mut [Tensor<S>], &[Tensor<S>]) {
        (&mut self.values, &self.grads)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small_known() {
        // x = [[1,2],[3,4]], w = [[1,0],[0,1],[1,1]] (3x2) -> y = x w^T
        let x = Tensor::from_vec(vec![1.0f64, 2.0, 3.0, 4.0], 2, 2);
        let w = Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0], 3, 2);
        let y = matmul_nt(&x, &w, None);
        assert_eq!(y.data, vec![1.0, 2.0, 3.0, 3.0, 4.0, 7.0]);
    }

    #[test]
    fn parallel_matches_sequential() {
        let mut rng = rng_from_seed(1);
        let x = Tensor::from_vec(
            (0..40 * 8).map(|_| rng.random_range(-1.0..1.0f64)).collect(),
            40,
            8,
        );
        let w = Tensor::from_vec(
            (0..6 * 8).map(|_| rng.random_range(-1.0..1.0f64)).collect(),
            6,
            8,
        );
        let big = matmul_nt(&x, &w, None);
        // Row-by-row sequential reference.
        for r in 0..40 {
            for o in 0..6 {
                let expect = dot(x.row(r), w.row(o));
                assert_eq!(big.row(r)[o], expect);
            }
        }
    }

    #[test]
    fn store_roundtrip() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("w", 2, 3, Init::Normal(0.1), 7);
        assert_eq!(store.value(id).rows, 2);
        assert!(store.all_finite());
        store.grad_mut(id).fill(1.0);
        store.zero_grads();
        assert!(store.grad(id).data.iter().all(|&x| x == 0.0));
    }
}
