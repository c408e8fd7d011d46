//! Restart-style (personalized PageRank) feature diffusion.
//!
//! `X⁽⁰⁾ = X`, `X⁽ᵗ⁺¹⁾ = (1−α)·Ã·X⁽ᵗ⁾ + α·X`, output `X⁽ᵀ⁾`. The iteration is
//! parameter-free and runs once before training.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::NormalizedGraph;
use crate::matrix::DenseMatrix;
use crate::parallel::use_parallel;
use crate::scalar::Scalar;

/// Default column-block width of the propagation kernel.
pub const DEFAULT_BLOCK_COLS: usize = 64;

/// Largest `n` accepted by [`ppr_closed_form`] unless overridden.
pub const DEFAULT_CLOSED_FORM_CAP: usize = 2000;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiffusionParams {
    pub restart_alpha: f64,
    pub iterations: usize,
    pub block_cols: usize,
}

impl DiffusionParams {
    pub fn new(restart_alpha: f64, iterations: usize) -> Result<Self> {
        let p = Self {
            restart_alpha,
            iterations,
            block_cols: DEFAULT_BLOCK_COLS,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.restart_alpha > 0.0 && self.restart_alpha <= 1.0) {
            return Err(Error::InvalidParam(format!(
                "restart_alpha must lie in (0, 1], got {}",
                self.restart_alpha
            )));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidParam("iterations must be at least 1".into()));
        }
        if self.block_cols == 0 {
            return Err(Error::InvalidParam("block_cols must be positive".into()));
        }
        Ok(())
    }
}

fn check_inputs<T: Scalar>(features: &DenseMatrix<T>, ng: &NormalizedGraph) -> Result<()> {
    if features.rows() != ng.num_nodes() {
        return Err(Error::shape(
            "diffuse",
            format!("{} feature rows", ng.num_nodes()),
            format!("{} feature rows", features.rows()),
        ));
    }
    if !features.is_finite() {
        return Err(Error::NonFinite("diffusion input features"));
    }
    Ok(())
}

/// Runs `params.iterations` diffusion steps. Accumulation is in `f64`
/// whatever `T` is; the input is left untouched.
pub fn diffuse<T: Scalar>(
    features: &DenseMatrix<T>,
    ng: &NormalizedGraph,
    params: &DiffusionParams,
) -> Result<DenseMatrix<T>> {
    Ok(iterate(features, ng, params, |_| {})?.cast())
}

/// Like [`diffuse`] but returns every iterate `X⁽¹⁾ … X⁽ᵀ⁾` in `f64`.
pub fn diffuse_trace<T: Scalar>(
    features: &DenseMatrix<T>,
    ng: &NormalizedGraph,
    params: &DiffusionParams,
) -> Result<Vec<DenseMatrix<f64>>> {
    let mut trace = Vec::with_capacity(params.iterations);
    iterate(features, ng, params, |x| trace.push(x.clone()))?;
    Ok(trace)
}

fn iterate<T: Scalar>(
    features: &DenseMatrix<T>,
    ng: &NormalizedGraph,
    params: &DiffusionParams,
    mut on_iterate: impl FnMut(&DenseMatrix<f64>),
) -> Result<DenseMatrix<f64>> {
    params.validate()?;
    check_inputs(features, ng)?;
    let x0: DenseMatrix<f64> = features.cast();
    let mut cur = x0.clone();
    let mut next = DenseMatrix::zeros(x0.rows(), x0.cols());
    for _ in 0..params.iterations {
        propagate_step(&cur, &x0, ng, params, &mut next);
        std::mem::swap(&mut cur, &mut next);
        on_iterate(&cur);
    }
    Ok(cur)
}

fn propagate_step(
    cur: &DenseMatrix<f64>,
    x0: &DenseMatrix<f64>,
    ng: &NormalizedGraph,
    params: &DiffusionParams,
    out: &mut DenseMatrix<f64>,
) {
    let d = cur.cols();
    if d == 0 {
        return;
    }
    let alpha = params.restart_alpha;
    let keep = 1.0 - alpha;
    let block = params.block_cols.min(d);
    let row_kernel = |(i, out_row): (usize, &mut [f64])| {
        let ego = x0.row(i);
        let mut acc = vec![0.0f64; block];
        let mut start = 0;
        while start < d {
            let end = (start + block).min(d);
            let width = end - start;
            acc[..width].iter_mut().for_each(|a| *a = 0.0);
            for (j, w) in ng.row(i) {
                let src = &cur.row(j)[start..end];
                for (a, &s) in acc[..width].iter_mut().zip(src) {
                    *a += w * s;
                }
            }
            for c in 0..width {
                out_row[start + c] = keep * acc[c] + alpha * ego[start + c];
            }
            start = end;
        }
    };
    let work = (ng.structure().col_indices().len() + cur.rows()) * d;
    if use_parallel(work) {
        out.as_mut_slice()
            .par_chunks_mut(d)
            .enumerate()
            .for_each(row_kernel);
    } else {
        out.as_mut_slice()
            .chunks_mut(d)
            .enumerate()
            .for_each(row_kernel);
    }
}

/// Exact fixed point: solves `(I − (1−α)Ã)·X* = α·X` by dense LU.
/// Only for small instances (`n ≤ cap`).
pub fn ppr_closed_form<T: Scalar>(
    features: &DenseMatrix<T>,
    ng: &NormalizedGraph,
    alpha: f64,
    cap: usize,
) -> Result<DenseMatrix<f64>> {
    let n = ng.num_nodes();
    if n > cap {
        return Err(Error::TooLarge {
            op: "ppr_closed_form",
            n,
            cap,
        });
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidParam(format!(
            "restart_alpha must lie in (0, 1], got {alpha}"
        )));
    }
    check_inputs(features, ng)?;
    let d = features.cols();
    let mut system = DMatrix::<f64>::identity(n, n);
    for i in 0..n {
        for (j, w) in ng.row(i) {
            system[(i, j)] -= (1.0 - alpha) * w;
        }
    }
    let rhs = DMatrix::<f64>::from_fn(n, d, |i, j| alpha * features[(i, j)].widen());
    let solution = system
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::InvalidParam("singular diffusion system".into()))?;
    Ok(DenseMatrix::from_fn(n, d, |i, j| solution[(i, j)]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{normalize_adjacency, SparseGraph};
    use proptest::prelude::*;

    fn two_path() -> NormalizedGraph {
        normalize_adjacency(&SparseGraph::from_edges(2, [(0, 1)]).unwrap())
    }

    fn col(v: &[f64]) -> DenseMatrix<f64> {
        DenseMatrix::from_vec(v.len(), 1, v.to_vec()).unwrap()
    }

    #[test]
    fn alpha_one_is_identity() {
        let g = SparseGraph::from_edges(4, [(0, 1), (1, 2), (2, 3), (0, 3)]).unwrap();
        let ng = normalize_adjacency(&g);
        let x = DenseMatrix::from_fn(4, 3, |i, j| (i * 3 + j) as f64 * 0.37 - 1.0);
        for t in [1, 4, 9] {
            let out = diffuse(&x, &ng, &DiffusionParams::new(1.0, t).unwrap()).unwrap();
            assert_eq!(out, x);
        }
        assert_eq!(ppr_closed_form(&x, &ng, 1.0, 100).unwrap(), x);
    }

    #[test]
    fn isolated_node_keeps_scaled_ego_features() {
        let g = SparseGraph::from_edges(3, [(0, 1)]).unwrap();
        let ng = normalize_adjacency(&g);
        let x = DenseMatrix::from_rows(&[[1.0, 2.0], [3.0, -1.0], [4.0, -2.0]]);
        let out = diffuse(&x, &ng, &DiffusionParams::new(0.3, 5).unwrap()).unwrap();
        assert_eq!(out.row(2), &[0.3 * 4.0, 0.3 * -2.0]);
        let single = normalize_adjacency(&SparseGraph::empty(1));
        let cf = ppr_closed_form(&col(&[2.5]), &single, 0.4, 10).unwrap();
        assert_eq!(cf[(0, 0)], 0.4 * 2.5);
    }

    #[test]
    fn two_node_path_values() {
        // Hand iteration: X1 = [[0.5],[0.5]], X2 = [[0.75],[0.25]].
        let out = diffuse(
            &col(&[1.0, 0.0]),
            &two_path(),
            &DiffusionParams::new(0.5, 2).unwrap(),
        )
        .unwrap();
        assert!((out[(0, 0)] - 0.75).abs() < 1e-15);
        assert!((out[(1, 0)] - 0.25).abs() < 1e-15);
        // (I − 0.5·[[0,1],[1,0]]) x = [0.5, 0] gives x = [2/3, 1/3].
        let cf = ppr_closed_form(&col(&[1.0, 0.0]), &two_path(), 0.5, 10).unwrap();
        assert!((cf[(0, 0)] - 2.0 / 3.0).abs() < 1e-12);
        assert!((cf[(1, 0)] - 1.0 / 3.0).abs() < 1e-12);
        let long = diffuse(
            &col(&[1.0, 0.0]),
            &two_path(),
            &DiffusionParams::new(0.5, 60).unwrap(),
        )
        .unwrap();
        assert!(long.max_abs_diff(&cf) < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        let x = DenseMatrix::<f64>::zeros(3, 2);
        let p = DiffusionParams::new(0.5, 2).unwrap();
        assert!(matches!(
            diffuse(&x, &two_path(), &p),
            Err(Error::Shape { .. })
        ));
        let mut y = DenseMatrix::<f64>::zeros(2, 1);
        y[(1, 0)] = f64::NAN;
        assert!(matches!(
            diffuse(&y, &two_path(), &p),
            Err(Error::NonFinite(_))
        ));
        assert!(DiffusionParams::new(0.0, 2).is_err());
        assert!(DiffusionParams::new(0.5, 0).is_err());
        assert!(matches!(
            ppr_closed_form(&x, &normalize_adjacency(&SparseGraph::empty(3)), 0.5, 2),
            Err(Error::TooLarge { .. })
        ));
    }

    #[test]
    fn f32_storage_accumulates_in_f64() {
        let g = SparseGraph::from_edges(3, [(0, 1), (1, 2)]).unwrap();
        let ng = normalize_adjacency(&g);
        let x64 = DenseMatrix::from_rows(&[[0.1f64], [0.7], [-0.3]]);
        let x32: DenseMatrix<f32> = x64.cast();
        let p = DiffusionParams::new(0.1, 40).unwrap();
        let a = diffuse(&x32, &ng, &p).unwrap();
        let b: DenseMatrix<f32> = diffuse(&x32.cast::<f64>(), &ng, &p).unwrap().cast();
        assert_eq!(a, b);
    }

    #[test]
    fn block_width_does_not_change_result() {
        let g =
            SparseGraph::from_edges(5, [(0, 1), (1, 2), (2, 3), (3, 4), (4, 0), (1, 3)]).unwrap();
        let ng = normalize_adjacency(&g);
        let x = DenseMatrix::from_fn(5, 7, |i, j| ((i * 7 + j) as f64).sin());
        let mut p = DiffusionParams::new(0.2, 6).unwrap();
        let wide = diffuse(&x, &ng, &p).unwrap();
        p.block_cols = 3;
        assert_eq!(diffuse(&x, &ng, &p).unwrap(), wide);
    }

    proptest! {
        #[test]
        fn diffusion_is_linear(
            raw in proptest::collection::vec((0usize..10, 0usize..10), 0..25),
            xs in proptest::collection::vec(-5.0f64..5.0, 20),
            ys in proptest::collection::vec(-5.0f64..5.0, 20),
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
        ) {
            let ng = normalize_adjacency(&SparseGraph::from_edges(10, raw).unwrap());
            let x = DenseMatrix::from_vec(10, 2, xs).unwrap();
            let y = DenseMatrix::from_vec(10, 2, ys).unwrap();
            let p = DiffusionParams::new(0.15, 8).unwrap();
            let combo = x.scale(a).add(&y.scale(b)).unwrap();
            let lhs = diffuse(&combo, &ng, &p).unwrap();
            let rhs = diffuse(&x, &ng, &p).unwrap().scale(a)
                .add(&diffuse(&y, &ng, &p).unwrap().scale(b)).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-10);
        }
    }
}
