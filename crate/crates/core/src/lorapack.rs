//! Dense reference math for training several LoRA adapters in one pass.
//!
//! Adapter `i` has `A_i` (`d x r_i`), `B_i` (`r_i x k`) and scale `alpha_i`,
//! and sees its own input rows `x_i` (`n_i x d`). The packed layout
//! concatenates every `A_i` column-wise, every `B_i` row-wise and every `x_i`
//! row-wise, so the frozen `W` (`d x k`) is applied once to all rows:
//!
//! ```text
//! y_i = x_i W + alpha_i (x_i A_i) B_i
//! ```
//!
//! Gradients for an upstream `dY_i`:
//!
//! | case | quantity        | formula                      |
//! |------|-----------------|------------------------------|
//! | 1    | `dB_i`          | `alpha_i (x_i A_i)^T dY_i`   |
//! | 2    | `dH_i`          | `alpha_i dY_i B_i^T`         |
//! | 3    | `dA_i`          | `x_i^T dH_i`                 |
//! | 4    | `dx_i`          | `dY_i W^T + dH_i A_i^T`      |
//!
//! where `H_i = x_i A_i` is the low-rank hidden activation.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

pub type Matrix = DMatrix<f64>;

/// Central finite-difference step.
pub const FD_STEP: f64 = 1e-6;
/// Maximum relative error accepted by [`grad_check`].
pub const GRAD_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LoraError {
    #[error("no adapters to pack")]
    Empty,
    #[error("shape mismatch: {0}")]
    Shape(String),
}

fn shape_err(what: impl Into<String>) -> LoraError {
    LoraError::Shape(what.into())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterWeights {
    pub a: Matrix,
    pub b: Matrix,
    pub alpha: f64,
}

impl AdapterWeights {
    pub fn new(a: Matrix, b: Matrix, alpha: f64) -> Result<Self, LoraError> {
        if a.ncols() != b.nrows() {
            return Err(shape_err(format!(
                "A is {}x{} but B is {}x{}",
                a.nrows(),
                a.ncols(),
                b.nrows(),
                b.ncols()
            )));
        }
        Ok(AdapterWeights { a, b, alpha })
    }

    pub fn rank(&self) -> usize {
        self.a.ncols()
    }

    pub fn input_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.b.ncols()
    }
}

/// Gradients of one adapter and its input.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrads {
    pub da: Matrix,
    pub db: Matrix,
    pub dhidden: Matrix,
    pub dx: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PackedAdapters {
    /// `d x sum(r_i)`.
    pub a: Matrix,
    /// `sum(r_i) x k`.
    pub b: Matrix,
    pub alphas: Vec<f64>,
    /// Prefix sums of ranks, length `n + 1`.
    pub rank_offsets: Vec<usize>,
    /// `sum(n_i) x d`.
    pub x: Matrix,
    /// Prefix sums of input rows, length `n + 1`.
    pub row_offsets: Vec<usize>,
}

fn prefix_sums(sizes: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut out = vec![0];
    for s in sizes {
        out.push(out.last().copied().unwrap_or(0) + s);
    }
    out
}

pub fn pack_adapters(
    adapters: &[AdapterWeights],
    inputs: &[Matrix],
) -> Result<PackedAdapters, LoraError> {
    let first = adapters.first().ok_or(LoraError::Empty)?;
    if adapters.len() != inputs.len() {
        return Err(shape_err(format!(
            "{} adapters but {} inputs",
            adapters.len(),
            inputs.len()
        )));
    }
    let (d, k) = (first.input_dim(), first.output_dim());
    for (i, (ad, x)) in adapters.iter().zip(inputs).enumerate() {
        if ad.a.ncols() != ad.b.nrows() {
            return Err(shape_err(format!("adapter {i}: A and B ranks differ")));
        }
        if ad.input_dim() != d || ad.output_dim() != k {
            return Err(shape_err(format!("adapter {i}: expected {d}->{k}")));
        }
        if x.ncols() != d {
            return Err(shape_err(format!(
                "input {i} has {} columns, expected {d}",
                x.ncols()
            )));
        }
    }
    let rank_offsets = prefix_sums(adapters.iter().map(AdapterWeights::rank));
    let row_offsets = prefix_sums(inputs.iter().map(Matrix::nrows));
    let total_rank = *rank_offsets.last().unwrap_or(&0);
    let total_rows = *row_offsets.last().unwrap_or(&0);

    let mut a = Matrix::zeros(d, total_rank);
    let mut b = Matrix::zeros(total_rank, k);
    let mut x = Matrix::zeros(total_rows, d);
    for (i, (ad, xi)) in adapters.iter().zip(inputs).enumerate() {
        let (r0, r) = (rank_offsets[i], ad.rank());
        a.columns_mut(r0, r).copy_from(&ad.a);
        b.rows_mut(r0, r).copy_from(&ad.b);
        x.rows_mut(row_offsets[i], xi.nrows()).copy_from(xi);
    }
    Ok(PackedAdapters {
        a,
        b,
        alphas: adapters.iter().map(|ad| ad.alpha).collect(),
        rank_offsets,
        x,
        row_offsets,
    })
}

impl PackedAdapters {
    pub fn len(&self) -> usize {
        self.alphas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphas.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.b.ncols()
    }

    fn rank_span(&self, i: usize) -> (usize, usize) {
        (
            self.rank_offsets[i],
            self.rank_offsets[i + 1] - self.rank_offsets[i],
        )
    }

    fn row_span(&self, i: usize) -> (usize, usize) {
        (
            self.row_offsets[i],
            self.row_offsets[i + 1] - self.row_offsets[i],
        )
    }

    pub fn adapter_a(&self, i: usize) -> Matrix {
        let (c0, r) = self.rank_span(i);
        self.a.columns(c0, r).into_owned()
    }

    pub fn adapter_b(&self, i: usize) -> Matrix {
        let (c0, r) = self.rank_span(i);
        self.b.rows(c0, r).into_owned()
    }

    pub fn input(&self, i: usize) -> Matrix {
        let (r0, n) = self.row_span(i);
        self.x.rows(r0, n).into_owned()
    }

    pub fn unpack(&self) -> (Vec<AdapterWeights>, Vec<Matrix>) {
        let adapters = (0..self.len())
            .map(|i| AdapterWeights {
                a: self.adapter_a(i),
                b: self.adapter_b(i),
                alpha: self.alphas[i],
            })
            .collect();
        let inputs = (0..self.len()).map(|i| self.input(i)).collect();
        (adapters, inputs)
    }

    fn check_base(&self, w: &Matrix) -> Result<(), LoraError> {
        if w.nrows() != self.input_dim() || w.ncols() != self.output_dim() {
            return Err(shape_err(format!(
                "W is {}x{}, expected {}x{}",
                w.nrows(),
                w.ncols(),
                self.input_dim(),
                self.output_dim()
            )));
        }
        Ok(())
    }

    /// Low-rank hidden activations `x_i A_i`.
    pub fn hidden(&self) -> Vec<Matrix> {
        (0..self.len())
            .map(|i| {
                let (r0, n) = self.row_span(i);
                let (c0, r) = self.rank_span(i);
                self.x.rows(r0, n) * self.a.columns(c0, r)
            })
            .collect()
    }
}

/// Per-adapter outputs `y_i`.
pub fn packed_forward(p: &PackedAdapters, w: &Matrix) -> Result<Vec<Matrix>, LoraError> {
    p.check_base(w)?;
    let base = &p.x * w;
    let hidden = p.hidden();
    Ok((0..p.len())
        .map(|i| {
            let (r0, n) = p.row_span(i);
            let (c0, r) = p.rank_span(i);
            base.rows(r0, n) + p.alphas[i] * (&hidden[i] * p.b.rows(c0, r))
        })
        .collect())
}

/// Per-adapter gradients for upstream gradients `dY_i`.
pub fn packed_backward(
    p: &PackedAdapters,
    w: &Matrix,
    upstream: &[Matrix],
) -> Result<Vec<AdapterGrads>, LoraError> {
    p.check_base(w)?;
    if upstream.len() != p.len() {
        return Err(shape_err(format!(
            "{} upstream gradients for {} adapters",
            upstream.len(),
            p.len()
        )));
    }
    let k = p.output_dim();
    let mut dy = Matrix::zeros(p.x.nrows(), k);
    for (i, g) in upstream.iter().enumerate() {
        let (r0, n) = p.row_span(i);
        if g.nrows() != n || g.ncols() != k {
            return Err(shape_err(format!("upstream {i} must be {n}x{k}")));
        }
        dy.rows_mut(r0, n).copy_from(g);
    }
    let dx_base = &dy * w.transpose();
    let hidden = p.hidden();
    Ok((0..p.len())
        .map(|i| {
            let (r0, n) = p.row_span(i);
            let (c0, r) = p.rank_span(i);
            let alpha = p.alphas[i];
            let a = p.a.columns(c0, r);
            let b = p.b.rows(c0, r);
            let dyi = &upstream[i];
            let db = alpha * (hidden[i].transpose() * dyi);
            let dhidden = alpha * (dyi * b.transpose());
            let da = p.x.rows(r0, n).transpose() * &dhidden;
            let dx = dx_base.rows(r0, n) + &dhidden * a.transpose();
            AdapterGrads {
                da,
                db,
                dhidden,
                dx,
            }
        })
        .collect())
}

/// Result of one finite-difference comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseReport {
    pub case: u8,
    pub quantity: &'static str,
    pub entries: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub cases: Vec<CaseReport>,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

/// Scalar loss `sum_i <dY_i, y_i>` whose gradients are the backward outputs.
fn loss(outputs: &[Matrix], upstream: &[Matrix]) -> f64 {
    outputs.iter().zip(upstream).map(|(y, g)| y.dot(g)).sum()
}

/// Loss as a function of the hidden activations, for the case-2 check.
fn loss_from_hidden(p: &PackedAdapters, w: &Matrix, hidden: &[Matrix], upstream: &[Matrix]) -> f64 {
    let base = &p.x * w;
    (0..p.len())
        .map(|i| {
            let (r0, n) = p.row_span(i);
            let (c0, r) = p.rank_span(i);
            let y = base.rows(r0, n) + p.alphas[i] * (&hidden[i] * p.b.rows(c0, r));
            y.dot(&upstream[i])
        })
        .sum()
}

/// Central differences of `f` over every entry of `m`, compared with `analytic`.
fn fd_max_error(
    m: &mut Matrix,
    analytic: &Matrix,
    mut f: impl FnMut(&Matrix) -> f64,
) -> (usize, f64) {
    let mut worst = 0.0_f64;
    for idx in 0..m.len() {
        let orig = m[idx];
        m[idx] = orig + FD_STEP;
        let plus = f(m);
        m[idx] = orig - FD_STEP;
        let minus = f(m);
        m[idx] = orig;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        worst = worst.max(rel_error(analytic[idx], numeric));
    }
    (m.len(), worst)
}

/// Checks all four gradient cases against central finite differences using
/// a random upstream gradient drawn from `seed`.
pub fn grad_check(p: &PackedAdapters, w: &Matrix, seed: u64) -> Result<GradCheckReport, LoraError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let upstream: Vec<Matrix> = (0..p.len())
        .map(|i| random_matrix(&mut rng, p.row_span(i).1, p.output_dim()))
        .collect();
    grad_check_with_upstream(p, w, &upstream)
}

pub fn grad_check_with_upstream(
    p: &PackedAdapters,
    w: &Matrix,
    upstream: &[Matrix],
) -> Result<GradCheckReport, LoraError> {
    let grads = packed_backward(p, w, upstream)?;
    let mut work = p.clone();
    let mut tally = [(0usize, 0.0_f64); 4];

    for (i, g) in grads.iter().enumerate() {
        let (c0, r) = p.rank_span(i);
        let (r0, n) = p.row_span(i);

        let mut b = p.adapter_b(i);
        let (e, err) = fd_max_error(&mut b, &g.db, |b| {
            work.b.rows_mut(c0, r).copy_from(b);
            loss(&packed_forward(&work, w).expect("shapes checked"), upstream)
        });
        work.b.rows_mut(c0, r).copy_from(&p.adapter_b(i));
        tally[0] = (tally[0].0 + e, tally[0].1.max(err));

        let mut hidden = p.hidden();
        let mut h = hidden[i].clone();
        let (e, err) = fd_max_error(&mut h, &g.dhidden, |h| {
            hidden[i].copy_from(h);
            loss_from_hidden(p, w, &hidden, upstream)
        });
        tally[1] = (tally[1].0 + e, tally[1].1.max(err));

        let mut a = p.adapter_a(i);
        let (e, err) = fd_max_error(&mut a, &g.da, |a| {
            work.a.columns_mut(c0, r).copy_from(a);
            loss(&packed_forward(&work, w).expect("shapes checked"), upstream)
        });
        work.a.columns_mut(c0, r).copy_from(&p.adapter_a(i));
        tally[2] = (tally[2].0 + e, tally[2].1.max(err));

        let mut x = p.input(i);
        let (e, err) = fd_max_error(&mut x, &g.dx, |x| {
            work.x.rows_mut(r0, n).copy_from(x);
            loss(&packed_forward(&work, w).expect("shapes checked"), upstream)
        });
        work.x.rows_mut(r0, n).copy_from(&p.input(i));
        tally[3] = (tally[3].0 + e, tally[3].1.max(err));
    }

    let names = ["dB", "dH", "dA", "dX"];
    let cases: Vec<CaseReport> = tally
        .iter()
        .zip(names)
        .enumerate()
        .map(|(c, (&(entries, max_rel_error), quantity))| CaseReport {
            case: c as u8 + 1,
            quantity,
            entries,
            max_rel_error,
            passed: max_rel_error < GRAD_TOLERANCE,
        })
        .collect();
    let max_rel_error = cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        cases,
        max_rel_error,
    })
}

/// Random pack with the given ranks and per-adapter row counts, plus a
/// random base weight. Entries are uniform in `[-1, 1)`, alphas in `[0.25, 4)`.
pub fn random_pack(
    rng: &mut impl Rng,
    ranks: &[usize],
    rows: &[usize],
    d: usize,
    k: usize,
) -> Result<(PackedAdapters, Matrix), LoraError> {
    let adapters: Vec<AdapterWeights> = ranks
        .iter()
        .map(|&r| AdapterWeights {
            a: random_matrix(rng, d, r),
            b: random_matrix(rng, r, k),
            alpha: rng.gen_range(0.25..4.0),
        })
        .collect();
    let inputs: Vec<Matrix> = rows.iter().map(|&n| random_matrix(rng, n, d)).collect();
    let w = random_matrix(rng, d, k);
    Ok((pack_adapters(&adapters, &inputs)?, w))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar() -> (PackedAdapters, Matrix) {
        let ad = AdapterWeights::new(
            Matrix::from_element(1, 1, 1.0),
            Matrix::from_element(1, 1, 1.0),
            0.5,
        )
        .unwrap();
        let p = pack_adapters(&[ad], &[Matrix::from_element(1, 1, 2.0)]).unwrap();
        (p, Matrix::from_element(1, 1, 3.0))
    }

    #[test]
    fn scalar_forward_and_backward() {
        let (p, w) = scalar();
        assert_eq!(packed_forward(&p, &w).unwrap()[0][0], 7.0);
        let g = &packed_backward(&p, &w, &[Matrix::from_element(1, 1, 1.0)]).unwrap()[0];
        assert_eq!(g.db[0], 1.0);
        assert_eq!(g.da[0], 1.0);
        assert_eq!(g.dx[0], 3.5);
        assert!(grad_check(&p, &w, 0).unwrap().passed());
    }

    #[test]
    fn offsets_are_prefix_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (p, _) = random_pack(&mut rng, &[8, 16], &[3, 5], 4, 2).unwrap();
        assert_eq!(p.rank_offsets, vec![0, 8, 24]);
        assert_eq!(p.row_offsets, vec![0, 3, 8]);
        let (ads, xs) = p.unpack();
        assert_eq!(pack_adapters(&ads, &xs).unwrap(), p);
    }

    #[test]
    fn vanishing_adapter_leaves_base_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (mut p, w) = random_pack(&mut rng, &[2, 3], &[4, 1], 5, 3).unwrap();
        p.alphas = vec![0.0, 0.0];
        let ys = packed_forward(&p, &w).unwrap();
        let dy: Vec<Matrix> = ys
            .iter()
            .map(|y| Matrix::from_element(y.nrows(), y.ncols(), 1.0))
            .collect();
        let gs = packed_backward(&p, &w, &dy).unwrap();
        for i in 0..2 {
            assert_eq!(ys[i], p.input(i) * &w);
            assert!(gs[i].da.iter().all(|v| *v == 0.0));
            assert!(gs[i].db.iter().all(|v| *v == 0.0));
            assert_eq!(gs[i].dx, &dy[i] * w.transpose());
        }

        let (mut p, w) = random_pack(&mut rng, &[2], &[3], 4, 4).unwrap();
        p.b.fill(0.0);
        assert_eq!(packed_forward(&p, &w).unwrap()[0], p.input(0) * &w);
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let ad = AdapterWeights::new(Matrix::zeros(3, 2), Matrix::zeros(2, 4), 1.0).unwrap();
        assert!(AdapterWeights::new(Matrix::zeros(3, 2), Matrix::zeros(3, 4), 1.0).is_err());
        assert!(pack_adapters(std::slice::from_ref(&ad), &[Matrix::zeros(2, 2)]).is_err());
        assert_eq!(pack_adapters(&[], &[]).unwrap_err(), LoraError::Empty);
        let p = pack_adapters(&[ad], &[Matrix::zeros(2, 3)]).unwrap();
        assert!(packed_forward(&p, &Matrix::zeros(4, 3)).is_err());
    }

    #[test]
    fn four_adapter_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (p, w) = random_pack(&mut rng, &[1, 2, 3, 4], &[2, 3, 1, 2], 6, 5).unwrap();
        let report = grad_check(&p, &w, 9).unwrap();
        assert!(report.passed(), "{report:?}");
        assert_eq!(report.cases.len(), 4);

        let zero: Vec<Matrix> = (0..4)
            .map(|i| Matrix::zeros(p.input(i).nrows(), 5))
            .collect();
        for g in packed_backward(&p, &w, &zero).unwrap() {
            assert!(g
                .da
                .iter()
                .chain(g.db.iter())
                .chain(g.dx.iter())
                .all(|v| *v == 0.0));
        }
    }
}
