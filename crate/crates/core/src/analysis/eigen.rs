//! Eigendecomposition of real nonsymmetric matrices.
//!
//! The real Schur form `A = Q T Q^T` comes from nalgebra. Eigenvectors of the
//! quasi-triangular `T` are then found by back substitution (one 1x1 or 2x2
//! diagonal block at a time) and mapped back through `Q`. Complex eigenvalues
//! come out as adjacent conjugate pairs, positive imaginary part first, with
//! exactly conjugate eigenvectors.

use nalgebra::{Complex, DMatrix, DVector};

use crate::error::{Error, Result};

type C64 = Complex<f64>;

#[derive(Debug, Clone)]
pub struct Eigen {
    pub values: Vec<C64>,
    /// Unit-norm eigenvectors, one per column.
    pub vectors: DMatrix<C64>,
    /// Index of each eigenvalue's conjugate partner, for non-real eigenvalues.
    pub partner: Vec<Option<usize>>,
}

enum Block {
    One(usize),
    Two(usize),
}

fn blocks(t: &DMatrix<f64>) -> Vec<Block> {
    let n = t.nrows();
    let mut out = Vec::new();
    let mut i = 0;
    while i < n {
        if i + 1 < n && t[(i + 1, i)] != 0.0 {
            out.push(Block::Two(i));
            i += 2;
        } else {
            out.push(Block::One(i));
            i += 1;
        }
    }
    out
}

fn eig2(a: f64, b: f64, c: f64, d: f64) -> (C64, C64) {
    let half_tr = 0.5 * (a + d);
    let disc = 0.25 * (a - d) * (a - d) + b * c;
    if disc >= 0.0 {
        let s = disc.sqrt();
        (C64::new(half_tr + s, 0.0), C64::new(half_tr - s, 0.0))
    } else {
        let s = (-disc).sqrt();
        (C64::new(half_tr, s), C64::new(half_tr, -s))
    }
}

/// Solves `(T_jj - lambda I) x = rhs` for a 1x1 or 2x2 diagonal block,
/// nudging near-zero pivots to `smin`.
fn solve_block(t: &DMatrix<f64>, j: usize, size: usize, lambda: C64, rhs: [C64; 2], smin: f64) -> [C64; 2] {
    let nudge = |z: C64| if z.norm() < smin { C64::new(smin, 0.0) } else { z };
    if size == 1 {
        let p = nudge(C64::new(t[(j, j)], 0.0) - lambda);
        [rhs[0] / p, C64::new(0.0, 0.0)]
    } else {
        let a = C64::new(t[(j, j)], 0.0) - lambda;
        let b = C64::new(t[(j, j + 1)], 0.0);
        let c = C64::new(t[(j + 1, j)], 0.0);
        let d = C64::new(t[(j + 1, j + 1)], 0.0) - lambda;
        let det = nudge(a * d - b * c);
        [(rhs[0] * d - b * rhs[1]) / det, (a * rhs[1] - c * rhs[0]) / det]
    }
}

/// Eigenvector of quasi-triangular `t` for eigenvalue `lambda` of the diagonal
/// block starting at `k` (size `size`).
fn triangular_eigenvector(t: &DMatrix<f64>, structure: &[Block], bi: usize, lambda: C64, smin: f64) -> DVector<C64> {
    let n = t.nrows();
    let mut x = DVector::from_element(n, C64::new(0.0, 0.0));
    let (k, size) = match structure[bi] {
        Block::One(k) => (k, 1),
        Block::Two(k) => (k, 2),
    };
    if size == 1 {
        x[k] = C64::new(1.0, 0.0);
    } else {
        let (a, b, c, d) = (t[(k, k)], t[(k, k + 1)], t[(k + 1, k)], t[(k + 1, k + 1)]);
        let v1 = (C64::new(b, 0.0), lambda - a);
        let v2 = (lambda - d, C64::new(c, 0.0));
        let (p, q) = if v1.0.norm() + v1.1.norm() >= v2.0.norm() + v2.1.norm() { v1 } else { v2 };
        x[k] = p;
        x[k + 1] = q;
    }
    let end = k + size;
    for blk in structure[..bi].iter().rev() {
        let (j, sj) = match *blk {
            Block::One(j) => (j, 1),
            Block::Two(j) => (j, 2),
        };
        let mut rhs = [C64::new(0.0, 0.0); 2];
        for (r, slot) in rhs.iter_mut().enumerate().take(sj) {
            let row = j + r;
            let mut acc = C64::new(0.0, 0.0);
            for m in j + sj..end {
                acc += x[m] * t[(row, m)];
            }
            *slot = -acc;
        }
        let sol = solve_block(t, j, sj, lambda, rhs, smin);
        for r in 0..sj {
            x[j + r] = sol[r];
        }
        let big = x.iter().fold(0.0_f64, |m, z| m.max(z.norm()));
        if big > 1e100 {
            x.unscale_mut(big);
        }
    }
    let norm = x.norm();
    if norm > 0.0 {
        x.unscale_mut(norm);
    }
    x
}

/// Eigenvalues and eigenvectors of a real square matrix.
pub fn eigen_decompose(a: &DMatrix<f64>) -> Result<Eigen> {
    let n = a.nrows();
    if n != a.ncols() {
        return Err(Error::DimensionMismatch(format!("matrix is {}x{}, not square", n, a.ncols())));
    }
    if n == 0 {
        return Ok(Eigen {
            values: Vec::new(),
            vectors: DMatrix::zeros(0, 0),
            partner: Vec::new(),
        });
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("matrix has non-finite entries".into()));
    }
    let schur = a
        .clone()
        .try_schur(f64::EPSILON, 100 * n.max(10))
        .ok_or_else(|| Error::Numerical("Schur iteration did not converge".into()))?;
    let (q, t) = schur.unpack();
    let structure = blocks(&t);
    let scale = t.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let smin = f64::EPSILON * scale;

    let mut values = Vec::with_capacity(n);
    let mut partner = Vec::with_capacity(n);
    let mut tri_vectors = DMatrix::from_element(n, n, C64::new(0.0, 0.0));
    for (bi, blk) in structure.iter().enumerate() {
        match *blk {
            Block::One(k) => {
                let lambda = C64::new(t[(k, k)], 0.0);
                let v = triangular_eigenvector(&t, &structure, bi, lambda, smin);
                tri_vectors.set_column(values.len(), &v);
                values.push(lambda);
                partner.push(None);
            }
            Block::Two(k) => {
                let (l1, l2) = eig2(t[(k, k)], t[(k, k + 1)], t[(k + 1, k)], t[(k + 1, k + 1)]);
                if l1.im != 0.0 {
                    let v = triangular_eigenvector(&t, &structure, bi, l1, smin);
                    let idx = values.len();
                    tri_vectors.set_column(idx, &v);
                    tri_vectors.set_column(idx + 1, &v.map(|z| z.conj()));
                    values.push(l1);
                    values.push(l2);
                    partner.push(Some(idx + 1));
                    partner.push(Some(idx));
                } else {
                    // real pair left in a 2x2 block
                    for l in [l1, l2] {
                        let v = triangular_eigenvector(&t, &structure, bi, l, smin);
                        tri_vectors.set_column(values.len(), &v);
                        values.push(l);
                        partner.push(None);
                    }
                }
            }
        }
    }
    let qc = q.map(|v| C64::new(v, 0.0));
    let mut vectors = qc * tri_vectors;
    for mut col in vectors.column_iter_mut() {
        let norm = col.norm();
        if norm > 0.0 {
            col.unscale_mut(norm);
        }
    }
    // keep pair columns exactly conjugate after the product
    for i in 0..n {
        if let Some(p) = partner[i] {
            if p > i {
                let c = vectors.column(i).map(|z| z.conj());
                vectors.set_column(p, &c);
            }
        }
    }
    Ok(Eigen {
        values,
        vectors,
        partner,
    })
}

/// `||Z diag(lambda) Z^-1 - A||_F / ||A||_F` (absolute when `A = 0`), with `Z^-1`.
pub fn reconstruction_residual(a: &DMatrix<f64>, eig: &Eigen) -> Result<(f64, DMatrix<C64>)> {
    let n = a.nrows();
    let inv = eig
        .vectors
        .clone()
        .lu()
        .try_inverse()
        .ok_or_else(|| Error::NearDefective(f64::INFINITY))?;
    let mut zl = eig.vectors.clone();
    for (j, mut col) in zl.column_iter_mut().enumerate() {
        col *= eig.values[j];
    }
    let rec = zl * &inv;
    let mut diff = 0.0;
    for i in 0..n {
        for j in 0..n {
            diff += (rec[(i, j)] - C64::new(a[(i, j)], 0.0)).norm_sqr();
        }
    }
    let norm = a.norm();
    let res = if norm > 0.0 { diff.sqrt() / norm } else { diff.sqrt() };
    Ok((if res.is_finite() { res } else { f64::INFINITY }, inv))
}
