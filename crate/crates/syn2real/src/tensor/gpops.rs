//! Differentiable pieces of the GP loss: kernel Gram blocks against constant
//! bank rows, solves against a constant SPD factor, and the combined
//! Mahalanobis + log-determinant scalar.
//!
//! Only the query side of each kernel block is differentiable; the bank rows
//! and the Gram factor are constants of the current step. The posterior mean
//! never appears here at all, so no gradient can flow into it.

use std::rc::Rc;

use super::{Op, Tape, TensorId};
use crate::error::{Error, Result};
use crate::gp::{gram, row_norms, ConstRows, KernelSpec};
use crate::linalg::{axpy, dot, sq_dist, Chol, Mat};

impl Tape {
    /// Kernel Gram block `K(a_i, rows_j)` with `a` variable and `rows` const.
    pub fn kernel_gram_const(
        &mut self,
        a: TensorId,
        rows: Rc<ConstRows>,
        spec: KernelSpec,
    ) -> Result<TensorId> {
        let s = self.node_shape(a).to_vec();
        if s.len() != 2 || s[1] != rows.mat.cols {
            return Err(Error::ShapeMismatch {
                op: "kernel_gram_const",
                detail: format!("{:?} against rows of dim {}", s, rows.mat.cols),
            });
        }
        let a_mat = Mat { rows: s[0], cols: s[1], data: self.node_data(a).to_vec() };
        let out = gram(&spec, &a_mat, &rows.mat)?;
        let rg = self.node_requires(a);
        let shape = vec![out.rows, out.cols];
        Ok(self.push_node(Op::KernelGramConst { a, rows, spec }, shape, out.data, rg))
    }

    /// Kernel Gram of `a` against itself (both sides variable).
    pub fn kernel_gram_self(&mut self, a: TensorId, spec: KernelSpec) -> Result<TensorId> {
        let s = self.node_shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "kernel_gram_self",
                detail: format!("{:?} is not 2-d", s),
            });
        }
        let a_mat = Mat { rows: s[0], cols: s[1], data: self.node_data(a).to_vec() };
        let out = gram(&spec, &a_mat, &a_mat)?;
        let rg = self.node_requires(a);
        let shape = vec![out.rows, out.cols];
        Ok(self.push_node(Op::KernelGramSelf { a, spec }, shape, out.data, rg))
    }

    /// `A^{-1} x` against a constant SPD factor (triangular solves only).
    pub fn solve_const_spd(&mut self, chol: Rc<Chol>, x: TensorId) -> Result<TensorId> {
        let s = self.node_shape(x).to_vec();
        if s.len() != 2 || s[0] != chol.dim() {
            return Err(Error::ShapeMismatch {
                op: "solve_const_spd",
                detail: format!("{:?} against factor of dim {}", s, chol.dim()),
            });
        }
        let x_mat = Mat { rows: s[0], cols: s[1], data: self.node_data(x).to_vec() };
        let out = chol.solve(&x_mat);
        let rg = self.node_requires(x);
        Ok(self.push_node(Op::SolveConstSpd { chol, x }, s, out.data, rg))
    }

    /// `tr(delta^T sigma^{-1} delta) / d + log|sigma|` for a small covariance
    /// `sigma [m,m]` and residual `delta [m,d]`.
    ///
    /// `sigma` is symmetrized before factoring so the value depends on the
    /// symmetric part only, consistently with the backward rule. Fails with a
    /// factorization error when `sigma` is not positive definite.
    pub fn gaussian_quad_logdet(&mut self, sigma: TensorId, delta: TensorId) -> Result<TensorId> {
        let ss = self.node_shape(sigma).to_vec();
        let ds = self.node_shape(delta).to_vec();
        if ss.len() != 2 || ss[0] != ss[1] || ds.len() != 2 || ds[0] != ss[0] {
            return Err(Error::ShapeMismatch {
                op: "gaussian_quad_logdet",
                detail: format!("sigma {:?} with delta {:?}", ss, ds),
            });
        }
        let (m, d) = (ds[0], ds[1]);
        let sd = self.node_data(sigma);
        let sym = Mat::from_fn(m, m, |i, j| 0.5 * (sd[i * m + j] + sd[j * m + i]));
        let chol = Chol::factor(&sym)?;
        let delta_mat = Mat { rows: m, cols: d, data: self.node_data(delta).to_vec() };
        let sinv_delta = chol.solve(&delta_mat);
        let quad = dot(&delta_mat.data, &sinv_delta.data) / d as f64;
        let value = quad + chol.logdet();
        let rg = self.node_requires(sigma) || self.node_requires(delta);
        Ok(self.push_node(
            Op::GaussianQuadLogdet {
                sigma,
                delta,
                chol: Rc::new(chol),
                sinv_delta: sinv_delta.data,
            },
            vec![1],
            vec![value],
            rg,
        ))
    }
}

/// `out_row += scale * d k(a, b) / d a` for one kernel evaluation.
#[inline]
fn accum_grad_wrt_first(
    spec: &KernelSpec,
    a: &[f64],
    b: &[f64],
    na: f64,
    nb: f64,
    k: f64,
    scale: f64,
    out: &mut [f64],
) {
    match *spec {
        KernelSpec::Lin => {
            if na == 0.0 || nb == 0.0 {
                return;
            }
            axpy(out, scale / (na * nb), b);
            axpy(out, -scale * k / (na * na), a);
        }
        KernelSpec::Se { length_scale } => {
            let c = scale * k / (length_scale * length_scale);
            axpy(out, c, b);
            axpy(out, -c, a);
        }
        KernelSpec::Rq { length_scale, alpha } => {
            let two_l2 = 2.0 * length_scale * length_scale;
            let base = 1.0 + sq_dist(a, b) / (alpha * two_l2);
            let c = scale * base.powf(-alpha - 1.0) * 2.0 / two_l2;
            axpy(out, c, b);
            axpy(out, -c, a);
        }
    }
}

pub(super) fn backward(tape: &mut Tape, node: usize, op: &Op, g: &[f64]) {
    match op {
        Op::KernelGramConst { a, rows, spec } => {
            if !tape.node_requires(*a) {
                return;
            }
            let s = tape.node_shape(*a).to_vec();
            let (m, dim) = (s[0], s[1]);
            let n = rows.mat.rows;
            let k_vals = tape.nodes[node].data.clone();
            let a_data = tape.node_data(*a).to_vec();
            let a_mat = Mat { rows: m, cols: dim, data: a_data };
            let na = row_norms(&a_mat);
            let mut ga = vec![0.0; m * dim];
            for i in 0..m {
                let arow = a_mat.row(i);
                let out = &mut ga[i * dim..(i + 1) * dim];
                for j in 0..n {
                    let gv = g[i * n + j];
                    if gv == 0.0 {
                        continue;
                    }
                    accum_grad_wrt_first(
                        spec,
                        arow,
                        rows.mat.row(j),
                        na[i],
                        rows.norms[j],
                        k_vals[i * n + j],
                        gv,
                        out,
                    );
                }
            }
            axpy(tape.node_grad_buf(*a), 1.0, &ga);
        }
        Op::KernelGramSelf { a, spec } => {
            if !tape.node_requires(*a) {
                return;
            }
            let s = tape.node_shape(*a).to_vec();
            let (m, dim) = (s[0], s[1]);
            let k_vals = tape.nodes[node].data.clone();
            let a_data = tape.node_data(*a).to_vec();
            let a_mat = Mat { rows: m, cols: dim, data: a_data };
            let na = row_norms(&a_mat);
            let mut ga = vec![0.0; m * dim];
            // dL/da_p = sum_j (g_pj + g_jp) * d k(a_p, a_j) / d a_p.
            for p in 0..m {
                let arow = a_mat.row(p);
                let out = &mut ga[p * dim..(p + 1) * dim];
                for j in 0..m {
                    let gv = g[p * m + j] + g[j * m + p];
                    if gv == 0.0 {
                        continue;
                    }
                    accum_grad_wrt_first(
                        spec,
                        arow,
                        a_mat.row(j),
                        na[p],
                        na[j],
                        k_vals[p * m + j],
                        gv,
                        out,
                    );
                }
            }
            axpy(tape.node_grad_buf(*a), 1.0, &ga);
        }
        Op::SolveConstSpd { chol, x } => {
            if !tape.node_requires(*x) {
                return;
            }
            let s = tape.node_shape(*x).to_vec();
            let g_mat = Mat { rows: s[0], cols: s[1], data: g.to_vec() };
            let gx = chol.solve(&g_mat);
            axpy(tape.node_grad_buf(*x), 1.0, &gx.data);
        }
        Op::GaussianQuadLogdet { sigma, delta, chol, sinv_delta } => {
            let ds = tape.node_shape(*delta).to_vec();
            let (m, d) = (ds[0], ds[1]);
            let gv = g[0];
            if tape.node_requires(*delta) {
                let mut gd = sinv_delta.clone();
                for v in gd.iter_mut() {
                    *v *= 2.0 * gv / d as f64;
                }
                axpy(tape.node_grad_buf(*delta), 1.0, &gd);
            }
            if tape.node_requires(*sigma) {
                // d/dSigma = Sigma^{-1} - Sigma^{-1} (Delta Delta^T / d) Sigma^{-1},
                // already symmetric, so the symmetrization chain is a no-op.
                let sinv = chol.solve(&Mat::identity(m));
                let p = Mat { rows: m, cols: d, data: sinv_delta.clone() };
                let ppt = p.mul_bt(&p);
                let mut gs = vec![0.0; m * m];
                for i in 0..m * m {
                    gs[i] = gv * (sinv.data[i] - ppt.data[i] / d as f64);
                }
                axpy(tape.node_grad_buf(*sigma), 1.0, &gs);
            }
        }
        _ => unreachable!("gpops::backward dispatched with a non-gp op"),
    }
}
