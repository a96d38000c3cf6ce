//! Spatial ops: 2-d cross-correlation ("convolution"), 2x2 average pooling,
//! and nearest-neighbor x2 upsampling, with their backward rules.
//!
//! Layout is `[N, C, H, W]` row-major throughout. The inner loops run over
//! contiguous row spans so they vectorize; large planes are distributed over
//! rayon workers in fixed disjoint chunks, which keeps results bitwise
//! deterministic regardless of scheduling.

use rayon::prelude::*;

use super::{Op, Tape, TensorId};
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot};

/// Below this many multiply-adds the rayon dispatch overhead dominates.
const PAR_THRESHOLD: usize = 1 << 21;

impl Tape {
    /// Cross-correlation (no kernel flip) with zero-fill padding.
    ///
    /// `x: [N,Cin,H,W]`, `weight: [Cout,Cin,k,k]`, `bias: [Cout]`; `k` odd.
    /// With `padding = (k-1)/2` the spatial shape is preserved.
    pub fn conv2d(
        &mut self,
        x: TensorId,
        weight: TensorId,
        bias: TensorId,
        padding: usize,
    ) -> Result<TensorId> {
        let xs = self.node_shape(x).to_vec();
        let ws = self.node_shape(weight).to_vec();
        let bs = self.node_shape(bias).to_vec();
        if xs.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!("input must be [N,Cin,H,W], got {:?}", xs),
            });
        }
        if ws.len() != 4 || ws[2] != ws[3] || ws[2] % 2 == 0 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!("weight must be [Cout,Cin,k,k] with odd k, got {:?}", ws),
            });
        }
        if ws[1] != xs[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!("input channels {} vs weight in-channels {}", xs[1], ws[1]),
            });
        }
        if bs != [ws[0]] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!("bias shape {:?} vs out channels {}", bs, ws[0]),
            });
        }
        let (n, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, k) = (ws[0], ws[2]);
        let (h2, w2) = out_spatial(h, w, k, padding)?;

        let mut out = vec![0.0; n * cout * h2 * w2];
        let xd = self.node_data(x);
        let wd = self.node_data(weight);
        let bd = self.node_data(bias);

        let work = n * cout * cin * k * k * h2 * w2;
        let plane = |chunk: &mut [f64], idx: usize| {
            let (ni, oc) = (idx / cout, idx % cout);
            chunk.fill(bd[oc]);
            for ic in 0..cin {
                let xplane = &xd[(ni * cin + ic) * h * w..(ni * cin + ic + 1) * h * w];
                for ki in 0..k {
                    for kj in 0..k {
                        let wv = wd[((oc * cin + ic) * k + ki) * k + kj];
                        if wv == 0.0 {
                            continue;
                        }
                        accumulate_shifted(chunk, xplane, wv, h, w, h2, w2, ki, kj, padding);
                    }
                }
            }
        };
        if work >= PAR_THRESHOLD {
            out.par_chunks_mut(h2 * w2).enumerate().for_each(|(idx, chunk)| plane(chunk, idx));
        } else {
            out.chunks_mut(h2 * w2).enumerate().for_each(|(idx, chunk)| plane(chunk, idx));
        }

        let rg = self.node_requires(x) || self.node_requires(weight) || self.node_requires(bias);
        Ok(self.push_node(
            Op::Conv2d { x, w: weight, b: bias, padding },
            vec![n, cout, h2, w2],
            out,
            rg,
        ))
    }

    /// 2x2 average pooling; each output cell is the mean of its block.
    pub fn avg_pool2(&mut self, x: TensorId) -> Result<TensorId> {
        let xs = self.node_shape(x).to_vec();
        if xs.len() != 4 || xs[2] % 2 != 0 || xs[3] % 2 != 0 {
            return Err(Error::ShapeMismatch {
                op: "avg_pool2",
                detail: format!("need [N,C,H,W] with even H and W, got {:?}", xs),
            });
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (h2, w2) = (h / 2, w / 2);
        let xd = self.node_data(x);
        let mut out = vec![0.0; n * c * h2 * w2];
        for p in 0..n * c {
            let src = &xd[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
            for oy in 0..h2 {
                let r0 = &src[2 * oy * w..2 * oy * w + w];
                let r1 = &src[(2 * oy + 1) * w..(2 * oy + 1) * w + w];
                let drow = &mut dst[oy * w2..(oy + 1) * w2];
                for ox in 0..w2 {
                    drow[ox] = (r0[2 * ox] + r0[2 * ox + 1] + r1[2 * ox] + r1[2 * ox + 1]) * 0.25;
                }
            }
        }
        let rg = self.node_requires(x);
        Ok(self.push_node(Op::AvgPool2 { x }, vec![n, c, h2, w2], out, rg))
    }

    /// Nearest-neighbor x2 upsampling; each value fills a 2x2 block.
    pub fn upsample_nearest2(&mut self, x: TensorId) -> Result<TensorId> {
        let xs = self.node_shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "upsample_nearest2",
                detail: format!("need [N,C,H,W], got {:?}", xs),
            });
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let xd = self.node_data(x);
        let mut out = vec![0.0; n * c * 4 * h * w];
        let (h2, w2) = (2 * h, 2 * w);
        for p in 0..n * c {
            let src = &xd[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
            for y in 0..h {
                let srow = &src[y * w..(y + 1) * w];
                for dy in 0..2 {
                    let drow = &mut dst[(2 * y + dy) * w2..(2 * y + dy + 1) * w2];
                    for x2 in 0..w {
                        drow[2 * x2] = srow[x2];
                        drow[2 * x2 + 1] = srow[x2];
                    }
                }
            }
        }
        let rg = self.node_requires(x);
        Ok(self.push_node(Op::Upsample2 { x }, vec![n, c, h2, w2], out, rg))
    }
}

fn out_spatial(h: usize, w: usize, k: usize, p: usize) -> Result<(usize, usize)> {
    let h2 = (h + 2 * p).checked_sub(k - 1).filter(|v| *v > 0);
    let w2 = (w + 2 * p).checked_sub(k - 1).filter(|v| *v > 0);
    match (h2, w2) {
        (Some(a), Some(b)) => Ok((a, b)),
        _ => Err(Error::ShapeMismatch {
            op: "conv2d",
            detail: format!("kernel {}x{} with padding {} exceeds input {}x{}", k, k, p, h, w),
        }),
    }
}

/// `out[oy][ox] += wv * src[oy+ki-p][ox+kj-p]` over the in-bounds span.
#[inline]
fn accumulate_shifted(
    out: &mut [f64],
    src: &[f64],
    wv: f64,
    h: usize,
    w: usize,
    h2: usize,
    w2: usize,
    ki: usize,
    kj: usize,
    p: usize,
) {
    let dy = ki as isize - p as isize;
    let dx = kj as isize - p as isize;
    let ox0 = (-dx).max(0) as usize;
    let ox1 = (w as isize - dx).min(w2 as isize).max(0) as usize;
    if ox0 >= ox1 {
        return;
    }
    for oy in 0..h2 {
        let iy = oy as isize + dy;
        if iy < 0 || iy >= h as isize {
            continue;
        }
        let srow = &src[iy as usize * w..(iy as usize + 1) * w];
        let orow = &mut out[oy * w2..(oy + 1) * w2];
        let ix0 = (ox0 as isize + dx) as usize;
        axpy(&mut orow[ox0..ox1], wv, &srow[ix0..ix0 + (ox1 - ox0)]);
    }
}

/// Dot of the valid span: `sum_ox g[oy][ox] * src[oy+ki-p][ox+kj-p]`.
#[inline]
fn dot_shifted(
    g: &[f64],
    src: &[f64],
    h: usize,
    w: usize,
    h2: usize,
    w2: usize,
    ki: usize,
    kj: usize,
    p: usize,
) -> f64 {
    let dy = ki as isize - p as isize;
    let dx = kj as isize - p as isize;
    let ox0 = (-dx).max(0) as usize;
    let ox1 = (w as isize - dx).min(w2 as isize).max(0) as usize;
    if ox0 >= ox1 {
        return 0.0;
    }
    let mut acc = 0.0;
    for oy in 0..h2 {
        let iy = oy as isize + dy;
        if iy < 0 || iy >= h as isize {
            continue;
        }
        let srow = &src[iy as usize * w..(iy as usize + 1) * w];
        let grow = &g[oy * w2..(oy + 1) * w2];
        let ix0 = (ox0 as isize + dx) as usize;
        acc += dot(&grow[ox0..ox1], &srow[ix0..ix0 + (ox1 - ox0)]);
    }
    acc
}

pub(super) fn backward(tape: &mut Tape, node: usize, op: &Op, g: &[f64]) {
    match op {
        Op::Conv2d { x, w: weight, b: bias, padding } => {
            let xs = tape.node_shape(*x).to_vec();
            let ws = tape.node_shape(*weight).to_vec();
            let os = tape.nodes[node].shape.clone();
            let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
            let (cout, k) = (ws[0], ws[2]);
            let (h2, w2) = (os[2], os[3]);
            let p = *padding;

            if tape.node_requires(*bias) {
                let mut gb = vec![0.0; cout];
                for ni in 0..n {
                    for (oc, gbv) in gb.iter_mut().enumerate() {
                        let plane = &g[(ni * cout + oc) * h2 * w2..(ni * cout + oc + 1) * h2 * w2];
                        *gbv += plane.iter().sum::<f64>();
                    }
                }
                axpy(tape.node_grad_buf(*bias), 1.0, &gb);
            }

            if tape.node_requires(*weight) {
                let xd = tape.node_data(*x);
                let mut gw = vec![0.0; cout * cin * k * k];
                let work = n * cout * cin * k * k * h2 * w2;
                let patch = |chunk: &mut [f64], idx: usize| {
                    let (oc, ic) = (idx / cin, idx % cin);
                    for ki in 0..k {
                        for kj in 0..k {
                            let mut acc = 0.0;
                            for ni in 0..n {
                                let gp = &g[(ni * cout + oc) * h2 * w2
                                    ..(ni * cout + oc + 1) * h2 * w2];
                                let xp = &xd
                                    [(ni * cin + ic) * h * wd..(ni * cin + ic + 1) * h * wd];
                                acc += dot_shifted(gp, xp, h, wd, h2, w2, ki, kj, p);
                            }
                            chunk[ki * k + kj] = acc;
                        }
                    }
                };
                if work >= PAR_THRESHOLD {
                    gw.par_chunks_mut(k * k).enumerate().for_each(|(i, c)| patch(c, i));
                } else {
                    gw.chunks_mut(k * k).enumerate().for_each(|(i, c)| patch(c, i));
                }
                axpy(tape.node_grad_buf(*weight), 1.0, &gw);
            }

            if tape.node_requires(*x) {
                let wdat = tape.node_data(*weight);
                let mut gx = vec![0.0; n * cin * h * wd];
                let work = n * cout * cin * k * k * h2 * w2;
                let plane = |chunk: &mut [f64], idx: usize| {
                    let (ni, ic) = (idx / cin, idx % cin);
                    for oc in 0..cout {
                        let gp =
                            &g[(ni * cout + oc) * h2 * w2..(ni * cout + oc + 1) * h2 * w2];
                        for ki in 0..k {
                            for kj in 0..k {
                                let wv = wdat[((oc * cin + ic) * k + ki) * k + kj];
                                if wv == 0.0 {
                                    continue;
                                }
                                // gx[oy+ki-p][ox+kj-p] += wv * g[oy][ox]: the
                                // transpose of the forward accumulate.
                                scatter_shifted(chunk, gp, wv, h, wd, h2, w2, ki, kj, p);
                            }
                        }
                    }
                };
                if work >= PAR_THRESHOLD {
                    gx.par_chunks_mut(h * wd).enumerate().for_each(|(i, c)| plane(c, i));
                } else {
                    gx.chunks_mut(h * wd).enumerate().for_each(|(i, c)| plane(c, i));
                }
                axpy(tape.node_grad_buf(*x), 1.0, &gx);
            }
        }
        Op::AvgPool2 { x } => {
            if tape.node_requires(*x) {
                let xs = tape.node_shape(*x).to_vec();
                let (nc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
                let (h2, w2) = (h / 2, w / 2);
                let mut gx = vec![0.0; nc * h * w];
                for pidx in 0..nc {
                    let gp = &g[pidx * h2 * w2..(pidx + 1) * h2 * w2];
                    let dst = &mut gx[pidx * h * w..(pidx + 1) * h * w];
                    for oy in 0..h2 {
                        for ox in 0..w2 {
                            let gv = gp[oy * w2 + ox] * 0.25;
                            dst[2 * oy * w + 2 * ox] += gv;
                            dst[2 * oy * w + 2 * ox + 1] += gv;
                            dst[(2 * oy + 1) * w + 2 * ox] += gv;
                            dst[(2 * oy + 1) * w + 2 * ox + 1] += gv;
                        }
                    }
                }
                axpy(tape.node_grad_buf(*x), 1.0, &gx);
            }
        }
        Op::Upsample2 { x } => {
            if tape.node_requires(*x) {
                let xs = tape.node_shape(*x).to_vec();
                let (nc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
                let (h2, w2) = (2 * h, 2 * w);
                let mut gx = vec![0.0; nc * h * w];
                for pidx in 0..nc {
                    let gp = &g[pidx * h2 * w2..(pidx + 1) * h2 * w2];
                    let dst = &mut gx[pidx * h * w..(pidx + 1) * h * w];
                    for y in 0..h {
                        for x2 in 0..w {
                            dst[y * w + x2] += gp[2 * y * w2 + 2 * x2]
                                + gp[2 * y * w2 + 2 * x2 + 1]
                                + gp[(2 * y + 1) * w2 + 2 * x2]
                                + gp[(2 * y + 1) * w2 + 2 * x2 + 1];
                        }
                    }
                }
                axpy(tape.node_grad_buf(*x), 1.0, &gx);
            }
        }
        _ => unreachable!("conv::backward dispatched with a non-spatial op"),
    }
}

/// `out[oy+ki-p][ox+kj-p] += wv * g[oy][ox]` over the in-bounds span.
#[inline]
fn scatter_shifted(
    out: &mut [f64],
    g: &[f64],
    wv: f64,
    h: usize,
    w: usize,
    h2: usize,
    w2: usize,
    ki: usize,
    kj: usize,
    p: usize,
) {
    let dy = ki as isize - p as isize;
    let dx = kj as isize - p as isize;
    let ox0 = (-dx).max(0) as usize;
    let ox1 = (w as isize - dx).min(w2 as isize).max(0) as usize;
    if ox0 >= ox1 {
        return;
    }
    for oy in 0..h2 {
        let iy = oy as isize + dy;
        if iy < 0 || iy >= h as isize {
            continue;
        }
        let grow = &g[oy * w2..(oy + 1) * w2];
        let orow = &mut out[iy as usize * w..(iy as usize + 1) * w];
        let ix0 = (ox0 as isize + dx) as usize;
        axpy(&mut orow[ix0..ix0 + (ox1 - ox0)], wv, &grow[ox0..ox1]);
    }
}

#[cfg(test)]
mod tests {
    use super::super::testutil::{grad_check, rand_tensor};
    use super::super::{Tape, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_kernel_is_identity() {
        let x = Tensor::new(vec![1, 1, 3, 3], (1..=9).map(|v| v as f64).collect());
        let w = Tensor::new(vec![1, 1, 1, 1], vec![1.0]);
        let b = Tensor::new(vec![1], vec![0.0]);
        let mut tape = Tape::new();
        let (xi, wi, bi) = (tape.leaf(&x), tape.leaf(&w), tape.leaf(&b));
        let y = tape.conv2d(xi, wi, bi, 0).unwrap();
        assert_eq!(tape.data(y), x.data.as_slice());
    }

    #[test]
    fn all_ones_3x3_on_2x2_input() {
        // Hand-evaluated cross-correlation: every output cell sees all four
        // ones of the input through the padded window.
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0; 4]);
        let w = Tensor::new(vec![1, 1, 3, 3], vec![1.0; 9]);
        let b = Tensor::new(vec![1], vec![0.0]);
        let mut tape = Tape::new();
        let (xi, wi, bi) = (tape.leaf(&x), tape.leaf(&w), tape.leaf(&b));
        let y = tape.conv2d(xi, wi, bi, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 2, 2]);
        assert_eq!(tape.data(y), &[4.0, 4.0, 4.0, 4.0]);
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let x = Tensor::new(vec![1, 2, 4, 4], vec![0.0; 32]);
        let w = Tensor::new(vec![3, 1, 3, 3], vec![0.0; 27]);
        let b = Tensor::new(vec![3], vec![0.0; 3]);
        let mut tape = Tape::new();
        let (xi, wi, bi) = (tape.leaf(&x), tape.leaf(&w), tape.leaf(&b));
        let err = tape.conv2d(xi, wi, bi, 1).unwrap_err();
        assert!(err.to_string().contains("channels"));
    }

    #[test]
    fn conv2d_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let params = vec![
            rand_tensor(vec![2, 2, 5, 5], &mut rng),
            rand_tensor(vec![3, 2, 3, 3], &mut rng),
            rand_tensor(vec![3], &mut rng),
        ];
        grad_check(
            &|tape, p| {
                let x = tape.leaf(&p[0]);
                let w = tape.leaf(&p[1]);
                let b = tape.leaf(&p[2]);
                let y = tape.conv2d(x, w, b, 1).unwrap();
                let s = tape.square(y);
                tape.sum(s)
            },
            &params,
            100,
            1e-5,
            1e-4,
            32,
        );
    }

    #[test]
    fn avg_pool_values() {
        let mut tape = Tape::new();
        let c = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 1.0, 1.0, 1.0]);
        let ci = tape.leaf(&c);
        let y = tape.avg_pool2(ci).unwrap();
        assert_eq!(tape.data(y), &[1.0]);

        let v = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let vi = tape.leaf(&v);
        let y2 = tape.avg_pool2(vi).unwrap();
        assert_eq!(tape.data(y2), &[2.5]);
    }

    #[test]
    fn avg_pool_rejects_odd_sizes() {
        let mut tape = Tape::new();
        let c = Tensor::new(vec![1, 1, 3, 2], vec![0.0; 6]);
        let ci = tape.leaf(&c);
        assert!(tape.avg_pool2(ci).is_err());
    }

    #[test]
    fn upsample_replicates_blocks() {
        let mut tape = Tape::new();
        let c = Tensor::new(vec![1, 1, 1, 1], vec![5.0]);
        let ci = tape.leaf(&c);
        let y = tape.upsample_nearest2(ci).unwrap();
        assert_eq!(tape.data(y), &[5.0, 5.0, 5.0, 5.0]);
    }

    #[test]
    fn pool_inverts_upsample_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let x = rand_tensor(vec![2, 3, 4, 4], &mut rng);
        let mut tape = Tape::new();
        let xi = tape.leaf(&x);
        let up = tape.upsample_nearest2(xi).unwrap();
        let back = tape.avg_pool2(up).unwrap();
        assert!(tape
            .data(back)
            .iter()
            .zip(&x.data)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]
        /// Pooling inverts upsampling exactly, and blockwise means survive a
        /// pool/upsample round trip, for arbitrary shapes and values.
        #[test]
        fn pool_upsample_block_mean_property(
            n in 1usize..3,
            c in 1usize..4,
            h in 1usize..5,
            w in 1usize..5,
            seed in 0u64..u64::MAX,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = rand_tensor(vec![n, c, 2 * h, 2 * w], &mut rng);
            let mut tape = Tape::new();
            let xi = tape.leaf(&x);
            let up = tape.upsample_nearest2(xi).unwrap();
            let down = tape.avg_pool2(up).unwrap();
            proptest::prop_assert!(tape
                .data(down)
                .iter()
                .zip(&x.data)
                .all(|(a, b)| a.to_bits() == b.to_bits()));

            // Per-block means are preserved by pool followed by upsample.
            let pooled = tape.avg_pool2(xi).unwrap();
            let restored = tape.upsample_nearest2(pooled).unwrap();
            let re_pooled = tape.avg_pool2(restored).unwrap();
            proptest::prop_assert!(tape
                .data(re_pooled)
                .iter()
                .zip(tape.data(pooled))
                .all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn pool_and_upsample_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let params = vec![rand_tensor(vec![1, 2, 4, 4], &mut rng)];
        grad_check(
            &|tape, p| {
                let x = tape.leaf(&p[0]);
                let d = tape.avg_pool2(x).unwrap();
                let u = tape.upsample_nearest2(d).unwrap();
                let s = tape.square(u);
                tape.mean(s)
            },
            &params,
            40,
            1e-5,
            1e-4,
            35,
        );
    }
}
