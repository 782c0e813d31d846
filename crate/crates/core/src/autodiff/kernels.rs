//! Dense compute kernels behind the graph ops.
//!
//! Activations are laid out row-major as `[c][z][y][x]` (x fastest) and
//! convolution weights as `[co][ci][kz][ky][kx]`. Every kernel accumulates in
//! a fixed order per output element, so results are bitwise deterministic
//! even when the outer loops run on the rayon pool.

use rayon::prelude::*;

/// Geometry shared by the convolution kernels.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub co: usize,
    pub ci: usize,
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub kx: usize,
    pub ky: usize,
    pub kz: usize,
}

impl ConvGeom {
    #[inline]
    pub fn spatial(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    #[inline]
    fn weight_index(&self, co: usize, ci: usize, kz: usize, ky: usize, kx: usize) -> usize {
        (((co * self.ci + ci) * self.kz + kz) * self.ky + ky) * self.kx + kx
    }
}

// Work threshold below which parallel dispatch is not worth the overhead.
const PAR_MIN_MACS: usize = 1 << 15;

#[inline]
fn axpy(out: &mut [f64], inp: &[f64], w: f64) {
    for (o, i) in out.iter_mut().zip(inp.iter()) {
        *o += w * *i;
    }
}

/// Fixed-association dot product (8 partial lanes), deterministic and
/// SIMD-friendly.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut lanes = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let ra = ca.remainder();
    let rb = cb.remainder();
    for (pa, pb) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] += pa[l] * pb[l];
        }
    }
    let mut s = ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3]))
        + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]));
    for (x, y) in ra.iter().zip(rb.iter()) {
        s += x * y;
    }
    s
}

/// Fixed-association sum (8 partial lanes).
#[inline]
pub fn sum8(a: &[f64]) -> f64 {
    let mut lanes = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let ra = ca.remainder();
    for pa in ca {
        for l in 0..8 {
            lanes[l] += pa[l];
        }
    }
    let mut s = ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3]))
        + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]));
    for x in ra {
        s += x;
    }
    s
}

/// Valid output range along one axis for a kernel offset `d`: every output
/// index `i` in the range has `i + d` inside `[0, n)`.
#[inline]
fn valid_range(n: usize, d: i64) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = ((n as i64 - d).max(0) as usize).min(n);
    (lo, hi.max(lo))
}

/// Cross-correlation with zero "same" padding:
/// `out[co] = bias[co] + sum_ci sum_k w[co,ci,k] * in[ci] shifted by k-center`.
pub fn conv_forward(input: &[f64], weight: &[f64], bias: &[f64], g: &ConvGeom, out: &mut [f64]) {
    let spatial = g.spatial();
    let work = spatial * g.ci * g.kx * g.ky * g.kz;
    let body = |co: usize, out_c: &mut [f64]| {
        out_c.fill(bias[co]);
        for ci in 0..g.ci {
            let in_c = &input[ci * spatial..(ci + 1) * spatial];
            for kz in 0..g.kz {
                let dz = kz as i64 - (g.kz / 2) as i64;
                let (z0, z1) = valid_range(g.nz, dz);
                for ky in 0..g.ky {
                    let dy = ky as i64 - (g.ky / 2) as i64;
                    let (y0, y1) = valid_range(g.ny, dy);
                    for kx in 0..g.kx {
                        let dx = kx as i64 - (g.kx / 2) as i64;
                        let (x0, x1) = valid_range(g.nx, dx);
                        if x0 >= x1 {
                            continue;
                        }
                        let w = weight[g.weight_index(co, ci, kz, ky, kx)];
                        for z in z0..z1 {
                            let zi = (z as i64 + dz) as usize;
                            for y in y0..y1 {
                                let yi = (y as i64 + dy) as usize;
                                let orow = &mut out_c[(z * g.ny + y) * g.nx..][..g.nx];
                                let irow = &in_c[(zi * g.ny + yi) * g.nx..][..g.nx];
                                let xi = (x0 as i64 + dx) as usize;
                                axpy(&mut orow[x0..x1], &irow[xi..xi + (x1 - x0)], w);
                            }
                        }
                    }
                }
            }
        }
    };
    if work >= PAR_MIN_MACS && g.co > 1 {
        out.par_chunks_mut(spatial)
            .enumerate()
            .for_each(|(co, out_c)| body(co, out_c));
    } else {
        for (co, out_c) in out.chunks_mut(spatial).enumerate() {
            body(co, out_c);
        }
    }
}

/// Accumulates `d loss / d input` into `grad_in`.
pub fn conv_backward_input(
    grad_out: &[f64],
    weight: &[f64],
    g: &ConvGeom,
    grad_in: &mut [f64],
) {
    let spatial = g.spatial();
    let work = spatial * g.co * g.kx * g.ky * g.kz;
    // in[ci][p + d] feeds out[co][p], so grad_in[ci][q] gathers from
    // grad_out[co][q - d] over the valid output range.
    let body = |ci: usize, gin_c: &mut [f64]| {
        for co in 0..g.co {
            let go_c = &grad_out[co * spatial..(co + 1) * spatial];
            for kz in 0..g.kz {
                let dz = kz as i64 - (g.kz / 2) as i64;
                let (z0, z1) = valid_range(g.nz, dz);
                for ky in 0..g.ky {
                    let dy = ky as i64 - (g.ky / 2) as i64;
                    let (y0, y1) = valid_range(g.ny, dy);
                    for kx in 0..g.kx {
                        let dx = kx as i64 - (g.kx / 2) as i64;
                        let (x0, x1) = valid_range(g.nx, dx);
                        if x0 >= x1 {
                            continue;
                        }
                        let w = weight[g.weight_index(co, ci, kz, ky, kx)];
                        for z in z0..z1 {
                            let zi = (z as i64 + dz) as usize;
                            for y in y0..y1 {
                                let yi = (y as i64 + dy) as usize;
                                let gorow = &go_c[(z * g.ny + y) * g.nx..][..g.nx];
                                let girow = &mut gin_c[(zi * g.ny + yi) * g.nx..][..g.nx];
                                let xi = (x0 as i64 + dx) as usize;
                                axpy(&mut girow[xi..xi + (x1 - x0)], &gorow[x0..x1], w);
                            }
                        }
                    }
                }
            }
        }
    };
    if work >= PAR_MIN_MACS && g.ci > 1 {
        grad_in
            .par_chunks_mut(spatial)
            .enumerate()
            .for_each(|(ci, gin_c)| body(ci, gin_c));
    } else {
        for (ci, gin_c) in grad_in.chunks_mut(spatial).enumerate() {
            body(ci, gin_c);
        }
    }
}

/// Accumulates `d loss / d weight` into `grad_w` and `d loss / d bias` into
/// `grad_b`.
pub fn conv_backward_params(
    grad_out: &[f64],
    input: &[f64],
    g: &ConvGeom,
    grad_w: &mut [f64],
    grad_b: &mut [f64],
) {
    let spatial = g.spatial();
    let per_co = g.ci * g.kx * g.ky * g.kz;
    let work = spatial * g.co * g.kx * g.ky * g.kz;
    let body = |co: usize, gw_c: &mut [f64], gb: &mut f64| {
        let go_c = &grad_out[co * spatial..(co + 1) * spatial];
        *gb += sum8(go_c);
        for ci in 0..g.ci {
            let in_c = &input[ci * spatial..(ci + 1) * spatial];
            for kz in 0..g.kz {
                let dz = kz as i64 - (g.kz / 2) as i64;
                let (z0, z1) = valid_range(g.nz, dz);
                for ky in 0..g.ky {
                    let dy = ky as i64 - (g.ky / 2) as i64;
                    let (y0, y1) = valid_range(g.ny, dy);
                    for kx in 0..g.kx {
                        let dx = kx as i64 - (g.kx / 2) as i64;
                        let (x0, x1) = valid_range(g.nx, dx);
                        if x0 >= x1 {
                            continue;
                        }
                        let mut acc = 0.0;
                        for z in z0..z1 {
                            let zi = (z as i64 + dz) as usize;
                            for y in y0..y1 {
                                let yi = (y as i64 + dy) as usize;
                                let gorow = &go_c[(z * g.ny + y) * g.nx..][..g.nx];
                                let irow = &in_c[(zi * g.ny + yi) * g.nx..][..g.nx];
                                let xi = (x0 as i64 + dx) as usize;
                                acc += dot(&gorow[x0..x1], &irow[xi..xi + (x1 - x0)]);
                            }
                        }
                        gw_c[((ci * g.kz + kz) * g.ky + ky) * g.kx + kx] += acc;
                    }
                }
            }
        }
    };
    if work >= PAR_MIN_MACS && g.co > 1 {
        grad_w
            .par_chunks_mut(per_co)
            .zip(grad_b.par_iter_mut())
            .enumerate()
            .for_each(|(co, (gw_c, gb))| body(co, gw_c, gb));
    } else {
        for (co, (gw_c, gb)) in grad_w.chunks_mut(per_co).zip(grad_b.iter_mut()).enumerate() {
            body(co, gw_c, gb);
        }
    }
}
