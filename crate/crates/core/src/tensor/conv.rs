// Stride-1 "same" convolution via im2col + gemm.

use matrixmultiply::dgemm;

/// Geometry of one convolution: `[n, cin, h, w] * [cout, cin, k, k]`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn hw(&self) -> usize {
        self.h * self.w
    }
}

/// Unfolds one `[cin, h, w]` plane stack into `[cin*k*k, h*w]` columns.
fn im2col(g: &ConvGeom, input: &[f64], cols: &mut [f64]) {
    let (h, w, k) = (g.h as isize, g.w as isize, g.k);
    let pad = (k / 2) as isize;
    let hw = g.hw();
    for ci in 0..g.cin {
        let plane = &input[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y + dy;
                    let line = &mut dst[(y * w) as usize..((y + 1) * w) as usize];
                    if sy < 0 || sy >= h {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[(sy * w) as usize..((sy + 1) * w) as usize];
                    for x in 0..w {
                        let sx = x + dx;
                        line[x as usize] = if sx < 0 || sx >= w { 0.0 } else { src[sx as usize] };
                    }
                }
            }
        }
    }
}

/// Folds column gradients back onto the input plane stack (accumulating).
fn col2im(g: &ConvGeom, cols: &[f64], grad_in: &mut [f64]) {
    let (h, w, k) = (g.h as isize, g.w as isize, g.k);
    let pad = (k / 2) as isize;
    let hw = g.hw();
    for ci in 0..g.cin {
        let plane = &mut grad_in[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y + dy;
                    if sy < 0 || sy >= h {
                        continue;
                    }
                    let line = &src[(y * w) as usize..((y + 1) * w) as usize];
                    let dst = &mut plane[(sy * w) as usize..((sy + 1) * w) as usize];
                    let x_lo = (-dx).max(0);
                    let x_hi = (w - dx).min(w);
                    for x in x_lo..x_hi {
                        dst[(x + dx) as usize] += line[x as usize];
                    }
                }
            }
        }
    }
}

pub(crate) fn forward(g: &ConvGeom, input: &[f64], weight: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let (rows, hw) = (g.rows(), g.hw());
    let mut out = vec![0.0; g.n * g.cout * hw];
    let mut cols = if g.k == 1 { Vec::new() } else { vec![0.0; rows * hw] };
    for s in 0..g.n {
        let x = &input[s * g.cin * hw..(s + 1) * g.cin * hw];
        let y = &mut out[s * g.cout * hw..(s + 1) * g.cout * hw];
        let b: &[f64] = if g.k == 1 {
            x
        } else {
            im2col(g, x, &mut cols);
            &cols
        };
        if let Some(bias) = bias {
            for (co, plane) in y.chunks_mut(hw).enumerate() {
                plane.fill(bias[co]);
            }
        }
        unsafe {
            dgemm(
                g.cout, rows, hw, 1.0,
                weight.as_ptr(), rows as isize, 1,
                b.as_ptr(), hw as isize, 1,
                if bias.is_some() { 1.0 } else { 0.0 },
                y.as_mut_ptr(), hw as isize, 1,
            );
        }
    }
    out
}

/// Returns `(grad_input, grad_weight, grad_bias)`.
pub(crate) fn backward(
    g: &ConvGeom,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    need_input: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let (rows, hw) = (g.rows(), g.hw());
    let mut gw = vec![0.0; g.cout * rows];
    let mut gb = vec![0.0; g.cout];
    let mut gin = need_input.then(|| vec![0.0; g.n * g.cin * hw]);
    let mut cols = if g.k == 1 { Vec::new() } else { vec![0.0; rows * hw] };
    let mut gcols = if g.k == 1 || !need_input { Vec::new() } else { vec![0.0; rows * hw] };
    for s in 0..g.n {
        let x = &input[s * g.cin * hw..(s + 1) * g.cin * hw];
        let dy = &grad_out[s * g.cout * hw..(s + 1) * g.cout * hw];
        for (co, plane) in dy.chunks(hw).enumerate() {
            gb[co] += plane.iter().sum::<f64>();
        }
        let b: &[f64] = if g.k == 1 {
            x
        } else {
            im2col(g, x, &mut cols);
            &cols
        };
        // dW[cout, rows] += dY[cout, hw] * cols^T
        unsafe {
            dgemm(
                g.cout, hw, rows, 1.0,
                dy.as_ptr(), hw as isize, 1,
                b.as_ptr(), 1, hw as isize,
                1.0,
                gw.as_mut_ptr(), rows as isize, 1,
            );
        }
        if let Some(gin) = gin.as_mut() {
            let dst = &mut gin[s * g.cin * hw..(s + 1) * g.cin * hw];
            // dCols[rows, hw] = W^T * dY
            let target: &mut [f64] = if g.k == 1 { dst } else { &mut gcols };
            unsafe {
                dgemm(
                    rows, g.cout, hw, 1.0,
                    weight.as_ptr(), 1, rows as isize,
                    dy.as_ptr(), hw as isize, 1,
                    0.0,
                    target.as_mut_ptr(), hw as isize, 1,
                );
            }
            if g.k != 1 {
                col2im(g, &gcols, dst);
            }
        }
    }
    (gin, gw, gb)
}
