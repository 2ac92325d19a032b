//! im2col / col2im for 2-D convolution and 2×2 max-pooling.
//!
//! Images travel in the same features × batch layout as dense activations,
//! with features ordered channel-major (`c·H·W + y·W + x`).

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::tensor::Matrix;

/// Shape of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Input height.
    pub height: usize,
    /// Input width.
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn validate(&self) -> Result<()> {
        let g = self;
        if g.in_channels == 0 || g.out_channels == 0 || g.height == 0 || g.width == 0 {
            return Err(config_err(format!("conv dimensions must be positive: {g:?}")));
        }
        if g.kernel == 0 || g.stride == 0 {
            return Err(config_err(format!("conv kernel and stride must be positive: {g:?}")));
        }
        if g.kernel > g.height + 2 * g.padding || g.kernel > g.width + 2 * g.padding {
            return Err(config_err(format!("conv kernel larger than padded input: {g:?}")));
        }
        Ok(())
    }

    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    /// Output positions per sample.
    pub fn positions(&self) -> usize {
        self.out_height() * self.out_width()
    }

    /// Rows of the unrolled patch matrix (`C_in·k·k`).
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn in_features(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    pub fn out_features(&self) -> usize {
        self.out_channels * self.positions()
    }

    /// Input pixel feeding patch row `(c, ki, kj)` at output `(oy, ox)`,
    /// or `None` when it falls into the padding.
    #[inline]
    fn source(&self, c: usize, ki: usize, kj: usize, oy: usize, ox: usize) -> Option<usize> {
        let iy = (oy * self.stride + ki) as isize - self.padding as isize;
        let ix = (ox * self.stride + kj) as isize - self.padding as isize;
        if iy < 0 || ix < 0 || iy as usize >= self.height || ix as usize >= self.width {
            None
        } else {
            Some((c * self.height + iy as usize) * self.width + ix as usize)
        }
    }
}

fn check_input(x: &Matrix, features: usize, op: &'static str) -> Result<()> {
    if x.rows() != features {
        return Err(Error::Shape {
            op,
            lhs: (features, x.cols()),
            rhs: x.shape(),
        });
    }
    Ok(())
}

/// Unrolls a batch of images `(C·H·W × B)` into patches `(C·k·k × B·P)`,
/// where column `b·P + p` holds the receptive field of output position `p`
/// of sample `b`, in row-major patch order.
pub fn im2col(x: &Matrix, geo: &ConvGeometry) -> Result<Matrix> {
    geo.validate()?;
    check_input(x, geo.in_features(), "im2col")?;
    let batch = x.cols();
    let (oh, ow, k) = (geo.out_height(), geo.out_width(), geo.kernel);
    let p = oh * ow;
    let xt = x.transpose();
    let mut cols = Matrix::zeros(geo.patch_len(), batch * p);
    for c in 0..geo.in_channels {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let out = cols.row_mut(row);
                for b in 0..batch {
                    let img = xt.row(b);
                    for oy in 0..oh {
                        for ox in 0..ow {
                            if let Some(src) = geo.source(c, ki, kj, oy, ox) {
                                out[b * p + oy * ow + ox] = img[src];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(cols)
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the images,
/// summing where receptive fields overlap.
pub fn col2im(cols: &Matrix, geo: &ConvGeometry, batch: usize) -> Result<Matrix> {
    geo.validate()?;
    let p = geo.positions();
    if cols.shape() != (geo.patch_len(), batch * p) {
        return Err(Error::Shape {
            op: "col2im",
            lhs: (geo.patch_len(), batch * p),
            rhs: cols.shape(),
        });
    }
    let (oh, ow, k) = (geo.out_height(), geo.out_width(), geo.kernel);
    let mut xt = Matrix::zeros(batch, geo.in_features());
    for c in 0..geo.in_channels {
        for ki in 0..k {
            for kj in 0..k {
                let src_row = cols.row((c * k + ki) * k + kj);
                for b in 0..batch {
                    let img = xt.row_mut(b);
                    for oy in 0..oh {
                        for ox in 0..ow {
                            if let Some(dst) = geo.source(c, ki, kj, oy, ox) {
                                img[dst] += src_row[b * p + oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(xt.transpose())
}

/// `(C × B·P)` channel-by-position map → `(C·P × B)` activations.
pub fn positions_to_features(flat: &Matrix, channels: usize, positions: usize) -> Matrix {
    let batch = flat.cols() / positions;
    let mut out = Matrix::zeros(channels * positions, batch);
    for c in 0..channels {
        let src = flat.row(c);
        for b in 0..batch {
            for p in 0..positions {
                out[(c * positions + p, b)] = src[b * positions + p];
            }
        }
    }
    out
}

/// Inverse of [`positions_to_features`].
pub fn features_to_positions(x: &Matrix, channels: usize, positions: usize) -> Matrix {
    let batch = x.cols();
    let mut out = Matrix::zeros(channels, batch * positions);
    for c in 0..channels {
        for p in 0..positions {
            let src = x.row(c * positions + p);
            let dst = out.row_mut(c);
            for (b, &v) in src.iter().enumerate() {
                dst[b * positions + p] = v;
            }
        }
    }
    out
}

/// Shape of a 2×2, stride-2 max-pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl PoolGeometry {
    pub fn out_height(&self) -> usize {
        self.height / 2
    }

    pub fn out_width(&self) -> usize {
        self.width / 2
    }

    pub fn in_features(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn out_features(&self) -> usize {
        self.channels * self.out_height() * self.out_width()
    }
}

/// Forward max-pool; also returns, per output element, the input row that
/// won (first maximum in scan order).
pub fn maxpool_forward(x: &Matrix, geo: &PoolGeometry) -> Result<(Matrix, Vec<u32>)> {
    check_input(x, geo.in_features(), "maxpool")?;
    if geo.height < 2 || geo.width < 2 {
        return Err(config_err(format!("max-pool input too small: {geo:?}")));
    }
    let batch = x.cols();
    let (oh, ow) = (geo.out_height(), geo.out_width());
    let mut out = Matrix::zeros(geo.out_features(), batch);
    let mut argmax = vec![0u32; geo.out_features() * batch];
    for c in 0..geo.channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let o = (c * oh + oy) * ow + ox;
                for b in 0..batch {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_row = 0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let r = (c * geo.height + 2 * oy + dy) * geo.width + 2 * ox + dx;
                            let v = x[(r, b)];
                            if v > best {
                                best = v;
                                best_row = r;
                            }
                        }
                    }
                    out[(o, b)] = best;
                    argmax[o * batch + b] = best_row as u32;
                }
            }
        }
    }
    Ok((out, argmax))
}

pub fn maxpool_backward(grad_out: &Matrix, argmax: &[u32], geo: &PoolGeometry) -> Matrix {
    let batch = grad_out.cols();
    let mut dx = Matrix::zeros(geo.in_features(), batch);
    for o in 0..grad_out.rows() {
        for b in 0..batch {
            dx[(argmax[o * batch + b] as usize, b)] += grad_out[(o, b)];
        }
    }
    dx
}
