//! Block-wise sensing of whole images.
//!
//! Images are padded on the bottom and right by replicating the last row and
//! column until both extents are multiples of the block size, cut into
//! row-major blocks, processed independently and stitched back. The padding
//! is cropped away again.

use crate::error::{Error, Result};
use crate::metrics::image_dims;
use crate::network::NetworkModel;
use crate::sensing::SensingOperator;
use crate::solver::{run_paisa, SolverConfig, TraceEntry};
use crate::tensor::Tensor;
use crate::transforms::PanTransform;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockGrid {
    pub height: usize,
    pub width: usize,
    pub block: (usize, usize),
    pub rows: usize,
    pub cols: usize,
}

impl BlockGrid {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn split_blocks(img: &Tensor, block: (usize, usize)) -> Result<(Vec<Tensor>, BlockGrid)> {
    let (h, w) = image_dims(img)?;
    let (bh, bw) = block;
    if bh == 0 || bw == 0 {
        return Err(Error::InvalidParameter("block size must be positive".into()));
    }
    let grid = BlockGrid {
        height: h,
        width: w,
        block,
        rows: h.div_ceil(bh),
        cols: w.div_ceil(bw),
    };
    let src = img.data();
    let mut blocks = Vec::with_capacity(grid.len());
    for br in 0..grid.rows {
        for bc in 0..grid.cols {
            let mut data = Vec::with_capacity(bh * bw);
            for i in 0..bh {
                let si = (br * bh + i).min(h - 1);
                for j in 0..bw {
                    let sj = (bc * bw + j).min(w - 1);
                    data.push(src[si * w + sj]);
                }
            }
            blocks.push(Tensor::new(vec![1, bh, bw], data)?);
        }
    }
    Ok((blocks, grid))
}

/// Inverse of [`split_blocks`]: returns a `[1, H, W]` image.
pub fn stitch_blocks(blocks: &[Tensor], grid: &BlockGrid) -> Result<Tensor> {
    if blocks.len() != grid.len() {
        return Err(Error::shape("stitch", format!("{} blocks", grid.len()), blocks.len()));
    }
    let (bh, bw) = grid.block;
    let (h, w) = (grid.height, grid.width);
    let mut out = vec![0.0; h * w];
    for (k, b) in blocks.iter().enumerate() {
        if b.len() != bh * bw {
            return Err(Error::shape("stitch", format!("{bh}x{bw} block"), format!("{:?}", b.shape())));
        }
        let (br, bc) = (k / grid.cols, k % grid.cols);
        let d = b.data();
        for i in 0..bh {
            let oi = br * bh + i;
            if oi >= h {
                break;
            }
            for j in 0..bw {
                let oj = bc * bw + j;
                if oj < w {
                    out[oi * w + oj] = d[i * bw + j];
                }
            }
        }
    }
    Tensor::new(vec![1, h, w], out)
}

/// Measures every block of `img` with `op`, reconstructs with `model` and
/// stitches the result, clamped to `[0, 1]`.
pub fn reconstruct_image(model: &NetworkModel, op: &SensingOperator, img: &Tensor) -> Result<Tensor> {
    let (blocks, grid) = split_blocks(img, model.patch())?;
    let ys = blocks.iter().map(|b| op.measure(b)).collect::<Result<Vec<_>>>()?;
    let outs = model.reconstruct(op, &ys)?;
    Ok(stitch_blocks(&outs, &grid)?.map(|v| v.clamp(0.0, 1.0)))
}

/// Runs PAISA on every block. The trace sums objectives over blocks and
/// combines residual norms in quadrature.
pub fn paisa_image(
    cfg: &SolverConfig<PanTransform>,
    op: &SensingOperator,
    img: &Tensor,
) -> Result<(Tensor, Vec<TraceEntry>)> {
    let (blocks, grid) = split_blocks(img, cfg.patch)?;
    let mut outs = Vec::with_capacity(blocks.len());
    let mut trace: Vec<TraceEntry> = Vec::new();
    for b in &blocks {
        let sol = run_paisa(cfg, op, &op.measure(b)?)?;
        if trace.is_empty() {
            trace = sol.trace.iter().map(|t| TraceEntry { residual_norm: t.residual_norm.powi(2), ..*t }).collect();
        } else {
            for (acc, t) in trace.iter_mut().zip(&sol.trace) {
                acc.objective += t.objective;
                acc.residual_norm += t.residual_norm.powi(2);
            }
        }
        outs.push(sol.x);
    }
    trace.iter_mut().for_each(|t| t.residual_norm = t.residual_norm.sqrt());
    Ok((stitch_blocks(&outs, &grid)?.map(|v| v.clamp(0.0, 1.0)), trace))
}

/// `|a - b|` element-wise.
pub fn abs_difference(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape("difference", format!("{:?}", b.shape()), format!("{:?}", a.shape())));
    }
    Ok(a.sub(b).map(f64::abs))
}
