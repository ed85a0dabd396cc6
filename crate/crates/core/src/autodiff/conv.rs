//! 2-D convolution as a fused tape operation.

use super::kernels::{conv2d_backward, conv2d_forward, ConvShape};
use super::tape::{CustomGrad, Var};
use crate::error::{Error, Result};

struct Conv2dOp {
    cs: ConvShape,
}

impl CustomGrad for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, inputs: &[&[f64]], _out: &[f64], grad_out: &[f64]) -> Vec<Vec<f64>> {
        let (dx, dw, db) = conv2d_backward(inputs[0], inputs[1], grad_out, &self.cs);
        vec![dx, dw, db]
    }
}

/// Convolve `x [C,H,W]` with `w [OC,C,K,K]` plus bias `b [OC]`.
pub fn conv2d(x: &Var, w: &Var, b: &Var, stride: usize, pad: usize) -> Result<Var> {
    let (sx, sw, sb) = (x.shape(), w.shape(), b.shape());
    if sx.len() != 3 || sw.len() != 4 || sb.len() != 1 {
        return Err(Error::dimension(
            "conv2d",
            format!("expected x[C,H,W], w[OC,C,K,K], b[OC]; got {sx:?}, {sw:?}, {sb:?}"),
        ));
    }
    if sw[1] != sx[0] || sb[0] != sw[0] || sw[2] != sw[3] {
        return Err(Error::dimension(
            "conv2d",
            format!("inconsistent channel/kernel sizes: x{sx:?}, w{sw:?}, b{sb:?}"),
        ));
    }
    if stride == 0 {
        return Err(Error::Config("conv2d stride must be positive".into()));
    }
    let cs = ConvShape {
        in_ch: sx[0],
        out_ch: sw[0],
        h: sx[1],
        w: sx[2],
        kernel: sw[2],
        stride,
        pad,
    };
    if cs.h + 2 * pad < cs.kernel || cs.w + 2 * pad < cs.kernel {
        return Err(Error::dimension(
            "conv2d",
            format!("kernel {} larger than padded input {}x{}", cs.kernel, cs.h, cs.w),
        ));
    }
    let (oh, ow) = (cs.out_h(), cs.out_w());
    let mut out = vec![0.0; cs.out_ch * oh * ow];
    let (xv, wv, bv) = (x.values(), w.values(), b.values());
    conv2d_forward(&xv, &wv, &bv, &cs, &mut out);
    x.tape()
        .custom(&[x, w, b], vec![cs.out_ch, oh, ow], out, Box::new(Conv2dOp { cs }))
}
