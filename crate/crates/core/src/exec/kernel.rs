//! Direct convolution over windows.
//!
//! Accumulation order is fixed: kernel row, kernel column, input channel,
//! then bias. Taps that fall outside the tensor are skipped ("same" zero
//! padding); output positions outside the tensor are written as zero.

use super::element::Element;
use super::tensor::Window;
use super::weights::LayerWeights;
use crate::geometry::Rect;
use crate::net::{Layer, LayerKind};

/// How taps inside the tensor but outside the input window are treated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Seams {
    /// They must not occur; hitting one is a geometry bug.
    Forbidden,
    /// They read as zero (no halo between patches).
    Zero,
}

fn tap_visible<E: Element>(input: &Window<E>, y: i64, x: i64, seams: Seams) -> bool {
    if input.contains(y, x) {
        return true;
    }
    assert!(
        seams == Seams::Zero,
        "tap ({y}, {x}) outside input window {:?}",
        input.rect
    );
    false
}

pub(crate) fn compute<E: Element>(
    layer: &Layer,
    weights: &LayerWeights<E>,
    input: &Window<E>,
    skip: Option<&Window<E>>,
    out: Rect,
    seams: Seams,
) -> Window<E> {
    let oc = layer.output.channels as usize;
    let mut result = Window::zeros(out, layer.output.channels);
    let out_h = layer.output.height as i64;
    let out_w = layer.output.width as i64;
    let in_h = layer.input.height as i64;
    let in_w = layer.input.width as i64;
    let k = layer.kernel as i64;
    let s = layer.stride as i64;
    let pad = layer.padding as i64;

    if layer.kind == LayerKind::GlobalAvgPool {
        let mut acc = alloc::vec![E::acc_zero(); oc];
        for y in 0..in_h {
            for x in 0..in_w {
                let px = input.pixel(y, x);
                for c in 0..oc {
                    acc[c] = E::add_acc(acc[c], E::widen(px[c]));
                }
            }
        }
        let count = (in_h * in_w) as u64;
        for (dst, a) in result.data.iter_mut().zip(acc) {
            *dst = E::mean(a, count);
        }
        return result;
    }

    for oy in out.rows.start..out.rows.end {
        if oy < 0 || oy >= out_h {
            continue;
        }
        for ox in out.cols.start..out.cols.end {
            if ox < 0 || ox >= out_w {
                continue;
            }
            let dst = result.offset(oy, ox);
            let dst = &mut result.data[dst..dst + oc];
            match layer.kind {
                LayerKind::ResidualAdd => {
                    let skip = skip.expect("add has a skip window");
                    let a = tap_visible(input, oy, ox, seams).then(|| input.pixel(oy, ox));
                    let b = tap_visible(skip, oy, ox, seams).then(|| skip.pixel(oy, ox));
                    for c in 0..oc {
                        let va = a.map_or(E::ZERO, |p| p[c]);
                        let vb = b.map_or(E::ZERO, |p| p[c]);
                        dst[c] = E::residual(va, vb);
                    }
                }
                LayerKind::DepthwiseConv2d => {
                    let mut acc = alloc::vec![E::acc_zero(); oc];
                    for ky in 0..k {
                        let iy = oy * s - pad + ky;
                        if iy < 0 || iy >= in_h {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = ox * s - pad + kx;
                            if ix < 0 || ix >= in_w || !tap_visible(input, iy, ix, seams) {
                                continue;
                            }
                            let px = input.pixel(iy, ix);
                            let tap = (ky * k + kx) as usize;
                            for c in 0..oc {
                                acc[c] = E::mac(acc[c], px[c], weights.kernel[c * (k * k) as usize + tap]);
                            }
                        }
                    }
                    for c in 0..oc {
                        let a = E::add_acc(acc[c], weights.bias[c]);
                        dst[c] = E::finish(a, weights.shift, layer.activation);
                    }
                }
                LayerKind::Conv2d | LayerKind::Pointwise => {
                    let ic = layer.input.channels as usize;
                    let kk = (k * k) as usize;
                    for (o, out_px) in dst.iter_mut().enumerate() {
                        let wo = &weights.kernel[o * kk * ic..(o + 1) * kk * ic];
                        let mut acc = E::acc_zero();
                        for ky in 0..k {
                            let iy = oy * s - pad + ky;
                            if iy < 0 || iy >= in_h {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = ox * s - pad + kx;
                                if ix < 0 || ix >= in_w || !tap_visible(input, iy, ix, seams) {
                                    continue;
                                }
                                let px = input.pixel(iy, ix);
                                let wt = &wo[(ky * k + kx) as usize * ic..][..ic];
                                for (x, w) in px.iter().zip(wt) {
                                    acc = E::mac(acc, *x, *w);
                                }
                            }
                        }
                        let a = E::add_acc(acc, weights.bias[o]);
                        *out_px = E::finish(a, weights.shift, layer.activation);
                    }
                }
                LayerKind::GlobalAvgPool => unreachable!(),
            }
        }
    }
    result
}
