#![allow(dead_code)]

use mcupatch_core::geometry::{Rect, Span};
use mcupatch_core::net::Activation;
use mcupatch_core::{BlockSpec, ChainBuilder, LayerChain, LayerKind, NetworkSpec, TensorShape};
use rand::Rng;

fn pick<R: Rng>(rng: &mut R, xs: &[u32]) -> u32 {
    xs[rng.gen_range(0..xs.len())]
}

/// Random chain of at most `max_layers` layers on a square input no larger
/// than `max_side`. Mixes dense, depthwise and pointwise convs with residual
/// blocks; every block ends on a layer boundary so any `n` is a valid stage.
/// With `kernel_covers_stride` no layer has `kernel < stride`.
pub fn random_chain<R: Rng>(rng: &mut R, max_layers: usize, max_side: u32, bpe: u32, kernel_covers_stride: bool) -> LayerChain {
    let side = rng.gen_range(8..=max_side);
    let channels = rng.gen_range(1..=4);
    let mut b = ChainBuilder::new(TensorShape::square(side, channels, bpe).unwrap());
    let mut layers = 0;
    let target = rng.gen_range(1..=max_layers);
    while layers < target {
        let shape = b.current_shape();
        let stride = if shape.height >= 4 && rng.gen_bool(0.3) { 2 } else { 1 };
        let kernels: &[u32] = if kernel_covers_stride && stride == 2 { &[3, 5, 7] } else { &[1, 3, 5, 7] };
        let act = if rng.gen_bool(0.7) { Activation::Relu6 } else { Activation::Linear };
        match rng.gen_range(0..4) {
            0 => {
                b.conv(pick(rng, kernels), stride, rng.gen_range(1..=6), act).unwrap();
                layers += 1;
            }
            1 => {
                b.depthwise(pick(rng, kernels), stride, act).unwrap();
                layers += 1;
            }
            2 => {
                b.pointwise(rng.gen_range(1..=6), act).unwrap();
                layers += 1;
            }
            _ if layers + 3 <= target => {
                // depthwise + pointwise with an identity shortcut
                let source = b.current_tensor();
                b.depthwise(pick(rng, &[1, 3, 5, 7]), 1, Activation::Relu6).unwrap();
                b.pointwise(shape.channels, Activation::Linear).unwrap();
                b.residual_add(source).unwrap();
                layers += 3;
            }
            _ => continue,
        }
        b.end_block();
    }
    b.finish()
}

/// Random block-level network: stem, a handful of inverted-residual blocks
/// and optionally a head. Strided blocks use kernels of at least 3.
pub fn random_net<R: Rng>(rng: &mut R, max_blocks: usize, max_res: u32) -> NetworkSpec {
    let mut blocks = vec![BlockSpec::stem(pick(rng, &[3, 5]), pick(rng, &[8, 16]))];
    let mut c = blocks[0].out_channels;
    let mut side = 0u32;
    let res = rng.gen_range(16..=max_res);
    side += res.div_ceil(2);
    for _ in 0..rng.gen_range(1..=max_blocks) {
        let stride = if side >= 4 && rng.gen_bool(0.35) { 2 } else { 1 };
        let out = if stride == 2 || rng.gen_bool(0.3) { pick(rng, &[8, 16, 24]) } else { c };
        let kernel = if stride == 2 { pick(rng, &[3, 5, 7]) } else { pick(rng, &[1, 3, 5, 7]) };
        blocks.push(BlockSpec::ir(pick(rng, &[1, 3, 4, 6]), kernel, stride, out));
        c = out;
        side = side.div_ceil(stride);
    }
    if rng.gen_bool(0.5) {
        blocks.push(BlockSpec::head(pick(rng, &[32, 64])));
    }
    NetworkSpec {
        name: "random".into(),
        input_resolution: res,
        input_channels: 3,
        bytes_per_element: 1,
        blocks,
    }
}

/// Dependency masks by direct enumeration of kernel taps: starting from the
/// marked pixels of tensor `to`, marks every pixel of earlier tensors they read.
pub fn taint(chain: &LayerChain, to: usize, seed: &[bool]) -> Vec<Vec<bool>> {
    let mut masks: Vec<Vec<bool>> = (0..=to)
        .map(|t| vec![false; chain.tensor(t).pixels() as usize])
        .collect();
    masks[to] = seed.to_vec();
    for i in (0..to).rev() {
        let l = &chain.layers[i];
        let (ih, iw) = (l.input.height as i64, l.input.width as i64);
        let (oh, ow) = (l.output.height as i64, l.output.width as i64);
        let out = masks[i + 1].clone();
        for oy in 0..oh {
            for ox in 0..ow {
                if !out[(oy * ow + ox) as usize] {
                    continue;
                }
                match l.kind {
                    LayerKind::GlobalAvgPool => masks[i].iter_mut().for_each(|m| *m = true),
                    LayerKind::ResidualAdd => {
                        masks[i][(oy * iw + ox) as usize] = true;
                        masks[l.skip.unwrap()][(oy * iw + ox) as usize] = true;
                    }
                    _ => {
                        let (k, s, pad) = (l.kernel as i64, l.stride as i64, l.padding as i64);
                        for ky in 0..k {
                            for kx in 0..k {
                                let (y, x) = (oy * s - pad + ky, ox * s - pad + kx);
                                if (0..ih).contains(&y) && (0..iw).contains(&x) {
                                    masks[i][(y * iw + x) as usize] = true;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    masks
}

pub fn bbox(mask: &[bool], side: u32) -> Option<Rect> {
    let w = side as i64;
    let mut r: Option<Rect> = None;
    for (idx, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
        let (y, x) = (idx as i64 / w, idx as i64 % w);
        let px = Rect::new(Span::new(y, y + 1), Span::new(x, x + 1));
        r = Some(match r {
            None => px,
            Some(b) => Rect::new(b.rows.hull(px.rows), b.cols.hull(px.cols)),
        });
    }
    r
}

pub fn rect_mask(shape: TensorShape, r: Rect) -> Vec<bool> {
    let w = shape.width as i64;
    (0..shape.pixels() as i64)
        .map(|i| r.rows.contains(i / w) && r.cols.contains(i % w))
        .collect()
}
