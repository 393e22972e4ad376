mod common;

use mcupatch_core::exec::{
    peak_memory_trace, run_layerwise, run_layerwise_traced, run_patchwise, run_patchwise_nonoverlap,
    run_patchwise_traced, Element, Tensor, WeightSet,
};
use mcupatch_core::geometry::{backward_region, receptive_field, BorderMode, Rect, Span};
use mcupatch_core::net::{mobilenet_v2, Activation};
use mcupatch_core::schedule::plan;
use mcupatch_core::{ChainBuilder, LayerChain, LayerKind, TensorShape};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_case(seed: u64, bpe: u32) -> (LayerChain, usize, u32, BorderMode) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chain = common::random_chain(&mut rng, 8, 48, bpe, false);
    let n = rng.gen_range(1..=chain.blocks.len());
    let p = rng.gen_range(2..=4);
    let mode = if rng.gen_bool(0.5) { BorderMode::Uniform } else { BorderMode::Clipped };
    (chain, n, p, mode)
}

fn equivalent<E: Element>(seed: u64, bpe: u32) -> Result<(), TestCaseError> {
    let (chain, n, p, mode) = random_case(seed, bpe);
    let Ok(plan) = plan(&chain, n, p, mode) else { return Ok(()) };
    let weights = WeightSet::<E>::generate(&chain, seed);
    let input = Tensor::<E>::random(chain.input, seed ^ 1);
    let reference = run_layerwise(&chain, &weights, &input).unwrap();
    let patched = run_patchwise(&chain, &weights, &input, &plan).unwrap();
    prop_assert!(reference == patched, "p = {}, n = {}, {:?}", p, n, mode);
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn patchwise_equals_layerwise_int8(seed in any::<u64>()) {
        equivalent::<i8>(seed, 1)?;
    }

    #[test]
    fn patchwise_equals_layerwise_f32(seed in any::<u64>()) {
        equivalent::<f32>(seed, 4)?;
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn traced_peak_equals_analytic(seed in any::<u64>()) {
        let (chain, n, p, mode) = random_case(seed, 1);
        let Ok(plan) = plan(&chain, n, p, mode) else { return Ok(()) };
        prop_assert_eq!(peak_memory_trace(&chain, Some(&plan)), plan.overall_peak_bytes);
        prop_assert_eq!(peak_memory_trace(&chain, None), plan.layer_mode_peak_bytes);
        let weights = WeightSet::<i8>::generate(&chain, seed);
        let input = Tensor::<i8>::random(chain.input, seed);
        let (_, measured) = run_patchwise_traced(&chain, &weights, &input, &plan).unwrap();
        prop_assert_eq!(measured, plan.overall_peak_bytes);
    }

    /// Zeroing every input pixel outside the backward region of an output
    /// rectangle leaves that rectangle unchanged.
    #[test]
    fn backward_region_is_sufficient(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let chain = common::random_chain(&mut rng, 6, 32, 1, false);
        let out = chain.output();
        let a = rng.gen_range(0..out.height as i64);
        let b = rng.gen_range(a + 1..=out.height as i64);
        let rect = Rect::new(Span::new(a, b), Span::new(a, b));
        let region = backward_region(&chain.layers, rect);
        let weights = WeightSet::<i8>::generate(&chain, seed);
        let input = Tensor::<i8>::random(chain.input, seed);
        let mut masked = input.clone();
        let (w, c) = (chain.input.width as usize, chain.input.channels as usize);
        for (i, v) in masked.data.iter_mut().enumerate() {
            let px = i / c;
            if !(region.rows.contains((px / w) as i64) && region.cols.contains((px % w) as i64)) {
                *v = 0;
            }
        }
        let full = run_layerwise(&chain, &weights, &input).unwrap();
        let part = run_layerwise(&chain, &weights, &masked).unwrap();
        for y in a..b {
            for x in a..b {
                for ch in 0..out.channels {
                    prop_assert_eq!(full.get(y as u32, x as u32, ch), part.get(y as u32, x as u32, ch));
                }
            }
        }
    }
}

/// Straightforward int8 reference: every layer over the whole tensor with
/// the documented arithmetic, written without the executor's windows.
fn naive_int8(chain: &LayerChain, weights: &WeightSet<i8>, input: &Tensor<i8>) -> Vec<i8> {
    let mut tensors: Vec<Vec<i8>> = vec![input.data.clone()];
    for (i, l) in chain.layers.iter().enumerate() {
        let w = &weights.layers[i];
        let (ih, iw, ic) = (l.input.height as i64, l.input.width as i64, l.input.channels as i64);
        let (oh, ow, oc) = (l.output.height as i64, l.output.width as i64, l.output.channels as i64);
        let x = &tensors[i];
        let at = |y: i64, xx: i64, c: i64| x[((y * iw + xx) * ic + c) as usize] as i32;
        let finish = |acc: i32| {
            let q = (acc + (1 << (w.shift - 1))) >> w.shift;
            match l.activation {
                Activation::Linear => q.clamp(-128, 127) as i8,
                Activation::Relu6 => q.clamp(0, 96) as i8,
            }
        };
        let mut y = vec![0i8; (oh * ow * oc) as usize];
        match l.kind {
            LayerKind::GlobalAvgPool => {
                let count = ih * iw;
                for c in 0..oc {
                    let sum: i64 = (0..ih).flat_map(|yy| (0..iw).map(move |xx| (yy, xx))).map(|(yy, xx)| at(yy, xx, c) as i64).sum();
                    y[c as usize] = (2 * sum + count).div_euclid(2 * count).clamp(-128, 127) as i8;
                }
            }
            LayerKind::ResidualAdd => {
                let skip = &tensors[l.skip.unwrap()];
                for (j, v) in y.iter_mut().enumerate() {
                    *v = x[j].saturating_add(skip[j]);
                }
            }
            _ => {
                let (k, s, pad) = (l.kernel as i64, l.stride as i64, l.padding as i64);
                let dw = l.kind == LayerKind::DepthwiseConv2d;
                for oy in 0..oh {
                    for ox in 0..ow {
                        for o in 0..oc {
                            let mut acc = 0i32;
                            for ky in 0..k {
                                for kx in 0..k {
                                    let (yy, xx) = (oy * s - pad + ky, ox * s - pad + kx);
                                    if yy < 0 || yy >= ih || xx < 0 || xx >= iw {
                                        continue;
                                    }
                                    if dw {
                                        acc += at(yy, xx, o) * w.kernel[(o * k * k + ky * k + kx) as usize] as i32;
                                    } else {
                                        for c in 0..ic {
                                            acc += at(yy, xx, c) * w.kernel[(((o * k + ky) * k + kx) * ic + c) as usize] as i32;
                                        }
                                    }
                                }
                            }
                            y[((oy * ow + ox) * oc + o) as usize] = finish(acc + w.bias[o as usize]);
                        }
                    }
                }
            }
        }
        tensors.push(y);
    }
    tensors.pop().unwrap()
}

#[test]
fn layerwise_matches_naive_reference() {
    for seed in 0..40 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut chain = common::random_chain(&mut rng, 8, 32, 1, false);
        if seed % 4 == 0 {
            let mut b = ChainBuilder::new(chain.input);
            for l in &chain.layers {
                match l.kind {
                    LayerKind::Conv2d => b.conv(l.kernel, l.stride, l.output.channels, l.activation),
                    LayerKind::DepthwiseConv2d => b.depthwise(l.kernel, l.stride, l.activation),
                    LayerKind::Pointwise => b.pointwise(l.output.channels, l.activation),
                    LayerKind::ResidualAdd => b.residual_add(l.skip.unwrap()),
                    LayerKind::GlobalAvgPool => b.global_pool(),
                }
                .unwrap();
            }
            b.global_pool().unwrap();
            chain = b.finish();
        }
        let weights = WeightSet::<i8>::generate(&chain, seed);
        let input = Tensor::<i8>::random(chain.input, seed);
        let got = run_layerwise(&chain, &weights, &input).unwrap();
        assert_eq!(got.data, naive_int8(&chain, &weights, &input), "seed {seed}");
    }
}

#[test]
fn mbv2_96_patchwise_is_bit_exact() {
    let chain = mobilenet_v2().with_resolution(96).lower().unwrap();
    let weights = WeightSet::<i8>::generate(&chain, 7);
    let input = Tensor::<i8>::random(chain.input, 7);
    let (reference, layer_peak) = run_layerwise_traced(&chain, &weights, &input).unwrap();
    let plan = plan(&chain, 5, 4, BorderMode::Uniform).unwrap();
    let (patched, patch_peak) = run_patchwise_traced(&chain, &weights, &input, &plan).unwrap();
    assert_eq!(reference, patched);
    assert_eq!(layer_peak, plan.layer_mode_peak_bytes);
    assert_eq!(patch_peak, plan.overall_peak_bytes);
    assert!(patch_peak < layer_peak);
}

#[test]
fn nonoverlap_with_pointwise_stage_is_exact() {
    let mut b = ChainBuilder::new(TensorShape::square(24, 3, 1).unwrap());
    b.pointwise(8, Activation::Relu6).unwrap().end_block();
    b.pointwise(4, Activation::Linear).unwrap().end_block();
    b.conv(3, 1, 4, Activation::Relu6).unwrap().end_block();
    let chain = b.finish();
    let weights = WeightSet::<i8>::generate(&chain, 3);
    let input = Tensor::<i8>::random(chain.input, 3);
    let run = run_patchwise_nonoverlap(&chain, &weights, &input, 3, 2).unwrap();
    assert_eq!(run.report.differing_elements, 0);
    assert_eq!(run.report.max_seam_distance, None);
    assert_eq!(run.output, run_layerwise(&chain, &weights, &input).unwrap());
}

#[test]
fn nonoverlap_single_patch_is_exact() {
    let chain = mobilenet_v2().with_resolution(64).lower().unwrap();
    let weights = WeightSet::<i8>::generate(&chain, 5);
    let input = Tensor::<i8>::random(chain.input, 5);
    let run = run_patchwise_nonoverlap(&chain, &weights, &input, 1, 5).unwrap();
    assert_eq!(run.report.differing_elements, 0);
    assert_eq!(run.output, run_layerwise(&chain, &weights, &input).unwrap());
}

#[test]
fn nonoverlap_divergence_stays_near_seams() {
    let chain = mobilenet_v2().with_resolution(96).lower().unwrap();
    let weights = WeightSet::<i8>::generate(&chain, 11);
    let input = Tensor::<i8>::random(chain.input, 11);
    let run = run_patchwise_nonoverlap(&chain, &weights, &input, 4, 5).unwrap();
    let end = chain.stage_end(5).unwrap();
    let rf = receptive_field(&chain.layers[..end]);
    let bound = rf.size.div_ceil(2 * rf.jump) as u32;
    assert!(run.report.differing_elements > 0);
    let d = run.report.max_seam_distance.unwrap();
    assert!(d <= bound, "divergence {d} px from a seam, bound {bound}");
}

#[test]
fn mismatched_weights_are_rejected() {
    let chain = mobilenet_v2().with_resolution(32).lower().unwrap();
    let other = mobilenet_v2().with_resolution(32);
    let mut other = other.clone();
    other.blocks[3].kernel = 5;
    let weights = WeightSet::<i8>::generate(&other.lower().unwrap(), 1);
    let input = Tensor::<i8>::random(chain.input, 1);
    assert!(run_layerwise(&chain, &weights, &input).is_err());
}
