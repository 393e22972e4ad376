use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::element::Element;
use crate::error::{Error, Result};
use crate::net::{Layer, LayerChain, LayerKind};

/// Kernel and bias of one layer.
///
/// Kernel layout: `[out][ky][kx][in]` for dense convs (pointwise is the
/// `k = 1` case) and `[channel][ky][kx]` for depthwise. Adds and pools have
/// empty weights.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights<E: Element> {
    pub kernel: Vec<E>,
    pub bias: Vec<E::Acc>,
    /// Int8 requantization shift; unused for floats.
    pub shift: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightSet<E: Element> {
    pub layers: Vec<LayerWeights<E>>,
}

/// Dot-product length of one output element.
pub fn fan_in(layer: &Layer) -> u64 {
    (layer.kernel as u64).pow(2) * layer.group_in_channels() as u64
}

impl<E: Element> WeightSet<E> {
    /// Deterministic weights: uniform samples in `[-1, 1]` scaled by
    /// `1 / sqrt(fan_in)`, drawn layer by layer from one seeded stream.
    pub fn generate(chain: &LayerChain, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = chain
            .layers
            .iter()
            .map(|l| {
                if !l.kind.is_conv() {
                    return LayerWeights {
                        kernel: Vec::new(),
                        bias: Vec::new(),
                        shift: 0,
                    };
                }
                let fan = fan_in(l);
                let shift = E::weight_shift(fan);
                let kernel = (0..l.weight_count())
                    .map(|_| E::weight(rng.gen_range(-1.0f32..=1.0), fan, shift))
                    .collect();
                let bias = (0..l.bias_count())
                    .map(|_| E::bias(rng.gen_range(-1.0f32..=1.0), shift))
                    .collect();
                LayerWeights { kernel, bias, shift }
            })
            .collect();
        WeightSet { layers }
    }

    /// Checks that every layer's arrays have the sizes its spec implies.
    pub fn validate(&self, chain: &LayerChain) -> Result<()> {
        if self.layers.len() != chain.len() {
            return Err(Error::ShapeMismatch(format!(
                "weights cover {} layers, chain has {}",
                self.layers.len(),
                chain.len()
            )));
        }
        for (i, (w, l)) in self.layers.iter().zip(&chain.layers).enumerate() {
            if w.kernel.len() as u64 != l.weight_count() || w.bias.len() as u64 != l.bias_count() {
                return Err(Error::ShapeMismatch(format!(
                    "layer {i} ({}): expected {} kernel and {} bias values, got {} and {}",
                    l.kind.name(),
                    l.weight_count(),
                    l.bias_count(),
                    w.kernel.len(),
                    w.bias.len()
                )));
            }
            if w.shift > 24 || (l.kind == LayerKind::ResidualAdd && w.shift != 0) {
                return Err(Error::ShapeMismatch(format!("layer {i}: bad shift {}", w.shift)));
            }
        }
        Ok(())
    }
}
