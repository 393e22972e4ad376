use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::element::Element;
use crate::error::{Error, Result};
use crate::geometry::{Rect, Span};
use crate::net::TensorShape;

/// Dense HWC tensor, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<E> {
    pub shape: TensorShape,
    pub data: Vec<E>,
}

impl<E: Element> Tensor<E> {
    pub fn new(shape: TensorShape, data: Vec<E>) -> Result<Self> {
        if data.len() as u64 != shape.elements() {
            return Err(Error::ShapeMismatch(format!(
                "{shape} needs {} elements, got {}",
                shape.elements(),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: TensorShape) -> Self {
        Tensor {
            shape,
            data: vec![E::ZERO; shape.elements() as usize],
        }
    }

    /// Deterministic pseudo-random activations.
    pub fn random(shape: TensorShape, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..shape.elements())
            .map(|_| E::activation_sample(rng.gen_range(-1.0f32..=1.0)))
            .collect();
        Tensor { shape, data }
    }

    pub fn get(&self, y: u32, x: u32, c: u32) -> E {
        let s = &self.shape;
        self.data[((y as usize * s.width as usize) + x as usize) * s.channels as usize + c as usize]
    }
}

/// A rectangular piece of a tensor, addressed in the tensor's own (global)
/// coordinates. Positions outside the tensor hold zeros.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Window<E> {
    pub rect: Rect,
    pub channels: u32,
    pub data: Vec<E>,
}

impl<E: Element> Window<E> {
    pub fn zeros(rect: Rect, channels: u32) -> Self {
        Window {
            rect,
            channels,
            data: vec![E::ZERO; (rect.area() * channels as u64) as usize],
        }
    }

    pub fn contains(&self, y: i64, x: i64) -> bool {
        self.rect.rows.contains(y) && self.rect.cols.contains(x)
    }

    /// Offset of channel 0 at global position `(y, x)`.
    pub fn offset(&self, y: i64, x: i64) -> usize {
        let row = (y - self.rect.rows.start) as usize;
        let col = (x - self.rect.cols.start) as usize;
        (row * self.rect.cols.len() as usize + col) * self.channels as usize
    }

    pub fn pixel(&self, y: i64, x: i64) -> &[E] {
        let o = self.offset(y, x);
        &self.data[o..o + self.channels as usize]
    }

    pub fn from_tensor(t: &Tensor<E>, rect: Rect) -> Self {
        let mut w = Window::zeros(rect, t.shape.channels);
        let rows = rect.rows.clip(t.shape.height);
        let cols = rect.cols.clip(t.shape.width);
        let c = t.shape.channels as usize;
        for y in rows.start..rows.end {
            for x in cols.start..cols.end {
                let src = ((y as usize * t.shape.width as usize) + x as usize) * c;
                let dst = w.offset(y, x);
                w.data[dst..dst + c].copy_from_slice(&t.data[src..src + c]);
            }
        }
        w
    }

    /// Copies the part of `src` inside `self` into `self`.
    pub fn blit(&mut self, src: &Window<E>) {
        let rows = Span::new(
            self.rect.rows.start.max(src.rect.rows.start),
            self.rect.rows.end.min(src.rect.rows.end),
        );
        let cols = Span::new(
            self.rect.cols.start.max(src.rect.cols.start),
            self.rect.cols.end.min(src.rect.cols.end),
        );
        let c = self.channels as usize;
        for y in rows.start..rows.end {
            for x in cols.start..cols.end {
                let s = src.offset(y, x);
                let d = self.offset(y, x);
                self.data[d..d + c].copy_from_slice(&src.data[s..s + c]);
            }
        }
    }

    pub fn into_tensor(self, shape: TensorShape) -> Tensor<E> {
        let full = Rect::new(Span::new(0, shape.height as i64), Span::new(0, shape.width as i64));
        if self.rect == full {
            return Tensor { shape, data: self.data };
        }
        let mut w = Window::zeros(full, shape.channels);
        w.blit(&self);
        Tensor { shape, data: w.data }
    }
}
