use core::fmt::Debug;

use crate::net::Activation;

/// Fractional bits of int8 activations: the real value of `q` is `q / 16`.
pub const ACT_FRAC: u32 = 4;
/// Int8 encoding of 6.0, the ReLU6 ceiling.
pub const RELU6_Q: i32 = 6 << ACT_FRAC;

/// Scalar type the executor computes in.
///
/// Every output element is `finish(bias + sum(x * w))` with the products
/// accumulated in a fixed order, so two runs that feed the same operands in
/// the same order produce identical bits.
pub trait Element: Copy + Default + PartialEq + Debug + Send + Sync + 'static {
    type Acc: Copy + PartialEq + Debug + Send + Sync;

    const ZERO: Self;

    fn acc_zero() -> Self::Acc;
    fn mac(acc: Self::Acc, x: Self, w: Self) -> Self::Acc;
    fn add_acc(acc: Self::Acc, b: Self::Acc) -> Self::Acc;
    /// Requantizes (int8: arithmetic shift right by `shift`, rounding half
    /// up) and applies the activation.
    fn finish(acc: Self::Acc, shift: u32, activation: Activation) -> Self;
    fn residual(a: Self, b: Self) -> Self;
    fn widen(x: Self) -> Self::Acc;
    /// Mean of `count` widened values.
    fn mean(sum: Self::Acc, count: u64) -> Self;

    /// Requantization shift for a layer with the given fan-in.
    fn weight_shift(fan_in: u64) -> u32;
    /// Weight for a uniform sample `u` in `[-1, 1]`, scaled by fan-in.
    fn weight(u: f32, fan_in: u64, shift: u32) -> Self;
    /// Bias for a uniform sample `u` in `[-1, 1]`, in accumulator units.
    fn bias(u: f32, shift: u32) -> Self::Acc;
    /// Activation for a uniform sample `u` in `[-1, 1]`.
    fn activation_sample(u: f32) -> Self;

    fn to_f64(x: Self) -> f64;
    fn to_le_bytes(x: Self, out: &mut alloc::vec::Vec<u8>);
    fn acc_to_le_bytes(x: Self::Acc, out: &mut alloc::vec::Vec<u8>);
    fn from_le_bytes(b: &[u8]) -> Self;
    fn acc_from_le_bytes(b: &[u8]) -> Self::Acc;
    const SIZE: usize;
    const ACC_SIZE: usize;
    const NAME: &'static str;
}

fn inv_sqrt_fan_in(fan_in: u64) -> f32 {
    1.0 / fan_in.isqrt().max(1) as f32
}

impl Element for f32 {
    type Acc = f32;
    const ZERO: f32 = 0.0;
    const SIZE: usize = 4;
    const ACC_SIZE: usize = 4;
    const NAME: &'static str = "f32";

    fn acc_zero() -> f32 {
        0.0
    }

    fn mac(acc: f32, x: f32, w: f32) -> f32 {
        acc + x * w
    }

    fn add_acc(acc: f32, b: f32) -> f32 {
        acc + b
    }

    fn finish(acc: f32, _shift: u32, activation: Activation) -> f32 {
        match activation {
            Activation::Linear => acc,
            Activation::Relu6 => acc.clamp(0.0, 6.0),
        }
    }

    fn residual(a: f32, b: f32) -> f32 {
        a + b
    }

    fn widen(x: f32) -> f32 {
        x
    }

    fn mean(sum: f32, count: u64) -> f32 {
        sum / count as f32
    }

    fn weight_shift(_fan_in: u64) -> u32 {
        0
    }

    fn weight(u: f32, fan_in: u64, _shift: u32) -> f32 {
        u * inv_sqrt_fan_in(fan_in)
    }

    fn bias(u: f32, _shift: u32) -> f32 {
        u * 0.25
    }

    fn activation_sample(u: f32) -> f32 {
        u * 2.0
    }

    fn to_f64(x: f32) -> f64 {
        x as f64
    }

    fn to_le_bytes(x: f32, out: &mut alloc::vec::Vec<u8>) {
        out.extend_from_slice(&x.to_le_bytes());
    }

    fn acc_to_le_bytes(x: f32, out: &mut alloc::vec::Vec<u8>) {
        out.extend_from_slice(&x.to_le_bytes());
    }

    fn from_le_bytes(b: &[u8]) -> f32 {
        f32::from_le_bytes([b[0], b[1], b[2], b[3]])
    }

    fn acc_from_le_bytes(b: &[u8]) -> f32 {
        f32::from_le_bytes([b[0], b[1], b[2], b[3]])
    }
}

impl Element for i8 {
    type Acc = i32;
    const ZERO: i8 = 0;
    const SIZE: usize = 1;
    const ACC_SIZE: usize = 4;
    const NAME: &'static str = "i8";

    fn acc_zero() -> i32 {
        0
    }

    fn mac(acc: i32, x: i8, w: i8) -> i32 {
        acc.checked_add(x as i32 * w as i32).expect("int8 accumulator overflow")
    }

    fn add_acc(acc: i32, b: i32) -> i32 {
        acc.checked_add(b).expect("int8 accumulator overflow")
    }

    fn finish(acc: i32, shift: u32, activation: Activation) -> i8 {
        let q = if shift == 0 {
            acc
        } else {
            (acc + (1 << (shift - 1))) >> shift
        };
        match activation {
            Activation::Linear => q.clamp(-128, 127) as i8,
            Activation::Relu6 => q.clamp(0, RELU6_Q) as i8,
        }
    }

    fn residual(a: i8, b: i8) -> i8 {
        a.saturating_add(b)
    }

    fn widen(x: i8) -> i32 {
        x as i32
    }

    fn mean(sum: i32, count: u64) -> i8 {
        let c = count as i64;
        (2 * sum as i64 + c).div_euclid(2 * c).clamp(-128, 127) as i8
    }

    fn weight_shift(fan_in: u64) -> u32 {
        7 + fan_in.isqrt().max(1).ilog2()
    }

    fn weight(u: f32, _fan_in: u64, _shift: u32) -> i8 {
        (u * 127.0) as i8
    }

    fn bias(u: f32, shift: u32) -> i32 {
        // +-0.25 in real units; accumulator scale is 2^(ACT_FRAC + shift).
        (u * (1u64 << (ACT_FRAC + shift - 2)) as f32) as i32
    }

    fn activation_sample(u: f32) -> i8 {
        (u * 32.0) as i8
    }

    fn to_f64(x: i8) -> f64 {
        x as f64
    }

    fn to_le_bytes(x: i8, out: &mut alloc::vec::Vec<u8>) {
        out.push(x as u8);
    }

    fn acc_to_le_bytes(x: i32, out: &mut alloc::vec::Vec<u8>) {
        out.extend_from_slice(&x.to_le_bytes());
    }

    fn from_le_bytes(b: &[u8]) -> i8 {
        b[0] as i8
    }

    fn acc_from_le_bytes(b: &[u8]) -> i32 {
        i32::from_le_bytes([b[0], b[1], b[2], b[3]])
    }
}
