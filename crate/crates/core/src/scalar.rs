use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Element type of tensors: `f32` for training, `f64` for gradient checks.
pub trait Scalar:
    num_traits::Float + Copy + Send + Sync + Debug + Display + Sum + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;

    /// tanh for hot activation paths. The f32 implementation trades the last
    /// couple of ulp for speed; f64 stays on libm so 64-bit gradient checks
    /// see the exact function.
    fn tanh_hot(self) -> Self {
        self.tanh()
    }
}

impl Scalar for f32 {
    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline(always)]
    fn tanh_hot(self) -> f32 {
        fast_tanh_f32(self)
    }
}

impl Scalar for f64 {
    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
}

/// exp via 2^k * e^r splitting with a degree-6 polynomial on |r| <= ln2/2.
/// Accurate to within ~2 ulp of f32 over the non-overflowing range.
#[inline(always)]
pub fn fast_exp_f32(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    if x > 88.0 {
        return f32::INFINITY;
    }
    if x < -87.0 {
        return 0.0;
    }
    let k = (x * LOG2E).round();
    let r = (x - k * LN2_HI) - k * LN2_LO;
    let p = 1.0
        + r * (1.0
            + r * (0.5
                + r * (1.0 / 6.0 + r * (1.0 / 24.0 + r * (1.0 / 120.0 + r * (1.0 / 720.0))))));
    f32::from_bits(p.to_bits().wrapping_add((k as i32 as u32) << 23))
}

/// tanh built on fast_exp_f32; small arguments use the odd Taylor series to
/// avoid cancellation near zero. |result| never exceeds 1.
#[inline(always)]
pub fn fast_tanh_f32(x: f32) -> f32 {
    // evaluate both branches and select: the data-dependent branch would
    // mispredict about as often as the spare arithmetic costs
    let a = x.abs();
    let s = a * a;
    let poly = a
        * (1.0 + s * (-1.0 / 3.0 + s * (2.0 / 15.0 + s * (-17.0 / 315.0 + s * (62.0 / 2835.0)))));
    let e = fast_exp_f32(2.0 * a.min(44.0));
    let sat = 1.0 - 2.0 / (e + 1.0);
    let t = if a < 0.3 { poly } else { sat };
    if x < 0.0 {
        -t
    } else {
        t
    }
}
