//! Fixed-point formats `Q<I>.<F>` and their arithmetic.
//!
//! A value in `Q<I>.<F>` is a two's-complement integer `raw` of `I + F` bits
//! interpreted as `raw * 2^-F`. `I` counts the sign bit. Conversion from real
//! numbers rounds and then saturates to the representable range; arithmetic
//! on words is saturating. Products and sums of products are carried in a
//! [`WideAccum`] without any intermediate rounding.

use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

/// Largest supported word length in bits.
pub const MAX_WORD_BITS: u32 = 32;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FxpError {
    #[error("non-finite value")]
    NonFinite,
    #[error("invalid format Q{int_bits}.{frac_bits}: need I >= 1 and I + F <= 32")]
    InvalidFormat { int_bits: u32, frac_bits: u32 },
    #[error("cannot parse fixed-point format {0:?}, expected Q<I>.<F>")]
    Parse(alloc::string::String),
    #[error("raw word {raw} out of range for {format}")]
    RawOutOfRange { raw: i64, format: FixedPointFormat },
}

/// Rounding applied when a value loses fractional bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rounding {
    /// Ties go away from zero (`2.5 -> 3`, `-2.5 -> -3`).
    #[default]
    HalfAwayFromZero,
    /// Ties go to the even neighbour (`2.5 -> 2`, `3.5 -> 4`).
    HalfToEven,
}

/// The `Q<I>.<F>` contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "FormatRepr", into = "FormatRepr")]
pub struct FixedPointFormat {
    int_bits: u8,
    frac_bits: u8,
}

impl FixedPointFormat {
    pub const Q2_6: Self = Self {
        int_bits: 2,
        frac_bits: 6,
    };
    pub const Q2_14: Self = Self {
        int_bits: 2,
        frac_bits: 14,
    };

    pub fn new(int_bits: u32, frac_bits: u32) -> Result<Self, FxpError> {
        if int_bits == 0 || int_bits + frac_bits > MAX_WORD_BITS {
            return Err(FxpError::InvalidFormat { int_bits, frac_bits });
        }
        Ok(Self {
            int_bits: int_bits as u8,
            frac_bits: frac_bits as u8,
        })
    }

    pub fn int_bits(self) -> u32 {
        self.int_bits as u32
    }

    pub fn frac_bits(self) -> u32 {
        self.frac_bits as u32
    }

    pub fn word_bits(self) -> u32 {
        self.int_bits() + self.frac_bits()
    }

    /// Bytes one word occupies when packed to whole bytes.
    pub fn word_bytes(self) -> usize {
        self.word_bits().div_ceil(8) as usize
    }

    pub fn raw_max(self) -> i64 {
        (1i64 << (self.word_bits() - 1)) - 1
    }

    pub fn raw_min(self) -> i64 {
        -(1i64 << (self.word_bits() - 1))
    }

    pub fn q_max(self) -> f64 {
        libm::ldexp(self.raw_max() as f64, -(self.frac_bits() as i32))
    }

    pub fn q_min(self) -> f64 {
        libm::ldexp(self.raw_min() as f64, -(self.frac_bits() as i32))
    }

    /// Weight of the least significant bit, `2^-F`.
    pub fn lsb(self) -> f64 {
        libm::ldexp(1.0, -(self.frac_bits() as i32))
    }

    pub fn contains_raw(self, raw: i64) -> bool {
        (self.raw_min()..=self.raw_max()).contains(&raw)
    }

    pub fn saturate_raw(self, raw: i128) -> i32 {
        raw.clamp(self.raw_min() as i128, self.raw_max() as i128) as i32
    }

    pub fn zero(self) -> FixedWord {
        FixedWord { raw: 0, format: self }
    }

    pub fn word(self, raw: i64) -> Result<FixedWord, FxpError> {
        FixedWord::from_raw(raw, self)
    }
}

impl fmt::Display for FixedPointFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Q{}.{}", self.int_bits, self.frac_bits)
    }
}

impl FromStr for FixedPointFormat {
    type Err = FxpError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || FxpError::Parse(s.into());
        let body = s.trim().strip_prefix(['Q', 'q']).ok_or_else(bad)?;
        let (i, f) = body.split_once('.').ok_or_else(bad)?;
        let i: u32 = i.parse().map_err(|_| bad())?;
        let f: u32 = f.parse().map_err(|_| bad())?;
        Self::new(i, f)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(transparent)]
struct FormatRepr(alloc::string::String);

impl TryFrom<FormatRepr> for FixedPointFormat {
    type Error = FxpError;
    fn try_from(r: FormatRepr) -> Result<Self, FxpError> {
        r.0.parse()
    }
}

impl From<FixedPointFormat> for FormatRepr {
    fn from(f: FixedPointFormat) -> Self {
        use alloc::string::ToString;
        FormatRepr(f.to_string())
    }
}

/// One stored word: a raw two's-complement integer tagged with its format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FixedWord {
    raw: i32,
    format: FixedPointFormat,
}

impl FixedWord {
    pub fn from_raw(raw: i64, format: FixedPointFormat) -> Result<Self, FxpError> {
        if !format.contains_raw(raw) {
            return Err(FxpError::RawOutOfRange { raw, format });
        }
        Ok(Self {
            raw: raw as i32,
            format,
        })
    }

    pub fn saturating_from_raw(raw: i128, format: FixedPointFormat) -> Self {
        Self {
            raw: format.saturate_raw(raw),
            format,
        }
    }

    pub fn raw(self) -> i32 {
        self.raw
    }

    pub fn format(self) -> FixedPointFormat {
        self.format
    }

    pub fn to_f64(self) -> f64 {
        libm::ldexp(self.raw as f64, -(self.format.frac_bits() as i32))
    }

    pub fn is_saturated(self) -> bool {
        let r = self.raw as i64;
        r == self.format.raw_max() || r == self.format.raw_min()
    }

    /// Saturating addition. Both operands must share a format.
    pub fn saturating_add(self, other: FixedWord) -> FixedWord {
        assert_eq!(self.format, other.format, "fxp_add on mismatched formats");
        Self::saturating_from_raw(self.raw as i128 + other.raw as i128, self.format)
    }

    /// Exact product in a wide accumulator.
    pub fn wide_mul(self, other: FixedWord) -> WideAccum {
        WideAccum {
            value: self.raw as i128 * other.raw as i128,
            frac_bits: self.format.frac_bits() + other.format.frac_bits(),
        }
    }

    pub fn relu(self) -> FixedWord {
        Self {
            raw: self.raw.max(0),
            format: self.format,
        }
    }
}

impl fmt::Display for FixedWord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_f64())
    }
}

/// Quantize `x` to `format` with the default rounding (half away from zero).
pub fn quantize(x: f64, format: FixedPointFormat) -> Result<FixedWord, FxpError> {
    quantize_with(x, format, Rounding::default())
}

/// `max(raw_min, min(raw_max, round(x * 2^F)))`, interpreted in `format`.
pub fn quantize_with(x: f64, format: FixedPointFormat, rounding: Rounding) -> Result<FixedWord, FxpError> {
    if !x.is_finite() {
        return Err(FxpError::NonFinite);
    }
    let scaled = libm::ldexp(x, format.frac_bits() as i32);
    let rounded = match rounding {
        Rounding::HalfAwayFromZero => libm::round(scaled),
        Rounding::HalfToEven => libm::rint(scaled),
    };
    let clamped = rounded.clamp(format.raw_min() as f64, format.raw_max() as f64);
    Ok(FixedWord {
        raw: clamped as i32,
        format,
    })
}

/// Quantize and return the real value of the result.
pub fn quantize_f64(x: f64, format: FixedPointFormat) -> Result<f64, FxpError> {
    quantize(x, format).map(FixedWord::to_f64)
}

/// Integer division of `num` by a positive `den` with the given tie rule.
pub fn div_round(num: i128, den: i128, rounding: Rounding) -> i128 {
    assert!(den > 0, "div_round needs a positive divisor");
    let q = num.div_euclid(den);
    let r = num.rem_euclid(den);
    // q = floor(num / den), 0 <= r < den
    match (2 * r).cmp(&den) {
        core::cmp::Ordering::Less => q,
        core::cmp::Ordering::Greater => q + 1,
        core::cmp::Ordering::Equal => match rounding {
            Rounding::HalfAwayFromZero => {
                if num >= 0 {
                    q + 1
                } else {
                    q
                }
            }
            Rounding::HalfToEven => {
                if q % 2 == 0 {
                    q
                } else {
                    q + 1
                }
            }
        },
    }
}

/// Shift right by `shift` bits with rounding.
pub fn shift_round(value: i128, shift: u32, rounding: Rounding) -> i128 {
    if shift == 0 {
        value
    } else {
        div_round(value, 1i128 << shift, rounding)
    }
}

/// Guard-free width in bits an accumulator needs to sum `terms` products of
/// two `word_bits` words without overflow.
pub fn accumulator_bits(word_bits: u32, terms: u64) -> u32 {
    let guard = if terms <= 1 {
        0
    } else {
        u64::BITS - (terms - 1).leading_zeros()
    };
    2 * word_bits + guard
}

/// Exact accumulator for sums of fixed-point products.
///
/// Holds `value * 2^-frac_bits` in an `i128`, which covers `2 * 32` product
/// bits plus more than 60 guard bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WideAccum {
    value: i128,
    frac_bits: u32,
}

impl WideAccum {
    pub fn zero(frac_bits: u32) -> Self {
        Self { value: 0, frac_bits }
    }

    /// Accumulator for products of two `format` words.
    pub fn for_products(format: FixedPointFormat) -> Self {
        Self::zero(2 * format.frac_bits())
    }

    pub fn value(self) -> i128 {
        self.value
    }

    pub fn frac_bits(self) -> u32 {
        self.frac_bits
    }

    pub fn mac(&mut self, a: FixedWord, b: FixedWord) {
        let p = a.wide_mul(b);
        self.add(p);
    }

    pub fn add(&mut self, other: WideAccum) {
        self.value += other.align_to(self.frac_bits);
    }

    /// Add a single word, aligning its binary point.
    pub fn add_word(&mut self, w: FixedWord) {
        let a = WideAccum {
            value: w.raw as i128,
            frac_bits: w.format.frac_bits(),
        };
        self.add(a);
    }

    fn align_to(self, frac_bits: u32) -> i128 {
        assert!(
            frac_bits >= self.frac_bits,
            "accumulator would lose precision aligning {} to {} fractional bits",
            self.frac_bits,
            frac_bits
        );
        self.value << (frac_bits - self.frac_bits)
    }

    /// Round to `format` and saturate.
    pub fn to_word(self, format: FixedPointFormat) -> FixedWord {
        self.to_word_with(format, Rounding::default())
    }

    pub fn to_word_with(self, format: FixedPointFormat, rounding: Rounding) -> FixedWord {
        let f = format.frac_bits();
        let raw = if self.frac_bits >= f {
            shift_round(self.value, self.frac_bits - f, rounding)
        } else {
            self.value << (f - self.frac_bits)
        };
        FixedWord::saturating_from_raw(raw, format)
    }

    pub fn to_f64(self) -> f64 {
        libm::ldexp(self.value as f64, -(self.frac_bits as i32))
    }
}
