//! Fixed-point arithmetic where every multiplication by a codebook level is
//! carried out with shifts, sign flips and additions.
//!
//! `2^m * q` is a left shift for `m > 0` and a right shift for `m < 0`. In
//! [`ArithMode::Exact`] a right shift moves the binary point (the fractional
//! width grows) instead of dropping bits, so results are exact. In
//! [`ArithMode::Truncate`] the low bits are discarded as a barrel shifter
//! would.
//!
//! Nothing in this module multiplies two data values with `*`. Scaling by a
//! codebook's `alpha` goes through [`shift_add_mul`], a long-multiplication
//! over the set bits of the constant.

use std::fmt;
use std::ops::AddAssign;

use crate::error::{Error, Result};
use crate::quant::{Codebook, Term};

/// Raw width of activations.
pub const ACTIVATION_WIDTH: u32 = 16;
/// Fractional bits of activations.
pub const ACTIVATION_FRAC_BITS: u32 = 12;
/// Raw width used for biases, which may exceed the activation range.
pub const BIAS_WIDTH: u32 = 32;

const MAX_FRAC_BITS: u32 = 96;
const MAX_ALPHA_FRAC_BITS: u32 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum ArithMode {
    #[default]
    Exact,
    Truncate,
}

/// Operation counts reported by the shift-add data path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct OpCounts {
    pub shifts: u64,
    pub adds: u64,
    pub sign_flips: u64,
    /// General multiplications on the data path. Stays zero.
    pub multiplies: u64,
}

impl AddAssign for OpCounts {
    fn add_assign(&mut self, rhs: Self) {
        self.shifts += rhs.shifts;
        self.adds += rhs.adds;
        self.sign_flips += rhs.sign_flips;
        self.multiplies += rhs.multiplies;
    }
}

/// `raw / 2^frac_bits`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FixedPointValue {
    raw: i128,
    frac_bits: u32,
}

impl FixedPointValue {
    pub const fn new(raw: i128, frac_bits: u32) -> Self {
        Self { raw, frac_bits }
    }

    pub const fn zero(frac_bits: u32) -> Self {
        Self { raw: 0, frac_bits }
    }

    /// Rounds `value` to the nearest multiple of `2^-frac_bits` (ties away
    /// from zero) and checks that the raw value fits in `width` signed bits.
    pub fn from_f64(value: f64, frac_bits: u32, width: u32) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::NonFinite(value));
        }
        let scaled = (value * 2f64.powi(frac_bits as i32)).round();
        let limit = 2f64.powi(width as i32 - 1);
        if scaled >= limit || scaled < -limit {
            return Err(Error::Overflow(format!(
                "{value} does not fit in {width} bits with {frac_bits} fractional bits"
            )));
        }
        Ok(Self::new(scaled as i128, frac_bits))
    }

    /// Activation format: 16 raw bits, 12 fractional.
    pub fn activation(value: f64) -> Result<Self> {
        Self::from_f64(value, ACTIVATION_FRAC_BITS, ACTIVATION_WIDTH)
    }

    /// The shortest exact representation of `value` using at most
    /// `max_frac_bits` fractional bits.
    pub fn from_f64_exact(value: f64, max_frac_bits: u32) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::NonFinite(value));
        }
        for frac_bits in 0..=max_frac_bits {
            let scaled = value * 2f64.powi(frac_bits as i32);
            if scaled.fract() == 0.0 && scaled.abs() < 2f64.powi(100) {
                return Ok(Self::new(scaled as i128, frac_bits));
            }
        }
        Err(Error::Overflow(format!(
            "{value} is not representable with {max_frac_bits} fractional bits"
        )))
    }

    pub fn raw(&self) -> i128 {
        self.raw
    }

    pub fn frac_bits(&self) -> u32 {
        self.frac_bits
    }

    pub fn to_f64(&self) -> f64 {
        self.raw as f64 / 2f64.powi(self.frac_bits as i32)
    }

    /// Same value with more fractional bits.
    pub fn widen(&self, frac_bits: u32) -> Result<Self> {
        if frac_bits < self.frac_bits {
            return Err(Error::FracBitsMismatch(self.frac_bits, frac_bits));
        }
        let shift = frac_bits - self.frac_bits;
        Ok(Self::new(checked_shl(self.raw, shift)?, frac_bits))
    }

    /// Drops fractional bits, rounding toward negative infinity.
    pub fn truncate_to(&self, frac_bits: u32) -> Self {
        if frac_bits >= self.frac_bits {
            return *self;
        }
        Self::new(self.raw >> (self.frac_bits - frac_bits), frac_bits)
    }

    /// Rounds to `frac_bits` (ties away from zero).
    pub fn round_to(&self, frac_bits: u32) -> Self {
        if frac_bits >= self.frac_bits {
            return *self;
        }
        let drop = self.frac_bits - frac_bits;
        let half = 1i128 << (drop - 1);
        let raw = if self.raw >= 0 {
            (self.raw + half) >> drop
        } else {
            -((-self.raw + half) >> drop)
        };
        Self::new(raw, frac_bits)
    }

    pub fn checked_add(&self, other: &Self) -> Result<Self> {
        if self.frac_bits != other.frac_bits {
            return Err(Error::FracBitsMismatch(self.frac_bits, other.frac_bits));
        }
        let raw = self
            .raw
            .checked_add(other.raw)
            .ok_or_else(|| Error::Overflow("fixed-point addition".into()))?;
        Ok(Self::new(raw, self.frac_bits))
    }

    /// Addition after widening both operands to the finer of the two formats.
    pub fn aligned_add(&self, other: &Self) -> Result<Self> {
        let frac = self.frac_bits.max(other.frac_bits);
        self.widen(frac)?.checked_add(&other.widen(frac)?)
    }

    pub fn neg(&self) -> Self {
        Self::new(-self.raw, self.frac_bits)
    }
}

impl fmt::Display for FixedPointValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_f64())
    }
}

fn checked_shl(raw: i128, shift: u32) -> Result<i128> {
    if raw == 0 {
        return Ok(0);
    }
    if shift >= 127 || raw.unsigned_abs().leading_zeros() <= shift + 1 {
        return Err(Error::Overflow(format!("{raw} << {shift}")));
    }
    Ok(raw << shift)
}

/// `q * 2^m`.
pub fn shift_mul(
    q: FixedPointValue,
    m: i32,
    mode: ArithMode,
    ops: &mut OpCounts,
) -> Result<FixedPointValue> {
    if m == 0 {
        return Ok(q);
    }
    ops.shifts += 1;
    let amount = m.unsigned_abs();
    if m > 0 {
        return Ok(FixedPointValue::new(checked_shl(q.raw, amount)?, q.frac_bits));
    }
    match mode {
        ArithMode::Exact => {
            let frac_bits = q.frac_bits + amount;
            if frac_bits > MAX_FRAC_BITS {
                return Err(Error::Overflow(format!(
                    "right shift by {amount} needs {frac_bits} fractional bits"
                )));
            }
            Ok(FixedPointValue::new(q.raw, frac_bits))
        }
        ArithMode::Truncate => {
            let raw = if amount >= 127 { q.raw >> 127 } else { q.raw >> amount };
            Ok(FixedPointValue::new(raw, q.frac_bits))
        }
    }
}

/// Shift-add long multiplication of two fixed-point values. Used only for
/// the per-codebook constant `alpha`, never between two data values.
pub fn shift_add_mul(
    q: FixedPointValue,
    constant: FixedPointValue,
    ops: &mut OpCounts,
) -> Result<FixedPointValue> {
    let mut acc: i128 = 0;
    let mut bits = constant.raw.unsigned_abs();
    let mut position = 0u32;
    let mut first = true;
    while bits != 0 {
        let skip = bits.trailing_zeros();
        position += skip;
        bits >>= skip;
        let partial = checked_shl(q.raw, position)?;
        if position > 0 {
            ops.shifts += 1;
        }
        if first {
            acc = partial;
            first = false;
        } else {
            acc = acc
                .checked_add(partial)
                .ok_or_else(|| Error::Overflow("shift-add multiply".into()))?;
            ops.adds += 1;
        }
        bits >>= 1;
        position += 1;
    }
    if constant.raw < 0 {
        acc = -acc;
        ops.sign_flips += 1;
    }
    Ok(FixedPointValue::new(acc, q.frac_bits + constant.frac_bits))
}

/// `q * level`, where `level = alpha * sum_j s_j 2^m_j` is given by its terms.
pub fn level_mul(
    q: FixedPointValue,
    terms: &[Term],
    alpha: FixedPointValue,
    mode: ArithMode,
    ops: &mut OpCounts,
) -> Result<FixedPointValue> {
    let scaled = shift_add_mul(q, alpha, ops)?;
    let scaled = match mode {
        ArithMode::Exact => scaled,
        ArithMode::Truncate => scaled.truncate_to(q.frac_bits),
    };
    let mut sum = FixedPointValue::zero(scaled.frac_bits);
    for (j, term) in terms.iter().enumerate() {
        let mut part = shift_mul(scaled, term.exponent, mode, ops)?;
        if term.negative {
            part = part.neg();
            ops.sign_flips += 1;
        }
        sum = if j == 0 {
            part
        } else {
            ops.adds += 1;
            sum.aligned_add(&part)?
        };
    }
    Ok(sum)
}

/// Running sum of level products ("array t" of a processing unit).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Accumulator {
    raw: i128,
    frac_bits: u32,
}

impl Accumulator {
    pub fn new(frac_bits: u32) -> Self {
        Self { raw: 0, frac_bits }
    }

    pub fn raw(&self) -> i128 {
        self.raw
    }

    pub fn frac_bits(&self) -> u32 {
        self.frac_bits
    }

    /// Adds `value`, which may not be finer than the accumulator.
    pub fn add(&mut self, value: FixedPointValue, ops: &mut OpCounts) -> Result<()> {
        if value.frac_bits > self.frac_bits {
            return Err(Error::FracBitsMismatch(value.frac_bits, self.frac_bits));
        }
        let aligned = value.widen(self.frac_bits)?;
        self.raw = self
            .raw
            .checked_add(aligned.raw)
            .ok_or_else(|| Error::Overflow("accumulator".into()))?;
        ops.adds += 1;
        Ok(())
    }

    pub fn value(&self) -> FixedPointValue {
        FixedPointValue::new(self.raw, self.frac_bits)
    }

    pub fn to_f64(&self) -> f64 {
        self.value().to_f64()
    }
}

/// `acc + q * level`.
pub fn mac(
    mut acc: Accumulator,
    q: FixedPointValue,
    terms: &[Term],
    alpha: FixedPointValue,
    mode: ArithMode,
    ops: &mut OpCounts,
) -> Result<Accumulator> {
    let product = level_mul(q, terms, alpha, mode, ops)?;
    let product = match mode {
        ArithMode::Exact => product,
        ArithMode::Truncate => product.truncate_to(acc.frac_bits),
    };
    acc.add(product, ops)?;
    Ok(acc)
}

/// `alpha` of a codebook as an exact fixed-point constant.
pub fn alpha_fixed(codebook: &Codebook) -> Result<FixedPointValue> {
    FixedPointValue::from_f64_exact(codebook.alpha(), MAX_ALPHA_FRAC_BITS).map_err(|_| {
        Error::InvalidScheme(format!(
            "alpha={} needs more than {MAX_ALPHA_FRAC_BITS} fractional bits",
            codebook.alpha()
        ))
    })
}

#[derive(Debug, Clone, Copy)]
struct LevelPlan {
    // (negative, right shift) per term; at most four terms are kept inline
    terms: [(bool, u32); 4],
    len: u8,
    negatives: u8,
}

/// Dot products of code rows against fixed-point data.
///
/// Level terms are applied without `alpha`, and the row sum is scaled by
/// `alpha` once at the end, which is the same value as scaling every term.
#[derive(Debug, Clone)]
pub struct ShiftMultiplier {
    plans: Vec<LevelPlan>,
    max_shift: u32,
    alpha: FixedPointValue,
    mode: ArithMode,
}

impl ShiftMultiplier {
    pub fn new(codebook: &Codebook, mode: ArithMode) -> Result<Self> {
        let plans = codebook
            .decompositions()
            .iter()
            .map(|terms| {
                if terms.len() > 4 {
                    return Err(Error::InvalidScheme(format!(
                        "levels with {} terms are not supported by the dot engine",
                        terms.len()
                    )));
                }
                let mut plan = LevelPlan {
                    terms: [(false, 0); 4],
                    len: terms.len() as u8,
                    negatives: 0,
                };
                for (slot, t) in plan.terms.iter_mut().zip(terms) {
                    *slot = (t.negative, t.exponent.unsigned_abs());
                    plan.negatives += t.negative as u8;
                }
                Ok(plan)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            plans,
            max_shift: codebook.max_shift(),
            alpha: alpha_fixed(codebook)?,
            mode,
        })
    }

    pub fn mode(&self) -> ArithMode {
        self.mode
    }

    /// `sum_i level(codes[i]) * data[i]`. All data must share one format.
    pub fn dot(
        &self,
        codes: &[u32],
        data: &[FixedPointValue],
        ops: &mut OpCounts,
    ) -> Result<FixedPointValue> {
        if codes.len() != data.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} weights against {} data values",
                codes.len(),
                data.len()
            )));
        }
        let frac = data.first().map_or(ACTIVATION_FRAC_BITS, |d| d.frac_bits);
        if let Some(d) = data.iter().find(|d| d.frac_bits != frac) {
            return Err(Error::FracBitsMismatch(frac, d.frac_bits));
        }
        // headroom for the alignment shift plus a 2^32-term sum
        let headroom = self.max_shift + 34;
        if data
            .iter()
            .any(|d| d.raw.unsigned_abs().leading_zeros() <= headroom)
        {
            return Err(Error::Overflow("data too wide for the dot engine".into()));
        }

        let mut acc: i128 = 0;
        let mut terms = 0u64;
        let mut negatives = 0u64;
        for (&code, d) in codes.iter().zip(data) {
            let plan = self.plans.get(code as usize).ok_or_else(|| {
                Error::DimensionMismatch(format!("code {code} outside the codebook"))
            })?;
            for &(negative, shift) in &plan.terms[..plan.len as usize] {
                let part = match self.mode {
                    ArithMode::Exact => d.raw << (self.max_shift - shift),
                    ArithMode::Truncate => d.raw >> shift,
                };
                acc = if negative {
                    acc.checked_sub(part)
                } else {
                    acc.checked_add(part)
                }
                .ok_or_else(|| Error::Overflow("dot-product accumulator".into()))?;
            }
            terms += plan.len as u64;
            negatives += plan.negatives as u64;
        }
        ops.shifts += terms;
        ops.adds += terms;
        ops.sign_flips += negatives;

        let sum_frac = match self.mode {
            ArithMode::Exact => frac + self.max_shift,
            ArithMode::Truncate => frac,
        };
        let scaled = shift_add_mul(FixedPointValue::new(acc, sum_frac), self.alpha, ops)?;
        Ok(match self.mode {
            ArithMode::Exact => scaled,
            ArithMode::Truncate => scaled.truncate_to(frac),
        })
    }
}
