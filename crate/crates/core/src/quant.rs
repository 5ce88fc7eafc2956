//! Non-uniform power-of-two quantizers.
//!
//! Two families are supported:
//!
//! * **PoT**: `alpha * {0, ±2^-k : k = 0 .. 2^(b-1) - 1}`, i.e. `2^b + 1` levels.
//! * **SPx**: `alpha * sum_i q_i`, each branch `q_i` drawn from
//!   `{0, ±2^-k : k = 1 .. 2^(b_i) - 1}`. SP2 is SPx with two branches.
//!
//! Every level keeps the signed power-of-two terms it was built from, so a
//! multiplication by the level can be carried out with shifts and adds only
//! (see [`crate::shift_arith`]).
//!
//! Levels are exact: `alpha` must be a dyadic value whose product with every
//! unit level is representable in an `f64` without rounding.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use num_bigint::BigUint;

use crate::error::{Error, Result};

/// Largest PoT bit budget accepted; the smallest level is `2^-31`.
pub const MAX_POT_BITS: u32 = 6;

/// Largest per-branch budget for SPx. Branch exponents reach `2^b - 1`, and
/// sums of terms must fit in a 53-bit mantissa.
pub const MAX_BRANCH_BITS: u32 = 5;

const MAX_SPX_COMBINATIONS: usize = 1 << 22;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SchemeKind {
    PoT,
    SPx,
}

impl fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SchemeKind::PoT => f.write_str("pot"),
            SchemeKind::SPx => f.write_str("spx"),
        }
    }
}

/// Parameters of a quantizer family.
///
/// For SPx, `total_bits` follows the one-sign-bit convention
/// `1 + sum(branch_bits)`. The alternative reading `sum(branch_bits)` is
/// available as [`QuantScheme::branch_budget`].
#[derive(Debug, Clone, PartialEq)]
pub struct QuantScheme {
    kind: SchemeKind,
    total_bits: u32,
    branch_bits: Vec<u32>,
    alpha: f64,
}

impl QuantScheme {
    pub fn pot(bits: u32, alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        if bits < 2 {
            return Err(Error::InvalidScheme(format!(
                "PoT needs at least 2 bits, got {bits}"
            )));
        }
        if bits > MAX_POT_BITS {
            return Err(Error::InvalidScheme(format!(
                "PoT bit budget {bits} exceeds the supported maximum {MAX_POT_BITS}"
            )));
        }
        Ok(Self {
            kind: SchemeKind::PoT,
            total_bits: bits,
            branch_bits: Vec::new(),
            alpha,
        })
    }

    pub fn spx(branch_bits: &[u32], alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        if branch_bits.is_empty() {
            return Err(Error::InvalidScheme("SPx needs at least one branch".into()));
        }
        if let Some(&b) = branch_bits
            .iter()
            .find(|&&b| b == 0 || b > MAX_BRANCH_BITS)
        {
            return Err(Error::InvalidScheme(format!(
                "branch budget {b} outside 1..={MAX_BRANCH_BITS}"
            )));
        }
        let combinations = branch_bits
            .iter()
            .try_fold(1usize, |acc, &b| acc.checked_mul(branch_set(b).len()))
            .filter(|&c| c <= MAX_SPX_COMBINATIONS);
        if combinations.is_none() {
            return Err(Error::InvalidScheme(format!(
                "branch set {branch_bits:?} is too large to enumerate"
            )));
        }
        Ok(Self {
            kind: SchemeKind::SPx,
            total_bits: 1 + branch_bits.iter().sum::<u32>(),
            branch_bits: branch_bits.to_vec(),
            alpha,
        })
    }

    pub fn kind(&self) -> SchemeKind {
        self.kind
    }

    pub fn total_bits(&self) -> u32 {
        self.total_bits
    }

    pub fn branch_bits(&self) -> &[u32] {
        &self.branch_bits
    }

    /// `sum(branch_bits)`, the budget without a dedicated sign bit.
    pub fn branch_budget(&self) -> u32 {
        self.branch_bits.iter().sum()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn build(&self) -> Result<Codebook> {
        match self.kind {
            SchemeKind::PoT => build_pot_codebook(self.total_bits, self.alpha),
            SchemeKind::SPx => build_spx_codebook(&self.branch_bits, self.alpha),
        }
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::InvalidScheme(format!(
            "alpha must be positive and finite, got {alpha}"
        )));
    }
    Ok(())
}

/// One signed power-of-two term `sign * 2^exponent` with `exponent <= 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Term {
    pub negative: bool,
    pub exponent: i32,
}

impl Term {
    pub fn new(negative: bool, exponent: i32) -> Self {
        debug_assert!(exponent <= 0);
        Self { negative, exponent }
    }

    fn shift(&self) -> u32 {
        self.exponent.unsigned_abs()
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.negative { '-' } else { '+' };
        write!(f, "{sign}2^{}", self.exponent)
    }
}

impl FromStr for Term {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (negative, rest) = match s.as_bytes().first() {
            Some(b'+') => (false, &s[1..]),
            Some(b'-') => (true, &s[1..]),
            _ => return Err(format!("term {s:?} must start with + or -")),
        };
        let exp = rest
            .strip_prefix("2^")
            .ok_or_else(|| format!("term {s:?} is not of the form ±2^m"))?;
        let exponent: i32 = exp
            .parse()
            .map_err(|_| format!("bad exponent in term {s:?}"))?;
        if exponent > 0 {
            return Err(format!("term {s:?} has a positive exponent"));
        }
        Ok(Term { negative, exponent })
    }
}

/// An exact level value relative to `alpha`: `num / 2^shift`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Unit {
    num: i64,
    shift: u32,
}

impl Unit {
    fn from_terms(terms: &[Term], shift: u32) -> Self {
        let num = terms
            .iter()
            .map(|t| {
                let mag = 1i64 << (shift - t.shift());
                if t.negative {
                    -mag
                } else {
                    mag
                }
            })
            .sum();
        Unit { num, shift }
    }

    fn to_f64(self) -> f64 {
        // num has at most 53 significant bits by construction
        self.num as f64 / 2f64.powi(self.shift as i32)
    }
}

/// Sorted level set with per-level shift decompositions.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    scheme: QuantScheme,
    levels: Vec<f64>,
    decompositions: Vec<Vec<Term>>,
    zero_index: usize,
}

/// Builds `alpha * {0, ±2^-k : k = 0 .. 2^(b-1) - 1}`.
pub fn build_pot_codebook(bits: u32, alpha: f64) -> Result<Codebook> {
    let scheme = QuantScheme::pot(bits, alpha)?;
    let max_k = (1i32 << (bits - 1)) - 1;
    let mut entries = vec![Vec::new()];
    for k in 0..=max_k {
        entries.push(vec![Term::new(false, -k)]);
        entries.push(vec![Term::new(true, -k)]);
    }
    Codebook::from_candidates(scheme, entries)
}

/// Builds the distinct values of `alpha * sum_i q_i`, each branch drawn from
/// `{0, ±2^-k : k = 1 .. 2^(b_i) - 1}`.
pub fn build_spx_codebook(branch_bits: &[u32], alpha: f64) -> Result<Codebook> {
    let scheme = QuantScheme::spx(branch_bits, alpha)?;
    let sets: Vec<Vec<Option<Term>>> = branch_bits.iter().map(|&b| branch_set(b)).collect();

    let mut candidates = Vec::new();
    let mut picks = vec![0usize; sets.len()];
    loop {
        let terms: Vec<Term> = picks
            .iter()
            .zip(&sets)
            .filter_map(|(&p, set)| set[p])
            .collect();
        candidates.push(terms);

        // odometer over the branch sets
        let mut i = 0;
        while i < picks.len() {
            picks[i] += 1;
            if picks[i] < sets[i].len() {
                break;
            }
            picks[i] = 0;
            i += 1;
        }
        if i == picks.len() {
            break;
        }
    }
    Codebook::from_candidates(scheme, candidates)
}

/// `{0, ±2^-1, ..., ±2^-(2^b - 1)}`; `None` is the zero choice.
fn branch_set(bits: u32) -> Vec<Option<Term>> {
    let max_k = (1i32 << bits) - 1;
    let mut set = vec![None];
    for k in 1..=max_k {
        set.push(Some(Term::new(false, -k)));
        set.push(Some(Term::new(true, -k)));
    }
    set
}

/// Canonical ordering for a decomposition: largest exponent first.
fn canonical(mut terms: Vec<Term>) -> Vec<Term> {
    terms.sort_by(|a, b| b.exponent.cmp(&a.exponent).then(a.negative.cmp(&b.negative)));
    terms
}

/// Whether `candidate` should replace `current` as a level's decomposition:
/// fewer terms win, then the lexicographically larger exponent list.
fn preferred(candidate: &[Term], current: &[Term]) -> bool {
    if candidate.len() != current.len() {
        return candidate.len() < current.len();
    }
    let c: Vec<i32> = candidate.iter().map(|t| t.exponent).collect();
    let k: Vec<i32> = current.iter().map(|t| t.exponent).collect();
    c > k
}

impl Codebook {
    fn from_candidates(scheme: QuantScheme, candidates: Vec<Vec<Term>>) -> Result<Self> {
        let shift = candidates
            .iter()
            .flatten()
            .map(Term::shift)
            .max()
            .unwrap_or(0);

        // Drop terms that cancel (2^m - 2^m) so the kept decomposition is minimal.
        let mut by_value: Vec<(i64, Vec<Term>)> = Vec::new();
        for terms in candidates {
            let terms = canonical(cancel_pairs(terms));
            let unit = if terms.is_empty() {
                0
            } else {
                Unit::from_terms(&terms, shift).num
            };
            by_value.push((unit, terms));
        }
        by_value.sort_by_key(|(num, _)| *num);

        let mut units: Vec<i64> = Vec::new();
        let mut decompositions: Vec<Vec<Term>> = Vec::new();
        for (num, terms) in by_value {
            match units.last() {
                Some(&last) if last == num => {
                    let current = decompositions.last_mut().expect("parallel vectors");
                    if preferred(&terms, current) {
                        *current = terms;
                    }
                }
                _ => {
                    units.push(num);
                    decompositions.push(terms);
                }
            }
        }

        let alpha = scheme.alpha;
        let levels = units
            .iter()
            .map(|&num| exact_scale(alpha, Unit { num, shift }))
            .collect::<Result<Vec<f64>>>()?;
        let zero_index = units
            .iter()
            .position(|&u| u == 0)
            .expect("zero is always enumerated");

        Ok(Self {
            scheme,
            levels,
            decompositions,
            zero_index,
        })
    }

    pub fn scheme(&self) -> &QuantScheme {
        &self.scheme
    }

    pub fn alpha(&self) -> f64 {
        self.scheme.alpha
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn level(&self, index: usize) -> f64 {
        self.levels[index]
    }

    pub fn decomposition(&self, index: usize) -> &[Term] {
        &self.decompositions[index]
    }

    pub fn decompositions(&self) -> &[Vec<Term>] {
        &self.decompositions
    }

    pub fn zero_index(&self) -> usize {
        self.zero_index
    }

    /// Largest right shift any level needs.
    pub fn max_shift(&self) -> u32 {
        self.decompositions
            .iter()
            .flatten()
            .map(Term::shift)
            .max()
            .unwrap_or(0)
    }

    /// Index of the level nearest to `value`. Ties go to the level of smaller
    /// magnitude; values beyond `±alpha` clamp to the extreme levels. NaN maps
    /// to the zero level.
    pub fn quantize(&self, value: f64) -> usize {
        if value.is_nan() {
            return self.zero_index;
        }
        let upper = self.levels.partition_point(|&l| l < value);
        if upper == 0 {
            return 0;
        }
        if upper == self.levels.len() {
            return self.levels.len() - 1;
        }
        let lower = upper - 1;
        let d_lo = (value - self.levels[lower]).abs();
        let d_hi = (self.levels[upper] - value).abs();
        if d_lo < d_hi {
            lower
        } else if d_hi < d_lo {
            upper
        } else if self.levels[lower].abs() <= self.levels[upper].abs() {
            lower
        } else {
            upper
        }
    }

    pub fn dequantize(&self, index: usize) -> f64 {
        self.levels[index]
    }

    /// Adjacent gaps `(level, next - level)` in increasing level order.
    pub fn tail_gap_profile(&self) -> Vec<(f64, f64)> {
        self.levels.windows(2).map(|w| (w[0], w[1] - w[0])).collect()
    }

    /// Largest adjacent gap among levels inside `[lo, hi]`.
    pub fn max_gap_within(&self, lo: f64, hi: f64) -> f64 {
        let inside: Vec<f64> = self
            .levels
            .iter()
            .copied()
            .filter(|&l| l >= lo && l <= hi)
            .collect();
        inside
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(0.0, f64::max)
    }
}

fn cancel_pairs(mut terms: Vec<Term>) -> Vec<Term> {
    let mut i = 0;
    while i < terms.len() {
        let opposite = (i + 1..terms.len()).find(|&j| {
            terms[j].exponent == terms[i].exponent && terms[j].negative != terms[i].negative
        });
        match opposite {
            Some(j) => {
                terms.remove(j);
                terms.remove(i);
            }
            None => i += 1,
        }
    }
    terms
}

/// `alpha * unit` when the product is exact in `f64`.
fn exact_scale(alpha: f64, unit: Unit) -> Result<f64> {
    let value = alpha * unit.to_f64();
    if unit.num == 0 {
        return Ok(0.0);
    }
    // Exact iff the product of the odd mantissas fits in 53 bits.
    let (alpha_mant, _) = odd_mantissa(alpha);
    let unit_mant = unit.num.unsigned_abs() >> unit.num.trailing_zeros();
    let product_exact = (alpha_mant as u128 * unit_mant as u128) < (1u128 << 53);
    if !product_exact || !value.is_normal() {
        return Err(Error::InvalidScheme(format!(
            "alpha={alpha} cannot scale level {}/2^{} exactly; use a dyadic alpha with fewer significant bits",
            unit.num, unit.shift
        )));
    }
    Ok(value)
}

/// Odd integer mantissa and binary exponent of a finite positive `f64`.
fn odd_mantissa(x: f64) -> (u64, i32) {
    let bits = x.to_bits();
    let exp_field = ((bits >> 52) & 0x7ff) as i32;
    let frac = bits & ((1u64 << 52) - 1);
    let (mant, exp) = if exp_field == 0 {
        (frac, -1074)
    } else {
        (frac | (1u64 << 52), exp_field - 1075)
    };
    let tz = mant.trailing_zeros();
    (mant >> tz, exp + tz as i32)
}

/// Exact decimal expansion of a finite `f64` (every binary fraction has one).
pub fn exact_decimal(x: f64) -> String {
    assert!(x.is_finite(), "exact_decimal needs a finite value");
    if x == 0.0 {
        return "0".to_string();
    }
    let sign = if x < 0.0 { "-" } else { "" };
    let (mant, exp) = odd_mantissa(x.abs());
    if exp >= 0 {
        return format!("{sign}{}", BigUint::from(mant) << exp as usize);
    }
    let places = exp.unsigned_abs();
    let digits = (BigUint::from(mant) * BigUint::from(5u32).pow(places)).to_string();
    let places = places as usize;
    let (int_part, frac_part) = if digits.len() > places {
        let (i, f) = digits.split_at(digits.len() - places);
        (i.to_string(), f.to_string())
    } else {
        ("0".to_string(), format!("{digits:0>places$}"))
    };
    let frac_part = frac_part.trim_end_matches('0');
    if frac_part.is_empty() {
        format!("{sign}{int_part}")
    } else {
        format!("{sign}{int_part}.{frac_part}")
    }
}

impl fmt::Display for Codebook {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let branches: Vec<String> = self.scheme.branch_bits.iter().map(u32::to_string).collect();
        writeln!(
            f,
            "scheme={} bits={} branches={} alpha={}",
            self.scheme.kind,
            self.scheme.total_bits,
            branches.join(","),
            exact_decimal(self.scheme.alpha)
        )?;
        for (i, (level, terms)) in self.levels.iter().zip(&self.decompositions).enumerate() {
            write!(f, "{i} {}", exact_decimal(*level))?;
            if terms.is_empty() {
                write!(f, " 0")?;
            }
            for t in terms {
                write!(f, " {t}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

impl FromStr for Codebook {
    type Err = Error;

    /// Parses the text form, rebuilds the codebook from its header and checks
    /// every listed level against the rebuilt one.
    fn from_str(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty());
        let (hline, header) = lines
            .next()
            .ok_or_else(|| Error::parse(1, "empty codebook"))?;

        let mut kind = None;
        let mut bits = None;
        let mut branches = None;
        let mut alpha = None;
        for field in header.split_whitespace() {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| Error::parse(hline, format!("expected key=value, got {field:?}")))?;
            match key {
                "scheme" => kind = Some(value.to_string()),
                "bits" => {
                    bits = Some(
                        value
                            .parse::<u32>()
                            .map_err(|_| Error::parse(hline, "bad bits"))?,
                    )
                }
                "branches" => branches = Some(parse_u32_list(value).map_err(|m| Error::parse(hline, m))?),
                "alpha" => {
                    alpha = Some(
                        value
                            .parse::<f64>()
                            .map_err(|_| Error::parse(hline, "bad alpha"))?,
                    )
                }
                other => return Err(Error::parse(hline, format!("unknown header key {other:?}"))),
            }
        }
        let missing = |k: &str| Error::parse(hline, format!("header is missing {k}"));
        let alpha = alpha.ok_or_else(|| missing("alpha"))?;
        let bits = bits.ok_or_else(|| missing("bits"))?;
        let branches = branches.ok_or_else(|| missing("branches"))?;
        let codebook = match kind.as_deref() {
            Some("pot") => build_pot_codebook(bits, alpha)?,
            Some("spx") => build_spx_codebook(&branches, alpha)?,
            Some(other) => return Err(Error::parse(hline, format!("unknown scheme {other:?}"))),
            None => return Err(missing("scheme")),
        };
        if codebook.scheme.total_bits != bits {
            return Err(Error::parse(
                hline,
                format!(
                    "bits={bits} disagrees with the branch budget (expected {})",
                    codebook.scheme.total_bits
                ),
            ));
        }

        let mut seen = 0;
        for (lineno, line) in lines {
            let mut parts = line.split_whitespace();
            let index: usize = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::parse(lineno, "bad level index"))?;
            let level: f64 = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::parse(lineno, "bad level value"))?;
            let terms = parts
                .filter(|&p| p != "0")
                .map(|p| p.parse::<Term>().map_err(|m| Error::parse(lineno, m)))
                .collect::<Result<Vec<Term>>>()?;
            if index != seen || index >= codebook.len() {
                return Err(Error::parse(lineno, format!("unexpected level index {index}")));
            }
            if codebook.levels[index] != level || codebook.decompositions[index] != canonical(terms) {
                return Err(Error::parse(
                    lineno,
                    format!("level {index} does not match the scheme's enumeration"),
                ));
            }
            seen += 1;
        }
        if seen != codebook.len() {
            return Err(Error::parse(
                hline,
                format!("expected {} levels, found {seen}", codebook.len()),
            ));
        }
        Ok(codebook)
    }
}

pub(crate) fn parse_u32_list(s: &str) -> std::result::Result<Vec<u32>, String> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|p| p.trim().parse::<u32>().map_err(|_| format!("bad integer {p:?}")))
        .collect()
}

/// A row-major tensor of level indices into a shared codebook.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    shape: Vec<usize>,
    codes: Vec<u32>,
    codebook: Arc<Codebook>,
}

impl QuantizedTensor {
    pub fn new(shape: Vec<usize>, codes: Vec<u32>, codebook: Arc<Codebook>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if codes.len() != expected {
            return Err(Error::DimensionMismatch(format!(
                "{} codes for shape {shape:?}",
                codes.len()
            )));
        }
        if let Some(&bad) = codes.iter().find(|&&c| c as usize >= codebook.len()) {
            return Err(Error::DimensionMismatch(format!(
                "code {bad} outside a codebook of {} levels",
                codebook.len()
            )));
        }
        Ok(Self {
            shape,
            codes,
            codebook,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn codes(&self) -> &[u32] {
        &self.codes
    }

    pub fn codebook(&self) -> &Arc<Codebook> {
        &self.codebook
    }

    /// `(rows, cols)` for a 2-D tensor.
    pub fn matrix_dims(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [rows, cols] => Ok((rows, cols)),
            _ => Err(Error::DimensionMismatch(format!(
                "expected a matrix, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn row(&self, i: usize) -> &[u32] {
        let cols = *self.shape.last().unwrap_or(&0);
        &self.codes[i * cols..(i + 1) * cols]
    }

    pub fn dequantize(&self) -> Vec<f64> {
        self.codes
            .iter()
            .map(|&c| self.codebook.dequantize(c as usize))
            .collect()
    }
}

/// Element-wise nearest-level projection. NaN and infinities are rejected.
pub fn quantize_tensor(
    values: &[f64],
    shape: &[usize],
    codebook: &Arc<Codebook>,
) -> Result<QuantizedTensor> {
    if let Some(&bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(bad));
    }
    let codes = values
        .iter()
        .map(|&v| codebook.quantize(v) as u32)
        .collect();
    QuantizedTensor::new(shape.to_vec(), codes, Arc::clone(codebook))
}
