//! Exact arithmetic in Q_p at finite precision, for odd p.
//!
//! A nonzero scalar is stored as `p^val * mantissa` where the mantissa is a
//! unit (coprime to p) known modulo `p^prec`; `prec` counts the correct
//! mantissa digits. Units keep relative precision through multiplication;
//! addition works at the weaker of the two absolute precisions, so
//! cancellation eats digits exactly as it should. A sum whose known digits
//! cancel completely is returned as exact zero, which is stored with an
//! infinite-valuation sentinel. Any operation that would leave fewer than
//! one correct digit errors out instead of fabricating mantissa bits.
//!
//! On top of the ring operations the module provides the unit-group
//! toolkit used everywhere else: Teichmuller representatives and digit
//! expansions, the principal-unit logarithm/exponential, binomial-series
//! powers `(1+z)^beta` with a p-adic exponent, and Hensel-Newton n-th roots
//! of principal units.

use std::fmt;

use num_bigint::{BigInt, BigUint, Sign};
use num_integer::Integer;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Valuation of a scalar; `Infinite` is the sentinel carried by exact zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Valuation {
    Finite(i64),
    Infinite,
}

impl Valuation {
    pub fn is_finite(self) -> bool {
        matches!(self, Valuation::Finite(_))
    }

    /// The finite value, or an error for the zero sentinel.
    pub fn finite(self) -> Result<i64> {
        match self {
            Valuation::Finite(v) => Ok(v),
            Valuation::Infinite => Err(Error::ZeroInput),
        }
    }
}

impl fmt::Display for Valuation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Valuation::Finite(v) => write!(f, "{v}"),
            Valuation::Infinite => write!(f, "+inf"),
        }
    }
}

pub(crate) fn is_odd_prime(p: u64) -> bool {
    if p < 3 || p % 2 == 0 {
        return false;
    }
    let mut d = 3u64;
    while d * d <= p {
        if p % d == 0 {
            return false;
        }
        d += 2;
    }
    true
}

/// p^k as a big integer.
pub(crate) fn pk(p: u64, k: u32) -> BigUint {
    BigUint::from(p).pow(k)
}

/// Inverse of `a` modulo `m` (both assumed coprime).
pub(crate) fn mod_inverse(a: &BigUint, m: &BigUint) -> BigUint {
    let a = BigInt::from(a.clone());
    let m = BigInt::from(m.clone());
    let ext = a.extended_gcd(&m);
    debug_assert!(ext.gcd.is_one(), "mod_inverse of a non-unit");
    let r = ext.x.mod_floor(&m);
    r.to_biguint().expect("mod_floor result is non-negative")
}

/// v_p(k!) by Legendre's formula.
pub(crate) fn factorial_valuation(p: u64, k: u64) -> u64 {
    let mut total = 0;
    let mut q = k / p;
    while q > 0 {
        total += q;
        q /= p;
    }
    total
}

/// An element of Q_p known to finitely many digits.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct PadicScalar {
    p: u64,
    val: Valuation,
    /// Canonical representative of the unit part, reduced mod p^prec and
    /// coprime to p. Zero iff `val` is the infinite sentinel.
    mantissa: BigUint,
    /// Number of correct mantissa digits. Zero only for exact zero.
    prec: u32,
}

impl PadicScalar {
    /// Exact zero over p.
    pub fn zero(p: u64) -> Self {
        PadicScalar {
            p,
            val: Valuation::Infinite,
            mantissa: BigUint::zero(),
            prec: 0,
        }
    }

    /// One, known to `prec` digits.
    pub fn one(p: u64, prec: u32) -> Self {
        PadicScalar {
            p,
            val: Valuation::Finite(0),
            mantissa: BigUint::one(),
            prec,
        }
    }

    /// Build from a unit representative and a valuation. The mantissa must
    /// be a canonical representative: nonzero, coprime to p, below p^prec.
    pub fn from_unit(p: u64, prec: u32, val: i64, mantissa: BigUint) -> Result<Self> {
        if !is_odd_prime(p) {
            return Err(Error::InvalidPrime(p));
        }
        if prec == 0 {
            return Err(Error::PrecisionExhausted);
        }
        if mantissa.is_zero()
            || (&mantissa % p).is_zero()
            || mantissa >= pk(p, prec)
        {
            return Err(Error::BadMantissa(mantissa.to_string()));
        }
        Ok(PadicScalar {
            p,
            val: Valuation::Finite(val),
            mantissa,
            prec,
        })
    }

    /// Embed an integer exactly, keeping `prec` unit digits.
    pub fn from_integer(p: u64, prec: u32, k: &BigInt) -> Self {
        if !is_odd_prime(p) || prec == 0 {
            panic!("from_integer requires an odd prime and prec >= 1");
        }
        if k.is_zero() {
            return PadicScalar::zero(p);
        }
        let mut mag = k.magnitude().clone();
        let mut val = 0i64;
        let bp = BigUint::from(p);
        while (&mag % &bp).is_zero() {
            mag /= &bp;
            val += 1;
        }
        let modulus = pk(p, prec);
        let mut m = mag % &modulus;
        if k.sign() == Sign::Minus {
            m = (&modulus - m) % &modulus;
        }
        PadicScalar {
            p,
            val: Valuation::Finite(val),
            mantissa: m,
            prec,
        }
    }

    pub fn from_i64(p: u64, prec: u32, k: i64) -> Self {
        Self::from_integer(p, prec, &BigInt::from(k))
    }

    /// Embed a rational a/b with b coprime to p.
    pub fn from_ratio(p: u64, prec: u32, a: &BigInt, b: &BigInt) -> Result<Self> {
        if b.is_zero() {
            return Err(Error::DivisionByZero);
        }
        let num = Self::from_integer(p, prec, a);
        let den = Self::from_integer(p, prec, b);
        num.div(&den)
    }

    pub fn p(&self) -> u64 {
        self.p
    }

    pub fn valuation(&self) -> Valuation {
        self.val
    }

    pub fn precision(&self) -> u32 {
        self.prec
    }

    pub fn mantissa(&self) -> &BigUint {
        &self.mantissa
    }

    pub fn is_zero(&self) -> bool {
        self.val == Valuation::Infinite
    }

    pub fn is_unit(&self) -> bool {
        self.val == Valuation::Finite(0)
    }

    /// A unit congruent to 1 mod p.
    pub fn is_principal_unit(&self) -> bool {
        self.is_unit() && (&self.mantissa % self.p).is_one()
    }

    /// Absolute precision: the result is pinned down modulo p^(this).
    pub fn absolute_precision(&self) -> Option<i64> {
        match self.val {
            Valuation::Finite(v) => Some(v + i64::from(self.prec)),
            Valuation::Infinite => None,
        }
    }

    /// |x|_p as an exact rational (0 for zero).
    pub fn abs_exact(&self) -> BigRational {
        match self.val {
            Valuation::Infinite => BigRational::zero(),
            Valuation::Finite(v) => power_rational(self.p, -v),
        }
    }

    /// The exact integer p^val * mantissa represented by the known digits.
    /// Errors for negative valuation.
    pub fn lift_integer(&self) -> Result<BigInt> {
        match self.val {
            Valuation::Infinite => Ok(BigInt::zero()),
            Valuation::Finite(v) if v >= 0 => {
                Ok(BigInt::from(&self.mantissa * pk(self.p, v as u32)))
            }
            Valuation::Finite(_) => Err(Error::NotIntegral),
        }
    }

    /// The represented value as an exact rational p^val * mantissa.
    pub fn lift_rational(&self) -> BigRational {
        match self.val {
            Valuation::Infinite => BigRational::zero(),
            Valuation::Finite(v) => {
                let m = BigRational::from_integer(BigInt::from(self.mantissa.clone()));
                m * power_rational(self.p, v)
            }
        }
    }

    /// Residue of the element modulo p^m, as a machine word. Requires the
    /// element to be integral and known at least mod p^m.
    pub fn residue_u64(&self, m: u32) -> Result<u64> {
        match self.val {
            Valuation::Infinite => Ok(0),
            Valuation::Finite(v) => {
                if v < 0 {
                    return Err(Error::NotIntegral);
                }
                if v + i64::from(self.prec) < i64::from(m) {
                    return Err(Error::InsufficientPrecision {
                        needed: m,
                        have: (v + i64::from(self.prec)).max(0) as u32,
                    });
                }
                if v >= i64::from(m) {
                    return Ok(0);
                }
                let r = (&self.mantissa * pk(self.p, v as u32)) % pk(self.p, m);
                r.to_u64().ok_or(Error::BadRecord(format!(
                    "residue mod {}^{} does not fit in u64",
                    self.p, m
                )))
            }
        }
    }

    /// Reduce to at most `prec` known digits (no-op if already coarser).
    pub fn truncate(&self, prec: u32) -> Self {
        if self.is_zero() || self.prec <= prec {
            return self.clone();
        }
        PadicScalar {
            p: self.p,
            val: self.val,
            mantissa: &self.mantissa % pk(self.p, prec),
            prec,
        }
    }

    fn check_prime(&self, other: &Self) -> Result<()> {
        if self.p != other.p {
            return Err(Error::PrimeMismatch(self.p, other.p));
        }
        Ok(())
    }

    /// Canonicalize a raw sum p^base_val * m where m is known mod p^digits.
    /// Full cancellation of the known digits is returned as exact zero.
    fn canonical(p: u64, base_val: i64, m: BigUint, digits: u32) -> Result<Self> {
        let modulus = pk(p, digits);
        let mut m = m % &modulus;
        if m.is_zero() {
            return Ok(PadicScalar::zero(p));
        }
        let bp = BigUint::from(p);
        let mut shift = 0u32;
        while (&m % &bp).is_zero() {
            m /= &bp;
            shift += 1;
        }
        let rem = digits - shift;
        if rem == 0 {
            return Err(Error::PrecisionExhausted);
        }
        Ok(PadicScalar {
            p,
            val: Valuation::Finite(base_val + i64::from(shift)),
            mantissa: m % pk(p, rem),
            prec: rem,
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_prime(other)?;
        if self.is_zero() {
            return Ok(other.clone());
        }
        if other.is_zero() {
            return Ok(self.clone());
        }
        let (lo, hi) = if self.val <= other.val {
            (self, other)
        } else {
            (other, self)
        };
        let lv = lo.val.finite()?;
        let hv = hi.val.finite()?;
        let shift = (hv - lv) as u64;
        if shift >= u64::from(lo.prec) {
            // The higher term sits entirely below the known digits of the
            // lower one; it cannot change them.
            return Ok(lo.clone());
        }
        let shift = shift as u32;
        let digits = lo.prec.min(shift + hi.prec);
        let m = &lo.mantissa + &hi.mantissa * pk(lo.p, shift);
        Self::canonical(lo.p, lv, m, digits)
    }

    pub fn neg(&self) -> Self {
        if self.is_zero() {
            return self.clone();
        }
        let modulus = pk(self.p, self.prec);
        PadicScalar {
            p: self.p,
            val: self.val,
            mantissa: (&modulus - &self.mantissa) % modulus,
            prec: self.prec,
        }
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.add(&other.neg())
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.check_prime(other)?;
        if self.is_zero() || other.is_zero() {
            return Ok(PadicScalar::zero(self.p));
        }
        let prec = self.prec.min(other.prec);
        Ok(PadicScalar {
            p: self.p,
            val: Valuation::Finite(self.val.finite()? + other.val.finite()?),
            mantissa: (&self.mantissa * &other.mantissa) % pk(self.p, prec),
            prec,
        })
    }

    pub fn inv(&self) -> Result<Self> {
        if self.is_zero() {
            return Err(Error::DivisionByZero);
        }
        let modulus = pk(self.p, self.prec);
        Ok(PadicScalar {
            p: self.p,
            val: Valuation::Finite(-self.val.finite()?),
            mantissa: mod_inverse(&(&self.mantissa % &modulus), &modulus),
            prec: self.prec,
        })
    }

    pub fn div(&self, other: &Self) -> Result<Self> {
        self.mul(&other.inv()?)
    }

    /// Integer power, with zero^0 = 1 by the empty-product convention.
    pub fn pow_i64(&self, k: i64) -> Result<Self> {
        if k == 0 {
            return Ok(PadicScalar::one(self.p, self.prec.max(1)));
        }
        if self.is_zero() {
            return if k > 0 {
                Ok(PadicScalar::zero(self.p))
            } else {
                Err(Error::DivisionByZero)
            };
        }
        let base = if k < 0 { self.inv()? } else { self.clone() };
        let e = k.unsigned_abs();
        let modulus = pk(base.p, base.prec);
        let m = base.mantissa.modpow(&BigUint::from(e), &modulus);
        Ok(PadicScalar {
            p: base.p,
            val: Valuation::Finite(base.val.finite()? * (e as i64)),
            mantissa: m,
            prec: base.prec,
        })
    }

    /// Multiply by an exact power of p.
    pub fn shift(&self, k: i64) -> Self {
        match self.val {
            Valuation::Infinite => self.clone(),
            Valuation::Finite(v) => PadicScalar {
                p: self.p,
                val: Valuation::Finite(v + k),
                mantissa: self.mantissa.clone(),
                prec: self.prec,
            },
        }
    }

    /// Do the two values agree modulo p^abs_exponent?
    pub fn congruent_abs(&self, other: &Self, abs_exponent: i64) -> bool {
        let diff = match self.sub(other) {
            Ok(d) => d,
            Err(_) => return false,
        };
        match diff.val {
            Valuation::Infinite => true,
            Valuation::Finite(v) => v >= abs_exponent,
        }
    }

    /// Membership in Q_p^(1) = p^Z x (1 + pZ_p): the unit part starts with
    /// Teichmuller digit 1, i.e. has residue 1 mod p.
    pub fn is_positive(&self) -> Result<bool> {
        if self.is_zero() {
            return Err(Error::ZeroInput);
        }
        Ok((&self.mantissa % self.p).is_one())
    }

    /// Teichmuller representative of the unit part: the unique (p-1)-th
    /// root of unity with the same residue, computed as the stable limit of
    /// repeated p-th powers.
    pub fn teichmuller_unit(&self) -> Result<Self> {
        if !self.is_unit() {
            return Err(Error::NotUnit);
        }
        let modulus = pk(self.p, self.prec);
        let m = teichmuller_lift(self.p, &self.mantissa, &modulus, self.prec);
        Ok(PadicScalar {
            p: self.p,
            val: Valuation::Finite(0),
            mantissa: m,
            prec: self.prec,
        })
    }

    /// Full Teichmuller digit expansion of a nonzero scalar.
    pub fn teichmuller_digits(&self) -> Result<TeichmullerDigitsQp> {
        let v = self.val.finite()?;
        let modulus = pk(self.p, self.prec);
        let bp = BigUint::from(self.p);
        let mut t = self.mantissa.clone();
        let mut digits = Vec::with_capacity(self.prec as usize);
        for _ in 0..self.prec {
            let d = if (&t % &bp).is_zero() {
                BigUint::zero()
            } else {
                teichmuller_lift(self.p, &t, &modulus, self.prec)
            };
            // d matches t mod p, so the difference moves one digit up.
            let diff = (&t + &modulus - (&d % &modulus)) % &modulus;
            t = diff / &bp;
            digits.push(d);
        }
        Ok(TeichmullerDigitsQp {
            p: self.p,
            valuation: v,
            precision: self.prec,
            digits,
        })
    }

    /// Logarithm of a principal unit via the alternating series on u - 1.
    /// The result keeps the absolute precision of the input.
    pub fn log_principal(&self) -> Result<Self> {
        if !self.is_principal_unit() {
            return Err(Error::NotPrincipalUnit);
        }
        let one = PadicScalar::one(self.p, self.prec);
        let z = self.sub(&one)?;
        if z.is_zero() {
            return Ok(PadicScalar::zero(self.p));
        }
        let nu = z.val.finite()? as u32;
        let target = self.prec;
        // Stop once i*nu - log_p(i) clears the target; the bound is
        // increasing in i, so every later term is negligible too.
        let mut trunc = 1u64;
        while (trunc as i64) * i64::from(nu) - ilog_floor(self.p, trunc) < i64::from(target) {
            trunc += 1;
        }
        let guard = ilog_floor(self.p, trunc.max(1)) as u32 + 1;
        let work = target + guard;
        let modulus = pk(self.p, work);
        let zm = lift_mod(&z, work);
        let mut power = BigUint::one(); // z^i, maintained incrementally
        let mut acc = BigUint::zero();
        for i in 1..=trunc {
            power = (&power * &zm) % &modulus;
            // term = (-1)^(i+1) z^i / i, with the p-part of i divided out
            // exactly and the unit part inverted mod p^work.
            let vi = val_u64(self.p, i);
            let ui = i / self.p.pow(vi as u32); // unit part of i
            let mut term = &power / pk(self.p, vi as u32);
            term = (&term * mod_inverse(&BigUint::from(ui), &modulus)) % &modulus;
            if i % 2 == 1 {
                acc = (acc + term) % &modulus;
            } else {
                acc = (&acc + &modulus - term) % &modulus;
            }
        }
        Self::canonical(self.p, 0, acc % pk(self.p, target), target)
    }

    /// Exponential of an element with valuation >= 1 (convergent for odd p).
    pub fn exp_small(&self) -> Result<Self> {
        if self.is_zero() {
            return Ok(PadicScalar::one(self.p, u32::MAX / 2));
        }
        let nu = self.val.finite()?;
        if nu < 1 {
            return Err(Error::NotPrincipalUnit);
        }
        let nu = nu as u64;
        let target = (nu + u64::from(self.prec)).min(u64::from(u32::MAX / 2)) as u32;
        // i*nu - (i-1)/(p-1) is an increasing lower bound for the term
        // valuation i*nu - v_p(i!).
        let mut trunc = 1u64;
        while (trunc * nu * (self.p - 1)).saturating_sub(trunc - 1)
            < u64::from(target) * (self.p - 1)
        {
            trunc += 1;
        }
        let guard = factorial_valuation(self.p, trunc) as u32 + 1;
        let work = target + guard;
        let modulus = pk(self.p, work);
        let zm = lift_mod(self, work);
        let mut term = BigUint::one(); // z^i / i!, exactly, mod p^work
        let mut acc = BigUint::one();
        for i in 1..=trunc {
            term = (&term * &zm) % &modulus;
            let vi = val_u64(self.p, i);
            let ui = i / self.p.pow(vi as u32);
            term /= pk(self.p, vi as u32);
            term = (&term * mod_inverse(&BigUint::from(ui), &modulus)) % &modulus;
            acc = (acc + &term) % &modulus;
        }
        Self::canonical(self.p, 0, acc % pk(self.p, target), target)
    }

    /// (1 + z)^beta for v(z) >= 1 and beta in Z_p, by the binomial series
    /// sum_i binom(beta, i) z^i.
    pub fn one_plus_pow(z: &Self, beta: &Self) -> Result<Self> {
        if z.is_zero() {
            return Ok(PadicScalar::one(z.p, u32::MAX / 2));
        }
        z.check_prime(beta)?;
        let nu = z.val.finite()?;
        if nu < 1 {
            return Err(Error::NotPrincipalUnit);
        }
        if let Valuation::Finite(bv) = beta.val {
            if bv < 0 {
                return Err(Error::BadMantissa(
                    "exponent must be a p-adic integer".into(),
                ));
            }
        }
        let nu = nu as u64;
        let p = z.p;
        // Output absolute precision: limited by the digits of z and by the
        // digits of beta shifted up by v(z).
        let z_abs = nu + u64::from(z.prec);
        let beta_abs = match beta.val {
            Valuation::Infinite => u64::MAX,
            Valuation::Finite(bv) => (bv as u64) + u64::from(beta.prec),
        };
        let target = z_abs.min(beta_abs.saturating_add(nu)).min(u64::from(u32::MAX / 2)) as u32;
        let mut trunc = 1u64;
        while (trunc * nu * (p - 1)).saturating_sub(trunc - 1) < u64::from(target) * (p - 1) {
            trunc += 1;
        }
        let guard = factorial_valuation(p, trunc) as u32 + 1;
        let work = target + guard;
        let modulus = pk(p, work);
        let zm = lift_mod(z, work);
        let bm = lift_mod(beta, work);
        let mut acc = BigUint::one();
        let mut coeff = BigUint::one(); // binom(beta, i) mod p^(work - v_p(i!))
        let mut power = BigUint::one(); // z^i
        for i in 1..=trunc {
            // coeff *= (beta - (i-1)) / i
            let step = (&bm + &modulus - BigUint::from(i - 1) % &modulus) % &modulus;
            coeff = (coeff * step) % &modulus;
            let vi = val_u64(p, i);
            let ui = i / p.pow(vi as u32);
            coeff /= pk(p, vi as u32);
            coeff = (&coeff * mod_inverse(&BigUint::from(ui), &modulus)) % &modulus;
            power = (&power * &zm) % &modulus;
            acc = (acc + &coeff * &power) % &modulus;
        }
        Self::canonical(p, 0, acc % pk(p, target), target)
    }

    /// The unique principal-unit n-th root of a principal unit, for n
    /// coprime to p, by Hensel-Newton iteration from y = 1.
    pub fn nth_root_principal(&self, n: u64) -> Result<Self> {
        if !self.is_principal_unit() {
            return Err(Error::NotPrincipalUnit);
        }
        if n == 0 || n % self.p == 0 {
            return Err(Error::BadDegree {
                p: self.p,
                n: n.min(u64::from(u32::MAX)) as u32,
            });
        }
        let modulus = pk(self.p, self.prec);
        let ne = BigUint::from(n);
        let target = &self.mantissa;
        let mut y = BigUint::one();
        // Newton doubles the number of correct digits per step; 2*log2 of
        // the precision plus slack is a safe cap.
        let cap = 2 * (64 - u64::from(self.prec).leading_zeros()) + 4;
        for _ in 0..cap {
            let yn = y.modpow(&ne, &modulus);
            if &yn == target {
                break;
            }
            let deriv = (&ne * y.modpow(&(&ne - 1u32), &modulus)) % &modulus;
            let diff = (&yn + &modulus - target % &modulus) % &modulus;
            let step = (&diff * mod_inverse(&deriv, &modulus)) % &modulus;
            y = (&y + &modulus - step) % &modulus;
        }
        debug_assert_eq!(y.modpow(&ne, &modulus), *target);
        Ok(PadicScalar {
            p: self.p,
            val: Valuation::Finite(0),
            mantissa: y,
            prec: self.prec,
        })
    }
}

/// p^k as an exact rational, for k of either sign.
pub fn power_rational(p: u64, k: i64) -> BigRational {
    let mag = BigInt::from(pk(p, k.unsigned_abs().min(u64::from(u32::MAX)) as u32));
    if k >= 0 {
        BigRational::from_integer(mag)
    } else {
        BigRational::new(BigInt::one(), mag)
    }
}

/// v_p of a machine-word integer (which must be nonzero).
fn val_u64(p: u64, mut k: u64) -> u64 {
    debug_assert!(k != 0);
    let mut v = 0;
    while k % p == 0 {
        k /= p;
        v += 1;
    }
    v
}

/// floor(log_p(k)) for k >= 1, as i64 for bound arithmetic.
pub(crate) fn ilog_floor(p: u64, k: u64) -> i64 {
    let mut v = 0i64;
    let mut acc = p;
    while acc <= k {
        v += 1;
        acc = acc.saturating_mul(p);
    }
    v
}

/// Lift the known digits of x to an integer representative mod p^digits.
/// Requires v(x) >= 0; digits beyond the known range are taken as zero.
fn lift_mod(x: &PadicScalar, digits: u32) -> BigUint {
    match x.val {
        Valuation::Infinite => BigUint::zero(),
        Valuation::Finite(v) => {
            debug_assert!(v >= 0);
            (&x.mantissa * pk(x.p, v as u32)) % pk(x.p, digits)
        }
    }
}

/// Stable limit of u -> u^p mod `modulus`, reached after at most `prec`
/// steps because each step fixes one more digit.
fn teichmuller_lift(p: u64, u: &BigUint, modulus: &BigUint, prec: u32) -> BigUint {
    let bp = BigUint::from(p);
    let mut t = u % modulus;
    for _ in 0..prec {
        let next = t.modpow(&bp, modulus);
        if next == t {
            break;
        }
        t = next;
    }
    t
}

/// Teichmuller digit expansion of a nonzero element of Q_p: the valuation
/// together with digits that are exact (p-1)-th roots of unity (or zero) at
/// full working precision.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TeichmullerDigitsQp {
    pub p: u64,
    pub valuation: i64,
    pub precision: u32,
    pub digits: Vec<BigUint>,
}

impl TeichmullerDigitsQp {
    /// Leading digit: nonzero by construction for a nonzero input.
    pub fn leading(&self) -> &BigUint {
        &self.digits[0]
    }

    /// Reassemble p^valuation * sum digits[i] p^i; matches the source
    /// element modulo p^(valuation + precision).
    pub fn recompose(&self) -> PadicScalar {
        let modulus = pk(self.p, self.precision);
        let mut acc = BigUint::zero();
        for (i, d) in self.digits.iter().enumerate() {
            acc = (acc + d * pk(self.p, i as u32)) % &modulus;
        }
        PadicScalar::canonical(self.p, self.valuation, acc, self.precision)
            .expect("digit expansion of a nonzero element recomposes to a nonzero element")
    }
}

impl fmt::Debug for PadicScalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.val {
            Valuation::Infinite => write!(f, "0 (p={})", self.p),
            Valuation::Finite(v) => write!(
                f,
                "{}*{}^{} + O({}^{})",
                self.mantissa,
                self.p,
                v,
                self.p,
                v + i64::from(self.prec)
            ),
        }
    }
}

impl fmt::Display for PadicScalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Serialized form: `{"p", "nu", "mantissa", "precision"}` with the
/// mantissa as a decimal string and `nu = null` for exact zero. Roundtrips
/// bit-exactly.
#[derive(Serialize, Deserialize)]
struct ScalarRecord {
    p: u64,
    nu: Option<i64>,
    mantissa: String,
    precision: u32,
}

impl Serialize for PadicScalar {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let rec = ScalarRecord {
            p: self.p,
            nu: match self.val {
                Valuation::Finite(v) => Some(v),
                Valuation::Infinite => None,
            },
            mantissa: self.mantissa.to_string(),
            precision: self.prec,
        };
        rec.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for PadicScalar {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let rec = ScalarRecord::deserialize(deserializer)?;
        let mantissa: BigUint = rec
            .mantissa
            .parse()
            .map_err(|_| D::Error::custom("mantissa is not a decimal integer"))?;
        match rec.nu {
            None => {
                if !mantissa.is_zero() {
                    return Err(D::Error::custom("zero record must have mantissa 0"));
                }
                Ok(PadicScalar::zero(rec.p))
            }
            Some(v) => PadicScalar::from_unit(rec.p, rec.precision, v, mantissa)
                .map_err(|e| D::Error::custom(e.to_string())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const P: u64 = 5;
    const N: u32 = 8;

    fn s(k: i64) -> PadicScalar {
        PadicScalar::from_i64(P, N, k)
    }

    #[test]
    fn integer_embedding_matches_modular_arithmetic() {
        // Oracle: plain integer arithmetic reduced mod p^N.
        for a in [-37i64, -5, -1, 0, 2, 3, 25, 313, 6250] {
            for b in [-14i64, -3, 1, 7, 75, 1024] {
                // A sum may cancel digits, so compare at the shared
                // absolute precision; a product is digit-exact.
                let floor = [s(a), s(b)]
                    .iter()
                    .filter_map(|x| x.absolute_precision())
                    .min()
                    .unwrap_or(i64::from(N));
                let sum = s(a).add(&s(b)).unwrap();
                assert!(sum.congruent_abs(&s(a + b), floor), "{a} + {b}");
                let prod = s(a).mul(&s(b)).unwrap();
                assert_eq!(prod, s(a * b), "{a} * {b}");
            }
        }
    }

    #[test]
    fn valuations_of_integers() {
        assert_eq!(s(50).valuation(), Valuation::Finite(2));
        assert_eq!(s(50).mantissa(), &BigUint::from(2u32));
        assert_eq!(s(-5).valuation(), Valuation::Finite(1));
        assert_eq!(s(0).valuation(), Valuation::Infinite);
        assert!(s(0).is_zero());
    }

    #[test]
    fn additive_inverse_cancels_to_exact_zero() {
        for k in [1i64, -9, 35, 624, 3001] {
            let x = s(k);
            assert!(x.add(&x.neg()).unwrap().is_zero());
        }
    }

    #[test]
    fn cancellation_costs_relative_but_not_absolute_precision() {
        // (1 + p^3) - 1 = p^3 known to N - 3 digits: absolute precision N.
        let x = s(1 + 125);
        let d = x.sub(&s(1)).unwrap();
        assert_eq!(d.valuation(), Valuation::Finite(3));
        assert_eq!(d.precision(), N - 3);
        assert_eq!(d.absolute_precision(), Some(i64::from(N)));
    }

    #[test]
    fn add_below_known_digits_is_identity() {
        let x = s(7);
        let tiny = s(1).shift(i64::from(N) + 2);
        assert_eq!(x.add(&tiny).unwrap(), x);
    }

    #[test]
    fn division_and_inverse() {
        let x = s(7);
        let y = x.inv().unwrap();
        assert_eq!(x.mul(&y).unwrap(), s(1));
        // 1/5 has valuation -1.
        let fifth = s(1).div(&s(5)).unwrap();
        assert_eq!(fifth.valuation(), Valuation::Finite(-1));
        assert_eq!(fifth.mul(&s(5)).unwrap(), s(1));
    }

    #[test]
    fn teichmuller_limit_agrees_with_brute_force_root_search() {
        // Independent oracle: the unique x mod p^3 with x = 2 mod 5 and
        // x^4 = 1 mod 5^3, found by exhaustive search.
        let mut expected = None;
        for x in 0u64..125 {
            if x % 5 == 2 && x.pow(4) % 125 == 1 {
                assert!(expected.is_none(), "root should be unique");
                expected = Some(x);
            }
        }
        let t = s(2).teichmuller_unit().unwrap();
        assert_eq!(
            t.mantissa() % BigUint::from(125u32),
            BigUint::from(expected.unwrap())
        );
        // Full-precision digit-power identity.
        let m = pk(P, N);
        assert_eq!(t.mantissa().modpow(&BigUint::from(4u32), &m), BigUint::one());
    }

    #[test]
    fn minus_one_has_leading_teichmuller_digit_four() {
        let digits = s(-1).teichmuller_digits().unwrap();
        assert_eq!(digits.leading() % BigUint::from(5u32), BigUint::from(4u32));
        // -1 is itself a root of unity, so the expansion terminates.
        assert_eq!(digits.leading(), &(pk(P, N) - BigUint::one()));
        assert!(digits.digits[1..].iter().all(|d| d.is_zero()));
        assert_eq!(digits.valuation, 0);
    }

    #[test]
    fn teichmuller_digits_recompose_and_are_roots_of_unity() {
        let m = pk(P, N);
        let pm1 = BigUint::from(P - 1);
        for k in [3i64, 14, 86, -37, 5 * 49, 3124] {
            let x = s(k);
            let digits = x.teichmuller_digits().unwrap();
            assert_eq!(digits.recompose(), x, "recompose {k}");
            for d in &digits.digits {
                if !d.is_zero() {
                    assert_eq!(d.modpow(&pm1, &m), BigUint::one(), "digit of {k}");
                }
            }
        }
    }

    #[test]
    fn positivity_reads_the_leading_digit() {
        // 6 = 1 + 5 is a principal unit; 7 has residue 2; -5 has unit -1.
        assert!(s(6).is_positive().unwrap());
        assert!(s(6).shift(-4).is_positive().unwrap());
        assert!(!s(7).is_positive().unwrap());
        assert!(!s(-5).is_positive().unwrap());
        assert!(s(5).is_positive().unwrap());
        assert!(s(0).is_positive().is_err());
    }

    #[test]
    fn log_and_exp_invert_each_other() {
        for k in [6i64, 11, 26, 1 + 50, 1 - 125] {
            let u = s(k);
            let l = u.log_principal().unwrap();
            assert!(l.valuation() >= Valuation::Finite(1));
            let back = l.exp_small().unwrap();
            assert!(back.congruent_abs(&u, i64::from(N)), "exp(log({k}))");
        }
        for k in [5i64, 50, -25] {
            let z = s(k);
            let e = z.exp_small().unwrap();
            let back = e.log_principal().unwrap();
            assert!(back.congruent_abs(&z, i64::from(N)), "log(exp({k}))");
        }
    }

    #[test]
    fn log_is_an_isometry_on_principal_units() {
        for k in [6i64, 26, 126, 1 + 3 * 25] {
            let u = s(k);
            let z = u.sub(&s(1)).unwrap();
            assert_eq!(u.log_principal().unwrap().valuation(), z.valuation());
        }
    }

    #[test]
    fn log_turns_products_into_sums() {
        let u = s(6);
        let v = s(31);
        let lhs = u.mul(&v).unwrap().log_principal().unwrap();
        let rhs = u.log_principal().unwrap().add(&v.log_principal().unwrap()).unwrap();
        assert!(lhs.congruent_abs(&rhs, i64::from(N)));
    }

    #[test]
    fn binomial_series_matches_integer_powers() {
        // (1+z)^k for a plain integer exponent must equal repeated
        // multiplication; this pins the Mahler path to an independent one.
        let z = s(10);
        let u = s(11);
        for k in [0i64, 1, 2, 3, 7, 19] {
            let beta = s(k);
            let series = PadicScalar::one_plus_pow(&z, &beta).unwrap();
            let direct = u.pow_i64(k).unwrap();
            assert!(series.congruent_abs(&direct, i64::from(N)), "exponent {k}");
        }
    }

    #[test]
    fn binomial_series_matches_exp_log_route() {
        // Dual route: (1+z)^beta = exp(beta log(1+z)).
        for (zk, bk) in [(10i64, 7i64), (25, -2), (10, 313), (50, 12), (5, 124)] {
            let z = s(zk);
            let beta = s(bk);
            let series = PadicScalar::one_plus_pow(&z, &beta).unwrap();
            let via_log = beta
                .mul(&s(1 + zk).log_principal().unwrap())
                .unwrap()
                .exp_small()
                .unwrap();
            assert!(
                series.congruent_abs(&via_log, i64::from(N)),
                "z={zk} beta={bk}: {series:?} vs {via_log:?}"
            );
        }
    }

    #[test]
    fn one_plus_pow_is_a_homomorphism_in_the_exponent() {
        let z = s(10);
        let a = s(17);
        let b = s(-6);
        let lhs = PadicScalar::one_plus_pow(&z, &a.add(&b).unwrap()).unwrap();
        let rhs = PadicScalar::one_plus_pow(&z, &a)
            .unwrap()
            .mul(&PadicScalar::one_plus_pow(&z, &b).unwrap())
            .unwrap();
        assert!(lhs.congruent_abs(&rhs, i64::from(N)));
    }

    #[test]
    fn nth_root_undoes_nth_power() {
        for k in [6i64, 11, 126, 56] {
            for n in [2u64, 3, 4, 7] {
                let y = s(k);
                let x = y.pow_i64(n as i64).unwrap();
                let root = x.nth_root_principal(n).unwrap();
                assert_eq!(root, y, "({k})^{n} root");
            }
        }
    }

    #[test]
    fn nth_root_rejects_bad_inputs() {
        assert!(s(7).nth_root_principal(2).is_err(), "not principal");
        assert!(s(6).nth_root_principal(5).is_err(), "n divisible by p");
        assert!(s(0).nth_root_principal(2).is_err(), "zero");
    }

    #[test]
    fn nth_root_permutes_principal_units_mod_p3() {
        // Enumerate (1 + pc) mod p^3 for p in {3, 5}; the principal n-th
        // root map must be a bijection of that finite quotient.
        for p in [3u64, 5] {
            for n in [2u64, 4] {
                let m3 = pk(p, 3);
                let mut seen = std::collections::HashSet::new();
                for c in 0..p * p {
                    let u = PadicScalar::from_integer(p, 6, &BigInt::from(1 + p * c))
                        ;
                    let root = u.nth_root_principal(n).unwrap();
                    assert!(root.is_principal_unit());
                    let key = root.mantissa() % &m3;
                    assert!(seen.insert(key), "collision at p={p} n={n} c={c}");
                    assert!(root
                        .pow_i64(n as i64)
                        .unwrap()
                        .congruent_abs(&u, 3));
                }
                assert_eq!(seen.len(), (p * p) as usize);
            }
        }
    }

    #[test]
    fn serde_roundtrip_is_bit_exact() {
        for x in [s(313), s(0), s(-75), s(1).div(&s(50)).unwrap()] {
            let json = serde_json::to_string(&x).unwrap();
            let back: PadicScalar = serde_json::from_str(&json).unwrap();
            assert_eq!(back, x, "{json}");
        }
    }

    #[test]
    fn serde_rejects_non_canonical_mantissas() {
        let bad = r#"{"p":5,"nu":0,"mantissa":"10","precision":8}"#;
        assert!(serde_json::from_str::<PadicScalar>(bad).is_err());
        let bad_zero = r#"{"p":5,"nu":null,"mantissa":"3","precision":8}"#;
        assert!(serde_json::from_str::<PadicScalar>(bad_zero).is_err());
    }

    fn arb_scalar() -> impl Strategy<Value = PadicScalar> {
        (any::<i32>(), -3i64..4).prop_map(|(k, v)| s(i64::from(k)).shift(v))
    }

    proptest! {
        #[test]
        fn ring_laws(a in arb_scalar(), b in arb_scalar(), c in arb_scalar()) {
            let ab = a.add(&b).unwrap();
            prop_assert_eq!(ab.clone(), b.add(&a).unwrap());
            let assoc_l = ab.add(&c).unwrap();
            let assoc_r = a.add(&b.add(&c).unwrap()).unwrap();
            // Associativity of + holds at the shared absolute precision.
            let floor = [&a, &b, &c]
                .iter()
                .filter_map(|x| x.absolute_precision())
                .min()
                .unwrap_or(i64::from(N));
            prop_assert!(assoc_l.congruent_abs(&assoc_r, floor));

            let mab = a.mul(&b).unwrap();
            prop_assert_eq!(mab.clone(), b.mul(&a).unwrap());
            prop_assert_eq!(mab.mul(&c).unwrap(), a.mul(&b.mul(&c).unwrap()).unwrap());

            // Distributivity, again at shared absolute precision.
            let lhs = a.mul(&b.add(&c).unwrap()).unwrap();
            let rhs = a.mul(&b).unwrap().add(&a.mul(&c).unwrap()).unwrap();
            let va = match a.valuation() { Valuation::Finite(v) => v, _ => 0 };
            prop_assert!(lhs.congruent_abs(&rhs, floor + va));
        }

        #[test]
        fn multiplicative_inverse_law(a in arb_scalar()) {
            if !a.is_zero() {
                prop_assert_eq!(a.mul(&a.inv().unwrap()).unwrap(), PadicScalar::one(P, N));
            }
        }

        #[test]
        fn ultrametric_inequality(a in arb_scalar(), b in arb_scalar()) {
            let sum = a.add(&b).unwrap();
            let bound = a.abs_exact().max(b.abs_exact());
            prop_assert!(sum.abs_exact() <= bound);
        }

        #[test]
        fn serde_roundtrip_prop(a in arb_scalar()) {
            let json = serde_json::to_string(&a).unwrap();
            let back: PadicScalar = serde_json::from_str(&json).unwrap();
            prop_assert_eq!(back, a);
        }
    }
}
