//! Rotation-invariant homogeneous distributions on the unramified
//! extension, paired with compactly supported locally constant test
//! functions, with analytic continuation in the radial exponent.
//!
//! A distribution here is a product f = pi(r) * F(omega, xi) of a
//! quasicharacter of the positive radial line and a finite-level angular
//! density. The pairing <f, phi> is computed exactly (rationals) whenever
//! the unit character is trivial and the exponent is a rational integer,
//! and in complex double precision otherwise. The radial geometric tail is
//! summed in closed form, which *is* the analytic continuation: the result
//! is a finite exponential polynomial in p^(-s) plus a meromorphic tail
//! with at most a simple pole where p^(-(s+n)) = 1.

use std::f64::consts::TAU;
use std::fmt;

use num_bigint::BigInt;
use num_complex::Complex64;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::exec::maybe_par_map;
use crate::field::{ExtElement, FieldContext};
use crate::haar::{
    reduce_key, Ball, CylinderFunction, FiniteLevelAngular, MeasureValue, SphericalAtlas,
};
use crate::padic::{power_rational, PadicScalar, Valuation};
use crate::spherical::decompose;

/// Relative tolerance used to decide whether a complex exponent sits on the
/// exceptional locus p^(-(s+n)) = 1.
pub const EXCEPTIONAL_TOLERANCE: f64 = 1e-9;

/// A scalar that is exact when it can be and floating otherwise. All
/// arithmetic keeps the rational representation as long as both operands
/// are rational, and degrades to complex doubles the moment one side does.
#[derive(Clone, Debug, PartialEq)]
pub enum CValue {
    Rat(BigRational),
    Cx(Complex64),
}

impl CValue {
    pub fn rational(r: BigRational) -> Self {
        CValue::Rat(r)
    }

    pub fn from_int(k: i64) -> Self {
        CValue::Rat(BigRational::from_integer(BigInt::from(k)))
    }

    pub fn from_ratio(num: i64, den: i64) -> Self {
        CValue::Rat(BigRational::new(BigInt::from(num), BigInt::from(den)))
    }

    pub fn complex(z: Complex64) -> Self {
        CValue::Cx(z)
    }

    pub fn one() -> Self {
        CValue::Rat(BigRational::one())
    }

    /// True when the stored representation is literally zero. (A complex
    /// value within rounding error of zero does not count.)
    pub fn is_structural_zero(&self) -> bool {
        match self {
            CValue::Rat(r) => r.is_zero(),
            CValue::Cx(z) => z.re == 0.0 && z.im == 0.0,
        }
    }

    pub fn as_rational(&self) -> Option<&BigRational> {
        match self {
            CValue::Rat(r) => Some(r),
            CValue::Cx(_) => None,
        }
    }

    pub fn to_complex(&self) -> Complex64 {
        match self {
            CValue::Rat(r) => Complex64::new(rational_to_f64(r), 0.0),
            CValue::Cx(z) => *z,
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        match (self, other) {
            (CValue::Rat(a), CValue::Rat(b)) => CValue::Rat(a + b),
            _ => CValue::Cx(self.to_complex() + other.to_complex()),
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        match (self, other) {
            (CValue::Rat(a), CValue::Rat(b)) => CValue::Rat(a - b),
            _ => CValue::Cx(self.to_complex() - other.to_complex()),
        }
    }

    pub fn mul(&self, other: &Self) -> Self {
        match (self, other) {
            (CValue::Rat(a), CValue::Rat(b)) => CValue::Rat(a * b),
            _ => CValue::Cx(self.to_complex() * other.to_complex()),
        }
    }

    pub fn neg(&self) -> Self {
        match self {
            CValue::Rat(r) => CValue::Rat(-r),
            CValue::Cx(z) => CValue::Cx(-z),
        }
    }

    pub fn conj(&self) -> Self {
        match self {
            CValue::Rat(r) => CValue::Rat(r.clone()),
            CValue::Cx(z) => CValue::Cx(z.conj()),
        }
    }

    pub fn scale_rational(&self, by: &BigRational) -> Self {
        match self {
            CValue::Rat(r) => CValue::Rat(r * by),
            CValue::Cx(z) => CValue::Cx(z * rational_to_f64(by)),
        }
    }

    pub fn abs(&self) -> f64 {
        match self {
            CValue::Rat(r) => rational_to_f64(r).abs(),
            CValue::Cx(z) => z.norm(),
        }
    }

    /// |self - other| <= tol * (1 + |self| + |other|). Exact equality of two
    /// rational values short-circuits without any float conversion.
    pub fn approx_eq(&self, other: &Self, tol: f64) -> bool {
        if let (CValue::Rat(a), CValue::Rat(b)) = (self, other) {
            if a == b {
                return true;
            }
        }
        let d = (self.to_complex() - other.to_complex()).norm();
        d <= tol * (1.0 + self.to_complex().norm() + other.to_complex().norm())
    }
}

impl MeasureValue for CValue {
    fn zero() -> Self {
        CValue::Rat(<BigRational as Zero>::zero())
    }

    fn add(&self, other: &Self) -> Self {
        CValue::add(self, other)
    }

    fn scale(&self, by: &BigRational) -> Self {
        self.scale_rational(by)
    }
}

impl fmt::Display for CValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CValue::Rat(r) => {
                if r.denom().is_one() {
                    write!(f, "{}", r.numer())
                } else {
                    write!(f, "{}/{}", r.numer(), r.denom())
                }
            }
            CValue::Cx(z) => write!(f, "{}{:+}i", z.re, z.im),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum CValueRepr {
    Rational(String),
    Complex([f64; 2]),
}

impl Serialize for CValue {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let repr = match self {
            CValue::Rat(r) => CValueRepr::Rational(if r.denom().is_one() {
                format!("{}", r.numer())
            } else {
                format!("{}/{}", r.numer(), r.denom())
            }),
            CValue::Cx(z) => CValueRepr::Complex([z.re, z.im]),
        };
        repr.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for CValue {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        match CValueRepr::deserialize(deserializer)? {
            CValueRepr::Rational(s) => parse_rational(&s)
                .map(CValue::Rat)
                .ok_or_else(|| D::Error::custom(format!("bad rational literal {s:?}"))),
            CValueRepr::Complex([re, im]) => Ok(CValue::Cx(Complex64::new(re, im))),
        }
    }
}

pub(crate) fn parse_rational(s: &str) -> Option<BigRational> {
    let s = s.trim();
    match s.split_once('/') {
        Some((a, b)) => {
            let num: BigInt = a.trim().parse().ok()?;
            let den: BigInt = b.trim().parse().ok()?;
            if den.is_zero() {
                return None;
            }
            Some(BigRational::new(num, den))
        }
        None => {
            let num: BigInt = s.parse().ok()?;
            Some(BigRational::from_integer(num))
        }
    }
}

pub(crate) fn rational_to_f64(r: &BigRational) -> f64 {
    r.to_f64().unwrap_or_else(|| {
        // Out-of-range magnitudes still deserve a signed infinity rather
        // than a silent NaN.
        if r.is_negative() {
            f64::NEG_INFINITY
        } else {
            f64::INFINITY
        }
    })
}

/// The radial exponent s. Integer exponents keep every p^(js) exact.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SExponent {
    Integer(i64),
    Complex { re: f64, im: f64 },
}

impl SExponent {
    pub fn complex(re: f64, im: f64) -> Self {
        SExponent::Complex { re, im }
    }

    pub fn to_complex(&self) -> Complex64 {
        match self {
            SExponent::Integer(k) => Complex64::new(*k as f64, 0.0),
            SExponent::Complex { re, im } => Complex64::new(*re, *im),
        }
    }
}

/// p^(e*s) as an exact rational for integer s, complex double otherwise.
pub fn p_power_s(p: u64, e: i64, s: &SExponent) -> CValue {
    match s {
        SExponent::Integer(k) => CValue::Rat(power_rational(
            p,
            e.checked_mul(*k).expect("radial exponent overflow"),
        )),
        SExponent::Complex { .. } => {
            let lnp = (p as f64).ln();
            CValue::Cx((s.to_complex() * (e as f64) * lnp).exp())
        }
    }
}

/// Exact root of unity e^(2 pi i c / m), kept rational when it lands on the
/// real axis at +-1.
fn root_of_unity(c: u64, m: u64) -> CValue {
    let c = c % m;
    if c == 0 {
        return CValue::one();
    }
    if 2 * c == m {
        return CValue::from_int(-1);
    }
    let angle = TAU * (c as f64) / (m as f64);
    CValue::Cx(Complex64::new(angle.cos(), angle.sin()))
}

/// A character of the unit group of Z_p with finite level: it is trivial on
/// 1 + p^(level+1) Z_p. On the principal units it is determined by its value
/// on the topological generator 1 + p, namely e^(2 pi i a / p^level) with
/// a = principal_exponent; on the Teichmueller factor mu_(p-1) it is the
/// power map d |-> e^(2 pi i t d / (p-1)) with t = teich_exponent. Elements
/// of the positive radial line have principal unit part, so the Teichmueller
/// factor never acts there.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitCharacter {
    level: u32,
    principal_exponent: u64,
    teich_exponent: u64,
}

impl UnitCharacter {
    pub fn trivial() -> Self {
        UnitCharacter {
            level: 0,
            principal_exponent: 0,
            teich_exponent: 0,
        }
    }

    pub fn new(level: u32, principal_exponent: u64, teich_exponent: u64) -> Self {
        UnitCharacter {
            level,
            principal_exponent,
            teich_exponent,
        }
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn principal_exponent(&self) -> u64 {
        self.principal_exponent
    }

    pub fn teich_exponent(&self) -> u64 {
        self.teich_exponent
    }

    /// Whether the restriction to the principal units 1 + pZ_p is trivial.
    pub fn is_principal_trivial(&self, p: u64) -> bool {
        self.level == 0 || self.principal_exponent % pow_u64(p, self.level) == 0
    }

    /// The coordinate b (mod p^level) of a principal unit u = (1+p)^b,
    /// extracted from the exact logarithm ratio log u / log(1+p).
    fn principal_coordinate(&self, u: &PadicScalar) -> Result<u64> {
        if !u.is_principal_unit() {
            return Err(Error::NotPrincipalUnit);
        }
        if u.precision() < self.level + 1 {
            return Err(Error::InsufficientPrecision {
                needed: self.level + 1,
                have: u.precision(),
            });
        }
        let lu = u.log_principal()?;
        if lu.is_zero() {
            return Ok(0);
        }
        let p = u.p();
        let one_plus_p =
            PadicScalar::from_integer(p, u.precision(), &BigInt::from(p + 1)).log_principal()?;
        let ratio = lu.div(&one_plus_p)?;
        ratio.residue_u64(self.level)
    }

    /// Value on a principal unit of Z_p. Exact 1 for the trivial
    /// restriction; otherwise a p^level-th root of unity.
    pub fn eval_principal(&self, u: &PadicScalar) -> Result<CValue> {
        if self.level == 0 {
            if !u.is_principal_unit() {
                return Err(Error::NotPrincipalUnit);
            }
            return Ok(CValue::one());
        }
        let p = u.p();
        let pk = pow_u64(p, self.level);
        let a = self.principal_exponent % pk;
        if a == 0 {
            if !u.is_principal_unit() {
                return Err(Error::NotPrincipalUnit);
            }
            return Ok(CValue::one());
        }
        let b = self.principal_coordinate(u)?;
        let c = ((u128::from(a) * u128::from(b)) % u128::from(pk)) as u64;
        Ok(root_of_unity(c, pk))
    }

    /// Value on an arbitrary unit of Z_p: Teichmueller factor times the
    /// principal factor.
    pub fn eval_unit(&self, u: &PadicScalar) -> Result<CValue> {
        if u.valuation() != Valuation::Finite(0) {
            return Err(Error::NotUnit);
        }
        let p = u.p();
        let t = self.teich_exponent % (p - 1);
        let teich = if t == 0 {
            CValue::one()
        } else {
            let r0 = u.residue_u64(1)?;
            let g = smallest_primitive_root(p);
            let d = discrete_log_mod_p(p, g, r0)?;
            root_of_unity((u128::from(t) * u128::from(d) % u128::from(p - 1)) as u64, p - 1)
        };
        let principal = u.div(&u.teichmuller_unit()?)?;
        Ok(teich.mul(&self.eval_principal(&principal)?))
    }
}

fn pow_u64(base: u64, exp: u32) -> u64 {
    base.checked_pow(exp).expect("character modulus overflow")
}

/// Smallest primitive root mod p (p an odd prime small enough to brute
/// force; this only ever runs on the base prime of a context).
pub(crate) fn smallest_primitive_root(p: u64) -> u64 {
    'candidates: for g in 2..p {
        let mut x = 1u64;
        for _ in 0..(p - 2) {
            x = x * g % p;
            if x == 1 {
                continue 'candidates;
            }
        }
        return g;
    }
    unreachable!("every odd prime has a primitive root")
}

fn discrete_log_mod_p(p: u64, g: u64, target: u64) -> Result<u64> {
    let target = target % p;
    if target == 0 {
        return Err(Error::NotUnit);
    }
    let mut x = 1u64;
    for d in 0..(p - 1) {
        if x == target {
            return Ok(d);
        }
        x = x * g % p;
    }
    Err(Error::BadMantissa(format!(
        "{target} is not a power of {g} mod {p}"
    )))
}

/// A quasicharacter pi(r) = |r|_p^s * theta(u_r) of the positive radial
/// line Q_p^(1) = p^Z * (1 + pZ_p), attached to a field of residue degree n
/// so the exceptional locus p^(-(s+n)) = 1 is known.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Quasicharacter {
    p: u64,
    extension_degree: u32,
    s: SExponent,
    theta: UnitCharacter,
}

impl Quasicharacter {
    pub fn new(ctx: &FieldContext, s: SExponent, theta: UnitCharacter) -> Self {
        Quasicharacter {
            p: ctx.p(),
            extension_degree: ctx.degree(),
            s,
            theta,
        }
    }

    pub fn from_parts(p: u64, extension_degree: u32, s: SExponent, theta: UnitCharacter) -> Self {
        Quasicharacter {
            p,
            extension_degree,
            s,
            theta,
        }
    }

    pub fn p(&self) -> u64 {
        self.p
    }

    pub fn extension_degree(&self) -> u32 {
        self.extension_degree
    }

    pub fn s(&self) -> &SExponent {
        &self.s
    }

    pub fn theta(&self) -> &UnitCharacter {
        &self.theta
    }

    pub fn with_s(&self, s: SExponent) -> Self {
        Quasicharacter { s, ..self.clone() }
    }

    /// pi(r) for r in the positive radial line: p^(-v(r) s) theta(u_r).
    pub fn eval(&self, r: &PadicScalar) -> Result<CValue> {
        if r.p() != self.p {
            return Err(Error::PrimeMismatch(self.p, r.p()));
        }
        if !r.is_positive()? {
            return Err(Error::DiagnosticPrecondition(
                "quasicharacter argument must lie on the positive radial line".into(),
            ));
        }
        let nu = r.valuation().finite()?;
        let radial = p_power_s(self.p, -nu, &self.s);
        let unit_part = r.shift(-nu);
        Ok(radial.mul(&self.theta.eval_principal(&unit_part)?))
    }

    /// Whether pi sits on the exceptional locus: trivial theta and
    /// p^(-(s+n)) = 1 (for integer s this means s = -n exactly; for complex
    /// s the test uses EXCEPTIONAL_TOLERANCE, catching the whole vertical
    /// lattice s = -n + 2 pi i k / ln p).
    pub fn is_exceptional(&self) -> bool {
        if !self.theta.is_principal_trivial(self.p) {
            return false;
        }
        let n = i64::from(self.extension_degree);
        match self.s {
            SExponent::Integer(k) => k == -n,
            SExponent::Complex { .. } => {
                let lnp = (self.p as f64).ln();
                let w = self.s.to_complex() + (n as f64);
                ((-w * lnp).exp() - Complex64::new(1.0, 0.0)).norm() < EXCEPTIONAL_TOLERANCE
            }
        }
    }
}

/// A rotation-invariant distribution homogeneous of degree pi: the product
/// of pi on the radial coordinate with a finite-level angular density F.
#[derive(Clone, Debug)]
pub struct HomogeneousDistribution {
    pub pi: Quasicharacter,
    pub table: FiniteLevelAngular<CValue>,
}

impl HomogeneousDistribution {
    pub fn new(pi: Quasicharacter, table: FiniteLevelAngular<CValue>) -> Self {
        HomogeneousDistribution { pi, table }
    }
}

/// The normalized angular pairing of F with the constant 1: the plain
/// average of the tabulated values, since the normalized measure gives every
/// (omega, xi) coset equal weight 1 / (#omega * #xi).
pub fn angular_mass(table: &FiniteLevelAngular<CValue>) -> CValue {
    let count = table.len();
    if count == 0 {
        return <CValue as MeasureValue>::zero();
    }
    let mut acc = <CValue as MeasureValue>::zero();
    for v in table.values() {
        acc = acc.add(v);
    }
    acc.scale_rational(&BigRational::new(BigInt::one(), BigInt::from(count)))
}

/// The exactly summed radial tail: integral over {0 < |r| <= p^nu} of the
/// positive radial line of theta(u_r) |r|^(s + n - 1) dr. A nontrivial
/// theta kills every shell by orthogonality, giving exactly 0 (an entire
/// function of s). Trivial theta gives the geometric series
/// p^(nu (s+n) - 1) / (1 - p^(-(s+n))), which is the analytic continuation
/// to all s with a simple pole on p^(-(s+n)) = 1; the pole is reported as
/// an ExceptionalPole error carrying the residue p^(-1)/ln p of this
/// quantity itself (callers scale it by their own prefactors).
pub fn radial_character_sum(
    p: u64,
    n: u32,
    theta: &UnitCharacter,
    s: &SExponent,
    nu: i64,
) -> Result<CValue> {
    if !theta.is_principal_trivial(p) {
        return Ok(<CValue as MeasureValue>::zero());
    }
    let n = i64::from(n);
    match s {
        SExponent::Integer(k) => {
            let w = k + n;
            if w == 0 {
                return Err(pole_error(p, *s));
            }
            let numer = power_rational(p, nu * w - 1);
            let denom = BigRational::one() - power_rational(p, -w);
            Ok(CValue::Rat(numer / denom))
        }
        SExponent::Complex { .. } => {
            let lnp = (p as f64).ln();
            let w = s.to_complex() + (n as f64);
            let x = (-w * lnp).exp();
            if (x - Complex64::new(1.0, 0.0)).norm() < EXCEPTIONAL_TOLERANCE {
                return Err(pole_error(p, *s));
            }
            let numer = ((w * (nu as f64) - 1.0) * lnp).exp();
            Ok(CValue::Cx(numer / (Complex64::new(1.0, 0.0) - x)))
        }
    }
}

fn pole_error(p: u64, s: SExponent) -> Error {
    let lnp = (p as f64).ln();
    Error::ExceptionalPole {
        s: s.to_complex(),
        residue: Complex64::new(1.0 / (p as f64 * lnp), 0.0),
    }
}

/// Average of theta over the principal-unit classes mod p^m for any
/// m > level(theta): exactly 1 when the principal restriction is trivial
/// and exactly 0 otherwise (orthogonality of characters).
pub fn principal_character_average(p: u64, theta: &UnitCharacter) -> CValue {
    if theta.is_principal_trivial(p) {
        CValue::one()
    } else {
        <CValue as MeasureValue>::zero()
    }
}

/// The pairing <pi F, phi> split into its continuation skeleton: a finite
/// exponential polynomial sum_j c_j p^(js) (one coefficient per radial
/// shell meeting the support of phi - phi(0)) plus the mass term
/// phi(0) <F, 1> times the closed-form radial tail. Evaluating at any
/// exponent s reuses the same exact coefficients, which is what makes the
/// continuation and the residue extraction trivial to audit.
#[derive(Clone, Debug)]
pub struct PairingComponents {
    p: u64,
    n: u32,
    theta: UnitCharacter,
    prefactor: BigRational,
    shell_coefficients: Vec<(i64, CValue)>,
    zero_mass: CValue,
    support_exponent: i64,
}

impl PairingComponents {
    pub fn shell_coefficients(&self) -> &[(i64, CValue)] {
        &self.shell_coefficients
    }

    /// phi(0) * <F, 1> under the normalized angular pairing.
    pub fn zero_mass(&self) -> &CValue {
        &self.zero_mass
    }

    pub fn support_exponent(&self) -> i64 {
        self.support_exponent
    }

    /// The overall constant p^(1-n) (q-1) relating the normalized angular
    /// pairing to the Haar integral over K.
    pub fn prefactor(&self) -> &BigRational {
        &self.prefactor
    }

    /// Evaluate the pairing at an exponent s. Exact rational when theta is
    /// trivial and s is an integer off the pole. At the exceptional point
    /// (trivial theta, p^(-(s+n)) = 1, nonzero mass term) this returns the
    /// ExceptionalPole error carrying the full residue of the pairing.
    pub fn eval(&self, s: &SExponent) -> Result<CValue> {
        let mut acc = <CValue as MeasureValue>::zero();
        for (j, c) in &self.shell_coefficients {
            if c.is_structural_zero() {
                continue;
            }
            acc = acc.add(&p_power_s(self.p, *j, s).mul(c));
        }
        if !self.zero_mass.is_structural_zero() {
            match radial_character_sum(self.p, self.n, &self.theta, s, self.support_exponent) {
                Ok(tail) => acc = acc.add(&self.zero_mass.mul(&tail)),
                Err(Error::ExceptionalPole { s: sp, residue }) => {
                    let full = residue
                        * self.zero_mass.to_complex()
                        * rational_to_f64(&self.prefactor);
                    return Err(Error::ExceptionalPole {
                        s: sp,
                        residue: full,
                    });
                }
                Err(e) => return Err(e),
            }
        }
        Ok(acc.scale_rational(&self.prefactor))
    }
}

/// Build the continuation skeleton of <pi F, phi> for the distribution's
/// own character data. The shell coefficients integrate
/// F(omega, xi) theta(u_r) (phi(omega xi r) - phi(0)) over each radial
/// shell p^(-j) times the principal units, using the exact level-m coset
/// grid with m = max(level(F), constancy(phi) + j, level(theta) + 1, 1).
pub fn pairing_components(
    atlas: &SphericalAtlas,
    h: &HomogeneousDistribution,
    phi: &CylinderFunction<CValue>,
) -> Result<PairingComponents> {
    let ctx = atlas.ctx();
    if h.pi.p() != ctx.p() || h.pi.extension_degree() != ctx.degree() {
        return Err(Error::PrimeMismatch(ctx.p(), h.pi.p()));
    }
    let p = ctx.p();
    let n = ctx.degree();
    let q_minus_one = BigRational::from_integer(BigInt::from(ctx.q() - 1));
    let theta = h.pi.theta().clone();
    let m_table = h.table.level();
    let kmax = phi.constancy_exponent();
    let nu = phi.support_shell_bound();
    let phi_zero = phi.evaluate(&ctx.zero())?;
    let mass = angular_mass(&h.table);
    let zero_mass = phi_zero.mul(&mass);
    let prefactor = power_rational(p, 1 - i64::from(n)) * q_minus_one.clone();

    let mut shell_coefficients = Vec::new();
    let mut j = 1 - kmax;
    while j <= nu {
        let m_needed = [i64::from(m_table), kmax + j, i64::from(theta.level()) + 1, 1]
            .into_iter()
            .max()
            .unwrap();
        let m = u32::try_from(m_needed).expect("grid level out of range");
        let table = atlas.level(m)?;

        let theta_by_class: Vec<CValue> = table
            .radial_classes()
            .iter()
            .map(|(_, r)| theta.eval_principal(r))
            .collect::<Result<_>>()?;
        let f_by_coset: Vec<Vec<CValue>> = table
            .omegas()
            .iter()
            .map(|(okey, _)| {
                table
                    .xi_cosets()
                    .iter()
                    .map(|(xkey, _)| {
                        h.table
                            .value(okey, &reduce_key(xkey, p, m_table))
                            .cloned()
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;

        let contributions = maybe_par_map(table.grid(), |gp| -> Result<CValue> {
            let x = gp.point.shift(-j);
            let dv = phi.evaluate(&x)?.sub(&phi_zero);
            if dv.is_structural_zero() {
                return Ok(<CValue as MeasureValue>::zero());
            }
            Ok(theta_by_class[gp.r_idx]
                .mul(&f_by_coset[gp.omega_idx][gp.xi_idx])
                .mul(&dv))
        });
        let mut sum = <CValue as MeasureValue>::zero();
        for c in contributions {
            sum = sum.add(&c?);
        }
        let scale = power_rational(p, j * (i64::from(n) - 1))
            * power_rational(p, j - i64::from(m))
            * table.xi_coset_volume()
            / q_minus_one.clone();
        shell_coefficients.push((j, sum.scale_rational(&scale)));
        j += 1;
    }

    Ok(PairingComponents {
        p,
        n,
        theta,
        prefactor,
        shell_coefficients,
        zero_mass,
        support_exponent: nu,
    })
}

/// <pi F, phi>: the distribution applied to a test function, by analytic
/// continuation in the radial exponent. Exact rational for trivial theta
/// and integer s off the exceptional point.
pub fn pair(
    atlas: &SphericalAtlas,
    h: &HomogeneousDistribution,
    phi: &CylinderFunction<CValue>,
) -> Result<CValue> {
    pairing_components(atlas, h, phi)?.eval(h.pi.s())
}

/// The residue of s |-> <pi F, phi> at the exceptional point, where the
/// radial tail has its simple pole: phi(0) times the omega-summed angular
/// mass (q-1) <F, 1>, divided by p^n ln p. Errors unless pi actually sits
/// on the exceptional locus.
pub fn residue_at_exceptional(
    ctx: &FieldContext,
    pi: &Quasicharacter,
    table: &FiniteLevelAngular<CValue>,
    phi: &CylinderFunction<CValue>,
) -> Result<CValue> {
    if !pi.is_exceptional() {
        return Err(Error::DiagnosticPrecondition(
            "residue requested away from the exceptional locus".into(),
        ));
    }
    let p = ctx.p();
    let n = ctx.degree();
    let phi_zero = phi.evaluate(&ctx.zero())?;
    let mass = angular_mass(table);
    // p^(1-n)(q-1) * p^(-1) = (q-1) / p^n, all exact; ln p forces a float.
    let rational_part = BigRational::from_integer(BigInt::from(ctx.q() - 1))
        * power_rational(p, -i64::from(n));
    let scaled = phi_zero.mul(&mass).scale_rational(&rational_part);
    let lnp = (p as f64).ln();
    Ok(CValue::Cx(scaled.to_complex() / lnp))
}

/// Pointwise homogeneity audit for a function g sampled on explicit points:
/// checks both g(lambda x) = pi(lambda) g(x) for the supplied radial
/// scalars and the factored form g(x) = pi(r(x)) g(omega(x) xi(x)). On the
/// first violation, reports a witness.
pub fn homogeneity_check_function<G>(
    ctx: &FieldContext,
    g: G,
    pi: &Quasicharacter,
    samples: &[ExtElement],
    lambdas: &[PadicScalar],
    tol: f64,
) -> Result<()>
where
    G: Fn(&ExtElement) -> Result<CValue>,
{
    for x in samples {
        let gx = g(x)?;
        for lambda in lambdas {
            let lhs = g(&x.scale(lambda))?;
            let rhs = pi.eval(lambda)?.mul(&gx);
            if !lhs.approx_eq(&rhs, tol) {
                return Err(Error::DiagnosticPrecondition(format!(
                    "homogeneity violated: g(lambda x) = {lhs} but pi(lambda) g(x) = {rhs} \
                     for lambda with valuation {:?}",
                    lambda.valuation()
                )));
            }
        }
        let sc = decompose(ctx, x)?;
        let angular_point = x.scale(&sc.r.inv()?);
        let factored = pi.eval(&sc.r)?.mul(&g(&angular_point)?);
        if !gx.approx_eq(&factored, tol) {
            return Err(Error::DiagnosticPrecondition(format!(
                "radial factorization violated: g(x) = {gx} but pi(r) g(omega xi) = {factored}"
            )));
        }
    }
    Ok(())
}

/// The radial covering decomposition of a test function: phi(omega xi r) =
/// phi(0))Delta_l(r) + sum_m phi(omega xi r_m) Delta_l(r - r_m), where
/// Delta_l is the indicator of {|z|_p <= p^l} and the centers r_m run over
/// the positive radial classes of every shell above p^l meeting the support
/// bound. Each center satisfies |r_m|_p > p^l, so the covering balls are
/// pairwise disjoint and disjoint from the Delta_l(r) ball around 0.
#[derive(Clone, Debug)]
pub struct RadialDecomposition<V> {
    pub value_at_zero: V,
    pub ball_exponent: i64,
    pub centers: Vec<PadicScalar>,
}

/// Build the covering decomposition. The ball exponent l is the constancy
/// scale of phi: l = -constancy when phi(0) = 0, and one step finer
/// (l = -constancy - 1) when phi(0) != 0 so the recentered function
/// phi - phi(0) Delta_l has its support strictly outside the central ball.
pub fn radial_covering_decompose<V: MeasureValue>(
    ctx: &FieldContext,
    phi: &CylinderFunction<V>,
) -> Result<RadialDecomposition<V>> {
    let value_at_zero = phi.evaluate(&ctx.zero())?;
    if phi.terms().is_empty() {
        return Ok(RadialDecomposition {
            value_at_zero,
            ball_exponent: 0,
            centers: Vec::new(),
        });
    }
    let kmax = phi.constancy_exponent();
    let zero_is_zero = value_at_zero == V::zero();
    let l = if zero_is_zero { -kmax } else { -kmax - 1 };
    let nu = phi.support_shell_bound();

    let p = ctx.p();
    let precision = ctx.precision();
    let mut centers = Vec::new();
    let mut j = l + 1;
    while j <= nu {
        // Shell j of the positive radial line: p^(-j) (1 + p Z_p), covered
        // by the p^(j-l-1) balls of radius p^l centered at p^(-j)(1 + p c).
        let digits = j - l - 1;
        let needed = u32::try_from(digits + 1).expect("covering depth out of range");
        if precision < needed {
            return Err(Error::InsufficientPrecision {
                needed,
                have: precision,
            });
        }
        let pd = pow_u64(p, digits as u32);
        for c in 0..pd {
            let unit =
                PadicScalar::from_integer(p, precision, &BigInt::from(1 + p * c));
            let center = unit.shift(-j);
            debug_assert_eq!(center.valuation(), Valuation::Finite(-j));
            debug_assert!(-j < -l, "covering center must sit strictly outside p^(-l)");
            centers.push(center);
        }
        j += 1;
    }
    Ok(RadialDecomposition {
        value_at_zero,
        ball_exponent: l,
        centers,
    })
}

/// Evaluate the right-hand side of the covering identity at a point x of K:
/// phi(0) Delta_l(r(x)) plus the single term phi(x r_m / r(x)) whose
/// covering ball contains the radial coordinate of x.
pub fn radial_covering_reconstruct_at<V: MeasureValue>(
    ctx: &FieldContext,
    phi: &CylinderFunction<V>,
    dec: &RadialDecomposition<V>,
    x: &ExtElement,
) -> Result<V> {
    if x.is_zero() {
        return Ok(dec.value_at_zero.clone());
    }
    let sc = decompose(ctx, x)?;
    let r_val = sc.r.valuation().finite()?;
    let mut acc = if r_val >= -dec.ball_exponent {
        dec.value_at_zero.clone()
    } else {
        V::zero()
    };
    for rm in &dec.centers {
        let diff = sc.r.sub(rm)?;
        let inside = match diff.valuation() {
            Valuation::Infinite => true,
            Valuation::Finite(v) => v >= -dec.ball_exponent,
        };
        if inside {
            let y = x.scale(&rm.div(&sc.r)?);
            acc = acc.add(&phi.evaluate(&y)?);
        }
    }
    Ok(acc)
}

/// The disjointness identity behind the covering: the central ball
/// {|r| <= p^l} never meets a covering ball {|r - r_m| <= p^l}, because
/// every center satisfies |r_m| > p^l. Returns the number of centers
/// checked.
pub fn radial_covering_disjointness_check<V: MeasureValue>(dec: &RadialDecomposition<V>) -> Result<usize> {
    for rm in &dec.centers {
        let v = rm.valuation().finite()?;
        if v >= -dec.ball_exponent {
            return Err(Error::DiagnosticPrecondition(format!(
                "covering center with valuation {v} is not outside the central ball p^{}",
                -dec.ball_exponent
            )));
        }
    }
    Ok(dec.centers.len())
}

/// The gauge test function concentrated on one level-m angular coset
/// (omega_0, xi_0): the sum over radial classes u_c of
/// (p^n / (p^n - 1)) conj(theta(u_c)) on the single ball of the unit class
/// omega_0 xi_0 u_c mod p^m. Pairing pi F against it isolates
/// F(omega_0, xi_0) / ((q - 1) #xi-cosets) exactly.
pub fn gauge_tensor(
    atlas: &SphericalAtlas,
    pi: &Quasicharacter,
    m: u32,
    omega_idx: usize,
    xi_idx: usize,
) -> Result<CylinderFunction<CValue>> {
    let ctx = atlas.ctx();
    if m < pi.theta().level() + 1 {
        return Err(Error::DiagnosticPrecondition(
            "gauge level must exceed the unit character level".into(),
        ));
    }
    let table = atlas.level(m)?;
    let q = BigInt::from(ctx.q());
    let gauge_constant = BigRational::new(q.clone(), q - BigInt::one());
    let mut terms = Vec::new();
    for gp in table.grid() {
        if gp.omega_idx != omega_idx || gp.xi_idx != xi_idx {
            continue;
        }
        let u_c = &table.radial_classes()[gp.r_idx].1;
        let coefficient = pi
            .theta()
            .eval_principal(u_c)?
            .conj()
            .scale_rational(&gauge_constant);
        terms.push((Ball::new(gp.point.clone(), i64::from(m))?, coefficient));
    }
    CylinderFunction::from_disjoint(terms)
}

/// The radial pairing of pi with its own gauge window: summing
/// pi(u_c) (p^n/(p^n-1)) conj(theta(u_c)) over the level-m radial classes
/// with weight p^(-m) each. Exactly p^(n-1) / (p^n - 1) for trivial theta;
/// equal to it within rounding for any theta (|theta|^2 = 1).
pub fn gauge_radial_pairing(atlas: &SphericalAtlas, pi: &Quasicharacter, m: u32) -> Result<CValue> {
    let ctx = atlas.ctx();
    if m < pi.theta().level() + 1 {
        return Err(Error::DiagnosticPrecondition(
            "gauge level must exceed the unit character level".into(),
        ));
    }
    let table = atlas.level(m)?;
    let q = BigInt::from(ctx.q());
    let gauge_constant = BigRational::new(q.clone(), q - BigInt::one());
    let weight = power_rational(ctx.p(), -i64::from(m));
    let mut acc = <CValue as MeasureValue>::zero();
    for (_, u_c) in table.radial_classes() {
        let term = pi
            .eval(u_c)?
            .mul(&pi.theta().eval_principal(u_c)?.conj())
            .scale_rational(&gauge_constant)
            .scale_rational(&weight);
        acc = acc.add(&term);
    }
    Ok(acc)
}

/// Recover the angular density of a rotation-invariant functional that is
/// homogeneous of degree pi (non-exceptional), given only its values on
/// test functions. The functional is first audited for homogeneity on the
/// radial generators (an error with a witness if it fails), then the
/// level-m table is extracted coset by coset with gauge tensors, and
/// finally the reconstruction is verified against the functional on the
/// supplied battery of test functions.
pub fn reconstruct_angular_density<G>(
    atlas: &SphericalAtlas,
    functional: G,
    pi: &Quasicharacter,
    m: u32,
    battery: &[CylinderFunction<CValue>],
    tol: f64,
) -> Result<FiniteLevelAngular<CValue>>
where
    G: Fn(&CylinderFunction<CValue>) -> Result<CValue> + Sync,
{
    let ctx = atlas.ctx();
    if pi.is_exceptional() {
        return Err(Error::DiagnosticPrecondition(
            "reconstruction requires a non-exceptional quasicharacter".into(),
        ));
    }
    if m < pi.theta().level() + 1 {
        return Err(Error::DiagnosticPrecondition(
            "reconstruction level must exceed the unit character level".into(),
        ));
    }

    // Homogeneity audit on the multiplicative generators of the positive
    // radial line: lambda = p and lambda = 1 + p, probed against the unit
    // indicator.
    let p = ctx.p();
    let n = ctx.degree();
    let probe = crate::haar::unit_indicator(ctx)?.map_values(|v| CValue::Rat(v.clone()));
    let base_value = functional(&probe)?;
    let generators = [
        PadicScalar::from_integer(p, ctx.precision(), &BigInt::from(p)),
        PadicScalar::from_integer(p, ctx.precision(), &BigInt::from(p + 1)),
    ];
    for lambda in &generators {
        let shifted = probe.precompose_scalar(&lambda.inv()?)?;
        let lhs = functional(&shifted)?;
        let modulus = power_rational(p, -lambda.valuation().finite()? * i64::from(n));
        let rhs = pi.eval(lambda)?.mul(&base_value).scale_rational(&modulus);
        if !lhs.approx_eq(&rhs, tol) {
            return Err(Error::DiagnosticPrecondition(format!(
                "functional is not homogeneous of the declared degree: probe moved by lambda \
                 (valuation {:?}) gave {lhs}, expected {rhs}",
                lambda.valuation()
            )));
        }
    }

    let table = atlas.level(m)?;
    let xi_count = table.xi_cosets().len();
    let recovery_scale =
        BigRational::from_integer(BigInt::from(ctx.q() - 1) * BigInt::from(xi_count as u64));

    let coset_indices: Vec<(usize, usize)> = (0..table.omegas().len())
        .flat_map(|oi| (0..xi_count).map(move |xi| (oi, xi)))
        .collect();
    let recovered = maybe_par_map(&coset_indices, |&(oi, xi)| -> Result<CValue> {
        let tensor = gauge_tensor(atlas, pi, m, oi, xi)?;
        Ok(functional(&tensor)?.scale_rational(&recovery_scale))
    });
    let mut iter = recovered.into_iter();
    let rec_table = FiniteLevelAngular::tabulate_indexed(atlas, m, |_, _, _, _| {
        iter.next().expect("one recovered value per coset")
    })?;

    // Verify the reconstruction reproduces the functional on the battery.
    let reconstructed = HomogeneousDistribution::new(pi.clone(), rec_table.clone());
    let checks = maybe_par_map(battery, |phi| -> Result<()> {
        let expected = functional(phi)?;
        let got = pair(atlas, &reconstructed, phi)?;
        if !got.approx_eq(&expected, tol) {
            return Err(Error::DiagnosticPrecondition(format!(
                "reconstructed density disagrees with the functional on a battery element: \
                 {got} vs {expected}"
            )));
        }
        Ok(())
    });
    for c in checks {
        c?;
    }
    Ok(rec_table)
}
