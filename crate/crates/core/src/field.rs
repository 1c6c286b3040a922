//! The unramified extension K of Q_p of degree n (p odd, p not dividing n).
//!
//! K is presented as Q_p[t]/(m(t)) where m is the lexicographically
//! smallest monic degree-n polynomial with coefficients in {0, ..., p-1}
//! that is irreducible mod p; its integer coefficients are lifted verbatim.
//! Elements are stored as coefficient vectors on the power basis
//! 1, t, ..., t^(n-1); the canonical *reported* basis ordering puts 1 last
//! (theta_j = t^j for j < n, theta_n = 1), which is the ordering used by
//! the serialized form and by the special basis downstream.
//!
//! The Frobenius generator of Gal(K/Q_p) is realized concretely: the image
//! of t is the Hensel lift of the root of m congruent to t^p mod p, and is
//! precomputed once per context together with its power table, so applying
//! Frobenius is an O(n^2) coefficient operation. Norms are computed as the
//! product of the Galois conjugates, with an independent oracle given by
//! the exact integer determinant of the multiplication matrix.

use std::fmt;

use num_bigint::{BigInt, BigUint};
use num_rational::BigRational;
use num_traits::{One, Zero};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::padic::{
    factorial_valuation, ilog_floor, is_odd_prime, mod_inverse, pk, PadicScalar, Valuation,
};

/// Polynomial arithmetic over F_p on small dense coefficient vectors,
/// used only to pick the field modulus.
mod fp_poly {
    /// Trim trailing zeros.
    fn norm(mut a: Vec<u64>) -> Vec<u64> {
        while a.last() == Some(&0) {
            a.pop();
        }
        a
    }

    pub fn mul_mod(a: &[u64], b: &[u64], m: &[u64], p: u64) -> Vec<u64> {
        if a.is_empty() || b.is_empty() {
            return vec![];
        }
        let mut out = vec![0u64; a.len() + b.len() - 1];
        for (i, &x) in a.iter().enumerate() {
            for (j, &y) in b.iter().enumerate() {
                out[i + j] = (out[i + j] + x * y) % p;
            }
        }
        rem(out, m, p)
    }

    pub fn rem(mut a: Vec<u64>, m: &[u64], p: u64) -> Vec<u64> {
        let dm = m.len() - 1;
        let lead_inv = inv_mod(m[dm], p);
        while a.len() > dm {
            let k = a.len() - 1;
            let c = (a[k] * lead_inv) % p;
            for i in 0..=dm {
                let idx = k - dm + i;
                a[idx] = (a[idx] + p * p - (c * m[i]) % p) % p;
            }
            a = norm(a);
        }
        norm(a)
    }

    pub fn pow_x_mod(e: &num_bigint::BigUint, m: &[u64], p: u64) -> Vec<u64> {
        // x^e mod m by square-and-multiply over the bits of e.
        let mut base = rem(vec![0, 1], m, p);
        let mut acc = vec![1u64];
        for i in 0..e.bits() {
            if e.bit(i) {
                acc = mul_mod(&acc, &base, m, p);
            }
            base = mul_mod(&base.clone(), &base, m, p);
        }
        acc
    }

    pub fn gcd(mut a: Vec<u64>, mut b: Vec<u64>, p: u64) -> Vec<u64> {
        while !b.is_empty() {
            let r = rem(a, &b, p);
            a = b;
            b = r;
        }
        a
    }

    pub fn sub(a: &[u64], b: &[u64], p: u64) -> Vec<u64> {
        let len = a.len().max(b.len());
        let mut out = vec![0u64; len];
        for i in 0..len {
            let x = a.get(i).copied().unwrap_or(0);
            let y = b.get(i).copied().unwrap_or(0);
            out[i] = (x + p - y) % p;
        }
        norm(out)
    }

    fn inv_mod(a: u64, p: u64) -> u64 {
        // Fermat inverse; p is prime and a != 0 mod p.
        let mut acc = 1u64;
        let mut base = a % p;
        let mut e = p - 2;
        while e > 0 {
            if e & 1 == 1 {
                acc = acc * base % p;
            }
            base = base * base % p;
            e >>= 1;
        }
        acc
    }

    /// Deterministic irreducibility test for a monic polynomial of degree
    /// n over F_p: x^(p^n) = x mod m, and gcd(x^(p^(n/r)) - x, m) = 1 for
    /// every prime r dividing n.
    pub fn is_irreducible(m: &[u64], p: u64) -> bool {
        let n = m.len() - 1;
        if n == 0 {
            return false;
        }
        let x = vec![0u64, 1];
        let q_n = num_bigint::BigUint::from(p).pow(n as u32);
        let frob_n = pow_x_mod(&q_n, m, p);
        if sub(&frob_n, &rem(x.clone(), m, p), p) != Vec::<u64>::new() {
            return false;
        }
        let mut n_left = n;
        let mut r = 2;
        while r * r <= n_left {
            if n_left % r == 0 {
                let q_sub = num_bigint::BigUint::from(p).pow((n / r) as u32);
                let f = pow_x_mod(&q_sub, m, p);
                let g = gcd(m.to_vec(), sub(&f, &x, p), p);
                if g.len() != 1 {
                    return false;
                }
                while n_left % r == 0 {
                    n_left /= r;
                }
            }
            r += 1;
        }
        if n_left > 1 {
            let q_sub = num_bigint::BigUint::from(p).pow((n / n_left) as u32);
            let f = pow_x_mod(&q_sub, m, p);
            let g = gcd(m.to_vec(), sub(&f, &x, p), p);
            if g.len() != 1 {
                return false;
            }
        }
        true
    }
}

/// Everything needed to compute in K: the prime, the degree, the working
/// precision, the chosen modulus, and the precomputed Frobenius data.
#[derive(Clone)]
pub struct FieldContext {
    p: u64,
    n: u32,
    precision: u32,
    /// Low coefficients c_0..c_(n-1) of m(t) = t^n + sum c_i t^i, in {0..p-1}.
    modulus: Vec<u64>,
    /// Powers f^0, ..., f^(n-1) of the Frobenius image of t.
    frobenius_powers: Vec<ExtElement>,
}

impl FieldContext {
    /// Construct the degree-n unramified extension at the given precision.
    pub fn new(p: u64, n: u32, precision: u32) -> Result<Self> {
        Self::check_parameters(p, n, precision)?;
        Self::finish(p, n, precision, Self::select_modulus(p, n))
    }

    /// Construct the extension on a caller-chosen monic modulus
    /// t^n + c_(n-1) t^(n-1) + ... + c_0, given by its low coefficients
    /// (reduced mod p), which must be irreducible over the residue field.
    /// The extension is the same field either way — unramified extensions
    /// are unique — but coordinates follow the chosen basis.
    pub fn with_modulus(p: u64, n: u32, precision: u32, low_coeffs: &[u64]) -> Result<Self> {
        Self::check_parameters(p, n, precision)?;
        if low_coeffs.len() != n as usize {
            return Err(Error::BadModulus(format!(
                "a degree-{n} modulus needs {n} low coefficients, got {}",
                low_coeffs.len()
            )));
        }
        let modulus: Vec<u64> = low_coeffs.iter().map(|&c| c % p).collect();
        let mut full = modulus.clone();
        full.push(1);
        if !fp_poly::is_irreducible(&full, p) {
            return Err(Error::BadModulus(
                "the polynomial is reducible over the residue field".into(),
            ));
        }
        Self::finish(p, n, precision, modulus)
    }

    fn check_parameters(p: u64, n: u32, precision: u32) -> Result<()> {
        if !is_odd_prime(p) {
            return Err(Error::InvalidPrime(p));
        }
        if n == 0 || u64::from(n) % p == 0 {
            return Err(Error::BadDegree { p, n });
        }
        if precision == 0 {
            return Err(Error::PrecisionExhausted);
        }
        Ok(())
    }

    fn finish(p: u64, n: u32, precision: u32, modulus: Vec<u64>) -> Result<Self> {
        let mut ctx = FieldContext {
            p,
            n,
            precision,
            modulus,
            frobenius_powers: Vec::new(),
        };
        let image = ctx.lift_frobenius_image()?;
        let mut powers = Vec::with_capacity(n as usize);
        powers.push(ctx.one());
        if n > 1 {
            powers.push(image.clone());
            for _ in 2..n {
                let prev = powers.last().unwrap().clone();
                powers.push(prev.mul(&ctx, &image)?);
            }
        }
        ctx.frobenius_powers = powers;
        Ok(ctx)
    }

    /// The lexicographically smallest monic irreducible: candidates are
    /// ordered by the integer sum c_i p^i of their low coefficients.
    fn select_modulus(p: u64, n: u32) -> Vec<u64> {
        let count = p.checked_pow(n).expect("p^n fits in u64");
        for code in 0..count {
            let mut c = code;
            let mut coeffs = Vec::with_capacity(n as usize + 1);
            for _ in 0..n {
                coeffs.push(c % p);
                c /= p;
            }
            coeffs.push(1);
            if fp_poly::is_irreducible(&coeffs, p) {
                coeffs.pop();
                return coeffs;
            }
        }
        unreachable!("an irreducible polynomial of every degree exists over F_p")
    }

    /// Hensel-lift the root of m(t) congruent to t^p mod p, by Newton
    /// iteration in O_K. The derivative m'(root) is a unit because m is
    /// separable mod p.
    fn lift_frobenius_image(&self) -> Result<ExtElement> {
        let mut full = self.modulus.clone();
        full.push(1);
        let seed = fp_poly::pow_x_mod(&BigUint::from(self.p), &full, self.p);
        let mut f = self.from_residue_vec(&seed);
        let eval = |y: &ExtElement| -> Result<(ExtElement, ExtElement)> {
            // m(y) and m'(y) by Horner over the integer coefficients,
            // starting from the leading 1.
            let mut value = self.one();
            let mut deriv = self.zero();
            for i in (0..self.modulus.len()).rev() {
                deriv = deriv.mul(self, y)?.add(&value)?;
                value = value
                    .mul(self, y)?
                    .add(&self.from_scalar(self.scalar_from_u64(self.modulus[i])))?;
            }
            Ok((value, deriv))
        };
        for _ in 0..(2 * (32 - self.precision.leading_zeros()) + 4) {
            let (value, deriv) = eval(&f)?;
            if value.is_zero() {
                break;
            }
            let step = value.mul(self, &deriv.inv(self)?)?;
            f = f.sub(&step)?;
        }
        let (value, _) = eval(&f)?;
        debug_assert!(value.is_zero(), "Frobenius image failed to converge");
        Ok(f)
    }

    pub fn p(&self) -> u64 {
        self.p
    }

    pub fn degree(&self) -> u32 {
        self.n
    }

    pub fn precision(&self) -> u32 {
        self.precision
    }

    /// q = p^n, the residue field size.
    pub fn q(&self) -> u64 {
        self.p.pow(self.n)
    }

    /// Full modulus coefficients c_0..c_(n-1), 1 (monic, degree n).
    pub fn modulus_coefficients(&self) -> Vec<u64> {
        let mut full = self.modulus.clone();
        full.push(1);
        full
    }

    /// The Frobenius image of the generator t.
    pub fn frobenius_image(&self) -> &ExtElement {
        &self.frobenius_powers[1.min(self.frobenius_powers.len() - 1)]
    }

    pub fn scalar_from_i64(&self, k: i64) -> PadicScalar {
        PadicScalar::from_i64(self.p, self.precision, k)
    }

    fn scalar_from_u64(&self, k: u64) -> PadicScalar {
        PadicScalar::from_integer(self.p, self.precision, &BigInt::from(k))
    }

    pub fn zero(&self) -> ExtElement {
        ExtElement {
            coeffs: vec![PadicScalar::zero(self.p); self.n as usize],
        }
    }

    pub fn one(&self) -> ExtElement {
        self.from_scalar(self.scalar_from_i64(1))
    }

    /// The generator t (equals the scalar root -c_0 when n = 1).
    pub fn generator(&self) -> ExtElement {
        if self.n == 1 {
            let c0 = self.modulus[0] as i64;
            return self.from_scalar(self.scalar_from_i64(-c0));
        }
        let mut x = self.zero();
        x.coeffs[1] = self.scalar_from_i64(1);
        x
    }

    pub fn from_scalar(&self, s: PadicScalar) -> ExtElement {
        let mut x = self.zero();
        x.coeffs[0] = s;
        x
    }

    /// Element with the given integer coefficients on the power basis
    /// 1, t, ..., t^(n-1).
    pub fn from_power_coeffs_i64(&self, coeffs: &[i64]) -> ExtElement {
        assert_eq!(coeffs.len(), self.n as usize);
        ExtElement {
            coeffs: coeffs.iter().map(|&k| self.scalar_from_i64(k)).collect(),
        }
    }

    fn from_residue_vec(&self, residues: &[u64]) -> ExtElement {
        let mut x = self.zero();
        for (i, &r) in residues.iter().enumerate() {
            x.coeffs[i] = self.scalar_from_u64(r);
        }
        x
    }

    /// Uniform unit of O: every power-basis digit drawn uniformly, with
    /// all-divisible-by-p vectors rejected. The leading residue vector is
    /// therefore uniform over the q-1 nonzero classes and the remaining
    /// digits uniform over all q classes.
    pub fn random_unit<R: Rng + ?Sized>(&self, rng: &mut R) -> ExtElement {
        loop {
            let x = self.random_integral(rng);
            if x.is_unit() {
                return x;
            }
        }
    }

    /// Uniform element of O mod p^precision.
    pub fn random_integral<R: Rng + ?Sized>(&self, rng: &mut R) -> ExtElement {
        let coeffs = (0..self.n)
            .map(|_| {
                let mut m = BigUint::zero();
                for _ in 0..self.precision {
                    m = m * self.p + rng.gen_range(0..self.p);
                }
                PadicScalar::from_integer(self.p, self.precision, &BigInt::from(m))
            })
            .collect();
        ExtElement { coeffs }
    }

    /// Uniform principal unit 1 + p O.
    pub fn random_principal_unit<R: Rng + ?Sized>(&self, rng: &mut R) -> ExtElement {
        let x = self.random_integral(rng);
        self.one()
            .add(&x.scale(&self.scalar_from_i64(self.p as i64)))
            .expect("1 + p*integral")
    }
}

impl fmt::Debug for FieldContext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "FieldContext(p={}, n={}, N={}, m={:?})",
            self.p, self.n, self.precision, self.modulus
        )
    }
}

/// Serialized context descriptor embedded in every CLI output.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ContextDescriptor {
    pub p: u64,
    pub n: u32,
    pub precision: u32,
    /// Monic modulus, low to high: c_0, ..., c_(n-1), 1.
    pub modulus: Vec<u64>,
}

impl From<&FieldContext> for ContextDescriptor {
    fn from(ctx: &FieldContext) -> Self {
        ContextDescriptor {
            p: ctx.p,
            n: ctx.n,
            precision: ctx.precision,
            modulus: ctx.modulus_coefficients(),
        }
    }
}

/// An element of K as a coefficient vector over the power basis.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct ExtElement {
    /// coeffs[i] multiplies t^i.
    coeffs: Vec<PadicScalar>,
}

impl ExtElement {
    pub fn power_coeffs(&self) -> &[PadicScalar] {
        &self.coeffs
    }

    /// Coefficients on the canonical reported basis (t, t^2, ..., t^(n-1), 1):
    /// the multiplicative identity is listed last.
    pub fn basis_coeffs(&self) -> Vec<PadicScalar> {
        let n = self.coeffs.len();
        let mut out = Vec::with_capacity(n);
        out.extend(self.coeffs[1..].iter().cloned());
        out.push(self.coeffs[0].clone());
        out
    }

    pub fn from_basis_coeffs(coeffs: Vec<PadicScalar>) -> Result<Self> {
        if coeffs.is_empty() {
            return Err(Error::BadRecord("empty coefficient vector".into()));
        }
        let n = coeffs.len();
        let mut power = Vec::with_capacity(n);
        power.push(coeffs[n - 1].clone());
        power.extend(coeffs[..n - 1].iter().cloned());
        Ok(ExtElement { coeffs: power })
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.iter().all(|c| c.is_zero())
    }

    /// Extension valuation v_K(x): the minimum coefficient valuation (the
    /// extension is unramified, so values stay integers). Infinite for 0.
    pub fn valuation(&self) -> Valuation {
        self.coeffs
            .iter()
            .map(|c| c.valuation())
            .min()
            .unwrap_or(Valuation::Infinite)
    }

    pub fn is_integral(&self) -> bool {
        self.valuation() >= Valuation::Finite(0)
    }

    pub fn is_unit(&self) -> bool {
        self.valuation() == Valuation::Finite(0)
    }

    /// A unit congruent to 1 mod p.
    pub fn is_principal_unit(&self, ctx: &FieldContext) -> bool {
        if !self.is_unit() {
            return false;
        }
        let diff = match self.sub(&ctx.one()) {
            Ok(d) => d,
            Err(_) => return false,
        };
        diff.valuation() >= Valuation::Finite(1)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        let coeffs = self
            .coeffs
            .iter()
            .zip(&other.coeffs)
            .map(|(a, b)| a.add(b))
            .collect::<Result<_>>()?;
        Ok(ExtElement { coeffs })
    }

    pub fn neg(&self) -> Self {
        ExtElement {
            coeffs: self.coeffs.iter().map(|c| c.neg()).collect(),
        }
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.add(&other.neg())
    }

    pub fn scale(&self, s: &PadicScalar) -> Self {
        ExtElement {
            coeffs: self
                .coeffs
                .iter()
                .map(|c| c.mul(s).expect("same prime"))
                .collect(),
        }
    }

    /// Multiply by the exact power p^k.
    pub fn shift(&self, k: i64) -> Self {
        ExtElement {
            coeffs: self.coeffs.iter().map(|c| c.shift(k)).collect(),
        }
    }

    pub fn mul(&self, ctx: &FieldContext, other: &Self) -> Result<Self> {
        let n = ctx.n as usize;
        let p = ctx.p;
        let mut raw = vec![PadicScalar::zero(p); 2 * n - 1];
        for (i, a) in self.coeffs.iter().enumerate() {
            if a.is_zero() {
                continue;
            }
            for (j, b) in other.coeffs.iter().enumerate() {
                if b.is_zero() {
                    continue;
                }
                raw[i + j] = raw[i + j].add(&a.mul(b)?)?;
            }
        }
        // Reduce degrees >= n via t^n = -(c_0 + c_1 t + ... + c_(n-1) t^(n-1)).
        for d in (n..raw.len()).rev() {
            let top = std::mem::replace(&mut raw[d], PadicScalar::zero(p));
            if top.is_zero() {
                continue;
            }
            for (i, &c) in ctx.modulus.iter().enumerate() {
                if c == 0 {
                    continue;
                }
                let term = top.mul(&ctx.scalar_from_u64(c))?;
                raw[d - n + i] = raw[d - n + i].sub(&term)?;
            }
        }
        raw.truncate(n);
        Ok(ExtElement { coeffs: raw })
    }

    /// Multiplicative inverse by solving L_x y = 1 after pulling out the
    /// p-power; the remaining matrix is invertible mod p so the elimination
    /// runs entirely over unit pivots and loses no precision.
    pub fn inv(&self, ctx: &FieldContext) -> Result<Self> {
        let v = self.valuation().finite().map_err(|_| Error::DivisionByZero)?;
        let unit = self.shift(-v);
        let work = unit
            .coeffs
            .iter()
            .filter_map(|c| c.absolute_precision())
            .min()
            .unwrap_or_else(|| i64::from(ctx.precision))
            .min(i64::from(ctx.precision));
        if work < 1 {
            return Err(Error::PrecisionExhausted);
        }
        let w = work as u32;
        let matrix = multiplication_matrix_lifts(ctx, &unit, w)?;
        let mut rhs = vec![BigUint::zero(); ctx.n as usize];
        rhs[0] = BigUint::one();
        let sol = solve_unit_system(ctx.p, w, matrix, rhs)?;
        let coeffs = sol
            .into_iter()
            .map(|m| scalar_from_residue(ctx.p, w, m))
            .collect::<Result<Vec<_>>>()?;
        Ok(ExtElement { coeffs }.shift(-v))
    }

    pub fn div(&self, ctx: &FieldContext, other: &Self) -> Result<Self> {
        self.mul(ctx, &other.inv(ctx)?)
    }

    pub fn pow_i64(&self, ctx: &FieldContext, k: i64) -> Result<Self> {
        if k == 0 {
            return Ok(ctx.one());
        }
        let base = if k < 0 { self.inv(ctx)? } else { self.clone() };
        let mut acc: Option<ExtElement> = None;
        let mut sq = base;
        let mut e = k.unsigned_abs();
        while e > 0 {
            if e & 1 == 1 {
                acc = Some(match acc {
                    None => sq.clone(),
                    Some(a) => a.mul(ctx, &sq)?,
                });
            }
            e >>= 1;
            if e > 0 {
                sq = sq.mul(ctx, &sq)?;
            }
        }
        Ok(acc.unwrap())
    }

    pub fn pow_u64(&self, ctx: &FieldContext, k: u64) -> Result<Self> {
        if k == 0 {
            return Ok(ctx.one());
        }
        let mut acc: Option<ExtElement> = None;
        let mut sq = self.clone();
        let mut e = k;
        while e > 0 {
            if e & 1 == 1 {
                acc = Some(match acc {
                    None => sq.clone(),
                    Some(a) => a.mul(ctx, &sq)?,
                });
            }
            e >>= 1;
            if e > 0 {
                sq = sq.mul(ctx, &sq)?;
            }
        }
        Ok(acc.unwrap())
    }

    /// The Frobenius generator of Gal(K/Q_p): substitute the precomputed
    /// image of t. Fixes Q_p-rational elements by construction.
    pub fn frobenius(&self, ctx: &FieldContext) -> Result<Self> {
        let mut acc = ctx.zero();
        for (i, c) in self.coeffs.iter().enumerate() {
            if c.is_zero() {
                continue;
            }
            acc = acc.add(&ctx.frobenius_powers[i].scale(c))?;
        }
        Ok(acc)
    }

    /// Frobenius iterated k times.
    pub fn frobenius_iter(&self, ctx: &FieldContext, k: u32) -> Result<Self> {
        let mut x = self.clone();
        for _ in 0..(k % ctx.n) {
            x = x.frobenius(ctx)?;
        }
        Ok(x)
    }

    /// Field norm K -> Q_p as the product of the Galois conjugates.
    ///
    /// The conjugates are exact only mod p^N, so the non-constant
    /// coordinates of the product are required to vanish mod p^N (not
    /// bitwise) and the result is clamped to N relative digits before the
    /// valuation shift is restored.
    pub fn norm(&self, ctx: &FieldContext) -> Result<PadicScalar> {
        if self.is_zero() {
            return Ok(PadicScalar::zero(ctx.p));
        }
        let v = self.valuation().finite()?;
        let unit = self.shift(-v);
        let mut acc = unit.clone();
        let mut conj = unit;
        for _ in 1..ctx.n {
            conj = conj.frobenius(ctx)?;
            acc = acc.mul(ctx, &conj)?;
        }
        let scalar = acc.scalar_part_mod(i64::from(ctx.precision))?;
        Ok(scalar.shift(v * i64::from(ctx.n)))
    }

    /// Independent norm path: the exact integer determinant of the
    /// multiplication matrix of the unit part, shifted back.
    pub fn norm_det_oracle(&self, ctx: &FieldContext) -> Result<PadicScalar> {
        if self.is_zero() {
            return Ok(PadicScalar::zero(ctx.p));
        }
        let v = self.valuation().finite()?;
        let unit = self.shift(-v);
        let n = ctx.n as usize;
        // Column j holds the exact integer lifts of unit * t^j.
        let mut cols: Vec<Vec<BigInt>> = Vec::with_capacity(n);
        let mut current: Vec<BigInt> = unit
            .coeffs
            .iter()
            .map(|c| c.lift_integer())
            .collect::<Result<_>>()?;
        let modulus: Vec<BigInt> = ctx.modulus.iter().map(|&c| BigInt::from(c)).collect();
        for _ in 0..n {
            cols.push(current.clone());
            // current *= t, reduced by t^n = -sum c_i t^i.
            let top = current.pop().unwrap();
            current.insert(0, BigInt::zero());
            for i in 0..n {
                current[i] -= &top * &modulus[i];
            }
        }
        let matrix: Vec<Vec<BigInt>> = (0..n)
            .map(|r| (0..n).map(|c| cols[c][r].clone()).collect())
            .collect();
        let det = bareiss_determinant(matrix);
        let scalar = PadicScalar::from_integer(ctx.p, ctx.precision, &det);
        Ok(scalar.shift(v * i64::from(ctx.n)))
    }

    /// The normalized absolute value |N(x)|_p as an exact rational; this
    /// equals (max_j |x_j|_p)^n on the power-basis coefficients.
    pub fn normalized_abs(&self, ctx: &FieldContext) -> Result<BigRational> {
        Ok(self.norm(ctx)?.abs_exact())
    }

    /// Teichmuller representative of a unit: the stable limit of repeated
    /// q-th powers, the unique (q-1)-th root of unity with the same residue.
    pub fn teichmuller(&self, ctx: &FieldContext) -> Result<Self> {
        if !self.is_unit() {
            return Err(Error::NotUnit);
        }
        let mut t = self.clone();
        for _ in 0..ctx.precision {
            let next = t.pow_u64(ctx, ctx.q())?;
            if next == t {
                break;
            }
            t = next;
        }
        Ok(t)
    }

    /// Collapse a Q_p-rational element to its scalar; errors if any
    /// non-constant coordinate survives at the working precision.
    pub fn into_scalar(self) -> Result<PadicScalar> {
        for c in &self.coeffs[1..] {
            if !c.is_zero() {
                return Err(Error::BadRecord(format!(
                    "non-constant coordinate {c} survives; element is not Q_p-rational"
                )));
            }
        }
        Ok(self.coeffs.into_iter().next().unwrap())
    }

    /// Collapse to the constant coordinate, requiring the others to vanish
    /// only mod p^abs (computed composites are meaningful only to the
    /// working precision even when coefficient bookkeeping carries more).
    /// The constant coordinate is clamped to absolute precision abs.
    pub fn scalar_part_mod(&self, abs: i64) -> Result<PadicScalar> {
        for c in &self.coeffs[1..] {
            if c.valuation() < Valuation::Finite(abs) {
                return Err(Error::BadRecord(format!(
                    "non-constant coordinate {c} survives mod p^{abs}"
                )));
            }
        }
        let c = &self.coeffs[0];
        match c.valuation() {
            Valuation::Infinite => Ok(c.clone()),
            Valuation::Finite(v) if v >= abs => Ok(PadicScalar::zero(c.p())),
            Valuation::Finite(v) => {
                let rel = (abs - v).min(i64::from(c.precision())) as u32;
                Ok(c.truncate(rel))
            }
        }
    }

    /// Do all coordinates agree modulo p^abs_exponent?
    pub fn congruent_abs(&self, other: &Self, abs_exponent: i64) -> bool {
        self.coeffs
            .iter()
            .zip(&other.coeffs)
            .all(|(a, b)| a.congruent_abs(b, abs_exponent))
    }

    /// Residues of the coefficients mod p^m, as machine words; the element
    /// must be integral and known at least mod p^m. This is the canonical
    /// key for level-m coset bookkeeping.
    pub fn residue_key(&self, m: u32) -> Result<Vec<u64>> {
        self.coeffs.iter().map(|c| c.residue_u64(m)).collect()
    }

    /// Minimum absolute precision over the coordinates (None if exact 0).
    pub fn absolute_precision(&self) -> Option<i64> {
        self.coeffs.iter().filter_map(|c| c.absolute_precision()).min()
    }

    /// Reduce every coordinate to absolute precision `abs` (coordinates
    /// already coarser are kept).
    pub fn truncate_abs(&self, abs: i64) -> Result<Self> {
        let coeffs = self
            .coeffs
            .iter()
            .map(|c| match c.valuation() {
                Valuation::Infinite => Ok(c.clone()),
                Valuation::Finite(v) => {
                    let rel = abs - v;
                    if rel < 1 {
                        // The whole coordinate sits at or below the cut.
                        Ok(PadicScalar::zero(c.p()))
                    } else {
                        Ok(c.truncate(rel.min(i64::from(u32::MAX)) as u32))
                    }
                }
            })
            .collect::<Result<_>>()?;
        Ok(ExtElement { coeffs })
    }
}

impl fmt::Debug for ExtElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, c) in self.coeffs.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{c:?}")?;
        }
        write!(f, "] (power basis)")
    }
}

impl Serialize for ExtElement {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.basis_coeffs().serialize(s)
    }
}

impl<'de> Deserialize<'de> for ExtElement {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let coeffs = Vec::<PadicScalar>::deserialize(d)?;
        ExtElement::from_basis_coeffs(coeffs).map_err(serde::de::Error::custom)
    }
}

/// Multiplication matrix of an integral element, entries lifted mod p^w.
fn multiplication_matrix_lifts(
    ctx: &FieldContext,
    x: &ExtElement,
    w: u32,
) -> Result<Vec<Vec<BigUint>>> {
    let n = ctx.n as usize;
    let modulus = pk(ctx.p, w);
    let mut cols: Vec<Vec<BigUint>> = Vec::with_capacity(n);
    let mut current: Vec<BigUint> = x
        .coeffs
        .iter()
        .map(|c| {
            c.lift_integer()
                .map(|z| z.mod_floor_biguint(&modulus))
        })
        .collect::<Result<_>>()?;
    for _ in 0..n {
        cols.push(current.clone());
        let top = current.pop().unwrap();
        current.insert(0, BigUint::zero());
        for (i, &c) in ctx.modulus.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let sub = (&top * c) % &modulus;
            current[i] = (&current[i] + &modulus - sub) % &modulus;
        }
    }
    Ok((0..n)
        .map(|r| (0..n).map(|c| cols[c][r].clone()).collect())
        .collect())
}

trait ModFloorBigUint {
    fn mod_floor_biguint(&self, m: &BigUint) -> BigUint;
}

impl ModFloorBigUint for BigInt {
    fn mod_floor_biguint(&self, m: &BigUint) -> BigUint {
        use num_integer::Integer;
        self.mod_floor(&BigInt::from(m.clone()))
            .to_biguint()
            .expect("mod_floor is non-negative")
    }
}

/// Gauss-Jordan over Z/p^w for a matrix that is invertible mod p: every
/// pivot can be chosen to be a unit, so the solve is exact.
pub(crate) fn solve_unit_system(
    p: u64,
    w: u32,
    mut a: Vec<Vec<BigUint>>,
    mut b: Vec<BigUint>,
) -> Result<Vec<BigUint>> {
    let n = a.len();
    let modulus = pk(p, w);
    for col in 0..n {
        let pivot_row = (col..n)
            .find(|&r| !(&a[r][col] % p).is_zero())
            .ok_or(Error::PrecisionExhausted)?;
        a.swap(col, pivot_row);
        b.swap(col, pivot_row);
        let inv = mod_inverse(&a[col][col], &modulus);
        for j in 0..n {
            a[col][j] = (&a[col][j] * &inv) % &modulus;
        }
        b[col] = (&b[col] * &inv) % &modulus;
        for r in 0..n {
            if r == col || a[r][col].is_zero() {
                continue;
            }
            let factor = a[r][col].clone();
            for j in 0..n {
                let sub = (&factor * &a[col][j]) % &modulus;
                a[r][j] = (&a[r][j] + &modulus - sub) % &modulus;
            }
            let sub = (&factor * &b[col]) % &modulus;
            b[r] = (&b[r] + &modulus - sub) % &modulus;
        }
    }
    Ok(b)
}

/// Turn a residue mod p^w into a scalar with honest absolute precision w.
pub(crate) fn scalar_from_residue(p: u64, w: u32, m: BigUint) -> Result<PadicScalar> {
    if (m.clone() % pk(p, w)).is_zero() {
        return Ok(PadicScalar::zero(p));
    }
    let mut m = m % pk(p, w);
    let mut v = 0u32;
    let bp = BigUint::from(p);
    while (&m % &bp).is_zero() {
        m /= &bp;
        v += 1;
    }
    PadicScalar::from_unit(p, w - v, i64::from(v), m % pk(p, w - v))
}

/// Exact integer determinant by fraction-free (Bareiss) elimination.
fn bareiss_determinant(mut a: Vec<Vec<BigInt>>) -> BigInt {
    let n = a.len();
    if n == 1 {
        return a[0][0].clone();
    }
    let mut sign = 1i32;
    let mut prev = BigInt::one();
    for k in 0..n - 1 {
        if a[k][k].is_zero() {
            match (k + 1..n).find(|&r| !a[r][k].is_zero()) {
                Some(r) => {
                    a.swap(k, r);
                    sign = -sign;
                }
                None => return BigInt::zero(),
            }
        }
        for i in k + 1..n {
            for j in k + 1..n {
                let num = &a[i][j] * &a[k][k] - &a[i][k] * &a[k][j];
                a[i][j] = num / &prev;
            }
            a[i][k] = BigInt::zero();
        }
        prev = a[k][k].clone();
    }
    let det = a[n - 1][n - 1].clone();
    if sign < 0 {
        -det
    } else {
        det
    }
}

/// Additive Teichmuller digit expansion of a nonzero element of K:
/// x = p^valuation (omega + x_1 p + x_2 p^2 + ...) with omega in mu_(q-1)
/// and every tail digit in mu_(q-1) or zero.
#[derive(Clone, Debug)]
pub struct TeichDigitsK {
    pub valuation: i64,
    pub leading: ExtElement,
    /// Digits x_1, ..., x_(N-1); together with the leading digit these pin
    /// the element down mod p^(valuation + N).
    pub tail: Vec<ExtElement>,
}

impl TeichDigitsK {
    pub fn recompose(&self) -> Result<ExtElement> {
        let mut acc = self.leading.clone();
        for (i, d) in self.tail.iter().enumerate() {
            acc = acc.add(&d.shift(i as i64 + 1))?;
        }
        Ok(acc.shift(self.valuation))
    }
}

/// Compute the Teichmuller digit expansion of a nonzero x.
pub fn digit_expansion(ctx: &FieldContext, x: &ExtElement) -> Result<TeichDigitsK> {
    let v = x.valuation().finite()?;
    let mut t = x.shift(-v);
    let mut leading = None;
    let mut tail = Vec::new();
    for i in 0..ctx.precision {
        let d = if t.valuation() >= Valuation::Finite(1) || t.is_zero() {
            ctx.zero()
        } else {
            t.truncate_abs(i64::from(ctx.precision))?.teichmuller(ctx)?
        };
        if i == 0 {
            leading = Some(d.clone());
        } else {
            tail.push(d.clone());
        }
        t = t.sub(&d)?.shift(-1);
    }
    Ok(TeichDigitsK {
        valuation: v,
        leading: leading.unwrap(),
        tail,
    })
}

/// Truncation index for the principal-unit series: the smallest I such
/// that i*nu - (i - 1)/(p - 1) >= target for all i >= I; the bound is
/// increasing in i, so checking it at I suffices. The subtracted term
/// dominates v_p(i!) = (i - digitsum(i))/(p - 1).
fn series_truncation(p: u64, nu: u64, target: u64) -> u64 {
    let mut i = 1u64;
    while (i * nu * (p - 1)).saturating_sub(i - 1) < target * (p - 1) {
        i += 1;
    }
    i
}

/// log of a principal unit of K by the alternating series on u - 1.
pub fn log_principal(ctx: &FieldContext, u: &ExtElement) -> Result<ExtElement> {
    if !u.is_principal_unit(ctx) {
        return Err(Error::NotPrincipalUnit);
    }
    let z = u.sub(&ctx.one())?;
    if z.is_zero() {
        return Ok(ctx.zero());
    }
    let nu = z.valuation().finite()? as u64;
    let target = u64::from(ctx.precision);
    let mut trunc = 1u64;
    while (trunc as i64) * (nu as i64) - ilog_floor(ctx.p, trunc) < target as i64 {
        trunc += 1;
    }
    let guard = ilog_floor(ctx.p, trunc.max(1)) as u32 + 1;
    let work = ctx.precision + guard;
    let zl = lift_element(ctx, &z, work)?;
    let mut power = lift_element(ctx, &ctx.one(), work)?;
    let mut acc = ctx.zero();
    for i in 1..=trunc {
        power = power.mul(ctx, &zl)?;
        let inv_i = PadicScalar::from_integer(ctx.p, work, &BigInt::from(i)).inv()?;
        let term = power.scale(&inv_i);
        acc = if i % 2 == 1 {
            acc.add(&term)?
        } else {
            acc.sub(&term)?
        };
    }
    acc.truncate_abs(i64::from(ctx.precision))
}

/// exp of an element of K with valuation >= 1.
pub fn exp_small(ctx: &FieldContext, z: &ExtElement) -> Result<ExtElement> {
    if z.is_zero() {
        return Ok(ctx.one());
    }
    let nu = z.valuation().finite()?;
    if nu < 1 {
        return Err(Error::NotPrincipalUnit);
    }
    let target = u64::from(ctx.precision);
    let trunc = series_truncation(ctx.p, nu as u64, target);
    let guard = factorial_valuation(ctx.p, trunc) as u32 + 1;
    let work = ctx.precision + guard;
    let zl = lift_element(ctx, z, work)?;
    let mut term = lift_element(ctx, &ctx.one(), work)?;
    let mut acc = lift_element(ctx, &ctx.one(), work)?;
    for i in 1..=trunc {
        term = term.mul(ctx, &zl)?;
        let inv_i = PadicScalar::from_integer(ctx.p, work, &BigInt::from(i)).inv()?;
        term = term.scale(&inv_i);
        acc = acc.add(&term)?;
    }
    acc.truncate_abs(i64::from(ctx.precision))
}

/// (1 + z)^beta for z in K with v(z) >= 1 and beta in Z_p, by the binomial
/// series; the scalar route and this one share their convergence bounds.
pub fn one_plus_pow(ctx: &FieldContext, z: &ExtElement, beta: &PadicScalar) -> Result<ExtElement> {
    if z.is_zero() {
        return Ok(ctx.one());
    }
    let nu = z.valuation().finite()?;
    if nu < 1 {
        return Err(Error::NotPrincipalUnit);
    }
    if let Valuation::Finite(bv) = beta.valuation() {
        if bv < 0 {
            return Err(Error::BadMantissa("exponent must be a p-adic integer".into()));
        }
    }
    let target = u64::from(ctx.precision);
    let trunc = series_truncation(ctx.p, nu as u64, target);
    let guard = factorial_valuation(ctx.p, trunc) as u32 + 1;
    let work = ctx.precision + guard;
    let zl = lift_element(ctx, z, work)?;
    let beta_l = lift_scalar(ctx.p, beta, work);
    let one_w = PadicScalar::one(ctx.p, work);
    let mut coeff = one_w.clone(); // binom(beta, i)
    let mut power = lift_element(ctx, &ctx.one(), work)?;
    let mut acc = lift_element(ctx, &ctx.one(), work)?;
    for i in 1..=trunc {
        let step = beta_l.sub(&PadicScalar::from_integer(ctx.p, work, &BigInt::from(i - 1)))?;
        let inv_i = PadicScalar::from_integer(ctx.p, work, &BigInt::from(i)).inv()?;
        coeff = coeff.mul(&step)?.mul(&inv_i)?;
        power = power.mul(ctx, &zl)?;
        if coeff.is_zero() {
            continue;
        }
        acc = acc.add(&power.scale(&coeff))?;
    }
    acc.truncate_abs(i64::from(ctx.precision))
}

/// Reinterpret the known digits of an element at a higher working
/// precision (the zero-padded lift); callers own the error analysis.
fn lift_element(ctx: &FieldContext, x: &ExtElement, work: u32) -> Result<ExtElement> {
    let coeffs = x
        .coeffs
        .iter()
        .map(|c| lift_scalar(ctx.p, c, work))
        .collect();
    Ok(ExtElement { coeffs })
}

fn lift_scalar(p: u64, c: &PadicScalar, work: u32) -> PadicScalar {
    match c.valuation() {
        Valuation::Infinite => PadicScalar::zero(p),
        Valuation::Finite(v) => {
            PadicScalar::from_unit(p, work, v, c.mantissa().clone()).expect("canonical mantissa")
        }
    }
}
