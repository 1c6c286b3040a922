//! Spherical coordinates on K^x.
//!
//! Every nonzero x factors uniquely as x = omega * xi * r where
//!   - omega lies in mu_(q-1) (the Teichmuller part of the leading digit),
//!   - r = p^nu * (principal unit) is a "positive" scalar: the n-th root of
//!     the norm of omega^(-1) x, so that ||x|| = |r|_p^n,
//!   - xi lies in Sigma_n, the compact group of norm-one elements whose
//!     Teichmuller part is 1.
//!
//! The group Sigma_n intersected with the principal units is a free
//! Z_p-module of rank n-1 with explicit generators 1 + eps_j p, where the
//! eps_j are built from the power basis theta_j = t^j by
//! eps_j = (theta_j - g(theta_j)) / (1 + g(theta_j) p); their residues
//! theta_j - theta_j^p together with 1 span the residue field over F_p.
//! Exponent coordinates with respect to these generators (plus 1+p for the
//! radial direction) are computed by a logarithm-side linear solve whose
//! matrix is invertible mod p, so no precision is lost beyond the single
//! digit spent dividing the logs by p.

use num_bigint::BigUint;

use crate::error::{Error, Result};
use crate::field::{
    log_principal, one_plus_pow, scalar_from_residue, solve_unit_system, ExtElement, FieldContext,
};
use crate::padic::{pk, PadicScalar};

/// The unique factorization x = omega * xi * r.
#[derive(Clone, Debug)]
pub struct SphericalCoords {
    /// Root of unity in mu_(q-1): the angular leading digit.
    pub omega: ExtElement,
    /// Norm-one direction with trivial Teichmuller part (element of Sigma_n).
    pub xi: ExtElement,
    /// Positive scalar radius: p^nu times a principal unit.
    pub r: PadicScalar,
}

/// Factor a nonzero element into spherical coordinates.
///
/// omega is the Teichmuller representative of the leading digit; r is
/// p^nu times the unique principal-unit n-th root of the unit part of
/// N(omega^(-1) x); xi is whatever is left, and lands in Sigma_n.
pub fn decompose(ctx: &FieldContext, x: &ExtElement) -> Result<SphericalCoords> {
    let nu = x.valuation().finite().map_err(|_| Error::ZeroInput)?;
    let unit = x.shift(-nu);
    let omega = unit.teichmuller(ctx)?;
    let omega_inv = omega.inv(ctx)?;
    let positive_part = omega_inv.mul(ctx, &unit)?;
    let norm_unit = positive_part.norm(ctx)?;
    let root = norm_unit.nth_root_principal(u64::from(ctx.degree()))?;
    let r = root.shift(nu);
    let xi = positive_part.scale(&root.inv()?);
    Ok(SphericalCoords { omega, xi, r })
}

/// Multiply the coordinates back together, after verifying that they are
/// actually coordinates: omega^(q-1) = 1, xi in Sigma_n, r positive.
pub fn compose(ctx: &FieldContext, c: &SphericalCoords) -> Result<ExtElement> {
    let floor = i64::from(ctx.precision());
    let omega_pow = c.omega.pow_u64(ctx, ctx.q() - 1)?;
    let ok_omega = omega_pow.congruent_abs(&ctx.one(), floor.min(omega_pow.absolute_precision().unwrap_or(floor)));
    if !ok_omega {
        return Err(Error::DiagnosticPrecondition(
            "omega is not a (q-1)-th root of unity".into(),
        ));
    }
    if !sigma_membership(ctx, &c.xi)? {
        return Err(Error::DiagnosticPrecondition(
            "xi is not a norm-one element with trivial angular part".into(),
        ));
    }
    if !c.r.is_positive()? {
        return Err(Error::DiagnosticPrecondition(
            "r is not a positive scalar".into(),
        ));
    }
    Ok(c.omega.mul(ctx, &c.xi)?.scale(&c.r))
}

/// Is y in Sigma_n? Requires the Teichmuller part to be 1 (equivalently,
/// y is a principal unit) and the norm to be 1 at the working precision.
pub fn sigma_membership(ctx: &FieldContext, y: &ExtElement) -> Result<bool> {
    if y.is_zero() {
        return Err(Error::ZeroInput);
    }
    if !y.is_principal_unit(ctx) {
        return Ok(false);
    }
    let norm = y.norm(ctx)?;
    let floor = norm
        .absolute_precision()
        .unwrap_or_else(|| i64::from(ctx.precision()))
        .min(i64::from(ctx.precision()));
    Ok(norm.congruent_abs(&PadicScalar::one(ctx.p(), ctx.precision()), floor))
}

/// The exponent basis of the principal units: generators 1 + eps_j p of
/// Sigma_n's principal part for j = 1..n-1, the radial generator 1 + p,
/// and the cached level-(N-1) logarithm matrix used for coordinate solves.
pub struct SpecialBasis {
    epsilons: Vec<ExtElement>,
    generators: Vec<ExtElement>,
    /// Row-major n x n lifts of the log(generator)/p columns mod p^(N-1).
    matrix: Vec<Vec<BigUint>>,
    /// Working precision for coordinates: N - 1.
    coord_precision: u32,
}

impl SpecialBasis {
    pub fn new(ctx: &FieldContext) -> Result<Self> {
        let n = ctx.degree() as usize;
        let p_scalar = ctx.scalar_from_i64(ctx.p() as i64);
        let mut epsilons = Vec::with_capacity(n - 1);
        let mut generators = Vec::with_capacity(n);
        for j in 1..n {
            let theta = ctx.generator().pow_u64(ctx, j as u64)?;
            let g_theta = theta.frobenius(ctx)?;
            let denom = ctx.one().add(&g_theta.scale(&p_scalar))?;
            let eps = theta.sub(&g_theta)?.mul(ctx, &denom.inv(ctx)?)?;
            generators.push(ctx.one().add(&eps.scale(&p_scalar))?);
            epsilons.push(eps);
        }
        generators.push(ctx.one().add(&ctx.from_scalar(p_scalar.clone()))?);

        // Residue independence: the vectors eps_j mod p together with 1
        // must have rank n over F_p. This is exactly the invertibility of
        // the mod-p reduction of the log matrix below.
        let mut residue_columns: Vec<Vec<u64>> = epsilons
            .iter()
            .map(|e| e.residue_key(1))
            .collect::<Result<_>>()?;
        let mut one_col = vec![0u64; n];
        one_col[0] = 1;
        residue_columns.push(one_col);
        if residue_rank(ctx.p(), &residue_columns) != n {
            return Err(Error::DiagnosticPrecondition(
                "special-basis residues are linearly dependent over F_p".into(),
            ));
        }

        if ctx.precision() < 2 {
            return Err(Error::InsufficientPrecision {
                needed: 2,
                have: ctx.precision(),
            });
        }
        let coord_precision = ctx.precision() - 1;
        let modulus = pk(ctx.p(), coord_precision);
        let mut columns: Vec<Vec<BigUint>> = Vec::with_capacity(n);
        for g in &generators {
            let log = log_principal(ctx, g)?.shift(-1);
            let col = log
                .power_coeffs()
                .iter()
                .map(|c| {
                    c.lift_integer().map(|z| {
                        use num_integer::Integer;
                        let m = num_bigint::BigInt::from(modulus.clone());
                        z.mod_floor(&m).to_biguint().expect("non-negative")
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            columns.push(col);
        }
        let matrix = (0..n)
            .map(|row| (0..n).map(|col| columns[col][row].clone()).collect())
            .collect();
        Ok(SpecialBasis {
            epsilons,
            generators,
            matrix,
            coord_precision,
        })
    }

    /// The elements eps_1, ..., eps_(n-1).
    pub fn epsilons(&self) -> &[ExtElement] {
        &self.epsilons
    }

    /// The generators 1 + eps_1 p, ..., 1 + eps_(n-1) p, 1 + p.
    pub fn generators(&self) -> &[ExtElement] {
        &self.generators
    }

    /// Exponent coordinates of a principal unit: the b with
    /// x' = prod_j (1 + eps_j p)^(b_j) * (1+p)^(b_n), each b_j a p-adic
    /// integer known mod p^(N-1).
    pub fn coords(&self, ctx: &FieldContext, x_prime: &ExtElement) -> Result<Vec<PadicScalar>> {
        if !x_prime.is_principal_unit(ctx) {
            return Err(Error::NotPrincipalUnit);
        }
        let modulus = pk(ctx.p(), self.coord_precision);
        let log = log_principal(ctx, x_prime)?.shift(-1);
        let rhs = log
            .power_coeffs()
            .iter()
            .map(|c| {
                c.lift_integer().map(|z| {
                    use num_integer::Integer;
                    let m = num_bigint::BigInt::from(modulus.clone());
                    z.mod_floor(&m).to_biguint().expect("non-negative")
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let sol = solve_unit_system(ctx.p(), self.coord_precision, self.matrix.clone(), rhs)?;
        sol.into_iter()
            .map(|m| scalar_from_residue(ctx.p(), self.coord_precision, m))
            .collect()
    }

    /// prod_j (1 + eps_j p)^(b_j) * (1+p)^(b_n) for a full coordinate
    /// vector, or the Sigma_n part alone when b has n-1 entries.
    pub fn recompose(&self, ctx: &FieldContext, b: &[PadicScalar]) -> Result<ExtElement> {
        if b.len() != self.generators.len() && b.len() + 1 != self.generators.len() {
            return Err(Error::BadRecord(format!(
                "expected {} or {} exponents, got {}",
                self.generators.len() - 1,
                self.generators.len(),
                b.len()
            )));
        }
        let mut acc = ctx.one();
        for (g, beta) in self.generators.iter().zip(b) {
            let z = g.sub(&ctx.one())?;
            acc = acc.mul(ctx, &one_plus_pow(ctx, &z, beta)?)?;
        }
        Ok(acc)
    }

    /// Both sides of the quotient identity for a Sigma_n exponent vector
    /// b' (n-1 entries): prod (1 + eps_j p)^(b'_j) must equal y / g(y)
    /// with y = prod (1 + theta_j p)^(b'_j). Returns the common value.
    pub fn xi_as_quotient(&self, ctx: &FieldContext, b: &[PadicScalar]) -> Result<ExtElement> {
        let n = ctx.degree() as usize;
        if b.len() != n - 1 {
            return Err(Error::BadRecord(format!(
                "expected {} exponents, got {}",
                n - 1,
                b.len()
            )));
        }
        let product_form = self.recompose(ctx, b)?;
        let p_scalar = ctx.scalar_from_i64(ctx.p() as i64);
        let mut y = ctx.one();
        for (j, beta) in b.iter().enumerate() {
            let theta = ctx.generator().pow_u64(ctx, j as u64 + 1)?;
            let z = theta.scale(&p_scalar);
            y = y.mul(ctx, &one_plus_pow(ctx, &z, beta)?)?;
        }
        let quotient_form = y.div(ctx, &y.frobenius(ctx)?)?;
        let floor = product_form
            .absolute_precision()
            .into_iter()
            .chain(quotient_form.absolute_precision())
            .min()
            .unwrap_or(i64::from(ctx.precision()))
            .min(i64::from(ctx.precision()));
        if !product_form.congruent_abs(&quotient_form, floor) {
            return Err(Error::DiagnosticPrecondition(format!(
                "quotient identity failed: {product_form:?} vs {quotient_form:?}"
            )));
        }
        Ok(product_form)
    }
}

/// Rank over F_p of a list of column vectors (each of the same length).
fn residue_rank(p: u64, columns: &[Vec<u64>]) -> usize {
    let rows = columns.first().map_or(0, Vec::len);
    let mut m: Vec<Vec<u64>> = (0..rows)
        .map(|r| columns.iter().map(|c| c[r] % p).collect())
        .collect();
    let mut rank = 0;
    let cols = columns.len();
    for col in 0..cols {
        let pivot = (rank..rows).find(|&r| m[r][col] % p != 0);
        let Some(pivot) = pivot else { continue };
        m.swap(rank, pivot);
        let inv = mod_pow_u64(m[rank][col], p - 2, p);
        for entry in &mut m[rank] {
            *entry = *entry * inv % p;
        }
        for r in 0..rows {
            if r != rank && m[r][col] != 0 {
                let f = m[r][col];
                for c2 in 0..cols {
                    let sub = f * m[rank][c2] % p;
                    m[r][c2] = (m[r][c2] + p - sub) % p;
                }
            }
        }
        rank += 1;
    }
    rank
}

fn mod_pow_u64(mut base: u64, mut e: u64, p: u64) -> u64 {
    let mut acc = 1u64;
    base %= p;
    while e > 0 {
        if e & 1 == 1 {
            acc = acc * base % p;
        }
        base = base * base % p;
        e >>= 1;
    }
    acc
}

/// One-shot wrapper constructing the basis on the fly.
pub fn special_basis(ctx: &FieldContext) -> Result<SpecialBasis> {
    SpecialBasis::new(ctx)
}

/// One-shot exponent coordinates of a principal unit.
pub fn principal_unit_coords(ctx: &FieldContext, x_prime: &ExtElement) -> Result<Vec<PadicScalar>> {
    SpecialBasis::new(ctx)?.coords(ctx, x_prime)
}

/// One-shot quotient identity evaluation.
pub fn xi_as_quotient(ctx: &FieldContext, b: &[PadicScalar]) -> Result<ExtElement> {
    SpecialBasis::new(ctx)?.xi_as_quotient(ctx, b)
}
