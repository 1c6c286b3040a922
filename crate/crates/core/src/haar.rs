//! Exact Haar integration on the unramified extension, in additive
//! (cylinder-function) and spherical (omega, xi, r) coordinates.
//!
//! Everything is exact: volumes are rational powers of q, function values
//! are any type implementing [`MeasureValue`], and the radial tail over the
//! infinitely many small shells is summed in closed form. No floating
//! point enters anywhere in this module.
//!
//! The central cached object is the [`SphericalAtlas`]: for each level m it
//! enumerates all unit classes mod p^m, decomposes every one of them, and
//! records the induced coset tables for the root-of-unity part, the
//! norm-one direction part, and the radial part, together with the composed
//! quadrature grid used by [`spherical_integrate`]. Building a table
//! validates that the decomposition map is a bijection onto the product of
//! the three coset spaces (equivalently, that unit Haar measure pushes
//! forward to the uniform distribution on the product), so every later
//! integral rests on an enumeration-checked foundation.

use std::collections::{HashMap, HashSet};
use std::sync::{Arc, Mutex};

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Zero};
use rand::Rng;

use crate::error::{Error, Result};
use crate::exec::maybe_par_map;
use crate::field::{ExtElement, FieldContext};
use crate::padic::{power_rational, PadicScalar, Valuation};
use crate::spherical::decompose;

/// Hard ceiling on the candidate count q^m for full unit enumeration.
pub const ENUMERATION_BUDGET: u64 = 10_000_000;

/// Values integrable against Haar measure: an additive group with exact
/// scaling by rationals. `BigRational` is the workhorse; the distribution
/// machinery adds a complex-capable scalar.
pub trait MeasureValue: Clone + PartialEq + Send + Sync {
    fn zero() -> Self;
    fn add(&self, other: &Self) -> Self;
    fn scale(&self, by: &BigRational) -> Self;
}

impl MeasureValue for BigRational {
    fn zero() -> Self {
        <BigRational as Zero>::zero()
    }

    fn add(&self, other: &Self) -> Self {
        self + other
    }

    fn scale(&self, by: &BigRational) -> Self {
        self * by
    }
}

/// Exact rational power q^e where q = p^n.
pub fn q_pow(ctx: &FieldContext, e: i64) -> BigRational {
    power_rational(ctx.p(), e * i64::from(ctx.degree()))
}

/// The closed ball {y : ||y - center|| <= q^(-k)} = center + p^k O, where
/// k is the radius exponent (any sign).
#[derive(Clone, Debug)]
pub struct Ball {
    center: ExtElement,
    radius_exponent: i64,
}

impl Ball {
    /// Membership in the ball must be decidable from the precision carried
    /// by the center, so the center has to be known at least mod p^k.
    pub fn new(center: ExtElement, radius_exponent: i64) -> Result<Self> {
        if let Some(abs) = center.absolute_precision() {
            if abs < radius_exponent {
                return Err(Error::InsufficientPrecision {
                    needed: radius_exponent.max(0) as u32,
                    have: abs.max(0) as u32,
                });
            }
        }
        Ok(Ball {
            center,
            radius_exponent,
        })
    }

    pub fn center(&self) -> &ExtElement {
        &self.center
    }

    pub fn radius_exponent(&self) -> i64 {
        self.radius_exponent
    }

    /// Haar volume q^(-k).
    pub fn volume(&self, ctx: &FieldContext) -> BigRational {
        q_pow(ctx, -self.radius_exponent)
    }

    /// Exact membership test. Errors if x is too coarsely known to decide.
    pub fn contains(&self, x: &ExtElement) -> Result<bool> {
        if let Some(abs) = x.absolute_precision() {
            if abs < self.radius_exponent {
                return Err(Error::InsufficientPrecision {
                    needed: self.radius_exponent.max(0) as u32,
                    have: abs.max(0) as u32,
                });
            }
        }
        let diff = x.sub(&self.center)?;
        Ok(match diff.valuation() {
            Valuation::Infinite => true,
            Valuation::Finite(v) => v >= self.radius_exponent,
        })
    }

    /// Two ultrametric balls are either nested or disjoint: they meet
    /// exactly when the centers differ by at most the larger radius.
    pub fn intersects(&self, other: &Ball) -> Result<bool> {
        let kmin = self.radius_exponent.min(other.radius_exponent);
        let diff = self.center.sub(&other.center)?;
        Ok(match diff.valuation() {
            Valuation::Infinite => true,
            Valuation::Finite(v) => v >= kmin,
        })
    }
}

/// A finite combination f = sum_i value_i * 1_{B_i} over pairwise disjoint
/// balls. Disjointness is part of the representation contract and is
/// validated at construction; overlapping input is rejected rather than
/// silently re-split, so every stored term really is a separate piece of
/// the function.
#[derive(Clone, Debug)]
pub struct CylinderFunction<V> {
    terms: Vec<(Ball, V)>,
}

impl<V: MeasureValue> CylinderFunction<V> {
    pub fn zero_function() -> Self {
        CylinderFunction { terms: Vec::new() }
    }

    pub fn single(ball: Ball, value: V) -> Self {
        CylinderFunction {
            terms: vec![(ball, value)],
        }
    }

    pub fn from_disjoint(terms: Vec<(Ball, V)>) -> Result<Self> {
        for i in 0..terms.len() {
            for j in (i + 1)..terms.len() {
                if terms[i].0.intersects(&terms[j].0)? {
                    return Err(Error::DiagnosticPrecondition(format!(
                        "cylinder terms {i} and {j} overlap; representation must use disjoint balls"
                    )));
                }
            }
        }
        Ok(CylinderFunction { terms })
    }

    pub fn terms(&self) -> &[(Ball, V)] {
        &self.terms
    }

    /// f(x): the value on the unique ball containing x, zero outside.
    pub fn evaluate(&self, x: &ExtElement) -> Result<V> {
        for (ball, v) in &self.terms {
            if ball.contains(x)? {
                return Ok(v.clone());
            }
        }
        Ok(V::zero())
    }

    /// Exact Haar integral over K: sum of value * q^(-k) per ball.
    pub fn haar_integral(&self, ctx: &FieldContext) -> V {
        let mut acc = V::zero();
        for (ball, v) in &self.terms {
            acc = acc.add(&v.scale(&ball.volume(ctx)));
        }
        acc
    }

    /// x |-> f(x + a): every center moves to center - a.
    pub fn translate(&self, a: &ExtElement) -> Result<Self> {
        let terms = self
            .terms
            .iter()
            .map(|(b, v)| {
                Ok((
                    Ball::new(b.center.sub(a)?, b.radius_exponent)?,
                    v.clone(),
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        // Translation preserves disjointness, so rebuild directly.
        Ok(CylinderFunction { terms })
    }

    /// x |-> f(lambda x) for a nonzero scalar lambda: the ball
    /// center + p^k O pulls back to lambda^(-1) center + p^(k - v(lambda)) O.
    pub fn precompose_scalar(&self, lambda: &PadicScalar) -> Result<Self> {
        let v = lambda.valuation().finite().map_err(|_| Error::ZeroInput)?;
        let inv = lambda.inv()?;
        let terms = self
            .terms
            .iter()
            .map(|(b, val)| {
                Ok((
                    Ball::new(b.center.scale(&inv), b.radius_exponent - v)?,
                    val.clone(),
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(CylinderFunction { terms })
    }

    pub fn scale_values(&self, by: &BigRational) -> Self {
        CylinderFunction {
            terms: self
                .terms
                .iter()
                .map(|(b, v)| (b.clone(), v.scale(by)))
                .collect(),
        }
    }

    /// Re-type the values (e.g. lift rational data into a wider scalar);
    /// the ball structure, hence disjointness, is untouched.
    pub fn map_values<W: MeasureValue>(&self, f: impl Fn(&V) -> W) -> CylinderFunction<W> {
        CylinderFunction {
            terms: self
                .terms
                .iter()
                .map(|(b, v)| (b.clone(), f(v)))
                .collect(),
        }
    }

    /// Smallest exponent l such that f is constant on every coset of
    /// p^l O (the finest radius appearing among the terms).
    pub fn constancy_exponent(&self) -> i64 {
        self.terms
            .iter()
            .map(|(b, _)| b.radius_exponent)
            .max()
            .unwrap_or(0)
    }

    /// Largest shell exponent v such that the support can meet
    /// {||x|| = q^v}. A ball centered outside its own radius sits entirely
    /// in the shell of its center; a ball containing 0 reaches out to the
    /// shell of its radius.
    pub fn support_shell_bound(&self) -> i64 {
        self.terms
            .iter()
            .map(|(b, _)| match b.center.valuation() {
                Valuation::Finite(val) if val < b.radius_exponent => -val,
                _ => -b.radius_exponent,
            })
            .max()
            .unwrap_or(i64::MIN)
    }
}

/// Number of unit classes mod p^m: q^(m-1) (q - 1).
pub fn unit_class_count(ctx: &FieldContext, m: u32) -> Result<u64> {
    let q = u128::from(ctx.q());
    let qm = q
        .checked_pow(m)
        .filter(|&c| c <= u128::from(ENUMERATION_BUDGET))
        .ok_or(Error::BudgetExceeded {
            level: m,
            budget: ENUMERATION_BUDGET,
        })?;
    Ok((qm - qm / q) as u64)
}

/// Every representative of the unit classes (O / p^m O)^*, as exact
/// integer-coefficient elements, in odometer order over the power-basis
/// digits. Guarded: the candidate count q^m must not exceed the
/// enumeration budget.
pub fn enumerate_units(ctx: &FieldContext, m: u32) -> Result<Vec<ExtElement>> {
    if m == 0 {
        return Err(Error::DiagnosticPrecondition(
            "enumeration level must be at least 1".into(),
        ));
    }
    if ctx.precision() < m {
        return Err(Error::InsufficientPrecision {
            needed: m,
            have: ctx.precision(),
        });
    }
    let expected = unit_class_count(ctx, m)?;
    let p = ctx.p();
    let pm = (0..m).fold(1u64, |acc, _| acc * p);
    let n = ctx.degree() as usize;
    let mut out = Vec::with_capacity(expected as usize);
    let mut digits = vec![0u64; n];
    loop {
        if digits.iter().any(|&d| d % p != 0) {
            let coeffs: Vec<i64> = digits.iter().map(|&d| d as i64).collect();
            out.push(ctx.from_power_coeffs_i64(&coeffs));
        }
        let mut pos = 0;
        loop {
            if pos == n {
                debug_assert_eq!(out.len() as u64, expected);
                return Ok(out);
            }
            digits[pos] += 1;
            if digits[pos] < pm {
                break;
            }
            digits[pos] = 0;
            pos += 1;
        }
    }
}

/// The level-m spherical coordinate class of one unit: residue keys of
/// omega (mod p), xi (mod p^m), and the radial part r (mod p^m).
#[derive(Clone, Debug)]
pub struct UnitClass {
    pub rep: ExtElement,
    pub omega_key: Vec<u64>,
    pub xi_key: Vec<u64>,
    pub r_key: u64,
}

/// One node of the composed quadrature grid: the product
/// omega * xi_rep * r_rep for one triple of coset representatives. The
/// indices point into the parent table's coset lists.
#[derive(Clone, Debug)]
pub struct GridPoint {
    pub omega_idx: usize,
    pub xi_idx: usize,
    pub r_idx: usize,
    pub point: ExtElement,
}

/// Level-m coset bookkeeping built from full enumeration: every unit class
/// mod p^m decomposed into spherical coordinates, the three coset tables,
/// and the composed product grid. Construction fails unless the class map
/// (omega, xi, r) is a bijection with the expected uniform class counts.
pub struct LevelTable {
    level: u32,
    units: Vec<UnitClass>,
    omegas: Vec<(Vec<u64>, ExtElement)>,
    omega_index: HashMap<Vec<u64>, usize>,
    xi_cosets: Vec<(Vec<u64>, ExtElement)>,
    xi_index: HashMap<Vec<u64>, usize>,
    radial_classes: Vec<(u64, PadicScalar)>,
    radial_index: HashMap<u64, usize>,
    grid: Vec<GridPoint>,
    /// Residue key mod p^m of every grid point, parallel to `grid`; present
    /// whenever the working precision reaches the table level. Lets ball
    /// membership on a shell be tested in machine integers.
    point_keys: Option<Vec<Vec<u64>>>,
    base_weight: BigRational,
}

impl LevelTable {
    fn build(ctx: &FieldContext, m: u32) -> Result<Self> {
        let reps = enumerate_units(ctx, m)?;
        let p = ctx.p();
        let n = u64::from(ctx.degree());

        let decomposed = maybe_par_map(&reps, |u| -> Result<_> {
            let sc = decompose(ctx, u)?;
            let omega_key = sc.omega.residue_key(1)?;
            let xi_key = sc.xi.residue_key(m)?;
            let r_key = sc.r.residue_u64(m)?;
            Ok((
                UnitClass {
                    rep: u.clone(),
                    omega_key,
                    xi_key,
                    r_key,
                },
                sc.omega,
                sc.xi,
            ))
        });

        // Radial classes are known in closed form: 1 + p c mod p^m.
        let pm = (0..m).fold(1u64, |acc, _| acc * p);
        let pm1 = pm / p;
        let mut radial_classes = Vec::with_capacity(pm1 as usize);
        let mut radial_index = HashMap::new();
        for c in 0..pm1 {
            let residue = 1 + p * c;
            let rep = PadicScalar::from_integer(p, ctx.precision(), &BigInt::from(residue));
            radial_index.insert(residue, radial_classes.len());
            radial_classes.push((residue, rep));
        }

        let mut units = Vec::with_capacity(reps.len());
        let mut omegas: Vec<(Vec<u64>, ExtElement)> = Vec::new();
        let mut omega_index = HashMap::new();
        let mut xi_cosets: Vec<(Vec<u64>, ExtElement)> = Vec::new();
        let mut xi_index = HashMap::new();
        let mut seen_triples = HashSet::new();
        for item in decomposed {
            let (class, omega, xi) = item?;
            let oi = *omega_index
                .entry(class.omega_key.clone())
                .or_insert_with(|| {
                    omegas.push((class.omega_key.clone(), omega));
                    omegas.len() - 1
                });
            let xii = *xi_index.entry(class.xi_key.clone()).or_insert_with(|| {
                xi_cosets.push((class.xi_key.clone(), xi));
                xi_cosets.len() - 1
            });
            let ri = *radial_index.get(&class.r_key).ok_or_else(|| {
                Error::DiagnosticPrecondition(format!(
                    "radial part residue {} is not of the form 1 + p c",
                    class.r_key
                ))
            })?;
            if !seen_triples.insert((oi, xii, ri)) {
                return Err(Error::DiagnosticPrecondition(
                    "two distinct unit classes produced the same spherical class".into(),
                ));
            }
            units.push(class);
        }

        // Uniform pushforward: the class counts must match the closed
        // forms, and with distinct triples the count equality makes the
        // class map a bijection onto the full product.
        let expected_omegas = (ctx.q() - 1) as usize;
        let expected_xi = (0..(m as u64 - 1) * (n - 1)).fold(1u64, |acc, _| acc * p) as usize;
        let expected_r = pm1 as usize;
        if omegas.len() != expected_omegas
            || xi_cosets.len() != expected_xi
            || units.len() != expected_omegas * expected_xi * expected_r
        {
            return Err(Error::DiagnosticPrecondition(format!(
                "pushforward class counts at level {m} are not uniform: \
                 {} omega, {} xi, {} radial classes for {} units",
                omegas.len(),
                xi_cosets.len(),
                expected_r,
                units.len()
            )));
        }

        // Composed quadrature grid over the product of the coset tables.
        // These products are recomputed from the representatives (rather
        // than reusing the enumerated units) so that integrating over the
        // grid genuinely exercises the change of variables.
        let mut triples = Vec::with_capacity(units.len());
        for oi in 0..omegas.len() {
            for xii in 0..xi_cosets.len() {
                for ri in 0..radial_classes.len() {
                    triples.push((oi, xii, ri));
                }
            }
        }
        let grid = maybe_par_map(&triples, |&(oi, xii, ri)| -> Result<GridPoint> {
            let point = omegas[oi]
                .1
                .mul(ctx, &xi_cosets[xii].1)?
                .scale(&radial_classes[ri].1);
            Ok(GridPoint {
                omega_idx: oi,
                xi_idx: xii,
                r_idx: ri,
                point,
            })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

        // Per-node weight of the level-m grid on any fixed shell, before
        // the shell-dependent factors: (xi coset volume) * p^(-m), the
        // second factor being the radial class measure at |r| = 1.
        let base_weight = power_rational(p, -((m as i64 - 1) * (n as i64 - 1)))
            * power_rational(p, -(m as i64));

        let point_keys = grid
            .iter()
            .map(|g| g.point.residue_key(m).ok())
            .collect::<Option<Vec<_>>>();

        Ok(LevelTable {
            level: m,
            units,
            omegas,
            omega_index,
            xi_cosets,
            xi_index,
            radial_classes,
            radial_index,
            grid,
            point_keys,
            base_weight,
        })
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn units(&self) -> &[UnitClass] {
        &self.units
    }

    pub fn omegas(&self) -> &[(Vec<u64>, ExtElement)] {
        &self.omegas
    }

    pub fn xi_cosets(&self) -> &[(Vec<u64>, ExtElement)] {
        &self.xi_cosets
    }

    pub fn radial_classes(&self) -> &[(u64, PadicScalar)] {
        &self.radial_classes
    }

    pub fn grid(&self) -> &[GridPoint] {
        &self.grid
    }

    /// Residue keys mod p^level of the grid points, parallel to `grid()`,
    /// when the working precision allowed them to be tabulated.
    pub fn point_keys(&self) -> Option<&[Vec<u64>]> {
        self.point_keys.as_deref()
    }

    /// Volume of one xi coset under the probability Haar measure on the
    /// norm-one direction group.
    pub fn xi_coset_volume(&self) -> BigRational {
        BigRational::new(BigInt::one(), BigInt::from(self.xi_cosets.len()))
    }

    pub fn omega_idx(&self, key: &[u64]) -> Option<usize> {
        self.omega_index.get(key).copied()
    }

    pub fn xi_idx(&self, key: &[u64]) -> Option<usize> {
        self.xi_index.get(key).copied()
    }

    pub fn radial_idx(&self, residue: u64) -> Option<usize> {
        self.radial_index.get(&residue).copied()
    }

    fn base_weight(&self) -> &BigRational {
        &self.base_weight
    }
}

/// Cache of level tables for one field context. Tables are built on first
/// use and shared; building parallelizes over unit representatives when
/// the `parallel` feature is enabled.
pub struct SphericalAtlas {
    ctx: FieldContext,
    levels: Mutex<HashMap<u32, Arc<LevelTable>>>,
}

impl SphericalAtlas {
    pub fn new(ctx: &FieldContext) -> Self {
        SphericalAtlas {
            ctx: ctx.clone(),
            levels: Mutex::new(HashMap::new()),
        }
    }

    pub fn ctx(&self) -> &FieldContext {
        &self.ctx
    }

    pub fn level(&self, m: u32) -> Result<Arc<LevelTable>> {
        if let Some(t) = self.levels.lock().expect("atlas lock").get(&m) {
            return Ok(Arc::clone(t));
        }
        let built = Arc::new(LevelTable::build(&self.ctx, m)?);
        let mut map = self.levels.lock().expect("atlas lock");
        Ok(Arc::clone(map.entry(m).or_insert(built)))
    }
}

/// A function on the angular factor mu_(q-1) x Sigma_n, constant on level-m
/// cosets, tabulated against the atlas representatives.
#[derive(Clone, Debug)]
pub struct FiniteLevelAngular<V> {
    level: u32,
    values: HashMap<(Vec<u64>, Vec<u64>), V>,
}

impl<V: MeasureValue> FiniteLevelAngular<V> {
    /// Fill the table by evaluating a closure on every pair of coset
    /// representatives (omega representative, xi representative).
    pub fn tabulate<F>(atlas: &SphericalAtlas, m: u32, mut f: F) -> Result<Self>
    where
        F: FnMut(&ExtElement, &ExtElement) -> Result<V>,
    {
        Self::tabulate_indexed(atlas, m, |_, _, omega, xi| f(omega, xi))
    }

    /// Like `tabulate`, but the closure also receives the positional indices
    /// of the representatives inside the level table's coset lists.
    pub fn tabulate_indexed<F>(atlas: &SphericalAtlas, m: u32, mut f: F) -> Result<Self>
    where
        F: FnMut(usize, usize, &ExtElement, &ExtElement) -> Result<V>,
    {
        let table = atlas.level(m)?;
        let mut values = HashMap::new();
        for (oi, (okey, omega)) in table.omegas().iter().enumerate() {
            for (xi_idx, (xkey, xi)) in table.xi_cosets().iter().enumerate() {
                values.insert((okey.clone(), xkey.clone()), f(oi, xi_idx, omega, xi)?);
            }
        }
        Ok(FiniteLevelAngular { level: m, values })
    }

    pub fn constant(atlas: &SphericalAtlas, m: u32, v: V) -> Result<Self> {
        Self::tabulate(atlas, m, |_, _| Ok(v.clone()))
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    /// Number of (omega, xi) cosets tabulated.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Iterate over the tabulated values (order unspecified).
    pub fn values(&self) -> impl Iterator<Item = &V> {
        self.values.values()
    }

    pub fn value(&self, omega_key: &[u64], xi_key: &[u64]) -> Result<&V> {
        self.values
            .get(&(omega_key.to_vec(), xi_key.to_vec()))
            .ok_or_else(|| {
                Error::DiagnosticPrecondition(format!(
                    "angular table has no entry for omega {omega_key:?}, xi {xi_key:?}"
                ))
            })
    }
}

pub(crate) fn reduce_key(key: &[u64], p: u64, to_level: u32) -> Vec<u64> {
    let modulus = (0..to_level).fold(1u64, |acc, _| acc * p);
    key.iter().map(|&r| r % modulus).collect()
}

/// Haar integral over Sigma_n (probability normalization) of the
/// restriction of g to {omega = 1} x Sigma_n.
///
/// Computed as the pushforward average of g(xi(u)) over every unit class
/// one level finer than g's table; the extra level makes the level-m key
/// of xi(u) manifestly well defined on the enumerated classes. Uniformity
/// of the pushforward is enforced when the finer table is built, so the
/// average equals the exact coset-weighted sum.
pub fn sigma_haar_integrate<V: MeasureValue>(
    atlas: &SphericalAtlas,
    g: &FiniteLevelAngular<V>,
) -> Result<V> {
    let m = g.level();
    let fine = atlas.level(m + 1)?;
    let p = atlas.ctx().p();
    let one_key = atlas.ctx().one().residue_key(1)?;
    let mut acc = V::zero();
    for class in fine.units() {
        let xi_key = reduce_key(&class.xi_key, p, m);
        acc = acc.add(g.value(&one_key, &xi_key)?);
    }
    let inv_count = BigRational::new(BigInt::one(), BigInt::from(fine.units().len()));
    Ok(acc.scale(&inv_count))
}

/// Whether the ball meets the shell {x : ||x|| = q^v}. A ball whose
/// center is at least as deep as its radius contains 0 and covers every
/// valuation from its radius down; otherwise it sits entirely on its
/// center's shell.
fn ball_meets_shell(b: &Ball, v: i64) -> bool {
    let k = b.radius_exponent();
    match b.center().valuation() {
        Valuation::Infinite => -v >= k,
        Valuation::Finite(cv) if cv >= k => -v >= k,
        Valuation::Finite(cv) => cv == -v,
    }
}

/// Exact evaluation of the spherical side of the radial integration
/// formula:
///
///   p^(1-n) * sum_omega ∫_Sigma ∫ f(omega xi r) |r|^(n-1) dr dxi,
///
/// with the radial integral over the positive scalars expanded shell by
/// shell. Only the terms whose balls meet the shell |r|_p = p^v
/// contribute there, and their restriction is constant on the
/// level-(l_v + v) grid cells for the local constancy exponent l_v of
/// those terms — usually far coarser than the global exponent, which
/// keeps the enumerated grids small. Each cell carries radial measure
/// p^(v-m) and xi-coset volume 1/#cosets; all shells at or inside p^l O
/// contribute the closed-form constant tail f(0) * q^(-l).
pub fn spherical_integrate<V: MeasureValue>(
    atlas: &SphericalAtlas,
    f: &CylinderFunction<V>,
) -> Result<V> {
    let ctx = atlas.ctx();
    if f.terms().is_empty() {
        return Ok(V::zero());
    }
    let n = i64::from(ctx.degree());
    let l = f.constancy_exponent();
    let vmax = f.support_shell_bound();
    let mut acc = V::zero();
    for v in (1 - l)..=vmax {
        let shell_terms: Vec<(Ball, V)> = f
            .terms()
            .iter()
            .filter(|(b, _)| ball_meets_shell(b, v))
            .cloned()
            .collect();
        if shell_terms.is_empty() {
            continue;
        }
        let l_v = shell_terms
            .iter()
            .map(|(b, _)| b.radius_exponent())
            .max()
            .expect("shell has terms");
        let shell_f = CylinderFunction::from_disjoint(shell_terms)?;
        let m = (l_v + v).max(1) as u32;
        let table = atlas.level(m)?;
        // Shell factor: the p^(1-n) normalization, |r|^(n-1) = p^(v(n-1)),
        // and the shell rescaling p^v of the radial class measure.
        let shell_factor = power_rational(ctx.p(), 1 - n + v * n) * table.base_weight();
        let fast = table
            .point_keys()
            .and_then(|keys| Some((keys, shell_ball_tests(ctx.p(), shell_f.terms(), v)?)));
        let shell_sum = match fast {
            // Each term's grid mass is a count of residue keys satisfying
            // its congruence, so the grid sum needs no big-integer work.
            Some((keys, tests)) => {
                let mut sum = V::zero();
                for ((_, value), test) in shell_f.terms().iter().zip(&tests) {
                    let matches = match test {
                        BallTest::CoversShell => keys.len(),
                        BallTest::Congruence { modulus, target } => keys
                            .iter()
                            .filter(|key| {
                                key.iter()
                                    .zip(target)
                                    .all(|(have, want)| have % modulus == *want)
                            })
                            .count(),
                    };
                    let count = BigRational::from_integer(BigInt::from(matches));
                    sum = sum.add(&value.scale(&count));
                }
                sum
            }
            // Fallback when residue keys are unavailable: evaluate the
            // function at every rescaled grid representative.
            None => {
                let sampled =
                    maybe_par_map(table.grid(), |g| shell_f.evaluate(&g.point.shift(-v)));
                let mut sum = V::zero();
                for s in sampled {
                    sum = sum.add(&s?);
                }
                sum
            }
        };
        acc = acc.add(&shell_sum.scale(&shell_factor));
    }
    // Constant tail: f is identically f(0) on p^l O, of Haar volume q^(-l).
    let f0 = f.evaluate(&ctx.zero())?;
    Ok(acc.add(&f0.scale(&q_pow(ctx, -l))))
}

/// How a term's ball restricts the level-m grid on the shell |x| = q^v.
enum BallTest {
    /// The ball contains the whole shell (it contains 0 and is wide
    /// enough), so every grid point belongs to it.
    CoversShell,
    /// Membership of the rescaled point p^(-v) u in the ball B(c, k) with
    /// |c| = q^v is the congruence u = p^v c mod p^(k+v), coefficient by
    /// coefficient on the power basis.
    Congruence { modulus: u64, target: Vec<u64> },
}

/// Tabulate the membership test of every term on the shell |x| = q^v, or
/// None when a congruence cannot be tabulated exactly (modulus overflow or
/// insufficient center precision); the caller then falls back to direct
/// evaluation.
fn shell_ball_tests<V>(p: u64, terms: &[(Ball, V)], v: i64) -> Option<Vec<BallTest>> {
    terms
        .iter()
        .map(|(ball, _)| {
            let k = ball.radius_exponent();
            match ball.center().valuation() {
                Valuation::Infinite => Some(BallTest::CoversShell),
                Valuation::Finite(cv) if cv >= k => Some(BallTest::CoversShell),
                // Here cv = -v (the ball meets this shell only), so the
                // congruence exponent k + v = k - cv is at least 1.
                Valuation::Finite(_) => {
                    let exp = u32::try_from(k + v).ok()?;
                    let modulus = p.checked_pow(exp)?;
                    let target = ball.center().shift(v).residue_key(exp).ok()?;
                    Some(BallTest::Congruence { modulus, target })
                }
            }
        })
        .collect()
}

/// Integrate the unit-group indicator on both sides of the radial
/// change-of-variables formula by full enumeration at level m — the
/// additive side by counting unit classes, the spherical side on the
/// composed grid WITHOUT the normalizing constant — and return the exact
/// ratio (additive) / (spherical). The change of variables holds exactly
/// when this ratio is p^(1-n).
pub fn multiplicative_constant_check(atlas: &SphericalAtlas, m: u32) -> Result<BigRational> {
    let ctx = atlas.ctx();
    let table = atlas.level(m)?;
    // Additive side: each unit class mod p^m is a ball of volume q^(-m).
    let lhs = BigRational::from_integer(BigInt::from(table.units().len())) * q_pow(ctx, -(m as i64));
    // Spherical side: the indicator vanishes on every shell except
    // |r| = 1 (each grid point is a unit, so p^(-v) * point has norm
    // q^(v n) != 1 for v != 0) and at 0, leaving the level-m grid sum with
    // |r|^(n-1) = 1.
    let f = unit_indicator(ctx)?;
    let mut hits = <BigRational as Zero>::zero();
    for g in table.grid() {
        hits += f.evaluate(&g.point)?;
    }
    let rhs = hits * table.base_weight();
    if rhs.is_zero() {
        return Err(Error::DiagnosticPrecondition(
            "spherical side of the constant check vanished".into(),
        ));
    }
    Ok(lhs / rhs)
}

/// Indicator of the unit group U = O \ pO, as the q-1 level-1 balls on the
/// nonzero residue classes.
pub fn unit_indicator(ctx: &FieldContext) -> Result<CylinderFunction<BigRational>> {
    let mut terms = Vec::new();
    let n = ctx.degree() as usize;
    let p = ctx.p() as i64;
    let mut digits = vec![0i64; n];
    loop {
        if digits.iter().any(|&d| d != 0) {
            terms.push((
                Ball::new(ctx.from_power_coeffs_i64(&digits), 1)?,
                BigRational::one(),
            ));
        }
        let mut pos = 0;
        loop {
            if pos == n {
                return CylinderFunction::from_disjoint(terms);
            }
            digits[pos] += 1;
            if digits[pos] < p {
                break;
            }
            digits[pos] = 0;
            pos += 1;
        }
    }
}

/// Indicator of the shell {||x|| = q^v}, as the q-1 balls
/// p^(-v) c + p^(1-v) O over the nonzero residue classes c.
pub fn shell_indicator(ctx: &FieldContext, v: i64) -> Result<CylinderFunction<BigRational>> {
    let shifted = unit_indicator(ctx)?
        .terms()
        .iter()
        .map(|(b, val)| {
            Ok((
                Ball::new(b.center().shift(-v), b.radius_exponent() - v)?,
                val.clone(),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    CylinderFunction::from_disjoint(shifted)
}

/// Random exact test function: up to `max_terms` pairwise-disjoint balls
/// with radius exponents in [-1, max_level], centers reaching down to
/// valuation -2, and small random rational values. Overlapping candidates
/// are rejected and resampled, so the result is always a valid disjoint
/// representation (possibly with fewer than `max_terms` balls).
pub fn random_cylinder_function<R: Rng + ?Sized>(
    ctx: &FieldContext,
    rng: &mut R,
    max_level: i64,
    max_terms: usize,
) -> Result<CylinderFunction<BigRational>> {
    let mut balls: Vec<Ball> = Vec::new();
    let mut terms = Vec::new();
    let mut attempts = 0;
    while terms.len() < max_terms && attempts < 50 * max_terms {
        attempts += 1;
        let shift = rng.gen_range(-2..=0);
        let k = rng.gen_range(-1..=max_level);
        let candidate = Ball::new(ctx.random_integral(rng).shift(shift), k)?;
        let mut disjoint = true;
        for b in &balls {
            if candidate.intersects(b)? {
                disjoint = false;
                break;
            }
        }
        if !disjoint {
            continue;
        }
        let num = loop {
            let z = rng.gen_range(-9i64..=9);
            if z != 0 {
                break z;
            }
        };
        let den = rng.gen_range(1i64..=9);
        balls.push(candidate.clone());
        terms.push((candidate, BigRational::new(BigInt::from(num), BigInt::from(den))));
    }
    CylinderFunction::from_disjoint(terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ctx32() -> FieldContext {
        FieldContext::new(3, 2, 8).unwrap()
    }

    fn rat(n: i64, d: i64) -> BigRational {
        BigRational::new(BigInt::from(n), BigInt::from(d))
    }

    #[test]
    fn ball_volumes_and_membership() {
        let ctx = ctx32();
        let whole = Ball::new(ctx.zero(), 0).unwrap();
        assert_eq!(whole.volume(&ctx), rat(1, 1));
        assert!(whole.contains(&ctx.one()).unwrap());
        assert!(whole.contains(&ctx.generator()).unwrap());
        assert!(!whole.contains(&ctx.one().shift(-1)).unwrap());

        let small = Ball::new(ctx.one(), 2).unwrap();
        assert_eq!(small.volume(&ctx), rat(1, 81));
        assert!(small.contains(&ctx.from_power_coeffs_i64(&[10, 9])).unwrap());
        assert!(!small.contains(&ctx.from_power_coeffs_i64(&[4, 0])).unwrap());
    }

    #[test]
    fn haar_integrals_of_basic_sets() {
        let ctx = ctx32();
        let one_o = CylinderFunction::single(Ball::new(ctx.zero(), 0).unwrap(), rat(1, 1));
        assert_eq!(one_o.haar_integral(&ctx), rat(1, 1));

        let one_po = CylinderFunction::single(Ball::new(ctx.zero(), 1).unwrap(), rat(1, 1));
        assert_eq!(one_po.haar_integral(&ctx), rat(1, 9));

        let units = unit_indicator(&ctx).unwrap();
        assert_eq!(units.terms().len(), 8);
        assert_eq!(units.haar_integral(&ctx), rat(8, 9));

        assert_eq!(
            CylinderFunction::<BigRational>::zero_function().haar_integral(&ctx),
            rat(0, 1)
        );
    }

    #[test]
    fn disjointness_is_enforced() {
        let ctx = ctx32();
        // Nested: O contains pO.
        let err = CylinderFunction::from_disjoint(vec![
            (Ball::new(ctx.zero(), 0).unwrap(), rat(1, 1)),
            (Ball::new(ctx.zero(), 1).unwrap(), rat(2, 1)),
        ]);
        assert!(err.is_err());
        // Same ball described through different centers.
        let err = CylinderFunction::from_disjoint(vec![
            (Ball::new(ctx.one(), 1).unwrap(), rat(1, 1)),
            (Ball::new(ctx.from_power_coeffs_i64(&[4, 3]), 1).unwrap(), rat(2, 1)),
        ]);
        assert!(err.is_err());
        // Genuinely disjoint residue classes coexist.
        let ok = CylinderFunction::from_disjoint(vec![
            (Ball::new(ctx.one(), 1).unwrap(), rat(1, 1)),
            (Ball::new(ctx.generator(), 1).unwrap(), rat(2, 1)),
        ]);
        assert!(ok.is_ok());
    }

    #[test]
    fn ball_requires_decidable_membership() {
        let ctx = ctx32();
        let coarse = ctx.from_scalar(PadicScalar::from_unit(3, 1, 0, 1u32.into()).unwrap());
        assert!(Ball::new(coarse, 3).is_err());
    }

    #[test]
    fn evaluation_picks_the_right_ball() {
        let ctx = ctx32();
        let f = CylinderFunction::from_disjoint(vec![
            (Ball::new(ctx.one(), 1).unwrap(), rat(5, 1)),
            (Ball::new(ctx.zero(), 1).unwrap(), rat(7, 2)),
        ])
        .unwrap();
        assert_eq!(f.evaluate(&ctx.one()).unwrap(), rat(5, 1));
        assert_eq!(f.evaluate(&ctx.from_power_coeffs_i64(&[4, 9])).unwrap(), rat(5, 1));
        assert_eq!(f.evaluate(&ctx.from_power_coeffs_i64(&[3, 0])).unwrap(), rat(7, 2));
        assert_eq!(f.evaluate(&ctx.generator()).unwrap(), rat(0, 1));
    }

    #[test]
    fn unit_enumeration_counts_and_distinctness() {
        let ctx = ctx32();
        let m1 = enumerate_units(&ctx, 1).unwrap();
        assert_eq!(m1.len(), 8);
        let m2 = enumerate_units(&ctx, 2).unwrap();
        assert_eq!(m2.len(), 72);
        let keys: HashSet<Vec<u64>> = m2.iter().map(|u| u.residue_key(2).unwrap()).collect();
        assert_eq!(keys.len(), 72);
        assert!(m2.iter().all(|u| u.is_unit()));

        let c53 = FieldContext::new(5, 3, 8).unwrap();
        assert_eq!(enumerate_units(&c53, 1).unwrap().len(), 124);
        assert_eq!(unit_class_count(&c53, 2).unwrap(), 15_500);
    }

    #[test]
    fn enumeration_budget_is_enforced() {
        let ctx = ctx32();
        // 9^8 = 43,046,721 > 10^7.
        match enumerate_units(&ctx, 8) {
            Err(Error::BudgetExceeded { level: 8, budget }) => {
                assert_eq!(budget, ENUMERATION_BUDGET)
            }
            other => panic!("expected budget error, got {other:?}"),
        }
    }

    #[test]
    fn level_table_classes_are_uniform() {
        let ctx = ctx32();
        let atlas = SphericalAtlas::new(&ctx);
        let t = atlas.level(2).unwrap();
        assert_eq!(t.units().len(), 72);
        assert_eq!(t.omegas().len(), 8);
        assert_eq!(t.xi_cosets().len(), 3);
        assert_eq!(t.radial_classes().len(), 3);
        assert_eq!(t.grid().len(), 72);
        // Count unit classes per xi coset: uniform 24 apiece.
        let mut counts: HashMap<Vec<u64>, usize> = HashMap::new();
        for c in t.units() {
            *counts.entry(c.xi_key.clone()).or_insert(0) += 1;
        }
        assert!(counts.values().all(|&c| c == 24));
        // Grid points are units and reproduce their own classes.
        for g in t.grid() {
            assert!(g.point.is_unit());
        }
    }

    #[test]
    fn spherical_route_matches_additive_route_on_basics() {
        let ctx = ctx32();
        let atlas = SphericalAtlas::new(&ctx);
        let cases = vec![
            CylinderFunction::single(Ball::new(ctx.zero(), 0).unwrap(), rat(1, 1)),
            CylinderFunction::single(Ball::new(ctx.zero(), 1).unwrap(), rat(3, 7)),
            CylinderFunction::single(Ball::new(ctx.zero(), -2).unwrap(), rat(2, 5)),
            unit_indicator(&ctx).unwrap(),
            CylinderFunction::single(Ball::new(ctx.one().shift(-2), 0).unwrap(), rat(9, 4)),
        ];
        for f in cases {
            assert_eq!(
                spherical_integrate(&atlas, &f).unwrap(),
                f.haar_integral(&ctx)
            );
        }
    }

    #[test]
    fn shell_measures_match_both_routes() {
        let ctx = ctx32();
        let atlas = SphericalAtlas::new(&ctx);
        for v in -2..=2 {
            let f = shell_indicator(&ctx, v).unwrap();
            let expected = rat(8, 9) * q_pow(&ctx, v);
            assert_eq!(f.haar_integral(&ctx), expected, "shell {v} additive");
            assert_eq!(
                spherical_integrate(&atlas, &f).unwrap(),
                expected,
                "shell {v} spherical"
            );
        }
    }

    #[test]
    fn spherical_route_matches_additive_route_randomized() {
        let ctx = ctx32();
        let atlas = SphericalAtlas::new(&ctx);
        let mut rng = ChaCha8Rng::seed_from_u64(0x4a11);
        for trial in 0..25 {
            let f = random_cylinder_function(&ctx, &mut rng, 2, 4).unwrap();
            assert_eq!(
                spherical_integrate(&atlas, &f).unwrap(),
                f.haar_integral(&ctx),
                "trial {trial}"
            );
        }
    }

    #[test]
    fn translation_leaves_both_routes_invariant() {
        let ctx = ctx32();
        let atlas = SphericalAtlas::new(&ctx);
        let mut rng = ChaCha8Rng::seed_from_u64(0x7ead);
        let f = random_cylinder_function(&ctx, &mut rng, 2, 3).unwrap();
        let base = f.haar_integral(&ctx);
        for _ in 0..5 {
            let a = ctx.random_integral(&mut rng).shift(rng.gen_range(-1..=0));
            let g = f.translate(&a).unwrap();
            assert_eq!(g.haar_integral(&ctx), base);
            assert_eq!(spherical_integrate(&atlas, &g).unwrap(), base);
        }
    }

    #[test]
    fn scalar_precomposition_scales_by_inverse_norm() {
        let ctx = ctx32();
        let mut rng = ChaCha8Rng::seed_from_u64(0x5ca1e);
        let f = random_cylinder_function(&ctx, &mut rng, 2, 3).unwrap();
        let base = f.haar_integral(&ctx);
        // lambda = p: ||p||^(-1) = q.
        let g = f.precompose_scalar(&ctx.scalar_from_i64(3)).unwrap();
        assert_eq!(g.haar_integral(&ctx), &base * q_pow(&ctx, 1));
        // A unit scalar leaves the integral unchanged.
        let h = f.precompose_scalar(&ctx.scalar_from_i64(7)).unwrap();
        assert_eq!(h.haar_integral(&ctx), base);
    }

    #[test]
    fn sigma_integration_basics() {
        let ctx = ctx32();
        let atlas = SphericalAtlas::new(&ctx);
        let ones = FiniteLevelAngular::constant(&atlas, 2, rat(1, 1)).unwrap();
        assert_eq!(sigma_haar_integrate(&atlas, &ones).unwrap(), rat(1, 1));

        // Indicator of the identity coset of Sigma_n at level 2: there are
        // three cosets, so the integral is 1/3.
        let id_key = ctx.one().residue_key(2).unwrap();
        let g = FiniteLevelAngular::tabulate(&atlas, 2, |_, xi| {
            Ok(if xi.residue_key(2).unwrap() == id_key {
                rat(1, 1)
            } else {
                rat(0, 1)
            })
        })
        .unwrap();
        assert_eq!(sigma_haar_integrate(&atlas, &g).unwrap(), rat(1, 3));

        // Direct coset-volume sum agrees with the pushforward average.
        let t = atlas.level(2).unwrap();
        let mut direct = <BigRational as Zero>::zero();
        let one_key = ctx.one().residue_key(1).unwrap();
        for (xkey, _) in t.xi_cosets() {
            direct += g.value(&one_key, xkey).unwrap() * t.xi_coset_volume();
        }
        assert_eq!(direct, rat(1, 3));
    }

    #[test]
    fn sigma_integration_is_translation_invariant() {
        let ctx = ctx32();
        let atlas = SphericalAtlas::new(&ctx);
        let t = atlas.level(2).unwrap();
        // A non-constant test function separating the three cosets.
        let mut labels: Vec<Vec<u64>> = t.xi_cosets().iter().map(|(k, _)| k.clone()).collect();
        labels.sort();
        let g = FiniteLevelAngular::tabulate(&atlas, 2, |_, xi| {
            let key = xi.residue_key(2).unwrap();
            let idx = labels.iter().position(|k| *k == key).unwrap();
            Ok(rat(idx as i64 + 1, 2))
        })
        .unwrap();
        let base = sigma_haar_integrate(&atlas, &g).unwrap();
        assert_eq!(base, rat(1 + 2 + 3, 3 * 2));

        // Left-translate by each coset representative and re-integrate.
        let one_key = ctx.one().residue_key(1).unwrap();
        for (_, xi0) in t.xi_cosets() {
            let translated = FiniteLevelAngular::tabulate(&atlas, 2, |_, xi| {
                let moved = xi0.mul(&ctx, xi).unwrap();
                Ok(g.value(&one_key, &moved.residue_key(2).unwrap()).unwrap().clone())
            })
            .unwrap();
            assert_eq!(sigma_haar_integrate(&atlas, &translated).unwrap(), base);
        }
    }

    #[test]
    fn constant_check_yields_p_to_one_minus_n() {
        let c32 = ctx32();
        let atlas32 = SphericalAtlas::new(&c32);
        assert_eq!(
            multiplicative_constant_check(&atlas32, 2).unwrap(),
            rat(1, 3)
        );

        let c52 = FieldContext::new(5, 2, 8).unwrap();
        let atlas52 = SphericalAtlas::new(&c52);
        assert_eq!(
            multiplicative_constant_check(&atlas52, 2).unwrap(),
            rat(1, 5)
        );
    }

    #[test]
    fn degree_one_degenerates_to_qp() {
        let ctx = FieldContext::new(7, 1, 6).unwrap();
        let atlas = SphericalAtlas::new(&ctx);
        let t = atlas.level(2).unwrap();
        assert_eq!(t.omegas().len(), 6);
        assert_eq!(t.xi_cosets().len(), 1);
        assert_eq!(t.units().len(), 42);
        assert_eq!(
            multiplicative_constant_check(&atlas, 2).unwrap(),
            rat(1, 1)
        );
        let f = unit_indicator(&ctx).unwrap();
        assert_eq!(
            spherical_integrate(&atlas, &f).unwrap(),
            f.haar_integral(&ctx)
        );
    }
}
