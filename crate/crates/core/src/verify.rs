//! Self-contained verification suites. Every check runs an independent
//! oracle — closed forms, brute-force enumeration, or statistical
//! controls — and reports a structured outcome, so the command-line
//! verifier and the integration batteries share one implementation.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::One;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distributions::{
    radial_covering_decompose, radial_covering_disjointness_check, radial_covering_reconstruct_at, pair,
    radial_character_sum, residue_at_exceptional, reconstruct_angular_density, CValue,
    HomogeneousDistribution, Quasicharacter, SExponent, UnitCharacter,
};
use crate::error::Result;
use crate::field::FieldContext;
use crate::haar::{
    multiplicative_constant_check, random_cylinder_function, spherical_integrate,
    unit_indicator, Ball, CylinderFunction, FiniteLevelAngular, SphericalAtlas,
};
use crate::levy::{radial_kernel_check, JumpLaw, LevyModel};
use crate::padic::power_rational;
use crate::spherical::{compose, decompose};

/// One verification step: a stable name, a verdict, and a human-readable
/// detail line with the numbers that justify the verdict.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn verdict(name: &str, passed: bool, detail: String) -> Self {
        CheckOutcome {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

/// Aggregate result of a verification run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VerificationReport {
    pub outcomes: Vec<CheckOutcome>,
    pub passed: bool,
}

impl VerificationReport {
    pub fn from_outcomes(outcomes: Vec<CheckOutcome>) -> Self {
        let passed = outcomes.iter().all(|o| o.passed);
        VerificationReport { outcomes, passed }
    }
}

/// Sizes and seed for a verification run. The defaults are scaled for an
/// interactive run; the integration batteries pass larger numbers.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VerifyConfig {
    pub seed: u64,
    pub decomposition_samples: u64,
    pub cylinder_functions: u64,
    pub residue_trials: u64,
    pub table_level: u32,
    pub simulation_paths: u64,
    pub simulation_horizon: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            seed: 42,
            decomposition_samples: 500,
            cylinder_functions: 20,
            residue_trials: 5,
            table_level: 2,
            simulation_paths: 4_000,
            simulation_horizon: 0.75,
        }
    }
}

fn rng_for(seed: u64, salt: u64) -> ChaCha8Rng {
    let mut bytes = [0u8; 32];
    bytes[0..8].copy_from_slice(&seed.to_le_bytes());
    bytes[8..16].copy_from_slice(&salt.to_le_bytes());
    bytes[16..24].copy_from_slice(&0x7665_7269_6679u64.to_le_bytes());
    ChaCha8Rng::from_seed(bytes)
}

/// The multiplicative normalization constant recovered from comparing the
/// flat and spherical integrals of the unit-group indicator must equal
/// p^(1 - n).
pub fn constant_recovery_check(atlas: &SphericalAtlas, m: u32) -> Result<CheckOutcome> {
    let ctx = atlas.ctx();
    let got = multiplicative_constant_check(atlas, m)?;
    let expected = power_rational(ctx.p(), 1 - i64::from(ctx.degree()));
    Ok(CheckOutcome::verdict(
        "normalization-constant recovery",
        got == expected,
        format!("level {m}: recovered {got}, expected {expected}"),
    ))
}

/// The unit group has measure 1 - 1/q, exactly.
pub fn unit_group_volume_check(ctx: &FieldContext) -> Result<CheckOutcome> {
    let f = unit_indicator(ctx)?;
    let flat = f.haar_integral(ctx);
    let atlas = SphericalAtlas::new(ctx);
    let spherical = spherical_integrate(
        &atlas,
        &f.map_values(|r| CValue::rational(r.clone())),
    )?;
    let q = BigRational::new(
        BigInt::from(ctx.q() - 1),
        BigInt::from(ctx.q()),
    );
    let ok = flat == q && spherical == CValue::rational(q.clone());
    Ok(CheckOutcome::verdict(
        "unit-group volume",
        ok,
        format!("flat {flat}, spherical {spherical}, expected {q}"),
    ))
}

/// The principal-unit shell of the positive radial line (a rank-one
/// context) has measure exactly 1/p.
pub fn radial_unit_shell_check(p: u64) -> Result<CheckOutcome> {
    let line = FieldContext::new(p, 1, 8)?;
    let ball = Ball::new(line.one(), 1)?;
    let got = ball.volume(&line);
    let expected = BigRational::new(BigInt::one(), BigInt::from(p));
    Ok(CheckOutcome::verdict(
        "radial unit-shell volume",
        got == expected,
        format!("measure of the shell around 1 at radius 1/p: {got}"),
    ))
}

/// Spherical coordinates are a bijection compatible with multiplication:
/// compose inverts decompose, and the radial coordinate is multiplicative,
/// both exactly at working precision.
pub fn coordinate_roundtrip_check(
    ctx: &FieldContext,
    samples: u64,
    seed: u64,
) -> Result<CheckOutcome> {
    let mut rng = rng_for(seed, 1);
    let mut failures = 0u64;
    for _ in 0..samples {
        let x = ctx.random_unit(&mut rng).shift(rng.gen_range(-2..3));
        let y = ctx.random_unit(&mut rng).shift(rng.gen_range(-2..3));
        let cx = decompose(ctx, &x)?;
        let back = compose(ctx, &cx)?;
        let floor = x
            .absolute_precision()
            .unwrap_or(i64::MAX)
            .min(back.absolute_precision().unwrap_or(i64::MAX));
        if !x.congruent_abs(&back, floor) {
            failures += 1;
            continue;
        }
        let cy = decompose(ctx, &y)?;
        let cxy = decompose(ctx, &x.mul(ctx, &y)?)?;
        let product = cx.r.mul(&cy.r)?;
        let rfloor = product
            .absolute_precision()
            .unwrap_or(i64::MAX)
            .min(cxy.r.absolute_precision().unwrap_or(i64::MAX));
        if !cxy.r.congruent_abs(&product, rfloor) {
            failures += 1;
        }
    }
    Ok(CheckOutcome::verdict(
        "coordinate roundtrip and radial multiplicativity",
        failures == 0,
        format!("{samples} random points, {failures} failures"),
    ))
}

/// The spherical-coordinate integral of a cylinder function equals its
/// flat integral, exactly, for random cylinder functions.
pub fn spherical_integration_check(
    atlas: &SphericalAtlas,
    functions: u64,
    seed: u64,
) -> Result<CheckOutcome> {
    let ctx = atlas.ctx();
    let mut rng = rng_for(seed, 2);
    let mut failures = 0u64;
    for _ in 0..functions {
        let f = random_cylinder_function(ctx, &mut rng, 2, 6)?;
        let flat = f.haar_integral(ctx);
        let spherical =
            spherical_integrate(atlas, &f.map_values(|r| CValue::rational(r.clone())))?;
        if spherical != CValue::rational(flat) {
            failures += 1;
        }
    }
    Ok(CheckOutcome::verdict(
        "spherical vs flat integration",
        failures == 0,
        format!("{functions} random cylinder functions, {failures} mismatches"),
    ))
}

/// A twisted radial sum vanishes identically (every shell dies by
/// character orthogonality), while the untwisted sum matches its closed
/// form against exact partial sums with the exact geometric remainder.
pub fn radial_tail_check(ctx: &FieldContext) -> Result<CheckOutcome> {
    let p = ctx.p();
    let n = ctx.degree();
    let twisted = UnitCharacter::new(1, 1, 0);
    let s = SExponent::Integer(1);
    let zero = radial_character_sum(p, n, &twisted, &s, 0)?;
    if !zero.is_structural_zero() {
        return Ok(CheckOutcome::verdict(
            "radial tail continuation",
            false,
            "twisted tail did not vanish structurally".into(),
        ));
    }
    // Untwisted: closed form versus exact partial sums. The closed form
    // C = p^(nu w - 1) / (1 - p^(-w)) satisfies
    // C - sum_(j=0..J) p^((nu - j) w - 1) = p^(-w (J + 1)) C exactly.
    let trivial = UnitCharacter::trivial();
    let nu = 1i64;
    let w = 1 + i64::from(n);
    let closed = match radial_character_sum(p, n, &trivial, &s, nu)? {
        CValue::Rat(r) => r,
        CValue::Cx(_) => {
            return Ok(CheckOutcome::verdict(
                "radial tail continuation",
                false,
                "integer data produced an inexact value".into(),
            ))
        }
    };
    let mut partial = BigRational::from_integer(BigInt::from(0));
    let j_max = 40i64;
    for j in 0..=j_max {
        partial += power_rational(p, (nu - j) * w - 1);
    }
    let remainder = &closed - &partial;
    let expected_remainder = power_rational(p, -w * (j_max + 1)) * &closed;
    let ok = remainder == expected_remainder;
    Ok(CheckOutcome::verdict(
        "radial tail continuation",
        ok,
        format!(
            "twisted sum vanished; untwisted closed form {closed} matches {} exact partial terms",
            j_max + 1
        ),
    ))
}

/// A random angular table with strictly positive rational values, at the
/// given level.
pub fn random_positive_table(
    atlas: &SphericalAtlas,
    m: u32,
    rng: &mut ChaCha8Rng,
) -> Result<FiniteLevelAngular<CValue>> {
    FiniteLevelAngular::tabulate(atlas, m, |_, _| {
        Ok(CValue::rational(BigRational::new(
            BigInt::from(rng.gen_range(1..10i64)),
            BigInt::from(rng.gen_range(1..5i64)),
        )))
    })
}

/// A random rational test function guaranteed to be nonzero at the
/// origin: random disjoint balls away from zero plus one small ball at
/// the origin.
pub fn random_test_function_charged_at_zero(
    ctx: &FieldContext,
    rng: &mut ChaCha8Rng,
) -> Result<CylinderFunction<CValue>> {
    let base = random_cylinder_function(ctx, rng, 2, 5)?;
    let keep: Vec<(Ball, BigRational)> = base
        .terms()
        .iter()
        .filter(|(b, _)| !matches!(b.contains(&ctx.zero()), Ok(true)))
        .cloned()
        .collect();
    let deepest = keep
        .iter()
        .map(|(b, _)| b.radius_exponent())
        .max()
        .unwrap_or(0);
    let mut terms = keep;
    terms.push((
        Ball::new(ctx.zero(), deepest + 2)?,
        BigRational::new(BigInt::from(rng.gen_range(1..7i64)), BigInt::one()),
    ));
    Ok(CylinderFunction::from_disjoint(terms)?.map_values(|r| CValue::rational(r.clone())))
}

/// The limit (s + n) <pi F, phi> as s approaches the exceptional point
/// equals the closed-form residue, within 1e-6 relative error.
pub fn residue_limit_check(
    atlas: &SphericalAtlas,
    trials: u64,
    seed: u64,
) -> Result<CheckOutcome> {
    let ctx = atlas.ctx();
    let n = f64::from(ctx.degree());
    let mut rng = rng_for(seed, 3);
    let pi_exceptional = Quasicharacter::new(
        ctx,
        SExponent::Integer(-i64::from(ctx.degree())),
        UnitCharacter::trivial(),
    );
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let table = random_positive_table(atlas, 1, &mut rng)?;
        let phi = random_test_function_charged_at_zero(ctx, &mut rng)?;
        let residue = residue_at_exceptional(ctx, &pi_exceptional, &table, &phi)?.to_complex();
        let eps = 1e-8;
        let near = pi_exceptional.with_s(SExponent::Complex { re: -n + eps, im: 0.0 });
        let h = HomogeneousDistribution::new(near, table);
        let value = pair(atlas, &h, &phi)?.to_complex();
        let limit = value * eps;
        let rel = (limit - residue).norm() / residue.norm();
        worst = worst.max(rel);
    }
    Ok(CheckOutcome::verdict(
        "pole residue limit",
        worst < 1e-6,
        format!("{trials} random data sets, worst relative error {worst:.3e}"),
    ))
}

/// Reconstructing the angular table of a homogeneous functional from its
/// pairings recovers the table exactly for rational data, and the
/// reconstruction reproduces the functional on a battery of random test
/// functions.
pub fn reconstruction_check(
    atlas: &SphericalAtlas,
    m: u32,
    seed: u64,
) -> Result<CheckOutcome> {
    let ctx = atlas.ctx();
    let mut rng = rng_for(seed, 4);
    let pi = Quasicharacter::new(ctx, SExponent::Integer(1), UnitCharacter::trivial());
    let table = random_positive_table(atlas, m, &mut rng)?;
    let h = HomogeneousDistribution::new(pi.clone(), table.clone());
    let battery: Vec<CylinderFunction<CValue>> = (0..3)
        .map(|_| {
            random_cylinder_function(ctx, &mut rng, 2, 5)
                .map(|f| f.map_values(|r| CValue::rational(r.clone())))
        })
        .collect::<Result<_>>()?;
    let recovered = reconstruct_angular_density(
        atlas,
        |phi| pair(atlas, &h, phi),
        &pi,
        m,
        &battery,
        1e-10,
    )?;
    let level = atlas.level(m)?;
    let mut mismatches = 0usize;
    for (okey, _) in level.omegas() {
        for (xkey, _) in level.xi_cosets() {
            if table.value(okey, xkey)? != recovered.value(okey, xkey)? {
                mismatches += 1;
            }
        }
    }
    Ok(CheckOutcome::verdict(
        "functional reconstruction roundtrip",
        mismatches == 0,
        format!(
            "level {m}: {} angular cells recovered, {mismatches} mismatches",
            table.len()
        ),
    ))
}

/// The radial covering decomposition of a test function reconstructs it
/// pointwise, exactly, at the origin and on random points across shells.
pub fn covering_check(
    ctx: &FieldContext,
    functions: u64,
    seed: u64,
) -> Result<CheckOutcome> {
    let mut rng = rng_for(seed, 5);
    let mut failures = 0u64;
    for _ in 0..functions {
        let phi = random_cylinder_function(ctx, &mut rng, 2, 5)?;
        let dec = radial_covering_decompose(ctx, &phi)?;
        radial_covering_disjointness_check(&dec)?;
        let expected_zero = phi.evaluate(&ctx.zero())?;
        if radial_covering_reconstruct_at(ctx, &phi, &dec, &ctx.zero())? != expected_zero {
            failures += 1;
            continue;
        }
        for v in -3..=2 {
            for _ in 0..3 {
                let x = ctx.random_unit(&mut rng).shift(v);
                let direct = phi.evaluate(&x)?;
                let rebuilt = radial_covering_reconstruct_at(ctx, &phi, &dec, &x)?;
                if direct != rebuilt {
                    failures += 1;
                }
            }
        }
    }
    Ok(CheckOutcome::verdict(
        "radial covering reconstruction",
        failures == 0,
        format!("{functions} random test functions, {failures} pointwise mismatches"),
    ))
}

/// The simulated radial law does not depend on the angular coordinates of
/// the start (two rotated starts pass the two-sample comparison), and the
/// angularly biased control law is detected.
pub fn simulation_invariance_check(
    ctx: &FieldContext,
    paths: u64,
    horizon: f64,
    seed: u64,
) -> Result<CheckOutcome> {
    let model = LevyModel::new(ctx, 1.0, -2, 2, 2.0)?;
    let x0 = ctx.one();
    let omega0 = {
        let u = ctx.from_power_coeffs_i64(&[1, 1]);
        u.teichmuller(ctx)?
    };
    let x1 = omega0.mul(ctx, &x0)?;
    let invariant = radial_kernel_check(
        &model,
        ctx,
        JumpLaw::RotationInvariant,
        &x0,
        &x1,
        horizon,
        paths,
        seed,
    )?;
    let biased = radial_kernel_check(
        &model,
        ctx,
        JumpLaw::OmegaBiased,
        &x0,
        &x1,
        horizon,
        paths,
        seed.wrapping_add(1),
    )?;
    let ok = invariant.passes && !biased.passes;
    Ok(CheckOutcome::verdict(
        "radial-law start independence with negative control",
        ok,
        format!(
            "invariant law p = {:.4} (needs > {}), biased control p = {:.3e} (needs rejection)",
            invariant.chi_square.p_value,
            crate::levy::ALPHA_LEVEL,
            biased.chi_square.p_value
        ),
    ))
}

/// Run every suite against one field context.
pub fn run_all(ctx: &FieldContext, cfg: &VerifyConfig) -> Result<VerificationReport> {
    let atlas = SphericalAtlas::new(ctx);
    let outcomes = vec![
        constant_recovery_check(&atlas, cfg.table_level)?,
        unit_group_volume_check(ctx)?,
        radial_unit_shell_check(ctx.p())?,
        coordinate_roundtrip_check(ctx, cfg.decomposition_samples, cfg.seed)?,
        spherical_integration_check(&atlas, cfg.cylinder_functions, cfg.seed)?,
        radial_tail_check(ctx)?,
        residue_limit_check(&atlas, cfg.residue_trials, cfg.seed)?,
        reconstruction_check(&atlas, cfg.table_level, cfg.seed)?,
        covering_check(ctx, cfg.cylinder_functions, cfg.seed)?,
        simulation_invariance_check(
            ctx,
            cfg.simulation_paths,
            cfg.simulation_horizon,
            cfg.seed,
        )?,
    ];
    Ok(VerificationReport::from_outcomes(outcomes))
}
