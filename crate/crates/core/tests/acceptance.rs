//! Acceptance suite: the end-to-end guarantees of the library, one test
//! per guarantee. Each test prints a single PASS/FAIL line (visible with
//! --nocapture) before asserting, so a failing run still shows which
//! guarantee broke and why.

use std::sync::Mutex;
use std::time::{Duration, Instant};

use num_bigint::BigInt;
use num_complex::Complex64;
use num_rational::BigRational;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use padic_spherical::distributions::{
    angular_mass, radial_covering_decompose, radial_covering_disjointness_check, radial_covering_reconstruct_at, pair,
    pairing_components, reconstruct_angular_density, CValue, HomogeneousDistribution, Quasicharacter,
    SExponent, UnitCharacter,
};
use padic_spherical::field::{ExtElement, FieldContext};
use padic_spherical::haar::{
    multiplicative_constant_check, random_cylinder_function, spherical_integrate,
    unit_indicator, Ball, SphericalAtlas,
};
use padic_spherical::levy::{radial_kernel_check, JumpLaw, LevyModel};
use padic_spherical::padic::PadicScalar;
use padic_spherical::spherical::{compose, decompose};
use padic_spherical::verify::{random_positive_table, random_test_function_charged_at_zero};

/// Tests with wall-clock budgets must not share the machine with their
/// siblings: each test holds this gate for its whole body, so the suite
/// runs one guarantee at a time under any --test-threads setting.
static GATE: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    GATE.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

fn report(name: &str, passed: bool, detail: &str) {
    println!("{} {name} — {detail}", if passed { "PASS" } else { "FAIL" });
    assert!(passed, "{name}: {detail}");
}

fn rational(num: i64, den: i64) -> BigRational {
    BigRational::new(BigInt::from(num), BigInt::from(den))
}

/// The spherical change-of-variables constant, recovered by brute-force
/// unit enumeration at level 2, equals exactly p^(1-n) on three fields.
#[test]
fn normalization_constant_is_recovered_by_enumeration() {
    let _serial = serial();
    let mut details = Vec::new();
    let mut passed = true;
    for (p, n, den) in [(3u64, 2u32, 3i64), (5, 2, 5), (5, 3, 25)] {
        let start = Instant::now();
        let ctx = FieldContext::new(p, n, 8).unwrap();
        let atlas = SphericalAtlas::new(&ctx);
        let recovered = multiplicative_constant_check(&atlas, 2).unwrap();
        let elapsed = start.elapsed();
        let ok = recovered == rational(1, den) && elapsed < Duration::from_secs(10);
        passed &= ok;
        details.push(format!(
            "({p},{n}): {recovered} in {:.2}s",
            elapsed.as_secs_f64()
        ));
    }
    report(
        "normalization constant recovered exactly at level 2",
        passed,
        &details.join("; "),
    );
}

/// The unit group of K has Haar volume 1 - q^(-1) and the unit shell of
/// the positive radial line has volume p^(-1), both as exact rationals.
#[test]
fn fundamental_volume_identities_hold_exactly() {
    let _serial = serial();
    let mut passed = true;
    let mut details = Vec::new();
    for (p, n) in [(3u64, 2u32), (5, 2)] {
        let ctx = FieldContext::new(p, n, 8).unwrap();
        let q = ctx.q() as i64;
        let f = unit_indicator(&ctx).unwrap();
        let flat = f.haar_integral(&ctx);
        let expected = rational(q - 1, q);
        passed &= flat == expected;

        let line = FieldContext::new(p, 1, 8).unwrap();
        let shell = Ball::new(line.one(), 1).unwrap().volume(&line);
        passed &= shell == rational(1, p as i64);
        details.push(format!("q = {q}: |U| = {flat}, radial unit shell = {shell}"));
    }
    report(
        "unit-group and radial unit-shell volumes",
        passed,
        &details.join("; "),
    );
}

/// Spherical-coordinate integration agrees exactly with flat ball-volume
/// integration on 100 random cylinder functions per field.
#[test]
fn spherical_integration_matches_flat_integration() {
    let _serial = serial();
    let mut passed = true;
    let mut details = Vec::new();
    for (p, n, seed) in [(3u64, 2u32, 31u64), (5, 2, 52)] {
        let start = Instant::now();
        let ctx = FieldContext::new(p, n, 8).unwrap();
        let atlas = SphericalAtlas::new(&ctx);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mismatches = 0usize;
        for _ in 0..100 {
            let f = random_cylinder_function(&ctx, &mut rng, 2, 6).unwrap();
            let flat = f.haar_integral(&ctx);
            let spherical =
                spherical_integrate(&atlas, &f.map_values(|r| CValue::rational(r.clone())))
                    .unwrap();
            if spherical != CValue::rational(flat) {
                mismatches += 1;
            }
        }
        let elapsed = start.elapsed();
        passed &= mismatches == 0 && elapsed < Duration::from_secs(60);
        details.push(format!(
            "({p},{n}): 100 functions, {mismatches} mismatches, {:.1}s",
            elapsed.as_secs_f64()
        ));
    }
    report(
        "spherical vs flat integration on random functions",
        passed,
        &details.join("; "),
    );
}

fn congruent_elements(a: &ExtElement, b: &ExtElement) -> bool {
    match (a.absolute_precision(), b.absolute_precision()) {
        (Some(pa), Some(pb)) => a.congruent_abs(b, pa.min(pb)),
        _ => a.is_zero() && b.is_zero(),
    }
}

fn congruent_scalars(a: &PadicScalar, b: &PadicScalar) -> bool {
    match (a.absolute_precision(), b.absolute_precision()) {
        (Some(pa), Some(pb)) => a.congruent_abs(b, pa.min(pb)),
        _ => false,
    }
}

/// The coordinate maps are mutually inverse and turn multiplication into
/// componentwise multiplication, on 10^4 random elements at precision 8;
/// and the full enumeration of the units mod p^2 for q = 9 pushes forward
/// bijectively onto (leading class) x (norm-one coset) x (radial coset).
#[test]
fn coordinates_form_a_multiplicative_bijection() {
    let _serial = serial();
    let ctx = FieldContext::new(3, 2, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut roundtrip_failures = 0usize;
    let mut product_failures = 0usize;
    let mut previous: Option<ExtElement> = None;
    for i in 0..10_000 {
        let v = (i % 7) as i64 - 3;
        let x = ctx.random_unit(&mut rng).shift(v);
        let sc = decompose(&ctx, &x).unwrap();
        let back = compose(&ctx, &sc).unwrap();
        if !congruent_elements(&x, &back) {
            roundtrip_failures += 1;
        }
        if let Some(y) = previous.take() {
            let sy = decompose(&ctx, &y).unwrap();
            let product = x.mul(&ctx, &y).unwrap();
            let sp = decompose(&ctx, &product).unwrap();
            let omega_prod = sc.omega.mul(&ctx, &sy.omega).unwrap();
            let xi_prod = sc.xi.mul(&ctx, &sy.xi).unwrap();
            let r_prod = sc.r.mul(&sy.r).unwrap();
            if !congruent_elements(&sp.omega, &omega_prod)
                || !congruent_elements(&sp.xi, &xi_prod)
                || !congruent_scalars(&sp.r, &r_prod)
            {
                product_failures += 1;
            }
        } else {
            previous = Some(x);
        }
    }

    // Full enumeration of the 72 unit classes mod p^2 for q = 9: the map
    // u |-> (omega mod p, xi mod p^2, r mod p^2) hits each of the
    // 8 x 3 x 3 = 72 product classes exactly once.
    let mut seen = std::collections::BTreeMap::<(Vec<u64>, Vec<u64>, u64), u64>::new();
    let mut omega_keys = std::collections::BTreeSet::new();
    let mut xi_keys = std::collections::BTreeSet::new();
    let mut r_keys = std::collections::BTreeSet::new();
    let mut units = 0u64;
    for c0 in 0..9i64 {
        for c1 in 0..9i64 {
            if c0 % 3 == 0 && c1 % 3 == 0 {
                continue;
            }
            units += 1;
            let u = ctx.from_power_coeffs_i64(&[c0, c1]);
            let sc = decompose(&ctx, &u).unwrap();
            let okey = sc.omega.residue_key(1).unwrap();
            let xkey = sc.xi.residue_key(2).unwrap();
            let rkey = (sc.r.lift_integer().unwrap() % BigInt::from(9))
                .try_into()
                .unwrap();
            omega_keys.insert(okey.clone());
            xi_keys.insert(xkey.clone());
            r_keys.insert(rkey);
            *seen.entry((okey, xkey, rkey)).or_default() += 1;
        }
    }
    let uniform = seen.len() == 72 && seen.values().all(|&c| c == 1);
    let component_counts_ok =
        omega_keys.len() == 8 && xi_keys.len() == 3 && r_keys.len() == 3 && units == 72;

    let passed = roundtrip_failures == 0
        && product_failures == 0
        && uniform
        && component_counts_ok;
    report(
        "coordinate bijection and componentwise multiplication",
        passed,
        &format!(
            "10^4 samples: {roundtrip_failures} roundtrip / {product_failures} product failures; \
             mod-p^2 enumeration: {} classes onto {} x {} x {} cosets, uniform: {uniform}",
            units,
            omega_keys.len(),
            xi_keys.len(),
            r_keys.len()
        ),
    );
}

/// Radial character sums: a character that is nontrivial on the principal
/// units kills every shell (exact zero, confirmed by brute-force
/// orthogonality sums), while the trivial character matches its geometric
/// closed form against brute-force partial sums for Re s > -n.
#[test]
fn radial_character_sums_obey_the_dichotomy() {
    let _serial = serial();
    let p = 3u64;
    let n = 2u32;
    let lnp = (p as f64).ln();
    let mut passed = true;
    let mut worst: f64 = 0.0;

    let exponents = [
        SExponent::Integer(-1),
        SExponent::Integer(0),
        SExponent::Integer(1),
        SExponent::Integer(2),
        SExponent::complex(-1.5, 0.0),
        SExponent::complex(-0.5, 0.8),
        SExponent::complex(0.25, -1.2),
        SExponent::complex(1.0, 2.5),
    ];

    // Nontrivial principal restriction: structural zero, and the
    // brute-force character sum over the principal classes vanishes.
    for level in [1u32, 2] {
        for a in [1u64, 2] {
            let theta = UnitCharacter::new(level, a, 0);
            for s in &exponents {
                for nu in [-2i64, 0, 1] {
                    let total = padic_spherical::distributions::radial_character_sum(
                        p, n, &theta, s, nu,
                    )
                    .unwrap();
                    passed &= total.is_structural_zero();
                }
            }
            let classes = 3i64.pow(level) as u64;
            let mut brute = Complex64::new(0.0, 0.0);
            for c in 0..classes {
                let u = PadicScalar::from_integer(
                    p,
                    8,
                    &BigInt::from(1 + (p as i64) * (c as i64)),
                );
                brute += theta.eval_principal(&u).unwrap().to_complex();
            }
            passed &= brute.norm() < 1e-12;
        }
    }

    // Trivial character: closed form p^(nu w - 1) / (1 - p^(-w)), w = s+n,
    // against 400 brute-force terms of the shell expansion.
    let trivial = UnitCharacter::trivial();
    for s in &exponents {
        for nu in [-2i64, 0, 1] {
            let closed = padic_spherical::distributions::radial_character_sum(
                p, n, &trivial, s, nu,
            )
            .unwrap()
            .to_complex();
            let w = s.to_complex() + Complex64::new(n as f64, 0.0);
            let mut partial = Complex64::new(0.0, 0.0);
            for k in 0..400i64 {
                let exponent = w * Complex64::new((nu - k) as f64, 0.0)
                    - Complex64::new(1.0, 0.0);
                partial += (exponent * lnp).exp();
            }
            let err = (closed - partial).norm() / closed.norm().max(1.0);
            worst = worst.max(err);
            passed &= err < 1e-12;
        }
    }

    report(
        "radial character sum dichotomy",
        passed,
        &format!(
            "twisted sums all structurally zero; trivial closed form vs 400-term \
             partial sums, worst relative error {worst:.3e}"
        ),
    );
}

/// Near the exceptional exponent the pairing has a simple pole whose
/// residue is phi(0) (q-1) <F> / (p^n ln p): the numeric limit of
/// (s+n) <f, phi> at s = -n + 1e-8 matches the closed formula within
/// 1e-6 relative error on 10 random data sets.
#[test]
fn pairing_pole_residues_match_the_mass_formula() {
    let _serial = serial();
    let ctx = FieldContext::new(3, 2, 8).unwrap();
    let atlas = SphericalAtlas::new(&ctx);
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let n = ctx.degree() as f64;
    let q_minus_one = (ctx.q() - 1) as f64;
    let lnp = (ctx.p() as f64).ln();
    let eps = 1e-8;
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let table = random_positive_table(&atlas, 2, &mut rng).unwrap();
        let phi = random_test_function_charged_at_zero(&ctx, &mut rng).unwrap();
        let pi = Quasicharacter::new(
            &ctx,
            SExponent::Integer(-(ctx.degree() as i64)),
            UnitCharacter::trivial(),
        );
        let h = HomogeneousDistribution::new(pi, table.clone());
        let comps = pairing_components(&atlas, &h, &phi).unwrap();
        let near = comps
            .eval(&SExponent::complex(-n + eps, 0.0))
            .unwrap()
            .to_complex();
        let limit = near * eps;
        let phi0 = phi.evaluate(&ctx.zero()).unwrap().to_complex();
        let mass = angular_mass(&table).to_complex();
        let expected = phi0 * q_minus_one * mass / ((ctx.p() as f64).powf(n) * lnp);
        let rel = (limit - expected).norm() / expected.norm();
        worst = worst.max(rel);
    }
    report(
        "pole residue equals the mass formula",
        worst < 1e-6,
        &format!("10 random data sets, worst relative error {worst:.3e}"),
    );
}

/// A homogeneous rotation-finite functional determines its angular
/// density: reconstruction from pairing values alone recovers the exact
/// table at level 2 for 10 quasicharacters mixing integer, twisted, and
/// complex exponents.
#[test]
fn homogeneous_functionals_determine_their_angular_density() {
    let _serial = serial();
    let ctx = FieldContext::new(3, 2, 8).unwrap();
    let atlas = SphericalAtlas::new(&ctx);
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let cases: Vec<(SExponent, UnitCharacter)> = vec![
        (SExponent::Integer(1), UnitCharacter::trivial()),
        (SExponent::Integer(0), UnitCharacter::trivial()),
        (SExponent::Integer(-1), UnitCharacter::trivial()),
        (SExponent::Integer(3), UnitCharacter::trivial()),
        (SExponent::Integer(2), UnitCharacter::new(1, 0, 1)),
        (SExponent::Integer(1), UnitCharacter::new(1, 1, 0)),
        (SExponent::Integer(-1), UnitCharacter::new(1, 2, 3)),
        (SExponent::complex(0.5, 0.25), UnitCharacter::trivial()),
        (SExponent::complex(-0.75, 1.5), UnitCharacter::new(1, 1, 1)),
        (SExponent::complex(2.0, -0.5), UnitCharacter::trivial()),
    ];
    let level = atlas.level(2).unwrap();
    let mut passed = true;
    let mut exact_cases = 0usize;
    let mut worst: f64 = 0.0;
    for (s, theta) in cases {
        let pi = Quasicharacter::new(&ctx, s, theta.clone());
        assert!(!pi.is_exceptional(), "test cases must avoid the pole");
        let table = random_positive_table(&atlas, 2, &mut rng).unwrap();
        let h = HomogeneousDistribution::new(pi.clone(), table.clone());
        let battery: Vec<_> = (0..3)
            .map(|_| {
                random_cylinder_function(&ctx, &mut rng, 2, 5)
                    .unwrap()
                    .map_values(|r| CValue::rational(r.clone()))
            })
            .collect();
        let recovered =
            reconstruct_angular_density(&atlas, |phi| pair(&atlas, &h, phi), &pi, 2, &battery, 1e-10)
                .unwrap();
        let exact_expected = theta == UnitCharacter::trivial()
            && matches!(s, SExponent::Integer(_));
        let mut case_ok = true;
        for (okey, _) in level.omegas() {
            for (xkey, _) in level.xi_cosets() {
                let original = table.value(okey, xkey).unwrap();
                let rebuilt = recovered.value(okey, xkey).unwrap();
                if exact_expected {
                    case_ok &= original == rebuilt;
                } else {
                    let diff = (original.to_complex() - rebuilt.to_complex()).norm();
                    let scale = original.to_complex().norm().max(1.0);
                    worst = worst.max(diff / scale);
                    case_ok &= diff <= 1e-10 * scale;
                }
            }
        }
        exact_cases += usize::from(exact_expected && case_ok);
        passed &= case_ok;
    }
    report(
        "angular density recovered from pairing values",
        passed,
        &format!(
            "10 quasicharacters at level 2; {exact_cases} exact rational cases, \
             worst numeric deviation {worst:.3e}"
        ),
    );
}

/// The radial covering decomposition rebuilds every test function
/// pointwise — exactly — on the full level-3 enumeration grid swept
/// across valuations, for 50 random functions.
#[test]
fn radial_covering_rebuilds_functions_on_the_full_grid() {
    let _serial = serial();
    let ctx = FieldContext::new(3, 2, 8).unwrap();
    let atlas = SphericalAtlas::new(&ctx);
    let table = atlas.level(3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(81);
    let mut mismatches = 0usize;
    let mut points = 0usize;
    for _ in 0..50 {
        let phi = random_cylinder_function(&ctx, &mut rng, 2, 5).unwrap();
        let dec = radial_covering_decompose(&ctx, &phi).unwrap();
        radial_covering_disjointness_check(&dec).unwrap();
        let zero = ctx.zero();
        points += 1;
        if radial_covering_reconstruct_at(&ctx, &phi, &dec, &zero).unwrap()
            != phi.evaluate(&zero).unwrap()
        {
            mismatches += 1;
        }
        for v in -3..=3i64 {
            for gp in table.grid() {
                let x = gp.point.shift(v);
                points += 1;
                let direct = phi.evaluate(&x).unwrap();
                let rebuilt = radial_covering_reconstruct_at(&ctx, &phi, &dec, &x).unwrap();
                if direct != rebuilt {
                    mismatches += 1;
                }
            }
        }
    }
    report(
        "radial covering pointwise reconstruction",
        mismatches == 0,
        &format!(
            "50 random functions on {points} grid points (level-3 grid of {} cells \
             over 7 valuations), {mismatches} mismatches",
            table.grid().len()
        ),
    );
}

/// With 10^5 paths per arm, the terminal radial law is indistinguishable
/// across the starts x, omega0 x, and xi0 x (all p-values above 0.001),
/// while the angularly biased control law is rejected — in under 5 minutes.
#[test]
fn simulated_radial_law_ignores_rotations_of_the_start() {
    let _serial = serial();
    let start = Instant::now();
    let ctx = FieldContext::new(3, 2, 8).unwrap();
    let model = LevyModel::new(&ctx, 1.0, -2, 2, 2.0).unwrap();
    let trials = 100_000u64;
    let horizon = 0.75;
    let x0 = ctx.one();
    let omega0 = ctx.from_power_coeffs_i64(&[1, 1]).teichmuller(&ctx).unwrap();
    let u = ctx.from_power_coeffs_i64(&[1, 1]);
    let xi0 = u.frobenius(&ctx).unwrap().div(&ctx, &u).unwrap();

    let omega_arm = radial_kernel_check(
        &model,
        &ctx,
        JumpLaw::RotationInvariant,
        &x0,
        &omega0.mul(&ctx, &x0).unwrap(),
        horizon,
        trials,
        9_001,
    )
    .unwrap();
    let xi_arm = radial_kernel_check(
        &model,
        &ctx,
        JumpLaw::RotationInvariant,
        &x0,
        &xi0.mul(&ctx, &x0).unwrap(),
        horizon,
        trials,
        9_002,
    )
    .unwrap();
    let control = radial_kernel_check(
        &model,
        &ctx,
        JumpLaw::OmegaBiased,
        &x0,
        &omega0.mul(&ctx, &x0).unwrap(),
        horizon,
        trials,
        9_003,
    )
    .unwrap();
    let elapsed = start.elapsed();
    let passed = omega_arm.passes
        && xi_arm.passes
        && !control.passes
        && elapsed < Duration::from_secs(300);
    report(
        "radial law is rotation-invariant with negative control",
        passed,
        &format!(
            "10^5 paths per arm: leading-class rotation p = {:.4}, norm-one rotation \
             p = {:.4}, biased control p = {:.3e} (rejected: {}), {:.0}s",
            omega_arm.chi_square.p_value,
            xi_arm.chi_square.p_value,
            control.chi_square.p_value,
            !control.passes,
            elapsed.as_secs_f64()
        ),
    );
}
