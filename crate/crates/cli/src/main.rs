//! Command-line entry point: field construction, spherical decomposition,
//! exact Haar integration, distribution pairing, jump-process simulation,
//! and the verification suites, with JSON output for scripting.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage error,
//! 3 domain-precondition error.

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use num_rational::BigRational;
use serde::{Deserialize, Serialize};

use padic_spherical::distributions::{
    pair as pair_value, CValue, HomogeneousDistribution, Quasicharacter, SExponent,
    UnitCharacter,
};
use padic_spherical::error::Error as CoreError;
use padic_spherical::exec::configure_thread_pool;
use padic_spherical::field::{ContextDescriptor, ExtElement, FieldContext};
use padic_spherical::haar::{
    shell_indicator, spherical_integrate, unit_indicator, Ball, CylinderFunction,
    FiniteLevelAngular, SphericalAtlas,
};
use padic_spherical::levy::{
    markov_diagnostic, radial_kernel_check, simulate_batch, JumpLaw, KernelCheckReport,
    LevyModel, MarkovReport,
};
use padic_spherical::padic::PadicScalar;
use padic_spherical::spherical::decompose;
use padic_spherical::verify::{run_all, VerificationReport, VerifyConfig};

/// Environment variable holding the default worker-thread count for the
/// `simulate` and `verify` subcommands.
const THREADS_ENV: &str = "PADIC_SPHERICAL_THREADS";

#[derive(Parser)]
#[command(
    name = "padic-sph",
    version,
    about = "Exact spherical-coordinate analysis on unramified p-adic extension fields"
)]
struct Cli {
    /// Output format.
    #[arg(long, value_enum, default_value_t = Format::Json, global = true)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Print the field parameters: q, modulus, and basic volumes.
    FieldInfo(ContextArgs),
    /// Spherical coordinates (omega, xi, r) of an element.
    Decompose(DecomposeArgs),
    /// Exact Haar integral of a cylinder function.
    Integrate(IntegrateArgs),
    /// Pair a homogeneous distribution with a test function.
    Pair(PairArgs),
    /// Simulate jump paths and run the radial-law checks.
    Simulate(SimulateArgs),
    /// Run the verification suites; exits 1 on any failed check.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct ContextArgs {
    /// Odd prime p (p = 2 is excluded by the construction).
    #[arg(long)]
    p: u64,
    /// Extension degree n, coprime to p.
    #[arg(long)]
    n: u32,
    /// Working precision: elements are tracked mod p^precision.
    #[arg(long, default_value_t = 8)]
    precision: u32,
    /// Override the modulus: low coefficients c_0,...,c_(n-1) of a monic
    /// degree-n polynomial irreducible mod p. Defaults to the canonical
    /// (lexicographically smallest) choice.
    #[arg(long, value_delimiter = ',')]
    modulus: Option<Vec<u64>>,
    /// Seed recorded in the output; drives every randomized subcommand.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct DecomposeArgs {
    #[command(flatten)]
    ctx: ContextArgs,
    /// Power-basis integer coefficients c_0,...,c_(n-1) of the element.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
    coeffs: Vec<i64>,
    /// Scale the element by p^shift.
    #[arg(long, default_value_t = 0, allow_hyphen_values = true)]
    shift: i64,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Preset {
    /// Indicator of the integer ball O.
    IntegerBall,
    /// Indicator of the unit group O^x.
    UnitGroup,
    /// Indicator of the shell of norm q^(--shell).
    Shell,
}

#[derive(Args)]
struct IntegrateArgs {
    #[command(flatten)]
    ctx: ContextArgs,
    /// Built-in test function.
    #[arg(long, value_enum, conflicts_with = "function")]
    preset: Option<Preset>,
    /// Norm exponent for --preset shell (the shell where ||x|| = q^shell).
    #[arg(long, default_value_t = 0, allow_hyphen_values = true)]
    shell: i64,
    /// Path to a JSON cylinder-function description (see README).
    #[arg(long)]
    function: Option<PathBuf>,
}

#[derive(Args)]
struct PairArgs {
    #[command(flatten)]
    ctx: ContextArgs,
    /// Homogeneity degree: an integer, a real, or "re+imi".
    #[arg(long, default_value = "1", allow_hyphen_values = true)]
    s: String,
    /// Unit-character level (0 = trivial character).
    #[arg(long, default_value_t = 0)]
    theta_level: u32,
    /// Principal-part exponent of the unit character.
    #[arg(long, default_value_t = 0)]
    theta_principal: u64,
    /// Leading-class exponent of the unit character.
    #[arg(long, default_value_t = 0)]
    theta_teich: u64,
    /// Level of the constant angular density table.
    #[arg(long, default_value_t = 1)]
    table_level: u32,
    /// Constant angular density value ("a/b").
    #[arg(long, default_value = "1")]
    density: String,
    /// Built-in test function (default: integer-ball).
    #[arg(long, value_enum, conflicts_with = "function")]
    preset: Option<Preset>,
    /// Norm exponent for --preset shell (the shell where ||x|| = q^shell).
    #[arg(long, default_value_t = 0, allow_hyphen_values = true)]
    shell: i64,
    /// Path to a JSON cylinder-function description.
    #[arg(long)]
    function: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum LawArg {
    /// Shell choice independent of the current state.
    Invariant,
    /// Negative control: shell choice depends on the angular coordinate.
    Biased,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    ctx: ContextArgs,
    /// Stability index alpha > 0 of the shell rates C q^(-alpha k).
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    /// Inclusive jump-size range "kmin..kmax" (jump sizes q^k).
    #[arg(long, default_value = "-3..3", allow_hyphen_values = true)]
    shells: String,
    /// Total jump rate (the rates are normalized to sum to this).
    #[arg(long, default_value_t = 1.0)]
    rate: f64,
    /// Number of independent paths.
    #[arg(long, default_value_t = 10_000)]
    paths: u64,
    /// Time horizon.
    #[arg(long = "T", default_value_t = 1.0)]
    horizon: f64,
    /// Jump law.
    #[arg(long, value_enum, default_value_t = LawArg::Invariant)]
    law: LawArg,
    /// Starting point coefficients (default: 1).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    coeffs: Option<Vec<i64>>,
    /// Scale the starting point by p^shift.
    #[arg(long, default_value_t = 0, allow_hyphen_values = true)]
    shift: i64,
    /// Times "t1,t2,t3" for the conditional-independence diagnostic.
    #[arg(long, allow_hyphen_values = true)]
    markov: Option<String>,
    /// Also write the JSON report to this file.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    ctx: ContextArgs,
    /// Random elements for the coordinate roundtrip check.
    #[arg(long, default_value_t = 500)]
    samples: u64,
    /// Random cylinder functions for the integration and covering checks.
    #[arg(long, default_value_t = 20)]
    functions: u64,
    /// Random data sets for the pole-residue limit check.
    #[arg(long, default_value_t = 5)]
    residue_trials: u64,
    /// Angular table level for the reconstruction checks.
    #[arg(long, default_value_t = 2)]
    level: u32,
    /// Paths per arm of the simulation checks.
    #[arg(long, default_value_t = 4_000)]
    paths: u64,
    /// Horizon of the simulation checks.
    #[arg(long, default_value_t = 0.75)]
    sim_horizon: f64,
}

/// A failure that terminates the process with a specific exit code.
struct Failure {
    code: u8,
    message: String,
}

fn domain_error(e: impl std::fmt::Display) -> Failure {
    Failure {
        code: 3,
        message: format!("domain error: {e}"),
    }
}

fn usage_error(msg: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: format!("usage error: {}", msg.into()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(failure) => {
            eprintln!("{}", failure.message);
            ExitCode::from(failure.code)
        }
    }
}

fn run(cli: Cli) -> Result<u8, Failure> {
    // Worker threads serve only the simulation and verification
    // subcommands; everything else runs single-threaded.
    match &cli.command {
        Command::Simulate(_) | Command::Verify(_) => {
            if let Some(threads) = std::env::var(THREADS_ENV)
                .ok()
                .and_then(|v| v.parse::<usize>().ok())
            {
                configure_thread_pool(threads);
            }
        }
        _ => {
            configure_thread_pool(1);
        }
    }
    match cli.command {
        Command::FieldInfo(args) => field_info(&args, cli.format),
        Command::Decompose(args) => run_decompose(&args, cli.format),
        Command::Integrate(args) => run_integrate(&args, cli.format),
        Command::Pair(args) => run_pair(&args, cli.format),
        Command::Simulate(args) => run_simulate(&args, cli.format),
        Command::Verify(args) => run_verify(&args, cli.format),
    }
}

fn build_context(args: &ContextArgs) -> Result<FieldContext, Failure> {
    if args.p == 2 {
        return Err(Failure {
            code: 3,
            message: "domain error: p = 2 excluded (the construction requires an odd prime)"
                .into(),
        });
    }
    match &args.modulus {
        Some(coeffs) => FieldContext::with_modulus(args.p, args.n, args.precision, coeffs)
            .map_err(domain_error),
        None => FieldContext::new(args.p, args.n, args.precision).map_err(domain_error),
    }
}

/// Provenance wrapper around every JSON payload.
#[derive(Serialize)]
struct Envelope<T: Serialize> {
    p: u64,
    n: u32,
    precision: u32,
    /// Monic modulus of the extension, coefficients low to high.
    modulus: Vec<u64>,
    seed: u64,
    version: &'static str,
    command: &'static str,
    result: T,
}

fn envelope<T: Serialize>(
    ctx: &FieldContext,
    seed: u64,
    command: &'static str,
    result: T,
) -> Envelope<T> {
    let d = ContextDescriptor::from(ctx);
    Envelope {
        p: d.p,
        n: d.n,
        precision: d.precision,
        modulus: d.modulus,
        seed,
        version: env!("CARGO_PKG_VERSION"),
        command,
        result,
    }
}

fn emit<T: Serialize>(
    format: Format,
    envelope: &Envelope<T>,
    text: impl FnOnce() -> String,
) -> Result<u8, Failure> {
    match format {
        Format::Json => {
            let body = serde_json::to_string_pretty(envelope)
                .map_err(|e| domain_error(format!("serialization failed: {e}")))?;
            println!("{body}");
        }
        Format::Text => println!("{}", text()),
    }
    Ok(0)
}

// ---------------------------------------------------------------- field-info

#[derive(Serialize)]
struct FieldInfoResult {
    q: u64,
    modulus_polynomial: String,
    unit_group_volume: String,
    leading_classes: u64,
}

fn modulus_polynomial(ctx: &FieldContext) -> String {
    let coeffs = ContextDescriptor::from(ctx).modulus;
    let mut pieces: Vec<String> = Vec::new();
    for (i, c) in coeffs.iter().enumerate().rev() {
        if *c == 0 {
            continue;
        }
        let var = match i {
            0 => String::new(),
            1 => "t".into(),
            _ => format!("t^{i}"),
        };
        let piece = match (i, *c) {
            (0, c) => format!("{c}"),
            (_, 1) => var,
            (_, c) => format!("{c} {var}"),
        };
        pieces.push(piece);
    }
    pieces.join(" + ")
}

fn field_info(args: &ContextArgs, format: Format) -> Result<u8, Failure> {
    let ctx = build_context(args)?;
    let f = unit_indicator(&ctx).map_err(domain_error)?;
    let result = FieldInfoResult {
        q: ctx.q(),
        modulus_polynomial: modulus_polynomial(&ctx),
        unit_group_volume: f.haar_integral(&ctx).to_string(),
        leading_classes: ctx.q() - 1,
    };
    let env = envelope(&ctx, args.seed, "field-info", result);
    emit(format, &env, || {
        format!(
            "K = unramified degree-{} extension of Q_{} (q = {}), modulus {}, precision p^{}\n\
             unit-group volume {}",
            env.n, env.p, env.result.q, env.result.modulus_polynomial, env.precision,
            env.result.unit_group_volume
        )
    })
}

// ----------------------------------------------------------------- decompose

#[derive(Serialize)]
struct ElementRepr {
    /// Integer representatives of the power-basis coefficients, mod p^precision.
    power_coeffs: Vec<String>,
}

#[derive(Serialize)]
struct ScalarRepr {
    valuation: i64,
    /// Integer representative of the unit part, mod p^precision.
    unit: String,
}

#[derive(Serialize)]
struct DecomposeResult {
    input_coeffs: Vec<i64>,
    input_shift: i64,
    omega: ElementRepr,
    xi: ElementRepr,
    r: ScalarRepr,
}

fn element_repr(x: &ExtElement) -> Result<ElementRepr, Failure> {
    let coeffs = x
        .power_coeffs()
        .iter()
        .map(|c| c.lift_integer().map(|z| z.to_string()))
        .collect::<Result<Vec<_>, _>>()
        .map_err(domain_error)?;
    Ok(ElementRepr {
        power_coeffs: coeffs,
    })
}

fn scalar_repr(r: &PadicScalar) -> Result<ScalarRepr, Failure> {
    let v = r.valuation().finite().map_err(domain_error)?;
    let unit = r.shift(-v).lift_integer().map_err(domain_error)?;
    Ok(ScalarRepr {
        valuation: v,
        unit: unit.to_string(),
    })
}

fn run_decompose(args: &DecomposeArgs, format: Format) -> Result<u8, Failure> {
    let ctx = build_context(&args.ctx)?;
    if args.coeffs.len() != args.ctx.n as usize {
        return Err(usage_error(format!(
            "expected {} coefficients for degree {}, got {}",
            args.ctx.n,
            args.ctx.n,
            args.coeffs.len()
        )));
    }
    let x = ctx.from_power_coeffs_i64(&args.coeffs).shift(args.shift);
    let sc = decompose(&ctx, &x).map_err(domain_error)?;
    let result = DecomposeResult {
        input_coeffs: args.coeffs.clone(),
        input_shift: args.shift,
        omega: element_repr(&sc.omega)?,
        xi: element_repr(&sc.xi)?,
        r: scalar_repr(&sc.r)?,
    };
    let env = envelope(&ctx, args.ctx.seed, "decompose", result);
    emit(format, &env, || {
        format!(
            "omega = [{}]\nxi    = [{}]\nr     = p^{} * {}",
            env.result.omega.power_coeffs.join(", "),
            env.result.xi.power_coeffs.join(", "),
            env.result.r.valuation,
            env.result.r.unit
        )
    })
}

// ----------------------------------------------------------------- integrate

#[derive(Deserialize)]
struct FunctionFile {
    terms: Vec<TermFile>,
}

#[derive(Deserialize)]
struct TermFile {
    /// Power-basis integer coefficients of the ball center.
    center: Vec<i64>,
    /// Optional extra scaling of the center by p^center_shift.
    #[serde(default)]
    center_shift: i64,
    /// Radius exponent: the term covers the ball center + p^k O_K.
    k: i64,
    /// Rational value the function takes on the ball, e.g. "5/18".
    value: String,
}

fn load_function(
    ctx: &FieldContext,
    preset: Option<Preset>,
    shell: i64,
    path: &Option<PathBuf>,
) -> Result<CylinderFunction<BigRational>, Failure> {
    if let Some(path) = path {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| usage_error(format!("cannot read {}: {e}", path.display())))?;
        let parsed: FunctionFile = serde_json::from_str(&raw)
            .map_err(|e| usage_error(format!("bad function file: {e}")))?;
        let mut terms = Vec::new();
        for t in parsed.terms {
            if t.center.len() != ctx.degree() as usize {
                return Err(usage_error(format!(
                    "ball center needs {} coefficients, got {}",
                    ctx.degree(),
                    t.center.len()
                )));
            }
            let center = ctx.from_power_coeffs_i64(&t.center).shift(t.center_shift);
            let ball = Ball::new(center, t.k).map_err(domain_error)?;
            let value = BigRational::from_str(&t.value)
                .map_err(|e| usage_error(format!("bad rational \"{}\": {e}", t.value)))?;
            terms.push((ball, value));
        }
        return CylinderFunction::from_disjoint(terms).map_err(domain_error);
    }
    match preset.unwrap_or(Preset::IntegerBall) {
        Preset::IntegerBall => {
            let ball = Ball::new(ctx.zero(), 0).map_err(domain_error)?;
            CylinderFunction::from_disjoint(vec![(
                ball,
                BigRational::from_integer(1.into()),
            )])
            .map_err(domain_error)
        }
        Preset::UnitGroup => unit_indicator(ctx).map_err(domain_error),
        Preset::Shell => shell_indicator(ctx, shell).map_err(domain_error),
    }
}

#[derive(Serialize)]
struct IntegrateResult {
    terms: usize,
    flat_integral: String,
    spherical_integral: CValue,
    /// Flat minus spherical; must be exactly zero.
    difference: CValue,
    agree: bool,
}

fn run_integrate(args: &IntegrateArgs, format: Format) -> Result<u8, Failure> {
    let ctx = build_context(&args.ctx)?;
    let f = load_function(&ctx, args.preset, args.shell, &args.function)?;
    let flat = f.haar_integral(&ctx);
    let atlas = SphericalAtlas::new(&ctx);
    let spherical =
        spherical_integrate(&atlas, &f.map_values(|r| CValue::rational(r.clone())))
            .map_err(domain_error)?;
    let difference = CValue::rational(flat.clone()).sub(&spherical);
    let agree = difference.is_structural_zero();
    let result = IntegrateResult {
        terms: f.terms().len(),
        flat_integral: flat.to_string(),
        spherical_integral: spherical,
        difference,
        agree,
    };
    let env = envelope(&ctx, args.ctx.seed, "integrate", result);
    emit(format, &env, || {
        let difference = match &env.result.difference {
            CValue::Rat(r) => r.to_string(),
            CValue::Cx(z) => format!("{} + {}i", z.re, z.im),
        };
        format!(
            "integral = {} ({} terms; spherical route agrees: {}; difference = {difference})",
            env.result.flat_integral, env.result.terms, env.result.agree
        )
    })
}

// ---------------------------------------------------------------------- pair

fn parse_s(raw: &str) -> Result<SExponent, Failure> {
    let trimmed = raw.trim();
    if let Ok(k) = trimmed.parse::<i64>() {
        return Ok(SExponent::Integer(k));
    }
    if let Ok(re) = trimmed.parse::<f64>() {
        return Ok(SExponent::Complex { re, im: 0.0 });
    }
    let body = trimmed
        .strip_suffix('i')
        .ok_or_else(|| usage_error(format!("cannot parse exponent \"{raw}\"")))?;
    let split = body[1..]
        .rfind(['+', '-'])
        .map(|i| i + 1)
        .ok_or_else(|| usage_error(format!("cannot parse exponent \"{raw}\"")))?;
    let re: f64 = body[..split]
        .parse()
        .map_err(|_| usage_error(format!("cannot parse exponent \"{raw}\"")))?;
    let imag_part = &body[split..];
    let im: f64 = if imag_part == "+" {
        1.0
    } else if imag_part == "-" {
        -1.0
    } else {
        imag_part
            .parse()
            .map_err(|_| usage_error(format!("cannot parse exponent \"{raw}\"")))?
    };
    Ok(SExponent::Complex { re, im })
}

#[derive(Serialize)]
struct PairResult {
    s: String,
    theta: UnitCharacter,
    table_level: u32,
    density: String,
    test_function_terms: usize,
    value: CValue,
}

fn run_pair(args: &PairArgs, format: Format) -> Result<u8, Failure> {
    let ctx = build_context(&args.ctx)?;
    let s = parse_s(&args.s)?;
    let theta = if args.theta_level == 0 {
        if args.theta_principal != 0 || args.theta_teich != 0 {
            return Err(usage_error(
                "nonzero character exponents need --theta-level >= 1",
            ));
        }
        UnitCharacter::trivial()
    } else {
        UnitCharacter::new(args.theta_level, args.theta_principal, args.theta_teich)
    };
    let pi = Quasicharacter::new(&ctx, s, theta.clone());
    let density = BigRational::from_str(&args.density)
        .map_err(|e| usage_error(format!("bad rational \"{}\": {e}", args.density)))?;
    let atlas = SphericalAtlas::new(&ctx);
    let table = FiniteLevelAngular::constant(
        &atlas,
        args.table_level,
        CValue::rational(density.clone()),
    )
    .map_err(domain_error)?;
    let phi = load_function(&ctx, args.preset, args.shell, &args.function)?
        .map_values(|r| CValue::rational(r.clone()));
    let h = HomogeneousDistribution::new(pi, table);
    let value = pair_value(&atlas, &h, &phi).map_err(domain_error)?;
    let result = PairResult {
        s: args.s.clone(),
        theta,
        table_level: args.table_level,
        density: density.to_string(),
        test_function_terms: phi.terms().len(),
        value,
    };
    let env = envelope(&ctx, args.ctx.seed, "pair", result);
    emit(format, &env, || {
        format!("<pi F, phi> = {}", env.result.value)
    })
}

// ------------------------------------------------------------------ simulate

fn parse_shell_range(raw: &str) -> Result<(i64, i64), Failure> {
    let (a, b) = raw
        .split_once("..")
        .ok_or_else(|| usage_error(format!("shell range \"{raw}\" is not \"kmin..kmax\"")))?;
    let k_min: i64 = a
        .trim()
        .parse()
        .map_err(|_| usage_error(format!("bad shell bound \"{a}\"")))?;
    let k_max: i64 = b
        .trim()
        .parse()
        .map_err(|_| usage_error(format!("bad shell bound \"{b}\"")))?;
    Ok((k_min, k_max))
}

/// A leading-class rotation: the multiplicative representative of a
/// nontrivial residue class (1 + t in degree >= 2, the scalar 2 on the
/// line).
fn omega_rotation(ctx: &FieldContext) -> Result<ExtElement, CoreError> {
    let u = if ctx.degree() >= 2 {
        let mut coeffs = vec![0i64; ctx.degree() as usize];
        coeffs[0] = 1;
        coeffs[1] = 1;
        ctx.from_power_coeffs_i64(&coeffs)
    } else {
        ctx.from_power_coeffs_i64(&[2])
    };
    u.teichmuller(ctx)
}

/// A norm-one rotation sigma(u)/u (exactly norm one by multiplicativity
/// over the conjugate orbit); trivial on the line, hence None there.
fn sphere_rotation(ctx: &FieldContext) -> Result<Option<ExtElement>, CoreError> {
    if ctx.degree() < 2 {
        return Ok(None);
    }
    let mut coeffs = vec![0i64; ctx.degree() as usize];
    coeffs[0] = 1;
    coeffs[1] = 1;
    let u = ctx.from_power_coeffs_i64(&coeffs);
    let su = u.frobenius(ctx)?;
    Ok(Some(su.div(ctx, &u)?))
}

#[derive(Serialize)]
struct ShellCount {
    shell: i64,
    count: u64,
}

#[derive(Serialize)]
struct SimulateResult {
    law: String,
    alpha: f64,
    shell_range: [i64; 2],
    total_rate: f64,
    paths: u64,
    horizon: f64,
    start_coeffs: Vec<i64>,
    start_shift: i64,
    terminal_shell_histogram: Vec<ShellCount>,
    discarded_zero_hits: u64,
    omega_rotation_check: KernelCheckReport,
    sphere_rotation_check: Option<KernelCheckReport>,
    markov: Option<MarkovReport>,
}

fn run_simulate(args: &SimulateArgs, format: Format) -> Result<u8, Failure> {
    let ctx = build_context(&args.ctx)?;
    let (k_min, k_max) = parse_shell_range(&args.shells)?;
    let model =
        LevyModel::new(&ctx, args.alpha, k_min, k_max, args.rate).map_err(domain_error)?;
    let law = match args.law {
        LawArg::Invariant => JumpLaw::RotationInvariant,
        LawArg::Biased => JumpLaw::OmegaBiased,
    };
    let start_coeffs = args.coeffs.clone().unwrap_or_else(|| {
        let mut c = vec![0i64; ctx.degree() as usize];
        c[0] = 1;
        c
    });
    if start_coeffs.len() != ctx.degree() as usize {
        return Err(usage_error(format!(
            "starting point needs {} coefficients, got {}",
            ctx.degree(),
            start_coeffs.len()
        )));
    }
    let x0 = ctx.from_power_coeffs_i64(&start_coeffs).shift(args.shift);

    let batch = simulate_batch(
        &model,
        &ctx,
        law,
        &x0,
        args.horizon,
        args.paths,
        args.ctx.seed,
        0,
    )
    .map_err(domain_error)?;
    let mut histogram: std::collections::BTreeMap<i64, u64> = std::collections::BTreeMap::new();
    let mut discarded = 0u64;
    for rec in &batch {
        if rec.hit_zero {
            discarded += 1;
            continue;
        }
        if let padic_spherical::padic::Valuation::Finite(v) = rec.final_state.valuation() {
            *histogram.entry(v).or_default() += 1;
        }
    }

    let omega0 = omega_rotation(&ctx).map_err(domain_error)?;
    let omega_check = radial_kernel_check(
        &model,
        &ctx,
        law,
        &x0,
        &omega0.mul(&ctx, &x0).map_err(domain_error)?,
        args.horizon,
        args.paths,
        args.ctx.seed.wrapping_add(1),
    )
    .map_err(domain_error)?;
    let sphere_check = match sphere_rotation(&ctx).map_err(domain_error)? {
        Some(xi0) => Some(
            radial_kernel_check(
                &model,
                &ctx,
                law,
                &x0,
                &xi0.mul(&ctx, &x0).map_err(domain_error)?,
                args.horizon,
                args.paths,
                args.ctx.seed.wrapping_add(2),
            )
            .map_err(domain_error)?,
        ),
        None => None,
    };

    let markov = match &args.markov {
        Some(raw) => {
            let times: Vec<f64> = raw
                .split(',')
                .map(|t| t.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| usage_error(format!("bad time list \"{raw}\"")))?;
            if times.len() != 3 {
                return Err(usage_error("the diagnostic needs exactly three times"));
            }
            Some(
                markov_diagnostic(
                    &model,
                    &ctx,
                    law,
                    &x0,
                    [times[0], times[1], times[2]],
                    args.paths,
                    args.ctx.seed.wrapping_add(3),
                )
                .map_err(domain_error)?,
            )
        }
        None => None,
    };

    let result = SimulateResult {
        law: match law {
            JumpLaw::RotationInvariant => "rotation-invariant".into(),
            JumpLaw::OmegaBiased => "omega-biased".into(),
        },
        alpha: args.alpha,
        shell_range: [k_min, k_max],
        total_rate: args.rate,
        paths: args.paths,
        horizon: args.horizon,
        start_coeffs,
        start_shift: args.shift,
        terminal_shell_histogram: histogram
            .into_iter()
            .map(|(shell, count)| ShellCount { shell, count })
            .collect(),
        discarded_zero_hits: discarded,
        omega_rotation_check: omega_check,
        sphere_rotation_check: sphere_check,
        markov,
    };
    let env = envelope(&ctx, args.ctx.seed, "simulate", result);
    if let Some(path) = &args.report {
        let body = serde_json::to_string_pretty(&env)
            .map_err(|e| domain_error(format!("serialization failed: {e}")))?;
        std::fs::write(path, body)
            .map_err(|e| usage_error(format!("cannot write {}: {e}", path.display())))?;
    }
    emit(format, &env, || {
        let mut lines = vec![format!(
            "{} law, {} paths to T = {}, shells {}..{}",
            env.result.law, env.result.paths, env.result.horizon, k_min, k_max
        )];
        lines.push(format!(
            "leading-class rotation check: p = {:.6} ({})",
            env.result.omega_rotation_check.chi_square.p_value,
            if env.result.omega_rotation_check.passes {
                "pass"
            } else {
                "FAIL"
            }
        ));
        if let Some(c) = &env.result.sphere_rotation_check {
            lines.push(format!(
                "norm-one rotation check:      p = {:.6} ({})",
                c.chi_square.p_value,
                if c.passes { "pass" } else { "FAIL" }
            ));
        }
        if let Some(m) = &env.result.markov {
            lines.push(format!(
                "conditional-independence diagnostic: {}",
                if m.passes { "pass" } else { "FAIL" }
            ));
        }
        lines.join("\n")
    })
}

// -------------------------------------------------------------------- verify

fn run_verify(args: &VerifyArgs, format: Format) -> Result<u8, Failure> {
    let ctx = build_context(&args.ctx)?;
    let cfg = VerifyConfig {
        seed: args.ctx.seed,
        decomposition_samples: args.samples,
        cylinder_functions: args.functions,
        residue_trials: args.residue_trials,
        table_level: args.level,
        simulation_paths: args.paths,
        simulation_horizon: args.sim_horizon,
    };
    let report: VerificationReport = run_all(&ctx, &cfg).map_err(domain_error)?;
    let passed = report.passed;
    let env = envelope(&ctx, args.ctx.seed, "verify", report);
    emit(format, &env, || {
        let mut lines: Vec<String> = env
            .result
            .outcomes
            .iter()
            .map(|o| {
                format!(
                    "{} {} — {}",
                    if o.passed { "PASS" } else { "FAIL" },
                    o.name,
                    o.detail
                )
            })
            .collect();
        lines.push(format!(
            "verification {}",
            if env.result.passed { "passed" } else { "FAILED" }
        ));
        lines.join("\n")
    })?;
    Ok(if passed { 0 } else { 1 })
}
