//! Monte Carlo simulation of rotation-invariant jump processes on the
//! unramified extension, and the statistical checks of their radial
//! structure: the radial track is Markov and its law depends on the start
//! only through the radial coordinate, which is verified by two-sample
//! shell histograms; an adversarial angular-dependent jump law provides
//! the negative control that gives those tests their teeth.
//!
//! The process family is truncated compound Poisson: shells k in
//! [k_min, k_max] carry rates lambda_k = C q^(-alpha k) normalized to a
//! configured total rate, and the jump within shell k is exactly Haar
//! uniform on {||y|| = q^k}. Paths are exact: states are sums of exact
//! elements, and the radial track is read off by valuation with no
//! rounding anywhere.

use std::collections::BTreeMap;

use rand::distributions::Distribution;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::Exp;

use crate::error::{Error, Result};
use crate::exec::maybe_par_map;
use crate::field::{ExtElement, FieldContext};
use crate::spherical::decompose;
use crate::stats::{chi_square_contingency, chi_square_two_sample, ChiSquareReport};

/// Significance floor used by the pass/fail verdicts.
pub const ALPHA_LEVEL: f64 = 0.001;

/// Minimum per-stratum sample size before the Markov diagnostic attempts a
/// contingency test instead of recording the stratum as too thin.
const MIN_STRATUM: u64 = 200;

/// How jumps are drawn. The rotation-invariant law is the model under
/// study; the omega-biased law is a deliberate violation (the jump shell
/// depends on the angular coordinate of the current state) used as a
/// negative control for the statistical machinery.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JumpLaw {
    RotationInvariant,
    OmegaBiased,
}

/// Truncated compound Poisson model with power-law shell rates.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LevyModel {
    alpha: f64,
    k_min: i64,
    k_max: i64,
    total_rate: f64,
    rates: Vec<f64>,
    cumulative: Vec<f64>,
}

impl LevyModel {
    /// Shell rates lambda_k = C q^(-alpha k), k_min <= k <= k_max, with C
    /// fixed so the rates sum to `total_rate`.
    pub fn new(
        ctx: &FieldContext,
        alpha: f64,
        k_min: i64,
        k_max: i64,
        total_rate: f64,
    ) -> Result<Self> {
        if k_min > k_max {
            return Err(Error::DiagnosticPrecondition(
                "empty shell range for the jump model".into(),
            ));
        }
        if !(alpha > 0.0) || !(total_rate > 0.0) || !total_rate.is_finite() {
            return Err(Error::DiagnosticPrecondition(
                "stability index and total rate must be positive".into(),
            ));
        }
        let lnq = (ctx.q() as f64).ln();
        let weights: Vec<f64> = (k_min..=k_max)
            .map(|k| (-alpha * k as f64 * lnq).exp())
            .collect();
        let wsum: f64 = weights.iter().sum();
        if !wsum.is_finite() || wsum <= 0.0 {
            return Err(Error::DiagnosticPrecondition(
                "shell weights overflow; narrow the shell range".into(),
            ));
        }
        let rates: Vec<f64> = weights.iter().map(|w| w / wsum * total_rate).collect();
        let mut acc = 0.0;
        let mut cumulative: Vec<f64> = rates.iter().map(|r| {
            acc += r / total_rate;
            acc
        }).collect();
        if let Some(last) = cumulative.last_mut() {
            *last = 1.0;
        }
        Ok(LevyModel {
            alpha,
            k_min,
            k_max,
            total_rate,
            rates,
            cumulative,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn shell_range(&self) -> (i64, i64) {
        (self.k_min, self.k_max)
    }

    pub fn total_rate(&self) -> f64 {
        self.total_rate
    }

    /// lambda_k for k in range.
    pub fn shell_rate(&self, k: i64) -> Option<f64> {
        if k < self.k_min || k > self.k_max {
            return None;
        }
        Some(self.rates[(k - self.k_min) as usize])
    }

    fn sample_shell<R: Rng + ?Sized>(&self, rng: &mut R) -> i64 {
        let u: f64 = rng.gen();
        let idx = self
            .cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(self.cumulative.len() - 1);
        self.k_min + idx as i64
    }
}

/// Exact Haar-uniform sample on the sphere {||y|| = q^k}: a uniform unit
/// mod p^N scaled to valuation -k.
pub fn sample_sphere_uniform<R: Rng + ?Sized>(
    ctx: &FieldContext,
    k: i64,
    rng: &mut R,
) -> ExtElement {
    ctx.random_unit(rng).shift(-k)
}

/// One simulated path: Poisson jump times on [0, horizon], the exact jump
/// elements, and the exact terminal state. `hit_zero` flags paths whose
/// running sum ever collapsed to exact zero (at working precision); such
/// paths are excluded from the radial statistics and counted.
#[derive(Clone, Debug)]
pub struct PathRecord {
    pub path_index: u64,
    pub jump_times: Vec<f64>,
    pub jump_shells: Vec<i64>,
    pub jumps: Vec<ExtElement>,
    pub final_state: ExtElement,
    pub hit_zero: bool,
}

impl PathRecord {
    /// The exact state at time t: start plus every jump at or before t.
    pub fn state_at(&self, x0: &ExtElement, t: f64) -> Result<ExtElement> {
        let mut x = x0.clone();
        for (i, &ti) in self.jump_times.iter().enumerate() {
            if ti > t {
                break;
            }
            x = x.add(&self.jumps[i])?;
        }
        Ok(x)
    }

    /// Radial shell label at time t: the valuation of the state, or None
    /// when the state is (exact) zero.
    pub fn shell_at(&self, x0: &ExtElement, t: f64) -> Result<Option<i64>> {
        let x = self.state_at(x0, t)?;
        Ok(match x.valuation() {
            crate::padic::Valuation::Finite(v) => Some(v),
            crate::padic::Valuation::Infinite => None,
        })
    }
}

/// Per-path RNG stream: a ChaCha8 generator keyed by (master seed, path
/// index, stream tag) plus a fixed domain constant, so every path is an
/// independent reproducible stream and batches are embarrassingly
/// parallel.
fn path_rng(master_seed: u64, path_index: u64, stream: u64) -> ChaCha8Rng {
    let mut seed = [0u8; 32];
    seed[0..8].copy_from_slice(&master_seed.to_le_bytes());
    seed[8..16].copy_from_slice(&path_index.to_le_bytes());
    seed[16..24].copy_from_slice(&stream.to_le_bytes());
    seed[24..32].copy_from_slice(&0x6a75_6d70_7061_7468u64.to_le_bytes());
    ChaCha8Rng::from_seed(seed)
}

/// Simulate one compound-Poisson path on [0, horizon] from x0.
pub fn simulate_path(
    model: &LevyModel,
    ctx: &FieldContext,
    law: JumpLaw,
    x0: &ExtElement,
    horizon: f64,
    master_seed: u64,
    path_index: u64,
    stream: u64,
) -> Result<PathRecord> {
    if !(horizon >= 0.0) || !horizon.is_finite() {
        return Err(Error::DiagnosticPrecondition(
            "simulation horizon must be a finite nonnegative time".into(),
        ));
    }
    let mut rng = path_rng(master_seed, path_index, stream);
    let exp = Exp::new(model.total_rate)
        .map_err(|e| Error::DiagnosticPrecondition(format!("bad jump rate: {e}")))?;
    let mut x = x0.clone();
    let mut hit_zero = x.is_zero();
    let mut jump_times = Vec::new();
    let mut jump_shells = Vec::new();
    let mut jumps = Vec::new();
    let mut t = exp.sample(&mut rng);
    while t <= horizon {
        let k = match law {
            JumpLaw::RotationInvariant => model.sample_shell(&mut rng),
            JumpLaw::OmegaBiased => {
                // Violation by construction: states whose angular
                // Teichmueller coordinate is trivial always jump at the
                // top shell.
                let omega_trivial = match x.valuation() {
                    crate::padic::Valuation::Finite(v) => {
                        x.shift(-v).is_principal_unit(ctx)
                    }
                    crate::padic::Valuation::Infinite => false,
                };
                if omega_trivial {
                    model.k_max
                } else {
                    model.sample_shell(&mut rng)
                }
            }
        };
        let y = sample_sphere_uniform(ctx, k, &mut rng);
        x = x.add(&y)?;
        if x.is_zero() {
            hit_zero = true;
        }
        jump_times.push(t);
        jump_shells.push(k);
        jumps.push(y);
        t += exp.sample(&mut rng);
    }
    Ok(PathRecord {
        path_index,
        jump_times,
        jump_shells,
        jumps,
        final_state: x,
        hit_zero,
    })
}

/// Simulate a batch of independent paths (parallel when enabled); output
/// order is by path index regardless of scheduling.
pub fn simulate_batch(
    model: &LevyModel,
    ctx: &FieldContext,
    law: JumpLaw,
    x0: &ExtElement,
    horizon: f64,
    count: u64,
    master_seed: u64,
    stream: u64,
) -> Result<Vec<PathRecord>> {
    let indices: Vec<u64> = (0..count).collect();
    maybe_par_map(&indices, |&i| {
        simulate_path(model, ctx, law, x0, horizon, master_seed, i, stream)
    })
    .into_iter()
    .collect()
}

/// Report of the radial-law comparison between two starting points with
/// equal radial coordinate: shell histograms of the terminal states and
/// the two-sample chi-square verdict. The bin plan (shell labels) and the
/// seeds are part of the report so the run is reproducible.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KernelCheckReport {
    pub trials: u64,
    pub horizon: f64,
    pub master_seed: u64,
    pub discarded_a: u64,
    pub discarded_b: u64,
    pub shells: Vec<i64>,
    pub counts_a: Vec<u64>,
    pub counts_b: Vec<u64>,
    pub chi_square: ChiSquareReport,
    pub passes: bool,
}

/// The radial-law start-independence check: simulate `trials` paths from
/// each of two starts with the same radial coordinate and compare the
/// terminal shell histograms. For the rotation-invariant law the two laws
/// agree (the radial track is Markov with a radially determined kernel);
/// the omega-biased law must fail this for suitably chosen starts.
pub fn radial_kernel_check(
    model: &LevyModel,
    ctx: &FieldContext,
    law: JumpLaw,
    x_a: &ExtElement,
    x_b: &ExtElement,
    horizon: f64,
    trials: u64,
    master_seed: u64,
) -> Result<KernelCheckReport> {
    let ca = decompose(ctx, x_a)?;
    let cb = decompose(ctx, x_b)?;
    let va = ca.r.valuation().finite()?;
    let vb = cb.r.valuation().finite()?;
    let floor = ca
        .r
        .absolute_precision()
        .unwrap_or(i64::MAX)
        .min(cb.r.absolute_precision().unwrap_or(i64::MAX));
    if va != vb || !ca.r.congruent_abs(&cb.r, floor) {
        return Err(Error::DiagnosticPrecondition(
            "starting points must share the radial coordinate".into(),
        ));
    }

    let batch_a = simulate_batch(model, ctx, law, x_a, horizon, trials, master_seed, 1)?;
    let batch_b = simulate_batch(model, ctx, law, x_b, horizon, trials, master_seed, 2)?;

    let mut bins: BTreeMap<i64, [u64; 2]> = BTreeMap::new();
    let mut discarded = [0u64; 2];
    for (side, batch) in [&batch_a, &batch_b].into_iter().enumerate() {
        for rec in batch {
            if rec.hit_zero {
                discarded[side] += 1;
                continue;
            }
            let v = rec.final_state.valuation().finite()?;
            bins.entry(v).or_default()[side] += 1;
        }
    }
    let shells: Vec<i64> = bins.keys().copied().collect();
    let counts_a: Vec<u64> = bins.values().map(|c| c[0]).collect();
    let counts_b: Vec<u64> = bins.values().map(|c| c[1]).collect();
    let chi_square = chi_square_two_sample(&counts_a, &counts_b)?;
    let passes = chi_square.passes(ALPHA_LEVEL);
    Ok(KernelCheckReport {
        trials,
        horizon,
        master_seed,
        discarded_a: discarded[0],
        discarded_b: discarded[1],
        shells,
        counts_a,
        counts_b,
        chi_square,
        passes,
    })
}

/// Per-stratum outcome of the Markov diagnostic.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StratumReport {
    pub mid_shell: i64,
    pub sample_count: u64,
    /// None when the stratum was too thin to test (reported, not failed).
    pub chi_square: Option<ChiSquareReport>,
}

/// Report of the conditional-independence diagnostic for the radial track.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MarkovReport {
    pub paths: u64,
    pub times: [f64; 3],
    pub master_seed: u64,
    pub discarded: u64,
    pub alpha: f64,
    pub corrected_alpha: f64,
    pub strata: Vec<StratumReport>,
    pub passes: bool,
}

/// Markov property of the radial track: conditional on the shell at t2,
/// the shell at t3 must be independent of the shell at t1. Each stratum
/// (value of the middle shell) gets a contingency-table chi-square; the
/// verdict applies a Bonferroni correction across the tested strata.
/// Thin strata are recorded and skipped rather than widened silently.
pub fn markov_diagnostic(
    model: &LevyModel,
    ctx: &FieldContext,
    law: JumpLaw,
    x0: &ExtElement,
    times: [f64; 3],
    paths: u64,
    master_seed: u64,
) -> Result<MarkovReport> {
    if !(times[0] < times[1] && times[1] < times[2]) {
        return Err(Error::DiagnosticPrecondition(
            "diagnostic times must be strictly increasing".into(),
        ));
    }
    if paths < 10_000 {
        return Err(Error::DiagnosticPrecondition(
            "the Markov diagnostic needs at least 10^4 paths".into(),
        ));
    }
    let batch = simulate_batch(model, ctx, law, x0, times[2], paths, master_seed, 3)?;

    let mut discarded = 0u64;
    // (s2) -> (s1, s3) -> count
    let mut strata_counts: BTreeMap<i64, BTreeMap<(i64, i64), u64>> = BTreeMap::new();
    for rec in &batch {
        if rec.hit_zero {
            discarded += 1;
            continue;
        }
        let mut x = x0.clone();
        let mut j = 0usize;
        let mut shells = [0i64; 3];
        let mut dead = false;
        for (slot, &tt) in times.iter().enumerate() {
            while j < rec.jump_times.len() && rec.jump_times[j] <= tt {
                x = x.add(&rec.jumps[j])?;
                j += 1;
            }
            match x.valuation() {
                crate::padic::Valuation::Finite(v) => shells[slot] = v,
                crate::padic::Valuation::Infinite => {
                    dead = true;
                    break;
                }
            }
        }
        if dead {
            discarded += 1;
            continue;
        }
        *strata_counts
            .entry(shells[1])
            .or_default()
            .entry((shells[0], shells[2]))
            .or_default() += 1;
    }

    let mut strata = Vec::new();
    let mut tested = 0u64;
    for (&mid, cells) in &strata_counts {
        let total: u64 = cells.values().sum();
        if total < MIN_STRATUM {
            strata.push(StratumReport {
                mid_shell: mid,
                sample_count: total,
                chi_square: None,
            });
            continue;
        }
        let mut rows: Vec<i64> = cells.keys().map(|&(a, _)| a).collect();
        rows.sort_unstable();
        rows.dedup();
        let mut cols: Vec<i64> = cells.keys().map(|&(_, b)| b).collect();
        cols.sort_unstable();
        cols.dedup();
        let table: Vec<Vec<u64>> = rows
            .iter()
            .map(|&a| {
                cols.iter()
                    .map(|&b| cells.get(&(a, b)).copied().unwrap_or(0))
                    .collect()
            })
            .collect();
        let chi = chi_square_contingency(&table)?;
        tested += 1;
        strata.push(StratumReport {
            mid_shell: mid,
            sample_count: total,
            chi_square: Some(chi),
        });
    }
    let corrected_alpha = if tested > 0 {
        ALPHA_LEVEL / tested as f64
    } else {
        ALPHA_LEVEL
    };
    let passes = strata
        .iter()
        .filter_map(|s| s.chi_square.as_ref())
        .all(|c| c.passes(corrected_alpha));
    Ok(MarkovReport {
        paths,
        times,
        master_seed,
        discarded,
        alpha: ALPHA_LEVEL,
        corrected_alpha,
        strata,
        passes,
    })
}

/// Empirical tables of multiplicative angular increments
/// z(t_i)^(-1) z(t_(i+1)), stratified by the radial transition
/// (shell at t_i, shell at t_(i+1)). Keys are the residue keys of the
/// Teichmueller part (mod p) and the sphere part (mod p^xi_level).
#[derive(Clone, Debug)]
pub struct AngularIncrementReport {
    pub xi_level: u32,
    pub discarded: u64,
    pub strata: BTreeMap<(i64, i64), BTreeMap<(Vec<u64>, Vec<u64>), u64>>,
}

impl AngularIncrementReport {
    /// Flatten every stratum into one keyed count vector (for two-sample
    /// comparisons between runs).
    pub fn flattened(&self) -> BTreeMap<((i64, i64), (Vec<u64>, Vec<u64>)), u64> {
        let mut out = BTreeMap::new();
        for (stratum, cells) in &self.strata {
            for (key, &count) in cells {
                out.insert((*stratum, key.clone()), count);
            }
        }
        out
    }
}

/// Compare two angular-increment reports in law: union-align their keys
/// and run the two-sample chi-square.
pub fn angular_increment_two_sample(
    a: &AngularIncrementReport,
    b: &AngularIncrementReport,
) -> Result<ChiSquareReport> {
    let fa = a.flattened();
    let fb = b.flattened();
    let mut keys: Vec<_> = fa.keys().chain(fb.keys()).cloned().collect();
    keys.sort();
    keys.dedup();
    let counts_a: Vec<u64> = keys.iter().map(|k| fa.get(k).copied().unwrap_or(0)).collect();
    let counts_b: Vec<u64> = keys.iter().map(|k| fb.get(k).copied().unwrap_or(0)).collect();
    chi_square_two_sample(&counts_a, &counts_b)
}

/// Sample the multiplicative angular increments over consecutive pairs of
/// the given times. Paths that are zero at any sampled time are discarded
/// and counted (conditioning on survival).
pub fn angular_increment_sample(
    model: &LevyModel,
    ctx: &FieldContext,
    law: JumpLaw,
    x0: &ExtElement,
    times: &[f64],
    paths: u64,
    master_seed: u64,
    xi_level: u32,
) -> Result<AngularIncrementReport> {
    if times.len() < 2 || times.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::DiagnosticPrecondition(
            "angular sampling needs strictly increasing times".into(),
        ));
    }
    let horizon = *times.last().unwrap();
    let batch = simulate_batch(model, ctx, law, x0, horizon, paths, master_seed, 4)?;

    let mut discarded = 0u64;
    let mut strata: BTreeMap<(i64, i64), BTreeMap<(Vec<u64>, Vec<u64>), u64>> = BTreeMap::new();
    'paths: for rec in &batch {
        if rec.hit_zero {
            discarded += 1;
            continue;
        }
        // Walk the jump list once, decomposing the state at each time.
        let mut x = x0.clone();
        let mut j = 0usize;
        let mut snapshots = Vec::with_capacity(times.len());
        for &tt in times {
            while j < rec.jump_times.len() && rec.jump_times[j] <= tt {
                x = x.add(&rec.jumps[j])?;
                j += 1;
            }
            if x.is_zero() {
                discarded += 1;
                continue 'paths;
            }
            let sc = decompose(ctx, &x)?;
            let v = x.valuation().finite()?;
            snapshots.push((v, sc));
        }
        for w in snapshots.windows(2) {
            let (v0, z0) = &w[0];
            let (v1, z1) = &w[1];
            let g_omega = z1.omega.mul(ctx, &z0.omega.inv(ctx)?)?;
            let g_xi = z1.xi.mul(ctx, &z0.xi.inv(ctx)?)?;
            let key = (g_omega.residue_key(1)?, g_xi.residue_key(xi_level)?);
            *strata
                .entry((*v0, *v1))
                .or_default()
                .entry(key)
                .or_default() += 1;
        }
    }
    if strata.is_empty() {
        return Err(Error::DiagnosticPrecondition(
            "every path was discarded; nothing to tabulate".into(),
        ));
    }
    Ok(AngularIncrementReport {
        xi_level,
        discarded,
        strata,
    })
}
