//! Batch experiments: config parsing, convergence sweeps and Zeno studies.
//!
//! Configs are single JSON documents whose physical quantities carry their
//! unit in the key name (`b_field_gauss`, `t_max_us`, ...). Everything is
//! converted to SI on load. Data files are deterministic for a given config
//! and thread budget; wall-clock times only appear in `meta.json`.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bath::{sample_bath, spectral_weights, Bath, BathConfig, RNG_ALGORITHM};
use crate::cce::{
    cce_run, exact_survival_full_capped, CceDiagnostics, CceOptions, ClusterPolicy, DEFAULT_CLUSTER_BUDGET,
    DEFAULT_EXACT_CAP,
};
use crate::dynamics::{uniform_grid, NuclearSpin, SurvivalCurve};
use crate::physics::PhysConstants;
use crate::zeno::{
    broadening_integral, regime_fit, repeated_measurement_survival, RegimeFit, RegimeFitOptions, ZenoDiagnostics,
    ZenoReport,
};
use crate::{Error, Result};

const GAUSS: f64 = 1e-4;
const US: f64 = 1e-6;
const NM: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BathSection {
    pub seed: u64,
    #[serde(default = "default_abundance")]
    pub abundance: f64,
    pub n_spins: usize,
    #[serde(default = "default_r_min_nm")]
    pub r_min_nm: f64,
    #[serde(default)]
    pub r_max_nm: Option<f64>,
    #[serde(default = "default_field_gauss")]
    pub b_field_gauss: f64,
}

fn default_abundance() -> f64 {
    0.011
}

fn default_r_min_nm() -> f64 {
    0.5
}

fn default_field_gauss() -> f64 {
    1024.98
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeGridSection {
    pub t_max_us: f64,
    pub n_points: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub n_spins: usize,
    pub cce_order: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum PolicySection {
    #[default]
    AllSubsets,
    MaxDiameter { diameter_nm: f64 },
}

impl PolicySection {
    fn to_policy(self) -> ClusterPolicy {
        match self {
            PolicySection::AllSubsets => ClusterPolicy::AllSubsets,
            PolicySection::MaxDiameter { diameter_nm } => ClusterPolicy::MaxDiameter { diameter_m: diameter_nm * NM },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub bath: BathSection,
    pub cce_order: usize,
    pub time_grid: TimeGridSection,
    pub tau_grid_us: Vec<f64>,
    /// Interval at which the broadening profile is tabulated.
    #[serde(default = "default_broadening_tau_us")]
    pub broadening_tau_us: f64,
    #[serde(default)]
    pub comparison_runs: Vec<Variant>,
    /// Worker threads; 0 uses every available core.
    #[serde(default)]
    pub threads: usize,
    #[serde(default)]
    pub cluster_policy: PolicySection,
    #[serde(default = "default_cluster_budget")]
    pub cluster_budget: usize,
    #[serde(default)]
    pub include_nuclear_dipole: bool,
    #[serde(default)]
    pub initial_nuclear_spin: NuclearSpin,
    /// Width of the Gaussian used for the smoothed spectrum; defaults to the mean line spacing.
    #[serde(default)]
    pub smoothing_sigma_rad_s: Option<f64>,
    #[serde(default)]
    pub progress_interval_s: Option<f64>,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    #[serde(default = "default_exact_cap")]
    pub exact_cap: usize,
    /// Default output directory when none is given on the command line.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn default_broadening_tau_us() -> f64 {
    12.0
}

fn default_cluster_budget() -> usize {
    DEFAULT_CLUSTER_BUDGET
}

fn default_exact_cap() -> usize {
    DEFAULT_EXACT_CAP
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be positive and finite, got {v}")))
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.bath_config(self.bath.n_spins).validate()?;
        if self.cce_order == 0 {
            return Err(Error::Config("cce_order must be ≥ 1".into()));
        }
        positive("time_grid.t_max_us", self.time_grid.t_max_us)?;
        if self.time_grid.n_points < 2 {
            return Err(Error::Config("time_grid.n_points must be ≥ 2".into()));
        }
        if self.tau_grid_us.is_empty() {
            return Err(Error::Config("tau_grid_us is empty".into()));
        }
        for &tau in &self.tau_grid_us {
            positive("tau_grid_us entry", tau)?;
            if tau > self.time_grid.t_max_us {
                return Err(Error::Config(format!(
                    "tau {tau} µs exceeds t_max {} µs",
                    self.time_grid.t_max_us
                )));
            }
        }
        positive("broadening_tau_us", self.broadening_tau_us)?;
        for v in &self.comparison_runs {
            if v.n_spins == 0 || v.cce_order == 0 {
                return Err(Error::Config(format!("comparison run {v:?} needs n_spins ≥ 1 and cce_order ≥ 1")));
            }
        }
        if let PolicySection::MaxDiameter { diameter_nm } = self.cluster_policy {
            positive("cluster_policy.diameter_nm", diameter_nm)?;
        }
        if let Some(s) = self.smoothing_sigma_rad_s {
            positive("smoothing_sigma_rad_s", s)?;
        }
        if let Some(s) = self.progress_interval_s {
            positive("progress_interval_s", s)?;
        }
        Ok(())
    }

    /// Hex sha256 of the canonical (re-serialized) config.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    pub fn field_tesla(&self) -> f64 {
        self.bath.b_field_gauss * GAUSS
    }

    pub fn bath_config(&self, n_spins: usize) -> BathConfig {
        BathConfig {
            seed: self.bath.seed,
            abundance: self.bath.abundance,
            n_spins,
            r_min: self.bath.r_min_nm * NM,
            r_max: self.bath.r_max_nm.map(|r| r * NM),
            field_bz: self.field_tesla(),
        }
    }

    pub fn time_grid(&self) -> Result<Vec<f64>> {
        uniform_grid(self.time_grid.t_max_us * US, self.time_grid.n_points)
    }

    pub fn taus(&self) -> Vec<f64> {
        self.tau_grid_us.iter().map(|t| t * US).collect()
    }

    /// Uniform grid merged with every τ, so `P(τ)` is sampled exactly.
    pub fn zeno_grid(&self) -> Result<Vec<f64>> {
        let mut grid = self.time_grid()?;
        grid.extend(self.taus());
        grid.sort_by(f64::total_cmp);
        grid.dedup();
        Ok(grid)
    }

    pub fn cce_options(&self, order: usize) -> CceOptions {
        CceOptions {
            policy: self.cluster_policy.to_policy(),
            include_nuclear_dipole: self.include_nuclear_dipole,
            initial_spin: self.initial_nuclear_spin,
            threads: self.threads,
            cluster_budget: self.cluster_budget,
            progress_every: self.progress_interval_s.map(Duration::from_secs_f64),
            cache_dir: self.cache_dir.clone(),
            ..CceOptions::order(order)
        }
    }

    /// Largest bath any stage of the experiment needs.
    fn max_spins(&self) -> usize {
        self.comparison_runs.iter().map(|v| v.n_spins).fold(self.bath.n_spins, usize::max)
    }

    /// Bath with enough spins for every stage; smaller baths are its prefixes.
    pub fn bath_family(&self) -> Result<Bath> {
        let mut bath = sample_bath(&self.bath_config(self.max_spins()))?;
        bath.config_hash = Some(self.hash());
        Ok(bath)
    }

    /// Comparison runs in first-seen order with duplicates removed.
    pub fn variants(&self) -> (Vec<Variant>, Vec<Variant>) {
        let mut seen = BTreeSet::new();
        let mut unique = Vec::new();
        let mut dups = Vec::new();
        for &v in &self.comparison_runs {
            if seen.insert(v) {
                unique.push(v);
            } else {
                dups.push(v);
            }
        }
        (unique, dups)
    }
}

fn bath_prefix(family: &Bath, n: usize) -> Result<Bath> {
    if n > family.len() {
        return Err(Error::Config(format!("requested {n} spins but the bath family has {}", family.len())));
    }
    Ok(family.truncated(n))
}

fn write(out: &Path, name: &str, text: &str) -> Result<PathBuf> {
    let path = out.join(name);
    std::fs::write(&path, text)?;
    Ok(path)
}

fn curve_extras(hash: &str, diag: &CceDiagnostics) -> Vec<(&'static str, String)> {
    vec![
        ("config_hash", hash.to_string()),
        ("negative_factor_count", diag.negative_factor_count.to_string()),
    ]
}

#[derive(Clone, Debug, Serialize)]
pub struct VariantResult {
    pub variant: Variant,
    pub file: String,
    pub diagnostics: CceDiagnostics,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ConvergenceRow {
    pub from: Variant,
    pub to: Variant,
    pub max_abs_diff: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ConvergenceOutcome {
    pub runs: Vec<VariantResult>,
    pub duplicates: Vec<Variant>,
    pub summary: Vec<ConvergenceRow>,
    #[serde(skip)]
    pub curves: Vec<SurvivalCurve>,
}

/// One curve per comparison run on the uniform grid, plus successive `max|ΔP|`.
///
/// Runs are sorted by `(N, M)`. The summary compares each run with the next
/// order at the same size and with the next size at the same order.
pub fn run_convergence_study(cfg: &ExperimentConfig, out: &Path) -> Result<ConvergenceOutcome> {
    cfg.validate()?;
    if cfg.comparison_runs.is_empty() {
        return Err(Error::Config("comparison_runs is empty".into()));
    }
    std::fs::create_dir_all(out)?;
    let hash = cfg.hash();
    let (mut variants, duplicates) = cfg.variants();
    for d in &duplicates {
        eprintln!("warning: duplicate comparison run (N={}, M={}) ignored", d.n_spins, d.cce_order);
    }
    variants.sort();
    let family = cfg.bath_family()?;
    let times = cfg.time_grid()?;

    let mut runs = Vec::new();
    let mut curves = Vec::new();
    for &v in &variants {
        let bath = bath_prefix(&family, v.n_spins)?;
        let start = Instant::now();
        let outcome = cce_run(&bath, &times, &cfg.cce_options(v.cce_order))?;
        let wall_seconds = start.elapsed().as_secs_f64();
        let file = format!("curve_N{}_M{}.csv", v.n_spins, v.cce_order);
        write(out, &file, &outcome.curve.to_csv(&curve_extras(&hash, &outcome.diagnostics)))?;
        runs.push(VariantResult { variant: v, file, diagnostics: outcome.diagnostics, wall_seconds });
        curves.push(outcome.curve);
    }

    let mut summary = Vec::new();
    for (i, a) in variants.iter().enumerate() {
        let next_order = (i + 1..variants.len()).find(|&j| variants[j].n_spins == a.n_spins);
        let next_size = (i + 1..variants.len()).find(|&j| variants[j].cce_order == a.cce_order);
        for j in next_order.into_iter().chain(next_size) {
            summary.push(ConvergenceRow { from: *a, to: variants[j], max_abs_diff: curves[i].max_abs_diff(&curves[j]) });
        }
    }
    let mut csv = format!("# config_hash={hash}\nN_from,M_from,N_to,M_to,max_abs_diff\n");
    for r in &summary {
        let _ = writeln!(
            csv,
            "{},{},{},{},{:.16e}",
            r.from.n_spins, r.from.cce_order, r.to.n_spins, r.to.cce_order, r.max_abs_diff
        );
    }
    write(out, "convergence_summary.csv", &csv)?;
    Ok(ConvergenceOutcome { runs, duplicates, summary, curves })
}

#[derive(Clone, Debug)]
pub struct ZenoOutcome {
    pub curve: SurvivalCurve,
    pub report: ZenoReport,
    pub cce: CceDiagnostics,
    pub regime: Option<RegimeFit>,
    pub f_normalization_error: f64,
    pub wall_seconds: f64,
}

/// `P(τ)^n` at `t = nτ` for every τ, up to the end of the uniform grid.
pub fn zeno_curves_csv(curve: &SurvivalCurve, taus: &[f64], t_max: f64, hash: &str) -> Result<(String, ZenoDiagnostics)> {
    let mut diag = ZenoDiagnostics::default();
    let mut s = format!("# config_hash={hash}\ntau_seconds,n,t_seconds,P_n\n");
    for &tau in taus {
        let p = curve.value_at(tau)?;
        let n_max = (t_max / tau * (1.0 + 1e-12)).floor() as u32;
        for n in 0..=n_max {
            let pn = repeated_measurement_survival(p, n, &mut diag)?;
            let _ = writeln!(s, "{tau:.16e},{n},{:.16e},{pn:.16e}", n as f64 * tau);
        }
    }
    Ok((s, diag))
}

/// Undisturbed curve, measured curves, rate report and `meta.json`.
pub fn run_zeno_study(cfg: &ExperimentConfig, out: &Path) -> Result<ZenoOutcome> {
    zeno_study(cfg, out, None)
}

fn zeno_study(cfg: &ExperimentConfig, out: &Path, convergence: Option<&ConvergenceOutcome>) -> Result<ZenoOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    let start = Instant::now();
    let hash = cfg.hash();
    let family = cfg.bath_family()?;
    let bath = bath_prefix(&family, cfg.bath.n_spins)?;
    family.save(&out.join("bath.json"))?;

    let times = cfg.zeno_grid()?;
    let taus = cfg.taus();
    let outcome = cce_run(&bath, &times, &cfg.cce_options(cfg.cce_order))?;
    let curve = outcome.curve;
    write(out, "undisturbed.csv", &curve.to_csv(&curve_extras(&hash, &outcome.diagnostics)))?;

    let t_max = cfg.time_grid.t_max_us * US;
    let (zeno_csv, zeno_diag) = zeno_curves_csv(&curve, &taus, t_max, &hash)?;
    write(out, "zeno_curves.csv", &zeno_csv)?;

    let nv = bath.nv();
    let spectrum: Vec<(f64, f64)> = spectral_weights(&bath);
    let broadening_tau = cfg.broadening_tau_us * US;
    let mut report =
        ZenoReport::build(&curve, &taus, &spectrum, nv.omega_a(), broadening_tau, cfg.smoothing_sigma_rad_s)?;
    report.diagnostics.clamped_high += zeno_diag.clamped_high;
    report.diagnostics.clamped_low += zeno_diag.clamped_low;
    write(out, "zeno_report.csv", &report.to_csv(&[("config_hash", hash.clone())]))?;

    // regime fit on the uniform part of the curve only
    let uniform = cfg.time_grid()?;
    let values = uniform.iter().map(|&t| curve.value_at(t)).collect::<Result<Vec<_>>>()?;
    let uniform_curve = SurvivalCurve { times: uniform, values, method: curve.method, meta: curve.meta.clone() };
    let regime = regime_fit(&uniform_curve, &RegimeFitOptions::default()).ok();

    let f_normalization_error = taus
        .iter()
        .chain(std::iter::once(&broadening_tau))
        .map(|&tau| (broadening_integral(tau, nv.omega_a(), 2000.0 * 2.0 * std::f64::consts::PI / tau, 400_001) - 1.0).abs())
        .fold(0.0, f64::max);

    let wall_seconds = start.elapsed().as_secs_f64();
    let zeno = ZenoOutcome { curve, report, cce: outcome.diagnostics, regime, f_normalization_error, wall_seconds };
    write_meta(cfg, out, &hash, &zeno, convergence)?;
    Ok(zeno)
}

fn write_meta(
    cfg: &ExperimentConfig,
    out: &Path,
    hash: &str,
    zeno: &ZenoOutcome,
    convergence: Option<&ConvergenceOutcome>,
) -> Result<()> {
    let timestamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let meta = serde_json::json!({
        "config_hash": hash,
        "config": cfg,
        "seed": cfg.bath.seed,
        "rng": RNG_ALGORITHM,
        "versions": { "nvzeno": env!("CARGO_PKG_VERSION") },
        "constants": PhysConstants::default(),
        "threads": cfg.threads,
        "unix_time": timestamp,
        "zeno": {
            "wall_seconds": zeno.wall_seconds,
            "cce_diagnostics": zeno.cce,
            "clamp_diagnostics": zeno.report.diagnostics,
            "regime_fit": zeno.regime,
            "f_normalization_error": zeno.f_normalization_error,
            "smoothing_sigma_rad_s": zeno.report.smoothing_sigma,
            "omega_a_rad_s": zeno.report.omega_a,
        },
        "convergence": convergence,
    });
    write(out, "meta.json", &serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

/// Convergence study (when comparison runs are given) followed by the Zeno study.
pub fn simulate(cfg: &ExperimentConfig, out: &Path) -> Result<ZenoOutcome> {
    cfg.validate()?;
    let convergence = if cfg.comparison_runs.is_empty() { None } else { Some(run_convergence_study(cfg, out)?) };
    zeno_study(cfg, out, convergence.as_ref())
}

/// Exact propagation of the whole configured bath on the uniform grid.
pub fn run_oracle(cfg: &ExperimentConfig, out: &Path) -> Result<SurvivalCurve> {
    cfg.validate()?;
    if cfg.bath.n_spins > cfg.exact_cap {
        return Err(Error::Budget(format!(
            "exact propagation of {} spins exceeds exact_cap {}",
            cfg.bath.n_spins, cfg.exact_cap
        )));
    }
    std::fs::create_dir_all(out)?;
    let hash = cfg.hash();
    let bath = bath_prefix(&cfg.bath_family()?, cfg.bath.n_spins)?;
    let curve = exact_survival_full_capped(&bath, &cfg.time_grid()?, cfg.exact_cap, cfg.initial_nuclear_spin)?;
    write(out, &format!("curve_N{}_exact.csv", bath.len()), &curve.to_csv(&[("config_hash", hash)]))?;
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_config() -> ExperimentConfig {
        ExperimentConfig::from_json(
            r#"{
                "bath": { "seed": 7, "n_spins": 4 },
                "cce_order": 2,
                "time_grid": { "t_max_us": 40.0, "n_points": 21 },
                "tau_grid_us": [2.0, 4.0, 12.0],
                "threads": 1
            }"#,
        )
        .unwrap()
    }

    #[test]
    fn defaults_and_units() {
        let cfg = small_config();
        assert_eq!(cfg.bath.b_field_gauss, 1024.98);
        assert!((cfg.field_tesla() - 0.102498).abs() < 1e-15);
        assert_eq!(cfg.broadening_tau_us, 12.0);
        assert_eq!(cfg.exact_cap, DEFAULT_EXACT_CAP);
        assert_eq!(cfg.initial_nuclear_spin, NuclearSpin::Up);
        let bc = cfg.bath_config(4);
        assert!((bc.r_min - 0.5e-9).abs() < 1e-24);
        assert_eq!(cfg.taus()[0], 2e-6);
    }

    #[test]
    fn invalid_configs() {
        let base = serde_json::to_value(small_config()).unwrap();
        let cases: Vec<(&str, serde_json::Value)> = vec![
            ("/tau_grid_us", serde_json::json!([])),
            ("/tau_grid_us", serde_json::json!([-1.0])),
            ("/tau_grid_us", serde_json::json!([41.0])),
            ("/cce_order", serde_json::json!(0)),
            ("/time_grid/t_max_us", serde_json::json!(0.0)),
            ("/time_grid/n_points", serde_json::json!(1)),
            ("/bath/abundance", serde_json::json!(1.5)),
            ("/bath/n_spins", serde_json::json!(0)),
        ];
        for (ptr, val) in cases {
            let mut v = base.clone();
            *v.pointer_mut(ptr).unwrap() = val;
            let err = ExperimentConfig::from_json(&v.to_string()).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{ptr}: {err}");
            assert_eq!(err.exit_code(), 2);
        }
        let err = ExperimentConfig::from_json(r#"{"bath": {"seed": 1, "n_spins": 3}, "bogus": 1}"#).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = small_config();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        b.bath.seed += 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn zeno_grid_contains_taus() {
        let cfg = small_config();
        let grid = cfg.zeno_grid().unwrap();
        for tau in cfg.taus() {
            assert!(grid.contains(&tau));
        }
        assert!(grid.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn duplicate_variants_are_dropped() {
        let mut cfg = small_config();
        cfg.comparison_runs = vec![
            Variant { n_spins: 4, cce_order: 1 },
            Variant { n_spins: 4, cce_order: 2 },
            Variant { n_spins: 4, cce_order: 1 },
        ];
        let (unique, dups) = cfg.variants();
        assert_eq!(unique.len(), 2);
        assert_eq!(dups, vec![Variant { n_spins: 4, cce_order: 1 }]);
    }

    #[test]
    fn single_tau_at_t_max_reproduces_endpoint() {
        let mut cfg = small_config();
        cfg.tau_grid_us = vec![cfg.time_grid.t_max_us];
        let dir = tempfile::tempdir().unwrap();
        let z = run_zeno_study(&cfg, dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("zeno_curves.csv")).unwrap();
        let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).skip(1).collect();
        assert_eq!(rows.len(), 2);
        let p1: f64 = rows[1].split(',').nth(3).unwrap().parse().unwrap();
        assert_eq!(p1, *z.curve.values.last().unwrap());
    }

    #[test]
    fn oracle_respects_cap() {
        let mut cfg = small_config();
        cfg.exact_cap = 3;
        let dir = tempfile::tempdir().unwrap();
        let err = run_oracle(&cfg, dir.path()).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        cfg.exact_cap = 10;
        let c = run_oracle(&cfg, dir.path()).unwrap();
        assert!(dir.path().join("curve_N4_exact.csv").exists());
        assert!((c.values[0] - 1.0).abs() < 1e-13);
    }
}
