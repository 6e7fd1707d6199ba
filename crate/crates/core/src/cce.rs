//! Cluster-correlation expansion of the survival probability.
//!
//! Each cluster `c` contributes a correlation factor
//! `P̃_c(t) = P_c(t) / Π_{c′ ⊊ c} P̃_{c′}(t)`, where `P_c` is the exact survival
//! with only the spins of `c` present. The order-`M` approximation is the
//! product of all factors with `|c| ≤ M`.
//!
//! Factors of one order are computed in parallel; their logarithms are
//! folded into the accumulator chunk by chunk in a fixed order, so the result
//! does not depend on the number of worker threads.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{Read as _, Write as _};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bath::Bath;
use crate::dynamics::{
    build_cluster_hamiltonian, denominator_unity_residual, survival_exact_from, unitarity_residual, CurveMeta,
    Method, NuclearSpin, Propagator, SurvivalCurve,
};
use crate::{Error, Result};

/// Default threshold below which a sub-cluster factor is treated as zero.
pub const GUARD_EPS: f64 = 1e-9;

/// Default cap on the total number of clusters of one run.
pub const DEFAULT_CLUSTER_BUDGET: usize = 5_000_000;

/// Largest bath the exact full-Hilbert-space oracle accepts by default
/// (dimension 3072; twelve spins need ~10 GB of eigensolver workspace).
pub const DEFAULT_EXACT_CAP: usize = 10;

const CHUNK: usize = 2048;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ClusterPolicy {
    /// Every subset of size ≤ M.
    #[default]
    AllSubsets,
    /// Only clusters whose largest pairwise distance is ≤ `diameter_m`.
    MaxDiameter { diameter_m: f64 },
}

impl ClusterPolicy {
    pub fn cutoff(&self) -> Option<f64> {
        match *self {
            ClusterPolicy::AllSubsets => None,
            ClusterPolicy::MaxDiameter { diameter_m } => Some(diameter_m),
        }
    }
}

/// Clusters of sizes `1..=order`, each size stored flat in lexicographic order.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterSet {
    pub order: usize,
    pub policy: ClusterPolicy,
    by_size: Vec<Vec<u32>>,
}

impl ClusterSet {
    pub fn count_of_size(&self, k: usize) -> usize {
        if k == 0 || k > self.order {
            0
        } else {
            self.by_size[k - 1].len() / k
        }
    }

    pub fn len(&self) -> usize {
        (1..=self.order).map(|k| self.count_of_size(k)).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn of_size(&self, k: usize) -> impl ExactSizeIterator<Item = &[u32]> + '_ {
        self.by_size[k - 1].chunks_exact(k)
    }

    /// All clusters, ascending size then lexicographic.
    pub fn iter(&self) -> impl Iterator<Item = &[u32]> + '_ {
        (1..=self.order).flat_map(move |k| self.of_size(k))
    }
}

fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// Clusters up to size `order` under `policy`, failing if more than `budget`.
pub fn enumerate_clusters(bath: &Bath, order: usize, policy: ClusterPolicy, budget: usize) -> Result<ClusterSet> {
    let n = bath.len();
    if order == 0 || order > n {
        return Err(Error::Config(format!("CCE order {order} must be between 1 and the bath size {n}")));
    }
    if order > crate::dynamics::MAX_CLUSTER_SITES {
        return Err(Error::Budget(format!("CCE order {order} exceeds the cluster size limit")));
    }
    match policy {
        ClusterPolicy::AllSubsets => {
            let total: u128 = (1..=order).map(|k| binomial(n, k)).sum();
            if total > budget as u128 {
                return Err(Error::Budget(format!(
                    "{total} clusters for N = {n}, M = {order} exceed the budget of {budget}; \
                     use a max_diameter cluster policy or a smaller order"
                )));
            }
            let mut by_size = Vec::with_capacity(order);
            for k in 1..=order {
                let mut flat = Vec::with_capacity(binomial(n, k) as usize * k);
                let mut idx: Vec<u32> = (0..k as u32).collect();
                loop {
                    flat.extend_from_slice(&idx);
                    // next k-combination in lexicographic order
                    let mut i = k;
                    while i > 0 && idx[i - 1] as usize == n - k + i - 1 {
                        i -= 1;
                    }
                    if i == 0 {
                        break;
                    }
                    idx[i - 1] += 1;
                    for j in i..k {
                        idx[j] = idx[j - 1] + 1;
                    }
                }
                by_size.push(flat);
            }
            Ok(ClusterSet { order, policy, by_size })
        }
        ClusterPolicy::MaxDiameter { diameter_m } => {
            if !(diameter_m > 0.0) {
                return Err(Error::Config(format!("cluster diameter cutoff must be positive, got {diameter_m}")));
            }
            let pos: Vec<_> = bath.sites.iter().map(|s| s.position()).collect();
            let close = |a: u32, b: u32| (pos[a as usize] - pos[b as usize]).norm() <= diameter_m;
            let mut by_size: Vec<Vec<u32>> = vec![(0..n as u32).collect()];
            let mut total = n;
            for k in 2..=order {
                let mut flat = Vec::new();
                for c in by_size[k - 2].chunks_exact(k - 1) {
                    let last = *c.last().unwrap();
                    for j in last + 1..n as u32 {
                        if c.iter().all(|&i| close(i, j)) {
                            flat.extend_from_slice(c);
                            flat.push(j);
                            total += 1;
                            if total > budget {
                                return Err(Error::Budget(format!(
                                    "more than {budget} clusters with diameter ≤ {diameter_m:e} m; \
                                     tighten the cutoff or lower the order"
                                )));
                            }
                        }
                    }
                }
                by_size.push(flat);
            }
            Ok(ClusterSet { order, policy, by_size })
        }
    }
}

/// Correlation factors of every cluster below the current order.
#[derive(Default)]
pub struct CorrelationTable {
    n_times: usize,
    index: Vec<HashMap<Box<[u32]>, usize>>,
    values: Vec<Vec<f64>>,
}

impl CorrelationTable {
    pub fn new(n_times: usize) -> Self {
        Self { n_times, index: Vec::new(), values: Vec::new() }
    }

    pub fn get(&self, cluster: &[u32]) -> Option<&[f64]> {
        let k = cluster.len();
        let &slot = self.index.get(k.checked_sub(1)?)?.get(cluster)?;
        Some(&self.values[k - 1][slot * self.n_times..(slot + 1) * self.n_times])
    }

    pub fn insert(&mut self, cluster: &[u32], factor: &[f64]) {
        let k = cluster.len();
        while self.index.len() < k {
            self.index.push(HashMap::new());
            self.values.push(Vec::new());
        }
        let slot = self.values[k - 1].len() / self.n_times;
        self.index[k - 1].insert(cluster.into(), slot);
        self.values[k - 1].extend_from_slice(factor);
    }

    pub fn len(&self) -> usize {
        self.index.iter().map(HashMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `P̃_c = P_c / Π_{c′ ⊊ c} P̃_{c′}` pointwise. Where any sub-factor has
/// magnitude below `eps`, or the quotient is not finite, the result is set
/// to 1; the return value counts such points.
pub fn correlation_factor(cluster: &[u32], table: &CorrelationTable, p_cluster: &[f64], eps: f64) -> Result<(Vec<f64>, u64)> {
    let k = cluster.len();
    let mut denom = vec![1.0; p_cluster.len()];
    let mut guarded = vec![false; p_cluster.len()];
    let mut sub = [0u32; 32];
    for mask in 1u32..(1u32 << k) - 1 {
        let mut len = 0;
        for (b, &site) in cluster.iter().enumerate() {
            if mask & (1 << b) != 0 {
                sub[len] = site;
                len += 1;
            }
        }
        let f = table.get(&sub[..len]).ok_or_else(|| {
            Error::Numerical(format!("missing correlation factor for {:?} inside {cluster:?}", &sub[..len]))
        })?;
        for ((d, g), &v) in denom.iter_mut().zip(guarded.iter_mut()).zip(f) {
            if v.abs() < eps {
                *g = true;
            }
            *d *= v;
        }
    }
    let mut count = 0;
    let out = p_cluster
        .iter()
        .zip(denom)
        .zip(guarded)
        .map(|((&p, d), g)| {
            let q = p / d;
            if g || !q.is_finite() {
                count += 1;
                1.0
            } else {
                q
            }
        })
        .collect();
    Ok((out, count))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CceOptions {
    pub order: usize,
    pub policy: ClusterPolicy,
    pub include_nuclear_dipole: bool,
    pub initial_spin: NuclearSpin,
    /// Worker threads; 0 means the rayon default.
    pub threads: usize,
    pub cluster_budget: usize,
    pub guard_eps: f64,
    /// Check `max|U†U − 1|` at the last grid time for every cluster.
    pub check_unitarity: bool,
    /// Progress lines on stderr at this interval.
    pub progress_every: Option<Duration>,
    /// Directory for resumable per-chunk results.
    pub cache_dir: Option<PathBuf>,
}

impl CceOptions {
    pub fn order(order: usize) -> Self {
        Self {
            order,
            policy: ClusterPolicy::AllSubsets,
            include_nuclear_dipole: false,
            initial_spin: NuclearSpin::Up,
            threads: 0,
            cluster_budget: DEFAULT_CLUSTER_BUDGET,
            guard_eps: GUARD_EPS,
            check_unitarity: true,
            progress_every: None,
            cache_dir: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CceDiagnostics {
    pub n_clusters: usize,
    pub guard_count: u64,
    pub negative_factor_count: u64,
    /// Largest `max|U†U − 1|` seen (0 when unchecked).
    pub max_unitarity_residual: f64,
    pub denominator_residual: f64,
    pub cache_hits: usize,
    /// Grid points where the product overflowed or became undefined.
    pub non_finite_points: usize,
}

#[derive(Clone, Debug)]
pub struct CceOutcome {
    pub curve: SurvivalCurve,
    pub diagnostics: CceDiagnostics,
}

/// Tolerance for the `|0⟩`-eigenstate (unit denominator) assertion.
pub const DENOMINATOR_TOL: f64 = 1e-12;

/// Health threshold on per-cluster unitarity residuals.
pub const UNITARITY_TOL: f64 = 1e-11;

/// `P^(M)(t)` with default options.
pub fn cce_survival(bath: &Bath, order: usize, times: &[f64]) -> Result<SurvivalCurve> {
    Ok(cce_run(bath, times, &CceOptions::order(order))?.curve)
}

struct ChunkResult {
    /// Factor curves of the chunk, concatenated.
    factors: Vec<f64>,
    guard: u64,
    residual: f64,
}

pub fn cce_run(bath: &Bath, times: &[f64], opts: &CceOptions) -> Result<CceOutcome> {
    let nv = bath.nv();
    let denominator_residual = denominator_unity_residual(&nv, times)?;
    if denominator_residual > DENOMINATOR_TOL {
        return Err(Error::Numerical(format!(
            "CCE denominator differs from unity by {denominator_residual:e}"
        )));
    }
    let clusters = enumerate_clusters(bath, opts.order, opts.policy, opts.cluster_budget)?;
    let nt = times.len();
    let cache = opts.cache_dir.as_ref().map(|dir| ChunkCache::new(dir.clone(), bath, times, opts)).transpose()?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;

    let mut table = CorrelationTable::new(nt);
    let mut log_acc = vec![0.0f64; nt];
    let mut sign = vec![1.0f64; nt];
    let mut diag = CceDiagnostics { n_clusters: clusters.len(), denominator_residual, ..Default::default() };
    let started = Instant::now();
    let mut last_report = started;
    let mut done = 0usize;

    for k in 1..=opts.order {
        let flat = &clusters.by_size[k - 1];
        let n_k = flat.len() / k;
        for (chunk_id, chunk) in flat.chunks(CHUNK * k).enumerate() {
            let cached = cache.as_ref().and_then(|c| c.load(k, chunk_id, chunk.len() / k * nt));
            let result = match cached {
                Some(r) => {
                    diag.cache_hits += 1;
                    r
                }
                None => {
                    let per: Vec<Result<(Vec<f64>, u64, f64)>> = pool.install(|| {
                        chunk
                            .par_chunks_exact(k)
                            .map(|c| cluster_factor(bath, c, times, &table, opts))
                            .collect()
                    });
                    let mut r = ChunkResult { factors: Vec::with_capacity(chunk.len() / k * nt), guard: 0, residual: 0.0 };
                    for item in per {
                        let (f, g, res) = item?;
                        r.factors.extend_from_slice(&f);
                        r.guard += g;
                        r.residual = r.residual.max(res);
                    }
                    if let Some(c) = &cache {
                        c.store(k, chunk_id, &r)?;
                    }
                    r
                }
            };
            diag.guard_count += result.guard;
            diag.max_unitarity_residual = diag.max_unitarity_residual.max(result.residual);

            // fixed-order fold: chunk-local sum first, then into the total
            let mut chunk_log = vec![0.0f64; nt];
            for (c, f) in chunk.chunks_exact(k).zip(result.factors.chunks_exact(nt)) {
                for t in 0..nt {
                    let v = f[t];
                    if v < 0.0 {
                        diag.negative_factor_count += 1;
                        sign[t] = -sign[t];
                    }
                    chunk_log[t] += v.abs().ln();
                }
                if k < opts.order {
                    table.insert(c, f);
                }
            }
            for t in 0..nt {
                log_acc[t] += chunk_log[t];
            }

            done += chunk.len() / k;
            if let Some(every) = opts.progress_every {
                if last_report.elapsed() >= every {
                    last_report = Instant::now();
                    eprintln!(
                        "cce: order {k}/{}: {done}/{} clusters ({n_k} at this order), {:.1}s",
                        opts.order,
                        clusters.len(),
                        started.elapsed().as_secs_f64()
                    );
                }
            }
        }
    }

    if opts.check_unitarity && diag.max_unitarity_residual > UNITARITY_TOL {
        return Err(Error::Numerical(format!(
            "cluster propagation lost unitarity: residual {:e}",
            diag.max_unitarity_residual
        )));
    }
    let values: Vec<f64> = log_acc.iter().zip(&sign).map(|(l, s)| s * l.exp()).collect();
    // a truncated expansion can overflow where sub-cluster factors dip; such
    // points are reported raw and counted rather than aborting the run
    diag.non_finite_points = values.iter().filter(|v| !v.is_finite()).count();
    let curve = SurvivalCurve {
        times: times.to_vec(),
        values,
        method: Method::Cce(opts.order),
        meta: CurveMeta {
            seed: bath.config.seed,
            n_spins: bath.len(),
            b_z: bath.config.field_bz,
            order: opts.order,
            cutoff: opts.policy.cutoff(),
            guard_count: diag.guard_count,
            n_clusters: clusters.len(),
        },
    };
    Ok(CceOutcome { curve, diagnostics: diag })
}

fn cluster_factor(
    bath: &Bath,
    cluster: &[u32],
    times: &[f64],
    table: &CorrelationTable,
    opts: &CceOptions,
) -> Result<(Vec<f64>, u64, f64)> {
    let sites: Vec<usize> = cluster.iter().map(|&s| s as usize).collect();
    let h = build_cluster_hamiltonian(&bath.nv(), bath, &sites, opts.include_nuclear_dipole)?;
    let prop = Propagator::new(&h)?;
    let config = vec![opts.initial_spin; sites.len()];
    let p = prop.survival(&config, times);
    if let Some(bad) = p.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("non-finite P_c = {bad} for cluster {cluster:?}")));
    }
    let residual = if opts.check_unitarity {
        unitarity_residual(&prop, *times.last().unwrap_or(&0.0))
    } else {
        0.0
    };
    // The factor of the whole bath closes the telescoping product exactly,
    // whatever happened to its sub-factors, so it is never frozen.
    let eps = if cluster.len() == bath.len() { 0.0 } else { opts.guard_eps };
    let (f, guard) = correlation_factor(cluster, table, &p, eps)?;
    Ok((f, guard, residual))
}

/// Exact survival of the whole bath in the full Hilbert space.
pub fn exact_survival_full(bath: &Bath, times: &[f64]) -> Result<SurvivalCurve> {
    exact_survival_full_capped(bath, times, DEFAULT_EXACT_CAP, NuclearSpin::Up)
}

pub fn exact_survival_full_capped(bath: &Bath, times: &[f64], cap: usize, spin: NuclearSpin) -> Result<SurvivalCurve> {
    if bath.len() > cap {
        return Err(Error::Budget(format!(
            "exact propagation of {} spins exceeds the cap of {cap} (dimension {})",
            bath.len(),
            3u128 << bath.len()
        )));
    }
    let sites: Vec<usize> = (0..bath.len()).collect();
    let h = build_cluster_hamiltonian(&bath.nv(), bath, &sites, false)?;
    let mut curve = survival_exact_from(&h, &vec![spin; sites.len()], times)?;
    curve.meta = CurveMeta {
        seed: bath.config.seed,
        n_spins: bath.len(),
        b_z: bath.config.field_bz,
        order: bath.len(),
        ..Default::default()
    };
    Ok(curve)
}

struct ChunkCache {
    dir: PathBuf,
    key: String,
}

impl ChunkCache {
    fn new(dir: PathBuf, bath: &Bath, times: &[f64], opts: &CceOptions) -> Result<Self> {
        std::fs::create_dir_all(&dir)?;
        let mut h = Sha256::new();
        h.update(bath.to_json()?.as_bytes());
        for t in times {
            h.update(t.to_le_bytes());
        }
        h.update(serde_json::to_vec(&(
            &opts.policy,
            opts.include_nuclear_dipole,
            opts.initial_spin,
            opts.guard_eps,
            opts.check_unitarity,
        ))?);
        let digest = h.finalize();
        let key = digest.iter().take(12).fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        });
        Ok(Self { dir, key })
    }

    fn path(&self, k: usize, chunk: usize) -> PathBuf {
        self.dir.join(format!("{}-k{k}-c{chunk}.bin", self.key))
    }

    fn load(&self, k: usize, chunk: usize, expected: usize) -> Option<ChunkResult> {
        let mut buf = Vec::new();
        std::fs::File::open(self.path(k, chunk)).ok()?.read_to_end(&mut buf).ok()?;
        if buf.len() != 16 + expected * 8 {
            return None;
        }
        let guard = u64::from_le_bytes(buf[0..8].try_into().ok()?);
        let residual = f64::from_le_bytes(buf[8..16].try_into().ok()?);
        let factors = buf[16..].chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        Some(ChunkResult { factors, guard, residual })
    }

    fn store(&self, k: usize, chunk: usize, r: &ChunkResult) -> Result<()> {
        let path = self.path(k, chunk);
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&r.guard.to_le_bytes())?;
        f.write_all(&r.residual.to_le_bytes())?;
        let mut bytes = Vec::with_capacity(r.factors.len() * 8);
        for v in &r.factors {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        f.write_all(&bytes)?;
        drop(f);
        std::fs::rename(tmp, path)?;
        Ok(())
    }
}

impl SurvivalCurve {
    /// CSV with `#` metadata lines, then `t_seconds,P` rows at 17 significant digits.
    pub fn to_csv(&self, extra: &[(&str, String)]) -> String {
        let m = &self.meta;
        let mut s = String::new();
        let _ = writeln!(s, "# method={}", self.method);
        let _ = writeln!(s, "# seed={}", m.seed);
        let _ = writeln!(s, "# n_spins={}", m.n_spins);
        let _ = writeln!(s, "# order={}", m.order);
        let _ = writeln!(s, "# b_z_tesla={:.16e}", m.b_z);
        match (self.times.first(), self.times.last()) {
            (Some(a), Some(b)) => {
                let _ = writeln!(s, "# grid=points:{} first:{:.16e} last:{:.16e}", self.times.len(), a, b);
            }
            _ => {
                let _ = writeln!(s, "# grid=points:0");
            }
        }
        match m.cutoff {
            Some(c) => {
                let _ = writeln!(s, "# cutoff_m={c:.16e}");
            }
            None => {
                let _ = writeln!(s, "# cutoff_m=none");
            }
        }
        let _ = writeln!(s, "# n_clusters={}", m.n_clusters);
        let _ = writeln!(s, "# guard_count={}", m.guard_count);
        for (k, v) in extra {
            let _ = writeln!(s, "# {k}={v}");
        }
        s.push_str("t_seconds,P\n");
        for (t, p) in self.times.iter().zip(&self.values) {
            let _ = writeln!(s, "{t:.16e},{p:.16e}");
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut meta = CurveMeta::default();
        let mut method = Method::Exact;
        let mut times = Vec::new();
        let mut values = Vec::new();
        let bad = |what: &str| Error::Parse(format!("survival CSV: bad {what}"));
        let mut header_seen = false;
        for line in text.lines() {
            if let Some(rest) = line.strip_prefix('#') {
                let Some((k, v)) = rest.trim().split_once('=') else { continue };
                match k {
                    "method" => {
                        method = if v == "exact" {
                            Method::Exact
                        } else {
                            let m = v.strip_prefix("cce(").and_then(|x| x.strip_suffix(')')).ok_or_else(|| bad("method"))?;
                            Method::Cce(m.parse().map_err(|_| bad("method"))?)
                        }
                    }
                    "seed" => meta.seed = v.parse().map_err(|_| bad("seed"))?,
                    "n_spins" => meta.n_spins = v.parse().map_err(|_| bad("n_spins"))?,
                    "order" => meta.order = v.parse().map_err(|_| bad("order"))?,
                    "b_z_tesla" => meta.b_z = v.parse().map_err(|_| bad("b_z"))?,
                    "cutoff_m" => meta.cutoff = if v == "none" { None } else { Some(v.parse().map_err(|_| bad("cutoff"))?) },
                    "n_clusters" => meta.n_clusters = v.parse().map_err(|_| bad("n_clusters"))?,
                    "guard_count" => meta.guard_count = v.parse().map_err(|_| bad("guard_count"))?,
                    _ => {}
                }
            } else if line.trim() == "t_seconds,P" {
                header_seen = true;
            } else if !line.trim().is_empty() {
                let (t, p) = line.split_once(',').ok_or_else(|| bad("row"))?;
                times.push(t.trim().parse().map_err(|_| bad("time"))?);
                values.push(p.trim().parse().map_err(|_| bad("value"))?);
            }
        }
        if !header_seen {
            return Err(bad("header"));
        }
        Ok(Self { times, values, method, meta })
    }
}
