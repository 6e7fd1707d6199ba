//! Cluster Hamiltonians and exact survival probabilities by Hermitian
//! eigendecomposition.
//!
//! A cluster Hamiltonian keeps the full NV Hamiltonian, the nuclear Zeeman
//! term of every cluster spin, the complete (non-secular) hyperfine coupling
//! `S·A_i·I_i` and, optionally, the dipolar couplings between cluster spins.
//! No rotating-wave approximation is made.

use faer::{Mat, Side};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bath::Bath;
use crate::physics::{dipole_tensor, NvParams, SpinOps};
use crate::{Error, Result, C64};

/// Largest cluster a Hamiltonian may be built for (dimension 3·2¹⁴).
pub const MAX_CLUSTER_SITES: usize = 14;

/// Row of `|0⟩` in the electron basis `(|+1⟩, |0⟩, |−1⟩)`.
pub const ELECTRON_ZERO: usize = 1;

/// Initial polarization of a bath spin along the NV axis.
///
/// `Up` is `m_I = +½`, the nuclear Zeeman ground state for `γ_c > 0`. Near the
/// `|0⟩`/`|−1⟩` anticrossing the electron exchanges energy with the nucleus
/// through `|0, +½⟩ ↔ |−1, −½⟩`, so this is the default.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NuclearSpin {
    #[default]
    Up,
    Down,
}

impl NuclearSpin {
    /// Bit used in the cluster basis: `0` for `m=+½`, `1` for `m=−½`.
    pub fn bit(self) -> usize {
        match self {
            NuclearSpin::Up => 0,
            NuclearSpin::Down => 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ClusterHamiltonian {
    /// Bath site indices, ascending.
    pub sites: Vec<usize>,
    pub matrix: Mat<C64>,
    pub include_nuclear_dipole: bool,
}

impl ClusterHamiltonian {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn n_sites(&self) -> usize {
        self.sites.len()
    }

    /// Add `c·1`; survival probabilities do not depend on it.
    pub fn shifted(&self, c: f64) -> Self {
        let mut out = self.clone();
        for k in 0..out.dim() {
            out.matrix[(k, k)] += C64::new(c, 0.0);
        }
        out
    }
}

/// Tag saying how a survival curve was produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Exact,
    Cce(usize),
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Method::Exact => write!(f, "exact"),
            Method::Cce(m) => write!(f, "cce({m})"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CurveMeta {
    pub seed: u64,
    pub n_spins: usize,
    pub b_z: f64,
    pub order: usize,
    /// Cluster diameter cutoff (m), if one was applied.
    pub cutoff: Option<f64>,
    /// Number of `(cluster, t)` points where the divide guard fired.
    pub guard_count: u64,
    pub n_clusters: usize,
}

/// Survival probability `P(t)` of the electron `|0⟩` state on a time grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SurvivalCurve {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub method: Method,
    pub meta: CurveMeta,
}

impl SurvivalCurve {
    /// `max_t |P(t) − P'(t)|`; NaN if either curve has a NaN point.
    pub fn max_abs_diff(&self, other: &SurvivalCurve) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, |m: f64, d| if d.is_nan() || m.is_nan() { f64::NAN } else { m.max(d) })
    }

    /// `P(t)` by linear interpolation on the grid.
    pub fn value_at(&self, t: f64) -> Result<f64> {
        let (first, last) = match (self.times.first(), self.times.last()) {
            (Some(&a), Some(&b)) => (a, b),
            _ => return Err(Error::Domain("empty survival curve".into())),
        };
        if !(t >= first && t <= last) {
            return Err(Error::Domain(format!("t = {t:e} outside the grid [{first:e}, {last:e}]")));
        }
        let k = self.times.partition_point(|&x| x < t);
        if self.times[k] == t {
            return Ok(self.values[k]);
        }
        let (t0, t1) = (self.times[k - 1], self.times[k]);
        let (p0, p1) = (self.values[k - 1], self.values[k]);
        Ok(p0 + (p1 - p0) * (t - t0) / (t1 - t0))
    }
}

/// `n` equally spaced times from 0 to `t_max` inclusive.
pub fn uniform_grid(t_max: f64, n: usize) -> Result<Vec<f64>> {
    if n < 2 || !(t_max > 0.0) || !t_max.is_finite() {
        return Err(Error::Domain(format!("time grid needs n ≥ 2 and t_max > 0 (got {n}, {t_max:e})")));
    }
    Ok((0..n).map(|k| t_max * k as f64 / (n - 1) as f64).collect())
}

fn check_grid(times: &[f64]) -> Result<()> {
    if times.is_empty() || times.iter().any(|t| !t.is_finite() || *t < 0.0) {
        return Err(Error::Domain("time grid must be nonempty, finite and nonnegative".into()));
    }
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Domain("time grid must be strictly ascending".into()));
    }
    Ok(())
}

/// Adds `coeff · local` acting on the listed tensor factors (0 is the
/// electron, `1 + p` is cluster spin `p`) to the full matrix.
fn embed(h: &mut Mat<C64>, n_sites: usize, factors: &[usize], local: &Mat<C64>) {
    let dims: Vec<usize> = factors.iter().map(|&f| if f == 0 { 3 } else { 2 }).collect();
    let ldim: usize = dims.iter().product();
    debug_assert_eq!(local.nrows(), ldim);
    let nb = 1usize << n_sites;

    // digit of factor `f` in full index `idx`
    let digit = |idx: usize, f: usize| -> usize {
        if f == 0 {
            idx / nb
        } else {
            (idx >> (n_sites - f)) & 1
        }
    };
    let with_digit = |idx: usize, f: usize, d: usize| -> usize {
        if f == 0 {
            d * nb + idx % nb
        } else {
            let bit = 1usize << (n_sites - f);
            (idx & !bit) | (d * bit)
        }
    };
    let split = |mut l: usize| -> Vec<usize> {
        let mut out = vec![0; dims.len()];
        for k in (0..dims.len()).rev() {
            out[k] = l % dims[k];
            l /= dims[k];
        }
        out
    };
    let local_digits: Vec<Vec<usize>> = (0..ldim).map(split).collect();

    for col in 0..h.ncols() {
        let lc = factors.iter().fold(0, |acc, &f| acc * if f == 0 { 3 } else { 2 } + digit(col, f));
        for (lr, ds) in local_digits.iter().enumerate() {
            let v = local[(lr, lc)];
            if v == C64::new(0.0, 0.0) {
                continue;
            }
            let row = factors.iter().zip(ds).fold(col, |idx, (&f, &d)| with_digit(idx, f, d));
            h[(row, col)] += v;
        }
    }
}

fn two_factor(a: &Mat<C64>, b: &Mat<C64>) -> Mat<C64> {
    let m = b.nrows();
    Mat::from_fn(a.nrows() * m, a.nrows() * m, |r, c| a[(r / m, c / m)] * b[(r % m, c % m)])
}

fn scaled(m: &Mat<C64>, c: f64) -> Mat<C64> {
    Mat::from_fn(m.nrows(), m.ncols(), |r, col| m[(r, col)] * c)
}

/// Hamiltonian of the NV electron and the bath spins listed in `sites`.
pub fn build_cluster_hamiltonian(
    nv: &NvParams,
    bath: &Bath,
    sites: &[usize],
    include_nuclear_dipole: bool,
) -> Result<ClusterHamiltonian> {
    if sites.len() > MAX_CLUSTER_SITES {
        return Err(Error::Budget(format!(
            "cluster of {} spins exceeds the maximum of {MAX_CLUSTER_SITES}",
            sites.len()
        )));
    }
    if let Some(&bad) = sites.iter().find(|&&s| s >= bath.len()) {
        return Err(Error::Domain(format!("site index {bad} out of range for a bath of {}", bath.len())));
    }
    let mut sorted = sites.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Domain(format!("duplicate site in cluster {sites:?}")));
    }

    let k = sorted.len();
    let dim = 3usize << k;
    let ops = SpinOps::new();
    let c = &nv.consts;
    let mut h = Mat::<C64>::zeros(dim, dim);

    // D S_z² − γ_e B S_z
    let nb = 1usize << k;
    let e_diag = [
        c.zero_field_splitting - c.gamma_e * nv.b_z,
        0.0,
        c.zero_field_splitting + c.gamma_e * nv.b_z,
    ];
    for (e, &v) in e_diag.iter().enumerate() {
        for b in 0..nb {
            h[(e * nb + b, e * nb + b)] += C64::new(v, 0.0);
        }
    }

    let zeeman = scaled(&ops.i[2], -c.gamma_c * nv.b_z);
    for (p, &s) in sorted.iter().enumerate() {
        embed(&mut h, k, &[1 + p], &zeeman);

        let a = &bath.sites[s].hyperfine;
        let mut local = Mat::<C64>::zeros(6, 6);
        for ai in 0..3 {
            for bi in 0..3 {
                let coeff = a.get(ai, bi);
                if coeff != 0.0 {
                    local += scaled(&two_factor(&ops.s[ai], &ops.i[bi]), coeff);
                }
            }
        }
        embed(&mut h, k, &[0, 1 + p], &local);
    }

    if include_nuclear_dipole {
        for p in 0..k {
            for q in p + 1..k {
                let rij = bath.sites[sorted[q]].position() - bath.sites[sorted[p]].position();
                let d = dipole_tensor(rij, c.gamma_c, c.gamma_c, c)?;
                let mut local = Mat::<C64>::zeros(4, 4);
                for ai in 0..3 {
                    for bi in 0..3 {
                        local += scaled(&two_factor(&ops.i[ai], &ops.i[bi]), d.get(ai, bi));
                    }
                }
                embed(&mut h, k, &[1 + p, 1 + q], &local);
            }
        }
    }

    // Assembled in floating point, so symmetrize exactly.
    for r in 0..dim {
        h[(r, r)].im = 0.0;
        for col in r + 1..dim {
            let v = (h[(r, col)] + h[(col, r)].conj()) * 0.5;
            h[(r, col)] = v;
            h[(col, r)] = v.conj();
        }
    }

    Ok(ClusterHamiltonian { sites: sorted, matrix: h, include_nuclear_dipole })
}

/// Eigendecomposition `H = V Λ V†` reused for any number of time points.
pub struct Propagator {
    eigvals: Vec<f64>,
    eigvecs: Mat<C64>,
    n_sites: usize,
}

impl Propagator {
    pub fn new(h: &ClusterHamiltonian) -> Result<Self> {
        let dim = h.dim();
        for r in 0..dim {
            for c in 0..dim {
                let v = h.matrix[(r, c)];
                if !v.re.is_finite() || !v.im.is_finite() {
                    return Err(Error::Numerical(format!("non-finite Hamiltonian entry at ({r}, {c})")));
                }
            }
        }
        let evd = h
            .matrix
            .self_adjoint_eigen(Side::Lower)
            .map_err(|e| Error::Numerical(format!("eigendecomposition failed: {e:?}")))?;
        let s = evd.S();
        let eigvals = (0..dim).map(|k| s[k].re).collect();
        Ok(Self { eigvals, eigvecs: evd.U().to_owned(), n_sites: h.n_sites() })
    }

    pub fn dim(&self) -> usize {
        self.eigvals.len()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigvals
    }

    /// Basis index of `|0⟩ ⊗ |config⟩`.
    pub fn initial_index(&self, config: &[NuclearSpin]) -> usize {
        debug_assert_eq!(config.len(), self.n_sites);
        let bits = config.iter().fold(0, |acc, s| (acc << 1) | s.bit());
        (ELECTRON_ZERO << self.n_sites) | bits
    }

    /// Probability of finding the electron in `|0⟩` at each time, starting
    /// from `|0⟩ ⊗ |config⟩`.
    pub fn survival(&self, config: &[NuclearSpin], times: &[f64]) -> Vec<f64> {
        let dim = self.dim();
        let nb = 1usize << self.n_sites;
        let i0 = self.initial_index(config);
        let v = &self.eigvecs;
        // coefficients of ψ(0) in the eigenbasis
        let coef: Vec<C64> = (0..dim).map(|n| v[(i0, n)].conj()).collect();
        let phased = Mat::<C64>::from_fn(dim, times.len(), |n, t| {
            let (s, c) = (-self.eigvals[n] * times[t]).sin_cos();
            coef[n] * C64::new(c, s)
        });
        let block = v.subrows(ELECTRON_ZERO * nb, nb);
        let amps = block * &phased;
        (0..times.len())
            .map(|t| (0..nb).map(|r| amps[(r, t)].norm_sqr()).sum())
            .collect()
    }

    /// `U(t) = V e^{−iΛt} V†`.
    pub fn unitary(&self, t: f64) -> Mat<C64> {
        let dim = self.dim();
        let v = &self.eigvecs;
        let scaled = Mat::<C64>::from_fn(dim, dim, |r, n| {
            let (s, c) = (-self.eigvals[n] * t).sin_cos();
            v[(r, n)] * C64::new(c, s)
        });
        &scaled * v.adjoint()
    }
}

/// Exact survival curve of one cluster from the default polarized bath.
pub fn survival_exact(h: &ClusterHamiltonian, times: &[f64]) -> Result<SurvivalCurve> {
    survival_exact_from(h, &vec![NuclearSpin::default(); h.n_sites()], times)
}

pub fn survival_exact_from(h: &ClusterHamiltonian, config: &[NuclearSpin], times: &[f64]) -> Result<SurvivalCurve> {
    check_grid(times)?;
    if config.len() != h.n_sites() {
        return Err(Error::Domain(format!(
            "initial configuration has {} spins, cluster has {}",
            config.len(),
            h.n_sites()
        )));
    }
    let prop = Propagator::new(h)?;
    let values = prop.survival(config, times);
    if let Some(bad) = values.iter().find(|p| !p.is_finite()) {
        return Err(Error::Numerical(format!("non-finite survival probability {bad}")));
    }
    Ok(SurvivalCurve {
        times: times.to_vec(),
        values,
        method: Method::Exact,
        meta: CurveMeta { n_spins: h.n_sites(), ..Default::default() },
    })
}

/// Survival averaged over `samples` random product states of the cluster
/// spins (an unpolarized-ensemble estimate). One decomposition serves all.
pub fn survival_ensemble(h: &ClusterHamiltonian, times: &[f64], samples: usize, seed: u64) -> Result<SurvivalCurve> {
    check_grid(times)?;
    if samples == 0 {
        return Err(Error::Domain("ensemble needs at least one sample".into()));
    }
    let prop = Propagator::new(h)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = vec![0.0; times.len()];
    for _ in 0..samples {
        let config: Vec<NuclearSpin> = (0..h.n_sites())
            .map(|_| if rng.gen::<bool>() { NuclearSpin::Up } else { NuclearSpin::Down })
            .collect();
        for (a, p) in acc.iter_mut().zip(prop.survival(&config, times)) {
            *a += p;
        }
    }
    let values = acc.into_iter().map(|a| a / samples as f64).collect();
    Ok(SurvivalCurve {
        times: times.to_vec(),
        values,
        method: Method::Exact,
        meta: CurveMeta { n_spins: h.n_sites(), ..Default::default() },
    })
}

/// `max |U†U − 1|` for the propagator at time `t`.
pub fn unitarity_check(h: &ClusterHamiltonian, t: f64) -> Result<f64> {
    Ok(unitarity_residual(&Propagator::new(h)?, t))
}

pub fn unitarity_residual(prop: &Propagator, t: f64) -> f64 {
    let u = prop.unitary(t);
    let g = u.adjoint() * &u;
    let mut worst = 0.0f64;
    for r in 0..g.nrows() {
        for c in 0..g.ncols() {
            let want = if r == c { C64::new(1.0, 0.0) } else { C64::new(0.0, 0.0) };
            worst = worst.max((g[(r, c)] - want).norm());
        }
    }
    worst
}

/// Deviation of the CCE denominator `Tr(ρ(0) e^{iH_NV t}|0⟩⟨0|e^{−iH_NV t})`
/// from one over `times`, plus the norm of the off-diagonal part of `H_NV|0⟩`.
pub fn denominator_unity_residual(nv: &NvParams, times: &[f64]) -> Result<f64> {
    let empty = Bath::from_positions(&[], nv.b_z, nv.consts)?;
    let h = build_cluster_hamiltonian(nv, &empty, &[], false)?;
    let leak = (0..3)
        .filter(|&r| r != ELECTRON_ZERO)
        .map(|r| h.matrix[(r, ELECTRON_ZERO)].norm())
        .fold(0.0, f64::max);
    let curve = survival_exact(&h, times)?;
    let dev = curve.values.iter().map(|p| (p - 1.0).abs()).fold(0.0, f64::max);
    Ok(dev.max(leak))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physics::{identity, kron_assemble, Vec3};
    use approx::assert_relative_eq;

    const B_OP: f64 = 0.102_498;

    fn nv() -> NvParams {
        NvParams::new(B_OP)
    }

    fn bath_of(positions: &[Vec3]) -> Bath {
        Bath::from_positions(positions, B_OP, nv().consts).unwrap()
    }

    fn sample_positions() -> Vec<Vec3> {
        vec![
            Vec3::new(0.61e-9, 0.12e-9, 0.33e-9),
            Vec3::new(-0.42e-9, 0.55e-9, -0.21e-9),
            Vec3::new(0.05e-9, -0.71e-9, 0.48e-9),
            Vec3::new(0.88e-9, 0.31e-9, -0.62e-9),
        ]
    }

    #[test]
    fn empty_cluster_is_bare_nv() {
        let n = nv();
        let h = build_cluster_hamiltonian(&n, &bath_of(&[]), &[], false).unwrap();
        assert_eq!(h.dim(), 3);
        let c = n.consts;
        let want = [c.zero_field_splitting - c.gamma_e * B_OP, 0.0, n.omega_a()];
        for (k, w) in want.iter().enumerate() {
            assert_eq!(h.matrix[(k, k)].re, *w);
        }
        let curve = survival_exact(&h, &uniform_grid(2e-4, 50).unwrap()).unwrap();
        assert!(curve.values.iter().all(|p| (p - 1.0).abs() < 1e-14));
    }

    #[test]
    fn anticrossing_degenerates_minus_one_with_zero() {
        let mut n = nv();
        n.b_z = n.anticrossing_field();
        let h = build_cluster_hamiltonian(&n, &bath_of(&[]), &[], false).unwrap();
        assert!(h.matrix[(2, 2)].re.abs() < 1e-5, "{}", h.matrix[(2, 2)].re);
        let gauss = n.b_z * 1e4;
        assert!((gauss - 1024.5).abs() < 0.2, "{gauss}");
        assert!((gauss - 1024.98).abs() / 1024.98 < 5e-3);
    }

    #[test]
    fn on_axis_site_has_only_secular_flip_flop() {
        // on axis A = diag(k, k, −2k): k(SxIx + SyIy) gives the secular S₋I₊ term
        // with matrix element k/√2, while S₋I₋ ∝ A_xx − A_yy + 2iA_xy vanishes
        let b = bath_of(&[Vec3::new(0.0, 0.0, 0.8e-9)]);
        let k = b.sites[0].hyperfine.get(0, 0);
        let h = build_cluster_hamiltonian(&nv(), &b, &[0], false).unwrap();
        let zero_down = ELECTRON_ZERO * 2 + 1;
        let minus_up = 2 * 2;
        let secular = h.matrix[(minus_up, zero_down)];
        assert!((secular.re - k / 2f64.sqrt()).abs() < 1e-12 * k.abs() && secular.im == 0.0);
        let zero_up = ELECTRON_ZERO * 2;
        let minus_down = 2 * 2 + 1;
        assert!(h.matrix[(minus_down, zero_up)].norm() < 1e-12 * k.abs());
    }

    #[test]
    fn hermitian_with_correct_dimension() {
        let b = bath_of(&sample_positions());
        for flag in [false, true] {
            let h = build_cluster_hamiltonian(&nv(), &b, &[0, 2, 3], flag).unwrap();
            assert_eq!(h.dim(), 24);
            assert_eq!(crate::physics::hermiticity_defect(&h.matrix), 0.0);
        }
    }

    #[test]
    fn matches_kron_assembly() {
        // independent route: dense Kronecker products of the full operators
        let b = bath_of(&sample_positions()[..2]);
        let n = nv();
        let c = n.consts;
        let ops = SpinOps::new();
        let i3 = identity(3);
        let i2 = identity(2);
        let sz2 = &ops.s[2] * &ops.s[2];
        let mut want = scaled(&kron_assemble(&[sz2, i2.clone(), i2.clone()]).unwrap(), c.zero_field_splitting);
        want += scaled(&kron_assemble(&[ops.s[2].clone(), i2.clone(), i2.clone()]).unwrap(), -c.gamma_e * B_OP);
        for p in 0..2 {
            let mut f = vec![i3.clone(), i2.clone(), i2.clone()];
            f[1 + p] = ops.i[2].clone();
            want += scaled(&kron_assemble(&f).unwrap(), -c.gamma_c * B_OP);
            let a = b.sites[p].hyperfine;
            for x in 0..3 {
                for y in 0..3 {
                    let mut f = vec![ops.s[x].clone(), i2.clone(), i2.clone()];
                    f[1 + p] = ops.i[y].clone();
                    want += scaled(&kron_assemble(&f).unwrap(), a.get(x, y));
                }
            }
        }
        let d = dipole_tensor(b.sites[1].position() - b.sites[0].position(), c.gamma_c, c.gamma_c, &c).unwrap();
        let no_dip = want.clone();
        for x in 0..3 {
            for y in 0..3 {
                let f = vec![i3.clone(), ops.i[x].clone(), ops.i[y].clone()];
                want += scaled(&kron_assemble(&f).unwrap(), d.get(x, y));
            }
        }
        for (flag, reference) in [(false, &no_dip), (true, &want)] {
            let h = build_cluster_hamiltonian(&n, &b, &[1, 0], flag).unwrap();
            let scale = c.zero_field_splitting;
            for r in 0..12 {
                for col in 0..12 {
                    assert!((h.matrix[(r, col)] - reference[(r, col)]).norm() <= 1e-15 * scale);
                }
            }
        }
    }

    #[test]
    fn rejects_bad_indices() {
        let b = bath_of(&sample_positions());
        assert!(matches!(build_cluster_hamiltonian(&nv(), &b, &[7], false), Err(Error::Domain(_))));
        assert!(build_cluster_hamiltonian(&nv(), &b, &[1, 1], false).is_err());
    }

    #[test]
    fn survival_starts_at_one_and_stays_in_unit_interval() {
        let b = bath_of(&sample_positions());
        let h = build_cluster_hamiltonian(&nv(), &b, &[0, 1, 2, 3], false).unwrap();
        let curve = survival_exact(&h, &uniform_grid(2e-4, 200).unwrap()).unwrap();
        assert!((curve.values[0] - 1.0).abs() < 1e-13);
        assert!(curve.values.iter().all(|&p| (-1e-12..=1.0 + 1e-12).contains(&p)));
        assert!(curve.values.iter().any(|&p| p < 0.99), "expected visible relaxation");
    }

    #[test]
    fn energy_shift_invariance() {
        let b = bath_of(&sample_positions());
        let h = build_cluster_hamiltonian(&nv(), &b, &[0, 1, 3], false).unwrap();
        let t = uniform_grid(2e-4, 100).unwrap();
        let a = survival_exact(&h, &t).unwrap();
        let s = survival_exact(&h.shifted(3.7e5), &t).unwrap();
        // eigenvalue errors scale with ‖H‖, dominated by the far |+1⟩ block
        assert!(a.max_abs_diff(&s) < 1e-10);
    }

    #[test]
    fn one_decomposition_matches_per_time() {
        let b = bath_of(&sample_positions());
        let h = build_cluster_hamiltonian(&nv(), &b, &[0, 2], false).unwrap();
        let t = uniform_grid(1e-4, 40).unwrap();
        let all = survival_exact(&h, &t).unwrap();
        for (k, &tk) in t.iter().enumerate().skip(1) {
            let single = survival_exact(&h, &[tk]).unwrap();
            assert!((single.values[0] - all.values[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn unitarity_residuals() {
        let b = bath_of(&sample_positions());
        let h = build_cluster_hamiltonian(&nv(), &b, &[0, 1, 2, 3], true).unwrap();
        assert!(unitarity_check(&h, 0.0).unwrap() <= 1e-13);
        assert!(unitarity_check(&h, 1e-3).unwrap() <= 1e-11);
        let h1 = build_cluster_hamiltonian(&nv(), &b, &[2], false).unwrap();
        assert!(unitarity_check(&h1, 2e-4).unwrap() <= 1e-12);
    }

    #[test]
    fn unitarity_of_random_hermitian_48() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 48;
        let mut m = Mat::<C64>::zeros(n, n);
        for r in 0..n {
            m[(r, r)] = C64::new(rng.gen_range(-1e6..1e6), 0.0);
            for c in r + 1..n {
                let v = C64::new(rng.gen_range(-1e5..1e5), rng.gen_range(-1e5..1e5));
                m[(r, c)] = v;
                m[(c, r)] = v.conj();
            }
        }
        let h = ClusterHamiltonian { sites: vec![0; 4], matrix: m, include_nuclear_dipole: false };
        assert!(unitarity_check(&h, 1e-3).unwrap() <= 1e-11);
    }

    #[test]
    fn single_spin_two_level_rabi() {
        // Oracle: project onto {|0,+½⟩, |−1,−½⟩}, the resonant pair; the other
        // four levels are detuned by ≥ |ω_a| ~ 7e6 rad/s ≫ coupling.
        let p = Vec3::new(0.7e-9, 0.2e-9, 0.1e-9);
        let mut n = nv();
        let b0 = bath_of(&[p]);
        // tune the field so the pair is exactly degenerate at first order
        let a = b0.sites[0].hyperfine;
        let c = n.consts;
        // ω_a + γ_c B + A_zz/2 = 0  ⇒  B = −(D + A_zz/2)/(γ_e + γ_c)
        n.b_z = -(c.zero_field_splitting + 0.5 * a.get(2, 2)) / (c.gamma_e + c.gamma_c);
        let b = Bath::from_positions(&[p], n.b_z, c).unwrap();
        let h = build_cluster_hamiltonian(&n, &b, &[0], false).unwrap();
        let i_init = ELECTRON_ZERO * 2;
        let i_fin = 2 * 2 + 1;
        let v = h.matrix[(i_fin, i_init)].norm();
        let delta = h.matrix[(i_fin, i_fin)].re - h.matrix[(i_init, i_init)].re;
        assert!(delta.abs() < 1e-3 * v, "detuning {delta} vs coupling {v}");
        let omega = (4.0 * v * v + delta * delta).sqrt();
        let t = uniform_grid(4.0 * std::f64::consts::PI / omega, 60).unwrap();
        let curve = survival_exact(&h, &t).unwrap();
        let mut worst = 0.0f64;
        for (tk, pk) in t.iter().zip(&curve.values) {
            let rabi = 1.0 - (2.0 * v / omega).powi(2) * (omega * tk / 2.0).sin().powi(2);
            worst = worst.max((rabi - pk).abs());
        }
        // residual from second-order shifts of the far-detuned levels
        assert!(worst < 2e-2, "max deviation from Rabi formula {worst}");
        assert!(curve.values.iter().cloned().fold(1.0, f64::min) < 0.05);
    }

    #[test]
    fn spectral_weight_is_hamiltonian_matrix_element() {
        let b = bath_of(&sample_positions());
        let w = crate::bath::spectral_weights(&b);
        for (k, (omega_j, wk)) in w.iter().enumerate() {
            let h = build_cluster_hamiltonian(&nv(), &b, &[k], false).unwrap();
            let i_init = ELECTRON_ZERO * 2;
            let i_fin = 2 * 2 + 1;
            assert_relative_eq!(h.matrix[(i_fin, i_init)].norm_sqr(), *wk, max_relative = 1e-10);
            // transition frequency: ΔE = ω_a − ω_j
            let de = h.matrix[(i_fin, i_fin)].re - h.matrix[(i_init, i_init)].re;
            let want = nv().omega_a() - omega_j;
            assert!((de - want).abs() < 1e-6 * want.abs().max(1.0), "{de} vs {want}");
        }
    }

    #[test]
    fn ensemble_average_in_unit_interval() {
        let b = bath_of(&sample_positions());
        let h = build_cluster_hamiltonian(&nv(), &b, &[0, 1], false).unwrap();
        let c = survival_ensemble(&h, &uniform_grid(1e-4, 30).unwrap(), 8, 1).unwrap();
        assert!((c.values[0] - 1.0).abs() < 1e-13);
        assert!(c.values.iter().all(|&p| (-1e-12..=1.0 + 1e-12).contains(&p)));
    }

    #[test]
    fn denominator_is_unity() {
        let r = denominator_unity_residual(&nv(), &uniform_grid(2e-4, 200).unwrap()).unwrap();
        assert!(r <= 1e-12);
    }

    #[test]
    fn interpolation() {
        let curve = SurvivalCurve {
            times: vec![0.0, 1.0, 2.0],
            values: vec![1.0, 0.5, 0.25],
            method: Method::Exact,
            meta: CurveMeta::default(),
        };
        assert_eq!(curve.value_at(1.0).unwrap(), 0.5);
        assert_eq!(curve.value_at(1.5).unwrap(), 0.375);
        assert!(curve.value_at(2.5).is_err());
    }
}
