//! Random ¹³C baths on the diamond lattice around an NV center.
//!
//! The lattice is rotated so the NV symmetry axis (cubic `[111]`) lies along
//! `z`. The vacancy sits at the origin and the nitrogen at the nearest
//! neighbour `+z`; both sites are never occupied by bath spins.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::physics::{dipole_tensor, NvParams, PhysConstants, Tensor3, Vec3};
use crate::{Error, Result};

/// Name of the generator recorded in bath metadata.
pub const RNG_ALGORITHM: &str = "ChaCha8Rng::seed_from_u64 (rand_chacha 0.3)";

/// Default cap on enumerated lattice sites.
pub const DEFAULT_SITE_CAP: usize = 4_000_000;

const NM: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BathConfig {
    pub seed: u64,
    /// Probability that a lattice site hosts a ¹³C nucleus.
    pub abundance: f64,
    pub n_spins: usize,
    /// Exclusion radius around the NV (m).
    pub r_min: f64,
    /// Optional outer radius (m). `None` grows the search sphere as needed.
    pub r_max: Option<f64>,
    /// Field along the NV axis (T).
    pub field_bz: f64,
}

impl Default for BathConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            abundance: 0.011,
            n_spins: 100,
            r_min: 0.5 * NM,
            r_max: None,
            field_bz: 0.102_498,
        }
    }
}

impl BathConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.abundance) {
            return Err(Error::Config(format!("abundance {} outside [0, 1]", self.abundance)));
        }
        if !(self.r_min >= 0.0) || !self.r_min.is_finite() {
            return Err(Error::Config(format!("r_min must be finite and ≥ 0, got {}", self.r_min)));
        }
        if self.n_spins == 0 {
            return Err(Error::Config("n_spins must be ≥ 1".into()));
        }
        if let Some(r) = self.r_max {
            if !(r > self.r_min) {
                return Err(Error::Config(format!("r_max {r} must exceed r_min {}", self.r_min)));
            }
        }
        if !self.field_bz.is_finite() {
            return Err(Error::Config("field must be finite".into()));
        }
        Ok(())
    }
}

/// One ¹³C nucleus of the bath.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NuclearSite {
    pub index: usize,
    /// Position relative to the NV (nm). [`NuclearSite::position`] gives metres.
    pub position_nm: Vec3,
    /// Hyperfine tensor (rad/s), components `(xx, yy, zz, xy, xz, yz)`.
    #[serde(with = "tensor_upper")]
    pub hyperfine: Tensor3,
    /// Transition frequency of the nucleus in the resonant flip, including
    /// the first-order hyperfine shift (rad/s).
    pub omega_j: f64,
}

impl NuclearSite {
    pub fn position(&self) -> Vec3 {
        self.position_nm * NM
    }
}

mod tensor_upper {
    use super::Tensor3;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(t: &Tensor3, s: S) -> Result<S::Ok, S::Error> {
        t.upper().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Tensor3, D::Error> {
        <[f64; 6]>::deserialize(d).map(Tensor3::from_upper)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bath {
    pub config: BathConfig,
    pub rng: String,
    pub consts: PhysConstants,
    /// Hash of the experiment configuration that produced this bath.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    /// Sites ordered by ascending distance from the NV.
    pub sites: Vec<NuclearSite>,
}

impl Bath {
    /// Build a bath from explicit positions (m), keeping the given order.
    pub fn from_positions(positions: &[Vec3], field_bz: f64, consts: PhysConstants) -> Result<Self> {
        let sites = positions
            .iter()
            .enumerate()
            .map(|(index, &r)| make_site(index, r * (1.0 / NM), field_bz, &consts))
            .collect::<Result<Vec<_>>>()?;
        let config = BathConfig {
            seed: 0,
            abundance: 1.0,
            n_spins: sites.len().max(1),
            r_min: 0.0,
            r_max: None,
            field_bz,
        };
        Ok(Self { config, rng: "explicit".into(), consts, config_hash: None, sites })
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn nv(&self) -> NvParams {
        NvParams { consts: self.consts, b_z: self.config.field_bz }
    }

    /// The first `n` sites as a bath of its own (nested baths share a seed).
    pub fn truncated(&self, n: usize) -> Bath {
        let mut out = self.clone();
        out.sites.truncate(n);
        out.config.n_spins = out.sites.len().max(1);
        out
    }

    /// Bath with sites reordered by `perm` and reindexed.
    pub fn permuted(&self, perm: &[usize]) -> Bath {
        let mut out = self.clone();
        out.sites = perm
            .iter()
            .enumerate()
            .map(|(k, &p)| NuclearSite { index: k, ..self.sites[p].clone() })
            .collect();
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Diamond sites in integer units of `a/4` (cubic frame), sorted by
/// `(|v|², v)`, within `|v| ≤ r_max`, excluding the vacancy and nitrogen.
fn lattice_points(r_max: f64, consts: &PhysConstants, cap: usize) -> Result<Vec<[i64; 3]>> {
    if !(r_max > 0.0) || !r_max.is_finite() {
        return Err(Error::Domain(format!("r_max must be positive and finite, got {r_max}")));
    }
    let q = consts.lattice_a / 4.0;
    let lim = r_max / q;
    let lim2 = lim * lim * (1.0 + 1e-12);
    // site density is 8 per a³ = 8 per 64 q³
    let est = (4.0 / 3.0 * std::f64::consts::PI * lim.powi(3) / 8.0).ceil();
    if est > 1.2 * cap as f64 + 100.0 {
        return Err(Error::Budget(format!(
            "lattice radius {r_max:e} m needs ~{est:.0} sites, above the cap of {cap}"
        )));
    }
    const FCC: [[i64; 3]; 4] = [[0, 0, 0], [0, 2, 2], [2, 0, 2], [2, 2, 0]];
    let n = (lim / 4.0).ceil() as i64 + 1;
    let mut pts = Vec::new();
    for i in -n..=n {
        for j in -n..=n {
            for k in -n..=n {
                for f in FCC {
                    for shift in [0, 1] {
                        let v = [4 * i + f[0] + shift, 4 * j + f[1] + shift, 4 * k + f[2] + shift];
                        let n2 = v.iter().map(|c| c * c).sum::<i64>();
                        if (n2 as f64) <= lim2 && v != [0, 0, 0] && v != [1, 1, 1] {
                            pts.push(v);
                        }
                    }
                }
            }
        }
    }
    if pts.len() > cap {
        return Err(Error::Budget(format!("{} lattice sites exceed the cap of {cap}", pts.len())));
    }
    pts.sort_by_key(|v| (v.iter().map(|c| c * c).sum::<i64>(), *v));
    Ok(pts)
}

/// Cubic-frame `a/4` units to nm in the frame whose `z` is the NV axis.
fn to_nv_frame_nm(v: [i64; 3], consts: &PhysConstants) -> Vec3 {
    let q = consts.lattice_a / 4.0 / NM;
    let [x, y, z] = v.map(|c| c as f64 * q);
    let s2 = std::f64::consts::SQRT_2;
    let s3 = 3.0f64.sqrt();
    let s6 = 6.0f64.sqrt();
    Vec3::new((x - y) / s2, (x + y - 2.0 * z) / s6, (x + y + z) / s3)
}

/// All diamond carbon sites within `r_max` (m) of the NV, nearest first.
pub fn enumerate_lattice(r_max: f64, consts: &PhysConstants) -> Result<Vec<Vec3>> {
    enumerate_lattice_capped(r_max, consts, DEFAULT_SITE_CAP)
}

pub fn enumerate_lattice_capped(r_max: f64, consts: &PhysConstants, cap: usize) -> Result<Vec<Vec3>> {
    Ok(lattice_points(r_max, consts, cap)?
        .into_iter()
        .map(|v| to_nv_frame_nm(v, consts) * NM)
        .collect())
}

/// Shifted transition frequency `−γ_c B − A_zz/2` for a site with hyperfine `a`.
pub fn shifted_splitting(a: &Tensor3, field_bz: f64, consts: &PhysConstants) -> f64 {
    -consts.gamma_c * field_bz - 0.5 * a.get(2, 2)
}

fn make_site(index: usize, position_nm: Vec3, field_bz: f64, consts: &PhysConstants) -> Result<NuclearSite> {
    let hyperfine = dipole_tensor(position_nm * NM, consts.gamma_c, consts.gamma_e, consts)?;
    let omega_j = shifted_splitting(&hyperfine, field_bz, consts);
    Ok(NuclearSite { index, position_nm, hyperfine, omega_j })
}

/// Draw a bath: walk the lattice outward from `r_min`, occupy each site with
/// probability `abundance`, stop after `n_spins` nuclei.
pub fn sample_bath(config: &BathConfig) -> Result<Bath> {
    sample_bath_with(config, &PhysConstants::default(), DEFAULT_SITE_CAP)
}

pub fn sample_bath_with(config: &BathConfig, consts: &PhysConstants, cap: usize) -> Result<Bath> {
    config.validate()?;
    let r_min_q = config.r_min / (consts.lattice_a / 4.0);
    let r_min2 = r_min_q * r_min_q * (1.0 - 1e-12);

    // Sites are visited in a fixed outward order, so a larger search sphere
    // only appends draws and the prefix stays identical.
    let mut radius = match config.r_max {
        Some(r) => r,
        None => {
            let density = 8.0 / consts.lattice_a.powi(3) * config.abundance.max(1e-6);
            let v = 1.5 * config.n_spins as f64 / density;
            let r = (3.0 * v / (4.0 * std::f64::consts::PI)).cbrt();
            r.max(config.r_min * 1.5).max(consts.lattice_a)
        }
    };
    loop {
        let pts = lattice_points(radius, consts, cap)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut chosen = Vec::with_capacity(config.n_spins);
        for v in pts {
            let n2 = v.iter().map(|c| c * c).sum::<i64>() as f64;
            if n2 < r_min2 {
                continue;
            }
            if rng.gen::<f64>() < config.abundance {
                chosen.push(v);
                if chosen.len() == config.n_spins {
                    break;
                }
            }
        }
        if chosen.len() == config.n_spins {
            let sites = chosen
                .into_iter()
                .enumerate()
                .map(|(k, v)| make_site(k, to_nv_frame_nm(v, consts), config.field_bz, consts))
                .collect::<Result<Vec<_>>>()?;
            return Ok(Bath { config: config.clone(), rng: RNG_ALGORITHM.into(), consts: *consts, config_hash: None, sites });
        }
        if config.r_max.is_some() || config.abundance == 0.0 {
            return Err(Error::Budget(format!(
                "only {} of {} requested nuclei found within r = {radius:e} m",
                chosen.len(),
                config.n_spins
            )));
        }
        radius *= 1.5;
    }
}

/// Discrete spectral density `G(ω) = Σ_j w_j δ(ω − ω_j)` as `(ω_j, w_j)`,
/// with `w_j = |⟨−1, −½| S·A_j·I_j |0, +½⟩|²`
/// `= 9 (ħμ₀γ_cγ_e/4π)² (x_j² + y_j²)² / (8 r_j¹⁰)` in (rad/s)².
pub fn spectral_weights(bath: &Bath) -> Vec<(f64, f64)> {
    let k = bath.consts.dipolar_prefactor(bath.consts.gamma_c, bath.consts.gamma_e);
    bath.sites
        .iter()
        .map(|s| {
            let r = s.position();
            let rho2 = r.x * r.x + r.y * r.y;
            let r2 = r.norm_sq();
            let w = 9.0 * k * k * rho2 * rho2 / (8.0 * r2.powi(5));
            (s.omega_j, w)
        })
        .collect()
}
