//! Physical constants, small vector/tensor algebra and spin operators.

use std::f64::consts::PI;
use std::ops::{Add, Mul, Neg, Sub};

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::{Error, Result, C64};

/// Largest matrix dimension [`kron_assemble`] will allocate.
pub const KRON_DIM_CAP: usize = 1 << 16;

/// Physical constants in SI units, energies as angular frequencies.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhysConstants {
    /// Electron zero-field splitting (rad/s).
    pub zero_field_splitting: f64,
    /// Electron gyromagnetic ratio (rad·s⁻¹·T⁻¹), negative.
    pub gamma_e: f64,
    /// ¹³C gyromagnetic ratio (rad·s⁻¹·T⁻¹), positive.
    pub gamma_c: f64,
    /// Vacuum permeability (T·m/A).
    pub mu0: f64,
    /// Reduced Planck constant (J·s).
    pub hbar: f64,
    /// Diamond conventional cubic lattice constant (m).
    pub lattice_a: f64,
}

impl Default for PhysConstants {
    fn default() -> Self {
        Self {
            zero_field_splitting: 2.0 * PI * 2.87e9,
            gamma_e: -1.76e11,
            gamma_c: 6.73e7,
            mu0: 4.0e-7 * PI,
            hbar: 1.054_571_817e-34,
            lattice_a: 3.567e-10,
        }
    }
}

impl PhysConstants {
    /// Dipolar prefactor `μ₀ γ₁ γ₂ ħ / 4π` in rad·s⁻¹·m³.
    pub fn dipolar_prefactor(&self, g1: f64, g2: f64) -> f64 {
        self.mu0 / (4.0 * PI) * g1 * g2 * self.hbar
    }
}

/// Electron-spin parameters of the NV center in a field along its axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NvParams {
    pub consts: PhysConstants,
    /// Static field along the NV axis (T).
    pub b_z: f64,
}

impl NvParams {
    pub fn new(b_z: f64) -> Self {
        Self { consts: PhysConstants::default(), b_z }
    }

    /// Splitting between `|−1⟩` and `|0⟩`, `D + γ_e B_z`.
    pub fn omega_a(&self) -> f64 {
        self.consts.zero_field_splitting + self.consts.gamma_e * self.b_z
    }

    /// Field at which `|−1⟩` crosses `|0⟩`, `D / |γ_e|`.
    pub fn anticrossing_field(&self) -> f64 {
        self.consts.zero_field_splitting / self.consts.gamma_e.abs()
    }

    /// Bare ¹³C Zeeman splitting `−γ_c B_z`, energy of `m=+½` minus `m=−½`.
    pub fn nuclear_larmor(&self) -> f64 {
        -self.consts.gamma_c * self.b_z
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn dot(&self, other: &Vec3) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

/// Real 3×3 tensor, row-major, indices `(x, y, z)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Tensor3(pub [[f64; 3]; 3]);

impl Tensor3 {
    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.0[a][b]
    }

    pub fn trace(&self) -> f64 {
        self.0[0][0] + self.0[1][1] + self.0[2][2]
    }

    pub fn is_symmetric(&self) -> bool {
        (0..3).all(|a| (0..3).all(|b| self.0[a][b] == self.0[b][a]))
    }

    /// Independent components `(xx, yy, zz, xy, xz, yz)`.
    pub fn upper(&self) -> [f64; 6] {
        let m = &self.0;
        [m[0][0], m[1][1], m[2][2], m[0][1], m[0][2], m[1][2]]
    }

    /// Inverse of [`Tensor3::upper`].
    pub fn from_upper(c: [f64; 6]) -> Self {
        let [xx, yy, zz, xy, xz, yz] = c;
        Tensor3([[xx, xy, xz], [xy, yy, yz], [xz, yz, zz]])
    }
}

/// Magnetic dipole-dipole coupling tensor between two spins separated by `r`:
/// `(μ₀ γ₁ γ₂ ħ / 4π|r|³)(1 − 3 r̂r̂ᵀ)` in rad/s.
pub fn dipole_tensor(r: Vec3, g1: f64, g2: f64, consts: &PhysConstants) -> Result<Tensor3> {
    let r2 = r.norm_sq();
    if !(r2 > 0.0) || !r2.is_finite() {
        return Err(Error::Domain(format!("dipole tensor needs a nonzero finite displacement, got {r:?}")));
    }
    let rn = r2.sqrt();
    let scale = consts.dipolar_prefactor(g1, g2) / (rn * r2);
    let u = r.as_array();
    let mut t = [[0.0; 3]; 3];
    for a in 0..3 {
        for b in a..3 {
            let delta = if a == b { 1.0 } else { 0.0 };
            let v = scale * (delta - 3.0 * u[a] * u[b] / r2);
            t[a][b] = v;
            t[b][a] = v;
        }
    }
    Ok(Tensor3(t))
}

/// Spin operator matrices. Electron spin-1 in `(|+1⟩, |0⟩, |−1⟩)` order,
/// nuclear spin-½ in `(|+½⟩, |−½⟩)` order.
#[derive(Clone, Debug)]
pub struct SpinOps {
    pub s: [Mat<C64>; 3],
    pub i: [Mat<C64>; 3],
}

impl Default for SpinOps {
    fn default() -> Self {
        Self::new()
    }
}

impl SpinOps {
    pub fn new() -> Self {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let re = |v: f64| C64::new(v, 0.0);
        let im = |v: f64| C64::new(0.0, v);
        let z = C64::new(0.0, 0.0);

        let sx = mat_from(&[[z, re(h), z], [re(h), z, re(h)], [z, re(h), z]]);
        let sy = mat_from(&[[z, im(-h), z], [im(h), z, im(-h)], [z, im(h), z]]);
        let sz = mat_from(&[[re(1.0), z, z], [z, z, z], [z, z, re(-1.0)]]);

        let ix = mat_from(&[[z, re(0.5)], [re(0.5), z]]);
        let iy = mat_from(&[[z, im(-0.5)], [im(0.5), z]]);
        let iz = mat_from(&[[re(0.5), z], [z, re(-0.5)]]);

        Self { s: [sx, sy, sz], i: [ix, iy, iz] }
    }
}

fn mat_from<const N: usize>(rows: &[[C64; N]; N]) -> Mat<C64> {
    Mat::from_fn(N, N, |r, c| rows[r][c])
}

/// Kronecker product `ops[0] ⊗ ops[1] ⊗ …`, leftmost factor slowest.
pub fn kron_assemble(ops: &[Mat<C64>]) -> Result<Mat<C64>> {
    if ops.is_empty() {
        return Err(Error::Domain("kron_assemble needs at least one factor".into()));
    }
    let mut dim = 1usize;
    for op in ops {
        if op.nrows() != op.ncols() || op.nrows() == 0 {
            return Err(Error::Domain(format!("kron factor is not square: {}×{}", op.nrows(), op.ncols())));
        }
        dim = dim
            .checked_mul(op.nrows())
            .filter(|&d| d <= KRON_DIM_CAP)
            .ok_or_else(|| Error::Budget(format!("Kronecker product dimension exceeds {KRON_DIM_CAP}")))?;
    }
    let mut acc = ops[0].clone();
    for op in &ops[1..] {
        let (n, m) = (acc.nrows(), op.nrows());
        acc = Mat::from_fn(n * m, n * m, |r, c| acc[(r / m, c / m)] * op[(r % m, c % m)]);
    }
    Ok(acc)
}

pub fn identity(n: usize) -> Mat<C64> {
    Mat::from_fn(n, n, |r, c| if r == c { C64::new(1.0, 0.0) } else { C64::new(0.0, 0.0) })
}

/// `max |H − H†|` over all entries.
pub fn hermiticity_defect(h: &Mat<C64>) -> f64 {
    let n = h.nrows();
    let mut worst = 0.0f64;
    for r in 0..n {
        for c in r..n {
            worst = worst.max((h[(r, c)] - h[(c, r)].conj()).norm());
        }
    }
    worst
}
