//! Spin-j and truncated-boson operators, the composite battery ⊗ cavity
//! space, the three Hamiltonian terms and the initial charging state.
//!
//! Tensor order is site 1 ⊗ … ⊗ site N ⊗ cavity, with the last factor
//! varying fastest in the flattened index. Spin basis states are ordered
//! `m = j, j-1, …, -j`; Fock states `0, 1, …, n_fock`.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;
#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::{CMatrix, CVector, C64};

const ZERO: C64 = C64::new(0.0, 0.0);
const ONE: C64 = C64::new(1.0, 0.0);

/// Spin quantum number `j`, stored as the integer `2j`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize), serde(try_from = "f64", into = "f64"))]
pub struct Spin(u32);

impl Spin {
    pub const HALF: Spin = Spin(1);
    pub const ONE: Spin = Spin(2);
    pub const THREE_HALVES: Spin = Spin(3);

    pub fn new(j: f64) -> Result<Self> {
        if !j.is_finite() || j <= 0.0 {
            return Err(Error::InvalidSpin(j));
        }
        let twice = math::round(2.0 * j);
        if (twice - 2.0 * j).abs() > 1e-9 || twice > u32::MAX as f64 {
            return Err(Error::InvalidSpin(j));
        }
        Ok(Spin(twice as u32))
    }

    pub fn from_twice(twice_j: u32) -> Result<Self> {
        if twice_j == 0 {
            return Err(Error::InvalidSpin(0.0));
        }
        Ok(Spin(twice_j))
    }

    pub fn value(self) -> f64 {
        self.0 as f64 / 2.0
    }

    pub fn twice(self) -> u32 {
        self.0
    }

    /// Local Hilbert-space dimension `2j + 1`.
    pub fn dim(self) -> usize {
        self.0 as usize + 1
    }
}

impl TryFrom<f64> for Spin {
    type Error = Error;

    fn try_from(j: f64) -> Result<Self> {
        Spin::new(j)
    }
}

impl From<Spin> for f64 {
    fn from(s: Spin) -> f64 {
        s.value()
    }
}

impl core::fmt::Display for Spin {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        if self.0 % 2 == 0 {
            write!(f, "{}", self.0 / 2)
        } else {
            write!(f, "{}/2", self.0)
        }
    }
}

/// Physical parameters of the cavity + spin chain. Energies in units of
/// `ħω_a`, `ħ = 1`.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize), serde(default, deny_unknown_fields))]
pub struct ModelConfig {
    pub spin_j: Spin,
    pub n_sites: usize,
    pub omega_a: f64,
    pub omega_c: f64,
    /// Spin-spin interaction `J` (negative: ferromagnetic).
    pub coupling_j: f64,
    /// XY anisotropy `γ`.
    pub gamma_xy: f64,
    /// Z anisotropy `Δ`.
    pub delta_z: f64,
    /// Highest retained photon number. `None` means `4N + 1`.
    pub n_fock: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            spin_j: Spin::HALF,
            n_sites: 3,
            omega_a: 1.0,
            omega_c: 1.0,
            coupling_j: 0.0,
            gamma_xy: 0.4,
            delta_z: 1.0,
            n_fock: None,
        }
    }
}

impl ModelConfig {
    pub fn new(spin_j: Spin, n_sites: usize, coupling_j: f64) -> Self {
        ModelConfig { spin_j, n_sites, coupling_j, ..ModelConfig::default() }
    }

    pub fn with_fock(mut self, n_fock: usize) -> Self {
        self.n_fock = Some(n_fock);
        self
    }

    /// Highest retained photon number.
    pub fn fock_max(&self) -> usize {
        self.n_fock.unwrap_or(4 * self.n_sites + 1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.into()));
        if self.n_sites == 0 {
            return bad("n_sites must be at least 1");
        }
        if self.fock_max() < self.n_sites {
            return bad("n_fock must be at least n_sites so that the initial Fock state |N> exists");
        }
        for (name, v) in [
            ("omega_a", self.omega_a),
            ("omega_c", self.omega_c),
            ("coupling_j", self.coupling_j),
            ("gamma_xy", self.gamma_xy),
            ("delta_z", self.delta_z),
        ] {
            if !v.is_finite() {
                return Err(Error::InvalidConfig(alloc::format!("{name} must be finite")));
            }
        }
        if self.omega_a <= 0.0 || self.omega_c <= 0.0 {
            return bad("frequencies must be positive");
        }
        Ok(())
    }

    /// `[d_spin; N] ++ [n_fock + 1]`.
    pub fn basis(&self) -> CompositeBasis {
        let mut dims = vec![self.spin_j.dim(); self.n_sites];
        dims.push(self.fock_max() + 1);
        CompositeBasis { factor_dims: dims }
    }

    /// The spin chain alone, `[d_spin; N]`.
    pub fn battery_basis(&self) -> CompositeBasis {
        CompositeBasis { factor_dims: vec![self.spin_j.dim(); self.n_sites] }
    }

    /// Width of the `J = 0` battery spectrum, `2jN ω_a`.
    pub fn free_spin_bound(&self) -> f64 {
        self.spin_j.twice() as f64 * self.n_sites as f64 * self.omega_a
    }
}

/// Ordered tensor-product factors. The last factor varies fastest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CompositeBasis {
    factor_dims: Vec<usize>,
}

impl CompositeBasis {
    pub fn new(factor_dims: Vec<usize>) -> Result<Self> {
        if factor_dims.is_empty() || factor_dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument("factor dimensions must be non-empty and positive".into()));
        }
        Ok(CompositeBasis { factor_dims })
    }

    pub fn factor_dims(&self) -> &[usize] {
        &self.factor_dims
    }

    pub fn n_factors(&self) -> usize {
        self.factor_dims.len()
    }

    pub fn total_dim(&self) -> usize {
        self.factor_dims.iter().product()
    }

    /// Flattened index of a multi-index.
    pub fn index(&self, digits: &[usize]) -> usize {
        debug_assert_eq!(digits.len(), self.factor_dims.len());
        digits.iter().zip(&self.factor_dims).fold(0, |acc, (&k, &d)| acc * d + k)
    }

    /// Multi-index of a flattened index.
    pub fn digits(&self, mut index: usize) -> Vec<usize> {
        let mut out = vec![0; self.factor_dims.len()];
        for (slot, &d) in out.iter_mut().zip(&self.factor_dims).rev() {
            *slot = index % d;
            index /= d;
        }
        out
    }

    /// Product of the dimensions of the factors in `range`.
    fn span_dim(&self, range: core::ops::Range<usize>) -> usize {
        self.factor_dims[range].iter().product()
    }
}

pub struct SpinOperators {
    pub sx: CMatrix,
    pub sy: CMatrix,
    pub sz: CMatrix,
    pub splus: CMatrix,
    pub sminus: CMatrix,
}

/// Spin-j matrices in the `m = j, …, -j` basis.
pub fn spin_operators(spin: Spin) -> SpinOperators {
    let d = spin.dim();
    let j = spin.value();
    let m_of = |s: usize| j - s as f64;
    let sz = CMatrix::from_fn(d, d, |r, c| if r == c { C64::new(m_of(r), 0.0) } else { ZERO });
    // S+|m> = sqrt(j(j+1) - m(m+1)) |m+1>, and |m+1> sits one row above |m>.
    let splus = CMatrix::from_fn(d, d, |r, c| {
        if c >= 1 && r == c - 1 {
            let m = m_of(c);
            C64::new(math::sqrt(j * (j + 1.0) - m * (m + 1.0)), 0.0)
        } else {
            ZERO
        }
    });
    let sminus = splus.adjoint();
    let sx = (&splus + &sminus) * C64::new(0.5, 0.0);
    let sy = (&splus - &sminus) * C64::new(0.0, -0.5);
    SpinOperators { sx, sy, sz, splus, sminus }
}

pub struct BosonOperators {
    pub a: CMatrix,
    pub adag: CMatrix,
    pub number: CMatrix,
}

/// Ladder operators on Fock states `0..=n_fock`.
pub fn boson_operators(n_fock: usize) -> Result<BosonOperators> {
    if n_fock < 1 {
        return Err(Error::InvalidArgument("n_fock must be at least 1".into()));
    }
    let d = n_fock + 1;
    let a = CMatrix::from_fn(d, d, |r, c| {
        if c >= 1 && r == c - 1 {
            C64::new(math::sqrt(c as f64), 0.0)
        } else {
            ZERO
        }
    });
    let adag = a.adjoint();
    let number = CMatrix::from_fn(d, d, |r, c| if r == c { C64::new(r as f64, 0.0) } else { ZERO });
    Ok(BosonOperators { a, adag, number })
}

/// Kronecker product `a ⊗ b`.
pub fn kron(a: &CMatrix, b: &CMatrix) -> CMatrix {
    a.kronecker(b)
}

/// Lift an operator acting on the consecutive factors
/// `first .. first + span` to the full space.
pub fn embed_block(op: &CMatrix, first: usize, span: usize, basis: &CompositeBasis) -> Result<CMatrix> {
    let n = basis.n_factors();
    if span == 0 || first + span > n {
        return Err(Error::IndexOutOfRange { index: first + span.max(1) - 1, len: n });
    }
    let d = basis.span_dim(first..first + span);
    if op.nrows() != d || op.ncols() != d {
        return Err(Error::DimensionMismatch { expected: d, found: op.nrows() });
    }
    let left = basis.span_dim(0..first);
    let right = basis.span_dim(first + span..n);
    let total = left * d * right;
    let mut out = CMatrix::zeros(total, total);
    for l in 0..left {
        for i in 0..d {
            for j in 0..d {
                let v = op[(i, j)];
                if v == ZERO {
                    continue;
                }
                let row0 = (l * d + i) * right;
                let col0 = (l * d + j) * right;
                for r in 0..right {
                    out[(row0 + r, col0 + r)] = v;
                }
            }
        }
    }
    Ok(out)
}

/// `I ⊗ … ⊗ op ⊗ … ⊗ I` with `op` on factor `site`.
pub fn embed_site(op: &CMatrix, site: usize, basis: &CompositeBasis) -> Result<CMatrix> {
    if site >= basis.n_factors() {
        return Err(Error::IndexOutOfRange { index: site, len: basis.n_factors() });
    }
    embed_block(op, site, 1, basis)
}

/// Battery Hamiltonian on the spin chain (open boundary).
pub fn build_battery_hamiltonian(cfg: &ModelConfig) -> Result<CMatrix> {
    cfg.validate()?;
    let s = spin_operators(cfg.spin_j);
    let basis = cfg.battery_basis();
    let dim = basis.total_dim();
    let wa = C64::new(cfg.omega_a, 0.0);
    let mut h = CMatrix::zeros(dim, dim);
    for n in 0..cfg.n_sites {
        h += embed_site(&s.sz, n, &basis)? * wa;
    }
    if cfg.n_sites > 1 && cfg.coupling_j != 0.0 {
        let bond = kron(&s.sx, &s.sx) * C64::new(1.0 + cfg.gamma_xy, 0.0)
            + kron(&s.sy, &s.sy) * C64::new(1.0 - cfg.gamma_xy, 0.0)
            + kron(&s.sz, &s.sz) * C64::new(cfg.delta_z, 0.0);
        let bond = bond * C64::new(cfg.omega_a * cfg.coupling_j, 0.0);
        for n in 0..cfg.n_sites - 1 {
            h += embed_block(&bond, n, 2, &basis)?;
        }
    }
    Ok(h)
}

/// Charger Hamiltonian `ω_c a†a` on the cavity space.
pub fn build_charger_hamiltonian(cfg: &ModelConfig) -> Result<CMatrix> {
    cfg.validate()?;
    let b = boson_operators(cfg.fock_max())?;
    Ok(b.number * C64::new(cfg.omega_c, 0.0))
}

/// Battery-space collective operator `Σ_n (S⁺_n + S⁻_n)`.
pub fn collective_flip(cfg: &ModelConfig) -> Result<CMatrix> {
    let s = spin_operators(cfg.spin_j);
    let basis = cfg.battery_basis();
    let flip = &s.splus + &s.sminus;
    let dim = basis.total_dim();
    let mut x = CMatrix::zeros(dim, dim);
    for n in 0..cfg.n_sites {
        x += embed_site(&flip, n, &basis)?;
    }
    Ok(x)
}

/// Interaction Hamiltonian per unit coupling, `Σ_n (S⁺_n + S⁻_n)(a† + a)`, on
/// the composite space. Counter-rotating terms are kept.
pub fn build_interaction_hamiltonian(cfg: &ModelConfig) -> Result<CMatrix> {
    cfg.validate()?;
    let b = boson_operators(cfg.fock_max())?;
    Ok(kron(&collective_flip(cfg)?, &(&b.a + &b.adag)))
}

/// `H_B ⊗ I_C + I_B ⊗ H_C` on the composite space.
pub fn build_static_hamiltonian(cfg: &ModelConfig) -> Result<CMatrix> {
    let hb = build_battery_hamiltonian(cfg)?;
    let hc = build_charger_hamiltonian(cfg)?;
    let ib = CMatrix::identity(hb.nrows(), hb.nrows());
    let ic = CMatrix::identity(hc.nrows(), hc.nrows());
    Ok(kron(&hb, &ic) + kron(&ib, &hc))
}

/// Cavity annihilation operator on the composite space.
pub fn composite_annihilation(cfg: &ModelConfig) -> Result<CMatrix> {
    cfg.validate()?;
    let b = boson_operators(cfg.fock_max())?;
    embed_site(&b.a, cfg.n_sites, &cfg.basis())
}

/// Largest elementwise `|A_ij - conj(A_ji)|`.
pub fn hermiticity_residual(m: &CMatrix) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in i..n {
            worst = worst.max((m[(i, j)] - m[(j, i)].conj()).norm());
        }
    }
    worst
}

fn check_hermitian(m: &CMatrix) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::DimensionMismatch { expected: m.nrows(), found: m.ncols() });
    }
    let scale = m.iter().fold(1.0f64, |acc, z| acc.max(z.norm()));
    let residual = hermiticity_residual(m);
    if !(residual <= 1e-10 * scale) {
        return Err(Error::NotHermitian { residual });
    }
    Ok(())
}

/// Ascending eigenvalues with orthonormal eigenvectors in matching columns.
#[derive(Clone, Debug)]
pub struct HermitianEigen {
    pub values: Vec<f64>,
    pub vectors: CMatrix,
}

impl HermitianEigen {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Column `k` as a vector.
    pub fn vector(&self, k: usize) -> CVector {
        self.vectors.column(k).into_owned()
    }
}

fn symmetrized(m: &CMatrix) -> CMatrix {
    (m + m.adjoint()) * C64::new(0.5, 0.0)
}

/// Dense Hermitian eigendecomposition, eigenvalues ascending.
pub fn eig_hermitian(m: &CMatrix) -> Result<HermitianEigen> {
    check_hermitian(m)?;
    let n = m.nrows();
    let eig = symmetrized(m).symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let vectors = CMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    Ok(HermitianEigen { values, vectors })
}

/// Ascending eigenvalues only.
pub fn eigvals_hermitian(m: &CMatrix) -> Result<Vec<f64>> {
    check_hermitian(m)?;
    Ok(sorted_eigenvalues(&symmetrized(m)))
}

fn sorted_eigenvalues(m: &CMatrix) -> Vec<f64> {
    let mut v: Vec<f64> = m.clone().symmetric_eigenvalues().iter().copied().collect();
    v.sort_by(f64::total_cmp);
    v
}

/// Connected components of the nonzero pattern of a square matrix. Each
/// component lists its indices in ascending order.
pub fn nonzero_blocks(m: &CMatrix) -> Vec<Vec<usize>> {
    let n = m.nrows();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for j in 0..n {
        for i in 0..n {
            if i != j && m[(i, j)] != ZERO {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut root_slot = vec![usize::MAX; n];
    let mut blocks: Vec<Vec<usize>> = Vec::new();
    for i in 0..n {
        let r = find(&mut parent, i);
        if root_slot[r] == usize::MAX {
            root_slot[r] = blocks.len();
            blocks.push(Vec::new());
        }
        blocks[root_slot[r]].push(i);
    }
    blocks
}

/// Eigenvalues of a Hermitian matrix, solving each block of its nonzero
/// pattern separately. Exact zeros are what decouple blocks, so symmetry
/// sectors kept exactly empty by the integrator are exploited for free.
pub fn eigvals_hermitian_blocked(m: &CMatrix) -> Result<Vec<f64>> {
    check_hermitian(m)?;
    let m = symmetrized(m);
    let mut out = Vec::with_capacity(m.nrows());
    for block in nonzero_blocks(&m) {
        if block.len() == 1 {
            out.push(m[(block[0], block[0])].re);
            continue;
        }
        let sub = DMatrix::from_fn(block.len(), block.len(), |r, c| m[(block[r], block[c])]);
        out.extend(sorted_eigenvalues(&sub));
    }
    out.sort_by(f64::total_cmp);
    Ok(out)
}

/// Index of the all-spins-down product state `|-j, …, -j>` in the battery
/// basis.
pub fn all_down_index(cfg: &ModelConfig) -> usize {
    let basis = cfg.battery_basis();
    let lowest = cfg.spin_j.dim() - 1;
    basis.index(&vec![lowest; cfg.n_sites])
}

/// Rotate the global phase so the first largest-magnitude component is real
/// and positive.
fn fix_phase(v: &mut CVector) {
    let mut best = 0;
    let mut best_norm = -1.0;
    for (k, z) in v.iter().enumerate() {
        let n = z.norm();
        if n > best_norm + 1e-12 {
            best = k;
            best_norm = n;
        }
    }
    if best_norm > 0.0 {
        let phase = v[best].conj() / best_norm;
        for z in v.iter_mut() {
            *z *= phase;
        }
    }
}

/// Ground energy and ground vector of a battery Hamiltonian.
///
/// A degenerate ground space (levels within 1e-10) is resolved by projecting
/// the all-down product state onto it; if that projection vanishes, the
/// lexicographically first basis state with nonzero projection is used.
pub fn battery_ground_state(cfg: &ModelConfig, h_battery: &CMatrix) -> Result<(f64, CVector)> {
    let eig = eig_hermitian(h_battery)?;
    let e0 = eig.values[0];
    let degenerate = eig.values.iter().take_while(|&&e| e - e0 <= 1e-10).count();
    let mut g = if degenerate == 1 {
        eig.vector(0)
    } else {
        let dim = h_battery.nrows();
        let down = all_down_index(cfg);
        let candidates = core::iter::once(down).chain((0..dim).filter(|&k| k != down));
        let mut picked = None;
        for k in candidates {
            // Projection of basis state k onto the degenerate subspace.
            let mut v = CVector::zeros(dim);
            for c in 0..degenerate {
                let coef = eig.vectors[(k, c)].conj();
                v += eig.vectors.column(c) * coef;
            }
            let norm = v.norm();
            if norm > 1e-8 {
                picked = Some(v / C64::new(norm, 0.0));
                break;
            }
        }
        picked.expect("a nonempty eigenspace has a nonzero projection of some basis state")
    };
    fix_phase(&mut g);
    Ok((e0, g))
}

/// `|G>_B ⊗ |N>_C`, the battery ground state with `N` photons in the cavity.
pub fn initial_state(cfg: &ModelConfig) -> Result<CVector> {
    cfg.validate()?;
    let hb = build_battery_hamiltonian(cfg)?;
    let (_, g) = battery_ground_state(cfg, &hb)?;
    Ok(product_with_fock(&g, cfg.fock_max() + 1, cfg.n_sites))
}

/// `battery ⊗ |n>` for a cavity of dimension `cavity_dim`.
pub fn product_with_fock(battery: &CVector, cavity_dim: usize, n: usize) -> CVector {
    let mut psi = CVector::zeros(battery.len() * cavity_dim);
    for (b, &amp) in battery.iter().enumerate() {
        psi[b * cavity_dim + n] = amp;
    }
    psi
}

/// Identity on `dim` as a complex matrix.
pub fn identity(dim: usize) -> CMatrix {
    CMatrix::from_fn(dim, dim, |r, c| if r == c { ONE } else { ZERO })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn commutator(a: &CMatrix, b: &CMatrix) -> CMatrix {
        a * b - b * a
    }

    fn max_abs(m: &CMatrix) -> f64 {
        m.iter().fold(0.0, |acc, z| acc.max(z.norm()))
    }

    const SPINS: [Spin; 3] = [Spin::HALF, Spin::ONE, Spin::THREE_HALVES];

    #[test]
    fn spin_half_matrices() {
        let s = spin_operators(Spin::HALF);
        assert_eq!(s.sz[(0, 0)], C64::new(0.5, 0.0));
        assert_eq!(s.sz[(1, 1)], C64::new(-0.5, 0.0));
        assert_eq!(s.splus[(0, 1)], ONE);
        assert_eq!(s.splus[(1, 0)], ZERO);
        assert_eq!(s.splus[(0, 0)], ZERO);
    }

    #[test]
    fn spin_one_ladder() {
        let s = spin_operators(Spin::ONE);
        // |1,-1> is index 2, |1,0> index 1.
        let mut v = CVector::zeros(3);
        v[2] = ONE;
        let w = &s.splus * v;
        assert!((w[1].re - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(w[0], ZERO);
        assert_eq!(w[2], ZERO);
    }

    #[test]
    fn su2_algebra_and_casimir() {
        for spin in SPINS {
            let s = spin_operators(spin);
            let i = C64::new(0.0, 1.0);
            assert!(max_abs(&(commutator(&s.sx, &s.sy) - &s.sz * i)) <= 1e-12);
            assert!(max_abs(&(commutator(&s.sy, &s.sz) - &s.sx * i)) <= 1e-12);
            assert!(max_abs(&(commutator(&s.sz, &s.sx) - &s.sy * i)) <= 1e-12);
            let j = spin.value();
            let cas = &s.sx * &s.sx + &s.sy * &s.sy + &s.sz * &s.sz;
            let target = identity(spin.dim()) * C64::new(j * (j + 1.0), 0.0);
            assert!(max_abs(&(cas - target)) <= 1e-12, "Casimir for j = {spin}");
        }
    }

    #[test]
    fn spin_rejects_bad_values() {
        assert!(Spin::new(0.0).is_err());
        assert!(Spin::new(-0.5).is_err());
        assert!(Spin::new(0.75).is_err());
        assert!(Spin::new(f64::NAN).is_err());
        assert_eq!(Spin::new(1.5).unwrap(), Spin::THREE_HALVES);
    }

    #[test]
    fn boson_ladder_and_truncated_commutator() {
        let b = boson_operators(5).unwrap();
        let mut v = CVector::zeros(6);
        v[3] = ONE;
        let w = &b.a * v;
        assert!((w[2].re - 3f64.sqrt()).abs() < 1e-15);
        for n in 0..6 {
            assert_eq!(b.number[(n, n)].re, n as f64);
        }
        let c = commutator(&b.a, &b.adag);
        for r in 0..6 {
            for k in 0..6 {
                let expected = if r != k {
                    0.0
                } else if r == 5 {
                    -5.0
                } else {
                    1.0
                };
                assert!((c[(r, k)] - C64::new(expected, 0.0)).norm() < 1e-12);
            }
        }
        assert!(boson_operators(0).is_err());
    }

    #[test]
    fn embedding_properties() {
        let cfg = ModelConfig::new(Spin::ONE, 2, 0.0).with_fock(3);
        let basis = cfg.basis();
        let s = spin_operators(Spin::ONE);
        let total = basis.total_dim();
        let id = embed_site(&identity(3), 1, &basis).unwrap();
        assert_eq!(id, identity(total));
        let z0 = embed_site(&s.sz, 0, &basis).unwrap();
        let z1 = embed_site(&s.sz, 1, &basis).unwrap();
        assert_eq!(max_abs(&commutator(&z0, &z1)), 0.0);
        let x0 = embed_site(&s.sx, 0, &basis).unwrap();
        let x1 = embed_site(&s.sx, 1, &basis).unwrap();
        assert_eq!(max_abs(&commutator(&x0, &x1)), 0.0);
        let tr: C64 = z0.trace();
        assert!((tr - s.sz.trace() * C64::new(12.0, 0.0)).norm() < 1e-12);
        assert!(matches!(embed_site(&s.sz, 2, &basis), Err(Error::DimensionMismatch { .. })));
        assert!(matches!(embed_site(&s.sz, 3, &basis), Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn free_battery_spectrum() {
        let cfg = ModelConfig::new(Spin::HALF, 3, 0.0);
        let ev = eigvals_hermitian(&build_battery_hamiltonian(&cfg).unwrap()).unwrap();
        let expected = [-1.5, -0.5, -0.5, -0.5, 0.5, 0.5, 0.5, 1.5];
        for (a, b) in ev.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        for spin in SPINS {
            let cfg = ModelConfig::new(spin, 1, 0.0);
            let ev = eigvals_hermitian(&build_battery_hamiltonian(&cfg).unwrap()).unwrap();
            let j = spin.value();
            for (k, e) in ev.iter().enumerate() {
                assert!((e - (-j + k as f64)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn xyz_ground_energy_matches_frozen_eigensolve() {
        // Frozen from an independent numpy eigvalsh of the 8x8 matrix built
        // from Pauli/2 Kronecker products.
        let cfg = ModelConfig::new(Spin::HALF, 3, 1.0);
        let ev = eigvals_hermitian(&build_battery_hamiltonian(&cfg).unwrap()).unwrap();
        assert!((ev[0] - (-1.507679816087434)).abs() < 1e-12);
    }

    #[test]
    fn hamiltonians_are_hermitian_on_grid() {
        for spin in SPINS {
            for jj in [-2.0, -1.0, 0.0, 1.0, 2.0] {
                let cfg = ModelConfig::new(spin, 3, jj).with_fock(4);
                assert!(hermiticity_residual(&build_battery_hamiltonian(&cfg).unwrap()) <= 1e-12);
                assert!(hermiticity_residual(&build_charger_hamiltonian(&cfg).unwrap()) <= 1e-12);
                assert!(hermiticity_residual(&build_interaction_hamiltonian(&cfg).unwrap()) <= 1e-12);
            }
        }
    }

    #[test]
    fn battery_spectrum_mirror_symmetric() {
        // Reversing the chain permutes the basis; the spectrum is unchanged.
        for spin in SPINS {
            let cfg = ModelConfig { gamma_xy: 0.4, delta_z: 1.0, ..ModelConfig::new(spin, 3, 1.3) };
            let h = build_battery_hamiltonian(&cfg).unwrap();
            let basis = cfg.battery_basis();
            let dim = basis.total_dim();
            let perm: Vec<usize> = (0..dim)
                .map(|k| {
                    let mut d = basis.digits(k);
                    d.reverse();
                    basis.index(&d)
                })
                .collect();
            let mirrored = CMatrix::from_fn(dim, dim, |r, c| h[(perm[r], perm[c])]);
            assert!(max_abs(&(&mirrored - &h)) < 1e-12, "open chain is mirror symmetric as an operator");
        }
    }

    #[test]
    fn charger_spectrum() {
        let cfg = ModelConfig::new(Spin::HALF, 3, 0.0);
        let hc = build_charger_hamiltonian(&cfg).unwrap();
        let b = boson_operators(cfg.fock_max()).unwrap();
        assert_eq!(hc.nrows(), 14);
        for n in 0..14 {
            assert_eq!(hc[(n, n)].re, n as f64);
        }
        assert_eq!(max_abs(&commutator(&hc, &b.number)), 0.0);
    }

    #[test]
    fn interaction_equals_product_route() {
        let cfg = ModelConfig::new(Spin::ONE, 2, 0.5).with_fock(3);
        let basis = cfg.basis();
        let s = spin_operators(cfg.spin_j);
        let b = boson_operators(3).unwrap();
        let field = embed_site(&(&b.a + &b.adag), 2, &basis).unwrap();
        let mut expected = CMatrix::zeros(basis.total_dim(), basis.total_dim());
        for n in 0..2 {
            expected += embed_site(&s.sx, n, &basis).unwrap() * &field * C64::new(2.0, 0.0);
        }
        let hi = build_interaction_hamiltonian(&cfg).unwrap();
        assert!(max_abs(&(hi - expected)) < 1e-12);
    }

    #[test]
    fn interaction_single_qubit_single_photon() {
        // Basis order (spin, photon): |up,0>, |up,1>, |down,0>, |down,1>.
        let cfg = ModelConfig::new(Spin::HALF, 1, 0.0).with_fock(1);
        let hi = build_interaction_hamiltonian(&cfg).unwrap();
        let mut expected = CMatrix::zeros(4, 4);
        for (r, c) in [(0, 3), (3, 0), (1, 2), (2, 1)] {
            expected[(r, c)] = ONE;
        }
        assert_eq!(hi, expected);
    }

    #[test]
    fn initial_state_free_spins() {
        let cfg = ModelConfig::new(Spin::HALF, 3, 0.0);
        let psi = initial_state(&cfg).unwrap();
        assert!((psi.norm() - 1.0).abs() < 1e-14);
        let cavity_dim = cfg.fock_max() + 1;
        let idx = all_down_index(&cfg) * cavity_dim + 3;
        assert!((psi[idx] - ONE).norm() < 1e-12);
    }

    #[test]
    fn initial_state_ferromagnetic_ground_vector() {
        let cfg = ModelConfig::new(Spin::HALF, 3, -1.0);
        let hb = build_battery_hamiltonian(&cfg).unwrap();
        let (e0, g) = battery_ground_state(&cfg, &hb).unwrap();
        let residual = (&hb * &g - &g * C64::new(e0, 0.0)).norm();
        assert!(residual <= 1e-10);
        let rho_b = &g * g.adjoint();
        let energy = (&hb * rho_b).trace().re;
        assert!((energy - e0).abs() < 1e-12);
        let ev = eigvals_hermitian(&hb).unwrap();
        assert!((ev[0] - e0).abs() < 1e-12);
    }

    #[test]
    fn initial_state_requires_enough_photons() {
        let cfg = ModelConfig::new(Spin::HALF, 3, 0.0).with_fock(2);
        assert!(matches!(initial_state(&cfg), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn degenerate_ground_space_prefers_all_down() {
        // J = 0 with a tiny field: not degenerate. Use a hand-made H with a
        // degenerate ground pair containing the all-down state.
        let cfg = ModelConfig::new(Spin::HALF, 1, 0.0);
        let h = CMatrix::zeros(2, 2);
        let (_, g) = battery_ground_state(&cfg, &h).unwrap();
        assert!((g[1] - ONE).norm() < 1e-12, "all-down is index 1 for a single spin");
    }

    #[test]
    fn eig_examples() {
        let d = CMatrix::from_fn(3, 3, |r, c| if r == c { C64::new([3.0, 1.0, 2.0][r], 0.0) } else { ZERO });
        let e = eig_hermitian(&d).unwrap();
        assert_eq!(e.values, vec![1.0, 2.0, 3.0]);
        let s = spin_operators(Spin::HALF);
        let e = eig_hermitian(&s.sx).unwrap();
        assert!((e.values[0] + 0.5).abs() < 1e-14 && (e.values[1] - 0.5).abs() < 1e-14);
        let mut bad = CMatrix::zeros(2, 2);
        bad[(0, 1)] = ONE;
        assert!(matches!(eig_hermitian(&bad), Err(Error::NotHermitian { .. })));
    }

    #[test]
    fn eig_reconstruction() {
        let cfg = ModelConfig::new(Spin::ONE, 2, 0.7);
        let h = build_battery_hamiltonian(&cfg).unwrap();
        let e = eig_hermitian(&h).unwrap();
        let n = e.dim();
        let mut rebuilt = CMatrix::zeros(n, n);
        for k in 0..n {
            let v = e.vector(k);
            rebuilt += &v * v.adjoint() * C64::new(e.values[k], 0.0);
            let residual = (&h * &v - &v * C64::new(e.values[k], 0.0)).norm();
            assert!(residual <= 1e-10 * h.norm());
        }
        assert!(max_abs(&(rebuilt - &h)) < 1e-10);
        let gram = e.vectors.adjoint() * &e.vectors;
        assert!(max_abs(&(gram - identity(n))) < 1e-10);
        assert!(e.values.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn blocked_eigenvalues_match_dense() {
        let cfg = ModelConfig::new(Spin::HALF, 2, 1.0).with_fock(3);
        let h = build_static_hamiltonian(&cfg).unwrap() + build_interaction_hamiltonian(&cfg).unwrap();
        let a = eigvals_hermitian(&h).unwrap();
        let b = eigvals_hermitian_blocked(&h).unwrap();
        assert!(nonzero_blocks(&h).len() >= 2, "parity splits H into sectors");
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn basis_digits_round_trip() {
        let basis = CompositeBasis::new(vec![2, 3, 4]).unwrap();
        for k in 0..24 {
            assert_eq!(basis.index(&basis.digits(k)), k);
        }
        assert_eq!(basis.digits(5), vec![0, 1, 1]);
    }
}
