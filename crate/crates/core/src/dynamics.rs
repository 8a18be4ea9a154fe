//! Closed (Schrödinger) and open (Lindblad) charging dynamics under a
//! piecewise-constant cavity-spin coupling.
//!
//! Closed runs evolve the state vector, open runs the full density matrix;
//! both with fixed-step RK4. Within a schedule segment the Hamiltonian is
//! constant, so an eigendecomposition propagator is available as an exact
//! reference.
//!
//! The open-system kernel never materializes a superoperator. It applies the
//! sparse Hamiltonian to a dense density matrix and evaluates the cavity
//! dissipator by index shifts. The total Hamiltonian conserves the parity of
//! (spin excitations + photons), and both dissipator channels map
//! parity-diagonal blocks onto parity-diagonal blocks, so a state with
//! definite initial parity stays block diagonal. The kernel orders the basis
//! by parity and only touches the two diagonal blocks.

use alloc::vec;
use alloc::vec::Vec;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hilbert::{self, CompositeBasis, HermitianEigen, ModelConfig};
use crate::math;
use crate::metrics::{self, Sample, Trajectory};
use crate::sparse::Csr;
use crate::{CMatrix, CVector, C64};

const ZERO: C64 = C64::new(0.0, 0.0);

/// Sparsity threshold when converting the dense Hamiltonians.
const DROP_TOL: f64 = 1e-14;

/// Piecewise-constant coupling `g(t)` on the charging window `[0, horizon]`.
/// Outside the window the coupling is gated off.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize), serde(deny_unknown_fields))]
pub struct CouplingSchedule {
    knots: Vec<(f64, f64)>,
    horizon: f64,
}

impl CouplingSchedule {
    /// `knots` are `(t_start, g)` pairs; the first must start at 0.
    pub fn new(knots: Vec<(f64, f64)>, horizon: f64) -> Result<Self> {
        let bad = |m: &str| Err(Error::InvalidSchedule(m.into()));
        if !(horizon >= 0.0) || !horizon.is_finite() {
            return bad("horizon must be finite and non-negative");
        }
        if knots.is_empty() || knots[0].0 != 0.0 {
            return bad("the first knot must start at t = 0");
        }
        if knots.windows(2).any(|w| !(w[1].0 > w[0].0)) {
            return bad("knot times must be strictly increasing");
        }
        if knots.iter().any(|&(t, g)| !g.is_finite() || g < 0.0 || !t.is_finite()) {
            return bad("couplings must be finite and non-negative");
        }
        Ok(CouplingSchedule { knots, horizon })
    }

    pub fn constant(g: f64, horizon: f64) -> Result<Self> {
        CouplingSchedule::new(vec![(0.0, g)], horizon)
    }

    /// `K` equal segments of length `horizon / K`.
    pub fn from_segments(values: &[f64], horizon: f64) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidSchedule("no segments".into()));
        }
        let dt = horizon / values.len() as f64;
        CouplingSchedule::new(values.iter().enumerate().map(|(k, &g)| (k as f64 * dt, g)).collect(), horizon)
    }

    pub fn knots(&self) -> &[(f64, f64)] {
        &self.knots
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// `λ(t)·g(t)`.
    pub fn coupling_at(&self, t: f64) -> f64 {
        if t < 0.0 || t > self.horizon {
            return 0.0;
        }
        let k = self.knots.partition_point(|&(t0, _)| t0 <= t);
        self.knots[k.saturating_sub(1)].1
    }

    /// Knot times strictly inside the window.
    fn interior_breaks(&self) -> impl Iterator<Item = f64> + '_ {
        self.knots.iter().map(|k| k.0).filter(move |&t| t > 0.0 && t < self.horizon)
    }

    /// Shortest segment inside the window.
    pub fn min_segment(&self) -> f64 {
        let mut edges: Vec<f64> = core::iter::once(0.0).chain(self.interior_breaks()).collect();
        edges.push(self.horizon);
        edges.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min)
    }
}

/// Cavity damping into a thermal bath.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize), serde(default, deny_unknown_fields))]
pub struct DissipatorSpec {
    pub kappa: f64,
    pub n_th: f64,
}

impl Default for DissipatorSpec {
    fn default() -> Self {
        DissipatorSpec::closed()
    }
}

impl DissipatorSpec {
    pub fn closed() -> Self {
        DissipatorSpec { kappa: 0.0, n_th: 0.0 }
    }

    pub fn new(kappa: f64, n_th: f64) -> Result<Self> {
        let d = DissipatorSpec { kappa, n_th };
        d.validate()?;
        Ok(d)
    }

    pub fn is_closed(&self) -> bool {
        self.kappa == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.kappa >= 0.0) || !self.kappa.is_finite() || !(self.n_th >= 0.0) || !self.n_th.is_finite() {
            return Err(Error::InvalidConfig("kappa and n_th must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize), serde(rename_all = "snake_case"))]
pub enum Method {
    Rk4,
    ExactPropagator,
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize), serde(default, deny_unknown_fields))]
pub struct EvolutionSpec {
    /// Integrator step in units of `1/ω_a`.
    pub dt: f64,
    /// Integrator steps between recorded samples.
    pub sample_stride: usize,
    pub method: Method,
    /// Record battery eigenlevel populations at each sample.
    pub populations: bool,
    /// Diagonalize density matrices at each sample and abort on negative
    /// eigenvalues below `-abort_tolerance`.
    pub check_positivity: bool,
    /// Trace / positivity tolerance that aborts an open run.
    pub abort_tolerance: f64,
    /// Norm drift `|‖ψ‖² - 1|` that aborts a closed run. RK4 is not unitary
    /// and loses norm steadily, roughly like `t·dt⁵`.
    pub norm_tolerance: f64,
    /// Open runs step with `dt / startup_refinement` until this time, while
    /// the nearly pure initial state has eigenvalues close to zero.
    pub startup_time: f64,
    pub startup_refinement: usize,
}

impl Default for EvolutionSpec {
    fn default() -> Self {
        EvolutionSpec::closed_default()
    }
}

impl EvolutionSpec {
    pub fn closed_default() -> Self {
        EvolutionSpec {
            dt: 0.005,
            sample_stride: 20,
            method: Method::Rk4,
            populations: false,
            check_positivity: true,
            abort_tolerance: 1e-8,
            norm_tolerance: 1e-3,
            startup_time: 0.0,
            startup_refinement: 1,
        }
    }

    pub fn open_default() -> Self {
        EvolutionSpec {
            dt: 0.01,
            sample_stride: 10,
            startup_time: 2.0,
            startup_refinement: 8,
            ..EvolutionSpec::closed_default()
        }
    }

    /// The default for the given dissipation.
    pub fn default_for(dis: &DissipatorSpec) -> Self {
        if dis.is_closed() {
            EvolutionSpec::closed_default()
        } else {
            EvolutionSpec::open_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::InvalidConfig("dt must be positive".into()));
        }
        if self.sample_stride == 0 {
            return Err(Error::InvalidConfig("sample_stride must be at least 1".into()));
        }
        if !(self.abort_tolerance > 0.0) || !(self.norm_tolerance > 0.0) {
            return Err(Error::InvalidConfig("abort tolerances must be positive".into()));
        }
        if !(self.startup_time >= 0.0) || !self.startup_time.is_finite() || self.startup_refinement == 0 {
            return Err(Error::InvalidConfig("startup_time must be non-negative and startup_refinement at least 1".into()));
        }
        Ok(())
    }

    /// Sample grid `0, stride·dt, 2·stride·dt, …` up to `horizon`, always
    /// including `horizon` itself.
    pub fn sample_times(&self, horizon: f64) -> Vec<f64> {
        let step = self.dt * self.sample_stride as f64;
        let n = math::round(horizon / step) as usize;
        let mut out: Vec<f64> = (0..=n).map(|k| k as f64 * step).filter(|&t| t < horizon - 1e-9 * step).collect();
        if out.is_empty() || horizon > 0.0 {
            out.push(horizon);
        }
        out
    }
}

/// Mean bath occupation `1/(e^x - 1)` for `x = ħω_c / k_B T`.
pub fn thermal_occupation(ratio: f64) -> Result<f64> {
    if !(ratio > 0.0) {
        return Err(Error::InvalidArgument("ħω/k_BT must be positive; pass n_th directly for infinite temperature".into()));
    }
    Ok(1.0 / math::exp_m1(ratio))
}

/// Everything the integrators need about one model, built once.
#[derive(Clone, Debug)]
pub struct ChargingSystem {
    cfg: ModelConfig,
    basis: CompositeBasis,
    battery_dim: usize,
    cavity_dim: usize,
    h_battery: CMatrix,
    battery_eigen: HermitianEigen,
    h_static: CMatrix,
    h_interaction: CMatrix,
    initial: CVector,
    e0: f64,
}

impl ChargingSystem {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let h_battery = hilbert::build_battery_hamiltonian(cfg)?;
        let battery_eigen = hilbert::eig_hermitian(&h_battery)?;
        let (e0, ground) = hilbert::battery_ground_state(cfg, &h_battery)?;
        let cavity_dim = cfg.fock_max() + 1;
        let initial = hilbert::product_with_fock(&ground, cavity_dim, cfg.n_sites);
        Ok(ChargingSystem {
            cfg: cfg.clone(),
            basis: cfg.basis(),
            battery_dim: h_battery.nrows(),
            cavity_dim,
            h_static: hilbert::build_static_hamiltonian(cfg)?,
            h_interaction: hilbert::build_interaction_hamiltonian(cfg)?,
            h_battery,
            battery_eigen,
            initial,
            e0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn basis(&self) -> &CompositeBasis {
        &self.basis
    }

    pub fn battery_dim(&self) -> usize {
        self.battery_dim
    }

    pub fn cavity_dim(&self) -> usize {
        self.cavity_dim
    }

    pub fn total_dim(&self) -> usize {
        self.battery_dim * self.cavity_dim
    }

    pub fn h_battery(&self) -> &CMatrix {
        &self.h_battery
    }

    pub fn battery_eigen(&self) -> &HermitianEigen {
        &self.battery_eigen
    }

    /// `Tr[H_B ρ_B(0)]`, the zero point of the stored energy.
    pub fn reference_energy(&self) -> f64 {
        self.e0
    }

    /// `|G>_B ⊗ |N>_C`.
    pub fn initial_state(&self) -> &CVector {
        &self.initial
    }

    pub fn initial_density(&self) -> CMatrix {
        &self.initial * self.initial.adjoint()
    }

    /// `H_C + H_B + g·H_I` on the composite space.
    pub fn hamiltonian(&self, g: f64) -> CMatrix {
        &self.h_static + &self.h_interaction * C64::new(g, 0.0)
    }

    fn sparse_hamiltonian(&self, g: f64) -> Csr {
        Csr::linear_combination(&self.h_static, &self.h_interaction, g, DROP_TOL)
    }

    /// Cavity annihilation operator on the composite space.
    pub fn annihilation(&self) -> CMatrix {
        hilbert::composite_annihilation(&self.cfg).expect("configuration validated at construction")
    }

    /// Photon number of each composite basis state.
    fn photon_numbers(&self) -> Vec<usize> {
        (0..self.total_dim()).map(|k| k % self.cavity_dim).collect()
    }

    /// Parity of (spin lowering steps + photons) for each composite state.
    fn parities(&self) -> Vec<u8> {
        (0..self.total_dim())
            .map(|k| {
                let digits = self.basis.digits(k);
                (digits.iter().sum::<usize>() % 2) as u8
            })
            .collect()
    }

    /// Observables of a pure composite state.
    pub fn observe_pure(&self, t: f64, psi: &CVector, populations: bool) -> Result<Sample> {
        metrics::observe_pure(self, t, psi, populations)
    }

    /// Observables of a composite density matrix.
    pub fn observe_mixed(&self, t: f64, rho: &CMatrix, populations: bool, positivity: bool) -> Result<Sample> {
        metrics::observe_mixed(self, t, rho, populations, positivity)
    }
}

/// A pure state vector or a density matrix on the composite space.
#[derive(Clone, Debug, PartialEq)]
pub enum QuantumState {
    Pure(CVector),
    Mixed(CMatrix),
}

impl QuantumState {
    pub fn dim(&self) -> usize {
        match self {
            QuantumState::Pure(v) => v.len(),
            QuantumState::Mixed(m) => m.nrows(),
        }
    }

    pub fn to_density(&self) -> CMatrix {
        match self {
            QuantumState::Pure(v) => v * v.adjoint(),
            QuantumState::Mixed(m) => m.clone(),
        }
    }
}

/// Dense reference for the Lindblad generator,
/// `-i[H,ρ] + κ/2 (n+1)(2aρa† - a†aρ - ρa†a) + κ/2 n (2a†ρa - aa†ρ - ρaa†)`.
pub fn lindblad_rhs(rho: &CMatrix, h: &CMatrix, dis: &DissipatorSpec, a: &CMatrix) -> Result<CMatrix> {
    let n = rho.nrows();
    for m in [h, a] {
        if m.nrows() != n || m.ncols() != n {
            return Err(Error::DimensionMismatch { expected: n, found: m.nrows() });
        }
    }
    if rho.ncols() != n {
        return Err(Error::DimensionMismatch { expected: n, found: rho.ncols() });
    }
    let mi = C64::new(0.0, -1.0);
    let mut out = (h * rho - rho * h) * mi;
    if dis.kappa != 0.0 {
        let ad = a.adjoint();
        let ada = &ad * a;
        let aad = a * &ad;
        let two = C64::new(2.0, 0.0);
        let emit = (a * rho * &ad) * two - &ada * rho - rho * &ada;
        let absorb = (&ad * rho * a) * two - &aad * rho - rho * &aad;
        out += emit * C64::new(0.5 * dis.kappa * (dis.n_th + 1.0), 0.0);
        out += absorb * C64::new(0.5 * dis.kappa * dis.n_th, 0.0);
    }
    Ok(out)
}

/// `exp(-iHt)` from the eigendecomposition of `H`.
pub fn exact_propagator(h: &CMatrix, duration: f64) -> Result<CMatrix> {
    let eig = hilbert::eig_hermitian(h)?;
    Ok(propagator_from_eigen(&eig, duration))
}

fn propagator_from_eigen(eig: &HermitianEigen, duration: f64) -> CMatrix {
    let n = eig.dim();
    let mut scaled = eig.vectors.clone();
    for k in 0..n {
        let (s, c) = math::sin_cos(-eig.values[k] * duration);
        let phase = C64::new(c, s);
        for r in 0..n {
            scaled[(r, k)] *= phase;
        }
    }
    scaled * eig.vectors.adjoint()
}

/// RK4 for `dψ/dt = -i(H - E_ref)ψ` followed by the global phase
/// `exp(-i E_ref t)`. Shifting by the state's energy keeps the populated
/// frequencies small, which is what controls RK4's norm loss.
struct PureRk4 {
    h: Csr,
    k: Vec<C64>,
    tmp: Vec<C64>,
    acc: Vec<C64>,
}

impl PureRk4 {
    fn new(h: Csr) -> Self {
        let n = h.dim();
        PureRk4 { h, k: vec![ZERO; n], tmp: vec![ZERO; n], acc: vec![ZERO; n] }
    }

    fn energy(&mut self, psi: &[C64]) -> f64 {
        self.h.mul_vec_shifted(psi, 0.0, &mut self.k);
        psi.iter().zip(&self.k).map(|(a, b)| (a.conj() * b).re).sum()
    }

    fn advance(&mut self, psi: &mut [C64], duration: f64, steps: usize) {
        let shift = self.energy(psi);
        let h = duration / steps as f64;
        let mi = C64::new(0.0, -1.0);
        let PureRk4 { h: op, k, tmp, acc } = self;
        for _ in 0..steps {
            // k1
            op.mul_vec_shifted(psi, shift, k);
            for i in 0..psi.len() {
                let ki = k[i] * mi;
                acc[i] = ki;
                tmp[i] = psi[i] + ki * (0.5 * h);
            }
            // k2
            op.mul_vec_shifted(tmp, shift, k);
            for i in 0..psi.len() {
                let ki = k[i] * mi;
                acc[i] += ki * 2.0;
                tmp[i] = psi[i] + ki * (0.5 * h);
            }
            // k3
            op.mul_vec_shifted(tmp, shift, k);
            for i in 0..psi.len() {
                let ki = k[i] * mi;
                acc[i] += ki * 2.0;
                tmp[i] = psi[i] + ki * h;
            }
            // k4
            op.mul_vec_shifted(tmp, shift, k);
            for i in 0..psi.len() {
                acc[i] += k[i] * mi;
                psi[i] += acc[i] * (h / 6.0);
            }
        }
        let (s, c) = math::sin_cos(-shift * duration);
        let phase = C64::new(c, s);
        for z in psi.iter_mut() {
            *z *= phase;
        }
    }
}

/// Basis ordering used by the open-system kernel: natural index `k` sits at
/// position `pos[k]`, and positions are grouped into contiguous blocks.
#[derive(Clone, Debug)]
struct SectorLayout {
    pos: Vec<usize>,
    order: Vec<usize>,
    /// `(start, size)` of each block in position order.
    blocks: Vec<(usize, usize)>,
}

impl SectorLayout {
    fn single(dim: usize) -> Self {
        SectorLayout { pos: (0..dim).collect(), order: (0..dim).collect(), blocks: vec![(0, dim)] }
    }

    fn parity(parities: &[u8]) -> Self {
        let dim = parities.len();
        let mut order: Vec<usize> = (0..dim).filter(|&k| parities[k] == 0).collect();
        let n_even = order.len();
        order.extend((0..dim).filter(|&k| parities[k] == 1));
        let mut pos = vec![0; dim];
        for (p, &k) in order.iter().enumerate() {
            pos[k] = p;
        }
        let blocks = [(0, n_even), (n_even, dim - n_even)].into_iter().filter(|b| b.1 > 0).collect();
        SectorLayout { pos, order, blocks }
    }

    #[cfg(test)]
    fn is_blocked(&self) -> bool {
        self.blocks.len() > 1
    }
}

const NONE: usize = usize::MAX;

/// Density matrix stored as its dense diagonal blocks, each row-major,
/// concatenated in block order.
struct OpenKernel {
    dim: usize,
    layout: SectorLayout,
    /// Per position: block index, local index.
    block_of: Vec<(usize, usize)>,
    /// Storage offset of each block.
    offsets: Vec<usize>,
    len: usize,
    /// Hamiltonian in position order; never couples different blocks.
    h: Csr,
    /// Values of `h` when it is real, which makes the row update a plain
    /// real axpy over interleaved complex data.
    h_real: Option<Vec<f64>>,
    photons: Vec<f64>,
    /// Storage index of the state with one photon more (less) split into
    /// a row part and a column part, so entry `(up(p), up(q))` sits at
    /// `up_row[p] + up_col[q]`. Missing neighbours point at index 0 and
    /// carry a zero ladder coefficient.
    up_row: Vec<usize>,
    up_col: Vec<usize>,
    down_row: Vec<usize>,
    down_col: Vec<usize>,
    sqrt_up: Vec<f64>,
    sqrt_down: Vec<f64>,
    aad: Vec<f64>,
    emit: f64,
    absorb: f64,
    m: Vec<C64>,
}

impl OpenKernel {
    fn new(system: &ChargingSystem, dis: &DissipatorSpec, layout: SectorLayout) -> Self {
        let dim = system.total_dim();
        let top = system.cavity_dim - 1;
        let photons_nat = system.photon_numbers();
        let mut photons = vec![0.0; dim];
        let mut up = vec![NONE; dim];
        let mut down = vec![NONE; dim];
        let mut sqrt_up = vec![0.0; dim];
        let mut sqrt_down = vec![0.0; dim];
        let mut aad = vec![0.0; dim];
        for k in 0..dim {
            let p = layout.pos[k];
            let c = photons_nat[k];
            photons[p] = c as f64;
            if c < top {
                up[p] = layout.pos[k + 1];
                sqrt_up[p] = math::sqrt((c + 1) as f64);
                // aa† of the truncated ladder is diag(1, …, n_fock, 0).
                aad[p] = (c + 1) as f64;
            }
            if c > 0 {
                down[p] = layout.pos[k - 1];
                sqrt_down[p] = math::sqrt(c as f64);
            }
        }
        let mut block_of = vec![(0, 0); dim];
        let mut offsets = Vec::with_capacity(layout.blocks.len());
        let mut len = 0;
        for (b, &(start, size)) in layout.blocks.iter().enumerate() {
            for l in 0..size {
                block_of[start + l] = (b, l);
            }
            offsets.push(len);
            len += size * size;
        }
        let split = |target: &[usize]| {
            let mut row = vec![0; dim];
            let mut col = vec![0; dim];
            for p in 0..dim {
                if target[p] != NONE {
                    let (b, l) = block_of[target[p]];
                    row[p] = offsets[b] + l * layout.blocks[b].1;
                    col[p] = l;
                }
            }
            (row, col)
        };
        let (up_row, up_col) = split(&up);
        let (down_row, down_col) = split(&down);
        OpenKernel {
            dim,
            h: Csr::from_dense(&CMatrix::zeros(1, 1), 0.0),
            h_real: None,
            layout,
            block_of,
            offsets,
            len,
            photons,
            up_row,
            up_col,
            down_row,
            down_col,
            sqrt_up,
            sqrt_down,
            aad,
            emit: 0.5 * dis.kappa * (dis.n_th + 1.0),
            absorb: 0.5 * dis.kappa * dis.n_th,
            m: vec![ZERO; len],
        }
    }

    fn set_coupling(&mut self, system: &ChargingSystem, g: f64) {
        self.h = system.sparse_hamiltonian(g).permuted(&self.layout.pos);
        self.h_real = self.h.real_values();
    }

    /// Storage index of the entry at positions `(p, q)` in one block.
    #[inline]
    fn loc(&self, p: usize, q: usize) -> usize {
        let (b, lp) = self.block_of[p];
        let (_, lq) = self.block_of[q];
        self.offsets[b] + lp * self.layout.blocks[b].1 + lq
    }

    fn pack(&self, rho: &CMatrix) -> Vec<C64> {
        let mut out = vec![ZERO; self.len];
        for &(start, size) in &self.layout.blocks {
            for p in start..start + size {
                for q in start..start + size {
                    out[self.loc(p, q)] = rho[(self.layout.order[p], self.layout.order[q])];
                }
            }
        }
        out
    }

    fn unpack(&self, packed: &[C64]) -> CMatrix {
        let mut rho = CMatrix::zeros(self.dim, self.dim);
        for &(start, size) in &self.layout.blocks {
            for p in start..start + size {
                for q in start..start + size {
                    rho[(self.layout.order[p], self.layout.order[q])] = packed[self.loc(p, q)];
                }
            }
        }
        rho
    }

    /// `out = L[rho]`. `rho` must be exactly Hermitian; only the upper
    /// triangle of each block is evaluated and then mirrored.
    fn rhs(&mut self, rho: &[C64], out: &mut [C64]) {
        for (b, &(start, size)) in self.layout.blocks.iter().enumerate() {
            let off = self.offsets[b];
            h_times_rho(&self.h, self.h_real.as_deref(), start, size, &rho[off..off + size * size], &mut self.m[off..off + size * size]);
        }
        let (emit, absorb) = (self.emit, self.absorb);
        let dissipative = emit != 0.0 || absorb != 0.0;
        for (b, &(start, size)) in self.layout.blocks.iter().enumerate() {
            let off = self.offsets[b];
            let m = &self.m[off..off + size * size];
            let end = start + size;
            let photons = &self.photons[start..end];
            let aad = &self.aad[start..end];
            let (up_col, sqrt_up) = (&self.up_col[start..end], &self.sqrt_up[start..end]);
            let (down_col, sqrt_down) = (&self.down_col[start..end], &self.sqrt_down[start..end]);
            for li in 0..size {
                let i = start + li;
                let rho_row = &rho[off + li * size..off + (li + 1) * size];
                let out_row = off + li * size;
                let (ur, dr) = (self.up_row[i], self.down_row[i]);
                for lj in li..size {
                    let d = m[li * size + lj] - m[lj * size + li].conj();
                    let mut v = C64::new(d.im, -d.re);
                    if dissipative {
                        let r = rho_row[lj];
                        let emit_term = r * (-(photons[li] + photons[lj]))
                            + rho[ur + up_col[lj]] * (2.0 * (sqrt_up[li] * sqrt_up[lj]));
                        let absorb_term = r * (-(aad[li] + aad[lj]))
                            + rho[dr + down_col[lj]] * (2.0 * (sqrt_down[li] * sqrt_down[lj]));
                        v += emit_term * emit + absorb_term * absorb;
                    }
                    out[out_row + lj] = v;
                    out[off + lj * size + li] = v.conj();
                }
            }
        }
    }
}

/// `m = H·rho` on one diagonal block of `size` rows starting at `start`.
fn h_times_rho(h: &Csr, h_real: Option<&[f64]>, start: usize, size: usize, rho: &[C64], m: &mut [C64]) {
    #[cfg(all(feature = "std", target_arch = "x86_64"))]
    {
        if std::is_x86_feature_detected!("avx512f") {
            // SAFETY: the feature was detected at runtime.
            return unsafe { h_times_rho_avx512(h, h_real, start, size, rho, m) };
        }
        if std::is_x86_feature_detected!("avx2") {
            // SAFETY: as above.
            return unsafe { h_times_rho_avx2(h, h_real, start, size, rho, m) };
        }
    }
    h_times_rho_generic(h, h_real, start, size, rho, m)
}

// Wider registers only; no operation is reordered or fused, so every
// variant produces identical bits.
#[cfg(all(feature = "std", target_arch = "x86_64"))]
#[target_feature(enable = "avx512f")]
unsafe fn h_times_rho_avx512(h: &Csr, h_real: Option<&[f64]>, start: usize, size: usize, rho: &[C64], m: &mut [C64]) {
    h_times_rho_generic(h, h_real, start, size, rho, m)
}

#[cfg(all(feature = "std", target_arch = "x86_64"))]
#[target_feature(enable = "avx2")]
unsafe fn h_times_rho_avx2(h: &Csr, h_real: Option<&[f64]>, start: usize, size: usize, rho: &[C64], m: &mut [C64]) {
    h_times_rho_generic(h, h_real, start, size, rho, m)
}

/// Column tile width: keeps the touched slices of `rho` cache resident.
const TILE: usize = 48;

#[inline(always)]
fn h_times_rho_generic(h: &Csr, h_real: Option<&[f64]>, start: usize, size: usize, rho: &[C64], m: &mut [C64]) {
    let mut c0 = 0;
    while c0 < size {
        let c1 = (c0 + TILE).min(size);
        for li in 0..size {
            let i = start + li;
            let row = &mut m[li * size + c0..li * size + c1];
            row.fill(ZERO);
            let (cols, vals) = h.row_slices(i);
            if let Some(re) = h_real {
                let re = &re[h.row_range(i)];
                let row = as_reals_mut(row);
                for (&k, &hv) in cols.iter().zip(re) {
                    let lk = k - start;
                    let src = as_reals(&rho[lk * size + c0..lk * size + c1]);
                    for (dst, s) in row.iter_mut().zip(src) {
                        *dst += hv * s;
                    }
                }
            } else {
                for (&k, &hv) in cols.iter().zip(vals) {
                    let lk = k - start;
                    let src = &rho[lk * size + c0..lk * size + c1];
                    for (dst, s) in row.iter_mut().zip(src) {
                        *dst += hv * s;
                    }
                }
            }
        }
        c0 = c1;
    }
}

fn as_reals(z: &[C64]) -> &[f64] {
    // SAFETY: `Complex<f64>` is `repr(C)` with two `f64` fields.
    unsafe { core::slice::from_raw_parts(z.as_ptr() as *const f64, 2 * z.len()) }
}

fn as_reals_mut(z: &mut [C64]) -> &mut [f64] {
    // SAFETY: as in `as_reals`.
    unsafe { core::slice::from_raw_parts_mut(z.as_mut_ptr() as *mut f64, 2 * z.len()) }
}

/// RK4 driver for [`OpenKernel`].
struct OpenRk4 {
    kernel: OpenKernel,
    k: Vec<C64>,
    tmp: Vec<C64>,
    acc: Vec<C64>,
}

impl OpenRk4 {
    fn new(kernel: OpenKernel) -> Self {
        let len = kernel.len;
        OpenRk4 { kernel, k: vec![ZERO; len], tmp: vec![ZERO; len], acc: vec![ZERO; len] }
    }

    fn advance(&mut self, rho: &mut [C64], duration: f64, steps: usize) {
        let h = duration / steps as f64;
        let OpenRk4 { kernel, k, tmp, acc } = self;
        for _ in 0..steps {
            kernel.rhs(rho, k);
            for i in 0..rho.len() {
                acc[i] = k[i];
                tmp[i] = rho[i] + k[i] * (0.5 * h);
            }
            kernel.rhs(tmp, k);
            for i in 0..rho.len() {
                acc[i] += k[i] * 2.0;
                tmp[i] = rho[i] + k[i] * (0.5 * h);
            }
            kernel.rhs(tmp, k);
            for i in 0..rho.len() {
                acc[i] += k[i] * 2.0;
                tmp[i] = rho[i] + k[i] * h;
            }
            kernel.rhs(tmp, k);
            for i in 0..rho.len() {
                acc[i] += k[i];
                rho[i] += acc[i] * (h / 6.0);
            }
        }
    }
}

fn substeps(duration: f64, dt: f64) -> usize {
    (math::ceil(duration / dt - 1e-9) as usize).max(1)
}

/// Choose the sector layout for an initial density matrix: parity blocks if
/// the Hamiltonian and the state respect them, otherwise one block.
fn layout_for(system: &ChargingSystem, rho: &CMatrix) -> SectorLayout {
    let parities = system.parities();
    let n = system.total_dim();
    let respects_tol =
        |m: &CMatrix, tol: f64| (0..n).all(|i| (0..n).all(|j| parities[i] == parities[j] || m[(i, j)].norm() <= tol));
    let respects = |m: &CMatrix| respects_tol(m, DROP_TOL);
    // Eigensolver noise leaves off-parity entries near machine precision in
    // states that have definite parity; the packed layout drops them.
    let scale = rho.iter().fold(0.0f64, |acc, z| acc.max(z.norm()));
    if respects(&system.h_static) && respects(&system.h_interaction) && respects_tol(rho, 1e-12 * scale) {
        SectorLayout::parity(&parities)
    } else {
        SectorLayout::single(n)
    }
}

/// Evolve by `duration` at constant coupling `g`. A segment carries no clock,
/// so the start-up refinement of open runs is not applied here.
pub fn evolve_segment(
    state: &QuantumState,
    g: f64,
    duration: f64,
    system: &ChargingSystem,
    dis: &DissipatorSpec,
    spec: &EvolutionSpec,
) -> Result<QuantumState> {
    spec.validate()?;
    dis.validate()?;
    if !(duration > 0.0) {
        return Err(Error::InvalidArgument("duration must be positive".into()));
    }
    if spec.dt > duration {
        return Err(Error::StepExceedsSegment { dt: spec.dt, duration });
    }
    if state.dim() != system.total_dim() {
        return Err(Error::DimensionMismatch { expected: system.total_dim(), found: state.dim() });
    }
    match (state, spec.method) {
        (QuantumState::Pure(_), _) if !dis.is_closed() => Err(Error::PureStateWithDissipation(dis.kappa)),
        (QuantumState::Pure(psi), Method::Rk4) => {
            let mut out: Vec<C64> = psi.iter().copied().collect();
            PureRk4::new(system.sparse_hamiltonian(g)).advance(&mut out, duration, substeps(duration, spec.dt));
            Ok(QuantumState::Pure(CVector::from_vec(out)))
        }
        (QuantumState::Pure(psi), Method::ExactPropagator) => {
            let u = exact_propagator(&system.hamiltonian(g), duration)?;
            Ok(QuantumState::Pure(u * psi))
        }
        (QuantumState::Mixed(rho), Method::Rk4) => {
            let mut kernel = OpenKernel::new(system, dis, layout_for(system, rho));
            kernel.set_coupling(system, g);
            let mut packed = kernel.pack(rho);
            let mut rk = OpenRk4::new(kernel);
            rk.advance(&mut packed, duration, substeps(duration, spec.dt));
            Ok(QuantumState::Mixed(rk.kernel.unpack(&packed)))
        }
        (QuantumState::Mixed(rho), Method::ExactPropagator) => {
            if !dis.is_closed() {
                return Err(Error::InvalidArgument("the exact propagator covers unitary evolution only".into()));
            }
            let u = exact_propagator(&system.hamiltonian(g), duration)?;
            Ok(QuantumState::Mixed(&u * rho * u.adjoint()))
        }
    }
}

/// Integrator state carried across a trajectory.
enum Stepper {
    Pure { psi: Vec<C64>, rk: Option<PureRk4>, g: f64 },
    Exact { psi: CVector, cache: Option<(f64, HermitianEigen)> },
    /// `t` is the elapsed time, for the start-up refinement.
    Open { rho: Vec<C64>, rk: OpenRk4, g: f64, t: f64 },
}

impl Stepper {
    fn advance(&mut self, system: &ChargingSystem, g: f64, duration: f64, spec: &EvolutionSpec) -> Result<()> {
        let dt = spec.dt;
        match self {
            Stepper::Pure { psi, rk, g: current } => {
                if rk.is_none() || *current != g {
                    *rk = Some(PureRk4::new(system.sparse_hamiltonian(g)));
                    *current = g;
                }
                rk.as_mut().expect("set above").advance(psi, duration, substeps(duration, dt));
            }
            Stepper::Exact { psi, cache } => {
                if cache.as_ref().map_or(true, |c| c.0 != g) {
                    *cache = Some((g, hilbert::eig_hermitian(&system.hamiltonian(g))?));
                }
                let u = propagator_from_eigen(&cache.as_ref().expect("set above").1, duration);
                *psi = u * &*psi;
            }
            Stepper::Open { rho, rk, g: current, t } => {
                if *current != g {
                    rk.kernel.set_coupling(system, g);
                    *current = g;
                }
                let fine = (spec.startup_time - *t).clamp(0.0, duration);
                if fine > 1e-12 {
                    rk.advance(rho, fine, substeps(fine, dt / spec.startup_refinement as f64));
                }
                let rest = duration - fine;
                if rest > 1e-12 {
                    rk.advance(rho, rest, substeps(rest, dt));
                }
                *t += duration;
            }
        }
        Ok(())
    }

    fn observe(&self, system: &ChargingSystem, t: f64, spec: &EvolutionSpec) -> Result<Sample> {
        match self {
            Stepper::Pure { psi, .. } => {
                let v = CVector::from_column_slice(psi);
                system.observe_pure(t, &v, spec.populations)
            }
            Stepper::Exact { psi, .. } => system.observe_pure(t, psi, spec.populations),
            Stepper::Open { rho, rk, .. } => {
                let full = rk.kernel.unpack(rho);
                system.observe_mixed(t, &full, spec.populations, spec.check_positivity)
            }
        }
    }
}

/// Evolve the initial state `|G>⊗|N>` under `schedule` and record metrics at
/// `sample_times` (ascending, within `[0, horizon]`).
pub fn evolve_trajectory(
    system: &ChargingSystem,
    schedule: &CouplingSchedule,
    dis: &DissipatorSpec,
    spec: &EvolutionSpec,
    sample_times: &[f64],
) -> Result<Trajectory> {
    spec.validate()?;
    dis.validate()?;
    let horizon = schedule.horizon();
    if sample_times.is_empty() {
        return Err(Error::InvalidArgument("no sample times".into()));
    }
    if sample_times.windows(2).any(|w| !(w[1] > w[0])) || sample_times[0] < 0.0 || *sample_times.last().unwrap() > horizon + 1e-12 {
        return Err(Error::InvalidArgument("sample times must be ascending within [0, horizon]".into()));
    }
    let mut stepper = if !dis.is_closed() {
        let rho0 = system.initial_density();
        let mut kernel = OpenKernel::new(system, dis, layout_for(system, &rho0));
        let g0 = schedule.coupling_at(0.0);
        kernel.set_coupling(system, g0);
        let rho = kernel.pack(&rho0);
        Stepper::Open { rho, rk: OpenRk4::new(kernel), g: g0, t: 0.0 }
    } else {
        match spec.method {
            Method::Rk4 => Stepper::Pure { psi: system.initial_state().iter().copied().collect(), rk: None, g: f64::NAN },
            Method::ExactPropagator => Stepper::Exact { psi: system.initial_state().clone(), cache: None },
        }
    };

    // Event times: knots and samples.
    let mut events: Vec<f64> = schedule.interior_breaks().chain(sample_times.iter().copied()).collect();
    events.sort_by(f64::total_cmp);
    events.dedup_by(|a, b| (*a - *b).abs() <= 1e-12);

    let mut traj = Trajectory::with_capacity(sample_times.len());
    let mut t = 0.0;
    let mut next_sample = 0;
    for &event in &events {
        let duration = event - t;
        if duration > 1e-12 {
            let g = schedule.coupling_at(t + 0.5 * duration);
            stepper.advance(system, g, duration, spec)?;
            t = event;
        }
        while next_sample < sample_times.len() && (sample_times[next_sample] - t).abs() <= 1e-12 {
            let sample = stepper.observe(system, sample_times[next_sample], spec)?;
            check_sample(&sample, spec, matches!(stepper, Stepper::Open { .. }))?;
            traj.push(sample);
            next_sample += 1;
        }
    }
    Ok(traj)
}

fn check_sample(s: &Sample, spec: &EvolutionSpec, mixed: bool) -> Result<()> {
    if !s.energy.is_finite() || !s.trace_error.is_finite() || !s.logneg.is_finite() {
        return Err(Error::NonFinite(alloc::format!("state at t = {}", s.time)));
    }
    let tol = if mixed { spec.abort_tolerance } else { spec.norm_tolerance };
    if s.trace_error > tol {
        return Err(Error::NumericalAbort { what: "trace error", time: s.time, value: s.trace_error });
    }
    if s.min_eigenvalue < -spec.abort_tolerance {
        return Err(Error::NumericalAbort { what: "minimum eigenvalue", time: s.time, value: s.min_eigenvalue });
    }
    Ok(())
}

/// Internal handle used by the reinforcement-learning environment: an
/// evolving state that is advanced one control interval at a time.
pub(crate) struct Evolver {
    stepper: Stepper,
    spec: EvolutionSpec,
}

impl Evolver {
    pub(crate) fn new(system: &ChargingSystem, dis: &DissipatorSpec, spec: &EvolutionSpec) -> Result<Self> {
        spec.validate()?;
        dis.validate()?;
        let stepper = if dis.is_closed() {
            Stepper::Pure { psi: system.initial_state().iter().copied().collect(), rk: None, g: f64::NAN }
        } else {
            let rho0 = system.initial_density();
            let mut kernel = OpenKernel::new(system, dis, layout_for(system, &rho0));
            kernel.set_coupling(system, 0.0);
            let rho = kernel.pack(&rho0);
            Stepper::Open { rho, rk: OpenRk4::new(kernel), g: 0.0, t: 0.0 }
        };
        Ok(Evolver { stepper, spec: *spec })
    }

    pub(crate) fn advance(&mut self, system: &ChargingSystem, g: f64, duration: f64) -> Result<()> {
        self.stepper.advance(system, g, duration, &self.spec)
    }

    /// Stored energy of the current state.
    pub(crate) fn energy(&self, system: &ChargingSystem) -> f64 {
        match &self.stepper {
            Stepper::Pure { psi, .. } => metrics::battery_energy_pure(system, psi),
            Stepper::Exact { psi, .. } => metrics::battery_energy_pure(system, psi.as_slice()),
            Stepper::Open { rho, rk, .. } => {
                let full = rk.kernel.unpack(rho);
                metrics::battery_energy_mixed(system, &full)
            }
        }
    }

    /// Density matrix of the current state in the natural basis.
    pub(crate) fn density(&self) -> CMatrix {
        match &self.stepper {
            Stepper::Pure { psi, .. } => {
                let v = CVector::from_column_slice(psi);
                &v * v.adjoint()
            }
            Stepper::Exact { psi, .. } => psi * psi.adjoint(),
            Stepper::Open { rho, rk, .. } => rk.kernel.unpack(rho),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hilbert::Spin;

    fn max_abs(m: &CMatrix) -> f64 {
        m.iter().fold(0.0, |acc, z| acc.max(z.norm()))
    }

    fn small(spin: Spin, j: f64) -> ChargingSystem {
        ChargingSystem::new(&ModelConfig::new(spin, 2, j).with_fock(5)).unwrap()
    }

    /// Random density matrix with the given parity structure.
    fn random_density(n: usize, seed: u64) -> CMatrix {
        let mut x = seed;
        let mut next = || {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((x >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        };
        let a = CMatrix::from_fn(n, n, |_, _| C64::new(next(), next()));
        let rho = &a * a.adjoint();
        let tr = rho.trace();
        rho / tr
    }

    #[test]
    fn thermal_occupation_values() {
        assert!((thermal_occupation(2f64.ln()).unwrap() - 1.0).abs() < 1e-14);
        assert!(thermal_occupation(800.0).unwrap() < 1e-300);
        assert!((thermal_occupation(6f64.ln()).unwrap() - 0.2).abs() < 1e-14);
        assert!(thermal_occupation(0.0).is_err());
        assert!(thermal_occupation(-1.0).is_err());
    }

    #[test]
    fn schedule_validation_and_lookup() {
        let s = CouplingSchedule::new(vec![(0.0, 1.0), (1.0, 0.0), (2.5, 0.5)], 4.0).unwrap();
        assert_eq!(s.coupling_at(0.5), 1.0);
        assert_eq!(s.coupling_at(1.0), 0.0);
        assert_eq!(s.coupling_at(3.0), 0.5);
        assert_eq!(s.coupling_at(4.5), 0.0, "gate closes after the horizon");
        assert_eq!(s.min_segment(), 1.0);
        assert!(CouplingSchedule::new(vec![(0.1, 1.0)], 1.0).is_err());
        assert!(CouplingSchedule::new(vec![(0.0, 1.0), (0.0, 2.0)], 1.0).is_err());
        assert!(CouplingSchedule::new(vec![(0.0, -1.0)], 1.0).is_err());
        assert!(CouplingSchedule::new(vec![(0.0, f64::NAN)], 1.0).is_err());
    }

    #[test]
    fn closed_limit_is_commutator() {
        let sys = small(Spin::HALF, 1.0);
        let rho = random_density(sys.total_dim(), 3);
        let h = sys.hamiltonian(0.7);
        let out = lindblad_rhs(&rho, &h, &DissipatorSpec::closed(), &sys.annihilation()).unwrap();
        let expected = (&h * &rho - &rho * &h) * C64::new(0.0, -1.0);
        assert!(max_abs(&(out - expected)) < 1e-14);
    }

    #[test]
    fn lindblad_rhs_traceless_and_hermitian() {
        let sys = small(Spin::ONE, -1.0);
        let dis = DissipatorSpec::new(0.5, 0.2).unwrap();
        for seed in 0..4 {
            let rho = random_density(sys.total_dim(), seed);
            let out = lindblad_rhs(&rho, &sys.hamiltonian(1.0), &dis, &sys.annihilation()).unwrap();
            assert!(out.trace().norm() < 1e-12);
            assert!(hilbert::hermiticity_residual(&out) < 1e-12);
        }
    }

    #[test]
    fn thermal_cavity_is_a_fixed_point() {
        // g = 0, battery in its ground state, cavity in the truncated Gibbs
        // state with p_{n+1}/p_n = n_th/(n_th+1): detailed balance of both
        // channels makes the dissipator vanish level by level.
        let sys = small(Spin::HALF, 0.0);
        let dis = DissipatorSpec::new(0.5, 0.2).unwrap();
        let dc = sys.cavity_dim();
        let ratio = dis.n_th / (dis.n_th + 1.0);
        let weights: Vec<f64> = (0..dc).map(|n| ratio.powi(n as i32)).collect();
        let z: f64 = weights.iter().sum();
        let cav = CMatrix::from_fn(dc, dc, |r, c| if r == c { C64::new(weights[r] / z, 0.0) } else { ZERO });
        let mut g = CVector::zeros(sys.battery_dim());
        g[hilbert::all_down_index(sys.config())] = C64::new(1.0, 0.0);
        let rho = hilbert::kron(&(&g * g.adjoint()), &cav);
        let out = lindblad_rhs(&rho, &sys.hamiltonian(0.0), &dis, &sys.annihilation()).unwrap();
        assert!(max_abs(&out) < 1e-14);
    }

    #[test]
    fn fast_kernel_matches_dense_generator() {
        for (spin, j, kappa, n_th, g) in [(Spin::HALF, 1.0, 0.5, 0.2, 1.0), (Spin::ONE, -1.0, 0.3, 1.0, 0.4)] {
            let sys = small(spin, j);
            let dis = DissipatorSpec::new(kappa, n_th).unwrap();
            // A parity-blocked state: evolve the initial state briefly.
            let rho0 = sys.initial_density();
            let rho = match evolve_segment(&QuantumState::Mixed(rho0), g, 0.3, &sys, &dis, &EvolutionSpec::open_default()).unwrap() {
                QuantumState::Mixed(m) => m,
                _ => unreachable!(),
            };
            let dense = lindblad_rhs(&rho, &sys.hamiltonian(g), &dis, &sys.annihilation()).unwrap();
            for layout in [layout_for(&sys, &rho), SectorLayout::single(sys.total_dim())] {
                let mut kernel = OpenKernel::new(&sys, &dis, layout);
                kernel.set_coupling(&sys, g);
                let packed = kernel.pack(&rho);
                let mut out = vec![ZERO; packed.len()];
                kernel.rhs(&packed, &mut out);
                let fast = kernel.unpack(&out);
                assert!(max_abs(&(fast - &dense)) < 1e-12);
            }
            assert!(layout_for(&sys, &rho).is_blocked());
        }
    }

    #[test]
    fn exact_propagator_properties() {
        let sys = small(Spin::HALF, 1.0);
        let h = sys.hamiltonian(1.0);
        let n = h.nrows();
        let u0 = exact_propagator(&h, 0.0).unwrap();
        assert!(max_abs(&(u0 - hilbert::identity(n))) < 1e-12);
        let u1 = exact_propagator(&h, 0.3).unwrap();
        let u2 = exact_propagator(&h, 0.5).unwrap();
        let u12 = exact_propagator(&h, 0.8).unwrap();
        assert!(max_abs(&(&u1 * &u2 - &u12)) < 1e-10);
        assert!(max_abs(&(u1.adjoint() * &u1 - hilbert::identity(n))) < 1e-10);
        let d = CMatrix::from_fn(2, 2, |r, c| if r == c { C64::new([0.5, -2.0][r], 0.0) } else { ZERO });
        let ud = exact_propagator(&d, 1.5).unwrap();
        assert!((ud[(0, 0)] - C64::new(0.0, -0.75).exp()).norm() < 1e-14);
        assert!((ud[(1, 1)] - C64::new(0.0, 3.0).exp()).norm() < 1e-14);
        assert_eq!(ud[(0, 1)], ZERO);
    }

    #[test]
    fn decoupled_initial_state_only_gains_phase() {
        let sys = small(Spin::HALF, 1.0);
        let psi0 = QuantumState::Pure(sys.initial_state().clone());
        let out = evolve_segment(&psi0, 0.0, 2.0, &sys, &DissipatorSpec::closed(), &EvolutionSpec::closed_default()).unwrap();
        let QuantumState::Pure(psi) = out else { unreachable!() };
        let overlap = sys.initial_state().dotc(&psi).norm();
        assert!((overlap - 1.0).abs() < 1e-10);
        let s = sys.observe_pure(2.0, &psi, false).unwrap();
        assert!(s.energy.abs() < 1e-10);
    }

    #[test]
    fn segment_semigroup() {
        let sys = small(Spin::ONE, -1.0);
        let spec = EvolutionSpec::closed_default();
        let dis = DissipatorSpec::closed();
        let psi0 = QuantumState::Pure(sys.initial_state().clone());
        let whole = evolve_segment(&psi0, 1.0, 1.0, &sys, &dis, &spec).unwrap();
        let half = evolve_segment(&psi0, 1.0, 0.5, &sys, &dis, &spec).unwrap();
        let halves = evolve_segment(&half, 1.0, 0.5, &sys, &dis, &spec).unwrap();
        let (QuantumState::Pure(a), QuantumState::Pure(b)) = (whole, halves) else { unreachable!() };
        assert!((a - b).norm() < 1e-9);

        let open = DissipatorSpec::new(0.5, 0.2).unwrap();
        let ospec = EvolutionSpec::open_default();
        let rho0 = QuantumState::Mixed(sys.initial_density());
        let whole = evolve_segment(&rho0, 1.0, 1.0, &sys, &open, &ospec).unwrap();
        let half = evolve_segment(&rho0, 1.0, 0.5, &sys, &open, &ospec).unwrap();
        let halves = evolve_segment(&half, 1.0, 0.5, &sys, &open, &ospec).unwrap();
        let (QuantumState::Mixed(a), QuantumState::Mixed(b)) = (whole, halves) else { unreachable!() };
        assert!(max_abs(&(a - b)) < 1e-9);
    }

    #[test]
    fn rk4_matches_exact_propagator() {
        let sys = ChargingSystem::new(&ModelConfig::new(Spin::HALF, 3, 1.0)).unwrap();
        let psi0 = QuantumState::Pure(sys.initial_state().clone());
        let dis = DissipatorSpec::closed();
        let rk = evolve_segment(&psi0, 1.0, 3.0, &sys, &dis, &EvolutionSpec::closed_default()).unwrap();
        let exact_spec = EvolutionSpec { method: Method::ExactPropagator, ..EvolutionSpec::closed_default() };
        let ex = evolve_segment(&psi0, 1.0, 3.0, &sys, &dis, &exact_spec).unwrap();
        let (QuantumState::Pure(a), QuantumState::Pure(b)) = (rk, ex) else { unreachable!() };
        assert!((a - b).norm() < 1e-6);
    }

    #[test]
    fn open_rk4_matches_unitary_conjugation_when_closed() {
        let sys = small(Spin::HALF, 1.0);
        let rho0 = QuantumState::Mixed(sys.initial_density());
        let dis = DissipatorSpec::closed();
        let rk = evolve_segment(&rho0, 1.0, 1.0, &sys, &dis, &EvolutionSpec::closed_default()).unwrap();
        let exact_spec = EvolutionSpec { method: Method::ExactPropagator, ..EvolutionSpec::closed_default() };
        let ex = evolve_segment(&rho0, 1.0, 1.0, &sys, &dis, &exact_spec).unwrap();
        assert!(max_abs(&(rk.to_density() - ex.to_density())) < 1e-6);
    }

    #[test]
    fn segment_errors() {
        let sys = small(Spin::HALF, 0.0);
        let psi0 = QuantumState::Pure(sys.initial_state().clone());
        let open = DissipatorSpec::new(0.5, 0.0).unwrap();
        assert!(matches!(
            evolve_segment(&psi0, 1.0, 1.0, &sys, &open, &EvolutionSpec::open_default()),
            Err(Error::PureStateWithDissipation(_))
        ));
        assert!(matches!(
            evolve_segment(&psi0, 1.0, 0.001, &sys, &DissipatorSpec::closed(), &EvolutionSpec::closed_default()),
            Err(Error::StepExceedsSegment { .. })
        ));
    }

    #[test]
    fn closed_runs_abort_on_norm_drift_only_past_norm_tolerance() {
        let sys = ChargingSystem::new(&ModelConfig::new(Spin::ONE, 2, 0.0)).unwrap();
        let sched = CouplingSchedule::constant(1.0, 4.0).unwrap();
        let spec = EvolutionSpec { dt: 0.02, ..EvolutionSpec::closed_default() };
        let times = spec.sample_times(4.0);
        let traj = evolve_trajectory(&sys, &sched, &DissipatorSpec::closed(), &spec, &times).unwrap();
        let drift = traj.trace_error.iter().copied().fold(0.0, f64::max);
        assert!(drift > 0.0 && drift < spec.norm_tolerance);
        let strict = EvolutionSpec { norm_tolerance: 0.5 * drift, ..spec };
        assert!(matches!(
            evolve_trajectory(&sys, &sched, &DissipatorSpec::closed(), &strict, &times),
            Err(Error::NumericalAbort { what: "trace error", .. })
        ));
    }

    #[test]
    fn sample_grid_includes_endpoints() {
        let spec = EvolutionSpec { dt: 0.01, sample_stride: 10, ..EvolutionSpec::open_default() };
        let t = spec.sample_times(1.0);
        assert_eq!(t.len(), 11);
        assert_eq!(t[0], 0.0);
        assert_eq!(*t.last().unwrap(), 1.0);
        assert_eq!(spec.sample_times(0.0), vec![0.0]);
        assert_eq!(spec.sample_times(0.25).last().copied(), Some(0.25));
    }
}
