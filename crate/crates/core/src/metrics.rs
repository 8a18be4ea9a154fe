//! Charging observables: stored energy, average power, logarithmic
//! negativity between battery and cavity, eigenlevel populations and the
//! summaries built on them.

use alloc::vec;
use alloc::vec::Vec;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::dynamics::ChargingSystem;
use crate::error::{Error, Result};
use crate::hilbert::{self, CompositeBasis, HermitianEigen};
use crate::math;
use crate::{CMatrix, CVector, C64};

/// Observables at one instant.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub time: f64,
    pub energy: f64,
    pub power: f64,
    pub logneg: f64,
    /// `|Tr ρ - 1|`, or `|‖ψ‖² - 1|` for pure states.
    pub trace_error: f64,
    /// Population of the highest retained Fock level.
    pub top_fock_pop: f64,
    /// Mean photon number `<a†a>`.
    pub photons: f64,
    /// Largest `|ρ_ij - conj(ρ_ji)|`; zero for pure states.
    pub herm_error: f64,
    /// Smallest eigenvalue of ρ; zero for pure states, NaN when not computed.
    pub min_eigenvalue: f64,
    pub populations: Option<Vec<f64>>,
}

/// Sampled charging run, stored column-wise.
#[derive(Clone, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub energy: Vec<f64>,
    pub power: Vec<f64>,
    pub logneg: Vec<f64>,
    pub populations: Option<Vec<Vec<f64>>>,
    pub trace_error: Vec<f64>,
    pub top_fock_pop: Vec<f64>,
    pub photons: Vec<f64>,
    pub herm_error: Vec<f64>,
    pub min_eigenvalue: Vec<f64>,
}

impl Trajectory {
    pub fn with_capacity(n: usize) -> Self {
        Trajectory {
            times: Vec::with_capacity(n),
            energy: Vec::with_capacity(n),
            power: Vec::with_capacity(n),
            logneg: Vec::with_capacity(n),
            populations: None,
            trace_error: Vec::with_capacity(n),
            top_fock_pop: Vec::with_capacity(n),
            photons: Vec::with_capacity(n),
            herm_error: Vec::with_capacity(n),
            min_eigenvalue: Vec::with_capacity(n),
        }
    }

    /// Build from bare time, energy and negativity columns; power is derived.
    pub fn from_series(times: Vec<f64>, energy: Vec<f64>, logneg: Vec<f64>) -> Result<Self> {
        let n = times.len();
        if energy.len() != n || logneg.len() != n {
            return Err(Error::DimensionMismatch { expected: n, found: energy.len().min(logneg.len()) });
        }
        let power = times.iter().zip(&energy).map(|(&t, &e)| average_power(e, t)).collect();
        Ok(Trajectory {
            times,
            energy,
            power,
            logneg,
            populations: None,
            trace_error: vec![0.0; n],
            top_fock_pop: vec![0.0; n],
            photons: vec![0.0; n],
            herm_error: vec![0.0; n],
            min_eigenvalue: vec![0.0; n],
        })
    }

    pub fn push(&mut self, s: Sample) {
        self.times.push(s.time);
        self.energy.push(s.energy);
        self.power.push(s.power);
        self.logneg.push(s.logneg);
        self.trace_error.push(s.trace_error);
        self.top_fock_pop.push(s.top_fock_pop);
        self.photons.push(s.photons);
        self.herm_error.push(s.herm_error);
        self.min_eigenvalue.push(s.min_eigenvalue);
        if let Some(p) = s.populations {
            self.populations.get_or_insert_with(Vec::new).push(p);
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Maximal-power stopping point of a trajectory.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct PowerPeak {
    pub t_peak: f64,
    pub p_max: f64,
    pub e_at_peak: f64,
    pub logneg_at_peak: f64,
}

/// Window averages of a trajectory.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct WindowStats {
    pub mean_energy: f64,
    pub std_energy: f64,
    pub mean_logneg: f64,
    pub samples: usize,
}

fn check_square(m: &CMatrix, dim: usize) -> Result<()> {
    if m.nrows() != dim || m.ncols() != dim {
        return Err(Error::DimensionMismatch { expected: dim, found: if m.nrows() != dim { m.nrows() } else { m.ncols() } });
    }
    Ok(())
}

fn check_factors(basis: &CompositeBasis, factors: &[usize]) -> Result<Vec<bool>> {
    let mut mask = vec![false; basis.n_factors()];
    for &f in factors {
        if f >= mask.len() {
            return Err(Error::IndexOutOfRange { index: f, len: mask.len() });
        }
        if mask[f] {
            return Err(Error::InvalidArgument("repeated factor".into()));
        }
        mask[f] = true;
    }
    Ok(mask)
}

/// Reduced density matrix on the factors in `keep` (in basis order).
pub fn partial_trace(rho: &CMatrix, basis: &CompositeBasis, keep: &[usize]) -> Result<CMatrix> {
    check_square(rho, basis.total_dim())?;
    if keep.is_empty() {
        return Err(Error::InvalidArgument("keep at least one factor".into()));
    }
    let mask = check_factors(basis, keep)?;
    let dims = basis.factor_dims();
    let kept = CompositeBasis::new(dims.iter().zip(&mask).filter(|p| *p.1).map(|p| *p.0).collect())?;
    let traced =
        CompositeBasis::new(dims.iter().zip(&mask).filter(|p| !*p.1).map(|p| *p.0).chain(core::iter::once(1)).collect())?;
    let n = basis.total_dim();
    // Split every composite index into (kept, traced) sub-indices once.
    let split: Vec<(usize, usize)> = (0..n)
        .map(|k| {
            let d = basis.digits(k);
            let mut kd = Vec::with_capacity(kept.n_factors());
            let mut td = Vec::with_capacity(traced.n_factors());
            for (f, &digit) in d.iter().enumerate() {
                if mask[f] {
                    kd.push(digit);
                } else {
                    td.push(digit);
                }
            }
            td.push(0);
            (kept.index(&kd), traced.index(&td))
        })
        .collect();
    let mut out = CMatrix::zeros(kept.total_dim(), kept.total_dim());
    for c in 0..n {
        for r in 0..n {
            if split[r].1 == split[c].1 {
                out[(split[r].0, split[c].0)] += rho[(r, c)];
            }
        }
    }
    Ok(out)
}

/// Partial transpose on the factors in `factors`.
pub fn partial_transpose(rho: &CMatrix, basis: &CompositeBasis, factors: &[usize]) -> Result<CMatrix> {
    check_square(rho, basis.total_dim())?;
    let mask = check_factors(basis, factors)?;
    let n = basis.total_dim();
    let digits: Vec<Vec<usize>> = (0..n).map(|k| basis.digits(k)).collect();
    let mut out = CMatrix::zeros(n, n);
    let mut rd = vec![0; basis.n_factors()];
    let mut cd = vec![0; basis.n_factors()];
    for c in 0..n {
        for r in 0..n {
            for f in 0..mask.len() {
                if mask[f] {
                    rd[f] = digits[c][f];
                    cd[f] = digits[r][f];
                } else {
                    rd[f] = digits[r][f];
                    cd[f] = digits[c][f];
                }
            }
            out[(basis.index(&rd), basis.index(&cd))] = rho[(r, c)];
        }
    }
    Ok(out)
}

/// `Tr[H_B ρ_B] - e0`.
pub fn stored_energy(rho_b: &CMatrix, h_b: &CMatrix, e0: f64) -> Result<f64> {
    check_square(rho_b, h_b.nrows())?;
    check_square(h_b, h_b.nrows())?;
    Ok(trace_product(h_b, rho_b) - e0)
}

/// `Re Tr[A B]` without forming the product.
fn trace_product(a: &CMatrix, b: &CMatrix) -> f64 {
    let n = a.nrows();
    let mut acc = 0.0;
    for i in 0..n {
        for k in 0..n {
            acc += (a[(i, k)] * b[(k, i)]).re;
        }
    }
    acc
}

/// `E/t`, with `P(0) = 0`.
pub fn average_power(e: f64, t: f64) -> f64 {
    if t > 0.0 {
        e / t
    } else {
        0.0
    }
}

/// `log₂‖ρ^{T_B}‖₁` for the bipartition (all factors but the last) vs the
/// last factor.
pub fn log_negativity(rho: &CMatrix, basis: &CompositeBasis) -> Result<f64> {
    check_square(rho, basis.total_dim())?;
    let tr = rho.trace();
    if (tr - C64::new(1.0, 0.0)).norm() > 1e-6 {
        return Err(Error::InvalidArgument(alloc::format!("density matrix trace {tr} is not 1")));
    }
    if basis.n_factors() < 2 {
        return Err(Error::InvalidArgument("bipartition needs at least two factors".into()));
    }
    let battery: Vec<usize> = (0..basis.n_factors() - 1).collect();
    let pt = partial_transpose(rho, basis, &battery)?;
    Ok(trace_norm_log2(&pt)?.max(0.0))
}

fn trace_norm_log2(m: &CMatrix) -> Result<f64> {
    let ev = hilbert::eigvals_hermitian_blocked(m)?;
    Ok(math::log2(ev.iter().map(|x| x.abs()).sum::<f64>()))
}

/// Logarithmic negativity of a pure state `Σ ψ[b·d_c + c] |b>|c>`, from its
/// Schmidt coefficients: `2 log₂ Σ_k √λ_k`.
pub fn log_negativity_pure(psi: &[C64], battery_dim: usize, cavity_dim: usize) -> Result<f64> {
    if psi.len() != battery_dim * cavity_dim {
        return Err(Error::DimensionMismatch { expected: battery_dim * cavity_dim, found: psi.len() });
    }
    let reduced = if battery_dim <= cavity_dim {
        reduce_pure_battery(psi, battery_dim, cavity_dim)
    } else {
        reduce_pure_cavity(psi, battery_dim, cavity_dim)
    };
    let norm: f64 = psi.iter().map(|z| z.norm_sqr()).sum();
    let ev = hilbert::eigvals_hermitian(&reduced)?;
    let s: f64 = ev.iter().map(|&l| math::sqrt(l.max(0.0) / norm)).sum();
    Ok((2.0 * math::log2(s)).max(0.0))
}

fn reduce_pure_battery(psi: &[C64], db: usize, dc: usize) -> CMatrix {
    CMatrix::from_fn(db, db, |r, c| {
        let (a, b) = (&psi[r * dc..(r + 1) * dc], &psi[c * dc..(c + 1) * dc]);
        a.iter().zip(b).map(|(x, y)| x * y.conj()).sum()
    })
}

fn reduce_pure_cavity(psi: &[C64], db: usize, dc: usize) -> CMatrix {
    CMatrix::from_fn(dc, dc, |r, c| (0..db).map(|b| psi[b * dc + r] * psi[b * dc + c].conj()).sum())
}

/// Battery reduced state of a composite density matrix (cavity last).
pub fn reduce_battery(rho: &CMatrix, db: usize, dc: usize) -> Result<CMatrix> {
    check_square(rho, db * dc)?;
    Ok(CMatrix::from_fn(db, db, |r, c| (0..dc).map(|k| rho[(r * dc + k, c * dc + k)]).sum()))
}

/// `p_i = <ε_i|ρ_B|ε_i>` over the ascending eigenlevels.
pub fn energy_populations(rho_b: &CMatrix, eig: &HermitianEigen) -> Result<Vec<f64>> {
    let n = eig.dim();
    check_square(rho_b, n)?;
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let v = eig.vectors.column(k);
        let rv = rho_b * v;
        out.push(v.dotc(&rv).re);
    }
    Ok(out)
}

/// Largest sampled power over `t > 0`; ties go to the earliest sample.
pub fn find_power_peak(traj: &Trajectory) -> Result<PowerPeak> {
    let mut best: Option<usize> = None;
    for k in 0..traj.len() {
        if traj.times[k] > 0.0 && best.map_or(true, |b| traj.power[k] > traj.power[b]) {
            best = Some(k);
        }
    }
    let k = best.ok_or_else(|| Error::InvalidArgument("trajectory has no samples after t = 0".into()))?;
    let t_peak = traj.times[k];
    let e_at_peak = traj.energy[k];
    Ok(PowerPeak { t_peak, p_max: e_at_peak / t_peak, e_at_peak, logneg_at_peak: traj.logneg[k] })
}

/// Mean and population standard deviation of `E`, and mean `E_N`, over the
/// samples with `window.0 <= t <= window.1`.
pub fn steady_window_stats(traj: &Trajectory, window: (f64, f64)) -> Result<WindowStats> {
    let (lo, hi) = window;
    let (first, last) = match (traj.times.first(), traj.times.last()) {
        (Some(&a), Some(&b)) => (a, b),
        _ => return Err(Error::InvalidArgument("empty trajectory".into())),
    };
    if !(lo <= hi) || lo < first - 1e-12 || hi > last + 1e-12 {
        return Err(Error::InvalidArgument(alloc::format!("window [{lo}, {hi}] outside sampled range [{first}, {last}]")));
    }
    let idx: Vec<usize> = (0..traj.len()).filter(|&k| traj.times[k] >= lo - 1e-12 && traj.times[k] <= hi + 1e-12).collect();
    if idx.is_empty() {
        return Err(Error::InvalidArgument("window contains no samples".into()));
    }
    let n = idx.len() as f64;
    let mean_energy = idx.iter().map(|&k| traj.energy[k]).sum::<f64>() / n;
    let var = idx.iter().map(|&k| (traj.energy[k] - mean_energy).powi(2)).sum::<f64>() / n;
    let mean_logneg = idx.iter().map(|&k| traj.logneg[k]).sum::<f64>() / n;
    Ok(WindowStats { mean_energy, std_energy: math::sqrt(var), mean_logneg, samples: idx.len() })
}

/// The final 20% of the sampled range.
pub fn default_steady_window(traj: &Trajectory) -> Result<(f64, f64)> {
    match (traj.times.first(), traj.times.last()) {
        (Some(&a), Some(&b)) => Ok((b - 0.2 * (b - a), b)),
        _ => Err(Error::InvalidArgument("empty trajectory".into())),
    }
}

/// Stored energy of a pure composite state held as a slice.
pub(crate) fn battery_energy_pure(system: &ChargingSystem, psi: &[C64]) -> f64 {
    let rho_b = reduce_pure_battery(psi, system.battery_dim(), system.cavity_dim());
    trace_product(system.h_battery(), &rho_b) - system.reference_energy()
}

pub(crate) fn battery_energy_mixed(system: &ChargingSystem, rho: &CMatrix) -> f64 {
    let rho_b = reduce_battery(rho, system.battery_dim(), system.cavity_dim()).expect("composite dimension");
    trace_product(system.h_battery(), &rho_b) - system.reference_energy()
}

pub(crate) fn observe_pure(system: &ChargingSystem, t: f64, psi: &CVector, populations: bool) -> Result<Sample> {
    let (db, dc) = (system.battery_dim(), system.cavity_dim());
    let slice = psi.as_slice();
    let rho_b = reduce_pure_battery(slice, db, dc);
    let energy = if t == 0.0 { 0.0 } else { trace_product(system.h_battery(), &rho_b) - system.reference_energy() };
    let norm: f64 = slice.iter().map(|z| z.norm_sqr()).sum();
    let top = (0..db).map(|b| slice[b * dc + dc - 1].norm_sqr()).sum();
    let photons = (0..db * dc).map(|k| (k % dc) as f64 * slice[k].norm_sqr()).sum();
    Ok(Sample {
        time: t,
        energy,
        power: average_power(energy, t),
        logneg: log_negativity_pure(slice, db, dc)?,
        trace_error: (norm - 1.0).abs(),
        top_fock_pop: top,
        photons,
        herm_error: 0.0,
        min_eigenvalue: 0.0,
        populations: if populations { Some(energy_populations(&rho_b, system.battery_eigen())?) } else { None },
    })
}

pub(crate) fn observe_mixed(
    system: &ChargingSystem,
    t: f64,
    rho: &CMatrix,
    populations: bool,
    positivity: bool,
) -> Result<Sample> {
    let (db, dc) = (system.battery_dim(), system.cavity_dim());
    let rho_b = reduce_battery(rho, db, dc)?;
    let energy = if t == 0.0 { 0.0 } else { trace_product(system.h_battery(), &rho_b) - system.reference_energy() };
    let battery: Vec<usize> = (0..system.basis().n_factors() - 1).collect();
    let pt = partial_transpose(rho, system.basis(), &battery)?;
    let n = db * dc;
    let min_eigenvalue = if positivity {
        hilbert::eigvals_hermitian_blocked(rho)?.first().copied().unwrap_or(0.0)
    } else {
        f64::NAN
    };
    Ok(Sample {
        time: t,
        energy,
        power: average_power(energy, t),
        logneg: trace_norm_log2(&pt)?.max(0.0),
        trace_error: (rho.trace().re - 1.0).abs(),
        top_fock_pop: (0..db).map(|b| rho[(b * dc + dc - 1, b * dc + dc - 1)].re).sum(),
        photons: (0..n).map(|k| (k % dc) as f64 * rho[(k, k)].re).sum(),
        herm_error: hilbert::hermiticity_residual(rho),
        min_eigenvalue,
        populations: if populations { Some(energy_populations(&rho_b, system.battery_eigen())?) } else { None },
    })
}
