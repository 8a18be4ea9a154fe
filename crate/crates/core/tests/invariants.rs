//! Property tests for the physical and numerical invariants.

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use proptest::prelude::*;
use qbattery_core::dynamics::{
    evolve_segment, evolve_trajectory, lindblad_rhs, ChargingSystem, CouplingSchedule, DissipatorSpec, EvolutionSpec,
    QuantumState,
};
use qbattery_core::hilbert::{
    boson_operators, build_battery_hamiltonian, hermiticity_residual, spin_operators, CompositeBasis, ModelConfig, Spin,
};
use qbattery_core::metrics::{log_negativity, log_negativity_pure, partial_trace, partial_transpose};
use qbattery_core::CMatrix;

fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

fn max_abs(m: &CMatrix) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Random density matrix `A A† / Tr` from a seed-derived complex matrix.
fn density(entries: &[(f64, f64)], n: usize) -> CMatrix {
    let a = DMatrix::from_fn(n, n, |r, col| {
        let (x, y) = entries[(r * n + col) % entries.len()];
        c(x + 0.1 * (r as f64), y - 0.07 * (col as f64))
    });
    let m = &a * a.adjoint();
    let tr = m.trace();
    m / tr
}

fn small_model(twice_j: u32, n: usize, coupling_j: f64, fock: usize) -> ModelConfig {
    ModelConfig::new(Spin::from_twice(twice_j).unwrap(), n, coupling_j).with_fock(fock)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn su2_algebra(twice_j in 1u32..6) {
        let s = spin_operators(Spin::from_twice(twice_j).unwrap());
        let j = twice_j as f64 / 2.0;
        let i = c(0.0, 1.0);
        let comm = |a: &CMatrix, b: &CMatrix| a * b - b * a;
        prop_assert!(max_abs(&(comm(&s.sx, &s.sy) - &s.sz * i)) < 1e-12);
        prop_assert!(max_abs(&(comm(&s.sy, &s.sz) - &s.sx * i)) < 1e-12);
        prop_assert!(max_abs(&(comm(&s.sz, &s.sx) - &s.sy * i)) < 1e-12);
        let casimir = &s.sx * &s.sx + &s.sy * &s.sy + &s.sz * &s.sz;
        let d = s.sz.nrows();
        prop_assert!(max_abs(&(casimir - CMatrix::identity(d, d) * c(j * (j + 1.0), 0.0))) < 1e-12);
        // [S+, S-] = 2 Sz
        prop_assert!(max_abs(&(comm(&s.splus, &s.sminus) - &s.sz * c(2.0, 0.0))) < 1e-12);
    }

    #[test]
    fn truncated_boson_commutator(n_fock in 1usize..20) {
        let b = boson_operators(n_fock).unwrap();
        let comm = &b.a * &b.adag - &b.adag * &b.a;
        for k in 0..=n_fock {
            let want = if k == n_fock { -(n_fock as f64) } else { 1.0 };
            prop_assert!((comm[(k, k)] - c(want, 0.0)).norm() < 1e-12);
        }
        let off: f64 = (0..=n_fock).flat_map(|r| (0..=n_fock).map(move |s| (r, s))).filter(|(r, s)| r != s)
            .map(|(r, s)| comm[(r, s)].norm()).fold(0.0, f64::max);
        prop_assert!(off < 1e-12);
        prop_assert!(max_abs(&(&b.adag * &b.a - &b.number)) < 1e-12);
    }

    #[test]
    fn battery_hamiltonian_hermitian(twice_j in 1u32..4, n in 2usize..4, jj in -2.0f64..2.0, gamma in 0.0f64..1.0, delta in -1.0f64..2.0) {
        let mut cfg = small_model(twice_j, n, jj, 4);
        cfg.gamma_xy = gamma;
        cfg.delta_z = delta;
        let h = build_battery_hamiltonian(&cfg).unwrap();
        prop_assert!(hermiticity_residual(&h) < 1e-12);
    }

    #[test]
    fn lindblad_generator_is_traceless_and_hermitian(
        entries in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 16..40),
        g in 0.0f64..1.5, kappa in 0.0f64..1.0, n_th in 0.0f64..1.0,
    ) {
        let sys = ChargingSystem::new(&small_model(1, 2, 1.0, 3)).unwrap();
        let n = sys.total_dim();
        let rho = density(&entries, n);
        let dis = DissipatorSpec::new(kappa, n_th).unwrap();
        let d = lindblad_rhs(&rho, &sys.hamiltonian(g), &dis, &sys.annihilation()).unwrap();
        prop_assert!(d.trace().norm() < 1e-12);
        prop_assert!(hermiticity_residual(&d) < 1e-12);
    }

    #[test]
    fn partial_transpose_is_an_involution(entries in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 8..30), da in 2usize..4, db in 2usize..4) {
        let basis = CompositeBasis::new(vec![da, db]).unwrap();
        let rho = density(&entries, da * db);
        let once = partial_transpose(&rho, &basis, &[1]).unwrap();
        let twice = partial_transpose(&once, &basis, &[1]).unwrap();
        prop_assert!(max_abs(&(twice - &rho)) == 0.0);
        prop_assert!((once.trace() - rho.trace()).norm() < 1e-14);
        // Transposing both factors is the full transpose.
        let both = partial_transpose(&rho, &basis, &[0, 1]).unwrap();
        prop_assert!(max_abs(&(both - rho.transpose())) == 0.0);
    }

    #[test]
    fn negativity_is_nonnegative_and_locally_invariant(
        entries in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 8..30),
        theta in 0.0f64..6.3, phi in 0.0f64..6.3,
    ) {
        let basis = CompositeBasis::new(vec![2, 3]).unwrap();
        let rho = density(&entries, 6);
        let en = log_negativity(&rho, &basis).unwrap();
        prop_assert!(en >= -1e-12);
        // Local unitary on the first factor.
        let (s, co) = theta.sin_cos();
        let ph = C64::from_polar(1.0, phi);
        let u2 = DMatrix::from_row_slice(2, 2, &[c(co, 0.0), -ph.conj() * s, ph * s, c(co, 0.0)]);
        let u = u2.kronecker(&CMatrix::identity(3, 3));
        let rotated = &u * &rho * u.adjoint();
        prop_assert!((log_negativity(&rotated, &basis).unwrap() - en).abs() < 1e-10);
    }

    #[test]
    fn pure_negativity_matches_mixed(entries in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 6..6 + 1)) {
        let psi: Vec<C64> = entries.iter().map(|&(x, y)| c(x, y)).collect();
        let norm = psi.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        prop_assume!(norm > 1e-3);
        let psi: Vec<C64> = psi.iter().map(|z| z / norm).collect();
        let v = nalgebra::DVector::from_vec(psi.clone());
        let rho = &v * v.adjoint();
        let basis = CompositeBasis::new(vec![2, 3]).unwrap();
        let mixed = log_negativity(&rho, &basis).unwrap();
        let pure = log_negativity_pure(&psi, 2, 3).unwrap();
        prop_assert!((mixed - pure).abs() < 1e-10);
    }

    #[test]
    fn partial_trace_preserves_trace_and_positivity(entries in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 8..30)) {
        let basis = CompositeBasis::new(vec![2, 2, 3]).unwrap();
        let rho = density(&entries, 12);
        for keep in [vec![0], vec![1, 2], vec![0, 2]] {
            let r = partial_trace(&rho, &basis, &keep).unwrap();
            prop_assert!((r.trace() - c(1.0, 0.0)).norm() < 1e-12);
            prop_assert!(hermiticity_residual(&r) < 1e-12);
            let ev = r.clone().symmetric_eigenvalues();
            prop_assert!(ev.iter().all(|&e| e > -1e-12));
        }
    }

    #[test]
    fn schedule_is_gated_and_bounded(values in prop::collection::vec(0.0f64..1.0, 1..12), horizon in 0.5f64..30.0, t in -5.0f64..40.0) {
        let s = CouplingSchedule::from_segments(&values, horizon).unwrap();
        let g = s.coupling_at(t);
        if t < 0.0 || t > horizon {
            prop_assert_eq!(g, 0.0);
        } else {
            prop_assert!(values.contains(&g));
        }
    }

    #[test]
    fn closed_evolution_keeps_norm(g in 0.0f64..1.5, jj in -1.5f64..1.5, len in 0.05f64..1.0) {
        let sys = ChargingSystem::new(&small_model(1, 2, jj, 3)).unwrap();
        let spec = EvolutionSpec::closed_default();
        let out = evolve_segment(&QuantumState::Pure(sys.initial_state().clone()), g, len, &sys, &DissipatorSpec::closed(), &spec).unwrap();
        match out {
            QuantumState::Pure(psi) => prop_assert!((psi.norm() - 1.0).abs() < 1e-8),
            QuantumState::Mixed(_) => prop_assert!(false, "pure input must stay pure"),
        }
    }
}

#[test]
fn open_trajectory_stays_physical() {
    let sys = ChargingSystem::new(&small_model(1, 3, -1.0, 5)).unwrap();
    let dis = DissipatorSpec::new(0.5, 0.2).unwrap();
    let spec = EvolutionSpec { sample_stride: 50, ..EvolutionSpec::open_default() };
    let sched = CouplingSchedule::from_segments(&[1.0, 0.3, 0.8], 6.0).unwrap();
    let traj = evolve_trajectory(&sys, &sched, &dis, &spec, &spec.sample_times(6.0)).unwrap();
    for k in 0..traj.len() {
        assert!(traj.trace_error[k] < 1e-10);
        assert!(traj.herm_error[k] < 1e-10);
        assert!(traj.min_eigenvalue[k] > -1e-10);
        assert!(traj.logneg[k] >= -1e-12);
        assert!(traj.top_fock_pop[k] >= 0.0);
    }
}
