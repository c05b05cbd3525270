import numpy as np
import pytest

from forcedvi.continuous import StateTangent, energy_value, reference_solve
from forcedvi.discrete import alpha_rule, integrate, lobatto_galerkin
from forcedvi.errors import BadMass, GridMismatch
from forcedvi.experiments import (
    CONVERGENCE_COLUMNS,
    ENSEMBLE_COLUMNS,
    ENSEMBLE_H_RANGE,
    ConvergenceSpec,
    EnsembleSpec,
    benchmark_damped_linear,
    benchmark_van_der_pol,
    default_ladder,
    energy_error_series,
    fit_slope,
    fmt,
    monotone_to_floor,
    render_csv,
    run_convergence,
    run_ensemble,
    sample_initial_states,
    trajectory_columns,
    write_convergence_csv,
    write_ensemble_csv,
    write_trajectory_csv,
)


# -- benchmarks ---------------------------------------------------------------

def test_damped_linear_rejects_bad_mass():
    with pytest.raises(BadMass):
        benchmark_damped_linear([[1.0, 0.0], [0.0, -1.0]], np.zeros((2, 2)), np.eye(2))
    with pytest.raises(BadMass):
        benchmark_damped_linear([[1.0, 0.5], [0.0, 1.0]], np.zeros((2, 2)), np.eye(2))


def test_damped_linear_closed_form_decay(damped):
    # roots -0.1 +- i sqrt(0.99) with q(0)=1, v(0)=0
    w = np.sqrt(0.99)
    for t in (0.0, 0.3, 1.0, 5.0):
        q, v = damped.exact(t)
        expect = np.exp(-0.1 * t) * (np.cos(w * t) + 0.1 / w * np.sin(w * t))
        assert q[0] == pytest.approx(expect, abs=1e-13)


def test_harmonic_reference_conserves_energy(oscillator):
    rec = reference_solve(oscillator.system, oscillator.initial, 1.0, 1e-3)
    assert np.ptp(rec.energy) < 1e-8


def test_van_der_pol_defaults(vdp):
    assert vdp.params == {"eps": 0.5, "rho": 0.02, "lam": 0.8}
    assert np.array_equal(vdp.initial.q, [-0.5, -0.25])
    assert np.array_equal(vdp.initial.v, [0.0, 4.0])
    assert vdp.t_end == 1.0
    assert energy_value(vdp.system, vdp.initial.q, vdp.initial.v) == pytest.approx(8.206875, abs=1e-12)


def test_uncoupled_van_der_pol_limit():
    b = benchmark_van_der_pol(0.5, 0.0, 0.0)
    rec = reference_solve(b.system, StateTangent([1.0, 0.0], [0.5, 0.0]), 1.0, 1e-3)
    assert np.abs(rec.q[:, 1]).max() == 0.0
    # finite-difference residual of q'' - (eps - q^2) q' + q on the dense grid
    t, q, v = rec.t, rec.q[:, 0], rec.v[:, 0]
    h = t[1] - t[0]
    acc = (v[2:] - v[:-2]) / (2 * h)
    res = acc - (0.5 - q[1:-1] ** 2) * v[1:-1] + q[1:-1]
    assert np.abs(res).max() < 1e-5  # central-difference truncation dominates
    # and directly through the vector field
    from forcedvi.continuous import forced_el_acceleration

    a = np.array([forced_el_acceleration(b.system, StateTangent(qq, vv))[0] for qq, vv in zip(rec.q, rec.v)])
    direct = a - (0.5 - q**2) * v + q
    assert np.abs(direct).max() < 1e-8


# -- fits ---------------------------------------------------------------------

def test_fit_slope_exact_power_law():
    h = np.geomspace(0.25, 1e-3, 8)
    fit = fit_slope(h, 3 * h**4)
    assert fit.slope == pytest.approx(4.0, abs=1e-12) and fit.r2 == pytest.approx(1.0)
    floored = fit_slope(h, np.maximum(h**4, 1e-13))
    assert floored.retained == int(np.sum(h**4 >= 1e-11))


def test_monotone_to_floor():
    h = np.array([0.1, 0.05, 0.025, 0.0125])
    assert monotone_to_floor(h, [1e-6, 1e-8, 1e-12, 3e-12])
    assert not monotone_to_floor(h, [1e-6, 1e-5, 1e-12, 3e-12])


def test_default_ladder_spans_two_decades():
    steps = default_ladder()
    assert len(steps) == 8 and steps[0] == 4 and steps[-1] == 1000
    assert len(default_ladder(1.0, *ENSEMBLE_H_RANGE)) == 8


def test_energy_error_series(vdp):
    Ld = alpha_rule(vdp.system, 0.5)
    a = integrate(Ld, vdp.initial, 20, 0.05)
    s = energy_error_series(a, a)
    assert s.final == 0.0 and np.all(s.profile == 0)
    with pytest.raises(GridMismatch):
        energy_error_series(a, integrate(Ld, vdp.initial, 10, 0.1))


def test_energy_richardson_ratio(vdp):
    Ld = alpha_rule(vdp.system, 0.5)
    Lref = lobatto_galerkin(vdp.system, 3)
    ref = integrate(Lref, vdp.initial, 400, 0.0025).energy[-1]
    e1 = abs(integrate(Ld, vdp.initial, 100, 0.01).energy[-1] - ref)
    e2 = abs(integrate(Ld, vdp.initial, 200, 0.005).energy[-1] - ref)
    assert e1 / e2 == pytest.approx(4.0, rel=0.05)


def test_unforced_harmonic_midpoint_order(oscillator):
    st = run_convergence(oscillator, ConvergenceSpec("alpha", steps=(4, 8, 16, 32, 64), h_ref=2e-3))
    assert abs(st.slope - 2.0) <= 0.1


# -- convergence on van der Pol ---------------------------------------------------

@pytest.mark.slow
def test_reference_cross_check(vdp_reference):
    assert vdp_reference.cross_check_gap < 1e-9
    assert vdp_reference.h == pytest.approx(2.5e-4)


@pytest.mark.slow
@pytest.mark.parametrize("name,order,tol", [("midpoint", 2, 0.1), ("lobatto2", 2, 0.1), ("lobatto3", 4, 0.15)])
def test_observed_order(vdp_studies, name, order, tol):
    st = vdp_studies[name]
    assert abs(st.slope - order) <= tol
    assert st.r2 >= 0.99 and st.retained >= 4
    assert not st.failures


@pytest.mark.slow
@pytest.mark.parametrize("name", ["lobatto4", "lobatto5"])
def test_high_stage_orders(vdp_studies, name):
    st = vdp_studies[name]
    assert st.slope >= 5 or monotone_to_floor(st.h, st.err_state)


@pytest.mark.slow
@pytest.mark.parametrize("name,order", [("midpoint", 2), ("lobatto2", 2), ("lobatto3", 4)])
def test_halving_ratio_mid_ladder(vdp, name, order):
    from forcedvi.experiments import make_integrator

    family, stages = ("alpha", 3) if name == "midpoint" else ("lobatto", int(name[-1]))
    Ld = make_integrator(vdp.system, family, stages)
    fine = integrate(lobatto_galerkin(vdp.system, 3), vdp.initial, 2000, 5e-4).final_state()
    N = 40
    e1 = np.abs(integrate(Ld, vdp.initial, N, 1 / N).final_state() - fine).max()
    e2 = np.abs(integrate(Ld, vdp.initial, 2 * N, 1 / (2 * N)).final_state() - fine).max()
    assert 2**order / 1.5 <= e1 / e2 <= 2**order * 1.5


@pytest.mark.slow
@pytest.mark.parametrize("name", ["midpoint", "lobatto2", "lobatto3"])
def test_energy_slope_tracks_state_slope(vdp_studies, name):
    st = vdp_studies[name]
    assert abs(st.energy_fit.slope - st.slope) <= 0.3


@pytest.mark.slow
def test_convergence_identity_defect(vdp_studies):
    for st in vdp_studies.values():
        assert st.max_identity_defect < 1e-9


# -- ensemble -----------------------------------------------------------------

def test_sampling_is_deterministic_and_in_box(vdp):
    spec = EnsembleSpec(samples=25, seed=7)
    a, b = sample_initial_states(vdp, spec), sample_initial_states(vdp, spec)
    assert np.array_equal(a, b) and a.shape == (25, 4)
    assert np.all((a[:, :2] >= -4) & (a[:, :2] <= 4))
    assert np.all(a[:, 2:] == [0.0, 4.0])
    # sample i does not depend on the sample count
    assert np.array_equal(sample_initial_states(vdp, EnsembleSpec(samples=3, seed=7)), a[:3])
    both = sample_initial_states(vdp, EnsembleSpec(samples=5, seed=7, sample_velocities=True))
    assert np.ptp(both[:, 2]) > 0


@pytest.mark.slow
def test_ensemble_of_25(vdp):
    st = run_ensemble(vdp, EnsembleSpec(samples=25, seed=0, steps=tuple(default_ladder(1.0, *ENSEMBLE_H_RANGE))))
    assert not st.failures
    assert st.slopes.shape == (25,)
    assert np.all((st.slopes >= 3.7) & (st.slopes <= 4.3))
    assert np.all(st.max >= st.mean) and np.all(st.mean >= st.min)
    assert st.max_identity_defect < 1e-9


def test_small_ensemble_is_reproducible(vdp, tmp_path):
    spec = EnsembleSpec(samples=3, seed=11, steps=(10, 20, 40), h_ref=1e-2)
    a, b = run_ensemble(vdp, spec), run_ensemble(vdp, spec)
    write_ensemble_csv(a, tmp_path / "a.csv")
    write_ensemble_csv(b, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


# -- CSV output -------------------------------------------------------------------

def test_fmt_round_trips():
    for x in (0.1, 1 / 3, 2.0**-40, 1e300, -7.0, 12345678.901234567):
        assert float(fmt(x)) == x
    assert fmt(0.1) == "0.10000000000000001"


def test_render_csv():
    text = render_csv(("a", "b"), [(1, 0.5)])
    assert text.splitlines() == ["a,b", "1,0.5"]


def test_csv_schemas(vdp, tmp_path):
    rec = integrate(alpha_rule(vdp.system, 0.5), vdp.initial, 10, 0.1)
    write_trajectory_csv(rec, tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == ",".join(trajectory_columns(2)) == "t,q1,q2,p1,p2,E,identity_defect,newton_iters"
    assert len(lines) == 12
    assert all(len(l.split(",")) == 8 for l in lines[1:])
    [float(x) for l in lines[1:] for x in l.split(",")]

    st = run_convergence(vdp, ConvergenceSpec("alpha", steps=(4, 8, 16, 32), h_ref=1e-2, cross_check=False))
    write_convergence_csv([st], tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert tuple(lines[0].split(",")) == CONVERGENCE_COLUMNS
    assert len(lines) == 5
    assert {l.split(",")[0] for l in lines[1:]} == {st.method}

    ens = run_ensemble(vdp, EnsembleSpec(samples=2, seed=3, steps=(8, 16), h_ref=1e-2))
    write_ensemble_csv(ens, tmp_path / "e.csv")
    lines = (tmp_path / "e.csv").read_text().splitlines()
    assert tuple(lines[0].split(",")) == ENSEMBLE_COLUMNS
    assert len(lines) == 1 + 2 * 2
