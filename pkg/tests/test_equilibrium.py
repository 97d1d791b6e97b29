import math

import numpy as np
import pytest

from matchsync.equilibrium import (
    Equilibrium, NoConvergence, RankDeficiency, ac_steady_state, calibrate_omega_n,
    check_condition1, condition1_threshold, equation_residual, equilibrium_to_dict,
    feasible_input, find_equilibria, reactive_power_sw, solve_equilibrium,
    synchronization_report, synchronous_dc_current,
)
from matchsync.model import (
    ConverterParams, LineParams, Topology, assemble_model, group_action, quotient_distance,
    vector_field,
)

from conftest import LINE1, TABLE1


def test_benchmark_equilibrium(bench, bench_eq):
    eq = bench_eq
    assert eq.residual_norm < 1e-10
    assert np.all(eq.z_star[bench.sl_vdc] == pytest.approx(0.0, abs=1e-12))
    assert eq.z_star[0] == 0.0
    # table value of the DC current source, recovered from the solved state
    i_dc = feasible_input(bench, eq.z_star)[bench.sl_vdc]
    assert np.allclose(i_dc, 37.23, rtol=0.02)


def test_raw_residual_is_scaled_residual(bench, bench_eq):
    f = vector_field(bench, bench_eq.z_star, bench_eq.u_star)
    assert bench_eq.raw_residual == pytest.approx(np.max(np.abs(f)))
    assert np.allclose(equation_residual(bench, bench_eq.z_star, bench_eq.u_star),
                       f / bench.k_inv)


def test_feasible_input_of_zero_current(bench):
    z = np.zeros(bench.N)
    z[bench.sl_gamma] = [0.3, -1.2]
    assert np.all(feasible_input(bench, z) == 0)


def test_feasible_input_invariant_under_rotation(bench):
    rng = np.random.default_rng(0)
    z = rng.standard_normal(bench.N) * 20
    for th in rng.uniform(-4, 4, 10):
        assert np.allclose(feasible_input(bench, group_action(bench, z, th)),
                           feasible_input(bench, z), rtol=1e-12, atol=1e-10)


def test_dc_power_balance(bench, bench_eq):
    u = feasible_input(bench, bench_eq.z_star)
    assert np.max(np.abs(u - bench_eq.u_star)) < 1e-10


@pytest.mark.parametrize("gauge", [0.7, -2.5, 3.1])
def test_gauge_covariance(bench, bench_eq, gauge):
    eq = solve_equilibrium(bench, bench_eq.u_star, gauge_angle=gauge)
    assert eq.z_star[0] == pytest.approx(gauge, abs=1e-12)
    assert quotient_distance(bench, eq.z_star, bench_eq.z_star)[0] < 1e-8
    moved = group_action(bench, bench_eq.z_star, gauge)
    assert np.max(np.abs(moved - eq.z_star)) < 1e-8


def test_feasibility_closure(bench, bench_eq):
    u = feasible_input(bench, bench_eq.z_star)
    again = solve_equilibrium(bench, u, 0.0, guess=bench_eq.z_star, balance="none")
    assert np.max(np.abs(again.z_star - bench_eq.z_star)) < 1e-8


def test_exact_input_needs_no_slack(bench, bench_eq):
    u = feasible_input(bench, bench_eq.z_star)
    eq = solve_equilibrium(bench, u)
    assert abs(eq.slack) < 1e-9
    assert eq.residual_norm < 1e-10


def test_condition_threshold_arithmetic(bench):
    assert condition1_threshold(bench.conv) == pytest.approx(34031.25, rel=0, abs=1e-9)
    assert 0.33 ** 2 * 1000.0 ** 2 / (16 * 0.2) == pytest.approx(34031.25)


def test_condition_outcomes(bench, bench_b0, bench_eq):
    recs = check_condition1(bench, bench_eq)
    assert [r.passed for r in recs] == [True, True]
    assert all(r.margin > 0 for r in recs)
    eq0 = solve_equilibrium(bench_b0)
    recs0 = check_condition1(bench_b0, eq0)
    assert [r.passed for r in recs0] == [False, False]
    assert all(r.margin < 0 for r in recs0)
    assert recs0[0].threshold == recs[0].threshold


def test_condition_attached_to_equilibrium(bench, bench_eq):
    assert bench_eq.condition1 == tuple(check_condition1(bench, bench_eq))
    assert bench_eq.condition1[0].to_dict()["pass"] is True


def test_condition_zero_current_fails(bench):
    recs = check_condition1(bench, np.zeros(bench.N))
    assert all(r.q_sw == 0 and not r.passed for r in recs)


def test_condition_relative_margin(bench, bench_eq):
    rel = bench_eq.condition1[0].margin / bench_eq.condition1[0].threshold
    assert all(r.passed for r in check_condition1(bench, bench_eq, rel_margin=0.9 * rel))
    assert not any(r.passed for r in check_condition1(bench, bench_eq, rel_margin=1.1 * rel))


def test_reactive_power_invariant_under_rotation(bench, bench_eq):
    q = reactive_power_sw(bench, bench_eq.z_star)
    for th in (0.4, -2.0, 3.0):
        assert np.allclose(reactive_power_sw(bench, group_action(bench, bench_eq.z_star, th)), q)


def test_synchronization_report(bench, bench_eq):
    rep = synchronization_report(bench, bench_eq)
    assert np.all(np.abs(rep["omega"]) < 1e-10)
    assert np.allclose(rep["v_dc"], bench.conv.v_dc_star, atol=1e-10)
    z = bench_eq.z_star.copy()
    z[bench.sl_vdc] = [3.0, -1.0]
    rep = synchronization_report(bench, z)
    assert np.allclose(rep["omega"], bench.conv.eta * np.array([3.0, -1.0]))


def test_zero_drive_gives_zero_ac_state():
    conv = ConverterParams(**dict(TABLE1, mu=0.0, i_dc_star=0.0))
    m = assemble_model(conv, LineParams(**LINE1), Topology(2, ((0, 1),)))
    eq = solve_equilibrium(m, np.zeros(m.N), gauge_angle=0.4)
    assert np.max(np.abs(eq.z_star[m.sl_x])) == 0.0
    assert eq.residual_norm < 1e-12
    assert eq.z_star[0] == 0.4


def test_no_convergence_carries_residual(bench):
    guess = np.random.default_rng(2).standard_normal(bench.N) * 100
    with pytest.raises(NoConvergence) as err:
        solve_equilibrium(bench, guess=guess, max_iter=1)
    assert err.value.residual > 0


def test_infeasible_input_without_balance_fails(bench):
    u = bench.input_from_dc([37.23, 80.0])
    with pytest.raises(NoConvergence):
        solve_equilibrium(bench, u, balance="none", max_iter=30)


def test_rank_deficiency_detected(bench):
    # rcond=1 treats every bordered Jacobian as singular
    with pytest.raises(RankDeficiency):
        solve_equilibrium(bench, guess=np.zeros(bench.N), rcond=1.0)


def test_input_outside_dc_block_rejected(bench):
    u = bench.nominal_input()
    u[0] = 1.0
    with pytest.raises(ValueError, match="DC-current block"):
        solve_equilibrium(bench, u)


def test_initial_guess_is_ac_steady_state(bench):
    z = ac_steady_state(bench, np.array([0.2, 0.2]))
    f = vector_field(bench, z)
    assert np.max(np.abs(f[bench.sl_x] / bench.k_inv[bench.sl_x])) < 1e-9


def test_find_equilibria_distinct_orbits(bench, bench_eq):
    found = find_equilibria(bench)
    assert len(found) >= 1
    assert min(quotient_distance(bench, e.z_star, bench_eq.z_star)[0] for e in found) < 1e-8
    for a in range(len(found)):
        for b in range(a):
            assert quotient_distance(bench, found[a].z_star, found[b].z_star)[0] > 1e-4


def test_calibrated_frequency_of_benchmark(bench):
    w = calibrate_omega_n(bench.conv, bench.line, bench.topo, 37.23)
    assert w == pytest.approx(bench.omega_n, rel=1e-10)
    assert synchronous_dc_current(bench.conv, bench.line, bench.topo, w) == pytest.approx(37.23)


def test_fifty_hertz_misses_table_current(bench):
    i50 = synchronous_dc_current(bench.conv, bench.line, bench.topo, 100 * math.pi)
    assert abs(i50 - 37.23) > 20


def test_equilibrium_json(bench, bench_eq):
    d = equilibrium_to_dict(bench, bench_eq)
    for key in ("gamma", "x", "u_dc", "residual", "condition1"):
        assert key in d
    assert len(d["x"]) == 4 * bench.n + 2 * bench.m
    assert set(d["condition1"][0]) == {"k", "q_sw", "threshold", "margin", "pass"}
