import numpy as np
import pytest

from crowdopt.scenario import (
    CharacteristicScales,
    EntranceSegment,
    ExitSegment,
    Rect,
    Scenario,
    classify_cells,
    nondimensionalize,
)
from crowdopt.transport import (
    ExitLedger,
    TransportError,
    cfl_dt,
    inject_inflow,
    mass,
    project_velocity,
    step_density,
)


def make_grid(width=10.0, nx=20, exits=(), entrances=(), obstacles=()):
    exits = exits or (ExitSegment("e1", "right", 4.0, 6.0),)
    s = Scenario(
        width=width, height=width, nx=nx, ny=nx,
        scales=CharacteristicScales(), alpha_deg=170.0, R=1.5, F=8.0,
        exits=tuple(exits), entrances=tuple(entrances),
        fixed_obstacles=tuple(obstacles),
    ).validate()
    return classify_cells(nondimensionalize(s))


def ledger_for(g, rho):
    led = ExitLedger(g.exit_ids)
    led.initial = mass(rho, g.h)
    return led


def test_project_clamps_into_wall():
    g = make_grid(obstacles=(Rect(6.0, 5.0, 1.0, 1.0),))
    v = np.zeros((2, g.ny, g.nx))
    v[0] = 1.0
    out = project_velocity(v, g)
    # the cell just west of the obstacle has a wall to its right
    iy, ix = 10, 10  # obstacle covers ix 11..12, iy 9..10
    assert not g.free[10, 11]
    assert out[0, iy, ix] == 0.0
    assert out[1, iy, ix] == 0.0


def test_project_keeps_tangential():
    g = make_grid()
    v = np.zeros((2, g.ny, g.nx))
    v[1] = 1.0
    out = project_velocity(v, g)
    # sliding along the right wall is allowed; the top row is clamped
    assert out[1, 5, -1] == 1.0
    assert out[1, -1, 5] == 0.0


def test_project_interior_unchanged():
    g = make_grid()
    rng = np.random.default_rng(0)
    v = rng.normal(size=(2, g.ny, g.nx))
    out = project_velocity(v, g)
    np.testing.assert_array_equal(out[:, 5:15, 5:15], v[:, 5:15, 5:15])


def test_project_exit_face_open():
    g = make_grid()
    v = np.zeros((2, g.ny, g.nx))
    v[0] = 1.0
    out = project_velocity(v, g)
    exit_rows = g.exit_id[:, -1] >= 0
    assert np.all(out[0, exit_rows, -1] == 1.0)
    assert np.all(out[0, ~exit_rows, -1] == 0.0)


def test_cfl_dt_formula():
    v = np.zeros((2, 4, 4))
    v[0, 1, 1] = 1.5
    v[1, 1, 1] = 0.5
    assert cfl_dt(v, 0.5, 0.45) == pytest.approx(0.45 * 0.5 / 2.0)  # 0.1125


def test_cfl_dt_cap_when_still():
    v = np.zeros((2, 4, 4))
    assert cfl_dt(v, 0.5) == pytest.approx(0.25)


def test_cfl_dt_halves_when_speed_doubles():
    rng = np.random.default_rng(1)
    v = rng.normal(size=(2, 6, 6))
    assert cfl_dt(2 * v, 0.5) == pytest.approx(0.5 * cfl_dt(v, 0.5), rel=1e-12)


def test_zero_velocity_keeps_density():
    g = make_grid()
    rng = np.random.default_rng(2)
    rho = rng.random((g.ny, g.nx))
    rho[~g.free] = 0.0
    led = ledger_for(g, rho)
    out = step_density(rho, np.zeros((2, g.ny, g.nx)), 0.1, g, led)
    np.testing.assert_array_equal(out, rho)
    assert led.total_evacuated == 0.0


def test_closed_room_conserves_mass_1000_steps():
    # no exit faces reached: block in the middle, swirling velocity
    g = make_grid()
    rho = np.zeros((g.ny, g.nx))
    rho[8:12, 8:12] = 1.0
    led = ledger_for(g, rho)
    m0 = mass(rho, g.h)
    rng = np.random.default_rng(3)
    v = 0.5 * rng.normal(size=(2, g.ny, g.nx))
    v = project_velocity(v, g)
    dt = cfl_dt(v, g.h)
    for _ in range(1000):
        rho = step_density(rho, v, dt, g, led)
    drift = abs(mass(rho, g.h) + led.total_evacuated - m0) / m0
    assert drift <= 1e-12
    assert rho.min() >= 0.0


def test_block_advects_and_conserves():
    g = make_grid()
    rho = np.zeros((g.ny, g.nx))
    rho[9:11, 4:6] = 1.0
    m0 = mass(rho, g.h)
    led = ledger_for(g, rho)
    v = np.zeros((2, g.ny, g.nx))
    v[0] = 1.0
    v = project_velocity(v, g)
    dt = cfl_dt(v, g.h)
    com0 = np.sum(rho * np.arange(g.nx)[None, :]) / np.sum(rho) * g.h
    for _ in range(10):
        rho = step_density(rho, v, dt, g, led)
    assert abs(mass(rho, g.h) - m0) / m0 <= 1e-12
    com1 = np.sum(rho * np.arange(g.nx)[None, :]) / np.sum(rho) * g.h
    assert abs((com1 - com0) - 10 * dt) <= g.h


def test_exit_flux_credits_ledger():
    g = make_grid()
    rho = np.zeros((g.ny, g.nx))
    exit_rows = np.nonzero(g.exit_id[:, -1] >= 0)[0]
    rho[exit_rows, -1] = 2.0
    led = ledger_for(g, rho)
    v = np.zeros((2, g.ny, g.nx))
    v[0] = 0.8
    v = project_velocity(v, g)
    dt = 0.1
    expected = float(np.sum(rho[exit_rows, -1] * 0.8)) * dt * g.h
    out = step_density(rho, v, dt, g, led)
    assert led.outflow[0] == pytest.approx(expected, rel=1e-12)
    assert led.balance_error(mass(out, g.h)) <= 1e-12


def test_global_balance_with_exit_every_step():
    g = make_grid()
    rho = np.zeros((g.ny, g.nx))
    rho[6:14, 12:18] = 1.5
    led = ledger_for(g, rho)
    v = np.zeros((2, g.ny, g.nx))
    v[0] = 1.0
    v = project_velocity(v, g)
    dt = cfl_dt(v, g.h)
    for _ in range(400):
        rho = step_density(rho, v, dt, g, led)
        assert led.balance_error(mass(rho, g.h)) <= 1e-10
    assert led.total_evacuated > 0


def test_one_dimensional_reduction_is_upwind():
    g = make_grid()
    rng = np.random.default_rng(4)
    rho = rng.random((g.ny, g.nx))
    led = ledger_for(g, rho)
    c = 0.7
    v = np.zeros((2, g.ny, g.nx))
    v[0] = c
    v = project_velocity(v, g)
    dt = 0.2
    out = step_density(rho, v, dt, g, led)
    # classical upwind row by row away from walls and exits (the last column
    # before the wall sees the projected, averaged face velocity instead)
    lam = dt / g.h
    for iy in range(2, g.ny - 2):
        if np.any(g.exit_id[iy, :] >= 0):
            continue
        expect = rho[iy, 1:-2] - lam * c * (rho[iy, 1:-2] - rho[iy, :-3])
        np.testing.assert_allclose(out[iy, 1:-2], expect, rtol=0, atol=1e-14)


def test_negative_density_raises_with_cell():
    g = make_grid()
    rho = np.zeros((g.ny, g.nx))
    rho[10, 10] = 1.0
    led = ledger_for(g, rho)
    v = np.zeros((2, g.ny, g.nx))
    v[0] = 1.0
    v = project_velocity(v, g)
    with pytest.raises(TransportError, match="ix="):
        step_density(rho, v, 2.0, g, led)  # dt far beyond CFL


def test_obstacle_cells_stay_empty():
    g = make_grid(obstacles=(Rect(5.0, 5.0, 1.5, 1.5),))
    rho = np.zeros((g.ny, g.nx))
    rho[5:15, 2:5] = 1.0
    rho[~g.free] = 0.0
    led = ledger_for(g, rho)
    v = np.zeros((2, g.ny, g.nx))
    v[0] = 1.0
    v = project_velocity(v, g)
    dt = cfl_dt(v, g.h)
    for _ in range(200):
        rho = step_density(rho, v, dt, g, led)
        assert np.all(rho[~g.free] == 0)
        assert rho.min() >= 0


def test_inflow_apportionment():
    # rate 3.5/s over 4 entrance cells of area 0.25 for dt=0.1 -> +0.35 each
    g = make_grid(
        entrances=(EntranceSegment("in", "left", 4.0, 6.0, 3.5, 25.0),),
    )
    cells = g.entrance_id == 0
    assert np.count_nonzero(cells) == 4
    rho = np.zeros((g.ny, g.nx))
    led = ExitLedger(g.exit_ids)
    out = inject_inflow(rho, g, t=0.0, dt=0.1, ledger=led)
    assert np.allclose(out[cells], 0.35)
    assert led.injected == pytest.approx(3.5 * 0.1)


def test_inflow_after_duration_noop():
    g = make_grid(entrances=(EntranceSegment("in", "left", 4.0, 6.0, 3.5, 25.0),))
    rho = np.zeros((g.ny, g.nx))
    led = ExitLedger(g.exit_ids)
    out = inject_inflow(rho, g, t=25.0, dt=0.1, ledger=led)
    np.testing.assert_array_equal(out, rho)
    assert led.injected == 0.0


def test_inflow_zero_rate_noop():
    g = make_grid(entrances=(EntranceSegment("in", "left", 4.0, 6.0, 0.0, 25.0),))
    rho = np.zeros((g.ny, g.nx))
    led = ExitLedger(g.exit_ids)
    out = inject_inflow(rho, g, t=1.0, dt=0.1, ledger=led)
    np.testing.assert_array_equal(out, rho)


def test_inflow_partial_last_interval_and_cap():
    g = make_grid(entrances=(EntranceSegment("in", "left", 4.0, 6.0, 2.0, 1.0),))
    rho = np.zeros((g.ny, g.nx))
    led = ExitLedger(g.exit_ids)
    out = inject_inflow(rho, g, t=0.9, dt=0.5, ledger=led)
    # only 0.1 time units remain
    assert led.injected == pytest.approx(2.0 * 0.1)
    # cap: a huge rate cannot push a cell past the packing limit
    led2 = ExitLedger(g.exit_ids)
    out2 = inject_inflow(rho, g, t=0.0, dt=0.5, ledger=led2, rho_cap=4.0)
    cells = g.entrance_id == 0
    assert out2[cells].max() <= 4.0


def test_entrance_face_blocked_for_outflow():
    g = make_grid(entrances=(EntranceSegment("in", "left", 4.0, 6.0, 1.0, 5.0),))
    v = np.zeros((2, g.ny, g.nx))
    v[0] = -1.0  # pushing out through the left wall
    out = project_velocity(v, g)
    cells = g.entrance_id == 0
    assert np.all(out[0][cells] == 0.0)
