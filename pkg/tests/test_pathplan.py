import math

import numpy as np
import pytest

from crowdopt.pathplan import (
    ControlSet,
    TimeSpaceValue,
    feedback_indices,
    feedback_velocity,
    solve_drift_hjb,
    solve_eikonal,
    solve_timespace_hjb,
)
from crowdopt.interaction import InteractionParams, interaction_velocity
from crowdopt.scenario import (
    CharacteristicScales,
    ExitSegment,
    Rect,
    Scenario,
    classify_cells,
    nondimensionalize,
)
from crowdopt.transport import project_velocity


def make_grid(width=10.0, height=None, nx=40, ny=None, exits=None, obstacles=()):
    height = width if height is None else height
    ny = nx if ny is None else ny
    if exits is None:
        exits = (ExitSegment("e1", "right", 0.0, height),)
    s = Scenario(
        width=width, height=height, nx=nx, ny=ny,
        scales=CharacteristicScales(), alpha_deg=170.0, R=1.5, F=8.0,
        exits=tuple(exits), fixed_obstacles=tuple(obstacles),
    ).validate()
    return classify_cells(nondimensionalize(s))


def dijkstra_oracle(g):
    """Shortest 8-connected path length from every free cell to the exit set."""
    from scipy.sparse import coo_matrix
    from scipy.sparse.csgraph import dijkstra

    ny, nx = g.ny, g.nx
    idx = np.arange(nx * ny).reshape(ny, nx)
    free = g.free
    rows, cols, data = [], [], []
    steps = [(1, 0, g.h), (-1, 0, g.h), (0, 1, g.h), (0, -1, g.h),
             (1, 1, g.h * math.sqrt(2)), (1, -1, g.h * math.sqrt(2)),
             (-1, 1, g.h * math.sqrt(2)), (-1, -1, g.h * math.sqrt(2))]
    for dy, dx, wgt in steps:
        src_y, src_x = np.nonzero(free)
        dst_y, dst_x = src_y + dy, src_x + dx
        ok = (dst_y >= 0) & (dst_y < ny) & (dst_x >= 0) & (dst_x < nx)
        src_y, src_x, dst_y, dst_x = src_y[ok], src_x[ok], dst_y[ok], dst_x[ok]
        ok = free[dst_y, dst_x]
        rows.append(idx[src_y[ok], src_x[ok]])
        cols.append(idx[dst_y[ok], dst_x[ok]])
        data.append(np.full(int(ok.sum()), wgt))
    m = coo_matrix((np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
                   shape=(nx * ny, nx * ny)).tocsr()
    sources = idx[(g.exit_id >= 0)]
    d = dijkstra(m, indices=sources, min_only=True)
    return d.reshape(ny, nx)


def test_wall_exit_is_horizontal_distance():
    g = make_grid()
    phi = solve_eikonal(g)
    xs, _ = g.cell_centers()
    exact = g.nx * g.h - xs  # distance to the right wall
    err = np.abs(phi - exact[None, :])
    assert err.max() <= 2 * g.h


def test_corner_exit_close_to_euclidean():
    # single exit cell at the top-right corner
    g = make_grid(exits=(ExitSegment("e1", "right", 9.8, 10.0),))
    phi = solve_eikonal(g)
    xs, ys = g.cell_centers()
    cx, cy = np.meshgrid(xs, ys)
    # exit cell center
    ex, ey = xs[-1], ys[-1]
    exact = np.hypot(cx - ex, cy - ey)
    err = phi - exact
    assert err.max() <= 5 * g.h           # first-order scheme, diagonal error
    assert err.min() >= -2 * g.h          # never much below the true distance


def test_gap_in_wall_matches_dijkstra():
    # wall across the room with a gap; oracle = 8-connected shortest path
    g = make_grid(
        nx=40,
        obstacles=(Rect(5.0, 2.755, 0.5, 5.49), Rect(5.0, 8.995, 0.5, 1.99)),
    )
    phi = solve_eikonal(g)
    oracle = dijkstra_oracle(g)
    free = g.free
    assert np.isfinite(phi[free]).all()
    diff = np.abs(phi[free] - oracle[free])
    assert diff.max() <= 3 * g.h


def test_obstacle_never_decreases_phi():
    g0 = make_grid(nx=30)
    g1 = make_grid(nx=30, obstacles=(Rect(5.0, 5.0, 2.0, 3.0),))
    p0 = solve_eikonal(g0)
    p1 = solve_eikonal(g1)
    free1 = g1.free
    assert np.all(p1[free1] >= p0[free1] - 1e-9)


def test_monotone_convergence_of_sweeps():
    g = make_grid(nx=25, obstacles=(Rect(5.0, 5.0, 1.0, 4.0),))
    prev = None
    for passes in (1, 2, 3, 4, 8, 16):
        phi = solve_drift_hjb(g, None, max_passes=passes, tol=0.0)
        if prev is not None:
            sel = np.isfinite(prev)
            assert np.all(phi[sel] <= prev[sel] + 1e-12)
        prev = phi


def test_drift_zero_equals_eikonal():
    g = make_grid(nx=25)
    z = np.zeros((2, g.ny, g.nx))
    np.testing.assert_allclose(solve_drift_hjb(g, z), solve_eikonal(g),
                               rtol=0, atol=1e-6)


def test_corridor_drift_favorable():
    # corridor of length 10 at unit max speed with drift 0.5 toward the exit:
    # time from the far end = 10 / 1.5
    g = make_grid(width=10.0, height=1.0, nx=100, ny=10)
    drift = np.zeros((2, g.ny, g.nx))
    drift[0] = 0.5
    phi = solve_drift_hjb(g, drift)
    far = phi[5, 0]
    x_far = 0.5 * g.h
    expect = (10.0 - x_far) / 1.5
    assert abs(far - expect) <= 2 * g.h


def test_corridor_drift_adverse():
    # drift 0.5 away from the exit: time = distance / (1 - 0.5)
    g = make_grid(width=10.0, height=1.0, nx=100, ny=10)
    drift = np.zeros((2, g.ny, g.nx))
    drift[0] = -0.5
    phi = solve_drift_hjb(g, drift)
    far = phi[5, 0]
    x_far = 0.5 * g.h
    expect = (10.0 - x_far) / 0.5
    assert abs(far - expect) <= 4 * g.h


def test_warm_start_matches_cold_start():
    g = make_grid(nx=30, obstacles=(Rect(6.0, 4.0, 1.0, 3.0),))
    drift = np.zeros((2, g.ny, g.nx))
    drift[0] = 0.3
    drift[1] = -0.2
    cold = solve_drift_hjb(g, drift)
    warm = solve_drift_hjb(g, drift, phi0=solve_eikonal(g))
    sel = np.isfinite(cold)
    np.testing.assert_allclose(warm[sel], cold[sel], atol=5e-6)


def test_unreachable_cells_keep_sentinel():
    # sealed chamber: free cells inside a closed box of obstacles
    g = make_grid(
        nx=30,
        obstacles=(Rect(5.0, 3.9, 2.2, 0.4), Rect(5.0, 6.1, 2.2, 0.4),
                   Rect(3.9, 5.0, 0.4, 2.6), Rect(6.1, 5.0, 0.4, 2.6)),
    )
    phi = solve_eikonal(g)
    inner = (np.abs(np.arange(g.nx) * g.h + g.h / 2 - 5.0) < 0.8)
    sel = np.outer(inner, inner) & g.free
    assert np.isinf(phi[sel.T]).any()
    assert np.isfinite(phi[2, 2])


def test_feedback_points_right_for_linear_phi():
    g = make_grid(nx=20)
    xs, _ = g.cell_centers()
    phi = np.tile(10.0 - xs, (g.ny, 1))
    phi[g.exit_id >= 0] = 0.0
    v = feedback_velocity(phi, g)
    interior = g.free & (g.exit_id < 0)
    interior[0, :] = interior[-1, :] = False  # walls restrict the set there
    assert np.all(v[0][interior] == pytest.approx(1.0))
    assert np.all(v[1][interior] == pytest.approx(0.0))


def test_feedback_toward_corner_matches_direction():
    g = make_grid(exits=(ExitSegment("e1", "right", 9.8, 10.0),))
    phi = solve_eikonal(g)
    v = feedback_velocity(phi, g)
    cs = ControlSet(32)
    xs, ys = g.cell_centers()
    ex, ey = xs[-1], ys[-1]
    rng = np.random.default_rng(4)
    for _ in range(20):
        ix = int(rng.integers(2, g.nx - 6))
        iy = int(rng.integers(2, g.ny - 6))
        ux, uy = ex - xs[ix], ey - ys[iy]
        nrm = math.hypot(ux, uy)
        ux, uy = ux / nrm, uy / nrm
        dot = v[0, iy, ix] * ux + v[1, iy, ix] * uy
        # within two control sectors of the exact direction
        assert dot >= math.cos(2 * 2 * math.pi / 32) - 1e-9


def test_feedback_zero_on_unreachable():
    g = make_grid(
        nx=30,
        obstacles=(Rect(5.0, 3.9, 2.2, 0.4), Rect(5.0, 6.1, 2.2, 0.4),
                   Rect(3.9, 5.0, 0.4, 2.6), Rect(6.1, 5.0, 0.4, 2.6)),
    )
    phi = solve_eikonal(g)
    v = feedback_velocity(phi, g)
    sealed = np.isinf(phi) & g.free
    assert sealed.any()
    assert np.all(v[0][sealed] == 0) and np.all(v[1][sealed] == 0)


def test_feedback_descends_phi():
    from crowdopt.pathplan import _interp
    g = make_grid(nx=30, obstacles=(Rect(5.0, 5.0, 1.5, 3.0),))
    phi = solve_eikonal(g)
    v = feedback_velocity(phi, g)
    ny, nx = phi.shape
    for iy in range(ny):
        for ix in range(nx):
            if not g.free[iy, ix] or g.exit_id[iy, ix] >= 0:
                continue
            if not np.isfinite(phi[iy, ix]) or phi[iy, ix] == 0.0:
                continue
            gx = ix + v[0, iy, ix]
            gy = iy + v[1, iy, ix]
            val = _interp(phi, gx, gy, nx, ny)
            assert val < phi[iy, ix]


def test_timespace_zero_density_equals_eikonal():
    g = make_grid(nx=25)
    p = InteractionParams(alpha=math.radians(170), R=1.0, F=8.0, r_min=g.h)
    phi_e = solve_eikonal(g)
    K = 32  # horizon past the largest static value
    rho_traj = np.zeros((K + 1, g.ny, g.nx))
    tsv = solve_timespace_hjb(g, rho_traj, dt_slice=0.4, p=p, terminal_phi=phi_e)
    free = g.free
    for k in range(K + 1):
        np.testing.assert_allclose(tsv.phi[k][free], phi_e[free], atol=3 * g.h)
    assert not tsv.terminal_dominated


def test_timespace_constant_density_matches_static_drift():
    # dilute crowd: mild drift, no unreachable pockets, fallback never binds
    g = make_grid(nx=25)
    p = InteractionParams(alpha=math.radians(170), R=1.0, F=4.0, r_min=g.h)
    rng = np.random.default_rng(5)
    rho = 0.05 * rng.random((g.ny, g.nx))
    rho[~g.free] = 0.0
    vb = np.zeros((2, g.ny, g.nx))
    vb[0] = 1.0
    drift = project_velocity(interaction_velocity(rho, vb, p, g), g)
    assert np.hypot(drift[0], drift[1]).max() < 0.7
    phi_static = solve_drift_hjb(g, drift)
    assert np.isfinite(phi_static[g.free]).all()
    dt = 0.25
    K = int(np.ceil(1.6 * phi_static[g.free].max() / dt))
    rho_traj = np.tile(rho, (K + 1, 1, 1))
    tsv = solve_timespace_hjb(g, rho_traj, dt_slice=dt, p=p, vb_orient=vb)
    free = g.free
    diff = np.abs(tsv.phi[0][free] - phi_static[free])
    assert diff.max() <= 3 * g.h
    assert not tsv.terminal_dominated


def test_timespace_single_step_is_one_update():
    g = make_grid(nx=20)
    p = InteractionParams(alpha=math.radians(170), R=1.0, F=0.0, r_min=g.h)
    rho_traj = np.zeros((2, g.ny, g.nx))
    phi_e = solve_eikonal(g)
    dt = 0.2
    tsv = solve_timespace_hjb(g, rho_traj, dt_slice=dt, p=p, terminal_phi=phi_e)
    from crowdopt.pathplan import _interp
    ny, nx = phi_e.shape
    cs = ControlSet(32)
    ax, ay = cs.ax, cs.ay
    for iy in range(0, ny, 3):
        for ix in range(0, nx, 3):
            if g.exit_id[iy, ix] >= 0:
                assert tsv.phi[0][iy, ix] == 0.0
                continue
            best = np.inf
            for m in range(32):
                val = _interp(phi_e, ix + dt * ax[m] / g.h, iy + dt * ay[m] / g.h, nx, ny)
                if np.isfinite(val):
                    best = min(best, dt + val)
            assert tsv.phi[0][iy, ix] == pytest.approx(best)


def test_timespace_short_horizon_flags_terminal():
    g = make_grid(nx=25)
    p = InteractionParams(alpha=math.radians(170), R=1.0, F=0.0, r_min=g.h)
    rho_traj = np.zeros((3, g.ny, g.nx))
    tsv = solve_timespace_hjb(g, rho_traj, dt_slice=0.05, p=p)
    assert tsv.terminal_dominated
