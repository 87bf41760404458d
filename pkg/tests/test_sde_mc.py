import math

import numpy as np
import pytest

from risksens.gridfn import make_grid
from risksens.hamiltonians import GeneralProblem
from risksens.portfolio import baseline_params
from risksens.sde_mc import (
    FeedbackPolicy,
    SimulationError,
    constant_policy,
    generate_noise,
    map_blocks,
    noise_blocks,
    simulate_factor_original,
    simulate_factor_transformed,
    simulate_generic,
    simulate_wealth_original,
    write_paths_csv,
)

GRID = make_grid(0.0, 1.0, 16)


def test_noise_is_reproducible_and_scaled():
    a = generate_noise(GRID, 5000, 2, seed=3)
    b = generate_noise(GRID, 5000, 2, seed=3)
    assert a.increments.shape == (16, 5000, 2)
    assert np.array_equal(a.increments, b.increments)
    assert a.increments.var() == pytest.approx(GRID.dt, rel=0.02)
    assert not a.increments.flags.writeable


def test_path_increments_do_not_depend_on_block_size():
    small = generate_noise(GRID, 10, 2, seed=1, block_index=4)
    large = generate_noise(GRID, 1000, 2, seed=1, block_index=4)
    assert np.array_equal(small.increments, large.increments[:, :10])


def test_blocks_and_seeds_are_distinct():
    a = generate_noise(GRID, 100, 2, seed=1, block_index=0).increments
    b = generate_noise(GRID, 100, 2, seed=1, block_index=1).increments
    c = generate_noise(GRID, 100, 2, seed=2, block_index=0).increments
    assert abs(np.corrcoef(a.ravel(), b.ravel())[0, 1]) < 0.05
    assert not np.array_equal(a, c)


def test_noise_blocks_cover_all_paths():
    blocks = list(noise_blocks(GRID, 25, 2, seed=0, block_size=10))
    assert [b.n_paths for b in blocks] == [10, 10, 5]
    assert [b.block_index for b in blocks] == [0, 1, 2]


def test_coarsen_sums_increments():
    fine = generate_noise(make_grid(0.0, 1.0, 8), 3, 2, seed=0)
    coarse = fine.coarsen(4)
    assert coarse.grid.n_steps == 2
    assert np.allclose(coarse.increments[0], fine.increments[:4].sum(axis=0))
    with pytest.raises(ValueError):
        fine.coarsen(3)


def test_map_blocks_preserves_order():
    blocks = list(range(20))
    assert map_blocks(lambda b: b * b, blocks, workers=4) == [b * b for b in blocks]


def test_feedback_policy_shapes():
    pol = FeedbackPolicy(lambda t, x: 2 * x, "double")
    u = pol.control(0.0, np.arange(6.0).reshape(3, 2))
    assert u.shape == (3, 1) and np.array_equal(u[:, 0], [0.0, 4.0, 8.0])
    assert np.array_equal(pol.shifted(0.5).control(0.0, np.ones((2, 1)))[:, 0], [2.5, 2.5])
    assert constant_policy(0.3).control(0.0, np.ones((4, 1))).shape == (4, 1)


def test_euler_mean_matches_the_discrete_recursion():
    p = baseline_params()
    noise = generate_noise(GRID, 40000, 2, seed=11)
    paths = simulate_factor_original(p, 1.0, noise)
    m = 1.0
    for _ in range(16):
        m = m + (p.b + p.B * m) * GRID.dt
    se = paths.x[-1].std() / math.sqrt(40000)
    assert abs(paths.x[-1].mean() - m) < 4 * se


def test_transformed_drift_shift_is_deterministic():
    # same noise, constant control: the two factor paths differ by the deterministic
    # solution of y' = B y - theta c u
    p = baseline_params()
    noise = generate_noise(GRID, 50, 2, seed=0)
    orig = simulate_factor_original(p, 1.0, noise)
    tran = simulate_factor_transformed(p, constant_policy(0.7), 1.0, noise)
    d = tran.x - orig.x
    y = 0.0
    for k in range(16):
        y = y + (p.B * y - p.theta * p.c * 0.7) * GRID.dt
    assert np.allclose(d[-1], y, atol=1e-14)


def test_wealth_without_stock_grows_at_the_riskless_rate():
    p = baseline_params(v=2.0)
    paths = simulate_wealth_original(p, constant_policy(0.0), 1.0, 2.0,
                                     generate_noise(GRID, 10, 2, seed=0))
    assert np.allclose(paths.log_v[-1], math.log(2.0) + 0.02, atol=1e-14)
    with pytest.raises(ValueError):
        simulate_wealth_original(p, constant_policy(0.0), 1.0, 0.0,
                                 generate_noise(GRID, 10, 2, seed=0))


def test_non_finite_state_raises_with_location():
    shape = lambda x, u: np.broadcast_shapes(np.shape(x)[:-1], np.shape(u)[:-1])
    explode = GeneralProblem(
        1, 1, 1, f=lambda t, x, u: x ** 4,
        sigma=lambda t, x, u: np.zeros(shape(x, u) + (1, 1)),
        l=lambda t, x, u: np.zeros(shape(x, u)), g=lambda x: 0 * x[..., 0], mu=1.0)
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(SimulationError) as exc:
            simulate_generic(explode, constant_policy(0.0), [10.0],
                             generate_noise(GRID, 2, 1, seed=0))
    assert exc.value.step >= 1 and exc.value.path == 0


def test_dimension_checks():
    p = baseline_params()
    with pytest.raises(ValueError):
        simulate_factor_transformed(p, constant_policy(0.0), 1.0,
                                    generate_noise(GRID, 2, 1, seed=0))


def test_paths_csv(tmp_path):
    p = baseline_params()
    paths = simulate_wealth_original(p, constant_policy(0.5), 1.0, 1.0,
                                     generate_noise(GRID, 2, 2, seed=0))
    out = tmp_path / "paths.csv"
    write_paths_csv(paths, out)
    lines = out.read_text().splitlines()
    assert lines[0] == "path,t,x,log_v,u"
    assert len(lines) == 1 + 2 * 17
    assert lines[17].endswith(",")  # no control at the terminal node
    assert float(lines[1].split(",")[4]) == 0.5
