import numpy as np
import pytest

from pacdnet.glycemic import (
    CgmSample,
    GridValidationError,
    Thresholds,
    TrMetrics,
    compute_tr,
    no_interp_baseline,
    validate_cgm,
)


def brute_force_tr(grid, tau_low=70.0, tau_high=180.0):
    """Independent oracle: plain python loops over the indicator definitions."""
    d_days = len(grid)
    t_slots = len(grid[0])
    n_tir = n_tar = n_tbr = 0
    for d in range(d_days):
        for t in range(t_slots):
            g = grid[d][t]
            if tau_low <= g <= tau_high:
                n_tir += 1
            elif g > tau_high:
                n_tar += 1
            else:
                n_tbr += 1
    n = d_days * t_slots
    return (n_tar / n, n_tir / n, n_tbr / n)


def random_grid(rng, d, t):
    # Mixture spanning all three bins, including values pinned at the bounds.
    vals = rng.choice(
        [55.0, 69.9, 70.0, 100.0, 179.9, 180.0, 180.1, 250.0, 40.0, 400.0],
        size=(d, t),
    )
    jitter = rng.uniform(0, 0.05, size=(d, t)) * (rng.random((d, t)) < 0.5)
    return np.clip(vals + jitter, 1.0, 1000.0)


def test_hand_counted_example():
    cgm = validate_cgm([[60.0, 100.0, 190.0, 150.0]], "s", "p")
    tr = compute_tr(cgm)
    assert (tr.tar, tr.tir, tr.tbr) == (0.25, 0.50, 0.25)


def test_all_in_range():
    cgm = validate_cgm(np.full((2, 6), 100.0), "s", "p")
    tr = compute_tr(cgm)
    assert (tr.tar, tr.tir, tr.tbr) == (0.0, 1.0, 0.0)


def test_boundary_values_count_in_range():
    cgm = validate_cgm([[70.0, 180.0]], "s", "p")
    tr = compute_tr(cgm)
    assert (tr.tar, tr.tir, tr.tbr) == (0.0, 1.0, 0.0)


def test_matches_brute_force_oracle_on_random_grids():
    rng = np.random.default_rng(1234)
    for _ in range(1000):
        d = int(rng.integers(1, 4))
        t = int(rng.integers(1, 13))
        grid = random_grid(rng, d, t)
        tr = compute_tr(validate_cgm(grid, "s", "p"))
        tar, tir, tbr = brute_force_tr(grid.tolist())
        assert (tr.tar, tr.tir, tr.tbr) == (tar, tir, tbr)
        assert abs(tr.tar + tr.tir + tr.tbr - 1.0) <= 1e-9


def test_permutation_invariance():
    rng = np.random.default_rng(7)
    grid = random_grid(rng, 3, 8)
    tr = compute_tr(validate_cgm(grid, "s", "p"))
    flat = grid.reshape(-1)
    for _ in range(20):
        perm = rng.permutation(flat.size)
        shuffled = flat[perm].reshape(grid.shape)
        tr2 = compute_tr(validate_cgm(shuffled, "s", "p"))
        assert tr == tr2


def test_baseline_on_full_grid_recovers_compute_tr():
    rng = np.random.default_rng(99)
    grid = random_grid(rng, 2, 12)
    cgm = validate_cgm(grid, "s", "p")
    assert no_interp_baseline(grid.reshape(-1)) == compute_tr(cgm)


def test_single_cell_monotonicity():
    grid = np.full((2, 5), 120.0)
    base = compute_tr(validate_cgm(grid, "s", "p"))
    bumped = grid.copy()
    bumped[1, 3] = 300.0
    tr = compute_tr(validate_cgm(bumped, "s", "p"))
    n = grid.size
    assert tr.tar == base.tar + 1 / n
    assert tr.tir == base.tir - 1 / n
    assert tr.tbr == base.tbr


def test_baseline_hand_examples():
    tr = no_interp_baseline([65.0, 100.0])
    assert (tr.tar, tr.tir, tr.tbr) == (0.0, 0.5, 0.5)
    tr = no_interp_baseline([100.0, 120.0, 150.0])
    assert (tr.tar, tr.tir, tr.tbr) == (0.0, 1.0, 0.0)


def test_baseline_empty_is_error():
    with pytest.raises(ValueError, match="undefined"):
        no_interp_baseline([])


def test_validate_rejects_nan_with_cell():
    grid = np.full((4, 12), 100.0)
    grid[2, 10] = np.nan
    with pytest.raises(GridValidationError, match=r"\(2, 10\)"):
        validate_cgm(grid, "s", "p")


def test_validate_rejects_wrong_shape():
    grid = np.full((1, 287), 100.0)
    with pytest.raises(GridValidationError, match="shape"):
        validate_cgm(grid, "s", "p", d_days=1, t_slots=288)


def test_validate_rejects_nonpositive_and_absurd_values():
    grid = np.full((1, 4), 100.0)
    grid[0, 2] = 0.0
    with pytest.raises(GridValidationError, match=r"\(0, 2\)"):
        validate_cgm(grid, "s", "p")
    grid[0, 2] = 1500.0
    with pytest.raises(GridValidationError, match=r"\(0, 2\)"):
        validate_cgm(grid, "s", "p")


def test_validate_accepts_well_formed_grid():
    cgm = validate_cgm(np.full((7, 288), 100.0), "s7", "subj")
    assert cgm.d_days == 7 and cgm.t_slots == 288
    assert cgm.n_readings == 7 * 288
    assert not cgm.grid.flags.writeable


def test_thresholds_validation():
    with pytest.raises(ValueError):
        Thresholds(tau_low=200.0, tau_high=100.0)
    with pytest.raises(ValueError):
        Thresholds(tau_low=-1.0, tau_high=100.0)


def test_tr_metrics_simplex_enforced():
    with pytest.raises(ValueError):
        TrMetrics(tar=0.5, tir=0.5, tbr=0.5)
    with pytest.raises(ValueError):
        TrMetrics(tar=-0.1, tir=1.1, tbr=0.0)
    m = TrMetrics(tar=0.25, tir=0.5, tbr=0.25)
    assert TrMetrics.from_array(m.as_array()) == m
