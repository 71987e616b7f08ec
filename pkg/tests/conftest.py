"""Shared fixtures and oracle helpers reused across the test modules."""

import time

import numpy as np
import pytest

from stmcast import sim, topology


class TimedSweep(dict):
    """Sweep results plus the wall-clock runtime of producing them."""

    runtime_s: float = 0.0


def write_grid_sites(path, nx, ny, spacing=1000.0):
    with open(path, "w") as fh:
        cell = 0
        for j in range(ny):
            for i in range(nx):
                fh.write(f"{cell},{i * spacing},{j * spacing}\n")
                cell += 1
    return str(path)


def sampled_overlap(cell_map, rect, step=0.1):
    """Grid-sampling brute force for cells_overlapping."""
    xs = np.arange(rect.x_min, rect.x_max + step / 2, step)
    ys = np.arange(rect.y_min, rect.y_max + step / 2, step)
    b = cell_map.bounds
    xs = xs[(xs >= b.x_min) & (xs <= b.x_max)]
    ys = ys[(ys >= b.y_min) & (ys <= b.y_max)]
    if len(xs) == 0 or len(ys) == 0:
        return set()
    gx, gy = np.meshgrid(xs, ys)
    cells = topology.assign_cells(cell_map, gx.ravel(), gy.ravel())
    return {int(c) for c in np.unique(cells)}


def assert_overlap_matches_sampling(cell_map, rect, step=0.1):
    """Exact overlap equals the sampling oracle, up to the oracle's resolution.

    The sampler must never see a cell the exact method misses.  The exact
    method may additionally report cells whose true overlap is smaller than
    one grid square (step x step): such slivers are genuine positive-area
    overlaps that a step-spaced grid cannot resolve by construction.
    """
    exact = topology.cells_overlapping(cell_map, rect)
    sampled = sampled_overlap(cell_map, rect, step)
    assert sampled <= exact, f"sampler found cells the exact method missed: {sampled - exact}"
    for cell_id in exact - sampled:
        area = topology.overlap_area(cell_map, rect, cell_id)
        assert 0.0 < area < step * step, f"cell {cell_id}: overlap {area} m^2 missed by the sampler"


@pytest.fixture(scope="session")
def grid5_sites(tmp_path_factory):
    return write_grid_sites(tmp_path_factory.mktemp("sites") / "grid5.csv", 5, 5)


@pytest.fixture(scope="session")
def desk_config(grid5_sites):
    """The reference desk-scale scenario: 5x5 km grid, 50 handsets, 2 h,
    20 messages, 8 repetitions."""
    return sim.ScenarioConfig(
        sites=grid5_sites,
        mobility=sim.SyntheticMobility(num_ues=50, speed_mps=14.0, pause_s=30.0),
        num_messages=20,
        repetitions=8,
        master_seed=20240831,
    )


@pytest.fixture(scope="session")
def desk_sweep(desk_config):
    """One full four-mode sweep shared by every test that inspects it."""
    started = time.perf_counter()
    results = TimedSweep(sim.sweep(desk_config, collect_detail=True))
    results.runtime_s = time.perf_counter() - started
    return results
