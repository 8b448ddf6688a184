import numpy as np
import pytest

from dualgrid.mesh import GridField, UniformGrid, compute_overlaps, halo_exchange, locate_cell
from dualgrid.partition import colocate_partition
from dualgrid.transport import run_ranks


def test_locate_cell_interior():
    g = UniformGrid((0, 0, 0), (1, 1, 1), (2, 1, 1))
    assert locate_cell(g, (0.5, 0.5, 0.5)) == (0, 0, 0)


def test_locate_cell_outside():
    g = UniformGrid((0, 0, 0), (1, 1, 1), (2, 1, 1))
    assert locate_cell(g, (2.5, 0.5, 0.5)) is None


def test_locate_cell_half_open_faces():
    g = UniformGrid((0, 0, 0), (1, 1, 1), (2, 1, 1))
    # lower-inclusive: a point on the shared face belongs to the upper cell
    assert locate_cell(g, (1.0, 0.5, 0.5)) == (1, 0, 0)
    assert locate_cell(g, (0.0, 0.0, 0.0)) == (0, 0, 0)
    assert locate_cell(g, (2.0, 0.5, 0.5)) is None


def test_grid_validation():
    with pytest.raises(ValueError):
        UniformGrid((0, 0, 0), (1, 0, 1), (2, 2, 2))
    with pytest.raises(ValueError):
        UniformGrid((0, 0, 0), (1, 1, 1), (2, 0, 2))


def test_overlaps_identical_grids():
    # two identical 4-element grids: each cell maps onto its twin
    g1 = UniformGrid((0, 0, 0), (0.5, 0.5, 1.0), (2, 2, 1))
    g2 = UniformGrid((0, 0, 0), (0.5, 0.5, 1.0), (2, 2, 1))
    ov = compute_overlaps(g1, g2)
    assert len(ov) == 4
    assert np.array_equal(ov.sender, ov.receiver)
    assert np.allclose(ov.volume, g1.cell_volume)


def test_overlaps_symmetric_bisection():
    s = UniformGrid((0, 0, 0), (1, 1, 1), (1, 1, 1))
    r = UniformGrid((0, 0, 0), (0.5, 1, 1), (2, 1, 1))
    ov = compute_overlaps(s, r)
    assert len(ov) == 2
    assert np.allclose(ov.volume, 0.5)
    assert set(ov.receiver.tolist()) == {0, 1}


def _rasterize_overlaps(sender, receiver, nsub=3000):
    """Brute-force voxel oracle along x (grids differ only along x here)."""
    xs = np.linspace(0.0, 3.0, nsub, endpoint=False) + 0.5 * (3.0 / nsub)
    vol = {}
    dv = (3.0 / nsub) * 1.0 * 1.0
    for x in xs:
        p = np.array([[x, 0.5, 0.5]])
        s = int(sender.locate_many(p)[0])
        r = int(receiver.locate_many(p)[0])
        if s >= 0 and r >= 0:
            vol[(s, r)] = vol.get((s, r), 0.0) + dv
    return vol


def test_overlaps_match_rasterization_oracle():
    sender = UniformGrid((0, 0, 0), (1.0, 1.0, 1.0), (3, 1, 1))
    receiver = UniformGrid((0, 0, 0), (0.75, 1.0, 1.0), (4, 1, 1))
    ov = compute_overlaps(sender, receiver)
    oracle = _rasterize_overlaps(sender, receiver)
    got = {(int(s), int(r)): v for s, r, v in zip(ov.sender, ov.receiver, ov.volume)}
    assert set(got) == set(oracle)
    for key, v in oracle.items():
        assert got[key] == pytest.approx(v, abs=1e-6)


def test_overlap_completeness_random():
    # receiver cells fully inside the sender sum to their own volume
    rng = np.random.default_rng(3)
    for _ in range(25):
        sender = UniformGrid((-1, -1, -1), rng.uniform(0.3, 1.1, 3), (6, 5, 4))
        origin = rng.uniform(-0.5, 0.0, 3)
        receiver = UniformGrid(origin, rng.uniform(0.2, 0.6, 3), (4, 4, 4))
        ov = compute_overlaps(sender, receiver)
        per_cell = ov.received_volume()
        centers = receiver.cell_centers(np.arange(receiver.ncells))
        lo = receiver.cell_low((0, 0, 0))
        inside = np.all((centers - 0.5 * receiver.spacing >= sender.origin + 1e-12)
                        & (centers + 0.5 * receiver.spacing <= sender.domain_hi - 1e-12), axis=1)
        err = np.abs(per_cell[inside] - receiver.cell_volume) / receiver.cell_volume
        assert err.max() < 1e-12


def test_overlap_symmetry():
    a = UniformGrid((0, 0, 0), (0.7, 0.5, 0.8), (3, 4, 2))
    b = UniformGrid((0.1, -0.2, 0.05), (0.45, 0.65, 0.3), (5, 3, 6))
    ab = compute_overlaps(a, b)
    ba = compute_overlaps(b, a)
    pairs_ab = {(int(s), int(r)): v for s, r, v in zip(ab.sender, ab.receiver, ab.volume)}
    pairs_ba = {(int(r), int(s)): v for s, r, v in zip(ba.sender, ba.receiver, ba.volume)}
    assert set(pairs_ab) == set(pairs_ba)
    for key in pairs_ab:
        assert pairs_ab[key] == pairs_ba[key]


def test_locate_consistent_with_overlaps():
    a = UniformGrid((0, 0, 0), (1.0, 1.0, 1.0), (3, 2, 2))
    b = UniformGrid((0.2, 0.1, 0.0), (0.55, 0.75, 0.9), (4, 2, 2))
    ov = compute_overlaps(a, b)
    rng = np.random.default_rng(11)
    for s, r, v in list(ov)[:40]:
        sij = a.cell_ijk(s)
        rij = b.cell_ijk(r)
        lo = np.maximum(a.cell_low(sij), b.cell_low(rij))
        hi = np.minimum(a.cell_low(sij) + a.spacing, b.cell_low(rij) + b.spacing)
        p = rng.uniform(lo + 1e-9, hi - 1e-9)
        assert locate_cell(a, p) == sij
        assert locate_cell(b, p) == rij


def test_halo_exchange_single_rank_no_messages():
    g = UniformGrid((0, 0, 0), (1, 1, 1), (4, 3, 3))
    pm = colocate_partition(g, 1)

    def fn(ctx):
        f = GridField.zeros(g, pm, ctx.rank)
        halo_exchange(f, ctx)
        return ctx.counters.snapshot()

    (counters,) = run_ranks(1, fn)
    assert counters == (0, 0, 0, 0)


def test_halo_exchange_two_ranks_identity_payload():
    g = UniformGrid((0, 0, 0), (1, 1, 1), (4, 1, 1))
    pm = colocate_partition(g, 2)

    def fn(ctx):
        f = GridField.zeros(g, pm, ctx.rank)
        f.interior.reshape(-1)[:] = pm.owned_cells(ctx.rank)
        halo_exchange(f, ctx)
        return f.data[:, 1, 1].copy()

    lines = run_ranks(2, fn)
    # rank 0 pad: [physical ghost, cell0, cell1, halo=cell2]
    assert lines[0].tolist() == [0.0, 0.0, 1.0, 2.0]
    # rank 1 pad: [halo=cell1, cell2, cell3, physical ghost]
    assert lines[1][0] == 1.0


@pytest.mark.parametrize("ranks", [2, 3, 4])
def test_halo_exchange_matches_sequential_gather(ranks):
    g = UniformGrid((0, 0, 0), (0.5, 0.7, 0.3), (5, 4, 3))
    rng = np.random.default_rng(42)
    values = rng.normal(size=g.ncells)

    def fn(ctx):
        pm = colocate_partition(g, ctx.world_size)
        f = GridField.zeros(g, pm, ctx.rank)
        f.set_owned_values(values[pm.owned_cells(ctx.rank)])
        halo_exchange(f, ctx)
        # every in-domain pad cell must hold the owner's value
        lo, hi = pm.box(ctx.rank)
        bad = 0
        shape = f.data.shape
        for i in range(shape[0]):
            for j in range(shape[1]):
                for k in range(shape[2]):
                    gi, gj, gk = lo[0] + i - 1, lo[1] + j - 1, lo[2] + k - 1
                    if not (0 <= gi < g.dims[0] and 0 <= gj < g.dims[1] and 0 <= gk < g.dims[2]):
                        continue
                    lin = g.linear_index((gi, gj, gk))
                    if f.data[i, j, k] != values[lin]:
                        bad += 1
        return bad

    assert sum(run_ranks(ranks, fn)) == 0
