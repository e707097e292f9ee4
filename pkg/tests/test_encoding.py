"""Hash-grid and plane-grid encodings: indexing, interpolation, gradients."""

import numpy as np
import pytest

import pidg.autodiff as ad
from pidg.encoding import (
    PRIMES,
    MultiResHashGrid3D,
    PlaneGrid2D,
    decomposed_entry_count,
    geometric_levels,
    hash_vertices,
    hash_vertices_2d,
    monolithic_entry_count,
)

_M32 = (1 << 32) - 1


def test_hash_matches_independent_reference():
    # scalar re-implementation of the xor'd-primes scheme, mod table size
    rng = np.random.default_rng(0)
    pts = rng.integers(0, 5000, size=(200, 3))
    for table in (64, 4096, 2**15):
        got = hash_vertices(pts[:, 0], pts[:, 1], pts[:, 2], table)
        for (x, y, z), h in zip(pts, got):
            ref = (((int(x) * PRIMES[0]) & _M32)
                   ^ ((int(y) * PRIMES[1]) & _M32)
                   ^ ((int(z) * PRIMES[2]) & _M32)) % table
            assert h == ref


def test_hash_2d_matches_reference():
    rng = np.random.default_rng(1)
    pts = rng.integers(0, 5000, size=(100, 2))
    got = hash_vertices_2d(pts[:, 0], pts[:, 1], 1024)
    for (u, v), h in zip(pts, got):
        ref = (((int(u) * PRIMES[0]) & _M32) ^ ((int(v) * PRIMES[1]) & _M32)) % 1024
        assert h == ref


def test_geometric_levels_endpoints_and_monotone():
    ladder = geometric_levels(16, 2048, 16)
    assert len(ladder) == 16
    assert ladder[0] == 16 and ladder[-1] == 2048
    assert all(b >= a for a, b in zip(ladder, ladder[1:]))
    assert geometric_levels(8, 8, 1) == [8]


def test_dense_levels_have_exact_tables_and_hashed_levels_share():
    rng = np.random.default_rng(2)
    grid = MultiResHashGrid3D([(4, 4, 4), (64, 64, 64)], table_size=4096, feature_dim=2, rng=rng)
    assert grid.dense == [True, False]
    assert grid.tables[0].data.shape == (64, 2)      # 4^3 exact
    assert grid.tables[1].data.shape == (4096, 2)    # clamped to the table


def test_interpolation_hits_vertices_exactly():
    rng = np.random.default_rng(3)
    grid = MultiResHashGrid3D([(3, 3, 3)], table_size=64, feature_dim=2, rng=rng)
    # query exactly at vertex (1, 2, 0) of a 3^3 grid -> dense index x + 3y + 9z
    q = np.array([[0.5, 1.0, 0.0]])
    with ad.Tape():
        out = grid.interpolate(ad.constant(q))
    assert np.allclose(out.data[0], grid.tables[0].data[1 + 3 * 2 + 9 * 0], atol=1e-15)


def test_interpolation_is_trilinear_inside_a_cell():
    rng = np.random.default_rng(4)
    grid = MultiResHashGrid3D([(2, 2, 2)], table_size=8, feature_dim=1, rng=rng)
    t = grid.tables[0].data[:, 0]
    f = np.array([0.3, 0.7, 0.2])
    with ad.Tape():
        out = grid.interpolate(ad.constant(f[None]))
    expected = 0.0
    for c in range(8):
        bx, by, bz = c & 1, (c >> 1) & 1, (c >> 2) & 1
        w = ((f[0] if bx else 1 - f[0]) * (f[1] if by else 1 - f[1]) * (f[2] if bz else 1 - f[2]))
        expected += w * t[bx + 2 * (by + 2 * bz)]
    assert np.allclose(out.data[0, 0], expected, atol=1e-15)


def test_out_of_range_query_rejected():
    grid = MultiResHashGrid3D([(4, 4, 4)], 64, 1, np.random.default_rng(5))
    with ad.Tape():
        with pytest.raises(ValueError):
            grid.interpolate(ad.constant(np.array([[0.5, 1.2, 0.5]])))
        with pytest.raises(ValueError):
            grid.interpolate(ad.constant(np.array([[0.5, 0.5]])))


@pytest.mark.parametrize("seed", range(3))
def test_grid_table_gradients_match_fd(seed):
    rng = np.random.default_rng(10 + seed)
    grid = MultiResHashGrid3D([(3, 3, 3), (9, 9, 9)], table_size=128, feature_dim=2, rng=rng)
    pts = rng.uniform(0.05, 0.95, (6, 3))
    w = rng.normal(size=(6, grid.out_dim))

    with ad.Tape() as tape:
        out = ad.sum_(ad.mul(grid.interpolate(ad.constant(pts)), ad.constant(w)))
        grads = tape.grad(out, grid.tables)

    h = 1e-6
    for t, g in zip(grid.tables, grads):
        flat = t.data.reshape(-1)
        probes = rng.choice(flat.size, min(20, flat.size), replace=False)
        for i in probes:
            old = flat[i]
            flat[i] = old + h
            with ad.Tape():
                fp = float(ad.sum_(ad.mul(grid.interpolate(ad.constant(pts)), ad.constant(w))).data)
            flat[i] = old - h
            with ad.Tape():
                fm = float(ad.sum_(ad.mul(grid.interpolate(ad.constant(pts)), ad.constant(w))).data)
            flat[i] = old
            assert np.isclose(g.reshape(-1)[i], (fp - fm) / (2 * h), rtol=1e-5, atol=1e-9)


@pytest.mark.parametrize("seed", range(3))
def test_grid_coordinate_gradients_match_fd(seed):
    rng = np.random.default_rng(20 + seed)
    grid = MultiResHashGrid3D([(5, 5, 5)], table_size=256, feature_dim=2, rng=rng, init_scale=0.5)
    pts = rng.uniform(0.1, 0.9, (4, 3))
    w = rng.normal(size=(4, grid.out_dim))

    with ad.Tape() as tape:
        c = ad.parameter(pts.copy())
        out = ad.sum_(ad.mul(grid.interpolate(c), ad.constant(w)))
        (g,) = tape.grad(out, [c])

    h = 1e-7  # stay inside the interpolation cell
    ref = np.zeros_like(pts)
    for i in range(pts.shape[0]):
        for j in range(3):
            d = pts.copy()
            d[i, j] += h
            with ad.Tape():
                fp = float(ad.sum_(ad.mul(grid.interpolate(ad.constant(d)), ad.constant(w))).data)
            d[i, j] -= 2 * h
            with ad.Tape():
                fm = float(ad.sum_(ad.mul(grid.interpolate(ad.constant(d)), ad.constant(w))).data)
            ref[i, j] = (fp - fm) / (2 * h)
    assert np.allclose(g, ref, rtol=1e-4, atol=1e-8)


def test_plane_partials_match_fd():
    rng = np.random.default_rng(30)
    plane = PlaneGrid2D([(4, 4), (16, 16)], table_size=256, rng=rng, init_scale=0.5)
    pts = rng.uniform(0.1, 0.9, (5, 2))
    with ad.Tape():
        val, du, dv = plane.interpolate(ad.constant(pts), with_partials=True)
    h = 1e-7
    for i in range(5):
        for j, part in ((0, du), (1, dv)):
            d = pts.copy()
            d[i, j] += h
            with ad.Tape():
                fp = plane.interpolate(ad.constant(d)).data[i]
            d[i, j] -= 2 * h
            with ad.Tape():
                fm = plane.interpolate(ad.constant(d)).data[i]
            assert np.isclose(part.data[i], (fp - fm) / (2 * h), rtol=1e-4, atol=1e-8)


def test_plane_partial_table_gradients_match_fd():
    # gradient THROUGH the partial derivatives (a loss on du must reach tables)
    rng = np.random.default_rng(31)
    plane = PlaneGrid2D([(5, 5)], table_size=64, rng=rng, init_scale=0.5)
    pts = rng.uniform(0.15, 0.85, (3, 2))
    w = rng.normal(size=3)

    def loss():
        val, du, dv = plane.interpolate(ad.constant(pts), with_partials=True)
        return ad.sum_(ad.mul(ad.add(du, ad.mul(dv, 0.5)), ad.constant(w)))

    with ad.Tape() as tape:
        (g,) = tape.grad(loss(), [plane.tables[0]])
    h = 1e-6
    flat = plane.tables[0].data
    for i in rng.choice(flat.size, 12, replace=False):
        old = flat[i]
        flat[i] = old + h
        with ad.Tape():
            fp = float(loss().data)
        flat[i] = old - h
        with ad.Tape():
            fm = float(loss().data)
        flat[i] = old
        assert np.isclose(g[i], (fp - fm) / (2 * h), rtol=1e-5, atol=1e-9)


def test_entry_count_arithmetic():
    for n in (8, 16, 32):
        for d in (1, 2, 4):
            assert decomposed_entry_count(n, d) == 4 * n**3 * d
            assert monolithic_entry_count(n, d) == n**4 * d
            assert decomposed_entry_count(n, d) < monolithic_entry_count(n, d)


def test_grid_entry_count_reports_table_rows():
    rng = np.random.default_rng(40)
    grid = MultiResHashGrid3D([(4, 4, 4), (32, 32, 32)], table_size=1000, feature_dim=2, rng=rng)
    assert grid.entry_count() == 64 + 1000
