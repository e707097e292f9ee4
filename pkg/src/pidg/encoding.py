"""Multiresolution hashed feature grids with differentiable interpolation.

Two flavors are provided: 3D grids with trilinear interpolation (used by the
deformation encoder) and 2D plane grids with bilinear interpolation (used by
the material field). Interpolation of a whole grid (all levels) is one fused
node on the tape; its backward rule scatters into the level tables and, when
the query tensor requires gradients, applies the piecewise-multilinear slope
to the coordinates.

Vertex indexing: a level with fewer vertices than the table capacity stores
them densely at index ``ix + nx*(iy + ny*iz)`` (collision-free); larger levels
hash each integer vertex with the XOR-of-prime-multiplied-coordinates scheme
``(ix*1 ^ iy*2654435761 ^ iz*805459861) mod table_size`` evaluated in 32-bit
unsigned arithmetic (every product is truncated to 32 bits before the XOR).
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, accumulate_grad, parameter, record

PRIMES = (1, 2654435761, 805459861)
_M32 = np.int64(0xFFFFFFFF)


def hash_vertices(ix, iy, iz, table_size: int) -> np.ndarray:
    """32-bit XOR hash of integer vertex coordinates, reduced mod table_size."""
    ix = np.asarray(ix, dtype=np.int64)
    iy = np.asarray(iy, dtype=np.int64)
    iz = np.asarray(iz, dtype=np.int64)
    h = ((ix * PRIMES[0]) & _M32) ^ ((iy * PRIMES[1]) & _M32) ^ ((iz * PRIMES[2]) & _M32)
    return (h & _M32) % table_size


def hash_vertices_2d(iu, iv, table_size: int) -> np.ndarray:
    iu = np.asarray(iu, dtype=np.int64)
    iv = np.asarray(iv, dtype=np.int64)
    h = ((iu * PRIMES[0]) & _M32) ^ ((iv * PRIMES[1]) & _M32)
    return (h & _M32) % table_size


def geometric_levels(base: int, top: int, count: int) -> list[int]:
    """Per-level vertex counts growing geometrically from base to top (inclusive)."""
    if count == 1:
        return [int(top)]
    out = []
    for l in range(count):
        f = l / (count - 1)
        r = int(round(np.exp((1.0 - f) * np.log(base) + f * np.log(top))))
        out.append(max(2, r))
    out[0], out[-1] = max(2, int(base)), max(2, int(top))
    return out


def _corner_bits_3d():
    # bit 0 -> x high corner, bit 1 -> y, bit 2 -> z
    return [(c & 1, (c >> 1) & 1, (c >> 2) & 1) for c in range(8)]


_CORNERS3 = _corner_bits_3d()
_CORNERS2 = [(0, 0), (1, 0), (0, 1), (1, 1)]


def _split_cells(p: np.ndarray, n: int):
    """Scaled coordinate -> (cell index, fractional offset) for n vertices."""
    scaled = p * (n - 1)
    c0 = np.floor(scaled).astype(np.int64)
    np.clip(c0, 0, n - 2, out=c0)
    return c0, scaled - c0


class MultiResHashGrid3D:
    """A stack of 3D feature tables, one per resolution level.

    ``level_res`` is a list of (nx, ny, nz) vertex counts. Levels whose vertex
    product fits in ``table_size`` are dense; the rest share hashed slots.
    """

    def __init__(self, level_res, table_size: int, feature_dim: int, rng, init_scale: float = 1e-4):
        self.table_size = int(table_size)
        self.feature_dim = int(feature_dim)
        self.level_res = [tuple(int(r) for r in res) for res in level_res]
        for res in self.level_res:
            if min(res) < 2:
                raise ValueError("grid level needs at least 2 vertices per axis")
        self.dense = [int(np.prod(res)) <= self.table_size for res in self.level_res]
        self.tables = [
            parameter(rng.uniform(-init_scale, init_scale, (min(int(np.prod(res)), self.table_size), feature_dim)))
            for res in self.level_res
        ]

    @property
    def num_levels(self) -> int:
        return len(self.level_res)

    @property
    def out_dim(self) -> int:
        return self.num_levels * self.feature_dim

    def entry_count(self) -> int:
        return sum(t.data.shape[0] for t in self.tables)

    def _vertex_index(self, level: int, ix, iy, iz):
        nx, ny, nz = self.level_res[level]
        if self.dense[level]:
            return ix + nx * (iy + ny * iz)
        return hash_vertices(ix, iy, iz, self.table_size)

    def interpolate(self, coords: Tensor) -> Tensor:
        """Trilinear interpolation of every level at (N, 3) query points in [0,1]^3.

        Returns (N, levels*feature_dim). Differentiable with respect to the
        level tables and, piecewise, the query coordinates.
        """
        p = coords.data
        if p.ndim != 2 or p.shape[1] != 3:
            raise ValueError("expected (N, 3) query coordinates")
        if p.size and (p.min() < 0.0 or p.max() > 1.0):
            raise ValueError("query coordinate outside [0,1]^3")
        n_pts = p.shape[0]
        fdim = self.feature_dim
        out = np.empty((n_pts, self.out_dim))
        saved = []
        for l, (nx, ny, nz) in enumerate(self.level_res):
            cx, fx = _split_cells(p[:, 0], nx)
            cy, fy = _split_cells(p[:, 1], ny)
            cz, fz = _split_cells(p[:, 2], nz)
            wx = np.stack([1.0 - fx, fx])
            wy = np.stack([1.0 - fy, fy])
            wz = np.stack([1.0 - fz, fz])
            idx = np.empty((8, n_pts), dtype=np.int64)
            for c, (bx, by, bz) in enumerate(_CORNERS3):
                idx[c] = self._vertex_index(l, cx + bx, cy + by, cz + bz)
            entries = self.tables[l].data[idx]  # (8, N, F)
            w = np.empty((8, n_pts))
            for c, (bx, by, bz) in enumerate(_CORNERS3):
                w[c] = wx[bx] * wy[by] * wz[bz]
            out[:, l * fdim:(l + 1) * fdim] = np.einsum("cn,cnf->nf", w, entries)
            saved.append((idx, entries, wx, wy, wz))

        grid = self

        def vjp(g):
            for l, (nx, ny, nz) in enumerate(grid.level_res):
                idx, entries, wx, wy, wz = saved[l]
                gl = g[:, l * fdim:(l + 1) * fdim]
                table = grid.tables[l]
                if table.requires_grad:
                    tgrad = np.zeros_like(table.data)
                    for c, (bx, by, bz) in enumerate(_CORNERS3):
                        np.add.at(tgrad, idx[c], (wx[bx] * wy[by] * wz[bz])[:, None] * gl)
                    accumulate_grad(table, tgrad)
                if coords.requires_grad:
                    dot = np.einsum("cnf,nf->cn", entries, gl)  # (8, N)
                    gx = np.zeros(n_pts)
                    gy = np.zeros(n_pts)
                    gz = np.zeros(n_pts)
                    for c, (bx, by, bz) in enumerate(_CORNERS3):
                        sx = 1.0 if bx else -1.0
                        sy = 1.0 if by else -1.0
                        sz = 1.0 if bz else -1.0
                        gx += dot[c] * sx * wy[by] * wz[bz]
                        gy += dot[c] * sy * wx[bx] * wz[bz]
                        gz += dot[c] * sz * wx[bx] * wy[by]
                    gc = np.stack([gx * (nx - 1), gy * (ny - 1), gz * (nz - 1)], axis=1)
                    accumulate_grad(coords, gc)

        return record(out, (coords, *self.tables), vjp, "hashgrid3d")


class PlaneGrid2D:
    """2D multiresolution grid whose levels are summed into a single scalar.

    Each level carries one feature per vertex; ``interpolate`` returns the sum
    of the bilinearly interpolated levels, optionally together with its exact
    partial derivatives along both plane axes (needed when the caller
    propagates spatial derivatives through the value).
    """

    def __init__(self, level_res, table_size: int, rng, init_scale: float = 1e-4):
        self.table_size = int(table_size)
        self.level_res = [tuple(int(r) for r in res) for res in level_res]
        for res in self.level_res:
            if min(res) < 2:
                raise ValueError("plane level needs at least 2 vertices per axis")
        self.dense = [int(np.prod(res)) <= self.table_size for res in self.level_res]
        self.tables = [
            parameter(rng.uniform(-init_scale, init_scale, (min(int(np.prod(res)), self.table_size),)))
            for res in self.level_res
        ]

    def entry_count(self) -> int:
        return sum(t.data.shape[0] for t in self.tables)

    def _vertex_index(self, level: int, iu, iv):
        nu, nv = self.level_res[level]
        if self.dense[level]:
            return iu + nu * iv
        return hash_vertices_2d(iu, iv, self.table_size)

    def _forward(self, p: np.ndarray):
        n_pts = p.shape[0]
        val = np.zeros(n_pts)
        du = np.zeros(n_pts)
        dv = np.zeros(n_pts)
        saved = []
        for l, (nu, nv) in enumerate(self.level_res):
            cu, fu = _split_cells(p[:, 0], nu)
            cv, fv = _split_cells(p[:, 1], nv)
            wu = np.stack([1.0 - fu, fu])
            wv = np.stack([1.0 - fv, fv])
            idx = np.empty((4, n_pts), dtype=np.int64)
            for c, (bu, bv) in enumerate(_CORNERS2):
                idx[c] = self._vertex_index(l, cu + bu, cv + bv)
            entries = self.tables[l].data[idx]  # (4, N)
            for c, (bu, bv) in enumerate(_CORNERS2):
                su = 1.0 if bu else -1.0
                sv = 1.0 if bv else -1.0
                val += entries[c] * wu[bu] * wv[bv]
                du += entries[c] * su * wv[bv] * (nu - 1)
                dv += entries[c] * sv * wu[bu] * (nv - 1)
            saved.append((idx, entries, wu, wv))
        return val, du, dv, saved

    def interpolate(self, coords: Tensor, with_partials: bool = False):
        """Summed bilinear interpolation at (N, 2) points in [0,1]^2.

        With ``with_partials`` the returned tuple is (value, d/du, d/dv); all
        three are differentiable with respect to the level tables.
        """
        p = coords.data
        if p.ndim != 2 or p.shape[1] != 2:
            raise ValueError("expected (N, 2) query coordinates")
        if p.size and (p.min() < 0.0 or p.max() > 1.0):
            raise ValueError("query coordinate outside [0,1]^2")
        val, du, dv, saved = self._forward(p)
        plane = self
        n_pts = p.shape[0]

        def vjp_val(g):
            for l, (nu, nv) in enumerate(plane.level_res):
                idx, entries, wu, wv = saved[l]
                table = plane.tables[l]
                if table.requires_grad:
                    tgrad = np.zeros_like(table.data)
                    for c, (bu, bv) in enumerate(_CORNERS2):
                        np.add.at(tgrad, idx[c], wu[bu] * wv[bv] * g)
                    accumulate_grad(table, tgrad)
                if coords.requires_grad:
                    gu = np.zeros(n_pts)
                    gv = np.zeros(n_pts)
                    for c, (bu, bv) in enumerate(_CORNERS2):
                        su = 1.0 if bu else -1.0
                        sv = 1.0 if bv else -1.0
                        gu += entries[c] * su * wv[bv]
                        gv += entries[c] * sv * wu[bu]
                    accumulate_grad(coords, np.stack([gu * (nu - 1) * g, gv * (nv - 1) * g], axis=1))

        out_val = record(val, (coords, *self.tables), vjp_val, "plane2d")
        if not with_partials:
            return out_val

        def make_partial_vjp(axis):
            # axis 0: output is d(value)/du; axis 1: d(value)/dv
            def vjp(g):
                for l, (nu, nv) in enumerate(plane.level_res):
                    idx, entries, wu, wv = saved[l]
                    scale = (nu - 1) if axis == 0 else (nv - 1)
                    table = plane.tables[l]
                    if table.requires_grad:
                        tgrad = np.zeros_like(table.data)
                        for c, (bu, bv) in enumerate(_CORNERS2):
                            su = 1.0 if bu else -1.0
                            sv = 1.0 if bv else -1.0
                            coeff = su * wv[bv] if axis == 0 else sv * wu[bu]
                            np.add.at(tgrad, idx[c], coeff * scale * g)
                        accumulate_grad(table, tgrad)
                    if coords.requires_grad:
                        # cross slope: d(df/du)/dv and d(df/dv)/du; own-axis term is 0
                        cross = np.zeros(n_pts)
                        for c, (bu, bv) in enumerate(_CORNERS2):
                            su = 1.0 if bu else -1.0
                            sv = 1.0 if bv else -1.0
                            cross += entries[c] * su * sv
                        cross *= (nu - 1) * (nv - 1) * g
                        gc = np.zeros((n_pts, 2))
                        gc[:, 1 - axis] = cross
                        accumulate_grad(coords, gc)

            return vjp

        out_du = record(du, (coords, *self.tables), make_partial_vjp(0), "plane2d_du")
        out_dv = record(dv, (coords, *self.tables), make_partial_vjp(1), "plane2d_dv")
        return out_val, out_du, out_dv


def decomposed_entry_count(n: int, feature_dim: int) -> int:
    """Total table entries for four n^3 grids (the decomposed 4D layout)."""
    return 4 * n**3 * feature_dim


def monolithic_entry_count(n: int, feature_dim: int) -> int:
    """Table entries a single dense 4D grid of the same resolution would need."""
    return n**4 * feature_dim
