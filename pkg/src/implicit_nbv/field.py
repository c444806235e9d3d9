"""Implicit occupancy/colour field: multi-resolution hash grid plus a small MLP.

The grid is bounded to the object box.  Queries outside the box return
occupancy exactly 0 (and black) with no gradient.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diff as d
from .geometry import Aabb

try:
    from . import _hashgrid_kernels as _kernels

    DEFAULT_BACKEND = "numba"
except ImportError:  # pragma: no cover - numba missing
    _kernels = None
    DEFAULT_BACKEND = "numpy"

HASH_PRIMES = (1, 2654435761, 805459861)
LOGIT_CLAMP = 15.0
CORNER_OFFSETS = np.array([[(c >> 0) & 1, (c >> 1) & 1, (c >> 2) & 1] for c in range(8)], dtype=np.int64)


@dataclass(frozen=True)
class HashGridConfig:
    levels: int = 8
    base_resolution: int = 16
    max_resolution: int = 128
    features: int = 2
    log2_table_size: int = 15
    hidden: int = 32

    def __post_init__(self) -> None:
        if self.levels < 1 or self.features < 1 or self.hidden < 1:
            raise ValueError("levels, features and hidden must be positive")
        if self.max_resolution < self.base_resolution:
            raise ValueError("max_resolution below base_resolution")
        res = self.resolutions()
        if self.levels > 1 and np.any(np.diff(res) <= 0):
            raise ValueError("level resolutions must strictly increase")

    @property
    def table_size(self) -> int:
        return 1 << self.log2_table_size

    @property
    def feature_dim(self) -> int:
        return self.levels * self.features

    def resolutions(self) -> np.ndarray:
        if self.levels == 1:
            return np.array([self.base_resolution], dtype=np.int64)
        growth = math.exp((math.log(self.max_resolution) - math.log(self.base_resolution)) / (self.levels - 1))
        return np.array(
            [int(math.floor(self.base_resolution * growth**lvl + 1e-9)) for lvl in range(self.levels)], dtype=np.int64
        )


def spatial_hash(corners: np.ndarray, table_size: int) -> np.ndarray:
    """XOR of integer coordinates times fixed primes, masked to the table size.

    Coordinates stay below 2^8, so the int64 products never overflow.
    """
    c = np.asarray(corners, dtype=np.int64)
    h = (c[..., 0] * HASH_PRIMES[0]) ^ (c[..., 1] * HASH_PRIMES[1]) ^ (c[..., 2] * HASH_PRIMES[2])
    return h & (table_size - 1)


def _encode_arrays(u: np.ndarray, tables: np.ndarray, resolutions: np.ndarray, with_x_grad: bool):
    """Forward pass of the encoding on normalised coordinates ``u`` in [0, 1]^3."""
    n = u.shape[0]
    levels, table_size, feats = tables.shape
    mask = table_size - 1
    out = np.empty((n, levels * feats))
    cache = []
    for lvl, res in enumerate(resolutions):
        pos = u * res
        base = np.clip(np.floor(pos).astype(np.int64), 0, res - 1)
        frac = pos - base
        # per-axis hash terms for the low (0) and high (1) corner coordinate
        h = [[base[:, a] * HASH_PRIMES[a], (base[:, a] + 1) * HASH_PRIMES[a]] for a in range(3)]
        w = [[1.0 - frac[:, a], frac[:, a]] for a in range(3)]
        idx = np.empty((8, n), dtype=np.int64)
        weights = np.empty((8, n))
        acc = np.zeros((feats, n))
        table_t = tables[lvl].T
        for c, (bx, by, bz) in enumerate(CORNER_OFFSETS):
            np.bitwise_xor(h[0][bx], h[1][by], out=idx[c])
            np.bitwise_xor(idx[c], h[2][bz], out=idx[c])
            np.bitwise_and(idx[c], mask, out=idx[c])
            np.multiply(w[0][bx], w[1][by], out=weights[c])
            weights[c] *= w[2][bz]
            for f in range(feats):
                acc[f] += weights[c] * np.take(table_t[f], idx[c])
        out[:, lvl * feats : (lvl + 1) * feats] = acc.T
        cache.append((idx, weights, w if with_x_grad else None))
    return out, cache


def hash_encode(x, tables, box: Aabb, resolutions: np.ndarray, backend: str | None = None):
    """Multi-resolution hash encoding of points (N, 3) inside ``box``.

    Dual-mode in both the positions ``x`` and the feature ``tables``
    (levels, table_size, features).  Points are clipped into the box; the
    gradient w.r.t. a clipped coordinate is zero.  ``backend`` selects the
    compiled loops ("numba") or the vectorised reference ("numpy").
    """
    backend = DEFAULT_BACKEND if backend is None else backend
    if backend == "numba":
        return _hash_encode_compiled(x, tables, box, resolutions)
    if backend != "numpy":
        raise ValueError(f"unknown backend {backend!r}")
    xv = d.value_of(x)
    tv = d.value_of(tables)
    extent = box.extent
    u_raw = (xv - box.p_min) / extent
    u = np.clip(u_raw, 0.0, 1.0)
    want_x = d.is_var(x)
    out, cache = _encode_arrays(u, tv, resolutions, want_x)
    if not (want_x or d.is_var(tables)):
        return out
    levels, table_size, feats = tv.shape
    interior = (u_raw >= 0.0) & (u_raw <= 1.0)

    def backward(g):
        g_tables = None
        g_x = None
        if d.is_var(tables):
            g_tables = np.zeros_like(tv)
            for lvl, (idx, weights, _) in enumerate(cache):
                flat_idx = idx.ravel()
                for f in range(feats):
                    contrib = (weights * g[None, :, lvl * feats + f]).ravel()
                    g_tables[lvl, :, f] = np.bincount(flat_idx, weights=contrib, minlength=table_size)
        if want_x:
            g_u = np.zeros_like(u)
            for lvl, (idx, weights, w) in enumerate(cache):
                g_lvl = g[:, lvl * feats : (lvl + 1) * feats]
                table = tv[lvl]
                g_frac = np.zeros_like(u)
                for c, bits in enumerate(CORNER_OFFSETS):
                    # adjoint of this corner's weight
                    gw = np.einsum("nf,nf->n", np.take(table, idx[c], axis=0), g_lvl)
                    for ax in range(3):
                        o1, o2 = [a for a in range(3) if a != ax]
                        dw = gw * w[o1][bits[o1]] * w[o2][bits[o2]]
                        if bits[ax]:
                            g_frac[:, ax] += dw
                        else:
                            g_frac[:, ax] -= dw
                g_u += float(resolutions[lvl]) * g_frac
            g_x = g_u * interior / extent
        return g_x, g_tables

    return d.record(out, (x, tables), backward)


def _hash_encode_compiled(x, tables, box: Aabb, resolutions: np.ndarray):
    xv = d.value_of(x)
    tv = np.ascontiguousarray(d.value_of(tables))
    extent = box.extent
    u_raw = (xv - box.p_min) / extent
    u = np.ascontiguousarray(np.clip(u_raw, 0.0, 1.0))
    res = np.ascontiguousarray(resolutions, dtype=np.int64)
    out = np.empty((u.shape[0], tv.shape[0] * tv.shape[2]))
    _kernels.encode_forward(u, tv, res, out)
    want_x, want_t = d.is_var(x), d.is_var(tables)
    if not (want_x or want_t):
        return out

    def backward(g):
        g = np.ascontiguousarray(g)
        g_tables = np.zeros_like(tv) if want_t else np.zeros((1, 1, 1))
        g_u = np.zeros_like(u) if want_x else np.zeros((1, 3))
        _kernels.encode_backward(u, tv, res, g, want_t, want_x, g_tables, g_u)
        g_x = g_u * ((u_raw >= 0.0) & (u_raw <= 1.0)) / extent if want_x else None
        return g_x, (g_tables if want_t else None)

    return d.record(out, (x, tables), backward)


class Field:
    """Hash-grid encoder and MLP decoder with parameters in a :class:`diff.ParamStore`."""

    def __init__(self, cfg: HashGridConfig, box: Aabb, store: d.ParamStore) -> None:
        self.cfg = cfg
        self.box = box
        self.store = store
        self.resolutions = cfg.resolutions()
        self.frozen = False

    def _params(self, tape: d.Tape | None):
        names = ("grid", "w1", "b1", "w2", "b2")
        if tape is None or self.frozen:
            return [self.store.params[n] for n in names]
        return [self.store.leaf(tape, n) for n in names]

    def raw(self, x, tape: d.Tape | None = None):
        """Occupancy logit (clamped) and colour logits for points already inside the box."""
        if tape is None and d.is_var(x):
            tape = x.tape
        grid, w1, b1, w2, b2 = self._params(tape)
        feat = hash_encode(x, grid, self.box, self.resolutions)
        hidden = d.relu(d.add(d.matmul(feat, w1), b1))
        out = d.add(d.matmul(hidden, w2), b2)
        logit = d.clamp(out[:, 0], -LOGIT_CLAMP, LOGIT_CLAMP)
        return logit, out[:, 1:4]

    def query(self, x, tape: d.Tape | None = None, inside_tol: float = 1e-9):
        """Occupancy (N,) and colour (N, 3) at points (N, 3).

        Points outside the box (beyond ``inside_tol``) get occupancy 0 and
        colour 0 with no gradient path.
        """
        xv = d.value_of(x)
        if xv.ndim != 2 or xv.shape[1] != 3:
            raise ValueError("expected points of shape (N, 3)")
        if not np.all(np.isfinite(xv)):
            raise ValueError("non-finite query position")
        if tape is None and d.is_var(x):
            tape = x.tape
        inside = self.box.contains(xv, inside_tol)
        if np.all(inside):
            logit, color_logit = self.raw(x, tape)
            return d.sigmoid(logit), d.sigmoid(color_logit)
        n = xv.shape[0]
        rows = np.nonzero(inside)[0]
        occ = np.zeros(n)
        col = np.zeros((n, 3))
        if rows.size == 0:
            return occ, col
        logit, color_logit = self.raw(d.getitem(x, rows) if d.is_var(x) else xv[rows], tape)
        o_in = d.sigmoid(logit)
        c_in = d.sigmoid(color_logit)
        return _scatter_rows(o_in, rows, (n,)), _scatter_rows(c_in, rows, (n, 3))

    def occupancy(self, x: np.ndarray, chunk: int = 200_000) -> np.ndarray:
        """Value-only occupancy in chunks, for large grids."""
        x = np.asarray(x, dtype=np.float64)
        out = np.empty(x.shape[0])
        for s in range(0, x.shape[0], chunk):
            out[s : s + chunk] = self.query(x[s : s + chunk])[0]
        return out

    def parameter_count(self) -> int:
        return int(sum(self.store.params[n].size for n in self.store.names("field")))


def _scatter_rows(values, rows: np.ndarray, shape: tuple[int, ...]):
    vv = d.value_of(values)
    out = np.zeros(shape)
    out[rows] = vv
    return d.record(out, (values,), lambda g: (g[rows],))


def init_field(cfg: HashGridConfig, box: Aabb, seed: int) -> Field:
    """Fresh field with occupancy near 0.5 everywhere in the box.

    Grid features ~ U(-1e-4, 1e-4); decoder weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases 0.
    """
    rng = np.random.default_rng(seed)
    store = d.ParamStore()
    store.add("grid", rng.uniform(-1e-4, 1e-4, size=(cfg.levels, cfg.table_size, cfg.features)), "field")
    fan1 = cfg.feature_dim
    store.add("w1", rng.uniform(-1, 1, size=(fan1, cfg.hidden)) / math.sqrt(fan1), "field")
    store.add("b1", np.zeros(cfg.hidden), "field")
    store.add("w2", rng.uniform(-1, 1, size=(cfg.hidden, 4)) / math.sqrt(cfg.hidden), "field")
    store.add("b2", np.zeros(4), "field")
    return Field(cfg, box, store)


class ConstantField:
    """Test double: occupancy ``o0`` and mid-grey everywhere inside the box."""

    def __init__(self, o0: float, box: Aabb | None = None) -> None:
        if not 0.0 < o0 < 1.0:
            raise ValueError("o0 must lie in (0, 1)")
        self.o0 = float(o0)
        self.box = box if box is not None else Aabb.cube(0.25)
        self.frozen = True

    def query(self, x, tape: d.Tape | None = None, inside_tol: float = 1e-9):
        xv = d.value_of(x)
        inside = self.box.contains(xv, inside_tol)
        occ = np.where(inside, self.o0, 0.0)
        col = np.where(inside[:, None], 0.5, 0.0) * np.ones((xv.shape[0], 3))
        return occ, col

    def occupancy(self, x: np.ndarray, chunk: int = 200_000) -> np.ndarray:
        return self.query(np.asarray(x, dtype=np.float64))[0]


def constant_field(o0: float, box: Aabb | None = None) -> ConstantField:
    return ConstantField(o0, box)


# ---------------------------------------------------------------------------
# checkpoint format
#
# little-endian:
#   magic     8 bytes  b"INBVFLD1"
#   header    <7i      levels, base_res, max_res, features, log2_table, hidden, n_arrays
#             <6d      box p_min (3), p_max (3)
#   per array <i name_len, name utf-8, <i ndim, <ndim q shape, then <f8 row-major data

CHECKPOINT_MAGIC = b"INBVFLD1"


def save_field(field: Field, path: str | Path) -> None:
    cfg = field.cfg
    names = field.store.names("field")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(
            struct.pack(
                "<7i",
                cfg.levels,
                cfg.base_resolution,
                cfg.max_resolution,
                cfg.features,
                cfg.log2_table_size,
                cfg.hidden,
                len(names),
            )
        )
        fh.write(struct.pack("<6d", *field.box.p_min, *field.box.p_max))
        for name in names:
            arr = field.store.params[name]
            raw = name.encode("utf-8")
            fh.write(struct.pack("<i", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<i", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}q", *arr.shape))
            fh.write(arr.astype("<f8").tobytes(order="C"))


def load_field(path: str | Path) -> Field:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a field checkpoint")
    off = 8
    levels, base, mx, feats, log2t, hidden, n_arrays = struct.unpack_from("<7i", data, off)
    off += 28
    box_vals = struct.unpack_from("<6d", data, off)
    off += 48
    cfg = HashGridConfig(levels, base, mx, feats, log2t, hidden)
    store = d.ParamStore()
    for _ in range(n_arrays):
        (nlen,) = struct.unpack_from("<i", data, off)
        off += 4
        name = data[off : off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<i", data, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}q", data, off)
        off += 8 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shape).astype(np.float64)
        off += 8 * count
        store.add(name, arr, "field")
    return Field(cfg, Aabb(box_vals[:3], box_vals[3:]), store)
