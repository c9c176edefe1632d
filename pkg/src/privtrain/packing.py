"""Tensor <-> polynomial mappings for 2-D convolution.

Two schemes are implemented:

* ``baseline`` -- the row-major scheme: zero-pad the input, pack it row by
  row, and pack the kernel reversed.  The padding entries occupy polynomial
  degrees, so once the padded grid outgrows the degree budget the input is
  partitioned into disjoint power-of-two blocks, each packed together with
  its (h-1) halo.

* ``correlated`` -- packing that places input entry (i, j) at degree
  i*O + j with O = max(W, H) + h - 1 and kernel entry (i, j) at degree
  (h-1-i)*O + (h-1-j).  No padding entry is ever materialized and every
  product coefficient at degree u*O + v is an output of the full-padding
  convolution.  Large inputs are split into overlapping windows whose
  stitched outputs reproduce the convolution exactly.

All packers are pure; plans are immutable once built.
"""

from __future__ import annotations

import dataclasses
import json
import math
from typing import Sequence

import numpy as np

from .ring import RingElem, RingParams


class PackingError(Exception):
    """Base error for packing."""


class PartitionError(PackingError):
    """A requested window does not fit the degree budget."""


class InfeasibleWindowError(PackingError):
    """No window satisfies the partition constraints for this budget."""


class PackingOverflowError(PackingError):
    """Used degrees would wrap around x^n + 1."""


SCHEME_BASELINE = "baseline"
SCHEME_CORRELATED = "correlated"


# --------------------------------------------------------------------------
# shapes
# --------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class ConvShape:
    """Stride-1 square-kernel convolution geometry."""

    height: int
    width: int
    kernel: int
    pad: int = 0

    def __post_init__(self):
        if self.kernel < 1:
            raise ValueError("kernel side must be >= 1")
        if self.height < self.kernel or self.width < self.kernel:
            raise ValueError("input must be at least kernel-sized; pad first")
        if not 0 <= self.pad <= self.kernel - 1:
            raise ValueError("pad must lie in [0, kernel-1]")

    @property
    def stride_base(self) -> int:
        """O = max(W, H) + h - 1, the row stride of the correlated packing."""
        return max(self.width, self.height) + self.kernel - 1

    @property
    def out_height(self) -> int:
        return self.height + 2 * self.pad - self.kernel + 1

    @property
    def out_width(self) -> int:
        return self.width + 2 * self.pad - self.kernel + 1

    @property
    def full_out_height(self) -> int:
        return self.height + self.kernel - 1

    @property
    def full_out_width(self) -> int:
        return self.width + self.kernel - 1

    @property
    def padded_height(self) -> int:
        return self.height + 2 * self.pad

    @property
    def padded_width(self) -> int:
        return self.width + 2 * self.pad


@dataclasses.dataclass(frozen=True)
class Tile:
    """One packed window: raw-grid (correlated) or padded-grid (baseline)."""

    index: int
    row0: int
    col0: int
    rows: int
    cols: int


@dataclasses.dataclass(frozen=True)
class PackingPlan:
    """Assignment of tensor entries to polynomial coefficients.

    ``row_stride`` is O_w for the correlated scheme and the packed window
    width for the baseline.  ``owned`` lists, per tile, the half-open output
    ranges (full-padding coordinates for correlated, valid padded-grid
    coordinates for baseline) that the tile's product is responsible for.
    """

    scheme: str
    shape: ConvShape
    n: int
    window: tuple[int, int]
    row_stride: int
    tiles: tuple[Tile, ...]
    owned: tuple[tuple[int, int, int, int], ...]
    degree_bound: int

    def coeff_map(self) -> dict[tuple[int, int], tuple[int, int]]:
        """Canonical (input entry) -> (tile index, degree) assignment."""
        out: dict[tuple[int, int], tuple[int, int]] = {}
        sh = self.shape
        if self.scheme == SCHEME_CORRELATED:
            for i in range(sh.height):
                for j in range(sh.width):
                    t = self._owning_tile(i, j)
                    tile = self.tiles[t]
                    out[(i, j)] = (t, (i - tile.row0) * self.row_stride + (j - tile.col0))
        else:
            for i in range(sh.height):
                for j in range(sh.width):
                    ip, jp = i + sh.pad, j + sh.pad
                    t = self._owning_tile(ip, jp)
                    tile = self.tiles[t]
                    out[(i, j)] = (t, (ip - tile.row0) * self.row_stride + (jp - tile.col0))
        return out

    def out_map(self) -> dict[tuple[int, int], tuple[int, int]]:
        """(output u, v) -> (tile index, product degree)."""
        res: dict[tuple[int, int], tuple[int, int]] = {}
        h = self.shape.kernel
        off = h - 1 if self.scheme == SCHEME_BASELINE else 0
        for t, (u0, u1, v0, v1) in enumerate(self.owned):
            tile = self.tiles[t]
            for u in range(u0, u1):
                for v in range(v0, v1):
                    deg = (u - tile.row0 + off) * self.row_stride + (v - tile.col0 + off)
                    res[(u, v)] = (t, deg)
        return res

    def _owning_tile(self, i: int, j: int) -> int:
        rows = sorted({t.row0 for t in self.tiles})
        cols = sorted({t.col0 for t in self.tiles})
        ri = max(k for k, r in enumerate(rows) if r <= i)
        ci = max(k for k, c in enumerate(cols) if c <= j)
        return ri * len(cols) + ci

    @property
    def num_tiles(self) -> int:
        return len(self.tiles)


@dataclasses.dataclass(frozen=True)
class CountReport:
    """Polynomial-multiplication accounting for one shape and budget."""

    scheme: str
    mults: int
    input_polys: int
    kernel_polys: int
    n1: int
    n2: int
    max_degree: int
    mults_baseline: int
    mults_correlated: int
    n1_n2_diff_formula: int
    paper_objective: int | None
    trivial_kernel: bool

    def to_json(self) -> str:
        return json.dumps(
            {
                "scheme": self.scheme,
                "mults": self.mults,
                "input_polys": self.input_polys,
                "kernel_polys": self.kernel_polys,
                "n1": self.n1,
                "n2": self.n2,
                "max_degree": self.max_degree,
                "mults_baseline": self.mults_baseline,
                "mults_correlated": self.mults_correlated,
                "n1_n2_diff_formula": self.n1_n2_diff_formula,
                "paper_objective": self.paper_objective,
                "trivial_kernel": self.trivial_kernel,
            }
        )


# --------------------------------------------------------------------------
# window selection
# --------------------------------------------------------------------------


def _window_product_degree(hw: int, ww: int, h: int) -> int:
    ow = max(ww, hw) + h - 1
    return (hw + h - 2) * ow + (ww + h - 2)


def window_feasible(shape: ConvShape, hw: int, ww: int, n: int) -> bool:
    """Partition-window constraints plus the exact no-wrap product bound."""
    h = shape.kernel
    if not (h <= hw <= shape.height and h <= ww <= shape.width):
        return False
    ow = max(ww, hw) + h - 1
    if ww + hw * ow > n:
        return False
    return _window_product_degree(hw, ww, h) <= n - 1


def tile_count(shape: ConvShape, hw: int, ww: int) -> int:
    h = shape.kernel
    rows = math.ceil((shape.height - h + 1) / (hw - h + 1)) if hw > h - 1 else 0
    cols = math.ceil((shape.width - h + 1) / (ww - h + 1)) if ww > h - 1 else 0
    return rows * cols


def choose_tiles(shape: ConvShape, n: int) -> tuple[int, int]:
    """Exhaustive window search minimizing the induced multiplication count.

    Ties prefer the larger window area, then the larger window height.
    """
    best = None
    for hw in range(shape.kernel, shape.height + 1):
        for ww in range(shape.kernel, shape.width + 1):
            if not window_feasible(shape, hw, ww, n):
                continue
            key = (tile_count(shape, hw, ww), -(hw * ww), -hw)
            if best is None or key < best[0]:
                best = (key, (hw, ww))
    if best is None:
        raise InfeasibleWindowError(
            f"no feasible window for kernel {shape.kernel} within degree budget {n}"
        )
    return best[1]


def paper_objective(shape: ConvShape, hw: int, ww: int, n: int) -> int:
    """The published window objective, reported verbatim for comparison."""
    h = shape.kernel
    a = math.ceil(hw * ww / n)
    b = (shape.height - h + 1) // (hw - h + 1) if hw > h - 1 else 0
    c = (shape.width - h + 1) // (ww + h - 1)
    return a * b * c


def _tile_positions(extent: int, window: int, step: int) -> list[int]:
    if window >= extent:
        return [0]
    pos = list(range(0, extent - window, step))
    pos.append(extent - window)
    # dedupe while preserving order (clamping can repeat the last start)
    seen, out = set(), []
    for p in pos:
        if p not in seen:
            seen.add(p)
            out.append(p)
    return out


# --------------------------------------------------------------------------
# plans
# --------------------------------------------------------------------------


def _axis_ownership(positions: list[int], window: int, kernel: int, full_extent: int) -> list[tuple[int, int]]:
    """Half-open output ranges each window position is responsible for.

    Interior windows own outputs whose receptive field they fully contain;
    the first window additionally owns the leading padded edge and the last
    one the trailing edge.  The clamped last position may overlap its
    predecessor, in which case the earlier window keeps the rows.
    """
    ranges = []
    prev_end = 0
    for k, p0 in enumerate(positions):
        lo = 0 if k == 0 else max(p0 + kernel - 1, prev_end)
        hi = full_extent if k == len(positions) - 1 else p0 + window
        hi = max(hi, lo)
        ranges.append((lo, hi))
        prev_end = hi
    return ranges


def plan_correlated(shape: ConvShape, n: int, window: tuple[int, int] | None = None) -> PackingPlan:
    h = shape.kernel
    hw, ww = window if window is not None else choose_tiles(shape, n)
    if not window_feasible(shape, hw, ww, n):
        raise PartitionError(
            f"window {hw}x{ww} does not fit budget {n} for kernel {h} (re-tile)"
        )
    ow = max(ww, hw) + h - 1
    rows = _tile_positions(shape.height, hw, hw - h + 1)
    cols = _tile_positions(shape.width, ww, ww - h + 1)
    row_own = _axis_ownership(rows, hw, h, shape.full_out_height)
    col_own = _axis_ownership(cols, ww, h, shape.full_out_width)
    tiles = []
    owned = []
    for a, r0 in enumerate(rows):
        for b, c0 in enumerate(cols):
            tiles.append(Tile(len(tiles), r0, c0, hw, ww))
            owned.append(row_own[a] + col_own[b])
    return PackingPlan(
        scheme=SCHEME_CORRELATED,
        shape=shape,
        n=n,
        window=(hw, ww),
        row_stride=ow,
        tiles=tuple(tiles),
        owned=tuple(owned),
        degree_bound=_window_product_degree(hw, ww, h),
    )


def baseline_block_side(shape: ConvShape, n: int) -> int:
    """Largest power-of-two block whose halo-extended window fits the budget."""
    h = shape.kernel
    t = 1
    while (2 * t + h - 1) ** 2 <= n:
        t *= 2
    if (t + h - 1) ** 2 > n:
        raise InfeasibleWindowError(
            f"kernel {h} cannot be packed within degree budget {n}"
        )
    return t


def plan_baseline(shape: ConvShape, n: int) -> PackingPlan:
    h = shape.kernel
    hp, wp = shape.padded_height, shape.padded_width
    if hp * wp <= n:
        tiles = (Tile(0, 0, 0, hp, wp),)
        owned = ((0, hp - h + 1, 0, wp - h + 1),)
        return PackingPlan(
            scheme=SCHEME_BASELINE,
            shape=shape,
            n=n,
            window=(hp, wp),
            row_stride=wp,
            tiles=tiles,
            owned=owned,
            degree_bound=hp * wp - 1,
        )
    t = baseline_block_side(shape, n)
    side = t + h - 1
    rows = list(range(0, hp - h + 1, t))
    cols = list(range(0, wp - h + 1, t))
    tiles = []
    owned = []
    for r0 in rows:
        for c0 in cols:
            idx = len(tiles)
            tiles.append(Tile(idx, r0, c0, side, side))
            owned.append(
                (r0, min(r0 + t, hp - h + 1), c0, min(c0 + t, wp - h + 1))
            )
    return PackingPlan(
        scheme=SCHEME_BASELINE,
        shape=shape,
        n=n,
        window=(side, side),
        row_stride=side,
        tiles=tuple(tiles),
        owned=tuple(owned),
        degree_bound=side * side - 1,
    )


def make_plan(scheme: str, shape: ConvShape, n: int) -> PackingPlan:
    if scheme == SCHEME_CORRELATED:
        return plan_correlated(shape, n)
    if scheme == SCHEME_BASELINE:
        return plan_baseline(shape, n)
    raise ValueError(f"unknown packing scheme {scheme!r}")


# --------------------------------------------------------------------------
# packing / extraction
# --------------------------------------------------------------------------


def pack_input_correlated(
    x: np.ndarray, shape: ConvShape, params: RingParams, plan: PackingPlan | None = None
) -> tuple[list[RingElem], PackingPlan]:
    """Pack x[i, j] at degree i*O_w + j per tile; no padding is materialized."""
    if plan is None:
        plan = plan_correlated(shape, params.n)
    _check_plan(plan, SCHEME_CORRELATED, params)
    x = np.asarray(x)
    if x.shape != (shape.height, shape.width):
        raise PackingError(f"input shape {x.shape} != {(shape.height, shape.width)}")
    ow = plan.row_stride
    buf_dtype = object if x.dtype == object else np.int64
    polys = []
    for tile in plan.tiles:
        sub = x[tile.row0 : tile.row0 + tile.rows, tile.col0 : tile.col0 + tile.cols]
        vals = np.zeros(params.n, dtype=buf_dtype)
        idx = (np.arange(tile.rows)[:, None] * ow + np.arange(tile.cols)).ravel()
        vals[idx] = sub.astype(buf_dtype).ravel()
        polys.append(RingElem.from_ints(params, vals))
    return polys, plan


def pack_kernel_correlated(
    w: np.ndarray, shape: ConvShape, params: RingParams, plan: PackingPlan | None = None
) -> tuple[RingElem, PackingPlan]:
    """Pack w[i, j] at degree (h-1-i)*O_w + (h-1-j); shared across tiles."""
    if plan is None:
        plan = plan_correlated(shape, params.n)
    _check_plan(plan, SCHEME_CORRELATED, params)
    h = shape.kernel
    w = np.asarray(w)
    if w.shape != (h, h):
        raise PackingError(f"kernel shape {w.shape} != {(h, h)}")
    ow = plan.row_stride
    buf_dtype = object if w.dtype == object else np.int64
    vals = np.zeros(params.n, dtype=buf_dtype)
    idx = ((h - 1 - np.arange(h))[:, None] * ow + (h - 1 - np.arange(h))).ravel()
    vals[idx] = w.astype(buf_dtype).ravel()
    return RingElem.from_ints(params, vals), plan


def pack_baseline(
    x: np.ndarray, w: np.ndarray, shape: ConvShape, params: RingParams
) -> tuple[list[RingElem], RingElem, PackingPlan]:
    """Row-major packing of the zero-padded input plus the reversed kernel."""
    plan = plan_baseline(shape, params.n)
    _check_plan(plan, SCHEME_BASELINE, params)
    h = shape.kernel
    x = np.asarray(x)
    buf_dtype = object if x.dtype == object else np.int64
    ext_h = max(t.row0 + t.rows for t in plan.tiles)
    ext_w = max(t.col0 + t.cols for t in plan.tiles)
    padded = np.zeros((ext_h, ext_w), dtype=buf_dtype)
    padded[shape.pad : shape.pad + shape.height, shape.pad : shape.pad + shape.width] = x
    stride = plan.row_stride
    polys = []
    for tile in plan.tiles:
        sub = padded[tile.row0 : tile.row0 + tile.rows, tile.col0 : tile.col0 + tile.cols]
        vals = np.zeros(params.n, dtype=buf_dtype)
        idx = (np.arange(tile.rows)[:, None] * stride + np.arange(tile.cols)).ravel()
        vals[idx] = sub.ravel()
        polys.append(RingElem.from_ints(params, vals))
    w = np.asarray(w)
    kvals = np.zeros(params.n, dtype=buf_dtype)
    kidx = ((h - 1 - np.arange(h))[:, None] * stride + (h - 1 - np.arange(h))).ravel()
    kvals[kidx] = w.astype(buf_dtype).ravel()
    return polys, RingElem.from_ints(params, kvals), plan


def extract_output(products: Sequence[RingElem], plan: PackingPlan) -> np.ndarray:
    """Read the convolution out of tile products and crop to the padding.

    Returns residues mod the ring modulus as an object array; use
    :func:`to_signed_matrix` for the centered view.
    """
    if len(products) != plan.num_tiles:
        raise PackingError(f"expected {plan.num_tiles} products, got {len(products)}")
    n = products[0].params.n
    if plan.degree_bound >= n:
        raise PackingOverflowError(
            f"plan uses degree {plan.degree_bound} >= ring degree {n}: wrapped"
        )
    sh = plan.shape
    h = sh.kernel
    out_dtype = np.uint64 if products[0].params.uses_uint64 else object
    if plan.scheme == SCHEME_CORRELATED:
        full = np.zeros((sh.full_out_height, sh.full_out_width), dtype=out_dtype)
        off = 0
    else:
        full = np.zeros((sh.padded_height - h + 1, sh.padded_width - h + 1), dtype=out_dtype)
        off = h - 1
    for tile, (u0, u1, v0, v1), poly in zip(plan.tiles, plan.owned, products):
        if u1 <= u0 or v1 <= v0:
            continue
        us = np.arange(u0, u1) - tile.row0 + off
        vs = np.arange(v0, v1) - tile.col0 + off
        degs = us[:, None] * plan.row_stride + vs
        full[u0:u1, v0:v1] = poly.coeffs[degs]
    if plan.scheme == SCHEME_CORRELATED:
        crop = h - 1 - sh.pad
        if crop:
            full = full[crop:-crop, crop:-crop]
    return full


def to_signed_matrix(mat: np.ndarray, modulus: int) -> np.ndarray:
    half = modulus // 2
    if mat.dtype == np.uint64 and modulus < (1 << 62):
        v = mat.astype(np.int64) % np.int64(modulus)
        return np.where(v > half, v - modulus, v)
    out = mat.astype(object).copy()
    flat = out.ravel()
    for k in range(flat.size):
        v = int(flat[k]) % modulus
        flat[k] = v - modulus if v > half else v
    return out


def _check_plan(plan: PackingPlan, scheme: str, params: RingParams):
    if plan.scheme != scheme:
        raise PackingError(f"plan is for scheme {plan.scheme!r}, not {scheme!r}")
    if plan.n > params.n:
        raise PackingError("plan degree budget exceeds the ring degree")
    if plan.degree_bound >= params.n:
        raise PackingOverflowError(
            f"plan needs degree {plan.degree_bound}, ring has {params.n}"
        )


# --------------------------------------------------------------------------
# fully-connected packing: y = W @ x via one product per row group
# --------------------------------------------------------------------------


def fc_row_capacity(n: int, in_dim: int) -> int:
    return max(1, n // in_dim)


def pack_fc_input(x: np.ndarray, params: RingParams) -> RingElem:
    x = np.asarray(x)
    buf_dtype = object if x.dtype == object else np.int64
    vals = np.zeros(params.n, dtype=buf_dtype)
    vals[: x.size] = x.astype(buf_dtype)
    return RingElem.from_ints(params, vals)


def pack_fc_matrix(w: np.ndarray, params: RingParams) -> list[RingElem]:
    """Rows reversed at stride in_dim; row r's dot product lands at r*in+in-1."""
    w = np.asarray(w)
    out_dim, in_dim = w.shape
    if in_dim > params.n:
        raise PackingError(f"fc input dimension {in_dim} exceeds ring degree")
    cap = fc_row_capacity(params.n, in_dim)
    buf_dtype = object if w.dtype == object else np.int64
    polys = []
    for lo in range(0, out_dim, cap):
        rows = w[lo : lo + cap]
        vals = np.zeros(params.n, dtype=buf_dtype)
        for r, row in enumerate(rows):
            vals[r * in_dim : (r + 1) * in_dim] = row.astype(buf_dtype)[::-1]
        polys.append(RingElem.from_ints(params, vals))
    return polys


def extract_fc_output(products: Sequence[RingElem], out_dim: int, in_dim: int) -> np.ndarray:
    n = products[0].params.n
    cap = fc_row_capacity(n, in_dim)
    chunks = []
    for g, poly in enumerate(products):
        take = min(cap, out_dim - g * cap)
        degs = np.arange(take) * in_dim + (in_dim - 1)
        chunks.append(np.asarray(poly.coeffs[degs]))
    return np.concatenate(chunks)


def pack_outer_left(g: np.ndarray, in_dim: int, params: RingParams) -> list[RingElem]:
    """Pack g[r] at degree r*in_dim so that g ⊗ x fills degrees r*in + j."""
    g = np.asarray(g)
    cap = fc_row_capacity(params.n, in_dim)
    buf_dtype = object if g.dtype == object else np.int64
    polys = []
    for lo in range(0, g.size, cap):
        part = g[lo : lo + cap]
        vals = np.zeros(params.n, dtype=buf_dtype)
        vals[np.arange(part.size) * in_dim] = part.astype(buf_dtype)
        polys.append(RingElem.from_ints(params, vals))
    return polys


def extract_outer(products: Sequence[RingElem], out_dim: int, in_dim: int) -> np.ndarray:
    n = products[0].params.n
    cap = fc_row_capacity(n, in_dim)
    out_dtype = np.uint64 if products[0].params.uses_uint64 else object
    mat = np.zeros((out_dim, in_dim), dtype=out_dtype)
    for g, poly in enumerate(products):
        take = min(cap, out_dim - g * cap)
        degs = (np.arange(take)[:, None] * in_dim) + np.arange(in_dim)
        mat[g * cap : g * cap + take] = poly.coeffs[degs]
    return mat


# --------------------------------------------------------------------------
# analytic degree / count report
# --------------------------------------------------------------------------


def analytic_n1(h_dim: int, kernel: int) -> int:
    k = (kernel - 1) // 2
    return (k + h_dim - 1) * (h_dim + kernel - 1) + h_dim + k


def analytic_n2(h_dim: int, kernel: int) -> int:
    return (h_dim + kernel - 1) * (h_dim - 1)


def analytic_n1_n2_diff(h_dim: int, kernel: int) -> int:
    return ((kernel + 1) // 2) * h_dim + ((kernel - 1) // 2) * kernel


def count_report(shape: ConvShape, n: int, scheme: str) -> CountReport:
    """Multiplication counts (both schemes) plus the analytic degree formulas."""
    h = shape.kernel
    base = plan_baseline(shape, n)
    base_mults = base.num_tiles
    obj = None
    try:
        corr = plan_correlated(shape, n)
        corr_mults = corr.num_tiles
        hw, ww = corr.window
        obj = paper_objective(shape, hw, ww, n)
        corr_max_deg = (corr.window[0] - 1) * corr.row_stride + corr.window[1] - 1
    except InfeasibleWindowError:
        corr_mults = 0
        corr_max_deg = -1
    # highest nonzero-support input degree of the baseline packing
    base_max_deg = (shape.height + shape.pad - 1) * base.row_stride + (
        shape.width + shape.pad - 1
    ) if base.num_tiles == 1 else base.degree_bound
    if scheme == SCHEME_CORRELATED:
        mults, max_deg = corr_mults, corr_max_deg
        input_polys = corr_mults
    else:
        mults, max_deg = base_mults, base_max_deg
        input_polys = base_mults
    return CountReport(
        scheme=scheme,
        mults=mults,
        input_polys=input_polys,
        kernel_polys=1,
        n1=analytic_n1(shape.height, h),
        n2=analytic_n2(shape.height, h),
        max_degree=max_deg,
        mults_baseline=base_mults,
        mults_correlated=corr_mults,
        n1_n2_diff_formula=analytic_n1_n2_diff(shape.height, h),
        paper_objective=obj,
        trivial_kernel=(h == 1),
    )
