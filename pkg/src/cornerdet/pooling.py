"""Directional max-scan pooling and the corner/center pooling modules.

Each direction is a single running-max scan over a feature map: ``top``
and ``bottom`` scan along the height axis, ``left`` and ``right`` along
the width axis. ``top``/``left`` are suffix scans (the output at a cell
is the max over everything below / to the right of it), ``bottom`` and
``right`` are prefix scans. The module variants compose these scans with
Conv-BN-ReLU branches; every variant exposes an identity-branch test
mode in which the branch convolutions, the skip, and the final
convolution are bypassed so the bare pooling arithmetic is observable.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .modules import ConvBN, ConvBNReLU, Module
from .tensor import Tensor, record_kink_signature

DIRECTIONS = ("top", "bottom", "left", "right")
CORNER_TYPES = ("top_left", "bottom_right")
POOLING_VARIANTS = ("cp", "ccp", "vhcp")

# Directional scans per corner branch (center pooling uses 4).
SCANS_PER_CORNER = {"cp": 2, "ccp": 4, "vhcp": 2}

# Incremented once per executed directional scan; tests and the bench
# harness reset and read it around a forward pass.
scan_counter = 0


def reset_scan_counter() -> None:
    global scan_counter
    scan_counter = 0


def _check_direction(direction: str) -> None:
    if direction not in DIRECTIONS:
        raise ValueError(f"unknown direction {direction!r}, expected one of {DIRECTIONS}")


def scan_max(arr: np.ndarray, direction: str) -> np.ndarray:
    """One directional running-max scan over a (..., H, W) array."""
    global scan_counter
    _check_direction(direction)
    scan_counter += 1
    out = np.empty_like(arr)
    if direction == "top":  # suffix max up each column
        out[..., -1, :] = arr[..., -1, :]
        for i in range(arr.shape[-2] - 2, -1, -1):
            np.maximum(arr[..., i, :], out[..., i + 1, :], out=out[..., i, :])
    elif direction == "bottom":  # prefix max down each column
        out[..., 0, :] = arr[..., 0, :]
        for i in range(1, arr.shape[-2]):
            np.maximum(arr[..., i, :], out[..., i - 1, :], out=out[..., i, :])
    elif direction == "left":  # suffix max leftward along each row
        out[..., :, -1] = arr[..., :, -1]
        for j in range(arr.shape[-1] - 2, -1, -1):
            np.maximum(arr[..., :, j], out[..., :, j + 1], out=out[..., :, j])
    else:  # right: prefix max rightward
        out[..., :, 0] = arr[..., :, 0]
        for j in range(1, arr.shape[-1]):
            np.maximum(arr[..., :, j], out[..., :, j - 1], out=out[..., :, j])
    return out


def _scan_routes(arr: np.ndarray, direction: str) -> np.ndarray:
    """Index of the surviving max per output cell along the scan axis.

    Ties route to the cell nearest the scan start (the prefix side of
    the scan), so each output cell maps to exactly one input cell.
    """
    if direction in ("top", "bottom"):
        axis_len = arr.shape[-2]
        moved = np.moveaxis(arr, -2, 0)
    else:
        axis_len = arr.shape[-1]
        moved = np.moveaxis(arr, -1, 0)
    idx = np.empty(moved.shape, dtype=np.intp)
    order = (
        range(axis_len - 2, -1, -1)
        if direction in ("top", "left")
        else range(1, axis_len)
    )
    start = axis_len - 1 if direction in ("top", "left") else 0
    idx[start] = start
    best = moved[start].copy()
    prev = start
    for i in order:
        take_here = moved[i] > best
        idx[i] = np.where(take_here, i, idx[prev])
        np.maximum(moved[i], best, out=best)
        prev = i
    if direction in ("top", "bottom"):
        return np.moveaxis(idx, 0, -2)
    return np.moveaxis(idx, 0, -1)


def directional_pool(f: Tensor, direction: str) -> Tensor:
    """Differentiable directional max scan; shape preserved.

    The gradient of each output cell flows to exactly the one input cell
    that supplied its max.
    """
    out = scan_max(f.data, direction)
    if T._kink_signatures is not None:
        record_kink_signature(hash(_scan_routes(f.data, direction).tobytes()))

    def bwd(g, f=f, direction=direction):
        if not f.requires_grad:
            return
        routes = _scan_routes(f.data, direction)
        d = np.zeros_like(f.data)
        lead = np.indices(routes.shape)
        if direction in ("top", "bottom"):
            index = (*lead[:-2], routes, lead[-1])
        else:
            index = (*lead[:-2], lead[-2], routes)
        np.add.at(d, index, g)
        _accum = T._accumulate
        _accum(f, d)

    return T._node(out, [f], bwd)


def naive_pool_oracle(f: Tensor | np.ndarray, direction: str) -> np.ndarray:
    """Reference semantics: each output cell is the explicit max over the
    full ray of cells the scan would visit, O(H*W*(H+W))."""
    _check_direction(direction)
    arr = f.data if isinstance(f, Tensor) else np.asarray(f)
    out = np.empty_like(arr)
    h, w = arr.shape[-2], arr.shape[-1]
    if direction == "top":
        for i in range(h):
            out[..., i, :] = arr[..., i:, :].max(axis=-2)
    elif direction == "bottom":
        for i in range(h):
            out[..., i, :] = arr[..., : i + 1, :].max(axis=-2)
    elif direction == "left":
        for j in range(w):
            out[..., :, j] = arr[..., :, j:].max(axis=-1)
    else:
        for j in range(w):
            out[..., :, j] = arr[..., :, : j + 1].max(axis=-1)
    return out


def _corner_directions(corner_type: str) -> tuple[str, str]:
    if corner_type == "top_left":
        return "top", "left"
    if corner_type == "bottom_right":
        return "bottom", "right"
    raise ValueError(f"unknown corner type {corner_type!r}, expected one of {CORNER_TYPES}")


# ---------------------------------------------------------------------------
# Pooling cores (raw array arithmetic; shared by the modules and the bench)
# ---------------------------------------------------------------------------


def pooling_core_array(variant: str, arr: np.ndarray, corner_type: str = "top_left") -> np.ndarray:
    """The bare pooling arithmetic of a variant on a plain array."""
    if variant == "center":
        return scan_max(scan_max(arr, "left"), "right") + scan_max(scan_max(arr, "top"), "bottom")
    v, hdir = _corner_directions(corner_type)
    if variant == "cp":
        return scan_max(arr, v) + scan_max(arr, hdir)
    if variant == "ccp":
        return scan_max(scan_max(arr, hdir) + arr, v) + scan_max(scan_max(arr, v) + arr, hdir)
    if variant == "vhcp":
        return scan_max(scan_max(arr, v) + arr, hdir) + arr
    raise ValueError(f"unknown pooling variant {variant!r}")


class _PoolModuleBase(Module):
    """Shared skeleton: branch blocks -> pooling core -> 3x3 ConvBN merged
    with a 1x1 ConvBN skip, then ReLU. ``identity_mode`` bypasses every
    convolution and returns the bare core."""

    scan_count: int

    def __init__(self, rng, channels: int):
        super().__init__()
        self.identity_mode = False
        self.merge = ConvBN(rng, channels, channels, 3)
        self.skip = ConvBN(rng, channels, channels, 1)

    def _finish(self, core: Tensor, f: Tensor) -> Tensor:
        if self.identity_mode:
            return core
        return T.relu(self.merge(core) + self.skip(f))


class CornerPoolCP(_PoolModuleBase):
    """Two independent boundary scans summed (2 scans per corner)."""

    scan_count = 2

    def __init__(self, rng, channels: int, corner_type: str):
        super().__init__(rng, channels)
        self.vertical, self.horizontal = _corner_directions(corner_type)
        self.branch_a = ConvBNReLU(rng, channels, channels, 3)
        self.branch_b = ConvBNReLU(rng, channels, channels, 3)

    def forward(self, f: Tensor) -> Tensor:
        a = f if self.identity_mode else self.branch_a(f)
        b = f if self.identity_mode else self.branch_b(f)
        core = directional_pool(a, self.vertical) + directional_pool(b, self.horizontal)
        return self._finish(core, f)


class CornerPoolCCP(_PoolModuleBase):
    """Cascade variant: each boundary scan is fed by a perpendicular
    interior scan (4 scans per corner)."""

    scan_count = 4

    def __init__(self, rng, channels: int, corner_type: str):
        super().__init__(rng, channels)
        self.vertical, self.horizontal = _corner_directions(corner_type)
        self.branch_a1 = ConvBNReLU(rng, channels, channels, 3)
        self.branch_a2 = ConvBNReLU(rng, channels, channels, 3)
        self.branch_b1 = ConvBNReLU(rng, channels, channels, 3)
        self.branch_b2 = ConvBNReLU(rng, channels, channels, 3)

    def forward(self, f: Tensor) -> Tensor:
        if self.identity_mode:
            a1 = a2 = b1 = b2 = f
        else:
            a1, a2 = self.branch_a1(f), self.branch_a2(f)
            b1, b2 = self.branch_b1(f), self.branch_b2(f)
        lane_v = directional_pool(directional_pool(a1, self.horizontal) + a2, self.vertical)
        lane_h = directional_pool(directional_pool(b1, self.vertical) + b2, self.horizontal)
        return self._finish(lane_v + lane_h, f)


class CornerPoolVHCP(_PoolModuleBase):
    """Vertical scan focuses interior evidence onto the horizontal margin,
    a horizontal scan then focuses the enhanced margin onto the corner
    (2 scans per corner, same count as CP)."""

    scan_count = 2

    def __init__(self, rng, channels: int, corner_type: str):
        super().__init__(rng, channels)
        self.vertical, self.horizontal = _corner_directions(corner_type)
        self.branch_a = ConvBNReLU(rng, channels, channels, 3)
        self.branch_b = ConvBNReLU(rng, channels, channels, 3)
        self.branch_c = ConvBNReLU(rng, channels, channels, 3)

    def forward(self, f: Tensor) -> Tensor:
        if self.identity_mode:
            a = b = c = f
        else:
            a, b, c = self.branch_a(f), self.branch_b(f), self.branch_c(f)
        margin = directional_pool(a, self.vertical) + b
        corner = directional_pool(margin, self.horizontal) + c
        return self._finish(corner, f)


class CenterPool(_PoolModuleBase):
    """Row-max plus column-max aggregation at every cell (4 scans)."""

    scan_count = 4

    def __init__(self, rng, channels: int):
        super().__init__(rng, channels)
        self.branch_a = ConvBNReLU(rng, channels, channels, 3)
        self.branch_b = ConvBNReLU(rng, channels, channels, 3)

    def forward(self, f: Tensor) -> Tensor:
        a = f if self.identity_mode else self.branch_a(f)
        b = f if self.identity_mode else self.branch_b(f)
        rows = directional_pool(directional_pool(a, "left"), "right")
        cols = directional_pool(directional_pool(b, "top"), "bottom")
        return self._finish(rows + cols, f)


def make_corner_pool(variant: str, rng, channels: int, corner_type: str) -> _PoolModuleBase:
    if variant == "cp":
        return CornerPoolCP(rng, channels, corner_type)
    if variant == "ccp":
        return CornerPoolCCP(rng, channels, corner_type)
    if variant == "vhcp":
        return CornerPoolVHCP(rng, channels, corner_type)
    raise ValueError(f"unknown pooling variant {variant!r}, expected one of {POOLING_VARIANTS}")
