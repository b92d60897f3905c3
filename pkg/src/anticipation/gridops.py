"""Occupancy grid frames and the rule-based image transforms.

Axis convention (ego frame): image row grows backwards (forward is up),
column grows to the ego's right.  A rigid warp rotates about a pivot pixel
by ``dtheta`` (positive = left turn, counter-clockwise on screen) and then
translates by ``dp_pixels = (d_row, d_col)``.  Warps are inverse-mapped:
every output pixel samples the source at the pre-image of its centre, with
zero fill outside the grid.

IOT1 moves only the ego channel to its anticipated pose, IOT2 moves the whole
next frame with the same spec, and OOT applies the inverse map so the ego
returns to its anchor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from . import diffcalc as dc
from .kinematics import PoseDelta

ROLES = ("ego", "occupancy", "map")


@dataclass
class Ogm:
    data: np.ndarray  # (h, w, c)
    ego_anchor: tuple[int, int]
    meters_per_pixel: float
    channel_roles: tuple[str, ...]
    value_mode: str = "real"

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"Ogm data must be (h, w, c), got {self.data.shape}")
        if len(self.channel_roles) != self.c:
            raise ValueError(f"{len(self.channel_roles)} roles for {self.c} channels")
        if any(r not in ROLES for r in self.channel_roles):
            raise ValueError(f"unknown channel role in {self.channel_roles}")
        if not self.meters_per_pixel > 0:
            raise ValueError("meters_per_pixel must be positive")
        r, c = self.ego_anchor
        if not (0 <= r < self.h and 0 <= c < self.w):
            raise ValueError(f"ego anchor {self.ego_anchor} outside {self.h}x{self.w} grid")
        if self.value_mode not in ("real", "binary"):
            raise ValueError(f"value_mode must be real or binary, got {self.value_mode}")
        if self.data.size and (self.data.min() < 0 or self.data.max() > 1):
            raise ValueError("Ogm values must lie in [0, 1]")

    @property
    def h(self) -> int:
        return self.data.shape[0]

    @property
    def w(self) -> int:
        return self.data.shape[1]

    @property
    def c(self) -> int:
        return self.data.shape[2]

    def channel_mask(self, role: str) -> np.ndarray:
        return np.array([r == role for r in self.channel_roles], dtype=bool)

    def with_data(self, data: np.ndarray) -> "Ogm":
        return replace(self, data=data)


@dataclass
class DiffFrame:
    data: np.ndarray  # (h, w, c), values in [-1, 1]
    ego_anchor: tuple[int, int]
    meters_per_pixel: float


@dataclass(frozen=True)
class WarpSpec:
    dtheta: float
    dp_pixels: tuple[float, float]  # (d_row, d_col)
    pivot: tuple[float, float]

    def __post_init__(self):
        vals = (self.dtheta, *self.dp_pixels, *self.pivot)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite warp spec {vals}")

    @property
    def is_identity(self) -> bool:
        return self.dtheta == 0.0 and self.dp_pixels == (0.0, 0.0)

    @classmethod
    def from_pose_delta(cls, d: PoseDelta, meters_per_pixel: float, pivot) -> "WarpSpec":
        fwd, left = d.local_dp()
        # forward is up (-row), left is -col; +0.0 normalises negative zeros
        return cls(float(d.dtheta), (-fwd / meters_per_pixel + 0.0, -left / meters_per_pixel + 0.0),
                   (float(pivot[0]), float(pivot[1])))


def _source_coords(h: int, w: int, spec: WarpSpec, inverse: bool) -> tuple[np.ndarray, np.ndarray]:
    rows, cols = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    pr, pc = spec.pivot
    tr, tc = spec.dp_pixels
    c, s = math.cos(spec.dtheta), math.sin(spec.dtheta)
    if inverse:
        # output(P) = src(F(P)),  F(q) = pivot + R (q - pivot) + t
        dr, dcol = rows - pr, cols - pc
        sr = pr + (c * dr - s * dcol) + tr
        sc = pc + (s * dr + c * dcol) + tc
    else:
        # output(P) = src(F^-1(P)) = src(pivot + R^T (P - pivot - t))
        dr, dcol = rows - pr - tr, cols - pc - tc
        sr = pr + (c * dr + s * dcol)
        sc = pc + (-s * dr + c * dcol)
    return sr.ravel(), sc.ravel()


def sampling_matrix(h: int, w: int, spec: WarpSpec, inverse: bool = False, mode: str = "bilinear") -> sp.csr_matrix:
    """(h*w, h*w) matrix M with warped.ravel() = M @ src.ravel() (one channel)."""
    sr, sc = _source_coords(h, w, spec, inverse)
    n = h * w
    out_idx = np.arange(n)
    if mode == "nearest":
        r = np.floor(sr + 0.5).astype(np.int64)
        c = np.floor(sc + 0.5).astype(np.int64)
        ok = (r >= 0) & (r < h) & (c >= 0) & (c < w)
        return sp.csr_matrix((np.ones(ok.sum()), (out_idx[ok], (r * w + c)[ok])), shape=(n, n))
    if mode != "bilinear":
        raise ValueError(f"unknown interpolation mode {mode!r}")
    r0 = np.floor(sr).astype(np.int64)
    c0 = np.floor(sc).astype(np.int64)
    fr, fc = sr - r0, sc - c0
    rows_l, cols_l, vals_l = [], [], []
    for dr, dcol, wt in ((0, 0, (1 - fr) * (1 - fc)), (0, 1, (1 - fr) * fc), (1, 0, fr * (1 - fc)), (1, 1, fr * fc)):
        r, c = r0 + dr, c0 + dcol
        ok = (r >= 0) & (r < h) & (c >= 0) & (c < w) & (wt != 0)
        rows_l.append(out_idx[ok])
        cols_l.append((r * w + c)[ok])
        vals_l.append(wt[ok])
    return sp.csr_matrix(
        (np.concatenate(vals_l), (np.concatenate(rows_l), np.concatenate(cols_l))), shape=(n, n)
    )


def warp_array(data: np.ndarray, spec: WarpSpec, channels: np.ndarray | None = None,
               inverse: bool = False, mode: str = "bilinear") -> np.ndarray:
    h, w, c = data.shape
    sel = np.ones(c, dtype=bool) if channels is None else np.asarray(channels, dtype=bool)
    out = data.copy()
    if spec.is_identity or not sel.any():
        return out
    m = sampling_matrix(h, w, spec, inverse, mode)
    idx = np.flatnonzero(sel)
    flat = data.reshape(h * w, c)[:, idx].astype(np.float64)
    res = np.clip(m @ flat, 0.0, 1.0)
    out.reshape(h * w, c)[:, idx] = res.astype(data.dtype)
    return out


def warp(src: Ogm, spec: WarpSpec, channels: np.ndarray | None = None,
         inverse: bool = False, mode: str | None = None) -> Ogm:
    """Rigid warp of the selected channels; other channels are copied verbatim."""
    mode = mode or ("nearest" if src.value_mode == "binary" else "bilinear")
    return src.with_data(warp_array(src.data, spec, channels, inverse, mode))


def warp_tensor(x: dc.Tensor, specs, channels: np.ndarray | None = None,
                inverse: bool = False, mode: str = "bilinear") -> dc.Tensor:
    """Differentiable batched warp of an (N, H, W, C) tensor, one spec per item."""
    _, h, w, _ = x.shape
    mats = [None if (s is None or s.is_identity) else sampling_matrix(h, w, s, inverse, mode) for s in specs]
    if all(m is None for m in mats):
        return x
    return dc.sparse_apply(x, mats, channels)


def _spec(frame: Ogm, d: PoseDelta) -> WarpSpec:
    return WarpSpec.from_pose_delta(d, frame.meters_per_pixel, frame.ego_anchor)


def iot1(i_t: Ogm, d: PoseDelta, mode: str | None = None) -> Ogm:
    """Move the ego channel(s) to the anticipated pose; everything else untouched."""
    ego = i_t.channel_mask("ego")
    if not ego.any():
        raise ValueError("iot1: frame has no ego channel")
    return warp(i_t, _spec(i_t, d), ego, mode=mode)


def iot2(i_next: Ogm, d: PoseDelta, mode: str | None = None) -> Ogm:
    """Express the next ego-centred frame in the anticipated-pose frame of step t."""
    return warp(i_next, _spec(i_next, d), None, mode=mode)


def oot(pred: Ogm, d: PoseDelta, mode: str | None = None) -> Ogm:
    """Inverse of :func:`iot2`: put the ego back at its anchor."""
    return warp(pred, _spec(pred, d), None, inverse=True, mode=mode)


def pad(src: Ogm, pad_px: int) -> Ogm:
    if pad_px < 0:
        raise ValueError("pad must be non-negative")
    if pad_px == 0:
        return src.with_data(src.data.copy())
    data = np.pad(src.data, [(pad_px, pad_px), (pad_px, pad_px), (0, 0)])
    r, c = src.ego_anchor
    return replace(src, data=data, ego_anchor=(r + pad_px, c + pad_px))


def crop(src: Ogm, pad_px: int) -> Ogm:
    if pad_px < 0:
        raise ValueError("pad must be non-negative")
    if pad_px == 0:
        return src.with_data(src.data.copy())
    data = src.data[pad_px:-pad_px, pad_px:-pad_px].copy()
    r, c = src.ego_anchor
    return replace(src, data=data, ego_anchor=(r - pad_px, c - pad_px))


def frame_diff(a: Ogm, b: Ogm) -> DiffFrame:
    if a.data.shape != b.data.shape or a.meters_per_pixel != b.meters_per_pixel:
        raise ValueError(f"frame_diff: shape mismatch {a.data.shape} vs {b.data.shape}")
    return DiffFrame(a.data - b.data, a.ego_anchor, a.meters_per_pixel)


# ---------------------------------------------------------------- rasterising

def rect_coverage(h: int, w: int, center: tuple[float, float], length_px: float, width_px: float,
                  angle: float = 0.0, supersample: int = 4) -> np.ndarray:
    """Fractional coverage of an oriented rectangle on an (h, w) pixel grid.

    ``center`` is (row, col) in pixel units (pixel centres at integers),
    ``length_px`` runs along the rectangle's heading, which is rotated by
    ``angle`` from screen-up (positive = counter-clockwise).  Axis-aligned
    rectangles get exact interval-overlap coverage; rotated ones are
    supersampled.
    """
    cr, cc = center
    half_l, half_w = length_px / 2.0, width_px / 2.0
    if angle == 0.0:
        rows = np.arange(h, dtype=np.float64)
        cols = np.arange(w, dtype=np.float64)
        cov_r = np.clip(np.minimum(rows + 0.5, cr + half_l) - np.maximum(rows - 0.5, cr - half_l), 0, 1)
        cov_c = np.clip(np.minimum(cols + 0.5, cc + half_w) - np.maximum(cols - 0.5, cc - half_w), 0, 1)
        return np.outer(cov_r, cov_c)
    reach = math.hypot(half_l, half_w) + 1
    r_lo, r_hi = max(0, int(math.floor(cr - reach))), min(h, int(math.ceil(cr + reach)) + 1)
    c_lo, c_hi = max(0, int(math.floor(cc - reach))), min(w, int(math.ceil(cc + reach)) + 1)
    out = np.zeros((h, w))
    if r_lo >= r_hi or c_lo >= c_hi:
        return out
    offs = (np.arange(supersample) + 0.5) / supersample - 0.5
    dr = (np.arange(r_lo, r_hi)[:, None] + offs[None, :]).reshape(-1, 1) - cr
    dcol = (np.arange(c_lo, c_hi)[:, None] + offs[None, :]).reshape(1, -1) - cc
    ca, sa = math.cos(angle), math.sin(angle)
    # rectangle axes on screen: heading = (-cos a, -sin a) in (row, col)
    along = ca * dr + sa * dcol
    across = sa * dr - ca * dcol
    inside = (np.abs(along) <= half_l) & (np.abs(across) <= half_w)
    k = supersample
    cov = inside.reshape(r_hi - r_lo, k, c_hi - c_lo, k).sum(axis=(1, 3)) / (k * k)
    out[r_lo:r_hi, c_lo:c_hi] = cov
    return out


def rect_mask(h: int, w: int, center: tuple[float, float], length_px: float, width_px: float,
              angle: float = 0.0) -> np.ndarray:
    """Hard 0/1 rasterisation: a pixel is occupied iff its centre lies in the rectangle.

    Axis-aligned extents are half-open, so a rectangle of integer pixel size
    covers exactly length_px * width_px pixels wherever it sits.
    """
    cr, cc = center
    half_l, half_w = length_px / 2.0, width_px / 2.0
    rows = np.arange(h, dtype=np.float64)[:, None]
    cols = np.arange(w, dtype=np.float64)[None, :]
    if angle == 0.0:
        inside = (rows >= cr - half_l) & (rows < cr + half_l) & (cols >= cc - half_w) & (cols < cc + half_w)
        return inside.astype(np.float64)
    dr, dcol = rows - cr, cols - cc
    ca, sa = math.cos(angle), math.sin(angle)
    along = -(ca * dr + sa * dcol)
    across = sa * dr - ca * dcol
    return ((np.abs(along) <= half_l) & (np.abs(across) <= half_w)).astype(np.float64)


def render_rect(h: int, w: int, center, length_px: float, width_px: float, angle: float = 0.0,
                binary: bool = False) -> np.ndarray:
    if binary:
        return rect_mask(h, w, center, length_px, width_px, angle)
    return rect_coverage(h, w, center, length_px, width_px, angle)


def ego_footprint(h: int, w: int, anchor: tuple[int, int], length_px: float = 9, width_px: float = 4,
                  binary: bool = False) -> np.ndarray:
    return render_rect(h, w, (float(anchor[0]), float(anchor[1])), length_px, width_px, 0.0, binary)


def interior_mask(h: int, w: int, margin: int) -> np.ndarray:
    m = np.zeros((h, w), dtype=bool)
    if 2 * margin < min(h, w):
        m[margin:h - margin, margin:w - margin] = True
    return m


def centroid(channel: np.ndarray) -> tuple[float, float]:
    mass = channel.sum()
    if mass <= 0:
        return (math.nan, math.nan)
    rows, cols = np.indices(channel.shape)
    return (float((rows * channel).sum() / mass), float((cols * channel).sum() / mass))


def random_scene(rng: np.random.Generator, h: int = 64, w: int = 64, n_cars: int = 6,
                 anchor: tuple[int, int] | None = None, roles=("map", "occupancy", "ego"),
                 binary: bool = False) -> Ogm:
    """Random OGM-like frame: lane lines, car rectangles, ego footprint."""
    anchor = anchor or (h // 2, w // 2)
    data = np.zeros((h, w, len(roles)))
    for k, role in enumerate(roles):
        if role == "ego":
            data[..., k] = ego_footprint(h, w, anchor, binary=binary)
        elif role == "occupancy":
            for _ in range(n_cars):
                cr, cc = rng.uniform(0, h), rng.uniform(0, w)
                ang = rng.uniform(-0.3, 0.3) if rng.random() < 0.3 else 0.0
                cov = rect_coverage(h, w, (cr, cc), rng.uniform(7, 11), rng.uniform(3.5, 5), ang)
                data[..., k] = np.maximum(data[..., k], cov)
        elif role == "map":
            for col in rng.uniform(0, w, size=4):
                data[..., k] = np.maximum(data[..., k], rect_coverage(h, w, (h / 2, col), 4 * h, 1.0)[:, :])
    if binary:
        data = (data > 0.5).astype(np.float64)
    return Ogm(np.clip(data, 0, 1), anchor, 0.5, tuple(roles), "binary" if binary else "real")
