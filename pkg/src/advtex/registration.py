"""Registration of frames to the root texture coordinate system.

Points are ``(x, y)`` with ``x`` the column and ``y`` the row; pixel centers
sit on integer coordinates in both the frame and the root texture.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
import scipy.sparse as sp

DET_TOL = 1e-10


class DegenerateCorrespondencesError(ValueError):
    """Raised when point correspondences do not determine a homography."""


@dataclass
class PlanarCorrespondenceSet:
    root_points: np.ndarray
    frame_points: np.ndarray

    def __post_init__(self):
        self.root_points = np.asarray(self.root_points, dtype=np.float64).reshape(-1, 2)
        self.frame_points = np.asarray(self.frame_points, dtype=np.float64).reshape(-1, 2)
        if len(self.root_points) != len(self.frame_points):
            raise ValueError("root and frame point counts differ")
        if len(self.root_points) < 4:
            raise ValueError(f"need at least 4 correspondences, got {len(self.root_points)}")
        diff = self.root_points[:, None, :] - self.root_points[None, :, :]
        dist = np.sqrt((diff**2).sum(-1)) + np.eye(len(self.root_points))
        if np.any(dist < 1e-12):
            raise DegenerateCorrespondencesError("coincident root points")

    def __len__(self):
        return len(self.root_points)


@dataclass
class ViewMap:
    """Root-to-frame homography plus the relative illumination of the object."""

    homography: np.ndarray
    illumination: float = 1.0

    def __post_init__(self):
        H = np.asarray(self.homography, dtype=np.float64)
        if H.shape != (3, 3):
            raise ValueError(f"homography must be 3x3, got {H.shape}")
        if abs(H[2, 2]) < DET_TOL:
            raise DegenerateCorrespondencesError("homography cannot be canonicalized (H[2,2] == 0)")
        H = H / H[2, 2]
        if abs(np.linalg.det(H)) < DET_TOL:
            raise DegenerateCorrespondencesError("homography is singular")
        self.homography = H
        self.illumination = float(self.illumination)
        if not self.illumination > 0:
            raise ValueError(f"illumination must be positive, got {self.illumination}")

    @property
    def inverse(self) -> np.ndarray:
        Hi = np.linalg.inv(self.homography)
        return Hi / Hi[2, 2]

    def with_illumination(self, illumination: float) -> "ViewMap":
        return ViewMap(self.homography, illumination)


@dataclass
class TextureMap:
    pixels: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim == 2:
            self.pixels = self.pixels[..., None]
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != self.pixels.shape[:2]:
            raise ValueError("mask shape does not match texture")
        if not self.mask.any():
            raise ValueError("texture mask is empty")
        if self.pixels.min() < 0 or self.pixels.max() > 1:
            raise ValueError("texture values must lie in [0, 1]")

    @property
    def shape(self):
        return self.pixels.shape

    def replace(self, pixels: np.ndarray) -> "TextureMap":
        return TextureMap(pixels, self.mask)


@dataclass
class Frame:
    image: np.ndarray
    object_polygon: np.ndarray
    sequence_id: str = ""
    split: str = ""
    distance: str = ""
    condition: str = ""
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        if self.image.ndim == 2:
            self.image = self.image[..., None]
        self.object_polygon = np.asarray(self.object_polygon, dtype=np.float64).reshape(-1, 2)
        if self.image.min() < 0 or self.image.max() > 1:
            raise ValueError("frame values must lie in [0, 1]")

    @property
    def shape(self):
        return self.image.shape


def apply_homography(H: np.ndarray, points: np.ndarray) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    hom = np.c_[pts, np.ones(len(pts))] @ np.asarray(H, dtype=np.float64).T
    return hom[:, :2] / hom[:, 2:3]


def _normalizing_transform(pts: np.ndarray) -> np.ndarray:
    centroid = pts.mean(axis=0)
    mean_dist = np.sqrt(((pts - centroid) ** 2).sum(axis=1)).mean()
    if mean_dist < 1e-12:
        raise DegenerateCorrespondencesError("all points coincide")
    s = np.sqrt(2.0) / mean_dist
    return np.array([[s, 0, -s * centroid[0]], [0, s, -s * centroid[1]], [0, 0, 1.0]])


def estimate_homography(corr: PlanarCorrespondenceSet) -> np.ndarray:
    """Normalized DLT estimate of the root-to-frame homography.

    Returns the canonical matrix (bottom-right entry 1). Raises
    :class:`DegenerateCorrespondencesError` if the design matrix is rank
    deficient or the solution is singular.
    """
    src, dst = corr.root_points, corr.frame_points
    Ts, Td = _normalizing_transform(src), _normalizing_transform(dst)
    s = apply_homography(Ts, src)
    d = apply_homography(Td, dst)

    n = len(s)
    A = np.zeros((2 * n, 9))
    x, y = s[:, 0], s[:, 1]
    u, v = d[:, 0], d[:, 1]
    A[0::2, 0:3] = np.c_[-x, -y, -np.ones(n)]
    A[0::2, 6:9] = np.c_[u * x, u * y, u]
    A[1::2, 3:6] = np.c_[-x, -y, -np.ones(n)]
    A[1::2, 6:9] = np.c_[v * x, v * y, v]

    _, sv, Vt = np.linalg.svd(A)
    # a unique solution needs a one-dimensional null space
    if sv[7] < 1e-10 * sv[0]:
        raise DegenerateCorrespondencesError("degenerate correspondences: rank-deficient design matrix")
    Hn = Vt[-1].reshape(3, 3)
    H = np.linalg.inv(Td) @ Hn @ Ts
    if abs(H[2, 2]) < DET_TOL * np.abs(H).max():
        raise DegenerateCorrespondencesError("degenerate correspondences: H[2,2] vanishes")
    H = H / H[2, 2]
    if abs(np.linalg.det(H)) < DET_TOL:
        raise DegenerateCorrespondencesError("degenerate correspondences: singular homography")
    return H


def view_from_vertices(root_vertices, frame_vertices, illumination: float = 1.0) -> ViewMap:
    H = estimate_homography(PlanarCorrespondenceSet(root_vertices, frame_vertices))
    return ViewMap(H, illumination)


def polygon_area(polygon: np.ndarray) -> float:
    x, y = np.asarray(polygon, dtype=np.float64).T
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def polygon_interior(polygon: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Boolean mask of pixel centers strictly inside ``polygon`` (even-odd rule)."""
    h, w = shape
    poly = np.asarray(polygon, dtype=np.float64).reshape(-1, 2)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    inside = np.zeros((h, w), dtype=bool)
    on_edge = np.zeros((h, w), dtype=bool)
    for (x0, y0), (x1, y1) in zip(poly, np.roll(poly, -1, axis=0)):
        crosses = (y0 > ys) != (y1 > ys)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_cross = x0 + (ys - y0) * (x1 - x0) / (y1 - y0)
        inside ^= crosses & (xs < x_cross)
        # points lying on the segment itself are excluded
        ex, ey = x1 - x0, y1 - y0
        length2 = ex * ex + ey * ey
        cross = (xs - x0) * ey - (ys - y0) * ex
        dot = (xs - x0) * ex + (ys - y0) * ey
        on_edge |= (np.abs(cross) <= 1e-9 * max(length2, 1.0)) & (dot >= 0) & (dot <= length2)
    return inside & ~on_edge


def estimate_illumination(frame: Frame) -> float:
    """Mean channel-averaged intensity over pixels strictly inside the object polygon."""
    h, w = frame.image.shape[:2]
    poly = frame.object_polygon.copy()
    poly[:, 0] = np.clip(poly[:, 0], 0, w - 1)
    poly[:, 1] = np.clip(poly[:, 1], 0, h - 1)
    if polygon_area(poly) <= 0:
        raise ValueError("object polygon has zero area")
    inside = polygon_interior(poly, (h, w))
    if not inside.any():
        raise ValueError("object polygon contains no pixel centers")
    return float(frame.image[inside].mean(axis=1).mean())


class WarpOperator:
    """Sparse bilinear warp from root texture coordinates into one frame.

    Row ``p`` of :attr:`matrix` holds the bilinear weights of frame pixel
    ``p`` on the texels around its inverse-mapped center. Only pixels whose
    center maps onto a masked texel (nearest-texel test) have nonzero rows.
    """

    def __init__(self, homography: np.ndarray, texture_mask: np.ndarray, frame_shape: Sequence[int]):
        self.homography = np.asarray(homography, dtype=np.float64)
        self.texture_mask = np.asarray(texture_mask, dtype=bool)
        self.frame_hw = tuple(int(s) for s in frame_shape[:2])
        self._build()

    def _build(self):
        h, w = self.frame_hw
        Ht, Wt = self.texture_mask.shape
        Hinv = np.linalg.inv(self.homography)
        ys, xs = np.mgrid[0:h, 0:w]
        pts = np.stack([xs.ravel(), ys.ravel(), np.ones(h * w)], axis=1).astype(np.float64)
        q = pts @ Hinv.T
        denom = q[:, 2]
        front = denom > 1e-12
        safe = np.where(front, denom, 1.0)
        u, v = q[:, 0] / safe, q[:, 1] / safe

        ni, nj = np.floor(v + 0.5), np.floor(u + 0.5)
        valid = front & (ni >= 0) & (ni < Ht) & (nj >= 0) & (nj < Wt)
        hit = np.zeros(h * w, dtype=bool)
        hit[valid] = self.texture_mask[ni[valid].astype(int), nj[valid].astype(int)]
        self.pixels = np.flatnonzero(hit)
        self.region = hit.reshape(h, w)

        u, v = u[hit], v[hit]
        u0, v0 = np.floor(u), np.floor(v)
        fu, fv = u - u0, v - v0
        rows, cols, vals = [], [], []
        for du, dv, wgt in ((0, 0, (1 - fu) * (1 - fv)), (1, 0, fu * (1 - fv)),
                            (0, 1, (1 - fu) * fv), (1, 1, fu * fv)):
            cu, cv = u0 + du, v0 + dv
            inb = (cu >= 0) & (cu < Wt) & (cv >= 0) & (cv < Ht)
            rows.append(self.pixels[inb])
            cols.append((cv[inb] * Wt + cu[inb]).astype(np.int64))
            vals.append(wgt[inb])
        self.matrix = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(h * w, Ht * Wt),
        )

    @cached_property
    def adjoint_matrix(self) -> sp.csr_matrix:
        return self.matrix.T.tocsr()

    @cached_property
    def region_matrix(self) -> sp.csr_matrix:
        """Rows of :attr:`matrix` for the warped-region pixels only (row-major order)."""
        return self.matrix[self.pixels]

    @cached_property
    def region_adjoint(self) -> sp.csr_matrix:
        return self.region_matrix.T.tocsr()

    def apply_region(self, texture: np.ndarray) -> np.ndarray:
        """Samples at the warped-region pixels, shape (n_region, C); matches ``image[region]``."""
        return self.region_matrix @ texture.reshape(-1, texture.shape[2])

    def adjoint_region(self, values: np.ndarray) -> np.ndarray:
        out = self.region_adjoint @ values
        return out.reshape(*self.texture_mask.shape, values.shape[1])

    def apply(self, texture: np.ndarray) -> np.ndarray:
        """Bilinear samples of ``texture`` at every frame pixel (zero off-region)."""
        C = texture.shape[2]
        out = self.matrix @ texture.reshape(-1, C)
        return out.reshape(*self.frame_hw, C)

    def adjoint(self, frame_values: np.ndarray) -> np.ndarray:
        C = frame_values.shape[2]
        out = self.adjoint_matrix @ frame_values.reshape(-1, C)
        return out.reshape(*self.texture_mask.shape, C)


def composite(frame: Frame | np.ndarray, texture: TextureMap, view: ViewMap,
              base: np.ndarray | None = None, warp: WarpOperator | None = None) -> np.ndarray:
    """Superimpose ``texture`` on the frame through ``view``.

    Without ``base`` the warped region is replaced by the bilinear sample of
    ``illumination * texture``. With ``base`` (the unperturbed texture) only
    the illumination-scaled perturbation ``texture - base`` is added to the
    frame, so ``texture == base`` reproduces the frame exactly. Pixels
    outside the warped mask are returned untouched; output is clipped to [0, 1].
    """
    image = frame.image if isinstance(frame, Frame) else np.asarray(frame, dtype=np.float64)
    if image.ndim == 2:
        image = image[..., None]
    if warp is None:
        warp = WarpOperator(view.homography, texture.mask, image.shape)
    out = image.copy()
    r = warp.region
    if base is None:
        out[r] = np.clip(view.illumination * warp.apply(texture.pixels)[r], 0.0, 1.0)
    else:
        delta = texture.pixels - np.asarray(base, dtype=np.float64)
        out[r] = np.clip(image[r] + view.illumination * warp.apply(delta)[r], 0.0, 1.0)
    return out


def backproject_gradient(frame_gradient: np.ndarray, view: ViewMap, texture_mask: np.ndarray,
                         warp: WarpOperator | None = None) -> np.ndarray:
    """Map a frame-space gradient to root coordinates (adjoint of :func:`composite`'s warp).

    The illumination factor is applied and the result is cropped to the
    texture mask.
    """
    g = np.asarray(frame_gradient, dtype=np.float64)
    if g.ndim == 2:
        g = g[..., None]
    if warp is None:
        warp = WarpOperator(view.homography, texture_mask, g.shape)
    grad = view.illumination * warp.adjoint(g)
    grad[~np.asarray(texture_mask, dtype=bool)] = 0.0
    return grad


def merge_gradients(grads: Sequence[np.ndarray]) -> np.ndarray:
    """Elementwise mean, reduced in list order."""
    if len(grads) == 0:
        raise ValueError("no gradients to merge")
    shape = np.shape(grads[0])
    total = np.zeros(shape, dtype=np.float64)
    for g in grads:
        if np.shape(g) != shape:
            raise ValueError("gradient shapes differ")
        total += g
    return total / len(grads)
