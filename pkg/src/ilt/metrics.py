"""Print and mask quality metrics: MSE, PV band, EPE violations, MSA, MSD."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import DimensionError, ValidationError
from .raster import BinaryImage, PolygonLayout, rasterize

__all__ = [
    "MetricBundle",
    "ComponentLabels",
    "EpeSpec",
    "EpeSample",
    "mse",
    "pvband",
    "epe_samples",
    "epe_violations",
    "connected_components",
    "msa",
    "msd",
    "evaluate",
]


@dataclass(frozen=True)
class MetricBundle:
    mse: float
    pvb_nm2: float
    epev: int
    msa_nm2: float
    msd_nm: float

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0 or math.isnan(value):
                raise ValidationError(f"metric {name} must be >= 0, got {value}")

    def as_row(self, case: str = "") -> dict:
        """JSON/CSV row; infinite sentinels (no shapes / single shape) become None."""
        def finite(v):
            return None if math.isinf(v) else v

        return {
            "case": case,
            "mse": self.mse,
            "pv": self.pvb_nm2,
            "epe": self.epev,
            "msa": finite(self.msa_nm2),
            "msd": finite(self.msd_nm),
        }


@dataclass(frozen=True, eq=False)
class ComponentLabels:
    labels: np.ndarray
    count: int
    sizes: np.ndarray


@dataclass(frozen=True)
class EpeSpec:
    sample_spacing_nm: float = 40.0
    threshold_nm: float = 15.0
    corner_exclusion_nm: float = 20.0
    search_limit_nm: float = 60.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not value > 0:
                raise ValidationError(f"{name} must be positive, got {value}")


def _same_grid(a, b):
    if a.shape != b.shape:
        raise DimensionError(f"grid mismatch: {a.shape} vs {b.shape}")


def mse(z: BinaryImage, target: BinaryImage) -> float:
    """Number of pixels where the print and the target differ."""
    _same_grid(z, target)
    return float(np.count_nonzero(z.data != target.data))


def pvband(z_outer: BinaryImage, z_inner: BinaryImage) -> float:
    _same_grid(z_outer, z_inner)
    return float(np.count_nonzero(z_outer.data != z_inner.data)) * z_outer.spec.nm_per_px**2


# --------------------------------------------------------------------------
# EPE
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class EpeSample:
    x_nm: float
    y_nm: float
    horizontal: bool  # edge direction
    epe_nm: float  # signed, + means printed outside the target; nan if no contour found
    violation: bool


def _runs(mask_row: np.ndarray):
    """(start, stop) of each run of True values."""
    padded = np.concatenate(([False], mask_row, [False]))
    edges = np.flatnonzero(padded[1:] != padded[:-1])
    return zip(edges[0::2], edges[1::2])


def target_edges(target: BinaryImage):
    """Maximal straight boundary runs of a binary target.

    Yields ``(horizontal, line, start, stop, inward)`` in pixel units:
    ``line`` is the boundary index (between pixel ``line-1`` and ``line``),
    ``[start, stop)`` the covered pixel span, and ``inward`` = +1 when the
    inside lies at index ``line`` and -1 when it lies at ``line-1``.
    """
    t = target.data.astype(np.int8)
    for horizontal, arr in ((True, t), (False, t.T)):
        padded = np.pad(arr, ((1, 1), (0, 0)))
        diff = padded[1:] - padded[:-1]
        for line in range(diff.shape[0]):
            for inward in (1, -1):
                for start, stop in _runs(diff[line] == inward):
                    yield horizontal, line, int(start), int(stop), inward


def _walk(profile: np.ndarray, inner: int, inward: int, limit: int):
    """Signed pixel offset of the printed contour from the edge, or None."""
    n = profile.shape[0]

    def value(idx):
        return profile[idx] if 0 <= idx < n else 0

    if value(inner):
        step, idx, count = -inward, inner - inward, 0
        while value(idx):
            count += 1
            if count > limit:
                return None
            idx += step
        return count
    idx, count = inner, 0
    while not value(idx):
        count += 1
        if count > limit or not (0 <= idx < n):
            return None
        idx += inward
    return -count


def epe_samples(z_nom: BinaryImage, target: PolygonLayout | BinaryImage, spec: EpeSpec = EpeSpec()):
    if isinstance(target, PolygonLayout):
        target = rasterize(target, z_nom.spec)
    _same_grid(z_nom, target)
    p = z_nom.spec.nm_per_px
    limit = int(math.ceil(spec.search_limit_nm / p))
    data = z_nom.data
    samples = []
    for horizontal, line, start, stop, inward in target_edges(target):
        a, b = start * p, stop * p
        positions = np.arange(a + spec.corner_exclusion_nm, b - spec.corner_exclusion_nm + 1e-9,
                              spec.sample_spacing_nm)
        if positions.size == 0:
            positions = np.array([(a + b) / 2])
        inner = line if inward > 0 else line - 1
        for pos in positions:
            cell = min(max(int(pos / p), start), stop - 1)
            profile = data[:, cell] if horizontal else data[cell, :]
            offset = _walk(profile, inner, inward, limit)
            epe = math.nan if offset is None else offset * p
            violation = offset is None or abs(epe) > spec.threshold_nm
            xy = (pos, line * p) if horizontal else (line * p, pos)
            samples.append(EpeSample(xy[0], xy[1], horizontal, epe, violation))
    return samples


def epe_violations(z_nom: BinaryImage, target: PolygonLayout | BinaryImage, spec: EpeSpec = EpeSpec()) -> int:
    return sum(s.violation for s in epe_samples(z_nom, target, spec))


# --------------------------------------------------------------------------
# Mask-shape metrics
# --------------------------------------------------------------------------

def _structure(connectivity: int) -> np.ndarray:
    if connectivity == 8:
        return np.ones((3, 3), dtype=bool)
    if connectivity == 4:
        return ndimage.generate_binary_structure(2, 1)
    raise ValidationError(f"connectivity must be 4 or 8, got {connectivity}")


def connected_components(img: BinaryImage, connectivity: int = 8) -> ComponentLabels:
    """Labels numbered 1..N in first-encounter raster order."""
    labels, count = ndimage.label(img.data, structure=_structure(connectivity))
    sizes = np.bincount(labels.ravel(), minlength=count + 1)[1:]
    return ComponentLabels(labels, int(count), sizes)


def msa(mask: BinaryImage, connectivity: int = 8) -> float:
    comps = connected_components(mask, connectivity)
    if comps.count == 0:
        return math.inf
    return float(comps.sizes.min()) * mask.spec.nm_per_px**2


def _boundary(labels: np.ndarray) -> np.ndarray:
    padded = np.pad(labels, 1, constant_values=-1)
    core = padded[1:-1, 1:-1]
    edge = np.zeros(labels.shape, dtype=bool)
    for di, dj in ((0, 1), (2, 1), (1, 0), (1, 2)):
        edge |= padded[di:di + labels.shape[0], dj:dj + labels.shape[1]] != core
    return edge & (labels > 0)


def msd(mask: BinaryImage, connectivity: int = 8) -> float:
    """Smallest pixel-center distance between two different components, in nm.

    The closest pair of two pixel sets always lies on their 4-boundaries, so
    only boundary pixels are indexed; each one queries a growing number of
    neighbours until one belonging to another component turns up.
    """
    comps = connected_components(mask, connectivity)
    if comps.count < 2:
        return math.inf
    edge = _boundary(comps.labels)
    pts = np.argwhere(edge).astype(np.float64)
    owner = comps.labels[edge]
    tree = cKDTree(pts)
    best = math.inf
    pending = np.arange(len(pts))
    k = min(16, len(pts))
    while pending.size:
        dist, idx = tree.query(pts[pending], k=k)
        dist, idx = dist.reshape(len(pending), -1), idx.reshape(len(pending), -1)
        other = owner[idx] != owner[pending][:, None]
        found = other.any(axis=1)
        if found.any():
            first = other[found].argmax(axis=1)
            best = min(best, float(dist[found][np.arange(first.size), first].min()))
        if k >= len(pts):
            break
        # a row whose k-th neighbour is already farther than the best pair cannot improve it
        unresolved = ~found & (dist[:, -1] <= best)
        pending = pending[unresolved]
        k = min(2 * k, len(pts))
    return best * mask.spec.nm_per_px


def evaluate(mask: BinaryImage, target: BinaryImage, litho_cfg, epe_spec: EpeSpec = EpeSpec(),
             layout: PolygonLayout | None = None, connectivity: int = 8) -> MetricBundle:
    """Print ``mask`` at all corners with the hard resist and score it against ``target``."""
    from .litho import print_corners

    z_nom, z_outer, z_inner = print_corners(mask, litho_cfg)
    return MetricBundle(
        mse=mse(z_nom, target),
        pvb_nm2=pvband(z_outer, z_inner),
        epev=epe_violations(z_nom, layout if layout is not None else target, epe_spec),
        msa_nm2=msa(mask, connectivity),
        msd_nm=msd(mask, connectivity),
    )
