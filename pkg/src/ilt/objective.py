"""Loss, Adam, and the curvilinear mask optimization loop.

The loop has three phases:

1. retarget the design (corner rounding), downsample it by ``s`` and use
   it as the initial mask;
2. ``T`` Adam steps on the unconstrained mask ``M``; every
   ``t_morph_step`` epochs past ``t_morph`` the relaxed mask goes through
   a differentiable open/close merge before simulation;
3. bicubic upsampling back to full resolution, binarization at ``m_s`` and
   a final binary open/close cleanup.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
import scipy.fft
from scipy.special import expit

from .errors import ConfigError, DimensionError, DivergenceError, ValidationError
from .litho import LithoConfig, corners_vjp, print_corners, sigmoid_vjp, simulate_corners
from .metrics import EpeSpec, MetricBundle, evaluate, mse
from .morph import binary_closing, binary_merge, binary_opening, cdr, smooth_merge, smooth_merge_vjp
from .raster import (
    BinaryImage,
    GrayImage,
    PolygonLayout,
    binarize,
    downsample,
    upsample_bicubic,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptConfig:
    T: int = 200
    beta1: float = 4.0
    beta2: float = 50.0
    beta3: float = 1e-3
    lr: float = 1.0
    s: int = 4
    k_cvx: int = 39
    k_ccv: int = 39
    k_morph: int = 11
    m_s: float = 0.5
    t_morph: int = 30
    t_morph_step: int = 10
    k_freq: int | None = None  # None: the kernel window size
    adam_b1: float = 0.9
    adam_b2: float = 0.999
    adam_eps: float = 1e-8
    corner_radius: float = 2.0  # optimization-grid pixels, for the gradient-share trace
    skip_cdr: bool = False
    skip_morph: bool = False
    skip_inloop_morph: bool = False

    def __post_init__(self):
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(int(self.T) == self.T and self.T >= 1, f"T must be an integer >= 1, got {self.T}")
        need(int(self.s) == self.s and self.s >= 1, f"s must be an integer >= 1, got {self.s}")
        for name in ("k_cvx", "k_ccv", "k_morph"):
            k = getattr(self, name)
            need(int(k) == k and k >= 1 and k % 2 == 1, f"{name} must be an odd positive integer, got {k}")
        need(0 < self.m_s < 1, f"m_s must lie in (0, 1), got {self.m_s}")
        need(int(self.t_morph_step) == self.t_morph_step and self.t_morph_step >= 1,
             f"t_morph_step must be an integer >= 1, got {self.t_morph_step}")
        need(self.t_morph >= 0, f"t_morph must be >= 0, got {self.t_morph}")
        need(self.k_freq is None or (int(self.k_freq) == self.k_freq and self.k_freq >= 1),
             f"k_freq must be an integer >= 1, got {self.k_freq}")
        need(self.beta1 > 0 and self.beta2 > 0, "beta1 and beta2 must be positive")
        need(self.beta3 >= 0 and self.lr >= 0, "beta3 and lr must be nonnegative")
        need(0 <= self.adam_b1 < 1 and 0 <= self.adam_b2 < 1 and self.adam_eps > 0,
             "Adam constants out of range")
        need(self.corner_radius >= 0, "corner_radius must be nonnegative")

    @property
    def post_disc(self) -> int:
        """Full-resolution cleanup disc; ``s * k_morph`` rounded up to odd."""
        k = self.s * self.k_morph
        return k if k % 2 else k + 1

    def replace(self, **changes) -> "OptConfig":
        return dataclasses.replace(self, **changes)


# --------------------------------------------------------------------------
# Loss terms
# --------------------------------------------------------------------------

def _lowfreq_mask(shape: tuple[int, int], k_freq: int) -> np.ndarray:
    """1 on modes outside the DC-centered k x k block (unshifted FFT layout)."""
    h, w = shape
    keep = np.ones(shape, dtype=bool)
    rows = (np.arange(k_freq) - k_freq // 2) % h
    cols = (np.arange(k_freq) - k_freq // 2) % w
    keep[np.ix_(rows, cols)] = False
    return keep


def highfreq_penalty(mc: GrayImage | np.ndarray, k_freq: int) -> tuple[float, np.ndarray]:
    """Spectral energy outside the k_freq x k_freq low-frequency block.

    The transform is orthonormal, so the penalty is in the same units as
    ``sum(mc**2)`` (Parseval) and independent of the grid size.
    """
    data = np.asarray(mc.data if isinstance(mc, GrayImage) else mc, dtype=np.float64)
    if k_freq > min(data.shape):
        raise ValidationError(f"k_freq={k_freq} exceeds the grid side {min(data.shape)}")
    spectrum = scipy.fft.fft2(data, norm="ortho")
    spectrum *= _lowfreq_mask(data.shape, k_freq)
    value = float(np.sum(spectrum.real**2 + spectrum.imag**2))
    grad = 2.0 * scipy.fft.ifft2(spectrum, norm="ortho").real
    return value, grad


class LossTerms(NamedTuple):
    total: float
    l2: float
    pvb: float
    hf: float


class LossPartials(NamedTuple):
    d_nom: np.ndarray
    d_max: np.ndarray
    d_min: np.ndarray
    d_mc: np.ndarray


def _arr(img) -> np.ndarray:
    return np.asarray(img.data if hasattr(img, "data") else img, dtype=np.float64)


def ilt_loss(z_nom, z_max, z_min, target_s, mc, cfg: OptConfig, k_freq: int | None = None):
    z_nom, z_max, z_min, target_s, mc = map(_arr, (z_nom, z_max, z_min, target_s, mc))
    if not (z_nom.shape == z_max.shape == z_min.shape == target_s.shape == mc.shape):
        raise DimensionError("ilt_loss inputs must share one grid")
    r_nom = z_nom - target_s
    band = z_max - z_min
    l2 = float(np.sum(r_nom**2))
    pvb = float(np.sum(band**2))
    if cfg.beta3:
        hf, hf_grad = highfreq_penalty(mc, k_freq if k_freq is not None else cfg.k_freq)
    else:
        hf, hf_grad = 0.0, np.zeros_like(mc)
    total = l2 + pvb + cfg.beta3 * hf
    partials = LossPartials(2.0 * r_nom, 2.0 * band, -2.0 * band, cfg.beta3 * hf_grad)
    return LossTerms(total, l2, pvb, hf), partials


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, shape) -> "AdamState":
        return cls(np.zeros(shape), np.zeros(shape), 0)


def adam_step(state: AdamState, grad, lr: float, b1: float = 0.9, b2: float = 0.999,
              eps: float = 1e-8) -> np.ndarray:
    """Advance ``state`` in place and return the step the caller subtracts."""
    g = _arr(grad)
    if g.shape != state.m.shape:
        raise DimensionError(f"gradient shape {g.shape} does not match state {state.m.shape}")
    state.t += 1
    state.m *= b1
    state.m += (1.0 - b1) * g
    state.v *= b2
    state.v += (1.0 - b2) * g * g
    m_hat = state.m / (1.0 - b1**state.t)
    v_hat = state.v / (1.0 - b2**state.t)
    return lr * m_hat / (np.sqrt(v_hat) + eps)


# --------------------------------------------------------------------------
# Corner gradient diagnostic
# --------------------------------------------------------------------------

def target_corners(target: BinaryImage) -> np.ndarray:
    """Grid-vertex coordinates (row, col) where the target boundary turns.

    A vertex is a corner when its surrounding 2x2 pixel block holds one or
    three set pixels, or two set pixels on a diagonal.
    """
    t = np.pad(target.data.astype(np.int8), 1)
    a, b = t[:-1, :-1], t[:-1, 1:]
    c, d = t[1:, :-1], t[1:, 1:]
    total = a + b + c + d
    diagonal = (total == 2) & (a == d)
    return np.argwhere((total == 1) | (total == 3) | diagonal)


def corner_region(target: BinaryImage, radius: float) -> np.ndarray:
    """Pixels whose center is within Chebyshev ``radius`` of a target corner."""
    h, w = target.shape
    region = np.zeros((h, w), dtype=bool)
    for i, j in target_corners(target):
        r0, r1 = max(int(math.ceil(i - 0.5 - radius)), 0), min(int(math.floor(i - 0.5 + radius)), h - 1)
        c0, c1 = max(int(math.ceil(j - 0.5 - radius)), 0), min(int(math.floor(j - 0.5 + radius)), w - 1)
        if r0 <= r1 and c0 <= c1:
            region[r0:r1 + 1, c0:c1 + 1] = True
    return region


def corner_gradient_share(grad, target: BinaryImage, corner_radius: float,
                          region: np.ndarray | None = None) -> float:
    g = _arr(grad)
    if g.shape != target.shape:
        raise DimensionError(f"gradient shape {g.shape} does not match target {target.shape}")
    total = float(np.linalg.norm(g))
    if total == 0.0:
        return 0.0
    if region is None:
        region = corner_region(target, corner_radius)
    return float(np.linalg.norm(g[region])) / total


# --------------------------------------------------------------------------
# Optimization loop
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    loss_total: float
    loss_l2: float
    loss_pvb: float
    loss_hf: float
    grad_norm: float
    grad_corner_share: float
    morph_applied: bool


TRACE_FIELDS = ["epoch", "loss_total", "loss_l2", "loss_pvb", "loss_hf", "grad_norm", "grad_corner_share"]


@dataclass
class OptResult:
    final_mask: BinaryImage
    metrics: MetricBundle
    trace: list[EpochRecord]
    retarget: BinaryImage
    opt_mask: GrayImage  # relaxed mask on the optimization grid after the last step
    initial_mse: float  # epoch-0 MSE: the initial mask taken through phase 3 unoptimized
    seconds: dict = field(default_factory=dict)


@dataclass(frozen=True)
class Snapshot:
    epoch: int
    mask_c: np.ndarray
    z_nom: np.ndarray
    z_max: np.ndarray
    z_min: np.ndarray


def write_trace_csv(trace: list[EpochRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_FIELDS)
        for rec in trace:
            writer.writerow([rec.epoch] + [repr(getattr(rec, f)) for f in TRACE_FIELDS[1:]])


def read_trace_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()} for row in rows]


def _check_problem(target: BinaryImage, cfg: OptConfig, litho: LithoConfig):
    h, w = target.shape
    if h % cfg.s or w % cfg.s:
        raise ConfigError(f"target grid {w}x{h} is not divisible by s={cfg.s}")
    side = min(h, w) // cfg.s
    if side < litho.corners.freq_dim:
        raise ConfigError(
            f"optimization grid side {side} is smaller than the kernel window {litho.corners.freq_dim}"
        )
    if cfg.k_freq is not None and cfg.k_freq > side:
        raise ConfigError(f"k_freq={cfg.k_freq} exceeds the optimization grid side {side}")


class ObjectiveEval(NamedTuple):
    terms: LossTerms
    grad: np.ndarray  # d(loss)/dM on the optimization grid
    mask_c: np.ndarray
    z_nom: np.ndarray
    z_max: np.ndarray
    z_min: np.ndarray


def objective_and_grad(mask: np.ndarray, target_s: GrayImage, cfg: OptConfig, litho: LithoConfig,
                       k_freq: int, morph: bool = False) -> ObjectiveEval:
    """Loss of the unconstrained mask ``M`` and its gradient, one forward/backward pass.

    ``litho.beta2`` is used as given; ``morph`` routes the relaxed mask
    through the differentiable open/close merge.
    """
    mc0 = expit(cfg.beta1 * (mask - cfg.m_s))
    if morph:
        mc, merge_tape = smooth_merge(mc0, cfg.k_morph)
    else:
        mc = mc0
    z_nom, z_max, z_min, tapes = simulate_corners(target_s.with_data(mc), litho)
    terms, parts = ilt_loss(z_nom, z_max, z_min, target_s, mc, cfg, k_freq)
    g_mc = corners_vjp(tapes, (z_nom, z_max, z_min), parts[:3], litho) + parts.d_mc
    if morph:
        g_mc = smooth_merge_vjp(merge_tape, g_mc)
    grad = sigmoid_vjp(mc0, g_mc, cfg.beta1)
    return ObjectiveEval(terms, grad, mc, z_nom.data, z_max.data, z_min.data)


def curvy_ilt(
    target: BinaryImage,
    cfg: OptConfig,
    litho: LithoConfig,
    layout: PolygonLayout | None = None,
    epe_spec: EpeSpec = EpeSpec(),
    on_snapshot: Callable[[Snapshot], None] | None = None,
    snapshot_every: int = 10,
) -> OptResult:
    _check_problem(target, cfg, litho)
    clock = {}
    start = time.perf_counter()
    opt_litho = dataclasses.replace(litho, beta2=cfg.beta2)
    k_freq = cfg.k_freq if cfg.k_freq is not None else litho.corners.freq_dim

    # phase 1: design preprocessing
    retarget = target if cfg.skip_cdr else cdr(target, cfg.k_cvx, cfg.k_ccv)
    target_s = downsample(retarget, cfg.s)
    mask = target_s.data.copy()
    corners_target = binarize(downsample(target, cfg.s), 0.5)
    region = corner_region(corners_target, cfg.corner_radius)
    inloop = not (cfg.skip_morph or cfg.skip_inloop_morph)
    clock["preprocess"] = time.perf_counter() - start

    # phase 2: optimization
    t0 = time.perf_counter()
    state = AdamState.zeros(mask.shape)
    trace: list[EpochRecord] = []
    for epoch in range(1, cfg.T + 1):
        applied = inloop and epoch > cfg.t_morph and epoch % cfg.t_morph_step == 0
        if not np.all(np.isfinite(mask)):
            raise DivergenceError(f"non-finite mask entering epoch {epoch}", trace)
        step = objective_and_grad(mask, target_s, cfg, opt_litho, k_freq, applied)
        terms, grad = step.terms, step.grad
        if not math.isfinite(terms.total):
            raise DivergenceError(f"non-finite loss at epoch {epoch}", trace)
        record = EpochRecord(
            epoch=epoch,
            loss_total=terms.total,
            loss_l2=terms.l2,
            loss_pvb=terms.pvb,
            loss_hf=terms.hf,
            grad_norm=float(np.linalg.norm(grad)),
            grad_corner_share=corner_gradient_share(grad, corners_target, cfg.corner_radius, region),
            morph_applied=applied,
        )
        trace.append(record)
        if on_snapshot is not None and (epoch % snapshot_every == 0 or epoch == cfg.T):
            on_snapshot(Snapshot(epoch, step.mask_c, step.z_nom, step.z_max, step.z_min))
        mask -= adam_step(state, grad, cfg.lr, cfg.adam_b1, cfg.adam_b2, cfg.adam_eps)
        if epoch == 1 or epoch % 10 == 0:
            log.debug("epoch %d loss %.6g (l2 %.6g pvb %.6g hf %.6g)", epoch, *terms)
    clock["optimize"] = time.perf_counter() - t0

    # phase 3: back to full resolution, binarize, clean up
    t0 = time.perf_counter()
    final = postprocess(target_s.with_data(mask), cfg)
    clock["postprocess"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    metrics = evaluate(final, target, litho, epe_spec, layout)
    initial = mse(print_corners(postprocess(target_s, cfg), litho)[0], target)
    clock["evaluate"] = time.perf_counter() - t0
    clock["total"] = time.perf_counter() - start
    return OptResult(
        final_mask=final,
        metrics=metrics,
        trace=trace,
        retarget=retarget,
        opt_mask=target_s.with_data(expit(cfg.beta1 * (mask - cfg.m_s))),
        initial_mse=initial,
        seconds=clock,
    )


def postprocess(mask: GrayImage, cfg: OptConfig) -> BinaryImage:
    """Upsample the mask parameters, binarize at ``m_s`` and apply the final cleanup."""
    full = binarize(upsample_bicubic(mask, cfg.s), cfg.m_s)
    if cfg.skip_morph:
        return full
    k = cfg.post_disc
    merged = binary_merge(full, binary_opening(full, k), binary_closing(full, k))
    return binary_closing(binary_opening(merged, k), k)
