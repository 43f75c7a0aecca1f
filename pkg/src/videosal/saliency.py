"""Training losses and the saliency metric suite.

Losses are differentiable tape ops over a predicted map tensor; the
ground truth enters as a constant array.  Metrics are plain float64
functions over arrays.

Conventions, fixed here once:
  * maps compared as distributions are normalized to sum 1;
  * standard deviations are population (divide by N);
  * AUC variants are the exact rank statistic: the fraction of
    (positive, negative) value pairs won by the positive, ties counted
    half.  Computed as a full-staircase ROC sweep over all distinct
    values, which makes a constant map score exactly 0.5.
  * fixation points are (x, y) = (column, row) integer pairs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .autograd import Tensor, record
from .errors import ContractError, DegenerateMapError, DimensionError


@dataclass(frozen=True)
class LossConfig:
    epsilon: float = 1e-7

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ContractError("loss epsilon must be positive")


@dataclass
class SaliencyMap:
    """Nonnegative (H, W) grid; ``normalized`` asserts a unit total."""

    grid: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        self.grid = np.asarray(self.grid)
        if self.grid.ndim != 2:
            raise DimensionError(f"saliency map must be 2-D, got shape {self.grid.shape}")
        if (self.grid < 0).any():
            raise ContractError("saliency map entries must be nonnegative")
        if self.normalized and abs(float(self.grid.sum(dtype=np.float64)) - 1.0) > 1e-6:
            raise ContractError("normalized map must sum to 1 within 1e-6")


@dataclass
class FixationData:
    """Continuous ground-truth density plus discrete fixation points."""

    density: SaliencyMap
    points: list = field(default_factory=list)  # [(x, y), ...]

    def __post_init__(self):
        h, w = self.density.grid.shape
        for x, y in self.points:
            if not (0 <= x < w and 0 <= y < h):
                raise ContractError(f"fixation ({x}, {y}) outside {w}x{h} grid")


def _grid(m) -> np.ndarray:
    arr = m.grid if isinstance(m, SaliencyMap) else np.asarray(m)
    return arr.astype(np.float64, copy=False)


def _check_same_shape(s, g):
    if s.shape != g.shape:
        raise DimensionError(f"map shapes differ: {s.shape} vs {g.shape}")


def _degenerate(spread: float, values: np.ndarray) -> bool:
    """Zero standard deviation up to float rounding of the mean."""
    return spread <= 1e-12 * max(1.0, float(np.abs(values).max()))


# --- differentiable losses -------------------------------------------------

def loss_kl(s: Tensor, g: np.ndarray, cfg: LossConfig = LossConfig()) -> Tensor:
    """sum_i g_i * log(eps + g_i / (eps + s_i)) as a scalar tensor."""
    gv = _grid(g)
    _check_same_shape(s.data, gv)
    eps = cfg.epsilon
    ratio = gv / (eps + s.data)
    val = np.asarray([(gv * np.log(eps + ratio)).sum()], dtype=s.dtype)
    out = Tensor(val)

    def bwd(grad):
        ds = -gv * gv / ((eps + ratio) * (eps + s.data) ** 2)
        return (grad[0] * ds.astype(s.dtype),)

    record((s,), out, bwd)
    return out


def loss_cc(s: Tensor, g: np.ndarray) -> Tensor:
    """Pearson correlation between the two maps, differentiable in ``s``."""
    gv = _grid(g)
    _check_same_shape(s.data, gv)
    a = s.data - s.data.mean()
    b = gv - gv.mean()
    na = np.sqrt((a * a).sum())
    nb = np.sqrt((b * b).sum())
    if _degenerate(na, s.data) or _degenerate(nb, gv):
        raise DegenerateMapError("degenerate map: zero standard deviation")
    cc = float((a * b).sum() / (na * nb))
    out = Tensor(np.asarray([cc], dtype=s.dtype))

    def bwd(grad):
        # centering needs no correction: the per-element term already sums to 0
        ds = b / (na * nb) - cc * a / (na * na)
        return (grad[0] * ds.astype(s.dtype),)

    record((s,), out, bwd)
    return out


def loss_total(s: Tensor, g: np.ndarray, cfg: LossConfig = LossConfig()) -> Tensor:
    """KL minus CC, the training objective."""
    return ops.add(loss_kl(s, g, cfg), ops.scale(loss_cc(s, g), -1.0))


# --- evaluation metrics ----------------------------------------------------

def metric_kl(s, g, cfg: LossConfig = LossConfig()) -> float:
    sv, gv = _grid(s), _grid(g)
    _check_same_shape(sv, gv)
    eps = cfg.epsilon
    return float((gv * np.log(eps + gv / (eps + sv))).sum())


def metric_cc(s, g) -> float:
    sv, gv = _grid(s), _grid(g)
    _check_same_shape(sv, gv)
    a = sv - sv.mean()
    b = gv - gv.mean()
    na, nb = np.sqrt((a * a).sum()), np.sqrt((b * b).sum())
    if _degenerate(na, sv) or _degenerate(nb, gv):
        raise DegenerateMapError("degenerate map: zero standard deviation")
    return float((a * b).sum() / (na * nb))


def metric_sim(s, g) -> float:
    """Histogram intersection of two normalized maps; in [0, 1]."""
    sv, gv = _grid(s), _grid(g)
    _check_same_shape(sv, gv)
    return float(np.minimum(sv, gv).sum())


def _fixation_values(s: np.ndarray, points) -> np.ndarray:
    return np.asarray([s[y, x] for x, y in points], dtype=np.float64)


def metric_nss(s, fix: FixationData) -> float:
    """Mean of the zero-mean/unit-sd standardized map at fixation points."""
    sv = _grid(s)
    if not fix.points:
        raise DegenerateMapError("NSS needs at least one fixation point")
    sd = sv.std()
    if _degenerate(sd, sv):
        raise DegenerateMapError("degenerate map: zero standard deviation")
    z = (sv - sv.mean()) / sd
    return float(_fixation_values(z, fix.points).mean())


def _rank_auc(pos: np.ndarray, neg: np.ndarray) -> float:
    """Exact pairwise AUC via a full-staircase ROC sweep.

    Thresholds at every distinct value; a cell equal to the threshold
    counts as positive-classified for both rates, and tied value groups
    turn into diagonal segments, which the trapezoid rule credits 0.5.
    """
    if pos.size == 0 or neg.size == 0:
        raise DegenerateMapError("AUC needs non-empty positive and negative sets")
    values = np.unique(np.concatenate([pos, neg]))[::-1]
    # count(set >= v) via searchsorted over the negated (ascending) values
    tpr = np.concatenate([[0.0], np.searchsorted(np.sort(-pos), -values, side="right") / pos.size])
    fpr = np.concatenate([[0.0], np.searchsorted(np.sort(-neg), -values, side="right") / neg.size])
    return float(np.trapezoid(tpr, fpr))


def metric_auc_judd(s, fix: FixationData) -> float:
    """ROC area: fixation cells versus all non-fixation cells."""
    sv = _grid(s)
    if sv.size < 2:
        raise DegenerateMapError("AUC needs a grid of at least 2 cells")
    if not fix.points:
        raise DegenerateMapError("AUC needs at least one fixation point")
    h, w = sv.shape
    mask = np.zeros((h, w), dtype=bool)
    for x, y in fix.points:
        mask[y, x] = True
    return _rank_auc(sv[mask], sv[~mask])


def metric_sauc(s, fix: FixationData, shuffle_negatives) -> float:
    """ROC area with negatives drawn from another point set (other clips)."""
    sv = _grid(s)
    if not fix.points or not shuffle_negatives:
        raise DegenerateMapError("sAUC needs non-empty fixation and shuffle sets")
    pos = _fixation_values(sv, fix.points)
    neg = _fixation_values(sv, shuffle_negatives)
    return _rank_auc(pos, neg)


def frame_metrics(pred, density, points, shuffle_points=None,
                  cfg: LossConfig = LossConfig()) -> dict:
    """The standard metric row for one frame.

    ``shuffle_points`` should hold fixations of other clips; without
    them sAUC is reported as nan.
    """
    sv, gv = _grid(pred), _grid(density)
    sn = sv / sv.sum()
    gn = gv / gv.sum()
    fix = FixationData(SaliencyMap(gn, normalized=True), list(points))
    row = {
        "CC": metric_cc(sv, gv),
        "NSS": metric_nss(sv, fix),
        "SIM": metric_sim(sn, gn),
        "KL": metric_kl(sn, gn, cfg),
        "AUC": metric_auc_judd(sv, fix),
    }
    row["sAUC"] = metric_sauc(sv, fix, list(shuffle_points)) if shuffle_points else float("nan")
    return row
