"""Training objectives: centerness, vote, RPN and head losses and their weighted total."""

from dataclasses import dataclass, field

import numpy as np

from ssk.nn import ops
from ssk.nn.autograd import Tape, Tensor

PROB_EPS = 1e-7
L2_EPS = 1e-12
VOTE_NORMS = ("l1", "l2")


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 1.0
    beta: float = 0.25
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    smooth_l1_delta: float = 1.0 / 9.0
    vote_norm: str = "l1"

    def __post_init__(self):
        if min(self.alpha, self.beta, self.focal_gamma, self.smooth_l1_delta) < 0 or self.smooth_l1_delta == 0:
            raise ValueError(f"Loss weights must be non-negative and delta positive: {self}")
        if not 0.0 <= self.focal_alpha <= 1.0:
            raise ValueError(f"focal_alpha must lie in [0, 1], got {self.focal_alpha}")
        if self.vote_norm not in VOTE_NORMS:
            raise ValueError(f"vote_norm must be one of {VOTE_NORMS}, got {self.vote_norm}")


@dataclass
class VoteSupervision:
    """
    Voted coordinates with their gt centroids.

    Rows count toward the loss where ``foreground`` (and ``mask``, when given) hold.
    """

    voted: Tensor
    centroids: np.ndarray
    foreground: np.ndarray
    mask: np.ndarray | None = None

    @property
    def weights(self) -> np.ndarray:
        w = np.asarray(self.foreground, dtype=np.float64).reshape(-1)
        if self.mask is not None:
            w = w * np.asarray(self.mask, dtype=np.float64).reshape(-1)
        return w

    @property
    def m_pos(self) -> float:
        return float(self.weights.sum())


@dataclass
class LossBreakdown:
    rpn: float
    head: float
    vote_v: float
    vote_f: float
    ctr: float
    total: float
    tensor: Tensor | None = field(default=None, repr=False)

    @property
    def vote(self) -> float:
        return self.vote_v + self.vote_f

    def as_row(self) -> dict[str, float]:
        return {
            "rpn": self.rpn,
            "head": self.head,
            "vote_v": self.vote_v,
            "vote_f": self.vote_f,
            "vote": self.vote,
            "ctr": self.ctr,
            "total": self.total,
        }


def _zero(tape: Tape) -> Tensor:
    return tape.constant(0.0)


def l_ctr(w_d: Tensor, mask: np.ndarray, foreground: np.ndarray, eps: float = PROB_EPS) -> Tensor:
    """
    Mean over points of -(mask·a·log W_d + (1 - a)·log(1 - W_d)).

    W_d is clamped to [eps, 1 - eps].
    """
    n = w_d.shape[0]
    if n == 0:
        return _zero(w_d.tape)
    w = ops.clamp(w_d.reshape(n), eps, 1.0 - eps)
    a = np.asarray(foreground, dtype=np.float64).reshape(n)
    m = np.asarray(mask, dtype=np.float64).reshape(n)
    per_point = ops.log(w) * (m * a) + ops.log(1.0 - w) * (1.0 - a)
    return -ops.mean(per_point)


def vote_loss(sup: VoteSupervision, norm: str = "l1") -> Tensor:
    """Distance of voted coordinates to their centroids, averaged over the counted rows."""
    weights = sup.weights
    m_pos = weights.sum()
    if m_pos <= 0:
        return _zero(sup.voted.tape)
    diff = sup.voted - np.asarray(sup.centroids, dtype=np.float64)
    if norm == "l1":
        dist = ops.abs(diff).sum(axis=1)
    elif norm == "l2":
        dist = ops.sqrt(ops.square(diff).sum(axis=1) + L2_EPS) - np.sqrt(L2_EPS)
    else:
        raise ValueError(f"Unknown vote norm '{norm}'")
    return (dist * weights).sum() / float(m_pos)


def l_vote_v(sup: VoteSupervision, norm: str = "l1") -> Tensor:
    return vote_loss(VoteSupervision(sup.voted, sup.centroids, sup.foreground), norm)


def l_vote_f(sup: VoteSupervision, norm: str = "l1") -> Tensor:
    if sup.mask is None:
        raise ValueError("l_vote_f needs the vote mask")
    return vote_loss(sup, norm)


def focal_loss(logits: Tensor, labels: np.ndarray, gamma: float = 2.0, alpha: float = 0.25) -> Tensor:
    """
    Summed binary focal loss; labels are 1, 0, or -1 (ignored).
    """
    labels = np.asarray(labels).reshape(-1)
    if logits.shape[0] != len(labels):
        raise ValueError(f"{logits.shape[0]} logits for {len(labels)} labels")
    valid = labels >= 0
    if not valid.any():
        return _zero(logits.tape)
    x = logits[np.nonzero(valid)[0]]
    y = (labels[valid] == 1).astype(np.float64)
    p = ops.sigmoid(x)
    pos = ops.power(1.0 - p, gamma) * ops.log_sigmoid(x) * (alpha * y)
    neg = ops.power(p, gamma) * ops.log_sigmoid(-x) * ((1.0 - alpha) * (1.0 - y))
    return -(pos + neg).sum()


def smooth_l1(pred: Tensor, target: np.ndarray, delta: float = 1.0 / 9.0) -> Tensor:
    """Summed smooth-L1: 0.5·d²/delta inside |d| < delta, |d| - 0.5·delta outside."""
    if pred.value.size == 0:
        return _zero(pred.tape)
    diff = pred - np.asarray(target, dtype=np.float64)
    ad = ops.abs(diff)
    quadratic = ops.square(diff) * (0.5 / delta)
    linear = ad - 0.5 * delta
    return ops.where(ad.value < delta, quadratic, linear).sum()


def bce(p: Tensor, t: np.ndarray, eps: float = PROB_EPS) -> Tensor:
    """Summed binary cross-entropy of probabilities clamped to [eps, 1 - eps]."""
    if p.value.size == 0:
        return _zero(p.tape)
    t = np.asarray(t, dtype=np.float64).reshape(p.shape)
    q = ops.clamp(p, eps, 1.0 - eps)
    return -(ops.log(q) * t + ops.log(1.0 - q) * (1.0 - t)).sum()


def l_rpn(
    logits: Tensor,
    residuals: Tensor,
    labels: np.ndarray,
    residual_targets: np.ndarray,
    config: LossConfig | None = None,
) -> Tensor:
    """(focal over labelled anchors + smooth-L1 over foreground anchors) / max(N_fg, 1)."""
    config = config or LossConfig()
    labels = np.asarray(labels).reshape(-1)
    fg = np.nonzero(labels == 1)[0]
    normalizer = float(max(len(fg), 1))
    cls = focal_loss(logits, labels, config.focal_gamma, config.focal_alpha)
    if len(fg) == 0:
        return cls / normalizer
    loc = smooth_l1(residuals[fg], np.asarray(residual_targets)[fg], config.smooth_l1_delta)
    return (cls + loc) / normalizer


def l_head(
    logits: Tensor,
    confidence_targets: np.ndarray,
    residuals: Tensor,
    residual_targets: np.ndarray,
    regress: np.ndarray,
    num_samples: int,
    config: LossConfig | None = None,
) -> Tensor:
    """(Σ bce(γ, r*) + Σ over IoU ≥ theta_reg of smooth-L1(z, z*)) / max(N_s, 1)."""
    config = config or LossConfig()
    normalizer = float(max(num_samples, 1))
    if logits.shape[0] == 0:
        return _zero(logits.tape)
    conf = bce(ops.sigmoid(logits), confidence_targets)
    rows = np.nonzero(np.asarray(regress, dtype=bool))[0]
    if len(rows) == 0:
        return conf / normalizer
    reg = smooth_l1(residuals[rows], np.asarray(residual_targets)[rows], config.smooth_l1_delta)
    return (conf + reg) / normalizer


def l_total(
    rpn: Tensor,
    head: Tensor,
    vote_v: Tensor,
    vote_f: Tensor,
    ctr: Tensor,
    config: LossConfig | None = None,
) -> LossBreakdown:
    """L_rpn + L_head + alpha·(L_vote^v + L_vote^f) + beta·L_ctr."""
    config = config or LossConfig()
    total = rpn + head + (vote_v + vote_f) * config.alpha + ctr * config.beta
    parts = [float(np.asarray(t.value).reshape(-1)[0]) for t in (rpn, head, vote_v, vote_f, ctr, total)]
    for name, value in zip(("rpn", "head", "vote_v", "vote_f", "ctr", "total"), parts, strict=True):
        if not np.isfinite(value) or value < 0:
            raise FloatingPointError(f"Loss component {name} is {value}")
    return LossBreakdown(*parts, tensor=total)
