"""Per-modality learning-rate coefficients and their application.

MLB (multi-loss balanced) chains, per mini-batch:

* score ``s_i``: summed true-class probability of modality ``i``'s head,
* ratio ``r_i = mean_{j != i}(s_j) / s_i``,
* coefficient ``k_i = 1 + (beta_i - 1) * tanh(alpha * (r_i - 1))`` with
  ``beta_i = beta_max`` when ``r_i > 1`` and ``2`` otherwise.

A lagging modality (``r_i > 1``) is accelerated up to ``beta_max``; a leading
one is slowed but never below ``1 - tanh(alpha)``, and all coefficients return
to 1 as the scores equalize.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from mlb_lab.core import ParamGroup, check_labels, sgd_step, softmax
from mlb_lab.errors import ConfigError, InputError
from mlb_lab.model import fuse_cosine

METHODS = ("joint", "multi_loss", "mlb", "ogm", "mmcosine")

# OGM's 1 - tanh(.) reaches exactly 0 in float64 for large arguments
OGM_MIN_COEFF = 1e-6


@dataclass
class BalancerConfig:
    method: str = "mlb"
    alpha: float = 1.0
    beta_max: float = 5.0
    smoothing: float = 0.0
    eps_floor: float = 1e-8
    cosine_scale: float = 10.0
    hard_scores: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown balancing method {self.method!r}; expected one of {METHODS}")
        if not self.alpha > 0:
            raise ConfigError(f"alpha must be > 0, got {self.alpha!r}")
        if not self.beta_max >= 1:
            raise ConfigError(f"beta_max must be >= 1, got {self.beta_max!r}")
        if not 0 <= self.smoothing < 1:
            raise ConfigError(f"smoothing must lie in [0, 1), got {self.smoothing!r}")
        if not self.eps_floor > 0:
            raise ConfigError(f"eps_floor must be > 0, got {self.eps_floor!r}")
        if not self.cosine_scale > 0:
            raise ConfigError(f"cosine_scale must be > 0, got {self.cosine_scale!r}")

    @property
    def objective(self) -> str:
        return "multi_loss" if self.method in ("multi_loss", "mlb") else "joint"

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class BalancerState:
    n_modalities: int = 2
    s: np.ndarray = None
    r: np.ndarray = None
    k: np.ndarray = None
    step: int = 0
    _ema: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        ones = np.ones(self.n_modalities)
        self.s = ones.copy() if self.s is None else self.s
        self.r = ones.copy() if self.r is None else self.r
        self.k = ones.copy() if self.k is None else self.k


def score_modalities(logits_uni, labels, eps_floor: float = 1e-8, hard: bool = False) -> np.ndarray:
    """Per-modality batch score.

    Soft scores sum the softmax probability given to the true class; hard
    scores count argmax hits. Both are floored at ``eps_floor``.
    """
    scores = []
    for lg in logits_uni:
        n, c = lg.shape
        if n == 0:
            raise InputError("cannot score an empty batch")
        y = check_labels(labels, c, n)
        if hard:
            val = float((np.argmax(lg, axis=1) == y).sum())
        else:
            val = float(softmax(lg)[np.arange(n), y].sum())
        scores.append(max(val, eps_floor))
    return np.array(scores)


def performance_ratio(s) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    M = s.shape[0]
    if M < 2:
        raise ConfigError(f"performance ratio needs at least 2 modalities, got {M}")
    if M == 2:
        # keeps r_1 * r_2 == 1 up to a single rounding
        return s[::-1] / s
    return (s.sum() - s) / (M - 1) / s


def coefficient(r, alpha: float, beta_max: float):
    """MLB coefficient for performance ratio(s) ``r`` (scalar or array).

    The result stays strictly below ``beta_max`` even where ``tanh`` rounds
    to 1 in float64 (it is pulled down by one ulp there).
    """
    r_arr = np.asarray(r, dtype=np.float64)
    beta = np.where(r_arr > 1.0, beta_max, 2.0)
    k = 1.0 + (beta - 1.0) * np.tanh(alpha * (r_arr - 1.0))
    if beta_max > 1.0:
        k = np.minimum(k, np.nextafter(beta_max, -np.inf))
    if np.ndim(r) == 0:
        return float(k)
    return k


def ogm_coefficients(s, alpha: float) -> np.ndarray:
    """Two-modality OGM-style slowdown of the leading modality only."""
    s = np.asarray(s, dtype=np.float64)
    if s.shape[0] != 2:
        raise ConfigError("OGM modulation is defined for exactly two modalities")
    rho = s / s[::-1]
    k = np.ones(2)
    lead = rho > 1.0
    k[lead] = np.maximum(1.0 - np.tanh(alpha * rho[lead]), OGM_MIN_COEFF)
    return k


def update(state: BalancerState, logits_uni, labels, config: BalancerConfig) -> np.ndarray:
    """Recompute coefficients from this batch's unimodal logits.

    Methods other than ``mlb`` and ``ogm`` leave the coefficients at 1.
    """
    state.step += 1
    if config.method not in ("mlb", "ogm"):
        state.k = np.ones(state.n_modalities)
        return state.k
    if logits_uni is None:
        raise ConfigError(f"{config.method} balancing needs unimodal heads")
    s = score_modalities(logits_uni, labels, config.eps_floor, config.hard_scores)
    if config.smoothing > 0:
        d = config.smoothing
        state._ema = s if state._ema is None else d * state._ema + (1.0 - d) * s
        s = state._ema
    state.s = s
    if config.method == "mlb":
        state.r = performance_ratio(s)
        state.k = np.array([coefficient(float(ri), config.alpha, config.beta_max) for ri in state.r])
    else:
        state.r = s / s[::-1]
        state.k = ogm_coefficients(s, config.alpha)
    return state.k


def apply(k, groups: list[ParamGroup], lr_base: float, momentum: float = 0.0) -> None:
    """SGD step on every group; encoder groups of modality ``i`` use ``k[i]``."""
    for group in groups:
        tag = group.modality_tag
        if not tag:
            raise ConfigError(f"parameter group {group.name!r} has no modality tag")
        role = group.role
        if role == "encoder":
            coeff = float(k[group.modality])
        elif role in ("head", "fusion"):
            coeff = 1.0
        else:
            raise ConfigError(f"parameter group {group.name!r} has unknown tag {tag!r}")
        sgd_step(group, lr_base, coeff, momentum)


def mmcosine_logits(phis, W_blocks, s_cos: float, fusion: str = "late_linear") -> np.ndarray:
    """Cosine-normalized late fusion: ``s_cos * sum_m normalize(W_m) @ normalize(phi_m)``."""
    if fusion != "late_linear":
        raise ConfigError(f"MMCosine applies to late_linear fusion only, got {fusion!r}")
    return fuse_cosine(phis, W_blocks, s_cos)


def k_curve(r_grid, alpha: float, beta_max: float) -> np.ndarray:
    return coefficient(np.asarray(r_grid, dtype=np.float64), alpha, beta_max)
