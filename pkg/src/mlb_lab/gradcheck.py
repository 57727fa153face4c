"""Finite-difference verification of the reverse-mode gradients.

The reference loss depends on the objective. Under ``multi_loss`` every group
is checked against the total loss. Under ``joint`` the encoders and fusion
head are checked against the multimodal CE, while heads (when present) are
detached probes checked against their own CE.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mlb_lab import model as mdl
from mlb_lab.core import RngStream, fd_gradient, softmax_ce
from mlb_lab.model import FUSIONS, ModelSpec

TOLERANCE = 1e-5
JITTER = 0.1


def relative_error(analytic, numeric) -> float:
    """``||a - n|| / max(||a||, ||n||)``; 0 when both vanish."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n))
    if denom < 1e-12:
        return float(np.linalg.norm(a - n))
    return float(np.linalg.norm(a - n) / denom)


def _reference_loss(spec, params, xv, xa, y, objective, role, cosine_scale):
    fo = mdl.forward(spec, params, xv, xa, cosine_scale)
    if objective == "multi_loss":
        return mdl.multi_loss(fo, y, "multi_loss")[0]
    if role == "head":
        return sum(softmax_ce(lg, y)[0] for lg in fo.logits_uni)
    return softmax_ce(fo.logits_mm, y)[0]


def check_spec(spec: ModelSpec, seed: int, objective: str = "joint", batch: int = 6,
               eps: float = 1e-5, cosine_scale: float | None = None) -> dict[str, float]:
    """Max relative error per parameter group for one random model and batch."""
    rs = RngStream(seed)
    params = mdl.init_params(spec, rs.substream("gradcheck_init"))
    drng = rs.substream("gradcheck_data")
    # zero biases put exact ReLU kinks at the evaluation point; move off them
    for p in params.values():
        p += JITTER * drng.standard_normal(p.shape)
    xv = drng.standard_normal((batch, spec.in_v))
    xa = drng.standard_normal((batch, spec.in_a))
    y = drng.integers(0, spec.n_classes, size=batch)

    fo = mdl.forward(spec, params, xv, xa, cosine_scale)
    grads = mdl.backward(spec, params, fo, y, objective)

    out = {}
    for name, _, tag, _ in mdl.param_layout(spec):
        role = tag.split(":")[0]
        p = params[name]

        def loss(theta, p=p, role=role):
            saved = p.copy()
            p[...] = theta.reshape(p.shape)
            try:
                return _reference_loss(spec, params, xv, xa, y, objective, role, cosine_scale)
            finally:
                p[...] = saved

        numeric = fd_gradient(loss, p.ravel(), eps)
        group = name.rsplit(".", 1)[0] if role != "encoder" else name.split(".")[0]
        err = relative_error(grads[name], numeric)
        out[group] = max(out.get(group, 0.0), err)
    return out


@dataclass
class CheckCase:
    fusion: str
    heads: bool
    seed: int
    objective: str
    cosine: bool = False

    @property
    def label(self) -> str:
        extra = "+cosine" if self.cosine else ""
        return f"{self.fusion}{extra}/heads={'on' if self.heads else 'off'}/{self.objective}/seed={self.seed}"


def default_cases(fusions=FUSIONS, heads=(True, False), seeds=(0, 1, 2), cosine=True) -> list[CheckCase]:
    cases = []
    for fusion in fusions:
        for h in heads:
            for s in seeds:
                objectives = ("joint", "multi_loss") if h else ("joint",)
                cases.extend(CheckCase(fusion, h, s, obj) for obj in objectives)
    if cosine and "late_linear" in fusions:
        for s in seeds:
            cases.append(CheckCase("late_linear", True, s, "joint", cosine=True))
    return cases


def run_cases(base: ModelSpec, cases, batch=6, eps=1e-5, cosine_scale=10.0):
    """``[(case, {group: error})]`` for each case; fusion and heads come from the case."""
    results = []
    for case in cases:
        d = base.to_dict()
        d.update(fusion=case.fusion, heads=case.heads)
        spec = ModelSpec(**d)
        errs = check_spec(spec, case.seed, case.objective, batch, eps,
                          cosine_scale if case.cosine else None)
        results.append((case, errs))
    return results


def failures(results, tol: float = TOLERANCE) -> list[str]:
    bad = []
    for case, errs in results:
        bad.extend(f"{case.label}:{g}={e:.3e}" for g, e in errs.items() if not e < tol)
    return bad
