"""Closed-form fusion-head gradients and cross-modal gradient sensitivity.

For a linear head ``g = W [phi_v, phi_a] + b`` the gradient of the mean CE
with respect to the v block of ``W`` is ``dL/dg^T phi_v``. For the two-layer
ReLU head ``f = W2 relu(g) + b2`` it becomes ``((dL/df W2) * z(g))^T phi_v``
with ``z`` the ReLU derivative. Both are written out here independently of
:func:`mlb_lab.model.backward` so they can be checked against it.
"""

from __future__ import annotations

import numpy as np

from mlb_lab.core import RngStream, one_hot, relu, relu_mask, softmax
from mlb_lab.model import Model, ModelSpec, backward, forward


def _dlogits(logits, labels):
    return (softmax(logits) - one_hot(labels, logits.shape[1])) / logits.shape[0]


def grad_linear_closed_form(phi_v, phi_a, W, b, labels):
    """``dL/dW^v`` for the linear fusion head (``W`` is ``C x (feat_v + feat_a)``)."""
    g = phi_v @ W[:, : phi_v.shape[1]].T + phi_a @ W[:, phi_v.shape[1]:].T + b
    return _dlogits(g, labels).T @ phi_v


def grad_nonlinear_closed_form(phi_v, phi_a, W1, b1, W2, b2, labels):
    """``dL/dW1^v`` for the two-layer ReLU fusion head."""
    split = phi_v.shape[1]
    g = phi_v @ W1[:, :split].T + phi_a @ W1[:, split:].T + b1
    f = relu(g) @ W2.T + b2
    return ((_dlogits(f, labels) @ W2) * relu_mask(g)).T @ phi_v


def closed_form(spec: ModelSpec, params, phi_v, phi_a, labels):
    if spec.fusion == "late_linear":
        return grad_linear_closed_form(phi_v, phi_a, params["fuse.W"], params["fuse.b"], labels)
    if spec.fusion == "mid_mlp":
        return grad_nonlinear_closed_form(phi_v, phi_a, params["fuse.W1"], params["fuse.b1"],
                                          params["fuse.W2"], params["fuse.b2"], labels)
    raise ValueError(f"no closed form for fusion {spec.fusion!r}")


def backprop_v_block(spec: ModelSpec, params, xv, xa, labels):
    """v block of the first fusion weight as computed by reverse mode."""
    fo = forward(spec, params, xv, xa)
    grads = backward(spec, params, fo, labels, "joint")
    key = "fuse.W" if spec.fusion == "late_linear" else "fuse.W1"
    return grads[key][:, : spec.feat_v], fo


def closed_form_residual(spec: ModelSpec, params, xv, xa, labels) -> float:
    bp, fo = backprop_v_block(spec, params, xv, xa, labels)
    cf = closed_form(spec, params, fo.phi[0], fo.phi[1], labels)
    return float(np.max(np.abs(bp - cf)))


def cross_modal_sensitivity(spec, params, phi_v, phi_a, labels, norm, rng, directions=8) -> float:
    """Mean relative change of ``dL/dW^v`` when each ``phi_a`` row moves by ``norm``."""
    base = closed_form(spec, params, phi_v, phi_a, labels)
    denom = np.linalg.norm(base)
    if denom == 0:
        return 0.0
    vals = []
    for _ in range(directions):
        d = rng.standard_normal(phi_a.shape)
        d *= norm / np.linalg.norm(d, axis=1, keepdims=True)
        moved = closed_form(spec, params, phi_v, phi_a + d, labels)
        vals.append(np.linalg.norm(moved - base) / denom)
    return float(np.mean(vals))


def cross_modal_grad_diagnostic(base_spec: ModelSpec, seed=0, instances=100, batch=8,
                                perturb_norm=0.1, directions=8, scale_v=1.0) -> dict:
    """Closed-form residuals and cross-modal sensitivity for late_linear vs mid_mlp.

    Every instance draws a fresh heads-off model of each fusion type and a
    random Gaussian batch. ``scale_v`` multiplies the v input (``0`` gives
    ``phi_v = relu(b) = 0`` and hence a zero gradient block).
    """
    rs = RngStream(seed)
    init_rng = rs.substream("diag_init")
    data_rng = rs.substream("diag_data")
    pert_rng = rs.substream("diag_perturb")
    report = {"instances": instances, "batch": batch, "perturb_norm": perturb_norm, "fusions": {}}
    for fusion in ("late_linear", "mid_mlp"):
        d = base_spec.to_dict()
        d.update(fusion=fusion, heads=False)
        if fusion == "mid_mlp" and d["fusion_hidden"] < 1:
            d["fusion_hidden"] = d["n_classes"]
        spec = ModelSpec(**d)
        residuals, sens, block_norms = [], [], []
        for _ in range(instances):
            model = Model.init(spec, init_rng)
            xv = scale_v * data_rng.standard_normal((batch, spec.in_v))
            xa = data_rng.standard_normal((batch, spec.in_a))
            y = data_rng.integers(0, spec.n_classes, size=batch)
            bp, fo = backprop_v_block(spec, model.params, xv, xa, y)
            cf = closed_form(spec, model.params, fo.phi[0], fo.phi[1], y)
            residuals.append(float(np.max(np.abs(bp - cf))))
            block_norms.append(float(np.max(np.abs(bp))))
            sens.append(cross_modal_sensitivity(spec, model.params, fo.phi[0], fo.phi[1], y,
                                                perturb_norm, pert_rng, directions))
        report["fusions"][fusion] = {
            "max_residual": max(residuals),
            "mean_residual": float(np.mean(residuals)),
            "sensitivity_mean": float(np.mean(sens)),
            "sensitivity_std": float(np.std(sens)),
            "max_abs_grad_v_block": max(block_norms),
        }
    report["max_residual"] = max(f["max_residual"] for f in report["fusions"].values())
    return report
