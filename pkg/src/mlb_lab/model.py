"""Two-modality classifiers: MLP encoders, a fusion head, optional unimodal heads.

Modality index 0 is ``v`` and index 1 is ``a``; fused inputs are always
concatenated as ``[phi_v, phi_a]``.

Parameters live in a plain ``dict`` of numpy arrays keyed by dotted names
(``enc_v.0.W``, ``fuse.W1``, ``head_a.b`` ...). All forward/backward functions
are pure functions of ``(spec, params, inputs)``; :class:`Model` bundles the
dictionaries with gradient buffers and parameter groups for training.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from mlb_lab.core import (
    FUSION_TAG,
    ParamGroup,
    dense_backward,
    dense_forward,
    he_uniform,
    linear_uniform,
    relu,
    relu_mask,
    sigmoid,
    softmax_ce,
)
from mlb_lab.errors import ConfigError, ContractError, DimensionError
from mlb_lab.fileio import atomic_write_bytes

MODALITIES = ("v", "a")
FUSIONS = ("late_linear", "mid_mlp", "film", "gated")
OBJECTIVES = ("joint", "multi_loss")


@dataclass
class ModelSpec:
    in_v: int
    in_a: int
    feat_v: int
    feat_a: int
    n_classes: int
    fusion: str = "late_linear"
    encoder_depth: int = 1
    encoder_hidden: int | None = None
    fusion_hidden: int = 16
    heads: bool = True
    film_conditioner: str = "a"

    def __post_init__(self):
        self.validate()

    def validate(self):
        widths = dict(
            in_v=self.in_v, in_a=self.in_a, feat_v=self.feat_v, feat_a=self.feat_a,
            n_classes=self.n_classes, encoder_depth=self.encoder_depth,
            fusion_hidden=self.fusion_hidden,
        )
        if self.encoder_hidden is not None:
            widths["encoder_hidden"] = self.encoder_hidden
        for name, w in widths.items():
            if not isinstance(w, (int, np.integer)) or isinstance(w, bool) or w < 1:
                raise ConfigError(f"{name} must be an integer >= 1, got {w!r}")
        if self.fusion not in FUSIONS:
            raise ConfigError(f"unknown fusion {self.fusion!r}; expected one of {FUSIONS}")
        if self.fusion == "gated" and self.feat_v != self.feat_a:
            raise ConfigError(
                f"gated fusion needs equal feature widths, got feat_v={self.feat_v}, feat_a={self.feat_a}"
            )
        if self.film_conditioner not in MODALITIES:
            raise ConfigError(f"film_conditioner must be 'v' or 'a', got {self.film_conditioner!r}")

    def in_dim(self, m: int) -> int:
        return (self.in_v, self.in_a)[m]

    def feat_dim(self, m: int) -> int:
        return (self.feat_v, self.feat_a)[m]

    def encoder_widths(self, m: int) -> list[int]:
        depth = self.encoder_depth
        mid = self.encoder_hidden or self.feat_dim(m)
        return [self.in_dim(m)] + [mid] * (depth - 1) + [self.feat_dim(m)]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


# ---------------------------------------------------------------------------
# parameter layout


def param_layout(spec: ModelSpec) -> list[tuple[str, tuple[int, int], str, str]]:
    """Ordered ``(name, shape, modality_tag, init)`` for every tensor."""
    out = []
    for m, mod in enumerate(MODALITIES):
        widths = spec.encoder_widths(m)
        for layer in range(spec.encoder_depth):
            fan_in, fan_out = widths[layer], widths[layer + 1]
            out.append((f"enc_{mod}.{layer}.W", (fan_out, fan_in), f"encoder:{m}", "he"))
            out.append((f"enc_{mod}.{layer}.b", (1, fan_out), f"encoder:{m}", "zero"))
    C = spec.n_classes
    fv, fa = spec.feat_v, spec.feat_a
    if spec.fusion == "late_linear":
        out.append(("fuse.W", (C, fv + fa), FUSION_TAG, "linear"))
        out.append(("fuse.b", (1, C), FUSION_TAG, "zero"))
    elif spec.fusion == "mid_mlp":
        h = spec.fusion_hidden
        out.append(("fuse.W1", (h, fv + fa), FUSION_TAG, "he"))
        out.append(("fuse.b1", (1, h), FUSION_TAG, "zero"))
        out.append(("fuse.W2", (C, h), FUSION_TAG, "linear"))
        out.append(("fuse.b2", (1, C), FUSION_TAG, "zero"))
    elif spec.fusion == "film":
        tgt, cond = _film_roles(spec)
        ft, fc = spec.feat_dim(tgt), spec.feat_dim(cond)
        out.append(("film.W", (2 * ft, fc), FUSION_TAG, "linear"))
        out.append(("film.b", (1, 2 * ft), FUSION_TAG, "film_bias"))
        out.append(("fuse.W", (C, ft), FUSION_TAG, "linear"))
        out.append(("fuse.b", (1, C), FUSION_TAG, "zero"))
    elif spec.fusion == "gated":
        out.append(("gate.W", (fv, fv + fa), FUSION_TAG, "linear"))
        out.append(("gate.b", (1, fv), FUSION_TAG, "zero"))
        out.append(("fuse.W", (C, fv), FUSION_TAG, "linear"))
        out.append(("fuse.b", (1, C), FUSION_TAG, "zero"))
    if spec.heads:
        for m, mod in enumerate(MODALITIES):
            out.append((f"head_{mod}.W", (C, spec.feat_dim(m)), f"head:{m}", "linear"))
            out.append((f"head_{mod}.b", (1, C), f"head:{m}", "zero"))
    return out


def init_params(spec: ModelSpec, rng: np.random.Generator) -> dict[str, np.ndarray]:
    params = {}
    for name, (rows, cols), _, kind in param_layout(spec):
        if kind == "he":
            params[name] = he_uniform(rows, cols, rng)
        elif kind == "linear":
            params[name] = linear_uniform(rows, cols, rng)
        elif kind == "film_bias":
            # gamma half starts at 1 so modulation begins as the identity
            b = np.zeros((rows, cols))
            b[0, : cols // 2] = 1.0
            params[name] = b
        else:
            params[name] = np.zeros((rows, cols))
    return params


def groups_for(spec: ModelSpec, params: dict, grads: dict) -> list[ParamGroup]:
    by_tag: dict[str, list[str]] = {}
    for name, _, tag, _ in param_layout(spec):
        by_tag.setdefault(tag, []).append(name)
    groups = []
    for tag, names in by_tag.items():
        role, _, idx = tag.partition(":")
        label = f"{role}_{MODALITIES[int(idx)]}" if idx else role
        groups.append(ParamGroup(label, [params[n] for n in names], [grads[n] for n in names], tag))
    return groups


def _film_roles(spec: ModelSpec) -> tuple[int, int]:
    cond = MODALITIES.index(spec.film_conditioner)
    return 1 - cond, cond


# ---------------------------------------------------------------------------
# encoders


def encode_forward(spec: ModelSpec, params: dict, x: np.ndarray, m: int):
    if x.ndim != 2 or x.shape[1] != spec.in_dim(m):
        raise DimensionError(
            f"modality {MODALITIES[m]} input has shape {x.shape}, expected width {spec.in_dim(m)}"
        )
    mod = MODALITIES[m]
    h = x
    cache = []
    for layer in range(spec.encoder_depth):
        pre = dense_forward(params[f"enc_{mod}.{layer}.W"], params[f"enc_{mod}.{layer}.b"], h)
        cache.append((h, pre))
        h = relu(pre)
    return h, cache


def encode(spec: ModelSpec, params: dict, x: np.ndarray, m: int) -> np.ndarray:
    """Features of modality ``m`` (0 = v, 1 = a): stacked dense+ReLU blocks."""
    return encode_forward(spec, params, x, m)[0]


def encode_backward(spec, params, cache, dphi, m, grads):
    mod = MODALITIES[m]
    d = dphi
    for layer in reversed(range(spec.encoder_depth)):
        h_in, pre = cache[layer]
        dpre = d * relu_mask(pre)
        d, dW, db = dense_backward(params[f"enc_{mod}.{layer}.W"], h_in, dpre)
        grads[f"enc_{mod}.{layer}.W"] = dW
        grads[f"enc_{mod}.{layer}.b"] = db


# ---------------------------------------------------------------------------
# fusion heads


def _check_pair(phi_v, phi_a):
    if phi_v.shape[0] != phi_a.shape[0]:
        raise DimensionError(f"feature batches differ: {phi_v.shape} vs {phi_a.shape}")


def _late_fwd(phi_v, phi_a, W, b):
    _check_pair(phi_v, phi_a)
    cat = np.concatenate([phi_v, phi_a], axis=1)
    return dense_forward(W, b, cat), (cat, W, phi_v.shape[1])


def _late_bwd(cache, dlogits):
    cat, W, split = cache
    dcat, dW, db = dense_backward(W, cat, dlogits)
    return dcat[:, :split], dcat[:, split:], {"fuse.W": dW, "fuse.b": db}


def fuse_late_linear(phi_v, phi_a, W, b):
    """``[phi_v, phi_a] @ W.T + b``; ``W[:, :feat_v]`` is the v block."""
    return _late_fwd(phi_v, phi_a, W, b)[0]


def _mid_fwd(phi_v, phi_a, W1, b1, W2, b2):
    _check_pair(phi_v, phi_a)
    cat = np.concatenate([phi_v, phi_a], axis=1)
    g = dense_forward(W1, b1, cat)
    hid = relu(g)
    return dense_forward(W2, b2, hid), (cat, g, hid, W1, W2, phi_v.shape[1])


def _mid_bwd(cache, dlogits):
    cat, g, hid, W1, W2, split = cache
    dhid, dW2, db2 = dense_backward(W2, hid, dlogits)
    dg = dhid * relu_mask(g)
    dcat, dW1, db1 = dense_backward(W1, cat, dg)
    grads = {"fuse.W1": dW1, "fuse.b1": db1, "fuse.W2": dW2, "fuse.b2": db2}
    return dcat[:, :split], dcat[:, split:], grads


def fuse_mid_mlp(phi_v, phi_a, W1, b1, W2, b2):
    """Two-layer ReLU MLP over the concatenated features."""
    return _mid_fwd(phi_v, phi_a, W1, b1, W2, b2)[0]


def _film_fwd(phi_tgt, phi_cond, Wf, bf, W, b):
    _check_pair(phi_tgt, phi_cond)
    gb = dense_forward(Wf, bf, phi_cond)
    n = phi_tgt.shape[1]
    if gb.shape[1] != 2 * n:
        raise DimensionError(f"FiLM generator emits {gb.shape[1]} values, expected {2 * n}")
    gamma, beta = gb[:, :n], gb[:, n:]
    mod = gamma * phi_tgt + beta
    act = relu(mod)
    return dense_forward(W, b, act), (phi_tgt, phi_cond, gamma, mod, act, Wf, W)


def _film_bwd(cache, dlogits):
    phi_tgt, phi_cond, gamma, mod, act, Wf, W = cache
    dact, dW, db = dense_backward(W, act, dlogits)
    dmod = dact * relu_mask(mod)
    dgamma = dmod * phi_tgt
    dphi_tgt = dmod * gamma
    dgb = np.concatenate([dgamma, dmod], axis=1)
    dphi_cond, dWf, dbf = dense_backward(Wf, phi_cond, dgb)
    return dphi_tgt, dphi_cond, {"film.W": dWf, "film.b": dbf, "fuse.W": dW, "fuse.b": db}


def film_modulate(phi_tgt, phi_cond, Wf, bf):
    """``gamma * phi_tgt + beta`` with ``[gamma | beta] = dense(phi_cond)``."""
    gb = dense_forward(Wf, bf, phi_cond)
    n = phi_tgt.shape[1]
    return gb[:, :n] * phi_tgt + gb[:, n:]


def fuse_film(phi_v, phi_a, params, conditioner: str = "a"):
    if conditioner == "a":
        tgt, cond = phi_v, phi_a
    else:
        tgt, cond = phi_a, phi_v
    return _film_fwd(tgt, cond, params["film.W"], params["film.b"], params["fuse.W"], params["fuse.b"])[0]


def _gated_fwd(phi_v, phi_a, Wg, bg, W, b):
    _check_pair(phi_v, phi_a)
    if phi_v.shape[1] != phi_a.shape[1]:
        raise ConfigError(f"gated fusion needs equal widths, got {phi_v.shape[1]} and {phi_a.shape[1]}")
    cat = np.concatenate([phi_v, phi_a], axis=1)
    gpre = dense_forward(Wg, bg, cat)
    g = sigmoid(gpre)
    fused = g * phi_v + (1.0 - g) * phi_a
    return dense_forward(W, b, fused), (cat, g, fused, phi_v, phi_a, Wg, W)


def _gated_bwd(cache, dlogits):
    cat, g, fused, phi_v, phi_a, Wg, W = cache
    dfused, dW, db = dense_backward(W, fused, dlogits)
    dg = dfused * (phi_v - phi_a)
    dgpre = dg * g * (1.0 - g)
    dcat, dWg, dbg = dense_backward(Wg, cat, dgpre)
    split = phi_v.shape[1]
    dphi_v = dfused * g + dcat[:, :split]
    dphi_a = dfused * (1.0 - g) + dcat[:, split:]
    return dphi_v, dphi_a, {"gate.W": dWg, "gate.b": dbg, "fuse.W": dW, "fuse.b": db}


def gated_mix(phi_v, phi_a, Wg, bg):
    g = sigmoid(dense_forward(Wg, bg, np.concatenate([phi_v, phi_a], axis=1)))
    return g * phi_v + (1.0 - g) * phi_a


def fuse_gated(phi_v, phi_a, params):
    return _gated_fwd(phi_v, phi_a, params["gate.W"], params["gate.b"], params["fuse.W"], params["fuse.b"])[0]


def _normalize_rows(X):
    norms = np.sqrt((X * X).sum(axis=1, keepdims=True))
    safe = np.where(norms > 0, norms, 1.0)
    return np.where(norms > 0, X / safe, 0.0), norms


def _normalize_rows_bwd(Xhat, norms, dXhat):
    safe = np.where(norms > 0, norms, 1.0)
    proj = (Xhat * dXhat).sum(axis=1, keepdims=True)
    return np.where(norms > 0, (dXhat - Xhat * proj) / safe, 0.0)


def _cosine_fwd(phis, W_blocks, scale):
    logits = 0.0
    cache = []
    for phi, Wm in zip(phis, W_blocks):
        phi_hat, pn = _normalize_rows(phi)
        W_hat, wn = _normalize_rows(Wm)
        logits = logits + phi_hat @ W_hat.T
        cache.append((phi_hat, pn, W_hat, wn))
    return scale * logits, (cache, scale)


def _cosine_bwd(cache, dlogits):
    blocks, scale = cache
    dphis, dWs = [], []
    ds = scale * dlogits
    for phi_hat, pn, W_hat, wn in blocks:
        dphi_hat = ds @ W_hat
        dW_hat = ds.T @ phi_hat
        dphis.append(_normalize_rows_bwd(phi_hat, pn, dphi_hat))
        dWs.append(_normalize_rows_bwd(W_hat, wn, dW_hat))
    return dphis, dWs


def fuse_cosine(phis, W_blocks, scale: float) -> np.ndarray:
    """Scaled sum over modalities of cosine similarities to each class weight row."""
    return _cosine_fwd(phis, W_blocks, scale)[0]


# ---------------------------------------------------------------------------
# full model


@dataclass
class ForwardOut:
    logits_mm: np.ndarray
    logits_uni: list | None
    phi: list
    cache: dict = field(repr=False, default_factory=dict)


def forward(spec: ModelSpec, params: dict, xv, xa, cosine_scale: float | None = None) -> ForwardOut:
    """Encode both modalities, fuse, and (when heads are on) run the unimodal heads.

    ``cosine_scale`` switches the late-linear head to normalized-cosine logits.
    """
    if xv.shape[0] != xa.shape[0]:
        raise DimensionError(f"modality batches differ: {xv.shape} vs {xa.shape}")
    phi_v, enc_v = encode_forward(spec, params, xv, 0)
    phi_a, enc_a = encode_forward(spec, params, xa, 1)
    cache = {"enc": (enc_v, enc_a), "cosine": cosine_scale, "used": False, "spec": spec}
    if cosine_scale is not None:
        if spec.fusion != "late_linear":
            raise ConfigError(f"cosine logits need late_linear fusion, got {spec.fusion}")
        W = params["fuse.W"]
        logits, fc = _cosine_fwd([phi_v, phi_a], [W[:, : spec.feat_v], W[:, spec.feat_v:]], cosine_scale)
    elif spec.fusion == "late_linear":
        logits, fc = _late_fwd(phi_v, phi_a, params["fuse.W"], params["fuse.b"])
    elif spec.fusion == "mid_mlp":
        logits, fc = _mid_fwd(phi_v, phi_a, params["fuse.W1"], params["fuse.b1"],
                              params["fuse.W2"], params["fuse.b2"])
    elif spec.fusion == "film":
        tgt, cond = _film_roles(spec)
        phis = (phi_v, phi_a)
        logits, fc = _film_fwd(phis[tgt], phis[cond], params["film.W"], params["film.b"],
                               params["fuse.W"], params["fuse.b"])
    else:
        logits, fc = _gated_fwd(phi_v, phi_a, params["gate.W"], params["gate.b"],
                                params["fuse.W"], params["fuse.b"])
    cache["fuse"] = fc
    logits_uni = None
    if spec.heads:
        logits_uni = [
            dense_forward(params[f"head_{mod}.W"], params[f"head_{mod}.b"], phi)
            for mod, phi in zip(MODALITIES, (phi_v, phi_a))
        ]
    return ForwardOut(logits, logits_uni, [phi_v, phi_a], cache)


def multi_loss(fo: ForwardOut, labels, objective: str = "multi_loss"):
    """Total objective and its per-term cross-entropies.

    ``multi_loss`` sums the multimodal CE and one CE per unimodal head;
    ``joint`` uses the multimodal CE alone (head CEs are still reported when
    heads exist). Returns ``(L, {"mm": .., "v": .., "a": ..})``.
    """
    if objective not in OBJECTIVES:
        raise ConfigError(f"unknown objective {objective!r}")
    ce_mm = softmax_ce(fo.logits_mm, labels)[0]
    terms = {"mm": ce_mm}
    if fo.logits_uni is None:
        if objective == "multi_loss":
            raise ConfigError("multi_loss objective needs unimodal heads")
        return ce_mm, terms
    for mod, lg in zip(MODALITIES, fo.logits_uni):
        terms[mod] = softmax_ce(lg, labels)[0]
    if objective == "joint":
        return ce_mm, terms
    return ce_mm + terms["v"] + terms["a"], terms


def backward(spec: ModelSpec, params: dict, fo: ForwardOut, labels, objective: str = "multi_loss") -> dict:
    """Reverse-mode gradients of the training objective, keyed by parameter name.

    Under ``joint`` with heads present, the heads are trained as detached
    probes: they receive the gradient of their own CE, which never reaches
    the encoders.
    """
    if objective not in OBJECTIVES:
        raise ConfigError(f"unknown objective {objective!r}")
    cache = fo.cache
    if not cache or cache.get("used"):
        raise ContractError("backward needs a fresh forward cache (each ForwardOut is consumed once)")
    if cache.get("spec") is not spec:
        raise ContractError("forward cache was produced for a different ModelSpec")
    if objective == "multi_loss" and fo.logits_uni is None:
        raise ConfigError("multi_loss objective needs unimodal heads")
    cache["used"] = True

    grads: dict[str, np.ndarray] = {}
    _, dlogits, _ = softmax_ce(fo.logits_mm, labels)
    fc = cache["fuse"]
    if cache["cosine"] is not None:
        (dphi_v, dphi_a), (dWv, dWa) = _cosine_bwd(fc, dlogits)
        grads["fuse.W"] = np.concatenate([dWv, dWa], axis=1)
        grads["fuse.b"] = np.zeros_like(params["fuse.b"])
    elif spec.fusion == "late_linear":
        dphi_v, dphi_a, fg = _late_bwd(fc, dlogits)
        grads.update(fg)
    elif spec.fusion == "mid_mlp":
        dphi_v, dphi_a, fg = _mid_bwd(fc, dlogits)
        grads.update(fg)
    elif spec.fusion == "film":
        d_tgt, d_cond, fg = _film_bwd(fc, dlogits)
        tgt, _ = _film_roles(spec)
        dphi_v, dphi_a = (d_tgt, d_cond) if tgt == 0 else (d_cond, d_tgt)
        grads.update(fg)
    else:
        dphi_v, dphi_a, fg = _gated_bwd(fc, dlogits)
        grads.update(fg)

    dphis = [dphi_v, dphi_a]
    if fo.logits_uni is not None:
        for m, mod in enumerate(MODALITIES):
            _, dl, _ = softmax_ce(fo.logits_uni[m], labels)
            dphi_h, dW, db = dense_backward(params[f"head_{mod}.W"], fo.phi[m], dl)
            grads[f"head_{mod}.W"] = dW
            grads[f"head_{mod}.b"] = db
            if objective == "multi_loss":
                dphis[m] = dphis[m] + dphi_h

    enc_v, enc_a = cache["enc"]
    encode_backward(spec, params, enc_v, dphis[0], 0, grads)
    encode_backward(spec, params, enc_a, dphis[1], 1, grads)
    return grads


class Model:
    """Parameters, gradient buffers and parameter groups for one network."""

    def __init__(self, spec: ModelSpec, params: dict[str, np.ndarray]):
        layout = param_layout(spec)
        names = [n for n, *_ in layout]
        missing = set(names) - set(params)
        if missing:
            raise ConfigError(f"parameters missing for this spec: {sorted(missing)}")
        for name, shape, *_ in layout:
            if params[name].shape != shape:
                raise DimensionError(f"{name}: shape {params[name].shape}, expected {shape}")
        self.spec = spec
        self.params = {n: np.array(params[n], dtype=np.float64) for n in names}
        self.grads = {n: np.zeros_like(self.params[n]) for n in names}
        self.groups = groups_for(spec, self.params, self.grads)

    @classmethod
    def init(cls, spec: ModelSpec, rng: np.random.Generator) -> "Model":
        return cls(spec, init_params(spec, rng))

    def forward(self, xv, xa, cosine_scale=None) -> ForwardOut:
        return forward(self.spec, self.params, xv, xa, cosine_scale)

    def accumulate(self, fo: ForwardOut, labels, objective: str) -> None:
        for name, g in backward(self.spec, self.params, fo, labels, objective).items():
            self.grads[name] += g

    def copy_params(self) -> dict:
        return {n: p.copy() for n, p in self.params.items()}

    def load_params(self, params: dict) -> None:
        for n, p in params.items():
            self.params[n][...] = p

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())


# ---------------------------------------------------------------------------
# checkpoint container
#
# layout: b"MLBCKPT1" | u64 LE manifest length | manifest JSON (utf-8) |
#         float64 LE row-major data for each entry in manifest order

CKPT_MAGIC = b"MLBCKPT1"


def checkpoint_bytes(spec: ModelSpec, params: dict) -> bytes:
    entries = []
    blob = io.BytesIO()
    offset = 0
    for name, shape, tag, _ in param_layout(spec):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        entries.append({"name": name, "rows": shape[0], "cols": shape[1],
                        "modality_tag": tag, "offset": offset})
        blob.write(arr.tobytes())
        offset += arr.nbytes
    manifest = json.dumps({"spec": spec.to_dict(), "tensors": entries}, sort_keys=True).encode()
    return CKPT_MAGIC + struct.pack("<Q", len(manifest)) + manifest + blob.getvalue()


def save_checkpoint(path, spec: ModelSpec, params: dict) -> None:
    atomic_write_bytes(path, checkpoint_bytes(spec, params))


def load_checkpoint(path) -> tuple[ModelSpec, dict, list[dict]]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != CKPT_MAGIC:
        raise ContractError(f"{path}: not a checkpoint file")
    (mlen,) = struct.unpack("<Q", raw[8:16])
    manifest = json.loads(raw[16:16 + mlen])
    data = raw[16 + mlen:]
    spec = ModelSpec.from_dict(manifest["spec"])
    params = {}
    for e in manifest["tensors"]:
        n = e["rows"] * e["cols"]
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=e["offset"])
        params[e["name"]] = arr.reshape(e["rows"], e["cols"]).astype(np.float64)
    return spec, params, manifest["tensors"]
