"""Run configuration, the training loop, unimodal ceilings and seed sweeps."""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
import math
import re
from importlib import resources
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from mlb_lab import balancer as bal
from mlb_lab.core import (
    ParamGroup,
    RngStream,
    dense_backward,
    dense_forward,
    he_uniform,
    linear_uniform,
    sgd_step,
    softmax_ce,
)
from mlb_lab.data import SPLITS, Dataset, SynthSpec, competition_preset, generate, load_dataset, minibatches
from mlb_lab.errors import ConfigError, NonFiniteLossError
from mlb_lab.fileio import atomic_write_bytes, atomic_write_text
from mlb_lab.metrics import EvalReport, evaluate, top1
from mlb_lab.model import (
    MODALITIES,
    Model,
    ModelSpec,
    checkpoint_bytes,
    encode_backward,
    encode_forward,
    multi_loss,
)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1

EPOCH_COLUMNS = (
    "epoch", "L_total", "CE_mm", "CE_v", "CE_a",
    "train_acc_mm", "val_acc_mm", "val_acc_v", "val_acc_a",
    "k_v", "k_a", "val_ece",
)
TRACE_COLUMNS = ("epoch", "step", "k_a", "k_v", "r_a", "r_v", "s_a", "s_v")
SUMMARY_METRICS = ("acc_mm", "acc_v", "acc_a", "ece")


class ConfigFieldError(ConfigError):
    def __init__(self, key, msg):
        super().__init__(msg)
        self.key = key


# ---------------------------------------------------------------------------
# configuration


@dataclass
class RunConfig:
    """Everything that determines a training run.

    ``data`` holds exactly one of ``preset`` (``{"difficulty_gap": g}``),
    ``synth`` (``SynthSpec`` fields) or ``path`` (directory of exported
    splits). A data seed left unset follows the run seed.
    """

    model: dict
    data: dict
    balancer: bal.BalancerConfig
    lr_base: float = 0.05
    epochs: int = 60
    batch: int = 64
    seed: int = 0
    momentum: float = 0.0
    ece_bins: int = 10
    gradcheck: dict = field(default_factory=dict)
    diag: dict = field(default_factory=dict)
    plot: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr_base > 0:
            raise ConfigFieldError("lr_base", f"lr_base must be > 0, got {self.lr_base!r}")
        for key in ("epochs", "batch", "ece_bins"):
            v = getattr(self, key)
            lo = 0 if key == "epochs" else 1
            if not isinstance(v, int) or isinstance(v, bool) or v < lo:
                raise ConfigFieldError(key, f"{key} must be an integer >= {lo}, got {v!r}")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or not 0 <= self.seed < 2**64:
            raise ConfigFieldError("seed", f"seed must be an unsigned 64-bit integer, got {self.seed!r}")
        if not 0 <= self.momentum < 1:
            raise ConfigFieldError("momentum", f"momentum must lie in [0, 1), got {self.momentum!r}")
        sources = [k for k in ("preset", "synth", "path") if k in self.data]
        if len(sources) != 1 or set(self.data) - {"preset", "synth", "path"}:
            raise ConfigFieldError("data", "data must hold exactly one of 'preset', 'synth', 'path'")
        self.synth_spec()  # validates
        spec = self.model_spec()
        if self.balancer.method != "joint" and not spec.heads:
            raise ConfigFieldError("heads", f"method {self.balancer.method!r} needs unimodal heads")
        if self.balancer.method == "mmcosine" and spec.fusion != "late_linear":
            raise ConfigFieldError("fusion", "mmcosine needs late_linear fusion")

    def synth_spec(self) -> SynthSpec | None:
        if "preset" in self.data:
            p = dict(self.data["preset"])
            extra = set(p) - {"difficulty_gap", "seed"}
            if extra:
                raise ConfigFieldError(sorted(extra)[0], f"unknown preset field {sorted(extra)[0]!r}")
            if "difficulty_gap" not in p:
                raise ConfigFieldError("preset", "preset needs 'difficulty_gap'")
            return competition_preset(p["difficulty_gap"], p.get("seed", self.seed))
        if "synth" in self.data:
            d = dict(self.data["synth"])
            names = {f.name for f in fields(SynthSpec)}
            extra = set(d) - names
            if extra:
                raise ConfigFieldError(sorted(extra)[0], f"unknown synth field {sorted(extra)[0]!r}")
            d.setdefault("seed", self.seed)
            try:
                return SynthSpec(**d)
            except ConfigError as e:
                raise ConfigFieldError("synth", str(e)) from None
        return None

    def input_dims(self) -> tuple[int, int, int]:
        s = self.synth_spec()
        if s is not None:
            return s.in_v, s.in_a, s.n_classes
        ds, _ = load_dataset(Path(self.data["path"]) / "train.bin")
        return ds.X_v.shape[1], ds.X_a.shape[1], ds.n_classes

    def model_spec(self, **override) -> ModelSpec:
        d = dict(self.model)
        names = {f.name for f in fields(ModelSpec)}
        extra = set(d) - names
        if extra:
            raise ConfigFieldError(sorted(extra)[0], f"unknown model field {sorted(extra)[0]!r}")
        if not {"in_v", "in_a", "n_classes"} <= set(d) or override:
            in_v, in_a, C = self.input_dims()
            d.setdefault("in_v", in_v)
            d.setdefault("in_a", in_a)
            d.setdefault("n_classes", C)
        d.update(override)
        try:
            return ModelSpec(**d)
        except (ConfigError, TypeError) as e:
            key = getattr(e, "key", "model")
            raise ConfigFieldError(key, str(e)) from None

    def datasets(self) -> tuple[Dataset, Dataset, Dataset]:
        s = self.synth_spec()
        if s is not None:
            return generate(s)
        root = Path(self.data["path"])
        return tuple(load_dataset(root / f"{split}.bin")[0] for split in SPLITS)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "model": dict(self.model),
            "data": copy.deepcopy(self.data),
            "balancer": self.balancer.to_dict(),
            "lr_base": self.lr_base,
            "epochs": self.epochs,
            "batch": self.batch,
            "seed": self.seed,
            "momentum": self.momentum,
            "ece_bins": self.ece_bins,
            "gradcheck": copy.deepcopy(self.gradcheck),
            "diag": copy.deepcopy(self.diag),
            "plot": copy.deepcopy(self.plot),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        version = d.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigFieldError("schema_version", f"unsupported schema_version {version!r}")
        for key in ("model", "data", "balancer"):
            if key not in d:
                raise ConfigFieldError(key, f"missing required section {key!r}")
        allowed = {f.name for f in fields(cls)}
        extra = set(d) - allowed
        if extra:
            raise ConfigFieldError(sorted(extra)[0], f"unknown config key {sorted(extra)[0]!r}")
        bd = dict(d.pop("balancer"))
        bnames = {f.name for f in fields(bal.BalancerConfig)}
        if set(bd) - bnames:
            k = sorted(set(bd) - bnames)[0]
            raise ConfigFieldError(k, f"unknown balancer field {k!r}")
        try:
            balancer = bal.BalancerConfig(**bd)
        except ConfigError as e:
            key = next((k for k in bd if k in str(e)), "balancer")
            raise ConfigFieldError(key, str(e)) from None
        return cls(balancer=balancer, **d)

    def with_seed(self, seed: int) -> "RunConfig":
        d = self.to_dict()
        d["seed"] = int(seed)
        return RunConfig.from_dict(d)


def _key_line(text: str, key: str) -> int | None:
    m = re.search(r'"%s"\s*:' % re.escape(str(key)), text)
    if m is None:
        return None
    return text.count("\n", 0, m.start()) + 1


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse a JSON run config; errors carry ``source:line`` prefixes."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{source}:{e.lineno}:{e.colno}: invalid JSON: {e.msg}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}:1: config must be a JSON object")
    try:
        return RunConfig.from_dict(raw)
    except ConfigFieldError as e:
        line = _key_line(text, e.key)
        where = f"{source}:{line}" if line else source
        raise ConfigError(f"{where}: {e}") from None
    except TypeError as e:
        raise ConfigError(f"{source}: {e}") from None


def load_config(path) -> RunConfig:
    path = Path(path)
    return parse_config(path.read_text(), str(path))


def load_preset(name: str = "competition", **changes) -> RunConfig:
    """Load a bundled config; top-level ``changes`` replace fields (e.g. method via ``balancer``)."""
    ref = resources.files("mlb_lab") / "presets" / f"{name}.json"
    if not ref.is_file():
        raise ConfigError(f"no bundled preset {name!r}")
    d = json.loads(ref.read_text())
    for key, value in changes.items():
        if isinstance(value, dict) and isinstance(d.get(key), dict):
            d[key] = {**d[key], **value}
        else:
            d[key] = value
    return RunConfig.from_dict(d)


# ---------------------------------------------------------------------------
# training


@dataclass
class RunResult:
    records: list[dict]
    trace: list[dict]
    summary: dict
    model: Model
    best_params: dict


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def rows_to_csv(rows: list[dict], columns) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in columns])
    return buf.getvalue()


def _report_dict(rep: EvalReport) -> dict:
    d = rep.to_dict()
    if rep.acc_uni is not None:
        d["acc_v"] = rep.acc_uni["v"]
        d["acc_a"] = rep.acc_uni["a"]
    return d


def _epoch_record(epoch, sums, n_seen, train_correct, k_sum, n_steps, val: EvalReport, heads):
    rec = {
        "epoch": epoch,
        "L_total": sums["L"] / n_seen,
        "CE_mm": sums["mm"] / n_seen,
        "CE_v": sums["v"] / n_seen if heads else None,
        "CE_a": sums["a"] / n_seen if heads else None,
        "train_acc_mm": train_correct / n_seen,
        "val_acc_mm": val.acc_mm,
        "val_acc_v": val.acc_uni["v"] if val.acc_uni else None,
        "val_acc_a": val.acc_uni["a"] if val.acc_uni else None,
        "k_v": k_sum[0] / n_steps if n_steps else 1.0,
        "k_a": k_sum[1] / n_steps if n_steps else 1.0,
        "val_ece": val.ece,
    }
    return rec


def train(cfg: RunConfig, datasets=None, out_dir=None) -> RunResult:
    """Train one model per ``cfg``; optionally write run artifacts to ``out_dir``.

    Raises:
        NonFiniteLossError: when a batch loss is NaN or infinite.
    """
    train_ds, val_ds, test_ds = datasets if datasets is not None else cfg.datasets()
    spec = cfg.model_spec()
    rng = RngStream(cfg.seed)
    model = Model.init(spec, rng.substream("init"))
    shuffle = rng.substream("shuffle")
    bcfg = cfg.balancer
    objective = bcfg.objective
    cos = bcfg.cosine_scale if bcfg.method == "mmcosine" else None
    state = bal.BalancerState(2)

    records, trace = [], []
    step = 0

    def pass_stats(ds):
        sums = dict(L=0.0, mm=0.0, v=0.0, a=0.0)
        correct = 0
        for b in minibatches(ds, 1024):
            fo = model.forward(b.xv, b.xa, cos)
            L, terms = multi_loss(fo, b.y, objective)
            n = len(b.y)
            sums["L"] += L * n
            for key, val in terms.items():
                sums[key] += val * n
            correct += int((np.argmax(fo.logits_mm, axis=1) == b.y).sum())
        return sums, correct

    sums, correct = pass_stats(train_ds)
    val = evaluate(model, val_ds, cfg.ece_bins, cos)
    records.append(_epoch_record(0, sums, len(train_ds), correct, [1.0, 1.0], 1, val, spec.heads))
    best = (val.acc_mm, 0, model.copy_params())

    for epoch in range(1, cfg.epochs + 1):
        sums = dict(L=0.0, mm=0.0, v=0.0, a=0.0)
        correct = 0
        k_sum = [0.0, 0.0]
        n_steps = 0
        for b in minibatches(train_ds, cfg.batch, shuffle):
            step += 1
            fo = model.forward(b.xv, b.xa, cos)
            L, terms = multi_loss(fo, b.y, objective)
            if not math.isfinite(L):
                raise NonFiniteLossError(step, L)
            n = len(b.y)
            sums["L"] += L * n
            for key, v in terms.items():
                sums[key] += v * n
            correct += int((np.argmax(fo.logits_mm, axis=1) == b.y).sum())
            model.accumulate(fo, b.y, objective)
            k = bal.update(state, fo.logits_uni, b.y, bcfg)
            bal.apply(k, model.groups, cfg.lr_base, cfg.momentum)
            k_sum[0] += k[0]
            k_sum[1] += k[1]
            n_steps += 1
            if bcfg.method in ("mlb", "ogm"):
                trace.append({
                    "epoch": epoch, "step": step,
                    "k_a": float(k[1]), "k_v": float(k[0]),
                    "r_a": float(state.r[1]), "r_v": float(state.r[0]),
                    "s_a": float(state.s[1]), "s_v": float(state.s[0]),
                })
        val = evaluate(model, val_ds, cfg.ece_bins, cos)
        rec = _epoch_record(epoch, sums, len(train_ds), correct, k_sum, n_steps, val, spec.heads)
        records.append(rec)
        log.info("epoch %d L=%.4f val_acc=%.4f k=(%.3f, %.3f)", epoch, rec["L_total"],
                 val.acc_mm, rec["k_v"], rec["k_a"])
        if val.acc_mm > best[0]:
            best = (val.acc_mm, epoch, model.copy_params())

    best_acc, best_epoch, best_params = best
    final_params = model.copy_params()
    model.load_params(best_params)
    test = evaluate(model, test_ds, cfg.ece_bins, cos)
    val_best = evaluate(model, val_ds, cfg.ece_bins, cos)
    model.load_params(final_params)
    summary = {
        "schema_version": SCHEMA_VERSION,
        "method": bcfg.method,
        "fusion": spec.fusion,
        "seed": cfg.seed,
        "best_epoch": best_epoch,
        "best_val_acc_mm": best_acc,
        "val": _report_dict(val_best),
        "test": _report_dict(test),
        "n_params": model.n_params(),
        "config": cfg.to_dict(),
    }
    result = RunResult(records, trace, summary, model, best_params)
    if out_dir is not None:
        write_run(out_dir, cfg, result)
    return result


def write_run(out_dir, cfg: RunConfig, result: RunResult) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "epochs.csv", rows_to_csv(result.records, EPOCH_COLUMNS))
    atomic_write_text(out / "trace.csv", rows_to_csv(result.trace, TRACE_COLUMNS))
    atomic_write_text(out / "summary.json", json.dumps(result.summary, indent=2, sort_keys=True) + "\n")
    atomic_write_text(out / "config.json", cfg.to_json())
    atomic_write_bytes(out / "checkpoint.bin", checkpoint_bytes(result.model.spec, result.best_params))


# ---------------------------------------------------------------------------
# unimodal ceiling


def train_unimodal(cfg: RunConfig, m: int, datasets=None) -> float:
    """Test accuracy of modality ``m``'s encoder and head trained alone.

    Uses the run's encoder architecture, optimizer settings and best-val
    checkpoint selection.
    """
    train_ds, val_ds, test_ds = datasets if datasets is not None else cfg.datasets()
    spec = cfg.model_spec()
    mod = MODALITIES[m]
    rng = RngStream(cfg.seed).substream(f"unimodal_init_{mod}")
    shuffle = RngStream(cfg.seed).substream(f"unimodal_shuffle_{mod}")
    widths = spec.encoder_widths(m)
    params = {}
    for layer in range(spec.encoder_depth):
        params[f"enc_{mod}.{layer}.W"] = he_uniform(widths[layer + 1], widths[layer], rng)
        params[f"enc_{mod}.{layer}.b"] = np.zeros((1, widths[layer + 1]))
    params[f"head_{mod}.W"] = linear_uniform(spec.n_classes, spec.feat_dim(m), rng)
    params[f"head_{mod}.b"] = np.zeros((1, spec.n_classes))
    grads = {n: np.zeros_like(p) for n, p in params.items()}
    names = list(params)
    group = ParamGroup(f"unimodal_{mod}", [params[n] for n in names], [grads[n] for n in names], f"encoder:{m}")

    def logits(ds):
        x = ds.X_v if m == 0 else ds.X_a
        phi, _ = encode_forward(spec, params, x, m)
        return dense_forward(params[f"head_{mod}.W"], params[f"head_{mod}.b"], phi)

    best_val, best_test = top1(logits(val_ds), val_ds.y), top1(logits(test_ds), test_ds.y)
    for _ in range(cfg.epochs):
        for b in minibatches(train_ds, cfg.batch, shuffle):
            x = b.xv if m == 0 else b.xa
            phi, cache = encode_forward(spec, params, x, m)
            lg = dense_forward(params[f"head_{mod}.W"], params[f"head_{mod}.b"], phi)
            _, dl, _ = softmax_ce(lg, b.y)
            dphi, dW, db = dense_backward(params[f"head_{mod}.W"], phi, dl)
            g = {f"head_{mod}.W": dW, f"head_{mod}.b": db}
            encode_backward(spec, params, cache, dphi, m, g)
            for n, v in g.items():
                grads[n] += v
            sgd_step(group, cfg.lr_base, 1.0, cfg.momentum)
        acc = top1(logits(val_ds), val_ds.y)
        if acc > best_val:
            best_val, best_test = acc, top1(logits(test_ds), test_ds.y)
    return best_test


# ---------------------------------------------------------------------------
# sweeps


def _run_seed(args):
    cfg_dict, seed, out_dir = args
    cfg = RunConfig.from_dict(cfg_dict).with_seed(seed)
    res = train(cfg, out_dir=out_dir)
    return seed, res.summary


def aggregate(summaries: list[dict]) -> dict:
    out = {"seeds": [s["seed"] for s in summaries], "n_runs": len(summaries), "metrics": {}}
    for key in SUMMARY_METRICS:
        vals = [s["test"].get(key) for s in summaries]
        if any(v is None for v in vals):
            continue
        arr = np.array(vals, dtype=np.float64)
        out["metrics"][key] = {"mean": float(arr.mean()), "std": float(arr.std()), "values": arr.tolist()}
    return out


def sweep(cfg: RunConfig, seeds, out_dir=None, jobs: int = 1) -> dict:
    """Train once per seed and aggregate test metrics as mean and population std."""
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ConfigError("a sweep needs at least one seed")
    tasks = []
    for i, s in enumerate(seeds):
        sub = None if out_dir is None else str(Path(out_dir) / f"run_{i:03d}_seed_{s}")
        tasks.append((cfg.to_dict(), s, sub))
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_run_seed, tasks))
    else:
        results = [_run_seed(t) for t in tasks]
    agg = aggregate([summary for _, summary in results])
    agg["method"] = cfg.balancer.method
    if out_dir is not None:
        atomic_write_text(Path(out_dir) / "sweep.json", json.dumps(agg, indent=2, sort_keys=True) + "\n")
    return agg
