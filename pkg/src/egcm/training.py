"""Training loop, checkpoints, macro-F1 evaluation and the experiment sweeps."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import struct
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import IO, Iterable, Sequence

import numpy as np

from . import numcore as nc
from .augment import MixupConfig, mp_mixup
from .contrastive import ContrastiveConfig, build_contrastive_sets, contrastive_loss
from .flows import FlowRecord, NormStats, apply_normalizer, fit_normalizer, stratified_split, stratified_subsample
from .graph import add_virtual_edges, build_graph, message_index
from .model import ModelConfig, ParameterSet, forward, init_params, layer_shapes
from .numcore import Tensor

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
CHECKPOINT_MAGIC = b"EGCM"
CHECKPOINT_VERSION = 1

DEFAULT_FRACTIONS = (0.01, 0.05, 0.10, 0.20, 0.30, 0.40, 0.50, 0.60, 0.70)
DEFAULT_SIGMAS = (100, 200, 300, 400, 500, 1000, 2000)
SPLIT_FRACTIONS = (0.7, 0.1, 0.2)


class NumericalError(RuntimeError):
    """Training produced a non-finite loss."""


class CheckpointError(ValueError):
    """A checkpoint file is malformed or of an unknown version."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    lr: float = 0.01
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    enable_mixup: bool = True
    enable_contrastive: bool = True
    train_fraction: float = 1.0
    normalization: str = "zscore"
    model: ModelConfig = field(default_factory=ModelConfig)
    mixup: MixupConfig = field(default_factory=MixupConfig)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        if not 0 < self.train_fraction <= 1:
            raise ValueError("train_fraction must be in (0, 1]")

    @property
    def theta(self) -> float:
        return self.contrastive.theta

    @property
    def method(self) -> str:
        return {
            (True, True): "EG-ConMix",
            (False, True): "EG-Con",
            (True, False): "EG-Mix",
            (False, False): "E-GraphSAGE",
        }[(self.enable_mixup, self.enable_contrastive)]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["model"] = ModelConfig(**d.get("model", {}))
        d["mixup"] = MixupConfig(**d.get("mixup", {}))
        d["contrastive"] = ContrastiveConfig(**d.get("contrastive", {}))
        d["seeds"] = tuple(d.get("seeds", (0,)))
        return cls(**d)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------


def cross_entropy(probs, labels, mask=None) -> Tensor:
    """Mean binary cross-entropy on class-1 probabilities over masked edges.

    Probabilities are clamped to ``[1e-12, 1 - 1e-12]`` before the log; the
    gradient is zero where the clamp is active.
    """
    probs = nc.as_tensor(probs)
    labels = np.asarray(labels, dtype=np.float64)
    idx = np.arange(len(labels)) if mask is None else np.asarray(mask)
    if idx.dtype == bool:
        idx = np.flatnonzero(idx)
    if len(idx) == 0:
        raise ValueError("cross_entropy mask selects no edges")
    p_raw = probs.data[idx, 1]
    p = np.clip(p_raw, PROB_FLOOR, 1.0 - PROB_FLOOR)
    y = labels[idx]
    n = len(idx)
    loss = float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))))
    inside = (p_raw > PROB_FLOOR) & (p_raw < 1.0 - PROB_FLOOR)

    def backward(g):
        d = np.zeros_like(probs.data)
        d[idx, 1] = float(g) * inside * (-(y / p) + (1.0 - y) / (1.0 - p)) / n
        probs._accumulate(d)

    return nc.custom(np.asarray(loss), (probs,), backward, "cross_entropy")


def total_loss(loss_c, loss_k, theta: float) -> Tensor:
    """``loss_c + theta * loss_k``."""
    return nc.add(loss_c, nc.scale(loss_k, theta))


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------


@dataclass
class MetricsReport:
    precision: tuple[float, float]
    recall: tuple[float, float]
    f1: tuple[float, float]
    macro_f1: float
    confusion: list[list[int]]  # confusion[true][pred]
    macro_f1_std: float = 0.0
    per_seed: list[float] = field(default_factory=list)
    method: str = ""
    config_fingerprint: str = ""
    wall_seconds: float = 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["precision"], d["recall"], d["f1"] = list(self.precision), list(self.recall), list(self.f1)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        d = dict(d)
        for k in ("precision", "recall", "f1"):
            d[k] = tuple(d[k])
        return cls(**d)


def classification_report(y_true: Sequence[int], y_pred: Sequence[int], warn: bool = True) -> MetricsReport:
    """Per-class precision/recall/F1 and their unweighted mean.

    Undefined ratios count as 0; a class absent from ``y_true`` gets F1 = 0.
    """
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    conf = np.zeros((2, 2), dtype=np.int64)
    np.add.at(conf, (y_true, y_pred), 1)
    prec, rec, f1 = [], [], []
    for c in (0, 1):
        tp = conf[c, c]
        predicted = conf[:, c].sum()
        actual = conf[c, :].sum()
        if actual == 0 and warn:
            logger.warning("class %d absent from evaluation labels; its F1 is reported as 0", c)
        p = tp / predicted if predicted else 0.0
        r = tp / actual if actual else 0.0
        prec.append(float(p))
        rec.append(float(r))
        f1.append(float(2 * p * r / (p + r)) if p + r > 0 and actual else 0.0)
    return MetricsReport(tuple(prec), tuple(rec), tuple(f1), float(np.mean(f1)), conf.tolist())


def aggregate_reports(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Mean of per-class rates, summed confusion, mean and population std of macro-F1."""
    scores = np.array([r.macro_f1 for r in reports])
    mean_of = lambda attr: tuple(float(np.mean([getattr(r, attr)[c] for r in reports])) for c in (0, 1))  # noqa: E731
    conf = np.sum([np.array(r.confusion) for r in reports], axis=0).tolist()
    return MetricsReport(
        precision=mean_of("precision"),
        recall=mean_of("recall"),
        f1=mean_of("f1"),
        macro_f1=float(scores.mean()),
        confusion=conf,
        macro_f1_std=float(scores.std()),
        per_seed=scores.tolist(),
    )


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


@dataclass(eq=False)
class Checkpoint:
    model: ModelConfig
    params: ParameterSet
    norm_stats: NormStats
    feature_dim: int
    train_seed: int = 0
    remap_seed: int | None = None
    metadata: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        header = {
            "model": asdict(self.model),
            "feature_dim": self.feature_dim,
            "norm_stats": self.norm_stats.to_dict(),
            "train_seed": self.train_seed,
            "remap_seed": self.remap_seed,
            "metadata": self.metadata,
            "params": [{"name": n, "shape": list(a.shape)} for n, a in zip(self.params.names, self.params.arrays)],
        }
        blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in self.params.arrays)
        return CHECKPOINT_MAGIC + struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)) + blob + body

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if data[:4] != CHECKPOINT_MAGIC:
            raise CheckpointError("not a checkpoint: bad magic bytes")
        if len(data) < 16:
            raise CheckpointError("truncated checkpoint header")
        version, n = struct.unpack("<IQ", data[4:16])
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        try:
            header = json.loads(data[16 : 16 + n].decode("utf-8"))
            model = ModelConfig(**header["model"])
            offset = 16 + n
            names, arrays = [], []
            for spec in header["params"]:
                shape = tuple(spec["shape"])
                count = int(np.prod(shape))
                chunk = data[offset : offset + 8 * count]
                if len(chunk) != 8 * count:
                    raise CheckpointError("truncated parameter payload")
                arrays.append(np.frombuffer(chunk, dtype="<f8").astype(np.float64).reshape(shape))
                names.append(spec["name"])
                offset += 8 * count
            if offset != len(data):
                raise CheckpointError("trailing bytes after parameter payload")
            expected = [(nm, shp) for nm, shp in layer_shapes(model, header["feature_dim"])]
            if expected != [(nm, a.shape) for nm, a in zip(names, arrays)]:
                raise CheckpointError("parameter shapes do not match the stored model config")
            return cls(
                model=model,
                params=ParameterSet(tuple(names), tuple(arrays)),
                norm_stats=NormStats.from_dict(header["norm_stats"]),
                feature_dim=header["feature_dim"],
                train_seed=header["train_seed"],
                remap_seed=header["remap_seed"],
                metadata=header["metadata"],
            )
        except CheckpointError:
            raise
        except (KeyError, TypeError, ValueError, UnicodeDecodeError) as exc:
            raise CheckpointError(f"corrupt checkpoint: {exc}") from exc

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    loss_c: float
    loss_k: float
    loss: float
    val_macro_f1: float


HISTORY_HEADER = ("epoch", "L_c", "L_k", "L", "val_macro_f1")


def write_history(history: Sequence[EpochRecord], stream: IO) -> None:
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(HISTORY_HEADER)
    for h in history:
        w.writerow([h.epoch, repr(h.loss_c), repr(h.loss_k), repr(h.loss), repr(h.val_macro_f1)])


def _streams(seed: int) -> dict[str, np.random.Generator]:
    names = ("init", "mixup", "contrastive", "dropout")
    seqs = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(s) for n, s in zip(names, seqs)}


def _check_finite(value: float, epoch: int, term: str) -> None:
    if not math.isfinite(value):
        raise NumericalError(f"epoch {epoch}: {term} is not finite ({value})")


def train(
    train_records: Sequence[FlowRecord],
    val_records: Sequence[FlowRecord],
    config: TrainConfig,
    seed: int = 0,
    remap_seed: int | None = None,
    metadata: dict | None = None,
) -> tuple[Checkpoint, list[EpochRecord]]:
    """Fit the model on ``train_records`` and select the best validation epoch.

    Records are un-normalized; the normalizer is fitted on the training split
    and stored in the checkpoint. Each epoch draws a fresh Mixup batch (if
    enabled), runs a full-graph forward pass over the augmented training
    graph, adds the InfoNCE term (if enabled) and takes one Adam step.
    """
    if not train_records:
        raise ValueError("training split is empty")
    rngs = _streams(seed)
    norm = fit_normalizer(train_records, config.normalization)
    train_n = apply_normalizer(train_records, norm)
    val_n = apply_normalizer(val_records, norm)
    base = build_graph(train_n)
    labels = base.labels
    n_attack = int(labels.sum())
    n_benign = len(labels) - n_attack

    use_mixup = config.enable_mixup and config.mixup.sigma > 0
    if use_mixup and (n_attack == 0 or n_benign == 0):
        logger.warning("training split lacks a class; Mixup disabled")
        use_mixup = False
    use_con = config.enable_contrastive
    if use_con and (n_attack == 0 or n_benign == 0 or (n_attack < 2 and not use_mixup)):
        logger.warning("training split cannot form contrastive pairs; InfoNCE disabled")
        use_con = False

    d = base.feature_dim
    params = init_params(config.model, d, seed=int(rngs["init"].integers(2**31)))
    state = nc.AdamState.zeros_like(params.arrays)
    base_index = None if config.model.fanout else message_index(base)

    val_graph = build_graph(train_n + val_n) if val_n else None
    val_index = message_index(val_graph) if val_graph is not None else None
    val_slice = slice(len(train_n), len(train_n) + len(val_n))
    val_true = val_graph.labels[val_slice] if val_graph is not None else None

    history: list[EpochRecord] = []
    # best validation macro-F1; ties go to the lower validation cross-entropy
    best_key, best_f1, best_params = (-math.inf, -math.inf), -1.0, params
    for epoch in range(1, config.epochs + 1):
        graph, index = base, base_index
        if use_mixup:
            batch = mp_mixup(base.edge_features, base.labels, config.mixup, rngs["mixup"])
            graph, index = add_virtual_edges(base, batch), None
        if index is None:
            index = message_index(graph, config.model.fanout, rngs["dropout"] if config.model.fanout else None)

        leaves = [Tensor(a, requires_grad=True) for a in params.arrays]
        out = forward(graph, leaves, config.model, training=True, rng=rngs["dropout"], index=index)
        loss_c = cross_entropy(out.probs, graph.labels)
        _check_finite(loss_c.item(), epoch, "L_c")
        if use_con:
            sets = build_contrastive_sets(graph, config.contrastive, rngs["contrastive"], warn=epoch == 1)
            loss_k = contrastive_loss(out.edge_embeddings, sets)
            _check_finite(loss_k.item(), epoch, "L_k")
            loss = total_loss(loss_c, loss_k, config.theta)
        else:
            loss_k, loss = None, loss_c
        _check_finite(loss.item(), epoch, "L")

        grads = nc.backward(loss, leaves)
        new_arrays, state = nc.adam_step(list(params.arrays), grads, state, config.lr)
        params = params.replace_arrays(new_arrays)

        if val_graph is not None:
            probs = forward(val_graph, params, config.model, index=val_index).probs.data
            val_f1 = classification_report(val_true, probs[val_slice].argmax(axis=1), warn=epoch == 1).macro_f1
            val_ce = cross_entropy(probs[val_slice], val_true).item()
            key = (val_f1, -val_ce)
            if key > best_key:
                best_key, best_f1, best_params = key, val_f1, params
        else:
            val_f1 = float("nan")
            best_f1, best_params = val_f1, params
        history.append(
            EpochRecord(epoch, loss_c.item(), loss_k.item() if loss_k is not None else 0.0, loss.item(), val_f1)
        )

    meta = {"method": config.method, "train_config": config.to_dict(), "best_val_macro_f1": best_f1}
    meta.update(metadata or {})
    ckpt = Checkpoint(config.model, best_params.copy(), norm, d, train_seed=seed, remap_seed=remap_seed, metadata=meta)
    return ckpt, history


def evaluate(
    checkpoint: Checkpoint,
    records: Sequence[FlowRecord],
    context: Sequence[FlowRecord] = (),
) -> MetricsReport:
    """Score ``records`` on the graph of ``context + records``.

    Only the ``records`` edges are scored; context edges provide structure
    and their labels are never read.
    """
    if not records:
        raise ValueError("nothing to evaluate")
    t0 = time.perf_counter()
    ctx = apply_normalizer(context, checkpoint.norm_stats)
    recs = apply_normalizer(records, checkpoint.norm_stats)
    graph = build_graph(list(ctx) + list(recs))
    probs = forward(graph, checkpoint.params, checkpoint.model).probs.data[len(ctx):]
    y_true = [r.label for r in records]
    report = classification_report(y_true, probs.argmax(axis=1))
    report.per_seed = [report.macro_f1]
    report.method = checkpoint.metadata.get("method", "")
    report.wall_seconds = time.perf_counter() - t0
    return report


# --------------------------------------------------------------------------
# multi-seed runs and sweeps
# --------------------------------------------------------------------------


def run_one(records: Sequence[FlowRecord], config: TrainConfig, seed: int) -> MetricsReport:
    """Split with ``seed``, train on the (optionally subsampled) train split,
    and evaluate on the test split in the context of the training edges."""
    t0 = time.perf_counter()
    train_r, val_r, test_r = stratified_split(records, SPLIT_FRACTIONS, seed)
    if config.train_fraction < 1:
        train_r = stratified_subsample(train_r, config.train_fraction, seed)
    ckpt, _ = train(train_r, val_r, config, seed)
    report = evaluate(ckpt, test_r, context=train_r)
    report.wall_seconds = time.perf_counter() - t0
    return report


def _cell(args):
    records, config, seed = args
    return run_one(records, config, seed)


def _run_cells(records, cells: list[tuple[TrainConfig, int]], workers: int) -> list[MetricsReport]:
    jobs = [(records, cfg, seed) for cfg, seed in cells]
    if workers <= 1 or len(jobs) <= 1:
        return [_cell(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_cell, jobs))


def run_seeds(records: Sequence[FlowRecord], config: TrainConfig, workers: int = 1) -> MetricsReport:
    t0 = time.perf_counter()
    reports = _run_cells(records, [(config, s) for s in config.seeds], workers)
    agg = aggregate_reports(reports)
    agg.method = config.method
    agg.config_fingerprint = config.fingerprint()
    agg.wall_seconds = time.perf_counter() - t0
    return agg


@dataclass(frozen=True)
class SweepRow:
    value: float
    seed_count: int
    macro_f1_mean: float
    macro_f1_std: float
    wall_seconds: float


SWEEP_HEADER = ("fraction_or_sigma", "seed_count", "macro_f1_mean", "macro_f1_std", "wall_seconds")


def _sweep(records, configs: list[tuple[float, TrainConfig]], workers: int) -> list[SweepRow]:
    cells = [(cfg, s) for _, cfg in configs for s in cfg.seeds]
    reports = _run_cells(records, cells, workers)
    rows, k = [], 0
    for value, cfg in configs:
        chunk = reports[k : k + len(cfg.seeds)]
        k += len(cfg.seeds)
        agg = aggregate_reports(chunk)
        rows.append(SweepRow(value, len(chunk), agg.macro_f1, agg.macro_f1_std, float(sum(r.wall_seconds for r in chunk))))
    return rows


def fraction_sweep(
    records: Sequence[FlowRecord],
    config: TrainConfig,
    fractions: Iterable[float] = DEFAULT_FRACTIONS,
    workers: int = 1,
) -> list[SweepRow]:
    """Macro-F1 when training on a stratified fraction of the train split."""
    return _sweep(records, [(float(f), replace(config, train_fraction=float(f))) for f in fractions], workers)


def mixup_count_sweep(
    records: Sequence[FlowRecord],
    config: TrainConfig,
    sigmas: Iterable[int] = DEFAULT_SIGMAS,
    workers: int = 1,
) -> list[SweepRow]:
    """Macro-F1 as a function of the number of Mixup pairs per pattern."""
    return _sweep(records, [(int(s), replace(config, mixup=replace(config.mixup, sigma=int(s)))) for s in sigmas], workers)


def write_sweep_csv(rows: Sequence[SweepRow], stream: IO) -> None:
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(SWEEP_HEADER)
    for r in rows:
        value = int(r.value) if float(r.value).is_integer() and r.value >= 1 else r.value
        w.writerow([value, r.seed_count, repr(r.macro_f1_mean), repr(r.macro_f1_std), f"{r.wall_seconds:.3f}"])


def sweep_digest(rows: Sequence[SweepRow]) -> str:
    """Hash of the deterministic sweep columns (everything but wall time)."""
    blob = json.dumps([[r.value, r.seed_count, r.macro_f1_mean.hex(), r.macro_f1_std.hex()] for r in rows])
    return hashlib.sha256(blob.encode()).hexdigest()
