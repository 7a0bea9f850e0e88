"""Run configuration: INI-style files, flag overrides and manifests."""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .augment import MixupConfig
from .contrastive import ContrastiveConfig
from .flows import DEFAULT_REMAP_RANGE, FlowSchema
from .model import ModelConfig
from .training import DEFAULT_FRACTIONS, DEFAULT_SIGMAS, TrainConfig

ARTIFACT_VERSION = "0.1.0"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    schema: FlowSchema = field(default_factory=FlowSchema)
    train: TrainConfig = field(default_factory=TrainConfig)
    input: str | None = None
    out: str = "egcm-out"
    seed: int = 0
    remap_range: tuple[str, str] = DEFAULT_REMAP_RANGE
    fractions: tuple[float, ...] = DEFAULT_FRACTIONS
    sigmas: tuple[int, ...] = DEFAULT_SIGMAS

    def to_dict(self) -> dict:
        return {
            "schema": self.schema.to_dict(),
            "train": self.train.to_dict(),
            "input": self.input,
            "out": self.out,
            "seed": self.seed,
            "remap_range": list(self.remap_range),
            "fractions": list(self.fractions),
            "sigmas": list(self.sigmas),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return cls(
            schema=FlowSchema.from_dict(d["schema"]),
            train=TrainConfig.from_dict(d["train"]),
            input=d.get("input"),
            out=d.get("out", "egcm-out"),
            seed=int(d.get("seed", 0)),
            remap_range=tuple(d.get("remap_range", DEFAULT_REMAP_RANGE)),
            fractions=tuple(float(x) for x in d.get("fractions", DEFAULT_FRACTIONS)),
            sigmas=tuple(int(x) for x in d.get("sigmas", DEFAULT_SIGMAS)),
        )


def _split_list(text: str) -> list[str]:
    return [t.strip() for t in text.replace("\n", ",").split(",") if t.strip()]


def _coerce(kind: type, raw: str, key: str):
    try:
        if kind is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from None
    return raw


def _section(cp: configparser.ConfigParser, name: str, target, prefix: str):
    if not cp.has_section(name):
        return target
    known = {f.name: f for f in fields(target)}
    updates: dict[str, Any] = {}
    for key, raw in cp.items(name):
        if key not in known:
            raise ConfigError(f"unknown key [{name}] {key}")
        default = getattr(target, key)
        if key == "fanout":
            updates[key] = None if raw.strip().lower() in ("", "all", "none") else _coerce(int, raw, f"{prefix}.{key}")
        elif key == "seeds":
            updates[key] = tuple(_coerce(int, x, f"{prefix}.seeds") for x in _split_list(raw))
        else:
            updates[key] = _coerce(type(default), raw, f"{prefix}.{key}")
    try:
        return replace(target, **updates)
    except ValueError as exc:
        raise ConfigError(f"[{name}]: {exc}") from exc


def parse_ini(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config file: {exc}") from exc
    known = {"schema", "model", "mixup", "contrastive", "train", "paths", "run", "sweep"}
    extra = set(cp.sections()) - known
    if extra:
        raise ConfigError(f"unknown config section(s): {sorted(extra)}")

    schema = cfg.schema
    if cp.has_section("schema"):
        s = dict(cp.items("schema"))
        kinds = dict(schema.kinds)
        for col in _split_list(s.pop("categorical", "")):
            kinds[col] = "categorical"
        for col in _split_list(s.pop("ignored", "")):
            kinds[col] = "ignored"
        feats = _split_list(s.pop("features", "")) or list(schema.features)
        unknown = set(s) - {"src_ip", "src_port", "dst_ip", "dst_port", "label"}
        if unknown:
            raise ConfigError(f"unknown key(s) in [schema]: {sorted(unknown)}")
        try:
            schema = replace(schema, features=tuple(feats), kinds=kinds, **s)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    train = cfg.train
    train = replace(
        train,
        model=_section(cp, "model", train.model, "model"),
        mixup=_section(cp, "mixup", train.mixup, "mixup"),
        contrastive=_section(cp, "contrastive", train.contrastive, "contrastive"),
    )
    train = _section(cp, "train", train, "train")

    updates: dict[str, Any] = {"schema": schema, "train": train}
    if cp.has_section("paths"):
        p = dict(cp.items("paths"))
        if "input" in p:
            updates["input"] = p.pop("input").strip() or None
        if "out" in p:
            updates["out"] = p.pop("out")
        if p:
            raise ConfigError(f"unknown key(s) in [paths]: {sorted(p)}")
    if cp.has_section("run"):
        r = dict(cp.items("run"))
        if "seed" in r:
            updates["seed"] = _coerce(int, r.pop("seed"), "run.seed")
        if "remap_range" in r:
            lo_hi = _split_list(r.pop("remap_range").replace("-", ","))
            if len(lo_hi) != 2:
                raise ConfigError("run.remap_range needs two addresses")
            updates["remap_range"] = tuple(lo_hi)
        if r:
            raise ConfigError(f"unknown key(s) in [run]: {sorted(r)}")
    if cp.has_section("sweep"):
        sw = dict(cp.items("sweep"))
        if "fractions" in sw:
            updates["fractions"] = tuple(_coerce(float, x, "sweep.fractions") for x in _split_list(sw.pop("fractions")))
        if "sigmas" in sw:
            updates["sigmas"] = tuple(_coerce(int, x, "sweep.sigmas") for x in _split_list(sw.pop("sigmas")))
        if sw:
            raise ConfigError(f"unknown key(s) in [sweep]: {sorted(sw)}")
    return replace(cfg, **updates)


def load_config(path: str | Path) -> RunConfig:
    """Read an INI config, or the config snapshot inside a run manifest."""
    text = Path(path).read_text(encoding="utf-8")
    if text.lstrip().startswith("{"):
        try:
            return RunConfig.from_dict(json.loads(text)["config"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"{path}: not a run manifest ({exc})") from exc
    return parse_ini(text)


def render_ini(cfg: RunConfig) -> str:
    s = cfg.schema
    t = cfg.train
    lines = ["[paths]", f"input = {cfg.input or ''}", f"out = {cfg.out}", ""]
    lines += ["[run]", f"seed = {cfg.seed}", f"remap_range = {cfg.remap_range[0]}, {cfg.remap_range[1]}", ""]
    lines += ["[schema]"]
    for k in ("src_ip", "src_port", "dst_ip", "dst_port", "label"):
        lines.append(f"{k} = {getattr(s, k)}")
    lines.append(f"features = {', '.join(s.features)}")
    lines.append(f"categorical = {', '.join(c for c, k in s.kinds.items() if k == 'categorical')}")
    lines.append(f"ignored = {', '.join(c for c, k in s.kinds.items() if k == 'ignored')}")
    lines.append("")
    for name, obj in (("model", t.model), ("mixup", t.mixup), ("contrastive", t.contrastive)):
        lines.append(f"[{name}]")
        for k, v in asdict(obj).items():
            lines.append(f"{k} = {'all' if v is None else v}")
        lines.append("")
    lines.append("[train]")
    for k in ("epochs", "lr", "enable_mixup", "enable_contrastive", "train_fraction", "normalization"):
        lines.append(f"{k} = {getattr(t, k)}")
    lines.append(f"seeds = {', '.join(map(str, t.seeds))}")
    lines.append("")
    lines += ["[sweep]", f"fractions = {', '.join(map(str, cfg.fractions))}", f"sigmas = {', '.join(map(str, cfg.sigmas))}", ""]
    return "\n".join(lines)


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
