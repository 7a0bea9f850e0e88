"""NetFlow CSV ingestion: parsing, IP remapping, normalization and splitting."""

from __future__ import annotations

import csv
import io
import ipaddress
import json
import logging
import math
from dataclasses import dataclass, field, replace
from typing import IO, Iterable, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_REMAP_RANGE = ("172.16.0.1", "172.31.0.1")
NORM_FORMAT_VERSION = 1


class SchemaError(ValueError):
    """A required column is missing or the schema is inconsistent."""

    def __init__(self, column: str, message: str | None = None):
        self.column = column
        super().__init__(message or f"missing column: {column}")


class RowError(ValueError):
    """A data row could not be parsed."""

    def __init__(self, row: int, message: str):
        self.row = row
        super().__init__(f"row {row}: {message}")


class CapacityError(ValueError):
    """The IP remap range is too small for the number of distinct addresses."""

    def __init__(self, needed: int, available: int):
        self.needed, self.available = needed, available
        super().__init__(f"remap range too small: need {needed} addresses, range holds {available}")


@dataclass(frozen=True)
class Endpoint:
    ip: str
    port: int


@dataclass(frozen=True, eq=False)
class FlowRecord:
    src: Endpoint
    dst: Endpoint
    features: np.ndarray
    label: int

    def __post_init__(self):
        if not (isinstance(self.features, np.ndarray) and self.features.dtype == np.float64 and not self.features.flags.writeable):
            object.__setattr__(self, "features", _frozen(np.array(self.features, dtype=np.float64)))

    def __eq__(self, other):
        if not isinstance(other, FlowRecord):
            return NotImplemented
        return (
            self.src == other.src
            and self.dst == other.dst
            and self.label == other.label
            and np.array_equal(self.features, other.features)
        )

    __hash__ = None


def _frozen(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    x.setflags(write=False)
    return x


@dataclass(frozen=True)
class FlowSchema:
    """Column layout of a flow CSV.

    ``features`` lists the edge-feature columns in vector order; an empty list
    means "every header column not otherwise claimed, as numeric".
    ``kinds`` maps a feature column to ``numeric`` (default), ``categorical``
    (one-hot) or ``ignored``. ``categories`` pins the one-hot vocabulary of a
    categorical column; missing vocabularies are inferred (sorted) on parse.
    """

    src_ip: str = "src_ip"
    src_port: str = "src_port"
    dst_ip: str = "dst_ip"
    dst_port: str = "dst_port"
    label: str = "label"
    features: tuple[str, ...] = ()
    kinds: Mapping[str, str] = field(default_factory=dict)
    categories: Mapping[str, tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "features", tuple(self.features))
        reserved = set(self.endpoint_columns) | {self.label}
        clash = reserved.intersection(self.features)
        if clash:
            raise SchemaError(sorted(clash)[0], f"column {sorted(clash)[0]!r} is both an endpoint/label and a feature")
        for col, kind in self.kinds.items():
            if kind not in ("numeric", "categorical", "ignored"):
                raise SchemaError(col, f"unknown column kind {kind!r} for {col!r}")

    @property
    def endpoint_columns(self) -> tuple[str, str, str, str]:
        return (self.src_ip, self.src_port, self.dst_ip, self.dst_port)

    def kind(self, column: str) -> str:
        return self.kinds.get(column, "numeric")

    def with_header(self, header: Sequence[str]) -> "FlowSchema":
        """Fill in the implicit feature list from a CSV header."""
        if self.features:
            return self
        reserved = set(self.endpoint_columns) | {self.label}
        return replace(self, features=tuple(c for c in header if c not in reserved))

    def feature_names(self) -> list[str]:
        """Names of the encoded feature-vector entries."""
        names = []
        for col in self.features:
            kind = self.kind(col)
            if kind == "numeric":
                names.append(col)
            elif kind == "categorical":
                names.extend(f"{col}={v}" for v in self.categories.get(col, ()))
        return names

    def to_dict(self) -> dict:
        return {
            "src_ip": self.src_ip,
            "src_port": self.src_port,
            "dst_ip": self.dst_ip,
            "dst_port": self.dst_port,
            "label": self.label,
            "features": list(self.features),
            "kinds": dict(self.kinds),
            "categories": {k: list(v) for k, v in self.categories.items()},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "FlowSchema":
        d = dict(d)
        d["features"] = tuple(d.get("features", ()))
        d["categories"] = {k: tuple(v) for k, v in d.get("categories", {}).items()}
        return cls(**d)


def _parse_label(cell: str, row: int) -> int:
    try:
        value = float(cell)
    except ValueError:
        raise RowError(row, f"label {cell!r} is not numeric") from None
    if value not in (0.0, 1.0):
        raise RowError(row, f"label must be 0 or 1, got {cell!r}")
    return int(value)


def _parse_port(cell: str, row: int) -> int:
    try:
        port = int(float(cell))
    except ValueError:
        raise RowError(row, f"port {cell!r} is not an integer") from None
    if not 0 <= port <= 65535:
        raise RowError(row, f"port {port} outside [0, 65535]")
    return port


def _parse_ip(cell: str, row: int) -> str:
    try:
        return str(ipaddress.IPv4Address(cell.strip()))
    except ValueError:
        raise RowError(row, f"invalid IPv4 address {cell!r}") from None


def read_flows(source: IO | str | bytes, schema: FlowSchema) -> tuple[list[FlowRecord], FlowSchema]:
    """Parse a flow CSV and return the records plus the fully resolved schema.

    The resolved schema has its feature list and categorical vocabularies
    filled in, so it can be stored and reused to parse further files with an
    identical feature layout.
    """
    if isinstance(source, bytes):
        source = io.StringIO(source.decode("utf-8"))
    elif isinstance(source, str):
        source = io.StringIO(source)
    elif isinstance(source, io.BufferedIOBase) or "b" in getattr(source, "mode", ""):
        source = io.TextIOWrapper(source, encoding="utf-8", newline="")

    reader = csv.reader(source)
    header = next(reader, None)
    if header is None:
        return [], schema
    header = [h.strip() for h in header]
    schema = schema.with_header(header)
    position = {name: i for i, name in enumerate(header)}
    used = [c for c in schema.features if schema.kind(c) != "ignored"]
    for col in (*schema.endpoint_columns, schema.label, *used):
        if col not in position:
            raise SchemaError(col)

    rows = [r for r in reader if r]
    categories = dict(schema.categories)
    for col in schema.features:
        if schema.kind(col) == "categorical" and col not in categories:
            j = position[col]
            categories[col] = tuple(sorted({r[j].strip() for r in rows if j < len(r)}))
    schema = replace(schema, categories=categories)

    plan = []
    for col in schema.features:
        kind = schema.kind(col)
        if kind == "numeric":
            plan.append((position[col], None))
        elif kind == "categorical":
            plan.append((position[col], {v: i for i, v in enumerate(categories[col])}))
    width = len(schema.feature_names())

    si, sp, di, dp = (position[c] for c in schema.endpoint_columns)
    li = position[schema.label]
    records = []
    for n, r in enumerate(rows):
        if len(r) != len(header):
            raise RowError(n, f"expected {len(header)} cells, found {len(r)}")
        feats = np.empty(width, dtype=np.float64)
        k = 0
        for j, vocab in plan:
            cell = r[j].strip()
            if vocab is None:
                try:
                    feats[k] = float(cell)
                except ValueError:
                    raise RowError(n, f"column {header[j]!r}: cannot parse {cell!r} as a number") from None
                if not math.isfinite(feats[k]):
                    raise RowError(n, f"column {header[j]!r}: non-finite value {cell!r}")
                k += 1
            else:
                feats[k : k + len(vocab)] = 0.0
                if cell not in vocab:
                    raise RowError(n, f"column {header[j]!r}: unknown category {cell!r}")
                feats[k + vocab[cell]] = 1.0
                k += len(vocab)
        records.append(
            FlowRecord(
                src=Endpoint(_parse_ip(r[si], n), _parse_port(r[sp], n)),
                dst=Endpoint(_parse_ip(r[di], n), _parse_port(r[dp], n)),
                features=_frozen(feats),
                label=_parse_label(r[li], n),
            )
        )
    return records, schema


def parse_flow_csv(source: IO | str | bytes, schema: FlowSchema) -> list[FlowRecord]:
    """Parse a flow CSV into records (see :func:`read_flows`)."""
    return read_flows(source, schema)[0]


def write_flow_csv(records: Sequence[FlowRecord], stream: IO, feature_names: Sequence[str] | None = None) -> None:
    """Write records in the default column layout (endpoints, features, label).

    Floats are written with ``repr`` so a reparse is exact.
    """
    dim = len(records[0].features) if records else len(feature_names or ())
    names = list(feature_names) if feature_names is not None else [f"f{i}" for i in range(dim)]
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(["src_ip", "src_port", "dst_ip", "dst_port", *names, "label"])
    for rec in records:
        w.writerow([rec.src.ip, rec.src.port, rec.dst.ip, rec.dst.port, *map(repr, rec.features.tolist()), rec.label])


# --------------------------------------------------------------------------
# IP remapping
# --------------------------------------------------------------------------


def remap_ips(
    records: Sequence[FlowRecord],
    ip_range: tuple[str, str] = DEFAULT_REMAP_RANGE,
    seed: int = 0,
) -> list[FlowRecord]:
    """Replace every IP with a random, consistent address drawn from ``ip_range``.

    Distinct source IPs receive distinct addresses drawn uniformly without
    replacement. Destination IPs that also occur as sources share the source
    mapping; the remaining destination IPs get fresh addresses from the same
    draw, so the whole map stays injective. The map depends only on the set
    of addresses, not on record order.
    """
    lo = int(ipaddress.IPv4Address(ip_range[0]))
    hi = int(ipaddress.IPv4Address(ip_range[1]))
    if hi < lo:
        raise ValueError(f"empty remap range {ip_range}")
    available = hi - lo + 1

    key = lambda ip: int(ipaddress.IPv4Address(ip))  # noqa: E731
    sources = sorted({r.src.ip for r in records}, key=key)
    src_set = set(sources)
    dst_only = sorted({r.dst.ip for r in records} - src_set, key=key)
    needed = len(sources) + len(dst_only)
    if needed > available:
        raise CapacityError(needed, available)

    rng = np.random.default_rng(seed)
    drawn = rng.choice(available, size=needed, replace=False) + lo
    table = {ip: str(ipaddress.IPv4Address(int(a))) for ip, a in zip(sources + dst_only, drawn)}
    return [
        replace(r, src=Endpoint(table[r.src.ip], r.src.port), dst=Endpoint(table[r.dst.ip], r.dst.port))
        for r in records
    ]


# --------------------------------------------------------------------------
# normalization
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class NormStats:
    """Per-feature normalization constants.

    For ``zscore`` ``loc``/``spread`` are mean and (guarded) population std;
    for ``minmax`` they are min and max.
    """

    method: str
    loc: np.ndarray
    spread: np.ndarray

    def to_dict(self) -> dict:
        return {
            "version": NORM_FORMAT_VERSION,
            "method": self.method,
            "loc": [float(x).hex() for x in self.loc],
            "spread": [float(x).hex() for x in self.spread],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "NormStats":
        if d.get("version") != NORM_FORMAT_VERSION:
            raise ValueError(f"unsupported NormStats version {d.get('version')!r}")
        return cls(
            method=d["method"],
            loc=_frozen([float.fromhex(x) for x in d["loc"]]),
            spread=_frozen([float.fromhex(x) for x in d["spread"]]),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "NormStats":
        return cls.from_dict(json.loads(text))


def feature_matrix(records: Sequence[FlowRecord]) -> np.ndarray:
    if not records:
        return np.zeros((0, 0))
    return np.stack([r.features for r in records])


def fit_normalizer(records: Sequence[FlowRecord], method: str = "zscore") -> NormStats:
    if not records:
        raise ValueError("cannot fit a normalizer on zero records")
    x = feature_matrix(records)
    if method == "zscore":
        mean = x.mean(axis=0)
        std = x.std(axis=0)
        std[std == 0] = 1.0
        return NormStats("zscore", _frozen(mean), _frozen(std))
    if method == "minmax":
        return NormStats("minmax", _frozen(x.min(axis=0)), _frozen(x.max(axis=0)))
    raise ValueError(f"unknown normalization method {method!r}")


def normalize_matrix(x: np.ndarray, stats: NormStats) -> np.ndarray:
    if x.shape[1] != len(stats.loc):
        raise ValueError(f"feature dimension {x.shape[1]} does not match normalizer dimension {len(stats.loc)}")
    if stats.method == "zscore":
        return (x - stats.loc) / stats.spread
    width = stats.spread - stats.loc
    safe = np.where(width == 0, 1.0, width)
    return np.where(width == 0, 0.0, (x - stats.loc) / safe)


def apply_normalizer(records: Sequence[FlowRecord], stats: NormStats) -> list[FlowRecord]:
    if not records:
        return []
    x = normalize_matrix(feature_matrix(records), stats)
    return [replace(r, features=_frozen(row)) for r, row in zip(records, x)]


# --------------------------------------------------------------------------
# splitting
# --------------------------------------------------------------------------


def stratified_split(
    records: Sequence[FlowRecord],
    fractions: Sequence[float] = (0.7, 0.1, 0.2),
    seed: int = 0,
) -> tuple[list[FlowRecord], list[FlowRecord], list[FlowRecord]]:
    """Split into (train, val, test) keeping each class's proportion.

    Each class is shuffled with ``seed`` and the val/test shares are floored;
    the rounding remainder stays in train unless the two floored-off parts add
    up to a whole record, in which case that record goes to whichever of
    val/test lost more. Every split then stays within one record per class of
    its exact size. Records keep their input order within each split.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or min(fractions) <= 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three positive numbers summing to 1, got {fractions}")
    rng = np.random.default_rng(seed)
    labels = np.array([r.label for r in records], dtype=np.int64)
    parts: list[list[int]] = [[], [], []]
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        if len(idx) < 3:
            logger.warning("class %d has %d records; all go to the training split", cls, len(idx))
            parts[0].extend(idx.tolist())
            continue
        idx = idx[rng.permutation(len(idx))]
        # the epsilon keeps products like 30 * 0.1 from flooring one short
        t_val, t_test = len(idx) * fractions[1] + 1e-9, len(idx) * fractions[2] + 1e-9
        n_val, n_test = int(math.floor(t_val)), int(math.floor(t_test))
        r_val, r_test = t_val - n_val, t_test - n_test
        if r_val + r_test >= 1.0:
            if r_val > r_test:
                n_val += 1
            else:
                n_test += 1
        parts[1].extend(idx[:n_val].tolist())
        parts[2].extend(idx[n_val : n_val + n_test].tolist())
        parts[0].extend(idx[n_val + n_test :].tolist())
    return tuple([records[i] for i in sorted(p)] for p in parts)  # type: ignore[return-value]


def stratified_subsample(records: Sequence[FlowRecord], fraction: float, seed: int = 0) -> list[FlowRecord]:
    """Keep ``fraction`` of each class (at least one record per present class)."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    if fraction == 1:
        return list(records)
    rng = np.random.default_rng(seed)
    labels = np.array([r.label for r in records], dtype=np.int64)
    keep: list[int] = []
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        n = max(1, int(round(len(idx) * fraction)))
        keep.extend(idx[rng.permutation(len(idx))[:n]].tolist())
    return [records[i] for i in sorted(keep)]


# --------------------------------------------------------------------------
# synthetic data
# --------------------------------------------------------------------------


def generate_synthetic(
    n_endpoints: int,
    n_flows: int,
    attack_ratio: float,
    separation: float,
    feature_dim: int = 8,
    seed: int = 0,
) -> list[FlowRecord]:
    """Gaussian two-class flows over a random endpoint population.

    Benign features are drawn around ``-separation/2`` and attack features
    around ``+separation/2`` (unit variance per dimension). Exactly
    ``round(n_flows * attack_ratio)`` flows are attacks.

    Destinations come from a pool of ``n_endpoints`` (ip, port) service
    endpoints. Sources are client hosts from a pool of ``n_endpoints`` IPs
    with a fresh ephemeral port per flow, the way real NetFlow exports look.
    """
    if not 0 < attack_ratio < 1:
        raise ValueError(f"attack_ratio must be in (0, 1), got {attack_ratio}")
    if n_endpoints < 2 or n_flows < 0 or feature_dim < 1:
        raise ValueError("need n_endpoints >= 2, n_flows >= 0, feature_dim >= 1")
    rng = np.random.default_rng(seed)

    def ips(n: int, base: int) -> list[str]:
        raw = rng.choice(2**20, size=n, replace=False) + base
        return [str(ipaddress.IPv4Address(int(a))) for a in raw]

    servers = ips(n_endpoints, int(ipaddress.IPv4Address("10.0.0.0")))
    service_ports = rng.choice([22, 53, 80, 123, 443, 1883, 8080, 8883], size=n_endpoints)
    clients = ips(n_endpoints, int(ipaddress.IPv4Address("100.64.0.0")))

    n_attack = int(round(n_flows * attack_ratio))
    labels = np.zeros(n_flows, dtype=np.int64)
    labels[rng.choice(n_flows, size=n_attack, replace=False)] = 1
    centers = np.where(labels[:, None] == 1, separation / 2.0, -separation / 2.0)
    feats = centers + rng.standard_normal((n_flows, feature_dim))
    dst = rng.integers(0, n_endpoints, size=n_flows)
    src = rng.integers(0, n_endpoints, size=n_flows)
    eph = rng.integers(1024, 65536, size=n_flows)
    return [
        FlowRecord(
            src=Endpoint(clients[src[i]], int(eph[i])),
            dst=Endpoint(servers[dst[i]], int(service_ports[dst[i]])),
            features=_frozen(feats[i]),
            label=int(labels[i]),
        )
        for i in range(n_flows)
    ]


def class_counts(records: Iterable[FlowRecord]) -> dict[int, int]:
    counts = {0: 0, 1: 0}
    for r in records:
        counts[r.label] += 1
    return counts
