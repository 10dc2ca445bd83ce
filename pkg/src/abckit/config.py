"""Experiment configuration: TOML (or JSON) text in, validated dataclass out.

Every key is checked before any compute starts.  Problems are collected,
not raised one at a time, and each message carries the line it refers to
when that line can be located.
"""

import hashlib
import json
import math
import re
from dataclasses import asdict, dataclass, field, fields

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .codebook import MAX_MEMBERS
from .diffusion import TrainConfig
from .diffusion.sampler import MODES
from .errors import ConfigError
from .landscape import METRICS


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "synthetic"  # synthetic | idx | abcd
    count: int = 32
    side: int = 16
    n_sources: int | None = None  # synthetic: number of templates (default: one per image)
    groups: int | None = None  # regroup images into this many random sources
    seed: int = 0
    jitter: float = 0.05
    blobs: tuple = (2, 4)  # inclusive range of blobs per synthetic template
    images: str | None = None
    labels: str | None = None
    source_mode: str | None = None
    normalize: bool = True


@dataclass(frozen=True)
class CodebookSpec:
    n: int = 8
    w: int | None = None
    seed: int = 0


@dataclass(frozen=True)
class ScheduleSpec:
    T_train: int = 200
    K: int = 20
    beta_lo: float = 1e-4
    beta_hi: float = 0.1


@dataclass(frozen=True)
class SamplingSpec:
    samples: int = 8
    seed: int = 0
    mode: str = "deterministic"


@dataclass(frozen=True)
class AttributionSpec:
    metric: str = "euclidean"
    visual_metric: str = "euclidean-native"
    tau: float | None = None
    k: int = 8
    differential: bool = False


@dataclass(frozen=True)
class TrendSpec:
    sizes: tuple = ()
    permutations: int = 1000


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    codebook: CodebookSpec = field(default_factory=CodebookSpec)
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampling: SamplingSpec = field(default_factory=SamplingSpec)
    attribution: AttributionSpec = field(default_factory=AttributionSpec)
    trend: TrendSpec = field(default_factory=TrendSpec)

    def to_dict(self):
        out = {}
        for f in fields(self):
            sec = asdict(getattr(self, f.name))
            out[f.name] = {k: list(v) if isinstance(v, tuple) else v for k, v in sec.items() if v is not None}
        return out

    def to_toml(self):
        return dumps_toml(self.to_dict())

    def hash(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    @property
    def weight(self):
        return self.codebook.w if self.codebook.w is not None else self.codebook.n // 2

    def source_counts(self):
        """Number of sources each trained ensemble will see."""
        d = self.dataset
        if d.kind != "synthetic":
            return []
        counts = list(self.trend.sizes) or [d.count]
        if d.groups is not None:
            return [d.groups for _ in counts]
        if d.n_sources is not None:
            return [d.n_sources for _ in counts]
        return counts


SECTIONS = {f.name: f.default_factory for f in fields(ExperimentConfig)}


def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot write {type(v).__name__} to TOML")


def dumps_toml(doc):
    """Two-level tables of scalars and flat lists; None values are omitted."""
    lines = []
    for name, sec in doc.items():
        lines.append(f"[{name}]")
        lines.extend(f"{k} = {_toml_value(v)}" for k, v in sec.items() if v is not None)
        lines.append("")
    return "\n".join(lines)


class _Lines:
    """Best-effort map from (section, key) to a 1-based line number."""

    def __init__(self, text, is_json):
        self.text = text.splitlines()
        self.is_json = is_json

    def find(self, section, key=None):
        if self.is_json:
            pats = [re.compile(r'"%s"\s*:' % re.escape(section))]
            if key is not None:
                pats.append(re.compile(r'"%s"\s*:' % re.escape(key)))
        else:
            pats = [re.compile(r"^\s*\[\s*%s\s*\]" % re.escape(section))]
            if key is not None:
                pats.append(re.compile(r"^\s*\"?%s\"?\s*=" % re.escape(key)))
        want = 0
        for i, line in enumerate(self.text):
            pos = 0
            while (m := pats[want].search(line, pos)) is not None:
                want += 1
                if want == len(pats):
                    return i + 1
                pos = m.end()
        return None

    def msg(self, section, key, text):
        where = self.find(section, key)
        name = f"{section}.{key}" if key else section
        return f"line {where}: {name}: {text}" if where else f"{name}: {text}"


def _parse(text):
    stripped = text.lstrip()
    if stripped.startswith("{"):
        try:
            return json.loads(text), True
        except json.JSONDecodeError as exc:
            raise ConfigError(f"line {exc.lineno}: JSON parse error: {exc.msg}", [f"line {exc.lineno}: {exc.msg}"])
    try:
        return tomllib.loads(text), False
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        where = f"line {m.group(1)}: " if m else ""
        raise ConfigError(f"{where}TOML parse error: {exc}", [f"{where}{exc}"])


def _coerce(value, default, annotation):
    """Check ``value`` against the default's type; ints are accepted for floats."""
    if isinstance(default, tuple) or annotation == "tuple":
        if not isinstance(value, list):
            raise TypeError("expected a list")
        return tuple(value)
    ann = str(annotation)
    if value is None:
        if "None" in ann:
            return None
        raise TypeError("may not be null")
    if "bool" in ann:
        if not isinstance(value, bool):
            raise TypeError("expected true or false")
        return value
    if ann.startswith("int") or ann == "<class 'int'>":
        if isinstance(value, bool) or not isinstance(value, int):
            raise TypeError("expected an integer")
        return value
    if "float" in ann:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise TypeError("expected a number")
        return float(value)
    if "str" in ann:
        if not isinstance(value, str):
            raise TypeError("expected a string")
        return value
    return value


def _build(doc, lines, errors):
    if not isinstance(doc, dict):
        errors.append("top level must be a table")
        return None
    built = {}
    for name in doc:
        if name not in SECTIONS:
            errors.append(lines.msg(name, None, f"unknown section {name!r}; expected one of {sorted(SECTIONS)}"))
    for name, factory in SECTIONS.items():
        default = factory()
        raw = doc.get(name, {})
        if not isinstance(raw, dict):
            errors.append(lines.msg(name, None, "must be a table"))
            continue
        kw = {}
        known = {f.name: f for f in fields(default)}
        for key, value in raw.items():
            if key not in known:
                errors.append(lines.msg(name, key, f"unknown key {key!r} in [{name}]"))
                continue
            try:
                kw[key] = _coerce(value, getattr(default, key), known[key].type)
            except TypeError as exc:
                errors.append(lines.msg(name, key, str(exc)))
        try:
            built[name] = type(default)(**kw)
        except (ConfigError, ValueError, TypeError) as exc:
            errors.append(lines.msg(name, None, str(exc)))
    if len(built) != len(SECTIONS):
        return None
    return ExperimentConfig(**built)


def _semantic(cfg, lines, errors):
    def err(sec, key, text):
        errors.append(lines.msg(sec, key, text))

    d, cb, sc, sm, at = cfg.dataset, cfg.codebook, cfg.schedule, cfg.sampling, cfg.attribution
    if d.kind not in ("synthetic", "idx", "abcd"):
        err("dataset", "kind", f"unknown dataset kind {d.kind!r}")
    if d.kind in ("idx", "abcd") and not d.images:
        err("dataset", "images", f"a {d.kind} dataset needs an images path")
    if len(d.blobs) != 2 or not all(isinstance(b, int) for b in d.blobs) or not 1 <= d.blobs[0] <= d.blobs[1]:
        err("dataset", "blobs", "blobs must be [lo, hi] with 1 <= lo <= hi")
    if d.count < 1:
        err("dataset", "count", "count must be >= 1")
    if not 8 <= d.side <= 64:
        err("dataset", "side", "side must lie in [8, 64]")
    if not 2 <= cb.n <= MAX_MEMBERS:
        err("codebook", "n", f"ensemble size must lie in [2, {MAX_MEMBERS}]")
    w = cfg.weight
    if not 1 <= w < cb.n:
        err("codebook", "w", f"codeword weight must satisfy 1 <= w < n (got w={w}, n={cb.n}); "
                             "every source must be held out of at least one member")
    elif 2 <= cb.n <= MAX_MEMBERS:
        cap = math.comb(cb.n, w)
        for N in cfg.source_counts():
            if N > cap:
                err("codebook", "n", f"{N} sources exceed the C({cb.n},{w}) = {cap} codewords")
    if not 1 <= sc.K <= sc.T_train:
        err("schedule", "K", f"need 1 <= K <= T_train (got K={sc.K}, T_train={sc.T_train})")
    if not 0 < sc.beta_lo <= sc.beta_hi < 1:
        err("schedule", "beta_hi", "need 0 < beta_lo <= beta_hi < 1")
    if sm.samples < 1:
        err("sampling", "samples", "need at least one sample")
    if sm.mode not in MODES:
        err("sampling", "mode", f"mode must be one of {list(MODES)}")
    for key in ("metric", "visual_metric"):
        if getattr(at, key) not in METRICS:
            err("attribution", key, f"unknown metric; choose from {sorted(METRICS)}")
    if at.tau is not None and (at.tau < 0 or not math.isfinite(at.tau)):
        err("attribution", "tau", "tau must be a finite non-negative number")
    if at.k < 1:
        err("attribution", "k", "k must be >= 1")
    for N in cfg.source_counts():
        if at.k > N:
            err("attribution", "k", f"k={at.k} exceeds the {N} sources")
    for s in cfg.trend.sizes:
        if not isinstance(s, int) or s < 1:
            err("trend", "sizes", "sizes must be positive integers")
    if d.groups is not None and any(d.groups > s for s in (cfg.trend.sizes or (d.count,))):
        err("dataset", "groups", "more groups than images")
    if cfg.trend.permutations < 1:
        err("trend", "permutations", "need at least one permutation")


def validate_config(text):
    """Parse and fully validate; raises ConfigError whose ``errors`` lists
    every problem found."""
    doc, is_json = _parse(text)
    lines = _Lines(text, is_json)
    errors = []
    cfg = _build(doc, lines, errors)
    if cfg is not None:
        _semantic(cfg, lines, errors)
    if errors:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(errors), errors)
    return cfg


def load_config(path):
    with open(path) as fh:
        return validate_config(fh.read())
