"""Run configuration: INI files with one section per concern, plus dotted ``--set`` overrides.

Defaults are the CIFAR-10 settings. ``K`` and ``beta``
default per loss head (30 / 0.5 for squared error, 25 / 1.0 for softmax) and
``lam`` defaults to the weight decay.
"""
import configparser
from dataclasses import asdict, dataclass, field, fields
import io
import re

from .model import ConvSpec, Head, Nudge, Scheme, Topology


class ConfigError(ValueError):
    def __init__(self, message, line=None, source="<config>"):
        where = f"{source}:{line}: " if line is not None else f"{source}: "
        super().__init__(where + message)
        self.line = line


def _floats(s):
    return [float(v) for v in s.replace(";", ",").split(",") if v.strip()]


def _ints(s):
    return [int(v) for v in s.replace("x", ",").split(",") if v.strip()]


def _convs(s):
    out = []
    for tok in s.split(","):
        tok = tok.strip()
        if tok:
            parts = [int(v) for v in tok.split(":")]
            if not 2 <= len(parts) <= 4:
                raise ValueError(f"conv spec {tok!r} must be channels:kernel[:padding[:pool]]")
            out.append(parts)
    return out


def _bool(s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _opt(fn):
    def parse(s):
        return None if s.strip().lower() in ("", "none", "auto") else fn(s)
    return parse


def _str(s):
    return s.strip()


def _fmt(v):
    if v is None:
        return "auto"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, list) and v and isinstance(v[0], list):
        return ", ".join(":".join(str(p) for p in c) for c in v)
    if isinstance(v, (list, tuple)):
        return ", ".join(str(p) for p in v)
    return str(v)


@dataclass
class RunConfig:
    # [model]
    input_shape: list = field(default_factory=lambda: [3, 32, 32])
    conv: list = field(default_factory=lambda: [[64, 3, 1, 2], [128, 3, 1, 2], [256, 3, 1, 2], [512, 3, 0, 2]])
    fc: list = field(default_factory=lambda: [10])
    head: str = "softmax"
    scheme: str = "symmetric"
    init_scale: float = 1.0
    # [dynamics]
    T: int = 250
    K: int = None
    beta: float = None
    nudge: str = "inside"
    # [estimator]
    estimator: str = "symmetric"
    lam: float = None
    dropout: float = 0.0
    dropout_layer: int = None
    # [optim]
    batch_size: int = 128
    lrs: list = field(default_factory=lambda: [0.25, 0.15, 0.1, 0.08, 0.05])
    final_lr: float = 1e-5
    weight_decay: float = 3e-4
    momentum: float = 0.9
    epochs: int = 120
    cosine_horizon: int = 100
    # [data]
    dataset: str = "cifar10-binary"
    data_root: str = ""
    train_subset: int = 0
    test_subset: int = 0
    holdout: int = 0
    augment: bool = True
    # [run]
    seed: int = 0
    threads: int = 1
    eval_batch_size: int = 500

    def __post_init__(self):
        self.validate()

    @property
    def K_eff(self):
        if self.K is not None:
            return self.K
        return 30 if Head(self.head) is Head.SQUARED_ERROR else 25

    @property
    def beta_eff(self):
        if self.beta is not None:
            return self.beta
        return 0.5 if Head(self.head) is Head.SQUARED_ERROR else 1.0

    @property
    def lam_eff(self):
        return self.weight_decay if self.lam is None else self.lam

    def topology(self):
        return Topology(
            tuple(self.input_shape),
            tuple(ConvSpec(*c) for c in self.conv),
            tuple(self.fc),
            Head(self.head),
            Scheme(self.scheme),
        )

    def validate(self):
        from .estimators import EstimatorKind
        from .data import KINDS
        checks = [
            (self.T >= 1, "T must be >= 1"),
            (self.K is None or self.K >= 1, "K must be >= 1"),
            (self.beta is None or abs(self.beta) >= 1e-12, "beta must be non-zero"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.epochs >= 0, "epochs must be >= 0"),
            (self.cosine_horizon >= 1, "cosine_horizon must be >= 1"),
            (0.0 <= self.dropout < 1.0, "dropout must lie in [0, 1)"),
            (0.0 <= self.momentum < 1.0, "momentum must lie in [0, 1)"),
            (self.weight_decay >= 0.0, "weight_decay must be >= 0"),
            (self.lam is None or self.lam >= 0.0, "lam must be >= 0"),
            (self.threads >= 1, "threads must be >= 1"),
            (self.dataset in KINDS, f"dataset must be one of {KINDS}"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        for name, enum in (("head", Head), ("scheme", Scheme), ("nudge", Nudge),
                           ("estimator", EstimatorKind)):
            try:
                enum(getattr(self, name))
            except ValueError:
                raise ConfigError(f"{name}: invalid value {getattr(self, name)!r}; "
                                  f"choose from {[e.value for e in enum]}") from None
        kind = EstimatorKind(self.estimator)
        if kind in (EstimatorKind.BPTT, EstimatorKind.FINITE_DIFF):
            raise ConfigError(f"estimator {kind.value} is an oracle and cannot train")
        asym = kind in (EstimatorKind.VF_SYM, EstimatorKind.KPVF_SYM)
        if asym != (Scheme(self.scheme) is Scheme.ASYMMETRIC):
            raise ConfigError(f"estimator {kind.value} is incompatible with the {self.scheme} scheme")
        try:
            top = self.topology()
        except ValueError as exc:
            raise ConfigError(f"model: {exc}") from None
        if len(self.lrs) != top.n_tot:
            raise ConfigError(f"lrs has {len(self.lrs)} entries; the network has {top.n_tot} "
                              "parameterized layers")
        return self

    def to_ini(self):
        cp = configparser.ConfigParser()
        cp.optionxform = str
        for f in fields(self):
            sec = SECTION_OF[f.name]
            if not cp.has_section(sec):
                cp.add_section(sec)
            cp.set(sec, f.name, _fmt(getattr(self, f.name)))
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


SCHEMA = {
    "model": {"input_shape": _ints, "conv": _convs, "fc": _ints, "head": _str, "scheme": _str,
              "init_scale": float},
    "dynamics": {"T": int, "K": _opt(int), "beta": _opt(float), "nudge": _str},
    "estimator": {"estimator": _str, "lam": _opt(float), "dropout": float,
                  "dropout_layer": _opt(int)},
    "optim": {"batch_size": int, "lrs": _floats, "final_lr": float, "weight_decay": float,
              "momentum": float, "epochs": int, "cosine_horizon": int},
    "data": {"dataset": _str, "data_root": _str, "train_subset": int, "test_subset": int,
             "holdout": int, "augment": _bool},
    "run": {"seed": int, "threads": int, "eval_batch_size": int},
}
SECTION_OF = {k: sec for sec, keys in SCHEMA.items() for k in keys}


def _line_of(text, section, key):
    cur = None
    for i, line in enumerate(text.splitlines(), start=1):
        m = re.match(r"\s*\[([^\]]+)\]", line)
        if m:
            cur = m.group(1).strip()
        elif cur == section and re.match(rf"\s*{re.escape(key)}\s*[=:]", line):
            return i
    return None


def parse_override(item):
    """``section.key=value`` or ``key=value`` -> ``(section, key, value)``."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value", source="--set")
    lhs, value = item.split("=", 1)
    lhs = lhs.strip()
    if "." in lhs:
        sec, key = lhs.split(".", 1)
    else:
        key = lhs
        sec = SECTION_OF.get(key)
    if sec not in SCHEMA or key not in SCHEMA[sec]:
        raise ConfigError(f"unknown key {lhs!r}", source="--set")
    return sec, key, value


def load_config(text="", overrides=(), source="<config>"):
    """Parse INI ``text`` and apply overrides; unknown or malformed keys raise ``ConfigError``."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        raise ConfigError(str(exc).splitlines()[0], line, source) from None
    values = {}
    for sec in cp.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"unknown section [{sec}]", _line_of_section(text, sec), source)
        for key, raw in cp.items(sec):
            if key not in SCHEMA[sec]:
                raise ConfigError(f"unknown key {key!r} in [{sec}]", _line_of(text, sec, key), source)
            try:
                values[key] = SCHEMA[sec][key](raw)
            except ValueError as exc:
                raise ConfigError(f"[{sec}] {key}: {exc}", _line_of(text, sec, key), source) from None
    for item in overrides:
        sec, key, raw = parse_override(item)
        try:
            values[key] = SCHEMA[sec][key](raw)
        except ValueError as exc:
            raise ConfigError(f"{sec}.{key}: {exc}", source="--set") from None
    try:
        return RunConfig(**values)
    except ConfigError as exc:
        raise ConfigError(str(exc).split(": ", 1)[-1], source=source) from None


def _line_of_section(text, section):
    for i, line in enumerate(text.splitlines(), start=1):
        if re.match(rf"\s*\[{re.escape(section)}\]", line):
            return i
    return None


def load_config_file(path, overrides=()):
    with open(path) as fh:
        return load_config(fh.read(), overrides, source=str(path))
