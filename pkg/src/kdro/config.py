"""Experiment configuration and its INI serialisation.

A config file has an ``[experiment]`` section of flat keys plus optional
``[dgp]`` and ``[learner]`` sections whose keys mirror :class:`DgpSpec` and
:class:`LearnerOptions`.  Lists are comma separated.  Example::

    [experiment]
    name = table1
    seed = 0
    replications = 100
    n_train = 2500
    n_test = 2500
    eta_train = 0.05
    eta_test = 0.05, 0.1, 0.2, 0.3, 0.4
    bandwidth = plugin
    kernel = epanechnikov
    discretize = 2, 3, 4

    [dgp]
    kind = simple_uniform
"""
from __future__ import annotations

import configparser
import dataclasses
import io
import math
import re
from dataclasses import dataclass, field
from typing import Optional

from .bandwidth import H_MIN
from .errors import ConfigError, KdroError
from .kernels import KernelFamily
from .learner import LearnerOptions
from .model import Linear, ScalarMultiple
from .simgen import DgpKind, DgpSpec

EXPERIMENTS = ("eval", "learn", "table1", "table2", "table3", "warfarin")
POLICY_CLASSES = ("scalar", "linear")


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "learn"
    dgp: DgpSpec = field(default_factory=DgpSpec)
    seed: int = 0
    replications: int = 100
    n_train: tuple = (2500,)
    n_test: int = 2500
    eta_train: tuple = (0.05,)
    eta_test: tuple = (0.05, 0.1, 0.2, 0.3, 0.4)
    kernel: KernelFamily = KernelFamily.EPANECHNIKOV
    bandwidth: str = "plugin"
    policy_class: str = "scalar"
    # fixed policy parameters for ``eval``
    policy: tuple = ()
    discretize: tuple = ()
    perturbations: int = 100
    learner: LearnerOptions = field(default_factory=LearnerOptions)
    threads: int = 1
    warfarin_csv: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "kernel", KernelFamily(self.kernel))
        for name in ("n_train", "eta_train", "eta_test", "policy", "discretize"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        validate(self)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def template(self):
        """Policy-class template the learner starts from (the class centre)."""
        if self.policy_class == "scalar":
            return ScalarMultiple(2.0, 1.0, 3.0)
        d = self.dgp.d if self.dgp.kind is DgpKind.HIGHDIM_GAUSSIAN else None
        if d is None:
            raise ConfigError("linear policies need a covariate dimension; set it from the data")
        return Linear((0.0,) * d, self.dgp.policy_bound)

    def fixed_policy(self):
        if not self.policy:
            raise ConfigError("eval needs fixed policy parameters (key 'policy')")
        if self.policy_class == "scalar":
            if len(self.policy) != 1:
                raise ConfigError("a scalar policy takes exactly one parameter")
            return ScalarMultiple(float(self.policy[0]), 1.0, 3.0)
        return Linear(tuple(float(v) for v in self.policy), self.dgp.policy_bound)

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp["experiment"] = {
            "name": self.name,
            "seed": str(self.seed),
            "replications": str(self.replications),
            "n_train": _join(self.n_train),
            "n_test": str(self.n_test),
            "eta_train": _join(self.eta_train),
            "eta_test": _join(self.eta_test),
            "kernel": self.kernel.value,
            "bandwidth": self.bandwidth,
            "policy_class": self.policy_class,
            "policy": _join(self.policy),
            "discretize": _join(self.discretize),
            "perturbations": str(self.perturbations),
            "threads": str(self.threads),
            "warfarin_csv": self.warfarin_csv or "",
        }
        cp["dgp"] = {f.name: _fmt(getattr(self.dgp, f.name)) for f in dataclasses.fields(DgpSpec)}
        cp["learner"] = {
            f.name: _fmt(getattr(self.learner, f.name))
            for f in dataclasses.fields(LearnerOptions)
            if f.name != "solver"
        }
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if v is None:
        return ""
    if hasattr(v, "value"):
        return str(v.value)
    return str(v)


def _join(values) -> str:
    return ", ".join(_fmt(v) for v in values)


def validate(cfg: ExperimentConfig) -> None:
    if cfg.name not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {cfg.name!r}; expected one of {', '.join(EXPERIMENTS)}")
    if cfg.replications < 1:
        raise ConfigError("replications must be at least 1")
    if not cfg.eta_test:
        raise ConfigError("eta_test must list at least one radius")
    if not cfg.eta_train:
        raise ConfigError("eta_train must list at least one radius")
    for eta in cfg.eta_train + cfg.eta_test:
        if not (math.isfinite(eta) and eta >= 0):
            raise ConfigError(f"KL radii must be finite and non-negative, got {eta!r}")
    if not cfg.n_train or min(cfg.n_train) < 2 or cfg.n_test < 2:
        raise ConfigError("sample sizes must be at least 2")
    if cfg.policy_class not in POLICY_CLASSES:
        raise ConfigError(f"policy_class must be one of {POLICY_CLASSES}")
    if any(k < 2 for k in cfg.discretize):
        raise ConfigError("discretisation needs k >= 2")
    if cfg.perturbations < 1 or cfg.threads < 1:
        raise ConfigError("perturbations and threads must be at least 1")
    parse_bandwidth_rule(cfg.bandwidth)


def parse_bandwidth_rule(rule: str) -> str:
    rule = rule.strip()
    if rule in ("plugin", "rot"):
        return rule
    if rule.startswith("fixed:"):
        try:
            h = float(rule[6:])
        except ValueError:
            raise ConfigError(f"bad fixed bandwidth {rule!r}") from None
        if not (math.isfinite(h) and h >= H_MIN):
            raise ConfigError(f"fixed bandwidth must be at least {H_MIN}, got {h}")
        return rule
    raise ConfigError(f"bandwidth must be plugin, rot or fixed:<value>, got {rule!r}")


def parse_list(text: str, kind=float) -> tuple:
    text = text.strip()
    if not text:
        return ()
    return tuple(kind(v.strip()) for v in text.split(","))


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _coerce(template_value, text: str, annotation: str):
    if isinstance(template_value, bool):
        return _parse_bool(text)
    if isinstance(template_value, DgpKind):
        return DgpKind(text.strip())
    if isinstance(template_value, int):
        return int(text)
    if isinstance(template_value, float):
        return float(text)
    if template_value is None:
        return text.strip() or None
    return text.strip()


def _line_of(text: str, section: str, key: str) -> int:
    in_section = False
    for i, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if s.startswith("["):
            in_section = s.strip("[]").strip() == section
        elif in_section and re.match(rf"{re.escape(key)}\s*[=:]", s):
            return i
    return 0


def _section(cp, text, name, cls, base):
    if not cp.has_section(name):
        return base
    values = {}
    known = {f.name: f for f in dataclasses.fields(cls)}
    for key, raw in cp.items(name):
        if key not in known or key == "solver":
            raise ConfigError(f"line {_line_of(text, name, key)}: unknown key {key!r} in [{name}]")
        try:
            values[key] = _coerce(getattr(base, key), raw, known[key].type)
        except ValueError as exc:
            raise ConfigError(f"line {_line_of(text, name, key)}: {name}.{key}: {exc}") from None
    try:
        return dataclasses.replace(base, **values)
    except (ValueError, TypeError, KdroError) as exc:
        raise ConfigError(f"[{name}]: {exc}") from None


_EXPERIMENT_PARSERS = {
    "name": str.strip,
    "seed": int,
    "replications": int,
    "n_train": lambda t: parse_list(t, int),
    "n_test": int,
    "eta_train": parse_list,
    "eta_test": parse_list,
    "kernel": str.strip,
    "bandwidth": str.strip,
    "policy_class": str.strip,
    "policy": parse_list,
    "discretize": lambda t: parse_list(t, int),
    "perturbations": int,
    "threads": int,
    "warfarin_csv": lambda t: t.strip() or None,
}


def from_ini(text: str, base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    """Parse an INI document on top of ``base`` (or the defaults of its ``name``)."""
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc).replace("\n", " ")) from None
    extra = set(cp.sections()) - {"experiment", "dgp", "learner"}
    if extra:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(extra))}")
    values = {}
    if cp.has_section("experiment"):
        for key, raw in cp.items("experiment"):
            if key not in _EXPERIMENT_PARSERS:
                raise ConfigError(f"line {_line_of(text, 'experiment', key)}: unknown key {key!r}")
            try:
                values[key] = _EXPERIMENT_PARSERS[key](raw)
            except ValueError as exc:
                raise ConfigError(f"line {_line_of(text, 'experiment', key)}: experiment.{key}: {exc}") from None
    if base is None:
        base = preset(values.get("name", "learn"))
    dgp = _section(cp, text, "dgp", DgpSpec, base.dgp)
    learner = _section(cp, text, "learner", LearnerOptions, base.learner)
    try:
        return base.replace(dgp=dgp, learner=learner, **values)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return from_ini(fh.read())


def preset(name: str) -> ExperimentConfig:
    """Default configuration reproducing the named study."""
    if name in ("table2", "table3"):
        return ExperimentConfig(
            name=name,
            dgp=DgpSpec(kind=DgpKind.HIGHDIM_GAUSSIAN),
            n_train=(2000,) if name == "table2" else (500, 1000, 1500, 2000, 2500),
            n_test=2000,
            eta_train=(0.2,),
            eta_test=(0.05, 0.1, 0.2, 0.3, 0.4) if name == "table2" else (0.2,),
            policy_class="linear",
        )
    if name == "warfarin":
        return ExperimentConfig(
            name=name,
            dgp=DgpSpec(kind=DgpKind.WARFARIN),
            replications=200,
            n_train=(1983,),
            n_test=1323,
            eta_train=(0.3, 0.4, 0.5, 0.6, 0.7),
            eta_test=(0.4,),
            policy_class="linear",
        )
    if name == "table1":
        return ExperimentConfig(name=name, discretize=(2, 3, 4))
    if name == "eval":
        return ExperimentConfig(name=name, policy=(2.0,))
    if name == "learn":
        return ExperimentConfig(name=name)
    raise ConfigError(f"unknown experiment {name!r}")
