"""JSON run configuration with strict keys and documented defaults.

Sections: ``data``, ``train``, ``gmm``, ``search`` (with a nested ``wachter``
object) and ``benchmark``. Unknown keys are errors.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

from .baselines import WachterConfig
from .classifier import TrainConfig
from .data_io import SyntheticSpec
from .engine import NORMALIZED, WEIGHTED, SearchConfig
from .errors import ConfigError, InputError
from .evaluation import ABLATION_LAMBDAS, ABLATION_MUS, BenchmarkSpec


@dataclass(frozen=True)
class DataSection:
    source: str = "synthetic"  # "synthetic" or "idx"
    images: str | None = None
    labels: str | None = None
    height: int = 12
    width: int = 12
    classes: int = 4
    samples_per_class: int = 300
    jitter: int = 1
    noise_std: float = 0.05
    seed: int = 0
    test_fraction: float = 0.2
    split_seed: int = 0

    def synthetic_spec(self):
        return SyntheticSpec(self.height, self.width, self.classes, self.samples_per_class,
                             self.jitter, self.noise_std, self.seed)


@dataclass(frozen=True)
class GmmSection:
    jitter: float = 1e-4
    jitter_floor: float = 1e-8
    nll_percentile: float = 95.0


@dataclass(frozen=True)
class BenchmarkSection:
    num_sets: int = 2
    images_per_set: int = 50
    generators: tuple = ("deduce", "jsma")
    seed: int = 0
    workers: int = 0
    dump_images: bool = False
    ablation_lambdas: tuple = ABLATION_LAMBDAS
    ablation_mus: tuple = ABLATION_MUS

    def spec(self):
        return BenchmarkSpec(self.num_sets, self.images_per_set, tuple(self.generators),
                             self.seed, self.workers)


@dataclass(frozen=True)
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    gmm: GmmSection = field(default_factory=GmmSection)
    search: SearchConfig = field(default_factory=SearchConfig)
    wachter: WachterConfig = field(default_factory=WachterConfig)
    benchmark: BenchmarkSection = field(default_factory=BenchmarkSection)

    def echo(self):
        """Plain-JSON view of the effective configuration."""
        out = {}
        for name in ("data", "train", "gmm", "benchmark"):
            out[name] = _plain(asdict(getattr(self, name)))
        search = _plain(asdict(self.search))
        search["wachter"] = _plain(asdict(self.wachter))
        out["search"] = search
        return out


def _plain(d):
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


_RANGES = {
    "data.source": lambda v: v in ("synthetic", "idx"),
    "data.height": lambda v: v >= 4, "data.width": lambda v: v >= 4,
    "data.classes": lambda v: 2 <= v <= 6,
    "data.samples_per_class": lambda v: v >= 1,
    "data.jitter": lambda v: v >= 0, "data.noise_std": lambda v: v >= 0,
    "data.test_fraction": lambda v: 0 < v < 1,
    "train.epochs": lambda v: v >= 1, "train.batch_size": lambda v: v >= 1,
    "train.learning_rate": lambda v: v > 0, "train.momentum_sgd": lambda v: 0 <= v < 1,
    "train.sn_coefficient": lambda v: v > 0, "train.sn_iters": lambda v: v >= 1,
    "train.final_sn_iters": lambda v: v >= 1, "train.feature_dim": lambda v: v >= 1,
    "train.hidden_dim": lambda v: v >= 1, "train.num_blocks": lambda v: v >= 0,
    "gmm.jitter": lambda v: v >= 0, "gmm.jitter_floor": lambda v: v > 0,
    "gmm.nll_percentile": lambda v: 0 < v < 100,
    "search.target_confidence": lambda v: 0 < v < 1,
    "search.step_size": lambda v: v > 0, "search.pixels_per_step": lambda v: v >= 1,
    "search.per_pixel_cap": lambda v: v >= 1, "search.max_iter": lambda v: v >= 0,
    "search.mu": lambda v: v >= 0, "search.lam": lambda v: v >= 0,
    "search.momentum": lambda v: 0 <= v < 1,
    "search.gradient_mode": lambda v: v in (WEIGHTED, NORMALIZED),
    "search.density_weight": lambda v: v >= 0, "search.eps_div": lambda v: v > 0,
    "search.wachter.inner_steps": lambda v: v >= 0,
    "search.wachter.inner_lr": lambda v: v > 0,
    "search.wachter.distance": lambda v: v in ("l1", "l2"),
    "search.wachter.lambdas": lambda v: len(v) > 0 and all(b > a > 0 for a, b in zip(v, v[1:])) and v[0] > 0,
    "benchmark.num_sets": lambda v: v >= 1, "benchmark.images_per_set": lambda v: v >= 1,
    "benchmark.workers": lambda v: v >= 0,
    "benchmark.generators": lambda v: len(v) > 0 and all(g in ("deduce", "jsma", "wachter") for g in v),
}

# aliases accepted in documents for readability
_ALIASES = {"search": {"delta": "step_size", "gamma": "target_confidence",
                       "lambda": "lam", "pixels": "pixels_per_step", "p": "per_pixel_cap"}}


def _build(cls, section, raw, skip=()):
    if not isinstance(raw, dict):
        raise ConfigError(section, "expected a JSON object")
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key in skip:
            continue
        name = _ALIASES.get(section, {}).get(key, key)
        path = f"{section}.{key}"
        if name not in known:
            raise ConfigError(path, "unknown key")
        default = getattr(cls(), name) if name in known else None
        value = _coerce(path, value, default)
        check = _RANGES.get(f"{section}.{name}")
        if check is not None and not check(value):
            raise ConfigError(path, f"value {value!r} out of range")
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except InputError as exc:
        raise ConfigError(section, str(exc)) from None


def _coerce(path, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(path, "expected true/false")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, "expected an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, "expected a number")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(path, "expected a list")
        return tuple(value)
    if value is not None and not isinstance(value, (str, int, float)):
        raise ConfigError(path, "expected a scalar")
    return value


def config_from_dict(doc):
    if not isinstance(doc, dict):
        raise ConfigError("<root>", "expected a JSON object")
    sections = {"data", "train", "gmm", "search", "benchmark"}
    for key in doc:
        if key not in sections:
            raise ConfigError(key, "unknown section")
    search_raw = doc.get("search", {})
    wachter_raw = search_raw.get("wachter", {}) if isinstance(search_raw, dict) else {}
    search = _build(SearchConfig, "search", search_raw, skip=("wachter",))
    wachter = _build(WachterConfig, "search.wachter", wachter_raw)
    if "target_confidence" not in wachter_raw:
        wachter = WachterConfig(wachter.lambdas, wachter.inner_steps, wachter.inner_lr,
                                wachter.distance, search.target_confidence, wachter.max_rounds)
    return RunConfig(
        data=_build(DataSection, "data", doc.get("data", {})),
        train=_build(TrainConfig, "train", doc.get("train", {})),
        gmm=_build(GmmSection, "gmm", doc.get("gmm", {})),
        search=search,
        wachter=wachter,
        benchmark=_build(BenchmarkSection, "benchmark", doc.get("benchmark", {})),
    )


def load_config(path=None):
    """Parse a JSON config file; ``None`` gives all defaults."""
    if path is None:
        return RunConfig()
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError("<document>", f"malformed JSON: {exc}") from None
    return config_from_dict(doc)
