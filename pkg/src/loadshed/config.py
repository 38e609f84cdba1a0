"""Study configuration: a flat ``key = value`` text file.

Recognised keys (arrays are comma separated, ``#`` starts a comment)::

    case = case118                  # bundled name or path to a case file
    seed = 2024                     # master seed, required
    contingencies = top:1,1,1,2,2,3 # sizes of top-flow contingencies, or
    contingency.C1 = 38,141         # explicit outage sets (one key per id)
    samples_per_contingency = 300
    perturb_range = 0.95, 1.05
    f0 = 60
    k_sys = 1
    buses = all                     # or a list of bus ids
    hidden = 40, 30, 20
    activation = relu               # relu | tanh
    optimizer = lbfgs               # lbfgs | adam
    epochs = 2000
    batch = 64
    learning_rate = 0.001
    weight_decay = 0.0001
    patience = 100
    val_fraction = 0.1
    train_fraction = 0.7
    split_seed = 0
    out = results

Explicit ``contingency.*`` keys take precedence over ``contingencies``.
Relative paths are resolved against the config file's directory.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .casefile import load_case
from .learning.train import Hyper
from .network import NetworkCase
from .powerflow import Contingency, top_flow_contingencies


class ConfigError(ValueError):
    pass


_SCALARS = {
    "samples_per_contingency": int, "f0": float, "k_sys": float, "epochs": int, "batch": int,
    "learning_rate": float, "weight_decay": float, "patience": int, "val_fraction": float,
    "train_fraction": float, "split_seed": int, "seed": int,
}
_KNOWN = set(_SCALARS) | {"case", "contingencies", "perturb_range", "buses", "hidden",
                          "activation", "optimizer", "out"}


@dataclass
class StudyConfig:
    case: str
    seed: int
    contingency_spec: str = "top:1,1,1,2,2,3"
    explicit_contingencies: dict[str, tuple[int, ...]] = field(default_factory=dict)
    samples_per_contingency: int = 300
    perturb_range: tuple[float, float] = (0.95, 1.05)
    f0: float = 60.0
    k_sys: float = 1.0
    buses: str = "all"
    hyper: Hyper = field(default_factory=Hyper)
    out: str = "results"
    base_dir: Path = field(default_factory=Path.cwd)

    def case_path(self) -> str:
        p = Path(self.case)
        if p.suffix and not p.is_absolute():
            return str(self.base_dir / p)
        return self.case

    def load_case(self) -> NetworkCase:
        return load_case(self.case_path())

    def out_dir(self) -> Path:
        p = Path(self.out)
        return p if p.is_absolute() else self.base_dir / p

    def contingencies(self, case: NetworkCase) -> list[Contingency]:
        if self.explicit_contingencies:
            out = [Contingency(cid, b) for cid, b in self.explicit_contingencies.items()]
            for c in out:
                try:
                    c.validate(case)
                except (KeyError, ValueError) as exc:
                    raise ConfigError(str(exc).strip('"')) from exc
            return out
        kind, _, sizes = self.contingency_spec.partition(":")
        if kind.strip() != "top" or not sizes:
            raise ConfigError(f"contingencies must be 'top:<sizes>', got {self.contingency_spec!r}")
        return top_flow_contingencies(case, _ints(sizes, "contingencies"))

    def bus_selection(self, case: NetworkCase, default) -> tuple[int, ...]:
        return parse_buses(self.buses, case, default)


def parse_buses(text: str, case: NetworkCase, default) -> tuple[int, ...]:
    if text.strip().lower() == "all":
        return tuple(default)
    buses = tuple(_ints(text, "buses"))
    unknown = [b for b in buses if b not in case.bus_index]
    if unknown:
        raise ConfigError(f"unknown buses: {unknown}")
    return buses


def _ints(text: str, key: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"{key}: expected comma-separated integers, got {text!r}") from exc


def _floats(text: str, key: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"{key}: expected comma-separated numbers, got {text!r}") from exc


def parse_config(text: str, base_dir: Path | None = None) -> StudyConfig:
    values: dict[str, str] = {}
    explicit: dict[str, tuple[int, ...]] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"line {n}: expected 'key = value'")
        if key.startswith("contingency."):
            explicit[key.split(".", 1)[1]] = tuple(_ints(value, key))
            continue
        if key not in _KNOWN:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {n}: duplicate key {key!r}")
        values[key] = value
    if "case" not in values:
        raise ConfigError("missing required key 'case'")
    if "seed" not in values:
        raise ConfigError("missing required key 'seed' (no implicit randomness)")
    conv = {}
    for k, typ in _SCALARS.items():
        if k in values:
            try:
                conv[k] = typ(values[k])
            except ValueError as exc:
                raise ConfigError(f"{k}: cannot parse {values[k]!r}") from exc
    hyper_keys = ("epochs", "batch", "learning_rate", "weight_decay", "patience",
                  "val_fraction", "train_fraction", "split_seed")
    hkw = {k: conv[k] for k in hyper_keys if k in conv}
    if "hidden" in values:
        hkw["hidden"] = tuple(_ints(values["hidden"], "hidden"))
    for k in ("activation", "optimizer"):
        if k in values:
            hkw[k] = values[k]
    try:
        hyper = Hyper(**hkw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    cfg = StudyConfig(case=values["case"], seed=conv["seed"], hyper=hyper,
                      explicit_contingencies=explicit,
                      base_dir=base_dir or Path.cwd())
    if "contingencies" in values:
        cfg.contingency_spec = values["contingencies"]
    if "perturb_range" in values:
        pr = _floats(values["perturb_range"], "perturb_range")
        if len(pr) != 2 or pr[0] > pr[1] or pr[0] < 0:
            raise ConfigError(f"perturb_range must be 'lo, hi' with 0 <= lo <= hi, got {pr}")
        cfg.perturb_range = (pr[0], pr[1])
    for k in ("samples_per_contingency", "f0", "k_sys"):
        if k in conv:
            setattr(cfg, k, conv[k])
    if cfg.samples_per_contingency < 1:
        raise ConfigError("samples_per_contingency must be positive")
    if "buses" in values:
        cfg.buses = values["buses"]
    if "out" in values:
        cfg.out = values["out"]
    return cfg


def load_config(path: str | Path) -> StudyConfig:
    p = Path(path)
    return parse_config(p.read_text(encoding="utf-8"), base_dir=p.resolve().parent)
