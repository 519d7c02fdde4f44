"""Run configuration: one TOML document with model, grid, estimation, experiment and output tables."""

from __future__ import annotations

import copy
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .model import Coefficient, DetInitModel, JointModel, ModelError, RandomInitModel, TimeGrid

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

KINDS = ("det_init", "joint", "random_init")
MODEL_KEYS = {
    "det_init": {"kind", "eps", "theta", "theta_bounds", "f", "sigma", "a", "b"},
    "joint": {"kind", "eps", "theta", "theta1_bounds", "theta2_bounds", "f", "sigma", "b", "drift"},
    "random_init": {"kind", "eps", "theta", "theta_bounds", "f", "sigma", "b", "d2"},
}
REQUIRED_MODEL = {
    "det_init": {"kind", "eps", "theta_bounds", "f", "sigma", "a", "b"},
    "joint": {"kind", "eps", "theta1_bounds", "theta2_bounds", "f", "sigma", "b", "drift"},
    "random_init": {"kind", "eps", "theta_bounds", "f", "sigma", "b", "d2"},
}
SECTION_KEYS = {
    "grid": {"T", "N"},
    "estimation": {"tau", "tau_star", "log_floor"},
    "experiment": {"checks", "replicates", "master_seed", "eps", "workers", "target_scale",
                   "condition_y0", "name"},
    "output": {"directory", "formats", "plots"},
}
SECTIONS = {"model", *SECTION_KEYS}
FORMATS = ("csv", "json")


class ConfigError(ModelError):
    """Malformed or inconsistent configuration."""


def _reject_unknown(section: str, got: dict, allowed: set):
    extra = sorted(set(got) - allowed)
    if extra:
        raise ConfigError(f"unknown keys in [{section}]: {', '.join(extra)}")


@dataclass(frozen=True)
class RunConfig:
    """Validated configuration tables; ``to_dict`` returns exactly what was parsed."""

    model: dict
    grid: dict
    estimation: dict = field(default_factory=dict)
    experiment: dict | None = None
    output: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        doc = copy.deepcopy(doc)
        _reject_unknown("top level", doc, SECTIONS)
        for name in ("model", "grid"):
            if name not in doc:
                raise ConfigError(f"missing [{name}] table")
        model = doc["model"]
        kind = model.get("kind")
        if kind not in KINDS:
            raise ConfigError(f"model.kind must be one of {', '.join(KINDS)}")
        _reject_unknown("model", model, MODEL_KEYS[kind])
        missing = sorted(REQUIRED_MODEL[kind] - set(model))
        if missing:
            raise ConfigError(f"missing keys in [model]: {', '.join(missing)}")
        for name, allowed in SECTION_KEYS.items():
            if name in doc:
                if not isinstance(doc[name], dict):
                    raise ConfigError(f"[{name}] must be a table")
                _reject_unknown(name, doc[name], allowed)
        grid = doc["grid"]
        if set(grid) != {"T", "N"}:
            raise ConfigError("[grid] needs T and N")
        cfg = cls(model, grid, doc.get("estimation", {}), doc.get("experiment"), doc.get("output", {}))
        cfg.spec()
        cfg.time_grid()
        cfg._check_output()
        if cfg.experiment is not None:
            cfg.plan()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path, "rb") as fh:
                doc = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        doc = {"model": copy.deepcopy(self.model), "grid": dict(self.grid)}
        if self.estimation:
            doc["estimation"] = dict(self.estimation)
        if self.experiment is not None:
            doc["experiment"] = copy.deepcopy(self.experiment)
        if self.output:
            doc["output"] = copy.deepcopy(self.output)
        return doc

    def time_grid(self) -> TimeGrid:
        try:
            return TimeGrid(float(self.grid["T"]), int(self.grid["N"]))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid grid: {exc}") from exc

    def spec(self, eps: float | None = None):
        m = self.model
        eps = float(m["eps"] if eps is None else eps)
        coef = Coefficient.parse
        kind = m["kind"]
        if kind == "det_init":
            return DetInitModel(coef(m["f"]), coef(m["sigma"]), coef(m["a"]), coef(m["b"]), eps,
                                tuple(m["theta_bounds"]), m.get("theta"))
        if kind == "joint":
            theta = m.get("theta")
            if theta is not None and len(theta) != 2:
                raise ConfigError("joint model theta must be [theta1, theta2]")
            drift = m["drift"]
            if not isinstance(drift, list):
                raise ConfigError("drift must be a list of coefficients c_i in a = sum theta2^i c_i(t)")
            return JointModel(coef(m["f"]), coef(m["sigma"]), coef(m["b"]), tuple(coef(c) for c in drift), eps,
                              (tuple(m["theta1_bounds"]), tuple(m["theta2_bounds"])),
                              None if theta is None else tuple(theta))
        return RandomInitModel(coef(m["f"]), coef(m["sigma"]), coef(m["b"]), coef(m["d2"]), eps,
                               tuple(m["theta_bounds"]), m.get("theta"))

    @property
    def tau(self) -> float:
        if "tau" not in self.estimation:
            raise ConfigError("estimation.tau is required for estimators")
        return float(self.estimation["tau"])

    @property
    def tau_star(self) -> float | None:
        v = self.estimation.get("tau_star")
        return None if v is None else float(v)

    @property
    def master_seed(self) -> int:
        exp = self.experiment or {}
        return int(exp.get("master_seed", 12345))

    def _check_output(self):
        fmts = self.output.get("formats", ["csv"])
        if not isinstance(fmts, list) or any(f not in FORMATS for f in fmts):
            raise ConfigError(f"output.formats must be a list drawn from {', '.join(FORMATS)}")
        if "plots" in self.output and not isinstance(self.output["plots"], bool):
            raise ConfigError("output.plots must be true or false")

    @property
    def out_dir(self) -> Path:
        return Path(self.output.get("directory", "out"))

    def plan(self, *, seed: int | None = None, workers: int | None = None):
        from .mc import ExperimentPlan

        e = self.experiment
        if e is None:
            raise ConfigError("missing [experiment] table")
        if "checks" not in e:
            raise ConfigError("experiment.checks is required")
        eps = e.get("eps")
        eps_list = tuple(float(x) for x in eps) if isinstance(eps, list) else None
        plan = ExperimentPlan(
            checks=tuple(e["checks"]),
            master_seed=int(e.get("master_seed", 12345) if seed is None else seed),
            replicates=None if e.get("replicates") is None else int(e["replicates"]),
            eps=float(eps) if isinstance(eps, (int, float)) else None,
            eps_list=eps_list,
            workers=int(e.get("workers", 1) if workers is None else workers),
            condition_y0=float(e.get("condition_y0", 0.1)),
            target_scale=float(e.get("target_scale", 1.0)),
            name=str(e.get("name", "experiment")),
        )
        try:
            return plan.validate()
        except ModelError as exc:
            raise ConfigError(str(exc)) from exc
