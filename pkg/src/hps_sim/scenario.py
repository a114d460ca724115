"""Scenario files: JSON <-> ScenarioParams, plus dotted-path overrides."""

from __future__ import annotations

import copy
import json
from importlib import resources
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from .model import (
    ControllerGains,
    GAIN_NAMES,
    GridConstants,
    HumanParams,
    LineParams,
    MonitorConfig,
    NodeParams,
    PortMode,
    ScenarioParams,
    SocialCase,
    Topology,
    ValidationError,
    WelfareWeights,
    validate,
)

REQUIRED_KEYS = ("nodes", "lines", "incidence", "human", "welfare_weights", "controller_gains")
REFERENCE_FILE = "paper_table2.json"


class ScenarioError(ValueError):
    """Raised for anything wrong with a scenario file: syntax, schema or invariants."""


def bundled_path(name: str = REFERENCE_FILE) -> Path:
    return Path(str(resources.files("hps_sim") / "data" / name))


def read_raw(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: malformed JSON ({exc})") from exc
    except OSError as exc:
        raise ScenarioError(f"{path}: cannot read ({exc})") from exc


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw: dict, overrides: Iterable[str]) -> dict:
    """Apply ``key.sub.0=value`` assignments; list indices are zero-based."""
    out = copy.deepcopy(raw)
    for item in overrides:
        if "=" not in item:
            raise ScenarioError(f"override {item!r} is not of the form key=value")
        key, text = item.split("=", 1)
        parts = key.strip().split(".")
        node = out
        for part in parts[:-1]:
            node = node[int(part)] if isinstance(node, list) else node.setdefault(part, {})
        last = parts[-1]
        if isinstance(node, list):
            node[int(last)] = _parse_value(text)
        else:
            node[last] = _parse_value(text)
    return out


def _vec(value, n: int, what: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return np.full(n, float(arr))
    if arr.shape != (n,):
        raise ScenarioError(f"{what}: expected {n} entries, got {arr.size}")
    return arr


def from_dict(raw: dict) -> ScenarioParams:
    missing = [k for k in REQUIRED_KEYS if k not in raw]
    if missing:
        raise ScenarioError(f"scenario lacks required keys: {', '.join(missing)}")
    try:
        nodes = [NodeParams(**nd) for nd in raw["nodes"]]
        lines = [LineParams(**ln) for ln in raw["lines"]]
    except TypeError as exc:
        raise ScenarioError(f"bad node/line record: {exc}") from exc
    N = len(nodes)
    hum = dict(raw["human"])
    if "h" in hum:
        raise ScenarioError("human.h must not be given; it is derived as h = p_ego")
    try:
        human = HumanParams(**{k: _vec(hum[k], N, f"human.{k}") for k in ("a", "c", "d", "p_ego", "p_bio")})
    except KeyError as exc:
        raise ScenarioError(f"human block lacks {exc}") from exc
    sw = raw.get("social_weights")
    topology = Topology(np.asarray(raw["incidence"], float), None if sw is None else np.asarray(sw, float))
    try:
        weights = WelfareWeights(**raw["welfare_weights"])
    except TypeError as exc:
        raise ScenarioError(f"bad welfare_weights: {exc}") from exc
    cg = raw["controller_gains"]
    unknown = set(cg) - set(GAIN_NAMES)
    if unknown or set(GAIN_NAMES) - set(cg):
        raise ScenarioError(f"controller_gains must give exactly {', '.join(GAIN_NAMES)}")
    gains = ControllerGains(**{k: _vec(cg[k], N, f"controller_gains.{k}") for k in GAIN_NAMES})
    constants = GridConstants(**raw.get("constants", {}))
    mon_raw = raw.get("monitor")
    monitor = None
    if mon_raw is not None:
        monitor = MonitorConfig(
            Q_1=_vec(mon_raw.get("Q_1", 1.0), N, "monitor.Q_1"),
            Q_2=_vec(mon_raw.get("Q_2", 1.0), N, "monitor.Q_2"),
            zeta_2=float(mon_raw.get("zeta_2", 1.0)),
            zeta_3=float(mon_raw.get("zeta_3", 1.0)),
        )
    try:
        case = SocialCase.parse(raw.get("social_case", "i"))
        ports = PortMode(raw.get("ports", PortMode.INCREMENTAL.value))
    except ValueError as exc:
        raise ScenarioError(str(exc)) from exc
    return ScenarioParams(nodes=nodes, lines=lines, topology=topology, human=human, weights=weights,
                          gains=gains, constants=constants, social_case=case, monitor=monitor, ports=ports)


def to_dict(params: ScenarioParams) -> dict:
    from dataclasses import asdict

    return {
        "nodes": [asdict(nd) for nd in params.nodes],
        "lines": [asdict(ln) for ln in params.lines],
        "incidence": params.B.tolist(),
        "social_weights": params.topology.social_weights.tolist(),
        "human": {k: getattr(params.human, k).tolist() for k in ("a", "c", "d", "p_ego", "p_bio")},
        "welfare_weights": asdict(params.weights),
        "controller_gains": {k: getattr(params.gains, k).tolist() for k in GAIN_NAMES},
        "constants": {"f_0": params.constants.f_0, "R_L_open": params.constants.R_L_open},
        "social_case": params.social_case.value,
        "monitor": {"Q_1": params.monitor.Q_1.tolist(), "Q_2": params.monitor.Q_2.tolist(),
                    "zeta_2": params.monitor.zeta_2, "zeta_3": params.monitor.zeta_3},
        "ports": params.ports.value,
    }


def load_scenario(path=None, case: str | None = None, overrides: Iterable[str] = ()) -> tuple[ScenarioParams, dict]:
    """Load, override, validate.  Returns the params and the raw (overridden) dict.

    The raw dict carries the optional non-parameter sections
    (``initial_state``, ``simulation``, ``reported_values``, ``calibration``).
    """
    raw = read_raw(bundled_path() if path is None else path)
    raw = apply_overrides(raw, overrides)
    if case is not None:
        raw["social_case"] = case
    params = from_dict(raw)
    try:
        validate(params)
    except ValidationError as exc:
        raise ScenarioError(str(exc)) from exc
    return params, raw


def reference_scenario(case: str = "i", overrides: Iterable[str] = ()) -> ScenarioParams:
    return load_scenario(None, case=case, overrides=overrides)[0]
