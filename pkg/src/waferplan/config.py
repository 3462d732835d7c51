"""Declarative hardware / model config files.

Hardware files carry datasheet-style units (TB/s, ns, pJ/bit, MB, GB, mm,
TFLOPS); the loader normalizes everything to base SI units. Model files use
the usual table field names (heads, batch, hidden size, layers, seq).
Parse errors name the offending field.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import yaml

from .costmodel import EfficiencyParams
from .topology import DieSpec, LinkSpec, WaferTopology, build_mesh
from .workload import ModelConfig


class ConfigError(ValueError):
    """Bad or missing config field; message names file and field."""


def _require(mapping: dict, field: str, path: str, section: str):
    if field not in mapping:
        raise ConfigError(f"{path}: missing field '{section}.{field}'")
    return mapping[field]


def _number(mapping: dict, field: str, path: str, section: str) -> float:
    value = _require(mapping, field, path, section)
    if not isinstance(value, (int, float)) or isinstance(value, bool):
        raise ConfigError(f"{path}: field '{section}.{field}' must be a number, "
                          f"got {value!r}")
    return float(value)


def _load_yaml(path: str | Path) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{p}: file not found")
    try:
        data = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{p}: not valid YAML ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{p}: top level must be a mapping")
    return data


def load_hardware(path: str | Path) -> WaferTopology:
    """Build a WaferTopology from a hardware YAML (Table-style units)."""
    data = _load_yaml(path)
    p = str(path)
    wafer = _require(data, "wafer", p, "")
    die = _require(data, "die", p, "")
    link = _require(data, "link", p, "")

    rows = int(_number(wafer, "rows", p, "wafer"))
    cols = int(_number(wafer, "cols", p, "wafer"))
    pitch = float(wafer.get("die_pitch_mm", 33.25))

    tflops = _number(die, "compute_tflops", p, "die")
    tflops_per_watt = _number(die, "compute_tflops_per_watt", p, "die")
    die_spec = DieSpec(
        peak_compute=tflops * 1e12,
        sram_bytes=_number(die, "sram_mb", p, "die") * 1e6,
        hbm_bytes=_number(die, "hbm_gb", p, "die") * 1e9,
        hbm_bandwidth=_number(die, "hbm_bandwidth_tbps", p, "die") * 1e12,
        hbm_latency=_number(die, "hbm_latency_ns", p, "die") * 1e-9,
        compute_energy=1.0 / (tflops_per_watt * 1e12),   # J per FLOP
        hbm_energy=_number(die, "hbm_energy_pj_per_bit", p, "die") * 1e-12,
    )
    link_spec = LinkSpec(
        bandwidth=_number(link, "bandwidth_tbps", p, "link") * 1e12,
        latency=_number(link, "latency_ns", p, "link") * 1e-9,
        energy=_number(link, "energy_pj_per_bit", p, "link") * 1e-12,
        max_length_mm=float(link.get("max_length_mm", 50.0)),
    )
    try:
        return build_mesh(rows, cols, die_spec, link_spec, die_pitch_mm=pitch)
    except ValueError as exc:
        raise ConfigError(f"{p}: {exc}") from exc


def load_model(path: str | Path) -> ModelConfig:
    data = _load_yaml(path)
    p = str(path)
    model = _require(data, "model", p, "")
    try:
        return ModelConfig(
            heads=int(_number(model, "heads", p, "model")),
            batch=int(_number(model, "batch", p, "model")),
            hidden_size=int(_number(model, "hidden_size", p, "model")),
            layers=int(_number(model, "layers", p, "model")),
            seq_len=int(_number(model, "seq", p, "model")),
            vocab=int(model.get("vocab", 50000)),
            mlp_intermediate=(int(model["mlp_intermediate"])
                              if "mlp_intermediate" in model else None),
            precision=str(model.get("precision", "fp16")),
            name=str(model.get("name", Path(p).stem)),
        )
    except ValueError as exc:
        raise ConfigError(f"{p}: {exc}") from exc


def load_efficiency(path: Optional[str | Path]) -> EfficiencyParams:
    if path is None:
        return EfficiencyParams()
    data = _load_yaml(path)
    eff = data.get("efficiency", data)
    try:
        return EfficiencyParams(
            compute_utilization=float(eff.get("compute_utilization", 0.8)),
            link_efficiency=float(eff.get("link_efficiency", 0.9)),
            per_message_overhead=float(eff.get("per_message_overhead_us", 1.0)) * 1e-6,
        )
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


@dataclass(frozen=True)
class Scenario:
    """One CLI invocation: configs, mode, and output destination."""

    hardware_path: str
    model_path: str
    mode: str                      # simulate | search | sweep | faults
    out_dir: str
    strategy: Optional[str] = None  # "(dp,tp,sp,stream)" for simulate
    seed: int = 0
    budget_s: float = 600.0
    sweep_axis: str = "stream"
    sweep_values: tuple[int, ...] = (1, 2, 4, 8, 16, 32)
    fault_kind: str = "core"
    fault_rates: tuple[float, ...] = (0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4)
