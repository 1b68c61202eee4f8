"""Calibrated defaults and helpers that assemble runnable configurations.

The canonical defaults live in ``configs/paper.json`` at the repository root
(a frozen copy ships inside the package).  They are produced once by the
``calibrate`` subcommand and then treated as data: compute rates, token
defaults, and the fitted skew exponent all come from this file, never from
code constants.  Precedence when resolving: explicit path argument, then the
``RAGDCACHE_CONFIG`` environment variable, then the packaged copy.
"""

from __future__ import annotations

import json
import os
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

from .codec import ModelProfile
from .costs import Configuration, CostParams, DeviceKind, DeviceProfile
from .sim import ArrivalProcess, ArrivalSpec, SimConfig

ENV_CONFIG = "RAGDCACHE_CONFIG"
ENV_STORE = "RAGDCACHE_STORE"

_PACKAGED = resources.files("ragdcache").joinpath("data/paper.json")


def load_config(path: str | Path | None = None) -> dict[str, Any]:
    """Resolve and parse the defaults file."""
    if path is None:
        path = os.environ.get(ENV_CONFIG)
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    return json.loads(_PACKAGED.read_text(encoding="utf-8"))


def model_profile(cfg: dict[str, Any], name: str) -> ModelProfile:
    try:
        raw = cfg["profiles"][name]
    except KeyError as exc:
        raise KeyError(f"unknown model profile {name!r}; have {sorted(cfg['profiles'])}") from exc
    return ModelProfile(
        model_id=name,
        layers=int(raw["layers"]),
        hidden_dim=int(raw["hidden_dim"]),
        kv_heads=int(raw["kv_heads"]),
        head_dim=int(raw["head_dim"]),
        elem_width=int(raw.get("elem_width", 2)),
    )


def cost_params(cfg: dict[str, Any], model: ModelProfile) -> CostParams:
    raw = cfg["cost"]
    return CostParams(
        model=model,
        disk_read_bw=float(raw["disk_read_bw"]),
        disk_write_bw=float(raw["disk_write_bw"]),
        disk_seek=float(raw["disk_seek"]),
        mem_bw=float(raw["mem_bw"]),
        network_delay=float(raw["network_delay"]),
        decode_enabled=bool(raw.get("decode_enabled", False)),
        decode_time_per_token=float(raw.get("decode_time_per_token", 0.0)),
    )


def shared_devices(cfg: dict[str, Any], configuration: Configuration) -> tuple[DeviceProfile, ...]:
    rates = cfg["devices"]["multi_instance"]
    gpu = float(rates["inference_gpu_rate"])
    if configuration is Configuration.BASELINE:
        return (
            DeviceProfile("gpu0", DeviceKind.INFERENCE_GPU, gpu),
            DeviceProfile("gpu1", DeviceKind.INFERENCE_GPU, gpu),
        )
    if configuration is Configuration.A:
        return (
            DeviceProfile("gpu0", DeviceKind.INFERENCE_GPU, gpu),
            DeviceProfile("gpu1", DeviceKind.GENERATOR_GPU, float(rates["generator_gpu_rate"])),
        )
    if configuration is Configuration.B:
        return (
            DeviceProfile("gpu0", DeviceKind.INFERENCE_GPU, gpu),
            DeviceProfile("gpu1", DeviceKind.INFERENCE_GPU, gpu),
            DeviceProfile("cpu0", DeviceKind.CPU, float(rates["cpu_rate"])),
        )
    raise ValueError(f"no shared topology for {configuration}")


def single_instance_device(cfg: dict[str, Any]) -> DeviceProfile:
    rate = float(cfg["devices"]["single_instance"]["gpu_rate"])
    return DeviceProfile("gpu0", DeviceKind.INFERENCE_GPU, rate)


def shared_sim_config(
    cfg: dict[str, Any],
    configuration: Configuration,
    k: int,
    rate: float | None = None,
    tries: int | None = None,
    seed: int = 1,
    process: ArrivalProcess = ArrivalProcess.POISSON,
) -> SimConfig:
    sim = cfg["sim"]
    model = model_profile(cfg, sim["multi_instance_profile"])
    return SimConfig(
        configuration=configuration,
        devices=shared_devices(cfg, configuration),
        cost=cost_params(cfg, model),
        arrival=ArrivalSpec(
            rate=float(cfg["workload"]["rate"] if rate is None else rate), process=process
        ),
        k=k,
        tries=int(sim["tries"] if tries is None else tries),
        seed=seed,
        threshold=float(sim["threshold"]),
        memory_capacity_bytes=int(sim["memory_capacity_bytes"]),
    )


def single_sim_config(cfg: dict[str, Any], profile_name: str, seed: int = 1) -> SimConfig:
    model = model_profile(cfg, profile_name)
    return SimConfig(
        configuration=Configuration.SINGLE_INSTANCE,
        devices=(single_instance_device(cfg),),
        cost=cost_params(cfg, model),
        arrival=ArrivalSpec(rate=float(cfg["workload"]["rate"])),
        k=1,
        tries=1,
        seed=seed,
        threshold=float(cfg["sim"]["threshold"]),
        memory_capacity_bytes=int(cfg["sim"].get("single_instance_memory_bytes", 0)),
    )


def workload_params(cfg: dict[str, Any]) -> dict[str, Any]:
    return dict(cfg["workload"])


def batch_sizes(cfg: dict[str, Any]) -> Sequence[int]:
    return [int(b) for b in cfg["sim"]["batch_sizes"]]


def sweep_rates(cfg: dict[str, Any]) -> Sequence[float]:
    return [float(r) for r in cfg["sim"]["sweep_rates"]]
