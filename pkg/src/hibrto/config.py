"""Experiment configuration: validated settings, presets, stable hashing."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields

PROBLEMS = ("elliptic", "pet")
SAMPLERS = ("gibbs", "pm", "mh")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce one sampling run.

    ``size`` is the number of grid nodes per axis: the field dimension is
    ``size`` for the interval problem and ``size**2`` for the planar one.
    ``burn_in`` of ``None`` means one tenth of ``steps``.  ``workers`` of
    ``None`` defers to the command line / environment.
    """

    problem: str
    size: int
    sampler: str
    steps: int
    seed: int = 0
    data_seed: int = 20260101
    inner_steps: int = 1
    k: int = 1
    burn_in: int | None = None
    init_lam: float | None = None
    init_delta: float | None = None
    init_gamma: float | None = None
    trust_region: str | tuple[float, float] | None = None
    sample_mask: tuple[bool, bool, bool] = (True, True, True)
    store_fields_every: int = 10
    gamma_grid_size: int = 1000
    workers: int | None = None

    def __post_init__(self):
        problems = _validate(self)
        if problems:
            raise ValueError(
                "invalid configuration:\n  " + "\n  ".join(problems)
            )

    @property
    def effective_burn_in(self) -> int:
        return self.steps // 10 if self.burn_in is None else self.burn_in

    def to_dict(self) -> dict:
        payload = asdict(self)
        if isinstance(payload["trust_region"], tuple):
            payload["trust_region"] = list(payload["trust_region"])
        payload["sample_mask"] = list(payload["sample_mask"])
        return payload

    @classmethod
    def from_dict(cls, payload: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(payload) - known)
        if unknown:
            raise ValueError(
                "invalid configuration:\n  unknown fields: " + ", ".join(unknown)
            )
        data = dict(payload)
        if isinstance(data.get("trust_region"), list):
            data["trust_region"] = tuple(data["trust_region"])
        if isinstance(data.get("sample_mask"), list):
            data["sample_mask"] = tuple(data["sample_mask"])
        return cls(**data)

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON encoding, for manifests."""
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()


def _validate(config: ExperimentConfig) -> list[str]:
    errors: list[str] = []
    if config.problem not in PROBLEMS:
        errors.append(f"problem: must be one of {PROBLEMS}, got {config.problem!r}")
    if not isinstance(config.size, int) or config.size < 4:
        errors.append(f"size: must be an integer >= 4, got {config.size!r}")
    if config.sampler not in SAMPLERS:
        errors.append(f"sampler: must be one of {SAMPLERS}, got {config.sampler!r}")
    if not isinstance(config.steps, int) or config.steps < 1:
        errors.append(f"steps: must be a positive integer, got {config.steps!r}")
    if not isinstance(config.seed, int):
        errors.append(f"seed: must be an integer, got {config.seed!r}")
    if not isinstance(config.data_seed, int):
        errors.append(f"data_seed: must be an integer, got {config.data_seed!r}")
    if not isinstance(config.inner_steps, int) or config.inner_steps < 0:
        errors.append(
            f"inner_steps: must be a nonnegative integer, got {config.inner_steps!r}"
        )
    if not isinstance(config.k, int) or config.k < 1:
        errors.append(f"k: must be a positive integer, got {config.k!r}")
    if config.burn_in is not None and (
        not isinstance(config.burn_in, int) or config.burn_in < 0
    ):
        errors.append(
            f"burn_in: must be a nonnegative integer or null, got {config.burn_in!r}"
        )
    for name in ("init_lam", "init_delta", "init_gamma"):
        value = getattr(config, name)
        if value is not None and not (
            isinstance(value, (int, float)) and value > 0
        ):
            errors.append(f"{name}: must be a positive number or null, got {value!r}")
    region = config.trust_region
    if region is not None and region != "auto":
        ok = (
            isinstance(region, tuple)
            and len(region) == 2
            and all(isinstance(v, (int, float)) for v in region)
            and region[0] > 0
            and 0 < region[1] < 1
        )
        if not ok:
            errors.append(
                "trust_region: must be null, 'auto', or [radius > 0, width in (0, 1)], "
                f"got {region!r}"
            )
    mask = config.sample_mask
    if (
        not isinstance(mask, tuple)
        or len(mask) != 3
        or not all(isinstance(v, bool) for v in mask)
        or not any(mask)
    ):
        errors.append(
            "sample_mask: must be three booleans with at least one enabled, "
            f"got {mask!r}"
        )
    if not isinstance(config.store_fields_every, int) or config.store_fields_every < 1:
        errors.append(
            "store_fields_every: must be a positive integer, "
            f"got {config.store_fields_every!r}"
        )
    if not isinstance(config.gamma_grid_size, int) or config.gamma_grid_size < 2:
        errors.append(
            f"gamma_grid_size: must be an integer >= 2, got {config.gamma_grid_size!r}"
        )
    if config.workers is not None and (
        not isinstance(config.workers, int) or config.workers < 1
    ):
        errors.append(
            f"workers: must be a positive integer or null, got {config.workers!r}"
        )
    return errors


_PRESETS: dict[str, dict] = {
    "elliptic-64": dict(problem="elliptic", size=64, sampler="gibbs", steps=2000),
    "elliptic-256": dict(problem="elliptic", size=256, sampler="gibbs", steps=2000),
    "elliptic-1024": dict(problem="elliptic", size=1024, sampler="gibbs", steps=2000),
    "elliptic-pm-256": dict(problem="elliptic", size=256, sampler="pm", steps=2000, k=5),
    "pet-20": dict(problem="pet", size=20, sampler="gibbs", steps=1000,
                   trust_region="auto"),
    "pet-40": dict(problem="pet", size=40, sampler="gibbs", steps=1000,
                   trust_region="auto"),
}


def preset_names() -> list[str]:
    return sorted(_PRESETS)


def preset(name: str) -> ExperimentConfig:
    """A ready-made configuration for the two benchmark families."""
    try:
        payload = _PRESETS[name]
    except KeyError:
        raise ValueError(
            f"unknown preset {name!r}; available: {', '.join(preset_names())}"
        ) from None
    return ExperimentConfig(**payload)
