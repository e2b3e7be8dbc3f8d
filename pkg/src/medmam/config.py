"""Run configuration: defaults, JSON round-trip, strict unknown-key rejection.

The JSON schema mirrors ``RunConfig`` exactly; nested objects are ``synth``,
``flags`` and ``scheduler``. Every key is optional (defaults apply), unknown
keys anywhere are contract errors. ``synth.seed`` of null inherits the run
seed. Split ratios are fixed at 70/10/20.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

from .errors import ContractError

SPLIT_RATIOS = (0.7, 0.1, 0.2)

FUSION_MODES = ("medmam", "no_manifold", "concat", "diff")
TRANSPORT_MODES = ("paper", "gyro")


@dataclass(frozen=True)
class SchedulerConfig:
    step: int = 5      # epochs between reductions
    factor: float = 0.3

    def __post_init__(self):
        if self.step < 1 or not 0.0 < self.factor <= 1.0:
            raise ContractError(f"bad scheduler config: step={self.step} factor={self.factor}")


@dataclass(frozen=True)
class Flags:
    itc: bool = True
    itm: bool = True


@dataclass(frozen=True)
class SynthSection:
    n_samples: int = 3000
    seed: int | None = None  # null inherits the run seed
    class_separation: float = 2.0
    noise_sigma: float = 0.1
    text_informative: bool = True
    class_probs: tuple[float, float, float] = (0.30, 0.32, 0.38)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    d: int = 16
    n_regions: int = 4
    tau: float = 0.05
    curvature: float = 0.1
    curvature_trainable: bool = True
    transport_mode: str = "paper"
    fusion_mode: str = "medmam"
    flags: Flags = field(default_factory=Flags)
    lr_main: float = 5e-5
    lr_stub: float = 1e-5
    weight_decay: float = 1e-4
    epochs: int = 20
    batch_size: int = 4
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    early_stop_patience: int | None = 5
    synth: SynthSection = field(default_factory=SynthSection)

    def __post_init__(self):
        if self.tau <= 0:
            raise ContractError(f"tau must be positive, got {self.tau}")
        if self.curvature <= 0:
            raise ContractError(f"curvature must be positive, got {self.curvature}")
        if self.transport_mode not in TRANSPORT_MODES:
            raise ContractError(f"unknown transport mode '{self.transport_mode}'")
        if self.fusion_mode not in FUSION_MODES:
            raise ContractError(f"unknown fusion mode '{self.fusion_mode}'")
        if self.lr_main <= 0 or self.lr_stub <= 0:
            raise ContractError("learning rates must be positive")
        if self.weight_decay < 0:
            raise ContractError("weight decay must be nonnegative")
        if self.epochs < 0 or self.batch_size < 2:
            raise ContractError(
                f"epochs must be >= 0 and batch size >= 2, got {self.epochs}/{self.batch_size}"
            )
        if self.d < 2 or self.n_regions < 1:
            raise ContractError(f"bad dimensions d={self.d} n_regions={self.n_regions}")
        if self.early_stop_patience is not None and self.early_stop_patience < 1:
            raise ContractError("early stop patience must be >= 1 or null")

    @property
    def data_seed(self) -> int:
        return self.seed if self.synth.seed is None else self.synth.seed

    def synth_config(self):
        from .synth import SynthConfig

        return SynthConfig(
            n_samples=self.synth.n_samples,
            d=self.d,
            n_regions=self.n_regions,
            seed=self.data_seed,
            class_separation=self.synth.class_separation,
            noise_sigma=self.synth.noise_sigma,
            text_informative=self.synth.text_informative,
            class_probs=self.synth.class_probs,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **kw) -> "RunConfig":
        merged = self.to_dict()
        for key, value in kw.items():
            if key not in merged:
                raise ContractError(f"unknown config key '{key}'")
            if isinstance(merged[key], dict) and isinstance(value, dict):
                merged[key].update(value)
            else:
                merged[key] = value
        return config_from_dict(merged)


def _build(cls, obj: dict, where: str):
    if not isinstance(obj, dict):
        raise ContractError(f"{where}: expected an object, got {type(obj).__name__}")
    allowed = {f.name for f in fields(cls)}
    unknown = set(obj) - allowed
    if unknown:
        raise ContractError(f"{where}: unknown key '{sorted(unknown)[0]}'")
    return dict(obj)


def config_from_dict(obj: dict) -> RunConfig:
    kw = _build(RunConfig, obj, "config")
    if "flags" in kw:
        kw["flags"] = Flags(**_build(Flags, kw["flags"], "config.flags"))
    if "scheduler" in kw:
        kw["scheduler"] = SchedulerConfig(
            **_build(SchedulerConfig, kw["scheduler"], "config.scheduler")
        )
    if "synth" in kw:
        synth_kw = _build(SynthSection, kw["synth"], "config.synth")
        if "class_probs" in synth_kw:
            probs = synth_kw["class_probs"]
            if not isinstance(probs, (list, tuple)) or len(probs) != 3:
                raise ContractError("config.synth.class_probs must be a 3-element list")
            synth_kw["class_probs"] = tuple(float(p) for p in probs)
        kw["synth"] = SynthSection(**synth_kw)
    try:
        return RunConfig(**kw)
    except TypeError as exc:
        raise ContractError(f"bad config value: {exc}") from exc


def load_config(path: str) -> RunConfig:
    with open(path) as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ContractError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(obj)


def save_config(cfg: RunConfig, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2)
        fh.write("\n")
