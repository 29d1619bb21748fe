"""Flat ``key = value`` run configuration.

Every key maps to one field of :class:`RunConfig`; values are parsed with the
type of the field's default.  Blank lines and ``#`` comments are ignored and
unknown keys are rejected.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .data import DegradationSpec
from .errors import ContractError
from .model import PAPER_CONFIG, ModelConfig
from .train import Schedule

_MODEL_KEYS = tuple(f.name for f in fields(ModelConfig))
_SCHEDULE_KEYS = tuple(f.name for f in fields(Schedule))


@dataclass
class RunConfig:
    # model
    width: int = 32
    d_state: int = 16
    heads: int = 4
    window: int = 16
    branches: int = 4
    k: int = 7
    depth: int = 3
    scale: int = 4
    flow_method: str = "block_match"
    flow_block: int = 8
    flow_radius: int = 4
    lpe: bool = True
    cssb_lw: bool = True
    sp: bool = True
    issb_lw: bool = True
    cat: bool = True
    prop_scheme: str = "t2t1"
    compose_mode: str = "sum"
    recon_block: str = "lksb"
    use_cssb: bool = True
    dcn_groups: int = 4
    # degradation
    noise_std: float = 15.0
    # schedule
    iterations: int = 2000
    # desk scale starts from scratch on tiny patches; see README for the paper profile
    lr: float = 1e-3
    min_lr: float = 1e-7
    batch: int = 2
    patch: int = 64
    frames: int = 7
    eps: float = 1e-3
    beta2: float = 0.99
    # data; empty roots select the built-in synthetic set
    hr_root: str = ""
    lr_root: str = ""
    val_hr_root: str = ""
    val_lr_root: str = ""
    synth_clips: int = 8
    synth_size: int = 256
    synth_frames: int = 7
    # run
    seed: int = 0
    out_dir: str = "runs/default"
    checkpoint_every: int = 500

    def model_config(self) -> ModelConfig:
        return ModelConfig(**{k: getattr(self, k) for k in _MODEL_KEYS})

    def schedule(self) -> Schedule:
        return Schedule(**{k: getattr(self, k) for k in _SCHEDULE_KEYS})

    def degradation(self, seed: int) -> DegradationSpec:
        return DegradationSpec(scale=self.scale, noise_std=self.noise_std, seed=seed)

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.to_dict().items())

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps())
        return path

    def with_overrides(self, pairs) -> "RunConfig":
        """Return a copy with ``key=value`` strings applied."""
        values = self.to_dict()
        for item in pairs:
            if "=" not in item:
                raise ContractError(f"override {item!r} is not key=value")
            key, raw = (s.strip() for s in item.split("=", 1))
            values[key] = raw
        return RunConfig.from_mapping(values)

    @classmethod
    def from_mapping(cls, mapping: dict) -> "RunConfig":
        types = {f.name: type(f.default) for f in fields(cls)}
        unknown = sorted(set(mapping) - set(types))
        if unknown:
            raise ContractError(f"unknown config keys: {unknown}")
        cfg = cls(**{k: _parse(v, types[k], k) for k, v in mapping.items()})
        cfg.model_config()  # validates model keys early
        return cfg

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        mapping = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ContractError(f"line {n}: expected key = value, got {line!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key in mapping:
                raise ContractError(f"line {n}: duplicate key {key!r}")
            mapping[key] = value
        return cls.from_mapping(mapping)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as err:
            raise ContractError(f"cannot read config {path}: {err}") from None
        return cls.loads(text)


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _parse(value, typ, key):
    if not isinstance(value, str) or typ is str:
        if typ is float and isinstance(value, int) and not isinstance(value, bool):
            return float(value)
        if not isinstance(value, typ):
            raise ContractError(f"{key}: expected {typ.__name__}, got {value!r}")
        return value
    try:
        if typ is bool:
            low = value.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "1", "yes")
        return typ(value)
    except ValueError:
        raise ContractError(f"{key}: cannot parse {value!r} as {typ.__name__}") from None


DESK = RunConfig()

# Full-size schedule; far beyond a CPU budget, kept for reference runs.
PAPER = RunConfig(**PAPER_CONFIG, iterations=100_000, lr=2e-4, beta2=0.999, batch=8,
                  patch=256, frames=7, out_dir="runs/paper")
