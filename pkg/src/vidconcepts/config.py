"""Experiment configuration: nested sections, validation and the resolved echo."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .conceptspace import AlignmentConfig
from .encoder import EncoderConfig
from .errors import ConfigError, InvalidInputError
from .videokit import AugmentConfig

ECHO_NAME = "config.resolved.yaml"


@dataclass
class VideokitConfig:
    n_samples: int = 2000
    n_static_classes: int = 4
    n_dynamic_classes: int = 4
    shape: list = field(default_factory=lambda: [16, 64, 64, 3])
    sprite_frac: float = 0.15
    fps: float = 8.0
    crop_frames: int | None = None
    crop_scale: list = field(default_factory=lambda: [0.6, 1.0])
    flip: bool = True
    eval_crop_scale: float = 1.0

    def augment(self):
        return AugmentConfig(crop_frames=self.crop_frames, crop_scale=tuple(self.crop_scale),
                             out_size=tuple(self.shape[1:3]), flip=self.flip)


@dataclass
class ConceptspaceConfig:
    K_s: int = 50
    K_d: int = 50
    tau: float = 0.1
    sinkhorn_iters: int = 3
    sinkhorn_eps: float = 0.05

    def alignment(self):
        return AlignmentConfig(self.tau, self.sinkhorn_iters, self.sinkhorn_eps)


@dataclass
class BottleneckConfig:
    hidden: int | None = None  # None -> encoder output channels


@dataclass
class LocalcontrastConfig:
    K_top: int = 5
    margin: float = 1.0


@dataclass
class TrainerConfig:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 0.01
    warmup_epochs: int = 5
    lr: float = 0.01
    weight_decay: float = 1e-4
    momentum: float = 0.9
    epochs: int = 50
    batch_size: int = 32
    grad_clip: float = 10.0
    checkpoint_every: int = 10


@dataclass
class EvalkitConfig:
    top_ratio: float = 0.1
    train_fraction: float = 0.75
    split_seed: int = 0
    ks: list = field(default_factory=lambda: [1, 5, 10, 20])
    probe_tol: float = 1e-6
    probe_max_iter: int = 10000
    probe_C: float = 1.0


@dataclass
class ExperimentConfig:
    name: str = "default"
    seed: int = 0
    videokit: VideokitConfig = field(default_factory=VideokitConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    conceptspace: ConceptspaceConfig = field(default_factory=ConceptspaceConfig)
    bottleneck: BottleneckConfig = field(default_factory=BottleneckConfig)
    localcontrast: LocalcontrastConfig = field(default_factory=LocalcontrastConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    evalkit: EvalkitConfig = field(default_factory=EvalkitConfig)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data):
        cfg = _build(cls, data or {}, "")
        validate(cfg)
        return cfg

    def replace(self, **sections):
        """Copy with section fields overridden, e.g. ``replace(trainer={"epochs": 2})``."""
        data = self.to_dict()
        for key, value in sections.items():
            if isinstance(value, dict):
                data[key].update(value)
            else:
                data[key] = value
        return ExperimentConfig.from_dict(data)


# Values fixed by the published method; every other default is a chosen setting.
PUBLISHED_KEYS = {
    "conceptspace.K_s", "conceptspace.K_d", "localcontrast.K_top",
    "trainer.alpha", "trainer.beta", "trainer.gamma", "trainer.warmup_epochs",
    "trainer.lr", "trainer.weight_decay", "evalkit.top_ratio",
}


def _coerce(value, default, key):
    if default is None:
        # optional integer fields
        if value is None or (isinstance(value, int) and not isinstance(value, bool)):
            return value
        raise ConfigError(key, f"expected an integer or null, got {value!r}")
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(key, f"expected a number, got {value!r}") from None
    if isinstance(default, list):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(key, f"expected a list, got {value!r}")
        return list(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(key, f"expected a string, got {value!r}")
    return value


def _build(cls, data, prefix):
    if not isinstance(data, dict):
        raise ConfigError(prefix.rstrip(".") or "<root>", "expected a mapping")
    inst = cls()
    names = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in data.items():
        path = f"{prefix}{key}"
        if key not in names:
            raise ConfigError(path, "unknown key")
        current = getattr(inst, key)
        if dataclasses.is_dataclass(current):
            value = _build(type(current), value if value is not None else {}, path + ".")
        else:
            value = _coerce(value, current, path)
        setattr(inst, key, value)
    return inst


def _require(ok, key, message):
    if not ok:
        raise ConfigError(key, message)


def validate(cfg: ExperimentConfig):
    vk, enc, cs = cfg.videokit, cfg.encoder, cfg.conceptspace
    lc, tr, ev = cfg.localcontrast, cfg.trainer, cfg.evalkit
    _require(vk.n_samples >= 1, "videokit.n_samples", "must be >= 1")
    _require(vk.n_static_classes >= 2, "videokit.n_static_classes", "must be >= 2")
    _require(vk.n_dynamic_classes >= 2, "videokit.n_dynamic_classes", "must be >= 2")
    _require(len(vk.shape) == 4 and all(int(x) >= 1 for x in vk.shape) and vk.shape[0] >= 2,
             "videokit.shape", "must be [T>=2, H, W, Ch]")
    _require(0 < vk.sprite_frac < 1, "videokit.sprite_frac", "must be in (0, 1)")
    _require(len(vk.crop_scale) == 2 and 0 < vk.crop_scale[0] <= vk.crop_scale[1] <= 1,
             "videokit.crop_scale", "must be [lo, hi] with 0 < lo <= hi <= 1")
    _require(vk.crop_frames is None or 2 <= vk.crop_frames <= vk.shape[0],
             "videokit.crop_frames", "must be null or within [2, T]")
    _require(0 < vk.eval_crop_scale <= 1, "videokit.eval_crop_scale", "must be in (0, 1]")
    try:
        enc.validate()
    except InvalidInputError as exc:
        raise ConfigError("encoder", str(exc)) from None
    _require(enc.in_channels == vk.shape[3], "encoder.in_channels", "must match videokit.shape[3]")
    T = vk.crop_frames or vk.shape[0]
    try:
        enc.output_shape(T, vk.shape[1], vk.shape[2])
    except InvalidInputError as exc:
        raise ConfigError("encoder.spatial_strides", str(exc)) from None
    C = enc.out_channels
    _require(cs.K_s >= 2, "conceptspace.K_s", "must be >= 2")
    _require(cs.K_d >= 2, "conceptspace.K_d", "must be >= 2")
    _require(cs.tau > 0, "conceptspace.tau", "must be > 0")
    _require(cs.sinkhorn_iters >= 1, "conceptspace.sinkhorn_iters", "must be >= 1")
    _require(cs.sinkhorn_eps > 0, "conceptspace.sinkhorn_eps", "must be > 0")
    _require(cs.K_s + cs.K_d < C, "conceptspace.K_s",
             f"K_s + K_d must stay below the feature dim {C} (code is a bottleneck)")
    _require(cfg.bottleneck.hidden is None or cfg.bottleneck.hidden >= 1,
             "bottleneck.hidden", "must be null or >= 1")
    _require(1 <= lc.K_top <= min(cs.K_s, cs.K_d), "localcontrast.K_top",
             "must be within [1, min(K_s, K_d)]")
    _require(lc.margin > 0, "localcontrast.margin", "must be > 0")
    for key in ("alpha", "beta", "gamma"):
        _require(getattr(tr, key) >= 0, f"trainer.{key}", "must be >= 0")
    _require(tr.warmup_epochs >= 0, "trainer.warmup_epochs", "must be >= 0")
    _require(tr.lr >= 0, "trainer.lr", "must be >= 0")
    _require(tr.weight_decay >= 0, "trainer.weight_decay", "must be >= 0")
    _require(0 <= tr.momentum < 1, "trainer.momentum", "must be in [0, 1)")
    _require(tr.epochs >= 1, "trainer.epochs", "must be >= 1")
    _require(tr.batch_size >= 1, "trainer.batch_size", "must be >= 1")
    _require(tr.grad_clip > 0, "trainer.grad_clip", "must be > 0")
    _require(tr.checkpoint_every >= 1, "trainer.checkpoint_every", "must be >= 1")
    _require(0 < ev.top_ratio <= 1, "evalkit.top_ratio", "must be in (0, 1]")
    _require(0 < ev.train_fraction < 1, "evalkit.train_fraction", "must be in (0, 1)")
    _require(len(ev.ks) >= 1 and all(k >= 1 for k in ev.ks), "evalkit.ks", "must be positive")
    return cfg


def load_config(path=None, echo_dir=None):
    """Read a YAML config (missing keys take defaults) and optionally write the echo."""
    data = {}
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text())
        except yaml.YAMLError as exc:
            raise ConfigError(str(path), f"unparseable YAML: {exc}") from None
    cfg = ExperimentConfig.from_dict(data or {})
    if echo_dir is not None:
        write_echo(cfg, echo_dir)
    return cfg


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "null"
    if isinstance(value, float):
        text = repr(value)
        if "e" in text and "." not in text.split("e")[0]:
            mant, exp = text.split("e")
            text = f"{mant}.0e{exp}"
        return text
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_fmt(v) for v in value) + "]"
    if isinstance(value, str):
        return yaml.safe_dump(value, default_style='"').strip()
    return str(value)


def dump_echo(cfg: ExperimentConfig):
    lines = ["# resolved experiment config; trailing comments give each value's provenance"]
    data = cfg.to_dict()
    for key, value in data.items():
        if isinstance(value, dict):
            lines.append(f"{key}:")
            for sub, v in value.items():
                prov = "published" if f"{key}.{sub}" in PUBLISHED_KEYS else "plumbing"
                lines.append(f"  {sub}: {_fmt(v)}  # provenance: {prov}")
        else:
            lines.append(f"{key}: {_fmt(value)}")
    return "\n".join(lines) + "\n"


def write_echo(cfg, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / ECHO_NAME
    path.write_text(dump_echo(cfg))
    return path
