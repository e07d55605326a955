"""Run configuration: a flat `key = value` text format and typed access.

The on-disk format is UTF-8 text, one `key = value` per line, `#` comments
and blank lines ignored. Serialization sorts keys, so
parse -> serialize -> parse is the identity on the key map.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, replace

from .masking import MaskParams
from .model import ModelConfig
from .objective import LossWeights, ResolutionPlan, Schedule


class ConfigError(ValueError):
    pass


def parse_kv(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = value.strip()
    return out


def format_kv(kv: dict[str, str]) -> str:
    return "".join(f"{k} = {kv[k]}\n" for k in sorted(kv))


# ----------------------------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    """Everything a pretraining / distillation / eval run needs."""

    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    mask: MaskParams = field(default_factory=lambda: MaskParams(num_blocks=2))
    loss: LossWeights = field(default_factory=LossWeights)
    schedule: Schedule = field(default_factory=Schedule)
    resolution: ResolutionPlan = field(default_factory=ResolutionPlan)
    image_batch: int = 6
    video_batch: int = 2
    ema: float = 0.99925
    weight_decay: float = 0.04
    checkpoint_interval: int = 500
    eval_interval: int = 100
    collapse_floor: float = 0.01
    # synthetic-scene stream used for pretraining batches
    scene_objects: int = 3
    scene_noise: float = 8.0
    scene_speed: float = 1.5
    student_ema: float = 0.999
    distill_predictor_depth: int = 0  # 0 = encoder_depth // 2, capped at predictor_depth

    def lambda_for(self, modality: str) -> float:
        return self.loss.lambda_for(modality)


_SECTIONS = {
    "model": ModelConfig,
    "mask": MaskParams,
    "loss": LossWeights,
    "schedule": Schedule,
    "resolution": ResolutionPlan,
}


def _encode_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(_encode_value(x) for x in v)
    if v is None:
        return "none"
    return repr(v) if isinstance(v, float) else str(v)


def _decode_value(text: str, ref):
    if isinstance(ref, bool):
        if text not in ("true", "false"):
            raise ConfigError(f"expected true/false, got {text!r}")
        return text == "true"
    if isinstance(ref, tuple):
        parts = [p for p in text.split(",") if p != ""]
        elem = ref[0] if ref else 0
        return tuple(_decode_value(p, elem) for p in parts)
    if ref is None or text == "none":
        return None if text == "none" else float(text)
    if isinstance(ref, int):
        return int(text)
    if isinstance(ref, float):
        return float(text)
    return text


def run_config_to_kv(cfg: RunConfig) -> dict[str, str]:
    kv: dict[str, str] = {}
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if f.name in _SECTIONS:
            for sub in fields(value):
                kv[f"{f.name}.{sub.name}"] = _encode_value(getattr(value, sub.name))
        else:
            kv[f.name] = _encode_value(value)
    return kv


def run_config_from_kv(kv: dict[str, str], base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    sections = {name: dict() for name in _SECTIONS}
    plain = {}
    known_plain = {f.name: getattr(cfg, f.name) for f in fields(cfg)
                   if f.name not in _SECTIONS}
    for key, text in kv.items():
        if "." in key:
            section, sub = key.split(".", 1)
            if section not in _SECTIONS:
                raise ConfigError(f"unknown config section {section!r}")
            sections[section][sub] = text
        else:
            if key not in known_plain:
                raise ConfigError(f"unknown config key {key!r}")
            plain[key] = _decode_value(text, known_plain[key])

    updates = dict(plain)
    for name, sub_kv in sections.items():
        current = getattr(cfg, name)
        refs = {f.name: getattr(current, f.name) for f in fields(current)}
        decoded = {}
        for sub, text in sub_kv.items():
            if sub not in refs:
                raise ConfigError(f"unknown config key {name}.{sub!r}")
            decoded[sub] = _decode_value(text, refs[sub])
        if decoded:
            updates[name] = replace(current, **decoded)
    return replace(cfg, **updates)


def load_run_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return run_config_from_kv(parse_kv(fh.read()))


def save_run_config(cfg: RunConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_kv(run_config_to_kv(cfg)))


def config_hash(cfg: RunConfig) -> str:
    text = format_kv(run_config_to_kv(cfg))
    return hashlib.blake2s(text.encode("utf-8"), digest_size=16).hexdigest()


# ----------------------------------------------------------------------
# presets

def desk_config(seed: int = 0) -> RunConfig:
    return RunConfig(seed=seed)


def full_scale_config(seed: int = 0) -> RunConfig:
    """Full-scale preset: the production-recipe hyperparameters.

    Not runnable at desk scale; kept as the reference parameterization.
    """
    return RunConfig(
        seed=seed,
        model=ModelConfig(
            patch_size=16, tubelet_size=2, embed_dim=1408, depth=48, heads=16,
            predictor_depth=24, predictor_dim=384, predictor_heads=12,
            level_indices=(12, 24, 36, 48)),
        mask=MaskParams(spatial_scale=(0.15, 0.7), temporal_scale=(1.0, 1.0),
                        aspect_ratio=(0.75, 1.5), num_blocks=8),
        loss=LossWeights(lambda_video=0.5, lambda_image=0.7),
        schedule=Schedule(start_lr=1e-4, constant_lr=5.25e-4, final_lr=1e-6,
                          warmup_steps=12_000, total_steps=147_000,
                          cooldown_steps=12_000, cooldown_start_lr=6e-4),
        resolution=ResolutionPlan(image_res=256, video_frames=16, video_res=256,
                                  cooldown_image_res=512, cooldown_video_frames=64,
                                  cooldown_video_res=384),
        image_batch=2304,
        video_batch=128,
        ema=0.99925,
        weight_decay=0.04,
        student_ema=0.99925,
    )
