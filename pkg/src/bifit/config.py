"""Run configuration: dataclasses, INI-style config files, dotted overrides.

A config file is plain ``key = value`` text with ``[section]`` headers, one
section per sub-config. Every field can be overridden on the command line
with a flag of the same dotted name, e.g. ``--model.channels 32``.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field, fields

from .errors import ContractError

FUSION_MODES = ("attention_multiply", "attention_ffn")
VEWL_TEXT_MODES = ("fixed", "dynamic")


@dataclass
class ModelConfig:
    channels: int = 64          # hidden width C, shared by both modalities
    heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    num_queries: int = 5        # language queries per frame
    num_levels: int = 4         # pyramid levels, strides {8,16,32,64}
    mask_channels: int = 8      # dynamic-conv channel width
    ffn_ratio: int = 4          # FFN hidden width = ffn_ratio * channels
    max_words: int = 12
    vocab_size: int = 0         # 0 = use the built-in grammar vocabulary
    ifi_enabled: bool = True
    vewl_enabled: bool = True
    lewv_enabled: bool = True
    fusion: str = "attention_multiply"
    vewl_text: str = "fixed"
    ifi_ratio: str = "1:1"      # decoder layers : interaction layers


@dataclass
class LossConfig:
    lambda_cls: float = 2.0
    lambda_l1: float = 5.0
    lambda_giou: float = 2.0
    lambda_dice: float = 1.0
    lambda_focal: float = 1.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    supervise_negatives: bool = True
    aux_losses: bool = True


@dataclass
class OptimConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    steps: int = 2000
    grad_clip: float = 0.1      # max grad norm, 0 disables
    milestones: str = "0.6,0.85"  # fractions of total steps
    decay_factor: float = 0.1


@dataclass
class DataConfig:
    frames: int = 6
    height: int = 64
    width: int = 64
    train_clips: int = 500
    val_clips: int = 100
    seed: int = 7
    min_objects: int = 2
    max_objects: int = 4
    motion_fraction: float = 0.20    # share of scenes disambiguated only by motion
    occluded_fraction: float = 0.30  # share of scenes where a distractor crosses the target


@dataclass
class PathsConfig:
    data_root: str = "data"     # dataset root holding train/ and val/ splits
    out_dir: str = "runs"       # where loss curves, checkpoints, reports land
    checkpoint: str = ""        # checkpoint to evaluate/infer from ("" = newest in out_dir)
    clip_dir: str = ""          # directory of frame_%03d.ppm files to infer on
    expression: str = ""        # referring phrase for infer
    resume: str = ""            # checkpoint to resume training from


@dataclass
class RunSettings:
    seed: int = 0
    precision: int = 32         # 32 or 64 bit floats
    log_every: int = 25
    checkpoint_every: int = 1000
    ablation_seeds: int = 3
    ablation_steps: int = 1500  # training steps per ablation run
    ablation_rows: str = "all"  # "components" or "all" (adds fusion/ratio rows)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    run: RunSettings = field(default_factory=RunSettings)

    def validate(self) -> "RunConfig":
        m = self.model
        if m.channels % m.heads != 0:
            raise ContractError(f"channels={m.channels} not divisible by heads={m.heads}")
        if m.channels % 4 != 0:
            raise ContractError(f"channels={m.channels} must be divisible by 4 for 2D encodings")
        if m.num_levels != 4:
            raise ContractError(f"num_levels must be 4, got {m.num_levels}")
        if m.fusion not in FUSION_MODES:
            raise ContractError(f"fusion must be one of {FUSION_MODES}, got {m.fusion!r}")
        if m.vewl_text not in VEWL_TEXT_MODES:
            raise ContractError(f"vewl_text must be one of {VEWL_TEXT_MODES}, got {m.vewl_text!r}")
        if m.vewl_text == "dynamic" and not m.lewv_enabled:
            raise ContractError("vewl_text=dynamic reuses the text-enhancement states and "
                                "requires lewv_enabled=true")
        parse_ratio(m.ifi_ratio)
        d = self.data
        if d.height % 64 != 0 or d.width % 64 != 0:
            raise ContractError(f"height/width must be divisible by 64, got {d.height}x{d.width}")
        if not (1 <= d.min_objects <= d.max_objects):
            raise ContractError("need 1 <= min_objects <= max_objects")
        if not 0.0 <= d.motion_fraction <= 1.0:
            raise ContractError(f"motion_fraction must lie in [0,1], got {d.motion_fraction}")
        if not 0.0 <= d.occluded_fraction <= 1.0:
            raise ContractError(f"occluded_fraction must lie in [0,1], got {d.occluded_fraction}")
        if d.motion_fraction + d.occluded_fraction > 1.0:
            raise ContractError("motion_fraction + occluded_fraction must not exceed 1")
        if self.run.precision not in (32, 64):
            raise ContractError(f"precision must be 32 or 64, got {self.run.precision}")
        for name in ("lambda_cls", "lambda_l1", "lambda_giou", "lambda_dice", "lambda_focal"):
            if getattr(self.loss, name) < 0:
                raise ContractError(f"loss weight {name} must be non-negative")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        cfg = cls()
        for sec_field in fields(cfg):
            sec = getattr(cfg, sec_field.name)
            values = d.get(sec_field.name, {})
            for f in fields(sec):
                if f.name in values:
                    setattr(sec, f.name, values[f.name])
        return cfg

    def copy(self) -> "RunConfig":
        return RunConfig.from_dict(self.to_dict())


def parse_ratio(text: str) -> tuple[int, int]:
    """Parse 'a:b' into (decoder layers per group, interaction layers per group)."""
    try:
        a, b = text.split(":")
        a, b = int(a), int(b)
    except ValueError as exc:
        raise ContractError(f"bad ifi_ratio {text!r}, expected 'a:b'") from exc
    if a < 1 or b < 0:
        raise ContractError(f"bad ifi_ratio {text!r}: need a >= 1, b >= 0")
    return a, b


def parse_milestones(text: str) -> tuple[float, ...]:
    try:
        parts = tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError as exc:
        raise ContractError(f"bad milestones {text!r}") from exc
    if any(not 0.0 < x < 1.0 for x in parts):
        raise ContractError(f"milestones must lie in (0,1), got {text!r}")
    return parts


def _convert(raw: str, target_type: type):
    if target_type is bool:
        lowered = raw.strip().lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ContractError(f"expected a boolean, got {raw!r}")
    try:
        return target_type(raw)
    except ValueError as exc:
        raise ContractError(f"cannot parse {raw!r} as {target_type.__name__}") from exc


def load_config(path: str | None = None, overrides: dict[str, str] | None = None) -> RunConfig:
    """Build a RunConfig from an optional INI file plus dotted-key overrides."""
    cfg = RunConfig()
    if path is not None:
        parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        try:
            with open(path, "r", encoding="utf-8") as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ContractError(f"cannot read config file {path}: {exc}") from exc
        except configparser.Error as exc:
            raise ContractError(f"malformed config file {path}: {exc}") from exc
        for section in parser.sections():
            if not hasattr(cfg, section):
                raise ContractError(f"unknown config section [{section}]")
            for key, raw in parser.items(section):
                _set_field(cfg, section, key, raw)
    for dotted, raw in (overrides or {}).items():
        if "." not in dotted:
            raise ContractError(f"override key {dotted!r} must look like section.key")
        section, key = dotted.split(".", 1)
        if not hasattr(cfg, section):
            raise ContractError(f"unknown config section {section!r} in override {dotted!r}")
        _set_field(cfg, section, key, raw)
    return cfg.validate()


def _set_field(cfg: RunConfig, section: str, key: str, raw: str) -> None:
    sub = getattr(cfg, section)
    if not any(f.name == key for f in fields(sub)):
        raise ContractError(f"unknown config key {section}.{key}")
    setattr(sub, key, _convert(raw, type(getattr(sub, key))))


def dump_config(cfg: RunConfig) -> str:
    """Serialize a RunConfig back to INI text."""
    parser = configparser.ConfigParser()
    for sec_field in fields(cfg):
        sub = getattr(cfg, sec_field.name)
        parser[sec_field.name] = {f.name: str(getattr(sub, f.name)) for f in fields(sub)}
    out = io.StringIO()
    parser.write(out)
    return out.getvalue()
