"""Configuration: YAML schema, validation and presets.

A single YAML file drives every command. Sections are optional and fall
back to desk-scale defaults; semantic errors report the offending key with
its line number in the source file.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import yaml

from .geometry import GridSpec
from .losses import Margins
from .synthworld import ScanSpec, SynthDatasetSpec, WorldSpec
from .features import BACKBONE_PRESETS

MODES = ("teacher_l2l", "student_r2r", "student_r2l")
ENHANCEMENT_MODES = ("raw", "global", "local")
BRANCH_MODES = ("single", "dual")
FDD_LOSS_KINDS = ("kl", "mse")
POSITIVE_SOURCES = ("student", "teacher")


class ConfigError(ValueError):
    """Invalid configuration; message carries file, line and key context."""


@dataclass(frozen=True)
class PreprocessConfig:
    """Outlier-removal settings for radar clouds; ror_radius None disables it."""

    ror_radius: float | None = 0.4
    ror_min_neighbors: int = 2

    def __post_init__(self):
        if self.ror_radius is not None and self.ror_radius <= 0:
            raise ConfigError("preprocess.ror_radius must be positive or null")
        if self.ror_min_neighbors < 1:
            raise ConfigError("preprocess.ror_min_neighbors must be >= 1")


@dataclass(frozen=True)
class ModelConfig:
    backbone: str | tuple[tuple[int, int], ...] = "desk"
    enhancer_channels: int = 16

    def backbone_stages(self) -> tuple[tuple[int, int], ...]:
        if isinstance(self.backbone, str):
            if self.backbone not in BACKBONE_PRESETS:
                raise ConfigError(f"model.backbone: unknown preset {self.backbone!r}, known: {sorted(BACKBONE_PRESETS)}")
            return BACKBONE_PRESETS[self.backbone]
        return tuple((int(c), int(s)) for c, s in self.backbone)


@dataclass(frozen=True)
class MiningConfig:
    pos_radius: float = 10.0
    neg_radius: float = 50.0
    n_pos: int = 1
    n_neg: int = 4

    def __post_init__(self):
        if not (0 < self.pos_radius < self.neg_radius):
            raise ConfigError("mining: need 0 < pos_radius < neg_radius")
        if self.n_pos < 1 or self.n_neg < 1:
            raise ConfigError("mining: n_pos and n_neg must be >= 1")


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "teacher_l2l"
    epochs: int = 40
    lr: float = 1e-3
    margins: Margins = field(default_factory=Margins)
    enhancement: str = "raw"
    use_fdd: bool = False
    use_rd: bool = False
    branch: str = "dual"
    fdd_loss: str = "kl"
    triplet_positive: str = "teacher"
    mining: MiningConfig = field(default_factory=MiningConfig)
    allow_fdd_r2l: bool = False  # escape hatch for the harmful-combination ablation row

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"train.mode must be one of {MODES}, got {self.mode!r}")
        if self.epochs < 1:
            raise ConfigError(f"train.epochs must be >= 1, got {self.epochs}")
        if self.lr <= 0:
            raise ConfigError(f"train.lr must be positive, got {self.lr}")
        if self.enhancement not in ENHANCEMENT_MODES:
            raise ConfigError(f"train.enhancement must be one of {ENHANCEMENT_MODES}, got {self.enhancement!r}")
        if self.branch not in BRANCH_MODES:
            raise ConfigError(f"train.branch must be one of {BRANCH_MODES}, got {self.branch!r}")
        if self.fdd_loss not in FDD_LOSS_KINDS:
            raise ConfigError(f"train.fdd_loss must be one of {FDD_LOSS_KINDS}, got {self.fdd_loss!r}")
        if self.triplet_positive not in POSITIVE_SOURCES:
            raise ConfigError(f"train.triplet_positive must be one of {POSITIVE_SOURCES}")
        if self.mode == "teacher_l2l" and (self.use_fdd or self.use_rd or self.enhancement != "raw"):
            raise ConfigError("teacher training uses the triplet loss only: set enhancement=raw, use_fdd=false, use_rd=false")
        if self.mode == "student_r2l" and self.use_fdd and not self.allow_fdd_r2l:
            raise ConfigError(
                "use_fdd is rejected in student_r2l mode: feature-distribution distillation "
                "preserves intra-modality structure and degrades cross-modal retrieval"
            )

    @property
    def use_le(self) -> bool:
        return self.enhancement != "raw"


@dataclass(frozen=True)
class Config:
    seed: int = 0
    grid: GridSpec = field(default_factory=lambda: GridSpec(0.0, 40.0, -20.0, 20.0, 64, 64, 10))
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthDatasetSpec = field(default_factory=SynthDatasetSpec)

    def replace_train(self, **kwargs) -> "Config":
        from dataclasses import replace

        return replace(self, train=replace(self.train, **kwargs))

    def hash(self) -> str:
        blob = json.dumps(_config_dict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _config_dict(cfg: Config) -> dict:
    d = asdict(cfg)
    return d


def derive_seed(root_seed: int, label: str) -> int:
    """Deterministic sub-seed for a named consumer of randomness."""
    digest = hashlib.sha256(f"{root_seed}:{label}".encode()).digest()
    return int.from_bytes(digest[:4], "little") % (2**31)


# YAML parsing with per-key line numbers -------------------------------------

class _Section:
    def __init__(self, data: dict, marks: dict[str, int], prefix: str, source: str):
        if not isinstance(data, dict):
            raise ConfigError(f"{source}:{marks.get(prefix, '?')}: section {prefix or '<root>'} must be a mapping")
        self.data = dict(data)
        self.marks = marks
        self.prefix = prefix
        self.source = source

    def _path(self, key: str) -> str:
        return f"{self.prefix}.{key}" if self.prefix else key

    def _err(self, key: str, msg: str) -> ConfigError:
        path = self._path(key)
        line = self.marks.get(path, self.marks.get(self.prefix, "?"))
        return ConfigError(f"{self.source}:{line}: {path}: {msg}")

    def take(self, key: str, default):
        return self.data.pop(key, default)

    def take_typed(self, key: str, kind, default):
        if key not in self.data:
            return default
        value = self.data.pop(key)
        if kind is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if kind is not None and not isinstance(value, kind):
            raise self._err(key, f"expected {getattr(kind, '__name__', kind)}, got {type(value).__name__} ({value!r})")
        return value

    def subsection(self, key: str) -> "_Section | None":
        if key not in self.data:
            return None
        value = self.data.pop(key)
        return _Section(value, self.marks, self._path(key), self.source)

    def finish(self) -> None:
        if self.data:
            key = next(iter(self.data))
            raise self._err(key, "unknown key")


def _collect_marks(node, prefix: str, marks: dict[str, int]) -> None:
    if isinstance(node, yaml.MappingNode):
        for key_node, value_node in node.value:
            key = str(key_node.value)
            path = f"{prefix}.{key}" if prefix else key
            marks[path] = key_node.start_mark.line + 1
            _collect_marks(value_node, path, marks)
    elif isinstance(node, yaml.SequenceNode):
        for i, item in enumerate(node.value):
            _collect_marks(item, f"{prefix}[{i}]", marks)


def load_config(path: str | Path) -> Config:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    text = path.read_text()
    try:
        data = yaml.safe_load(text)
        node = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark else "?"
        raise ConfigError(f"{path}:{line}: not valid YAML: {getattr(exc, 'problem', exc)}") from exc
    if data is None:
        data = {}
    marks: dict[str, int] = {}
    if node is not None:
        _collect_marks(node, "", marks)
    return parse_config(data, marks, source=str(path))


def parse_config(data: dict, marks: dict[str, int] | None = None, source: str = "<config>") -> Config:
    marks = marks or {}
    root = _Section(data, marks, "", source)
    seed = root.take_typed("seed", int, 0)

    def build(section_key, builder, default):
        sec = root.subsection(section_key)
        if sec is None:
            return default
        try:
            return builder(sec)
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"{source}:{marks.get(section_key, '?')}: {section_key}: {exc}") from exc

    grid = build("grid", _parse_grid, Config().grid)
    preprocess = build("preprocess", _parse_preprocess, PreprocessConfig())
    model = build("model", _parse_model, ModelConfig())
    train = build("train", _parse_train, TrainConfig())
    synth = build("synth", _parse_synth, SynthDatasetSpec())
    root.finish()
    return Config(seed=seed, grid=grid, preprocess=preprocess, model=model, train=train, synth=synth)


def _parse_grid(sec: _Section) -> GridSpec:
    grid = GridSpec(
        x_min=sec.take_typed("x_min", float, 0.0),
        x_max=sec.take_typed("x_max", float, 40.0),
        y_min=sec.take_typed("y_min", float, -20.0),
        y_max=sec.take_typed("y_max", float, 20.0),
        height=sec.take_typed("height", int, 64),
        width=sec.take_typed("width", int, 64),
        density_cap=sec.take_typed("density_cap", int, 10),
    )
    sec.finish()
    return grid


def _parse_preprocess(sec: _Section) -> PreprocessConfig:
    radius = sec.take("ror_radius", 0.4)
    if radius is not None and not isinstance(radius, (int, float)):
        raise sec._err("ror_radius", f"expected number or null, got {radius!r}")
    cfg = PreprocessConfig(
        ror_radius=None if radius is None else float(radius),
        ror_min_neighbors=sec.take_typed("ror_min_neighbors", int, 2),
    )
    sec.finish()
    return cfg


def _parse_model(sec: _Section) -> ModelConfig:
    backbone = sec.take("backbone", "desk")
    if isinstance(backbone, list):
        backbone = tuple(tuple(pair) for pair in backbone)
    cfg = ModelConfig(
        backbone=backbone,
        enhancer_channels=sec.take_typed("enhancer_channels", int, 16),
    )
    cfg.backbone_stages()  # validate preset name / pair list now
    sec.finish()
    return cfg


def _parse_margins(sec: _Section) -> Margins:
    margins = Margins(
        rd_r2r=sec.take_typed("rd_r2r", float, 0.01),
        rd_r2l=sec.take_typed("rd_r2l", float, 0.01),
        triplet_r2r=sec.take_typed("triplet_r2r", float, 0.3),
        triplet_r2l=sec.take_typed("triplet_r2l", float, 0.3),
    )
    sec.finish()
    return margins


def _parse_mining(sec: _Section) -> MiningConfig:
    cfg = MiningConfig(
        pos_radius=sec.take_typed("pos_radius", float, 10.0),
        neg_radius=sec.take_typed("neg_radius", float, 50.0),
        n_pos=sec.take_typed("n_pos", int, 1),
        n_neg=sec.take_typed("n_neg", int, 4),
    )
    sec.finish()
    return cfg


def _parse_train(sec: _Section) -> TrainConfig:
    margins_sec = sec.subsection("margins")
    mining_sec = sec.subsection("mining")
    mode = sec.take_typed("mode", str, "teacher_l2l")
    defaults_raw = mode == "teacher_l2l"
    cfg = TrainConfig(
        mode=mode,
        epochs=sec.take_typed("epochs", int, 40),
        lr=sec.take_typed("lr", float, 1e-3),
        margins=_parse_margins(margins_sec) if margins_sec else Margins(),
        enhancement=sec.take_typed("enhancement", str, "raw" if defaults_raw else "local"),
        use_fdd=sec.take_typed("use_fdd", bool, False if defaults_raw or mode == "student_r2l" else True),
        use_rd=sec.take_typed("use_rd", bool, not defaults_raw),
        branch=sec.take_typed("branch", str, "dual"),
        fdd_loss=sec.take_typed("fdd_loss", str, "kl"),
        triplet_positive=sec.take_typed("triplet_positive", str, "teacher"),
        mining=_parse_mining(mining_sec) if mining_sec else MiningConfig(),
        allow_fdd_r2l=sec.take_typed("allow_fdd_r2l", bool, False),
    )
    sec.finish()
    return cfg


def _parse_scan(sec: _Section, modality: str) -> ScanSpec:
    from .synthworld import default_lidar_spec, default_radar_spec

    defaults = default_lidar_spec() if modality == "lidar" else default_radar_spec()
    spec = ScanSpec(
        modality=modality,
        max_range=sec.take_typed("max_range", float, defaults.max_range),
        fov_deg=sec.take_typed("fov_deg", float, defaults.fov_deg),
        n_rays=sec.take_typed("n_rays", int, defaults.n_rays),
        dropout=sec.take_typed("dropout", float, defaults.dropout),
        noise_sigma=sec.take_typed("noise_sigma", float, defaults.noise_sigma),
        clutter_rate=sec.take_typed("clutter_rate", float, defaults.clutter_rate),
    )
    sec.finish()
    return spec


def _pair(value, what: str) -> tuple:
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        raise ConfigError(f"{what} must be a [min, max] pair, got {value!r}")
    return tuple(value)


def _parse_world(sec: _Section) -> WorldSpec:
    spec = WorldSpec(
        size=sec.take_typed("size", float, WorldSpec().size),
        n_walls=_pair(sec.take("n_walls", list(WorldSpec().n_walls)), "synth.world.n_walls"),
        n_clusters=_pair(sec.take("n_clusters", list(WorldSpec().n_clusters)), "synth.world.n_clusters"),
        wall_length=_pair(sec.take("wall_length", list(WorldSpec().wall_length)), "synth.world.wall_length"),
        cluster_radius=_pair(sec.take("cluster_radius", list(WorldSpec().cluster_radius)), "synth.world.cluster_radius"),
    )
    sec.finish()
    return spec


def _parse_synth(sec: _Section) -> SynthDatasetSpec:
    from .synthworld import default_lidar_spec, default_radar_spec

    world_sec = sec.subsection("world")
    lidar_sec = sec.subsection("lidar")
    radar_sec = sec.subsection("radar")
    frames = sec.take("frames_per_place", None)
    defaults = SynthDatasetSpec()
    if frames is not None:
        if not isinstance(frames, dict) or not all(isinstance(v, int) for v in frames.values()):
            raise sec._err("frames_per_place", "expected a mapping of split name to frame count")
    spec = SynthDatasetSpec(
        n_places=sec.take_typed("n_places", int, defaults.n_places),
        place_min_separation=sec.take_typed("place_min_separation", float, defaults.place_min_separation),
        border_margin=sec.take_typed("border_margin", float, defaults.border_margin),
        jitter_radius=sec.take_typed("jitter_radius", float, defaults.jitter_radius),
        heading_jitter=sec.take_typed("heading_jitter", float, defaults.heading_jitter),
        frames_per_place=frames if frames is not None else defaults.frames_per_place,
        world=_parse_world(world_sec) if world_sec else defaults.world,
        lidar=_parse_scan(lidar_sec, "lidar") if lidar_sec else default_lidar_spec(),
        radar=_parse_scan(radar_sec, "radar") if radar_sec else default_radar_spec(),
        cloud_format=sec.take_typed("cloud_format", str, defaults.cloud_format),
    )
    sec.finish()
    return spec


def desk_config(seed: int = 0) -> Config:
    """Small, fast configuration for tests and the synthetic benchmark."""
    return Config(seed=seed, preprocess=PreprocessConfig(ror_radius=1.5, ror_min_neighbors=1))


def paper_scale_config(seed: int = 0) -> Config:
    """Full-scale grid and backbone matching the published training setup."""
    return Config(
        seed=seed,
        grid=GridSpec(0.0, 80.0, -40.0, 40.0, 200, 200, 10),
        model=ModelConfig(backbone="paper", enhancer_channels=16),
    )
