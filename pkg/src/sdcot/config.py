"""Experiment configuration (flat ``key = value`` text) and run manifests."""
from __future__ import annotations

import hashlib
import json
import platform
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .cotraining import DistillVariant, EmaConfig, LossWeights, PseudoLabelConfig, TrainConfig
from .data import DEFAULT_CATALOG, ConfigurationError, SceneParams, SplitSpec
from .detector import DetectorConfig

CONFIG_HEADER = "# SDCOT-CONFIG v1"


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ";".join(",".join(map(_fmt, v)) for v in value)
        return ",".join(map(_fmt, value))
    return str(value)


def _parse(text, default):
    text = text.strip()
    if isinstance(default, bool):
        if text.lower() not in ("true", "false"):
            raise ConfigurationError(f"expected true/false, got {text!r}")
        return text.lower() == "true"
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        if not text:
            return ()
        sample = default[0] if default else ""
        if isinstance(sample, tuple):
            inner = sample[0] if sample else ""
            return tuple(tuple(_parse(x, inner) for x in grp.split(",")) for grp in text.split(";"))
        return tuple(_parse(x, sample) for x in text.split(","))
    return text


@dataclass(frozen=True)
class ExperimentConfig:
    """Every knob of a run. Paths are command-line flags and are not part of it."""

    seed: int = 0
    # data
    n_train: int = 400
    n_val: int = 100
    scene_points: int = 1024
    min_objects: int = 1
    max_objects: int = 6
    clutter_fraction: float = 0.02
    heading_range: float = 0.0
    surface_noise: float = 0.01
    placement_margin: float = 0.3
    class_weights: tuple = (1.0, 1.0, 1.0, 1.0, 1.0, 1.0)
    base_classes: tuple = ("box", "cone", "cylinder")
    novel_classes: tuple = ("slab", "tube", "wedge")
    sequential_rounds: tuple = (("slab", "tube"), ("wedge",))
    replay_ratio: float = 0.0
    replay_ratios: tuple = (0.0, 0.05, 0.1, 0.3, 0.5)
    # detector
    n_points: int = 512
    n_seeds: int = 128
    n_proposals: int = 16
    heading_bins: int = 1
    feature_dim: int = 32
    grouping_radius: float = 0.6
    n_neighbors: int = 16
    vote_loss_radius_near: float = 0.3
    vote_loss_radius_far: float = 0.6
    # optimisation
    batch_size: int = 4
    base_epochs: int = 60
    base_lr: float = 1e-3
    base_milestones: tuple = (40, 50)
    inc_epochs: int = 20
    inc_lr: float = 1e-3
    # losses and schedules
    lambda_s: float = 10.0
    lambda_d: float = 1.0
    lambda_c: float = 10.0
    lambda1: float = 0.5
    lambda2: float = 1.0
    lambda3: float = 0.2
    ramp_up_epochs: int = 10
    ema_alpha_rampup: float = 0.99
    ema_alpha_after: float = 0.999
    tau_o: float = 0.95
    tau_c: float = 0.9
    pre_nms_iou: float = 0.25
    dedupe_iou: float = 0.5
    distill_targets: tuple = ("class_logits",)
    distill_loss: str = "l2_normalized"
    distill_temperature: float = 2.0
    # evaluation
    eval_seed: int = 0
    eval_iou: float = 0.25
    eval_nms_iou: float = 0.25
    score_floor: float = 0.05

    def __post_init__(self):
        self.split_spec()
        self.detector_config()
        self.train_config()
        self.scene_params()
        if len(self.class_weights) != len(DEFAULT_CATALOG):
            raise ConfigurationError(f"class_weights needs {len(DEFAULT_CATALOG)} entries")
        for c in self.split_spec().all_classes:
            DEFAULT_CATALOG.index(c)
        flat = [c for rnd in self.sequential_rounds for c in rnd]
        if sorted(flat) != sorted(self.novel_classes):
            raise ConfigurationError("sequential_rounds must partition novel_classes")
        if self.n_train < 1 or self.n_val < 1:
            raise ConfigurationError("scene counts must be positive")
        if any(not 0.0 <= r <= 1.0 for r in self.replay_ratios):
            raise ConfigurationError("replay ratios must lie in [0, 1]")

    # --- text form -------------------------------------------------------
    def to_text(self):
        lines = [CONFIG_HEADER]
        for f in fields(self):
            lines.append(f"{f.name} = {_fmt(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text, base=None):
        values = {}
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"line {n}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            values[key] = val
        return (base or cls()).with_overrides(values)

    @classmethod
    def load(cls, path, overrides=None):
        cfg = cls.from_text(Path(path).read_text())
        return cfg.with_overrides(overrides or {})

    def with_overrides(self, overrides):
        """Apply ``{key: text or value}`` overrides; unknown keys are an error."""
        known = {f.name: getattr(self, f.name) for f in fields(self)}
        out = dict(known)
        for key, val in overrides.items():
            if key not in known:
                raise ConfigurationError(f"unknown config key {key!r}")
            try:
                out[key] = _parse(val, known[key]) if isinstance(val, str) else val
            except ValueError as exc:
                raise ConfigurationError(f"bad value for {key}: {val!r}") from exc
        return ExperimentConfig(**out)

    def hash(self):
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    # --- module views ----------------------------------------------------
    def catalog(self):
        return DEFAULT_CATALOG.with_weights(dict(zip(DEFAULT_CATALOG.names, self.class_weights)))

    def scene_params(self):
        return SceneParams(
            n_points=self.scene_points, min_objects=self.min_objects, max_objects=self.max_objects,
            clutter_fraction=self.clutter_fraction, heading_range=self.heading_range,
            surface_noise=self.surface_noise, margin=self.placement_margin,
        )

    def split_spec(self, replay_ratio=None):
        return SplitSpec(list(self.base_classes), [list(self.novel_classes)], self.n_train, self.n_val,
                         self.replay_ratio if replay_ratio is None else replay_ratio)

    def sequential_spec(self):
        return SplitSpec(list(self.base_classes), [list(r) for r in self.sequential_rounds],
                         self.n_train, self.n_val, self.replay_ratio)

    def detector_config(self, n_classes=None):
        return DetectorConfig(
            n_points=self.n_points, n_seeds=self.n_seeds, n_proposals=self.n_proposals,
            heading_bins=self.heading_bins, n_classes=n_classes or len(self.base_classes),
            feature_dim=self.feature_dim, grouping_radius=self.grouping_radius,
            n_neighbors=self.n_neighbors, vote_loss_radius_near=self.vote_loss_radius_near,
            vote_loss_radius_far=self.vote_loss_radius_far,
        )

    def train_config(self):
        return TrainConfig(
            batch_size=self.batch_size, base_epochs=self.base_epochs, base_lr=self.base_lr,
            base_milestones=tuple(self.base_milestones), inc_epochs=self.inc_epochs, inc_lr=self.inc_lr,
            weights=LossWeights(self.lambda_s, self.lambda_d, self.lambda_c, self.lambda1, self.lambda2,
                                self.lambda3, self.ramp_up_epochs),
            pseudo=PseudoLabelConfig(self.tau_o, self.tau_c, self.pre_nms_iou),
            ema=EmaConfig(self.ema_alpha_rampup, self.ema_alpha_after),
            distill=DistillVariant(frozenset(self.distill_targets), self.distill_loss, self.distill_temperature),
            dedupe_iou=self.dedupe_iou,
        )


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    run_id: str
    config_hash: str
    command: str = ""
    inputs: dict = field(default_factory=dict)    # path -> sha256
    outputs: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)   # stage -> seconds
    host: dict = field(default_factory=lambda: {"python": platform.python_version(), "machine": platform.machine()})

    def add_input(self, path):
        self.inputs[str(path)] = file_digest(path)

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def write(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def read(cls, path):
        return cls(**json.loads(Path(path).read_text()))
