"""Run configuration: nested sections, JSON files, env and flag overrides.

Precedence (lowest first): built-in defaults, ``--config`` file, environment
(``MMFA_DATA_ROOT``, ``MMFA_RUN_DIR``), ``--set section.key=value`` flags and
command-specific flags.
"""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .errors import ConfigurationError

ENV_DATA_ROOT = "MMFA_DATA_ROOT"
ENV_RUN_DIR = "MMFA_RUN_DIR"


def _key(default, source: str | None = None, help: str = "", **kw):
    """Dataclass field carrying provenance (``source``) and a help line."""
    meta = {"source": source, "help": help}
    if isinstance(default, (list, dict)):
        return field(default_factory=lambda d=default: json.loads(json.dumps(d)), metadata=meta, **kw)
    return field(default=default, metadata=meta, **kw)


@dataclass
class DataSection:
    categories: list = _key(["dome", "tile", "ridge"], help="synthetic categories to generate/use")
    n_train: int = _key(50, help="normal training samples per category")
    n_test_normal: int = _key(20, help="normal test samples per category")
    n_test_anomalous: int = _key(20, help="anomalous test samples per category")
    image_size: list = _key([64, 64], help="H, W of rendered samples")
    seed: int = _key(0, help="dataset seed")
    spec_overrides: dict = _key({}, help="CategorySpec fields applied to every category")


@dataclass
class BackboneSection:
    rgb_patch_size: int = _key(4, help="pixels per RGB patch side")
    rgb_feature_dim: int = _key(64)
    rgb_gain: float = _key(3.0)
    point_n_groups: int = _key(128, help="N_d, FPS group count")
    point_group_size: int = _key(16, help="k, members per group")
    point_feature_dim: int = _key(64)
    point_coord_scale: float = _key(40.0)
    point_gain: float = _key(1.0)
    point_pooling: str = _key("mean", help="flatten | mean")
    ransac_threshold: float = _key(0.05, "published: points within 5e-2 of the plane are background")
    ransac_iters: int = _key(200)
    seed: int = _key(0, help="seed of the random backbone weights and RANSAC")


@dataclass
class AdaptorSection:
    n_heads: int = _key(4)
    ff_mult: int = _key(2)
    proj_dim: int = _key(512, "published: 512-dim projection heads")
    structure: str = _key("encoder", "published: single transformer encoder layer adaptor")


@dataclass
class BanksSection:
    local_bank_size: int = _key(50_000, "published: n_L = 5e4")
    global_bank_size: int = _key(512)
    exclude_self: bool = _key(True, help="queries skip bank entries of their own sample")
    bank_source: str = _key("adapted", help="adapted | frozen features feed the training banks")
    coreset_fraction: float = _key(0.25, help="inference coreset size as a fraction of the pool")


@dataclass
class LossesSection:
    ablate: str = _key("full", help="full | ifc | clc | none, or a comma list of la,ga,lc,gc")
    lam: float = _key(0.6, "published: lambda = 0.6")
    temperature: float = _key(1.0, help="contrastive logit temperature")
    normalize_projections: bool = _key(True, help="L2-normalise projections before contrast")
    squared_compactness: bool = _key(False)


@dataclass
class TrainerSection:
    batch_size: int = _key(8, "published: N_b = 8")
    lr: float = _key(2e-3, "published: lr = 2e-3 with cosine warm-up")
    warmup_steps: int = _key(10)
    epochs: int = _key(10)
    weight_decay: float = _key(1e-2, "published: AdamW (decay value unstated)")
    update_mode: str = _key("joint", help="joint | sequential")
    kmeans_k: int = _key(3)
    kmeans_iters: int = _key(50)
    shots: int = _key(0, "published: few-shot protocol samples 5/10/50 images", "0 = use all")
    checkpoint_every: int = _key(1)
    seed: int = _key(0)


@dataclass
class ScorerSection:
    smoothing_sigma: float | None = _key(None, help="Gaussian sigma in px; null = 4 px at 224")


@dataclass
class MetricsSection:
    aupro_limit: float = _key(0.3, help="FPR integration limit of AUPRO")


@dataclass
class PathsSection:
    data_root: str = _key("data", help=f"dataset root (env {ENV_DATA_ROOT})")
    run_dir: str = _key("runs/default", help=f"output directory (env {ENV_RUN_DIR})")


SECTIONS = {
    "data": DataSection, "backbone": BackboneSection, "adaptor": AdaptorSection,
    "banks": BanksSection, "losses": LossesSection, "trainer": TrainerSection,
    "scorer": ScorerSection, "metrics": MetricsSection, "paths": PathsSection,
}


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    backbone: BackboneSection = field(default_factory=BackboneSection)
    adaptor: AdaptorSection = field(default_factory=AdaptorSection)
    banks: BanksSection = field(default_factory=BanksSection)
    losses: LossesSection = field(default_factory=LossesSection)
    trainer: TrainerSection = field(default_factory=TrainerSection)
    scorer: ScorerSection = field(default_factory=ScorerSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)
    paths: PathsSection = field(default_factory=PathsSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def validate(self) -> "RunConfig":
        """Build every downstream config object once so bad values fail early."""
        from .dataio import CategorySpec
        from .fusion import BackboneSpecs  # noqa: F401

        self.backbone_specs()
        self.train_config()
        for cat in self.data.categories:
            self.category_spec(cat)
        if not 0 < self.banks.coreset_fraction <= 1:
            raise ConfigurationError("banks.coreset_fraction must lie in (0, 1]")
        if not 0 < self.metrics.aupro_limit <= 1:
            raise ConfigurationError("metrics.aupro_limit must lie in (0, 1]")
        if self.trainer.shots < 0:
            raise ConfigurationError("trainer.shots must be >= 0")
        if self.scorer.smoothing_sigma is not None and self.scorer.smoothing_sigma < 0:
            raise ConfigurationError("scorer.smoothing_sigma must be >= 0")
        unknown = set(self.data.spec_overrides) - {f.name for f in fields(CategorySpec)}
        if unknown or "name" in self.data.spec_overrides:
            raise ConfigurationError(f"unknown data.spec_overrides keys: {sorted(unknown) or ['name']}")
        return self

    # -- builders ------------------------------------------------------------

    def category_spec(self, name: str):
        from .dataio import DEFAULT_CATEGORIES, CategorySpec

        base = {c.name: c for c in DEFAULT_CATEGORIES}.get(name)
        if base is None:
            raise ConfigurationError(
                f"unknown category {name!r}; available: {[c.name for c in DEFAULT_CATEGORIES]}")
        d = base.to_dict()
        d.update(self.data.spec_overrides)
        d["image_size"] = list(self.data.image_size)
        try:
            return CategorySpec.from_dict(d)
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from exc

    def backbone_specs(self):
        from .backbone import PointBackboneSpec, RGBBackboneSpec
        from .fusion import BackboneSpecs

        b = self.backbone
        return BackboneSpecs(
            rgb=RGBBackboneSpec(b.rgb_patch_size, b.rgb_feature_dim, b.rgb_gain, b.seed),
            point=PointBackboneSpec(b.point_n_groups, b.point_group_size, b.point_feature_dim,
                                    b.point_coord_scale, b.point_gain, b.seed, b.point_pooling),
            ransac_threshold=b.ransac_threshold, ransac_iters=b.ransac_iters, ransac_seed=b.seed)

    def train_config(self):
        from .trainer import TrainConfig

        t, l, bk, a = self.trainer, self.losses, self.banks, self.adaptor
        return TrainConfig(
            batch_size=t.batch_size, lr=t.lr, warmup_steps=t.warmup_steps, epochs=t.epochs,
            lam=l.lam, local_bank_size=bk.local_bank_size, global_bank_size=bk.global_bank_size,
            kmeans_k=t.kmeans_k, kmeans_iters=t.kmeans_iters, weight_decay=t.weight_decay,
            n_heads=a.n_heads, ff_mult=a.ff_mult, proj_dim=a.proj_dim, structure=a.structure,
            update_mode=t.update_mode, losses=l.ablate, exclude_self=bk.exclude_self,
            temperature=l.temperature, normalize_projections=l.normalize_projections,
            bank_source=bk.bank_source, squared_compactness=l.squared_compactness,
            checkpoint_every=t.checkpoint_every, seed=t.seed)


def _coerce(value: Any, current: Any, name: str, annotation: str):
    """Convert CLI strings (and JSON values) to the type of the default."""
    if isinstance(value, str) and not isinstance(current, str):
        if value.lower() in ("null", "none") and "None" in annotation:
            return None
        try:
            value = json.loads(value)
        except json.JSONDecodeError:
            if isinstance(current, bool) or isinstance(current, (int, float, list, dict)):
                raise ConfigurationError(f"{name}: cannot parse {value!r}") from None
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigurationError(f"{name}: expected true/false, got {value!r}")
        return value
    if isinstance(current, int) and not isinstance(current, bool):
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigurationError(f"{name}: expected an integer, got {value!r}")
        return value
    if isinstance(current, float) or "float" in annotation:
        if value is None and "None" in annotation:
            return None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{name}: expected a number, got {value!r}")
        return float(value)
    if isinstance(current, list) and not isinstance(value, list):
        raise ConfigurationError(f"{name}: expected a list, got {value!r}")
    if isinstance(current, dict) and not isinstance(value, dict):
        raise ConfigurationError(f"{name}: expected an object, got {value!r}")
    if isinstance(current, str) and not isinstance(value, str):
        raise ConfigurationError(f"{name}: expected a string, got {value!r}")
    return value


def set_key(cfg: RunConfig, dotted: str, value):
    section, _, key = dotted.partition(".")
    if section not in SECTIONS or not key:
        raise ConfigurationError(f"unknown config key {dotted!r}")
    sec = getattr(cfg, section)
    ann = {f.name: str(f.type) for f in fields(sec)}
    if key not in ann:
        raise ConfigurationError(f"unknown config key {dotted!r}")
    setattr(sec, key, _coerce(value, getattr(sec, key), dotted, ann[key]))


def apply_dict(cfg: RunConfig, data: dict):
    if not isinstance(data, dict):
        raise ConfigurationError("config file must hold a JSON object")
    for section, values in data.items():
        if section not in SECTIONS:
            raise ConfigurationError(f"unknown config section {section!r}")
        if not isinstance(values, dict):
            raise ConfigurationError(f"config section {section!r} must be an object")
        for key, value in values.items():
            set_key(cfg, f"{section}.{key}", value)


def load_config(path=None, overrides=(), env=None) -> RunConfig:
    """Defaults <- JSON file <- environment <- ``key=value`` overrides; validated."""
    cfg = RunConfig()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigurationError(f"config file not found: {p}")
        try:
            apply_dict(cfg, json.loads(p.read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{p}: invalid JSON ({exc})") from exc
    env = os.environ if env is None else env
    if env.get(ENV_DATA_ROOT):
        cfg.paths.data_root = env[ENV_DATA_ROOT]
    if env.get(ENV_RUN_DIR):
        cfg.paths.run_dir = env[ENV_RUN_DIR]
    for item in overrides:
        if isinstance(item, str):
            key, sep, value = item.partition("=")
            if not sep:
                raise ConfigurationError(f"override {item!r} is not key=value")
        else:
            key, value = item
        set_key(cfg, key.strip(), value)
    return cfg.validate()


def describe_keys() -> str:
    """One line per config key with its default and provenance."""
    lines = []
    for section, cls in SECTIONS.items():
        for f in fields(cls):
            default = f.default_factory() if f.default is dataclasses.MISSING else f.default
            src = f.metadata.get("source")
            note = f.metadata.get("help", "")
            tag = f"[{src}]" if src else ""
            lines.append(f"  {section}.{f.name} = {json.dumps(default)}  {note} {tag}".rstrip())
    return "\n".join(lines)
