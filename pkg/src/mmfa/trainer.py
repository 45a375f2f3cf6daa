"""Adaptation loop: batches of frozen features -> adaptors -> losses -> AdamW,
with dynamic FIFO banks updated after every step.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .adaptor import AdaptorPair, init_adaptor, kmeans_global, save_checkpoint
from .banks import MemoryBank
from .dataio import DatasetManifest
from .errors import ConfigurationError, TrainingDivergedError
from .fusion import BackboneSpecs, SampleFeatures, extract_split
from .losses import LossTerms, total_loss

log = logging.getLogger(__name__)

LOSS_TERMS = ("la", "ga", "lc", "gc")
LOSS_PRESETS = {
    "full": ("la", "ga", "lc", "gc"),
    "ifc": ("lc", "gc"),
    "clc": ("la", "ga"),
    "none": (),
}


def parse_losses(spec) -> tuple[str, ...]:
    """``"full"``, ``"ifc"``, ``"clc"``, ``"none"`` or a comma list of la/ga/lc/gc."""
    if isinstance(spec, (list, tuple)):
        terms = tuple(spec)
    elif spec in LOSS_PRESETS:
        return LOSS_PRESETS[spec]
    else:
        terms = tuple(t.strip() for t in str(spec).split(",") if t.strip())
    bad = [t for t in terms if t not in LOSS_TERMS]
    if bad:
        raise ConfigurationError(f"unknown loss terms {bad}; use {sorted(LOSS_PRESETS)} or {LOSS_TERMS}")
    return tuple(t for t in LOSS_TERMS if t in terms)


@dataclass
class TrainConfig:
    batch_size: int = 8
    lr: float = 2e-3
    warmup_steps: int = 10
    epochs: int = 50
    lam: float = 0.6
    local_bank_size: int = 50_000
    global_bank_size: int = 512
    kmeans_k: int = 3
    kmeans_iters: int = 50
    weight_decay: float = 1e-2
    n_heads: int = 4
    ff_mult: int = 2
    proj_dim: int = 512
    structure: str = "encoder"
    update_mode: str = "joint"
    losses: str = "full"
    bank_source: str = "adapted"
    exclude_self: bool = True
    normalize_projections: bool = True
    temperature: float = 1.0
    squared_compactness: bool = False
    checkpoint_every: int = 1
    log_wall_time: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ConfigurationError("lr must be > 0")
        if self.lam < 0:
            raise ConfigurationError("lam must be >= 0")
        if self.update_mode not in ("joint", "sequential"):
            raise ConfigurationError("update_mode must be 'joint' or 'sequential'")
        if self.bank_source not in ("adapted", "frozen"):
            raise ConfigurationError("bank_source must be 'adapted' or 'frozen'")
        if self.warmup_steps < 0 or self.epochs < 0:
            raise ConfigurationError("warmup_steps and epochs must be >= 0")
        parse_losses(self.losses)


def lr_schedule(step: int, config: TrainConfig, total_steps: int) -> float:
    """Linear warm-up from 0 to ``lr``, then cosine decay to 0 at ``total_steps``."""
    warm = config.warmup_steps
    if step < warm:
        return config.lr * step / warm
    if total_steps <= warm:
        return config.lr
    t = min(1.0, (step - warm) / (total_steps - warm))
    return 0.5 * config.lr * (1.0 + math.cos(math.pi * t))


def few_shot_subsample(manifest: DatasetManifest, shots: int, seed: int = 0) -> DatasetManifest:
    """Seeded uniform subsample of ``shots`` training samples (order preserved)."""
    n = len(manifest.sample_ids)
    if shots < 1 or shots > n:
        raise ConfigurationError(f"cannot draw {shots} shots from {n} samples")
    if shots == n:
        return manifest
    keep = np.sort(np.random.default_rng(seed).choice(n, size=shots, replace=False))
    return manifest.subset(manifest.sample_ids[i] for i in keep)


@dataclass
class TrainLogRecord:
    step: int
    epoch: int
    lr: float
    losses: dict
    bank_sizes: dict
    wall_time: float = 0.0

    def to_json(self, with_time: bool) -> str:
        d = asdict(self)
        if not with_time:
            d.pop("wall_time")
        return json.dumps(d, sort_keys=True)


@dataclass
class TrainResult:
    adaptors: AdaptorPair
    log: list = field(default_factory=list)
    banks: dict = field(default_factory=dict)


def _stack(features: list[SampleFeatures], idx, dtype):
    xr = torch.as_tensor(np.stack([features[i].rgb.features for i in idx]), dtype=dtype)
    xp = torch.as_tensor(np.stack([features[i].point.features for i in idx]), dtype=dtype)
    m = torch.as_tensor(np.stack([features[i].rgb.mask for i in idx]))
    return xr, xp, m


class Trainer:
    """Holds adaptors, banks and optimizer state; ``step`` runs one iteration."""

    def __init__(self, features: list[SampleFeatures], config: TrainConfig,
                 adaptors: AdaptorPair | None = None, dtype=torch.float64):
        if not features:
            raise ConfigurationError("training split is empty")
        self.features = features
        self.config = config
        self.dtype = dtype
        self.terms = parse_losses(config.losses)
        grid = features[0].rgb.grid_shape
        if adaptors is None:
            arch = {"ff_mult": config.ff_mult, "proj_dim": config.proj_dim,
                    "structure": config.structure}
            adaptors = AdaptorPair(
                init_adaptor(features[0].rgb.dim, grid, config.n_heads, seed=config.seed, modality="rgb",
                             **arch),
                init_adaptor(features[0].point.dim, grid, config.n_heads, seed=config.seed + 1,
                             modality="point", **arch),
            )
        self.adaptors = adaptors
        for m in adaptors.modules().values():
            m.to(dtype)
        groups = adaptors.rgb.decay_groups(config.weight_decay) + \
            adaptors.point.decay_groups(config.weight_decay)
        self.optimizer = torch.optim.AdamW(groups, lr=config.lr, betas=(0.9, 0.999))
        self.banks = {
            "rgb_local": MemoryBank(config.local_bank_size),
            "point_local": MemoryBank(config.local_bank_size),
            "rgb_global": MemoryBank(config.global_bank_size),
            "point_global": MemoryBank(config.global_bank_size),
        }
        self.step_count = 0

    # -- forward -----------------------------------------------------------

    def _globals(self, adapted, masks):
        cfg = self.config
        return torch.stack([kmeans_global(adapted[i], masks[i].numpy(), cfg.kmeans_k, cfg.seed,
                                          cfg.kmeans_iters) for i in range(adapted.shape[0])])

    def forward(self, idx) -> tuple[LossTerms, dict]:
        cfg = self.config
        xr, xp, m = _stack(self.features, idx, self.dtype)
        ar = self.adaptors.rgb(xr, m)
        ap = self.adaptors.point(xp, m)
        gr = self._globals(ar, m)
        gp = self._globals(ap, m)
        norm = cfg.normalize_projections
        terms = total_loss(
            self.adaptors.rgb.project(ar, norm, m), self.adaptors.point.project(ap, norm, m), m,
            self.adaptors.rgb.project(gr, norm), self.adaptors.point.project(gp, norm),
            ar, ap, gr, gp, self.banks, lam=cfg.lam,
            owners=np.asarray(idx) if cfg.exclude_self else None,
            temperature=cfg.temperature, squared=cfg.squared_compactness)
        if cfg.bank_source == "frozen":
            snapshot = {"rgb_local": xr[m], "point_local": xp[m],
                        "rgb_global": self._globals(xr, m), "point_global": self._globals(xp, m)}
        else:
            snapshot = {"rgb_local": ar[m], "point_local": ap[m], "rgb_global": gr, "point_global": gp}
        snapshot = {k: v.detach().cpu().numpy() for k, v in snapshot.items()}
        snapshot["patch_owner"] = np.repeat(np.asarray(idx), m.sum(dim=1).numpy())
        snapshot["owner"] = np.asarray(idx)
        return terms, snapshot

    def objective(self, terms: LossTerms, part: str = "all") -> torch.Tensor:
        zero = terms.la * 0.0
        pick = lambda name, t: t if name in self.terms else zero  # noqa: E731
        clc = pick("la", terms.la) + pick("ga", terms.ga)
        ifc_rgb = pick("lc", terms.lc_rgb) + pick("gc", terms.gc_rgb)
        ifc_pt = pick("lc", terms.lc_pt) + pick("gc", terms.gc_pt)
        return {"all": ifc_rgb + ifc_pt + terms.lam * clc, "clc": terms.lam * clc,
                "ifc_rgb": ifc_rgb, "ifc_pt": ifc_pt}[part]

    # -- banks -------------------------------------------------------------

    def enqueue(self, snapshot):
        for key in ("rgb_local", "point_local"):
            self.banks[key].enqueue(snapshot[key], snapshot["patch_owner"])
        for key in ("rgb_global", "point_global"):
            self.banks[key].enqueue(snapshot[key], snapshot["owner"])

    def init_banks(self):
        """Fill the banks with one pass over the training set before the first step."""
        bs = self.config.batch_size
        with torch.no_grad():
            for start in range(0, len(self.features), bs):
                idx = list(range(start, min(start + bs, len(self.features))))
                xr, xp, m = _stack(self.features, idx, self.dtype)
                ar, ap = self.adaptors.rgb(xr, m), self.adaptors.point(xp, m)
                own = np.asarray(idx)
                powner = np.repeat(own, m.sum(dim=1).numpy())
                self.banks["rgb_local"].enqueue(ar[m].numpy(), powner)
                self.banks["point_local"].enqueue(ap[m].numpy(), powner)
                self.banks["rgb_global"].enqueue(self._globals(ar, m).numpy(), own)
                self.banks["point_global"].enqueue(self._globals(ap, m).numpy(), own)

    # -- optimisation ------------------------------------------------------

    def _apply(self, loss: torch.Tensor, lr: float):
        self.optimizer.zero_grad(set_to_none=True)
        if loss.requires_grad:
            loss.backward()
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.optimizer.step()

    def step(self, idx, lr: float, update_banks: bool = True) -> LossTerms:
        terms, snapshot = self.forward(idx)
        report = terms.report()
        if not all(math.isfinite(v) for v in report.as_dict().values()):
            raise TrainingDivergedError(f"non-finite loss at step {self.step_count}: {report}")
        if self.config.update_mode == "joint":
            self._apply(self.objective(terms, "all"), lr)
        else:
            self._apply(self.objective(terms, "clc"), lr)
            for part in ("ifc_rgb", "ifc_pt"):
                t2, _ = self.forward(idx)
                self._apply(self.objective(t2, part), lr)
        if update_banks:
            self.enqueue(snapshot)
        self.step_count += 1
        return terms


def train_lsfa(data, config: TrainConfig, out_dir=None, specs: BackboneSpecs = BackboneSpecs(),
               adaptors: AdaptorPair | None = None) -> TrainResult:
    """Run the adaptation loop.

    ``data`` is a train ``DatasetManifest`` or a list of precomputed
    :class:`SampleFeatures`. With ``out_dir`` set, writes ``train_log.jsonl``,
    ``ckpt_epoch<N>.bin`` every ``checkpoint_every`` epochs and ``adaptors.bin``.
    """
    if isinstance(data, DatasetManifest):
        if len(data) == 0:
            raise ConfigurationError("training split is empty")
        if any(data.label(s) != "normal" for s in data.sample_ids):
            raise ConfigurationError("training split must contain only normal samples")
        features = extract_split(data, specs)
    else:
        features = list(data)
    torch.manual_seed(config.seed)
    trainer = Trainer(features, config, adaptors)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    log_fh = open(out / "train_log.jsonl", "w") if out is not None else None

    records = []
    try:
        if not trainer.terms:
            log.info("no loss terms enabled; adaptors stay at their identity initialisation")
            epochs = 0
        else:
            trainer.init_banks()
            epochs = config.epochs
        n = len(features)
        steps_per_epoch = math.ceil(n / config.batch_size)
        total = epochs * steps_per_epoch
        rng = np.random.default_rng(config.seed)
        t0 = time.perf_counter()
        for epoch in range(epochs):
            order = rng.permutation(n)
            for b in range(steps_per_epoch):
                idx = sorted(order[b * config.batch_size:(b + 1) * config.batch_size].tolist())
                lr = lr_schedule(trainer.step_count + 1, config, total)
                try:
                    terms = trainer.step(idx, lr)
                except TrainingDivergedError as exc:
                    if log_fh:
                        log_fh.write(json.dumps({"step": trainer.step_count, "error": str(exc)}) + "\n")
                    raise
                rec = TrainLogRecord(step=trainer.step_count, epoch=epoch + 1, lr=lr,
                                     losses=terms.report().as_dict(),
                                     bank_sizes={k: len(v) for k, v in trainer.banks.items()},
                                     wall_time=time.perf_counter() - t0)
                records.append(rec)
                if log_fh:
                    log_fh.write(rec.to_json(config.log_wall_time) + "\n")
            if out is not None and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
                save_checkpoint(out / f"ckpt_epoch{epoch + 1}.bin", trainer.adaptors.modules(),
                                {"epoch": epoch + 1, "step": trainer.step_count})
        if out is not None:
            save_checkpoint(out / "adaptors.bin", trainer.adaptors.modules(),
                            {"epoch": epochs, "step": trainer.step_count})
    finally:
        if log_fh:
            log_fh.close()
    return TrainResult(trainer.adaptors, records, trainer.banks)
