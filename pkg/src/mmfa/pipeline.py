"""End-to-end steps shared by the CLI and the benchmark harness.

Run directory layout (one sub-directory per category)::

    <run_dir>/config.json
    <run_dir>/<category>/train_ids.json      training ids actually used
    <run_dir>/<category>/train/              train_log.jsonl, ckpt_epoch<N>.bin, adaptors.bin
    <run_dir>/<category>/banks/{rgb,point}.bin
    <run_dir>/<category>/results/            results.jsonl + maps/
    <run_dir>/metrics.csv, metrics.json
"""
from __future__ import annotations

import hashlib
import json
import logging
from pathlib import Path

from .adaptor import AdaptorPair, load_checkpoint
from .banks import load_coreset, save_coreset
from .config import RunConfig
from .dataio import generate_dataset, load_manifest
from .errors import ConfigurationError, SampleNotFoundError
from .fusion import extract_split
from .grids import MODALITIES
from .metrics import evaluate_category, load_results, report_csv, report_json, summarize
from .scorer import build_inference_banks, score_dataset
from .trainer import few_shot_subsample, train_lsfa

log = logging.getLogger(__name__)


def dataset_hash(root, categories) -> str:
    """SHA-256 over relative paths and bytes of every file of the given categories."""
    root = Path(root)
    h = hashlib.sha256()
    for cat in sorted(categories):
        for f in sorted(p for p in (root / cat).rglob("*") if p.is_file()):
            h.update(f.relative_to(root).as_posix().encode() + b"\0")
            h.update(f.read_bytes())
    return h.hexdigest()


def gen_data(cfg: RunConfig) -> tuple[list[Path], str]:
    d = cfg.data
    root = Path(cfg.paths.data_root)
    manifests = []
    for cat in d.categories:
        generate_dataset(cfg.category_spec(cat), d.n_train, d.n_test_normal, d.n_test_anomalous,
                         d.seed, root)
        manifests.append(root / cat / "manifest.json")
    return manifests, dataset_hash(root, d.categories)


def _cat_dir(cfg: RunConfig, category: str) -> Path:
    return Path(cfg.paths.run_dir) / category


def train_manifest(cfg: RunConfig, category: str):
    """Train split, few-shot subsampled when ``trainer.shots`` > 0."""
    m = load_manifest(cfg.paths.data_root, category, "train")
    if cfg.trainer.shots:
        m = few_shot_subsample(m, cfg.trainer.shots, cfg.trainer.seed)
    return m


def _used_train_manifest(cfg: RunConfig, category: str):
    path = _cat_dir(cfg, category) / "train_ids.json"
    m = load_manifest(cfg.paths.data_root, category, "train")
    if path.is_file():
        return m.subset(json.loads(path.read_text()))
    return train_manifest(cfg, category)


def save_config(cfg: RunConfig):
    run = Path(cfg.paths.run_dir)
    run.mkdir(parents=True, exist_ok=True)
    (run / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def train(cfg: RunConfig, category: str, features=None):
    out = _cat_dir(cfg, category)
    manifest = train_manifest(cfg, category)
    out.mkdir(parents=True, exist_ok=True)
    (out / "train_ids.json").write_text(json.dumps(manifest.sample_ids) + "\n")
    if features is None:
        features = extract_split(manifest, cfg.backbone_specs())
    return train_lsfa(features, cfg.train_config(), out_dir=out / "train")


def load_adaptors(cfg: RunConfig, category: str) -> AdaptorPair:
    path = _cat_dir(cfg, category) / "train" / "adaptors.bin"
    if not path.is_file():
        raise SampleNotFoundError(f"no trained adaptors at {path}; run `train` first")
    modules, _ = load_checkpoint(path)
    return AdaptorPair(modules["rgb"], modules["point"])


def build_banks(cfg: RunConfig, category: str, frozen: bool = False, features=None):
    adaptors = None if frozen else load_adaptors(cfg, category)
    if features is None:
        features = extract_split(_used_train_manifest(cfg, category), cfg.backbone_specs())
    banks = build_inference_banks(features, adaptors, cfg.banks.coreset_fraction)
    bank_dir = _cat_dir(cfg, category) / "banks"
    bank_dir.mkdir(parents=True, exist_ok=True)
    for modality in MODALITIES:
        save_coreset(banks[modality], bank_dir / f"{modality}.bin")
    return banks


def load_banks(cfg: RunConfig, category: str) -> dict:
    bank_dir = _cat_dir(cfg, category) / "banks"
    banks = {}
    for modality in MODALITIES:
        path = bank_dir / f"{modality}.bin"
        if not path.is_file():
            raise SampleNotFoundError(f"no inference bank at {path}; run `build-banks` first")
        banks[modality] = load_coreset(path)
    return banks


def score(cfg: RunConfig, category: str, frozen: bool = False, features=None):
    adaptors = None if frozen else load_adaptors(cfg, category)
    banks = load_banks(cfg, category)
    test = load_manifest(cfg.paths.data_root, category, "test")
    if features is None:
        features = extract_split(test, cfg.backbone_specs())
    return score_dataset(features, adaptors, banks, cfg.scorer.smoothing_sigma,
                         labels=test.labels, out_dir=_cat_dir(cfg, category) / "results",
                         category=category, image_size=test.image_size)


def evaluate(cfg: RunConfig, write: bool = True):
    per_cat = {}
    for cat in cfg.data.categories:
        path = _cat_dir(cfg, cat) / "results" / "results.jsonl"
        if not path.is_file():
            raise SampleNotFoundError(f"results file not found: {path}; run `score` first")
        _, records = load_results(path)
        test = load_manifest(cfg.paths.data_root, cat, "test")
        per_cat[cat] = evaluate_category(records, test, cfg.metrics.aupro_limit)
    if not per_cat:
        raise ConfigurationError("no categories to evaluate")
    report = summarize(per_cat, cfg.metrics.aupro_limit)
    if write:
        run = Path(cfg.paths.run_dir)
        run.mkdir(parents=True, exist_ok=True)
        (run / "metrics.csv").write_text(report_csv(report))
        (run / "metrics.json").write_text(report_json(report))
    return report


def run_all(cfg: RunConfig, frozen: bool = False):
    """train -> build-banks -> score for every category, then evaluate."""
    save_config(cfg)
    for cat in cfg.data.categories:
        train_feats = extract_split(train_manifest(cfg, cat), cfg.backbone_specs())
        if not frozen:
            train(cfg, cat, train_feats)
        else:
            d = _cat_dir(cfg, cat)
            d.mkdir(parents=True, exist_ok=True)
            (d / "train_ids.json").write_text(
                json.dumps(train_manifest(cfg, cat).sample_ids) + "\n")
        build_banks(cfg, cat, frozen, train_feats)
        score(cfg, cat, frozen)
    return evaluate(cfg)
