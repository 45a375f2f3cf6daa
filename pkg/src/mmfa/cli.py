"""Command line: ``mmfa gen-data | train | build-banks | score | eval | plot | sweep``.

Exit codes: 0 success, 1 internal error, 2 user or configuration error.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import sys
from pathlib import Path

import click

from . import pipeline
from .config import SECTIONS, describe_keys, load_config
from .errors import UserError

log = logging.getLogger("mmfa")

EXIT_OK, EXIT_INTERNAL, EXIT_USER = 0, 1, 2

# config sections whose keys are mirrored as plain flags on `train` and `sweep`
MIRRORED = ("trainer", "losses", "banks", "adaptor")


def _mirrored_options(func):
    for section in reversed(MIRRORED):
        for f in reversed(dataclasses.fields(SECTIONS[section])):
            flag = "--" + f.name.replace("_", "-")
            src = f.metadata.get("source")
            help_ = f"{section}.{f.name}" + (f" [{src}]" if src else "")
            func = click.option(flag, f"mirror__{section}__{f.name}", default=None, help=help_)(func)
    return func


def _common(func):
    func = click.option("--set", "overrides", multiple=True, metavar="SECTION.KEY=VALUE",
                        help="Override any config key (repeatable).")(func)
    func = click.option("--config", "config_path", type=click.Path(), default=None,
                        help="JSON config file.")(func)
    func = click.option("--run-dir", default=None, help="Output directory (paths.run_dir).")(func)
    func = click.option("--data-root", default=None, help="Dataset root (paths.data_root).")(func)
    func = click.option("--category", "categories", multiple=True,
                        help="Restrict to these categories (repeatable).")(func)
    return func


def _build_config(config_path, overrides, data_root=None, run_dir=None, categories=(), **kw):
    items = list(overrides)
    if data_root:
        items.append(("paths.data_root", data_root))
    if run_dir:
        items.append(("paths.run_dir", run_dir))
    if categories:
        items.append(("data.categories", list(categories)))
    for key, value in kw.items():
        if key.startswith("mirror__") and value is not None:
            _, section, name = key.split("__")
            items.append((f"{section}.{name}", value))
    return load_config(config_path, items)


_EPILOG = "\b\nConfiguration keys (default, [provenance]):\n" + describe_keys()


@click.group(epilog=_EPILOG, context_settings={"max_content_width": 120})
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose):
    """Multimodal feature adaptation for RGB + point-cloud anomaly detection."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


@main.command("gen-data", epilog=_EPILOG)
@_common
def gen_data(config_path, overrides, data_root, run_dir, categories):
    """Render the synthetic benchmark and print manifest paths and the dataset hash."""
    cfg = _build_config(config_path, overrides, data_root, run_dir, categories)
    manifests, digest = pipeline.gen_data(cfg)
    for m in manifests:
        click.echo(f"manifest\t{m}")
    click.echo(f"dataset_sha256\t{digest}")


@main.command(epilog=_EPILOG)
@_common
@_mirrored_options
def train(config_path, overrides, data_root, run_dir, categories, **kw):
    """Adapt both modalities on the normal training split of each category."""
    cfg = _build_config(config_path, overrides, data_root, run_dir, categories, **kw)
    pipeline.save_config(cfg)
    for cat in cfg.data.categories:
        result = pipeline.train(cfg, cat)
        last = result.log[-1].losses["l_lsfa"] if result.log else float("nan")
        click.echo(f"trained\t{cat}\tsteps={len(result.log)}\tfinal_loss={last:.6f}\t"
                   f"{Path(cfg.paths.run_dir) / cat / 'train'}")


@main.command("build-banks", epilog=_EPILOG)
@_common
@click.option("--frozen", is_flag=True, help="Use frozen features (no adaptors).")
def build_banks(config_path, overrides, data_root, run_dir, categories, frozen):
    """Coreset memory banks from adapted training features."""
    cfg = _build_config(config_path, overrides, data_root, run_dir, categories)
    for cat in cfg.data.categories:
        banks = pipeline.build_banks(cfg, cat, frozen)
        click.echo(f"banks\t{cat}\t" + "\t".join(f"{k}={len(v)}/{v.source_size}"
                                                 for k, v in banks.items()))


@main.command(epilog=_EPILOG)
@_common
@click.option("--frozen", is_flag=True, help="Use frozen features (no adaptors).")
def score(config_path, overrides, data_root, run_dir, categories, frozen):
    """Score the test split and write results.jsonl plus pixel maps."""
    cfg = _build_config(config_path, overrides, data_root, run_dir, categories)
    for cat in cfg.data.categories:
        results = pipeline.score(cfg, cat, frozen)
        click.echo(f"scored\t{cat}\t{len(results)}\t"
                   f"{Path(cfg.paths.run_dir) / cat / 'results' / 'results.jsonl'}")


@main.command("eval", epilog=_EPILOG)
@_common
@click.option("--aupro-limit", type=float, default=None, help="AUPRO FPR limit (metrics.aupro_limit).")
@click.option("--json", "as_json", is_flag=True, help="Print the JSON report instead of CSV.")
def eval_(config_path, overrides, data_root, run_dir, categories, aupro_limit, as_json):
    """I-AUROC, P-AUROC and AUPRO per category plus the mean."""
    extra = [("metrics.aupro_limit", aupro_limit)] if aupro_limit is not None else []
    cfg = _build_config(config_path, list(overrides) + extra, data_root, run_dir, categories)
    pipeline.evaluate(cfg)
    run = Path(cfg.paths.run_dir)
    click.echo((run / ("metrics.json" if as_json else "metrics.csv")).read_text(), nl=False)


@main.command(epilog=_EPILOG)
@_common
@click.option("--out-dir", default=None, help="Figure directory (default <run_dir>/plots).")
def plot(config_path, overrides, data_root, run_dir, categories, out_dir):
    """Fused-map overlays per test sample and sweep curves when sweep logs exist."""
    from . import plotting
    from .dataio import load_manifest
    from .metrics import load_results

    cfg = _build_config(config_path, overrides, data_root, run_dir, categories)
    run = Path(cfg.paths.run_dir)
    out = Path(out_dir) if out_dir else run / "plots"
    n = 0
    for cat in cfg.data.categories:
        path = run / cat / "results" / "results.jsonl"
        if not path.is_file():
            click.echo(f"warning: no results for {cat} at {path}", err=True)
            continue
        _, records = load_results(path)
        if not records:
            click.echo(f"warning: results for {cat} are empty; no overlays written", err=True)
            continue
        test = load_manifest(cfg.paths.data_root, cat, "test")
        paths = plotting.plot_overlays(records, test, out / cat)
        n += len(paths)
        click.echo(f"overlays\t{cat}\t{len(paths)}\t{out / cat}")
    for p in plotting.plot_sweeps(run / "sweeps", out):
        n += 1
        click.echo(f"sweep\t{p}")
    if n == 0:
        click.echo("warning: nothing to plot", err=True)


SWEEP_PARAMS = {"lam": "losses.lam", "local_bank_size": "banks.local_bank_size"}


@main.command(epilog=_EPILOG)
@_common
@_mirrored_options
@click.option("--param", type=click.Choice(sorted(SWEEP_PARAMS)), required=True)
@click.option("--values", required=True, help="Comma-separated values to try.")
def sweep(config_path, overrides, data_root, run_dir, categories, param, values, **kw):
    """Full train/score/eval for each value of one hyperparameter."""
    cfg = _build_config(config_path, overrides, data_root, run_dir, categories, **kw)
    base = Path(cfg.paths.run_dir)
    (base / "sweeps").mkdir(parents=True, exist_ok=True)
    rows = []
    for raw in values.split(","):
        raw = raw.strip()
        sub = _build_config(config_path, list(overrides) + [
            (SWEEP_PARAMS[param], raw), ("paths.run_dir", str(base / "sweeps" / f"{param}={raw}"))],
            data_root, None, categories, **kw)
        report = pipeline.run_all(sub)
        row = {"param": param, "value": getattr(getattr(sub, SWEEP_PARAMS[param].split(".")[0]),
                                                param),
               "i_auroc": report.i_auroc, "p_auroc": report.p_auroc, "aupro": report.aupro}
        rows.append(row)
        click.echo(f"{param}={raw}\ti_auroc={report.i_auroc:.6f}\tp_auroc={report.p_auroc:.6f}\t"
                   f"aupro={report.aupro:.6f}")
    (base / "sweeps" / f"{param}.jsonl").write_text(
        "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))


def run(argv=None) -> int:
    """Entry point with the documented exit codes."""
    try:
        main.main(args=argv, prog_name="mmfa", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return EXIT_USER
    except click.ClickException as exc:
        exc.show()
        return EXIT_USER
    except (UserError, OSError) as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_USER
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        click.echo(f"internal error: {type(exc).__name__}: {exc}", err=True)
        return EXIT_INTERNAL
    return EXIT_OK


def entry():
    sys.exit(run())


if __name__ == "__main__":
    entry()
