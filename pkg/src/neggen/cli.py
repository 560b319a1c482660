"""``neggen`` command line.

Exit codes: 0 success, 2 usage, 3 validation / missing input, 4 backend failure.
"""
from __future__ import annotations

import functools
import json
import logging
from dataclasses import replace
from pathlib import Path

import click

from neggen import __version__, pipeline
from neggen.backends import BackendError
from neggen.cache import Cache
from neggen.config import ConfigError, load_config, validate_config
from neggen.loss import FocalParams
from neggen.negtext import STRATEGIES

EXIT_USAGE = 2
EXIT_VALIDATION = 3
EXIT_BACKEND = 4

_GLOBALS = ("config", "mock", "seed", "out", "cache")


def common_options(fn):
    """The global flags, accepted both before and after the subcommand name."""
    fn = click.option("--cache", type=click.Path(file_okay=False), default=None, help="Cache directory.")(fn)
    fn = click.option("--out", type=click.Path(file_okay=False), default=None, help="Output directory.")(fn)
    fn = click.option("--seed", type=int, default=None, help="Override the config seed.")(fn)
    fn = click.option("--mock", is_flag=True, default=None, help="Use the offline mock backends.")(fn)
    fn = click.option("--config", type=click.Path(dir_okay=False), default=None, help="TOML config file.")(fn)
    return fn


class Context:
    def __init__(self, cfg, out: Path, cache: Cache, mock: bool):
        self.cfg = cfg
        self.out = out
        self.cache = cache
        self.mock = mock


def _fail(code: int, msg: str):
    click.echo(f"error: {msg}", err=True)
    raise SystemExit(code)


def stage(name: str):
    """Resolve settings, open the event log, map exceptions to exit codes."""

    def deco(fn):
        @click.pass_context
        @functools.wraps(fn)
        def wrapper(ctx, **kw):
            merged = dict(ctx.obj or {})
            for key in _GLOBALS:
                value = kw.pop(key, None)
                if value is not None and not (key == "mock" and not value):
                    merged[key] = value
            try:
                cfg = load_config(merged.get("config"))
            except ConfigError as exc:
                _fail(EXIT_VALIDATION, str(exc))
            if merged.get("seed") is not None:
                cfg = replace(cfg, seed=merged["seed"])
            problems = validate_config(cfg, check_files=False)
            if problems:
                _fail(EXIT_VALIDATION, "; ".join(problems))
            out = Path(merged.get("out") or cfg.out)
            cache = Cache(merged.get("cache") or cfg.cache)
            run = Context(cfg, out, cache, bool(merged.get("mock")))
            try:
                with pipeline.EventLog(out / "logs" / f"{name}.jsonl") as events:
                    result = fn(run, events, **kw)
                    if cache.hits or cache.misses:
                        events.emit("cache", hits=cache.hits, misses=cache.misses)
            except BackendError as exc:
                _fail(EXIT_BACKEND, f"backend failure: {exc}")
            except (pipeline.MissingInputError, ConfigError, ValueError, OSError) as exc:
                _fail(EXIT_VALIDATION, str(exc))
            if cache.hits or cache.misses:
                click.echo(f"cache hits: {cache.hits}", err=True)
            return result

        return wrapper

    return deco


@click.group()
@click.version_option(__version__, prog_name="neggen")
@common_options
@click.pass_context
def cli(ctx, **kw):
    """Generate negative captions and images for grounding data."""
    ctx.obj = {k: v for k, v in kw.items() if v is not None and not (k == "mock" and not v)}
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")


def _strategies(ctx, param, value):
    if value is None:
        return None
    names = [s.strip() for s in value.split(",") if s.strip()]
    bad = [s for s in names if s not in STRATEGIES]
    if bad or not names:
        raise click.BadParameter(f"unknown strategy {', '.join(bad) or '(none)'}; valid: {', '.join(STRATEGIES)}")
    return names


@cli.command("gen-text")
@common_options
@click.option("--strategies", callback=_strategies, default=None,
              help=f"Comma-separated subset of: {', '.join(STRATEGIES)}.")
@stage("gen-text")
def gen_text(run: Context, events, strategies):
    """Generate negative captions for every dataset sample."""
    stats = pipeline.gen_text(run.cfg, run.out, run.cache, run.mock, strategies, events)
    for name, s in stats.items():
        click.echo(f"{name}: {s.emitted} pairs ({s.dropped_equal} equal, {s.dropped_malformed} malformed dropped)")


@cli.command("gen-triplets")
@common_options
@click.option("--stage", "stage_no", type=click.IntRange(1, 2), default=1, show_default=True)
@click.option("--reviewed", type=click.Path(dir_okay=False), default=None, help="Reviewed stage-1 file (stage 2).")
@click.option("--size", type=click.IntRange(min=1), default=None)
@stage("gen-triplets")
def gen_triplets(run: Context, events, stage_no, reviewed, size):
    """Bootstrap mask-and-fill triplets from the seed examples."""
    got = pipeline.gen_triplets(run.cfg, run.out, run.cache, run.mock, stage_no, reviewed, size, events)
    click.echo(f"stage {stage_no}: {len(got)} triplets")


@cli.command("gen-images")
@common_options
@click.option("--skip-region-filter", is_flag=True)
@click.option("--scores", type=click.Path(exists=True, dir_okay=False), default=None,
              help="JSON table of scorer logits instead of a scorer backend.")
@stage("gen-images")
def gen_images(run: Context, events, skip_region_filter, scores):
    """Inpaint edited phrases and filter the generated images."""
    kept, report = pipeline.gen_images(run.cfg, run.out, run.cache, run.mock, skip_region_filter,
                                       Path(scores) if scores else None, events)
    click.echo(f"kept {len(kept)} of {report.total} records")


@cli.command("filter-images")
@common_options
@click.option("--skip-region-filter", is_flag=True)
@click.option("--scores", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--rescore", is_flag=True, help="Discard stored scores first.")
@stage("filter-images")
def filter_images(run: Context, events, skip_region_filter, scores, rescore):
    """Re-apply the score filters to existing records."""
    kept, report = pipeline.filter_images(run.cfg, run.out, run.cache, run.mock, skip_region_filter,
                                          Path(scores) if scores else None, rescore, events)
    click.echo(f"kept {len(kept)} of {report.total} records")


@cli.command("assemble")
@common_options
@click.option("--option", "options", multiple=True, type=click.Choice(["text", "generated", "pair"]))
@click.option("-k", "k", type=int, default=None, help="Negatives per caption.")
@stage("assemble")
def assemble(run: Context, events, options, k):
    """Build the training set and its manifest."""
    if k is not None and k < 1:
        raise click.BadParameter("K must be >= 1", param_hint="-k")
    manifest = pipeline.assemble(run.cfg, run.out, options or None, k, events)
    click.echo(f"{manifest['count']} samples, sha256 {manifest['sha256']}")


@cli.command("analyze")
@common_options
@click.option("--labels", type=click.Path(exists=True, dir_okay=False), default=None,
              help="JSON map record_id -> good (bool) from manual review.")
@stage("analyze")
def analyze(run: Context, events, labels):
    """Write length, changed-word, extra-word and retention tables."""
    written = pipeline.analyze(run.cfg, run.out, Path(labels) if labels else None, events)
    for name in sorted(written):
        click.echo(written[name])


@cli.command("loss-check")
@common_options
@click.option("--predictions", type=click.Path(dir_okay=False), required=True)
@click.option("--train", type=click.Path(dir_okay=False), default=None)
@click.option("--alpha", type=float, default=0.25, show_default=True)
@click.option("--gamma", type=float, default=2.0, show_default=True)
@stage("loss-check")
def loss_check(run: Context, events, predictions, train, alpha, gamma):
    """Evaluate the grounding loss of a predictions file against the training set."""
    report = pipeline.loss_check(run.out, Path(predictions), Path(train) if train else None,
                                 FocalParams(alpha, gamma), events)
    click.echo(f"{len(report['samples'])} samples, mean loss {report['mean_loss']:.6g}")


@cli.command("sample-report")
@common_options
@click.option("--size", type=click.IntRange(min=0), default=100, show_default=True)
@click.option("--source", type=click.Choice(["images", "pairs"]), default="images", show_default=True)
@stage("sample-report")
def sample_report(run: Context, events, size, source):
    """Random review bundle (records.jsonl + index.html)."""
    rows = pipeline.sample_report(run.out, size, run.cfg.seed, source, events)
    click.echo(f"{len(rows)} records in {run.out / 'review'}")


@cli.command("validate-config")
@common_options
@click.pass_context
def validate(ctx, **kw):
    """Check the config and the files it references."""
    path = kw.get("config") or (ctx.obj or {}).get("config")
    try:
        cfg = load_config(path)
    except ConfigError as exc:
        _fail(EXIT_VALIDATION, str(exc))
    problems = validate_config(cfg)
    for p in problems:
        click.echo(p, err=True)
    if problems:
        raise SystemExit(EXIT_VALIDATION)
    click.echo(json.dumps({"config": path, "status": "ok"}))


def main():
    cli(prog_name="neggen")


if __name__ == "__main__":
    main()
