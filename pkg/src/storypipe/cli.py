"""Command line entry point.

Exit codes: 0 success, 2 configuration or input error, 3 stage failure,
missing report cell or missing asset.
"""

from __future__ import annotations

import functools
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any

import click
import yaml

from . import composer, evalkit
from .config import ConfigError, PipelineConfig, load_config
from .pipeline import FingerprintMismatch, Pipeline, PipelineError, RunResult, StageFailed
from .providers import build_providers
from .schema import AssetManifest, SchemaError, StorySetting
from .storage import read_record, write_record

EXIT_OK, EXIT_CONFIG, EXIT_FAILURE = 0, 2, 3


def _guard(fn):
    """Translate domain errors into the documented exit codes."""
    @functools.wraps(fn)
    def wrapper(*args: Any, **kwargs: Any) -> None:
        try:
            fn(*args, **kwargs)
        except (ConfigError, FingerprintMismatch, SchemaError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_CONFIG)
        except StageFailed as exc:
            click.echo(f"stage failed: {exc.stage}: {exc.cause}", err=True)
            sys.exit(EXIT_FAILURE)
        except composer.MissingAssetError as exc:
            click.echo(f"missing asset: {exc.path}", err=True)
            sys.exit(EXIT_FAILURE)
        except (evalkit.EvaluationError, composer.CompositionError, PipelineError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_FAILURE)

    return wrapper


def _config(path: str | None, **overrides: Any) -> PipelineConfig:
    return load_config(path, {k: v for k, v in overrides.items() if v is not None})


def _summary(result: RunResult) -> dict[str, Any]:
    return {
        "workdir": str(result.workdir),
        "fingerprint": result.state.fingerprint,
        "stages": {s: {"status": r.status, "elapsed_s": r.elapsed_s, **({"error": r.error} if r.error else {})}
                   for s, r in result.state.stages.items()},
        "skipped": result.failed,
        "video": str(result.video) if result.video else None,
    }


def _print_summary(summary: dict[str, Any], as_json: bool) -> None:
    if as_json:
        click.echo(json.dumps(summary, indent=2))
        return
    click.echo(f"workdir: {summary['workdir']}")
    click.echo(f"fingerprint: {summary['fingerprint']}")
    for stage, info in summary["stages"].items():
        elapsed = f"{info['elapsed_s']:.2f}s" if info["elapsed_s"] is not None else "-"
        click.echo(f"  {stage:<14} {info['status']:<8} {elapsed}")
    click.echo(f"video: {summary['video'] or '(not rendered)'}")


def _read_setting(path: str) -> StorySetting:
    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read setting {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"setting {path} must be a mapping")
    data.pop("schema_version", None)
    data.pop("type", None)
    if isinstance(data.get("requirements"), str):
        data["requirements"] = [data["requirements"]]
    try:
        return StorySetting.model_validate(data)
    except Exception as exc:
        raise ConfigError(f"invalid setting {path}: {exc}") from None


def _setting(path: str | None, topic: str | None, pages: int | None, topic_type: str,
             requirements: tuple[str, ...]) -> StorySetting:
    if path:
        setting = _read_setting(path)
    else:
        if not topic or pages is None:
            raise ConfigError("give --setting FILE, or --topic and --pages")
        try:
            setting = StorySetting(topic=topic, topic_type=topic_type, num_pages=pages,
                                   requirements=requirements or ("The story suits young children.",))
        except Exception as exc:
            raise ConfigError(f"invalid setting: {exc}") from None
    problems = setting.violations()
    if problems:
        raise ConfigError("invalid setting: " + "; ".join(problems))
    return setting


def _common(fn):
    for option in reversed([
        click.option("--config", "config_path", type=click.Path(dir_okay=False), help="YAML or JSON config."),
        click.option("--workers", type=int, help="Parallel workers (default 4)."),
        click.option("--json", "as_json", is_flag=True, help="Machine-readable summary."),
        click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr."),
    ]):
        fn = option(fn)
    return fn


@click.group()
def main() -> None:
    """Turn a story setting into a narrated, illustrated video."""


@main.command()
@_common
@click.option("--workdir", required=True, type=click.Path(file_okay=False), help="Run directory.")
@click.option("--setting", "setting_path", type=click.Path(dir_okay=False), help="Story setting file.")
@click.option("--topic", help="Story topic (instead of --setting).")
@click.option("--pages", type=int, help="Number of pages (instead of --setting).")
@click.option("--topic-type", default="custom", show_default=True)
@click.option("--requirement", "requirements", multiple=True, help="Writing requirement; repeatable.")
@click.option("--seed", type=int)
@click.option("--method", type=click.Choice(["direct", "story_agent"]))
@click.option("--no-sound", is_flag=True)
@click.option("--no-music", is_flag=True)
@click.option("--no-render", is_flag=True, help="Stop after writing the encoder plan.")
@click.option("--best-effort", is_flag=True, help="Compose without sound/music branches that failed.")
@click.option("--resume", "resume_flag", is_flag=True, help="Continue the run in --workdir.")
@_guard
def run(config_path, workers, as_json, verbose, workdir, setting_path, topic, pages, topic_type, requirements, seed,
        method, no_sound, no_music, no_render, best_effort, resume_flag) -> None:
    """Run the whole pipeline for one story setting."""
    _logging(verbose)
    cfg = _config(config_path, workers=workers, rng_seed=seed, method=method,
                  enable_sound=False if no_sound else None, enable_music=False if no_music else None,
                  render=False if no_render else None, best_effort=True if best_effort else None)
    pipe = Pipeline(cfg, workdir)
    if resume_flag:
        result = pipe.resume()
    else:
        result = pipe.run(_setting(setting_path, topic, pages, topic_type, requirements))
    _print_summary(_summary(result), as_json)


@main.command()
@_common
@click.option("--workdir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--no-sound", is_flag=True)
@click.option("--no-music", is_flag=True)
@click.option("--no-render", is_flag=True)
@click.option("--best-effort", is_flag=True)
@_guard
def resume(config_path, workers, as_json, verbose, workdir, no_sound, no_music, no_render, best_effort) -> None:
    """Continue an interrupted run; stages already done are not repeated."""
    _logging(verbose)
    cfg = _config(config_path, workers=workers, enable_sound=False if no_sound else None,
                  enable_music=False if no_music else None, render=False if no_render else None,
                  best_effort=True if best_effort else None)
    _print_summary(_summary(Pipeline(cfg, workdir).resume()), as_json)


def _csv(value: str | None, allowed: tuple[str, ...], what: str) -> tuple[str, ...]:
    if value is None:
        return ()
    items = tuple(v.strip() for v in value.split(",") if v.strip())
    bad = [v for v in items if v not in allowed]
    if bad:
        raise ConfigError(f"unknown {what}: {', '.join(bad)} (choose from {', '.join(allowed)})")
    return items


@main.command()
@_common
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Where to write topics.json.")
@click.option("--per-type", default=25, show_default=True, type=int)
@click.option("--types", help="Comma-separated topic types (default: the four standard types).")
@_guard
def topics(config_path, workers, as_json, verbose, out, per_type, types) -> None:
    """Generate an evaluation topic set with the judge model."""
    _logging(verbose)
    cfg = _config(config_path, workers=workers)
    from .schema import STANDARD_TOPIC_TYPES, TopicType

    chosen = _csv(types, tuple(t.value for t in TopicType), "topic types") or STANDARD_TOPIC_TYPES
    providers = build_providers(cfg, cache_root=cfg.cache_dir or None)
    topic_set = evalkit.generate_topics(providers.judge, chosen, per_type)
    write_record(out, topic_set)
    counts = {t: len(v) for t, v in topic_set.by_type().items()}
    click.echo(json.dumps({"out": out, "counts": counts}) if as_json else f"wrote {len(topic_set.entries)} topics to {out}")


@main.command("eval")
@_common
@click.option("--topics", "topics_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False), help="Report directory.")
@click.option("--methods", default="direct,story_agent", show_default=True)
@click.option("--criteria", default="attractiveness,warmth,education", show_default=True)
@click.option("--metrics", default="", help="Comma-separated alignment metrics (runs the asset pipeline).")
@click.option("--pages", default=4, show_default=True, type=int, help="Pages per evaluated story.")
@click.option("--text-source", type=click.Choice(["prompt", "page"]), default="prompt", show_default=True)
@_guard
def eval_cmd(config_path, workers, as_json, verbose, topics_path, out, methods, criteria, metrics, pages,
             text_source) -> None:
    """Grade stories for a topic set and write report.md / report.json."""
    _logging(verbose)
    cfg = _config(config_path, workers=workers)
    topic_set = read_record(topics_path, evalkit.TopicSet)
    report = evalkit.evaluate(
        cfg, topic_set, out,
        methods=_csv(methods, ("direct", "story_agent"), "methods"),
        criteria=_csv(criteria, evalkit.CRITERIA, "criteria"),
        metrics=_csv(metrics, evalkit.METRICS, "metrics"),
        num_pages=pages, text_source=text_source,
    )
    if as_json:
        click.echo(json.dumps({"out": out, "all": {r.method: r.values for r in report.rows if r.group == "All"}}))
    else:
        click.echo(evalkit.render_markdown(report), nl=False)


@main.command()
@_common
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", type=click.Path(file_okay=False), help="Output directory (default: the manifest's directory).")
@click.option("--seed", type=int)
@click.option("--no-sound", is_flag=True, help="Leave out sound effects.")
@click.option("--no-music", is_flag=True, help="Leave out the music bed.")
@click.option("--no-render", is_flag=True, help="Write timeline and encoder plan only.")
@_guard
def compose(config_path, workers, as_json, verbose, manifest_path, out, seed, no_sound, no_music, no_render) -> None:
    """Compose a video from an asset manifest."""
    _logging(verbose)
    cfg = _config(config_path, workers=workers, rng_seed=seed)
    manifest = read_record(manifest_path, AssetManifest)
    src = Path(manifest_path).parent
    dest = Path(out) if out else src
    dest.mkdir(parents=True, exist_ok=True)

    def moved(asset):
        rel = os.path.relpath(src / asset.location, dest)
        return asset.model_copy(update={"location": Path(rel).as_posix()})

    update: dict[str, Any] = {
        "images": tuple(moved(a) for a in manifest.images),
        "speech": tuple(moved(a) for a in manifest.speech),
        "sounds": () if no_sound else tuple(moved(a) for a in manifest.sounds),
        "music": None if no_music or manifest.music is None else moved(manifest.music),
    }
    manifest = manifest.model_copy(update=update)
    result = composer.compose(manifest, dest, cfg.rng_seed, video=cfg.video, gains=cfg.gains,
                              render=cfg.render and not no_render, encoder=cfg.encoder or None, workers=cfg.workers)
    info = {"timeline": str(dest / "timeline.json"), "encoder_plan": str(dest / "encoder_plan.json"),
            "total_s": result.timeline.total_s, "video": str(result.video) if result.video else None}
    if as_json:
        click.echo(json.dumps(info, indent=2))
    else:
        for key, value in info.items():
            click.echo(f"{key}: {value}")


def _logging(verbose: bool) -> None:
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


if __name__ == "__main__":
    main()
