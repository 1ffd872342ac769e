"""Resumable, parallel stage graph from story setting to rendered video.

Every stage output is a schema record, written atomically to its artifact
file and embedded in ``state.json`` together with the run fingerprint.
Independent stages (the modality branches) run concurrently, and per-page
work inside a stage fans out over a bounded worker pool; results are always
assembled in page order, so parallel and serial runs produce identical
artifacts.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from concurrent.futures import FIRST_COMPLETED, Future, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from . import composer, templates
from .config import PipelineConfig
from .prompt_workflows import (
    extract_roles,
    make_image_prompt,
    make_music_prompt,
    make_sound_prompt,
    passthrough_prompt,
    substitute_roles,
)
from .providers import ProviderSet, SearchQuery, build_providers
from .schema import (
    Asset,
    AssetList,
    AssetManifest,
    ModalityPrompt,
    PipelineState,
    PromptSet,
    Record,
    RoleTable,
    SchemaError,
    StageRecord,
    StoryArtifacts,
    StorySetting,
    WritingMethod,
    decode_value,
    to_document,
)
from .storage import canonical_json, read_record, sha256_hex, write_record
from .story_agent import write_story

log = logging.getLogger(__name__)

STAGES: dict[str, tuple[str, ...]] = {
    "story": (),
    "roles": ("story",),
    "image_prompts": ("story", "roles"),
    "images": ("image_prompts",),
    "speech": ("story",),
    "sound_prompts": ("story",),
    "sounds": ("sound_prompts",),
    "music_prompt": ("story",),
    "music": ("music_prompt",),
    "compose": ("images", "speech", "sounds", "music"),
}
# Branches whose failure a best-effort run tolerates by dropping the track.
OPTIONAL_STAGES = frozenset({"sound_prompts", "sounds", "music_prompt", "music"})


class PipelineError(Exception):
    pass


class StageFailed(PipelineError):
    def __init__(self, stage: str, cause: BaseException | str):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage} failed: {cause}")


class FingerprintMismatch(PipelineError):
    pass


class StageOrderError(PipelineError):
    pass


def run_fingerprint(config: PipelineConfig, setting: StorySetting) -> str:
    body = {"config": config.fingerprint(), "setting": setting.model_dump(mode="json")}
    return sha256_hex(canonical_json(body))[:16]


def derive_seed(seed: int, *parts: object) -> int:
    return int(sha256_hex(":".join(str(p) for p in (seed, *parts)))[:8], 16)


@dataclass
class RunResult:
    workdir: Path
    state: PipelineState
    failed: list[str] = field(default_factory=list)
    manifest: Optional[AssetManifest] = None
    video: Optional[Path] = None


class Pipeline:
    def __init__(self, config: PipelineConfig, workdir: str | Path, *, providers: ProviderSet | None = None,
                 after_stage: Callable[[str], None] | None = None):
        self.config = config
        self.workdir = Path(workdir)
        self.workdir.mkdir(parents=True, exist_ok=True)
        if config.templates_dir:
            templates.set_template_dir(config.templates_dir)
        cache_root = config.cache_dir or (self.workdir / "cache")
        self.providers = providers or build_providers(config, cache_root=cache_root, encoder=config.encoder or None)
        self.after_stage = after_stage
        self._lock = threading.Lock()
        self.setting: StorySetting | None = None
        self.state: PipelineState | None = None
        self.outputs: dict[str, Record] = {}

    # -- plan -----------------------------------------------------------------

    def plan(self) -> list[str]:
        """Stage ids enabled by the config, in a valid serial order."""
        skip = set()
        if not self.config.enable_sound:
            skip |= {"sound_prompts", "sounds"}
        if not self.config.enable_music:
            skip |= {"music_prompt", "music"}
        return [s for s in STAGES if s not in skip]

    def deps(self, stage: str) -> tuple[str, ...]:
        enabled = set(self.plan())
        return tuple(d for d in STAGES[stage] if d in enabled)

    # -- state ----------------------------------------------------------------

    def _path(self, name: str) -> Path:
        return self.workdir / name

    def _persist(self) -> None:
        write_record(self._path("state.json"), self.state)

    def _log(self, stage: str, status: str, **extra: object) -> None:
        line = json.dumps({"ts": round(time.time(), 3), "stage": stage, "status": status, **extra}, sort_keys=True)
        with open(self._path("run.log"), "a", encoding="utf-8") as fh:
            fh.write(line + "\n")

    def _set(self, stage: str, record: StageRecord) -> None:
        with self._lock:
            stages = dict(self.state.stages)
            stages[stage] = record
            self.state = PipelineState(fingerprint=self.state.fingerprint, stages=stages)
            self._persist()
            self._log(stage, record.status, **({"error": record.error} if record.error else {}))

    def _start(self, setting: StorySetting) -> None:
        problems = setting.violations()
        if problems:
            raise PipelineError("invalid story setting: " + "; ".join(problems))
        self.setting = setting
        write_record(self._path("setting.json"), setting)
        self.state = PipelineState(fingerprint=run_fingerprint(self.config, setting),
                                   stages={s: StageRecord() for s in self.plan()})
        self._persist()

    def _load(self) -> None:
        try:
            self.setting = read_record(self._path("setting.json"), StorySetting)
            state = read_record(self._path("state.json"), PipelineState)
        except (OSError, SchemaError) as exc:
            raise PipelineError(f"cannot resume from {self.workdir}: {exc}") from None
        expected = run_fingerprint(self.config, self.setting)
        if state.fingerprint != expected:
            raise FingerprintMismatch(
                f"state fingerprint {state.fingerprint} does not match the current config ({expected}); "
                "start a fresh run or restore the original config")
        stages = {s: state.stages.get(s, StageRecord()) for s in self.plan()}
        self.state = PipelineState(fingerprint=state.fingerprint, stages=stages)
        for stage, rec in stages.items():
            if rec.status == "done":
                self.outputs[stage] = decode_value(rec.output)

    # -- execution ------------------------------------------------------------

    def run(self, setting: StorySetting) -> RunResult:
        self._start(setting)
        return self._drive()

    def resume(self) -> RunResult:
        self._load()
        return self._drive()

    def run_stage(self, stage: str) -> Record:
        """Run one stage of an existing run; its dependencies must already be done."""
        if self.state is None:
            self._load()
        if stage not in self.state.stages:
            raise PipelineError(f"stage {stage} is not part of this run's plan")
        missing = [d for d in self.deps(stage) if d not in self.outputs]
        if missing:
            raise StageOrderError(f"stage {stage} needs {', '.join(missing)} to be done first")
        return self._execute(stage)

    def _execute(self, stage: str) -> Record:
        started = time.monotonic()
        self._log(stage, "started")
        try:
            output = getattr(self, f"_stage_{stage}")()
        except Exception as exc:
            self._set(stage, StageRecord(status="failed", error=f"{type(exc).__name__}: {exc}",
                                         elapsed_s=round(time.monotonic() - started, 3)))
            raise StageFailed(stage, exc) from exc
        with self._lock:
            self.outputs[stage] = output
        self._set(stage, StageRecord(status="done", output=to_document(output),
                                     elapsed_s=round(time.monotonic() - started, 3)))
        return output

    def _blocked(self, stage: str, failed: set[str]) -> bool:
        if self.config.best_effort and stage == "compose":
            return any(d in failed and d not in OPTIONAL_STAGES for d in self.deps(stage))
        return any(d in failed for d in self.deps(stage))

    def _drive(self) -> RunResult:
        plan = self.plan()
        pending = [s for s in plan if s not in self.outputs]
        failed: set[str] = set()
        errors: dict[str, StageFailed] = {}
        running: dict[Future, str] = {}
        with ThreadPoolExecutor(max_workers=max(1, self.config.workers)) as pool:
            while pending or running:
                for stage in list(pending):
                    if self._blocked(stage, failed):
                        pending.remove(stage)
                        failed.add(stage)
                        continue
                    deps_ready = all(d in self.outputs or (self.config.best_effort and d in failed)
                                     for d in self.deps(stage))
                    if deps_ready:
                        pending.remove(stage)
                        running[pool.submit(self._execute, stage)] = stage
                if not running:
                    break
                done, _ = wait(running, return_when=FIRST_COMPLETED)
                for fut in sorted(done, key=lambda f: plan.index(running[f])):
                    stage = running.pop(fut)
                    exc = fut.exception()
                    if exc is not None:
                        log.error("%s", exc)
                        failed.add(stage)
                        errors[stage] = exc if isinstance(exc, StageFailed) else StageFailed(stage, exc)
                    elif self.after_stage is not None:
                        self.after_stage(stage)
        fatal = [s for s in plan if s in errors and not (self.config.best_effort and s in OPTIONAL_STAGES)]
        if fatal:
            raise errors[fatal[0]]
        manifest = self.outputs.get("compose")
        video = self._path("video.mp4")
        return RunResult(workdir=self.workdir, state=self.state, failed=sorted(failed, key=plan.index),
                         manifest=manifest, video=video if video.exists() else None)

    # -- helpers --------------------------------------------------------------

    def _map_pages(self, fn: Callable[[int], object], pages: list[int]) -> list:
        workers = max(1, self.config.workers)
        if workers == 1 or len(pages) < 2:
            return [fn(p) for p in pages]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, pages))

    def _story(self) -> StoryArtifacts:
        return self.outputs["story"]

    def _pages(self) -> list[int]:
        return [p.index for p in self._story().story.pages]

    def _direct(self) -> bool:
        return self.config.method == WritingMethod.DIRECT.value

    def _relative(self, asset: Asset, rel: str) -> Asset:
        return asset.model_copy(update={"location": rel})

    # -- stages ---------------------------------------------------------------

    def _stage_story(self) -> StoryArtifacts:
        arts = write_story(self.providers.llm, self.setting, self.config.method,
                           dialogue_turns=self.config.dialogue_turns, chapter_length=self.config.chapter_length)
        write_record(self._path("story.json"), arts.story)
        if arts.dialogue is not None:
            write_record(self._path("dialogue.json"), arts.dialogue)
        if arts.outline is not None:
            write_record(self._path("outline.json"), arts.outline)
        return arts

    def _stage_roles(self) -> RoleTable:
        roles = RoleTable(roles=()) if self._direct() else extract_roles(
            self.providers.llm, self._story().story, self.config.refine_turns)
        write_record(self._path("roles.json"), roles)
        return roles

    def _stage_image_prompts(self) -> PromptSet:
        story, roles = self._story().story, self.outputs["roles"]

        def one(page: int) -> ModalityPrompt:
            if self._direct():
                return passthrough_prompt("image", story, page)
            p = make_image_prompt(self.providers.llm, page, story, self.config.refine_turns)
            return p.model_copy(update={"text": substitute_roles(p.text, roles)})

        out = PromptSet(prompts=tuple(self._map_pages(one, self._pages()))).check()
        write_record(self._path("prompts/image.json"), out)
        return out

    def _stage_images(self) -> AssetList:
        cfg = self.config

        def one(prompt: ModalityPrompt) -> Asset:
            text = f"{prompt.text}, {cfg.image_style}" if cfg.image_style else prompt.text
            rel = f"assets/image_{prompt.page_index:03d}.png"
            asset = self.providers.image.generate_image(
                text, derive_seed(cfg.rng_seed, "image", prompt.page_index), cfg.image_width, cfg.image_height,
                self._path(rel), prompt.page_index)
            return self._relative(asset, rel)

        prompts = {p.page_index: p for p in self.outputs["image_prompts"].prompts}
        return AssetList(assets=tuple(self._map_pages(lambda i: one(prompts[i]), sorted(prompts)))).check()

    def _stage_speech(self) -> AssetList:
        story = self._story().story

        def one(page: int) -> Asset:
            rel = f"assets/speech_{page:03d}.wav"
            asset = self.providers.speech.synthesize_speech(story.page(page).text, self.config.voice,
                                                           self._path(rel), page)
            return self._relative(asset, rel)

        return AssetList(assets=tuple(self._map_pages(one, self._pages()))).check()

    def _stage_sound_prompts(self) -> PromptSet:
        story = self._story().story

        def one(page: int) -> ModalityPrompt:
            if self._direct():
                return passthrough_prompt("sound", story, page)
            return make_sound_prompt(self.providers.llm, page, story, self.config.refine_turns)

        out = PromptSet(prompts=tuple(self._map_pages(one, self._pages()))).check()
        write_record(self._path("prompts/sound.json"), out)
        return out

    def _audio_asset(self, prompt: ModalityPrompt, modality: str, duration_s: float, rel: str) -> Asset | None:
        mode = self.config.sound_mode if modality == "sound" else self.config.music_mode
        if mode == "retrieve":
            limit = 30.0 if modality == "sound" else 600.0
            hits = self.providers.search.search_audio(SearchQuery(text=prompt.text, max_duration_s=limit))
            if not hits:
                log.warning("no %s found for page %d (%r)", modality, prompt.page_index, prompt.text)
                return None
            asset = self.providers.search.fetch(hits[0], self._path(rel), modality, prompt.page_index)
        else:
            provider = self.providers.sound if modality == "sound" else self.providers.music
            asset = provider.generate_audio(prompt.text, duration_s, self._path(rel), modality, prompt.page_index)
        return self._relative(asset, rel)

    def _stage_sounds(self) -> AssetList:
        prompts = [p for p in self.outputs["sound_prompts"].prompts if p.text.strip()]

        def one(i: int) -> Asset | None:
            p = prompts[i]
            return self._audio_asset(p, "sound", self.config.sound_duration_s, f"assets/sound_{p.page_index:03d}.wav")

        assets = [a for a in self._map_pages(one, list(range(len(prompts)))) if a is not None]
        return AssetList(assets=tuple(assets)).check()

    def _stage_music_prompt(self) -> PromptSet:
        story = self._story().story
        if self._direct():
            prompt = passthrough_prompt("music", story)
        else:
            prompt = make_music_prompt(self.providers.llm, self.setting, story, self.config.refine_turns)
        out = PromptSet(prompts=(prompt,)).check()
        write_record(self._path("prompts/music.json"), out)
        return out

    def _stage_music(self) -> AssetList:
        prompt = self.outputs["music_prompt"].prompts[0]
        asset = self._audio_asset(prompt, "music", self.config.music_duration_s, "assets/music.wav")
        return AssetList(assets=(asset,) if asset else ())

    def _stage_compose(self) -> AssetManifest:
        sounds = self.outputs.get("sounds")
        music = self.outputs.get("music")
        manifest = AssetManifest(
            num_pages=len(self._pages()),
            images=self.outputs["images"].assets,
            speech=self.outputs["speech"].assets,
            sounds=sounds.assets if sounds else (),
            music=music.assets[0] if music and music.assets else None,
            fingerprint=self.state.fingerprint,
        ).check()
        write_record(self._path("manifest.json"), manifest)
        composer.compose(manifest, self.workdir, self.config.rng_seed, video=self.config.video,
                         gains=self.config.gains, render=self.config.render, encoder=self.config.encoder or None,
                         workers=self.config.workers)
        return manifest


def run(config: PipelineConfig, setting: StorySetting, workdir: str | Path, **kwargs) -> RunResult:
    return Pipeline(config, workdir, **kwargs).run(setting)


def resume(config: PipelineConfig, workdir: str | Path, **kwargs) -> RunResult:
    return Pipeline(config, workdir, **kwargs).resume()


__all__ = [
    "FingerprintMismatch", "OPTIONAL_STAGES", "Pipeline", "PipelineError", "RunResult", "STAGES", "StageFailed",
    "StageOrderError", "derive_seed", "resume", "run", "run_fingerprint",
]
