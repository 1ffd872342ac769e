"""Deterministic composition: asset manifest -> timeline -> encoder invocations.

Narration drives everything: page ``i`` is shown for exactly the duration of
its speech clip, its sound effect is looped or truncated to that duration,
and the music bed is fitted to the whole video.  Transitions overlap the two
neighbouring segments by half their length each, so the display tiling and
the narration sync are unaffected.

Rendering is delegated to an external ffmpeg-compatible binary.  The
encoder plan stores argument vectors without the binary itself and with
paths relative to the run directory, so it is byte-identical across
machines.
"""

from __future__ import annotations

import logging
import math
import os
import random
import re
import shutil
import subprocess
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Optional

from .config import ConfigError, Gains, VideoSettings
from .providers import audio
from .schema import AssetManifest, Record
from .storage import write_record

log = logging.getLogger(__name__)

TIMELINE_TOLERANCE_S = 1e-6
XFADE_NAMES = {"slide_in": "coverleft", "slide_out": "revealleft"}


class CompositionError(Exception):
    pass


class MissingAssetError(CompositionError):
    def __init__(self, path: str):
        self.path = path
        super().__init__(f"missing asset file: {path}")


class EncodeError(CompositionError):
    pass


# ---------------------------------------------------------------------------
# Records
# ---------------------------------------------------------------------------


class Motion(Record):
    kind: Literal["pan", "zoom_in", "zoom_out"]
    magnitude: float
    direction: Literal["left", "right", "up", "down", "center"]


class Transition(Record):
    kind: Literal["slide_in", "slide_out"]
    duration_s: float


class SoundFit(Record):
    source_duration_s: float
    loop_count: int
    trim_to_s: float
    fade_ms: float = 30.0

    def violations(self) -> list[str]:
        out = []
        if self.loop_count != math.ceil(self.trim_to_s / self.source_duration_s):
            out.append("loop_count must equal ceil(trim_to_s / source_duration_s)")
        if self.loop_count * self.source_duration_s < self.trim_to_s:
            out.append("looped source is shorter than trim_to_s")
        return out


class TimelineSegment(Record):
    page_index: int
    start_s: float
    duration_s: float
    image: str
    speech: str
    sound: Optional[str] = None
    sound_fit: Optional[SoundFit] = None
    motion: Motion
    transition_out: Optional[Transition] = None


class MusicTrack(Record):
    location: str
    start_s: float = 0.0
    end_s: float
    fit: SoundFit


class TimelinePlan(Record):
    seed: int
    total_s: float
    segments: tuple[TimelineSegment, ...]
    music: Optional[MusicTrack] = None

    def violations(self) -> list[str]:
        out = []
        durations = [s.duration_s for s in self.segments]
        if any(d <= 0 for d in durations):
            out.append("every segment needs a positive duration")
        for i, seg in enumerate(self.segments):
            if abs(seg.start_s - math.fsum(durations[:i])) > TIMELINE_TOLERANCE_S:
                out.append(f"segment {seg.page_index} does not start at the prefix sum of durations")
                break
        if abs(self.total_s - math.fsum(durations)) > TIMELINE_TOLERANCE_S:
            out.append("total_s differs from the sum of durations")
        if self.transitions() != max(len(self.segments) - 1, 0):
            out.append("there must be exactly one transition between consecutive segments")
        if self.segments and self.segments[-1].transition_out is not None:
            out.append("the last segment has no outgoing transition")
        return out

    def transitions(self) -> int:
        return sum(1 for s in self.segments if s.transition_out is not None)


class MixPlan(Record):
    gains: dict[str, float]
    peaks: dict[str, float]
    ceiling_dbfs: float
    ceiling_linear: float
    estimated_peak: float
    normalize_gain: Optional[float] = None

    def violations(self) -> list[str]:
        out = []
        if any(not 0 < g <= 1 for g in self.gains.values()):
            out.append("gains must be in (0, 1]")
        peak = self.estimated_peak * (self.normalize_gain or 1.0)
        if peak > self.ceiling_linear + 1e-12:
            out.append("post-mix peak exceeds the ceiling")
        return out


class EncoderStep(Record):
    name: str
    argv: tuple[str, ...]
    outputs: tuple[str, ...]
    after: tuple[str, ...] = ()


class EncoderPlan(Record):
    total_s: float
    output: str = "video.mp4"
    intermediates: tuple[str, ...]
    steps: tuple[EncoderStep, ...]


# ---------------------------------------------------------------------------
# Planning
# ---------------------------------------------------------------------------


def fit_sound(source_duration_s: float, t: float, fade_ms: float = 30.0) -> SoundFit:
    """Loop ``source`` enough times to cover ``t`` seconds, then cut at ``t``."""
    if source_duration_s <= 0 or t <= 0:
        raise ValueError("fit_sound needs positive durations")
    return SoundFit(source_duration_s=source_duration_s, loop_count=math.ceil(t / source_duration_s),
                    trim_to_s=t, fade_ms=fade_ms)


def motion_params(seed: int, page_index: int, min_magnitude: float = 0.02, max_magnitude: float = 0.06) -> Motion:
    rng = random.Random(f"motion:{seed}:{page_index}")
    kind = rng.choice(("pan", "zoom_in", "zoom_out"))
    magnitude = min_magnitude + (max_magnitude - min_magnitude) * rng.random()
    direction = rng.choice(("left", "right", "up", "down")) if kind == "pan" else "center"
    return Motion(kind=kind, magnitude=magnitude, direction=direction)


def _transition_kind(seed: int, page_index: int) -> str:
    return random.Random(f"transition:{seed}:{page_index}").choice(("slide_in", "slide_out"))


def build_timeline(manifest: AssetManifest, seed: int, video: VideoSettings | None = None) -> TimelinePlan:
    video = video or VideoSettings()
    durations = []
    for asset in manifest.speech:
        if asset.duration_s <= 0:
            raise CompositionError(f"speech for page {asset.page_index} has zero duration")
        durations.append(asset.duration_s)
    if len(manifest.images) != len(durations):
        raise CompositionError(f"{len(manifest.images)} images but {len(durations)} speech clips")

    segments = []
    for i, (image, speech) in enumerate(zip(manifest.images, manifest.speech)):
        page = speech.page_index
        t = durations[i]
        transition = None
        if i + 1 < len(durations):
            d = min(video.transition_s, t, durations[i + 1])
            transition = Transition(kind=_transition_kind(seed, page), duration_s=d)
        sound = manifest.sound_for(page)
        segments.append(TimelineSegment(
            page_index=page,
            start_s=math.fsum(durations[:i]),
            duration_s=t,
            image=image.location,
            speech=speech.location,
            sound=sound.location if sound else None,
            sound_fit=fit_sound(sound.duration_s, t, video.loop_fade_ms) if sound else None,
            motion=motion_params(seed, page, video.motion_min, video.motion_max),
            transition_out=transition,
        ))
    total = math.fsum(durations)
    music = None
    if manifest.music is not None:
        music = MusicTrack(location=manifest.music.location, end_s=total,
                           fit=fit_sound(manifest.music.duration_s, total, video.loop_fade_ms))
    return TimelinePlan(seed=seed, total_s=total, segments=tuple(segments), music=music).check()


def _track_peak(root: Path | None, locations: list[str]) -> float:
    if root is None:
        return 1.0
    peak = 0.0
    for loc in locations:
        try:
            peak = max(peak, audio.wav_peak((root / loc).read_bytes()))
        except (OSError, ValueError, EOFError) as exc:
            log.warning("cannot measure peak of %s (%s); assuming full scale", loc, exc)
            peak = 1.0
    return peak


def build_mix(manifest: AssetManifest, gains: Gains | None = None, *, ceiling_dbfs: float = -1.0,
              root: str | Path | None = None) -> MixPlan:
    """Per-track gains plus a static normalisation step when the worst case exceeds the ceiling.

    The worst-case peak is the sum of gain × measured track peak (full scale
    when ``root`` is not given), so scaling by ceiling / worst-case bounds
    the mixed signal.
    """
    gains = gains or Gains()
    tracks = {
        "speech": [a.location for a in manifest.speech],
        "sound": [a.location for a in manifest.sounds],
        "music": [manifest.music.location] if manifest.music else [],
    }
    present = {k: v for k, v in tracks.items() if v}
    chosen, peaks = {}, {}
    base = Path(root) if root is not None else None
    for track, locations in present.items():
        g = getattr(gains, track)
        if not 0 < g <= 1:
            raise ConfigError(f"gain for {track} must be in (0, 1], got {g}")
        chosen[track] = g
        peaks[track] = _track_peak(base, locations)
    ceiling = 10 ** (ceiling_dbfs / 20)
    estimated = math.fsum(chosen[k] * peaks[k] for k in chosen)
    normalize = ceiling / estimated if estimated > ceiling else None
    return MixPlan(gains=chosen, peaks=peaks, ceiling_dbfs=ceiling_dbfs, ceiling_linear=ceiling,
                   estimated_peak=estimated, normalize_gain=normalize).check()


def _n(x: float) -> str:
    return f"{x:.6f}"


def _clip_bounds(timeline: TimelinePlan) -> list[tuple[float, float]]:
    """Half-overlaps (before, after) each segment lends to its transitions."""
    segs = timeline.segments
    out = []
    for i, seg in enumerate(segs):
        before = segs[i - 1].transition_out.duration_s / 2 if i > 0 else 0.0
        after = seg.transition_out.duration_s / 2 if seg.transition_out else 0.0
        out.append((before, after))
    return out


def _zoompan(motion: Motion, frames: int) -> tuple[str, str, str]:
    m = _n(motion.magnitude)
    progress = f"on/{max(frames - 1, 1)}"
    centered_x, centered_y = "iw/2-(iw/zoom/2)", "ih/2-(ih/zoom/2)"
    if motion.kind == "zoom_in":
        return f"1+{m}*{progress}", centered_x, centered_y
    if motion.kind == "zoom_out":
        return f"1+{m}*(1-{progress})", centered_x, centered_y
    slack_x, slack_y = "(iw-iw/zoom)", "(ih-ih/zoom)"
    x, y = f"{slack_x}/2", f"{slack_y}/2"
    if motion.direction == "right":
        x = f"{slack_x}*{progress}"
    elif motion.direction == "left":
        x = f"{slack_x}*(1-{progress})"
    elif motion.direction == "down":
        y = f"{slack_y}*{progress}"
    else:
        y = f"{slack_y}*(1-{progress})"
    return f"1+{m}", x, y


def _audio_chain(label: str, fit: SoundFit, sample_rate: int, fmt: str) -> str:
    fade = min(fit.fade_ms / 1000, fit.source_duration_s / 2)
    samples = int(round(fit.source_duration_s * sample_rate))
    chain = f"[{label}]{fmt}"
    if fit.loop_count > 1 and fade > 0:
        # equal-power fades on both sides of every loop joint
        chain += (f",afade=t=in:d={_n(fade)}:curve=qsin"
                  f",afade=t=out:st={_n(fit.source_duration_s - fade)}:d={_n(fade)}:curve=qsin")
    if fit.loop_count > 1:
        chain += f",aloop=loop={fit.loop_count - 1}:size={samples}"
    return chain + f",atrim=duration={_n(fit.trim_to_s)},apad=whole_dur={_n(fit.trim_to_s)}"


def build_encoder_plan(timeline: TimelinePlan, mix: MixPlan, video: VideoSettings | None = None, *,
                       root: str | Path = ".", check_files: bool = True, render_dir: str = "render") -> EncoderPlan:
    video = video or VideoSettings()
    root = Path(root)
    if check_files:
        needed = [p for s in timeline.segments for p in (s.image, s.speech, s.sound) if p]
        if timeline.music:
            needed.append(timeline.music.location)
        for loc in needed:
            if not (root / loc).is_file():
                raise MissingAssetError(loc)

    W, H, fps, sr = video.width, video.height, video.fps, video.sample_rate
    codec = ["-c:v", "libx264", "-preset", "veryfast", "-crf", "20", "-pix_fmt", "yuv420p", "-r", str(fps)]
    steps: list[EncoderStep] = []
    intermediates: list[str] = []

    seg_files = []
    for seg, (before, after) in zip(timeline.segments, _clip_bounds(timeline)):
        clip = before + seg.duration_s + after
        frames = max(1, math.ceil(clip * fps - 1e-9))
        z, x, y = _zoompan(seg.motion, frames)
        graph = (f"[0:v]scale={2 * W}:{2 * H}:force_original_aspect_ratio=increase,crop={2 * W}:{2 * H},setsar=1,"
                 f"zoompan=z='{z}':x='{x}':y='{y}':d={frames}:s={W}x{H}:fps={fps},format=yuv420p[v]")
        out = f"{render_dir}/segment_{seg.page_index:03d}.mp4"
        seg_files.append(out)
        steps.append(EncoderStep(
            name=f"segment_{seg.page_index:03d}",
            argv=("-y", "-v", "error", "-i", seg.image, "-filter_complex", graph, "-map", "[v]",
                  "-frames:v", str(frames), *codec, "-an", out),
            outputs=(out,),
        ))
    intermediates += seg_files

    video_only = f"{render_dir}/video_only.mp4"
    inputs: list[str] = []
    for f in seg_files:
        inputs += ["-i", f]
    prep = [f"[{i}:v]settb=AVTB,fps={fps},format=yuv420p[s{i}]" for i in range(len(seg_files))]
    if len(seg_files) == 1:
        graph = f"{prep[0]};[s0]null[vout]"
    elif all(s.transition_out.duration_s > 0 for s in timeline.segments[:-1]):
        links, prev = [], "s0"
        for k, seg in enumerate(timeline.segments[1:], start=1):
            tr = timeline.segments[k - 1].transition_out
            offset = seg.start_s - tr.duration_s / 2
            label = "vout" if k == len(seg_files) - 1 else f"x{k}"
            links.append(f"[{prev}][s{k}]xfade=transition={XFADE_NAMES[tr.kind]}:duration={_n(tr.duration_s)}"
                         f":offset={_n(offset)}[{label}]")
            prev = label
        graph = ";".join(prep + links)
    else:
        graph = ";".join(prep) + ";" + "".join(f"[s{i}]" for i in range(len(seg_files))) + \
            f"concat=n={len(seg_files)}:v=1:a=0[vout]"
    steps.append(EncoderStep(
        name="video",
        argv=("-y", "-v", "error", *inputs, "-filter_complex", graph, "-map", "[vout]", *codec, "-an", video_only),
        outputs=(video_only,),
        after=tuple(s.name for s in steps),
    ))
    intermediates.append(video_only)

    fmt = f"aformat=sample_fmts=fltp:sample_rates={sr}:channel_layouts=mono"
    a_inputs: list[str] = []
    parts: list[str] = []
    mixed: list[str] = []

    def add_input(path: str) -> str:
        a_inputs.extend(["-i", path])
        return f"{len(a_inputs) // 2 - 1}:a"

    if "speech" in mix.gains:
        labels = []
        for seg in timeline.segments:
            idx = add_input(seg.speech)
            parts.append(f"[{idx}]{fmt},atrim=duration={_n(seg.duration_s)},apad=whole_dur={_n(seg.duration_s)}"
                         f"[sp{seg.page_index}]")
            labels.append(f"[sp{seg.page_index}]")
        parts.append("".join(labels) + f"concat=n={len(labels)}:v=0:a=1,volume={_n(mix.gains['speech'])}[speech]")
        mixed.append("[speech]")
    if "sound" in mix.gains:
        labels = []
        for seg in timeline.segments:
            if seg.sound and seg.sound_fit:
                parts.append(_audio_chain(add_input(seg.sound), seg.sound_fit, sr, fmt) + f"[fx{seg.page_index}]")
            else:
                parts.append(f"anullsrc=r={sr}:cl=mono,atrim=duration={_n(seg.duration_s)}[fx{seg.page_index}]")
            labels.append(f"[fx{seg.page_index}]")
        parts.append("".join(labels) + f"concat=n={len(labels)}:v=0:a=1,volume={_n(mix.gains['sound'])}[sound]")
        mixed.append("[sound]")
    if "music" in mix.gains and timeline.music is not None:
        parts.append(_audio_chain(add_input(timeline.music.location), timeline.music.fit, sr, fmt)
                     + f",volume={_n(mix.gains['music'])}[music]")
        mixed.append("[music]")
    if not mixed:
        parts.append(f"anullsrc=r={sr}:cl=mono,atrim=duration={_n(timeline.total_s)}[silence]")
        mixed.append("[silence]")
    tail = f"amix=inputs={len(mixed)}:normalize=0:duration=longest" if len(mixed) > 1 else "anull"
    if mix.normalize_gain is not None:
        tail += f",volume={_n(mix.normalize_gain)}"
    parts.append("".join(mixed) + tail + f",atrim=duration={_n(timeline.total_s)}[aout]")
    audio_out = f"{render_dir}/audio.wav"
    steps.append(EncoderStep(
        name="audio",
        argv=("-y", "-v", "error", *a_inputs, "-filter_complex", ";".join(parts), "-map", "[aout]",
              "-ac", "1", "-ar", str(sr), "-c:a", "pcm_s16le", audio_out),
        outputs=(audio_out,),
    ))
    intermediates.append(audio_out)

    steps.append(EncoderStep(
        name="mux",
        argv=("-y", "-v", "error", "-i", video_only, "-i", audio_out, "-map", "0:v", "-map", "1:a",
              "-c:v", "copy", "-c:a", "aac", "-b:a", "128k", "-t", _n(timeline.total_s),
              "-movflags", "+faststart", "video.mp4"),
        outputs=("video.mp4",),
        after=("video", "audio"),
    ))
    return EncoderPlan(total_s=timeline.total_s, intermediates=tuple(intermediates), steps=tuple(steps))


# ---------------------------------------------------------------------------
# Execution
# ---------------------------------------------------------------------------


def find_encoder(explicit: str | None = None) -> str | None:
    """Locate an ffmpeg binary: explicit path, $STORYPIPE_FFMPEG, PATH, then imageio-ffmpeg."""
    for candidate in (explicit, os.environ.get("STORYPIPE_FFMPEG")):
        if candidate:
            return candidate
    found = shutil.which("ffmpeg")
    if found:
        return found
    try:
        import imageio_ffmpeg
    except ImportError:
        return None
    try:
        return imageio_ffmpeg.get_ffmpeg_exe()
    except RuntimeError:
        return None


def _run_step(encoder: str, step: EncoderStep, workdir: Path) -> None:
    proc = subprocess.run([encoder, *step.argv], cwd=workdir, capture_output=True, text=True)
    if proc.returncode != 0:
        raise EncodeError(f"encoder step {step.name} failed ({proc.returncode}): {proc.stderr.strip()[-800:]}")


def execute_plan(plan: EncoderPlan, workdir: str | Path, encoder: str, workers: int = 4) -> Path:
    """Run the plan's steps, independent ones concurrently, and return the video path."""
    workdir = Path(workdir)
    for out in (*plan.intermediates, plan.output):
        (workdir / out).parent.mkdir(parents=True, exist_ok=True)
    done: set[str] = set()
    pending = list(plan.steps)
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        while pending:
            ready = [s for s in pending if set(s.after) <= done]
            if not ready:
                raise CompositionError("encoder plan has unsatisfiable step dependencies")
            for fut in [pool.submit(_run_step, encoder, s, workdir) for s in ready]:
                fut.result()
            done.update(s.name for s in ready)
            pending = [s for s in pending if s.name not in done]
    return workdir / plan.output


_TIME = re.compile(r"time=(\d+):(\d+):(\d+(?:\.\d+)?)")


def probe_duration(encoder: str, path: str | Path) -> float:
    """Decode the whole file and return its duration in seconds."""
    proc = subprocess.run([encoder, "-v", "info", "-i", str(path), "-f", "null", "-"],
                          capture_output=True, text=True)
    if proc.returncode != 0:
        raise EncodeError(f"cannot decode {path}: {proc.stderr.strip()[-400:]}")
    matches = _TIME.findall(proc.stderr)
    if not matches:
        raise EncodeError(f"no duration reported for {path}")
    h, m, s = matches[-1]
    return int(h) * 3600 + int(m) * 60 + float(s)


@dataclass
class Composition:
    timeline: TimelinePlan
    mix: MixPlan
    plan: EncoderPlan
    video: Optional[Path]


def compose(manifest: AssetManifest, workdir: str | Path, seed: int, *, video: VideoSettings | None = None,
            gains: Gains | None = None, render: bool = True, encoder: str | None = None,
            workers: int = 4) -> Composition:
    """Write ``timeline.json`` and ``encoder_plan.json`` and, if asked, render ``video.mp4``."""
    workdir = Path(workdir)
    video = video or VideoSettings()
    timeline = build_timeline(manifest, seed, video)
    mix = build_mix(manifest, gains, ceiling_dbfs=video.ceiling_dbfs, root=workdir)
    plan = build_encoder_plan(timeline, mix, video, root=workdir)
    write_record(workdir / "timeline.json", timeline)
    write_record(workdir / "encoder_plan.json", plan)
    out = None
    if render:
        binary = find_encoder(encoder)
        if binary is None:
            raise CompositionError("no media encoder found; install ffmpeg, set STORYPIPE_FFMPEG, or disable render")
        out = execute_plan(plan, workdir, binary, workers)
    return Composition(timeline=timeline, mix=mix, plan=plan, video=out)
