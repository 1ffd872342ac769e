"""Objective evaluation: topic sets, rubric grading, modality alignment and report tables.

Report cells are means over topics within a topic type; the ``All`` row is
the mean of the type cells.  Values are rounded half-up to the column's
display precision (2 decimals for rubric criteria, 3 for alignment).
"""

from __future__ import annotations

import json
import logging
import re
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from statistics import fmean
from typing import Iterable, Literal, Mapping, Optional, Sequence

from . import templates
from .parsing import extract_json
from .providers.chat import ChatClient, ChatRequest
from .providers.embedding import EmbeddingProvider, Payload, cosine_similarity
from .schema import (
    STANDARD_TOPIC_TYPES,
    AssetManifest,
    PromptSet,
    Record,
    Story,
    TopicType,
    WritingMethod,
    decode_record,
    to_document,
)
from .storage import atomic_write_text, read_record, write_record

log = logging.getLogger(__name__)

Criterion = Literal["attractiveness", "warmth", "education", "relevance", "coherence"]
Metric = Literal["I-T", "S-T", "M-T", "I-S", "I-M"]
CRITERIA: tuple[str, ...] = ("attractiveness", "warmth", "education", "relevance", "coherence")
STANDARD_CRITERIA: tuple[str, ...] = ("attractiveness", "warmth", "education")
METRICS: tuple[str, ...] = ("I-T", "S-T", "M-T", "I-S", "I-M")
RUBRIC_PRECISION = 2
ALIGNMENT_PRECISION = 3
ALL_ROW = "All"


class EvaluationError(Exception):
    pass


class MissingCellError(EvaluationError):
    def __init__(self, cell: str):
        self.cell = cell
        super().__init__(f"missing report cell: {cell}")


class TopicEntry(Record):
    topic_type: TopicType
    topic: str


class TopicSet(Record):
    entries: tuple[TopicEntry, ...]

    def violations(self) -> list[str]:
        seen: set[tuple[str, str]] = set()
        out = []
        for e in self.entries:
            key = (e.topic_type, e.topic.strip().lower())
            if key in seen:
                out.append(f"duplicate topic {e.topic!r} in {e.topic_type}")
            seen.add(key)
        return out

    def by_type(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = defaultdict(list)
        for e in self.entries:
            out[e.topic_type].append(e.topic)
        return dict(out)


class ScoreRecord(Record):
    topic: str
    topic_type: TopicType = TopicType.CUSTOM
    method: WritingMethod
    criterion: Criterion
    score: int

    def violations(self) -> list[str]:
        return [] if 1 <= self.score <= 5 else [f"score {self.score} outside 1..5"]


class AlignmentRecord(Record):
    topic: str
    topic_type: TopicType = TopicType.CUSTOM
    method: WritingMethod
    metric: Metric
    value: float

    def violations(self) -> list[str]:
        return [] if -1.0 <= self.value <= 1.0 else [f"alignment value {self.value} outside [-1, 1]"]


class ReportRow(Record):
    group: str
    method: WritingMethod
    values: dict[str, float]


class ReportTable(Record):
    columns: tuple[str, ...]
    precision: dict[str, int]
    rows: tuple[ReportRow, ...]

    def cell(self, group: str, method: str, column: str) -> float:
        for row in self.rows:
            if row.group == group and row.method == method:
                if column in row.values:
                    return row.values[column]
        raise MissingCellError(f"{group} / {method} / {column}")

    def view(self, method: str) -> dict[str, dict[str, float]]:
        """``{group: {column: value}}`` for one method."""
        return {r.group: dict(r.values) for r in self.rows if r.method == method}


class CellComparison(Record):
    group: str
    column: str
    direct: float
    agent: float
    delta: float
    winner: Literal["story_agent", "direct", "tie"]


class Comparison(Record):
    cells: tuple[CellComparison, ...]


# ---------------------------------------------------------------------------
# Rounding and aggregation
# ---------------------------------------------------------------------------


def round_half_up(value: float, places: int) -> float:
    # strip binary noise first: 3.7874999999 should round like 3.7875
    cleaned = Decimal(repr(round(value, 9)))
    return float(cleaned.quantize(Decimal(1).scaleb(-places), rounding=ROUND_HALF_UP))


def precision_for(column: str) -> int:
    return ALIGNMENT_PRECISION if column in METRICS else RUBRIC_PRECISION


def aggregate_type_cells(cells: Mapping[str, float] | Sequence[float], places: int) -> float:
    """``All`` cell from per-type cells: their mean, rounded half-up."""
    values = list(cells.values()) if isinstance(cells, Mapping) else list(cells)
    if not values:
        raise EvaluationError("no type cells to aggregate")
    return round_half_up(fmean(values), places)


def _topic_means(records: Iterable[ScoreRecord | AlignmentRecord]) -> dict[tuple[str, str, str], dict[str, float]]:
    """``(type, method, column) -> {topic: mean}``."""
    buckets: dict[tuple[str, str, str, str], list[float]] = defaultdict(list)
    for r in records:
        column = r.criterion if isinstance(r, ScoreRecord) else r.metric
        value = float(r.score) if isinstance(r, ScoreRecord) else r.value
        buckets[(r.topic_type, r.method, column, r.topic)].append(value)
    out: dict[tuple[str, str, str], dict[str, float]] = defaultdict(dict)
    for (ttype, method, column, topic), values in buckets.items():
        out[(ttype, method, column)][topic] = fmean(values)
    return out


def aggregate_report(records: Iterable[ScoreRecord | AlignmentRecord], *,
                     types: Sequence[str] = tuple(STANDARD_TOPIC_TYPES),
                     methods: Sequence[str] = ("direct", "story_agent"),
                     columns: Sequence[str] | None = None) -> ReportTable:
    records = list(records)
    means = _topic_means(records)
    if columns is None:
        present = {k[2] for k in means}
        columns = [c for c in (*CRITERIA, *METRICS) if c in present]
    rows = []
    for method in methods:
        type_cells: dict[str, dict[str, float]] = {c: {} for c in columns}
        for ttype in types:
            values = {}
            for column in columns:
                topics = means.get((ttype, method, column))
                if not topics:
                    raise MissingCellError(f"{ttype} / {method} / {column}")
                type_cells[column][ttype] = fmean(topics.values())
                values[column] = round_half_up(type_cells[column][ttype], precision_for(column))
            rows.append(ReportRow(group=ttype, method=method, values=values))
        rows.append(ReportRow(group=ALL_ROW, method=method,
                              values={c: aggregate_type_cells(type_cells[c], precision_for(c)) for c in columns}))
    return ReportTable(columns=tuple(columns), precision={c: precision_for(c) for c in columns}, rows=tuple(rows))


def compare_methods(direct: ReportTable | Mapping[str, Mapping[str, float]],
                    agent: ReportTable | Mapping[str, Mapping[str, float]]) -> Comparison:
    """Cellwise ``agent - direct`` with a winner flag per cell."""
    d = direct.view("direct") if isinstance(direct, ReportTable) else direct
    a = agent.view("story_agent") if isinstance(agent, ReportTable) else agent
    if set(d) != set(a) or any(set(d[g]) != set(a[g]) for g in d):
        raise EvaluationError("reports have different shapes")
    cells = []
    for group in d:
        for column in d[group]:
            places = max(precision_for(column), _decimals(d[group][column]), _decimals(a[group][column]))
            delta = round_half_up(a[group][column] - d[group][column], places)
            winner = "story_agent" if delta > 0 else "direct" if delta < 0 else "tie"
            cells.append(CellComparison(group=group, column=column, direct=d[group][column],
                                        agent=a[group][column], delta=delta, winner=winner))
    return Comparison(cells=tuple(cells))


def _decimals(x: float) -> int:
    exponent = Decimal(repr(x)).normalize().as_tuple().exponent
    return max(0, -exponent) if isinstance(exponent, int) else 0


# ---------------------------------------------------------------------------
# Topics
# ---------------------------------------------------------------------------


def _parse_topic_list(reply: str) -> list[str]:
    try:
        data = extract_json(reply)
    except ValueError:
        data = [re.sub(r"^\s*(?:[-*]|\d+[.)])\s*", "", line) for line in reply.splitlines()]
    if isinstance(data, dict):
        data = next((v for v in data.values() if isinstance(v, list)), [])
    return [str(t).strip().strip('"') for t in data if str(t).strip()]


def generate_topics(llm: ChatClient, types: Sequence[str] = tuple(STANDARD_TOPIC_TYPES),
                    n_per_type: int = 25, *, max_reprompts: int = 3) -> TopicSet:
    if not types:
        raise EvaluationError("at least one topic type is required")
    if n_per_type < 1:
        raise EvaluationError("n_per_type must be positive")
    entries = []
    for ttype in types:
        topics: list[str] = []
        seen: set[str] = set()
        for attempt in range(max_reprompts + 1):
            need = n_per_type - len(topics)
            exclude = ("Do not repeat any of these topics:\n" + "\n".join(f"- {t}" for t in topics)) if topics else ""
            request = ChatRequest.build(templates.load("eval/topics.system.txt").strip(),
                                        templates.render("eval/topics.user.txt", count=need, topic_type=ttype,
                                                         exclude=exclude),
                                        purpose="topics")
            for topic in _parse_topic_list(llm.chat(request)):
                key = topic.lower()
                if key in seen:
                    log.info("duplicate topic %r for %s dropped", topic, ttype)
                    continue
                if len(topics) < n_per_type:
                    seen.add(key)
                    topics.append(topic)
            if len(topics) == n_per_type:
                break
        else:
            raise EvaluationError(f"only {len(topics)} unique topics for {ttype} after {max_reprompts} reprompts")
        entries += [TopicEntry(topic_type=ttype, topic=t) for t in topics]
    return TopicSet(entries=tuple(entries)).check()


# ---------------------------------------------------------------------------
# Grading
# ---------------------------------------------------------------------------

_SCORE = re.compile(r"score\s*[:=]?\s*(-?\d+)", re.IGNORECASE)


def parse_score(reply: str) -> int | None:
    text = reply.strip()
    m = _SCORE.search(text) or re.fullmatch(r"(-?\d+)\s*(?:/\s*5)?\.?", text)
    if m is None:
        return None
    value = int(m.group(1))
    return value if 1 <= value <= 5 else None


def grade_story(judge: ChatClient, story: Story | str, criterion: str, rubric: str | None = None, *,
                topic: str = "", topic_type: str = "custom", method: str = "story_agent") -> ScoreRecord:
    rubric = templates.load_rubric(criterion) if rubric is None else rubric
    if not rubric.strip():
        raise EvaluationError("rubric text must be non-empty")
    text = "\n\n".join(story.texts) if isinstance(story, Story) else story
    user = templates.render("eval/judge.user.txt", topic=topic, story=text, criterion=criterion, rubric=rubric)
    system = templates.load("eval/judge.system.txt").strip()
    reply = judge.chat(ChatRequest.build(system, user, purpose="judge"))
    score = parse_score(reply)
    if score is None:
        note = f"\n\nYour previous answer {reply.strip()[:80]!r} was not a valid score. Answer with \"Score: N\", N in 1..5."
        reply = judge.chat(ChatRequest.build(system, user + note, purpose="judge"))
        score = parse_score(reply)
    if score is None:
        raise EvaluationError(f"judge gave no valid {criterion} score for {topic!r}: {reply.strip()[:80]!r}")
    return ScoreRecord(topic=topic, topic_type=topic_type, method=method, criterion=criterion, score=score)


# ---------------------------------------------------------------------------
# Alignment
# ---------------------------------------------------------------------------


def _prompt_texts(prompts: Mapping[str, PromptSet] | None) -> dict[tuple[str, int], str]:
    out = {}
    for modality, ps in (prompts or {}).items():
        for p in ps.prompts:
            out[(modality, p.page_index)] = p.text
    return out


def score_alignment(manifest: AssetManifest, story: Story, embed: EmbeddingProvider, *, root: str | Path = ".",
                    prompts: Mapping[str, PromptSet] | None = None, metrics: Sequence[str] = METRICS,
                    text_source: Literal["prompt", "page"] = "prompt", topic: str = "",
                    topic_type: str = "custom", method: str = "story_agent") -> list[AlignmentRecord]:
    """Per-topic alignment: cosine per page, then the mean over pages.

    The text side is the generation prompt of each asset (or the page text
    when ``text_source="page"`` or no prompt is known).  Metrics whose
    assets are missing are skipped with a warning.
    """
    root = Path(root)
    texts = _prompt_texts(prompts)
    cache: dict[tuple[str, str], object] = {}

    def vec(space: str, payload: Payload):
        key = (space, payload.digest())
        if key not in cache:
            cache[key] = embed.embed(space, payload)
        return cache[key]

    def text_for(modality: str, page: int) -> str:
        if text_source == "prompt" and (modality, page) in texts:
            return texts[(modality, page)]
        return "\n".join(story.texts) if modality == "music" else story.page(page).text

    def media(path: str, kind: str) -> Payload | None:
        full = root / path
        if not full.is_file():
            return None
        return Payload.image(full) if kind == "image" else Payload.audio(full)

    pairs: dict[str, list[tuple[str, Payload, Payload]]] = defaultdict(list)
    images = {a.page_index: media(a.location, "image") for a in manifest.images}
    sounds = {a.page_index: media(a.location, "audio") for a in manifest.sounds}
    music = media(manifest.music.location, "audio") if manifest.music else None
    for page, img in sorted(images.items()):
        if img is not None:
            pairs["I-T"].append(("image_text", img, Payload.text(text_for("image", page))))
            if music is not None:
                pairs["I-M"].append(("audio_image", music, img))
        snd = sounds.get(page)
        if snd is not None and img is not None:
            pairs["I-S"].append(("audio_image", snd, img))
    for page, snd in sorted(sounds.items()):
        if snd is not None:
            pairs["S-T"].append(("audio_text", snd, Payload.text(text_for("sound", page))))
    if music is not None:
        pairs["M-T"].append(("audio_text", music, Payload.text(text_for("music", 0))))

    out = []
    for metric in metrics:
        if not pairs.get(metric):
            log.warning("skipping %s for %r: required assets are missing", metric, topic)
            continue
        values = [cosine_similarity(vec(space, a), vec(space, b)) for space, a, b in pairs[metric]]
        out.append(AlignmentRecord(topic=topic, topic_type=topic_type, method=method, metric=metric,
                                   value=max(-1.0, min(1.0, fmean(values)))))
    return out


# ---------------------------------------------------------------------------
# Outputs
# ---------------------------------------------------------------------------


def render_markdown(report: ReportTable) -> str:
    labels = {"attractiveness": "A", "warmth": "W", "education": "E", "relevance": "Relevance",
              "coherence": "Coherence"}
    header = ["Topic", "Method", *[labels.get(c, c) for c in report.columns]]
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    method_names = {"direct": "Direct", "story_agent": "Story Agent"}
    for row in report.rows:
        cells = [f"{row.values[c]:.{report.precision[c]}f}" for c in report.columns]
        lines.append("| " + " | ".join([row.group, method_names.get(row.method, row.method), *cells]) + " |")
    return "\n".join(lines) + "\n"


def write_scores(path: str | Path, records: Iterable[Record]) -> None:
    body = "".join(json.dumps(to_document(r), ensure_ascii=False) + "\n" for r in records)
    atomic_write_text(path, body)


def read_scores(path: str | Path) -> list[ScoreRecord | AlignmentRecord]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            out.append(decode_record(line))
    return out


def write_report(out_dir: str | Path, report: ReportTable, comparison: Optional[Comparison] = None) -> None:
    out_dir = Path(out_dir)
    write_record(out_dir / "report.json", report)
    text = render_markdown(report)
    if comparison is not None:
        text += "\n| Topic | Column | Delta | Winner |\n|---|---|---|---|\n"
        text += "".join(f"| {c.group} | {c.column} | {c.delta:+.{precision_for(c.column)}f} | {c.winner} |\n" for c in comparison.cells)
    atomic_write_text(out_dir / "report.md", text)


# ---------------------------------------------------------------------------
# Batch evaluation
# ---------------------------------------------------------------------------


def _slug(text: str) -> str:
    return re.sub(r"[^a-z0-9]+", "-", text.lower()).strip("-")[:48] or "topic"


def evaluate(config, topics: TopicSet, out_dir: str | Path, *, methods: Sequence[str] = ("direct", "story_agent"),
             criteria: Sequence[str] = STANDARD_CRITERIA, metrics: Sequence[str] = (), num_pages: int = 4,
             providers=None, text_source: Literal["prompt", "page"] = "prompt") -> ReportTable:
    """Write a story per (topic, method), grade it, optionally score alignment, and write the report.

    With ``metrics`` non-empty each story runs through the full asset
    pipeline (rendering disabled) under ``out_dir/runs``.
    """
    from .pipeline import Pipeline
    from .providers import build_providers
    from .schema import StorySetting
    from .story_agent import write_story

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    providers = providers or build_providers(config, cache_root=config.cache_dir or out_dir / "cache")
    jobs = [(e, m) for e in topics.entries for m in methods]

    def one(job) -> list[Record]:
        entry, method = job
        setting = StorySetting(topic=entry.topic, topic_type=entry.topic_type, num_pages=num_pages,
                               requirements=("The story suits young children.",))
        cfg = config.model_copy(update={"method": method, "render": False})
        records: list[Record] = []
        if metrics:
            workdir = out_dir / "runs" / method / f"{entry.topic_type}-{_slug(entry.topic)}"
            result = Pipeline(cfg, workdir, providers=providers).run(setting)
            story = read_record(workdir / "story.json", Story)
            prompts = {m: read_record(workdir / "prompts" / f"{m}.json", PromptSet)
                       for m in ("image", "sound", "music") if (workdir / "prompts" / f"{m}.json").is_file()}
            records += score_alignment(result.manifest, story, providers.embed, root=workdir, prompts=prompts,
                                       metrics=metrics, text_source=text_source, topic=entry.topic,
                                       topic_type=entry.topic_type, method=method)
        else:
            story = write_story(providers.llm, setting, method, dialogue_turns=cfg.dialogue_turns,
                                chapter_length=cfg.chapter_length).story
        for criterion in criteria:
            records.append(grade_story(providers.judge, story, criterion, topic=entry.topic,
                                       topic_type=entry.topic_type, method=method))
        return records

    with ThreadPoolExecutor(max_workers=max(1, config.workers)) as pool:
        records = [r for batch in pool.map(one, jobs) for r in batch]
    write_scores(out_dir / "scores.jsonl", records)
    types = list(dict.fromkeys(e.topic_type for e in topics.entries))
    report = aggregate_report(records, types=types, methods=methods, columns=[*criteria, *metrics])
    comparison = compare_methods(report, report) if set(methods) == {"direct", "story_agent"} else None
    write_report(out_dir, report, comparison)
    return report
