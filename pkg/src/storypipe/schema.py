"""Records exchanged between agents and persisted as pipeline artifacts.

Every record is an immutable pydantic model.  Type checks happen on
construction; the domain invariants (contiguous page indices, turn bounds,
...) are checked by :meth:`Record.violations` so that callers can build a
record, inspect what is wrong with it, and only reject it at a boundary.
:func:`decode_record` is such a boundary and always enforces them.

Documents are JSON objects carrying ``schema_version`` and ``type`` next to
the record's own fields.
"""

from __future__ import annotations

import json
import re
from enum import Enum
from typing import Any, ClassVar, Literal, Optional

import pydantic
from pydantic import BaseModel, ConfigDict

SCHEMA_VERSION = 1

_REGISTRY: dict[str, type["Record"]] = {}


class SchemaError(Exception):
    """Base class for document problems."""


class ParseError(SchemaError):
    """The document is not well-formed JSON or lacks the envelope."""


class RecordValidationError(SchemaError):
    """The document parsed but the record violates its type or invariants."""

    def __init__(self, type_id: str, violations: list[str]):
        self.type_id = type_id
        self.violations = list(violations)
        super().__init__(f"{type_id}: " + "; ".join(self.violations))


class Record(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid", use_enum_values=True)

    type_id: ClassVar[str] = ""

    def __init_subclass__(cls, **kwargs: Any) -> None:
        super().__init_subclass__(**kwargs)
        cls.type_id = cls.__name__
        _REGISTRY[cls.__name__] = cls

    def violations(self) -> list[str]:
        return []

    def check(self) -> "Record":
        problems = self.violations()
        if problems:
            raise RecordValidationError(self.type_id, problems)
        return self


def record_type(type_id: str) -> type[Record]:
    try:
        return _REGISTRY[type_id]
    except KeyError:
        raise SchemaError(f"unknown record type {type_id!r}") from None


# ---------------------------------------------------------------------------
# Enumerations
# ---------------------------------------------------------------------------


class TopicType(str, Enum):
    SELF_GROWING = "self_growing"
    FAMILY_FRIENDSHIP = "family_friendship"
    ENVIRONMENTS = "environments"
    KNOWLEDGE_LEARNING = "knowledge_learning"
    CUSTOM = "custom"


STANDARD_TOPIC_TYPES = (
    TopicType.SELF_GROWING.value,
    TopicType.FAMILY_FRIENDSHIP.value,
    TopicType.ENVIRONMENTS.value,
    TopicType.KNOWLEDGE_LEARNING.value,
)


class WritingMethod(str, Enum):
    DIRECT = "direct"
    STORY_AGENT = "story_agent"


Modality = Literal["image", "speech", "sound", "music"]
PromptModality = Literal["image", "sound", "music"]


def _contiguous(indices: list[int]) -> bool:
    return indices == list(range(1, len(indices) + 1))


# ---------------------------------------------------------------------------
# Story artifacts
# ---------------------------------------------------------------------------


class StorySetting(Record):
    topic: str
    topic_type: TopicType = TopicType.CUSTOM
    audience: str = "children 4-8"
    num_pages: int
    requirements: tuple[str, ...]
    main_role_hints: Optional[str] = None

    def violations(self) -> list[str]:
        out = []
        if not self.topic.strip():
            out.append("topic must be non-empty")
        if self.num_pages < 1:
            out.append("num_pages ≥ 1")
        if not self.requirements:
            out.append("requirements must be non-empty")
        elif any(not r.strip() for r in self.requirements):
            out.append("requirements must not contain empty entries")
        return out


def validate_setting(setting: StorySetting) -> list[str]:
    """Return every violated invariant; an empty list means the setting is ok."""
    return setting.violations()


class DialogueTurn(Record):
    question: str
    answer: str


class DialogueTranscript(Record):
    turns: tuple[DialogueTurn, ...] = ()
    max_turns: int

    def violations(self) -> list[str]:
        out = []
        if self.max_turns < 1:
            out.append("max_turns must be positive")
        if len(self.turns) > self.max_turns:
            out.append(f"{len(self.turns)} turns exceed max_turns={self.max_turns}")
        for i, turn in enumerate(self.turns, start=1):
            if not turn.question.strip() or not turn.answer.strip():
                out.append(f"turn {i} has an empty question or answer")
        return out


class Chapter(Record):
    index: int
    synopsis: str


class Outline(Record):
    chapters: tuple[Chapter, ...]

    def violations(self) -> list[str]:
        out = []
        if not self.chapters:
            out.append("outline has no chapters")
        if not _contiguous([c.index for c in self.chapters]):
            out.append("non-contiguous indices")
        if any(not c.synopsis.strip() for c in self.chapters):
            out.append("empty chapter synopsis")
        return out


class Page(Record):
    index: int
    text: str


class Story(Record):
    pages: tuple[Page, ...]
    method: WritingMethod = WritingMethod.STORY_AGENT

    def violations(self) -> list[str]:
        out = []
        if not self.pages:
            out.append("story has no pages")
        if not _contiguous([p.index for p in self.pages]):
            out.append("non-contiguous indices")
        for p in self.pages:
            if not p.text.strip():
                out.append(f"page {p.index} is empty")
        return out

    @property
    def texts(self) -> list[str]:
        return [p.text for p in self.pages]

    def page(self, index: int) -> Page:
        if not 1 <= index <= len(self.pages):
            raise IndexError(f"story has no page {index}")
        return self.pages[index - 1]

    @classmethod
    def from_texts(cls, texts: list[str], method: WritingMethod | str) -> "Story":
        return cls(
            pages=tuple(Page(index=i, text=t) for i, t in enumerate(texts, start=1)),
            method=method,
        )


class Role(Record):
    name: str
    description: str


class RoleTable(Record):
    roles: tuple[Role, ...] = ()

    def violations(self) -> list[str]:
        out = []
        names = [r.name for r in self.roles]
        if len(set(names)) != len(names):
            out.append("role names must be unique")
        for r in self.roles:
            if not r.name.strip():
                out.append("empty role name")
            if not r.description.strip():
                out.append(f"role {r.name!r} has an empty description")
        return out


class RevisionExchange(Record):
    turn: int
    candidate: str
    verdict: Literal["passed", "revise"]
    suggestion: str = ""

    def violations(self) -> list[str]:
        out = []
        if self.turn < 1:
            out.append("turn must be 1-based")
        if self.verdict == "revise" and not self.suggestion.strip():
            out.append("revise verdict needs a suggestion")
        return out


def _history_violations(history: tuple[RevisionExchange, ...]) -> list[str]:
    out = []
    for i, ex in enumerate(history, start=1):
        out.extend(ex.violations())
        if ex.turn != i:
            out.append("history turns must be numbered 1..n")
            break
        if ex.verdict == "passed" and i != len(history):
            out.append("a passed verdict must terminate the history")
            break
    return out


class ModalityPrompt(Record):
    modality: PromptModality
    page_index: int
    text: str
    history: tuple[RevisionExchange, ...] = ()

    def violations(self) -> list[str]:
        out = _history_violations(self.history)
        if self.modality == "music" and self.page_index != 0:
            out.append("music prompts use page_index 0")
        if self.modality != "music" and self.page_index < 1:
            out.append(f"{self.modality} prompts must reference a page")
        # "" is the no-effect signal for sound pages
        if self.modality != "sound" and not self.text.strip():
            out.append(f"{self.modality} prompt text is empty")
        return out


class Asset(Record):
    modality: Modality
    page_index: int
    location: str
    duration_s: float = 0.0
    width: Optional[int] = None
    height: Optional[int] = None
    provenance: Literal["generated", "retrieved"] = "generated"
    provider_id: str
    cache_key: str = ""

    def violations(self) -> list[str]:
        out = []
        if self.modality == "image":
            if not self.width or not self.height or self.width <= 0 or self.height <= 0:
                out.append("images need positive width and height")
        elif self.duration_s <= 0:
            out.append(f"{self.modality} asset for page {self.page_index} has duration_s ≤ 0")
        if self.duration_s < 0:
            out.append("duration_s must be nonnegative")
        return out


# ---------------------------------------------------------------------------
# Stage outputs
# ---------------------------------------------------------------------------


class StoryArtifacts(Record):
    story: Story
    dialogue: Optional[DialogueTranscript] = None
    outline: Optional[Outline] = None

    def violations(self) -> list[str]:
        out = self.story.violations()
        if self.dialogue is not None:
            out += self.dialogue.violations()
        if self.outline is not None:
            out += self.outline.violations()
            if len(self.outline.chapters) != len(self.story.pages):
                out.append("story pages must match outline chapters")
        return out


class PromptSet(Record):
    prompts: tuple[ModalityPrompt, ...]

    def violations(self) -> list[str]:
        return [v for p in self.prompts for v in p.violations()]


class AssetList(Record):
    assets: tuple[Asset, ...] = ()

    def violations(self) -> list[str]:
        return [v for a in self.assets for v in a.violations()]


class AssetManifest(Record):
    story: str = "story.json"
    num_pages: int
    images: tuple[Asset, ...]
    speech: tuple[Asset, ...]
    sounds: tuple[Asset, ...] = ()
    music: Optional[Asset] = None
    fingerprint: str = ""

    def violations(self) -> list[str]:
        out = []
        for a in (*self.images, *self.speech, *self.sounds, *([self.music] if self.music else [])):
            out += a.violations()
        if len(self.images) != self.num_pages:
            out.append(f"{len(self.images)} images for {self.num_pages} pages")
        if len(self.speech) != self.num_pages:
            out.append(f"{len(self.speech)} speech assets for {self.num_pages} pages")
        if len(self.sounds) > self.num_pages:
            out.append("more sound assets than pages")
        for label, assets in (("images", self.images), ("speech", self.speech)):
            if [a.page_index for a in assets] != list(range(1, len(assets) + 1)):
                out.append(f"{label} must cover pages 1..n in order")
        pages = [a.page_index for a in self.sounds]
        if len(set(pages)) != len(pages) or any(not 1 <= p <= self.num_pages for p in pages):
            out.append("sound assets must reference distinct existing pages")
        if self.music is not None and self.music.page_index != 0:
            out.append("music asset uses page_index 0")
        return out

    def sound_for(self, page_index: int) -> Asset | None:
        for a in self.sounds:
            if a.page_index == page_index:
                return a
        return None


class StageRecord(Record):
    status: Literal["pending", "done", "failed"] = "pending"
    output: Optional[dict[str, Any]] = None
    error: Optional[str] = None
    elapsed_s: Optional[float] = None


class PipelineState(Record):
    fingerprint: str
    stages: dict[str, StageRecord]

    def violations(self) -> list[str]:
        out = []
        for stage_id, rec in self.stages.items():
            if rec.status == "done":
                if rec.output is None:
                    out.append(f"stage {stage_id} is done but has no stored output")
                    continue
                try:
                    decode_value(rec.output)
                except SchemaError as exc:
                    out.append(f"stage {stage_id} output invalid: {exc}")
        return out


# ---------------------------------------------------------------------------
# Encoding
# ---------------------------------------------------------------------------


def to_document(record: Record) -> dict[str, Any]:
    body = record.model_dump(mode="json", exclude_none=True)
    return {"schema_version": SCHEMA_VERSION, "type": record.type_id, **body}


def encode_record(record: Record) -> str:
    """Serialize ``record`` as a deterministic, newline-terminated JSON document."""
    return json.dumps(to_document(record), indent=2, ensure_ascii=False) + "\n"


_MISSING_RE = re.compile(r"^Field required")


def _describe(err: dict[str, Any]) -> str:
    loc = ".".join(str(p) for p in err["loc"]) or "<root>"
    if _MISSING_RE.match(err["msg"]):
        return f"missing required field `{loc}`"
    return f"`{loc}`: {err['msg']}"


def decode_value(doc: dict[str, Any], expected: str | type[Record] | None = None) -> Record:
    if not isinstance(doc, dict):
        raise ParseError("document must be a JSON object")
    body = dict(doc)
    version = body.pop("schema_version", None)
    type_id = body.pop("type", None)
    if version is None or type_id is None:
        raise ParseError("document lacks schema_version/type envelope")
    if version != SCHEMA_VERSION:
        raise ParseError(f"unsupported schema_version {version!r}")
    if expected is not None:
        want = expected if isinstance(expected, str) else expected.type_id
        if type_id != want:
            raise ParseError(f"expected a {want} document, got {type_id}")
    cls = record_type(type_id)
    try:
        record = cls.model_validate(body)
    except pydantic.ValidationError as exc:
        raise RecordValidationError(type_id, [_describe(e) for e in exc.errors()]) from None
    return record.check()


def decode_record(doc: str | bytes, expected: str | type[Record] | None = None) -> Record:
    """Parse a JSON document and return the validated record it contains."""
    try:
        data = json.loads(doc)
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed document: {exc}") from None
    return decode_value(data, expected)
