"""Reviser/reviewer prompt refinement and the modality workflows built on it.

One refinement turn: the reviser gets a JSON payload (all pages, the
current page, its previous result and the reviewer's suggestion) and
returns a candidate; the reviewer either answers with the pass sentinel or
with a suggestion, which is threaded into the next turn's payload.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field, replace
from typing import Any, Optional

from . import templates
from .parsing import extract_json, strip_fences
from .providers.base import EmptyCompletionError
from .providers.chat import ChatClient, ChatRequest
from .schema import ModalityPrompt, RevisionExchange, Role, RoleTable, Story, StorySetting

log = logging.getLogger(__name__)

PASS_SENTINEL = "Check Passed"
EMPTY_OUTPUT_SUGGESTION = "empty output"
_NO_SOUND = {"", "none", "no sound", "no sound effect", "no sound effects", "n/a"}


class PromptWorkflowError(Exception):
    pass


def is_check_passed(reply: str) -> bool:
    """True iff the reply, trimmed and without one trailing period, is the sentinel."""
    text = reply.strip()
    if text.endswith("."):
        text = text[:-1]
    return text == PASS_SENTINEL


@dataclass(frozen=True)
class RefinePayload:
    all_stories: tuple[str, ...]
    current_story: str
    previous_result: str = ""
    improvement_suggestion: str = ""
    story_setting: Optional[dict[str, Any]] = None

    def reviser_view(self) -> dict[str, Any]:
        view: dict[str, Any] = {"all_stories": list(self.all_stories), "current_story": self.current_story}
        if self.story_setting is not None:
            view["story_setting"] = self.story_setting
        view["previous_result"] = self.previous_result
        view["improvement_suggestion"] = self.improvement_suggestion
        return view

    def reviewer_view(self, field_name: str, candidate: str) -> dict[str, Any]:
        view: dict[str, Any] = {"all_stories": list(self.all_stories), "current_story": self.current_story}
        if self.story_setting is not None:
            view["story_setting"] = self.story_setting
        view[field_name] = candidate
        return view


@dataclass(frozen=True)
class RefineTask:
    reviser_instruction: str
    reviewer_instruction: str
    payload: RefinePayload
    max_turns: int = 3
    review_field: str = "image_description"
    purpose: str = "refine"

    def __post_init__(self) -> None:
        if not self.reviser_instruction.strip() or not self.reviewer_instruction.strip():
            raise ValueError("reviser and reviewer instructions must be non-empty")
        if self.max_turns < 1:
            raise ValueError("max_turns must be positive")
        if self.payload.previous_result or self.payload.improvement_suggestion:
            raise ValueError("the first turn starts with an empty previous_result and improvement_suggestion")


@dataclass(frozen=True)
class RefineResult:
    final: str
    history: tuple[RevisionExchange, ...] = field(default_factory=tuple)
    passed: bool = False


def _dump(view: dict[str, Any]) -> str:
    return json.dumps(view, ensure_ascii=False, indent=2)


def refine_loop(llm: ChatClient, task: RefineTask) -> RefineResult:
    payload = task.payload
    history: list[RevisionExchange] = []
    candidate = ""
    for turn in range(1, task.max_turns + 1):
        request = ChatRequest.build(task.reviser_instruction, _dump(payload.reviser_view()),
                                    purpose=f"{task.purpose}_reviser")
        try:
            candidate = strip_fences(llm.chat(request))
        except EmptyCompletionError:
            candidate = ""
        if not candidate:
            suggestion = EMPTY_OUTPUT_SUGGESTION
        else:
            review = ChatRequest.build(task.reviewer_instruction,
                                       _dump(payload.reviewer_view(task.review_field, candidate)),
                                       purpose=f"{task.purpose}_reviewer")
            verdict = llm.chat(review)
            if is_check_passed(verdict):
                history.append(RevisionExchange(turn=turn, candidate=candidate, verdict="passed"))
                return RefineResult(final=candidate, history=tuple(history), passed=True)
            suggestion = verdict.strip()
        history.append(RevisionExchange(turn=turn, candidate=candidate, verdict="revise", suggestion=suggestion))
        payload = replace(payload, previous_result=candidate, improvement_suggestion=suggestion)
    log.info("%s: no pass after %d turns", task.purpose, task.max_turns)
    return RefineResult(final=candidate, history=tuple(history), passed=False)


def _task(kind: str, payload: RefinePayload, max_turns: int, review_field: str) -> RefineTask:
    return RefineTask(
        reviser_instruction=templates.load(f"prompts/{kind}_reviser.txt").strip(),
        reviewer_instruction=templates.load(f"prompts/{kind}_reviewer.txt").strip(),
        payload=payload,
        max_turns=max_turns,
        review_field=review_field,
        purpose=kind,
    )


# ---------------------------------------------------------------------------
# Roles
# ---------------------------------------------------------------------------


def _word_in(name: str, text: str) -> bool:
    return re.search(rf"(?<!\w){re.escape(name)}(?!\w)", text) is not None


def parse_roles(reply: str) -> list[Role]:
    try:
        data = extract_json(reply)
    except ValueError as exc:
        raise PromptWorkflowError(f"role extractor reply is not JSON: {exc}") from None
    if isinstance(data, dict) and isinstance(data.get("roles"), list):
        data = data["roles"]
    if isinstance(data, dict):
        data = [{"name": k, "description": v} for k, v in data.items()]
    if not isinstance(data, list):
        raise PromptWorkflowError("role extractor reply is not a list of roles")
    roles = []
    for item in data:
        if not isinstance(item, dict):
            raise PromptWorkflowError(f"malformed role entry: {item!r}")
        name, desc = str(item.get("name", "")).strip(), str(item.get("description", "")).strip()
        if name and desc:
            roles.append(Role(name=name, description=desc))
        else:
            log.warning("dropping incomplete role entry %r", item)
    return roles


def clean_role_table(roles: list[Role], story: Story) -> RoleTable:
    """Deduplicate by name (first wins) and drop names absent from the story."""
    full_text = "\n".join(story.texts)
    seen: set[str] = set()
    kept = []
    for role in roles:
        if role.name in seen:
            log.warning("duplicate role %r from extractor; keeping the first description", role.name)
            continue
        seen.add(role.name)
        if not _word_in(role.name, full_text):
            log.warning("role %r does not occur in the story; dropped", role.name)
            continue
        kept.append(role)
    return RoleTable(roles=tuple(kept)).check()


def extract_roles(llm: ChatClient, story: Story, max_turns: int = 3) -> RoleTable:
    if not story.pages:
        raise PromptWorkflowError("cannot extract roles from an empty story")
    payload = RefinePayload(all_stories=tuple(story.texts), current_story="\n".join(story.texts))
    result = refine_loop(llm, _task("role", payload, max_turns, "role_descriptions"))
    if not result.final:
        raise PromptWorkflowError("role extractor produced no output")
    return clean_role_table(parse_roles(result.final), story)


def substitute_roles(prompt: str, roles: RoleTable) -> str:
    """Replace whole-word role names by their descriptions, longest names first.

    Replacement text is never rescanned, so descriptions that mention other
    roles stay intact.
    """
    lookup = {r.name: r.description for r in roles.roles if r.name}
    if not lookup:
        return prompt
    names = sorted(lookup, key=lambda n: (-len(n), n))
    pattern = re.compile(r"(?<!\w)(?:" + "|".join(re.escape(n) for n in names) + r")(?!\w)")
    return pattern.sub(lambda m: lookup[m.group(0)], prompt)


# ---------------------------------------------------------------------------
# Per-modality prompts
# ---------------------------------------------------------------------------


def _page_payload(story: Story, page_index: int) -> RefinePayload:
    return RefinePayload(all_stories=tuple(story.texts), current_story=story.page(page_index).text)


def make_image_prompt(llm: ChatClient, page_index: int, story: Story, max_turns: int = 3) -> ModalityPrompt:
    result = refine_loop(llm, _task("image", _page_payload(story, page_index), max_turns, "image_description"))
    if not result.final:
        raise PromptWorkflowError(f"image prompt for page {page_index} is empty after {max_turns} turns")
    return ModalityPrompt(modality="image", page_index=page_index, text=result.final, history=result.history)


def normalize_sound_prompt(text: str) -> str:
    cleaned = text.strip().strip('"').strip()
    return "" if cleaned.rstrip(".").lower() in _NO_SOUND else cleaned


def make_sound_prompt(llm: ChatClient, page_index: int, story: Story, max_turns: int = 3) -> ModalityPrompt:
    """Sound-effect prompt for one page; ``""`` means the page gets no effect."""
    result = refine_loop(llm, _task("sound", _page_payload(story, page_index), max_turns, "sound_description"))
    return ModalityPrompt(modality="sound", page_index=page_index, text=normalize_sound_prompt(result.final),
                          history=result.history)


def make_music_prompt(llm: ChatClient, setting: StorySetting, story: Story, max_turns: int = 3) -> ModalityPrompt:
    payload = RefinePayload(
        all_stories=tuple(story.texts),
        current_story="\n".join(story.texts),
        story_setting=setting.model_dump(mode="json", exclude_none=True),
    )
    result = refine_loop(llm, _task("music", payload, max_turns, "music_description"))
    if not result.final:
        raise PromptWorkflowError(f"music prompt is empty after {max_turns} turns")
    return ModalityPrompt(modality="music", page_index=0, text=result.final, history=result.history)


def passthrough_prompt(modality: str, story: Story, page_index: int = 0) -> ModalityPrompt:
    """Unrevised prompt used by the direct baseline: the raw page (or whole story for music)."""
    text = "\n".join(story.texts) if modality == "music" else story.page(page_index).text
    return ModalityPrompt(modality=modality, page_index=0 if modality == "music" else page_index, text=text)
