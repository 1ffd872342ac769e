"""Story writing: writer/expert dialogue, outline, sequential chapters.

Also hosts the single-prompt ``direct`` baseline.  Every function takes a
chat client as its first argument and is otherwise pure.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

from . import templates
from .parsing import extract_json, strip_fences
from .providers.base import EmptyCompletionError
from .providers.chat import ChatClient, ChatRequest
from .schema import (
    Chapter,
    DialogueTranscript,
    DialogueTurn,
    Outline,
    Story,
    StoryArtifacts,
    StorySetting,
    WritingMethod,
)

log = logging.getLogger(__name__)

STOP_MARKER = "NO MORE QUESTIONS"
DEFAULT_CHAPTER_LENGTH = "2 to 4 sentences"


class StoryWritingError(Exception):
    pass


def setting_block(setting: StorySetting) -> str:
    body = setting.model_dump(mode="json", exclude_none=True)
    return json.dumps(body, indent=2, ensure_ascii=False)


def history_block(turns: list[DialogueTurn] | tuple[DialogueTurn, ...]) -> str:
    if not turns:
        return "(no dialogue yet)"
    lines = []
    for i, t in enumerate(turns, start=1):
        lines.append(f"Writer (question {i}): {t.question}")
        lines.append(f"Expert (answer {i}): {t.answer}")
    return "\n".join(lines)


def _ask(llm: ChatClient, name: str, purpose: str, note: str = "", **values: object) -> str:
    user = templates.render(f"story/{name}.user.txt", **values)
    if note:
        user += f"\n\nNote: a previous attempt was rejected because {note}. Follow the output format exactly."
    request = ChatRequest.build(templates.load(f"story/{name}.system.txt").strip(), user, purpose=purpose)
    return llm.chat(request).strip()


def simulate_dialogue(llm: ChatClient, setting: StorySetting, max_turns: int, *,
                      stop_marker: str = STOP_MARKER) -> DialogueTranscript:
    """Run at most ``max_turns`` writer-question / expert-answer exchanges."""
    if max_turns < 1:
        raise ValueError("max_turns must be positive")
    setting_text = setting_block(setting)
    turns: list[DialogueTurn] = []
    for _ in range(max_turns):
        history = history_block(turns)
        question = _ask(llm, "question", "dialogue_question", setting=setting_text, history=history,
                        stop_marker=stop_marker)
        if stop_marker in question:
            log.info("writer ended the dialogue after %d turn(s)", len(turns))
            break
        answer = _ask(llm, "answer", "dialogue_answer", setting=setting_text, history=history, question=question)
        turns.append(DialogueTurn(question=question, answer=answer))
    return DialogueTranscript(turns=tuple(turns), max_turns=max_turns).check()


def _parse_outline(reply: str, num_pages: int) -> tuple[Outline | None, str]:
    try:
        data = extract_json(reply)
    except ValueError:
        return None, "the reply was not a JSON object"
    items = data.get("chapters") if isinstance(data, dict) else data
    if not isinstance(items, list):
        return None, 'the reply has no "chapters" array'
    chapters = []
    for pos, item in enumerate(items, start=1):
        if isinstance(item, str):
            chapters.append(Chapter(index=pos, synopsis=item.strip()))
        elif isinstance(item, dict) and isinstance(item.get("synopsis"), str):
            idx = item.get("index", pos)
            chapters.append(Chapter(index=idx if isinstance(idx, int) else pos, synopsis=item["synopsis"].strip()))
        else:
            return None, f"chapter entry {pos} has no synopsis"
    if len(chapters) != num_pages:
        return None, f"it had {len(chapters)} chapters but exactly {num_pages} are required"
    outline = Outline(chapters=tuple(chapters))
    problems = outline.violations()
    if problems:
        return None, "; ".join(problems)
    return outline, ""


def write_outline(llm: ChatClient, setting: StorySetting, transcript: DialogueTranscript) -> Outline:
    """Write the outline from the discussion; one reprompt on a malformed reply."""
    values = dict(setting=setting_block(setting), dialogue=history_block(transcript.turns),
                  num_pages=setting.num_pages)
    note = ""
    for _attempt in range(2):
        outline, note = _parse_outline(_ask(llm, "outline", "outline", note=note, **values), setting.num_pages)
        if outline is not None:
            return outline
        log.warning("outline rejected: %s", note)
    raise StoryWritingError(f"outline writer failed twice: {note}")


def outline_block(outline: Outline) -> str:
    return "\n".join(f"{c.index}. {c.synopsis}" for c in outline.chapters)


def previous_block(chapters: list[str]) -> str:
    if not chapters:
        return "(none, this is the first chapter)"
    return "\n\n".join(f"Chapter {i}:\n{text}" for i, text in enumerate(chapters, start=1))


@dataclass
class WritingContext:
    setting: StorySetting
    transcript: DialogueTranscript
    outline: Outline
    completed_chapters: list[str] = field(default_factory=list)

    def append(self, text: str) -> None:
        if len(self.completed_chapters) >= len(self.outline.chapters):
            raise StoryWritingError("all outline chapters are already written")
        self.completed_chapters.append(text)


def write_chapters(llm: ChatClient, setting: StorySetting, outline: Outline, transcript: DialogueTranscript, *,
                   length: str = DEFAULT_CHAPTER_LENGTH) -> Story:
    """Expand the outline chapter by chapter, feeding back everything written so far."""
    problems = outline.violations()
    if problems:
        raise StoryWritingError("invalid outline: " + "; ".join(problems))
    ctx = WritingContext(setting, transcript, outline)
    common = dict(setting=setting_block(setting), dialogue=history_block(transcript.turns),
                  outline=outline_block(outline), total=len(outline.chapters), length=length)
    for chapter in outline.chapters:
        values = dict(common, previous=previous_block(ctx.completed_chapters), index=chapter.index,
                      synopsis=chapter.synopsis)
        text = ""
        for attempt in range(2):
            try:
                text = strip_fences(_ask(llm, "chapter", "chapter",
                                         note="the chapter text was empty" if attempt else "", **values))
            except EmptyCompletionError:
                text = ""
            if text:
                break
        if not text:
            raise StoryWritingError(f"chapter {chapter.index} came back empty twice")
        ctx.append(text)
    return Story.from_texts(ctx.completed_chapters, WritingMethod.STORY_AGENT)


def _parse_pages(reply: str, num_pages: int) -> tuple[list[str] | None, str]:
    try:
        data = extract_json(reply)
    except ValueError:
        return None, "the reply was not a JSON object"
    pages = data.get("pages") if isinstance(data, dict) else data
    if not isinstance(pages, list) or not all(isinstance(p, str) for p in pages):
        return None, 'the reply has no "pages" array of strings'
    pages = [p.strip() for p in pages]
    if len(pages) != num_pages:
        return None, f"it had {len(pages)} pages but exactly {num_pages} are required"
    if any(not p for p in pages):
        return None, "a page was empty"
    return pages, ""


def write_story_direct(llm: ChatClient, setting: StorySetting) -> Story:
    """Baseline: one prompt with the setting, one reply with every page."""
    note = ""
    for _attempt in range(2):
        reply = _ask(llm, "direct", "direct_story", note=note, setting=setting_block(setting),
                     num_pages=setting.num_pages)
        pages, note = _parse_pages(reply, setting.num_pages)
        if pages is not None:
            return Story.from_texts(pages, WritingMethod.DIRECT)
        log.warning("direct story rejected: %s", note)
    raise StoryWritingError(f"direct writer failed twice: {note}")


def write_story(llm: ChatClient, setting: StorySetting, method: str = "story_agent", *, dialogue_turns: int = 3,
                chapter_length: str = DEFAULT_CHAPTER_LENGTH) -> StoryArtifacts:
    problems = setting.violations()
    if problems:
        raise StoryWritingError("invalid story setting: " + "; ".join(problems))
    if method == WritingMethod.DIRECT:
        return StoryArtifacts(story=write_story_direct(llm, setting))
    transcript = simulate_dialogue(llm, setting, dialogue_turns)
    outline = write_outline(llm, setting, transcript)
    story = write_chapters(llm, setting, outline, transcript, length=chapter_length)
    return StoryArtifacts(story=story, dialogue=transcript, outline=outline).check()
