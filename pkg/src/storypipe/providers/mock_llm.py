"""Deterministic stand-in for every LLM agent, used by ``kind: mock`` configs.

Replies are pure functions of the request, so runs are reproducible in any
execution order.  Reviewers reject a reviser's first draft once, so each
refinement takes two turns.
"""

from __future__ import annotations

import json
import re
from typing import Any

from ..parsing import extract_json
from ..storage import sha256_hex
from .chat import ChatRequest, ScriptedChat

CAST = {
    "Mia": "a little girl with curly red hair and a green dress",
    "Leo": "a small boy with round glasses and a blue sweater",
    "Pip": "a tiny gray mouse with a red scarf",
}
EVENTS = [
    "find a mysterious map in the garden",
    "follow the map to the old oak tree",
    "meet Pip the mouse in the rain",
    "solve a riddle together by the river",
    "help Pip build a cozy nest",
    "share what they learned with their families",
]
SOUNDS = {
    "rain": "rain tapping on a roof",
    "river": "a gently flowing river",
    "wind": "soft wind through leaves",
    "garden": "birds chirping in a garden",
}


def _field(text: str, name: str, default: str = "") -> str:
    m = re.search(rf'"{name}":\s*"((?:[^"\\]|\\.)*)"', text)
    return json.loads(f'"{m.group(1)}"') if m else default


def _int(pattern: str, text: str, default: int) -> int:
    m = re.search(pattern, text)
    return int(m.group(1)) if m else default


def _first_sentence(text: str) -> str:
    text = re.sub(r'"[^"]*"', "", text).strip()
    return re.split(r"(?<=[.!?])\s", text, maxsplit=1)[0].rstrip(".!? ")


class StoryMockLLM(ScriptedChat):
    def __init__(self, **kwargs: Any):
        kwargs.setdefault("provider_id", "mock-llm")
        super().__init__(self.respond, **kwargs)

    def respond(self, request: ChatRequest) -> str:
        handler = getattr(self, "_" + request.purpose, None)
        if handler is None:
            return f"Reply {sha256_hex(request.text)[:8]}."
        return handler(request.user)

    # story -----------------------------------------------------------------

    def _dialogue_question(self, user: str) -> str:
        k = user.count("Writer (question") + 1
        topic = _field(user, "topic", "the topic")
        return f"Question {k}: how can the story about {topic} keep young readers curious in part {k}?"

    def _dialogue_answer(self, user: str) -> str:
        k = user.count("Writer (question") + 1
        topic = _field(user, "topic", "the topic")
        return f"Let Mia and Leo {EVENTS[(k - 1) % len(EVENTS)]} and discover {topic} step by step."

    def _outline(self, user: str) -> str:
        n = _int(r"exactly (\d+) chapters", user, 1)
        topic = _field(user, "topic", "the topic")
        chapters = [{"index": i, "synopsis": f"Mia and Leo {EVENTS[(i - 1) % len(EVENTS)]} while learning about {topic}."}
                    for i in range(1, n + 1)]
        return json.dumps({"chapters": chapters})

    def _chapter(self, user: str) -> str:
        i = _int(r"Write chapter (\d+) of", user, 1)
        m = re.search(r"Its outline is:\n(.+)", user)
        synopsis = m.group(1).strip() if m else "The friends go on."
        extra = ["Rain tapped softly on the roof.", '"Look!" said Leo with a big smile.', "A cool wind moved the leaves."]
        return f"{synopsis} {extra[(i - 1) % len(extra)]}"

    def _direct_story(self, user: str) -> str:
        n = _int(r"exactly (\d+) pages", user, 1)
        topic = _field(user, "topic", "the topic")
        return json.dumps({"pages": [f"On day {i}, Mia learned something new about {topic}." for i in range(1, n + 1)]})

    # refinement --------------------------------------------------------------

    @staticmethod
    def _payload(user: str) -> dict[str, Any]:
        try:
            data = extract_json(user)
        except ValueError:
            return {}
        return data if isinstance(data, dict) else {}

    def _role_reviser(self, user: str) -> str:
        text = " ".join(self._payload(user).get("all_stories", []))
        roles = [{"name": n, "description": d} for n, d in CAST.items() if re.search(rf"\b{n}\b", text)]
        return json.dumps(roles)

    def _role_reviewer(self, user: str) -> str:
        return "Check Passed"

    def _image_reviser(self, user: str) -> str:
        p = self._payload(user)
        scene = _first_sentence(p.get("current_story", "")) or "a quiet scene"
        if not p.get("improvement_suggestion"):
            return f"Scene: {scene}, while everyone thinks about what happened before and talks a lot"
        return f"{scene}, children's picture book illustration"

    def _image_reviewer(self, user: str) -> str:
        desc = self._payload(user).get("image_description", "")
        return "Remove psychological activities and dialogue; keep it concise." if desc.startswith("Scene:") else "Check Passed."

    def _sound_reviser(self, user: str) -> str:
        p = self._payload(user)
        story = p.get("current_story", "").lower()
        effect = next((SOUNDS[k] for k in sorted(SOUNDS) if k in story), None)
        if effect is None:
            return "None"
        if not p.get("improvement_suggestion"):
            return f"Sounds: {effect} and children talking loudly"
        return effect

    def _sound_reviewer(self, user: str) -> str:
        desc = self._payload(user).get("sound_description", "")
        return "Exclude foreground speech such as talking." if desc.startswith("Sounds:") else "Check Passed"

    def _music_reviser(self, user: str) -> str:
        if not self._payload(user).get("improvement_suggestion"):
            return "Music: a happy song with lyrics about the story"
        return "gentle piano and soft strings, warm lullaby style, slow tempo"

    def _music_reviewer(self, user: str) -> str:
        desc = self._payload(user).get("music_description", "")
        return "Name the instruments and remove the lyrics." if desc.startswith("Music:") else "Check Passed"

    # evaluation ---------------------------------------------------------------

    def _judge(self, user: str) -> str:
        return f"Score: {1 + int(sha256_hex(user)[:8], 16) % 5}"

    def _topics(self, user: str) -> str:
        n = _int(r"List (\d+) different", user, 1)
        kind = re.search(r'of the type "([^"]+)"', user)
        kind_text = kind.group(1).replace("_", " ") if kind else "general"
        offset = user.count("\n- ")
        return json.dumps([f"a {kind_text} story number {offset + i}" for i in range(1, n + 1)])
