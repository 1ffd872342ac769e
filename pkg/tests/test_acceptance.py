"""Acceptance suite: one PASS/FAIL line per criterion, printed even under capture."""

from __future__ import annotations

import json
import math
import os
import random
import re
import time
from pathlib import Path

import pytest

from conftest import small_config
from storypipe.composer import build_encoder_plan, build_mix, build_timeline, fit_sound, probe_duration
from storypipe.evalkit import AlignmentRecord, ScoreRecord, aggregate_report
from storypipe.pipeline import Pipeline
from storypipe.prompt_workflows import PASS_SENTINEL, RefinePayload, RefineTask, refine_loop, substitute_roles
from storypipe.providers import ScriptedChat, StoryMockLLM, build_providers
from storypipe.schema import STANDARD_TOPIC_TYPES, Asset, AssetManifest, PipelineState, Role, RoleTable, StorySetting
from storypipe.storage import read_record
from storypipe.story_agent import STOP_MARKER, simulate_dialogue, write_story

TYPES = list(STANDARD_TOPIC_TYPES)


@pytest.fixture
def verdict(capsys):
    def emit(criterion: str, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}")
        assert ok, detail

    return emit


# ---------------------------------------------------------------------------
# Aggregation fidelity
# ---------------------------------------------------------------------------

# Per-type cells (self-growing, family & friendship, environments, knowledge learning)
# and the published All-row value, from the objective evaluation tables.
PUBLISHED_CELLS = [
    ("story_agent", "attractiveness", (3.72, 4.04, 4.04, 3.96), 3.94),
    ("story_agent", "warmth", (4.32, 4.68, 4.32, 3.52), 4.21),
    ("story_agent", "education", (3.75, 3.68, 3.88, 3.84), 3.79),
    ("story_agent", "I-T", (0.324, 0.313, 0.309, 0.320), 0.316),
    ("direct", "relevance", (4.60, 4.88, 5.00, 4.92), 4.85),
]
TOPICS_PER_TYPE = 25


def _records(method, column, cells):
    out = []
    for ttype, mean in zip(TYPES, cells):
        if column in ("I-T",):
            out += [AlignmentRecord(topic=f"{ttype}-{i}", topic_type=ttype, method=method, metric=column, value=mean)
                    for i in range(TOPICS_PER_TYPE)]
            continue
        total = round(mean * TOPICS_PER_TYPE)
        base, extra = divmod(total, TOPICS_PER_TYPE)
        out += [ScoreRecord(topic=f"{ttype}-{i}", topic_type=ttype, method=method, criterion=column,
                            score=base + (i < extra)) for i in range(TOPICS_PER_TYPE)]
    return out


def test_aggregation_fidelity(verdict):
    start = time.perf_counter()
    results = []
    for method, column, cells, published in PUBLISHED_CELLS:
        report = aggregate_report(_records(method, column, cells), methods=[method], columns=[column])
        got = report.cell("All", method, column)
        results.append((method, column, got, published, abs(got - published) <= 0.005 + 1e-12))
    elapsed = time.perf_counter() - start
    detail = ", ".join(f"{m}/{c}={g} (published {p})" for m, c, g, p, _ in results)
    verdict("Aggregation fidelity", all(r[-1] for r in results) and elapsed < 1.0,
            f"{detail}; tolerance ±0.005; {elapsed:.3f}s < 1s")


# ---------------------------------------------------------------------------
# Refinement-loop contract
# ---------------------------------------------------------------------------

PASSING = ["Check Passed", "Check Passed.", "  Check Passed.  ", "\nCheck Passed\n"]
FAILING = ["check passed", "Check Passed!", "Check Passed..", "Check  Passed", "Not Check Passed",
           "add more color", "remove the dialogue", "Check Passed, but shorten it"]


def _oracle(reviser: list[str], reviewer: list[str], max_turns: int):
    """Expected (passed, turns, threaded payloads) for a scripted exchange."""
    expected_payloads = [("", "")]
    review_i = 0
    for turn in range(max_turns):
        cand = reviser[turn]
        if not cand.strip():
            suggestion = "empty output"
        else:
            reply = reviewer[review_i]
            review_i += 1
            text = reply.strip()
            text = text[:-1] if text.endswith(".") else text
            if text == PASS_SENTINEL:
                return True, turn + 1, expected_payloads
            suggestion = reply.strip()
        expected_payloads.append((cand.strip(), suggestion))
    return False, max_turns, expected_payloads[:max_turns]


def test_refinement_loop_contract(verdict):
    rng = random.Random(1234)
    start = time.perf_counter()
    failures = []
    for case in range(1000):
        reviser = [rng.choice(["", f"candidate {case}-{t}", f"draft {t} of {case}"]) for t in range(3)]
        reviewer = [rng.choice(PASSING if rng.random() < 0.3 else FAILING) for _ in range(3)]
        seen_payloads = []
        rev_iter, review_iter = iter(reviser), iter(reviewer)

        def respond(req, rev_iter=rev_iter, review_iter=review_iter, seen=seen_payloads):
            if req.purpose.endswith("_reviser"):
                p = json.loads(req.user)
                seen.append((p["previous_result"], p["improvement_suggestion"]))
                return next(rev_iter) or " "
            return next(review_iter)

        task = RefineTask("revise", "review", RefinePayload(all_stories=("a",), current_story="a"), max_turns=3)
        result = refine_loop(ScriptedChat(respond), task)
        passed, turns, payloads = _oracle(reviser, reviewer, 3)
        if (result.passed != passed or len(result.history) != turns or len(result.history) > 3
                or seen_payloads != payloads[:len(seen_payloads)] or len(seen_payloads) != turns):
            failures.append(case)
    elapsed = time.perf_counter() - start
    verdict("Refinement-loop contract", not failures and elapsed < 10,
            f"1000 randomized mocks, T_p=3, {len(failures)} mismatches; {elapsed:.2f}s < 10s")


# ---------------------------------------------------------------------------
# Dialogue and sequential writing
# ---------------------------------------------------------------------------


def test_dialogue_and_sequential_writing(verdict):
    start = time.perf_counter()
    rng = random.Random(7)
    problems = []
    setting = StorySetting(topic="friendship", num_pages=5, requirements=("Short.",))
    for case in range(200):
        t_d = rng.randint(1, 5)
        stop_at = rng.choice([None, rng.randint(1, 8)])
        asked = []

        def question(req, asked=asked, stop_at=stop_at):
            asked.append(1)
            return STOP_MARKER if stop_at is not None and len(asked) >= stop_at else f"Q{len(asked)} and more?"

        llm = ScriptedChat(lambda r, q=question: q(r) if r.purpose == "dialogue_question" else "An answer.")
        transcript = simulate_dialogue(llm, setting, t_d)
        limit = t_d if stop_at is None else min(t_d, stop_at - 1)
        if len(transcript.turns) != limit or len(transcript.turns) > t_d:
            problems.append(f"dialogue case {case}")

    llm = StoryMockLLM()
    arts = write_story(llm, setting, "story_agent", dialogue_turns=3)
    prompts = [r.user for r in llm.received if r.purpose == "chapter"]
    for i, prompt in enumerate(prompts):
        if not all(prev in prompt for prev in arts.story.texts[:i]):
            problems.append(f"chapter {i + 1} prompt lacks earlier chapters")
    direct = StoryMockLLM()
    write_story(direct, setting, "direct")
    if direct.upstream_calls != 1:
        problems.append(f"direct mode made {direct.upstream_calls} calls")
    elapsed = time.perf_counter() - start
    verdict("Dialogue and sequential-writing contracts", not problems and elapsed < 5,
            f"200 adversarial dialogues, {len(prompts)} chapter prompts, direct calls={direct.upstream_calls}; "
            f"{problems or 'no violations'}; {elapsed:.2f}s < 5s")


# ---------------------------------------------------------------------------
# Timeline arithmetic
# ---------------------------------------------------------------------------


def _manifest(durations, sounds):
    def a(modality, page, d=0.0):
        extra = {"width": 8, "height": 8} if modality == "image" else {"duration_s": d}
        return Asset(modality=modality, page_index=page, location=f"{modality}{page}", provider_id="t", **extra)

    n = len(durations)
    return AssetManifest(num_pages=n, images=tuple(a("image", i) for i in range(1, n + 1)),
                         speech=tuple(a("speech", i, d) for i, d in enumerate(durations, 1)),
                         sounds=tuple(a("sound", p, d) for p, d in sounds.items()))


def test_timeline_arithmetic(verdict):
    rng = random.Random(99)
    start = time.perf_counter()
    worst, bad = 0.0, []
    for case in range(1000):
        ds = [rng.uniform(0.05, 30.0) for _ in range(rng.randint(1, 12))]
        sounds = {p: rng.uniform(0.2, 10.0) for p in range(1, len(ds) + 1) if rng.random() < 0.5}
        plan = build_timeline(_manifest(ds, sounds), rng.randrange(2**32))
        acc = 0.0
        for seg, d in zip(plan.segments, ds):
            worst = max(worst, abs(seg.start_s - acc))
            acc += d
            if seg.sound_fit is not None:
                fit = seg.sound_fit
                src = sounds[seg.page_index]
                if fit.loop_count != math.ceil(d / src) or fit.trim_to_s != d or fit.loop_count * src < d:
                    bad.append(f"fit case {case}")
        worst = max(worst, abs(plan.total_s - sum(ds)))
        if plan.transitions() != len(ds) - 1:
            bad.append(f"transitions case {case}")
        if case < 50:
            graph = " ".join(build_encoder_plan(plan, build_mix(_manifest(ds, sounds)), check_files=False)
                             .steps[-2].argv)
            for seg in plan.segments:
                if seg.sound_fit and f"atrim=duration={seg.duration_s:.6f},apad=whole_dur={seg.duration_s:.6f}" \
                        not in graph:
                    bad.append(f"render trim case {case}")
    # exact-length rendering of a fitted loop, sample by sample
    sr = 24000
    for _ in range(200):
        src, t = rng.uniform(0.1, 5.0), rng.uniform(0.1, 20.0)
        fit = fit_sound(src, t)
        looped = int(round(src * sr)) * fit.loop_count
        if min(looped, round(fit.trim_to_s * sr)) != round(t * sr):
            bad.append("sample-exact trim")
    elapsed = time.perf_counter() - start
    verdict("Timeline arithmetic", worst <= 1e-6 and not bad and elapsed < 5,
            f"1000 random vectors, max start/total error {worst:.2e}s ≤ 1e-6, {len(bad)} fit/transition errors; "
            f"{elapsed:.2f}s < 5s")


# ---------------------------------------------------------------------------
# Role substitution
# ---------------------------------------------------------------------------


def _longest_first_oracle(prompt: str, lookup: dict[str, str]) -> str:
    out, i = [], 0
    names = sorted(lookup, key=len, reverse=True)
    while i < len(prompt):
        boundary_before = i == 0 or not (prompt[i - 1].isalnum() or prompt[i - 1] == "_")
        hit = None
        if boundary_before:
            for n in names:
                end = i + len(n)
                if prompt.startswith(n, i) and (end == len(prompt) or not (prompt[end].isalnum() or prompt[end] == "_")):
                    hit = n
                    break
        if hit:
            out.append(lookup[hit])
            i += len(hit)
        else:
            out.append(prompt[i])
            i += 1
    return "".join(out)


def test_role_substitution(verdict):
    start = time.perf_counter()
    rng = random.Random(5)
    alphabet = "AnaBoxy"
    bad = []
    for case in range(2000):
        names = list({"".join(rng.choice(alphabet) for _ in range(rng.randint(1, 4))) for _ in range(rng.randint(1, 5))})
        lookup = {n: f"<desc {i}>" for i, n in enumerate(names)}
        words = [rng.choice(names + ["the", "and", "Annabel", "x"]) for _ in range(rng.randint(1, 10))]
        prompt = rng.choice([" ", ", ", "; "]).join(words)
        table = RoleTable(roles=tuple(Role(name=n, description=d) for n, d in lookup.items()))
        got = substitute_roles(prompt, table)
        if got != _longest_first_oracle(prompt, lookup):
            bad.append(case)
        if any(re.search(rf"(?<!\w){re.escape(n)}(?!\w)", got) for n in names):
            bad.append(case)
    table = RoleTable(roles=(Role(name="Ann", description="a tall woman in a red coat"),
                             Role(name="Anna", description="a small girl with braids")))
    ann = substitute_roles("Anna waves at Ann.", table)
    ann_ok = ann == "a small girl with braids waves at a tall woman in a red coat."
    elapsed = time.perf_counter() - start
    verdict("Role substitution", not bad and ann_ok and elapsed < 2,
            f"2000 random tables, {len(set(bad))} oracle mismatches; Ann/Anna -> {ann!r}; {elapsed:.2f}s < 2s")


# ---------------------------------------------------------------------------
# End-to-end determinism
# ---------------------------------------------------------------------------

SETTING = StorySetting(topic="a rainy day at the river", topic_type="environments", num_pages=3,
                       requirements=("Use simple words.",))
COMPARED = ("story.json", "prompts/image.json", "prompts/sound.json", "prompts/music.json", "timeline.json",
            "encoder_plan.json", "manifest.json", "roles.json")


def _artifacts(root: Path) -> dict[str, bytes]:
    return {name: (root / name).read_bytes() for name in COMPARED}


def test_end_to_end_determinism(verdict, tmp_path):
    start = time.perf_counter()
    Pipeline(small_config(rng_seed=11, workers=4), tmp_path / "a").run(SETTING)
    Pipeline(small_config(rng_seed=11, workers=4), tmp_path / "b").run(SETTING)
    Pipeline(small_config(rng_seed=11, workers=1), tmp_path / "serial").run(SETTING)
    a, b, s = (_artifacts(tmp_path / d) for d in ("a", "b", "serial"))
    same_runs = a == b
    same_serial = a == s
    elapsed = time.perf_counter() - start
    verdict("End-to-end determinism", same_runs and same_serial and elapsed < 30,
            f"repeat run identical={same_runs}, parallel vs serial identical={same_serial} over {len(COMPARED)} files; "
            f"{elapsed:.2f}s < 30s")


# ---------------------------------------------------------------------------
# Resume correctness
# ---------------------------------------------------------------------------

STAGE_PURPOSES = {
    "story": {"dialogue_question", "dialogue_answer", "outline", "chapter"},
    "roles": {"role_reviser", "role_reviewer"},
    "image_prompts": {"image_reviser", "image_reviewer"},
    "sound_prompts": {"sound_reviser", "sound_reviewer"},
    "music_prompt": {"music_reviser", "music_reviewer"},
}
STAGE_PROVIDER = {"images": "image", "speech": "speech", "sounds": "sound", "music": "music"}


class Crash(Exception):
    pass


def test_resume_correctness(verdict, tmp_path):
    start = time.perf_counter()
    cfg = small_config(rng_seed=3)
    Pipeline(cfg, tmp_path / "clean", providers=build_providers(cfg)).run(SETTING)
    reference = _artifacts(tmp_path / "clean")
    problems = []
    stages = Pipeline(cfg, tmp_path / "plan").plan()
    for crash_after in stages[:-1]:
        work = tmp_path / f"crash-{crash_after}"

        def hook(stage, target=crash_after):
            if stage == target:
                raise Crash(stage)

        with pytest.raises(Crash):
            Pipeline(cfg, work, providers=build_providers(cfg), after_stage=hook).run(SETTING)
        done = {s for s, r in read_record(work / "state.json", PipelineState).stages.items() if r.status == "done"}
        resumed_providers = build_providers(cfg)
        Pipeline(cfg, work, providers=resumed_providers).resume()
        if _artifacts(work) != reference:
            problems.append(f"{crash_after}: artifacts differ")
        for stage in done:
            purposes = STAGE_PURPOSES.get(stage, set())
            if any(resumed_providers.llm.calls_by_purpose[p] for p in purposes):
                problems.append(f"{crash_after}: LLM re-ran {stage}")
            provider = STAGE_PROVIDER.get(stage)
            if provider and getattr(resumed_providers, provider).upstream_calls:
                problems.append(f"{crash_after}: {provider} provider re-ran {stage}")
    elapsed = time.perf_counter() - start
    verdict("Resume correctness", not problems and elapsed < 60,
            f"crash after each of {len(stages) - 1} stages then resume; {problems or 'artifacts identical, no re-runs'}; "
            f"{elapsed:.2f}s < 60s")


# ---------------------------------------------------------------------------
# Composition smoke test
# ---------------------------------------------------------------------------


@pytest.mark.render
def test_composition_smoke(verdict, tmp_path, encoder):
    cfg = small_config(render=True)
    setting = StorySetting(topic="a kite on a windy hill", num_pages=2, requirements=("Short.",))
    result = Pipeline(cfg, tmp_path).run(setting)
    expected = sum(a.duration_s for a in result.manifest.speech)
    got = probe_duration(encoder, result.video)
    verdict("Composition smoke test", abs(got - expected) <= 0.1,
            f"decoded MP4 {got:.3f}s vs Σ speech {expected:.3f}s, tolerance ±0.1s")


# ---------------------------------------------------------------------------
# Live-provider check (manual)
# ---------------------------------------------------------------------------


@pytest.mark.live
def test_live_provider_mini_eval(verdict, tmp_path, capsys):
    url = os.environ.get("STORYPIPE_LIVE_LLM_URL")
    if not url:
        with capsys.disabled():
            print("\n[SKIP] Live-provider check: set STORYPIPE_LIVE_LLM_URL (and STORYPIPE_LLM_TOKEN) to run")
        pytest.skip("manual check: no live chat endpoint configured")
    from storypipe.evalkit import TopicEntry, TopicSet, evaluate

    model = os.environ.get("STORYPIPE_LIVE_LLM_MODEL", "")
    spec = {"kind": "openai", "url": url, "model": model, "token_env": "STORYPIPE_LLM_TOKEN"}
    cfg = small_config(llm=spec, judge=spec)
    topics = TopicSet(entries=tuple(TopicEntry(topic_type=t, topic=f"a story about {t.replace('_', ' ')}")
                                    for t in TYPES))
    report = evaluate(cfg, topics, tmp_path, num_pages=2)
    ok = (tmp_path / "report.md").exists() and any(r.group == "All" for r in report.rows)
    verdict("Live-provider check", ok, "4-topic mini-eval produced report.md with an All row")
