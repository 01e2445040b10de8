"""Persona-driven simulation of labeled support conversations.

A simulated user (high temperature) describes a problem from a scenario and
answers the assistant's questions without stating the root cause; a
simulated assistant sees only the conversation so far.
"""

from __future__ import annotations

import json
import logging
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from impress.gateway import Gateway, GatewayError, Message, ModelConfig
from impress.pipeline import Conversation, Utterance

logger = logging.getLogger(__name__)

END_MARKER = "[END]"
MAX_REGENERATIONS = 3
TAG_SIM_USER = "sim-user"
TAG_SIM_ASSISTANT = "sim-assistant"


class BadDistribution(ValueError):
    pass


class DisclosureViolation(Exception):
    pass


@dataclass(frozen=True)
class Persona:
    age: int
    gender: str
    occupation: str

    def describe(self) -> str:
        return f"a {self.age}-year-old {self.gender} working as {self.occupation}"


@dataclass(frozen=True)
class ScenarioSpec:
    problem_essence: str
    root_cause: str
    gold_spcs: tuple[str, ...]
    domain_tag: str = "general"

    def __post_init__(self):
        if not self.problem_essence.strip() or not self.root_cause.strip():
            raise ValueError("problem_essence and root_cause must be non-empty")
        if not self.gold_spcs:
            raise ValueError("gold_spcs must be non-empty")

    def check_universe(self, universe: Iterable[str]) -> None:
        missing = set(self.gold_spcs) - set(universe)
        if missing:
            raise ValueError(f"scenario gold SPCs not in catalog: {sorted(missing)}")


@dataclass(frozen=True)
class SimulatedConversation:
    conversation: Conversation
    gold_spcs: tuple[str, ...]
    persona: Persona
    scenario: ScenarioSpec
    seed: int
    rejections: int = 0


# --------------------------------------------------------------------------
# Personas
# --------------------------------------------------------------------------


def _weights(spec: Mapping[str, Any], n: int, attr: str) -> list[float]:
    w = spec.get("weights")
    if w is None:
        return [1.0] * n
    if len(w) != n:
        raise BadDistribution(f"{attr}: {len(w)} weights for {n} options")
    if any((not isinstance(x, (int, float))) or x <= 0 for x in w):
        raise BadDistribution(f"{attr}: weights must be positive numbers")
    return [float(x) for x in w]


def _sample_attr(spec: Mapping[str, Any], rng: random.Random, attr: str) -> Any:
    if "categories" in spec:
        cats = list(spec["categories"])
        if not cats:
            raise BadDistribution(f"{attr}: no categories")
        return rng.choices(cats, weights=_weights(spec, len(cats), attr))[0]
    if "ranges" in spec:
        ranges = [tuple(r) for r in spec["ranges"]]
        if not ranges or any(len(r) != 2 or r[0] > r[1] for r in ranges):
            raise BadDistribution(f"{attr}: ranges must be [low, high] pairs with low <= high")
        lo, hi = rng.choices(ranges, weights=_weights(spec, len(ranges), attr))[0]
        return rng.randint(int(lo), int(hi))
    raise BadDistribution(f"{attr}: expected 'categories' or 'ranges'")


def sample_persona(distributions: Mapping[str, Mapping[str, Any]], seed: int) -> Persona:
    rng = random.Random(seed)
    values = {}
    for attr in ("age", "gender", "occupation"):
        if attr not in distributions:
            raise BadDistribution(f"missing distribution for {attr!r}")
        values[attr] = _sample_attr(distributions[attr], rng, attr)
    return Persona(int(values["age"]), str(values["gender"]), str(values["occupation"]))


DEFAULT_PERSONA_DISTRIBUTIONS = {
    "age": {"ranges": [[18, 29], [30, 49], [50, 75]], "weights": [3, 4, 3]},
    "gender": {"categories": ["woman", "man", "non-binary person"], "weights": [48, 48, 4]},
    "occupation": {
        "categories": ["teacher", "nurse", "software developer", "retail worker", "student", "accountant", "chef", "retiree"]
    },
}


# --------------------------------------------------------------------------
# Conversations
# --------------------------------------------------------------------------


def user_system_prompt(persona: Persona, scenario: ScenarioSpec) -> str:
    return (
        f"You are role-playing {persona.describe()} who is chatting with an AI support assistant "
        f"about a {scenario.domain_tag} problem.\n"
        f"Your problem: {scenario.problem_essence}\n"
        f"The real cause, which only you know: {scenario.root_cause}\n"
        "Never state the cause explicitly; describe symptoms and answer the assistant's questions "
        "naturally and briefly, in your persona's voice. Write only your next message. "
        f"If your problem has been resolved, end your message with the line {END_MARKER}"
    )


ASSISTANT_SYSTEM_PROMPT = (
    "You are a helpful support assistant covering everyday topics. Ask focused questions to "
    "understand the user's problem and give practical help. Reply with your next message only."
)


def _leaks(text: str, root_cause: str) -> bool:
    return root_cause.strip().lower() in text.lower()


def _strip_end(text: str) -> tuple[str, bool]:
    lines = text.splitlines()
    kept = [ln for ln in lines if ln.strip() != END_MARKER]
    ended = len(kept) != len(lines)
    body = "\n".join(kept)
    if END_MARKER in body:
        body, ended = body.replace(END_MARKER, ""), True
    return body.strip(), ended


def _simulate_once(
    persona: Persona,
    scenario: ScenarioSpec,
    gateway: Gateway,
    user_config: ModelConfig,
    assistant_config: ModelConfig,
    max_exchanges: int,
    seed: int,
    conversation_id: str,
) -> Conversation:
    turns: list[Utterance] = []
    user_system = user_system_prompt(persona, scenario)

    def user_turn() -> bool:
        # the simulated user sees the assistant's messages as the other party's turns
        msgs = [Message("system", user_system)]
        if not turns:
            msgs.append(Message("user", "Start the conversation by describing your problem."))
        for u in turns:
            msgs.append(Message("user" if u.role == "assistant" else "assistant", u.text))
        text, ended = _strip_end(gateway.complete_chat(user_config, msgs, TAG_SIM_USER, seed).response_text)
        if _leaks(text, scenario.root_cause):
            raise DisclosureViolation(f"{conversation_id}: user turn {len(turns)} discloses the root cause")
        if text:
            turns.append(Utterance("user", text))
        return ended

    def assistant_turn() -> None:
        msgs = [Message("system", ASSISTANT_SYSTEM_PROMPT)]
        msgs += [Message(u.role, u.text) for u in turns]
        text = gateway.complete_chat(assistant_config, msgs, TAG_SIM_ASSISTANT, seed).response_text.strip()
        turns.append(Utterance("assistant", text))

    ended = user_turn()
    if not turns:
        raise GatewayError(f"{conversation_id}: simulated user produced an empty opener")
    exchanges = 0
    while not ended and exchanges < max_exchanges:
        assistant_turn()
        exchanges += 1
        ended = user_turn()
        if turns[-1].role == "assistant":
            break
    return Conversation(conversation_id, tuple(turns), scenario.domain_tag)


def generate_conversation(
    persona: Persona,
    scenario: ScenarioSpec,
    gateway: Gateway,
    user_config: ModelConfig,
    assistant_config: ModelConfig,
    max_exchanges: int = 4,
    seed: int = 0,
    conversation_id: str = "sim-0",
) -> SimulatedConversation:
    """Simulate one conversation: the user's opener, then up to
    ``max_exchanges`` assistant/user pairs (at most ``1 + 2 * max_exchanges``
    utterances). A conversation whose user turns contain the root cause
    verbatim is discarded and regenerated, at most ``MAX_REGENERATIONS``
    times."""
    rejections = 0
    while True:
        attempt_seed = seed + 1_000_003 * rejections
        try:
            conv = _simulate_once(
                persona, scenario, gateway, user_config, assistant_config, max_exchanges, attempt_seed, conversation_id
            )
            return SimulatedConversation(conv, scenario.gold_spcs, persona, scenario, attempt_seed, rejections)
        except DisclosureViolation as e:
            rejections += 1
            logger.info("%s (rejection %d)", e, rejections)
            if rejections > MAX_REGENERATIONS:
                raise DisclosureViolation(f"{conversation_id}: root cause leaked in {rejections} attempts") from e


@dataclass
class DatasetManifest:
    base_seed: int
    n_per_scenario: int
    max_exchanges: int
    user_model: dict[str, Any]
    assistant_model: dict[str, Any]
    conversations: list[dict[str, Any]] = field(default_factory=list)
    failures: list[dict[str, Any]] = field(default_factory=list)

    @property
    def rejection_count(self) -> int:
        return sum(c["rejections"] for c in self.conversations) + sum(f["rejections"] for f in self.failures)

    def to_json(self) -> dict[str, Any]:
        d = asdict(self)
        d["rejection_count"] = self.rejection_count
        return d


def generate_dataset(
    scenarios: Sequence[ScenarioSpec],
    distributions: Mapping[str, Mapping[str, Any]],
    gateway: Gateway,
    user_config: ModelConfig,
    assistant_config: ModelConfig,
    n_per_scenario: int = 1,
    base_seed: int = 0,
    max_exchanges: int = 4,
) -> tuple[list[SimulatedConversation], DatasetManifest]:
    if not scenarios:
        raise ValueError("scenarios must be non-empty")
    manifest = DatasetManifest(base_seed, n_per_scenario, max_exchanges, asdict(user_config), asdict(assistant_config))
    out = []
    for i, scenario in enumerate(scenarios):
        for j in range(n_per_scenario):
            seed = base_seed + i * n_per_scenario + j
            cid = f"sim-{i:04d}-{j:03d}"
            persona = sample_persona(distributions, seed)
            try:
                sim = generate_conversation(
                    persona, scenario, gateway, user_config, assistant_config, max_exchanges, seed, cid
                )
            except (DisclosureViolation, GatewayError) as e:
                rejections = MAX_REGENERATIONS + 1 if isinstance(e, DisclosureViolation) else 0
                manifest.failures.append(
                    {"conversation_id": cid, "seed": seed, "error": str(e), "rejections": rejections}
                )
                continue
            out.append(sim)
            manifest.conversations.append(
                {
                    "conversation_id": cid,
                    "scenario": i,
                    "seed": seed,
                    "attempt_seed": sim.seed,
                    "persona": asdict(persona),
                    "rejections": sim.rejections,
                    "n_utterances": len(sim.conversation.utterances),
                }
            )
    return out, manifest


def write_dataset(path: str | Path, sims: Sequence[SimulatedConversation], manifest: DatasetManifest) -> None:
    """Conversation JSONL at ``path`` plus ``manifest.json`` next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for s in sims:
        obj = s.conversation.to_json()
        obj["gold_spcs"] = list(s.gold_spcs)
        lines.append(json.dumps(obj, sort_keys=True, ensure_ascii=False))
    path.write_text("".join(line + "\n" for line in lines))
    (path.parent / "manifest.json").write_text(json.dumps(manifest.to_json(), indent=2, sort_keys=True) + "\n")


def load_scenarios(path: str | Path) -> list[ScenarioSpec]:
    return [
        ScenarioSpec(d["problem_essence"], d["root_cause"], tuple(d["gold_spcs"]), d.get("domain_tag", "general"))
        for d in json.loads(Path(path).read_text())
    ]


def load_persona_distributions(path: str | Path) -> dict[str, dict[str, Any]]:
    data = json.loads(Path(path).read_text())
    if not isinstance(data, dict):
        raise BadDistribution("persona distributions must be a JSON object")
    return data
