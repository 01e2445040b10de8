"""Rule-based mock chat backend loaded from a JSON fixture (offline mode).

Fixture shape::

    {
      "embedding_dimension": 64,
      "rules": [
        {"tag": "step1-diagnosis", "match": "wifi", "response": {...}},
        {"tag": "step3-rank", "match": "public network", "prefer": ["vpn-service"]},
        {"tag": "sim-user", "match": "snoring", "turns": ["opener", "reply", "[END]"]}
      ],
      "defaults": {"step1-diagnosis": {...}}
    }

The first rule whose tag equals the call's tag and whose ``match`` string
occurs (case-insensitively) in the concatenated message texts answers.
``response`` is returned verbatim (objects are JSON-encoded in a fence),
``prefer`` returns the presented candidate ids with the listed ids moved to
the front, and ``turns`` picks the entry indexed by the number of turns the
simulated user already produced. Ranking calls with no matching rule echo the
presented order.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

from impress.gateway import BackendRefusal, HashEmbedder, Message, MockChatBackend, TokenUsage
from impress.pipeline import TAG_RANK, presented_candidates


def fenced(obj: Any) -> str:
    return "```json\n" + json.dumps(obj, ensure_ascii=False) + "\n```"


def prefer_ranking(messages: Sequence[Message], prefer: Sequence[str]) -> str:
    ids = [c["id"] for c in presented_candidates(messages)]
    front = [p for p in prefer if p in ids]
    return fenced({"ranking": front + [i for i in ids if i not in front]})


def _answer(rule: Mapping[str, Any], messages: Sequence[Message]) -> str:
    if "prefer" in rule:
        return prefer_ranking(messages, rule["prefer"])
    if "turns" in rule:
        turns = rule["turns"]
        n_prior = sum(1 for m in messages if m.role == "assistant")
        return turns[min(n_prior, len(turns) - 1)]
    resp = rule["response"]
    return resp if isinstance(resp, str) else fenced(resp)


def fixture_responder(tag: str, fixture: Mapping[str, Any]) -> Callable[[Sequence[Message]], str]:
    rules = [r for r in fixture.get("rules", []) if r["tag"] == tag]
    default = fixture.get("defaults", {}).get(tag)

    def respond(messages: Sequence[Message]) -> str:
        blob = "\n".join(m.text for m in messages).lower()
        for rule in rules:
            if rule.get("match", "").lower() in blob:
                return _answer(rule, messages)
        if default is not None:
            return _answer(default if _is_rule(default) else {"response": default}, messages)
        if tag == TAG_RANK:
            return prefer_ranking(messages, [])
        raise BackendRefusal(f"fixture has no rule for tag {tag!r}")

    return respond


def _is_rule(d: Any) -> bool:
    return isinstance(d, Mapping) and any(k in d for k in ("prefer", "turns", "response"))


def fixture_backends(
    fixture: Mapping[str, Any] | str | Path,
    fixed_usage: TokenUsage | None = None,
    latency_ms: float = 0.0,
) -> tuple[MockChatBackend, HashEmbedder]:
    if not isinstance(fixture, Mapping):
        fixture = json.loads(Path(fixture).read_text())
    tags = {r["tag"] for r in fixture.get("rules", [])} | set(fixture.get("defaults", {})) | {TAG_RANK}
    script = {tag: fixture_responder(tag, fixture) for tag in tags}
    chat = MockChatBackend(script, fixed_usage=fixed_usage, latency_ms=latency_ms)
    return chat, HashEmbedder(int(fixture.get("embedding_dimension", 64)))
