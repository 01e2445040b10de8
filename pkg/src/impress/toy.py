"""A small offline world: ten SPCs, search results, a mock-backend fixture,
five labeled conversations and simulation scenarios.

Used by the test-suite and by ``impress init-demo``.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

from impress.catalog import SPC, slugify
from impress.pipeline import Conversation, Utterance
from impress.simgen import DEFAULT_PERSONA_DISTRIBUTIONS, ScenarioSpec

EMBED_DIMENSION = 64

# display name -> (description, features, use cases)
CATALOG: dict[str, tuple[str, list[str], list[str]]] = {
    "VPN service": (
        "A VPN service encrypts internet traffic and tunnels it through a trusted server.",
        ["encrypted tunnel for all traffic", "hides your IP address", "kill switch when the tunnel drops"],
        [
            "safe online banking over airport or hotel hotspots",
            "protecting logins on untrusted cafe networks",
            "private browsing while travelling abroad",
        ],
    ),
    "Password manager": (
        "A password manager generates, stores and autofills unique strong passwords.",
        ["encrypted password vault", "strong unique password generator", "breach alerts for leaked credentials"],
        [
            "replacing reused passwords after an account takeover",
            "sharing household logins securely",
            "autofilling long random passwords on every site",
        ],
    ),
    "Antivirus software": (
        "Antivirus software detects and removes malware such as trojans, adware and cryptominers.",
        ["real-time malware scanning", "adware and pop-up removal", "cryptomining detection"],
        [
            "cleaning a slow computer infected with cryptojacking malware",
            "removing adware that floods the browser with pop-ups",
            "scanning downloads before opening them",
        ],
    ),
    "Hardware security key": (
        "A hardware security key is a physical second factor for phishing-resistant sign-in.",
        ["FIDO2 and U2F support", "phishing-resistant two-factor login", "works over USB and NFC"],
        [
            "protecting an email account from phishing",
            "securing admin accounts with two-factor authentication",
            "passwordless sign-in at work",
        ],
    ),
    "Cloud backup service": (
        "A cloud backup service keeps automatic offsite copies of files and photos.",
        ["automatic continuous backup", "file version history", "restore after disk failure or ransomware"],
        [
            "recovering family photos after a hard drive dies",
            "restoring files encrypted by ransomware",
            "keeping offsite copies of work documents",
        ],
    ),
    "Wi-Fi range extender": (
        "A Wi-Fi range extender repeats a router's signal to cover dead zones.",
        ["dual-band signal repeater", "ethernet port for wired devices", "easy WPS pairing"],
        [
            "fixing weak signal in an upstairs bedroom",
            "reaching a garden office",
            "stopping video calls from dropping far from the router",
        ],
    ),
    "Sleep headphones": (
        "Sleep headphones are soft, low-profile headphones comfortable enough to wear in bed.",
        ["flat speakers in a soft headband", "comfortable for side sleepers", "plays masking sound all night"],
        [
            "sleeping through a partner's snoring",
            "blocking night-time noise from neighbours",
            "listening to calming audio to fall asleep",
        ],
    ),
    "White noise machine": (
        "A white noise machine plays steady ambient sound to mask disruptive noise.",
        ["fan and rain sound profiles", "adjustable volume and tone", "timer and continuous modes"],
        [
            "masking street noise in a city bedroom",
            "helping a baby settle for naps",
            "creating privacy in an office",
        ],
    ),
    "Ergonomic office chair": (
        "An ergonomic office chair supports healthy posture during long desk work.",
        ["adjustable lumbar support", "seat height and depth adjustment", "breathable mesh back"],
        [
            "relieving lower back pain from long workdays",
            "setting up a home office",
            "improving posture while gaming",
        ],
    ),
    "Water filter pitcher": (
        "A water filter pitcher removes chlorine taste, odours and some metals from tap water.",
        ["activated carbon filter cartridge", "filter change indicator", "fits in the fridge door"],
        [
            "improving tap water that tastes of chlorine",
            "making better coffee and tea",
            "reducing bottled water purchases",
        ],
    ),
}

SPCS = [SPC(slugify(name), name) for name in CATALOG]


def generated_entry(name: str) -> dict[str, Any]:
    desc, feats, uses = CATALOG[name]
    return {"description": desc, "features": feats, "use_cases": uses}


def search_results() -> dict[str, list[dict[str, str]]]:
    """Five results for each "<name> features" and "<name> use cases" query."""
    out = {}
    for name, (desc, feats, uses) in CATALOG.items():
        slug = slugify(name)
        f_items = feats + [desc, f"Buying guide: what to look for in a {name.lower()}"]
        u_items = uses + [f"Who needs a {name.lower()}?", desc]
        out[f"{name} features"] = [
            {"title": f"{name} review {i + 1}", "content": f"{name}: {t}.", "url": f"https://example.test/{slug}/f{i}"}
            for i, t in enumerate(f_items)
        ]
        out[f"{name} use cases"] = [
            {"title": f"{name} in practice {i + 1}", "content": f"Use a {name.lower()} for {t}.", "url": f"https://example.test/{slug}/u{i}"}
            for i, t in enumerate(u_items)
        ]
    return out


# (conversation, gold spc, diagnosis keyword, diagnosis, query entries)
CASES: list[dict[str, Any]] = [
    {
        "id": "toy-vpn",
        "domain": "cybersecurity",
        "utterances": [
            ("user", "im in airport and i need to access my banking app do you think its safe to connect to available wifi"),
            ("assistant", "Is the network password protected, and do you know who operates it?"),
            ("user", "its an open network called free airport wifi, no password"),
        ],
        "keyword": "airport",
        "gold": "vpn-service",
        "diagnosis": {
            "summary": "User wants to use a banking app over open airport Wi-Fi.",
            "diagnosis": "Case A: open untrusted hotspot lets attackers intercept traffic on the network.",
            "measures": ["avoid sensitive logins on open networks", "encrypt all traffic"],
        },
        "spcs": [
            {"name": "VPN service", "explanation": "encrypted tunnel protecting banking logins on airport or hotel hotspots"},
            {"name": "Antivirus software", "explanation": "scans the phone for malware"},
        ],
    },
    {
        "id": "toy-password",
        "domain": "cybersecurity",
        "utterances": [
            ("user", "someone logged into my shopping account and now my email got hacked too"),
            ("assistant", "Do you use the same password on several sites?"),
            ("user", "yeah pretty much the same one everywhere"),
        ],
        "keyword": "shopping account",
        "gold": "password-manager",
        "diagnosis": {
            "summary": "Two accounts were taken over in a row.",
            "diagnosis": "Case B: credential stuffing against a password reused on many sites.",
            "measures": ["change passwords", "use unique passwords"],
        },
        "spcs": [
            {"name": "Password manager", "explanation": "generates and stores strong unique passwords, replacing reused passwords"},
            {"name": "Hardware security key", "explanation": "adds a phishing-resistant second factor"},
        ],
    },
    {
        "id": "toy-antivirus",
        "domain": "cybersecurity",
        "utterances": [
            ("user", "my laptop became super slow and the fan is always loud even when idle"),
            ("assistant", "Have you noticed unknown processes using the CPU?"),
            ("user", "there is some process at 90% cpu that i never installed"),
        ],
        "keyword": "fan is always loud",
        "gold": "antivirus-software",
        "diagnosis": {
            "summary": "Laptop is slow with constant high CPU load from an unknown process.",
            "diagnosis": "Case C: probable cryptojacking malware consuming the processor.",
            "measures": ["scan for malware", "remove unknown programs"],
        },
        "spcs": [
            {"name": "Antivirus software", "explanation": "real-time malware scanning that removes cryptomining malware from a slow computer"},
            {"name": "Cloud backup service", "explanation": "keeps copies of files before cleanup"},
        ],
    },
    {
        "id": "toy-snoring",
        "domain": "general",
        "utterances": [
            ("user", "how to cope with my partner's snoring, it's been super tough lately"),
            ("assistant", "Is it keeping you awake most nights?"),
            ("user", "yes, i wake up several times every night"),
            ("assistant", "Do you sleep on your side or your back?"),
            ("user", "mostly on my side"),
        ],
        "keyword": "snoring",
        "gold": "sleep-headphones",
        "diagnosis": {
            "summary": "User loses sleep because of a partner's noise at night.",
            "diagnosis": "Case D: nightly noise from the partner disrupts a side sleeper's sleep.",
            "measures": ["mask the noise", "comfortable ear protection"],
        },
        "spcs": [
            {"name": "Sleep headphones", "explanation": "soft headband headphones comfortable for side sleepers, sleeping through a partner's snoring"},
            {"name": "White noise machine", "explanation": "masks disruptive noise"},
        ],
    },
    {
        "id": "toy-backup",
        "domain": "general",
        "utterances": [
            ("user", "my external hard drive stopped spinning and all our family photos were on it"),
            ("assistant", "Did you have any other copy of the photos?"),
            ("user", "no that was the only one"),
        ],
        "keyword": "stopped spinning",
        "gold": "cloud-backup-service",
        "diagnosis": {
            "summary": "Family photos were lost when the only drive failed.",
            "diagnosis": "Case E: single copy of data with no backup before a disk failure.",
            "measures": ["attempt recovery", "keep offsite copies"],
        },
        "spcs": [
            {"name": "Cloud backup service", "explanation": "automatic offsite backup to recover family photos after a hard drive dies"},
            {"name": "Antivirus software", "explanation": "checks the drive for malware"},
        ],
    },
]


def conversations() -> list[tuple[Conversation, tuple[str, ...]]]:
    return [
        (
            Conversation(c["id"], tuple(Utterance(r, t) for r, t in c["utterances"]), c["domain"]),
            (c["gold"],),
        )
        for c in CASES
    ]


def chat_fixture() -> dict[str, Any]:
    """Mock-backend fixture: every toy conversation ranks its gold SPC first."""
    rules: list[dict[str, Any]] = []
    for c in CASES:
        rules.append({"tag": "step1-diagnosis", "match": c["keyword"], "response": c["diagnosis"]})
        rules.append({"tag": "step1-query", "match": c["diagnosis"]["diagnosis"], "response": {"spcs": c["spcs"]}})
        rules.append({"tag": "step3-rank", "match": c["diagnosis"]["diagnosis"], "prefer": [c["gold"]]})
    for name in CATALOG:
        rules.append({"tag": "catalog-gen", "match": f"Product category: {name}\n", "response": generated_entry(name)})
    for s in SCENARIOS:
        rules.append({"tag": "sim-user", "match": s["problem_essence"], "turns": s["turns"]})
    return {
        "embedding_dimension": EMBED_DIMENSION,
        "rules": rules,
        "defaults": {
            "step1-diagnosis": {
                "summary": "The user reported a problem.",
                "diagnosis": "Unclear root cause.",
                "measures": [],
            },
            "step1-query": {"spcs": [{"name": "Antivirus software", "explanation": "general protection"}]},
            "sim-assistant": "Thanks for explaining. Could you tell me a bit more about when this happens?",
        },
    }


SCENARIOS: list[dict[str, Any]] = [
    {
        "problem_essence": "You cannot sleep because of loud noise at night.",
        "root_cause": "your partner snores every night",
        "gold_spcs": ["sleep-headphones"],
        "domain_tag": "sleep",
        "turns": [
            "Hi, I keep waking up at night and I'm exhausted. Any tips?",
            "It's a noise problem, it happens next to me in bed every single night.",
            "I sleep on my side, so earplugs hurt.\n[END]",
        ],
    },
    {
        "problem_essence": "Your coffee tastes strange at home.",
        "root_cause": "the tap water is heavily chlorinated",
        "gold_spcs": ["water-filter-pitcher"],
        "domain_tag": "kitchen",
        "turns": [
            "My home coffee tastes off lately, like a swimming pool. Why?",
            "Same beans as before, and the machine is clean.",
            "The water itself smells a bit odd too.",
            "Thanks, that makes sense.\n[END]",
        ],
    },
    {
        "problem_essence": "Your back hurts after working from home.",
        "root_cause": "your kitchen chair gives no lumbar support",
        "gold_spcs": ["ergonomic-office-chair"],
        "domain_tag": "home office",
        "turns": [
            "My lower back aches by the end of every workday at home.",
            "I sit about eight hours a day at the kitchen table.",
            "No cushion or anything, just a wooden seat.",
            "I haven't tried anything yet.",
            "Okay, I'll look into it.",
        ],
    },
]


def scenarios() -> list[ScenarioSpec]:
    return [
        ScenarioSpec(s["problem_essence"], s["root_cause"], tuple(s["gold_spcs"]), s["domain_tag"]) for s in SCENARIOS
    ]


DEMO_CONFIG = """\
# Offline demo configuration; every backend call goes to mock.json.
paths:
  catalog_dir: catalog
  dataset: conversations.jsonl
  spcs: spcs.json
  search_fixtures: search
  report_dir: reports
mock:
  fixture: mock.json
models:
  chat: {model_id: mock-chat, endpoint: "mock://", temperature: 0.3}
  embedding: {model_id: mock-embed, endpoint: "mock://"}
  simulation: {model_id: mock-sim, endpoint: "mock://", temperature: 1.0}
pipeline:
  k_per_index: 5
  iterations: 3
  base_seed: 0
service:
  host: 127.0.0.1
  port: 8080
  request_timeout_s: 30
"""


def write_demo(directory: str | Path) -> Path:
    """Write a self-contained offline workspace for the CLI."""
    root = Path(directory)
    (root / "search").mkdir(parents=True, exist_ok=True)
    dump = lambda p, obj: p.write_text(json.dumps(obj, indent=2, ensure_ascii=False) + "\n")
    dump(root / "spcs.json", [{"spc_id": s.spc_id, "display_name": s.display_name} for s in SPCS])
    dump(root / "mock.json", chat_fixture())
    for query, results in search_results().items():
        dump(root / "search" / f"{slugify(query)}.json", results)
    lines = []
    for conv, gold in conversations():
        obj = conv.to_json()
        obj["gold_spcs"] = list(gold)
        lines.append(json.dumps(obj, ensure_ascii=False))
    (root / "conversations.jsonl").write_text("\n".join(lines) + "\n")
    dump(
        root / "scenarios.json",
        [{k: v for k, v in s.items() if k != "turns"} for s in SCENARIOS],
    )
    dump(root / "personas.json", DEFAULT_PERSONA_DISTRIBUTIONS)
    (root / "config.yaml").write_text(DEMO_CONFIG)
    return root
