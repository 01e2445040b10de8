"""Application configuration: one YAML file plus ``IMPRESS_*`` environment overrides."""

from __future__ import annotations

import dataclasses
import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from impress.catalog import CatalogSource
from impress.gateway import (
    PIPELINE_TEMPERATURE,
    SIMULATION_TEMPERATURE,
    Gateway,
    HttpChatBackend,
    HttpEmbedBackend,
    ModelConfig,
)
from impress.mock import fixture_backends
from impress.pipeline import PipelineOptions, fingerprint_of

CHAT_ENDPOINT = "https://api.openai.com/v1/chat/completions"
EMBED_ENDPOINT = "https://api.openai.com/v1/embeddings"
LLM_KEY_ENV = "IMPRESS_LLM_API_KEY"
EMBED_KEY_ENV = "IMPRESS_EMBED_API_KEY"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AppConfig:
    chat: ModelConfig = ModelConfig("gpt-4o", CHAT_ENDPOINT, PIPELINE_TEMPERATURE, api_key_ref=LLM_KEY_ENV)
    embedding: ModelConfig = ModelConfig("text-embedding-3-small", EMBED_ENDPOINT, PIPELINE_TEMPERATURE, api_key_ref=EMBED_KEY_ENV)
    simulation: ModelConfig = ModelConfig("gpt-4o-mini", CHAT_ENDPOINT, SIMULATION_TEMPERATURE, api_key_ref=LLM_KEY_ENV)
    pipeline: PipelineOptions = PipelineOptions()
    paths: Mapping[str, str] = field(default_factory=dict)
    search_endpoint: str = ""
    results_per_query: int = 5
    mock_fixture: str | None = None
    host: str = "127.0.0.1"
    port: int = 8080
    request_timeout_s: float = 30.0

    def path(self, name: str, default: str | None = None) -> str | None:
        return self.paths.get(name, default)

    def fingerprint_json(self) -> dict[str, Any]:
        fixture_hash = None
        if self.mock_fixture and Path(self.mock_fixture).exists():
            fixture_hash = hashlib.sha256(Path(self.mock_fixture).read_bytes()).hexdigest()
        return {
            "chat": dataclasses.asdict(self.chat),
            "embedding": dataclasses.asdict(self.embedding),
            "simulation": dataclasses.asdict(self.simulation),
            "pipeline": self.pipeline.to_json(),
            "results_per_query": self.results_per_query,
            "mock_fixture": fixture_hash,
        }

    def fingerprint(self) -> str:
        return fingerprint_of(self.fingerprint_json())


def _model(section: Mapping[str, Any] | None, base: ModelConfig) -> ModelConfig:
    section = dict(section or {})
    unknown = set(section) - {f.name for f in dataclasses.fields(ModelConfig)}
    if unknown:
        raise ConfigError(f"unknown model keys {sorted(unknown)}")
    return dataclasses.replace(base, **section)


def config_from_dict(data: Mapping[str, Any], base_dir: str | Path = ".", env: Mapping[str, str] | None = None) -> AppConfig:
    env = os.environ if env is None else env
    base_dir = Path(base_dir)
    default = AppConfig()
    try:
        models = data.get("models") or {}
        chat = _model(models.get("chat"), default.chat)
        embedding = _model(models.get("embedding"), default.embedding)
        simulation = _model(models.get("simulation"), default.simulation)
        if env.get("IMPRESS_LLM_ENDPOINT"):
            chat = dataclasses.replace(chat, endpoint=env["IMPRESS_LLM_ENDPOINT"])
            simulation = dataclasses.replace(simulation, endpoint=env["IMPRESS_LLM_ENDPOINT"])
        if env.get("IMPRESS_EMBED_ENDPOINT"):
            embedding = dataclasses.replace(embedding, endpoint=env["IMPRESS_EMBED_ENDPOINT"])

        p = dict(data.get("pipeline") or {})
        if "enabled_sources" in p:
            p["enabled_sources"] = tuple(CatalogSource(s) for s in p["enabled_sources"])
        pipeline = PipelineOptions(**p)

        paths = {k: str(base_dir / v) for k, v in (data.get("paths") or {}).items() if v}
        mock = (data.get("mock") or {}).get("fixture")
        search = data.get("search") or {}
        service = data.get("service") or {}
        return AppConfig(
            chat=chat,
            embedding=embedding,
            simulation=simulation,
            pipeline=pipeline,
            paths=paths,
            search_endpoint=search.get("endpoint", ""),
            results_per_query=int(search.get("results_per_query", 5)),
            mock_fixture=str(base_dir / mock) if mock else None,
            host=str(service.get("host", default.host)),
            port=int(service.get("port", default.port)),
            request_timeout_s=float(service.get("request_timeout_s", default.request_timeout_s)),
        )
    except (TypeError, ValueError, AttributeError) as e:
        raise ConfigError(f"invalid configuration: {e}") from e


def load_config(path: str | Path | None = None, env: Mapping[str, str] | None = None) -> AppConfig:
    if path is None:
        return config_from_dict({}, ".", env)
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return config_from_dict(data, path.parent, env)


def make_gateway(config: AppConfig, mock_fixture: str | None = None) -> Gateway:
    """Mock backends when a fixture is configured, HTTP clients otherwise."""
    fixture = mock_fixture or config.mock_fixture
    if fixture:
        chat, embed = fixture_backends(fixture)
        return Gateway(chat, embed)
    return Gateway(HttpChatBackend(), HttpEmbedBackend())
