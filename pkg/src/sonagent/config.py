"""Run configuration: one JSON file describing tools, assets, and constants.

Paths are resolved relative to the config file so a bundle directory stays
relocatable. Credential values are never written in the file itself; they
must be `${ENV_VAR}` references, which keeps secrets in the environment.
"""

import json
import os
import re
from dataclasses import dataclass, field
from datetime import date

from .deliberation import RemoteBackend, ScriptedBackend
from .errors import ConfigError
from .evidence import (
    DEFAULT_CHUNK_OVERLAP,
    DEFAULT_CHUNK_SIZE,
    DEFAULT_TOP_K,
    DeterministicHashEmbedder,
    KnowledgeIndex,
    chunk_documents,
    load_knowledge_dir,
)
from .reporting import load_charts
from .toolkit import InProcessAdapter, RemoteAdapter, ToolRegistry
from .workflows import Engine, default_experts, register_default_tools

CREDENTIAL_KEYS = ("api_key", "token", "secret", "password")
_ENV_REF = re.compile(r"^\$\{([A-Za-z_][A-Za-z0-9_]*)\}$")

CONSTANT_DEFAULTS = {
    "rag_k": DEFAULT_TOP_K,
    "w_tool": 3,
    "delta": 15.0,
    "epsilon": 0.5,
    "min_area_px": 64,
    "residual_cap": 2.0,
    "chunk_size": DEFAULT_CHUNK_SIZE,
    "chunk_overlap": DEFAULT_CHUNK_OVERLAP,
    "keyframe_tau": 0.5,
    "keyframe_window": 15,
    "max_per_plane": 3,
}

# (lower bound, upper bound or None, must be integer)
CONSTANT_RANGES = {
    "rag_k": (1, None, True),
    "w_tool": (1, None, True),
    "delta": (0.0, None, False),
    "epsilon": (0.0, None, False),
    "min_area_px": (0, None, True),
    "residual_cap": (0.0, None, False),
    "chunk_size": (1, None, True),
    "chunk_overlap": (0, None, True),
    "keyframe_tau": (0.0, 1.0, False),
    "keyframe_window": (1, None, True),
    "max_per_plane": (1, None, True),
}

FUSION_PARAM_KEYS = ("delta", "epsilon", "min_area_px", "residual_cap")


@dataclass
class RunConfig:
    base_dir: str
    fixture_root: str
    charts_csv: str | None = None
    knowledge_dir: str | None = None
    voter_script: str | None = None
    voters: dict | None = None
    tools: dict = field(default_factory=lambda: {"transport": "in_process"})
    constants: dict = field(default_factory=dict)
    exam: dict | None = None

    def constant(self, name: str):
        return self.constants[name]


def _resolve_credentials(node, under_credential=None):
    """Replace `${VAR}` references under credential keys with env values."""
    if isinstance(node, dict):
        return {
            key: _resolve_credentials(
                value, key if key in CREDENTIAL_KEYS else None
            )
            for key, value in node.items()
        }
    if isinstance(node, list):
        return [_resolve_credentials(v) for v in node]
    if isinstance(node, str):
        match = _ENV_REF.match(node)
        if under_credential is not None:
            if match is None:
                raise ConfigError(
                    f"credential {under_credential!r} must be an environment"
                    " reference like ${VAR}, not a literal value"
                )
            var = match.group(1)
            if var not in os.environ:
                raise ConfigError(
                    f"credential {under_credential!r} references unset"
                    f" environment variable {var!r}"
                )
            return os.environ[var]
        if match is not None:
            raise ConfigError(
                f"environment interpolation is only allowed for credential"
                f" fields {CREDENTIAL_KEYS}, found {node!r}"
            )
    return node


def _check_constants(raw: dict) -> dict:
    merged = dict(CONSTANT_DEFAULTS)
    for key, value in raw.items():
        if key not in CONSTANT_RANGES:
            raise ConfigError(f"unknown constant {key!r}")
        lo, hi, integral = CONSTANT_RANGES[key]
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"constant {key!r} must be numeric")
        if integral and int(value) != value:
            raise ConfigError(f"constant {key!r} must be an integer")
        if value < lo or (hi is not None and value > hi):
            bound = f">= {lo}" if hi is None else f"in [{lo}, {hi}]"
            raise ConfigError(f"constant {key!r} must be {bound}, got {value}")
        merged[key] = int(value) if integral else float(value)
    if not merged["chunk_size"] > merged["chunk_overlap"]:
        raise ConfigError("chunk_size must exceed chunk_overlap")
    return merged


def _check_exam(exam: dict) -> dict:
    for key in ("lmp_date", "exam_date"):
        if key in exam:
            try:
                date.fromisoformat(exam[key])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"exam.{key} must be an ISO date: {exc}") from exc
    return exam


def load_config(path: str) -> RunConfig:
    """Parse and validate one config file; all referenced files must exist."""
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    raw = _resolve_credentials(raw)

    base_dir = os.path.dirname(os.path.abspath(path))

    def resolve(rel):
        return os.path.normpath(os.path.join(base_dir, rel))

    tools = raw.get("tools", {"transport": "in_process"})
    transport = tools.get("transport")
    if transport not in ("in_process", "remote"):
        raise ConfigError(f"tools.transport must be in_process or remote,"
                          f" got {transport!r}")
    if transport == "remote" and not tools.get("base_url"):
        raise ConfigError("remote tools need a base_url")

    fixture_root = resolve(raw.get("fixture_root", "."))
    if transport == "in_process" and not os.path.isdir(fixture_root):
        raise ConfigError(f"fixture_root is not a directory: {fixture_root}")

    cfg = RunConfig(
        base_dir=base_dir,
        fixture_root=fixture_root,
        tools=tools,
        constants=_check_constants(raw.get("constants", {})),
        voters=raw.get("voters"),
        exam=_check_exam(raw.get("exam", {})) or None,
    )

    for attr, kind in (("charts_csv", "file"), ("knowledge_dir", "dir"),
                       ("voter_script", "file")):
        rel = raw.get(attr)
        if rel is None:
            continue
        full = resolve(rel)
        ok = os.path.isfile(full) if kind == "file" else os.path.isdir(full)
        if not ok:
            raise ConfigError(f"{attr} does not exist: {full}")
        setattr(cfg, attr, full)

    if cfg.voters is not None:
        for required in ("endpoint", "model"):
            if not cfg.voters.get(required):
                raise ConfigError(f"voters.{required} is required for a"
                                  " remote voter backend")
        if cfg.voter_script is not None:
            raise ConfigError("set either voter_script or voters, not both")
    return cfg


def _voter_backend(cfg: RunConfig):
    if cfg.voters is not None:
        extra = {}
        if "temperature" in cfg.voters:
            extra["temperature"] = float(cfg.voters["temperature"])
        if "timeout_s" in cfg.voters:
            extra["timeout_s"] = float(cfg.voters["timeout_s"])
        return RemoteBackend(endpoint=cfg.voters["endpoint"],
                             model=cfg.voters["model"],
                             auth_env_var=cfg.voters.get("auth_env_var", ""),
                             **extra)
    if cfg.voter_script is not None:
        with open(cfg.voter_script, encoding="utf-8") as fh:
            return ScriptedBackend(json.load(fh))
    return None


def build_engine(cfg: RunConfig) -> Engine:
    """Assemble the standard engine described by a validated config."""
    registry = ToolRegistry()
    if cfg.tools["transport"] == "remote":
        adapter = RemoteAdapter(cfg.tools["base_url"],
                                timeout_s=float(cfg.tools.get("timeout_s", 10.0)))
    else:
        adapter = InProcessAdapter(cfg.fixture_root)
    register_default_tools(registry, adapter)

    knowledge = None
    if cfg.knowledge_dir is not None:
        chunks = chunk_documents(load_knowledge_dir(cfg.knowledge_dir),
                                 size=cfg.constant("chunk_size"),
                                 overlap=cfg.constant("chunk_overlap"))
        if chunks:
            knowledge = KnowledgeIndex(chunks, DeterministicHashEmbedder())

    charts = {}
    if cfg.charts_csv is not None:
        charts = load_charts(cfg.charts_csv)

    return Engine(
        registry=registry,
        experts=default_experts(),
        voter_backend=_voter_backend(cfg),
        knowledge=knowledge,
        charts=charts,
        rag_k=cfg.constant("rag_k"),
        w_tool=cfg.constant("w_tool"),
        fusion_params={k: cfg.constant(k) for k in FUSION_PARAM_KEYS},
    )
