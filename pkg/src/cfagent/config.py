"""Service configuration: one JSON document, environment overrides for the
listen address (CFAGENT_LISTEN) and data directory (CFAGENT_DATA_DIR) only.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .engine import SelectionPolicy
from .stubs import stub_schemas
from .toolwire import CF_WORKFLOW_TOOL, ArgSpec, ToolDescriptor, ToolSchema

DEFAULT_LISTEN = "127.0.0.1:8008"
DEFAULT_POOL = {"cpu": 8, "gpu": 2}


class ConfigError(Exception):
    pass


@dataclass
class ServerConfig:
    listen: str = DEFAULT_LISTEN
    data_dir: str = "./data"
    scenario_dir: str | None = None
    pool: dict[str, int] = field(default_factory=lambda: dict(DEFAULT_POOL))
    tools: list[ToolDescriptor] = field(default_factory=list)
    head_endpoint: str | None = None
    default_scenario: str = "happy-edit"
    t_max: int = 12
    approval_mode: str = "auto"
    policy: SelectionPolicy = field(default_factory=SelectionPolicy)
    editors: tuple[str, ...] = ("edit_a", "edit_b")
    strengths: tuple[float, ...] = (0.4, 0.7, 1.0)

    def validate(self) -> None:
        for cls, n in self.pool.items():
            if n < 1:
                raise ConfigError(f"pool capacity {cls}={n} must be >= 1")
        if self.scenario_dir is not None and not Path(self.scenario_dir).is_dir():
            raise ConfigError(f"scenario_dir {self.scenario_dir!r} does not exist")
        names = [d.name for d in self.tools]
        for editor in self.editors:
            if editor not in names:
                raise ConfigError(f"editor {editor!r} is not a configured tool")

    def to_dict(self) -> dict[str, Any]:
        return {
            "approval_mode": self.approval_mode,
            "data_dir": self.data_dir,
            "default_scenario": self.default_scenario,
            "editors": list(self.editors),
            "head_endpoint": self.head_endpoint,
            "listen": self.listen,
            "policy": self.policy.to_dict(),
            "pool": dict(sorted(self.pool.items())),
            "scenario_dir": self.scenario_dir,
            "strengths": list(self.strengths),
            "t_max": self.t_max,
            "tools": [d.to_dict() for d in self.tools],
        }


def default_tools() -> list[ToolDescriptor]:
    """The full stub suite plus the internal cf_workflow pseudo-tool."""
    schemas = stub_schemas()
    gpu = {"edit_a", "edit_b"}
    fallbacks = {"edit_a": ("edit_b",)}
    descriptors = [
        ToolDescriptor(
            name=name,
            schema=ToolSchema.from_dict(schema),
            endpoint=f"stub:{name}",
            capacity_class="gpu" if name in gpu else "cpu",
            timeout_ms=10000,
            fallbacks=fallbacks.get(name, ()),
        )
        for name, schema in sorted(schemas.items())
    ]
    descriptors.append(ToolDescriptor(
        name=CF_WORKFLOW_TOOL,
        schema=ToolSchema(args={
            "image": ArgSpec("artifact"),
            "prompt": ArgSpec("string", required=False),
            "cx": ArgSpec("int", required=False),
            "cy": ArgSpec("int", required=False),
            "r": ArgSpec("int", required=False),
        }, returns="{best, candidates, difference_map, prompt, region}"),
        endpoint=f"internal:{CF_WORKFLOW_TOOL}",
        capacity_class="cpu",
        timeout_ms=120000,
    ))
    return descriptors


def default_config(data_dir: str = "./data") -> ServerConfig:
    cfg = ServerConfig(data_dir=data_dir, tools=default_tools())
    cfg.validate()
    return cfg


def config_from_dict(d: dict[str, Any]) -> ServerConfig:
    cfg = ServerConfig(
        listen=d.get("listen", DEFAULT_LISTEN),
        data_dir=d.get("data_dir", "./data"),
        scenario_dir=d.get("scenario_dir"),
        pool={k: int(v) for k, v in d.get("pool", DEFAULT_POOL).items()},
        tools=[ToolDescriptor.from_dict(t) for t in d["tools"]] if "tools" in d else default_tools(),
        head_endpoint=d.get("head_endpoint"),
        default_scenario=d.get("default_scenario", "happy-edit"),
        t_max=int(d.get("t_max", 12)),
        approval_mode=d.get("approval_mode", "auto"),
        policy=SelectionPolicy.from_dict(d.get("policy", {})),
        editors=tuple(d.get("editors", ("edit_a", "edit_b"))),
        strengths=tuple(float(s) for s in d.get("strengths", (0.4, 0.7, 1.0))),
    )
    return cfg


def load_config(path: str | Path | None = None, data_dir: str | None = None,
                listen: str | None = None) -> ServerConfig:
    """Config file -> env overrides -> explicit CLI overrides, then validate."""
    if path is not None:
        try:
            cfg = config_from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError, KeyError) as exc:
            raise ConfigError(f"cannot load config {path}: {exc}") from exc
    else:
        cfg = ServerConfig(tools=default_tools())
    env_listen = os.environ.get("CFAGENT_LISTEN")
    env_data = os.environ.get("CFAGENT_DATA_DIR")
    if env_listen:
        cfg.listen = env_listen
    if env_data:
        cfg.data_dir = env_data
    if listen:
        cfg.listen = listen
    if data_dir:
        cfg.data_dir = data_dir
    cfg.validate()
    return cfg


def save_config(cfg: ServerConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
