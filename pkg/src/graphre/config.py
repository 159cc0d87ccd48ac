"""Pipeline configuration: defaults < YAML file < command-line flags."""

from __future__ import annotations

import copy
import datetime as _dt
import json
import os
import platform
import subprocess
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

import yaml

from graphre.corpus import atomic_write_text

DEFAULTS: dict[str, Any] = {
    "workspace": ".",
    "paths": {
        "raw": "data/crossre",
        "corpus": "work/corpus",
        "augmented": "work/augmented",
        "cache": "work/cache",
        "runs": "work/runs",
        "reports": "work/reports",
    },
    "augment": {
        "offline": False,
        "fixtures": None,
        "model": "gpt-3.5-turbo",
        "temperature": None,
        "retries": 3,
        "concurrency": 4,
        "fallback": True,
        "api_key_env": "OPENAI_API_KEY",
        "base_url": "https://api.openai.com/v1",
    },
    "encoder": {
        "model_name": "bert-base-cased",
        "max_length": 512,
        "alignment": "mean",
        "finetune": True,
        "model_dir": None,
        "batch_size": 16,
    },
    "graph": {
        "gcn_layers": 2,
        "gcn_activation": "relu",
        "gat_heads": 1,
        "use_gcn": True,
        "use_gat": True,
        "hidden_dim": None,
    },
    "training": {
        "seed": 42,
        "epochs": 10,
        "lr_encoder": 2e-5,
        "lr_head": 1e-3,
        "batch_size": 16,
        "augmented": True,
        "threshold": 0.5,
        "multi_label": True,
        "max_grad_norm": 1.0,
        "domains": ["news", "politics", "science", "music", "literature", "ai"],
        "fusions": ["none", "mean", "max", "tanh", "times"],
        "train_domain": None,
    },
    "report": {
        "split": "test",
        "domains": None,
        "fusions": None,
        "figures": True,
    },
}

CACHE_ENV = "GRAPHRE_CACHE_DIR"


class ConfigError(ValueError):
    pass


def deep_merge(base: dict, update: Mapping) -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, Mapping) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def set_dotted(cfg: dict, dotted: str, value: Any) -> None:
    parts = dotted.split(".")
    cur = cfg
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
        if not isinstance(cur, dict):
            raise ConfigError(f"{dotted}: {p} is not a section")
    cur[parts[-1]] = value


def parse_override(raw: str) -> tuple[str, Any]:
    if "=" not in raw:
        raise ConfigError(f"override {raw!r} must look like key=value")
    key, val = raw.split("=", 1)
    return key.strip(), yaml.safe_load(val)


@dataclass
class PipelineConfig:
    data: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))
    root: Path = field(default_factory=Path.cwd)

    @classmethod
    def load(
        cls,
        path: Optional[Path] = None,
        overrides: Sequence[str] = (),
        flags: Optional[Mapping[str, Any]] = None,
    ) -> "PipelineConfig":
        data = copy.deepcopy(DEFAULTS)
        root = Path.cwd()
        if path is not None:
            path = Path(path)
            try:
                loaded = yaml.safe_load(path.read_text()) or {}
            except OSError as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from exc
            if not isinstance(loaded, dict):
                raise ConfigError(f"{path}: top level must be a mapping")
            data = deep_merge(data, loaded)
            root = path.resolve().parent
        for raw in overrides:
            set_dotted(data, *parse_override(raw))
        for key, value in (flags or {}).items():
            if value is not None:
                set_dotted(data, key, value)
        root = (root / data.get("workspace", ".")).resolve()
        if os.environ.get(CACHE_ENV) and not any(k == "paths.cache" for k in (flags or {}) if (flags or {})[k] is not None):
            data["paths"]["cache"] = os.environ[CACHE_ENV]
        return cls(data=data, root=root)

    def section(self, name: str) -> dict:
        return self.data[name]

    def path(self, name: str) -> Path:
        p = Path(self.data["paths"][name])
        return p if p.is_absolute() else self.root / p

    def to_dict(self) -> dict:
        return json.loads(json.dumps(self.data))


def code_version() -> str:
    from graphre import __version__

    try:
        rev = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            cwd=Path(__file__).parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if rev.returncode == 0:
            return f"{__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_run_metadata(out_dir: Path, command: str, cfg: PipelineConfig, started: _dt.datetime, extra: Optional[dict] = None) -> Path:
    import torch

    record = {
        "command": command,
        "config": cfg.to_dict(),
        "workspace": str(cfg.root),
        "code_version": code_version(),
        "seed": cfg.data["training"]["seed"],
        "started": started.isoformat(timespec="seconds"),
        "finished": _dt.datetime.now().isoformat(timespec="seconds"),
        "python": platform.python_version(),
        "torch": torch.__version__,
    }
    if extra:
        record.update(extra)
    path = Path(out_dir) / f"{command}.meta.json"
    atomic_write_text(path, json.dumps(record, indent=2, sort_keys=True, default=str) + "\n")
    return path
