"""Plain key-value run configuration files.

INI-style sections map onto :class:`remalis.trainer.RunConfig` fields:

    [run]        seed, episodes, ticks, network_preset
    [train]      lr, batch_size, weight_decay, warmup_frac, alpha, beta,
                 lambda_aux, discount, sample_stride, channel_steps_per_update
    [channel]    mode, layers, hidden, broadcast_period, learned_messages
    [planner]    hidden, graph_head
    [grounding]  dim, lambda_gate, gate, decay
    [execution]  c_width, enc_width, lambda_aux (alias), feedback_enabled,
                 replan_threshold
    [env]        kind, tier, agents, alignment_threshold

Unknown sections or keys are rejected.  CLI flags override file values.
"""
from __future__ import annotations

import configparser
import dataclasses
from pathlib import Path

from .trainer import RunConfig


class ConfigFileError(ValueError):
    """Unparseable file, unknown key, or bad value."""


_KEY_MAP = {
    ("run", "seed"): ("seed", int),
    ("run", "episodes"): ("episodes", int),
    ("run", "ticks"): ("ticks", int),
    ("run", "network_preset"): ("network_preset", str),
    ("train", "lr"): ("lr", float),
    ("train", "batch_size"): ("batch_size", int),
    ("train", "weight_decay"): ("weight_decay", float),
    ("train", "warmup_frac"): ("warmup_frac", float),
    ("train", "alpha"): ("alpha", float),
    ("train", "beta"): ("beta", float),
    ("train", "lambda_aux"): ("lambda_aux", float),
    ("train", "discount"): ("discount", float),
    ("train", "sample_stride"): ("sample_stride", int),
    ("train", "channel_steps_per_update"): ("channel_steps_per_update", int),
    ("channel", "mode"): ("channel_mode", str),
    ("channel", "layers"): ("channel_layers", int),
    ("channel", "hidden"): ("channel_hidden", int),
    ("channel", "broadcast_period"): ("broadcast_period", int),
    ("channel", "learned_messages"): ("learned_messages", "bool"),
    ("planner", "hidden"): ("planner_hidden", int),
    ("planner", "graph_head"): ("planner_graph_head", "bool"),
    ("grounding", "dim"): ("grounding_dim", int),
    ("grounding", "lambda_gate"): ("lambda_gate", float),
    ("grounding", "gate"): ("gate_mode", str),
    ("grounding", "decay"): ("confusion_decay", float),
    ("execution", "c_width"): ("c_width", int),
    ("execution", "enc_width"): ("policy_enc_width", int),
    ("execution", "feedback_enabled"): ("feedback_enabled", "bool"),
    ("execution", "replan_threshold"): ("replan_threshold", int),
    ("env", "kind"): ("env_kind", str),
    ("env", "tier"): ("tier", str),
    ("env", "agents"): ("n_agents", int),
    ("env", "alignment_threshold"): ("alignment_threshold", float),
}

_BOOL = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def load_config(path: str | Path, overrides: dict | None = None) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigFileError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigFileError(f"cannot parse {path}: {exc}") from exc
    values: dict = {}
    for section in parser.sections():
        for key, raw in parser.items(section):
            spec = _KEY_MAP.get((section, key))
            if spec is None:
                raise ConfigFileError(f"unknown config key [{section}] {key} in {path}")
            field, caster = spec
            try:
                if caster == "bool":
                    values[field] = _BOOL[raw.strip().lower()]
                else:
                    values[field] = caster(raw)
            except (ValueError, KeyError) as exc:
                raise ConfigFileError(
                    f"bad value for [{section}] {key} in {path}: {raw!r}") from exc
    if overrides:
        values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return RunConfig(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigFileError(f"invalid configuration in {path}: {exc}") from exc


def config_to_text(config: RunConfig) -> str:
    """Render a config in the file format (inverse of :func:`load_config`)."""
    by_section: dict[str, list[tuple[str, str]]] = {}
    field_to_key = {field: (section, key) for (section, key), (field, _c) in _KEY_MAP.items()}
    for f in dataclasses.fields(config):
        if f.name not in field_to_key:
            continue
        section, key = field_to_key[f.name]
        value = getattr(config, f.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        by_section.setdefault(section, []).append((key, str(value)))
    lines = []
    for section in ("run", "train", "channel", "planner", "grounding", "execution", "env"):
        if section in by_section:
            lines.append(f"[{section}]")
            lines.extend(f"{k} = {v}" for k, v in by_section[section])
            lines.append("")
    return "\n".join(lines)
