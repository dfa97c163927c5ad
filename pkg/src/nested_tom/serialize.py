"""Episode JSONL, posterior CSV dumps, diagnostics, and run manifests."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict
from pathlib import Path
from typing import Iterable, Sequence

from .core import AgentRole, Diagnostics, Episode, EpisodeStep
from .errors import SchemaError
from .spaces import Posterior

SCHEMA_VERSION = "v1"


def episode_to_json(episode: Episode) -> dict:
    return {
        "v": SCHEMA_VERSION,
        "env": episode.env,
        "seed": episode.seed,
        "kind": episode.kind,
        "agents": [
            {"id": a.id, "level": a.level, "goal": a.goal, "attentive": a.attentive}
            for a in episode.agents
        ],
        "steps": [
            {"state": s.state, "actions": s.actions, "obs": s.obs} for s in episode.steps
        ],
    }


def episode_from_json(payload: dict) -> Episode:
    if payload.get("v") != SCHEMA_VERSION:
        raise SchemaError(f"unsupported episode schema version {payload.get('v')!r}")
    try:
        agents = tuple(
            AgentRole(a["id"], int(a["level"]), int(a["goal"]), bool(a.get("attentive", True)))
            for a in payload["agents"]
        )
        steps = tuple(
            EpisodeStep(s["state"], s["actions"], s["obs"]) for s in payload["steps"]
        )
        return Episode(
            env=payload["env"],
            seed=int(payload["seed"]),
            kind=payload.get("kind", ""),
            agents=agents,
            steps=steps,
        )
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"malformed episode record: {exc}") from exc


def save_episodes(episodes: Iterable[Episode], path: str | Path) -> int:
    """One episode per line; returns the number written."""
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for ep in episodes:
            fh.write(json.dumps(episode_to_json(ep), separators=(",", ":")))
            fh.write("\n")
            n += 1
    return n


def load_episodes(path: str | Path) -> list[Episode]:
    episodes = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                payload = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}:{line_no}: invalid JSON: {exc}") from exc
            episodes.append(episode_from_json(payload))
    return episodes


def dump_posteriors(
    rows: Sequence[tuple[str, int, int, float, float]], path: str | Path
) -> None:
    """Posterior dump: one row per (episode, step, hypothesis)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["episode", "t", "hypothesis_id", "prob", "weight_raw"])
        for episode, t, hyp, prob, raw in rows:
            writer.writerow([episode, t, hyp, f"{prob:.12g}", f"{raw:.12g}"])


def posterior_rows(
    episode_id: str, t: int, posterior: Posterior, raw_weights=None
) -> list[tuple[str, int, int, float, float]]:
    raw = raw_weights if raw_weights is not None else posterior.probs
    return [
        (episode_id, t, h, float(posterior.probs[h]), float(raw[h]))
        for h in range(posterior.space.size)
    ]


def write_diagnostics(diag: Diagnostics, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"all_weights_zero": diag.all_weights_zero}) + "\n")
        for entry in diag.ess_log:
            fh.write(json.dumps(entry, separators=(",", ":")) + "\n")


def config_hash(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def write_manifest(config: dict, out_dir: str | Path, extra: dict | None = None) -> str:
    """Run manifest: canonical config, its hash, and library versions."""
    import numpy

    from . import __version__

    payload = {
        "config": config,
        "config_hash": config_hash(config),
        "versions": {"nested_tom": __version__, "numpy": numpy.__version__},
    }
    if extra:
        payload.update(extra)
    out = Path(out_dir) / "manifest.json"
    out.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
    return payload["config_hash"]
