"""Line-delimited JSON scene files.

Line 1 is a header ``{"format": "social-mamba-scenes", "version": 1}``; every
following non-blank line holds one scene::

    {"scene_id": ..., "dt": ..., "t_obs": ..., "t_pred": ...,
     "agents": [{"agent_id": 0, "is_ego": true, "positions": [[x, y], ...]}, ...]}

Floats are written with ``repr`` precision, so parse(serialize(scenes)) is exact.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import SceneError, SceneFormatError
from .grid import AgentTrack, Scene

FORMAT = "social-mamba-scenes"
VERSION = 1


def scene_to_dict(scene: Scene) -> dict:
    return {
        "scene_id": scene.scene_id,
        "dt": float(scene.dt),
        "t_obs": scene.t_obs,
        "t_pred": scene.t_pred,
        "agents": [
            {"agent_id": a.agent_id, "is_ego": a.agent_id == scene.ego_id, "positions": a.positions.tolist()}
            for a in scene.agents
        ],
    }


def scene_from_dict(d: dict) -> Scene:
    try:
        agents_raw = d["agents"]
        egos = [a["agent_id"] for a in agents_raw if a.get("is_ego", False)]
        if len(egos) != 1:
            raise SceneError(f"scene {d.get('scene_id')!r}: expected exactly one ego, found {len(egos)}")
        agents = [AgentTrack(int(a["agent_id"]), np.array(a["positions"], dtype=np.float64).reshape(-1, 2))
                  for a in agents_raw]
        return Scene(str(d["scene_id"]), agents, ego_id=int(egos[0]), t_obs=int(d["t_obs"]),
                     t_pred=int(d["t_pred"]), dt=float(d["dt"]))
    except KeyError as e:
        raise SceneError(f"missing field {e.args[0]!r}") from None
    except (TypeError, ValueError) as e:
        raise SceneError(f"bad field value: {e}") from None


def serialize_scenes(scenes: list[Scene]) -> str:
    lines = [json.dumps({"format": FORMAT, "version": VERSION})]
    lines += [json.dumps(scene_to_dict(s), allow_nan=False) for s in scenes]
    return "\n".join(lines) + "\n"


def parse_scenes(text: str) -> list[Scene]:
    lines = text.splitlines()
    if not lines:
        raise SceneFormatError("empty scene file (missing header)", 1)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise SceneFormatError(f"header is not JSON: {e.msg}", 1) from None
    if not isinstance(header, dict) or header.get("format") != FORMAT:
        raise SceneFormatError(f"header must name format {FORMAT!r}", 1)
    if header.get("version") != VERSION:
        raise SceneFormatError(f"unsupported version {header.get('version')!r}", 1)
    scenes = []
    for no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
        except json.JSONDecodeError as e:
            raise SceneFormatError(f"invalid JSON: {e.msg}", no) from None
        if not isinstance(d, dict):
            raise SceneFormatError("scene line must be a JSON object", no)
        try:
            scenes.append(scene_from_dict(d))
        except SceneError as e:
            raise SceneFormatError(str(e), no) from None
    return scenes


def write_scenes(path: str | Path, scenes: list[Scene]):
    Path(path).write_text(serialize_scenes(scenes), encoding="utf-8")


def read_scenes(path: str | Path) -> list[Scene]:
    return parse_scenes(Path(path).read_text(encoding="utf-8"))
