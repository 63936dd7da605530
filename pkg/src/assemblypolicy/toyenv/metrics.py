"""Episode rollout, per-episode metrics and the seeded benchmark suite."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from ..actions import ActionCommand
from ..fusion import Observation
from .demos import EVAL_SPLIT, demo_scene
from .scene import SceneState, StepEvents, is_success, step
from .sensing import default_cameras, observe
from .skills import tokenize

Policy = Callable[[Observation, str], ActionCommand]


@dataclass
class EpisodeMetrics:
    grasp_success: bool
    overall_success: bool
    collision: bool
    steps_to_success: int | None

    def __post_init__(self):
        if self.overall_success and not self.grasp_success:
            raise ValueError("overall success without a grasp")
        if (self.steps_to_success is not None) != self.overall_success:
            raise ValueError("steps_to_success is set exactly when the episode succeeds")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class EpisodeTrace:
    skill: str
    seed: int
    actions: list[ActionCommand] = field(default_factory=list)
    events: list[StepEvents] = field(default_factory=list)
    extras: list[dict] = field(default_factory=list)
    final: SceneState | None = None

    def to_dict(self) -> dict:
        return {"skill": self.skill, "seed": self.seed,
                "actions": [a.to_dict() for a in self.actions],
                "events": [e.to_dict() for e in self.events]}


def rollout(policy: Policy, scene: SceneState, cameras, tokens, max_steps: int = 10) -> EpisodeTrace:
    """Observe, act, step until success, a rejected action, or ``max_steps``."""
    trace = EpisodeTrace(scene.skill, scene.seed)
    state = scene
    for _ in range(max_steps):
        obs = observe(state, cameras, tokens)
        action = policy(obs, scene.skill)
        state, ev = step(state, action)
        trace.actions.append(action)
        trace.events.append(ev)
        if ev.rejected or ev.success:
            break
    trace.final = state
    return trace


def evaluate(trace: EpisodeTrace, scene: SceneState | None = None, tolerance: float | None = None) -> EpisodeMetrics:
    """Metrics of a finished episode; ``scene`` defaults to the trace's final state."""
    final = scene if scene is not None else trace.final
    target = final.target.name
    grasp = any(ev.attached == target for ev in trace.events)
    success_idx = None
    if tolerance is None:
        for i, ev in enumerate(trace.events):
            if ev.success:
                success_idx = i + 1
                break
    elif is_success(final, tolerance):
        success_idx = len(trace.events)
    overall = success_idx is not None and grasp and not trace.events[success_idx - 1].rejected
    return EpisodeMetrics(grasp, overall, any(ev.collision for ev in trace.events),
                          success_idx if overall else None)


def summarize(metrics: list[EpisodeMetrics]) -> dict:
    n = len(metrics)
    steps = [m.steps_to_success for m in metrics if m.overall_success]
    return {
        "n_cases": n,
        "gsr": sum(m.grasp_success for m in metrics) / n if n else 0.0,
        "osr": sum(m.overall_success for m in metrics) / n if n else 0.0,
        "collision_rate": sum(m.collision for m in metrics) / n if n else 0.0,
        "avg_success_step": float(np.mean(steps)) if steps else None,
    }


def benchmark(policy: Policy, skills: list[str], difficulty: str = "easy", n_cases: int = 32, seed: int = 0, *,
              workspace, cameras: int = 3, camera_size: int = 128, instr_len: int = 8, max_steps: int = 10,
              meta: dict | None = None) -> dict:
    """Seeded evaluation episodes per skill; held-out scenes from the evaluation split."""
    cams = default_cameras(cameras, camera_size)
    report = {"difficulty": difficulty, "n_cases": n_cases, "seed": seed, "skills": {}}
    report.update(meta or {})
    for skill in skills:
        episodes = []
        for i in range(n_cases):
            scene, text = demo_scene(skill, i, seed, workspace, difficulty, split=EVAL_SPLIT)
            trace = rollout(policy, scene, cams, tokenize(text, instr_len), max_steps)
            m = evaluate(trace)
            episodes.append({"case": i, "seed": scene.seed, **m.to_dict(), "steps": len(trace.events)})
        block = summarize([EpisodeMetrics(e["grasp_success"], e["overall_success"], e["collision"],
                                          e["steps_to_success"]) for e in episodes])
        block["episodes"] = episodes
        report["skills"][skill] = block
    keys = ("gsr", "osr", "collision_rate")
    blocks = list(report["skills"].values())
    avg = {k: float(np.mean([b[k] for b in blocks])) for k in keys}
    steps = [b["avg_success_step"] for b in blocks if b["avg_success_step"] is not None]
    avg["avg_success_step"] = float(np.mean(steps)) if steps else None
    report["average"] = avg
    return report


def format_table(report: dict) -> str:
    rows = [f"{'skill':<22}{'GSR%':>8}{'OSR%':>8}{'Coll%':>8}{'Steps':>8}"]
    for name, b in list(report["skills"].items()) + [("average", report["average"])]:
        st = "-" if b["avg_success_step"] is None else f"{b['avg_success_step']:.2f}"
        rows.append(f"{name:<22}{100 * b['gsr']:>8.1f}{100 * b['osr']:>8.1f}"
                    f"{100 * b['collision_rate']:>8.1f}{st:>8}")
    return "\n".join(rows)


def write_report(report: dict, path) -> None:
    Path(path).write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
