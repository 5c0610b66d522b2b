"""Synthetic constant-velocity-with-avoidance scenes for overfit and
plumbing tests. The generator is the ground-truth oracle: trajectories are
produced by a fixed simulation, so a model that memorizes them can be scored
against exact targets."""

from __future__ import annotations

from typing import List

import numpy as np

from .data import TrajectoryScene

DT = 0.4


def simulate_scene(
    rng: np.random.Generator,
    n_peds: int = 2,
    total_len: int = 20,
    obs_len: int = 8,
    avoid_radius: float = 2.0,
    avoid_gain: float = 1.5,
) -> TrajectoryScene:
    """Pedestrians walk at constant velocity and softly repel each other
    inside avoid_radius."""
    pos = rng.uniform(-4.0, 4.0, size=(n_peds, 2))
    speed = rng.uniform(0.8, 1.4, size=(n_peds, 1))
    angle = rng.uniform(0.0, 2.0 * np.pi, size=n_peds)
    vel = speed * np.stack([np.cos(angle), np.sin(angle)], axis=1)
    track = np.zeros((n_peds, total_len, 2))
    for t in range(total_len):
        track[:, t] = pos
        acc = np.zeros_like(pos)
        for i in range(n_peds):
            for j in range(n_peds):
                if i == j:
                    continue
                diff = pos[i] - pos[j]
                dist = np.linalg.norm(diff)
                if 1e-9 < dist < avoid_radius:
                    acc[i] += avoid_gain * (avoid_radius - dist) * diff / dist
        vel = vel + acc * DT
        pos = pos + vel * DT
    return TrajectoryScene(
        ped_ids=[f"sim{i}" for i in range(n_peds)],
        positions=track,
        presence=np.ones((n_peds, total_len), dtype=bool),
        obs_len=obs_len,
        dataset="synthetic",
    )


def make_synthetic_scenes(
    count: int, seed: int, n_peds: int = 2, obs_len: int = 8, pred_len: int = 12
) -> List[TrajectoryScene]:
    rng = np.random.default_rng(seed)
    return [
        simulate_scene(rng, n_peds=n_peds, total_len=obs_len + pred_len, obs_len=obs_len)
        for _ in range(count)
    ]
