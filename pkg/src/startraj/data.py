"""Dataset ingestion, scene windowing, preprocessing, augmentation, splits,
and packing scenes into masked batches.

Input files are whitespace-separated `frame_id ped_id x y` lines (world-frame
meters, frames already downsampled to 0.4 s); '#' lines are comments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import DataFormatError

DATASET_NAMES = ("ETH", "HOTEL", "ZARA1", "ZARA2", "UNIV")


@dataclass
class Tracklet:
    """One gap-free stretch of a pedestrian's observations."""

    ped_id: str
    frames: np.ndarray  # (L,) ints, uniformly spaced
    xy: np.ndarray      # (L, 2)


@dataclass
class RawTrajectories:
    tracklets: List[Tracklet]
    frame_step: int


@dataclass
class TrajectoryScene:
    """One 20-frame window of a scene.

    positions are world coordinates until preprocess() sets per-pedestrian
    origins, after which they are origin-shifted and world_positions() undoes
    the shift. Absent (pedestrian, step) slots are zero-filled.
    """

    ped_ids: List[str]
    positions: np.ndarray   # (N, T, 2)
    presence: np.ndarray    # (N, T) bool
    obs_len: int
    dataset: str = ""
    origins: Optional[np.ndarray] = None  # (N, 2); set by preprocess
    targets: np.ndarray = field(default=None)  # (N,) bool: present all T frames

    def __post_init__(self):
        if self.targets is None:
            self.targets = self.presence.all(axis=1)

    @property
    def n_peds(self) -> int:
        return self.positions.shape[0]

    @property
    def total_len(self) -> int:
        return self.positions.shape[1]

    @property
    def pred_len(self) -> int:
        return self.total_len - self.obs_len

    @property
    def rollout_mask(self) -> np.ndarray:
        """Pedestrians with a full observation window; these get predictions."""
        return self.presence[:, : self.obs_len].all(axis=1)

    def world_positions(self) -> np.ndarray:
        if self.origins is None:
            return self.positions
        return np.where(
            self.presence[:, :, None], self.positions + self.origins[:, None, :], 0.0
        )


def load_dataset(path: str) -> RawTrajectories:
    """Parse a trajectory file into gap-split tracklets."""
    per_ped: Dict[str, List[Tuple[int, float, float]]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            parts = stripped.split()
            if len(parts) != 4:
                raise DataFormatError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
            try:
                frame = int(float(parts[0]))
                ped = parts[1]
                x, y = float(parts[2]), float(parts[3])
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from None
            if not (math.isfinite(x) and math.isfinite(y)):
                raise DataFormatError(f"{path}:{lineno}: non-finite coordinate")
            per_ped.setdefault(ped, []).append((frame, x, y))

    diffs = []
    for ped, obs in per_ped.items():
        frames = [o[0] for o in obs]
        if any(b <= a for a, b in zip(frames, frames[1:])):
            raise DataFormatError(f"non-monotone frames for pedestrian {ped}")
        diffs.extend(b - a for a, b in zip(frames, frames[1:]))
    step = min(diffs) if diffs else 1

    tracklets: List[Tracklet] = []
    for ped, obs in per_ped.items():
        run: List[Tuple[int, float, float]] = [obs[0]]
        for prev, cur in zip(obs, obs[1:]):
            if cur[0] - prev[0] == step:
                run.append(cur)
            else:
                tracklets.append(_to_tracklet(ped, run))
                run = [cur]
        tracklets.append(_to_tracklet(ped, run))
    return RawTrajectories(tracklets=tracklets, frame_step=step)


def _to_tracklet(ped: str, run: List[Tuple[int, float, float]]) -> Tracklet:
    return Tracklet(
        ped_id=ped,
        frames=np.array([r[0] for r in run], dtype=np.int64),
        xy=np.array([[r[1], r[2]] for r in run], dtype=np.float64),
    )


def make_scenes(
    raw: RawTrajectories,
    obs: int = 8,
    pred: int = 12,
    stride: int = 1,
    dataset: str = "",
) -> List[TrajectoryScene]:
    """Slide (obs+pred)-frame windows over the recording; keep windows with at
    least one pedestrian observed for the whole window. Co-present pedestrians
    are carried along as masked neighbors."""
    if stride < 1:
        raise DataFormatError("stride must be >= 1")
    total = obs + pred
    if not raw.tracklets:
        return []
    step = raw.frame_step
    lo = min(int(t.frames[0]) for t in raw.tracklets)
    hi = max(int(t.frames[-1]) for t in raw.tracklets)
    scenes = []
    start = lo
    while start + (total - 1) * step <= hi:
        frames = start + step * np.arange(total)
        members = []
        for t in raw.tracklets:
            mask = np.isin(frames, t.frames)
            if mask.any():
                members.append((t, mask))
        if members:
            n = len(members)
            positions = np.zeros((n, total, 2))
            presence = np.zeros((n, total), dtype=bool)
            ped_ids = []
            for i, (t, mask) in enumerate(members):
                idx = np.searchsorted(t.frames, frames[mask])
                positions[i, mask] = t.xy[idx]
                presence[i] = mask
                ped_ids.append(t.ped_id)
            scene = TrajectoryScene(
                ped_ids=ped_ids, positions=positions, presence=presence,
                obs_len=obs, dataset=dataset,
            )
            if scene.targets.any():
                scenes.append(scene)
        start += stride * step
    return scenes


def preprocess(scene: TrajectoryScene) -> TrajectoryScene:
    """Shift each pedestrian's coordinates by its own last-observation-frame
    position. Graph geometry stays in world coordinates (per-pedestrian shifts
    are not isometries of pairwise distances)."""
    if scene.origins is not None:
        return scene
    n, total = scene.n_peds, scene.total_len
    origins = np.zeros((n, 2))
    for i in range(n):
        obs_steps = np.flatnonzero(scene.presence[i, : scene.obs_len])
        if obs_steps.size:
            origins[i] = scene.positions[i, obs_steps[-1]]
        else:
            origins[i] = scene.positions[i, np.flatnonzero(scene.presence[i])[0]]
    shifted = np.where(
        scene.presence[:, :, None], scene.positions - origins[:, None, :], 0.0
    )
    return TrajectoryScene(
        ped_ids=list(scene.ped_ids), positions=shifted,
        presence=scene.presence.copy(), obs_len=scene.obs_len,
        dataset=scene.dataset, origins=origins, targets=scene.targets.copy(),
    )


def augment_rotation(
    scene: TrajectoryScene, rng: np.random.Generator, angle: Optional[float] = None
) -> TrajectoryScene:
    """Rotate the whole scene about the origin by a uniform random angle."""
    theta = rng.uniform(0.0, 2.0 * math.pi) if angle is None else angle
    c, s = math.cos(theta), math.sin(theta)
    rot = np.array([[c, s], [-s, c]])  # row-vector convention: p' = p @ rot
    positions = np.where(scene.presence[:, :, None], scene.positions @ rot, 0.0)
    origins = scene.origins @ rot if scene.origins is not None else None
    return TrajectoryScene(
        ped_ids=list(scene.ped_ids), positions=positions,
        presence=scene.presence.copy(), obs_len=scene.obs_len,
        dataset=scene.dataset, origins=origins, targets=scene.targets.copy(),
    )


def leave_one_out_split(datasets: Dict[str, object], held_out: str):
    """train = every dataset except held_out; test = held_out."""
    if held_out not in datasets:
        raise DataFormatError(
            f"unknown dataset {held_out!r}; have {sorted(datasets)}"
        )
    train = {k: v for k, v in datasets.items() if k != held_out}
    return train, {held_out: datasets[held_out]}


@dataclass
class Batch:
    """Scenes packed along the pedestrian axis. Cross-scene attention is
    forbidden structurally: graphs are built per scene group, and the temporal
    transformer never mixes pedestrians."""

    scene: TrajectoryScene
    scene_ids: np.ndarray  # (N,) index of the source scene per pedestrian
    n_scenes: int
    oversized: bool = False

    @property
    def n_peds(self) -> int:
        return self.scene.n_peds


def merge_scenes(scenes: Sequence[TrajectoryScene]) -> Batch:
    if not scenes:
        raise DataFormatError("cannot merge an empty scene list")
    total = scenes[0].total_len
    obs = scenes[0].obs_len
    shifted = scenes[0].origins is not None
    for s in scenes:
        if s.total_len != total or s.obs_len != obs or (s.origins is not None) != shifted:
            raise DataFormatError("scenes in a batch must share window layout")
    merged = TrajectoryScene(
        ped_ids=[pid for s in scenes for pid in s.ped_ids],
        positions=np.concatenate([s.positions for s in scenes]),
        presence=np.concatenate([s.presence for s in scenes]),
        obs_len=obs,
        dataset=scenes[0].dataset,
        origins=np.concatenate([s.origins for s in scenes]) if shifted else None,
        targets=np.concatenate([s.targets for s in scenes]),
    )
    scene_ids = np.concatenate(
        [np.full(s.n_peds, i, dtype=np.int64) for i, s in enumerate(scenes)]
    )
    return Batch(scene=merged, scene_ids=scene_ids, n_scenes=len(scenes))


def pack_batches(
    scenes: Sequence[TrajectoryScene],
    budget: int = 256,
    max_scenes: int = 16,
) -> List[Batch]:
    """Greedy packing up to ~budget pedestrians (and max_scenes scenes) per
    batch. A single scene over budget is emitted alone and flagged."""
    batches: List[Batch] = []
    pending: List[TrajectoryScene] = []
    count = 0
    for s in scenes:
        if s.n_peds > budget and not pending:
            b = merge_scenes([s])
            b.oversized = True
            batches.append(b)
            continue
        if pending and (count + s.n_peds > budget or len(pending) >= max_scenes):
            batches.append(merge_scenes(pending))
            pending, count = [], 0
        if s.n_peds > budget:
            b = merge_scenes([s])
            b.oversized = True
            batches.append(b)
            continue
        pending.append(s)
        count += s.n_peds
    if pending:
        batches.append(merge_scenes(pending))
    return batches


def dump_scene(scene: TrajectoryScene, fh) -> None:
    """Line-oriented debug dump: `ped_id step present x y` per slot."""
    fh.write(f"# scene dataset={scene.dataset} obs={scene.obs_len} "
             f"total={scene.total_len} peds={scene.n_peds}\n")
    for i, pid in enumerate(scene.ped_ids):
        for t in range(scene.total_len):
            p = scene.positions[i, t]
            fh.write(f"{pid} {t} {int(scene.presence[i, t])} {p[0]:.6f} {p[1]:.6f}\n")
