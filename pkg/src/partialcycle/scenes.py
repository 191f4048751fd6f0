"""Synthetic multi-camera scenes with controllable field-of-view overlap.

People walk on a 1-D line in [0, 1]. Camera v sees the window
[start_v, start_v + width_v]; windows are evenly staggered so neighbouring
cameras overlap. An observation is a camera-specific linear view of the
person's appearance plus a camera offset and per-detection clutter, both
living in a fixed nuisance subspace, plus isotropic noise.
"""

from __future__ import annotations

import dataclasses
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .theory import MultiViewMatching


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class SceneConfig:
    n_cameras: int = 3
    n_scenes: int = 5
    n_timesteps: int = 40
    n_identities: int = 19
    latent_dim: int = 16
    obs_dim: int = 32
    fov_width: float | tuple = 0.6
    noise_sigma: float = 0.1
    step_sigma: float = 0.04
    drift_sigma: float = 0.15
    turnover: float = 0.02
    view_strength: float = 0.3
    nuisance_dim: int = 8
    offset_strength: float = 0.8
    clutter_strength: float = 0.8
    memory: float = 0.9
    pose_planes: int = 0
    pose_sigma: float = 0.3
    world_seed: int = 0
    seed: int = 0
    split: str = "train"

    def __post_init__(self):
        if self.n_cameras < 2:
            raise ValueError("n_cameras must be >= 2")
        if self.n_identities < 1:
            raise ValueError("scene needs at least one identity")
        for name in ("n_scenes", "n_timesteps", "latent_dim", "obs_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.nuisance_dim < 0 or self.nuisance_dim > self.obs_dim:
            raise ValueError("nuisance_dim must lie in [0, obs_dim]")
        for w in self.widths():
            if not 0 < w <= 1:
                raise ValueError(f"fov_width must lie in (0, 1], got {w}")
        if not 0 <= self.turnover <= 1:
            raise ValueError("turnover must lie in [0, 1]")
        if not 0 <= 2 * self.pose_planes <= self.latent_dim:
            raise ValueError("pose_planes must satisfy 0 <= 2 * pose_planes <= latent_dim")
        if not 0 <= self.memory < 1:
            raise ValueError("memory must lie in [0, 1)")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")

    def widths(self) -> tuple:
        if isinstance(self.fov_width, (tuple, list)):
            if len(self.fov_width) != self.n_cameras:
                raise ValueError("one fov_width per camera expected")
            return tuple(float(w) for w in self.fov_width)
        return (float(self.fov_width),) * self.n_cameras

    def windows(self) -> list[tuple[float, float]]:
        """(start, width) per camera; starts evenly spread over [0, 1 - width]."""
        out = []
        for v, w in enumerate(self.widths()):
            start = v * (1.0 - w) / (self.n_cameras - 1)
            out.append((start, w))
        return out

    def replace(self, **changes) -> "SceneConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class ViewObservations:
    camera: int
    features: np.ndarray
    identities: np.ndarray | None = None
    xs: np.ndarray | None = None
    detection_ids: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise DatasetError("features must be an n x d matrix")
        n = self.features.shape[0]
        if self.detection_ids is None:
            self.detection_ids = np.arange(n)
        if self.identities is not None:
            self.identities = np.asarray(self.identities, dtype=np.int64)
            if len(set(self.identities.tolist())) != n:
                raise DatasetError(f"camera {self.camera}: an identity appears more than once")

    def __len__(self):
        return self.features.shape[0]

    def subset(self, keep: np.ndarray) -> "ViewObservations":
        return ViewObservations(
            self.camera,
            self.features[keep],
            None if self.identities is None else self.identities[keep],
            None if self.xs is None else self.xs[keep],
            self.detection_ids[keep],
        )


@dataclass
class SceneFrame:
    scene_id: int
    timestep: int
    views: list

    @property
    def labeled(self) -> bool:
        return all(v.identities is not None for v in self.views)


@dataclass
class SceneDataset:
    frames: list
    n_cameras: int
    obs_dim: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frames = sorted(self.frames, key=lambda f: (f.scene_id, f.timestep))
        self._index = {(f.scene_id, f.timestep): f for f in self.frames}

    def scenes(self) -> list[int]:
        return sorted({f.scene_id for f in self.frames})

    def timesteps(self, scene: int) -> list[int]:
        return [f.timestep for f in self.frames if f.scene_id == scene]

    def frame(self, scene: int, t: int) -> SceneFrame | None:
        return self._index.get((scene, t))

    @property
    def labeled(self) -> bool:
        return all(f.labeled for f in self.frames)

    def __len__(self):
        return len(self.frames)


def _split_code(split: str) -> int:
    return {"train": 0, "val": 1, "test": 2}.get(split, sum(map(ord, split)))


def _world(cfg: SceneConfig):
    rng = np.random.default_rng([cfg.world_seed, 7919])
    q, _ = np.linalg.qr(rng.standard_normal((cfg.obs_dim, cfg.obs_dim)))
    nuisance = q[:, : cfg.nuisance_dim]
    signal = q[:, cfg.nuisance_dim:]
    base = signal @ rng.standard_normal((signal.shape[1], cfg.latent_dim)) / np.sqrt(signal.shape[1])
    return base, nuisance


def _unit_rows(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _rotate_planes(look: np.ndarray, angle: np.ndarray, planes: int) -> np.ndarray:
    """Rotate the trailing ``planes`` coordinate pairs of each row by its angle."""
    if planes == 0:
        return look
    out = look.copy()
    d = look.shape[1]
    for q in range(planes):
        a, b = d - 2 * planes + 2 * q, d - 2 * planes + 2 * q + 1
        c, s = np.cos((q + 1) * angle), np.sin((q + 1) * angle)
        out[:, a] = c * look[:, a] - s * look[:, b]
        out[:, b] = s * look[:, a] + c * look[:, b]
    return out


def generate_scene(cfg: SceneConfig) -> SceneDataset:
    """Generate ``cfg.n_scenes`` independent scenes; deterministic per (seed, split)."""
    base, nuisance = _world(cfg)
    windows = cfg.windows()
    frames = []
    for scene in range(cfg.n_scenes):
        rng = np.random.default_rng([cfg.seed, _split_code(cfg.split), scene])
        maps = [
            base + cfg.view_strength * rng.standard_normal(base.shape) / np.sqrt(cfg.latent_dim)
            for _ in range(cfg.n_cameras)
        ]
        offsets = [
            cfg.offset_strength * nuisance @ rng.standard_normal(cfg.nuisance_dim) / np.sqrt(max(cfg.nuisance_dim, 1))
            for _ in range(cfg.n_cameras)
        ]
        appearance = _unit_rows(rng.standard_normal((cfg.n_identities, cfg.latent_dim)))
        pos = rng.random(cfg.n_identities)
        heading = rng.uniform(0, 2 * np.pi, cfg.n_identities)
        facing = [2 * np.pi * v / cfg.n_cameras for v in range(cfg.n_cameras)]
        drift = rng.standard_normal((cfg.n_identities, cfg.latent_dim))
        clutter = rng.standard_normal((cfg.n_cameras, cfg.n_identities, cfg.nuisance_dim))
        keep, fresh = cfg.memory, np.sqrt(1.0 - cfg.memory ** 2)
        ids = np.arange(cfg.n_identities)
        next_id = cfg.n_identities
        for t in range(cfg.n_timesteps):
            if t > 0:
                pos = pos + cfg.step_sigma * rng.standard_normal(cfg.n_identities)
                pos = np.abs(pos)
                pos = np.where(pos > 1.0, 2.0 - pos, pos)
                heading = heading + cfg.pose_sigma * rng.standard_normal(cfg.n_identities)
                # nuisance evolves as AR(1), so nearby frames look alike
                drift = keep * drift + fresh * rng.standard_normal(drift.shape)
                clutter = keep * clutter + fresh * rng.standard_normal(clutter.shape)
                # people leave the scene and are replaced by newcomers
                leave = np.flatnonzero(rng.random(cfg.n_identities) < cfg.turnover)
                for slot in leave:
                    appearance[slot] = _unit_rows(rng.standard_normal(cfg.latent_dim))
                    pos[slot] = rng.random()
                    heading[slot] = rng.uniform(0, 2 * np.pi)
                    drift[slot] = rng.standard_normal(cfg.latent_dim)
                    clutter[:, slot] = rng.standard_normal((cfg.n_cameras, cfg.nuisance_dim))
                    ids[slot] = next_id
                    next_id += 1
            look = _unit_rows(appearance + cfg.drift_sigma * drift / np.sqrt(cfg.latent_dim))
            views = []
            for v, (start, width) in enumerate(windows):
                x = (pos - start) / width
                visible = np.flatnonzero((x >= 0.0) & (x <= 1.0))
                visible = rng.permutation(visible)
                n = len(visible)
                mess = cfg.clutter_strength * clutter[v, visible] @ nuisance.T / np.sqrt(max(cfg.nuisance_dim, 1))
                noise = cfg.noise_sigma * rng.standard_normal((n, cfg.obs_dim)) / np.sqrt(cfg.obs_dim)
                seen = _rotate_planes(look[visible], heading[visible] - facing[v], cfg.pose_planes)
                feats = seen @ maps[v].T + offsets[v] + mess + noise
                views.append(ViewObservations(v, feats.reshape(n, cfg.obs_dim), ids[visible], x[visible]))
            frames.append(SceneFrame(scene, t, views))
    meta = {k: (list(v) if isinstance(v, tuple) else v) for k, v in dataclasses.asdict(cfg).items()}
    return SceneDataset(frames, cfg.n_cameras, cfg.obs_dim, meta)


def reduce_fov(ds: SceneDataset, keep_fraction: float) -> SceneDataset:
    """Keep only detections in the leftmost ``keep_fraction`` of every camera view."""
    if not 0 < keep_fraction <= 1:
        raise ValueError("keep_fraction must lie in (0, 1]")
    frames = []
    for f in ds.frames:
        views = []
        for v in f.views:
            if v.xs is None:
                raise DatasetError("reduce_fov needs per-detection view coordinates")
            views.append(v.subset(np.flatnonzero(v.xs <= keep_fraction)))
        frames.append(SceneFrame(f.scene_id, f.timestep, views))
    meta = dict(ds.meta)
    meta["keep_fraction"] = min(keep_fraction, meta.get("keep_fraction", 1.0))
    return SceneDataset(frames, ds.n_cameras, ds.obs_dim, meta)


def ground_truth(frame: SceneFrame) -> MultiViewMatching:
    if not frame.labeled:
        raise DatasetError("frame has no identity labels")
    return MultiViewMatching.from_identities([v.identities.tolist() for v in frame.views])


@dataclass
class OverlapStats:
    two_camera_jaccard: float
    three_camera_jaccard: float
    people_per_frame: float

    def as_dict(self):
        return dataclasses.asdict(self)


def _jaccard(sets) -> float | None:
    union = set().union(*sets)
    if not union:
        return None
    return len(set.intersection(*sets)) / len(union)


def overlap_stats(ds: SceneDataset) -> OverlapStats:
    two, three, people = [], [], []
    for f in ds.frames:
        ids = [set(v.identities.tolist()) for v in f.views]
        for pair in itertools.combinations(ids, 2):
            j = _jaccard(pair)
            if j is not None:
                two.append(j)
        for trip in itertools.combinations(ids, 3):
            j = _jaccard(trip)
            if j is not None:
                three.append(j)
        people.append(len(set().union(*ids)))
    mean = lambda xs: float(np.mean(xs)) if xs else 0.0
    return OverlapStats(mean(two), mean(three), mean(people))


# ---------------------------------------------------------------- file format

def write_jsonl(ds: SceneDataset, path) -> None:
    """One record per detection: scene, timestep, camera, detection_id, identity, x, feature."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for f in ds.frames:
            for v in f.views:
                for r in range(len(v)):
                    rec = {
                        "scene": int(f.scene_id),
                        "timestep": int(f.timestep),
                        "camera": int(v.camera),
                        "detection_id": int(v.detection_ids[r]),
                    }
                    if v.identities is not None:
                        rec["identity"] = int(v.identities[r])
                    if v.xs is not None:
                        rec["x"] = float(v.xs[r])
                    rec["feature"] = [float(x) for x in v.features[r]]
                    fh.write(json.dumps(rec) + "\n")


def read_jsonl(path, n_cameras: int | None = None) -> SceneDataset:
    """Load detections written by :func:`write_jsonl` or extracted elsewhere.

    ``identity`` and ``x`` are optional per record. Cameras with no record
    in a frame become empty views.
    """
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"dataset file not found: {path}")
    groups: dict = {}
    dim = None
    max_cam = -1
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                key = (int(rec["scene"]), int(rec["timestep"]), int(rec["camera"]))
                feat = [float(x) for x in rec["feature"]]
            except (ValueError, KeyError, TypeError) as exc:
                raise DatasetError(f"{path}:{lineno}: bad record ({exc})") from exc
            if dim is None:
                dim = len(feat)
            elif len(feat) != dim:
                raise DatasetError(f"{path}:{lineno}: feature length {len(feat)} != {dim}")
            max_cam = max(max_cam, key[2])
            groups.setdefault(key, []).append((int(rec.get("detection_id", len(groups.get(key, [])))),
                                               rec.get("identity"), rec.get("x"), feat))
    if dim is None:
        raise DatasetError(f"{path}: no records")
    n_cameras = n_cameras or max_cam + 1
    frame_keys = sorted({(s, t) for s, t, _ in groups})
    frames = []
    for s, t in frame_keys:
        views = []
        for c in range(n_cameras):
            recs = sorted(groups.get((s, t, c), []), key=lambda r: r[0])
            feats = np.array([r[3] for r in recs], dtype=np.float64).reshape(len(recs), dim)
            labeled = recs and all(r[1] is not None for r in recs)
            ids = np.array([r[1] for r in recs], dtype=np.int64) if labeled or not recs else None
            has_x = recs and all(r[2] is not None for r in recs)
            xs = np.array([r[2] for r in recs], dtype=np.float64) if has_x or not recs else None
            det = np.array([r[0] for r in recs], dtype=np.int64)
            views.append(ViewObservations(c, feats, ids, xs, det))
        frames.append(SceneFrame(s, t, views))
    return SceneDataset(frames, n_cameras, dim)
