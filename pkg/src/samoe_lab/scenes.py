"""Synthetic driving scenes, per-sample statistics, scenario tags and BEV rasterization."""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .numerics import Rng, TensorFormatError, load_tensor, save_tensor

REGIMES = ("intersection", "narrow_turn", "overtake", "nominal")
HORIZON_STEPS = 6
STEP_SECONDS = 0.5
HISTORY_STEPS = 4

# strict inequalities: count > 40, yaw > 0.05 rad/s, min distance < 8 m
DENSE_AGENTS = 40
HIGH_YAW = 0.05
CLOSE_PROX_M = 8.0
TAGS = ("dense", "high_yaw", "close_prox")

COLLISION_MARGIN_M = 0.25
DATASET_VERSION = 1

# instruction vocabulary for the tiny language embedder
VOCAB = ("<pad>", "go_straight", "turn_left", "turn_right", "keep_lane", "slow", "cruise", "fast")


@dataclass
class SyntheticScene:
    """Ego-centric scene at t=0: ego at the origin heading along +x.

    ``agents`` rows are ``(x, y, vx, vy, heading, length, width)``.
    """

    agents: np.ndarray
    ego_waypoints: np.ndarray
    ego_yaw_rate: float
    ego_speed: float
    ego_history: np.ndarray
    seed: int
    regime: str

    def __eq__(self, other):
        if not isinstance(other, SyntheticScene):
            return NotImplemented
        return (self.seed == other.seed and self.regime == other.regime
                and self.ego_yaw_rate == other.ego_yaw_rate and self.ego_speed == other.ego_speed
                and np.array_equal(self.agents, other.agents)
                and np.array_equal(self.ego_waypoints, other.ego_waypoints)
                and np.array_equal(self.ego_history, other.ego_history))

    def to_bytes(self) -> bytes:
        head = json.dumps([self.seed, self.regime, self.ego_yaw_rate, self.ego_speed]).encode()
        return head + self.agents.tobytes() + self.ego_waypoints.tobytes() + self.ego_history.tobytes()

    def instruction_ids(self) -> list[int]:
        if self.ego_yaw_rate > 0.02:
            turn = VOCAB.index("turn_left")
        elif self.ego_yaw_rate < -0.02:
            turn = VOCAB.index("turn_right")
        elif self.regime == "overtake":
            turn = VOCAB.index("keep_lane")
        else:
            turn = VOCAB.index("go_straight")
        if self.ego_speed < 5.0:
            pace = VOCAB.index("slow")
        elif self.ego_speed < 9.0:
            pace = VOCAB.index("cruise")
        else:
            pace = VOCAB.index("fast")
        return [turn, pace]

    def ego_state(self) -> np.ndarray:
        return np.array([self.ego_speed, self.ego_yaw_rate], dtype=np.float64)


@dataclass(frozen=True)
class SceneStats:
    agent_count: int
    yaw_rate: float
    min_dist: float  # math.inf when fewer than one pair exists


@dataclass
class RasterConfig:
    height: int = 32
    width: int = 32
    channels: int = 16
    cell_size: float = 2.5
    feature_seed: int = 1234

    @property
    def ego_center(self) -> tuple[int, int]:
        return (self.height // 2, self.width // 2)


BASE_CHANNELS = 4


@dataclass
class BevGrid:
    data: torch.Tensor  # [B, C, H, W]
    cell_size: float
    ego_center: tuple[int, int]
    clipped: list[int] = field(default_factory=list)

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[2]

    @property
    def width(self) -> int:
        return self.data.shape[3]


# ---------------------------------------------------------------------------
# generation


def _arc(speed: float, yaw_rate: float, times: np.ndarray) -> np.ndarray:
    if abs(yaw_rate) < 1e-9:
        return np.stack([speed * times, np.zeros_like(times)], axis=-1)
    r = speed / yaw_rate
    return np.stack([r * np.sin(yaw_rate * times), r * (1.0 - np.cos(yaw_rate * times))], axis=-1)


def _agent_corners_aabb(agent: np.ndarray, t: float, margin: float) -> tuple[float, float, float, float]:
    x, y, vx, vy, heading, length, width = agent
    cx, cy = x + vx * t, y + vy * t
    c, s = abs(math.cos(heading)), abs(math.sin(heading))
    hx = 0.5 * (length * c + width * s) + margin
    hy = 0.5 * (length * s + width * c) + margin
    return cx - hx, cx + hx, cy - hy, cy + hy


def waypoint_collides(agents: np.ndarray, waypoints: np.ndarray, margin: float = COLLISION_MARGIN_M) -> bool:
    """True when any waypoint k (time (k+1)*0.5 s) lies inside an agent's inflated axis-aligned box."""
    for k, (px, py) in enumerate(waypoints):
        t = (k + 1) * STEP_SECONDS
        for a in agents:
            x0, x1, y0, y1 = _agent_corners_aabb(a, t, margin)
            if x0 <= px <= x1 and y0 <= py <= y1:
                return True
    return False


_REGIME_PARAMS = {
    # count range, min separation between agents, |yaw rate| range
    "nominal": ((8, 24), 9.0, (0.0, 0.03)),
    "intersection": ((41, 64), 5.0, (0.0, 0.04)),
    "narrow_turn": ((8, 24), 9.0, (0.08, 0.3)),
    "overtake": ((8, 24), 9.0, (0.0, 0.02)),
}

_HALF_EXTENT_M = 38.0
_EGO_CLEARANCE_M = 9.0


def gen_scene(seed: int, regime: str) -> SyntheticScene:
    if regime not in _REGIME_PARAMS:
        raise ValueError(f"unknown regime {regime!r}; expected one of {REGIMES}")
    rng = Rng(seed, stream=REGIMES.index(regime) + 1)
    (n_lo, n_hi), sep, (yaw_lo, yaw_hi) = _REGIME_PARAMS[regime]

    speed = float(rng.uniform(low=3.0, high=11.0))
    yaw = float(rng.uniform(low=yaw_lo, high=yaw_hi)) * (1.0 if rng.uniform() < 0.5 else -1.0)
    times = STEP_SECONDS * np.arange(1, HORIZON_STEPS + 1)
    noise = rng.uniform((HORIZON_STEPS, 2), -0.05, 0.05)
    waypoints = _arc(speed, yaw, times) + noise
    history = _arc(speed, yaw, -STEP_SECONDS * np.arange(1, HISTORY_STEPS + 1))

    agents: list[np.ndarray] = []
    if regime == "overtake":
        # vehicle alongside the ego lane travelling at a similar speed
        side = 1.0 if rng.uniform() < 0.5 else -1.0
        lateral = side * float(rng.uniform(low=3.2, high=5.0))
        along = float(rng.uniform(low=-3.0, high=6.0))
        v = speed + float(rng.uniform(low=-0.5, high=0.5))
        agents.append(np.array([along, lateral, v, 0.0, 0.0,
                                float(rng.uniform(low=4.0, high=5.0)), float(rng.uniform(low=1.7, high=2.0))]))

    target = int(rng.integers(n_lo, n_hi + 1))
    attempts = 0
    while len(agents) < target and attempts < 20000:
        attempts += 1
        pos = rng.uniform(2, -_HALF_EXTENT_M, _HALF_EXTENT_M)
        if math.hypot(*pos) < _EGO_CLEARANCE_M:
            continue
        if any(math.hypot(*(pos - a[:2])) < sep for a in agents):
            continue
        heading = float(rng.uniform(None, -math.pi, math.pi))
        spd = float(rng.uniform(low=0.0, high=8.0))
        cand = np.array([pos[0], pos[1], spd * math.cos(heading), spd * math.sin(heading), heading,
                         float(rng.uniform(low=3.8, high=5.2)), float(rng.uniform(low=1.6, high=2.1))])
        if waypoint_collides(cand[None], waypoints, margin=1.0):
            continue
        agents.append(cand)

    return SyntheticScene(
        agents=np.array(agents, dtype=np.float64).reshape(-1, 7),
        ego_waypoints=waypoints.astype(np.float64),
        ego_yaw_rate=yaw,
        ego_speed=speed,
        ego_history=history.astype(np.float64),
        seed=int(seed),
        regime=regime,
    )


def scene_stats(s: SyntheticScene) -> SceneStats:
    """Agent count, |yaw rate| and the minimum pairwise distance over agents and the ego."""
    pts = np.vstack([np.zeros((1, 2)), s.agents[:, :2]]) if len(s.agents) else np.zeros((0, 2))
    best = math.inf
    n = len(pts)
    for i in range(n):
        for j in range(i + 1, n):
            d = math.hypot(pts[i, 0] - pts[j, 0], pts[i, 1] - pts[j, 1])
            if d < best:
                best = d
    return SceneStats(agent_count=len(s.agents), yaw_rate=abs(float(s.ego_yaw_rate)), min_dist=best)


def select_challenging(stats: SceneStats) -> set[str]:
    tags = set()
    if stats.agent_count > DENSE_AGENTS:
        tags.add("dense")
    if stats.yaw_rate > HIGH_YAW:
        tags.add("high_yaw")
    if stats.min_dist < CLOSE_PROX_M:
        tags.add("close_prox")
    return tags


# ---------------------------------------------------------------------------
# rasterization


def _projection_matrix(cfg: RasterConfig) -> np.ndarray:
    extra = cfg.channels - BASE_CHANNELS
    if extra < 0:
        raise ValueError(f"channels must be >= {BASE_CHANNELS}")
    return Rng(cfg.feature_seed, stream=77).normal((extra, 9), scale=1.0 / 3.0)


def _splat(grid: np.ndarray, u: float, v: float, values: Sequence[float]) -> bool:
    """Bilinear splat of ``values`` (one per channel) at continuous cell coords; returns False if clipped."""
    H, W = grid.shape[1:]
    i0, j0 = math.floor(u), math.floor(v)
    fu, fv = u - i0, v - j0
    inside = 0 <= u <= H - 1 and 0 <= v <= W - 1
    for di, wi in ((0, 1.0 - fu), (1, fu)):
        for dj, wj in ((0, 1.0 - fv), (1, fv)):
            w = wi * wj
            ii, jj = i0 + di, j0 + dj
            if w == 0.0 or not (0 <= ii < H and 0 <= jj < W):
                continue
            for c, val in enumerate(values):
                grid[c, ii, jj] += w * val
    return inside


def complete_channels(base: np.ndarray, cfg: RasterConfig) -> np.ndarray:
    """Append the fixed random-projection features of each cell's 3x3 occupancy neighbourhood."""
    occ = base[0]
    H, W = occ.shape
    padded = np.pad(occ, 1)
    patches = np.stack([padded[di:di + H, dj:dj + W] for di in range(3) for dj in range(3)], axis=0)
    proj = _projection_matrix(cfg)
    feats = np.tanh(np.einsum("kp,phw->khw", proj, patches))
    return np.concatenate([base, feats], axis=0)


def rasterize_base(s: SyntheticScene, cfg: RasterConfig) -> tuple[np.ndarray, int]:
    if cfg.cell_size <= 0:
        raise ValueError("cell_size must be positive")
    base = np.zeros((BASE_CHANNELS, cfg.height, cfg.width), dtype=np.float64)
    cx, cy = cfg.ego_center
    clipped = 0
    for x, y, vx, vy, heading, _, _ in s.agents:
        u, v = cx + x / cfg.cell_size, cy + y / cfg.cell_size
        if not _splat(base, u, v, (1.0, vx / 10.0, vy / 10.0, math.cos(heading))):
            clipped += 1
    return base, clipped


def rasterize(s: SyntheticScene, cfg: RasterConfig | None = None, dtype: torch.dtype = torch.float32) -> BevGrid:
    cfg = cfg or RasterConfig()
    base, clipped = rasterize_base(s, cfg)
    full = complete_channels(base.astype(np.float32).astype(np.float64), cfg)
    return BevGrid(data=torch.from_numpy(full).to(dtype)[None], cell_size=cfg.cell_size,
                   ego_center=cfg.ego_center, clipped=[clipped])


def stack_grids(grids: Sequence[BevGrid]) -> BevGrid:
    return BevGrid(data=torch.cat([g.data for g in grids], dim=0), cell_size=grids[0].cell_size,
                   ego_center=grids[0].ego_center, clipped=[c for g in grids for c in g.clipped])


# ---------------------------------------------------------------------------
# dataset files


@dataclass
class Dataset:
    scenes: list[SyntheticScene]
    grids: torch.Tensor  # [N, C, H, W] float32
    actions: torch.Tensor  # [N, K, 2] float64, ego-centric metres
    tags: list[set[str]]
    stats: list[SceneStats]
    raster: RasterConfig

    def __len__(self) -> int:
        return len(self.scenes)

    def bev(self, idx: Sequence[int] | None = None, dtype: torch.dtype = torch.float32) -> BevGrid:
        data = self.grids if idx is None else self.grids[list(idx)]
        return BevGrid(data=data.to(dtype), cell_size=self.raster.cell_size, ego_center=self.raster.ego_center)


def build_dataset(scenes: Sequence[SyntheticScene], raster: RasterConfig | None = None) -> Dataset:
    raster = raster or RasterConfig()
    grids = torch.cat([rasterize(s, raster).data for s in scenes], dim=0) if scenes else \
        torch.zeros((0, raster.channels, raster.height, raster.width))
    stats = [scene_stats(s) for s in scenes]
    return Dataset(
        scenes=list(scenes),
        grids=grids,
        actions=torch.from_numpy(np.stack([s.ego_waypoints for s in scenes])) if scenes else torch.zeros((0, HORIZON_STEPS, 2), dtype=torch.float64),
        tags=[select_challenging(st) for st in stats],
        stats=stats,
        raster=raster,
    )


def generate(count: int, regime: str | Sequence[str], seed: int) -> list[SyntheticScene]:
    """``count`` scenes; a regime list is cycled. Scene i uses seed ``seed * 1_000_003 + i``."""
    regimes = [regime] if isinstance(regime, str) else list(regime)
    return [gen_scene(seed * 1_000_003 + i, regimes[i % len(regimes)]) for i in range(count)]


def dataset_write(scenes: Sequence[SyntheticScene], path: str | os.PathLike,
                  raster: RasterConfig | None = None) -> Path:
    """Writes manifest.json, scene_<id>.ndt (base BEV channels), actions.ndt and agents.ndt."""
    raster = raster or RasterConfig()
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    all_agents = []
    for i, s in enumerate(scenes):
        base, clipped = rasterize_base(s, raster)
        save_tensor(out / f"scene_{i:05d}.ndt", torch.from_numpy(base.astype(np.float32)))
        st = scene_stats(s)
        entries.append({
            "id": i,
            "seed": s.seed,
            "regime": s.regime,
            "ego_yaw_rate": s.ego_yaw_rate,
            "ego_speed": s.ego_speed,
            "agent_offset": offset,
            "agent_count": len(s.agents),
            "clipped_agents": clipped,
            "stats": {"agent_count": st.agent_count, "yaw_rate": st.yaw_rate,
                      "min_dist": None if math.isinf(st.min_dist) else st.min_dist},
            "tags": sorted(select_challenging(st)),
        })
        offset += len(s.agents)
        all_agents.append(s.agents)
    agents = np.concatenate(all_agents, axis=0) if all_agents else np.zeros((0, 7))
    save_tensor(out / "agents.ndt", torch.from_numpy(agents.reshape(-1, 7)))
    save_tensor(out / "actions.ndt", torch.from_numpy(
        np.stack([s.ego_waypoints for s in scenes]) if scenes else np.zeros((0, HORIZON_STEPS, 2))))
    save_tensor(out / "history.ndt", torch.from_numpy(
        np.stack([s.ego_history for s in scenes]) if scenes else np.zeros((0, HISTORY_STEPS, 2))))
    manifest = {
        "version": DATASET_VERSION,
        "count": len(scenes),
        "raster": {"height": raster.height, "width": raster.width, "channels": raster.channels,
                   "base_channels": BASE_CHANNELS, "cell_size": raster.cell_size,
                   "feature_seed": raster.feature_seed, "ego_center": list(raster.ego_center)},
        "thresholds": {"dense_agent_count_gt": DENSE_AGENTS, "yaw_rate_gt": HIGH_YAW,
                       "min_dist_lt": CLOSE_PROX_M},
        "horizon_steps": HORIZON_STEPS,
        "step_seconds": STEP_SECONDS,
        "scenes": entries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return out


def dataset_read(path: str | os.PathLike) -> Dataset:
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    if manifest.get("version") != DATASET_VERSION:
        raise TensorFormatError(f"dataset version {manifest.get('version')} != supported {DATASET_VERSION}")
    r = manifest["raster"]
    raster = RasterConfig(height=r["height"], width=r["width"], channels=r["channels"],
                          cell_size=r["cell_size"], feature_seed=r["feature_seed"])
    agents = load_tensor(root / "agents.ndt").numpy()
    actions = load_tensor(root / "actions.ndt")
    history = load_tensor(root / "history.ndt").numpy()
    if actions.shape[0] != manifest["count"] or history.shape[0] != manifest["count"]:
        raise TensorFormatError("actions/history count does not match manifest")
    scenes, grids = [], []
    for e in manifest["scenes"]:
        i = e["id"]
        base = load_tensor(root / f"scene_{i:05d}.ndt").numpy().astype(np.float64)
        if base.shape != (BASE_CHANNELS, raster.height, raster.width):
            raise TensorFormatError(f"scene_{i:05d}.ndt has shape {base.shape}")
        grids.append(torch.from_numpy(complete_channels(base, raster)).float())
        a = agents[e["agent_offset"]:e["agent_offset"] + e["agent_count"]]
        if len(a) != e["agent_count"]:
            raise TensorFormatError("agents.ndt truncated")
        scenes.append(SyntheticScene(agents=a.copy(), ego_waypoints=actions[i].numpy().copy(),
                                     ego_yaw_rate=e["ego_yaw_rate"], ego_speed=e["ego_speed"],
                                     ego_history=history[i].copy(), seed=e["seed"], regime=e["regime"]))
    stats = [scene_stats(s) for s in scenes]
    return Dataset(scenes=scenes,
                   grids=torch.stack(grids) if grids else torch.zeros((0, raster.channels, raster.height, raster.width)),
                   actions=actions, tags=[select_challenging(st) for st in stats], stats=stats, raster=raster)


def scene_digest(scenes: Iterable[SyntheticScene]) -> str:
    h = hashlib.sha256()
    for s in scenes:
        h.update(s.to_bytes())
    return h.hexdigest()
