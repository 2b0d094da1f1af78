"""Deterministic 2D tabletop manipulation world and episode/dataset generation.

Conventions
-----------
* All positions live in the unit square [0,1]^2; x is the column axis, y the row axis,
  so "top" means small y. Rasterization maps a coordinate u to pixel index
  round(u * (size - 1)).
* Frames are float32 arrays of shape (H, W, 3) with values in [0, 1]. On disk they are
  stored as uint8 via round(v * 255); :func:`quantize_frame` / :func:`dequantize_frame`
  define the round trip used identically by dataset files and live rollouts.
* Actions are (dx, dy, grip); grip > 0 tries to attach a nearby object, grip < 0
  releases, grip == 0 leaves attachment unchanged.
* Episode generation is a pure function of (task family, seed): regenerating with the
  same inputs reproduces frames and actions bit-exactly.

Dataset layout (one directory per dataset)
------------------------------------------
``manifest.json`` plus one binary file per episode:

    bytes 0..3   magic b"MVEP"
    uint32       format version (1)
    uint32 x 4   t, H, W, C (C == 3)
    uint32       action_dim
    uint8  blob  frames, shape (t, H, W, 3), C order
    float32 blob actions, shape (t, action_dim), little-endian

All integers little-endian.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

EPISODE_MAGIC = b"MVEP"
EPISODE_VERSION = 1

COLOR_NAMES = ("red", "green", "blue", "yellow")
COLOR_RGB = np.array(
    [[0.85, 0.20, 0.20], [0.20, 0.78, 0.25], [0.25, 0.38, 0.90], [0.90, 0.82, 0.20]],
    dtype=np.float32,
)
REGION_CENTERS = {
    "left": (0.14, 0.5),
    "right": (0.86, 0.5),
    "top": (0.5, 0.14),
    "bottom": (0.5, 0.86),
    "center": (0.5, 0.5),
}
PUSH_TARGETS = {
    "left": (0.10, 0.5),
    "right": (0.90, 0.5),
    "up": (0.5, 0.10),
    "down": (0.5, 0.90),
}


class WorldConfigError(Exception):
    pass


@dataclass(frozen=True)
class WorldConfig:
    frame_hw: int = 32
    n_objects: int = 2
    action_dim: int = 3
    step_max: float = 0.08
    pickup_radius: float = 0.07
    goal_radius: float = 0.13
    object_radius: float = 0.075
    gripper_radius: float = 0.05
    max_steps: int = 60
    hold_steps: int = 8
    demo_kick_prob: float = 0.0
    background: float = 0.12
    goal_tint: float = 0.08

    def __post_init__(self):
        if self.frame_hw < 16:
            raise WorldConfigError(f"frame_hw must be >= 16, got {self.frame_hw}")
        if self.n_objects < 1:
            raise WorldConfigError("need at least one object")


@dataclass(frozen=True)
class GoalSpec:
    kind: str  # "place" | "push"
    target_object: int
    region: str
    center: tuple[float, float]
    radius: float


@dataclass
class WorldState:
    object_positions: list[tuple[float, float]]
    object_colors: list[int]
    gripper_position: tuple[float, float]
    held_object: int | None = None
    goal: GoalSpec | None = None

    def validate(self) -> None:
        for x, y in self.object_positions + [self.gripper_position]:
            if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
                raise ValueError(f"coordinate ({x}, {y}) outside unit square")
        if self.held_object is not None and not (
            0 <= self.held_object < len(self.object_positions)
        ):
            raise ValueError(f"held_object {self.held_object} indexes no object")
        if self.goal is not None and not (
            0 <= self.goal.target_object < len(self.object_positions)
        ):
            raise ValueError("goal targets a missing object")


@dataclass(frozen=True)
class Action:
    dx: float
    dy: float
    grip: float

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.grip], dtype=np.float32)


@dataclass
class Episode:
    instruction: str
    frames: np.ndarray  # (t, H, W, 3) float32 in [0, 1]
    actions: np.ndarray  # (t, action_dim) float32
    success: bool
    seed: int


@dataclass(frozen=True)
class ChunkingConfig:
    l_a: int = 4
    n_chunks: int = 2

    def __post_init__(self):
        if self.l_a < 1 or self.n_chunks < 1:
            raise ValueError("chunk length and chunk count must be positive")

    @property
    def window(self) -> int:
        return self.l_a * self.n_chunks


@dataclass(frozen=True)
class TaskFamily:
    """Closed family of tasks an episode seed is drawn from.

    `lattice > 0` snaps spawn positions to a lattice of that many points per axis
    (coarser task geometry for reduced-scale runs); 0 keeps continuous spawns.
    """

    kinds: tuple[str, ...] = ("place", "push")
    colors: tuple[int, ...] = (0, 1, 2, 3)
    regions: tuple[str, ...] = ("left", "right", "top", "bottom", "center")
    directions: tuple[str, ...] = ("left", "right", "up", "down")
    n_objects: int = 2
    lattice: int = 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "TaskFamily":
        return TaskFamily(
            kinds=tuple(d["kinds"]),
            colors=tuple(d["colors"]),
            regions=tuple(d["regions"]),
            directions=tuple(d["directions"]),
            n_objects=int(d["n_objects"]),
            lattice=int(d.get("lattice", 0)),
        )


def _clip01(v: float) -> float:
    return min(1.0, max(0.0, v))


def step(state: WorldState, action: Action, cfg: WorldConfig) -> WorldState:
    """Advance the world one tick. All inputs are clipped; never raises."""
    dx = min(cfg.step_max, max(-cfg.step_max, float(action.dx)))
    dy = min(cfg.step_max, max(-cfg.step_max, float(action.dy)))
    gx = _clip01(state.gripper_position[0] + dx)
    gy = _clip01(state.gripper_position[1] + dy)
    positions = list(state.object_positions)
    held = state.held_object
    if held is not None:
        positions[held] = (gx, gy)
    if action.grip > 0 and held is None:
        best, best_d = None, cfg.pickup_radius
        for i, (ox, oy) in enumerate(positions):
            d = float(np.hypot(ox - gx, oy - gy))
            if d < best_d:
                best, best_d = i, d
        if best is not None:
            held = best
            positions[held] = (gx, gy)
    elif action.grip < 0:
        held = None
    return WorldState(
        object_positions=positions,
        object_colors=list(state.object_colors),
        gripper_position=(gx, gy),
        held_object=held,
        goal=state.goal,
    )


def _disc_mask(H: int, W: int, center: tuple[float, float], radius: float) -> np.ndarray:
    cy = float(np.rint(center[1] * (H - 1)))
    cx = float(np.rint(center[0] * (W - 1)))
    yy, xx = np.ogrid[0:H, 0:W]
    # isotropic pixel radius from the row scale keeps discs round when H == W
    r = radius * (H - 1)
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def render(state: WorldState, H: int, W: int, cfg: WorldConfig | None = None) -> np.ndarray:
    """Rasterize a state to a float32 (H, W, 3) frame, deterministically."""
    cfg = cfg or WorldConfig()
    if H < 16 or W < 16:
        raise WorldConfigError(f"render size {H}x{W} below 16x16 minimum")
    frame = np.full((H, W, 3), cfg.background, dtype=np.float32)
    if state.goal is not None:
        tint = _disc_mask(H, W, state.goal.center, state.goal.radius)
        frame[tint] += cfg.goal_tint
    for i, pos in enumerate(state.object_positions):
        mask = _disc_mask(H, W, pos, cfg.object_radius)
        frame[mask] = COLOR_RGB[state.object_colors[i]]
    gx, gy = state.gripper_position
    outer = _disc_mask(H, W, (gx, gy), cfg.gripper_radius)
    if state.held_object is not None:
        frame[outer] = 0.95  # closed gripper: solid marker
    else:
        inner = _disc_mask(H, W, (gx, gy), cfg.gripper_radius * 0.45)
        frame[outer & ~inner] = 0.95  # open gripper: ring
    return np.clip(frame, 0.0, 1.0)


def quantize_frame(frame: np.ndarray) -> np.ndarray:
    return np.rint(frame * 255.0).astype(np.uint8)


def dequantize_frame(raw: np.ndarray) -> np.ndarray:
    return (raw.astype(np.float32)) / 255.0


def is_success(state: WorldState, cfg: WorldConfig) -> bool:
    if state.goal is None:
        return False
    ox, oy = state.object_positions[state.goal.target_object]
    cx, cy = state.goal.center
    in_region = np.hypot(ox - cx, oy - cy) <= state.goal.radius
    return bool(in_region and state.held_object != state.goal.target_object)


def scripted_policy(state: WorldState, cfg: WorldConfig) -> Action:
    """Greedy saturated proportional controller: reach, grip, carry, release.

    Outputs are snapped to a half-step lattice (0, +-step/2, +-step), which leaves
    the residual per axis below step/4 - small against every trigger radius - and
    keeps the demonstrated action vocabulary compact.
    """
    if state.goal is None:
        raise ValueError("scripted_policy requires a goal")
    goal = state.goal
    gx, gy = state.gripper_position
    quantum = cfg.step_max / 2

    def toward(tx: float, ty: float) -> tuple[float, float]:
        dx = min(cfg.step_max, max(-cfg.step_max, tx - gx))
        dy = min(cfg.step_max, max(-cfg.step_max, ty - gy))
        dx = float(np.sign(dx) * np.floor(abs(dx) / quantum + 0.5) * quantum)
        dy = float(np.sign(dy) * np.floor(abs(dy) / quantum + 0.5) * quantum)
        return dx, dy

    if state.held_object == goal.target_object:
        cx, cy = goal.center
        if np.hypot(cx - gx, cy - gy) <= goal.radius * 0.5:
            return Action(0.0, 0.0, -1.0)
        dx, dy = toward(cx, cy)
        return Action(dx, dy, 1.0)
    ox, oy = state.object_positions[goal.target_object]
    if np.hypot(ox - gx, oy - gy) <= cfg.pickup_radius * 0.6:
        return Action(0.0, 0.0, 1.0)
    dx, dy = toward(ox, oy)
    return Action(dx, dy, -1.0)


def _sample_point(
    rng: np.random.Generator, lo: float = 0.15, hi: float = 0.85, lattice: int = 0
):
    if lattice > 0:
        pts = np.linspace(lo, hi, lattice)
        return (float(rng.choice(pts)), float(rng.choice(pts)))
    return (float(rng.uniform(lo, hi)), float(rng.uniform(lo, hi)))


def sample_initial_state(family: TaskFamily, rng: np.random.Generator, cfg: WorldConfig):
    """Draw a task instance: goal, object placement, colors, gripper start."""
    kind = str(rng.choice(family.kinds))
    if kind == "push":
        region = str(rng.choice(family.directions))
        center = PUSH_TARGETS[region]
    else:
        region = str(rng.choice(family.regions))
        center = REGION_CENTERS[region]
    goal_radius = cfg.goal_radius
    colors = list(rng.choice(len(COLOR_NAMES), size=family.n_objects, replace=False))
    target_color = int(colors[0])
    if target_color not in family.colors:
        # keep the target color inside the family's closed vocabulary
        target_color = int(rng.choice(family.colors))
        colors = [target_color] + [c for c in colors[1:] if c != target_color]
        while len(colors) < family.n_objects:
            extra = int(rng.choice(len(COLOR_NAMES)))
            if extra not in colors:
                colors.append(extra)
    positions: list[tuple[float, float]] = []
    for i in range(family.n_objects):
        for _ in range(200):
            p = _sample_point(rng, lattice=family.lattice)
            far_from_others = all(np.hypot(p[0] - q[0], p[1] - q[1]) > 0.22 for q in positions)
            outside_goal = np.hypot(p[0] - center[0], p[1] - center[1]) > goal_radius + 0.10
            if far_from_others and (outside_goal or i > 0):
                positions.append(p)
                break
        else:  # pragma: no cover - rejection sampling at these densities cannot exhaust
            positions.append(_sample_point(rng, lattice=family.lattice))
    # the gripper spawns continuously even on lattice families: demonstrations then
    # label arbitrary gripper positions, which closed-loop rollouts visit
    for _ in range(200):
        g = _sample_point(rng, 0.08, 0.92)
        if np.hypot(g[0] - positions[0][0], g[1] - positions[0][1]) > 0.18:
            break
    goal = GoalSpec(kind=kind, target_object=0, region=region, center=center, radius=goal_radius)
    state = WorldState(
        object_positions=positions,
        object_colors=[int(c) for c in colors],
        gripper_position=g,
        held_object=None,
        goal=goal,
    )
    state.validate()
    return state


def instruction_for(state: WorldState) -> str:
    goal = state.goal
    color = COLOR_NAMES[state.object_colors[goal.target_object]]
    if goal.kind == "push":
        return f"push the {color} block {goal.region}"
    return f"put the {color} block in the {goal.region}"


def generate_episode(family: TaskFamily, seed: int, cfg: WorldConfig) -> Episode:
    """Run the scripted expert from a seeded initial state; pure in (family, seed).

    With `demo_kick_prob > 0`, random actions occasionally replace the expert's
    (and are recorded as taken); the expert corrects afterwards, so demonstrations
    cover recovery behavior. After success the episode continues for `hold_steps`
    genuine no-op steps, so completion states appear as window starts and
    demonstrate task-complete idling.
    """
    rng = np.random.default_rng([seed, 0x5EED])
    state = sample_initial_state(family, rng, cfg)
    instruction = instruction_for(state)
    frames, actions = [], []
    for _ in range(cfg.max_steps):
        frames.append(render(state, cfg.frame_hw, cfg.frame_hw, cfg))
        if cfg.demo_kick_prob > 0 and rng.uniform() < cfg.demo_kick_prob:
            act = Action(
                float(rng.uniform(-cfg.step_max, cfg.step_max)),
                float(rng.uniform(-cfg.step_max, cfg.step_max)),
                float(rng.choice([-1.0, 1.0])),
            )
        else:
            act = scripted_policy(state, cfg)
        actions.append(act.as_array())
        state = step(state, act, cfg)
        if is_success(state, cfg):
            break
    success = is_success(state, cfg)
    if success:
        hold = Action(0.0, 0.0, -1.0)
        for _ in range(cfg.hold_steps):
            frames.append(render(state, cfg.frame_hw, cfg.frame_hw, cfg))
            actions.append(hold.as_array())
            state = step(state, hold, cfg)
    return Episode(
        instruction=instruction,
        frames=np.stack(frames),
        actions=np.stack(actions),
        success=success,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# chunking and keyframes (1-based starts, matching the window formulas)
# ---------------------------------------------------------------------------


def _check_window(n_frames: int, cfg: ChunkingConfig, start: int) -> None:
    if start < 1:
        raise IndexError(f"start must be >= 1 (1-based), got {start}")
    if start - 1 + cfg.window > n_frames:
        raise IndexError(
            f"window [{start}, {start + cfg.window - 1}] overruns episode of length {n_frames}"
        )


def extract_keyframes(episode: Episode, cfg: ChunkingConfig, start: int = 1) -> np.ndarray:
    """Keyframe j is the first frame of chunk j: index start + (j-1)*l_a, 1-based."""
    _check_window(len(episode.frames), cfg, start)
    idx = [start - 1 + j * cfg.l_a for j in range(cfg.n_chunks)]
    return episode.frames[idx]


def chunk_actions(episode: Episode, cfg: ChunkingConfig, start: int = 1) -> list[np.ndarray]:
    """Contiguous non-overlapping chunks aligned with the keyframes."""
    _check_window(len(episode.actions), cfg, start)
    base = start - 1
    return [episode.actions[base + j * cfg.l_a : base + (j + 1) * cfg.l_a] for j in range(cfg.n_chunks)]


def valid_window_starts(n_frames: int, window: int) -> range:
    """1-based starts for which a window of `window` frames fits."""
    return range(1, n_frames - window + 2)


# ---------------------------------------------------------------------------
# dataset files
# ---------------------------------------------------------------------------


def write_episode_file(path, episode: Episode) -> None:
    frames_u8 = quantize_frame(episode.frames)
    t, H, W, C = frames_u8.shape
    actions = episode.actions.astype("<f4")
    with open(path, "wb") as fh:
        fh.write(EPISODE_MAGIC)
        fh.write(struct.pack("<IIIII", EPISODE_VERSION, t, H, W, C))
        fh.write(struct.pack("<I", actions.shape[1]))
        fh.write(frames_u8.tobytes())
        fh.write(actions.tobytes())


def read_episode_file(path) -> tuple[np.ndarray, np.ndarray]:
    """Returns (frames float32 in [0,1], actions float32)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != EPISODE_MAGIC:
            raise IOError(f"{path}: not an episode file")
        version, t, H, W, C = struct.unpack("<IIIII", fh.read(20))
        if version != EPISODE_VERSION:
            raise IOError(f"{path}: unsupported episode format version {version}")
        (action_dim,) = struct.unpack("<I", fh.read(4))
        frames = np.frombuffer(fh.read(t * H * W * C), dtype=np.uint8).reshape(t, H, W, C)
        actions = np.frombuffer(fh.read(t * action_dim * 4), dtype="<f4").reshape(t, action_dim)
    return dequantize_frame(frames), actions.astype(np.float32)


def generate_dataset(
    family: TaskFamily,
    count: int,
    seed: int,
    out_dir,
    cfg: WorldConfig | None = None,
    min_window: int = 8,
) -> dict:
    """Generate `count` scripted episodes into `out_dir` and write manifest.json.

    Episodes shorter than `min_window` are written and counted but flagged short so
    training indices exclude them. Returns the manifest dict.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    cfg = cfg or WorldConfig()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    episodes = []
    n_short = 0
    for i in range(count):
        ep = generate_episode(family, seed=int(np.random.default_rng([seed, i]).integers(2**31)), cfg=cfg)
        name = f"ep_{i:05d}"
        try:
            write_episode_file(out / f"{name}.bin", ep)
        except OSError as exc:
            raise OSError(f"failed writing episode file {out / (name + '.bin')}: {exc}") from exc
        short = len(ep.frames) < min_window
        n_short += int(short)
        episodes.append(
            {
                "id": name,
                "file": f"{name}.bin",
                "seed": ep.seed,
                "length": int(len(ep.frames)),
                "success": bool(ep.success),
                "short": bool(short),
                "instruction": ep.instruction,
            }
        )
    manifest = {
        "format": "movla-dataset-v1",
        "seed": seed,
        "count": count,
        "min_window": min_window,
        "n_short": n_short,
        "world": dataclasses.asdict(cfg),
        "family": family.to_dict(),
        "episodes": episodes,
    }
    try:
        with open(out / "manifest.json", "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, sort_keys=True, indent=1)
    except OSError as exc:
        raise OSError(f"failed writing manifest {out / 'manifest.json'}: {exc}") from exc
    return manifest


class Dataset:
    """Read-only view of a generated dataset directory."""

    def __init__(self, root):
        self.root = Path(root)
        with open(self.root / "manifest.json", "r", encoding="utf-8") as fh:
            self.manifest = json.load(fh)
        self.world_config = WorldConfig(**self.manifest["world"])
        self.family = TaskFamily.from_dict(self.manifest["family"])
        self._cache: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def episode_ids(self, min_length: int = 0, require_success: bool = False) -> list[str]:
        out = []
        for entry in self.manifest["episodes"]:
            if entry["short"] or entry["length"] < min_length:
                continue
            if require_success and not entry["success"]:
                continue
            out.append(entry["id"])
        return out

    def entry(self, ep_id: str) -> dict:
        for e in self.manifest["episodes"]:
            if e["id"] == ep_id:
                return e
        raise KeyError(ep_id)

    def load(self, ep_id: str) -> tuple[np.ndarray, np.ndarray]:
        if ep_id not in self._cache:
            self._cache[ep_id] = read_episode_file(self.root / self.entry(ep_id)["file"])
        return self._cache[ep_id]

    def instruction(self, ep_id: str) -> str:
        return self.entry(ep_id)["instruction"]
