"""Synthetic dashboard-camera world.

A straight three-lane road seen through a pinhole camera, box-shaped vehicles and
pedestrians, and an ego speed that follows a fixed control law. Two facts the law
depends on are only visible at high resolution: the lead vehicle's brake light and a
pedestrian's intent to cross. Both are drawn as small striped glyphs whose two
states have the same mean colour, so they vanish once the frame is downsampled.
"""
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

FULL_FRAME = (720, 1280)
FULL_PERIPHERY = (72, 128)
GRID = (9, 16)

HORIZON_FRACTION = 0.4
FOCAL_FRACTION = 0.8
CAMERA_HEIGHT = 1.5
LANE_WIDTH = 3.5
ROAD_HALF_WIDTH = 1.5 * LANE_WIDTH
SIDEWALK_X = ROAD_HALF_WIDTH + 1.5
NEAR = 1.0

VEHICLE_SIZE = (1.8, 1.5)
PEDESTRIAN_SIZE = (0.6, 1.7)
WALK_SPEED = 1.4
LEAD_DECEL = 3.0
LEAD_GAP = 25.0

SKY = (135, 206, 235)
GRASS = (70, 130, 60)
ROAD = (96, 96, 96)
MARKING = (230, 230, 230)
PEDESTRIAN_COLOUR = (230, 140, 40)
VEHICLE_PALETTE = ((40, 60, 160), (150, 30, 40), (30, 30, 30), (200, 200, 210), (40, 110, 70))
BRAKE_GLYPH = ((230, 20, 20), (20, 20, 20))
INTENT_GLYPH = ((240, 240, 240), (20, 20, 20))


@dataclass
class WorldConfig:
    seed: int = 0
    num_clips: int = 24
    clip_seconds: float = 40.0
    frame_rate: int = 10
    scale: int = 1
    num_vehicles: int = 3
    num_pedestrians: int = 2
    cue_size: int = 8
    cruise_speed: float = 50.0
    # km/h of desired speed per metre of gap beyond min_gap
    gap_gain: float = 2.5
    min_gap: float = 5.0
    brake_drop: float = 20.0
    brake_range: float = 40.0
    pedestrian_cap: float = 15.0
    pedestrian_range: float = 35.0
    response_gain: float = 0.8
    max_accel: float = 2.0
    max_decel: float = 4.0
    brake_rate: float = 0.12
    intent_probability: float = 0.5
    gaze_sigma: float = 1.0

    def __post_init__(self):
        s = self.scale
        if s < 1 or any(v % s for v in (*FULL_FRAME, *FULL_PERIPHERY)):
            raise ValueError(f'Scale {s} does not divide the frame and periphery sizes')
        if self.clip_seconds <= 0 or self.frame_rate < 1 or self.num_clips < 0:
            raise ValueError('Clip length, frame rate and clip count must be positive')
        if self.num_vehicles < 0 or self.num_pedestrians < 0:
            raise ValueError('Agent counts must be non-negative')
        if not 1 <= self.cue_size < self.downsample_factor:
            raise ValueError(f'Cue size {self.cue_size} px must be below the peripheral downsample '
                             f'factor {self.downsample_factor:g} to stay invisible there')
        if min(self.response_gain, self.max_accel, self.max_decel, self.gaze_sigma) <= 0:
            raise ValueError('Gains, acceleration limits and gaze sigma must be positive')
        if not 0 <= self.intent_probability <= 1:
            raise ValueError('Intent probability must lie in [0, 1]')

    @property
    def frame_size(self) -> Tuple[int, int]:
        return FULL_FRAME[0] // self.scale, FULL_FRAME[1] // self.scale

    @property
    def downsample_factor(self) -> float:
        return FULL_FRAME[0] / FULL_PERIPHERY[0]

    @property
    def num_frames(self) -> int:
        return int(round(self.clip_seconds * self.frame_rate))

    @property
    def dt(self) -> float:
        return 1.0 / self.frame_rate

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class AgentState:
    kind: str
    agent_id: int
    x: float
    z: float
    speed: float
    cue: bool
    width: float
    height: float

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Dict) -> 'AgentState':
        return cls(**d)


@dataclass
class VideoClip:
    clip_id: str
    frames: np.ndarray
    speed: np.ndarray
    gaze: Optional[np.ndarray]
    tags: List[List[str]] = field(default_factory=list)
    agents: List[List[AgentState]] = field(default_factory=list)
    frame_rate: int = 10

    def __post_init__(self):
        T = len(self.frames)
        lengths = [len(self.speed), len(self.tags)]
        if self.gaze is not None:
            lengths.append(len(self.gaze))
        if any(n != T for n in lengths):
            raise ValueError(f'Clip {self.clip_id}: frames, speed, gaze and tags differ in length')
        if (np.asarray(self.speed) < 0).any():
            raise ValueError(f'Clip {self.clip_id}: negative speed')

    @property
    def num_frames(self) -> int:
        return len(self.frames)

    @property
    def seconds(self) -> float:
        return self.num_frames / self.frame_rate

    @property
    def timestamps(self) -> np.ndarray:
        return np.arange(self.num_frames) / self.frame_rate

    def pedestrian_mask(self) -> np.ndarray:
        return np.array(['pedestrian' in t for t in self.tags], dtype=bool)

    def equals(self, other: 'VideoClip') -> bool:
        if self.gaze is None or other.gaze is None:
            gaze_equal = self.gaze is None and other.gaze is None
        else:
            gaze_equal = np.array_equal(self.gaze, other.gaze)
        return (self.clip_id == other.clip_id
                and self.frame_rate == other.frame_rate
                and np.array_equal(self.frames, other.frames)
                and np.array_equal(self.speed, other.speed)
                and gaze_equal
                and self.tags == other.tags
                and self.agents == other.agents)


def focal_length(frame_size: Sequence[int]) -> float:
    return FOCAL_FRACTION * frame_size[1]


def project_box(agent: AgentState, frame_size: Sequence[int]) -> Tuple[float, float, float, float]:
    """(top, left, bottom, right) of the agent's box in pixels; z must be positive."""
    height, width = frame_size
    s = focal_length(frame_size) / agent.z
    cx = width / 2 + agent.x * s
    bottom = HORIZON_FRACTION * height + CAMERA_HEIGHT * s
    half = agent.width * s / 2
    return bottom - agent.height * s, cx - half, bottom, cx + half


def in_frustum(agent: AgentState, frame_size: Sequence[int]) -> bool:
    if agent.z <= NEAR:
        return False
    top, left, bottom, right = project_box(agent, frame_size)
    return bottom > 0 and top < frame_size[0] and right > 0 and left < frame_size[1]


def lead_vehicle(agents: Sequence[AgentState]) -> Optional[AgentState]:
    ahead = [a for a in agents if a.kind == 'vehicle' and abs(a.x) < LANE_WIDTH / 2 and a.z > 0]
    return min(ahead, key=lambda a: a.z) if ahead else None


def pedestrian_active(agent: AgentState, config: WorldConfig) -> bool:
    """A visible pedestrian about to cross (or crossing) within reaction range."""
    return (agent.kind == 'pedestrian' and agent.cue
            and agent.z < config.pedestrian_range and in_frustum(agent, config.frame_size))


def speed_law(speed: float, agents: Sequence[AgentState], config: WorldConfig) -> float:
    """Ego speed (km/h) at the next frame given the speed and agents of this one."""
    desired = config.cruise_speed
    lead = lead_vehicle(agents)
    if lead is not None:
        desired = min(desired, config.gap_gain * max(lead.z - config.min_gap, 0.0))
        if lead.cue and lead.z < config.brake_range:
            desired = max(desired - config.brake_drop, 0.0)
    for agent in agents:
        if pedestrian_active(agent, config):
            desired = min(desired, config.pedestrian_cap * agent.z / config.pedestrian_range)
    dt = config.dt
    change = config.response_gain * (desired - speed) * dt
    change = min(max(change, -3.6 * config.max_decel * dt), 3.6 * config.max_accel * dt)
    return max(speed + change, 0.0)


def frame_tags(agents: Sequence[AgentState], config: WorldConfig) -> List[str]:
    tags = []
    if any(pedestrian_active(a, config) for a in agents):
        tags.append('pedestrian')
    lead = lead_vehicle(agents)
    if lead is not None and lead.cue and lead.z < config.brake_range:
        tags.append('lead-braking')
    return tags


def criticality(agent: AgentState, agents: Sequence[AgentState], config: WorldConfig) -> float:
    if not in_frustum(agent, config.frame_size):
        return 0.0
    if agent.kind == 'pedestrian':
        if pedestrian_active(agent, config):
            return 2.0
        return 1.0 if agent.z < 1.5 * config.pedestrian_range else 0.0
    if agent is lead_vehicle(agents) and agent.z < config.brake_range:
        return 2.0 if agent.cue else 1.0
    return 0.0


def gaze_ground_truth(agents: Sequence[AgentState], config: WorldConfig,
                      grid: Sequence[int] = GRID) -> np.ndarray:
    """Normalised Gaussian mixture over grid cells, one component per critical agent.

    Without critical agents the gaze rests on the road's vanishing point.
    """
    height, width = config.frame_size
    pitch = height / grid[0]
    foci = []
    for agent in agents:
        weight = criticality(agent, agents, config)
        if weight > 0:
            top, left, bottom, right = project_box(agent, config.frame_size)
            foci.append(((top + bottom) / 2 / pitch, (left + right) / 2 / pitch, weight))
    if not foci:
        foci = [(HORIZON_FRACTION * height / pitch, width / 2 / pitch, 1.0)]
    rows = np.arange(grid[0]) + 0.5
    cols = np.arange(grid[1]) + 0.5
    gaze = np.zeros(tuple(grid))
    for fy, fx, weight in foci:
        d2 = (rows[:, None] - fy) ** 2 + (cols[None, :] - fx) ** 2
        gaze += weight * np.exp(-d2 / (2 * config.gaze_sigma ** 2))
    return gaze / gaze.sum()


def render_background(frame_size: Sequence[int]) -> np.ndarray:
    height, width = frame_size
    image = np.empty((height, width, 3), dtype=np.uint8)
    horizon = int(round(HORIZON_FRACTION * height))
    image[:horizon] = SKY
    image[horizon:] = GRASS
    rows = np.arange(horizon, height) + 0.5
    pixels_per_metre = (rows - HORIZON_FRACTION * height) / CAMERA_HEIGHT
    lateral = (np.arange(width) + 0.5 - width / 2)[None, :] / pixels_per_metre[:, None]
    ground = image[horizon:]
    ground[np.abs(lateral) < ROAD_HALF_WIDTH] = ROAD
    ground[np.abs(np.abs(lateral) - LANE_WIDTH / 2) < 0.08] = MARKING
    return image


def cue_glyph(active: bool, size: int, colours) -> np.ndarray:
    """Stripes of period 4 px: horizontal when active, vertical otherwise."""
    stripes = (np.arange(size) // 2) % 2 == 1
    mask = np.broadcast_to(stripes[:, None] if active else stripes[None, :], (size, size))
    return np.where(mask[..., None], np.array(colours[1], np.uint8), np.array(colours[0], np.uint8))


def draw_cue(image: np.ndarray, center: Tuple[float, float], active: bool, size: int, colours):
    top = int(round(center[0] - size / 2))
    left = int(round(center[1] - size / 2))
    glyph = cue_glyph(active, size, colours)
    y0, x0 = max(top, 0), max(left, 0)
    y1, x1 = min(top + size, image.shape[0]), min(left + size, image.shape[1])
    if y1 > y0 and x1 > x0:
        image[y0:y1, x0:x1] = glyph[y0 - top:y1 - top, x0 - left:x1 - left]


def render_frame(background: np.ndarray, agents: Sequence[AgentState], config: WorldConfig) -> np.ndarray:
    image = background.copy()
    height, width = image.shape[:2]
    for agent in sorted(agents, key=lambda a: -a.z):
        if not in_frustum(agent, (height, width)):
            continue
        top, left, bottom, right = project_box(agent, (height, width))
        y0, y1 = max(int(np.floor(top)), 0), min(int(np.ceil(bottom)), height)
        x0, x1 = max(int(np.floor(left)), 0), min(int(np.ceil(right)), width)
        cx = (left + right) / 2
        if agent.kind == 'vehicle':
            image[y0:y1, x0:x1] = VEHICLE_PALETTE[agent.agent_id % len(VEHICLE_PALETTE)]
            draw_cue(image, (bottom - 0.35 * (bottom - top), cx), agent.cue, config.cue_size, BRAKE_GLYPH)
        else:
            image[y0:y1, x0:x1] = PEDESTRIAN_COLOUR
            draw_cue(image, (top + 0.15 * (bottom - top), cx), agent.cue, config.cue_size, INTENT_GLYPH)
    return image


class _World:
    """Mutable agent state between frames; frames only ever see snapshots."""

    def __init__(self, config: WorldConfig, rng: np.random.Generator):
        self.config = config
        self.rng = rng
        self.vehicles: List[Dict] = []
        self.pedestrians: List[Dict] = []
        cruise = config.cruise_speed / 3.6
        for k in range(config.num_vehicles):
            if k == 0:
                self.vehicles.append(dict(agent_id=0, x=0.0, z=rng.uniform(15, 35),
                                          speed=cruise * rng.uniform(0.9, 1.1), braking=0.0))
            else:
                self.vehicles.append(dict(agent_id=k, x=LANE_WIDTH * (1 if k % 2 else -1),
                                          z=rng.uniform(10, 90), speed=cruise * rng.uniform(0.8, 1.2),
                                          braking=0.0))
        for k in range(config.num_pedestrians):
            self.pedestrians.append(self._spawn_pedestrian(config.num_vehicles + k, 15, 70))

    def _spawn_pedestrian(self, agent_id: int, near: float, far: float) -> Dict:
        rng = self.rng
        side = 1.0 if rng.random() < 0.5 else -1.0
        intent = rng.random() < self.config.intent_probability
        return dict(agent_id=agent_id, x=side * SIDEWALK_X, z=rng.uniform(near, far), side=side,
                    phase='waiting' if intent else 'idle', timer=rng.uniform(1.0, 3.0))

    def snapshot(self) -> List[AgentState]:
        agents = [AgentState('vehicle', v['agent_id'], v['x'], v['z'], v['speed'], v['braking'] > 0,
                             *VEHICLE_SIZE) for v in self.vehicles]
        agents += [AgentState('pedestrian', p['agent_id'], p['x'], p['z'],
                              WALK_SPEED if p['phase'] == 'crossing' else 0.0,
                              p['phase'] in ('waiting', 'crossing'), *PEDESTRIAN_SIZE)
                   for p in self.pedestrians]
        return agents

    def advance(self, ego_speed: float):
        config, rng, dt = self.config, self.rng, self.config.dt
        ego = ego_speed / 3.6 * dt
        cruise = config.cruise_speed / 3.6
        for v in self.vehicles:
            if v['agent_id'] == 0:
                if v['braking'] > 0:
                    v['braking'] = max(v['braking'] - dt, 0.0)
                    v['speed'] = max(v['speed'] - LEAD_DECEL * dt, 0.0)
                elif rng.random() < config.brake_rate * dt and v['z'] < config.brake_range:
                    v['braking'] = rng.uniform(1.5, 3.0)
                else:
                    target = cruise + 0.3 * (LEAD_GAP - v['z'])
                    v['speed'] = max(v['speed'] + 0.5 * (target - v['speed']) * dt, 0.0)
                v['z'] = min(max(v['z'] + v['speed'] * dt - ego, 4.0), 80.0)
            else:
                v['z'] += v['speed'] * dt - ego
                if not 3.0 < v['z'] < 120.0:
                    v['z'] = rng.uniform(40, 100)
                    v['speed'] = cruise * rng.uniform(0.8, 1.2)
        for k, p in enumerate(self.pedestrians):
            p['z'] -= ego
            if p['phase'] == 'waiting':
                p['timer'] -= dt
                if p['timer'] <= 0:
                    p['phase'] = 'crossing'
            elif p['phase'] == 'crossing':
                p['x'] -= p['side'] * WALK_SPEED * dt
                if p['side'] * p['x'] <= -SIDEWALK_X:
                    p['phase'] = 'idle'
            if p['z'] < 4.0:
                self.pedestrians[k] = self._spawn_pedestrian(p['agent_id'], 40, 80)


def generate_clip(config: WorldConfig, seed: int, clip_id: Optional[str] = None) -> VideoClip:
    """Renders one clip; everything is a function of (config, seed)."""
    rng = np.random.default_rng(seed)
    world = _World(config, rng)
    background = render_background(config.frame_size)
    T = config.num_frames
    frames = np.empty((T, *config.frame_size, 3), dtype=np.uint8)
    speed = np.empty(T)
    gaze = np.empty((T, *GRID))
    tags, agents_log = [], []
    v = config.cruise_speed
    for t in range(T):
        agents = world.snapshot()
        frames[t] = render_frame(background, agents, config)
        speed[t] = v
        gaze[t] = gaze_ground_truth(agents, config)
        tags.append(frame_tags(agents, config))
        agents_log.append(agents)
        next_v = speed_law(v, agents, config)
        world.advance(v)
        v = next_v
    return VideoClip(clip_id=clip_id or f'clip-{seed:06d}', frames=frames, speed=speed, gaze=gaze,
                     tags=tags, agents=agents_log, frame_rate=config.frame_rate)


def iter_clips(config: WorldConfig) -> Iterator[VideoClip]:
    for k in tqdm(range(config.num_clips), desc='generating clips'):
        yield generate_clip(config, config.seed + k, f'clip-{k:04d}')


def generate_clips(config: WorldConfig) -> List[VideoClip]:
    return list(iter_clips(config))
