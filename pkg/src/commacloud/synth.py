"""Deterministic synthetic satellite sequences with planted comma clouds.

Each comma is a bright head disc to the northwest, a tail arc sweeping
round to the east and a dark dry slot between them.  Commas drift east,
rotate, and spawn storm events inside their heads.  Storm-free cirrus
shields act as bright distractors, and the background carries a diurnal
cycle, static terrain and per-frame noise.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path

import numpy as np

from .exceptions import PreconditionError
from .imagery import (
    STORM_KINDS,
    BBox,
    Frame,
    LabeledCloud,
    StormEvent,
    save_frame,
    write_labels,
    write_storms,
)

__all__ = ["SynthConfig", "RenderedComma", "Corpus", "render_comma", "generate_corpus", "write_corpus"]

BACKGROUND_CEILING = 199
BODY_RANGE = (210, 245)
SLOT_LEVEL = 40

# shape constants in "comma units"; the unrotated mask spans about +-0.75
_HEAD_CENTER = (-0.3, -0.3)
_HEAD_RADIUS = 0.45
_TAIL_RADII = (0.72, 1.05)
_TAIL_ANGLES = (-20.0, 100.0)  # degrees from east, clockwise on screen
_SLOT_RADII = (0.47, 0.70)
_SLOT_ANGLES = (5.0, 85.0)
_UNIT_PER_SIDE = 1.5


@dataclass(frozen=True)
class SynthConfig:
    height: int = 384
    width: int = 768
    frames_per_hour: int = 2
    duration_hours: float = 104.0
    start: str = "2008-01-01T00:15Z"
    max_commas: int = 2
    spawn_probability: float = 0.9
    side_range: tuple[float, float] = (128.0, 200.0)
    lifetime_frames: tuple[int, int] = (5, 10)
    rotation_deg_per_frame: float = 3.0
    drift_px_per_frame: float = 3.0
    head_level: float = 214.0
    tail_level: float = 236.0
    texture_amplitude: float = 4.0
    max_cirrus: int = 1
    cirrus_probability: float = 0.3
    cirrus_radius_range: tuple[float, float] = (30.0, 60.0)
    cirrus_level: float = 238.0
    base_intensity: float = 95.0
    diurnal_amplitude: float = 30.0
    terrain_amplitude: float = 12.0
    noise_amplitude: float = 6.0
    storms_per_comma: tuple[int, int] = (1, 3)
    storm_minutes: tuple[int, int] = (30, 120)
    seed: int = 0

    def __post_init__(self):
        if self.height < 32 or self.width < 32:
            raise PreconditionError("frames must be at least 32x32")
        if self.frames_per_hour < 1 or self.duration_hours <= 0:
            raise PreconditionError("cadence and duration must be positive")
        lo, hi = self.side_range
        if not 32 <= lo <= hi <= min(self.height, self.width):
            raise PreconditionError("side range must lie in [32, frame size]")
        if not 1 <= self.lifetime_frames[0] <= self.lifetime_frames[1]:
            raise PreconditionError("invalid lifetime range")
        if not 0 <= self.storms_per_comma[0] <= self.storms_per_comma[1]:
            raise PreconditionError("invalid storm count range")
        if self.storm_minutes[0] < 30 or self.storm_minutes[1] < self.storm_minutes[0]:
            raise PreconditionError("storms must last at least 30 minutes")
        if self.max_commas < 0 or self.max_cirrus < 0:
            raise PreconditionError("counts must be non-negative")

    @property
    def n_frames(self) -> int:
        return int(round(self.duration_hours * self.frames_per_hour))

    def timestamps(self) -> list[datetime]:
        begin = datetime.strptime(self.start, "%Y-%m-%dT%H:%MZ").replace(tzinfo=timezone.utc)
        step = timedelta(minutes=60 / self.frames_per_hour)
        return [begin + i * step for i in range(self.n_frames)]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class RenderedComma:
    """Canvas-sized masks and cloud intensities centred on the comma centre."""

    cloud: np.ndarray  # bool, head or tail
    head: np.ndarray  # bool
    slot: np.ndarray  # bool
    intensity: np.ndarray  # float, meaningful where cloud or slot

    @property
    def half(self) -> int:
        return self.cloud.shape[0] // 2

    def support(self) -> tuple[int, int, int, int]:
        """Row/col extent ``(r0, r1, c0, c1)`` of the cloud mask, relative to the canvas."""
        rows = np.flatnonzero(self.cloud.any(axis=1))
        cols = np.flatnonzero(self.cloud.any(axis=0))
        return int(rows[0]), int(rows[-1]), int(cols[0]), int(cols[-1])


def _angle_in(phi: np.ndarray, lo: float, hi: float) -> np.ndarray:
    span = (hi - lo) % 360.0
    return ((phi - lo) % 360.0) <= span


def render_comma(
    side: float,
    phase: float,
    head_level: float = 214.0,
    tail_level: float = 236.0,
    texture_amplitude: float = 0.0,
    texture_phase: float = 0.0,
) -> RenderedComma:
    """Render one comma of nominal extent ``side`` rotated by ``phase`` degrees.

    The canvas is square with odd side so rotation by 180 degrees maps the
    pixel grid onto itself.
    """
    if side < 32:
        raise PreconditionError("comma side must be at least 32")
    half = int(math.ceil(side / 2 * math.sqrt(2))) + 2
    offs = np.arange(-half, half + 1, dtype=np.float64)
    yy, xx = np.meshgrid(offs, offs, indexing="ij")
    unit = side / _UNIT_PER_SIDE
    # rotate screen coordinates back into the comma frame
    theta = math.radians(phase)
    c, s = math.cos(theta), math.sin(theta)
    u = (c * xx + s * yy) / unit
    v = (-s * xx + c * yy) / unit
    du, dv = u - _HEAD_CENTER[0], v - _HEAD_CENTER[1]
    r = np.hypot(du, dv)
    phi = np.degrees(np.arctan2(dv, du))
    head = r <= _HEAD_RADIUS
    tail = (r >= _TAIL_RADII[0]) & (r <= _TAIL_RADII[1]) & _angle_in(phi, *_TAIL_ANGLES)
    slot = (r > _SLOT_RADII[0]) & (r < _SLOT_RADII[1]) & _angle_in(phi, *_SLOT_ANGLES)
    cloud = head | tail
    texture = texture_amplitude * np.sin(7.0 * u + texture_phase) * np.cos(5.0 * v - texture_phase)
    intensity = np.where(head, head_level, tail_level) + texture
    intensity = np.clip(intensity, *BODY_RANGE)
    intensity = np.where(slot & ~cloud, SLOT_LEVEL, intensity)
    return RenderedComma(cloud=cloud, head=head, slot=slot & ~cloud, intensity=intensity)


@dataclass
class _Comma:
    ident: int
    birth: int
    death: int
    row: float
    col: float
    side: float
    phase: float
    spin: float
    texture_phase: float

    def state(self, frame: int, drift: float) -> tuple[float, float, float]:
        age = frame - self.birth
        return self.row, self.col + drift * age, self.phase + self.spin * age


@dataclass
class _Cirrus:
    birth: int
    death: int
    row: float
    col: float
    radius_row: float
    radius_col: float
    texture_phase: float


@dataclass
class Corpus:
    frames: list[Frame]
    labels: list[LabeledCloud]
    storms: list[StormEvent]
    config: SynthConfig
    comma_ids: list[int] = field(default_factory=list)  # parallel to labels

    @property
    def n_commas(self) -> int:
        return len(set(self.comma_ids))


def _terrain(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    rows = np.arange(cfg.height, dtype=np.float64)[:, None]
    cols = np.arange(cfg.width, dtype=np.float64)[None, :]
    out = np.zeros((cfg.height, cfg.width))
    for _ in range(4):
        fr, fc = rng.uniform(0.005, 0.03, size=2)
        pr, pc = rng.uniform(0, 2 * np.pi, size=2)
        out += np.sin(2 * np.pi * fr * rows + pr) * np.cos(2 * np.pi * fc * cols + pc)
    peak = np.abs(out).max()
    return cfg.terrain_amplitude * out / peak if peak > 0 else out


def _swept(birth, death, row, col, speed, reach_row, reach_col):
    """Lifetime and the rectangle swept by an object drifting east."""
    travel = speed * (death - birth)
    return birth, death, row - reach_row, row + reach_row, col - reach_col, col + travel + reach_col


def _collides(track, tracks) -> bool:
    b, d, r0, r1, c0, c1 = track
    for ob, od, or0, or1, oc0, oc1 in tracks:
        if b < od and ob < d and r0 < or1 and or0 < r1 and c0 < oc1 and oc0 < c1:
            return True
    return False


def _plan_world(cfg: SynthConfig, rng: np.random.Generator):
    commas: list[_Comma] = []
    cirri: list[_Cirrus] = []
    tracks: list[tuple] = []
    n = cfg.n_frames
    drift = cfg.drift_px_per_frame
    for t in range(n):
        alive = [c for c in commas if c.birth <= t < c.death]
        if len(alive) < cfg.max_commas and rng.random() < cfg.spawn_probability:
            side = rng.uniform(*cfg.side_range)
            life = int(rng.integers(cfg.lifetime_frames[0], cfg.lifetime_frames[1] + 1))
            death = min(n, t + life)
            # a rotated comma reaches at most 0.6 side from its centre
            reach = 0.6 * side + 4
            travel = drift * (death - t)
            lo_c, hi_c = reach, cfg.width - reach - max(travel, 0.0)
            lo_r, hi_r = 0.5 * side, cfg.height - 0.5 * side
            if lo_c < hi_c and lo_r <= hi_r:
                for _ in range(20):
                    row = rng.uniform(lo_r, hi_r)
                    col = rng.uniform(lo_c, hi_c)
                    track = _swept(t, death, row, col, drift, reach, reach)
                    if not _collides(track, tracks):
                        tracks.append(track)
                        commas.append(
                            _Comma(
                                ident=len(commas),
                                birth=t,
                                death=death,
                                row=row,
                                col=col,
                                side=side,
                                phase=rng.uniform(-20.0, 20.0),
                                spin=-cfg.rotation_deg_per_frame,
                                texture_phase=rng.uniform(0, 2 * np.pi),
                            )
                        )
                        break
        alive_cirrus = [c for c in cirri if c.birth <= t < c.death]
        if len(alive_cirrus) < cfg.max_cirrus and rng.random() < cfg.cirrus_probability:
            rr = rng.uniform(*cfg.cirrus_radius_range)
            rc = rng.uniform(*cfg.cirrus_radius_range) * 1.4
            life = int(rng.integers(cfg.lifetime_frames[0], cfg.lifetime_frames[1] + 1))
            death = min(n, t + life)
            for _ in range(20):
                row = rng.uniform(rr, max(rr + 1, cfg.height - rr))
                col = rng.uniform(rc, max(rc + 1, cfg.width - rc))
                track = _swept(t, death, row, col, 0.5 * drift, rr + 4, rc + 4)
                if not _collides(track, tracks):
                    tracks.append(track)
                    cirri.append(_Cirrus(t, death, row, col, rr, rc, rng.uniform(0, 2 * np.pi)))
                    break
    return commas, cirri


def _paste(canvas: np.ndarray, patch: np.ndarray, mask: np.ndarray, top: int, left: int) -> None:
    h, w = canvas.shape
    r0, c0 = max(0, top), max(0, left)
    r1, c1 = min(h, top + patch.shape[0]), min(w, left + patch.shape[1])
    if r0 >= r1 or c0 >= c1:
        return
    sub = (slice(r0 - top, r1 - top), slice(c0 - left, c1 - left))
    region = canvas[r0:r1, c0:c1]
    m = mask[sub]
    region[m] = patch[sub][m]


def _render_frame(cfg: SynthConfig, t: int, when: datetime, terrain, commas, cirri, noise_seed):
    rng = np.random.default_rng(noise_seed)
    hour = when.hour + when.minute / 60.0
    base = cfg.base_intensity + cfg.diurnal_amplitude * math.sin(2 * math.pi * hour / 24.0)
    img = base + terrain + rng.normal(0.0, cfg.noise_amplitude, size=terrain.shape)
    img = np.clip(img, 0.0, BACKGROUND_CEILING)
    rows = np.arange(cfg.height, dtype=np.float64)[:, None]
    cols = np.arange(cfg.width, dtype=np.float64)[None, :]
    for c in cirri:
        if not c.birth <= t < c.death:
            continue
        col = c.col + 0.5 * cfg.drift_px_per_frame * (t - c.birth)
        q = ((rows - c.row) / c.radius_row) ** 2 + ((cols - col) / c.radius_col) ** 2
        inside = q <= 1.0
        tex = cfg.texture_amplitude * np.sin(0.11 * cols + c.texture_phase) * np.cos(0.09 * rows)
        img = np.where(inside, np.clip(cfg.cirrus_level + tex, *BODY_RANGE), img)
    labels = []
    for c in commas:
        if not c.birth <= t < c.death:
            continue
        row, col, phase = c.state(t, cfg.drift_px_per_frame)
        rc = render_comma(c.side, phase, cfg.head_level, cfg.tail_level, cfg.texture_amplitude, c.texture_phase)
        half = rc.half
        top, left = int(round(row)) - half, int(round(col)) - half
        _paste(img, rc.intensity, rc.cloud | rc.slot, top, left)
        r0, r1, c0, c1 = rc.support()
        y0, y1 = top + r0, top + r1
        x0, x1 = left + c0, left + c1
        sq = max(y1 - y0, x1 - x0) + 1
        cy, cx = (y0 + y1) / 2.0, (x0 + x1) / 2.0
        box = BBox.clamped(round(cx - (sq - 1) / 2.0), round(cy - (sq - 1) / 2.0), sq, cfg.width, cfg.height)
        labels.append((c.ident, box, (top, left, rc)))
    pixels = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return Frame(pixels, when), labels


def generate_corpus(config: SynthConfig | None = None) -> Corpus:
    """Render the full sequence, its comma labels and storm events."""
    cfg = config or SynthConfig()
    root = np.random.SeedSequence(cfg.seed)
    world_seq, terrain_seq, storm_seq, noise_seq = root.spawn(4)
    world_rng = np.random.default_rng(world_seq)
    commas, cirri = _plan_world(cfg, world_rng)
    terrain = _terrain(cfg, np.random.default_rng(terrain_seq))
    times = cfg.timestamps()
    noise_seeds = noise_seq.spawn(len(times))
    storm_rng = np.random.default_rng(storm_seq)

    frames: list[Frame] = []
    labels: list[LabeledCloud] = []
    ids: list[int] = []
    heads: dict[int, list[tuple[int, tuple]]] = {}
    for t, when in enumerate(times):
        frame, planted = _render_frame(cfg, t, when, terrain, commas, cirri, noise_seeds[t])
        frames.append(frame)
        for ident, box, geom in planted:
            labels.append(LabeledCloud(when, box))
            ids.append(ident)
            heads.setdefault(ident, []).append((t, geom, box))

    storms: list[StormEvent] = []
    for ident in sorted(heads):
        seen = heads[ident]
        count = int(storm_rng.integers(cfg.storms_per_comma[0], cfg.storms_per_comma[1] + 1))
        for _ in range(count):
            t, (top, left, rc), box = seen[int(storm_rng.integers(len(seen)))]
            # sample well inside the head disc so the point survives a few frames of drift
            rr, cc = np.nonzero(rc.head)
            centre_r, centre_c = rr.mean(), cc.mean()
            radius = math.sqrt(rc.head.sum() / math.pi)
            ang = storm_rng.uniform(0, 2 * math.pi)
            dist = radius * 0.5 * math.sqrt(storm_rng.random())
            row = int(round(top + centre_r + dist * math.sin(ang)))
            col = int(round(left + centre_c + dist * math.cos(ang)))
            row = min(max(row, box.y0), box.y1)
            col = min(max(col, box.x0), box.x1)
            minutes = int(storm_rng.integers(cfg.storm_minutes[0], cfg.storm_minutes[1] + 1))
            begin = times[t]
            end = begin + timedelta(minutes=minutes)
            kind = STORM_KINDS[int(storm_rng.integers(len(STORM_KINDS)))]
            storms.append(StormEvent(begin, end, row, col, kind))
    storms.sort(key=lambda s: (s.begin, s.row, s.col))
    return Corpus(frames, labels, storms, cfg, ids)


def write_corpus(corpus: Corpus, directory: str | Path) -> Path:
    """Write ``frames/*.pgm``, ``labels.csv`` and ``storms.csv`` under ``directory``."""
    out = Path(directory)
    frames_dir = out / "frames"
    frames_dir.mkdir(parents=True, exist_ok=True)
    for f in corpus.frames:
        save_frame(f, frames_dir)
    write_labels(out / "labels.csv", corpus.labels)
    write_storms(out / "storms.csv", corpus.storms)
    return out
