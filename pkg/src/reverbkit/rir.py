"""Shoebox image-source RIR simulation and analytic decay oracles."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.signal import butter, sosfilt

from .audio import SAMPLE_RATE, AudioBuffer
from .errors import ConfigError, ResourceError

SPEED_OF_SOUND = 343.0
MAX_ORDER = 40
MAX_IMAGES = 5_000_000
CULL_DB = 100.0
FD_TAPS = 81
HIGHPASS_HZ = 20.0

_WALL_MARGIN = 0.1
_MIN_DISTANCE = 0.05
# ln(10**6) / 2: amplitude rate giving exactly 60 dB energy decay per t60.
_DECAY_60DB = 6.907755278982137


@dataclass(frozen=True)
class RoomSpec:
    """Rectangular room with a point source and receiver.

    ``absorption`` is either one value or six, ordered
    ``(x=0, x=Lx, y=0, y=Ly, z=0, z=Lz)``.
    """

    dims: tuple
    absorption: tuple
    source: tuple
    receiver: tuple
    max_order: int = MAX_ORDER
    speed_of_sound: float = SPEED_OF_SOUND
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        dims = tuple(float(v) for v in self.dims)
        src = tuple(float(v) for v in self.source)
        rcv = tuple(float(v) for v in self.receiver)
        alpha = np.atleast_1d(np.asarray(self.absorption, dtype=np.float64))
        if alpha.size == 1:
            alpha = np.repeat(alpha, 6)
        if len(dims) != 3 or len(src) != 3 or len(rcv) != 3:
            raise ConfigError("dims, source and receiver must all be 3-vectors")
        if alpha.size != 6:
            raise ConfigError("absorption needs 1 or 6 values")
        if min(dims) <= 0:
            raise ConfigError(f"room dimensions must be positive, got {dims}")
        if np.any(alpha < 0) or np.any(alpha > 1) or not np.all(np.isfinite(alpha)):
            raise ConfigError(f"absorption must lie in [0, 1], got {alpha.tolist()}")
        for name, p in (("source", src), ("receiver", rcv)):
            for v, L in zip(p, dims):
                if not _WALL_MARGIN <= v <= L - _WALL_MARGIN:
                    raise ConfigError(f"{name} {p} must be at least {_WALL_MARGIN} m inside {dims}")
        if math.dist(src, rcv) < _MIN_DISTANCE:
            raise ConfigError("source and receiver must be at least 5 cm apart")
        if int(self.max_order) != self.max_order or self.max_order < 0:
            raise ConfigError("max_order must be a non-negative integer")
        if self.speed_of_sound <= 0 or self.sample_rate <= 0:
            raise ConfigError("speed_of_sound and sample_rate must be positive")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "source", src)
        object.__setattr__(self, "receiver", rcv)
        object.__setattr__(self, "absorption", tuple(alpha.tolist()))
        object.__setattr__(self, "max_order", int(self.max_order))
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    @property
    def volume(self) -> float:
        lx, ly, lz = self.dims
        return lx * ly * lz

    @property
    def wall_areas(self) -> np.ndarray:
        lx, ly, lz = self.dims
        return np.array([ly * lz, ly * lz, lx * lz, lx * lz, lx * ly, lx * ly])

    @property
    def distance(self) -> float:
        return math.dist(self.source, self.receiver)

    def mean_absorption(self) -> float:
        areas = self.wall_areas
        return float(np.dot(areas, self.absorption) / areas.sum())

    def swapped(self) -> "RoomSpec":
        return RoomSpec(self.dims, self.absorption, self.receiver, self.source,
                        self.max_order, self.speed_of_sound, self.sample_rate)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("dims", "absorption", "source", "receiver"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d) -> "RoomSpec":
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()})


@dataclass(frozen=True)
class Rir:
    h: AudioBuffer
    room: RoomSpec | None = None
    direct_delay: float | None = None
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def sample_rate(self) -> int:
        return self.h.sample_rate

    def energy(self) -> float:
        return float(np.sum(self.h.samples**2))

    def scaled(self, gain) -> "Rir":
        return Rir(AudioBuffer(self.h.samples * gain, self.sample_rate), self.room,
                   self.direct_delay, dict(self.meta))


def sabine_t60(room: RoomSpec) -> float:
    absorbing_area = float(np.dot(room.wall_areas, room.absorption))
    if absorbing_area <= 0:
        return math.inf
    return 0.161 * room.volume / absorbing_area


def eyring_t60(room: RoomSpec) -> float:
    """Eyring reverberation time using the area-weighted mean absorption."""
    alpha = room.mean_absorption()
    if alpha <= 0:
        return math.inf
    if alpha >= 1:
        return 0.0
    surface = float(room.wall_areas.sum())
    return 0.161 * room.volume / (-surface * math.log(1.0 - alpha))


def _axis_images(length, src, rcv, order, beta_lo, beta_hi):
    """Image offsets and reflection gains along one axis.

    Image ``k`` sits at ``k*L + s`` for even ``k`` and ``(k+1)*L - s`` for odd
    ``k``; it has reflected ``|k|`` times, split between the two walls.
    """
    k = np.arange(-order, order + 1)
    even = k % 2 == 0
    pos = np.where(even, k * length + src, (k + 1) * length - src)
    hits_major = (np.abs(k) + 1) // 2
    hits_minor = np.abs(k) // 2
    hi = np.where(k > 0, hits_major, hits_minor)
    lo = np.where(k > 0, hits_minor, hits_major)
    gain = beta_lo**lo * beta_hi**hi
    return pos - rcv, gain


def fractional_delay_kernel(frac, taps=FD_TAPS) -> np.ndarray:
    """Blackman-windowed sinc taps for delays ``n0 + frac``, ``|frac| <= 0.5``.

    Returns an array of shape ``frac.shape + (taps,)``; tap ``j`` lands on
    sample ``n0 - taps // 2 + j``.
    """
    half = taps // 2
    width = half + 1
    m = np.arange(-half, half + 1, dtype=np.float64)
    f = np.asarray(frac, dtype=np.float64)[..., None]
    t = m - f
    # Angle-addition keeps the trig per delay rather than per tap:
    # sin(pi (m - f)) = -(-1)**m sin(pi f).
    alt = np.where(np.arange(-half, half + 1) % 2 == 0, -1.0, 1.0)
    num = np.sin(np.pi * f) * alt
    sinc = np.divide(num, np.pi * t, out=np.ones(np.broadcast_shapes(t.shape)), where=t != 0)
    a1, a2 = np.pi * m / width, 2 * np.pi * m / width
    b1, b2 = np.pi * f / width, 2 * np.pi * f / width
    win = (0.42 + 0.5 * (np.cos(a1) * np.cos(b1) + np.sin(a1) * np.sin(b1))
           + 0.08 * (np.cos(a2) * np.cos(b2) + np.sin(a2) * np.sin(b2)))
    return sinc * win


def image_count(max_order) -> int:
    return (2 * max_order + 1) ** 3


def simulate_rir(room: RoomSpec, max_images=MAX_IMAGES, cull_db=CULL_DB,
                 highpass_hz=HIGHPASS_HZ, chunk=2000) -> Rir:
    """Image-source RIR of a shoebox room.

    Each image adds a fractional-delay impulse at ``d / c`` with amplitude
    ``prod(sqrt(1 - alpha)) / (4 pi d)``. Images quieter than ``cull_db``
    below the direct path are dropped. The reflected part passes through a
    2nd-order high-pass at ``highpass_hz`` (0 disables it). The output spans
    at least twice the Sabine T60.
    """
    if not isinstance(room, RoomSpec):
        raise ConfigError("simulate_rir expects a RoomSpec")
    n_images = image_count(room.max_order)
    if n_images > max_images:
        raise ResourceError(
            f"max_order {room.max_order} gives {n_images} images, above the cap of {max_images}"
        )
    fs = room.sample_rate
    beta = np.sqrt(1.0 - np.asarray(room.absorption))
    axes = [
        _axis_images(room.dims[i], room.source[i], room.receiver[i], room.max_order,
                     beta[2 * i], beta[2 * i + 1])
        for i in range(3)
    ]
    (dx, gx), (dy, gy), (dz, gz) = axes
    dist = np.sqrt(dx[:, None, None] ** 2 + dy[None, :, None] ** 2 + dz[None, None, :] ** 2).ravel()
    refl = (gx[:, None, None] * gy[None, :, None] * gz[None, None, :]).ravel()
    amp = refl / (4 * np.pi * dist)
    delay = dist / room.speed_of_sound * fs

    direct = room.distance
    direct_amp = 1.0 / (4 * np.pi * direct)
    half = FD_TAPS // 2
    keep = amp > direct_amp * 10.0 ** (-cull_db / 20.0)
    amp, delay = amp[keep], delay[keep]

    # Twice the Sabine T60 (which also passes the -80 dB point); zero padded
    # when max_order runs out of images earlier.
    t60 = sabine_t60(room)
    n_direct = int(np.ceil(direct / room.speed_of_sound * fs)) + half + 1
    n_len = max(int(np.ceil(2.0 * t60 * fs)) if math.isfinite(t60) else 0, n_direct)

    keep = delay - half < n_len
    amp, delay = amp[keep], delay[keep]
    # The direct image is rendered on its own; the reflected field is
    # high-passed because same-sign frequency-flat reflections otherwise pile
    # up a coherent DC component that inflates late energy.
    is_direct = np.zeros(amp.shape[0], dtype=bool)
    is_direct[np.argmin(delay)] = True
    direct_part = _render(amp[is_direct], delay[is_direct], n_len)
    reflected = _render(amp[~is_direct], delay[~is_direct], n_len, chunk)
    if highpass_hz and np.any(reflected):
        reflected = sosfilt(butter(2, highpass_hz, "highpass", fs=fs, output="sos"), reflected)
    h = direct_part + reflected
    return Rir(AudioBuffer(h, fs), room, direct / room.speed_of_sound,
               {"images": int(amp.shape[0])})


def _render(amp, delay, n_len, chunk=2000):
    """Sum fractional-delay impulses into a length ``n_len`` signal."""
    h = np.zeros(n_len)
    half = FD_TAPS // 2
    offsets = np.arange(-half, half + 1)
    for start in range(0, amp.shape[0], chunk):
        d = delay[start : start + chunk]
        a = amp[start : start + chunk]
        n0 = np.rint(d).astype(np.int64)
        vals = a[:, None] * fractional_delay_kernel(d - n0)
        idx = n0[:, None] + offsets
        if n0.min() - half >= 0 and n0.max() + half < n_len:
            h += np.bincount(idx.ravel(), weights=vals.ravel(), minlength=n_len)
        else:
            ok = (idx >= 0) & (idx < n_len)
            h += np.bincount(idx[ok], weights=vals[ok], minlength=n_len)
    return h


def reciprocity_check(room: RoomSpec) -> tuple:
    """RIRs for the room and for the room with source and receiver swapped."""
    return simulate_rir(room), simulate_rir(room.swapped())


def synth_exponential_rir(t60, duration, sample_rate=SAMPLE_RATE, seed=0) -> Rir:
    """Gaussian noise under an exponential envelope decaying 60 dB in ``t60``."""
    if t60 <= 0:
        raise ConfigError("t60 must be positive")
    if duration < t60:
        raise ConfigError("duration must be at least t60")
    n = int(round(duration * sample_rate))
    g = np.random.default_rng(seed).standard_normal(n)
    env = np.exp(-_DECAY_60DB * np.arange(n) / (sample_rate * t60))
    return Rir(AudioBuffer(g * env, sample_rate), meta={"t60": float(t60), "seed": seed})


@dataclass(frozen=True)
class CorpusConfig:
    dims_low: tuple = (3.0, 3.0, 2.5)
    dims_high: tuple = (10.0, 8.0, 4.0)
    alpha_low: float = 0.1
    alpha_high: float = 0.6
    wall_margin: float = 0.5
    min_separation: float = 1.0
    max_order: int = MAX_ORDER
    speed_of_sound: float = SPEED_OF_SOUND
    sample_rate: int = SAMPLE_RATE


def sample_room(rng, config: CorpusConfig = CorpusConfig()) -> RoomSpec:
    dims = rng.uniform(config.dims_low, config.dims_high)
    alpha = rng.uniform(config.alpha_low, config.alpha_high)
    m = config.wall_margin
    while True:
        src = rng.uniform(m, dims - m)
        rcv = rng.uniform(m, dims - m)
        if np.linalg.norm(src - rcv) >= config.min_separation:
            break
    return RoomSpec(tuple(dims), float(alpha), tuple(src), tuple(rcv), config.max_order,
                    config.speed_of_sound, config.sample_rate)


def item_rngs(n_items, seed):
    """One independent generator per item, stable under reordering."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n_items)]


def sample_rooms(n_items, seed, config: CorpusConfig = CorpusConfig()) -> list:
    if n_items < 1:
        raise ConfigError("n_items must be >= 1")
    return [sample_room(rng, config) for rng in item_rngs(n_items, seed)]


def sample_corpus(n_items, seed, config: CorpusConfig = CorpusConfig()) -> list:
    """Deterministic list of ``(RoomSpec, Rir)`` pairs."""
    return [(room, simulate_rir(room)) for room in sample_rooms(n_items, seed, config)]
