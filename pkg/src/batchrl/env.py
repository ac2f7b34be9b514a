"""Industrial-style benchmark environment with replayable stochasticity.

The observable interface (three bounded steerings, an external set point,
consumption, fatigue and the reward ``-c - 3f``) follows the benchmark this
package targets. The hidden dynamics are a small closed-form surrogate:

* target velocity ``v*(p) = 0.11 p + 27``, target gain ``g* = 40`` and a
  target shift ``h*(phi) = 70 + 20 sin(phi)`` whose phase advances by
  ``2 pi / 24`` per step and is never observed;
* consumption ``c = 0.01 p [1 + kv (v - v*)^2 + kg (g - g*)^2 + kh (h - h*)^2]``
  plus gain-dependent Gaussian noise (heteroscedastic);
* fatigue driven by a leaky latent accumulator of high velocity and high
  gain, observed through a multiplicative random spike (delayed effects).

Randomness is counter based: the draws used at step ``k`` are a pure
function of ``(rng_key, k)`` (Philox4x64-10), so the future noise sequence
is independent of the actions taken. A :class:`SeedSnapshot` therefore
freezes the future exactly, which the max-reward oracle relies on.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace

import numpy as np

STEER_SCALE = np.array([1.0, 10.0, 5.75])
STEER_MIN = 0.0
STEER_MAX = 100.0
PHASE_STEP = 2.0 * math.pi / 24.0
TWO_PI = 2.0 * math.pi

K_V = 0.005
K_G = 0.005
K_H = 0.002
GAIN_TARGET = 40.0
SHIFT_CENTER = 70.0
SHIFT_AMPLITUDE = 20.0
FATIGUE_DECAY = 0.9
FATIGUE_GAIN = 0.1
FATIGUE_THRESHOLD = 60.0

INITIAL_STEERINGS = (50.0, 50.0, 50.0)

# observation column order used by every array-level API in the package
OBS_FIELDS = ("v", "g", "h", "p", "c", "f")
V, G, H, P, C, F = range(6)


@dataclass(frozen=True)
class Steerings:
    v: float
    g: float
    h: float

    def __post_init__(self):
        for name in ("v", "g", "h"):
            x = getattr(self, name)
            if not (STEER_MIN <= x <= STEER_MAX):
                raise ValueError(f"steering {name}={x} outside [0, 100]")

    def as_array(self) -> np.ndarray:
        return np.array([self.v, self.g, self.h], dtype=float)


@dataclass(frozen=True)
class ActionDelta:
    dv: float
    dg: float
    dh: float

    def __post_init__(self):
        for name in ("dv", "dg", "dh"):
            x = getattr(self, name)
            if not (-1.0 <= x <= 1.0):
                raise ValueError(f"action component {name}={x} outside [-1, 1]")

    @classmethod
    def coerce(cls, a) -> "ActionDelta":
        if isinstance(a, ActionDelta):
            return a
        dv, dg, dh = (float(x) for x in np.asarray(a, dtype=float).reshape(3))
        return cls(dv, dg, dh)

    def as_array(self) -> np.ndarray:
        return np.array([self.dv, self.dg, self.dh], dtype=float)


@dataclass(frozen=True)
class Observation:
    v: float
    g: float
    h: float
    p: float
    c: float
    f: float

    def __post_init__(self):
        Steerings(self.v, self.g, self.h)
        if not (0.0 <= self.p <= 100.0):
            raise ValueError(f"set point {self.p} outside [0, 100]")
        if self.c < 0 or self.f < 0:
            raise ValueError("consumption and fatigue must be nonnegative")

    def as_array(self) -> np.ndarray:
        return np.array([self.v, self.g, self.h, self.p, self.c, self.f], dtype=float)

    @classmethod
    def from_array(cls, x) -> "Observation":
        return cls(*(float(t) for t in np.asarray(x, dtype=float).reshape(6)))


@dataclass(frozen=True)
class EnvState:
    """Full hidden state of the surrogate, including the generator position."""

    steerings: Steerings
    set_point: float
    phase: float
    fatigue_latent: float
    consumption: float
    fatigue: float
    rng_key: tuple[int, int]
    rng_counter: int
    time: int
    noise: float = 1.0

    def observation(self) -> Observation:
        s = self.steerings
        return Observation(s.v, s.g, s.h, self.set_point, self.consumption, self.fatigue)


def apply_action(s: Steerings, a: ActionDelta) -> Steerings:
    return Steerings(
        max(0.0, min(100.0, s.v + 1.0 * a.dv)),
        max(0.0, min(100.0, s.g + 10.0 * a.dg)),
        max(0.0, min(100.0, s.h + 5.75 * a.dh)),
    )


def apply_action_array(steer: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Vectorized steering update over the last axis (v, g, h)."""
    return np.clip(steer + STEER_SCALE * a, STEER_MIN, STEER_MAX)


def compute_reward(c, f):
    return -c - 3.0 * f


def velocity_target(p):
    return 0.11 * p + 27.0


def shift_target(phase):
    return SHIFT_CENTER + SHIFT_AMPLITUDE * np.sin(phase)


def consumption_mean(v, g, h, phase, p):
    """Noise-free consumption for steerings ``(v, g, h)`` at the given phase."""
    dv = v - velocity_target(p)
    dg = g - GAIN_TARGET
    dh = h - shift_target(phase)
    return 0.01 * p * (1.0 + K_V * dv * dv + K_G * dg * dg + K_H * dh * dh)


def fatigue_drive(v, g):
    return np.maximum(0.0, v - FATIGUE_THRESHOLD) * np.maximum(0.0, g - FATIGUE_THRESHOLD) / 1600.0


def _to_unit(x: np.ndarray) -> np.ndarray:
    # 53 high bits, shifted by half an ulp so the result is in the open interval (0, 1)
    return ((x >> np.uint64(11)).astype(float) + 0.5) * 2.0**-53


def draw_noise(rng_key: tuple[int, int], counter: int) -> tuple[float, float]:
    """Return ``(eps, u)`` for one step: a standard normal and a uniform in (0, 1).

    Philox4x64-10 keyed by ``rng_key`` with counter ``(counter, 0, 0, 0)``;
    the first two words feed a Box-Muller transform, the third is ``u``.
    """
    key = int(rng_key[0]) | (int(rng_key[1]) << 64)
    raw = np.random.Philox(key=key, counter=[counter, 0, 0, 0]).random_raw(3)
    u1, u2, u3 = _to_unit(raw)
    eps = math.sqrt(-2.0 * math.log(u1)) * math.cos(TWO_PI * u2)
    return eps, float(u3)


def _key_from_seed(seed: int) -> tuple[int, int]:
    words = np.random.SeedSequence(seed).generate_state(2, np.uint64)
    return int(words[0]), int(words[1])


def reset(p: float, seed: int, noise: float = 1.0) -> EnvState:
    """Initial state for set point ``p``: steerings (50, 50, 50), phase 0, no latent fatigue."""
    if not (0.0 <= p <= 100.0):
        raise ValueError(f"set point {p} outside [0, 100]")
    if noise < 0:
        raise ValueError("noise amplitude must be nonnegative")
    steer = Steerings(*INITIAL_STEERINGS)
    c0 = float(consumption_mean(steer.v, steer.g, steer.h, 0.0, float(p)))
    return EnvState(
        steerings=steer,
        set_point=float(p),
        phase=0.0,
        fatigue_latent=0.0,
        consumption=c0,
        fatigue=0.0,
        rng_key=_key_from_seed(int(seed)),
        rng_counter=0,
        time=0,
        noise=float(noise),
    )


def step(state: EnvState, a) -> tuple[EnvState, Observation, float]:
    a = ActionDelta.coerce(a)
    steer = apply_action(state.steerings, a)
    phase = (state.phase + PHASE_STEP) % TWO_PI
    p = state.set_point
    eps, u = draw_noise(state.rng_key, state.rng_counter)

    sigma = 0.05 * (p / 100.0) * (1.0 + steer.g / 100.0)
    c = float(consumption_mean(steer.v, steer.g, steer.h, phase, p)) + state.noise * sigma * eps
    # clipping keeps the observation invariant c >= 0 under extreme noise draws
    c = max(0.0, c)
    latent = FATIGUE_DECAY * state.fatigue_latent + FATIGUE_GAIN * float(fatigue_drive(steer.v, steer.g))
    f = latent * (1.0 + 0.5 * state.noise * u)

    new = EnvState(
        steerings=steer,
        set_point=p,
        phase=phase,
        fatigue_latent=latent,
        consumption=c,
        fatigue=f,
        rng_key=state.rng_key,
        rng_counter=state.rng_counter + 1,
        time=state.time + 1,
        noise=state.noise,
    )
    return new, new.observation(), compute_reward(c, f)


def future_noise(state: EnvState, T: int) -> tuple[np.ndarray, np.ndarray]:
    """The ``(eps, u)`` draws of the next ``T`` steps, fixed by the generator position."""
    draws = np.array([draw_noise(state.rng_key, state.rng_counter + k) for k in range(T)]).reshape(T, 2)
    return draws[:, 0].copy(), draws[:, 1].copy()


def rollout_rewards(state: EnvState, actions: np.ndarray, noise=None) -> np.ndarray:
    """Rewards of many open-loop action sequences from one state.

    ``actions`` has shape ``(n, T, 3)``; the result has shape ``(n, T)``.
    All sequences see the same noise, the one :func:`step` would draw;
    ``noise`` may pass a precomputed :func:`future_noise` of at least ``T`` steps.
    """
    actions = np.asarray(actions, dtype=float)
    n, T, _ = actions.shape
    eps, u = future_noise(state, T) if noise is None else noise
    if len(eps) < T:
        raise ValueError("precomputed noise is shorter than the action sequences")
    p = state.set_point
    steer = np.broadcast_to(state.steerings.as_array(), (n, 3)).copy()
    latent = np.full(n, state.fatigue_latent)
    phase = state.phase
    out = np.empty((n, T))
    for k in range(T):
        phase = (phase + PHASE_STEP) % TWO_PI
        steer = apply_action_array(steer, actions[:, k])
        v, g, h = steer[:, 0], steer[:, 1], steer[:, 2]
        sigma = 0.05 * (p / 100.0) * (1.0 + g / 100.0)
        c = np.maximum(0.0, consumption_mean(v, g, h, phase, p) + state.noise * sigma * eps[k])
        latent = FATIGUE_DECAY * latent + FATIGUE_GAIN * fatigue_drive(v, g)
        f = latent * (1.0 + 0.5 * state.noise * u[k])
        out[:, k] = compute_reward(c, f)
    return out


# -- snapshots ---------------------------------------------------------------

SNAPSHOT_MAGIC = b"IBSS"
SNAPSHOT_VERSION = 1
# magic, version, key lo, key hi, counter, time, then v g h p phase latent c f noise
_SNAPSHOT_FORMAT = "<4sH4Q9d"


@dataclass(frozen=True)
class SeedSnapshot:
    """Frozen copy of an :class:`EnvState`, generator position included.

    Byte layout (little endian, 110 bytes)::

        0   4s   magic b"IBSS"
        4   u16  version (1)
        6   u64  rng key, low word
        14  u64  rng key, high word
        22  u64  rng counter
        30  u64  time step
        38  9xf64  v, g, h, set point, phase, fatigue latent, c, f, noise
    """

    state: EnvState

    def to_bytes(self) -> bytes:
        s = self.state
        return struct.pack(
            _SNAPSHOT_FORMAT,
            SNAPSHOT_MAGIC,
            SNAPSHOT_VERSION,
            s.rng_key[0],
            s.rng_key[1],
            s.rng_counter,
            s.time,
            s.steerings.v,
            s.steerings.g,
            s.steerings.h,
            s.set_point,
            s.phase,
            s.fatigue_latent,
            s.consumption,
            s.fatigue,
            s.noise,
        )

    @classmethod
    def from_bytes(cls, blob: bytes) -> "SeedSnapshot":
        if len(blob) != struct.calcsize(_SNAPSHOT_FORMAT):
            raise ValueError(f"snapshot has {len(blob)} bytes, expected {struct.calcsize(_SNAPSHOT_FORMAT)}")
        magic, version, k0, k1, counter, time, v, g, h, p, phase, latent, c, f, noise = struct.unpack(
            _SNAPSHOT_FORMAT, blob
        )
        if magic != SNAPSHOT_MAGIC:
            raise ValueError("not an environment snapshot")
        if version != SNAPSHOT_VERSION:
            raise ValueError(f"unsupported snapshot version {version}")
        values = (v, g, h, p, phase, latent, c, f, noise)
        if not all(math.isfinite(x) for x in values):
            raise ValueError("snapshot contains non-finite values")
        if not (0.0 <= phase < TWO_PI) or latent < 0 or c < 0 or f < 0 or noise < 0:
            raise ValueError("snapshot fields out of range")
        try:
            steer = Steerings(v, g, h)
        except ValueError as exc:
            raise ValueError(f"malformed snapshot: {exc}") from None
        if not (0.0 <= p <= 100.0):
            raise ValueError("malformed snapshot: set point out of range")
        state = EnvState(steer, p, phase, latent, c, f, (k0, k1), counter, time, noise)
        return cls(state)

    def to_hex(self) -> str:
        return self.to_bytes().hex()

    @classmethod
    def from_hex(cls, text: str) -> "SeedSnapshot":
        try:
            blob = bytes.fromhex(text.strip())
        except ValueError:
            raise ValueError("snapshot hex text is malformed") from None
        return cls.from_bytes(blob)


def snapshot(state: EnvState) -> SeedSnapshot:
    return SeedSnapshot(replace(state))


def restore(snap: SeedSnapshot | bytes | str) -> EnvState:
    """State whose continuation is bit-identical to the snapshotted one."""
    if isinstance(snap, bytes):
        snap = SeedSnapshot.from_bytes(snap)
    elif isinstance(snap, str):
        snap = SeedSnapshot.from_hex(snap)
    elif not isinstance(snap, SeedSnapshot):
        raise TypeError(f"cannot restore from {type(snap).__name__}")
    # round-trip through the codec so in-memory and serialized restores agree exactly
    return SeedSnapshot.from_bytes(snap.to_bytes()).state


class IndustrialEnv:
    """Small stateful wrapper around the functional API, one RNG stream per instance."""

    def __init__(self, set_point: float, seed: int, noise: float = 1.0):
        self.state = reset(set_point, seed, noise)

    def observe(self) -> Observation:
        return self.state.observation()

    def step(self, a) -> tuple[Observation, float]:
        self.state, obs, r = step(self.state, a)
        return obs, r

    def snapshot(self) -> SeedSnapshot:
        return snapshot(self.state)

    def restore(self, snap) -> None:
        self.state = restore(snap)
