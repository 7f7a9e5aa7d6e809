"""Seeded synthetic sequence generators with ground-truth factor labels.

`toy-sprites`: G x G three-plane images of a colored square whose color and
size are static factors and whose motion pattern is the dynamic factor.
`oscillators`: a speaker/content analog where a static class embedding is
mixed with a class-frequency rotation through a fixed random matrix.

Generation is pure given (config, seed); per-sample RNG substreams are
derived from the seed so results are independent of the SKD_THREADS setting.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

MOTIONS = ("horizontal", "vertical", "diagonal", "circular")


@dataclass
class SequenceBatch:
    """Observed sequences (b, t+1, m) with optional per-sample factor labels."""

    frames: np.ndarray
    labels: dict[str, np.ndarray] | None = None
    value_range: str = "unit"       # "unit" ([0,1]) or "unbounded"
    channels: int = 1               # declared frame plane count (3 for RGB grids)
    factor_roles: dict[str, str] = field(default_factory=dict)
    factor_arity: dict[str, int] = field(default_factory=dict)
    aux: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3:
            raise ConfigError(f"frames must be (b, t+1, m), got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise ConfigError("frames contain NaN or Inf")
        if self.value_range == "unit" and (self.frames.min() < 0 or self.frames.max() > 1):
            raise ConfigError("frames outside the declared [0, 1] range")
        if self.labels is not None:
            for name, lab in self.labels.items():
                self.labels[name] = np.asarray(lab, dtype=np.int64)
                arity = self.factor_arity.get(name)
                if arity is not None and self.labels[name].size \
                        and (self.labels[name].min() < 0 or self.labels[name].max() >= arity):
                    raise ConfigError(f"labels for {name!r} exceed arity {arity}")

    @property
    def b(self) -> int:
        return self.frames.shape[0]

    @property
    def m(self) -> int:
        return self.frames.shape[2]

    def subset(self, idx) -> "SequenceBatch":
        idx = np.asarray(idx)
        return SequenceBatch(
            frames=self.frames[idx],
            labels=None if self.labels is None else {k: v[idx] for k, v in self.labels.items()},
            value_range=self.value_range,
            channels=self.channels,
            factor_roles=dict(self.factor_roles),
            factor_arity=dict(self.factor_arity),
            aux={k: v[idx] for k, v in self.aux.items()},
        )


@dataclass
class GeneratorConfig:
    dataset: str = "toy-sprites"
    t: int = 7
    seed: int = 0
    noise: float = 0.01
    n_train: int = 900
    n_test: int = 300
    # toy-sprites
    grid: int = 12
    colors: int = 6
    sizes: int = 3
    motions: int = 4
    holdout_combos: bool = True
    # oscillators
    speakers: int = 8
    contents: int = 4
    obs_dim: int = 24
    static_dim: int = 4
    frequencies: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.n_train < 1 or self.n_test < 1:
            raise ConfigError("train/test counts must be >= 1")
        for name, arity in (("colors", self.colors), ("sizes", self.sizes),
                            ("motions", self.motions), ("speakers", self.speakers),
                            ("contents", self.contents)):
            if arity < 2:
                raise ConfigError(f"factor arity {name} must be >= 2")


def _n_threads() -> int:
    try:
        return max(1, int(os.environ.get("SKD_THREADS", "1")))
    except ValueError:
        return 1


# -- toy sprites ----------------------------------------------------------

# equal-luminance hexagon: every row sums to 1.5, so total lit mass depends
# only on sprite size and channel ratios depend only on color. This is what
# lets the model factor color and size into disjoint spectral subspaces.
_PALETTE = np.array([
    [0.9, 0.5, 0.1],
    [0.5, 0.9, 0.1],
    [0.1, 0.9, 0.5],
    [0.1, 0.5, 0.9],
    [0.5, 0.1, 0.9],
    [0.9, 0.1, 0.5],
])


def _sprite_sizes(cfg: GeneratorConfig) -> np.ndarray:
    base = np.arange(cfg.sizes) + 2   # pixels: 2, 3, 4, ...
    if base[-1] >= cfg.grid - 2:
        raise ConfigError(f"largest sprite size {base[-1]} does not fit grid {cfg.grid}")
    return base


def sprite_positions(motion: int, size_px: int, grid: int, t: int,
                     phase: float) -> np.ndarray:
    """Continuous square positions (t+1, 2) as (x, y) for one motion pattern.

    All patterns are harmonic with period t, so for even t the frame t/2
    position mirrors frame 0 about the center of travel.
    """
    c = (grid - size_px) / 2.0
    amp = c - 0.5
    ang = 2.0 * np.pi * np.arange(t + 1) / t + phase
    x = np.full(t + 1, c)
    y = np.full(t + 1, c)
    name = MOTIONS[motion]
    if name == "horizontal":
        x = c + amp * np.cos(ang)
    elif name == "vertical":
        y = c + amp * np.cos(ang)
    elif name == "diagonal":
        x = c + amp * np.cos(ang)
        y = c + amp * np.cos(ang)
    else:   # circular
        x = c + amp * np.cos(ang)
        y = c + amp * np.sin(ang)
    return np.stack([x, y], axis=1)


def render_sprite(color: int, size: int, motion: int, phase: float,
                  cfg: GeneratorConfig) -> np.ndarray:
    """Noise-free rendering of one sequence, (t+1, 3*G*G); pure in its arguments."""
    g = cfg.grid
    size_px = int(_sprite_sizes(cfg)[size])
    pos = sprite_positions(motion, size_px, g, cfg.t, phase)
    rgb = _PALETTE[color % len(_PALETTE)]
    frames = np.zeros((cfg.t + 1, 3, g, g))
    for j in range(cfg.t + 1):
        xi = int(np.clip(round(pos[j, 0]), 0, g - size_px))
        yi = int(np.clip(round(pos[j, 1]), 0, g - size_px))
        for ch in range(3):
            frames[j, ch, yi:yi + size_px, xi:xi + size_px] = rgb[ch]
    return frames.reshape(cfg.t + 1, 3 * g * g)


def _holdout_combo_set(cfg: GeneratorConfig) -> set[tuple[int, int, int]]:
    # balanced held-out combos: (i mod colors, i mod sizes, i mod motions) for
    # i < lcm are distinct and hit every factor level equally often, so uniform
    # sampling over the remaining combos keeps marginals exactly uniform
    n_hold = int(np.lcm.reduce([cfg.colors, cfg.sizes, cfg.motions]))
    n_combos = cfg.colors * cfg.sizes * cfg.motions
    if n_hold >= n_combos:
        raise ConfigError("factor arities leave no combinations to hold out")
    return {(i % cfg.colors, i % cfg.sizes, i % cfg.motions) for i in range(n_hold)}


def _gen_sprite_half(cfg: GeneratorConfig, n: int, combos: list[tuple[int, int, int]],
                     stream_offset: int) -> SequenceBatch:
    combos_arr = np.array(combos)
    color = np.empty(n, dtype=np.int64)
    size = np.empty(n, dtype=np.int64)
    motion = np.empty(n, dtype=np.int64)
    phase = np.empty(n)
    frames = np.empty((n, cfg.t + 1, 3 * cfg.grid * cfg.grid))

    def make(i: int) -> None:
        rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, stream_offset + i)))
        c, s, mo = combos_arr[rng.integers(len(combos_arr))]
        ph = rng.uniform(0.0, 2.0 * np.pi)
        seq = render_sprite(int(c), int(s), int(mo), float(ph), cfg)
        if cfg.noise > 0:
            seq = np.clip(seq + cfg.noise * rng.standard_normal(seq.shape), 0.0, 1.0)
        color[i], size[i], motion[i], phase[i] = c, s, mo, ph
        frames[i] = seq

    threads = _n_threads()
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(make, range(n)))
    else:
        for i in range(n):
            make(i)

    return SequenceBatch(
        frames=frames,
        labels={"color": color, "size": size, "motion": motion},
        value_range="unit",
        channels=3,
        factor_roles={"color": "static", "size": "static", "motion": "dynamic"},
        factor_arity={"color": cfg.colors, "size": cfg.sizes, "motion": cfg.motions},
        aux={"phase": phase},
    )


def gen_toy_sprites(cfg: GeneratorConfig) -> tuple[SequenceBatch, SequenceBatch]:
    """Generate train/test sprite batches with held-out factor combinations."""
    if cfg.grid < 8:
        raise ConfigError("grid must be >= 8")
    if cfg.t < 4:
        raise ConfigError("t must be >= 4")
    _sprite_sizes(cfg)   # validates fit
    all_combos = [(c, s, mo) for c in range(cfg.colors)
                  for s in range(cfg.sizes) for mo in range(cfg.motions)]
    if cfg.holdout_combos:
        held = _holdout_combo_set(cfg)
        train_combos = [c for c in all_combos if c not in held]
        test_combos = [c for c in all_combos if c in held]
    else:
        train_combos = test_combos = all_combos
    train = _gen_sprite_half(cfg, cfg.n_train, train_combos, stream_offset=0)
    test = _gen_sprite_half(cfg, cfg.n_test, test_combos, stream_offset=cfg.n_train)
    return train, test


# -- oscillators ----------------------------------------------------------

def _osc_frequencies(cfg: GeneratorConfig) -> np.ndarray:
    if cfg.frequencies is not None:
        if len(cfg.frequencies) != cfg.contents:
            raise ConfigError("frequencies must match the content arity")
        return np.asarray(cfg.frequencies, dtype=np.float64)
    return 0.4 + 0.5 * np.arange(cfg.contents)


def gen_oscillators(cfg: GeneratorConfig) -> tuple[SequenceBatch, SequenceBatch]:
    """Speaker/content sequences: x_j = tanh(W [s; d_j]) + noise."""
    if cfg.t < 8:
        raise ConfigError("t must be >= 8")
    root = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0xA5C1)))
    centroids = 1.5 * root.standard_normal((cfg.speakers, cfg.static_dim))
    mixing = root.standard_normal((cfg.static_dim + 2, cfg.obs_dim)) / np.sqrt(cfg.static_dim + 2)
    freqs = _osc_frequencies(cfg)

    def half(n: int, offset: int) -> SequenceBatch:
        speaker = np.empty(n, dtype=np.int64)
        content = np.empty(n, dtype=np.int64)
        frames = np.empty((n, cfg.t + 1, cfg.obs_dim))

        def make(i: int) -> None:
            rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 1_000_000 + offset + i)))
            sp = int(rng.integers(cfg.speakers))
            co = int(rng.integers(cfg.contents))
            s = centroids[sp] + 0.1 * rng.standard_normal(cfg.static_dim)
            ph = rng.uniform(0.0, 2.0 * np.pi)
            ang = freqs[co] * np.arange(cfg.t + 1) + ph
            d = np.stack([np.cos(ang), np.sin(ang)], axis=1)
            latent = np.concatenate([np.tile(s, (cfg.t + 1, 1)), d], axis=1)
            x = np.tanh(latent @ mixing)
            if cfg.noise > 0:
                x = x + cfg.noise * rng.standard_normal(x.shape)
            speaker[i], content[i] = sp, co
            frames[i] = x

        threads = _n_threads()
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                list(pool.map(make, range(n)))
        else:
            for i in range(n):
                make(i)

        return SequenceBatch(
            frames=frames,
            labels={"speaker": speaker, "content": content},
            value_range="unbounded",
            factor_roles={"speaker": "static", "content": "dynamic"},
            factor_arity={"speaker": cfg.speakers, "content": cfg.contents},
        )

    return half(cfg.n_train, 0), half(cfg.n_test, cfg.n_train)


def generate(cfg: GeneratorConfig) -> tuple[SequenceBatch, SequenceBatch]:
    if cfg.dataset == "toy-sprites":
        return gen_toy_sprites(cfg)
    if cfg.dataset == "oscillators":
        return gen_oscillators(cfg)
    raise ConfigError(f"unknown dataset {cfg.dataset!r}")


def split_train_test(batch: SequenceBatch, fraction: float,
                     seed: int) -> tuple[SequenceBatch, SequenceBatch]:
    """Disjoint seeded split, stratified on the joint factor labels."""
    if not 0.0 < fraction < 1.0:
        raise ConfigError("fraction must be in (0, 1)")
    n = batch.b
    rng = np.random.default_rng(seed)
    if batch.labels:
        keys = np.stack([batch.labels[name] for name in sorted(batch.labels)], axis=1)
        joint = np.array([hash(tuple(row)) for row in keys])
    else:
        joint = np.zeros(n, dtype=np.int64)
    train_idx: list[int] = []
    test_idx: list[int] = []
    for val in np.unique(joint):
        members = np.where(joint == val)[0]
        members = members[rng.permutation(len(members))]
        n_tr = int(round(fraction * len(members)))
        train_idx.extend(members[:n_tr].tolist())
        test_idx.extend(members[n_tr:].tolist())
    # rebalance to hit the exact global fraction
    want_train = int(round(fraction * n))
    train_idx, test_idx = sorted(train_idx), sorted(test_idx)
    while len(train_idx) > want_train and len(test_idx) < n:
        test_idx.append(train_idx.pop())
    while len(train_idx) < want_train and test_idx:
        train_idx.append(test_idx.pop())
    if not train_idx or not test_idx:
        raise ConfigError("split produced an empty side")
    return batch.subset(np.array(sorted(train_idx))), batch.subset(np.array(sorted(test_idx)))
