"""Sequence datasets: windowing, split assignment, normalization and end-to-end builders."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .plant import PlantModel, QuadrupleTank, load_config, simulate_plant
from .signals import MprsConfig, add_output_noise, mprs_generate

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


@dataclass
class SequenceRecord:
    u: np.ndarray
    y: np.ndarray
    split: str
    id: str
    start: int = 0
    # source blocks covered by the window (empty for standalone sequences)
    blocks: tuple[int, ...] = ()

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.y.ndim == 1:
            self.y = self.y[:, None]
        if self.u.ndim == 1:
            self.u = self.u[:, None]
        if self.u.shape[0] != self.y.shape[0]:
            raise ValueError(f"sequence {self.id}: u has {self.u.shape[0]} steps, y has {self.y.shape[0]}")
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")

    def __len__(self):
        return self.u.shape[0]


@dataclass(frozen=True)
class Normalization:
    """Per-channel affine maps of ``[min, max]`` onto ``[-1, 1]``."""

    u_min: np.ndarray
    u_max: np.ndarray
    y_min: np.ndarray
    y_max: np.ndarray

    def __post_init__(self):
        for name in ("u_min", "u_max", "y_min", "y_max"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64).ravel())
        if np.any(self.u_max <= self.u_min) or np.any(self.y_max <= self.y_min):
            raise ValueError("constant channel: normalization needs min < max on every channel")

    @classmethod
    def from_sequences(cls, seqs) -> "Normalization":
        u = np.concatenate([s.u for s in seqs])
        y = np.concatenate([s.y for s in seqs])
        return cls(u.min(axis=0), u.max(axis=0), y.min(axis=0), y.max(axis=0))

    @staticmethod
    def _fwd(x, lo, hi):
        return 2.0 * (x - lo) / (hi - lo) - 1.0

    @staticmethod
    def _inv(x, lo, hi):
        return lo + (np.asarray(x, dtype=np.float64) + 1.0) * (hi - lo) / 2.0

    def normalize_u(self, u):
        return self._fwd(u, self.u_min, self.u_max)

    def normalize_y(self, y):
        return self._fwd(y, self.y_min, self.y_max)

    def denormalize_u(self, u):
        return self._inv(u, self.u_min, self.u_max)

    def denormalize_y(self, y):
        return self._inv(y, self.y_min, self.y_max)


@dataclass
class SequenceDataset:
    sequences: list[SequenceRecord]
    sampling_time: float
    input_names: tuple[str, ...]
    output_names: tuple[str, ...]
    input_units: tuple[str, ...] = ()
    output_units: tuple[str, ...] = ()
    normalization: Normalization | None = None
    meta: dict = field(default_factory=dict)

    def split(self, name: str) -> list[SequenceRecord]:
        return [s for s in self.sequences if s.split == name]

    @property
    def n_u(self) -> int:
        return len(self.input_names)

    @property
    def n_y(self) -> int:
        return len(self.output_names)


def normalize(dataset: SequenceDataset) -> SequenceDataset:
    """Scale every split with extrema taken from the training split only."""
    if dataset.normalization is not None:
        raise ValueError("dataset is already normalized")
    train = dataset.split("train")
    if not train:
        raise ValueError("normalization needs a non-empty training split")
    norm = Normalization.from_sequences(train)
    seqs = []
    for s in dataset.sequences:
        u, y = norm.normalize_u(s.u), norm.normalize_y(s.y)
        if s.split != "train" and (np.max(np.abs(u), initial=0) > 1.0 or np.max(np.abs(y), initial=0) > 1.0):
            log.info("sequence %s (%s) exceeds the training range: max |u| %.4f, max |y| %.4f",
                     s.id, s.split, np.max(np.abs(u)), np.max(np.abs(y)))
        seqs.append(replace(s, u=u, y=y))
    return replace(dataset, sequences=seqs, normalization=norm)


def denormalize(dataset: SequenceDataset, channel: str, values) -> np.ndarray:
    """Map normalized ``values`` of the named channel back to physical units."""
    norm = dataset.normalization
    if norm is None:
        raise ValueError("dataset is not normalized")
    if channel in dataset.input_names:
        j = dataset.input_names.index(channel)
        return Normalization._inv(values, norm.u_min[j], norm.u_max[j])
    if channel in dataset.output_names:
        j = dataset.output_names.index(channel)
        return Normalization._inv(values, norm.y_min[j], norm.y_max[j])
    raise KeyError(f"unknown channel {channel!r}")


def assign_blocks(block_count: int, train_fraction: float, seed: int) -> list[str]:
    if block_count < 2:
        raise ValueError("need at least two blocks")
    n_train = int(round(train_fraction * block_count))
    if not 0 < n_train < block_count:
        raise ValueError(f"train_fraction {train_fraction} leaves an empty split with {block_count} blocks")
    perm = np.random.default_rng(seed).permutation(block_count)
    labels = ["val"] * block_count
    for b in perm[:n_train]:
        labels[int(b)] = "train"
    return labels


def window_starts(length: int, window: int, stride: int) -> list[int]:
    return list(range(0, length - window + 1, stride)) if length >= window else []


def window_and_split(u, y, block_count: int, train_fraction: float, window: int,
                     overlap_fraction: float, seed: int, *, merge_adjacent: bool = True,
                     assignment: list[str] | None = None) -> list[SequenceRecord]:
    """Cut a long trajectory into blocks, assign them to train/val and window them.

    With ``merge_adjacent`` (the default) consecutive blocks of the same split
    are joined before windowing, so windows may straddle block boundaries but
    never split boundaries.  ``assignment`` overrides the random draw.
    """
    u = np.asarray(u, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    N = u.shape[0]
    if y.shape[0] != N:
        raise ValueError("u and y must have the same length")
    if not 0.0 <= overlap_fraction < 1.0:
        raise ValueError("overlap_fraction must be in [0, 1)")
    stride = window * (1.0 - overlap_fraction)
    if window < 1 or stride < 1 or abs(stride - round(stride)) > 1e-9:
        raise ValueError(f"window {window} with overlap {overlap_fraction} gives a non-integer or empty stride")
    stride = int(round(stride))
    edges = np.linspace(0, N, block_count + 1).round().astype(int)
    if window > int(np.min(np.diff(edges))):
        raise ValueError(f"window {window} is longer than a block ({int(np.min(np.diff(edges)))} steps)")
    labels = assignment if assignment is not None else assign_blocks(block_count, train_fraction, seed)
    if len(labels) != block_count or any(lab not in ("train", "val") for lab in labels):
        raise ValueError("assignment must label every block 'train' or 'val'")
    runs: list[tuple[str, list[int]]] = []
    for b, lab in enumerate(labels):
        if merge_adjacent and runs and runs[-1][0] == lab:
            runs[-1][1].append(b)
        else:
            runs.append((lab, [b]))
    out = []
    counts = {"train": 0, "val": 0}
    for lab, blocks in runs:
        lo, hi = int(edges[blocks[0]]), int(edges[blocks[-1] + 1])
        for s in window_starts(hi - lo, window, stride):
            a = lo + s
            covered = tuple(b for b in blocks if edges[b] < a + window and edges[b + 1] > a)
            out.append(SequenceRecord(u[a:a + window], y[a:a + window], lab, f"{lab}-{counts[lab]:03d}", a, covered))
            counts[lab] += 1
    if not any(o.split == "train" for o in out) or not any(o.split == "val" for o in out):
        raise ValueError("windowing produced an empty split")
    return out


@dataclass(frozen=True)
class PipelineConfig:
    n_steps: int = 25000
    test_steps: int = 5000
    sampling_time: float = 15.0
    substeps: int = 8
    block_count: int = 10
    train_fraction: float = 0.8
    window: int = 500
    overlap: float = 0.5
    snr: float = 100.0
    noisy_test: bool = False
    num_levels: int = 9
    hold_min: int = 20
    hold_max: int = 100


def _sub_seeds(seed: int, names: tuple[str, ...]) -> dict[str, int]:
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: int(c.generate_state(1)[0]) for n, c in zip(names, children)}


def build_generic_dataset(plant: PlantModel, level_range, cfg: PipelineConfig, seed: int,
                          x0=None, input_names=None, output_names=None,
                          input_units=(), output_units=()) -> SequenceDataset:
    """MPRS excitation, plant simulation, output noise, windowing/splits, normalization."""
    seeds = _sub_seeds(seed, ("excite", "excite_test", "noise", "noise_test", "split"))
    mprs = MprsConfig(cfg.num_levels, tuple(level_range), cfg.hold_min, cfg.hold_max, seeds["excite"])
    if x0 is None:
        mid = [0.5 * (lo + hi) for lo, hi in mprs.level_range]
        x0 = plant.steady_state(mid) if hasattr(plant, "steady_state") else np.zeros(plant.n_x)
    u = mprs_generate(mprs, cfg.n_steps)
    y = add_output_noise(simulate_plant(plant, x0, u, cfg.sampling_time, cfg.substeps), cfg.snr, seeds["noise"])
    seqs = window_and_split(u, y, cfg.block_count, cfg.train_fraction, cfg.window, cfg.overlap, seeds["split"])
    mprs_test = replace(mprs, seed=seeds["excite_test"])
    u_t = mprs_generate(mprs_test, cfg.test_steps)
    y_t = simulate_plant(plant, x0, u_t, cfg.sampling_time, cfg.substeps)
    if cfg.noisy_test:
        y_t = add_output_noise(y_t, cfg.snr, seeds["noise_test"])
    seqs.append(SequenceRecord(u_t, y_t, "test", "test-000"))
    ds = SequenceDataset(
        seqs, cfg.sampling_time,
        tuple(input_names or (f"u{j + 1}" for j in range(plant.n_u))),
        tuple(output_names or (f"y{j + 1}" for j in range(plant.n_y))),
        tuple(input_units), tuple(output_units),
        meta={"seed": seed, "sub_seeds": seeds, "pipeline": cfg.__dict__.copy(),
              "level_range": [list(r) for r in mprs.level_range],
              "x0": [float(v) for v in x0]},
    )
    return normalize(ds)


def build_fourtank_dataset(seed: int, config_path: str | Path | None = None,
                           **overrides) -> SequenceDataset:
    """Quadruple-tank benchmark dataset: 25000-step training trajectory, 5000-step test trajectory."""
    cfg_file = load_config(config_path)
    plant = QuadrupleTank.from_config(config_path)
    ex = cfg_file["excitation"]
    sim = cfg_file["simulation"]
    cfg = PipelineConfig(
        sampling_time=float(sim.get("sampling_time", 15.0)), substeps=int(sim.get("substeps", 8)),
        num_levels=int(ex.get("num_levels", 9)),
        hold_min=int(ex.get("hold_min", 20)), hold_max=int(ex.get("hold_max", 100)),
    )
    cfg = replace(cfg, **overrides)
    rng = (float(ex["v_min"]), float(ex["v_max"]))
    ds = build_generic_dataset(plant, (rng, rng), cfg, seed,
                               input_names=("v1", "v2"), output_names=(f"h{plant.output_tank}",),
                               input_units=("V", "V"), output_units=("cm",))
    ds.meta["preset"] = "fourtank"
    ds.meta["plant"] = plant.params()
    return ds


def dataset_from_sequences(seqs: list[SequenceRecord], sampling_time: float,
                           input_names=None, output_names=None) -> SequenceDataset:
    """Wrap externally supplied (e.g. measured) sequences and normalize them."""
    if not seqs:
        raise ValueError("no sequences given")
    n_u, n_y = seqs[0].u.shape[1], seqs[0].y.shape[1]
    ds = SequenceDataset(list(seqs), sampling_time,
                         tuple(input_names or (f"u{j + 1}" for j in range(n_u))),
                         tuple(output_names or (f"y{j + 1}" for j in range(n_y))),
                         meta={"preset": "imported"})
    return normalize(ds)
