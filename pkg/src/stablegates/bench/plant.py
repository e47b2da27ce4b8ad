"""Continuous-time plants and their fixed-step Runge-Kutta simulation."""
from __future__ import annotations

import configparser
import math
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path
from typing import Protocol

import numpy as np


class PlantModel(Protocol):
    n_x: int
    n_u: int
    n_y: int

    def derivative(self, x: np.ndarray, u: np.ndarray) -> np.ndarray: ...

    def output(self, x: np.ndarray) -> np.ndarray: ...

    def clamp(self, x: np.ndarray) -> np.ndarray: ...


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class QuadrupleTank:
    """Four coupled tanks with Torricelli outflow, fed by two pumps through flow-split valves.

    Pump 1 feeds tank 1 (fraction ``gamma1``) and tank 4; pump 2 feeds tank 2
    (fraction ``gamma2``) and tank 3.  Tank 3 drains into tank 1, tank 4 into
    tank 2.  The measured output is the level of ``output_tank``.
    """

    A1: float = 28.0
    A2: float = 32.0
    A3: float = 28.0
    A4: float = 32.0
    a1: float = 0.071
    a2: float = 0.057
    a3: float = 0.071
    a4: float = 0.057
    k1: float = 3.33
    k2: float = 3.35
    gamma1: float = 0.70
    gamma2: float = 0.60
    g: float = 981.0
    h_max: float = 20.0
    output_tank: int = 1

    n_x = 4
    n_u = 2
    n_y = 1

    def __post_init__(self):
        if not (0.0 <= self.gamma1 <= 1.0 and 0.0 <= self.gamma2 <= 1.0):
            raise ValueError("flow-split ratios must lie in [0, 1]")
        if self.output_tank not in (1, 2, 3, 4):
            raise ValueError("output_tank must be one of 1..4")
        if min(self.A1, self.A2, self.A3, self.A4, self.a1, self.a2, self.a3, self.a4, self.g) <= 0:
            raise ValueError("areas and gravity must be positive")

    @classmethod
    def from_config(cls, path: str | Path | None = None) -> "QuadrupleTank":
        cfg = load_config(path)
        fields = {k: cfg.getfloat("plant", k) for k in cfg["plant"] if k != "output_tank"}
        return cls(**fields, output_tank=cfg.getint("plant", "output_tank", fallback=1))

    def params(self) -> dict:
        return asdict(self)

    def derivative(self, x, u):
        h1, h2, h3, h4 = (max(float(v), 0.0) for v in x)
        v1, v2 = float(u[0]), float(u[1])
        s = math.sqrt(2.0 * self.g)
        q1, q2 = self.a1 * s * math.sqrt(h1), self.a2 * s * math.sqrt(h2)
        q3, q4 = self.a3 * s * math.sqrt(h3), self.a4 * s * math.sqrt(h4)
        p1, p2 = self.k1 * v1, self.k2 * v2
        return np.array([
            (-q1 + q3 + self.gamma1 * p1) / self.A1,
            (-q2 + q4 + self.gamma2 * p2) / self.A2,
            (-q3 + (1.0 - self.gamma2) * p2) / self.A3,
            (-q4 + (1.0 - self.gamma1) * p1) / self.A4,
        ])

    def output(self, x):
        return np.asarray(x)[..., self.output_tank - 1:self.output_tank]

    def clamp(self, x):
        return np.maximum(x, 0.0)

    def steady_state(self, u) -> np.ndarray:
        """Closed-form equilibrium levels for a constant pump input."""
        s2g = 2.0 * self.g
        p1, p2 = self.k1 * float(u[0]), self.k2 * float(u[1])
        q3 = (1.0 - self.gamma2) * p2
        q4 = (1.0 - self.gamma1) * p1
        q1 = q3 + self.gamma1 * p1
        q2 = q4 + self.gamma2 * p2
        return np.array([(q1 / self.a1) ** 2 / s2g, (q2 / self.a2) ** 2 / s2g,
                         (q3 / self.a3) ** 2 / s2g, (q4 / self.a4) ** 2 / s2g])


def default_config_path() -> Path:
    return Path(str(resources.files("stablegates.bench") / "data" / "fourtank.ini"))


def load_config(path: str | Path | None = None) -> configparser.ConfigParser:
    path = Path(path) if path is not None else default_config_path()
    cfg = configparser.ConfigParser()
    cfg.optionxform = str  # tank areas A1 and outlet areas a1 differ only by case
    if not cfg.read(path):
        raise FileNotFoundError(f"cannot read plant config {path}")
    return cfg


def rk4_step(plant: PlantModel, x: np.ndarray, u: np.ndarray, h: float) -> np.ndarray:
    k1 = plant.derivative(x, u)
    k2 = plant.derivative(x + 0.5 * h * k1, u)
    k3 = plant.derivative(x + 0.5 * h * k2, u)
    k4 = plant.derivative(x + h * k3, u)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def simulate_plant(plant: PlantModel, x0, u_seq, dt: float, substeps: int = 1,
                   return_states: bool = False):
    """Zero-order-hold simulation with ``substeps`` RK4 steps per sample.

    ``y[k]`` is the output after input ``u[k]`` has been held for one sample,
    i.e. measured at time ``(k + 1) * dt``.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if substeps < 1:
        raise ValueError("substeps must be at least 1")
    u_seq = np.asarray(u_seq, dtype=np.float64)
    x = plant.clamp(np.asarray(x0, dtype=np.float64).copy())
    h = dt / substeps
    states = np.empty((u_seq.shape[0] + 1, plant.n_x))
    states[0] = x
    for k, u in enumerate(u_seq):
        for _ in range(substeps):
            x = plant.clamp(rk4_step(plant, x, u, h))
        if not np.all(np.isfinite(x)):
            raise SimulationError(f"non-finite plant state at step {k}")
        states[k + 1] = x
    y = np.asarray(plant.output(states[1:]), dtype=np.float64)
    return (y, states) if return_states else y
