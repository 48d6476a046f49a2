"""Task definitions, observation container, and normalization shared by all modules."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

WORKSPACE_HALF = 0.5
ANGLE_HALF = np.pi / 2.0
SPEED_CAP = 0.1
DT = 0.1
IMAGE_SIZE = 32

# modality subsets; M1 is the image, M2 groups force and proprioception
IMAGE_ONLY = ("image",)
FORCE_PROPRIO = ("force", "proprio")
ALL_MODALITIES = ("image", "force", "proprio")

MODALITY_WIDTHS = {
    "image": IMAGE_SIZE * IMAGE_SIZE,
    "force": 4,  # fx, fy, tau_z, contact flag
    "proprio": 2,
}


@dataclass(frozen=True)
class TaskSpec:
    """Static description of an estimation task."""

    name: str
    state_dim: int
    control_dim: int
    state_names: tuple
    angle_dims: tuple = ()

    @property
    def scales(self) -> np.ndarray:
        s = np.full(self.state_dim, WORKSPACE_HALF)
        for k in self.angle_dims:
            s[k] = ANGLE_HALF
        return s

    def normalize_state(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) / self.scales

    def denormalize_state(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) * self.scales

    def wrap_difference(self, d: np.ndarray) -> np.ndarray:
        """Wrap angle components of a normalized state difference.

        Angles are normalized by pi/2, so a full turn spans 4 units.
        """
        d = np.array(d, dtype=np.float64, copy=True)
        if self.angle_dims:
            period = 2.0 * np.pi / ANGLE_HALF
            for k in self.angle_dims:
                d[..., k] = (d[..., k] + period / 2.0) % period - period / 2.0
        return d


PUSH_TASK = TaskSpec(name="push", state_dim=2, control_dim=2,
                     state_names=("x", "y"))
DOOR_TASK = TaskSpec(name="door", state_dim=3, control_dim=2,
                     state_names=("hinge_x", "hinge_y", "theta"),
                     angle_dims=(2,))

TASKS = {t.name: t for t in (PUSH_TASK, DOOR_TASK)}


def task_by_name(name: str) -> TaskSpec:
    if name not in TASKS:
        raise ValueError(f"unknown task {name!r}; choose from {sorted(TASKS)}")
    return TASKS[name]


@dataclass
class MultimodalObservation:
    """One timestep of sensor data.

    image: 32x32 grayscale in [0, 1]; force: (fx, fy, tau_z); contact:
    binary flag; proprio: end-effector position in meters; blackout marks
    a zeroed image.
    """

    image: np.ndarray
    force: np.ndarray
    contact: float
    proprio: np.ndarray
    blackout: float = 0.0

    def validate(self) -> None:
        if self.image.shape != (IMAGE_SIZE, IMAGE_SIZE):
            raise ValueError(f"image shape {self.image.shape} != "
                             f"({IMAGE_SIZE}, {IMAGE_SIZE})")
        if self.force.shape != (3,):
            raise ValueError(f"force shape {self.force.shape} != (3,)")
        if self.proprio.shape != (2,):
            raise ValueError(f"proprio shape {self.proprio.shape} != (2,)")
        if self.blackout and np.any(self.image != 0.0):
            raise ValueError("blackout flag set but image is not all zeros")
        if not self.contact and np.any(self.force != 0.0):
            raise ValueError("nonzero force with contact flag 0")


FORCE_SCALE = 10.0  # stiffness * max penetration keeps |f| within ~10


def modality_inputs(obs: MultimodalObservation) -> dict:
    """Network-ready float64 vectors per modality, normalized."""
    force = np.asarray(obs.force, dtype=np.float64) / FORCE_SCALE
    return {
        "image": obs.image.reshape(-1).astype(np.float64),
        "force": np.concatenate([force, [float(obs.contact)]]),
        "proprio": np.asarray(obs.proprio, dtype=np.float64) / WORKSPACE_HALF,
    }


def stack_modality_inputs(observations) -> dict:
    """Batch version of modality_inputs: one (B, d) matrix per modality."""
    singles = [modality_inputs(o) for o in observations]
    return {m: np.stack([s[m] for s in singles]) for m in ALL_MODALITIES}


def normalize_control(u: np.ndarray) -> np.ndarray:
    return np.asarray(u, dtype=np.float64) / SPEED_CAP
