"""Deterministic desk-scale simulators, rendering, and dataset serialization.

Two worlds: a planar disc pushed by a point end-effector, and a hinged
door swept or dragged by it. Contact uses quasi-static projection: the
touched body moves just enough to resolve penetration, and the contact
force is stiffness times penetration. Observations are a rendered 32x32
top-down image, an (fx, fy, tau_z) force reading with a binary contact
flag, and the end-effector position.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .task import (
    IMAGE_SIZE, SPEED_CAP, TASKS, TaskSpec, WORKSPACE_HALF,
    MultimodalObservation,
)

DISC_RADIUS = 0.06
DOOR_LENGTH = 0.3
DOOR_HALF_WIDTH = 0.015
DOOR_SUBSTEP = 0.005  # swept-contact resolution; the door is only 0.03 thick
THETA_LIMIT = np.pi / 2.0
CONTACT_STIFFNESS = 100.0
CONTACT_TOL = 1e-6
PUSHER_RADIUS = 1.0 / IMAGE_SIZE  # rendered dot, one pixel of radius
SUPERSAMPLE = 2

# default dataset sizes (trajectories x steps) and held-out test split
DATASET_SIZES = {"push": (300, 120), "door": (200, 200)}
TEST_SPLIT = {"push": 10, "door": 20}


@dataclass
class PushWorld:
    """Disc on a table pushed by a point end-effector."""

    disc: np.ndarray
    pusher: np.ndarray

    @property
    def state(self) -> np.ndarray:
        return self.disc.copy()


@dataclass
class DoorWorld:
    """Door segment on a fixed hinge, swept or dragged by the end-effector."""

    hinge: np.ndarray
    theta: float
    grasped: bool
    pusher: np.ndarray

    @property
    def state(self) -> np.ndarray:
        return np.array([self.hinge[0], self.hinge[1], self.theta])


def _clamp_speed(u: np.ndarray) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    speed = float(np.hypot(u[0], u[1]))
    if speed > SPEED_CAP:
        return u * (SPEED_CAP / speed)
    return u.copy()


def _clip_workspace(p: np.ndarray, margin: float = 0.0) -> np.ndarray:
    lim = WORKSPACE_HALF - margin
    return np.clip(p, -lim, lim)


def push_step(world: PushWorld, u) -> tuple:
    """Advance the pushing world by one control step.

    The pusher moves by the (speed-capped) command; if it penetrates the
    disc, the disc is projected out along the contact normal and the
    force reading is stiffness times the penetration depth.
    """
    u = _clamp_speed(u)
    pusher = _clip_workspace(world.pusher + u)
    disc = world.disc.copy()
    force = np.zeros(3)
    contact = 0.0

    delta = pusher - disc
    dist = float(np.hypot(delta[0], delta[1]))
    pen = DISC_RADIUS - dist
    if pen > CONTACT_TOL:
        if dist > 1e-12:
            push_dir = -delta / dist
        else:
            speed = float(np.hypot(u[0], u[1]))
            push_dir = u / speed if speed > 1e-12 else np.array([1.0, 0.0])
        disc = disc + pen * push_dir
        disc = _clip_workspace(disc, margin=DISC_RADIUS)
        contact = 1.0
        force[:2] = CONTACT_STIFFNESS * pen * push_dir
        # If the workspace clamp re-introduced overlap, eject the pusher.
        delta = pusher - disc
        dist = float(np.hypot(delta[0], delta[1]))
        if dist < DISC_RADIUS:
            out = delta / dist if dist > 1e-12 else -push_dir
            pusher = disc + DISC_RADIUS * out

    new_world = PushWorld(disc=disc, pusher=pusher)
    obs = MultimodalObservation(image=render(new_world), force=force,
                                contact=contact, proprio=pusher.copy())
    return new_world, obs


def _door_axes(theta: float):
    d_hat = np.array([np.cos(theta), np.sin(theta)])
    t_hat = np.array([-np.sin(theta), np.cos(theta)])
    return d_hat, t_hat


def door_step(world: DoorWorld, u) -> tuple:
    """Advance the door world by one control step.

    Grasped: the end-effector holds the door tip; the tangential motion
    component rotates the hinge, the radial component is resisted and
    read as force. Ungrasped: the free end-effector sweeps the door only
    while penetrating its segment; the hinge never moves.
    """
    u = _clamp_speed(u)
    hinge = world.hinge
    theta = world.theta
    force = np.zeros(3)

    if world.grasped:
        d_hat, t_hat = _door_axes(theta)
        tangential = float(u @ t_hat)
        radial = float(u @ d_hat)
        theta_new = float(np.clip(theta + tangential / DOOR_LENGTH,
                                  -THETA_LIMIT, THETA_LIMIT))
        applied = theta_new - theta
        d_new, _ = _door_axes(theta_new)
        pusher = hinge + DOOR_LENGTH * d_new
        contact = 1.0
        force[:2] = -CONTACT_STIFFNESS * radial * d_hat
        force[2] = CONTACT_STIFFNESS * applied * DOOR_LENGTH
        new_world = DoorWorld(hinge=hinge.copy(), theta=theta_new,
                              grasped=True, pusher=pusher)
    else:
        # Substep the sweep so a fast pusher cannot tunnel through the
        # thin segment between frames.
        speed = float(np.hypot(u[0], u[1]))
        n_sub = max(1, int(np.ceil(speed / DOOR_SUBSTEP)))
        du = u / n_sub
        pusher = world.pusher.copy()
        theta_new = theta
        contact = 0.0
        for _ in range(n_sub):
            pusher = _clip_workspace(pusher + du)
            d_hat, _ = _door_axes(theta_new)
            rel = pusher - hinge
            arm = float(np.clip(rel @ d_hat, 0.0, DOOR_LENGTH))
            closest = hinge + arm * d_hat
            off = pusher - closest
            dist = float(np.hypot(off[0], off[1]))
            pen = DOOR_HALF_WIDTH - dist
            if pen > CONTACT_TOL and arm > 1e-9:
                side = np.sign(d_hat[0] * rel[1] - d_hat[1] * rel[0])
                if side == 0.0:
                    side = 1.0
                dtheta = -side * pen / arm
                theta_new = float(np.clip(theta_new + dtheta, -THETA_LIMIT,
                                          THETA_LIMIT))
                # Flag any touch during the frame; keep the latest reading.
                contact = 1.0
                n_hat = off / dist if dist > 1e-12 else \
                    side * np.array([-d_hat[1], d_hat[0]])
                force = np.zeros(3)
                force[:2] = CONTACT_STIFFNESS * pen * n_hat
                force[2] = CONTACT_STIFFNESS * pen * arm * (-side)
                # Project the pusher out if the joint limit blocked the
                # sweep.
                d_new, _ = _door_axes(theta_new)
                rel = pusher - hinge
                arm2 = float(np.clip(rel @ d_new, 0.0, DOOR_LENGTH))
                closest = hinge + arm2 * d_new
                off2 = pusher - closest
                dist2 = float(np.hypot(off2[0], off2[1]))
                if dist2 < DOOR_HALF_WIDTH:
                    out = off2 / dist2 if dist2 > 1e-12 else n_hat
                    pusher = closest + DOOR_HALF_WIDTH * out
        new_world = DoorWorld(hinge=hinge.copy(), theta=theta_new,
                              grasped=False, pusher=pusher)

    obs = MultimodalObservation(image=render(new_world), force=force,
                                contact=contact, proprio=pusher.copy())
    return new_world, obs


# ---------------------------------------------------------------------------
# Rendering


def _sample_grid():
    n = IMAGE_SIZE * SUPERSAMPLE
    xs = (np.arange(n) + 0.5) / n - WORKSPACE_HALF
    ys = WORKSPACE_HALF - (np.arange(n) + 0.5) / n
    return np.meshgrid(xs, ys)


_GRID_X, _GRID_Y = _sample_grid()


def _downsample(img):
    return img.reshape(IMAGE_SIZE, SUPERSAMPLE, IMAGE_SIZE,
                       SUPERSAMPLE).mean(axis=(1, 3))


_EDGE = 1.0 / (IMAGE_SIZE * SUPERSAMPLE)  # one-sample antialiasing ramp


def _coverage(dist, radius):
    return np.clip(0.5 + (radius - dist) / _EDGE, 0.0, 1.0)


def _disc_mask(center, radius):
    dist = np.hypot(_GRID_X - center[0], _GRID_Y - center[1])
    return _coverage(dist, radius)


def _segment_mask(a, b, half_width):
    ab = b - a
    length2 = float(ab @ ab)
    px = _GRID_X - a[0]
    py = _GRID_Y - a[1]
    t = np.clip((px * ab[0] + py * ab[1]) / length2, 0.0, 1.0)
    dist = np.hypot(px - t * ab[0], py - t * ab[1])
    return _coverage(dist, half_width)


def render(world) -> np.ndarray:
    """Top-down orthographic 32x32 grayscale view, 2x2 supersampled.

    Bodies render at intensity 1.0, the end-effector as a 0.5 dot; the
    composite takes the per-sample maximum.
    """
    if isinstance(world, PushWorld):
        body = _disc_mask(world.disc, DISC_RADIUS)
        pusher = world.pusher
    elif isinstance(world, DoorWorld):
        d_hat, _ = _door_axes(world.theta)
        tip = world.hinge + DOOR_LENGTH * d_hat
        body = _segment_mask(world.hinge, tip, DOOR_HALF_WIDTH)
        pusher = world.pusher
    else:
        raise TypeError(f"cannot render {type(world).__name__}")
    layers = np.maximum(body, 0.5 * _disc_mask(pusher, PUSHER_RADIUS))
    return _downsample(layers)


# ---------------------------------------------------------------------------
# Heuristic controllers


class PushController:
    """Proportional drive toward the disc, re-approached from a random
    angle every ``retarget_every`` steps.

    Unit gain on the positional error keeps the approach monotone; a
    larger gain would overshoot and oscillate around the target because
    commands are applied as displacements.
    """

    KP = 1.0
    APPROACH_OFFSET = 0.09
    retarget_every = 50

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.t = 0
        self.waypoint = None

    def __call__(self, world: PushWorld) -> np.ndarray:
        if self.t % self.retarget_every == 0:
            phi = self.rng.uniform(0.0, 2.0 * np.pi)
            offset = self.APPROACH_OFFSET * np.array([np.cos(phi),
                                                      np.sin(phi)])
            self.waypoint = _clip_workspace(world.disc + offset)
        self.t += 1
        if self.waypoint is not None:
            if float(np.hypot(*(self.waypoint - world.pusher))) < 0.02:
                self.waypoint = None
        target = world.disc if self.waypoint is None else self.waypoint
        return _clamp_speed(self.KP * (target - world.pusher))


class DoorController:
    """Constant random push/pull direction, resampled every
    ``resample_every`` steps.

    Directions are drawn by aiming at a random point on the current door
    segment and jittering the heading, so free sweeps actually cross the
    door instead of wandering off the desk.
    """

    resample_every = 100
    JITTER = np.pi / 6.0

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.t = 0
        self.command = np.zeros(2)

    def __call__(self, world: DoorWorld) -> np.ndarray:
        if self.t % self.resample_every == 0:
            d_hat, _ = _door_axes(world.theta)
            aim = world.hinge + self.rng.uniform(0.3, 1.0) * DOOR_LENGTH * d_hat
            rel = aim - world.pusher
            psi = float(np.arctan2(rel[1], rel[0])) + \
                self.rng.uniform(-self.JITTER, self.JITTER)
            speed = self.rng.uniform(0.3, 1.0) * SPEED_CAP
            self.command = speed * np.array([np.cos(psi), np.sin(psi)])
        self.t += 1
        return self.command.copy()


# ---------------------------------------------------------------------------
# Dataset generation


@dataclass
class Trajectory:
    """One rollout: aligned per-step ground truth, controls, observations.

    ``controls[t]`` moves the world from ``states[t-1]`` to ``states[t]``;
    ``controls[0]`` is zero and row 0 observes the initial state.
    """

    states: np.ndarray
    controls: np.ndarray
    images: np.ndarray
    forces: np.ndarray
    contacts: np.ndarray
    proprios: np.ndarray
    blackouts: np.ndarray

    @property
    def n_steps(self) -> int:
        return self.states.shape[0]

    def observation(self, t: int) -> MultimodalObservation:
        return MultimodalObservation(
            image=self.images[t], force=self.forces[t],
            contact=float(self.contacts[t]), proprio=self.proprios[t],
            blackout=float(self.blackouts[t]))


@dataclass
class Dataset:
    task: TaskSpec
    trajectories: list = field(default_factory=list)

    @property
    def n_trajectories(self) -> int:
        return len(self.trajectories)


def _initial_push_world(rng) -> PushWorld:
    disc = rng.uniform(-0.25, 0.25, size=2)
    while True:
        pusher = rng.uniform(-0.45, 0.45, size=2)
        if float(np.hypot(*(pusher - disc))) > 1.5 * DISC_RADIUS:
            break
    return PushWorld(disc=disc, pusher=pusher)


def _initial_door_world(rng, grasped: bool) -> DoorWorld:
    hinge = rng.uniform(-0.2, 0.2, size=2)
    theta = float(rng.uniform(-np.pi / 3.0, np.pi / 3.0))
    d_hat, _ = _door_axes(theta)
    if grasped:
        pusher = hinge + DOOR_LENGTH * d_hat
    else:
        arm = rng.uniform(0.3, 1.0) * DOOR_LENGTH
        side = 1.0 if rng.uniform() < 0.5 else -1.0
        gap = rng.uniform(0.02, 0.08)
        normal = side * np.array([-d_hat[1], d_hat[0]])
        pusher = _clip_workspace(hinge + arm * d_hat +
                                 (DOOR_HALF_WIDTH + gap) * normal)
    return DoorWorld(hinge=hinge, theta=theta, grasped=grasped,
                     pusher=pusher)


def generate_trajectory(task: TaskSpec, n_steps: int, blackout: float,
                        seed_seq: np.random.SeedSequence,
                        grasped: bool = False) -> Trajectory:
    phys_ss, black_ss = seed_seq.spawn(2)
    rng = np.random.default_rng(phys_ss)
    black_rng = np.random.default_rng(black_ss)

    if task.name == "push":
        world = _initial_push_world(rng)
        controller = PushController(rng)
        step = push_step
    elif task.name == "door":
        world = _initial_door_world(rng, grasped)
        controller = DoorController(rng)
        step = door_step
    else:
        raise ValueError(f"unknown task {task.name!r}")

    states = np.zeros((n_steps, task.state_dim))
    controls = np.zeros((n_steps, task.control_dim))
    images = np.zeros((n_steps, IMAGE_SIZE, IMAGE_SIZE))
    forces = np.zeros((n_steps, 3))
    contacts = np.zeros(n_steps)
    proprios = np.zeros((n_steps, 2))
    blackouts = black_rng.uniform(size=n_steps) < blackout

    for t in range(n_steps):
        u = np.zeros(2) if t == 0 else controller(world)
        world, obs = step(world, u)
        states[t] = world.state
        controls[t] = u
        images[t] = obs.image
        forces[t] = obs.force
        contacts[t] = obs.contact
        proprios[t] = obs.proprio
        if blackouts[t]:
            images[t] = 0.0

    return Trajectory(states=states, controls=controls, images=images,
                      forces=forces, contacts=contacts, proprios=proprios,
                      blackouts=blackouts)


def generate_dataset(task: TaskSpec, n_traj: int, n_steps: int,
                     blackout: float, seed: int) -> Dataset:
    """Generate ``n_traj`` rollouts with independent per-trajectory streams.

    Physics and blackout use separate child streams, so datasets that
    share a seed share trajectories exactly regardless of the blackout
    level; for the door task, even trajectory indices are grasped.
    """
    if isinstance(task, str):
        task = TASKS[task]
    if not 0.0 <= blackout <= 1.0:
        raise ValueError(f"blackout probability {blackout} outside [0, 1]")
    root = np.random.SeedSequence(seed)
    trajectories = []
    for i, child in enumerate(root.spawn(n_traj)):
        trajectories.append(
            generate_trajectory(task, n_steps, blackout, child,
                                grasped=(i % 2 == 0)))
    return Dataset(task=task, trajectories=trajectories)


# ---------------------------------------------------------------------------
# DFDS serialization

DFDS_MAGIC = b"DFDS"
DFDS_VERSION = 1
_HEADER = struct.Struct("<4sIIIII")
_TASK_IDS = {"push": 0, "door": 1}
_TASK_NAMES = {v: k for k, v in _TASK_IDS.items()}


def _blocks(traj: Trajectory):
    return (traj.states, traj.controls,
            traj.images.reshape(traj.n_steps, -1), traj.forces,
            traj.contacts, traj.proprios,
            traj.blackouts.astype(np.float64))


def write_dataset(path, dataset: Dataset) -> None:
    if not dataset.trajectories:
        raise ValueError("refusing to write an empty dataset")
    n_steps = dataset.trajectories[0].n_steps
    for traj in dataset.trajectories:
        if traj.n_steps != n_steps:
            raise ValueError("all trajectories must share a step count")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(DFDS_MAGIC, DFDS_VERSION,
                              _TASK_IDS[dataset.task.name],
                              dataset.n_trajectories, n_steps,
                              dataset.task.state_dim))
        for traj in dataset.trajectories:
            for block in _blocks(traj):
                fh.write(np.ascontiguousarray(block,
                                              dtype="<f4").tobytes())


def read_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
        if len(raw) != _HEADER.size:
            raise ValueError("truncated dataset header")
        magic, version, task_id, n_traj, n_steps, state_dim = \
            _HEADER.unpack(raw)
        if magic != DFDS_MAGIC:
            raise ValueError(f"bad magic {magic!r}; not a DFDS file")
        if version != DFDS_VERSION:
            raise ValueError(f"unsupported DFDS version {version}")
        if task_id not in _TASK_NAMES:
            raise ValueError(f"unknown task id {task_id}")
        task = TASKS[_TASK_NAMES[task_id]]
        if state_dim != task.state_dim:
            raise ValueError(f"state dim {state_dim} does not match task "
                             f"{task.name!r}")

        shapes = ((n_steps, task.state_dim), (n_steps, task.control_dim),
                  (n_steps, IMAGE_SIZE * IMAGE_SIZE), (n_steps, 3),
                  (n_steps,), (n_steps, 2), (n_steps,))
        trajectories = []
        for _ in range(n_traj):
            arrays = []
            for shape in shapes:
                count = int(np.prod(shape))
                buf = fh.read(4 * count)
                if len(buf) != 4 * count:
                    raise ValueError("truncated dataset block")
                arrays.append(np.frombuffer(buf, dtype="<f4")
                              .astype(np.float64).reshape(shape))
            states, controls, images, forces, contacts, proprios, flags = \
                arrays
            trajectories.append(Trajectory(
                states=states, controls=controls,
                images=images.reshape(n_steps, IMAGE_SIZE, IMAGE_SIZE),
                forces=forces, contacts=contacts, proprios=proprios,
                blackouts=flags > 0.5))
        if fh.read(1):
            raise ValueError("trailing bytes after final trajectory")
    return Dataset(task=task, trajectories=trajectories)
