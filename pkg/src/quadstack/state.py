"""Shared body-state containers used across controllers and the simulator."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class RobotState:
    """Body pose/twist plus foot positions, world frame (omega in body frame)."""

    pos: np.ndarray = field(default_factory=lambda: np.zeros(3))
    vel: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rot: np.ndarray = field(default_factory=lambda: np.eye(3))
    omega: np.ndarray = field(default_factory=lambda: np.zeros(3))
    feet: np.ndarray = field(default_factory=lambda: np.zeros((4, 3)))

    def __post_init__(self):
        self.pos = np.asarray(self.pos, dtype=float).reshape(3)
        self.vel = np.asarray(self.vel, dtype=float).reshape(3)
        self.rot = np.asarray(self.rot, dtype=float).reshape(3, 3)
        self.omega = np.asarray(self.omega, dtype=float).reshape(3)
        self.feet = np.asarray(self.feet, dtype=float).reshape(4, 3)

    def omega_world(self) -> np.ndarray:
        return self.rot @ self.omega

    def copy(self) -> "RobotState":
        return RobotState(self.pos.copy(), self.vel.copy(), self.rot.copy(),
                          self.omega.copy(), self.feet.copy())


@dataclass
class DesiredState:
    """Pose/twist targets for the balance-style controllers (world frame)."""

    pos: np.ndarray = field(default_factory=lambda: np.zeros(3))
    vel: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rot: np.ndarray = field(default_factory=lambda: np.eye(3))
    omega_world: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.pos = np.asarray(self.pos, dtype=float).reshape(3)
        self.vel = np.asarray(self.vel, dtype=float).reshape(3)
        self.rot = np.asarray(self.rot, dtype=float).reshape(3, 3)
        self.omega_world = np.asarray(self.omega_world, dtype=float).reshape(3)
