"""Planar biped description: joints, geometry, and the name-based symmetry map.

The robot is a sagittal-plane biped with a floating base (x, z, pitch), two
2-joint legs and two 1-joint arms.  Canonical joint order is fixed:

    l_hip, l_knee, r_hip, r_knee, l_arm, r_arm

Everything downstream (observation layouts, action mapping, exported
descriptors) indexes joints through this order, so it is the single source
of truth.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import yaml

CANONICAL_JOINT_ORDER = ("l_hip", "l_knee", "r_hip", "r_knee", "l_arm", "r_arm")


class ConfigError(ValueError):
    """Raised when a robot or task configuration violates its invariants."""


@dataclass(frozen=True)
class JointSpec:
    """Per-joint limits, default pose and actuation parameters."""

    name: str
    lower_limit: float
    upper_limit: float
    default_pos: float
    velocity_limit: float
    torque_limit: float
    kp: float
    kd: float
    joint_inertia: float
    damping: float

    def validate(self) -> None:
        if not self.lower_limit < self.upper_limit:
            raise ConfigError(
                f"joint '{self.name}': lower_limit ({self.lower_limit}) must be "
                f"< upper_limit ({self.upper_limit})"
            )
        if not (self.lower_limit <= self.default_pos <= self.upper_limit):
            raise ConfigError(
                f"joint '{self.name}': default_pos {self.default_pos} outside "
                f"[{self.lower_limit}, {self.upper_limit}]"
            )
        for attr in ("velocity_limit", "torque_limit", "kp", "kd", "joint_inertia"):
            if getattr(self, attr) <= 0:
                raise ConfigError(f"joint '{self.name}': {attr} must be > 0")
        if self.damping < 0:
            raise ConfigError(f"joint '{self.name}': damping must be >= 0")


@dataclass(frozen=True)
class MirrorRule:
    """One (permutation, signs) pair applied to a fixed-width vector slice."""

    permutation: np.ndarray
    signs: np.ndarray

    def __post_init__(self):
        perm = np.asarray(self.permutation, dtype=np.intp)
        signs = np.asarray(self.signs, dtype=np.float64)
        object.__setattr__(self, "permutation", perm)
        object.__setattr__(self, "signs", signs)
        if perm.shape != signs.shape:
            raise ConfigError("mirror rule permutation/signs length mismatch")
        if not np.array_equal(np.sort(perm), np.arange(perm.size)):
            raise ConfigError("mirror rule permutation is not a permutation")
        if not np.all(np.abs(signs) == 1.0):
            raise ConfigError("mirror rule signs must be +-1")
        # involution check: applying twice must be the identity
        test = np.arange(1.0, perm.size + 1.0)
        if not np.array_equal(mirror_vector(self, mirror_vector(self, test)), test):
            raise ConfigError("mirror rule is not an involution")

    @property
    def width(self) -> int:
        return int(self.permutation.size)


def identity_rule(width: int) -> MirrorRule:
    return MirrorRule(np.arange(width), np.ones(width))


def mirror_vector(rule: MirrorRule, v: np.ndarray) -> np.ndarray:
    """Mirror ``v`` under ``rule``: out[i] = signs[i] * v[perm[i]].

    Works on any array whose last axis matches the rule width.
    """
    v = np.asarray(v)
    if v.shape[-1] != rule.width:
        raise ConfigError(
            f"mirror rule width {rule.width} does not match vector width {v.shape[-1]}"
        )
    return rule.signs * v[..., rule.permutation]


@dataclass(frozen=True)
class SymmetryMap:
    """Left-right mirror over joint indices plus per-observation-term rules.

    ``obs_term_rules`` maps observation term names to the rule that mirrors
    the corresponding slice; terms not listed default to identity, which is
    correct for base quantities in the sagittal plane.
    """

    joint_rule: MirrorRule
    obs_term_rules: Mapping[str, str] = field(default_factory=dict)

    def rule_for_term(self, name: str, width: int) -> MirrorRule:
        kind = self.obs_term_rules.get(name, "identity")
        if kind == "joint":
            if width != self.joint_rule.width:
                raise ConfigError(
                    f"obs term '{name}' width {width} != joint count "
                    f"{self.joint_rule.width}"
                )
            return self.joint_rule
        if kind == "identity":
            return identity_rule(width)
        raise ConfigError(f"unknown mirror rule kind '{kind}' for term '{name}'")

    @property
    def action_rule(self) -> MirrorRule:
        return self.joint_rule


@dataclass(frozen=True)
class RobotModel:
    joints: tuple[JointSpec, ...]
    link_lengths: Mapping[str, float]
    torso_mass: float
    torso_inertia: float
    nominal_height: float
    symmetry: SymmetryMap
    torso_length: float = 0.3
    foot_heel: float = 0.1
    foot_toe: float = 0.15

    # cached joint-parameter arrays, canonical order
    @property
    def joint_names(self) -> tuple[str, ...]:
        return tuple(j.name for j in self.joints)

    @property
    def n_joints(self) -> int:
        return len(self.joints)

    def joint_array(self, attr: str) -> np.ndarray:
        return np.array([getattr(j, attr) for j in self.joints], dtype=np.float64)

    @property
    def default_pose(self) -> np.ndarray:
        return self.joint_array("default_pos")

    @property
    def lower_limits(self) -> np.ndarray:
        return self.joint_array("lower_limit")

    @property
    def upper_limits(self) -> np.ndarray:
        return self.joint_array("upper_limit")

    def validate(self) -> None:
        names = self.joint_names
        if len(set(names)) != len(names):
            raise ConfigError("joint names must be unique")
        if len(self.joints) != 6:
            raise ConfigError(f"expected exactly 6 actuated joints, got {len(self.joints)}")
        for j in self.joints:
            j.validate()
        for key in ("thigh", "shank", "arm"):
            if self.link_lengths.get(key, 0.0) <= 0:
                raise ConfigError(f"link length '{key}' must be > 0")
        if self.torso_mass <= 0 or self.torso_inertia <= 0 or self.nominal_height <= 0:
            raise ConfigError("torso_mass, torso_inertia and nominal_height must be > 0")
        if self.torso_length <= 0:
            raise ConfigError("torso_length must be > 0")
        if self.foot_heel < 0 or self.foot_toe < 0:
            raise ConfigError("foot_heel and foot_toe must be >= 0")


def _build_symmetry(cfg: Mapping, joint_names: Sequence[str]) -> SymmetryMap:
    pairs = cfg.get("pairs", [])
    name_to_idx = {n: i for i, n in enumerate(joint_names)}
    perm = np.arange(len(joint_names))
    for pair in pairs:
        if len(pair) != 2:
            raise ConfigError(f"symmetry pair {pair!r} must have exactly two names")
        a, b = pair
        for n in (a, b):
            if n not in name_to_idx:
                raise ConfigError(f"symmetry pair references unknown joint '{n}'")
        ia, ib = name_to_idx[a], name_to_idx[b]
        perm[ia], perm[ib] = ib, ia
    signs_cfg = cfg.get("signs", {})
    signs = np.ones(len(joint_names))
    for n, s in signs_cfg.items():
        if n not in name_to_idx:
            raise ConfigError(f"symmetry sign references unknown joint '{n}'")
        signs[name_to_idx[n]] = float(s)
    joint_rule = MirrorRule(perm, signs)  # involution enforced in MirrorRule
    obs_rules = dict(cfg.get("obs_terms", {}))
    return SymmetryMap(joint_rule=joint_rule, obs_term_rules=obs_rules)


def load_robot_model(config_text: str | Mapping) -> RobotModel:
    """Parse and validate a robot description.

    Accepts YAML text or an already-parsed mapping with a top-level
    ``robot`` key (or the bare robot mapping).
    """
    if isinstance(config_text, str):
        try:
            raw = yaml.safe_load(config_text)
        except yaml.YAMLError as e:
            raise ConfigError(f"robot config parse error: {e}") from e
    else:
        raw = config_text
    if not isinstance(raw, Mapping):
        raise ConfigError("robot config must be a mapping")
    cfg = raw.get("robot", raw)

    joint_cfgs = cfg.get("joints")
    if not joint_cfgs:
        raise ConfigError("robot config missing 'joints'")
    joints = []
    for jc in joint_cfgs:
        try:
            joints.append(JointSpec(**jc))
        except TypeError as e:
            raise ConfigError(f"bad joint spec {jc.get('name', '?')!r}: {e}") from e
    model = RobotModel(
        joints=tuple(joints),
        link_lengths=dict(cfg.get("link_lengths", {})),
        torso_mass=float(cfg.get("torso_mass", 0.0)),
        torso_inertia=float(cfg.get("torso_inertia", 0.0)),
        nominal_height=float(cfg.get("nominal_height", 0.0)),
        symmetry=_build_symmetry(cfg.get("symmetry", {}), [j["name"] for j in joint_cfgs]),
        torso_length=float(cfg.get("torso_length", 0.3)),
        foot_heel=float(cfg.get("foot_heel", 0.1)),
        foot_toe=float(cfg.get("foot_toe", 0.15)),
    )
    model.validate()
    return model


def forward_kinematics(model: RobotModel, base_pose, q) -> dict[str, np.ndarray]:
    """World-frame points of the planar linkage.

    ``base_pose`` is (..., 3) = (x, z, pitch); ``q`` is (..., 6) in canonical
    order.  Returns a dict of (..., 2) points: hip, l_knee, r_knee, l_foot,
    r_foot, l_hand, r_hand.  Pure function; angles outside limits evaluate
    normally.
    """
    base_pose = np.asarray(base_pose, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if q.shape[-1] != model.n_joints:
        raise ConfigError(f"expected {model.n_joints} joint angles, got {q.shape[-1]}")
    x, z, pitch = base_pose[..., 0], base_pose[..., 1], base_pose[..., 2]
    lt = model.link_lengths["thigh"]
    ls = model.link_lengths["shank"]
    la = model.link_lengths["arm"]

    def chain_point(px, pz, angle, length):
        return px + length * np.sin(angle), pz - length * np.cos(angle)

    hip = np.stack([x, z], axis=-1)
    out = {"hip": hip}
    for side, ihip, iknee, iarm in (("l", 0, 1, 4), ("r", 2, 3, 5)):
        a1 = pitch + q[..., ihip]
        a2 = a1 + q[..., iknee]
        kx, kz = chain_point(x, z, a1, lt)
        fx, fz = chain_point(kx, kz, a2, ls)
        hx, hz = chain_point(x, z, pitch + q[..., iarm], la)
        out[f"{side}_knee"] = np.stack([kx, kz], axis=-1)
        out[f"{side}_foot"] = np.stack([fx, fz], axis=-1)
        out[f"{side}_hand"] = np.stack([hx, hz], axis=-1)
    return out
