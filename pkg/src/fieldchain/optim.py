"""Adam over heterogeneous parameter groups and the training schedule.

Group learning rates decay by a shared factor driven by the schedule:
constant during the append phase, exponential toward ``decay_target`` of
the initial value across a refine phase whose length is fixed when it
begins. Loss weights follow the same law. Grid upsampling fires at evenly
spaced refine milestones.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import FrozenField

GROUP_IDS = ("rotations", "translations", "focal", "field_density",
             "field_appearance")

DEFAULT_LRS = {
    "rotations": 5e-3,
    "translations": 5e-4,
    "focal": 1e-4,
    "field_density": 2e-2,
    "field_appearance": 2e-2,
}


class Param:
    """One optimized array with its Adam state.

    ``lr_scale`` multiplies the group learning rate (used for the
    appearance basis, which trains slower than the factor grids).
    ``owner`` is consulted for a ``frozen`` flag before each update.
    """

    __slots__ = ("name", "value", "m", "v", "step", "lr_scale", "owner", "grad")

    def __init__(self, name, value, lr_scale=1.0, owner=None):
        self.name = name
        self.value = value
        self.m = np.zeros_like(value)
        self.v = np.zeros_like(value)
        self.step = 0
        self.lr_scale = lr_scale
        self.owner = owner
        self.grad = None


@dataclass
class ParamGroup:
    id: str
    lr0: float
    lr: float
    params: list = field(default_factory=list)


class Adam:
    def __init__(self, lrs=None, beta1=0.9, beta2=0.99, eps=1e-8):
        lrs = dict(DEFAULT_LRS, **(lrs or {}))
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.groups = {
            gid: ParamGroup(id=gid, lr0=lrs[gid], lr=lrs[gid])
            for gid in GROUP_IDS
        }
        self.skipped_nonfinite = 0

    def register(self, group_id, name, value, lr_scale=1.0, owner=None) -> Param:
        p = Param(name, value, lr_scale, owner)
        self.groups[group_id].params.append(p)
        return p

    def remove_owner(self, owner):
        for g in self.groups.values():
            g.params = [p for p in g.params if p.owner is not owner]

    def set_lr_factor(self, factor: float):
        for g in self.groups.values():
            g.lr = g.lr0 * factor

    def iter_params(self):
        for g in self.groups.values():
            yield from g.params

    def step(self):
        """Apply one bias-corrected Adam update to every param with a
        gradient set; clears gradients. Non-finite gradients skip that
        parameter and are counted."""
        for g in self.groups.values():
            for p in g.params:
                if p.grad is None:
                    continue
                if p.owner is not None and getattr(p.owner, "frozen", False):
                    raise FrozenField(f"parameter {p.name} belongs to a frozen field")
                grad = p.grad
                p.grad = None
                if not np.all(np.isfinite(grad)):
                    self.skipped_nonfinite += 1
                    continue
                p.step += 1
                p.m *= self.beta1
                p.m += (1 - self.beta1) * grad
                p.v *= self.beta2
                p.v += (1 - self.beta2) * grad**2
                m_hat = p.m / (1 - self.beta1**p.step)
                v_hat = p.v / (1 - self.beta2**p.step)
                p.value -= (g.lr * p.lr_scale) * m_hat / (np.sqrt(v_hat) + self.eps)


def adam_step(adam: Adam, param: Param, grad: np.ndarray):
    """Single-parameter convenience wrapper around Adam.step."""
    param.grad = grad
    adam.step()


@dataclass
class Schedule:
    """Phase state plus decayed learning-rate factor, loss weights, and
    the per-field upsampling plan."""

    iters_per_append: int = 100
    refine_iters_per_frame: int = 600
    decay_target: float = 0.1
    w_flow0: float = 1.0
    w_depth0: float = 0.1
    base_resolution: int = 64
    upsample_resolutions: tuple = (128, 200, 280, 400, 640)

    phase: str = "append"
    iter_in_phase: int = 0
    refine_total: int = 0
    lr_factor: float = 1.0
    w_flow: float = 1.0
    w_depth: float = 0.1
    resolution: int = 64
    milestones: list = field(default_factory=list)
    next_milestone: int = 0

    def __post_init__(self):
        self.w_flow = self.w_flow0
        self.w_depth = self.w_depth0
        self.resolution = self.base_resolution

    def begin_append(self):
        """New field: everything back to its initial state."""
        self.phase = "append"
        self.iter_in_phase = 0
        self.lr_factor = 1.0
        self.w_flow = self.w_flow0
        self.w_depth = self.w_depth0
        self.resolution = self.base_resolution
        self.milestones = []
        self.next_milestone = 0

    def begin_refine(self, owned_frames: int):
        self.phase = "refine"
        self.iter_in_phase = 0
        self.refine_total = self.refine_iters_per_frame * owned_frames
        k = len(self.upsample_resolutions)
        self.milestones = [
            max(1, math.ceil(self.refine_total * (i + 1) / (k + 1)))
            for i in range(k)
        ]
        self.next_milestone = 0

    def tick(self):
        """Advance one iteration. Returns a resolution to upsample to, or
        None. During append everything stays at its initial value."""
        self.iter_in_phase += 1
        if self.phase == "append":
            return None
        i = min(self.iter_in_phase, self.refine_total)
        self.lr_factor = self.decay_target ** (i / self.refine_total)
        self.w_flow = self.w_flow0 * self.lr_factor
        self.w_depth = self.w_depth0 * self.lr_factor
        target = None
        while (
            self.next_milestone < len(self.milestones)
            and self.milestones[self.next_milestone] == self.iter_in_phase
        ):
            target = self.upsample_resolutions[self.next_milestone]
            self.next_milestone += 1
        if target is not None:
            self.resolution = target
        return target

    def state_dict(self):
        return {
            "iters_per_append": self.iters_per_append,
            "refine_iters_per_frame": self.refine_iters_per_frame,
            "decay_target": self.decay_target,
            "w_flow0": self.w_flow0,
            "w_depth0": self.w_depth0,
            "base_resolution": self.base_resolution,
            "upsample_resolutions": list(self.upsample_resolutions),
            "phase": self.phase,
            "iter_in_phase": self.iter_in_phase,
            "refine_total": self.refine_total,
            "lr_factor": self.lr_factor,
            "w_flow": self.w_flow,
            "w_depth": self.w_depth,
            "resolution": self.resolution,
            "milestones": list(self.milestones),
            "next_milestone": self.next_milestone,
        }

    @classmethod
    def from_state_dict(cls, d):
        s = cls(
            iters_per_append=d["iters_per_append"],
            refine_iters_per_frame=d["refine_iters_per_frame"],
            decay_target=d["decay_target"],
            w_flow0=d["w_flow0"],
            w_depth0=d["w_depth0"],
            base_resolution=d["base_resolution"],
            upsample_resolutions=tuple(d["upsample_resolutions"]),
        )
        s.phase = d["phase"]
        s.iter_in_phase = d["iter_in_phase"]
        s.refine_total = d["refine_total"]
        s.lr_factor = d["lr_factor"]
        s.w_flow = d["w_flow"]
        s.w_depth = d["w_depth"]
        s.resolution = d["resolution"]
        s.milestones = list(d["milestones"])
        s.next_milestone = d["next_milestone"]
        return s
