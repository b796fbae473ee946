"""Progressive joint optimization of camera poses and a chain of local
radiance fields.

The run alternates two phases per field. In the append phase the next
frame's pose is registered (copied from the previous one) every
``iters_per_append`` iterations while all learning rates, loss weights
and the grid resolution stay at their initial values. Once the newest
pose leaves the unit cube of the current field's uncontracted space, a
refine phase runs ``refine_iters_per_frame * owned_frames`` iterations
with exponential decay and grid upsampling, after which the field is
frozen, a new one is allocated at the newest pose, the last
``overlap_frames`` frames are shared with linearly ramped blend weights,
and frames that no longer supervise the live field are released.

Gradients are fully analytic end to end; the single optimization thread
owns all state, so every reduction has a fixed order and runs are
reproducible bit for bit under a fixed seed.
"""

import json
import os
import time

import numpy as np

from . import dataio
from .dataio import Config, Dataset, FramePool, read_blob, write_blob
from .errors import EngineError, NoFramesLeft, TooFewFrames
from .field import (
    FIELD_PARAM_NAMES,
    FieldGrads,
    LocalField,
    field_create,
    field_freeze,
    field_upsample,
)
from .geometry import (
    Intrinsics,
    Pose,
    format_pose_line,
    generate_rays,
    generate_rays_vjp,
    rot6d_to_matrix,
    rot6d_to_matrix_vjp,
)
from .losses import (
    depth_loss,
    depth_loss_grad,
    flow_loss,
    flow_loss_grad,
    photometric_loss,
    photometric_loss_grad,
    render_flow_batch,
    render_flow_batch_vjp,
    total_loss,
)
from .optim import Adam, Schedule
from .renderer import render_batch, render_batch_vjp, render_image, sample_rays


def blend_weights(i: int, overlap: int):
    """(w_old, w_new) for overlap rank i in [0, overlap).

    The new field's weight ramps linearly and stays strictly inside
    (0, 1) so the handoff is continuous with both exclusive regions.
    """
    from .errors import IndexOutOfOverlap

    if not 0 <= i < overlap:
        raise IndexOutOfOverlap(f"rank {i} outside overlap of {overlap}")
    w_new = (i + 1) / (overlap + 1)
    return 1.0 - w_new, w_new


def simulate_allocations(translations, threshold=1.0):
    """Brute-force oracle for the allocation rule over a sequence of
    camera translations: returns the indices at which a new field is
    allocated (field count = len(result) + 1)."""
    center = np.zeros(3)
    out = []
    for i, t in enumerate(translations):
        if np.max(np.abs(np.asarray(t) - center)) >= threshold:
            out.append(i)
            center = np.asarray(t, dtype=np.float64).copy()
    return out


class ProgressiveTrainer:
    """Owns the full trajectory state; see the module docstring."""

    def __init__(self, dataset: Dataset, config: Config | None = None,
                 out_dir=None):
        self.dataset = dataset
        self.cfg = config or Config()
        self.out_dir = out_dir
        self.pool = FramePool(dataset)
        if self.cfg.holdout_every > 0:
            self.holdout = [
                i for i in range(dataset.n_frames)
                if i % self.cfg.holdout_every == 0
            ]
        else:
            self.holdout = []
        hold = set(self.holdout)
        self.train_indices = [i for i in range(dataset.n_frames) if i not in hold]

        focal = dataset.focal_init
        if focal is None:
            focal = dataset.width / (2.0 * np.tan(np.deg2rad(self.cfg.fov_deg) / 2))
        self.intr = Intrinsics(dataset.width, dataset.height,
                               focal=np.array([float(focal)]))

        self.rng = np.random.default_rng(self.cfg.seed)
        self.adam = Adam(
            lrs={
                "rotations": self.cfg.lr_rotations,
                "translations": self.cfg.lr_translations,
                "focal": self.cfg.lr_focal,
                "field_density": self.cfg.lr_field_density,
                "field_appearance": self.cfg.lr_field_appearance,
            },
            beta1=self.cfg.beta1,
            beta2=self.cfg.beta2,
            eps=self.cfg.adam_eps,
        )
        self.schedule = Schedule(
            iters_per_append=self.cfg.iters_per_append,
            refine_iters_per_frame=self.cfg.refine_iters_per_frame,
            decay_target=self.cfg.decay_target,
            w_flow0=self.cfg.w_flow,
            w_depth0=self.cfg.w_depth,
            base_resolution=self.cfg.base_resolution,
            upsample_resolutions=tuple(self.cfg.upsample_resolutions),
        )

        self.poses: dict[int, Pose] = {}
        self.pose_params: dict[int, tuple] = {}
        self.registered: list[int] = []
        self.fields: list[LocalField] = []
        self.owned: list[list[int]] = []
        self.membership: dict[int, list] = {}
        self.active: list[int] = []
        self.cursor = 0  # next unregistered position in train_indices
        self.mode = "new"  # new | append | refine | done
        self.alloc_pending = False
        self.iters_since_append = 0
        self.global_iter = 0
        self.bg_color = np.full(3, self.cfg.bg_gray)
        self.frozen_checksums: dict[int, int] = {}
        self._field_grads: FieldGrads | None = None
        self.focal_param = None
        # Counters that travel with checkpoints; wall time is kept apart so
        # checkpoints stay bit-identical across equal runs.
        self.report = {
            "flow_terms_skipped_behind": 0,
            "frames_missing_depth": 0,
            "frames_missing_flow": 0,
        }
        self.wall_seconds = 0.0
        self._log_fh = None
        self._log_rows = []
        self.on_log = None  # optional callback for progress display
        if out_dir is not None:
            self.attach_log(out_dir)

    # ------------------------------------------------------------------
    # logging

    def attach_log(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        self.out_dir = out_dir
        self._log_fh = open(os.path.join(out_dir, "run_log.jsonl"), "a")

    def _log(self, row: dict):
        self._log_rows.append(row)
        if self._log_fh is not None:
            self._log_fh.write(json.dumps(row, sort_keys=True) + "\n")
        if self.on_log is not None:
            self.on_log(row)

    def close(self):
        if self._log_fh is not None:
            self._log_fh.close()
            self._log_fh = None

    # ------------------------------------------------------------------
    # construction of trainable state

    def _register_pose(self, idx: int, pose: Pose):
        self.poses[idx] = pose
        rp = self.adam.register("rotations", f"pose/{idx}/rot6", pose.rot6)
        tp = self.adam.register("translations", f"pose/{idx}/trans", pose.trans)
        self.pose_params[idx] = (rp, tp)
        self.registered.append(idx)

    def _register_field_params(self, field: LocalField, j: int):
        self.adam.register("field_density", f"field/{j}/den_planes",
                           field.den_planes, owner=field)
        self.adam.register("field_density", f"field/{j}/den_lines",
                           field.den_lines, owner=field)
        self.adam.register("field_appearance", f"field/{j}/app_planes",
                           field.app_planes, owner=field)
        self.adam.register("field_appearance", f"field/{j}/app_lines",
                           field.app_lines, owner=field)
        self.adam.register("field_appearance", f"field/{j}/basis",
                           field.basis, lr_scale=self.cfg.basis_lr_scale,
                           owner=field)
        self._field_grads = FieldGrads.zeros_like(field)

    # ------------------------------------------------------------------
    # spec operations

    def initialize(self):
        """Seed the trajectory: identity poses and one field at the origin."""
        if len(self.train_indices) < self.cfg.init_frames:
            raise TooFewFrames(
                f"need at least {self.cfg.init_frames} frames, have "
                f"{len(self.train_indices)}"
            )
        if self.focal_param is None:
            self.focal_param = self.adam.register("focal", "focal",
                                                  self.intr.focal)
        f0 = field_create(
            np.zeros(3),
            self.cfg.base_resolution,
            self.cfg.density_components,
            self.cfg.appearance_components,
            seed=self.cfg.seed,
        )
        self.fields.append(f0)
        self.owned.append([])
        self._register_field_params(f0, 0)

        n_seed = (
            len(self.train_indices)
            if not self.cfg.progressive
            else self.cfg.init_frames
        )
        for pos in range(n_seed):
            idx = self.train_indices[pos]
            self._register_pose(idx, Pose.identity())
            self.membership[idx] = [(0, 1.0)]
            self.owned[0].append(idx)
            self.active.append(idx)
            self.pool.acquire(idx)
        self.cursor = n_seed
        self.mode = "append"
        self.iters_since_append = 0
        self._log({"type": "init", "frames": n_seed,
                   "resolution": self.cfg.base_resolution})

    @property
    def current_field_index(self) -> int:
        return len(self.fields) - 1

    def frames_remaining(self) -> bool:
        return self.cursor < len(self.train_indices)

    def append_frame(self):
        """Register the next frame with a copy of the newest pose."""
        if not self.frames_remaining():
            raise NoFramesLeft("all frames registered")
        if self.mode != "append":
            raise EngineError("appends only happen in the append phase")
        if self.iters_since_append < self.cfg.iters_per_append:
            raise EngineError(
                f"append gated: {self.iters_since_append} < "
                f"{self.cfg.iters_per_append} iterations since the last one"
            )
        idx = self.train_indices[self.cursor]
        self.cursor += 1
        last = self.poses[self.registered[-1]]
        self._register_pose(idx, last.copy())
        j = self.current_field_index
        self.membership[idx] = [(j, 1.0)]
        self.owned[j].append(idx)
        self.active.append(idx)
        self.pool.acquire(idx)
        self.iters_since_append = 0
        self._log({"type": "append", "i": self.global_iter, "frame": idx})

    def should_allocate(self) -> bool:
        if not self.cfg.local_fields or not self.registered:
            return False
        t_last = self.poses[self.registered[-1]].trans
        center = self.fields[-1].center
        return bool(np.max(np.abs(t_last - center)) >= self.cfg.alloc_threshold)

    def allocate_field(self):
        """Freeze the current field and start a new one at the newest pose."""
        old = self.fields[-1]
        j_old = self.current_field_index
        field_freeze(old)
        self.frozen_checksums[j_old] = old.checksum()
        self.adam.remove_owner(old)

        center = self.poses[self.registered[-1]].trans.copy()
        j_new = j_old + 1
        new = field_create(
            center,
            self.cfg.base_resolution,
            self.cfg.density_components,
            self.cfg.appearance_components,
            seed=self.cfg.seed + j_new,
        )
        self.fields.append(new)
        self.owned.append([])
        self._register_field_params(new, j_new)

        overlap = self.registered[-min(self.cfg.overlap_frames,
                                       len(self.registered)):]
        o = len(overlap)
        for rank, idx in enumerate(overlap):
            w_old, w_new = blend_weights(rank, o)
            scaled = [(j, w * w_old) for j, w in self.membership[idx]]
            self.membership[idx] = scaled + [(j_new, w_new)]

        new_active = list(overlap)
        for idx in self.active:
            if idx not in set(new_active):
                self.pool.release(idx)
        self.active = new_active
        self.schedule.begin_append()
        self.iters_since_append = 0
        self.mode = "append"
        self.alloc_pending = False
        self._log({"type": "alloc", "i": self.global_iter, "field": j_new,
                   "center": [float(c) for c in center], "overlap": o})

    def _begin_refine(self):
        owned = len(self.owned[self.current_field_index])
        self.schedule.begin_refine(max(owned, 1))
        self.mode = "refine"
        self._log({"type": "refine_start", "i": self.global_iter,
                   "field": self.current_field_index,
                   "owned": owned, "total": self.schedule.refine_total})

    def _apply_upsample(self, resolution: int):
        j = self.current_field_index
        old = self.fields[j]
        self.adam.remove_owner(old)
        new = field_upsample(old, resolution)
        self.fields[j] = new
        self._register_field_params(new, j)
        self._log({"type": "upsample", "i": self.global_iter,
                   "field": j, "resolution": resolution})

    # ------------------------------------------------------------------
    # one optimization step

    def train_iteration(self):
        """Sample a ray batch, render, compute losses, backprop, step."""
        if not self.active:
            raise EngineError("no active frames")
        target = self.schedule.tick()
        if target is not None:
            self._apply_upsample(target)
        self.adam.set_lr_factor(self.schedule.lr_factor)

        self._check_invariants()
        frames = self._choose_frames()
        batch = self._build_batch(frames)
        losses = self._forward_backward(batch)
        self.adam.step()

        self.global_iter += 1
        self.iters_since_append += 1
        self._log({
            "type": "iter",
            "i": self.global_iter,
            "field": self.current_field_index,
            "phase": self.schedule.phase,
            "phase_iter": self.schedule.iter_in_phase,
            "lr_rot": self.adam.groups["rotations"].lr,
            "lr_trans": self.adam.groups["translations"].lr,
            "w_flow": self.schedule.w_flow,
            "w_depth": self.schedule.w_depth,
            "resolution": self.fields[-1].resolution,
            "loss": losses["total"],
            "photo": losses["photo"],
        })
        return losses

    def _check_invariants(self):
        assert sum(not f.frozen for f in self.fields) == 1
        for idx in self.active:
            w = sum(w for _, w in self.membership[idx])
            assert abs(w - 1.0) < 1e-9, f"blend weights of frame {idx} sum to {w}"

    def _choose_frames(self):
        k = min(self.cfg.frames_per_batch, len(self.active))
        pool = np.array(sorted(self.active))
        chosen = self.rng.choice(pool, size=k, replace=False)
        return np.sort(chosen)

    def _build_batch(self, frames):
        """Assemble per-ray arrays for the chosen frames."""
        cfg = self.cfg
        n_frames = len(frames)
        base = cfg.batch_rays // n_frames
        extra = cfg.batch_rays - base * n_frames
        counts = [base + (1 if i < extra else 0) for i in range(n_frames)]

        w, h = self.dataset.width, self.dataset.height
        origins = []
        dirs = []
        gencaches = {}
        slices = {}
        colors = []
        pix_u = {}
        pix_v = {}
        pos = 0
        for idx, count in zip(frames, counts):
            data = self.pool.acquire(int(idx))
            pix = self.rng.integers(0, w * h, size=count)
            u = (pix % w).astype(np.float64) + 0.5
            v = (pix // w).astype(np.float64) + 0.5
            o, d, cache = generate_rays(self.intr, self.poses[int(idx)], u, v)
            origins.append(o)
            dirs.append(d)
            gencaches[int(idx)] = cache
            slices[int(idx)] = slice(pos, pos + count)
            colors.append(data["color"].reshape(-1, 3)[pix])
            pix_u[int(idx)] = u
            pix_v[int(idx)] = v
            pos += count
        return {
            "frames": [int(i) for i in frames],
            "origins": np.concatenate(origins),
            "dirs": np.concatenate(dirs),
            "gencaches": gencaches,
            "slices": slices,
            "colors": np.concatenate(colors),
            "pix_u": pix_u,
            "pix_v": pix_v,
        }

    def _forward_backward(self, batch):
        cfg = self.cfg
        origins = batch["origins"]
        dirs = batch["dirs"]
        n_rays = origins.shape[0]

        # Per-field ray participation with blend weights.
        involved = sorted({j for idx in batch["frames"]
                           for j, _ in self.membership[idx]})
        weights = []
        samples = []
        for j in involved:
            w_ray = np.zeros(n_rays)
            for idx in batch["frames"]:
                for jj, wv in self.membership[idx]:
                    if jj == j:
                        w_ray[batch["slices"][idx]] = wv
            rows = np.nonzero(w_ray > 0)[0]
            dists = sample_rays(
                origins[rows], dirs[rows], self.fields[j].center,
                near=cfg.near, n_fg=cfg.n_fg, n_bg=cfg.n_bg, rng=self.rng,
            )
            weights.append(w_ray)
            samples.append((rows, dists))
        fields = [self.fields[j] for j in involved]

        color, depth, opacity, caches = render_batch(
            fields, weights, origins, dirs, samples,
            far_cap=cfg.far_cap, bg_color=self.bg_color,
        )

        # ---------------- losses ----------------
        l_photo = photometric_loss(color, batch["colors"])

        depth_rows = []
        depth_ref = []
        depth_groups = []
        for idx in batch["frames"]:
            data = self.pool.acquire(idx)
            if data["depth"] is None:
                continue
            sl = batch["slices"][idx]
            u = batch["pix_u"][idx].astype(np.int64)
            v = batch["pix_v"][idx].astype(np.int64)
            depth_rows.append(np.arange(sl.start, sl.stop))
            depth_ref.append(data["depth"][v, u])
            depth_groups.append(np.full(sl.stop - sl.start, idx))
        if depth_rows:
            depth_rows = np.concatenate(depth_rows)
            depth_ref = np.concatenate(depth_ref)
            depth_groups = np.concatenate(depth_groups)
            l_depth = depth_loss(depth[depth_rows], depth_ref, depth_groups)
        else:
            l_depth = 0.0

        flow_batches = self._flow_terms(batch, depth)
        if flow_batches:
            f_hat_all = np.concatenate([fb["f_hat"] for fb in flow_batches])
            f_obs_all = np.concatenate([fb["f_obs"] for fb in flow_batches])
            valid_all = np.concatenate([fb["valid"] for fb in flow_batches])
            l_flow = flow_loss(f_hat_all, f_obs_all, valid_all)
        else:
            l_flow = 0.0

        total, parts = total_loss(
            l_photo, l_flow, l_depth, self.schedule.w_flow, self.schedule.w_depth
        )

        # ---------------- backward ----------------
        d_color = photometric_loss_grad(color, batch["colors"])
        d_depth = np.zeros(n_rays)
        if isinstance(depth_rows, np.ndarray) and depth_rows.size:
            d_depth[depth_rows] += self.schedule.w_depth * depth_loss_grad(
                depth[depth_rows], depth_ref, depth_groups
            )

        d_rot_mats = {}
        d_trans = {}
        d_focal = 0.0
        if flow_batches:
            d_f_all = self.schedule.w_flow * flow_loss_grad(
                f_hat_all, f_obs_all, valid_all
            )
            off = 0
            for fb in flow_batches:
                m = fb["f_hat"].shape[0]
                d_f = d_f_all[off : off + m]
                off += m
                d_dh, d_rk, d_tk, d_rn, d_tn, d_fc = render_flow_batch_vjp(
                    fb["cache"], d_f
                )
                d_depth[fb["rows"]] += d_dh
                k, n = fb["frame"], fb["neighbor"]
                d_rot_mats[k] = d_rot_mats.get(k, 0.0) + d_rk
                d_trans[k] = d_trans.get(k, 0.0) + d_tk
                d_rot_mats[n] = d_rot_mats.get(n, 0.0) + d_rn
                d_trans[n] = d_trans.get(n, 0.0) + d_tn
                d_focal += d_fc

        self._field_grads.zero_()
        field_grads = [
            self._field_grads if not f.frozen else None for f in fields
        ]
        d_origins, d_dirs = render_batch_vjp(
            fields, caches, d_color, d_depth, field_grads
        )

        for idx in batch["frames"]:
            sl = batch["slices"][idx]
            d_r, d_t, d_f = generate_rays_vjp(
                batch["gencaches"][idx], d_origins[sl], d_dirs[sl]
            )
            d_rot_mats[idx] = d_rot_mats.get(idx, 0.0) + d_r
            d_trans[idx] = d_trans.get(idx, 0.0) + d_t
            d_focal += d_f

        for idx in sorted(d_rot_mats):
            rp, tp = self.pose_params[idx]
            pose = self.poses[idx]
            rp.grad = rot6d_to_matrix_vjp(pose.rot6, d_rot_mats[idx])
            tp.grad = np.asarray(d_trans[idx], dtype=np.float64)
        self.focal_param.grad = np.array([d_focal])

        for pname in FIELD_PARAM_NAMES:
            param = self._find_param(f"field/{self.current_field_index}/{pname}")
            param.grad = getattr(self._field_grads, pname)
        return parts

    def _find_param(self, name):
        for p in self.adam.iter_params():
            if p.name == name:
                return p
        raise KeyError(name)

    def _flow_terms(self, batch, depth):
        """Forward flow predictions for every (frame, neighbor) pair with a
        registered neighbor pose and an available flow map."""
        out = []
        w = self.dataset.width
        mats = {
            idx: rot6d_to_matrix(self.poses[idx].rot6)
            for idx in set(batch["frames"])
        }
        for idx in batch["frames"]:
            data = self.pool.acquire(idx)
            for direction, delta in (("flow_fwd", 1), ("flow_bwd", -1)):
                fmap = data[direction]
                if fmap is None:
                    continue
                nb = idx + delta
                if nb not in self.poses:
                    continue
                if nb not in mats:
                    mats[nb] = rot6d_to_matrix(self.poses[nb].rot6)
                sl = batch["slices"][idx]
                rows = np.arange(sl.start, sl.stop)
                u = batch["pix_u"][idx]
                v = batch["pix_v"][idx]
                f_hat, valid, cache = render_flow_batch(
                    self.intr,
                    mats[idx],
                    self.poses[idx].trans,
                    mats[nb],
                    self.poses[nb].trans,
                    u,
                    v,
                    depth[rows],
                )
                self.report["flow_terms_skipped_behind"] += int((~valid).sum())
                ui = u.astype(np.int64)
                vi = v.astype(np.int64)
                out.append({
                    "frame": idx,
                    "neighbor": nb,
                    "rows": rows,
                    "f_hat": f_hat,
                    "f_obs": fmap[vi, ui],
                    "valid": valid,
                    "cache": cache,
                })
        return out

    # ------------------------------------------------------------------
    # phase loop

    def step(self):
        """One iteration plus phase bookkeeping."""
        if self.mode == "new":
            self.initialize()
        if self.mode == "done":
            raise EngineError("run already complete")
        losses = self.train_iteration()
        if self.mode == "append":
            if self.should_allocate():
                self.alloc_pending = True
                self._begin_refine()
            elif self.iters_since_append >= self.cfg.iters_per_append:
                if self.frames_remaining():
                    self.append_frame()
                else:
                    self.alloc_pending = False
                    self._begin_refine()
        elif self.mode == "refine":
            if self.schedule.iter_in_phase >= self.schedule.refine_total:
                self._log({"type": "refine_end", "i": self.global_iter,
                           "field": self.current_field_index})
                if self.alloc_pending and self.frames_remaining():
                    self.allocate_field()
                else:
                    self._finalize()
        return losses

    def _finalize(self):
        last = self.fields[-1]
        if not last.frozen:
            field_freeze(last)
            self.frozen_checksums[self.current_field_index] = last.checksum()
            self.adam.remove_owner(last)
        for idx in list(self.active):
            self.pool.release(idx)
        self.active = []
        self.mode = "done"
        self._log({"type": "done", "i": self.global_iter,
                   "fields": len(self.fields)})

    def run(self, checkpoint_dir=None):
        """Drive the phase loop to completion; returns the loss history
        tail. Writes periodic checkpoints when configured."""
        t0 = time.monotonic()
        if self.mode == "new":
            self.initialize()
        while self.mode != "done":
            self.step()
            if (
                checkpoint_dir
                and self.cfg.checkpoint_every > 0
                and self.global_iter % self.cfg.checkpoint_every == 0
            ):
                self.save_checkpoint(checkpoint_dir)
        self.wall_seconds += time.monotonic() - t0
        if checkpoint_dir:
            self.save_checkpoint(checkpoint_dir)
            self.write_report(checkpoint_dir)
        return self.report

    # ------------------------------------------------------------------
    # evaluation-time operations

    def routing_weights(self, frame_idx: int):
        """Blend weights for rendering an arbitrary view: those of the
        temporally nearest registered training frame."""
        nearest = min(self.registered, key=lambda r: (abs(r - frame_idx), r))
        return self.membership[nearest]

    def render_view(self, pose: Pose, routing_frame: int, n_fg=None, n_bg=None):
        member = self.routing_weights(routing_frame)
        fields = [self.fields[j] for j, _ in member]
        weights = [w for _, w in member]
        return render_image(
            fields,
            weights,
            pose,
            self.intr,
            near=self.cfg.near,
            n_fg=n_fg or self.cfg.n_fg,
            n_bg=n_bg or self.cfg.n_bg,
            far_cap=self.cfg.far_cap,
            bg_color=self.bg_color,
        )

    def register_test_pose(self, frame_idx: int, iters=None):
        """Localize a held-out frame against the frozen reconstruction.

        Photometric-only optimization of a fresh pose initialized from the
        temporally nearest registered frame; fields and focal stay fixed
        (checksum-verified).
        """
        if any(not f.frozen for f in self.fields):
            raise EngineError("test poses require a finished reconstruction")
        iters = iters or self.cfg.test_pose_iters
        sums_before = [f.checksum() for f in self.fields]
        focal_before = self.intr.focal.copy()

        nearest = min(self.registered, key=lambda r: (abs(r - frame_idx), r))
        pose = self.poses[nearest].copy()
        member = self.routing_weights(frame_idx)
        fields = [self.fields[j] for j, _ in member]

        opt = Adam(
            lrs={"rotations": self.cfg.lr_rotations,
                 "translations": self.cfg.lr_translations},
            beta1=self.cfg.beta1, beta2=self.cfg.beta2, eps=self.cfg.adam_eps,
        )
        rp = opt.register("rotations", "rot6", pose.rot6)
        tp = opt.register("translations", "trans", pose.trans)

        color_map = self.dataset.load_color(frame_idx).reshape(-1, 3)
        w, h = self.dataset.width, self.dataset.height
        cfg = self.cfg
        for it in range(iters):
            opt.set_lr_factor(cfg.decay_target ** ((it + 1) / iters))
            pix = self.rng.integers(0, w * h, size=cfg.batch_rays)
            u = (pix % w).astype(np.float64) + 0.5
            v = (pix // w).astype(np.float64) + 0.5
            origins, dirs, gcache = generate_rays(self.intr, pose, u, v)
            weights = []
            samples = []
            for (j, wv) in member:
                rows = np.arange(cfg.batch_rays)
                dists = sample_rays(
                    origins, dirs, self.fields[j].center,
                    near=cfg.near, n_fg=cfg.n_fg, n_bg=cfg.n_bg, rng=self.rng,
                )
                weights.append(np.full(cfg.batch_rays, wv))
                samples.append((rows, dists))
            color, depth, _, caches = render_batch(
                fields, weights, origins, dirs, samples,
                far_cap=cfg.far_cap, bg_color=self.bg_color,
            )
            target = color_map[pix]
            d_color = photometric_loss_grad(color, target)
            d_o, d_d = render_batch_vjp(
                fields, caches, d_color, None, [None] * len(fields)
            )
            d_r, d_t, _ = generate_rays_vjp(gcache, d_o, d_d)
            rp.grad = rot6d_to_matrix_vjp(pose.rot6, d_r)
            tp.grad = d_t
            opt.step()

        assert [f.checksum() for f in self.fields] == sums_before
        assert np.array_equal(self.intr.focal, focal_before)
        return pose

    def export_poses(self, path):
        with open(path, "w") as f:
            for idx in sorted(self.registered):
                f.write(format_pose_line(idx, self.poses[idx]) + "\n")

    # ------------------------------------------------------------------
    # checkpointing

    def save_checkpoint(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        for j, f in enumerate(self.fields):
            entries = [("meta", {
                "center": [float(c) for c in f.center],
                "resolution": f.resolution,
                "frozen": f.frozen,
            })]
            entries += [(n, getattr(f, n)) for n in FIELD_PARAM_NAMES]
            write_blob(os.path.join(out_dir, f"field_{j:03d}.ckpt"), entries)

        adam_meta = []
        arrays = []
        for gid, group in self.adam.groups.items():
            for p in group.params:
                adam_meta.append({
                    "name": p.name, "group": gid,
                    "lr_scale": p.lr_scale, "step": p.step,
                })
                arrays.append((f"adam/{p.name}/m", p.m))
                arrays.append((f"adam/{p.name}/v", p.v))
        meta = {
            "config": self.cfg.to_text(),
            "registered": self.registered,
            "holdout": self.holdout,
            "cursor": self.cursor,
            "mode": self.mode,
            "alloc_pending": self.alloc_pending,
            "iters_since_append": self.iters_since_append,
            "global_iter": self.global_iter,
            "owned": self.owned,
            "membership": {str(k): v for k, v in self.membership.items()},
            "active": self.active,
            "frozen_checksums": {str(k): v for k, v in
                                 self.frozen_checksums.items()},
            "schedule": self.schedule.state_dict(),
            "adam": adam_meta,
            "skipped_nonfinite": self.adam.skipped_nonfinite,
            "rng_state": self.rng.bit_generator.state,
            "report": self.report,
            "width": self.dataset.width,
            "height": self.dataset.height,
            "n_fields": len(self.fields),
        }
        poses = np.stack([
            np.concatenate([self.poses[i].rot6, self.poses[i].trans])
            for i in self.registered
        ]) if self.registered else np.zeros((0, 9))
        entries = [("meta", meta), ("poses", poses),
                   ("focal", self.intr.focal)] + arrays
        write_blob(os.path.join(out_dir, "trajectory.ckpt"), entries)

    def write_report(self, out_dir):
        rep = dict(self.report)
        rep.update({
            "wall_seconds": self.wall_seconds,
            "n_fields": len(self.fields),
            "registered_frames": len(self.registered),
            "holdout": self.holdout,
            "peak_resident_frames": self.pool.peak_resident,
            "released_frames": self.pool.released_total,
            "depth_values_clamped": self.pool.depth_clamped,
            "skipped_nonfinite_grads": self.adam.skipped_nonfinite,
            "iterations": self.global_iter,
            "max_owned_frames": max((len(o) for o in self.owned), default=0),
            "overlap_frames": self.cfg.overlap_frames,
        })
        with open(os.path.join(out_dir, "run_report.json"), "w") as f:
            json.dump(rep, f, indent=2, sort_keys=True)
        return rep

    @classmethod
    def load_checkpoint(cls, dataset: Dataset, ckpt_dir) -> "ProgressiveTrainer":
        meta_blob = read_blob(os.path.join(ckpt_dir, "trajectory.ckpt"))
        meta = meta_blob["meta"]
        cfg = Config()
        cfg.update_from_text(meta["config"])
        tr = cls(dataset, cfg)
        tr.holdout = list(meta["holdout"])
        hold = set(tr.holdout)
        tr.train_indices = [i for i in range(dataset.n_frames) if i not in hold]

        tr.intr.focal[:] = meta_blob["focal"]
        tr.focal_param = tr.adam.register("focal", "focal", tr.intr.focal)

        n_fields = meta["n_fields"]
        for j in range(n_fields):
            blob = read_blob(os.path.join(ckpt_dir, f"field_{j:03d}.ckpt"))
            fmeta = blob["meta"]
            f = LocalField(
                center=np.array(fmeta["center"]),
                resolution=fmeta["resolution"],
                **{n: blob[n].copy() for n in FIELD_PARAM_NAMES},
            )
            tr.fields.append(f)
            if fmeta["frozen"]:
                field_freeze(f)
            else:
                tr._register_field_params(f, j)
        tr.owned = [list(o) for o in meta["owned"]]

        poses = meta_blob["poses"]
        for row, idx in zip(poses, meta["registered"]):
            tr._register_pose(int(idx), Pose(rot6=row[:6].copy(),
                                             trans=row[6:].copy()))
        tr.membership = {int(k): [(int(j), float(w)) for j, w in v]
                         for k, v in meta["membership"].items()}
        tr.active = [int(i) for i in meta["active"]]
        for idx in tr.active:
            tr.pool.acquire(idx)
        tr.frozen_checksums = {int(k): int(v) for k, v in
                               meta["frozen_checksums"].items()}
        tr.cursor = meta["cursor"]
        tr.mode = meta["mode"]
        tr.alloc_pending = meta["alloc_pending"]
        tr.iters_since_append = meta["iters_since_append"]
        tr.global_iter = meta["global_iter"]
        tr.schedule = Schedule.from_state_dict(meta["schedule"])
        tr.adam.skipped_nonfinite = meta["skipped_nonfinite"]
        tr.report = dict(meta["report"])

        by_name = {}
        for gid, group in tr.adam.groups.items():
            for p in group.params:
                by_name[p.name] = p
        for entry in meta["adam"]:
            p = by_name[entry["name"]]
            p.step = entry["step"]
            p.lr_scale = entry["lr_scale"]
            p.m[...] = meta_blob[f"adam/{entry['name']}/m"]
            p.v[...] = meta_blob[f"adam/{entry['name']}/v"]

        state = meta["rng_state"]
        tr.rng.bit_generator.state = state
        return tr


# ---------------------------------------------------------------------------
# schedule conformance checking

def verify_schedule_log(rows, cfg: Config):
    """Check a run log against the scheduling contract. Returns a list of
    violation strings (empty = conformant)."""
    bad = []
    iters = [r for r in rows if r.get("type") == "iter"]
    if not iters:
        return ["log contains no iterations"]

    if iters[0]["resolution"] != cfg.base_resolution:
        bad.append(
            f"run starts at resolution {iters[0]['resolution']}, "
            f"expected {cfg.base_resolution}"
        )
    final_res = cfg.upsample_resolutions[-1]
    if iters[-1]["resolution"] != final_res:
        bad.append(
            f"run ends at resolution {iters[-1]['resolution']}, "
            f"expected {final_res}"
        )

    for r in iters:
        if r["phase"] == "append":
            if abs(r["lr_rot"] - cfg.lr_rotations) > 1e-12 or \
               abs(r["lr_trans"] - cfg.lr_translations) > 1e-12:
                bad.append(f"iter {r['i']}: append-phase lr changed")
                break
            if abs(r["w_flow"] - cfg.w_flow) > 1e-12 or \
               abs(r["w_depth"] - cfg.w_depth) > 1e-12:
                bad.append(f"iter {r['i']}: append-phase loss weight changed")
                break

    # Exponential decay inside each refine segment, with the budget tied
    # to the owned-frame count.
    refine_meta = {r["i"]: (r["total"], r["owned"])
                   for r in rows if r.get("type") == "refine_start"}
    seg_total = None
    for r in iters:
        if r["phase"] != "refine":
            continue
        if r["phase_iter"] == 1:
            meta = refine_meta.get(r["i"] - 1)
            if meta is None:
                bad.append(f"refine iteration {r['i']} without refine_start")
                break
            seg_total, owned = meta
            if seg_total != cfg.refine_iters_per_frame * max(owned, 1):
                bad.append(
                    f"refine at iter {r['i']}: budget {seg_total} is not "
                    f"{cfg.refine_iters_per_frame} x {owned}"
                )
        if seg_total is None:
            bad.append(f"refine iteration {r['i']} before any refine_start")
            break
        want = cfg.lr_rotations * cfg.decay_target ** (
            min(r["phase_iter"], seg_total) / seg_total
        )
        if abs(r["lr_rot"] - want) > 1e-9 * max(want, 1e-12):
            bad.append(f"iter {r['i']}: refine lr {r['lr_rot']} != {want}")
            break

    # Final refine value reaches the decay target exactly.
    last_refine = [r for r in iters if r["phase"] == "refine"]
    if last_refine:
        r = last_refine[-1]
        want = cfg.lr_rotations * cfg.decay_target
        if abs(r["lr_rot"] - want) > 1e-9:
            bad.append(f"final refine lr {r['lr_rot']} != {want}")

    # Appends spaced exactly by the append budget within each segment
    # (segments restart at init and at every allocation).
    marker = None
    for r in rows:
        t = r.get("type")
        if t == "init":
            marker = 0
        elif t == "alloc":
            marker = r["i"]
        elif t == "append":
            if marker is not None and r["i"] - marker != cfg.iters_per_append:
                bad.append(
                    f"append at iter {r['i']}: {r['i'] - marker} iterations "
                    f"after the segment marker, expected {cfg.iters_per_append}"
                )
                break
            marker = r["i"]
    return bad


def load_log(path):
    rows = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows
