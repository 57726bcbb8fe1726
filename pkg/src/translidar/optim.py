"""Gradients, Adam, the two-stage learning-rate schedule, and training.

The reverse-mode tape lives in `autodiff`; this module re-exports its
surface, adds a finite-difference gradient checker, a bias-corrected Adam
update with a positivity clamp for the sharpness, and the training loop that
assembles the render-and-loss pipeline per step.
"""

from __future__ import annotations

import csv
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .autodiff import Node, Tape, backward, value_of
from .errors import DomainError, NumericalAbortError
from .field import (CoarseToFineSchedule, SHARPNESS_FLOOR, active_levels,
                    fd_eps_at, fd_eps_bounds, init_sphere_grid, load_field,
                    save_field)
from .geometry import pixel_directions, sample_unseen_camera
from .losses import (LossWeights, lambda_ref_for_photon_level,
                     loss_eikonal_nodes, loss_reflectivity_nodes,
                     loss_space_carving_nodes, loss_sparsity_nodes,
                     loss_transient_l1_nodes, loss_weight_variance_nodes)
from .metrics import l1_depth_masked, log_matched_depth_map
from .renderer import (PulseKernel, RenderConfig, _thread_count, march_nodes,
                       make_leaves, render_view, transient_nodes)

logger = logging.getLogger("translidar.optim")

__all__ = ["Tape", "Node", "backward", "grad_check", "GradCheckReport",
           "AdamState", "adam_step", "LrSchedule", "lr_at", "default_warmup",
           "train", "field_params"]


# ---------------------------------------------------------------------------
# gradient checking

@dataclass
class GradCheckReport:
    max_rel_err: float
    failures: list

    @property
    def passed(self):
        return not self.failures


def _rel_err(a, b):
    if abs(a) < 1e-10 and abs(b) < 1e-10:
        return 0.0
    return abs(a - b) / max(abs(a), abs(b))


def grad_check(build, params, eps=1e-4, tol=1e-4, n_probe=50, rng=None):
    """Compare taped gradients against central finite differences.

    `build(params)` must return (tape, scalar loss node) built freshly from
    the given parameter arrays. Probed coordinates are drawn with
    probability proportional to parameter size.
    """
    if not eps > 0:
        raise DomainError("eps must be positive")
    rng = np.random.default_rng(0) if rng is None else rng
    tape, out = build(params)
    grads = backward(tape, out)
    names = list(params)
    sizes = np.array([params[n].size for n in names], dtype=np.float64)
    probs = sizes / sizes.sum()

    max_err = 0.0
    failures = []
    for _ in range(n_probe):
        name = names[rng.choice(len(names), p=probs)]
        idx = int(rng.integers(params[name].size))
        analytic = float(np.asarray(grads[name]).ravel()[idx])

        def perturbed(delta):
            trial = {k: v.copy() for k, v in params.items()}
            trial[name].ravel()[idx] += delta
            _, node = build(trial)
            return float(node.value)

        numeric = (perturbed(eps) - perturbed(-eps)) / (2.0 * eps)
        err = _rel_err(analytic, numeric)
        max_err = max(max_err, err)
        if err > tol:
            failures.append((name, idx, analytic, numeric, err))
    return GradCheckReport(max_err, failures)


# ---------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    skipped: int = 0

    @classmethod
    def for_params(cls, params, **kw):
        return cls(m={k: np.zeros_like(v) for k, v in params.items()},
                   v={k: np.zeros_like(v) for k, v in params.items()}, **kw)


def adam_step(state, params, grads, lr, positive=("s",), lr_scale=None):
    """One bias-corrected Adam update, in place.

    A non-finite gradient anywhere skips the whole update (the step counter
    still advances and the incident is logged). Parameters named in
    `positive` are floored at a small positive value after the update.
    `lr_scale` maps parameter names to per-group learning-rate multipliers;
    unlisted names use `lr` as-is.
    """
    state.step += 1
    for name in params:
        if not np.all(np.isfinite(grads[name])):
            state.skipped += 1
            logger.warning("skipping update at step %d: non-finite gradient in %r",
                           state.step, name)
            return state
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        lr_n = lr if lr_scale is None else lr * lr_scale.get(name, 1.0)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        buf = np.empty_like(m)
        np.multiply(g, 1.0 - state.beta1, out=buf)
        m += buf
        np.multiply(g, g, out=buf)
        buf *= 1.0 - state.beta2
        v *= state.beta2
        v += buf
        np.divide(v, c2, out=buf)
        np.sqrt(buf, out=buf)
        buf += state.eps
        np.divide(m, buf, out=buf)
        buf *= lr_n / c1
        p -= buf
        if name in positive:
            np.maximum(p, SHARPNESS_FLOOR, out=p)
    return state


# ---------------------------------------------------------------------------
# learning-rate schedule

@dataclass
class LrSchedule:
    total_steps: int
    warmup_steps: int = 5000
    lr_start: float = 1e-5
    lr_peak: float = 1e-3
    decay_factor: float = 0.01

    def __post_init__(self):
        if not (0 < self.lr_start < self.lr_peak):
            raise DomainError("need 0 < lr_start < lr_peak")
        if not (0 < self.warmup_steps < self.total_steps):
            raise DomainError("need 0 < warmup_steps < total_steps")
        if not (0 < self.decay_factor <= 1):
            raise DomainError("decay_factor must lie in (0, 1]")


def lr_at(schedule, step):
    """Linear warmup to the peak, then geometric decay to peak * decay_factor."""
    if step < 0 or step > schedule.total_steps:
        raise DomainError("step outside [0, total_steps]")
    if step <= schedule.warmup_steps:
        frac = step / schedule.warmup_steps
        return schedule.lr_start + (schedule.lr_peak - schedule.lr_start) * frac
    frac = (step - schedule.warmup_steps) / (schedule.total_steps - schedule.warmup_steps)
    return schedule.lr_peak * schedule.decay_factor ** frac


def default_warmup(total_steps):
    """Keep the 5000-step warmup for full runs; halve the run for short ones."""
    return 5000 if total_steps >= 10000 else max(1, total_steps // 2)


# ---------------------------------------------------------------------------
# training loop

def field_params(fld):
    """The trainable arrays, in a fixed update order.

    Grid values and feature channels are exposed per level (views into the
    flat storage) to match the per-level leaves the taped march registers.
    """
    out = {}
    for l, res in enumerate(fld.resolutions):
        o, r3 = fld.offsets[l], res ** 3
        out[f"grid_{l}"] = fld.values[o:o + r3]
        out[f"feat0_{l}"] = fld.feat0[o:o + r3]
        out[f"feat1_{l}"] = fld.feat1[o:o + r3]
    out.update({"s": fld.s, "w1": fld.head.w1, "b1": fld.head.b1,
                "w2": fld.head.w2, "b2": fld.head.b2})
    return out


_METRIC_COLUMNS = ["step", "loss", "loss_transient", "loss_reflectivity",
                   "loss_space_carving", "loss_eikonal",
                   "loss_weight_variance", "loss_sparsity", "lr", "depth_l1"]


def _gather_batch(views, poses, counts, vi, px, py, ju, jv):
    """Assemble origins/directions/measured rows for mixed-view ray batches."""
    n = vi.size
    origins = np.empty((n, 3))
    dirs = np.empty((n, 3))
    for v in range(len(poses)):
        sel = vi == v
        if not sel.any():
            continue
        origins[sel] = poses[v].origin
        dirs[sel] = pixel_directions(poses[v], px[sel], py[sel], ju[sel], jv[sel])
    measured = counts[vi, py, px, :]
    return origins, dirs, measured


_TRAIN_BLOCK = 256  # rays per sub-tape; fixed so results are worker-count free


def _sliced(d, limits):
    """Restrict each entry to its active prefix; zero-limit keys drop out."""
    out = {}
    for k, v in d.items():
        n = limits.get(k)
        if n is None or n >= v.size:
            out[k] = v
        elif n:
            out[k] = v[:n]
    return out


def _merge_grads(maps, limits, pool):
    """Sum block gradient maps with a fixed pairwise tree.

    Block maps can differ in keys (shading-free blocks carry no feature
    leaves); missing keys are structural zeros. Entries past a limit are
    zero too (inactive grid levels), so only the active prefix accumulates.
    The tree shape depends only on the block count, keeping results
    identical for any worker count.
    """
    def add_pair(pair):
        a, b = pair
        for k, g in b.items():
            v = a.get(k)
            if v is None:
                a[k] = g
                continue
            n = limits.get(k)
            if n is None or n >= v.size:
                v += g
            elif n:
                v[:n] += g[:n]
        return a
    while len(maps) > 1:
        pairs = list(zip(maps[0::2], maps[1::2]))
        tail = [maps[-1]] if len(maps) % 2 else []
        if pool is None:
            maps = [add_pair(p) for p in pairs] + tail
        else:
            maps = list(pool.map(add_pair, pairs)) + tail
    return maps[0]


def train(dataset, config, out_dir=None, resume=None):
    """Fit a grid field to a transient dataset.

    Per step: a jittered ray batch from the training views is marched on the
    tape, binned, pulse-convolved and exposure-scaled into count units; the
    data terms compare against the measured counts (plus the known constant
    background), the carving term targets below-background bins, Eikonal and
    sparsity act on the batch's sample points, and the weight-variance term
    uses a fresh unseen-view ray batch on the same tape. Coarse-to-fine
    unlocking and the finite-difference step follow their schedules.

    Returns (field, metrics rows). `out_dir` enables checkpoints and the
    metrics CSV. `resume` restores field arrays and the step counter from a
    checkpoint; optimizer moments restart cold.
    """
    man = dataset.manifest
    train_views = [v for v in dataset.views if v.split == "train"]
    held_views = [v for v in dataset.views if v.split != "train"]
    if len(train_views) < 2:
        raise DomainError("need at least 2 training views")

    total = int(config.total_steps)
    ss = np.random.SeedSequence(config.seed)
    r_init, r_ray, r_unseen, r_eval = (np.random.default_rng(s) for s in ss.spawn(4))

    if resume is not None:
        fld, start_step = load_field(resume)
    else:
        fld = init_sphere_grid(config.grid_resolutions, config.init_radius,
                               initial_active=config.initial_levels, rng=r_init)
        start_step = 0

    c2f = CoarseToFineSchedule(config.initial_levels, config.levels_per_unlock,
                               config.unlock_interval, len(fld.resolutions))
    h_coarse, h_fine = fd_eps_bounds(fld)
    warmup = config.warmup_steps if config.warmup_steps is not None else default_warmup(total)
    sched = None
    if total >= 2:
        sched = LrSchedule(total_steps=total, warmup_steps=warmup,
                           lr_start=config.lr_start, lr_peak=config.lr_peak,
                           decay_factor=config.decay_factor)

    weights = LossWeights(
        lambda_ref=(config.lambda_ref if config.lambda_ref is not None
                    else lambda_ref_for_photon_level(man.photon_level)),
        lambda_sc=config.lambda_sc, lambda_eik=config.lambda_eik,
        lambda_weight_var=config.lambda_weight_var,
        lambda_sparse=config.lambda_sparse, alpha_sparse=config.alpha_sparse)

    near = config.near if config.near is not None else man.near
    far = config.far if config.far is not None else man.far
    pulse = PulseKernel(np.asarray(man.pulse_taps))
    b_bin = man.background_per_bin
    k_exp = man.exposure_scale

    poses = [v.pose for v in train_views]
    counts = np.stack([v.transient.data for v in train_views])
    V, H, W, T = counts.shape

    params = field_params(fld)
    state = AdamState.for_params(params)

    writer = fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        fh = open(os.path.join(out_dir, "metrics.csv"), "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=_METRIC_COLUMNS)
        writer.writeheader()

    held_ref = None   # lazy: matched-filter depths of the held-out measurements

    def heldout_depth_l1(fd):
        nonlocal held_ref
        if not held_views:
            return None
        if held_ref is None:
            held_ref = []
            for v in held_views:
                d, valid = log_matched_depth_map(v.transient.data, pulse,
                                                 man.bin_width, man.t0_offset)
                held_ref.append((d, valid & v.mask))
        errs = []
        for v, (ref, m) in zip(held_views, held_ref):
            cfg = RenderConfig(n_samples=config.n_samples, n_bins=T,
                               bin_width=man.bin_width, t0_offset=man.t0_offset,
                               near=near, far=far, n_sub=1, fd_eps=fd,
                               pulse=pulse, exposure_scale=k_exp)
            out = render_view(fld, v.pose, cfg, rng=None)
            # rays that see no surface yet render NaN depth; score the rest
            err = l1_depth_masked(out.depth, ref, m & np.isfinite(out.depth))
            if not np.isnan(err):
                errs.append(err)
        return float(np.mean(errs)) if errs else None

    metrics = []

    def emit(row):
        metrics.append(row)
        if writer is not None:
            out = dict(row)
            if out.get("depth_l1") is None:
                out["depth_l1"] = ""
            writer.writerow(out)
            fh.flush()

    B = int(config.batch_rays)
    U = int(config.unseen_rays)
    S = int(config.n_samples)
    workers = _thread_count()
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    zero_terms = {"loss_transient": 0.0, "loss_reflectivity": 0.0,
                  "loss_space_carving": 0.0, "loss_eikonal": 0.0,
                  "loss_weight_variance": 0.0, "loss_sparsity": 0.0}

    try:
        for step in range(start_step, total):
            fld.active_count = active_levels(step, c2f)
            fd = fd_eps_at(step, total, h_coarse, h_fine)
            lr = lr_at(sched, step) if sched is not None else config.lr_start

            vi = r_ray.integers(0, V, size=B)
            px = r_ray.integers(0, W, size=B)
            py = r_ray.integers(0, H, size=B)
            ju = r_ray.random(B)
            jv = r_ray.random(B)
            origins, dirs, measured = _gather_batch(train_views, poses, counts,
                                                    vi, px, py, ju, jv)
            jm = r_ray.random((B, S))

            if U > 0:
                ucam = sample_unseen_camera(poses, r_unseen)
                ui = r_unseen.integers(0, W, size=U)
                uj = r_unseen.integers(0, H, size=U)
                udirs = pixel_directions(ucam, ui, uj, r_unseen.random(U),
                                         r_unseen.random(U))
                uorig = np.broadcast_to(ucam.origin, udirs.shape)
                ujm = r_unseen.random((U, S))

            # fixed ray blocks on separate tapes; each block's objective is
            # its exact share of the total, so summed gradients are exact
            tasks = [("t", s0, min(B, s0 + _TRAIN_BLOCK))
                     for s0 in range(0, B, _TRAIN_BLOCK)]
            if U > 0:
                tasks += [("u", s0, min(U, s0 + _TRAIN_BLOCK))
                          for s0 in range(0, U, _TRAIN_BLOCK)]

            def run_block(task):
                kind, s0, s1 = task
                tape = Tape()
                leaves = make_leaves(tape, fld, feats=kind == "t")
                terms = dict(zero_terms)
                if kind == "t":
                    share = (s1 - s0) / B
                    m = march_nodes(tape, leaves, fld, origins[s0:s1],
                                    dirs[s0:s1], near, far, S, None, fd,
                                    radiance=True, jitter=jm[s0:s1])
                    tn = transient_nodes(m, man.bin_width, T, man.t0_offset,
                                         pulse, exposure_scale=k_exp)
                    rendered = tn.flux + b_bin
                    meas = measured[s0:s1]
                    l_t = loss_transient_l1_nodes(rendered, meas)
                    l_ref = loss_reflectivity_nodes(rendered, meas)
                    l_sc = loss_space_carving_nodes(tn, meas, b_bin)
                    l_eik = loss_eikonal_nodes(m.grad_norm)
                    l_sp = loss_sparsity_nodes(m.f_center, weights.alpha_sparse)
                    obj = share * l_t \
                        + (weights.lambda_ref * share) * l_ref \
                        + weights.lambda_sc * l_sc \
                        + (weights.lambda_eik * share) * l_eik \
                        + (weights.lambda_sparse * share) * l_sp
                    terms["loss_transient"] = float(l_t.value) * share
                    terms["loss_reflectivity"] = float(l_ref.value) * share
                    terms["loss_space_carving"] = float(l_sc.value)
                    terms["loss_eikonal"] = float(l_eik.value) * share
                    terms["loss_sparsity"] = float(l_sp.value) * share
                else:
                    share = (s1 - s0) / U
                    um = march_nodes(tape, leaves, fld, uorig[s0:s1],
                                     udirs[s0:s1], near, far, S, None, fd,
                                     radiance=False, jitter=ujm[s0:s1],
                                     need_gradient=False)
                    l_wv = loss_weight_variance_nodes(um)
                    obj = (weights.lambda_weight_var * share) * l_wv
                    terms["loss_weight_variance"] = float(value_of(l_wv)) * share
                g = backward(tape, obj)
                g = {k: np.asarray(v, dtype=np.float64) for k, v in g.items()}
                return float(value_of(obj)), terms, g

            if pool is None:
                results = [run_block(t) for t in tasks]
            else:
                results = list(pool.map(run_block, tasks))

            loss_val = float(sum(r[0] for r in results))
            term_vals = dict(zero_terms)
            for _, terms, _ in results:
                for key in term_vals:
                    term_vals[key] += terms[key]
            if not np.isfinite(loss_val):
                if out_dir is not None:
                    save_field(fld, os.path.join(out_dir, "abort.sdfg"), step)
                raise NumericalAbortError(f"non-finite loss at step {step}")

            a = fld.active_count
            limits = {}
            for l, res in enumerate(fld.resolutions):
                lim = res ** 3 if l < a else 0
                limits[f"grid_{l}"] = lim
                limits[f"feat0_{l}"] = lim
                limits[f"feat1_{l}"] = lim
            grads = _merge_grads([r[2] for r in results], limits, pool)
            sub = AdamState(m=_sliced(state.m, limits),
                            v=_sliced(state.v, limits), step=state.step,
                            beta1=state.beta1, beta2=state.beta2,
                            eps=state.eps, skipped=state.skipped)
            adam_step(sub, _sliced(params, limits), _sliced(grads, limits), lr,
                      lr_scale={"s": config.s_lr_scale})
            state.step, state.skipped = sub.step, sub.skipped

            last = step == total - 1
            if step % config.log_interval == 0 or last:
                depth_l1 = None
                if config.eval_interval and (step % config.eval_interval == 0 or last):
                    depth_l1 = heldout_depth_l1(fd)
                emit({"step": step, "loss": loss_val,
                      "lr": lr, "depth_l1": depth_l1, **term_vals})
            if out_dir is not None and config.checkpoint_interval and \
                    (step + 1) % config.checkpoint_interval == 0 and not last:
                save_field(fld, os.path.join(out_dir, f"ckpt_{step + 1:06d}.sdfg"),
                           step + 1)
    finally:
        if pool is not None:
            pool.shutdown(wait=False)
        if fh is not None:
            fh.close()

    if out_dir is not None:
        save_field(fld, os.path.join(out_dir, "final.sdfg"), total)
    return fld, metrics
