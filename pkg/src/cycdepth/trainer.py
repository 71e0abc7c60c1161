"""Staged adversarial training of the cycled generators.

Full-cycle variants train in three phases over one global step counter:
``[0, s1)`` first half branch (G_l, D_r), ``[s1, s1+s2)`` second half branch
(G_r, D_l) with G_l frozen, then joint training on the full objective.
Half-cycle variants spend the whole budget in the first phase.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .autodiff import Tensor, flush_subnormals, no_grad
from .checkpoint import load_checkpoint, save_checkpoint
from .data import BatchIterator
from .losses import (LossBreakdown, LossWeights, consistency_loss, gan_d_loss, gan_g_loss, rec_loss,
                     total_generator_loss)
from .networks import VARIANTS, CycleModel
from .warp import LEFT_FROM_RIGHT, RIGHT_FROM_LEFT, warp


@dataclass
class TrainConfig:
    batch_size: int = 4
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 2e-4
    decoupled_weight_decay: bool = False
    stage1_steps: int = 2000
    stage2_steps: int = 2000
    joint_steps: int = 10000
    lr_milestones: tuple = (8000, 10000)
    seed: int = 0
    variant: str = "full"
    freeze_first_in_stage2: bool = True
    flip_augment: bool = True
    checkpoint_every: int = 1000
    keep_checkpoints: int = 2  # periodic checkpoints kept on disk; 0 keeps all
    log_every: int = 50

    def __post_init__(self):
        self.lr_milestones = tuple(int(m) for m in self.lr_milestones)
        if min(self.stage1_steps, self.stage2_steps, self.joint_steps) < 0:
            raise ValueError("step budgets must be nonnegative")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if list(self.lr_milestones) != sorted(self.lr_milestones):
            raise ValueError("lr_milestones must be sorted ascending")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @property
    def total_steps(self) -> int:
        return self.stage1_steps + self.stage2_steps + self.joint_steps


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Halve the step size at every milestone already reached."""
    return cfg.lr * 0.5 ** sum(1 for m in cfg.lr_milestones if m <= step)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict, grads: dict, state: OptimizerState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0,
              decoupled: bool = False) -> None:
    """One bias-corrected Adam update of ``params`` (name -> ndarray) in place.

    Weight decay is an L2 term added to the gradient unless ``decoupled``.
    A non-finite gradient aborts the step before anything is modified.
    Subnormal values in the parameters and moments are flushed to zero; they
    accumulate from squared tiny gradients and slow every later op several-fold.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name}")
    t = state.step + 1
    c1, c2 = 1 - beta1 ** t, 1 - beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if weight_decay and not decoupled:
            g = g + weight_decay * p
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        if weight_decay and decoupled:
            update = update + weight_decay * p
        p -= (lr * update).astype(p.dtype)
        for a in (p, m, v):
            _flush_subnormal(a)
    state.step = t


_SMALLEST_NORMAL = {np.dtype(np.float32): 1.1754944e-38, np.dtype(np.float64): 2.2250738585072014e-308}


def _flush_subnormal(a: np.ndarray) -> None:
    a[np.abs(a) < _SMALLEST_NORMAL[a.dtype]] = 0


class Adam:
    def __init__(self, module, cfg: TrainConfig):
        self.named = list(module.named_parameters())
        self.cfg = cfg
        self.state = OptimizerState()

    def step(self, lr: float) -> None:
        c = self.cfg
        params = {n: p.data for n, p in self.named}
        grads = {n: p.grad for n, p in self.named}
        adam_step(params, grads, self.state, lr, c.beta1, c.beta2, c.adam_eps, c.weight_decay,
                  c.decoupled_weight_decay)

    def zero_grad(self) -> None:
        for _, p in self.named:
            p.zero_grad()


# ---------------------------------------------------------------------------
# trainer
# ---------------------------------------------------------------------------

def format_log_line(step: int, lr: float, b: LossBreakdown) -> str:
    vals = [("rec_r", b.rec_right), ("rec_l", b.rec_left), ("g_r", b.gan_g_right), ("g_l", b.gan_g_left),
            ("d_r", b.gan_d_right), ("d_l", b.gan_d_left), ("con", b.consistency), ("total", b.total)]
    return f"step={step} lr={lr:.6g} " + " ".join(f"{k}={v:.6g}" for k, v in vals)


def parse_log_line(line: str) -> dict:
    out = {}
    for kv in line.split():
        k, v = kv.split("=", 1)
        out[k] = int(v) if k == "step" else float(v)
    return out


class Trainer:
    """Owns the model, its optimizers and the global step counter."""

    def __init__(self, model: CycleModel, dataset, cfg: TrainConfig, weights: LossWeights | None = None,
                 log: Optional[Callable[[str], None]] = None, checkpoint_dir=None):
        if cfg.variant != model.variant:
            raise ValueError(f"config variant {cfg.variant!r} does not match model {model.variant!r}")
        self.model, self.cfg = model, cfg
        self.weights = weights or LossWeights()
        self.batches = BatchIterator(dataset, cfg.batch_size, cfg.seed, shuffle=True, flip=cfg.flip_augment)
        self.opts = {name: Adam(part, cfg) for name, part in model.parts.items()}
        self.step = 0
        self.log = log
        self.checkpoint_dir = checkpoint_dir
        self.substep_hook: Optional[Callable[[str], None]] = None
        self.header_text = ""

    # -- phase bookkeeping -------------------------------------------------
    def phase_at(self, step: int) -> str:
        c = self.cfg
        if not self.model.flags["full_cycle"]:
            return "stage1"
        if step < c.stage1_steps:
            return "stage1"
        if step < c.stage1_steps + c.stage2_steps:
            return "stage2"
        return "joint"

    def _update(self, names, lr: float) -> None:
        for n in names:
            self.opts[n].step(lr)
        if self.substep_hook is not None:
            self.substep_hook("+".join(names))

    def _d_step(self, name: str, real: Tensor, fake: Tensor, lr: float) -> float:
        disc = getattr(self.model, name)
        self.opts[name].zero_grad()
        loss = gan_d_loss(disc(real), disc(fake.detach()))
        loss.backward()
        self._update([name], lr)
        return loss.item()

    def _g_step(self, names, parts: dict, mode: str, lr: float) -> Tensor:
        total = total_generator_loss(parts, self.weights, mode)
        for n in names:
            self.opts[n].zero_grad()
        total.backward()
        self._update(names, lr)
        return total

    # -- single steps ------------------------------------------------------
    def _batch(self):
        left, right = self.batches.batch(self.step)
        return Tensor(left), Tensor(right)

    def step_stage1(self) -> LossBreakdown:
        lr = lr_schedule(self.step, self.cfg)
        m = self.model
        L, R = self._batch()
        _, _, d_r = m.G_l(L, None if m.G_l.monocular else R)
        synth_r = warp(d_r, L, RIGHT_FROM_LEFT)
        b = LossBreakdown()
        if m.D_r is not None:
            b.gan_d_right = self._d_step("D_r", R, synth_r, lr)
        parts = {"rec_right": rec_loss(R, synth_r)}
        if m.D_r is not None:
            parts["gan_g_right"] = gan_g_loss(m.D_r(synth_r))
        total = self._g_step(["G_l"], parts, "half", lr)
        return self._finish(b, parts, total)

    def step_stage2(self) -> LossBreakdown:
        lr = lr_schedule(self.step, self.cfg)
        m = self.model
        L, R = self._batch()
        frozen = self.cfg.freeze_first_in_stage2
        if frozen:
            with no_grad():
                _, _, d_r = m.G_l(L, R)
                synth_r = warp(d_r, L, RIGHT_FROM_LEFT)
        else:
            _, _, d_r = m.G_l(L, R)
            synth_r = warp(d_r, L, RIGHT_FROM_LEFT)
        _, _, d_l = m.G_r(synth_r, L)
        synth_l = warp(d_l, synth_r, LEFT_FROM_RIGHT)
        b = LossBreakdown()
        if m.D_l is not None:
            b.gan_d_left = self._d_step("D_l", L, synth_l, lr)
        parts = {"rec_left": rec_loss(L, synth_l)}
        if m.D_l is not None:
            parts["gan_g_left"] = gan_g_loss(m.D_l(synth_l))
        total = self._g_step(["G_r"] if frozen else ["G_l", "G_r"], parts, "full", lr)
        return self._finish(b, parts, total)

    def step_joint(self) -> LossBreakdown:
        lr = lr_schedule(self.step, self.cfg)
        m = self.model
        L, R = self._batch()
        _, _, d_r = m.G_l(L, R)
        synth_r = warp(d_r, L, RIGHT_FROM_LEFT)
        _, _, d_l = m.G_r(synth_r, L)
        synth_l = warp(d_l, synth_r, LEFT_FROM_RIGHT)
        b = LossBreakdown()
        if m.D_r is not None:
            b.gan_d_right = self._d_step("D_r", R, synth_r, lr)
            b.gan_d_left = self._d_step("D_l", L, synth_l, lr)
        parts = {"rec_right": rec_loss(R, synth_r), "rec_left": rec_loss(L, synth_l),
                 "consistency": consistency_loss(d_l, d_r)}
        if m.D_r is not None:
            parts["gan_g_right"] = gan_g_loss(m.D_r(synth_r))
            parts["gan_g_left"] = gan_g_loss(m.D_l(synth_l))
        total = self._g_step(["G_l", "G_r"], parts, "full", lr)
        return self._finish(b, parts, total)

    def _finish(self, b: LossBreakdown, parts: dict, total) -> LossBreakdown:
        for k, v in parts.items():
            setattr(b, k, v.item())
        b.total = float(total.item())
        return b

    def train_step(self) -> LossBreakdown:
        phase = self.phase_at(self.step)
        b = {"stage1": self.step_stage1, "stage2": self.step_stage2, "joint": self.step_joint}[phase]()
        vals = b.as_dict().values()
        if not all(np.isfinite(v) for v in vals):
            raise FloatingPointError(f"non-finite loss at step {self.step}: {b}")
        lr = lr_schedule(self.step, self.cfg)
        self.step += 1
        if self.log is not None and (self.step % self.cfg.log_every == 0 or self.step == 1):
            self.log(format_log_line(self.step, lr, b))
        if self.checkpoint_dir is not None and self.cfg.checkpoint_every and self.step % self.cfg.checkpoint_every == 0:
            self.save(f"{self.checkpoint_dir}/step_{self.step:06d}.ckpt")
            self._prune_checkpoints()
        return b

    def run(self, n_steps: Optional[int] = None) -> list:
        """Train for ``n_steps`` (default: until the configured budget is spent)."""
        end = self.cfg.total_steps if n_steps is None else self.step + n_steps
        self.model.train()
        with flush_subnormals():
            return [self.train_step() for _ in range(self.step, end)]

    def _run_phase(self, phase: str, n_steps: Optional[int]) -> list:
        c = self.cfg
        bounds = {"stage1": (0, c.stage1_steps), "stage2": (c.stage1_steps, c.stage1_steps + c.stage2_steps),
                  "joint": (c.stage1_steps + c.stage2_steps, c.total_steps)}
        if not self.model.flags["full_cycle"]:
            if phase != "stage1":
                raise ValueError(f"variant {c.variant} has no {phase}")
            bounds["stage1"] = (0, c.total_steps)
        lo, hi = bounds[phase]
        if self.step < lo:
            self.step = lo
        end = hi if n_steps is None else min(hi, self.step + n_steps)
        self.model.train()
        return [self.train_step() for _ in range(self.step, end)]

    def train_stage1(self, n_steps: Optional[int] = None) -> list:
        return self._run_phase("stage1", n_steps)

    def train_stage2(self, n_steps: Optional[int] = None) -> list:
        return self._run_phase("stage2", n_steps)

    def train_joint(self, n_steps: Optional[int] = None) -> list:
        return self._run_phase("joint", n_steps)

    # -- checkpointing -----------------------------------------------------
    def _prune_checkpoints(self) -> None:
        keep = self.cfg.keep_checkpoints
        if keep <= 0:
            return
        for old in sorted(Path(self.checkpoint_dir).glob("step_*.ckpt"))[:-keep]:
            old.unlink()

    def state_arrays(self) -> dict:
        arrays = {}
        for pname, part in self.model.parts.items():
            for n, a in part.state_dict().items():
                arrays[f"{pname}/{n}"] = a
        for oname, opt in self.opts.items():
            for n, _ in opt.named:
                if n in opt.state.m:
                    arrays[f"opt/{oname}/m/{n}"] = opt.state.m[n]
                    arrays[f"opt/{oname}/v/{n}"] = opt.state.v[n]
        return arrays

    def save(self, path, extra_text: str = "") -> None:
        lines = [f"step={self.step}"] + [f"opt_step.{n}={o.state.step}" for n, o in self.opts.items()]
        save_checkpoint(path, self.state_arrays(), "\n".join(lines) + "\n" + (extra_text or self.header_text))

    def load(self, path) -> str:
        arrays, text = load_checkpoint(path)
        self.load_arrays(arrays, text)
        return text

    def load_arrays(self, arrays: dict, text: str) -> None:
        meta = dict(line.split("=", 1) for line in text.splitlines() if "=" in line)
        for pname, part in self.model.parts.items():
            part.load_state_dict({n: arrays[f"{pname}/{n}"] for n in part.state_dict()})
        for oname, opt in self.opts.items():
            opt.state = OptimizerState(step=int(meta.get(f"opt_step.{oname}", 0)))
            for n, p in opt.named:
                key = f"opt/{oname}/m/{n}"
                if key in arrays:
                    opt.state.m[n] = arrays[key].astype(p.data.dtype).copy()
                    opt.state.v[n] = arrays[f"opt/{oname}/v/{n}"].astype(p.data.dtype).copy()
        self.step = int(meta.get("step", 0))


def parameter_digest(module) -> str:
    h = hashlib.sha256()
    for name, p in module.named_parameters():
        h.update(name.encode())
        h.update(p.data.tobytes())
    return h.hexdigest()
