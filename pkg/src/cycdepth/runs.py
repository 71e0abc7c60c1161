"""Glue between a :class:`RunConfig` and the trainer: datasets, runs, restore."""
from __future__ import annotations

import time
from pathlib import Path
from typing import Callable, Optional

from .checkpoint import load_checkpoint
from .config import RunConfig, parse_config_text
from .data import FolderDataset, SyntheticDataset, SyntheticSceneSpec
from .metrics import MetricsReport, evaluate_dataset
from .networks import CycleModel
from .trainer import Trainer

CONFIG_MARK = "# run config"


def scene_spec(cfg: RunConfig) -> SyntheticSceneSpec:
    return SyntheticSceneSpec(width=cfg.data.width, height=cfg.data.height)


def train_dataset(cfg: RunConfig):
    d = cfg.data
    if d.train_dir:
        return FolderDataset(d.train_dir, size=(d.height, d.width))
    return SyntheticDataset(d.synthetic_train, scene_spec(cfg), seed=d.synthetic_seed)


def test_dataset(cfg: RunConfig):
    d = cfg.data
    if d.test_dir:
        return FolderDataset(d.test_dir, size=(d.height, d.width))
    return SyntheticDataset(d.synthetic_test, scene_spec(cfg), seed=d.synthetic_test_seed)


def build_model(cfg: RunConfig) -> CycleModel:
    return CycleModel(cfg.train.variant, cfg.generator, seed=cfg.train.seed, disc_channels=cfg.model.disc_channels)


def header_text(cfg: RunConfig) -> str:
    return f"{CONFIG_MARK}\n{cfg.echo()}"


def config_from_checkpoint_text(text: str) -> RunConfig:
    if CONFIG_MARK not in text:
        raise ValueError("checkpoint carries no run configuration")
    return parse_config_text(text.split(CONFIG_MARK, 1)[1])


def load_model(path) -> tuple:
    """Rebuild the model stored in a checkpoint; returns (model, cfg, step)."""
    arrays, text = load_checkpoint(path)
    cfg = config_from_checkpoint_text(text)
    model = build_model(cfg)
    for pname, part in model.parts.items():
        part.load_state_dict({n: arrays[f"{pname}/{n}"] for n in part.state_dict()})
    meta = dict(line.split("=", 1) for line in text.split(CONFIG_MARK, 1)[0].splitlines() if "=" in line)
    model.eval()
    return model, cfg, int(meta.get("step", 0))


def train_run(cfg: RunConfig, log: Optional[Callable[[str], None]] = None, resume=None,
              dataset=None, checkpoint_dir=None) -> Trainer:
    """Train ``cfg`` to the end of its budget, writing checkpoints under ``out_dir``.

    The config echo is passed to ``log`` first and stored in every checkpoint.
    """
    out = Path(checkpoint_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = build_model(cfg)
    trainer = Trainer(model, dataset if dataset is not None else train_dataset(cfg), cfg.train, cfg.loss,
                      log=log, checkpoint_dir=str(out))
    trainer.header_text = header_text(cfg)
    if log is not None:
        for line in cfg.echo().splitlines():
            log(f"# {line}")
    if resume is not None:
        trainer.load(resume)
        if log is not None:
            log(f"# resumed from {resume} at step {trainer.step}")
    t0 = time.perf_counter()
    trainer.run()
    if log is not None:
        log(f"# finished step={trainer.step} seconds={time.perf_counter() - t0:.1f}")
    trainer.save(out / "final.ckpt")
    return trainer


def evaluate_run(model, cfg: RunConfig, dataset=None) -> MetricsReport:
    return evaluate_dataset(model, dataset if dataset is not None else test_dataset(cfg), cfg.eval)
