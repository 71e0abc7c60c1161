"""Variant x seed sweeps with an on-disk result cache.

A result is keyed by the full config echo plus a hash of the modules that
influence training, so editing docs or the CLI does not force a retrain
while any change to the maths does.
"""
from __future__ import annotations

import ast
import hashlib
import json
import time
from dataclasses import replace
from pathlib import Path
from typing import Callable, Iterable, Optional

from .config import RunConfig
from .metrics import METRIC_NAMES
from .runs import evaluate_run, train_run

TRAINING_MODULES = ("autodiff", "nn", "warp", "networks", "losses", "trainer", "data", "metrics", "inference")


def _strip_docstrings(tree: ast.AST) -> ast.AST:
    for node in ast.walk(tree):
        body = getattr(node, "body", None)
        if isinstance(body, list) and body and isinstance(body[0], ast.Expr) \
                and isinstance(getattr(body[0], "value", None), ast.Constant) and isinstance(body[0].value.value, str):
            node.body = body[1:] or [ast.Pass()]
    return tree


def source_hash(modules: Iterable[str] = TRAINING_MODULES) -> str:
    """Hash of the syntax trees of ``modules`` (comments and docstrings ignored)."""
    here = Path(__file__).parent
    h = hashlib.sha256()
    for name in modules:
        tree = _strip_docstrings(ast.parse((here / f"{name}.py").read_text()))
        h.update(name.encode())
        h.update(ast.dump(tree).encode())
    return h.hexdigest()[:16]


def run_key(cfg: RunConfig) -> str:
    h = hashlib.sha256(cfg.echo().encode())
    h.update(source_hash().encode())
    return h.hexdigest()[:20]


def run_cached(cfg: RunConfig, cache_dir, log: Optional[Callable[[str], None]] = None, force: bool = False) -> dict:
    """Train and evaluate ``cfg`` unless an identical run is cached; returns the result record."""
    cache = Path(cache_dir)
    key = run_key(cfg)
    rec_path = cache / f"{key}.json"
    if rec_path.exists() and not force:
        return json.loads(rec_path.read_text())
    run_dir = cache / key
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg = replace(cfg, out_dir=str(run_dir))
    t0 = time.perf_counter()
    with open(run_dir / "train.log", "w") as fh:
        def write(line):
            fh.write(line + "\n")
            fh.flush()
            if log is not None:
                log(line)
        trainer = train_run(cfg, log=write)
    seconds = time.perf_counter() - t0
    report = evaluate_run(trainer.model, cfg)
    record = {
        "key": key, "variant": cfg.train.variant, "seed": cfg.train.seed, "steps": trainer.step,
        "train_seconds": round(seconds, 1), "source_hash": source_hash(), "metrics": report.as_dict(),
        "report": report.format_line(), "run_dir": str(run_dir),
    }
    rec_path.write_text(json.dumps(record, indent=1))
    return record


def variant_config(base: RunConfig, variant: str, seed: int) -> RunConfig:
    """``base`` retargeted to one variant and seed.

    Half-cycle variants keep the same total number of steps, all spent on
    the single generator, so every variant gets equal generator updates.
    """
    t = base.train
    return replace(base, train=replace(t, variant=variant, seed=seed))


def sweep(base: RunConfig, variants: Iterable[str], seeds: Iterable[int], cache_dir,
          log: Optional[Callable[[str], None]] = None) -> list:
    return [run_cached(variant_config(base, v, s), cache_dir, log) for v in variants for s in seeds]


def format_table(records: list) -> str:
    cols = ("variant", "seed") + METRIC_NAMES
    lines = ["  ".join(f"{c:>9}" for c in cols)]
    for r in records:
        vals = [r["variant"], str(r["seed"])] + [f"{r['metrics'][m]:.4f}" for m in METRIC_NAMES]
        lines.append("  ".join(f"{v:>9}" for v in vals))
    return "\n".join(lines)
