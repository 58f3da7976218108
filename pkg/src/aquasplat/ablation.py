"""Ablation grid over the semantic loss and the two-stage schedule."""

from __future__ import annotations

import copy
from pathlib import Path

from .config import TrainConfig
from .train import medium_relative_error, semantic_error, train

# variant -> (semantic loss on, stage-wise schedule on)
VARIANTS = {
    "M1": (False, False),
    "M2": (False, True),
    "M3": (True, False),
    "full": (True, True),
}


def variant_config(cfg: TrainConfig, name: str) -> TrainConfig:
    if name not in VARIANTS:
        raise KeyError(f"unknown ablation variant {name!r}; expected one of {sorted(VARIANTS)}")
    semantic, staged = VARIANTS[name]
    out = copy.deepcopy(cfg)
    if not semantic:
        out.weights.lambda_s = 0.0
    out.stage.enabled = staged
    out.output_dir = str(Path(cfg.output_dir) / name)
    return out


def run_ablation(cfg: TrainConfig, variants=tuple(VARIANTS), *, write_outputs: bool = True, echo=None) -> list[dict]:
    """Train each variant on the same scene; one result row per variant."""
    rows = []
    scene = None
    for name in variants:
        vcfg = variant_config(cfg, name)
        res = train(vcfg, scene=scene, write_outputs=write_outputs)
        scene = res.scene
        row = {"variant": name, **{k: v for k, v in res.final_eval.items() if k != "views"}}
        row["semantic_error"] = semantic_error(res.state.cloud, scene)
        row["n_gaussians"] = res.state.cloud.n
        if scene.ground_truth is not None:
            row["medium_rel_error"] = medium_relative_error(res.state.medium, scene.ground_truth.medium)
        rows.append(row)
        if echo is not None:
            echo(row)
    return rows
