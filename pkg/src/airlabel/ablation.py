"""Train/evaluate the component variants on shared data and seeds."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .metrics import TABLE_COLUMNS, evaluate_model
from .model import VARIANTS, ModelConfig, prepare
from .training import TrainConfig, train
from .tree import AirwayTree

log = logging.getLogger(__name__)

DEFAULT_VARIANTS = ("baseline", "f2c", "f2c+ssc", "f2c+abs", "full")
EXTRA_COLUMNS = ("cs_all", "anomaly_precision", "anomaly_recall")


@dataclass(frozen=True)
class AblationConfig:
    variants: tuple[str, ...] = DEFAULT_VARIANTS
    seeds: tuple[int, ...] = (0,)

    def __post_init__(self):
        unknown = [v for v in self.variants if v not in VARIANTS]
        if unknown:
            raise ValueError(f"unknown variant(s) {unknown}; choose from {sorted(VARIANTS)}")
        if not self.variants or not self.seeds:
            raise ValueError("need at least one variant and one seed")


def ablation_suite(train_trees: Sequence[AirwayTree], test_trees: Sequence[AirwayTree],
                   model_cfg: ModelConfig, train_cfg: TrainConfig,
                   cfg: AblationConfig = AblationConfig()) -> dict:
    """Return ``{"runs": [...], "table": [...]}``; table rows are seed means per variant."""
    dtype = model_cfg.torch_dtype
    train_inputs = [prepare(t, dtype) for t in train_trees]
    test_inputs = [prepare(t, dtype) for t in test_trees]
    runs = []
    for variant in cfg.variants:
        for seed in cfg.seeds:
            mc = replace(model_cfg.variant(variant), init_seed=seed)
            tc = replace(train_cfg, seed=seed)
            log.info("ablation: variant %s seed %d", variant, seed)
            t0 = time.perf_counter()
            result = train(train_trees, mc, tc, inputs=train_inputs)
            report, _ = evaluate_model(result.model, test_trees, test_inputs)
            runs.append({"variant": variant, "seed": seed, **report,
                         "final_loss": result.history[-1]["loss"] if result.history else None,
                         "seconds": time.perf_counter() - t0})
    table = []
    for variant in cfg.variants:
        rows = [r for r in runs if r["variant"] == variant]
        row = {"variant": variant}
        for col in TABLE_COLUMNS + EXTRA_COLUMNS:
            row[col] = float(np.nanmean([r[col] for r in rows])) if any(
                not np.isnan(r[col]) for r in rows) else float("nan")
        table.append(row)
    return {"runs": runs, "table": table}


def write_ablation(result: dict, out_dir) -> dict[str, Path]:
    """Table-shaped CSV (variant + 13 metric columns), per-run CSV and JSON."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"table": out / "ablation.csv", "runs": out / "ablation_runs.csv", "json": out / "ablation.json"}
    with open(paths["table"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("variant",) + TABLE_COLUMNS)
        for row in result["table"]:
            w.writerow([row["variant"]] + [f"{row[c]:.6f}" for c in TABLE_COLUMNS])
    with open(paths["runs"], "w", newline="") as fh:
        w = csv.writer(fh)
        cols = TABLE_COLUMNS + EXTRA_COLUMNS
        w.writerow(("variant", "seed") + cols)
        for r in result["runs"]:
            w.writerow([r["variant"], r["seed"]] + [f"{r[c]:.6f}" for c in cols])
    paths["json"].write_text(json.dumps(result, indent=1, default=float) + "\n", encoding="utf-8")
    return paths
