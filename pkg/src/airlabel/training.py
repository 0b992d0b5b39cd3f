"""Training loop, checkpoints and prediction files."""
from __future__ import annotations

import base64
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .config import dataclass_from_dict, dataclass_to_dict
from .errors import NonFiniteLoss, ParseError, SchemaVersionMismatch
from .model import AirwayLabeler, LossWeights, ModelConfig, PredictionBundle, TreeInputs, compute_loss, prepare
from .synth import make_rng
from .tree import AirwayTree, Nomenclature

log = logging.getLogger(__name__)

CHECKPOINT_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-4
    epochs: int = 600
    label_smoothing: float = 0.01
    stage_weights: tuple[float, float] = (1.0, 1.0)
    level_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    subtree_weight: float = 1.0
    anomaly_weight: float = 1.0
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.epochs < 0:
            raise ValueError("lr must be positive and epochs non-negative")
        if not 0 <= self.label_smoothing < 1:
            raise ValueError("label_smoothing must lie in [0, 1)")
        weights = (*self.stage_weights, *self.level_weights, self.subtree_weight, self.anomaly_weight)
        if any(w < 0 for w in weights):
            raise ValueError("loss weights must be non-negative")

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(
            stage=tuple(self.stage_weights),
            level=tuple(self.level_weights),
            subtree=self.subtree_weight,
            anomaly=self.anomaly_weight,
        )


@dataclass
class TrainResult:
    model: AirwayLabeler
    optimizer: torch.optim.Optimizer
    history: list[dict]


def train(trees: Sequence[AirwayTree], model_cfg: ModelConfig, train_cfg: TrainConfig,
          nomenclature: Nomenclature | None = None, out_dir=None, inputs: Sequence[TreeInputs] | None = None,
          progress=None, stop_when=None) -> TrainResult:
    """One Adam step per tree; an epoch visits every tree once in seeded random order.

    ``progress(record)`` sees each epoch's mean losses. ``stop_when(model, epoch)``
    ends training early when it returns true; the model is in train mode again
    after the call.
    """
    torch.set_num_threads(1)
    nom = nomenclature or trees[0].nomenclature
    model = AirwayLabeler(model_cfg, nom)
    dtype = model_cfg.torch_dtype
    if inputs is None:
        inputs = [prepare(t, dtype) for t in trees]
    opt = torch.optim.Adam(model.parameters(), lr=train_cfg.lr, foreach=True)
    weights = train_cfg.loss_weights
    rng = make_rng(train_cfg.seed, 0, "shuffle")
    out = Path(out_dir) if out_dir is not None else None
    last_ckpt = None
    history = []

    model.train()
    for epoch in range(1, train_cfg.epochs + 1):
        order = rng.permutation(len(inputs))
        sums: dict[str, float] = {}
        for step, idx in enumerate(order):
            inp = inputs[idx]
            bundle = model(inp)
            loss, terms = compute_loss(bundle, inp, weights, train_cfg.label_smoothing)
            if not torch.isfinite(loss):
                raise NonFiniteLoss(epoch, step, last_ckpt)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sums["loss"] = sums.get("loss", 0.0) + loss.item()
            for k, v in terms.items():
                sums[k] = sums.get(k, 0.0) + v.item()
        record = {"epoch": epoch, **{k: v / max(len(inputs), 1) for k, v in sums.items()}}
        history.append(record)
        if progress is not None:
            progress(record)
        if epoch % 50 == 0 or epoch == train_cfg.epochs:
            log.info("epoch %d loss %.5f", epoch, record.get("loss", math.nan))
        if out is not None and train_cfg.checkpoint_every and epoch % train_cfg.checkpoint_every == 0:
            last_ckpt = out / f"checkpoint_{epoch:05d}.json"
            save_checkpoint(last_ckpt, model, train_cfg, optimizer=opt, epoch=epoch)
        if stop_when is not None:
            done = stop_when(model, epoch)
            model.train()
            if done:
                break

    model.eval()
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / "model.json", model, train_cfg, epoch=len(history))
        (out / "history.json").write_text(json.dumps(history, indent=1) + "\n", encoding="utf-8")
    return TrainResult(model=model, optimizer=opt, history=history)


# -- serialization -----------------------------------------------------------------

def _encode(t: torch.Tensor) -> dict:
    arr = t.detach().cpu().contiguous().numpy()
    return {
        "shape": list(arr.shape),
        "dtype": str(arr.dtype),
        "data": base64.b64encode(arr.astype(arr.dtype.newbyteorder("<")).tobytes()).decode("ascii"),
    }


def _decode(d: dict) -> torch.Tensor:
    dtype = np.dtype(d["dtype"]).newbyteorder("<")
    arr = np.frombuffer(base64.b64decode(d["data"]), dtype=dtype).reshape(d["shape"])
    return torch.from_numpy(arr.astype(arr.dtype.newbyteorder("=")).copy())


def _encode_tree(obj):
    if isinstance(obj, torch.Tensor):
        return {"__tensor__": _encode(obj)}
    if isinstance(obj, dict):
        return {str(k): _encode_tree(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_encode_tree(v) for v in obj]
    return obj


def _decode_tree(obj):
    if isinstance(obj, dict):
        if "__tensor__" in obj:
            return _decode(obj["__tensor__"])
        return {k: _decode_tree(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_decode_tree(v) for v in obj]
    return obj


def checkpoint_dict(model: AirwayLabeler, train_cfg: TrainConfig | None = None, optimizer=None,
                    epoch: int | None = None) -> dict:
    out = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "epoch": epoch,
        "model_config": dataclass_to_dict(model.cfg),
        "train_config": dataclass_to_dict(train_cfg) if train_cfg is not None else None,
        "nomenclature": model.nomenclature.to_dict(),
        "params": {k: _encode(v) for k, v in model.state_dict().items()},
    }
    if optimizer is not None:
        state = optimizer.state_dict()
        out["optimizer"] = _encode_tree({"state": state["state"], "param_groups": state["param_groups"]})
    return out


def save_checkpoint(path, model, train_cfg=None, optimizer=None, epoch=None) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(checkpoint_dict(model, train_cfg, optimizer, epoch), indent=1)
    Path(path).write_text(text + "\n", encoding="utf-8")


def load_checkpoint(path) -> tuple[AirwayLabeler, dict]:
    """Rebuild the model; returns ``(model, raw checkpoint dict)``."""
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if data.get("schema_version") != CHECKPOINT_SCHEMA_VERSION:
        raise SchemaVersionMismatch(f"{path}: checkpoint schema_version {data.get('schema_version')!r}")
    try:
        cfg = dataclass_from_dict(ModelConfig, data["model_config"], "model_config")
        nom = Nomenclature.from_dict(data["nomenclature"])
        model = AirwayLabeler(cfg, nom)
        model.load_state_dict({k: _decode(v) for k, v in data["params"].items()})
    except KeyError as exc:
        raise ParseError(f"{path}: missing field {exc}") from exc
    model.eval()
    if "optimizer" in data:
        data["optimizer"] = _decode_tree(data["optimizer"])
    return model, data


def restore_optimizer(model: AirwayLabeler, ckpt: dict, lr: float) -> torch.optim.Optimizer:
    opt = torch.optim.Adam(model.parameters(), lr=lr, foreach=True)
    state = ckpt["optimizer"]
    opt.load_state_dict({"state": {int(k): v for k, v in state["state"].items()},
                         "param_groups": state["param_groups"]})
    return opt


# -- inference ---------------------------------------------------------------------

@torch.no_grad()
def predict(tree: AirwayTree, model: AirwayLabeler, inputs: TreeInputs | None = None) -> PredictionBundle:
    model.eval()
    inp = inputs if inputs is not None else prepare(tree, model.cfg.torch_dtype)
    return model(inp)


def prediction_dict(bundle: PredictionBundle) -> dict:
    labels = bundle.labels
    n = len(labels["lob"])
    scores = bundle.anomaly_scores
    return {
        str(i): {
            "lob": int(labels["lob"][i]),
            "seg": int(labels["seg"][i]),
            "sub": int(labels["sub"][i]),
            "anomaly_score": None if scores is None else float(scores[i]),
            "is_abnormal_pred": bool(bundle.abnormal_pred[i]),
        }
        for i in range(n)
    }


def write_predictions(bundle: PredictionBundle, path) -> None:
    Path(path).write_text(json.dumps(prediction_dict(bundle), indent=1) + "\n", encoding="utf-8")


def read_predictions(path) -> dict[str, np.ndarray]:
    """Prediction file -> arrays ``lob``, ``seg``, ``sub``, ``anomaly_score``, ``is_abnormal_pred``."""
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    try:
        ids = sorted(int(k) for k in data)
        if ids != list(range(len(ids))):
            raise ParseError(f"{path}: node ids must be 0..N-1")
        rows = [data[str(i)] for i in ids]
        return {
            "lob": np.array([r["lob"] for r in rows], dtype=np.int64),
            "seg": np.array([r["seg"] for r in rows], dtype=np.int64),
            "sub": np.array([r["sub"] for r in rows], dtype=np.int64),
            "anomaly_score": np.array(
                [np.nan if r["anomaly_score"] is None else r["anomaly_score"] for r in rows]
            ),
            "is_abnormal_pred": np.array([r["is_abnormal_pred"] for r in rows], dtype=bool),
        }
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"{path}: {exc}") from exc
