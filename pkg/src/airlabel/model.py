"""Two-stage hierarchical labeler: forward pass, prediction bundle and loss."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .attention import L_MAX, TransformerBlock, biased_self_attention, cross_attention, masked_self_attention
from .errors import NonFiniteActivation, ShapeMismatch
from .features import FEATURE_NAMES, extract_features
from .saliency import SaliencyHead
from .ssc import SoftSubtreeHead, gt_subtree_map
from .tree import AirwayTree, Nomenclature, descendant_mask, shortest_path_distances

LEVELS = ("lob", "seg", "sub")
BCE_EPS = 1e-7

VARIANTS = {
    "baseline": dict(two_stage=False, use_ssc=False, use_abs=False),
    "f2c": dict(two_stage=True, use_ssc=False, use_abs=False),
    "f2c+ssc": dict(two_stage=True, use_ssc=True, use_abs=False),
    "f2c+abs": dict(two_stage=True, use_ssc=False, use_abs=True),
    "full": dict(two_stage=True, use_ssc=True, use_abs=True),
}


@dataclass(frozen=True)
class ModelConfig:
    d: int = 128
    heads: int = 4
    l_max: int = L_MAX
    d_in: int = len(FEATURE_NAMES)
    lob_blocks: int = 2
    seg_blocks: int = 2
    sub_masked_blocks: int = 2
    sub_blocks: int = 2
    two_stage: bool = True
    use_ssc: bool = True
    use_abs: bool = True
    masked_bias: bool = False
    prototype_alpha: float = 1.0
    normalize_prototypes: bool = False
    abs_hidden: int = 64
    anomaly_threshold: float = 0.5
    init_seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        if self.d % self.heads:
            raise ValueError(f"d={self.d} must be divisible by heads={self.heads}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        if self.prototype_alpha <= 0:
            raise ValueError("prototype_alpha must be positive")
        if not 0 <= self.anomaly_threshold <= 1:
            raise ValueError("anomaly_threshold must lie in [0, 1]")

    @property
    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32

    @property
    def n_stages(self) -> int:
        return 2 if self.two_stage else 1

    def variant(self, name: str) -> "ModelConfig":
        from dataclasses import replace

        return replace(self, **VARIANTS[name])


@dataclass
class TreeInputs:
    """Tensors for one tree, computed once and reused every epoch."""

    features: torch.Tensor
    spd: torch.Tensor
    desc: torch.Tensor
    labels: dict[str, torch.Tensor]
    abnormal: torch.Tensor
    subtree_gt: torch.Tensor

    @property
    def N(self) -> int:
        return self.features.shape[0]


def prepare(tree: AirwayTree, dtype=torch.float64) -> TreeInputs:
    return TreeInputs(
        features=torch.as_tensor(extract_features(tree).values, dtype=dtype),
        spd=torch.as_tensor(shortest_path_distances(tree), dtype=torch.long),
        desc=torch.as_tensor(descendant_mask(tree), dtype=dtype),
        labels={m: torch.as_tensor(tree.labels(m)) for m in LEVELS},
        abnormal=torch.as_tensor(tree.abnormal),
        subtree_gt=torch.as_tensor(gt_subtree_map(tree.labels("seg")), dtype=dtype),
    )


@dataclass
class StageOutput:
    logits: dict[str, torch.Tensor]
    features: dict[str, torch.Tensor]
    raw_subtree: torch.Tensor | None = None
    subtree: torch.Tensor | None = None
    anomaly: torch.Tensor | None = None
    anomaly_mask: torch.Tensor | None = None


@dataclass
class PredictionBundle:
    stages: list[StageOutput]
    labels: dict[str, np.ndarray] = field(default_factory=dict)
    anomaly_scores: np.ndarray | None = None
    abnormal_pred: np.ndarray | None = None

    @property
    def final(self) -> StageOutput:
        return self.stages[-1]


class Stage(nn.Module):
    def __init__(self, cfg: ModelConfig, nom: Nomenclature, guided: bool):
        super().__init__()
        d, h = cfg.d, cfg.heads

        def stack(n, bias):
            return nn.ModuleList(TransformerBlock(d, h, spd_bias=bias, l_max=cfg.l_max) for _ in range(n))

        self.lob = stack(cfg.lob_blocks, True)
        self.seg = stack(cfg.seg_blocks, True)
        self.sub_masked = stack(cfg.sub_masked_blocks, cfg.masked_bias)
        self.sub = stack(cfg.sub_blocks, True)
        self.guide_lob = TransformerBlock(d, h) if guided else None
        self.guide_seg = TransformerBlock(d, h) if guided else None
        self.heads = nn.ModuleDict({m: nn.Linear(d, nom.n_classes(m)) for m in LEVELS})
        self.ssc = SoftSubtreeHead(d) if cfg.use_ssc else None
        self.abs = (
            SaliencyHead(d, h, nom.n_seg, cfg.prototype_alpha, cfg.normalize_prototypes, cfg.abs_hidden)
            if cfg.use_abs
            else None
        )


class AirwayLabeler(nn.Module):
    def __init__(self, cfg: ModelConfig, nom: Nomenclature):
        super().__init__()
        self.cfg = cfg
        self.nomenclature = nom
        gen = torch.random.fork_rng(devices=[])
        with gen:
            torch.manual_seed(cfg.init_seed)
            self.embed = nn.Linear(cfg.d_in, cfg.d)
            nn.init.xavier_uniform_(self.embed.weight)
            nn.init.zeros_(self.embed.bias)
            self.stages = nn.ModuleList(
                Stage(cfg, nom, guided=i > 0) for i in range(cfg.n_stages)
            )
        self.to(cfg.torch_dtype)

    def _run(self, blocks, x, name, spd=None, mask=None):
        for j, block in enumerate(blocks):
            if mask is not None:
                x = masked_self_attention(x, block, mask, spd=spd if self.cfg.masked_bias else None)
            else:
                x = biased_self_attention(x, block, spd)
        if not torch.isfinite(x).all():
            raise NonFiniteActivation(f"{name}[{len(blocks) - 1}]")
        return x

    def _subsegmental(self, stage: Stage, g_seg, z_seg, inp: TreeInputs, out: StageOutput, tag: str):
        n = g_seg.shape[0]
        mask = torch.ones(n, n, dtype=g_seg.dtype)
        if stage.ssc is not None:
            out.raw_subtree, out.subtree = stage.ssc(g_seg, inp.desc)
            mask = mask * out.subtree
        if stage.abs is not None:
            out.anomaly, out.anomaly_mask = stage.abs(g_seg, z_seg)
            mask = mask * out.anomaly_mask
        x = self._run(stage.sub_masked, g_seg, f"{tag}.sub_masked", spd=inp.spd, mask=mask)
        return self._run(stage.sub, x, f"{tag}.sub", spd=inp.spd)

    def forward(self, inp: TreeInputs) -> PredictionBundle:
        if inp.features.dim() != 2 or inp.features.shape[1] != self.cfg.d_in:
            raise ShapeMismatch(f"features must be (N, {self.cfg.d_in}), got {tuple(inp.features.shape)}")
        x = self.embed(inp.features)
        stages: list[StageOutput] = []

        s = self.stages[0]
        out = StageOutput(logits={}, features={})
        g = {}
        g["lob"] = self._run(s.lob, x, "s1.lob", spd=inp.spd)
        g["seg"] = self._run(s.seg, g["lob"], "s1.seg", spd=inp.spd)
        z_seg = s.heads["seg"](g["seg"])
        g["sub"] = self._subsegmental(s, g["seg"], z_seg, inp, out, "s1")
        out.features = g
        out.logits = {m: s.heads[m](g[m]) for m in LEVELS}
        stages.append(out)

        if self.cfg.two_stage:
            prev = g
            s = self.stages[1]
            out = StageOutput(logits={}, features={})
            g = {}
            g_tilde = self._run(s.lob, prev["lob"], "s2.lob", spd=inp.spd)
            g["lob"] = cross_attention(g_tilde, prev["seg"], s.guide_lob)
            g_tilde = self._run(s.seg, g["lob"], "s2.seg", spd=inp.spd)
            g["seg"] = cross_attention(g_tilde, prev["sub"], s.guide_seg)
            z_seg = s.heads["seg"](g["seg"])
            g["sub"] = self._subsegmental(s, g["seg"], z_seg, inp, out, "s2")
            out.features = g
            out.logits = {m: s.heads[m](g[m]) for m in LEVELS}
            stages.append(out)

        return self._finalize(PredictionBundle(stages=stages))

    def _finalize(self, bundle: PredictionBundle) -> PredictionBundle:
        final = bundle.final
        labels = {m: final.logits[m].detach().argmax(dim=1).cpu().numpy() for m in LEVELS}
        if final.anomaly is not None:
            scores = final.anomaly.detach().cpu().numpy().astype(np.float64)
            flagged = scores > self.cfg.anomaly_threshold
            labels["lob"][flagged] = self.nomenclature.outlier_lob
            labels["seg"][flagged] = self.nomenclature.outlier_seg
            labels["sub"][flagged] = self.nomenclature.outlier_sub
            bundle.anomaly_scores = scores
            bundle.abnormal_pred = flagged
        else:
            bundle.abnormal_pred = np.zeros(len(labels["lob"]), dtype=bool)
        bundle.labels = labels
        return bundle


@dataclass(frozen=True)
class LossWeights:
    stage: tuple[float, ...] = (1.0, 1.0)
    level: tuple[float, float, float] = (1.0, 1.0, 1.0)
    subtree: float = 1.0
    anomaly: float = 1.0


def _bce(pred, target):
    return F.binary_cross_entropy(pred.clamp(BCE_EPS, 1 - BCE_EPS), target)


def compute_loss(bundle: PredictionBundle, inp: TreeInputs, weights: LossWeights = LossWeights(),
                 label_smoothing: float = 0.01):
    """Total loss and a per-term breakdown.

    Cross-entropy (with label smoothing) skips ground-truth abnormal nodes;
    the subtree-map and anomaly-score BCE terms use every node.
    """
    normal = ~inp.abnormal
    terms: dict[str, torch.Tensor] = {}
    total = None
    for i, st in enumerate(bundle.stages):
        gamma = weights.stage[i]
        stage_total = 0.0
        for m, alpha in zip(LEVELS, weights.level):
            z = st.logits[m]
            if normal.any():
                ce = F.cross_entropy(z[normal], inp.labels[m][normal], label_smoothing=label_smoothing)
            else:
                ce = z.sum() * 0.0
            terms[f"s{i + 1}.ce_{m}"] = ce
            stage_total = stage_total + alpha * ce
        if st.subtree is not None:
            bce = _bce(st.subtree, inp.subtree_gt)
            terms[f"s{i + 1}.bce_subtree"] = bce
            stage_total = stage_total + weights.subtree * bce
        if st.anomaly is not None:
            bce = _bce(st.anomaly, inp.abnormal.to(st.anomaly.dtype))
            terms[f"s{i + 1}.bce_anomaly"] = bce
            stage_total = stage_total + weights.anomaly * bce
        total = gamma * stage_total if total is None else total + gamma * stage_total
    return total, terms
