# src/core/scoring.py

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
import pandas as pd
import torch
from sklearn.metrics import f1_score, precision_score, recall_score

from core.errors import ShapeError

logger = logging.getLogger(__name__)

BAD_PIXEL_THRESHOLDS = (1.0, 3.0)
COLORMAP_NOTE = "disparity renders use matplotlib 'viridis' over each scene's ground-truth [min, max]"

REPORT_COLUMNS = [
    "scene",
    "epe_all",
    "epe_nonoccluded",
    "bad_1",
    "bad_3",
    "occ_precision",
    "occ_recall",
    "occ_f1",
    "occ_degenerate",
]

Field = Union[torch.Tensor, np.ndarray]


def _as_tensor(x: Field) -> torch.Tensor:
    if isinstance(x, np.ndarray):
        return torch.from_numpy(x)
    return x


def _selection(
    pred: torch.Tensor,
    gt: torch.Tensor,
    mask: Optional[Field],
    max_disparity: Optional[float],
) -> torch.Tensor:
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {tuple(pred.shape)} and ground truth {tuple(gt.shape)} differ")
    keep = torch.ones_like(gt, dtype=torch.bool)
    if mask is not None:
        mask_t = _as_tensor(mask).to(torch.bool)
        if mask_t.shape != gt.shape:
            mask_t = mask_t.expand_as(gt) if mask_t.dim() < gt.dim() else mask_t.reshape(gt.shape)
        keep &= mask_t
    if max_disparity is not None:
        keep &= gt <= max_disparity
    return keep


# -----------------------------------------------------------------------------
# Disparity metrics
# -----------------------------------------------------------------------------

def epe(
    pred: Field,
    gt: Field,
    mask: Optional[Field] = None,
    max_disparity: Optional[float] = None,
) -> float:
    """
    Mean absolute disparity error over the selected pixels.

    `mask` selects pixels (True = counted); `max_disparity` additionally drops
    pixels whose ground truth exceeds the cap. An empty selection gives NaN.
    """
    pred_t, gt_t = _as_tensor(pred).double(), _as_tensor(gt).double()
    keep = _selection(pred_t, gt_t, mask, max_disparity)
    if not bool(keep.any()):
        return float("nan")
    return float((pred_t - gt_t).abs()[keep].mean())


def bad_pixel_rate(
    pred: Field,
    gt: Field,
    threshold: float,
    mask: Optional[Field] = None,
    max_disparity: Optional[float] = None,
) -> float:
    """Fraction of selected pixels whose error exceeds `threshold` pixels."""
    pred_t, gt_t = _as_tensor(pred).double(), _as_tensor(gt).double()
    keep = _selection(pred_t, gt_t, mask, max_disparity)
    if not bool(keep.any()):
        return float("nan")
    bad = (pred_t - gt_t).abs()[keep] > threshold
    return float(bad.double().mean())


# -----------------------------------------------------------------------------
# Occlusion metrics
# -----------------------------------------------------------------------------

@dataclass(frozen=True)
class OcclusionScores:
    precision: float
    recall: float
    f1: float
    degenerate: bool = False


def as_occlusion_mask(x: Field) -> torch.Tensor:
    """Boolean H×W mask from a mask or from 2-channel scores (argmax, ties to 0)."""
    t = _as_tensor(x)
    if t.dtype == torch.bool:
        return t
    if t.dim() >= 3 and t.shape[-3] == 2:
        return t.select(-3, 1) > t.select(-3, 0)
    return t > 0.5


def occlusion_metrics(pred: Field, gt: Field) -> OcclusionScores:
    """Binary precision / recall / F1 with "occluded" as the positive class."""
    pred_m = as_occlusion_mask(pred).reshape(-1).numpy()
    gt_m = as_occlusion_mask(gt).reshape(-1).numpy()
    if pred_m.shape != gt_m.shape:
        raise ShapeError(f"occlusion masks differ in size: {pred_m.shape} vs {gt_m.shape}")

    degenerate = not gt_m.any() or not pred_m.any()
    if degenerate:
        logger.warning(
            "Degenerate occlusion metrics: %d predicted and %d true occluded pixels",
            int(pred_m.sum()), int(gt_m.sum()))
    return OcclusionScores(
        precision=float(precision_score(gt_m, pred_m, zero_division=0)),
        recall=float(recall_score(gt_m, pred_m, zero_division=0)),
        f1=float(f1_score(gt_m, pred_m, zero_division=0)),
        degenerate=degenerate,
    )


# -----------------------------------------------------------------------------
# Reports
# -----------------------------------------------------------------------------

@dataclass(frozen=True)
class SceneMetrics:
    scene: str
    epe_all: float
    epe_nonoccluded: float
    bad_1: float
    bad_3: float
    occ_precision: float
    occ_recall: float
    occ_f1: float
    occ_degenerate: bool = False


def score_scene(
    scene: str,
    pred_disp: Field,
    gt_disp: Field,
    pred_occ: Field,
    gt_occ: Field,
    max_disparity: Optional[float] = None,
) -> SceneMetrics:
    pred_t = _as_tensor(pred_disp).reshape(_as_tensor(gt_disp).shape[-2:])
    gt_t = _as_tensor(gt_disp).reshape(pred_t.shape)
    gt_mask = as_occlusion_mask(gt_occ).reshape(gt_t.shape)
    visible = ~gt_mask
    occ = occlusion_metrics(as_occlusion_mask(pred_occ).reshape(gt_t.shape), gt_mask)
    return SceneMetrics(
        scene=scene,
        epe_all=epe(pred_t, gt_t, max_disparity=max_disparity),
        epe_nonoccluded=epe(pred_t, gt_t, visible, max_disparity),
        bad_1=bad_pixel_rate(pred_t, gt_t, BAD_PIXEL_THRESHOLDS[0], visible, max_disparity),
        bad_3=bad_pixel_rate(pred_t, gt_t, BAD_PIXEL_THRESHOLDS[1], visible, max_disparity),
        occ_precision=occ.precision,
        occ_recall=occ.recall,
        occ_f1=occ.f1,
        occ_degenerate=occ.degenerate,
    )


@dataclass
class MetricReport:
    """Per-scene rows plus a final `mean` row."""

    label: str
    table: pd.DataFrame
    max_disparity: Optional[float] = None
    notes: List[str] = field(default_factory=list)

    @property
    def scenes(self) -> pd.DataFrame:
        return self.table[self.table["scene"] != "mean"]

    @property
    def aggregate(self) -> pd.Series:
        return self.table[self.table["scene"] == "mean"].iloc[0]

    def to_csv(self, path: Union[str, Path]) -> Path:
        """Deterministic CSV: comment header, then fixed columns and float format."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        cap = "none" if self.max_disparity is None else f"{self.max_disparity:g}"
        header = [f"# report: {self.label}", f"# {COLORMAP_NOTE}", f"# max_disparity: {cap}"]
        header += [f"# {note}" for note in self.notes]
        body = self.table.to_csv(index=False, float_format="%.6f", lineterminator="\n")
        path.write_text("\n".join(header) + "\n" + body, encoding="utf-8")
        return path

    def to_text(self) -> str:
        return self.table.to_string(index=False, float_format=lambda v: f"{v:.4f}")


def build_report(
    rows: Sequence[SceneMetrics],
    label: str = "",
    max_disparity: Optional[float] = None,
) -> MetricReport:
    if not rows:
        raise ValueError("cannot build a metric report from zero scenes")
    df = pd.DataFrame([asdict(r) for r in rows], columns=REPORT_COLUMNS)
    df = df.sort_values("scene", kind="mergesort").reset_index(drop=True)

    mean = {col: df[col].mean() for col in REPORT_COLUMNS[1:-1]}
    mean["scene"] = "mean"
    mean["occ_degenerate"] = bool(df["occ_degenerate"].any())
    df = pd.concat([df, pd.DataFrame([mean], columns=REPORT_COLUMNS)], ignore_index=True)
    return MetricReport(label=label, table=df, max_disparity=max_disparity)
