"""Dice and centreline Dice (clDice) for binary prediction / ground-truth pairs."""

from dataclasses import asdict, dataclass

import numpy as np

from vesselforge import morphology as morph


@dataclass
class MetricReport:
    dice: float
    cldice: float
    tprec: float
    tsens: float
    n_pred: int
    n_gt: int
    n_overlap: int
    n_skel_pred: int
    n_skel_gt: int

    def to_dict(self):
        return asdict(self)


def _pair(pred, gt):
    pred = np.asarray(pred).astype(bool, copy=False)
    gt = np.asarray(gt).astype(bool, copy=False)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return pred, gt


def dice(pred, gt):
    """``2|P & L| / (|P| + |L|)``; two empty masks score 1."""
    pred, gt = _pair(pred, gt)
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(pred & gt)) / total


def _harmonic(a, b):
    return 0.0 if a + b == 0 else 2.0 * a * b / (a + b)


def report(pred, gt):
    """Full report. Topology precision is ``|skel(P) & L| / |skel(P)|``, sensitivity ``|skel(L) & P| / |skel(L)|``.

    Empty skeletons: both empty scores 1, exactly one empty scores 0.
    """
    pred, gt = _pair(pred, gt)
    sp, sg = morph.skeletonize(pred), morph.skeletonize(gt)
    n_sp, n_sg = int(sp.sum()), int(sg.sum())
    if n_sp == 0 and n_sg == 0:
        tprec = tsens = cl = 1.0
    elif n_sp == 0 or n_sg == 0:
        tprec = 0.0 if n_sp == 0 else np.count_nonzero(sp & gt) / n_sp
        tsens = 0.0 if n_sg == 0 else np.count_nonzero(sg & pred) / n_sg
        cl = 0.0
    else:
        tprec = np.count_nonzero(sp & gt) / n_sp
        tsens = np.count_nonzero(sg & pred) / n_sg
        cl = _harmonic(tprec, tsens)
    return MetricReport(
        dice=float(dice(pred, gt)),
        cldice=float(cl),
        tprec=float(tprec),
        tsens=float(tsens),
        n_pred=int(pred.sum()),
        n_gt=int(gt.sum()),
        n_overlap=int(np.count_nonzero(pred & gt)),
        n_skel_pred=n_sp,
        n_skel_gt=n_sg,
    )


def cldice(pred, gt):
    return report(pred, gt).cldice


def aggregate(reports):
    """Macro average (mean over volumes) of the score fields."""
    reports = list(reports)
    if not reports:
        raise ValueError("nothing to aggregate")
    keys = ("dice", "cldice", "tprec", "tsens")
    return {k: float(np.mean([getattr(r, k) for r in reports])) for k in keys}
