"""Reference grounding objective: prediction-to-region matching, per-token
focal loss with analytic gradients, and weight averaging."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from neggen import kernels
from neggen.assembly import TrainingSample
from neggen.grounding import BoundingBox


@dataclass(frozen=True)
class FocalParams:
    alpha: float = 0.25
    gamma: float = 2.0
    w_cls: float = 1.0
    w_box: float = 5.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.w_cls < 0 or self.w_box < 0:
            raise ValueError("cost weights must be >= 0")


@dataclass
class Prediction:
    box: BoundingBox
    logits: np.ndarray

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(self.logits)):
            raise ValueError("prediction logits must be finite")

    def to_dict(self) -> dict:
        return {"box": self.box.as_list(), "logits": self.logits.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> Prediction:
        return cls(BoundingBox.from_list(d["box"]), d["logits"])


@dataclass(frozen=True)
class MatchResult:
    assignment: tuple  # prediction index -> region index, or None
    total_cost: float

    @property
    def pairs(self) -> list[tuple[int, int]]:
        return [(i, l) for i, l in enumerate(self.assignment) if l is not None]


def focal_loss(logit: float, target: int, params: FocalParams = FocalParams()) -> tuple[float, float]:
    """Sigmoid focal loss of one logit and its derivative."""
    if not math.isfinite(logit):
        raise ValueError("logit must be finite")
    loss, grad = kernels.focal_terms(np.array([logit], dtype=np.float64), np.array([target], dtype=np.float64),
                                     params.alpha, params.gamma)
    return float(loss[0]), float(grad[0])


def _canvas_diag(sample: TrainingSample) -> float:
    w, h = sample.canvas
    return math.hypot(w, h) or 1.0


def _l1(a: BoundingBox, b: BoundingBox) -> float:
    return sum(abs(x - y) for x, y in zip(a.as_list(), b.as_list()))


def matching_cost(pred: Prediction, l: int, matrix: np.ndarray, box: BoundingBox, diag: float,
                  params: FocalParams = FocalParams()) -> float:
    """Classification cost (mean focal loss against row ``l``) plus normalized L1 box distance."""
    row = np.asarray(matrix)[l]
    if row.shape[0] != pred.logits.shape[0]:
        raise ValueError("logit length does not match token count")
    cls, _ = kernels.focal_terms(pred.logits, row.astype(np.float64), params.alpha, params.gamma)
    cls_term = float(cls.mean()) if cls.size else 0.0
    return params.w_cls * cls_term + params.w_box * _l1(pred.box, box) / diag


def cost_matrix(preds: list[Prediction], sample: TrainingSample, params: FocalParams = FocalParams()) -> np.ndarray:
    a = sample.matrix.dense()
    diag = _canvas_diag(sample)
    out = np.zeros((len(preds), len(sample.regions)), dtype=np.float64)
    for i, p in enumerate(preds):
        for l, region in enumerate(sample.regions):
            out[i, l] = matching_cost(p, l, a, region.box, diag, params)
    return out


def hungarian_match(cost) -> MatchResult:
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost matrix must be 2-D")
    assignment: list = [None] * cost.shape[0]
    if cost.size == 0:
        return MatchResult(tuple(assignment), 0.0)
    rows, cols = kernels.linear_sum_assignment(cost)
    for r, c in zip(rows, cols):
        assignment[int(r)] = int(c)
    return MatchResult(tuple(assignment), float(cost[rows, cols].sum()))


@dataclass
class LossResult:
    loss: float
    grads: np.ndarray  # (N, T), d loss / d logits
    match: MatchResult
    targets: np.ndarray  # (N, T)


def grounding_loss(preds: list[Prediction], sample: TrainingSample, params: FocalParams = FocalParams(),
                   reduction: str = "mean") -> LossResult:
    """Matched predictions target their region's row of A; the rest target all zeros.

    Gradients are taken with the matching held fixed.
    """
    if reduction not in ("mean", "sum"):
        raise ValueError("reduction must be 'mean' or 'sum'")
    t = sample.matrix.cols
    for p in preds:
        if p.logits.shape[0] != t:
            raise ValueError(f"prediction has {p.logits.shape[0]} logits, sample has {t} tokens")
    n = len(preds)
    if n == 0 or t == 0:
        return LossResult(0.0, np.zeros((n, t)), MatchResult((None,) * n, 0.0), np.zeros((n, t)))
    match = hungarian_match(cost_matrix(preds, sample, params))
    a = sample.matrix.dense().astype(np.float64)
    targets = np.zeros((n, t), dtype=np.float64)
    for i, l in match.pairs:
        targets[i] = a[l]
    logits = np.stack([p.logits for p in preds])
    losses, grads = kernels.focal_terms(logits.ravel(), targets.ravel(), params.alpha, params.gamma)
    scale = 1.0 / (n * t) if reduction == "mean" else 1.0
    return LossResult(float(losses.sum()) * scale, grads.reshape(n, t) * scale, match, targets)


def gradient_step_demo(sample: TrainingSample, steps: int = 50, lr: float = 0.5, seed: int = 0,
                       n_preds: int | None = None, dim: int = 16, params: FocalParams = FocalParams()) -> list[float]:
    """Gradient descent on a toy linear predictor; returns the loss before each step and after the last.

    Logits are ``W @ F.T`` with fixed random token features ``F``; boxes are
    the ground-truth boxes plus fixed jitter and are not trained.
    """
    rng = np.random.default_rng(seed)
    t = sample.matrix.cols
    n = n_preds if n_preds is not None else max(len(sample.regions), 1)
    feats = rng.normal(size=(t, dim)) / math.sqrt(dim)
    weights = rng.normal(scale=0.1, size=(n, dim))
    boxes = []
    for i in range(n):
        base = sample.regions[i % len(sample.regions)].box if sample.regions else BoundingBox(0, 0, 1, 1)
        jx, jy = rng.uniform(-2, 2, size=2)
        boxes.append(base.shifted(jx, jy))
    trajectory = []
    for step in range(steps + 1):
        preds = [Prediction(b, weights[i] @ feats.T) for i, b in enumerate(boxes)]
        res = grounding_loss(preds, sample, params)
        trajectory.append(res.loss)
        if step < steps:
            weights = weights - lr * (res.grads @ feats)
    return trajectory


@dataclass
class ParamVector:
    values: np.ndarray
    manifest: tuple = field(default_factory=tuple)  # ((name, shape), ...)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        self.manifest = tuple((str(name), tuple(int(d) for d in shape)) for name, shape in self.manifest)
        if self.manifest:
            size = sum(math.prod(shape) for _, shape in self.manifest)
            if size != self.values.size:
                raise ValueError(f"manifest describes {size} values, vector has {self.values.size}")

    def tensors(self) -> dict[str, np.ndarray]:
        out, pos = {}, 0
        for name, shape in self.manifest:
            k = math.prod(shape)
            out[name] = self.values[pos:pos + k].reshape(shape)
            pos += k
        return out


def ensemble_average(a: ParamVector, b: ParamVector) -> ParamVector:
    if a.manifest != b.manifest or a.values.shape != b.values.shape:
        raise ValueError("parameter manifests differ")
    return ParamVector((a.values + b.values) / 2.0, a.manifest)


def load_predictions(path) -> dict[str, list[Prediction]]:
    out: dict[str, list[Prediction]] = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                out.setdefault(row["sample_id"], []).extend(Prediction.from_dict(p) for p in row["preds"])
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"predictions line {line_no}: {exc}") from exc
    return out


def gradient_check(pred: Prediction, sample: TrainingSample, params: FocalParams = FocalParams(),
                   h: float = 1e-6, tol: float = 1e-4) -> bool:
    """Central finite differences of the fixed-match loss against the analytic gradient."""
    res = grounding_loss([pred], sample, params)
    target = res.targets[0]
    ok = True
    for j in range(pred.logits.shape[0]):
        x = pred.logits[j]
        lp, _ = focal_loss(x + h, int(target[j]), params)
        lm, _ = focal_loss(x - h, int(target[j]), params)
        fd = (lp - lm) / (2 * h) / pred.logits.shape[0]
        an = res.grads[0, j]
        if abs(fd - an) > tol * max(1.0, abs(an)):
            ok = False
    return ok
