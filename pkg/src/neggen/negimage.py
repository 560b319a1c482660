"""Negative images: box-conditioned inpainting requests and the box/similarity filters."""
from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from neggen import kernels
from neggen.backends import BackendError, BackendUnavailable
from neggen.grounding import BoundingBox, GroundingSample, ImageRef, PhraseSpan, Region
from neggen.negtext import TripletSample

log = logging.getLogger(__name__)

PENDING = "pending"
KEPT = "kept"
DROPPED_BOX = "dropped_box_filter"
DROPPED_IMAGE = "dropped_image_score"
DROPPED_REGION = "dropped_region_score"
BACKEND_FAILED = "backend_failed"
STATUSES = (PENDING, KEPT, DROPPED_BOX, DROPPED_IMAGE, DROPPED_REGION, BACKEND_FAILED)


# ------------------------------------------------------------------ geometry

def box_coverage(a: BoundingBox, b: BoundingBox) -> float:
    """Fraction of ``b``'s area that lies inside ``a``."""
    w = min(a.x2, b.x2) - max(a.x1, b.x1)
    h = min(a.y2, b.y2) - max(a.y1, b.y1)
    if w <= 0 or h <= 0:
        return 0.0
    return (w * h) / b.area


def box_filter(sample: GroundingSample, threshold: float = 0.75) -> list[int]:
    """Indices of regions whose box covers no other box by more than ``threshold``."""
    if not 0 < threshold <= 1:
        raise ValueError("threshold must be in (0, 1]")
    n = len(sample.regions)
    if n == 0:
        return []
    cov = kernels.coverage_matrix([r.box.as_list() for r in sample.regions])
    np.fill_diagonal(cov, 0.0)
    return [l for l in range(n) if not np.any(cov[l] > threshold)]


def editable_phrases(sample: GroundingSample, threshold: float = 0.75) -> tuple[list[list[int]], list[list[int]]]:
    """Group regions by span; a phrase is editable only if all its boxes pass the box filter.

    Returns ``(editable, excluded)`` lists of region-index groups in caption order.
    """
    ok = set(box_filter(sample, threshold))
    groups: dict[tuple[int, int], list[int]] = {}
    for idx, r in enumerate(sample.regions):
        groups.setdefault((r.span.start, r.span.end), []).append(idx)
    editable, excluded = [], []
    for key in sorted(groups):
        (editable if all(i in ok for i in groups[key]) else excluded).append(groups[key])
    return editable, excluded


def upscale_crop_box(box: BoundingBox, factor: float, width: float, height: float) -> BoundingBox:
    if factor < 1:
        raise ValueError("crop factor must be >= 1")
    cx, cy = (box.x1 + box.x2) / 2, (box.y1 + box.y2) / 2
    hw, hh = box.width * factor / 2, box.height * factor / 2
    return BoundingBox(max(0.0, cx - hw), max(0.0, cy - hh), min(float(width), cx + hw), min(float(height), cy + hh))


def normalized_pair_score(logit_pos: float, logit_neg: float) -> float:
    """Softmax weight of the second logit over the pair."""
    d = logit_pos - logit_neg
    if d >= 0:
        e = math.exp(-d)
        return e / (1.0 + e)
    return 1.0 / (1.0 + math.exp(d))


# ------------------------------------------------------------------ records

@dataclass(frozen=True)
class ImageEditRequest:
    source_path: str
    width: int
    height: int
    box: BoundingBox
    caption: str
    phrase: str
    original_phrase: str
    layout: tuple[tuple[BoundingBox, str], ...]
    edited_regions: tuple[int, ...]
    seed: int = 0

    def __post_init__(self):
        b = self.box
        if b.x1 < 0 or b.y1 < 0 or b.x2 > self.width or b.y2 > self.height:
            raise ValueError("target box outside image bounds")
        if self.phrase not in self.caption:
            raise ValueError("edited phrase does not occur in the edited caption")

    def to_wire(self) -> dict:
        return {
            "image": self.source_path,
            "box": self.box.as_list(),
            "caption": self.caption,
            "phrase": self.phrase,
            "layout": [{"box": b.as_list(), "phrase": p} for b, p in self.layout],
            "seed": self.seed,
        }

    def to_dict(self) -> dict:
        d = self.to_wire()
        d.update(width=self.width, height=self.height, original_phrase=self.original_phrase,
                 edited_regions=list(self.edited_regions))
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ImageEditRequest:
        return cls(d["image"], int(d["width"]), int(d["height"]), BoundingBox.from_list(d["box"]), d["caption"],
                   d["phrase"], d["original_phrase"],
                   tuple((BoundingBox.from_list(e["box"]), e["phrase"]) for e in d["layout"]),
                   tuple(d["edited_regions"]), int(d.get("seed", 0)))


@dataclass
class GeneratedImageRecord:
    sample_id: str
    caption: str  # original caption t
    request: ImageEditRequest | None
    output_path: str | None = None
    status: str = PENDING
    image_score: float | None = None
    region_scores: list[float] | None = None
    note: str | None = None
    edited_caption_regions: list[Region] = field(default_factory=list)
    record_id: str = ""

    @property
    def edited_caption(self) -> str:
        return self.request.caption if self.request else ""

    @property
    def region_score(self) -> float | None:
        return min(self.region_scores) if self.region_scores else None

    def edited_sample(self) -> GroundingSample:
        """The generated image with its (matching) edited caption as a grounding sample."""
        if self.request is None or self.output_path is None:
            raise ValueError("record has no generated image")
        img = ImageRef(self.output_path, self.request.width, self.request.height)
        return GroundingSample(self.record_id, img, self.request.caption, tuple(self.edited_caption_regions))

    def to_dict(self) -> dict:
        return {
            "record_id": self.record_id,
            "sample_id": self.sample_id,
            "caption": self.caption,
            "request": None if self.request is None else self.request.to_dict(),
            "output_path": self.output_path,
            "status": self.status,
            "image_score": self.image_score,
            "region_scores": self.region_scores,
            "region_score": self.region_score,
            "note": self.note,
            "edited_caption_regions": [{"box": r.box.as_list(), "span": r.span.as_list()}
                                       for r in self.edited_caption_regions],
        }

    @classmethod
    def from_dict(cls, d: dict) -> GeneratedImageRecord:
        if d.get("status") not in STATUSES:
            raise ValueError(f"unknown status {d.get('status')!r}")
        regions = [Region(BoundingBox.from_list(r["box"]), PhraseSpan(*r["span"]))
                   for r in d.get("edited_caption_regions", [])]
        req = d.get("request")
        return cls(d["sample_id"], d["caption"], None if req is None else ImageEditRequest.from_dict(req),
                   d.get("output_path"), d["status"], d.get("image_score"), d.get("region_scores"),
                   d.get("note"), regions, d.get("record_id", ""))


def remap_regions_after_fill(sample: GroundingSample, span: PhraseSpan, new_len: int) -> list[Region]:
    """Regions of the caption after replacing ``span`` with ``new_len`` characters.

    Regions partially overlapping the replaced span cannot be kept aligned and are dropped.
    """
    delta = new_len - (span.end - span.start)
    out = []
    for r in sample.regions:
        s, e = r.span.start, r.span.end
        if (s, e) == (span.start, span.end):
            out.append(Region(r.box, PhraseSpan(s, s + new_len)))
        elif e <= span.start:
            out.append(r)
        elif s >= span.end:
            out.append(Region(r.box, r.span.shifted(delta)))
        elif s <= span.start and e >= span.end:
            out.append(Region(r.box, PhraseSpan(s, e + delta)))
    return out


def build_edit_request(sample: GroundingSample, group: list[int], triplet: TripletSample, source_path: str,
                       seed: int = 0) -> tuple[ImageEditRequest, list[Region]]:
    """Inpainting request for the regions in ``group`` (all sharing one span)."""
    span = sample.regions[group[0]].span
    original = sample.caption[span.start:span.end]
    new_phrase = triplet.filled
    new_regions = remap_regions_after_fill(sample, span, len(new_phrase))
    layout = []
    for idx, r in enumerate(sample.regions):
        if idx in group:
            layout.append((r.box, new_phrase))
        else:
            layout.append((r.box, sample.caption[r.span.start:r.span.end]))
    req = ImageEditRequest(source_path, sample.image.width, sample.image.height, sample.regions[group[0]].box,
                           triplet.negative, new_phrase, original, tuple(layout), tuple(group), seed)
    return req, new_regions


def request_inpaint(record: GeneratedImageRecord, backend, out_path: Path) -> GeneratedImageRecord:
    """Ask ``backend`` for the edited image; dimension mismatches count as failures."""
    req = record.request
    try:
        path = Path(backend.inpaint(req, Path(out_path)))
        with Image.open(path) as im:
            size = im.size
        if size != (req.width, req.height):
            raise BackendError(f"inpaint returned {size[0]}x{size[1]}, expected {req.width}x{req.height}")
    except BackendUnavailable:
        raise
    except (BackendError, OSError) as exc:
        record.status = BACKEND_FAILED
        record.note = str(exc)
        record.output_path = None
        return record
    record.output_path = str(out_path)
    record.status = PENDING
    return record


# ------------------------------------------------------------------ filters

@dataclass(frozen=True)
class FilterConfig:
    box_threshold: float = 0.75
    image_threshold: float = 0.35
    region_threshold: float = 0.75
    crop_factor: float = 1.5
    skip_region: bool = False

    def __post_init__(self):
        if not 0 < self.box_threshold <= 1:
            raise ValueError("box threshold must be in (0, 1]")
        for name in ("image_threshold", "region_threshold"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.crop_factor < 1:
            raise ValueError("crop factor must be >= 1")


def _resolve(path: str, base: Path | None) -> Path:
    p = Path(path)
    return base / p if base is not None and not p.is_absolute() else p


def image_level_filter(record: GeneratedImageRecord, scorer, threshold: float = 0.35,
                       base: Path | None = None) -> GeneratedImageRecord:
    if record.status != PENDING:
        return record
    if record.image_score is None:
        try:
            lp, ln = scorer.score(_resolve(record.output_path, base), None, [record.caption, record.edited_caption])
        except (BackendError, ValueError, OSError) as exc:
            record.note = f"image scoring failed: {exc}"
            return record
        record.image_score = normalized_pair_score(lp, ln)
    if record.image_score < threshold:
        record.status = DROPPED_IMAGE
    return record


def region_level_filter(record: GeneratedImageRecord, scorer, threshold: float = 0.75, crop_factor: float = 1.5,
                        base: Path | None = None) -> GeneratedImageRecord:
    if record.status != PENDING or record.image_score is None:
        return record
    req = record.request
    if record.region_scores is None:
        scores = []
        try:
            for idx in req.edited_regions:
                box = req.layout[idx][0]
                crop = upscale_crop_box(box, crop_factor, req.width, req.height)
                lo, lm = scorer.score(_resolve(record.output_path, base), crop, [req.original_phrase, req.phrase])
                scores.append(normalized_pair_score(lo, lm))
        except (BackendError, ValueError, OSError) as exc:
            record.note = f"region scoring failed: {exc}"
            return record
        record.region_scores = scores
    if any(s < threshold for s in record.region_scores):
        record.status = DROPPED_REGION
    else:
        record.status = KEPT
    return record


@dataclass
class FilterReport:
    counts: dict[str, int]
    total: int
    stages: list[dict]

    @property
    def kept(self) -> int:
        return self.counts.get(KEPT, 0)

    @property
    def retention(self) -> float:
        return self.kept / self.total if self.total else 0.0

    def to_dict(self) -> dict:
        return {"total": self.total, "counts": dict(self.counts), "kept": self.kept,
                "retention": self.retention, "stages": self.stages}


def summarize_statuses(records: list[GeneratedImageRecord]) -> FilterReport:
    counts = Counter({s: 0 for s in STATUSES})
    counts.update(r.status for r in records)
    total = len(records)
    generated = total - counts[DROPPED_BOX]
    after_box = generated
    ok = generated - counts[BACKEND_FAILED]
    after_image = ok - counts[DROPPED_IMAGE]
    after_region = after_image - counts[DROPPED_REGION]
    stages = [
        {"stage": "candidates", "count": total},
        {"stage": "box_filter", "count": after_box},
        {"stage": "generated", "count": ok},
        {"stage": "image_filter", "count": after_image},
        {"stage": "region_filter", "count": after_region},
    ]
    return FilterReport(dict(counts), total, stages)


def reset_filter_status(record: GeneratedImageRecord) -> GeneratedImageRecord:
    """Undo a previous filter decision, keeping stored scores."""
    if record.status in (KEPT, DROPPED_IMAGE, DROPPED_REGION):
        record.status = PENDING
    return record


def run_filters(records: list[GeneratedImageRecord], scorer, config: FilterConfig | None = None,
                base: Path | None = None) -> tuple[list[GeneratedImageRecord], FilterReport]:
    """Image-level then region-level filtering; box filtering already happened upstream."""
    config = config or FilterConfig()
    for rec in records:
        reset_filter_status(rec)
        image_level_filter(rec, scorer, config.image_threshold, base)
        if config.skip_region:
            if rec.status == PENDING and rec.image_score is not None:
                rec.status = KEPT
        else:
            region_level_filter(rec, scorer, config.region_threshold, config.crop_factor, base)
    kept = [r for r in records if r.status == KEPT]
    return kept, summarize_statuses(records)


def write_records(records, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")


def load_records(path) -> list[GeneratedImageRecord]:
    with open(path, encoding="utf-8") as fh:
        return [GeneratedImageRecord.from_dict(json.loads(line)) for line in fh if line.strip()]
