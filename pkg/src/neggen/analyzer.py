"""Corpus statistics over generated negatives and filter-retention reporting."""
from __future__ import annotations

import csv
import html
import json
import random
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

from neggen.grounding import word_tokens
from neggen.lexicon import POS_GROUPS, PosTagger
from neggen.negimage import BACKEND_FAILED, DROPPED_BOX, DROPPED_IMAGE, DROPPED_REGION
from neggen.negtext import NegativePair, TripletSample

METRICS = {
    "length": "number of whitespace-separated tokens in the negative text",
    "changed_words": "size of the multiset difference tokens(negative) - tokens(positive), "
                     "tokens are case-folded alphanumeric runs",
    "extra_unique_words": "distinct case-folded tokens found in negatives but not in the source "
                          "vocabulary, counted once each, per 1000 negatives",
}


def _normalize(counts: Counter) -> dict[int, float]:
    total = sum(counts.values())
    return {k: counts[k] / total for k in sorted(counts)}


def word_count_histogram(negatives: list[str]) -> dict[int, float]:
    if not negatives:
        raise ValueError("no pairs for strategy")
    return _normalize(Counter(len(t.split()) for t in negatives))


def changed_word_count(positive: str, negative: str) -> int:
    diff = Counter(word_tokens(negative)) - Counter(word_tokens(positive))
    return sum(diff.values())


def changed_word_histogram(pairs: list[NegativePair]) -> dict[int, float]:
    if not pairs:
        raise ValueError("no pairs for strategy")
    return _normalize(Counter(changed_word_count(p.positive, p.negative) for p in pairs))


def extra_unique_words(negatives: list[str], vocab) -> set[str]:
    seen = {tok for text in negatives for tok in word_tokens(text)}
    return {tok for tok in seen if tok not in vocab}


def extra_unique_words_per_k(negatives: list[str], vocab, tagger: PosTagger | None = None,
                             k: int = 1000) -> dict[str, float]:
    tagger = tagger or PosTagger()
    rates = {g: 0.0 for g in POS_GROUPS}
    if not negatives:
        return rates
    groups = Counter(tagger.group(tok) for tok in extra_unique_words(negatives, vocab))
    for g in POS_GROUPS:
        rates[g] = groups[g] * k / len(negatives)
    return rates


@dataclass
class DiversityReport:
    strategy: str
    count: int
    lengths: dict[int, float]
    changed: dict[int, float]
    extra_words: dict[str, float]
    metrics: dict = field(default_factory=lambda: dict(METRICS))

    def to_dict(self) -> dict:
        return {"strategy": self.strategy, "count": self.count,
                "lengths": {str(k): v for k, v in self.lengths.items()},
                "changed": {str(k): v for k, v in self.changed.items()},
                "extra_words_per_1000": self.extra_words, "metrics": self.metrics}


def diversity_reports(pairs: list[NegativePair], vocab, tagger: PosTagger | None = None) -> list[DiversityReport]:
    by_strategy: dict[str, list[NegativePair]] = {}
    for p in pairs:
        by_strategy.setdefault(p.strategy, []).append(p)
    out = []
    for strategy in sorted(by_strategy):
        group = by_strategy[strategy]
        negs = [p.negative for p in group]
        out.append(DiversityReport(strategy, len(group), word_count_histogram(negs), changed_word_histogram(group),
                                   extra_unique_words_per_k(negs, vocab, tagger)))
    return out


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(x: float) -> str:
    return repr(float(x))


def write_diversity_csvs(reports: list[DiversityReport], out_dir) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {name: out_dir / name for name in ("fig5_lengths.csv", "fig6_changed.csv", "fig7_extra_words.csv")}
    _write_csv(paths["fig5_lengths.csv"], ["strategy", "words", "fraction"],
               [[r.strategy, k, _fmt(v)] for r in reports for k, v in r.lengths.items()])
    _write_csv(paths["fig6_changed.csv"], ["strategy", "changed_words", "fraction"],
               [[r.strategy, k, _fmt(v)] for r in reports for k, v in r.changed.items()])
    _write_csv(paths["fig7_extra_words.csv"], ["strategy", "group", "per_1000"],
               [[r.strategy, g, _fmt(r.extra_words[g])] for r in reports for g in POS_GROUPS])
    report = {"metrics": METRICS, "strategies": [r.to_dict() for r in reports]}
    (out_dir / "diversity.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return paths


# ------------------------------------------------------------------ filtering

def filter_retention_stats(reports) -> list[dict]:
    """Kept fraction after each stage, one row per (run, stage).

    ``reports`` is a sequence of ``FilterReport`` or ``(name, FilterReport)``.
    """
    rows = []
    for n, item in enumerate(reports):
        name, report = item if isinstance(item, tuple) else (f"run{n}", item)
        if not report.total:
            continue
        for stage in report.stages:
            rows.append({"run": name, "stage": stage["stage"], "count": stage["count"],
                         "fraction": stage["count"] / report.total})
    return rows


def quality_by_stage(records, labels: dict[str, bool]) -> list[dict]:
    """Share of human-labelled good images among the records surviving each filter stage."""
    generated = [r for r in records if r.status != BACKEND_FAILED and r.record_id in labels]
    stages = [
        ("no_filter", generated),
        ("box_filter", [r for r in generated if r.status != DROPPED_BOX]),
        ("box_image_filter", [r for r in generated if r.status not in (DROPPED_BOX, DROPPED_IMAGE)]),
        ("box_image_region_filter", [r for r in generated if r.status not in (DROPPED_BOX, DROPPED_IMAGE, DROPPED_REGION)]),
    ]
    rows = []
    for name, pop in stages:
        good = sum(1 for r in pop if labels[r.record_id])
        rows.append({"stage": name, "count": len(pop), "good": good, "fraction": good / len(pop) if pop else 0.0})
    return rows


def write_retention_csv(rows: list[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _write_csv(path, ["run", "stage", "count", "fraction"],
               [[r["run"], r["stage"], r["count"], _fmt(r["fraction"])] for r in rows])
    return path


# ------------------------------------------------------------------ review bundle

def sample_for_review(records: list, size: int = 100, seed: int = 0) -> list:
    if size < 0:
        raise ValueError("size must be >= 0")
    idx = sorted(random.Random(seed).sample(range(len(records)), min(size, len(records))))
    return [records[i] for i in idx]


def _review_row(rec) -> dict:
    if isinstance(rec, NegativePair):
        return {"id": rec.sample_id, "image": None, "positive": rec.positive, "negative": rec.negative,
                "status": rec.strategy}
    if isinstance(rec, TripletSample):
        return {"id": rec.sample_id, "image": None, "positive": rec.positive, "negative": rec.negative,
                "status": rec.masked}
    return {"id": rec.record_id, "image": rec.output_path, "positive": rec.caption,
            "negative": rec.edited_caption, "status": rec.status}


def write_review_bundle(records: list, out_dir, size: int = 100, seed: int = 0) -> list[dict]:
    """Sampled records as ``records.jsonl`` plus an ``index.html`` for manual inspection."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = [_review_row(r) for r in sample_for_review(records, size, seed)]
    with open(out_dir / "records.jsonl", "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")
    items = []
    for row in rows:
        img = f'<img src="{html.escape(row["image"])}" width="240">' if row["image"] else ""
        items.append(f"<tr><td>{html.escape(row['id'])}</td><td>{img}</td>"
                     f"<td>{html.escape(row['positive'])}</td><td>{html.escape(row['negative'])}</td>"
                     f"<td>{html.escape(row['status'])}</td></tr>")
    page = ("<!doctype html>\n<html><head><meta charset=\"utf-8\"><title>review sample</title></head><body>\n"
            f"<p>{len(rows)} records</p>\n<table border=\"1\">\n"
            "<tr><th>id</th><th>image</th><th>original</th><th>negative</th><th>status</th></tr>\n"
            + "\n".join(items) + "\n</table>\n</body></html>\n")
    (out_dir / "index.html").write_text(page, encoding="utf-8")
    return rows
