"""Stage runners behind the CLI. Each stage reads and writes a fixed layout
under the output directory and stores only relative paths, so a run is
reproducible byte for byte from (inputs, config, seed)."""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

from PIL import Image

from neggen import analyzer, assembly, loss
from neggen.backends import (HttpInpaintBackend, HttpScorer, HttpTextBackend, ReplyParseError,
                             derive_seed)
from neggen.cache import Cache, file_hash
from neggen.config import PipelineConfig
from neggen.grounding import GroundingSample, build_vocabulary, load_dataset
from neggen.mock import MockInpainter, MockTextBackend, PaletteScorer, TableScorer
from neggen.negimage import (DROPPED_BOX, PENDING, FilterConfig, GeneratedImageRecord, build_edit_request,
                             editable_phrases, load_records, request_inpaint, run_filters, summarize_statuses,
                             write_records)
from neggen.negtext import (STRATEGIES, GenOptions, GenStats, NegativePair, SummaryContext, TripletSample,
                            bootstrap_triplets, extract_concepts, fill_mask, generate_from_summary,
                            incontext_negatives, llm_foil, load_pairs, load_substitutions, load_triplets,
                            mask_phrase, recombine, rule_foil, summarize_pairs, write_jsonl)

log = logging.getLogger(__name__)

TEXT_DIR = "text"
IMAGES_DIR = "images"
TRAIN_DIR = "train"
ANALYSIS_DIR = "analysis"


class MissingInputError(FileNotFoundError):
    pass


def require(path: Path, hint: str) -> Path:
    if not path.is_file():
        raise MissingInputError(f"missing input {path} ({hint})")
    return path


class EventLog:
    """JSONL event stream for one command; no timestamps so reruns compare equal."""

    def __init__(self, path: Path):
        path.parent.mkdir(parents=True, exist_ok=True)
        self.path = path
        self._fh = open(path, "w", encoding="utf-8")

    def emit(self, event: str, **fields) -> None:
        self._fh.write(json.dumps({"event": event, **fields}, sort_keys=True, ensure_ascii=False) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")


def phrase_groups(sample: GroundingSample) -> list[list[int]]:
    groups: dict[tuple[int, int], list[int]] = {}
    for idx, r in enumerate(sample.regions):
        groups.setdefault((r.span.start, r.span.end), []).append(idx)
    return [groups[k] for k in sorted(groups)]


def _parallel(cfg: PipelineConfig, fn, items):
    if cfg.max_inflight <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=cfg.max_inflight) as ex:
        return list(ex.map(fn, items))


# ------------------------------------------------------------------ backends

def text_backend(cfg: PipelineConfig, mock: bool, samples=()):
    if mock:
        subs = load_substitutions(require(cfg.resolve(cfg.dataset.substitutions), "substitution table"))
        return MockTextBackend(subs, corpus=[s.caption for s in samples], echo_rate=cfg.text.echo_rate)
    return HttpTextBackend.from_env(cfg.backends.text_url or None, timeout=cfg.backends.timeout)


def image_backend(cfg: PipelineConfig, mock: bool):
    if mock:
        return MockInpainter(base=cfg.image_root)
    return HttpInpaintBackend.from_env(cfg.backends.image_url or None, mode=cfg.backends.image_mode,
                                       base=cfg.image_root)


def scorer_backend(cfg: PipelineConfig, mock: bool, table: Path | None = None):
    if table is not None:
        return TableScorer.from_file(table)
    if mock:
        return PaletteScorer()
    return HttpScorer.from_env(cfg.backends.scorer_url or None, mode=cfg.backends.image_mode)


class CachingScorer:
    """Memoizes scorer logits on (image content, crop, texts)."""

    def __init__(self, scorer, cache: Cache, scorer_id: str):
        self.scorer = scorer
        self.cache = cache
        self.scorer_id = scorer_id

    def score(self, image_path, crop, texts):
        key = self.cache.key("score", {"image": file_hash(image_path), "crop": None if crop is None else crop.as_list(),
                                       "texts": list(texts)}, self.scorer_id)
        hit = self.cache.get_json(key)
        if hit is not None:
            return hit
        logits = self.scorer.score(image_path, crop, texts)
        self.cache.put_json(key, logits)
        return logits


def _backend_id(cfg: PipelineConfig, mock: bool, kind: str) -> str:
    if mock:
        return f"mock:{kind}"
    return {"text": cfg.backends.text_url, "image": cfg.backends.image_url, "scorer": cfg.backends.scorer_url}[kind]


def _opts(cfg: PipelineConfig) -> GenOptions:
    t = cfg.text
    return GenOptions(seed=cfg.seed, temperature=t.temperature, max_tokens=t.max_tokens, retries=t.retries)


def _text_slice(cfg: PipelineConfig) -> dict:
    d = cfg.section("text")
    d.pop("strategies")
    return d


# ------------------------------------------------------------------ gen-text

def _run_strategy(strategy: str, sample: GroundingSample, cfg: PipelineConfig, backend, subs, context, stats):
    caption, opts = sample.caption, _opts(cfg)
    pairs: list[NegativePair] = []
    triplets: list[TripletSample] = []
    if strategy == "rule_foil":
        concepts = extract_concepts(caption)
        pairs = rule_foil(caption, concepts, subs, derive_seed(cfg.seed, sample.id), sample_id=sample.id, stats=stats)
    elif strategy in ("llm_foil", "recombination"):
        try:
            concepts = extract_concepts(caption, backend, opts=opts, stats=stats)
        except ReplyParseError:
            stats.backend_failures += 1
            return pairs, triplets
        if strategy == "llm_foil" and concepts.ordered():
            pairs = llm_foil(caption, concepts, backend, cfg.text.llm_foil_count, opts=opts,
                             sample_id=sample.id, stats=stats)
        elif strategy == "recombination" and concepts.objects:
            pairs = recombine(caption, concepts.texts("objects"), backend, cfg.text.recombination_count,
                              opts=opts, sample_id=sample.id, stats=stats)
    elif strategy == "incontext_summary":
        pairs = incontext_negatives(caption, context, backend, cfg.text.incontext_k, cfg.text.incontext_count,
                                    opts=opts, sample_id=sample.id, stats=stats)
    elif strategy == "mask_fill":
        for group in phrase_groups(sample):
            masked, _ = mask_phrase(sample, group[0])
            trip = fill_mask(caption, masked, backend, opts=opts, region=group[0], sample_id=sample.id, stats=stats)
            if trip is not None:
                triplets.append(trip)
                pairs.append(NegativePair(caption, trip.negative, "mask_fill", trip.original, sample.id))
    else:
        raise ValueError(f"unknown strategy {strategy!r}")
    return pairs, triplets


def _summary_context(cfg: PipelineConfig, backend, cache: Cache, backend_id: str) -> SummaryContext:
    seed_pairs = load_pairs(require(cfg.resolve(cfg.dataset.seed_pairs), "seed pairs for in-context summary"))
    key = cache.key("summary", [p.to_dict() for p in seed_pairs], {"text": _text_slice(cfg), "seed": cfg.seed,
                                                                   "backend": backend_id})
    summary = cache.get_json(key)
    if summary is None:
        summary = summarize_pairs(seed_pairs, backend, opts=_opts(cfg)).summary
        cache.put_json(key, summary)
    return SummaryContext(summary, tuple(seed_pairs))


def gen_text(cfg: PipelineConfig, out: Path, cache: Cache, mock: bool, strategies=None,
             events: EventLog | None = None) -> dict[str, GenStats]:
    strategies = [s for s in STRATEGIES if s in (strategies or cfg.text.strategies)]
    samples = load_dataset(require(cfg.dataset_path, "dataset"))
    subs = load_substitutions(require(cfg.resolve(cfg.dataset.substitutions), "substitution table"))
    backend = text_backend(cfg, mock, samples)
    backend_id = _backend_id(cfg, mock, "text")
    subs_key = {k: subs[k] for k in sorted(subs)}
    context = _summary_context(cfg, backend, cache, backend_id) if "incontext_summary" in strategies else None
    text_dir = out / TEXT_DIR
    all_stats: dict[str, GenStats] = {}
    for strategy in strategies:
        def work(sample: GroundingSample):
            inputs = {"sample": sample.to_dict(), "subs": subs_key if strategy == "rule_foil" else None,
                      "summary": context.summary if context and strategy == "incontext_summary" else None}
            key = cache.key(f"gen-text/{strategy}", inputs,
                            {"text": _text_slice(cfg), "seed": cfg.seed, "backend": backend_id})
            hit = cache.get_json(key)
            if hit is not None:
                return hit
            stats = GenStats()
            pairs, triplets = _run_strategy(strategy, sample, cfg, backend, subs, context, stats)
            value = {"pairs": [p.to_dict() for p in pairs], "triplets": [t.to_dict() for t in triplets],
                     "stats": stats.as_dict()}
            cache.put_json(key, value)
            return value

        results = _parallel(cfg, work, samples)
        stats = GenStats()
        for r in results:
            stats.merge(GenStats(**r["stats"]))
        write_jsonl([p for r in results for p in r["pairs"]], text_dir / f"pairs_{strategy}.jsonl")
        if strategy == "mask_fill":
            write_jsonl([t for r in results for t in r["triplets"]], text_dir / "triplets.jsonl")
        all_stats[strategy] = stats
        if events:
            events.emit("strategy_done", strategy=strategy, samples=len(samples), **stats.as_dict())

    if context is not None and cfg.text.incontext_pool > 0:
        key = cache.key("gen-text/incontext_pool", context.summary,
                        {"text": _text_slice(cfg), "seed": cfg.seed, "backend": backend_id})
        hit = cache.get_json(key)
        if hit is None:
            stats = GenStats()
            pool = generate_from_summary(context, cfg.text.incontext_k, backend, cfg.text.incontext_pool,
                                         opts=_opts(cfg), stats=stats)
            hit = {"pairs": [p.to_dict() for p in pool], "stats": stats.as_dict()}
            cache.put_json(key, hit)
        write_jsonl(hit["pairs"], text_dir / "incontext_generated.jsonl")
        if events:
            events.emit("incontext_pool", **hit["stats"])

    # the union file is rebuilt from whatever per-strategy files exist
    union = []
    for s in STRATEGIES:
        p = text_dir / f"pairs_{s}.jsonl"
        if p.is_file():
            union.extend(load_pairs(p))
    write_jsonl(union, text_dir / "pairs.jsonl")
    stats_path = text_dir / "gen_stats.json"
    previous = json.loads(stats_path.read_text(encoding="utf-8")) if stats_path.is_file() else {}
    previous.update({k: v.as_dict() for k, v in all_stats.items()})
    write_json(stats_path, previous)
    return all_stats


# ------------------------------------------------------------------ gen-triplets

def gen_triplets(cfg: PipelineConfig, out: Path, cache: Cache, mock: bool, stage: int = 1, reviewed=None,
                 size: int | None = None, events: EventLog | None = None) -> list[TripletSample]:
    size = size or cfg.text.triplet_stage_size
    if stage == 1:
        seeds = load_triplets(require(cfg.resolve(cfg.dataset.seed_triplets), "seed triplets"))
        inputs = [t.to_dict() for t in seeds]
    else:
        if reviewed is None or not Path(reviewed).is_file():
            raise MissingInputError("review file required for stage 2")
        seeds = []
        inputs = [t.to_dict() for t in load_triplets(reviewed)]
    backend = text_backend(cfg, mock)
    key = cache.key("gen-triplets", {"stage": stage, "seeds": inputs, "size": size},
                    {"text": _text_slice(cfg), "seed": cfg.seed, "backend": _backend_id(cfg, mock, "text")})
    hit = cache.get_json(key)
    if hit is None:
        stats = GenStats()
        got = bootstrap_triplets(seeds, backend, size, stage=stage, reviewed_path=reviewed, k=cfg.text.incontext_k,
                                 per_call=cfg.text.triplet_per_call, opts=_opts(cfg), stats=stats)
        hit = {"triplets": [t.to_dict() for t in got], "stats": stats.as_dict()}
        cache.put_json(key, hit)
    write_jsonl(hit["triplets"], out / "triplets" / f"stage{stage}.jsonl")
    got = [TripletSample.from_dict(t) for t in hit["triplets"]]
    if stage == 1:
        # every stage-1 triplet goes to manual review before stage 2 may use it
        analyzer.write_review_bundle(got, out / "triplets" / "review", size=len(got), seed=cfg.seed)
    if events:
        events.emit("triplets_done", stage=stage, **hit["stats"])
    return got


# ------------------------------------------------------------------ gen-images / filter-images

def _filter_config(cfg: PipelineConfig, skip_region: bool) -> FilterConfig:
    return replace(cfg.filters, skip_region=skip_region or cfg.filters.skip_region)


def _triplet_lookup(cfg, out, cache, mock, samples, events) -> dict[tuple[str, int], TripletSample]:
    path = out / TEXT_DIR / "triplets.jsonl"
    if path.is_file():
        return {(t.sample_id, t.region): t for t in load_triplets(path)}
    if events:
        events.emit("inline_mask_fill", reason="no triplets file")
    backend = text_backend(cfg, mock, samples)
    backend_id = _backend_id(cfg, mock, "text")

    def work(sample):
        key = cache.key("gen-text/mask_fill", {"sample": sample.to_dict(), "subs": None, "summary": None},
                        {"text": _text_slice(cfg), "seed": cfg.seed, "backend": backend_id})
        hit = cache.get_json(key)
        if hit is None:
            stats = GenStats()
            _, trips = _run_strategy("mask_fill", sample, cfg, backend, None, None, stats)
            hit = {"pairs": [NegativePair(t.positive, t.negative, "mask_fill", t.original, t.sample_id).to_dict()
                             for t in trips],
                   "triplets": [t.to_dict() for t in trips], "stats": stats.as_dict()}
            cache.put_json(key, hit)
        return hit

    found = {}
    for r in _parallel(cfg, work, samples):
        for t in r["triplets"]:
            t = TripletSample.from_dict(t)
            found[(t.sample_id, t.region)] = t
    return found


def filter_records(cfg: PipelineConfig, out: Path, records, scorer, skip_region: bool,
                   events: EventLog | None = None):
    fcfg = _filter_config(cfg, skip_region)
    if fcfg.skip_region:
        for r in records:
            r.region_scores = None
    kept, report = run_filters(records, scorer, fcfg, base=out)
    write_records(records, out / IMAGES_DIR / "records.jsonl")
    doc = report.to_dict()
    doc["thresholds"] = asdict(fcfg)
    write_json(out / IMAGES_DIR / "filter_report.json", doc)
    if events:
        events.emit("filters_done", **{k: v for k, v in doc.items() if k in ("total", "kept", "retention", "counts")})
    return kept, report


def gen_images(cfg: PipelineConfig, out: Path, cache: Cache, mock: bool, skip_region: bool = False,
               scores: Path | None = None, events: EventLog | None = None):
    samples = load_dataset(require(cfg.dataset_path, "dataset"))
    triplets = _triplet_lookup(cfg, out, cache, mock, samples, events)
    records: list[GeneratedImageRecord] = []
    todo: list[GeneratedImageRecord] = []
    skipped = 0
    for sample in samples:
        editable, excluded = editable_phrases(sample, cfg.filters.box_threshold)
        for group in editable + excluded:
            rid = f"{sample.id}-r{group[0]}"
            if group in excluded:
                records.append(GeneratedImageRecord(sample.id, sample.caption, None, status=DROPPED_BOX,
                                                    note="a box of this phrase covers another box", record_id=rid))
                continue
            trip = triplets.get((sample.id, group[0]))
            if trip is None:
                skipped += 1
                continue
            req, regions = build_edit_request(sample, group, trip, sample.image.path, derive_seed(cfg.seed, rid))
            rec = GeneratedImageRecord(sample.id, sample.caption, req, record_id=rid, edited_caption_regions=regions)
            records.append(rec)
            todo.append(rec)
    records.sort(key=lambda r: r.record_id)
    inpainter = image_backend(cfg, mock)
    image_id = _backend_id(cfg, mock, "image")
    gen_dir = out / IMAGES_DIR / "gen"

    def work(rec: GeneratedImageRecord):
        rel = f"{IMAGES_DIR}/gen/{rec.record_id}.png"
        dest = out / rel
        key = cache.key("inpaint", rec.request.to_dict(), image_id)
        if cache.restore_file(key, dest, ".png"):
            rec.output_path, rec.status = rel, PENDING
            return rec
        request_inpaint(rec, inpainter, dest)
        if rec.status == PENDING:
            rec.output_path = rel
            cache.put_file(key, dest, ".png")
        return rec

    gen_dir.mkdir(parents=True, exist_ok=True)
    _parallel(cfg, work, todo)
    if events:
        events.emit("inpaint_done", requested=len(todo), box_dropped=sum(r.status == DROPPED_BOX for r in records),
                    no_triplet=skipped)
    scorer = CachingScorer(scorer_backend(cfg, mock, scores), cache,
                           f"table:{file_hash(scores)}" if scores else _backend_id(cfg, mock, "scorer"))
    return filter_records(cfg, out, records, scorer, skip_region, events)


def filter_images(cfg: PipelineConfig, out: Path, cache: Cache, mock: bool, skip_region: bool = False,
                  scores: Path | None = None, rescore: bool = False, events: EventLog | None = None):
    records = load_records(require(out / IMAGES_DIR / "records.jsonl", "run gen-images first"))
    if rescore:
        for r in records:
            r.image_score = r.region_scores = None
    scorer = CachingScorer(scorer_backend(cfg, mock, scores), cache,
                           f"table:{file_hash(scores)}" if scores else _backend_id(cfg, mock, "scorer"))
    return filter_records(cfg, out, records, scorer, skip_region, events)


# ------------------------------------------------------------------ assemble

def composite(sample: assembly.TrainingSample, image_root: Path, out: Path, dest: Path) -> None:
    canvas = Image.new("RGB", tuple(int(v) for v in sample.canvas), (0, 0, 0))
    for im in sample.images:
        src = (out if im.root == "out" else image_root) / im.path
        with Image.open(src) as tile:
            tile = tile.convert("RGB")
            if tile.size != (im.width, im.height):
                raise assembly.LayoutError(f"{src} is {tile.size}, layout expects {(im.width, im.height)}")
            canvas.paste(tile, (int(im.x), int(im.y)))
    dest.parent.mkdir(parents=True, exist_ok=True)
    canvas.save(dest, format="PNG")


def assemble(cfg: PipelineConfig, out: Path, options=None, k: int | None = None,
             events: EventLog | None = None) -> dict:
    options = list(options or cfg.assembly.options)
    k = k if k is not None else cfg.assembly.k
    sep = cfg.assembly.separator
    samples = load_dataset(require(cfg.dataset_path, "dataset"))
    by_id = {s.id: s for s in samples}
    built: list[assembly.TrainingSample] = []
    shortfall = 0
    if "text" in options:
        pool: dict[str, list[NegativePair]] = {}
        for p in load_pairs(require(out / TEXT_DIR / "pairs.jsonl", "run gen-text first")):
            pool.setdefault(p.sample_id, []).append(p)
        for s in samples:
            ts, short = assembly.assemble_text_sample(s, pool.get(s.id, []), k, derive_seed(cfg.seed, "text", s.id),
                                                      sep)
            shortfall += short
            built.append(ts)
    if "generated" in options or "pair" in options:
        records = load_records(require(out / IMAGES_DIR / "records.jsonl", "run gen-images first"))
        kept = [r for r in records if r.status == "kept"]
        if "generated" in options:
            for r in kept:
                built.append(assembly.make_negative_grounding_sample(r, derive_seed(cfg.seed, "gen", r.record_id), sep))
        if "pair" in options:
            for r in kept:
                ts = assembly.pack_pair_sample(by_id[r.sample_id], r, derive_seed(cfg.seed, "pair", r.record_id), sep)
                rel = f"{TRAIN_DIR}/composites/{r.record_id}.png"
                composite(ts, cfg.image_root, out, out / rel)
                ts.composite = rel
                built.append(ts)
    manifest = assembly.emit_training_set(built, out / TRAIN_DIR / "train.jsonl")
    if events:
        events.emit("assembled", count=manifest["count"], shortfall=shortfall, options=options, k=k,
                    sha256=manifest["sha256"])
    return manifest


# ------------------------------------------------------------------ reports

def analyze(cfg: PipelineConfig, out: Path, labels: Path | None = None, events: EventLog | None = None) -> dict:
    pairs = load_pairs(require(out / TEXT_DIR / "pairs.jsonl", "run gen-text first"))
    samples = load_dataset(require(cfg.dataset_path, "dataset"))
    vocab = build_vocabulary(samples)
    reports = analyzer.diversity_reports(pairs, vocab)
    adir = out / ANALYSIS_DIR
    written = analyzer.write_diversity_csvs(reports, adir)
    rec_path = out / IMAGES_DIR / "records.jsonl"
    if rec_path.is_file():
        records = load_records(rec_path)
        rows = analyzer.filter_retention_stats([("pipeline", summarize_statuses(records))])
        written["fig9_retention.csv"] = analyzer.write_retention_csv(rows, adir / "fig9_retention.csv")
        if labels is not None:
            table = json.loads(require(Path(labels), "quality labels").read_text(encoding="utf-8"))
            q = analyzer.quality_by_stage(records, {k: bool(v) for k, v in table.items()})
            write_json(adir / "quality.json", q)
    if events:
        events.emit("analyzed", strategies=[r.strategy for r in reports], files=sorted(written))
    return {name: str(p.relative_to(out)) for name, p in written.items()}


def loss_check(out: Path, predictions: Path, train: Path | None = None, params: loss.FocalParams = loss.FocalParams(),
               events: EventLog | None = None) -> dict:
    samples = assembly.load_training_set(require(train or out / TRAIN_DIR / "train.jsonl", "run assemble first"))
    preds = loss.load_predictions(require(Path(predictions), "predictions file"))
    known = {s.id for s in samples}
    unknown = sorted(set(preds) - known)
    if unknown:
        raise ValueError(f"predictions reference unknown samples: {', '.join(unknown[:5])}")
    rows = []
    for s in samples:
        p = preds.get(s.id, [])
        res = loss.grounding_loss(p, s, params)
        rows.append({"sample_id": s.id, "predictions": len(p), "loss": res.loss,
                     "assignment": list(res.match.assignment),
                     "gradient_check": all(loss.gradient_check(x, s, params) for x in p[:1]) if p else None})
    report = {"params": asdict(params), "samples": rows,
              "mean_loss": sum(r["loss"] for r in rows) / len(rows) if rows else 0.0}
    write_json(out / "loss" / "report.json", report)
    if events:
        events.emit("loss_checked", samples=len(rows))
    return report


def sample_report(out: Path, size: int = 100, seed: int = 0, source: str = "images",
                  events: EventLog | None = None) -> list[dict]:
    if source == "images":
        records = load_records(require(out / IMAGES_DIR / "records.jsonl", "run gen-images first"))
    else:
        records = load_pairs(require(out / TEXT_DIR / "pairs.jsonl", "run gen-text first"))
    rows = analyzer.write_review_bundle(records, out / "review", size, seed)
    if events:
        events.emit("review_bundle", source=source, size=len(rows))
    return rows
