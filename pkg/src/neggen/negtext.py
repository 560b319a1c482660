"""Negative caption generation: rule foils, backend foils, re-combination,
in-context summaries, and mask-and-fill triplets."""
from __future__ import annotations

import json
import logging
import math
import random
import re
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from neggen import prompts
from neggen.backends import (
    BackendError,
    BackendUnavailable,
    GenerationRequest,
    ReplyParseError,
    call_json,
    call_text,
    derive_seed,
)
from neggen.grounding import GroundingSample, PhraseSpan
from neggen.lexicon import parse_concepts
from neggen.prompts import MASK_TOKEN

log = logging.getLogger(__name__)

STRATEGIES = ("rule_foil", "llm_foil", "recombination", "incontext_summary", "mask_fill")
CONCEPT_KINDS = ("objects", "attributes", "relationships")


def normalize_ws(text: str) -> str:
    return " ".join(text.split())


def is_negative_of(negative: str, positive: str) -> bool:
    return bool(normalize_ws(negative)) and normalize_ws(negative) != normalize_ws(positive)


def find_phrase(text: str, phrase: str, occurrence: int = 0) -> tuple[int, int] | None:
    """Case-insensitive whole-word search; returns the ``occurrence``-th hit."""
    if not phrase.strip():
        return None
    pattern = re.compile(r"(?<![^\W_])" + re.escape(phrase) + r"(?![^\W_])", re.IGNORECASE)
    for k, m in enumerate(pattern.finditer(text)):
        if k == occurrence:
            return m.start(), m.end()
    return None


def match_case(original: str, replacement: str) -> str:
    if original[:1].isupper() and replacement:
        return replacement[0].upper() + replacement[1:]
    return replacement


@dataclass
class GenStats:
    candidates: int = 0
    emitted: int = 0
    dropped_equal: int = 0
    dropped_malformed: int = 0
    retries: int = 0
    skips: int = 0
    backend_failures: int = 0

    def merge(self, other: GenStats) -> GenStats:
        for f in fields(self):
            setattr(self, f.name, getattr(self, f.name) + getattr(other, f.name))
        return self

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Concept:
    text: str
    kind: str
    anchored: bool = True
    occurrence: int = 0  # which occurrence of ``text`` in the caption


@dataclass(frozen=True)
class ConceptSet:
    caption: str
    objects: tuple[Concept, ...] = ()
    attributes: tuple[Concept, ...] = ()
    relationships: tuple[Concept, ...] = ()

    def ordered(self) -> list[Concept]:
        """Visiting order: objects, then attributes, then relationships."""
        return [*self.objects, *self.attributes, *self.relationships]

    def texts(self, kind: str) -> list[str]:
        return [c.text for c in getattr(self, kind)]

    @classmethod
    def from_lists(cls, caption: str, lists: dict) -> ConceptSet:
        seen: dict[str, int] = {}
        groups = {}
        for kind in CONCEPT_KINDS:
            items = []
            for raw in lists.get(kind) or []:
                if not isinstance(raw, str) or not raw.strip():
                    continue
                text = raw.strip()
                key = text.casefold()
                occ = seen.get(key, 0)
                anchored = find_phrase(caption, text, occ) is not None
                if anchored:
                    seen[key] = occ + 1
                items.append(Concept(text, kind, anchored, occ if anchored else 0))
            groups[kind] = tuple(items)
        return cls(caption, **groups)


@dataclass(frozen=True)
class NegativePair:
    positive: str
    negative: str
    strategy: str
    changed_concept: str | None = None
    sample_id: str = ""

    def to_dict(self) -> dict:
        return {"sample_id": self.sample_id, "positive": self.positive, "negative": self.negative,
                "strategy": self.strategy, "changed_concept": self.changed_concept}

    @classmethod
    def from_dict(cls, obj: dict) -> NegativePair:
        return cls(obj["positive"], obj["negative"], obj.get("strategy", "incontext_summary"),
                   obj.get("changed_concept"), obj.get("sample_id", ""))


@dataclass(frozen=True)
class TripletSample:
    positive: str
    masked: str
    negative: str
    region: int = -1  # -1 when the triplet is not tied to a dataset region
    sample_id: str = ""

    def to_dict(self) -> dict:
        return {"positive": self.positive, "masked": self.masked, "negative": self.negative,
                "region": self.region, "sample_id": self.sample_id}

    @classmethod
    def from_dict(cls, obj: dict) -> TripletSample:
        return cls(obj["positive"], obj["masked"], obj["negative"], int(obj.get("region", -1)),
                   obj.get("sample_id", ""))

    @property
    def filled(self) -> str:
        prefix, suffix = self.masked.split(MASK_TOKEN)
        return self.negative[len(prefix):len(self.negative) - len(suffix)]

    @property
    def original(self) -> str:
        prefix, suffix = self.masked.split(MASK_TOKEN)
        return self.positive[len(prefix):len(self.positive) - len(suffix)]


@dataclass(frozen=True)
class SummaryContext:
    summary: str
    exemplars: tuple[NegativePair, ...]


@dataclass
class GenOptions:
    """Request knobs shared by every backend call."""

    seed: int = 0
    temperature: float = 0.7
    max_tokens: int = 512
    retries: int = 3

    def request(self, prompt: str, *seed_parts) -> GenerationRequest:
        return GenerationRequest(prompt, self.max_tokens, self.temperature, derive_seed(self.seed, *seed_parts))


# ------------------------------------------------------------------ concepts

def extract_concepts(caption: str, backend=None, *, opts: GenOptions | None = None,
                     lexicon: dict | None = None, stats: GenStats | None = None) -> ConceptSet:
    """Concepts from the backend's JSON reply, or from the pattern parser when
    ``backend`` is None. Raises ``ReplyParseError`` once retries run out."""
    if not caption.strip():
        raise ValueError("caption is empty")
    if backend is None:
        return ConceptSet.from_lists(caption, parse_concepts(caption, lexicon))
    opts = opts or GenOptions()

    def parse(text):
        obj = prompts.parse_json_reply(text)
        if not isinstance(obj, dict) or not any(k in obj for k in CONCEPT_KINDS):
            raise ValueError("reply lacks concept lists")
        return obj

    obj = call_text(backend, opts.request(prompts.render_extract_concepts(caption), "concepts", caption),
                    retries=opts.retries, parse=parse, stats=stats)
    return ConceptSet.from_lists(caption, obj)


def _emit(pairs: list, stats: GenStats, caption: str, negative, strategy: str,
          concept: str | None, sample_id: str) -> None:
    stats.candidates += 1
    if not isinstance(negative, str) or not negative.strip():
        stats.dropped_malformed += 1
    elif not is_negative_of(negative, caption):
        stats.dropped_equal += 1
    else:
        stats.emitted += 1
        pairs.append(NegativePair(caption, negative.strip(), strategy, concept, sample_id))


# ------------------------------------------------------------------ strategies

def rule_foil(caption: str, concepts: ConceptSet, substitutions: dict[str, list[str]], seed: int = 0,
              *, sample_id: str = "", stats: GenStats | None = None) -> list[NegativePair]:
    """One foil per concept that has a substitution candidate.

    Only the concept's own occurrence is rewritten: the whole phrase when the
    table knows it, otherwise its last word.
    """
    stats = stats if stats is not None else GenStats()
    table = {k.casefold(): v for k, v in substitutions.items()}
    pairs: list[NegativePair] = []
    for idx, concept in enumerate(concepts.ordered()):
        loc = find_phrase(caption, concept.text, concept.occurrence)
        if loc is None:
            continue
        start, end = loc
        phrase = caption[start:end]
        if phrase.casefold() in table:
            target = (start, end)
            key = phrase.casefold()
        else:
            words = list(re.finditer(r"[^\W_]+", phrase))
            if not words or words[-1].group().casefold() not in table:
                continue
            target = (start + words[-1].start(), start + words[-1].end())
            key = words[-1].group().casefold()
        original = caption[target[0]:target[1]]
        cands = [c for c in table[key] if c.casefold() != original.casefold()]
        if not cands:
            continue
        choice = random.Random(derive_seed(seed, "rule_foil", caption, idx)).choice(cands)
        negative = caption[:target[0]] + match_case(original, choice) + caption[target[1]:]
        _emit(pairs, stats, caption, negative, "rule_foil", concept.text, sample_id)
    return pairs


def llm_foil(caption: str, concepts: ConceptSet, backend, count: int = 2, *, opts: GenOptions | None = None,
             sample_id: str = "", stats: GenStats | None = None) -> list[NegativePair]:
    if not concepts.ordered():
        raise ValueError("no concepts to foil")
    opts = opts or GenOptions()
    stats = stats if stats is not None else GenStats()
    pairs: list[NegativePair] = []
    for idx, concept in enumerate(concepts.ordered()):
        prompt = prompts.render_foil(caption, [concept.text], count)
        try:
            reply = call_json(backend, opts.request(prompt, "llm_foil", caption, idx),
                              retries=opts.retries, stats=stats)
        except BackendUnavailable:
            raise
        except BackendError as exc:
            log.info("foil of %r failed: %s", concept.text, exc)
            stats.backend_failures += 1
            continue
        results = reply.get("results") if isinstance(reply, dict) else None
        if not isinstance(results, list):
            stats.dropped_malformed += 1
            stats.candidates += 1
            continue
        for entry in results:
            negs = entry.get("negative_texts") if isinstance(entry, dict) else None
            for neg in negs if isinstance(negs, list) else [None]:
                _emit(pairs, stats, caption, neg, "llm_foil", concept.text, sample_id)
    return pairs


def recombine(caption: str, objects: list[str], backend, count: int = 10, *, opts: GenOptions | None = None,
              sample_id: str = "", stats: GenStats | None = None) -> list[NegativePair]:
    opts = opts or GenOptions()
    stats = stats if stats is not None else GenStats()
    prompt = prompts.render_recombine(caption, list(objects), count)
    try:
        reply = call_json(backend, opts.request(prompt, "recombination", caption), retries=opts.retries, stats=stats)
    except BackendUnavailable:
        raise
    except BackendError as exc:
        log.info("recombination failed for %r: %s", caption, exc)
        stats.backend_failures += 1
        return []
    generated = reply.get("generated") if isinstance(reply, dict) else None
    pairs: list[NegativePair] = []
    for neg in (generated if isinstance(generated, list) else [None])[:count]:
        _emit(pairs, stats, caption, neg, "recombination", None, sample_id)
    return pairs


def summarize_pairs(seed_pairs: list[NegativePair], backend, *, opts: GenOptions | None = None,
                    stats: GenStats | None = None) -> SummaryContext:
    if not seed_pairs:
        raise ValueError("summarize_pairs needs at least one seed pair")
    opts = opts or GenOptions()
    prompt = prompts.render_summarize_pairs([(p.positive, p.negative) for p in seed_pairs])

    def parse(text):
        if not text.strip():
            raise ValueError("empty summary")
        return text.strip()

    summary = call_text(backend, opts.request(prompt, "summary"), retries=opts.retries, parse=parse, stats=stats)
    return SummaryContext(summary, tuple(seed_pairs))


def _pick_exemplars(context: SummaryContext, k: int, rng: random.Random) -> list[NegativePair]:
    if k < 1:
        raise ValueError("in-context k must be >= 1")
    return rng.sample(list(context.exemplars), min(k, len(context.exemplars)))


def generate_from_summary(context: SummaryContext, k: int, backend, count: int = 20, *,
                          opts: GenOptions | None = None, stats: GenStats | None = None) -> list[NegativePair]:
    """New (input, negative) pairs continued from a numbered in-context prompt."""
    opts = opts or GenOptions()
    stats = stats if stats is not None else GenStats()
    exemplars = _pick_exemplars(context, k, random.Random(derive_seed(opts.seed, "exemplars")))
    prompt = prompts.render_incontext_pairs(context.summary, [(p.positive, p.negative) for p in exemplars], count)
    text = call_text(backend, opts.request(prompt, "incontext", count), retries=opts.retries, stats=stats)
    items, malformed = prompts.parse_numbered_items(text, len(exemplars) + 1, ("input", "negative"), count)
    stats.candidates += malformed
    stats.dropped_malformed += malformed
    pairs: list[NegativePair] = []
    for item in items:
        _emit(pairs, stats, item["input"], item["negative"], "incontext_summary", None, "")
    return pairs


def incontext_negatives(caption: str, context: SummaryContext, backend, k: int = 3, count: int = 1, *,
                        opts: GenOptions | None = None, sample_id: str = "",
                        stats: GenStats | None = None) -> list[NegativePair]:
    """Negatives for an existing caption: it is placed as the last in-context item."""
    opts = opts or GenOptions()
    stats = stats if stats is not None else GenStats()
    pairs: list[NegativePair] = []
    for n in range(count):
        rng = random.Random(derive_seed(opts.seed, "incontext_caption", caption, n))
        exemplars = _pick_exemplars(context, k, rng)
        prompt = prompts.render_incontext_caption(
            context.summary, [(p.positive, p.negative) for p in exemplars], caption)
        try:
            text = call_text(backend, opts.request(prompt, "incontext_caption", caption, n),
                             retries=opts.retries, stats=stats)
        except BackendUnavailable:
            raise
        except BackendError:
            stats.backend_failures += 1
            continue
        lines = [ln.strip() for ln in text.strip().splitlines() if ln.strip()]
        neg = re.sub(r"^\d+\.\s*Negative\s*:\s*", "", lines[0]) if lines else None
        _emit(pairs, stats, caption, neg, "incontext_summary", None, sample_id)
    return pairs


# ------------------------------------------------------------------ mask and fill

def mask_phrase(sample: GroundingSample, index: int) -> tuple[str, PhraseSpan]:
    if not 0 <= index < len(sample.regions):
        raise IndexError(f"region index {index} out of range for sample {sample.id!r}")
    span = sample.regions[index].span
    masked = sample.caption[:span.start] + MASK_TOKEN + sample.caption[span.end:]
    return masked, PhraseSpan(span.start, span.start + len(MASK_TOKEN))


def triplet_problem(positive: str, masked: str, negative: str) -> str | None:
    """Why (positive, masked, negative) is not a valid triplet, or None."""
    if masked.count(MASK_TOKEN) != 1:
        return "masked text must contain exactly one [Mask]"
    prefix, suffix = masked.split(MASK_TOKEN)
    for name, text in (("positive", positive), ("negative", negative)):
        if len(text) <= len(prefix) + len(suffix) or not (text.startswith(prefix) and text.endswith(suffix)):
            return f"{name} does not follow the masked template"
        filled = text[len(prefix):len(text) - len(suffix)]
        if not filled.strip() or MASK_TOKEN in filled:
            return f"{name} fills [Mask] with nothing usable"
    if not is_negative_of(negative, positive):
        return "negative equals positive"
    return None


def fill_mask(positive: str, masked: str, backend, *, opts: GenOptions | None = None, region: int = -1,
              sample_id: str = "", stats: GenStats | None = None) -> TripletSample | None:
    """Fill the single ``[Mask]``; returns None (and records a skip) when every
    attempt violates the template or repeats the original text."""
    if masked.count(MASK_TOKEN) != 1:
        raise ValueError("masked text must contain exactly one [Mask]")
    prefix, suffix = masked.split(MASK_TOKEN)
    if not (positive.startswith(prefix) and positive.endswith(suffix)) or len(positive) <= len(prefix) + len(suffix):
        raise ValueError("positive text does not match the masked template")
    opts = opts or GenOptions()
    stats = stats if stats is not None else GenStats()

    def parse(text):
        lines = [ln.strip() for ln in text.strip().splitlines() if ln.strip()]
        neg = lines[0].strip('"') if lines else ""
        problem = triplet_problem(positive, masked, neg)
        if problem:
            raise ValueError(problem)
        return neg

    stats.candidates += 1
    try:
        negative = call_text(backend, opts.request(prompts.render_fill_mask(positive, masked), "fill", masked),
                             retries=opts.retries, parse=parse, stats=stats)
    except ReplyParseError as exc:
        log.info("fill_mask skipped for %r: %s", masked, exc)
        stats.skips += 1
        stats.dropped_malformed += 1
        return None
    stats.emitted += 1
    return TripletSample(positive, masked, negative, region, sample_id)


def summarize_triplets(triplets: list[TripletSample], backend, *, opts: GenOptions | None = None,
                       stats: GenStats | None = None) -> str:
    if not triplets:
        raise ValueError("need at least one triplet")
    opts = opts or GenOptions()
    prompt = prompts.render_summarize_triplets([(t.positive, t.masked, t.negative) for t in triplets])
    return call_text(backend, opts.request(prompt, "triplet_summary"), retries=opts.retries, stats=stats).strip()


def generate_triplet_stage(exemplars: list[TripletSample], backend, size: int, *, k: int = 3, per_call: int = 20,
                           stage: int = 1, opts: GenOptions | None = None,
                           stats: GenStats | None = None) -> list[TripletSample]:
    """Summarize ``exemplars`` and grow ``size`` new triplets from in-context prompts."""
    opts = opts or GenOptions()
    stats = stats if stats is not None else GenStats()
    summary = summarize_triplets(exemplars, backend, opts=opts, stats=stats)
    out: list[TripletSample] = []
    max_calls = 3 * math.ceil(size / per_call) + 3
    calls = 0
    while len(out) < size and calls < max_calls:
        rng = random.Random(derive_seed(opts.seed, "triplets", stage, calls))
        shown = rng.sample(exemplars, min(k, len(exemplars)))
        want = min(per_call, size - len(out))
        prompt = prompts.render_incontext_triplets(
            summary, [(t.positive, t.masked, t.negative) for t in shown], want)
        calls += 1
        try:
            text = call_text(backend, opts.request(prompt, "triplets", stage, calls), retries=opts.retries, stats=stats)
        except BackendUnavailable:
            raise
        except BackendError:
            stats.backend_failures += 1
            continue
        items, malformed = prompts.parse_numbered_items(
            text, len(shown) + 1, ("input", "masked input", "output"), want)
        stats.candidates += malformed
        stats.dropped_malformed += malformed
        for item in items:
            stats.candidates += 1
            pos, masked, neg = item["input"], item["masked input"], item["output"]
            problem = triplet_problem(pos, masked, neg)
            if problem == "negative equals positive":
                stats.dropped_equal += 1
            elif problem:
                stats.dropped_malformed += 1
            elif len(out) < size:
                stats.emitted += 1
                out.append(TripletSample(pos, masked, neg, -1, f"stage{stage}:{len(out)}"))
    return out


def bootstrap_triplets(seed_triplets: list[TripletSample], backend, size: int, *, stage: int = 1,
                       reviewed_path=None, **kw) -> list[TripletSample]:
    """One bootstrapping round.

    Stage 1 grows from the hand-written seeds; stage 2 grows from the
    human-reviewed stage-1 file, which must exist.
    """
    if stage == 1:
        if not seed_triplets:
            raise ValueError("stage 1 needs at least one seed triplet")
        return generate_triplet_stage(seed_triplets, backend, size, stage=1, **kw)
    if stage != 2:
        raise ValueError("stage must be 1 or 2")
    if reviewed_path is None or not Path(reviewed_path).is_file():
        raise FileNotFoundError("review file required for stage 2")
    reviewed = load_triplets(reviewed_path)
    if not reviewed:
        raise ValueError("review file holds no triplets")
    return generate_triplet_stage(reviewed, backend, size, stage=2, **kw)


# ------------------------------------------------------------------ I/O

def write_jsonl(rows, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row.to_dict() if hasattr(row, "to_dict") else row,
                                ensure_ascii=False, sort_keys=True) + "\n")


def _read_jsonl(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def load_pairs(path) -> list[NegativePair]:
    return [NegativePair.from_dict(o) for o in _read_jsonl(path)]


def load_triplets(path) -> list[TripletSample]:
    return [TripletSample.from_dict(o) for o in _read_jsonl(path)]


def load_substitutions(path) -> dict[str, list[str]]:
    with open(path, encoding="utf-8") as fh:
        table = json.load(fh)
    if not isinstance(table, dict) or not all(
            isinstance(v, list) and all(isinstance(c, str) for c in v) for v in table.values()):
        raise ValueError("substitution table must map words to lists of strings")
    return table
