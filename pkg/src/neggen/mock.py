"""Deterministic offline stand-ins for the text, inpainting and scoring services.

The text mock reads the task out of the prompt itself, so the pipeline code
paths are exactly those used against a real endpoint.
"""
from __future__ import annotations

import hashlib
import json
import math
import random
import re
import threading
from pathlib import Path

import numpy as np
from PIL import Image

from neggen.backends import BackendError, GenerationRequest, GenerationResponse, check_logits, derive_seed
from neggen.grounding import word_tokens
from neggen.lexicon import default_lexicon, parse_concepts
from neggen.negtext import find_phrase, match_case
from neggen.prompts import MASK_TOKEN

_WORD = re.compile(r"[^\W_]+")


class MockTextBackend:
    """Answers every prompt in :mod:`neggen.prompts` from a substitution table.

    ``echo_rate`` makes a fraction of generated negatives repeat the positive
    caption verbatim (to exercise the drop path); ``corpus`` supplies captions
    for free-form generation.
    """

    backend_id = "mock"

    def __init__(self, substitutions: dict[str, list[str]], *, corpus=(), lexicon=None, echo_rate: float = 0.0):
        self.table = {k.casefold(): list(v) for k, v in substitutions.items()}
        self.corpus = list(corpus)
        self.lexicon = lexicon if lexicon is not None else default_lexicon()
        self.echo_rate = echo_rate
        self.echoed = 0
        self.calls = 0
        self._lock = threading.Lock()

    # -- dispatch
    def generate(self, request: GenerationRequest) -> GenerationResponse:
        with self._lock:
            self.calls += 1
        p = request.prompt
        rng = random.Random(derive_seed(request.seed, p))
        if p.startswith("Find objects, attributes of objects"):
            text = self._extract(p)
        elif "You need to replace each of phrases with other words" in p:
            text = self._foil(p, rng)
        elif p.startswith("You are asked to generate"):
            text = self._recombine(p, rng)
        elif p.rstrip().endswith("Summarize the features of those pairs."):
            text = self.summary_digest(p)
        elif p.startswith("Generate 1 sentence by replacing [Mask]"):
            text = self._fill(p, rng)
        elif "Masked input:" in p and "such examples" in p:
            text = self._triplets(p, rng)
        elif p.rstrip().endswith("Negative:"):
            text = self._incontext_caption(p, rng)
        elif "pairs of input and hard negative" in p:
            text = self._incontext_pairs(p, rng)
        else:
            raise BackendError("mock backend: unrecognized prompt")
        return GenerationResponse(text, self.backend_id, 0.0)

    # -- helpers
    def _echo(self, rng: random.Random, positive: str, negative: str) -> str:
        if self.echo_rate and rng.random() < self.echo_rate:
            with self._lock:
                self.echoed += 1
            return positive
        return negative

    def substitutions_for(self, text: str, phrase: str, occurrence: int = 0) -> list[str]:
        """Every single-substitution variant of ``phrase``'s occurrence in ``text``."""
        loc = find_phrase(text, phrase, occurrence)
        if loc is None:
            return []
        s, e = loc
        seg = text[s:e]
        if seg.casefold() in self.table:
            targets = [(s, e, seg.casefold())]
        else:
            targets = [(s + m.start(), s + m.end(), m.group().casefold()) for m in _WORD.finditer(seg)
                       if m.group().casefold() in self.table][::-1]
        out = []
        for ts, te, key in targets[:1]:
            orig = text[ts:te]
            for cand in self.table[key]:
                if cand.casefold() != orig.casefold():
                    out.append(text[:ts] + match_case(orig, cand) + text[te:])
        return out

    def _swap(self, caption: str) -> str | None:
        concepts = parse_concepts(caption, self.lexicon)
        for kind in ("objects", "attributes"):
            seen, uniq = set(), []
            for c in concepts[kind]:
                if c.casefold() not in seen:
                    seen.add(c.casefold())
                    uniq.append(c)
            if len(uniq) >= 2:
                a, b = uniq[0], uniq[1]
                la, lb = find_phrase(caption, a), find_phrase(caption, b)
                if la and lb and la[1] <= lb[0]:
                    first, second = caption[la[0]:la[1]], caption[lb[0]:lb[1]]
                    if la[0] == 0:
                        second, first = match_case(first, second), first[:1].lower() + first[1:]
                    return caption[:la[0]] + second + caption[la[1]:lb[0]] + first + caption[lb[1]:]
        return None

    def _negative_for(self, caption: str, rng: random.Random) -> str:
        swapped = self._swap(caption)
        variants = []
        for word in sorted({w for w in word_tokens(caption) if w in self.table}):
            variants += self.substitutions_for(caption, word)
        if swapped and (rng.random() < 0.5 or not variants):
            return swapped
        return rng.choice(variants) if variants else caption

    # -- tasks
    def _extract(self, prompt: str) -> str:
        caption = prompt.rsplit("Given text: ", 1)[1].strip()
        concepts = parse_concepts(caption, self.lexicon)
        return json.dumps({"text": caption, **concepts})

    def _foil(self, prompt: str, rng: random.Random) -> str:
        caption = re.search(r"^The input text: (.*)$", prompt, re.M).group(1)
        phrases = [x.strip() for x in re.search(r"^Phrase list: (.*)$", prompt, re.M).group(1).split(",")]
        count = int(re.search(r"generate at least (\d+) negative texts", prompt).group(1))
        results = []
        for phrase in phrases:
            variants = self.substitutions_for(caption, phrase)
            rng.shuffle(variants)
            negs = [self._echo(rng, caption, v) for v in variants[:count]]
            results.append({"phrase": phrase, "negative_texts": negs})
        return json.dumps({"positive_text": caption, "results": results})

    def _recombine(self, prompt: str, rng: random.Random) -> str:
        caption = re.search(r"^Main sentence: (.*)$", prompt, re.M).group(1)
        phrases = [x.strip() for x in re.search(r"^Text phrase list: (.*)$", prompt, re.M).group(1).split(",")
                   if x.strip()]
        count = int(re.search(r"generate (\d+) sentences", prompt).group(1))
        variants = []
        for phrase in phrases:
            variants += self.substitutions_for(caption, phrase)
        swapped = self._swap(caption)
        if swapped:
            variants.append(swapped)
        # two-phrase substitutions keep the remaining phrases intact
        for i, a in enumerate(phrases):
            for b in phrases[i + 1:]:
                for first in self.substitutions_for(caption, a)[:1]:
                    variants += self.substitutions_for(first, b)[:1]
        uniq = list(dict.fromkeys(v for v in variants if v != caption))
        rng.shuffle(uniq)
        generated = [self._echo(rng, caption, v) for v in uniq[:count]]
        return json.dumps({"main": caption, "generated": generated})

    @staticmethod
    def summary_digest(prompt: str) -> str:
        """Summary built from sorted token sets of the shown examples."""
        inputs = re.findall(r"^Input text: (.*)$", prompt, re.M)
        outputs = re.findall(r"^(?:hard negative|Output): (.*)$", prompt, re.M)
        changed, shared, reordered = set(), set(), 0
        for a, b in zip(inputs, outputs):
            ta, tb = word_tokens(a), word_tokens(b)
            changed |= set(ta) ^ set(tb)
            shared |= set(ta) & set(tb)
            reordered += sorted(ta) == sorted(tb)
        lines = [
            f"1. {len(inputs)} examples; {reordered} keep the same words in a different order.",
            f"2. Words that change: {', '.join(sorted(changed)[:12]) or 'none'}.",
            f"3. Words that stay: {', '.join(sorted(shared)[:12]) or 'none'}.",
        ]
        return "\n".join(lines)

    def _fill(self, prompt: str, rng: random.Random) -> str:
        m = re.match(r'Generate 1 sentence by replacing \[Mask\] in "(.*)"\. '
                     r'The generated sentence should be different from "(.*)"$', prompt, re.S)
        masked, positive = m.group(1), m.group(2)
        prefix, suffix = masked.split(MASK_TOKEN)
        span = positive[len(prefix):len(positive) - len(suffix)]
        variants = self.substitutions_for(span, span)
        if not variants:
            for w in reversed(word_tokens(span)):
                variants = self.substitutions_for(span, w)
                if variants:
                    break
        new_span = rng.choice(variants) if variants else span
        return prefix + new_span + suffix

    def _pick_caption(self, rng: random.Random, fallback: list[str]) -> str:
        pool = self.corpus or fallback
        return rng.choice(pool)

    def _incontext_caption(self, prompt: str, rng: random.Random) -> str:
        caption = re.findall(r"^\d+\. Input: (.*)$", prompt, re.M)[-1]
        return " " + self._echo(rng, caption, self._negative_for(caption, rng))

    def _incontext_pairs(self, prompt: str, rng: random.Random) -> str:
        count = int(re.search(r"Generate (\d+) pairs", prompt).group(1))
        shown = re.findall(r"^\d+\. Input: (.*)$", prompt, re.M)
        k = len(shown) + 1
        chunks = []
        for i in range(count):
            inp = self._pick_caption(rng, shown)
            neg = self._echo(rng, inp, self._negative_for(inp, rng))
            head = " " if i == 0 else f"###\n{k + i}. Input: "
            chunks.append(f"{head}{inp}\n{k + i}. Negative: {neg}\n")
        return "".join(chunks)

    def _triplets(self, prompt: str, rng: random.Random) -> str:
        count = int(re.search(r"Generate (\d+) such examples", prompt).group(1))
        shown = re.findall(r"^\d+\. Input: (.*)$", prompt, re.M)
        k = len(shown) + 1
        chunks = []
        for i in range(count):
            for _ in range(20):
                inp = self._pick_caption(rng, shown)
                words = [w for w in dict.fromkeys(word_tokens(inp)) if w in self.table]
                if words:
                    break
            else:
                continue
            word = rng.choice(words)
            s, e = find_phrase(inp, word)
            masked = inp[:s] + MASK_TOKEN + inp[e:]
            out = rng.choice(self.substitutions_for(inp, word) or [inp])
            out = self._echo(rng, inp, out)
            head = " " if not chunks else f"###\n{k + len(chunks)}. Input: "
            n = k + len(chunks)
            chunks.append(f"{head}{inp}\n{n}. Masked input: {masked}\n{n}. Output: {out}\n")
        return "".join(chunks)


# ------------------------------------------------------------------ images

def phrase_color(text: str) -> tuple[int, int, int]:
    h = hashlib.sha256(text.strip().casefold().encode("utf-8")).digest()
    return h[0], h[1], h[2]


class MockInpainter:
    """Fills every edited box with a flat colour keyed on the new phrase."""

    backend_id = "mock-inpaint"

    def __init__(self, base: Path | None = None, size_override: tuple[int, int] | None = None):
        self.base = base
        self.size_override = size_override

    def inpaint(self, request, out_path: Path) -> Path:
        src = Path(request.source_path)
        if self.base is not None and not src.is_absolute():
            src = self.base / src
        if src.is_file():
            with Image.open(src) as im:
                canvas = im.convert("RGB")
        else:
            canvas = Image.new("RGB", (request.width, request.height), (128, 128, 128))
        color = phrase_color(request.phrase)
        boxes = [request.box] + [request.layout[i][0] for i in request.edited_regions]
        for b in boxes:
            canvas.paste(color, (round(b.x1), round(b.y1), round(b.x2), round(b.y2)))
        if self.size_override:
            canvas = canvas.resize(self.size_override)
        out_path = Path(out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        canvas.save(out_path, format="PNG")
        return out_path


class PaletteScorer:
    """Logits from how close a crop's mean colour is to each text's colour.

    Pairs with :class:`MockInpainter`: a freshly painted box scores high for
    its new phrase, diluted by whatever context the crop includes.
    """

    def __init__(self, sharpness: float = 8.0):
        self.sharpness = sharpness

    def score(self, image_path, crop, texts: list[str]) -> list[float]:
        with Image.open(image_path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
        if crop is not None:
            x1, y1 = int(math.floor(crop.x1)), int(math.floor(crop.y1))
            x2, y2 = int(math.ceil(crop.x2)), int(math.ceil(crop.y2))
            arr = arr[y1:y2, x1:x2]
        if arr.size == 0:
            raise BackendError("empty crop")
        mean = arr.reshape(-1, 3).mean(axis=0)
        scale = math.sqrt(3) * 255.0
        return check_logits([self.sharpness * (1.0 - float(np.linalg.norm(mean - np.array(phrase_color(t)))) / scale)
                             for t in texts], len(texts))


class TableScorer:
    """Logits looked up by image file name, optionally qualified by crop.

    Keys: ``"name"`` (whole image), ``"name@x1,y1,x2,y2"`` (crop, rounded to
    integers), ``"name@*"`` (any crop), ``"default"``.
    """

    def __init__(self, table: dict[str, list[float]]):
        self.table = table

    @classmethod
    def from_file(cls, path) -> TableScorer:
        with open(path, encoding="utf-8") as fh:
            return cls(json.load(fh))

    def score(self, image_path, crop, texts: list[str]) -> list[float]:
        name = Path(image_path).name
        keys = [name] if crop is None else [
            f"{name}@{','.join(str(round(v)) for v in crop.as_list())}", f"{name}@*"]
        for key in keys + ["default"]:
            if key in self.table:
                return check_logits(list(self.table[key]), len(texts))
        raise BackendError(f"no logits for {keys[0]}")
