"""Packaged part-of-speech lexicon and a small pattern-based concept parser."""
from __future__ import annotations

import json
import re
from functools import lru_cache
from importlib import resources

POS_GROUPS = ("VERB", "NOUN", "ADP/ADJ", "OTHER")
_GROUP_OF_TAG = {"VERB": "VERB", "NOUN": "NOUN", "PROPN": "NOUN", "ADP": "ADP/ADJ", "ADJ": "ADP/ADJ"}
AUXILIARIES = frozenset("is are was were be being been am has have had do does did".split())
_TOKEN_RE = re.compile(r"[^\W_]+")


@lru_cache(maxsize=None)
def default_lexicon() -> dict[str, str]:
    text = resources.files("neggen").joinpath("data/pos_lexicon.json").read_text(encoding="utf-8")
    return json.loads(text)


def load_lexicon(path) -> dict[str, str]:
    with open(path, encoding="utf-8") as fh:
        return {k.casefold(): v for k, v in json.load(fh).items()}


class PosTagger:
    """Lexicon-backed tagger mapping tokens to one of ``POS_GROUPS``.

    Tokens missing from the lexicon fall into ``OTHER``.
    """

    def __init__(self, lexicon: dict[str, str] | None = None):
        self.lexicon = default_lexicon() if lexicon is None else lexicon

    def tag(self, token: str) -> str | None:
        return self.lexicon.get(token.casefold())

    def group(self, token: str) -> str:
        return _GROUP_OF_TAG.get(self.tag(token) or "", "OTHER")


def _guess_tag(word: str, lexicon: dict[str, str]) -> str:
    tag = lexicon.get(word.casefold())
    if tag:
        return tag
    w = word.casefold()
    if w.endswith("ing") and len(w) > 4:
        return "VERB"
    if w.endswith("ly") and len(w) > 3:
        return "ADV"
    return "NOUN"


def parse_concepts(caption: str, lexicon: dict[str, str] | None = None) -> dict[str, list[str]]:
    """Split a caption into object, attribute and relationship phrases.

    Objects are runs of adjacent nouns, attributes are adjectives plus
    participles used without an object ("people sitting and standing"),
    relationships are verbs (with a trailing preposition) and prepositions.
    """
    lexicon = default_lexicon() if lexicon is None else lexicon
    toks = [(m.group(), m.start(), m.end()) for m in _TOKEN_RE.finditer(caption)]
    tags = [_guess_tag(t[0], lexicon) for t in toks]
    objects: list[str] = []
    attributes: list[str] = []
    relationships: list[str] = []
    i = 0
    while i < len(toks):
        word, start, end = toks[i]
        tag = tags[i]
        nxt = tags[i + 1] if i + 1 < len(toks) else None
        if tag == "NOUN":
            j = i
            while j + 1 < len(toks) and tags[j + 1] == "NOUN" and caption[toks[j][2]:toks[j + 1][1]].isspace():
                j += 1
            objects.append(caption[start:toks[j][2]])
            i = j + 1
            continue
        if tag == "ADJ":
            attributes.append(word)
        elif tag == "VERB" and word.casefold() not in AUXILIARIES:
            if word.casefold().endswith("ing") and nxt in (None, "CCONJ", "ADV"):
                attributes.append(word)
            elif nxt == "ADP":
                relationships.append(caption[start:toks[i + 1][2]])
                i += 2
                continue
            else:
                relationships.append(word)
        elif tag == "ADP" and word.casefold() != "of":
            relationships.append(word)
        i += 1
    return {"objects": objects, "attributes": attributes, "relationships": relationships}
