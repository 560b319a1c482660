"""Prompt templates for the text backend and the parsers for their replies."""
from __future__ import annotations

import json
import re
from string import Template

EXTRACT_CONCEPTS = Template("""\
Find objects, attributes of objects, and relationships between objects in the given text. One word or phrase should only be one of objects, attributes and relationships.

Provide the answer using the JSON format as,
{
"text": <the given text>,
"objects": <list of objects in the given text>
"attributes": <list of attributes in the given text>
"relationships": <list of relationships in the given text>
}

Given text: ${positive_text}""")

FOIL_CONCEPTS = Template("""\
Given the positive text that refers to objects in an image, your task is to generate hard negative texts that do not refer to any objects in the image. A list of phrases in the positive text will be given. You need to replace each of phrases with other words to generate hard negative texts.

Instructions:
1. Choice one phrase from the given phrase list in a sequence.
2. Find similar but different alternative concepts for the picked phrase.
3. Choice one alternative to replace the phrase to generate a negative text. Keep other words intact as much as possible. Maintain the structure of the sentence. The resulting text should be coherent and satisfy common senses.
4. For each phrase, generate at least ${count} negative texts.
5. Please provide the results in a JSON format as
{
"positive_text": <positive text>,
"results": [
{
"phrase": <phrase>
"negative_texts": [list of negatives texts by changing the phrase]
}, ......
{
"phrase": <phrase>
"negative_texts": [list of negatives texts by changing the phrase]
},]}

The input text: ${input_text}
Phrase list: ${phrases}""")

RECOMBINE = Template("""\
You are asked to generate ${count} sentences using a list of text phrases extracting from a main sentence.

Here are the requirements:
1. Be confident that the generated sentences should be semantically different from the main sentence.
2. You need to keep at least one phrase intact
3. You can either change one phrase to a closed but different concepts, e.g. "man" into "woman", "dog" into "cat". Or you can add new text phrases not in the list
4. Focus on new relationships that are not in the main sentence
5. Avoid general descriptive sentences because they may refer to the same object as the main sentence, e.g. "book is helpful"
6. Keep the generated sentences simple

The results should be in JSON format as
{
"main": <main sentence>,
"generated": [<generated sentence>, ......, <generated sentence>]
}

Main sentence: ${positive_text}
Text phrase list: ${phrases}""")

SUMMARIZE_PAIRS = Template("""\
Check the following pairs of the input text and its negative text.

###
${examples}
###

Summarize the features of those pairs.""")

INCONTEXT_PAIRS = Template("""\
The pairs of input text and hard negative text share the following features:
${summary}

Generate ${count} pairs of input and hard negative.
###
${examples}
###
${next_index}. Input:""")

FILL_MASK = Template(
    'Generate 1 sentence by replacing [Mask] in "${masked}". '
    'The generated sentence should be different from "${positive}"'
)

INCONTEXT_TRIPLETS = Template("""\
The example of a input and a output text share the following features:
${summary}

Generate ${count} such examples
###
${examples}
###
${next_index}. Input:""")

MASK_TOKEN = "[Mask]"


def render_extract_concepts(caption: str) -> str:
    return EXTRACT_CONCEPTS.substitute(positive_text=caption)


def render_foil(caption: str, phrases: list[str], count: int = 2) -> str:
    return FOIL_CONCEPTS.substitute(input_text=caption, phrases=", ".join(phrases), count=count)


def render_recombine(caption: str, phrases: list[str], count: int = 10) -> str:
    return RECOMBINE.substitute(positive_text=caption, phrases=", ".join(phrases), count=count)


def render_summarize_pairs(pairs: list[tuple[str, str]]) -> str:
    blocks = [f"Input text: {p}\nhard negative: {n}" for p, n in pairs]
    return SUMMARIZE_PAIRS.substitute(examples="\n###\n".join(blocks))


def render_summarize_triplets(triplets: list[tuple[str, str, str]]) -> str:
    blocks = [f"Input text: {p}\nMasked input: {m}\nOutput: {n}" for p, m, n in triplets]
    return SUMMARIZE_PAIRS.substitute(examples="\n###\n".join(blocks))


def render_incontext_pairs(summary: str, exemplars: list[tuple[str, str]], count: int = 20) -> str:
    blocks = [f"{i}. Input: {p}\n{i}. Negative: {n}" for i, (p, n) in enumerate(exemplars, 1)]
    return INCONTEXT_PAIRS.substitute(
        summary=summary.strip(), count=count, examples="\n###\n".join(blocks), next_index=len(exemplars) + 1
    )


def render_incontext_caption(summary: str, exemplars: list[tuple[str, str]], caption: str) -> str:
    """In-context prompt whose final item is an existing caption awaiting its negative."""
    k = len(exemplars) + 1
    return render_incontext_pairs(summary, exemplars, count=1) + f" {caption}\n{k}. Negative:"


def render_fill_mask(positive: str, masked: str) -> str:
    return FILL_MASK.substitute(masked=masked, positive=positive)


def render_incontext_triplets(summary: str, exemplars: list[tuple[str, str, str]], count: int = 20) -> str:
    blocks = [
        f"{i}. Input: {p}\n{i}. Masked input: {m}\n{i}. Output: {n}"
        for i, (p, m, n) in enumerate(exemplars, 1)
    ]
    return INCONTEXT_TRIPLETS.substitute(
        summary=summary.strip(), count=count, examples="\n###\n".join(blocks), next_index=len(exemplars) + 1
    )


# ---------------------------------------------------------------- reply parsing

_FENCE_RE = re.compile(r"^\s*```[a-zA-Z]*\s*\n?|\n?\s*```\s*$")
_TRAILING_COMMA_RE = re.compile(r",\s*([}\]])")


def parse_json_reply(text: str):
    """Parse a near-JSON reply; one repair pass, then ``ValueError``."""
    try:
        return json.loads(text)
    except ValueError:
        pass
    repaired = _FENCE_RE.sub("", text.strip())
    start = min((i for i in (repaired.find("{"), repaired.find("[")) if i >= 0), default=-1)
    if start > 0:
        repaired = repaired[start:]
    end = max(repaired.rfind("}"), repaired.rfind("]"))
    if end >= 0:
        repaired = repaired[: end + 1]
    repaired = _TRAILING_COMMA_RE.sub(r"\1", repaired)
    try:
        return json.loads(repaired)
    except ValueError as exc:
        raise ValueError(f"unparseable reply: {exc}") from None


_ITEM_RE = re.compile(r"^\s*(\d+)\.\s*(Input|Negative|Masked input|Output)\s*:\s*(.*?)\s*$", re.IGNORECASE)


def parse_numbered_items(
    completion: str, first_index: int, fields: tuple[str, ...], count: int | None = None
) -> tuple[list[dict], int]:
    """Parse numbered ``N. Field: text`` items from a completion continuation.

    The continuation is assumed to start right after ``"{first_index}. Input:"``.
    Only indices in ``[first_index, first_index + count)`` are considered.
    Returns ``(items, malformed)`` where items carry every requested field.
    """
    last = None if count is None else first_index + count
    text = f"{first_index}. Input:" + completion
    by_index: dict[int, dict] = {}
    order: list[int] = []
    for line in text.splitlines():
        m = _ITEM_RE.match(line)
        if not m:
            continue
        idx, key, value = int(m.group(1)), m.group(2).lower(), m.group(3)
        if idx < first_index or (last is not None and idx >= last):
            continue
        if idx not in by_index:
            by_index[idx] = {}
            order.append(idx)
        by_index[idx].setdefault(key, value)
    items, malformed = [], 0
    for idx in order:
        item = by_index[idx]
        if all(item.get(f) for f in fields):
            items.append({"index": idx, **{f: item[f] for f in fields}})
        else:
            malformed += 1
    return items, malformed
