"""Regenerate the bundled 20-sample fixture under src/neggen/data/fixture.

Objects get side-by-side boxes; "scene" phrases (grass, sofa, beach, ...)
get a large box that covers the object boxes, so the box filter has work to do.
"""
import json
from pathlib import Path

from PIL import Image, ImageDraw

from neggen.grounding import dump_dataset, sample_from_dict
from neggen.mock import phrase_color

ROOT = Path(__file__).resolve().parents[1] / "src" / "neggen" / "data" / "fixture"

# (caption, [(phrase, kind, boxes)]) -- kind "obj" or "scene"; boxes = number of boxes for the phrase
SAMPLES = [
    ("A man in a red shirt is holding a ball.", [("A man", "obj", 1), ("a red shirt", "obj", 1), ("a ball", "obj", 1)]),
    ("A brown dog is running on the grass.", [("A brown dog", "obj", 1), ("the grass", "scene", 1)]),
    ("Two girls are sitting on a bench.", [("Two girls", "obj", 2), ("a bench", "obj", 1)]),
    ("A woman is riding a bike near a car.", [("A woman", "obj", 1), ("a bike", "obj", 1), ("a car", "obj", 1)]),
    ("A boy throws a frisbee to a dog.", [("A boy", "obj", 1), ("a frisbee", "obj", 1), ("a dog", "obj", 1)]),
    ("A cat sleeps on a blue sofa.", [("A cat", "obj", 1), ("a blue sofa", "scene", 1)]),
    ("An old man is reading a book in the park.", [("An old man", "obj", 1), ("a book", "obj", 1),
                                                    ("the park", "scene", 1)]),
    ("A little girl holds a red umbrella.", [("A little girl", "obj", 1), ("a red umbrella", "obj", 1)]),
    ("A young woman and a man walk down the street.", [("A young woman", "obj", 1), ("a man", "obj", 1),
                                                        ("the street", "scene", 1)]),
    ("Two dogs play with a ball on the beach.", [("Two dogs", "obj", 2), ("a ball", "obj", 1),
                                                  ("the beach", "scene", 1)]),
    ("A horse stands next to a white fence.", [("A horse", "obj", 1), ("a white fence", "obj", 1)]),
    ("A child is eating an apple at the table.", [("A child", "obj", 1), ("an apple", "obj", 1),
                                                   ("the table", "obj", 1)]),
    ("A man with a hat plays the guitar.", [("A man", "obj", 1), ("a hat", "obj", 1), ("the guitar", "obj", 1)]),
    ("A woman in a green dress is dancing.", [("A woman", "obj", 1), ("a green dress", "obj", 1)]),
    ("A boy is kicking a ball in the yard.", [("A boy", "obj", 1), ("a ball", "obj", 1), ("the yard", "scene", 1)]),
    ("A dog jumps over a wooden log.", [("A dog", "obj", 1), ("a wooden log", "obj", 1)]),
    ("A girl with a kite runs on the hill.", [("A girl", "obj", 1), ("a kite", "obj", 1), ("the hill", "scene", 1)]),
    ("A man sits on a chair with his dog.", [("A man", "obj", 1), ("a chair", "obj", 1), ("his dog", "obj", 1)]),
    ("A woman is holding a baby in her arms.", [("A woman", "obj", 1), ("a baby", "obj", 1)]),
    ("A black cat sits next to a window.", [("A black cat", "obj", 1), ("a window", "obj", 1)]),
]

SUBSTITUTIONS = {
    "man": ["woman", "boy"], "woman": ["man", "girl"], "boy": ["girl", "man"], "girl": ["boy", "woman"],
    "girls": ["boys", "women"], "child": ["dog", "woman"], "baby": ["puppy", "cat"],
    "dog": ["cat", "horse"], "dogs": ["cats", "horses"], "cat": ["dog", "rabbit"], "horse": ["cow", "dog"],
    "ball": ["frisbee", "kite"], "frisbee": ["ball", "stick"], "kite": ["balloon", "flag"],
    "bench": ["wall", "fence"], "chair": ["bench", "bed"], "sofa": ["bed", "carpet"], "table": ["window", "desk"],
    "book": ["newspaper", "phone"], "guitar": ["violin", "drums"], "umbrella": ["balloon", "flag"],
    "hat": ["scarf", "helmet"], "shirt": ["jacket", "hat"], "dress": ["coat", "skirt"], "bike": ["horse", "scooter"],
    "car": ["bus", "truck"], "apple": ["banana", "sandwich"], "fence": ["wall", "car"], "window": ["door", "lamp"],
    "log": ["rock", "fence"], "red": ["blue", "green"], "blue": ["red", "yellow"], "green": ["red", "white"],
    "white": ["black", "red"], "black": ["white", "orange"], "brown": ["white", "black"], "old": ["young"],
    "young": ["old"], "little": ["tall"], "wooden": ["metal", "stone"],
    "running": ["sitting", "sleeping"], "sitting": ["standing", "lying"], "holding": ["dropping", "throwing"],
    "riding": ["pushing", "washing"], "reading": ["tearing", "holding"], "eating": ["throwing", "holding"],
    "dancing": ["sitting", "singing"], "kicking": ["holding", "throwing"],
    "grass": ["sand", "snow"], "park": ["kitchen", "library"], "street": ["beach", "hallway"],
    "beach": ["street", "field"], "yard": ["kitchen", "street"], "hill": ["roof", "street"],
}

SEED_PAIRS = [
    ("a person wearing a red hat and a blue shirt", "a person wearing a blue hat and a red shirt"),
    ("the dog is on top of the car", "the car is on top of the dog"),
    ("a big cup next to a small plate", "a small cup next to a big plate"),
    ("there are more apples than bananas", "there are more bananas than apples"),
    ("a child feeds a goat", "a goat feeds a child"),
    ("the lamp is left of the door", "the lamp is right of the door"),
    ("a cat sits while a dog stands", "a dog sits while a cat stands"),
    ("two white birds and one black bird", "one white bird and two black birds"),
    ("someone pours milk into coffee", "someone pours coffee into milk"),
    ("the tall tree behind the short house", "the short tree behind the tall house"),
    ("a woman holds a baby", "a baby holds a woman"),
    ("the bike is in front of the bus", "the bus is in front of the bike"),
]

SEED_TRIPLETS = [
    ("A man holds a red cup.", "A man holds a [Mask].", "A man holds a blue bottle."),
    ("Two kids play in the snow.", "Two kids play in the [Mask].", "Two kids play in the sand."),
    ("A dog sleeps on the couch.", "A [Mask] sleeps on the couch.", "A cat sleeps on the couch."),
    ("A woman rides a horse.", "A woman rides a [Mask].", "A woman rides a bicycle."),
    ("An old man reads the paper.", "An [Mask] reads the paper.", "An old woman reads the paper."),
]

CONFIG = """\
seed = 7
out = "out"
cache = ".neggen-cache"
max_inflight = 4

[dataset]
path = "samples.jsonl"
substitutions = "substitutions.json"
seed_pairs = "seed_pairs.jsonl"
seed_triplets = "seed_triplets.jsonl"

[text]
strategies = ["rule_foil", "llm_foil", "recombination", "incontext_summary", "mask_fill"]
retries = 3
incontext_k = 3
incontext_count = 2
incontext_pool = 20

[filters]
box = 0.75
image = 0.35
region = 0.75
crop = 1.5

[assembly]
k = 3
separator = ". "
options = ["text", "generated", "pair"]
"""


def layout(items, w, h):
    """Boxes for every (phrase, kind, n) entry, in caption order."""
    n_obj = sum(n for _, kind, n in items if kind == "obj")
    slot = w / n_obj
    boxes, k = [], 0
    for _, kind, n in items:
        group = []
        for _ in range(n):
            if kind == "scene":
                group.append([0, round(h * 0.15), w, h])
            else:
                x1 = round(k * slot + 3)
                x2 = round((k + 1) * slot - 3)
                top = round(h * (0.25 + 0.05 * (k % 2)))
                group.append([x1, top, x2, round(h * 0.85)])
                k += 1
        boxes.append(group)
    return boxes


def main():
    (ROOT / "images").mkdir(parents=True, exist_ok=True)
    samples = []
    for i, (caption, items) in enumerate(SAMPLES):
        w, h = (160, 120) if i % 2 == 0 else (120, 160)
        sid = f"s{i:02d}"
        path = f"images/{sid}.png"
        boxes = layout(items, w, h)
        regions = []
        pos = 0
        img = Image.new("RGB", (w, h), (96 + 5 * i, 110, 120))
        draw = ImageDraw.Draw(img)
        order = sorted(range(len(items)), key=lambda j: items[j][1] != "scene")  # scenes first
        for j in order:
            for b in boxes[j]:
                draw.rectangle([b[0], b[1], b[2] - 1, b[3] - 1], fill=phrase_color(items[j][0]))
        for (phrase, _, _), group in zip(items, boxes):
            start = caption.index(phrase, pos)
            pos = start + len(phrase)
            regions += [{"box": b, "span": [start, start + len(phrase)]} for b in group]
        img.save(ROOT / path, format="PNG")
        samples.append(sample_from_dict({"id": sid, "caption": caption,
                                         "image": {"path": path, "width": w, "height": h}, "regions": regions}))
    dump_dataset(samples, ROOT / "samples.jsonl")
    (ROOT / "substitutions.json").write_text(json.dumps(SUBSTITUTIONS, indent=1, sort_keys=True) + "\n")
    with open(ROOT / "seed_pairs.jsonl", "w") as fh:
        for pos_, neg in SEED_PAIRS:
            fh.write(json.dumps({"positive": pos_, "negative": neg, "strategy": "seed"}) + "\n")
    with open(ROOT / "seed_triplets.jsonl", "w") as fh:
        for n, (pos_, masked, neg) in enumerate(SEED_TRIPLETS):
            fh.write(json.dumps({"positive": pos_, "masked": masked, "negative": neg, "region": -1,
                                 "sample_id": f"seed{n}"}) + "\n")
    (ROOT / "config.toml").write_text(CONFIG)


if __name__ == "__main__":
    main()
