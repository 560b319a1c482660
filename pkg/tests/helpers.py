"""Small doubles shared by several test modules."""
from neggen.backends import BackendError, GenerationResponse


class ScriptedBackend:
    """Replies from a fixed list; an Exception entry is raised instead."""

    backend_id = "scripted"

    def __init__(self, replies):
        self.replies = list(replies)
        self.requests = []

    def generate(self, request):
        self.requests.append(request)
        reply = self.replies.pop(0) if len(self.replies) > 1 else self.replies[0]
        if isinstance(reply, Exception):
            raise reply
        if callable(reply):
            reply = reply(request)
        return GenerationResponse(reply, self.backend_id)


def failing(msg="boom"):
    return BackendError(msg)


# ------------------------------------------------------------------ random assembly fixtures

WORDS = ["dog", "cat", "red", "man", "on", "the", "a", "ball", "big", "runs", "blue", "tree", "near", "x-ray", "it's"]


def random_phrase_piece(rng, source="positive", image=0, w=100, h=100):
    """A random caption with 1-4 regions over word-aligned spans; returns (TextPiece, phrases)."""
    from neggen.assembly import TextPiece, TrainingRegion
    from neggen.grounding import BoundingBox, PhraseSpan
    words = [rng.choice(WORDS) for _ in range(rng.randint(1, 8))]
    text = " ".join(words)
    starts = []
    pos = 0
    for word in words:
        starts.append((pos, pos + len(word)))
        pos += len(word) + 1
    regions, phrases = [], []
    for _ in range(rng.randint(1, 4)):
        i = rng.randrange(len(words))
        j = rng.randrange(i, min(len(words), i + 3))
        s, e = starts[i][0], starts[j][1]
        x1, y1 = rng.uniform(0, w - 2), rng.uniform(0, h - 2)
        box = BoundingBox(x1, y1, rng.uniform(x1 + 1, w), rng.uniform(y1 + 1, h))
        regions.append(TrainingRegion(box, PhraseSpan(s, e), image))
        phrases.append(text[s:e])
    return TextPiece(text, source, tuple(regions)), phrases


def random_negative_piece(rng):
    from neggen.assembly import TextPiece
    return TextPiece(" ".join(rng.choice(WORDS) for _ in range(rng.randint(1, 8))), "negative:test")


def box_token_multisets(text, regions, matrix, tokenizer=None):
    """Map each region (in order) to the sorted multiset of token texts its row marks."""
    from neggen.assembly import DefaultTokenizer
    tokens = (tokenizer or DefaultTokenizer()).tokenize(text)
    dense = matrix.dense()
    return [(r.box, tuple(sorted(tokens[j].text for j in range(len(tokens)) if dense[l, j])))
            for l, r in enumerate(regions)]


def brute_force_assignment(cost):
    """Minimum total over every injective matching of min(N, L) pairs."""
    import itertools
    n, m = len(cost), len(cost[0]) if len(cost) else 0
    if n == 0 or m == 0:
        return 0.0
    if n <= m:
        return min(sum(cost[i][p[i]] for i in range(n)) for p in itertools.permutations(range(m), n))
    return min(sum(cost[p[j]][j] for j in range(m)) for p in itertools.permutations(range(n), m))


def mp_focal(x, target, alpha, gamma):
    """High-precision focal loss, written from the definition."""
    import mpmath
    p = 1 / (1 + mpmath.exp(-x))
    pt = p if target else 1 - p
    at = alpha if target else 1 - alpha
    return -at * (1 - pt) ** gamma * mpmath.log(pt)
