import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neggen.grounding import (BoundingBox, DatasetParseError, GroundingSample, ImageRef, PhraseSpan, Region,
                              ValidationError, build_vocabulary, dump_dataset, load_dataset, sample_from_dict,
                              span_text, validate_sample)


def _write(tmp_path, rows):
    p = tmp_path / "d.jsonl"
    p.write_text("".join((r if isinstance(r, str) else json.dumps(r)) + "\n" for r in rows))
    return p


def _rec(**over):
    rec = {"id": "a", "caption": "a dog", "image": {"path": "a.jpg", "width": 100, "height": 100},
           "regions": [{"box": [10, 10, 50, 50], "span": [2, 5]}]}
    rec.update(over)
    return rec


def test_load_single_line(tmp_path):
    [s] = load_dataset(_write(tmp_path, [_rec()]))
    assert span_text(s, 0) == "dog"
    assert s.regions[0].box == BoundingBox(10, 10, 50, 50)


def test_span_end_exceeds_caption(tmp_path):
    with pytest.raises(ValidationError, match="span end exceeds caption length") as err:
        load_dataset(_write(tmp_path, [_rec(regions=[{"box": [10, 10, 50, 50], "span": [2, 99]}])]))
    assert err.value.sample_id == "a"


def test_box_order_violation(tmp_path):
    with pytest.raises(ValidationError, match="x1 < x2 violated"):
        load_dataset(_write(tmp_path, [_rec(regions=[{"box": [50, 50, 10, 10], "span": [2, 5]}])]))


def test_box_outside_image(tmp_path):
    with pytest.raises(ValidationError, match="outside image bounds"):
        load_dataset(_write(tmp_path, [_rec(regions=[{"box": [10, 10, 150, 50], "span": [2, 5]}])]))


def test_parse_error_names_line(tmp_path):
    with pytest.raises(DatasetParseError) as err:
        load_dataset(_write(tmp_path, [_rec(), "{not json"]))
    assert err.value.line_no == 2


def test_duplicate_ids_rejected(tmp_path):
    with pytest.raises(ValidationError, match="duplicate"):
        load_dataset(_write(tmp_path, [_rec(), _rec()]))


def test_skip_invalid(tmp_path):
    rows = [_rec(), "garbage", _rec(id="b", regions=[{"box": [50, 50, 10, 10], "span": [2, 5]}]), _rec(id="c")]
    assert [s.id for s in load_dataset(_write(tmp_path, rows), skip_invalid=True)] == ["a", "c"]


def test_span_text_examples():
    img = ImageRef("x", 10, 10)
    box = BoundingBox(0, 0, 1, 1)
    s = GroundingSample("x", img, "A boy is playing with his dog", (Region(box, PhraseSpan(26, 29)),
                                                                     Region(box, PhraseSpan(0, 5))))
    assert span_text(s, 0) == "dog"
    assert span_text(s, 1) == "A boy"
    with pytest.raises(IndexError):
        span_text(s, 3)


def test_vocabulary():
    img = ImageRef("x", 10, 10)
    mk = lambda cap: GroundingSample(cap, img, cap, ())
    assert build_vocabulary([mk("a dog"), mk("a cat")]) == {"a": 2, "dog": 1, "cat": 1}
    assert build_vocabulary([]) == {}
    assert build_vocabulary([mk("Dog dog")]) == {"dog": 2}


def test_round_trip(tmp_path, fixture_samples):
    p = tmp_path / "rt.jsonl"
    dump_dataset(fixture_samples, p)
    assert load_dataset(p) == fixture_samples


@st.composite
def raw_records(draw):
    caption = draw(st.text(alphabet="ab ", min_size=0, max_size=12))
    w = draw(st.integers(-2, 40))
    h = draw(st.integers(-2, 40))
    regions = []
    for _ in range(draw(st.integers(0, 3))):
        box = [draw(st.integers(-5, 45)) for _ in range(4)]
        span = [draw(st.integers(-2, 15)), draw(st.integers(-2, 15))]
        regions.append({"box": box, "span": span})
    return {"id": "r", "caption": caption, "image": {"path": "p", "width": w, "height": h}, "regions": regions}


@settings(max_examples=400, deadline=None)
@given(raw_records())
def test_fuzz_never_accepts_invalid(rec):
    """Whatever the validator accepts satisfies every invariant, checked independently."""
    try:
        s = sample_from_dict(rec)
        validate_sample(s)
    except ValueError:
        return
    assert s.image.width > 0 and s.image.height > 0
    for r in s.regions:
        b = r.box
        assert 0 <= b.x1 < b.x2 <= s.image.width and 0 <= b.y1 < b.y2 <= s.image.height
        assert 0 <= r.span.start < r.span.end <= len(s.caption)
        assert s.caption[r.span.start:r.span.end].strip()
