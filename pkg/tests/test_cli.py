import json
import shutil

import pytest
from click.testing import CliRunner
from PIL import Image

from neggen.assembly import load_training_set
from neggen.cli import cli
from neggen.negimage import DROPPED_REGION, load_records


@pytest.fixture
def run(tmp_path, fixture_dir):
    def _run(*args, config=None, mock=True, env=None):
        base = ["--config", str(config or fixture_dir / "config.toml"), "--out", str(tmp_path / "out"),
                "--cache", str(tmp_path / "cache")] + (["--mock"] if mock else [])
        return CliRunner().invoke(cli, base + list(args), env=env, catch_exceptions=False)
    return _run


@pytest.fixture
def out(tmp_path):
    return tmp_path / "out"


def test_help_lists_commands():
    res = CliRunner().invoke(cli, ["--help"])
    for cmd in ("gen-text", "gen-triplets", "gen-images", "filter-images", "assemble", "analyze", "loss-check",
                "sample-report", "validate-config"):
        assert cmd in res.output


def test_unknown_strategy_is_usage_error(run):
    res = run("gen-text", "--strategies", "rule_foil,telepathy")
    assert res.exit_code == 2
    assert "telepathy" in res.output and "recombination" in res.output


def test_missing_input_exit_3(run, out):
    res = run("assemble")
    assert res.exit_code == 3 and "run gen-text first" in res.output


def test_missing_config_exit_3(run, tmp_path):
    res = run("gen-text", config=tmp_path / "nope.toml")
    assert res.exit_code == 3


def test_backend_unreachable_exit_4(run):
    env = {"NEGGEN_TEXT_BACKEND_URL": "http://127.0.0.1:9/generate"}
    res = run("gen-text", "--strategies", "llm_foil", mock=False, env=env)
    assert res.exit_code == 4 and "backend failure" in res.output


def test_no_backend_configured_exit_4(run):
    res = run("gen-text", "--strategies", "recombination", mock=False, env={"NEGGEN_TEXT_BACKEND_URL": ""})
    assert res.exit_code == 4


def test_gen_text_deterministic_and_resume(run, out, tmp_path):
    res = run("gen-text", "--strategies", "recombination")
    assert res.exit_code == 0, res.output
    first = (out / "text" / "pairs_recombination.jsonl").read_bytes()
    assert first and "cache hits: 0" in res.stderr
    res = run("gen-text", "--strategies", "recombination")
    assert "cache hits: 20" in res.stderr
    assert (out / "text" / "pairs_recombination.jsonl").read_bytes() == first
    log = [json.loads(x) for x in (out / "logs" / "gen-text.jsonl").read_text().splitlines()]
    assert {"event": "cache", "hits": 20, "misses": 0} in log


def test_flags_after_subcommand(tmp_path, fixture_dir):
    res = CliRunner().invoke(cli, ["gen-text", "--strategies", "rule_foil", "--mock", "--config",
                                   str(fixture_dir / "config.toml"), "--out", str(tmp_path / "o"),
                                   "--cache", str(tmp_path / "c"), "--seed", "3"])
    assert res.exit_code == 0, res.output
    assert (tmp_path / "o" / "text" / "pairs_rule_foil.jsonl").is_file()


def test_seed_changes_output(run, out, tmp_path, fixture_dir):
    run("gen-text", "--strategies", "recombination")
    a = (out / "text" / "pairs_recombination.jsonl").read_bytes()
    run("--seed", "99", "gen-text", "--strategies", "recombination")
    assert (out / "text" / "pairs_recombination.jsonl").read_bytes() != a


def test_gen_images_skip_region_filter(run, out):
    assert run("gen-text", "--strategies", "mask_fill").exit_code == 0
    res = run("gen-images", "--skip-region-filter")
    assert res.exit_code == 0, res.output
    recs = load_records(out / "images" / "records.jsonl")
    assert recs and all(r.region_scores is None for r in recs)
    assert all(r.status != DROPPED_REGION for r in recs)
    report = json.loads((out / "images" / "filter_report.json").read_text())
    assert report["thresholds"]["skip_region"] is True


def test_gen_images_box_filter_never_edits_big_box(run, out, fixture_samples):
    from neggen.negimage import box_coverage
    assert run("gen-images").exit_code == 0
    recs = load_records(out / "images" / "records.jsonl")
    by_id = {s.id: s for s in fixture_samples}
    for r in recs:
        if r.request is None:
            continue
        s = by_id[r.sample_id]
        for idx in r.request.edited_regions:
            box = s.regions[idx].box
            assert all(box_coverage(box, o.box) <= 0.75 for j, o in enumerate(s.regions) if j != idx)
    assert any(r.status == "dropped_box_filter" for r in recs)


def test_filter_images_with_score_table(run, out, tmp_path):
    assert run("gen-images").exit_code == 0
    table = tmp_path / "scores.json"
    table.write_text(json.dumps({"default": [0.0, 5.0]}))
    res = run("filter-images", "--scores", str(table), "--rescore")
    assert res.exit_code == 0, res.output
    recs = load_records(out / "images" / "records.jsonl")
    generated = [r for r in recs if r.request is not None]
    assert generated and all(r.status == "kept" for r in generated)


def _single_sample_config(tmp_path, w, h):
    """A one-sample dataset with a w x h image and a small editable box."""
    d = tmp_path / "mini"
    d.mkdir()
    Image.new("RGB", (w, h), (50, 60, 70)).save(d / "img.png")
    caption = "A dog sits on a red mat."
    rec = {"id": "m0", "caption": caption, "image": {"path": "img.png", "width": w, "height": h},
           "regions": [{"box": [10, 20, 110, 200], "span": [0, 5]}, {"box": [200, 300, 400, 500], "span": [13, 23]}]}
    (d / "samples.jsonl").write_text(json.dumps(rec) + "\n")
    (d / "subs.json").write_text(json.dumps({"dog": ["cat"], "mat": ["rug"], "red": ["blue"]}))
    (d / "scores.json").write_text(json.dumps({"default": [0.0, 5.0]}))
    (d / "c.toml").write_text('seed = 1\n[dataset]\npath = "samples.jsonl"\nsubstitutions = "subs.json"\n'
                              '[text]\nstrategies = ["mask_fill"]\n')
    return d


def test_option2_composite_480x640(run, out, tmp_path):
    d = _single_sample_config(tmp_path, 480, 640)
    cfg = d / "c.toml"
    res = run("gen-images", "--scores", str(d / "scores.json"), config=cfg)
    assert res.exit_code == 0, res.output
    res = run("assemble", "--option", "pair", config=cfg)
    assert res.exit_code == 0, res.output
    samples = load_training_set(out / "train" / "train.jsonl")
    assert len(samples) == 2
    for ts in samples:
        assert ts.canvas == (960, 640)
        with Image.open(out / ts.composite) as im:
            assert im.size == (960, 640)
        second = [im for im in ts.images if im.x == 480]
        assert len(second) == 1
        for r in ts.regions:
            rect = ts.images[r.image].rect
            assert rect.x1 <= r.box.x1 < r.box.x2 <= rect.x2
    manifest = json.loads((out / "train" / "manifest.json").read_text())
    assert manifest["count"] == 2


def test_k3_from_pool_of_5(run, out, fixture_samples):
    (out / "text").mkdir(parents=True)
    rows = [{"sample_id": s.id, "positive": s.caption, "negative": f"{s.caption} neg{i}", "strategy": "rule_foil"}
            for s in fixture_samples for i in range(5)]
    (out / "text" / "pairs.jsonl").write_text("".join(json.dumps(r) + "\n" for r in rows))
    res = run("assemble", "--option", "text", "-k", "3")
    assert res.exit_code == 0, res.output
    samples = load_training_set(out / "train" / "train.jsonl")
    assert len(samples) == 20
    for ts in samples:
        sources = sorted(s.source for s in ts.segments)
        assert sources == ["negative:rule_foil"] * 3 + ["positive"]
    sha = json.loads((out / "train" / "manifest.json").read_text())["sha256"]
    run("assemble", "--option", "text", "-k", "3")
    assert json.loads((out / "train" / "manifest.json").read_text())["sha256"] == sha


def test_assemble_bad_k(run):
    assert run("assemble", "-k", "0").exit_code == 2


def test_loss_check_zero_predictions(run, out, tmp_path):
    run("gen-text", "--strategies", "rule_foil")
    assert run("assemble", "--option", "text").exit_code == 0
    preds = tmp_path / "preds.jsonl"
    preds.write_text("")
    res = run("loss-check", "--predictions", str(preds))
    assert res.exit_code == 0, res.output
    report = json.loads((out / "loss" / "report.json").read_text())
    assert len(report["samples"]) == 20 and all(r["loss"] == 0 for r in report["samples"])


def test_loss_check_with_predictions(run, out, tmp_path):
    run("gen-text", "--strategies", "rule_foil")
    run("assemble", "--option", "text")
    ts = load_training_set(out / "train" / "train.jsonl")[0]
    preds = tmp_path / "preds.jsonl"
    preds.write_text(json.dumps({"sample_id": ts.id, "preds": [
        {"box": ts.regions[0].box.as_list(), "logits": [0.1] * ts.matrix.cols}]}) + "\n")
    assert run("loss-check", "--predictions", str(preds)).exit_code == 0
    row = json.loads((out / "loss" / "report.json").read_text())["samples"][0]
    assert row["loss"] > 0 and row["gradient_check"] is True and row["assignment"] == [0]
    preds.write_text(json.dumps({"sample_id": "ghost", "preds": []}) + "\n")
    assert run("loss-check", "--predictions", str(preds)).exit_code == 3
    preds.write_text(json.dumps({"sample_id": ts.id, "preds": [{"box": [0, 0, 1, 1], "logits": [0.0]}]}) + "\n")
    assert run("loss-check", "--predictions", str(preds)).exit_code == 3


def test_sample_report_default_100(run, out):
    assert run("gen-text", "--strategies", "llm_foil,recombination").exit_code == 0
    res = run("sample-report", "--source", "pairs")
    assert res.exit_code == 0, res.output
    assert len((out / "review" / "records.jsonl").read_text().splitlines()) == 100
    assert (out / "review" / "index.html").is_file()


def test_analyze_writes_csvs(run, out):
    run("gen-text", "--strategies", "rule_foil,recombination")
    res = run("analyze")
    assert res.exit_code == 0, res.output
    import csv
    rows = list(csv.DictReader(open(out / "analysis" / "fig5_lengths.csv")))
    for strategy in ("rule_foil", "recombination"):
        assert abs(sum(float(r["fraction"]) for r in rows if r["strategy"] == strategy) - 1) <= 1e-9


def test_gen_triplets_stages(run, out, tmp_path):
    res = run("gen-triplets", "--size", "12")
    assert res.exit_code == 0, res.output
    stage1 = out / "triplets" / "stage1.jsonl"
    assert len(stage1.read_text().splitlines()) == 12
    assert (out / "triplets" / "review" / "index.html").is_file()
    assert run("gen-triplets", "--stage", "2").exit_code == 3
    reviewed = tmp_path / "reviewed.jsonl"
    shutil.copy(stage1, reviewed)
    res = run("gen-triplets", "--stage", "2", "--reviewed", str(reviewed), "--size", "15")
    assert res.exit_code == 0, res.output
    assert len((out / "triplets" / "stage2.jsonl").read_text().splitlines()) == 15


def test_validate_config(fixture_dir, tmp_path):
    res = CliRunner().invoke(cli, ["validate-config", "--config", str(fixture_dir / "config.toml")])
    assert res.exit_code == 0 and '"status": "ok"' in res.output
    bad = tmp_path / "bad.toml"
    bad.write_text('[dataset]\npath = "missing.jsonl"\n[filters]\nbox = 0.75\n')
    res = CliRunner().invoke(cli, ["validate-config", "--config", str(bad)])
    assert res.exit_code == 3 and "dataset.path not found" in res.output
    bad.write_text('[filters]\nbox = 1.5\n')
    assert CliRunner().invoke(cli, ["validate-config", "--config", str(bad)]).exit_code == 3
    bad.write_text('[assembly]\nk = 0\n')
    res = CliRunner().invoke(cli, ["gen-text", "--config", str(bad)])
    assert res.exit_code == 3 and "assembly.k" in res.output
