import json

import pytest
from click.testing import CliRunner

from neggen.cache import Cache, canonical, content_hash
from neggen.cli import cli
from neggen.config import ConfigError, PipelineConfig, apply_env, config_from_dict, load_config, validate_config


def test_fixture_config_loads(fixture_dir):
    cfg = load_config(fixture_dir / "config.toml", env={})
    assert cfg.seed == 7 and cfg.filters.box_threshold == 0.75 and cfg.filters.crop_factor == 1.5
    assert cfg.dataset_path == fixture_dir / "samples.jsonl"
    assert validate_config(cfg) == []


def test_defaults_without_file():
    cfg = load_config(None, env={})
    assert cfg == PipelineConfig()
    assert cfg.assembly.separator == ". " and cfg.assembly.k == 3


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="unknown keys: colour"):
        config_from_dict({"filters": {"colour": 1}})
    with pytest.raises(ConfigError, match="unknown config key"):
        config_from_dict({"bogus": 1})
    with pytest.raises(ConfigError, match="seed must be int"):
        config_from_dict({"seed": "x"})
    with pytest.raises(ConfigError, match="must be a table"):
        config_from_dict({"text": 3})


def test_bad_toml_and_missing_file(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("seed = = 1")
    with pytest.raises(ConfigError):
        load_config(p)
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.toml")


def test_env_overrides_urls():
    cfg = config_from_dict({"backends": {"text_url": "http://file"}})
    assert apply_env(cfg, {}).backends.text_url == "http://file"
    env = {"NEGGEN_TEXT_BACKEND_URL": "http://env", "NEGGEN_IMAGE_BACKEND_URL": "http://img"}
    got = apply_env(cfg, env).backends
    assert got.text_url == "http://env" and got.image_url == "http://img"


def test_validate_problems():
    cfg = config_from_dict({"text": {"strategies": ["nope"], "echo_rate": 2.0, "retries": -1},
                            "assembly": {"k": 0, "options": ["weird"]}, "max_inflight": 0,
                            "backends": {"image_mode": "cloud"}})
    problems = validate_config(cfg, check_files=False)
    assert len(problems) == 7


def test_canonical_ordering():
    assert canonical({"b": 1, "a": [1, 2]}) == b'{"a":[1,2],"b":1}'
    assert content_hash({"a": 1, "b": 2}) == content_hash({"b": 2, "a": 1})


def test_key_sensitivity():
    base = Cache.key("op", {"x": 1}, {"t": 0.7})
    assert base == Cache.key("op", {"x": 1}, {"t": 0.7})
    assert base != Cache.key("op2", {"x": 1}, {"t": 0.7})
    assert base != Cache.key("op", {"x": 2}, {"t": 0.7})
    assert base != Cache.key("op", {"x": 1}, {"t": 0.8})


def test_json_round_trip_and_counts(tmp_path):
    c = Cache(tmp_path)
    k = Cache.key("a", 1)
    assert c.get_json(k) is None
    c.put_json(k, {"v": [1, 2]})
    assert c.get_json(k) == {"v": [1, 2]}
    assert (c.hits, c.misses) == (1, 1)
    c._path(k, ".json").write_text("{broken")
    assert c.get_json(k) is None


def test_file_restore(tmp_path):
    c = Cache(tmp_path / "cache")
    src = tmp_path / "a.bin"
    src.write_bytes(b"\x00\x01")
    k = Cache.key("f", 1)
    assert not c.restore_file(k, tmp_path / "x.bin", ".bin")
    c.put_file(k, src, ".bin")
    assert c.restore_file(k, tmp_path / "sub" / "x.bin", ".bin")
    assert (tmp_path / "sub" / "x.bin").read_bytes() == b"\x00\x01"


def test_disabled_cache(tmp_path):
    c = Cache(tmp_path, enabled=False)
    c.put_json("k", 1)
    assert c.get_json("k") is None and (c.hits, c.misses) == (0, 0)
    assert not any(tmp_path.iterdir())


def test_filter_change_keeps_text_cache(tmp_path, fixture_dir):
    """Changing filter thresholds must not invalidate generated text."""
    text = (fixture_dir / "config.toml").read_text()
    cfg = tmp_path / "c.toml"
    cfg.write_text(text.replace('path = "samples.jsonl"', f'path = "{fixture_dir / "samples.jsonl"}"')
                   .replace('substitutions = "substitutions.json"',
                            f'substitutions = "{fixture_dir / "substitutions.json"}"')
                   .replace('seed_pairs = "seed_pairs.jsonl"', f'seed_pairs = "{fixture_dir / "seed_pairs.jsonl"}"')
                   .replace('seed_triplets = "seed_triplets.jsonl"',
                            f'seed_triplets = "{fixture_dir / "seed_triplets.jsonl"}"'))
    args = ["--mock", "--config", str(cfg), "--out", str(tmp_path / "o"), "--cache", str(tmp_path / "c"),
            "gen-text", "--strategies", "recombination"]
    assert CliRunner().invoke(cli, args).exit_code == 0
    cfg.write_text(cfg.read_text().replace("image = 0.35", "image = 0.5"))
    res = CliRunner().invoke(cli, args)
    assert "cache hits: 20" in res.stderr
    cfg.write_text(cfg.read_text().replace("retries = 3", "retries = 4"))
    res = CliRunner().invoke(cli, args)
    assert "cache hits: 0" in res.stderr
    log = (tmp_path / "o" / "logs" / "gen-text.jsonl").read_text().splitlines()
    assert json.loads(log[-1])["event"] == "cache"
