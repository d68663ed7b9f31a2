"""Config file parsing, override precedence, validation, and key resolution."""

import pytest

from vfseg.config import (
    KEY_ENV_VAR,
    PartyConfig,
    build_config,
    parse_config_file,
    resolve_key,
)
from vfseg.errors import ConfigurationError


def test_parse_config_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(
        "# training run\n"
        "preset = vgg16\n"
        "batch_size = 4   # small\n"
        "\n"
        "lr=0.001\n")
    assert parse_config_file(path) == {
        "preset": "vgg16", "batch_size": "4", "lr": "0.001"}


def test_parse_config_file_errors(tmp_path):
    with pytest.raises(ConfigurationError, match="cannot read"):
        parse_config_file(tmp_path / "missing.cfg")
    bad = tmp_path / "bad.cfg"
    bad.write_text("just words\n")
    with pytest.raises(ConfigurationError, match="key = value"):
        parse_config_file(bad)
    dup = tmp_path / "dup.cfg"
    dup.write_text("seed = 1\nseed = 2\n")
    with pytest.raises(ConfigurationError, match="duplicate"):
        parse_config_file(dup)


def test_build_config_precedence(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("batch_size = 4\nlr = 0.5\nresume = yes\n")
    cfg = build_config(path, {"lr": 0.25, "epochs": 3, "resume": None})
    assert cfg.batch_size == 4       # from the file
    assert cfg.lr == 0.25            # override beats the file
    assert cfg.epochs == 3           # override beats the default
    assert cfg.resume is True        # None overrides are skipped
    assert cfg.preset == "tiny"      # untouched default


def test_build_config_rejects_unknown_keys(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("batchsize = 4\n")
    with pytest.raises(ConfigurationError, match="unknown config key"):
        build_config(path)
    with pytest.raises(ConfigurationError, match="unknown config key"):
        build_config(None, {"batchsize": 4})


def test_build_config_coerces_types(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("port = 9000\ntimeout = 5.5\nresume = false\n")
    cfg = build_config(path)
    assert cfg.port == 9000 and cfg.timeout == 5.5 and cfg.resume is False
    bad = tmp_path / "bad.cfg"
    bad.write_text("resume = maybe\n")
    with pytest.raises(ConfigurationError, match="bad value"):
        build_config(bad)
    bad2 = tmp_path / "bad2.cfg"
    bad2.write_text("batch_size = four\n")
    with pytest.raises(ConfigurationError, match="bad value"):
        build_config(bad2)


@pytest.mark.parametrize("field,value,hint", [
    ("role", "middle", "role"),
    ("transport", "udp", "transport"),
    ("optimizer", "rmsprop", "optimizer"),
    ("wire_float", "f16", "wire_float"),
    ("preset", "vgg19", "preset"),
    ("batch_size", 0, "batch_size"),
    ("epochs", 0, "epochs"),
    ("lr", 0.0, "lr"),
    ("momentum", 1.0, "momentum"),
    ("seed", -1, "seed"),
    ("port", 0, "port"),
    ("timeout", 0.0, "timeout"),
])
def test_validate_rejects_bad_values(field, value, hint):
    cfg = PartyConfig(**{field: value})
    with pytest.raises(ConfigurationError, match=hint):
        cfg.validate()


def test_validate_role_transport_rule():
    with pytest.raises(ConfigurationError, match="transport=tcp"):
        PartyConfig(role="bottom", transport="loopback").validate()
    PartyConfig(role="bottom", transport="tcp").validate()
    PartyConfig(role="both", transport="loopback").validate()


def test_validate_batch_norm_needs_pairs():
    with pytest.raises(ConfigurationError, match="batch norm"):
        PartyConfig(preset="vgg16", batch_size=1).validate()


def test_derived_paths():
    cfg = PartyConfig(out_dir="runs/a", data_dir="d")
    assert str(cfg.bottom_checkpoint) == "runs/a/bottom.ckpt"
    assert str(cfg.top_checkpoint) == "runs/a/top.ckpt"
    assert str(cfg.metrics_path) == "runs/a/metrics.jsonl"
    assert str(cfg.images_dir) == "d/images"
    assert str(cfg.labels_dir) == "d/labels"


def test_echo_lists_every_field():
    cfg = PartyConfig()
    echoed = cfg.echo()
    for name in ("role", "preset", "batch_size", "epochs", "lr", "seed",
                 "transport", "wire_float", "resume", "key_file"):
        assert f"{name} = " in echoed


def test_resolve_key_from_env(monkeypatch):
    key = bytes(range(32))
    monkeypatch.setenv(KEY_ENV_VAR, key.hex())
    assert resolve_key(PartyConfig()) == key
    monkeypatch.setenv(KEY_ENV_VAR, "zz" * 32)
    with pytest.raises(ConfigurationError, match="hex"):
        resolve_key(PartyConfig())
    monkeypatch.setenv(KEY_ENV_VAR, "ab" * 16)
    with pytest.raises(ConfigurationError, match="32 bytes"):
        resolve_key(PartyConfig())


def test_resolve_key_from_file(tmp_path, monkeypatch):
    monkeypatch.delenv(KEY_ENV_VAR, raising=False)
    key_path = tmp_path / "psk.hex"
    key_path.write_text("00ff" * 16 + "\n")
    cfg = PartyConfig(key_file=str(key_path))
    assert resolve_key(cfg) == bytes.fromhex("00ff" * 16)
    cfg = PartyConfig(key_file=str(tmp_path / "missing.hex"))
    with pytest.raises(ConfigurationError, match="cannot read key file"):
        resolve_key(cfg)


def test_resolve_key_fallbacks(monkeypatch):
    monkeypatch.delenv(KEY_ENV_VAR, raising=False)
    # loopback runs never cross a process boundary: fresh random key
    a = resolve_key(PartyConfig(transport="loopback"))
    b = resolve_key(PartyConfig(transport="loopback"))
    assert len(a) == 32 and a != b
    with pytest.raises(ConfigurationError, match=KEY_ENV_VAR):
        resolve_key(PartyConfig(role="bottom", transport="tcp"))


def test_env_key_beats_key_file(tmp_path, monkeypatch):
    key_path = tmp_path / "psk.hex"
    key_path.write_text("11" * 32)
    monkeypatch.setenv(KEY_ENV_VAR, "22" * 32)
    cfg = PartyConfig(key_file=str(key_path))
    assert resolve_key(cfg) == bytes.fromhex("22" * 32)
