import os

import pytest

from models.errors import ConfigurationError
from models.schemas import FlowConfig, VqConfig
from services.config_service import (
    MANIFEST_FILE,
    RESOLVED_FILE,
    code_version,
    config_hash,
    parse_config_text,
    read_manifest,
    resolve_config,
    update_manifest,
    write_manifest,
    write_resolved,
)


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    for name in ("SDFLOW_THREADS", "SDFLOW_OUT"):
        monkeypatch.delenv(name, raising=False)


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "exp.cfg"
    path.write_text("# desk run\nthreads = 3\nseed = 11\n\nflow.ode_steps = 10\n")
    return str(path)


def test_defaults():
    resolved = resolve_config()
    assert resolved.config.seed == 0
    assert resolved.config.vq.seq_len == resolved.config.data.seq_len
    assert set(resolved.sources.values()) == {"default"}


def test_layer_precedence(monkeypatch, config_file):
    monkeypatch.setenv("SDFLOW_THREADS", "2")
    assert resolve_config().config.threads == 2
    assert resolve_config(config_file).config.threads == 3
    assert resolve_config(config_file, ["threads=4"]).config.threads == 4
    resolved = resolve_config(config_file, ["threads=4"], {"threads": 5, "seed": None})
    assert resolved.config.threads == 5
    assert resolved.config.seed == 11
    assert resolved.sources["threads"] == "cli"
    assert resolved.sources["seed"] == f"file:{config_file}"
    assert resolved.sources["flow.ode_steps"] == f"file:{config_file}"


def test_dataset_shape_flows_into_the_tokenizer():
    resolved = resolve_config(overrides=["data.seq_len=12", "data.features=3"])
    assert resolved.config.vq.seq_len == 12
    assert resolved.config.vq.features == 3


def test_conflicting_window_shapes():
    with pytest.raises(ConfigurationError, match="conflicts"):
        resolve_config(overrides=["data.seq_len=12", "vq.seq_len=16"])


@pytest.mark.parametrize("override", ["flow.nonexistent=1", "colour=blue"])
def test_unknown_keys(override):
    with pytest.raises(ConfigurationError, match="unknown config key"):
        resolve_config(overrides=[override])


@pytest.mark.parametrize("override", ["flow.heads=3", "vq.downsample=5", "threads=0", "seed=abc"])
def test_invalid_values(override):
    with pytest.raises(ConfigurationError):
        resolve_config(overrides=[override])


def test_malformed_lines():
    with pytest.raises(ConfigurationError, match=":2:"):
        parse_config_text("seed = 1\njust words\n", "bad.cfg")
    with pytest.raises(ConfigurationError):
        resolve_config(overrides=["seed"])
    with pytest.raises(ConfigurationError):
        resolve_config("/nonexistent/exp.cfg")


def test_lists_and_none():
    resolved = resolve_config(overrides=["ablate.ranks=4,8", "scaffold.bandwidth=0.5"])
    assert resolved.config.ablate.ranks == [4, 8]
    assert resolved.values["ablate.ranks"] == "4,8"
    assert resolved.config.scaffold.bandwidth == 0.5
    assert resolve_config(overrides=["scaffold.bandwidth=none"]).config.scaffold.bandwidth is None


def test_hash_is_stable_and_sensitive():
    a = resolve_config(overrides=["seed=1"])
    b = resolve_config(overrides=["seed=1"])
    c = resolve_config(overrides=["seed=2"])
    assert a.hash == b.hash != c.hash
    assert config_hash(dict(reversed(list(a.values.items())))) == a.hash


def test_code_version():
    version = code_version()
    assert len(version) == 12
    assert version == code_version()


def test_resolved_file_and_manifest(tmp_path):
    resolved = resolve_config(overrides=["seed=3"])
    out = str(tmp_path / "run")
    path = write_resolved(out, resolved)
    assert os.path.basename(path) == RESOLVED_FILE
    lines = open(path).read().splitlines()
    assert "seed = 3" in lines
    assert lines == sorted(lines)

    write_manifest(out, "generate", resolved, extra={"args": {"n": 5}})
    manifest = read_manifest(out)
    assert manifest["command"] == "generate"
    assert manifest["seed"] == 3
    assert manifest["config_hash"] == resolved.hash
    assert manifest["args"] == {"n": 5}
    assert manifest["sources"]["seed"] == "set"

    update_manifest(out, exit_code=0, metrics={"ds": 0.1})
    manifest = read_manifest(out)
    assert manifest["exit_code"] == 0 and manifest["metrics"] == {"ds": 0.1}
    assert os.path.exists(os.path.join(out, MANIFEST_FILE))


def test_full_scale_presets():
    vq = VqConfig.full_scale(seq_len=24, features=5)
    assert (vq.codebook_size, vq.code_dim, vq.latent_len) == (512, 512, 6)
    assert FlowConfig.full_scale(vq.latent_len).d_model == 512
    deep = FlowConfig.full_scale(24, train_steps=10)
    assert (deep.d_model, deep.layers, deep.train_steps) == (1024, 3, 10)
