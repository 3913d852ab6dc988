import struct

import numpy as np
import pytest

from promptspk import formats
from promptspk.config import ConfigError, config_from_dict, load_config, with_seed
from promptspk.discriminative import DiscConfig
from promptspk.flow import FlowConfig
from promptspk.synthdata import SynthWorldConfig, generate_corpus
from promptspk.systems import SYSTEMS, RunConfig, train_system

TINY = RunConfig(
    world=SynthWorldConfig(n_train=40, n_heldout=8, n_eval=4),
    disc=DiscConfig(hidden=8, epochs=2),
    flow=FlowConfig(hidden=8, n_layers=2, epochs=2, lora_rank=2),
)


def test_emb1_layout(tmp_path):
    x = np.arange(6.0).reshape(2, 3) / 7
    path = tmp_path / "a.emb"
    formats.write_embeddings(path, x, [{"speaker_id": "s0"}, {"speaker_id": "s1", "condition_id": "c"}])
    raw = path.read_bytes()
    assert raw[:4] == b"EMB1" and struct.unpack("<II", raw[4:12]) == (2, 3)
    assert raw[12:] == x.astype("<f8").tobytes()
    np.testing.assert_array_equal(formats.read_embeddings(path), x)
    assert formats.read_sidecar(path) == [
        {"index": 0, "speaker_id": "s0", "condition_id": "s0"},
        {"index": 1, "speaker_id": "s1", "condition_id": "c"},
    ]


def test_emb1_rejects_garbage(tmp_path):
    (tmp_path / "bad.emb").write_bytes(b"NOPE" + bytes(8))
    with pytest.raises(formats.FormatError):
        formats.read_embeddings(tmp_path / "bad.emb")
    (tmp_path / "short.emb").write_bytes(b"EMB1" + struct.pack("<II", 2, 2) + bytes(8))
    with pytest.raises(formats.FormatError):
        formats.read_embeddings(tmp_path / "short.emb")


@pytest.mark.parametrize("name", SYSTEMS)
def test_checkpoint_roundtrip_bit_identical(schema, tmp_path, name):
    corpus = generate_corpus(TINY.world, schema)
    system = train_system(name, corpus, TINY, schema)
    path = tmp_path / f"{name}.ckpt"
    formats.save_checkpoint(path, system)
    back = formats.load_checkpoint(path, schema)
    assert back.name == name and back.d == system.d
    for part in ("disc", "flow"):
        a, b = getattr(system, part), getattr(back, part)
        assert (a is None) == (b is None)
    if system.disc is not None:
        for x, y in zip(system.disc.projection.arrays() + system.disc.adapter.arrays(),
                        back.disc.projection.arrays() + back.disc.adapter.arrays()):
            assert x.tobytes() == y.tobytes()
    if system.flow is not None:
        assert back.flow.mode == system.flow.mode
        for x, y in zip(system.flow.net.params.arrays(), back.flow.net.params.arrays()):
            assert x.tobytes() == y.tobytes()
    feats = np.random.default_rng(0).normal(size=(3, system.encoder.in_dim))
    np.testing.assert_array_equal(system.generate(feats, 2, seed=1), back.generate(feats, 2, seed=1))
    # re-saving the loaded system reproduces the file byte for byte
    formats.save_checkpoint(tmp_path / "again.ckpt", back)
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_header_and_errors(schema, tmp_path):
    corpus = generate_corpus(TINY.world, schema)
    system = train_system("disc_lora", corpus, TINY, schema)
    path = tmp_path / "c.ckpt"
    formats.save_checkpoint(path, system)
    header = formats.read_checkpoint_header(path)
    assert header["system"] == "disc_lora" and header["d"] == 16
    assert header["disc"]["projection"]["dims"] == [64, 8, 8, 8, 16]
    raw = path.read_bytes()
    (tmp_path / "trunc.ckpt").write_bytes(raw[:-8])
    with pytest.raises(formats.FormatError):
        formats.load_checkpoint(tmp_path / "trunc.ckpt", schema)
    (tmp_path / "long.ckpt").write_bytes(raw + bytes(8))
    with pytest.raises(formats.FormatError):
        formats.load_checkpoint(tmp_path / "long.ckpt", schema)


def test_corpus_dir_roundtrip(schema, tmp_path):
    corpus = generate_corpus(TINY.world, schema)
    formats.write_corpus(tmp_path / "c", corpus, schema)
    back, schema2 = formats.read_corpus(tmp_path / "c")
    assert schema2 == schema and back.config == corpus.config
    for split in corpus.records:
        assert back.records[split] == corpus.records[split]
        np.testing.assert_array_equal(back.embeddings[split], corpus.embeddings[split])
        np.testing.assert_array_equal(back.modes[split], corpus.modes[split])
    with pytest.raises(FileNotFoundError):
        formats.read_corpus(tmp_path / "missing")


def test_config_file(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text('world.preset = "lora_stress"\nworld.n_eval = 5\nencoder.damped_questions = ["pitch"]\n'
                    "disc.epochs = 7\nflow.ode_steps = 16\n")
    cfg = load_config(path)
    assert cfg.world.modes == 1 and cfg.world.n_eval == 5
    assert cfg.encoder.damped_questions == ("pitch",)
    assert cfg.disc.epochs == 7 and cfg.flow.ode_steps == 16
    assert load_config(None) == RunConfig()
    seeded = with_seed(cfg, 42)
    assert seeded.world.seed == seeded.disc.seed == seeded.flow.seed == 42


@pytest.mark.parametrize("doc", [{"world": {"bogus": 1}}, {"nosection": 1}, {"flow.ode_steps": 0},
                                 {"world": {"preset": "nope"}}])
def test_config_errors(doc):
    with pytest.raises(ConfigError):
        config_from_dict(doc)


def test_config_bad_toml(tmp_path):
    (tmp_path / "bad.toml").write_text("world.d = = 3\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.toml")
