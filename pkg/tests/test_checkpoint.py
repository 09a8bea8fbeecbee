"""Binary checkpoint container: exact round trips, canonical bytes, and
corruption reporting."""

import json
import struct

import numpy as np
import pytest

from invdec.checkpoint import MAGIC, CheckpointError, load_checkpoint, save_checkpoint
from invdec.model import ModelConfig, init_params
from invdec.rng import stream


def _cfg(**kw):
    base = dict(
        n_vars=4, lookback=12, horizon=3, patch_len=4, stride=4,
        d_model=8, n_heads=2, enc_layers=1, dec_layers=1,
        dropout=0.0, fusion_weight="learnable",
    )
    base.update(kw)
    return ModelConfig(**base)


def _randomized_params(cfg, seed=0):
    params = init_params(cfg, seed=seed)
    rng = stream(seed, "test/ckpt")
    for p in params.parameters():
        p.data[...] = rng.normal(size=p.data.shape)
    return params


def _rewrite_header(path, mutate):
    raw = path.read_bytes()
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + hlen])
    payload = raw[16 + hlen :]
    mutate(header)
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path.write_bytes(MAGIC + struct.pack("<Q", len(hb)) + hb + payload)


class TestRoundTrip:
    def test_bit_exact(self, tmp_path):
        cfg = _cfg()
        params = _randomized_params(cfg)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, cfg, params, seeds={"train": 17}, norm_stats_file="stats.txt")
        ckpt = load_checkpoint(path)
        assert ckpt.config == cfg
        assert ckpt.seeds == {"train": 17}
        assert ckpt.norm_stats_file == "stats.txt"
        loaded = ckpt.params.named()
        for name, p in params.named().items():
            np.testing.assert_array_equal(loaded[name].data, p.data)

    def test_save_is_byte_deterministic(self, tmp_path):
        cfg = _cfg()
        params = _randomized_params(cfg, seed=3)
        a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(a, cfg, params, seeds={"train": 1}, norm_stats_file="s.txt")
        save_checkpoint(b, cfg, params, seeds={"train": 1}, norm_stats_file="s.txt")
        assert a.read_bytes() == b.read_bytes()

    def test_fixed_fusion_round_trip(self, tmp_path):
        cfg = _cfg(fusion_weight=0.3)
        params = _randomized_params(cfg, seed=4)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, cfg, params)
        ckpt = load_checkpoint(path)
        assert ckpt.params.fusion_raw is None
        assert ckpt.config.resolved_fusion() == 0.3
        assert ckpt.norm_stats_file is None


class TestCorruption:
    def _saved(self, tmp_path):
        cfg = _cfg()
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, cfg, _randomized_params(cfg), seeds={}, norm_stats_file=None)
        return path

    def test_bad_magic(self, tmp_path):
        path = self._saved(tmp_path)
        raw = bytearray(path.read_bytes())
        raw[:8] = b"NOTMAGIC"
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_unsupported_version(self, tmp_path):
        path = self._saved(tmp_path)
        _rewrite_header(path, lambda h: h.update(version=2))
        with pytest.raises(CheckpointError, match="version 2"):
            load_checkpoint(path)

    def test_truncated_payload(self, tmp_path):
        path = self._saved(tmp_path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-8])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path)

    def test_unknown_parameter_name(self, tmp_path):
        path = self._saved(tmp_path)
        _rewrite_header(path, lambda h: h["params"][0].update(name="bogus"))
        with pytest.raises(CheckpointError, match="bogus"):
            load_checkpoint(path)

    def test_shape_mismatch(self, tmp_path):
        path = self._saved(tmp_path)
        _rewrite_header(path, lambda h: h["params"][0].update(shape=[1, 1]))
        with pytest.raises(CheckpointError, match="shape"):
            load_checkpoint(path)

    def test_missing_parameter(self, tmp_path):
        path = self._saved(tmp_path)
        _rewrite_header(path, lambda h: h["params"].pop())
        with pytest.raises(CheckpointError, match="missing"):
            load_checkpoint(path)
