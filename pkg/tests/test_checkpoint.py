import json
import struct

import numpy as np
import pytest

from perceiver_prompt.checkpoint import (MAGIC, VERSION, CheckpointError, load_lora, load_module, load_tensors,
                                         save_lora, save_module, save_tensors)
from perceiver_prompt.lora import apply_lora, lora_state_dict
from perceiver_prompt.model import ASRModel, ModelConfig

SMALL = ModelConfig(d_model=16, n_heads=2, n_encoder_blocks=1, n_decoder_blocks=1, ffn_dim=16)


def test_round_trip_is_exact(tmp_path, rng):
    tensors = {"a": rng.standard_normal((3, 4)).astype(np.float32), "b.c": np.arange(5, dtype=np.float32),
               "scalar": np.array(2.5, dtype=np.float32)}
    save_tensors(tmp_path / "x.ppck", tensors, {"note": "hi"}, kind="full")
    header, back = load_tensors(tmp_path / "x.ppck")
    assert header["kind"] == "full" and header["config"] == {"note": "hi"}
    for k, v in tensors.items():
        assert back[k].dtype == np.float32 and np.array_equal(back[k], v)


def test_on_disk_layout(tmp_path):
    save_tensors(tmp_path / "x.ppck", {"w": np.array([1.0, -2.0], dtype=np.float32)}, kind="lora")
    raw = (tmp_path / "x.ppck").read_bytes()
    magic, version, hlen = struct.unpack_from("<4sIQ", raw)
    assert (magic, version) == (MAGIC, VERSION) == (b"PPCK", 1)
    header = json.loads(raw[16:16 + hlen])
    assert header["tensors"] == [{"name": "w", "shape": [2], "offset": 0, "nbytes": 8}]
    assert raw[16 + hlen:] == np.array([1.0, -2.0], dtype="<f4").tobytes()


@pytest.mark.parametrize("damage, msg", [
    (lambda b: b"XXXX" + b[4:], "magic"),
    (lambda b: b[:4] + struct.pack("<I", 99) + b[8:], "version"),
    (lambda b: b[:-3], "truncated"),
    (lambda b: b[:20], "truncated"),
    (lambda b: b[:7], "too short"),
])
def test_damaged_files_are_rejected(tmp_path, damage, msg):
    p = tmp_path / "x.ppck"
    save_tensors(p, {"w": np.ones((4, 4), dtype=np.float32)})
    p.write_bytes(damage(p.read_bytes()))
    with pytest.raises(CheckpointError, match=msg):
        load_tensors(p)


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError, match="not found"):
        load_tensors(tmp_path / "nope.ppck")


def test_module_round_trip(tmp_path):
    a, b = ASRModel(SMALL, seed=1), ASRModel(SMALL, seed=2)
    save_module(tmp_path / "m.ppck", a, {"k": 1})
    assert load_module(tmp_path / "m.ppck", b) == {"k": 1}
    for (n, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        assert np.array_equal(p.data, q.data), n


def test_module_shape_mismatch(tmp_path):
    save_module(tmp_path / "m.ppck", ASRModel(SMALL))
    with pytest.raises(CheckpointError, match="does not match"):
        load_module(tmp_path / "m.ppck", ASRModel(ModelConfig(d_model=32, n_heads=2, n_encoder_blocks=1,
                                                              n_decoder_blocks=1, ffn_dim=16)))


def test_kind_is_checked(tmp_path):
    m = ASRModel(SMALL)
    save_module(tmp_path / "m.ppck", m)
    with pytest.raises(CheckpointError, match="expected a LoRA"):
        load_lora(tmp_path / "m.ppck", ASRModel(SMALL))
    apply_lora(m, r=2)
    save_lora(tmp_path / "l.ppck", m, {"rank": 2, "alpha": 8.0})
    with pytest.raises(CheckpointError, match="expected a full"):
        load_module(tmp_path / "l.ppck", ASRModel(SMALL))


def test_lora_file_holds_only_adapters_and_reloads_on_base(tmp_path, rng):
    base = ASRModel(SMALL, seed=5)
    save_module(tmp_path / "base.ppck", base)
    apply_lora(base, r=2, seed=3)
    for n, p in base.named_parameters():
        if n.endswith("lora_B"):
            p.data[:] = rng.standard_normal(p.shape)
    save_lora(tmp_path / "l.ppck", base, {"rank": 2, "alpha": 8.0})
    _, tensors = load_tensors(tmp_path / "l.ppck")
    assert set(tensors) == set(lora_state_dict(base))
    assert all(k.endswith(("lora_A", "lora_B")) for k in tensors)

    fresh = ASRModel(SMALL, seed=99)
    load_module(tmp_path / "base.ppck", fresh)
    load_lora(tmp_path / "l.ppck", fresh)
    mel = rng.standard_normal((40, SMALL.n_mels)).astype(np.float32)
    assert fresh.transcribe([mel]) == base.transcribe([mel])
    x, lens = fresh.stem_batch([mel])
    y, _ = base.stem_batch([mel])
    assert np.array_equal(fresh.encode(x, lens).embeddings.data, base.encode(y, lens).embeddings.data)


def test_lora_rank_mismatch(tmp_path):
    m = ASRModel(SMALL)
    apply_lora(m, r=2)
    save_lora(tmp_path / "l.ppck", m, {"rank": 2, "alpha": 8.0})
    other = ASRModel(SMALL)
    apply_lora(other, r=4)
    with pytest.raises((CheckpointError, ValueError)):
        load_lora(tmp_path / "l.ppck", other)


def test_save_lora_needs_adapters(tmp_path):
    with pytest.raises(CheckpointError):
        save_lora(tmp_path / "l.ppck", ASRModel(SMALL))
