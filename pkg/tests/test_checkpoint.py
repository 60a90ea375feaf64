import json
import struct

import numpy as np
import pytest

from poplab.checkpoint import MAGIC, load_checkpoint, model_hash, save_checkpoint
from poplab.errors import FormatError


def _header(path):
    raw = path.read_bytes()
    (n,) = struct.unpack("<I", raw[8:12])
    return raw, n, json.loads(raw[12 : 12 + n])


def _rewrite(path, raw, n, header):
    hb = json.dumps(header).encode()
    path.write_bytes(raw[:8] + struct.pack("<I", len(hb)) + hb + raw[12 + n :])


def test_roundtrip_bitwise(tmp_path, tiny_weights, tiny_config):
    p = tmp_path / "m.ckpt"
    save_checkpoint(tiny_weights, tiny_config, p)
    w, cfg = load_checkpoint(p)
    assert cfg == tiny_config
    for (n, a), (_, b) in zip(tiny_weights.named_arrays(), w.named_arrays()):
        assert a.tobytes() == b.tobytes(), n
    assert model_hash(w) == model_hash(tiny_weights)


def test_file_layout(tmp_path, tiny_weights, tiny_config):
    p = tmp_path / "m.ckpt"
    save_checkpoint(tiny_weights, tiny_config, p)
    raw, n, header = _header(p)
    assert raw[:8] == MAGIC
    assert header["num_layers"] == 3
    first = header["tensors"][0]
    assert first["name"] == "embed" and first["offset"] == 0
    data = raw[12 + n :]
    embed = np.frombuffer(data[: 8 * first["count"]], dtype="<f8").reshape(first["shape"])
    assert np.array_equal(embed, tiny_weights.embed)


def test_bad_magic(tmp_path, tiny_weights, tiny_config):
    p = tmp_path / "m.ckpt"
    save_checkpoint(tiny_weights, tiny_config, p)
    raw = bytearray(p.read_bytes())
    raw[0:4] = b"XXXX"
    p.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="magic"):
        load_checkpoint(p)


def test_manifest_shape_mismatch_names_tensor(tmp_path, tiny_weights, tiny_config):
    p = tmp_path / "m.ckpt"
    save_checkpoint(tiny_weights, tiny_config, p)
    raw, n, header = _header(p)
    entry = next(t for t in header["tensors"] if t["name"] == "layers.1.wk")
    entry["shape"] = [entry["shape"][0], entry["shape"][1] + 1]
    _rewrite(p, raw, n, header)
    with pytest.raises(FormatError, match="layers.1.wk"):
        load_checkpoint(p)


def test_manifest_count_mismatch(tmp_path, tiny_weights, tiny_config):
    p = tmp_path / "m.ckpt"
    save_checkpoint(tiny_weights, tiny_config, p)
    raw, n, header = _header(p)
    header["tensors"][-1]["count"] += 1
    _rewrite(p, raw, n, header)
    with pytest.raises(FormatError, match="head"):
        load_checkpoint(p)


def test_truncated_data(tmp_path, tiny_weights, tiny_config):
    p = tmp_path / "m.ckpt"
    save_checkpoint(tiny_weights, tiny_config, p)
    p.write_bytes(p.read_bytes()[:-16])
    with pytest.raises(FormatError, match="head"):
        load_checkpoint(p)


def test_truncated_header(tmp_path, tiny_weights, tiny_config):
    p = tmp_path / "m.ckpt"
    save_checkpoint(tiny_weights, tiny_config, p)
    p.write_bytes(p.read_bytes()[:40])
    with pytest.raises(FormatError):
        load_checkpoint(p)


def test_hash_changes_with_weights(tiny_weights):
    other = tiny_weights.replace_layer(0, wq=tiny_weights.layers[0].wq + 1e-12)
    assert model_hash(other) != model_hash(tiny_weights)
