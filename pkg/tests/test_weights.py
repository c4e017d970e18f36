import struct

import numpy as np
import pytest
import torch

from sdgkit import config, engine
from sdgkit.weights import (MAGIC, WeightsFormatError, apply_weights, convert_torch_checkpoint, load_weights,
                            save_weights, torchvision_resnet18_names)


def test_round_trip(tmp_path):
    state = {"a": torch.arange(6.0).view(2, 3), "b.c": torch.tensor(3), "e": torch.zeros(0)}
    save_weights(state, tmp_path / "w.sdgw")
    back = load_weights(tmp_path / "w.sdgw")
    assert list(back) == ["a", "b.c", "e"]
    np.testing.assert_array_equal(back["a"], state["a"].numpy())
    assert back["b.c"].shape == () and back["b.c"] == 3


def test_layout_bytes(tmp_path):
    save_weights({"w": torch.tensor([1.5])}, tmp_path / "w")
    raw = (tmp_path / "w").read_bytes()
    assert raw == MAGIC + struct.pack("<IIIsII", 1, 1, 1, b"w", 1, 1) + struct.pack("<f", 1.5)


@pytest.mark.parametrize("damage", ["magic", "version", "truncate", "trailing"])
def test_format_errors(tmp_path, damage):
    p = tmp_path / "w"
    save_weights({"w": torch.ones(4)}, p)
    raw = bytearray(p.read_bytes())
    if damage == "magic":
        raw[:4] = b"XXXX"
    elif damage == "version":
        raw[4:8] = struct.pack("<I", 9)
    elif damage == "truncate":
        raw = raw[:-3]
    else:
        raw += b"\0"
    p.write_bytes(bytes(raw))
    with pytest.raises(WeightsFormatError):
        load_weights(p)


def test_network_round_trip_and_strictness(tmp_path):
    cfg = config.load_preset("smoke")
    a = engine.build_network(cfg, "condisr")
    save_weights(a.state_dict(), tmp_path / "n")
    torch.manual_seed(123)
    b = engine.build_network(cfg, "condisr")
    apply_weights(b, load_weights(tmp_path / "n"))
    for k, v in a.state_dict().items():
        assert torch.equal(v, b.state_dict()[k])
    partial = {k: v for k, v in load_weights(tmp_path / "n").items() if not k.startswith("decoder")}
    with pytest.raises(WeightsFormatError, match="missing"):
        apply_weights(b, partial)
    bad = dict(load_weights(tmp_path / "n"))
    bad["gate.theta"] = np.zeros((3, 3), np.float32)
    with pytest.raises(WeightsFormatError, match="shape"):
        apply_weights(b, bad)


def test_torchvision_conversion(tmp_path):
    from torchvision.models import resnet18

    tv = resnet18(weights=None)
    torch.save(tv.state_dict(), tmp_path / "r.pth")
    n = convert_torch_checkpoint(tmp_path / "r.pth", tmp_path / "r.sdgw")
    renamed = torchvision_resnet18_names(tv.state_dict())
    assert n == len(renamed) and not any(k.startswith("fc") for k in renamed)
    cfg = config.defaults().override(**{"model.pretrained": str(tmp_path / "r.sdgw")})
    net = engine.build_network(cfg, "erm")
    assert torch.equal(net.stem.conv.weight, tv.conv1.weight)
    assert torch.equal(net.body.blocks[3][1].conv2.weight, tv.layer4[1].conv2.weight)
    torch.save({"x": torch.ones(1)}, tmp_path / "junk.pth")
    with pytest.raises(WeightsFormatError):
        convert_torch_checkpoint(tmp_path / "junk.pth", tmp_path / "junk.sdgw")
