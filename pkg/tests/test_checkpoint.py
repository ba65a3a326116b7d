from collections import OrderedDict

import numpy as np
import pytest
import torch
from torch import nn

from samus.checkpoint import (
    Checkpoint,
    CheckpointError,
    checkpoint_from_model,
    import_sam_layout,
    load_checkpoint,
    load_state_into,
    optimizer_to_arrays,
    save_checkpoint,
)
from samus.config import ModelConfig
from samus.model import Samus


def _tiny_model(seed=0, **overrides):
    torch.manual_seed(seed)
    cfg = ModelConfig(
        input_size=64,
        patch_stride=8,
        embed_dim=8,
        depth=2,
        global_block_indices=(1,),
        vit_heads=2,
        cba_dim=4,
        cba_heads=1,
        decoder_heads=2,
        task_token_count=2,
        **overrides,
    )
    return Samus(cfg, with_apg=True), cfg


def test_roundtrip_bit_exact(tmp_path):
    model, cfg = _tiny_model()
    ck = checkpoint_from_model(model, cfg.to_dict(), rng_seeds={"torch": 0})
    path = tmp_path / "model.bin"
    save_checkpoint(ck, path)
    back = load_checkpoint(path)
    assert back.config == cfg.to_dict()
    assert back.rng_seeds == {"torch": 0}
    assert list(back.params) == list(ck.params)
    for name in ck.params:
        a, b = ck.params[name], back.params[name]
        assert a.dtype == b.dtype, name
        assert a.shape == b.shape, name
        assert np.array_equal(a, b), name


def test_zero_dim_buffer_keeps_shape(tmp_path):
    model, cfg = _tiny_model()
    assert model.mask_decoder.logit_gain.shape == ()
    ck = checkpoint_from_model(model, cfg.to_dict())
    save_checkpoint(ck, tmp_path / "m.bin")
    back = load_checkpoint(tmp_path / "m.bin")
    assert back.params["mask_decoder.logit_gain"].shape == ()


def test_load_state_into_restores_exactly(tmp_path):
    model, cfg = _tiny_model(seed=1)
    ck = checkpoint_from_model(model, cfg.to_dict())
    save_checkpoint(ck, tmp_path / "m.bin")
    other, _ = _tiny_model(seed=2)
    loaded, missing, unexpected = load_state_into(
        load_checkpoint(tmp_path / "m.bin"), other, strict=True
    )
    assert not missing and not unexpected
    for name, tensor in model.state_dict().items():
        assert torch.equal(tensor, other.state_dict()[name]), name


def test_no_tmp_file_left_behind(tmp_path):
    model, cfg = _tiny_model()
    save_checkpoint(checkpoint_from_model(model, cfg.to_dict()), tmp_path / "m.bin")
    assert [p.name for p in tmp_path.iterdir()] == ["m.bin"]


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"NOTACKPT" + b"\x00" * 64)
    with pytest.raises(CheckpointError, match="not a recognized"):
        load_checkpoint(path)


def test_future_format_version_rejected(tmp_path):
    model, cfg = _tiny_model()
    ck = checkpoint_from_model(model, cfg.to_dict())
    ck.format_version = 99
    path = tmp_path / "m.bin"
    save_checkpoint(ck, path)
    with pytest.raises(CheckpointError, match="format_version"):
        load_checkpoint(path)


def test_shape_mismatch_raises(tmp_path):
    model, cfg = _tiny_model()
    ck = checkpoint_from_model(model, cfg.to_dict())
    ck.params["vit.pos_embed"] = np.zeros((1, 4, 4, 8), dtype=np.float32)
    save_checkpoint(ck, tmp_path / "m.bin")
    with pytest.raises(CheckpointError, match="shape mismatch"):
        load_state_into(load_checkpoint(tmp_path / "m.bin"), model)


def test_strict_mode_reports_mismatches(tmp_path):
    model, cfg = _tiny_model()
    ck = checkpoint_from_model(model, cfg.to_dict())
    del ck.params["vit.pos_embed"]
    ck.params["extra.weight"] = np.zeros(3, dtype=np.float32)
    save_checkpoint(ck, tmp_path / "m.bin")
    back = load_checkpoint(tmp_path / "m.bin")
    with pytest.raises(CheckpointError, match="state mismatch"):
        load_state_into(back, model, strict=True)
    loaded, missing, unexpected = load_state_into(back, model, strict=False)
    assert missing == ["vit.pos_embed"]
    assert unexpected == ["extra.weight"]
    assert len(loaded) == len(model.state_dict()) - 1


def test_big_endian_arrays_normalized(tmp_path):
    ck = Checkpoint(
        config={},
        params=OrderedDict(
            [("x", np.array([1.5, -2.0], dtype=">f8")), ("y", np.array(7, dtype=">i4"))]
        ),
    )
    save_checkpoint(ck, tmp_path / "m.bin")
    back = load_checkpoint(tmp_path / "m.bin")
    assert back.params["x"].dtype == np.dtype("<f8")
    assert np.array_equal(back.params["x"], [1.5, -2.0])
    assert back.params["y"].shape == ()
    assert back.params["y"] == 7


def test_mixed_dtypes_roundtrip(tmp_path):
    ck = Checkpoint(
        config={"note": 1},
        params=OrderedDict(
            [
                ("f32", np.random.default_rng(0).normal(size=(3, 2)).astype(np.float32)),
                ("f64", np.random.default_rng(1).normal(size=(2,))),
                ("i64", np.array([1, -5, 2**40], dtype=np.int64)),
                ("u8", np.array([[0, 255]], dtype=np.uint8)),
                ("b", np.array([True, False])),
            ]
        ),
    )
    save_checkpoint(ck, tmp_path / "m.bin")
    back = load_checkpoint(tmp_path / "m.bin")
    for name, arr in ck.params.items():
        assert back.params[name].dtype == arr.dtype, name
        assert np.array_equal(back.params[name], arr), name


def test_optimizer_state_roundtrip(tmp_path):
    model = nn.Linear(3, 2)
    opt = torch.optim.Adam(model.parameters(), lr=0.01)
    for _ in range(2):
        opt.zero_grad()
        model(torch.randn(4, 3)).sum().backward()
        opt.step()
    arrays, meta = optimizer_to_arrays(opt, model)
    assert meta["type"] == "Adam"
    assert meta["param_groups"][0]["lr"] == 0.01
    assert "weight.exp_avg" in arrays and "bias.exp_avg_sq" in arrays
    ck = checkpoint_from_model(model, {}, optimizer=arrays, optimizer_meta=meta)
    save_checkpoint(ck, tmp_path / "m.bin")
    back = load_checkpoint(tmp_path / "m.bin")
    assert back.optimizer_meta["type"] == "Adam"
    assert set(back.optimizer) == set(arrays)
    for name in arrays:
        assert np.array_equal(back.optimizer[name], np.asarray(arrays[name])), name


def test_optimizer_over_foreign_param_rejected():
    model = nn.Linear(3, 2)
    stray = nn.Parameter(torch.zeros(2))
    opt = torch.optim.Adam([stray], lr=0.1)
    opt.zero_grad()
    (stray * 2).sum().backward()
    opt.step()
    with pytest.raises(CheckpointError, match="not in the model"):
        optimizer_to_arrays(opt, model)


def test_checkpoint_without_optimizer_loads_none(tmp_path):
    model, cfg = _tiny_model()
    save_checkpoint(checkpoint_from_model(model, cfg.to_dict()), tmp_path / "m.bin")
    assert load_checkpoint(tmp_path / "m.bin").optimizer is None


def test_import_sam_layout():
    model, cfg = _tiny_model()
    weight = np.full((8, 3, 16, 16), 0.25, dtype=np.float32)
    bias = np.arange(8, dtype=np.float32)
    source = Checkpoint(
        config={},
        params=OrderedDict(
            [
                ("image_encoder.patch_embed.proj.weight", weight),
                ("image_encoder.patch_embed.proj.bias", bias),
            ]
        ),
    )
    name_map = {
        "image_encoder.patch_embed.proj.weight": "vit.patch_embed.proj.weight",
        "image_encoder.patch_embed.proj.bias": "vit.patch_embed.proj.bias",
    }
    registry, report = import_sam_layout(source, name_map, model)
    assert sorted(report.mapped) == [
        ("image_encoder.patch_embed.proj.bias", "vit.patch_embed.proj.bias"),
        ("image_encoder.patch_embed.proj.weight", "vit.patch_embed.proj.weight"),
    ]
    assert "vit.pos_embed" in report.fresh
    assert "vit.patch_embed.proj.weight" not in report.fresh
    assert torch.equal(model.vit.patch_embed.proj.weight, torch.from_numpy(weight))
    assert torch.equal(model.vit.patch_embed.proj.bias, torch.from_numpy(bias))
    assert "vit.patch_embed.proj.weight" in registry


def test_import_sam_layout_errors():
    target = nn.Linear(4, 4)
    source = Checkpoint(
        config={}, params=OrderedDict([("w", np.zeros((4, 4), dtype=np.float32))])
    )
    with pytest.raises(CheckpointError, match="absent"):
        import_sam_layout(source, {"missing": "weight"}, target)
    with pytest.raises(CheckpointError, match="not in model state"):
        import_sam_layout(source, {"w": "nonexistent"}, target)
    bad = Checkpoint(
        config={}, params=OrderedDict([("w", np.zeros((2, 2), dtype=np.float32))])
    )
    with pytest.raises(CheckpointError, match="shape mismatch"):
        import_sam_layout(bad, {"w": "weight"}, target)
