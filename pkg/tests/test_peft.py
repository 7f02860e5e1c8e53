import re

import numpy as np
import pytest

from tsvit_peft.core import Module
from tsvit_peft.core import tensor as tt
from tsvit_peft.core.nn import Linear
from tsvit_peft.core.optim import Adam
from tsvit_peft.core.rng import Rng
from tsvit_peft.model import REFERENCE_CONFIG, TSViT, TSViTConfig, munich_config
from tsvit_peft.peft import (
    AdaptFormer,
    BitFit,
    FullFineTune,
    HeadTune,
    Lora,
    LoraLinear,
    PeftError,
    Scratch,
    TokenTune,
    Vpt,
    apply_peft,
    attached_lora,
    bitfit_rule,
    merge_lora,
    spec_from_dict,
    spec_label,
)

SMALL = TSViTConfig(T=3, H=6, W=6, C=2, K=3, patch_size=3, dim=8, temporal_depth=2, spatial_depth=2, heads=2, mlp_ratio=2)
ALL_SPECS = [
    HeadTune(), BitFit("partial"), BitFit("full"), Vpt(4, 4), Vpt(2, 3, external=False, deep=False),
    Lora(2, 2, 2), AdaptFormer(4, 4), AdaptFormer(2, 0, placement="series"),
    TokenTune("full"), TokenTune("partial", (1,)), FullFineTune(), Scratch(),
]  # fmt: skip


@pytest.fixture(scope="module")
def ref():
    return TSViT(REFERENCE_CONFIG)


def _batch(cfg, B=2, seed=0):
    rng = np.random.default_rng(seed)
    tiles = rng.standard_normal((B, cfg.T, cfg.H, cfg.W, cfg.C)).astype(np.float32)
    days = np.tile(np.linspace(10, 300, cfg.T).astype(np.int64), (B, 1))
    labels = rng.integers(0, cfg.K, (B, cfg.H, cfg.W))
    return tiles, days, labels


def _trainable(model):
    return {p for p, prm in model.named_parameters() if prm.trainable}


# -- specs ------------------------------------------------------------------------


@pytest.mark.parametrize("spec", ALL_SPECS, ids=spec_label)
def test_spec_dict_round_trip(spec):
    assert spec_from_dict(spec.to_dict()) == spec


def test_spec_rejects_unknown_keys_and_methods():
    with pytest.raises(PeftError):
        spec_from_dict({"method": "lora", "rank": 4})
    with pytest.raises(PeftError):
        spec_from_dict({"method": "prefix"})


@pytest.mark.parametrize(
    "bad",
    [Vpt(0, 0), AdaptFormer(0, 0), TokenTune("partial", ()), BitFit("some"), Lora(-1, 0, 0), AdaptFormer(4, 4, placement="inside")],
)
def test_invalid_specs_rejected(bad, ref):
    with pytest.raises(PeftError):
        apply_peft(ref, bad)


def test_token_class_out_of_range(ref):
    with pytest.raises(PeftError):
        apply_peft(ref, TokenTune("partial", (2,)))


def test_lora_rank_too_large():
    with pytest.raises(PeftError):
        apply_peft(TSViT(SMALL), Lora(9, 0, 0))


# -- rules ------------------------------------------------------------------------


def test_full_finetune_all_trainable(ref):
    model, rep = apply_peft(ref, FullFineTune())
    assert rep.trainable == rep.total
    assert rep.percent == 100.0


def test_head_tune_only_head(ref):
    model, _ = apply_peft(ref, HeadTune())
    assert _trainable(model) == {"head.weight", "head.bias"}


def test_bitfit_full_matches_regex(ref):
    model, _ = apply_peft(ref, BitFit("full"))
    want = {p for p, _ in ref.named_parameters() if re.search(r"(^|\.)bias$", p) or p.startswith("head.")}
    assert _trainable(model) == want
    assert all(model.parameter_dict()[p].mask is None for p in want)


def test_bitfit_partial_subset_of_full(ref):
    part, _ = apply_peft(ref, BitFit("partial"))
    full, _ = apply_peft(ref, BitFit("full"))
    assert _trainable(part) < _trainable(full)
    n_part = sum(p.n_trainable for p in part.parameters())
    n_full = sum(p.n_trainable for p in full.parameters())
    assert n_part < n_full


def test_bitfit_partial_query_slice(ref):
    rule = bitfit_rule(ref.clone(), "partial")
    mask = rule["temporal.block0.attn.qkv.bias"]
    d = REFERENCE_CONFIG.dim
    assert mask.sum() == d and mask[:d].all() and not mask[d:].any()
    assert rule["spatial.block3.mlp.fc1.bias"] is None
    assert "temporal.block0.mlp.fc2.bias" not in rule


def test_bitfit_single_linear():
    class One(Module):
        def __init__(self):
            super().__init__()
            self.fc = Linear(4, 4, Rng(0))

    m = One()
    list(m.named_parameters())
    trainable = sum(p.size for path, p in m.named_parameters() if path.endswith("bias"))
    total = sum(p.size for p in m.parameters())
    assert (trainable, total) == (4, 20)
    assert 100 * trainable / total == 20.0


def test_token_tune_counts():
    base = TSViT(munich_config())
    full, rep = apply_peft(base, TokenTune("full"))
    assert rep.trainable == 27 * 128 == 3456
    assert _trainable(full) == {"temporal.cls_tokens"}
    part, rep = apply_peft(base, TokenTune("partial", (0,)))
    assert rep.trainable == 128
    head, hrep = apply_peft(base, HeadTune())
    assert 3456 > hrep.trainable


def test_unfreeze_head_flag(ref):
    model, _ = apply_peft(ref, BitFit("partial", unfreeze_head=False))
    assert "head.weight" not in _trainable(model)
    model, _ = apply_peft(ref, BitFit("partial"))
    assert "head.weight" in _trainable(model)


@pytest.mark.parametrize("spec", ALL_SPECS, ids=spec_label)
def test_report_partitions_paths(spec):
    base = TSViT(SMALL)
    model, rep = apply_peft(base, spec)
    paths = [p for p, _ in model.named_parameters()]
    groups = [set(rep.frozen), set(rep.unfrozen), set(rep.added)]
    assert sum(len(g) for g in groups) == len(paths)
    assert set().union(*groups) == set(paths)
    assert rep.total == sum(p.size for p in model.parameters())
    assert rep.trainable == sum(p.n_trainable for p in model.parameters())


def test_apply_copies_by_default(ref):
    before = ref.head.weight.data.tobytes()
    apply_peft(ref, Lora(2, 2, 2))
    assert not attached_lora(ref)
    assert all(p.trainable for p in ref.parameters())
    assert ref.head.weight.data.tobytes() == before


def test_scratch_reinitialises():
    base = TSViT(SMALL, seed=4)
    for p in base.parameters():
        p.data = p.data + 1.0
    model, rep = apply_peft(base, Scratch())
    fresh = TSViT(SMALL, seed=4)
    assert all(
        a.data.tobytes() == b.data.tobytes() for a, b in zip(model.parameters(), fresh.parameters())
    )
    assert rep.trainable == rep.total


# -- LoRA -------------------------------------------------------------------------


def test_lora_qkv_param_count(ref):
    model, _ = apply_peft(ref, Lora(4, 0, 0))
    layer = model.temporal.block0.attn.qkv
    assert isinstance(layer, LoraLinear)
    assert layer.lora_A.size + layer.lora_B.size == 4 * (128 + 384) == 2048
    assert not isinstance(model.spatial.block0.attn.qkv, LoraLinear)
    assert not isinstance(model.head, LoraLinear)


def test_lora_zero_ranks_is_identity(ref):
    model, rep = apply_peft(ref, Lora(0, 0, 0))
    assert rep.added == [] and not attached_lora(model)
    tiles, days, _ = _batch(REFERENCE_CONFIG, 1)
    with tt.no_grad():
        assert model(tiles, days).data.tobytes() == ref(tiles, days).data.tobytes()


@pytest.mark.parametrize("spec", [Lora(1, 2, 3), Lora(4, 0, 8), AdaptFormer(3, 5), AdaptFormer(4, 0, placement="series", scale=0.5)], ids=spec_label)
def test_attach_time_identity(spec):
    base = TSViT(SMALL, seed=1)
    model, _ = apply_peft(base, spec)
    tiles, days, _ = _batch(SMALL)
    with tt.no_grad():
        assert model(tiles, days).data.tobytes() == base(tiles, days).data.tobytes()


def _train_steps(model, cfg, steps, lr=0.01, seed=0):
    opt = Adam(model.trainable_parameters(), lr)
    for s in range(steps):
        tiles, days, labels = _batch(cfg, 2, seed + s)
        opt.zero_grad()
        tt.cross_entropy(model(tiles, days), labels, axis=1).backward()
        opt.step()


def test_merge_with_zero_update_is_bitwise():
    model, _ = apply_peft(TSViT(SMALL), Lora(2, 2, 2))
    w0 = model.temporal.block0.mlp.fc1.weight.data.copy()
    merge_lora(model)
    assert model.temporal.block0.mlp.fc1.weight.data.tobytes() == w0.tobytes()


def test_merge_forward_equivalence_after_training():
    model, _ = apply_peft(TSViT(SMALL), Lora(2, 2, 2, alpha=4.0))
    _train_steps(model, SMALL, 10)
    tiles, days, _ = _batch(SMALL, 3, seed=99)
    with tt.no_grad():
        before = model(tiles, days).data.astype(np.float64)
        merge_lora(model)
        after = model(tiles, days).data.astype(np.float64)
    assert not attached_lora(model)
    assert np.abs(after - before).max() / np.abs(before).max() < 1e-5
    paths = {p for p, _ in model.named_parameters()}
    assert paths == {p for p, _ in TSViT(SMALL).named_parameters()}


def test_merge_idempotent_and_warns_without_lora():
    model, _ = apply_peft(TSViT(SMALL), Lora(2, 2, 2))
    _train_steps(model, SMALL, 3)
    merge_lora(model)
    once = [p.data.tobytes() for p in model.parameters()]
    with pytest.warns(UserWarning):
        merge_lora(model)
    assert [p.data.tobytes() for p in model.parameters()] == once


def test_lora_scale_uses_alpha():
    assert Lora(4, 4, 4).scale(4) == 1.0
    assert Lora(4, 4, 4, alpha=8.0).scale(4) == 2.0


# -- AdaptFormer ------------------------------------------------------------------


def test_adapter_param_count(ref):
    model, rep = apply_peft(ref, AdaptFormer(8, 8))
    adapter = model.temporal.block0.adapter
    assert sum(p.size for p in adapter.parameters()) == 2 * 128 * 8 + 8 + 128 == 2184
    assert len(rep.added) == 4 * 8


def test_adapter_temporal_only(ref):
    model, _ = apply_peft(ref, AdaptFormer(8, 0))
    assert all(b.adapter is not None for b in model.temporal.blocks)
    assert all(b.adapter is None for b in model.spatial.blocks)


# -- VPT --------------------------------------------------------------------------


def test_vpt_reference_count(ref):
    _, rep = apply_peft(ref, Vpt(16, 16))
    added = rep.total - sum(p.size for p in ref.parameters())
    assert added == 16 * 128 * 4 + 16 * 128 * 4 == 16384


def test_vpt_deep_is_depth_times_shallow(ref):
    _, deep = apply_peft(ref, Vpt(8, 4, deep=True))
    _, shallow = apply_peft(ref, Vpt(8, 4, deep=False))
    base = sum(p.size for p in ref.parameters())
    assert deep.total - base == 4 * (shallow.total - base)


def test_vpt_series4_leaves_spatial_untouched(ref):
    model, rep = apply_peft(ref, Vpt(8, 0))
    assert model.spatial.prompt is None
    assert not any(p.startswith("spatial.") for p in rep.added)
    assert not any(p.startswith("spatial.") for p in rep.unfrozen)


@pytest.mark.parametrize("external", [True, False])
@pytest.mark.parametrize("deep", [True, False])
def test_vpt_output_shape_unchanged(external, deep):
    model, _ = apply_peft(TSViT(SMALL), Vpt(3, 2, external=external, deep=deep))
    tiles, days, _ = _batch(SMALL)
    with tt.no_grad():
        assert model(tiles, days).shape == (2, SMALL.K, SMALL.H, SMALL.W)


def test_vpt_prompts_change_output():
    base = TSViT(SMALL)
    model, _ = apply_peft(base, Vpt(3, 3, external=False))
    tiles, days, _ = _batch(SMALL)
    with tt.no_grad():
        assert not np.array_equal(model(tiles, days).data, base(tiles, days).data)


# -- freeze soundness ---------------------------------------------------------------


@pytest.mark.parametrize("spec", ALL_SPECS, ids=spec_label)
def test_frozen_params_unchanged_after_training(spec):
    model, _ = apply_peft(TSViT(SMALL, seed=2), spec)
    before = {p: (prm.data.copy(), prm.mask) for p, prm in model.named_parameters()}
    _train_steps(model, SMALL, 5)
    moved = False
    for path, prm in model.named_parameters():
        old, mask = before[path]
        if not prm.trainable:
            assert prm.data.tobytes() == old.tobytes(), path
        else:
            if mask is not None:
                assert np.array_equal(prm.data[~mask], old[~mask]), path
            moved |= not np.array_equal(prm.data, old)
    assert moved
