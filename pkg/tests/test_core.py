import itertools

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from garmentedit.core import (EditConfig, ImageBuffer, LatentCode, LatentPartition, LossWeights,
                              RangeTag, RegionMask, SpaceTag, TextCondition, make_partition,
                              mask_background)


def test_latent_code_validation():
    LatentCode(torch.zeros(3, 1))
    with pytest.raises(ValueError):
        LatentCode(torch.zeros(2, 4))
    with pytest.raises(ValueError):
        LatentCode(torch.tensor([[0.0], [float("nan")], [1.0]]))
    c = LatentCode(torch.ones(4, 2)) + LatentCode(torch.ones(4, 2))
    assert c.L == 4 and c.D == 2 and torch.equal(c.values, torch.full((4, 2), 2.0))
    assert c.space_tag is SpaceTag.WPLUS


def test_partition_slices_cover_layers():
    p = make_partition(18, 4, 8)
    idx = list(range(18))
    assert idx[p.coarse] + idx[p.medium] + idx[p.fine] == idx
    assert (len(idx[p.coarse]), len(idx[p.medium]), len(idx[p.fine])) == (4, 4, 10)


@pytest.mark.parametrize("c,m,n", [(0, 4, 18), (4, 4, 18), (4, 18, 18), (5, 3, 18)])
def test_partition_rejects_bad_bounds(c, m, n):
    with pytest.raises(ValueError):
        LatentPartition(c, m, n)


def test_text_condition_invariants():
    e = torch.ones(4)
    TextCondition("long sleeve", e)
    with pytest.raises(ValueError):
        TextCondition("x", torch.zeros(4))
    with pytest.raises(ValueError):
        TextCondition("x", e, color_prompt="red")
    with pytest.raises(ValueError):
        TextCondition("x", e, color_embedding=e)
    assert TextCondition("x", e, "red", e).has_color


def test_image_buffer_range_and_conversion():
    px = torch.rand(4, 5, 3, dtype=torch.float64)
    u = ImageBuffer(px, RangeTag.UNIT)
    s = u.to_signed()
    assert s.range_tag is RangeTag.SIGNED_UNIT
    assert torch.allclose(s.to_unit().pixels, px)
    ImageBuffer(torch.full((2, 2, 3), 1.0 + 5e-6), RangeTag.UNIT)
    with pytest.raises(ValueError):
        ImageBuffer(torch.full((2, 2, 3), 1.001), RangeTag.UNIT)
    with pytest.raises(ValueError):
        ImageBuffer(torch.zeros(2, 2), RangeTag.UNIT)


def test_mask_truth_table_brute_force():
    vals = (0.0, 1.0)
    for a, b in itertools.product(vals, vals):
        ma = RegionMask(torch.tensor([[a]]))
        mb = RegionMask(torch.tensor([[b]]))
        assert float(mask_background(ma, mb).mask) == float((not a) and (not b))
        assert float((ma | mb).mask) == float(bool(a) or bool(b))
        assert float((ma & mb).mask) == float(bool(a) and bool(b))
        assert float((~ma).mask) == float(not a)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1))
def test_soft_background_is_de_morgan(a, b):
    ma, mb = RegionMask(torch.tensor([[a]])), RegionMask(torch.tensor([[b]]))
    assert torch.equal(mask_background(ma, mb).mask, (~(ma | mb)).mask)


def test_loss_weight_rows():
    assert LossWeights.sleeve() == LossWeights(1, 1, 1, 5e-3, 0.3)
    assert LossWeights.color() == LossWeights(1, 1, 1, 5e-3, 1)
    assert LossWeights.latent_optimizer().lambda_id == 20
    with pytest.raises(ValueError):
        LossWeights(lambda_bg=-1)


def test_config_roundtrip_and_unknown_keys(tmp_path):
    cfg = EditConfig(weights=LossWeights.color(), inject_fine=False, max_steps=7, seed=3)
    path = tmp_path / "c.yaml"
    cfg.save(path)
    assert EditConfig.load(path) == cfg
    with pytest.raises(ValueError, match="unknown"):
        EditConfig.from_dict({"lr": 1})
    with pytest.raises(ValueError, match="unknown"):
        EditConfig.from_dict({"weights": {"lambda_x": 1}})
    with pytest.raises(ValueError):
        EditConfig.from_dict({"inject_fine": "yes"})
