import pytest
import torch

from garmentedit.backends import toy_stack
from garmentedit.core import LatentCode, LossWeights
from garmentedit.latent_opt import LatentOptConfig, optimize_latent

# toy-scale weights: the baseline's default (1, 1, 20) pins the residual at zero on this stack
TOY_WEIGHTS = LossWeights(1.0, 0.01, 0.1, 0.0, 0.0)


def test_identity_only_objective_keeps_residual_zero():
    b = toy_stack()
    w = LatentCode(torch.randn(18, 16) * 0.5)
    out, hist = optimize_latent(w, "blue", b, LossWeights(0, 1, 0, 0, 0), LatentOptConfig(max_steps=10))
    assert torch.equal(out.values, w.values)
    assert all(r.value == 0 for r in hist)


def test_step_zero_is_pure_clip_and_keep_best():
    b = toy_stack()
    w = LatentCode(torch.randn(18, 16, generator=torch.Generator().manual_seed(2)) * 0.5)
    out, hist = optimize_latent(w, "red", b, TOY_WEIGHTS, LatentOptConfig(max_steps=30))
    assert len(hist) == 31
    assert hist[0].terms["norm"] == 0 and hist[0].terms["id"] == 0
    assert hist[0].value == hist[0].terms["clip"]
    assert min(r.value for r in hist) <= hist[0].value
    with torch.no_grad():
        from garmentedit.losses import total_loss_latent_optimizer
        final = total_loss_latent_optimizer(w.values, out.values - w.values,
                                            b.encoder.encode_text("red"), TOY_WEIGHTS, b)
    assert final.value <= hist[0].value + 1e-6


def test_default_weights_run():
    b = toy_stack()
    w = LatentCode(torch.zeros(18, 16))
    out, hist = optimize_latent(w, "blue", b, cfg=LatentOptConfig(max_steps=5))
    assert hist[0].weights["id"] == 20.0
    assert torch.isfinite(out.values).all()


def test_config_validation():
    with pytest.raises(ValueError):
        LatentOptConfig(max_steps=0)
    with pytest.raises(ValueError):
        LatentOptConfig(learning_rate=0)
