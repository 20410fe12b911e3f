"""Adversarial, dual-contrast and SSIM cycle-consistency losses."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Variable
from .metrics import K1, K2, WINDOW_SIGMA, WINDOW_SIZE, gaussian_window

BCE_EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    lambda_cycle: float = 10.0
    beta_dc: float = 0.5

    def __post_init__(self):
        for name in ("lambda_cycle", "beta_dc"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


@dataclass
class BatchTriple:
    """Inputs of one discriminator: real target, generated target, source-domain negative."""

    real_target: Variable
    fake_target: Variable
    negative_source: Variable

    def __post_init__(self):
        shapes = {self.real_target.shape, self.fake_target.shape, self.negative_source.shape}
        if len(shapes) != 1:
            raise ValueError(f"batch triple shapes differ: {shapes}")


def bce_patch(pred: Variable, target: int, eps: float = BCE_EPS) -> Variable:
    """Binary cross-entropy averaged over every patch (and batch item)."""
    if target not in (0, 1):
        raise ValueError("target label must be 0 or 1")
    p = dc.clip(pred, eps, 1.0 - eps)
    if target == 0:
        p = 1.0 - p
    return dc.scale(dc.mean(dc.log(p)), -1.0)


def discriminator_loss(d_real: Variable, d_fake: Variable, d_negative: Variable | None,
                       w: LossWeights = LossWeights()) -> Variable:
    """Real -> 1, generated -> 0, and (weighted by beta) source-domain negatives -> 0.

    ``d_fake`` must come from a generator output with no graph attached.
    """
    loss = bce_patch(d_real, 1) + bce_patch(d_fake, 0)
    if w.beta_dc == 0 or d_negative is None:
        return loss
    return loss + dc.scale(bce_patch(d_negative, 0), w.beta_dc)


def dual_contrast_term(d_negative: Variable, w: LossWeights) -> Variable:
    return dc.scale(bce_patch(d_negative, 0), w.beta_dc)


def generator_adversarial_loss(d_fake: Variable) -> Variable:
    # non-saturating: push D(G(x)) toward the real label
    return bce_patch(d_fake, 1)


def _window_kernel(dtype) -> Variable:
    taps = gaussian_window(WINDOW_SIZE, WINDOW_SIGMA)
    return Variable(np.outer(taps, taps).reshape(1, 1, WINDOW_SIZE, WINDOW_SIZE).astype(dtype))


def ssim_differentiable(a: Variable, b: Variable, data_range: float = 1.0) -> Variable:
    """Mean windowed SSIM of two N×1×H×W batches, kept in the graph."""
    if a.shape != b.shape:
        raise ValueError(f"SSIM inputs differ in shape: {a.shape} vs {b.shape}")
    if a.shape[1] != 1:
        raise ValueError("SSIM expects single-channel images")
    win = _window_kernel(a.dtype)

    def blur(t):
        return dc.conv2d(t, win)

    mu_a, mu_b = blur(a), blur(b)
    mu_aa, mu_bb, mu_ab = mu_a * mu_a, mu_b * mu_b, mu_a * mu_b
    var_a = blur(a * a) - mu_aa
    var_b = blur(b * b) - mu_bb
    cov = blur(a * b) - mu_ab
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    num = (dc.scale(mu_ab, 2.0) + c1) * (dc.scale(cov, 2.0) + c2)
    den = (mu_aa + mu_bb + c1) * (var_a + var_b + c2)
    return dc.mean(num / den)


def _to_unit(t: Variable) -> Variable:
    return dc.scale(t + 1.0, 0.5)


def ssim_cycle_loss(x: Variable, x_rec: Variable, y: Variable, y_rec: Variable) -> Variable:
    """(1 - SSIM(x_rec, x)) + (1 - SSIM(y_rec, y)) on inputs in [-1, 1]."""
    sx = ssim_differentiable(_to_unit(x_rec), _to_unit(x))
    sy = ssim_differentiable(_to_unit(y_rec), _to_unit(y))
    return (1.0 - sx) + (1.0 - sy)


def mae_cycle_loss(x: Variable, x_rec: Variable, y: Variable, y_rec: Variable) -> Variable:
    """L1 cycle loss; kept for comparison with the SSIM form only."""
    def l1(a, b):
        d = a - b
        return dc.mean(dc.relu(d) + dc.relu(-d))

    return l1(x_rec, x) + l1(y_rec, y)


@dataclass
class GeneratorTerms:
    d_y_of_fake_y: Variable  # D_Y(G(x)), graph flows into G
    d_x_of_fake_x: Variable  # D_X(F(y)), graph flows into F
    x: Variable
    x_rec: Variable  # F(G(x))
    y: Variable
    y_rec: Variable  # G(F(y))


def generator_objective(t: GeneratorTerms, w: LossWeights = LossWeights()) -> tuple[Variable, dict]:
    adv = generator_adversarial_loss(t.d_y_of_fake_y) + generator_adversarial_loss(t.d_x_of_fake_x)
    if w.lambda_cycle == 0:
        return adv, {"adv": adv.item(), "cycle": 0.0}
    cycle = ssim_cycle_loss(t.x, t.x_rec, t.y, t.y_rec)
    return adv + dc.scale(cycle, w.lambda_cycle), {"adv": adv.item(), "cycle": cycle.item()}


def total_objective(g_terms: GeneratorTerms, for_d_y: BatchTriple, for_d_x: BatchTriple,
                    d_y, d_x, w: LossWeights = LossWeights()) -> tuple[Variable, Variable, Variable]:
    """Generator loss plus the two discriminator losses, each ready for its own backward pass.

    ``d_y``/``d_x`` are the discriminator callables applied to the triples;
    fake targets in the triples are detached here.
    """
    g_loss, _ = generator_objective(g_terms, w)
    d_loss_y = discriminator_loss(
        d_y(for_d_y.real_target), d_y(for_d_y.fake_target.detach()), d_y(for_d_y.negative_source), w
    )
    d_loss_x = discriminator_loss(
        d_x(for_d_x.real_target), d_x(for_d_x.fake_target.detach()), d_x(for_d_x.negative_source), w
    )
    return g_loss, d_loss_x, d_loss_y
