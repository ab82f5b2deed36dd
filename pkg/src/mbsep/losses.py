"""Scale-invariant SNR loss, permutation-invariant pairing, and the
SI-SNRi evaluation metric.

All loss functions run on the autograd engine so they are differentiable
when built under a tape; passed plain arrays outside a tape they evaluate
to constants, which is how the evaluation metric uses them. Convention:
``si_snr_loss`` is *negative* SI-SNR in dB, so lower is better and a
perfect (colinear) estimate saturates near -10*log10(energy/EPS).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import autograd as ag
from .autograd import EPS


class Permutation(Enum):
    IDENTITY = "identity"
    SWAPPED = "swapped"


@dataclass
class PitResult:
    loss: ag.Tensor  # scalar node: sum of both sources' si_snr_loss under the best pairing
    permutation: Permutation
    per_source_sisnr: tuple[float, float]  # dB, positive is better


def _pair(a, b, op: str):
    a, b = ag.as_tensor(a), ag.as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} differ")
    if a.shape[-1] == 0:
        raise ValueError(f"{op}: empty signals")
    return a, b


def project(a, b) -> ag.Tensor:
    """Projection of b onto a: (a.b / max(||a||^2, EPS)) * a, colinear with a."""
    a, b = _pair(a, b, "project")
    num = ag.dot(a, b)
    den = ag.maximum_scalar(ag.dot(a, a), EPS)
    coeff = ag.div(num, den)
    if a.ndim > 0:
        coeff = ag.reshape(coeff, coeff.shape + (1,))
    return ag.mul(coeff, a)


def si_snr_loss(target, est) -> ag.Tensor:
    """Negative scale-invariant SNR in dB, stabilized by the EPS floor.

    Works element-wise over leading batch axes: (T,) -> scalar,
    (B, T) -> (B,).
    """
    target, est = _pair(target, est, "si_snr_loss")
    p = project(target, est)
    residual = ag.sub(est, p)
    num = ag.add(ag.dot(p, p), EPS)
    den = ag.add(ag.dot(residual, residual), EPS)
    return ag.scalar_mul(ag.sub(ag.log10(num), ag.log10(den)), -10.0)


def pit_loss(est: tuple, targets: tuple) -> PitResult:
    """Minimum summed si_snr_loss over the two disjoint output-target pairings.

    Ties break to the identity pairing. The returned loss is differentiable
    through the selected pairing only.
    """
    est_s, est_e = est
    tgt_s, tgt_e = targets
    l_ss = si_snr_loss(tgt_s, est_s)
    l_ee = si_snr_loss(tgt_e, est_e)
    l_se = si_snr_loss(tgt_s, est_e)
    l_es = si_snr_loss(tgt_e, est_s)
    identity = ag.add(l_ss, l_ee)
    swapped = ag.add(l_se, l_es)
    if float(identity.value) <= float(swapped.value):
        return PitResult(identity, Permutation.IDENTITY, (-float(l_ss.value), -float(l_ee.value)))
    return PitResult(swapped, Permutation.SWAPPED, (-float(l_se.value), -float(l_es.value)))


def pit_loss_independent_min(est: tuple, targets: tuple) -> tuple[float, tuple[int, int]]:
    """Diagnostic variant: independent minima per target, which may assign
    the same estimate to both sources. Values only, no gradients."""
    with ag.no_grad():
        est_vals = [ag.as_tensor(e) for e in est]
        losses = [
            [float(si_snr_loss(t, e).value) for e in est_vals] for t in targets
        ]
    pick_s = int(np.argmin(losses[0]))
    pick_e = int(np.argmin(losses[1]))
    return losses[0][pick_s] + losses[1][pick_e], (pick_s, pick_e)


def pit_loss_batch(est: tuple, targets: tuple) -> tuple[ag.Tensor, np.ndarray]:
    """Batched PIT over (B, T) pairs: returns (mean scalar node, chosen-permutation
    mask where 1 marks identity). The unselected pairing is zero-weighted, so
    gradients flow only through each example's best pairing."""
    est_s, est_e = est
    tgt_s, tgt_e = targets
    identity = ag.add(si_snr_loss(tgt_s, est_s), si_snr_loss(tgt_e, est_e))
    swapped = ag.add(si_snr_loss(tgt_s, est_e), si_snr_loss(tgt_e, est_s))
    keep = (identity.value <= swapped.value).astype(np.float64)
    per_example = ag.add(ag.mul(identity, keep), ag.mul(swapped, 1.0 - keep))
    return ag.tmean(per_example), keep


def si_snr_db(target: np.ndarray, est: np.ndarray) -> float:
    """Plain (positive) SI-SNR of one estimate in dB."""
    with ag.no_grad():
        return -float(si_snr_loss(target, est).value)


def si_snri(targets: tuple, estimates: tuple, mixture: np.ndarray) -> float:
    """Mean over both sources of SI-SNR improvement over the raw mixture,
    using the PIT-selected estimate-target pairing."""
    with ag.no_grad():
        result = pit_loss(estimates, targets)
        order = (0, 1) if result.permutation is Permutation.IDENTITY else (1, 0)
        gains = []
        for tgt, est_idx in zip(targets, order):
            est = estimates[est_idx]
            gains.append(si_snr_db(tgt, est) - si_snr_db(tgt, mixture))
    return float(np.mean(gains))
