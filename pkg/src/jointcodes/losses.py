"""Loss terms of the joint-embedding VAE and their weighted total."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


@dataclass(frozen=True)
class LossWeights:
    lambda_con: float = 0.02
    lambda_anti: float = 0.0005
    lambda_kl: float = 5e-5
    tau: float = 0.1
    include_positive_in_denominator: bool = False

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        for name in ("lambda_con", "lambda_anti", "lambda_kl"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")


@dataclass
class LossReport:
    total: float
    rec: float
    con: float
    anti: float
    kl: float

    def as_dict(self) -> dict:
        return {"total": self.total, "rec": self.rec, "con": self.con, "anti": self.anti, "kl": self.kl}


def contrastive_loss(za: Tensor, zb: Tensor, tau: float = 0.1, include_positive: bool = False) -> Tensor:
    """Batched cross-modal contrastive loss anchored on ``za`` rows.

    Rows are L2-normalized first. For each row ``i`` the positive is
    ``zb[i]``; the denominator runs over ``zb[j]`` for ``j != i`` unless
    ``include_positive`` is set.  Summed (not averaged) over the batch.
    """
    if za.shape != zb.shape or za.ndim != 2:
        raise ShapeError(f"contrastive_loss: shape mismatch {za.shape} vs {zb.shape}")
    b = za.shape[0]
    if b < 2:
        raise ValueError("contrastive_loss: batch size must be >= 2")
    if not tau > 0:
        raise ValueError(f"contrastive_loss: tau must be positive, got {tau}")
    na = ad.l2_normalize_rows(za)
    nb = ad.l2_normalize_rows(zb)
    logits = ad.mul_scalar(ad.matmul(na, ad.transpose(nb)), 1.0 / tau)
    pos = ad.mul_scalar(ad.rowdot(na, nb), 1.0 / tau)
    mask = np.ones((b, b), dtype=bool) if include_positive else ~np.eye(b, dtype=bool)
    return ad.sum(ad.sub(ad.logsumexp(logits, axis=1, mask=mask), pos))


def _cosines(za: Tensor, zs: Tensor) -> Tensor:
    if za.shape != zs.shape or za.ndim != 2:
        raise ShapeError(f"cosine: shape mismatch {za.shape} vs {zs.shape}")
    return ad.rowdot(ad.l2_normalize_rows(za), ad.l2_normalize_rows(zs))


def anticontrastive_loss(za: Tensor, zs: Tensor) -> Tensor:
    """Half the mean squared cosine between paired rows."""
    cos = _cosines(za, zs)
    return ad.mul_scalar(ad.sum(ad.square(cos)), 0.5 / za.shape[0])


def kl_loss(mu: Tensor, logvar: Tensor) -> Tensor:
    """Positive KL(N(mu, exp(logvar)) || N(0, I)), averaged over batch and dims."""
    if mu.shape != logvar.shape or mu.ndim != 2:
        raise ShapeError(f"kl_loss: shape mismatch {mu.shape} vs {logvar.shape}")
    b, d = mu.shape
    inner = ad.sub(ad.add(ad.square(mu), ad.exp(logvar)), logvar)
    return ad.mul_scalar(ad.add_scalar(ad.mean(inner), -1.0), 0.5)


def recon_loss(x: Tensor, xhat: Tensor) -> Tensor:
    """Squared error summed over pixels, averaged over the batch, halved."""
    x = ad.as_tensor(x)
    if x.shape != xhat.shape:
        raise ShapeError(f"recon_loss: shape mismatch {x.shape} vs {xhat.shape}")
    diff = ad.sub(x, xhat)
    return ad.mul_scalar(ad.sum(ad.square(diff)), 0.5 / x.shape[0])


def total_loss(rec, con, anti, kl, weights: LossWeights):
    """Weighted objective. Accepts floats or scalar Tensors.

    Returns ``(LossReport, total)`` where ``total`` is a Tensor carrying the
    graph when any term is a Tensor; terms with a zero weight are left out of
    the graph entirely.
    """
    terms = {"rec": rec, "con": con, "anti": anti, "kl": kl}
    values = {}
    for name, t in terms.items():
        v = t.item() if isinstance(t, Tensor) else float(t)
        if not math.isfinite(v):
            raise FloatingPointError(f"total_loss: term '{name}' is not finite ({v})")
        values[name] = v

    lam = {"con": weights.lambda_con, "anti": weights.lambda_anti, "kl": weights.lambda_kl}
    total = ad.as_tensor(rec) if isinstance(rec, Tensor) else Tensor(values["rec"])
    for name in ("con", "anti", "kl"):
        if lam[name] == 0:
            continue
        t = terms[name] if isinstance(terms[name], Tensor) else Tensor(values[name])
        total = ad.add(total, ad.mul_scalar(t, lam[name]))

    report = LossReport(total=total.item(), rec=values["rec"], con=values["con"], anti=values["anti"], kl=values["kl"])
    return report, total
