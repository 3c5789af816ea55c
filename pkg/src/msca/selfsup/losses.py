"""Adversarial, feature-matching, perceptual and pixel losses."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from .. import diffcore as dc
from ..diffcore import Tensor

# shallow-to-deep stage weights of the perceptual term
PERCEPTUAL_WEIGHTS = (1 / 32, 1 / 16, 1 / 8, 1 / 4, 1.0)
ADVERSARIAL_FORMS = ("hinge", "logistic")


def adversarial_d(real: Tensor, fake: Tensor, form: str = "hinge") -> tuple[Tensor, Tensor]:
    """Discriminator terms on real and synthesized score maps."""
    if form == "hinge":
        return (dc.mean(dc.relu(dc.sub(1.0, real))), dc.mean(dc.relu(dc.add(fake, 1.0))))
    if form == "logistic":
        return dc.mean(dc.softplus(dc.neg(real))), dc.mean(dc.softplus(fake))
    raise ValueError(f"unknown adversarial form {form!r}; choose from {ADVERSARIAL_FORMS}")


def adversarial_g(fake: Tensor, form: str = "hinge") -> Tensor:
    if form == "hinge":
        return dc.neg(dc.mean(fake))
    if form == "logistic":  # non-saturating
        return dc.mean(dc.softplus(dc.neg(fake)))
    raise ValueError(f"unknown adversarial form {form!r}; choose from {ADVERSARIAL_FORMS}")


def perceptual(y_hat: Tensor, y: Tensor, backbone, weights: Sequence[float] | None = None) -> Tensor:
    """Weighted per-stage L1 between frozen backbone features."""
    fa, fb = backbone(y_hat), backbone(y.detach())
    weights = PERCEPTUAL_WEIGHTS[-len(fa):] if weights is None else weights
    if len(weights) != len(fa):
        raise ValueError(f"{len(weights)} perceptual weights for {len(fa)} backbone stages")
    terms = [dc.mul(dc.l1(a, b.detach()), w) for a, b, w in zip(fa, fb, weights)]
    return _total(terms)


def feature_matching(fake_feats: Sequence[Tensor], real_feats: Sequence[Tensor]) -> Tensor:
    if len(fake_feats) != len(real_feats):
        raise ValueError("feature lists differ in length")
    return _total([dc.l1(a, b.detach()) for a, b in zip(fake_feats, real_feats)])


def _total(terms: Sequence[Tensor]) -> Tensor:
    out = terms[0]
    for t in terms[1:]:
        out = dc.add(out, t)
    return out


@dataclass(frozen=True)
class LossWeights:
    adv: float = 1.0
    fm: float = 10.0
    perc: float = 10.0
    pixel: float = 1.0


@dataclass
class MatchTerms:
    fm: Tensor | None
    perc: Tensor
    pixel: Tensor


def loss_match(y_hat: Tensor, y: Tensor, fake_feats: Sequence[Tensor] | None,
               real_feats: Sequence[Tensor] | None, backbone,
               perceptual_weights: Sequence[float] | None = None) -> MatchTerms:
    """Unweighted matching terms; ``fm`` is None without discriminator features."""
    fm = None if fake_feats is None else feature_matching(fake_feats, real_feats)
    return MatchTerms(fm, perceptual(y_hat, y, backbone, perceptual_weights), dc.l1(y_hat, y.detach()))


def weighted_generator_loss(adv: Tensor | None, terms: MatchTerms, w: LossWeights,
                            scale: float = 1.0) -> Tensor:
    parts = [dc.mul(terms.perc, w.perc), dc.mul(terms.pixel, w.pixel)]
    if adv is not None and w.adv:
        parts.append(dc.mul(adv, w.adv))
    if terms.fm is not None and w.fm:
        parts.append(dc.mul(terms.fm, w.fm))
    return dc.mul(_total(parts), scale)


@dataclass
class LossReport:
    """Scalar loss terms of one task (cross or self) at one step."""

    task: str
    g_adv: float = 0.0
    fm: float = 0.0
    perc: float = 0.0
    pixel: float = 0.0
    d_real: float = 0.0
    d_fake: float = 0.0
    weights: LossWeights = LossWeights()
    scale: float = 1.0

    TERMS = ("g_adv", "fm", "perc", "pixel", "d_real", "d_fake")

    @property
    def total(self) -> float:
        """Weighted generator objective, scaled by the task weight."""
        w = self.weights
        return self.scale * math.fsum([w.adv * self.g_adv, w.fm * self.fm,
                                       w.perc * self.perc, w.pixel * self.pixel])

    @property
    def d_total(self) -> float:
        return self.scale * (self.d_real + self.d_fake)

    def finite(self) -> bool:
        return all(math.isfinite(getattr(self, t)) for t in self.TERMS)

    def fields(self) -> str:
        terms = " ".join(f"{t}={getattr(self, t)!r}" for t in self.TERMS)
        return f"task={self.task} {terms} total={self.total!r}"


def sum_reports(reports: Sequence[LossReport]) -> float:
    """Branch totals are additive."""
    return math.fsum(r.total for r in reports)


def mean_report(task: str, reports: Sequence[LossReport]) -> LossReport:
    """Term-wise mean over a batch; independent of the order of the reports."""
    if not reports:
        raise ValueError("no reports to average")
    n = len(reports)
    vals = {t: math.fsum(getattr(r, t) for r in reports) / n for t in LossReport.TERMS}
    return LossReport(task, weights=reports[0].weights, scale=reports[0].scale, **vals)


__all__ = [
    "ADVERSARIAL_FORMS", "PERCEPTUAL_WEIGHTS", "LossReport", "LossWeights", "MatchTerms",
    "adversarial_d", "adversarial_g", "feature_matching", "loss_match", "mean_report",
    "perceptual", "sum_reports", "weighted_generator_loss",
]
