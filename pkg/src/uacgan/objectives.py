"""Loss terms of the AC-GAN family and their assignment to networks.

Term names follow the AC-GAN objective::

    term_a = E log D(x) + E log(1 - D(G(z, y)))     GAN value (D ascends)
    term_b = -E_P log C(x, y)                        real cross-entropy
    term_c = -E_Q log C(G(z, y), y)                  fake cross-entropy
    term_d =  E_Q log C_mi(G(z, y), y)               twin-classifier value (TAC)
    v_mine =  DV bound on I_Q(X; Y)                  MINE value (UAC)

Every function accepts tensors (to keep autograd graphs) or plain floats.
"""
from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Optional

import torch
from torch import Tensor

log = logging.getLogger(__name__)

KINDS = ("ac", "tac", "uac")
PROB_EPS = 1e-7

#: number of probabilities clamped per call site, for diagnostics
clamp_counter: Counter = Counter()


def _clamp(p: Tensor, site: str) -> Tensor:
    if not torch.is_tensor(p):
        p = torch.as_tensor(p, dtype=torch.float64)
    n = int(((p < PROB_EPS) | (p > 1 - PROB_EPS)).sum())
    if n:
        if not clamp_counter[site]:
            log.warning("clamping %d probabilities at %g in %s", n, PROB_EPS, site)
        clamp_counter[site] += n
    return p.clamp(PROB_EPS, 1 - PROB_EPS)


def gan_value(d_real, d_fake) -> Tensor:
    """mean log D(x_real) + mean log(1 - D(x_fake))."""
    d_real = _clamp(d_real, "gan_value")
    d_fake = _clamp(d_fake, "gan_value")
    return torch.log(d_real).mean() + torch.log1p(-d_fake).mean()


def generator_gan_loss(d_fake, saturating: bool = False) -> Tensor:
    """Generator's share of the GAN game.

    Non-saturating ``-mean log D(G(z, y))`` by default; ``saturating=True``
    gives the literal ``mean log(1 - D(G(z, y)))``.
    """
    d_fake = _clamp(d_fake, "generator_gan_loss")
    if saturating:
        return torch.log1p(-d_fake).mean()
    return -torch.log(d_fake).mean()


def _label_probs(class_probs, labels) -> Tensor:
    if not torch.is_tensor(class_probs):
        class_probs = torch.as_tensor(class_probs, dtype=torch.float64)
    labels = torch.as_tensor(labels, dtype=torch.long)
    return class_probs.gather(1, labels.view(-1, 1)).squeeze(1)


def cross_entropy_term(class_probs, labels) -> Tensor:
    """-mean log class_probs[i, labels[i]]; used for both the real and fake terms."""
    return -torch.log(_clamp(_label_probs(class_probs, labels), "cross_entropy_term")).mean()


def tac_value(cmi_probs_on_fake, labels) -> Tensor:
    """mean log C_mi(G(z, y), y). Not negated: C_mi ascends it, G descends it."""
    return torch.log(_clamp(_label_probs(cmi_probs_on_fake, labels), "tac_value")).mean()


# --------------------------------------------------------------------------- per-network losses


def discriminator_loss(term_a):
    return -term_a


def classifier_loss(term_b, term_c, classifier_on_fake: bool = True):
    return term_b + term_c if classifier_on_fake else term_b


def twin_classifier_loss(term_d):
    return -term_d


def statistic_loss(v_mine):
    return -v_mine


def generator_loss(kind: str, g_gan, term_c, term_d=None, v_mine=None, lambda_mi: float = 1.0):
    if kind not in KINDS:
        raise ValueError(f"unknown objective kind {kind!r}")
    loss = g_gan + term_c
    if kind == "tac":
        if term_d is None:
            raise ValueError("kind 'tac' needs term_d")
        loss = loss + term_d
    elif kind == "uac":
        if v_mine is None:
            raise ValueError("kind 'uac' needs v_mine")
        loss = loss + lambda_mi * v_mine
    return loss


@dataclass
class LossReport:
    term_a: float
    term_b: float
    term_c: float
    loss_D: float
    loss_G: float
    loss_C: float
    term_d: Optional[float] = None
    v_mine: Optional[float] = None
    loss_Cmi: Optional[float] = None
    loss_T: Optional[float] = None
    loss_DY: Optional[float] = None

    FIELDS = ("term_a", "term_b", "term_c", "term_d", "v_mine",
              "loss_D", "loss_G", "loss_C", "loss_Cmi", "loss_T", "loss_DY")

    def row(self) -> dict:
        return {k: getattr(self, k) for k in self.FIELDS}

    def is_finite(self) -> bool:
        return all(v is None or math.isfinite(v) for v in self.row().values())

    def as_dict(self) -> dict:
        return asdict(self)


def _f(v) -> Optional[float]:
    if v is None:
        return None
    return float(v.detach()) if torch.is_tensor(v) else float(v)


def compose(kind: str, terms: dict, lambda_mi: float = 1.0, *, classifier_on_fake: bool = True,
            loss_DY=None) -> LossReport:
    """Assign raw term values to the per-network update losses.

    ``terms`` holds ``term_a``, ``term_b``, ``term_c`` and, depending on
    ``kind``, ``term_d`` (tac) or ``v_mine`` (uac). ``g_gan``, the
    generator's GAN loss, is optional and counts as 0 when absent. Terms
    irrelevant to ``kind`` are ignored.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown objective kind {kind!r}")
    missing = [t for t in ("term_a", "term_b", "term_c") if terms.get(t) is None]
    if kind == "tac" and terms.get("term_d") is None:
        missing.append("term_d")
    if kind == "uac" and terms.get("v_mine") is None:
        missing.append("v_mine")
    if missing:
        raise ValueError(f"objective {kind!r} is missing terms: {', '.join(missing)}")

    a, b, c = (_f(terms[t]) for t in ("term_a", "term_b", "term_c"))
    g_gan = _f(terms.get("g_gan", 0.0))
    d = _f(terms.get("term_d")) if kind == "tac" else None
    v = _f(terms.get("v_mine")) if kind == "uac" else None
    return LossReport(
        term_a=a, term_b=b, term_c=c, term_d=d, v_mine=v,
        loss_D=discriminator_loss(a),
        loss_C=classifier_loss(b, c, classifier_on_fake),
        loss_G=generator_loss(kind, g_gan, c, d, v, lambda_mi),
        loss_Cmi=twin_classifier_loss(d) if d is not None else None,
        loss_T=statistic_loss(v) if v is not None else None,
        loss_DY=_f(loss_DY),
    )
