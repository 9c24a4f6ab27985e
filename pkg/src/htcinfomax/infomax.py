"""Text-label mutual information maximization and label prior matching.

A binary discriminator scores (text, label) pairs: positives pair each
document with its ground-truth labels, negatives re-pair the same label
with the next document in the batch, and the resulting Jensen-Shannon
style lower bound on the text-label mutual information is maximized.
A second discriminator adversarially matches the learned label
representations to a uniform [0, 1) prior; the label encoder receives
reversed gradients through the fake-sample path so its distribution moves
toward the prior while the discriminator learns to tell them apart.
A learned sigmoid gate blends the two auxiliary losses into the total
objective next to the classification loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dataio import derived_rng
from .encoders import LabelRepresentations, TextFeatures, glorot, zeros_param

LN2 = float(np.log(2.0))

# Relu-followed layers start with a small positive bias so no unit is dead
# at initialization; with narrow layers and small inputs, an all-negative
# preactivation would otherwise freeze the whole discriminator at exactly
# zero logits (zero gradient everywhere below it).
RELU_BIAS = 0.01


class MIDiscriminator:
    """Pair scorer: conv stack over token features, pooled, joined with the
    label representation, then three linear layers to a single logit.

    Default widths: conv d_t->d_t (relu), conv d_t->512 (no activation),
    then linear (512 + d_y)->512->512->1 with relu on the first two.  The
    final layer has no activation; probabilities are formed in the loss
    from the logit, which keeps the log terms finite.
    """

    def __init__(self, text_dim: int, label_dim: int, hidden: int,
                 rng: np.random.Generator, kernel_size: int = 3):
        self.conv1_kernel = glorot(rng, (kernel_size, text_dim, text_dim),
                                   kernel_size * text_dim, kernel_size * text_dim)
        self.conv1_bias = zeros_param(text_dim, RELU_BIAS)
        self.conv2_kernel = glorot(rng, (kernel_size, text_dim, hidden),
                                   kernel_size * text_dim, kernel_size * hidden)
        self.conv2_bias = zeros_param(hidden)
        joined = hidden + label_dim
        self.lin1_w = glorot(rng, (joined, hidden), joined, hidden)
        self.lin1_b = zeros_param(hidden, RELU_BIAS)
        self.lin2_w = glorot(rng, (hidden, hidden), hidden, hidden)
        self.lin2_b = zeros_param(hidden, RELU_BIAS)
        self.lin3_w = glorot(rng, (hidden, 1), hidden, 1)
        self.lin3_b = zeros_param(1)

    def named_params(self) -> dict[str, Tensor]:
        return {
            "conv1.kernel": self.conv1_kernel, "conv1.bias": self.conv1_bias,
            "conv2.kernel": self.conv2_kernel, "conv2.bias": self.conv2_bias,
            "lin1.weight": self.lin1_w, "lin1.bias": self.lin1_b,
            "lin2.weight": self.lin2_w, "lin2.bias": self.lin2_b,
            "lin3.weight": self.lin3_w, "lin3.bias": self.lin3_b,
        }

    def zero_init(self):
        for p in self.named_params().values():
            p.data[...] = 0.0

    def pool_text(self, token_feats: Tensor, mask: np.ndarray) -> Tensor:
        """Conv stack plus mask-aware mean pooling: [B,S,d_t] -> [B,hidden]."""
        h = ad.relu(ad.add(ad.conv1d(token_feats, self.conv1_kernel), self.conv1_bias))
        h = ad.add(ad.conv1d(h, self.conv2_kernel), self.conv2_bias)
        return ad.masked_mean(h, mask)

    def score_pairs(self, pooled_text: Tensor, label_reps: Tensor) -> Tensor:
        """Logits for row-aligned (pooled text, label representation) pairs."""
        joined = ad.concat([pooled_text, label_reps], axis=1)
        h = ad.relu(ad.add(ad.matmul(joined, self.lin1_w), self.lin1_b))
        h = ad.relu(ad.add(ad.matmul(h, self.lin2_w), self.lin2_b))
        return ad.add(ad.matmul(h, self.lin3_w), self.lin3_b)

    def __call__(self, token_feats: Tensor, label_rep: Tensor,
                 mask: np.ndarray | None = None) -> Tensor:
        """Score a single (sequence, label) pair to a scalar logit."""
        if token_feats.ndim != 2:
            raise ad.DimensionError(f"expected [S, d_t] token features, got {token_feats.shape}")
        if label_rep.ndim != 1:
            raise ad.DimensionError(f"expected a single label vector, got {label_rep.shape}")
        seq_len = token_feats.shape[0]
        if mask is None:
            mask = np.ones((1, seq_len))
        batched = ad.reshape(token_feats, (1,) + token_feats.shape)
        pooled = self.pool_text(batched, np.asarray(mask).reshape(1, seq_len))
        logits = self.score_pairs(pooled, ad.reshape(label_rep, (1, label_rep.shape[0])))
        return ad.reshape(logits, ())


class PriorDiscriminator:
    """Three linear layers (label_dim -> h1 -> h2 -> 1) ending in a sigmoid."""

    def __init__(self, label_dim: int, hidden: tuple[int, int],
                 rng: np.random.Generator):
        h1, h2 = hidden
        self.lin1_w = glorot(rng, (label_dim, h1), label_dim, h1)
        self.lin1_b = zeros_param(h1, RELU_BIAS)
        self.lin2_w = glorot(rng, (h1, h2), h1, h2)
        self.lin2_b = zeros_param(h2, RELU_BIAS)
        self.lin3_w = glorot(rng, (h2, 1), h2, 1)
        self.lin3_b = zeros_param(1)

    def named_params(self) -> dict[str, Tensor]:
        return {
            "lin1.weight": self.lin1_w, "lin1.bias": self.lin1_b,
            "lin2.weight": self.lin2_w, "lin2.bias": self.lin2_b,
            "lin3.weight": self.lin3_w, "lin3.bias": self.lin3_b,
        }

    def zero_init(self):
        for p in self.named_params().values():
            p.data[...] = 0.0

    def logits(self, reps: Tensor) -> Tensor:
        h = ad.relu(ad.add(ad.matmul(reps, self.lin1_w), self.lin1_b))
        h = ad.relu(ad.add(ad.matmul(h, self.lin2_w), self.lin2_b))
        return ad.add(ad.matmul(h, self.lin3_w), self.lin3_b)

    def __call__(self, reps: Tensor) -> Tensor:
        """Probability in (0, 1) that each row came from the prior."""
        return ad.sigmoid(self.logits(reps))


class LossWeightEstimator:
    """Sigmoid gate over the batch-mean text feature and label-mean
    representation; starts at 0.5 (zero init)."""

    def __init__(self, text_dim: int, label_dim: int):
        self.w_text = zeros_param((text_dim, 1))
        self.w_label = zeros_param((label_dim, 1))
        self.bias = zeros_param(())

    def named_params(self) -> dict[str, Tensor]:
        return {"w_text": self.w_text, "w_label": self.w_label, "bias": self.bias}

    def __call__(self, pooled_text: Tensor, lr: LabelRepresentations) -> Tensor:
        text_mean = ad.mean(pooled_text, axis=0)
        label_mean = ad.mean(lr.matrix, axis=0)
        pre = ad.add(
            ad.add(
                ad.reshape(ad.matmul(ad.reshape(text_mean, (1, -1)), self.w_text), ()),
                ad.reshape(ad.matmul(ad.reshape(label_mean, (1, -1)), self.w_label), ()),
            ),
            self.bias,
        )
        return ad.sigmoid(pre)


def mi_pairs(targets: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Index arrays (pos_doc, label, neg_doc) for in-batch pairing.

    One positive pair per (document, ground-truth label); the negative
    pairs the same label with the cyclically next document, which is a
    different sample whenever the batch has at least two documents.
    """
    batch = targets.shape[0]
    if batch < 2:
        raise ad.ContractError("negative sampling requires batch >= 2")
    pos_doc, label_col = np.nonzero(targets)
    if len(np.unique(pos_doc)) != batch:
        raise ad.ContractError("every document needs at least one target label")
    neg_doc = (pos_doc + 1) % batch
    return pos_doc, label_col, neg_doc


def mi_loss(tf: TextFeatures, lr: LabelRepresentations, targets: np.ndarray,
            disc: MIDiscriminator) -> Tensor:
    """Negated mutual information lower bound over in-batch pairs.

    I = mean(log D(pos)) + mean(log(1 - D(neg))) with D = sigmoid(logit);
    the loss is -I, which is 2*ln2 when the discriminator is at chance and
    approaches 0 as it separates the joint from the product of marginals.
    Encoder and discriminator both descend this loss (cooperative).
    """
    pos_doc, label_col, neg_doc = mi_pairs(targets)
    pooled = disc.pool_text(tf.token_feats, tf.mask)
    pos_text = ad.embedding_lookup(pooled, pos_doc)
    neg_text = ad.embedding_lookup(pooled, neg_doc)
    labels = ad.embedding_lookup(lr.matrix, label_col)
    pos_logits = disc.score_pairs(pos_text, labels)
    neg_logits = disc.score_pairs(neg_text, labels)
    info = ad.add(ad.mean(ad.logsigmoid(pos_logits)),
                  ad.mean(ad.logsigmoid(ad.neg(neg_logits))))
    return ad.neg(info)


def sample_prior(count: int, dim: int, seed: int) -> Tensor:
    """Deterministic i.i.d. uniform [0, 1) draws, one row per label."""
    return Tensor(derived_rng(seed, "label-prior").random((count, dim)))


def prior_matching_loss(lr: LabelRepresentations, prior: Tensor,
                        disc: PriorDiscriminator) -> Tensor:
    """Mean over labels of -(log D(prior_i) + log(1 - D(label_i))).

    The discriminator descends this loss as written; the label encoder
    sees reversed gradients through its (fake) path, so the same backward
    pass pushes the learned label distribution toward the prior.
    """
    if prior.shape != lr.matrix.shape:
        raise ad.DimensionError(
            f"prior shape {prior.shape} does not match label representations {lr.matrix.shape}")
    real_logits = disc.logits(prior)
    fake_logits = disc.logits(ad.grad_reverse(lr.matrix))
    per_label = ad.neg(ad.add(ad.logsigmoid(real_logits),
                              ad.logsigmoid(ad.neg(fake_logits))))
    return ad.mean(per_label)


@dataclass
class LossBundle:
    """Scalars of one training step; total = l_c + f*l_mi + (1-f)*l_pr."""

    l_c: float
    l_mi: float
    l_pr: float
    f_weight: float
    total: float

    def to_dict(self) -> dict:
        return {"L": self.total, "L_c": self.l_c, "L_MI": self.l_mi,
                "L_pr": self.l_pr, "F": self.f_weight}


class NumericError(RuntimeError):
    """A loss term became non-finite."""


def _check_finite(value: float, name: str):
    if not np.isfinite(value):
        raise NumericError(f"loss term {name} is not finite: {value}")


def total_loss(l_c: Tensor, l_mi: Tensor | None, l_pr: Tensor | None,
               f_weight: Tensor | None) -> tuple[Tensor, LossBundle]:
    """Combine per Eq-style gating: l_c + f*l_mi + (1-f)*l_pr.

    Disabled terms pass None; the surviving auxiliary term then gets
    weight 1, and with both disabled the objective degenerates to the
    classification loss.  Reported weights keep the bundle identity exact.
    """
    _check_finite(l_c.item(), "L_c")
    if l_mi is not None:
        _check_finite(l_mi.item(), "L_MI")
    if l_pr is not None:
        _check_finite(l_pr.item(), "L_pr")

    if l_mi is not None and l_pr is not None:
        if f_weight is None:
            raise ad.ContractError("full objective requires the loss weight gate")
        _check_finite(f_weight.item(), "F")
        total = ad.add(l_c, ad.add(ad.mul(f_weight, l_mi),
                                   ad.mul(ad.add(ad.neg(f_weight), 1.0), l_pr)))
        bundle = LossBundle(l_c.item(), l_mi.item(), l_pr.item(),
                            f_weight.item(), total.item())
    elif l_mi is not None:
        total = ad.add(l_c, l_mi)
        bundle = LossBundle(l_c.item(), l_mi.item(), 0.0, 1.0, total.item())
    elif l_pr is not None:
        total = ad.add(l_c, l_pr)
        bundle = LossBundle(l_c.item(), 0.0, l_pr.item(), 0.0, total.item())
    else:
        total = l_c
        bundle = LossBundle(l_c.item(), 0.0, 0.0, 0.0, total.item())
    return total, bundle
