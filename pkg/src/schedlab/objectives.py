"""Training losses: cross-modal contrastive (masked InfoNCE), masked
acoustic contrastive, codebook diversity, and their alpha-weighted
combination ``alpha * loss_av + (1 - alpha) * (loss_aud_r + 0.1 * loss_aud_d)``."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ObjectiveError(Exception):
    pass


@dataclass
class LossConfig:
    alpha: float = 0.5
    tau: float = 0.07            # cross-modal temperature
    kappa: float = 0.1           # acoustic temperature
    distractors: int = 10
    diversity_weight: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ObjectiveError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.tau <= 0 or self.kappa <= 0:
            raise ObjectiveError("temperatures must be positive")
        if self.distractors < 0:
            raise ObjectiveError("distractor count must be >= 0")


@dataclass
class LossReport:
    alpha: float
    loss_av: float | None
    loss_aud_r: float | None
    loss_aud_d: float | None
    loss_aud: float | None
    combined: float
    diagnostics: dict = field(default_factory=dict)


def _masked_logsumexp(logits: Tensor, allowed: np.ndarray) -> Tensor:
    """Row-wise logsumexp over the last axis, restricted to ``allowed``."""
    bias = np.where(allowed, 0.0, -1e30).astype(logits.dtype)
    biased = T.add(logits, bias)
    shift = biased.data.max(axis=-1, keepdims=True)
    lse = T.log(T.sum_(T.exp(T.sub(biased, shift)), axis=-1))
    return T.add(lse, shift[..., 0])


def build_duplicate_mask(image_ids) -> np.ndarray:
    """(i, j) True when image j is also a true image for caption i (same
    source image appearing more than once in the batch)."""
    ids = np.asarray(image_ids)
    same = ids[:, None] == ids[None, :]
    np.fill_diagonal(same, False)
    return same


def loss_av(audio_emb: Tensor, image_emb: Tensor, duplicate_mask: np.ndarray | None,
            tau: float) -> Tensor:
    """Symmetric masked InfoNCE over a batch of caption/image pairs.

    Both embedding sets must be L2-normalized; duplicate positives are
    removed from the negative set in both directions. Returns the mean of
    the audio->image and image->audio terms.
    """
    B = audio_emb.shape[0]
    if B == 0:
        raise ObjectiveError("empty batch")
    for name, e in (("audio", audio_emb), ("image", image_emb)):
        norms = np.linalg.norm(e.data, axis=-1)
        if np.abs(norms - 1.0).max() > 1e-4:
            raise ObjectiveError(f"{name} embeddings are not L2-normalized")
    if duplicate_mask is None:
        duplicate_mask = np.zeros((B, B), dtype=bool)

    sims = T.div(T.matmul(audio_emb, T.transpose(image_emb)), float(tau))
    allowed = ~duplicate_mask
    np.fill_diagonal(allowed, True)
    diag_idx = (np.arange(B), np.arange(B))

    pos = sims[diag_idx]
    a2i = T.mean_(T.sub(_masked_logsumexp(sims, allowed), pos))
    sims_t = T.transpose(sims)
    pos_t = sims_t[diag_idx]
    i2a = T.mean_(T.sub(_masked_logsumexp(sims_t, allowed.T), pos_t))
    return T.div(T.add(a2i, i2a), 2.0)


def sample_distractors(mask: np.ndarray, valid: np.ndarray, k: int,
                       rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Candidate table for the acoustic loss.

    Returns (anchor flat indices (M,), candidate flat indices (M, 1+k),
    candidate validity (M, 1+k)). Distractors are drawn uniformly without
    replacement from the other masked positions of the same utterance;
    an utterance with a single masked position falls back to its
    non-masked (valid) positions.
    """
    B, L = mask.shape
    anchors = []
    cands = []
    cvalid = []
    for b in range(B):
        masked_pos = np.flatnonzero(mask[b] & valid[b])
        other_pool_all = np.flatnonzero(valid[b] & ~mask[b])
        for t in masked_pos:
            pool = masked_pos[masked_pos != t]
            if pool.size == 0:
                pool = other_pool_all
            take = min(k, pool.size)
            chosen = rng.choice(pool, size=take, replace=False) if take else np.empty(0, int)
            row = np.zeros(1 + k, dtype=np.int64)
            rowv = np.zeros(1 + k, dtype=bool)
            row[0] = b * L + t
            rowv[0] = True
            row[1:1 + take] = b * L + chosen
            rowv[1:1 + take] = True
            anchors.append(b * L + t)
            cands.append(row)
            cvalid.append(rowv)
    if not anchors:
        raise ObjectiveError("no masked positions in batch")
    return np.array(anchors), np.stack(cands), np.stack(cvalid)


def loss_aud_contrastive(c: Tensor, q: Tensor, mask: np.ndarray, valid: np.ndarray,
                         k: int, kappa: float, rng: np.random.Generator) -> Tensor:
    """Masked contrastive acoustic loss over cosine similarities.

    c, q: (B, T, D) context and quantized-target projections.
    """
    B, L, D = c.shape
    anchors, cands, cvalid = sample_distractors(mask, valid, k, rng)
    cf = T.reshape(c, (B * L, D))
    qf = T.reshape(q, (B * L, D))
    cn = T.l2_normalize(T.gather(cf, anchors))
    qn = T.l2_normalize(T.gather(qf, cands))
    sims = T.div(T.sum_(T.mul(T.reshape(cn, (len(anchors), 1, D)), qn), axis=-1),
                 float(kappa))
    lse = _masked_logsumexp(sims, cvalid)
    return T.mean_(T.sub(lse, sims[:, 0]))


def loss_aud_diversity(soft_probs: Tensor, groups: int, entries: int) -> Tensor:
    """Codebook diversity penalty from soft code probabilities (M, G, V).

    Zero when the batch-averaged usage of every group is uniform;
    approaches (V-1)/V as usage collapses to single codes.
    """
    M, G, V = soft_probs.shape
    if (G, V) != (groups, entries):
        raise ObjectiveError(f"probability shape {(G, V)} != codebook shape {(groups, entries)}")
    sums = soft_probs.data.sum(-1)
    if np.abs(sums - 1.0).max() > 1e-5:
        raise ObjectiveError("soft code probabilities do not sum to 1 per group")
    pbar = T.mean_(soft_probs, axis=0)
    h = T.neg(T.sum_(T.mul(pbar, T.log(T.add(pbar, 1e-12))), axis=-1))
    return T.div(T.sub(float(groups * entries), T.sum_(T.exp(h))), float(groups * entries))


def combined_loss(alpha: float, l_av: Tensor | None, l_aud_r: Tensor | None,
                  l_aud_d: Tensor | None, diversity_weight: float = 0.1):
    """Alpha mixture of the two objectives; skipped sides may be None.

    Returns (combined Tensor, LossReport). At alpha == 1 (or 0) the
    inactive side contributes no graph edge at all, so its parameter
    groups receive exactly zero gradient.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ObjectiveError(f"alpha must be in [0, 1], got {alpha}")
    l_aud = None
    if l_aud_r is not None:
        l_aud = T.add(l_aud_r, T.mul(l_aud_d, diversity_weight)) if l_aud_d is not None else l_aud_r
    if alpha == 1.0:
        if l_av is None:
            raise ObjectiveError("alpha=1 requires the audio-visual loss")
        combined = T.mul(l_av, 1.0)
    elif alpha == 0.0:
        if l_aud is None:
            raise ObjectiveError("alpha=0 requires the acoustic loss")
        combined = T.mul(l_aud, 1.0)
    else:
        if l_av is None or l_aud is None:
            raise ObjectiveError("0 < alpha < 1 requires both losses")
        combined = T.add(T.mul(l_av, float(alpha)), T.mul(l_aud, float(1.0 - alpha)))
    report = LossReport(
        alpha=alpha,
        loss_av=None if l_av is None else l_av.item(),
        loss_aud_r=None if l_aud_r is None else l_aud_r.item(),
        loss_aud_d=None if l_aud_d is None else l_aud_d.item(),
        loss_aud=None if l_aud is None else l_aud.item(),
        combined=combined.item(),
    )
    return combined, report
