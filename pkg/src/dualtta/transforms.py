"""Semantic-altering patch shuffle and semantic-preserving style perturbation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ContractError
from .ndgrad import Stream

S_FLOOR = 1e-5
DEFAULT_GRID = 4


@dataclass
class ShuffleSpec:
    grid: int = DEFAULT_GRID
    stream: Optional[Stream] = None
    share_permutation: bool = False

    def __post_init__(self):
        if self.grid < 2:
            raise ContractError(f"patch grid must be >= 2, got {self.grid}")


def _draw_perm(stream: Stream, n: int) -> np.ndarray:
    perm = stream.permutation(n)
    if np.array_equal(perm, np.arange(n)):
        perm = stream.permutation(n)
    return perm


def patch_shuffle(batch, spec: ShuffleSpec, perms=None) -> np.ndarray:
    """Permute each sample's P x P grid of patches.

    The largest P-divisible centred crop is shuffled and written back, so the
    output keeps the input shape and every sample keeps its pixel multiset.
    `perms` (B x P*P) overrides the random draw; output patch i is input
    patch perms[b][i], in row-major patch order.
    """
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 4:
        raise ContractError(f"patch_shuffle expects (B, C, H, W), got {x.shape}")
    B, C, H, W = x.shape
    P = spec.grid
    if H < P or W < P:
        raise ContractError(f"image {H}x{W} smaller than the {P}x{P} patch grid")
    ch, cw = H - H % P, W - W % P
    top, left = (H - ch) // 2, (W - cw) // 2
    ph, pw = ch // P, cw // P

    if perms is None:
        if spec.stream is None:
            raise ContractError("patch_shuffle needs a stream or explicit permutations")
        if spec.share_permutation:
            shared = _draw_perm(spec.stream, P * P)
            perms = np.tile(shared, (B, 1))
        else:
            perms = np.stack([_draw_perm(spec.stream, P * P) for _ in range(B)])
    perms = np.asarray(perms, dtype=np.int64)
    if perms.shape != (B, P * P):
        raise ContractError(f"perms must have shape ({B}, {P * P})")

    crop = x[:, :, top:top + ch, left:left + cw]
    # (B, C, P, ph, P, pw) -> (B, P*P, C, ph, pw)
    patches = crop.reshape(B, C, P, ph, P, pw).transpose(0, 2, 4, 1, 3, 5).reshape(B, P * P, C, ph, pw)
    shuffled = np.take_along_axis(patches, perms[:, :, None, None, None], axis=1)
    shuffled = shuffled.reshape(B, P, P, C, ph, pw).transpose(0, 3, 1, 4, 2, 5).reshape(B, C, ch, cw)
    out = x.copy()
    out[:, :, top:top + ch, left:left + cw] = shuffled
    return out


@dataclass
class StyleStats:
    U: np.ndarray
    S: np.ndarray
    U_sigma: Optional[np.ndarray] = None
    S_sigma: Optional[np.ndarray] = None
    U_sp: Optional[np.ndarray] = None
    S_sp: Optional[np.ndarray] = None


def instance_stats(Z):
    """Per-instance channel mean and population std over (H, W)."""
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 4:
        raise ContractError(f"feature map must be (B, C, H, W), got {Z.shape}")
    U = Z.mean(axis=(2, 3))
    S = np.sqrt(((Z - U[:, :, None, None]) ** 2).mean(axis=(2, 3)))
    return U, S


def cross_batch_std(U):
    """Population std across the batch axis, per channel."""
    U = np.asarray(U, dtype=np.float64)
    return np.sqrt(((U - U.mean(axis=0)) ** 2).mean(axis=0))


def compute_stats(Z) -> StyleStats:
    U, S = instance_stats(Z)
    return StyleStats(U, S, cross_batch_std(U), cross_batch_std(S))


def perturb_stats(stats: StyleStats, stream: Optional[Stream] = None,
                  eps_u=None, eps_s=None) -> StyleStats:
    """U_sp = U + eps_U * U_sigma, S_sp = max(S + eps_S * S_sigma, S_FLOOR).

    eps_U, eps_S are one standard-normal scalar per sample, shared by all
    channels. Explicit `eps_u`/`eps_s` (shape (B,) or (B, 1)) bypass the draw.
    """
    B = stats.U.shape[0]
    if eps_u is None or eps_s is None:
        if stream is None:
            raise ContractError("perturb_stats needs a stream or explicit noise")
        eps_u = stream.gaussian((B, 1)) if eps_u is None else eps_u
        eps_s = stream.gaussian((B, 1)) if eps_s is None else eps_s
    eps_u = np.asarray(eps_u, dtype=np.float64).reshape(B, 1)
    eps_s = np.asarray(eps_s, dtype=np.float64).reshape(B, 1)
    stats.U_sp = stats.U + eps_u * stats.U_sigma[None, :]
    stats.S_sp = np.maximum(stats.S + eps_s * stats.S_sigma[None, :], S_FLOOR)
    return stats


def restyle(Z, stats: StyleStats) -> np.ndarray:
    """Z_sp = (Z - U) * S_sp / max(S, S_FLOOR) + U_sp."""
    Z = np.asarray(Z, dtype=np.float64)
    ratio = stats.S_sp / np.maximum(stats.S, S_FLOOR)
    return (Z - stats.U[:, :, None, None]) * ratio[:, :, None, None] + stats.U_sp[:, :, None, None]


def style_injection(stream: Stream):
    """Callback for :func:`dualtta.model.forward` that restyles Z_i in place of the original."""

    def inject(Z):
        stats = perturb_stats(compute_stats(Z), stream)
        return restyle(Z, stats)

    return inject
