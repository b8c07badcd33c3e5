"""Instance-level drift field over spatially aligned feature pairs.

Shapes: feature matrices are ``(*batch, K, C)`` with one row per spatial
location. Candidates for query row ``k`` are all ``K`` ground-truth rows of
the same layer and image (the aligned one plus every mismatched one), so the
per-candidate softmaxes reduce to row / column softmaxes of one ``K x K``
logit matrix. Leading batch dimensions are independent images; nothing is
shared across them.
"""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import torch

EPS_NORM = 1e-8
EPS_AGG = 1e-8
DEFAULT_TEMPS = (0.05, 0.2)
CHUNK_THRESHOLD = 4096


class DegenerateWeightsError(ValueError):
    pass


@dataclass
class DriftFieldResult:
    weights: dict = field(default_factory=dict)  # tau -> (*batch, K, K), rows sum to 1
    drifts: dict = field(default_factory=dict)  # tau -> (*batch, K, C)
    field: torch.Tensor | None = None  # aggregated, (*batch, K, C)
    loss: torch.Tensor | None = None  # (*batch,)


def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")


def normalize_rows(F: torch.Tensor, eps: float = EPS_NORM) -> torch.Tensor:
    """``F_k / (||F_k|| + eps)`` row-wise; zero rows stay zero."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    norm = torch.linalg.vector_norm(F, dim=-1, keepdim=True)
    return F / (norm + eps)


def pairwise_sqdist(Fh: torch.Tensor, Gh: torch.Tensor) -> torch.Tensor:
    """``D[k, j] = ||f_k - g_j||^2`` via the expanded form, clamped at 0."""
    if Fh.shape[-1] != Gh.shape[-1]:
        raise ValueError(f"feature dimension mismatch: {Fh.shape[-1]} vs {Gh.shape[-1]}")
    ff = Fh.pow(2).sum(-1, keepdim=True)
    gg = Gh.pow(2).sum(-1).unsqueeze(-2)
    D = ff + gg - 2.0 * Fh @ Gh.transpose(-1, -2)
    return D.clamp_min(0.0)


def affinity_query_to_target(D: torch.Tensor, tau: float) -> torch.Tensor:
    _check_tau(tau)
    return torch.softmax(-D / tau, dim=-1)


def affinity_target_to_query(D: torch.Tensor, tau: float) -> torch.Tensor:
    _check_tau(tau)
    return torch.softmax(-D / tau, dim=-2)


def joint_weights(A: torch.Tensor, B: torch.Tensor) -> torch.Tensor:
    """Row-normalized elementwise geometric mean of the two affinities."""
    wt = torch.sqrt(A * B)
    total = wt.sum(-1, keepdim=True)
    if bool((total <= 0).any()):
        raise DegenerateWeightsError("degenerate weights: a row of the geometric mean sums to 0")
    return wt / total


def log_joint_weights(D: torch.Tensor, tau: float) -> torch.Tensor:
    """Same weights as ``joint_weights(A, B)`` computed in the log domain.

    Underflow in either softmax cannot zero a whole row here, which matters
    at small temperatures.
    """
    _check_tau(tau)
    logits = -D / tau
    log_a = torch.log_softmax(logits, dim=-1)
    log_b = torch.log_softmax(logits, dim=-2)
    return torch.softmax(0.5 * (log_a + log_b), dim=-1)


def drift_tau(W: torch.Tensor, Gh: torch.Tensor, Fh: torch.Tensor) -> torch.Tensor:
    return W @ Gh - Fh


def aggregate_drift(fields: Sequence[torch.Tensor], eps: float = EPS_AGG) -> torch.Tensor:
    """Sum of per-temperature fields, each divided by its RMS row norm."""
    if not fields:
        raise ValueError("need at least one field")
    out = None
    for V in fields:
        rms = torch.sqrt(V.pow(2).sum(-1).mean(-1) + eps)
        term = V / rms[..., None, None]
        out = term if out is None else out + term
    return out


def _chunked_drift(Fh, Gh, tau, chunk):
    # Column log-normalizers first, then W and V one row block at a time.
    # Row normalization cancels the row log-normalizer of the geometric mean,
    # so W[k] = softmax_j(-D[k, j] / tau - lse_col[j] / 2).
    K = Fh.shape[-2]
    lse_col = None
    for lo in range(0, K, chunk):
        logits = -pairwise_sqdist(Fh[..., lo : lo + chunk, :], Gh) / tau
        part = torch.logsumexp(logits, dim=-2)
        lse_col = part if lse_col is None else torch.logaddexp(lse_col, part)
    rows = []
    for lo in range(0, K, chunk):
        logits = -pairwise_sqdist(Fh[..., lo : lo + chunk, :], Gh) / tau
        Wc = torch.softmax(logits - 0.5 * lse_col.unsqueeze(-2), dim=-1)
        rows.append(drift_tau(Wc, Gh, Fh[..., lo : lo + chunk, :]))
    return torch.cat(rows, dim=-2)


def drift_field(Fh: torch.Tensor, Gh: torch.Tensor, temps=DEFAULT_TEMPS, eps_agg: float = EPS_AGG,
                keep_weights: bool = False, chunk_threshold: int = CHUNK_THRESHOLD,
                chunk_size: int = 1024) -> DriftFieldResult:
    """Drift field for normalized query rows ``Fh`` against targets ``Gh``.

    Above ``chunk_threshold`` locations the ``K x K`` weights are never
    materialized in full (and cannot be kept).
    """
    if Fh.shape != Gh.shape:
        raise ValueError(f"feature shapes differ: {tuple(Fh.shape)} vs {tuple(Gh.shape)}")
    K = Fh.shape[-2]
    chunked = K > chunk_threshold
    if chunked and keep_weights:
        raise ValueError("weights cannot be kept in chunked mode")
    res = DriftFieldResult()
    for tau in temps:
        _check_tau(tau)
        if chunked:
            res.drifts[tau] = _chunked_drift(Fh, Gh, tau, chunk_size)
            continue
        W = log_joint_weights(pairwise_sqdist(Fh, Gh), tau)
        res.drifts[tau] = drift_tau(W, Gh, Fh)
        if keep_weights:
            res.weights[tau] = W
    res.field = aggregate_drift(list(res.drifts.values()), eps_agg)
    res.loss = res.field.pow(2).sum(-1).mean(-1)
    return res


def _layer_maps(pyramid) -> list:
    maps = getattr(pyramid, "maps", pyramid)
    if isinstance(maps, Mapping):
        return list(maps.values())
    return list(maps)


def flatten_locations(fmap: torch.Tensor) -> torch.Tensor:
    """``(*batch, C, H, W)`` to ``(*batch, H*W, C)``; location k = h*W + w."""
    return fmap.flatten(-2).transpose(-1, -2)


def layer_drift_loss(f: torch.Tensor, g: torch.Tensor, temps=DEFAULT_TEMPS, eps_agg: float = EPS_AGG,
                     chunk_threshold: int = CHUNK_THRESHOLD) -> torch.Tensor:
    """``(1/K) sum_k ||f_k - sg(f_k + V(f_k))||^2`` for normalized rows ``(*batch, K, C)``.

    Its gradient with respect to ``f`` is ``-(2/K) V``.
    """
    with torch.no_grad():
        target = f.detach() + drift_field(f.detach(), g.detach(), temps, eps_agg,
                                          chunk_threshold=chunk_threshold).field
    return (f - target).pow(2).sum(-1).mean(-1)


def drift_loss(pyr_recon, pyr_gt, temps=DEFAULT_TEMPS, eps_norm: float = EPS_NORM,
               eps_agg: float = EPS_AGG, chunk_threshold: int = CHUNK_THRESHOLD) -> torch.Tensor:
    """Per-image stop-gradient drift loss, averaged over layers.

    Pyramids are mappings (or objects with ``.maps``) of ``(*batch, C, H, W)``
    maps in matching layer order. The returned tensor has the batch shape;
    gradient flows only into the reconstruction branch, with the drifted
    target ``f + V`` held constant.
    """
    recon, gt = _layer_maps(pyr_recon), _layer_maps(pyr_gt)
    if len(recon) != len(gt) or not recon:
        raise ValueError(f"pyramids have {len(recon)} and {len(gt)} layers")
    total = None
    for Fmap, Gmap in zip(recon, gt):
        if Fmap.shape != Gmap.shape:
            raise ValueError(f"layer shape mismatch: {tuple(Fmap.shape)} vs {tuple(Gmap.shape)}")
        f = normalize_rows(flatten_locations(Fmap), eps_norm)
        with torch.no_grad():
            g = normalize_rows(flatten_locations(Gmap.detach()), eps_norm)
        term = layer_drift_loss(f, g, temps, eps_agg, chunk_threshold)
        total = term if total is None else total + term
    return total / len(recon)
