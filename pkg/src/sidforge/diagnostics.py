"""SID quality metrics: collision and unique rates, codebook utilization,
prefix entropy, the reconstruction-similarity curve, and a linear category
probe over reconstruction vectors."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import rng
from .datamodel import EmbeddingSet
from .rq import RqModel, SidAssignment, decode_batch, encode_batch


class DiagnosticsError(ValueError):
    """Raised for empty or inconsistent metric inputs."""


def collision_rate(assign: SidAssignment) -> float:
    """Fraction of items whose full SID is shared with at least one other."""
    if len(assign.sids) == 0:
        raise DiagnosticsError("collision_rate needs a nonempty assignment")
    counts = Counter(assign.sids.values())
    shared = sum(c for c in counts.values() if c > 1)
    return shared / len(assign.sids)


def unique_ratio(assign: SidAssignment) -> float:
    """Complement of collision_rate. Defined as 1.0 - collision_rate so the
    two always sum to exactly 1.0 in floating point."""
    return 1.0 - collision_rate(assign)


def active_codes_per_level(assign: SidAssignment, model: RqModel) -> tuple[int, ...]:
    used: list[set[int]] = [set() for _ in range(model.levels)]
    for s in assign.sids.values():
        if len(s) != model.levels:
            raise DiagnosticsError("assignment SID length does not match the model")
        for level, token in enumerate(s):
            if not 0 <= int(token) < model.codebooks[level].size:
                raise DiagnosticsError(
                    f"token {token} out of range at level {level + 1}"
                )
            used[level].add(int(token))
    return tuple(len(u) for u in used)


def codebook_utilization(assign: SidAssignment, model: RqModel) -> float:
    """Mean over levels of (distinct codes used) / (configured codebook size).

    The denominator is the configured size, so capacity a fit could not use
    (for example a level shrunk to the distinct-residual count) reads as
    unused."""
    if len(assign.sids) == 0:
        raise DiagnosticsError("codebook_utilization needs a nonempty assignment")
    active = active_codes_per_level(assign, model)
    sizes = model.config.codebook_sizes
    return sum(a / k for a, k in zip(active, sizes)) / model.levels


def prefix_entropy_profile(assign: SidAssignment) -> tuple[float, ...]:
    """Base-2 Shannon entropy of the length-p prefix distribution over items,
    for every prefix length p."""
    if len(assign.sids) == 0:
        raise DiagnosticsError("prefix_entropy needs a nonempty assignment")
    depth = len(next(iter(assign.sids.values())))
    n = len(assign.sids)
    profile = []
    for p in range(1, depth + 1):
        counts = Counter(s[:p] for s in assign.sids.values())
        entropy = 0.0
        for key in sorted(counts):
            q = counts[key] / n
            entropy -= q * math.log2(q)
        profile.append(entropy)
    return tuple(profile)


def prefix_entropy(assign: SidAssignment) -> float:
    """Mean of the per-prefix-length entropies."""
    profile = prefix_entropy_profile(assign)
    return sum(profile) / len(profile)


@dataclass(frozen=True)
class ReconstructionCurve:
    sims: dict[int, float]  # depth -> mean cosine
    n_items: int
    n_zero_norm_originals: int  # excluded from every mean
    zero_recon_counts: dict[int, int]  # contribute similarity 0 at that depth


def reconstruction_curve(
    model: RqModel, emb: EmbeddingSet, h_max: int | None = None, workers: int = 1
) -> ReconstructionCurve:
    """Mean cosine between each embedding and its depth-h reconstruction, for
    h = 1..h_max."""
    if h_max is None:
        h_max = model.levels
    if not 1 <= h_max <= model.levels:
        raise DiagnosticsError(f"h_max {h_max} out of range [1, {model.levels}]")
    if emb.count == 0:
        raise DiagnosticsError("reconstruction_curve needs a nonempty embedding set")
    points = emb.rows.astype(np.float64)
    tokens = encode_batch(model, points, workers=workers)
    x_norms = np.sqrt(np.square(points).sum(axis=1))
    included = x_norms > 0.0
    recon = np.zeros_like(points)
    sims: dict[int, float] = {}
    zero_recon: dict[int, int] = {}
    for h in range(1, h_max + 1):
        cb = model.codebooks[h - 1]
        recon = recon + cb.centroids.astype(np.float64)[tokens[:, h - 1]]
        r_norms = np.sqrt(np.square(recon).sum(axis=1))
        cos = np.zeros(points.shape[0])
        ok = included & (r_norms > 0.0)
        cos[ok] = (points[ok] * recon[ok]).sum(axis=1) / (x_norms[ok] * r_norms[ok])
        np.clip(cos, -1.0, 1.0, out=cos)
        zero_recon[h] = int((included & (r_norms == 0.0)).sum())
        values = cos[included]
        sims[h] = float(values.mean()) if values.size else 0.0
    return ReconstructionCurve(
        sims=sims,
        n_items=emb.count,
        n_zero_norm_originals=int((~included).sum()),
        zero_recon_counts=zero_recon,
    )


def semantic_probe(
    assign: SidAssignment,
    model: RqModel,
    labels: dict[str, str],
    split_seed: int,
) -> float:
    """Held-out accuracy of a multinomial logistic-regression probe that
    predicts the category label from the full-depth reconstruction vector.

    80/20 stratified split; full-batch gradient descent, 500 steps, step size
    0.1, L2 penalty 1e-4 on the weights.
    """
    item_ids = sorted(assign.sids)
    if not item_ids:
        raise DiagnosticsError("semantic_probe needs a nonempty assignment")
    missing = [i for i in item_ids if i not in labels]
    if missing:
        raise DiagnosticsError(f"{len(missing)} items lack category labels")
    categories = sorted({labels[i] for i in item_ids})
    if len(categories) < 2:
        raise DiagnosticsError("semantic_probe needs at least 2 categories")
    cat_index = {c: k for k, c in enumerate(categories)}
    y = np.array([cat_index[labels[i]] for i in item_ids], dtype=np.int64)
    for c, k in cat_index.items():
        if int((y == k).sum()) < 10:
            raise DiagnosticsError(f"category {c!r} has fewer than 10 items")

    tokens = np.array([assign.sids[i] for i in item_ids], dtype=np.int64)
    features = decode_batch(model, tokens)

    gen = rng.stream(split_seed, rng.PROBE_SPLIT)
    train_parts = []
    test_parts = []
    for k in range(len(categories)):
        members = np.flatnonzero(y == k)
        members = members[gen.permutation(members.size)]
        cut = min(max(int(round(members.size * 0.8)), 1), members.size - 1)
        train_parts.append(members[:cut])
        test_parts.append(members[cut:])
    train_idx = np.sort(np.concatenate(train_parts))
    test_idx = np.sort(np.concatenate(test_parts))
    if len(set(y[train_idx].tolist())) < len(categories):
        raise DiagnosticsError("a category is absent from the probe train split")

    x_train, y_train = features[train_idx], y[train_idx]
    x_test, y_test = features[test_idx], y[test_idx]
    n, d = x_train.shape
    n_cat = len(categories)
    onehot = np.zeros((n, n_cat))
    onehot[np.arange(n), y_train] = 1.0
    weights = np.zeros((d, n_cat))
    bias = np.zeros(n_cat)
    step_size, l2 = 0.1, 1e-4
    for _ in range(500):
        logits = x_train @ weights + bias
        logits -= logits.max(axis=1, keepdims=True)
        expv = np.exp(logits)
        probs = expv / expv.sum(axis=1, keepdims=True)
        grad = (probs - onehot) / n
        weights -= step_size * (x_train.T @ grad + l2 * weights)
        bias -= step_size * grad.sum(axis=0)
    predictions = (x_test @ weights + bias).argmax(axis=1)
    return float((predictions == y_test).mean())


@dataclass(frozen=True)
class DiagnosticsReport:
    n_items: int
    n_distinct_sids: int
    collision_rate: float
    unique_ratio: float
    utilization: float
    prefix_entropy: float
    prefix_entropy_profile: tuple[float, ...]
    active_codes_per_level: tuple[int, ...]
    configured_sizes: tuple[int, ...]
    sim_curve: dict[int, float] | None = None
    probe_accuracy: float | None = None


def build_report(
    assign: SidAssignment,
    model: RqModel,
    emb: EmbeddingSet | None = None,
    labels: dict[str, str] | None = None,
    probe_seed: int | None = None,
    workers: int = 1,
) -> DiagnosticsReport:
    """Assemble the full report; the similarity curve needs embeddings and the
    probe needs labels plus a split seed."""
    rate = collision_rate(assign)
    sim = None
    if emb is not None:
        sim = reconstruction_curve(model, emb, workers=workers).sims
    probe = None
    if labels is not None:
        if probe_seed is None:
            raise DiagnosticsError("probe_seed is required when labels are given")
        probe = semantic_probe(assign, model, labels, probe_seed)
    return DiagnosticsReport(
        n_items=len(assign.sids),
        n_distinct_sids=len(assign.distinct_sids()),
        collision_rate=rate,
        unique_ratio=1.0 - rate,
        utilization=codebook_utilization(assign, model),
        prefix_entropy=prefix_entropy(assign),
        prefix_entropy_profile=prefix_entropy_profile(assign),
        active_codes_per_level=active_codes_per_level(assign, model),
        configured_sizes=model.config.codebook_sizes,
        sim_curve=sim,
        probe_accuracy=probe,
    )


def report_to_dict(report: DiagnosticsReport) -> dict:
    out = {
        "n_items": report.n_items,
        "n_distinct_sids": report.n_distinct_sids,
        "collision_rate": report.collision_rate,
        "unique_ratio": report.unique_ratio,
        "utilization": report.utilization,
        "prefix_entropy": report.prefix_entropy,
        "prefix_entropy_profile": list(report.prefix_entropy_profile),
        "active_codes_per_level": list(report.active_codes_per_level),
        "configured_sizes": list(report.configured_sizes),
    }
    if report.sim_curve is not None:
        out["sim_curve"] = {str(h): v for h, v in sorted(report.sim_curve.items())}
    if report.probe_accuracy is not None:
        out["probe_accuracy"] = report.probe_accuracy
    return out


def render_table(report: DiagnosticsReport) -> str:
    """Aligned-column table in the Collision / Unique / Util. / Entropy order."""
    headers = ["Collision", "Unique", "Util.", "Entropy"]
    values = [
        f"{report.collision_rate * 100.0:.2f}%",
        f"{report.unique_ratio * 100.0:.2f}%",
        f"{report.utilization * 100.0:.2f}%",
        f"{report.prefix_entropy:.4f}",
    ]
    widths = [max(len(h), len(v)) for h, v in zip(headers, values)]
    head = "  ".join(h.rjust(w) for h, w in zip(headers, widths))
    body = "  ".join(v.rjust(w) for v, w in zip(values, widths))
    return head + "\n" + body
