"""Seeded synthetic data sets used by the self-test and examples."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .detector import LabeledEmbeddingSet
from .formats import EmbeddingStore, format_trials, write_embeddings
from .scoring import TrialPair

__all__ = ["separable_clusters", "speaker_cohort", "write_cohort"]


def separable_clusters(n, dim=256, separation=2.0, sigma=0.5, seed=0, direction=None, class_names=("male", "female")):
    """Two Gaussian clusters at ``+-separation * u`` for a random unit vector ``u``.

    Pass the ``direction`` of an earlier call to draw a test split from the
    same two clusters.
    """
    rng = np.random.default_rng(seed)
    if direction is None:
        direction = rng.standard_normal(dim)
        direction /= np.linalg.norm(direction)
    labels = rng.integers(0, 2, n)
    centers = np.where(labels[:, None] == 0, separation, -separation) * direction
    x = centers + sigma * rng.standard_normal((n, dim))
    ids = [f"{class_names[y]}/{i:05d}" for i, y in enumerate(labels)]
    return LabeledEmbeddingSet(x, labels, ids, tuple(class_names)), direction


def speaker_cohort(
    groups=("A", "B"),
    speakers_per_group=20,
    utterances_per_speaker=6,
    dim=64,
    within_noise=1.2,
    group_overlap=(0.0, 0.2),
    seed=0,
):
    """Embeddings, same-group trial list and metadata for a synthetic cohort.

    Every speaker has a random unit direction; its utterances add isotropic
    noise of ``within_noise`` per unit length. ``group_overlap[g]`` mixes a
    direction shared by all speakers of group ``g`` into each speaker, which
    raises the nontarget scores of that group.

    Returns ``(store, trials, metadata)``: ``store`` maps utterance id
    ``"<speaker>/<k>"`` to a vector, ``trials`` lists every same-group pair of
    utterances, ``metadata`` maps speaker id to its group tag.
    """
    rng = np.random.default_rng(seed)
    store, metadata = {}, {}
    by_group = {}
    for g, overlap in zip(groups, group_overlap):
        shared = rng.standard_normal(dim)
        shared /= np.linalg.norm(shared)
        for s in range(speakers_per_group):
            spk = f"{g.lower()}{s:03d}"
            metadata[spk] = g
            own = rng.standard_normal(dim)
            own /= np.linalg.norm(own)
            center = np.sqrt(1 - overlap) * own + np.sqrt(overlap) * shared
            for k in range(utterances_per_speaker):
                utt = f"{spk}/{k:02d}"
                store[utt] = center + within_noise * rng.standard_normal(dim) / np.sqrt(dim)
                by_group.setdefault(g, []).append(utt)
    trials = []
    for g, utts in by_group.items():
        for i, a in enumerate(utts):
            for b in utts[i + 1 :]:
                trials.append(TrialPair(a.split("/")[0] == b.split("/")[0], a, b, g))
    return store, trials, metadata


def write_cohort(directory, column="group", **kwargs):
    """Write a :func:`speaker_cohort` as ``trials.txt``, ``embeddings.emb1``
    and ``metadata.csv`` in ``directory``; return the three paths.

    Group labels are stored in the metadata column ``column``.
    """
    store, trials, metadata = speaker_cohort(**kwargs)
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    paths = out / "trials.txt", out / "embeddings.emb1", out / "metadata.csv"
    paths[0].write_text(format_trials(trials), encoding="utf-8")
    paths[1].write_bytes(write_embeddings(EmbeddingStore(store, provenance="synthetic")))
    rows = "".join(f"{spk},{g}\n" for spk, g in metadata.items())
    paths[2].write_text(f"speaker_id,{column}\n{rows}", encoding="utf-8")
    return paths
