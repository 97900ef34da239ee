"""Recall@K retrieval metrics and false-negative sampling diagnostics."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from fne.datagen import PairedDataset
from fne.embedding import similarity_matrix
from fne.errors import MalformedInputError

DEFAULT_KS = (1, 5, 10)


def first_hit_rank(similarity, ground_truth) -> np.ndarray:
    """0-based rank of the best-ranked ground-truth candidate per query.

    Candidates are ordered by descending similarity; ties go to the lower
    candidate index.
    """
    sim = np.asarray(similarity, dtype=np.float64)
    if sim.ndim != 2:
        raise MalformedInputError("similarity must be a 2-D matrix")
    if len(ground_truth) != sim.shape[0]:
        raise MalformedInputError("need one ground-truth set per query")
    order = np.argsort(-sim, axis=1, kind="stable")
    ranks = np.empty(sim.shape[0], dtype=np.int64)
    for q, gt in enumerate(ground_truth):
        gt = np.asarray(sorted(gt), dtype=np.int64)
        if gt.size == 0:
            raise MalformedInputError(f"query {q} has no ground-truth candidate")
        if gt.min() < 0 or gt.max() >= sim.shape[1]:
            raise MalformedInputError(f"query {q} has ground truth outside the gallery")
        hits = np.flatnonzero(np.isin(order[q], gt))
        ranks[q] = hits[0]
    return ranks


def recall_at_k(similarity, ground_truth, ks=DEFAULT_KS) -> dict[int, float]:
    ranks = first_hit_rank(similarity, ground_truth)
    return {int(k): float(np.mean(ranks < k)) for k in ks}


@dataclass
class RetrievalReport:
    image_to_text: dict[int, float]
    text_to_image: dict[int, float]
    n_queries: dict[str, int] = field(default_factory=dict)

    def mean_recall(self, k: int = 1) -> float:
        return 0.5 * (self.image_to_text[k] + self.text_to_image[k])

    def rows(self) -> list[tuple[str, int, float]]:
        out = [("i2t", k, r) for k, r in sorted(self.image_to_text.items())]
        out += [("t2i", k, r) for k, r in sorted(self.text_to_image.items())]
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["direction", "K", "recall"])
        for d, k, r in self.rows():
            wr.writerow([d, k, repr(r)])
        return buf.getvalue()

    def table(self) -> str:
        ks = sorted(self.image_to_text)
        head = f"{'direction':<10}" + "".join(f"{'R@' + str(k):>8}" for k in ks)
        lines = [head]
        for name, rec in (("i2t", self.image_to_text), ("t2i", self.text_to_image)):
            lines.append(f"{name:<10}" + "".join(f"{100 * rec[k]:8.2f}" for k in ks))
        return "\n".join(lines)


def retrieval_report(image_emb, text_emb, pair_of, ks=DEFAULT_KS) -> RetrievalReport:
    """Both retrieval directions over a full gallery.

    Image queries count a hit when any of their annotated captions is
    retrieved.
    """
    pair_of = np.asarray(pair_of)
    sim = similarity_matrix(image_emb, text_emb)
    n_img = sim.shape[0]
    captions = [set() for _ in range(n_img)]
    for t, i in enumerate(pair_of):
        captions[int(i)].add(t)
    i2t = recall_at_k(sim, captions, ks)
    t2i = recall_at_k(sim.T, [{int(i)} for i in pair_of], ks)
    return RetrievalReport(i2t, t2i, {"i2t": n_img, "t2i": sim.shape[1]})


def evaluate(image_encoder, text_encoder, dataset: PairedDataset, ks=DEFAULT_KS) -> RetrievalReport:
    v, _ = image_encoder.forward(dataset.image_view)
    w, _ = text_encoder.forward(dataset.text_view)
    return retrieval_report(v, w, dataset.pair_of, ks)


def fn_sampling_rate(sample_log, cluster_of) -> float:
    """Fraction of logged (anchor item, negative item) selections that are
    ground-truth false negatives: same cluster, different item."""
    if cluster_of is None:
        raise MalformedInputError("false-negative rate needs cluster labels")
    log = np.asarray(list(sample_log), dtype=np.int64).reshape(-1, 2)
    if log.shape[0] == 0:
        return float("nan")
    c = np.asarray(cluster_of)
    a, n = log[:, 0], log[:, 1]
    return float(np.mean((c[a] == c[n]) & (a != n)))
