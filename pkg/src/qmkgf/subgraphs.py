"""Candidate subgraph construction around a mapped query entity.

Three paths are built per entity: the one-hop neighborhood filtered by
similarity, a two-hop expansion through the two strongest neighbors, and
an importance-based neighborhood ranked by personalized PageRank.
Neighborhoods ignore edge direction (recall matters more than edge
orientation here); PageRank itself follows edge direction and weights.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import NotFoundError, ValidationError
from .kg import KnowledgeGraph, Triple

SimilarityProvider = Callable[[str, str], float]

ONEHOP = "onehop"
MULTIHOP = "multihop"
PAGERANK = "pagerank"
FUSED = "fused"
PATH_KINDS = (ONEHOP, MULTIHOP, PAGERANK, FUSED)


@dataclass
class Subgraph:
    center: str
    triples: list[Triple]
    members: set[str]
    path_kind: str
    node_scores: dict[str, float] | None = None

    def validate(self) -> None:
        """Check structural invariants; raises ValidationError on breach."""
        if self.path_kind not in PATH_KINDS:
            raise ValidationError(f"unknown path_kind {self.path_kind!r}")
        if self.center not in self.members:
            raise ValidationError("center must be a member")
        for t in self.triples:
            if t.head not in self.members or t.tail not in self.members:
                raise ValidationError(f"triple endpoint outside members: {t.key}")
        # Membership of pagerank/fused subgraphs is score- or
        # threshold-based, so connectivity to the center is not required.
        if self.path_kind in (ONEHOP, MULTIHOP):
            reachable = {self.center}
            frontier = [self.center]
            adjacency: dict[str, set[str]] = {}
            for t in self.triples:
                adjacency.setdefault(t.head, set()).add(t.tail)
                adjacency.setdefault(t.tail, set()).add(t.head)
            while frontier:
                node = frontier.pop()
                for nxt in adjacency.get(node, ()):
                    if nxt not in reachable:
                        reachable.add(nxt)
                        frontier.append(nxt)
            if reachable != self.members:
                raise ValidationError("members not reachable from center")

    def entity_names(self) -> list[str]:
        return sorted(self.members)

    def relation_labels(self) -> list[str]:
        return sorted({t.relation for t in self.triples})

    def sorted_triples(self) -> list[Triple]:
        return sorted(self.triples, key=lambda t: t.key)


@dataclass
class PageRankConfig:
    damping: float = 0.85
    max_iters: int = 100
    tolerance: float = 1e-8

    def __post_init__(self) -> None:
        if not 0.0 < self.damping < 1.0:
            raise ValidationError(f"damping must be in (0, 1), got {self.damping}")
        if self.max_iters < 1:
            raise ValidationError("max_iters must be >= 1")
        if not self.tolerance > 0:
            raise ValidationError("tolerance must be > 0")


@dataclass
class PageRankResult:
    scores: dict[str, float]
    converged: bool
    iterations: int


def _ranked_neighbors(
    g: KnowledgeGraph, center: str, sim: SimilarityProvider
) -> list[str]:
    """Distinct neighbors of center (both directions, self excluded),
    sorted by similarity to center descending, ties by id."""
    ids = {n for n, _ in g.neighbors(center, "both") if n != center}
    return sorted(ids, key=lambda e: (-sim(center, e), e))


def one_hop_subgraph(
    g: KnowledgeGraph, center: str, k: int, sim: SimilarityProvider
) -> Subgraph:
    """Center plus its top-k most similar immediate neighbors."""
    if center not in g:
        raise NotFoundError(f"unknown entity: {center!r}")
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    chosen = _ranked_neighbors(g, center, sim)[:k]
    triples: list[Triple] = []
    for nb in chosen:
        triples.extend(g.triples_between(center, nb))
    sg = Subgraph(
        center=center,
        triples=sorted(set(triples), key=lambda t: t.key),
        members={center, *chosen},
        path_kind=ONEHOP,
    )
    sg.validate()
    return sg


def multi_hop_subgraph(
    g: KnowledgeGraph, center: str, k: int, sim: SimilarityProvider
) -> Subgraph:
    """Two-hop expansion through the two neighbors most similar to center.

    Second-hop candidates are the bridges' neighbors (minus the center
    and the bridges); the top-k of those by similarity to the center
    are kept. Included triples are exactly the ones lying on a
    center-bridge-leaf path, at both hop levels. A center with a single
    neighbor expands through that one bridge; an isolated center yields
    the degenerate single-node subgraph.
    """
    if center not in g:
        raise NotFoundError(f"unknown entity: {center!r}")
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    ranked = _ranked_neighbors(g, center, sim)
    bridges = ranked[:2]
    if not bridges:
        return Subgraph(center=center, triples=[], members={center}, path_kind=MULTIHOP)

    candidates: set[str] = set()
    for bridge in bridges:
        candidates |= {n for n, _ in g.neighbors(bridge, "both")}
    candidates -= {center, *bridges}
    second_hop = sorted(candidates, key=lambda e: (-sim(center, e), e))[:k]

    triples: list[Triple] = []
    for bridge in bridges:
        triples.extend(g.triples_between(center, bridge))
        for leaf in second_hop:
            triples.extend(g.triples_between(bridge, leaf))
    sg = Subgraph(
        center=center,
        triples=sorted(set(triples), key=lambda t: t.key),
        members={center, *bridges, *second_hop},
        path_kind=MULTIHOP,
    )
    sg.validate()
    return sg


def personalization_vector(center: str) -> dict[str, float]:
    """All teleport mass on the query entity."""
    return {center: 1.0}


def personalized_pagerank(
    g: KnowledgeGraph, p: dict[str, float], cfg: PageRankConfig | None = None
) -> PageRankResult:
    """Iterate S(v) <- (1-d) p(v) + d * sum_u_in w_uv / W_u * S(u).

    Out-edge weights are normalized per source node; rank mass of
    dangling nodes is redistributed according to p, which keeps the
    scores a probability distribution on every iteration. Stops when the
    L1 change drops below the tolerance; otherwise returns the last
    iterate flagged as non-converged.
    """
    cfg = cfg or PageRankConfig()
    if len(g.entities) == 0:
        raise ValidationError("graph must be non-empty")
    ids = sorted(g.entities)
    pos = {e: i for i, e in enumerate(ids)}
    n = len(ids)

    pvec = np.zeros(n)
    for entity, mass in p.items():
        if entity not in pos:
            raise ValidationError(f"personalization entity {entity!r} not in graph")
        if mass < 0:
            raise ValidationError("personalization entries must be >= 0")
        pvec[pos[entity]] = mass
    if abs(pvec.sum() - 1.0) > 1e-9:
        raise ValidationError("personalization vector must sum to 1")

    src = np.array([pos[t.head] for t in g.triples], dtype=np.intp)
    dst = np.array([pos[t.tail] for t in g.triples], dtype=np.intp)
    weights = np.array([t.weight for t in g.triples])
    out_totals = np.zeros(n)
    np.add.at(out_totals, src, weights)
    norm_w = weights / out_totals[src] if len(weights) else weights
    dangling = out_totals == 0.0

    d = cfg.damping
    scores = pvec.copy()
    converged = False
    iterations = 0
    for iterations in range(1, cfg.max_iters + 1):
        incoming = np.zeros(n)
        if len(src):
            np.add.at(incoming, dst, scores[src] * norm_w)
        dangling_mass = float(scores[dangling].sum())
        new_scores = (1.0 - d) * pvec + d * (incoming + dangling_mass * pvec)
        delta = float(np.abs(new_scores - scores).sum())
        scores = new_scores
        if delta < cfg.tolerance:
            converged = True
            break
    return PageRankResult(
        scores={e: float(scores[pos[e]]) for e in ids},
        converged=converged,
        iterations=iterations,
    )


def pagerank_subgraph(
    g: KnowledgeGraph, center: str, k: int, cfg: PageRankConfig | None = None
) -> Subgraph:
    """Center plus the k highest-ranked entities, with all triples among them."""
    if center not in g:
        raise NotFoundError(f"unknown entity: {center!r}")
    if k < 0:
        raise ValidationError(f"k must be >= 0, got {k}")
    result = personalized_pagerank(g, personalization_vector(center), cfg)
    ranked = sorted(
        (e for e in result.scores if e != center),
        key=lambda e: (-result.scores[e], e),
    )
    members = {center, *ranked[:k]}
    triples = [t for t in g.triples if t.head in members and t.tail in members]
    sg = Subgraph(
        center=center,
        triples=sorted(set(triples), key=lambda t: t.key),
        members=members,
        path_kind=PAGERANK,
        node_scores=result.scores,
    )
    sg.validate()
    return sg


def dump_subgraph(sg: Subgraph) -> str:
    """Debug dump: one header line, then one triple per line (JSON)."""
    header: dict = {
        "center": sg.center,
        "path_kind": sg.path_kind,
        "members": sorted(sg.members),
    }
    if sg.node_scores is not None:
        header["scores"] = {e: sg.node_scores[e] for e in sorted(sg.node_scores)}
    lines = [json.dumps(header, sort_keys=True)]
    for t in sg.sorted_triples():
        row: dict = {"head": t.head, "relation": t.relation, "tail": t.tail, "weight": t.weight}
        if t.source_chunk is not None:
            row["source_chunk"] = t.source_chunk
        lines.append(json.dumps(row, sort_keys=True))
    return "\n".join(lines) + "\n"


def similarity_from_index(index, embed: Callable[[str], np.ndarray]) -> SimilarityProvider:
    """Similarity provider backed by an entity VectorIndex.

    Entities missing from the index are embedded from their id text on
    the fly, so freshly added nodes still score.
    """
    from .vectors import cosine

    def sim(a: str, b: str) -> float:
        va = index.entries[a] if a in index else embed(a)
        vb = index.entries[b] if b in index else embed(b)
        return cosine(va, vb)

    return sim
