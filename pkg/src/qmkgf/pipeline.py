"""End-to-end retrieval flow: entities -> subgraphs -> fusion -> expansion
-> retrieve -> rerank -> generate.

Each query runs the same stages: extract potential entities, map them to
graph entities through the entity vector index, build the three
candidate subgraphs per mapped entity, score them with the attention
reward model, fuse, expand the query with the fused graph's entities /
relations / triples, retrieve per expansion item, rerank the union, and
hand the top chunks to the generation client. Every stage's output is
recorded in a JSON-friendly trace; with stub clients and a fixed seed
the trace is byte-reproducible.

Queries from which no graph entity can be resolved fall back to plain
retrieve + rerank on the bare query (flagged in the trace).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .config import PipelineConfig
from .errors import GenerationError, ModelServiceError, NotFoundError, ParseError, ValidationError
from .fusion import FusionConfig, FusionResult, ScoredSubgraph, fuse
from .kg import KnowledgeGraph, Triple
from .reward import AttentionParams, score as rm_score
from .subgraphs import (
    FUSED,
    PageRankConfig,
    Subgraph,
    multi_hop_subgraph,
    one_hop_subgraph,
    pagerank_subgraph,
    similarity_from_index,
)
from .vectors import VectorIndex, top_k

SEPARATOR = "[SEP]"

ANSWER_PROMPT = (
    "Answer the question using the numbered context passages. "
    "If the context does not contain the answer, say so.\n\n"
    "Question: {question}\n\n"
    "Context:\n{context}\n"
)

NO_CONTEXT_MARKER = "[no context]"


@dataclass(frozen=True)
class Chunk:
    id: str
    text: str


@dataclass
class ExpandedQuery:
    base: str
    items: list[str] = field(default_factory=list)


@dataclass
class RankedChunks:
    items: list[tuple[Chunk, float]]
    cutoff: int
    used_fallback: bool = False

    def ids(self) -> list[str]:
        return [chunk.id for chunk, _ in self.items]


@dataclass
class RetrievalIndices:
    entities: VectorIndex
    documents: VectorIndex
    chunks: dict[str, Chunk]


@dataclass
class QmkgfResult:
    answer: str
    ranked: RankedChunks
    trace: dict


def load_corpus(path: str) -> dict[str, Chunk]:
    """Read a line-delimited {"id", "text"} corpus file."""
    chunks: dict[str, Chunk] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                row = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc.msg}", line=lineno) from exc
            if (
                not isinstance(row, dict)
                or not isinstance(row.get("id"), str)
                or not isinstance(row.get("text"), str)
                or not row["text"]
            ):
                raise ParseError("expected {id, text} with non-empty text", line=lineno)
            if row["id"] in chunks:
                raise ParseError(f"duplicate chunk id {row['id']!r}", line=lineno)
            chunks[row["id"]] = Chunk(id=row["id"], text=row["text"])
    return chunks


def build_entity_index(g: KnowledgeGraph, embedder, dim: int) -> VectorIndex:
    index = VectorIndex(dim, kind="entity")
    for entity_id in sorted(g.entities):
        index.add(entity_id, embedder(g.entities[entity_id].name))
    return index


def build_document_index(chunks: dict[str, Chunk], embedder, dim: int) -> VectorIndex:
    index = VectorIndex(dim, kind="document")
    for chunk_id in sorted(chunks):
        index.add(chunk_id, embedder(chunks[chunk_id].text))
    return index


def extract_query_entities(query: str, client) -> list[str]:
    """Client-extracted entity strings, deduplicated, first occurrence kept."""
    if not query or not query.strip():
        raise ValidationError("query must be non-empty")
    seen: list[str] = []
    for entity in client.extract_entities(query):
        if entity and entity not in seen:
            seen.append(entity)
    return seen


def map_entity(entity_text: str, ent_index: VectorIndex, embedder) -> tuple[str, float]:
    """Nearest graph entity to the extracted string, by embedding cosine."""
    if len(ent_index) == 0:
        raise ValidationError("entity index is empty")
    hits = top_k(ent_index, embedder(entity_text), 1)
    return hits[0]


def expand_query(query: str, fused: Subgraph | None) -> ExpandedQuery:
    """One retrieval item per fused-subgraph entity, relation, and triple.

    A fused subgraph without triples carries no information beyond the
    query itself, so it expands to nothing (base-only retrieval).
    """
    items: list[str] = []
    seen: set[str] = set()
    if fused is not None and fused.triples:
        parts = (
            fused.entity_names()
            + fused.relation_labels()
            + [t.text() for t in fused.sorted_triples()]
        )
        for part in parts:
            rendered = f"{query} {SEPARATOR} {part}"
            if rendered not in seen:
                seen.add(rendered)
                items.append(rendered)
    return ExpandedQuery(base=query, items=items)


def retrieve(
    eq: ExpandedQuery,
    doc_index: VectorIndex,
    chunks: dict[str, Chunk],
    embedder,
    per_item_k: int,
) -> list[Chunk]:
    """Union (by chunk id) of top-k hits for the base query and every item."""
    if len(doc_index) == 0:
        raise ValidationError("document index is empty")
    if per_item_k < 1:
        raise ValidationError(f"per_item_k must be >= 1, got {per_item_k}")
    collected: set[str] = set()
    for text in [eq.base, *eq.items]:
        for chunk_id, _ in top_k(doc_index, embedder(text), per_item_k):
            collected.add(chunk_id)
    missing = collected - set(chunks)
    if missing:
        raise NotFoundError(f"chunks missing from corpus: {sorted(missing)}")
    return [chunks[cid] for cid in sorted(collected)]


def rerank_chunks(query: str, doc: list[Chunk], client, k: int) -> RankedChunks:
    """Client-scored ordering of the candidate set, truncated to k.

    If the rerank call fails, falls back to embedding-cosine ordering
    and flags the result.
    """
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    ordered = sorted(doc, key=lambda c: c.id)
    if not ordered:
        return RankedChunks(items=[], cutoff=k)
    used_fallback = False
    try:
        scores = client.rerank(query, [c.text for c in ordered])
        if len(scores) != len(ordered):
            raise ModelServiceError("rerank returned wrong number of scores")
    except ModelServiceError:
        q_vec = np.asarray(client.embed(query), dtype=np.float64)
        qn = np.linalg.norm(q_vec)
        scores = []
        for chunk in ordered:
            vec = np.asarray(client.embed(chunk.text), dtype=np.float64)
            denom = qn * np.linalg.norm(vec)
            scores.append(float(q_vec @ vec / denom) if denom > 0 else 0.0)
        used_fallback = True
    ranked = sorted(zip(ordered, scores), key=lambda pair: (-pair[1], pair[0].id))
    return RankedChunks(
        items=[(chunk, float(s)) for chunk, s in ranked[:k]],
        cutoff=k,
        used_fallback=used_fallback,
    )


def build_prompt(query: str, ranked: RankedChunks) -> str:
    if ranked.items:
        context = "\n".join(
            f"{i}. {chunk.text}" for i, (chunk, _) in enumerate(ranked.items, start=1)
        )
    else:
        context = NO_CONTEXT_MARKER
    return ANSWER_PROMPT.format(question=query, context=context)


def generate_answer(query: str, ranked: RankedChunks, client) -> str:
    prompt = build_prompt(query, ranked)
    try:
        return client.generate(prompt)
    except Exception as exc:
        raise GenerationError(f"generation failed: {exc}", prompt=prompt) from exc


def _union_fused(parts: list[Subgraph], center: str) -> Subgraph:
    merged: dict[tuple, Triple] = {}
    members: set[str] = {center}
    for part in parts:
        members |= part.members
        for t in part.triples:
            merged.setdefault(t.key, t)
    triples = [merged[key] for key in sorted(merged)]
    for t in triples:
        members.add(t.head)
        members.add(t.tail)
    return Subgraph(center=center, triples=triples, members=members, path_kind=FUSED)


def run_qmkgf(
    query: str,
    kg: KnowledgeGraph,
    indices: RetrievalIndices,
    params: AttentionParams,
    cfg: PipelineConfig,
    client,
) -> QmkgfResult:
    """Run the full pipeline for one query and record a stage-by-stage trace."""
    trace: dict = {"query": query, "fallback": False}

    entities = extract_query_entities(query, client)
    trace["entities"] = entities

    mapped: list[dict] = []
    for entity_text in entities:
        if len(indices.entities) == 0:
            break
        entity_id, sim = map_entity(entity_text, indices.entities, client.embed)
        mapped.append({"extracted": entity_text, "entity": entity_id, "score": sim})
    # Keep one pipeline per distinct mapped entity, in extraction order.
    centers: list[str] = []
    for m in mapped:
        if m["entity"] in kg and m["entity"] not in centers:
            centers.append(m["entity"])
    trace["mapped"] = mapped

    fused: Subgraph | None = None
    if not centers:
        trace["fallback"] = True
        trace["per_entity"] = []
    else:
        q_vec = np.asarray(client.embed(query), dtype=np.float64)
        sim = similarity_from_index(indices.entities, client.embed)
        pr_cfg = PageRankConfig(
            damping=cfg.damping,
            max_iters=cfg.pagerank_max_iters,
            tolerance=cfg.pagerank_tolerance,
        )
        fusion_cfg = FusionConfig(
            strategy=cfg.strategy,
            threshold_policy="fixed" if cfg.tau is not None else "derived",
            tau=cfg.tau,
        )
        per_entity = []
        fused_parts: list[Subgraph] = []
        for center in centers:
            candidates = [
                one_hop_subgraph(kg, center, cfg.K, sim),
                multi_hop_subgraph(kg, center, cfg.K, sim),
                pagerank_subgraph(kg, center, cfg.K, pr_cfg),
            ]
            scored = [
                ScoredSubgraph(subgraph=sg, score=rm_score(query, sg, params, client.embed))
                for sg in candidates
            ]
            result: FusionResult = fuse(scored, q_vec, fusion_cfg, client.embed)
            fused_parts.append(result.fused)
            per_entity.append(
                {
                    "entity": center,
                    "scores": {
                        s.subgraph.path_kind: float(s.score) for s in scored
                    },
                    "subgraph_sizes": {
                        s.subgraph.path_kind: len(s.subgraph.triples) for s in scored
                    },
                    "base_kind": result.base_kind,
                    "threshold": float(result.threshold_used),
                    "selected": [t.key for t in result.selected],
                    "fused_triples": [t.key for t in result.fused.sorted_triples()],
                }
            )
        trace["per_entity"] = per_entity
        fused = _union_fused(fused_parts, centers[0])

    eq = expand_query(query, fused)
    trace["expanded_items"] = eq.items

    doc = retrieve(eq, indices.documents, indices.chunks, client.embed, cfg.per_item_k)
    trace["doc_ids"] = [chunk.id for chunk in doc]

    ranked = rerank_chunks(query, doc, client, cfg.k)
    trace["ranked"] = [{"id": chunk.id, "score": s} for chunk, s in ranked.items]
    trace["rerank_fallback"] = ranked.used_fallback

    answer = generate_answer(query, ranked, client)
    trace["answer"] = answer
    return QmkgfResult(answer=answer, ranked=ranked, trace=trace)
