"""Multi-relation social graph: parsing, entity embeddings, user vectors.

The on-disk format is a UTF-8 TSV with one record per line,

    user_id<TAB>relation_name<TAB>entity_id

ids are non-negative integers, relation names must match the configured
schema, and lines starting with '#' are comments.  Entity ids are
namespaced per relation: entity 7 of "star" is unrelated to entity 7 of
"movie".

A user's vector is the concatenation, over relation types, of the mean
embedding of their entities in that relation; relations the user does not
have contribute a zero block, so the vector length is fixed.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import DataError

DEFAULT_RELATIONS = ("star", "movie", "friend", "uploader")


class SocialGraph:
    """Per-user entity sets for each relation type."""

    def __init__(self, relation_names: tuple[str, ...]):
        if len(set(relation_names)) != len(relation_names):
            raise ValueError("relation names must be unique")
        self.relation_names = tuple(relation_names)
        # user id -> tuple index by relation id -> set of entity ids
        self._members: dict[int, list[set[int]]] = {}
        self._entity_index_cache: list[dict[int, list[int]]] | None = None

    @property
    def num_relations(self) -> int:
        return len(self.relation_names)

    def relation_id(self, name: str) -> int:
        try:
            return self.relation_names.index(name)
        except ValueError:
            raise DataError(f"unknown relation name '{name}'") from None

    def add(self, user: int, relation: int, entity: int) -> None:
        rows = self._members.setdefault(user, [set() for _ in self.relation_names])
        rows[relation].add(entity)
        self._entity_index_cache = None

    def ensure_user(self, user: int) -> None:
        """Register a user even if they have no social records."""
        self._members.setdefault(user, [set() for _ in self.relation_names])

    def users(self) -> list[int]:
        return sorted(self._members)

    def __contains__(self, user: int) -> bool:
        return user in self._members

    def __len__(self) -> int:
        return len(self._members)

    def entities(self, user: int, relation: int) -> set[int]:
        if user not in self._members:
            raise DataError(f"unknown user {user}")
        return self._members[user][relation]

    def present_relations(self, user: int) -> list[int]:
        """Relation ids for which the user has at least one entity."""
        if user not in self._members:
            raise DataError(f"unknown user {user}")
        return [l for l, ents in enumerate(self._members[user]) if ents]

    def has_all_relations(self, user: int) -> bool:
        return len(self.present_relations(user)) == self.num_relations

    def entity_ids(self, relation: int) -> list[int]:
        """Sorted distinct entity ids seen in a relation."""
        ids = set()
        for rows in self._members.values():
            ids.update(rows[relation])
        return sorted(ids)

    def relation_counts(self) -> dict[str, int]:
        """Distinct entity count per relation name."""
        return {name: len(self.entity_ids(l)) for l, name in enumerate(self.relation_names)}

    def _entity_index(self) -> list[dict[int, list[int]]]:
        # inverted index: relation -> entity -> sorted users holding it
        if self._entity_index_cache is None:
            index: list[dict[int, set[int]]] = [{} for _ in self.relation_names]
            for user in self.users():
                for l, ents in enumerate(self._members[user]):
                    for e in ents:
                        index[l].setdefault(e, set()).add(user)
            self._entity_index_cache = [
                {e: sorted(us) for e, us in rel.items()} for rel in index
            ]
        return self._entity_index_cache


def parse_social_file(path, relation_names: tuple[str, ...] = DEFAULT_RELATIONS) -> SocialGraph:
    graph = SocialGraph(relation_names)
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(f"{path}: line {lineno}: expected 3 tab-separated fields, "
                                f"got {len(parts)}")
            user_s, rel_name, entity_s = parts
            try:
                user = int(user_s)
                entity = int(entity_s)
            except ValueError:
                raise DataError(f"{path}: line {lineno}: ids must be integers") from None
            if user < 0 or entity < 0:
                raise DataError(f"{path}: line {lineno}: ids must be non-negative")
            if rel_name not in relation_names:
                raise DataError(f"{path}: line {lineno}: unknown relation name '{rel_name}'")
            graph.add(user, relation_names.index(rel_name), entity)
    return graph


def write_social_file(graph: SocialGraph, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for user in graph.users():
            for l, name in enumerate(graph.relation_names):
                for entity in sorted(graph.entities(user, l)):
                    fh.write(f"{user}\t{name}\t{entity}\n")


class EntityEmbeddingTable:
    """Learnable embeddings for every entity, one matrix per relation.

    Row order follows the sorted entity ids of the graph the table was built
    from; `rows[l]` maps an entity id to its row index in relation l.
    """

    def __init__(self, matrices: list[np.ndarray], id_maps: list[dict[int, int]]):
        self.matrices = matrices
        self.id_maps = id_maps
        self.block_dims = tuple(m.shape[1] for m in matrices)

    @property
    def dim(self) -> int:
        return sum(self.block_dims)

    def block_slices(self) -> list[slice]:
        offsets = np.concatenate([[0], np.cumsum(self.block_dims)])
        return [slice(int(offsets[l]), int(offsets[l + 1])) for l in range(len(self.block_dims))]

    def params(self, prefix: str = "entities") -> dict[str, np.ndarray]:
        return {f"{prefix}.{l}": m for l, m in enumerate(self.matrices)}

    def clone(self) -> "EntityEmbeddingTable":
        return EntityEmbeddingTable([m.copy() for m in self.matrices],
                                    [dict(d) for d in self.id_maps])


def init_entity_table(graph: SocialGraph, dim_per_relation: int,
                      rng: np.random.Generator, scale: float = 0.5) -> EntityEmbeddingTable:
    matrices, id_maps = [], []
    for l in range(graph.num_relations):
        ids = graph.entity_ids(l)
        matrices.append(rng.uniform(-scale, scale, size=(len(ids), dim_per_relation)))
        id_maps.append({e: i for i, e in enumerate(ids)})
    return EntityEmbeddingTable(matrices, id_maps)


def social_embedding(graph: SocialGraph, table: EntityEmbeddingTable, user: int) -> np.ndarray:
    """Concatenated per-relation mean entity embedding, zero-padded where absent."""
    if user not in graph:
        raise DataError(f"unknown user {user}")
    blocks = []
    for l in range(graph.num_relations):
        ents = sorted(graph.entities(user, l))
        if ents:
            rows = [table.id_maps[l][e] for e in ents]
            blocks.append(table.matrices[l][rows].mean(axis=0))
        else:
            blocks.append(np.zeros(table.block_dims[l]))
    return np.concatenate(blocks)


def social_embedding_all(graph: SocialGraph, table: EntityEmbeddingTable,
                         users: list[int] | None = None) -> tuple[np.ndarray, list[int]]:
    """Stack social embeddings for `users` (default: whole universe, sorted)."""
    users = graph.users() if users is None else list(users)
    X = np.zeros((len(users), table.dim))
    for i, u in enumerate(users):
        X[i] = social_embedding(graph, table, u)
    return X, users


def mask_relations(x: np.ndarray, present_relations, fraction: float,
                   rng: np.random.Generator, block_dims) -> np.ndarray:
    """Zero the blocks of floor(fraction * n_present) randomly chosen present relations.

    At least one present relation always survives.  The choice is
    rng.choice over the sorted present ids without replacement, so a test
    can replay it from the same seed.
    """
    if not 0 <= fraction < 1:
        raise ValueError(f"masking fraction must be in [0, 1), got {fraction}")
    present = sorted(present_relations)
    masked = np.array(x, dtype=float, copy=True)
    count = min(int(fraction * len(present)), max(0, len(present) - 1))
    if count == 0:
        return masked
    chosen = rng.choice(present, size=count, replace=False)
    offsets = np.concatenate([[0], np.cumsum(block_dims)])
    for l in chosen:
        masked[int(offsets[l]):int(offsets[l + 1])] = 0.0
    return masked


def neighbors(graph: SocialGraph, user: int, relation: int) -> set[int]:
    """Users (excluding `user`) sharing at least one entity in `relation`."""
    if user not in graph:
        raise DataError(f"unknown user {user}")
    index = graph._entity_index()[relation]
    out: set[int] = set()
    for e in graph.entities(user, relation):
        out.update(index.get(e, ()))
    out.discard(user)
    return out
