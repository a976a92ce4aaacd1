"""Interest-group discovery over social embeddings.

Three stages run in sequence:

1. Cluster: winner-take-all competitive learning.  A projection net maps
   each user vector to a point z; the nearest prototype row of W wins and
   is pulled toward z, while the net (and the entity embeddings feeding it)
   take a gradient step shrinking the distance to the winner.
2. Calibrate: the trained projection net becomes a frozen teacher and a
   student copy is distilled on users that have every relation type, with
   a random subset of their relation blocks zeroed, minimizing
   KL(teacher distribution || student distribution).  The student stays
   reliable when relations are missing.
3. Merge: groups smaller than a minimum size are dissolved one at a time
   into the nearest surviving prototype, k-means style, until every group
   is large enough or only one remains.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn, social
from .errors import ConfigError, DataError
from .seeding import rng_for


@dataclass
class CcmConfig:
    num_prototypes: int = 32
    cluster_epochs: int = 30
    calibrator_epochs: int = 20
    eta_start: float = 0.5
    eta_end: float = 0.01
    # rival-penalized competitive learning: the second-nearest prototype is
    # pushed away from each sample at rival_penalty * eta, which starves
    # redundant prototypes so the surviving group count settles on its own
    rival_penalty: float = 0.1
    entity_scale: float = 3.0
    learning_rate: float = 0.001            # calibrator (distillation) steps
    cluster_net_learning_rate: float = 1e-4  # projection net during clustering
    entity_learning_rate: float = 3e-3       # entity table during clustering
    tau: float = 1.0
    mask_fraction: float = 0.5
    # per-visit masking severities for calibrator training, so the student
    # sees every sparsity pattern it will face at assignment time
    calibrator_mask_fractions: tuple[float, ...] = (0.25, 0.5, 0.75)
    min_group_size: int | None = None   # None -> max(5, |universe| // (4 m))
    calibrator_holdout: float = 0.3
    cluster_on_full_relation_users: bool = True
    projection_hidden: int | None = None  # None -> single linear layer

    def resolved_min_group_size(self, n_users: int) -> int:
        if self.min_group_size is not None:
            return self.min_group_size
        return max(5, n_users // (4 * self.num_prototypes))


def assign_group(W: np.ndarray, z: np.ndarray) -> int:
    """Index of the prototype nearest to z (Euclidean); ties go to the lowest index."""
    d2 = ((W - z) ** 2).sum(axis=1)
    return int(np.argmin(d2))


def assign_groups(W: np.ndarray, Z: np.ndarray) -> np.ndarray:
    d2 = ((Z[:, None, :] - W[None, :, :]) ** 2).sum(axis=2)
    return d2.argmin(axis=1)


def prototype_update(W: np.ndarray, j: int, z: np.ndarray, eta: float) -> np.ndarray:
    """Pull the winner row toward z by a step of eta; other rows untouched."""
    if not 0 < eta <= 1:
        raise ValueError(f"eta must be in (0, 1], got {eta}")
    W = W.copy()
    W[j] = W[j] + eta * (z - W[j])
    return W


def assignment_distribution(net: nn.DenseNet, W: np.ndarray, x: np.ndarray,
                            tau: float) -> np.ndarray:
    """Soft assignment: softmax over negative squared prototype distances / tau."""
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    z, _ = net.forward(x)
    d2 = ((W - z) ** 2).sum(axis=1)
    return nn.softmax(-d2, temperature=tau)


def _distribution_from_z(W: np.ndarray, Z: np.ndarray, tau: float) -> np.ndarray:
    d2 = ((Z[:, None, :] - W[None, :, :]) ** 2).sum(axis=2)
    return nn.softmax(-d2, temperature=tau)


def _kmeanspp_rows(Z: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    """Distance-weighted random row sampling for spread-out prototype starts."""
    n = Z.shape[0]
    centers = [Z[int(rng.integers(n))].copy()]
    d2 = ((Z - centers[0]) ** 2).sum(axis=1)
    for _ in range(m - 1):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            idx = int(rng.integers(n))
        centers.append(Z[idx].copy())
        d2 = np.minimum(d2, ((Z - Z[idx]) ** 2).sum(axis=1))
    return np.vstack(centers)


def init_prototypes(net: nn.DenseNet, X: np.ndarray, m: int,
                    rng: np.random.Generator) -> np.ndarray:
    if m < 1:
        raise ConfigError("need at least one prototype")
    if m > X.shape[0]:
        raise ConfigError(f"{m} prototypes exceed the {X.shape[0]} available users")
    Z, _ = net.forward(X)
    return _kmeanspp_rows(Z, m, rng)


def _entity_gradients(graph: social.SocialGraph, table: social.EntityEmbeddingTable,
                      user: int, d_x: np.ndarray) -> dict[str, np.ndarray]:
    """Distribute the embedding-vector gradient onto the user's entity rows."""
    grads: dict[str, np.ndarray] = {}
    slices = table.block_slices()
    for l in graph.present_relations(user):
        ents = sorted(graph.entities(user, l))
        g = np.zeros_like(table.matrices[l])
        share = d_x[slices[l]] / len(ents)
        for e in ents:
            g[table.id_maps[l][e]] += share
        grads[f"entities.{l}"] = g
    return grads


def train_cluster_layer(graph: social.SocialGraph, table: social.EntityEmbeddingTable,
                        net: nn.DenseNet, W: np.ndarray, config: CcmConfig,
                        users: list[int], seed: int) -> tuple[np.ndarray, list[float]]:
    """Alternate winner updates on W with gradient steps on the net and entity table.

    Per epoch, users are visited in a seeded shuffle; for each user the
    nearest prototype is pulled toward the projection, then the projection
    net and the user's entity embeddings descend on the squared distance to
    that (fixed) prototype.  Returns (W, per-epoch mean losses).
    """
    if config.num_prototypes > len(users):
        raise ConfigError(f"{config.num_prototypes} prototypes exceed {len(users)} users")
    net_opt = nn.Adam(dict(net.params("proj")), lr=config.cluster_net_learning_rate)
    entity_opt = nn.Adam(table.params(), lr=config.entity_learning_rate)
    rng = rng_for(seed, "cluster-order")
    losses = []
    for epoch in range(config.cluster_epochs):
        if config.cluster_epochs > 1:
            frac = epoch / (config.cluster_epochs - 1)
        else:
            frac = 0.0
        eta = config.eta_start + (config.eta_end - config.eta_start) * frac
        order = rng.permutation(len(users))
        total = 0.0
        for i in order:
            u = users[int(i)]
            x = social.social_embedding(graph, table, u)
            z, cache = net.forward(x)
            d2 = ((W - z) ** 2).sum(axis=1)
            j = int(np.argmin(d2))
            diff = z - W[j]
            total += float(diff @ diff)
            W = prototype_update(W, j, z, eta)
            if config.rival_penalty > 0 and W.shape[0] > 1:
                r = int(np.argsort(d2, kind="stable")[1])
                W[r] = W[r] - config.rival_penalty * eta * (z - W[r])
            net_grads, d_x = net.backward(cache, 2.0 * diff)
            grads = {f"proj.{k}.weight": g[0] for k, g in enumerate(net_grads)}
            grads.update({f"proj.{k}.bias": g[1] for k, g in enumerate(net_grads)})
            net_opt.step(grads)
            entity_opt.step(_entity_gradients(graph, table, u, d_x))
        losses.append(total / len(users))
    return W, losses


def train_calibrator(graph: social.SocialGraph, table: social.EntityEmbeddingTable,
                     teacher: nn.DenseNet, W: np.ndarray, student: nn.DenseNet,
                     config: CcmConfig, users: list[int], seed: int) -> list[float]:
    """Distill the frozen teacher into the student under random relation masking.

    Teacher targets are soft assignments on the clean vector; the student
    sees the same vector with a random half (mask_fraction) of its present
    relations zeroed and minimizes KL(teacher || student).  Only the student
    updates.  Returns per-epoch mean KL.
    """
    if not users:
        raise DataError("no users with all relation types; relax the data generation "
                        "(raise relation presence) so the calibrator has a teacher subset")
    X = np.vstack([social.social_embedding(graph, table, u) for u in users])
    targets = _distribution_from_z(W, teacher.forward(X)[0], config.tau)
    present = [graph.present_relations(u) for u in users]
    opt = nn.Adam(dict(student.params("proj")), lr=config.learning_rate)
    order_rng = rng_for(seed, "calibrator-order")
    mask_rng = rng_for(seed, "calibrator-mask")
    fractions = config.calibrator_mask_fractions or (config.mask_fraction,)
    losses = []
    for epoch in range(config.calibrator_epochs):
        order = order_rng.permutation(len(users))
        total = 0.0
        for i in order:
            i = int(i)
            p = targets[i]
            # cycle severities per (user, epoch) so each epoch sees the same mix
            fraction = fractions[(epoch + i) % len(fractions)]
            x_masked = social.mask_relations(X[i], present[i], fraction,
                                             mask_rng, table.block_dims)
            z, cache = student.forward(x_masked)
            d2 = ((W - z) ** 2).sum(axis=1)
            q = nn.softmax(-d2, temperature=config.tau)
            total += nn.kl_divergence(p, q)
            # d KL / d z through the softmax-of-distances head
            d_z = (2.0 / config.tau) * ((q - p) @ W)
            net_grads, _ = student.backward(cache, d_z)
            grads = {f"proj.{k}.weight": g[0] for k, g in enumerate(net_grads)}
            grads.update({f"proj.{k}.bias": g[1] for k, g in enumerate(net_grads)})
            opt.step(grads)
        losses.append(total / len(users))
    return losses


def merge_small_groups(Z: np.ndarray, assignment: np.ndarray, W: np.ndarray,
                       min_group_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Dissolve undersized groups into the nearest surviving prototype.

    One group per round (the smallest, lowest id on ties) is removed; its
    members move to their nearest surviving prototype and every surviving
    prototype with members is recentred on its members' mean.  Stops when
    all sizes reach min_group_size or a single group remains.  Returns
    (assignment, W) with group ids re-densified to 0..m'-1.
    """
    n = Z.shape[0]
    if min_group_size > n:
        raise ConfigError(f"min_group_size {min_group_size} exceeds {n} users")
    assignment = np.asarray(assignment).copy()
    W = W.copy()
    active = sorted(set(range(W.shape[0])))
    while len(active) > 1:
        sizes = {g: int((assignment == g).sum()) for g in active}
        undersized = [g for g in active if sizes[g] < min_group_size]
        if not undersized:
            break
        victim = min(undersized, key=lambda g: (sizes[g], g))
        active.remove(victim)
        members = np.flatnonzero(assignment == victim)
        if members.size:
            W_active = W[active]
            d2 = ((Z[members][:, None, :] - W_active[None, :, :]) ** 2).sum(axis=2)
            nearest = d2.argmin(axis=1)
            assignment[members] = np.array(active)[nearest]
        for g in active:
            mem = np.flatnonzero(assignment == g)
            if mem.size:
                W[g] = Z[mem].mean(axis=0)
    remap = {g: i for i, g in enumerate(active)}
    dense = np.array([remap[g] for g in assignment])
    return dense, W[active]


def final_assignment(graph: social.SocialGraph, table: social.EntityEmbeddingTable,
                     net: nn.DenseNet, W: np.ndarray,
                     users: list[int] | None = None) -> dict[int, int]:
    """Nearest-prototype group for every user in the universe."""
    X, users = social.social_embedding_all(graph, table, users)
    Z, _ = net.forward(X)
    ids = assign_groups(W, Z)
    return {u: int(g) for u, g in zip(users, ids)}


def write_assignments(path, assignments: dict[int, int]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for user in sorted(assignments):
            fh.write(f"{user}\t{assignments[user]}\n")


def load_assignments(path) -> dict[int, int]:
    out: dict[int, int] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 2:
                raise DataError(f"{path}: line {lineno}: expected user<TAB>group")
            out[int(parts[0])] = int(parts[1])
    return out


def save_ccm(path, result: "CcmResult", graph: social.SocialGraph) -> None:
    """Persist prototypes, both projection nets, and the entity table."""
    from . import checkpoint
    table = result.table
    tensors = {"W_cluster": result.W_cluster, "W_final": result.W_final}
    tensors.update({f"entities.{l}": m for l, m in enumerate(table.matrices)})
    tensors.update(result.teacher.params("teacher"))
    if result.student is not None:
        tensors.update(result.student.params("student"))
    cfg = result.config or CcmConfig()
    meta = {
        "relations": ",".join(graph.relation_names),
        "num-prototypes": str(cfg.num_prototypes),
        "tau": format(cfg.tau, ".17g"),
        "mask-fraction": format(cfg.mask_fraction, ".17g"),
        "seed": str(result.seed),
        "cluster-epochs": str(cfg.cluster_epochs),
        "calibrator-epochs": str(cfg.calibrator_epochs),
        "teacher-spec": result.teacher.spec_string(),
    }
    if result.student is not None:
        meta["student-spec"] = result.student.spec_string()
    for l in range(len(table.matrices)):
        ids = sorted(table.id_maps[l], key=table.id_maps[l].get)
        meta[f"entity-ids.{l}"] = ",".join(str(e) for e in ids)
    checkpoint.save_checkpoint(path, tensors, meta)


def load_ccm(path) -> "CcmResult":
    """Rebuild a CcmResult (nets, prototypes, entity table) from a checkpoint."""
    from . import checkpoint
    tensors, meta = checkpoint.load_checkpoint(path)
    relations = tuple(meta["relations"].split(","))
    matrices, id_maps = [], []
    for l in range(len(relations)):
        matrices.append(tensors[f"entities.{l}"])
        ids = [int(e) for e in meta[f"entity-ids.{l}"].split(",")] if meta[f"entity-ids.{l}"] else []
        id_maps.append({e: i for i, e in enumerate(ids)})
    table = social.EntityEmbeddingTable(matrices, id_maps)

    def fill(prefix: str, spec: str) -> nn.DenseNet:
        net = nn.net_from_spec(spec)
        for i in range(len(net.weights)):
            net.weights[i][:] = tensors[f"{prefix}.{i}.weight"]
            net.biases[i][:] = tensors[f"{prefix}.{i}.bias"]
        return net

    teacher = fill("teacher", meta["teacher-spec"])
    student = fill("student", meta["student-spec"]) if "student-spec" in meta else None
    config = CcmConfig(num_prototypes=int(meta["num-prototypes"]),
                       cluster_epochs=int(meta["cluster-epochs"]),
                       calibrator_epochs=int(meta["calibrator-epochs"]),
                       tau=float(meta["tau"]),
                       mask_fraction=float(meta["mask-fraction"]))
    return CcmResult(table=table, teacher=teacher, student=student,
                     W_cluster=tensors["W_cluster"], W_final=tensors["W_final"],
                     assignments={}, config=config, seed=int(meta["seed"]))


@dataclass
class CcmResult:
    table: social.EntityEmbeddingTable
    teacher: nn.DenseNet
    student: nn.DenseNet | None
    W_cluster: np.ndarray
    W_final: np.ndarray
    assignments: dict[int, int]
    cluster_losses: list[float] = field(default_factory=list)
    calibrator_losses: list[float] = field(default_factory=list)
    # holdout agreement of (student on masked input) and (teacher on masked
    # input) with the teacher's clean-input argmax
    student_agreement: float | None = None
    teacher_masked_agreement: float | None = None
    config: CcmConfig | None = None
    seed: int = 0

    @property
    def assign_net(self) -> nn.DenseNet:
        return self.student if self.student is not None else self.teacher


def _holdout_agreement(graph, table, teacher, student, W, config, holdout, seed):
    """Argmax agreement with the teacher's clean assignment on masked holdout users."""
    if not holdout:
        return None, None
    s_hits = t_hits = 0
    for u in holdout:
        x = social.social_embedding(graph, table, u)
        clean = int(np.argmax(assignment_distribution(teacher, W, x, config.tau)))
        rng = rng_for(seed, "calibrator-eval", u)
        x_masked = social.mask_relations(x, graph.present_relations(u),
                                         config.mask_fraction, rng, table.block_dims)
        s_hits += int(np.argmax(assignment_distribution(student, W, x_masked, config.tau)) == clean)
        t_hits += int(np.argmax(assignment_distribution(teacher, W, x_masked, config.tau)) == clean)
    return s_hits / len(holdout), t_hits / len(holdout)


def cluster_stage(graph: social.SocialGraph, config: CcmConfig, seed: int,
                  embed_dim_per_relation: int = 16
                  ) -> tuple[social.EntityEmbeddingTable, nn.DenseNet, np.ndarray, list[float]]:
    """Initialize the entity table, projection net, and prototypes, then cluster."""
    universe = graph.users()
    if not universe:
        raise DataError("empty social graph")
    init_rng = rng_for(seed, "ccm-init")
    table = social.init_entity_table(graph, embed_dim_per_relation, init_rng,
                                     scale=config.entity_scale)
    d = table.dim
    dims = [d, config.projection_hidden, d] if config.projection_hidden else [d, d]
    teacher = nn.dense_net(dims, init_rng)
    if config.cluster_on_full_relation_users:
        cluster_users = [u for u in universe if graph.has_all_relations(u)]
        if not cluster_users:
            raise DataError("no users with all relation types; relax the data "
                            "generation (raise relation presence)")
    else:
        cluster_users = universe
    X0, _ = social.social_embedding_all(graph, table, cluster_users)
    W = init_prototypes(teacher, X0, config.num_prototypes, rng_for(seed, "prototype-init"))
    W, losses = train_cluster_layer(graph, table, teacher, W, config, cluster_users, seed)
    return table, teacher, W, losses


def calibrate_stage(graph: social.SocialGraph, table: social.EntityEmbeddingTable,
                    teacher: nn.DenseNet, W: np.ndarray, config: CcmConfig, seed: int
                    ) -> tuple[nn.DenseNet, list[float], float | None, float | None]:
    """Split the full-relation users, distill a student, and score the holdout."""
    full_rel = [u for u in graph.users() if graph.has_all_relations(u)]
    if not full_rel:
        raise DataError("no users with all relation types; relax the data "
                        "generation (raise relation presence)")
    split_rng = rng_for(seed, "calibrator-split")
    shuffled = list(split_rng.permutation(full_rel))
    n_hold = int(len(shuffled) * config.calibrator_holdout)
    holdout = sorted(int(u) for u in shuffled[:n_hold])
    train_users = sorted(int(u) for u in shuffled[n_hold:])
    student = teacher.clone()
    losses = train_calibrator(graph, table, teacher, W, student, config, train_users, seed)
    student_agreement, teacher_masked_agreement = _holdout_agreement(
        graph, table, teacher, student, W, config, holdout, seed)
    return student, losses, student_agreement, teacher_masked_agreement


def assignment_stage(graph: social.SocialGraph, table: social.EntityEmbeddingTable,
                     net: nn.DenseNet, W: np.ndarray, config: CcmConfig,
                     use_merge: bool) -> tuple[dict[int, int], np.ndarray]:
    """Assign the whole universe, optionally dissolving undersized groups."""
    universe = graph.users()
    X_all, users = social.social_embedding_all(graph, table, universe)
    Z_all, _ = net.forward(X_all)
    raw = assign_groups(W, Z_all)
    if use_merge:
        min_size = config.resolved_min_group_size(len(universe))
        merged, W_final = merge_small_groups(Z_all, raw, W, min_size)
    else:
        merged, W_final = raw, W.copy()
    return {u: int(g) for u, g in zip(users, merged)}, W_final


def run_ccm(graph: social.SocialGraph, config: CcmConfig, seed: int,
            use_calibrator: bool = True, use_merge: bool = True,
            embed_dim_per_relation: int = 16) -> CcmResult:
    """Run the full stack and assign every user in the graph to a group."""
    table, teacher, W, cluster_losses = cluster_stage(graph, config, seed,
                                                      embed_dim_per_relation)
    student = None
    calibrator_losses: list[float] = []
    student_agreement = teacher_masked_agreement = None
    if use_calibrator:
        student, calibrator_losses, student_agreement, teacher_masked_agreement = \
            calibrate_stage(graph, table, teacher, W, config, seed)
    assign_net = student if student is not None else teacher
    assignments, W_final = assignment_stage(graph, table, assign_net, W, config, use_merge)
    return CcmResult(table=table, teacher=teacher, student=student, W_cluster=W,
                     W_final=W_final, assignments=assignments,
                     cluster_losses=cluster_losses, calibrator_losses=calibrator_losses,
                     student_agreement=student_agreement,
                     teacher_masked_agreement=teacher_masked_agreement,
                     config=config, seed=seed)
