"""Two-tower click scorer, optionally enhanced with social aggregates.

The vanilla scorer ranks user-item pairs by sigmoid(h(F_u) . g(F_t)) where
F_u concatenates a user-id embedding with the mean embedding of the user's
training-period clicks and F_t concatenates an item-id embedding with a
category embedding.

The social variant aggregates, per relation type, the social vectors of
the user's in-group neighbors (mean over neighbors plus the user's own
vector; just the user's vector when there are no in-group neighbors),
mixes the per-relation aggregates with attention scored by a small net on
concat(F_u, H_u^l), and feeds concat(F_u, H_u) to the user tower.  The
averaging variant replaces the attention weights with a uniform mixture.

Social aggregates are computed once from the frozen entity embeddings and
group assignments; gradients flow only through the towers, the attention
net, and the id-embedding tables.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from . import nn, social
from .errors import ConfigError, DataError
from .seeding import rng_for

MODEL_VARIANTS = ("vanilla", "social", "social-avg")


@dataclass
class RecConfig:
    id_embed_dim: int = 16
    category_embed_dim: int = 8
    tower_hidden: tuple[int, int] = (64, 32)
    match_dim: int = 32
    attention_hidden: int = 32
    learning_rate: float = 0.001
    epochs: int = 6
    batch_size: int = 256
    embed_init_scale: float = 0.05


def aggregate_relation(graph: social.SocialGraph, assignments: dict[int, int],
                       X: np.ndarray, row_of: dict[int, int], u: int, l: int) -> np.ndarray:
    """Mean social vector of u's in-group neighbors in relation l, plus u's own.

    Neighbors outside u's group are excluded; with no in-group neighbors the
    aggregate is just u's own vector.
    """
    own = X[row_of[u]]
    group = assignments[u]
    members = [v for v in social.neighbors(graph, u, l) if assignments.get(v) == group]
    if not members:
        return own.copy()
    rows = np.array(sorted(row_of[v] for v in members))
    return X[rows].mean(axis=0) + own


def build_social_aggregates(graph: social.SocialGraph, assignments: dict[int, int],
                            X: np.ndarray, users: list[int]) -> np.ndarray:
    """Stack aggregate_relation over every (user, relation); shape (n, L, d)."""
    row_of = {u: i for i, u in enumerate(users)}
    L = graph.num_relations
    H = np.zeros((len(users), L, X.shape[1]))
    for i, u in enumerate(users):
        for l in range(L):
            H[i, l] = aggregate_relation(graph, assignments, X, row_of, u, l)
    return H


def attention_weights(attn: nn.DenseNet, F_u: np.ndarray, H_rels: np.ndarray) -> np.ndarray:
    """Softmax over activated attention logits, one per relation aggregate."""
    L = H_rels.shape[0]
    inputs = np.hstack([np.tile(F_u, (L, 1)), H_rels])
    logits, _ = attn.forward(inputs)
    return nn.softmax(nn.leaky_relu(logits.reshape(L)))


def social_representation(alpha: np.ndarray, H_rels: np.ndarray) -> np.ndarray:
    """Convex mix of the per-relation aggregates."""
    alpha = np.asarray(alpha, dtype=float)
    if alpha.shape[0] != H_rels.shape[0]:
        raise ValueError(f"{alpha.shape[0]} weights for {H_rels.shape[0]} aggregates")
    return alpha @ H_rels


def social_representation_avg(H_rels: np.ndarray) -> np.ndarray:
    """Uniform mixture; same code path as the attention mix so the two agree
    bit-for-bit when the attention weights are uniform."""
    L = H_rels.shape[0]
    return social_representation(np.full(L, 1.0 / L), H_rels)


def score_vanilla(h: nn.DenseNet, g: nn.DenseNet, F_u: np.ndarray, F_t: np.ndarray) -> float:
    hu, _ = h.forward(F_u)
    gt, _ = g.forward(F_t)
    return float(nn.sigmoid(np.array([hu @ gt]))[0])


def score_social(h: nn.DenseNet, g: nn.DenseNet, F_u: np.ndarray, H_u: np.ndarray,
                 F_t: np.ndarray) -> float:
    return score_vanilla(h, g, np.concatenate([F_u, H_u]), F_t)


def _bce_vec(p: np.ndarray, y: np.ndarray) -> np.ndarray:
    p = np.clip(p, nn.PROB_EPS, 1.0 - nn.PROB_EPS)
    return -(y * np.log(p) + (1 - y) * np.log(1 - p))


class RecommenderModel:
    """Embedding tables, towers, and (for social variants) the attention net."""

    def __init__(self, users: list[int], items: list[int], item_category: dict[int, int],
                 variant: str, config: RecConfig, seed: int,
                 social_aggregates: np.ndarray | None = None,
                 social_dim: int = 0):
        if variant not in MODEL_VARIANTS:
            raise ConfigError(f"unknown model variant '{variant}'")
        if variant != "vanilla" and social_aggregates is None:
            raise ConfigError(f"variant '{variant}' requires social aggregates")
        self.variant = variant
        self.config = config
        self.users = list(users)
        self.items = list(items)
        self.user_row = {u: i for i, u in enumerate(self.users)}
        self.item_row = {t: i for i, t in enumerate(self.items)}
        categories = sorted(set(item_category.values()))
        self.category_row = {c: i for i, c in enumerate(categories)}
        self.item_cat_rows = np.array([self.category_row[item_category[t]] for t in self.items])

        d_id = config.id_embed_dim
        d_cat = config.category_embed_dim
        # history block averages the full item embedding (id + category)
        self.d_user = 2 * d_id + d_cat
        self.d_item = d_id + d_cat
        self.H = social_aggregates
        self.d_social = social_dim if variant != "vanilla" else 0

        rng = rng_for(seed, f"rec-init:{variant}")
        s = config.embed_init_scale
        self.user_emb = rng.uniform(-s, s, size=(len(self.users), d_id))
        self.item_emb = rng.uniform(-s, s, size=(len(self.items), d_id))
        self.cat_emb = rng.uniform(-s, s, size=(len(categories), config.category_embed_dim))

        h_in = self.d_user + self.d_social
        hid = list(config.tower_hidden)
        self.h_net = nn.dense_net([h_in, *hid, config.match_dim], rng)
        self.g_net = nn.dense_net([self.d_item, *hid, config.match_dim], rng)
        self.q_net = None
        if variant == "social":
            self.q_net = nn.dense_net([self.d_user + self.d_social,
                                       config.attention_hidden, 1], rng)

        # train-period click history, filled by set_history
        self.history: dict[int, list[int]] = {}
        self._hist_matrix = sparse.csr_matrix((len(self.users), len(self.items)))
        self._hist_cat_matrix = sparse.csr_matrix((len(self.users), len(categories)))

    def set_history(self, clicks: dict[int, list[int]]) -> None:
        """Record training-period clicked items per user (deduplicated, sorted)."""
        self.history = {}
        rows, cols, vals = [], [], []
        crows, ccols, cvals = [], [], []
        for u, its in clicks.items():
            if u not in self.user_row:
                continue
            uniq = sorted(set(t for t in its if t in self.item_row))
            self.history[u] = uniq
            for t in uniq:
                rows.append(self.user_row[u])
                cols.append(self.item_row[t])
                vals.append(1.0 / len(uniq))
                crows.append(self.user_row[u])
                ccols.append(int(self.item_cat_rows[self.item_row[t]]))
                cvals.append(1.0 / len(uniq))
        self._hist_matrix = sparse.csr_matrix(
            (vals, (rows, cols)), shape=(len(self.users), len(self.items)))
        self._hist_cat_matrix = sparse.csr_matrix(
            (cvals, (crows, ccols)), shape=(len(self.users), self.cat_emb.shape[0]))

    def named_params(self) -> dict[str, np.ndarray]:
        params = {"user_emb": self.user_emb, "item_emb": self.item_emb,
                  "cat_emb": self.cat_emb}
        params.update(self.h_net.params("h"))
        params.update(self.g_net.params("g"))
        if self.q_net is not None:
            params.update(self.q_net.params("q"))
        return params

    def behavior_user_embedding(self, u: int) -> np.ndarray:
        """User-id embedding joined with the mean full embedding of clicked items."""
        if u not in self.user_row:
            raise DataError(f"unknown user {u}")
        row = self.user_row[u]
        hist_id = np.asarray(self._hist_matrix[row] @ self.item_emb).reshape(-1)
        hist_cat = np.asarray(self._hist_cat_matrix[row] @ self.cat_emb).reshape(-1)
        return np.concatenate([self.user_emb[row], hist_id, hist_cat])

    def item_embedding(self, t: int) -> np.ndarray:
        if t not in self.item_row:
            raise DataError(f"unknown item {t}")
        row = self.item_row[t]
        return np.concatenate([self.item_emb[row], self.cat_emb[self.item_cat_rows[row]]])

    def _user_rows(self, users: np.ndarray) -> np.ndarray:
        try:
            return np.array([self.user_row[int(u)] for u in users])
        except KeyError as e:
            raise DataError(f"unknown user {e.args[0]}") from None

    def _item_rows(self, items: np.ndarray) -> np.ndarray:
        try:
            return np.array([self.item_row[int(t)] for t in items])
        except KeyError as e:
            raise DataError(f"unknown item {e.args[0]}") from None

    def _forward(self, urows: np.ndarray, irows: np.ndarray):
        B = len(urows)
        hist_id = np.asarray(self._hist_matrix[urows] @ self.item_emb)
        hist_cat = np.asarray(self._hist_cat_matrix[urows] @ self.cat_emb)
        F_u = np.hstack([self.user_emb[urows], hist_id, hist_cat])
        cat_rows = self.item_cat_rows[irows]
        F_t = np.hstack([self.item_emb[irows], self.cat_emb[cat_rows]])
        ctx: dict = {"urows": urows, "irows": irows, "cat_rows": cat_rows, "B": B}
        if self.variant == "vanilla":
            u_in = F_u
        else:
            Hb = self.H[urows]  # (B, L, d)
            L = Hb.shape[1]
            if self.variant == "social":
                q_in = np.concatenate(
                    [np.repeat(F_u, L, axis=0), Hb.reshape(B * L, -1)], axis=1)
                beta_flat, q_cache = self.q_net.forward(q_in)
                beta = beta_flat.reshape(B, L)
                s_act = nn.leaky_relu(beta)
                alpha = nn.softmax(s_act)
                ctx.update(q_cache=q_cache, beta=beta, alpha=alpha)
            else:
                alpha = np.full((B, L), 1.0 / L)
                ctx.update(alpha=alpha)
            H_u = np.einsum("bl,bld->bd", alpha, Hb)
            ctx.update(Hb=Hb)
            u_in = np.hstack([F_u, H_u])
        h_out, h_cache = self.h_net.forward(u_in)
        g_out, g_cache = self.g_net.forward(F_t)
        dot = np.einsum("bd,bd->b", h_out, g_out)
        p = nn.sigmoid(dot)
        ctx.update(h_cache=h_cache, g_cache=g_cache, h_out=h_out, g_out=g_out)
        return p, ctx

    def score_pairs(self, users, items) -> np.ndarray:
        """Click probabilities for aligned (user, item) arrays."""
        users = np.asarray(users)
        items = np.asarray(items)
        if users.shape != items.shape:
            raise ValueError("users and items must align")
        out = np.empty(len(users))
        for start in range(0, len(users), 4096):
            sl = slice(start, start + 4096)
            p, _ = self._forward(self._user_rows(users[sl]), self._item_rows(items[sl]))
            out[sl] = p
        return out

    def batch_loss(self, users, items, labels) -> float:
        p, _ = self._forward(self._user_rows(np.asarray(users)),
                             self._item_rows(np.asarray(items)))
        return float(_bce_vec(p, np.asarray(labels)).mean())

    def batch_loss_and_grads(self, users, items, labels
                             ) -> tuple[float, dict[str, np.ndarray]]:
        """Mean BCE over the batch and gradients for every named parameter."""
        labels = np.asarray(labels, dtype=float)
        urows = self._user_rows(np.asarray(users))
        irows = self._item_rows(np.asarray(items))
        p, ctx = self._forward(urows, irows)
        B = ctx["B"]
        loss = float(_bce_vec(p, labels).mean())

        d_dot = (p - labels) / B
        dh_out = d_dot[:, None] * ctx["g_out"]
        dg_out = d_dot[:, None] * ctx["h_out"]
        g_grads, dF_t = self.g_net.backward(ctx["g_cache"], dg_out)
        h_grads, du_in = self.h_net.backward(ctx["h_cache"], dh_out)

        grads: dict[str, np.ndarray] = {}
        for k, (dw, db) in enumerate(h_grads):
            grads[f"h.{k}.weight"] = dw
            grads[f"h.{k}.bias"] = db
        for k, (dw, db) in enumerate(g_grads):
            grads[f"g.{k}.weight"] = dw
            grads[f"g.{k}.bias"] = db

        if self.variant == "vanilla":
            dF_u = du_in
        else:
            dF_u = du_in[:, :self.d_user].copy()
            dH_u = du_in[:, self.d_user:]
            Hb = ctx["Hb"]
            alpha = ctx["alpha"]
            if self.variant == "social":
                L = Hb.shape[1]
                d_alpha = np.einsum("bd,bld->bl", dH_u, Hb)
                d_s = alpha * (d_alpha - (alpha * d_alpha).sum(axis=1, keepdims=True))
                d_beta = d_s * nn.leaky_relu_deriv(ctx["beta"])
                q_grads, dq_in = self.q_net.backward(ctx["q_cache"],
                                                     d_beta.reshape(-1, 1))
                for k, (dw, db) in enumerate(q_grads):
                    grads[f"q.{k}.weight"] = dw
                    grads[f"q.{k}.bias"] = db
                dF_u += dq_in[:, :self.d_user].reshape(B, L, self.d_user).sum(axis=1)
            # aggregates are frozen: no gradient into H

        d_id = self.config.id_embed_dim
        g_user = np.zeros_like(self.user_emb)
        np.add.at(g_user, urows, dF_u[:, :d_id])
        grads["user_emb"] = g_user
        g_item = np.asarray(self._hist_matrix[urows].T @ dF_u[:, d_id:2 * d_id])
        np.add.at(g_item, irows, dF_t[:, :d_id])
        grads["item_emb"] = g_item
        g_cat = np.asarray(self._hist_cat_matrix[urows].T @ dF_u[:, 2 * d_id:])
        np.add.at(g_cat, ctx["cat_rows"], dF_t[:, d_id:])
        grads["cat_emb"] = g_cat
        return loss, grads


def train_recommender(model: RecommenderModel, train_users, train_items, train_labels,
                      seed: int) -> list[float]:
    """Mini-batch Adam on BCE; returns per-epoch mean losses."""
    cfg = model.config
    n = len(train_users)
    train_users = np.asarray(train_users)
    train_items = np.asarray(train_items)
    train_labels = np.asarray(train_labels, dtype=float)
    opt = nn.Adam(model.named_params(), lr=cfg.learning_rate)
    rng = rng_for(seed, f"rec-train:{model.variant}")
    losses = []
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads = model.batch_loss_and_grads(
                train_users[idx], train_items[idx], train_labels[idx])
            opt.step(grads)
            total += loss * len(idx)
        losses.append(total / n)
    return losses


def rank_items(item_ids, scores, k: int) -> list[int]:
    """Top-k item ids by descending score; ties broken by ascending id."""
    item_ids = list(item_ids)
    if not item_ids:
        raise ValueError("empty candidate set")
    if k > len(item_ids):
        raise ValueError(f"k={k} exceeds {len(item_ids)} candidates")
    order = sorted(range(len(item_ids)), key=lambda i: (-float(scores[i]), item_ids[i]))
    return [item_ids[i] for i in order[:k]]


def predict_topk(model: RecommenderModel, u: int, candidates, k: int) -> list[int]:
    candidates = list(candidates)
    if not candidates:
        raise ValueError("empty candidate set")
    scores = model.score_pairs(np.full(len(candidates), u), np.array(candidates))
    return rank_items(candidates, scores, k)


def clicked_items_by_user(users, items, labels) -> dict[int, list[int]]:
    """Positive-label items per user, for building behavior histories."""
    out: dict[int, list[int]] = {}
    for u, t, y in zip(users, items, labels):
        if y == 1:
            out.setdefault(int(u), []).append(int(t))
    return out


def save_recommender(path, model: RecommenderModel, ccm_hash: str = "none") -> None:
    from . import checkpoint
    tensors = {"user_emb": model.user_emb, "item_emb": model.item_emb,
               "cat_emb": model.cat_emb}
    tensors.update(model.h_net.params("h"))
    tensors.update(model.g_net.params("g"))
    if model.q_net is not None:
        tensors.update(model.q_net.params("q"))
    meta = {
        "variant": model.variant,
        "ccm-checkpoint-sha256": ccm_hash,
        "users": ",".join(str(u) for u in model.users),
        "items": ",".join(str(t) for t in model.items),
        "h-spec": model.h_net.spec_string(),
        "g-spec": model.g_net.spec_string(),
    }
    if model.q_net is not None:
        meta["q-spec"] = model.q_net.spec_string()
    checkpoint.save_checkpoint(path, tensors, meta)
