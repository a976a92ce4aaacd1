"""Synthetic worlds with planted interest groups.

Each group owns disjoint entity pools per relation; a user draws entities
from their own group's pools, leaking to a random other group with a small
probability, and has each relation type independently with a presence
probability.  Impressions are uniform over items; the click label is 1
with probability p_match when the item prefers the user's group, p_other
otherwise, then flipped at the noise rate.  A cold cohort of recently
joined users gets only a handful of late-window events, so the cold
evaluation split has both few training behaviors and enough test records
to score.

Every user derives their own RNG stream from (seed, user id), so
generation is reproducible record-for-record.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .seeding import rng_for
from .social import DEFAULT_RELATIONS, SocialGraph


@dataclass
class WorldConfig:
    num_groups: int = 8
    users_per_group: int = 250
    relation_names: tuple[str, ...] = DEFAULT_RELATIONS
    # per-relation pool sizes: small pools are sharp group markers, large
    # pools are diffuse, so relation types differ in how informative they are
    entities_per_pool: tuple[int, ...] | int = (3, 4, 12, 24)
    # fraction of a user's draws in each relation that come from their own
    # group's pool; the rest come from a pool shared by every group, so a
    # low-signal relation is mostly trivial (neighbors imply no interest)
    relation_signal: tuple[float, ...] | float = (1.0, 1.0, 0.0, 0.5)
    # the shared pool is this many times larger than the group pool, so
    # shared entities are individually rare and stay noisy
    shared_pool_factor: int = 16
    entities_per_user_min: int = 8
    entities_per_user_max: int = 14
    leak_prob: float = 0.05
    # per-relation presence: the trivial relation is among the most common,
    # so plenty of users carry mostly uninformative social signal
    presence_prob: tuple[float, ...] | float = (0.85, 0.8, 0.75, 0.7)
    # recently joined (cold) users have had less time to build relations
    cold_presence_factor: float = 0.7
    num_items: int = 10000
    # impressions follow a Zipf-like law over items (0 = uniform); preferred
    # groups cycle through the popularity ranking so no group is more popular
    item_popularity_exponent: float = 0.8
    p_match: float = 0.7
    p_other: float = 0.1
    label_noise: float = 0.0
    cold_user_fraction: float = 0.35
    cold_events_min: int = 1
    cold_events_max: int = 3
    warm_events_min: int = 20
    warm_events_max: int = 60
    days: float = 15.0
    cold_window_start: float = 12.0
    seed: int = 7

    def pool_sizes(self) -> tuple[int, ...]:
        pools = self.entities_per_pool
        if isinstance(pools, int):
            return (pools,) * len(self.relation_names)
        return tuple(pools)

    def signal_fractions(self) -> tuple[float, ...]:
        sig = self.relation_signal
        if isinstance(sig, (int, float)):
            return (float(sig),) * len(self.relation_names)
        return tuple(float(s) for s in sig)

    def presence_probs(self) -> tuple[float, ...]:
        pres = self.presence_prob
        if isinstance(pres, (int, float)):
            return (float(pres),) * len(self.relation_names)
        return tuple(float(p) for p in pres)

    def validate(self) -> None:
        if not len(self.relation_names):
            raise ConfigError("need at least one relation type")
        pools = self.pool_sizes()
        if len(pools) != len(self.relation_names):
            raise ConfigError(f"entities_per_pool has {len(pools)} entries for "
                              f"{len(self.relation_names)} relations")
        signals = self.signal_fractions()
        if len(signals) != len(self.relation_names):
            raise ConfigError(f"relation_signal has {len(signals)} entries for "
                              f"{len(self.relation_names)} relations")
        for s in signals:
            if not 0.0 <= s <= 1.0:
                raise ConfigError(f"relation_signal entries must be in [0, 1], got {s}")
        if self.shared_pool_factor < 1:
            raise ConfigError("shared_pool_factor must be >= 1")
        counts = dict(num_groups=self.num_groups, users_per_group=self.users_per_group,
                      entities_per_pool=min(pools), num_items=self.num_items,
                      entities_per_user_min=self.entities_per_user_min,
                      cold_events_min=self.cold_events_min,
                      warm_events_min=self.warm_events_min)
        for name, value in counts.items():
            if value < 1:
                raise ConfigError(f"{name} must be >= 1, got {value}")
        probs = dict(leak_prob=self.leak_prob, p_match=self.p_match,
                     p_other=self.p_other, label_noise=self.label_noise,
                     cold_user_fraction=self.cold_user_fraction)
        for name, value in probs.items():
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {value}")
        presences = self.presence_probs()
        if len(presences) != len(self.relation_names):
            raise ConfigError(f"presence_prob has {len(presences)} entries for "
                              f"{len(self.relation_names)} relations")
        for p in presences:
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"presence_prob entries must be in [0, 1], got {p}")
        if not 0.0 <= self.cold_presence_factor <= 1.0:
            raise ConfigError("cold_presence_factor must be in [0, 1]")
        if self.entities_per_user_max < self.entities_per_user_min:
            raise ConfigError("entities_per_user_max < entities_per_user_min")
        if self.cold_events_max < self.cold_events_min:
            raise ConfigError("cold_events_max < cold_events_min")
        if self.warm_events_max < self.warm_events_min:
            raise ConfigError("warm_events_max < warm_events_min")
        if not 0.0 <= self.cold_window_start < self.days:
            raise ConfigError("cold_window_start must lie inside [0, days)")
        if self.item_popularity_exponent < 0:
            raise ConfigError("item_popularity_exponent must be >= 0")


@dataclass
class InteractionLog:
    users: np.ndarray
    items: np.ndarray
    labels: np.ndarray
    timestamps: np.ndarray

    def __len__(self) -> int:
        return len(self.users)

    def take(self, idx: np.ndarray) -> "InteractionLog":
        return InteractionLog(self.users[idx], self.items[idx],
                              self.labels[idx], self.timestamps[idx])


@dataclass
class GroundTruth:
    user_groups: dict[int, int] = field(default_factory=dict)
    item_groups: dict[int, int] = field(default_factory=dict)


def generate_world(config: WorldConfig) -> tuple[SocialGraph, InteractionLog, GroundTruth]:
    config.validate()
    G = config.num_groups
    L = len(config.relation_names)
    pools = config.pool_sizes()
    signals = config.signal_fractions()
    presences = config.presence_probs()
    graph = SocialGraph(config.relation_names)
    truth = GroundTruth()
    truth.item_groups = {i: i % G for i in range(config.num_items)}

    ranks = np.arange(1, config.num_items + 1, dtype=float)
    weights = ranks ** -config.item_popularity_exponent
    item_cdf = np.cumsum(weights / weights.sum())

    users, items, labels, stamps = [], [], [], []
    n_users = G * config.users_per_group
    for uid in range(n_users):
        group = uid // config.users_per_group
        truth.user_groups[uid] = group
        rng = rng_for(config.seed, "world-user", uid)
        graph.ensure_user(uid)
        is_cold = rng.uniform() < config.cold_user_fraction
        presence_scale = config.cold_presence_factor if is_cold else 1.0
        for l in range(L):
            present = rng.uniform() < presences[l] * presence_scale
            if not present:
                continue
            n_draws = int(rng.integers(config.entities_per_user_min,
                                       config.entities_per_user_max + 1))
            for _ in range(n_draws):
                # the shared pool sits after the G group pools in the id space
                from_shared = rng.uniform() >= signals[l]
                if G > 1 and rng.uniform() < config.leak_prob:
                    other = int(rng.integers(G - 1))
                    src = other + (other >= group)
                else:
                    src = group
                if from_shared:
                    entity = G * pools[l] + int(rng.integers(config.shared_pool_factor * pools[l]))
                else:
                    entity = src * pools[l] + int(rng.integers(pools[l]))
                graph.add(uid, l, entity)
        if is_cold:
            n_events = int(rng.integers(config.cold_events_min, config.cold_events_max + 1))
            t_lo, t_hi = config.cold_window_start, config.days
        else:
            n_events = int(rng.integers(config.warm_events_min, config.warm_events_max + 1))
            t_lo, t_hi = 0.0, config.days
        for _ in range(n_events):
            item = int(np.searchsorted(item_cdf, rng.uniform()))
            ts = rng.uniform(t_lo, t_hi)
            p = config.p_match if truth.item_groups[item] == group else config.p_other
            label = int(rng.uniform() < p)
            # the flip uniform is drawn unconditionally so the same seed
            # yields the same pre-noise world at any noise rate
            if rng.uniform() < config.label_noise:
                label = 1 - label
            users.append(uid)
            items.append(item)
            labels.append(label)
            stamps.append(ts)

    log = InteractionLog(np.array(users, dtype=int), np.array(items, dtype=int),
                         np.array(labels, dtype=int), np.array(stamps, dtype=float))
    return graph, log, truth


def temporal_split(log: InteractionLog, train_fraction: float
                   ) -> tuple[InteractionLog, InteractionLog]:
    """Split at the timestamp quantile; every train record is no newer than any test record."""
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"train_fraction must be in (0, 1), got {train_fraction}")
    order = np.argsort(log.timestamps, kind="stable")
    if len(log) and log.timestamps.min() == log.timestamps.max():
        warnings.warn("all timestamps equal; splitting by stable record order")
    cut = int(len(log) * train_fraction)
    return log.take(order[:cut]), log.take(order[cut:])


def cold_split(train: InteractionLog, test: InteractionLog, threshold: int
               ) -> tuple[InteractionLog, InteractionLog]:
    """Return (full test set, test records of users with <= threshold training events)."""
    if threshold < 0:
        raise ConfigError(f"cold threshold must be >= 0, got {threshold}")
    counts: dict[int, int] = {}
    for u in train.users:
        counts[int(u)] = counts.get(int(u), 0) + 1
    keep = np.array([counts.get(int(u), 0) <= threshold for u in test.users], dtype=bool)
    return test, test.take(np.flatnonzero(keep))


def write_interactions(log: InteractionLog, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for u, i, y, t in zip(log.users, log.items, log.labels, log.timestamps):
            fh.write(f"{u}\t{i}\t{y}\t{format(t, '.17g')}\n")


def parse_interactions(path) -> InteractionLog:
    users, items, labels, stamps = [], [], [], []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise DataError(f"{path}: line {lineno}: expected 4 fields")
            try:
                users.append(int(parts[0]))
                items.append(int(parts[1]))
                label = int(parts[2])
                stamps.append(float(parts[3]))
            except ValueError:
                raise DataError(f"{path}: line {lineno}: malformed record") from None
            if label not in (0, 1):
                raise DataError(f"{path}: line {lineno}: label must be 0 or 1")
            labels.append(label)
    return InteractionLog(np.array(users, dtype=int), np.array(items, dtype=int),
                          np.array(labels, dtype=int), np.array(stamps, dtype=float))


def write_group_file(groups: dict[int, int], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key in sorted(groups):
            fh.write(f"{key}\t{groups[key]}\n")


def parse_group_file(path) -> dict[int, int]:
    out: dict[int, int] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataError(f"{path}: line {lineno}: expected id<TAB>group")
            out[int(parts[0])] = int(parts[1])
    return out
