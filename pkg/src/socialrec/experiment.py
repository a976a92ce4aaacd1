"""Experiment configuration, pipeline orchestration, and reporting.

A single flat config drives world generation, group discovery, recommender
training, and evaluation.  `run_variant` executes one scoring variant for
one seed; `bench` sweeps every variant over several seeds, reusing the
shared clustering stages, and emits a ranked comparison table plus a
machine-readable report that embeds the full effective config.

Variants:
    vanilla        behavior-only two towers, no group discovery
    social         full stack (cluster + calibrate + merge, attention mix)
    social-avg     full stack, uniform average instead of attention
    no-calibrator  teacher assigns every user (no distillation), merge kept
    no-merge       calibrated assignment, undersized groups kept
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import groups, metrics, recommender, social, synth
from .checkpoint import file_sha256
from .errors import ConfigError, StageError

VARIANTS = ("vanilla", "social", "social-avg", "no-calibrator", "no-merge")

# variant -> (ccm flavor or None, model variant)
_VARIANT_PLAN = {
    "vanilla": (None, "vanilla"),
    "social": ("full", "social"),
    "social-avg": ("full", "social-avg"),
    "no-calibrator": ("no-calibrator", "social"),
    "no-merge": ("no-merge", "social"),
}


@dataclass
class ExperimentConfig:
    # world
    num_groups: int = 8
    users_per_group: int = 250
    relation_names: tuple[str, ...] = social.DEFAULT_RELATIONS
    entities_per_pool: tuple[int, ...] = (3, 4, 12, 24)
    relation_signal: tuple[float, ...] = (1.0, 1.0, 0.0, 0.5)
    shared_pool_factor: int = 16
    entities_per_user_min: int = 8
    entities_per_user_max: int = 14
    leak_prob: float = 0.05
    presence_prob: tuple[float, ...] = (0.85, 0.8, 0.75, 0.7)
    num_items: int = 10000
    item_popularity_exponent: float = 0.8
    p_match: float = 0.7
    p_other: float = 0.1
    label_noise: float = 0.0
    cold_user_fraction: float = 0.35
    cold_presence_factor: float = 0.7
    cold_events_min: int = 1
    cold_events_max: int = 3
    warm_events_min: int = 20
    warm_events_max: int = 60
    days: float = 15.0
    cold_window_start: float = 12.0
    # splits
    train_fraction: float = 14.0 / 15.0
    cold_threshold: int = 3
    # group discovery
    num_prototypes: int = 32
    cluster_epochs: int = 30
    calibrator_epochs: int = 20
    eta_start: float = 0.5
    eta_end: float = 0.01
    rival_penalty: float = 0.1
    entity_scale: float = 3.0
    ccm_learning_rate: float = 0.001
    cluster_net_learning_rate: float = 1e-4
    entity_learning_rate: float = 3e-3
    tau: float = 1.0
    mask_fraction: float = 0.5
    calibrator_mask_fractions: tuple[float, ...] = (0.25, 0.5, 0.75)
    min_group_size: int = 100
    calibrator_holdout: float = 0.3
    embed_dim_per_relation: int = 16
    # recommender
    id_embed_dim: int = 8
    category_embed_dim: int = 8
    tower_hidden: tuple[int, ...] = (64, 32)
    match_dim: int = 32
    attention_hidden: int = 32
    rec_learning_rate: float = 0.001
    rec_epochs: int = 4
    batch_size: int = 256
    # run
    variant: str = "social"
    seed: int = 0
    repeats: int = 5
    out_dir: str = "out"
    social_file: str = ""
    interactions_file: str = ""
    user_groups_file: str = ""
    item_groups_file: str = ""

    def world_config(self, seed: int) -> synth.WorldConfig:
        return synth.WorldConfig(
            num_groups=self.num_groups, users_per_group=self.users_per_group,
            relation_names=self.relation_names,
            entities_per_pool=self.entities_per_pool,
            relation_signal=self.relation_signal,
            shared_pool_factor=self.shared_pool_factor,
            entities_per_user_min=self.entities_per_user_min,
            entities_per_user_max=self.entities_per_user_max,
            leak_prob=self.leak_prob, presence_prob=self.presence_prob,
            cold_presence_factor=self.cold_presence_factor,
            num_items=self.num_items,
            item_popularity_exponent=self.item_popularity_exponent,
            p_match=self.p_match, p_other=self.p_other,
            label_noise=self.label_noise, cold_user_fraction=self.cold_user_fraction,
            cold_events_min=self.cold_events_min, cold_events_max=self.cold_events_max,
            warm_events_min=self.warm_events_min, warm_events_max=self.warm_events_max,
            days=self.days, cold_window_start=self.cold_window_start, seed=seed)

    def ccm_config(self) -> groups.CcmConfig:
        return groups.CcmConfig(
            num_prototypes=self.num_prototypes, cluster_epochs=self.cluster_epochs,
            calibrator_epochs=self.calibrator_epochs, eta_start=self.eta_start,
            eta_end=self.eta_end, rival_penalty=self.rival_penalty,
            entity_scale=self.entity_scale, learning_rate=self.ccm_learning_rate,
            cluster_net_learning_rate=self.cluster_net_learning_rate,
            entity_learning_rate=self.entity_learning_rate, tau=self.tau,
            mask_fraction=self.mask_fraction,
            calibrator_mask_fractions=self.calibrator_mask_fractions,
            min_group_size=self.min_group_size,
            calibrator_holdout=self.calibrator_holdout)

    def rec_config(self) -> recommender.RecConfig:
        return recommender.RecConfig(
            id_embed_dim=self.id_embed_dim, category_embed_dim=self.category_embed_dim,
            tower_hidden=tuple(self.tower_hidden), match_dim=self.match_dim,
            attention_hidden=self.attention_hidden, learning_rate=self.rec_learning_rate,
            epochs=self.rec_epochs, batch_size=self.batch_size)


def _parse_value(raw: str, field: dataclasses.Field):
    raw = raw.strip()
    ftype = field.type
    try:
        if ftype == "int":
            return int(raw)
        if ftype == "float":
            return float(raw)
        if ftype == "str":
            return raw
        if ftype.startswith("tuple[str"):
            return tuple(p.strip() for p in raw.split(",") if p.strip())
        if ftype.startswith("tuple[int"):
            return tuple(int(p) for p in raw.split(",") if p.strip())
        if ftype.startswith("tuple[float"):
            return tuple(float(p) for p in raw.split(",") if p.strip())
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for config key '{field.name}'") from None
    raise ConfigError(f"unsupported config field type {ftype!r}")


def parse_config_file(path) -> dict:
    """Read `key = value` lines; '#' starts a comment."""
    fields = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
    out: dict = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}: line {lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in fields:
                raise ConfigError(f"{path}: line {lineno}: unknown config key '{key}'")
            out[key] = _parse_value(value, fields[key])
    return out


def config_from_sources(file_values: dict | None = None, overrides: dict | None = None
                        ) -> ExperimentConfig:
    """File values first, explicit overrides (CLI flags) on top."""
    merged: dict = {}
    merged.update(file_values or {})
    merged.update({k: v for k, v in (overrides or {}).items() if v is not None})
    cfg = ExperimentConfig(**merged)
    if cfg.variant not in VARIANTS:
        raise ConfigError(f"unknown variant '{cfg.variant}'; expected one of {VARIANTS}")
    if cfg.repeats < 1:
        raise ConfigError("repeats must be >= 1")
    if cfg.cold_threshold < 0:
        raise ConfigError("cold_threshold must be >= 0")
    return cfg


def config_to_dict(cfg: ExperimentConfig) -> dict:
    out = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


def config_from_dict(d: dict) -> ExperimentConfig:
    kwargs = {}
    for f in dataclasses.fields(ExperimentConfig):
        if f.name in d:
            v = d[f.name]
            kwargs[f.name] = tuple(v) if isinstance(v, list) else v
    return config_from_sources({}, kwargs)


def echo_config(cfg: ExperimentConfig) -> str:
    lines = []
    for f in sorted(dataclasses.fields(cfg), key=lambda f: f.name):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


class SeedPipeline:
    """All stages for one seed, with clustering shared across variants."""

    def __init__(self, cfg: ExperimentConfig, seed: int, log_path: Path | None = None):
        self.cfg = cfg
        self.seed = seed
        self.log_path = log_path
        self.timings: dict[str, float] = {}
        self._ccm_cache: dict[str, groups.CcmResult] = {}
        self._cluster_parts = None
        self._calibrate_parts = None
        self._aggregates: dict[str, np.ndarray] = {}
        self._X = None
        self._universe = None
        self._load_world()
        self._split()

    def _log(self, message: str) -> None:
        if self.log_path is not None:
            with open(self.log_path, "a", encoding="utf-8") as fh:
                fh.write(f"seed {self.seed}: {message}\n")

    def _run_stage(self, name: str, fn):
        start = time.perf_counter()
        try:
            result = fn()
        except Exception as e:
            self._log(f"stage {name} FAILED: {e}")
            raise StageError(name, str(e)) from e
        self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - start
        self._log(f"stage {name} done")
        return result

    def _load_world(self):
        def build():
            cfg = self.cfg
            if cfg.social_file:
                graph = social.parse_social_file(cfg.social_file, cfg.relation_names)
                log = synth.parse_interactions(cfg.interactions_file)
                truth = synth.GroundTruth(
                    user_groups=synth.parse_group_file(cfg.user_groups_file)
                    if cfg.user_groups_file else {},
                    item_groups=synth.parse_group_file(cfg.item_groups_file))
                for u in np.unique(log.users):
                    graph.ensure_user(int(u))
                return graph, log, truth
            return synth.generate_world(cfg.world_config(self.seed))
        self.graph, self.log, self.truth = self._run_stage("generate", build)

    def _split(self):
        def build():
            train, test = synth.temporal_split(self.log, self.cfg.train_fraction)
            full_test, cold_test = synth.cold_split(train, test, self.cfg.cold_threshold)
            return train, full_test, cold_test
        self.train, self.test, self.cold_test = self._run_stage("split", build)

    def ccm(self, flavor: str) -> groups.CcmResult:
        if flavor in self._ccm_cache:
            return self._ccm_cache[flavor]
        cfg = self.cfg.ccm_config()

        def cluster():
            return groups.cluster_stage(self.graph, cfg, self.seed,
                                        self.cfg.embed_dim_per_relation)
        if self._cluster_parts is None:
            self._cluster_parts = self._run_stage("cluster", cluster)
        table, teacher, W, cluster_losses = self._cluster_parts

        use_calibrator = flavor != "no-calibrator"
        use_merge = flavor != "no-merge"
        student = None
        calibrator_losses: list[float] = []
        agree_s = agree_t = None
        if use_calibrator:
            def calibrate():
                return groups.calibrate_stage(self.graph, table, teacher, W, cfg, self.seed)
            if self._calibrate_parts is None:
                self._calibrate_parts = self._run_stage("calibrate", calibrate)
            student, calibrator_losses, agree_s, agree_t = self._calibrate_parts

        def assign():
            net = student if student is not None else teacher
            return groups.assignment_stage(self.graph, table, net, W, cfg, use_merge)
        assignments, W_final = self._run_stage(f"assign:{flavor}", assign)
        result = groups.CcmResult(
            table=table, teacher=teacher, student=student, W_cluster=W, W_final=W_final,
            assignments=assignments, cluster_losses=cluster_losses,
            calibrator_losses=calibrator_losses, student_agreement=agree_s,
            teacher_masked_agreement=agree_t, config=cfg, seed=self.seed)
        self._ccm_cache[flavor] = result
        return result

    def social_inputs(self, flavor: str) -> tuple[np.ndarray, list[int]]:
        ccm = self.ccm(flavor)
        if self._X is None:
            self._X, self._universe = social.social_embedding_all(self.graph, ccm.table)
        if flavor not in self._aggregates:
            def build():
                return recommender.build_social_aggregates(
                    self.graph, ccm.assignments, self._X, self._universe)
            self._aggregates[flavor] = self._run_stage(f"aggregate:{flavor}", build)
        return self._aggregates[flavor], self._universe

    def train_model(self, variant: str) -> recommender.RecommenderModel:
        cfg = self.cfg
        ccm_flavor, model_variant = _VARIANT_PLAN[variant]
        H = None
        d_social = 0
        if ccm_flavor is not None:
            H, universe = self.social_inputs(ccm_flavor)
            d_social = H.shape[2]
            users = universe
        else:
            users = self.graph.users()
        items = sorted(self.truth.item_groups)

        def build_and_train():
            model = recommender.RecommenderModel(
                users, items, self.truth.item_groups, model_variant, cfg.rec_config(),
                self.seed, social_aggregates=H, social_dim=d_social)
            clicks = recommender.clicked_items_by_user(
                self.train.users, self.train.items, self.train.labels)
            model.set_history(clicks)
            losses = recommender.train_recommender(
                model, self.train.users, self.train.items, self.train.labels, self.seed)
            return model, losses
        model, losses = self._run_stage(f"train-rec:{variant}", build_and_train)
        model.train_losses = losses
        return model

    def evaluate(self, variant: str, model: recommender.RecommenderModel) -> dict:
        def run():
            out = {"variant": variant, "seed": self.seed}
            scores = model.score_pairs(self.test.users, self.test.items)
            out["auc_full"] = metrics.auc(scores, self.test.labels)
            cold_scores = model.score_pairs(self.cold_test.users, self.cold_test.items)
            out["auc_cold"] = metrics.auc(cold_scores, self.cold_test.labels)
            out["n_test"] = len(self.test)
            out["n_cold_test"] = len(self.cold_test)
            out["train_losses"] = [float(x) for x in model.train_losses]
            ccm_flavor, _ = _VARIANT_PLAN[variant]
            if ccm_flavor is not None and self.truth.user_groups:
                ccm = self.ccm(ccm_flavor)
                out["ari"] = metrics.adjusted_rand_index(self.truth.user_groups,
                                                         ccm.assignments)
                out["nmi"] = metrics.normalized_mutual_information(self.truth.user_groups,
                                                                   ccm.assignments)
                out["num_groups"] = len(set(ccm.assignments.values()))
                if ccm.calibrator_losses:
                    out["calibrator_kl_first"] = ccm.calibrator_losses[0]
                    out["calibrator_kl_last"] = ccm.calibrator_losses[-1]
                if ccm.student_agreement is not None:
                    out["student_agreement"] = ccm.student_agreement
                    out["teacher_masked_agreement"] = ccm.teacher_masked_agreement
                out["cluster_loss_first"] = ccm.cluster_losses[0]
                out["cluster_loss_last"] = ccm.cluster_losses[-1]
            return out
        return self._run_stage(f"eval:{variant}", run)


def _write_world(pipeline: SeedPipeline, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    social.write_social_file(pipeline.graph, out / "social.tsv")
    synth.write_interactions(pipeline.log, out / "interactions.tsv")
    if pipeline.truth.user_groups:
        synth.write_group_file(pipeline.truth.user_groups, out / "user_groups.tsv")
    synth.write_group_file(pipeline.truth.item_groups, out / "item_groups.tsv")


def run_variant(pipeline: SeedPipeline, variant: str, out_dir: Path | None = None) -> dict:
    """Train and evaluate one variant on one prepared pipeline."""
    model = pipeline.train_model(variant)
    report = pipeline.evaluate(variant, model)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        ccm_flavor, _ = _VARIANT_PLAN[variant]
        ccm_hash = "none"
        if ccm_flavor is not None:
            ccm = pipeline.ccm(ccm_flavor)
            ccm_path = out_dir / f"ccm_{ccm_flavor}.ckpt"
            if not ccm_path.exists():
                groups.save_ccm(ccm_path, ccm, pipeline.graph)
                groups.write_assignments(out_dir / f"assignments_{ccm_flavor}.tsv",
                                         ccm.assignments)
            ccm_hash = file_sha256(ccm_path)
        recommender.save_recommender(out_dir / f"rec_{variant}.ckpt", model, ccm_hash)
        _write_predictions(out_dir / f"predictions_{variant}.tsv", pipeline, model)
    return report


def _write_predictions(path, pipeline: SeedPipeline, model) -> None:
    scores = model.score_pairs(pipeline.test.users, pipeline.test.items)
    with open(path, "w", encoding="utf-8") as fh:
        for u, t, s in zip(pipeline.test.users, pipeline.test.items, scores):
            fh.write(f"{u}\t{t}\t{s:.9f}\n")


def summarize(per_seed: list[dict]) -> dict:
    """Per-variant means plus improvement percentages against vanilla."""
    by_variant: dict[str, list[dict]] = {}
    for rec in per_seed:
        by_variant.setdefault(rec["variant"], []).append(rec)
    summary: dict[str, dict] = {}
    for variant, rows in by_variant.items():
        entry = {
            "auc_full_mean": float(np.mean([r["auc_full"] for r in rows])),
            "auc_cold_mean": float(np.mean([r["auc_cold"] for r in rows])),
            "seeds": sorted(r["seed"] for r in rows),
        }
        for key in ("ari", "nmi", "student_agreement", "teacher_masked_agreement"):
            vals = [r[key] for r in rows if key in r]
            if vals:
                entry[f"{key}_mean"] = float(np.mean(vals))
        summary[variant] = entry
    if "vanilla" in summary:
        base_full = summary["vanilla"]["auc_full_mean"]
        base_cold = summary["vanilla"]["auc_cold_mean"]
        for variant, entry in summary.items():
            if variant == "vanilla":
                continue
            entry["imp_full_pct"] = metrics.improvement_pct(entry["auc_full_mean"], base_full)
            entry["imp_cold_pct"] = metrics.improvement_pct(entry["auc_cold_mean"], base_cold)
    return summary


def render_table(summary: dict) -> str:
    """Variant rows against FULL and COLD columns, improvement vs vanilla."""
    header = f"{'variant':<16}{'FULL AUC':>10}{'Imp.%':>9}{'COLD AUC':>10}{'Imp.%':>9}"
    lines = [header, "-" * len(header)]
    order = [v for v in VARIANTS if v in summary]
    base = summary.get("vanilla")
    for variant in order:
        entry = summary[variant]
        imp_full = metrics.format_improvement(
            entry["auc_full_mean"], base["auc_full_mean"] if base and variant != "vanilla" else None)
        imp_cold = metrics.format_improvement(
            entry["auc_cold_mean"], base["auc_cold_mean"] if base and variant != "vanilla" else None)
        lines.append(f"{variant:<16}{entry['auc_full_mean']:>10.4f}{imp_full:>9}"
                     f"{entry['auc_cold_mean']:>10.4f}{imp_cold:>9}")
    return "\n".join(lines) + "\n"


def save_report(path, cfg: ExperimentConfig, per_seed: list[dict], summary: dict) -> None:
    payload = {"config": config_to_dict(cfg), "per_seed": per_seed, "summary": summary}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


def load_report(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def run_experiment(cfg: ExperimentConfig, variants: list[str] | None = None,
                   write_artifacts: bool = True) -> dict:
    """Run `cfg.repeats` seeds of the requested variants; write reports and return them."""
    variants = variants or [cfg.variant]
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant '{v}'")
    out = Path(cfg.out_dir)
    log_path = None
    if write_artifacts:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.echo.txt").write_text(echo_config(cfg), encoding="utf-8")
        log_path = out / "stages.log"
        log_path.write_text("", encoding="utf-8")
    per_seed: list[dict] = []
    timings: dict[str, float] = {}
    for k in range(cfg.repeats):
        seed = cfg.seed + k
        pipeline = SeedPipeline(cfg, seed, log_path)
        seed_dir = out / f"seed{seed}" if write_artifacts else None
        if write_artifacts and not cfg.social_file:
            _write_world(pipeline, out / f"world_seed{seed}")
        for variant in variants:
            per_seed.append(run_variant(pipeline, variant, seed_dir))
        for stage, secs in pipeline.timings.items():
            timings[stage] = timings.get(stage, 0.0) + secs
    summary = summarize(per_seed)
    report = {"config": config_to_dict(cfg), "per_seed": per_seed, "summary": summary,
              "timings": timings}
    if write_artifacts:
        save_report(out / "report.json", cfg, per_seed, summary)
        (out / "report_table.txt").write_text(render_table(summary), encoding="utf-8")
        with open(out / "timings.txt", "w", encoding="utf-8") as fh:
            for stage in sorted(timings):
                fh.write(f"{stage}\t{timings[stage]:.3f}s\n")
    return report


def bench(cfg: ExperimentConfig, write_artifacts: bool = True) -> dict:
    """The full comparison sweep: every variant, `cfg.repeats` seeds."""
    return run_experiment(cfg, variants=list(VARIANTS), write_artifacts=write_artifacts)
