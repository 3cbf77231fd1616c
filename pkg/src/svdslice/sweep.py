"""Experiment sweeps: pretrain on the prior task, fine-tune adapters on the
new task across a grid of window starts and seeds, record accuracy and
forgetting per cell, test the forgetting curve for a U-shape, and analyze
the resulting checkpoints in parameter and feature space.

All outputs are plain files under one directory: results.csv (final-epoch
metrics), results_best.csv (best accuracy-sum from half-way through
fine-tuning), summary.json, manifest.json, per-run traces and checkpoints,
analysis/*.csv|json and plots/*.svg. CSV bytes depend only on the config.
"""

import dataclasses
import hashlib
import json
import math
import os
import platform
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, replace

import numpy as np

from .adapter import SliceSpec
from .datagen import TaskPairConfig, load_idx, make_task_pair
from .errors import (
    ConfigError,
    InsufficientData,
    MissingCheckpoint,
    NonFiniteLoss,
)
from .nn import ModelSpec
from .rng import stream
from .spectral import (
    component_importance,
    feature_space_delta,
    param_space_delta,
    weighted_summary,
    write_delta_csv,
    write_summary_json,
)
from .training import (
    TrainConfig,
    attach_and_finetune,
    evaluate,
    forgetting_soft_ce,
    load_model,
    pretrain,
    save_model,
    write_trace_csv,
)

RESULTS_HEADER = "s,seed,acc_new,acc_prior_before,acc_prior_after,forgetting,acc_sum,soft_ce,kl,exploded"
ANALYSIS_SUMMARY_HEADER = "s,seed,layer,space,diag_sum,offdiag_sum"


@dataclass(frozen=True)
class IdxPairPaths:
    """File locations for an IDX-backed task pair."""

    a_train_images: str
    a_train_labels: str
    a_test_images: str
    a_test_labels: str
    b_train_images: str
    b_train_labels: str
    b_test_images: str
    b_test_labels: str
    limit: int = None
    seed: int = 0


@dataclass(frozen=True)
class AnalysisFlags:
    param_space: bool = True
    feature_space: bool = True
    importance: bool = True


@dataclass(frozen=True)
class SweepConfig:
    model: ModelSpec
    data: object  # TaskPairConfig | IdxPairPaths
    rank: int
    starts: tuple
    seeds: tuple
    pretrain_cfg: TrainConfig
    finetune_cfg: TrainConfig
    analysis: AnalysisFlags = AnalysisFlags()
    out_dir: str = None
    alpha: float = None
    train_biases: bool = True
    feature_probe: int = 100

    def __post_init__(self):
        if not self.starts:
            raise ConfigError("starts", "must not be empty")
        if not self.seeds:
            raise ConfigError("seeds", "must not be empty")
        if self.rank < 1:
            raise ConfigError("rank", f"must be >= 1, got {self.rank}")
        k = self.min_adapted_k()
        for s in self.starts:
            if s < 0 or s + self.rank > k:
                raise ConfigError(
                    "starts", f"s={s} with rank={self.rank} exceeds k={k}"
                )

    def min_adapted_k(self):
        dims = self.model.layer_dims
        ks = [min(dims[i], dims[i + 1]) for i in self.model.adapted_layers]
        if not ks:
            raise ConfigError("model.adapted_layers", "must not be empty for a sweep")
        return min(ks)


def _require_keys(d, allowed, required, path):
    for key in d:
        if key not in allowed:
            raise ConfigError(f"{path}.{key}" if path else key, "unknown key")
    for key in required:
        if key not in d:
            raise ConfigError(f"{path}.{key}" if path else key, "missing key")


def _train_config_from(d, path):
    allowed = {
        "learning_rate", "epochs", "batch_size", "optimizer", "momentum",
        "beta1", "beta2", "eps", "weight_decay", "seed", "loss",
    }
    _require_keys(d, allowed, {"learning_rate", "epochs", "batch_size"}, path)
    try:
        return TrainConfig(**d)
    except (TypeError, ValueError) as e:
        raise ConfigError(path, str(e)) from e


def _data_config_from(d, path):
    kind = d.get("type")
    if kind == "teacher":
        allowed = {
            "type", "input_dim", "classes_a", "classes_b", "n_train",
            "n_test", "overlap", "noise_std", "seed",
        }
        _require_keys(d, allowed, {"type", "input_dim", "classes_a", "classes_b",
                                   "n_train", "n_test"}, path)
        body = {k: v for k, v in d.items() if k != "type"}
        try:
            return TaskPairConfig(**body)
        except ValueError as e:
            raise ConfigError(path, str(e)) from e
    if kind == "idx":
        allowed = {"type", "task_a", "task_b", "limit", "seed"}
        _require_keys(d, allowed, {"type", "task_a", "task_b"}, path)
        paths = {}
        for task in ("task_a", "task_b"):
            sub = d[task]
            _require_keys(sub, {"train_images", "train_labels", "test_images",
                                "test_labels"},
                          {"train_images", "train_labels", "test_images",
                           "test_labels"}, f"{path}.{task}")
            tag = task[-1]
            paths[f"{tag}_train_images"] = sub["train_images"]
            paths[f"{tag}_train_labels"] = sub["train_labels"]
            paths[f"{tag}_test_images"] = sub["test_images"]
            paths[f"{tag}_test_labels"] = sub["test_labels"]
        return IdxPairPaths(limit=d.get("limit"), seed=d.get("seed", 0), **paths)
    raise ConfigError(f"{path}.type", f"must be 'teacher' or 'idx', got {kind!r}")


def sweep_config_from_dict(doc, out_dir=None):
    """Strict parse of a sweep config document; unknown keys are errors."""
    allowed = {
        "model", "data", "rank", "starts", "seeds", "alpha", "train_biases",
        "pretrain", "finetune", "analysis", "feature_probe", "out_dir",
    }
    _require_keys(doc, allowed, {"model", "data", "rank", "starts", "seeds",
                                 "pretrain", "finetune"}, "")
    md = doc["model"]
    _require_keys(md, {"layer_dims", "activation", "adapted_layers", "bias"},
                  {"layer_dims"}, "model")
    try:
        model = ModelSpec(
            layer_dims=tuple(md["layer_dims"]),
            activation=md.get("activation", "relu"),
            adapted_layers=tuple(md.get("adapted_layers", ())),
            bias=md.get("bias", True),
        )
    except ValueError as e:
        raise ConfigError("model", str(e)) from e
    analysis = AnalysisFlags()
    if "analysis" in doc:
        ad = doc["analysis"]
        _require_keys(ad, {"param_space", "feature_space", "importance"}, set(),
                      "analysis")
        analysis = AnalysisFlags(
            param_space=ad.get("param_space", True),
            feature_space=ad.get("feature_space", True),
            importance=ad.get("importance", True),
        )
    try:
        return SweepConfig(
            model=model,
            data=_data_config_from(doc["data"], "data"),
            rank=int(doc["rank"]),
            starts=tuple(int(s) for s in doc["starts"]),
            seeds=tuple(int(s) for s in doc["seeds"]),
            pretrain_cfg=_train_config_from(doc["pretrain"], "pretrain"),
            finetune_cfg=_train_config_from(doc["finetune"], "finetune"),
            analysis=analysis,
            out_dir=out_dir if out_dir is not None else doc.get("out_dir"),
            alpha=doc.get("alpha"),
            train_biases=doc.get("train_biases", True),
            feature_probe=int(doc.get("feature_probe", 100)),
        )
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError("", str(e)) from e


def load_sweep_config(path, out_dir=None):
    with open(path) as f:
        doc = json.load(f)
    return sweep_config_from_dict(doc, out_dir=out_dir)


def build_datasets(data_cfg):
    """((train_a, test_a), (train_b, test_b)) for either data source."""
    if isinstance(data_cfg, TaskPairConfig):
        return make_task_pair(data_cfg)
    p = data_cfg
    task_a = (load_idx(p.a_train_images, p.a_train_labels, p.limit),
              load_idx(p.a_test_images, p.a_test_labels, p.limit))
    task_b = (load_idx(p.b_train_images, p.b_train_labels, p.limit),
              load_idx(p.b_test_images, p.b_test_labels, p.limit))
    return task_a, task_b


@dataclass
class SweepRow:
    s: int
    seed: int
    acc_new: float
    acc_prior_before: float
    acc_prior_after: float
    forgetting: float
    acc_sum: float
    soft_ce: float
    kl: float
    exploded: bool


def _atomic_write(path, text):
    tmp = f"{path}.tmp"
    with open(tmp, "w") as f:
        f.write(text)
    os.replace(tmp, path)


def format_results_csv(rows):
    lines = [RESULTS_HEADER]
    for r in sorted(rows, key=lambda r: (r.s, r.seed)):
        lines.append(
            f"{r.s},{r.seed},{r.acc_new!r},{r.acc_prior_before!r},"
            f"{r.acc_prior_after!r},{r.forgetting!r},{r.acc_sum!r},"
            f"{r.soft_ce!r},{r.kl!r},{'true' if r.exploded else 'false'}"
        )
    return "\n".join(lines) + "\n"


def read_results_csv(path):
    rows = []
    with open(path) as f:
        header = f.readline().strip()
        if header != RESULTS_HEADER:
            raise ConfigError(path, f"unexpected results header {header!r}")
        for line in f:
            parts = line.strip().split(",")
            rows.append(SweepRow(
                s=int(parts[0]), seed=int(parts[1]), acc_new=float(parts[2]),
                acc_prior_before=float(parts[3]), acc_prior_after=float(parts[4]),
                forgetting=float(parts[5]), acc_sum=float(parts[6]),
                soft_ce=float(parts[7]), kl=float(parts[8]),
                exploded=parts[9] == "true",
            ))
    return rows


def _base_dir(out_dir, seed):
    return os.path.join(out_dir, "checkpoints", f"base_seed{seed}")


def _run_dir(out_dir, s, seed):
    return os.path.join(out_dir, "checkpoints", f"run_s{s}_seed{seed}")


def pretrain_job(cfg, seed):
    """Train the per-seed base model on the prior task and checkpoint it."""
    (train_a, test_a), _ = build_datasets(cfg.data)
    run = pretrain(cfg.model, train_a, replace(cfg.pretrain_cfg, seed=seed),
                   val=test_a)
    save_model(run.model, _base_dir(cfg.out_dir, seed))
    write_trace_csv(run.trace, os.path.join(cfg.out_dir, "traces",
                                            f"pretrain_seed{seed}.csv"))
    return seed, evaluate(run.model, test_a)


def _metrics_for(model, base, test_a, test_b):
    acc_new = evaluate(model, test_b)
    acc_prior_after = evaluate(model, test_a)
    soft_ce, kl = forgetting_soft_ce(base, model, test_a)
    return acc_new, acc_prior_after, soft_ce, kl


def cell_job(cfg, s, seed):
    """Fine-tune one (start, seed) cell from its seed's base checkpoint."""
    (train_a, test_a), (train_b, test_b) = build_datasets(cfg.data)
    base = load_model(_base_dir(cfg.out_dir, seed))
    acc_prior_before = evaluate(base, test_a)
    spec = SliceSpec(s, cfg.rank, cfg.alpha)
    ft_cfg = replace(cfg.finetune_cfg, seed=seed)
    exploded = False
    try:
        run = attach_and_finetune(
            base, spec, train_b, ft_cfg, train_biases=cfg.train_biases,
            eval_new=test_b, eval_prior=test_a, track_best=True,
        )
        model, best_model = run.model, run.best_model
    except NonFiniteLoss as e:
        exploded = True
        run = e.partial
        model, best_model = run.model, None

    def make_row(m):
        acc_new, acc_prior_after, soft_ce, kl = _metrics_for(m, base, test_a, test_b)
        return SweepRow(
            s=s, seed=seed, acc_new=acc_new, acc_prior_before=acc_prior_before,
            acc_prior_after=acc_prior_after,
            forgetting=abs(acc_prior_before - acc_prior_after),
            acc_sum=acc_new + acc_prior_after, soft_ce=soft_ce, kl=kl,
            exploded=exploded,
        )

    row = make_row(model)
    best_row = row if best_model is None else make_row(best_model)
    save_model(model, _run_dir(cfg.out_dir, s, seed))
    write_trace_csv(run.trace, os.path.join(cfg.out_dir, "traces",
                                            f"run_s{s}_seed{seed}.csv"))
    return row, best_row


def run_sweep(cfg, jobs=1):
    """Execute the full grid. Returns (rows, best_rows), already written to
    out_dir; partial results are flushed after every completed cell."""
    if cfg.out_dir is None:
        raise ConfigError("out_dir", "missing (pass --out or set in config)")
    os.makedirs(cfg.out_dir, exist_ok=True)
    os.makedirs(os.path.join(cfg.out_dir, "traces"), exist_ok=True)
    os.makedirs(os.path.join(cfg.out_dir, "checkpoints"), exist_ok=True)
    _write_manifest(cfg)

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(pretrain_job, [cfg] * len(cfg.seeds), cfg.seeds))
    else:
        for seed in cfg.seeds:
            pretrain_job(cfg, seed)

    cells = [(s, seed) for s in cfg.starts for seed in cfg.seeds]
    rows, best_rows = [], []

    def flush():
        _atomic_write(os.path.join(cfg.out_dir, "results.csv"),
                      format_results_csv(rows))
        _atomic_write(os.path.join(cfg.out_dir, "results_best.csv"),
                      format_results_csv(best_rows))

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {pool.submit(cell_job, cfg, s, seed): (s, seed)
                       for s, seed in cells}
            for fut in as_completed(futures):
                row, best_row = fut.result()
                rows.append(row)
                best_rows.append(best_row)
                flush()
    else:
        for s, seed in cells:
            row, best_row = cell_job(cfg, s, seed)
            rows.append(row)
            best_rows.append(best_row)
            flush()

    rows.sort(key=lambda r: (r.s, r.seed))
    best_rows.sort(key=lambda r: (r.s, r.seed))
    _write_summary(cfg, rows, best_rows)
    return rows, best_rows


def _config_digest(cfg):
    doc = dataclasses.asdict(cfg)
    doc.pop("out_dir", None)
    blob = json.dumps(doc, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def _write_manifest(cfg):
    manifest = {
        "config": dataclasses.asdict(cfg),
        "config_sha256": _config_digest(cfg),
        "versions": {
            "python": platform.python_version(),
            "numpy": np.__version__,
            "svdslice": _package_version(),
        },
        "created_unix": time.time(),
    }
    _atomic_write(os.path.join(cfg.out_dir, "manifest.json"),
                  json.dumps(manifest, indent=2, default=str) + "\n")


def _package_version():
    try:
        from importlib.metadata import version

        return version("svdslice")
    except Exception:
        return "unknown"


def load_config_from_manifest(out_dir):
    path = os.path.join(out_dir, "manifest.json")
    if not os.path.exists(path):
        raise MissingCheckpoint(f"no manifest.json under {out_dir}")
    with open(path) as f:
        doc = json.load(f)["config"]
    data = doc.pop("data")
    if "input_dim" in data:
        data_cfg = TaskPairConfig(**data)
    else:
        data_cfg = IdxPairPaths(**data)
    model = ModelSpec(
        layer_dims=tuple(doc["model"]["layer_dims"]),
        activation=doc["model"]["activation"],
        adapted_layers=tuple(doc["model"]["adapted_layers"]),
        bias=doc["model"]["bias"],
    )
    return SweepConfig(
        model=model,
        data=data_cfg,
        rank=doc["rank"],
        starts=tuple(doc["starts"]),
        seeds=tuple(doc["seeds"]),
        pretrain_cfg=TrainConfig(**doc["pretrain_cfg"]),
        finetune_cfg=TrainConfig(**doc["finetune_cfg"]),
        analysis=AnalysisFlags(**doc["analysis"]),
        out_dir=out_dir,
        alpha=doc["alpha"],
        train_biases=doc["train_biases"],
        feature_probe=doc["feature_probe"],
    )


def _binom_tail(wins, n):
    # One-sided sign test: P(X >= wins) under X ~ Binomial(n, 1/2).
    if n == 0:
        return 1.0
    return sum(math.comb(n, k) for k in range(wins, n + 1)) / 2.0**n


def _per_start(rows, field):
    starts = sorted({r.s for r in rows})
    seeds = sorted({r.seed for r in rows})
    table = {}
    for r in rows:
        table[(r.s, r.seed)] = getattr(r, field)
    return starts, seeds, table


def ushape_report(rows):
    """Per-start statistics plus a distribution-free U-shape test.

    The gap is how far the lower of the two extreme-start mean forgettings
    sits above the best interior mean; the two sign tests check, seed by
    seed, that forgetting at the best interior start is below each extreme.
    """
    starts, seeds, forg = _per_start(rows, "forgetting")
    _, _, accsum = _per_start(rows, "acc_sum")
    if len(starts) < 3:
        raise InsufficientData(f"need >= 3 distinct starts, got {len(starts)}")
    if len(seeds) < 2:
        raise InsufficientData(f"need >= 2 seeds, got {len(seeds)}")

    def stats(table):
        mean, std = {}, {}
        for s in starts:
            vals = np.array([table[(s, seed)] for seed in seeds])
            mean[s] = float(vals.mean())
            std[s] = float(vals.std())
        return mean, std

    mean_forg, std_forg = stats(forg)
    mean_sum, std_sum = stats(accsum)

    s_lo, s_hi = starts[0], starts[-1]
    interior = starts[1:-1]
    s_star = min(interior, key=lambda s: (mean_forg[s], s))
    gap = min(mean_forg[s_lo], mean_forg[s_hi]) - mean_forg[s_star]

    def sign_test(extreme):
        wins = ties = 0
        for seed in seeds:
            a, b = forg[(s_star, seed)], forg[(extreme, seed)]
            if a < b:
                wins += 1
            elif a == b:
                ties += 1
        n = len(seeds) - ties
        return _binom_tail(wins, n)

    p_lo, p_hi = sign_test(s_lo), sign_test(s_hi)
    detected = gap > 0 and p_lo <= 0.05 and p_hi <= 0.05
    best_sum_s = max(starts, key=lambda s: (mean_sum[s], -s))
    return {
        "starts": starts,
        "n_seeds": len(seeds),
        "mean_forgetting": [mean_forg[s] for s in starts],
        "std_forgetting": [std_forg[s] for s in starts],
        "mean_acc_sum": [mean_sum[s] for s in starts],
        "std_acc_sum": [std_sum[s] for s in starts],
        "interior_min_start": s_star,
        "gap": gap,
        "p_vs_first": p_lo,
        "p_vs_last": p_hi,
        "ushape_detected": detected,
        "acc_sum_argmax_start": best_sum_s,
        "acc_sum_peak_interior": best_sum_s in interior,
    }


def _write_summary(cfg, rows, best_rows):
    summary = {
        "final": ushape_report(rows) if _reportable(rows) else None,
        "best_from_halfway": ushape_report(best_rows) if _reportable(best_rows) else None,
        "n_rows": len(rows),
        "n_exploded": sum(r.exploded for r in rows),
    }
    _atomic_write(os.path.join(cfg.out_dir, "summary.json"),
                  json.dumps(summary, indent=2) + "\n")


def _reportable(rows):
    return len({r.s for r in rows}) >= 3 and len({r.seed for r in rows}) >= 2


def _feature_probe_inputs(cfg, train_a):
    n = min(cfg.feature_probe, len(train_a))
    seed = getattr(cfg.data, "seed", 0)
    idx = stream(seed, "feature_probe").choice(len(train_a), size=n, replace=False)
    return train_a.x[np.sort(idx)]


def analyze_checkpoints(cfg, rows=None, feature_probe=None):
    """Spectral analysis of every finished run under cfg.out_dir.

    Per (start, seed, adapted layer): parameter-space and (optionally)
    feature-space deltas between the seed's pre-trained weight and the
    merged fine-tuned weight, weighted by the per-layer importance profile
    of the base model when enabled. Emits analysis/*.csv|json, an
    aggregate analysis_summary.csv, and line plots under plots/.
    """
    out = cfg.out_dir
    if rows is None:
        rows = read_results_csv(os.path.join(out, "results.csv"))
    if feature_probe is not None:
        cfg = replace(cfg, feature_probe=feature_probe)
    analysis_dir = os.path.join(out, "analysis")
    os.makedirs(analysis_dir, exist_ok=True)

    (train_a, test_a), _ = build_datasets(cfg.data)
    x_probe = _feature_probe_inputs(cfg, train_a)

    bases, profiles = {}, {}
    for seed in sorted({r.seed for r in rows}):
        bdir = _base_dir(out, seed)
        if not os.path.isdir(bdir):
            raise MissingCheckpoint(bdir)
        bases[seed] = load_model(bdir)
        if cfg.analysis.importance:
            for layer in cfg.model.adapted_layers:
                profiles[(seed, layer)] = component_importance(
                    bases[seed], test_a, layer
                )

    summary_lines = [ANALYSIS_SUMMARY_HEADER]
    for r in sorted(rows, key=lambda r: (r.s, r.seed)):
        rdir = _run_dir(out, r.s, r.seed)
        if not os.path.isdir(rdir):
            raise MissingCheckpoint(rdir)
        tuned = load_model(rdir)
        base = bases[r.seed]
        for layer in cfg.model.adapted_layers:
            w0 = base.layer_weight(layer)
            w_ft = tuned.layer_weight(layer)
            deltas = []
            if cfg.analysis.param_space:
                deltas.append(param_space_delta(w0, w_ft))
            if cfg.analysis.feature_space:
                h0 = base.layer_input(x_probe, layer)
                deltas.append(feature_space_delta(h0, w0, w_ft))
            prof = profiles.get((r.seed, layer))
            for delta in deltas:
                tag = "param" if delta.space == "parameter" else "feature"
                stem = os.path.join(analysis_dir,
                                    f"s{r.s}_seed{r.seed}_layer{layer}_{tag}")
                write_delta_csv(stem + ".csv", delta, prof)
                write_summary_json(stem + ".json", delta, prof)
                if prof is not None:
                    dsum, osum = weighted_summary(delta, prof)
                else:
                    dsum = float(delta.diag.sum())
                    osum = float(delta.offdiag_row_norms.sum())
                summary_lines.append(
                    f"{r.s},{r.seed},{layer},{delta.space},{dsum!r},{osum!r}"
                )
    _atomic_write(os.path.join(out, "analysis_summary.csv"),
                  "\n".join(summary_lines) + "\n")
    _write_plots(cfg, rows, os.path.join(out, "analysis_summary.csv"))


def _write_plots(cfg, rows, analysis_summary_path):
    from .plots import curve_plot

    plots_dir = os.path.join(cfg.out_dir, "plots")
    os.makedirs(plots_dir, exist_ok=True)
    starts, seeds, forg = _per_start(rows, "forgetting")
    _, _, accsum = _per_start(rows, "acc_sum")
    _, _, accnew = _per_start(rows, "acc_new")

    def series(table):
        arr = np.array([[table[(s, seed)] for seed in seeds] for s in starts])
        return arr.mean(axis=1), arr.std(axis=1)

    curve_plot(os.path.join(plots_dir, "forgetting.svg"), starts,
               {"forgetting": series(forg)}, "window start s", "forgetting")
    curve_plot(os.path.join(plots_dir, "acc_sum.svg"), starts,
               {"accuracy sum": series(accsum)}, "window start s", "accuracy sum")
    curve_plot(os.path.join(plots_dir, "acc_new.svg"), starts,
               {"new-task accuracy": series(accnew)}, "window start s", "accuracy")

    sums = {}
    with open(analysis_summary_path) as f:
        assert f.readline().strip() == ANALYSIS_SUMMARY_HEADER
        for line in f:
            s, seed, layer, space, dsum, osum = line.strip().split(",")
            sums.setdefault((space, "diag"), {}).setdefault(int(s), []).append(float(dsum))
            sums.setdefault((space, "offdiag"), {}).setdefault(int(s), []).append(float(osum))
    for space in sorted({k[0] for k in sums}):
        named = {}
        for part in ("diag", "offdiag"):
            per_s = sums[(space, part)]
            mean = np.array([np.mean(per_s[s]) for s in starts])
            std = np.array([np.std(per_s[s]) for s in starts])
            named[f"{part} weighted sum"] = (mean, std)
        curve_plot(os.path.join(plots_dir, f"weighted_sums_{space}.svg"),
                   starts, named, "window start s", "weighted change")
