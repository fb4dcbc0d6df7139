"""Staged experiment driver: generate, train, retrieve, select, evaluate, diagnose.

Every stage reads its inputs from, and writes its outputs to, one run
directory. All randomness flows from the seeds in :class:`RunConfig`, so
two runs with the same config write the same bytes.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import geometry, metrics
from .alignment import AlignConfig, TrajEncoder, retrieval_recall_at_1, train_alignment
from .cem import (
    CemConfig,
    LatentPredictor,
    LatentPredictorConfig,
    cem_plan,
    l1_to_goal,
    monotonicity_fraction,
    pair_geometry_probe,
    score_accuracy_correlation,
    train_latent_predictor,
)
from .core import load_module_state, load_tensors, save_module, save_tensors
from .pilot import (
    ScorerConfig,
    ScorerModel,
    build_bank,
    build_candidates,
    candidate_utility,
    gate_then_rank_infer,
    pool_oracle,
    pool_recall,
    train_scorer,
)
from .predictor import PlanBatch, PredictorConfig, PredictorModel, eval_loss, make_batch, plan_rankings, predict, train_predictor
from .synthworld import HORIZONS, WorldConfig, emit_manifest, generate_corpus, load_manifest

log = logging.getLogger(__name__)

STAGES = ("generate", "preprocess", "train-align", "train-predictor", "build-bank", "train-scorer", "eval",
          "diagnose")
TASK_MODES = ("planning", "anticipation")
PREDICTORS = ("traj", "notraj", "notraj_goaldrop")


class ConfigError(ValueError):
    pass


class PrerequisiteError(RuntimeError):
    """A stage's input artifact is missing."""


# -- configuration ------------------------------------------------------------------


@dataclass
class RunConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    align: AlignConfig = field(default_factory=lambda: AlignConfig(width=64, layers=2, epochs=8))
    predictor: PredictorConfig = field(
        default_factory=lambda: PredictorConfig(width=64, layers=2, steps=1000, lr=2e-3))
    goal_dropout: float = 0.5
    scorer: ScorerConfig = field(default_factory=ScorerConfig)
    latent: LatentPredictorConfig = field(default_factory=LatentPredictorConfig)
    cem: CemConfig = field(default_factory=CemConfig)
    horizons: tuple = HORIZONS
    k_values: tuple = (1, 5, 16)
    cem_horizons: tuple = (4, 5, 6)
    eval_queries: int = 300
    cem_queries: int = 64
    scorer_queries: int = 400
    scorer_holdout: float = 0.2
    probe_pairs: int = 2000
    seed: int = 0
    out_dir: str = "runs/default"

    _sections = {"world": WorldConfig, "align": AlignConfig, "predictor": PredictorConfig,
                 "scorer": ScorerConfig, "latent": LatentPredictorConfig, "cem": CemConfig}

    def validate(self) -> None:
        self.world.validate()
        self.cem.validate()
        w = self.world
        if not self.align.d == self.predictor.d == w.d or self.predictor.d_v != w.d_v:
            raise ConfigError(f"embedding widths disagree: world d={w.d} d_v={w.d_v}, align d={self.align.d}, "
                              f"predictor d={self.predictor.d} d_v={self.predictor.d_v}")
        if not set(self.horizons) <= set(HORIZONS) or not set(self.cem_horizons) <= set(self.horizons):
            raise ConfigError(f"horizons must lie in {HORIZONS} and include the CEM horizons")
        if sorted(self.k_values) != list(self.k_values) or max(self.k_values) > self.scorer.k:
            raise ConfigError("k_values must be ascending and at most scorer.k")
        if not 0 < self.scorer_holdout < 1:
            raise ConfigError("scorer_holdout must lie in (0, 1)")
        if not 0 <= self.goal_dropout <= 1:
            raise ConfigError("goal_dropout must lie in [0, 1]")

    def with_seed(self, seed: int) -> "RunConfig":
        """Copy with every component seed set to ``seed``."""
        sections = {k: dataclasses.replace(getattr(self, k), seed=seed) for k in self._sections}
        return dataclasses.replace(self, seed=seed, **sections)

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            out[f.name] = asdict(v) if dataclasses.is_dataclass(v) else (list(v) if isinstance(v, tuple) else v)
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        base = cls()
        kw = {}
        for k, v in obj.items():
            if k in cls._sections:
                if not isinstance(v, dict):
                    raise ConfigError(f"section {k!r} must be an object")
                try:
                    kw[k] = dataclasses.replace(getattr(base, k), **v)
                except TypeError as e:
                    raise ConfigError(f"section {k!r}: {e}") from None
            elif isinstance(getattr(base, k), tuple):
                kw[k] = tuple(v)
            else:
                kw[k] = v
        return dataclasses.replace(base, **kw)

    @classmethod
    def load(cls, path) -> "RunConfig":
        text = Path(path).read_text()
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as e:
            line = text.splitlines()[e.lineno - 1] if e.lineno - 1 < len(text.splitlines()) else ""
            raise ConfigError(f"{path}:{e.lineno}:{e.colno}: {e.msg}\n    {line}") from None
        if not isinstance(obj, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(obj)


# -- artifacts ----------------------------------------------------------------------


class Run:
    """Paths and lazily loaded artifacts of one run directory."""

    def __init__(self, cfg: RunConfig):
        cfg.validate()
        self.cfg = cfg
        self.root = Path(cfg.out_dir)
        self._cache: dict = {}

    def path(self, name: str) -> Path:
        return self.root / name

    def require(self, name: str) -> Path:
        p = self.path(name)
        if not p.exists():
            raise PrerequisiteError(f"missing prerequisite artifact {p}; run the earlier stages first")
        return p

    @property
    def corpus(self):
        if "corpus" not in self._cache:
            self.require("data/manifest_train.jsonl")
            corpus = load_manifest(self.path("data"))
            prep, _ = load_tensors(self.require("prep.bin"))
            corpus.controls = prep["controls"]
            self._cache["corpus"] = corpus
        return self._cache["corpus"]

    @property
    def select_takes(self) -> np.ndarray:
        prep, _ = load_tensors(self.require("prep.bin"))
        return prep["select_takes"].astype(int)

    @property
    def seg_z(self) -> np.ndarray:
        if "seg_z" not in self._cache:
            self._cache["seg_z"] = load_tensors(self.require("embeddings.bin"))[0]["z"]
        return self._cache["seg_z"]

    def train_windows(self, horizon: int, part: str) -> np.ndarray:
        """Training windows of the predictor-fit takes or the scorer-holdout takes."""
        w = self.corpus.windows("train", horizon)
        held = np.isin(self.corpus.take[w[:, 0]], self.select_takes)
        return w[held] if part == "select" else w[~held]

    def encoder(self) -> TrajEncoder:
        return _load(self.require("ckpt/align.bin"), lambda m: TrajEncoder(
            np.random.default_rng(0), m["width"], m["layers"], m["heads"], m["d"]))

    def predictor(self, name: str) -> PredictorModel:
        return _load(self.require(f"ckpt/predictor_{name}.bin"),
                     lambda m: PredictorModel(np.random.default_rng(0), PredictorConfig(**m)))

    def latent_predictor(self) -> LatentPredictor:
        return _load(self.require("ckpt/latent.bin"), lambda m: LatentPredictor(
            np.random.default_rng(0), LatentPredictorConfig(**m["cfg"]), m["d_v"]))

    def scorer(self) -> ScorerModel:
        return _load(self.require("ckpt/scorer.bin"), lambda m: ScorerModel(
            np.random.default_rng(0), ScorerConfig(**m["cfg"]), m["d"], m["d_v"]))

    def bank(self):
        saved, _ = load_tensors(self.require("bank.bin"))
        windows = {int(k.split("_")[1]): v.astype(int) for k, v in saved.items()}
        return build_bank(self.corpus, self.seg_z, windows)


def _load(path: Path, build):
    params, extra, meta = load_module_state(path)
    model = build(meta)
    model.load_state_dict(params)
    if extra:
        model.load_buffers(extra)
    return model.eval()


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    def fmt(v):
        return f"{v:.6f}" if isinstance(v, float) else str(v)

    lines = [",".join(header)] + [",".join(fmt(v) for v in r) for r in rows]
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")


def _subsample(windows: np.ndarray, n: int, seed: int) -> np.ndarray:
    if n <= 0 or len(windows) <= n:
        return windows
    idx = np.sort(np.random.default_rng(seed).choice(len(windows), size=n, replace=False))
    return windows[idx]


# -- stages -------------------------------------------------------------------------


def stage_generate(run: Run) -> None:
    corpus = generate_corpus(run.cfg.world)
    emit_manifest(corpus, run.path("data"))


def stage_preprocess(run: Run) -> None:
    """Resample controls from the pose streams and pick the scorer-holdout takes."""
    corpus = load_manifest(run.require("data"))
    streams = {tk.take_id: tk.poses for tk in corpus.takes}
    controls = np.stack([
        geometry.resample_controls(streams[int(t)], tuple(iv)).controls
        for t, iv in zip(corpus.take, corpus.interval)
    ]) if len(corpus) else np.zeros((0, geometry.KNOTS, 6))
    train_takes = np.array(sorted(tk.take_id for tk in corpus.takes if tk.split == "train"))
    rng = np.random.default_rng(run.cfg.seed)
    n_sel = max(1, int(round(run.cfg.scorer_holdout * len(train_takes))))
    select = np.sort(rng.choice(train_takes, size=n_sel, replace=False))
    save_tensors(run.path("prep.bin"), {"controls": controls, "select_takes": select.astype(float)})
    run._cache.clear()


def stage_train_align(run: Run) -> None:
    corpus = run.corpus
    rows = corpus.rows("train")
    emb = corpus.bank.embeddings[corpus.label]
    enc = train_alignment(corpus.controls[rows], emb[rows], corpus.text_id[rows], run.cfg.align)
    a = run.cfg.align
    save_module(run.path("ckpt/align.bin"), enc, meta={"width": a.width, "layers": a.layers, "heads": a.heads,
                                                        "d": a.d}, extra=enc.buffers())
    save_tensors(run.path("embeddings.bin"), {"z": enc.encode(corpus.controls)})
    run._cache.pop("seg_z", None)
    test = corpus.rows("test")
    log.info("alignment test R@1 %.3f", retrieval_recall_at_1(enc, corpus.controls[test], corpus.text_id[test],
                                                              corpus.bank))


def stage_train_predictor(run: Run) -> None:
    corpus, seg_z, cfg = run.corpus, run.seg_z, run.cfg
    windows = {h: run.train_windows(h, "fit") for h in HORIZONS}
    variants = {
        "traj": dataclasses.replace(cfg.predictor, use_traj=True, goal_dropout=0.0),
        "notraj": dataclasses.replace(cfg.predictor, use_traj=False, goal_dropout=0.0),
        "notraj_goaldrop": dataclasses.replace(cfg.predictor, use_traj=False, goal_dropout=cfg.goal_dropout),
    }
    for name, pc in variants.items():
        t0 = time.perf_counter()
        model = train_predictor(corpus, seg_z, pc, windows)
        save_module(run.path(f"ckpt/predictor_{name}.bin"), model, meta=asdict(pc), extra=model.buffers())
        log.info("predictor %s trained in %.1fs", name, time.perf_counter() - t0)
    latents = corpus.latents
    lat = train_latent_predictor(latents, corpus.controls, {h: windows[h] for h in cfg.cem_horizons}, cfg.latent)
    save_module(run.path("ckpt/latent.bin"), lat, meta={"cfg": asdict(cfg.latent), "d_v": latents.shape[1]},
                extra=lat.buffers())


def stage_build_bank(run: Run) -> None:
    corpus = run.corpus
    save_tensors(run.path("bank.bin"), {f"h_{h}": corpus.windows("train", h).astype(float) for h in HORIZONS})


def stage_train_scorer(run: Run) -> None:
    corpus, seg_z, cfg = run.corpus, run.seg_z, run.cfg
    bank = run.bank()
    traj, notraj = run.predictor("traj"), run.predictor("notraj")
    sets = []
    for h in cfg.horizons:
        w = _subsample(run.train_windows(h, "select"), cfg.scorer_queries, cfg.seed * 1000 + h)
        sets.append(build_candidates(corpus, seg_z, bank, traj, notraj, w, cfg.scorer.k,
                                     exclude_own_take=True, with_utility=True))
    d = seg_z.shape[1]
    scorer = train_scorer(sets, cfg.scorer, d, corpus.config.d_v)
    save_module(run.path("ckpt/scorer.bin"), scorer, meta={"cfg": asdict(cfg.scorer), "d": d,
                                                           "d_v": corpus.config.d_v})


def _gt_sequences(batch: PlanBatch) -> list[np.ndarray]:
    return [np.concatenate([[batch.tid_start[i]], batch.tid_mid[i, :h - 2], [batch.tid_goal[i]]])
            for i, h in enumerate(batch.horizon)]


def _score(p: dict, batch: PlanBatch, bank) -> list[dict]:
    ranked = plan_rankings(p, batch.horizon, bank, k=5)
    return [metrics.sample_metrics(metrics.SequencePrediction(r, g)) for r, g in zip(ranked, _gt_sequences(batch))]


def _selection_dict(sel) -> dict:
    return {"start": sel.start, "goal": sel.goal, "mid": sel.mid}


def stage_eval(run: Run) -> dict:
    """Per task mode and horizon, score every method and write one report CSV."""
    corpus, seg_z, cfg = run.corpus, run.seg_z, run.cfg
    bank = run.bank()
    models = {name: run.predictor(name) for name in PREDICTORS}
    scorer = run.scorer()
    enc, lat = run.encoder(), run.latent_predictor()
    train_ctrl = corpus.controls[corpus.rows("train")].reshape(-1, geometry.KNOTS * 6)
    ctrl_mean, ctrl_std = train_ctrl.mean(0), train_ctrl.std(0)
    summary: dict = {"reports": {}, "gate_rate": {}, "pool_recall": {}}
    gate_rows, recall_rows = [], []
    for mode in TASK_MODES:
        masked = mode == "anticipation"
        for h in cfg.horizons:
            w = _subsample(corpus.windows("test", h), cfg.eval_queries, cfg.seed * 1000 + h)
            batch = make_batch(corpus, list(w), seg_z, goal_masked=masked)
            preds = {
                "No-Traj": predict(models["notraj"], batch),
                "No-Traj-GD": predict(models["notraj_goaldrop"], batch),
                "Oracle": predict(models["traj"], batch),
                "Oracle-Zeroed": predict(models["traj"], batch.replace(z_mid=np.zeros_like(batch.z_mid))),
            }
            cs = build_candidates(corpus, seg_z, bank, models["traj"], models["notraj"], w, cfg.scorer.k,
                                  goal_masked=masked, with_utility=True)
            sel = gate_then_rank_infer(scorer, cs)
            preds["Scorer"] = _selection_dict(sel)
            for k in cfg.k_values:
                preds[f"Pool-Oracle@{k}"] = _selection_dict(pool_oracle(cs.subset(k)))
            results = {name: _score(p, batch, corpus.bank) for name, p in preds.items()}
            if not masked and h in cfg.cem_horizons:
                cw = _subsample(w, cfg.cem_queries, cfg.seed * 1000 + 100 + h)
                cb = make_batch(corpus, list(cw), seg_z)
                ctrl, _ = cem_plan(lat, corpus.latents[cw[:, 0]], corpus.latents[cw[:, -1]], h, ctrl_mean,
                                   ctrl_std, dataclasses.replace(cfg.cem, seed=cfg.cem.seed * 1000 + h))
                pc = predict(models["traj"], cb.replace(z_mid=enc.encode(ctrl)))
                results["CEM"] = _score(pc, cb, corpus.bank)
                results["No-Traj@CEM-queries"] = _score(predict(models["notraj"], cb), cb, corpus.bank)
                results["Oracle@CEM-queries"] = _score(predict(models["traj"], cb), cb, corpus.bank)
            lines = []
            for name, res in results.items():
                rep = metrics.aggregate([(h, m) for m in res], name)
                summary["reports"][(mode, h, name)] = rep.rows[h]
                lines += rep.to_csv().strip().splitlines()[(1 if lines else 0):]
            run.path(f"report_{mode}_{h}.csv").write_text("\n".join(lines) + "\n")
            rate = float(sel.gate_positive.mean())
            summary["gate_rate"][(mode, h)] = rate
            gate_rows.append([mode, h, rate, len(w)])
            pr = pool_recall(cs, batch.tid_mid[:, :h - 2])
            summary["pool_recall"][(mode, h)] = pr
            recall_rows.append([mode, h, cfg.scorer.k, pr["same_step"], pr["any_step"]])
    _write_csv(run.path("gate_rates.csv"), ["mode", "horizon", "gate_rate", "n"], gate_rows)
    _write_csv(run.path("pool_recall.csv"), ["mode", "horizon", "k", "same_step", "any_step"], recall_rows)
    return summary


def stage_diagnose(run: Run) -> dict:
    """Latent geometry, monotonicity, score-accuracy correlation and conditioning sensitivity."""
    corpus, seg_z, cfg = run.corpus, run.seg_z, run.cfg
    out: dict = {}
    test = corpus.rows("test")
    z = corpus.latents
    geo = pair_geometry_probe(z[test], corpus.take[test], corpus.segment_index[test], corpus.action[test],
                              n_pairs=cfg.probe_pairs, seed=cfg.seed)
    _write_csv(run.path("diagnostics_geometry.csv"), ["pair_type", "l1", "cosine", "n"],
               [[r["pair_type"], r["l1"], r["cosine"], r["n"]] for r in geo])
    out["geometry"] = {r["pair_type"]: r for r in geo}

    mono = {}
    for h in HORIZONS:
        w = corpus.windows("test", h)
        mono[h] = monotonicity_fraction(z[w])
    _write_csv(run.path("diagnostics_monotonicity.csv"), ["horizon", "fraction", "n"],
               [[h, f, len(corpus.windows("test", h))] for h, f in mono.items()])
    out["monotonicity"] = mono

    # l1-to-goal of retrieved candidates against their actual mid accuracy
    bank = run.bank()
    traj, notraj, lat = run.predictor("traj"), run.predictor("notraj"), run.latent_predictor()
    corr_rows = []
    out["correlation"] = {}
    for h in cfg.cem_horizons:
        w = _subsample(corpus.windows("test", h), cfg.cem_queries, cfg.seed * 1000 + 100 + h)
        cs = build_candidates(corpus, seg_z, bank, traj, notraj, w, cfg.scorer.k, with_utility=True)
        hb = bank[h]
        q, k = cs.indices.shape
        ctrl = hb.mid_controls[cs.indices.reshape(-1)]
        zs, zg = np.repeat(z[w[:, 0]], k, axis=0), np.repeat(z[w[:, -1]], k, axis=0)
        score = l1_to_goal(lat.predict(zs, zg, ctrl, h)[:, -1], zg)
        base = make_batch(corpus, list(w), seg_z)
        _, comp = candidate_utility(cs.cand_mid, base.tid_mid[:, None, :h - 2], base.target_mid[:, None, :h - 2],
                                    corpus.bank)
        r, (lo, hi) = score_accuracy_correlation(score, comp["r1"].reshape(-1))
        out["correlation"][h] = r
        corr_rows.append([h, r, lo, hi, q * k])
    _write_csv(run.path("diagnostics_correlation.csv"), ["horizon", "pearson_r", "ci_low", "ci_high", "n"],
               corr_rows)

    # eval-loss sensitivity: shuffled mid trajectories versus redrawn token noise
    fresh = generate_corpus(corpus.config, noise_stream=1)
    base_l, shuf_l, noise_l, n = 0.0, 0.0, 0.0, 0
    rng = np.random.default_rng(cfg.seed)
    for h in HORIZONS:
        w = _subsample(corpus.windows("test", h), cfg.eval_queries, cfg.seed * 1000 + h)
        batch = make_batch(corpus, list(w), seg_z)
        perm = rng.permutation(len(w))
        shuffled = batch.replace(z_mid=batch.z_mid[perm])
        refreshed = batch.replace(start_tokens=fresh.tokens[w[:, 0]], goal_tokens=fresh.tokens[w[:, -1]])
        base_l += eval_loss(traj, batch) * len(w)
        shuf_l += eval_loss(traj, shuffled) * len(w)
        noise_l += eval_loss(traj, refreshed) * len(w)
        n += len(w)
    base_l, shuf_l, noise_l = base_l / n, shuf_l / n, noise_l / n
    out["conditioning"] = {"base": base_l, "shuffled": shuf_l, "refreshed_noise": noise_l}
    _write_csv(run.path("diagnostics_conditioning.csv"), ["condition", "eval_loss", "delta"],
               [["base", base_l, 0.0], ["shuffled_trajectories", shuf_l, shuf_l - base_l],
                ["refreshed_token_noise", noise_l, noise_l - base_l]])
    return out


STAGE_FUNCS = {
    "generate": stage_generate,
    "preprocess": stage_preprocess,
    "train-align": stage_train_align,
    "train-predictor": stage_train_predictor,
    "build-bank": stage_build_bank,
    "train-scorer": stage_train_scorer,
    "eval": stage_eval,
    "diagnose": stage_diagnose,
}


def run_pipeline(cfg: RunConfig, stages=STAGES) -> dict:
    """Run the requested stages in pipeline order; returns per-stage results."""
    unknown = set(stages) - set(STAGES)
    if unknown:
        raise ConfigError(f"unknown stages {sorted(unknown)}; choose from {', '.join(STAGES)}")
    run = Run(cfg)
    run.root.mkdir(parents=True, exist_ok=True)
    (run.root / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    results = {}
    for name in STAGES:
        if name not in stages:
            continue
        t0 = time.perf_counter()
        results[name] = STAGE_FUNCS[name](run)
        log.info("stage %s done in %.1fs", name, time.perf_counter() - t0)
    return results
