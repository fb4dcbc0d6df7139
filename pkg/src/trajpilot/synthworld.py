"""Seeded synthetic egocentric world.

Each scenario owns a sparse Markov chain over a subset of actions, so a plan
is only partially determined by its endpoints. Every action has an archetype
head motion (a sum of sinusoidal primitives in its body frame) that is
integrated into one continuous pose stream per take; with probability
``traj_informativeness`` a segment moves like its own action, otherwise like
a random one. Visual tokens are a per-take scene latent plus a slow
within-take drift, an action latent, and per-token noise; with
``scene_variance > action_variance`` clips from one recording sit closer
together than clips of one action from different recordings.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from . import geometry
from .core.checkpoint import load_tensors, save_tensors

MANIFEST_FORMAT = "trajpilot-manifest"
MANIFEST_VERSION = 1
HORIZONS = tuple(range(3, 9))


@dataclass
class WorldConfig:
    n_scenarios: int = 4
    n_actions: int = 32
    n_paraphrases_per_action: int = 2
    n_takes: int = 400
    segments_per_take: int = 24
    d_v: int = 64
    n_tok: int = 16
    d: int = 32
    scene_variance: float = 4.0
    action_variance: float = 1.0
    token_noise: float = 8.0
    scene_drift: float = 0.02
    scenario_share: float = 0.5
    traj_noise: float = 0.002
    traj_informativeness: float = 0.9
    actions_per_scenario: int = 8
    branching: int = 2
    transition_concentration: float = 2.0
    paraphrase_spread: float = 0.25
    test_fraction: float = 0.25
    pose_rate: float = 30.0
    seed: int = 0

    def validate(self) -> None:
        if self.n_actions < 2 or self.n_scenarios < 1 or self.n_takes < 2:
            raise ValueError("need >= 2 actions, >= 1 scenario and >= 2 takes")
        if not 0.0 <= self.traj_informativeness <= 1.0:
            raise ValueError("traj_informativeness must lie in [0, 1]")
        if not 0.0 <= self.scenario_share <= 1.0:
            raise ValueError("scenario_share must lie in [0, 1]")
        if min(self.scene_variance, self.action_variance, self.token_noise, self.scene_drift,
               self.traj_noise) < 0:
            raise ValueError("variances and noise levels must be non-negative")
        if self.segments_per_take < max(HORIZONS):
            raise ValueError(f"segments_per_take must be >= {max(HORIZONS)}")
        if not 2 <= self.actions_per_scenario <= self.n_actions:
            raise ValueError("actions_per_scenario must lie in [2, n_actions]")
        if not 1 <= self.branching < self.actions_per_scenario:
            raise ValueError("branching must lie in [1, actions_per_scenario)")
        if self.n_paraphrases_per_action < 1:
            raise ValueError("need at least one paraphrase per action")


@dataclass
class ActionBank:
    labels: list[str]
    embeddings: np.ndarray  # (V, d), unit rows
    text_ids: np.ndarray  # (V,)

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=float)
        self.text_ids = np.asarray(self.text_ids, dtype=int)
        if len(self.labels) != len(self.embeddings) or len(self.labels) != len(self.text_ids):
            raise ValueError("bank fields differ in length")
        if not np.allclose(np.linalg.norm(self.embeddings, axis=1), 1.0, atol=1e-9):
            raise ValueError("bank embeddings must be unit-norm")

    @property
    def n_texts(self) -> int:
        return int(self.text_ids.max()) + 1

    def to_json(self) -> dict:
        return {"labels": self.labels, "embeddings": self.embeddings.tolist(),
                "text_ids": self.text_ids.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "ActionBank":
        return cls(list(obj["labels"]), np.array(obj["embeddings"]), np.array(obj["text_ids"]))


@dataclass
class Take:
    take_id: int
    scenario: int
    split: str
    poses: geometry.PoseStream
    scene: np.ndarray


@dataclass
class Corpus:
    """All segments of all takes, column-wise; row order is (take, segment_index)."""

    config: WorldConfig
    bank: ActionBank
    takes: list[Take]
    take: np.ndarray
    scenario: np.ndarray
    segment_index: np.ndarray
    action: np.ndarray
    label: np.ndarray
    interval: np.ndarray  # (N, 2)
    controls: np.ndarray  # (N, 16, 6)
    tokens: np.ndarray  # (N, n_tok, d_v)
    informative: np.ndarray  # (N,) bool
    split: np.ndarray  # (N,) "train" / "test"
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.take)

    @property
    def text_id(self) -> np.ndarray:
        return self.bank.text_ids[self.label]

    @property
    def latents(self) -> np.ndarray:
        """Mean-pooled visual latent per segment (the latent-space planner's z)."""
        return self.tokens.mean(axis=1)

    def rows(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.split == split)

    def windows(self, split: str, horizon: int) -> np.ndarray:
        """(n, H) segment rows of every length-H consecutive window in ``split``."""
        out = []
        for tk in self.takes:
            if tk.split != split:
                continue
            rows = np.flatnonzero(self.take == tk.take_id)
            for s in range(len(rows) - horizon + 1):
                out.append(rows[s:s + horizon])
        return np.array(out, dtype=int).reshape(-1, horizon)


# -- generation ---------------------------------------------------------------------


def _archetypes(rng: np.random.Generator, n_actions: int) -> list[dict]:
    arche = []
    for _ in range(n_actions):
        nt, nr = rng.integers(2, 4), rng.integers(2, 4)
        arche.append({
            "drift": rng.normal(0, 0.25, 3),
            "amp": rng.normal(0, 0.15, (nt, 3)),
            "freq": rng.choice([0.5, 1.0, 1.5, 2.0], nt),
            "phase": rng.uniform(0, 2 * np.pi, nt),
            "ramp": rng.normal(0, 0.3, 3),
            "ramp_amp": rng.normal(0, 0.3, (nr, 3)),
            "ramp_freq": rng.choice([0.5, 1.0, 1.5, 2.0], nr),
            "ramp_phase": rng.uniform(0, 2 * np.pi, nr),
        })
    return arche


def _local_motion(arch: dict, s: np.ndarray, jitter: dict) -> tuple[np.ndarray, np.ndarray]:
    """Body-frame translation and rotation vector at phase ``s`` in [0, 1]."""
    scale = jitter["scale"]
    ph = arch["phase"] + jitter["phase"][: len(arch["phase"])]
    arg = 2 * np.pi * np.outer(s, arch["freq"]) + ph
    trans = np.outer(s, arch["drift"]) + (np.sin(arg) - np.sin(ph)) @ arch["amp"]
    rph = arch["ramp_phase"] + jitter["rphase"][: len(arch["ramp_phase"])]
    rarg = 2 * np.pi * np.outer(s, arch["ramp_freq"]) + rph
    rot = np.outer(s, arch["ramp"]) + (np.sin(rarg) - np.sin(rph)) @ arch["ramp_amp"]
    return scale * trans, scale * rot


def _take_poses(rng, arche, motion_ids, durations, traj_noise, rate):
    """Continuous pose stream for one take; returns stream and segment intervals."""
    bounds = np.concatenate([[0.0], np.cumsum(durations)])
    n_samples = int(np.floor(bounds[-1] * rate)) + 1
    times = np.arange(n_samples) / rate
    if times[-1] < bounds[-1]:
        times = np.append(times, bounds[-1])
    seg_of = np.clip(np.searchsorted(bounds, times, side="right") - 1, 0, len(durations) - 1)
    trans = np.empty((len(times), 3))
    quat = np.empty((len(times), 4))
    base_p = rng.normal(0, 1.0, 3)
    base_r = Rotation.from_rotvec(rng.normal(0, 0.5, 3))
    for j, m in enumerate(motion_ids):
        jitter = {"scale": 1.0 + rng.normal(0, 0.08), "phase": rng.normal(0, 0.15, 3),
                  "rphase": rng.normal(0, 0.15, 3)}
        sel = np.flatnonzero(seg_of == j)
        s = (times[sel] - bounds[j]) / durations[j]
        s_all = np.append(s, 1.0)
        lt, lr = _local_motion(arche[m], s_all, jitter)
        rots = base_r * Rotation.from_rotvec(lr)
        pos = base_p + base_r.apply(lt)
        trans[sel] = pos[:-1]
        quat[sel] = rots[:-1].as_quat(canonical=True, scalar_first=True)
        base_p, base_r = pos[-1], rots[-1]
    if traj_noise > 0:
        trans = trans + rng.normal(0, traj_noise, trans.shape)
        noise = Rotation.from_rotvec(rng.normal(0, traj_noise, (len(times), 3)))
        quat = (Rotation.from_quat(quat, scalar_first=True) * noise).as_quat(canonical=True, scalar_first=True)
    intervals = np.stack([bounds[:-1], bounds[1:]], axis=1)
    return geometry.PoseStream(times, trans, quat), intervals


def segment_controls(stream: geometry.PoseStream, interval, rate: float) -> np.ndarray:
    """Resample only the poses around ``interval`` (the stream is long)."""
    lo = np.searchsorted(stream.t, interval[0] - 1.5 / rate)
    hi = np.searchsorted(stream.t, interval[1] + 1.5 / rate, side="right")
    sub = geometry.PoseStream(stream.t[lo:hi], stream.translation[lo:hi], stream.rotation[lo:hi])
    return geometry.resample_controls(sub, interval).controls


def _transitions(rng, cfg: WorldConfig):
    chains = []
    for _ in range(cfg.n_scenarios):
        acts = np.sort(rng.choice(cfg.n_actions, cfg.actions_per_scenario, replace=False))
        trans = np.zeros((cfg.n_actions, cfg.n_actions))
        for a in acts:
            succ = rng.choice(acts[acts != a], cfg.branching, replace=False)
            trans[a, succ] = rng.dirichlet(np.full(cfg.branching, cfg.transition_concentration))
        chains.append({"actions": acts, "transitions": trans})
    return chains


def _bank(rng, cfg: WorldConfig) -> ActionBank:
    centers = rng.normal(size=(cfg.n_actions, cfg.d))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    labels, emb, tids = [], [], []
    for a in range(cfg.n_actions):
        for p in range(cfg.n_paraphrases_per_action):
            v = centers[a] + cfg.paraphrase_spread * rng.normal(size=cfg.d) / np.sqrt(cfg.d)
            emb.append(v / np.linalg.norm(v))
            labels.append(f"action_{a:03d}/phrasing_{p}")
            tids.append(a)
    return ActionBank(labels, np.array(emb), np.array(tids))


def generate_corpus(cfg: WorldConfig, noise_stream: int = 0) -> Corpus:
    """Build the corpus; ``noise_stream`` redraws only the per-token visual noise."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    noise_rng = np.random.default_rng([cfg.seed, noise_stream])
    bank = _bank(rng, cfg)
    chains = _transitions(rng, cfg)
    arche = _archetypes(rng, cfg.n_actions)
    action_vis = rng.normal(0, np.sqrt(cfg.action_variance), (cfg.n_actions, cfg.d_v))
    scenario_vis = rng.normal(0, np.sqrt(cfg.scenario_share * cfg.scene_variance), (cfg.n_scenarios, cfg.d_v))
    order = rng.permutation(cfg.n_takes)
    n_test = max(1, int(round(cfg.test_fraction * cfg.n_takes)))
    test_takes = set(order[:n_test].tolist())

    cols = {k: [] for k in ("take", "scenario", "segment_index", "action", "label", "interval",
                            "controls", "tokens", "informative", "split")}
    takes = []
    for t in range(cfg.n_takes):
        scen = int(rng.integers(cfg.n_scenarios))
        chain = chains[scen]
        acts = [int(rng.choice(chain["actions"]))]
        for _ in range(cfg.segments_per_take - 1):
            row = chain["transitions"][acts[-1]]
            acts.append(int(rng.choice(cfg.n_actions, p=row)))
        informative = rng.random(cfg.segments_per_take) < cfg.traj_informativeness
        motion = [a if inf else int(rng.integers(cfg.n_actions)) for a, inf in zip(acts, informative)]
        durations = rng.uniform(1.0, 2.5, cfg.segments_per_take)
        stream, intervals = _take_poses(rng, arche, motion, durations, cfg.traj_noise, cfg.pose_rate)
        scene = scenario_vis[scen] + rng.normal(0, np.sqrt((1 - cfg.scenario_share) * cfg.scene_variance), cfg.d_v)
        drift_steps = rng.normal(0, np.sqrt(cfg.scene_drift * cfg.scene_variance),
                                 (cfg.segments_per_take, cfg.d_v))
        drift = np.cumsum(drift_steps, axis=0)
        split = "test" if t in test_takes else "train"
        takes.append(Take(t, scen, split, stream, scene))
        for j, a in enumerate(acts):
            base = scene + drift[j] + action_vis[a]
            cols["take"].append(t)
            cols["scenario"].append(scen)
            cols["segment_index"].append(j)
            cols["action"].append(a)
            cols["label"].append(a * cfg.n_paraphrases_per_action
                                 + int(rng.integers(cfg.n_paraphrases_per_action)))
            cols["interval"].append(intervals[j])
            cols["controls"].append(segment_controls(stream, intervals[j], cfg.pose_rate))
            cols["tokens"].append(base + noise_rng.normal(0, cfg.token_noise, (cfg.n_tok, cfg.d_v)))
            cols["informative"].append(bool(informative[j]))
            cols["split"].append(split)
    return Corpus(
        config=cfg, bank=bank, takes=takes,
        take=np.array(cols["take"], dtype=int),
        scenario=np.array(cols["scenario"], dtype=int),
        segment_index=np.array(cols["segment_index"], dtype=int),
        action=np.array(cols["action"], dtype=int),
        label=np.array(cols["label"], dtype=int),
        interval=np.array(cols["interval"], dtype=float).reshape(-1, 2),
        controls=np.array(cols["controls"], dtype=float).reshape(-1, geometry.KNOTS, 6),
        tokens=np.array(cols["tokens"], dtype=float).reshape(-1, cfg.n_tok, cfg.d_v),
        informative=np.array(cols["informative"], dtype=bool),
        split=np.array(cols["split"], dtype=object),
        meta={"chains": [{"actions": c["actions"].tolist(), "transitions": c["transitions"].tolist()}
                         for c in chains]},
    )


# -- manifests ---------------------------------------------------------------------


def _take_files(take_id: int) -> tuple[str, str]:
    return f"poses/take_{take_id:04d}.jsonl", f"visual/take_{take_id:04d}.bin"


def emit_manifest(corpus: Corpus, out_dir) -> list[Path]:
    """Write world.json, bank.json, per-take pose/visual files and one manifest per split."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "world.json").write_text(json.dumps({"config": asdict(corpus.config), "meta": corpus.meta},
                                               sort_keys=True))
    (out / "bank.json").write_text(json.dumps(corpus.bank.to_json()))
    written = []
    for tk in corpus.takes:
        pose_file, vis_file = _take_files(tk.take_id)
        geometry.write_poses_jsonl(out / pose_file, tk.poses)
        rows = np.flatnonzero(corpus.take == tk.take_id)
        save_tensors(out / vis_file, {"tokens": corpus.tokens[rows], "scene": tk.scene},
                     meta={"take": tk.take_id, "scenario": tk.scenario, "split": tk.split})
    for split in ("train", "test"):
        rows = corpus.rows(split)
        path = out / f"manifest_{split}.jsonl"
        with open(path, "w") as fh:
            fh.write(json.dumps({"format": MANIFEST_FORMAT, "version": MANIFEST_VERSION,
                                 "split": split, "count": int(len(rows))}) + "\n")
            for r in rows:
                pose_file, vis_file = _take_files(int(corpus.take[r]))
                fh.write(json.dumps({
                    "take": int(corpus.take[r]),
                    "scenario": int(corpus.scenario[r]),
                    "segment_index": int(corpus.segment_index[r]),
                    "action_id": int(corpus.action[r]),
                    "text_id": int(corpus.bank.text_ids[corpus.label[r]]),
                    "label_id": int(corpus.label[r]),
                    "interval": [float(x) for x in corpus.interval[r]],
                    "pose_file": pose_file,
                    "visual_token_file": vis_file,
                    "split": split,
                    "informative": bool(corpus.informative[r]),
                    "controls": corpus.controls[r].tolist(),
                }) + "\n")
        written.append(path)
    return written


def read_manifest(path) -> tuple[dict, list[dict]]:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty manifest (missing header)")
    header = json.loads(lines[0])
    if header.get("format") != MANIFEST_FORMAT:
        raise ValueError(f"{path}: not a {MANIFEST_FORMAT} file")
    return header, [json.loads(line) for line in lines[1:] if line.strip()]


def load_manifest(out_dir) -> Corpus:
    out = Path(out_dir)
    world = json.loads((out / "world.json").read_text())
    cfg = WorldConfig(**world["config"])
    bank = ActionBank.from_json(json.loads((out / "bank.json").read_text()))
    records = []
    for split in ("train", "test"):
        records += read_manifest(out / f"manifest_{split}.jsonl")[1]
    records.sort(key=lambda r: (r["take"], r["segment_index"]))
    takes, token_rows = [], []
    for take_id in sorted({r["take"] for r in records}):
        recs = [r for r in records if r["take"] == take_id]
        tensors, meta = load_tensors(out / recs[0]["visual_token_file"])
        poses = geometry.read_poses_jsonl(out / recs[0]["pose_file"])
        takes.append(Take(take_id, meta["scenario"], meta["split"], poses, tensors["scene"]))
        token_rows.append(tensors["tokens"])
    tokens = (np.concatenate(token_rows) if token_rows
              else np.zeros((0, cfg.n_tok, cfg.d_v)))
    return Corpus(
        config=cfg, bank=bank, takes=takes,
        take=np.array([r["take"] for r in records], dtype=int),
        scenario=np.array([r["scenario"] for r in records], dtype=int),
        segment_index=np.array([r["segment_index"] for r in records], dtype=int),
        action=np.array([r["action_id"] for r in records], dtype=int),
        label=np.array([r["label_id"] for r in records], dtype=int),
        interval=np.array([r["interval"] for r in records], dtype=float).reshape(-1, 2),
        controls=np.array([r["controls"] for r in records], dtype=float).reshape(-1, geometry.KNOTS, 6),
        tokens=tokens,
        informative=np.array([r["informative"] for r in records], dtype=bool),
        split=np.array([r["split"] for r in records], dtype=object),
        meta=world["meta"],
    )
