"""Round loop: sample clients, train, inject fakes, aggregate, record."""

import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import _kernels
from .aggregation import (
    DEFENSES, RULES, FLDetector, ModelUpdate, ServerContext, flcert_groups, get_rule,
    plurality_vote,
)
from .attacks import ATTACKS, Attacker, AttackerView, AttackKnobs
from .core import check_finite, l2_norm, random_signs, sign_match_fraction
from .data import (
    Dataset, PartitionSpec, load_csv, make_blobs, partition_noniid, split_per_class,
)
from .learner import (
    ModelSpec, TrainConfig, evaluate, init_params, local_train, perturb_along_random_direction,
    predict,
)
from .rng import stream
from .tailored import (
    DetectionVerdict, detect, detection_accuracy, magnitude_feature, magnitude_round_scores,
    normalize_total_update, sign_flip_feature,
)

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass
class SimConfig:
    seed: int = 0
    # population
    n_genuine: int = 100
    fake_fraction: float = 0.2
    participation_rate: float = 0.1
    rounds: int = 500
    # data
    n_classes: int = 10
    feature_dim: int = 20
    per_client: int = 50
    test_per_class: int = 100
    root_size: int = 100
    spread: float = 1.5
    q: float = 0.5
    train_csv: str | None = None
    test_csv: str | None = None
    # model and local training
    hidden: tuple = (100,)
    learning_rate: float = 0.05
    local_epochs: int = 1
    batch_size: int = 32
    # attack
    attack: str = "none"
    c0: float = 8.0
    e: int = 50
    beta: float = 0.7
    c_floor: float = 0.5
    p: float = 0.01
    alpha: float = 0.0
    eps: float = 1e-6
    gamma: float = 0.0
    lambda_scale: float = 1e6
    unit_mode: str = "adaptive"
    scale_mode: str = "adaptive"
    # defense
    defense: str = "fedavg"
    m_assumed_mode: str = "expected"
    flcert_groups: int = 10
    flcert_base: str = "median"
    fldetector_rounds: int = 300
    fldetector_window: int = 10
    gmm_N: int = 20
    gmm_base: str = "median"
    normalize_base: str = "median"
    b: float | None = None

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.validate()

    @property
    def n_fake(self) -> int:
        return int(round(self.fake_fraction * self.n_genuine))

    def validate(self) -> None:
        def need(ok, key, msg):
            if not ok:
                raise ConfigError(f"{key}: {msg}")

        need(self.n_genuine >= 1, "n_genuine", "must be >= 1")
        need(0.0 <= self.fake_fraction <= 1.0, "fake_fraction", "must lie in [0, 1]")
        need(0.0 < self.participation_rate <= 1.0, "participation_rate", "must lie in (0, 1]")
        need(self.rounds >= 1, "rounds", "must be >= 1")
        need(self.n_classes >= 2, "n_classes", "must be >= 2")
        need(self.feature_dim >= 1, "feature_dim", "must be >= 1")
        need(self.per_client >= 1, "per_client", "must be >= 1")
        need(self.test_per_class >= 1, "test_per_class", "must be >= 1")
        need(self.spread >= 0, "spread", "must be >= 0")
        need(1.0 / self.n_classes - 1e-12 <= self.q <= 1.0, "q", "must lie in [1/C, 1]")
        need(self.learning_rate >= 0, "learning_rate", "must be >= 0")
        need(self.local_epochs >= 1, "local_epochs", "must be >= 1")
        need(self.batch_size >= 1, "batch_size", "must be >= 1")
        need(all(h >= 1 for h in self.hidden), "hidden", "layer widths must be >= 1")
        need(self.attack in ATTACKS, "attack", f"must be one of {', '.join(ATTACKS)}")
        need(self.defense in DEFENSES, "defense", f"must be one of {', '.join(DEFENSES)}")
        for key in ("flcert_base", "gmm_base", "normalize_base"):
            need(getattr(self, key) in RULES, key, f"must be one of {', '.join(RULES)}")
        need(self.m_assumed_mode in ("expected", "actual"), "m_assumed_mode",
             "must be 'expected' or 'actual'")
        need(self.c0 >= self.c_floor > 0, "c0", "must be >= c_floor > 0")
        need(self.e >= 1, "e", "must be >= 1")
        need(0 < self.beta < 1, "beta", "must lie in (0, 1)")
        need(0 < self.p < 1, "p", "must lie in (0, 1)")
        need(0 <= self.alpha <= 1, "alpha", "must lie in [0, 1]")
        need(self.gamma >= 0, "gamma", "must be >= 0")
        need(self.unit_mode in ("adaptive", "same"), "unit_mode", "must be adaptive or same")
        need(self.scale_mode in ("adaptive", "max"), "scale_mode", "must be adaptive or max")
        need(self.flcert_groups >= 1, "flcert_groups", "must be >= 1")
        need(self.fldetector_rounds >= 2, "fldetector_rounds", "must be >= 2")
        need(self.gmm_N >= 1, "gmm_N", "must be >= 1")
        if self.defense == "normalize-total":
            need(self.b is not None and self.b > 0, "b", "normalize-total needs b > 0")
        if self.attack != "none" and self.n_fake == 0:
            log.warning("attack %s configured with no fake clients", self.attack)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


CONFIG_KEYS = tuple(f.name for f in fields(SimConfig))


@dataclass
class RoundRecord:
    round: int
    testing_error: float
    sign_match: float
    total_update_norm: float
    flipping_rate: float | None
    fake_participants: int
    fake_accepted: int
    trust_genuine: float | None
    trust_fake: float | None
    c: float | None


RECORD_COLUMNS = tuple(f.name for f in fields(RoundRecord))


@dataclass
class RunResult:
    config: SimConfig
    records: list
    w0: np.ndarray
    w_final: np.ndarray
    s: np.ndarray
    spec: ModelSpec
    test: Dataset
    summary: dict = field(default_factory=dict)
    models: list | None = None      # FLCert group models

    @property
    def final_error(self) -> float:
        return self.records[-1].testing_error


class FlippingRateTracker:
    def __init__(self):
        self.last: dict[int, np.ndarray] = {}

    def update(self, round_updates: dict) -> float | None:
        """Mean fraction of flipped dims over clients seen before; None if nobody was."""
        rates = []
        for cid, g in round_updates.items():
            prev = self.last.get(cid)
            if prev is not None:
                rates.append(_kernels.count_flips(prev, g) / len(g))
            self.last[cid] = np.array(g, dtype=np.float64)
        return float(np.mean(rates)) if rates else None


def flipping_rate(tracker: FlippingRateTracker, round_updates: dict) -> float | None:
    return tracker.update(round_updates)


# ---------------------------------------------------------------------------
# environment
# ---------------------------------------------------------------------------

@dataclass
class Environment:
    clients: list
    test: Dataset
    root: Dataset
    spec: ModelSpec
    train_cfg: TrainConfig
    w0: np.ndarray
    s: np.ndarray
    w_target: np.ndarray


def build_environment(cfg: SimConfig) -> Environment:
    C = cfg.n_classes
    if cfg.train_csv:
        train = load_csv(cfg.train_csv, C)
        test = load_csv(cfg.test_csv, C) if cfg.test_csv else None
        if test is None:
            raise ConfigError("test_csv: required when train_csv is given")
        root = train.subset(stream(cfg.seed, "root").choice(len(train), cfg.root_size,
                                                             replace=False))
    else:
        train_per_class = -(-cfg.n_genuine * cfg.per_client // C)
        root_per_class = -(-cfg.root_size // C)
        full = make_blobs(C, train_per_class + cfg.test_per_class + root_per_class,
                          cfg.feature_dim, cfg.spread, cfg.seed)
        train, test, root = split_per_class(full, [train_per_class, cfg.test_per_class,
                                                   root_per_class])
    clients = partition_noniid(train, PartitionSpec(cfg.n_genuine, cfg.q, cfg.seed))
    spec = ModelSpec((train.feature_dim, *cfg.hidden, C))
    w0 = init_params(spec, stream(cfg.seed, "init"))
    s = random_signs(stream(cfg.seed, "sign-vector"), spec.n_params)
    w_target = init_params(spec, stream(cfg.seed, "mpaf-target"))
    tc = TrainConfig(cfg.learning_rate, cfg.local_epochs, cfg.batch_size)
    return Environment(clients, test, root, spec, tc, w0, s, w_target)


def _knobs(cfg: SimConfig) -> AttackKnobs:
    return AttackKnobs(c0=cfg.c0, e=cfg.e, beta=cfg.beta, c_floor=cfg.c_floor, p=cfg.p,
                       alpha=cfg.alpha, eps=cfg.eps, gamma=cfg.gamma,
                       lambda_scale=cfg.lambda_scale, unit_mode=cfg.unit_mode,
                       scale_mode=cfg.scale_mode)


# ---------------------------------------------------------------------------
# one training track
# ---------------------------------------------------------------------------

class Track:
    """One global model trained over a fixed client pool."""

    def __init__(self, cfg: SimConfig, env: Environment, rule: str, pool, phase: int,
                 participation: float):
        self.cfg, self.env, self.rule_name = cfg, env, rule
        self.rule = get_rule(rule)
        self.pool = np.array(sorted(pool), dtype=np.int64)
        self.phase = phase
        self.participation = participation
        self.w = env.w0.copy()
        self.w_prev = None
        self.agg_sum = np.zeros_like(env.w0)
        self.attacker = Attacker(cfg.attack, _knobs(cfg), env.s, env.w_target,
                                 rule_hint=rule)
        self.tracker = FlippingRateTracker()
        self.observers = []
        self.last_threshold = None

    @property
    def n_genuine(self):
        return self.cfg.n_genuine

    def _sample(self, t):
        k = max(1, math.ceil(self.participation * len(self.pool) - 1e-9))
        if k >= len(self.pool):
            return self.pool.copy()
        pick = stream(self.cfg.seed, "sample", self.phase, t).choice(len(self.pool), k,
                                                                     replace=False)
        return np.sort(self.pool[pick])

    def _m_assumed(self, k, n_fake_here):
        cfg = self.cfg
        if cfg.m_assumed_mode == "actual":
            m = n_fake_here
        else:
            m = int(round(k * cfg.n_fake / (cfg.n_genuine + cfg.n_fake)))
        return max(0, min(m, (k - 1) // 2))

    def step(self, t: int) -> dict:
        cfg, env = self.cfg, self.env
        chosen = self._sample(t)
        genuine = [int(c) for c in chosen if c < self.n_genuine]
        fakes = [int(c) for c in chosen if c >= self.n_genuine]
        g_updates = {}
        for cid in genuine:
            g_updates[cid] = local_train(self.w, env.clients[cid], env.train_cfg,
                                         stream(cfg.seed, "train", self.phase, cid, t),
                                         spec=env.spec)
        ctx = ServerContext(round=t, w_prev=self.w, root_dataset=env.root,
                            rng=stream(cfg.seed, "server", self.phase, t),
                            model_spec=env.spec, train_cfg=env.train_cfg)
        ctx.m_assumed = self._m_assumed(len(chosen), len(fakes))
        if genuine:
            self.last_threshold = float(np.mean([l2_norm(g) for g in g_updates.values()]))
        ctx.norm_threshold = self.last_threshold if self.last_threshold else 1.0

        def aggregate_fn(vectors):
            ups = [ModelUpdate(i, t, v) for i, v in enumerate(vectors)]
            c2 = ServerContext(t, self.w, self._m_assumed(len(ups), len(fakes)), env.root,
                               stream(cfg.seed, "server", self.phase, t), env.spec,
                               env.train_cfg, ctx.norm_threshold)
            return self.rule(ups, c2).aggregate

        f_updates = {}
        if self.attacker.name != "none" and (fakes or self.attacker.stateful):
            view = AttackerView(
                round=t, w_curr=self.w, w_prev=self.w_prev, fake_ids=fakes,
                genuine_updates=list(g_updates.values()) if self.attacker.needs_genuine else None,
                aggregate_fn=aggregate_fn if self.attacker.name in ("optfang",) else None,
                rng_for=lambda fid: stream(cfg.seed, "attack", self.phase, fid, t))
            if self.attacker.needs_genuine and not g_updates:
                f_updates = {fid: np.zeros_like(self.w) for fid in fakes}
            else:
                f_updates = self.attacker.craft(view)
        for fid in fakes:
            f_updates.setdefault(fid, np.zeros_like(self.w))
            check_finite(f_updates[fid], f"update of fake client {fid}")

        updates = [ModelUpdate(cid, t, g_updates[cid]) for cid in genuine]
        updates += [ModelUpdate(fid, t, f_updates[fid]) for fid in fakes]
        for obs in self.observers:
            obs(t, updates)
        outcome = self.rule(updates, ctx)

        self.w_prev = self.w
        self.w = self.w + outcome.aggregate
        self.agg_sum += outcome.aggregate
        check_finite(self.w, "global model")

        flip = self.tracker.update({fid: f_updates[fid] for fid in fakes})
        trust_g = trust_f = None
        if outcome.weights is not None:
            tg = [outcome.weights[c] for c in genuine]
            tf = [outcome.weights[c] for c in fakes]
            trust_g = float(np.mean(tg)) if tg else None
            trust_f = float(np.mean(tf)) if tf else None
        return dict(flipping_rate=flip, fake_participants=len(fakes),
                    fake_accepted=len(outcome.accepted_ids & set(fakes)),
                    trust_genuine=trust_g, trust_fake=trust_f,
                    c=self.attacker.state.c if self.attacker.stateful else None)

    def record(self, t, info, testing_error=None) -> RoundRecord:
        total = self.w - self.env.w0
        if testing_error is None:
            testing_error = evaluate(self.env.spec, self.w, self.env.test)
        return RoundRecord(round=t, testing_error=testing_error,
                           sign_match=sign_match_fraction(total, self.env.s),
                           total_update_norm=l2_norm(total), **info)


def _all_ids(cfg):
    return range(cfg.n_genuine + cfg.n_fake)


def _plain(cfg, env, rule, pool, phase=0):
    tr = Track(cfg, env, rule, pool, phase, cfg.participation_rate)
    records = []
    for t in range(1, cfg.rounds + 1):
        info = tr.step(t)
        records.append(tr.record(t, info))
    return tr, records


# ---------------------------------------------------------------------------
# loop-level defenses
# ---------------------------------------------------------------------------

def _run_flcert(cfg, env):
    groups = flcert_groups(list(_all_ids(cfg)), cfg.flcert_groups,
                           stream(cfg.seed, "flcert-groups"))
    tracks = [Track(cfg, env, cfg.flcert_base, grp, 10 + i, cfg.participation_rate)
              for i, grp in enumerate(groups)]
    records = []
    X, y = env.test.features, env.test.labels
    for t in range(1, cfg.rounds + 1):
        infos = [tr.step(t) for tr in tracks]
        votes = np.stack([predict(env.spec, tr.w, X) for tr in tracks])
        err = float(np.mean(plurality_vote(votes, env.spec.n_classes) != y))
        mean_w = np.mean([tr.w for tr in tracks], axis=0)
        total = mean_w - env.w0
        flips = [i["flipping_rate"] for i in infos if i["flipping_rate"] is not None]
        records.append(RoundRecord(
            round=t, testing_error=err, sign_match=sign_match_fraction(total, env.s),
            total_update_norm=l2_norm(total),
            flipping_rate=float(np.mean(flips)) if flips else None,
            fake_participants=sum(i["fake_participants"] for i in infos),
            fake_accepted=sum(i["fake_accepted"] for i in infos),
            trust_genuine=None, trust_fake=None, c=infos[0]["c"]))
    return tracks, records, groups


def _run_fldetector(cfg, env):
    det = FLDetector(window=cfg.fldetector_window)
    probe = Track(cfg, env, "median", _all_ids(cfg), phase=1, participation=1.0)
    probe.observers.append(lambda t, ups: det.observe(ups))
    for t in range(1, cfg.fldetector_rounds + 1):
        probe.step(t)
    flagged = det.detect()
    keep = [c for c in _all_ids(cfg) if c not in flagged]
    tr, records = _plain(cfg, env, "median", keep, phase=2)
    fakes = set(range(cfg.n_genuine, cfg.n_genuine + cfg.n_fake))
    verdict = {"detected_ids": sorted(flagged), "fakes_detected": len(flagged & fakes),
               "genuine_detected": len(flagged - fakes),
               "detection_accuracy": (len(flagged & fakes) / len(fakes)) if fakes else 1.0}
    return tr, records, verdict


def gmm_detection_phase(cfg, env, kind: str) -> DetectionVerdict:
    """Run ``gmm_N + 1`` full-participation rounds and split clients on their features."""
    N = cfg.gmm_N
    history: dict[int, list] = {}
    round_scores: list[dict] = []
    m = max(cfg.n_fake, 2)

    def watch(t, ups):
        if kind == "gmm-sign":
            for u in ups:
                history.setdefault(u.client_id, []).append(u.vector)
        else:
            ids = [u.client_id for u in ups]
            round_scores.append(magnitude_round_scores(ids, np.stack([u.vector for u in ups]), m))

    probe = Track(cfg, env, cfg.gmm_base, _all_ids(cfg), phase=3, participation=1.0)
    probe.observers.append(watch)
    for t in range(1, N + 2):
        probe.step(t)
    if kind == "gmm-sign":
        feats = {c: sign_flip_feature(h, N) for c, h in history.items()}
        feats = {c: float(v) for c, v in feats.items() if v is not None}
    else:
        ids = sorted({c for rs in round_scores for c in rs})
        feats = {c: magnitude_feature(round_scores, c, N) for c in ids}
    return detect(feats, "lower", rng=stream(cfg.seed, "gmm-fit"))


def _run_gmm(cfg, env, kind):
    verdict = gmm_detection_phase(cfg, env, kind)
    keep = [c for c in _all_ids(cfg) if c not in verdict.detected_ids]
    tr, records = _plain(cfg, env, cfg.gmm_base, keep, phase=4)
    fakes = range(cfg.n_genuine, cfg.n_genuine + cfg.n_fake)
    info = {"detected_ids": sorted(verdict.detected_ids),
            "clusters_separable": verdict.clusters_separable,
            "detection_accuracy": detection_accuracy(verdict, fakes),
            "genuine_detected": len([c for c in verdict.detected_ids if c < cfg.n_genuine])}
    if verdict.gmm is not None:
        info["gmm_means"] = list(verdict.gmm.means)
        info["gmm_stds"] = list(verdict.gmm.stds)
    return tr, records, info


# ---------------------------------------------------------------------------
# entry points
# ---------------------------------------------------------------------------

def run(cfg: SimConfig) -> RunResult:
    t0 = time.perf_counter()
    env = build_environment(cfg)
    summary: dict = {"d": env.spec.n_params, "n_fake": cfg.n_fake}
    models = None
    if cfg.defense in RULES:
        tr, records = _plain(cfg, env, cfg.defense, _all_ids(cfg))
        w_final = tr.w
        track = tr
    elif cfg.defense == "flcert":
        tracks, records, groups = _run_flcert(cfg, env)
        models = [tr.w for tr in tracks]
        w_final = np.mean(models, axis=0)
        track = tracks[0]
        summary["flcert_group_sizes"] = [len(g) for g in groups]
    elif cfg.defense == "fldetector":
        track, records, verdict = _run_fldetector(cfg, env)
        w_final = track.w
        summary["detection"] = verdict
    elif cfg.defense in ("gmm-sign", "gmm-magnitude"):
        track, records, verdict = _run_gmm(cfg, env, cfg.defense)
        w_final = track.w
        summary["detection"] = verdict
    else:  # normalize-total
        track, records = _plain(cfg, env, cfg.normalize_base, _all_ids(cfg))
        w_final = normalize_total_update(track.w, env.w0, cfg.b)
        summary["error_before_normalization"] = records[-1].testing_error
        summary["norm_before_normalization"] = records[-1].total_update_norm
        summary["error_after_normalization"] = evaluate(env.spec, w_final, env.test)
        summary["norm_after_normalization"] = l2_norm(w_final - env.w0)
    if track.attacker.stateful:
        summary["final_c"] = track.attacker.state.c
        summary["hypothesis_tests"] = [
            {"round": r, "matches": x, "tail": tail, "success": ok}
            for r, x, tail, ok in track.attacker.state.tests]
        if track.attacker.clamp_rates:
            summary["mean_clamped_fraction"] = float(np.mean(track.attacker.clamp_rates))
    last = records[-1]
    summary.update(final_error=last.testing_error, final_sign_match=last.sign_match,
                   final_norm=last.total_update_norm,
                   runtime_seconds=time.perf_counter() - t0)
    return RunResult(cfg, records, env.w0, w_final, env.s, env.spec, env.test, summary, models)


def degradation_probe(spec: ModelSpec, w_trained, s, norms, test: Dataset, seed: int = 0):
    """Test error after pushing the model ``norm`` along one fixed random direction."""
    out = []
    for nrm in norms:
        w = perturb_along_random_direction(w_trained, s, float(nrm), stream(seed, "probe"))
        out.append((float(nrm), evaluate(spec, w, test)))
    return out
