"""Episodic end-to-end training, evaluation and phase timing."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint
from .config import RunConfig, build_dataset, dump_config, resolve, resolve_for
from .episodes import ArrayDataset, Episode, RandomStream, sample_episode
from .errors import ContractError, DivergenceError
from .model import FastWeightModel, ModelSpec
from .optim import Adam

log = logging.getLogger(__name__)


@dataclass
class EpisodeMetrics:
    episode: int
    loss: float
    query_accuracy: float
    describe_time: float
    predict_time: float
    update_time: float

    def record(self, timings: bool = True) -> dict:
        ms = (lambda s: round(s * 1e3, 6)) if timings else (lambda s: None)
        return {"episode": self.episode, "loss": self.loss, "acc": self.query_accuracy,
                "t_describe_ms": ms(self.describe_time), "t_predict_ms": ms(self.predict_time),
                "t_update_ms": ms(self.update_time)}


@dataclass
class EvalResult:
    mean: float
    ci95: float
    accuracies: np.ndarray

    @property
    def n_episodes(self) -> int:
        return len(self.accuracies)

    def record(self) -> dict:
        return {"mean_acc": self.mean, "ci95": self.ci95, "episodes": self.n_episodes}


# -- sinks ------------------------------------------------------------------

class Sink:
    def emit(self, metrics: EpisodeMetrics, episode: Episode) -> None:
        pass

    def evaluation(self, record: dict) -> None:
        pass

    def close(self) -> None:
        pass


class JsonlSink(Sink):
    """Append-only JSON lines: one object per training episode.

    Timing fields are written as null unless ``timings`` is set, which keeps
    the file byte-reproducible for a fixed seed.
    """

    def __init__(self, path, timings: bool = False, eval_path=None):
        self.path = Path(path)
        self.timings = timings
        self._fh = self.path.open("a")
        self._eval = Path(eval_path).open("a") if eval_path else None

    def emit(self, metrics, episode):
        self._fh.write(json.dumps(metrics.record(self.timings)) + "\n")

    def evaluation(self, record):
        if self._eval:
            self._eval.write(json.dumps(record, sort_keys=True) + "\n")

    def close(self):
        self._fh.close()
        if self._eval:
            self._eval.close()


class ClassAuditSink(Sink):
    """Records every global class id fed to training and checks it against a ban list."""

    def __init__(self, forbidden=()):
        self.forbidden = set(forbidden)
        self.seen: set[int] = set()

    def emit(self, metrics, episode):
        ids = {c for c, _ in episode.description_ids} | {c for c, _ in episode.query_ids}
        bad = ids & self.forbidden
        if bad:
            raise ContractError(f"training episode touched held-out classes {sorted(bad)}")
        self.seen |= ids


class MemorySink(Sink):
    def __init__(self):
        self.metrics: list[EpisodeMetrics] = []
        self.evals: list[dict] = []

    def emit(self, metrics, episode):
        self.metrics.append(metrics)

    def evaluation(self, record):
        self.evals.append(record)


# -- single episodes --------------------------------------------------------

def _check_episode(model: FastWeightModel, ep: Episode) -> None:
    spec = model.spec
    if ep.n_way != spec.n_way or len(ep.description_y) != spec.n_way * spec.k_shot:
        raise ContractError(f"episode is {ep.n_way}-way with {len(ep.description_y)} "
                            f"description examples; model expects {spec.n_way}-way "
                            f"{spec.k_shot}-shot")


def episode_loss(model: FastWeightModel, ep: Episode, rng: RandomStream | None = None,
                 train: bool = False):
    """Reset, describe, predict; returns ``(summed query loss, logits)``."""
    model.reset()
    model.describe(ep.description_x, ep.description_y, rng, train=train)
    logits = model.predict(ep.query_x)
    return T.softmax_cross_entropy(logits, ep.query_y), logits


def train_batch(model: FastWeightModel, optimizer: Adam, episodes: Sequence[Episode],
                rng: RandomStream | None = None, *, start: int = 0,
                seed: int | None = None) -> list[EpisodeMetrics]:
    """One optimizer step on the mean gradient of ``episodes``."""
    optimizer.zero_grad()
    out = []
    for j, ep in enumerate(episodes):
        _check_episode(model, ep)
        t0 = time.perf_counter()
        tape = T.Tape()
        with tape:
            model.reset()
            model.describe(ep.description_x, ep.description_y, rng, train=True)
            t1 = time.perf_counter()
            logits = model.predict(ep.query_x)
            loss = T.softmax_cross_entropy(logits, ep.query_y)
        t2 = time.perf_counter()
        value = loss.item()
        if not math.isfinite(value):
            raise DivergenceError("non-finite training loss", episode=start + j, seed=seed)
        tape.backward(loss)
        acc = float(np.mean(logits.data.argmax(axis=1) == ep.query_y))
        out.append(EpisodeMetrics(start + j, value, acc, t1 - t0, t2 - t1,
                                  time.perf_counter() - t2))
    t3 = time.perf_counter()
    if len(episodes) > 1:
        for p in optimizer.params.values():
            if p.grad is not None:
                p.grad = p.grad / len(episodes)
    optimizer.step()
    out[-1].update_time += time.perf_counter() - t3
    return out


def train_episode(model: FastWeightModel, optimizer: Adam, episode: Episode,
                  rng: RandomStream | None = None, *, index: int = 0,
                  seed: int | None = None) -> EpisodeMetrics:
    return train_batch(model, optimizer, [episode], rng, start=index, seed=seed)[0]


def evaluate(model: FastWeightModel, pool, split, n_episodes: int, rng: RandomStream, *,
             n_query: int = 5) -> EvalResult:
    """Mean query accuracy over fresh episodes, with a normal-approximation 95% CI.

    Runs without a tape and without label noise; asserts the parameters are
    untouched.
    """
    if n_episodes <= 0:
        raise ContractError("evaluate needs at least one episode")
    before = model.checksum()
    spec = model.spec
    accs = np.empty(n_episodes)
    for i in range(n_episodes):
        ep = sample_episode(pool, split, spec.n_way, spec.k_shot, n_query, rng)
        model.reset()
        model.describe(ep.description_x, ep.description_y, None, train=False)
        logits = model.predict(ep.query_x)
        accs[i] = np.mean(logits.data.argmax(axis=1) == ep.query_y)
    model.reset()
    if model.checksum() != before:
        raise ContractError("evaluation mutated model parameters")
    ci = 1.96 * accs.std(ddof=1) / math.sqrt(n_episodes) if n_episodes > 1 else float("nan")
    return EvalResult(float(accs.mean()), float(ci), accs)


# -- full runs --------------------------------------------------------------

@dataclass
class RunResult:
    best: Checkpoint
    final: Checkpoint
    test: EvalResult | None
    val_history: list[dict] = field(default_factory=list)


def make_checkpoint(model, optimizer, streams: dict[str, RandomStream], episode: int,
                    meta: dict) -> Checkpoint:
    return Checkpoint(
        params={k: t.data.copy() for k, t in model.state().items()},
        optimizer=optimizer.state_dict(),
        rng_states={k: s.get_state() for k, s in streams.items()},
        spec=model.spec, episode=episode, meta=dict(meta))


def model_from_checkpoint(ckpt: Checkpoint) -> FastWeightModel:
    model = FastWeightModel(ckpt.spec)
    model.load_state(ckpt.params)
    return model


def train_run(cfg: RunConfig, sinks: Sequence[Sink] = (), *, data=None,
              resume: Checkpoint | None = None, best: Checkpoint | None = None,
              on_checkpoint=None) -> RunResult:
    """Train for ``cfg.train.n_episodes`` episodes with best-validation tracking.

    Every ``eval_every`` episodes the model is scored on the validation split;
    the best-scoring snapshot is kept and finally scored on the test split.
    ``resume`` continues from a saved state (pass the matching ``best`` to keep
    best-validation tracking exact).
    """
    cfg = resolve(cfg)
    pool, split = data if data is not None else build_dataset(cfg)
    cfg = resolve_for(cfg, pool)
    sched = cfg.train
    model = FastWeightModel(cfg.model)
    opt = Adam(model.parameters(), sched.alpha, sched.beta1, sched.beta2, sched.epsilon)
    streams = {"train": RandomStream(cfg.seed, "train-episodes"),
               "noise": RandomStream(cfg.seed, "label-noise")}
    meta = {"config": dump_config(cfg), "best_val": None, "best_episode": None}
    episode = 0
    if resume is not None:
        model.load_state(resume.params)
        opt.load_state_dict(resume.optimizer)
        for k, s in streams.items():
            s.set_state(resume.rng_states[k])
        episode = resume.episode
        meta.update(best_val=resume.meta.get("best_val"),
                    best_episode=resume.meta.get("best_episode"))
    best_ckpt = best if best is not None and resume is not None else None
    history: list[dict] = []

    def validate():
        nonlocal best_ckpt
        res = evaluate(model, pool, split.val_classes, sched.eval_episodes,
                       RandomStream(cfg.seed, "val"), n_query=sched.n_query)
        rec = {"episode": episode, "split": "val", **res.record()}
        history.append(rec)
        for s in sinks:
            s.evaluation(rec)
        if meta["best_val"] is None or res.mean > meta["best_val"]:
            meta.update(best_val=res.mean, best_episode=episode)
            best_ckpt = make_checkpoint(model, opt, streams, episode, meta)

    while episode < sched.n_episodes:
        n = min(sched.meta_batch, sched.n_episodes - episode)
        batch = [sample_episode(pool, split.train_classes, cfg.model.n_way, cfg.model.k_shot,
                                sched.n_query, streams["train"]) for _ in range(n)]
        metrics = train_batch(model, opt, batch, streams["noise"], start=episode,
                              seed=cfg.seed)
        for m, ep in zip(metrics, batch):
            for s in sinks:
                s.emit(m, ep)
        before, episode = episode, episode + n
        if (sched.eval_every and split.val_classes and sched.eval_episodes > 0
                and episode // sched.eval_every > before // sched.eval_every):
            validate()
        if (on_checkpoint and sched.checkpoint_every
                and episode // sched.checkpoint_every > before // sched.checkpoint_every):
            on_checkpoint(make_checkpoint(model, opt, streams, episode, meta))

    final = make_checkpoint(model, opt, streams, episode, meta)
    if best_ckpt is None:
        best_ckpt = final
    test = None
    if sched.test_episodes > 0 and split.test_classes:
        test = evaluate(model_from_checkpoint(best_ckpt), pool, split.test_classes,
                        sched.test_episodes, RandomStream(cfg.seed, "test"),
                        n_query=sched.n_query)
        for s in sinks:
            s.evaluation({"episode": best_ckpt.episode, "split": "test", **test.record()})
    return RunResult(best_ckpt, final, test, history)


# -- timing -----------------------------------------------------------------

@dataclass
class PhaseTiming:
    label: str
    describe_ms: float
    describe_std: float
    predict_ms: float
    predict_std: float
    update_ms: float
    update_std: float
    n_episodes: int

    def record(self) -> dict:
        return dict(self.__dict__)


def timing_bench(specs: Sequence[ModelSpec], n_episodes: int, *, warmup: int = 20,
                 labels: Sequence[str] | None = None, pool=None, n_query: int = 5,
                 seed: int = 0) -> list[PhaseTiming]:
    """Per-phase ms/task for each spec, excluding ``warmup`` leading episodes.

    Episodes are shared across specs so they differ only by model. Without a
    ``pool``, inputs are uniform noise of the specs' input shape.
    """
    labels = list(labels) if labels else [f"{s.binding}/{s.fast_placement}" for s in specs]
    rows = []
    for spec, label in zip(specs, labels):
        if pool is None:
            shape = tuple(spec.input_shape)
            gen = RandomStream(seed, "bench-data")
            bench_pool = ArrayDataset(gen.uniform(size=(2 * spec.n_way, spec.k_shot + n_query)
                                                  + shape))
        else:
            bench_pool = pool
        classes = list(range(bench_pool.n_classes))
        rng = RandomStream(seed, "bench-episodes")
        model = FastWeightModel(spec)
        opt = Adam(model.parameters())
        times = []
        for i in range(warmup + n_episodes):
            ep = sample_episode(bench_pool, classes, spec.n_way, spec.k_shot, n_query, rng)
            m = train_episode(model, opt, ep, rng, index=i)
            if i >= warmup:
                times.append((m.describe_time, m.predict_time, m.update_time))
        a = np.asarray(times) * 1e3
        rows.append(PhaseTiming(label, *(float(v) for pair in zip(a.mean(0), a.std(0))
                                         for v in pair), n_episodes))
    return rows


def format_timing_table(rows: Sequence[PhaseTiming]) -> str:
    head = f"{'model':<28}{'describe ms':>16}{'predict ms':>16}{'update ms':>16}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(f"{r.label:<28}{r.describe_ms:>9.3f} ±{r.describe_std:<6.3f}"
                     f"{r.predict_ms:>9.3f} ±{r.predict_std:<6.3f}"
                     f"{r.update_ms:>9.3f} ±{r.update_std:<6.3f}")
    return "\n".join(lines)
