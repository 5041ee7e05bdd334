"""K-fold policy search.

For each fold a probe model is trained once on the model split (no
augmentation). Candidate policies are then scored by the loss the probe model
assigns to the augmented held-out split, with TPE proposing each next
candidate. The top-N policies of every fold are pooled into the final set.
"""

from __future__ import annotations

import abc
import json
import logging
import math
import os
import shlex
import shutil
import subprocess
import threading
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from .augment import Operation, PlacementConfig, Policy, augment_dataset, eligible_sources, pixel_rect
from .data_model import Dataset, Origin, write_manifest
from .errors import (EvaluatorFailure, EvaluatorProtocolError, NotEnoughTrials, ObjectiveFailure,
                     SchemaError, SmallAugError, TooFewImages)
from .tpe import POLICY_SPACE, Point, TpeConfig, Trial, optimize

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SearchConfig:
    num_search: int
    k_folds: int = 5
    top_n: int = 4
    seed: int = 0
    placement: PlacementConfig = field(default_factory=PlacementConfig)
    tpe: TpeConfig = field(default_factory=TpeConfig)
    workers: int = 1

    def __post_init__(self):
        if self.k_folds < 2:
            raise ValueError("k_folds must be >= 2")
        if self.num_search < 1:
            raise ValueError("num_search must be >= 1")
        if self.top_n < 1:
            raise ValueError("top_n must be >= 1")
        if self.top_n > self.num_search:
            raise ValueError(f"top_n ({self.top_n}) cannot exceed num_search ({self.num_search})")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    def echo(self) -> dict:
        return {
            "k_folds": self.k_folds, "num_search": self.num_search, "top_n": self.top_n,
            "seed": self.seed, "placement": asdict(self.placement), "tpe": asdict(self.tpe),
        }


@dataclass
class FoldPair:
    d_m: Dataset
    d_a: Dataset
    fold_index: int


def kfold_split(d: Dataset, k: int, seed: int) -> list[FoldPair]:
    """Shuffle image order with ``seed`` and cut it into ``k`` contiguous chunks.

    The first ``len(d) % k`` chunks get one extra image. Fold i holds chunk i
    out for augmentation and trains on the rest.
    """
    n = len(d)
    if k < 2:
        raise ValueError("k must be >= 2")
    if n < k:
        raise TooFewImages(f"{n} images cannot be split into {k} folds")
    perm = np.random.default_rng(seed).permutation(n)
    sizes = [n // k + (1 if i < n % k else 0) for i in range(k)]
    bounds = np.cumsum([0] + sizes)
    folds = []
    for i in range(k):
        held = set(perm[bounds[i]:bounds[i + 1]].tolist())
        d_a = [d.images[j] for j in perm[bounds[i]:bounds[i + 1]]]
        d_m = [d.images[j] for j in perm if j not in held]
        folds.append(FoldPair(d.subset(d_m), d.subset(d_a), i))
    return folds


# -- evaluators ---------------------------------------------------------------

class LossEvaluator(abc.ABC):
    """Boundary to the probe model: train once per fold, then score datasets.

    Lower loss means the dataset looks more like what the model was trained
    on. ``concurrent_loss`` says whether ``loss`` may be called from several
    threads on one model handle.
    """

    concurrent_loss: bool = False

    @abc.abstractmethod
    def train(self, d_m: Dataset, fold: int) -> Any: ...

    @abc.abstractmethod
    def loss(self, model: Any, d: Dataset) -> float: ...


@dataclass(frozen=True)
class OracleSpec:
    op: Operation
    p: float
    m: int
    sigma: float = 0.0
    w_op: float = 1.0
    w_p: float = 1.0
    w_m: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> OracleSpec:
        if not isinstance(d, dict):
            raise SchemaError("$", "oracle spec must be an object")
        target = Policy.from_dict(d)
        kwargs = {}
        for key in ("sigma", "w_op", "w_p", "w_m"):
            if key in d:
                v = d[key]
                if isinstance(v, bool) or not isinstance(v, (int, float)) or v < 0:
                    raise SchemaError(f"$.{key}", f"expected a non-negative number, got {v!r}")
                kwargs[key] = float(v)
        if "seed" in d:
            if isinstance(d["seed"], bool) or not isinstance(d["seed"], int) or d["seed"] < 0:
                raise SchemaError("$.seed", "expected a non-negative integer")
            kwargs["seed"] = d["seed"]
        return cls(target.op, target.p, target.m, **kwargs)


@dataclass
class PasteStats:
    """What an observer can read off an augmented dataset."""

    dominant_op: Operation | None
    applied_fraction: float
    mean_pastes: float


def _find_source(img, pasted, pool):
    cands = [s for s in pool if s.category == pasted.category
             and s.bbox.w == pasted.bbox.w and s.bbox.h == pasted.bbox.h]
    if len(cands) <= 1 or img.pixels is None:
        return cands[0] if cands else None
    px0, py0, px1, py1 = pixel_rect(pasted.bbox)
    target = img.pixels[py0:py1, px0:px1]
    for s in cands:
        x0, y0, x1, y1 = pixel_rect(s.bbox)
        if np.array_equal(img.pixels[y0:y1, x0:x1], target):
            return s
    return cands[0]


def paste_statistics(d: Dataset) -> PasteStats:
    """Infer operator, applied fraction and paste multiplicity from pasted instances alone.

    Each pasted object is traced back to its source by category, size and
    pixel content. Per image the operator is read from how many distinct
    sources were used relative to the eligible pool; images where single and
    all are indistinguishable (one eligible object) cast no vote.
    """
    votes: Counter = Counter()
    eligible_images = applied = total_pastes = total_sources = 0
    for img in d.images:
        pool = eligible_sources(img)
        pasted = [i for i in img.instances if i.origin is Origin.PASTED]
        if not pool:
            continue
        eligible_images += 1
        if not pasted:
            continue
        applied += 1
        if img.pixels is None:
            img = d.load(img)
        sources = {id(s): s for s in (_find_source(img, p, pool) for p in pasted) if s is not None}
        s, e = len(sources), len(pool)
        total_pastes += len(pasted)
        total_sources += max(s, 1)
        if s == 1 and e >= 2:
            votes[Operation.SINGLE] += 1
        elif 2 <= s < e:
            votes[Operation.MULTIPLE] += 1
        elif s == e and e >= 2:
            votes[Operation.ALL] += 1
    dominant = None
    if votes:
        top = max(votes.values())
        dominant = next(op for op in Operation if votes[op] == top)
    return PasteStats(
        dominant,
        applied / eligible_images if eligible_images else 0.0,
        total_pastes / total_sources if total_sources else 0.0,
    )


@dataclass
class OracleModel:
    spec: OracleSpec
    fold: int
    rng: np.random.Generator


class SyntheticOracle(LossEvaluator):
    """Stand-in for a trained detector with a planted best policy.

    loss = w_op * [dominant op != op*] + w_p * |applied fraction - p*|
           + w_m * |mean pastes per source - m*| / 2 + N(0, sigma)

    The statistics are measured on the augmented data (see
    ``paste_statistics``), never taken from the policy itself.
    """

    concurrent_loss = False

    def __init__(self, spec: OracleSpec):
        self.spec = spec

    def train(self, d_m: Dataset, fold: int) -> OracleModel:
        return OracleModel(self.spec, fold, np.random.default_rng([self.spec.seed, fold]))

    def loss(self, model: OracleModel, d: Dataset) -> float:
        spec = model.spec
        st = paste_statistics(d)
        value = (spec.w_op * float(st.dominant_op is not spec.op)
                 + spec.w_p * abs(st.applied_fraction - spec.p)
                 + spec.w_m * abs(st.mean_pastes - spec.m) / 2)
        if spec.sigma > 0:
            value += float(model.rng.normal(0.0, spec.sigma))
        return value


def synthetic_oracle(spec: OracleSpec) -> SyntheticOracle:
    return SyntheticOracle(spec)


@dataclass(frozen=True)
class SubprocessModel:
    path: str
    fold: int


class SubprocessEvaluator(LossEvaluator):
    """Delegates training and scoring to external commands.

    Both commands receive a dataset manifest through ``SMALLAUG_MANIFEST``.
    The train command also gets ``SMALLAUG_FOLD`` and an output directory in
    ``SMALLAUG_OUT`` and must print the model artifact path as its last stdout
    line. The loss command gets ``SMALLAUG_MODEL`` and must print
    ``{"loss": <finite float>}`` as its last stdout line.
    """

    concurrent_loss = True

    def __init__(self, train_cmd: str, loss_cmd: str, workdir: Path | str, timeout: float | None = None):
        self.train_cmd = shlex.split(train_cmd)
        self.loss_cmd = shlex.split(loss_cmd)
        self.workdir = Path(workdir)
        self.timeout = timeout
        self._lock = threading.Lock()
        self._calls: Counter = Counter()

    def _run(self, cmd, env_extra):
        env = dict(os.environ, **env_extra)
        try:
            proc = subprocess.run(cmd, env=env, capture_output=True, text=True, timeout=self.timeout)
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise EvaluatorProtocolError(f"could not run {cmd[0]!r}: {exc}") from exc
        if proc.returncode != 0:
            raise EvaluatorProtocolError(f"{cmd[0]!r} exited with status {proc.returncode}", proc.stderr)
        lines = [ln for ln in proc.stdout.splitlines() if ln.strip()]
        if not lines:
            raise EvaluatorProtocolError(f"{cmd[0]!r} printed nothing on stdout", proc.stderr)
        return lines[-1].strip(), proc.stderr

    def train(self, d_m: Dataset, fold: int) -> SubprocessModel:
        base = self.workdir / f"fold_{fold}"
        manifest = write_manifest(d_m, base / "train")
        out = base / "model"
        out.mkdir(parents=True, exist_ok=True)
        last, _ = self._run(self.train_cmd, {
            "SMALLAUG_MANIFEST": str(manifest.resolve()),
            "SMALLAUG_FOLD": str(fold),
            "SMALLAUG_OUT": str(out.resolve()),
        })
        return SubprocessModel(last, fold)

    def loss(self, model: SubprocessModel, d: Dataset) -> float:
        with self._lock:
            n = self._calls[model.fold]
            self._calls[model.fold] += 1
        eval_dir = self.workdir / f"fold_{model.fold}" / f"eval_{n:05d}"
        manifest = write_manifest(d, eval_dir)
        last, stderr = self._run(self.loss_cmd, {
            "SMALLAUG_MANIFEST": str(manifest.resolve()),
            "SMALLAUG_MODEL": model.path,
            "SMALLAUG_FOLD": str(model.fold),
        })
        try:
            doc = json.loads(last)
        except json.JSONDecodeError:
            raise EvaluatorProtocolError(f"last stdout line is not JSON: {last!r}", stderr) from None
        if not isinstance(doc, dict) or "loss" not in doc:
            raise EvaluatorProtocolError(f'expected {{"loss": <float>}}, got {last!r}', stderr)
        value = doc["loss"]
        try:
            loss = float(value)
        except (TypeError, ValueError):
            raise EvaluatorProtocolError(f"loss is not a number: {value!r}", stderr) from None
        if isinstance(value, bool) or not math.isfinite(loss):
            raise EvaluatorProtocolError(f"non-finite loss {value!r}", stderr)
        shutil.rmtree(eval_dir, ignore_errors=True)
        return loss


def subprocess_evaluator(train_cmd: str, loss_cmd: str, workdir: Path | str) -> SubprocessEvaluator:
    return SubprocessEvaluator(train_cmd, loss_cmd, workdir)


# -- the search ---------------------------------------------------------------

def policy_from_point(point: Point) -> Policy:
    return Policy(Operation(point["op"]), float(point["p"]), int(point["m"]))


def fold_seed(seed: int, fold_index: int) -> int:
    return seed ^ fold_index


def search_fold(fold: FoldPair, evaluator: LossEvaluator, cfg: SearchConfig,
                rng: np.random.Generator | None = None,
                on_trial: Callable[[Trial], None] | None = None) -> list[Trial]:
    """Train the fold's probe model once, then run ``cfg.num_search`` TPE trials against it.

    Each candidate is applied to the held-out split with its probability
    realised exactly: round(p * |D_A|) randomly chosen images get the operator.
    """
    fseed = fold_seed(cfg.seed, fold.fold_index)
    if rng is None:
        rng = np.random.default_rng(fseed)
    try:
        model = evaluator.train(fold.d_m, fold.fold_index)
    except Exception as exc:
        raise EvaluatorFailure(fold.fold_index, None, [], exc) from exc

    counter = iter(range(cfg.num_search))

    def objective(point):
        trial = next(counter)
        aug_seed = int(np.random.SeedSequence([fseed, trial]).generate_state(1)[0])
        aug = augment_dataset(fold.d_a, policy_from_point(point), cfg.placement, aug_seed, gate="stratified")
        return evaluator.loss(model, aug.dataset)

    try:
        return optimize(POLICY_SPACE, objective, cfg.num_search, cfg.tpe, rng, on_trial)
    except ObjectiveFailure as exc:
        raise EvaluatorFailure(fold.fold_index, exc.index, exc.history, exc.__cause__) from exc


@dataclass(frozen=True)
class SelectedPolicy:
    policy: Policy
    fold: int
    trial: int
    loss: float

    def to_dict(self) -> dict:
        return {**self.policy.to_dict(), "provenance": {"fold": self.fold, "trial": self.trial, "loss": self.loss}}


def select_top_n(history: list[Trial], n: int, fold: int = 0) -> list[SelectedPolicy]:
    """The ``n`` lowest-loss trials (ties to the lower index), duplicates kept."""
    if n > len(history):
        raise NotEnoughTrials(f"asked for {n} policies from {len(history)} trials")
    ranked = sorted(history, key=lambda t: (t.loss, t.index))[:n]
    return [SelectedPolicy(policy_from_point(t.params), fold, t.index, t.loss) for t in ranked]


@dataclass
class FoldOutcome:
    fold: int
    history: list[Trial]
    error: BaseException | None = None


@dataclass
class PolicySet:
    entries: list[SelectedPolicy]
    folds: list[FoldOutcome] = field(default_factory=list)

    @property
    def policies(self) -> list[Policy]:
        return [e.policy for e in self.entries]

    @property
    def complete(self) -> bool:
        return all(f.error is None for f in self.folds)

    def __len__(self):
        return len(self.entries)


def loss_weighted_mean_m(entries: Sequence[SelectedPolicy]) -> float:
    """Mean paste count over selected policies, each weighted by exp(-loss).

    Exponential weights stay positive when noisy losses dip below zero.
    """
    if not entries:
        raise ValueError("no policies to average")
    losses = np.array([e.loss for e in entries])
    w = np.exp(-(losses - losses.min()))
    return float(np.dot(w, [e.policy.m for e in entries]) / w.sum())


class SearchIncomplete(SmallAugError):
    """One or more folds failed; ``policy_set`` holds what the others produced."""

    def __init__(self, policy_set: PolicySet):
        self.policy_set = policy_set
        failed = [f for f in policy_set.folds if f.error is not None]
        self.first_error = failed[0].error
        super().__init__(f"{len(failed)} fold(s) failed; first: {self.first_error}")


def run_search(d: Dataset, evaluator: LossEvaluator, cfg: SearchConfig, out_dir: Path | str | None = None,
               progress: Callable[[str], None] | None = None, timing: bool = False) -> PolicySet:
    """Full K-fold search. Writes outputs to ``out_dir`` when given.

    ``timing`` adds wall-clock seconds to the report, which makes it differ
    between otherwise identical runs. Raises ``SearchIncomplete`` after
    persisting partial results if any fold fails.
    """
    started = time.perf_counter()
    folds = kfold_split(d, cfg.k_folds, cfg.seed)

    def work(fold):
        try:
            hist = search_fold(fold, evaluator, cfg)
            outcome = FoldOutcome(fold.fold_index, hist)
        except EvaluatorFailure as exc:
            log.warning("fold %d failed: %s", fold.fold_index, exc)
            outcome = FoldOutcome(fold.fold_index, exc.history, exc)
        if progress is not None:
            best = min((t.loss for t in outcome.history), default=float("nan"))
            status = "ok" if outcome.error is None else "failed"
            progress(f"fold={outcome.fold} trials={len(outcome.history)} best_loss={best:.6f} status={status}")
        return outcome

    if cfg.workers > 1:
        with ThreadPoolExecutor(min(cfg.workers, len(folds))) as pool:
            outcomes = list(pool.map(work, folds))
    else:
        outcomes = [work(f) for f in folds]

    entries = []
    for o in outcomes:
        if o.error is None:
            entries.extend(select_top_n(o.history, cfg.top_n, o.fold))
    result = PolicySet(entries, outcomes)
    if out_dir is not None:
        write_search_outputs(result, cfg, Path(out_dir),
                             time.perf_counter() - started if timing else None)
    if not result.complete:
        raise SearchIncomplete(result)
    return result


def write_search_outputs(result: PolicySet, cfg: SearchConfig, out_dir: Path, wall_clock: float | None = None):
    out_dir.mkdir(parents=True, exist_ok=True)
    for o in result.folds:
        with open(out_dir / f"trials_fold{o.fold}.jsonl", "w") as fh:
            for t in o.history:
                fh.write(t.to_json() + "\n")
    (out_dir / "policies.json").write_text(json.dumps([e.to_dict() for e in result.entries], indent=2) + "\n")
    report = {
        "config": cfg.echo(),
        "complete": result.complete,
        "n_policies": len(result.entries),
        "folds": [{
            "fold": o.fold,
            "status": "ok" if o.error is None else "failed",
            "n_trials": len(o.history),
            "best_loss": min((t.loss for t in o.history), default=None),
            **({"error": str(o.error)} if o.error is not None else {}),
        } for o in result.folds],
    }
    if wall_clock is not None:
        report["wall_clock_s"] = wall_clock
    (out_dir / "search_report.json").write_text(json.dumps(report, indent=2) + "\n")
