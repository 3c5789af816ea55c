"""Self-supervised adversarial training and attention pretraining."""

from __future__ import annotations

import dataclasses
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .. import checkpoint
from .. import diffcore as dc
from ..attention import msca_multiscale
from ..diffcore import NonFiniteError, Tape, Tensor
from ..params import Conv, map_tensors
from ..pyramid import LabelMap, extract_image_features, extract_label_features
from ..synthesis import (
    DiscParams,
    GeneratorParams,
    ModelConfig,
    discriminator_forward,
    generator_forward,
)
from .data import PatchPair, Scene, sample_patch_pair
from .losses import (
    ADVERSARIAL_FORMS,
    LossReport,
    LossWeights,
    adversarial_d,
    adversarial_g,
    loss_match,
    mean_report,
    sum_reports,
    weighted_generator_loss,
)
from .optim import Adam

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """A loss term became non-finite; a diagnostic dump was written."""


@dataclass
class TrainConfig:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    lambda_self: float = 1.0
    g_update_period: int = 5          # generator steps once every this many iterations
    epochs: int = 40
    phase_switch: int = 20            # first epoch with enlarged crops and the self task
    patch: int = 256
    adv_weight: float = 1.0           # 0 disables the discriminator entirely
    fm_weight: float = 10.0
    perc_weight: float = 10.0
    pixel_weight: float = 1.0
    adversarial: str = "hinge"
    batch: int = 1
    flip: bool = True
    max_steps: int = 0                # 0: run every epoch
    checkpoint_every: int = 0         # steps; 0: only the final checkpoint
    pretrain_epochs: int = 20
    model: str = "default"            # "default" or "tiny"
    classes: int = 8
    dtype: str = "float32"
    threads: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        positive = ("lr", "g_update_period", "epochs", "patch", "batch", "threads")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("lambda_self", "adv_weight", "fm_weight", "perc_weight", "pixel_weight",
                     "max_steps", "checkpoint_every", "pretrain_epochs", "phase_switch"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative, got {getattr(self, name)}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.phase_switch > self.epochs:
            raise ValueError(f"phase_switch ({self.phase_switch}) exceeds epochs ({self.epochs})")
        if self.adversarial not in ADVERSARIAL_FORMS:
            raise ValueError(f"adversarial must be one of {ADVERSARIAL_FORMS}")
        if self.model not in ("default", "tiny"):
            raise ValueError("model must be 'default' or 'tiny'")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Scaled-down schedule for 64x64 synthetic scenes.

        The toy backbone's features are not calibrated like a pretrained
        network's, so the perceptual weight drops to 1; batches of 4 average
        out the per-scene gradient noise of tiny datasets.
        """
        base = dict(patch=32, batch=4, epochs=64, phase_switch=32, pretrain_epochs=2, perc_weight=1.0)
        base.update(overrides)
        return cls(**base)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.adv_weight, self.fm_weight, self.perc_weight, self.pixel_weight)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype).type

    def model_config(self) -> ModelConfig:
        if self.model == "tiny":
            # three levels keep 16-pixel patches at a 2x2 coarsest map
            return ModelConfig.tiny(classes=self.classes, levels=3)
        return ModelConfig(classes=self.classes)

    # plain-text key=value form ------------------------------------------------

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in dataclasses.fields(self))

    @classmethod
    def from_text(cls, text: str, overrides: Sequence[str] = (),
                  base: "TrainConfig | None" = None) -> "TrainConfig":
        pairs = {}
        for lineno, line in enumerate(list(text.splitlines()) + list(overrides), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected key = value, got {line!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            pairs[key] = value
        return cls.from_pairs(pairs, base)

    @classmethod
    def from_pairs(cls, pairs: dict[str, str], base: "TrainConfig | None" = None) -> "TrainConfig":
        base = base or cls()
        known = {f.name: f for f in dataclasses.fields(cls)}
        values = dataclasses.asdict(base)
        for key, raw in pairs.items():
            if key not in known:
                raise ValueError(f"unknown config key {key!r}")
            values[key] = _coerce(raw, type(getattr(base, key)), key)
        return cls(**values)

    @classmethod
    def from_file(cls, path: str | os.PathLike, overrides: Sequence[str] = (),
                  base: "TrainConfig | None" = None) -> "TrainConfig":
        return cls.from_text(Path(path).read_text(), overrides, base)


def _coerce(raw: str, kind: type, key: str):
    if kind is bool:
        lowered = raw.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: not a boolean: {raw!r}")
    try:
        return kind(raw)
    except ValueError:
        raise ValueError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from None


# ---------------------------------------------------------------- state

@dataclass
class TrainState:
    g: GeneratorParams
    d: DiscParams | None
    opt_g: Adam
    opt_d: Adam | None
    step: int = 0                     # iterations completed

    @classmethod
    def init(cls, cfg: TrainConfig, seed: int = 0) -> "TrainState":
        dtype = cfg.np_dtype
        g = GeneratorParams.init(cfg.model_config(), seed=seed, dtype=dtype)
        use_d = cfg.adv_weight > 0
        d = DiscParams.init(cfg.classes, seed=seed + 1, dtype=dtype) if use_d else None
        opt = lambda: Adam(cfg.lr, cfg.beta1, cfg.beta2)  # noqa: E731
        return cls(g, d, opt(), opt() if use_d else None)

    def arrays(self) -> dict[str, np.ndarray]:
        out = {f"g.{k}": v.data for k, v in self.g.named().items()}
        out.update(self.opt_g.state("adam_g"))
        if self.d is not None:
            out.update({f"d.{k}": v.data for k, v in self.d.named().items()})
            out.update(self.opt_d.state("adam_d"))
        out["train.step"] = np.array([self.step], dtype=np.float64)
        return out

    def save(self, path: str | os.PathLike) -> None:
        checkpoint.save(path, self.arrays())

    @classmethod
    def load(cls, path: str | os.PathLike, cfg: TrainConfig) -> "TrainState":
        arrays = checkpoint.load(path)
        g = GeneratorParams.load(_strip(arrays, "g."))
        d_arrays = _strip(arrays, "d.")
        d = DiscParams.load(d_arrays) if d_arrays else None
        opt_g = Adam(cfg.lr, cfg.beta1, cfg.beta2)
        opt_g.load_state(arrays, "adam_g")
        opt_d = None
        if d is not None:
            opt_d = Adam(cfg.lr, cfg.beta1, cfg.beta2)
            opt_d.load_state(arrays, "adam_d")
        return cls(g, d, opt_g, opt_d, int(arrays["train.step"][0]))


def _strip(arrays: dict[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}


def load_generator(path: str | os.PathLike) -> GeneratorParams:
    """Generator weights from a training checkpoint or a bare generator checkpoint."""
    arrays = checkpoint.load(path)
    inner = _strip(arrays, "g.")
    return GeneratorParams.load(inner or arrays)


# ---------------------------------------------------------------- one iteration

@dataclass
class Sample:
    """One reconstruction problem: synthesize ``x_real`` with layout ``c_target``."""

    c_target: LabelMap
    x_exemplar: np.ndarray
    c_exemplar: LabelMap
    x_real: np.ndarray

    @classmethod
    def cross(cls, pair: PatchPair) -> "Sample":
        return cls(pair.c_p, pair.x_q, pair.c_q, pair.x_p)

    @classmethod
    def self_(cls, scene: Scene) -> "Sample":
        return cls(scene.label, scene.image, scene.label, scene.image)


def _task_losses(samples: Sequence[Sample], task: str, state: TrainState, cfg: TrainConfig,
                 scale: float, tape_g: Tape | None):
    """Generator/discriminator objectives of one task, averaged over its samples."""
    w = cfg.weights
    use_d = state.d is not None
    dtype = cfg.np_dtype
    g_terms, d_terms, reports = [], [], []
    for s in samples:
        x_real = Tensor(s.x_real, dtype=dtype)
        x_ex = Tensor(s.x_exemplar, dtype=dtype)
        if tape_g is not None:
            with tape_g:
                fake, _ = generator_forward(s.c_target, x_ex, s.c_exemplar, state.g)
        else:
            fake, _ = generator_forward(s.c_target, x_ex, s.c_exemplar, state.g)

        rep = LossReport(task, weights=w, scale=scale)
        real_feats = fake_feats = None
        fake_score = None
        if use_d:
            with Tape() as tape_d:
                real_score, real_feats = discriminator_forward(x_real, s.c_target, x_ex,
                                                               s.c_exemplar, state.d)
                fake_score_d, fake_feats_d = discriminator_forward(fake.detach(), s.c_target, x_ex,
                                                                   s.c_exemplar, state.d)
                d_real, d_fake = adversarial_d(real_score, fake_score_d, cfg.adversarial)
            d_terms.append((tape_d, dc.add(d_real, d_fake)))
            rep.d_real, rep.d_fake = float(d_real.data), float(d_fake.data)
            fake_score, fake_feats = fake_score_d, fake_feats_d
            real_feats = [f.detach() for f in real_feats]

        def generator_objective():
            nonlocal fake_score, fake_feats
            if use_d and tape_g is not None:
                fake_score, fake_feats = discriminator_forward(fake, s.c_target, x_ex,
                                                               s.c_exemplar, state.d)
            adv = adversarial_g(fake_score, cfg.adversarial) if use_d else None
            terms = loss_match(fake, x_real, fake_feats, real_feats, state.g.backbone)
            return adv, terms, weighted_generator_loss(adv, terms, w, scale)

        if tape_g is not None:
            with tape_g:
                adv, terms, g_loss = generator_objective()
        else:
            adv, terms, g_loss = generator_objective()
        g_terms.append(g_loss)
        rep.g_adv = 0.0 if adv is None else float(adv.data)
        rep.fm = 0.0 if terms.fm is None else float(terms.fm.data)
        rep.perc, rep.pixel = float(terms.perc.data), float(terms.pixel.data)
        reports.append(rep)
    return g_terms, d_terms, mean_report(task, reports)


def _mean(terms: Sequence[Tensor]) -> Tensor:
    out = terms[0]
    for t in terms[1:]:
        out = dc.add(out, t)
    return dc.mul(out, 1.0 / len(terms))


def train_iteration(cross: Sequence[Sample], selfs: Sequence[Sample], state: TrainState,
                    cfg: TrainConfig, update_g: bool) -> list[LossReport]:
    """Losses of both tasks, one discriminator update and (optionally) one generator update.

    Both updates use the parameters from before this iteration. Raises
    :class:`TrainingDiverged` before touching any weight if a term is non-finite.
    """
    tape_g = Tape() if update_g else None
    g_all, d_all, reports = [], [], []
    for samples, task, scale in ((cross, "cross", 1.0), (selfs, "self", cfg.lambda_self)):
        if not samples:
            continue
        g_terms, d_terms, rep = _task_losses(samples, task, state, cfg, scale, tape_g)
        g_all.append(_mean(g_terms) if tape_g is None else _with(tape_g, _mean, g_terms))
        d_all.append((scale, d_terms))
        reports.append(rep)
    bad = [r for r in reports if not r.finite()]
    if bad:
        raise TrainingDiverged("; ".join(r.fields() for r in bad))

    if update_g:
        total = _with(tape_g, _sum_scalars, g_all)
        named = state.g.trainable()
        grads = tape_g.gradient(total, list(named.values()))
        updated = state.opt_g.step(named, dict(zip(named, grads)))
        state.g = map_tensors(state.g, lambda n, t: updated.get(n, t))
    if state.d is not None:
        named = state.d.named()
        acc = {k: np.zeros_like(v.data) for k, v in named.items()}
        for scale, d_terms in d_all:
            for tape_d, d_loss in d_terms:
                for k, g in zip(named, tape_d.gradient(d_loss, list(named.values()))):
                    acc[k] += g * (scale / len(d_terms))
        updated = state.opt_d.step(named, acc)
        state.d = map_tensors(state.d, lambda n, t: updated.get(n, t))
    state.step += 1
    return reports


def _with(tape: Tape, fn, *args):
    with tape:
        return fn(*args)


def _sum_scalars(xs: Sequence[Tensor]) -> Tensor:
    out = xs[0]
    for x in xs[1:]:
        out = dc.add(out, x)
    return out


def train_step_cross(pairs: PatchPair | Sequence[PatchPair], state: TrainState, cfg: TrainConfig,
                     update_g: bool = True) -> LossReport:
    """Reconstruct each target patch from the other patch of its scene."""
    pairs = [pairs] if isinstance(pairs, PatchPair) else list(pairs)
    return train_iteration([Sample.cross(p) for p in pairs], [], state, cfg, update_g)[0]


def train_step_self(scenes: Scene | Sequence[Scene], state: TrainState, cfg: TrainConfig,
                    update_g: bool = True) -> LossReport:
    """Reconstruct each scene from itself."""
    scenes = [scenes] if isinstance(scenes, Scene) else list(scenes)
    return train_iteration([], [Sample.self_(s) for s in scenes], state, cfg, update_g)[0]


# ---------------------------------------------------------------- schedule

@dataclass
class StepRecord:
    step: int
    epoch: int
    phase: int
    reports: list[LossReport]
    wall: float

    @property
    def total(self) -> float:
        return sum_reports(self.reports)

    def report(self, task: str) -> LossReport | None:
        return next((r for r in self.reports if r.task == task), None)

    def lines(self) -> list[str]:
        return [f"step={self.step} epoch={self.epoch} phase={self.phase} {r.fields()} "
                f"wall={self.wall:.3f}" for r in self.reports]


@dataclass
class TrainResult:
    state: TrainState
    history: list[StepRecord] = field(default_factory=list)


def steps_per_epoch(n_scenes: int, cfg: TrainConfig) -> int:
    return math.ceil(n_scenes / cfg.batch)


def total_steps(n_scenes: int, cfg: TrainConfig) -> int:
    n = cfg.epochs * steps_per_epoch(n_scenes, cfg)
    return min(n, cfg.max_steps) if cfg.max_steps else n


def iteration_inputs(dataset: Sequence[Scene], cfg: TrainConfig, seed: int, step: int):
    """Deterministic function of ``(seed, step)``: the scenes, phase and samples of one iteration."""
    spe = steps_per_epoch(len(dataset), cfg)
    epoch = step // spe
    phase = 1 if epoch < cfg.phase_switch else 2
    order = np.random.default_rng([seed, epoch, 0]).permutation(len(dataset))
    chosen = order[(step % spe) * cfg.batch:(step % spe + 1) * cfg.batch]
    rng = np.random.default_rng([seed, step, 1])
    cross, selfs = [], []
    for i in chosen:
        scene = dataset[int(i)]
        cross.append(Sample.cross(sample_patch_pair(scene, phase, rng, cfg.patch, cfg.flip)))
        if phase == 2 and cfg.lambda_self > 0:
            glob = scene.resized(cfg.patch, cfg.patch)
            if cfg.flip and rng.integers(2):
                glob = glob.flip_h()
            selfs.append(Sample.self_(glob))
    return epoch, phase, cross, selfs


def train(dataset: Sequence[Scene], cfg: TrainConfig, seed: int = 0,
          out_dir: str | os.PathLike | None = None, resume: str | os.PathLike | None = None,
          on_step: Callable[[StepRecord], None] | None = None) -> TrainResult:
    """Alternate cross- and self-reconstruction under the configured schedule.

    With ``out_dir`` set, per-step metrics go to ``metrics.log``, per-epoch
    means are appended as ``epoch_summary`` lines, and checkpoints are written
    as ``ckpt_<step>.bin`` plus ``final.bin``.
    """
    if not dataset:
        raise ValueError("empty dataset")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(cfg.to_text())
    state = TrainState.load(resume, cfg) if resume else TrainState.init(cfg, seed)
    result = TrainResult(state)
    n_steps = total_steps(len(dataset), cfg)
    t0 = time.perf_counter()
    metrics = open(out / "metrics.log", "a") if out is not None else None
    epoch_buf: list[StepRecord] = []
    try:
        with threadpool_limits(limits=cfg.threads), dc.precision(cfg.np_dtype):
            while state.step < n_steps:
                step = state.step
                epoch, phase, cross, selfs = iteration_inputs(dataset, cfg, seed, step)
                update_g = step % cfg.g_update_period == 0
                try:
                    reports = train_iteration(cross, selfs, state, cfg, update_g)
                except (TrainingDiverged, NonFiniteError) as exc:
                    if out is not None:
                        dump = out / f"diverged_step_{step:06d}"
                        state.save(dump.with_suffix(".bin"))
                        dump.with_suffix(".txt").write_text(f"step={step} epoch={epoch} "
                                                            f"phase={phase}\n{exc}\n")
                    raise TrainingDiverged(f"non-finite loss at step {step}: {exc}") from None
                rec = StepRecord(step, epoch, phase, reports, time.perf_counter() - t0)
                result.history.append(rec)
                epoch_buf.append(rec)
                if metrics is not None:
                    metrics.write("".join(line + "\n" for line in rec.lines()))
                if on_step is not None:
                    on_step(rec)
                last_of_epoch = (state.step % steps_per_epoch(len(dataset), cfg) == 0
                                 or state.step == n_steps)
                if last_of_epoch:
                    summary = _epoch_summary(epoch, epoch_buf)
                    log.info(summary)
                    if metrics is not None:
                        metrics.write(summary + "\n")
                        metrics.flush()
                    epoch_buf = []
                if out is not None and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                    state.save(out / f"ckpt_{state.step:06d}.bin")
        if out is not None:
            state.save(out / "final.bin")
    finally:
        if metrics is not None:
            metrics.close()
    return result


def _epoch_summary(epoch: int, records: Sequence[StepRecord]) -> str:
    parts = [f"epoch_summary epoch={epoch} steps={len(records)}"]
    for task in ("cross", "self"):
        reps = [r.report(task) for r in records if r.report(task) is not None]
        if reps:
            m = mean_report(task, reps)
            parts.append(f"{task}_total={m.total!r} {task}_pixel={m.pixel!r}")
    return " ".join(parts)


# ---------------------------------------------------------------- pretraining

@dataclass
class PretrainHead:
    """Throwaway per-scale 1x1 predictors of backbone features; never saved."""

    heads: list[Conv]

    @classmethod
    def init(cls, params: GeneratorParams, seed: int) -> "PretrainHead":
        rng = np.random.default_rng([seed, 7])
        c = params.config
        cin = c.image_channels + c.label_channels
        return cls([Conv.init(rng, cout, cin, dtype=params.dtype) for cout in c.backbone_widths])


PRETRAIN_PREFIXES = ("wx.", "wc.", "msca.")


def pretrain_loss(pair: PatchPair, params: GeneratorParams, head: PretrainHead) -> Tensor:
    """Uniformly weighted per-scale L1 between predicted and true backbone features of ``x_p``."""
    dtype = params.dtype
    x_q = Tensor(pair.x_q, dtype=dtype)
    image_pyr = extract_image_features(x_q, params.backbone, params.wx)
    target_pyr = extract_label_features(pair.c_p, params.wc)
    exemplar_pyr = extract_label_features(pair.c_q, params.wc)
    aligned, _ = msca_multiscale(image_pyr, target_pyr, exemplar_pyr, params.msca)
    truth = params.backbone(Tensor(pair.x_p, dtype=dtype))
    n = len(head.heads)
    terms = []
    for fx, fc, k, t in zip(aligned, target_pyr, head.heads, truth):
        pred = dc.conv1x1(dc.concat([fx, fc], axis=0), k.w, k.b)
        terms.append(dc.mul(dc.l1(pred, t.detach()), 1.0 / n))
    return _sum_scalars(terms)


def pretrain_msca(dataset: Sequence[Scene], params: GeneratorParams, cfg: TrainConfig,
                  seed: int = 0, steps: int | None = None,
                  on_step: Callable[[int, float], None] | None = None) -> tuple[GeneratorParams, list[float]]:
    """Train pyramid kernels and attention weights against backbone features.

    Uses non-overlapping patch pairs. Returns the updated generator weights
    and the per-step losses; the auxiliary head is discarded.
    """
    head = PretrainHead.init(params, seed)
    opt = Adam(cfg.lr, cfg.beta1, cfg.beta2)
    n_steps = steps if steps is not None else cfg.pretrain_epochs * len(dataset)
    losses = []
    with threadpool_limits(limits=cfg.threads), dc.precision(params.dtype):
        for step in range(n_steps):
            rng = np.random.default_rng([seed, step, 2])
            scene = dataset[int(rng.integers(len(dataset)))]
            pair = sample_patch_pair(scene, 1, rng, cfg.patch, cfg.flip)
            named = {k: v for k, v in params.named().items() if k.startswith(PRETRAIN_PREFIXES)}
            named.update({f"head.{i}.{a}": getattr(h, a) for i, h in enumerate(head.heads)
                          for a in ("w", "b")})
            with Tape() as tape:
                loss = pretrain_loss(pair, params, head)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite pretraining loss at step {step}")
            grads = tape.gradient(loss, list(named.values()))
            updated = opt.step(named, dict(zip(named, grads)))
            params = map_tensors(params, lambda n, t: updated.get(n, t))
            head = PretrainHead([Conv(updated[f"head.{i}.w"], updated[f"head.{i}.b"])
                                 for i in range(len(head.heads))])
            losses.append(value)
            if on_step is not None:
                on_step(step, value)
    return params, losses
