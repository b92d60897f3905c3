"""Training loop, closed-loop rollouts, evaluation harness, checkpoints, ablations."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import diffcalc as dc
from .diffcalc import Tensor
from .gridops import sampling_matrix, WarpSpec
from .kinematics import PoseDelta, step_arrays
from .losses import default_lambda, horizon_loss, step_loss
from .metrics import EvalReport, KdeModel, evaluate_frames
from .predictor import (Context, Geometry, OracleStub, PersistenceStub, Predictor, PredictorConfig,
                        advance, predict_batch)
from .records import ConfigError, DataError, SequenceRecord, format_kv, parse_kv, read_snapshot, write_snapshot


class NumericError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, checkpoint: "Checkpoint | None" = None):
        super().__init__(message)
        self.checkpoint = checkpoint


# ---------------------------------------------------------------- data

def geometry_of(rec: SequenceRecord, ego_length_px: float | None = None, ego_width_px: float | None = None,
                pad: int = 20) -> Geometry:
    from .worldsim import EGO_LENGTH, EGO_WIDTH

    return Geometry(rec.h, rec.w, rec.c, rec.ego_anchor, rec.meters_per_pixel, rec.dt, rec.channel_roles,
                    rec.value_mode,
                    ego_length_px if ego_length_px is not None else EGO_LENGTH / rec.meters_per_pixel,
                    ego_width_px if ego_width_px is not None else EGO_WIDTH / rec.meters_per_pixel, pad)


@dataclass
class PreparedSequence:
    """A record plus everything the rule-based modules derive from it."""

    record: SequenceRecord
    frames: np.ndarray          # (T, H, W, C) float32
    headings: np.ndarray        # (T,) ego heading at each frame
    deltas: list[PoseDelta]     # T-1 per-step displacements
    diffs: np.ndarray           # (T, H, W, C) float32; diffs[0] unused

    @property
    def length(self) -> int:
        return self.frames.shape[0]


def replay_headings(rec: SequenceRecord) -> tuple[np.ndarray, list[PoseDelta]]:
    heads = np.empty(rec.length)
    heads[0] = _initial_heading(rec)
    deltas = []
    for t in range(rec.length - 1):
        _, dp, dth, th = step_arrays(rec.measurements[t:t + 1], rec.actions[t:t + 1], rec.dt, heads[t:t + 1])
        deltas.append(PoseDelta((float(dp[0, 0]), float(dp[0, 1])), float(dth[0]), float(th[0])))
        heads[t + 1] = th[0] + dth[0]
    return heads, deltas


def _initial_heading(rec: SequenceRecord) -> float:
    vx, vy = rec.measurements[0, 2:]
    return math.atan2(vy, vx) if (vx or vy) else float(rec.heading0)


def prepare(rec: SequenceRecord, geom: Geometry, no_rbm: bool = False, dtype=np.float32) -> PreparedSequence:
    heads, deltas = replay_headings(rec)
    frames = rec.frames.astype(dtype)
    diffs = np.zeros_like(frames)
    ego = geom.ego_mask
    for t in range(1, rec.length):
        if no_rbm:
            diffs[t] = frames[t] - frames[t - 1]
            continue
        spec = WarpSpec.from_pose_delta(deltas[t - 1], geom.meters_per_pixel, geom.anchor)
        if spec.is_identity:
            j_ego = frames[t - 1]
            j_env = frames[t]
        else:
            m = sampling_matrix(geom.h, geom.w, spec, False, geom.interp)
            hw = geom.h * geom.w
            j_env = (m @ frames[t].reshape(hw, geom.c)).reshape(frames[t].shape).astype(dtype)
            j_ego = frames[t - 1].copy()
            j_ego.reshape(hw, geom.c)[:, ego] = (m @ frames[t - 1].reshape(hw, geom.c)[:, ego]).astype(dtype)
        diffs[t] = j_env - j_ego
    return PreparedSequence(rec, frames, heads, deltas, diffs)


def make_context(seqs: list[PreparedSequence], starts: list[int], t: int) -> Context:
    """Window of t frames ending at each start index (the newest observed frame)."""
    frames = [Tensor(np.stack([s.frames[st - t + 1 + i] for s, st in zip(seqs, starts)])) for i in range(t)]
    meas = np.stack([s.record.measurements[st - t + 1:st + 1] for s, st in zip(seqs, starts)])
    heads = np.array([s.headings[st] for s, st in zip(seqs, starts)])
    diffs = [Tensor(np.stack([s.diffs[st - t + 2 + i] for s, st in zip(seqs, starts)])) for i in range(t - 1)]
    return Context(frames, meas, heads, diffs)


# ---------------------------------------------------------------- config

@dataclass
class TrainConfig:
    epochs: int = 10
    steps_per_epoch: int = 0          # 0: one pass worth of batches
    batch_size: int = 8
    lr: float = 1e-3
    k: int = 5
    lam: float = -1.0                 # negative: mode default
    eta_percent: float = 10.0
    variant: str = "base"
    no_rbm: bool = False
    no_bcde: bool = False
    no_me: bool = False
    seed: int = 0
    t: int = 10
    latent_dim: int = 32
    enc_widths: tuple[int, ...] = (16, 32, 64, 64)
    narrow_widths: tuple[int, ...] = (4, 8, 16, 16)
    shared_dim: int = 128
    dec_hidden: int = 256
    divergence: str = "auto"          # auto | mse | ce
    max_steps: int = 0                # 0: epochs * steps_per_epoch
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if self.variant not in ("base", "dl"):
            raise ConfigError(f"variant must be base or dl, got {self.variant!r}")
        if self.divergence not in ("auto", "mse", "ce"):
            raise ConfigError(f"divergence must be auto, mse or ce, got {self.divergence!r}")
        self.enc_widths = tuple(int(x) for x in self.enc_widths)
        self.narrow_widths = tuple(int(x) for x in self.narrow_widths)

    def predictor_config(self, rec: SequenceRecord) -> PredictorConfig:
        lam = self.lam if self.lam >= 0 else default_lambda(rec.value_mode)
        try:
            return PredictorConfig(
                variant=self.variant, h=rec.h, w=rec.w, c=rec.c, t=self.t, latent_dim=self.latent_dim,
                eta_percent=self.eta_percent, lambda_ssim=lam, no_rbm=self.no_rbm, no_bcde=self.no_bcde,
                no_me=self.no_me, enc_widths=self.enc_widths, narrow_widths=self.narrow_widths,
                shared_dim=self.shared_dim, dec_hidden=self.dec_hidden,
            )
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def divergence_for(self, value_mode: str) -> str:
        if self.divergence != "auto":
            return self.divergence
        # the difference head can push the raw composition outside [0, 1],
        # where clamped cross-entropy has no gradient; it always uses MSE
        if self.variant == "dl":
            return "mse"
        return "ce" if value_mode == "binary" else "mse"

    def to_kv(self) -> dict[str, object]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _coerce(value: str, like):
    if isinstance(like, bool):
        if value.lower() in ("1", "true", "yes"):
            return True
        if value.lower() in ("0", "false", "no"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    if isinstance(like, tuple):
        return tuple(int(x) for x in value.split(",") if x.strip())
    return value


def dataclass_from_kv(cls, kv: dict[str, str], source: str = "<config>", allowed_extra=()):
    defaults = cls()
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(kv) - names - set(allowed_extra))
    if unknown:
        raise ConfigError(f"{source}: unknown keys {unknown}")
    values = {}
    for k, v in kv.items():
        if k not in names:
            continue
        try:
            values[k] = _coerce(v, getattr(defaults, k))
        except ValueError as e:
            raise ConfigError(f"{source}: key {k}: {e}") from None
    try:
        return cls(**values)
    except (ValueError, TypeError) as e:
        raise ConfigError(f"{source}: {e}") from None


# ---------------------------------------------------------------- optimiser

class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, b1: float = 0.9, b2: float = 0.999,
                 eps: float = 1e-8):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for n, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad.astype(p.data.dtype)
            m, v = self.m[n], self.v[n]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.data.dtype)


# ---------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    model: Predictor
    train_config: TrainConfig
    step: int = 0
    epoch: int = 0
    rng_state: dict | None = None
    adam: Adam | None = None

    def config_text(self) -> str:
        items: dict[str, object] = {"format": "anticipation-checkpoint-1"}
        items.update({f"model.{k}": v for k, v in self.model.config.to_dict().items()})
        items.update({f"train.{k}": v for k, v in self.train_config.to_kv().items()})
        items["step"] = self.step
        items["epoch"] = self.epoch
        if self.adam is not None:
            items["adam.t"] = self.adam.t
        if self.rng_state is not None:
            items["rng"] = json.dumps(self.rng_state, sort_keys=True)
        return format_kv(items)

    def save(self, path) -> Path:
        tensors = {f"param.{n}": p.data for n, p in self.model.params.items()}
        if self.adam is not None:
            tensors.update({f"adam.m.{n}": a for n, a in self.adam.m.items()})
            tensors.update({f"adam.v.{n}": a for n, a in self.adam.v.items()})
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        write_snapshot(path, self.config_text(), tensors)
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        text, tensors = read_snapshot(path)
        kv = parse_kv(text, str(path))
        mkv = {k[6:]: v for k, v in kv.items() if k.startswith("model.")}
        tkv = {k[6:]: v for k, v in kv.items() if k.startswith("train.")}
        pcfg = dataclass_from_kv(PredictorConfig, mkv, str(path))
        tcfg = dataclass_from_kv(TrainConfig, tkv, str(path))
        model = Predictor(pcfg, seed=0)
        for n, p in model.params.items():
            key = f"param.{n}"
            if key not in tensors:
                raise DataError(f"{path}: missing tensor {key}")
            if tensors[key].shape != p.data.shape:
                raise DataError(f"{path}: tensor {key} has shape {tensors[key].shape}, model expects {p.data.shape}")
            p.data = tensors[key].astype(model.dtype).copy()
        adam = None
        if "adam.t" in kv:
            adam = Adam(model.params, tcfg.lr)
            adam.t = int(kv["adam.t"])
            for n in model.params:
                adam.m[n] = tensors[f"adam.m.{n}"].copy()
                adam.v[n] = tensors[f"adam.v.{n}"].copy()
        rng_state = json.loads(kv["rng"]) if "rng" in kv else None
        return cls(model, tcfg, int(kv.get("step", 0)), int(kv.get("epoch", 0)), rng_state, adam)


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    checkpoint: Checkpoint
    step_curve: list[dict[str, float]]
    epoch_curve: list[dict[str, float]]


def _check_dataset(dataset: list[SequenceRecord], t: int, k: int) -> None:
    if not dataset:
        raise DataError("empty training dataset")
    first = dataset[0]
    for rec in dataset:
        if (rec.h, rec.w, rec.c) != (first.h, first.w, first.c) or rec.value_mode != first.value_mode:
            raise DataError(f"mixed frame shapes in dataset: {(rec.h, rec.w, rec.c)} vs {(first.h, first.w, first.c)}")
        if rec.length < t + k:
            raise DataError(f"sequence of length {rec.length} shorter than t + k = {t + k}")


def training_loss(model: Predictor, seqs: list[PreparedSequence], starts: list[int], geom: Geometry,
                  k: int, rng: np.random.Generator, divergence: str, use_prior: bool | None = None):
    """k-step closed-loop objective for one batch; returns (total, per-step breakdowns, results)."""
    cfg = model.config
    ctx = make_context(seqs, starts, cfg.t)
    steps, results = [], []
    for j in range(k):
        acts = np.stack([s.record.actions[st + j] for s, st in zip(seqs, starts)])
        target = np.stack([s.frames[st + j + 1] for s, st in zip(seqs, starts)])
        res = predict_batch(model, ctx, acts, geom, "train", rng, target, use_prior)
        steps.append(step_loss(res.target, res.pred_raw, res.posterior, res.prior, cfg.lambda_ssim,
                               cfg.variant, divergence))
        results.append(res)
        ctx = advance(ctx, res)
    return horizon_loss(steps, k), steps, results


def train(config: TrainConfig, dataset: list[SequenceRecord], out_dir=None, resume: Checkpoint | None = None,
          log=None) -> TrainResult:
    """Minimise the k-step objective with Adam; deterministic for a fixed seed and dataset order."""
    _check_dataset(dataset, config.t, config.k)
    geom = geometry_of(dataset[0])
    if resume is not None:
        model, adam = resume.model, resume.adam or Adam(resume.model.params, config.lr)
        rng = np.random.default_rng()
        rng.bit_generator.state = resume.rng_state
        step0 = resume.step
    else:
        model = Predictor(config.predictor_config(dataset[0]), seed=config.seed)
        adam = Adam(model.params, config.lr)
        rng = np.random.default_rng(config.seed + 1)
        step0 = 0
    divergence = config.divergence_for(dataset[0].value_mode)
    seqs = [prepare(r, geom, model.config.no_rbm, model.dtype) for r in dataset]
    spe = config.steps_per_epoch or max(1, len(dataset) // config.batch_size)
    total_steps = config.max_steps or config.epochs * spe
    out = Path(out_dir) if out_dir is not None else None

    step_curve: list[dict[str, float]] = []
    epoch_curve: list[dict[str, float]] = []
    acc: list[dict[str, float]] = []
    last_good = Checkpoint(model, config, step0, step0 // spe, rng.bit_generator.state, adam)
    for step in range(step0, total_steps):
        idx = rng.integers(0, len(seqs), size=config.batch_size)
        batch = [seqs[i] for i in idx]
        starts = [int(rng.integers(model.config.t - 1, s.length - config.k)) for s in batch]
        use_prior = bool(rng.random() < model.config.eta_percent / 100.0)
        model.zero_grad()
        total, parts, _ = training_loss(model, batch, starts, geom, config.k, rng, divergence, use_prior)
        if not np.isfinite(total.data):
            if out is not None:
                last_good.save(out / "checkpoint.bin")
            raise NumericError(f"non-finite loss at step {step}", last_good)
        dc.backward(total)
        grads_ok = all(p.grad is None or np.all(np.isfinite(p.grad)) for p in model.params.values())
        if not grads_ok:
            if out is not None:
                last_good.save(out / "checkpoint.bin")
            raise NumericError(f"non-finite gradient at step {step}", last_good)
        adam.step()
        row = {"step": step, "rec": sum(float(p.rec.data) for p in parts), "ssim": float(np.mean([float(p.ssim.data) for p in parts])),
               "kl": sum(float(p.kl.data) for p in parts), "total": float(total.data), "prior": int(use_prior)}
        step_curve.append(row)
        acc.append(row)
        if log is not None:
            log(row)
        last_good = Checkpoint(model, config, step + 1, (step + 1) // spe, rng.bit_generator.state, adam)
        if (step + 1) % spe == 0 or step + 1 == total_steps:
            epoch_curve.append({"epoch": (step + 1 + spe - 1) // spe,
                                **{key: float(np.mean([r[key] for r in acc])) for key in ("rec", "ssim", "kl", "total")}})
            acc = []
        if out is not None and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
            last_good.save(out / f"checkpoint_{step + 1:06d}.bin")
    ckpt = Checkpoint(model, config, max(total_steps, step0), max(total_steps, step0) // spe,
                      rng.bit_generator.state, adam)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        ckpt.save(out / "checkpoint.bin")
        write_curve(out / "loss_steps.csv", step_curve, ("step", "rec", "ssim", "kl", "total", "prior"))
        write_curve(out / "loss_epochs.csv", epoch_curve, ("epoch", "rec", "ssim", "kl", "total"))
    return TrainResult(ckpt, step_curve, epoch_curve)


def write_curve(path, rows, columns) -> None:
    lines = [",".join(columns)]
    for r in rows:
        lines.append(",".join(repr(r[c]) if isinstance(r[c], float) else str(r[c]) for c in columns))
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------- rollout

@dataclass
class Rollout:
    frames: np.ndarray          # (N, k, H, W, C) ego-centred predictions
    measurements: np.ndarray    # (N, k, 4)
    targets: np.ndarray         # (N, k, H, W, C) ground truth (zeros where unavailable)


def rollout(model, seqs: list[PreparedSequence], starts: list[int], k: int, geom: Geometry,
            mode: str = "eval", rng: np.random.Generator | None = None, t: int | None = None,
            actions: np.ndarray | None = None) -> Rollout:
    """k-step closed-loop prediction from the window ending at each start index.

    ``actions`` (N, k, 2) overrides the recorded actions.  Ground-truth frames
    are passed only to the oracle stub.
    """
    t = t or getattr(getattr(model, "config", None), "t", None)
    if t is None:
        raise ValueError("rollout needs the window length t for stub models")
    rng = rng or np.random.default_rng(0)
    ctx = make_context(seqs, starts, t)
    n = len(seqs)
    frames = np.zeros((n, k, geom.h, geom.w, geom.c), dtype=np.float32)
    targets = np.zeros_like(frames)
    meas = np.zeros((n, k, 4))
    oracle = isinstance(model, OracleStub)
    for j in range(k):
        if actions is not None:
            acts = np.asarray(actions)[:, j]
        else:
            acts = np.stack([s.record.actions[st + j] for s, st in zip(seqs, starts)])
        tgt = None
        have = [st + j + 1 < s.length for s, st in zip(seqs, starts)]
        if all(have):
            tgt = np.stack([s.frames[st + j + 1] for s, st in zip(seqs, starts)])
            targets[:, j] = tgt
        if oracle and tgt is None:
            raise DataError("oracle rollout runs past the end of a sequence")
        res = predict_batch(model, ctx, acts, geom, mode, rng, tgt if oracle else None)
        frames[:, j] = res.frame.data
        meas[:, j] = res.next_meas
        # evaluation never backpropagates: cut the graph to keep memory flat
        res.frame = res.frame.detach()
        res.new_diff = res.new_diff.detach()
        ctx = advance(ctx, res)
    return Rollout(frames, meas, targets)


def eval_start(rec: SequenceRecord, t: int) -> int:
    start = rec.flags.get("start")
    return int(start) if start not in (None, "") else t - 1


def evaluate(model, dataset: list[SequenceRecord], horizons=(1, 5, 10, 20), kde: KdeModel | None = None,
             t: int | None = None, chunk: int = 16) -> EvalReport:
    """Closed-loop rollouts over every sequence; metrics per horizon with standard errors."""
    if not dataset:
        raise DataError("empty evaluation dataset")
    t = t or getattr(getattr(model, "config", None), "t", None) or 10
    cfg = getattr(model, "config", None)
    if cfg is not None and (cfg.h, cfg.w, cfg.c) != (dataset[0].h, dataset[0].w, dataset[0].c):
        raise DataError(f"model grid {(cfg.h, cfg.w, cfg.c)} does not match data {(dataset[0].h, dataset[0].w, dataset[0].c)}")
    geom = geometry_of(dataset[0])
    no_rbm = bool(cfg is not None and cfg.no_rbm)
    kmax = max(horizons)
    preds, tgts = [], []
    for i in range(0, len(dataset), chunk):
        part = dataset[i:i + chunk]
        seqs = [prepare(r, geom, no_rbm) for r in part]
        starts = [eval_start(r, t) for r in part]
        for r, st in zip(part, starts):
            if st + kmax >= r.length or st < t - 1:
                raise DataError(f"sequence of length {r.length} too short for start {st} and horizon {kmax}")
        ro = rollout(model, seqs, starts, kmax, geom, "eval", t=t)
        preds.append(ro.frames)
        tgts.append(ro.targets)
    pred = np.concatenate(preds)
    tgt = np.concatenate(tgts)
    env = ~geom.ego_mask
    return evaluate_frames(pred, tgt, horizons, kde, binary=geom.value_mode == "binary", env_channels=env)


# ---------------------------------------------------------------- ablation

ABLATION_CELLS = {
    "full": {},
    "no_rbm": {"no_rbm": True},
    "no_bcde": {"no_bcde": True},
    "no_me": {"no_me": True},
}


def ablation_config(base: TrainConfig, cell: str) -> TrainConfig:
    if cell not in ABLATION_CELLS:
        raise ConfigError(f"unknown ablation cell {cell!r}")
    kw = base.to_kv()
    kw.update({"no_rbm": False, "no_bcde": False, "no_me": False})
    kw.update(ABLATION_CELLS[cell])
    return TrainConfig(**kw)


def ablate(checkpoints: dict[str, Predictor], suites: dict[str, list[SequenceRecord]], horizons=(1, 5, 10, 20),
           kde: KdeModel | None = None) -> dict[tuple[str, str], EvalReport]:
    """EvalReport for every (suite, cell) pair; every cell needs a trained model."""
    missing = [c for c in ABLATION_CELLS if c not in checkpoints]
    if missing:
        raise DataError(f"missing checkpoints for ablation cells: {missing}")
    out = {}
    for suite, data in suites.items():
        for cell in ABLATION_CELLS:
            out[(suite, cell)] = evaluate(checkpoints[cell], data, horizons, kde)
    return out


# ---------------------------------------------------------------- single-window API

def predict_step(model, frames, measurements, action, geom: Geometry | None = None, mode: str = "eval",
                 rng: np.random.Generator | None = None, heading: float = 0.0, next_frame=None):
    """Predict the next ego-centred frame from a window of t ``Ogm`` frames.

    ``measurements`` is a list of t :class:`Measurements`; intra-window ego
    motion is recovered with the inverse measurement estimator.
    Returns (predicted Ogm, next Measurements).
    """
    from .gridops import Ogm
    from .kinematics import ActionCmd, Measurements, inverse_actions

    t = len(frames)
    if len(measurements) != t:
        raise ValueError(f"{t} frames but {len(measurements)} measurements")
    f0 = frames[0]
    if geom is None:
        from .worldsim import EGO_LENGTH, EGO_WIDTH
        geom = Geometry(f0.h, f0.w, f0.c, f0.ego_anchor, f0.meters_per_pixel, 0.1, f0.channel_roles,
                        f0.value_mode, EGO_LENGTH / f0.meters_per_pixel, EGO_WIDTH / f0.meters_per_pixel)
    acts = np.zeros((t, 2))
    if t > 1:
        inv = inverse_actions(measurements, geom.dt, heading)
        acts[:t - 1] = [(a.alpha, a.tau) for a in inv.actions]
    a = action if isinstance(action, ActionCmd) else ActionCmd(*action)
    acts[t - 1] = (a.alpha, a.tau)
    nxt = np.zeros_like(frames[-1].data) if next_frame is None else np.asarray(getattr(next_frame, "data", next_frame))
    rec = SequenceRecord(np.stack([f.data for f in frames] + [nxt]),
                         np.stack([m.as_array() for m in measurements] + [measurements[-1].as_array()]),
                         acts, geom.meters_per_pixel, geom.dt, geom.anchor, geom.value_mode, geom.channel_roles,
                         heading)
    cfg = getattr(model, "config", None)
    seq = prepare(rec, geom, bool(cfg is not None and cfg.no_rbm))
    ctx = make_context([seq], [t - 1], t)
    target = None if next_frame is None else nxt[None].astype(np.float32)
    res = predict_batch(model, ctx, acts[t - 1:t], geom, mode, rng, target if isinstance(model, OracleStub) else None)
    out = np.clip(res.frame.data[0].astype(np.float64), 0.0, 1.0)
    return (Ogm(out, geom.anchor, geom.meters_per_pixel, geom.channel_roles, geom.value_mode),
            Measurements.from_array(res.next_meas[0]))
