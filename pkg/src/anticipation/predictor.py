"""Learned environment predictor and the per-step prediction engine.

The network is a bottleneck conditional density estimator over ego-centred
occupancy frames:

* a shared encoder (frame history + anticipated ego frame + measurements)
  producing a deterministic code used by both the prior and posterior paths,
* a conditional prior p(z | history, j_ego) and a posterior that also sees
  the aligned target j_env,
* a motion encoder over aligned difference frames with fixed variance,
* a deconvolutional decoder with skip connections from the shared encoder
  and a full-resolution head that also sees j_ego; sigmoid output (base) or
  tanh output (dl).

:func:`predict_batch` wires the network between the rule-based transforms:
measurement update, ego-only warp, decode, optional difference composition,
inverse warp, ego re-stamp.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import diffcalc as dc
from .diffcalc import Tensor
from .gridops import WarpSpec, ego_footprint, sampling_matrix
from .kinematics import PoseDelta, step_arrays
from .losses import GaussianCode

VARIANTS = ("base", "dl")
MEAS_SCALE = 10.0
HEAD_GAIN = 8.0


@dataclass
class PredictorConfig:
    variant: str = "base"
    h: int = 64
    w: int = 64
    c: int = 3
    t: int = 10
    latent_dim: int = 32
    motion_dim: int = 32
    eta_percent: float = 10.0
    epsilon: float = 0.5
    lambda_ssim: float = 0.05
    no_rbm: bool = False
    no_bcde: bool = False
    no_me: bool = False
    enc_widths: tuple[int, ...] = (16, 32, 64, 64)
    narrow_widths: tuple[int, ...] = (4, 8, 16, 16)
    shared_dim: int = 128
    meas_hidden: int = 64
    meas_dim: int = 16
    prior_hidden: int = 64
    post_hidden: int = 128
    dec_hidden: int = 256
    head_width: int = 8

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if not 0 <= self.eta_percent <= 100:
            raise ValueError("eta_percent must lie in [0, 100]")
        if self.t < 1:
            raise ValueError("t must be >= 1")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        n = len(self.enc_widths)
        if len(self.narrow_widths) != n:
            raise ValueError("enc_widths and narrow_widths need the same depth")
        if self.h % (2 ** n) or self.w % (2 ** n):
            raise ValueError(f"grid {self.h}x{self.w} not divisible by 2^{n}")
        self.enc_widths = tuple(int(x) for x in self.enc_widths)
        self.narrow_widths = tuple(int(x) for x in self.narrow_widths)

    @property
    def n_diffs(self) -> int:
        return self.t - 1

    @property
    def meas_inputs(self) -> int:
        # history of t measurements plus either the anticipated next
        # measurement (4) or, without the rule-based modules, the raw action (2)
        return self.t * 4 + (2 if self.no_rbm else 4)

    @property
    def bottom(self) -> tuple[int, int]:
        f = 2 ** len(self.enc_widths)
        return self.h // f, self.w // f

    def to_dict(self) -> dict[str, object]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


# ---------------------------------------------------------------- layers

def _conv_stack(x: Tensor, params: dict[str, Tensor], prefix: str, depth: int, maps: list | None = None) -> Tensor:
    for i in range(depth):
        x = dc.pad2d(x, 1)
        x = dc.conv2d(x, params[f"{prefix}.conv{i}.w"], params[f"{prefix}.conv{i}.b"], stride=2)
        x = dc.leaky_relu(x)
        if maps is not None:
            maps.append(x)
    return dc.reshape(x, (x.shape[0], -1))


def _dense(x: Tensor, params: dict[str, Tensor], name: str) -> Tensor:
    return dc.dense(x, params[f"{name}.w"], params[f"{name}.b"])


@dataclass
class SharedCode:
    """Deterministic shared features: the flat code plus the encoder maps the decoder reuses."""

    code: Tensor                # (N, shared_dim + meas_dim)
    maps: list[Tensor]          # encoder activations, finest first
    j_ego: Tensor               # (N, H, W, C)

    @property
    def data(self) -> np.ndarray:
        return self.code.data

    @property
    def shape(self) -> tuple[int, ...]:
        return self.code.shape


class Predictor:
    """Parameter container plus the forward pieces of the network."""

    def __init__(self, config: PredictorConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        self._build(np.random.default_rng(seed))

    # ------------------------------------------------------------ construction
    def _add(self, name: str, arr: np.ndarray) -> None:
        self.params[name] = Tensor(arr.astype(self.dtype), requires_grad=True, name=name)

    def _conv_params(self, rng, prefix: str, cin: int, widths) -> int:
        for i, cout in enumerate(widths):
            fan_in = 16 * cin
            self._add(f"{prefix}.conv{i}.w", rng.normal(0, np.sqrt(2.0 / fan_in), (4, 4, cin, cout)))
            self._add(f"{prefix}.conv{i}.b", np.zeros(cout))
            cin = cout
        bh, bw = self.config.bottom
        return bh * bw * cin

    def _dense_params(self, rng, name: str, nin: int, nout: int, zero: bool = False) -> None:
        w = np.zeros((nin, nout)) if zero else rng.normal(0, np.sqrt(2.0 / nin), (nin, nout))
        self._add(f"{name}.w", w)
        self._add(f"{name}.b", np.zeros(nout))

    def _build(self, rng) -> None:
        cfg = self.config
        c = cfg.c
        shared_in = (cfg.t + 1) * c
        flat = self._conv_params(rng, "shared", shared_in, cfg.enc_widths)
        self._dense_params(rng, "shared.fc", flat, cfg.shared_dim)
        self._dense_params(rng, "meas.fc0", cfg.meas_inputs, cfg.meas_hidden)
        self._dense_params(rng, "meas.fc1", cfg.meas_hidden, cfg.meas_dim)
        code = cfg.shared_dim + cfg.meas_dim

        if not cfg.no_bcde:
            flat = self._conv_params(rng, "prior", 2 * c, cfg.narrow_widths)
            self._dense_params(rng, "prior.fc", flat + code, cfg.prior_hidden)
            self._dense_params(rng, "prior.mu", cfg.prior_hidden, cfg.latent_dim, zero=True)
            self._dense_params(rng, "prior.logvar", cfg.prior_hidden, cfg.latent_dim, zero=True)

        flat = self._conv_params(rng, "post", c, cfg.narrow_widths)
        self._dense_params(rng, "post.fc", flat + code, cfg.post_hidden)
        self._dense_params(rng, "post.mu", cfg.post_hidden, cfg.latent_dim)
        self._dense_params(rng, "post.logvar", cfg.post_hidden, cfg.latent_dim, zero=True)
        # start the posterior near the prior so the first KL terms stay small
        self.params["post.mu.w"].data *= 0.1

        motion_in = max(cfg.n_diffs, 1) * c
        if not cfg.no_me:
            flat = self._conv_params(rng, "motion", motion_in, cfg.narrow_widths)
            self._dense_params(rng, "motion.mu", flat, cfg.motion_dim)

        dec_in = code + cfg.latent_dim + cfg.motion_dim
        bh, bw = cfg.bottom
        top = cfg.enc_widths[-1]
        self._dense_params(rng, "dec.fc0", dec_in, cfg.dec_hidden)
        self._dense_params(rng, "dec.fc1", cfg.dec_hidden, bh * bw * top)
        skips = list(reversed(cfg.enc_widths))
        outs = skips[1:] + [cfg.head_width]
        cin = top
        for i, cout in enumerate(outs):
            cin += skips[i]
            self._add(f"dec.deconv{i}.w", rng.normal(0, np.sqrt(2.0 / (4 * cin)), (4, 4, cin, cout)))
            self._add(f"dec.deconv{i}.b", np.zeros(cout))
            cin = cout
        head_w = rng.normal(0, np.sqrt(1.0 / (9 * (cin + c))), (3, 3, cin + c, c))
        head_b = np.zeros(c)
        if cfg.variant == "base":
            # start as a sharp copy of j_ego through the sigmoid
            head_w[1, 1, cin + np.arange(c), np.arange(c)] += HEAD_GAIN
            head_b -= HEAD_GAIN / 2
        else:
            # start near a zero difference
            head_w *= 0.1
        self._add("dec.head.w", head_w)
        self._add("dec.head.b", head_b)

    # ------------------------------------------------------------ bookkeeping
    def path_params(self, path: str) -> list[Tensor]:
        """Parameter tensors read by a path: shared, prior, posterior, motion, decoder."""
        shared = [p for n, p in self.params.items() if n.startswith(("shared.", "meas."))]
        own = {"prior": "prior.", "posterior": "post.", "motion": "motion.", "decoder": "dec."}
        if path == "shared":
            return shared
        if path not in own:
            raise ValueError(f"unknown path {path!r}")
        mine = [p for n, p in self.params.items() if n.startswith(own[path])]
        return (shared + mine) if path in ("prior", "posterior") else mine

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def n_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def astype(self, dtype) -> "Predictor":
        """Copy with every parameter cast (e.g. float64 for gradient checks)."""
        other = object.__new__(Predictor)
        other.config = self.config
        other.dtype = np.dtype(dtype)
        other.params = {n: Tensor(p.data.astype(dtype), requires_grad=True, name=n) for n, p in self.params.items()}
        return other

    # ------------------------------------------------------------ forward pieces
    def encode_shared(self, frames: Tensor, meas: np.ndarray, j_ego: Tensor) -> SharedCode:
        """frames: (N, H, W, t*C) history, meas: (N, meas_inputs), j_ego: (N, H, W, C)."""
        cfg = self.config
        if frames.shape[-1] != cfg.t * cfg.c:
            raise dc.ShapeError(f"encode_shared: expected {cfg.t} frames of {cfg.c} channels, got {frames.shape}")
        m = np.asarray(meas, dtype=self.dtype)
        if m.shape != (frames.shape[0], cfg.meas_inputs):
            raise dc.ShapeError(f"encode_shared: measurements {m.shape}, expected (N, {cfg.meas_inputs})")
        x = dc.concat([frames, j_ego], axis=-1)
        maps: list[Tensor] = []
        flat = _conv_stack(x, self.params, "shared", len(cfg.enc_widths), maps)
        img = dc.leaky_relu(_dense(flat, self.params, "shared.fc"))
        h = dc.leaky_relu(_dense(Tensor(m), self.params, "meas.fc0"))
        h = dc.relu(_dense(h, self.params, "meas.fc1"))
        return SharedCode(dc.concat([img, h], axis=-1), maps, j_ego)

    def encode_prior(self, shared: SharedCode, i_t: Tensor, j_ego: Tensor) -> GaussianCode:
        cfg = self.config
        n = shared.shape[0]
        if cfg.no_bcde:
            return GaussianCode.standard(n, cfg.latent_dim, self.dtype)
        x = _conv_stack(dc.concat([i_t, j_ego], axis=-1), self.params, "prior", len(cfg.narrow_widths))
        h = dc.leaky_relu(_dense(dc.concat([x, shared.code], axis=-1), self.params, "prior.fc"))
        return GaussianCode(_dense(h, self.params, "prior.mu"), _dense(h, self.params, "prior.logvar"))

    def encode_posterior(self, shared: SharedCode, j_env: Tensor | None) -> GaussianCode:
        if j_env is None:
            raise ValueError("encode_posterior needs the target frame; not available at inference")
        cfg = self.config
        x = _conv_stack(j_env, self.params, "post", len(cfg.narrow_widths))
        h = dc.leaky_relu(_dense(dc.concat([x, shared.code], axis=-1), self.params, "post.fc"))
        return GaussianCode(_dense(h, self.params, "post.mu"), _dense(h, self.params, "post.logvar"))

    def encode_motion(self, diffs: Tensor | None, n: int) -> GaussianCode:
        """Mean from the network, variance fixed at epsilon; zeros when disabled."""
        cfg = self.config
        logvar = np.full((n, cfg.motion_dim), np.log(cfg.epsilon), dtype=self.dtype)
        if cfg.no_me or diffs is None or cfg.n_diffs == 0:
            return GaussianCode(Tensor(np.zeros((n, cfg.motion_dim), dtype=self.dtype)), Tensor(logvar))
        x = _conv_stack(diffs, self.params, "motion", len(cfg.narrow_widths))
        return GaussianCode(_dense(x, self.params, "motion.mu"), Tensor(logvar))

    def decode(self, shared: SharedCode, z: Tensor, motion: Tensor) -> Tensor:
        cfg = self.config
        x = dc.concat([shared.code, z, motion], axis=-1)
        x = dc.leaky_relu(_dense(x, self.params, "dec.fc0"))
        x = dc.leaky_relu(_dense(x, self.params, "dec.fc1"))
        bh, bw = cfg.bottom
        x = dc.reshape(x, (x.shape[0], bh, bw, cfg.enc_widths[-1]))
        n_layers = len(cfg.enc_widths)
        for i in range(n_layers):
            x = dc.concat([x, shared.maps[n_layers - 1 - i]], axis=-1)
            x = dc.conv_transpose2d(x, self.params[f"dec.deconv{i}.w"], self.params[f"dec.deconv{i}.b"], stride=2)
            x = dc.leaky_relu(dc.crop2d(x, 1))
        x = dc.pad2d(dc.concat([x, shared.j_ego], axis=-1), 1)
        x = dc.conv2d(x, self.params["dec.head.w"], self.params["dec.head.b"])
        return dc.sigmoid(x) if cfg.variant == "base" else dc.tanh(x)


# ---------------------------------------------------------------- sampling

def reparameterize(code: GaussianCode, noise: np.ndarray) -> Tensor:
    return code.mean + dc.exp(0.5 * code.logvar) * Tensor(noise.astype(code.mean.dtype))


def sample_latent(prior: GaussianCode, posterior: GaussianCode | None, mode: str,
                  rng: np.random.Generator, eta_percent: float = 10.0,
                  use_prior: bool | None = None) -> tuple[Tensor, bool]:
    """Draw the unshared code.  Returns (z, drawn_from_prior).

    train: prior with probability eta_percent/100 (or as forced by
    ``use_prior``), posterior otherwise, reparameterized.
    sample: a draw from the prior.  eval: the prior mean.
    """
    if mode == "eval":
        return prior.mean, True
    if mode == "sample":
        return reparameterize(prior, rng.standard_normal(prior.mean.shape)), True
    if mode != "train":
        raise ValueError(f"unknown sampling mode {mode!r}")
    if posterior is None:
        raise ValueError("train-mode sampling needs the posterior code")
    if use_prior is None:
        use_prior = bool(rng.random() < eta_percent / 100.0)
    src = prior if use_prior else posterior
    return reparameterize(src, rng.standard_normal(src.mean.shape)), use_prior


def dl_compose(j_ego, j_diff_hat) -> tuple[Tensor, Tensor]:
    """raw = j_ego + predicted difference, clipped = raw limited to [0, 1]."""
    a, b = dc.as_tensor(j_ego), dc.as_tensor(j_diff_hat)
    if a.shape != b.shape:
        raise dc.ShapeError(f"dl_compose: shape mismatch {a.shape} vs {b.shape}")
    raw = a + b
    return raw, dc.clip(raw, 0.0, 1.0)


# ---------------------------------------------------------------- step engine

@dataclass
class Geometry:
    """Static description of the frames a model operates on."""

    h: int
    w: int
    c: int
    anchor: tuple[int, int]
    meters_per_pixel: float
    dt: float
    channel_roles: tuple[str, ...]
    value_mode: str = "real"
    ego_length_px: float = 9.0
    ego_width_px: float = 4.0
    pad: int = 20

    @property
    def interp(self) -> str:
        return "nearest" if self.value_mode == "binary" else "bilinear"

    @property
    def ego_mask(self) -> np.ndarray:
        return np.array([r == "ego" for r in self.channel_roles], dtype=bool)

    def footprint(self) -> np.ndarray:
        """(H, W, C) frame holding the canonical ego stamp in ego channels, zero elsewhere."""
        fp = ego_footprint(self.h, self.w, self.anchor, self.ego_length_px, self.ego_width_px,
                           binary=self.value_mode == "binary")
        out = np.zeros((self.h, self.w, self.c))
        out[..., self.ego_mask] = fp[..., None]
        return out


@dataclass
class Context:
    """Rolling input window for a batch of N sequences."""

    frames: list[Tensor]        # t tensors (N, H, W, C), oldest first
    meas: np.ndarray            # (N, t, 4) world-frame (px, py, vx, vy)
    headings: np.ndarray        # (N,) ego heading at the newest frame
    diffs: list[Tensor]         # t-1 tensors (N, H, W, C), aligned differences

    @property
    def n(self) -> int:
        return self.meas.shape[0]


@dataclass
class StepResult:
    frame: Tensor               # ego-centred prediction fed back to the window
    pred_raw: Tensor            # network-frame prediction before clipping (loss input)
    pred_j: Tensor              # network-frame prediction after clipping
    j_ego: Tensor
    target: Tensor | None       # aligned teacher target (j_env, or i_{t+1} without RBM)
    prior: GaussianCode | None
    posterior: GaussianCode | None
    next_meas: np.ndarray       # (N, 4)
    next_heading: np.ndarray    # (N,)
    new_diff: Tensor
    deltas: list[PoseDelta] = field(default_factory=list)


def measurement_features(meas: np.ndarray, heading: np.ndarray, extra: np.ndarray) -> np.ndarray:
    """Measurements relative to the newest frame, rotated into its ego frame, scaled.

    meas: (N, t, 4); heading: (N,); extra: (N, 4) anticipated next measurement
    or (N, 2) raw action.
    """
    c, s = np.cos(heading)[:, None], np.sin(heading)[:, None]
    ref = meas[:, -1:, :2]
    dx, dy = meas[..., 0] - ref[..., 0], meas[..., 1] - ref[..., 1]
    vx, vy = meas[..., 2], meas[..., 3]
    feats = np.stack([c * dx + s * dy, -s * dx + c * dy, c * vx + s * vy, -s * vx + c * vy], axis=-1)
    if extra.shape[1] == 4:
        ex = np.stack([
            c[:, 0] * (extra[:, 0] - ref[:, 0, 0]) + s[:, 0] * (extra[:, 1] - ref[:, 0, 1]),
            -s[:, 0] * (extra[:, 0] - ref[:, 0, 0]) + c[:, 0] * (extra[:, 1] - ref[:, 0, 1]),
            c[:, 0] * extra[:, 2] + s[:, 0] * extra[:, 3],
            -s[:, 0] * extra[:, 2] + c[:, 0] * extra[:, 3],
        ], axis=-1)
    else:
        ex = extra
    return np.concatenate([feats.reshape(len(meas), -1), ex], axis=1) / MEAS_SCALE


class PersistenceStub:
    """Predicts that nothing in the environment moves: j_env := j_ego."""

    name = "persistence"


class OracleStub:
    """Returns the true aligned target; needs teacher frames at every step."""

    name = "oracle"


def _specs(deltas: list[PoseDelta], geom: Geometry, offset: int = 0) -> list[WarpSpec]:
    pivot = (geom.anchor[0] + offset, geom.anchor[1] + offset)
    return [WarpSpec.from_pose_delta(d, geom.meters_per_pixel, pivot) for d in deltas]


def _as_batch_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def predict_batch(model, ctx: Context, actions: np.ndarray, geom: Geometry, mode: str = "eval",
                  rng: np.random.Generator | None = None, target_frames: np.ndarray | None = None,
                  use_prior: bool | None = None) -> StepResult:
    """One closed-loop prediction step for a batch.

    ``model`` is a :class:`Predictor` or one of the stubs.  ``target_frames``
    (N, H, W, C) is the ground-truth next frame; it is needed for training
    (posterior and loss target) and by the oracle stub, and is only ever
    warped by the input transform, never fed to the window.
    """
    rng = rng or np.random.default_rng(0)
    actions = np.asarray(actions, dtype=np.float64).reshape(ctx.n, 2)
    nxt, dp, dtheta, theta = step_arrays(ctx.meas[:, -1], actions, geom.dt, ctx.headings)
    deltas = [PoseDelta((float(dp[i, 0]), float(dp[i, 1])), float(dtheta[i]), float(theta[i])) for i in range(ctx.n)]
    next_heading = theta + dtheta
    cfg = getattr(model, "config", None)
    no_rbm = bool(cfg is not None and cfg.no_rbm)
    dtype = model.dtype if isinstance(model, Predictor) else ctx.frames[-1].data.dtype
    i_t = ctx.frames[-1]
    specs = _specs(deltas, geom)
    ego = geom.ego_mask
    h, w = geom.h, geom.w
    fwd = [None if s.is_identity else sampling_matrix(h, w, s, False, geom.interp) for s in specs]

    if no_rbm:
        j_ego = i_t
        target = None if target_frames is None else _as_batch_tensor(target_frames, dtype)
    else:
        j_ego = _apply(i_t, fwd, ego)
        target = None
        if target_frames is not None:
            target = _apply(_as_batch_tensor(target_frames, dtype).detach(), fwd, None)

    prior = posterior = None
    if isinstance(model, PersistenceStub):
        pred_raw = pred_j = j_ego
    elif isinstance(model, OracleStub):
        if target_frames is None:
            raise ValueError("oracle stub needs the ground-truth next frames")
        pred_raw = pred_j = target
    else:
        feats = measurement_features(ctx.meas, ctx.headings, actions if no_rbm else nxt)
        frames = dc.concat(ctx.frames, axis=-1)
        shared = model.encode_shared(frames, feats, j_ego)
        prior = model.encode_prior(shared, i_t, j_ego)
        if mode == "train":
            if target is None:
                raise ValueError("train mode needs target frames")
            posterior = model.encode_posterior(shared, target)
        diffs = dc.concat(ctx.diffs, axis=-1) if ctx.diffs else None
        motion = model.encode_motion(diffs, ctx.n)
        if mode == "eval":
            m_code = motion.mean
        else:
            m_code = reparameterize(motion, rng.standard_normal(motion.mean.shape))
        z, _ = sample_latent(prior, posterior, mode, rng, model.config.eta_percent, use_prior)
        out = model.decode(shared, z, m_code)
        if model.config.variant == "dl":
            pred_raw, pred_j = dl_compose(j_ego, out)
        else:
            pred_raw = pred_j = out

    if no_rbm:
        frame = pred_j
    elif isinstance(model, OracleStub):
        frame = _oracle_frame(target_frames, specs, deltas, geom, dtype)
    else:
        inv = [None if s.is_identity else sampling_matrix(h, w, s, True, geom.interp) for s in specs]
        frame = _restamp(_apply(pred_j, inv, None), geom)
    new_diff = pred_j - j_ego
    return StepResult(frame, pred_raw, pred_j, j_ego, target, prior, posterior, nxt, next_heading, new_diff, deltas)


def _apply(x: Tensor, mats, channels) -> Tensor:
    if all(m is None for m in mats):
        return x
    return dc.sparse_apply(x, mats, channels)


def _restamp(x: Tensor, geom: Geometry) -> Tensor:
    """Replace ego channels by the canonical footprint at the anchor."""
    ego = geom.ego_mask
    if not ego.any():
        return x
    keep = (~ego).astype(x.data.dtype).reshape(1, 1, 1, -1)
    fp = geom.footprint().astype(x.data.dtype)[None]
    return x * keep + Tensor(fp)


def _oracle_frame(target_frames, specs, deltas, geom: Geometry, dtype) -> Tensor:
    """Input transform then output transform on a padded canvas, then crop.

    Padding keeps the content that the forward warp pushes past the border,
    so the roundtrip is exact for integer shifts and nearest resampling.
    """
    p = geom.pad
    x = np.pad(np.asarray(target_frames, dtype=np.float64), [(0, 0), (p, p), (p, p), (0, 0)])
    hp, wp = geom.h + 2 * p, geom.w + 2 * p
    pspecs = _specs(deltas, geom, offset=p)
    out = np.empty_like(x)
    for i, s in enumerate(pspecs):
        flat = x[i].reshape(hp * wp, geom.c)
        if s.is_identity:
            out[i] = x[i]
            continue
        fwd = sampling_matrix(hp, wp, s, False, geom.interp)
        inv = sampling_matrix(hp, wp, s, True, geom.interp)
        out[i] = np.clip(inv @ (fwd @ flat), 0, 1).reshape(hp, wp, geom.c)
    cropped = out[:, p:p + geom.h, p:p + geom.w]
    return _restamp(Tensor(cropped.astype(dtype)), geom)


def advance(ctx: Context, res: StepResult) -> Context:
    """Slide the window: drop the oldest frame, append the prediction."""
    meas = np.concatenate([ctx.meas[:, 1:], res.next_meas[:, None]], axis=1)
    frames = ctx.frames[1:] + [res.frame]
    diffs = (ctx.diffs[1:] + [res.new_diff]) if ctx.diffs else []
    return Context(frames, meas, res.next_heading, diffs)
