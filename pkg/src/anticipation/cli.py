"""Command-line entry point: gen, train, eval, check.

Exit codes: 0 ok, 1 check failures, 2 config error, 3 numeric failure,
4 data error.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .records import ConfigError, DataError, format_kv, load_dataset, parse_kv, write_pgm

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_DATA = 0, 1, 2, 3, 4


@dataclass
class GenConfig:
    mode: str = "highway"
    n_agents: int = 40
    length: int = 40
    policy: str = "recorded"
    rare_policy: str = "hard-brake"
    rare_start: int = -1              # -1: last 20 steps
    h: int = 64
    w: int = 64
    meters_per_pixel: float = 0.5
    dt: float = 0.1
    k_v: float = 0.5
    k_g: float = 1.0
    headway: float = 1.5
    min_gap: float = 2.0
    a_max: float = 6.0

    def scenario(self, seed: int):
        from .worldsim import FollowParams, ScenarioSpec

        try:
            return ScenarioSpec(
                mode=self.mode, n_agents=self.n_agents, length=self.length, policy=self.policy, seed=seed,
                h=self.h, w=self.w, meters_per_pixel=self.meters_per_pixel, dt=self.dt,
                rare_policy=self.rare_policy, rare_start=None if self.rare_start < 0 else self.rare_start,
                follow=FollowParams(self.k_v, self.k_g, self.headway, self.min_gap, self.a_max),
            )
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def to_kv(self) -> dict[str, object]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _read_config(path: str | None, cls, overrides: dict[str, str] | None = None):
    from .pipeline import dataclass_from_kv

    kv: dict[str, str] = {}
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"{p}: config file not found")
        kv = parse_kv(p.read_text(), str(p))
    kv.update(overrides or {})
    return dataclass_from_kv(cls, kv, path or "<defaults>")


def _echo(cfg, out: Path | None, name: str = "config_resolved.txt") -> str:
    text = format_kv(cfg.to_kv())
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / name).write_text(text)
    return text


# ---------------------------------------------------------------- commands

def cmd_gen(args) -> int:
    from .worldsim import generate

    cfg = _read_config(args.config, GenConfig, {"mode": args.mode} if args.mode else None)
    out = Path(args.out)
    print(_echo(cfg, out), end="")
    for i in range(args.count):
        seed = args.seed + i
        rec = generate(cfg.scenario(seed))
        rec.save(out / f"seq_{i:05d}")
        print(f"seq_{i:05d} seed={seed} collision={rec.flags['collision']}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .pipeline import Checkpoint, TrainConfig, train

    overrides = {"seed": str(args.seed)} if args.seed is not None else {}
    cfg = _read_config(args.config, TrainConfig, overrides)
    out = Path(args.out)
    data = load_dataset(args.data)
    resume = Checkpoint.load(args.resume) if args.resume else None
    if resume is not None and not args.config:
        cfg = resume.train_config
    print(_echo(cfg, out), end="")
    res = train(cfg, data, out_dir=out, resume=resume)
    last = res.step_curve[-1] if res.step_curve else None
    if last:
        print(f"steps={res.checkpoint.step} final_total={last['total']!r}")
    return EXIT_OK


def _rare_suite(mode: str, count: int, seed: int, t: int, length: int | None = None):
    from .worldsim import RARE_STEPS, ScenarioSpec, generate

    length = length or t + RARE_STEPS + 1
    return [generate(ScenarioSpec(mode=mode, length=length, policy="rare-sample", rare_policy="hard-brake",
                                  seed=seed + i, rare_start=t - 1)) for i in range(count)]


def cmd_eval(args) -> int:
    from .metrics import kde_fit
    from .pipeline import Checkpoint, evaluate
    from .predictor import OracleStub, PersistenceStub

    try:
        horizons = tuple(int(h) for h in args.horizons.split(",") if h.strip())
    except ValueError:
        raise ConfigError(f"bad --horizons {args.horizons!r}") from None
    if not horizons or min(horizons) < 1:
        raise ConfigError("--horizons needs positive integers")
    if args.stub:
        model = {"persistence": PersistenceStub(), "oracle": OracleStub()}[args.stub]
        t = args.t
    elif args.checkpoint:
        model = Checkpoint.load(args.checkpoint).model
        t = model.config.t
    else:
        raise ConfigError("eval needs --checkpoint or --stub")

    if args.data:
        data = load_dataset(args.data)
        if args.suite == "rare" and not all(r.flags.get("policy") == "rare-sample" for r in data):
            raise DataError(f"{args.data}: --suite rare needs rare-action records (policy=rare-sample)")
    elif args.suite == "rare":
        mode = args.mode or ("highway" if getattr(model, "config", None) is None or model.config.c == 3 else "urban")
        data = _rare_suite(mode, args.count, args.seed, t, t + max(horizons))
    else:
        raise ConfigError("regular suite needs --data")

    kde = None
    if args.reference:
        ref = load_dataset(args.reference)
        frames = np.concatenate([r.frames for r in ref])
        kde = kde_fit(frames, max_refs=args.kde_refs, rng=np.random.default_rng(args.seed))
    report = evaluate(model, data, horizons, kde, t=t)
    header = f"# suite={args.suite} horizons={','.join(map(str, horizons))} model={args.stub or args.checkpoint}\n"
    print(header + report.to_text(), end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.csv").write_text(report.to_csv())
        (out / "report.txt").write_text(header + report.to_text())
    if args.dump_frames:
        _dump_frames(model, data, horizons, t, Path(args.dump_frames))
    return EXIT_OK


def _dump_frames(model, data, horizons, t: int, out: Path) -> None:
    """One PGM per sequence and horizon: channels stacked vertically, target left, prediction right."""
    from .pipeline import eval_start, geometry_of, prepare, rollout

    out.mkdir(parents=True, exist_ok=True)
    geom = geometry_of(data[0])
    no_rbm = bool(getattr(getattr(model, "config", None), "no_rbm", False))
    for i, rec in enumerate(data):
        seq = prepare(rec, geom, no_rbm)
        ro = rollout(model, [seq], [eval_start(rec, t)], max(horizons), geom, t=t)
        for h in horizons:
            tgt, pred = ro.targets[0, h - 1], ro.frames[0, h - 1]
            gap = np.full((geom.h, 2), 0.5)
            rows = [np.concatenate([tgt[..., c], gap, np.clip(pred[..., c], 0, 1)], axis=1) for c in range(geom.c)]
            img = np.concatenate(rows, axis=0)
            write_pgm(out / f"seq{i:05d}_k{h:02d}.pgm", np.round(img * 255).astype(np.uint8))


def cmd_check(args) -> int:
    failures: list[str] = []
    code = EXIT_OK
    if not (args.record or args.gradcheck or args.roundtrip):
        raise ConfigError("check needs --record, --gradcheck or --roundtrip")
    if args.record:
        for f in check_record(args.record):
            failures.append(f"record {f}")
            code = EXIT_DATA
    if args.gradcheck:
        rep = check_gradients(seed=args.seed)
        print(f"gradcheck max_rel_err={rep.max_rel_err:.3e} tol={rep.tol}")
        if not rep.passed:
            failures.extend(f"gradcheck {b.name} max_rel_err={b.max_rel_err:.3e}" for b in rep.blocks if b.max_rel_err >= rep.tol)
            failures.extend(f"gradcheck {f}" for f in rep.failures)
            code = code or EXIT_NUMERIC
    if args.roundtrip:
        err = check_roundtrip(args.samples, seed=args.seed)
        print(f"roundtrip mean_interior_abs_err={err:.5f} n={args.samples}")
        if not err < 0.02:
            failures.append(f"roundtrip mean_interior_abs_err={err:.5f} >= 0.02")
            code = code or EXIT_NUMERIC
    for f in failures:
        print(f"FAIL {f}")
    print("PASS" if not failures else f"FAILED {len(failures)}")
    return code


def check_record(path) -> list[str]:
    """Validate one record directory (or every record below a directory)."""
    from .kinematics import ActionCmd, Measurements, inverse_actions, replay
    from .records import SequenceRecord, list_records

    problems = []
    try:
        paths = list_records(path)
    except DataError as e:
        return [str(e)]
    for p in paths:
        try:
            rec = SequenceRecord.load(p)
        except (DataError, ConfigError) as e:
            problems.append(str(e))
            continue
        for t in range(rec.length):
            try:
                rec.ogm(t)
            except ValueError as e:
                problems.append(f"{p}: frame {t}: {e}")
                break
        if rec.value_mode == "binary" and not np.all((rec.frames == 0) | (rec.frames == 1)):
            problems.append(f"{p}: binary record has non-binary pixels")
        ms = [Measurements.from_array(m) for m in rec.measurements]
        acts = [ActionCmd(*a) for a in rec.actions]
        from .pipeline import _initial_heading

        replayed = replay(ms[0], acts, rec.dt, _initial_heading(rec))
        err = max(abs(a.p[0] - b.p[0]) + abs(a.p[1] - b.p[1]) for a, b in zip(ms, replayed))
        if err > 1e-9:
            problems.append(f"{p}: measurements do not replay from actions (max error {err:.3e} m)")
        inv = inverse_actions(ms, rec.dt, _initial_heading(rec))
        again = replay(ms[0], inv.actions, rec.dt, _initial_heading(rec))
        err = max(abs(a.p[0] - b.p[0]) + abs(a.p[1] - b.p[1]) for a, b in zip(ms, again))
        if err > 1e-9:
            problems.append(f"{p}: inverse actions do not reproduce positions (max error {err:.3e} m)")
    return problems


def tiny_model(seed: int = 0, variant: str = "base", dtype=np.float64):
    from .predictor import Predictor, PredictorConfig

    cfg = PredictorConfig(variant=variant, h=16, w=16, c=2, t=2, latent_dim=8, motion_dim=4,
                          enc_widths=(3, 4), narrow_widths=(2, 2), shared_dim=6, meas_hidden=5, meas_dim=3,
                          prior_hidden=5, post_hidden=5, dec_hidden=6, eta_percent=100.0)
    return Predictor(cfg, seed=seed, dtype=dtype)


def tiny_loss_fn(model, seed: int = 0, use_prior: bool = True, k: int = 2):
    """Closure computing a k-step training loss of ``model`` on a fixed random batch."""
    from .diffcalc import Tensor
    from .gridops import ego_footprint
    from .losses import horizon_loss, step_loss
    from .predictor import Context, Geometry, advance, predict_batch

    cfg = model.config
    rng = np.random.default_rng(seed)
    geom = Geometry(cfg.h, cfg.w, cfg.c, (8, 8), 0.5, 0.1, ("occupancy", "ego"), "real", 5.0, 3.0)
    n = 2
    fp = ego_footprint(cfg.h, cfg.w, (8, 8), 5.0, 3.0)
    frames = rng.uniform(0.05, 0.95, (cfg.t + k, n, cfg.h, cfg.w, cfg.c))
    frames[..., 1] = fp
    meas = np.stack([np.array([[0.3 * i, 0.01 * i, 3.0, 0.1] for i in range(cfg.t)])] * n)
    acts = rng.normal(0, [1.0, 0.2], (k, n, 2))
    diffs = [rng.uniform(-0.5, 0.5, (n, cfg.h, cfg.w, cfg.c)) for _ in range(cfg.t - 1)]

    def fn():
        ctx = Context([Tensor(f) for f in frames[:cfg.t]], meas.copy(), np.zeros(n), [Tensor(d) for d in diffs])
        steps = []
        srng = np.random.default_rng(seed + 1)
        for j in range(k):
            res = predict_batch(model, ctx, acts[j], geom, "train", srng, frames[cfg.t + j], use_prior)
            steps.append(step_loss(res.target, res.pred_raw, res.posterior, res.prior, 0.5, cfg.variant, "mse"))
            ctx = advance(ctx, res)
        return horizon_loss(steps, k)

    return fn


def check_gradients(seed: int = 0, variant: str = "base", max_coords: int | None = 6):
    from .diffcalc import grad_check

    model = tiny_model(seed, variant)
    # move zero-initialised heads off zero so every path carries gradient
    prng = np.random.default_rng(seed + 7)
    for name, p in model.params.items():
        if not np.any(p.data):
            p.data[...] = prng.normal(0, 0.1, p.data.shape)
    fn = tiny_loss_fn(model, seed)
    return grad_check(fn, model.params, step=1e-5, tol=1e-4, max_coords=max_coords, seed=seed)


def check_roundtrip(samples: int = 1000, seed: int = 0, h: int = 64, margin: int = 20) -> float:
    from .gridops import WarpSpec, interior_mask, random_scene, warp

    rng = np.random.default_rng(seed)
    mask = interior_mask(h, h, margin)
    errs = []
    for _ in range(samples):
        x = random_scene(rng, h, h)
        r, ph = rng.uniform(0, 10), rng.uniform(0, 2 * np.pi)
        spec = WarpSpec(rng.uniform(-0.3, 0.3), (r * np.cos(ph), r * np.sin(ph)), x.ego_anchor)
        y = warp(warp(x, spec), spec, inverse=True)
        errs.append(np.abs(y.data - x.data)[mask].mean())
    return float(np.mean(errs))


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="anticipation", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate synthetic sequence records")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--count", type=int, default=1)
    g.add_argument("--mode", choices=("highway", "urban"))
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a predictor")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--resume")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint or a stub")
    e.add_argument("--checkpoint")
    e.add_argument("--stub", choices=("persistence", "oracle"))
    e.add_argument("--data")
    e.add_argument("--horizons", default="1,5,10,20")
    e.add_argument("--suite", choices=("regular", "rare"), default="regular")
    e.add_argument("--reference", help="record directory for the KDE likelihood")
    e.add_argument("--kde-refs", type=int, default=2000)
    e.add_argument("--dump-frames")
    e.add_argument("--out")
    e.add_argument("--t", type=int, default=10, help="window length for stubs")
    e.add_argument("--mode", choices=("highway", "urban"), help="mode of a generated rare suite")
    e.add_argument("--count", type=int, default=8, help="size of a generated rare suite")
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("check", help="run invariant suites")
    c.add_argument("--record")
    c.add_argument("--gradcheck", action="store_true")
    c.add_argument("--roundtrip", action="store_true")
    c.add_argument("--samples", type=int, default=1000)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_check)
    return ap


def main(argv=None) -> int:
    from .pipeline import NumericError

    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
