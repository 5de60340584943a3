"""``eqprop`` command line.

Human-readable progress goes to stderr, the one-line summary to stdout and
everything machine-readable into files under ``--out``.

Exit codes: 0 success, 1 a check failed or training diverged, 2 bad input
(config, dataset, checkpoint or a violated precondition).
"""
import argparse
import configparser
import csv
import logging
import os
import sys

log = logging.getLogger("eqprop")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
               "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS")


class UsageError(Exception):
    """Reported on stderr with exit code 2."""


def _common(p):
    p.add_argument("--config", help="INI config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (section.key=value or key=value); repeatable")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, help="global seed (overrides run.seed)")
    p.add_argument("--threads", type=int, help="BLAS/OpenMP threads (overrides run.threads)")


def build_parser():
    ap = argparse.ArgumentParser(prog="eqprop", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a network from a config")
    _common(p)
    p.add_argument("--epochs", type=int, help="shortcut for --set optim.epochs=N")
    p.add_argument("--data", help="dataset root (falls back to data.data_root, then $EQPROP_DATA)")
    p.add_argument("--resume", metavar="CKPT", help="continue from a checkpoint")

    p = sub.add_parser("verify", help="run the built-in verification checks")
    _common(p)
    p.add_argument("--only", action="append", default=[], metavar="CHECK",
                   help="run only these checks (repeatable or comma separated)")
    p.add_argument("--list", action="store_true", help="list the checks and exit")

    p = sub.add_parser("transients", help="per-step EP estimates against truncated BPTT")
    _common(p)
    p.add_argument("--checkpoint", help="parameters to probe (default: seeded init from the config)")
    p.add_argument("--data", help="dataset root for the probe batch")
    p.add_argument("--synthetic", action="store_true",
                   help="probe with seeded uniform inputs and random labels instead of data")
    p.add_argument("--batch", type=int, default=8, help="probe batch size")
    p.add_argument("--param", action="append", default=[], help="tensor(s) to dump (default all)")
    p.add_argument("--index", default="peak",
                   help="flat coordinate to dump, 'peak' (largest |BPTT| entry) or 'all'")

    p = sub.add_parser("angle", help="forward/backward weight angles of asymmetric checkpoints")
    _common(p)
    p.add_argument("checkpoints", nargs="+")

    p = sub.add_parser("inspect", help="describe a checkpoint")
    _common(p)
    p.add_argument("checkpoint")
    return ap


def _peek_threads(args):
    """Thread count must be known before numpy loads, so read it without the config module."""
    if args.threads:
        return args.threads
    for item in reversed(args.overrides):
        key, _, value = item.partition("=")
        if key.strip() in ("threads", "run.threads") and value.strip().isdigit():
            return int(value)
    if args.config and os.path.exists(args.config):
        cp = configparser.ConfigParser(interpolation=None)
        try:
            cp.read(args.config)
            return cp.getint("run", "threads", fallback=1)
        except (configparser.Error, ValueError):
            pass  # the real parser reports it with a line number
    return 1


def _set_threads(n):
    for var in THREAD_VARS:
        os.environ[var] = str(n)


def _load_config(args, extra=()):
    from .config import load_config

    overrides = list(args.overrides) + list(extra)
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    if args.threads is not None:
        overrides.append(f"run.threads={args.threads}")
    if args.config:
        try:
            with open(args.config) as fh:
                text = fh.read()
        except OSError as exc:
            raise UsageError(f"cannot read config: {exc}") from None
        return load_config(text, overrides, source=args.config)
    return load_config("", overrides, source="<defaults>")


def _write_snapshot(out, config):
    with open(os.path.join(out, "config.ini"), "w") as fh:
        fh.write(config.to_ini())


def cmd_train(args):
    from . import checkpoint, trainer

    extra = [f"optim.epochs={args.epochs}"] if args.epochs is not None else []
    if args.data:
        extra.append(f"data.data_root={args.data}")
    config = _load_config(args, extra)
    if not args.out:
        raise UsageError("train needs --out")

    params, velocity, start = None, None, 0
    if args.resume:
        ck = checkpoint.load(args.resume)
        params, velocity, start = ck.params, ck.velocity, ck.epoch
        if params.topology != config.topology():
            raise UsageError(f"{args.resume}: topology differs from the config")

    # everything that can fail on bad input happens before the first file is written
    train_set = test_set = None
    if config.epochs > start:
        train_set, test_set = trainer.load_splits(config)
        log.info("data: %d train / %d test samples", len(train_set), len(test_set))

    os.makedirs(args.out, exist_ok=True)
    _write_snapshot(args.out, config)
    log.info("writing to %s", args.out)
    try:
        params, history = trainer.train(config, train_set, test_set, args.out, params, start,
                                         velocity)
    except trainer.TrainingDiverged as exc:
        log.error("%s; last good state in %s", exc, exc.checkpoint_path)
        print(f"train diverged epoch={exc.epoch} batch={exc.batch} checkpoint={exc.checkpoint_path}")
        return EXIT_FAIL
    if history:
        m = history[-1]
        print(f"train ok epochs={m.epoch} train_error={m.train_error:.2f} "
              f"test_error={m.test_error:.2f} out={args.out}")
    else:
        print(f"train ok epochs={start} (no training) out={args.out}")
    return EXIT_OK


def cmd_verify(args):
    from . import verification

    if args.list:
        for name, fn in verification.CHECKS.items():
            print(f"{name}: {(fn.__doc__ or '').strip().splitlines()[0] if fn.__doc__ else ''}")
        return EXIT_OK
    only = [n.strip() for item in args.only for n in item.split(",") if n.strip()]
    unknown = [n for n in only if n not in verification.CHECKS]
    if unknown:
        raise UsageError(f"unknown check(s) {unknown}; available: {', '.join(verification.CHECKS)}")
    results = verification.run_checks(only or None, on_result=lambda c: log.info("%s", c.line()))
    passed = sum(c.passed for c in results)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        verification.write_report(results, os.path.join(args.out, "verify.txt"),
                                  os.path.join(args.out, "verify.csv"))
    failed = [c.name for c in results if not c.passed]
    tail = f" failed={','.join(failed)}" if failed else ""
    print(f"verify {passed}/{len(results)} passed{tail}")
    return EXIT_OK if not failed else EXIT_FAIL


def _probe_batch(config, args, params):
    import numpy as np

    rng = np.random.default_rng([config.seed, 5])
    top = params.topology
    if args.synthetic:
        x = rng.uniform(0, 1, (args.batch, *top.input_shape))
        y = np.eye(top.n_classes)[rng.integers(0, top.n_classes, args.batch)]
        return x, y
    from . import trainer

    if args.data:
        config.data_root = args.data
    _, test = trainer.load_splits(config)
    idx = np.arange(min(args.batch, len(test)))
    return test.images[idx], test.one_hot(idx)


def _pick_index(spec, ref):
    import numpy as np

    if spec == "all":
        return list(range(ref.size))
    if spec == "peak":
        return [int(np.argmax(np.abs(ref)))]
    try:
        i = int(spec)
    except ValueError:
        raise UsageError(f"--index must be an integer, 'peak' or 'all', not {spec!r}") from None
    if not 0 <= i < ref.size:
        raise UsageError(f"--index {i} out of range for a tensor with {ref.size} entries")
    return [i]


def cmd_transients(args):
    from . import checkpoint, oracle
    from .model import Scheme, init_params
    from .phases import free_phase, transient_record

    config = _load_config(args)
    if not args.out:
        raise UsageError("transients needs --out")
    if args.checkpoint:
        params = checkpoint.load(args.checkpoint).params
    else:
        import numpy as np
        params = init_params(config.topology(), np.random.default_rng([config.seed, 0, 0]),
                             config.init_scale)
    if params.topology.scheme is not Scheme.SYMMETRIC:
        raise UsageError("transients need symmetric connections; the EP/BPTT "
                         "equivalence does not hold for asymmetric ones")
    x, y = _probe_batch(config, args, params)
    T, K, beta = config.T, config.K_eff, config.beta_eff
    try:
        bp = oracle.bptt(x, y, params, T, K)
    except oracle.PreconditionError as exc:
        raise UsageError(f"{exc}; increase T or reduce K") from None
    fr = free_phase(x, params, T)
    pos = transient_record(x, y, params, fr.state, beta, K)
    neg = transient_record(x, y, params, fr.state, -beta, K)
    names = [n for n in pos[0] if not args.param or n in args.param]
    missing = set(args.param) - set(pos[0])
    if missing:
        raise UsageError(f"unknown tensor(s) {sorted(missing)}; choose from {list(pos[0])}")

    os.makedirs(args.out, exist_ok=True)
    _write_snapshot(args.out, config)
    path = os.path.join(args.out, "transients.csv")
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["layer", "index", "t", "ep_plus", "ep_minus", "ep_sym", "bptt"])
        for name in names:
            for i in _pick_index(args.index, bp.at(K)[name].ravel()):
                wr.writerow([name, i, 0, 0.0, 0.0, 0.0, 0.0])
                for t in range(1, K + 1):
                    p = float(pos[t - 1][name].ravel()[i])
                    m = float(neg[t - 1][name].ravel()[i])
                    b = -float(bp.at(t)[name].ravel()[i])
                    wr.writerow([name, i, t, repr(p), repr(m), repr(0.5 * (p + m)), repr(b)])
    log.info("free-phase residual at T-K: %.2e", bp.residual)
    print(f"transients ok tensors={len(names)} K={K} beta={beta} csv={path}")
    return EXIT_OK


def cmd_angle(args):
    from . import checkpoint
    from .model import Scheme
    from .oracle import alignment_angles

    rows = []
    for path in args.checkpoints:
        ck = checkpoint.load(path)
        if ck.params.topology.scheme is not Scheme.ASYMMETRIC:
            raise UsageError(
                f"{path}: checkpoint has symmetric connections, so there are no separate "
                "backward weights to compare (the angle is 0 by construction); "
                "angles are defined for scheme=asymmetric runs")
        angles = alignment_angles(ck.params)
        for n in sorted(angles):
            log.info("%s epoch %d layer %d: %.3f deg", path, ck.epoch, n, angles[n])
            rows.append([path, ck.epoch, n, f"{angles[n]:.6f}"])
    out = args.out or os.path.dirname(os.path.abspath(args.checkpoints[0]))
    os.makedirs(out, exist_ok=True)
    csv_path = os.path.join(out, "angles.csv")
    new = not os.path.exists(csv_path)
    with open(csv_path, "a", newline="") as fh:
        wr = csv.writer(fh)
        if new:
            wr.writerow(["checkpoint", "epoch", "layer", "angle_deg"])
        wr.writerows(rows)
    worst = max(float(r[3]) for r in rows) if rows else float("nan")
    print(f"angle ok checkpoints={len(args.checkpoints)} max_angle={worst:.3f} csv={csv_path}")
    return EXIT_OK


def cmd_inspect(args):
    import numpy as np
    from . import checkpoint

    ck = checkpoint.load(args.checkpoint)
    p = ck.params
    top = p.topology
    err = sys.stderr
    print(f"checkpoint  {args.checkpoint}", file=err)
    print(f"epoch       {ck.epoch}", file=err)
    print(f"topology    input={top.input_shape} conv={[tuple(c) for c in top.conv]} "
          f"fc={top.fc} head={top.head.value} scheme={top.scheme.value}", file=err)
    for name in p.names():
        t = p.tensors[name]
        print(f"  {name:<8} {str(t.shape):<20} |.|={np.linalg.norm(t):.4g}", file=err)
    if ck.velocity:
        print(f"velocity    {len(ck.velocity)} tensors", file=err)
    if ck.rng_state:
        print(f"rng         {ck.rng_state}", file=err)
    if ck.config:
        for k in ("estimator", "T", "K", "beta", "lam", "batch_size", "seed"):
            print(f"config.{k:<10} {ck.config.get(k)}", file=err)
    if ck.extra:
        print(f"extra       {ck.extra}", file=err)
    print(f"inspect ok epoch={ck.epoch} params={p.n_params()} scheme={top.scheme.value}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "verify": cmd_verify, "transients": cmd_transients,
            "angle": cmd_angle, "inspect": cmd_inspect}


def main(argv=None):
    args = build_parser().parse_args(argv)
    _set_threads(_peek_threads(args))
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(message)s", force=True)

    from .checkpoint import CheckpointError
    from .config import ConfigError
    from .data import DatasetError

    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, DatasetError, CheckpointError, OSError) as exc:
        print(f"eqprop {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
