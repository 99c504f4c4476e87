"""``wdro`` command line: gen, train, attack, certify, oos-bound, gradcheck.

Every subcommand writes a JSON run report holding the resolved configuration,
git-style hashes of the input files, the numeric outputs, timings and flags.
Exit codes: 0 ok, 1 validation error, 2 numeric degeneracy.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import time
from pathlib import Path

EXIT_OK, EXIT_INVALID, EXIT_DEGENERATE = 0, 1, 2
REPORT_SCHEMA = 1
_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


class ValidationError(Exception):
    pass


class Degenerate(Exception):
    def __init__(self, msg: str, outputs: dict | None = None):
        super().__init__(msg)
        self.outputs = outputs or {}


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad flags; 2 is reserved for degeneracy here
    def error(self, message):
        raise ValidationError(message)


def _cap_threads() -> None:
    threads = os.environ.get("WDRO_THREADS")
    if threads:
        for var in _THREAD_VARS:
            os.environ.setdefault(var, threads)


def blob_hash(path) -> str:
    """Git blob id: ``sha1("blob <size>\\0" + content)``."""
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _jsonable(obj):
    import numpy as np

    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        obj = obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None if math.isnan(obj) else ("inf" if obj > 0 else "-inf")
    return obj


def _index(value: str) -> str:
    v = value.strip().lower()
    if v not in ("2", "inf"):
        raise argparse.ArgumentTypeError("must be 2 or inf")
    return v


def _nonneg(value: str) -> float:
    v = float(value)
    if not (math.isfinite(v) and v >= 0):
        raise argparse.ArgumentTypeError("must be a finite nonnegative number")
    return v


def _positive(value: str) -> float:
    v = float(value)
    if not (math.isfinite(v) and v > 0):
        raise argparse.ArgumentTypeError("must be a finite positive number")
    return v


def _posint(value: str) -> int:
    v = int(value)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def _add_threat(p: argparse.ArgumentParser, delta_default: float = 0.05) -> None:
    p.add_argument("--p", type=_index, default="2", help="Wasserstein order: 2 or inf")
    p.add_argument("--r", type=_index, default="2", help="feature norm: 2 or inf")
    p.add_argument("--delta", type=_nonneg, default=delta_default, help="ball radius")


def _add_attack_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--loss", choices=["ce", "dlr", "redlr"], default="ce")
    p.add_argument("--steps", type=_posint, default=50)
    p.add_argument("--ratio", type=_positive, default=2.5, help="step size is ratio * delta / steps")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="wdro", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="subcommand", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a synthetic dataset CSV")
    p.add_argument("--kind", choices=["gaussian-blobs", "concentric-rings", "xor-grid"], default="gaussian-blobs")
    p.add_argument("--n", type=_posint, default=2)
    p.add_argument("--m", type=_posint, default=3)
    p.add_argument("--N", type=_posint, default=300)
    p.add_argument("--separation", type=_positive, default=4.0)
    p.add_argument("--margin", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="dataset CSV")
    p.add_argument("--report", help="run report (default: <out>.report.json)")

    p = sub.add_parser("train", help="train a classifier")
    p.add_argument("--data", required=True)
    p.add_argument("--method", choices=["clean", "regularized", "perturbed"], default="clean")
    _add_threat(p, 0.0)
    p.add_argument("--loss", choices=["ce", "dlr", "redlr"], default="ce")
    p.add_argument("--lr", type=_positive, default=0.5)
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--batch", type=_posint, default=20)
    p.add_argument("--hidden", default="16", help="comma-separated hidden widths")
    p.add_argument("--activation", choices=["relu", "tanh"], default="tanh")
    p.add_argument("--fd-epsilon", type=_positive, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="model JSON")
    p.add_argument("--report", help="run report (default: <out>.report.json)")

    p = sub.add_parser("attack", help="run W-PGD, W-FGSM or pointwise PGD")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    _add_threat(p)
    _add_attack_flags(p)
    p.add_argument("--method", choices=["wpgd", "wfgsm", "pgd"], default="wpgd")
    p.add_argument("--restarts", type=int, default=0)
    p.add_argument("--coupling", choices=["identity", "exact"], default="identity")
    p.add_argument("--upsilon-source", choices=["iterate", "clean"], default="iterate")
    p.add_argument("--project-to-sphere", action="store_true")
    p.add_argument("--select", choices=["best", "last"], default="best")
    p.add_argument("--save-adversarial", help="write the returned iterate as CSV")
    p.add_argument("--out", required=True, help="run report")

    p = sub.add_parser("certify", help="robustness ratio and first-order bounds")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    _add_threat(p)
    _add_attack_flags(p)
    p.add_argument("--K", type=_positive, default=1.0, help="concentration constant")
    p.add_argument("--out", required=True, help="run report")

    p = sub.add_parser("oos-bound", help="out-of-sample guarantees from a certify report")
    p.add_argument("--report", required=True, help="certify run report")
    p.add_argument("--epsilon", type=_nonneg, required=True)
    p.add_argument("--K", type=_positive, help="default: the value stored in the certify report")
    p.add_argument("--M", type=_posint, help="test sample size (default: training size)")
    p.add_argument("--L", type=_nonneg, help="Lipschitz constant (default: the certify estimate)")
    p.add_argument("--out", required=True, help="run report")

    p = sub.add_parser("gradcheck", help="finite-difference check on random networks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=_posint, default=100)
    p.add_argument("--tolerance", type=_positive, default=1e-4)
    p.add_argument("--out", help="run report (default: stdout only)")
    return parser


def _threat(args):
    from .transport import ThreatModel
    return ThreatModel(args.p, args.r, args.delta)


def _load(args, inputs: dict):
    from .data import load_csv
    from .model import load_model

    net = load_model(args.model)
    data = load_csv(args.data, m=net.m)
    if data.n != net.n:
        raise ValidationError(f"data has {data.n} features but the model expects {net.n}")
    inputs["model"] = blob_hash(args.model)
    inputs["data"] = blob_hash(args.data)
    return net, data


def cmd_gen(args, inputs, flags, caveats) -> dict:
    from .data import DatasetSpec, generate, save_csv

    data = generate(DatasetSpec(args.kind, args.n, args.m, args.N, args.seed, args.separation, args.margin))
    save_csv(data, args.out)
    counts = {int(k): int(v) for k, v in zip(*_unique(data.y))}
    return {"dataset": {"path": args.out, "hash": blob_hash(args.out), "N": len(data), "n": data.n,
                        "m": data.m, "class_counts": counts}}


def _unique(y):
    import numpy as np
    return np.unique(y, return_counts=True)


def cmd_train(args, inputs, flags, caveats) -> dict:
    from .data import load_csv
    from .model import clean_accuracy, init_network, save_model
    from .training import TrainConfig, TrainingDiverged, train

    data = load_csv(args.data)
    inputs["data"] = blob_hash(args.data)
    try:
        hidden = [int(h) for h in args.hidden.split(",") if h.strip()]
    except ValueError:
        raise ValidationError(f"--hidden must be comma-separated integers, got {args.hidden!r}") from None
    if any(h < 1 for h in hidden):
        raise ValidationError("hidden widths must be positive")
    if args.epochs < 0:
        raise ValidationError("--epochs must be >= 0")
    if args.batch > len(data):
        raise ValidationError(f"--batch {args.batch} exceeds the dataset size {len(data)}")
    net = init_network([data.n] + hidden + [data.m], args.activation, args.seed)
    config = TrainConfig(args.method, _threat(args), args.lr, args.epochs, args.batch,
                         args.fd_epsilon, args.seed, args.loss)
    try:
        res = train(net, data, config)
    except TrainingDiverged as exc:
        save_model(exc.state, args.out)
        raise Degenerate(f"training diverged at epoch {exc.epoch}, batch {exc.batch}: {exc}",
                         {"model": {"path": args.out, "hash": blob_hash(args.out)}}) from None
    save_model(res.net, args.out)
    flags.extend(res.flags)
    return {"training": {"loss_history": res.loss_history, "upsilon_history": res.upsilon_history,
                         "clean_accuracy": clean_accuracy(res.net, data)},
            "model": {"path": args.out, "hash": blob_hash(args.out), "sizes": [data.n] + hidden + [data.m]}}


def cmd_attack(args, inputs, flags, caveats) -> dict:
    from .attack import AttackConfig, classic_pgd, wfgsm, wpgd
    from .data import save_csv
    from .sensitivity import upsilon

    net, data = _load(args, inputs)
    threat = _threat(args)
    if args.method == "pgd" and threat.p != math.inf:
        raise ValidationError("--method pgd is the pointwise attack and needs --p inf")
    if args.restarts < 0:
        raise ValidationError("--restarts must be >= 0")
    cfg = AttackConfig(threat, args.loss, args.steps, args.ratio, args.seed, args.coupling, args.restarts,
                       args.upsilon_source, args.project_to_sphere, args.select)
    sens = upsilon(net, args.loss, data, threat)
    run = {"wpgd": wpgd, "wfgsm": wfgsm, "pgd": classic_pgd}[args.method]
    res = run(net, data, cfg)
    out = {"sensitivity": sens.to_dict(), "attack": {**res.to_dict(), "config": cfg.to_dict()}}
    if args.save_adversarial:
        save_csv(res.adversarial, args.save_adversarial)
        out["adversarial"] = {"path": args.save_adversarial, "hash": blob_hash(args.save_adversarial)}
    if res.degenerate:
        raise Degenerate("Upsilon = 0 at the clean data: no attack direction", out)
    return out


def cmd_certify(args, inputs, flags, caveats) -> dict:
    from .losses import estimate_lipschitz
    from .robustness import CAVEAT, DegenerateBound, certify

    net, data = _load(args, inputs)
    threat = _threat(args)
    try:
        rep = certify(net, args.loss, data, threat, steps=args.steps, ratio=args.ratio, seed=args.seed)
    except DegenerateBound as exc:
        raise Degenerate(str(exc)) from None
    out = {"robustness": rep.to_dict(),
           "sample": {"N": len(data), "n": data.n, "m": data.m},
           "lipschitz_estimate": estimate_lipschitz(net, args.loss, data, threat.s),
           "K": args.K}
    caveats.append(CAVEAT)
    if not rep.R_lower <= rep.R <= rep.R_upper + 1e-9:
        flags.append("bound ordering R_lower <= R <= R_upper violated: delta may be outside the linear regime")
    if rep.Upsilon == 0.0:
        raise Degenerate("Upsilon = 0: first-order bounds carry no information", out)
    return out


def cmd_oos_bound(args, inputs, flags, caveats) -> dict:
    from .robustness import CAVEAT, ConcentrationParams, DegenerateBound, RobustnessReport, oos_guarantees

    try:
        doc = json.loads(Path(args.report).read_text())
        outputs = doc["outputs"]
        rob = dict(outputs["robustness"])
        sample = outputs["sample"]
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ValidationError(f"{args.report}: not a certify report ({exc!r})") from None
    inputs["report"] = blob_hash(args.report)
    report = RobustnessReport(**{k: (math.inf if v == "inf" else v) for k, v in rob.items()})
    p = report.threat["p"]
    n, N = int(sample["n"]), int(sample["N"])
    pv = math.inf if p == "inf" else float(p)
    if not 1.0 < pv < n / 2.0:
        msg = f"the concentration rate assumes 1 < p < n/2; got p={p}, n={n}"
        print(f"wdro oos-bound: warning: {msg}", file=sys.stderr)
        flags.append(msg)
    K = args.K if args.K is not None else float(outputs.get("K", 1.0))
    L = args.L if args.L is not None else float(outputs["lipschitz_estimate"])
    params = ConcentrationParams(K=K, n=n, N=N, M=args.M or N, epsilon=args.epsilon, delta=report.delta)
    try:
        gs = oos_guarantees(report, params, L)
    except DegenerateBound as exc:
        raise Degenerate(str(exc)) from None
    caveats.append(CAVEAT)
    return {"guarantees": [g.to_dict() for g in gs],
            "parameters": {"K": K, "n": n, "N": N, "M": params.M, "epsilon": args.epsilon,
                           "delta": report.delta, "L": L}}


def cmd_gradcheck(args, inputs, flags, caveats) -> dict:
    from .gradcheck import run_suite

    checks = run_suite(args.seed, args.count)
    worst = max(c.max_error for c in checks)
    failed = [c.to_dict() for c in checks if c.max_error > args.tolerance]
    out = {"gradcheck": {"networks": args.count, "checks": len(checks), "max_relative_error": worst,
                         "tolerance": args.tolerance, "failed": failed}}
    if failed:
        flags.append(f"{len(failed)} gradient checks exceed the tolerance")
    return out


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "attack": cmd_attack, "certify": cmd_certify,
            "oos-bound": cmd_oos_bound, "gradcheck": cmd_gradcheck}


def _report_path(args) -> str | None:
    if args.subcommand in ("gen", "train"):
        return args.report or f"{args.out}.report.json"
    return args.out


def _write(path, report: dict) -> None:
    text = json.dumps(_jsonable(report), indent=2, sort_keys=True, allow_nan=False)
    if path:
        Path(path).write_text(text + "\n")
    else:
        print(text)


def run(argv=None) -> int:
    from . import __version__

    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except ValidationError as exc:
        print(f"wdro: error: {exc}", file=sys.stderr)
        return EXIT_INVALID

    from .data import DatasetError
    from .model import ModelError
    from .transport import InfeasibleTransport

    config = {k: v for k, v in vars(args).items()}
    report = {"schema": REPORT_SCHEMA, "version": __version__, "subcommand": args.subcommand,
              "argv": argv, "config": config, "inputs": {}, "outputs": {}, "caveats": [], "flags": [],
              "status": "ok", "exit_code": EXIT_OK, "error": None, "timings": {}}
    start = time.perf_counter()
    code = EXIT_OK
    try:
        report["outputs"] = COMMANDS[args.subcommand](args, report["inputs"], report["flags"], report["caveats"])
        if args.subcommand == "gradcheck" and report["outputs"]["gradcheck"]["failed"]:
            code = EXIT_DEGENERATE
            report["status"] = "failed"
    except Degenerate as exc:
        code = EXIT_DEGENERATE
        report.update(status="degenerate", error=str(exc), outputs=exc.outputs)
        report["flags"].append(str(exc))
    except (ValidationError, DatasetError, ModelError, InfeasibleTransport, ValueError, OSError) as exc:
        code = EXIT_INVALID
        report.update(status="invalid", error=str(exc))
    report["timings"]["wall_seconds"] = time.perf_counter() - start
    report["exit_code"] = code
    if code != EXIT_OK:
        print(f"wdro {args.subcommand}: {report['error'] or report['status']}", file=sys.stderr)
    path = _report_path(args)
    try:
        _write(path, report)
    except OSError as exc:
        print(f"wdro: cannot write report {path}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return code


def main(argv=None) -> None:
    _cap_threads()
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
