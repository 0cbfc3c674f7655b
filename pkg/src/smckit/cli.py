"""Command-line entry point (``smckit``).

Exit codes: 0 success, 2 invalid input or spec, 3 numerical failure,
4 transport or delivery failure.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

from smckit import __version__, package_io
from smckit import experiments as ex
from smckit.channel import ChannelConfig
from smckit.datagen import generate
from smckit.distribution import Registry, UpdateRequest, UpdateServer, edge_integrate, parse_addr, request_over_socket
from smckit.errors import (
    BaseModelMismatch,
    CorruptPackage,
    DegenerateRepresentation,
    DimensionMismatch,
    InvalidInput,
    NotAvailable,
    NotFound,
    NumericalError,
    ProtocolError,
    SmcError,
    TransportError,
    UnknownFormat,
    ZeroSignalPower,
)
from smckit.expandable import ExpandedModel, SmcKind, TrainConfig, apply_smc, build_expanded, extract_smc, train_model, train_smc
from smckit.model import ModelGraph
from smckit.svcca import plan_after
from smckit.zoo import toy_classifier

log = logging.getLogger("smckit")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL, EXIT_TRANSPORT = 0, 2, 3, 4
_INVALID = (
    InvalidInput,
    DimensionMismatch,
    NotFound,
    DegenerateRepresentation,
    BaseModelMismatch,
    ZeroSignalPower,
    UnknownFormat,
    CorruptPackage,
    FileNotFoundError,
    IsADirectoryError,
)
_TRANSPORT = (TransportError, ProtocolError, NotAvailable)


def read_config(path: str | None) -> dict[str, str]:
    """``key=value`` lines; blank lines and ``#`` comments are ignored."""
    if not path:
        return {}
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise InvalidInput(f"{path}:{n}: expected key=value")
        out[key.strip()] = value.strip()
    return out


def _overrides(args) -> dict[str, str]:
    out = read_config(args.config)
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise InvalidInput(f"--set expects key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _hp(args, extra: dict | None = None) -> ex.Hyper:
    spec = ex.ExperimentSpec("incremental", [args.seed], {**_overrides(args), **(extra or {})})
    return spec.hp


def _fill_from_hp(args) -> None:
    """Unset flags take their value from --set / --config, then the defaults."""
    flags = getattr(args, "hp_flags", {})
    if not flags:
        return
    hp = _hp(args)
    for attr, (key, cast) in flags.items():
        if getattr(args, attr) is None:
            setattr(args, attr, cast(str(hp[key])) if cast is not str else str(hp[key]))


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise InvalidInput(f"expected comma-separated integers, got {text!r}") from None


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise InvalidInput(f"expected comma-separated numbers, got {text!r}") from None


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _require_out(args, what: str) -> Path:
    if not args.out:
        raise InvalidInput(f"--out is required for {what}")
    return Path(args.out)


def _kind(args) -> SmcKind:
    old = _ints(args.old_classes)
    if args.kind == "incremental":
        return SmcKind("incremental", old, _ints(args.new_classes))
    if args.kind == "cross_task":
        return SmcKind("cross_task", old, [], task=args.task)
    if args.kind == "cross_domain":
        return SmcKind("cross_domain", old, [], domain=args.domain)
    raise InvalidInput(f"unknown kind {args.kind!r}")


def _load(path: str, cls):
    obj = package_io.load(path)
    if not isinstance(obj, cls):
        raise InvalidInput(f"{path} holds a {type(obj).__name__}, expected {cls.__name__}")
    return obj


# subcommands ----------------------------------------------------------------


def cmd_gen(args) -> int:
    ds = generate(_ints(args.classes), args.n, args.domain, seed=args.seed, start=args.start)
    n = package_io.save(_require_out(args, "gen"), ds)
    log.info("wrote %d samples (%d bytes)", len(ds), n)
    return EXIT_OK


def cmd_train_base(args) -> int:
    classes = _ints(args.classes)
    model = toy_classifier(len(classes), args.seed)
    history = train_model(model, generate(classes, args.n, "A", seed=args.seed), classes, args.epochs, args.lr, seed=args.seed)
    package_io.save(_require_out(args, "train-base"), model)
    rows = [(e, loss) for e, loss in enumerate(history)]
    _emit(ex.to_csv(("epoch", "loss"), rows), args.log_csv)
    return EXIT_OK


def cmd_analyze_cca(args) -> int:
    hp = _hp(args)
    candidates = args.candidates.split(",") if args.candidates else list(ex.ALL_BLOCKS)
    rows = ex.analyze_cca_rows(hp, args.seed, candidates)
    prov = ex.provenance("analyze-cca", [args.seed], hp)
    _emit(ex.to_csv(("candidate", "rho1", "k_ori", "k_tar", "component_bytes"), rows, prov), args.out)
    return EXIT_OK


def cmd_train_smc(args) -> int:
    base = _load(args.base, ModelGraph)
    kind = _kind(args)
    split = plan_after(base, args.split)
    em = build_expanded(base, split, kind, seed=args.seed)
    lr = args.lr if args.lr is not None else ex.TASK_LR[kind.task]
    cfg = TrainConfig(lam=args.lam, lr=lr, epochs=args.epochs, seed=args.seed, beta=args.beta)
    if kind.variant == "incremental":
        new = generate(kind.new_classes, args.n, "A", seed=args.seed)
        from smckit.datagen import split_rehearsal

        memory = split_rehearsal(generate(kind.old_classes, args.n, "A", seed=args.seed), args.memory, args.seed)
        evald = generate(kind.output_classes, args.n, "A", seed=args.seed, start=ex.TEST_OFFSET)
    else:
        domain = kind.domain or "A"
        new = generate(kind.old_classes, args.n, domain, seed=args.seed)
        memory = None
        evald = generate(kind.old_classes, args.n, domain, seed=args.seed, start=ex.TEST_OFFSET)
    _, trace = train_smc(em, new, memory, cfg, eval_data=evald)
    if args.package:
        package_io.save(args.package, extract_smc(em))
    if args.model:
        package_io.save(args.model, em)
    rows = [(r.epoch, r.loss, r.ce, r.semdist, r.acc) for r in trace]
    prov = {"kind": kind.tag, "split": args.split, "lambda": args.lam, "beta": args.beta, "lr": lr, "seed": args.seed, "epochs": args.epochs}
    _emit(ex.to_csv(("epoch", "loss", "ce", "semdist", "acc"), rows, prov), args.out)
    return EXIT_OK


def cmd_apply_smc(args) -> int:
    base = _load(args.base, ModelGraph)
    payload = package_io.load(args.package)
    em = apply_smc(base, payload, force=args.force)
    package_io.save(_require_out(args, "apply-smc"), em)
    return EXIT_OK


def cmd_eval(args) -> int:
    model = package_io.load(args.model)
    domain = args.domain
    if isinstance(model, ExpandedModel):
        classes = model.kind.output_classes
        domain = domain or model.kind.domain or "A"
        ds = generate(classes, args.n, domain, seed=args.seed, start=ex.TEST_OFFSET)
        result = model.evaluate(ds)
    elif isinstance(model, ModelGraph):
        classes = _ints(args.classes)
        ds = generate(classes, args.n, domain or "A", seed=args.seed, start=ex.TEST_OFFSET)
        result = {"accuracy": ex.classifier_accuracy(model, ds, classes)}
    else:
        raise InvalidInput(f"{args.model} is not a model")
    _emit(ex.to_csv(("metric", "value"), sorted(result.items()), {"model": args.model, "seed": args.seed}), args.out)
    return EXIT_OK


def cmd_channel_sweep(args) -> int:
    hp = _hp(args)
    rows = ex.channel_sweep_rows(hp, _floats(args.snr_list), _floats(args.beta_list), args.trials, args.seed)
    prov = ex.provenance("channel-sweep", [args.seed], {**hp, "snr_list": args.snr_list, "beta_list": args.beta_list, "trials": args.trials})
    _emit(ex.to_csv(("snr_db", "beta", "trial", "accuracy", "epsilon", "bound"), rows, prov), args.out)
    return EXIT_OK


def cmd_serve(args) -> int:
    registry = Registry.from_directory(args.registry)
    server = UpdateServer(registry, args.host, args.port)
    log.info("serving %d entries on %s:%d", len(registry.entries), *server.address)
    try:
        if args.max_requests is None:
            server.serve_forever()
        else:
            for _ in range(args.max_requests):
                server.handle_request()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return EXIT_OK


def cmd_request(args) -> int:
    base = _load(args.base, ModelGraph)
    req = UpdateRequest(package_io.model_checksum(base), _kind(args), args.edge_id, args.mode)
    data, report = request_over_socket(parse_addr(args.addr), req)
    out = _require_out(args, "request")
    if args.integrate:
        em, report = edge_integrate(base, data, ChannelConfig(args.snr, seed=args.seed), wall_time=report.wall_time)
        package_io.save(out, em)
    else:
        out.write_bytes(data)
    report.snr_db = args.snr
    sys.stdout.write(ex.to_csv(("mode", "bytes", "seconds", "snr_db"), [(report.mode, report.bytes_sent, report.wall_time, report.snr_db)]))
    return EXIT_OK


def cmd_experiment(args) -> int:
    seeds = _ints(args.seeds) if args.seeds else [args.seed]
    spec = ex.ExperimentSpec(args.name, seeds, _overrides(args))
    _emit(ex.run(spec), args.out)
    return EXIT_OK


# parser ---------------------------------------------------------------------


KIND_FLAGS = {"old_classes": ("old_classes", str), "new_classes": ("new_classes", str)}


def _hp_help(key: str) -> str:
    return f"default: hyperparameter {key} ({ex.DEFAULTS[key]})"


def _add_kind(p) -> None:
    p.add_argument("--kind", choices=("incremental", "cross_task", "cross_domain"), default="incremental")
    p.add_argument("--old-classes", help=_hp_help("old_classes"))
    p.add_argument("--new-classes", help=_hp_help("new_classes"))
    p.add_argument("--task", choices=("segmentation", "detection"), default="segmentation")
    p.add_argument("--domain", default="B")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", help="output file (CSV goes to stdout when omitted)")
    common.add_argument("--config", help="file of key=value hyperparameter lines")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="hyperparameter override (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="smckit", description="Semantic model components: train, package, ship, integrate.")
    parser.add_argument("--version", action="version", version=f"smckit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="render a synthetic dataset file")
    p.add_argument("--classes", default="0,1,2,3,4")
    p.add_argument("--n", type=int, default=10, help="samples per class")
    p.add_argument("--domain", choices=("A", "B"), default="A")
    p.add_argument("--start", type=int, default=0, help="first sample index")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train-base", parents=[common], help="train a toy base classifier")
    p.add_argument("--classes", help=_hp_help("old_classes"))
    p.add_argument("--n", type=int, help=_hp_help("n_train"))
    p.add_argument("--epochs", type=int, help=_hp_help("base_epochs"))
    p.add_argument("--lr", type=float, help=_hp_help("base_lr"))
    p.add_argument("--log-csv", help="per-epoch loss CSV (stdout when omitted)")
    p.set_defaults(hp_flags={"classes": ("old_classes", str), "n": ("n_train", int), "epochs": ("base_epochs", int), "lr": ("base_lr", float)})
    p.set_defaults(func=cmd_train_base)

    p = sub.add_parser("analyze-cca", parents=[common], help="SVCCA profile of base vs reference model")
    p.add_argument("--candidates", help="comma-separated blocks or layers (default: all blocks)")
    p.set_defaults(func=cmd_analyze_cca)

    p = sub.add_parser("train-smc", parents=[common], help="train a component on a saved base model")
    p.add_argument("--base", required=True)
    _add_kind(p)
    p.add_argument("--split", default=ex.DEFAULT_SPLIT)
    p.add_argument("--lambda", dest="lam", type=float, help=_hp_help("lam"))
    p.add_argument("--beta", type=float, default=0.0)
    p.add_argument("--epochs", type=int, help=_hp_help("epochs"))
    p.add_argument("--lr", type=float, default=None, help="default depends on the task")
    p.add_argument("--n", type=int, help=_hp_help("n_train"))
    p.add_argument("--memory", type=int, help=_hp_help("memory"))
    p.add_argument("--package", help="write the component package here (.smcpkg)")
    p.add_argument("--model", help="write the full expanded model here (.smcmdl)")
    p.set_defaults(hp_flags={**KIND_FLAGS, "lam": ("lam", float), "epochs": ("epochs", int), "n": ("n_train", int), "memory": ("memory", int)})
    p.set_defaults(func=cmd_train_smc)

    p = sub.add_parser("apply-smc", parents=[common], help="attach a component package to a base model")
    p.add_argument("--base", required=True)
    p.add_argument("--package", required=True)
    p.add_argument("--force", action="store_true", help="skip the base checksum check")
    p.set_defaults(func=cmd_apply_smc)

    p = sub.add_parser("eval", parents=[common], help="evaluate a saved model on fresh test data")
    p.add_argument("--model", required=True)
    p.add_argument("--classes", help="class ids of a plain classifier; " + _hp_help("old_classes"))
    p.add_argument("--domain", choices=("A", "B"))
    p.add_argument("--n", type=int, help=_hp_help("n_test"))
    p.set_defaults(hp_flags={"classes": ("old_classes", str), "n": ("n_test", int)})
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("channel-sweep", parents=[common], help="accuracy and disturbance under AWGN")
    p.add_argument("--snr-list", default="-2,-1,0,2,5,10")
    p.add_argument("--beta-list", default="0,0.2")
    p.add_argument("--trials", type=int, default=5)
    p.set_defaults(func=cmd_channel_sweep)

    p = sub.add_parser("serve", parents=[common], help="serve a registry directory over TCP")
    p.add_argument("--registry", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=5055)
    p.add_argument("--max-requests", type=int, help="exit after this many requests")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("request", parents=[common], help="request an update from a server")
    p.add_argument("--addr", required=True, help="host:port")
    p.add_argument("--base", required=True, help="local base model file")
    _add_kind(p)
    p.add_argument("--mode", choices=("smc", "full_model"), default="smc")
    p.add_argument("--edge-id", default="edge-0")
    p.add_argument("--snr", type=float, default=math.inf)
    p.add_argument("--integrate", action="store_true", help="save the integrated model instead of the raw payload")
    p.set_defaults(func=cmd_request, hp_flags=KIND_FLAGS)

    epilog = "hyperparameters (override with --set KEY=VALUE):\n" + "\n".join(f"  {k} = {v}" for k, v in ex.DEFAULTS.items())
    p = sub.add_parser(
        "experiment", parents=[common], help="run a named experiment to CSV", epilog=epilog, formatter_class=argparse.RawDescriptionHelpFormatter
    )
    p.add_argument("name", choices=ex.NAMES)
    p.add_argument("--seeds", help="comma-separated seeds (default: --seed)")
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        _fill_from_hp(args)
        return args.func(args)
    except NumericalError as e:
        print(f"smckit: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except _TRANSPORT as e:
        print(f"smckit: delivery failed: {e}", file=sys.stderr)
        return EXIT_TRANSPORT
    except _INVALID as e:
        print(f"smckit: {e}", file=sys.stderr)
        return EXIT_INVALID
    except SmcError as e:
        print(f"smckit: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
