"""Command line: ``icrcaps {train,eval,audit,gen-synth,bench-routing}``.

Configuration files are JSON objects or flat ``key=value`` lines; keys are
fields of :class:`ModelConfig`, :class:`TrainConfig` or the data options
below. ``--set key=value`` overrides any of them.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import tensor as T
from .audit import audit_model
from .data import Dataset, FormatError, TestSuiteSpec, gen_synthetic, load_cifar_bin, load_idx, make_test_suites
from .network import Model, ModelConfig, TrainConfig, evaluate, load_checkpoint
from .routing import ICRConfig, icr_weights
from .tensor import GradTape, Tensor
from .trainer import fit

log = logging.getLogger("icrcaps")

DATA_DEFAULTS = {
    "dataset": "synth",
    "data_seed": 0,
    "train_per_class": 500,
    "test_per_class": 100,
    "image_size": 16,
    "suite_seed": 7,
}

MODEL_FIELDS = {f.name for f in dataclasses.fields(ModelConfig)}
TRAIN_FIELDS = {f.name for f in dataclasses.fields(TrainConfig)}
ICR_SHORTHAND = {"icr_k": "k", "icr_num_iter": "num_iter", "icr_epsilon": "epsilon",
                 "use_pred_layernorm": "use_pred_layernorm"}


class CLIError(Exception):
    pass


# -- config ---------------------------------------------------------------------------

def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        low = text.strip().lower()
        if low in ("true", "false"):
            return low == "true"
        return text.strip()


def parse_config_text(text: str) -> dict:
    """JSON object, or one ``key=value`` per line (``#`` starts a comment)."""
    stripped = text.strip()
    if stripped.startswith("{"):
        return json.loads(stripped)
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CLIError(f"config line {n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = _parse_value(v)
    return out


def load_config(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise CLIError(f"cannot read config {path}: {e.strerror}") from None
    try:
        return parse_config_text(text)
    except json.JSONDecodeError as e:
        raise CLIError(f"config {path}: invalid JSON ({e})") from None


def split_config(cfg: dict) -> tuple[ModelConfig, TrainConfig, dict]:
    known = MODEL_FIELDS | TRAIN_FIELDS | set(DATA_DEFAULTS) | set(ICR_SHORTHAND)
    unknown = sorted(set(cfg) - known)
    if unknown:
        raise CLIError(f"unknown config keys: {', '.join(unknown)}")
    model_kw = {k: v for k, v in cfg.items() if k in MODEL_FIELDS}
    short = {ICR_SHORTHAND[k]: v for k, v in cfg.items() if k in ICR_SHORTHAND}
    if short:
        n_layers = len(model_kw.get("hidden", ModelConfig().hidden)) + 1
        base = model_kw.get("icr") or [dataclasses.asdict(c) for c in ModelConfig().icr][:1] * n_layers
        if len(base) != n_layers:
            base = [base[0]] * n_layers
        model_kw["icr"] = [{**(c if isinstance(c, dict) else dataclasses.asdict(c)), **short} for c in base]
    train_kw = {k: v for k, v in cfg.items() if k in TRAIN_FIELDS}
    data = {**DATA_DEFAULTS, **{k: v for k, v in cfg.items() if k in DATA_DEFAULTS}}
    try:
        return ModelConfig(**model_kw), TrainConfig(**train_kw), data
    except (TypeError, ValueError) as e:
        raise CLIError(f"invalid configuration: {e}") from None


def gather_config(args) -> dict:
    cfg = {}
    if getattr(args, "config", None):
        cfg.update(load_config(args.config))
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise CLIError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        cfg[k.strip()] = _parse_value(v)
    for flag, key in (("epochs", "epochs"), ("lr", "lr"), ("batch_size", "batch_size"), ("seed", "seed"),
                      ("dataset", "dataset"), ("suite_seed", "suite_seed")):
        val = getattr(args, flag, None)
        if val is not None:
            cfg[key] = val
    return cfg


# -- data -------------------------------------------------------------------------------

def load_dataset(spec: str, data: dict, split: str, num_classes: int = 4) -> Dataset:
    """``synth``, ``idx:IMAGES,LABELS``, ``cifar10:F1,F2,..``, ``cifar100:F``, or a saved ``.npz``."""
    try:
        if spec == "synth":
            per = data["train_per_class"] if split == "train" else data["test_per_class"]
            seed = data["data_seed"] if split == "train" else data["data_seed"] + 1000
            return gen_synthetic(num_classes, per, data["image_size"], seed=seed)
        kind, _, rest = spec.partition(":")
        files = [f for f in rest.split(",") if f]
        if kind == "idx" and len(files) == 2:
            return load_idx(files[0], files[1], name="idx")
        if kind in ("cifar10", "cifar100") and files:
            return load_cifar_bin(files, cifar100=kind == "cifar100")
        if spec.endswith(".npz"):
            return Dataset.load(spec)
    except FileNotFoundError as e:
        raise CLIError(f"missing data file: {e.filename}") from None
    except FormatError as e:
        raise CLIError(f"bad data file: {e}") from None
    raise CLIError(f"unknown dataset spec {spec!r}")


# -- commands ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    model_cfg, train_cfg, data = split_config(gather_config(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train = load_dataset(data["dataset"], data, "train", model_cfg.num_classes)
    test = load_dataset(args.test_dataset or data["dataset"], data, "test", model_cfg.num_classes)
    if train.images.shape[1] != model_cfg.in_channels:
        model_cfg = dataclasses.replace(model_cfg, in_channels=train.images.shape[1])
    spec = TestSuiteSpec()
    suites = make_test_suites(test, spec, seed=data["suite_seed"])
    (out / "config.json").write_text(json.dumps(
        {"model": model_cfg.to_dict(), "train": train_cfg.to_dict(), "data": data}, indent=2))
    model = Model(model_cfg)
    if args.check_invariants:
        train_cfg = dataclasses.replace(train_cfg, check_invariants=True)
    history = fit(model, train, train_cfg, suites, log_path=out / "metrics.jsonl",
                  checkpoint_path=out / "checkpoint.npz", suite_labels=spec.labels,
                  checkpoint_extra={"data": data})
    last = history[-1]
    print(json.dumps({"epoch": last["epoch"], "accuracy": last["accuracy"]}))
    return 0


def accuracy_table(model: Model, suites, labels) -> dict:
    return {lab: evaluate(model, s).accuracy for lab, s in zip(labels, suites)}


def write_table(table: dict, name: str, fh, long: bool = False):
    w = csv.writer(fh, lineterminator="\r\n")
    if long:
        w.writerow(["suite", "accuracy"])
        for k, v in table.items():
            w.writerow([k, f"{v:.6f}"])
    else:
        w.writerow(["model"] + list(table))
        w.writerow([name] + [f"{v:.6f}" for v in table.values()])


def cmd_eval(args) -> int:
    try:
        model, manifest = load_checkpoint(args.checkpoint)
    except FileNotFoundError:
        raise CLIError(f"checkpoint not found: {args.checkpoint}") from None
    except (ValueError, KeyError) as e:
        raise CLIError(f"cannot load checkpoint {args.checkpoint}: {e}") from None
    data = dict(DATA_DEFAULTS)
    data.update((manifest.get("extra") or {}).get("data", {}))
    if args.data_seed is not None:
        data["data_seed"] = args.data_seed
    data["suite_seed"] = args.suite_seed
    test = load_dataset(args.dataset, data, "test", model.cfg.num_classes)
    spec = TestSuiteSpec()
    suites = make_test_suites(test, spec, seed=args.suite_seed)
    table = accuracy_table(model, suites, spec.labels)
    name = args.name or Path(args.checkpoint).stem
    buf = io.StringIO()
    write_table(table, name, buf, long=args.long)
    if args.csv:
        Path(args.csv).write_text(buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())
    doc = {"model": name, "epoch": manifest.get("epoch"), "suite_seed": args.suite_seed,
           "columns": list(table), "accuracy": [table[k] for k in table]}
    if args.json:
        Path(args.json).write_text(json.dumps(doc, indent=2))
    return 0


def _audit_model_from(args) -> Model:
    if args.checkpoint:
        try:
            src, _ = load_checkpoint(args.checkpoint)
        except FileNotFoundError:
            raise CLIError(f"checkpoint not found: {args.checkpoint}") from None
        cfg = src.cfg
    else:
        model_cfg, _, _ = split_config(gather_config(args))
        src, cfg = None, model_cfg
    if args.mode == "exact":
        cfg = cfg.audit_mode()
    model = Model(cfg)
    if src is not None:
        # the exact mode drops the prediction layernorms; copy everything else
        state = src.state_dict()
        for name, p in model.named_parameters():
            if name in state:
                p.data = state[name].astype(T.get_dtype())
    return model


def cmd_audit(args) -> int:
    # float32 rounding can flip near-tied k-NN choices, so the default is float64
    with T.precision(np.dtype(args.precision).type):
        model = _audit_model_from(args)
        size = args.image_size
        x = np.random.default_rng(args.seed).uniform(size=(args.batch, model.cfg.in_channels, size, size))
        x = x.astype(T.get_dtype())
        t0 = time.perf_counter()
        report = audit_model(model, x, n_translations=args.translations, seed=args.seed)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["layer", "max_rel_error"])
    for name, err in report.rows():
        w.writerow([name, f"{err:.3e}"])
    ok = report.passed(args.tol)
    print(f"# {len(report.elements)} group elements, worst {report.worst():.3e}, "
          f"argmax stable {report.argmax_stable}, {time.perf_counter() - t0:.1f}s -> "
          f"{'PASS' if ok else 'FAIL'} at tol {args.tol:g}", file=sys.stderr)
    return 0 if ok else 1


def cmd_gen_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train = gen_synthetic(args.classes, args.train_per_class, args.size, seed=args.seed)
    test = gen_synthetic(args.classes, args.test_per_class, args.size, seed=args.seed + 1000)
    train.save(out / "train.npz")
    test.save(out / "test.npz")
    print(json.dumps({"train": str(out / "train.npz"), "test": str(out / "test.npz"),
                      "train_size": len(train), "test_size": len(test)}))
    return 0


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def cmd_bench_routing(args) -> int:
    rng = np.random.default_rng(args.seed)
    rows = []
    for n in args.n:
        for k in args.k:
            if not 1 <= k <= n - 1:
                continue
            for it in args.num_iter:
                pred = Tensor(rng.normal(size=(args.batch, n, args.out_types, args.dim, 4,
                                               args.size, args.size)), requires_grad=True)
                cfg = ICRConfig(k=k, num_iter=it)
                fwd, bwd = [], []
                for _ in range(args.repeats):
                    pred.grad = None
                    t0 = time.perf_counter()
                    with GradTape() as tape:
                        state = icr_weights(pred, cfg)
                        loss = T.sum(state.c)
                    t1 = time.perf_counter()
                    tape.backward(loss)
                    t2 = time.perf_counter()
                    fwd.append(t1 - t0)
                    bwd.append(t2 - t1)
                graphs = args.batch * args.out_types * 4 * args.size * args.size
                rows.append([n, args.dim, k, it, graphs, f"{min(fwd):.6f}", f"{min(bwd):.6f}"])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(["N", "d", "k", "num_iter", "graphs", "forward_s", "backward_s"])
    w.writerows(rows)
    if args.csv:
        Path(args.csv).write_text(buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())
    return 0


# -- parser -----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="icrcaps", description="p4-equivariant capsule networks with ICR routing")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def config_flags(sp):
        sp.add_argument("--config", help="JSON or key=value file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")

    t = sub.add_parser("train", help="train a model and log per-epoch suite accuracies")
    config_flags(t)
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--dataset", help="synth | idx:IMG,LBL | cifar10:F,.. | cifar100:F | file.npz")
    t.add_argument("--test-dataset", help="dataset spec for the test suites (default: as --dataset)")
    t.add_argument("--suite-seed", type=int)
    t.add_argument("--check-invariants", action="store_true", help="assert routing invariants every step")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="accuracy on the 5 test suites")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", default="synth")
    e.add_argument("--suite-seed", type=int, default=7)
    e.add_argument("--data-seed", type=int)
    e.add_argument("--name", help="row label (default: checkpoint file stem)")
    e.add_argument("--csv", help="write the CSV here instead of stdout")
    e.add_argument("--json", help="also write a JSON table here")
    e.add_argument("--long", action="store_true", help="one row per suite instead of one row per model")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("audit", help="per-layer equivariance errors")
    config_flags(a)
    a.add_argument("--checkpoint")
    a.add_argument("--mode", choices=("exact", "as-is"), default="exact",
                   help="exact: stride 1, circular boundary, no prediction layernorm")
    a.add_argument("--translations", type=int, default=8)
    a.add_argument("--batch", type=int, default=2)
    a.add_argument("--image-size", type=int, default=16)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--tol", type=float, default=1e-4)
    a.add_argument("--precision", choices=("float64", "float32"), default="float64")
    a.set_defaults(func=cmd_audit)

    g = sub.add_parser("gen-synth", help="write the synthetic shape dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--train-per-class", type=int, default=500)
    g.add_argument("--test-per-class", type=int, default=100)
    g.add_argument("--size", type=int, default=16)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_synth)

    b = sub.add_parser("bench-routing", help="time ICR over grids of N, k and num_iter")
    b.add_argument("--n", type=_ints, default=[4, 8, 16])
    b.add_argument("--k", type=_ints, default=[1, 3])
    b.add_argument("--num-iter", type=_ints, default=[0, 2])
    b.add_argument("--dim", type=int, default=8)
    b.add_argument("--out-types", type=int, default=4)
    b.add_argument("--batch", type=int, default=4)
    b.add_argument("--size", type=int, default=4)
    b.add_argument("--repeats", type=int, default=3)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--csv")
    b.set_defaults(func=cmd_bench_routing)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except CLIError as e:
        print(f"icrcaps {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
