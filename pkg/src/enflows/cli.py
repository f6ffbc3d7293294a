"""Command-line entry point: ``enflows {gen-data,train,sample,eval,verify}``.

Outputs land in one directory::

    OUT/config.<verb>.cfg     resolved config snapshot
    OUT/data/{train,val,test}.txt
    OUT/checkpoints/{best,last}.npz
    OUT/logs/train_log.csv
    OUT/reports/eval_<split>.txt, verify.txt
    OUT/samples/samples.txt
"""
import argparse
import hashlib
import os
import sys
import time

from . import config as cfgmod
from .cnf import TraceEstimator
from .lifting import NodeCountDistribution
from .metrics import evaluate, write_report
from .model import build_model, load_model
from .numerics import make_generator
from .systems import (Dw4Params, Lj13Params, dataset_read, dataset_write, energy_function,
                      mcmc_generate, molecule_dataset_load, molecule_write)
from .training import TrainConfig, train
from .verify import run_all

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_VERIFY = 0, 2, 3, 4


class CommandError(RuntimeError):
    pass


def _paths(out):
    return {k: os.path.join(out, k) for k in ("data", "checkpoints", "logs", "reports", "samples")}


def _split_file(cfg, out, split):
    path = cfg["data"][f"{split}_file"]
    return path or os.path.join(out, "data", f"{split}.txt")


def _read_split(cfg, out, split):
    path = _split_file(cfg, out, split)
    if not os.path.exists(path):
        raise CommandError(f"{split} data not found at {path}; run gen-data or set data.{split}_file")
    if cfg["system"]["name"] == "molecule" and not path.endswith(".txt"):
        return molecule_dataset_load(path)
    try:
        return dataset_read(path)
    except ValueError:
        if cfg["system"]["name"] == "molecule":
            return molecule_dataset_load(path)
        raise


def _system_params(cfg):
    name = cfg["system"]["name"]
    if name == "dw4":
        return Dw4Params(**cfg["dw4"])
    if name == "lj13":
        return Lj13Params(**cfg["lj13"])
    raise cfgmod.ConfigError(f"gen-data supports dw4 and lj13, not {name!r}")


def cmd_gen_data(cfg, out):
    params = _system_params(cfg)
    system, d, mc = cfg["system"]["name"], cfg["data"], cfg["mcmc"]
    sizes = {"train": d["n_train"], "val": d["n_val"], "test": d["n_test"]}
    total = sum(sizes.values())
    gen = make_generator(d["seed"])
    full = mcmc_generate(energy_function(system, params), cfg["system"]["n_particles"],
                         cfg["system"]["dim"], total, min(mc["chains"], total), mc["burn_in"],
                         mc["thinning"], mc["proposal_std"], gen, init_scale=mc["init_scale"],
                         system=system,
                         metadata={"seed": d["seed"], "energy": system,
                                   "params": cfg[system]})
    if "warning" in full.metadata:
        print(f"warning: {full.metadata['warning']}", file=sys.stderr)
    start = 0
    for split, size in sizes.items():
        part = full.subset(range(start, start + size), split)
        part.metadata["split_range"] = [start, start + size]
        dataset_write(part, os.path.join(out, "data", f"{split}.txt"))
        print(f"{split}: {size} records, acceptance {full.metadata['acceptance_rate']:.3f}")
        start += size


def _train_config(cfg):
    t = dict(cfg["train"])
    t["betas"] = (t.pop("beta1"), t.pop("beta2"))
    t["eps"] = t.pop("adam_eps")
    return TrainConfig(**t)


def cmd_train(cfg, out):
    tc = _train_config(cfg)
    train_ds = _read_split(cfg, out, "train")
    val_path = _split_file(cfg, out, "val")
    val_ds = _read_split(cfg, out, "val") if os.path.exists(val_path) else None
    m = cfg["model"]
    n_ord, cat = train_ds.n_ord, tuple(train_ds.cat_classes)
    model = build_model(m["variant"], train_ds.n, n_ord, cat, m["hidden"], m["layers"],
                        m["edge_mode"], m["coord_offset"], m["lifter_hidden"],
                        m["lifter_layers"], tc.steps, m["seed"],
                        NodeCountDistribution.fit(train_ds.node_counts()))
    ckpt = os.path.join(out, "checkpoints")

    def progress(row):
        print(f"epoch {row['epoch']}: train {row['train_nll']:.4f} val {row['val_nll']} "
              f"({row['wall_time']:.1f}s)", flush=True)

    result = train(tc, train_ds, model, val_ds, ckpt, progress)
    os.replace(os.path.join(ckpt, "train_log.csv"), os.path.join(out, "logs", "train_log.csv"))
    if result.halted:
        raise CommandError(f"training halted: {result.halted}; best checkpoint kept")
    print(f"best epoch {result.best_epoch}")


def _load(out):
    path = os.path.join(out, "checkpoints", "best.npz")
    if not os.path.exists(path):
        raise CommandError(f"no checkpoint at {path}; run train first")
    return load_model(path)[0]


def cmd_sample(cfg, out):
    model = _load(out)
    s = cfg["sample"]
    records = model.sample(s["num"], make_generator(s["seed"]), steps=s["steps"])
    types = [r.h_cat[:, 0] for r in records] if model.layout.cat_classes else None
    charges = [r.h_ord[:, 0] for r in records] if model.layout.n_ord else None
    path = os.path.join(out, "samples", "samples.txt")
    molecule_write(path, [r.x for r in records], types, charges)
    print(f"wrote {len(records)} samples to {path}")


def cmd_eval(cfg, out):
    e = cfg["eval"]
    model = _load(out)
    ds = _read_split(cfg, out, e["split"])
    ref = _read_split(cfg, out, "train") if e["samples"] else None
    report = evaluate(model, ds, TraceEstimator(e["trace"]), e["passes"], e["seed"], e["steps"],
                      e["batch_size"], e["samples"], ref, e["bins"])
    path = os.path.join(out, "reports", f"eval_{e['split']}.txt")
    write_report(report, path)
    print(f"nll_mean = {report['summary']['nll_mean']} -> {path}")


def cmd_verify(cfg, out):
    results = run_all(seed=cfg["model"]["seed"])
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    write_report({"summary": {"passed": len(results) - len(failed), "failed": len(failed)},
                  "tables": {"suites": [{"suite": r.name, "passed": r.passed,
                                         "value": repr(r.value), "tolerance": r.tolerance}
                                        for r in results]}},
                 os.path.join(out, "reports", "verify.txt"))
    return EXIT_VERIFY if failed else EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "sample": cmd_sample,
            "eval": cmd_eval, "verify": cmd_verify}


def build_parser():
    p = argparse.ArgumentParser(prog="enflows", description="E(n) equivariant flows toolkit")
    p.add_argument("verb", choices=sorted(COMMANDS))
    src = p.add_mutually_exclusive_group()
    src.add_argument("--config", help="key-value config file")
    src.add_argument("--preset", choices=("dw4", "lj13"), help="shipped reference config")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config value, e.g. train.lr=1e-3 (repeatable)")
    p.add_argument("--out", default="runs/default", help="output directory")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.preset:
            cfg = cfgmod.load_config(cfgmod.reference_config(args.preset),
                                     overrides=args.overrides)
        elif args.config:
            cfg = cfgmod.load_config(path=args.config, overrides=args.overrides)
        else:
            cfg = cfgmod.load_config("", overrides=args.overrides)
        if args.verb == "train":
            _train_config(cfg)
    except (cfgmod.ConfigError, ValueError, TypeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    dirs = _paths(args.out)
    for key, path in dirs.items():
        if args.verb != "verify" or key == "reports":
            os.makedirs(path, exist_ok=True)
    text = cfgmod.render_config(cfg)
    if args.verb != "verify":
        with open(os.path.join(args.out, f"config.{args.verb}.cfg"), "w") as fh:
            fh.write(f"# sha256 {hashlib.sha256(text.encode()).hexdigest()}\n{text}")
    started = time.perf_counter()
    try:
        code = COMMANDS[args.verb](cfg, args.out) or EXIT_OK
    except cfgmod.ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (CommandError, ValueError, RuntimeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"{args.verb} finished in {time.perf_counter() - started:.1f}s")
    return code


if __name__ == "__main__":
    sys.exit(main())
