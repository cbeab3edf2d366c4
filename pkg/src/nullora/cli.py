"""Command line entry point: ``nullora {analyze,init,train,verify,merge}``.

Exit codes: 0 ok, 1 usage error, 2 data/format error, 3 invariant failure
(verify), 4 training divergence.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import re
import sys
from pathlib import Path

import numpy as np

from nullora import adapter as ad
from nullora import io as nio
from nullora import numerics, training
from nullora.numerics import DEFAULT_TAU

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INVARIANT, EXIT_DIVERGED = 0, 1, 2, 3, 4

log = logging.getLogger("nullora")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- helpers ----------------------------------------------------------------


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"no such file: {path}")
    return p


def _writable(path: str) -> Path:
    p = Path(path)
    parent = p.parent if str(p.parent) else Path(".")
    if not parent.is_dir() or not os.access(parent, os.W_OK):
        raise UsageError(f"cannot write to {path}")
    return p


def load_checkpoint(path: Path) -> nio.TensorFile:
    tf = nio.read_tensor_file(path, upcast=True)
    for name in tf.upcast:
        log.warning("%s: f32 tensor %r widened to f64", path, name)
    return tf


def analysis_report(weights: dict[str, np.ndarray], tau: float) -> dict:
    layers = []
    for name in sorted(weights):
        W = weights[name]
        rep = numerics.rank_report(W, tau, name)
        entry = {"name": name, "d_out": W.shape[0], "d_in": W.shape[1]}
        entry.update(rep.to_dict())
        entry["deficiency_pct"] = rep.nullity_right / W.shape[1] * 100.0
        layers.append(entry)
    mean = float(np.mean([e["deficiency_pct"] for e in layers])) if layers else 0.0
    return {"tau": tau, "layers": layers, "mean_deficiency_pct": mean}


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


_PLANTED = re.compile(r"^planted:(\d+)x(\d+):(\d+):(\d+)$")


# -- subcommands ------------------------------------------------------------


def cmd_analyze(args) -> int:
    ckpt = _existing(args.ckpt)
    out = _writable(args.json) if args.json else None
    tf = load_checkpoint(ckpt)
    report = analysis_report(tf.entries, args.tau)
    print(f"{'layer':<24} {'shape':>11} {'rank':>6} {'null_L':>7} {'null_R':>7} {'sigma_max':>11} {'defic%':>8}")
    for e in report["layers"]:
        shape = f"{e['d_out']}x{e['d_in']}"
        print(
            f"{e['name']:<24} {shape:>11} {e['rank']:>6} {e['nullity_left']:>7} "
            f"{e['nullity_right']:>7} {e['sigma_max']:>11.4g} {e['deficiency_pct']:>8.2f}"
        )
    print(f"mean deficiency: {report['mean_deficiency_pct']:.2f}% over {len(report['layers'])} layers (tau={args.tau:g})")
    if out:
        _write_json(out, report)
    return EXIT_OK


def cmd_init(args) -> int:
    ckpt = _existing(args.ckpt)
    out = _writable(args.out)
    if args.mode == "lora" and args.rank is None:
        raise UsageError("--rank is required for --mode lora")
    if args.rank is not None and args.mode == "null":
        raise UsageError("--rank does not apply to --mode null (rank follows the nullity)")
    tf = load_checkpoint(ckpt)
    mode = ad.Mode(args.mode)
    layers, metas = [], []
    for idx, name in enumerate(sorted(tf.entries)):
        W0 = tf.entries[name]
        seed = np.random.SeedSequence([args.seed, idx]).generate_state(1)[0]
        try:
            if mode is ad.Mode.NULL_LORA:
                layer = ad.init_null_lora(name, W0, args.tau, args.max_rank)
            elif mode is ad.Mode.ABLATION_RANDOM:
                r = args.rank
                if r is None:
                    # same budget as the null-space adapter would get
                    r = ad.init_null_lora(name, W0, args.tau, args.max_rank).r
                layer = ad.init_ablation(name, W0, r, int(seed))
            else:
                layer = ad.init_vanilla_lora(name, W0, args.rank, int(seed))
        except ad.LayerSkipped:
            metas.append(nio.LayerMeta(name, 0, W0.shape[0], W0.shape[1], skipped=True))
            print(f"{name}: skipped (full rank at tau={args.tau:g})")
            continue
        except ValueError as exc:
            raise DataError(str(exc)) from exc
        layers.append(layer)
        metas.append(nio.LayerMeta(name, layer.r, layer.d_out, layer.d_in, lora_alpha=layer.lora_alpha))
        print(f"{name}: r={layer.r} trainable={layer.trainable_count()}")
    if not layers:
        print("warning: every layer was skipped; adapter has no trainable parameters", file=sys.stderr)
    total = sum(layer.trainable_count() for layer in layers)
    print(f"total trainable parameters: {total}")
    nio.save_adapter(out, layers, nio.AdapterMeta(mode=mode.value, tau=args.tau, seed=args.seed, layers=metas))
    return EXIT_OK


def _pick_layer(layers, name):
    if name is not None:
        for layer in layers:
            if layer.name == name:
                return layer
        raise UsageError(f"adapter has no trainable layer {name!r}")
    if len(layers) != 1:
        raise UsageError(f"adapter has {len(layers)} trainable layers; choose one with --layer")
    return layers[0]


def _build_task(spec: str, layer, tau: float, seed: int) -> training.PlantedTask:
    m = _PLANTED.match(spec)
    if m:
        d_out, d_in, nullity, n = (int(g) for g in m.groups())
        if (d_out, d_in) != layer.W0.shape:
            raise DataError(f"task is {d_out}x{d_in} but layer {layer.name!r} is {layer.d_out}x{layer.d_in}")
        rep = numerics.rank_report(layer.W0, tau, layer.name)
        measured = min(rep.nullity_left, rep.nullity_right)
        if measured != nullity:
            raise DataError(f"layer {layer.name!r} has nullity {measured}, task declares {nullity}")
        return training.plant_task(layer.W0, n, seed, tau)
    if spec.startswith("data:"):
        tf = nio.read_tensor_file(_existing(spec[5:]), upcast=True)
        try:
            X, T = tf.entries["inputs"], tf.entries["targets"]
        except KeyError as exc:
            raise DataError(f"data file lacks tensor {exc}") from exc
        if X.shape[0] != layer.d_in or T.shape != (layer.d_out, X.shape[1]):
            raise DataError(f"data shapes {X.shape}/{T.shape} do not fit layer {layer.d_out}x{layer.d_in}")
        return training.PlantedTask(W0=layer.W0, delta_star=np.zeros_like(layer.W0), inputs=X, targets=T)
    raise UsageError(f"bad --task {spec!r}; use planted:<d_out>x<d_in>:<nullity>:<n> or data:<file>")


def cmd_train(args) -> int:
    ckpt = _existing(args.ckpt)
    adapter_path = _existing(args.adapter)
    log_path = _writable(args.log) if args.log else None
    try:
        cfg = training.TrainConfig(
            steps=args.steps,
            batch_size=args.batch,
            learning_rate=args.lr,
            optimizer=args.optimizer,
            weight_decay=args.weight_decay,
            seed=args.seed,
            log_every=args.log_every,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    tf = load_checkpoint(ckpt)
    layers, meta = nio.load_adapter(adapter_path, tf.entries)
    layer = _pick_layer(layers, args.layer)
    task = _build_task(args.task, layer, meta.tau, args.seed)
    try:
        history = training.train(layer, task, cfg)
    except training.TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    if log_path:
        history.write_csv(log_path)
    nio.save_adapter(adapter_path, layers, meta)
    last = history.records[-1]
    print(f"layer {layer.name}: initial loss {history.initial_loss:.6e}")
    print(f"final loss {history.final_loss:.6e} after {cfg.steps} steps (null residual {last.null_residual:.2e})")
    return EXIT_OK


def cmd_verify(args) -> int:
    ckpt = _existing(args.ckpt)
    adapter_path = _existing(args.adapter)
    out = _writable(args.json) if args.json else None
    tf = load_checkpoint(ckpt)
    layers, meta = nio.load_adapter(adapter_path, tf.entries, check=False)
    reports = [ad.verify_invariants(layer, args.tol_profile) for layer in layers]
    ok = all(rep.passed for rep in reports)
    for rep in reports:
        for name, c in rep.checks.items():
            status = ("PASS" if c["pass"] else "FAIL") if c["applicable"] else "n/a"
            print(f"{rep.layer:<24} {name:<26} {c['measured']:.3e} <= {c['tolerance']:.0e}  {status}")
    print("all invariants pass" if ok else "INVARIANT FAILURE")
    if out:
        _write_json(out, {"pass": ok, "mode": meta.mode, "tol_profile": args.tol_profile, "layers": [r.to_dict() for r in reports]})
    return EXIT_OK if ok else EXIT_INVARIANT


def cmd_merge(args) -> int:
    ckpt = _existing(args.ckpt)
    adapter_path = _existing(args.adapter)
    out = _writable(args.out)
    raw = nio.read_tensor_file(ckpt)
    wide = {k: np.asarray(v, dtype=np.float64) for k, v in raw.entries.items()}
    layers, _ = nio.load_adapter(adapter_path, wide)
    merged = dict(raw.entries)
    for layer in layers:
        delta = ad.delta_weight(layer)
        if delta.any():
            merged[layer.name] = layer.W0 + delta
    nio.write_tensor_file(out, nio.TensorFile(entries=merged, metadata=raw.metadata))
    print(f"merged {len(layers)} adapted layers into {out}")
    return EXIT_OK


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nullora", description="Null-space low-rank adapters for dense weights.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    a = sub.add_parser("analyze", help="rank/nullity report for every weight in a checkpoint")
    a.add_argument("ckpt")
    a.add_argument("--tau", type=float, default=DEFAULT_TAU)
    a.add_argument("--json", help="write the report as JSON")
    a.set_defaults(func=cmd_analyze)

    i = sub.add_parser("init", help="build an adapter for a checkpoint")
    i.add_argument("ckpt")
    i.add_argument("--out", required=True)
    i.add_argument("--mode", choices=[m.value for m in ad.Mode], default="null")
    i.add_argument("--tau", type=float, default=DEFAULT_TAU)
    i.add_argument("--max-rank", type=int)
    i.add_argument("--rank", type=int, help="total rank for ablation/lora modes")
    i.add_argument("--seed", type=int, default=0)
    i.set_defaults(func=cmd_init)

    t = sub.add_parser("train", help="train one adapter layer on a task")
    t.add_argument("--ckpt", required=True)
    t.add_argument("--adapter", required=True)
    t.add_argument("--task", required=True)
    t.add_argument("--layer")
    t.add_argument("--steps", type=int, default=500)
    t.add_argument("--lr", type=float, default=1e-4)
    t.add_argument("--optimizer", choices=[o.value for o in training.Optimizer], default="adamw")
    t.add_argument("--weight-decay", type=float, default=0.05)
    t.add_argument("--batch", type=int, default=64)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--log", help="CSV history output")
    t.add_argument("--log-every", type=int, default=10)
    t.set_defaults(func=cmd_train)

    v = sub.add_parser("verify", help="check adapter invariants against a checkpoint")
    v.add_argument("--ckpt", required=True)
    v.add_argument("--adapter", required=True)
    v.add_argument("--tol-profile", choices=sorted(ad.TOLERANCE_PROFILES), default="default")
    v.add_argument("--json", help="write the invariant report as JSON")
    v.set_defaults(func=cmd_verify)

    m = sub.add_parser("merge", help="fold an adapter into its checkpoint")
    m.add_argument("--ckpt", required=True)
    m.add_argument("--adapter", required=True)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_merge)
    return p


def _thread_limit():
    n = os.environ.get("NULLORA_THREADS")
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, int(n)))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except UsageError as exc:
        print(f"nullora {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, nio.FormatError, nio.AdapterError, numerics.SvdError, ValueError) as exc:
        print(f"nullora {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
