"""Command-line front end: synth, train, eval, cost, bench, gradcheck.

Only the standard library is imported at module level; numpy and the model
code load lazily inside each command so that `--threads N` can pin the BLAS
thread pools through environment variables before numpy first loads.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from dataclasses import dataclass

BOX_KINDS = ("iou", "giou", "diou", "ciou", "eiou", "siou")
ACT_KINDS = ("leakyrelu", "hswish", "mish")
MODEL_KINDS = ("baseline", "light")
SPLITS = ("train", "val", "test")
COST_REF_SIZE = 640

_THREAD_VARS = ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS")


class CliError(Exception):
    """Bad invocation caught before any work happens."""


@dataclass
class RunConfig:
    model: str = "light"
    nc: int = 2
    img: int = 448
    epochs: int = 100
    batch: int = 16
    lr: float = 0.01
    momentum: float = 0.937
    box: str = "siou"
    act: str = "mish"
    seed: int = 0
    data: str = ""
    weights: str = ""
    width: float = 0.25
    split: str = "test"
    images: int = 64
    iters: int = 0
    cosine: bool = False
    augment: bool = False
    threads: int = 0

    def validate(self) -> None:
        if self.model not in MODEL_KINDS:
            raise CliError(f"model must be one of {MODEL_KINDS}, got {self.model!r}")
        if self.box not in BOX_KINDS:
            raise CliError(f"box must be one of {BOX_KINDS}, got {self.box!r}")
        if self.act not in ACT_KINDS:
            raise CliError(f"act must be one of {ACT_KINDS}, got {self.act!r}")
        if self.split not in SPLITS:
            raise CliError(f"split must be one of {SPLITS}, got {self.split!r}")
        for name in ("nc", "img", "epochs", "batch", "images"):
            if getattr(self, name) < 1:
                raise CliError(f"{name} must be positive")
        if self.lr <= 0 or self.width <= 0:
            raise CliError("lr and width must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise CliError("momentum must lie in [0, 1)")
        if self.seed < 0 or self.iters < 0 or self.threads < 0:
            raise CliError("seed, iters and threads cannot be negative")
        if self.img % 32:
            raise CliError("img must be a multiple of 32 (the coarsest stride)")


# the desk-scale profile: small width, 64 images, settings sized so the
# training run memorizes its split within a few hundred steps on a CPU
PROFILES: dict[str, dict] = {
    "toy": {"width": 0.125, "images": 64, "img": 128, "batch": 16,
            "lr": 0.2, "epochs": 75, "iters": 300, "cosine": True},
    "paper": {"width": 0.25, "img": 448, "batch": 16, "lr": 0.01,
              "epochs": 100},
}

_BOOL_WORDS = {"1": True, "true": True, "yes": True, "on": True,
               "0": False, "false": False, "no": False, "off": False}


def parse_config_text(text: str) -> dict:
    """Flat `key = value` lines with `#` comments -> typed dict."""
    types = {f.name: f.type for f in dataclasses.fields(RunConfig)}
    pytypes = {"str": str, "int": int, "float": float, "bool": bool}
    out: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"config line {lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in types:
            raise CliError(f"config line {lineno}: unknown key {key!r}")
        ty = pytypes[types[key]] if isinstance(types[key], str) else types[key]
        try:
            if ty is bool:
                out[key] = _BOOL_WORDS[value.lower()]
            else:
                out[key] = ty(value)
        except (KeyError, ValueError):
            raise CliError(
                f"config line {lineno}: cannot read {value!r} as {ty.__name__}"
            ) from None
    return out


def build_config(args: argparse.Namespace) -> RunConfig:
    """defaults < profile < config file < explicit flags, then validate."""
    merged: dict = {}
    if args.profile:
        merged.update(PROFILES[args.profile])
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                merged.update(parse_config_text(fh.read()))
        except OSError as e:
            raise CliError(f"cannot read config {args.config}: {e}") from None
    for f in dataclasses.fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            merged[f.name] = v
    cfg = RunConfig(**merged)
    cfg.validate()
    return cfg


# ---- commands (heavy imports stay inside) ----


def _build(cfg: RunConfig, kind: str | None = None):
    import numpy as np

    from .model import build_model

    return build_model(kind or cfg.model, nc=cfg.nc, width=cfg.width,
                       act=cfg.act, img_size=cfg.img,
                       rng=np.random.default_rng(cfg.seed))


def _load_weights(cfg: RunConfig, model) -> None:
    from .model import load_checkpoint

    if cfg.weights:
        load_checkpoint(cfg.weights, model)


def cmd_synth(cfg: RunConfig) -> int:
    from .data import ensure_split, synth_generate

    if not cfg.data:
        raise CliError("synth needs --data DIR to write into")
    stems = synth_generate(cfg.images, cfg.seed, cfg.data, size=cfg.img)
    pairs = ensure_split(cfg.data, cfg.seed)
    tags = [t for _, t in pairs]
    print(f"wrote {len(stems)} images to {cfg.data} "
          f"(train {tags.count('train')}, val {tags.count('val')}, "
          f"test {tags.count('test')})")
    return 0


def cmd_train(cfg: RunConfig) -> int:
    import numpy as np

    from .data import load_split
    from .errors import ValidationError
    from .model import save_checkpoint
    from .train import evaluate_model, fit

    if not cfg.data:
        raise CliError("train needs --data DIR")
    images, targets, _ = load_split(cfg.data, cfg.seed, "train", cfg.nc, cfg.img)
    try:
        val_images, val_targets, _ = load_split(cfg.data, cfg.seed, "val",
                                                cfg.nc, cfg.img)
        val_tag = "val"
    except ValidationError:
        val_images, val_targets, val_tag = images, targets, "train"

    model = _build(cfg)  # --weights names where the best checkpoint goes
    batch = min(cfg.batch, len(images))
    steps_per_epoch = max(1, (len(images) + batch - 1) // batch)
    iters = cfg.epochs * steps_per_epoch
    if cfg.iters:
        iters = min(iters, cfg.iters)
    out_path = cfg.weights or os.path.join(cfg.data, "best.ckpt")
    best = {"map50": -1.0, "epoch": -1}

    def on_epoch(epoch: int, parts: dict) -> None:
        rep = evaluate_model(model, val_images, val_targets)
        print(f"epoch {epoch:3d}  box {parts['box']:.4f}  obj {parts['obj']:.4f}  "
              f"cls {parts['cls']:.4f}  total {parts['total']:.4f}  "
              f"{val_tag}_map50 {rep.map50:.4f}", flush=True)
        if rep.map50 > best["map50"]:
            best.update(map50=rep.map50, epoch=epoch)
            save_checkpoint(out_path, model)

    fit(model, images, targets, iters=iters, batch=batch, lr=cfg.lr,
        momentum=cfg.momentum, box_kind=cfg.box, seed=cfg.seed,
        augment=cfg.augment, cosine=cfg.cosine, on_epoch=on_epoch)
    if best["epoch"] < 0:  # fewer steps than one epoch: keep the final state
        rep = evaluate_model(model, val_images, val_targets)
        best.update(map50=rep.map50, epoch=0)
        save_checkpoint(out_path, model)
    print(f"best checkpoint {out_path} ({val_tag}_map50 {best['map50']:.4f} "
          f"at epoch {best['epoch']})")
    return 0


def cmd_eval(cfg: RunConfig) -> int:
    from .data import load_split
    from .train import evaluate_model

    if not cfg.data:
        raise CliError("eval needs --data DIR")
    images, targets, _ = load_split(cfg.data, cfg.seed, cfg.split, cfg.nc, cfg.img)
    model = _build(cfg)
    _load_weights(cfg, model)
    rep = evaluate_model(model, images, targets)
    for cls in sorted(rep.ap_per_class):
        n_gt = rep.per_class_counts.get(cls, 0)
        print(f"class {cls}  ap50 {rep.ap_per_class[cls]:.4f}  gt {n_gt}")
    print(f"precision {rep.precision:.4f}  recall {rep.recall:.4f}  "
          f"map50 {rep.map50:.4f}")
    return 0


def cmd_cost(cfg: RunConfig) -> int:
    rows: dict[str, list] = {}
    totals: dict[str, tuple[int, int]] = {}
    for kind in MODEL_KINDS:
        model = _build(cfg, kind)
        kind_rows = model.cost_rows(COST_REF_SIZE)
        rows[kind] = kind_rows
        totals[kind] = (sum(r[1] for r in kind_rows), sum(r[2] for r in kind_rows))
    for kind in MODEL_KINDS:
        for name, params, flops in rows[kind]:
            print(f"{kind}.{name}\t{params}\t{flops}")
        p, f = totals[kind]
        print(f"{kind}.total\t{p}\t{f}")
    (bp, bf), (lp, lf) = totals["baseline"], totals["light"]
    dp = 100.0 * (bp - lp) / bp
    df = 100.0 * (bf - lf) / bf
    print(f"reduction_pct\t{dp:.1f}\t{df:.1f}")
    return 0


def cmd_bench(cfg: RunConfig) -> int:
    import numpy as np

    from .metrics import fps_bench
    from .model import detect_images

    model = _build(cfg)
    _load_weights(cfg, model)
    x = np.random.default_rng(cfg.seed).random((1, 3, cfg.img, cfg.img),
                                               dtype=np.float32)
    stats = fps_bench(lambda: detect_images(model, x))
    print(f"mean_ms {stats['mean_ms']:.2f}  p95_ms {stats['p95_ms']:.2f}  "
          f"fps {stats['fps']:.2f}")
    return 0


def cmd_gradcheck(cfg: RunConfig) -> int:
    from .checks import run_checks

    results = run_checks()
    worst = 0.0
    for r in results:
        print(f"{r.name:24s} max_err {r.max_err:.3e}  "
              f"{'ok' if r.ok else 'FAIL'}  ({r.seconds:.2f}s)")
        worst = max(worst, r.max_err)
    n_bad = sum(not r.ok for r in results)
    print(f"{len(results) - n_bad}/{len(results)} checks passed "
          f"(worst {worst:.3e})")
    return 0 if n_bad == 0 else 2


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "cost": cmd_cost,
    "bench": cmd_bench,
    "gradcheck": cmd_gradcheck,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # bad flags are validation errors, not exit(2)
        raise CliError(message)


def make_parser() -> _Parser:
    p = _Parser(prog="lightdet", description=__doc__)
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", default=None, help="flat key = value file")
    p.add_argument("--profile", choices=sorted(PROFILES), default=None)
    p.add_argument("--model", choices=MODEL_KINDS, default=None)
    p.add_argument("--nc", type=int, default=None)
    p.add_argument("--img", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--momentum", type=float, default=None)
    p.add_argument("--box", choices=BOX_KINDS, default=None)
    p.add_argument("--act", choices=ACT_KINDS, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--data", default=None, help="dataset root directory")
    p.add_argument("--weights", default=None, help="checkpoint path")
    p.add_argument("--width", type=float, default=None)
    p.add_argument("--split", choices=SPLITS, default=None)
    p.add_argument("--images", type=int, default=None, help="synth image count")
    p.add_argument("--iters", type=int, default=None,
                   help="hard cap on optimizer steps (0 = epochs decide)")
    p.add_argument("--cosine", action="store_const", const=True, default=None,
                   help="decay lr to 10%% of base over the run")
    p.add_argument("--augment", action="store_const", const=True, default=None)
    p.add_argument("--threads", type=int, default=None,
                   help="pin BLAS/OpenMP thread count (1 = bit-reproducible)")
    return p


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = make_parser().parse_args(argv)
        if args.threads is not None and args.threads > 0:
            for var in _THREAD_VARS:  # before numpy first loads
                os.environ[var] = str(args.threads)
        cfg = build_config(args)
        return COMMANDS[args.command](cfg)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - the CLI boundary reports, not raises
        from .errors import ValidationError

        if isinstance(e, ValidationError):
            print(f"error: {e}", file=sys.stderr)
            return 1
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
