"""Command-line client for the semiseg service.

By default every subcommand talks to an in-process application instance, so
a plain invocation behaves like a normal single-process tool. Point --server
(or SEMISEG_SERVER) at a running `semiseg serve` to go over the network
instead. Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import asyncio
import os
import shlex
import sys

import httpx
import yaml

from .service import create_app


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; our contract says 1
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _out_root() -> str:
    return os.environ.get("SEMISEG_OUT_ROOT", ".")


def _request(args, method: str, path: str, payload: dict) -> dict:
    server = getattr(args, "server", None) or os.environ.get("SEMISEG_SERVER")
    if server:
        with httpx.Client(base_url=server, timeout=None) as client:
            resp = client.request(method, path, json=payload)
            status, body = resp.status_code, resp.json()
    else:

        async def go():
            transport = httpx.ASGITransport(app=create_app(), raise_app_exceptions=False)
            async with httpx.AsyncClient(transport=transport, base_url="http://semiseg", timeout=None) as client:
                resp = await client.request(method, path, json=payload)
                return resp.status_code, resp.json()

        status, body = asyncio.run(go())
    if 200 <= status < 300:
        return body
    detail = body.get("detail", body) if isinstance(body, dict) else body
    print(f"error: {detail}", file=sys.stderr)
    raise SystemExit(1 if status < 500 else 2)


def cmd_synth(args) -> int:
    out = args.out or os.path.join(_out_root(), "dataset")
    body = _request(
        args,
        "POST",
        "/synth",
        {
            "out_dir": out,
            "items": args.items,
            "size": args.size,
            "classes": args.classes,
            "seed": args.seed,
            "hq_fraction": args.hq_fraction,
            "overwrite": args.overwrite,
        },
    )
    print(f"wrote {body['n_items']} image/mask pairs ({body['num_classes']} classes) to {body['out_dir']}")
    return 0


def cmd_split(args) -> int:
    body = _request(
        args,
        "POST",
        "/split",
        {
            "data_dir": args.data,
            "protocol": args.protocol,
            "n_labeled": args.n_labeled,
            "seed": args.seed,
            "out_dir": args.out,
        },
    )
    print(f"split {body['split_dir']}: {body['n_labeled']} labeled / {body['n_unlabeled']} unlabeled")
    return 0


def _default_split_dir(data_dir: str) -> str | None:
    root = os.path.join(data_dir, "splits")
    if os.path.isdir(root):
        subs = sorted(d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d)))
        if len(subs) == 1:
            return os.path.join(root, subs[0])
    return None


def _train_config(args) -> dict:
    cfg = {}
    if args.config:
        with open(args.config) as f:
            cfg = yaml.safe_load(f) or {}
    variant = dict(cfg.get("variant") or {})
    if args.variant is not None:
        # a fresh variant name resets the stream counts to its preset
        variant["variant"] = args.variant
        variant.pop("n_image_streams", None)
        variant.pop("n_feature_streams", None)
    for key, val in (
        ("n_image_streams", args.image_streams),
        ("n_feature_streams", args.feature_streams),
        ("tau", args.tau),
        ("lambda_fp", args.lambda_fp),
        ("mu_img", args.mu_img),
    ):
        if val is not None:
            variant[key] = val
    if variant:
        cfg["variant"] = variant
    train = dict(cfg.get("train") or {})
    for key, val in (
        ("base_lr", args.lr),
        ("total_epochs", args.epochs),
        ("batch_l", args.batch_l),
        ("batch_u", args.batch_u),
        ("train_size", args.train_size),
        ("seed", args.seed),
        ("ohem_thresh", args.ohem_thresh),
        ("checkpoint_every", args.checkpoint_every),
    ):
        if val is not None:
            train[key] = val
    if train:
        cfg["train"] = train
    perturb = dict(cfg.get("perturb") or {})
    for key, val in (("kind", args.perturb_kind), ("location", args.perturb_location)):
        if val is not None:
            perturb[key] = val
    if perturb:
        cfg["perturb"] = perturb
    if args.no_strong_aug:
        aug = dict(cfg.get("aug") or {})
        aug["strong_enabled"] = False
        cfg["aug"] = aug
    return cfg


def cmd_train(args) -> int:
    split_dir = args.split or _default_split_dir(args.data)
    if split_dir is None:
        print("error: --split required (no unique default under <data>/splits)", file=sys.stderr)
        raise SystemExit(1)
    out = args.out or os.path.join(_out_root(), "run")
    command = "semiseg " + shlex.join(sys.argv[1:]) if sys.argv else "semiseg train"
    body = _request(
        args,
        "POST",
        "/train",
        {
            "data_dir": args.data,
            "split_dir": split_dir,
            "out_dir": out,
            "config": _train_config(args),
            "command": command,
        },
    )
    final = body["final"]
    print(
        f"trained {body['steps']} steps; final loss_total {final.get('loss_total', float('nan')):.4f} "
        f"(loss_s {final.get('loss_s', float('nan')):.4f}, loss_u {final.get('loss_u', float('nan')):.4f})"
    )
    print(f"checkpoint: {body['checkpoint']}")
    print(f"metrics: {body['metrics']}")
    return 0


def cmd_eval(args) -> int:
    report = args.report
    if report is None:
        report = os.path.join(os.path.dirname(args.ckpt) or ".", "eval_report.txt")
    body = _request(
        args,
        "POST",
        "/evaluate",
        {
            "data_dir": args.data,
            "checkpoint": args.ckpt,
            "split_dir": args.split,
            "subset": args.subset,
            "window": args.window,
            "stride": args.stride,
            "report": report,
        },
    )
    for c, iou in enumerate(body["per_class_iou"]):
        print(f"class {c}: iou {'n/a' if iou is None else f'{iou:.4f}'}")
    print(f"miou {body['miou']:.4f} over {body['n_items']} items")
    for key, val in body.get("extras", {}).items():
        print(f"{key}: {val:.4f}")
    print(f"report: {body['report']}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    uvicorn.run(create_app(), host=args.host, port=args.port)
    return 0


def build_parser() -> _Parser:
    p = _Parser(prog="semiseg", description="semi-supervised segmentation trainer")
    p.add_argument("--server", default=None, help="base URL of a running service (default: in-process)")
    sub = p.add_subparsers(dest="command", required=True)

    ps = sub.add_parser("synth", help="generate a synthetic shapes dataset")
    ps.add_argument("--out", default=None)
    ps.add_argument("--items", type=int, default=520)
    ps.add_argument("--size", type=int, default=64)
    ps.add_argument("--classes", type=int, default=3)
    ps.add_argument("--seed", type=int, default=0)
    ps.add_argument("--hq-fraction", type=float, default=0.25)
    ps.add_argument("--overwrite", action="store_true")
    ps.set_defaults(func=cmd_synth)

    pp = sub.add_parser("split", help="write labeled/unlabeled split files")
    pp.add_argument("--data", required=True)
    pp.add_argument("--protocol", default="blended")
    pp.add_argument("--n-labeled", type=float, default=8)
    pp.add_argument("--seed", type=int, default=0)
    pp.add_argument("--out", default=None)
    pp.set_defaults(func=cmd_split)

    pt = sub.add_parser("train", help="train a variant on an existing split")
    pt.add_argument("--data", required=True)
    pt.add_argument("--split", default=None)
    pt.add_argument("--out", default=None)
    pt.add_argument("--config", default=None, help="YAML config file; flags override it")
    pt.add_argument("--variant", default=None)
    pt.add_argument("--image-streams", type=int, default=None)
    pt.add_argument("--feature-streams", type=int, default=None)
    pt.add_argument("--tau", type=float, default=None)
    pt.add_argument("--lambda", dest="lambda_fp", type=float, default=None)
    pt.add_argument("--mu", dest="mu_img", type=float, default=None)
    pt.add_argument("--perturb-kind", default=None)
    pt.add_argument("--perturb-location", default=None)
    pt.add_argument("--lr", type=float, default=None)
    pt.add_argument("--epochs", type=int, default=None)
    pt.add_argument("--batch-l", type=int, default=None)
    pt.add_argument("--batch-u", type=int, default=None)
    pt.add_argument("--train-size", type=int, default=None)
    pt.add_argument("--seed", type=int, default=None)
    pt.add_argument("--ohem-thresh", type=float, default=None)
    pt.add_argument("--checkpoint-every", type=int, default=None)
    pt.add_argument("--no-strong-aug", action="store_true", help="use the weak view as the strong view")
    pt.set_defaults(func=cmd_train)

    pe = sub.add_parser("eval", help="evaluate a checkpoint")
    pe.add_argument("--data", required=True)
    pe.add_argument("--ckpt", required=True)
    pe.add_argument("--split", default=None)
    pe.add_argument("--subset", default="all", help="all | labeled | unlabeled")
    pe.add_argument("--window", type=int, default=None)
    pe.add_argument("--stride", type=int, default=None)
    pe.add_argument("--report", default=None)
    pe.set_defaults(func=cmd_eval)

    pv = sub.add_parser("serve", help="run the HTTP service")
    pv.add_argument("--host", default="127.0.0.1")
    pv.add_argument("--port", type=int, default=8008)
    pv.set_defaults(func=cmd_serve)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


def main() -> None:
    try:
        sys.exit(run())
    except SystemExit:
        raise
    except KeyboardInterrupt:
        sys.exit(130)


if __name__ == "__main__":
    main()
