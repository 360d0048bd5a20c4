"""Command-line client for the vidseg service.

Every subcommand is a thin wrapper that builds a request and posts it to
the HTTP API: against a running server when --url is given, otherwise
against an in-process instance of the app (same code path, no network).
`vidseg serve` starts the server itself.
"""

from __future__ import annotations

import argparse
import json
import sys


def make_client(url: str | None):
    if url:
        import httpx

        return httpx.Client(base_url=url, timeout=None)
    import warnings

    with warnings.catch_warnings():
        # starlette's in-process client wants the not-yet-published httpx2
        warnings.filterwarnings("ignore", message="Using `httpx`")
        from starlette.testclient import TestClient

    from .service import create_app

    return TestClient(create_app())


def _post(args, path: str, payload: dict) -> int:
    with make_client(args.url) as client:
        resp = client.post(path, json=payload)
    try:
        body = resp.json()
    except ValueError:
        body = {"raw": resp.text}
    print(json.dumps(body, indent=2))
    return 0 if resp.status_code == 200 else 1


def cmd_serve(args) -> int:
    import uvicorn

    uvicorn.run("vidseg.service:app", host=args.host, port=args.port)
    return 0


def cmd_gen_data(args) -> int:
    return _post(args, "/datasets", {
        "out_dir": args.out,
        "n_clips": args.n_clips,
        "base_seed": args.seed,
        "frame_h": args.frame_size,
        "frame_w": args.frame_size,
        "clip_length": args.clip_length,
        "min_instances": args.min_instances,
        "max_instances": args.max_instances,
        "disc_radius": args.disc_radius,
        "rect_half": args.rect_half,
        "crossing": args.crossing,
    })


def cmd_train(args) -> int:
    payload = {
        "manifest_path": args.data,
        "out_dir": args.out,
        "split": args.split,
        "model_seed": args.model_seed,
        "train": {
            "base_lr": args.lr,
            "weight_decay": args.weight_decay,
            "backbone_lr_multiplier": args.backbone_lr_multiplier,
            "total_iters": args.iters,
            "batch_size": args.batch_size,
            "clip_length_T": args.clip_length,
            "seed": args.seed,
        },
    }
    if args.config:
        overrides = json.loads(open(args.config).read())
        for section, values in overrides.items():
            if isinstance(values, dict):
                payload.setdefault(section, {}).update(values)
            else:
                payload[section] = values
    return _post(args, "/train", payload)


def cmd_infer(args) -> int:
    return _post(args, "/infer", {
        "checkpoint_dir": args.checkpoint,
        "clip_path": args.clip,
        "out_dir": args.out,
        "clip_id": args.clip_id,
        "top_k": args.top_k,
    })


def cmd_eval(args) -> int:
    return _post(args, "/eval", {
        "manifest_path": args.manifest,
        "predictions_dir": args.preds,
        "split": args.split,
        "report_path": args.out,
    })


def cmd_overlay(args) -> int:
    return _post(args, "/overlay", {
        "clip_path": args.clip,
        "predictions_path": args.preds,
        "out_dir": args.out,
        "min_score": args.min_score,
    })


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vidseg", description=__doc__)
    parser.add_argument("--url", default=None,
                        help="base URL of a running service; default runs in-process")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", help="start the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(fn=cmd_serve)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-clips", type=int, default=400)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frame-size", type=int, default=64)
    p.add_argument("--clip-length", type=int, default=8)
    p.add_argument("--min-instances", type=int, default=1)
    p.add_argument("--max-instances", type=int, default=2)
    p.add_argument("--disc-radius", type=float, nargs=2, default=[7.0, 14.0],
                   metavar=("MIN", "MAX"))
    p.add_argument("--rect-half", type=float, nargs=2, default=[5.0, 11.0],
                   metavar=("MIN", "MAX"))
    p.add_argument("--crossing", action="store_true")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a dataset split")
    p.add_argument("--data", required=True, help="manifest.json path")
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--config", default=None, help="JSON file with request overrides")
    p.add_argument("--iters", type=int, default=500)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--clip-length", type=int, default=2)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--weight-decay", type=float, default=0.05)
    p.add_argument("--backbone-lr-multiplier", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--model-seed", type=int, default=0)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("infer", help="run whole-sequence inference on one clip")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--clip", required=True, help="frames tensor file")
    p.add_argument("--out", required=True)
    p.add_argument("--clip-id", default="")
    p.add_argument("--top-k", type=int, default=10)
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("eval", help="score predictions against a dataset split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--preds", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--out", default="", help="optional JSON report path")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("overlay", help="render predicted masks onto frames")
    p.add_argument("--clip", required=True)
    p.add_argument("--preds", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--min-score", type=float, default=0.5)
    p.set_defaults(fn=cmd_overlay)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
