"""Pipeline driver: gen-model, calibrate, rank, linearize, eval, cost.

Every subcommand is deterministic given its inputs and seeds. Exit codes:
0 success, 2 validation error (bad flags, bad config, missing inputs),
1 runtime failure. A JSON config file can preload any flag; explicit flags
win. NBL_THREADS caps the per-layer worker pool (0 or unset picks the CPU
count).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import costmodel, dumpio, ranking, stats, toymodel
from .lmmse import fit_lmmse
from .spectral import FLOOR_REL_DEFAULT, RIDGE_REL


def worker_count() -> int:
    raw = os.environ.get("NBL_THREADS", "").strip()
    if raw:
        n = int(raw)
        if n > 0:
            return n
    return os.cpu_count() or 1


def _load_config_defaults(argv: list[str]) -> dict:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return {}
    with open(known.config) as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise ValueError("config file must hold a JSON object")
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nbl",
        description="Replace attention sublayers with closed-form linear maps.",
    )
    parser.add_argument("--config", help="JSON file preloading flag values")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-model", help="write a deterministic toy model file")
    p.add_argument("--out", required=True)
    p.add_argument("--layers", type=int, default=8)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--groups", type=int, default=2)
    p.add_argument("--dff", type=int, default=256)
    p.add_argument("--vocab", type=int, default=256)
    p.add_argument("--ctx-max", type=int, default=128)
    p.add_argument("--seed", type=int, default=1)

    p = sub.add_parser("calibrate", help="dump per-layer activations to .nbla files")
    p.add_argument("--model", required=True)
    p.add_argument("--dumps", required=True)
    p.add_argument("--tokens-file")
    p.add_argument("--calib-seed", type=int, default=0)
    p.add_argument("--calib-tokens", type=int, default=20000)
    p.add_argument("--ctx", type=int, default=128)

    p = sub.add_parser("rank", help="score layers from dumps and write a report")
    p.add_argument("--dumps", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--criterion", choices=ranking.CRITERIA, default="cca_bound")
    p.add_argument("--m", type=int, default=0)
    p.add_argument("--ridge", type=float, default=RIDGE_REL)
    p.add_argument("--floor", type=float, default=FLOOR_REL_DEFAULT)

    p = sub.add_parser("linearize", help="fit maps for the selected layers and save")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--criterion", choices=ranking.CRITERIA, default="cca_bound")
    p.add_argument("--strategy", choices=("one_shot", "greedy"), default="one_shot")
    p.add_argument("--dumps", help="required for one_shot")
    p.add_argument("--tokens-file", help="greedy calibration stream")
    p.add_argument("--calib-seed", type=int, default=0)
    p.add_argument("--calib-tokens", type=int, default=20000)
    p.add_argument("--ctx", type=int, default=128)
    p.add_argument("--ridge", type=float, default=RIDGE_REL)
    p.add_argument("--floor", type=float, default=FLOOR_REL_DEFAULT)

    p = sub.add_parser("eval", help="compare two models on a token stream")
    p.add_argument("--model-a", required=True)
    p.add_argument("--model-b", required=True)
    p.add_argument("--tokens-file")
    p.add_argument("--eval-seed", type=int, default=1)
    p.add_argument("--eval-tokens", type=int, default=4096)
    p.add_argument("--ctx", type=int, default=128)
    p.add_argument("--report")

    p = sub.add_parser("cost", help="analytic prefill and KV-cache table")
    p.add_argument("--ctx", type=int, action="append", dest="contexts")
    p.add_argument("--m", type=int, action="append", dest="ms")
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--dim", type=int, default=4096)
    p.add_argument("--heads", type=int, default=32)
    p.add_argument("--groups", type=int, default=8)
    p.add_argument("--layers", type=int, default=32)
    p.add_argument("--bytes", type=int, default=2, dest="bytes_per_elem")
    p.add_argument("--json", dest="json_out", help="also write the table as JSON")

    return parser


def _token_stream(path: str | None, seed: int, count: int, vocab: int) -> np.ndarray:
    if path:
        ids = np.loadtxt(path, dtype=np.int64).reshape(-1)
        if ids.size == 0:
            raise ValueError(f"token file {path} is empty")
        return ids
    return toymodel.synthetic_tokens(vocab, count, seed)


def cmd_gen_model(args) -> int:
    cfg = toymodel.ToyConfig(
        layers=args.layers,
        dim=args.dim,
        heads=args.heads,
        groups=args.groups,
        d_ff=args.dff,
        vocab=args.vocab,
        max_context=args.ctx_max,
        seed=args.seed,
    )
    cfg.validate()
    model = toymodel.init_random(cfg)
    toymodel.save_model(model, args.out)
    print(f"wrote {args.out} (K={cfg.layers}, d={cfg.dim}, h={cfg.heads}, g={cfg.groups})")
    return 0


def cmd_calibrate(args) -> int:
    model = toymodel.load_model(args.model)
    cfg = model.config
    ids = _token_stream(args.tokens_file, args.calib_seed, args.calib_tokens, cfg.vocab)
    context = min(args.ctx, cfg.max_context)
    chunks = toymodel.chunk_tokens(ids, context)
    if not chunks:
        raise ValueError("token stream too short to calibrate")
    total = sum(c.size for c in chunks)
    layer_ids = model.attention_layer_indices()
    os.makedirs(args.dumps, exist_ok=True)

    sinks = {}
    try:
        for k in layer_ids:
            for role in (dumpio.ROLE_INPUT, dumpio.ROLE_OUTPUT):
                path = os.path.join(args.dumps, dumpio.dump_filename(k, role))
                fh = open(path, "wb")
                header = dumpio.DumpHeader(
                    layer_index=k, role=role, feature_dim=cfg.dim, token_count=total
                )
                header.validate()
                fh.write(
                    dumpio.HEADER_STRUCT.pack(
                        dumpio.MAGIC, header.version, k, role, cfg.dim, total,
                        header.dtype_code,
                    )
                )
                sinks[(k, role)] = fh
        for chunk in chunks:
            _, captured = toymodel.forward_batch(model, chunk, set(layer_ids))
            for k, (x, y) in captured.items():
                sinks[(k, dumpio.ROLE_INPUT)].write(
                    np.ascontiguousarray(x.T, dtype="<f4").tobytes()
                )
                sinks[(k, dumpio.ROLE_OUTPUT)].write(
                    np.ascontiguousarray(y.T, dtype="<f4").tobytes()
                )
    finally:
        for fh in sinks.values():
            fh.close()
    print(f"calibrated {len(layer_ids)} layers on {total} tokens -> {args.dumps}")
    return 0


def _layer_moments(dump_dir: str, need_raw: bool):
    """Per-layer covsets (and raw matrices when requested) from a dump dir."""
    pairs = dumpio.scan_dump_dir(dump_dir)
    layer_ids = sorted(pairs)
    if not layer_ids:
        raise ValueError(f"no .nbla dumps found in {dump_dir}")

    def load(k: int):
        roles = pairs[k]
        if dumpio.ROLE_INPUT not in roles or dumpio.ROLE_OUTPUT not in roles:
            raise ValueError(f"layer {k}: missing input or output dump")
        _, x = dumpio.read_dump_file(roles[dumpio.ROLE_INPUT])
        _, y = dumpio.read_dump_file(roles[dumpio.ROLE_OUTPUT])
        if x.shape[1] != y.shape[1]:
            raise ValueError(f"layer {k}: token counts differ between roles")
        cs = stats.covset_from_matrices(x, y)
        return k, cs, (x, y) if need_raw else None

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        rows = list(pool.map(load, layer_ids))
    return {k: (cs, raw) for k, cs, raw in rows}


def cmd_rank(args) -> int:
    moments = _layer_moments(args.dumps, need_raw=args.criterion == "cosine")
    scores = []
    for k in sorted(moments):
        cs, raw = moments[k]
        scores.append(
            ranking.score_layer(
                cs, args.criterion, k, raw=raw, ridge_rel=args.ridge, floor_rel=args.floor
            )
        )
    plan = ranking.select_one_shot(scores, min(args.m, len(scores)))
    selected = set(plan.layers)
    ranked = sorted(scores, key=lambda s: (s.score, s.layer_index))
    report = {
        "criterion": args.criterion,
        "strategy": "one_shot",
        "m": args.m,
        "ridge_rel": args.ridge,
        "floor_rel": args.floor,
        "layers": [
            {
                "index": s.layer_index,
                "score": s.score,
                "selected": s.layer_index in selected,
                **(
                    {"rho": s.rho_spectrum.rho.tolist()}
                    if s.rho_spectrum is not None
                    else {}
                ),
            }
            for s in ranked
        ],
    }
    with open(args.report, "w") as fh:
        json.dump(report, fh, sort_keys=True, indent=2)
        fh.write("\n")
    for s in ranked:
        mark = "*" if s.layer_index in selected else " "
        print(f"{mark} layer {s.layer_index:3d}  {args.criterion} = {s.score:.6g}")
    print(f"report -> {args.report}")
    return 0


def cmd_linearize(args) -> int:
    model = toymodel.load_model(args.model)
    if args.m > model.config.layers:
        raise ValueError(f"m={args.m} exceeds layer count K={model.config.layers}")

    if args.strategy == "greedy":
        ids = _token_stream(
            args.tokens_file, args.calib_seed, args.calib_tokens, model.config.vocab
        )
        context = min(args.ctx, model.config.max_context)
        plan, maps = ranking.greedy_select(
            model, ids, context, args.m, args.criterion,
            ridge_rel=args.ridge, floor_rel=args.floor,
        )
    else:
        if not args.dumps:
            raise ValueError("one_shot linearize requires --dumps")
        moments = _layer_moments(args.dumps, need_raw=args.criterion == "cosine")
        scores = [
            ranking.score_layer(
                cs, args.criterion, k, raw=raw, ridge_rel=args.ridge, floor_rel=args.floor
            )
            for k, (cs, raw) in sorted(moments.items())
        ]
        plan = ranking.select_one_shot(scores, args.m)
        with ThreadPoolExecutor(max_workers=worker_count()) as pool:
            maps = list(
                pool.map(
                    lambda k: fit_lmmse(moments[k][0], k, args.ridge), plan.layers
                )
            )
    compressed = toymodel.substitute(model, plan, maps)
    toymodel.save_model(compressed, args.out)
    print(f"plan ({plan.strategy}, {plan.criterion}): {list(plan.layers)}")
    for m in maps:
        print(f"  layer {m.source_layer:3d}  fit_nmse = {m.fit_nmse:.6g}")
    print(f"wrote {args.out}")
    return 0


def cmd_eval(args) -> int:
    model_a = toymodel.load_model(args.model_a)
    model_b = toymodel.load_model(args.model_b)
    if model_a.config.vocab != model_b.config.vocab:
        raise ValueError("models have different vocabularies")
    ids = _token_stream(args.tokens_file, args.eval_seed, args.eval_tokens, model_a.config.vocab)
    context = min(args.ctx, model_a.config.max_context, model_b.config.max_context)
    chunks = toymodel.chunk_tokens(ids, context)
    if not chunks:
        raise ValueError("token stream too short to evaluate")

    kl_sum = 0.0
    maxabs = 0.0
    nll_a = 0.0
    nll_b = 0.0
    positions = 0
    pred_positions = 0
    lin_layers = model_b.linearized_layer_indices()
    nmse_acc = {
        k: {"resid": 0.0, "ysq": 0.0, "ysum": np.zeros(model_a.config.dim), "n": 0}
        for k in lin_layers
    }
    for chunk in chunks:
        for row in chunk:
            kl, ma = toymodel.logit_drift(model_a, model_b, row)
            kl_sum += kl * row.shape[0]
            maxabs = max(maxabs, ma)
            positions += row.shape[0]
            if row.shape[0] >= 2:
                nll_a += np.log(toymodel.perplexity(model_a, row)) * (row.shape[0] - 1)
                nll_b += np.log(toymodel.perplexity(model_b, row)) * (row.shape[0] - 1)
                pred_positions += row.shape[0] - 1
    # per-layer empirical NMSE in float32, the dump precision convention
    if lin_layers:
        for chunk in chunks:
            _, captured = toymodel.forward_batch(model_a, chunk, set(lin_layers))
            for k in lin_layers:
                x, y = captured[k]
                x = x.astype(np.float32).astype(np.float64)
                y = y.astype(np.float32).astype(np.float64)
                lin = model_b.blocks[k].linear
                resid = y - (lin.weight @ x + lin.bias[:, None])
                acc = nmse_acc[k]
                acc["resid"] += float(np.sum(resid * resid))
                acc["ysq"] += float(np.sum(y * y))
                acc["ysum"] += y.sum(axis=1)
                acc["n"] += y.shape[1]

    per_layer = {}
    for k, acc in nmse_acc.items():
        centered = acc["ysq"] - float(acc["ysum"] @ acc["ysum"]) / acc["n"]
        per_layer[k] = acc["resid"] / centered if centered > 0 else float("inf")

    report = {
        "mean_kl": kl_sum / positions,
        "max_abs_logit_diff": maxabs,
        "perplexity_a": float(np.exp(nll_a / pred_positions)) if pred_positions else None,
        "perplexity_b": float(np.exp(nll_b / pred_positions)) if pred_positions else None,
        "tokens": positions,
        "per_layer_nmse": {str(k): per_layer[k] for k in sorted(per_layer)},
        "fit_nmse": {
            str(k): model_b.blocks[k].linear.fit_nmse for k in sorted(lin_layers)
        },
    }
    text = json.dumps(report, sort_keys=True, indent=2)
    print(text)
    if args.report:
        with open(args.report, "w") as fh:
            fh.write(text + "\n")
    return 0


def cmd_cost(args) -> int:
    contexts = args.contexts or [512, 1024, 2048, 4096, 128000]
    ms = args.ms if args.ms is not None else [0, 4, 8, 12, 16]
    profiles = [
        costmodel.InferenceProfile(
            layers=args.layers,
            linearized=m,
            context=n,
            dim=args.dim,
            batch=args.batch,
            heads=args.heads,
            groups=args.groups,
            bytes_per_elem=args.bytes_per_elem,
        )
        for n in contexts
        for m in ms
    ]
    table = costmodel.cache_table(profiles)
    print(table.text())
    if args.json_out:
        with open(args.json_out, "w") as fh:
            fh.write(table.to_json() + "\n")
        print(f"json -> {args.json_out}")
    return 0


COMMANDS = {
    "gen-model": cmd_gen_model,
    "calibrate": cmd_calibrate,
    "rank": cmd_rank,
    "linearize": cmd_linearize,
    "eval": cmd_eval,
    "cost": cmd_cost,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        defaults = _load_config_defaults(argv)
        if defaults:
            for action in parser._subparsers._group_actions[0].choices.values():
                known = {a.dest for a in action._actions}
                action.set_defaults(**{k: v for k, v in defaults.items() if k in known})
        args = parser.parse_args(argv)
    except (ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        return COMMANDS[args.command](args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - runtime failures map to exit 1
        print(f"runtime error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
