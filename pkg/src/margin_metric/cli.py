"""Command-line entry point: ``margin-metric <command> [flags]``.

Commands: gen-data, train, eval, hash, verify-geometry, losscheck.
Machine-readable results go to stdout (JSON) or to files (JSON/CSV);
progress and diagnostics go to stderr. Every command accepts
``--config run.json``; explicit flags override the file. Randomness is
seeded by ``--seed`` or, failing that, by ``MARGIN_METRIC_SEED``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from margin_metric import dataset, geometry, hashing, retrieval, training
from margin_metric.batch import PHOTO, SKETCH, EmbeddingBatch
from margin_metric.encoder import load_model, save_model
from margin_metric.gradcheck import TOLERANCE, encoder_grad_check, grad_check, random_instance
from margin_metric.losses import LOSS_IDS, ClassifierWeights, PrototypeSet

log = logging.getLogger("margin_metric")


class UsageError(ValueError):
    pass


@dataclass
class HashOptions:
    bits: int = 32
    loss_terms: str = "r+s"
    steps: int = 10000
    lr: float = 1e-4
    seed: int = 0


@dataclass
class EvalOptions:
    mode: str = "standard"
    holdout: list = field(default_factory=list)
    gallery: str = "target"
    p_at: list = field(default_factory=list)
    top_k: int | None = None


@dataclass
class RunConfig:
    data: dataset.SyntheticConfig = field(default_factory=dataset.SyntheticConfig)
    train: training.TrainConfig = field(default_factory=training.TrainConfig)
    hash: HashOptions = field(default_factory=HashOptions)
    eval: EvalOptions = field(default_factory=EvalOptions)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        sections = {"data": dataset.SyntheticConfig, "train": training.TrainConfig,
                    "hash": HashOptions, "eval": EvalOptions}
        unknown = set(doc) - set(sections)
        if unknown:
            raise UsageError(f"unknown config sections: {', '.join(sorted(unknown))}")
        built = {}
        for name, kind in sections.items():
            values = doc.get(name, {})
            allowed = {f.name for f in fields(kind)}
            bad = set(values) - allowed
            if bad:
                raise UsageError(f"unknown keys in [{name}]: {', '.join(sorted(bad))}")
            built[name] = kind(**values)
        return cls(**built)

    def override(self, section: str, **values) -> None:
        current = asdict(getattr(self, section))
        current.update({k: v for k, v in values.items() if v is not None})
        setattr(self, section, type(getattr(self, section))(**current))


def _load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from exc
    return RunConfig.from_dict(doc)


def _seed(args) -> int | None:
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get("MARGIN_METRIC_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise UsageError(f"MARGIN_METRIC_SEED must be an integer, got {env!r}") from exc
    return None


def _int_list(text: str) -> list:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _emit(doc, out_path=None) -> None:
    text = json.dumps(doc, indent=2)
    if out_path:
        Path(out_path).write_text(text + "\n")
    print(text)


def _data_overrides(args) -> dict:
    return {
        "classes": args.classes, "per_class": args.per_class, "dim": args.dim,
        "sigma": args.sigma, "gap": args.gap, "anchor_radius": args.anchor_radius,
    }


def _add_data_flags(p) -> None:
    p.add_argument("--classes", type=int)
    p.add_argument("--per-class", type=int, help="samples per class per domain")
    p.add_argument("--dim", type=int, help="raw input dimension")
    p.add_argument("--sigma", type=float, help="per-coordinate class noise")
    p.add_argument("--gap", type=float, help="sketch-domain scale gap")
    p.add_argument("--anchor-radius", type=float)


def cmd_gen_data(args) -> int:
    cfg = _load_config(args.config)
    cfg.override("data", seed=_seed(args), **_data_overrides(args))
    data = dataset.generate(cfg.data)
    dataset.write_embeddings(args.out, data)
    n_photo = int(np.count_nonzero(data.domains == PHOTO))
    log.info("wrote %d samples (%d photo, %d sketch) to %s", len(data), n_photo, len(data) - n_photo, args.out)
    _emit({"path": str(args.out), "samples": len(data), "photo": n_photo,
           "sketch": len(data) - n_photo, "config": asdict(cfg.data)})
    return 0


def _load_data(path, cfg: RunConfig) -> EmbeddingBatch:
    if path:
        return dataset.read_embeddings(path)
    return dataset.generate(cfg.data)


def _split(data, mode, holdout):
    if mode == "standard":
        if holdout:
            raise UsageError("--holdout requires --mode zero-shot")
        return data, data.subset(np.zeros(len(data), dtype=bool))
    if not holdout:
        raise UsageError("zero-shot mode needs --holdout")
    return dataset.split_zero_shot(data, dataset.SplitSpec("zero-shot", holdout))


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    seed = _seed(args)
    cfg.override("data", seed=args.data_seed, **_data_overrides(args))
    cfg.override(
        "train", loss=args.loss, m=args.m, s=args.s, lr=args.lr, steps=args.steps,
        batch_size=args.batch_size, weight_decay=args.weight_decay, seed=seed,
        proto_mode=args.proto_mode, hidden=args.hidden, embed_dim=args.embed_dim,
        squeeze_ratio=args.squeeze_ratio,
    )
    cfg.override("eval", mode=args.mode, holdout=args.holdout)
    data = _load_data(args.data, cfg)
    source, _ = _split(data, cfg.eval.mode, cfg.eval.holdout)
    num_classes = int(data.labels.max()) + 1
    log.info("training %s on %d samples for %d steps", cfg.train.loss, len(source), cfg.train.steps)
    result = training.train(source, cfg.train, num_classes=num_classes)
    head = result.head
    extra = {
        "train": asdict(cfg.train),
        "data": None if args.data else asdict(cfg.data),
        "data_path": str(args.data) if args.data else None,
        "split": {"mode": cfg.eval.mode, "holdout": cfg.eval.holdout},
        "num_classes": num_classes,
        "head": (
            {"kind": "prototypes", "centers": head.centers.tolist()}
            if isinstance(head, PrototypeSet)
            else {"kind": "classifier", "weights": head.weights.tolist(), "biases": head.biases.tolist()}
        ),
    }
    save_model(args.out, result.params, extra)
    result.log.write_csv(args.log)
    losses = result.log.losses
    _emit({"model": str(args.out), "log": str(args.log), "steps": cfg.train.steps,
           "final_loss": losses[-1] if losses else None,
           "mean_loss_last_100": float(np.mean(losses[-100:])) if losses else None})
    return 0


def _load_trained(args):
    params, doc = load_model(args.model)
    cfg = RunConfig()
    if doc.get("data"):
        cfg.data = dataset.SyntheticConfig(**doc["data"])
    path = args.data or doc.get("data_path")
    data = _load_data(path, cfg)
    head_doc = doc["head"]
    if head_doc["kind"] == "prototypes":
        head = PrototypeSet(np.asarray(head_doc["centers"]))
    else:
        head = ClassifierWeights(np.asarray(head_doc["weights"]), np.asarray(head_doc["biases"]))
    return params, doc, data, head


def cmd_eval(args) -> int:
    params, doc, data, _ = _load_trained(args)
    split = doc.get("split", {})
    mode = args.mode or split.get("mode", "standard")
    holdout = args.holdout if args.holdout is not None else (split.get("holdout") or [])
    if mode == "standard":
        holdout = []
    source, target = _split(data, mode, holdout)
    emb = training.embed(params, data)
    if mode == "zero-shot":
        held = np.isin(emb.labels, holdout)
        queries = emb.subset(held & (emb.domains == SKETCH))
        gallery_mask = emb.domains == PHOTO
        if args.gallery == "target":
            gallery_mask &= held
        gallery = emb.subset(gallery_mask)
    else:
        queries = emb.domain(SKETCH)
        gallery = emb.domain(PHOTO)
    metrics = retrieval.retrieval_metrics(
        queries.vectors, queries.labels, gallery.vectors, gallery.labels,
        precision_ks=tuple(args.p_at or ()), top_k=args.top_k,
    )
    metrics["random_baseline_map"] = retrieval.random_baseline_map(queries.labels, gallery.labels)
    metrics["mode"] = mode
    metrics["holdout"] = holdout
    metrics["gallery"] = args.gallery if mode == "zero-shot" else "all"
    evaluated = emb.subset(np.isin(emb.labels, holdout)) if mode == "zero-shot" else emb
    report = retrieval.distance_report(evaluated) if len(set(evaluated.labels.tolist())) >= 2 else None
    if report is not None:
        metrics["distances"] = report.to_dict()
        if args.hist:
            report.write_histogram(args.hist)
    log.info("MAP %.4f over %d queries", metrics["map"], metrics["n_queries"])
    _emit(metrics, args.out)
    return 0


def cmd_hash(args) -> int:
    params, doc, data, head = _load_trained(args)
    cfg = RunConfig()
    cfg.override("hash", bits=args.bits, loss_terms=args.loss_terms, steps=args.steps,
                 lr=args.lr, seed=_seed(args))
    if cfg.hash.bits < 1:
        raise UsageError(f"--bits must be a positive integer, got {cfg.hash.bits}")
    if cfg.hash.steps < 0:
        raise UsageError("--steps must be non-negative")
    terms = hashing.parse_terms(cfg.hash.loss_terms)
    emb = training.embed(params, data)
    protos = head if isinstance(head, PrototypeSet) else training.class_means(emb, int(doc["num_classes"]))
    hyper = training.AdamHyper(lr=cfg.hash.lr)
    ae, history = hashing.train_hasher(protos, emb if "q" in terms else None, cfg.hash.bits,
                                       cfg.hash.steps, cfg.hash.seed, terms, hyper)
    codes = hashing.encode_binary(ae, emb.vectors)
    if args.codes:
        hashing.write_codes(args.codes, codes, emb.labels)
    proto_codes = hashing.encode_binary(ae, protos.centers)
    distinct = len({c.tobytes() for c in proto_codes}) == len(proto_codes)
    hamming = retrieval.cross_domain_metrics(emb, codes=codes)
    euclid = retrieval.cross_domain_metrics(emb)
    final = history[-1]
    _emit({"bits": cfg.hash.bits, "loss_terms": "+".join(sorted(terms)), "steps": cfg.hash.steps,
           "hamming_map": hamming["map"], "euclidean_map": euclid["map"],
           "prototype_codes_distinct": distinct,
           "final_terms": asdict(final), "codes": str(args.codes) if args.codes else None}, args.out)
    return 0


def _placement(classes: int, dim: int, seed: int) -> np.ndarray:
    if classes == 2:
        c = np.zeros((2, dim))
        c[1, 0] = 1.0
        return c
    return np.random.default_rng(seed).normal(size=(classes, dim))


def cmd_verify_geometry(args) -> int:
    if not args.m > 1:
        raise UsageError(f"geometry requires m > 1, got {args.m}")
    if args.classes < 2 or args.dim < 1 or args.samples < 1:
        raise UsageError("need --classes >= 2, --dim >= 1 and --samples >= 1")
    seed = _seed(args) or 0
    protos = PrototypeSet(_placement(args.classes, args.dim, seed))
    report = geometry.verify_p2(protos, args.m, args.samples, seed)
    doc = report.to_dict()
    doc["prototypes"] = protos.centers.tolist()
    doc["minimum_margin"] = geometry.minimum_margin()
    if args.classes == 2:
        dist = float(np.linalg.norm(protos.centers[0] - protos.centers[1]))
        intra, inter = geometry.binary_margin_bounds(args.m, dist)
        doc["closed_form"] = {"max_intra": intra, "min_inter": inter}
    log.info("%d violations at m=%g", report.violations, args.m)
    _emit(doc, args.out)
    return 0


def cmd_losscheck(args) -> int:
    names = list(LOSS_IDS) if args.loss == "all" else [args.loss]
    seed = _seed(args) or 0
    rows = []
    ok = True
    for name in names:
        err = grad_check(name, random_instance(name, seed=seed), args.h)
        passed = err <= TOLERANCE[name]
        row = {"loss": name, "max_rel_error": err, "tolerance": TOLERANCE[name], "passed": passed}
        if args.encoder:
            from margin_metric.gradcheck import DEFAULT_MARGINS
            from margin_metric.encoder import init_params

            inst = random_instance(name, seed=seed, n=6, d=3)
            rng = np.random.default_rng(seed)
            params = init_params([5, 8, 3], 4, seed=seed)
            inputs = EmbeddingBatch(rng.normal(size=(6, 5)), inst.batch.labels, inst.batch.domains)
            m, s = DEFAULT_MARGINS[name]
            enc_err, skipped = encoder_grad_check(params, inputs, inst.head, name, m, s, args.h)
            row.update({"encoder_max_rel_error": enc_err, "encoder_skipped": skipped})
            passed = passed and enc_err <= 1e-4
            row["passed"] = passed
        ok &= passed
        rows.append(row)
        log.info("%-13s max rel err %.3e  %s", name, err, "ok" if passed else "FAIL")
    _emit({"h": args.h, "seed": seed, "results": rows, "all_passed": ok})
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="margin-metric", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic photo/sketch dataset")
    p.add_argument("--config")
    _add_data_flags(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train encoder and class head")
    p.add_argument("--config")
    p.add_argument("--data", help="EMB1 dataset; default: generate from the data config")
    _add_data_flags(p)
    p.add_argument("--data-seed", type=int)
    p.add_argument("--loss", choices=LOSS_IDS)
    p.add_argument("--m", type=float)
    p.add_argument("--s", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--proto-mode", choices=("parameter", "batch-mean"))
    p.add_argument("--hidden", type=_int_list)
    p.add_argument("--embed-dim", type=int)
    p.add_argument("--squeeze-ratio", type=int)
    p.add_argument("--mode", choices=("standard", "zero-shot"))
    p.add_argument("--holdout", type=_int_list)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="model.json")
    p.add_argument("--log", default="train_log.csv")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="cross-domain retrieval metrics")
    p.add_argument("--model", required=True)
    p.add_argument("--data")
    p.add_argument("--mode", choices=("standard", "zero-shot"))
    p.add_argument("--holdout", type=_int_list)
    p.add_argument("--gallery", choices=("target", "all"), default="target",
                   help="zero-shot gallery: held-out photos only, or every photo")
    p.add_argument("--p-at", type=int, action="append")
    p.add_argument("--top-k", type=int)
    p.add_argument("--hist", help="CSV histogram of min inter-class distances")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("hash", help="train the prototype hasher and evaluate Hamming retrieval")
    p.add_argument("--model", required=True)
    p.add_argument("--data")
    p.add_argument("--bits", type=int)
    p.add_argument("--loss-terms")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--codes")
    p.add_argument("--out")
    p.set_defaults(func=cmd_hash)

    p = sub.add_parser("verify-geometry", help="Monte-Carlo check of the decision-region propositions")
    p.add_argument("--m", type=float, default=4.0)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--dim", type=int, default=2)
    p.add_argument("--samples", type=int, default=100000)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_verify_geometry)

    p = sub.add_parser("losscheck", help="finite-difference gradient checks")
    p.add_argument("--loss", default="all", choices=(*LOSS_IDS, "all"))
    p.add_argument("--h", type=float, default=1e-6)
    p.add_argument("--encoder", action="store_true", help="also check end to end through the encoder")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_losscheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (UsageError, ValueError, TypeError) as exc:
        print(f"margin-metric {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, training.TrainingDiverged) as exc:
        print(f"margin-metric {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
