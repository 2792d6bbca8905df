"""Command-line pipeline: gen-data -> train-backbone -> extract -> build-cache
-> tune-theta -> compress -> eval-clean / eval-adv / eval-corrupt -> report.

Every artifact lives in one output directory (``--out``, else $EPICACHE_OUT,
else ./epicache-out) under a fixed name, and every output gets a
``<name>.prov.json`` record with the resolved config and input/output digests.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__, fileio
from .attacks import BlackBox, GrayBox, WhiteBox, run_threat_scenario
from .backbone import predict_proba
from .cache import CacheModel, accuracy, parse_method
from .corruptions import evaluate_corruption_robustness
from .datasets import SPLITS, generate_dataset, extract_embeddings
from .errors import ConfigurationError, EpicacheError
from .pipeline import VARIANTS, ExperimentConfig, compress, load_config, train_variant, tune_cache

OUT_ENV = "EPICACHE_OUT"
CACHE_STAGES = ("base", "tuned", "pca", "kmeans")

log = logging.getLogger("epicache")


class MissingArtifactError(ConfigurationError):
    pass


# ---------------------------------------------------------------------------
# artifact naming


def data_name(split):
    return f"data-{split}.epds"


def backbone_name(variant):
    return f"backbone-{variant}.epbb"


def embeddings_name(variant, layer):
    return f"emb-{variant}-{layer}.epem"


def cache_name(variant, layer, stage):
    return f"cache-{variant}-{layer}.epch" if stage == "base" else f"cache-{variant}-{layer}-{stage}.epch"


_PRODUCER = {"data": "gen-data", "backbone": "train-backbone", "emb": "extract"}


def _producer(name: str, args) -> str:
    prefix = name.split("-")[0]
    if prefix == "cache":
        stage = name[:-5].split("-")[-1]
        return {"tuned": "tune-theta", "pca": "compress --method pca",
                "kmeans": "compress --method kmeans"}.get(stage, "build-cache")
    if prefix == "backbone":
        return f"train-backbone --variant {name[len('backbone-'):-5]}"
    return _PRODUCER.get(prefix, "an earlier step")


def sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class Run:
    """Resolved config plus input/output bookkeeping for one subcommand."""

    def __init__(self, args, cfg: ExperimentConfig):
        self.args = args
        self.cfg = cfg
        self.out = Path(args.out or os.environ.get(OUT_ENV) or "epicache-out")
        self.inputs: dict[str, str] = {}
        self.outputs: list[Path] = []

    def need(self, name: str) -> Path:
        path = self.out / name
        if not path.is_file():
            raise MissingArtifactError(f"missing {path}; run `epicache {_producer(name, self.args)}` first")
        self.inputs[name] = sha256(path)
        return path

    def load(self, name: str):
        return fileio.load(self.need(name))

    def save(self, obj, name: str):
        self.out.mkdir(parents=True, exist_ok=True)
        self.outputs.append(fileio.save(obj, self.out / name))

    def write_text(self, name: str, text: str):
        self.out.mkdir(parents=True, exist_ok=True)
        path = self.out / name
        path.write_text(text)
        self.outputs.append(path)

    def write_report(self, stem: str, csv_text: str, payload: dict):
        self.write_text(stem + ".csv", csv_text)
        self.write_text(stem + ".json", json.dumps(payload, indent=2, sort_keys=True) + "\n")

    def finish(self):
        record = {
            "tool": "epicache",
            "version": __version__,
            "command": self.args.command,
            "arguments": {k: v for k, v in sorted(vars(self.args).items())
                          if k not in ("func", "out", "config", "set", "verbose")},
            "config": self.cfg.to_dict(),
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": {p.name: sha256(p) for p in self.outputs},
        }
        text = json.dumps(record, indent=2, sort_keys=True) + "\n"
        for p in self.outputs:
            p.with_name(p.name + ".prov.json").write_text(text)
        for p in self.outputs:
            print(p)


def _stage_name(args, layer=None):
    return cache_name(args.variant, layer or args.layer, args.cache)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(run: Run):
    cfg = run.cfg
    splits = generate_dataset(cfg.classes, cfg.per_class, cfg.width, cfg.seed)
    for split, data in zip(SPLITS, splits):
        run.save(data, data_name(split))


def cmd_train_backbone(run: Run):
    tr = run.load(data_name("train"))
    run.save(train_variant(run.cfg, tr, run.args.variant), backbone_name(run.args.variant))


def cmd_extract(run: Run):
    bb = run.load(backbone_name(run.args.variant))
    tr = run.load(data_name("train"))
    run.save(extract_embeddings(bb, tr, run.args.layer), embeddings_name(run.args.variant, run.args.layer))


def cmd_build_cache(run: Run):
    from .cache import build_cache

    emb = run.load(embeddings_name(run.args.variant, run.args.layer))
    run.save(build_cache(emb), cache_name(run.args.variant, run.args.layer, "base"))


def cmd_tune_theta(run: Run):
    args = run.args
    bb = run.load(backbone_name(args.variant))
    val = run.load(data_name("val"))
    cache = run.load(cache_name(args.variant, args.layer, "base"))
    tuned, accs = tune_cache(run.cfg, bb, cache, val)
    run.save(tuned, cache_name(args.variant, args.layer, "tuned"))
    rows = "theta,gray_val_top1\n" + "".join(f"{t:g},{a:.6f}\n" for t, a in zip(run.cfg.theta_grid, accs))
    run.write_report(f"theta-{args.variant}-{args.layer}", rows,
                     {"grid": list(run.cfg.theta_grid), "accuracy": accs, "selected": tuned.theta})


def cmd_compress(run: Run):
    args = run.args
    src = run.load(cache_name(args.variant, args.layer, args.source))
    run.save(compress(run.cfg, src, args.method), cache_name(args.variant, args.layer, args.method))


def _cache_model(run: Run):
    args = run.args
    bb = run.load(backbone_name(args.variant))
    cache = run.load(_stage_name(args))
    return bb, cache, parse_method(args.method or run.cfg.method)


def _tag(args, method):
    return f"{args.variant}-{args.layer}-{args.cache}-{str(method).replace('-', '')}"


def cmd_eval_clean(run: Run):
    bb, cache, method = _cache_model(run)
    te = run.load(data_name("test"))
    rows = [("backbone", accuracy(lambda X: predict_proba(bb, X), te.images, te.labels)),
            ("cache", accuracy(CacheModel(bb, cache, method), te.images, te.labels))]
    text = "model,top1\n" + "".join(f"{m},{a:.6f}\n" for m, a in rows)
    run.write_report(f"clean-{_tag(run.args, method)}", text,
                     {"method": str(method), "theta": cache.theta, "K": cache.K, "d": cache.d,
                      "top1": dict(rows)})


def cmd_eval_adv(run: Run):
    args = run.args
    bb, cache, method = _cache_model(run)
    te = run.load(data_name("test"))
    if args.threat == "white":
        threat = WhiteBox()
    elif args.threat == "gray":
        threat = GrayBox()
    else:
        threat = BlackBox(run.load(backbone_name(args.surrogate)))
    eps = run.cfg.epsilons
    table = run_threat_scenario(threat, bb, cache, method, te, eps, run.cfg.attack(), workers=run.cfg.workers)
    run.write_report(f"adv-{args.threat}-{_tag(args, method)}", table.to_csv(), json.loads(table.to_json()))


def cmd_eval_corrupt(run: Run):
    bb, cache, method = _cache_model(run)
    ref = run.load(backbone_name("reference"))
    te = run.load(data_name("test"))
    suite = run.cfg.load_suite()
    ref_fn = lambda X: predict_proba(ref, X)  # noqa: E731
    reports = [evaluate_corruption_robustness(lambda X: predict_proba(bb, X), ref_fn, suite, te, "backbone"),
               evaluate_corruption_robustness(CacheModel(bb, cache, method), ref_fn, suite, te, "cache")]
    text = reports[0].to_csv() + "".join(reports[1].to_csv().splitlines(keepends=True)[1:])
    run.write_report(f"corrupt-{_tag(run.args, method)}", text,
                     {"method": str(method), "theta": cache.theta, "suite": suite.to_text(),
                      "reports": [r.to_dict() for r in reports]})


def cmd_report(run: Run):
    args = run.args
    method = parse_method(args.method or run.cfg.method)
    m = str(method).replace("-", "")
    if not args.quadrants:
        raise ConfigurationError("report currently supports --quadrants only")
    out = []
    for variant in ("standard", "augmented"):
        adv_name = f"adv-gray-{variant}-{args.layer}-{args.cache}-{m}.json"
        cor_name = f"corrupt-{variant}-{args.mce_layer or args.layer}-{args.cache}-{m}.json"
        for name, hint in ((adv_name, "eval-adv --threat gray"), (cor_name, "eval-corrupt")):
            if not (run.out / name).is_file():
                raise MissingArtifactError(f"missing {run.out / name}; run `epicache {hint} --variant {variant}` first")
        adv = json.loads(run.need(adv_name).read_text())
        cor = json.loads(run.need(cor_name).read_text())
        mce = {r["model"]: r["mce"] for r in cor["reports"]}
        for model in ("backbone", "cache"):
            acc = [r["top1"] for r in adv["rows"] if r["model"] == model and abs(r["epsilon"] - 0.06) < 1e-12]
            if not acc:
                raise ConfigurationError(f"{adv_name} has no epsilon=0.06 row")
            out.append({"features": variant, "model": model, "gray_top1_eps0.06": acc[0], "mce": mce[model]})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "standard_gray_top1", "augmented_gray_top1", "standard_mce", "augmented_mce"])
    for model in ("backbone", "cache"):
        cell = {r["features"]: r for r in out if r["model"] == model}
        w.writerow([model] + [f"{cell[v]['gray_top1_eps0.06']:.6f}" for v in ("standard", "augmented")]
                   + [f"{cell[v]['mce']:.6f}" for v in ("standard", "augmented")])
    run.write_report("report-quadrants", buf.getvalue(), {"quadrants": out})


# ---------------------------------------------------------------------------


def _add_common(p, default):
    def opt(*flags, **kw):
        if default is not None:
            kw["default"] = default
        p.add_argument(*flags, **kw)

    opt("--config", help="INI experiment config")
    opt("--out", help=f"output directory (default ${OUT_ENV} or ./epicache-out)")
    opt("--set", action="append", metavar="KEY=VALUE", help="override a config setting (repeatable)")
    opt("--seed", type=int, help="global seed")
    opt("--workers", type=int, help="attack worker threads")
    opt("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="epicache", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"epicache {__version__}")
    _add_common(p, None)
    # the shared options are accepted before or after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    _add_common(common, argparse.SUPPRESS)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_, variant=False, layer=False, cache=False):
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.set_defaults(func=func)
        if variant:
            sp.add_argument("--variant", choices=VARIANTS, default="standard")
        if layer:
            sp.add_argument("--layer", choices=("hidden", "probs"), default=None)
        if cache:
            sp.add_argument("--cache", choices=CACHE_STAGES, default="tuned")
            sp.add_argument("--method", help="continuous or K-nn (e.g. 50-nn)")
        return sp

    add("gen-data", cmd_gen_data, "generate train/val/test splits")
    add("train-backbone", cmd_train_backbone, "train a backbone variant", variant=True)
    add("extract", cmd_extract, "extract labeled embeddings of the training split", variant=True, layer=True)
    add("build-cache", cmd_build_cache, "build a cache from extracted embeddings", variant=True, layer=True)
    add("tune-theta", cmd_tune_theta, "tune theta on gray-box validation accuracy", variant=True, layer=True)
    sp = add("compress", cmd_compress, "compress a cache by PCA or k-means", variant=True, layer=True)
    sp.add_argument("--method", choices=("pca", "kmeans"), required=True)
    sp.add_argument("--source", choices=("base", "tuned"), default="tuned")
    add("eval-clean", cmd_eval_clean, "clean test accuracy", variant=True, layer=True, cache=True)
    sp = add("eval-adv", cmd_eval_adv, "accuracy under targeted PGD", variant=True, layer=True, cache=True)
    sp.add_argument("--threat", choices=("white", "gray", "black"), default="gray")
    sp.add_argument("--eps", help="comma-separated normalized epsilons")
    sp.add_argument("--surrogate", choices=VARIANTS, default="surrogate", help="black-box surrogate variant")
    add("eval-corrupt", cmd_eval_corrupt, "CE/mCE against the reference backbone", variant=True, layer=True,
        cache=True)
    sp = add("report", cmd_report, "assemble summary tables", layer=True, cache=True)
    sp.add_argument("--quadrants", action="store_true", help="2x2 table of cache x feature robustness")
    sp.add_argument("--mce-layer", choices=("hidden", "probs"), help="cache layer for the mCE column")
    return p


def _resolve_config(args) -> ExperimentConfig:
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigurationError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.workers is not None:
        overrides["workers"] = args.workers
    if getattr(args, "eps", None):
        overrides["epsilons"] = args.eps
    return load_config(args.config, overrides)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve_config(args)
        if hasattr(args, "layer") and args.layer is None:
            args.layer = cfg.layer
        run = Run(args, cfg)
        args.func(run)
        run.finish()
    except (EpicacheError, OSError) as exc:
        msg = " ".join(str(exc).split())
        print(f"epicache: error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
