"""``gader`` command line: corpus generation, detector and recognizer training, inference, evaluation.

Every subcommand writes into ``--out``: the resolved config (``config.txt``),
``run.json`` (seed, version, input hashes) and its own outputs.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time

log = logging.getLogger("gader")

SECTIONS = ("synth", "detector", "gar", "eval")
_HANDLERS = []


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(f"usage: {message}")


# -- run configuration ------------------------------------------------------------------------
def default_run_config():
    from .detector import DetectorConfig
    from .gar import GarConfig

    return {
        "synth": {"identities": 30, "scripts": 4, "styles": ["walk", "walk", "probe", "probe"],
                  "test_fraction": 1 / 3, "rgb": False, "frame_size": [112, 128]},
        "detector": DetectorConfig().to_dict(),
        "gar": GarConfig.desk().to_dict(),
        "eval": {"gallery_style": "walk", "probe_style": "probe", "exclude_self": True},
    }


def _parse_value(text):
    try:
        return json.loads(text)
    except ValueError:
        return text


def parse_config_text(text):
    """``section.key = value`` lines; values are JSON literals (bare words read as strings)."""
    out = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"config line {n}: expected 'section.key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if "." not in key:
            raise CliError(f"config line {n}: key {key!r} has no section")
        section, name = key.split(".", 1)
        if section not in SECTIONS:
            raise CliError(f"config line {n}: unknown section {section!r}")
        out.setdefault(section, {})[name] = _parse_value(value)
    return out


def format_config(cfg):
    lines = []
    for section in SECTIONS:
        for k in sorted(cfg[section]):
            v = cfg[section][k]
            lines.append(f"{section}.{k} = {json.dumps(list(v) if isinstance(v, tuple) else v)}")
    return "\n".join(lines) + "\n"


def merge_config(base, override):
    out = {s: dict(base[s]) for s in SECTIONS}
    for section, kv in override.items():
        for k, v in kv.items():
            if k not in out[section]:
                raise CliError(f"unknown config key {section}.{k}")
            out[section][k] = v
    return out


def load_run_config(path=None, sets=()):
    cfg = default_run_config()
    if path:
        if not os.path.exists(path):
            raise CliError(f"config file not found: {path}")
        with open(path) as fh:
            cfg = merge_config(cfg, parse_config_text(fh.read()))
    if sets:
        cfg = merge_config(cfg, parse_config_text("\n".join(sets)))
    return cfg


def detector_config(cfg):
    from .detector import DetectorConfig

    return DetectorConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in cfg["detector"].items()})


def gar_config(cfg):
    from .gar import GarConfig

    return GarConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in cfg["gar"].items()})


# -- run directories ---------------------------------------------------------------------------
def file_hash(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def input_hashes(paths):
    out = {}
    for p in paths:
        if p is None:
            continue
        if os.path.isdir(p):
            for name in sorted(os.listdir(p)):
                full = os.path.join(p, name)
                if os.path.isfile(full):
                    out[full] = file_hash(full)
        elif os.path.isfile(p):
            out[p] = file_hash(p)
        else:
            raise CliError(f"input not found: {p}")
    return out


def open_run(args, cfg, inputs=()):
    from . import __version__

    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "config.txt"), "w") as fh:
        fh.write(format_config(cfg))
    info = {
        "command": args.command,
        "seed": args.seed,
        "version": __version__,
        "argv": list(getattr(args, "argv", [])),
        "inputs": input_hashes(inputs),
    }
    with open(os.path.join(args.out, "run.json"), "w") as fh:
        json.dump(info, fh, indent=1, sort_keys=True)
    handler = logging.FileHandler(os.path.join(args.out, "run.log"), mode="w")
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    logging.getLogger().addHandler(handler)
    _HANDLERS.append(handler)
    return info


def _write_json(path, obj):
    with open(path, "w") as fh:
        fh.write(json.dumps(obj, indent=1, sort_keys=True))


def _load_corpus(path):
    from .synth import CorpusManifest

    if not os.path.exists(os.path.join(path, "manifest.json")):
        raise CliError(f"no manifest.json in corpus directory {path}")
    return CorpusManifest.load(path)


def _load_model_dir(path, kind):
    """(store, run config) from a train-detector / train-gar output directory."""
    from .tensor import ParameterStore, load_checkpoint

    ckpt = os.path.join(path, f"{kind}.ckpt")
    if not os.path.exists(ckpt):
        raise CliError(f"missing checkpoint {ckpt}")
    cfg = load_run_config(os.path.join(path, "config.txt"))
    return ParameterStore.from_state(load_checkpoint(ckpt)), cfg, ckpt


# -- subcommands ------------------------------------------------------------------------------
def cmd_synth_gen(args, cfg):
    from .synth import generate_corpus

    s = cfg["synth"]
    open_run(args, cfg)
    m = generate_corpus(s["identities"], s["scripts"], args.seed, args.out, tuple(s["styles"]),
                        tuple(s["frame_size"]), s["test_fraction"], s["rgb"])
    log.info("wrote %d sequences for %d identities", len(m.entries), len(m.identities))


def cmd_dhs_export(args, cfg):
    from .dhs import export_pgm, extract_dhs
    from .silio import load_pack, normalize

    inputs = args.inputs
    open_run(args, cfg, inputs)
    files = []
    for p in inputs:
        if os.path.isdir(p):
            files += [os.path.join(p, f) for f in sorted(os.listdir(p)) if f.endswith(".gsp")]
        else:
            files.append(p)
    for f in files:
        norm, _ = normalize(load_pack(f))
        export_pgm(extract_dhs(norm), os.path.join(args.out, os.path.basename(f)[:-4] + ".pgm"))


def cmd_train_detector(args, cfg):
    from .detector import train_detector
    from .tensor import save_checkpoint

    corpus = _load_corpus(args.corpus)
    open_run(args, cfg, [args.corpus])
    res = train_detector(corpus, detector_config(cfg), args.seed)
    save_checkpoint(res.store, os.path.join(args.out, "detector.ckpt"))
    _write_trace(os.path.join(args.out, "loss_trace.csv"), [{"step": i, "loss": v} for i, v in enumerate(res.losses)])
    _write_json(os.path.join(args.out, "heldout.json"), {"accuracy": [[s, a] for s, a in res.heldout_accuracy]})


def _write_trace(path, rows):
    keys = sorted({k for r in rows for k in r}, key=lambda k: (k != "step", k))
    with open(path, "w") as fh:
        fh.write(",".join(keys) + "\n")
        for r in rows:
            fh.write(",".join("" if k not in r else ("%d" % r[k] if k == "step" else "%.17g" % r[k]) for k in keys))
            fh.write("\n")


def _entries(corpus, split, styles=None):
    split = None if split == "all" else split
    return corpus.entries_for(split, styles)


def cmd_detect(args, cfg):
    from .detector import detect
    from .silio import normalize

    corpus = _load_corpus(args.corpus)
    store, dcfg, ckpt = _load_model_dir(args.detector, "detector")
    open_run(args, cfg, [args.corpus, ckpt])
    dc = detector_config(dcfg)
    out = []
    for e in _entries(corpus, args.split):
        sil, _, _ = corpus.sequence(e)
        norm, _ = normalize(sil)
        out.append(_detection_json(detect(store, norm, dc), e["file"], norm))
    _write_json(os.path.join(args.out, "detections.json"), out)


def _detection_json(res, name, norm):
    doc = res.to_json(name)
    # report frame numbers of the input sequence (empty frames were dropped by normalization)
    fi = norm.frame_index
    doc["intervals_source"] = [[int(fi[s]), int(fi[e - 1]) + 1] for s, e, _ in res.intervals]
    return doc


def cmd_train_gar(args, cfg):
    from .gar import train_gar
    from .tensor import save_checkpoint

    corpus = _load_corpus(args.corpus)
    open_run(args, cfg, [args.corpus])
    res = train_gar(corpus, gar_config(cfg), args.seed, log_fn=log.info)
    save_checkpoint(res.store, os.path.join(args.out, "gar.ckpt"))
    _write_trace(os.path.join(args.out, "loss_trace.csv"), res.trace)


def embed_corpus(corpus, entries, gar_store, gcfg, det_store=None, dcfg=None):
    """EmbeddingSet over ``entries`` plus per-sequence detection records.

    Without a detector every frame is embedded. With one, sequences whose
    coverage misses the usability gate are left out.
    """
    import numpy as np

    from .detector import detect
    from .evalkit import EmbeddingSet
    from .gar import embed
    from .silio import normalize

    ids, labels, conds, vecs, records = [], [], [], [], []
    for e in entries:
        sil, _, _ = corpus.sequence(e)
        norm, ratios = normalize(sil)
        intervals = None
        if det_store is not None:
            res = detect(det_store, norm, dcfg)
            records.append(_detection_json(res, e["file"], norm))
            if not res.usable or not res.intervals:
                log.info("%s rejected: %s", e["file"], res.reason or "no walking detected")
                continue
            intervals = res.intervals
        v, flags = embed(norm, ratios, gar_store, gcfg, intervals=intervals)
        if flags["padded"]:
            log.info("%s: short input loop-padded", e["file"])
        ids.append(e["file"][:-4])
        labels.append(e["identity"])
        conds.append(e["condition"])
        vecs.append(v)
    if not ids:
        raise CliError(f"no usable sequences among {len(entries)} (all rejected by the detector)")
    d = gcfg.embedding_dim
    return EmbeddingSet(ids, labels, conds, np.asarray(vecs).reshape(len(ids), d)), records


def cmd_embed(args, cfg):
    from .evalkit import save_embeddings

    corpus = _load_corpus(args.corpus)
    gstore, gcfg_run, gckpt = _load_model_dir(args.gar, "gar")
    inputs = [args.corpus, gckpt]
    dstore = dcfg = None
    if args.detector and not args.no_detector:
        dstore, dcfg_run, dckpt = _load_model_dir(args.detector, "detector")
        dcfg = detector_config(dcfg_run)
        inputs.append(dckpt)
    open_run(args, cfg, inputs)
    es, records = embed_corpus(corpus, _entries(corpus, args.split), gstore, gar_config(gcfg_run), dstore, dcfg)
    save_embeddings(es, os.path.join(args.out, "embeddings.csv"))
    if records:
        _write_json(os.path.join(args.out, "detections.json"), records)


def split_gallery_probe(es, cfg):
    import numpy as np

    ev = cfg["eval"]
    style = np.array([c.split("-")[0].rstrip("0123456789") for c in es.conditions])
    gal = es.subset(style == ev["gallery_style"])
    # one gallery sequence per identity: the first in file order
    first = {}
    for i, ident in enumerate(gal.identities):
        first.setdefault(int(ident), i)
    keep = np.zeros(len(gal), dtype=bool)
    keep[list(first.values())] = True
    return gal.subset(keep), es.subset(style == ev["probe_style"])


def run_eval(probe, gallery, out, exclude_self=True):
    from .evalkit import evaluate, metrics_json

    metrics, curve = evaluate(probe, gallery, exclude_self)
    with open(os.path.join(out, "metrics.json"), "w") as fh:
        fh.write(metrics_json(metrics))
    curve.to_csv(os.path.join(out, "roc.csv"))
    return metrics


def cmd_eval(args, cfg):
    from .evalkit import load_embeddings

    inputs = [p for p in (args.embeddings, args.gallery, args.probe) if p]
    open_run(args, cfg, inputs)
    if args.gallery and args.probe:
        gallery, probe = load_embeddings(args.gallery), load_embeddings(args.probe)
    elif args.embeddings:
        gallery, probe = split_gallery_probe(load_embeddings(args.embeddings), cfg)
    else:
        raise CliError("eval needs --embeddings, or both --gallery and --probe")
    m = run_eval(probe, gallery, args.out, cfg["eval"]["exclude_self"])
    log.info("rank1 %.4f mAP %.4f", m["rank1"], m["mAP"])


def cmd_e2e(args, cfg):
    """Corpus (given or generated) -> detector -> recognizer -> embeddings -> metrics."""
    from .detector import train_detector
    from .evalkit import save_embeddings
    from .gar import train_gar
    from .synth import generate_corpus
    from .tensor import save_checkpoint

    t0 = time.time()
    os.makedirs(args.out, exist_ok=True)
    corpus_dir = args.corpus or os.path.join(args.out, "corpus")
    if args.corpus is None:
        s = cfg["synth"]
        generate_corpus(s["identities"], s["scripts"], args.seed, corpus_dir, tuple(s["styles"]),
                        tuple(s["frame_size"]), s["test_fraction"], s["rgb"])
    corpus = _load_corpus(corpus_dir)
    inputs = [os.path.join(corpus_dir, "manifest.json")]
    dcfg, gcfg = detector_config(cfg), gar_config(cfg)
    dstore = None
    if not args.no_detector:
        if args.detector:
            dstore, dcfg_run, dckpt = _load_model_dir(args.detector, "detector")
            dcfg = detector_config(dcfg_run)
            inputs.append(dckpt)
        else:
            res = train_detector(corpus, dcfg, args.seed)
            dstore = res.store
            save_checkpoint(dstore, os.path.join(args.out, "detector.ckpt"))
            _write_trace(os.path.join(args.out, "detector_trace.csv"),
                         [{"step": i, "loss": v} for i, v in enumerate(res.losses)])
    if args.gar:
        gstore, gcfg_run, gckpt = _load_model_dir(args.gar, "gar")
        gcfg = gar_config(gcfg_run)
        inputs.append(gckpt)
    else:
        gres = train_gar(corpus, gcfg, args.seed, log_fn=log.info)
        gstore = gres.store
        save_checkpoint(gstore, os.path.join(args.out, "gar.ckpt"))
        _write_trace(os.path.join(args.out, "gar_trace.csv"), gres.trace)
    open_run(args, cfg, inputs)
    es, records = embed_corpus(corpus, corpus.entries_for("test"), gstore, gcfg, dstore, dcfg)
    save_embeddings(es, os.path.join(args.out, "embeddings.csv"))
    if records:
        _write_json(os.path.join(args.out, "detections.json"), records)
    gallery, probe = split_gallery_probe(es, cfg)
    m = run_eval(probe, gallery, args.out, cfg["eval"]["exclude_self"])
    log.info("e2e done in %.1fs: rank1 %.4f", time.time() - t0, m["rank1"])


COMMANDS = {
    "synth-gen": cmd_synth_gen,
    "dhs-export": cmd_dhs_export,
    "train-detector": cmd_train_detector,
    "detect": cmd_detect,
    "train-gar": cmd_train_gar,
    "embed": cmd_embed,
    "eval": cmd_eval,
    "e2e": cmd_e2e,
}


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key-value config file (section.key = value)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="gader", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("synth-gen", parents=[common], help="generate a synthetic corpus")
    q = sub.add_parser("dhs-export", parents=[common], help="write DHS images as PGM")
    q.add_argument("inputs", nargs="+", help="silhouette packs or directories of them")
    q = sub.add_parser("train-detector", parents=[common])
    q.add_argument("--corpus", required=True)
    q = sub.add_parser("detect", parents=[common])
    q.add_argument("--corpus", required=True)
    q.add_argument("--detector", required=True, help="train-detector output directory")
    q.add_argument("--split", default="test", choices=("train", "test", "all"))
    q = sub.add_parser("train-gar", parents=[common])
    q.add_argument("--corpus", required=True)
    q = sub.add_parser("embed", parents=[common])
    q.add_argument("--corpus", required=True)
    q.add_argument("--gar", required=True, help="train-gar output directory")
    q.add_argument("--detector", help="train-detector output directory")
    q.add_argument("--no-detector", action="store_true")
    q.add_argument("--split", default="test", choices=("train", "test", "all"))
    q = sub.add_parser("eval", parents=[common])
    q.add_argument("--embeddings")
    q.add_argument("--gallery")
    q.add_argument("--probe")
    q = sub.add_parser("e2e", parents=[common])
    q.add_argument("--corpus", help="existing corpus directory (default: generate one)")
    q.add_argument("--detector", help="reuse a trained detector directory")
    q.add_argument("--gar", help="reuse a trained recognizer directory")
    q.add_argument("--no-detector", action="store_true", help="embed whole sequences, skipping detection")
    return p


def _set_threads(n):
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def main(argv=None):
    try:
        argv = list(sys.argv[1:] if argv is None else argv)
        args = build_parser().parse_args(argv)
        args.argv = argv
        if args.threads < 1:
            raise CliError("--threads must be >= 1")
        _set_threads(args.threads)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        logging.getLogger("gader").setLevel(logging.INFO)
        cfg = load_run_config(args.config, args.set)
        COMMANDS[args.command](args, cfg)
    except CliError as exc:
        print(f"gader: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # one parseable line for anything else
        msg = " ".join(str(exc).split())
        print(f"gader: error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    finally:
        while _HANDLERS:
            h = _HANDLERS.pop()
            logging.getLogger().removeHandler(h)
            h.close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
