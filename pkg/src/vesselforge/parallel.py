"""Per-sample worker pool. Each task depends only on its index, so results do not depend on the worker count."""

import hashlib
import multiprocessing as mp
import os

import numpy as np

from vesselforge import compose


def map_ordered(fn, items, workers=1, chunksize=None):
    """``[fn(x) for x in items]`` over a fork pool; results come back in input order."""
    items = list(items)
    workers = max(int(workers or 1), 1)
    if workers == 1 or len(items) <= 1:
        return [fn(x) for x in items]
    ctx = mp.get_context("fork" if "fork" in mp.get_all_start_methods() else "spawn")
    chunksize = chunksize or max(1, len(items) // (workers * 8))
    with ctx.Pool(workers) as pool:
        return list(pool.imap(fn, items, chunksize=chunksize))


def available_cores():
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


def pair_digest(image, label):
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(image, dtype="<f4").tobytes())
    h.update(np.ascontiguousarray(label, dtype=np.uint8).tobytes())
    return h.hexdigest()


def pair_summary(config, index):
    """Digest plus the statistics the bulk checks need, without keeping volumes around."""
    image, label, cls, meta = compose.generate_drand_pair(config, index)
    lab = np.asarray(label)
    return {
        "index": int(index),
        "digest": pair_digest(image, label),
        "label_binary": bool(lab.dtype == bool or np.isin(lab, (0, 1)).all()),
        "image_min": float(image.min()),
        "image_max": float(image.max()),
        "class": int(cls),
        "artifact": meta["artifact"],
        "geometry": meta["geometry"],
        "merge_mode": meta["merge_mode"],
        "chain": list(meta["chain"]),
        "i_m": float(meta["i_m"]),
        "i_b_mu": float(meta["i_b_mu"]),
        "delta": float(meta["delta"]),
    }


class _Summarise:
    def __init__(self, config):
        self.config = config

    def __call__(self, index):
        return pair_summary(self.config, index)


def drand_summaries(config, indices, workers=1):
    return map_ordered(_Summarise(config), indices, workers)
