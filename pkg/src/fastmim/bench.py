"""Analytic cost model and measured throughput harness.

The cost model turns encoder/decoder/resolution/mask settings into token
counts and FLOP estimates (attention 4ND^2 + 2N^2D, MLP 8ND^2 per block);
the throughput harness times real pre-training steps end to end.  Absolute
GPU-hour figures are hardware specific and are never asserted; only ratios
and orderings are.
"""
from __future__ import annotations

import csv
import io
import logging
import math
import statistics
import time
from dataclasses import dataclass, fields

import numpy as np

from . import kernels
from .config import RunConfig
from .models import DecoderConfig, EncoderConfig, ModelConfigError

log = logging.getLogger(__name__)

REGIMES = ("mae_discard", "mim_full", "fastmim_lowres")


@dataclass
class CostReport:
    regime: str
    resolution: int
    token_counts: tuple          # encoder tokens per stage (after any discard)
    decoder_tokens: int
    attention_flops: int
    mlp_flops: int
    other_flops: int             # embed, merges, bridge, head
    total_flops: int
    activation_elements: int

    def to_row(self) -> dict:
        row = {}
        for f in fields(self):
            v = getattr(self, f.name)
            row[f.name] = ";".join(str(x) for x in v) if isinstance(v, tuple) else v
        return row

    @classmethod
    def from_row(cls, row: dict) -> "CostReport":
        kwargs = dict(row)
        kwargs["token_counts"] = tuple(
            int(x) for x in str(row["token_counts"]).split(";"))
        return cls(**kwargs)


def _block_flops(n: int, d: int, attend: int) -> tuple:
    """(attention, mlp) FLOPs for one pre-norm block with n tokens of width d
    attending over `attend` keys."""
    attention = 4 * n * d * d + 2 * n * attend * d
    mlp = 8 * n * d * d
    return attention, mlp


def cost_model(enc: EncoderConfig, dec: DecoderConfig, resolution: int,
               mask_ratio: float = 0.75, regime: str = "mim_full") -> CostReport:
    """Token and FLOP arithmetic for one configuration.  Pure function."""
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r}")
    if regime == "mae_discard" and enc.family != "isotropic":
        raise ModelConfigError("mae_discard regime requires the isotropic family")
    enc.validate()
    enc.validate_resolution(resolution)

    attention = 0
    mlp = 0
    other = 0
    acts = 0
    depths = enc.depths_used()

    if enc.family == "isotropic":
        n_full = (resolution // enc.patch_size) ** 2
        n = math.ceil((1.0 - mask_ratio) * n_full) if regime == "mae_discard" else n_full
        token_counts = (n,)
        other += 2 * n * (enc.patch_size ** 2 * 3) * enc.embed_dim
        acts += n * enc.embed_dim
        for _ in range(depths[0]):
            a, m = _block_flops(n, enc.embed_dim, n)
            attention += a
            mlp += m
            acts += n * 13 * enc.embed_dim + enc.heads * n * n
        dec_tokens = n_full
    else:
        side = resolution // enc.patch_size
        window = enc.window_for(resolution)
        token_counts = tuple((side // (2 ** s)) ** 2 for s in range(4))
        other += 2 * token_counts[0] * (enc.patch_size ** 2 * 3) * enc.embed_dim
        acts += token_counts[0] * enc.embed_dim
        for s in range(4):
            n = token_counts[s]
            d = enc.stage_dim(s)
            ws = min(window, side // (2 ** s))
            for _ in range(depths[s]):
                a, m = _block_flops(n, d, ws * ws)
                attention += a
                mlp += m
                acts += n * 13 * d + enc.stage_heads(s) * n * ws * ws
            if s < 3:
                other += 2 * (n // 4) * (4 * d) * (2 * d)
        dec_tokens = token_counts[-1]

    other += 2 * dec_tokens * enc.out_dim * dec.width
    for _ in range(dec.blocks):
        a, m = _block_flops(dec_tokens, dec.width, dec_tokens)
        attention += a
        mlp += m
        acts += dec_tokens * 13 * dec.width + dec_tokens * dec_tokens
    other += 2 * dec_tokens * dec.width * 256  # head, nominal target width

    return CostReport(regime=regime, resolution=resolution,
                      token_counts=token_counts, decoder_tokens=dec_tokens,
                      attention_flops=attention, mlp_flops=mlp, other_flops=other,
                      total_flops=attention + mlp + other,
                      activation_elements=acts)


def compare_regimes(enc: EncoderConfig, dec: DecoderConfig, hi_res: int,
                    lo_res: int, mask_ratio: float = 0.75) -> list:
    """The three-way comparison: discard-encoder at hi res, full-token at hi
    res, and full-token at reduced resolution."""
    reports = []
    if enc.family == "isotropic":
        reports.append(cost_model(enc, dec, hi_res, mask_ratio, "mae_discard"))
    reports.append(cost_model(enc, dec, hi_res, mask_ratio, "mim_full"))
    reports.append(cost_model(enc, dec, lo_res, mask_ratio, "fastmim_lowres"))
    return reports


# ---------------------------------------------------------------------------
# measured throughput

def throughput_run(cfg: RunConfig, steps: int, warmup_steps: int,
                   dataset=None) -> dict:
    """Time full pre-training steps end to end; medians over post-warmup
    steps.  Memory is estimated from activation-element counts (an optional
    RSS probe supplements the report)."""
    from .trainer import PretrainLoop

    if steps <= warmup_steps:
        raise ValueError(f"steps {steps} must exceed warmup_steps {warmup_steps}")
    if steps - warmup_steps < 5:
        log.warning("only %d timed steps; median may be unstable", steps - warmup_steps)

    loop = PretrainLoop(cfg, dataset=dataset)
    timing: dict = {}
    walls = []
    for step in range(steps):
        t0 = time.perf_counter()
        loop.run_step(step, timing=timing)
        walls.append(time.perf_counter() - t0)
    timed = walls[warmup_steps:]
    batch = cfg.schedule.batch_size

    report = cost_model(cfg.model.encoder_config(), cfg.model.decoder_config(),
                        cfg.schedule.stages[0][0], cfg.mask.ratio,
                        "mae_discard" if cfg.model.discard_masked else "mim_full")
    params = loop.bundle.param_count()
    # fwd + bwd activations + params with grads and both Adam moments
    mem_estimate = 4 * (3 * batch * report.activation_elements + 4 * params)

    out = {
        "median_step_s": statistics.median(timed),
        "min_step_s": min(timed),  # contention-robust on busy machines
        "imgs_per_sec": batch / statistics.median(timed),
        "steps_timed": len(timed),
        "batch_size": batch,
        "peak_mem_estimate_bytes": int(mem_estimate),
        "modeled_flops": report.total_flops,
    }
    for phase, vals in timing.items():
        out[f"{phase}_ms"] = statistics.median(vals[warmup_steps:]) * 1e3
    try:
        import psutil
        out["rss_probe_bytes"] = int(psutil.Process().memory_info().rss)
    except Exception:  # probe is best-effort
        pass
    return out


def speedup(cfg_a: RunConfig, cfg_b: RunConfig, steps: int = 8,
            warmup_steps: int = 2) -> dict:
    """Measured step-time ratio b/a (how much faster cfg_a runs than cfg_b).

    The ratio uses the per-run minimum step time: scheduling noise on a busy
    machine only ever adds time, so minima compare compute honestly.
    """
    ra = throughput_run(cfg_a, steps, warmup_steps)
    rb = throughput_run(cfg_b, steps, warmup_steps)
    return {"a": ra, "b": rb,
            "speedup": rb["min_step_s"] / ra["min_step_s"],
            "median_speedup": rb["median_step_s"] / ra["median_step_s"]}


# ---------------------------------------------------------------------------
# kernel backend comparison (numba vs numpy)

def kernel_bench(repeats: int = 5, size: int = 128) -> list:
    """Time each hot kernel under both backends on a size x size image."""
    rng = np.random.default_rng(0)
    img = rng.random((3, size, size))
    cases = {
        "hog_cells": lambda fn: fn(img, 9, 8, 180.0),
        "bilinear_resample": lambda fn: fn(img, size // 2, size // 2,
                                           0.0, 0.0, float(size), float(size)),
    }
    rows = []
    for name, impls in kernels.implementations().items():
        call = cases[name]
        for backend_name in ("numpy", "numba"):
            fn = impls.get(backend_name)
            if fn is None:
                continue
            call(fn)  # warm (jit compile for numba)
            t0 = time.perf_counter()
            for _ in range(repeats):
                call(fn)
            ms = (time.perf_counter() - t0) / repeats * 1e3
            rows.append({"kernel": name, "backend": backend_name,
                         "ms_per_call": ms})
    return rows


# ---------------------------------------------------------------------------
# report emission

def emit_rows(rows: list, fmt: str, path=None, columns=None) -> str:
    """Render report rows as text or CSV with a stable column order; both
    formats carry the same value spellings."""
    if rows:
        columns = list(rows[0].keys())
    elif columns is None:
        columns = []

    def render(v):
        return repr(v) if isinstance(v, float) else str(v)

    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([render(row[c]) for c in columns])
        text = buf.getvalue()
    elif fmt == "text":
        parts = []
        for row in rows:
            parts.append("\n".join(f"{c} = {render(row[c])}" for c in columns))
        text = "\n\n".join(parts) + ("\n" if parts else "")
    else:
        raise ValueError(f"unknown report format {fmt!r}")

    if path is not None:
        with open(path, "w") as f:
            f.write(text)
    return text


def parse_rows_csv(text: str) -> list:
    """Inverse of emit_rows(..., 'csv'): values parse back to int/float/str."""
    reader = csv.reader(io.StringIO(text))
    lines = list(reader)
    if not lines:
        return []
    header, *body = lines

    def revive(s: str):
        for cast in (int, float):
            try:
                return cast(s)
            except ValueError:
                continue
        return s

    return [{c: revive(v) for c, v in zip(header, row)} for row in body]
