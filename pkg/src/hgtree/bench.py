"""Training-step cost of PT vs hourglass variants at a fixed context.

Each variant runs in a fresh interpreter so that peak resident memory
(``ru_maxrss``) belongs to that variant alone.
"""

from __future__ import annotations

import argparse
import json
import resource
import subprocess
import sys
import time
from dataclasses import asdict, dataclass

import numpy as np


@dataclass
class BenchResult:
    variant: str
    context: int
    layers: int
    dim: int
    batch: int
    steps: int
    seconds_per_step: float
    peak_rss_mb: float
    attention_cost: int
    parameters: int


def _peak_rss_mb() -> float:
    # ru_maxrss survives execve, so a worker spawned from a large parent would
    # report the parent's footprint; VmHWM belongs to this address space only
    try:
        with open("/proc/self/status") as fh:
            for line in fh:
                if line.startswith("VmHWM:"):
                    return int(line.split()[1]) / 1024.0
    except OSError:
        pass
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0  # kilobytes on linux


def run_worker(variant: str, context: int, layers: int, dim: int, heads: int, batch: int, steps: int,
               seed: int = 0) -> BenchResult:
    """Time ``steps`` forward+backward passes in this process (one warm-up step excluded)."""
    from .autograd import cross_entropy
    from .model import HourglassModel, ModelConfig
    from .tokenizer import N_BINS

    cfg = ModelConfig(variant=variant, dim=dim, heads=heads, total_layers=layers, context=context, seed=seed)
    model = HourglassModel(cfg)
    rng = np.random.default_rng(seed)
    tokens = rng.integers(0, N_BINS, size=(batch, context))
    mask = np.ones((batch, context - 1), dtype=bool)

    def step():
        model.zero_grad()
        logits = model.forward(tokens)
        loss = cross_entropy(logits[:, :-1], tokens[:, 1:], mask)
        loss.backward()

    step()
    t0 = time.perf_counter()
    for _ in range(steps):
        step()
    dt = (time.perf_counter() - t0) / max(steps, 1)
    return BenchResult(cfg.variant, context, layers, dim, batch, steps, dt, _peak_rss_mb(),
                       cfg.attention_cost(), model.num_parameters())


def run_variant(variant: str, context: int = 1616, layers: int = 24, dim: int = 64, heads: int = 4, batch: int = 1,
                steps: int = 2, seed: int = 0, timeout: float | None = None) -> BenchResult:
    """Run one variant in a subprocess and parse its JSON line."""
    cmd = [sys.executable, "-m", "hgtree.bench", "--worker", variant, "--context", str(context), "--layers", str(layers),
           "--dim", str(dim), "--heads", str(heads), "--batch", str(batch), "--steps", str(steps), "--seed", str(seed)]
    out = subprocess.run(cmd, capture_output=True, text=True, timeout=timeout, check=True)
    return BenchResult(**json.loads(out.stdout.strip().splitlines()[-1]))


def run_bench(variants=("PT", "HG1", "HG2"), **kw) -> list[BenchResult]:
    return [run_variant(v, **kw) for v in variants]


def to_csv(results: list[BenchResult]) -> str:
    if not results:
        return ""
    cols = list(asdict(results[0]))
    lines = [",".join(cols)] + [",".join(str(asdict(r)[c]) for c in cols) for r in results]
    return "\n".join(lines) + "\n"


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description="internal benchmark worker")
    ap.add_argument("--worker", required=True)
    ap.add_argument("--context", type=int, default=1616)
    ap.add_argument("--layers", type=int, default=24)
    ap.add_argument("--dim", type=int, default=64)
    ap.add_argument("--heads", type=int, default=4)
    ap.add_argument("--batch", type=int, default=1)
    ap.add_argument("--steps", type=int, default=2)
    ap.add_argument("--seed", type=int, default=0)
    a = ap.parse_args(argv)
    r = run_worker(a.worker, a.context, a.layers, a.dim, a.heads, a.batch, a.steps, a.seed)
    print(json.dumps(asdict(r)))
    return 0


if __name__ == "__main__":
    sys.exit(main())
