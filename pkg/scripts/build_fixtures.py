"""Regenerate the small files under fixtures/ from the bundled checkpoint.

    python3 scripts/build_fixtures.py [--checkpoint PATH]
"""
import argparse
from pathlib import Path

import numpy as np

from ego import io as eio
from ego.benchmark import make_swap_pair
from ego.cli import DEFAULT_CHECKPOINT
from ego.config import EngineConfig, dump_config
from ego.dataset import CATEGORIES
from ego.denoiser import TAPS, Condition, Denoiser
from ego.schedule import NoiseSchedule, add_noise

FIX = Path(__file__).resolve().parent.parent / "fixtures"


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--checkpoint", type=Path, default=DEFAULT_CHECKPOINT)
    args = ap.parse_args()
    FIX.mkdir(exist_ok=True)
    model = Denoiser(eio.load_checkpoint(args.checkpoint))

    # square -> disc swap used by the CLI smoke test and the README walk-through
    pair = make_swap_pair(CATEGORIES.index("square"), CATEGORIES.index("disc"), np.random.default_rng(7))
    eio.save_tensor(FIX / "source.egot", pair.src, name="image")
    eio.save_tensor(FIX / "reference.egot", pair.ref, name="image")
    eio.save_mask(FIX / "mask_ori.txt", pair.m_ori)
    eio.save_mask(FIX / "mask_ref.txt", pair.m_ref)
    (FIX / "config.yaml").write_text(dump_config(EngineConfig()))

    # simcurve demo: a handful of cross-category pairs
    rng = np.random.default_rng(11)
    lines = []
    (FIX / "pairs").mkdir(exist_ok=True)
    for i, (a, b) in enumerate([(1, 0), (0, 2), (2, 3), (3, 1)]):
        p = make_swap_pair(a, b, rng)
        eio.save_tensor(FIX / "pairs" / f"src{i}.egot", p.src, name="image")
        eio.save_tensor(FIX / "pairs" / f"tgt{i}.egot", p.ref, name="image")
        lines.append(f"pairs/src{i}.egot pairs/tgt{i}.egot {CATEGORIES[b]}")
    (FIX / "pairs.txt").write_text("\n".join(lines) + "\n")

    # golden features, frozen once from this implementation
    sched = NoiseSchedule.linear()
    eps = np.random.default_rng(5).standard_normal(pair.src.shape).astype(np.float32)
    x_t = add_noise(pair.src, 300, eps, sched)
    golden = {"x_t": x_t, "t": np.array([300.0]), "category": np.array([1.0])}
    for tap in TAPS:
        golden[tap] = model.features(x_t, 300, Condition.category(1), tap)
    eio.save_tensors(FIX / "golden_features.egot", golden)
    print(f"fixtures written to {FIX}")


if __name__ == "__main__":
    main()
