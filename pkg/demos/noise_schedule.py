"""How much signal survives the forward process, and what the lesion-weighted sampler does.

    python demos/noise_schedule.py
"""

import itertools

import numpy as np

from iism.dataset import Manifest, SamplerWeights, SliceRecord, weighted_probabilities, weighted_stream
from iism.diffusion import forward_noise, make_schedule, predict_x0


def schedule_table():
    s = make_schedule(100, 1e-4, 0.02)
    print(" t    beta      alpha_bar  SNR")
    for t in (0, 9, 24, 49, 74, 99):
        ab = s.alpha_bars[t]
        print(f"{t:3d}  {s.betas[t]:.5f}   {ab:.5f}    {ab / (1 - ab):10.3f}")
    # at T=100 the last step still keeps about a third of the signal variance
    rng = np.random.default_rng(0)
    z0 = rng.standard_normal(64)
    eps = rng.standard_normal(64)
    zt = forward_noise(z0, 99, eps, s)
    print(f"corr(z0, z_99) = {np.corrcoef(z0, zt)[0, 1]:.3f}")
    print(f"x0 recovered with the true noise: max error {np.abs(predict_x0(zt, 99, eps, s) - z0).max():.1e}")


def sampler_table():
    recs = [SliceRecord(f"L{i}", 0, "-", 1, "train") for i in range(10)]
    recs += [SliceRecord(f"N{i}", 0, "-", 0, "train") for i in range(90)]
    man = Manifest(recs)
    print("\nweights  expected  empirical (100k draws)")
    for w in ((1, 1), (2, 1), (5, 1), (10, 1)):
        sw = SamplerWeights(*w)
        expected = weighted_probabilities(man.lesion_flags(), sw)[:10].sum()
        draws = np.fromiter(itertools.islice(weighted_stream(man, sw, seed=0), 100_000), np.int64)
        print(f"{w[0]:>2}:{w[1]}     {expected:.4f}    {np.mean(draws < 10):.4f}")


if __name__ == "__main__":
    schedule_table()
    sampler_table()
