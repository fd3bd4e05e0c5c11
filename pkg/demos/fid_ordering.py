"""FID over geometric features as lesion prevalence drifts away from a reference corpus.

Only the ordering is meaningful: the features are area, centroid and spread
per class, not a perceptual embedding.

    python demos/fid_ordering.py
"""

from iism.metrics import class_distribution, fid, total_variation
from iism.phantom import PhantomConfig, generate_slice, slice_rng


def corpus(p, seed, n=300):
    cfg = PhantomConfig(seed=seed, lesion_probability=p)
    return [generate_slice(cfg, slice_rng(seed, "D", k))[0] for k in range(n)]


def main():
    ref = corpus(0.3, seed=1)
    print("lesion prob   FID vs p=0.3   class TV")
    for p in (0.0, 0.15, 0.3, 0.5, 0.75, 1.0):
        other = corpus(p, seed=2)
        tv = total_variation(class_distribution(ref), class_distribution(other))
        print(f"{p:11.2f}   {fid(ref, other):12.4f}   {tv:.4f}")


if __name__ == "__main__":
    main()
