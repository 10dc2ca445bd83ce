"""Codewords decide which members see which source.

Every source gets a distinct weight-w word over n members.  Because the
words are distinct and share one weight, no source's member set contains
another's, so dropping the members that saw source s always leaves at
least one member that saw any other source s'.
"""

from abckit.codebook import (assign_codewords, bitstring, estimate_costs, members_for_source, min_ensemble_size,
                             verify_theorem1)

cb = assign_codewords(10, 5, seed=0)
print(f"{cb.N} sources on {cb.n} members, weight {cb.w}")
for s in range(4):
    print(f"  source {s}: {bitstring(cb.codeword(s))}  members {sorted(members_for_source(cb, s))}")

verdict = verify_theorem1(cb)
print("pairwise check:", "ok" if verdict.ok else verdict.violations[:3])

print("\nhow many members does a dataset need?")
for N in (20, 1000, 50_000, 10 ** 6):
    print(f"  N={N:>8}: n={min_ensemble_size(N)}")

print("\nwork for one full landscape, N=1000 sources, K=20 steps")
n = min_ensemble_size(1000)
for name, c in estimate_costs(1000, n, n // 2, 20, 1).items():
    print(f"  {name:8s} trainings={c.trainings:5d} denoiser calls={c.denoiser_calls:8d} matvecs={c.matvecs}")
