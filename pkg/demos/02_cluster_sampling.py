"""Why truncating at token level can throw away most of the mass."""
import numpy as np

from hiergen.sampling import SamplerConfig, cluster_distribution, truncated_distribution

# three near-duplicate tokens (cluster A), one distinct token (B), two more (C)
probs = np.array([0.2, 0.2, 0.2, 0.25, 0.1, 0.05])
cluster_of = np.array([0, 0, 0, 1, 2, 2])

print("cluster masses:", np.bincount(cluster_of, weights=probs))
for k in (1, 2):
    plain = truncated_distribution(probs, SamplerConfig(mode="topk", k=k))
    clus = cluster_distribution(probs, cluster_of, SamplerConfig(mode="cluster", k=k))
    print(f"\nk={k}")
    print("  token top-k  :", np.round(plain, 3))
    print("  cluster top-k:", np.round(clus, 3))

# lower temperature sharpens both the cluster choice and the token inside it
for t in (1.0, 0.5, 0.0):
    print(f"T={t}:", np.round(cluster_distribution(probs, cluster_of, SamplerConfig(temperature=t, k=3)), 3))
