"""What the parallel refinement schedule looks like on one 6x6 tile."""
from hiergen.hierarchy import KEPT, build_lopar_schedule


def show(s, n=12):
    for row in s.plan[:n, :n]:
        print("  " + " ".join("." if x == KEPT else str(x) for x in row))


s = build_lopar_schedule(60, 60)
print(f"compressed: {s.n_iterations} iterations, {s.kept.sum()} kept cells, "
      f"{s.adjacent_conflicts()} adjacent clashes")
show(s)

u = build_lopar_schedule(60, 60, compressed=False)
print(f"\ndiagonal plan: {u.n_iterations} groups, non-empty {u.nonempty_iterations()}")
show(u)

r = build_lopar_schedule(60, 60, keep_pattern="seeded_random", seed=1)
print(f"\nrandom keep pattern: {r.kept.mean():.0%} kept, {r.adjacent_conflicts()} clashes")
show(r)
