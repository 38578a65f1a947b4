"""TEM as a fast weight programmer: remembering what was seen where.

An agent walks a ring of ``n`` places (action 0 steps right, 1 steps left),
with a fixed random observation per place. Shift matrices path-integrate a
one-hot grid code, so returning to a place reproduces its grid vector
exactly and the Hebbian sensory memory recalls what was seen there.

The lookahead readout ``S_t sigma(W_{a_{t+1}} g_t)`` predicts the next
observation before it arrives: it is zero at first visits and points along
the right observation at every revisit.

    python scripts/tem_demo.py --places 6 --steps 60 --svg tem.svg
"""

import argparse

import numpy as np

from fastweights import linalg, tem
from fastweights.tem import TemParams, Trajectory


def ring_world(n_places, d_in, steps, seed):
    rng = np.random.default_rng(seed)
    right = np.roll(np.eye(n_places), 1, axis=0)
    g0 = np.eye(n_places)[0]
    places = rng.uniform(-1, 1, size=(n_places, d_in))
    actions = rng.integers(0, 2, size=steps)
    pos, xs, where = 0, [], []
    for a in actions:
        pos = (pos + (1 if a == 0 else -1)) % n_places
        xs.append(places[pos])
        where.append(pos)
    params = TemParams(np.stack([right, right.T]), 1.0, g0, "identity")
    return params, Trajectory(np.array(xs), actions), where


def lookahead(params, traj):
    """Cosine between the memory's guess for x_{t+1} and x_{t+1}, nan if the guess is zero."""
    state = tem.initial_tem_state(params, traj.observations.shape[1])
    out = []
    for t, (x, a) in enumerate(zip(traj.observations, traj.actions)):
        if t > 0:
            g_next = linalg.activate(params.sigma, params.action_weights[a] @ state.g)
            guess = state.S @ g_next
            norm = np.linalg.norm(guess)
            out.append(np.nan if norm < 1e-12 else float(guess @ x / (norm * np.linalg.norm(x))))
        state, _ = tem.tem_step(params, state, x, a)
    return np.array(out)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--places", type=int, default=6)
    ap.add_argument("--steps", type=int, default=60)
    ap.add_argument("--din", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--svg")
    args = ap.parse_args()

    params, traj, where = ring_world(args.places, args.din, args.steps, args.seed)
    print(f"incremental vs concatenated readout: max diff {tem.equivalence_max_diff(params, traj):.2e}")
    cos = lookahead(params, traj)
    seen = set(where[:1])
    revisit = []
    for t in range(1, len(where)):
        revisit.append(where[t] in seen)
        seen.add(where[t])
    revisit = np.array(revisit)
    print(f"first visits: {int((~revisit).sum())}, memory silent at all of them: {bool(np.isnan(cos[~revisit]).all())}")
    print(f"revisits: {int(revisit.sum())}, min cosine to the true observation: {np.nanmin(cos[revisit]):.6f}")
    if args.svg:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
        fig, ax = plt.subplots(figsize=(6, 3))
        steps = np.arange(2, len(cos) + 2)
        ax.plot(steps, np.nan_to_num(cos), drawstyle="steps-mid")
        ax.set_xlabel("step")
        ax.set_ylabel("cosine(prediction, next obs)")
        fig.tight_layout()
        fig.savefig(args.svg, metadata={"Date": None})
        print(f"wrote {args.svg}")


if __name__ == "__main__":
    main()
