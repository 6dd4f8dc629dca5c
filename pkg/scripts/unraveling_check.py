"""Average conditioned trajectories and compare with the master equation.

Reports the trace distance between the trajectory average and the
deterministic state at each snapshot, with and without feedback.
"""
import argparse

from qndsqueeze.control import Conditioned, EnsembleSelfConsistent, NoFeedback
from qndsqueeze.dynamics import TimeGrid, integrate_me
from qndsqueeze.spin_algebra import css_x, trace_distance
from qndsqueeze.stochastic import ensemble_average, run_ensemble


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--j", type=float, default=2.0)
    ap.add_argument("--n", type=int, default=1000)
    ap.add_argument("--dt", type=float, default=1e-4)
    ap.add_argument("--t-end", type=float, default=1.0)
    ap.add_argument("--seed", type=int, default=20240611)
    ap.add_argument("--threads", type=int, default=4)
    args = ap.parse_args()

    rho0 = css_x(args.j)
    grid = TimeGrid(0.0, args.t_end, args.dt)
    snap = max(1, int(round(0.1 / args.dt)))
    cases = (("no feedback", NoFeedback(), NoFeedback()),
             ("conditioned feedback", Conditioned(1.0), EnsembleSelfConsistent(1.0)))
    for k, (label, controller, me_gain) in enumerate(cases):
        records = run_ensemble(rho0, grid, 1.0, controller, n_trajectories=args.n, master_seed=args.seed + k,
                               threads=args.threads, record_stride=snap, snapshot_stride=snap)
        avg = ensemble_average(records)
        me = integrate_me(rho0, grid, 1.0, me_gain, state_stride=snap)
        print(f"{label} ({avg.n_used} trajectories used)")
        for t, rho in zip(avg.state_times, avg.states):
            print(f"  Mt = {t:5.2f}  trace distance {trace_distance(rho, me.state_at(t)):.4f}")


if __name__ == "__main__":
    main()
