import numpy as np

from migratesim.meanfield import (
    integrate,
    mean_occupancy,
    point_mass,
    rhs_rlo,
    solve_fixed_point_rlo,
)

LOAD = 0.8
HOP_RATE = 0.5
CAP = 60
T_END = 400.0
DT = 5e-3


def main():
    fp = solve_fixed_point_rlo(LOAD, HOP_RATE, CAP)
    print(f"fixed point: y = {fp.y:.6f}, z = {fp.z:.6f}, "
          f"residual {fp.residual:.1e}")

    for label, start in (("empty", point_mass(0, CAP)),
                         ("full", point_mass(CAP, CAP))):
        samples = integrate("rlo", start, T_END, dt=DT, sample_dt=50.0,
                            lam=LOAD, beta=HOP_RATE)
        path = " -> ".join(f"{mean_occupancy(state.x):.3f}"
                           for _, state in samples[::2])
        end = samples[-1][1].x
        gap = float(np.sum(np.abs(end - fp.xi)))
        print(f"{label:>6} start: y path {path}")
        print(f"{'':>6}        L1 gap to the fixed point {gap:.2e}, "
              f"rhs norm {float(np.max(np.abs(rhs_rlo(end, LOAD, HOP_RATE)))):.1e}")

    # the full start sheds load at rate 1 - LOAD, hence the long horizon
    print()
    print("both starts land on the same stationary profile")


if __name__ == "__main__":
    main()
