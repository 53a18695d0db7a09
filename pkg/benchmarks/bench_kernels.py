"""Compare the compiled and numpy kernel backends.

    python benchmarks/bench_kernels.py [--repeat N] [--json]
"""
import argparse
import json
import timeit

from gridnp import kernels
from gridnp.grid_model import base_topology, build_admittance, load_case
from gridnp.powerflow import NewtonSolver, nominal_injection, solve_newton


def _setup(name):
    case = load_case(name)
    topo = base_topology(case)
    solver = NewtonSolver(case, build_admittance(case, topo))
    sol = solve_newton(case, topo)
    return case, solver, sol


def bench(repeat: int):
    results = []
    for name in ("case9", "case118"):
        case, s, sol = _setup(name)
        vm, va = sol.v_mag, sol.v_ang
        p, q = s.injections(vm, va)
        inj = nominal_injection(case)
        for backend in kernels.BACKENDS:
            k = kernels.get_backend(backend)
            jobs = {
                "injections": lambda: k.injections(s.indptr, s.indices, s.g, s.b, vm, va),
                "jacobian_data": lambda: k.jacobian_data(s.indptr, s.indices, s.g, s.b, vm, va, p, q,
                                                         s._dest, s._nnz),
            }
            for kernel, fn in jobs.items():
                n = max(1, repeat)
                t = min(timeit.repeat(fn, number=n, repeat=5)) / n
                results.append({"case": name, "kernel": kernel, "backend": backend, "us": t * 1e6})
        # end to end solve, switching the module-level backend
        for backend in kernels.BACKENDS:
            saved = kernels._active
            kernels._active = kernels.get_backend(backend)
            try:
                n = max(1, repeat // 20)
                t = min(timeit.repeat(lambda: s.solve(inj), number=n, repeat=5)) / n
            finally:
                kernels._active = saved
            results.append({"case": name, "kernel": "newton_solve", "backend": backend, "us": t * 1e6})

    return results


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--json", action="store_true")
    args = ap.parse_args()
    res = bench(args.repeat)
    if args.json:
        print(json.dumps(res, indent=2))
        return
    print(f"active backend: {kernels.BACKEND}; available: {', '.join(kernels.BACKENDS)}")
    print(f"{'case':<14}{'kernel':<16}" + "".join(f"{b:>12}" for b in kernels.BACKENDS) + "   speedup")
    keys = sorted({(r["case"], r["kernel"]) for r in res}, key=lambda k: [r["case"] for r in res].index(k[0]))
    for case, kernel in keys:
        t = {r["backend"]: r["us"] for r in res if r["case"] == case and r["kernel"] == kernel}
        line = f"{case:<14}{kernel:<16}" + "".join(f"{t[b]:>10.1f}us" for b in kernels.BACKENDS)
        if "compiled" in t:
            line += f"   {t['python'] / t['compiled']:6.2f}x"
        print(line)


if __name__ == "__main__":
    main()
