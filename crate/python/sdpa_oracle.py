"""Solve an SDPA-sparse file with an external solver (cvxpy + Clarabel).

Used once to freeze the reference optimum of an exported NPA instance:

    seqrand export-sdp --state mvs --grid 0.8:0.8:0.1 --setting 0,0,1 --out mvs.dat-s
    python python/sdpa_oracle.py mvs.dat-s

The file encodes  max C.X  s.t.  A_k.X = b_k, X >= 0;  the script solves the
dual  min b.y  s.t.  sum_k y_k A_k - C >= 0  and prints its value.
"""

import argparse
import re
import sys

import cvxpy as cp
import numpy as np
import scipy.sparse as sp


def read_sdpa(path):
    lines = []
    with open(path) as f:
        for line in f:
            s = line.strip()
            if not s or s[0] in "\"*":
                continue
            lines.append(re.sub(r"[,(){}]", " ", s).split())
    m = int(lines[0][0])
    nblocks = int(lines[1][0])
    sizes = [int(v) for v in lines[2][:nblocks]]
    b = np.array([float(v) for v in lines[3][:m]])
    entries = [(int(k), int(blk) - 1, int(i) - 1, int(j) - 1, float(v)) for k, blk, i, j, v in (l[:5] for l in lines[4:])]
    return m, sizes, b, entries


def solve(path, solver):
    m, sizes, b, entries = read_sdpa(path)
    y = cp.Variable(m)
    constraints = []
    for blk, size in enumerate(sizes):
        n = abs(size)
        rows, cols, vals = [], [], []
        c = np.zeros((n, n))
        for k, eb, i, j, v in entries:
            if eb != blk:
                continue
            if k == 0:
                c[i, j] = c[j, i] = v
                continue
            rows.append(i * n + j)
            cols.append(k - 1)
            vals.append(v)
            if i != j:
                rows.append(j * n + i)
                cols.append(k - 1)
                vals.append(v)
        op = sp.csr_matrix((vals, (rows, cols)), shape=(n * n, m))
        z = cp.reshape(op @ y, (n, n), order="C") - c
        if size < 0:
            constraints.append(cp.diag(z) >= 0)
        else:
            constraints.append((z + z.T) / 2 >> 0)
    prob = cp.Problem(cp.Minimize(b @ y), constraints)
    prob.solve(solver=solver)
    return prob.status, prob.value


def main(argv):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("path")
    ap.add_argument("--solver", default="CLARABEL")
    args = ap.parse_args(argv)
    status, value = solve(args.path, args.solver)
    print(f"status={status} value={value:.12f}")
    return 0 if status == "optimal" else 3


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
