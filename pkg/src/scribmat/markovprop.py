"""Absorbing-chain label propagation over the superpixel graph.

Labeled superpixels are absorbing nodes, unlabeled ones are transition
nodes. Edge weights are CoM * AfM with unlabeled rows row-normalized;
with Q the unlabeled-to-unlabeled block and R the unlabeled-to-labeled
block, the absorption probabilities solve (I - Q) PrM = R. Each unlabeled
superpixel's class probabilities are the absorption mass collected per
labeled class.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph
from scipy.sparse.linalg import spsolve

from .labelstate import LabelClass

# Direct elimination below this many unlabeled nodes, fixed point above.
DIRECT_SOLVE_LIMIT = 2000
ITERATIVE_TOL = 1e-9
ITERATIVE_MAX_STEPS = 100_000


class PropagationError(Exception):
    pass


@dataclass
class TransitionMatrix:
    """Absorption probabilities, |U| x |L|; rows of unreachable unlabeled
    nodes are flagged and left as zeros."""

    prm: np.ndarray
    unlabeled: np.ndarray  # superpixel ids, row order
    labeled: np.ndarray  # superpixel ids, column order
    unreachable: np.ndarray  # bool per row


def build_transition_matrix(g, labeled, unlabeled):
    """Solve the absorbing chain for the current label partition.

    labeled/unlabeled are iterables of superpixel ids partitioning [0, n).
    Unlabeled nodes in components with no labeled node are flagged
    unreachable and excluded from the linear system, which keeps (I - Q)
    nonsingular.
    """
    labeled = np.asarray(sorted(labeled), dtype=np.int64)
    unlabeled = np.asarray(sorted(unlabeled), dtype=np.int64)
    n = g.com.shape[0]
    if len(labeled) == 0:
        raise PropagationError("no labeled superpixels to absorb into")
    if len(labeled) + len(unlabeled) != n:
        raise PropagationError("labeled/unlabeled sets do not partition the graph")

    nu, nl = len(unlabeled), len(labeled)
    prm = np.zeros((nu, nl))
    if nu == 0:
        return TransitionMatrix(
            prm=prm, unlabeled=unlabeled, labeled=labeled, unreachable=np.zeros(0, dtype=bool)
        )

    _, comp = csgraph.connected_components(sparse.csr_matrix(g.com), directed=False)
    labeled_comps = np.unique(comp[labeled])
    reach = np.isin(comp[unlabeled], labeled_comps)

    if reach.any():
        w = g.com * g.afm
        rows = unlabeled[reach]
        wu = w[rows]
        row_sums = wu.sum(axis=1)
        if np.any(row_sums <= 0.0):
            raise PropagationError("reachable unlabeled node with zero outgoing weight")
        wu = wu / row_sums[:, None]
        q = wu[:, rows]
        r = wu[:, labeled]
        if len(rows) <= DIRECT_SOLVE_LIMIT:
            a = sparse.csc_matrix(sparse.identity(len(rows)) - sparse.csc_matrix(q))
            sol = spsolve(a, sparse.csc_matrix(r))
            if sparse.issparse(sol):
                sol = sol.toarray()
            sol = np.asarray(sol).reshape(len(rows), nl)
        else:
            sol = _fixed_point_solve(sparse.csr_matrix(q), r)
        prm[reach] = np.clip(sol, 0.0, None)

    unreachable = ~reach
    absorbed = prm[reach].sum(axis=1)
    if absorbed.size and np.abs(absorbed - 1.0).max() > 1e-6:
        raise PropagationError(
            f"absorption rows failed to converge, residual {np.abs(absorbed - 1.0).max():.3g}"
        )
    return TransitionMatrix(prm=prm, unlabeled=unlabeled, labeled=labeled, unreachable=unreachable)


def _fixed_point_solve(q, r, tol=ITERATIVE_TOL, max_steps=ITERATIVE_MAX_STEPS):
    # Jacobi iteration for (I - Q) X = R; converges because every row of
    # [Q R] is stochastic and some absorbing mass is reachable.
    x = np.array(r, dtype=np.float64)
    delta = 0.0
    for _ in range(max_steps):
        x_next = q @ x + r
        delta = np.max(np.abs(x_next - x)) if x.size else 0.0
        x = x_next
        if delta < tol:
            return x
    raise PropagationError(f"fixed-point solve did not converge, last delta {delta:.3g}")


def propagate_labels(tm, ps):
    """Update unlabeled superpixels' (pf, pb, pu) from absorption mass per
    labeled class. Unreachable nodes fall back to the uniform distribution.
    Hard-labeled superpixels are untouched. Returns a new state."""
    out = ps.copy()
    label_classes = np.array([ps.hard[j].value for j in tm.labeled])
    sums = {}
    for cls in LabelClass:
        mask = label_classes == cls.value
        sums[cls] = tm.prm[:, mask].sum(axis=1) if mask.any() else np.zeros(len(tm.unlabeled))
    total = sums[LabelClass.FOREGROUND] + sums[LabelClass.BACKGROUND] + sums[LabelClass.UNKNOWN]

    for row, spx in enumerate(tm.unlabeled):
        if tm.unreachable[row] or total[row] <= 0.0:
            out.probs[spx] = (1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0)
            continue
        out.probs[spx] = (
            sums[LabelClass.FOREGROUND][row] / total[row],
            sums[LabelClass.BACKGROUND][row] / total[row],
            sums[LabelClass.UNKNOWN][row] / total[row],
        )
    return out


def dump_triplets(path, matrix):
    """Write a dense or sparse matrix as 'row col value' lines."""
    mat = sparse.coo_matrix(matrix)
    with open(path, "w") as fh:
        for i, j, v in zip(mat.row, mat.col, mat.data):
            fh.write(f"{i} {j} {v:.17g}\n")
