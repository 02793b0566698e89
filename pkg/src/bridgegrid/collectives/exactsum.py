"""Sums whose result does not depend on how the terms are grouped.

Plain float addition is not associative, so splitting the same terms
differently across ranks changes the last bits of a sum.  Iterative solvers
can amplify that into visible differences.  Here each term is cut onto a
fixed-point grid shared by all ranks and stored as two integer-valued float64
limbs.  Limb sums stay below 2**53, where float addition is exact, so any
grouping (serial, tree, ring) gives bitwise identical totals.

The grid exponent comes from one MAX allreduce over the largest local
magnitude per component.  Terms are resolved to ``2**(e - 2*LIMB_BITS)``,
where ``2**e`` bounds every term of the component.
"""

import numpy as np

from .reduce import AllreduceVariant, ReduceOp

LIMB_BITS = 40
MAX_TERMS = 2 ** (52 - LIMB_BITS)  # terms per element before a limb sum could round

_EMPTY = -4000.0   # exponent sentinel for "no terms here"
_POISON = 1e300    # some term was nan/inf


def _allreduce(comm, vec, op, variant):
    if comm is None or comm.size == 1:
        return vec
    return comm.allreduce(vec, op, variant)


def _exponent(arrays):
    peak = 0.0
    for a in arrays:
        if a.size:
            m = float(np.max(np.abs(a)))
            if not np.isfinite(m):
                return _POISON
            peak = max(peak, m)
    if peak == 0.0:
        return _EMPTY
    return float(np.frexp(peak)[1])


def window_sum(shape, terms, ncomp, comm=None, variant=AllreduceVariant.TREE):
    """Sum real terms over frames (and ranks) into ``ncomp`` arrays of ``shape``.

    ``terms`` is a list of ``(index, [c0, c1, ...])`` where ``index`` selects
    the region of the output (a slice tuple, or ``()`` for the whole array)
    and ``c_k`` is that term's contribution to component ``k``.
    """
    if len(terms) > MAX_TERMS:
        raise ValueError(f"at most {MAX_TERMS} terms per sum, got {len(terms)}")
    exps = np.array([_exponent([t[1][k] for t in terms]) for k in range(ncomp)])
    exps = _allreduce(comm, exps, ReduceOp.MAX, variant)

    limbs = np.zeros((ncomp, 2) + tuple(shape))
    scale = []
    for k in range(ncomp):
        e = exps[k]
        if e >= _POISON:
            scale.append(None)
            continue
        e = 0 if e <= _EMPTY else int(e)
        scale.append(e)
        shift = LIMB_BITS - e
        hi_acc, lo_acc = limbs[k, 0, ...], limbs[k, 1, ...]
        for index, comps in terms:
            y = np.ldexp(np.asarray(comps[k], dtype=np.float64), shift)
            hi = np.floor(y)
            hi_acc[index] += hi
            lo_acc[index] += np.rint(np.ldexp(y - hi, LIMB_BITS))

    flat = _allreduce(comm, limbs.ravel(), ReduceOp.SUM, variant).reshape(limbs.shape)
    out = []
    for k in range(ncomp):
        if scale[k] is None:
            out.append(np.full(shape, np.nan))
            continue
        e = scale[k]
        out.append(np.ldexp(flat[k, 0], e - LIMB_BITS) + np.ldexp(flat[k, 1], e - 2 * LIMB_BITS))
    return out


def sum_scalars(rows, ncomp, comm=None, variant=AllreduceVariant.TREE):
    """``rows`` is a list of length-``ncomp`` sequences, one per term."""
    terms = [((), [np.float64(v) for v in row]) for row in rows]
    totals = window_sum((), terms, ncomp, comm, variant)
    return [float(t) for t in totals]
