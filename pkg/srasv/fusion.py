"""
Linear logistic-regression fusion of several systems' scores.

The fused score of a trial is w . s + b. Weights are trained on development
scores by maximizing the class-balanced log-likelihood of sigmoid(w . s + b)
minus a small ridge on w.
"""

from collections import namedtuple

import numpy as np
from scipy.special import expit, log_expit

from .utils import logger, verbose, atomic_write, TrialMismatch, OneClassOnly
from .utils import MalformedLine
from .metrics import ScoreSet

FusionModel = namedtuple('FusionModel', ['weights', 'offset'])


def _stack(systems):
    """Score matrix (n_trials, n_systems) aligned on the first system"""
    if not systems:
        raise TrialMismatch('No systems to fuse')
    if isinstance(systems[0], ScoreSet):
        first = systems[0]
        cols = [first.scores] + [first.aligned(s) for s in systems[1:]]
        return first, np.column_stack(cols)
    S = np.column_stack([np.asarray(s, dtype=np.float64) for s in systems])
    return None, S


def _objective(theta, S, y, ridge):
    z = S @ theta[:-1] + theta[-1]
    pos, neg = y == 1, y == 0
    value = 0.5 * (log_expit(z[pos]).mean() + log_expit(-z[neg]).mean())
    value -= 0.5 * ridge * theta[:-1] @ theta[:-1]
    # d/dz of the balanced log-likelihood
    g = np.where(pos, 0.5 * expit(-z) / pos.sum(), -0.5 * expit(z) / neg.sum())
    grad = np.append(S.T @ g - ridge * theta[:-1], g.sum())
    return value, grad


@verbose
def fit_fusion(systems, labels=None, n_iters=500, tol=1e-9, ridge=1e-4,
               return_trace=False, verbose=None):
    """Train fusion weights by gradient ascent with backtracking

    Parameters
    ----------
    systems : list of ScoreSet | list of arrays
        One entry per system. ScoreSets must cover the same trials; their
        labels come from the keys of the first one (target or bonafide
        positive, nontarget or spoof negative; other trials ignored).
    labels : array of {0, 1} | None
        Required when systems are plain arrays.
    n_iters, tol : int, float
        Stop after n_iters steps or when the objective gains less than tol.
    ridge : float
        L2 penalty on the weights (not on the offset).

    Returns
    -------
    model : FusionModel
    trace : list of float
        Objective after every accepted step (with return_trace=True).
    """
    first, S = _stack(list(systems))
    if first is not None:
        keys = np.array(first.keys)
        positive = 'target' if 'target' in first.keys else 'bonafide'
        negative = 'nontarget' if positive == 'target' else 'spoof'
        used = (keys == positive) | (keys == negative)
        S = S[used]
        y = (keys[used] == positive).astype(int)
    else:
        y = np.asarray(labels, dtype=int)
        if y.shape[0] != S.shape[0]:
            raise TrialMismatch('%d labels for %d trials' % (y.shape[0],
                                                             S.shape[0]))
    if not (np.any(y == 1) and np.any(y == 0)):
        raise OneClassOnly('Fusion needs both classes')

    theta = np.zeros(S.shape[1] + 1)
    value, grad = _objective(theta, S, y, ridge)
    trace = [value]
    step = 1.0
    for it in range(n_iters):
        sq = grad @ grad
        if sq < tol ** 2:
            break
        for _ in range(60):
            candidate = theta + step * grad
            new_value, new_grad = _objective(candidate, S, y, ridge)
            if new_value >= value + 1e-4 * step * sq:
                break
            step *= 0.5
        else:
            break
        gain = new_value - value
        theta, value, grad = candidate, new_value, new_grad
        trace.append(value)
        step *= 2.0
        if gain < tol:
            break
    logger.info('Fusion of %d systems: %d steps, objective %.6f, weights %s' %
                (S.shape[1], len(trace) - 1, value, np.round(theta, 4)))
    model = FusionModel(theta[:-1].copy(), float(theta[-1]))
    return (model, trace) if return_trace else model


def apply_fusion(model, systems):
    """w . s + b per trial; ScoreSet in, ScoreSet out"""
    systems = list(systems)
    if len(systems) != len(model.weights):
        raise TrialMismatch('Model fuses %d systems, got %d' %
                            (len(model.weights), len(systems)))
    first, S = _stack(systems)
    fused = S @ np.asarray(model.weights) + model.offset
    if first is None:
        return fused
    return ScoreSet(first.trial_ids, fused, first.keys, first.attacks)


def save_fusion(path, model):
    """One weight per line, offset last"""
    lines = ['%.17g\n' % w for w in model.weights]
    lines.append('%.17g\n' % model.offset)
    atomic_write(path, ''.join(lines), mode='w')


def load_fusion(path):
    values = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                values.append(float(line))
            except ValueError:
                raise MalformedLine('not a number: %r' % line.strip(), lineno)
    if len(values) < 2:
        raise MalformedLine('fusion model needs a weight and an offset')
    return FusionModel(np.array(values[:-1]), values[-1])
