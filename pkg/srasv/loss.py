"""
Angular-margin softmax (A-softmax) and plain softmax losses for the two heads,
the joint objective and class weighting.

Loss functions take the penultimate features x (N, d), the output layer
weights W (d, C) and integer labels, and return the loss together with its
gradients with respect to x and W, ready for net.network_backward.
"""

import numpy as np
from numpy.polynomial import chebyshev
from scipy.special import logsumexp, softmax

from .utils import ZeroFeature, BadMargin, EmptyClass, LabelOutOfRange

__all__ = ['psi', 'a_softmax', 'softmax_loss', 'head_loss', 'joint_loss',
           'regularization_grads', 'class_weights', 'anneal_beta']


def _check_margin(m):
    if isinstance(m, bool) or int(m) != m or m < 1:
        raise BadMargin('Margin must be a positive integer, got %r' % (m,))
    return int(m)


def _segment(c, m):
    theta = np.arccos(np.clip(c, -1.0, 1.0))
    return np.minimum(np.floor(m * theta / np.pi), m - 1)


def psi(theta, m):
    """Monotone margin function (-1)^k cos(m theta) - 2k

    for theta in [k pi / m, (k + 1) pi / m], k = 0 .. m - 1.
    """
    m = _check_margin(m)
    theta = np.asarray(theta, dtype=np.float64)
    k = np.minimum(np.floor(m * theta / np.pi), m - 1)
    return (-1.0) ** k * np.cos(m * theta) - 2 * k


def _psi_of_cos(c, m):
    """psi(arccos c) and its derivative with respect to c

    cos(m theta) is the Chebyshev polynomial T_m(c), so the derivative is
    (-1)^k T_m'(c) and stays finite at c = +-1.
    """
    k = _segment(c, m)
    T = np.zeros(m + 1)
    T[m] = 1
    sign = (-1.0) ** k
    value = sign * chebyshev.chebval(c, T) - 2 * k
    slope = sign * chebyshev.chebval(c, chebyshev.chebder(T))
    return value, slope


def _check_labels(labels, n_classes):
    labels = np.asarray(labels, dtype=int)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise LabelOutOfRange('Labels must lie in [0, %d)' % n_classes)
    return labels


def _sample_weights(labels, class_weights, dtype):
    if class_weights is None:
        return np.ones(labels.shape[0], dtype=dtype)
    return np.asarray(class_weights, dtype=dtype)[labels]


def a_softmax(features, W, labels, m=4, class_weights=None, beta=0.0):
    """A-softmax loss with normalized weights and zero bias

    Logits are |x_i| cos(theta_ij) for non-target classes and
    |x_i| [(1 - beta) psi(theta_iy) + beta cos(theta_iy)] for the target,
    where theta_ij is the angle between x_i and column j of W.

    Parameters
    ----------
    features : ndarray, shape (N, d)
    W : ndarray, shape (d, C)
        Output layer weights; columns are normalized here.
    labels : ndarray of int, shape (N,)
    m : int
        Angular margin.
    class_weights : ndarray, shape (C,) | None
        Per-class weights; loss = (1/N) sum_i w_{y_i} l_i.
    beta : float
        Annealing blend; 0 gives the full margin, 1 plain cosine logits.

    Returns
    -------
    loss : float
    dx : ndarray, shape (N, d)
    dW : ndarray, shape (d, C)
    """
    m = _check_margin(m)
    x = np.asarray(features)
    W = np.asarray(W)
    labels = _check_labels(labels, W.shape[1])
    N = x.shape[0]
    norm_x = np.linalg.norm(x, axis=1, keepdims=True)
    norm_W = np.linalg.norm(W, axis=0, keepdims=True)
    if np.any(norm_x == 0):
        raise ZeroFeature('Zero-norm feature: angle is undefined')
    if np.any(norm_W == 0):
        raise ZeroFeature('Zero-norm weight column: angle is undefined')

    u = x / norm_x
    Wn = W / norm_W
    c = np.clip(u @ Wn, -1.0, 1.0)
    rows = np.arange(N)
    f = c.copy()
    fprime = np.ones_like(c)
    value, slope = _psi_of_cos(c[rows, labels], m)
    f[rows, labels] = (1 - beta) * value + beta * c[rows, labels]
    fprime[rows, labels] = (1 - beta) * slope + beta

    logits = norm_x * f
    w = _sample_weights(labels, class_weights, x.dtype)
    nll = logsumexp(logits, axis=1) - logits[rows, labels]
    loss = float(np.sum(w * nll) / N)

    g = softmax(logits, axis=1)
    g[rows, labels] -= 1
    g *= (w / N)[:, None]
    G1 = g * (f - fprime * c)
    G2 = g * fprime
    dx = u * G1.sum(axis=1, keepdims=True) + G2 @ Wn.T
    dWn = x.T @ G2
    dW = (dWn - Wn * np.sum(Wn * dWn, axis=0, keepdims=True)) / norm_W
    return loss, dx.astype(x.dtype), dW.astype(W.dtype)


def softmax_loss(features, W, b, labels, class_weights=None):
    """Plain softmax cross-entropy on xW + b

    Returns
    -------
    loss, dx, dW, db
    """
    x = np.asarray(features)
    labels = _check_labels(labels, W.shape[1])
    N = x.shape[0]
    rows = np.arange(N)
    logits = x @ W + b
    w = _sample_weights(labels, class_weights, x.dtype)
    nll = logsumexp(logits, axis=1) - logits[rows, labels]
    g = softmax(logits, axis=1)
    g[rows, labels] -= 1
    g *= (w / N)[:, None]
    return float(np.sum(w * nll) / N), g @ W.T, x.T @ g, g.sum(axis=0)


def head_loss(net, head, features, labels, m=4, class_weights=None,
              beta=0.0):
    """Loss of one head from its penultimate features

    Returns
    -------
    loss : float
    upstream : tuple
        (dx, dW, db) for net.network_backward; db is None under A-softmax
        since the output bias is not used.
    """
    W = net.params[head + '.out.W']
    if net.output_kind[head] == 'asoftmax':
        loss, dx, dW = a_softmax(features, W, labels, m, class_weights,
                                 beta)
        return loss, (dx, dW, None)
    loss, dx, dW, db = softmax_loss(features, W,
                                    net.params[head + '.out.b'], labels,
                                    class_weights)
    return loss, (dx, dW, db)


def joint_loss(sd_loss, asv_loss, weights, lambda_reg=0.001, sd_weight=1.0,
               asv_weight=1.0):
    """J = sd_weight L_SD + asv_weight L_ASV + lambda/2 sum ||W||^2

    Parameters
    ----------
    weights : iterable of ndarray
        The regularized set: conv, NIN and FC weight matrices.
    """
    reg = sum(float(np.sum(np.square(W, dtype=np.float64))) for W in weights)
    return sd_weight * sd_loss + asv_weight * asv_loss + 0.5 * lambda_reg * reg


def regularization_grads(net, grads, lambda_reg):
    """Add lambda W to the gradient of every regularized weight, in place"""
    if lambda_reg:
        for name in grads:
            if name.endswith('.W'):
                grads[name] += lambda_reg * net.params[name]
    return grads


def class_weights(label_counts):
    """w_c = N / (C count_c), so that sum_c w_c count_c = N"""
    counts = np.asarray(label_counts, dtype=np.float64)
    if counts.size == 0 or np.any(counts <= 0):
        raise EmptyClass('Every class needs at least one example: %s' %
                         counts.tolist())
    return counts.sum() / (counts.size * counts)


def anneal_beta(epoch, anneal_epochs=5, floor=0.0):
    """Blend weight of cos(theta) in the target logit at a given epoch"""
    if anneal_epochs <= 0:
        return float(floor)
    return float(max(floor, 1.0 - float(epoch) / anneal_epochs))
