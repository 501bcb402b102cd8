"""
Speaker verification back-end: embeddings from the ASV head, centering and
length normalization, two-covariance PLDA and adaptive s-norm.

License : BSD 3-clause
"""

import warnings
from collections import OrderedDict, namedtuple

import numpy as np
from scipy import linalg

from .utils import (logger, verbose, ZeroVector, DimensionMismatch,
                    CohortTooSmall, ZeroVariance, ShapeMismatch,
                    CorruptCheckpoint, DegenerateDataWarning)
from .net import network_forward
from . import container

PldaModel = namedtuple('PldaModel', ['mu', 'Sb', 'Sw'])

PLDA_KIND = 2


def _batched_forward(features, net, batch_size):
    features = np.asarray(features)
    if features.ndim == 2:
        features = features[None]
    outs = []
    for start in range(0, features.shape[0], batch_size):
        outs.append(network_forward(features[start:start + batch_size], net,
                                    'eval'))
    return outs


def extract_embedding(features, net, batch_size=32):
    """ASV head activations of the last hidden FC layer (eval mode)

    Parameters
    ----------
    features : ndarray, shape (rows, frames) or (N, rows, frames)

    Returns
    -------
    embeddings : ndarray, shape (N, embedding_dim), float64
    """
    if 'asv' not in net.heads:
        raise ShapeMismatch('Network has no ASV head to take embeddings from')
    outs = _batched_forward(features, net, batch_size)
    return np.concatenate([o[2] for o in outs]).astype(np.float64)


def sd_scores(features, net, batch_size=32):
    """Spoofing detection scores log p(bonafide|x) - log p(spoof|x)

    The posterior ratio of the SD head's softmax reduces to the difference
    of its two margin-free logits.
    """
    if 'sd' not in net.heads:
        raise ShapeMismatch('Network has no SD head')
    outs = _batched_forward(features, net, batch_size)
    logits = np.concatenate([o[0] for o in outs]).astype(np.float64)
    return logits[:, 1] - logits[:, 0]


def center_lnorm(embeddings, mu):
    """(e - mu) / |e - mu| for every row"""
    E = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    mu = np.asarray(mu, dtype=np.float64)
    if E.shape[1] != mu.shape[-1]:
        raise DimensionMismatch('Embeddings have dimension %d, mean %d' %
                                (E.shape[1], mu.shape[-1]))
    centered = E - mu
    norms = np.linalg.norm(centered, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ZeroVector('Embedding equals the centering mean')
    return centered / norms


def enroll(embeddings, labels, mu=None):
    """Multi-session enrollment models

    Averages the length-normalized embeddings of each speaker, then
    normalizes the average again.

    Returns
    -------
    speakers : list
        Sorted speaker labels.
    models : ndarray, shape (n_speakers, dim)
    """
    E = np.asarray(embeddings, dtype=np.float64)
    if mu is not None:
        E = center_lnorm(E, mu)
    labels = np.asarray(labels)
    speakers = sorted(set(labels.tolist()))
    models = np.stack([E[labels == s].mean(axis=0) for s in speakers])
    norms = np.linalg.norm(models, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ZeroVector('Enrollment embeddings cancel out')
    return speakers, models / norms


def _class_stats(X, labels):
    classes = sorted(set(np.asarray(labels).tolist()))
    idx = [np.flatnonzero(np.asarray(labels) == c) for c in classes]
    return classes, idx


def _chol(S):
    """Cholesky factor of a covariance and its log-determinant"""
    factor = linalg.cho_factor(S, lower=True)
    return factor, 2.0 * np.log(np.diag(factor[0])).sum()


def _pos_inv(S):
    inv = linalg.cho_solve(_chol(S)[0], np.eye(S.shape[0]))
    return 0.5 * (inv + inv.T)


def _objective(Xc, idx, Sb, Sw, floor):
    """Marginal log-likelihood of centered data plus the ridge prior

    The prior contributes -tr(Sb^-1) * K * floor / 2 and
    -tr(Sw^-1) * N * floor / 2, whose maximizer adds floor * I to each
    M-step estimate.
    """
    N, d = Xc.shape
    cb, logdet_b = _chol(Sb)
    cw, logdet_w = _chol(Sw)
    B = linalg.cho_solve(cb, np.eye(d))
    W = linalg.cho_solve(cw, np.eye(d))
    total = 0.0
    for rows in idx:
        x = Xc[rows]
        n = x.shape[0]
        b = W @ x.sum(axis=0)
        cl, logdet_l = _chol(B + n * W)
        total += (-0.5 * n * d * np.log(2 * np.pi) - 0.5 * logdet_b -
                  0.5 * n * logdet_w - 0.5 * logdet_l -
                  0.5 * np.einsum('ij,jk,ik->', x, W, x) +
                  0.5 * b @ linalg.cho_solve(cl, b))
    total -= 0.5 * floor * (len(idx) * np.trace(B) + N * np.trace(W))
    return total



@verbose
def plda_train(embeddings, labels, n_iters=10, ridge=1e-6, verbose=None):
    """Two-covariance PLDA trained by EM

    Speaker variables y ~ N(mu, Sb) and observations x ~ N(y, Sw). The mean
    is the global mean; Sb and Sw are initialized from the between- and
    within-class scatter and refined by n_iters EM iterations. Each M-step
    adds floor * I to both estimates, with floor = ridge * trace(St) / dim
    for the total covariance St of the data. This is the exact maximizer of
    the likelihood under an inverse-Wishart type prior, so the penalized
    log-likelihood returned in `llh` never decreases.

    Data with a single class, or without any class of two samples, gives a
    DegenerateDataWarning and a model without EM: the missing covariance is
    set to floor * I and the other one to St + floor * I.

    Parameters
    ----------
    embeddings : ndarray, shape (N, dim)
    labels : sequence
        Class of every row.
    n_iters : int
    ridge : float
        Relative covariance floor; must be positive.

    Returns
    -------
    model : PldaModel
    llh : list of float
        Penalized log-likelihood before each iteration and after the last
        one (empty for degenerate data).
    """
    X = np.asarray(embeddings, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise DimensionMismatch('PLDA needs an (N, dim) embedding matrix')
    if ridge <= 0:
        raise ValueError('ridge must be positive')
    classes, idx = _class_stats(X, labels)
    N, d = X.shape
    mu = X.mean(axis=0)
    Xc = X - mu
    St = Xc.T @ Xc / N
    floor = ridge * (np.trace(St) / d or 1.0)
    ridged = floor * np.eye(d)

    if len(classes) < 2:
        msg = ('PLDA trained on a single class: between-class covariance set '
               'to the ridge floor')
        warnings.warn(msg, DegenerateDataWarning)
        logger.warning(msg)
        return PldaModel(mu, ridged.copy(), St + ridged), []
    if max(len(rows) for rows in idx) < 2:
        msg = ('No class has two samples: within-class covariance set to '
               'the ridge floor')
        warnings.warn(msg, DegenerateDataWarning)
        logger.warning(msg)
        return PldaModel(mu, St + ridged, ridged.copy()), []

    means = np.stack([Xc[rows].mean(axis=0) for rows in idx])
    Sb = means.T @ means / len(classes) + ridged
    Sw = sum((Xc[rows] - m).T @ (Xc[rows] - m)
             for rows, m in zip(idx, means)) / N + ridged
    llh = []
    for it in range(n_iters):
        llh.append(_objective(Xc, idx, Sb, Sw, floor))
        logger.debug('PLDA EM iteration %d: llh %.6f' % (it, llh[-1]))
        B = _pos_inv(Sb)
        W = _pos_inv(Sw)
        Sb_new = np.zeros((d, d))
        Sw_new = np.zeros((d, d))
        for rows in idx:
            x = Xc[rows]
            n = x.shape[0]
            f = x.sum(axis=0)
            Linv = _pos_inv(B + n * W)
            y = Linv @ (W @ f)
            yy = np.outer(y, y) + Linv
            Sb_new += yy
            r = x - y
            Sw_new += r.T @ r + n * Linv
        Sb = Sb_new / len(classes) + ridged
        Sw = Sw_new / N + ridged
        Sb = 0.5 * (Sb + Sb.T)
        Sw = 0.5 * (Sw + Sw.T)
    llh.append(_objective(Xc, idx, Sb, Sw, floor))
    logger.info('PLDA: %d classes, %d samples, llh %.4f -> %.4f' %
                (len(classes), N, llh[0], llh[-1]))
    return PldaModel(mu, Sb, Sw), llh


def _scoring_matrices(model):
    T = model.Sb + model.Sw
    Tinv = _pos_inv(T)
    # T - Sb T^-1 Sb, written without the cancellation
    inner = model.Sw + model.Sb @ Tinv @ model.Sw
    A = _pos_inv(0.5 * (inner + inner.T))
    Q = Tinv - A
    P = Tinv @ model.Sb @ A
    Q = 0.5 * (Q + Q.T)
    P = 0.5 * (P + P.T)
    joint = np.block([[T, model.Sb], [model.Sb, T]])
    c = -0.5 * np.linalg.slogdet(joint)[1] + np.linalg.slogdet(T)[1]
    return Q, P, c


def _check_dim(X, model, what):
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != model.mu.shape[0]:
        raise DimensionMismatch('%s has dimension %d, model %d' %
                                (what, X.shape[1], model.mu.shape[0]))
    return X - model.mu


def plda_score(enroll, test, model):
    """Same-versus-different speaker log-likelihood ratio

    Closed form of log N([e; t]; [mu; mu], [[T, Sb], [Sb, T]]) minus
    log N([e; t]; [mu; mu], [[T, 0], [0, T]]) with T = Sb + Sw.

    Parameters
    ----------
    enroll, test : ndarray, shape (dim,) or (N, dim)
        Paired row by row.

    Returns
    -------
    llr : float or ndarray, shape (N,)
    """
    single = np.ndim(enroll) == 1 and np.ndim(test) == 1
    E = _check_dim(enroll, model, 'Enrollment embedding')
    T = _check_dim(test, model, 'Test embedding')
    Q, P, c = _scoring_matrices(model)
    llr = (0.5 * np.einsum('ij,jk,ik->i', E, Q, E) +
           0.5 * np.einsum('ij,jk,ik->i', T, Q, T) +
           np.einsum('ij,jk,ik->i', E, P, T) + c)
    return float(llr[0]) if single else llr


def plda_score_matrix(enroll, test, model):
    """LLR of every enrollment row against every test row"""
    E = _check_dim(enroll, model, 'Enrollment embedding')
    T = _check_dim(test, model, 'Test embedding')
    Q, P, c = _scoring_matrices(model)
    qe = 0.5 * np.einsum('ij,jk,ik->i', E, Q, E)
    qt = 0.5 * np.einsum('ij,jk,ik->i', T, Q, T)
    return qe[:, None] + qt[None, :] + E @ P @ T.T + c


def _top_stats(cohort_scores, top_k):
    S = np.atleast_2d(np.asarray(cohort_scores, dtype=np.float64))
    if top_k < 2 or S.shape[1] < top_k:
        raise CohortTooSmall('Need 2 <= top_k <= cohort size, got top_k %d '
                             'for %d cohort scores' % (top_k, S.shape[1]))
    top = -np.partition(-S, top_k - 1, axis=1)[:, :top_k]
    mean = top.mean(axis=1)
    std = top.std(axis=1)
    if np.any(std == 0):
        raise ZeroVariance('Top cohort scores have zero spread')
    return mean, std


def adaptive_snorm(score, enroll_cohort, test_cohort, top_k=200):
    """Symmetric normalization with the top_k highest cohort scores

    s' = ((s - mu_e) / sd_e + (s - mu_t) / sd_t) / 2, where mu_e, sd_e are
    the mean and (population) standard deviation of the top_k cohort scores
    of the enrollment side, likewise for the test side.

    Parameters
    ----------
    score : float or ndarray, shape (N,)
    enroll_cohort, test_cohort : ndarray, shape (cohort,) or (N, cohort)
    """
    single = np.ndim(score) == 0
    s = np.atleast_1d(np.asarray(score, dtype=np.float64))
    mu_e, sd_e = _top_stats(enroll_cohort, top_k)
    mu_t, sd_t = _top_stats(test_cohort, top_k)
    out = 0.5 * ((s - mu_e) / sd_e + (s - mu_t) / sd_t)
    return float(out[0]) if single else out


def score_trials(enroll_models, test_embeddings, model, cohort=None,
                 top_k=200):
    """PLDA scores of paired (enrollment model, test embedding) rows

    With a cohort, scores are adaptive s-normalized; top_k is capped at the
    cohort size.
    """
    raw = plda_score(np.atleast_2d(enroll_models),
                     np.atleast_2d(test_embeddings), model)
    if cohort is None:
        return raw
    k = min(top_k, len(cohort))
    enroll_cohort = plda_score_matrix(enroll_models, cohort, model)
    test_cohort = plda_score_matrix(test_embeddings, cohort, model)
    return adaptive_snorm(raw, enroll_cohort, test_cohort, k)


def cohort_means(embeddings, labels):
    """Class-mean embeddings, re-normalized to unit length"""
    _, means = enroll(embeddings, labels)
    return means


def adapt_plda(model, enroll_embeddings):
    """Re-center the PLDA mean on enrollment data; covariances are kept"""
    E = np.atleast_2d(np.asarray(enroll_embeddings, dtype=np.float64))
    if E.shape[1] != model.mu.shape[0]:
        raise DimensionMismatch('Enrollment dimension %d, model %d' %
                                (E.shape[1], model.mu.shape[0]))
    logger.info('PLDA mean re-centered on %d enrollment embeddings' %
                E.shape[0])
    return PldaModel(E.mean(axis=0), model.Sb, model.Sw)


def save_plda(path, model, center=None, cohort=None):
    """PLDA blobs mu, Sb, Sw, plus optional centering mean and cohort"""
    blobs = OrderedDict([('mu', model.mu), ('Sb', model.Sb),
                         ('Sw', model.Sw)])
    if center is not None:
        blobs['center'] = center
    if cohort is not None:
        blobs['cohort'] = cohort
    container.save(path, blobs, kind=PLDA_KIND)


def load_plda(path):
    """
    Returns
    -------
    model : PldaModel (float64)
    extras : dict
        'center' and 'cohort' when stored.
    """
    header, blobs = container.load(path)
    if header['kind'] != PLDA_KIND:
        raise CorruptCheckpoint('%s is not a PLDA model' % path)
    try:
        mu, Sb, Sw = blobs['mu'], blobs['Sb'], blobs['Sw']
    except KeyError as e:
        raise CorruptCheckpoint('%s lacks blob %s' % (path, e))
    d = mu.shape[0]
    if mu.ndim != 1 or Sb.shape != (d, d) or Sw.shape != (d, d):
        raise CorruptCheckpoint('%s: inconsistent PLDA shapes' % path)
    model = PldaModel(*(b.astype(np.float64) for b in (mu, Sb, Sw)))
    extras = dict((k, blobs[k].astype(np.float64)) for k in ('center',
                                                             'cohort')
                  if k in blobs)
    return model, extras
