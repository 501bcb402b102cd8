'''
Module: srasv.metrics

Detection metrics for the spoofing detector (SD) and the speaker verifier
(ASV), alone and in tandem.

All decisions accept a trial when its score is at or above the threshold.

Function Listing
================
    eer: equal error rate on the ROC convex hull

    det_curve / write_det: miss and false alarm rates over all thresholds

    asv_operating_point, tdcf_constants, tdcf_curve, min_tdcf_norm: tandem
    detection cost of an SD system cascaded with a fixed ASV system

    per_attack_report / format_report / write_report: per-attack tables

    cascade_decisions / integrated_eer: ASV and SD deciding in cascade
'''

import csv
import io
from collections import namedtuple

import numpy as np

from .utils import (logger, verbose, atomic_write, OneClassOnly, NonpositiveC2,
                    UnknownAttackLabel, TrialMismatch, NonFiniteScore)
from .params import tdcf_params

AsvOperatingPoint = namedtuple('AsvOperatingPoint', ['threshold', 'p_miss',
                                                     'p_fa', 'p_miss_spoof'])

SD_KEYS = ('bonafide', 'spoof')
ASV_KEYS = ('target', 'nontarget', 'spoof')
NO_ATTACK = ('-', 'bonafide', None)


class ScoreSet(object):
    """Trial identifiers with their scores, keys and attack labels

    Parameters
    ----------
    trial_ids : sequence of str
    scores : array-like of float
        Must be finite.
    keys : sequence of str | None
        'bonafide'/'spoof' (SD) or 'target'/'nontarget'/'spoof' (ASV).
    attacks : sequence of str | None
        Attack label per trial, '-' for bona fide speech.
    """

    def __init__(self, trial_ids, scores, keys=None, attacks=None):
        self.trial_ids = list(trial_ids)
        self.scores = np.asarray(scores, dtype=np.float64).ravel()
        self.keys = None if keys is None else list(keys)
        self.attacks = None if attacks is None else list(attacks)
        n = len(self.trial_ids)
        if self.scores.size != n or \
                (self.keys is not None and len(self.keys) != n) or \
                (self.attacks is not None and len(self.attacks) != n):
            raise TrialMismatch('ids, scores, keys and attacks differ in '
                                'length')
        if not np.all(np.isfinite(self.scores)):
            raise NonFiniteScore('Score set contains NaN or infinite scores')

    def __len__(self):
        return len(self.trial_ids)

    def subset(self, mask):
        mask = np.asarray(mask, dtype=bool)
        pick = lambda seq: None if seq is None else \
            [v for v, keep in zip(seq, mask) if keep]
        return ScoreSet(pick(self.trial_ids), self.scores[mask],
                        pick(self.keys), pick(self.attacks))

    def with_key(self, key):
        if self.keys is None:
            raise OneClassOnly('Score set has no keys')
        return self.scores[np.array([k == key for k in self.keys], bool)]

    def split(self):
        """(positive scores, negative scores)

        Target vs nontarget when target keys are present, bona fide vs
        spoof otherwise.
        """
        if self.keys is None:
            raise OneClassOnly('Score set has no keys')
        if 'target' in self.keys or 'nontarget' in self.keys:
            return self.with_key('target'), self.with_key('nontarget')
        return self.with_key('bonafide'), self.with_key('spoof')

    def aligned(self, other):
        """other's scores reordered to this set's trial order"""
        index = dict((t, i) for i, t in enumerate(other.trial_ids))
        if len(index) != len(other) or set(index) != set(self.trial_ids):
            raise TrialMismatch('Score sets cover different trials')
        return other.scores[[index[t] for t in self.trial_ids]]


def _classes(scores, negatives=None):
    if isinstance(scores, ScoreSet):
        pos, neg = scores.split()
    else:
        pos = np.asarray(scores, dtype=np.float64).ravel()
        neg = np.asarray(negatives, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise OneClassOnly('Need positive and negative trials (%d / %d)' %
                           (pos.size, neg.size))
    return pos, neg


def _rates(pos, neg, thresholds):
    """P_miss = P(pos < t), P_fa = P(neg >= t)"""
    pos = np.sort(pos)
    neg = np.sort(neg)
    p_miss = np.searchsorted(pos, thresholds, side='left') / float(pos.size)
    p_fa = 1.0 - np.searchsorted(neg, thresholds, side='left') / \
        float(neg.size)
    return p_miss, p_fa


def _thresholds(pos, neg):
    """Every distinct score, plus a reject-all sentinel above the maximum"""
    s = np.unique(np.concatenate([pos, neg]))
    return np.append(s, np.nextafter(s[-1], np.inf))


def det_curve(scores, negatives=None, convex_hull=False):
    """Operating points over all thresholds

    Parameters
    ----------
    scores : ScoreSet | array
        A ScoreSet, or the positive scores when `negatives` is given.
    convex_hull : bool
        Return only the vertices of the ROC convex hull.

    Returns
    -------
    p_fa, p_miss, thresholds : ndarray
        Ordered by increasing threshold, from accept-all (1, 0) to
        reject-all (0, 1).
    """
    pos, neg = _classes(scores, negatives)
    t = _thresholds(pos, neg)
    p_miss, p_fa = _rates(pos, neg, t)
    if convex_hull:
        keep = _lower_hull(p_fa, p_miss)
        return p_fa[keep], p_miss[keep], t[keep]
    return p_fa, p_miss, t


def _lower_hull(x, y):
    """Indices of the lower convex hull, points sorted by increasing x"""
    order = np.lexsort((-y, x))
    hull = []
    for i in order:
        while len(hull) >= 2:
            a, b = hull[-2], hull[-1]
            cross = ((x[b] - x[a]) * (y[i] - y[a]) -
                     (y[b] - y[a]) * (x[i] - x[a]))
            if cross <= 0:
                hull.pop()
            else:
                break
        hull.append(i)
    # back to increasing threshold
    return np.array(hull[::-1])


def eer(scores, negatives=None):
    """Equal error rate on the ROC convex hull

    The hull vertices are ordered by threshold; the EER is where the hull
    crosses P_miss = P_fa, linearly interpolated along the crossing
    segment, as is the returned threshold.

    Returns
    -------
    eer : float
    threshold : float
    """
    p_fa, p_miss, t = det_curve(scores, negatives, convex_hull=True)
    d = p_miss - p_fa
    i = int(np.argmax(d >= 0))
    if d[i] == 0 or i == 0:
        return float(p_fa[i]), float(t[i])
    a = d[i - 1] / (d[i - 1] - d[i])
    rate = p_fa[i - 1] + a * (p_fa[i] - p_fa[i - 1])
    return float(rate), float(t[i - 1] + a * (t[i] - t[i - 1]))


def write_det(path, p_fa, p_miss, thresholds=None):
    """DET points as CSV (p_fa, p_miss[, threshold])"""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator='\n')
    if thresholds is None:
        writer.writerow(['p_fa', 'p_miss'])
        writer.writerows(('%.17g' % a, '%.17g' % b)
                         for a, b in zip(p_fa, p_miss))
    else:
        writer.writerow(['p_fa', 'p_miss', 'threshold'])
        writer.writerows(('%.17g' % a, '%.17g' % b, '%.17g' % c)
                         for a, b, c in zip(p_fa, p_miss, thresholds))
    atomic_write(path, buf.getvalue(), mode='w')


def asv_operating_point(asv_scores):
    """ASV rates at its target/nontarget EER threshold

    Returns
    -------
    op : AsvOperatingPoint
        threshold, P_miss (targets below), P_fa (nontargets at or above),
        P_miss,spoof (spoof trials below; 0 without spoof trials).
    """
    tar = asv_scores.with_key('target')
    non = asv_scores.with_key('nontarget')
    spoof = asv_scores.with_key('spoof')
    _, threshold = eer(tar, non)
    p_miss = float(np.mean(tar < threshold))
    p_fa = float(np.mean(non >= threshold))
    p_miss_spoof = float(np.mean(spoof < threshold)) if spoof.size else 0.0
    return AsvOperatingPoint(threshold, p_miss, p_fa, p_miss_spoof)


def tdcf_constants(p, op):
    """C0, C1, C2 of the tandem cost for a fixed ASV operating point

    Parameters
    ----------
    p : dict
        TdcfParams, see params.tdcf_params.
    op : AsvOperatingPoint
    """
    C0 = p['pi_tar'] * p['c_miss_asv'] * op.p_miss + \
        p['pi_non'] * p['c_fa_asv'] * op.p_fa
    C1 = p['pi_tar'] * p['c_miss_sd'] - C0
    C2 = p['c_fa_sd'] * p['pi_spoof'] * (1 - op.p_miss_spoof)
    if C2 <= 0:
        raise NonpositiveC2('C2 = %g: the ASV system rejects every spoof '
                            'trial, t-DCF is undefined' % C2)
    if C1 < 0:
        logger.warning('C1 = %g < 0: the ASV system performs worse than '
                       'chance; evaluating t-DCF anyway' % C1)
    return C0, C1, C2


def tdcf_curve(sd_scores, C1, C2, C0=0.0, normalization='ratio'):
    """t-DCF of the SD system at every threshold

    normalization:
        'ratio'      (C1 / C2) P_miss + P_fa
        'none'       C0 + C1 P_miss + C2 P_fa
        'challenge'  (C0 + C1 P_miss + C2 P_fa) / (C0 + min(C1, C2))

    Returns
    -------
    thresholds, values : ndarray
        Thresholds are every distinct score plus sentinels below the minimum
        (accept all) and above the maximum (reject all).
    """
    if C2 <= 0:
        raise NonpositiveC2('C2 = %g must be positive' % C2)
    pos, neg = _classes(sd_scores)
    t = _thresholds(pos, neg)
    t = np.concatenate([[np.nextafter(t[0], -np.inf)], t])
    p_miss, p_fa = _rates(pos, neg, t)
    if normalization == 'ratio':
        values = (C1 / C2) * p_miss + p_fa
    elif normalization == 'none':
        values = C0 + C1 * p_miss + C2 * p_fa
    elif normalization == 'challenge':
        values = (C0 + C1 * p_miss + C2 * p_fa) / (C0 + min(C1, C2))
    else:
        raise ValueError('Unknown t-DCF normalization %r' % normalization)
    return t, values


def min_tdcf_norm(sd_scores, C1, C2, C0=0.0, normalization='ratio'):
    """Minimum of the t-DCF curve

    Returns
    -------
    value : float
    threshold : float
    curve : (thresholds, values)
    """
    t, values = tdcf_curve(sd_scores, C1, C2, C0, normalization)
    i = int(np.argmin(values))
    return float(values[i]), float(t[i]), (t, values)


def _check_attacks(sd_scores):
    if sd_scores.attacks is None:
        raise UnknownAttackLabel('SD scores carry no attack labels')
    attacks = []
    for key, attack in zip(sd_scores.keys, sd_scores.attacks):
        if key == 'spoof':
            if attack in NO_ATTACK:
                raise UnknownAttackLabel('Spoof trial without attack label')
            if attack not in attacks:
                attacks.append(attack)
    return sorted(attacks)


@verbose
def per_attack_report(sd_scores, asv_scores, params, verbose=None):
    """SD EER, min t-DCF and ASV-under-attack EER for each attack

    Every row pools all bona fide SD trials with one attack's spoof trials.
    The ASV operating point uses the same attack's ASV spoof trials when the
    ASV scores carry attack labels, all of them otherwise. A final 'pooled'
    row covers every attack. An attack whose spoofs the ASV system rejects
    entirely has no t-DCF; its row holds NaN there.

    Parameters
    ----------
    sd_scores : ScoreSet
        bonafide/spoof keys and attack labels.
    asv_scores : ScoreSet
        target/nontarget/spoof keys.
    params : dict
        From generate_parameters (t-DCF priors, costs and normalization).

    Returns
    -------
    rows : list of dict
        attack, sd_eer, min_tdcf, asv_spoof_eer, C0, C1, C2
    """
    p = tdcf_params(params)
    attacks = _check_attacks(sd_scores)
    asv_attacks = None
    if asv_scores.attacks is not None:
        asv_attacks = [a for k, a in zip(asv_scores.keys, asv_scores.attacks)
                       if k == 'spoof']
        unknown = set(asv_attacks) - set(attacks)
        if unknown - set(NO_ATTACK):
            raise UnknownAttackLabel('ASV attacks unknown to the SD set: %s' %
                                     sorted(unknown))
        if unknown & set(NO_ATTACK):
            asv_attacks = None

    rows = []
    for attack in attacks + ['pooled']:
        if attack == 'pooled':
            sd = sd_scores
            asv = asv_scores
        else:
            sd = sd_scores.subset([k == 'bonafide' or a == attack for k, a in
                                   zip(sd_scores.keys, sd_scores.attacks)])
            if asv_attacks is None:
                asv = asv_scores
            else:
                asv = asv_scores.subset(
                    [k != 'spoof' or a == attack for k, a in
                     zip(asv_scores.keys, asv_scores.attacks)])
        op = asv_operating_point(asv)
        try:
            C0, C1, C2 = tdcf_constants(p, op)
            value, _, _ = min_tdcf_norm(sd, C1, C2, C0, params['tdcfNorm'])
        except NonpositiveC2 as err:
            if attack == 'pooled':
                raise
            # undefined for an attack the ASV system fully rejects
            logger.warning('%s: %s' % (attack, err))
            C0 = C1 = C2 = value = float('nan')
        spoof = asv.with_key('spoof')
        asv_spoof_eer = eer(asv.with_key('target'), spoof)[0] \
            if spoof.size else float('nan')
        rows.append(dict(attack=attack, sd_eer=eer(sd)[0], min_tdcf=value,
                         asv_spoof_eer=asv_spoof_eer, C0=C0, C1=C1, C2=C2))
        logger.info('%-10s SD EER %6.2f%%  min t-DCF %.4f' %
                    (attack, 100 * rows[-1]['sd_eer'], value))
    return rows


_COLUMNS = ('attack', 'sd_eer', 'min_tdcf', 'asv_spoof_eer', 'C0', 'C1', 'C2')


def format_report(rows):
    """Aligned plain-text table; rates in percent"""
    lines = ['%-10s %9s %9s %13s %8s %8s %8s' % ('attack', 'SD EER%',
                                                 'min tDCF', 'ASV spoof EER%',
                                                 'C0', 'C1', 'C2')]
    for r in rows:
        lines.append('%-10s %9.2f %9.4f %13.2f %8.4f %8.4f %8.4f' %
                     (r['attack'], 100 * r['sd_eer'], r['min_tdcf'],
                      100 * r['asv_spoof_eer'], r['C0'], r['C1'], r['C2']))
    return '\n'.join(lines) + '\n'


def write_report(path, rows):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=_COLUMNS, lineterminator='\n')
    writer.writeheader()
    for r in rows:
        writer.writerow(dict((k, r[k] if k == 'attack' else '%.17g' % r[k])
                             for k in _COLUMNS))
    atomic_write(path, buf.getvalue(), mode='w')


def cascade_decisions(asv_scores, sd_scores, asv_threshold, sd_threshold):
    """Accept a trial only when both the ASV and the SD score pass"""
    asv_scores = np.asarray(asv_scores, dtype=np.float64)
    sd_scores = np.asarray(sd_scores, dtype=np.float64)
    if asv_scores.shape != sd_scores.shape:
        raise TrialMismatch('ASV and SD score vectors differ in length')
    return (asv_scores >= asv_threshold) & (sd_scores >= sd_threshold)


def integrated_eer(asv_scores, sd_scores):
    """EER of the cascaded ASV and SD system on the ASV trial list

    Target trials are positives; nontarget and spoof trials negatives. The
    ASV threshold is fixed at its target/nontarget EER point and the SD
    threshold is swept.

    Parameters
    ----------
    asv_scores : ScoreSet
        target/nontarget/spoof keys.
    sd_scores : ScoreSet
        Scores of the same trials (matched by trial id).

    Returns
    -------
    eer, sd_threshold : float
    """
    sd = asv_scores.aligned(sd_scores)
    op = asv_operating_point(asv_scores)
    passed = asv_scores.scores >= op.threshold
    floor = sd.min() - 1.0
    combined = np.where(passed, sd, floor)
    keys = np.array(asv_scores.keys)
    return eer(combined[keys == 'target'], combined[keys != 'target'])
