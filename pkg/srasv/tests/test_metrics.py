import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from srasv import metrics
from srasv.metrics import ScoreSet, AsvOperatingPoint
from srasv.params import tdcf_params
from srasv.utils import (OneClassOnly, NonpositiveC2, UnknownAttackLabel,
                         TrialMismatch, NonFiniteScore)


def _sweep(pos, neg):
    """Operating points by direct counting at every threshold"""
    s = np.unique(np.concatenate([pos, neg]))
    t = np.concatenate([[s[0] - 1], s, [s[-1] + 1]])
    p_miss = np.array([np.mean(pos < x) for x in t])
    p_fa = np.array([np.mean(neg >= x) for x in t])
    return p_fa, p_miss


def _oracle_eer(pos, neg):
    """Lowest crossing of the diagonal over all pairs of operating points"""
    p_fa, p_miss = _sweep(pos, neg)
    d = p_miss - p_fa
    on = d == 0
    best = p_fa[on].min() if np.any(on) else np.inf
    lo, hi = np.flatnonzero(d < 0), np.flatnonzero(d > 0)
    a = d[lo][:, None] / (d[lo][:, None] - d[hi][None, :])
    cross = p_fa[lo][:, None] + a * (p_fa[hi][None, :] - p_fa[lo][:, None])
    return min(best, cross.min())


def _oracle_min_tdcf(pos, neg, C1, C2):
    p_fa, p_miss = _sweep(pos, neg)
    return np.min(C1 / C2 * p_miss + p_fa)


def _sd_set(pos, neg):
    return ScoreSet(['b%d' % i for i in range(len(pos))] +
                    ['s%d' % i for i in range(len(neg))],
                    np.concatenate([pos, neg]),
                    ['bonafide'] * len(pos) + ['spoof'] * len(neg))


def test_eer_fixtures():
    assert metrics.eer([2.0, 3.0], [0.0, 1.0])[0] == 0.0
    assert_allclose(metrics.eer([0.0, 1.0, 2.0], [0.0, 1.0, 2.0])[0], 0.5)
    rate, threshold = metrics.eer([1.0, 3.0], [0.0, 2.0])
    assert_allclose(rate, 0.25)
    assert_allclose(threshold, 2.0)
    assert metrics.eer(_sd_set([5.0, 6.0], [1.0]))[0] == 0.0
    with pytest.raises(OneClassOnly):
        metrics.eer([1.0, 2.0], [])


def test_det_curve():
    p_fa, p_miss, t = metrics.det_curve([1.0, 3.0], [0.0, 2.0])
    assert_array_equal(p_fa, [1, 0.5, 0.5, 0, 0])
    assert_array_equal(p_miss, [0, 0, 0.5, 0.5, 1])
    assert_array_equal(t[:4], [0, 1, 2, 3])
    assert t[4] > 3
    p_fa, p_miss, _ = metrics.det_curve([1.0, 3.0], [0.0, 2.0],
                                        convex_hull=True)
    assert_array_equal(p_fa, [1, 0.5, 0, 0])
    assert_array_equal(p_miss, [0, 0, 0.5, 1])


def test_write_det(tmp_path):
    p_fa, p_miss, t = metrics.det_curve([1.0, 3.0], [0.0, 2.0])
    path = str(tmp_path / 'det.csv')
    metrics.write_det(path, p_fa, p_miss, t)
    with open(path) as f:
        lines = f.read().splitlines()
    assert lines[0] == 'p_fa,p_miss,threshold'
    assert lines[1] == '1,0,0'
    assert len(lines) == 6
    metrics.write_det(path, p_fa, p_miss)
    with open(path) as f:
        assert f.readline().strip() == 'p_fa,p_miss'


@pytest.mark.parametrize('integer_scores', [False, True])
def test_eer_and_min_tdcf_match_oracles(integer_scores):
    C1, C2 = 0.83695, 0.4
    for seed in range(50):
        rng = np.random.RandomState(seed)
        n_pos = rng.randint(100, 900)
        if integer_scores:
            pos = rng.randint(0, 30, n_pos).astype(float) + 3
            neg = rng.randint(0, 30, 1000 - n_pos).astype(float)
        else:
            pos = rng.randn(n_pos) + rng.uniform(0, 3)
            neg = rng.randn(1000 - n_pos)
        assert_allclose(metrics.eer(pos, neg)[0], _oracle_eer(pos, neg),
                        atol=1e-12)
        value, _, _ = metrics.min_tdcf_norm(_sd_set(pos, neg), C1, C2)
        assert_allclose(value, _oracle_min_tdcf(pos, neg, C1, C2),
                        atol=1e-12)
        assert 0 <= value <= min(C1 / C2, 1) + 1e-12


def test_metric_invariances():
    rng = np.random.RandomState(11)
    pos, neg = rng.randn(300) + 1.5, rng.randn(500)
    base_eer = metrics.eer(pos, neg)[0]
    base_tdcf = metrics.min_tdcf_norm(_sd_set(pos, neg), 0.9, 0.5)[0]
    for f in (lambda s: 2 * s + 3, lambda s: np.tanh(s / 10.)):
        assert_allclose(metrics.eer(f(pos), f(neg))[0], base_eer, atol=1e-9)
        assert_allclose(metrics.min_tdcf_norm(_sd_set(f(pos), f(neg)), 0.9,
                                              0.5)[0], base_tdcf, atol=1e-9)


def test_tdcf_constants(params):
    p = tdcf_params(params)
    C0, C1, C2 = metrics.tdcf_constants(p, AsvOperatingPoint(0, 0, 0, 0))
    assert C0 == 0
    assert_allclose([C1, C2], [0.9405, 0.5])
    C0, C1, C2 = metrics.tdcf_constants(p, AsvOperatingPoint(0, 0.1, 0.1,
                                                             0.2))
    assert_allclose([C0, C1, C2], [0.10355, 0.83695, 0.4], rtol=1e-12)
    with pytest.raises(NonpositiveC2):
        metrics.tdcf_constants(p, AsvOperatingPoint(0, 0.1, 0.1, 1.0))
    # worse than chance: C1 < 0 is reported, not refused
    C0, C1, C2 = metrics.tdcf_constants(p, AsvOperatingPoint(0, 1.0, 1.0,
                                                             0.0))
    assert C1 < 0
    assert_allclose(C2, 0.5)


def test_tdcf_curve():
    sd = _sd_set(np.array([2.0, 3.0]), np.array([0.0, 1.0]))
    t, values = metrics.tdcf_curve(sd, 0.837, 0.4)
    assert t[0] < 0 and t[-1] > 3
    assert values[0] == 1.0
    assert_allclose(values[-1], 0.837 / 0.4)
    value, threshold, _ = metrics.min_tdcf_norm(sd, 0.837, 0.4)
    assert value == 0.0 and threshold == 2.0
    _, values = metrics.tdcf_curve(sd, 0.8, 0.4, C0=0.1,
                                   normalization='none')
    assert_allclose([values[0], values[-1]], [0.5, 0.9])
    value, _, _ = metrics.min_tdcf_norm(sd, 0.8, 0.4, C0=0.1,
                                        normalization='challenge')
    assert_allclose(value, 0.1 / 0.5)
    with pytest.raises(NonpositiveC2):
        metrics.tdcf_curve(sd, 0.8, 0.0)
    with pytest.raises(ValueError):
        metrics.tdcf_curve(sd, 0.8, 0.4, normalization='other')


def test_eight_trial_tdcf():
    pos = np.array([0.9, 2.5, 1.7, 3.1])
    neg = np.array([-0.4, 1.2, 2.0, 0.1])
    value, _, (t, values) = metrics.min_tdcf_norm(_sd_set(pos, neg), 0.8370,
                                                  0.4)
    assert_allclose(value, _oracle_min_tdcf(pos, neg, 0.8370, 0.4),
                    atol=1e-12)
    assert t.size == 10 and values.size == 10


def _asv_set(spoof_scores, spoof_attacks=None):
    tar = [3.0, 4.0, 5.0, 6.0]
    non = [0.0, 1.0, 2.0, 2.5]
    ids = ['t%d' % i for i in range(8)] + \
        ['x%d' % i for i in range(len(spoof_scores))]
    keys = ['target'] * 4 + ['nontarget'] * 4 + ['spoof'] * len(spoof_scores)
    attacks = None
    if spoof_attacks is not None:
        attacks = ['-'] * 8 + list(spoof_attacks)
    return ScoreSet(ids, tar + non + list(spoof_scores), keys, attacks)


def test_asv_operating_point():
    op = metrics.asv_operating_point(_asv_set([2.0, 3.5, 7.0, 1.0]))
    assert op.threshold == 3.0
    assert op.p_miss == 0.0 and op.p_fa == 0.0
    assert op.p_miss_spoof == 0.5
    assert metrics.asv_operating_point(_asv_set([])).p_miss_spoof == 0.0


def _sd_attack_set():
    bona = [2.0, 2.5, 3.0, 3.5, 1.2]
    pattern = [0.0, 1.0, 2.2, -0.5]
    ids = ['b%d' % i for i in range(5)] + ['a%d' % i for i in range(4)] + \
        ['c%d' % i for i in range(4)]
    keys = ['bonafide'] * 5 + ['spoof'] * 8
    attacks = ['-'] * 5 + ['A'] * 4 + ['B'] * 4
    return ScoreSet(ids, bona + pattern + pattern, keys, attacks)


def test_per_attack_report_symmetric(params):
    rows = metrics.per_attack_report(_sd_attack_set(),
                                     _asv_set([1.0, 3.5, 4.5, 0.5]), params,
                                     verbose=False)
    assert [r['attack'] for r in rows] == ['A', 'B', 'pooled']
    for k in ('sd_eer', 'min_tdcf', 'asv_spoof_eer', 'C0', 'C1', 'C2'):
        assert rows[0][k] == rows[1][k]
    assert_allclose(rows[2]['sd_eer'], rows[0]['sd_eer'])


def test_per_attack_report_attack_aware_asv(params):
    asv = _asv_set([5.5, 6.5, 0.5, 3.5], ['A', 'A', 'B', 'B'])
    rows = metrics.per_attack_report(_sd_attack_set(), asv, params,
                                     verbose=False)
    by_attack = dict((r['attack'], r) for r in rows)
    assert by_attack['A']['asv_spoof_eer'] > by_attack['B']['asv_spoof_eer']
    assert_allclose(by_attack['A']['asv_spoof_eer'], 0.5)
    assert_allclose(by_attack['B']['asv_spoof_eer'], 1. / 6)
    # A spoofs all pass the ASV threshold, half of the B spoofs do
    assert_allclose([by_attack['A']['C2'], by_attack['B']['C2']],
                    [0.5, 0.25])


def test_per_attack_report_rejected_attack(params):
    asv = _asv_set([5.5, 6.5, 0.5, 1.0], ['A', 'A', 'B', 'B'])
    rows = metrics.per_attack_report(_sd_attack_set(), asv, params,
                                     verbose=False)
    assert np.isnan(rows[1]['min_tdcf']) and np.isnan(rows[1]['C2'])
    assert np.isfinite(rows[0]['min_tdcf'])
    assert_allclose(rows[2]['C2'], 0.25)
    assert 'nan' in metrics.format_report(rows).splitlines()[2]
    with pytest.raises(NonpositiveC2):
        metrics.per_attack_report(_sd_attack_set(),
                                  _asv_set([0.5, 1.0], ['A', 'B']), params,
                                  verbose=False)


def test_per_attack_report_errors(params):
    sd = _sd_attack_set()
    with pytest.raises(UnknownAttackLabel):
        metrics.per_attack_report(ScoreSet(sd.trial_ids, sd.scores, sd.keys),
                                  _asv_set([1.0]), params, verbose=False)
    bad = ScoreSet(sd.trial_ids, sd.scores, sd.keys,
                   sd.attacks[:-1] + ['-'])
    with pytest.raises(UnknownAttackLabel):
        metrics.per_attack_report(bad, _asv_set([1.0]), params,
                                  verbose=False)
    with pytest.raises(UnknownAttackLabel):
        metrics.per_attack_report(sd, _asv_set([1.0], ['Z']), params,
                                  verbose=False)


def test_report_output(params, tmp_path):
    rows = metrics.per_attack_report(_sd_attack_set(),
                                     _asv_set([1.0, 3.5, 4.5, 0.5]), params,
                                     verbose=False)
    text = metrics.format_report(rows)
    lines = text.splitlines()
    assert len(lines) == 4
    assert lines[0].split()[0] == 'attack'
    assert lines[3].split()[0] == 'pooled'
    path = str(tmp_path / 'report.csv')
    metrics.write_report(path, rows)
    with open(path) as f:
        csv_lines = f.read().splitlines()
    assert csv_lines[0] == 'attack,sd_eer,min_tdcf,asv_spoof_eer,C0,C1,C2'
    assert csv_lines[1].startswith('A,')
    assert_allclose(float(csv_lines[1].split(',')[2]), rows[0]['min_tdcf'],
                    rtol=1e-15)


def test_cascade_decisions():
    out = metrics.cascade_decisions([1.0, 2.0, 3.0, 0.0], [5.0, 0.0, 1.0, 9.0],
                                    1.0, 1.0)
    assert_array_equal(out, [True, False, True, False])
    with pytest.raises(TrialMismatch):
        metrics.cascade_decisions([1.0, 2.0], [1.0], 0.0, 0.0)


def test_integrated_eer():
    asv = _asv_set([5.0, 6.0])
    good_sd = ScoreSet(asv.trial_ids, [1.0] * 8 + [-1.0, -2.0])
    assert metrics.integrated_eer(asv, good_sd)[0] == 0.0
    # reordered SD scores are matched by trial id
    order = np.arange(10)[::-1]
    shuffled = ScoreSet([asv.trial_ids[i] for i in order],
                        good_sd.scores[order])
    assert metrics.integrated_eer(asv, shuffled)[0] == 0.0
    blind_sd = ScoreSet(asv.trial_ids, [1.0] * 10)
    assert metrics.integrated_eer(asv, blind_sd)[0] > 0.0
    with pytest.raises(TrialMismatch):
        metrics.integrated_eer(asv, ScoreSet(asv.trial_ids[:9],
                                             [1.0] * 9))


def test_score_set():
    s = ScoreSet(['a', 'b', 'c'], [1.0, 2.0, 3.0],
                 ['bonafide', 'spoof', 'bonafide'], ['-', 'X', '-'])
    assert len(s) == 3
    pos, neg = s.split()
    assert_array_equal(pos, [1.0, 3.0])
    assert_array_equal(neg, [2.0])
    sub = s.subset([True, False, True])
    assert sub.trial_ids == ['a', 'c'] and sub.attacks == ['-', '-']
    other = ScoreSet(['c', 'a', 'b'], [30.0, 10.0, 20.0])
    assert_array_equal(s.aligned(other), [10.0, 20.0, 30.0])
    with pytest.raises(TrialMismatch):
        ScoreSet(['a'], [1.0, 2.0])
    with pytest.raises(TrialMismatch):
        ScoreSet(['a', 'b'], [1.0, 2.0], ['bonafide'])
    with pytest.raises(NonFiniteScore):
        ScoreSet(['a'], [np.nan])
    with pytest.raises(OneClassOnly):
        ScoreSet(['a'], [1.0]).split()
