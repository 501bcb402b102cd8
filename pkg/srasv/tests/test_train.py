from collections import OrderedDict

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from srasv import container
from srasv.feat import write_feature, write_manifest
from srasv.net import (MtlNetwork, init_params, network_forward,
                       estimate_bn_stats)
from srasv.backend import sd_scores
from srasv.metrics import eer
from srasv.params import generate_parameters
from srasv.proto import CmProtocolEntry, write_cm_protocol
from srasv.train import (Dataset, AdamState, adam_step, clip_gradients,
                         load_dataset, train_loop, save_checkpoint,
                         load_checkpoint, load_trunk)
from srasv.utils import (ShapeMismatch, EmptyDataset, LabelOutOfRange,
                         CorruptCheckpoint)

ROWS, FRAMES = 16, 8


def _toy_net(n_speakers=3, filters=(8,), dropout=0.0, dtype='float64',
             seed=0):
    net = MtlNetwork(n_speakers, ROWS, FRAMES, 'llfb', filters, (32,), (32,),
                     dropout=dropout, bn_momentum=0.5, dtype=dtype)
    return init_params(net, seed, verbose=False)


def _toy_data(n_per_class=4, seed=0, noise_seed=None):
    """Speaker patterns plus a spoofing offset on the upper rows"""
    rng = np.random.RandomState(seed)
    patterns = rng.randn(3, ROWS, FRAMES)
    if noise_seed is not None:
        rng = np.random.RandomState(noise_seed)
    feats, sd, asv, ids = [], [], [], []
    for spk in range(3):
        for label in (0, 1):
            for i in range(n_per_class):
                x = patterns[spk] + 0.3 * rng.randn(ROWS, FRAMES)
                if label == 0:
                    x[:ROWS // 2] += 1.5
                feats.append(x)
                sd.append(label)
                asv.append(spk)
                ids.append('u%d_%d_%d' % (spk, label, i))
    return Dataset(ids, np.array(feats), np.array(sd), np.array(asv),
                   ['s0', 's1', 's2'])


def _params(**kw):
    base = dict(batchSize=8, nEpochs=20, alpha=1e-2, margin=1,
                annealEpochs=0, patience=0, seed=0)
    base.update(kw)
    return generate_parameters(verbose=False, **base)


def test_adam_first_step():
    params = OrderedDict(w=np.array([1.0, -2.0, 0.5]))
    grads = OrderedDict(w=np.array([0.5, -3.0, 0.25]))
    cfg = dict(alpha=0.1, beta1=0.9, beta2=0.999, eps=1e-8)
    state = AdamState(params)
    adam_step(params, grads, state, cfg)
    assert state.t == 1
    # bias-corrected first step moves each coordinate by -alpha sign(g)
    assert_allclose(params['w'], [0.9, -1.9, 0.4], rtol=1e-5)


def test_adam_two_steps():
    params = OrderedDict(w=np.array([0.0]))
    state = AdamState(params)
    cfg = dict(alpha=0.01, beta1=0.9, beta2=0.999, eps=1e-8)
    g1, g2 = 1.0, -2.0
    adam_step(params, OrderedDict(w=np.array([g1])), state, cfg)
    adam_step(params, OrderedDict(w=np.array([g2])), state, cfg)
    m = 0.9 * 0.1 * g1 + 0.1 * g2
    v = 0.999 * 0.001 * g1 ** 2 + 0.001 * g2 ** 2
    step2 = 0.01 * np.sqrt(1 - 0.999 ** 2) / (1 - 0.9 ** 2) * m / np.sqrt(v)
    assert_allclose(params['w'], [-0.01 - step2], rtol=1e-5)


def test_adam_shape_mismatch():
    params = OrderedDict(w=np.zeros(3))
    state = AdamState(params)
    cfg = dict(alpha=0.1, beta1=0.9, beta2=0.999, eps=1e-8)
    with pytest.raises(ShapeMismatch):
        adam_step(params, OrderedDict(w=np.zeros(4)), state, cfg)
    with pytest.raises(ShapeMismatch):
        adam_step(params, OrderedDict(other=np.zeros(3)), state, cfg)
    assert state.t == 0


def test_clip_gradients():
    grads = OrderedDict(a=np.array([3.0, 0.0]), b=np.array([4.0]))
    grads, norm = clip_gradients(grads, 1.0)
    assert norm == 5.0
    assert_allclose(grads['a'], [0.6, 0.0])
    assert_allclose(grads['b'], [0.8])
    grads, norm = clip_gradients(OrderedDict(a=np.array([0.3])), 1.0)
    assert_allclose(grads['a'], [0.3])
    grads, norm = clip_gradients(OrderedDict(a=np.array([30.0])), 0)
    assert norm is None and grads['a'][0] == 30.0


def test_zero_epochs_returns_initial_net(tmp_path):
    net = _toy_net()
    path = str(tmp_path / 'model.srnn')
    best, log = train_loop(_toy_data(), net, _params(nEpochs=0),
                           checkpoint_path=path, verbose=False)
    assert log == []
    for k in net.params:
        assert_array_equal(best.params[k], net.params[k])
    assert list(load_checkpoint(path).params) == list(net.params)


def test_training_is_deterministic():
    net = _toy_net(dropout=0.5)
    data = _toy_data()
    p = _params(nEpochs=3)
    a, log_a = train_loop(data, net, p, verbose=False)
    b, log_b = train_loop(data, net, p, verbose=False)
    for k in net.params:
        assert_array_equal(a.params[k], b.params[k])
    assert [r['train_loss'] for r in log_a] == [r['train_loss']
                                                for r in log_b]
    # the input network is left untouched
    fresh = _toy_net(dropout=0.5)
    for k in net.params:
        assert_array_equal(net.params[k], fresh.params[k])
    c, _ = train_loop(data, net, _params(nEpochs=3, seed=1), verbose=False)
    assert not np.array_equal(a.params['block1.conv0.W'],
                              c.params['block1.conv0.W'])


def test_training_reduces_loss(tmp_path):
    data = _toy_data()
    log_path = str(tmp_path / 'log.csv')
    best, log = train_loop(data, _toy_net(), _params(), dev=data,
                           log_path=log_path, verbose=False)
    assert len(log) == 20
    assert log[-1]['train_loss'] < log[0]['train_loss']
    assert min(r['dev_loss'] for r in log) < log[0]['dev_loss']
    with open(log_path) as f:
        lines = f.read().splitlines()
    assert lines[0] == 'epoch,train_loss,dev_loss,seconds'
    assert len(lines) == 21
    sd_logits, asv_logits, _, _ = network_forward(data.features, best)
    assert np.mean(np.argmax(sd_logits, axis=1) == data.sd_labels) > 0.5


def test_early_stopping():
    data = _toy_data()
    # dev labels are the inverse of what the network learns
    dev = data._replace(sd_labels=1 - data.sd_labels,
                        asv_labels=(data.asv_labels + 1) % 3)
    _, log = train_loop(data, _toy_net(), _params(nEpochs=20, patience=2),
                        dev=dev, verbose=False)
    assert len(log) < 20


def test_dataset_errors():
    data = _toy_data()
    net = _toy_net()
    empty = Dataset([], np.zeros((0, ROWS, FRAMES)), np.zeros(0, int),
                    np.zeros(0, int), [])
    with pytest.raises(EmptyDataset):
        train_loop(empty, net, _params(), verbose=False)
    bad = data._replace(asv_labels=data.asv_labels + 1)
    with pytest.raises(LabelOutOfRange):
        train_loop(bad, net, _params(), verbose=False)
    bad = data._replace(sd_labels=data.sd_labels * 2)
    with pytest.raises(LabelOutOfRange):
        train_loop(bad, net, _params(), verbose=False)


def test_checkpoint_roundtrip(tmp_path):
    net = _toy_net(dtype='float32', dropout=0.5, seed=3)
    path = str(tmp_path / 'model.srnn')
    save_checkpoint(net, path)
    loaded = load_checkpoint(path)
    assert loaded.filters == net.filters
    assert loaded.hidden == net.hidden
    assert loaded.n_speakers == 3 and loaded.kind == 'llfb'
    assert loaded.dropout == 0.5 and loaded.bn_eps == net.bn_eps
    assert loaded.bn_momentum == net.bn_momentum
    for k in net.params:
        assert_array_equal(loaded.params[k], net.params[k])
    x = np.random.RandomState(0).randn(2, ROWS, FRAMES)
    for a, b in zip(network_forward(x, net)[:3],
                    network_forward(x, loaded)[:3]):
        assert_array_equal(a, b)
    assert load_checkpoint(path, dtype='float64').dtype == np.float64


def test_checkpoint_corruption(tmp_path):
    path = str(tmp_path / 'model.srnn')
    save_checkpoint(_toy_net(), path)
    with open(path, 'rb') as f:
        data = bytearray(f.read())
    data[len(data) // 2] ^= 0xFF
    bad = str(tmp_path / 'bad.srnn')
    with open(bad, 'wb') as f:
        f.write(bytes(data))
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(bad)
    plain = str(tmp_path / 'plain.srnn')
    container.save(plain, OrderedDict(w=np.zeros(3, np.float32)))
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(plain)


def test_load_trunk(tmp_path):
    source = _toy_net(seed=1)
    path = str(tmp_path / 'model.srnn')
    save_checkpoint(source, path)
    target = _toy_net(n_speakers=5, seed=2)
    before = target.params['asv.out.W'].copy()
    load_trunk(target, path)
    for k in source.params:
        if k.startswith('block'):
            assert_allclose(target.params[k], source.params[k], rtol=1e-6)
    assert_array_equal(target.params['asv.out.W'], before)
    with pytest.raises(CorruptCheckpoint):
        load_trunk(_toy_net(filters=(16,)), path)


def test_load_dataset(tmp_path):
    rng = np.random.RandomState(0)
    entries = [CmProtocolEntry('A', 'a1', '-', 'bonafide'),
               CmProtocolEntry('B', 'b1', 'clip', 'spoof'),
               CmProtocolEntry('A', 'a2', 'echo', 'spoof')]
    manifest = []
    for e in entries:
        path = str(tmp_path / (e.utt + '.feat'))
        write_feature(path, rng.randn(ROWS, FRAMES).astype(np.float32),
                      'llfb')
        manifest.append((e.utt, path))
    write_manifest(str(tmp_path / 'feats.txt'), manifest)
    write_cm_protocol(str(tmp_path / 'cm.txt'), entries)
    data = load_dataset(str(tmp_path / 'feats.txt'), str(tmp_path / 'cm.txt'))
    assert data.ids == ['a1', 'b1', 'a2']
    assert data.features.shape == (3, ROWS, FRAMES)
    assert_array_equal(data.sd_labels, [1, 0, 0])
    assert_array_equal(data.asv_labels, [0, 1, 0])
    assert data.speakers == ['A', 'B']
    dev = load_dataset(str(tmp_path / 'feats.txt'), str(tmp_path / 'cm.txt'),
                       speakers=['B'])
    assert_array_equal(dev.asv_labels, [-1, 0, -1])
    write_manifest(str(tmp_path / 'short.txt'), manifest[:2])
    with pytest.raises(EmptyDataset):
        load_dataset(str(tmp_path / 'short.txt'), str(tmp_path / 'cm.txt'))


def test_pruned_asv_head_changes_sd_model():
    data = _toy_data()
    joint = _toy_net()
    pruned = init_params(MtlNetwork(3, ROWS, FRAMES, 'llfb', (8,), (32,),
                                    (32,), heads=('sd',), dropout=0.0,
                                    bn_momentum=0.5, dtype='float64'), 0,
                         verbose=False)
    # same seed: the shared layers start equal
    assert_array_equal(joint.params['block1.conv0.W'],
                       pruned.params['block1.conv0.W'])
    a, _ = train_loop(data, joint, _params(nEpochs=2), verbose=False)
    b, _ = train_loop(data, pruned, _params(nEpochs=2), verbose=False)
    assert 'asv.out.W' not in b.params
    assert not np.allclose(a.params['sd.fc1.W'], b.params['sd.fc1.W'])


def _sd_eer(net, data):
    scores = sd_scores(data.features, net)
    bona = data.sd_labels == 1
    return eer(scores[bona], scores[~bona])[0]


def test_joint_training_keeps_sd_eer():
    data = _toy_data()
    held_out = _toy_data(n_per_class=6, noise_seed=7)
    joint = _toy_net()
    pruned = init_params(MtlNetwork(3, ROWS, FRAMES, 'llfb', (8,), (32,),
                                    (32,), heads=('sd',), dropout=0.0,
                                    bn_momentum=0.5, dtype='float64'), 0,
                         verbose=False)
    a, _ = train_loop(data, joint, _params(), verbose=False)
    b, _ = train_loop(data, pruned, _params(), verbose=False)
    joint_eer, pruned_eer = _sd_eer(a, held_out), _sd_eer(b, held_out)
    assert joint_eer <= pruned_eer + 0.01
    assert joint_eer < 0.25


def test_bn_statistics_refreshed_each_epoch():
    data = _toy_data()
    net = _toy_net()
    refreshed, _ = train_loop(data, net, _params(nEpochs=2), verbose=False)
    expected = estimate_bn_stats(refreshed.copy(), data.features, 8)
    for key in ('block1.bn1.mean', 'block1.bn2.var', 'block1.bn3.mean'):
        assert_allclose(refreshed.params[key], expected.params[key],
                        rtol=1e-10, atol=1e-12)
    momentum, _ = train_loop(data, net, _params(nEpochs=2, bnRefresh=False),
                             verbose=False)
    assert not np.allclose(momentum.params['block1.bn1.mean'],
                           expected.params['block1.bn1.mean'])
