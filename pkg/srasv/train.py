'''
Module: srasv.train

Joint training of the multi-task network.

Each step runs a train-mode forward pass, the A-softmax losses of both heads
plus the weight penalty, the backward pass and an Adam update. The network
with the lowest development loss is kept.

Function Listing
================
    AdamState / adam_step

    clip_gradients

    load_dataset

    train_loop

    save_checkpoint / load_checkpoint / load_trunk
'''

import csv
import io
import time
from collections import OrderedDict, namedtuple

import numpy as np

from .utils import (logger, verbose, atomic_write, ShapeMismatch,
                    EmptyDataset, LabelOutOfRange, CorruptCheckpoint)
from .net import (MtlNetwork, network_forward, network_backward,
                  estimate_bn_stats, is_regularized)
from .loss import (head_loss, joint_loss, regularization_grads,
                   class_weights, anneal_beta)
from .feat import read_manifest, read_feature, FEATURE_KINDS
from .proto import read_cm_protocol, SD_LABELS
from . import container

Dataset = namedtuple('Dataset', ['ids', 'features', 'sd_labels',
                                 'asv_labels', 'speakers'])


class AdamState(object):
    """First and second moment estimates plus the step counter"""

    def __init__(self, params):
        self.m = OrderedDict((k, np.zeros_like(v)) for k, v in params.items())
        self.v = OrderedDict((k, np.zeros_like(v)) for k, v in params.items())
        self.t = 0


def adam_step(params, grads, state, cfg):
    """One bias-corrected Adam update, in place

    Parameters
    ----------
    params : dict of name -> ndarray
        Updated in place; names absent from grads are left alone.
    grads : dict of name -> ndarray
    state : AdamState
    cfg : dict
        alpha, beta1, beta2, eps.

    Returns
    -------
    params, state
    """
    for k, g in grads.items():
        if k not in params or params[k].shape != g.shape:
            raise ShapeMismatch('Gradient %s does not match its parameter' %
                                k)
    state.t += 1
    b1, b2 = cfg['beta1'], cfg['beta2']
    lr = cfg['alpha'] * np.sqrt(1 - b2 ** state.t) / (1 - b1 ** state.t)
    for k, g in grads.items():
        m = state.m.setdefault(k, np.zeros_like(params[k]))
        v = state.v.setdefault(k, np.zeros_like(params[k]))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        params[k] -= (lr * m / (np.sqrt(v) + cfg['eps'])).astype(
            params[k].dtype)
    return params, state


def clip_gradients(grads, max_norm):
    """Scale all gradients so their global norm is at most max_norm"""
    if not max_norm:
        return grads, None
    norm = np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64)))
                       for g in grads.values()))
    if norm > max_norm:
        for k in grads:
            grads[k] *= max_norm / norm
    return grads, norm


def load_dataset(feature_manifest, cm_protocol, speakers=None):
    '''
    Features and labels of the utterances listed in a CM protocol.

    Parameters
    ----------
    feature_manifest : str
        "utt_id path" manifest of cached features.
    cm_protocol : str
    speakers : list | None
        Speaker index order. None takes the sorted protocol speakers (the
        training set); otherwise speakers outside the list get label -1.

    Returns
    -------
    data : Dataset
    '''
    paths = dict(read_manifest(feature_manifest))
    entries = read_cm_protocol(cm_protocol)
    if speakers is None:
        speakers = sorted(set(e.speaker for e in entries))
    index = dict((s, i) for i, s in enumerate(speakers))
    feats = []
    for e in entries:
        if e.utt not in paths:
            raise EmptyDataset('No cached feature for %s' % e.utt)
        feats.append(read_feature(paths[e.utt])[0])
    features = np.stack(feats) if feats else np.zeros((0, 0, 0), np.float32)
    return Dataset([e.utt for e in entries], features,
                   np.array([SD_LABELS[e.key] for e in entries], dtype=int),
                   np.array([index.get(e.speaker, -1) for e in entries],
                            dtype=int),
                   list(speakers))


def _batch_loss(net, x, sd, asv, params, weights, beta, mode, rng):
    """Joint loss of a batch and, in train mode, the upstream gradients"""
    feats = {}
    _, _, _, trace = network_forward(x, net, mode, rng, features_out=feats)
    task_weight = dict(sd=params['sdWeight'], asv=params['asvWeight'])
    losses = dict(sd=0.0, asv=0.0)
    upstream = {}
    for head in net.heads:
        labels = sd if head == 'sd' else asv
        rows = labels >= 0
        if not np.any(rows):
            continue
        loss, (dx, dW, db) = head_loss(net, head, feats[head][rows],
                                       labels[rows], params['margin'],
                                       weights[head], beta)
        losses[head] = loss
        full = np.zeros_like(feats[head])
        full[rows] = dx
        w = task_weight[head]
        upstream[head] = (w * full, w * dW, None if db is None else w * db)
    total = joint_loss(losses['sd'], losses['asv'],
                       [v for k, v in net.params.items() if is_regularized(k)],
                       params['lambdaReg'], task_weight['sd'],
                       task_weight['asv'])
    return total, trace, upstream


def _dev_loss(net, dev, params, weights):
    total, n = 0.0, 0
    bs = params['batchSize']
    for start in range(0, len(dev.ids), bs):
        sl = slice(start, start + bs)
        asv = np.where(dev.asv_labels[sl] < net.n_speakers,
                       dev.asv_labels[sl], -1)
        loss, _, _ = _batch_loss(net, dev.features[sl], dev.sd_labels[sl],
                                 asv, params, weights, params['annealFloor'],
                                 'eval', None)
        size = len(dev.ids[sl])
        total += loss * size
        n += size
    return total / n


def _write_log(path, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator='\n')
    writer.writerow(['epoch', 'train_loss', 'dev_loss', 'seconds'])
    for r in rows:
        writer.writerow([r['epoch'], '%.10g' % r['train_loss'],
                         '%.10g' % r['dev_loss'], '%.3f' % r['seconds']])
    atomic_write(path, buf.getvalue(), mode='w')


@verbose
def train_loop(train, net, params, dev=None, log_path=None,
               checkpoint_path=None, verbose=None):
    '''
    Trains the network on a Dataset.

    Mini-batches are drawn from a permutation seeded by params['seed'];
    dropout masks come from a second generator seeded by params['seed'] + 1,
    so (seed, data, params) fully determine the result. With
    params['bnRefresh'] the BN running statistics are re-estimated on the
    whole training set after every epoch, before the dev loss is taken.

    Parameters
    ----------
    train : Dataset
        All speaker labels must lie in [0, net.n_speakers).
    net : MtlNetwork
        Initialized network; it is not modified.
    params : dict
        From generate_parameters.
    dev : Dataset | None
        Development set. Speakers unknown to the network only contribute
        to the SD loss.
    log_path : str | None
        CSV log (epoch, train_loss, dev_loss, seconds) rewritten every epoch.
    checkpoint_path : str | None
        Where the best network is saved whenever it improves.

    Returns
    -------
    best : MtlNetwork
        Lowest dev loss network (last one without dev set).
    log : list of dict
    '''
    if len(train.ids) == 0:
        raise EmptyDataset('Training set is empty')
    for labels, width, what in ((train.sd_labels, 2, 'SD'),
                                (train.asv_labels, net.n_speakers, 'speaker')):
        if labels.min() < 0 or labels.max() >= width:
            raise LabelOutOfRange('%s labels must lie in [0, %d)' %
                                  (what, width))

    net = net.copy()
    weights = dict(sd=None, asv=None)
    if params['sdClassWeights']:
        weights['sd'] = class_weights(np.bincount(train.sd_labels,
                                                  minlength=2))
    if params['asvClassWeights']:
        weights['asv'] = class_weights(np.bincount(train.asv_labels,
                                                   minlength=net.n_speakers))
    shuffle_rng = np.random.RandomState(params['seed'])
    dropout_rng = np.random.RandomState(params['seed'] + 1)
    state = AdamState(OrderedDict((k, v) for k, v in net.params.items()))
    N = len(train.ids)
    bs = params['batchSize']

    best, best_dev, stale = net.copy(), np.inf, 0
    log = []
    for epoch in range(params['nEpochs']):
        start_time = time.time()
        beta = anneal_beta(epoch, params['annealEpochs'],
                           params['annealFloor'])
        order = shuffle_rng.permutation(N)
        total = 0.0
        for start in range(0, N, bs):
            rows = order[start:start + bs]
            loss, trace, upstream = _batch_loss(
                net, train.features[rows], train.sd_labels[rows],
                train.asv_labels[rows], params, weights, beta, 'train',
                dropout_rng)
            if not np.isfinite(loss):
                raise FloatingPointError('Loss became %r at epoch %d' %
                                         (loss, epoch + 1))
            grads = network_backward(trace, upstream)
            regularization_grads(net, grads, params['lambdaReg'])
            grads, norm = clip_gradients(grads, params['clipNorm'])
            adam_step(net.params, grads, state, params)
            total += loss * len(rows)
            logger.debug('epoch %d batch %d: loss %.5f, |g| %s' %
                         (epoch + 1, start // bs, loss, norm))
        train_loss = total / N
        if params['bnRefresh']:
            estimate_bn_stats(net, train.features, bs)
        dev_loss = _dev_loss(net, dev, params, weights) if dev is not None \
            else float('nan')
        log.append(dict(epoch=epoch + 1, train_loss=train_loss,
                        dev_loss=dev_loss,
                        seconds=time.time() - start_time))
        logger.info('Training epoch %d: train %.5f, dev %.5f (beta %.2f)' %
                    (epoch + 1, train_loss, dev_loss, beta))
        if log_path is not None:
            _write_log(log_path, log)

        if dev is None or dev_loss < best_dev:
            best, best_dev, stale = net.copy(), dev_loss, 0
            if checkpoint_path is not None:
                save_checkpoint(best, checkpoint_path)
        else:
            stale += 1
            if params['patience'] and stale >= params['patience']:
                logger.info('No dev improvement for %d epochs, stopping' %
                            stale)
                break
    if params['nEpochs'] == 0 and checkpoint_path is not None:
        save_checkpoint(best, checkpoint_path)
    return best, log


_META = ('in_rows', 'in_frames', 'dropout', 'slope', 'bn_momentum', 'bn_eps',
         'sd_asoftmax', 'asv_asoftmax')


def save_checkpoint(net, path):
    """All parameters and BN statistics as float32 blobs"""
    meta = [net.in_rows, net.in_frames, net.dropout, net.slope,
            net.bn_momentum, net.bn_eps,
            net.output_kind['sd'] == 'asoftmax',
            net.output_kind['asv'] == 'asoftmax']
    blobs = OrderedDict([('meta', np.array(meta, dtype=np.float64))])
    blobs.update(net.params)
    container.save(path, blobs, n_speakers=net.n_speakers,
                   kind=FEATURE_KINDS[net.kind])


def load_checkpoint(path, dtype=None):
    """Rebuild a network from a checkpoint

    The architecture (filters, hidden widths, heads) is read back from the
    blob shapes.
    """
    header, blobs = container.load(path)
    kinds = dict((v, k) for k, v in FEATURE_KINDS.items())
    if 'meta' not in blobs or header['kind'] not in kinds:
        raise CorruptCheckpoint('%s is not a network checkpoint' % path)
    meta = dict(zip(_META, blobs.pop('meta').tolist()))
    filters = []
    while 'block%d.conv0.W' % (len(filters) + 1) in blobs:
        filters.append(blobs['block%d.conv0.W' % (len(filters) + 1)].shape[0])
    heads, hidden = [], dict(sd=(512, 128, 64), asv=(512, 128))
    for head in ('sd', 'asv'):
        widths = []
        while '%s.fc%d.W' % (head, len(widths) + 1) in blobs:
            widths.append(blobs['%s.fc%d.W' % (head,
                                               len(widths) + 1)].shape[1])
        if widths:
            heads.append(head)
            hidden[head] = tuple(widths)
    if not filters or not heads:
        raise CorruptCheckpoint('%s: no trunk or no head found' % path)
    net = MtlNetwork(header['n_speakers'], int(meta['in_rows']),
                     int(meta['in_frames']), kinds[header['kind']], filters,
                     hidden['sd'], hidden['asv'], heads,
                     round(meta['dropout'], 6), round(meta['slope'], 6),
                     round(meta['bn_momentum'], 6), round(meta['bn_eps'], 12),
                     'asoftmax' if meta['sd_asoftmax'] else 'softmax',
                     'asoftmax' if meta['asv_asoftmax'] else 'softmax',
                     dtype or 'float32')
    expected = OrderedDict(net.layout())
    if list(expected) != list(blobs):
        raise CorruptCheckpoint('%s: unexpected blob list' % path)
    for name, shape in expected.items():
        if blobs[name].shape != tuple(shape):
            raise CorruptCheckpoint('%s: blob %s has shape %s, expected %s' %
                                    (path, name, blobs[name].shape, shape))
        net.params[name] = blobs[name].astype(net.dtype)
    return net


def load_trunk(net, path):
    """Copy the shared residual blocks of a checkpoint into net (in place)"""
    _, blobs = container.load(path)
    copied = 0
    for name in net.params:
        if not name.startswith('block'):
            continue
        if name not in blobs or blobs[name].shape != net.params[name].shape:
            raise CorruptCheckpoint('%s: trunk blob %s missing or reshaped' %
                                    (path, name))
        net.params[name] = blobs[name].astype(net.dtype)
        copied += 1
    logger.info('Loaded %d trunk arrays from %s' % (copied, path))
    return net
