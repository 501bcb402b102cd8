"""
Multi-task network: a shared trunk of residual convolutional blocks with
Max-Feature-Map (MFM) activations, reshape/average pooling, and two fully
connected heads (spoofing detection 'sd', speaker classification 'asv').

Tensors are laid out (batch, channel, frequency, time). Every layer keeps the
cache its backward pass needs; caches live in a ForwardTrace returned by a
train-mode forward.

License : BSD 3-clause
"""

from collections import OrderedDict, namedtuple

import numpy as np

from .utils import logger, verbose, OddChannels, ShapeMismatch, MissingTrace
from .params import frames_after_trunk

__all__ = ['MtlNetwork', 'ResBlockSpec', 'ForwardTrace', 'mfm',
           'residual_block_forward', 'network_forward', 'network_backward',
           'estimate_bn_stats', 'init_params', 'param_count', 'is_trainable',
           'is_regularized']

ResBlockSpec = namedtuple('ResBlockSpec', ['in_channels', 'filters', 'stride'])

_INNER = (('1', 'nin1'), ('2', 'conv2'), ('3', 'nin3'))


class MtlNetwork(object):
    """Architecture description plus all named parameter arrays

    Parameters
    ----------
    n_speakers : int
        Width of the speaker classification output.
    in_rows, in_frames : int
        Input geometry (864 x 400 for CQT, 80 x 400 for LLFB).
    kind : 'cqt' | 'llfb'
    filters : sequence of int
        Pre-MFM filters of each residual block (32, 64, 128).
    sd_hidden, asv_hidden : sequence of int
        Hidden FC widths of the two heads.
    heads : sequence of 'sd', 'asv'
        Pruned heads allocate nothing.
    """

    def __init__(self, n_speakers, in_rows=864, in_frames=400, kind='cqt',
                 filters=(32, 64, 128), sd_hidden=(512, 128, 64),
                 asv_hidden=(512, 128), heads=('sd', 'asv'), dropout=0.3,
                 slope=0.01, bn_momentum=0.9, bn_eps=1e-5,
                 sd_loss='asoftmax', asv_loss='asoftmax', dtype='float32'):
        self.n_speakers = int(n_speakers)
        self.in_rows = int(in_rows)
        self.in_frames = int(in_frames)
        self.kind = kind
        self.filters = tuple(int(f) for f in filters)
        self.hidden = dict(sd=tuple(sd_hidden), asv=tuple(asv_hidden))
        self.heads = tuple(h for h in ('sd', 'asv') if h in heads)
        self.dropout = float(dropout)
        self.slope = float(slope)
        self.bn_momentum = float(bn_momentum)
        self.bn_eps = float(bn_eps)
        self.output_kind = dict(sd=sd_loss, asv=asv_loss)
        self.dtype = np.dtype(dtype)
        self.params = OrderedDict((name, np.zeros(shape, dtype=self.dtype))
                                  for name, shape in self.layout())

    @classmethod
    def from_params(cls, params, n_speakers):
        """Build from a generate_parameters() dictionary"""
        if params['features'] == 'cqt':
            rows = params['octaves'] * params['binsPerOctave']
        else:
            rows = params['nFilters']
        return cls(n_speakers, rows, params['targetFrames'],
                   params['features'], params['filters'], params['sdHidden'],
                   params['asvHidden'], params['heads'], params['dropout'],
                   params['lreluSlope'], params['bnMomentum'],
                   params['bnEps'], params['sdLoss'], params['asvLoss'],
                   params['dtype'])

    @property
    def out_widths(self):
        return dict(sd=2, asv=self.n_speakers)

    @property
    def embedding_dim(self):
        return self.hidden['asv'][-1]

    def block_specs(self):
        specs = []
        channels = 1
        for f in self.filters:
            specs.append(ResBlockSpec(channels, f, 2))
            channels = f // 2
        return specs

    def trunk_shapes(self):
        """(channels, rows, frames) after each residual block"""
        rows, frames = self.in_rows, self.in_frames
        shapes = []
        for b, f in enumerate(self.filters):
            rows = frames_after_trunk(rows, 1)
            frames = frames_after_trunk(frames, 1)
            shapes.append((f // 2, rows, frames))
        return shapes

    @property
    def pooled_dim(self):
        channels, _, frames = self.trunk_shapes()[-1]
        return channels * frames

    def layout(self):
        """Ordered (name, shape) of every parameter array"""
        out = []
        for b, spec in enumerate(self.block_specs()):
            prefix = 'block%d.' % (b + 1)
            half = spec.filters // 2
            out.append((prefix + 'conv0.W', (spec.filters, spec.in_channels,
                                             3, 3)))
            out.append((prefix + 'conv0.b', (spec.filters,)))
            for stage, layer in _INNER:
                bn = prefix + 'bn' + stage + '.'
                for stat in ('gamma', 'beta', 'mean', 'var'):
                    out.append((bn + stat, (half,)))
                k = 3 if layer == 'conv2' else 1
                out.append((prefix + layer + '.W', (spec.filters, half, k, k)))
                out.append((prefix + layer + '.b', (spec.filters,)))
        for head in self.heads:
            width = self.pooled_dim
            for i, n in enumerate(self.hidden[head]):
                name = '%s.fc%d.' % (head, i + 1)
                out.append((name + 'W', (width, n)))
                out.append((name + 'b', (n,)))
                width = n
            out.append((head + '.out.W', (width, self.out_widths[head])))
            out.append((head + '.out.b', (self.out_widths[head],)))
        return out

    def copy(self):
        other = MtlNetwork.__new__(MtlNetwork)
        other.__dict__.update(self.__dict__)
        other.hidden = dict(self.hidden)
        other.output_kind = dict(self.output_kind)
        other.params = OrderedDict((k, v.copy())
                                   for k, v in self.params.items())
        return other

    def astype(self, dtype):
        other = self.copy()
        other.dtype = np.dtype(dtype)
        for k in other.params:
            other.params[k] = other.params[k].astype(other.dtype)
        return other

    def output_logits(self, head, x):
        """Cosine logits |x| cos(theta_j) under A-softmax, xW + b otherwise"""
        W = self.params[head + '.out.W']
        if self.output_kind[head] == 'asoftmax':
            return x @ (W / np.linalg.norm(W, axis=0, keepdims=True))
        return x @ W + self.params[head + '.out.b']


class ForwardTrace(object):
    """Caches of a train-mode forward pass"""

    def __init__(self, net, mode):
        self.net = net
        self.mode = mode
        self.blocks = []
        self.heads = {}
        self.features = {}
        self.masks = []
        self.trunk_shape = None

    def signature(self):
        """Concatenated LReLU and MFM switch patterns"""
        return np.concatenate([m.ravel() for m in self.masks])


def is_trainable(name):
    return not (name.endswith('.mean') or name.endswith('.var'))


def is_regularized(name):
    return name.endswith('.W')


# ---------------------------------------------------------------- layers

def _conv_forward(x, W, b, stride):
    F, C, kh, kw = W.shape
    pad = kh // 2
    N, _, H, Wd = x.shape
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (Wd + 2 * pad - kw) // stride + 1
    if pad:
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    else:
        xp = x
    out = np.zeros((F, N, Ho, Wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i:i + stride * (Ho - 1) + 1:stride,
                       j:j + stride * (Wo - 1) + 1:stride]
            out += np.tensordot(W[:, :, i, j], patch, axes=([1], [1]))
    out = out.transpose(1, 0, 2, 3) + b[None, :, None, None]
    return np.ascontiguousarray(out), (xp, W, stride, pad, x.shape)


def _conv_backward(dout, cache):
    xp, W, stride, pad, shape = cache
    F, C, kh, kw = W.shape
    Ho, Wo = dout.shape[2], dout.shape[3]
    dxp = np.zeros_like(xp)
    dW = np.zeros_like(W)
    for i in range(kh):
        for j in range(kw):
            sl = (slice(None), slice(None),
                  slice(i, i + stride * (Ho - 1) + 1, stride),
                  slice(j, j + stride * (Wo - 1) + 1, stride))
            dW[:, :, i, j] = np.tensordot(dout, xp[sl],
                                          axes=([0, 2, 3], [0, 2, 3]))
            dxp[sl] += np.tensordot(W[:, :, i, j], dout,
                                    axes=([0], [1])).transpose(1, 0, 2, 3)
    db = dout.sum(axis=(0, 2, 3))
    dx = dxp[:, :, pad:pad + shape[2], pad:pad + shape[3]]
    return dx, dW, db


def mfm(t, axis=-3):
    """Max-Feature-Map: elementwise max of the two channel halves

    Parameters
    ----------
    t : ndarray
        Channel axis `axis` (default: third from last, i.e. C of (C, H, W)
        or (N, C, H, W)) must have an even size 2k.

    Returns
    -------
    out : ndarray
        k channels, out[c] = max(t[c], t[c + k]).
    """
    t = np.asarray(t)
    if t.ndim == 0 or t.shape[axis] % 2:
        raise OddChannels('MFM needs an even channel count, got %s' %
                          (t.shape[axis] if t.ndim else 'a scalar'))
    first, second = np.split(t, 2, axis=axis)
    return np.maximum(first, second)


def _mfm_forward(x):
    if x.shape[1] % 2:
        raise OddChannels('MFM needs an even channel count, got %d' %
                          x.shape[1])
    k = x.shape[1] // 2
    mask = x[:, :k] >= x[:, k:]
    return np.where(mask, x[:, :k], x[:, k:]), mask


def _mfm_backward(dout, mask):
    # ties go to the first half
    return np.concatenate([dout * mask, dout * ~mask], axis=1)


def _bn_forward(x, gamma, beta, mean, var, eps, train):
    if train:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None, None]) * inv[None, :, None, None]
    out = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return out, (xhat, gamma, inv, mean, var)


def _bn_backward(dout, cache):
    xhat, gamma, inv, _, _ = cache
    M = dout.shape[0] * dout.shape[2] * dout.shape[3]
    dbeta = dout.sum(axis=(0, 2, 3))
    dgamma = (dout * xhat).sum(axis=(0, 2, 3))
    dxhat = dout * gamma[None, :, None, None]
    dx = (inv[None, :, None, None] / M) * (
        M * dxhat - dxhat.sum(axis=(0, 2, 3))[None, :, None, None] -
        xhat * (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None])
    return dx, dgamma, dbeta


def _lrelu_forward(x, slope):
    mask = x > 0
    return np.where(mask, x, slope * x), mask


def _lrelu_backward(dout, mask, slope):
    return np.where(mask, dout, slope * dout)


def _block_forward(x, p, prefix, spec, slope, eps, train, masks=None):
    caches = {}
    h, caches['conv0'] = _conv_forward(x, p[prefix + 'conv0.W'],
                                       p[prefix + 'conv0.b'], spec.stride)
    e, caches['mfm0'] = _mfm_forward(h)
    h = e
    for stage, layer in _INNER:
        bn = prefix + 'bn' + stage + '.'
        h, caches['bn' + stage] = _bn_forward(
            h, p[bn + 'gamma'], p[bn + 'beta'], p[bn + 'mean'],
            p[bn + 'var'], eps, train)
        h, caches['act' + stage] = _lrelu_forward(h, slope)
        h, caches[layer] = _conv_forward(h, p[prefix + layer + '.W'],
                                         p[prefix + layer + '.b'], 1)
        h, caches['mfm' + stage] = _mfm_forward(h)
    if masks is not None:
        masks.append(caches['mfm0'])
        for stage, _ in _INNER:
            masks.extend([caches['act' + stage], caches['mfm' + stage]])
    if e.shape != h.shape:
        raise ShapeMismatch('Residual operands differ: %s vs %s' %
                            (e.shape, h.shape))
    return e + h, caches


def _block_backward(dout, caches, prefix, slope, grads):
    dh = dout
    for stage, layer in reversed(_INNER):
        dh = _mfm_backward(dh, caches['mfm' + stage])
        dh, dW, db = _conv_backward(dh, caches[layer])
        grads[prefix + layer + '.W'] += dW
        grads[prefix + layer + '.b'] += db
        dh = _lrelu_backward(dh, caches['act' + stage], slope)
        dh, dgamma, dbeta = _bn_backward(dh, caches['bn' + stage])
        grads[prefix + 'bn' + stage + '.gamma'] += dgamma
        grads[prefix + 'bn' + stage + '.beta'] += dbeta
    dh = _mfm_backward(dout + dh, caches['mfm0'])
    dx, dW, db = _conv_backward(dh, caches['conv0'])
    grads[prefix + 'conv0.W'] += dW
    grads[prefix + 'conv0.b'] += db
    return dx


def residual_block_forward(x, spec, params, slope=0.01, eps=1e-5,
                           prefix=''):
    """Eval-mode residual block

    entry = MFM(conv 3x3, stride 2); inner = three pre-activation stages
    [BN, LReLU, conv, MFM] with 1x1, 3x3 and 1x1 kernels; output is
    entry + inner(entry).

    Parameters
    ----------
    x : ndarray, shape (N, in_channels, H, W)
    spec : ResBlockSpec
    params : dict
        Block parameters named 'conv0.W', 'bn1.gamma', ..., 'nin3.b',
        optionally behind `prefix`.
    """
    x = np.asarray(x)
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise ShapeMismatch('Block expects (N, %d, H, W), got %s' %
                            (spec.in_channels, x.shape))
    out, _ = _block_forward(x, params, prefix, spec, slope, eps, False)
    return out


# --------------------------------------------------------------- network

def _as_rng(rng):
    if isinstance(rng, np.random.RandomState):
        return rng
    return np.random.RandomState(0 if rng is None else rng)


def network_forward(features, net, mode='eval', rng=None, features_out=None):
    """Forward pass of the multi-task network

    Parameters
    ----------
    features : ndarray, shape (rows, frames) or (N, rows, frames)
    net : MtlNetwork
    mode : 'eval' | 'train'
        Train mode uses batch statistics, draws dropout masks from `rng` and
        returns a ForwardTrace.
    rng : RandomState | int | None
        Dropout mask source (seed 0 if None).
    features_out : dict | None
        If given, receives head -> (N, width) inputs of each output layer.

    Returns
    -------
    sd_logits : ndarray, shape (N, 2) or None
    asv_logits : ndarray, shape (N, n_speakers) or None
    embedding : ndarray, shape (N, embedding_dim) or None
        ASV head activation after the last hidden LReLU, before dropout.
    trace : ForwardTrace or None
    """
    if mode not in ('eval', 'train'):
        raise ValueError('mode must be eval or train')
    x = np.asarray(features, dtype=net.dtype)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3 or x.shape[1:] != (net.in_rows, net.in_frames):
        raise ShapeMismatch('Network expects (N, %d, %d), got %s' %
                            (net.in_rows, net.in_frames,
                             np.asarray(features).shape))
    train = mode == 'train'
    trace = ForwardTrace(net, mode) if train else None
    rng = _as_rng(rng) if train else None
    p = net.params

    h = x[:, None]
    for b, spec in enumerate(net.block_specs()):
        h, caches = _block_forward(h, p, 'block%d.' % (b + 1), spec,
                                   net.slope, net.bn_eps, train,
                                   trace.masks if train else None)
        if train:
            trace.blocks.append(caches)
    N, C, H, W = h.shape
    # merge (time x channel) per frequency row, then average the rows
    pooled = h.mean(axis=2).transpose(0, 2, 1).reshape(N, W * C)
    if train:
        trace.trunk_shape = h.shape

    logits = dict(sd=None, asv=None)
    penultimate = {}
    embedding = None
    for head in net.heads:
        z = pooled
        caches = []
        for i in range(len(net.hidden[head])):
            name = '%s.fc%d.' % (head, i + 1)
            W_fc = p[name + 'W']
            z_in = z
            z, act = _lrelu_forward(z_in @ W_fc + p[name + 'b'], net.slope)
            if head == 'asv' and i == len(net.hidden[head]) - 1:
                embedding = z
            drop = None
            if train:
                keep = 1.0 - net.dropout
                drop = (rng.rand(*z.shape) >= net.dropout) / keep
                drop = drop.astype(net.dtype)
                z = z * drop
                trace.masks.append(act)
            caches.append((name, z_in, act, drop))
        logits[head] = net.output_logits(head, z)
        penultimate[head] = z
        if train:
            trace.heads[head] = caches
            trace.features[head] = z

    if features_out is not None:
        features_out.update(penultimate)
    if single:
        logits = dict((k, None if v is None else v[0])
                      for k, v in logits.items())
        embedding = None if embedding is None else embedding[0]
    return logits['sd'], logits['asv'], embedding, trace


def network_backward(trace, upstream, update_stats=True):
    """Gradients of every trainable parameter

    Parameters
    ----------
    trace : ForwardTrace
        From network_forward(..., mode='train').
    upstream : dict
        head -> (d_features, d_out_W, d_out_b): gradient of the loss with
        respect to the head's penultimate features and its output layer, as
        returned by the loss functions. Heads missing from the dict receive
        zero gradient.
    update_stats : bool
        Apply the momentum rule to the BN running statistics of trace.net.

    Returns
    -------
    grads : OrderedDict
        name -> gradient for every parameter except BN running statistics.
    """
    if not isinstance(trace, ForwardTrace) or trace.mode != 'train':
        raise MissingTrace('network_backward needs a train-mode trace')
    net = trace.net
    grads = OrderedDict((k, np.zeros_like(v)) for k, v in net.params.items()
                        if is_trainable(k))
    N, C, H, W = trace.trunk_shape
    dpooled = np.zeros((N, W * C), dtype=net.dtype)

    for head, (dfeat, dW, db) in upstream.items():
        if head not in trace.heads:
            raise ShapeMismatch('No %s head in this network' % head)
        grads[head + '.out.W'] += dW
        if db is not None:
            grads[head + '.out.b'] += db
        dz = dfeat
        for name, z_in, act, drop in reversed(trace.heads[head]):
            dz = _lrelu_backward(dz * drop, act, net.slope)
            grads[name + 'W'] += z_in.T @ dz
            grads[name + 'b'] += dz.sum(axis=0)
            dz = dz @ net.params[name + 'W'].T
        dpooled += dz

    dh = dpooled.reshape(N, W, C).transpose(0, 2, 1)[:, :, None, :] / H
    dh = np.repeat(dh, H, axis=2)
    for b in reversed(range(len(trace.blocks))):
        dh = _block_backward(dh, trace.blocks[b], 'block%d.' % (b + 1),
                             net.slope, grads)

    if update_stats:
        m = net.bn_momentum
        for b, caches in enumerate(trace.blocks):
            for stage, _ in _INNER:
                bn = 'block%d.bn%s.' % (b + 1, stage)
                _, _, _, mean, var = caches['bn' + stage]
                net.params[bn + 'mean'] = (m * net.params[bn + 'mean'] +
                                           (1 - m) * mean).astype(net.dtype)
                net.params[bn + 'var'] = (m * net.params[bn + 'var'] +
                                          (1 - m) * var).astype(net.dtype)
    return grads


def estimate_bn_stats(net, features, batch_size=32):
    """Replace the BN running statistics by training-set estimates

    Every batch goes through a train-mode forward pass. The new running mean
    of a BN layer is the size-weighted average of its batch means; the new
    running variance is the average batch variance plus the spread of the
    batch means around that average.

    Parameters
    ----------
    net : MtlNetwork
        Updated in place.
    features : ndarray, shape (N, rows, frames)

    Returns
    -------
    net : MtlNetwork
    """
    x = np.asarray(features)
    if x.ndim != 3 or x.shape[0] == 0:
        raise ShapeMismatch('BN statistics need an (N, rows, frames) batch')
    moments = OrderedDict()
    for start in range(0, x.shape[0], batch_size):
        batch = x[start:start + batch_size]
        _, _, _, trace = network_forward(batch, net, 'train', 0)
        n = batch.shape[0]
        for b, caches in enumerate(trace.blocks):
            for stage, _ in _INNER:
                bn = 'block%d.bn%s.' % (b + 1, stage)
                _, _, _, mean, var = caches['bn' + stage]
                mean = mean.astype(np.float64)
                m1, m2 = moments.get(bn, (0.0, 0.0))
                moments[bn] = (m1 + n * mean,
                               m2 + n * (var.astype(np.float64) + mean ** 2))
    N = float(x.shape[0])
    for bn, (m1, m2) in moments.items():
        mean = m1 / N
        net.params[bn + 'mean'] = mean.astype(net.dtype)
        net.params[bn + 'var'] = np.maximum(m2 / N - mean ** 2,
                                            0.0).astype(net.dtype)
    return net


@verbose
def init_params(net, seed=0, verbose=None):
    """He-normal initialization, in layout order

    Conv/NIN/FC weights ~ Normal(0, sqrt(2 / fan_in)); biases 0; BN scale 1,
    shift 0, running mean 0, running variance 1.
    """
    rng = np.random.RandomState(seed)
    for name, shape in net.layout():
        stat = name.rsplit('.', 1)[1]
        if stat == 'W':
            fan_in = shape[0] if len(shape) == 2 else int(np.prod(shape[1:]))
            value = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        elif stat in ('gamma', 'var'):
            value = np.ones(shape)
        else:
            value = np.zeros(shape)
        net.params[name] = value.astype(net.dtype)
    logger.info('Initialized %d parameter arrays (seed %d)' %
                (len(net.params), seed))
    return net


def param_count(net):
    """Per-layer and total parameter counts

    BN layers count gamma, beta and both running statistics. Blocks are
    reported whole ('block1'), FC layers individually ('sd.fc1', 'asv.out').

    Returns
    -------
    counts : OrderedDict
        Ends with the 'total' entry.
    """
    counts = OrderedDict()
    for name, shape in net.layout():
        group = name.split('.')[0]
        if not group.startswith('block'):
            group = '.'.join(name.split('.')[:2])
        counts[group] = counts.get(group, 0) + int(np.prod(shape))
    counts['total'] = sum(counts.values())
    return counts
