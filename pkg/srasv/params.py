# -*- coding: utf-8 -*-
"""
Module: srasv.params

Parameter dictionaries shared by the whole pipeline.

Every module reads its settings from one flat dictionary produced by
generate_parameters(). Keys are matched case-insensitively and with or
without underscores, so ``batch_size=8``, ``batchSize=8`` and ``BATCHSIZE=8``
all land on ``params['batchSize']``. The same keys can be written to a plain
``key=value`` text file and read back with read_config().

Function Listing
================
    generate_parameters

    read_config

    write_config

    cqt_params, llfb_params, tdcf_params, synth_spec
"""

import math

from .utils import logger, verbose, atomic_write

_DEFAULTS = [
    # front-end
    ('Fs', 16000),
    ('features', 'cqt'),
    ('octaves', 9),
    ('binsPerOctave', 96),
    ('hopMs', 8.0),
    ('cqtSparsity', 1e-3),
    ('resamplePeriod', 16),
    ('nFilters', 80),
    ('frameMs', 20.0),
    ('shiftMs', 10.0),
    ('nfft', 512),
    ('logFloor', 1e-10),
    ('targetFrames', 400),
    ('featNorm', 'utt'),
    ('threads', 1),
    # network
    ('filters', [32, 64, 128]),
    ('sdHidden', [512, 128, 64]),
    ('asvHidden', [512, 128]),
    ('heads', ['sd', 'asv']),
    ('dropout', 0.3),
    ('lreluSlope', 0.01),
    ('bnMomentum', 0.9),
    ('bnEps', 1e-5),
    ('dtype', 'float32'),
    # loss
    ('margin', 4),
    ('lambdaReg', 0.001),
    ('sdWeight', 1.0),
    ('asvWeight', 1.0),
    ('sdLoss', 'asoftmax'),
    ('asvLoss', 'asoftmax'),
    ('sdClassWeights', True),
    ('asvClassWeights', False),
    ('annealEpochs', 10),
    ('annealFloor', 0.8),
    # training
    ('batchSize', 32),
    ('nEpochs', 30),
    ('alpha', 1e-3),
    ('beta1', 0.9),
    ('beta2', 0.999),
    ('eps', 1e-8),
    ('seed', 0),
    ('patience', 10),
    ('clipNorm', 5.0),
    ('bnRefresh', True),
    # back-end
    ('pldaIters', 10),
    ('pldaRidge', 1e-6),
    ('topK', 200),
    # fusion
    ('fusionIters', 500),
    ('fusionTol', 1e-9),
    ('fusionRidge', 1e-4),
    # t-DCF
    ('piTar', 0.9405),
    ('piNon', 0.0095),
    ('piSpoof', 0.05),
    ('cMissSd', 1.0),
    ('cFaSd', 10.0),
    ('cMissAsv', 1.0),
    ('cFaAsv', 10.0),
    ('tdcfNorm', 'ratio'),
    # synthetic corpus
    ('nSpeakers', 10),
    ('uttsPerSpeaker', 6),
    ('nDevSpeakers', 4),
    ('nEvalSpeakers', 4),
    ('enrollUtts', 3),
    ('durationS', 3.2),
    ('spoofTransforms', ['lowpass', 'clip', 'echo']),
]

# boolean spellings of featNorm: true for per-row, false for none
_FEAT_NORM_ALIASES = {'true': 'row', '1': 'row', 'yes': 'row', 'on': 'row',
                      'rows': 'row', 'false': 'none', '0': 'none',
                      'no': 'none', 'off': 'none', 'utterance': 'utt'}

_CANONICAL = dict((k.lower(), k) for k, _ in _DEFAULTS)
_CANONICAL.update(fs='Fs', samplerate='Fs', sfreq='Fs', srate='Fs',
                  epochs='nEpochs', m='margin', lr='alpha',
                  learningrate='alpha', nspk='nSpeakers')


def _canonical_key(kw):
    return _CANONICAL.get(kw.lower().replace('_', '').replace('-', ''), kw)


def _coerce(value, default):
    """Cast value (possibly a string from a config file) like default"""
    if isinstance(default, bool):
        if isinstance(value, str):
            if value.strip().lower() in ('1', 'true', 'yes', 'on'):
                return True
            if value.strip().lower() in ('0', 'false', 'no', 'off'):
                return False
            raise ValueError('Cannot read %r as a boolean' % value)
        return bool(value)
    if isinstance(default, list):
        if isinstance(value, str):
            value = [v.strip() for v in value.split(',') if v.strip()]
        value = list(value)
        if len(default) > 0 and isinstance(default[0], int):
            value = [int(v) for v in value]
        else:
            value = [str(v) for v in value]
        return value
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return str(value)


@verbose
def generate_parameters(verbose=True, **kwArgs):
    """
    Generates default parameter values, overridden by keyword arguments

    Without keyword arguments the defaults give the reference system:
    864 x 400 CQT input normalized per utterance, residual blocks with
    32/64/128 filters, dropout 0.3 (each hidden unit kept with probability
    0.7), lambda 0.001, ASVspoof 2019 t-DCF priors and costs, Adam with
    alpha = 1e-3 and batches of 32. The margin of the angular softmax is
    phased in over annealEpochs epochs and never weighs more than
    1 - annealFloor; batch normalization statistics are re-estimated on the
    training set after every epoch (bnRefresh).

    Change any key value by using it as a keyword argument; e.g.,

    generate_parameters(batch_size=8, nEpochs=3)

    would change only the batch size and the number of epochs.

    Returns
    ---------
    Dictionary of parameters.

    """
    params = {}
    for k, v in _DEFAULTS:
        params[k] = list(v) if isinstance(v, list) else v

    for kw in kwArgs:
        key = _canonical_key(kw)
        if key in params:
            params[key] = _coerce(kwArgs[kw], params[key])
        else:
            params[kw] = kwArgs[kw]
            logger.info((kw + ' = {}').format(kwArgs[kw]))

    _validate_parameters(params)

    logger.info('Current parameters:')
    logger.info('features = {} ({} x {})'.format(
        params['features'], _feature_rows(params), params['targetFrames']))
    logger.info('filters = {}, heads = {}'.format(params['filters'],
                                                  params['heads']))
    logger.info('margin = {}, lambdaReg = {}, dropout = {}'.format(
        params['margin'], params['lambdaReg'], params['dropout']))
    logger.info('batchSize = {}, nEpochs = {}, alpha = {}, seed = {}'.format(
        params['batchSize'], params['nEpochs'], params['alpha'],
        params['seed']))

    return params


def _feature_rows(params):
    if params['features'] == 'cqt':
        return params['octaves'] * params['binsPerOctave']
    return params['nFilters']


def _validate_parameters(params):
    '''
    internal function, not really meant to be called/viewed by the end user
    (unless end user is curious).

    validates parameters, raising ValueError on the first violation
    '''
    def _fail(msg):
        logger.error(msg)
        raise ValueError(msg)

    if params['Fs'] != 16000:
        _fail('params["Fs"] must be 16000 (no resampling is performed)')
    if params['features'] not in ('cqt', 'llfb'):
        _fail('params["features"] must be cqt or llfb')
    if params['octaves'] < 1 or params['binsPerOctave'] < 1:
        _fail('params["octaves"] and params["binsPerOctave"] must be >= 1')
    if params['hopMs'] <= 0 or params['frameMs'] <= 0 or \
            params['shiftMs'] <= 0:
        _fail('frame durations must be positive')
    if params['nfft'] < params['frameMs'] * params['Fs'] / 1000.:
        _fail('params["nfft"] must cover one LLFB frame')
    if params['logFloor'] <= 0:
        _fail('params["logFloor"] must be positive')
    norm = str(params['featNorm']).strip().lower()
    params['featNorm'] = _FEAT_NORM_ALIASES.get(norm, norm)
    if params['featNorm'] not in ('utt', 'row', 'none'):
        _fail('params["featNorm"] must be utt, row or none')
    if params['targetFrames'] < 1:
        _fail('params["targetFrames"] must be >= 1')
    if len(params['filters']) < 1 or \
            any(f < 2 or f % 2 for f in params['filters']):
        _fail('params["filters"] must be even filter counts')
    if not set(params['heads']) or not set(params['heads']) <= {'sd', 'asv'}:
        _fail('params["heads"] must be a non-empty subset of sd, asv')
    if not 0 <= params['dropout'] < 1:
        _fail('params["dropout"] must be in [0, 1)')
    if params['dtype'] not in ('float32', 'float64'):
        _fail('params["dtype"] must be float32 or float64')
    if params['margin'] < 1:
        _fail('params["margin"] must be a positive integer')
    if params['lambdaReg'] < 0:
        _fail('params["lambdaReg"] must be >= 0')
    for k in ('sdLoss', 'asvLoss'):
        if params[k] not in ('asoftmax', 'softmax'):
            _fail('params["%s"] must be asoftmax or softmax' % k)
    if params['batchSize'] < 1:
        _fail('params["batchSize"] must be >= 1')
    if params['nEpochs'] < 0:
        _fail('params["nEpochs"] must be >= 0')
    if not 0 <= params['annealFloor'] <= 1:
        _fail('params["annealFloor"] must be in [0, 1]')
    if params['alpha'] <= 0:
        _fail('params["alpha"] must be positive')
    if not (0 < params['beta1'] < 1 and 0 < params['beta2'] < 1):
        _fail('Adam betas must lie in (0, 1)')
    if params['pldaRidge'] <= 0:
        _fail('params["pldaRidge"] must be positive')
    if params['topK'] < 2:
        _fail('params["topK"] must be >= 2')
    prior_sum = params['piTar'] + params['piNon'] + params['piSpoof']
    if abs(prior_sum - 1.0) > 1e-9:
        _fail('t-DCF priors must sum to 1 (got %g)' % prior_sum)
    for k in ('cMissSd', 'cFaSd', 'cMissAsv', 'cFaAsv'):
        if params[k] <= 0:
            _fail('params["%s"] must be positive' % k)
    if params['tdcfNorm'] not in ('ratio', 'challenge', 'none'):
        _fail('params["tdcfNorm"] must be ratio, challenge or none')

    return params


def read_config(path):
    """Read a ``key=value`` configuration file

    Blank lines and ``#`` comments are skipped. Values stay strings; they are
    cast by generate_parameters() according to the type of each default.

    Returns
    -------
    kwArgs : dict
        Keywords to pass on to generate_parameters().
    """
    kwArgs = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split('#', 1)[0].strip()
            if not line:
                continue
            if '=' not in line:
                raise ValueError('%s:%d: expected key=value' % (path, lineno))
            key, value = line.split('=', 1)
            kwArgs[key.strip()] = value.strip()
    return kwArgs


def write_config(path, params):
    """Write params as a sorted ``key=value`` file"""
    lines = []
    for key in sorted(params):
        value = params[key]
        if isinstance(value, (list, tuple)):
            value = ','.join(str(v) for v in value)
        lines.append('%s=%s\n' % (key, value))
    atomic_write(path, ''.join(lines), mode='w')


def cqt_params(params):
    """CqtParams view: octave geometry, gamma widening and hop"""
    fs = params['Fs']
    B = params['binsPerOctave']
    f_max = fs / 2.0
    return dict(fs=fs,
                f_max=f_max,
                f_min=f_max / 2.0 ** params['octaves'],
                octaves=params['octaves'],
                bins_per_octave=B,
                gamma=228.7 * (2.0 ** (1.0 / B) - 2.0 ** (-1.0 / B)),
                resample_period_d=params['resamplePeriod'],
                hop=int(round(params['hopMs'] * fs / 1000.)),
                sparsity=params['cqtSparsity'],
                log_floor=params['logFloor'])


def llfb_params(params):
    """LlfbParams view: framing, FFT size and filter count"""
    fs = params['Fs']
    return dict(fs=fs,
                n_filters=params['nFilters'],
                frame_len=int(round(params['frameMs'] * fs / 1000.)),
                frame_shift=int(round(params['shiftMs'] * fs / 1000.)),
                fft_bins=params['nfft'],
                log_floor=params['logFloor'])


def tdcf_params(params):
    """TdcfParams view: priors and costs of the tandem cost function"""
    return dict(pi_tar=params['piTar'], pi_non=params['piNon'],
                pi_spoof=params['piSpoof'],
                c_miss_sd=params['cMissSd'], c_fa_sd=params['cFaSd'],
                c_miss_asv=params['cMissAsv'], c_fa_asv=params['cFaAsv'])


def synth_spec(params):
    """SynthCorpusSpec view used by proto.gen_synth_corpus"""
    return dict(seed=params['seed'],
                n_speakers=params['nSpeakers'],
                utts_per_speaker=params['uttsPerSpeaker'],
                n_dev_speakers=params['nDevSpeakers'],
                n_eval_speakers=params['nEvalSpeakers'],
                enroll_utts=params['enrollUtts'],
                duration_s=params['durationS'],
                spoof_transforms=list(params['spoofTransforms']))


def n_feature_frames(params):
    """Number of time frames after unification"""
    return int(params['targetFrames'])


def frames_after_trunk(n_frames, n_blocks):
    """Time frames left after n_blocks stride-2 entry convolutions"""
    for _ in range(n_blocks):
        n_frames = int(math.ceil(n_frames / 2.0))
    return n_frames
