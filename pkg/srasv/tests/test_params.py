import numpy as np
import pytest
from numpy.testing import assert_allclose

from srasv.params import (generate_parameters, read_config, write_config,
                          cqt_params, llfb_params, tdcf_params, synth_spec,
                          frames_after_trunk)


def test_defaults(params):
    assert params['binsPerOctave'] * params['octaves'] == 864
    assert params['targetFrames'] == 400
    assert params['filters'] == [32, 64, 128]
    assert params['dropout'] == 0.3
    assert params['featNorm'] == 'utt'
    assert params['bnMomentum'] == 0.9
    assert params['alpha'] == 1e-3
    assert params['annealFloor'] == 0.8
    assert params['bnRefresh'] is True
    assert params['lambdaReg'] == 0.001
    assert params['heads'] == ['sd', 'asv']


def test_key_spellings():
    for kw in ('batch_size', 'batchSize', 'BATCHSIZE', 'batch-size'):
        assert generate_parameters(verbose=False, **{kw: 8})['batchSize'] == 8
    assert generate_parameters(verbose=False, lr=0.01)['alpha'] == 0.01
    assert generate_parameters(verbose=False, epochs=3)['nEpochs'] == 3


def test_unknown_keys_kept():
    p = generate_parameters(verbose=False, myNote='hello')
    assert p['myNote'] == 'hello'


def test_string_coercion():
    p = generate_parameters(verbose=False, nEpochs='3', featNorm='true',
                            filters='8,16', heads='sd', alpha='1e-3')
    assert p['nEpochs'] == 3
    assert p['featNorm'] == 'row'
    assert p['filters'] == [8, 16]
    assert p['heads'] == ['sd']
    assert p['alpha'] == 1e-3


@pytest.mark.parametrize('kw', [dict(Fs=8000), dict(features='mfcc'),
                                dict(filters=[31]), dict(heads=['xvec']),
                                dict(dropout=1.0), dict(margin=0),
                                dict(piTar=0.5), dict(beta1=1.0),
                                dict(tdcfNorm='other'), dict(topK=1),
                                dict(featNorm='cmvn'), dict(annealFloor=2),
                                dict(pldaRidge=0)])
def test_invalid(kw):
    with pytest.raises(ValueError):
        generate_parameters(verbose=False, **kw)


def test_config_roundtrip(tmp_path):
    p = generate_parameters(verbose=False, seed=7, filters=[8, 16],
                            features='llfb', featNorm=True)
    path = str(tmp_path / 'config.txt')
    write_config(path, p)
    again = generate_parameters(verbose=False, **read_config(path))
    assert again == p


def test_read_config_comments(tmp_path):
    path = tmp_path / 'c.txt'
    path.write_text('# comment\n\nseed = 3  # trailing\nbatch_size=4\n')
    kw = read_config(str(path))
    assert kw == {'seed': '3', 'batch_size': '4'}
    path.write_text('seed 3\n')
    with pytest.raises(ValueError):
        read_config(str(path))


def test_cqt_view(params):
    p = cqt_params(params)
    assert p['f_max'] == 8000.
    assert_allclose(p['f_min'], 8000. / 512)
    B = 96
    assert_allclose(p['gamma'], 228.7 * (2 ** (1. / B) - 2 ** (-1. / B)))
    assert p['hop'] == 128
    assert p['resample_period_d'] == 16


def test_other_views(params):
    p = llfb_params(params)
    assert (p['frame_len'], p['frame_shift'], p['fft_bins']) == (320, 160,
                                                                 512)
    t = tdcf_params(params)
    assert_allclose(t['pi_tar'] + t['pi_non'] + t['pi_spoof'], 1.0)
    s = synth_spec(params)
    assert s['n_speakers'] == 10 and s['utts_per_speaker'] == 6


def test_frames_after_trunk():
    assert frames_after_trunk(400, 3) == 50
    assert frames_after_trunk(864, 3) == 108
    assert frames_after_trunk(80, 3) == 10
    assert frames_after_trunk(5, 1) == 3
    assert np.all([frames_after_trunk(n, 0) == n for n in range(1, 5)])
