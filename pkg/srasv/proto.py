'''
Module: srasv.proto

Protocol, enrollment and score files, and the synthetic desk-scale corpus.

Protocol columns follow the public anti-spoofing challenge layout, so real
protocol files parse unchanged:

    CM protocol     speaker utterance [...] attack key        key bonafide|spoof
    ASV trials      speaker utterance [attack] key            key target|nontarget|spoof
    enrollment      speaker utt1,utt2,...
    scores          trial_id score [key [attack]]

Function Listing
================
    read_cm_protocol / write_cm_protocol

    read_asv_trials / write_asv_trials

    read_enrollment / write_enrollment

    read_scores / write_scores

    gen_synth_corpus
'''

import os
from collections import namedtuple, OrderedDict

import numpy as np
from scipy import signal

from .utils import (logger, verbose, atomic_write, MalformedLine,
                    DuplicateUtterance, NonFiniteScore, BadSpec)
from .metrics import ScoreSet
from .feat import write_wav

CmProtocolEntry = namedtuple('CmProtocolEntry', ['speaker', 'utt', 'attack',
                                                 'key'])
AsvTrialEntry = namedtuple('AsvTrialEntry', ['speaker', 'utt', 'attack',
                                             'key'])

SD_LABELS = {'spoof': 0, 'bonafide': 1}
TRANSFORMS = ('lowpass', 'clip', 'echo')


def _lines(path):
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            fields = line.split()
            if fields:
                yield lineno, fields


def read_cm_protocol(path):
    '''
    Parses a countermeasure protocol.

    Speaker is the first column, utterance the second, attack the one
    before last and key the last one. Order is preserved.

    Returns
    -------
    entries : list of CmProtocolEntry
    '''
    entries = []
    seen = set()
    for lineno, fields in _lines(path):
        if len(fields) < 4:
            raise MalformedLine('expected at least 4 columns', lineno)
        speaker, utt, attack, key = fields[0], fields[1], fields[-2], \
            fields[-1]
        if key not in SD_LABELS:
            raise MalformedLine('unknown key %r' % key, lineno)
        if (key == 'spoof') != (attack != '-'):
            raise MalformedLine('key %s with attack %r' % (key, attack),
                                lineno)
        if utt in seen:
            raise DuplicateUtterance('%s: utterance %s listed twice (line %d)'
                                     % (path, utt, lineno))
        seen.add(utt)
        entries.append(CmProtocolEntry(speaker, utt, attack, key))
    return entries


def write_cm_protocol(path, entries):
    atomic_write(path, ''.join('%s %s %s %s\n' % tuple(e) for e in entries),
                 mode='w')


def read_asv_trials(path):
    '''
    Parses an ASV trial list (claimed speaker, test utterance, key).

    A third column, when four or more are present, is the attack label;
    'bonafide' or '-' there means no attack.

    Returns
    -------
    entries : list of AsvTrialEntry
    '''
    entries = []
    for lineno, fields in _lines(path):
        if len(fields) < 3:
            raise MalformedLine('expected at least 3 columns', lineno)
        key = fields[-1]
        if key not in ('target', 'nontarget', 'spoof'):
            raise MalformedLine('unknown key %r' % key, lineno)
        attack = fields[2] if len(fields) >= 4 else '-'
        if attack == 'bonafide':
            attack = '-'
        entries.append(AsvTrialEntry(fields[0], fields[1], attack, key))
    return entries


def write_asv_trials(path, entries):
    atomic_write(path, ''.join('%s %s %s %s\n' % tuple(e) for e in entries),
                 mode='w')


def trial_id(entry):
    '''Identifier of an ASV trial in score files'''
    return '%s:%s' % (entry.speaker, entry.utt)


def read_enrollment(path):
    '''
    Returns
    -------
    enrollment : OrderedDict of speaker -> list of utterance ids
    '''
    out = OrderedDict()
    for lineno, fields in _lines(path):
        if len(fields) != 2:
            raise MalformedLine('expected "speaker utt1,utt2,..."', lineno)
        if fields[0] in out:
            raise MalformedLine('speaker %s enrolled twice' % fields[0],
                                lineno)
        out[fields[0]] = [u for u in fields[1].split(',') if u]
    return out


def write_enrollment(path, enrollment):
    atomic_write(path, ''.join('%s %s\n' % (s, ','.join(u))
                               for s, u in enrollment.items()), mode='w')


def write_scores(path, scores):
    '''
    Writes a ScoreSet, one trial per line, scores with 17 significant
    digits so that reading them back is exact.
    '''
    if not np.all(np.isfinite(scores.scores)):
        raise NonFiniteScore('Refusing to write NaN or infinite scores')
    lines = []
    for i, (t, s) in enumerate(zip(scores.trial_ids, scores.scores)):
        fields = [t, '%.17g' % s]
        if scores.keys is not None:
            fields.append(scores.keys[i])
            if scores.attacks is not None:
                fields.append(scores.attacks[i])
        lines.append(' '.join(fields) + '\n')
    atomic_write(path, ''.join(lines), mode='w')


def read_scores(path):
    '''
    Returns
    -------
    scores : ScoreSet
        keys and attacks are None when the file lacks those columns.
    '''
    ids, values, keys, attacks = [], [], [], []
    for lineno, fields in _lines(path):
        if not 2 <= len(fields) <= 4:
            raise MalformedLine('expected "trial_id score [key [attack]]"',
                                lineno)
        try:
            value = float(fields[1])
        except ValueError:
            raise MalformedLine('score %r is not a number' % fields[1],
                                lineno)
        if not np.isfinite(value):
            raise NonFiniteScore('line %d: score %s' % (lineno, fields[1]))
        ids.append(fields[0])
        values.append(value)
        keys.append(fields[2] if len(fields) > 2 else None)
        attacks.append(fields[3] if len(fields) > 3 else None)
    if any(k is None for k in keys):
        keys = None
    if keys is None or any(a is None for a in attacks):
        attacks = None
    return ScoreSet(ids, values, keys, attacks)


# ------------------------------------------------------- synthetic corpus

def _check_spec(spec):
    if spec['n_speakers'] < 2:
        raise BadSpec('n_speakers must be >= 2')
    if spec['duration_s'] < 1:
        raise BadSpec('duration_s must be >= 1')
    if spec['utts_per_speaker'] < 1:
        raise BadSpec('utts_per_speaker must be >= 1')
    unknown = set(spec['spoof_transforms']) - set(TRANSFORMS)
    if unknown or not spec['spoof_transforms']:
        raise BadSpec('spoof_transforms must be a non-empty subset of %s' %
                      (TRANSFORMS,))
    for split in ('n_dev_speakers', 'n_eval_speakers'):
        if spec[split] == 1 or spec[split] < 0:
            raise BadSpec('%s must be 0 or >= 2' % split)
    if (spec['n_dev_speakers'] or spec['n_eval_speakers']) and \
            not 1 <= spec['enroll_utts'] < spec['utts_per_speaker']:
        raise BadSpec('enroll_utts must leave at least one test utterance')


def _voice(rng):
    '''Random voice: pitch range, formants, noise level and tilt'''
    return dict(f0=rng.uniform(90, 220),
                formants=np.sort(rng.uniform([300, 900, 2400],
                                             [900, 2400, 3600])),
                bandwidths=rng.uniform(60, 160, size=3),
                tilt=rng.uniform(0.6, 1.2),
                noise=rng.uniform(0.005, 0.02))


def _utterance(voice, n, fs, rng):
    '''Harmonic stack through formant resonators, plus noise'''
    t = np.arange(n) / float(fs)
    contour = voice['f0'] * (1 + 0.04 * np.sin(2 * np.pi * rng.uniform(0.3, 1)
                                               * t + rng.uniform(0, 2 * np.pi))
                             + 0.02 * rng.standard_normal())
    phase = 2 * np.pi * np.cumsum(contour) / fs
    n_harm = int(7800 // contour.max())
    h = np.arange(1, n_harm + 1)
    x = (np.sin(np.outer(phase, h)) / h ** voice['tilt']).sum(axis=1)
    for f, bw in zip(voice['formants'], voice['bandwidths']):
        r = np.exp(-np.pi * bw / fs)
        a = [1, -2 * r * np.cos(2 * np.pi * f / fs), r * r]
        x = x + signal.lfilter([1 - r], a, x)
    envelope = 0.6 + 0.4 * np.sin(2 * np.pi * rng.uniform(2, 5) * t +
                                  rng.uniform(0, 2 * np.pi)) ** 2
    x = x * envelope
    x = x / np.max(np.abs(x))
    x = x + voice['noise'] * rng.standard_normal(n)
    return 0.5 * x / np.max(np.abs(x))


def spoof_transform(x, name, fs=16000):
    '''Spoofed copy: 3.4 kHz lowpass, tanh soft-clip or 25 ms echo'''
    if name == 'lowpass':
        sos = signal.butter(8, 3400, btype='low', fs=fs, output='sos')
        y = signal.sosfilt(sos, x)
    elif name == 'clip':
        y = np.tanh(4 * x / np.max(np.abs(x)))
    elif name == 'echo':
        delay = int(round(0.025 * fs))
        y = x.copy()
        y[delay:] += 0.5 * x[:-delay]
    else:
        raise BadSpec('unknown spoof transform %r' % name)
    return 0.5 * y / np.max(np.abs(y))


@verbose
def gen_synth_corpus(out_dir, spec, fs=16000, verbose=None):
    '''
    Writes a reproducible synthetic corpus.

    Layout::

        wav/<utt>.wav
        protocols/cm_train.txt, cm_dev.txt, cm_eval.txt
        protocols/asv_dev_trials.txt, asv_eval_trials.txt
        protocols/enroll_dev.txt, enroll_eval.txt

    Train, dev and eval speakers are disjoint. Training speakers contribute
    utts_per_speaker bona fide utterances and one spoofed copy per
    transform. Dev and eval speakers keep enroll_utts utterances for
    enrollment; the rest, and their spoofed copies, are test trials.

    Parameters
    ----------
    spec : dict
        SynthCorpusSpec, see params.synth_spec.

    Returns
    -------
    summary : dict
        Paths of the protocol files and per-split counts.
    '''
    _check_spec(spec)
    rng = np.random.RandomState(spec['seed'])
    n = int(round(spec['duration_s'] * fs))
    wav_dir = os.path.join(out_dir, 'wav')
    proto_dir = os.path.join(out_dir, 'protocols')
    os.makedirs(wav_dir, exist_ok=True)
    os.makedirs(proto_dir, exist_ok=True)

    splits = (('train', 'T', spec['n_speakers']),
              ('dev', 'D', spec['n_dev_speakers']),
              ('eval', 'E', spec['n_eval_speakers']))
    summary = dict(root=out_dir, wav=wav_dir)
    speaker_no = 0
    for split, tag, n_spk in splits:
        if n_spk == 0:
            continue
        cm, trials, enrollment = [], [], OrderedDict()
        tests = []
        utt_no = 0

        def emit(samples):
            utt = '%s_%05d' % (tag, utt_no)
            write_wav(os.path.join(wav_dir, utt + '.wav'), samples, fs)
            return utt

        for _ in range(n_spk):
            speaker_no += 1
            speaker = 'SPK_%03d' % speaker_no
            voice = _voice(rng)
            for i in range(spec['utts_per_speaker']):
                x = _utterance(voice, n, fs, rng)
                utt = emit(x)
                utt_no += 1
                if split != 'train' and i < spec['enroll_utts']:
                    enrollment.setdefault(speaker, []).append(utt)
                    continue
                cm.append(CmProtocolEntry(speaker, utt, '-', 'bonafide'))
                tests.append((speaker, utt, '-'))
                for name in spec['spoof_transforms']:
                    spoof = emit(spoof_transform(x, name, fs))
                    utt_no += 1
                    cm.append(CmProtocolEntry(speaker, spoof, name, 'spoof'))
                    tests.append((speaker, spoof, name))

        cm_path = os.path.join(proto_dir, 'cm_%s.txt' % split)
        write_cm_protocol(cm_path, cm)
        summary['cm_' + split] = cm_path
        summary['n_' + split] = len(cm)
        if split == 'train':
            continue
        for claimed in enrollment:
            for speaker, utt, attack in tests:
                if attack != '-':
                    if speaker == claimed:
                        trials.append(AsvTrialEntry(claimed, utt, attack,
                                                    'spoof'))
                    continue
                key = 'target' if speaker == claimed else 'nontarget'
                trials.append(AsvTrialEntry(claimed, utt, '-', key))
        trials_path = os.path.join(proto_dir, 'asv_%s_trials.txt' % split)
        enroll_path = os.path.join(proto_dir, 'enroll_%s.txt' % split)
        write_asv_trials(trials_path, trials)
        write_enrollment(enroll_path, enrollment)
        summary['asv_' + split] = trials_path
        summary['enroll_' + split] = enroll_path
    logger.info('Synthetic corpus in %s: %s' % (
        out_dir, ', '.join('%s=%d' % (k, v) for k, v in sorted(summary.items())
                           if k.startswith('n_'))))
    return summary


def corpus_wavs(corpus_dir):
    '''(utt_id, wav path) of every file under wav/, sorted by id'''
    wav_dir = os.path.join(corpus_dir, 'wav')
    names = sorted(f for f in os.listdir(wav_dir) if f.endswith('.wav'))
    return [(os.path.splitext(f)[0], os.path.join(wav_dir, f)) for f in names]
