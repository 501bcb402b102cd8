"""
Command line pipeline.

    srasv synth      --out CORPUS [--seed N]
    srasv extract    --corpus CORPUS --out WORK [--features cqt|llfb]
    srasv train      --out WORK --protocol cm_train.txt [--dev cm_dev.txt]
    srasv embed      --out WORK
    srasv plda       --out WORK --protocol cm_train.txt
    srasv score-asv  --out WORK --protocol asv_trials.txt --enroll enroll.txt
    srasv score-sd   --out WORK --protocol cm_eval.txt
    srasv eval       --scores SD_SCORES --scores ASV_SCORES [--report CSV]
    srasv fuse       --out WORK --scores DEV1 --scores DEV2 [--apply EVAL1 ...]

Every subcommand accepts --config (key=value file), --seed and -v. Exit
status is 0 on success, 1 on data errors and 2 on usage errors.
"""

import os
import sys
import argparse
from collections import OrderedDict

import numpy as np

from .utils import logger, set_log_level, SrasvError, CorruptCheckpoint
from .params import (generate_parameters, read_config, write_config,
                     synth_spec, tdcf_params)
from . import backend, container, feat, fusion, metrics, proto, train
from .net import MtlNetwork, init_params, param_count

EMBEDDING_KIND = 3


def _paths(work):
    return dict(features=os.path.join(work, 'features'),
                manifest=os.path.join(work, 'feats.txt'),
                model=os.path.join(work, 'model.srnn'),
                log=os.path.join(work, 'train_log.csv'),
                config=os.path.join(work, 'config.txt'),
                embeddings=os.path.join(work, 'embeddings.srnn'),
                plda=os.path.join(work, 'plda.srnn'),
                scores=os.path.join(work, 'scores'))


def _score_path(args, kind):
    if args.scores:
        return args.scores[0]
    name = os.path.splitext(os.path.basename(args.protocol))[0]
    return os.path.join(_paths(args.out)['scores'], '%s_%s.txt' % (kind,
                                                                   name))


def _load_embeddings(path):
    header, blobs = container.load(path)
    if header['kind'] != EMBEDDING_KIND:
        raise CorruptCheckpoint('%s is not an embedding store' % path)
    return blobs


def cmd_synth(args, params):
    summary = proto.gen_synth_corpus(args.out, synth_spec(params))
    print('corpus written to %s (%d train, %d dev, %d eval CM trials)' %
          (args.out, summary.get('n_train', 0), summary.get('n_dev', 0),
           summary.get('n_eval', 0)))


def cmd_extract(args, params):
    p = _paths(args.out)
    entries = proto.corpus_wavs(args.corpus)
    feat.extract_features(entries, p['features'], params,
                          manifest=p['manifest'])
    write_config(p['config'], params)
    print('%d %s features in %s' % (len(entries), params['features'],
                                    p['manifest']))


def cmd_train(args, params):
    p = _paths(args.out)
    data = train.load_dataset(p['manifest'], args.protocol)
    dev = None
    if args.dev:
        dev = train.load_dataset(p['manifest'], args.dev, data.speakers)
    net = MtlNetwork.from_params(params, len(data.speakers))
    init_params(net, params['seed'])
    if args.init_trunk:
        train.load_trunk(net, args.init_trunk)
    logger.info('Network: %d parameters' % param_count(net)['total'])
    best, log = train.train_loop(data, net, params, dev, log_path=p['log'],
                                 checkpoint_path=p['model'])
    train.save_checkpoint(best, p['model'])
    print('trained %d epochs, model in %s' % (len(log), p['model']))


def cmd_embed(args, params):
    p = _paths(args.out)
    net = train.load_checkpoint(p['model'])
    entries = feat.read_manifest(p['manifest'])
    blobs = OrderedDict()
    bs = params['batchSize']
    for start in range(0, len(entries), bs):
        ids, X = feat.load_features(entries[start:start + bs])
        for utt, e in zip(ids, backend.extract_embedding(X, net)):
            blobs[utt] = e
    container.save(p['embeddings'], blobs, kind=EMBEDDING_KIND)
    print('%d embeddings in %s' % (len(blobs), p['embeddings']))


def cmd_plda(args, params):
    p = _paths(args.out)
    store = _load_embeddings(p['embeddings'])
    entries = [e for e in proto.read_cm_protocol(args.protocol)
               if e.key == 'bonafide']
    E = np.stack([store[e.utt] for e in entries]).astype(np.float64)
    labels = [e.speaker for e in entries]
    center = E.mean(axis=0)
    X = backend.center_lnorm(E, center)
    model, _ = backend.plda_train(X, labels, params['pldaIters'],
                                  params['pldaRidge'])
    cohort = backend.cohort_means(X, labels)
    backend.save_plda(p['plda'], model, center=center, cohort=cohort)
    print('PLDA on %d embeddings of %d speakers in %s' %
          (len(entries), len(set(labels)), p['plda']))


def cmd_score_asv(args, params):
    p = _paths(args.out)
    store = _load_embeddings(p['embeddings'])
    model, extras = backend.load_plda(p['plda'])
    center = extras['center']
    enrollment = proto.read_enrollment(args.enroll)
    utts = [u for s in enrollment for u in enrollment[s]]
    spk = [s for s in enrollment for _ in enrollment[s]]
    E = backend.center_lnorm(np.stack([store[u] for u in utts]), center)
    speakers, models = backend.enroll(E, spk)
    if args.adapt:
        model = backend.adapt_plda(model, E)
    index = dict((s, i) for i, s in enumerate(speakers))

    trials = proto.read_asv_trials(args.protocol)
    T = backend.center_lnorm(np.stack([store[t.utt] for t in trials]),
                             center)
    M = models[[index[t.speaker] for t in trials]]
    scores = backend.score_trials(M, T, model, extras.get('cohort'),
                                  params['topK'])
    out = _score_path(args, 'asv')
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    proto.write_scores(out, metrics.ScoreSet(
        [proto.trial_id(t) for t in trials], scores,
        [t.key for t in trials], [t.attack for t in trials]))
    print('%d ASV scores in %s' % (len(trials), out))


def cmd_score_sd(args, params):
    p = _paths(args.out)
    net = train.load_checkpoint(p['model'])
    paths = dict(feat.read_manifest(p['manifest']))
    entries = proto.read_cm_protocol(args.protocol)
    scores = []
    bs = params['batchSize']
    for start in range(0, len(entries), bs):
        chunk = entries[start:start + bs]
        _, X = feat.load_features([(e.utt, paths[e.utt]) for e in chunk])
        scores.append(backend.sd_scores(X, net))
    out = _score_path(args, 'sd')
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    proto.write_scores(out, metrics.ScoreSet(
        [e.utt for e in entries], np.concatenate(scores) if scores else [],
        [e.key for e in entries], [e.attack for e in entries]))
    print('%d SD scores in %s' % (len(entries), out))


def _sd_for_trials(sd, asv):
    """SD scores re-indexed by ASV trial id (speaker:utt)"""
    by_utt = dict(zip(sd.trial_ids, sd.scores))
    utts = [t.split(':', 1)[-1] for t in asv.trial_ids]
    missing = [u for u in utts if u not in by_utt]
    if missing:
        return None
    return metrics.ScoreSet(asv.trial_ids, [by_utt[u] for u in utts],
                            asv.keys)


def cmd_eval(args, params):
    if len(args.scores) != 2:
        raise argparse.ArgumentTypeError('eval needs --scores SD --scores ASV')
    sd = proto.read_scores(args.scores[0])
    asv = proto.read_scores(args.scores[1])
    sd_eer, _ = metrics.eer(sd)
    asv_eer, _ = metrics.eer(asv)
    op = metrics.asv_operating_point(asv)
    C0, C1, C2 = metrics.tdcf_constants(tdcf_params(params), op)
    tdcf, _, _ = metrics.min_tdcf_norm(sd, C1, C2, C0, params['tdcfNorm'])
    print('SD EER: %.2f%%' % (100 * sd_eer))
    print('ASV EER: %.2f%%' % (100 * asv_eer))
    print('min t-DCF: %.4f' % tdcf)
    print('C0 = %.4f, C1 = %.4f, C2 = %.4f' % (C0, C1, C2))
    combined = _sd_for_trials(sd, asv)
    if combined is not None:
        print('Integrated EER: %.2f%%' %
              (100 * metrics.integrated_eer(asv, combined)[0]))
    if sd.attacks is not None:
        rows = metrics.per_attack_report(sd, asv, params)
        sys.stdout.write(metrics.format_report(rows))
        if args.report:
            metrics.write_report(args.report, rows)
    if args.det:
        p_fa, p_miss, t = metrics.det_curve(sd)
        metrics.write_det(args.det, p_fa, p_miss, t)


def cmd_fuse(args, params):
    if len(args.scores) < 1:
        raise argparse.ArgumentTypeError('fuse needs at least one --scores')
    dev = [proto.read_scores(s) for s in args.scores]
    model = fusion.fit_fusion(dev, n_iters=params['fusionIters'],
                              tol=params['fusionTol'],
                              ridge=params['fusionRidge'])
    os.makedirs(args.out, exist_ok=True)
    fusion.save_fusion(os.path.join(args.out, 'fusion.txt'), model)
    proto.write_scores(os.path.join(args.out, 'fused_dev.txt'),
                       fusion.apply_fusion(model, dev))
    if args.apply:
        ev = [proto.read_scores(s) for s in args.apply]
        proto.write_scores(os.path.join(args.out, 'fused_eval.txt'),
                           fusion.apply_fusion(model, ev))
    print('fusion weights %s, offset %.6g' %
          (' '.join('%.6g' % w for w in model.weights), model.offset))


COMMANDS = OrderedDict([('synth', cmd_synth), ('extract', cmd_extract),
                        ('train', cmd_train), ('embed', cmd_embed),
                        ('plda', cmd_plda), ('score-asv', cmd_score_asv),
                        ('score-sd', cmd_score_sd), ('eval', cmd_eval),
                        ('fuse', cmd_fuse)])


def build_parser():
    parser = argparse.ArgumentParser(
        prog='srasv', description='Spoofing-robust speaker verification')
    sub = parser.add_subparsers(dest='command')
    sub.required = True
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument('--config', help='key=value parameter file')
        p.add_argument('--seed', type=int)
        p.add_argument('--features', choices=('cqt', 'llfb'))
        p.add_argument('--out', help='output directory')
        p.add_argument('--protocol', help='protocol or trial list')
        p.add_argument('--scores', action='append', default=[],
                       help='score file (repeatable)')
        p.add_argument('-v', '--verbose', action='store_true')
        if name == 'extract':
            p.add_argument('--corpus', required=True)
        if name == 'train':
            p.add_argument('--dev', help='development CM protocol')
            p.add_argument('--init-trunk', dest='init_trunk',
                           help='checkpoint to copy the trunk from')
        if name == 'score-asv':
            p.add_argument('--enroll', required=True)
            p.add_argument('--adapt', action='store_true',
                           help='re-center PLDA on enrollment data')
        if name == 'eval':
            p.add_argument('--report', help='per-attack CSV report')
            p.add_argument('--det', help='DET points CSV of the SD scores')
        if name == 'fuse':
            p.add_argument('--apply', action='append', default=[],
                           help='evaluation score file (repeatable)')
    return parser


_NEEDS = dict(synth=('out',), extract=('out',), train=('out', 'protocol'),
              embed=('out',), plda=('out', 'protocol'),
              **{'score-asv': ('out', 'protocol'),
                 'score-sd': ('out', 'protocol')},
              eval=('scores',), fuse=('out', 'scores'))


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        for flag in _NEEDS[args.command]:
            if not getattr(args, flag):
                parser.error('%s needs --%s' % (args.command, flag))
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2

    set_log_level('INFO' if args.verbose else 'WARNING')
    try:
        kwArgs = {}
        config = args.config
        if config is None and args.out and args.command not in (
                'synth', 'extract', 'fuse'):
            stored = _paths(args.out)['config']
            config = stored if os.path.exists(stored) else None
        if config:
            kwArgs.update(read_config(config))
        if args.seed is not None:
            kwArgs['seed'] = args.seed
        if args.features is not None:
            kwArgs['features'] = args.features
        params = generate_parameters(verbose=args.verbose, **kwArgs)
        COMMANDS[args.command](args, params)
    except argparse.ArgumentTypeError as e:
        sys.stderr.write('srasv %s: %s\n' % (args.command, e))
        return 2
    except (SrasvError, IOError, OSError) as e:
        sys.stderr.write('srasv %s: %s\n' % (args.command, e))
        return 1
    except ValueError as e:
        sys.stderr.write('srasv %s: invalid parameter: %s\n' %
                         (args.command, e))
        return 1
    return 0


if __name__ == '__main__':
    sys.exit(main())
