"""Command-line entry point: ``diffuse-se <command> [flags]``.

Global flags (``--seed``, ``--jobs``, ``--config``, ``--verbose``) may appear
before or after the command name. A config file holds ``key = value`` lines
whose keys are flag names with dashes turned into underscores; explicit
flags win over the file, and the file wins over built-in defaults.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
from concurrent.futures import ProcessPoolExecutor
import logging
from pathlib import Path
import sys

import numpy as np

log = logging.getLogger("diffuse_se")

COMMANDS = ("schedule-inspect", "synth-data", "train", "enhance", "evaluate", "oracle-check")


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ parsing

def _beta_range(text):
    try:
        lo, hi = (float(v) for v in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected lo:hi, got {text!r}")
    return lo, hi


def _floats(text):
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of numbers, got {text!r}")


def _words(text):
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _global_flags(p, suppress):
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--seed", type=int, default=d if suppress else 0,
                   help="seed for every random draw (default 0)")
    p.add_argument("--jobs", type=int, default=d if suppress else 1,
                   help="worker processes for per-utterance work (default 1)")
    p.add_argument("--config", default=d, help="key = value file of flag defaults")
    p.add_argument("--verbose", action="store_true", default=d if suppress else False)


def build_parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(prog="diffuse-se", allow_abbrev=False,
                                  description="Diffusion-based speech enhancement at desk scale.")
    _global_flags(top, suppress=False)
    sub = top.add_subparsers(dest="command", metavar="command", required=True)

    def cmd(name, help_):
        p = sub.add_parser(name, help=help_, description=help_, allow_abbrev=False)
        _global_flags(p, suppress=True)
        return p

    p = cmd("schedule-inspect", "print the per-step schedule table")
    p.add_argument("--T", type=int, default=50)
    p.add_argument("--beta", type=_beta_range, default=(1e-4, 0.05), metavar="LO:HI")
    p.add_argument("--gamma1", type=float, default=0.2)

    p = cmd("synth-data", "write a synthetic noisy-speech corpus and its manifest")
    p.add_argument("--outdir", required=True)
    p.add_argument("--n-train", type=int, default=40)
    p.add_argument("--n-valid", type=int, default=5)
    p.add_argument("--n-test", type=int, default=10)
    p.add_argument("--duration", type=float, default=2.0, help="seconds per utterance")
    p.add_argument("--snrs", type=_floats, default=(0.0, 5.0, 10.0, 15.0))
    p.add_argument("--test-snrs", type=_floats, default=None)
    p.add_argument("--noise-kinds", type=_words, default=None)

    p = cmd("train", "train a noise predictor (pretrain, finetune, or both)")
    p.add_argument("--profile", choices=("tiny", "base", "large"), default="tiny")
    p.add_argument("--phase", choices=("pretrain", "finetune", "both"), default="finetune")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output directory for checkpoints")
    p.add_argument("--max-iters", type=int, default=1000)
    p.add_argument("--pretrain-iters", type=int, default=None,
                   help="phase-1 iterations with --phase both (default: --max-iters)")
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--valid-every", type=int, default=500)
    p.add_argument("--lr", type=float, default=None, help="override the profile learning rate")
    p.add_argument("--batch-size", type=int, default=None)

    p = cmd("enhance", "enhance noisy speech with a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--manifest", help="enhance every row of --split")
    src.add_argument("--input", help="a single noisy WAV")
    p.add_argument("--split", default="test")
    p.add_argument("--outdir", help="output directory (manifest mode)")
    p.add_argument("--output", help="output WAV (single-file mode)")
    p.add_argument("--variant", choices=("rp", "rp-nin", "rp-nout", "rp-ninout", "srp"),
                   default="srp")
    p.add_argument("--schedule", choices=("full", "fast"), default="full")
    p.add_argument("--fast-betas", type=_floats, default=None,
                   help="comma list; default is the profile's published fast schedule")
    p.add_argument("--gamma1", type=float, default=0.2)
    p.add_argument("--mix", type=float, default=None,
                   help="weight on the noisy input in a final output blend "
                        "(default 0.2 for rp-nout/rp-ninout, 0 otherwise)")
    p.add_argument("--trace", help="write per-step (t, |eps|, |x|) records here")

    p = cmd("evaluate", "score enhanced files against the clean references")
    p.add_argument("--manifest", required=True)
    p.add_argument("--enhanced", required=True, help="directory of enhanced WAVs")
    p.add_argument("--split", default="test")
    p.add_argument("--report", help="write the report here instead of stdout")
    p.add_argument("--export", help="copy paired clean/enhanced WAVs here for external scoring")

    p = cmd("oracle-check", "run the analytic oracle self-checks")
    p.add_argument("--inject-fault", choices=("sigma",), default=None, help=argparse.SUPPRESS)
    return top


def _subparser(top, name):
    for a in top._actions:
        if isinstance(a, argparse._SubParsersAction):
            return a.choices[name]
    raise KeyError(name)


def read_config(path) -> dict:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


def _apply_config(top, command, cfg: dict):
    """Turn config strings into typed defaults on the command's parser."""
    sp = _subparser(top, command)
    actions = {a.dest: a for a in sp._actions if a.dest != "help"}
    typed = {}
    for k, v in cfg.items():
        if k == "config":
            continue
        if k not in actions:
            raise UsageError(f"config key {k!r} is not a flag of {command}")
        a = actions[k]
        if isinstance(a, argparse._StoreTrueAction):
            typed[k] = v.lower() in ("1", "true", "yes", "on")
            continue
        try:
            val = a.type(v) if a.type else v
        except (argparse.ArgumentTypeError, ValueError) as e:
            raise UsageError(f"config key {k!r}: {e}")
        if a.choices is not None and val not in a.choices:
            raise UsageError(f"config key {k!r}: {val!r} not in {sorted(a.choices)}")
        typed[k] = val
    # required flags satisfied by the config file stop being required
    for k in typed:
        actions[k].required = False
    for g in sp._mutually_exclusive_groups:
        if any(a.dest in typed for a in g._group_actions):
            g.required = False
    # global flags default on the top parser so an explicit value on either side wins
    glob = {k: typed.pop(k) for k in ("seed", "jobs", "verbose") if k in typed}
    top.set_defaults(**glob)
    sp.set_defaults(**typed)


def parse(argv):
    pre = argparse.ArgumentParser(add_help=False, allow_abbrev=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    top = build_parser()
    command = next((w for w in argv if w in COMMANDS), None)
    if known.config and command:
        try:
            cfg = read_config(known.config)
        except OSError as e:
            raise UsageError(f"cannot read config: {e}")
        _apply_config(top, command, cfg)
    ns = top.parse_args(argv)
    if ns.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    return ns


# ----------------------------------------------------------------- commands

def _out(text, path=None):
    if path:
        Path(path).write_text(text, encoding="utf-8", newline="\n")
    else:
        sys.stdout.write(text)
        sys.stdout.flush()


def cmd_schedule_inspect(a):
    from .schedule import GammaPolicy, gamma, linear_schedule, srp_sigma_hat
    s = linear_schedule(a.T, *a.beta)
    p = GammaPolicy(a.gamma1)
    rows = ["t\tbeta\talpha\talpha_bar\tsigma\tgamma\tsigma_hat"]
    for t in range(1, s.T + 1):
        vals = (s.beta(t), s.alpha(t), s.alpha_bar(t), s.sigma(t), gamma(s, p, t),
                srp_sigma_hat(s, p, t, clamp=(t == 1)))
        rows.append(f"{t}\t" + "\t".join(f"{v:.10g}" for v in vals))
    _out("\n".join(rows) + "\n")
    return 0


def cmd_synth_data(a):
    from .audio import NOISE_KINDS, CorpusSpec, synth_corpus
    kinds = a.noise_kinds or NOISE_KINDS
    bad = [k for k in kinds if k not in NOISE_KINDS]
    if bad:
        raise UsageError(f"unknown noise kinds {bad}; choose from {list(NOISE_KINDS)}")
    spec = CorpusSpec(a.n_train, a.n_valid, a.n_test, a.duration, a.snrs, a.test_snrs, kinds)
    m = synth_corpus(spec, a.outdir, np.random.default_rng(a.seed))
    _out(f"wrote {len(m)} utterances to {Path(a.outdir) / 'manifest.tsv'}\n")
    return 0


def cmd_train(a):
    from dataclasses import replace
    from .audio import Manifest
    from .profiles import PROFILES
    from .trainer import TrainConfig, pretrain_then_finetune, train_loop

    prof = PROFILES[a.profile]
    m = Manifest.load(a.manifest)
    common = dict(learning_rate=prof.learning_rate if a.lr is None else a.lr,
                  batch_size=prof.batch_size if a.batch_size is None else a.batch_size,
                  early_stop_patience=a.patience, seed=a.seed, crop_frames=prof.crop_frames,
                  valid_every=a.valid_every)
    fine = TrainConfig(max_iters=a.max_iters, phase="finetune", **common)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    sched = prof.schedule()

    def progress(line):
        _out(line + "\n")

    if a.phase == "both":
        pre_iters = a.max_iters if a.pretrain_iters is None else a.pretrain_iters
        pre = replace(fine, phase="pretrain", max_iters=pre_iters)
        r = pretrain_then_finetune(m, pre, fine, sched, prof.predictor, out, progress)
    else:
        cfg = replace(fine, phase=a.phase)
        r = train_loop(m, cfg, sched, prof.predictor, out / f"{a.phase}.ckpt", progress=progress,
                       extra_metadata={"profile": prof.name})
    _out(f"best\titer={r.best_iter}\tvalid_loss={r.best_valid:.6f}\tstopped={r.stopped}"
         f"\tcheckpoint={r.path}\n")
    return 0


def _enhance_one(job):
    """Worker: (ckpt_path, noisy samples, spec fields, seed tuple) -> (samples, trace text)."""
    from .audio import AudioBuffer, conditioner_for
    from .predictor import NetworkPredictor
    from .sampler import ReverseTrace, SamplerSpec, enhance, mix_output
    path, y, spec_kw, post_mix, seed, want_trace = job
    c = _load_ckpt(path)
    kind = "mel" if c.params.config.conditioner_dim == 80 else "linear"
    cond = conditioner_for(kind, AudioBuffer(y))
    tr = ReverseTrace() if want_trace else None
    x = enhance(NetworkPredictor(c.params), y, cond, SamplerSpec(**spec_kw), c.schedule,
                np.random.default_rng(seed), trace=tr)
    if post_mix:
        x = mix_output(x, y, post_mix)
    return x, (tr.to_text() if tr is not None else None)


_CKPT_CACHE = {}


def _load_ckpt(path):
    from . import checkpoint as ckpt
    if path not in _CKPT_CACHE:
        _CKPT_CACHE[path] = ckpt.load(path)
    return _CKPT_CACHE[path]


def _pmap(fn, jobs, n_jobs):
    if n_jobs == 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n_jobs) as ex:
        return list(ex.map(fn, jobs))


def cmd_enhance(a):
    from .audio import AudioBuffer, Manifest, read_wav, write_wav
    from .metrics import enhanced_name
    from .profiles import PROFILES
    from .schedule import GammaPolicy, fast_alignment

    if not Path(a.checkpoint).exists():
        raise FileNotFoundError(f"checkpoint not found: {a.checkpoint}")
    c = _load_ckpt(a.checkpoint)
    fast_betas = a.fast_betas
    if a.schedule == "fast" and fast_betas is None:
        name = c.metadata.get("profile")
        fast_betas = PROFILES[name].fast_betas if name in PROFILES else PROFILES["base"].fast_betas
    if a.schedule == "fast":
        fast_alignment(c.schedule, fast_betas)  # fail early on a bad alignment
    n_out = a.variant in ("rp-nout", "rp-ninout")
    mix = (0.2 if n_out else 0.0) if a.mix is None else a.mix
    if not 0.0 <= mix <= 1.0:
        raise UsageError("--mix must lie in [0, 1]")
    spec_kw = dict(variant=a.variant, schedule_mode=a.schedule, fast_betas=fast_betas,
                   gamma_policy=GammaPolicy(a.gamma1),
                   output_mix_weight=mix if n_out else 0.2)
    post_mix = 0.0 if n_out else mix

    if a.input:
        if not a.output:
            raise UsageError("--input needs --output")
        items = [(Path(a.input).stem, read_wav(a.input).samples, Path(a.output))]
    else:
        if not a.outdir:
            raise UsageError("--manifest needs --outdir")
        m = Manifest.load(a.manifest)
        rows = m.split(a.split)
        if not rows:
            raise ValueError(f"manifest has no {a.split!r} rows")
        items = [(Path(r.clean_path).stem, m.load_pair(r)[1].samples,
                  Path(a.outdir) / enhanced_name(r.clean_path)) for r in rows]
        Path(a.outdir).mkdir(parents=True, exist_ok=True)
    jobs = [(a.checkpoint, y, spec_kw, post_mix, (a.seed, i), bool(a.trace))
            for i, (_, y, _) in enumerate(items)]
    results = _pmap(_enhance_one, jobs, a.jobs)
    traces = []
    for (uid, _, dest), (x, tr) in zip(items, results):
        write_wav(dest, AudioBuffer(np.clip(x, -1.0, 32767 / 32768)))
        if tr is not None:
            traces.append(f"# {uid}\n{tr}")
        log.info("enhanced %s", uid)
    if a.trace:
        _out("".join(traces), a.trace)
    _out(f"enhanced {len(items)} file(s) with {a.variant} ({a.schedule} schedule)\n")
    return 0


def cmd_evaluate(a):
    from .audio import Manifest
    from .metrics import evaluate
    rep = evaluate(Manifest.load(a.manifest), a.enhanced, a.split, a.export)
    _out(rep.to_text(), a.report)
    if a.report:
        s = rep.summary()
        _out(f"si_sdr_db median {s['si_sdr_db']['median']:.6f}\t"
             f"seg_snr_db median {s['seg_snr_db']['median']:.6f}\n")
    return 0


def cmd_oracle_check(a):
    from .selfcheck import oracle_check
    res = oracle_check(a.seed, corrupt_sigma=a.inject_fault == "sigma",
                       emit=lambda l: _out(l + "\n"))
    n_fail = sum(not r.passed for r in res)
    _out(f"{len(res) - n_fail}/{len(res)} checks passed\n")
    return 1 if n_fail else 0


HANDLERS = {"schedule-inspect": cmd_schedule_inspect, "synth-data": cmd_synth_data,
            "train": cmd_train, "enhance": cmd_enhance, "evaluate": cmd_evaluate,
            "oracle-check": cmd_oracle_check}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        a = parse(argv)
    except SystemExit as e:  # argparse usage errors and --help
        return int(e.code or 0)
    except UsageError as e:
        sys.stderr.write(f"diffuse-se: usage error: {e}\n")
        return 2
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return HANDLERS[a.command](a)
    except UsageError as e:
        sys.stderr.write(f"diffuse-se {a.command}: usage error: {e}\n")
        return 2
    except Exception as e:  # runtime failure: structured one-line error
        if a.verbose:
            log.exception("failed")
        sys.stderr.write(f"diffuse-se {a.command}: error: {type(e).__name__}: {e}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
