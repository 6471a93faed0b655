"""Adversarial example generation against the toy transcriber.

Three attacks: a white-box gradient attack on the CTC objective with an L2
penalty (targeted), an expectation-over-transformations variant that averages
the objective over simulated playback draws (targeted, robust to
reverberation), and a black-box genetic search (targeted or untargeted) that
only ever queries transcripts and loss values.

Every attack enforces the same loudness budget: the perturbation's peak
loudness must stay ``epsilon_db`` below the carrier's.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .dsp import (
    LEXICON,
    EotFilterSet,
    Signal,
    apply_eot,
    bandpass_fir,
    loudness_db,
    read_wav,
    write_wav,
)
from .metrics import edit_distance
from .nn import Adam, Tensor, no_grad
from .transcriber import TranscriberModel, ctc_greedy_decode, ctc_loss_t, transcribe


@dataclass(frozen=True)
class AttackConfig:
    kind: str
    target: tuple[int, ...] | None = None
    c: float = 50.0
    lr: float = 1e-3
    max_iters: int = 500
    epsilon_db: float = -25.0
    alpha_t: float = 0.05
    eot_filters: EotFilterSet | None = None
    eot_samples: int = 4
    population: int = 64
    mutation_std: float = 0.002
    elite_frac: float = 0.25
    seed: int = 0
    line_search: bool = True

    def __post_init__(self):
        if self.kind not in ("cw", "eot", "genetic"):
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.epsilon_db >= 0:
            raise ValueError("epsilon_db must be negative")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.kind in ("cw", "eot") and not self.target:
            raise ValueError(f"{self.kind} attack is targeted and needs a target")
        if self.target is not None:
            object.__setattr__(self, "target", tuple(int(w) for w in self.target))


@dataclass(frozen=True)
class AdversarialExample:
    x_orig: Signal
    delta: Signal
    x_adv: Signal
    target: str | None
    achieved_transcript: str
    success: bool
    distortion_db: float
    iterations_used: int
    history: tuple = field(default=(), compare=False, repr=False)
    objective_trace: tuple = field(default=(), compare=False, repr=False)

    def __post_init__(self):
        raw = self.x_orig.samples + self.delta.samples
        clipped = np.clip(raw, -1.0, 1.0)
        if not np.allclose(self.x_adv.samples, clipped, atol=1e-12):
            raise ValueError("x_adv must equal clip(x_orig + delta)")


def _target_text(target_words) -> str:
    return " ".join(LEXICON[int(w)] for w in target_words)


def _finish(
    x_orig: Signal,
    delta: np.ndarray,
    target_text: str | None,
    achieved: str,
    success: bool,
    iterations: int,
    history: list,
    objective_trace: tuple = (),
) -> AdversarialExample:
    delta_sig, _ = Signal.from_array(delta, x_orig.sample_rate)
    x_adv, _ = Signal.from_array(x_orig.samples + delta_sig.samples, x_orig.sample_rate)
    dist = loudness_db(delta_sig) - loudness_db(x_orig)
    return AdversarialExample(
        x_orig=x_orig,
        delta=delta_sig,
        x_adv=x_adv,
        target=target_text,
        achieved_transcript=achieved,
        success=success,
        distortion_db=dist,
        iterations_used=iterations,
        history=tuple(history),
        objective_trace=tuple(objective_trace),
    )


class _BestTracker:
    """Keeps the Pareto-best iterate: success first, then lowest distortion."""

    def __init__(self):
        self.best = None  # (success, distortion, delta, achieved)
        self.history = []

    def offer(self, success: bool, distortion: float, delta: np.ndarray, achieved: str):
        self.history.append((bool(success), float(distortion)))
        key = (not success, distortion)
        if self.best is None or key < (not self.best[0], self.best[1]):
            self.best = (bool(success), float(distortion), delta.copy(), achieved)


def _delta_distortion(delta: np.ndarray, x_orig: Signal) -> float:
    peak = float(np.max(np.abs(delta))) if delta.size else 0.0
    if peak == 0.0:
        return float("-inf")
    return 20.0 * np.log10(peak) - loudness_db(x_orig)


def cw_attack(model: TranscriberModel, x_orig: Signal, cfg: AttackConfig) -> AdversarialExample:
    """Gradient attack: min ||d||^2 + c * ctc_loss(x + d, target), with the
    perturbation peak projected onto the loudness budget after every step.

    With ``line_search`` enabled, a step is accepted only if the objective at
    the projected iterate does not increase (halving the step up to 5 times,
    then skipping the iteration), so the recorded objective is non-increasing.
    """
    if cfg.kind != "cw":
        raise ValueError("cfg.kind must be 'cw'")
    target_tokens = [int(w) + 1 for w in cfg.target]
    target_text = _target_text(cfg.target)
    bound = 10.0 ** (cfg.epsilon_db / 20.0) * float(np.max(np.abs(x_orig.samples)))
    n = len(x_orig)
    x_const = x_orig.samples.astype(np.float64)

    delta = Tensor(np.zeros(n, dtype=np.float32), requires_grad=True)
    opt = Adam([delta], lr=cfg.lr)
    tracker = _BestTracker()

    def objective_at(d: np.ndarray):
        with no_grad():
            logits = model.logits_t(Tensor(x_const + d), n)
        loss = float(ctc_loss_t(Tensor(logits.data), target_tokens).item())
        return float(np.sum(d * d)) + cfg.c * loss, logits.data

    def project(d: np.ndarray) -> np.ndarray:
        peak = float(np.max(np.abs(d)))
        if peak > bound > 0:
            d = d * (bound / peak)
        return d

    base_obj, logits0 = objective_at(delta.data.astype(np.float64))
    tracker.offer(
        ctc_greedy_decode(logits0) == target_tokens,
        _delta_distortion(delta.data.astype(np.float64), x_orig),
        delta.data.astype(np.float64),
        " ".join(model.vocab.tokens[t] for t in ctc_greedy_decode(logits0)),
    )
    objective_trace = [base_obj]

    for _ in range(cfg.max_iters):
        opt.zero_grad()
        xs = Tensor(x_const) + delta
        logits = model.logits_t(xs, n)
        loss = delta.square().sum() + cfg.c * ctc_loss_t(logits, target_tokens)
        loss.backward()
        snap = opt.snapshot()
        scale, accepted = 1.0, False
        for _try in range(6):
            opt.step(lr_scale=scale)
            cand = project(delta.data.astype(np.float64))
            obj, cand_logits = objective_at(cand)
            if not cfg.line_search or obj <= base_obj + 1e-9:
                accepted = True
                break
            opt.restore(snap)
            scale *= 0.5
        if accepted:
            delta.data = cand.astype(np.float32)
            base_obj = obj
            decoded = ctc_greedy_decode(cand_logits)
            tracker.offer(
                decoded == target_tokens,
                _delta_distortion(cand, x_orig),
                cand,
                " ".join(model.vocab.tokens[t] for t in decoded),
            )
        objective_trace.append(base_obj)

    success, _, best_delta, achieved = tracker.best
    return _finish(
        x_orig, best_delta, target_text, achieved, success, cfg.max_iters,
        tracker.history, objective_trace,
    )


def eot_attack(model: TranscriberModel, x_orig: Signal, cfg: AttackConfig) -> AdversarialExample:
    """Expectation-over-transformations attack: each step averages the CTC
    objective (plus an L2 norm penalty) over freshly drawn playback
    transformations of x + bandpass(delta); the perturbation is kept inside
    the loudness budget by an L-infinity clip. Success is always measured on
    a fresh simulated playback."""
    if cfg.kind != "eot":
        raise ValueError("cfg.kind must be 'eot'")
    filters = cfg.eot_filters
    if filters is None or not filters.impulse_responses:
        raise ValueError("eot attack needs a non-empty filter set")
    target_tokens = [int(w) + 1 for w in cfg.target]
    target_text = _target_text(cfg.target)
    bound = 10.0 ** (cfg.epsilon_db / 20.0) * float(np.max(np.abs(x_orig.samples)))
    n = len(x_orig)
    rng = np.random.default_rng([cfg.seed & 0x7FFFFFFF, 0xE0A])

    h_band = bandpass_fir(filters.band, x_orig.sample_rate)
    # delta passes the band limiter twice (once explicitly, once inside the
    # playback simulation); fold both into a single kernel
    h_double = np.convolve(h_band, h_band)
    x_banded = np.convolve(x_orig.samples, h_band, mode="full")[
        (len(h_band) - 1) // 2 : (len(h_band) - 1) // 2 + n
    ].astype(np.float32)

    delta = Tensor(np.zeros(n, dtype=np.float32), requires_grad=True)
    opt = Adam([delta], lr=cfg.lr)
    tracker = _BestTracker()

    def playback_success(d: np.ndarray, t_idx: int, noise_seed: int):
        x_adv, _ = Signal.from_array(x_orig.samples + d, x_orig.sample_rate)
        played = apply_eot(x_adv, filters, t_idx, noise_seed)
        achieved = transcribe(model, played)
        return achieved == target_text, achieved

    for it in range(cfg.max_iters):
        opt.zero_grad()
        delta_bb = delta.conv1d_fixed(h_double, mode="same")
        core = Tensor(x_banded) + delta_bb
        loss_sum = None
        for _ in range(cfg.eot_samples):
            t_idx = int(rng.integers(0, len(filters.impulse_responses)))
            y = core.conv1d_fixed(filters.impulse_responses[t_idx], mode="full_trunc")
            if filters.noise_std > 0:
                y = y + Tensor(rng.normal(0.0, filters.noise_std, n).astype(np.float32))
            logits = model.logits_t(y, n)
            term = ctc_loss_t(logits, target_tokens)
            loss_sum = term if loss_sum is None else loss_sum + term
        loss = loss_sum / float(cfg.eot_samples) + cfg.alpha_t * (delta.square().sum() + 1e-12).sqrt()
        loss.backward()
        opt.step()
        delta.data = np.clip(delta.data, -bound, bound).astype(np.float32)

        d64 = delta.data.astype(np.float64)
        ok, achieved = playback_success(
            d64,
            int(rng.integers(0, len(filters.impulse_responses))),
            int(rng.integers(0, 2**31 - 1)),
        )
        tracker.offer(ok, _delta_distortion(d64, x_orig), d64, achieved)

    success, _, best_delta, achieved = tracker.best
    return _finish(x_orig, best_delta, target_text, achieved, success, cfg.max_iters, tracker.history)


class BlackBoxModel:
    """Query-only surface for black-box attacks: transcripts and loss values.

    Exposes no parameters, gradients, or logits tensors.
    """

    def __init__(self, model: TranscriberModel):
        self._transcribe = lambda sig: transcribe(model, sig)
        vocab = model.vocab

        def loss_value(sig: Signal, target_words) -> float:
            from .transcriber import ctc_loss_value

            logits = model.logits(sig)
            return ctc_loss_value(logits, [int(w) + 1 for w in target_words])

        self._loss = loss_value
        self.vocab_tokens = vocab.tokens

    def transcribe(self, sig: Signal) -> str:
        return self._transcribe(sig)

    def loss(self, sig: Signal, target_words) -> float:
        return self._loss(sig, target_words)


def genetic_attack(black_box, x_orig: Signal, cfg: AttackConfig, truth_words=None) -> AdversarialExample:
    """Black-box genetic search over perturbations.

    Fitness: targeted mode maximizes -loss(x + d, target); untargeted mode
    maximizes the word edit distance of the transcript from the ground truth
    (``truth_words`` required). Elitist selection, uniform crossover on
    256-sample blocks, Gaussian mutation, per-generation loudness projection.
    """
    if cfg.kind != "genetic":
        raise ValueError("cfg.kind must be 'genetic'")
    targeted = cfg.target is not None
    if not targeted and truth_words is None:
        raise ValueError("untargeted genetic attack needs truth_words")
    rng = np.random.default_rng([cfg.seed & 0x7FFFFFFF, 0x6E])
    n = len(x_orig)
    bound = 10.0 ** (cfg.epsilon_db / 20.0) * float(np.max(np.abs(x_orig.samples)))
    pop = [np.zeros(n) for _ in range(cfg.population)]
    n_elite = max(1, int(round(cfg.elite_frac * cfg.population)))
    target_text = _target_text(cfg.target) if targeted else None
    truth_text = _target_text(truth_words) if truth_words is not None else None
    tracker = _BestTracker()
    block = 256

    def member_signal(d: np.ndarray) -> Signal:
        sig, _ = Signal.from_array(x_orig.samples + d, x_orig.sample_rate)
        return sig

    def fitness(d: np.ndarray) -> float:
        if targeted:
            return -black_box.loss(member_signal(d), cfg.target)
        hyp = black_box.transcribe(member_signal(d)).split()
        ref = [LEXICON[int(w)] for w in truth_words]
        return float(edit_distance(ref, hyp))

    for gen in range(cfg.max_iters):
        scores = np.array([fitness(d) for d in pop])
        order = np.argsort(-scores, kind="stable")
        elites = [pop[i] for i in order[:n_elite]]

        best = elites[0]
        achieved = black_box.transcribe(member_signal(best))
        ok = (achieved == target_text) if targeted else (achieved != truth_text)
        tracker.offer(ok, _delta_distortion(best, x_orig), best, achieved)

        children = []
        while len(children) < cfg.population - n_elite:
            pa, pb = rng.integers(0, n_elite, size=2)
            mask_blocks = rng.random(int(np.ceil(n / block))) < 0.5
            mask = np.repeat(mask_blocks, block)[:n]
            child = np.where(mask, elites[pa], elites[pb])
            if cfg.mutation_std > 0:
                child = child + rng.normal(0.0, cfg.mutation_std, n)
            peak = float(np.max(np.abs(child)))
            if peak > bound > 0:
                child = child * (bound / peak)
            children.append(child)
        pop = elites + children

    success, _, best_delta, achieved = tracker.best
    return _finish(
        x_orig, best_delta, target_text, achieved, success, cfg.max_iters, tracker.history
    )


def evaluate_attack(batch: list[AdversarialExample]) -> dict:
    """Aggregate a batch: success rate, distortion stats, mean iterations.

    Distortion means/maxes skip -inf entries (zero perturbations)."""
    if not batch:
        raise ValueError("evaluate_attack needs a non-empty batch")
    succ = [ex.success for ex in batch]
    dist = [ex.distortion_db for ex in batch if np.isfinite(ex.distortion_db)]
    return {
        "n": len(batch),
        "success_rate": float(np.mean(succ)),
        "mean_distortion_db": float(np.mean(dist)) if dist else float("-inf"),
        "max_distortion_db": float(np.max(dist)) if dist else float("-inf"),
        "mean_iterations": float(np.mean([ex.iterations_used for ex in batch])),
    }


def save_attack_results(out_dir, examples: list[AdversarialExample], kind: str) -> Path:
    """One JSON line per example; waveforms stored as WAVs next to the file."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jsonl = out / f"{kind}_results.jsonl"
    with open(jsonl, "w") as fh:
        for i, ex in enumerate(examples):
            orig = f"{kind}_{i:03d}_orig.wav"
            adv = f"{kind}_{i:03d}_adv.wav"
            write_wav(out / orig, ex.x_orig)
            write_wav(out / adv, ex.x_adv)
            rec = {
                "kind": kind,
                "target": ex.target,
                "achieved_transcript": ex.achieved_transcript,
                "success": ex.success,
                "distortion_db": ex.distortion_db,
                "iterations_used": ex.iterations_used,
                "clip_count": ex.x_adv.clip_count,
                "wav_orig": orig,
                "wav_adv": adv,
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return jsonl


def load_attack_results(jsonl_path) -> list[dict]:
    path = Path(jsonl_path)
    records = []
    with open(path) as fh:
        for line in fh:
            rec = json.loads(line)
            rec["x_orig"] = read_wav(path.parent / rec["wav_orig"])
            rec["x_adv"] = read_wav(path.parent / rec["wav_adv"])
            records.append(rec)
    return records
