"""The twelve acceptance criteria, each at its stated tolerance.

Every test records a one-line verdict that the terminal summary prints under
"acceptance criteria".  Criteria 8, 9 and 11 share the desk-profile m0d0
source runs, trained once per session.
"""

import hashlib
import math

import numpy as np
import pytest
from scipy import stats

from flavorbench import nn_core as nn
from flavorbench.dqn_agent import (ReplayBuffer, Transition, build_architecture, derive_seeds, train,
                                   write_train_csv)
from flavorbench.env_suite import (StepResult, export_tabular_mdp, make_env, optimal_return_oracle,
                                   wrap_protocol)
from flavorbench.harness.config import default_config
from flavorbench.protocol import (SweepSpec, aggregate_runs, evaluate_policy,
                                  experience_budget, frame_accounting, smooth, sweep_regularizers)
from flavorbench.transfer import (Checkpoint, TransferScheme, decode_checkpoint, encode_checkpoint,
                                  finetune, transfer_init, transferred_layers)

DESK = default_config("desk")
SEEDS5 = (0, 1, 2, 3, 4)
SOURCE = "mini_crossing:m0d0"


@pytest.fixture
def verdict(record_property):
    def record(number, name, passed, detail):
        status = "PASS" if passed else "FAIL"
        record_property("criterion", f"criterion {number:2d} {status}  {name}: {detail}")
        return passed
    return record


def _evaluate(params, arch, flavour, seed):
    settings = DESK.eval_settings()
    return evaluate_policy(params, arch, flavour, settings.episodes, settings.epsilon, seed, settings).mean


def _fmt(values):
    return "[" + ", ".join(f"{v:.1f}" for v in values) + "]"


def _digest(params):
    return hashlib.sha256(b"".join(k.encode() + params[k].tobytes() for k in sorted(params))).hexdigest()


@pytest.fixture(scope="session")
def sources():
    """Desk-profile m0d0 runs per seed, without and with regularization."""
    out = {}
    for seed in SEEDS5:
        plain = train(DESK.agent_with(False), SOURCE, DESK.total_frames, seed, DESK.eval.checkpoint_interval)
        reg = train(DESK.agent_with(True), SOURCE, DESK.total_frames, seed, DESK.eval.checkpoint_interval)
        out[seed] = (plain, reg)
    return out


# 1 ------------------------------------------------------------------------------------

def test_criterion_01_frame_accounting(verdict):
    fa = frame_accounting(50_000_000, 5, 4)
    ok = (fa.steps, fa.updates) == (10_000_000, 2_500_000)
    verdict(1, "frame accounting", ok, f"50M frames, skip 5, lf 4 -> {fa.steps} steps, {fa.updates} updates")
    assert ok


# 2 ------------------------------------------------------------------------------------

def test_criterion_02_sweep_cardinality(verdict):
    n = len(sweep_regularizers(SweepSpec(mode="all")))
    ok = n == 35
    verdict(2, "sweep cardinality", ok, f"{n} unique configs")
    assert ok


# 3 ------------------------------------------------------------------------------------

def test_criterion_03_gradient_correctness(verdict):
    cases = [("micro_fc", nn.micro_fc_architecture()), ("micro_conv", nn.micro_conv_architecture()),
             ("default", nn.default_architecture((6, 7, 9), 3))]
    worst, ok = 0.0, True
    for name, arch in cases:
        for lam in (0.0, 1e-3):
            for dropout in (False, True):
                rng = np.random.default_rng(17)
                params = nn.xavier_init(arch, rng)
                x = rng.random((4, *arch.input_shape))
                target = rng.normal(size=(4, arch.action_count))
                reg = nn.RegularizationConfig(lam, 0.2 if dropout else 0.0, 0.4 if dropout else 0.0)
                masks = nn.make_dropout_masks(arch, reg, rng, batch_size=4) if dropout else None
                report = nn.gradient_check(arch, params, x, target, reg, tolerance=1e-6, masks=masks,
                                           h=1e-5, rng=rng)
                worst = max(worst, report.max_relative_error)
                ok &= report.passed and report.checked > 0
    verdict(3, "gradient correctness", ok, f"12 cases, max relative error {worst:.2e} (tol 1e-6)")
    assert ok


# 4 ------------------------------------------------------------------------------------

def test_criterion_04_paper_parity_constants(verdict):
    a = default_config("paper-parity").agent
    got = (a.step_size, a.batch_size, a.learn_frequency, a.frame_skip, a.sticky_prob, a.buffer_capacity,
           a.eps_initial, a.eps_final, a.eps_decay_frames, a.gamma)
    want = (0.00025, 32, 4, 5, 0.25, 1_000_000, 1.0, 0.01, 1_000_000, 0.99)
    ok = got == want
    verdict(4, "paper-parity constants", ok, f"resolved {got}")
    assert ok


# 5 ------------------------------------------------------------------------------------

def test_criterion_05_dropout_behaviour(verdict):
    arch = nn.default_architecture((6, 7, 9), 3)
    rng = np.random.default_rng(5)
    params = nn.xavier_init(arch, rng)
    x = rng.integers(0, 2, size=(6, 7, 9)).astype(float)

    zero = nn.make_dropout_masks(arch, nn.RegularizationConfig(), rng, batch_size=1)
    identity = np.array_equal(nn.forward(params, arch, x[None], zero)[0], nn.forward(params, arch, x[None])[0])

    # one site at a time: the next layer's input is linear in the mask, so its
    # mean over 10,000 masks should match the clean forward pass
    reg = nn.RegularizationConfig(0.0, 0.25, 0.5)
    _, clean = nn.forward(params, arch, x[None])
    worst = 0.0
    for i, layer in enumerate(arch.layers):
        if not layer.dropout_site:
            continue
        total = np.zeros(clean.inputs[i + 1].size)
        for _ in range(10):
            masks = nn.make_dropout_masks(arch, reg, rng, batch_size=1000)
            for name in masks.keep:
                if name != layer.name:
                    masks.keep[name] = np.ones_like(masks.keep[name])
                    masks.rates[name] = 0.0
            _, cache = nn.forward(params, arch, np.repeat(x[None], 1000, axis=0), masks)
            total += cache.inputs[i + 1].reshape(1000, -1).sum(axis=0)
        ref = clean.inputs[i + 1].ravel()
        worst = max(worst, float(np.linalg.norm(total / 10_000 - ref) / np.linalg.norm(ref)))

    a = evaluate_policy(params, arch, SOURCE, 2, 0.0, 0)
    b = evaluate_policy(params, arch, SOURCE, 2, 0.0, 0)
    deterministic = a.returns == b.returns and np.array_equal(nn.forward(params, arch, x)[0],
                                                              nn.forward(params, arch, x)[0])
    ok = identity and worst <= 0.03 and deterministic
    verdict(5, "dropout behaviour", ok,
            f"p=0 identity {identity}, worst expectation error {worst:.4f} (tol 0.03), eval deterministic {deterministic}")
    assert ok


# 6 ------------------------------------------------------------------------------------

class _NullEnv:
    action_count = 3
    observation_shape = (1, 1, 1)

    def reset(self):
        return np.zeros((1, 1, 1))

    def step(self, action):
        return StepResult(np.zeros((1, 1, 1)), 0.0, False)


def test_criterion_06_replay_and_sticky(verdict):
    buf = ReplayBuffer(10, (1, 1, 1))
    for k in range(10):
        buf.push(Transition(np.zeros((1, 1, 1)), 0, float(k), np.zeros((1, 1, 1)), False))
    rng = np.random.default_rng(99)
    draws = np.concatenate([buf.sample(10, rng).r for _ in range(10_000)]).astype(int)
    pvalue = stats.chisquare(np.bincount(draws, minlength=10)).pvalue

    wrapped = wrap_protocol(_NullEnv(), 1, 0.25, np.random.default_rng(7))
    actions = np.random.default_rng(8).integers(0, 3, 100_000)
    for a in actions:
        wrapped.step(int(a))
    rate = wrapped.sticky_events / wrapped.decisions
    ok = pvalue > 0.01 and abs(rate - 0.25) <= 0.01
    verdict(6, "replay uniformity and sticky rate", ok,
            f"chi-square p={pvalue:.3f} (> 0.01), repeat rate {rate:.4f} (0.25 +- 0.01)")
    assert ok


# 7 ------------------------------------------------------------------------------------

def test_criterion_07_learning_at_desk_scale(verdict):
    agent = DESK.agent_with(False)
    interval, limit = 25_000, 300_000
    reached = {}
    for seed in (0, 1, 2):
        env = make_env(SOURCE, derive_seeds(seed)["env"])
        oracle = optimal_return_oracle(export_tabular_mdp(env, agent.sticky_prob), env.spec.frame_limit)
        arch = build_architecture(agent, env.observation_shape, env.action_count)
        hit = []

        def check(frame, params, oracle=oracle, hit=hit, seed=seed, arch=arch):
            if frame == 0:
                return False
            score = _evaluate(params, arch, SOURCE, seed)
            if score >= 0.8 * oracle:
                hit.append((frame, score, oracle))
                return True
            return False

        train(agent, SOURCE, limit, seed, interval, on_checkpoint=check)
        reached[seed] = hit[0] if hit else None
        if sum(v is not None for v in reached.values()) >= 2:
            break
    passes = sum(v is not None for v in reached.values())
    detail = ", ".join(f"seed {s}: " + (f"{v[1]:.1f}/{v[2]:.1f} at {v[0]} frames" if v else "not reached")
                       for s, v in reached.items())
    ok = passes >= 2
    verdict(7, "learning at desk scale", ok, f"{passes} seeds reached 80% of the oracle ({detail})")
    assert ok


# 8 ------------------------------------------------------------------------------------

def test_criterion_08_generalization_gap(verdict, sources):
    target = "mini_crossing:m1d0"
    zero_shot, scratch = [], []
    for seed in SEEDS5:
        plain, _ = sources[seed]
        zero_shot.append(_evaluate(plain.params, plain.arch, target, seed))
        own = train(DESK.agent_with(False), target, DESK.total_frames, seed, DESK.eval.checkpoint_interval)
        scratch.append(_evaluate(own.params, own.arch, target, seed))
    z, s = aggregate_runs(zero_shot), aggregate_runs(scratch)
    ok = z.mean < s.mean
    verdict(8, "generalization-gap direction", ok,
            f"m1d0 zero-shot {z.format()} vs scratch {s.format()} at {DESK.total_frames} frames")
    assert ok


# 9 ------------------------------------------------------------------------------------

def test_criterion_09_regularized_finetuning(verdict, sources):
    target = "mini_crossing:m1d1"
    frames = max(DESK.transfer.budgets)
    interval = DESK.eval.checkpoint_interval
    reg_ft, plain_ft, scratch = [], [], []
    for seed in SEEDS5:
        plain, reg = sources[seed]
        r, _ = finetune(Checkpoint(reg.params, {}, reg.arch), TransferScheme.FULL, target,
                        DESK.agent_with(True), frames, seed, interval, regularize=DESK.transfer.finetune_regularized)
        p, _ = finetune(Checkpoint(plain.params, {}, plain.arch), TransferScheme.FULL, target,
                        DESK.agent_with(False), frames, seed, interval, regularize=False)
        s = train(DESK.agent_with(False), target, frames, seed, interval)
        reg_ft.append(_evaluate(r.params, r.arch, target, seed))
        plain_ft.append(_evaluate(p.params, p.arch, target, seed))
        scratch.append(_evaluate(s.params, s.arch, target, seed))
    rf, pf, sc = aggregate_runs(reg_ft), aggregate_runs(plain_ft), aggregate_runs(scratch)
    ok = rf.mean > sc.mean and rf.mean > pf.mean
    verdict(9, "regularized fine-tuning direction", ok,
            f"m1d1 at {frames} target frames: regularized fine-tune {rf.format()}, "
            f"fine-tune {pf.format()}, scratch {sc.format()}; per seed {_fmt(reg_ft)} / {_fmt(plain_ft)} / {_fmt(scratch)}")
    assert ok


# 10 -----------------------------------------------------------------------------------

def test_criterion_10_transfer_mechanics(verdict):
    arch = nn.default_architecture((6, 7, 9), 3)
    source = nn.xavier_init(arch, np.random.default_rng(1))
    ok = _digest(transfer_init(source, TransferScheme.FULL, arch, np.random.default_rng(2))) == _digest(source)
    notes = [f"full identical {ok}"]
    for scheme in (TransferScheme.CONV3, TransferScheme.CONV3FC1):
        out = transfer_init(source, scheme, arch, np.random.default_rng(3))
        kept = set(transferred_layers(scheme, arch))
        mask = {k: np.array_equal(out[k], source[k]) for k in source}
        good = all(mask[k] for k in source if k.split(".")[0] in kept) and \
            all(not mask[k] for k in source if k.split(".")[0] not in kept and k.endswith(".w"))
        copied = sorted({k.split(".")[0] for k, v in mask.items() if v and k.endswith(".w")})
        notes.append(f"{scheme.value} copies {copied}")
        ok &= good
    decoded = decode_checkpoint(encode_checkpoint(source, arch, {"flavour": SOURCE}))
    round_trip = _digest(decoded.params) == _digest(source)
    ok &= round_trip
    notes.append(f"round trip hash-equal {round_trip}")
    verdict(10, "transfer-scheme mechanics", ok, ", ".join(notes))
    assert ok


# 11 -----------------------------------------------------------------------------------

def test_criterion_11_determinism(verdict, sources, tmp_path):
    first, _ = sources[0]
    again = train(DESK.agent_with(False), SOURCE, DESK.total_frames, 0, DESK.eval.checkpoint_interval)
    write_train_csv(first.log, tmp_path / "a.csv")
    write_train_csv(again.log, tmp_path / "b.csv")
    same_csv = (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    same_ckpt = all(encode_checkpoint(p, first.arch, {"frame": f}) == encode_checkpoint(q, again.arch, {"frame": g})
                    for (f, p), (g, q) in zip(first.checkpoints, again.checkpoints))
    ok = same_csv and same_ckpt
    verdict(11, "determinism", ok,
            f"{DESK.total_frames}-frame desk runs: training CSV identical {same_csv}, checkpoints identical {same_ckpt}")
    assert ok


# 12 -----------------------------------------------------------------------------------

def test_criterion_12_protocol_arithmetic(verdict):
    smoothed = smooth((1, 3, 5), 2).tolist()
    cell = aggregate_runs((10, 20, 30))
    budget = experience_budget(50_000_000, [50_000_000] * 2, [100_000_000] * 2)
    ok = (smoothed == [1.0, 2.0, 4.0] and cell.mean == 20.0 and abs(cell.std - math.sqrt(200 / 3)) <= 1e-9
          and (budget.scratch_total, budget.finetune_total) == (200_000_000, 150_000_000))
    verdict(12, "protocol arithmetic", ok,
            f"smooth {smoothed}, aggregate ({cell.mean}, {cell.std:.6f}), "
            f"budget {budget.scratch_total} vs {budget.finetune_total}")
    assert ok
