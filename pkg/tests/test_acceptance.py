"""Acceptance suite: one test per criterion, each ending in a printed
pass line with its measured value. Tolerances are pinned here, not in
helper code.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the lines.
"""

import math
import time
from dataclasses import replace

import numpy as np
import pytest

from vireo.autodiff import Tensor, bilinear_resize, contract, conv2d, softmax_axis
from vireo.coarse_prior import class_aggregate, spatial_attention_weights
from vireo.evaluation import ConfusionMatrix, brute_force_iou, miou
from vireo.head import EmbeddingHead, HeadConfig
from vireo.layers import record_attention
from vireo.model import ModelConfig, VireoModel
from vireo.providers import ProviderConfig, TextBank, synth_features, synth_text_bank
from vireo.training import (
    AdamW,
    SyntheticTask,
    TaskConfig,
    TrainConfig,
    convergence_experiment,
    gradient_norm_into_prompts,
    model_config_for_task,
    poly_lr,
    train_run,
    write_trace_csv,
)
from vireo.verification import TOLERANCE, run_suite

DESK_TASK = TaskConfig(seed=0)  # K=6, 16x16, d=16, L=6


@pytest.fixture(scope="module")
def desk_run():
    task = SyntheticTask(DESK_TASK)
    snapshot_before = task.snapshot_providers()
    model = VireoModel(model_config_for_task(DESK_TASK, use_coarse_prior=True), seed=0)
    result = train_run(model, task, TrainConfig(total_iters=300, seed=0))
    return task, model, result, snapshot_before


# -------------------------------------------------------------- criterion 1

def test_gradient_suite_under_tolerance_and_time_budget():
    started = time.perf_counter()
    results = run_suite()
    elapsed = time.perf_counter() - started
    worst = max(err for _, err in results)
    assert len(results) >= 12
    assert worst <= 1e-4, f"worst relative error {worst:.3e}"
    assert elapsed < 60.0, f"suite took {elapsed:.1f}s"
    print(f"\n[PASS] gradient suite: {len(results)} checks, worst rel err "
          f"{worst:.3e} <= 1e-4, {elapsed:.1f}s < 60s")


# -------------------------------------------------------------- criterion 2

def test_normalization_invariants_100_random_configs():
    checked_rows = 0
    checked_planes = 0
    for i in range(100):
        rng = np.random.default_rng(1000 + i)
        h, w = int(rng.integers(2, 5)), int(rng.integers(2, 5))
        d = int(rng.choice([4, 8]))
        layers = int(rng.integers(2, 5))
        cfg = ModelConfig(layers=layers, d=d, d_depth=int(rng.integers(2, 5)),
                          n_prompts=int(rng.integers(2, 4)),
                          decoder_layers=int(rng.integers(1, 3)))
        model = VireoModel(cfg, seed=i)
        provider = ProviderConfig(layers=layers, h=h, w=w, d=d, d_depth=cfg.d_depth)
        stack = synth_features(f"norm{i}", provider, seed=i)
        bank = synth_text_bank([f"c{j}" for j in range(int(rng.integers(2, 5)))],
                               seed=i, d=d)
        sink = []
        with record_attention(sink):
            out = model.forward(stack, bank)
        assert sink, "no attention recorded"
        for weights in sink:
            assert np.all(np.abs(weights.sum(axis=1) - 1.0) <= 1e-6)
            checked_rows += weights.shape[0]
        alpha = out.prior.spatial_weights.data
        assert np.all(np.abs(alpha.sum(axis=(1, 2)) - 1.0) <= 1e-6)
        checked_planes += alpha.shape[0]
    print(f"\n[PASS] normalization: {checked_rows} attention rows and "
          f"{checked_planes} spatial-weight planes sum to 1 +- 1e-6 over 100 configs")


# -------------------------------------------------------------- criterion 3

def _loop_contract(a, b):
    h, w, d = a.shape
    k = b.shape[0]
    out = np.zeros((h, w, k))
    for x in range(h):
        for y in range(w):
            for c in range(k):
                acc = 0.0
                for j in range(d):
                    acc += a[x, y, j] * b[c, j]
                out[x, y, c] = acc
    return out


def _loop_conv(x, kern):
    cin, h, w = x.shape
    cout, _, kh, kw = kern.shape
    pad = kh // 2
    out = np.zeros((cout, h, w))
    for o in range(cout):
        for i in range(h):
            for j in range(w):
                acc = 0.0
                for c in range(cin):
                    for di in range(kh):
                        for dj in range(kw):
                            ii, jj = i + di - pad, j + dj - pad
                            if 0 <= ii < h and 0 <= jj < w:
                                acc += kern[o, c, di, dj] * x[c, ii, jj]
                out[o, i, j] = acc
    return out


def _loop_bilinear(x, oh, ow):
    c, h, w = x.shape
    out = np.zeros((c, oh, ow))
    for ch in range(c):
        for i in range(oh):
            for j in range(ow):
                sy = 0.0 if oh == 1 else i * (h - 1) / (oh - 1)
                sx = 0.0 if ow == 1 else j * (w - 1) / (ow - 1)
                y0, x0 = int(math.floor(sy)), int(math.floor(sx))
                y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
                ty, tx = sy - y0, sx - x0
                top = x[ch, y0, x0] + tx * (x[ch, y0, x1] - x[ch, y0, x0])
                bot = x[ch, y1, x0] + tx * (x[ch, y1, x1] - x[ch, y1, x0])
                out[ch, i, j] = top + ty * (bot - top)
    return out


def _loop_softmax(v):
    e = [math.exp(x - max(v)) for x in v]
    s = sum(e)
    return np.array([x / s for x in e])


def test_oracle_equivalence_all_small_extents_five_seeds():
    cases = 0
    for seed in range(5):
        rng = np.random.default_rng(seed)
        for h in range(1, 6):
            for w in range(1, 6):
                for d in range(1, 6):
                    for k in range(1, 6):
                        a = rng.standard_normal((h, w, d))
                        b = rng.standard_normal((k, d))
                        got = contract(Tensor(a), Tensor(b), "hwd,kd->hwk").data
                        assert np.max(np.abs(got - _loop_contract(a, b))) <= 1e-10
                        cases += 1
        for n in range(1, 6):
            v = rng.standard_normal(n)
            got = softmax_axis(Tensor(v), axis=0).data
            assert np.max(np.abs(got - _loop_softmax(v))) <= 1e-10
            cases += 1
        for h in range(1, 6):
            for w in range(1, 6):
                for cin in range(1, 4):
                    for cout in range(1, 4):
                        for kk in (1, 3):
                            x = rng.standard_normal((cin, h, w))
                            kern = rng.standard_normal((cout, cin, kk, kk))
                            got = conv2d(Tensor(x), Tensor(kern)).data
                            assert np.max(np.abs(got - _loop_conv(x, kern))) <= 1e-10
                            cases += 1
        for hin in range(1, 6):
            for win in range(1, 6):
                for hout in range(1, 6):
                    for wout in range(1, 6):
                        x = rng.standard_normal((2, hin, win))
                        got = bilinear_resize(Tensor(x), hout, wout).data
                        assert np.max(np.abs(got - _loop_bilinear(x, hout, wout))) <= 1e-10
                        cases += 1
        for k in range(1, 6):
            for h in range(1, 6):
                for w in range(1, 6):
                    for d in range(1, 6):
                        fused = rng.standard_normal((h, w, d))
                        alpha = spatial_attention_weights(
                            Tensor(rng.standard_normal((k, h, w)))).data
                        got = class_aggregate(Tensor(alpha), Tensor(fused)).data
                        expected = np.zeros((k, d))
                        for c in range(k):
                            for x in range(h):
                                for y in range(w):
                                    expected[c] += alpha[c, x, y] * fused[x, y]
                        assert np.max(np.abs(got - expected)) <= 1e-10
                        cases += 1
        # query priors: softmax mixture of class embeddings
        from vireo.coarse_prior import CoarsePriorModule
        for n in range(1, 6):
            for k in range(1, 6):
                for d in range(1, 6):
                    module = CoarsePriorModule(np.random.default_rng(seed), d=d,
                                               n_queries=n)
                    module.queries.data[...] = rng.standard_normal((n, d))
                    e = rng.standard_normal((k, d))
                    got = module.query_priors(Tensor(e)).data
                    expected = np.zeros((n, d))
                    for j in range(n):
                        logits = np.array([module.queries.data[j] @ e[c] for c in range(k)])
                        wts = np.exp(logits - logits.max())
                        wts /= wts.sum()
                        for c in range(k):
                            expected[j] += wts[c] * e[c]
                    assert np.max(np.abs(got - expected)) <= 1e-10
                    cases += 1
        # final prediction einsum with scaling
        for h in range(1, 6):
            for w in range(1, 6):
                for k in range(1, 6):
                    for d in range(1, 6):
                        head = EmbeddingHead(np.random.default_rng(seed),
                                             HeadConfig(decoder_layers=1, d=max(4, d),
                                                        temperature=0.7, num_scales=1))
                        em = rng.standard_normal((h, w, d))
                        ec = rng.standard_normal((k, d))
                        got = head.final_prediction(Tensor(em), Tensor(ec)).data
                        expected = np.zeros((h, w, k))
                        for x in range(h):
                            for y in range(w):
                                for c in range(k):
                                    acc = 0.0
                                    for j in range(d):
                                        acc += em[x, y, j] * ec[c, j]
                                    expected[x, y, c] = acc / 0.7
                        assert np.max(np.abs(got - expected)) <= 1e-10
                        cases += 1
    print(f"\n[PASS] oracle equivalence: {cases} brute-force comparisons within 1e-10")


# -------------------------------------------------------------- criterion 4

def test_frozen_contract_after_desk_training(desk_run):
    task, model, _, snapshot_before = desk_run
    assert task.snapshot_providers() == snapshot_before
    optimizer = AdamW(model.named_parameters(), TrainConfig())
    registered = optimizer.registered_ids()
    count = 0
    for image_id in list(task.train_ids) + [i.image_id for i in task.eval_items]:
        stack = task.stack(image_id)
        for t in list(stack.visual.values()) + list(stack.depth.values()):
            assert id(t) not in registered
            assert t.grad is None or not np.any(t.grad)
            count += 1
    assert id(task.train_bank.embeddings) not in registered
    print(f"\n[PASS] frozen contract: {count} provider tensors bitwise unchanged "
          f"after 300 iterations and absent from optimizer state")


# -------------------------------------------------------------- criterion 5

def test_residual_identity_with_zeroed_trainables():
    cfg = model_config_for_task(DESK_TASK, use_coarse_prior=True)
    model = VireoModel(cfg, seed=5)
    for _, p in model.prompt_state.named_parameters():
        p.data[...] = 0.0
    task = SyntheticTask(DESK_TASK)
    stack = task.stack(task.train_ids[0])
    bank = task.train_bank

    out = model.forward(stack, bank)
    for idx, refined in out.refined.items():
        assert refined.data.tobytes() == stack.visual[idx].data.tobytes()

    # head logits must match a build that bypasses the refinement stack
    raw_maps = [stack.visual[i] for i in model.selected]
    prior = model.coarse.compute(raw_maps, bank)
    bypass = model.head.forward(list(reversed(raw_maps)), prior.query_priors, bank)
    assert np.array_equal(out.prediction.logits.data, bypass.logits.data)
    print("\n[PASS] residual identity: zeroed trainables give refined == raw "
          "bitwise; head logits equal the stack-bypassing build")


# -------------------------------------------------------------- criterion 6

def test_cmpe_gradient_claim_and_convergence_medians():
    started = time.perf_counter()
    stronger = []
    for seed in range(5):
        task = SyntheticTask(replace(DESK_TASK, seed=seed))
        model = VireoModel(model_config_for_task(task.config, True), seed=seed)
        with_aux = gradient_norm_into_prompts(model, task, TrainConfig(seed=seed), 0.4)
        without = gradient_norm_into_prompts(model, task, TrainConfig(seed=seed), 0.0)
        stronger.append(with_aux > without)
    assert all(stronger), f"step-1 gradient norms: {stronger}"

    report = convergence_experiment(DESK_TASK, TrainConfig(total_iters=300),
                                    seeds=[0, 1, 2, 3, 4])
    elapsed = time.perf_counter() - started
    assert report.median_with <= report.median_without, (
        f"median iterations: {report.median_with} with vs {report.median_without} without")
    assert elapsed < 600.0, f"experiment took {elapsed:.0f}s"
    print(f"\n[PASS] coarse-prior claim: step-1 prompt-gradient norm larger on 5/5 "
          f"seeds; median iters-to-tau {report.median_with:.0f} (with) <= "
          f"{report.median_without:.0f} (without); {elapsed:.0f}s < 600s")


# -------------------------------------------------------------- criterion 7

def test_open_vocabulary_contract_constructed_case():
    # small canvas + wide embeddings so mask rows provably span < d dims
    task_cfg = TaskConfig(k_seen=6, k_unseen=3, h=4, w=4, d=32, d_depth=8,
                          layers=6, seed=0)
    task = SyntheticTask(task_cfg)
    model = VireoModel(model_config_for_task(task_cfg, True), seed=0)
    train_run(model, task, TrainConfig(total_iters=300, seed=0))

    item = task.eval_items[0]
    stack = task.stack(item.image_id)
    train_bank = task.train_bank
    out6 = model.forward(stack, train_bank, prior_text=train_bank)
    logits6 = out6.prediction.logits.data
    preds6 = np.argmax(logits6, axis=2)

    rows = out6.prediction.mask_embeds.data.reshape(-1, task_cfg.d)
    _, singulars, vt = np.linalg.svd(rows, full_matrices=True)
    rank = int(np.sum(singulars > 1e-10))
    assert rank <= task_cfg.d - 3, f"mask embeddings span {rank} dims"
    unseen_rows = vt[-3:]
    assert np.max(np.abs(rows @ unseen_rows.T)) <= 1e-9  # near-orthogonal by construction

    grown = TextBank(
        classes=train_bank.classes + ["novel_a", "novel_b", "novel_c"],
        embeddings=Tensor(np.vstack([train_bank.embeddings.data, unseen_rows])),
        prompts=train_bank.prompts + ["novel_a", "novel_b", "novel_c"])
    out9 = model.forward(stack, grown, prior_text=train_bank)
    logits9 = out9.prediction.logits.data
    assert logits9.shape == (4, 4, 9)
    preds9 = np.argmax(logits9, axis=2)
    assert not np.any(preds9 >= 6), "a pixel switched to an unseen class"
    assert np.array_equal(preds9, preds6)

    labels = task.labels_for_bank(item.image_id, train_bank)
    iou6 = miou(ConfusionMatrix(6).update(preds6, labels), subset=set(range(6)))
    iou9 = miou(ConfusionMatrix(9).update(preds9, labels), subset=set(range(6)))
    assert iou6.mean is not None
    assert iou9.mean == iou6.mean
    print(f"\n[PASS] open vocabulary: K'=9 logits {logits9.shape} from a K=6 "
          f"checkpoint with no parameter change; unseen rows orthogonal to all "
          f"mask embeddings (max |dot| {np.max(np.abs(rows @ unseen_rows.T)):.1e}); "
          f"no argmax switch; seen mIoU {iou9.mean:.4f} equal under both banks")


# -------------------------------------------------------------- criterion 8

def test_evaluation_exactness_oracle_and_hand_case():
    rng = np.random.default_rng(2024)
    for _ in range(50):
        k = int(rng.integers(2, 7))
        pred = rng.integers(0, k, (7, 9))
        gt = rng.integers(0, k, (7, 9))
        gt[rng.random((7, 9)) < 0.15] = 255
        got = miou(ConfusionMatrix(k).update(pred, gt)).per_class
        expected = brute_force_iou(pred, gt, k)
        for c in range(k):
            assert got[c] == expected[c]  # exact, integer arithmetic on both sides

    cm = ConfusionMatrix(2)
    cm.counts = np.array([[2, 2], [0, 4]], dtype=np.int64)
    assert miou(cm).mean == pytest.approx(0.5833, abs=1e-4)
    print("\n[PASS] evaluation exactness: 50 random map pairs match the "
          "set-arithmetic oracle exactly; hand case mean IoU 0.5833 +- 1e-4")


# -------------------------------------------------------------- criterion 9

def test_schedule_exactness_and_adamw_transcript():
    cfg = TrainConfig(total_iters=40000)
    assert poly_lr(0, cfg) == 1e-4
    assert poly_lr(40000, cfg) == 0.0

    lr, wd, beta1, beta2, eps = 1e-3, 0.05, 0.9, 0.999, 1e-8
    grads = [0.4, -0.2, 0.9]
    value, m, v = 2.0, 0.0, 0.0
    reference = []
    for t, g in enumerate(grads, start=1):
        value = value * (1 - lr * wd)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        value = value - lr * (m / (1 - beta1 ** t)) / (math.sqrt(v / (1 - beta2 ** t)) + eps)
        reference.append(value)

    p = Tensor(np.array([2.0]), requires_grad=True)
    opt = AdamW([("p", p)], TrainConfig(lr0=lr, weight_decay=wd))
    got = []
    for g in grads:
        p.grad = np.array([g])
        opt.step(lr=lr)
        got.append(float(p.data[0]))
    worst = max(abs(a - b) for a, b in zip(got, reference))
    assert worst <= 1e-12
    print(f"\n[PASS] schedule exactness: poly endpoints exact; 3-step AdamW "
          f"transcript within {worst:.1e} <= 1e-12 of the reference")


# -------------------------------------------------------------- criterion 10

def test_determinism_bit_identical_loss_csv(tmp_path):
    def run(path):
        task = SyntheticTask(DESK_TASK)
        model = VireoModel(model_config_for_task(DESK_TASK, True), seed=0)
        result = train_run(model, task, TrainConfig(total_iters=60, seed=0))
        write_trace_csv(result.trace, path)
        return path.read_bytes()

    first = run(tmp_path / "a.csv")
    second = run(tmp_path / "b.csv")
    assert first == second
    print("\n[PASS] determinism: two identically seeded training runs wrote "
          "bit-identical loss CSVs")
