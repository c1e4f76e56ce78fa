"""End-to-end acceptance checks, one test per shipping criterion.

Each test prints a single ``[acceptance] <name>: PASS/FAIL`` line (visible
under ``pytest -s``) and then asserts, so the suite both reports and
gates. Tolerances are stated inline next to each check.
"""

import os
import time

import numpy as np
import pytest

from covidcaps.capsule import (
    RoutingState,
    capsule_lengths,
    predict_votes,
    route,
    squash,
)
from covidcaps.data import (
    COVID_BINARY,
    NIH_5CLASS,
    DatasetManifest,
    load_batch,
    load_dataset,
    map_nih_labels,
    split_train_val,
)
from covidcaps.metrics import ScoredPrediction, predict_argmax, roc_auc
from covidcaps.model import (
    ArchitectureConfig,
    build_model,
    freeze_feature_extractor,
    load_checkpoint,
    replace_head,
    save_checkpoint,
)
from covidcaps.objective import ClassBalance, LossConfig, batch_objective, class_weighted_loss, margin_loss
from covidcaps.optim import Adam
from covidcaps.synthetic import binary_shape_image, generate_binary_dataset
from covidcaps.tensor import Tensor, conv2d
from covidcaps.trainer import TrainConfig, train, write_history

from helpers import (
    auc_bruteforce,
    finite_difference_gradients,
    margin_loss_reference,
    relative_error,
    route_reference,
    squash_reference,
)


def _verdict(name: str, ok: bool, detail: str = "") -> None:
    line = f"[acceptance] {name}: {'PASS' if ok else 'FAIL'}"
    if detail:
        line += f" ({detail})"
    print(line, flush=True)


def small_arch(num_classes=2, channels=(8, 8, 16, 16)):
    return ArchitectureConfig(
        input_hw=(32, 32),
        conv_channels=channels,
        conv_kernels=(3, 3, 3, 3),
        primary_capsule_dim=4,
        mid_capsules=(8, 4),
        final_capsules=(num_classes, 8),
    )


class TestGradientCorrectness:
    def test_reduced_model_gradients_match_finite_differences(self):
        """Full-chain analytic gradients vs central differences.

        Reduced stack (two conv layers, one routed capsule layer, the
        weighted margin objective) in float64 on 16x16 inputs; relative
        error below 1e-3 on at least 99% of the parameters, finished in
        under 60 seconds.
        """
        start = time.time()
        rng = np.random.default_rng(12)
        x = Tensor(rng.uniform(0.0, 1.0, size=(4, 1, 16, 16)))
        targets = np.array([1, 0, 1, 0])
        balance = ClassBalance(positives=30, negatives=70)
        loss_cfg = LossConfig()

        w1 = Tensor(rng.normal(0.0, np.sqrt(2.0 / 9), size=(4, 1, 3, 3)), requires_grad=True)
        b1 = Tensor(rng.normal(0.0, 0.1, size=4), requires_grad=True)
        w2 = Tensor(rng.normal(0.0, np.sqrt(2.0 / 36), size=(4, 4, 3, 3)), requires_grad=True)
        b2 = Tensor(rng.normal(0.0, 0.1, size=4), requires_grad=True)
        # 16 -> 14 (stride 1) -> 6 (stride 2); 4*6*6 = 144 values = 36 capsules of 4
        w_caps = Tensor(rng.uniform(-0.5, 0.5, size=(36, 2, 4, 4)), requires_grad=True)
        params = [w1, b1, w2, b2, w_caps]

        def class_capsule_lengths() -> Tensor:
            h = conv2d(x, w1, b1, stride=1).relu()
            h = conv2d(h, w2, b2, stride=2).relu()
            u = squash(h.reshape(4, 36, 4))
            v, _ = route(predict_votes(u, w_caps), iters=3)
            return capsule_lengths(v)

        def objective() -> Tensor:
            return batch_objective(
                class_capsule_lengths(), targets, loss_cfg, balance=balance, positive_index=1
            )

        # the margin objective has hinge kinks at 0.1 and 0.9; central
        # differences are only trustworthy away from them
        base_lengths = class_capsule_lengths().data
        kink_gap = np.minimum(np.abs(base_lengths - 0.9), np.abs(base_lengths - 0.1)).min()
        assert kink_gap > 0.02, f"seed lands a length within {kink_gap} of a hinge"

        loss = objective()
        loss.backward(params=params)
        analytic = [p.grad.copy() for p in params]
        numeric = finite_difference_gradients(
            lambda: objective().item(), [p.data for p in params], h=1e-3
        )

        rels = np.concatenate(
            [relative_error(a, n).ravel() for a, n in zip(analytic, numeric)]
        )
        total = rels.size
        good = int((rels < 1e-3).sum())
        elapsed = time.time() - start
        ok = good / total >= 0.99 and elapsed < 60.0
        _verdict(
            "reduced-model-gradient-check",
            ok,
            f"{good}/{total} params under 1e-3 rel err, {elapsed:.1f}s",
        )
        assert ok


class TestRoutingInvariants:
    def test_routing_by_agreement_contract(self):
        rng = np.random.default_rng(3)

        # couplings are a distribution over output capsules at every iteration
        votes = Tensor(rng.normal(size=(2, 6, 4, 3)))
        trace: list[RoutingState] = []
        route(votes, iters=4, trace=trace)
        sums_ok = all(
            np.abs(state.c.sum(axis=-1) - 1.0).max() < 1e-6 for state in trace
        )

        # before any agreement signal the couplings are exactly uniform
        uniform_ok = bool(np.all(trace[0].c == 1.0 / 4))

        # a single output capsule reduces routing to squash of the vote sum
        single_votes = rng.normal(size=(1, 7, 1, 4))
        v_single, _ = route(Tensor(single_votes), iters=3)
        single_err = np.abs(
            v_single.data - squash_reference(single_votes.sum(axis=1))
        ).max()

        # 2-in/2-out case against an independently scripted oracle
        oracle_err = 0.0
        for iters in (1, 2, 3, 5):
            small = rng.normal(size=(2, 2, 3))
            v_pkg, _ = route(Tensor(small[None]), iters=iters)
            v_ref, _ = route_reference(small, iters)
            oracle_err = max(oracle_err, np.abs(v_pkg.data[0] - v_ref).max())

        ok = sums_ok and uniform_ok and single_err < 1e-9 and oracle_err < 1e-9
        _verdict(
            "routing-by-agreement",
            ok,
            f"single-output err {single_err:.2e}, oracle err {oracle_err:.2e}",
        )
        assert ok


class TestSquashContract:
    def test_squash_bounds_and_formula(self):
        rng = np.random.default_rng(4)
        # scales spanning tiny to huge vectors
        vecs = rng.normal(size=(10_000, 8)) * (10.0 ** rng.uniform(-3, 3, size=(10_000, 1)))
        out = squash(Tensor(vecs)).data
        norms = np.linalg.norm(out, axis=-1)
        bounded = bool((norms < 1.0).all())

        want = squash_reference(vecs)
        formula_err = float(np.abs(out - want).max())

        zero_out = squash(Tensor(np.zeros((3, 5)))).data
        zero_exact = bool(np.all(zero_out == 0.0))

        ok = bounded and formula_err < 1e-6 and zero_exact
        _verdict(
            "squash-nonlinearity",
            ok,
            f"max norm {norms.max():.6f}, formula err {formula_err:.2e}",
        )
        assert ok


class TestObjectiveOracles:
    def test_margin_loss_and_class_weighting(self):
        rng = np.random.default_rng(5)
        max_err = 0.0
        for _ in range(1000):
            k = int(rng.integers(2, 6))
            lengths = rng.uniform(0, 1, size=k)
            one_hot = np.zeros(k)
            one_hot[rng.integers(0, k)] = 1.0
            got = margin_loss(lengths, one_hot)
            want = margin_loss_reference(lengths, one_hot)
            max_err = max(max_err, abs(got - want))
        oracle_ok = max_err < 1e-6

        weights_ok = True
        for _ in range(500):
            n_pos = int(rng.integers(1, 10_000))
            n_neg = int(rng.integers(1, 10_000))
            b = ClassBalance(positives=n_pos, negatives=n_neg)
            if b.positive_weight + b.negative_weight != 1.0:
                weights_ok = False
                break

        balanced = ClassBalance(positives=250, negatives=250)
        lp, ln = 1.7, 0.3
        mean_err = abs(class_weighted_loss(lp, ln, balanced) - (lp + ln) / 2.0)
        balanced_ok = balanced.positive_weight == 0.5 and mean_err < 1e-12

        ok = oracle_ok and weights_ok and balanced_ok
        _verdict(
            "margin-objective-oracles",
            ok,
            f"max loss err {max_err:.2e}, balanced-mean err {mean_err:.2e}",
        )
        assert ok


class TestLearnability:
    def test_synthetic_shapes_reach_train_accuracy(self, tmp_path):
        """A small full-pipeline model separates squares from rings.

        At least 95% accuracy on its own training split within 50 epochs,
        completing in under ten minutes.
        """
        start = time.time()
        manifest = generate_binary_dataset(tmp_path, n_positive=80, n_negative=120, seed=0)
        ds = load_dataset(manifest, COVID_BINARY)
        model = build_model(small_arch(), seed=0)
        cfg = TrainConfig(epochs=50, batch_size=16, lr=1e-3, seed=0, val_fraction=0.1)
        best, history = train(model, ds, cfg)

        train_recs, _ = split_train_val(ds.records, cfg.val_fraction, cfg.seed)
        images, targets, _ = load_batch(train_recs, size=32)
        chunks = [
            best.predict_proba(Tensor(images[i : i + 64]))
            for i in range(0, len(images), 64)
        ]
        lengths = np.concatenate(chunks)
        accuracy = float((predict_argmax(lengths) == targets).mean())
        elapsed = time.time() - start

        ok = accuracy >= 0.95 and elapsed < 600.0
        _verdict(
            "synthetic-learnability",
            ok,
            f"train accuracy {accuracy:.3f} after {len(history)} epochs in {elapsed:.0f}s",
        )
        assert ok


class TestTransferSurgery:
    def test_frozen_stack_is_bit_identical_after_optimization(self):
        """Five Adam steps after head replacement must not move the
        convolutional stack or normalization parameters by a single bit,
        while the new head does move."""
        model = build_model(small_arch(num_classes=5), seed=0)
        replace_head(model, 2, seed=1)
        freeze_feature_extractor(model)

        frozen_names = [n for n in model.params if n.startswith(("conv", "bn"))]
        before = {n: model.params[n].data.copy() for n in frozen_names}
        head_before = model.params["caps3.W"].data.copy()

        live = {n: t for n, t in model.params.items() if n not in model.buffers}
        optimizer = Adam(live, lr=1e-3)
        trainable = [t for n, t in live.items() if model.trainable[n]]

        rng = np.random.default_rng(0)
        targets = np.array([1, 0, 1, 0, 1, 0, 1, 0])
        for step in range(5):
            batch = np.stack(
                [
                    binary_shape_image(bool(t), np.random.default_rng([step, i]))[None]
                    for i, t in enumerate(targets)
                ]
            ).astype(np.float32)
            lengths = model.class_lengths(Tensor(batch), training=True)
            loss = batch_objective(lengths, targets, positive_index=1)
            model.zero_grad()
            loss.backward(params=trainable)
            optimizer.step()

        stuck = [n for n in frozen_names if not np.array_equal(model.params[n].data, before[n])]
        head_moved = not np.array_equal(model.params["caps3.W"].data, head_before)

        ok = not stuck and head_moved
        _verdict(
            "transfer-surgery-freeze",
            ok,
            f"moved frozen params: {stuck or 'none'}, head moved: {head_moved}",
        )
        assert ok


class TestAucAgainstBruteForce:
    def test_rank_auc_equals_pairwise_count(self):
        rng = np.random.default_rng(6)
        max_err = 0.0
        for trial in range(100):
            n = int(rng.integers(5, 201))
            if trial % 2:
                scores = rng.integers(0, 6, size=n) / 5.0  # heavy ties
            else:
                scores = rng.uniform(0, 1, size=n)
            truth = rng.integers(0, 2, size=n).astype(bool)
            if not truth.any():
                truth[0] = True
            if truth.all():
                truth[-1] = False
            preds = [
                ScoredPrediction(score=float(s), is_positive=bool(t))
                for s, t in zip(scores, truth)
            ]
            auc, _ = roc_auc(preds)
            max_err = max(max_err, abs(auc - auc_bruteforce(scores, truth)))
        ok = max_err < 1e-9
        _verdict("auc-vs-bruteforce", ok, f"max err {max_err:.2e} over 100 sets")
        assert ok


# category -> (fine label -> row count); totals match the published
# single-label distribution exactly
NIH_COUNT_PLAN = {
    "No Findings": {"No Findings": 60361},
    "Tumors": {"Infiltration": 9547, "Mass": 3432, "Nodule": 3124},
    "Pleural Diseases": {"Effusion": 4000, "Pleural Thickening": 2042, "Pneumothorax": 2000},
    "Lung Infection": {"Consolidation": 1310, "Pneumonia": 358},
    "Others": {
        "Atelectasis": 4215,
        "Cardiomegaly": 1093,
        "Edema": 628,
        "Emphysema": 892,
        "Fibrosis": 727,
        "Hernia": 594,
    },
}
NIH_MULTILABEL_ROWS = 17797


class TestPathologyMapping:
    def test_category_counts_reproduce_published_distribution(self):
        rows = []
        idx = 0
        for plan in NIH_COUNT_PLAN.values():
            for fine, count in plan.items():
                for _ in range(count):
                    rows.append((f"img_{idx}.png", fine))
                    idx += 1
        for i in range(NIH_MULTILABEL_ROWS):
            rows.append((f"multi_{i}.png", "Effusion|Mass"))

        records, dropped = map_nih_labels(rows)
        ds = DatasetManifest(scheme=NIH_5CLASS, records=records, dropped_multilabel=dropped)
        counts = ds.class_counts()

        expected = {cat: sum(plan.values()) for cat, plan in NIH_COUNT_PLAN.items()}
        assert expected == {
            "No Findings": 60361,
            "Tumors": 16103,
            "Pleural Diseases": 8042,
            "Lung Infection": 1668,
            "Others": 8149,
        }
        counts_ok = counts == expected
        dropped_ok = dropped == NIH_MULTILABEL_ROWS
        ok = counts_ok and dropped_ok
        _verdict(
            "pathology-label-mapping",
            ok,
            f"counts {counts}, dropped {dropped}",
        )
        assert ok


class TestCheckpointFidelity:
    def test_roundtrip_forward_outputs_bit_identical(self, tmp_path):
        model = build_model(small_arch(), seed=7)
        # move away from init so the checkpoint carries non-trivial state
        rng = np.random.default_rng(8)
        for p in model.params.values():
            p.data += rng.normal(0, 0.01, size=p.data.shape).astype(p.data.dtype)

        path = str(tmp_path / "model.ccap")
        save_checkpoint(model, path)
        loaded = load_checkpoint(path)

        x = rng.uniform(0, 1, size=(100, 1, 32, 32)).astype(np.float32)
        out_a = model.predict_proba(Tensor(x))
        out_b = loaded.predict_proba(Tensor(x))
        ok = np.array_equal(out_a, out_b)
        _verdict(
            "checkpoint-roundtrip",
            ok,
            f"max abs diff {np.abs(out_a - out_b).max():.1e} over 100 inputs",
        )
        assert ok


class TestDeterminism:
    def test_identical_seeds_identical_artifacts(self, tmp_path):
        manifest = generate_binary_dataset(tmp_path / "data", n_positive=10, n_negative=10, seed=0)
        ds = load_dataset(manifest, COVID_BINARY)

        files = []
        for tag in ("a", "b"):
            model = build_model(small_arch(), seed=5)
            cfg = TrainConfig(epochs=2, batch_size=8, lr=1e-3, seed=5, val_fraction=0.2)
            best, history = train(model, ds, cfg)
            ckpt = tmp_path / f"{tag}.ccap"
            hist = tmp_path / f"{tag}.jsonl"
            save_checkpoint(best, str(ckpt))
            write_history(history, hist)
            files.append((ckpt.read_bytes(), hist.read_bytes()))

        ckpt_ok = files[0][0] == files[1][0]
        hist_ok = files[0][1] == files[1][1]
        ok = ckpt_ok and hist_ok
        _verdict(
            "seeded-reproducibility",
            ok,
            f"checkpoints identical: {ckpt_ok}, histories identical: {hist_ok}",
        )
        assert ok


class TestParameterCount:
    def test_trainable_count_matches_closed_form(self):
        model = build_model(ArchitectureConfig(), seed=0)
        reported = model.count_trainable_params()

        cfg = model.config
        convs = list(zip(cfg.conv_channels, (cfg.input_channels,) + cfg.conv_channels[:3]))
        closed = sum(o * i * k * k + o for (o, i), k in zip(convs, cfg.conv_kernels))
        closed += 2 * cfg.conv_channels[0]  # normalization affine pair
        n_primary = cfg.num_primary_capsules
        mid_n, mid_d = cfg.mid_capsules
        fin_n, fin_d = cfg.final_capsules
        closed += n_primary * mid_n * mid_d * cfg.primary_capsule_dim
        closed += mid_n * fin_n * fin_d * mid_d

        ok = reported == closed
        _verdict(
            "trainable-parameter-count",
            ok,
            f"model {reported}, closed form {closed}; published reference "
            f"reports 295488 for its variant (see README)",
        )
        assert ok


@pytest.mark.skipif(
    not os.environ.get("COVIDCAPS_REAL_DATA"),
    reason="set COVIDCAPS_REAL_DATA to a binary manifest to run the real-data smoke check",
)
class TestRealData:
    def test_real_manifest_smoke_run(self, tmp_path):
        """Optional: one short training run on a user-supplied manifest."""
        manifest = os.environ["COVIDCAPS_REAL_DATA"]
        ds = load_dataset(manifest, COVID_BINARY)
        model = build_model(small_arch(), seed=0)
        cfg = TrainConfig(epochs=2, batch_size=16, lr=1e-3, seed=0, val_fraction=0.2)
        best, history = train(model, ds, cfg)
        ok = len(history) == 2 and np.isfinite(history[-1]["train_loss"])
        _verdict(
            "real-data-smoke",
            ok,
            f"val accuracy {history[-1]['val_accuracy']:.3f} on {len(ds)} records",
        )
        assert ok
