import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import finite_difference_grads, random_gradient_config
from protosplit.errors import ValidationError
from protosplit.model import PatchRecord, PrototypeBank, activation_matrix, softmax_channels
from protosplit.optim import AdamState, adam_step
from protosplit.splitting import (
    ConceptSets,
    Membership,
    SplitHyperparams,
    SplitStatus,
    build_reference_set,
    duplicate_kernel,
    extend_head,
    l_act,
    l_deact,
    per_concept_accuracy,
    reinit_and_finetune_head,
    run_split,
    split_loss,
    split_loss_gradient,
    start_session,
)

HYPER = SplitHyperparams()


def make_patch(feature, image_id="img", loc=(0, 0)):
    return PatchRecord(np.asarray(feature, dtype=float), image_id, loc)


class TestDuplication:
    def test_literal_kernel_copy(self):
        bank = PrototypeBank(np.array([[1.0, 0.0], [0.0, 1.0]]), np.zeros((2, 1)))
        out = duplicate_kernel(bank, 0)
        assert np.array_equal(out.kernels, [[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])

    def test_out_of_range(self):
        bank = PrototypeBank(np.eye(2), np.zeros((2, 1)))
        with pytest.raises(ValidationError):
            duplicate_kernel(bank, 2)

    def test_new_channel_activation_equals_original(self):
        bank = PrototypeBank(np.array([[1.0, 2.0], [0.5, -1.0]]), np.zeros((2, 1)))
        out = duplicate_kernel(bank, 0)
        feat = np.array([0.3, -0.7])
        p = softmax_channels(out.kernels @ feat)
        assert p[0] == p[2]

    def test_analytic_three_way_softmax(self):
        # duplicating channel 0 of a two-channel bank with zero logits
        bank = PrototypeBank(np.zeros((2, 3)), np.zeros((2, 1)))
        out = duplicate_kernel(bank, 0)
        p = softmax_channels(out.kernels @ np.ones(3))
        assert np.allclose(p, [1 / 3, 1 / 3, 1 / 3])
        assert p[0] / p[1] == pytest.approx(1.0)

    def test_ratio_preservation_over_random_patches(self):
        # per-location activations keep original-channel ratios, 1000 patches
        rng = np.random.default_rng(99)
        bank = PrototypeBank(rng.normal(size=(6, 8)), np.zeros((6, 2)))
        out = duplicate_kernel(bank, 3)
        feats = rng.normal(size=(1000, 8))
        before = activation_matrix(feats, bank.kernels)
        after = activation_matrix(feats, out.kernels)
        assert np.all(np.abs(after[:, 6] - after[:, 3]) < 1e-9)
        ratio_before = before[:, :6] / before[:, :1]
        ratio_after = after[:, :6] / after[:, :1]
        assert np.allclose(ratio_after, ratio_before, rtol=1e-9, atol=1e-12)


class TestExtendHead:
    def test_row_copy(self):
        out = extend_head(np.array([[1.0, 0.0], [0.0, 2.0]]), 0)
        assert np.array_equal(out, [[1.0, 0.0], [0.0, 2.0], [1.0, 0.0]])

    def test_all_zero(self):
        out = extend_head(np.zeros((3, 2)), 1)
        assert np.array_equal(out, np.zeros((4, 2)))

    def test_nonnegativity_preserved(self):
        rng = np.random.default_rng(5)
        head = rng.uniform(0, 3, size=(4, 5))
        out = extend_head(head, 2)
        assert np.all(out >= 0)
        assert np.array_equal(out[4], head[2])


class TestLossPieces:
    def test_l_act_at_one_is_zero(self):
        assert abs(l_act(1.0, HYPER.epsilon)) < 1e-7

    def test_l_act_at_half_is_ln2(self):
        assert l_act(0.5, HYPER.epsilon) == pytest.approx(math.log(2), abs=1e-7)

    def test_l_act_strictly_decreasing(self):
        xs = np.linspace(0.01, 1.0, 50)
        vals = [l_act(x, HYPER.epsilon) for x in xs]
        assert all(a > b for a, b in zip(vals, vals[1:]))
        assert all(v >= -1e-7 for v in vals)

    def test_l_deact_zero_iff_below_bound(self):
        kappa = 0.1
        bound = 1 - math.exp(-kappa)
        for x in np.linspace(0.0, bound, 20):
            assert l_deact(float(x), kappa, HYPER.epsilon) == 0.0
        for x in np.linspace(bound + 1e-6, 0.99, 20):
            assert l_deact(float(x), kappa, HYPER.epsilon) > 0.0

    def test_sr_hinge_inactive(self):
        p = np.array([0.05, 0.9, 0.05])
        loss = split_loss(Membership.SR, p, 0, HYPER, new_channel=2)
        assert loss == 0.0

    def test_sr_analytic_value(self):
        p = np.array([0.5, 0.2, 0.3])
        loss = split_loss(Membership.SR, p, 0, HYPER, new_channel=2)
        expected = 2.0 * ((math.log(2) - 0.1) + (-math.log(0.7) - 0.1))
        assert loss == pytest.approx(expected, abs=1e-7)

    def test_s1_uses_channel_e(self):
        p = np.array([0.5, 0.25, 0.25])
        assert split_loss(Membership.S1, p, 0, HYPER) == pytest.approx(math.log(2), abs=1e-7)

    def test_s2_uses_new_channel(self):
        p = np.array([0.25, 0.25, 0.5])
        assert split_loss(Membership.S2, p, 0, HYPER) == pytest.approx(math.log(2), abs=1e-7)


class TestGradient:
    def test_matches_finite_differences_100_configs(self):
        rng = np.random.default_rng(2024)
        for _ in range(100):
            kernels, feature, membership, e, n = random_gradient_config(rng, HYPER)
            a_e, a_n = split_loss_gradient(feature, kernels, membership, e, HYPER, n)
            f_e, f_n = finite_difference_grads(kernels, feature, membership, e, n, HYPER)
            for a, f in ((a_e, f_e), (a_n, f_n)):
                scale = max(np.linalg.norm(f), 1e-8)
                assert np.linalg.norm(a - f) / scale < 1e-4

    def test_flat_region_zero_gradient(self):
        # patch orthogonal to every kernel, SR membership; with 16 channels
        # the uniform softmax sits below the hinge-free bound, so the loss
        # is flat and the gradient must vanish exactly
        kernels = np.zeros((16, 4))
        kernels[:, :3] = np.random.default_rng(0).normal(size=(16, 3))
        feature = np.array([0.0, 0.0, 0.0, 1.0])
        g_e, g_n = split_loss_gradient(feature, kernels, Membership.SR, 0, HYPER, 15)
        assert np.array_equal(g_e, np.zeros(4)) and np.array_equal(g_n, np.zeros(4))

    def test_gradient_is_descent_direction_for_s1(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            kernels = rng.normal(size=(4, 5))
            feature = rng.normal(size=5)
            g_e, g_n = split_loss_gradient(feature, kernels, Membership.S1, 1, HYPER, 3)
            if np.linalg.norm(g_e) < 1e-12 and np.linalg.norm(g_n) < 1e-12:
                continue
            step = 1e-6
            moved = kernels.copy()
            moved[1] -= step * g_e
            moved[3] -= step * g_n
            def loss_of(k):
                p = softmax_channels(k @ feature)
                return split_loss(Membership.S1, p, 1, HYPER, new_channel=3)
            assert loss_of(moved) < loss_of(kernels)


class TestSoftmaxCoupling:
    @given(st.integers(0, 300))
    @settings(max_examples=40, deadline=None)
    def test_raising_new_logit_lowers_p_e(self, seed):
        rng = np.random.default_rng(seed)
        logits = rng.normal(size=5) * 3
        p_before = softmax_channels(logits)
        bumped = logits.copy()
        bumped[4] += 0.5
        p_after = softmax_channels(bumped)
        assert p_after[0] < p_before[0]


class TestAdam:
    def test_zero_gradient_zero_state_keeps_params(self):
        params = np.array([[1.0, -2.0], [0.5, 3.0]])
        state = AdamState.zeros_like(params)
        out = adam_step(params, np.zeros_like(params), state, learning_rate=1e-3)
        assert np.array_equal(out, params)

    def test_first_step_magnitude_is_learning_rate(self):
        params = np.zeros((2, 3))
        grads = np.array([[0.5, -1.0, 2.0], [-0.1, 0.3, -4.0]])
        state = AdamState.zeros_like(params)
        out = adam_step(params, grads, state, learning_rate=1e-4)
        assert np.allclose(np.abs(out - params), 1e-4, rtol=1e-3)
        assert np.all(np.sign(out - params) == -np.sign(grads))

    def test_deterministic(self):
        rng = np.random.default_rng(3)
        params = rng.normal(size=(2, 4))
        grads = rng.normal(size=(2, 4))
        s1, s2 = AdamState.zeros_like(params), AdamState.zeros_like(params)
        o1 = adam_step(params.copy(), grads, s1, 1e-3, weight_decay=1e-4)
        o2 = adam_step(params.copy(), grads, s2, 1e-3, weight_decay=1e-4)
        assert np.array_equal(o1, o2)
        assert np.array_equal(s1.m, s2.m) and np.array_equal(s1.v, s2.v)

    def test_decay_shrinks_params_without_gradient(self):
        params = np.full((1, 2), 10.0)
        state = AdamState.zeros_like(params)
        out = adam_step(params, np.zeros_like(params), state, 1e-2, weight_decay=1e-1)
        assert np.all(out < params) and np.all(out > 0)


class TestConceptSets:
    def test_overlap_rejected(self):
        p = make_patch([1.0, 0.0], image_id="a", loc=(0, 0))
        q = make_patch([0.0, 1.0], image_id="b", loc=(0, 0))
        sets = ConceptSets(s1=[p, q], s2=[p, make_patch([1, 1], "c")], sr=[])
        with pytest.raises(ValidationError, match="overlap"):
            sets.validate(2)

    def test_too_small_rejected(self):
        sets = ConceptSets(s1=[make_patch([1, 0], "a")], s2=[make_patch([0, 1], "b")], sr=[])
        with pytest.raises(ValidationError, match="at least"):
            sets.validate(2)

    def test_reference_overlap_rejected(self):
        a, b = make_patch([1, 0], "a"), make_patch([0, 1], "b")
        c, d = make_patch([1, 1], "c"), make_patch([1, 2], "d")
        sets = ConceptSets(s1=[a, c], s2=[b, d], sr=[a])
        with pytest.raises(ValidationError):
            sets.validate(2)


def planted_setup(seed=0, spread=0.02, n_each=6):
    """Entangled prototype over two orthogonal clusters plus one other channel.

    Centers are dense sign patterns rather than basis vectors: Adam's
    per-coordinate steps move a kernel along a direction at a rate set by
    that direction's l1 mass, and basis-vector clusters would crawl.
    """
    rng = np.random.default_rng(seed)
    c = 16
    c1 = np.ones(c) / np.sqrt(c)
    c2 = np.tile([1.0, -1.0], c // 2) / np.sqrt(c)
    c3 = np.tile([1.0, 1.0, -1.0, -1.0], c // 4) / np.sqrt(c)
    kernels = np.stack([10 * (c1 + c2) / np.sqrt(2), 4 * c3])
    bank = PrototypeBank(kernels, np.array([[0.0, 0.0], [1.0, 0.0]]))
    s1 = [make_patch(c1 + spread * rng.normal(size=c), f"a{i}", (0, 0)) for i in range(n_each)]
    s2 = [make_patch(c2 + spread * rng.normal(size=c), f"b{i}", (0, 0)) for i in range(n_each)]
    sr = [make_patch(c3 + spread * rng.normal(size=c), f"r{i}", (0, 0)) for i in range(n_each)]
    return bank, ConceptSets(s1=s1, s2=s2, sr=sr)


class TestPerConceptAccuracy:
    def test_all_s1_on_e_scores_one(self):
        # channel 0 already holds nearly all softmax mass on the s1 patches
        kernels = np.zeros((3, 8))
        kernels[0, 0] = 9.0
        kernels[1, 2] = 6.0  # owns the reference patches
        bank = PrototypeBank(kernels, np.zeros((3, 1)))
        c1 = np.zeros(8); c1[0] = 1.0
        c3 = np.zeros(8); c3[2] = 1.0
        sets = ConceptSets(
            s1=[make_patch(c1, f"a{i}") for i in range(3)],
            s2=[],
            sr=[make_patch(c3, f"r{i}") for i in range(3)],
        )
        acc = per_concept_accuracy(sets, bank, 0, HYPER, new_channel=2)
        assert acc.s1 == 1.0
        assert acc.sr == 1.0
        assert acc.vacuous == ("s2",)

    def test_fresh_duplicate_has_no_majority(self):
        # right after duplication the twins split the mass, so neither side
        # can claim a majority yet
        bank, sets = planted_setup()
        session = start_session(bank, 0, sets)
        acc = per_concept_accuracy(sets, session.bank, 0, HYPER, session.new_channel)
        assert acc.s1 == 0.0 and acc.s2 == 0.0
        assert acc.sr == 1.0

    def test_sr_patch_at_half_counts_incorrect(self):
        # p_e = 0.5 exceeds the hinge-free bound 1 - exp(-0.1)
        kernels = np.array([[5.0, 0.0], [5.0, 0.0], [0.0, 1.0]])
        bank = PrototypeBank(kernels, np.zeros((3, 1)))
        patch = make_patch([1.0, 0.0], "x")
        sets = ConceptSets(s1=[], s2=[], sr=[patch])
        acc = per_concept_accuracy(sets, bank, 0, HYPER, new_channel=2)
        assert acc.sr == 0.0
        assert set(acc.vacuous) == {"s1", "s2"}

    def test_empty_components_vacuous(self):
        bank = PrototypeBank(np.eye(3), np.zeros((3, 1)))
        acc = per_concept_accuracy(ConceptSets([], [], []), bank, 0, HYPER, 2)
        assert acc.s1 == acc.s2 == acc.sr == 1.0
        assert set(acc.vacuous) == {"s1", "s2", "sr"}


class TestBuildReferenceSet:
    def test_everything_peaks_on_e_gives_empty_short(self):
        bank = PrototypeBank(np.array([[5.0, 0.0], [0.0, 1.0]]), np.ones((2, 1)))
        corpus = [make_patch([1.0, 0.0], f"i{k}") for k in range(5)]
        patches, short = build_reference_set(corpus, bank, 0, size=3)
        assert patches == [] and short

    def test_single_qualifying_patch(self):
        bank = PrototypeBank(np.array([[5.0, 0.0], [0.0, 5.0]]), np.ones((2, 1)))
        corpus = [make_patch([1.0, 0.0], "a"), make_patch([0.0, 1.0], "b")]
        patches, short = build_reference_set(corpus, bank, 0, size=1)
        assert [p.image_id for p in patches] == ["b"] and not short

    def test_argmax_never_e_oracle(self):
        rng = np.random.default_rng(17)
        bank = PrototypeBank(rng.normal(size=(5, 6)) * 3, rng.uniform(0.1, 1, (5, 3)))
        corpus = [make_patch(rng.normal(size=6), f"i{k}") for k in range(60)]
        patches, short = build_reference_set(corpus, bank, 2, size=20)
        assert not short
        for p in patches:
            logits = bank.kernels @ p.feature
            assert int(np.argmax(logits)) != 2

    def test_respects_exclude_keys_and_dedup(self):
        rng = np.random.default_rng(18)
        bank = PrototypeBank(rng.normal(size=(4, 5)) * 2, np.ones((4, 2)))
        corpus = [make_patch(rng.normal(size=5), f"i{k}", (k, 0)) for k in range(30)]
        excluded = {corpus[3].key(), corpus[7].key()}
        patches, _ = build_reference_set(corpus, bank, 0, size=10, exclude_keys=excluded)
        keys = [p.key() for p in patches]
        assert len(set(keys)) == len(keys)
        assert not (set(keys) & excluded)

    def test_unused_head_rows_are_not_donors(self):
        # prototype 1 has a zero head row, so its patches only arrive via
        # other donors' queues; with a single other donor equal to e there
        # are no donors at all
        bank = PrototypeBank(np.array([[5.0, 0.0], [0.0, 5.0]]), np.array([[1.0], [0.0]]))
        corpus = [make_patch([0.0, 1.0], "b")]
        patches, short = build_reference_set(corpus, bank, 0, size=1)
        assert patches == [] and short


class TestRunSplit:
    def test_degenerate_identical_sets_rejected(self):
        bank, sets = planted_setup()
        bad = ConceptSets(s1=sets.s1, s2=sets.s1, sr=sets.sr)
        with pytest.raises(ValidationError):
            start_session(bank, 0, bad)

    def test_two_cluster_split_converges_and_separates(self):
        bank, sets = planted_setup(seed=1)
        session = start_session(bank, 0, sets)
        result = run_split(session, rng_seed=11)
        assert result.converged
        assert session.status is SplitStatus.CONVERGED
        assert result.accuracies.all_at_least(HYPER.accuracy_target)
        # channel e should now prefer cluster A features, channel new cluster B
        acts_a = activation_matrix(np.stack([p.feature for p in sets.s1]), result.bank.kernels)
        acts_b = activation_matrix(np.stack([p.feature for p in sets.s2]), result.bank.kernels)
        assert np.all(np.argmax(acts_a, axis=1) == 0)
        assert np.all(np.argmax(acts_b, axis=1) == session.new_channel)

    def test_same_seed_bit_identical_history(self):
        bank, sets = planted_setup(seed=2)
        r1 = run_split(start_session(bank, 0, sets), rng_seed=5)
        r2 = run_split(start_session(bank, 0, sets), rng_seed=5)
        assert r1.loss_history == r2.loss_history
        assert np.array_equal(r1.bank.kernels, r2.bank.kernels)

    def test_frozen_rows_bitwise_identical(self):
        bank, sets = planted_setup(seed=3)
        session = start_session(bank, 0, sets)
        before = session.bank.kernels.copy()
        result = run_split(session, rng_seed=7)
        after = result.bank.kernels
        for row in range(session.bank.num_prototypes):
            if row in (0, session.new_channel):
                continue
            assert after[row].tobytes() == before[row].tobytes()
        assert result.bank.head.tobytes() == session.bank.head.tobytes()

    def test_smoothed_loss_non_increasing(self):
        # window-10 smoothing still carries minibatch noise (each window is
        # 100 sample draws), so the trend is asserted on block means: blocks
        # of 10 evaluations never rise materially, and the run decreases net
        bank, sets = planted_setup(seed=4)
        result = run_split(start_session(bank, 0, sets), rng_seed=9)
        smoothed = [pt.smoothed_loss for pt in result.eval_history]
        blocks = [
            float(np.mean(smoothed[i : i + 10])) for i in range(0, len(smoothed) - 9, 10)
        ]
        tol = 0.1 * blocks[0]
        running_min = blocks[0]
        for value in blocks[1:]:
            assert value <= running_min + tol
            running_min = min(running_min, value)
        assert smoothed[-1] <= 0.7 * smoothed[0]

    def test_session_not_reusable(self):
        bank, sets = planted_setup(seed=6)
        session = start_session(bank, 0, sets)
        run_split(session, rng_seed=1)
        with pytest.raises(ValidationError):
            run_split(session, rng_seed=1)

    def test_status_never_moves_backward(self):
        bank, sets = planted_setup(seed=6)
        session = start_session(bank, 0, sets)
        session.advance(SplitStatus.RUNNING)
        with pytest.raises(ValidationError):
            session.advance(SplitStatus.PENDING)

    def test_stratified_batches_also_converge(self):
        bank, sets = planted_setup(seed=8)
        hyper = SplitHyperparams(batch_strategy="stratified")
        result = run_split(start_session(bank, 0, sets, hyper=hyper), rng_seed=3)
        assert result.converged

    def test_budget_exhaustion_reports_unconverged(self):
        bank, sets = planted_setup(seed=10)
        hyper = SplitHyperparams(max_steps=30)
        result = run_split(start_session(bank, 0, sets, hyper=hyper), rng_seed=2)
        assert not result.converged
        assert result.steps_used == 30
        assert result.bank.num_prototypes == bank.num_prototypes + 1

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nonfinite_loss_aborts_with_diagnostics(self):
        from protosplit.errors import ConvergenceError

        bank, sets = planted_setup(seed=9)
        hyper = SplitHyperparams(learning_rate=1e12)  # blows the kernels up
        with pytest.raises(ConvergenceError) as exc:
            run_split(start_session(bank, 0, sets, hyper=hyper), rng_seed=1)
        assert exc.value.step is not None and exc.value.step >= 1


class TestHyperparamValidation:
    def test_kappa_bound(self):
        with pytest.raises(ValidationError):
            SplitHyperparams(kappa=0.8)

    def test_positivity(self):
        with pytest.raises(ValidationError):
            SplitHyperparams(learning_rate=0.0)

    def test_defaults_are_valid(self):
        h = SplitHyperparams()
        assert h.learning_rate == 1e-4 and h.alpha == 2.0 and h.kappa == 0.1


class TestReinitAndFinetuneHead:
    def make_bank(self, head):
        head = np.asarray(head, dtype=float)
        rng = np.random.default_rng(0)
        return PrototypeBank(rng.normal(size=(head.shape[0], 4)), head)

    def test_degenerate_sigma_zero_initializes_to_constant(self):
        head = np.full((5, 3), 0.7)
        bank = self.make_bank(head)
        out = reinit_and_finetune_head(bank, 0, dataset=[], new_channel=4)
        assert not out.fallback_used
        assert np.allclose(out.bank.head[0], 0.7)
        assert np.allclose(out.bank.head[4], 0.7)

    def test_frozen_rows_unchanged_after_finetune(self):
        rng = np.random.default_rng(1)
        head = rng.uniform(0, 2, size=(6, 4))
        bank = self.make_bank(head)
        dataset = [(rng.uniform(0, 1, size=6), int(rng.integers(0, 4))) for _ in range(30)]
        out = reinit_and_finetune_head(bank, 1, dataset, new_channel=5, rng_seed=2)
        for row in range(6):
            if row in (1, 5):
                continue
            assert out.bank.head[row].tobytes() == bank.head.astype(float)[row].tobytes()

    def test_fallback_when_no_positive_entries(self):
        head = np.zeros((4, 3))
        bank = self.make_bank(head)
        out = reinit_and_finetune_head(bank, 0, dataset=[], new_channel=3)
        assert out.fallback_used
        assert out.init_mean == 0.1 and out.init_std == 0.01

    def test_head_stays_nonnegative(self):
        rng = np.random.default_rng(3)
        head = rng.uniform(0, 1, size=(5, 4))
        bank = self.make_bank(head)
        dataset = [(rng.uniform(0, 1, size=5), int(rng.integers(0, 4))) for _ in range(50)]
        out = reinit_and_finetune_head(bank, 0, dataset, new_channel=4)
        assert np.all(out.bank.head >= 0)

    def test_fit_recovers_a_clean_two_row_assignment(self):
        # channel 0 fires on class-0 samples, channel 4 on class-1 samples;
        # the fitted rows should support exactly those classes
        rng = np.random.default_rng(9)
        head = np.zeros((5, 3))
        head[1, 2] = 1.0  # frozen support for class 2
        bank = self.make_bank(head)
        dataset = []
        for _ in range(30):
            label = int(rng.integers(0, 3))
            pooled = rng.uniform(0, 0.05, size=5)
            if label == 0:
                pooled[0] = 0.9
            elif label == 1:
                pooled[4] = 0.9
            else:
                pooled[1] = 0.9
            dataset.append((pooled, label))
        out = reinit_and_finetune_head(bank, 0, dataset, new_channel=4, rng_seed=1)
        row_e, row_n = out.bank.head[0], out.bank.head[4]
        assert row_e[0] > 0.5 and row_n[1] > 0.5
        assert row_e[1] < 0.2 and row_n[0] < 0.2
