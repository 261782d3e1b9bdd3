import math

import numpy as np
import pytest

from deld import corpus as C
from deld import tensor as T
from deld.encoder import EncoderConfig, freeze, init_encoder
from deld.errors import ConfigError, ContractError, DimensionError
from deld.prompts import PromptBank, freeze_prompt, init_prompt
from deld.seeding import derive_seed
from deld.training import (Classifier, ModelState, TaskData, TrainConfig, bce_loss, classify,
                           evaluate, finetune_classifier, forward_probs, predict, prepare_tasks,
                           run_deld_seq, run_ft_all, run_ft_per, run_ft_seq,
                           train_prompt_for_task)

ENC_CFG = EncoderConfig(d=32, layers=2, heads=2, ffn_dim=48, vocab_size=300, n_max=24,
                        prompt_capacity=32, seed=1)


def small_suite(n_tasks=2, per_class=30, seed=0):
    counts = {g: (per_class, per_class) for g in C.GENERATOR_ORDER}
    datasets = C.synth_generate(C.conflict_spec(seed=seed, counts=counts))[:n_tasks]
    vocab = C.build_vocab(datasets, max_size=ENC_CFG.vocab_size)
    return datasets, vocab


@pytest.fixture(scope="module")
def frozen_encoder():
    return freeze(init_encoder(ENC_CFG))


@pytest.fixture(scope="module")
def two_tasks(frozen_encoder):
    datasets, vocab = small_suite(n_tasks=2)
    return prepare_tasks(datasets, vocab, ENC_CFG.n_max, repeat_index=0, seed=0)


class TestBceLoss:
    def test_half_gives_ln2(self):
        loss = bce_loss(T.Tensor(np.array(0.5)), 1)
        assert abs(loss.item() - math.log(2)) < 1e-12
        loss0 = bce_loss(T.Tensor(np.array(0.5)), 0)
        assert abs(loss0.item() - math.log(2)) < 1e-12

    def test_perfect_prediction_near_zero(self):
        assert bce_loss(T.Tensor(np.array(1.0)), 1).item() < 1e-10
        assert bce_loss(T.Tensor(np.array(0.0)), 0).item() < 1e-10

    def test_point_eight(self):
        loss = bce_loss(T.Tensor(np.array(0.8)), 1)
        assert abs(loss.item() - 0.2231435513) < 1e-9

    def test_batch_mean(self):
        loss = bce_loss(T.Tensor(np.array([0.8, 0.5])), np.array([1, 0]))
        assert abs(loss.item() - (0.2231435513 + math.log(2)) / 2) < 1e-9

    def test_nonnegative_and_finite_at_extremes(self):
        loss = bce_loss(T.Tensor(np.array([1.0, 0.0])), np.array([0, 1]))
        assert np.isfinite(loss.item()) and loss.item() > 0


class TestClassify:
    def test_zero_weights_give_half(self):
        clf = Classifier.new(4)
        out = classify(T.Tensor(np.ones(4)), clf)
        assert out.item() == 0.5

    def test_large_bias_saturates(self):
        clf = Classifier.new(4)
        clf.bias.value.data[:] = 20.0
        assert classify(T.Tensor(np.zeros(4)), clf).item() > 0.9999

    def test_matches_manual_affine_sigmoid(self):
        rng = np.random.default_rng(0)
        clf = Classifier.new(6)
        clf.weights.value.data[:] = rng.normal(size=(1, 6))
        clf.bias.value.data[:] = rng.normal(size=1)
        pooled = rng.normal(size=6)
        want = 1.0 / (1.0 + math.exp(-(float(clf.weights.data @ pooled) + float(clf.bias.data[0]))))
        got = classify(T.Tensor(pooled), clf).item()
        assert abs(got - want) < 1e-12

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            classify(T.Tensor(np.zeros(5)), Classifier.new(4))


class TestTrainConfig:
    def test_defaults_match_protocol(self):
        cfg = TrainConfig()
        assert cfg.lr == 1e-3 and cfg.epochs == 10 and cfg.prompt_len == 12
        assert cfg.batch_size == 16 and cfg.position_mode == "prepend"

    def test_odd_prompt_len_rejected(self):
        with pytest.raises(ConfigError):
            TrainConfig(prompt_len=7)

    def test_override_flag_allows_custom_len(self):
        assert TrainConfig(prompt_len=2, allow_custom_prompt_len=True).prompt_len == 2


class TestPhaseContracts:
    def make_model(self, frozen_encoder, prompt_ids=("a",), freeze_all=False):
        model = ModelState(encoder=frozen_encoder, bank=PromptBank(),
                           classifier=Classifier.new(ENC_CFG.d))
        for gid in prompt_ids:
            model.bank.add(init_prompt(gid, 4, frozen_encoder, seed=hash(gid) % 1000))
            if freeze_all or gid != prompt_ids[-1]:
                freeze_prompt(model.bank, gid)
        return model

    def test_unfrozen_encoder_rejected(self, two_tasks):
        model = ModelState(encoder=init_encoder(ENC_CFG), bank=PromptBank(),
                           classifier=Classifier.new(ENC_CFG.d))
        model.bank.add(init_prompt("a", 4, model.encoder, 0))
        cfg = TrainConfig(epochs=1, prompt_len=4, seed=0)
        with pytest.raises(ContractError):
            train_prompt_for_task(model, two_tasks[0], cfg)

    def test_already_frozen_prompt_rejected(self, frozen_encoder, two_tasks):
        model = self.make_model(frozen_encoder, freeze_all=True)
        with pytest.raises(ContractError):
            train_prompt_for_task(model, two_tasks[0], TrainConfig(epochs=1, prompt_len=4))

    def test_classifier_phase_rejects_unfrozen_prompt(self, frozen_encoder, two_tasks):
        model = self.make_model(frozen_encoder)
        with pytest.raises(ContractError):
            finetune_classifier(model, two_tasks[0], TrainConfig(epochs=1, prompt_len=4))

    def test_zero_epochs_change_nothing(self, frozen_encoder, two_tasks):
        model = self.make_model(frozen_encoder)
        cfg = TrainConfig(epochs=0, prompt_len=4, seed=0)
        before = model.snapshot()
        assert train_prompt_for_task(model, two_tasks[0], cfg) == []
        assert model.snapshot() == before

    def test_prompt_phase_touches_only_prompt_and_head(self, frozen_encoder, two_tasks):
        model = self.make_model(frozen_encoder, prompt_ids=("old", "new"))
        before = model.snapshot()
        train_prompt_for_task(model, two_tasks[0], TrainConfig(epochs=1, prompt_len=4, seed=0))
        after = model.snapshot()
        assert after["encoder"] == before["encoder"]
        assert after["prompt:old"] == before["prompt:old"]
        assert after["prompt:new"] != before["prompt:new"]
        assert after["classifier"] != before["classifier"]

    def test_classifier_phase_touches_only_head(self, frozen_encoder, two_tasks):
        model = self.make_model(frozen_encoder, freeze_all=True)
        before = model.snapshot()
        finetune_classifier(model, two_tasks[0], TrainConfig(epochs=1, prompt_len=4, seed=0))
        after = model.snapshot()
        changed = [k for k in before if after[k] != before[k]]
        assert changed == ["classifier"]

    def test_prompt_phase_loss_decreases(self, frozen_encoder, two_tasks):
        model = self.make_model(frozen_encoder)
        losses = train_prompt_for_task(model, two_tasks[0],
                                       TrainConfig(epochs=6, prompt_len=4, seed=0))
        assert losses[-1] < losses[0]


class TestSeparableClassifier:
    def test_classifier_phase_fits_separable_features(self, frozen_encoder):
        # the sklearn probe confirms the pooled features are linearly
        # separable; our classifier phase must then reach 95% train accuracy
        from sklearn.linear_model import LogisticRegression

        datasets, vocab = small_suite(n_tasks=1, per_class=40)
        tasks = prepare_tasks(datasets, vocab, ENC_CFG.n_max, repeat_index=0, seed=0)
        task = tasks[0]
        model = ModelState(encoder=frozen_encoder, bank=PromptBank(),
                           classifier=Classifier.new(ENC_CFG.d))
        model.bank.add(init_prompt("g", 4, frozen_encoder, 0))
        freeze_prompt(model.bank, "g")

        with T.no_grad():
            feats = []
            for lo in range(0, len(task.train_ids), 64):
                ids, mask = task.train_ids[lo:lo + 64], task.train_ids[lo:lo + 64] != 0
                x = T.embedding(frozen_encoder.token_embeddings.value, ids)
                from deld.prompts import compose_input
                from deld.encoder import encode, pool
                composed, span, full = compose_input(model.bank, x, mask)
                feats.append(pool(encode(frozen_encoder, composed, full), span, full).data)
        feats = np.concatenate(feats)
        probe = LogisticRegression(max_iter=2000, C=50.0).fit(feats, task.train_labels)
        assert probe.score(feats, task.train_labels) >= 0.95  # separability premise

        finetune_classifier(model, task, TrainConfig(lr=0.05, epochs=80, prompt_len=4, seed=0))
        train_acc = (predict(model, task.train_ids) == task.train_labels).mean()
        assert train_acc >= 0.95


class TestDeldSeq:
    def test_single_task_equals_manual_pipeline(self, frozen_encoder, two_tasks):
        cfg = TrainConfig(epochs=2, prompt_len=4, seed=3)
        model, matrix = run_deld_seq(frozen_encoder, two_tasks[:1], cfg)

        manual = ModelState(encoder=frozen_encoder, bank=PromptBank(position_mode="prepend"),
                            classifier=Classifier.new(ENC_CFG.d))
        manual.bank.add(init_prompt(two_tasks[0].generator_id, 4, frozen_encoder,
                                    derive_seed(cfg.seed, "prompt-init", 0)))
        train_prompt_for_task(manual, two_tasks[0], cfg)
        freeze_prompt(manual.bank, two_tasks[0].generator_id)
        finetune_classifier(manual, two_tasks[0], cfg)
        assert manual.snapshot() == model.snapshot()
        assert matrix.is_complete() and matrix.size == 1

    def test_matrix_is_lower_wedge_complete(self, frozen_encoder):
        datasets, vocab = small_suite(n_tasks=4, per_class=15)
        tasks = prepare_tasks(datasets, vocab, ENC_CFG.n_max, repeat_index=0, seed=0)
        _, matrix = run_deld_seq(frozen_encoder, tasks, TrainConfig(epochs=1, prompt_len=4, seed=0))
        assert matrix.size == 4 and matrix.is_complete()
        for k in range(4):
            for i in range(k + 1):
                assert 0.0 <= matrix.get(i, k) <= 100.0

    def test_frozen_snapshots_survive_later_stages(self, frozen_encoder, two_tasks):
        cfg = TrainConfig(epochs=1, prompt_len=4, seed=0)
        enc_before = frozen_encoder.state_bytes()
        model, _ = run_deld_seq(frozen_encoder, two_tasks, cfg)
        assert frozen_encoder.state_bytes() == enc_before
        assert model.bank.prompts[0].frozen and model.bank.prompts[1].frozen

    def test_monotone_bank_growth(self, frozen_encoder, two_tasks):
        model, _ = run_deld_seq(frozen_encoder, two_tasks, TrainConfig(epochs=1, prompt_len=4, seed=0))
        assert len(model.bank) == 2

    def test_requires_frozen_encoder(self, two_tasks):
        with pytest.raises(ContractError):
            run_deld_seq(init_encoder(ENC_CFG), two_tasks, TrainConfig(epochs=1, prompt_len=4))


class TestFtSeq:
    def test_encoder_clone_diverges_but_original_untouched(self, frozen_encoder, two_tasks):
        cfg = TrainConfig(epochs=1, prompt_len=4, seed=0)
        before = frozen_encoder.state_bytes()
        model, matrix = run_ft_seq(frozen_encoder, two_tasks, cfg)
        assert frozen_encoder.state_bytes() == before
        assert model.encoder.state_bytes() != before
        assert matrix.is_complete()

    def test_single_task_matches_ft_per(self, frozen_encoder, two_tasks):
        cfg = TrainConfig(epochs=1, prompt_len=4, seed=0)
        _, matrix = run_ft_seq(frozen_encoder, two_tasks[:1], cfg)
        _, per_accs = run_ft_per(frozen_encoder, two_tasks[:1], cfg)
        assert matrix.get(0, 0) == per_accs[two_tasks[0].generator_id]


class TestFtAll:
    def test_pooled_union_size(self, two_tasks):
        from deld.training import _pooled_task
        pooled = _pooled_task(two_tasks)
        assert len(pooled.train_ids) == sum(len(t.train_ids) for t in two_tasks)
        assert len(pooled.test_ids) == sum(len(t.test_ids) for t in two_tasks)

    def test_accuracies_at_least_chance(self, frozen_encoder, two_tasks):
        cfg = TrainConfig(epochs=4, prompt_len=4, seed=0)
        _, accs = run_ft_all(frozen_encoder, two_tasks, cfg)
        assert set(accs) == {t.generator_id for t in two_tasks}
        assert all(a >= 50.0 for a in accs.values())

    def test_with_deld_keeps_encoder_frozen(self, frozen_encoder, two_tasks):
        before = frozen_encoder.state_bytes()
        model, accs = run_ft_all(frozen_encoder, two_tasks, TrainConfig(epochs=1, prompt_len=4, seed=0),
                                 with_deld=True)
        assert frozen_encoder.state_bytes() == before
        assert len(model.bank) == 1 and model.bank.prompts[0].frozen


class TestFtPer:
    def test_models_are_isolated(self, frozen_encoder, two_tasks):
        cfg = TrainConfig(epochs=1, prompt_len=4, seed=0)
        models, accs = run_ft_per(frozen_encoder, two_tasks, cfg)
        assert len(accs) == 2
        ids = [t.generator_id for t in two_tasks]
        assert models[ids[0]].encoder is not models[ids[1]].encoder
        assert models[ids[0]].encoder.state_bytes() != models[ids[1]].encoder.state_bytes()

    def test_with_deld_prompts_are_per_dataset(self, frozen_encoder, two_tasks):
        models, _ = run_ft_per(frozen_encoder, two_tasks, TrainConfig(epochs=1, prompt_len=4, seed=0),
                               with_deld=True)
        for task in two_tasks:
            bank = models[task.generator_id].bank
            assert [p.generator_id for p in bank.prompts] == [task.generator_id]


class TestPredictions:
    def test_tie_at_half_classed_positive(self, frozen_encoder):
        model = ModelState(encoder=frozen_encoder, bank=PromptBank(),
                           classifier=Classifier.new(ENC_CFG.d))
        ids = np.array([[3, 4, 5] + [0] * (ENC_CFG.n_max - 3)])
        # zero classifier gives exactly 0.5 for every input
        assert predict(model, ids).tolist() == [1]

    def test_inference_needs_no_generator_identity(self, frozen_encoder, two_tasks):
        model, _ = run_deld_seq(frozen_encoder, two_tasks, TrainConfig(epochs=1, prompt_len=4, seed=0))
        sample = np.concatenate([two_tasks[0].test_ids[:2], two_tasks[1].test_ids[:2]])
        merged = predict(model, sample)
        separate = np.concatenate([predict(model, two_tasks[0].test_ids[:2]),
                                   predict(model, two_tasks[1].test_ids[:2])])
        np.testing.assert_array_equal(merged, separate)
