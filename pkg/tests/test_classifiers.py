import numpy as np
import pytest

from conftest import small_synth_batch
from ehrtransfer import classifiers as cl
from ehrtransfer import numerics as nx
from ehrtransfer.imputer import Checkpoint, ImputerConfig, init_params, pretrain
from ehrtransfer.metrics import auroc
from ehrtransfer.training import TrainerConfig, train

CFG = ImputerConfig(d_features=4, hidden=8, embed_dim=4, n_steps=12, seed=0)


@pytest.fixture(scope="module")
def ckpt():
    return Checkpoint(CFG, init_params(CFG).arrays())


@pytest.fixture(scope="module")
def batch():
    return small_synth_batch(n=24, t=12, d=4).natural()


def test_published_param_counts():
    assert cl.param_count(cl.HeadSpec("MLP2", 108)) == 14_081
    assert cl.param_count(cl.HeadSpec("LSTM1", 36, rnn_hidden=108)) == 76_721
    assert cl.param_count(cl.HeadSpec("GRU1", 36, rnn_hidden=108)) == 61_061
    assert cl.param_count(cl.HeadSpec("LINEAR", 108)) == 109
    assert cl.param_count(cl.HeadSpec("MLP5", 108)) == 108 * 128 + 128 + 128 * 64 + 64 + 64 * 32 + 32 + 32 * 16 + 16 + 17


def test_default_plans_at_published_dims():
    imp = ImputerConfig(d_features=35)
    assert cl.param_count(cl.make_plan("LSTM1", imp).head) == 76_721
    assert cl.param_count(cl.make_plan("GRU1", imp).head) == 61_061
    assert cl.param_count(cl.make_plan("MLP2", imp, hidden_merge="mean").head) == 14_081
    assert cl.make_plan("MLP2", imp).head.input_dim == 216


@pytest.mark.parametrize("kind", cl.HEAD_KINDS)
def test_param_count_matches_built_head(kind):
    spec = cl.HeadSpec(kind, 7, hidden_width=16, rnn_hidden=5)
    assert cl.build_head(spec).count() == cl.param_count(spec)


def test_frozen_unfrozen_differ_by_imputer_total(ckpt):
    spec = cl.make_plan("GRU1", CFG).head
    diff = cl.param_count(spec, "UNFROZEN", ckpt.n_params()) - cl.param_count(spec, "FROZEN", ckpt.n_params())
    assert diff == ckpt.n_params() == init_params(CFG).count()


def test_plan_invariants():
    with pytest.raises(ValueError):
        cl.make_plan("MLP2", CFG, input_strategy="RAW_WITH_HIDDEN_INIT")
    with pytest.raises(ValueError):
        cl.make_plan("LSTM1", CFG, input_strategy="HIDDEN_STATES")
    with pytest.raises(ValueError):
        cl.HeadSpec("SVM", 3)
    with pytest.raises(ValueError):
        cl.make_plan("MLP2", CFG, "SOMETIMES")


def test_assemble_validates_dimensions(ckpt):
    with pytest.raises(ValueError):
        cl.assemble(ckpt, cl.make_plan("MLP2", CFG), d_features=5)
    bad = cl.FinetunePlan(cl.HeadSpec("MLP2", 99), "FROZEN", "HIDDEN_STATES")
    with pytest.raises(ValueError):
        cl.assemble(ckpt, bad)
    wrong_rnn = cl.FinetunePlan(cl.HeadSpec("GRU1", 5, rnn_hidden=3), "FROZEN", "IMPUTED_WITH_HIDDEN_INIT")
    with pytest.raises(ValueError):
        cl.assemble(ckpt, wrong_rnn)


def _one_step_grads(model, batch):
    params = model.trainable_params()
    params.zero_grad()
    loss, _ = model.loss(batch)
    return nx.backward(loss, params)


@pytest.mark.parametrize("kind", ["MLP2", "GRU1", "LSTM1"])
def test_freeze_contract(ckpt, batch, kind):
    frozen = cl.assemble(ckpt, cl.make_plan(kind, CFG, "FROZEN"), seed=1)
    grads = _one_step_grads(frozen, batch)
    assert grads and all(k.startswith("head.") for k in grads)
    unfrozen = cl.assemble(ckpt, cl.make_plan(kind, CFG, "UNFROZEN"), seed=1)
    grads = _one_step_grads(unfrozen, batch)
    assert any(not k.startswith("head.") and np.any(g != 0) for k, g in grads.items())


def test_frozen_training_leaves_imputer_bytes_unchanged(ckpt, batch):
    before = ckpt.to_bytes()
    model = cl.assemble(ckpt, cl.make_plan("GRU1", CFG, "FROZEN"), seed=2)
    train(model, batch, batch, TrainerConfig(max_epochs=3, batch_size=8))
    assert model.imputer_checkpoint().to_bytes() == before
    assert ckpt.to_bytes() == before
    unfrozen = cl.assemble(ckpt, cl.make_plan("GRU1", CFG, "UNFROZEN"), seed=2)
    train(unfrozen, batch, batch, TrainerConfig(max_epochs=2, batch_size=8))
    assert unfrozen.imputer_checkpoint().to_bytes() != before
    assert ckpt.to_bytes() == before  # assemble copies the weights


@pytest.mark.parametrize("kind,strategy", [
    ("MLP2", None), ("MLP5", None), ("LINEAR", None),
    ("GRU1", "IMPUTED_WITH_HIDDEN_INIT"), ("LSTM1", "RAW_WITH_HIDDEN_INIT"),
])
def test_forward_classify_properties(ckpt, batch, kind, strategy):
    model = cl.assemble(ckpt, cl.make_plan(kind, CFG, "UNFROZEN", strategy), seed=3)
    p = cl.forward_classify(model, batch)
    assert p.shape == (batch.n,) and np.all((p > 0) & (p < 1))
    np.testing.assert_array_equal(p, cl.forward_classify(model, batch))
    perm = np.random.default_rng(0).permutation(batch.n)
    np.testing.assert_allclose(cl.forward_classify(model, batch.subset(perm)), p[perm], rtol=1e-6, atol=1e-7)
    before = batch.values.copy()
    cl.forward_classify(model, batch)
    np.testing.assert_array_equal(batch.values, before)


@pytest.mark.parametrize("kind", ["MLP2", "GRU1"])
def test_zero_head_outputs_half(ckpt, batch, kind):
    model = cl.assemble(ckpt, cl.make_plan(kind, CFG), zero_head=True)
    np.testing.assert_array_equal(cl.forward_classify(model, batch), 0.5)


def test_frozen_cache_matches_direct_forward(ckpt, batch):
    frozen = cl.assemble(ckpt, cl.make_plan("MLP2", CFG, "FROZEN"), seed=4)
    unfrozen = cl.assemble(ckpt, cl.make_plan("MLP2", CFG, "UNFROZEN"), seed=4)
    np.testing.assert_allclose(cl.forward_classify(frozen, batch), cl.forward_classify(unfrozen, batch), rtol=1e-6)


def test_head_gradients(batch):
    # every head kind passes a finite-difference check on its own weights
    rng = np.random.default_rng(5)
    x = rng.normal(size=(3, 6))
    seq = [rng.normal(size=(3, 4)) for _ in range(3)]
    y = np.array([0, 1, 1], np.float32)
    from ehrtransfer import layers
    for kind in cl.HEAD_KINDS:
        spec = cl.HeadSpec(kind, 6 if kind not in cl.RNN_KINDS else 4, hidden_width=8, rnn_hidden=5)
        base = cl.build_head(spec, seed=6)
        h0 = rng.normal(size=(3, 5))
        for name in base:
            def f(leaf, name=name):
                p = layers.Params({k: nx.Tensor(v.data) for k, v in base.items()})
                p[name] = leaf
                if kind in cl.RNN_KINDS:
                    h, c = nx.Tensor(h0), nx.Tensor(np.zeros_like(h0))
                    for s in seq:
                        if kind == "LSTM1":
                            h, c = layers.lstm_cell(nx.Tensor(s), h, c, p, "head.rnn")
                        else:
                            h = layers.gru_cell(nx.Tensor(s), h, p, "head.rnn")
                    z = cl._mlp(h, p, spec)
                else:
                    z = cl._mlp(nx.Tensor(x), p, spec)
                return nx.bce_with_logits(z, y)
            assert nx.grad_check(f, base[name].data) < 1e-3, (kind, name)


def test_export_feature_tables(tmp_path, ckpt, batch):
    path = cl.export_features(ckpt, batch, "HIDDEN", tmp_path / "h.csv")
    header = path.read_text().splitlines()[0].split(",")
    assert header[0] == "record_id" and header[-1] == "label" and len(header) == 2 * CFG.hidden + 2
    table = cl.read_feature_table(path)
    assert table.n == batch.n and table.ids == batch.ids
    np.testing.assert_array_equal(table.features, cl.feature_table(ckpt, batch, "HIDDEN").features)
    path = cl.export_features(ckpt, batch, "IMPUTED", tmp_path / "i.csv")
    assert len(path.read_text().splitlines()[0].split(",")) == 12 * 4 + 2
    with pytest.raises(ValueError):
        cl.feature_table(ckpt, batch, "RAW")


def test_export_column_counts_at_published_dims():
    big = ImputerConfig(d_features=35, hidden=108, embed_dim=8, n_steps=48)
    b = small_synth_batch(n=5, t=48, d=35, rate=0.1)
    ck = Checkpoint(big, init_params(big).arrays())
    assert cl.feature_table(ck, b, "HIDDEN").features.shape == (5, 216)
    assert cl.feature_table(ck, b, "IMPUTED").features.shape == (5, 1680)


def test_export_write_failure_names_path(tmp_path, ckpt, batch):
    target = tmp_path / "file"
    target.write_text("x")
    with pytest.raises(cl.ExportError, match=str(target)):
        cl.export_features(ckpt, batch, "HIDDEN", target / "sub" / "t.csv")


def test_static_linear_matches_in_pipeline_linear(tmp_path):
    # FROZEN + LINEAR in the pipeline and LINEAR on exported hidden features are the same model
    cfg = ImputerConfig(d_features=4, hidden=12, embed_dim=8, n_steps=12, seed=0)
    train_b = small_synth_batch(n=120, t=12, seed=0)
    val_b = small_synth_batch(n=60, t=12, seed=1)
    ckpt, _ = pretrain(train_b, val_b, cfg, TrainerConfig(batch_size=32, lr=3e-3), epochs=3)
    tc = TrainerConfig(max_epochs=30, batch_size=32, lr_strategy="SEARCHED", lr=1e-2, seed=7)
    tr, va = train_b.natural(), val_b.natural()

    model = cl.assemble(ckpt, cl.make_plan("LINEAR", cfg, "FROZEN"), seed=9)
    train(model, tr, va, tc)
    pipe_auc = auroc(cl.forward_classify(model, va), va.labels)

    ft_tr = cl.read_feature_table(cl.export_features(ckpt, tr, "HIDDEN", tmp_path / "tr.csv"))
    ft_va = cl.read_feature_table(cl.export_features(ckpt, va, "HIDDEN", tmp_path / "va.csv"))
    static = cl.StaticModel.linear(ft_tr.features.shape[1], seed=9)
    train(static, ft_tr, ft_va, tc)
    static_auc = auroc(static.evaluate(ft_va)[1], ft_va.labels)
    assert abs(pipe_auc - static_auc) <= 0.01


def test_frozen_export_keeps_pretraining_metadata(batch):
    ck = Checkpoint(CFG, init_params(CFG).arrays(), epoch=7, val_metric=0.25, extra={"note": "x"})
    model = cl.assemble(ck, cl.make_plan("MLP2", CFG, "FROZEN"), seed=2)
    train(model, batch, batch, TrainerConfig(max_epochs=2, batch_size=8))
    assert model.imputer_checkpoint().to_bytes() == ck.to_bytes()
