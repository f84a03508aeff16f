import json

import pytest
import torch

from capgan import evalharness
from capgan.classifier import ResidualClassifier
from capgan.core import ExperimentConfig, Knowledge, PerturbationBudget, ThreatModel
from capgan.core.config import apply_overrides
from capgan.core.types import ImageBatch
from capgan.evalharness import (
    CSV_FIELDS,
    ConfigurationError,
    DefensePipeline,
    EvalRecord,
    ReportError,
    emit_report,
    epsilon_sweep,
    evaluate,
    read_records_csv,
    run_ablation,
    summarize,
)
from capgan.purifier import build_purifier
from capgan.training import build_adversarial_domain

TINY = {"base_channels": 2, "n_downsampling": 1, "n_res_blocks": 1, "disc_channels": 2}


@pytest.fixture(scope="module")
def models():
    torch.manual_seed(0)
    f = ResidualClassifier(3, width=2).freeze()
    torch.manual_seed(1)
    s = ResidualClassifier(3, width=2).freeze()
    return f, s, build_purifier(TINY, seed=0)


@pytest.fixture(scope="module")
def data():
    g = torch.Generator().manual_seed(0)
    return ImageBatch(torch.rand(12, 16, 16, 3, generator=g), torch.arange(12) % 3)


def tm(knowledge, eps=8, q=None):
    return ThreatModel(knowledge, PerturbationBudget(eps), q)


def test_defended_needs_purifier(models):
    with pytest.raises(ConfigurationError):
        DefensePipeline(models[0], None, defended=True)


def test_no_attack_equals_clean_and_is_idempotent(models, data):
    pipe = DefensePipeline.with_purifier(models[0], models[2], surrogate=models[1])
    a = evaluate(pipe, data, "none", tm(Knowledge.BLACK_BOX_TRANSFER), seed=0)
    b = evaluate(pipe, data, "none", tm(Knowledge.BLACK_BOX_TRANSFER), seed=0)
    assert a.accuracy == a.clean_accuracy and a == b


@pytest.mark.parametrize("attack,knowledge", [
    ("spsa", Knowledge.WHITE_BOX_TARGET),
    ("pgd40", Knowledge.BLACK_BOX_QUERY),
    ("bpda_i40", Knowledge.WHITE_BOX_TARGET),
    ("pgd40", Knowledge.ADAPTIVE_BPDA),
    ("nope", Knowledge.WHITE_BOX_TARGET),
])
def test_interface_mismatch_is_configuration_error(models, data, attack, knowledge):
    pipe = DefensePipeline.with_purifier(models[0], models[2], surrogate=models[1])
    q = 10 if knowledge is Knowledge.BLACK_BOX_QUERY else None
    calls = []
    pipe.classifier.register_forward_hook(lambda *a: calls.append(1))
    with pytest.raises(ConfigurationError):
        evaluate(pipe, data, attack, tm(knowledge, q=q))
    assert not calls


def test_transfer_without_surrogate_rejected(models, data):
    with pytest.raises(ConfigurationError, match="surrogate"):
        evaluate(DefensePipeline.undefended(models[0]), data, "pgd7", tm(Knowledge.BLACK_BOX_TRANSFER))


def test_zero_epsilon_sweep_equals_clean(models, data):
    pipe = DefensePipeline.undefended(models[0], models[1])
    (rec,) = epsilon_sweep(pipe, data, "pgd7", [0], Knowledge.WHITE_BOX_TARGET, seed=0)
    assert rec.accuracy == rec.clean_accuracy


def test_sweep_validation(models, data):
    pipe = DefensePipeline.undefended(models[0], models[1])
    with pytest.raises(ConfigurationError):
        epsilon_sweep(pipe, data, "pgd7", [])
    with pytest.raises(ConfigurationError):
        epsilon_sweep(pipe, data, "pgd7", [8, 4])
    with pytest.raises(ConfigurationError):
        epsilon_sweep(pipe, data, "spsa", [8], Knowledge.BLACK_BOX_QUERY)  # no query_limit


def test_query_evaluation_respects_limit(models, data):
    pipe = DefensePipeline.with_purifier(models[0], models[2])
    seen = []
    orig = evalharness.QueryTarget

    class Spy(orig):
        def __init__(self, *a, **k):
            super().__init__(*a, **k)
            seen.append(self)

    evalharness.QueryTarget = Spy
    try:
        rec = evaluate(pipe, data[:4], "square_r1", tm(Knowledge.BLACK_BOX_QUERY, q=20), seed=0)
    finally:
        evalharness.QueryTarget = orig
    assert seen and all(t.queries <= t.limit == 20 * 4 for t in seen)
    assert rec.queries == sum(t.queries for t in seen)


def test_success_rate_is_measured_on_bare_classifier(models, data):
    f = models[0]
    pipe = DefensePipeline.with_purifier(f, models[2])
    rec = evaluate(pipe, data, "pgd7", tm(Knowledge.WHITE_BOX_TARGET), seed=3)
    # recompute: the same seeded attack against f, counted on f
    from capgan.attacks import DifferentiableTarget, run_attack
    from capgan.core.seeding import torch_generator
    import zlib

    gen = torch_generator("attack", zlib.crc32(b"pgd7"), 8000, seed=3)
    adv = run_attack("pgd7", DifferentiableTarget(f), data, 8, generator=gen).adversarial.pixels
    with torch.no_grad():
        fooled = (f(adv).argmax(1) != data.labels).float().mean().item() * 100
        robust = (f(models[2].purify(adv)).argmax(1) == data.labels).float().mean().item() * 100
    assert rec.success_rate == pytest.approx(fooled)
    assert rec.accuracy == pytest.approx(robust)


def test_record_validation():
    with pytest.raises(ValueError):
        EvalRecord("d", "a", 8, "p", 101.0, 0, 1, 0, 50)


def _records():
    return [EvalRecord("capgan", "pgd40", e, "BLACK_BOX_TRANSFER", 50.0 + e / 3, 40.1 - e / 7, 600, 0, 92.5,
                       wall_time=1.0) for e in (4, 8, 12, 16, 32)]


def test_report_one_record(tmp_path):
    rec = _records()[:1]
    files = emit_report(rec, tmp_path)
    lines = files["csv"].read_text().splitlines()
    assert len(lines) == 2 and lines[0].split(",") == list(CSV_FIELDS)
    assert json.loads(files["json"].read_text())[0]["attack"] == "pgd40"


def test_report_csv_round_trip(tmp_path):
    rec = _records()
    files = emit_report(rec, tmp_path, plots=False)
    assert read_records_csv(files["csv"]) == rec


def test_report_five_eps_is_one_curve_of_five_points(tmp_path, monkeypatch):
    calls = []
    real = evalharness._plot_sweep
    monkeypatch.setattr(evalharness, "_plot_sweep", lambda rs, a, d, p: (calls.append(len(rs)), real(rs, a, d, p)))
    files = emit_report(_records(), tmp_path)
    assert calls == [5]
    assert (tmp_path / "pgd40_capgan_sweep.png").stat().st_size > 0
    assert sum(k.startswith("plot:") for k in files) == 1


def test_report_errors(tmp_path):
    with pytest.raises(ValueError):
        emit_report([], tmp_path)
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(ReportError, match="file"):
        emit_report(_records(), blocker / "sub")


def test_summarize_has_one_line_per_record():
    assert len(summarize(_records()).splitlines()) == 6


def test_one_cell_grid_equals_single_run(models, data):
    f, s, _ = models
    base = apply_overrides(ExperimentConfig(), [f"capgan.arch.{k}={v}" for k, v in TINY.items()]
                           + ["capgan.batch_size=6", "capgan.epochs=1"])
    domains = build_adversarial_domain(f, data, PerturbationBudget(8), seed=0)
    roster = (("none", Knowledge.BLACK_BOX_TRANSFER), ("pgd7", Knowledge.BLACK_BOX_TRANSFER),
              ("bpda_i40", Knowledge.ADAPTIVE_BPDA))
    res = run_ablation([[]], base, domains=domains, classifier=f, surrogate=s, test=data, roster=roster, seed=0)
    assert not res.failures

    from capgan.training import train_capgan

    pair = train_capgan(domains, f, base, seed=0).pair
    pipe = DefensePipeline.with_purifier(f, pair, "capgan", s)
    single = [evaluate(pipe, data, a, tm(k), seed=0) for a, k in roster]
    assert res.records == single


def test_failing_cell_is_recorded_and_grid_continues(models, data):
    f, s, _ = models
    base = apply_overrides(ExperimentConfig(), [f"capgan.arch.{k}={v}" for k, v in TINY.items()]
                           + ["capgan.batch_size=6", "capgan.epochs=1"])
    domains = build_adversarial_domain(f, data, PerturbationBudget(8), seed=0)
    res = run_ablation([["capgan.alpha=7"], []], base, domains=domains, classifier=f, surrogate=s, test=data,
                       roster=(("none", Knowledge.BLACK_BOX_TRANSFER),), seed=0)
    assert list(res.failures) == ["capgan[capgan.alpha=7]"]
    assert [r.defense for r in res.records] == ["capgan"]
