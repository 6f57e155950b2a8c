"""Acceptance gate: every criterion prints one PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -v -s` to see the lines as they go.
"""

from __future__ import annotations

import functools
import json
import math
import random
import time

import pytest
import yaml
from click.testing import CliRunner

from shotscan import (
    Dataset,
    Exemplar,
    RemoteBackend,
    RemoteConfig,
    RunConfig,
    SupportSet,
    classify,
    default_template,
    exact_expectation,
    run_experiment,
    summarize_curve,
    trial_zscores,
    verify_estimator,
)
from shotscan.cli import main
from shotscan.errors import ProtocolError, TransportError
from shotscan.prompting import RenderedPrompt

from helpers import (
    CountingBackend,
    base_config_dict,
    engineered_selection_run,
    make_dataset,
    make_mock,
    make_template,
    write_config,
    write_corpus_files,
)
from stubserver import ScriptedCompletions

CLASSES = ("no", "yes")


def criterion(name):
    def decorate(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            try:
                fn(*args, **kwargs)
            except BaseException:
                print(f"ACCEPTANCE {name}: FAIL")
                raise
            print(f"ACCEPTANCE {name}: PASS")

        return wrapper

    return decorate


@criterion("C01 oracle equivalence under full enumeration")
def test_c01_exhaustive_zero_error():
    started = time.monotonic()
    ds = make_dataset(n_train=30, n_eval=20)
    backend = make_mock(ds, mode="prefix-majority", label=0)
    template = make_template()
    config = RunConfig(k=4, permutations=1, trials=1, eval_subsample=20, exhaustive=True)
    artifact = run_experiment(config, ds, backend, template)
    summary = summarize_curve(artifact.records)
    support = SupportSet(
        trial=0, members=tuple(artifact.provenance["support_sets"]["0"]), seed=0
    )
    exact = exact_expectation(support, ds, backend, template)
    for k in range(5):
        assert summary.grand_mean(k) == exact.mean(k), f"nonzero error at k={k}"
    assert time.monotonic() - started < 10.0


@criterion("C02 Monte Carlo convergence within 3 standard errors")
def test_c02_convergence_five_seeds():
    started = time.monotonic()
    ds = make_dataset(n_train=50, n_eval=20)
    backend = make_mock(ds, mode="hash")
    template = make_template()
    for seed in range(5):
        config = RunConfig(k=4, permutations=500, trials=1, seed=seed, eval_subsample=20)
        report = verify_estimator(config, ds, backend, template, sigma=3.0)
        assert report.passed, f"seed {seed}: max error {report.max_abs_error}"
    assert time.monotonic() - started < 60.0


@criterion("C03 default protocol shape against a stub server")
def test_c03_protocol_shape():
    train = tuple(
        Exemplar(id=f"t{i}", fields={"sentence": f"s{i}"}, label=i % 2) for i in range(600)
    )
    eval_split = tuple(
        Exemplar(id=f"q{i}", fields={"sentence": f"e{i}"}, label=i % 2) for i in range(300)
    )
    ds = Dataset(name="shape", classes=CLASSES, train=train, eval=eval_split)
    config = RunConfig()  # the defaults: 5 trials, 20 permutations, k=20, 256 eval
    with ScriptedCompletions(tail_tokens=2) as stub:
        backend = RemoteBackend(
            RemoteConfig(endpoint=stub.url, retries=1, backoff=0.0, batch_size=512)
        )
        try:
            artifact = run_experiment(config, ds, backend, default_template(["sentence"]))
        finally:
            backend.close()
    assert len(artifact.records) == 5 * 20 * 21 == 2100
    assert artifact.provenance["eval_size"] == 256
    assert len({(r.trial, r.perm) for r in artifact.records}) == 100


@criterion("C04 zero-shot invariance and call accounting")
def test_c04_zero_shot():
    ds = make_dataset(n_train=30, n_eval=13)
    template = make_template()
    # Invariance: every k=0 record within a trial carries the same accuracy.
    artifact = run_experiment(
        RunConfig(k=3, permutations=6, trials=3, eval_subsample=13),
        ds,
        make_mock(ds, mode="hash"),
        template,
    )
    for trial in range(3):
        accs = {r.accuracy for r in artifact.records if r.trial == trial and r.k == 0}
        assert len(accs) == 1
    # Accounting: with the cache on, k=0 costs one backend call per eval query.
    counting = CountingBackend(make_mock(ds, mode="hash"))
    run_experiment(
        RunConfig(k=3, permutations=6, trials=1, eval_subsample=13, cache=True),
        ds,
        counting,
        template,
    )
    assert counting.by_prefix_len[0] == 13
    # Shared across trials the total stays |eval|, never P x |eval|.
    counting = CountingBackend(make_mock(ds, mode="hash"))
    run_experiment(
        RunConfig(k=3, permutations=6, trials=3, eval_subsample=13, cache=True),
        ds,
        counting,
        template,
    )
    assert counting.by_prefix_len[0] == 13


@criterion("C05 cache transparency")
def test_c05_cache_transparency():
    ds = make_dataset(n_train=30, n_eval=20)
    template = make_template()
    variants = []
    for cache in (True, False):
        config = RunConfig(k=3, permutations=4, trials=2, eval_subsample=20, cache=cache)
        variants.append(
            run_experiment(config, ds, make_mock(ds, mode="hash"), template).records
        )
    assert variants[0] == variants[1]
    lines = [json.dumps(r.to_json_obj(), sort_keys=True) for r in variants[0]]
    other = [json.dumps(r.to_json_obj(), sort_keys=True) for r in variants[1]]
    assert lines == other  # bit-identical serialized form


@criterion("C06 command determinism (byte-identical reruns)")
def test_c06_determinism(tmp_path):
    runner = CliRunner()
    write_corpus_files(tmp_path, n_train=30, n_eval=20)
    outputs = []
    for name in ("det_a", "det_b"):
        config_path = write_config(tmp_path, base_config_dict(out_dir=name), f"{name}.yaml")
        result = runner.invoke(main, ["run", "--config", str(config_path)])
        assert result.exit_code == 0, result.output
        outputs.append(tmp_path / name)
    for filename in ("records.jsonl", "curve.json", "curve.csv", "traces.csv", "oneshot.csv"):
        assert (outputs[0] / filename).read_bytes() == (outputs[1] / filename).read_bytes()
    # report command, twice over the same records
    for name in ("rep_a", "rep_b"):
        result = runner.invoke(
            main,
            ["report", "--records", str(outputs[0] / "records.jsonl"), "--out", str(tmp_path / name)],
        )
        assert result.exit_code == 0, result.output
    for filename in ("curve.json", "curve.csv", "traces.csv", "oneshot.csv"):
        assert (tmp_path / "rep_a" / filename).read_bytes() == (
            tmp_path / "rep_b" / filename
        ).read_bytes()


@criterion("C07 z-score correctness")
def test_c07_zscores():
    scores = trial_zscores({"a": 0.5, "b": 0.7, "c": 0.9})
    assert abs(scores.mu_t - 0.7) <= 1e-6
    assert abs(scores.sigma_t - math.sqrt(0.08 / 3)) <= 1e-6
    assert abs(scores.z["a"] - (-1.2247449)) <= 1e-6
    assert abs(scores.z["b"]) <= 1e-6
    assert abs(scores.z["c"] - 1.2247449) <= 1e-6
    # Standardization property over random trials.
    rng = random.Random(0)
    for _ in range(200):
        mu_map = {f"e{i}": rng.random() for i in range(rng.randint(2, 30))}
        out = trial_zscores(mu_map)
        zs = list(out.z.values())
        if out.sigma_t > 0:
            assert abs(sum(zs) / len(zs)) <= 1e-9
            assert abs(math.sqrt(sum(z * z for z in zs) / len(zs)) - 1.0) <= 1e-9


@criterion("C08 selection pipeline recovers planted extremes")
def test_c08_selection(tmp_path):
    runner = CliRunner()
    config_path, records_path, good, bad = engineered_selection_run(tmp_path)
    result = runner.invoke(
        main, ["select", "--config", str(config_path), "--records", str(records_path)]
    )
    assert result.exit_code == 0, result.output
    report = json.loads((tmp_path / "out" / "zscore_report.json").read_text())
    assert len(report["high_set"]) == len(report["low_set"]) == 6
    assert set(report["high_set"]) == set(good)
    assert set(report["low_set"]) == set(bad)
    assert set(report["high_set"]).isdisjoint(report["low_set"])
    for name in ("high", "low", "baseline"):
        followup = yaml.safe_load((tmp_path / "out" / f"config_{name}.yaml").read_text())
        assert len(followup["run"]["fixed_support"]) == 6


@criterion("C09 remote-backend contract (6 checks)")
def test_c09_remote_contract(monkeypatch):
    checks = 0
    # 1. summed log-probabilities over the candidate continuation
    with ScriptedCompletions(token_logprob=-1.0) as stub:
        backend = RemoteBackend(RemoteConfig(endpoint=stub.url, retries=0, backoff=0.0))
        scores = backend.score("Review: ok\nSentiment:", [" very good"])
        backend.close()
        assert scores[0].score == pytest.approx(-2.0)
        checks += 1
    # 2. ties break to the lowest class index
    with ScriptedCompletions(token_logprob=-1.0) as stub:
        backend = RemoteBackend(RemoteConfig(endpoint=stub.url, retries=0, backoff=0.0))
        prompt = RenderedPrompt(text="Review: ok\nSentiment:", prefix_ids=(), query_id="q0")
        predicted, _ = classify(backend, prompt, CLASSES)
        backend.close()
        assert predicted == 0
        checks += 1
    # 3. transient failures retry then succeed
    with ScriptedCompletions(status_script=(500, 500, 500)) as stub:
        backend = RemoteBackend(RemoteConfig(endpoint=stub.url, retries=3, backoff=0.0))
        scores = backend.score("prompt", [" yes"])
        backend.close()
        assert scores[0].score == pytest.approx(-1.0)
        assert stub.request_count == 4
        checks += 1
    # 4. missing log-probabilities is a protocol error naming the field
    with ScriptedCompletions(omit_field="logprobs") as stub:
        backend = RemoteBackend(RemoteConfig(endpoint=stub.url, retries=0, backoff=0.0))
        with pytest.raises(ProtocolError, match="logprobs"):
            backend.score("prompt", [" yes"])
        backend.close()
        checks += 1
    # 5. exhausted retries surface as a transport error
    with ScriptedCompletions(status_script=(503,) * 5) as stub:
        backend = RemoteBackend(RemoteConfig(endpoint=stub.url, retries=2, backoff=0.0))
        with pytest.raises(TransportError):
            backend.score("prompt", [" yes"])
        backend.close()
        assert stub.request_count == 3
        checks += 1
    # 6. bearer auth from the environment plus repeat determinism
    monkeypatch.setenv("SHOTSCAN_ACCEPTANCE_TOKEN", "tok")
    with ScriptedCompletions() as stub:
        backend = RemoteBackend(
            RemoteConfig(
                endpoint=stub.url, retries=0, backoff=0.0, token_env="SHOTSCAN_ACCEPTANCE_TOKEN"
            )
        )
        first = backend.score("prompt", [" yes", " no"])
        second = backend.score("prompt", [" yes", " no"])
        backend.close()
        assert first == second
        assert all(h == "Bearer tok" for h in stub.auth_headers)
        checks += 1
    assert checks == 6


@criterion("C10 dispatch-order independence")
def test_c10_dispatch_order():
    ds = make_dataset(n_train=30, n_eval=20)
    template = make_template()
    results = []
    for cap in (1, 16):
        config = RunConfig(k=3, permutations=4, trials=2, eval_subsample=20, concurrency=cap)
        results.append(run_experiment(config, ds, make_mock(ds, mode="hash"), template).records)
    assert results[0] == results[1]
