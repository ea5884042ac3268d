"""Smoke test for the hope_ope extension module.

Build and install first, e.g. `maturin develop -m crates/python/Cargo.toml
--features extension-module`, then run `python python/smoke_test.py`.
"""

import json
import math
import tempfile

import hope_ope


def main():
    policies = hope_ope.sepsis_policies()
    assert set(policies) == {"behavior", "optimal", "with_antibiotics", "without_antibiotics"}
    truth = {name: hope_ope.sepsis_true_value(p) for name, p in policies.items() if name != "behavior"}
    assert abs(truth["optimal"] - 0.287011) < 1e-6, truth

    data, outcomes = hope_ope.simulate(policies["behavior"], 500, seed=1)
    assert len(data) == 500 and sum(outcomes.values()) == 500
    assert data.n_obs == 1440 and data.n_act == 8

    # on-policy: every importance weight is 1, so WIS is the mean return of
    # the sparse channel, which holds the aggregated reward at the last step
    sparse = [g * data.gamma ** (n - 1) for g, n in zip(data.aggregated_rewards(), data.lengths())]
    mean = sum(sparse) / len(data)
    wis = hope_ope.estimate("wis", data, policies["behavior"])
    assert math.isclose(wis, mean, rel_tol=0, abs_tol=1e-12), (wis, mean)

    rec = hope_ope.reconstruct(data, k=5)
    assert [len(r) for r in rec["rhat"]] == data.lengths()
    estimates = {}
    for name in truth:
        estimates[name] = hope_ope.estimate("wis", data, policies[name], rewards=rec["rhat"])
        for e in ["is", "pdis", "phwis", "fqe", "dr", "wdr"]:
            assert math.isfinite(hope_ope.estimate(e, data, policies[name]))
    names = sorted(truth)
    rho = hope_ope.spearman([truth[n] for n in names], [estimates[n] for n in names])
    assert -1.0 <= rho <= 1.0

    welch = hope_ope.welch_t_test([0.1, 0.2, 0.3], [0.1, 0.2, 0.3])
    assert welch["t_statistic"] == 0.0 and welch["p_value"] == 1.0

    config = json.loads(hope_ope.default_config())
    config.update(n_trajectories=200, bootstrap_b=5, estimators=["wis", "hope"])
    with tempfile.TemporaryDirectory() as out:
        report = json.loads(hope_ope.run_benchmark(out, json.dumps(config)))
    assert {s["estimator"] for s in report["summaries"]} == {"wis", "hope"}

    print("smoke test passed:", {n: round(v, 4) for n, v in estimates.items()})


if __name__ == "__main__":
    main()
