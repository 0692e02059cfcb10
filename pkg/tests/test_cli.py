import csv
import json

import numpy as np
import pytest

from nort import io
from nort.cli import ConfigError, main, run_sweep, validate_config, _SWEEP_KEYS
from nort.tensor import FactoredTensor, FactorPair, SparseTensorCoo


def write_cfg(path, **items):
    lines = []
    for key, value in items.items():
        if isinstance(value, str):
            value = f'"{value}"'
        elif isinstance(value, bool):
            value = str(value).lower()
        lines.append(f"{key} = {value}")
    path.write_text("\n".join(lines) + "\n")
    return str(path)


def read_trace(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def generated(tmp_path):
    cfg = write_cfg(tmp_path / "gen.toml", shape=[10, 9, 8], rank=2, noise_sigma=0.01, n_obs=300, n_test=100)
    assert main(["gen", "--config", cfg, "--out", str(tmp_path / "data"), "--seed", "3"]) == 0
    return tmp_path / "data"


def test_gen_outputs_and_regeneration(tmp_path, generated):
    manifest = json.loads((generated / "manifest.json").read_text())
    assert manifest["config"]["seed"] == 3
    assert manifest["n_observed"] == 300 and manifest["density"] == pytest.approx(300 / 720)
    train = io.coo_read(generated / "train.coo")
    val = io.coo_read(generated / "validation.coo")
    assert train.nnz + val.nnz == 300 and io.coo_read(generated / "test.coo").nnz == 100
    # rerun from the echoed config alone
    echo = write_cfg(tmp_path / "echo.toml", **manifest["config"])
    assert main(["gen", "--config", echo, "--out", str(tmp_path / "again")]) == 0
    for name in ("train.coo", "validation.coo", "test.coo"):
        assert (tmp_path / "again" / name).read_bytes() == (generated / name).read_bytes()


def test_solve_trace_and_eval(tmp_path, generated):
    cfg = write_cfg(tmp_path / "solve.toml", train=str(generated / "train.coo"),
                    validation=str(generated / "validation.coo"), penalty="lsp", theta=1.0,
                    **{"lambda": 0.5}, max_iter=40)
    out = tmp_path / "run"
    code = main(["solve", "--config", cfg, "--out", str(out)])
    assert code in (0, 4)
    rows = read_trace(out / "trace.csv")
    assert list(rows[0]) == ["iter", "time_s", "objective", "residual", "rank_mode_1", "rank_mode_2",
                             "rank_mode_3", "gamma", "accepted"]
    assert len(rows) <= 41
    obj = [float(r["objective"]) for r in rows]
    for t in range(1, len(rows)):
        if rows[t]["accepted"] == "1":
            assert obj[t] <= obj[t - 1] + 1e-8 * max(1.0, abs(obj[t - 1]))
    summary = json.loads((out / "manifest.json").read_text())
    assert summary["converged"] == (code == 0) and "validation_rmse" in summary

    again = tmp_path / "run2"
    main(["solve", "--config", cfg, "--out", str(again)])
    strip = lambda rs: [{k: v for k, v in r.items() if k != "time_s"} for r in rs]
    assert strip(read_trace(again / "trace.csv")) == strip(rows)

    ev = write_cfg(tmp_path / "eval.toml", factors=str(out / "factors.npz"), heldout=str(generated / "test.coo"))
    assert main(["eval", "--config", ev, "--out", str(tmp_path / "ev")]) == 0
    report = json.loads((tmp_path / "ev" / "metrics.json").read_text())
    assert report["n"] == 100 and np.isfinite(report["rmse"])


def test_eval_perfect_factors_and_shape_mismatch(tmp_path):
    rng = np.random.default_rng(0)
    shape = (4, 3, 5)
    left, right = rng.standard_normal((4, 2)), rng.standard_normal((15, 2))
    pair = FactorPair(1, left, right)
    io.factors_save(tmp_path / "f.npz", shape, [pair], [1.0])
    dense = FactoredTensor(shape, [(1.0, pair)]).to_dense()
    io.coo_write(SparseTensorCoo.from_dense(dense, rng.uniform(size=shape) < 0.5), tmp_path / "h.coo")
    ev = write_cfg(tmp_path / "e.toml", factors=str(tmp_path / "f.npz"), heldout=str(tmp_path / "h.coo"))
    assert main(["eval", "--config", ev, "--out", str(tmp_path / "o")]) == 0
    assert json.loads((tmp_path / "o" / "metrics.json").read_text())["rmse"] < 1e-12

    other = SparseTensorCoo.from_dense(np.ones((4, 3, 6)), np.ones((4, 3, 6), bool))
    io.coo_write(other, tmp_path / "bad.coo")
    ev = write_cfg(tmp_path / "e2.toml", factors=str(tmp_path / "f.npz"), heldout=str(tmp_path / "bad.coo"))
    assert main(["eval", "--config", ev, "--out", str(tmp_path / "o2")]) == 2


def test_exit_codes(tmp_path, generated):
    unknown = write_cfg(tmp_path / "u.toml", shape=[3, 3, 3], rank=1, colour="red")
    assert main(["gen", "--config", unknown]) == 2
    missing = write_cfg(tmp_path / "m.toml", shape=[3, 3, 3])
    assert main(["gen", "--config", missing]) == 2
    nofile = write_cfg(tmp_path / "n.toml", train=str(tmp_path / "nope.coo"), **{"lambda": 1.0})
    assert main(["solve", "--config", nofile]) == 3
    short = write_cfg(tmp_path / "s.toml", train=str(generated / "train.coo"), **{"lambda": 0.5},
                      max_iter=2, rel_tol=0.0)
    out = tmp_path / "short"
    assert main(["solve", "--config", short, "--out", str(out)]) == 4
    assert len(read_trace(out / "trace.csv")) == 3


def test_sweep_rejects_multiple_axes():
    base = validate_config({"axis": ["sigma", "rank"], "values": [0.0], "rank": 2, "lambda": 1.0,
                            "shape": [5, 5, 5]}, _SWEEP_KEYS)
    with pytest.raises(ConfigError):
        run_sweep(base)
    nested = dict(base, axis="sigma", values=[[0.0, 1e-3], [2, 3]])
    with pytest.raises(ConfigError):
        run_sweep(nested)


def test_sigma_sweep_nondecreasing(tmp_path):
    cfg = write_cfg(tmp_path / "sw.toml", axis="sigma", values=[0.0, 1e-3, 1e-2], shape=[20, 20, 20],
                    rank=3, penalty="tnn", theta=3, **{"lambda": 0.3}, fixed_data=True, max_iter=400, seed=1)
    assert main(["sweep", "--config", cfg, "--out", str(tmp_path / "sw")]) in (0, 4)
    with open(tmp_path / "sw" / "sweep.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    rm = [float(r["test_rmse"]) for r in rows]
    assert [float(r["value"]) for r in rows] == [0.0, 1e-3, 1e-2]
    assert rm[0] <= rm[1] <= rm[2]
