import json
import math

import numpy as np
import pytest

from tatkit.decoder import DecoderConfig
from tatkit.numgrid import UsageError
from tatkit.perception import EncoderConfig
from tatkit.simworld import RouteSpec, Scenario, generate_scenario
from tatkit.trainer import (CollectConfig, Dataset, GruBaselineConfig, GruHead, NonFiniteLoss,
                            Policy, PolicyConfig, Sample, TrainConfig, collect, error_slope,
                            evaluate_closedloop, evaluate_loss, evaluate_openloop,
                            load_checkpoint, read_header, read_shard, save_checkpoint, train,
                            waypoint_errors, write_loss_log, write_shard)
from tatkit import numgrid as ng

from helpers import param_gradcheck


def tiny_policy_config(variant="tat_ct", dtype="float64", seed=0):
    enc = EncoderConfig(strides=(4, 4, 2), channels=(4, 8, 16), dtype=dtype)
    dec = DecoderConfig(d_model=16, n_layers=1, n_heads=2, memory_shape=(8, 8))
    return PolicyConfig(variant=variant, encoder=enc, decoder=dec,
                        gru=GruBaselineConfig(hidden=16), seed=seed)


def straight_scenario(length=100.0, seed=0):
    xs = np.arange(0.0, length + 1e-9, 0.5)
    line = np.column_stack([xs, np.zeros_like(xs)])
    route = RouteSpec(seed, "short", line, line[-1:].copy(), np.array([length]), [], [line])
    return Scenario(route, [], name=f"straight-{seed}")


@pytest.fixture(scope="module")
def small_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    scenarios = [generate_scenario(s, obstacles=(s % 2 == 1)) for s in (0, 1, 2)]
    return collect(scenarios, out), out


def random_sample(rng, z=4):
    idx = np.sort(rng.choice(256 * 256 * 2, 50, replace=False)).astype(np.uint32)
    return Sample(idx, rng.integers(1, 9, 50).astype(np.uint16), rng.normal(0, 20, 2),
                  rng.normal(0, 5, (z, 2)), int(rng.integers(0, 2**40)), 3, 17)


# ---------------------------------------------------------------- samples

def test_sample_round_trip():
    rng = np.random.default_rng(0)
    s = random_sample(rng)
    back, end = Sample.decode(s.encode())
    assert end == len(s.encode())
    for f in ("hist_index", "hist_counts", "target", "waypoints"):
        a, b = getattr(s, f), getattr(back, f)
        assert a.dtype == b.dtype and a.tobytes() == b.tobytes()
    assert (back.route_seed, back.episode, back.step) == (s.route_seed, 3, 17)


def test_shard_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    samples = [random_sample(rng) for _ in range(20)]
    write_shard(tmp_path / "a.tatd", samples)
    assert (tmp_path / "a.tatd").read_bytes()[:5] == b"TATD1"
    back = read_shard(tmp_path / "a.tatd")
    assert [b.encode() for b in back] == [s.encode() for s in samples]


def test_label_sanity_bound():
    with pytest.raises(ValueError):
        Sample(np.zeros(0, np.uint32), np.zeros(0, np.uint16), [0, 0], [[65.0, 0.0]] * 4, 0, 0, 0)
    with pytest.raises(ValueError):
        Sample(np.zeros(0, np.uint32), np.zeros(0, np.uint16), [0, 0], [[np.nan, 0.0]] * 4, 0, 0, 0)


# -------------------------------------------------------------- collection

def test_straight_route_sample_count(tmp_path):
    ds = collect([straight_scenario(100.0)], tmp_path)
    assert abs(len(ds) - 100 / 6 / 0.5) <= 2


def test_empty_collection(tmp_path):
    ds = collect([], tmp_path)
    assert len(ds) == 0
    m = json.loads((tmp_path / "manifest.json").read_text())
    assert m["n_samples"] == 0 and m["shards"] == [] and m["format"] == "TATD1"
    assert len(Dataset.load(tmp_path)) == 0


def test_collection_deterministic(tmp_path, small_data):
    _, first = small_data
    scenarios = [generate_scenario(s, obstacles=(s % 2 == 1)) for s in (0, 1, 2)]
    collect(scenarios, tmp_path / "again", jobs=2)
    for name in ("manifest.json", "shard-0000.tatd"):
        assert (first / name).read_bytes() == (tmp_path / "again" / name).read_bytes()


def test_manifest_contents(small_data):
    ds, out = small_data
    m = json.loads((out / "manifest.json").read_text())
    assert m["n_samples"] == len(ds) == sum(r["samples"] for r in m["routes"])
    assert m["seeds"] == [0, 1, 2] and len(m["config_hash"]) == 64
    loaded = Dataset.load(out)
    assert [s.encode() for s in loaded.samples] == [s.encode() for s in ds.samples]


def test_samples_well_formed(small_data):
    ds, _ = small_data
    for s in ds.samples[::7]:
        assert s.waypoints.shape == (4, 2) and np.all(np.abs(s.waypoints) <= 64)
        assert np.all(s.hist_counts > 0) and np.all(np.diff(s.hist_index.astype(np.int64)) > 0)
        assert s.target[0] > -5.0  # the target-point lies ahead


def test_infraction_episode_discarded(tmp_path, caplog):
    cfg = CollectConfig(steer_noise=1.5)
    ds = collect([generate_scenario(3)], tmp_path, cfg)
    m = json.loads((tmp_path / "manifest.json").read_text())
    assert len(ds) == 0 and m["discarded"][0]["seed"] == 3
    assert "discarding route" in caplog.text


def test_route_split_has_no_leakage(small_data):
    ds, _ = small_data
    tr, val = ds.split(0.1, seed=0)
    assert len(tr) + len(val) == len(ds)
    assert set(tr.route_seeds).isdisjoint(val.route_seeds) and len(val.route_seeds) == 1


def test_batch_normalisation(small_data):
    ds, _ = small_data
    hist, target, gt = ds.batch([0, 1], dtype="float64")
    assert hist.shape == (2, 256, 256, 2) and hist.max() <= 1.0
    dense = ds[0].dense()
    np.testing.assert_array_equal(hist[0], np.minimum(dense, 5) / 5)
    np.testing.assert_array_equal(gt[1], ds[1].waypoints)


# ---------------------------------------------------------------- training

def test_lr_schedule():
    c = TrainConfig()
    assert (c.epochs, c.learning_rate, c.milestones) == (100, 1e-4, (40, 70))
    assert c.lr_at(39) == 1e-4
    assert math.isclose(c.lr_at(40), 1e-5, rel_tol=1e-12)
    assert math.isclose(c.lr_at(70), 1e-6, rel_tol=1e-12)


def test_variant_configs_differ_only_in_variant():
    a, b = TrainConfig(variant="tat_ct").to_dict(), TrainConfig(variant="gru").to_dict()
    assert {k for k in a if a[k] != b[k]} == {"variant"}
    pa, pb = tiny_policy_config("tat_ct").to_dict(), tiny_policy_config("gru").to_dict()
    assert {k for k in pa if pa[k] != pb[k]} == {"variant"}


def test_unknown_variant():
    with pytest.raises(ValueError):
        TrainConfig(variant="lstm")


def test_empty_dataset_rejected():
    with pytest.raises(UsageError):
        train(TrainConfig(epochs=1), Dataset([]), tiny_policy_config())


def run_small(ds, variant="tat_ct", seed=0, steps=6):
    cfg = TrainConfig(epochs=1, learning_rate=1e-3, batch_size=8, variant=variant, seed=seed,
                      max_steps=steps)
    return train(cfg, ds.subset(range(64)), tiny_policy_config(variant))


def test_training_deterministic(small_data):
    ds, _ = small_data
    a, b = run_small(ds), run_small(ds)
    assert abs(a.final_loss - b.final_loss) <= 1e-10
    assert a.step_losses == b.step_losses
    for k in a.policy.params:
        np.testing.assert_array_equal(a.policy.params[k].data, b.policy.params[k].data)


@pytest.mark.parametrize("variant", ["tat_ct", "tat_rt", "tet", "gru"])
def test_loss_decreases_on_fixed_batch(small_data, variant):
    ds, _ = small_data
    sub = ds.subset(range(0, 80, 10))
    cfg = TrainConfig(epochs=30, learning_rate=3e-3, batch_size=8, variant=variant)
    res = train(cfg, sub, tiny_policy_config(variant), validation=Dataset([]))
    assert res.step_losses[-1] < 0.5 * res.step_losses[0]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_names_parameter(small_data):
    ds, _ = small_data
    policy = Policy(tiny_policy_config())
    policy.params["decoder.head.2.bias"].data[:] = np.inf
    with pytest.raises(NonFiniteLoss, match="first non-finite gradient"):
        train(TrainConfig(epochs=1, batch_size=4, max_steps=1), ds.subset(range(8)), policy=policy)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_gradient_diagnostic(small_data):
    ds, _ = small_data
    policy = Policy(tiny_policy_config())
    policy.params["decoder.layers.0.ffn.w2"].data[0, 0] = np.nan
    with pytest.raises(NonFiniteLoss, match=r"decoder\.|encoder\."):
        train(TrainConfig(epochs=1, batch_size=4, max_steps=1), ds.subset(range(8)), policy=policy)


def test_loss_log(tmp_path, small_data):
    ds, _ = small_data
    cfg = TrainConfig(epochs=3, batch_size=16, max_steps=None)
    res = train(cfg, ds.subset(range(32)), tiny_policy_config(), validation=ds.subset(range(32, 40)))
    write_loss_log(tmp_path / "loss.jsonl", res.history)
    lines = (tmp_path / "loss.jsonl").read_text().splitlines()
    assert len(lines) == 3
    rec = json.loads(lines[2])
    assert rec["epoch"] == 2 and "val_loss" in rec and "seconds" not in rec


# ------------------------------------------------------------------ models

@pytest.mark.parametrize("variant", ["tat_ct", "tat_rt", "tet", "gru"])
def test_policy_shapes(small_data, variant):
    ds, _ = small_data
    hist, target, gt = ds.batch([0, 1, 2], dtype="float64")
    policy = Policy(tiny_policy_config(variant))
    assert policy.predict(hist, target).shape == (3, 4, 2)
    assert np.isfinite(policy.loss(hist, target, gt).item())


def test_gru_pools_away_spatial_layout():
    head = GruHead(GruBaselineConfig(hidden=8), feature_width=6, seed=2)
    rng = np.random.default_rng(0)
    fmap = rng.normal(size=(2, 4, 4, 6))
    perm = rng.permutation(16)
    shuffled = fmap.reshape(2, 16, 6)[:, perm].reshape(2, 4, 4, 6)
    u = ng.Tensor(rng.normal(size=(2, 2)))
    a = head.decode(ng.Tensor(fmap), u).data
    b = head.decode(ng.Tensor(shuffled), u).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_gru_gradient():
    head = GruHead(GruBaselineConfig(hidden=8), feature_width=6, seed=3)
    rng = np.random.default_rng(1)
    fmap = ng.Tensor(rng.normal(size=(2, 3, 3, 6)))
    u = ng.Tensor(rng.normal(0, 20, size=(2, 2)))
    gt = ng.Tensor(rng.normal(0, 3, size=(2, 4, 2)))
    worst, where = param_gradcheck(lambda: ng.l2_waypoint_loss(head.decode(fmap, u), gt),
                                   head.params, rng)
    assert worst < 1e-4, where


def test_policy_width_contract():
    with pytest.raises(ng.DimensionError):
        Policy(PolicyConfig(encoder=EncoderConfig(channels=(4, 8, 32)),
                            decoder=DecoderConfig(d_model=16, n_heads=2, memory_shape=(8, 8))))


# ------------------------------------------------------------- checkpoints

@pytest.mark.parametrize("variant", ["tat_ct", "gru"])
def test_checkpoint_idempotent(tmp_path, small_data, variant):
    ds, _ = small_data
    policy = Policy(tiny_policy_config(variant, seed=4))
    save_checkpoint(tmp_path / "a.tatc", policy, TrainConfig(variant=variant).to_dict())
    loaded, header = load_checkpoint(tmp_path / "a.tatc")
    save_checkpoint(tmp_path / "b.tatc", loaded, header["train"])
    again, _ = load_checkpoint(tmp_path / "b.tatc")
    save_checkpoint(tmp_path / "c.tatc", again, header["train"])
    assert (tmp_path / "b.tatc").read_bytes() == (tmp_path / "c.tatc").read_bytes()
    assert (tmp_path / "a.tatc").read_bytes() == (tmp_path / "b.tatc").read_bytes()
    hist, target, _ = ds.batch([0, 1], dtype="float64")
    np.testing.assert_array_equal(policy.predict(hist, target), again.predict(hist, target))
    assert header["seed"] == 4 and header["policy"]["variant"] == variant


def test_checkpoint_header_and_magic(tmp_path):
    policy = Policy(tiny_policy_config())
    save_checkpoint(tmp_path / "a.tatc", policy)
    raw = (tmp_path / "a.tatc").read_bytes()
    assert raw[:5] == b"TATC1"
    h = read_header(tmp_path / "a.tatc")
    names = [t["name"] for t in h["tensors"]]
    assert names == list(policy.params)
    assert sum(t["nbytes"] for t in h["tensors"]) == sum(p.data.nbytes for p in policy.params.values())
    (tmp_path / "bad.tatc").write_bytes(b"NOPE!" + raw[5:])
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.tatc")


# -------------------------------------------------------------- evaluation

class LabelFeeder:
    def __init__(self, ds):
        self.queue = [s.waypoints for s in ds.samples]

    def predict(self, hist, target):
        out, self.queue = self.queue[:len(hist)], self.queue[len(hist):]
        return np.stack(out)


class Zero:
    def predict(self, hist, target):
        return np.zeros((len(hist), 4, 2))


def test_openloop_perfect_predictor(small_data):
    ds, _ = small_data
    sub = ds.subset(range(100))
    assert np.all(evaluate_openloop(LabelFeeder(sub), sub, batch_size=32) == 0.0)


def test_openloop_zero_predictor(small_data):
    ds, _ = small_data
    sub = ds.subset(range(100))
    expect = np.mean([np.linalg.norm(s.waypoints, axis=1) for s in sub.samples], axis=0)
    np.testing.assert_allclose(evaluate_openloop(Zero(), sub, batch_size=32), expect, atol=1e-5)


def test_error_helpers():
    assert error_slope([1.0, 2.0, 3.0, 4.0]) == pytest.approx(1.0)
    assert error_slope([2.0, 2.0, 2.0]) == pytest.approx(0.0, abs=1e-12)
    pred = np.zeros((2, 4, 2))
    gt = np.zeros((2, 4, 2))
    gt[:, :, 0] = [3, 3, 3, 3]
    gt[:, :, 1] = [4, 4, 4, 4]
    np.testing.assert_allclose(waypoint_errors(pred, gt), 5.0)


def test_closedloop_oracle_is_perfect():
    report, episodes = evaluate_closedloop(None, [generate_scenario(s) for s in (10, 11, 12)],
                                           oracle=True)
    assert all(r.rc == 100.0 and r.is_ == 1.0 and r.ds == 100.0 for r in report.routes)


def test_closedloop_untrained_policy_fails(tmp_path):
    scenarios = [generate_scenario(s) for s in (20, 21)]
    assert all(any(i.decision != "straight" for i in sc.route.intersections) for sc in scenarios)
    report, episodes = evaluate_closedloop(Policy(tiny_policy_config()), scenarios,
                                           trace_dir=tmp_path)
    assert report.route_completion < 100.0
    d = report.to_dict()
    assert {"DS", "RC", "IS", "rates_per_km"} <= set(d)
    assert set(d["rates_per_km"]) == {"collision_vehicle", "collision_layout", "off_road", "blocked"}
    for ep in episodes:
        lines = (tmp_path / f"trace-{ep.name}.jsonl").read_text().splitlines()
        assert len(lines) == len(ep.trace)


def test_closedloop_parallel_matches_serial():
    scenarios = [generate_scenario(s, obstacles=True) for s in (30, 31, 32)]
    policy = Policy(tiny_policy_config(seed=5))
    a, _ = evaluate_closedloop(policy, scenarios, jobs=1)
    b, _ = evaluate_closedloop(policy, scenarios[::-1], jobs=2)
    assert a.to_dict() == b.to_dict()
