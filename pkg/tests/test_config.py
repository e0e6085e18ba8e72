import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from levyspde.config import ExperimentConfig, build_field, resolve
from levyspde.exceptions import ConfigError
from levyspde.field import Field, TorusGrid, write_field_csv

FULL = """
version: 1
grid: {d: 1, L: 6.283185307179586, M: 16}
time: {T: 1.0, steps: 8, theta: 1.0}
noise:
  channels:
    - {type: atoms, atoms: [[1.5, 2.0], [-0.5, 2.0]], beta: 0.3, drift: 0.1}
    - {type: density, rate: 3.0, distribution: normal, params: {scale: 0.2}}
    - {type: stable, alpha: 1.5, scale: 1.0, lower: 0.1, upper: .inf}
  N0: 0
coefficients:
  a: [[{field: {type: modes, modes: [{k: [1], amplitude: 1.0}]}, scale: 0.3, shift: 1.5}]]
  sigma: [[0.2, 0.1, 0.0]]
  mu: [0.1, {noise_adapted: clipped-noise-level, params: {base: 0.0, scale: 0.1}}, 0.0]
data:
  u0: {type: modes, modes: [{k: 1, kind: sin}]}
  f: 0.5
  g: [{type: constant, value: 1.0}, null, {type: zero}]
run: {replicas: 3, seed: 42}
"""


def test_round_trip_is_identity():
    cfg = ExperimentConfig.from_text(FULL)
    again = ExperimentConfig.from_text(cfg.dump())
    assert again.resolved == cfg.resolved
    assert again.sha256 == cfg.sha256


def test_manifest_is_accepted_as_config():
    cfg = ExperimentConfig.from_text(FULL)
    manifest = {"config": cfg.json_ready(), "config_sha256": cfg.sha256}
    assert ExperimentConfig.from_text(json.dumps(manifest)).resolved == cfg.resolved


def test_hash_tracks_content():
    a = ExperimentConfig.from_text(FULL)
    assert a.with_overrides(seed=43).sha256 != a.sha256
    assert a.with_overrides(seed=None).sha256 == a.sha256


def test_builders():
    cfg = ExperimentConfig.from_text(FULL)
    grid = cfg.grid()
    noise, drifts = cfg.noise()
    assert len(noise) == 3
    # raw drift 0.1 plus the large atom 1.5 * 2.0
    assert drifts[0] == pytest.approx(3.1)
    coeffs = cfg.coefficients(grid)
    assert coeffs.path_dependent
    u0, f, g = cfg.data(grid)
    np.testing.assert_allclose(f.values, 0.5 + 3.1 * 1.0)
    assert g[1] is None and not np.any(g[2].values)


def test_defaults_fill_heat_equation():
    cfg = ExperimentConfig.from_text("noise: {channels: [{type: atoms, atoms: [[0.5, 1.0]], beta: 1.0}]}")
    coeffs = cfg.coefficients(cfg.grid())
    ev = coeffs.evaluate(cfg.grid())
    assert np.all(ev.a == 1) and not np.any(ev.sigma)


@pytest.mark.parametrize("text, where", [
    ("grid: {d: 4}", "grid"),
    ("grid: {M: 12}", "grid"),
    ("time: {T: -1}", "time.T"),
    ("time: {theta: 2}", "time.theta"),
    ("noise: {channels: [{type: cauchy}]}", "noise.channels[0].type"),
    ("noise: {channels: [{type: atoms, atoms: [[0, 1.0]]}]}", "noise.channels[0].atoms[0][0]"),
    ("noise: {channels: [{type: atoms, atoms: [[1, -1.0]]}]}", "noise.channels[0].atoms[0][1]"),
    ("noise: {channels: [{type: atoms, beta: -1}]}", "noise.channels[0].beta"),
    ("noise: {channels: [{type: atoms}]}\ncoefficients: {sigma: [[0.1, 0.2]]}", "coefficients.sigma[0]"),
    ("noise: {channels: [{type: atoms}]}\ndata: {g: []}", "data.g"),
    ("coefficients: {c: {noise_adapted: nope}}", "coefficients.c.noise_adapted"),
    ("coefficients: {e: 1}", "coefficients"),
    ("data: {u0: {type: modes, modes: [{k: 1, kind: tan}]}}", "data.u0.modes[0].kind"),
    ("run: {mode: explicit}", "run.mode"),
    ("run: {seed: -1}", "run.seed"),
    ("bogus: 1", "config"),
    ("version: 2", "version"),
    ("noise: {channels: [{type: atoms}], N0: 2}", "noise.N0"),
])
def test_validation_names_the_field(text, where):
    with pytest.raises(ConfigError) as err:
        ExperimentConfig.from_text(text)
    assert str(err.value).startswith(where)


def test_invalid_yaml():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_text("grid: [")


def test_k_noise_truncates_channel_list():
    text = "noise: {channels: [{type: atoms, beta: 1.0}, {type: atoms, beta: 2.0}], K_noise: 1}"
    cfg = ExperimentConfig.from_text(text)
    assert len(cfg.noise()[0]) == 1


def test_field_file_reference(tmp_path):
    grid = TorusGrid(1, 2 * math.pi, 16)
    f = Field.mode(grid, [2])
    with open(tmp_path / "prof.csv", "w") as fh:
        write_field_csv(f, fh)
    (tmp_path / "run.yaml").write_text("grid: {M: 16}\ndata: {u0: {type: file, path: prof.csv}}\n")
    cfg = ExperimentConfig.from_file(tmp_path / "run.yaml")
    np.testing.assert_array_equal(cfg.data(grid)[0].values, f.values)
    other = TorusGrid(1, 2 * math.pi, 32)
    with pytest.raises(ConfigError):
        build_field({"type": "file", "path": "prof.csv", "format": "csv"}, other, tmp_path)


@given(st.integers(1, 3), st.sampled_from([4, 8, 16]), st.floats(0.1, 10.0), st.integers(1, 64),
       st.integers(0, 2 ** 63))
def test_round_trip_property(d, M, T, steps, seed):
    raw = {"grid": {"d": d, "M": M}, "time": {"T": T, "steps": steps}, "run": {"seed": seed}}
    cfg = ExperimentConfig.from_dict(raw)
    assert resolve(ExperimentConfig.from_text(cfg.dump()).resolved) == cfg.resolved
