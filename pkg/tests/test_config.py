import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from asinv.config import PRESETS, ConfigError, RasterMedium, ScenarioConfig
from asinv.medium import Medium

EXPLICIT = """
[domain]
bounds = [0.0, 1.0, 0.0, 1.0]

[medium]
[[medium.background]]
value = 1.0
bounds = [0.0, 0.5, 0.0, 1.0]
[[medium.background]]
value = 1.5
bounds = [0.5, 1.0, 0.0, 1.0]
[[medium.inclusions]]
type = "disk"
center = [0.25, 0.5]
radius = 0.1
value = 0.7
[[medium.inclusions]]
type = "polygon"
vertices = [[0.6, 0.2], [0.8, 0.2], [0.7, 0.35]]
value = -0.4
"""


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_presets_roundtrip(name):
    cfg = ScenarioConfig.preset(name)
    again = ScenarioConfig.loads(cfg.dumps())
    assert again == cfg
    assert again.dumps() == cfg.dumps()
    assert again.digest() == cfg.digest()


def test_explicit_medium():
    cfg = ScenarioConfig.loads(EXPLICIT)
    med = cfg.medium()
    assert isinstance(med, Medium) and med.n_inclusions == 2
    v = med.evaluate(np.array([[0.25, 0.5], [0.7, 0.25], [0.9, 0.9]]))
    assert np.allclose(v, [1.7, 1.1, 1.5])
    assert ScenarioConfig.loads(cfg.dumps()) == cfg


def test_defaults_filled():
    cfg = ScenarioConfig.loads("")
    assert cfg.section("weight") == {"form": "power", "q": 2.0, "eps": 1e-8}
    assert cfg.asi().J1 == 100
    assert cfg.asi().max_iter_per_frequency is None


def test_negative_eps_names_field_and_line():
    with pytest.raises(ConfigError) as exc:
        ScenarioConfig.loads("[weight]\nform = 'power'\neps = -1.0\n")
    assert exc.value.field == "weight.eps"
    assert exc.value.line == 3
    assert "weight.eps" in str(exc.value)


def test_key_lookup_respects_section():
    text = "[observations]\nrefine = 1\n\n[mesh]\nnx = 8\nrefine = -1\n"
    with pytest.raises(ConfigError) as exc:
        ScenarioConfig.loads(text)
    assert exc.value.field == "mesh.refine" and exc.value.line == 6


@pytest.mark.parametrize("text,field", [
    ("[foo]\n", "foo"),
    ("[mesh]\nnxx = 3\n", "mesh.nxx"),
    ("[mesh]\nnx = 2.5\n", "mesh.nx"),
    ("[weight]\nform = 'cubic'\n", "weight.form"),
    ("[forward]\nfrequencies = [3.0, 2.0]\n", "forward.frequencies"),
    ("[forward]\nobserve = ['north']\n", "forward.observe"),
    ("[inversion]\nrho0 = 1.5\n", "inversion.rho0"),
    ("[observations]\nnoise = 0.1\n", "scenario.seed"),
    ("[domain]\nbounds = [0.0, 1.0, 1.0, 0.0]\n", "domain.bounds"),
    ("[medium]\npreset = 'nope'\n", "medium.preset"),
    ("[domain]\nbounds = [0.0, 2.0, 0.0, 1.0]\n[medium]\npreset = 'five_inclusion'\n", "domain.bounds"),
    ("[medium]\n[[medium.inclusions]]\ntype = 'disk'\nvalue = 1.0\n", "medium.background"),
    ("[weight\n", "toml"),
])
def test_errors_name_field(text, field):
    with pytest.raises(ConfigError) as exc:
        ScenarioConfig.loads(text)
    assert exc.value.field == field


def test_bad_shape_type():
    text = EXPLICIT.replace('type = "disk"', 'type = "blob"')
    with pytest.raises(ConfigError) as exc:
        ScenarioConfig.loads(text)
    assert exc.value.field == "medium.inclusions[0].type"


def test_seed_override():
    cfg = ScenarioConfig.preset("five_inclusion").with_overrides(scenario={"seed": 7})
    assert cfg.seed == 7


def test_raster_medium(tmp_path):
    grid = np.array([[1.0, 2.0], [3.0, 4.0]])
    path = tmp_path / "r.csv"
    np.savetxt(path, grid, delimiter=",")
    cfg = ScenarioConfig.loads(f"[medium]\nraster = '{path}'\n")
    med = cfg.medium()
    assert isinstance(med, RasterMedium)
    assert np.allclose(med.evaluate(np.array([[0.0, 0.0], [1.0, 1.0], [0.5, 0.5]])), [1, 4, 2.5])
    with pytest.raises(ConfigError):
        ScenarioConfig.loads(f"[medium]\nraster = '{tmp_path / 'missing.csv'}'\n")


def test_unknown_preset():
    with pytest.raises(ConfigError):
        ScenarioConfig.preset("pluto")


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 300), st.integers(1, 300), st.floats(1e-12, 1.0), st.floats(1.0, 8.0),
       st.lists(st.floats(0.1, 50.0), min_size=1, max_size=5, unique=True),
       st.floats(0.0, 0.5), st.integers(0, 2 ** 31 - 1))
def test_roundtrip_property(nx, ny, eps, q, freqs, noise, seed):
    raw = {"scenario": {"seed": seed}, "mesh": {"nx": nx, "ny": ny},
           "weight": {"eps": eps, "q": q}, "forward": {"frequencies": sorted(freqs)},
           "observations": {"noise": noise}}
    cfg = ScenarioConfig.from_dict(raw)
    assert ScenarioConfig.loads(cfg.dumps()) == cfg
