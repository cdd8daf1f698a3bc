import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from minilake.env import (PINNED, TRANSITIVE, PackageRegistry, VersionRange, check_conflicts,
                          check_whitelist, compare_versions, parse_requirement, resolve_env,
                          version_key)
from minilake.errors import UnknownPackage, UnknownVersion, Unsatisfiable
from minilake.fixtures import fixture_path
from minilake.pipeline import EnvSpec


@pytest.fixture
def numpy2():
    return PackageRegistry.load(fixture_path("registry_numpy2.json"))


@pytest.fixture
def ok():
    return PackageRegistry.load(fixture_path("registry_ok.json"))


@pytest.mark.parametrize("a, b, sign", [
    ("1.10", "1.9", 1), ("2.0", "2.0.0", 0), ("1.26.4", "2.0.0", -1), ("0.1", "0.01", 0),
])
def test_version_comparison(a, b, sign):
    assert compare_versions(a, b) == sign
    assert (version_key(a) > version_key(b)) - (version_key(a) < version_key(b)) == sign


def test_ranges():
    r = VersionRange.parse(">=1.23.2,<2")
    assert r.contains("1.26.4") and not r.contains("2.0.0") and not r.contains("1.23.1")
    assert VersionRange.exact("2.0").contains("2.0.0")
    assert str(r) == ">=1.23.2,<2"
    with pytest.raises(ValueError):
        VersionRange.parse("~=1.0")
    assert parse_requirement("numpy@>=2.0.0") == ("numpy", VersionRange.parse(">=2.0.0"))
    assert parse_requirement("pandas@2.0") == ("pandas", VersionRange.exact("2.0"))


def test_transitive_takes_latest(numpy2):
    env = resolve_env(EnvSpec("3.10", {"pandas": "2.0"}), numpy2)
    assert env.installed == {"pandas": "2.0", "numpy": "2.0.0"}
    assert env.provenance == {"pandas": PINNED, "numpy": TRANSITIVE}


def test_pin_overrides_latest(numpy2):
    env = resolve_env(EnvSpec("3.10", {"pandas": "2.0", "numpy": "1.26.4"}), numpy2)
    assert env.installed["numpy"] == "1.26.4" and env.provenance["numpy"] == PINNED


def test_transitive_never_exceeds_latest(ok):
    env = resolve_env(EnvSpec("3.10", {"pandas": "2.0"}), ok)
    assert env.installed["numpy"] == "1.26.4"


def test_unknown_pins(numpy2):
    with pytest.raises(UnknownVersion):
        resolve_env(EnvSpec("3.10", {"pandas": "9.9"}), numpy2)
    with pytest.raises(UnknownPackage):
        resolve_env(EnvSpec("3.10", {"nope": "1.0"}), numpy2)


def test_pin_conflicting_with_dependency_is_unsatisfiable(numpy2):
    with pytest.raises(Unsatisfiable):
        resolve_env(EnvSpec("3.10", {"pandas": "2.2.2", "numpy": "1.24.4"}), numpy2)


def test_whitelist():
    wl = {"pandas", "numpy"}
    assert check_whitelist(EnvSpec("3.10", {"pandas": "2.0"}), wl) is None
    v = check_whitelist(EnvSpec("3.10", {"leftpad": "1.0.0"}), wl)
    assert v and v.packages == ("leftpad",)
    assert check_whitelist(EnvSpec("3.10"), wl) is None


def test_conflict_rules(numpy2):
    bad = resolve_env(EnvSpec("3.10", {"pandas": "2.0"}), numpy2)
    rule = check_conflicts(bad, numpy2)
    assert rule is not None and rule.message.startswith("numpy.dtype size changed")
    fixed = resolve_env(EnvSpec("3.10", {"pandas": "2.0", "numpy": "1.26.4"}), numpy2)
    assert check_conflicts(fixed, numpy2) is None
    old = resolve_env(EnvSpec("3.11", {"pandas": "1.5.3", "numpy": "2.0.0"}), numpy2)
    assert check_conflicts(old, numpy2) is None


def test_info(numpy2):
    info = numpy2.info("numpy")
    assert info["latest"] == "2.0.0"
    assert info["conflicts"][0]["b"] == "numpy@>=2.0.0"
    assert "pandas@2.0" in numpy2.info("pandas")["dependencies"]
    with pytest.raises(UnknownPackage):
        numpy2.info("nope")


def test_registry_json_round_trip(numpy2):
    again = PackageRegistry.from_json(numpy2.to_json())
    assert again.to_json() == numpy2.to_json()


versions = st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=5,
                    unique=True).map(lambda vs: [f"{a}.{b}" for a, b in sorted(vs)])


@settings(max_examples=100, deadline=None)
@given(versions, versions, st.integers(0, 4), st.data())
def test_resolution_satisfies_every_dependency(app_versions, lib_versions, cut, data):
    lib_latest = data.draw(st.sampled_from(lib_versions))
    lo = lib_versions[min(cut, len(lib_versions) - 1)]
    reg = PackageRegistry.from_json({
        "packages": {"app": {"versions": app_versions, "latest": app_versions[-1]},
                     "lib": {"versions": lib_versions, "latest": lib_latest}},
        "dependencies": {f"app@{v}": [{"pkg": "lib", "range": f">={lo}"}] for v in app_versions},
        "conflicts": [],
    })
    pin = data.draw(st.sampled_from(app_versions))
    try:
        env = resolve_env(EnvSpec("3.10", {"app": pin}), reg)
    except Unsatisfiable:
        assert not any(VersionRange.parse(f">={lo}").contains(v)
                       and compare_versions(v, lib_latest) <= 0 for v in lib_versions)
        return
    got = env.installed["lib"]
    assert VersionRange.parse(f">={lo}").contains(got)
    assert compare_versions(got, lib_latest) <= 0
    # greatest such version
    assert all(compare_versions(v, got) <= 0 for v in lib_versions
               if compare_versions(v, lo) >= 0 and compare_versions(v, lib_latest) <= 0)
    assert env == resolve_env(EnvSpec("3.10", {"app": pin}), reg)
