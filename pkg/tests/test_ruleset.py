from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import SMALL_SPEC
from mctengine.generate import SchemaSpec, gen_rules, example_rules
from mctengine.model import Kind
from mctengine.ruleset import (
    RuleSetParseError,
    atomic_write,
    format_ruleset,
    load_ruleset,
    parse_decl,
    parse_ruleset,
    save_ruleset,
)
from mctengine.transforms import to_v2

HEADER = "station:exact-match:16:CDG,ZRH:station:nowild|flight:pair-range:20:1..9999"


def test_parse_minimal():
    schema, rules = parse_ruleset(f"# comment\n{HEADER}\n0|ZRH|700..1000|45|High\n3/1@17|CDG|*|30\n")
    assert schema.version == "v1" and schema.names == ["station", "flight"]
    assert not schema["station"].wildcard_allowed
    assert rules[0].precision_tag == "High" and rules[0].values[1].lo == 700
    assert (rules[1].id, rules[1].fragment, rules[1].pinned_weight) == (3, 1, 17)


def test_parse_decl_kinds():
    d = parse_decl("validity:pair-range:12:0..364:travel_day")
    assert d.kind is Kind.PAIR and d.field == "travel_day" and d.domain.hi == 364
    assert parse_decl("x:exact-match:3:1,2,3").domain == (1, 2, 3)


@pytest.mark.parametrize("text,line", [
    (f"{HEADER}\n0|ZRH|700..1000\n", 2),                         # missing decision
    (f"{HEADER}\n0|ZRH|700..1000|45\n1|LHR|*|5\n", 3),           # symbol outside domain
    (f"{HEADER}\n\n# c\n0|*|700..800|45\n", 4),                  # wildcard on nowild
    (f"{HEADER}\nx|ZRH|*|45\n", 2),                              # bad id
    (f"{HEADER}\n0|ZRH|900..800|45\n", 2),                       # inverted range
    (f"{HEADER}\n0|ZRH|*|45|Extreme\n", 2),                      # unknown tag
    ("station:weird:1\n", 1),                                     # unknown kind
    (f"{HEADER}\n#! version=v1\n", 2),                           # pragma after header
    (f"#! colour=blue\n{HEADER}\n", 2),                          # unknown pragma
])
def test_parse_errors_carry_line_numbers(text, line):
    with pytest.raises(RuleSetParseError) as exc:
        parse_ruleset(text)
    assert exc.value.line == line
    assert str(exc.value).startswith(f"line {line}:")


def test_missing_header():
    with pytest.raises(RuleSetParseError):
        parse_ruleset("# nothing\n")


def test_example_roundtrip_keeps_fragments():
    schema, rules = example_rules()
    text = format_ruleset(schema, rules)
    assert parse_ruleset(text) == (schema, rules)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 100_000), st.integers(1, 60), st.booleans())
def test_generated_rulesets_roundtrip(seed, n, v2):
    schema, rules = gen_rules(seed, n, SMALL_SPEC)
    if v2:
        rules, schema = to_v2(rules, schema)
    text = format_ruleset(schema, rules)
    assert parse_ruleset(text) == (schema, rules)
    assert format_ruleset(*parse_ruleset(text)) == text


def test_default_schema_roundtrip_includes_pragmas():
    schema, rules = gen_rules(3, 20, SchemaSpec())
    text = format_ruleset(schema, rules)
    assert "#! cross-carrier=" in text and "#! cross-flight=" in text
    assert parse_ruleset(text) == (schema, rules)


def test_save_and_load(tmp_path):
    schema, rules = example_rules()
    p = tmp_path / "rules.txt"
    save_ruleset(p, schema, rules)
    assert load_ruleset(p) == (schema, rules)
    assert [f.name for f in tmp_path.iterdir()] == ["rules.txt"]


def test_atomic_write_leaves_old_file_on_failure(tmp_path):
    p = tmp_path / "out.txt"
    atomic_write(p, "old")
    with pytest.raises(TypeError):
        atomic_write(p, 12345)
    assert p.read_text() == "old"
    assert [f.name for f in tmp_path.iterdir()] == ["out.txt"]
