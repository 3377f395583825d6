import pytest
from hypothesis import given

from generators import random_trees, trees
from promptparse.canonicalize import (
    CanonScheme,
    DuplicateSurrogate,
    LabelTable,
    UnknownLabel,
    UnknownSurrogate,
    apply_scheme,
    build_label_table,
    dataset_label_table,
    decanonicalize,
    simplify,
)
from promptparse.meaning_repr import OntologyLabel, ParseError, TokenLeaf, IntentNode, iter_nodes, parse_top, serialize

INVOCAB = CanonScheme("invocab")
OUTOFVOCAB = CanonScheme("outofvocab")
WEATHER_LABELS = {OntologyLabel("IN", "GET_WEATHER"), OntologyLabel("IN", "GET_SUNSET"), OntologyLabel("SL", "LOCATION")}


def _has_intent_tokens(tree):
    return any(
        isinstance(n, IntentNode) and any(isinstance(c, TokenLeaf) for c in n.children)
        for n in iter_nodes(tree)
    )


def test_simplify_drops_intent_level_tokens():
    tree = parse_top("[IN:GET_WEATHER whats the weather [SL:LOCATION boston ] ]")
    assert serialize(simplify(tree)) == "[IN:GET_WEATHER [SL:LOCATION boston ] ]"


def test_simplify_fixed_point():
    tree = parse_top("[IN:GET_WEATHER [SL:LOCATION boston ] ]")
    assert simplify(tree) == tree


def test_simplify_nested_intent():
    tree = parse_top("[IN:A x [SL:B y [IN:C z ] ] ]")
    assert serialize(simplify(tree)) == "[IN:A [SL:B y [IN:C ] ] ]"


@given(trees)
def test_simplify_idempotent(tree):
    once = simplify(tree)
    assert simplify(once) == once
    assert not _has_intent_tokens(once)


def test_invocab_table_is_lexicographic():
    table = build_label_table(WEATHER_LABELS, INVOCAB)
    assert table.entries == [("IN:GET_SUNSET", "in0"), ("IN:GET_WEATHER", "in1"), ("SL:LOCATION", "sl0")]
    assert table.atomic_tokens == []


def test_outofvocab_identity_surface():
    table = build_label_table({OntologyLabel("IN", "GET_WEATHER")}, OUTOFVOCAB)
    assert table.surrogate("IN:GET_WEATHER") == "IN:GET_WEATHER"
    assert table.atomic_tokens == ["IN:GET_WEATHER"]


def test_shortened_labels():
    table = build_label_table(WEATHER_LABELS, CanonScheme("outofvocab", shorten_labels=True))
    assert table.surrogate("SL:LOCATION") == "location"
    assert table.surrogate("IN:GET_SUNSET") == "get_sunset"


def test_shortening_collision_is_reported():
    with pytest.raises(DuplicateSurrogate):
        build_label_table({OntologyLabel("IN", "A"), OntologyLabel("SL", "A")}, CanonScheme("outofvocab", shorten_labels=True))


def test_table_needs_labels_and_a_label_variant():
    with pytest.raises(ValueError):
        build_label_table(set(), INVOCAB)
    with pytest.raises(ValueError):
        build_label_table(WEATHER_LABELS, CanonScheme("simplify"))


def test_table_deterministic_under_input_order():
    labels = sorted(WEATHER_LABELS)
    assert build_label_table(labels, INVOCAB) == build_label_table(list(reversed(labels)), INVOCAB)


def test_apply_none_is_serialize():
    tree = parse_top("[IN:GET_WEATHER whats the weather [SL:LOCATION boston ] ]")
    assert apply_scheme(tree, CanonScheme()) == serialize(tree)
    assert apply_scheme(tree, CanonScheme("simplify")) == "[IN:GET_WEATHER [SL:LOCATION boston ] ]"


def test_apply_invocab_weather():
    table = build_label_table(WEATHER_LABELS, INVOCAB)
    tree = parse_top("[IN:GET_WEATHER [SL:LOCATION boston ] ]")
    assert apply_scheme(tree, INVOCAB, table) == "[in1 [sl0 boston ] ]"


def test_apply_unknown_label():
    table = build_label_table(WEATHER_LABELS, INVOCAB)
    with pytest.raises(UnknownLabel):
        apply_scheme(parse_top("[IN:PLAY_MUSIC x ]"), INVOCAB, table)


def test_composition_simplifies_first():
    scheme = CanonScheme("invocab", with_simplify=True)
    table = build_label_table(WEATHER_LABELS, scheme)
    tree = parse_top("[IN:GET_WEATHER whats the weather in [SL:LOCATION boston ] ]")
    assert apply_scheme(tree, scheme, table) == "[in1 [sl0 boston ] ]"
    assert decanonicalize("[in1 [sl0 boston ] ]", scheme, table) == simplify(tree)


def test_decanonicalize_weather():
    table = build_label_table(WEATHER_LABELS, INVOCAB)
    tree = decanonicalize("[in1 [sl0 boston ] ]", INVOCAB, table)
    assert serialize(tree) == "[IN:GET_WEATHER [SL:LOCATION boston ] ]"


def test_decanonicalize_unknown_surrogate():
    table = LabelTable("invocab", [("IN:A", "in0"), ("SL:B", "sl0")])
    with pytest.raises(UnknownSurrogate):
        decanonicalize("[in9 x ]", INVOCAB, table)


def test_decanonicalize_propagates_parse_errors():
    table = build_label_table(WEATHER_LABELS, INVOCAB)
    with pytest.raises(ParseError):
        decanonicalize("[in1 [sl0 boston ]", INVOCAB, table)


def test_decanonicalize_spaced_atomic_brackets():
    # word-level decoding of an atomic label token yields "[ IN:X"
    table = build_label_table(WEATHER_LABELS, OUTOFVOCAB)
    tree = decanonicalize("[ IN:GET_WEATHER [ SL:LOCATION boston ] ]", OUTOFVOCAB, table)
    assert serialize(tree) == "[IN:GET_WEATHER [SL:LOCATION boston ] ]"


@pytest.mark.parametrize("variant", ["outofvocab", "invocab"])
def test_round_trip_random_trees(variant):
    scheme = CanonScheme(variant)
    sample = random_trees(1000, seed=11, intent_tokens=False)
    table = dataset_label_table(sample, scheme)
    for tree in sample:
        assert decanonicalize(apply_scheme(tree, scheme, table), scheme, table) == tree


@pytest.mark.parametrize("variant", ["outofvocab", "invocab"])
def test_round_trip_with_simplify(variant):
    scheme = CanonScheme(variant, with_simplify=True)
    sample = random_trees(300, seed=12)
    table = dataset_label_table(sample, scheme)
    for tree in sample:
        assert decanonicalize(apply_scheme(tree, scheme, table), scheme, table) == simplify(tree)


@given(trees)
def test_round_trip_property(tree):
    for variant in ("outofvocab", "invocab"):
        scheme = CanonScheme(variant)
        table = dataset_label_table([tree], scheme)
        assert decanonicalize(apply_scheme(tree, scheme, table), scheme, table) == tree


def test_label_table_tsv_round_trip(tmp_path):
    table = build_label_table(WEATHER_LABELS, INVOCAB)
    path = tmp_path / "table.tsv"
    table.save(path)
    assert path.read_bytes() == b"IN:GET_SUNSET\tin0\nIN:GET_WEATHER\tin1\nSL:LOCATION\tsl0\n"
    assert LabelTable.load(path, "invocab") == table


def test_scheme_names_round_trip():
    for name in ["none", "simplify", "invocab", "outofvocab+short", "invocab+simplify+short"]:
        assert CanonScheme.from_name(name).name == name
    with pytest.raises(ValueError):
        CanonScheme.from_name("invocab+bogus")
    with pytest.raises(ValueError):
        CanonScheme("sorted")
