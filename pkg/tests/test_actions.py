import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfagent.actions import (
    ActionSyntaxError,
    ArtifactRef,
    Call,
    DuplicateArg,
    Final,
    UnknownEscape,
    parse_action,
    render_action,
    validate_against_schema,
)
from cfagent.toolwire import ArgSpec, ToolSchema
from oracles import derivation_count, gen_actions, schema_walk


class TestParse:
    def test_grammar_exemplar(self):
        action = parse_action('classify(image=@ab12, target="lesion")')
        assert action == Call(tool="classify",
                              args={"image": ArtifactRef("ab12"), "target": "lesion"})

    def test_final_variant(self):
        action = parse_action('final_answer(text="No finding")')
        assert action == Final(answer="No finding")

    def test_whitespace_insignificant(self):
        a = parse_action(' classify ( image = @ab12 , flag = true ) ')
        b = parse_action('classify(image=@ab12,flag=true)')
        assert a == b

    def test_values(self):
        action = parse_action('t(a=1, b=-2, c=0.5, d=-0.25, e=false, f=[1, [2.5, @ff], "x"])')
        assert action.args == {
            "a": 1, "b": -2, "c": 0.5, "d": -0.25, "e": False,
            "f": [1, [2.5, ArtifactRef("ff")], "x"],
        }

    def test_escapes(self):
        action = parse_action('t(s="a\\"b\\\\c\\nd")')
        assert action.args["s"] == 'a"b\\c\nd'

    def test_duplicate_arg(self):
        with pytest.raises(DuplicateArg):
            parse_action("t(a=1, a=2)")

    def test_unknown_escape(self):
        with pytest.raises(UnknownEscape):
            parse_action('t(s="a\\tb")')

    def test_final_requires_text(self):
        with pytest.raises(ActionSyntaxError):
            parse_action("final_answer(artifacts=[@ab])")

    def test_final_rejects_stray_args(self):
        with pytest.raises(ActionSyntaxError):
            parse_action('final_answer(text="x", foo=1)')


MALFORMED = [
    # (input, expected error position)
    ("", 0),
    ("1(", 0),
    ("foo", 3),
    ("foo(", 4),
    ("foo(bar", 7),
    ("foo(bar=)", 8),
    ("foo(bar=1,)", 10),
    ("foo(bar=1) x", 11),
    ("foo(bar=@)", 9),
    ("foo(bar=@XY)", 9),
    ("foo(bar=1.)", 10),
    ("foo(bar=1e5)", 9),
    ("foo(bar=--1)", 9),
    ("foo(bar=[1,])", 11),
    ("foo(bar=[)", 9),
    ('foo(bar="abc)', 13),
    ("foo(bar=tru)", 8),
    ("Foo(bar=1)", 0),
    ("foo(Bar=1)", 4),
    ("foo(bar=1", 9),
]


class TestErrorLocality:
    @pytest.mark.parametrize("text,position", MALFORMED)
    def test_position_points_at_first_offending_byte(self, text, position):
        with pytest.raises(ActionSyntaxError) as exc_info:
            parse_action(text)
        assert exc_info.value.position == position, (
            f"{text!r}: expected position {position}, got {exc_info.value.position} "
            f"(expected {exc_info.value.expected!r})"
        )


_value = st.deferred(
    lambda: st.one_of(
        st.integers(min_value=-10**6, max_value=10**6),
        st.floats(min_value=-100, max_value=100, allow_nan=False, allow_infinity=False),
        st.booleans(),
        st.text(alphabet=st.characters(blacklist_categories=("Cs",)), max_size=12),
        st.builds(ArtifactRef, st.text(alphabet="0123456789abcdef", min_size=1, max_size=8)),
        st.lists(_value, max_size=3),
    )
)
_ident = st.from_regex(r"[a-z_][a-z0-9_]{0,8}", fullmatch=True)
_call = st.builds(
    Call,
    tool=_ident.filter(lambda s: s != "final_answer"),
    args=st.dictionaries(_ident, _value, max_size=4),
)
_final = st.builds(
    Final,
    answer=st.text(max_size=20),
    artifacts=st.tuples() | st.tuples(st.builds(ArtifactRef, st.just("ab12"))),
)


class TestRoundTrip:
    def test_canonical_ordering(self):
        action = Call(tool="edit", args={"strength": 0.7, "image": ArtifactRef("ab12")})
        assert render_action(action) == "edit(image=@ab12, strength=0.7)"

    def test_final_omits_empty_artifacts(self):
        assert render_action(Final(answer="done")) == 'final_answer(text="done")'
        assert render_action(Final(answer="d", artifacts=(ArtifactRef("ab"),))) == (
            'final_answer(artifacts=[@ab], text="d")'
        )

    @settings(max_examples=500, deadline=None)
    @given(st.one_of(_call, _final))
    def test_parse_render_identity(self, action):
        assert parse_action(render_action(action)) == action

    def test_determinism_same_input_same_output(self):
        text = 'edit(image=@ab12, strength=0.7, steps=[1, 2, 3])'
        assert parse_action(text) == parse_action(text)
        assert render_action(parse_action(text)) == render_action(parse_action(text))


class TestExhaustiveGrammar:
    """Every token sequence derivable from the grammar up to length 12 has
    exactly one derivation (unambiguity, by the independent combinator) and
    parses/round-trips through the real parser."""

    def test_exhaustive_to_token_length_12(self):
        sequences = gen_actions(12)
        assert len(sequences) > 500  # the derivable space to length 12
        seen = set()
        for tokens in sequences:
            assert len(tokens) <= 12
            text = " ".join(tokens)
            assert text not in seen, f"generator produced {text!r} twice: ambiguous grammar"
            seen.add(text)
            assert derivation_count(tokens) == 1, f"{text!r} has multiple derivations"
            arg_names = [t for t in tokens if t in ("a", "b")][1:]
            if len(arg_names) != len(set(arg_names)):
                with pytest.raises(DuplicateArg):
                    parse_action(text)
                continue
            action = parse_action(text)
            assert parse_action(render_action(action)) == action

    def test_near_misses_rejected_consistently(self):
        # single-token deletions of valid strings must fail in the parser
        # exactly when the combinator count is 0
        for tokens in gen_actions(8):
            for drop in range(len(tokens)):
                mutated = tokens[:drop] + tokens[drop + 1 :]
                count = derivation_count(mutated)
                text = " ".join(mutated)
                if count == 0:
                    with pytest.raises((ActionSyntaxError, DuplicateArg)):
                        parse_action(text)
                else:
                    arg_names = [t for t in mutated if t in ("a", "b")][1:]
                    if len(arg_names) == len(set(arg_names)):
                        parse_action(text)


class TestSchemaValidation:
    schema = ToolSchema(args={
        "image": ArgSpec("artifact"),
        "target": ArgSpec("string", required=False),
        "strength": ArgSpec("real", required=False),
    })

    def test_missing_required(self):
        violations = validate_against_schema(Call("classify", {"target": "x"}), self.schema)
        assert violations == ["missing required arg image"]

    def test_unknown_arg_rejected(self):
        violations = validate_against_schema(
            Call("classify", {"image": ArtifactRef("ab"), "foo": 1}), self.schema)
        assert violations == ["unknown arg foo"]

    def test_int_promotes_to_real(self):
        call = Call("classify", {"image": ArtifactRef("ab"), "strength": 1})
        assert validate_against_schema(call, self.schema) == []

    def test_fuzz_against_schema_walk(self):
        import random

        rng = random.Random(42)
        values = [1, 1.5, True, "s", ArtifactRef("ab"), [1, 2]]
        names = ["image", "target", "strength", "foo", "bar"]
        walk_schema = {"image": ("artifact", True), "target": ("string", False),
                       "strength": ("real", False)}
        for _ in range(1000):
            args = {name: rng.choice(values)
                    for name in rng.sample(names, k=rng.randint(0, len(names)))}
            mine = validate_against_schema(Call("classify", dict(args)), self.schema)
            theirs = schema_walk(args, walk_schema)
            # compare verdicts and the set of offending arg names per category
            def normalize(violations):
                out = set()
                for v in violations:
                    if v.startswith("missing required arg "):
                        out.add("missing:" + v.rsplit(" ", 1)[1])
                    elif v.startswith("unknown arg "):
                        out.add("unknown:" + v.rsplit(" ", 1)[1])
                    else:
                        out.add("type:" + v.split(" ", 2)[1].rstrip(":"))
                return out

            assert normalize(mine) == set(theirs), (args, mine, theirs)
