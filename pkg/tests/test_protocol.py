import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from segforge import protocol
from segforge.actions import AddBox, AddPoint, Stop

GOLDEN = Path(__file__).parent / "golden"


# --- prompt rendering ---------------------------------------------------------


def test_system_prompt_matches_golden_bytes():
    want = (GOLDEN / "system_prompt.txt").read_bytes()
    assert protocol.render_system_prompt().encode("utf-8") == want


def test_initial_turn_matches_golden_bytes():
    want = (GOLDEN / "initial_turn.txt").read_bytes()
    assert protocol.render_initial_turn("the left kidney").encode("utf-8") == want


def test_followup_turn_matches_golden_bytes():
    want = (GOLDEN / "followup_turn.txt").read_bytes()
    assert protocol.render_followup_turn().encode("utf-8") == want


def test_tools_json_is_valid_and_complete():
    tools = json.loads(protocol.tools_json())
    names = [t["function"]["name"] for t in tools]
    assert names == ["add_bbox", "add_point", "stop_action"]
    point = tools[1]["function"]["parameters"]
    assert point["required"] == ["point_2d", "point_type"]
    assert point["properties"]["point_type"]["enum"] == ["positive", "negative"]


# --- serialization and parsing ---------------------------------------------------


def test_serialize_exact_format():
    s = protocol.serialize_tool_call(AddPoint(12, 34, "positive"))
    assert s == (
        '<tool_call>\n'
        '{"name": "add_point", "arguments": {"point_2d": [12, 34], "point_type": "positive"}}\n'
        '</tool_call>'
    )
    assert protocol.serialize_tool_call(Stop()) == (
        '<tool_call>\n{"name": "stop_action", "arguments": {}}\n</tool_call>'
    )
    assert protocol.serialize_tool_call(AddBox(1, 2, 3, 4)) == (
        '<tool_call>\n{"name": "add_bbox", "arguments": {"bbox_2d": [1, 2, 3, 4]}}\n</tool_call>'
    )


actions_strategy = st.one_of(
    st.builds(
        AddBox,
        st.integers(0, 1000),
        st.integers(0, 1000),
        st.integers(0, 1000),
        st.integers(0, 1000),
    ),
    st.builds(
        AddPoint,
        st.integers(0, 1000),
        st.integers(0, 1000),
        st.sampled_from(["positive", "negative"]),
    ),
    st.just(Stop()),
)


@given(actions_strategy)
def test_parse_serialize_round_trip(action):
    assert protocol.parse_tool_call(protocol.serialize_tool_call(action)) == action


def test_parse_tolerates_surrounding_chatter_and_key_order():
    reply = (
        "Let me think about this.\n<tool_call>\n"
        '{"arguments": {"point_type": "negative", "point_2d": [5, 6]}, "name": "add_point"}'
        "\n</tool_call>\nDone."
    )
    assert protocol.parse_tool_call(reply) == AddPoint(5, 6, "negative")


@pytest.mark.parametrize(
    "reply, err",
    [
        ("no call at all", protocol.NoToolCallError),
        (
            protocol.serialize_tool_call(Stop()) * 2,
            protocol.MultipleToolCallsError,
        ),
        ("<tool_call>\nnot json\n</tool_call>", protocol.MalformedToolCallError),
        ("<tool_call>\n[1, 2]\n</tool_call>", protocol.MalformedToolCallError),
        (
            '<tool_call>\n{"name": "fly_away", "arguments": {}}\n</tool_call>',
            protocol.UnknownToolError,
        ),
        (
            '<tool_call>\n{"name": "add_point", "arguments": {"point_2d": [1], "point_type": "positive"}}\n</tool_call>',
            protocol.BadArgumentsError,
        ),
        (
            '<tool_call>\n{"name": "add_point", "arguments": {"point_2d": [1.5, 2], "point_type": "positive"}}\n</tool_call>',
            protocol.BadArgumentsError,
        ),
        (
            '<tool_call>\n{"name": "add_point", "arguments": {"point_2d": [1, 2], "point_type": "maybe"}}\n</tool_call>',
            protocol.BadArgumentsError,
        ),
        (
            '<tool_call>\n{"name": "add_bbox", "arguments": {"bbox_2d": [0, 0, 3, -1]}}\n</tool_call>',
            protocol.CoordinateRangeError,
        ),
    ],
)
def test_parse_error_taxonomy(reply, err):
    with pytest.raises(err):
        protocol.parse_tool_call(reply)
    # Every specific error is also a ToolCallError.
    with pytest.raises(protocol.ToolCallError):
        protocol.parse_tool_call(reply)


def test_parse_coord_max_enforced():
    reply = '<tool_call>\n{"name": "add_point", "arguments": {"point_2d": [1001, 0], "point_type": "positive"}}\n</tool_call>'
    assert protocol.parse_tool_call(reply) == AddPoint(1001, 0, "positive")
    with pytest.raises(protocol.CoordinateRangeError):
        protocol.parse_tool_call(reply, coord_max=1000)


# --- coordinate normalization -----------------------------------------------------


def test_normalize_endpoints():
    assert protocol.normalize_coord(0, 512) == 0
    assert protocol.normalize_coord(511, 512) == 1000
    assert protocol.denormalize_coord(0, 512) == 0
    assert protocol.denormalize_coord(1000, 512) == 511
    assert protocol.normalize_coord(0, 1) == 0
    assert protocol.denormalize_coord(500, 1) == 0


@given(st.integers(2, 1001), st.data())
def test_round_trip_exact_small_extents(extent, data):
    p = data.draw(st.integers(0, extent - 1))
    assert protocol.denormalize_coord(protocol.normalize_coord(p, extent), extent) == p


def test_round_trip_error_bounded_at_1024():
    worst = max(
        abs(protocol.denormalize_coord(protocol.normalize_coord(p, 1024), 1024) - p)
        for p in range(1024)
    )
    assert worst <= 1


def test_normalize_action_and_back():
    a = AddBox(10, 20, 200, 250)
    n = protocol.normalize_action(a, 256, 256)
    assert n == AddBox(39, 78, 784, 980)
    assert protocol.denormalize_action(n, 256, 256) == a
    assert protocol.normalize_action(Stop(), 10, 10) == Stop()


# --- episode state machine ---------------------------------------------------------


class FakeSession:
    def __init__(self, shape=(16, 16), fail=False):
        self.shape = shape
        self.fail = fail
        self.applied = []

    def apply(self, action):
        if self.fail:
            raise RuntimeError("backend down")
        self.applied.append(action)
        return np.zeros(self.shape, dtype=bool)


def make_state(max_turns=5, coord_mode=protocol.COORD_MODE_PIXEL):
    cfg = protocol.EpisodeConfig(
        width=16, height=16, target="t", max_turns=max_turns, coord_mode=coord_mode
    )
    return protocol.EpisodeState(config=cfg)


def wire(action):
    return protocol.serialize_tool_call(action)


def test_episode_stop_terminates_without_consuming_turn():
    state = make_state()
    session = FakeSession()
    protocol.episode_step(state, wire(AddPoint(3, 3, "positive")), session)
    protocol.episode_step(state, wire(Stop()), session)
    assert state.done and state.termination == protocol.TERM_STOPPED
    assert state.turns_used == 1
    assert protocol.tool_action_count(state) == 1
    # Stop inherits the previous observation.
    assert state.history[-1].observation is None
    assert state.current_observation is not None


def test_episode_budget_allows_stop_after_last_turn():
    state = make_state(max_turns=2)
    session = FakeSession()
    protocol.episode_step(state, wire(AddPoint(1, 1, "positive")), session)
    protocol.episode_step(state, wire(AddPoint(2, 2, "positive")), session)
    assert not state.done  # one extra reply is solicited
    protocol.episode_step(state, wire(Stop()), session)
    assert state.termination == protocol.TERM_STOPPED


def test_episode_budget_exhaustion_on_extra_tool_action():
    state = make_state(max_turns=2)
    session = FakeSession()
    protocol.episode_step(state, wire(AddPoint(1, 1, "positive")), session)
    protocol.episode_step(state, wire(AddPoint(2, 2, "positive")), session)
    protocol.episode_step(state, wire(AddPoint(3, 3, "positive")), session)
    assert state.termination == protocol.TERM_BUDGET
    assert protocol.tool_action_count(state) == 2


def test_episode_parse_failure_and_out_of_bounds():
    state = make_state()
    protocol.episode_step(state, "garbage", FakeSession())
    assert state.termination == protocol.TERM_PARSE_FAILURE

    state = make_state()
    protocol.episode_step(state, wire(AddPoint(99, 3, "positive")), FakeSession())
    assert state.termination == protocol.TERM_PARSE_FAILURE


def test_episode_backend_error():
    state = make_state()
    protocol.episode_step(state, wire(AddPoint(3, 3, "positive")), FakeSession(fail=True))
    assert state.termination == protocol.TERM_BACKEND_ERROR


def test_episode_normalized_mode_denormalizes():
    state = make_state(coord_mode=protocol.COORD_MODE_NORMALIZED)
    session = FakeSession()
    protocol.episode_step(state, wire(AddPoint(1000, 0, "positive")), session)
    assert session.applied == [AddPoint(15, 0, "positive")]


def test_episode_step_after_done_raises():
    state = make_state()
    protocol.episode_step(state, wire(Stop()), FakeSession())
    with pytest.raises(RuntimeError):
        protocol.episode_step(state, wire(Stop()), FakeSession())
