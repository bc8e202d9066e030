"""Character, image and HTML renderings of frames."""

import numpy as np

from _itc_common import GridShape
from gridworld import CREATURE, FLOOR, PLAYER, WALL
from itc_decoder import FrameTokens
from render import char_grid, char_rollout, frame_symbols, pgm_bytes, write_rollout_html


SYMBOLS = np.array([[WALL, WALL], [PLAYER, CREATURE]])


def test_char_grid():
    assert char_grid(SYMBOLS) == "██\n@c"


def test_char_rollout_labels():
    text = char_rollout([SYMBOLS, SYMBOLS], labels=["t=0", "t=1"])
    assert text.splitlines() == ["t=  t=", "██  ██", "@c  @c"]


def test_frame_symbols_maps_tokens():
    frame = FrameTokens([1, 1, 0, 2], GridShape(2, 2))
    table = np.array([PLAYER, WALL, CREATURE])
    np.testing.assert_array_equal(frame_symbols(frame, table), SYMBOLS)


def test_pgm_header_and_size():
    raw = pgm_bytes(np.full((3, 2), FLOOR), scale=4)
    header = b"P5\n8 12\n255\n"
    assert raw.startswith(header)
    assert len(raw) == len(header) + 8 * 12
    assert set(raw[len(header):]) == {255}


def test_rollout_html(tmp_path):
    path = tmp_path / "out" / "rollout.html"
    status = write_rollout_html([SYMBOLS, SYMBOLS], [1, 1], str(path), true_count=1)
    assert str(path) in status
    assert "plotly" in path.read_text()
