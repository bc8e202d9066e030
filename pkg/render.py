"""
Frame rendering: UTF-8 character grids, binary PGM images, and a plotly
HTML page for imagined rollouts.
"""

import os
from typing import List, Optional, Sequence

import numpy as np

from gridworld import ALPHABET_SIZE, CREATURE, FLOOR, GOAL, PLAYER, WALL
from itc_decoder import FrameTokens

CELL_CHARS = {FLOOR: "·", WALL: "█", GOAL: "◎", PLAYER: "@", CREATURE: "c"}
CELL_GREY = {FLOOR: 255, WALL: 0, GOAL: 170, PLAYER: 85, CREATURE: 128}
UNKNOWN_CHAR = "?"


def frame_symbols(frame: FrameTokens, token_symbols: np.ndarray) -> np.ndarray:
    """(H, W) symbol grid for a token frame, given the symbol of every token id."""
    return np.asarray(token_symbols)[frame.grid()]


def char_grid(symbols: np.ndarray) -> str:
    return "\n".join("".join(CELL_CHARS.get(int(s), UNKNOWN_CHAR) for s in row) for row in symbols)


def char_rollout(grids: Sequence[np.ndarray], labels: Optional[Sequence[str]] = None) -> str:
    """Frames side by side, separated by two spaces, with an optional label row."""
    rows = [char_grid(g).split("\n") for g in grids]
    width = max(len(r[0]) for r in rows) if rows else 0
    out = []
    if labels:
        out.append("  ".join(str(lbl)[:width].ljust(width) for lbl in labels))
    for i in range(max(len(r) for r in rows) if rows else 0):
        out.append("  ".join(r[i] if i < len(r) else " " * width for r in rows))
    return "\n".join(out)


def pgm_bytes(symbols: np.ndarray, scale: int = 8) -> bytes:
    """Binary P5 image, `scale` pixels per cell, fixed grey level per symbol."""
    grey = np.vectorize(lambda s: CELL_GREY.get(int(s), 200), otypes=[np.uint8])(symbols)
    img = np.kron(grey, np.ones((scale, scale), dtype=np.uint8))
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes()


def write_pgm(symbols: np.ndarray, path: str, scale: int = 8) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as f:
        f.write(pgm_bytes(symbols, scale))
    return f"Wrote {path}"


def rollout_figure(grids: Sequence[np.ndarray], counts: Sequence[int],
                   true_count: Optional[int] = None, title: str = "Imagined rollout"):
    """plotly figure: one heatmap per frame on top, creature count per frame below."""
    import plotly.graph_objects as go
    from plotly.subplots import make_subplots

    n = max(len(grids), 1)
    fig = make_subplots(
        rows=2, cols=n, row_heights=[0.65, 0.35],
        specs=[[{}] * n, [{"colspan": n}] + [None] * (n - 1)],
        subplot_titles=[f"t={i}" for i in range(len(grids))] + ["creatures"],
    )
    for i, g in enumerate(grids):
        fig.add_trace(
            go.Heatmap(z=np.flipud(g), zmin=0, zmax=ALPHABET_SIZE - 1,
                       colorscale="Viridis", showscale=(i == 0)),
            row=1, col=i + 1,
        )
        fig.update_xaxes(visible=False, row=1, col=i + 1)
        fig.update_yaxes(visible=False, row=1, col=i + 1)
    steps: List[int] = list(range(len(counts)))
    fig.add_trace(go.Scatter(x=steps, y=list(counts), mode="lines+markers", name="decoded"),
                  row=2, col=1)
    if true_count is not None:
        fig.add_trace(go.Scatter(x=steps, y=[true_count] * len(steps), mode="lines",
                                 line={"dash": "dash"}, name="true"),
                      row=2, col=1)
    fig.update_layout(title=title, height=420, showlegend=True)
    return fig


def write_rollout_html(grids, counts, path: str, true_count: Optional[int] = None,
                       title: str = "Imagined rollout") -> str:
    fig = rollout_figure(grids, counts, true_count, title)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fig.write_html(path, include_plotlyjs="cdn")
    return f"Wrote {path}"
