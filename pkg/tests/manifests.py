"""Tiny manifests for every subcommand, shared by CLI and determinism tests."""

from pathlib import Path

BASE = """data=synth://glyphs?n=600&n_test=200&seed=0
hidden_dims=16,16
epochs=3
replicates=2
n_alpha=5
"""

EXTRA = {
    "train": "",
    "trajectory": "perm_source=per_epoch\n",
    "imp": "levels=3\n",
    "transport": "levels=2\n",
    "triplet": "widths=8,16\n",
    "partial": "modes=bottom_up,top_down,put_in,leave_out\n",
    "prune-align": "sparsities=0,0.5\n",
    "instability": "spawn_epochs=0,1\n",
    "landscape": "grid=4,3\n",
}

COMMANDS = ["train", "match", "barrier", *[c for c in EXTRA if c != "train"]]


def write_manifests(root: Path, ckpt_a: Path, ckpt_b: Path) -> dict[str, Path]:
    """Manifest files for all subcommands; match and barrier use the given checkpoints."""
    root.mkdir(parents=True, exist_ok=True)
    out = {}
    for cmd, extra in EXTRA.items():
        out[cmd] = root / f"{cmd}.txt"
        out[cmd].write_text(BASE + extra)
    pair = f"ckpt_a={ckpt_a}\nckpt_b={ckpt_b}\ndata=synth://glyphs?n=600&n_test=200&seed=0\n"
    out["match"] = root / "match.txt"
    out["match"].write_text(pair)
    out["barrier"] = root / "barrier.txt"
    out["barrier"].write_text(pair + "n_alpha=5\n")
    return out
