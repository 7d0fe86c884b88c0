/// Matplotlib script written by `compare`; run it inside the output
/// directory.
pub const PLOT_SCRIPT: &str = r#"import csv
import math

import matplotlib.pyplot as plt


def load(name):
    with open(name) as f:
        rows = list(csv.DictReader(f))
    return {k: [float(r[k]) if r[k] else math.nan for r in rows] for k in rows[0]}


def steps(ax, d, key, **kw):
    ax.step(d["t"], d[key], where="post", **kw)


relaxed = load("relaxed_trajectory.csv")
projected = load("projected_trajectory.csv")
ref = [2 + 0.5 * math.sin(t) for t in relaxed["t"]]

fig, axes = plt.subplots(2, 1, sharex=True, figsize=(7, 5))
for ax, key in zip(axes, ("u1", "u2")):
    steps(ax, relaxed, key, label="relaxed")
    steps(ax, projected, key, label="projected")
    ax.set_ylabel(key)
    ax.legend()
axes[-1].set_xlabel("t (s)")
fig.savefig("relaxed_vs_projected_controls.png", dpi=150)

fig, ax = plt.subplots(figsize=(7, 3.5))
ax.plot(relaxed["t"], ref, "k--", label="r(t)")
ax.plot(relaxed["t"], relaxed["x2"], label="x2 relaxed")
ax.plot(projected["t"], projected["x2"], label="x2 projected")
ax.set_xlabel("t (s)")
ax.legend()
fig.savefig("projected_tracking.png", dpi=150)

for tag in ("isto_uptime", "isto_free"):
    d = load(tag + "_trajectory.csv")
    fig, axes = plt.subplots(3, 1, sharex=True, figsize=(7, 7))
    axes[0].plot(d["t"], [2 + 0.5 * math.sin(t) for t in d["t"]], "k--", label="r(t)")
    axes[0].plot(d["t"], d["x1"], label="x1")
    axes[0].plot(d["t"], d["x2"], label="x2")
    axes[0].legend()
    steps(axes[1], d, "u1", label="u1")
    steps(axes[1], d, "u2", label="u2")
    axes[1].legend()
    steps(axes[2], d, "c2", label="c2")
    axes[2].legend()
    axes[-1].set_xlabel("t (s)")
    fig.savefig(tag + ".png", dpi=150)
"#;
