"""Matplotlib figures written next to the JSON / TSV outputs."""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
    "savefig.bbox": "tight",
}


def _save(fig, path):
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_error_history(histories, path, title="Normalized error"):
    """``histories`` maps a label to a per-iteration error list."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        for label, hist in histories.items():
            if len(hist):
                ax.semilogy(np.arange(1, len(hist) + 1), hist, label=label, lw=1.2)
        ax.set_xlabel("iteration")
        ax.set_ylabel("normalized error")
        ax.set_title(title)
        if len(histories) > 1:
            ax.legend(frameon=False)
        return _save(fig, path)


def plot_fields(obj, probe, path):
    """Object and probe amplitude and phase in a 2x2 grid."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(2, 2, figsize=(6.0, 5.6))
        panels = [
            (axes[0, 0], np.abs(obj), "object amplitude", "gray", None),
            (axes[0, 1], np.angle(obj), "object phase (rad)", "twilight", (-np.pi, np.pi)),
            (axes[1, 0], np.abs(probe), "probe amplitude", "magma", None),
            (axes[1, 1], np.angle(probe), "probe phase (rad)", "twilight", (-np.pi, np.pi)),
        ]
        for ax, data, title, cmap, lims in panels:
            vmin, vmax = lims if lims else (None, None)
            im = ax.imshow(data, cmap=cmap, vmin=vmin, vmax=vmax, interpolation="nearest")
            ax.set_title(title)
            ax.set_xticks([])
            ax.set_yticks([])
            fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
        return _save(fig, path)


def plot_field(field, path, title="field"):
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(6.0, 2.9))
        for ax, data, t, cmap, lims in ((axes[0], np.abs(field), "amplitude", "gray", (None, None)),
                                        (axes[1], np.angle(field), "phase (rad)", "twilight",
                                         (-np.pi, np.pi))):
            im = ax.imshow(data, cmap=cmap, vmin=lims[0], vmax=lims[1], interpolation="nearest")
            ax.set_title(f"{title} {t}")
            ax.set_xticks([])
            ax.set_yticks([])
            fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
        return _save(fig, path)


def plot_bench(rows, path):
    """Wall-clock time and per-rank traffic against worker count."""
    workers = [r["workers"] for r in rows]
    with plt.rc_context(STYLE):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(7.0, 2.9))
        ax1.bar([str(w) for w in workers], [r["seconds"] for r in rows], color="#4c72b0")
        ax1.set_xlabel("number of workers")
        ax1.set_ylabel("time (s)")
        ax1.set_title("wall clock")
        ax2.plot(workers, [r["bytes_per_rank"] / 1e6 for r in rows], "o-", color="#dd8452")
        ax2.set_xticks(workers)
        ax2.set_xlabel("number of workers")
        ax2.set_ylabel("MB sent per rank")
        ax2.set_title("collective traffic")
        return _save(fig, path)


def plot_stream(entries, path):
    idx = [e["batch_index"] for e in entries]
    errs = [e["result"]["final_error"] if e.get("result") and e["result"].get("final_error")
            is not None else np.nan for e in entries]
    frames = [e["result"]["frames_total"] if e.get("result") else 0 for e in entries]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        ax.semilogy(idx, errs, "o-", label="final error")
        ax.set_xlabel("batch index")
        ax.set_ylabel("normalized error")
        ax.set_xticks(idx)
        ax2 = ax.twinx()
        ax2.step(idx, frames, where="mid", color="gray", alpha=0.6)
        ax2.set_ylabel("frames seen")
        ax.set_title("stream reconstruction")
        return _save(fig, path)
