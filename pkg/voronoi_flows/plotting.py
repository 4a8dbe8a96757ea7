import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.collections import LineCollection  # noqa: E402

SVG_HASH_SALT = "voronoi-flows"


def plot_loss(report, save_dir, name="train_loss"):
    """训练 / 验证 NLL 曲线"""
    frame = report.to_frame()
    plt.figure(figsize=(8, 4))
    plt.plot(frame["epoch"], frame["train_nll"], label="Train NLL")
    plt.plot(frame["epoch"], frame["val_nll"], label="Val NLL")
    plt.title("Negative log-likelihood (nats)")
    plt.ylabel("NLL")
    plt.xlabel("Epochs")
    plt.legend(loc="upper right")
    path = os.path.join(save_dir, name + ".png")
    plt.savefig(path)
    plt.close()
    return path


def density_svg(density, bounds, segments, path):
    """密度热力图 + 胞腔边界线段，输出为不带时间戳的 SVG

    参数:
        density: grid×grid 矩阵，行对应 y，列对应 x
        bounds: (xmin, xmax, ymin, ymax)
        segments: M×4 的线段 (x0, y0, x1, y1)
    """
    with matplotlib.rc_context({"svg.hashsalt": SVG_HASH_SALT}):
        fig, ax = plt.subplots(figsize=(6, 6))
        ax.imshow(density, origin="lower", extent=bounds, cmap="viridis", interpolation="nearest", aspect="auto")
        if len(segments):
            lines = [[(s[0], s[1]), (s[2], s[3])] for s in segments]
            ax.add_collection(LineCollection(lines, colors="white", linewidths=0.6))
        ax.set_xlim(bounds[0], bounds[1])
        ax.set_ylim(bounds[2], bounds[3])
        ax.set_xlabel("x0")
        ax.set_ylabel("x1")
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
    return path
