"""Report figures (PNG) rendered next to the delimited metrics output."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def psnr_ssim_figure(rounds, psnrs, ssims, path) -> None:
    fig, ax1 = plt.subplots(figsize=(5.0, 3.2), dpi=120)
    ax1.plot(rounds, psnrs, "o-", color="tab:blue", label="PSNR")
    ax1.set_xlabel("round")
    ax1.set_ylabel("held-out PSNR [dB]", color="tab:blue")
    ax1.set_xticks(list(rounds))
    ax2 = ax1.twinx()
    ax2.plot(rounds, ssims, "s--", color="tab:orange", label="SSIM")
    ax2.set_ylabel("held-out SSIM", color="tab:orange")
    ax1.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def param_error_figure(rounds, error_dicts, path) -> None:
    """error_dicts: one {param_name: abs_error} per round."""
    names = sorted({k for d in error_dicts for k in d})
    fig, ax = plt.subplots(figsize=(5.0, 3.2), dpi=120)
    for name in names:
        ys = [d.get(name, float("nan")) for d in error_dicts]
        ax.plot(rounds, ys, "o-", label=name)
    ax.set_xlabel("round")
    ax.set_ylabel("absolute parameter error")
    ax.set_xticks(list(rounds))
    ax.grid(True, alpha=0.3)
    if names:
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def loss_figure(stage_losses: dict, path) -> None:
    """stage_losses: {label: [loss per iteration]}."""
    fig, ax = plt.subplots(figsize=(5.0, 3.2), dpi=120)
    for label, ys in stage_losses.items():
        if ys:
            ax.semilogy(range(len(ys)), ys, label=label)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.grid(True, alpha=0.3)
    if stage_losses:
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
