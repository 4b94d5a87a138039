import numpy as np
import torch

from oracles import central_difference
from semcolor.colorspace import RgbImage
from semcolor.eecnn import EeCnnConfig, build_network, init_weights, pad_to_multiple
from semcolor.trainer import normalized_loss

MINI = EeCnnConfig(
    encoder_channels=(8, 8, 8),
    stride2_layers=(1, 2, 3),
    embedding_dim=4,
    fusion_channels=32,
    head_channels=4,
)


def smooth_color_image(n=64, phase=0.0):
    yy, xx = np.mgrid[0:n, 0:n] / n
    r = 0.5 + 0.4 * np.sin(2 * np.pi * (xx + phase))
    g = 0.5 + 0.4 * np.cos(2 * np.pi * yy)
    b = 0.5 + 0.3 * np.sin(2 * np.pi * (xx + yy))
    return RgbImage(np.floor(np.stack([r, g, b], -1) * 255).astype(np.uint8))


def gradient_check(config=MINI, size=8, n_params=20, n_zero=5, seed=0, eps=1e-6):
    """Compare autograd against central differences of the loss.

    Samples ``n_params`` weights whose analytic gradient is non-negligible
    (at 8x8 many 4x4 taps only ever see zero padding) and ``n_zero`` weights
    whose analytic gradient is exactly zero. Returns (relative errors on the
    first set, numeric gradients on the second).
    """
    rng = np.random.default_rng(seed)
    net = build_network(init_weights(config, seed), dtype=torch.float64)
    l = torch.as_tensor(rng.uniform(0, 1, (1, 1, size, size)))
    emb = torch.as_tensor(rng.standard_normal((1, config.embedding_dim)))
    target = torch.as_tensor(rng.uniform(-0.5, 0.5, (1, 2, size, size)))
    scale2 = config.ab_scale**2
    padded, (h, w) = pad_to_multiple(l)

    def loss_value():
        return normalized_loss(net(padded, emb)[..., :h, :w], target) * scale2

    net.zero_grad()
    loss_value().backward()
    params = list(net.parameters())
    flat_grad = torch.cat([p.grad.reshape(-1) for p in params]).numpy()
    offsets = np.concatenate([[0], np.cumsum([p.numel() for p in params])])
    active = np.flatnonzero(np.abs(flat_grad) > 1e-6)
    inactive = np.flatnonzero(flat_grad == 0)
    picks = rng.choice(active, n_params, replace=False)
    zero_picks = rng.choice(inactive, min(n_zero, len(inactive)), replace=False)

    def numeric_at(flat):
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        p = params[k]
        idx = np.unravel_index(int(flat - offsets[k]), p.shape)
        x0 = float(p.data[idx])

        def f(x):
            with torch.no_grad():
                p.data[idx] = x
                return float(loss_value())

        value = central_difference(f, x0, eps)
        with torch.no_grad():
            p.data[idx] = x0
        return value

    errors = []
    for flat in picks:
        analytic = float(flat_grad[flat])
        numeric = numeric_at(flat)
        errors.append(abs(analytic - numeric) / max(abs(analytic), abs(numeric)))
    zeros = np.array([numeric_at(flat) for flat in zero_picks])
    return np.array(errors), zeros


def make_corpus(directory, n=6, size=24):
    """Write ``n`` smooth colour PNGs and return the directory."""
    from PIL import Image

    directory.mkdir(parents=True, exist_ok=True)
    for i in range(n):
        img = smooth_color_image(size, phase=i / n)
        Image.fromarray(img.pixels).save(directory / f"img{i:02d}.png")
    return directory


def write_gray(path, size=24, seed=0):
    from PIL import Image

    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size]
    plane = 60 + 120 * (xx > size // 2) + rng.integers(0, 20, (size, size))
    Image.fromarray(plane.astype(np.uint8), mode="L").save(path)
    return path


def cli_commands(inputs, out):
    """Every CLI command once, writing under ``out``.

    ``inputs`` holds shared read-only files (corpus, gray image, survey
    records); returns a list of (name, argv, output paths).
    """
    from semcolor.analysis import SurveyRecord, save_records

    out.mkdir(parents=True, exist_ok=True)
    corpus = inputs / "corpus"
    gray = inputs / "gray.png"
    ids = inputs / "ids"
    if not corpus.exists():
        make_corpus(corpus)
        write_gray(gray)
        ids.mkdir()
        (ids / "real.txt").write_text("".join(f"r{i:02d}\n" for i in range(20)))
        (ids / "pred.txt").write_text("".join(f"p{i:02d}\n" for i in range(16)))
    ref = corpus / "img00.png"
    net = ["--preset", "tiny"]
    cmds = [
        ("dataset-split", ["dataset-split", "--dir", str(corpus), "--ratio", "0.5", "--size", "16x16",
                           "--out", str(out / "manifest.tsv")], ["manifest.tsv"]),
        ("train", ["train", *net, "--manifest", str(out / "manifest.tsv"), "--epochs", "3",
                   "--batch-size", "2", "--lr", "1e-3", "--patience", "2", "--checkpoint-dir",
                   str(out / "ckpts"), "--checkpoint-every", "1", "--report", str(out / "report.csv"),
                   "--out", str(out / "model.ckpt")],
         ["model.ckpt", "report.csv", "ckpts/best.ckpt", "ckpts/epoch-0002.ckpt"]),
        ("colorize-ee", ["colorize-ee", "--input", str(gray), "--weights", str(out / "model.ckpt"),
                         "--edges", "--edge-threshold", "0.3", "--debug-planes", str(out / "ee-planes"),
                         "--out", str(out / "ee.png")], ["ee.png", "ee-planes/A.csv"]),
        ("colorize-nst", ["colorize-nst", *net, "--input", str(gray), "--reference", str(ref),
                          "--reference", str(corpus / "img03.png"), "--threshold-split", "--window", "9",
                          "--budget", "15", "--lr", "1e-3", "--cache-dir", str(out / "cache"),
                          "--out", str(out / "nst.png")], ["nst.png"]),
        ("analyze saturation", ["analyze", "saturation", "--input", str(out / "ee.png"), "--block-size", "4",
                                "--out", str(out / "sat.csv")], ["sat.csv"]),
        ("analyze hue", ["analyze", "hue", "--input", str(ref), "--bins", "12",
                         "--out", str(out / "hue.csv")], ["hue.csv"]),
        ("survey", ["survey", "--real", str(ids / "real.txt"), "--predicted", str(ids / "pred.txt"),
                    "--seed", "3", "--order-out", str(out / "order.txt"), "--key-out", str(out / "key.json")],
         ["order.txt", "key.json"]),
        ("analyze survey", ["analyze", "survey", "--records", str(out / "records.jsonl"),
                            "--key", str(out / "key.json"), "--out", str(out / "scores.csv")],
         ["scores.csv"]),
    ]

    def records():
        order = (out / "order.txt").read_text().split()
        rng = np.random.default_rng(1)
        recs = [SurveyRecord(f"u{i}", tuple(order), tuple(rng.choice(order, 16, replace=False)))
                for i in range(5)]
        save_records(recs, out / "records.jsonl")

    return [(name, argv, [out / p for p in paths], records if name == "analyze survey" else None)
            for name, argv, paths in cmds]
